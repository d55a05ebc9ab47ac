// scratch: clean fresh-tape timings for D and G forward/backward
use cocgan::model::{Discriminator, Generator, ModelConfig};
use cocgan::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    cocgan::tensor::tune_allocator();
    let gen = Generator::<f32>::new(ModelConfig::generator(1), 1).unwrap();
    let disc = Discriminator::<f32>::new(ModelConfig::discriminator(1, true), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = 64;
    let imgs_t = Tensor::new(vec![0.3f32; batch * 784], &[batch, 784]);

    for _ in 0..2 {
        let mut t = Tape::new();
        let iv = t.input(&imgs_t, false);
        let s = disc.forward(&mut t, iv, None, None).unwrap();
        let l = t.mean_all(s);
        t.backward(l).unwrap();
    }
    let it = 5;
    let t0 = Instant::now();
    for _ in 0..it {
        let mut t = Tape::new();
        let iv = t.input(&imgs_t, false);
        let _ = disc.forward(&mut t, iv, None, None).unwrap();
    }
    println!("D fwd fresh: {:?}", t0.elapsed() / it);
    let t1 = Instant::now();
    for _ in 0..it {
        let mut t = Tape::new();
        let iv = t.input(&imgs_t, false);
        let s = disc.forward(&mut t, iv, None, None).unwrap();
        let l = t.mean_all(s);
        t.backward(l).unwrap();
    }
    println!("D fwd+bwd fresh: {:?}", t1.elapsed() / it);
    let z = gen.sample_noise(batch, &mut rng);
    let t2 = Instant::now();
    for _ in 0..it {
        let mut t = Tape::new();
        let zv = t.input(&z, false);
        let _ = gen.forward(&mut t, zv, None).unwrap();
    }
    println!("G fwd fresh: {:?}", t2.elapsed() / it);
    let t3 = Instant::now();
    for _ in 0..it {
        let mut t = Tape::new();
        let zv = t.input(&z, false);
        let im = gen.forward(&mut t, zv, None).unwrap();
        let s = disc.forward(&mut t, im, None, None).unwrap();
        let l = t.mean_all(s);
        t.backward(l).unwrap();
    }
    println!("G+D fwd+bwd fresh: {:?}", t3.elapsed() / it);
}
