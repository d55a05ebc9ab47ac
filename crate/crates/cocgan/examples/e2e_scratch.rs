// scratch: timing + end-to-end gradient connectivity
use cocgan::model::{Discriminator, Generator, ModelConfig};
use cocgan::tensor::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    cocgan::tensor::tune_allocator();
    let gen = Generator::<f32>::new(ModelConfig::generator(1), 1).unwrap();
    let disc = Discriminator::<f32>::new(ModelConfig::discriminator(1, true), 2).unwrap();
    println!("gen params: {}", gen.bank.total_params());
    println!("disc params: {}", disc.bank.total_params());
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let batch = 64;
    let t0 = Instant::now();
    let mut tape = Tape::new();
    let z = gen.sample_noise(batch, &mut rng);
    let zv = tape.input(&z, false);
    let imgs = gen.forward(&mut tape, zv, None).unwrap();
    println!("gen fwd {}x: {:?} shape {:?}", batch, t0.elapsed(), tape.shape(imgs));
    let t1 = Instant::now();
    let score = disc.forward(&mut tape, imgs, None, None).unwrap();
    println!("disc fwd: {:?} shape {:?}", t1.elapsed(), tape.shape(score));
    let t2 = Instant::now();
    let loss = tape.mean_all(score);
    tape.backward(loss).unwrap();
    println!("backward: {:?}", t2.elapsed());
    println!("tape nodes: {}", tape.len());

    // gradient reaches generator params?
    let mut gbank = gen.bank.clone();
    tape.export_grads(&mut gbank);
    let total_grad: f64 = gbank.iter().map(|(_, t)| t.grad.as_ref().map(|g| g.iter().map(|v| v.abs() as f64).sum::<f64>()).unwrap_or(0.0)).sum();
    println!("sum |grad| over gen params: {:.6e}", total_grad);

    // and to the seed? (make z require grad)
    let mut tape2 = Tape::new();
    let mut z2 = gen.sample_noise(4, &mut rng);
    z2.requires_grad = true;
    let zv2 = tape2.input(&z2, true);
    let imgs2 = gen.forward(&mut tape2, zv2, None).unwrap();
    let score2 = disc.forward(&mut tape2, imgs2, None, None).unwrap();
    let loss2 = tape2.mean_all(score2);
    tape2.backward(loss2).unwrap();
    let zg: f64 = tape2.grad(zv2).unwrap().iter().map(|v| v.abs() as f64).sum();
    println!("sum |grad| at seed: {:.6e}", zg);

    // estimate per-step wgan cost: 5 critic x (2 disc fwd+bwd) + 1 gen update
    let t3 = Instant::now();
    for _ in 0..3 {
        let mut t = Tape::new();
        let z = gen.sample_noise(batch, &mut rng);
        let zv = t.input(&z, false);
        let im = gen.forward(&mut t, zv, None).unwrap();
        let sc = disc.forward(&mut t, im, None, None).unwrap();
        let l = t.mean_all(sc);
        t.backward(l).unwrap();
    }
    println!("3x full G+D fwd+bwd (batch {batch}): {:?}", t3.elapsed());
}
