// scratch: discriminator stage timing
use cocgan::cluster::{ClusterBlock, PointReducer};
use cocgan::tensor::{ParamBank, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    cocgan::tensor::tune_allocator();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut bank = ParamBank::<f32>::new();
    let batch = 64;
    let n_it = 5;

    let red1 = PointReducer::new(&mut bank, "r1", 2, 1, 32, &mut rng).unwrap();
    let blk1 = ClusterBlock::new(&mut bank, "b1", 32, 4, 16, 4, 1, &mut rng).unwrap();
    let blk2 = ClusterBlock::new(&mut bank, "b2", 64, 4, 16, 8, 1, &mut rng).unwrap();

    let img = Tensor::new(vec![0.1f32; batch * 784], &[batch * 784, 1]);
    let x14 = Tensor::new(vec![0.1f32; batch * 196 * 32], &[batch * 196, 32]);
    let x7 = Tensor::new(vec![0.1f32; batch * 49 * 64], &[batch * 49, 64]);

    macro_rules! time_it {
        ($name:expr, $body:expr) => {{
            for _ in 0..2 { $body; }
            let t = Instant::now();
            for _ in 0..n_it { $body; }
            println!("{}: {:?}", $name, t.elapsed() / n_it);
        }};
    }

    time_it!("reducer 784->196", {
        let mut t = Tape::new();
        let x = t.input(&img, false);
        let _ = red1.forward(&mut t, &bank, x, batch, 28, 28).unwrap();
    });
    time_it!("S1 block fwd (n=196 d=32)", {
        let mut t = Tape::new();
        let x = t.input(&x14, false);
        let _ = blk1.forward(&mut t, &bank, x, batch, 14, 14, None).unwrap();
    });
    time_it!("S2 block fwd (n=49 d=64)", {
        let mut t = Tape::new();
        let x = t.input(&x7, false);
        let _ = blk2.forward(&mut t, &bank, x, batch, 7, 7, None).unwrap();
    });
    time_it!("S1 block fwd+bwd", {
        let mut t = Tape::new();
        let x = t.input(&x14, false);
        let y = blk1.forward(&mut t, &bank, x, batch, 14, 14, None).unwrap();
        let l = t.mean_all(y);
        t.backward(l).unwrap();
    });
}
