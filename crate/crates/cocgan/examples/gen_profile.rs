// scratch: per-piece generator timing
use cocgan::cluster::{ClusterBlock, PointIncreaser};
use cocgan::tensor::{ParamBank, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    cocgan::tensor::tune_allocator();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut bank = ParamBank::<f32>::new();
    let batch = 64;

    let inc3 = PointIncreaser::new(&mut bank, "i3", 7, 32, 1, &mut rng).unwrap();
    let blk3 = ClusterBlock::new(&mut bank, "b3", 1, 4, 16, 4, 1, &mut rng).unwrap();
    let x16 = Tensor::new(vec![0.1f32; batch * 16 * 32], &[batch * 16, 32]);

    // warm
    for _ in 0..2 {
        let mut t = Tape::new();
        let xv = t.input(&x16, false);
        let (up, h, w) = inc3.forward(&mut t, &bank, xv, batch, 4, 4).unwrap();
        let _ = blk3.forward(&mut t, &bank, up, batch, h, w, None).unwrap();
    }
    let t0 = Instant::now();
    let n_it = 5;
    for _ in 0..n_it {
        let mut t = Tape::new();
        let xv = t.input(&x16, false);
        let (up, _, _) = inc3.forward(&mut t, &bank, xv, batch, 4, 4).unwrap();
        let _ = up;
    }
    println!("inc3 (16->784 pts): {:?}", t0.elapsed() / n_it);

    let t1 = Instant::now();
    for _ in 0..n_it {
        let mut t = Tape::new();
        let xv = t.input(&x16, false);
        let (up, h, w) = inc3.forward(&mut t, &bank, xv, batch, 4, 4).unwrap();
        let _ = blk3.forward(&mut t, &bank, up, batch, h, w, None).unwrap();
    }
    println!("inc3+blk3 (d=1, n=784): {:?}", t1.elapsed() / n_it);

    // block at S1: d=64 n=4
    let blk1 = ClusterBlock::new(&mut bank, "b1", 64, 4, 16, 4, 1, &mut rng).unwrap();
    let x4 = Tensor::new(vec![0.1f32; batch * 4 * 64], &[batch * 4, 64]);
    let t2 = Instant::now();
    for _ in 0..n_it {
        let mut t = Tape::new();
        let xv = t.input(&x4, false);
        let _ = blk1.forward(&mut t, &bank, xv, batch, 2, 2, None).unwrap();
    }
    println!("blk1 (d=64, n=4): {:?}", t2.elapsed() / n_it);
}
