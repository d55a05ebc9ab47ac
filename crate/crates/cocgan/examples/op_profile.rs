// scratch: time individual tape ops at training shapes
use cocgan::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn t<F: FnMut()>(name: &str, mut f: F) {
    let n = 10;
    let t0 = Instant::now();
    for _ in 0..n { f(); }
    println!("{name}: {:?}", t0.elapsed() / n);
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let big: Vec<f32> = (0..12544 * 34).map(|_| rng.random_range(-1.0..1.0)).collect();
    let big_t = Tensor::new(big, &[12544, 34]);
    let w_t = Tensor::new((0..34 * 64).map(|_| rng.random_range(-1.0f32..1.0)).collect(), &[34, 64]);
    let b_t = Tensor::new(vec![0.1f32; 64], &[64]);
    let mlp_in = Tensor::new((0..12544 * 32).map(|_| rng.random_range(-1.0f32..1.0)).collect(), &[12544, 32]);
    let w1_t = Tensor::new((0..32 * 128).map(|_| rng.random_range(-1.0f32..1.0)).collect(), &[32, 128]);
    let b1_t = Tensor::new(vec![0.1f32; 128], &[128]);
    let h_t = Tensor::new((0..12544 * 128).map(|_| rng.random_range(-1.0f32..1.0)).collect(), &[12544, 128]);
    let g_t = Tensor::new(vec![1.0f32; 32], &[32]);

    t("linear [12544,34]x[34,64]", || {
        let mut tape = Tape::new();
        let x = tape.input(&big_t, false);
        let w = tape.input(&w_t, true);
        let b = tape.input(&b_t, true);
        let _ = tape.linear(x, w, b);
    });
    t("linear mlp [12544,32]x[32,128]", || {
        let mut tape = Tape::new();
        let x = tape.input(&mlp_in, false);
        let w = tape.input(&w1_t, true);
        let b = tape.input(&b1_t, true);
        let _ = tape.linear(x, w, b);
    });
    t("gelu [12544,128]", || {
        let mut tape = Tape::new();
        let x = tape.input(&h_t, true);
        let _ = tape.gelu(x);
    });
    t("layer_norm [12544,32]", || {
        let mut tape = Tape::new();
        let x = tape.input(&mlp_in, true);
        let g = tape.input(&g_t, true);
        let b = tape.input(&g_t, true);
        let _ = tape.layer_norm(x, g, b);
    });
    t("l2norm [12544,16]", || {
        let mut tape = Tape::new();
        let x = tape.input(&mlp_in, true);
        let _ = tape.l2_normalize_rows(x);
    });
    t("sigmoid [12544,128]", || {
        let mut tape = Tape::new();
        let x = tape.input(&h_t, true);
        let _ = tape.sigmoid(x);
    });
    t("input(clone) [12544,128]", || {
        let mut tape = Tape::new();
        let _ = tape.input(&h_t, true);
    });
    t("tanh [12544,128]", || {
        let mut tape = Tape::new();
        let x = tape.input(&h_t, true);
        let _ = tape.tanh(x);
    });
    // full linear forward+backward
    t("linear fwd+bwd [12544,32]x[32,128]", || {
        let mut tape = Tape::new();
        let x = tape.input(&mlp_in, true);
        let w = tape.input(&w1_t, true);
        let b = tape.input(&b1_t, true);
        let y = tape.linear(x, w, b);
        let l = tape.mean_all(y);
        tape.backward(l).unwrap();
    });
}
