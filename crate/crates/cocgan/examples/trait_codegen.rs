// scratch: isolate trait-dispatch codegen from tape machinery
use cocgan::tensor::Elem;
use std::time::Instant;

fn generic_sigmoid<E: Elem>(src: &[E]) -> Vec<E> {
    src.iter().map(|&v| E::sigmoid(v)).collect()
}

fn main() {
    let n = 12544 * 128;
    let src: Vec<f32> = (0..n).map(|i| (i as f32 * 0.001) % 8.0 - 4.0).collect();
    let mut acc = 0.0;
    let t = Instant::now();
    for _ in 0..20 {
        let out = generic_sigmoid(&src);
        acc += out[12345];
    }
    println!("generic sigmoid via Elem: {:?}/iter acc={acc}", t.elapsed() / 20);

    let t2 = Instant::now();
    for _ in 0..20 {
        let out: Vec<f32> = src.iter().map(|&v| {
            let e = f32::exp_bulk(-v);
            1.0 / (1.0 + e)
        }).collect();
        acc += out[12345];
    }
    println!("direct f32 exp_bulk: {:?}/iter acc={acc}", t2.elapsed() / 20);

    // NaN scan cost
    let big = vec![0.5f32; n];
    let t3 = Instant::now();
    for _ in 0..20 {
        if let Some(i) = big.iter().position(|v| !v.is_finite()) { acc += i as f32; }
    }
    println!("finite-scan: {:?}/iter", t3.elapsed() / 20);
}
