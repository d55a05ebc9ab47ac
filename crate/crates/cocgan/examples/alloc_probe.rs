// scratch: allocator behavior for tape-shaped allocation patterns
use cocgan::tensor::{Tape, Tensor};
use std::time::Instant;

fn main() {
    let n = 12544 * 128;
    let h_t = Tensor::new(vec![0.25f32; n], &[12544, 128]);

    // many ops on ONE long-lived tape
    let mut tape = Tape::new();
    let x = tape.input(&h_t, true);
    let t0 = Instant::now();
    let mut v = x;
    for _ in 0..20 {
        v = tape.sigmoid(v);
    }
    println!("sigmoid on shared tape: {:?}/op", t0.elapsed() / 20);

    // fresh tape per op (drop in between)
    let t1 = Instant::now();
    for _ in 0..20 {
        let mut tp = Tape::new();
        let xv = tp.input(&h_t, true);
        let _ = tp.sigmoid(xv);
    }
    println!("sigmoid on fresh tapes: {:?}/op(incl input)", t1.elapsed() / 20);
}
