// scratch: does raising the malloc mmap threshold fix tape realloc cost?
use cocgan::tensor::{Tape, Tensor};
use std::time::Instant;

extern "C" {
    fn mallopt(param: i32, value: i32) -> i32;
}

fn main() {
    unsafe {
        mallopt(-3, 1 << 30); // M_MMAP_THRESHOLD
        mallopt(-1, 1 << 30); // M_TRIM_THRESHOLD
    }
    let n = 12544 * 128;
    let h_t = Tensor::new(vec![0.25f32; n], &[12544, 128]);
    // warm
    for _ in 0..3 {
        let mut tp = Tape::new();
        let xv = tp.input(&h_t, true);
        let _ = tp.sigmoid(xv);
    }
    let t1 = Instant::now();
    for _ in 0..20 {
        let mut tp = Tape::new();
        let xv = tp.input(&h_t, true);
        let _ = tp.sigmoid(xv);
    }
    println!("sigmoid fresh tapes with mallopt: {:?}/op", t1.elapsed() / 20);
}
