// scratch: raw gemm path comparison at the shapes that matter
use cocgan::tensor::Elem;
use std::time::Instant;

fn mm_direct(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    unsafe {
        matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 1.0, c.as_mut_ptr(), n as isize, 1);
    }
}

fn main() {
    for &(m, k, n) in &[(12544usize, 34usize, 16usize), (12544, 32, 128), (12544, 128, 32), (3136, 66, 16), (50176, 3, 16), (12544, 64, 32)] {
        let a = vec![0.5f32; m * k];
        let b = vec![0.25f32; k * n];
        let mut c = vec![0.0f32; m * n];
        let it = 20;
        let t0 = Instant::now();
        for _ in 0..it { f32::gemm_nn(m, k, n, 1.0, &a, &b, &mut c); }
        let mine = t0.elapsed() / it;
        let t1 = Instant::now();
        for _ in 0..it { mm_direct(m, k, n, &a, &b, &mut c); }
        let lib = t1.elapsed() / it;
        let gf_mine = 2.0 * (m*k*n) as f64 / mine.as_secs_f64() / 1e9;
        let gf_lib = 2.0 * (m*k*n) as f64 / lib.as_secs_f64() / 1e9;
        println!("{m}x{k}x{n}: dispatch {mine:?} ({gf_mine:.1} GF/s)  mm {lib:?} ({gf_lib:.1} GF/s)");
    }
}
