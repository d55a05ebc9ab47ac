// scratch: op-level timing inside the big S3 cluster block
use cocgan::tensor::{ParamBank, Tape, Tensor};
use std::time::Instant;

fn main() {
    cocgan::tensor::tune_allocator();
    let rows = 64 * 784;
    let x1 = Tensor::new(vec![0.1f32; rows * 1], &[rows, 1]);
    let x16 = Tensor::new(vec![0.1f32; rows * 16], &[rows, 16]);
    let x64 = Tensor::new(vec![0.2f32; rows * 64], &[rows, 64]);
    let _ = ParamBank::<f32>::new();
    let n_it = 10;
    macro_rules! time_op {
        ($name:expr, $body:expr) => {{
            // warm
            for _ in 0..2 { let _ = $body; }
            let t = Instant::now();
            for _ in 0..n_it { let _ = $body; }
            println!("{}: {:?}", $name, t.elapsed() / n_it);
        }};
    }
    time_op!("layer_norm [50176,1]", {
        let mut t = Tape::new();
        let x = t.input(&x1, true);
        let g = t.constant(&[1.0], &[1]);
        let b = t.constant(&[0.0], &[1]);
        t.layer_norm(x, g, b)
    });
    time_op!("l2norm [50176,16]", {
        let mut t = Tape::new();
        let x = t.input(&x16, true);
        t.l2_normalize_rows(x)
    });
    time_op!("slice_cols [50176,64]->16", {
        let mut t = Tape::new();
        let x = t.input(&x64, true);
        t.slice_cols(x, 16, 16)
    });
    time_op!("seg_matmul_const c=1 [50176,16]", {
        let mut t = Tape::new();
        let x = t.input(&x16, true);
        t.seg_matmul_const(vec![1.0f32 / 784.0; 784], 1, 784, x)
    });
    time_op!("seg_matmul_nt 64segs 1x784 d16", {
        let mut t = Tape::new();
        let a = t.input(&Tensor::new(vec![0.1f32; 64 * 16], &[64, 16]), true);
        let b = t.input(&x16, true);
        t.seg_matmul_nt(a, b, 1, 784)
    });
    let idx: Vec<u32> = (0..rows as u32).map(|i| i / 784).collect();
    time_op!("scatter_add [50176,16]->[64,16]", {
        let mut t = Tape::new();
        let x = t.input(&x16, true);
        t.scatter_add_rows(x, &idx, 64)
    });
    time_op!("gather_rows [64,16]->[50176,16]", {
        let mut t = Tape::new();
        let x = t.input(&Tensor::new(vec![0.1f32; 64 * 16], &[64, 16]), true);
        t.gather_rows(x, &idx)
    });
    time_op!("linear [50176,3]x[3,64]", {
        let mut t = Tape::new();
        let x = t.input(&Tensor::new(vec![0.1f32; rows * 3], &[rows, 3]), true);
        let w = t.input(&Tensor::new(vec![0.1f32; 3 * 64], &[3, 64]), true);
        let b = t.input(&Tensor::new(vec![0.0f32; 64], &[64]), true);
        t.linear(x, w, b)
    });
    time_op!("linear fuse [50176,64]x[64,1]", {
        let mut t = Tape::new();
        let x = t.input(&x64, true);
        let w = t.input(&Tensor::new(vec![0.1f32; 64], &[64, 1]), true);
        let b = t.input(&Tensor::new(vec![0.0f32; 1], &[1]), true);
        t.linear(x, w, b)
    });
    time_op!("concat_cols 4x[50176,16]", {
        let mut t = Tape::new();
        let a = t.input(&x16, true);
        let b = t.input(&x16, true);
        let c = t.input(&x16, true);
        let d = t.input(&x16, true);
        t.concat_cols(&[a, b, c, d])
    });
    time_op!("gather_elems 50176 of [64,784]", {
        let mut t = Tape::new();
        let x = t.input(&Tensor::new(vec![0.1f32; 64 * 784], &[64, 784]), true);
        let ii: Vec<u32> = (0..rows as u32).map(|i| i % (64 * 784) as u32).collect();
        t.gather_elems(x, &ii)
    });
}
