use conadv_core::tensor::gemm_nn;
use std::time::Instant;

fn bench(m: usize, k: usize, n: usize, reps: usize) {
    let a = vec![1.0f64; m * k];
    let b = vec![1.0f64; k * n];
    let mut c = vec![0.0f64; m * n];
    let t0 = Instant::now();
    for _ in 0..reps {
        gemm_nn(m, k, n, 1.0, &a, &b, &mut c);
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 2.0 * (m * k * n * reps) as f64;
    println!("{}x{}x{} reps={}: {:.3}s  {:.2} GFLOP/s", m, k, n, reps, dt, flops / dt / 1e9);
}

fn main() {
    bench(16, 9, 32768, 20);    // conv1 im2col chunk (16x16 img, chunk 128)
    bench(32, 144, 8192, 20);   // conv2 im2col chunk
    bench(1024, 784, 256, 10);  // MLP dense fwd
    bench(256, 1024, 784, 10);  // MLP dense bwd-ish
    bench(512, 512, 512, 10);   // square reference
}
