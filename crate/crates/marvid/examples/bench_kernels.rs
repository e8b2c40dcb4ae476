//! Rough single-core throughput check for the matmul-dominated training
//! step. Run with --release (or the optimized dev profile) to get numbers
//! representative of training.

use std::time::Instant;

use marvid::tensor::Tensor;

fn bench(m: usize, k: usize, n: usize, reps: usize) {
    let a = Tensor::<f32>::param(&[m, k], (0..m * k).map(|i| (i as f32 * 0.001).sin()).collect())
        .unwrap();
    let b = Tensor::<f32>::param(&[k, n], (0..k * n).map(|i| (i as f32 * 0.002).cos()).collect())
        .unwrap();
    // Forward + backward, approximating a training step's per-matmul cost.
    let t0 = Instant::now();
    for _ in 0..reps {
        a.zero_grad();
        b.zero_grad();
        let c = a.matmul(&b).unwrap().sum_all();
        c.backward().unwrap();
    }
    let dt = t0.elapsed().as_secs_f64();
    // 3 matmuls worth of MACs per iteration (fwd, dA, dB).
    let macs = 3.0 * (m * k * n * reps) as f64;
    println!(
        "{m}x{k}x{n} fwd+bwd: {:>8.1} us/iter, {:>6.2} GMAC/s",
        dt / reps as f64 * 1e6,
        macs / dt / 1e9
    );
}

fn main() {
    for &(m, k, n) in &[
        (30usize, 128usize, 128usize),
        (120, 128, 128),
        (120, 128, 256),
        (320, 64, 64),
        (320, 64, 128),
        (1280, 64, 64),
        (512, 512, 512),
    ] {
        bench(m, k, n, 200);
    }
}
