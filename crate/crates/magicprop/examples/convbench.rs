//! Rough conv throughput probe used while sizing the desk-scale nets.
use magicprop::rng::StreamRng;
use magicprop::tensor::{Tape, Tensor};
use std::time::Instant;

fn bench(name: &str, b: usize, ci: usize, h: usize, co: usize, k: usize, stride: usize, iters: usize) {
    let mut rng = StreamRng::new(1, 0);
    let x = Tensor::randn(&[b, ci, h, h], &mut rng);
    let w = Tensor::randn(&[co, ci, k, k], &mut rng).scaled(0.05).unwrap();
    let bias = Tensor::zeros(&[co]);
    let mut tape = Tape::new(false);
    let t0 = Instant::now();
    for _ in 0..iters {
        let y = tape.conv2d(&x, &w, &bias, stride, k / 2).unwrap();
        std::hint::black_box(y.data()[0]);
    }
    let dt = t0.elapsed().as_secs_f64() / iters as f64;
    let oh = (h + 2 * (k / 2) - k) / stride + 1;
    let macs = (b * co * ci * k * k * oh * oh) as f64;
    println!("{name}: {:.2} ms/iter, {:.2} GMAC/s", dt * 1e3, macs / dt / 1e9);
}

fn main() {
    bench("codec c1 16x[3->32]@64 s2", 16, 3, 64, 32, 3, 2, 5);
    bench("codec c2 16x[32->64]@32 s2", 16, 32, 32, 64, 3, 2, 5);
    bench("codec c3 16x[64->128]@16 s2", 16, 64, 16, 128, 3, 2, 5);
    bench("prop rb 16x[64->64]@8 s1", 16, 64, 8, 64, 3, 1, 20);
    bench("prop rb 16x[128->128]@4 s1", 16, 128, 4, 128, 3, 1, 20);
    bench("dec up 16x[32->16]@32 s1", 16, 32, 32, 16, 3, 1, 5);
}
