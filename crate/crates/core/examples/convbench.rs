use exitbench_core::nn::Conv2d;
use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (cin, cout, hw, batch) in [(8usize, 8usize, 32usize, 64usize), (16, 16, 16, 64), (32, 32, 8, 64), (16, 16, 32, 64)] {
        let conv = Conv2d::new(cin, cout, 3, 1, 1, &mut rng);
        let x = Array4::from_shape_fn((batch, cin, hw, hw), |_| 0.5f32);
        let flops_fwd = 2.0 * (batch * hw * hw * cout * cin * 9) as f64;
        // warmup
        let y = conv.forward(&x);
        let t = Instant::now();
        let mut n = 0;
        while t.elapsed().as_secs_f64() < 1.0 { let _ = conv.forward(&x); n += 1; }
        let fwd_gflops = flops_fwd * n as f64 / t.elapsed().as_secs_f64() / 1e9;
        let dy = y.clone();
        let t = Instant::now();
        let mut n = 0;
        while t.elapsed().as_secs_f64() < 1.0 { let _ = conv.backward(&x, &dy); n += 1; }
        let bwd_gflops = 2.0 * flops_fwd * n as f64 / t.elapsed().as_secs_f64() / 1e9;
        println!("conv {cin}->{cout} @{hw}x{hw} b{batch}: fwd {:.1} GF/s, bwd {:.1} GF/s", fwd_gflops, bwd_gflops);
    }
}
