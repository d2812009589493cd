use std::time::Instant;

fn main() {
    let (m, k, n) = (4096usize, 128usize, 128usize);
    let a: Vec<f64> = (0..m * k).map(|i| ((i * 31 % 97) as f64) / 97.0 - 0.5).collect();
    let b: Vec<f64> = (0..k * n).map(|i| ((i * 17 % 89) as f64) / 89.0 - 0.5).collect();
    let flops = 2.0 * (m * k * n) as f64;

    let mut times = Vec::new();
    let mut c = vec![0.0; m * n];
    for _ in 0..30 {
        c.iter_mut().for_each(|v| *v = 0.0);
        let t = Instant::now();
        evpino_core::bench_matmul(&a, &b, &mut c, m, k, n);
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let med = times[times.len() / 2];
    println!("matmul median {:.3} ms -> {:.1} GFLOP/s (min {:.1})", med * 1e3, flops / med / 1e9, flops / times[0] / 1e9);
    std::hint::black_box(&c);
}
