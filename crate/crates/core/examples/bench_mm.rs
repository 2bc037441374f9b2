use deeptok::tensor::{Tape, Real};
use deeptok::rng::Prng;
fn main() {
    let mut rng = Prng::seeded(1);
    // fc1-like: [8*128, 64] x [64, 256]
    let a_data: Vec<Real> = (0..1024*64).map(|_| rng.normal()).collect();
    let b_data: Vec<Real> = (0..64*256).map(|_| rng.normal()).collect();
    let start = std::time::Instant::now();
    let iters = 200;
    let mut acc = 0.0;
    for _ in 0..iters {
        let t = Tape::new();
        let a = t.constant(&[1024, 64], a_data.clone()).unwrap();
        let b = t.constant(&[64, 256], b_data.clone()).unwrap();
        let c = t.matmul(a, b).unwrap();
        acc += t.data_ref(c)[0];
    }
    let el = start.elapsed().as_secs_f64();
    let flops = 2.0 * 1024.0 * 64.0 * 256.0 * iters as f64;
    println!("matmul: {:.2} GFLOP/s ({acc})", flops / el / 1e9);

    // attention-scores-like batched: [8,4,128,16] x [8,4,16,128]
    let a2: Vec<Real> = (0..8*4*128*16).map(|_| rng.normal()).collect();
    let b2: Vec<Real> = (0..8*4*16*128).map(|_| rng.normal()).collect();
    let start = std::time::Instant::now();
    for _ in 0..iters {
        let t = Tape::new();
        let a = t.constant(&[8,4,128,16], a2.clone()).unwrap();
        let b = t.constant(&[8,4,16,128], b2.clone()).unwrap();
        let c = t.matmul(a, b).unwrap();
        acc += t.data_ref(c)[0];
    }
    let el = start.elapsed().as_secs_f64();
    let flops = 2.0 * 32.0 * 128.0 * 16.0 * 128.0 * iters as f64;
    println!("batched: {:.2} GFLOP/s ({acc})", flops / el / 1e9);
}
