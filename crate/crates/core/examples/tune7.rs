// Scratch harness for sizing the bimodal head-comparison run.
use deeptok::eval::BimodalTask;
use deeptok::gmm::{HeadConfig, HeadKind};
use deeptok::harness::{bimodal_generation_coverage, train_bimodal_head, BimodalTrainOptions};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(600);
    let k: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(4);
    let task = BimodalTask::default();
    let opts = BimodalTrainOptions { steps, ..BimodalTrainOptions::default() };

    let t0 = std::time::Instant::now();
    let (gmm, gmm_loss) = train_bimodal_head(&task, HeadConfig::new(HeadKind::Gmm, k, task.dim), &opts).unwrap();
    println!("gmm trained in {:.1}s, final loss {gmm_loss:.4}", t0.elapsed().as_secs_f64());
    let cov = bimodal_generation_coverage(&task, &gmm, 100, 0.2, 1234).unwrap();
    println!(
        "gmm: within0.2 {:.3}, hits {:?}, mean_nearest {:.4}",
        cov.within_radius, cov.hit_fraction, cov.mean_nearest
    );

    let t0 = std::time::Instant::now();
    let (l2, l2_loss) = train_bimodal_head(&task, HeadConfig::new(HeadKind::L2, 1, task.dim), &opts).unwrap();
    println!("l2 trained in {:.1}s, final loss {l2_loss:.4}", t0.elapsed().as_secs_f64());
    let cov2 = bimodal_generation_coverage(&task, &l2, 100, 0.2, 1234).unwrap();
    let half = task.inter_mode_distance() / 2.0;
    println!(
        "l2: mean dists {:?} (need >= {half:.4}), mean_nearest {:.4} | ratio gmm/l2 nearest: {:.2}",
        cov2.mean_distance,
        cov2.mean_nearest,
        cov2.mean_nearest / cov.mean_nearest.max(1e-12)
    );
}
