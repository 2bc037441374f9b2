// Scratch harness for sizing the tokenizer-reconstruction run.
use deeptok::config::PipelineConfig;
use deeptok::data::{make_splits, CorpusConfig};
use deeptok::diffusion::{psnr, DdimOptions};
use deeptok::harness::{decode_pair, reconstruct};
use deeptok::rng::Prng;
use deeptok::tensor::Real;
use deeptok::tokenizer::zero_out;
use deeptok::train::train_tokenizer;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(300);
    let width: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(48);
    let layers: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2);
    let batch: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(6);
    let cfg = PipelineConfig {
        seed: 0,
        den_width: width,
        den_layers: layers,
        tok_steps: steps,
        tok_batch: batch,
        checkpoint_every: 0,
        ..PipelineConfig::default()
    };
    let cc = CorpusConfig { frame_size: cfg.frame_size, clip_len: cfg.clip_len };
    let t0 = std::time::Instant::now();
    let splits = make_splits(&cc, 64, 8, 8, 0).unwrap();
    println!("corpus: {:.1}s", t0.elapsed().as_secs_f64());

    let dir = std::env::temp_dir().join("tune8");
    let t0 = std::time::Instant::now();
    let (bundle, report) = train_tokenizer(&cfg, &splits.train, &dir, None).unwrap();
    println!(
        "train {} steps: {:.1}s, loss {:.4} -> {:.4}",
        steps,
        t0.elapsed().as_secs_f64(),
        report.initial_smoothed,
        report.final_smoothed
    );

    let t0 = std::time::Instant::now();
    let f = cfg.stride;
    let px = cfg.frame_size * cfg.frame_size;
    let mut recon_acc = 0.0;
    let mut noise_acc = 0.0;
    let mut zero_acc = 0.0;
    let n = 6;
    for (i, clip) in splits.val.clips.iter().take(n).enumerate() {
        let ddim = DdimOptions { steps: 50, cfg_scale: 1.5, rescale: 0.7, seed: 100 + i as u64 };
        let (_, score) = reconstruct(&bundle, clip, 0, &ddim).unwrap();
        recon_acc += score;
        let mut truth = Vec::new();
        for t in 0..f {
            truth.extend(clip.frame_real(t));
        }
        let mut nrng = Prng::for_purpose(7, "noise", i as u64);
        let noise: Vec<Real> = (0..truth.len()).map(|_| nrng.uniform_range(-1.0, 1.0)).collect();
        noise_acc += psnr(&noise, &truth, 2.0);
        let head = clip.frame_real(0);
        let rear = clip.frame_real(f);
        let sets = bundle.tokenize_frames(&[&head, &rear]).unwrap();
        let zh = zero_out(&sets[0], sets[0].n_q).unwrap();
        let zr = zero_out(&sets[1], sets[1].n_q).unwrap();
        let zrec = decode_pair(&bundle, &zh, &zr, &ddim).unwrap();
        zero_acc += psnr(&zrec, &truth, 2.0);
    }
    println!(
        "recon {:.2} dB | noise {:.2} dB | zeroed {:.2} dB | margins: vs-noise {:.2}, vs-zero {:.2} | eval {:.1}s",
        recon_acc / n as Real,
        noise_acc / n as Real,
        zero_acc / n as Real,
        recon_acc / n as Real - noise_acc / n as Real,
        recon_acc / n as Real - zero_acc / n as Real,
        t0.elapsed().as_secs_f64()
    );
}
