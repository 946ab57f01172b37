// Temporary development harness; not part of the deliverable.
use dynsplat::synth::{build_dataset, standard_scene};
use dynsplat::train::{evaluate, TrainConfig, Trainer};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let scene = args.get(1).map(|s| s.as_str()).unwrap_or("translate");
    let coarse: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(500);
    let fine: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1000);

    let script = standard_scene(scene).unwrap();
    let t0 = std::time::Instant::now();
    let ds = build_dataset::<f32>(&script).unwrap();
    eprintln!("dataset built in {:?} ({} frames)", t0.elapsed(), ds.frames.len());

    let mut cfg = TrainConfig::desk_scale();
    cfg.coarse_iters = coarse;
    cfg.fine_iters = fine;
    cfg.densify_start = cfg.densify_start.min(fine / 10);
    cfg.densify_end = cfg.densify_end.min(fine * 8 / 10);
    let mut trainer = Trainer::new(&ds, cfg.clone()).unwrap();
    eprintln!("initial anchors: {}", trainer.system.model.len());

    let t0 = std::time::Instant::now();
    trainer.train_coarse(&ds).unwrap();
    eprintln!("coarse {} steps in {:?}", coarse, t0.elapsed());
    for r in trainer.log.iter().filter(|r| r.step % 100 == 0) {
        eprintln!("  step {:5} {} loss {:.4} psnr {:.2} anchors {}", r.step, r.stage, r.total, r.psnr, r.anchors);
    }
    let train_idx = ds.train_frames(&cfg.holdout_cams);
    let rep = evaluate(&trainer.system, &cfg, &ds, &train_idx).unwrap();
    eprintln!("after coarse: train psnr {:.2} ssim {:.3}", rep.mean_psnr, rep.mean_ssim);

    let t0 = std::time::Instant::now();
    trainer.train_fine(&ds).unwrap();
    eprintln!("fine {} steps in {:?}", fine, t0.elapsed());
    let n = trainer.log.len();
    for r in trainer.log[..n].iter().filter(|r| r.step % 200 == 0 || r.grown.is_some()) {
        eprintln!("  step {:5} {} loss {:.4} psnr {:.2} anchors {} grown {:?} pruned {:?}", r.step, r.stage, r.total, r.psnr, r.anchors, r.grown, r.pruned);
    }
    let rep = evaluate(&trainer.system, &cfg, &ds, &train_idx).unwrap();
    let hold = ds.holdout_frames(&cfg.holdout_cams);
    let rep_h = evaluate(&trainer.system, &cfg, &ds, &hold).unwrap();
    eprintln!("final: train psnr {:.2} ssim {:.3} | holdout psnr {:.2} | anchors {}", rep.mean_psnr, rep.mean_ssim, rep_h.mean_psnr, rep.anchors);
}
