// Temporary development harness; not part of the deliverable.
use dynsplat::field::DeformSwitches;
use dynsplat::synth::{build_dataset, standard_scene};
use dynsplat::train::{TrainConfig, Trainer};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let scene = args.get(1).map(|s| s.as_str()).unwrap_or("translate");
    let tin = args.get(2).map(|s| s != "notin").unwrap_or(true);
    let script = standard_scene(scene).unwrap();
    let ds = build_dataset::<f32>(&script).unwrap();
    let mut cfg = TrainConfig::desk_scale();
    cfg.tin = tin;
    let mut trainer = Trainer::new(&ds, cfg.clone()).unwrap();
    trainer.train_coarse(&ds).unwrap();
    trainer.train_fine(&ds).unwrap();
    for t in [0.0f32, 0.25, 0.5, 0.75, 1.0] {
        let d = trainer.system.field.deform(&trainer.system.model, t, DeformSwitches::default());
        let max_dx = d.deltas.iter().map(|dl| dl.dx.norm()).fold(0.0f32, f32::max);
        let mean_dx = d.deltas.iter().map(|dl| dl.dx.norm()).sum::<f32>() / d.deltas.len() as f32;
        let max_dl = d.deltas.iter().map(|dl| dl.dl.iter().map(|v| v*v).sum::<f32>().sqrt()).fold(0.0f32, f32::max);
        eprintln!("t={t:.2} max|dx| {max_dx:.4} mean|dx| {mean_dx:.4} max|dl| {max_dl:.4}");
    }
    let train_idx = ds.train_frames(&cfg.holdout_cams);
    let rep = dynsplat::train::evaluate(&trainer.system, &cfg, &ds, &train_idx).unwrap();
    eprintln!("tin={tin} train psnr {:.2} anchors {}", rep.mean_psnr, rep.anchors);
}
