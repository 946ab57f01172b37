// Temporary development harness; not part of the deliverable.
use dynsplat::field::DeformSwitches;
use dynsplat::synth::{build_dataset, standard_scene};
use dynsplat::train::{evaluate, TrainConfig, Trainer};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let scene = args.get(1).map(|s| s.as_str()).unwrap_or("translate");
    let mode = args.get(2).map(|s| s.as_str()).unwrap_or("full");
    let dstart: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let lr_grids: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1.6e-3);

    let script = standard_scene(scene).unwrap();
    let ds = build_dataset::<f32>(&script).unwrap();
    let mut cfg = TrainConfig::desk_scale();
    cfg.densify_start = dstart;
    cfg.lr_grids = lr_grids;
    match mode {
        "full" => {}
        "nodx" => cfg.switches.dx = false,
        "nodl" => cfg.switches.dl = false,
        "nodq" => cfg.switches.dq = false,
        "notin" => cfg.tin = false,
        "nodad" => cfg.dad = false,
        _ => panic!("unknown mode"),
    }
    let mut trainer = Trainer::new(&ds, cfg.clone()).unwrap();
    trainer.train_coarse(&ds).unwrap();
    trainer.train_fine(&ds).unwrap();
    let d0 = trainer.system.field.deform(&trainer.system.model, 0.0, DeformSwitches::default());
    let d1 = trainer.system.field.deform(&trainer.system.model, 1.0, DeformSwitches::default());
    let max_tdiff = d0.deltas.iter().zip(&d1.deltas).map(|(a, b)| (a.dx - b.dx).norm()).fold(0.0f32, f32::max);
    let train_idx = ds.train_frames(&cfg.holdout_cams);
    let hold_idx = ds.holdout_frames(&cfg.holdout_cams);
    let rep = evaluate(&trainer.system, &cfg, &ds, &train_idx).unwrap();
    let rep_h = evaluate(&trainer.system, &cfg, &ds, &hold_idx).unwrap();
    println!("{scene} {mode} dstart={dstart} lrg={lr_grids}: train {:.2} holdout {:.2} anchors {} max|dx(0)-dx(1)| {:.3}",
        rep.mean_psnr, rep_h.mean_psnr, rep.anchors, max_tdiff);
}
