// Temporary development harness; not part of the deliverable.
use dynsplat::synth::{build_dataset, standard_scene};
use dynsplat::train::{TrainConfig, Trainer};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr_grids: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1.6e-3);
    let lr_mlp: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let fine: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let script = standard_scene("translate").unwrap();
    let ds = build_dataset::<f32>(&script).unwrap();
    let mut cfg = TrainConfig::desk_scale();
    cfg.tin = false;
    cfg.fine_iters = fine;
    cfg.lr_grids = lr_grids;
    cfg.lr_mlp = lr_mlp;
    cfg.densify_start = 0; cfg.densify_end = 0; // isolate deformation learning
    let mut trainer = Trainer::new(&ds, cfg.clone()).unwrap();
    trainer.train_coarse(&ds).unwrap();
    let total = cfg.total_iters();
    let mut step = cfg.coarse_iters;
    while step < total {
        trainer.run_until(&ds, (step + 500).min(total)).unwrap();
        step = (step + 500).min(total);
        // time-plane drift from 1.0 and spatial drift stats
        let mut tdrift = 0.0f32; let mut sdrift = 0.0f32;
        for (i, p) in trainer.system.field.hex.planes.iter().enumerate() {
            let drift = p.data.iter().map(|v| (v - if i % 6 >= 3 { 1.0 } else { *v }).abs()).fold(0.0f32, f32::max);
            if i % 6 >= 3 { tdrift = tdrift.max(drift); } else { sdrift = sdrift.max(drift); }
        }
        // deformation spread over t at a dynamic anchor position
        use dynsplat::field::DeformSwitches;
        let d0 = trainer.system.field.deform(&trainer.system.model, 0.0, DeformSwitches::default());
        let d1 = trainer.system.field.deform(&trainer.system.model, 1.0, DeformSwitches::default());
        let max_tdiff = d0.deltas.iter().zip(&d1.deltas)
            .map(|(a, b)| (a.dx - b.dx).norm()).fold(0.0f32, f32::max);
        let rec = trainer.log.last().unwrap();
        eprintln!("step {step}: time-plane max drift {tdrift:.4} | max |dx(0)-dx(1)| {max_tdiff:.4} | psnr {:.1}", rec.psnr);
    }
    let train_idx = ds.train_frames(&cfg.holdout_cams);
    let rep = dynsplat::train::evaluate(&trainer.system, &cfg, &ds, &train_idx).unwrap();
    eprintln!("lr_grids={lr_grids} lr_mlp={lr_mlp}: train psnr {:.2}", rep.mean_psnr);
}
