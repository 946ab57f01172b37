// Temporary development harness; not part of the deliverable.
use dynsplat::synth::{build_dataset, standard_scene};
use dynsplat::train::{TrainConfig, Trainer};

fn main() {
    let script = standard_scene("translate").unwrap();
    let ds = build_dataset::<f32>(&script).unwrap();
    let mut cfg = TrainConfig::desk_scale();
    cfg.coarse_iters = 100;
    cfg.fine_iters = 400;
    cfg.densify_start = 400; cfg.densify_end = 400; // no densify
    let mut trainer = Trainer::new(&ds, cfg).unwrap();
    let field0 = trainer.system.field.clone();
    trainer.train_coarse(&ds).unwrap();
    trainer.train_fine(&ds).unwrap();
    let f1 = &trainer.system.field;
    let grid_delta: f32 = f1.hex.planes.iter().zip(&field0.hex.planes)
        .map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max))
        .fold(0.0f32, f32::max);
    eprintln!("max grid delta: {grid_delta:.6}");
    let mut f1c = f1.clone();
    let mut f0c = field0.clone();
    for (name, a, b) in [
        ("fusion", f1c.hex.fusion.param_tensors_mut(), f0c.hex.fusion.param_tensors_mut()),
    ] {
        let d = a.iter().zip(b.iter()).map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max)).fold(0.0f32, f32::max);
        eprintln!("max {name} delta: {d:.6}");
    }
    let mut f1x = f1.clone();
    let mut f0x = field0.clone();
    let a = f1x.head_x.param_tensors_mut();
    let b = f0x.head_x.param_tensors_mut();
    for (i, (x, y)) in a.iter().zip(b.iter()).enumerate() {
        let d = x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
        eprintln!("head_x tensor {i} max delta: {d:.6} (len {})", x.len());
    }
}
