// Temporary development harness; not part of the deliverable.
use dynsplat::scene::voxel_cell;
use dynsplat::synth::{build_dataset, region_cells, standard_scene};
use dynsplat::train::{evaluate, TrainConfig, Trainer};

fn density(trainer: &Trainer<f32>, cells: &std::collections::HashSet<(i64,i64,i64)>) -> (usize, f64) {
    let vs = trainer.system.model.voxel_size;
    let count = trainer.system.model.positions.iter()
        .filter(|p| cells.contains(&voxel_cell(p, vs)))
        .count();
    (count, count as f64 / cells.len() as f64)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let scene = args.get(1).map(|s| s.as_str()).unwrap_or("mixed");
    let dad = args.get(2).map(|s| s == "on").unwrap_or(true);
    let tau: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.0002);

    let script = standard_scene(scene).unwrap();
    let ds = build_dataset::<f32>(&script).unwrap();
    let dyn_cells = region_cells(&script, 0.1, true);
    let stat_cells = region_cells(&script, 0.1, false);
    eprintln!("region cells: dyn {} static {}", dyn_cells.len(), stat_cells.len());

    let mut cfg = TrainConfig::desk_scale();
    cfg.dad = dad;
    cfg.densify.grow_threshold = tau;
    let mut trainer = Trainer::new(&ds, cfg.clone()).unwrap();
    let (dc, dd) = density(&trainer, &dyn_cells);
    let (sc, sd) = density(&trainer, &stat_cells);
    eprintln!("init anchors {} | dyn {} ({:.3}/cell) static {} ({:.3}/cell) ratio {:.2}",
        trainer.system.model.len(), dc, dd, sc, sd, dd / sd);

    // Step through, peeking at accumulated gradient means just before events.
    let total = cfg.total_iters();
    let interval = cfg.densify.interval;
    let mut step = 0u64;
    while step < total {
        let fine_step = step.saturating_sub(cfg.coarse_iters);
        let peek = step >= cfg.coarse_iters
            && fine_step >= cfg.densify_start && fine_step < cfg.densify_end
            && (fine_step + 1) % interval == 0;
        trainer.run_until(&ds, step + 1).unwrap();
        step += 1;
        if peek {
            // After the event stats are reset; report from the log record.
            let rec = trainer.log.last().unwrap();
            if rec.grown.is_some() {
                let (dc, dd) = density(&trainer, &dyn_cells);
                let (sc, sd) = density(&trainer, &stat_cells);
                eprintln!("step {:5} anchors {:4} grown {:?} pruned {:?} | dyn {} ({:.3}) stat {} ({:.3}) ratio {:.2} | psnr {:.1}",
                    rec.step, rec.anchors, rec.grown, rec.pruned, dc, dd, sc, sd, dd/sd, rec.psnr);
            }
        }
        // Before events, print grad mean distribution by region once in a while
        if step >= cfg.coarse_iters && (fine_step + 1) % interval == interval - 1 && fine_step < cfg.densify_end && (fine_step / interval) % 5 == 0 {
            let m = &trainer.system.model;
            let mut dyn_g = Vec::new();
            let mut stat_g = Vec::new();
            for i in 0..m.len() {
                if m.stats[i].grad_den <= 0.0 { continue; }
                let g = m.stats[i].grad_num / m.stats[i].grad_den;
                if dyn_cells.contains(&voxel_cell(&m.positions[i], m.voxel_size)) { dyn_g.push(g); }
                else if stat_cells.contains(&voxel_cell(&m.positions[i], m.voxel_size)) { stat_g.push(g); }
            }
            let q = |v: &mut Vec<f32>, p: f64| -> f32 {
                if v.is_empty() { return f32::NAN; }
                v.sort_by(|a,b| a.partial_cmp(b).unwrap());
                v[((v.len()-1) as f64 * p) as usize]
            };
            let (d50, d90, dmax) = (q(&mut dyn_g, 0.5), q(&mut dyn_g, 0.9), q(&mut dyn_g, 1.0));
            let (s50, s90, smax) = (q(&mut stat_g, 0.5), q(&mut stat_g, 0.9), q(&mut stat_g, 1.0));
            eprintln!("step {:5} gradmeans dyn p50 {:.2e} p90 {:.2e} max {:.2e} | stat p50 {:.2e} p90 {:.2e} max {:.2e}",
                step, d50, d90, dmax, s50, s90, smax);
        }
    }
    let train_idx = ds.train_frames(&cfg.holdout_cams);
    let rep = evaluate(&trainer.system, &cfg, &ds, &train_idx).unwrap();
    let (dc, dd) = density(&trainer, &dyn_cells);
    let (sc, sd) = density(&trainer, &stat_cells);
    eprintln!("FINAL dad={} tau={}: anchors {} psnr {:.2} | dyn {} ({:.3}/cell) stat {} ({:.3}/cell) ratio {:.2}",
        dad, tau, trainer.system.model.len(), rep.mean_psnr, dc, dd, sc, sd, dd/sd);
}
