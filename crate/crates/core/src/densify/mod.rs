//! Deformation-aware densification: accumulate image-space gradients with
//! per-anchor deformation weights, grow anchors in under-reconstructed
//! dynamic regions, prune anchors whose Gaussians stay transparent.

use std::collections::HashSet;

use nalgebra::Vector3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::field::DeformedAnchors;
use crate::math::{quaternion_angle, Quaternion};
use crate::scalar::{real, Real};
use crate::scene::CanonicalModel;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DensifyConfig {
    /// Weight of the position / scaling / rotation deformation ratios.
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Growth threshold on the accumulated weighted gradient (pixel units).
    pub grow_threshold: f64,
    /// Iterations between densification events.
    pub interval: u64,
    /// Prune anchors whose window-mean child opacity falls below this.
    pub prune_opacity: f64,
    /// Percentile used for the normalization references.
    pub percentile: f64,
    /// Uniform floor on deformation weights so a fully static window can
    /// still densify (reallocation, not starvation).
    pub weight_floor: f64,
    pub min_anchors: usize,
    pub max_anchors: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            alpha: 0.8,
            beta: 0.1,
            gamma: 0.1,
            grow_threshold: 0.0002,
            interval: 100,
            prune_opacity: 0.005,
            percentile: 0.9,
            weight_floor: 0.01,
            min_anchors: 8,
            max_anchors: 20_000,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::invalid("densify weights must be non-negative"));
        }
        if !(0.0 < self.percentile && self.percentile < 1.0) {
            return Err(Error::invalid("percentile must be in (0,1)"));
        }
        if self.interval == 0 {
            return Err(Error::invalid("densify interval must be >= 1"));
        }
        Ok(())
    }
}

/// Normalization references s_x, s_l, s_q for one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformStats<T> {
    pub s_x: T,
    pub s_l: T,
    pub s_q: T,
}

/// Floor applied to degenerate (all-zero) percentiles.
pub const REFERENCE_FLOOR: f64 = 1e-8;

/// Nearest-rank percentile: sorted ascending, 1-based index ceil(p * n),
/// floored at 1e-8 so static scenes cannot divide by zero.
pub fn percentile_reference<T: Real>(values: &[T], p: f64) -> Result<T> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty list"));
    }
    let mut sorted: Vec<T> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = (p * sorted.len() as f64).ceil() as usize;
    let idx = rank.clamp(1, sorted.len()) - 1;
    Ok(sorted[idx].max(real(REFERENCE_FLOOR)))
}

/// Eq-style deformation weight: w = a*|dx|/s_x + b*|dl|/s_l + g*|dq|/s_q.
/// `dq_angle` is the quaternion rotation angle (core-math convention).
pub fn deformation_weight<T: Real>(
    dx_norm: T,
    dl_norm: T,
    dq_angle: T,
    stats: &DeformStats<T>,
    cfg: &DensifyConfig,
) -> T {
    real::<T>(cfg.alpha) * dx_norm / stats.s_x
        + real::<T>(cfg.beta) * dl_norm / stats.s_l
        + real::<T>(cfg.gamma) * dq_angle / stats.s_q
}

/// Per-anchor deformation magnitudes of one iteration.
pub fn deformation_magnitudes<T: Real>(
    rotations: &[Quaternion<T>],
    deformed: &DeformedAnchors<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = deformed.deltas.len();
    let mut dx = Vec::with_capacity(n);
    let mut dl = Vec::with_capacity(n);
    let mut dq = Vec::with_capacity(n);
    for i in 0..n {
        dx.push(deformed.deltas[i].dx.norm());
        dl.push(
            deformed.deltas[i]
                .dl
                .iter()
                .map(|v| *v * *v)
                .fold(T::zero(), |a, b| a + b)
                .sqrt(),
        );
        dq.push(quaternion_angle(&rotations[i], &deformed.rotations[i]));
    }
    (dx, dl, dq)
}

/// Per-iteration normalization references over all anchors.
pub fn deform_stats<T: Real>(
    dx_norms: &[T],
    dl_norms: &[T],
    dq_angles: &[T],
    percentile: f64,
) -> Result<DeformStats<T>> {
    Ok(DeformStats {
        s_x: percentile_reference(dx_norms, percentile)?,
        s_l: percentile_reference(dl_norms, percentile)?,
        s_q: percentile_reference(dq_angles, percentile)?,
    })
}

/// Weights for every anchor this iteration, with the uniform floor applied.
pub fn deformation_weights<T: Real>(
    rotations: &[Quaternion<T>],
    deformed: &DeformedAnchors<T>,
    cfg: &DensifyConfig,
) -> Result<Vec<T>> {
    let (dx, dl, dq) = deformation_magnitudes(rotations, deformed);
    let stats = deform_stats(&dx, &dl, &dq, cfg.percentile)?;
    let floor = real::<T>(cfg.weight_floor);
    Ok((0..dx.len())
        .map(|i| deformation_weight(dx[i], dl[i], dq[i], &stats, cfg).max(floor))
        .collect())
}

/// What the rasterizer observed for one visible anchor this iteration.
#[derive(Debug, Clone)]
pub struct AnchorObservation<T> {
    pub anchor: usize,
    /// Mean over the anchor's child Gaussians of ||grad2d|| this iteration.
    pub mean_grad_norm: T,
    /// Per offset-slot ||grad2d|| (zero where the child was filtered).
    pub child_grad_norms: Vec<T>,
    /// Mean opacity over all k children, before filtering.
    pub mean_opacity: T,
}

/// Fold one iteration into the per-anchor accumulators:
/// numerator += w * ||grad||, denominator += w.
pub fn accumulate<T: Real>(
    model: &mut CanonicalModel<T>,
    observations: &[AnchorObservation<T>],
    weights: &[T],
) {
    for obs in observations {
        let w = weights[obs.anchor];
        let s = &mut model.stats[obs.anchor];
        s.grad_num += w * obs.mean_grad_norm;
        s.grad_den += w;
        for (acc, g) in s.child_grad.iter_mut().zip(&obs.child_grad_norms) {
            *acc += w * *g;
        }
        s.opacity_acc += obs.mean_opacity;
        s.obs += 1;
    }
}

#[derive(Debug, Clone, Default)]
pub struct DensifyReport {
    pub grown: usize,
    pub pruned: usize,
    pub total: usize,
    /// Old indices of surviving anchors, in the order they were kept;
    /// grown anchors are appended after them. Used to remap optimizer state.
    pub kept: Vec<usize>,
}

/// Densification event: grow anchors whose weighted gradient mean exceeds
/// the threshold (at the voxel of their highest-gradient child, if free),
/// prune anchors with transparent children, reset all accumulators.
pub fn grow_and_prune<T: Real>(
    model: &mut CanonicalModel<T>,
    cfg: &DensifyConfig,
    step: u64,
    rng: &mut impl Rng,
) -> DensifyReport {
    let n = model.len();
    let tau = real::<T>(cfg.grow_threshold);
    let prune_below = real::<T>(cfg.prune_opacity);

    let mut occupied: HashSet<(i64, i64, i64)> = model
        .positions
        .iter()
        .map(|p| model.voxel_cell(p))
        .collect();

    // Growth candidates from the weighted gradient mean.
    struct Spawn<T> {
        cell: (i64, i64, i64),
        feature_src: usize,
        _marker: std::marker::PhantomData<T>,
    }
    let mut spawns: Vec<Spawn<T>> = Vec::new();
    for i in 0..n {
        if model.stats[i].grad_den <= T::zero() {
            continue;
        }
        let mean_grad = model.stats[i].grad_num / model.stats[i].grad_den;
        if mean_grad <= tau {
            continue;
        }
        // Place at the canonical voxel of the strongest child.
        let (best_slot, _) = model.stats[i]
            .child_grad
            .iter()
            .enumerate()
            .fold((0usize, -T::one()), |(bi, bv), (ci, cv)| {
                if *cv > bv {
                    (ci, *cv)
                } else {
                    (bi, bv)
                }
            });
        let scale = model.scale(i);
        let child_pos = model.positions[i]
            + model.offsets[i][best_slot]
                .component_mul(&Vector3::new(scale[0], scale[1], scale[2]));
        let cell = model.voxel_cell(&child_pos);
        if occupied.contains(&cell) {
            continue;
        }
        if n + spawns.len() >= cfg.max_anchors {
            break;
        }
        occupied.insert(cell);
        spawns.push(Spawn {
            cell,
            feature_src: i,
            _marker: std::marker::PhantomData,
        });
    }

    // Prune: transparent over the window, past the grace period, above the
    // minimum population.
    let mut kept: Vec<usize> = Vec::with_capacity(n);
    let mut pruned = 0usize;
    let mut population = n + spawns.len();
    for i in 0..n {
        let s = &model.stats[i];
        let transparent = s.obs > 0 && s.opacity_acc / real(s.obs as f64) < prune_below;
        let grace = step.saturating_sub(s.spawn_step) <= cfg.interval;
        if transparent && !grace && population > cfg.min_anchors {
            pruned += 1;
            population -= 1;
        } else {
            kept.push(i);
        }
    }
    model.retain_indices(&kept);

    // Append grown anchors and reset every accumulator.
    let log_voxel = model.voxel_size.ln();
    let k = model.offsets_per_anchor;
    let grown = spawns.len();
    for spawn in spawns {
        let position = model.voxel_center(spawn.cell);
        // feature_src indexes the pre-retain model; map through kept.
        let src_new = kept.iter().position(|&old| old == spawn.feature_src);
        let mut feature = match src_new {
            Some(idx) => model.features[idx],
            None => [T::zero(); crate::scene::FEATURE_DIM],
        };
        for f in &mut feature {
            *f += real(rng.gen_range(-0.01..0.01));
        }
        let offsets = (0..k)
            .map(|_| {
                Vector3::new(
                    real(rng.gen_range(-0.5..0.5)),
                    real(rng.gen_range(-0.5..0.5)),
                    real(rng.gen_range(-0.5..0.5)),
                )
            })
            .collect();
        model.push_anchor(
            position,
            feature,
            [log_voxel; 6],
            Quaternion::identity(),
            offsets,
            step,
        );
    }
    for s in &mut model.stats {
        s.reset();
    }

    DensifyReport {
        grown,
        pruned,
        total: model.len(),
        kept,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{DeformationDelta, DeformedAnchors};
    use crate::scene::init_from_points;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model_with(n: usize) -> CanonicalModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vector3<f64>> = (0..n)
            .map(|i| Vector3::new(i as f64 * 0.5, 0.0, 0.0))
            .collect();
        init_from_points(&pts, 0.25, 3, &mut rng).unwrap()
    }

    #[test]
    fn percentile_nearest_rank() {
        let vals: Vec<f64> = (1..=10).map(|v| v as f64).collect();
        assert_eq!(percentile_reference(&vals, 0.9).unwrap(), 9.0);
        let same = vec![3.5f64; 7];
        assert_eq!(percentile_reference(&same, 0.9).unwrap(), 3.5);
        let zeros = vec![0.0f64; 5];
        assert_eq!(percentile_reference(&zeros, 0.9).unwrap(), REFERENCE_FLOOR);
        assert!(percentile_reference::<f64>(&[], 0.9).is_err());
    }

    #[test]
    fn weight_examples() {
        let cfg = DensifyConfig::default();
        let stats = DeformStats {
            s_x: 1.0,
            s_l: 1.0,
            s_q: 1.0,
        };
        assert_eq!(deformation_weight(0.0, 0.0, 0.0, &stats, &cfg), 0.0);
        // Each magnitude at its reference: w = alpha + beta + gamma = 1.
        assert_relative_eq!(deformation_weight(1.0, 1.0, 1.0, &stats, &cfg), 1.0);
        // Position-only at the reference with the published coefficients.
        let w = deformation_weight(2.0, 0.0, 0.0, &DeformStats { s_x: 2.0, s_l: 1.0, s_q: 1.0 }, &cfg);
        assert_relative_eq!(w, 0.8, epsilon = 1e-15);
    }

    fn obs(anchor: usize, grad: f64, opacity: f64) -> AnchorObservation<f64> {
        AnchorObservation {
            anchor,
            mean_grad_norm: grad,
            child_grad_norms: vec![grad; 3],
            mean_opacity: opacity,
        }
    }

    #[test]
    fn accumulate_weighted_mean() {
        // w = [1, 3], norms = [2, 4] -> (2 + 12) / 4 = 3.5.
        let mut model = model_with(1);
        accumulate(&mut model, &[obs(0, 2.0, 0.5)], &[1.0]);
        accumulate(&mut model, &[obs(0, 4.0, 0.5)], &[3.0]);
        let s = &model.stats[0];
        assert_relative_eq!(s.grad_num / s.grad_den, 3.5, epsilon = 1e-12);

        // Single iteration, w = 1, norm 0.7.
        let mut model = model_with(1);
        accumulate(&mut model, &[obs(0, 0.7, 0.5)], &[1.0]);
        let s = &model.stats[0];
        assert_relative_eq!(s.grad_num / s.grad_den, 0.7);

        // Constant weights cancel: weighted mean equals the plain mean.
        let mut model = model_with(1);
        for g in [0.1, 0.5, 0.9] {
            accumulate(&mut model, &[obs(0, g, 0.5)], &[2.7]);
        }
        let s = &model.stats[0];
        assert_relative_eq!(s.grad_num / s.grad_den, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn gradient_mean_invariant_to_uniform_weight_scale() {
        let mut a = model_with(1);
        let mut b = model_with(1);
        for g in [0.2, 0.8, 0.4] {
            accumulate(&mut a, &[obs(0, g, 0.5)], &[1.0]);
            accumulate(&mut b, &[obs(0, g, 0.5)], &[17.3]);
        }
        let ga = a.stats[0].grad_num / a.stats[0].grad_den;
        let gb = b.stats[0].grad_num / b.stats[0].grad_den;
        assert_relative_eq!(ga, gb, epsilon = 1e-12);
    }

    #[test]
    fn zero_position_deformation_with_alpha_only_starves_growth() {
        // alpha = 1, beta = gamma = 0, all position deltas zero: every raw
        // weight is 0 regardless of photometric gradients. The floor is what
        // keeps static scenes alive.
        let cfg = DensifyConfig {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
            ..Default::default()
        };
        let stats = DeformStats {
            s_x: REFERENCE_FLOOR,
            s_l: REFERENCE_FLOOR,
            s_q: REFERENCE_FLOOR,
        };
        let w = deformation_weight(0.0, 0.3, 0.2, &stats, &cfg);
        assert_eq!(w, 0.0);
        let floored = w.max(cfg.weight_floor);
        assert_eq!(floored, 0.01);
    }

    #[test]
    fn deformation_weights_use_percentiles_and_floor() {
        let model = model_with(10);
        let mut deformed = DeformedAnchors::canonical(&model);
        // One strongly moving anchor, everything else static.
        deformed.deltas[4] = DeformationDelta {
            dx: Vector3::new(0.3, 0.0, 0.0),
            dl: [0.0; 6],
            dq: nalgebra::Vector4::zeros(),
        };
        let cfg = DensifyConfig::default();
        let w = deformation_weights(&model.rotations, &deformed, &cfg).unwrap();
        assert!(w[4] > w[0]);
        assert!(w[0] >= cfg.weight_floor);
        // s_x = 90th percentile of mostly-zero norms = floor, so the moving
        // anchor's ratio is enormous.
        assert!(w[4] > 1000.0);
    }

    #[test]
    fn grow_below_threshold_is_noop() {
        let mut model = model_with(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = model.len();
        for i in 0..n {
            accumulate(&mut model, &[obs(i, 1e-6, 0.5)], &vec![1.0; n]);
        }
        let before = model.len();
        let report = grow_and_prune(&mut model, &DensifyConfig::default(), 200, &mut rng);
        assert_eq!(model.len(), before);
        assert_eq!(report.grown, 0);
        assert_eq!(report.pruned, 0);
    }

    #[test]
    fn single_growth_when_target_voxel_free() {
        let mut model = model_with(2);
        // Push one anchor's offset far out so the child lands in a free cell.
        model.offsets[0][1] = Vector3::new(8.0, 0.0, 0.0);
        let mut o = obs(0, 1.0, 0.5);
        o.child_grad_norms = vec![0.1, 5.0, 0.2];
        accumulate(&mut model, &[o], &vec![1.0; 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let report = grow_and_prune(&mut model, &DensifyConfig::default(), 200, &mut rng);
        assert_eq!(report.grown, 1);
        assert_eq!(model.len(), 3);
        // Stats are reset after the event.
        assert!(model.stats.iter().all(|s| s.grad_den == 0.0 && s.obs == 0));
    }

    #[test]
    fn occupied_target_voxel_blocks_growth() {
        let mut model = model_with(2);
        // Offset zero: the child sits in the parent's own cell.
        for o in &mut model.offsets[0] {
            *o = Vector3::zeros();
        }
        accumulate(&mut model, &[obs(0, 1.0, 0.5)], &vec![1.0; 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let report = grow_and_prune(&mut model, &DensifyConfig::default(), 200, &mut rng);
        assert_eq!(report.grown, 0);
    }

    #[test]
    fn prune_transparent_after_grace() {
        let mut model = model_with(12);
        let n = model.len();
        // Anchor 2 transparent, others fine.
        for i in 0..n {
            let op = if i == 2 { 0.0001 } else { 0.5 };
            accumulate(&mut model, &[obs(i, 1e-9, op)], &vec![1.0; n]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = DensifyConfig::default();
        // Well past the grace period.
        let report = grow_and_prune(&mut model, &cfg, 1000, &mut rng);
        assert_eq!(report.pruned, 1);
        assert_eq!(model.len(), n - 1);
        assert_eq!(report.kept.len(), n - 1);
        assert!(!report.kept.contains(&2));
    }

    #[test]
    fn grace_period_protects_fresh_anchors() {
        let mut model = model_with(12);
        let n = model.len();
        model.stats[3].spawn_step = 950;
        for i in 0..n {
            let op = if i == 3 { 0.0001 } else { 0.5 };
            accumulate(&mut model, &[obs(i, 1e-9, op)], &vec![1.0; n]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // Event at 1000: anchor 3 was spawned 50 steps ago (< interval).
        let report = grow_and_prune(&mut model, &DensifyConfig::default(), 1000, &mut rng);
        assert_eq!(report.pruned, 0);
    }

    #[test]
    fn bounds_respected() {
        let mut model = model_with(10);
        let n = model.len();
        // Everything transparent: pruning would empty the model without the
        // minimum bound.
        for i in 0..n {
            accumulate(&mut model, &[obs(i, 1e-9, 0.0)], &vec![1.0; n]);
        }
        let cfg = DensifyConfig {
            min_anchors: 6,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        grow_and_prune(&mut model, &cfg, 1000, &mut rng);
        assert_eq!(model.len(), 6);

        // Growth clamps at the maximum.
        let mut model = model_with(10);
        let n = model.len();
        for i in 0..n {
            model.offsets[i][0] = Vector3::new(100.0 + i as f64 * 10.0, 0.0, 0.0);
            let mut o = obs(i, 1.0, 0.5);
            o.child_grad_norms = vec![5.0, 0.0, 0.0];
            accumulate(&mut model, &[o], &vec![1.0; n]);
        }
        let cfg = DensifyConfig {
            max_anchors: n + 3,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        grow_and_prune(&mut model, &cfg, 1000, &mut rng);
        assert_eq!(model.len(), n + 3);
    }

    /// The mechanism assay: equal photometric gradients, but the dynamic
    /// group's errors spike exactly when it deforms. Deformation weighting
    /// concentrates the window mean on those iterations, so the dynamic
    /// group crosses the growth threshold where uniform averaging does not.
    #[test]
    fn weighted_scheme_grows_dynamic_regions_where_uniform_does_not() {
        let run = |weighted: bool| -> (usize, usize) {
            let mut model = model_with(8);
            let n = model.len();
            // Children land in free cells so growth is unblocked.
            for i in 0..n {
                model.offsets[i][0] = Vector3::new(50.0 + 100.0 * i as f64, 0.0, 0.0);
            }
            let dynamic: Vec<usize> = (0..n / 2).collect();
            let iters = 100u64;
            for it in 0..iters {
                let moving = it % 5 == 0; // transient motion, 20% of frames
                let mut observations = Vec::new();
                let mut weights = vec![0.0f64; n];
                for i in 0..n {
                    let is_dyn = dynamic.contains(&i);
                    // Static anchors: steady small residual. Dynamic: large
                    // residual only while moving.
                    let grad = if is_dyn {
                        if moving {
                            1.5e-3
                        } else {
                            0.5e-4
                        }
                    } else {
                        2.0e-4
                    };
                    let mut o = obs(i, grad, 0.5);
                    o.child_grad_norms = vec![grad, 0.0, 0.0];
                    observations.push(o);
                    let w = if weighted {
                        if is_dyn && moving {
                            20.0 // large |dx| / s_x while deforming
                        } else {
                            0.01
                        }
                    } else {
                        1.0
                    };
                    weights[i] = w;
                }
                accumulate(&mut model, &observations, &weights);
            }
            let cfg = DensifyConfig {
                grow_threshold: 4.0e-4,
                ..Default::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let before_positions = model.positions.clone();
            grow_and_prune(&mut model, &cfg, 1000, &mut rng);
            // Count grown anchors near each group (by x coordinate of the
            // spawn cell: dynamic parents sit at small x * huge offsets).
            let grown = model.len() - before_positions.len();
            let dynamic_grown = model.positions[before_positions.len()..]
                .iter()
                .filter(|p| p.x < 50.0 + 100.0 * (n / 2) as f64)
                .count();
            (grown, dynamic_grown)
        };
        let (grown_w, dyn_w) = run(true);
        let (grown_u, dyn_u) = run(false);
        // Weighted: dynamic mean ~ (20*1.5e-3*20 + .01*5e-5*80)/(20*20+0.8)
        // ~ 1.5e-3 > tau. Uniform: ~ (20*1.5e-3 + 80*5e-5)/100 ~ 3.4e-4 < tau.
        assert!(dyn_w > dyn_u, "weighted {dyn_w} vs uniform {dyn_u}");
        assert!(grown_w >= dyn_w);
        assert_eq!(dyn_u, 0, "uniform averaging dilutes transient motion");
        assert!(grown_u <= grown_w);
    }
}
