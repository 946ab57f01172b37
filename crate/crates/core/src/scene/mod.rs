//! The canonical anchor model: storage-of-arrays for anchor attributes,
//! voxel-grid initialization from sparse points, and frustum filtering.

pub mod checkpoint;

use nalgebra::Vector3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{Camera, Quaternion, NEAR_PLANE};
use crate::scalar::{real, Real};

/// Anchor context feature width.
pub const FEATURE_DIM: usize = 32;

/// Fraction of the image size added around the frustum when filtering
/// anchors; deformation can move anchors into view, the margin avoids popping.
pub const FRUSTUM_MARGIN: f64 = 0.1;

/// Densification accumulators carried per anchor. Numerator/denominator
/// implement the weighted gradient mean; they are reset together.
#[derive(Debug, Clone, PartialEq)]
pub struct DensifyAccum<T> {
    /// Sum over iterations of w * ||grad2d||.
    pub grad_num: T,
    /// Sum over iterations of w.
    pub grad_den: T,
    /// Per-offset accumulated ||grad2d||, used to place grown anchors.
    pub child_grad: Vec<T>,
    /// Sum over iterations of the anchor's mean child opacity.
    pub opacity_acc: T,
    /// Iterations this anchor was observed (in frustum).
    pub obs: u32,
    /// Training step at which the anchor was created (growth grace period).
    pub spawn_step: u64,
}

impl<T: Real> DensifyAccum<T> {
    pub fn new(k: usize, spawn_step: u64) -> Self {
        DensifyAccum {
            grad_num: T::zero(),
            grad_den: T::zero(),
            child_grad: vec![T::zero(); k],
            opacity_acc: T::zero(),
            obs: 0,
            spawn_step,
        }
    }

    pub fn reset(&mut self) {
        self.grad_num = T::zero();
        self.grad_den = T::zero();
        self.child_grad.fill(T::zero());
        self.opacity_acc = T::zero();
        self.obs = 0;
    }
}

/// The canonical (time-independent) anchor scene, stored as parallel arrays.
///
/// Scaling is kept in log-space so positivity needs no constrained
/// optimization; `k` offsets are shared-width across all anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalModel<T> {
    pub voxel_size: T,
    /// Gaussians decoded per anchor (k).
    pub offsets_per_anchor: usize,
    pub positions: Vec<Vector3<T>>,
    pub features: Vec<[T; FEATURE_DIM]>,
    /// First three entries scale the offsets, last three are the base
    /// Gaussian scale; stored as logs.
    pub log_scales: Vec<[T; 6]>,
    pub rotations: Vec<Quaternion<T>>,
    pub offsets: Vec<Vec<Vector3<T>>>,
    pub stats: Vec<DensifyAccum<T>>,
}

impl<T: Real> CanonicalModel<T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Linear (exponentiated) scale of one anchor.
    pub fn scale(&self, i: usize) -> [T; 6] {
        let mut s = self.log_scales[i];
        for v in &mut s {
            *v = v.exp();
        }
        s
    }

    /// Voxel cell index of a world position.
    pub fn voxel_cell(&self, p: &Vector3<T>) -> (i64, i64, i64) {
        voxel_cell(p, self.voxel_size)
    }

    /// Center of a voxel cell.
    pub fn voxel_center(&self, cell: (i64, i64, i64)) -> Vector3<T> {
        let half = real::<T>(0.5);
        Vector3::new(
            (real::<T>(cell.0 as f64) + half) * self.voxel_size,
            (real::<T>(cell.1 as f64) + half) * self.voxel_size,
            (real::<T>(cell.2 as f64) + half) * self.voxel_size,
        )
    }

    /// Append one anchor; feature/offsets supplied by the caller.
    pub fn push_anchor(
        &mut self,
        position: Vector3<T>,
        feature: [T; FEATURE_DIM],
        log_scale: [T; 6],
        rotation: Quaternion<T>,
        offsets: Vec<Vector3<T>>,
        spawn_step: u64,
    ) {
        assert_eq!(offsets.len(), self.offsets_per_anchor);
        self.positions.push(position);
        self.features.push(feature);
        self.log_scales.push(log_scale);
        self.rotations.push(rotation);
        self.offsets.push(offsets);
        self.stats
            .push(DensifyAccum::new(self.offsets_per_anchor, spawn_step));
    }

    /// Keep only the anchors listed in `kept` (in that order).
    pub fn retain_indices(&mut self, kept: &[usize]) {
        self.positions = kept.iter().map(|&i| self.positions[i]).collect();
        self.features = kept.iter().map(|&i| self.features[i]).collect();
        self.log_scales = kept.iter().map(|&i| self.log_scales[i]).collect();
        self.rotations = kept.iter().map(|&i| self.rotations[i]).collect();
        self.offsets = kept.iter().map(|&i| self.offsets[i].clone()).collect();
        self.stats = kept.iter().map(|&i| self.stats[i].clone()).collect();
    }

    /// Axis-aligned bounds of the anchor positions.
    pub fn bounds(&self) -> (Vector3<T>, Vector3<T>) {
        point_bounds(&self.positions)
    }
}

pub fn voxel_cell<T: Real>(p: &Vector3<T>, voxel_size: T) -> (i64, i64, i64) {
    (
        (p.x / voxel_size).floor().to_f64_lossy() as i64,
        (p.y / voxel_size).floor().to_f64_lossy() as i64,
        (p.z / voxel_size).floor().to_f64_lossy() as i64,
    )
}

pub fn point_bounds<T: Real>(points: &[Vector3<T>]) -> (Vector3<T>, Vector3<T>) {
    let mut lo = Vector3::repeat(T::max_value().unwrap());
    let mut hi = Vector3::repeat(-T::max_value().unwrap());
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}

/// Build the canonical model from sparse points: one anchor per occupied
/// voxel, placed at the voxel center. Anchor order is sorted by cell index
/// so initialization is independent of point order.
pub fn init_from_points<T: Real>(
    points: &[Vector3<T>],
    voxel_size: T,
    k: usize,
    rng: &mut impl Rng,
) -> Result<CanonicalModel<T>> {
    if points.is_empty() {
        return Err(Error::invalid("cannot initialize from an empty point set"));
    }
    if voxel_size <= T::zero() {
        return Err(Error::invalid("voxel size must be positive"));
    }
    if k == 0 {
        return Err(Error::invalid("need at least one offset per anchor"));
    }
    let mut cells: Vec<(i64, i64, i64)> = points.iter().map(|p| voxel_cell(p, voxel_size)).collect();
    cells.sort_unstable();
    cells.dedup();

    let mut model = CanonicalModel {
        voxel_size,
        offsets_per_anchor: k,
        positions: Vec::with_capacity(cells.len()),
        features: Vec::with_capacity(cells.len()),
        log_scales: Vec::with_capacity(cells.len()),
        rotations: Vec::with_capacity(cells.len()),
        offsets: Vec::with_capacity(cells.len()),
        stats: Vec::with_capacity(cells.len()),
    };
    let log_voxel = voxel_size.ln();
    for cell in cells {
        let position = model.voxel_center(cell);
        let mut feature = [T::zero(); FEATURE_DIM];
        for f in &mut feature {
            *f = real(rng.gen_range(-0.1..0.1));
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
            0,
        );
    }
    Ok(model)
}

/// Indices of anchors whose deformed position lands inside the expanded
/// image rectangle with positive depth.
pub fn visible_anchors<T: Real>(
    deformed_positions: &[Vector3<T>],
    cam: &Camera<T>,
    margin: f64,
) -> Vec<usize> {
    let mx = real::<T>(margin) * real(cam.width as f64);
    let my = real::<T>(margin) * real(cam.height as f64);
    let (w, h) = (real::<T>(cam.width as f64), real::<T>(cam.height as f64));
    let near = real::<T>(NEAR_PLANE);
    let mut out = Vec::new();
    for (i, p) in deformed_positions.iter().enumerate() {
        let pc = cam.world_to_camera(p);
        if pc.z <= near {
            continue;
        }
        let px = cam.project_cam(&pc);
        if px.x >= -mx && px.x <= w + mx && px.y >= -my && px.y <= h + my {
            out.push(i);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn axis_camera() -> Camera<f64> {
        Camera::new(
            Matrix3::identity(),
            Vector3::zeros(),
            100.0,
            100.0,
            32.0,
            32.0,
            64,
            64,
        )
    }

    #[test]
    fn many_points_one_voxel_one_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let points: Vec<Vector3<f64>> = (0..100)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(0.0..0.9),
                    rng.gen_range(0.0..0.9),
                    rng.gen_range(0.0..0.9),
                )
            })
            .collect();
        let model = init_from_points(&points, 1.0, 5, &mut rng).unwrap();
        assert_eq!(model.len(), 1);
        assert_eq!(model.positions[0], Vector3::new(0.5, 0.5, 0.5));
    }

    #[test]
    fn two_far_points_two_anchors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let points = vec![Vector3::new(0.0f64, 0.0, 0.0), Vector3::new(10.0, 0.0, 0.0)];
        let model = init_from_points(&points, 1.0, 3, &mut rng).unwrap();
        assert_eq!(model.len(), 2);
    }

    #[test]
    fn distinct_cells_distinct_anchors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let points: Vec<Vector3<f64>> =
            (0..17).map(|i| Vector3::new(i as f64 * 2.0, 0.0, 0.0)).collect();
        let model = init_from_points(&points, 1.0, 2, &mut rng).unwrap();
        assert_eq!(model.len(), 17);
        // Count never exceeds the input size.
        assert!(model.len() <= points.len());
    }

    #[test]
    fn empty_points_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(init_from_points::<f64>(&[], 1.0, 5, &mut rng).is_err());
    }

    #[test]
    fn init_is_point_order_independent() {
        let mut rng_a = ChaCha8Rng::seed_from_u64(9);
        let mut rng_b = ChaCha8Rng::seed_from_u64(9);
        let pts = vec![
            Vector3::new(0.1f64, 0.2, 0.3),
            Vector3::new(2.5, -1.0, 0.7),
            Vector3::new(-3.0, 4.0, 1.0),
        ];
        let mut rev = pts.clone();
        rev.reverse();
        let a = init_from_points(&pts, 1.0, 4, &mut rng_a).unwrap();
        let b = init_from_points(&rev, 1.0, 4, &mut rng_b).unwrap();
        assert_eq!(a.positions, b.positions);
    }

    #[test]
    fn frustum_basics() {
        let cam = axis_camera();
        let pos = vec![
            Vector3::new(0.0f64, 0.0, 5.0),  // on axis
            Vector3::new(0.0, 0.0, -5.0),    // behind
            Vector3::new(10.0, 0.0, 5.0),    // projects far right of margin
        ];
        let vis = visible_anchors(&pos, &cam, FRUSTUM_MARGIN);
        assert_eq!(vis, vec![0]);
    }

    #[test]
    fn margin_exclusion_boundary() {
        let cam = axis_camera();
        // Margin is 6.4 px; image right edge 64. A point projecting to
        // x = 70.4 + eps must be excluded, x = 70.4 - eps included.
        // px = fx * X/Z + cx -> X = (px - cx) * Z / fx.
        let z = 5.0;
        let just_out = Vector3::new((70.4 + 0.5 - 32.0) * z / 100.0, 0.0, z);
        let just_in = Vector3::new((70.4 - 0.5 - 32.0) * z / 100.0, 0.0, z);
        let vis = visible_anchors(&[just_out, just_in], &cam, FRUSTUM_MARGIN);
        assert_eq!(vis, vec![1]);
    }

    #[test]
    fn larger_margin_is_superset() {
        let cam = axis_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pos: Vec<Vector3<f64>> = (0..200)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-2.0..10.0),
                )
            })
            .collect();
        let small = visible_anchors(&pos, &cam, 0.05);
        let large = visible_anchors(&pos, &cam, 0.25);
        for i in &small {
            assert!(large.contains(i));
        }
    }

    #[test]
    fn retain_reorders_all_arrays() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vector3<f64>> =
            (0..5).map(|i| Vector3::new(i as f64 * 3.0, 0.0, 0.0)).collect();
        let mut model = init_from_points(&pts, 1.0, 2, &mut rng).unwrap();
        let p3 = model.positions[3];
        let f3 = model.features[3];
        model.retain_indices(&[3, 1]);
        assert_eq!(model.len(), 2);
        assert_eq!(model.positions[0], p3);
        assert_eq!(model.features[0], f3);
    }
}
