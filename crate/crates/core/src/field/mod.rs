//! The anchor deformation field: a six-plane spatio-temporal grid encoder
//! fused by a small MLP, and three decoder heads producing per-anchor
//! position / scaling / rotation deltas for a timestamp.

mod plane;

pub use plane::PlaneGrid;

use std::io::{Read, Write};

use nalgebra::{Vector3, Vector4};
use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{normalize4, normalize4_backward, Quaternion};
use crate::nn::{Activation, MlpGrads, MlpNet};
use crate::scalar::{real, Real};
use crate::scene::CanonicalModel;

/// Axis pairs of the six planes over coordinates [x, y, z, t].
pub const PLANE_AXES: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];

/// Planes indexed 3..6 involve the time axis.
const FIRST_TIME_PLANE: usize = 3;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FieldConfig {
    /// Grid resolution of the coarsest level (applies to every axis).
    pub base_resolution: usize,
    /// Multipliers per level, e.g. [1, 2] for 32² and 64².
    pub level_scales: Vec<usize>,
    /// Feature channels per plane.
    pub d_plane: usize,
    /// Output width of the fusion net.
    pub d_embed: usize,
    /// Hidden width of fusion and decoder heads.
    pub hidden: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            base_resolution: 32,
            level_scales: vec![1, 2],
            d_plane: 16,
            d_embed: 64,
            hidden: 64,
        }
    }
}

/// Per-anchor deformation for one timestamp. `dl` is log-space additive;
/// `dq` perturbs the quaternion components before renormalization.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationDelta<T> {
    pub dx: Vector3<T>,
    pub dl: [T; 6],
    pub dq: Vector4<T>,
}

impl<T: Real> DeformationDelta<T> {
    pub fn zero() -> Self {
        DeformationDelta {
            dx: Vector3::zeros(),
            dl: [T::zero(); 6],
            dq: Vector4::zeros(),
        }
    }
}

/// Which decoder heads are active; disabling one pins its delta (and its
/// gradients) to zero, mirroring the per-component ablations.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DeformSwitches {
    pub dx: bool,
    pub dl: bool,
    pub dq: bool,
}

impl Default for DeformSwitches {
    fn default() -> Self {
        DeformSwitches {
            dx: true,
            dl: true,
            dq: true,
        }
    }
}

/// Six multi-resolution planes plus the fusion net mapping combined plane
/// features to the deformation embedding. Queries clamp to the bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct HexPlaneField<T> {
    pub config: FieldConfig,
    /// `levels * 6` grids, level-major, plane order per [`PLANE_AXES`].
    pub planes: Vec<PlaneGrid<T>>,
    pub fusion: MlpNet<T>,
    pub bbox_min: Vector3<T>,
    pub bbox_max: Vector3<T>,
}

/// Deformation field: encoder plus the three decoder heads.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField<T> {
    pub hex: HexPlaneField<T>,
    pub head_x: MlpNet<T>,
    pub head_l: MlpNet<T>,
    pub head_q: MlpNet<T>,
}

/// Gradient buffers shaped like a [`DeformationField`].
#[derive(Debug, Clone)]
pub struct FieldGrads<T> {
    pub planes: Vec<Vec<T>>,
    pub fusion: MlpGrads<T>,
    pub head_x: MlpGrads<T>,
    pub head_l: MlpGrads<T>,
    pub head_q: MlpGrads<T>,
}

/// Deformed state of every anchor at one timestamp, plus the raw deltas
/// (consumed by densification weighting) and the normalization factors the
/// backward pass needs.
#[derive(Debug, Clone)]
pub struct DeformedAnchors<T> {
    pub positions: Vec<Vector3<T>>,
    pub log_scales: Vec<[T; 6]>,
    pub rotations: Vec<Quaternion<T>>,
    pub rot_norms: Vec<T>,
    pub deltas: Vec<DeformationDelta<T>>,
}

/// Gradient of one anchor's canonical parameters out of the deformation.
#[derive(Debug, Clone, Copy)]
pub struct AnchorDeformGrad<T> {
    pub d_position: Vector3<T>,
    pub d_log_scale: [T; 6],
    pub d_rotation: Vector4<T>,
}

impl<T: Real> HexPlaneField<T> {
    /// Build with time planes at exactly 1 (neutral under the product
    /// combiner, so the field is static at initialization) and spatial
    /// planes randomly perturbed around 1. Spatial features must start near
    /// the neutral value: a near-zero init makes the six-way product vanish,
    /// which starves every plane of gradient and collapses the embedding to
    /// a constant.
    pub fn new(
        config: FieldConfig,
        bbox_min: Vector3<T>,
        bbox_max: Vector3<T>,
        rng: &mut impl Rng,
    ) -> Self {
        let mut planes = Vec::with_capacity(config.level_scales.len() * 6);
        for scale in &config.level_scales {
            let res = config.base_resolution * scale;
            for plane_idx in 0..6 {
                let mut grid = PlaneGrid::new(res, res, config.d_plane);
                if plane_idx >= FIRST_TIME_PLANE {
                    grid.data.fill(T::one());
                } else {
                    for v in &mut grid.data {
                        *v = real(1.0 + rng.gen_range(-0.2..0.2));
                    }
                }
                planes.push(grid);
            }
        }
        let f_h_dim = config.level_scales.len() * config.d_plane;
        let mut fusion = MlpNet::with_hidden(
            f_h_dim,
            config.hidden,
            1,
            config.d_embed,
            Activation::Identity,
        );
        fusion.init_fan_in(rng);
        HexPlaneField {
            config,
            planes,
            fusion,
            bbox_min,
            bbox_max,
        }
    }

    fn normalized_coords(&self, x: &Vector3<T>, t: T) -> [T; 4] {
        let mut c = [T::zero(); 4];
        for a in 0..3 {
            let extent = (self.bbox_max[a] - self.bbox_min[a]).max(real(1e-9));
            c[a] = ((x[a] - self.bbox_min[a]) / extent).clamp(T::zero(), T::one());
        }
        c[3] = t.clamp(T::zero(), T::one());
        c
    }

    /// Encode (position, time) into the deformation embedding f_d.
    ///
    /// Per level: bilinear sample each of the six planes, combine by
    /// elementwise product; concatenate levels; apply the fusion net.
    pub fn encode(&self, x: &Vector3<T>, t: T) -> Vec<T> {
        self.combined_features(&self.normalized_coords(x, t))
            .and_then(|fh| self.fusion.forward(&fh))
            .expect("fusion net width matches combined features")
    }

    fn combined_features(&self, coords: &[T; 4]) -> Result<Vec<T>> {
        let d = self.config.d_plane;
        let n_levels = self.config.level_scales.len();
        let mut f_h = Vec::with_capacity(n_levels * d);
        for level in 0..n_levels {
            let mut prod = vec![T::one(); d];
            for (plane_idx, axes) in PLANE_AXES.iter().enumerate() {
                let grid = &self.planes[level * 6 + plane_idx];
                let feat = grid.sample(coords[axes.0], coords[axes.1]);
                for (p, f) in prod.iter_mut().zip(&feat) {
                    *p *= *f;
                }
            }
            f_h.extend_from_slice(&prod);
        }
        Ok(f_h)
    }

    /// Backward of [`encode`]: scatter into grid gradients, accumulate fusion
    /// gradients, and return dL/dx (world units; the query-coordinate path).
    pub fn encode_backward(
        &self,
        x: &Vector3<T>,
        t: T,
        d_fd: &[T],
        plane_grads: &mut [Vec<T>],
        fusion_grads: &mut MlpGrads<T>,
    ) -> Vector3<T> {
        let coords = self.normalized_coords(x, t);
        let d = self.config.d_plane;
        let n_levels = self.config.level_scales.len();

        // Recompute per-plane features.
        let mut feats: Vec<Vec<T>> = Vec::with_capacity(n_levels * 6);
        for level in 0..n_levels {
            for (plane_idx, axes) in PLANE_AXES.iter().enumerate() {
                let grid = &self.planes[level * 6 + plane_idx];
                feats.push(grid.sample(coords[axes.0], coords[axes.1]));
            }
        }
        let mut f_h = Vec::with_capacity(n_levels * d);
        for level in 0..n_levels {
            for c in 0..d {
                let mut p = T::one();
                for plane_idx in 0..6 {
                    p *= feats[level * 6 + plane_idx][c];
                }
                f_h.push(p);
            }
        }

        let d_fh = self
            .fusion
            .backward(&f_h, d_fd, fusion_grads)
            .expect("fusion widths are consistent");

        let mut d_coords = [T::zero(); 4];
        for level in 0..n_levels {
            // Leave-one-out products via prefix/suffix, exact under zeros.
            for c in 0..d {
                let vals: [T; 6] =
                    std::array::from_fn(|p| feats[level * 6 + p][c]);
                let mut pre = [T::one(); 7];
                for i in 0..6 {
                    pre[i + 1] = pre[i] * vals[i];
                }
                let mut suf = [T::one(); 7];
                for i in (0..6).rev() {
                    suf[i] = suf[i + 1] * vals[i];
                }
                let upstream = d_fh[level * d + c];
                for (plane_idx, axes) in PLANE_AXES.iter().enumerate() {
                    let d_feat = upstream * pre[plane_idx] * suf[plane_idx + 1];
                    let grid = &self.planes[level * 6 + plane_idx];
                    let (du, dv) = grid.sample_backward(
                        coords[axes.0],
                        coords[axes.1],
                        c,
                        d_feat,
                        &mut plane_grads[level * 6 + plane_idx],
                    );
                    d_coords[axes.0] += du;
                    d_coords[axes.1] += dv;
                }
            }
        }

        // Chain through the box normalization; t is not a parameter. The
        // clamp zeroes the derivative outside the box.
        let mut d_x = Vector3::zeros();
        for a in 0..3 {
            let extent = (self.bbox_max[a] - self.bbox_min[a]).max(real(1e-9));
            let u = (x[a] - self.bbox_min[a]) / extent;
            if u > T::zero() && u < T::one() {
                d_x[a] = d_coords[a] / extent;
            }
        }
        d_x
    }
}

impl<T: Real> DeformationField<T> {
    /// Decoder heads start with zeroed final layers, so the field produces
    /// exactly zero deformation until trained.
    pub fn new(
        config: FieldConfig,
        bbox_min: Vector3<T>,
        bbox_max: Vector3<T>,
        rng: &mut impl Rng,
    ) -> Self {
        let hex = HexPlaneField::new(config, bbox_min, bbox_max, rng);
        let d_embed = hex.config.d_embed;
        let hidden = hex.config.hidden;
        let mut head_x = MlpNet::with_hidden(d_embed, hidden, 1, 3, Activation::Identity);
        let mut head_l = MlpNet::with_hidden(d_embed, hidden, 1, 6, Activation::Identity);
        let mut head_q = MlpNet::with_hidden(d_embed, hidden, 1, 4, Activation::Identity);
        for head in [&mut head_x, &mut head_l, &mut head_q] {
            head.init_fan_in(rng);
            head.zero_final_layer();
        }
        DeformationField {
            hex,
            head_x,
            head_l,
            head_q,
        }
    }

    /// Decode an embedding into (dx, dl, dq); no output activations, deltas
    /// are unbounded (scaling lives in log space, so additivity keeps l > 0).
    pub fn decode(&self, f_d: &[T], switches: DeformSwitches) -> DeformationDelta<T> {
        let mut delta = DeformationDelta::zero();
        if switches.dx {
            let v = self.head_x.forward(f_d).expect("embed width");
            delta.dx = Vector3::new(v[0], v[1], v[2]);
        }
        if switches.dl {
            let v = self.head_l.forward(f_d).expect("embed width");
            delta.dl = std::array::from_fn(|i| v[i]);
        }
        if switches.dq {
            let v = self.head_q.forward(f_d).expect("embed width");
            delta.dq = Vector4::new(v[0], v[1], v[2], v[3]);
        }
        delta
    }

    /// Deform every anchor of the canonical model to timestamp `t`:
    /// x' = x + dx, log l' = log l + dl, q' = normalize(q + dq).
    pub fn deform(
        &self,
        model: &CanonicalModel<T>,
        t: T,
        switches: DeformSwitches,
    ) -> DeformedAnchors<T> {
        let n = model.len();
        let mut out = DeformedAnchors {
            positions: Vec::with_capacity(n),
            log_scales: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            rot_norms: Vec::with_capacity(n),
            deltas: Vec::with_capacity(n),
        };
        for i in 0..n {
            let f_d = self.hex.encode(&model.positions[i], t);
            let delta = self.decode(&f_d, switches);
            let raw_q = model.rotations[i].components() + delta.dq;
            let (q, norm) = normalize4(&raw_q);
            out.positions.push(model.positions[i] + delta.dx);
            out.log_scales
                .push(std::array::from_fn(|a| model.log_scales[i][a] + delta.dl[a]));
            out.rotations.push(q);
            out.rot_norms.push(norm);
            out.deltas.push(delta);
        }
        out
    }

    /// Reverse pass for one anchor. Accumulates grid/net gradients and
    /// returns the gradient on the anchor's canonical parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn deform_backward(
        &self,
        model: &CanonicalModel<T>,
        t: T,
        switches: DeformSwitches,
        anchor: usize,
        deformed: &DeformedAnchors<T>,
        d_position_out: &Vector3<T>,
        d_log_scale_out: &[T; 6],
        d_rotation_out: &Vector4<T>,
        grads: &mut FieldGrads<T>,
    ) -> AnchorDeformGrad<T> {
        let x = &model.positions[anchor];
        let f_d = self.hex.encode(x, t);

        // q' = normalize(q + dq): the same raw-gradient feeds q and dq.
        let d_raw_q = normalize4_backward(
            &deformed.rotations[anchor],
            deformed.rot_norms[anchor],
            d_rotation_out,
        );

        let mut d_fd = vec![T::zero(); f_d.len()];
        let mut any_head = false;
        if switches.dx {
            let up = [d_position_out.x, d_position_out.y, d_position_out.z];
            let g = self
                .head_x
                .backward(&f_d, &up, &mut grads.head_x)
                .expect("embed width");
            for (a, b) in d_fd.iter_mut().zip(&g) {
                *a += *b;
            }
            any_head = true;
        }
        if switches.dl {
            let g = self
                .head_l
                .backward(&f_d, d_log_scale_out, &mut grads.head_l)
                .expect("embed width");
            for (a, b) in d_fd.iter_mut().zip(&g) {
                *a += *b;
            }
            any_head = true;
        }
        if switches.dq {
            let up = [d_raw_q[0], d_raw_q[1], d_raw_q[2], d_raw_q[3]];
            let g = self
                .head_q
                .backward(&f_d, &up, &mut grads.head_q)
                .expect("embed width");
            for (a, b) in d_fd.iter_mut().zip(&g) {
                *a += *b;
            }
            any_head = true;
        }

        let d_x_query = if any_head {
            self.hex
                .encode_backward(x, t, &d_fd, &mut grads.planes, &mut grads.fusion)
        } else {
            Vector3::zeros()
        };

        AnchorDeformGrad {
            d_position: d_position_out + d_x_query,
            d_log_scale: *d_log_scale_out,
            d_rotation: d_raw_q,
        }
    }

    pub fn save(&self, w: &mut impl Write) -> std::io::Result<()> {
        let n_levels = self.hex.config.level_scales.len() as u32;
        w.write_all(&n_levels.to_le_bytes())?;
        w.write_all(&(self.hex.config.base_resolution as u32).to_le_bytes())?;
        for s in &self.hex.config.level_scales {
            w.write_all(&(*s as u32).to_le_bytes())?;
        }
        w.write_all(&(self.hex.config.d_plane as u32).to_le_bytes())?;
        w.write_all(&(self.hex.config.d_embed as u32).to_le_bytes())?;
        w.write_all(&(self.hex.config.hidden as u32).to_le_bytes())?;
        for v in self
            .hex
            .bbox_min
            .iter()
            .chain(self.hex.bbox_max.iter())
        {
            w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
        }
        for (i, grid) in self.hex.planes.iter().enumerate() {
            let level = (i / 6) as u32;
            let axes_tag = (i % 6) as u8;
            w.write_all(&level.to_le_bytes())?;
            w.write_all(&[axes_tag])?;
            grid.save(w)?;
        }
        self.hex.fusion.save(w)?;
        self.head_x.save(w)?;
        self.head_l.save(w)?;
        self.head_q.save(w)?;
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<Self> {
        use crate::nn::{read_f32, read_u32};
        let n_levels = read_u32(r)? as usize;
        if n_levels == 0 || n_levels > 16 {
            return Err(Error::CheckpointFormat(format!(
                "implausible level count {n_levels}"
            )));
        }
        let base_resolution = read_u32(r)? as usize;
        let mut level_scales = Vec::with_capacity(n_levels);
        for _ in 0..n_levels {
            level_scales.push(read_u32(r)? as usize);
        }
        let d_plane = read_u32(r)? as usize;
        let d_embed = read_u32(r)? as usize;
        let hidden = read_u32(r)? as usize;
        let mut bounds = [0.0f32; 6];
        for b in &mut bounds {
            *b = read_f32(r)?;
        }
        let config = FieldConfig {
            base_resolution,
            level_scales,
            d_plane,
            d_embed,
            hidden,
        };
        let mut planes = Vec::with_capacity(n_levels * 6);
        for i in 0..n_levels * 6 {
            let level = read_u32(r)? as usize;
            let mut tag = [0u8];
            r.read_exact(&mut tag)?;
            if level != i / 6 || tag[0] as usize != i % 6 {
                return Err(Error::CheckpointFormat(format!(
                    "plane {} has unexpected header (level {}, axes {})",
                    i, level, tag[0]
                )));
            }
            planes.push(PlaneGrid::load(r)?);
        }
        let fusion = MlpNet::load(r)?;
        let head_x = MlpNet::load(r)?;
        let head_l = MlpNet::load(r)?;
        let head_q = MlpNet::load(r)?;
        Ok(DeformationField {
            hex: HexPlaneField {
                config,
                planes,
                fusion,
                bbox_min: Vector3::new(
                    real(bounds[0] as f64),
                    real(bounds[1] as f64),
                    real(bounds[2] as f64),
                ),
                bbox_max: Vector3::new(
                    real(bounds[3] as f64),
                    real(bounds[4] as f64),
                    real(bounds[5] as f64),
                ),
            },
            head_x,
            head_l,
            head_q,
        })
    }
}

impl<T: Real> FieldGrads<T> {
    pub fn zeros_like(field: &DeformationField<T>) -> Self {
        FieldGrads {
            planes: field
                .hex
                .planes
                .iter()
                .map(|g| vec![T::zero(); g.data.len()])
                .collect(),
            fusion: MlpGrads::zeros_like(&field.hex.fusion),
            head_x: MlpGrads::zeros_like(&field.head_x),
            head_l: MlpGrads::zeros_like(&field.head_l),
            head_q: MlpGrads::zeros_like(&field.head_q),
        }
    }

    pub fn zero(&mut self) {
        for p in &mut self.planes {
            p.fill(T::zero());
        }
        self.fusion.zero();
        self.head_x.zero();
        self.head_l.zero();
        self.head_q.zero();
    }

    pub fn add_assign(&mut self, other: &FieldGrads<T>) {
        for (a, b) in self.planes.iter_mut().zip(&other.planes) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
        self.fusion.add_assign(&other.fusion);
        self.head_x.add_assign(&other.head_x);
        self.head_l.add_assign(&other.head_l);
        self.head_q.add_assign(&other.head_q);
    }
}

impl<T: Real> DeformedAnchors<T> {
    /// Identity deformation: the canonical model itself, zero deltas.
    pub fn canonical(model: &CanonicalModel<T>) -> Self {
        DeformedAnchors {
            positions: model.positions.clone(),
            log_scales: model.log_scales.clone(),
            rotations: model.rotations.clone(),
            rot_norms: vec![T::one(); model.len()],
            deltas: vec![DeformationDelta::zero(); model.len()],
        }
    }
}
