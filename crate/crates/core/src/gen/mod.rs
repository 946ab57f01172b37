//! Neural Gaussian generation: decode k renderable Gaussians from each
//! visible deformed anchor. Attributes come from four independent MLP heads
//! conditioned on [anchor feature, view direction, temporal embedding];
//! nothing per-Gaussian is ever persisted.

use std::io::{Read, Write};

use nalgebra::{Vector3, Vector4};
use rand::Rng;

use crate::error::Result;
use crate::math::{normalize4, normalize4_backward, Quaternion};
use crate::nn::{Activation, MlpGrads, MlpNet, TemporalEmbedding};
use crate::scalar::{real, Real};
use crate::scene::FEATURE_DIM;

/// A renderable Gaussian decoded from an anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralGaussian<T> {
    pub mean: Vector3<T>,
    pub scale: Vector3<T>,
    pub rotation: Quaternion<T>,
    pub opacity: T,
    pub color: Vector3<T>,
    /// Parent anchor (index into the visible model).
    pub anchor: usize,
    /// Offset slot within the parent anchor.
    pub offset_idx: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GenConfig {
    /// Gaussians decoded per anchor.
    pub k: usize,
    pub hidden: usize,
    /// Feed the anchor-camera distance as an extra conditioning scalar
    /// (off by default; kept as a switch for comparisons).
    pub use_distance: bool,
    pub temporal: TemporalEmbedding,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            k: 5,
            hidden: 64,
            use_distance: false,
            temporal: TemporalEmbedding::default(),
        }
    }
}

impl GenConfig {
    pub fn conditioning_dim(&self) -> usize {
        FEATURE_DIM + 3 + usize::from(self.use_distance) + self.temporal.dim()
    }

    /// Start of the temporal slice within the conditioning vector.
    fn temporal_offset(&self) -> usize {
        self.conditioning_dim() - self.temporal.dim()
    }
}

/// The four attribute decoders. Opacity and color saturate through sigmoids,
/// rotation raw outputs are normalized per 4-vector, and scale outputs are
/// sigmoid-bounded then modulated by the anchor's base scale, so every
/// generated Gaussian satisfies its range invariants for arbitrary weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GenNets<T> {
    pub config: GenConfig,
    pub f_opacity: MlpNet<T>,
    pub f_color: MlpNet<T>,
    pub f_rotation: MlpNet<T>,
    pub f_scale: MlpNet<T>,
}

#[derive(Debug, Clone)]
pub struct GenGrads<T> {
    pub opacity: MlpGrads<T>,
    pub color: MlpGrads<T>,
    pub rotation: MlpGrads<T>,
    pub scale: MlpGrads<T>,
}

/// Per-Gaussian upstream gradients entering the generation backward pass.
#[derive(Debug, Clone, Copy)]
pub struct GenUpstream<T> {
    pub d_mean: Vector3<T>,
    pub d_scale: Vector3<T>,
    /// W.r.t. the unit quaternion components (w, x, y, z).
    pub d_rotation: Vector4<T>,
    pub d_opacity: T,
    pub d_color: Vector3<T>,
}

impl<T: Real> GenUpstream<T> {
    pub fn zero() -> Self {
        GenUpstream {
            d_mean: Vector3::zeros(),
            d_scale: Vector3::zeros(),
            d_rotation: Vector4::zeros(),
            d_opacity: T::zero(),
            d_color: Vector3::zeros(),
        }
    }
}

/// Gradients on one anchor's own parameters out of generation.
#[derive(Debug, Clone)]
pub struct AnchorGenGrad<T> {
    pub d_feature: [T; FEATURE_DIM],
    /// Into the deformed position x'.
    pub d_position: Vector3<T>,
    /// Into the deformed log scaling.
    pub d_log_scale: [T; 6],
    pub d_offsets: Vec<Vector3<T>>,
}

impl<T: Real> GenNets<T> {
    pub fn new(config: GenConfig, rng: &mut impl Rng) -> Self {
        let dim = config.conditioning_dim();
        let k = config.k;
        let mut f_opacity =
            MlpNet::with_hidden(dim, config.hidden, 1, k, Activation::Sigmoid);
        let mut f_color =
            MlpNet::with_hidden(dim, config.hidden, 1, 3 * k, Activation::Sigmoid);
        let mut f_rotation =
            MlpNet::with_hidden(dim, config.hidden, 1, 4 * k, Activation::Identity);
        let mut f_scale =
            MlpNet::with_hidden(dim, config.hidden, 1, 3 * k, Activation::Sigmoid);
        for net in [&mut f_opacity, &mut f_color, &mut f_rotation, &mut f_scale] {
            net.init_fan_in(rng);
            // The temporal slice starts inert: outputs cannot depend on t
            // until training moves these columns, which keeps the coarse
            // stage genuinely static and the coarse->fine handoff exact.
            net.zero_input_columns(config.temporal_offset(), dim);
        }
        // Gaussians start translucent; raw rotations start at the identity
        // quaternion so per-Gaussian normalization is well-conditioned.
        let opacity_logit = real::<T>(-2.197224577336220); // sigmoid -> 0.1
        f_opacity.set_final_bias(&vec![opacity_logit; k]);
        let mut rot_bias = vec![T::zero(); 4 * k];
        for i in 0..k {
            rot_bias[4 * i] = T::one();
        }
        f_rotation.set_final_bias(&rot_bias);
        GenNets {
            config,
            f_opacity,
            f_color,
            f_rotation,
            f_scale,
        }
    }

    /// Conditioning vector [feature, view direction, (distance), temporal].
    /// The view direction is taken from the deformed anchor position. With
    /// temporal injection disabled the temporal slice is zeroed.
    pub fn conditioning(
        &self,
        feature: &[T; FEATURE_DIM],
        deformed_pos: &Vector3<T>,
        cam_pos: &Vector3<T>,
        t: T,
        temporal_on: bool,
    ) -> Vec<T> {
        let mut cond = Vec::with_capacity(self.config.conditioning_dim());
        cond.extend_from_slice(feature);
        let v = deformed_pos - cam_pos;
        let dist = v.norm().max(real(1e-9));
        let d = v / dist;
        cond.extend_from_slice(&[d.x, d.y, d.z]);
        if self.config.use_distance {
            cond.push(dist);
        }
        if temporal_on {
            cond.extend_from_slice(&self.config.temporal.embed(t));
        } else {
            cond.extend(std::iter::repeat(T::zero()).take(self.config.temporal.dim()));
        }
        cond
    }

    /// Decode the k Gaussians of one visible anchor.
    pub fn generate(
        &self,
        anchor_idx: usize,
        feature: &[T; FEATURE_DIM],
        deformed_pos: &Vector3<T>,
        deformed_log_scale: &[T; 6],
        offsets: &[Vector3<T>],
        cam_pos: &Vector3<T>,
        t: T,
        temporal_on: bool,
        out: &mut Vec<NeuralGaussian<T>>,
    ) {
        let cond = self.conditioning(feature, deformed_pos, cam_pos, t, temporal_on);
        let opacity = self.f_opacity.forward(&cond).expect("conditioning width");
        let color = self.f_color.forward(&cond).expect("conditioning width");
        let rotation = self.f_rotation.forward(&cond).expect("conditioning width");
        let scale_sig = self.f_scale.forward(&cond).expect("conditioning width");

        let offset_scale = Vector3::new(
            deformed_log_scale[0].exp(),
            deformed_log_scale[1].exp(),
            deformed_log_scale[2].exp(),
        );
        let base_scale = Vector3::new(
            deformed_log_scale[3].exp(),
            deformed_log_scale[4].exp(),
            deformed_log_scale[5].exp(),
        );
        let means = neural_positions(deformed_pos, &offset_scale, offsets);
        for (i, mean) in means.into_iter().enumerate() {
            let raw = Vector4::new(
                rotation[4 * i],
                rotation[4 * i + 1],
                rotation[4 * i + 2],
                rotation[4 * i + 3],
            );
            let (rot, _) = normalize4(&raw);
            out.push(NeuralGaussian {
                mean,
                scale: Vector3::new(
                    scale_sig[3 * i] * base_scale.x,
                    scale_sig[3 * i + 1] * base_scale.y,
                    scale_sig[3 * i + 2] * base_scale.z,
                ),
                rotation: rot,
                opacity: opacity[i],
                color: Vector3::new(color[3 * i], color[3 * i + 1], color[3 * i + 2]),
                anchor: anchor_idx,
                offset_idx: i,
            });
        }
    }

    /// Reverse pass for one anchor: recomputes the forward, accumulates net
    /// gradients and returns gradients on the anchor inputs. `upstream[i]`
    /// is the gradient on offset slot i (zero for filtered Gaussians).
    #[allow(clippy::too_many_arguments)]
    pub fn generate_backward(
        &self,
        feature: &[T; FEATURE_DIM],
        deformed_pos: &Vector3<T>,
        deformed_log_scale: &[T; 6],
        offsets: &[Vector3<T>],
        cam_pos: &Vector3<T>,
        t: T,
        temporal_on: bool,
        upstream: &[GenUpstream<T>],
        grads: &mut GenGrads<T>,
    ) -> AnchorGenGrad<T> {
        let k = self.config.k;
        assert_eq!(upstream.len(), k);
        let cond = self.conditioning(feature, deformed_pos, cam_pos, t, temporal_on);
        let rotation = self.f_rotation.forward(&cond).expect("conditioning width");
        let scale_sig = self.f_scale.forward(&cond).expect("conditioning width");

        let offset_scale = Vector3::new(
            deformed_log_scale[0].exp(),
            deformed_log_scale[1].exp(),
            deformed_log_scale[2].exp(),
        );
        let base_scale = Vector3::new(
            deformed_log_scale[3].exp(),
            deformed_log_scale[4].exp(),
            deformed_log_scale[5].exp(),
        );

        let mut d_opacity_out = vec![T::zero(); k];
        let mut d_color_out = vec![T::zero(); 3 * k];
        let mut d_rotation_out = vec![T::zero(); 4 * k];
        let mut d_scale_out = vec![T::zero(); 3 * k];
        let mut grad = AnchorGenGrad {
            d_feature: [T::zero(); FEATURE_DIM],
            d_position: Vector3::zeros(),
            d_log_scale: [T::zero(); 6],
            d_offsets: vec![Vector3::zeros(); k],
        };

        for (i, up) in upstream.iter().enumerate() {
            d_opacity_out[i] = up.d_opacity;
            for a in 0..3 {
                d_color_out[3 * i + a] = up.d_color[a];
            }
            // s = sigmoid_out * base:
            //   d(sigmoid_out) = d_s * base,  d(log l'[3+a]) += d_s * s.
            for a in 0..3 {
                d_scale_out[3 * i + a] = up.d_scale[a] * base_scale[a];
                grad.d_log_scale[3 + a] +=
                    up.d_scale[a] * scale_sig[3 * i + a] * base_scale[a];
            }
            // Through the per-slot quaternion normalization.
            let raw = Vector4::new(
                rotation[4 * i],
                rotation[4 * i + 1],
                rotation[4 * i + 2],
                rotation[4 * i + 3],
            );
            let (unit, norm) = normalize4(&raw);
            let d_raw = normalize4_backward(&unit, norm, &up.d_rotation);
            for a in 0..4 {
                d_rotation_out[4 * i + a] = d_raw[a];
            }
            // mean_i = x' + O_i .* offset_scale.
            grad.d_position += up.d_mean;
            grad.d_offsets[i] = up.d_mean.component_mul(&offset_scale);
            for a in 0..3 {
                grad.d_log_scale[a] += up.d_mean[a] * offsets[i][a] * offset_scale[a];
            }
        }

        let mut d_cond = vec![T::zero(); cond.len()];
        for (net, gout, acc) in [
            (&self.f_opacity, &d_opacity_out, &mut grads.opacity),
            (&self.f_color, &d_color_out, &mut grads.color),
            (&self.f_rotation, &d_rotation_out, &mut grads.rotation),
            (&self.f_scale, &d_scale_out, &mut grads.scale),
        ] {
            let g = net.backward(&cond, gout, acc).expect("conditioning width");
            for (a, b) in d_cond.iter_mut().zip(&g) {
                *a += *b;
            }
        }

        for a in 0..FEATURE_DIM {
            grad.d_feature[a] = d_cond[a];
        }
        // View-direction path: d = v/|v|, v = x' - cam.
        let v = deformed_pos - cam_pos;
        let dist = v.norm().max(real(1e-9));
        let d = v / dist;
        let d_dvc = Vector3::new(
            d_cond[FEATURE_DIM],
            d_cond[FEATURE_DIM + 1],
            d_cond[FEATURE_DIM + 2],
        );
        grad.d_position += (d_dvc - d * d.dot(&d_dvc)) / dist;
        if self.config.use_distance {
            let d_dist = d_cond[FEATURE_DIM + 3];
            grad.d_position += d * d_dist;
        }
        grad
    }

    pub fn save(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&(self.config.k as u32).to_le_bytes())?;
        w.write_all(&(self.config.hidden as u32).to_le_bytes())?;
        w.write_all(&[u8::from(self.config.use_distance)])?;
        w.write_all(&(self.config.temporal.bands as u32).to_le_bytes())?;
        w.write_all(&[u8::from(self.config.temporal.append_raw)])?;
        for net in [&self.f_opacity, &self.f_color, &self.f_rotation, &self.f_scale] {
            net.save(w)?;
        }
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<Self> {
        use crate::nn::read_u32;
        let k = read_u32(r)? as usize;
        let hidden = read_u32(r)? as usize;
        let mut flag = [0u8];
        r.read_exact(&mut flag)?;
        let use_distance = flag[0] != 0;
        let bands = read_u32(r)? as usize;
        r.read_exact(&mut flag)?;
        let append_raw = flag[0] != 0;
        let config = GenConfig {
            k,
            hidden,
            use_distance,
            temporal: TemporalEmbedding {
                bands,
                append_raw,
                ..Default::default()
            },
        };
        Ok(GenNets {
            config,
            f_opacity: MlpNet::load(r)?,
            f_color: MlpNet::load(r)?,
            f_rotation: MlpNet::load(r)?,
            f_scale: MlpNet::load(r)?,
        })
    }
}

impl<T: Real> GenGrads<T> {
    pub fn zeros_like(nets: &GenNets<T>) -> Self {
        GenGrads {
            opacity: MlpGrads::zeros_like(&nets.f_opacity),
            color: MlpGrads::zeros_like(&nets.f_color),
            rotation: MlpGrads::zeros_like(&nets.f_rotation),
            scale: MlpGrads::zeros_like(&nets.f_scale),
        }
    }

    pub fn zero(&mut self) {
        self.opacity.zero();
        self.color.zero();
        self.rotation.zero();
        self.scale.zero();
    }

    pub fn add_assign(&mut self, other: &GenGrads<T>) {
        self.opacity.add_assign(&other.opacity);
        self.color.add_assign(&other.color);
        self.rotation.add_assign(&other.rotation);
        self.scale.add_assign(&other.scale);
    }
}

/// Gaussian means from a deformed anchor: mean_i = x' + O_i .* offset_scale,
/// where offset_scale is the exponentiated first half of the scaling.
pub fn neural_positions<T: Real>(
    deformed_pos: &Vector3<T>,
    offset_scale: &Vector3<T>,
    offsets: &[Vector3<T>],
) -> Vec<Vector3<T>> {
    offsets
        .iter()
        .map(|o| deformed_pos + o.component_mul(offset_scale))
        .collect()
}

/// Keep Gaussians with opacity strictly above the threshold, preserving order.
pub fn filter_by_opacity<T: Real>(
    gaussians: Vec<NeuralGaussian<T>>,
    threshold: T,
) -> Vec<NeuralGaussian<T>> {
    gaussians
        .into_iter()
        .filter(|g| g.opacity > threshold)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_nets(seed: u64) -> GenNets<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GenNets::new(
            GenConfig {
                k: 3,
                hidden: 8,
                use_distance: false,
                temporal: TemporalEmbedding {
                    bands: 2,
                    append_raw: true,
                    ..Default::default()
                },
            },
            &mut rng,
        )
    }

    struct Inputs {
        feature: [f64; FEATURE_DIM],
        pos: Vector3<f64>,
        log_scale: [f64; 6],
        offsets: Vec<Vector3<f64>>,
        cam: Vector3<f64>,
    }

    fn inputs(seed: u64, k: usize) -> Inputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut feature = [0.0; FEATURE_DIM];
        for f in &mut feature {
            *f = rng.gen_range(-0.5..0.5);
        }
        Inputs {
            feature,
            pos: Vector3::new(0.2, -0.1, 0.4),
            log_scale: std::array::from_fn(|_| rng.gen_range(-2.5..-1.0)),
            offsets: (0..k)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                    )
                })
                .collect(),
            cam: Vector3::new(0.0, 0.0, -2.0),
        }
    }

    fn run(nets: &GenNets<f64>, inp: &Inputs, t: f64, tin: bool) -> Vec<NeuralGaussian<f64>> {
        let mut out = Vec::new();
        nets.generate(
            0,
            &inp.feature,
            &inp.pos,
            &inp.log_scale,
            &inp.offsets,
            &inp.cam,
            t,
            tin,
            &mut out,
        );
        out
    }

    #[test]
    fn deterministic_and_in_range() {
        let nets = small_nets(0);
        let inp = inputs(1, 3);
        let a = run(&nets, &inp, 0.3, true);
        let b = run(&nets, &inp, 0.3, true);
        assert_eq!(a, b);
        for g in &a {
            assert!(g.opacity > 0.0 && g.opacity < 1.0);
            for c in 0..3 {
                assert!(g.color[c] >= 0.0 && g.color[c] <= 1.0);
                assert!(g.scale[c] > 0.0);
            }
            assert!((g.rotation.norm() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn invariants_hold_for_arbitrary_weights() {
        for seed in 0..20 {
            let mut nets = small_nets(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            // Random (large) weights in every net; ranges must still hold.
            nets.f_opacity.init_fan_in(&mut rng);
            nets.f_color.init_fan_in(&mut rng);
            nets.f_rotation.init_fan_in(&mut rng);
            nets.f_scale.init_fan_in(&mut rng);
            let inp = inputs(seed, 3);
            for g in run(&nets, &inp, 0.8, true) {
                assert!(g.opacity >= 0.0 && g.opacity < 1.0);
                assert!(g.scale.iter().all(|s| *s > 0.0));
                assert!(g.color.iter().all(|c| (0.0..=1.0).contains(c)));
                assert!((g.rotation.norm() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn temporal_zero_columns_make_outputs_time_independent() {
        // Freshly initialized nets have inert temporal columns.
        let nets = small_nets(3);
        let inp = inputs(2, 3);
        let a = run(&nets, &inp, 0.1, true);
        let b = run(&nets, &inp, 0.9, true);
        assert_eq!(a, b);
    }

    #[test]
    fn temporal_injection_off_matches_zeroed_embedding() {
        let mut nets = small_nets(4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        nets.f_color.init_fan_in(&mut rng); // temporal columns now nonzero
        let inp = inputs(3, 3);
        let off_a = run(&nets, &inp, 0.2, false);
        let off_b = run(&nets, &inp, 0.7, false);
        assert_eq!(off_a, off_b, "with TIN off, outputs are constant in t");
        let on_a = run(&nets, &inp, 0.2, true);
        let on_b = run(&nets, &inp, 0.7, true);
        assert_ne!(on_a, on_b, "with TIN on and trained columns, t matters");
    }

    #[test]
    fn zero_offsets_collapse_to_anchor() {
        let nets = small_nets(5);
        let mut inp = inputs(4, 3);
        for o in &mut inp.offsets {
            *o = Vector3::zeros();
        }
        for g in run(&nets, &inp, 0.5, true) {
            assert_eq!(g.mean, inp.pos);
        }
    }

    #[test]
    fn offset_displacement_scales_linearly() {
        let nets = small_nets(6);
        let mut inp = inputs(5, 3);
        let base = run(&nets, &inp, 0.5, true);
        // Doubling the offset scale doubles every displacement.
        for a in 0..3 {
            inp.log_scale[a] += (2.0f64).ln();
        }
        let doubled = run(&nets, &inp, 0.5, true);
        for (g0, g1) in base.iter().zip(&doubled) {
            let d0 = g0.mean - inp.pos;
            let d1 = g1.mean - inp.pos;
            for c in 0..3 {
                approx::assert_relative_eq!(d1[c], 2.0 * d0[c], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn filter_by_opacity_semantics() {
        let nets = small_nets(7);
        let inp = inputs(6, 3);
        let mut gs = run(&nets, &inp, 0.5, true);
        gs[0].opacity = 0.001;
        gs[1].opacity = 0.5;
        gs[2].opacity = 0.0;
        let kept = filter_by_opacity(gs.clone(), 0.005);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].offset_idx, 1);
        let all = filter_by_opacity(gs.clone(), 0.0);
        assert_eq!(all.len(), 2, "alpha > 0 survives threshold 0");
        for g in &mut gs {
            g.opacity = 0.0;
        }
        assert!(filter_by_opacity(gs, 0.0).is_empty());
    }

    /// Finite differences through the full generation stage: anchor inputs
    /// and a sample of each net's parameters.
    #[test]
    fn backward_matches_finite_differences() {
        let mut nets = small_nets(8);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        // Give temporal columns real weights so their path is exercised.
        nets.f_opacity.init_fan_in(&mut rng);
        nets.f_color.init_fan_in(&mut rng);
        nets.f_rotation.init_fan_in(&mut rng);
        nets.f_scale.init_fan_in(&mut rng);
        let mut rot_bias = vec![0.0; 12];
        for i in 0..3 {
            rot_bias[4 * i] = 1.0;
        }
        nets.f_rotation.set_final_bias(&rot_bias);

        let inp = inputs(7, 3);
        let t = 0.4;
        // Fixed random linear functional over all outputs.
        let ups: Vec<GenUpstream<f64>> = (0..3)
            .map(|_| GenUpstream {
                d_mean: Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
                d_scale: Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
                d_rotation: Vector4::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
                d_opacity: rng.gen_range(-1.0..1.0),
                d_color: Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
            })
            .collect();

        let loss = |nets: &GenNets<f64>, inp: &Inputs| -> f64 {
            let gs = run(nets, inp, t, true);
            gs.iter()
                .zip(&ups)
                .map(|(g, u)| {
                    u.d_mean.dot(&g.mean)
                        + u.d_scale.dot(&g.scale)
                        + u.d_rotation.dot(&g.rotation.components())
                        + u.d_opacity * g.opacity
                        + u.d_color.dot(&g.color)
                })
                .sum()
        };

        let mut grads = GenGrads::zeros_like(&nets);
        let g = nets.generate_backward(
            &inp.feature,
            &inp.pos,
            &inp.log_scale,
            &inp.offsets,
            &inp.cam,
            t,
            true,
            &ups,
            &mut grads,
        );

        let h = 1e-6;
        let check = |analytic: f64, fd: f64, what: &str| {
            let denom = fd.abs().max(analytic.abs()).max(1e-7);
            assert!(
                ((analytic - fd) / denom).abs() <= 1e-3,
                "{what}: analytic {analytic} vs fd {fd}"
            );
        };

        for a in 0..FEATURE_DIM {
            let mut ip = inputs(7, 3);
            ip.feature[a] += h;
            let mut im = inputs(7, 3);
            im.feature[a] -= h;
            check(g.d_feature[a], (loss(&nets, &ip) - loss(&nets, &im)) / (2.0 * h), "feature");
        }
        for a in 0..3 {
            let mut ip = inputs(7, 3);
            ip.pos[a] += h;
            let mut im = inputs(7, 3);
            im.pos[a] -= h;
            check(g.d_position[a], (loss(&nets, &ip) - loss(&nets, &im)) / (2.0 * h), "position");
        }
        for a in 0..6 {
            let mut ip = inputs(7, 3);
            ip.log_scale[a] += h;
            let mut im = inputs(7, 3);
            im.log_scale[a] -= h;
            check(
                g.d_log_scale[a],
                (loss(&nets, &ip) - loss(&nets, &im)) / (2.0 * h),
                "log_scale",
            );
        }
        for i in 0..3 {
            for a in 0..3 {
                let mut ip = inputs(7, 3);
                ip.offsets[i][a] += h;
                let mut im = inputs(7, 3);
                im.offsets[i][a] -= h;
                check(
                    g.d_offsets[i][a],
                    (loss(&nets, &ip) - loss(&nets, &im)) / (2.0 * h),
                    "offset",
                );
            }
        }
        // A sample of parameters from each of the four nets.
        fn net_of(n: &mut GenNets<f64>, which: usize) -> &mut MlpNet<f64> {
            match which {
                0 => &mut n.f_opacity,
                1 => &mut n.f_color,
                2 => &mut n.f_rotation,
                _ => &mut n.f_scale,
            }
        }
        let mut param_rng = ChaCha8Rng::seed_from_u64(99);
        for net_idx in 0..4 {
            let grad_tensors = match net_idx {
                0 => grads.opacity.tensors_mut(),
                1 => grads.color.tensors_mut(),
                2 => grads.rotation.tensors_mut(),
                _ => grads.scale.tensors_mut(),
            };
            for _ in 0..12 {
                let mut np = nets.clone();
                let mut nm = nets.clone();
                let n_tensors = grad_tensors.len();
                let tensor = param_rng.gen_range(0..n_tensors);
                let idx = param_rng.gen_range(0..grad_tensors[tensor].len());
                let analytic = grad_tensors[tensor][idx];
                net_of(&mut np, net_idx).param_tensors_mut()[tensor][idx] += h;
                net_of(&mut nm, net_idx).param_tensors_mut()[tensor][idx] -= h;
                let fd = (loss(&np, &inp) - loss(&nm, &inp)) / (2.0 * h);
                check(analytic, fd, &format!("net {net_idx} tensor {tensor} idx {idx}"));
            }
        }
    }
}
