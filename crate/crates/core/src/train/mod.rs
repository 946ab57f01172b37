//! Two-stage optimization: a static coarse warm-up of the canonical model,
//! then joint fine training of anchors, deformation field and generation
//! nets with periodic deformation-aware densification.
//!
//! Every random draw is derived from (seed, purpose, step), so a resumed
//! run replays the exact remaining step sequence; parallel gradient
//! reductions use fixed chunking, so results do not depend on thread count.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::densify::{
    accumulate, deformation_weights, grow_and_prune, AnchorObservation, DensifyConfig,
};
use crate::error::{Error, Result};
use crate::field::{
    DeformSwitches, DeformationField, DeformedAnchors, FieldConfig, FieldGrads,
};
use crate::gen::{filter_by_opacity, GenConfig, GenGrads, GenNets, GenUpstream, NeuralGaussian};
use crate::loss::{
    l1_loss, psnr, ssim_loss, ssim_metric, tv_loss, tv_loss_backward, volume_reg,
    volume_reg_backward, LossTerms, LossWeights,
};
use crate::math::Camera;
use crate::nn::{adam_step, AdamConfig, AdamState, MlpNet, TemporalEmbedding};
use crate::render::{render, render_backward, ImageBuf};
use crate::scalar::{real, Real};
use crate::scene::{
    checkpoint, init_from_points, point_bounds, visible_anchors, CanonicalModel, FRUSTUM_MARGIN,
};
use crate::synth::Dataset;

/// Anchors per parallel backward chunk. Fixed so the reduction order (and
/// therefore the floating-point result) is independent of thread count.
const BACKWARD_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub coarse_iters: u64,
    pub fine_iters: u64,
    pub seed: u64,
    pub voxel_size: f64,
    /// Gaussians per anchor.
    pub k: usize,
    pub opacity_threshold: f64,
    pub background: [f64; 3],
    pub tile_size: u32,
    /// Cameras excluded from training and used for held-out evaluation.
    pub holdout_cams: Vec<usize>,
    pub lr_position: f64,
    pub lr_position_final: f64,
    pub lr_feature: f64,
    pub lr_offsets: f64,
    pub lr_scaling: f64,
    pub lr_rotation: f64,
    pub lr_grids: f64,
    pub lr_mlp: f64,
    pub loss_weights: LossWeights,
    pub densify: DensifyConfig,
    /// Densification window, in fine-stage steps.
    pub densify_start: u64,
    pub densify_end: u64,
    /// Deformation-aware gradient weighting (uniform weights when off).
    pub dad: bool,
    /// Temporal injection into the generation conditioning.
    pub tin: bool,
    pub switches: DeformSwitches,
    pub field: FieldConfig,
    pub gen_hidden: usize,
    pub use_distance: bool,
    /// Frequency bands of the temporal embedding. Capped low enough that
    /// appearance heads cannot gate opacity frame-by-frame, which would
    /// shortcut the deformation field on short sequences.
    pub temporal_bands: usize,
    pub log_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl TrainConfig {
    /// Desk-scale schedule: full runs in minutes on a CPU.
    pub fn desk_scale() -> Self {
        TrainConfig {
            coarse_iters: 500,
            fine_iters: 5000,
            seed: 42,
            voxel_size: 0.1,
            k: 5,
            opacity_threshold: 0.005,
            background: [0.0, 0.0, 0.0],
            tile_size: 16,
            holdout_cams: vec![3],
            lr_position: 1.6e-4,
            lr_position_final: 1.6e-6,
            lr_feature: 2.5e-3,
            lr_offsets: 1e-2,
            lr_scaling: 7e-3,
            lr_rotation: 1e-3,
            lr_grids: 1.6e-2,
            lr_mlp: 2e-3,
            loss_weights: LossWeights::default(),
            densify: DensifyConfig {
                max_anchors: 4000,
                ..Default::default()
            },
            densify_start: 500,
            densify_end: 4000,
            dad: true,
            tin: true,
            switches: DeformSwitches::default(),
            field: FieldConfig::default(),
            gen_hidden: 64,
            use_distance: false,
            temporal_bands: 2,
            log_interval: 50,
        }
    }

    /// The published schedule, for completeness; far beyond desk budgets.
    pub fn paper_scale() -> Self {
        TrainConfig {
            coarse_iters: 3000,
            fine_iters: 140_000,
            densify_start: 500,
            densify_end: 120_000,
            ..Self::desk_scale()
        }
    }

    pub fn total_iters(&self) -> u64 {
        self.coarse_iters + self.fine_iters
    }

    pub fn validate(&self) -> Result<()> {
        if self.fine_iters < 1 {
            return Err(Error::invalid("fine stage needs at least one iteration"));
        }
        if self.densify_end > self.fine_iters || self.densify_start > self.densify_end {
            return Err(Error::invalid(
                "densification window must lie inside the fine stage",
            ));
        }
        self.densify.validate()
    }

    fn gen_config(&self) -> GenConfig {
        GenConfig {
            k: self.k,
            hidden: self.gen_hidden,
            use_distance: self.use_distance,
            temporal: TemporalEmbedding {
                bands: self.temporal_bands,
                ..Default::default()
            },
        }
    }

    pub fn render_opts<T: Real>(&self, deform: bool) -> RenderOpts<T> {
        RenderOpts {
            deform,
            tin: self.tin,
            switches: self.switches,
            opacity_threshold: real(self.opacity_threshold),
            background: Vector3::new(
                real(self.background[0]),
                real(self.background[1]),
                real(self.background[2]),
            ),
            tile_size: self.tile_size,
        }
    }
}

/// The full trainable scene.
#[derive(Debug, Clone, PartialEq)]
pub struct System<T> {
    pub model: CanonicalModel<T>,
    pub gen: GenNets<T>,
    pub field: DeformationField<T>,
}

#[derive(Debug, Clone)]
pub struct RenderOpts<T> {
    pub deform: bool,
    pub tin: bool,
    pub switches: DeformSwitches,
    pub opacity_threshold: T,
    pub background: Vector3<T>,
    pub tile_size: u32,
}

impl<T: Real> System<T> {
    /// Initialize from a dataset's sparse points: voxelized anchors, fresh
    /// nets, field bounds from the point cloud plus a 20% margin.
    pub fn init(dataset: &Dataset<T>, cfg: &TrainConfig) -> Result<System<T>> {
        let mut rng = step_rng(cfg.seed, RngTag::Init, 0);
        let model = init_from_points(
            &dataset.init_points,
            real(cfg.voxel_size),
            cfg.k,
            &mut rng,
        )?;
        let gen = GenNets::new(cfg.gen_config(), &mut rng);
        let (lo, hi) = point_bounds(&dataset.init_points);
        let margin = (hi - lo) * real::<T>(0.2);
        let field = DeformationField::new(cfg.field.clone(), lo - margin, hi + margin, &mut rng);
        Ok(System { model, gen, field })
    }

    /// Render one view at time t with the given options.
    pub fn render_view(&self, opts: &RenderOpts<T>, cam: &Camera<T>, t: T) -> ImageBuf<T> {
        let deformed = if opts.deform {
            self.field.deform(&self.model, t, opts.switches)
        } else {
            DeformedAnchors::canonical(&self.model)
        };
        let visible = visible_anchors(&deformed.positions, cam, FRUSTUM_MARGIN);
        let (gaussians, _) = self.generate_visible(&deformed, &visible, cam, t, opts.tin);
        let filtered = filter_by_opacity(gaussians, opts.opacity_threshold);
        render(&filtered, cam, opts.background, opts.tile_size).image
    }

    /// Decode the Gaussians of the visible anchors (unfiltered) plus each
    /// visible anchor's mean child opacity.
    fn generate_visible(
        &self,
        deformed: &DeformedAnchors<T>,
        visible: &[usize],
        cam: &Camera<T>,
        t: T,
        tin: bool,
    ) -> (Vec<NeuralGaussian<T>>, Vec<T>) {
        let cam_pos = cam.position();
        let k = self.model.offsets_per_anchor;
        let chunks: Vec<Vec<NeuralGaussian<T>>> = visible
            .par_chunks(BACKWARD_CHUNK)
            .map(|idxs| {
                let mut out = Vec::with_capacity(idxs.len() * k);
                for &i in idxs {
                    self.gen.generate(
                        i,
                        &self.model.features[i],
                        &deformed.positions[i],
                        &deformed.log_scales[i],
                        &self.model.offsets[i],
                        &cam_pos,
                        t,
                        tin,
                        &mut out,
                    );
                }
                out
            })
            .collect();
        let gaussians: Vec<NeuralGaussian<T>> = chunks.into_iter().flatten().collect();
        let inv_k = T::one() / real(k as f64);
        let mean_opacity = gaussians
            .chunks(k)
            .map(|c| c.iter().fold(T::zero(), |a, g| a + g.opacity) * inv_k)
            .collect();
        (gaussians, mean_opacity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RngTag {
    Init = 0,
    Frame = 1,
    Densify = 2,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Per-(purpose, step) RNG derived from the run seed; makes resumption
/// replay the identical stream without serializing generator state.
fn step_rng(seed: u64, tag: RngTag, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(tag as u64 ^ splitmix(step))))
}

/// One line of the structured training log.
#[derive(Debug, Clone, Serialize)]
pub struct LogRecord {
    pub step: u64,
    pub stage: String,
    pub l1: f64,
    pub ssim: f64,
    pub tv: f64,
    pub vol: f64,
    pub total: f64,
    pub psnr: f64,
    pub anchors: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grown: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pruned: Option<usize>,
}

/// Adam states for every parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct OptStates<T> {
    pub anchor_pos: AdamState<T>,
    pub anchor_feat: AdamState<T>,
    pub anchor_scale: AdamState<T>,
    pub anchor_rot: AdamState<T>,
    pub anchor_off: AdamState<T>,
    pub grids: Vec<AdamState<T>>,
    pub fusion: Vec<AdamState<T>>,
    pub head_x: Vec<AdamState<T>>,
    pub head_l: Vec<AdamState<T>>,
    pub head_q: Vec<AdamState<T>>,
    pub f_opacity: Vec<AdamState<T>>,
    pub f_color: Vec<AdamState<T>>,
    pub f_rotation: Vec<AdamState<T>>,
    pub f_scale: Vec<AdamState<T>>,
}

fn net_states<T: Real>(net: &MlpNet<T>) -> Vec<AdamState<T>> {
    let mut sizes = Vec::new();
    let mut net = net.clone();
    for t in net.param_tensors_mut() {
        sizes.push(t.len());
    }
    sizes.into_iter().map(AdamState::new).collect()
}

impl<T: Real> OptStates<T> {
    pub fn new(sys: &System<T>) -> Self {
        let n = sys.model.len();
        let k = sys.model.offsets_per_anchor;
        OptStates {
            anchor_pos: AdamState::new(3 * n),
            anchor_feat: AdamState::new(crate::scene::FEATURE_DIM * n),
            anchor_scale: AdamState::new(6 * n),
            anchor_rot: AdamState::new(4 * n),
            anchor_off: AdamState::new(3 * k * n),
            grids: sys
                .field
                .hex
                .planes
                .iter()
                .map(|p| AdamState::new(p.data.len()))
                .collect(),
            fusion: net_states(&sys.field.hex.fusion),
            head_x: net_states(&sys.field.head_x),
            head_l: net_states(&sys.field.head_l),
            head_q: net_states(&sys.field.head_q),
            f_opacity: net_states(&sys.gen.f_opacity),
            f_color: net_states(&sys.gen.f_color),
            f_rotation: net_states(&sys.gen.f_rotation),
            f_scale: net_states(&sys.gen.f_scale),
        }
    }

    fn remap_anchors(&mut self, kept: &[usize], added: usize, k: usize) {
        self.anchor_pos = self.anchor_pos.remap(kept, added, 3);
        self.anchor_feat = self.anchor_feat.remap(kept, added, crate::scene::FEATURE_DIM);
        self.anchor_scale = self.anchor_scale.remap(kept, added, 6);
        self.anchor_rot = self.anchor_rot.remap(kept, added, 4);
        self.anchor_off = self.anchor_off.remap(kept, added, 3 * k);
    }

    fn save(&self, w: &mut impl Write) -> std::io::Result<()> {
        for s in self.all() {
            s.save(w)?;
        }
        Ok(())
    }

    fn load_into(r: &mut impl Read, template: &mut OptStates<T>) -> Result<()> {
        for s in template.all_mut() {
            let loaded = AdamState::load(r)?;
            if loaded.m.len() != s.m.len() {
                return Err(Error::CheckpointFormat(format!(
                    "optimizer state length {} does not match parameters {}",
                    loaded.m.len(),
                    s.m.len()
                )));
            }
            *s = loaded;
        }
        Ok(())
    }

    fn all(&self) -> Vec<&AdamState<T>> {
        let mut v: Vec<&AdamState<T>> = vec![
            &self.anchor_pos,
            &self.anchor_feat,
            &self.anchor_scale,
            &self.anchor_rot,
            &self.anchor_off,
        ];
        v.extend(self.grids.iter());
        v.extend(self.fusion.iter());
        v.extend(self.head_x.iter());
        v.extend(self.head_l.iter());
        v.extend(self.head_q.iter());
        v.extend(self.f_opacity.iter());
        v.extend(self.f_color.iter());
        v.extend(self.f_rotation.iter());
        v.extend(self.f_scale.iter());
        v
    }

    fn all_mut(&mut self) -> Vec<&mut AdamState<T>> {
        let mut v: Vec<&mut AdamState<T>> = vec![
            &mut self.anchor_pos,
            &mut self.anchor_feat,
            &mut self.anchor_scale,
            &mut self.anchor_rot,
            &mut self.anchor_off,
        ];
        v.extend(self.grids.iter_mut());
        v.extend(self.fusion.iter_mut());
        v.extend(self.head_x.iter_mut());
        v.extend(self.head_l.iter_mut());
        v.extend(self.head_q.iter_mut());
        v.extend(self.f_opacity.iter_mut());
        v.extend(self.f_color.iter_mut());
        v.extend(self.f_rotation.iter_mut());
        v.extend(self.f_scale.iter_mut());
        v
    }
}

/// Flat per-anchor gradient buffers (one row per anchor).
#[derive(Debug, Clone)]
struct AnchorGradBufs<T> {
    pos: Vec<T>,
    feat: Vec<T>,
    scale: Vec<T>,
    rot: Vec<T>,
    off: Vec<T>,
}

impl<T: Real> AnchorGradBufs<T> {
    fn new(n: usize, k: usize) -> Self {
        AnchorGradBufs {
            pos: vec![T::zero(); 3 * n],
            feat: vec![T::zero(); crate::scene::FEATURE_DIM * n],
            scale: vec![T::zero(); 6 * n],
            rot: vec![T::zero(); 4 * n],
            off: vec![T::zero(); 3 * k * n],
        }
    }

    fn zero(&mut self) {
        self.pos.fill(T::zero());
        self.feat.fill(T::zero());
        self.scale.fill(T::zero());
        self.rot.fill(T::zero());
        self.off.fill(T::zero());
    }
}

/// Per-chunk output of the anchor backward pass.
struct ChunkGrads<T> {
    gen: GenGrads<T>,
    field: Option<FieldGrads<T>>,
    rows: Vec<(usize, AnchorGradRow<T>)>,
}

struct AnchorGradRow<T> {
    pos: Vector3<T>,
    feat: [T; crate::scene::FEATURE_DIM],
    scale: [T; 6],
    rot: Vector4<T>,
    off: Vec<Vector3<T>>,
}

pub struct Trainer<T> {
    pub system: System<T>,
    pub config: TrainConfig,
    pub opt: OptStates<T>,
    /// Next step to execute, over the combined coarse+fine schedule.
    pub step: u64,
    pub log: Vec<LogRecord>,
    grads: AnchorGradBufs<T>,
    scratch: Vec<T>,
}

impl<T: Real> Trainer<T> {
    pub fn new(dataset: &Dataset<T>, config: TrainConfig) -> Result<Trainer<T>> {
        config.validate()?;
        let system = System::init(dataset, &config)?;
        let opt = OptStates::new(&system);
        let n = system.model.len();
        let k = system.model.offsets_per_anchor;
        Ok(Trainer {
            system,
            config,
            opt,
            step: 0,
            log: Vec::new(),
            grads: AnchorGradBufs::new(n, k),
            scratch: Vec::new(),
        })
    }

    /// Start a (fresh) fine stage from an existing system, e.g. a coarse
    /// checkpoint saved without training state.
    pub fn from_system(system: System<T>, config: TrainConfig, step: u64) -> Result<Trainer<T>> {
        config.validate()?;
        let opt = OptStates::new(&system);
        let n = system.model.len();
        let k = system.model.offsets_per_anchor;
        Ok(Trainer {
            system,
            config,
            opt,
            step,
            log: Vec::new(),
            grads: AnchorGradBufs::new(n, k),
            scratch: Vec::new(),
        })
    }

    pub fn in_fine_stage(&self) -> bool {
        self.step >= self.config.coarse_iters
    }

    /// Run the coarse stage to completion (no-op if already past it).
    pub fn train_coarse(&mut self, dataset: &Dataset<T>) -> Result<()> {
        self.run_until(dataset, self.config.coarse_iters)
    }

    /// Run the fine stage to completion.
    pub fn train_fine(&mut self, dataset: &Dataset<T>) -> Result<()> {
        self.run_until(dataset, self.config.total_iters())
    }

    /// Advance to the given global step (coarse then fine as applicable).
    pub fn run_until(&mut self, dataset: &Dataset<T>, until: u64) -> Result<()> {
        if dataset.frames.is_empty() {
            return Err(Error::invalid("dataset has no frames"));
        }
        let train_frames = dataset.train_frames(&self.config.holdout_cams);
        if train_frames.is_empty() {
            return Err(Error::invalid(
                "no training frames left after excluding held-out cameras",
            ));
        }
        while self.step < until.min(self.config.total_iters()) {
            let record = self.train_step(dataset, &train_frames)?;
            if let Some(rec) = record {
                self.log.push(rec);
            }
            self.step += 1;
        }
        Ok(())
    }

    fn train_step(
        &mut self,
        dataset: &Dataset<T>,
        train_frames: &[usize],
    ) -> Result<Option<LogRecord>> {
        let step = self.step;
        let cfg = &self.config;
        let fine = step >= cfg.coarse_iters;
        let mut rng = step_rng(cfg.seed, RngTag::Frame, step);
        let frame = &dataset.frames[train_frames[rng.gen_range(0..train_frames.len())]];
        let t = frame.t;
        let cam = &frame.camera;
        let tin = fine && cfg.tin;
        let switches = cfg.switches;

        let System { model, field, .. } = &self.system;

        // Forward: deform, cull, generate, render.
        let deformed = if fine {
            field.deform(model, t, switches)
        } else {
            DeformedAnchors::canonical(model)
        };
        let visible = visible_anchors(&deformed.positions, cam, FRUSTUM_MARGIN);
        let (all_gaussians, mean_opacity) =
            self.system
                .generate_visible(&deformed, &visible, cam, t, tin);
        let tau = real::<T>(cfg.opacity_threshold);
        let gaussians = filter_by_opacity(all_gaussians, tau);
        let background = Vector3::new(
            real(cfg.background[0]),
            real(cfg.background[1]),
            real(cfg.background[2]),
        );
        let out = render(&gaussians, cam, background, cfg.tile_size);

        // Loss terms and the image gradient.
        let (l1, mut d_image) = l1_loss(&out.image, &frame.image);
        let mut terms = LossTerms {
            l1: l1.to_f64_lossy(),
            ..Default::default()
        };
        if cfg.loss_weights.ssim > 0.0 {
            let (sv, sg) = ssim_loss(&out.image, &frame.image);
            terms.ssim = sv.to_f64_lossy();
            let w: T = real(cfg.loss_weights.ssim);
            for (a, b) in d_image.data.iter_mut().zip(&sg.data) {
                *a += b * w;
            }
        }
        if fine && cfg.loss_weights.tv > 0.0 {
            terms.tv = tv_loss(&self.system.field.hex.planes).to_f64_lossy();
        }
        terms.vol = volume_reg(&gaussians).to_f64_lossy();
        let total = terms.total(&cfg.loss_weights);
        if !total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!(
                    "loss terms l1={} ssim={} tv={} vol={} with {} gaussians from {} anchors",
                    terms.l1,
                    terms.ssim,
                    terms.tv,
                    terms.vol,
                    gaussians.len(),
                    visible.len()
                ),
            });
        }

        // Rasterizer backward plus the volume term.
        let System { model, gen, field } = &self.system;
        let mut ggrads = render_backward(&out.cache, &d_image, &gaussians, cam)?;
        if cfg.loss_weights.vol > 0.0 {
            volume_reg_backward(&gaussians, real(cfg.loss_weights.vol), &mut ggrads);
        }

        // Group per-Gaussian gradients by visible anchor slot.
        let k = model.offsets_per_anchor;
        let mut vis_slot = vec![u32::MAX; model.len()];
        for (v, &a) in visible.iter().enumerate() {
            vis_slot[a] = v as u32;
        }
        let mut upstream: Vec<GenUpstream<T>> = vec![GenUpstream::zero(); visible.len() * k];
        let mut child_norms: Vec<T> = vec![T::zero(); visible.len() * k];
        for (g, gg) in gaussians.iter().zip(&ggrads) {
            let v = vis_slot[g.anchor] as usize;
            upstream[v * k + g.offset_idx] = GenUpstream {
                d_mean: gg.d_mean,
                d_scale: gg.d_scale,
                d_rotation: gg.d_rotation,
                d_opacity: gg.d_opacity,
                d_color: gg.d_color,
            };
            child_norms[v * k + g.offset_idx] = gg.d_mean2d.norm();
        }

        // Anchor backward in fixed chunks (deterministic merge order).
        let cam_pos = cam.position();
        let chunk_out: Vec<ChunkGrads<T>> = visible
            .par_chunks(BACKWARD_CHUNK)
            .enumerate()
            .map(|(ci, idxs)| {
                let mut cg = ChunkGrads {
                    gen: GenGrads::zeros_like(gen),
                    field: fine.then(|| FieldGrads::zeros_like(field)),
                    rows: Vec::with_capacity(idxs.len()),
                };
                for (j, &i) in idxs.iter().enumerate() {
                    let v = ci * BACKWARD_CHUNK + j;
                    let ups = &upstream[v * k..(v + 1) * k];
                    let ag = gen.generate_backward(
                        &model.features[i],
                        &deformed.positions[i],
                        &deformed.log_scales[i],
                        &model.offsets[i],
                        &cam_pos,
                        t,
                        tin,
                        ups,
                        &mut cg.gen,
                    );
                    let row = if let Some(fg) = cg.field.as_mut() {
                        let dg = field.deform_backward(
                            model,
                            t,
                            switches,
                            i,
                            &deformed,
                            &ag.d_position,
                            &ag.d_log_scale,
                            &Vector4::zeros(),
                            fg,
                        );
                        AnchorGradRow {
                            pos: dg.d_position,
                            feat: ag.d_feature,
                            scale: dg.d_log_scale,
                            rot: dg.d_rotation,
                            off: ag.d_offsets,
                        }
                    } else {
                        AnchorGradRow {
                            pos: ag.d_position,
                            feat: ag.d_feature,
                            scale: ag.d_log_scale,
                            rot: Vector4::zeros(),
                            off: ag.d_offsets,
                        }
                    };
                    cg.rows.push((i, row));
                }
                cg
            })
            .collect();

        // Merge chunk results in order.
        let n = model.len();
        if self.grads.pos.len() != 3 * n {
            self.grads = AnchorGradBufs::new(n, k);
        } else {
            self.grads.zero();
        }
        let mut gen_grads = GenGrads::zeros_like(gen);
        let mut field_grads = fine.then(|| FieldGrads::zeros_like(field));
        for cg in chunk_out {
            gen_grads.add_assign(&cg.gen);
            if let (Some(total), Some(part)) = (field_grads.as_mut(), cg.field.as_ref()) {
                total.add_assign(part);
            }
            for (i, row) in cg.rows {
                for a in 0..3 {
                    self.grads.pos[3 * i + a] += row.pos[a];
                }
                for a in 0..crate::scene::FEATURE_DIM {
                    self.grads.feat[crate::scene::FEATURE_DIM * i + a] += row.feat[a];
                }
                for a in 0..6 {
                    self.grads.scale[6 * i + a] += row.scale[a];
                }
                for a in 0..4 {
                    self.grads.rot[4 * i + a] += row.rot[a];
                }
                for (oi, o) in row.off.iter().enumerate() {
                    for a in 0..3 {
                        self.grads.off[3 * (k * i + oi) + a] += o[a];
                    }
                }
            }
        }
        if let Some(fg) = field_grads.as_mut() {
            if cfg.loss_weights.tv > 0.0 {
                tv_loss_backward(
                    &self.system.field.hex.planes,
                    real(cfg.loss_weights.tv),
                    &mut fg.planes,
                );
            }
        }

        // Optimizer updates.
        self.apply_updates(fine, gen_grads, field_grads)?;

        // Densification bookkeeping (fine stage, inside the window).
        let mut grown_pruned: Option<(usize, usize)> = None;
        let cfg = &self.config;
        let fine_step = step.saturating_sub(cfg.coarse_iters);
        let in_window =
            fine && fine_step >= cfg.densify_start && fine_step < cfg.densify_end;
        if in_window {
            let weights = if cfg.dad {
                deformation_weights(&self.system.model.rotations, &deformed, &cfg.densify)?
            } else {
                vec![T::one(); self.system.model.len()]
            };
            let observations: Vec<AnchorObservation<T>> = visible
                .iter()
                .enumerate()
                .map(|(v, &i)| {
                    let norms = &child_norms[v * k..(v + 1) * k];
                    let rendered = gaussians
                        .iter()
                        .skip_while(|g| g.anchor != i)
                        .take_while(|g| g.anchor == i)
                        .count();
                    let mean = if rendered > 0 {
                        norms.iter().fold(T::zero(), |a, b| a + *b)
                            / real(rendered as f64)
                    } else {
                        T::zero()
                    };
                    AnchorObservation {
                        anchor: i,
                        mean_grad_norm: mean,
                        child_grad_norms: norms.to_vec(),
                        mean_opacity: mean_opacity[v],
                    }
                })
                .collect();
            accumulate(&mut self.system.model, &observations, &weights);

            if (fine_step + 1) % cfg.densify.interval == 0 {
                let mut drng = step_rng(cfg.seed, RngTag::Densify, step);
                let report =
                    grow_and_prune(&mut self.system.model, &cfg.densify, step, &mut drng);
                let k = self.system.model.offsets_per_anchor;
                self.opt
                    .remap_anchors(&report.kept, report.grown, k);
                grown_pruned = Some((report.grown, report.pruned));
            }
        }

        let cfg = &self.config;
        let should_log = cfg.log_interval > 0
            && (step % cfg.log_interval == 0
                || step + 1 == cfg.total_iters()
                || grown_pruned.is_some());
        Ok(should_log.then(|| LogRecord {
            step,
            stage: if fine { "fine".into() } else { "coarse".into() },
            l1: terms.l1,
            ssim: terms.ssim,
            tv: terms.tv,
            vol: terms.vol,
            total,
            psnr: psnr(&out.image, &frame.image),
            anchors: self.system.model.len(),
            grown: grown_pruned.map(|(g, _)| g),
            pruned: grown_pruned.map(|(_, p)| p),
        }))
    }

    /// Exponentially decayed position learning rate over the whole run.
    fn position_lr(&self) -> f64 {
        let cfg = &self.config;
        let total = cfg.total_iters().max(1) as f64;
        let progress = (self.step as f64 / total).clamp(0.0, 1.0);
        cfg.lr_position * (cfg.lr_position_final / cfg.lr_position).powf(progress)
    }

    fn apply_updates(
        &mut self,
        fine: bool,
        mut gen_grads: GenGrads<T>,
        field_grads: Option<FieldGrads<T>>,
    ) -> Result<()> {
        let base = AdamConfig::<T>::with_lr(0.0);
        let lr = |v: f64| AdamConfig { lr: real(v), ..base };
        let pos_lr = self.position_lr();
        let model = &mut self.system.model;
        let n = model.len();
        let k = model.offsets_per_anchor;

        // Anchor groups: gather into a flat scratch, update, scatter back.
        let scratch = &mut self.scratch;

        // Positions (exponentially scheduled lr).
        scratch.clear();
        scratch.extend(model.positions.iter().flat_map(|p| [p.x, p.y, p.z]));
        adam_step(
            scratch,
            &mut self.grads.pos,
            &mut self.opt.anchor_pos,
            &lr(pos_lr),
        );
        for (i, p) in model.positions.iter_mut().enumerate() {
            *p = Vector3::new(scratch[3 * i], scratch[3 * i + 1], scratch[3 * i + 2]);
        }

        // Features.
        scratch.clear();
        scratch.extend(model.features.iter().flatten().copied());
        adam_step(
            scratch,
            &mut self.grads.feat,
            &mut self.opt.anchor_feat,
            &lr(self.config.lr_feature),
        );
        for (i, f) in model.features.iter_mut().enumerate() {
            f.copy_from_slice(&scratch[crate::scene::FEATURE_DIM * i..crate::scene::FEATURE_DIM * (i + 1)]);
        }

        // Log scales.
        scratch.clear();
        scratch.extend(model.log_scales.iter().flatten().copied());
        adam_step(
            scratch,
            &mut self.grads.scale,
            &mut self.opt.anchor_scale,
            &lr(self.config.lr_scaling),
        );
        for (i, s) in model.log_scales.iter_mut().enumerate() {
            s.copy_from_slice(&scratch[6 * i..6 * (i + 1)]);
        }

        // Rotations (renormalized after the step).
        scratch.clear();
        for q in &model.rotations {
            scratch.extend([q.w, q.x, q.y, q.z]);
        }
        adam_step(
            scratch,
            &mut self.grads.rot,
            &mut self.opt.anchor_rot,
            &lr(self.config.lr_rotation),
        );
        for (i, q) in model.rotations.iter_mut().enumerate() {
            *q = crate::math::Quaternion::new(
                scratch[4 * i],
                scratch[4 * i + 1],
                scratch[4 * i + 2],
                scratch[4 * i + 3],
            );
        }

        // Offsets.
        scratch.clear();
        scratch.extend(
            model
                .offsets
                .iter()
                .flat_map(|os| os.iter().flat_map(|o| [o.x, o.y, o.z])),
        );
        adam_step(
            scratch,
            &mut self.grads.off,
            &mut self.opt.anchor_off,
            &lr(self.config.lr_offsets),
        );
        for i in 0..n {
            for oi in 0..k {
                let base = 3 * (k * i + oi);
                model.offsets[i][oi] =
                    Vector3::new(scratch[base], scratch[base + 1], scratch[base + 2]);
            }
        }

        // Generation nets (both stages).
        let mlp_cfg = lr(self.config.lr_mlp);
        for (net, ng, st) in [
            (&mut self.system.gen.f_opacity, &mut gen_grads.opacity, &mut self.opt.f_opacity),
            (&mut self.system.gen.f_color, &mut gen_grads.color, &mut self.opt.f_color),
            (&mut self.system.gen.f_rotation, &mut gen_grads.rotation, &mut self.opt.f_rotation),
            (&mut self.system.gen.f_scale, &mut gen_grads.scale, &mut self.opt.f_scale),
        ] {
            let mut params = net.param_tensors_mut();
            let mut grads = ng.tensors_mut();
            for ((p, g), s) in params.iter_mut().zip(grads.iter_mut()).zip(st.iter_mut()) {
                adam_step(p, g, s, &mlp_cfg);
            }
        }

        // Deformation field (fine stage only).
        if fine {
            if let Some(mut fg) = field_grads {
                let grid_cfg = lr(self.config.lr_grids);
                for ((plane, g), s) in self
                    .system
                    .field
                    .hex
                    .planes
                    .iter_mut()
                    .zip(fg.planes.iter_mut())
                    .zip(self.opt.grids.iter_mut())
                {
                    adam_step(&mut plane.data, g, s, &grid_cfg);
                }
                for (net, ng, st) in [
                    (&mut self.system.field.hex.fusion, &mut fg.fusion, &mut self.opt.fusion),
                    (&mut self.system.field.head_x, &mut fg.head_x, &mut self.opt.head_x),
                    (&mut self.system.field.head_l, &mut fg.head_l, &mut self.opt.head_l),
                    (&mut self.system.field.head_q, &mut fg.head_q, &mut self.opt.head_q),
                ] {
                    let mut params = net.param_tensors_mut();
                    let mut grads = ng.tensors_mut();
                    for ((p, g), s) in params.iter_mut().zip(grads.iter_mut()).zip(st.iter_mut())
                    {
                        adam_step(p, g, s, &mlp_cfg);
                    }
                }
            }
        }
        Ok(())
    }

    /// Write the full training checkpoint: system plus the training section.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        checkpoint::write_system(&mut w, &self.system.model, &self.system.gen, &self.system.field)?;
        w.write_all(checkpoint::TRAIN_MAGIC)?;
        w.write_all(&self.step.to_le_bytes())?;
        let cfg = serde_json::to_vec(&self.config)?;
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(&cfg)?;
        checkpoint::write_stats(&mut w, &self.system.model.stats)?;
        self.opt.save(&mut w)?;
        Ok(())
    }

    /// Resume from a checkpoint written by [`Trainer::save`].
    pub fn resume(path: &Path) -> Result<Trainer<T>> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let (mut model, gen, field) = checkpoint::read_system(&mut r)?;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| {
            Error::CheckpointFormat("checkpoint has no training section to resume from".into())
        })?;
        if &magic != checkpoint::TRAIN_MAGIC {
            return Err(Error::CheckpointFormat(format!(
                "bad training-section magic {magic:?}"
            )));
        }
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        let step = u64::from_le_bytes(buf8);
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let cfg_len = u32::from_le_bytes(buf4) as usize;
        let mut cfg_bytes = vec![0u8; cfg_len];
        r.read_exact(&mut cfg_bytes)?;
        let config: TrainConfig = serde_json::from_slice(&cfg_bytes)?;
        let stats = checkpoint::read_stats(&mut r)?;
        if stats.len() != model.len() {
            return Err(Error::CheckpointFormat(
                "stat count does not match anchors".into(),
            ));
        }
        model.stats = stats;
        let system = System { model, gen, field };
        let mut opt = OptStates::new(&system);
        OptStates::load_into(&mut r, &mut opt)?;
        let n = system.model.len();
        let k = system.model.offsets_per_anchor;
        Ok(Trainer {
            system,
            config,
            opt,
            step,
            log: Vec::new(),
            grads: AnchorGradBufs::new(n, k),
            scratch: Vec::new(),
        })
    }
}

/// Metric report over a set of frames.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub frames: usize,
    pub anchors: usize,
}

/// Render and score the listed frames against their targets.
pub fn evaluate<T: Real>(
    system: &System<T>,
    config: &TrainConfig,
    dataset: &Dataset<T>,
    frame_indices: &[usize],
) -> Result<EvalReport> {
    if frame_indices.is_empty() {
        return Err(Error::invalid("no frames to evaluate"));
    }
    let opts = config.render_opts::<T>(true);
    let scores: Vec<(f64, f64)> = frame_indices
        .par_iter()
        .map(|&i| {
            let f = &dataset.frames[i];
            let img = system.render_view(&opts, &f.camera, f.t);
            (psnr(&img, &f.image), ssim_metric(&img, &f.image).to_f64_lossy())
        })
        .collect();
    let n = scores.len() as f64;
    Ok(EvalReport {
        mean_psnr: scores.iter().map(|s| s.0).sum::<f64>() / n,
        mean_ssim: scores.iter().map(|s| s.1).sum::<f64>() / n,
        frames: scores.len(),
        anchors: system.model.len(),
    })
}
