//! Synthetic ground truth for desk-scale experiments: parametric dynamic
//! scenes (translating, rotating, pulsating clusters plus static clutter),
//! multi-camera rigs, target frames with per-pixel dynamic-region labels,
//! and the sparse init point cloud.
//!
//! Targets are rendered by this project's own rasterizer, so the model class
//! can represent every scene exactly: reconstruction error is attributable
//! to optimization, not model mismatch.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gen::NeuralGaussian;
use crate::math::{normalize4, Camera, Quaternion};
use crate::render::{self, ImageBuf};
use crate::scalar::{real, Real};
use crate::scene::voxel_cell;

/// Time-parameterized scalar curve on t in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Curve {
    Constant(f64),
    Linear { from: f64, to: f64 },
    Sine { center: f64, amp: f64, cycles: f64, phase: f64 },
    /// Still at `from`, smooth glide to `to` during [start, end], then still.
    SmoothStep { from: f64, to: f64, start: f64, end: f64 },
    /// At `base` outside [start, end]; smooth out-and-back excursion to
    /// `peak` inside it. Transient gestures like this are the regime where
    /// window-averaged gradients dilute and deformation weighting matters:
    /// the anchor is displaced exactly while the region is hard to fit.
    Pulse { base: f64, peak: f64, start: f64, end: f64 },
}

impl Curve {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            Curve::Constant(v) => v,
            Curve::Linear { from, to } => from + (to - from) * t,
            Curve::Sine {
                center,
                amp,
                cycles,
                phase,
            } => center + amp * (2.0 * std::f64::consts::PI * cycles * t + phase).sin(),
            Curve::SmoothStep {
                from,
                to,
                start,
                end,
            } => {
                let u = ((t - start) / (end - start).max(1e-9)).clamp(0.0, 1.0);
                let s = u * u * (3.0 - 2.0 * u);
                from + (to - from) * s
            }
            Curve::Pulse {
                base,
                peak,
                start,
                end,
            } => {
                let u = ((t - start) / (end - start).max(1e-9)).clamp(0.0, 1.0);
                let s = (std::f64::consts::PI * u).sin().powi(2);
                base + (peak - base) * s
            }
        }
    }

    pub fn constant(v: f64) -> Curve {
        Curve::Constant(v)
    }
}

/// One Gaussian of a cluster, relative to the track center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub offset: [f64; 3],
    pub sigma: [f64; 3],
    pub color: [f64; 3],
    pub opacity: f64,
}

/// A cluster of Gaussians with time-parameterized center, rotation, scale
/// multiplier and color shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub name: String,
    /// Marks the track (and its pixels/voxels) as dynamic for the
    /// densification assays.
    pub dynamic: bool,
    pub blobs: Vec<Blob>,
    pub position: [Curve; 3],
    /// Rotation about `rot_axis` by `rot_angle(t)` radians.
    pub rot_axis: [f64; 3],
    pub rot_angle: Curve,
    /// Uniform scale multiplier on blob sigmas.
    pub scale: Curve,
    /// Added to blob colors, clamped to [0, 1].
    pub color_shift: [Curve; 3],
}

impl Track {
    fn cluster(name: &str, dynamic: bool, blobs: Vec<Blob>, center: [f64; 3]) -> Track {
        Track {
            name: name.into(),
            dynamic,
            blobs,
            position: [
                Curve::constant(center[0]),
                Curve::constant(center[1]),
                Curve::constant(center[2]),
            ],
            rot_axis: [0.0, 1.0, 0.0],
            rot_angle: Curve::constant(0.0),
            scale: Curve::constant(1.0),
            color_shift: [Curve::constant(0.0), Curve::constant(0.0), Curve::constant(0.0)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub count: usize,
    pub radius: f64,
    pub look_at: [f64; 3],
    pub elevation: f64,
    pub focal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScript {
    pub name: String,
    pub seed: u64,
    pub frame_count: usize,
    pub image_size: u32,
    pub rig: CameraRig,
    pub tracks: Vec<Track>,
    /// Surface samples per static blob for the init cloud.
    pub init_samples_per_blob: usize,
    /// Surface samples per dynamic blob. Kept sparse: moving content
    /// triangulates poorly in structure-from-motion, and the resulting
    /// under-reconstruction is what densification exists to fix.
    pub init_samples_dynamic: usize,
}

/// One training/eval frame.
#[derive(Debug, Clone)]
pub struct Frame<T> {
    pub camera: Camera<T>,
    pub cam_idx: usize,
    pub frame_idx: usize,
    pub t: T,
    pub image: ImageBuf<T>,
    /// 255 where the pixel lies in a dynamic track's 3-sigma footprint.
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub script: SceneScript,
    pub frames: Vec<Frame<T>>,
    pub init_points: Vec<Vector3<T>>,
}

impl SceneScript {
    pub fn frame_time(&self, j: usize) -> f64 {
        if self.frame_count <= 1 {
            0.0
        } else {
            j as f64 / (self.frame_count - 1) as f64
        }
    }

    pub fn cameras<T: Real>(&self) -> Result<Vec<Camera<T>>> {
        if self.rig.count == 0 {
            return Err(Error::invalid("camera rig needs at least one camera"));
        }
        if self.rig.count > 1 && self.rig.radius.abs() < 1e-9 {
            return Err(Error::invalid("degenerate rig: all cameras coincide"));
        }
        let look = Vector3::new(self.rig.look_at[0], self.rig.look_at[1], self.rig.look_at[2]);
        let size = self.image_size;
        let mut cams = Vec::with_capacity(self.rig.count);
        for i in 0..self.rig.count {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / self.rig.count as f64;
            // Alternating elevation keeps the rig off a single plane.
            let elev = self.rig.elevation * if i % 2 == 0 { 1.0 } else { 0.6 };
            let eye = look
                + Vector3::new(
                    self.rig.radius * theta.cos(),
                    elev,
                    self.rig.radius * theta.sin(),
                );
            let eye_t = Vector3::new(real(eye.x), real(eye.y), real(eye.z));
            let look_t = Vector3::new(real(look.x), real(look.y), real(look.z));
            cams.push(Camera::look_at(
                eye_t,
                look_t,
                Vector3::new(T::zero(), T::one(), T::zero()),
                real(self.rig.focal),
                real(self.rig.focal),
                size,
                size,
            ));
        }
        Ok(cams)
    }
}

/// Evaluate the script at time t as a list of renderable Gaussians. This is
/// the ground-truth oracle: rendering it reproduces the targets exactly.
pub fn scripted_gaussians<T: Real>(script: &SceneScript, t: f64) -> Vec<NeuralGaussian<T>> {
    let mut out = Vec::new();
    for track in &script.tracks {
        out.extend(track_gaussians::<T>(track, t, out.len()));
    }
    out
}

fn track_gaussians<T: Real>(track: &Track, t: f64, base_idx: usize) -> Vec<NeuralGaussian<T>> {
    let center = Vector3::new(
        track.position[0].eval(t),
        track.position[1].eval(t),
        track.position[2].eval(t),
    );
    let angle = track.rot_angle.eval(t);
    let axis = Vector3::new(track.rot_axis[0], track.rot_axis[1], track.rot_axis[2]);
    let q = if angle.abs() < 1e-12 || axis.norm() < 1e-12 {
        Quaternion::<f64>::identity()
    } else {
        Quaternion::from_axis_angle(&axis, angle)
    };
    let rot = q.rotation_matrix();
    let smult = track.scale.eval(t).max(1e-4);
    let shift = [
        track.color_shift[0].eval(t),
        track.color_shift[1].eval(t),
        track.color_shift[2].eval(t),
    ];
    track
        .blobs
        .iter()
        .enumerate()
        .map(|(bi, b)| {
            let mean = center + rot * Vector3::new(b.offset[0], b.offset[1], b.offset[2]);
            NeuralGaussian {
                mean: Vector3::new(real(mean.x), real(mean.y), real(mean.z)),
                scale: Vector3::new(
                    real(b.sigma[0] * smult),
                    real(b.sigma[1] * smult),
                    real(b.sigma[2] * smult),
                ),
                rotation: {
                    let (qt, _) = normalize4(&Vector4::new(
                        real(q.w),
                        real(q.x),
                        real(q.y),
                        real(q.z),
                    ));
                    qt
                },
                opacity: real(b.opacity),
                color: Vector3::new(
                    real((b.color[0] + shift[0]).clamp(0.0, 1.0)),
                    real((b.color[1] + shift[1]).clamp(0.0, 1.0)),
                    real((b.color[2] + shift[2]).clamp(0.0, 1.0)),
                ),
                anchor: base_idx + bi,
                offset_idx: 0,
            }
        })
        .collect()
}

/// Render all frames, label dynamic pixels, and sample the init cloud.
pub fn build_dataset<T: Real>(script: &SceneScript) -> Result<Dataset<T>> {
    if script.tracks.is_empty() {
        return Err(Error::invalid("scene script has no tracks"));
    }
    if script.frame_count == 0 {
        return Err(Error::invalid("scene script has no frames"));
    }
    let cameras = script.cameras::<T>()?;
    let specs: Vec<(usize, usize)> = (0..cameras.len())
        .flat_map(|c| (0..script.frame_count).map(move |f| (c, f)))
        .collect();

    let frames: Vec<Frame<T>> = specs
        .par_iter()
        .map(|&(cam_idx, frame_idx)| {
            let t = script.frame_time(frame_idx);
            let cam = &cameras[cam_idx];
            let gaussians = scripted_gaussians::<T>(script, t);
            let out = render::render(
                &gaussians,
                cam,
                Vector3::zeros(),
                render::DEFAULT_TILE_SIZE,
            );
            let labels = dynamic_labels(script, t, cam);
            Frame {
                camera: cam.clone(),
                cam_idx,
                frame_idx,
                t: real(t),
                image: out.image,
                labels,
            }
        })
        .collect();

    Ok(Dataset {
        script: script.clone(),
        frames,
        init_points: init_points(script),
    })
}

/// Mark pixels inside the 3-sigma projected footprint of any dynamic blob.
fn dynamic_labels<T: Real>(script: &SceneScript, t: f64, cam: &Camera<T>) -> Vec<u8> {
    let mut labels = vec![0u8; (cam.width * cam.height) as usize];
    let mut dynamic_gaussians = Vec::new();
    let mut base = 0;
    for track in &script.tracks {
        if track.dynamic {
            dynamic_gaussians.extend(track_gaussians::<T>(track, t, base));
        }
        base += track.blobs.len();
    }
    let fragments = render::project_fragments(&dynamic_gaussians, cam);
    for f in &fragments {
        let r = f.radius.to_f64_lossy();
        let cx = f.mean2d.x.to_f64_lossy();
        let cy = f.mean2d.y.to_f64_lossy();
        let x0 = ((cx - r).floor().max(0.0)) as u32;
        let x1 = ((cx + r).ceil().min(cam.width as f64 - 1.0)) as u32;
        let y0 = ((cy - r).floor().max(0.0)) as u32;
        let y1 = ((cy + r).ceil().min(cam.height as f64 - 1.0)) as u32;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let px = nalgebra::Vector2::new(
                    real::<T>(x as f64 + 0.5),
                    real::<T>(y as f64 + 0.5),
                );
                let d = px - f.mean2d;
                if d.dot(&(f.inv_cov * d)) <= real(9.0) {
                    labels[(y * cam.width + x) as usize] = 255;
                }
            }
        }
    }
    labels
}

/// Blob surface samples at the first frame plus 20% uniform noise, mimicking
/// an SfM cloud triangulated at capture start. Dynamic tracks are sampled
/// only at t=0 on purpose: covering the whole motion path would hand the
/// optimizer a ready-made scaffold for time-gated opacity tricks instead of
/// making it learn the deformation.
fn init_points<T: Real>(script: &SceneScript) -> Vec<Vector3<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(script.seed ^ 0x1_71f5);
    let mut pts: Vec<Vector3<f64>> = Vec::new();
    for track in &script.tracks {
        let samples = if track.dynamic {
            script.init_samples_dynamic
        } else {
            script.init_samples_per_blob
        };
        for g in track_gaussians::<f64>(track, 0.0, 0) {
            for _ in 0..samples {
                let n: Vector3<f64> = Vector3::new(
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                );
                pts.push(g.mean + n.component_mul(&g.scale));
            }
        }
    }
    // Noise points over the occupied bounding box, 20% of the surface count.
    let (mut lo, mut hi) = (Vector3::repeat(f64::MAX), Vector3::repeat(f64::MIN));
    for p in &pts {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let n_noise = pts.len() / 5;
    for _ in 0..n_noise {
        pts.push(Vector3::new(
            rng.gen_range(lo.x..=hi.x),
            rng.gen_range(lo.y..=hi.y),
            rng.gen_range(lo.z..=hi.z),
        ));
    }
    pts.into_iter()
        .map(|p| Vector3::new(real(p.x), real(p.y), real(p.z)))
        .collect()
}

/// Voxel cells within 1.5 sigma of the blobs of the given kind, unioned
/// over all frame times: the cells that actually hold content, not the
/// faint splat halo. Used to score anchor allocation per region.
pub fn region_cells(
    script: &SceneScript,
    voxel_size: f64,
    dynamic: bool,
) -> HashSet<(i64, i64, i64)> {
    let mut cells = HashSet::new();
    for j in 0..script.frame_count {
        let t = script.frame_time(j);
        for track in script.tracks.iter().filter(|tr| tr.dynamic == dynamic) {
            for g in track_gaussians::<f64>(track, t, 0) {
                let r = 1.5 * g.scale.max();
                let lo = g.mean - Vector3::repeat(r);
                let hi = g.mean + Vector3::repeat(r);
                let c0 = voxel_cell(&lo, voxel_size);
                let c1 = voxel_cell(&hi, voxel_size);
                for cx in c0.0..=c1.0 {
                    for cy in c0.1..=c1.1 {
                        for cz in c0.2..=c1.2 {
                            let center = Vector3::new(
                                (cx as f64 + 0.5) * voxel_size,
                                (cy as f64 + 0.5) * voxel_size,
                                (cz as f64 + 0.5) * voxel_size,
                            );
                            if (center - g.mean).norm() <= r {
                                cells.insert((cx, cy, cz));
                            }
                        }
                    }
                }
            }
        }
    }
    cells
}

impl<T: Real> Dataset<T> {
    /// Frame indices excluding the held-out cameras.
    pub fn train_frames(&self, holdout_cams: &[usize]) -> Vec<usize> {
        (0..self.frames.len())
            .filter(|&i| !holdout_cams.contains(&self.frames[i].cam_idx))
            .collect()
    }

    pub fn holdout_frames(&self, holdout_cams: &[usize]) -> Vec<usize> {
        (0..self.frames.len())
            .filter(|&i| holdout_cams.contains(&self.frames[i].cam_idx))
            .collect()
    }

    /// Write the on-disk layout: scene.json, frames/cam{i}_t{j}.ppm,
    /// labels/cam{i}_t{j}.pgm, init_points.bin (u32 count + f32 triples).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("frames"))?;
        std::fs::create_dir_all(dir.join("labels"))?;
        let json = serde_json::to_string_pretty(&self.script)?;
        std::fs::write(dir.join("scene.json"), json)?;
        for f in &self.frames {
            f.image.write_ppm(&dir.join(format!("frames/cam{}_t{}.ppm", f.cam_idx, f.frame_idx)))?;
            render::write_pgm(
                &dir.join(format!("labels/cam{}_t{}.pgm", f.cam_idx, f.frame_idx)),
                f.image.width,
                f.image.height,
                &f.labels,
            )?;
        }
        let mut bin = std::fs::File::create(dir.join("init_points.bin"))?;
        bin.write_all(&(self.init_points.len() as u32).to_le_bytes())?;
        for p in &self.init_points {
            for a in 0..3 {
                bin.write_all(&(p[a].to_f64_lossy() as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Load a saved dataset. Frame images come back 8-bit quantized.
    pub fn load(dir: &Path) -> Result<Dataset<T>> {
        let json = std::fs::read_to_string(dir.join("scene.json"))?;
        let script: SceneScript = serde_json::from_str(&json)?;
        let cameras = script.cameras::<T>()?;
        let mut frames = Vec::new();
        for cam_idx in 0..cameras.len() {
            for frame_idx in 0..script.frame_count {
                let image = ImageBuf::read_ppm(
                    &dir.join(format!("frames/cam{cam_idx}_t{frame_idx}.ppm")),
                )?;
                let (lw, lh, labels) =
                    render::read_pgm(&dir.join(format!("labels/cam{cam_idx}_t{frame_idx}.pgm")))?;
                if lw != image.width || lh != image.height {
                    return Err(Error::invalid("label/image size mismatch"));
                }
                frames.push(Frame {
                    camera: cameras[cam_idx].clone(),
                    cam_idx,
                    frame_idx,
                    t: real(script.frame_time(frame_idx)),
                    image,
                    labels,
                });
            }
        }
        let mut bin = std::fs::File::open(dir.join("init_points.bin"))?;
        let mut buf4 = [0u8; 4];
        bin.read_exact(&mut buf4)?;
        let count = u32::from_le_bytes(buf4) as usize;
        let mut init_points = Vec::with_capacity(count);
        for _ in 0..count {
            let mut p = Vector3::zeros();
            for a in 0..3 {
                bin.read_exact(&mut buf4)?;
                p[a] = real(f32::from_le_bytes(buf4) as f64);
            }
            init_points.push(p);
        }
        Ok(Dataset {
            script,
            frames,
            init_points,
        })
    }
}

fn default_rig() -> CameraRig {
    CameraRig {
        count: 4,
        radius: 2.4,
        look_at: [0.0, 0.0, 0.0],
        elevation: 0.5,
        focal: 110.0,
    }
}

fn blob(offset: [f64; 3], sigma: f64, color: [f64; 3]) -> Blob {
    Blob {
        offset,
        sigma: [sigma, sigma, sigma],
        color,
        opacity: 0.92,
    }
}

/// The fixed catalog of desk-scale scenes: 4 cameras, 20 frames, 64x64.
pub fn standard_scenes() -> Vec<SceneScript> {
    let base = |name: &str, seed: u64, tracks: Vec<Track>| SceneScript {
        name: name.into(),
        seed,
        frame_count: 20,
        image_size: 64,
        rig: default_rig(),
        tracks,
        init_samples_per_blob: 10,
        init_samples_dynamic: 6,
    };

    let static_pair = |x: f64| {
        Track::cluster(
            "static-pair",
            false,
            vec![
                blob([0.0, 0.0, 0.0], 0.075, [0.85, 0.55, 0.15]),
                blob([0.12, 0.1, -0.05], 0.06, [0.2, 0.45, 0.85]),
            ],
            [x, -0.05, 0.05],
        )
    };

    // A rigid multi-color pattern: hard to fake with opacity cross-fades or
    // offset-scale sliding, easy to fit with genuine rigid translation.
    let textured_mover = || {
        Track::cluster(
            "mover",
            true,
            vec![
                blob([0.0, 0.0, 0.0], 0.05, [0.95, 0.95, 0.9]),
                blob([0.085, 0.085, 0.0], 0.045, [0.9, 0.12, 0.1]),
                blob([-0.085, 0.085, 0.0], 0.045, [0.15, 0.8, 0.2]),
                blob([-0.085, -0.085, 0.0], 0.045, [0.2, 0.3, 0.95]),
                blob([0.085, -0.085, 0.0], 0.045, [0.95, 0.85, 0.1]),
            ],
            [0.0, 0.18, 0.0],
        )
    };

    let mut scenes = Vec::new();

    // One linearly moving textured cluster, one static cluster.
    {
        let mut mover = textured_mover();
        mover.position[0] = Curve::Linear { from: -0.3, to: 0.3 };
        mover.position[2] = Curve::Linear { from: 0.08, to: -0.08 };
        scenes.push(base("translate", 101, vec![mover, static_pair(-0.28)]));
    }

    // A bar rotating about the vertical axis.
    {
        let mut bar = Track::cluster(
            "bar",
            true,
            vec![
                blob([-0.16, 0.0, 0.0], 0.06, [0.85, 0.25, 0.75]),
                blob([0.0, 0.0, 0.0], 0.07, [0.3, 0.85, 0.4]),
                blob([0.16, 0.0, 0.0], 0.06, [0.25, 0.55, 0.95]),
            ],
            [0.05, 0.2, 0.0],
        );
        bar.rot_angle = Curve::Linear {
            from: 0.0,
            to: 2.0 * std::f64::consts::PI / 3.0,
        };
        scenes.push(base("rotate", 102, vec![bar, static_pair(-0.3)]));
    }

    // Static geometry, strongly time-varying color (temporal-injection assay).
    {
        let mut pulse = Track::cluster(
            "pulse",
            true,
            vec![
                blob([0.0, 0.0, 0.0], 0.09, [0.5, 0.2, 0.3]),
                blob([0.1, 0.08, -0.02], 0.06, [0.3, 0.5, 0.2]),
            ],
            [0.12, 0.15, 0.05],
        );
        pulse.color_shift[0] = Curve::Sine {
            center: 0.0,
            amp: 0.4,
            cycles: 1.0,
            phase: 0.0,
        };
        pulse.color_shift[1] = Curve::Sine {
            center: 0.0,
            amp: 0.4,
            cycles: 1.0,
            phase: std::f64::consts::PI,
        };
        scenes.push(base("pulse-color", 103, vec![pulse, static_pair(-0.3)]));
    }

    // Breathing scale.
    {
        let mut breather = Track::cluster(
            "breather",
            true,
            vec![blob([0.0, 0.0, 0.0], 0.085, [0.2, 0.75, 0.8])],
            [0.1, 0.12, -0.05],
        );
        breather.scale = Curve::Sine {
            center: 1.0,
            amp: 0.45,
            cycles: 1.0,
            phase: 0.0,
        };
        scenes.push(base("pulse-scale", 104, vec![breather, static_pair(-0.3)]));
    }

    // Three dynamic tracks with staggered transient bursts (still, quick
    // glide, still) over static clutter. Transient motion is the regime
    // where window-averaged gradients dilute and deformation weighting
    // matters.
    {
        let mut mover = Track::cluster(
            "darter",
            true,
            vec![
                blob([0.0, 0.0, 0.0], 0.055, [0.9, 0.2, 0.15]),
                blob([0.09, 0.0, 0.05], 0.05, [0.95, 0.9, 0.15]),
                blob([-0.05, 0.08, -0.04], 0.05, [0.2, 0.4, 0.9]),
            ],
            [0.0, 0.08, 0.0],
        );
        mover.position[0] = Curve::Pulse {
            base: -0.06,
            peak: 0.12,
            start: 0.1,
            end: 0.4,
        };
        mover.position[2] = Curve::Pulse {
            base: 0.04,
            peak: -0.08,
            start: 0.1,
            end: 0.4,
        };
        let mut swirler = Track::cluster(
            "swirler",
            true,
            vec![
                blob([-0.11, 0.0, 0.0], 0.055, [0.9, 0.75, 0.2]),
                blob([0.11, 0.0, 0.0], 0.055, [0.6, 0.3, 0.9]),
            ],
            [0.3, -0.08, 0.22],
        );
        swirler.rot_angle = Curve::Pulse {
            base: 0.0,
            peak: std::f64::consts::PI * 0.75,
            start: 0.35,
            end: 0.65,
        };
        let mut bobber = Track::cluster(
            "bobber",
            true,
            vec![
                blob([0.0, 0.0, 0.0], 0.06, [0.25, 0.85, 0.5]),
                blob([0.07, 0.06, 0.0], 0.05, [0.9, 0.5, 0.8]),
            ],
            [-0.32, -0.06, -0.2],
        );
        bobber.position[1] = Curve::Pulse {
            base: 0.0,
            peak: 0.16,
            start: 0.6,
            end: 0.9,
        };
        let clutter = Track::cluster(
            "clutter",
            false,
            vec![
                blob([0.0, 0.0, 0.0], 0.07, [0.8, 0.5, 0.2]),
                blob([0.55, -0.12, 0.35], 0.06, [0.35, 0.6, 0.85]),
                blob([-0.5, -0.1, 0.3], 0.065, [0.7, 0.7, 0.65]),
                blob([0.4, -0.15, -0.45], 0.055, [0.5, 0.8, 0.35]),
                blob([-0.45, 0.3, -0.35], 0.05, [0.85, 0.4, 0.6]),
            ],
            [0.0, -0.22, 0.0],
        );
        scenes.push(base(
            "mixed",
            105,
            vec![mover, swirler, bobber, clutter],
        ));
    }

    scenes
}

/// Look up a standard scene by name.
pub fn standard_scene(name: &str) -> Result<SceneScript> {
    standard_scenes()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| {
            let names: Vec<String> = standard_scenes().iter().map(|s| s.name.clone()).collect();
            Error::invalid(format!(
                "unknown scene '{name}'; available: {}",
                names.join(", ")
            ))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::psnr;

    #[test]
    fn catalog_is_deterministic_and_valid() {
        let a = standard_scenes();
        let b = standard_scenes();
        assert_eq!(a.len(), 5);
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa, sb);
        }
        for script in &a {
            let ds = build_dataset::<f32>(&script).unwrap();
            assert_eq!(ds.frames.len(), 4 * 20);
            assert!(!ds.init_points.is_empty());
        }
    }

    #[test]
    fn mixed_has_three_dynamic_tracks() {
        let mixed = standard_scene("mixed").unwrap();
        assert!(mixed.tracks.iter().filter(|t| t.dynamic).count() >= 3);
        // And every standard scene pairs dynamic with static content.
        for s in standard_scenes() {
            assert!(s.tracks.iter().any(|t| t.dynamic));
            assert!(s.tracks.iter().any(|t| !t.dynamic));
        }
    }

    #[test]
    fn static_script_frames_identical_across_time() {
        let mut script = standard_scene("translate").unwrap();
        // Freeze the mover: all curves constant.
        for track in &mut script.tracks {
            track.position = [
                Curve::constant(0.2),
                Curve::constant(0.1),
                Curve::constant(0.0),
            ];
            track.dynamic = false;
            track.rot_angle = Curve::constant(0.0);
            track.scale = Curve::constant(1.0);
        }
        script.frame_count = 4;
        let ds = build_dataset::<f64>(&script).unwrap();
        let cam0: Vec<&Frame<f64>> = ds.frames.iter().filter(|f| f.cam_idx == 0).collect();
        for f in &cam0[1..] {
            assert_eq!(f.image.data, cam0[0].image.data);
        }
    }

    #[test]
    fn oracle_reaches_psnr_cap() {
        let script = standard_scene("translate").unwrap();
        let ds = build_dataset::<f32>(&script).unwrap();
        for f in ds.frames.iter().step_by(13) {
            let gaussians = scripted_gaussians::<f32>(&script, f.t as f64);
            let out = render::render(
                &gaussians,
                &f.camera,
                Vector3::zeros(),
                render::DEFAULT_TILE_SIZE,
            );
            assert_eq!(psnr(&out.image, &f.image), 100.0);
        }
    }

    #[test]
    fn translating_blob_center_matches_analytic_projection() {
        let script = standard_scene("translate").unwrap();
        let ds = build_dataset::<f64>(&script).unwrap();
        // Frame 0, camera 0: the mover center projects via the pinhole model.
        let f = &ds.frames[0];
        let mover = &script.tracks[0];
        let center = Vector3::new(
            mover.position[0].eval(0.0),
            mover.position[1].eval(0.0),
            mover.position[2].eval(0.0),
        );
        let pc = f.camera.world_to_camera(&center);
        let px = f.camera.project_cam(&pc);
        // The brightest red pixel should be near the projection.
        let mut best = (0u32, 0u32, -1.0);
        for y in 0..f.image.height {
            for x in 0..f.image.width {
                let v = f.image.pixel(x, y).x - f.image.pixel(x, y).y;
                if v > best.2 {
                    best = (x, y, v);
                }
            }
        }
        let dist = ((best.0 as f64 + 0.5 - px.x).powi(2)
            + (best.1 as f64 + 0.5 - px.y).powi(2))
        .sqrt();
        assert!(dist <= 4.0, "projected {px:?}, brightest {best:?}");
    }

    #[test]
    fn dynamic_pixel_fraction_in_band() {
        for script in standard_scenes() {
            let ds = build_dataset::<f32>(&script).unwrap();
            let total: usize = ds.frames.iter().map(|f| f.labels.len()).sum();
            let dynamic: usize = ds
                .frames
                .iter()
                .map(|f| f.labels.iter().filter(|&&v| v > 0).count())
                .sum();
            let frac = dynamic as f64 / total as f64;
            assert!(
                (0.05..=0.40).contains(&frac),
                "{}: dynamic fraction {frac:.3}",
                script.name
            );
        }
    }

    #[test]
    fn degenerate_rig_rejected() {
        let mut script = standard_scene("translate").unwrap();
        script.rig.radius = 0.0;
        assert!(build_dataset::<f32>(&script).is_err());
        script.rig.radius = 2.0;
        script.rig.count = 0;
        assert!(build_dataset::<f32>(&script).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let mut script = standard_scene("translate").unwrap();
        script.frame_count = 3;
        script.image_size = 32;
        let ds = build_dataset::<f32>(&script).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let loaded = Dataset::<f32>::load(dir.path()).unwrap();
        assert_eq!(loaded.script, ds.script);
        assert_eq!(loaded.frames.len(), ds.frames.len());
        assert_eq!(loaded.init_points.len(), ds.init_points.len());
        // Images round-trip through 8-bit quantization.
        for (a, b) in ds.frames.iter().zip(&loaded.frames) {
            assert_eq!(a.labels, b.labels);
            for (pa, pb) in a.image.data.iter().zip(&b.image.data) {
                for c in 0..3 {
                    assert!((pa[c] - pb[c]).abs() <= 0.5 / 255.0 + 1e-6);
                }
            }
        }
    }

    #[test]
    fn region_cells_disjoint_enough() {
        let script = standard_scene("mixed").unwrap();
        let dynamic = region_cells(&script, 0.1, true);
        let stat = region_cells(&script, 0.1, false);
        assert!(!dynamic.is_empty());
        assert!(!stat.is_empty());
        let overlap = dynamic.intersection(&stat).count();
        assert!(
            (overlap as f64) < 0.25 * dynamic.len().min(stat.len()) as f64,
            "regions overlap too much: {overlap}"
        );
    }

    #[test]
    fn holdout_split() {
        let mut script = standard_scene("translate").unwrap();
        script.frame_count = 2;
        let ds = build_dataset::<f32>(&script).unwrap();
        let train = ds.train_frames(&[3]);
        let held = ds.holdout_frames(&[3]);
        assert_eq!(train.len(), 6);
        assert_eq!(held.len(), 2);
        assert!(held.iter().all(|&i| ds.frames[i].cam_idx == 3));
    }
}
