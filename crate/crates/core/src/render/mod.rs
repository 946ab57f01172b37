//! Reference differentiable splatting: project, sort, tile, blend front to
//! back, and run the exact reverse pass to every Gaussian attribute —
//! including the 2D positional gradient consumed by densification.

mod image;

pub use image::{read_pgm, write_pgm, ImageBuf};

use nalgebra::{Matrix2, Vector2, Vector3, Vector4};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gen::NeuralGaussian;
use crate::math::{
    covariance_backward, covariance_from_scale_rotation, invert_sym2, jacobian_partials,
    perspective_jacobian, project_covariance, Camera, NEAR_PLANE,
};
use crate::scalar::{real, Real};

/// Blending stops once transmittance falls below this.
pub const TRANSMITTANCE_EPS: f64 = 1e-4;

/// Effective alpha is clipped here to keep the blend differentiable.
pub const ALPHA_CLAMP: f64 = 0.999;

/// Fragments contribute within their 3-sigma ellipse.
const SIGMA_CUTOFF_SQ: f64 = 9.0;

pub const DEFAULT_TILE_SIZE: u32 = 16;

/// A Gaussian projected into one view.
#[derive(Debug, Clone)]
pub struct SplatFragment<T> {
    pub mean2d: Vector2<T>,
    pub cov2d: Matrix2<T>,
    pub inv_cov: Matrix2<T>,
    pub depth: T,
    pub opacity: T,
    pub color: Vector3<T>,
    /// Index into the source Gaussian list.
    pub gaussian: usize,
    /// 3-sigma bounding radius in pixels.
    pub radius: T,
}

/// Forward products kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct RenderCache<T> {
    pub fragments: Vec<SplatFragment<T>>,
    /// Fragment indices sorted front-to-back (ties by source index).
    pub order: Vec<u32>,
    /// Per-tile fragment indices, already in blend order.
    pub tiles: Vec<Vec<u32>>,
    pub tile_size: u32,
    pub width: u32,
    pub height: u32,
    pub background: Vector3<T>,
    source_len: usize,
}

#[derive(Debug, Clone)]
pub struct RenderOutput<T> {
    pub image: ImageBuf<T>,
    pub cache: RenderCache<T>,
}

/// Per-Gaussian gradients out of the rasterizer.
#[derive(Debug, Clone, Copy)]
pub struct GaussianGrad<T> {
    pub d_mean: Vector3<T>,
    pub d_scale: Vector3<T>,
    /// W.r.t. unit quaternion components (w, x, y, z).
    pub d_rotation: Vector4<T>,
    pub d_opacity: T,
    pub d_color: Vector3<T>,
    /// Total screen-space mean gradient (pixel units); its norm drives
    /// densification.
    pub d_mean2d: Vector2<T>,
}

impl<T: Real> GaussianGrad<T> {
    fn zero() -> Self {
        GaussianGrad {
            d_mean: Vector3::zeros(),
            d_scale: Vector3::zeros(),
            d_rotation: Vector4::zeros(),
            d_opacity: T::zero(),
            d_color: Vector3::zeros(),
            d_mean2d: Vector2::zeros(),
        }
    }
}

/// Project Gaussians into screen-space fragments, dropping those behind the
/// near plane.
pub fn project_fragments<T: Real>(
    gaussians: &[NeuralGaussian<T>],
    cam: &Camera<T>,
) -> Vec<SplatFragment<T>> {
    let near = real::<T>(NEAR_PLANE);
    let mut fragments = Vec::with_capacity(gaussians.len());
    for (i, g) in gaussians.iter().enumerate() {
        let p_cam = cam.world_to_camera(&g.mean);
        if p_cam.z <= near {
            continue;
        }
        let cov3 = covariance_from_scale_rotation(&g.scale, &g.rotation)
            .expect("generated scales are positive");
        let cov2 = project_covariance(&cov3, &g.mean, cam).expect("depth already checked");
        let inv_cov = invert_sym2(&cov2).expect("floored covariance is invertible");
        let mean2d = cam.project_cam(&p_cam);
        // Largest eigenvalue bounds the 3-sigma extent.
        let half_trace = (cov2[(0, 0)] + cov2[(1, 1)]) * real(0.5);
        let det = cov2[(0, 0)] * cov2[(1, 1)] - cov2[(0, 1)] * cov2[(1, 0)];
        let lam_max = half_trace + (half_trace * half_trace - det).max(T::zero()).sqrt();
        fragments.push(SplatFragment {
            mean2d,
            cov2d: cov2,
            inv_cov,
            depth: p_cam.z,
            opacity: g.opacity,
            color: g.color,
            gaussian: i,
            radius: real::<T>(3.0) * lam_max.sqrt(),
        });
    }
    fragments
}

/// Front-to-back order: by depth, ties broken by source index.
pub fn sort_fragments<T: Real>(fragments: &[SplatFragment<T>]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..fragments.len() as u32).collect();
    order.sort_by(|&a, &b| {
        let fa = &fragments[a as usize];
        let fb = &fragments[b as usize];
        fa.depth
            .partial_cmp(&fb.depth)
            .unwrap()
            .then(fa.gaussian.cmp(&fb.gaussian))
    });
    order
}

/// Assign each fragment to every tile its 3-sigma bounding box touches.
/// `order` must be blend-sorted; per-tile lists inherit that order.
pub fn tile_partition<T: Real>(
    fragments: &[SplatFragment<T>],
    order: &[u32],
    tile_size: u32,
    width: u32,
    height: u32,
) -> Vec<Vec<u32>> {
    assert!(tile_size >= 1);
    let tiles_x = width.div_ceil(tile_size) as i64;
    let tiles_y = height.div_ceil(tile_size) as i64;
    let mut tiles = vec![Vec::new(); (tiles_x * tiles_y) as usize];
    for &fi in order {
        let f = &fragments[fi as usize];
        let r = f.radius.to_f64_lossy();
        let cx = f.mean2d.x.to_f64_lossy();
        let cy = f.mean2d.y.to_f64_lossy();
        let ts = tile_size as f64;
        let tx0 = (((cx - r) / ts).floor() as i64).clamp(0, tiles_x - 1);
        let tx1 = (((cx + r) / ts).floor() as i64).clamp(0, tiles_x - 1);
        let ty0 = (((cy - r) / ts).floor() as i64).clamp(0, tiles_y - 1);
        let ty1 = (((cy + r) / ts).floor() as i64).clamp(0, tiles_y - 1);
        // Entirely off-screen boxes still clamp into edge tiles; reject them.
        if cx + r < 0.0 || cx - r > width as f64 || cy + r < 0.0 || cy - r > height as f64 {
            continue;
        }
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tiles[(ty * tiles_x + tx) as usize].push(fi);
            }
        }
    }
    tiles
}

/// One blend step at a pixel; shared verbatim by forward and backward so the
/// two passes walk identical contribution sequences.
#[inline]
fn fragment_alpha<T: Real>(f: &SplatFragment<T>, px: &Vector2<T>) -> Option<(T, T)> {
    let d = px - f.mean2d;
    let e = d.dot(&(f.inv_cov * d));
    if e > real(SIGMA_CUTOFF_SQ) {
        return None;
    }
    let g = (-e * real::<T>(0.5)).exp();
    let alpha = (f.opacity * g).min(real(ALPHA_CLAMP));
    Some((alpha, g))
}

/// Render fragments already projected and partitioned. Empty input yields
/// the background image.
pub fn render_prepared<T: Real>(cache: &RenderCache<T>) -> ImageBuf<T> {
    let mut image = ImageBuf::filled(cache.width, cache.height, cache.background);
    let tiles_x = cache.width.div_ceil(cache.tile_size);
    let ts = cache.tile_size;

    // Tiles own disjoint pixel ranges, so parallel rendering is exact.
    let tile_results: Vec<(usize, Vec<Vector3<T>>)> = cache
        .tiles
        .par_iter()
        .enumerate()
        .map(|(tile_idx, frag_ids)| {
            let tx = (tile_idx as u32 % tiles_x) * ts;
            let ty = (tile_idx as u32 / tiles_x) * ts;
            let w = ts.min(cache.width - tx);
            let h = ts.min(cache.height - ty);
            let mut out = vec![cache.background; (w * h) as usize];
            for py in 0..h {
                for px in 0..w {
                    let pixel = Vector2::new(
                        real::<T>((tx + px) as f64 + 0.5),
                        real::<T>((ty + py) as f64 + 0.5),
                    );
                    let mut color = Vector3::zeros();
                    let mut transmittance = T::one();
                    for &fi in frag_ids {
                        let f = &cache.fragments[fi as usize];
                        let Some((alpha, _)) = fragment_alpha(f, &pixel) else {
                            continue;
                        };
                        color += f.color * (alpha * transmittance);
                        transmittance *= T::one() - alpha;
                        if transmittance < real(TRANSMITTANCE_EPS) {
                            break;
                        }
                    }
                    out[(py * w + px) as usize] = color + cache.background * transmittance;
                }
            }
            (tile_idx, out)
        })
        .collect();

    for (tile_idx, pixels) in tile_results {
        let tx = (tile_idx as u32 % tiles_x) * ts;
        let ty = (tile_idx as u32 / tiles_x) * ts;
        let w = ts.min(cache.width - tx);
        let h = ts.min(cache.height - ty);
        for py in 0..h {
            for px in 0..w {
                *image.pixel_mut(tx + px, ty + py) = pixels[(py * w + px) as usize];
            }
        }
    }
    image
}

/// Full forward pass: project, sort, tile, blend.
pub fn render<T: Real>(
    gaussians: &[NeuralGaussian<T>],
    cam: &Camera<T>,
    background: Vector3<T>,
    tile_size: u32,
) -> RenderOutput<T> {
    let fragments = project_fragments(gaussians, cam);
    let order = sort_fragments(&fragments);
    let tiles = tile_partition(&fragments, &order, tile_size, cam.width, cam.height);
    let cache = RenderCache {
        fragments,
        order,
        tiles,
        tile_size,
        width: cam.width,
        height: cam.height,
        background,
        source_len: gaussians.len(),
    };
    let image = render_prepared(&cache);
    RenderOutput { image, cache }
}

/// Untiled reference path: one tile covering the image. Used to pin the
/// semantics of the tiled renderer.
pub fn render_untiled<T: Real>(
    gaussians: &[NeuralGaussian<T>],
    cam: &Camera<T>,
    background: Vector3<T>,
) -> RenderOutput<T> {
    render(gaussians, cam, background, cam.width.max(cam.height))
}

// Per-fragment accumulators from the pixel loop of the backward pass.
#[derive(Clone, Copy)]
struct FragAccum<T> {
    d_mean2d: Vector2<T>,
    d_inv_cov: Matrix2<T>,
    d_opacity: T,
    d_color: Vector3<T>,
}

impl<T: Real> FragAccum<T> {
    fn zero() -> Self {
        FragAccum {
            d_mean2d: Vector2::zeros(),
            d_inv_cov: Matrix2::zeros(),
            d_opacity: T::zero(),
            d_color: Vector3::zeros(),
        }
    }
}

/// Exact gradients of the rendered image w.r.t. every Gaussian attribute.
///
/// `d_image` is dL/d(pixel color). Results are identical to a serial
/// evaluation: tiles accumulate privately and merge in tile order.
pub fn render_backward<T: Real>(
    cache: &RenderCache<T>,
    d_image: &ImageBuf<T>,
    gaussians: &[NeuralGaussian<T>],
    cam: &Camera<T>,
) -> Result<Vec<GaussianGrad<T>>> {
    if cache.source_len != gaussians.len()
        || d_image.width != cache.width
        || d_image.height != cache.height
    {
        return Err(Error::invalid(
            "render cache does not match the gaussians/image it is differentiated against",
        ));
    }
    let tiles_x = cache.width.div_ceil(cache.tile_size);
    let ts = cache.tile_size;

    // Pixel-loop gradients, tile-parallel with private per-fragment slots.
    let tile_accums: Vec<Vec<FragAccum<T>>> = cache
        .tiles
        .par_iter()
        .enumerate()
        .map(|(tile_idx, frag_ids)| {
            let mut acc = vec![FragAccum::zero(); frag_ids.len()];
            if frag_ids.is_empty() {
                return acc;
            }
            let tx = (tile_idx as u32 % tiles_x) * ts;
            let ty = (tile_idx as u32 / tiles_x) * ts;
            let w = ts.min(cache.width - tx);
            let h = ts.min(cache.height - ty);
            // (slot, alpha, g, transmittance-before) per contribution.
            let mut walk: Vec<(usize, T, T, T)> = Vec::with_capacity(frag_ids.len());
            for py in 0..h {
                for px in 0..w {
                    let pixel = Vector2::new(
                        real::<T>((tx + px) as f64 + 0.5),
                        real::<T>((ty + py) as f64 + 0.5),
                    );
                    let g_pix = *d_image.pixel(tx + px, ty + py);
                    if g_pix == Vector3::zeros() {
                        continue;
                    }
                    walk.clear();
                    let mut transmittance = T::one();
                    for (slot, &fi) in frag_ids.iter().enumerate() {
                        let f = &cache.fragments[fi as usize];
                        let Some((alpha, gval)) = fragment_alpha(f, &pixel) else {
                            continue;
                        };
                        walk.push((slot, alpha, gval, transmittance));
                        transmittance *= T::one() - alpha;
                        if transmittance < real(TRANSMITTANCE_EPS) {
                            break;
                        }
                    }
                    // Reverse sweep with the background folded into the
                    // suffix term.
                    let mut suffix = cache.background * transmittance;
                    for &(slot, alpha, gval, t_before) in walk.iter().rev() {
                        let f = &cache.fragments[frag_ids[slot] as usize];
                        let a = &mut acc[slot];
                        a.d_color += g_pix * (alpha * t_before);
                        // dC/dalpha = c * T_before - suffix / (1 - alpha).
                        let d_alpha_vec = f.color * t_before - suffix / (T::one() - alpha);
                        let d_alpha = g_pix.dot(&d_alpha_vec);
                        suffix += f.color * (alpha * t_before);
                        // alpha = min(opacity * g, clamp): zero grad when clamped.
                        if f.opacity * gval >= real(ALPHA_CLAMP) {
                            continue;
                        }
                        a.d_opacity += d_alpha * gval;
                        let d_g = d_alpha * f.opacity;
                        // g = exp(-e/2), e = d' A d.
                        let d_e = -d_g * gval * real(0.5);
                        let d = pixel - f.mean2d;
                        let ad = f.inv_cov * d;
                        a.d_mean2d += ad * (-real::<T>(2.0) * d_e);
                        a.d_inv_cov += d * d.transpose() * d_e;
                    }
                }
            }
            acc
        })
        .collect();

    // Merge per-tile slots into per-gaussian accumulators, in tile order.
    let mut merged: Vec<FragAccum<T>> = vec![FragAccum::zero(); cache.fragments.len()];
    for (tile_idx, frag_ids) in cache.tiles.iter().enumerate() {
        for (slot, &fi) in frag_ids.iter().enumerate() {
            let src = &tile_accums[tile_idx][slot];
            let dst = &mut merged[fi as usize];
            dst.d_mean2d += src.d_mean2d;
            dst.d_inv_cov += src.d_inv_cov;
            dst.d_opacity += src.d_opacity;
            dst.d_color += src.d_color;
        }
    }

    // Per-fragment chain back to world-space attributes; fragment order is
    // fixed, so parallelism cannot reorder any accumulation.
    let mut grads = vec![GaussianGrad::zero(); gaussians.len()];
    let frag_grads: Vec<(usize, GaussianGrad<T>)> = cache
        .fragments
        .par_iter()
        .zip(merged.par_iter())
        .map(|(f, acc)| {
            let g = &gaussians[f.gaussian];
            let mut out = GaussianGrad::zero();
            out.d_opacity = acc.d_opacity;
            out.d_color = acc.d_color;
            out.d_mean2d = acc.d_mean2d;

            // dL/dSigma' = -A (dL/dA) A for symmetric A = Sigma'^{-1}.
            let d_cov2 = -(f.inv_cov * acc.d_inv_cov * f.inv_cov);

            let p_cam = cam.world_to_camera(&g.mean);
            let j = perspective_jacobian(&p_cam, cam.fx, cam.fy);
            let cov3 = covariance_from_scale_rotation(&g.scale, &g.rotation)
                .expect("generated scales are positive");
            let m = cam.rotation * cov3 * cam.rotation.transpose();

            // Sigma' = J M J' + floor.
            let d_m = j.transpose() * d_cov2 * j;
            let d_cov3 = cam.rotation.transpose() * d_m * cam.rotation;
            let d_j = (d_cov2 + d_cov2.transpose()) * j * m;

            // Mean gradient: projection path plus the Jacobian's own
            // dependence on the camera-space point.
            let mut d_p_cam = j.transpose() * acc.d_mean2d;
            let j_parts = jacobian_partials(&p_cam, cam.fx, cam.fy);
            for a in 0..3 {
                d_p_cam[a] += d_j.component_mul(&j_parts[a]).sum();
            }
            out.d_mean = cam.rotation.transpose() * d_p_cam;

            let (d_scale, d_rot) = covariance_backward(&d_cov3, &g.scale, &g.rotation);
            out.d_scale = d_scale;
            out.d_rotation = d_rot;
            (f.gaussian, out)
        })
        .collect();
    for (gi, fg) in frag_grads {
        let dst = &mut grads[gi];
        dst.d_mean += fg.d_mean;
        dst.d_scale += fg.d_scale;
        dst.d_rotation += fg.d_rotation;
        dst.d_opacity += fg.d_opacity;
        dst.d_color += fg.d_color;
        dst.d_mean2d += fg.d_mean2d;
    }
    Ok(grads)
}
