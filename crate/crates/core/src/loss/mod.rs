//! Training objective and evaluation metrics: L1, SSIM (loss and metric),
//! grid total-variation, volume regularization, PSNR. Every term returns its
//! analytic gradient alongside the value.

use nalgebra::Vector3;

use crate::field::PlaneGrid;
use crate::gen::NeuralGaussian;
use crate::render::{GaussianGrad, ImageBuf};
use crate::scalar::{real, Real};

/// Weighting of the loss terms; L1 always enters with weight 1.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub ssim: f64,
    pub tv: f64,
    pub vol: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ssim: 0.2,
            tv: 0.01,
            vol: 0.01,
        }
    }
}

/// Individual term values of one training step.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub l1: f64,
    pub ssim: f64,
    pub tv: f64,
    pub vol: f64,
}

impl LossTerms {
    /// L = L1 + w_ssim * L_ssim + w_tv * L_tv + w_vol * L_vol.
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.l1 + w.ssim * self.ssim + w.tv * self.tv + w.vol * self.vol
    }
}

/// Mean absolute error and its gradient w.r.t. the rendered image.
pub fn l1_loss<T: Real>(rendered: &ImageBuf<T>, target: &ImageBuf<T>) -> (T, ImageBuf<T>) {
    assert!(rendered.same_shape(target), "image dimensions must match");
    let count = real::<T>((rendered.data.len() * 3) as f64);
    let mut grad = ImageBuf::zeros(rendered.width, rendered.height);
    let mut sum = T::zero();
    for (i, (r, t)) in rendered.data.iter().zip(&target.data).enumerate() {
        let mut g = Vector3::zeros();
        for c in 0..3 {
            let d = r[c] - t[c];
            sum += d.abs();
            g[c] = if d > T::zero() {
                T::one()
            } else if d < T::zero() {
                -T::one()
            } else {
                T::zero()
            } / count;
        }
        grad.data[i] = g;
    }
    (sum / count, grad)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel<T: Real>() -> [T; SSIM_WINDOW] {
    let mut k = [T::zero(); SSIM_WINDOW];
    let mut sum = 0.0;
    let mut raw = [0.0f64; SSIM_WINDOW];
    for (i, r) in raw.iter_mut().enumerate() {
        let d = i as f64 - (SSIM_WINDOW as f64 - 1.0) / 2.0;
        *r = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *r;
    }
    for i in 0..SSIM_WINDOW {
        k[i] = real(raw[i] / sum);
    }
    k
}

/// Separable same-size convolution with zero padding.
fn conv_same<T: Real>(src: &[T], w: usize, h: usize, kernel: &[T; SSIM_WINDOW]) -> Vec<T> {
    let half = SSIM_WINDOW / 2;
    let mut tmp = vec![T::zero(); w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (ki, kv) in kernel.iter().enumerate() {
                let xi = x as isize + ki as isize - half as isize;
                if xi >= 0 && (xi as usize) < w {
                    acc += *kv * src[y * w + xi as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![T::zero(); w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (ki, kv) in kernel.iter().enumerate() {
                let yi = y as isize + ki as isize - half as isize;
                if yi >= 0 && (yi as usize) < h {
                    acc += *kv * tmp[yi as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn channel_plane<T: Real>(img: &ImageBuf<T>, c: usize) -> Vec<T> {
    img.data.iter().map(|px| px[c]).collect()
}

/// Mean SSIM over channels with the standard 11x11 Gaussian window on unit
/// dynamic range.
pub fn ssim_metric<T: Real>(a: &ImageBuf<T>, b: &ImageBuf<T>) -> T {
    let (value, _) = ssim_internal(a, b, false);
    value
}

/// SSIM loss (1 - SSIM) and its gradient w.r.t. the first image.
pub fn ssim_loss<T: Real>(rendered: &ImageBuf<T>, target: &ImageBuf<T>) -> (T, ImageBuf<T>) {
    let (value, grad) = ssim_internal(rendered, target, true);
    (T::one() - value, grad.unwrap())
}

fn ssim_internal<T: Real>(
    x_img: &ImageBuf<T>,
    y_img: &ImageBuf<T>,
    with_grad: bool,
) -> (T, Option<ImageBuf<T>>) {
    assert!(x_img.same_shape(y_img), "image dimensions must match");
    let (w, h) = (x_img.width as usize, x_img.height as usize);
    let kernel = ssim_kernel::<T>();
    let n = w * h;
    let c1 = real::<T>(SSIM_C1);
    let c2 = real::<T>(SSIM_C2);
    let count = real::<T>((n * 3) as f64);
    let two = real::<T>(2.0);

    let mut total = T::zero();
    let mut grad = with_grad.then(|| ImageBuf::<T>::zeros(x_img.width, x_img.height));

    for c in 0..3 {
        let x = channel_plane(x_img, c);
        let y = channel_plane(y_img, c);
        let x2: Vec<T> = x.iter().map(|v| *v * *v).collect();
        let y2: Vec<T> = y.iter().map(|v| *v * *v).collect();
        let xy: Vec<T> = x.iter().zip(&y).map(|(a, b)| *a * *b).collect();

        let mu_x = conv_same(&x, w, h, &kernel);
        let mu_y = conv_same(&y, w, h, &kernel);
        let e_x2 = conv_same(&x2, w, h, &kernel);
        let e_y2 = conv_same(&y2, w, h, &kernel);
        let e_xy = conv_same(&xy, w, h, &kernel);

        // Per-pixel S plus the partials needed for the chain.
        let mut d_mu_x = vec![T::zero(); n];
        let mut d_e_x2 = vec![T::zero(); n];
        let mut d_e_xy = vec![T::zero(); n];
        for i in 0..n {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let var_x = e_x2[i] - mx * mx;
            let var_y = e_y2[i] - my * my;
            let cov = e_xy[i] - mx * my;
            let n1 = two * mx * my + c1;
            let n2 = two * cov + c2;
            let d1 = mx * mx + my * my + c1;
            let d2 = var_x + var_y + c2;
            let denom = d1 * d2;
            let s = n1 * n2 / denom;
            total += s;
            if with_grad {
                // dS/dmu_x, dS/dE[x2], dS/dE[xy]; y is constant.
                let ds_dmx = (n2 * two * my - n1 * two * my) / denom
                    - s / d1 * (two * mx)
                    + s / d2 * (two * mx);
                d_mu_x[i] = ds_dmx;
                d_e_x2[i] = -s / d2;
                d_e_xy[i] = two * n1 / denom;
            }
        }

        if let Some(g) = grad.as_mut() {
            // Loss = 1 - mean(S): scale by -1/count and push back through
            // the (symmetric) window convolutions.
            let scale = -T::one() / count;
            let gc_mu = conv_same(&d_mu_x, w, h, &kernel);
            let gc_x2 = conv_same(&d_e_x2, w, h, &kernel);
            let gc_xy = conv_same(&d_e_xy, w, h, &kernel);
            for i in 0..n {
                g.data[i][c] +=
                    scale * (gc_mu[i] + two * x[i] * gc_x2[i] + y[i] * gc_xy[i]);
            }
        }
    }
    (total / count, grad)
}

/// Total-variation of the plane grids: per plane, the mean squared adjacent
/// difference over both axes (all channels pooled), summed over planes.
pub fn tv_loss<T: Real>(planes: &[PlaneGrid<T>]) -> T {
    planes
        .iter()
        .map(|p| {
            let (ssd, pairs) = tv_plane_ssd(p.width, p.height, p.dim, &p.data);
            if pairs == 0 {
                T::zero()
            } else {
                ssd / real((pairs * p.dim) as f64)
            }
        })
        .fold(T::zero(), |a, b| a + b)
}

/// Add `scale * d(tv)/d(grid)` into per-plane gradient buffers.
pub fn tv_loss_backward<T: Real>(planes: &[PlaneGrid<T>], scale: T, grads: &mut [Vec<T>]) {
    for (p, g) in planes.iter().zip(grads.iter_mut()) {
        let (_, pairs) = tv_plane_ssd(p.width, p.height, p.dim, &p.data);
        if pairs == 0 {
            continue;
        }
        let norm = scale * real::<T>(2.0) / real(((pairs) * p.dim) as f64);
        let idx = |u: usize, v: usize, c: usize| (v * p.width + u) * p.dim + c;
        for v in 0..p.height {
            for u in 0..p.width {
                for c in 0..p.dim {
                    if u + 1 < p.width {
                        let d = p.data[idx(u + 1, v, c)] - p.data[idx(u, v, c)];
                        g[idx(u + 1, v, c)] += norm * d;
                        g[idx(u, v, c)] -= norm * d;
                    }
                    if v + 1 < p.height {
                        let d = p.data[idx(u, v + 1, c)] - p.data[idx(u, v, c)];
                        g[idx(u, v + 1, c)] += norm * d;
                        g[idx(u, v, c)] -= norm * d;
                    }
                }
            }
        }
    }
}

/// Sum of squared adjacent differences (both axes, all channels) and the
/// number of adjacent pairs.
fn tv_plane_ssd<T: Real>(width: usize, height: usize, dim: usize, data: &[T]) -> (T, usize) {
    let idx = |u: usize, v: usize, c: usize| (v * width + u) * dim + c;
    let mut ssd = T::zero();
    for v in 0..height {
        for u in 0..width {
            for c in 0..dim {
                if u + 1 < width {
                    let d = data[idx(u + 1, v, c)] - data[idx(u, v, c)];
                    ssd += d * d;
                }
                if v + 1 < height {
                    let d = data[idx(u, v + 1, c)] - data[idx(u, v, c)];
                    ssd += d * d;
                }
            }
        }
    }
    let pairs = height * (width.saturating_sub(1)) + width * (height.saturating_sub(1));
    (ssd, pairs)
}

/// Mean product of the three scale components; penalizes bloated Gaussians.
pub fn volume_reg<T: Real>(gaussians: &[NeuralGaussian<T>]) -> T {
    if gaussians.is_empty() {
        return T::zero();
    }
    let sum = gaussians
        .iter()
        .map(|g| g.scale.x * g.scale.y * g.scale.z)
        .fold(T::zero(), |a, b| a + b);
    sum / real(gaussians.len() as f64)
}

/// Add `scale * d(volume)/d(scales)` into the per-Gaussian gradient buffer.
pub fn volume_reg_backward<T: Real>(
    gaussians: &[NeuralGaussian<T>],
    scale: T,
    grads: &mut [GaussianGrad<T>],
) {
    if gaussians.is_empty() {
        return;
    }
    let inv_n = scale / real(gaussians.len() as f64);
    for (g, grad) in gaussians.iter().zip(grads.iter_mut()) {
        grad.d_scale.x += inv_n * g.scale.y * g.scale.z;
        grad.d_scale.y += inv_n * g.scale.x * g.scale.z;
        grad.d_scale.z += inv_n * g.scale.x * g.scale.y;
    }
}

/// Peak signal-to-noise ratio in dB on unit range; identical images cap at
/// 100 dB (the +infinity sentinel used in logs).
pub fn psnr<T: Real>(rendered: &ImageBuf<T>, target: &ImageBuf<T>) -> f64 {
    assert!(rendered.same_shape(target), "image dimensions must match");
    let count = (rendered.data.len() * 3) as f64;
    let mut mse = 0.0;
    for (r, t) in rendered.data.iter().zip(&target.data) {
        for c in 0..3 {
            let d = (r[c] - t[c]).to_f64_lossy();
            mse += d * d;
        }
    }
    mse /= count;
    if mse <= 0.0 {
        return 100.0;
    }
    (10.0 * (1.0 / mse).log10()).min(100.0)
}
