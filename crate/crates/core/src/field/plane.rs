use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::nn::{read_f32, read_u32};
use crate::scalar::{real, Real};

/// One 2D feature grid. Entry (u, v) channel c lives at
/// `(v * width + u) * dim + c`. Queries take normalized coordinates in
/// [0, 1] (clamped) and bilinearly interpolate the cell corners.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneGrid<T> {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub data: Vec<T>,
}

/// Cell and weights of a bilinear lookup.
struct Bilinear<T> {
    u0: usize,
    v0: usize,
    fu: T,
    fv: T,
}

impl<T: Real> PlaneGrid<T> {
    pub fn new(width: usize, height: usize, dim: usize) -> Self {
        assert!(width >= 2 && height >= 2, "grid needs at least 2x2 nodes");
        PlaneGrid {
            width,
            height,
            dim,
            data: vec![T::zero(); width * height * dim],
        }
    }

    fn locate(&self, u: T, v: T) -> Bilinear<T> {
        let gu = (u.clamp(T::zero(), T::one()) * real((self.width - 1) as f64))
            .min(real((self.width - 1) as f64));
        let gv = (v.clamp(T::zero(), T::one()) * real((self.height - 1) as f64))
            .min(real((self.height - 1) as f64));
        let u0 = (gu.floor().to_f64_lossy() as usize).min(self.width - 2);
        let v0 = (gv.floor().to_f64_lossy() as usize).min(self.height - 2);
        Bilinear {
            u0,
            v0,
            fu: gu - real(u0 as f64),
            fv: gv - real(v0 as f64),
        }
    }

    #[inline]
    fn node(&self, u: usize, v: usize, c: usize) -> T {
        self.data[(v * self.width + u) * self.dim + c]
    }

    /// Bilinear sample of all channels at normalized (u, v).
    pub fn sample(&self, u: T, v: T) -> Vec<T> {
        let b = self.locate(u, v);
        let one = T::one();
        let w00 = (one - b.fu) * (one - b.fv);
        let w10 = b.fu * (one - b.fv);
        let w01 = (one - b.fu) * b.fv;
        let w11 = b.fu * b.fv;
        (0..self.dim)
            .map(|c| {
                self.node(b.u0, b.v0, c) * w00
                    + self.node(b.u0 + 1, b.v0, c) * w10
                    + self.node(b.u0, b.v0 + 1, c) * w01
                    + self.node(b.u0 + 1, b.v0 + 1, c) * w11
            })
            .collect()
    }

    /// Backward of one channel of [`sample`]: scatter `d_feat` into the four
    /// corner gradients and return (dL/du, dL/dv) in normalized coordinates.
    pub fn sample_backward(
        &self,
        u: T,
        v: T,
        channel: usize,
        d_feat: T,
        grad: &mut [T],
    ) -> (T, T) {
        let b = self.locate(u, v);
        let one = T::one();
        let idx = |uu: usize, vv: usize| (vv * self.width + uu) * self.dim + channel;
        grad[idx(b.u0, b.v0)] += d_feat * (one - b.fu) * (one - b.fv);
        grad[idx(b.u0 + 1, b.v0)] += d_feat * b.fu * (one - b.fv);
        grad[idx(b.u0, b.v0 + 1)] += d_feat * (one - b.fu) * b.fv;
        grad[idx(b.u0 + 1, b.v0 + 1)] += d_feat * b.fu * b.fv;

        let g00 = self.node(b.u0, b.v0, channel);
        let g10 = self.node(b.u0 + 1, b.v0, channel);
        let g01 = self.node(b.u0, b.v0 + 1, channel);
        let g11 = self.node(b.u0 + 1, b.v0 + 1, channel);
        // d(sample)/d(gu) etc., then chain gu = u * (width - 1).
        let d_gu = (g10 - g00) * (one - b.fv) + (g11 - g01) * b.fv;
        let d_gv = (g01 - g00) * (one - b.fu) + (g11 - g10) * b.fu;
        (
            d_feat * d_gu * real((self.width - 1) as f64),
            d_feat * d_gv * real((self.height - 1) as f64),
        )
    }

    pub fn save(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<Self> {
        let width = read_u32(r)? as usize;
        let height = read_u32(r)? as usize;
        let dim = read_u32(r)? as usize;
        if width < 2 || height < 2 || dim == 0 || width * height * dim > 1 << 28 {
            return Err(Error::CheckpointFormat(format!(
                "implausible grid dims {width}x{height}x{dim}"
            )));
        }
        let mut grid = PlaneGrid::new(width, height, dim);
        for v in &mut grid.data {
            *v = real(read_f32(r)? as f64);
        }
        Ok(grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ramp_grid() -> PlaneGrid<f64> {
        // 3x3, single channel, node value = u + 10 v.
        let mut g = PlaneGrid::new(3, 3, 1);
        for v in 0..3 {
            for u in 0..3 {
                g.data[v * 3 + u] = u as f64 + 10.0 * v as f64;
            }
        }
        g
    }

    #[test]
    fn sample_at_nodes_is_exact() {
        let g = ramp_grid();
        assert_eq!(g.sample(0.0, 0.0), vec![0.0]);
        assert_eq!(g.sample(1.0, 1.0), vec![22.0]);
        assert_eq!(g.sample(0.5, 0.0), vec![1.0]);
    }

    #[test]
    fn midpoint_is_mean_of_neighbors() {
        let g = ramp_grid();
        // Halfway between u-nodes 0 and 1 on the v=0 row.
        assert_relative_eq!(g.sample(0.25, 0.0)[0], 0.5);
    }

    #[test]
    fn constant_grid_constant_everywhere() {
        let mut g = PlaneGrid::new(4, 4, 2);
        g.data.fill(3.25f64);
        for &(u, v) in &[(0.0, 0.0), (0.37, 0.81), (1.0, 0.5), (2.0, -1.0)] {
            assert_eq!(g.sample(u, v), vec![3.25, 3.25]);
        }
    }

    #[test]
    fn out_of_range_clamps() {
        let g = ramp_grid();
        assert_eq!(g.sample(-0.5, 0.0), g.sample(0.0, 0.0));
        assert_eq!(g.sample(2.0, 3.0), g.sample(1.0, 1.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let g = ramp_grid();
        let (u, v) = (0.3, 0.62);
        let mut grad = vec![0.0; g.data.len()];
        let (du, dv) = g.sample_backward(u, v, 0, 1.0, &mut grad);
        let h = 1e-7;
        let fd_u = (g.sample(u + h, v)[0] - g.sample(u - h, v)[0]) / (2.0 * h);
        let fd_v = (g.sample(u, v + h)[0] - g.sample(u, v - h)[0]) / (2.0 * h);
        assert_relative_eq!(du, fd_u, epsilon = 1e-5);
        assert_relative_eq!(dv, fd_v, epsilon = 1e-5);
        // Grid-entry gradients: perturb each node.
        let mut g2 = g.clone();
        for i in 0..g.data.len() {
            let orig = g2.data[i];
            g2.data[i] = orig + h;
            let p = g2.sample(u, v)[0];
            g2.data[i] = orig - h;
            let m = g2.sample(u, v)[0];
            g2.data[i] = orig;
            assert_relative_eq!(grad[i], (p - m) / (2.0 * h), epsilon = 1e-5);
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let g = ramp_grid();
        let mut buf = Vec::new();
        g.save(&mut buf).unwrap();
        let loaded = PlaneGrid::<f64>::load(&mut buf.as_slice()).unwrap();
        assert_eq!(g, loaded);
    }
}
