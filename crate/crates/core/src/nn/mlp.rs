use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{real, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
        }
    }

    /// Derivative expressed through the post-activation value.
    fn grad_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Relu),
            2 => Ok(Activation::Sigmoid),
            t => Err(Error::CheckpointFormat(format!(
                "unknown activation tag {t}"
            ))),
        }
    }
}

/// Fully-connected network. Layer `l` maps `sizes[l]` to `sizes[l+1]` through
/// a row-major weight matrix, a bias, and `activations[l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet<T> {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    weights: Vec<Vec<T>>,
    biases: Vec<Vec<T>>,
}

/// Gradient accumulators shaped like an [`MlpNet`]. Kept separate from the
/// net so parallel workers can each own one and merge deterministically.
#[derive(Debug, Clone)]
pub struct MlpGrads<T> {
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Real> MlpNet<T> {
    /// Zero-initialized net. `activations.len()` must equal `sizes.len() - 1`.
    pub fn new(sizes: Vec<usize>, activations: Vec<Activation>) -> Self {
        assert!(sizes.len() >= 2, "need at least one affine layer");
        assert_eq!(activations.len(), sizes.len() - 1);
        let weights = (0..sizes.len() - 1)
            .map(|l| vec![T::zero(); sizes[l + 1] * sizes[l]])
            .collect();
        let biases = (0..sizes.len() - 1)
            .map(|l| vec![T::zero(); sizes[l + 1]])
            .collect();
        MlpNet {
            sizes,
            activations,
            weights,
            biases,
        }
    }

    /// Convenience: input -> hidden (ReLU, repeated `depth` times) -> output.
    pub fn with_hidden(
        input: usize,
        hidden: usize,
        depth: usize,
        output: usize,
        out_act: Activation,
    ) -> Self {
        let mut sizes = vec![input];
        let mut acts = Vec::new();
        for _ in 0..depth {
            sizes.push(hidden);
            acts.push(Activation::Relu);
        }
        sizes.push(output);
        acts.push(out_act);
        MlpNet::new(sizes, acts)
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Uniform fan-in init (bound 1/sqrt(fan_in)) for weights and biases.
    pub fn init_fan_in(&mut self, rng: &mut impl Rng) {
        for l in 0..self.weights.len() {
            let bound = 1.0 / (self.sizes[l] as f64).sqrt();
            for w in self.weights[l].iter_mut() {
                *w = real(rng.gen_range(-bound..bound));
            }
            for b in self.biases[l].iter_mut() {
                *b = real(rng.gen_range(-bound..bound));
            }
        }
    }

    /// Zero the last affine layer so the net outputs exactly zero at start.
    pub fn zero_final_layer(&mut self) {
        let last = self.weights.len() - 1;
        self.weights[last].fill(T::zero());
        self.biases[last].fill(T::zero());
    }

    /// Zero the first-layer weight columns for inputs `[from, to)`.
    /// Used to make the temporal slice of a conditioning vector initially
    /// inert, so enabling it cannot change outputs until it is trained.
    pub fn zero_input_columns(&mut self, from: usize, to: usize) {
        let cols = self.sizes[0];
        assert!(from <= to && to <= cols);
        for row in 0..self.sizes[1] {
            for c in from..to {
                self.weights[0][row * cols + c] = T::zero();
            }
        }
    }

    /// Overwrite the final-layer bias (e.g. to start opacities at a chosen
    /// logit, or rotations at the identity quaternion).
    pub fn set_final_bias(&mut self, bias: &[T]) {
        let last = self.biases.len() - 1;
        assert_eq!(bias.len(), self.biases[last].len());
        self.biases[last].copy_from_slice(bias);
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.sizes[0] {
            return Err(Error::ShapeMismatch {
                expected: self.sizes[0],
                got: x.len(),
            });
        }
        let mut cur = x.to_vec();
        for l in 0..self.weights.len() {
            cur = self.layer_forward(l, &cur);
        }
        Ok(cur)
    }

    fn layer_forward(&self, l: usize, input: &[T]) -> Vec<T> {
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let act = self.activations[l];
        let mut out = Vec::with_capacity(n_out);
        for row in 0..n_out {
            let w = &self.weights[l][row * n_in..(row + 1) * n_in];
            let mut acc = self.biases[l][row];
            for (wi, xi) in w.iter().zip(input) {
                acc += *wi * *xi;
            }
            out.push(act.apply(acc));
        }
        out
    }

    /// Reverse pass. Recomputes the forward activations for `x`, accumulates
    /// parameter gradients into `acc` and returns dL/dx.
    pub fn backward(&self, x: &[T], grad_out: &[T], acc: &mut MlpGrads<T>) -> Result<Vec<T>> {
        if x.len() != self.sizes[0] {
            return Err(Error::ShapeMismatch {
                expected: self.sizes[0],
                got: x.len(),
            });
        }
        if grad_out.len() != self.output_dim() {
            return Err(Error::ShapeMismatch {
                expected: self.output_dim(),
                got: grad_out.len(),
            });
        }
        // post[l] = activations entering layer l; post[L] = network output.
        let mut post: Vec<Vec<T>> = Vec::with_capacity(self.sizes.len());
        post.push(x.to_vec());
        for l in 0..self.weights.len() {
            let next = self.layer_forward(l, &post[l]);
            post.push(next);
        }

        let mut delta = grad_out.to_vec();
        for l in (0..self.weights.len()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let act = self.activations[l];
            // Through the activation.
            for (d, y) in delta.iter_mut().zip(&post[l + 1]) {
                *d *= act.grad_from_output(*y);
            }
            // Parameter grads and the pushback Wᵀ delta.
            let mut grad_in = vec![T::zero(); n_in];
            for row in 0..n_out {
                let d = delta[row];
                acc.biases[l][row] += d;
                let w = &self.weights[l][row * n_in..(row + 1) * n_in];
                let gw = &mut acc.weights[l][row * n_in..(row + 1) * n_in];
                for i in 0..n_in {
                    gw[i] += d * post[l][i];
                    grad_in[i] += d * w[i];
                }
            }
            delta = grad_in;
        }
        Ok(delta)
    }

    /// Flat views used by the optimizer; layer weights then biases, in order.
    pub fn param_tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .map(|v| v.as_mut_slice())
            .collect()
    }

    pub fn save(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&(self.sizes.len() as u32).to_le_bytes())?;
        for s in &self.sizes {
            w.write_all(&(*s as u32).to_le_bytes())?;
        }
        for a in &self.activations {
            w.write_all(&[a.tag()])?;
        }
        for l in 0..self.weights.len() {
            for v in self.weights[l].iter().chain(self.biases[l].iter()) {
                w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<Self> {
        let n_sizes = read_u32(r)? as usize;
        if !(2..=64).contains(&n_sizes) {
            return Err(Error::CheckpointFormat(format!(
                "implausible layer count {n_sizes}"
            )));
        }
        let mut sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            sizes.push(read_u32(r)? as usize);
        }
        let mut activations = Vec::with_capacity(n_sizes - 1);
        for _ in 0..n_sizes - 1 {
            let mut tag = [0u8];
            r.read_exact(&mut tag)?;
            activations.push(Activation::from_tag(tag[0])?);
        }
        let mut net = MlpNet::new(sizes, activations);
        for l in 0..net.weights.len() {
            for v in net.weights[l].iter_mut().chain(net.biases[l].iter_mut()) {
                *v = real(read_f32(r)? as f64);
            }
        }
        Ok(net)
    }
}

impl<T: Real> MlpGrads<T> {
    pub fn zeros_like(net: &MlpNet<T>) -> Self {
        MlpGrads {
            weights: net.weights.iter().map(|w| vec![T::zero(); w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![T::zero(); b.len()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        for w in &mut self.weights {
            w.fill(T::zero());
        }
        for b in &mut self.biases {
            b.fill(T::zero());
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads<T>) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .map(|v| v.as_mut_slice())
            .collect()
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_f32(r: &mut impl Read) -> std::io::Result<f32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(f32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_net_outputs_zeros() {
        let net = MlpNet::<f64>::new(vec![4, 3, 2], vec![Activation::Relu, Activation::Identity]);
        let y = net.forward(&[1.0, -2.0, 0.5, 3.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_through() {
        let mut net = MlpNet::<f64>::new(vec![3, 3], vec![Activation::Identity]);
        for i in 0..3 {
            net.weights[0][i * 3 + i] = 1.0;
        }
        let x = [0.3, -1.2, 2.0];
        assert_eq!(net.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn relu_clamps_negative() {
        let mut net = MlpNet::<f64>::new(vec![1, 1], vec![Activation::Relu]);
        net.weights[0][0] = -1.0;
        assert_eq!(net.forward(&[2.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn width_mismatch_is_error() {
        let net = MlpNet::<f64>::new(vec![3, 2], vec![Activation::Identity]);
        assert!(net.forward(&[1.0, 2.0]).is_err());
        let mut acc = MlpGrads::zeros_like(&net);
        assert!(net.backward(&[1.0, 2.0, 3.0], &[1.0], &mut acc).is_err());
    }

    #[test]
    fn linear_backward_is_w_transpose() {
        let mut net = MlpNet::<f64>::new(vec![2, 2], vec![Activation::Identity]);
        net.weights[0] = vec![1.0, 2.0, 3.0, 4.0]; // rows (1,2), (3,4)
        let mut acc = MlpGrads::zeros_like(&net);
        let g_in = net.backward(&[5.0, 7.0], &[1.0, 1.0], &mut acc).unwrap();
        assert_eq!(g_in, vec![4.0, 6.0]); // Wᵀ [1,1]
        assert_eq!(acc.biases[0], vec![1.0, 1.0]);
        assert_eq!(acc.weights[0], vec![5.0, 7.0, 5.0, 7.0]);
    }

    #[test]
    fn zero_upstream_grad_accumulates_nothing() {
        let mut net = MlpNet::<f64>::new(vec![3, 4, 2], vec![Activation::Relu, Activation::Sigmoid]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        net.init_fan_in(&mut rng);
        let mut acc = MlpGrads::zeros_like(&net);
        let g_in = net
            .backward(&[0.1, 0.2, 0.3], &[0.0, 0.0], &mut acc)
            .unwrap();
        assert_eq!(g_in, vec![0.0; 3]);
        assert!(acc.weights.iter().all(|w| w.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut net =
            MlpNet::<f64>::new(vec![5, 8, 3], vec![Activation::Relu, Activation::Identity]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        net.init_fan_in(&mut rng);
        let x = [0.1, -0.4, 0.9, 2.3, -1.1];
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(a, b);
    }

    /// Central finite differences over every parameter of a small net.
    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net =
                MlpNet::<f64>::new(vec![4, 6, 3], vec![Activation::Relu, Activation::Sigmoid]);
            net.init_fan_in(&mut rng);
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g_out: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss = |n: &MlpNet<f64>| -> f64 {
                n.forward(&x)
                    .unwrap()
                    .iter()
                    .zip(&g_out)
                    .map(|(y, g)| y * g)
                    .sum()
            };
            let mut acc = MlpGrads::zeros_like(&net);
            let g_in = net.backward(&x, &g_out, &mut acc).unwrap();

            let h = 1e-5;
            for l in 0..net.weights.len() {
                for i in 0..net.weights[l].len() {
                    let orig = net.weights[l][i];
                    net.weights[l][i] = orig + h;
                    let lp = loss(&net);
                    net.weights[l][i] = orig - h;
                    let lm = loss(&net);
                    net.weights[l][i] = orig;
                    let fd = (lp - lm) / (2.0 * h);
                    let a = acc.weights[l][i];
                    let denom = fd.abs().max(a.abs()).max(1e-6);
                    assert!(
                        ((a - fd) / denom).abs() <= 1e-4,
                        "seed {seed} layer {l} w[{i}]: analytic {a}, fd {fd}"
                    );
                }
                for i in 0..net.biases[l].len() {
                    let orig = net.biases[l][i];
                    net.biases[l][i] = orig + h;
                    let lp = loss(&net);
                    net.biases[l][i] = orig - h;
                    let lm = loss(&net);
                    net.biases[l][i] = orig;
                    let fd = (lp - lm) / (2.0 * h);
                    let a = acc.biases[l][i];
                    let denom = fd.abs().max(a.abs()).max(1e-6);
                    assert!(((a - fd) / denom).abs() <= 1e-4);
                }
            }
            // Input gradient too.
            let mut xv = x.clone();
            for i in 0..xv.len() {
                let orig = xv[i];
                xv[i] = orig + h;
                let lp: f64 = net
                    .forward(&xv)
                    .unwrap()
                    .iter()
                    .zip(&g_out)
                    .map(|(y, g)| y * g)
                    .sum();
                xv[i] = orig - h;
                let lm: f64 = net
                    .forward(&xv)
                    .unwrap()
                    .iter()
                    .zip(&g_out)
                    .map(|(y, g)| y * g)
                    .sum();
                xv[i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let denom = fd.abs().max(g_in[i].abs()).max(1e-6);
                assert!(((g_in[i] - fd) / denom).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let mut net =
            MlpNet::<f32>::new(vec![3, 5, 2], vec![Activation::Relu, Activation::Sigmoid]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        net.init_fan_in(&mut rng);
        let mut buf = Vec::new();
        net.save(&mut buf).unwrap();
        let loaded = MlpNet::<f32>::load(&mut buf.as_slice()).unwrap();
        assert_eq!(net, loaded);
    }

    #[test]
    fn zero_input_columns_makes_slice_inert() {
        let mut net =
            MlpNet::<f64>::new(vec![6, 8, 2], vec![Activation::Relu, Activation::Identity]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        net.init_fan_in(&mut rng);
        net.zero_input_columns(4, 6);
        let a = net.forward(&[0.1, 0.2, 0.3, 0.4, 0.0, 0.0]).unwrap();
        let b = net.forward(&[0.1, 0.2, 0.3, 0.4, 9.0, -3.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn final_bias_override() {
        let mut net = MlpNet::<f64>::new(vec![2, 3], vec![Activation::Identity]);
        net.set_final_bias(&[1.0, 2.0, 3.0]);
        assert_eq!(net.forward(&[0.0, 0.0]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn fd_relative_error_small_on_random_nets() {
        // Sanity on the relative-error helper contract used elsewhere: the
        // analytic/fd agreement must be far below the 1e-4 gate.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut net = MlpNet::<f64>::new(vec![3, 4, 1], vec![Activation::Relu, Activation::Identity]);
        net.init_fan_in(&mut rng);
        let x = [0.5, -0.25, 0.75];
        let mut acc = MlpGrads::zeros_like(&net);
        net.backward(&x, &[1.0], &mut acc).unwrap();
        let h = 1e-5;
        let orig = net.weights[0][0];
        net.weights[0][0] = orig + h;
        let lp = net.forward(&x).unwrap()[0];
        net.weights[0][0] = orig - h;
        let lm = net.forward(&x).unwrap()[0];
        net.weights[0][0] = orig;
        let fd = (lp - lm) / (2.0 * h);
        assert_relative_eq!(acc.weights[0][0], fd, max_relative = 1e-6, epsilon = 1e-10);
    }
}
