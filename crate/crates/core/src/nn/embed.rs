use crate::scalar::{real, Real};

/// Sinusoidal temporal embedding:
/// [sin(b·2⁰·t), cos(b·2⁰·t), ..., sin(b·2^{L-1}·t), cos(b·2^{L-1}·t)]
/// with base frequency b = pi, plus the raw t appended when enabled.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TemporalEmbedding {
    pub bands: usize,
    pub base_freq: f64,
    pub append_raw: bool,
}

impl Default for TemporalEmbedding {
    fn default() -> Self {
        TemporalEmbedding {
            bands: 6,
            base_freq: std::f64::consts::PI,
            append_raw: true,
        }
    }
}

impl TemporalEmbedding {
    pub fn dim(&self) -> usize {
        2 * self.bands + usize::from(self.append_raw)
    }

    /// Embed a normalized frame time. Out-of-range inputs are clamped with a
    /// warning rather than rejected.
    pub fn embed<T: Real>(&self, t: T) -> Vec<T> {
        let t = if t < T::zero() || t > T::one() {
            log::warn!(
                "temporal embedding input {} outside [0,1]; clamping",
                t.to_f64_lossy()
            );
            t.clamp(T::zero(), T::one())
        } else {
            t
        };
        let mut out = Vec::with_capacity(self.dim());
        let mut freq: T = real(self.base_freq);
        for _ in 0..self.bands {
            let phase = freq * t;
            out.push(phase.sin());
            out.push(phase.cos());
            freq *= real(2.0);
        }
        if self.append_raw {
            out.push(t);
        }
        out
    }
}
