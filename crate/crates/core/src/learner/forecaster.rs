//! Two-hidden-layer rectifier network mapping selling prices to demands, with a
//! scaled identity path from inputs to outputs.
//!
//! ```text
//! u  = (c − μ_c) / σ_c
//! h₁ = relu(W₁u + b₁)
//! h₂ = relu(W₂h₁ + b₂)
//! z  = μ_e + σ_e ⊙ (W₃h₂ + b₃) + g·c
//! ê  = clamp₀(z)
//! ```
//!
//! Prices (~0.4 $/kWh) and demands (~5–20 kWh) live on different scales, so the
//! identity path carries a learnable gain `g` that starts at zero. The
//! standardization constants `μ, σ` are fixed from the training data and are not
//! trained.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::pbdr::{true_demands, PbdrPattern};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecasterParams {
    pub n_inputs: usize,
    pub width: usize,
    /// Row-major `width × n_inputs`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// Row-major `width × width`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// Row-major `n_inputs × width`.
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
    pub residual_gain: f64,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub output_mean: Vec<f64>,
    pub output_std: Vec<f64>,
}

/// How the output is kept nonnegative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputClamp {
    /// `max(z, 0)`
    Hard,
    /// `softplus(kz)/k`, differentiable everywhere.
    Soft { sharpness: f64 },
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    standardized: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    /// `∂ê/∂z` per output.
    clamp_slope: Vec<f64>,
    pub output: Vec<f64>,
    /// Smallest `|preactivation|` over hidden units: the distance to the nearest
    /// rectifier kink.
    pub kink_margin: f64,
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], bias: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| bias[r] + w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

fn softplus(z: f64, k: f64) -> f64 {
    let kz = k * z;
    (kz.max(0.0) + (-kz.abs()).exp().ln_1p()) / k
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ForecasterParams {
    pub fn zeros(n_inputs: usize, width: usize) -> Self {
        ForecasterParams {
            n_inputs,
            width,
            w1: vec![0.0; width * n_inputs],
            b1: vec![0.0; width],
            w2: vec![0.0; width * width],
            b2: vec![0.0; width],
            w3: vec![0.0; n_inputs * width],
            b3: vec![0.0; n_inputs],
            residual_gain: 0.0,
            input_mean: vec![0.0; n_inputs],
            input_std: vec![1.0; n_inputs],
            output_mean: vec![0.0; n_inputs],
            output_std: vec![1.0; n_inputs],
        }
    }

    /// Sets the standardization constants to the per-coordinate mean and standard
    /// deviation of `inputs` and `outputs`. Coordinates with (near) zero spread
    /// keep unit scale.
    pub fn fit_standardization(&mut self, inputs: &[&[f64]], outputs: &[&[f64]]) -> Result<()> {
        fn moments(rows: &[&[f64]], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
            if rows.is_empty() {
                return Err(Error::Config("cannot standardize on an empty dataset".into()));
            }
            let m = rows.len() as f64;
            let mut mean = vec![0.0; n];
            for r in rows {
                ensure_len("standardization row", n, r.len())?;
                for (a, b) in mean.iter_mut().zip(r.iter()) {
                    *a += b / m;
                }
            }
            let mut std = vec![0.0; n];
            for r in rows {
                for ((s, b), mu) in std.iter_mut().zip(r.iter()).zip(&mean) {
                    *s += (b - mu).powi(2) / m;
                }
            }
            for s in &mut std {
                *s = if s.sqrt() > 1e-9 { s.sqrt() } else { 1.0 };
            }
            Ok((mean, std))
        }
        (self.input_mean, self.input_std) = moments(inputs, self.n_inputs)?;
        (self.output_mean, self.output_std) = moments(outputs, self.n_inputs)?;
        Ok(())
    }

    /// He-normal weights, zero biases, zero residual gain.
    pub fn init(n_inputs: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(n_inputs, width);
        let mut fill = |w: &mut [f64], fan_in: usize| {
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for v in w.iter_mut() {
                *v = dist.sample(&mut rng);
            }
        };
        fill(&mut p.w1, n_inputs);
        fill(&mut p.w2, width);
        fill(&mut p.w3, width);
        p
    }

    pub fn validate(&self) -> Result<()> {
        let (n, w) = (self.n_inputs, self.width);
        ensure_len("w1", w * n, self.w1.len())?;
        ensure_len("b1", w, self.b1.len())?;
        ensure_len("w2", w * w, self.w2.len())?;
        ensure_len("b2", w, self.b2.len())?;
        ensure_len("w3", n * w, self.w3.len())?;
        ensure_len("b3", n, self.b3.len())?;
        for (what, v) in [
            ("input_mean", &self.input_mean),
            ("input_std", &self.input_std),
            ("output_mean", &self.output_mean),
            ("output_std", &self.output_std),
        ] {
            ensure_len(what, n, v.len())?;
        }
        if self.flatten().iter().any(|v| !v.is_finite())
            || self.input_mean.iter().chain(&self.output_mean).any(|v| !v.is_finite())
        {
            return Err(Error::Numerical("forecaster has non-finite parameters".into()));
        }
        if self.input_std.iter().chain(&self.output_std).any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Numerical("standardization scales must be positive".into()));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.w3.len() + self.b3.len() + 1
    }

    /// All trainable parameters in the order `w1, b1, w2, b2, w3, b3, residual_gain`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for part in [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3] {
            out.extend_from_slice(part);
        }
        out.push(self.residual_gain);
        out
    }

    pub fn set_flat(&mut self, theta: &[f64]) -> Result<()> {
        ensure_len("theta", self.n_params(), theta.len())?;
        let mut rest = theta;
        for part in [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ] {
            let (head, tail) = rest.split_at(part.len());
            part.copy_from_slice(head);
            rest = tail;
        }
        self.residual_gain = rest[0];
        Ok(())
    }

    pub fn forward(&self, c: &[f64], clamp: OutputClamp) -> ForwardCache {
        let (n, w) = (self.n_inputs, self.width);
        let u: Vec<f64> = c
            .iter()
            .zip(self.input_mean.iter().zip(&self.input_std))
            .map(|(ci, (m, s))| (ci - m) / s)
            .collect();
        let a1 = matvec(&self.w1, w, n, &u, &self.b1);
        let h1: Vec<f64> = a1.iter().map(|v| v.max(0.0)).collect();
        let a2 = matvec(&self.w2, w, w, &h1, &self.b2);
        let h2: Vec<f64> = a2.iter().map(|v| v.max(0.0)).collect();
        let kink_margin = a1.iter().chain(&a2).fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let z: Vec<f64> = matvec(&self.w3, n, w, &h2, &self.b3)
            .into_iter()
            .enumerate()
            .map(|(o, v)| self.output_mean[o] + self.output_std[o] * v + self.residual_gain * c[o])
            .collect();
        let (output, clamp_slope) = match clamp {
            OutputClamp::Hard => z
                .iter()
                .map(|&v| if v > 0.0 { (v, 1.0) } else { (0.0, 0.0) })
                .unzip(),
            OutputClamp::Soft { sharpness } => z
                .iter()
                .map(|&v| (softplus(v, sharpness), sigmoid(sharpness * v)))
                .unzip(),
        };
        ForwardCache {
            input: c.to_vec(),
            standardized: u,
            h1,
            h2,
            clamp_slope,
            output,
            kink_margin,
        }
    }

    /// Demand forecast with the hard clamp.
    pub fn forecast(&self, c: &[f64]) -> Vec<f64> {
        self.forward(c, OutputClamp::Hard).output
    }

    /// Gradient of `upstreamᵀ ê` with respect to the flattened parameters.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Vec<f64> {
        let (n, w) = (self.n_inputs, self.width);
        let dz: Vec<f64> = upstream
            .iter()
            .zip(&cache.clamp_slope)
            .map(|(u, s)| u * s)
            .collect();
        let g_gain: f64 = dz.iter().zip(&cache.input).map(|(d, c)| d * c).sum();
        let dz: Vec<f64> = dz.iter().zip(&self.output_std).map(|(d, s)| d * s).collect();

        let mut g_w3 = vec![0.0; n * w];
        let mut dh2 = vec![0.0; w];
        for o in 0..n {
            for k in 0..w {
                g_w3[o * w + k] = dz[o] * cache.h2[k];
                dh2[k] += dz[o] * self.w3[o * w + k];
            }
        }
        let g_b3 = dz.clone();

        let da2: Vec<f64> = dh2
            .iter()
            .zip(&cache.h2)
            .map(|(d, h)| if *h > 0.0 { *d } else { 0.0 })
            .collect();
        let mut g_w2 = vec![0.0; w * w];
        let mut dh1 = vec![0.0; w];
        for r in 0..w {
            for k in 0..w {
                g_w2[r * w + k] = da2[r] * cache.h1[k];
                dh1[k] += da2[r] * self.w2[r * w + k];
            }
        }

        let da1: Vec<f64> = dh1
            .iter()
            .zip(&cache.h1)
            .map(|(d, h)| if *h > 0.0 { *d } else { 0.0 })
            .collect();
        let mut g_w1 = vec![0.0; w * n];
        for r in 0..w {
            for k in 0..n {
                g_w1[r * n + k] = da1[r] * cache.standardized[k];
            }
        }

        let mut out = Vec::with_capacity(self.n_params());
        out.extend(g_w1);
        out.extend(da1);
        out.extend(g_w2);
        out.extend(da2);
        out.extend(g_w3);
        out.extend(g_b3);
        out.push(g_gain);
        out
    }
}

/// Anything that maps a price vector to a demand vector.
pub trait DemandModel {
    fn predict(&self, c: &[f64]) -> Result<Vec<f64>>;
}

impl DemandModel for ForecasterParams {
    fn predict(&self, c: &[f64]) -> Result<Vec<f64>> {
        ensure_len("prices", self.n_inputs, c.len())?;
        Ok(self.forecast(c))
    }
}

/// Forecaster that knows the true demand-response laws.
#[derive(Debug, Clone, Copy)]
pub struct OracleForecaster<'a>(pub &'a [PbdrPattern]);

impl DemandModel for OracleForecaster<'_> {
    fn predict(&self, c: &[f64]) -> Result<Vec<f64>> {
        true_demands(self.0, c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_network_passes_residual() {
        let mut p = ForecasterParams::zeros(3, 8);
        let c = [0.2, 0.5, 0.3];
        assert_eq!(p.forecast(&c), vec![0.0; 3]);
        p.residual_gain = 1.0;
        assert_eq!(p.forecast(&c), c.to_vec());
        p.residual_gain = -1.0;
        assert_eq!(p.forecast(&c), vec![0.0; 3]);
    }

    #[test]
    fn output_dimension_fixed() {
        for width in [1, 4, 32, 65] {
            let p = ForecasterParams::init(5, width, 3);
            assert_eq!(p.forecast(&[0.3; 5]).len(), 5);
        }
    }

    #[test]
    fn flatten_roundtrip() {
        let p = ForecasterParams::init(3, 4, 1);
        let mut q = ForecasterParams::zeros(3, 4);
        q.set_flat(&p.flatten()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.flatten().len(), p.n_params());
        assert!(q.set_flat(&[0.0; 3]).is_err());
    }

    #[test]
    fn soft_clamp_close_to_hard() {
        let p = ForecasterParams::init(5, 16, 2);
        let c = [0.3, 0.4, 0.5, 0.25, 0.55];
        let hard = p.forward(&c, OutputClamp::Hard).output;
        let soft = p.forward(&c, OutputClamp::Soft { sharpness: 100.0 }).output;
        for (h, s) in hard.iter().zip(&soft) {
            assert!(s >= h);
            assert!(s - h <= 2f64.ln() / 100.0 + 1e-12);
        }
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(ForecasterParams::init(5, 8, 4), ForecasterParams::init(5, 8, 4));
        assert_ne!(ForecasterParams::init(5, 8, 4), ForecasterParams::init(5, 8, 5));
    }

    #[test]
    fn standardization_moments() {
        let mut p = ForecasterParams::zeros(2, 3);
        let c: [&[f64]; 2] = [&[0.2, 0.5], &[0.4, 0.5]];
        let e: [&[f64]; 2] = [&[10.0, 4.0], &[14.0, 8.0]];
        p.fit_standardization(&c, &e).unwrap();
        assert!((p.input_mean[0] - 0.3).abs() < 1e-15);
        assert!((p.input_std[0] - 0.1).abs() < 1e-15);
        assert_eq!(p.input_std[1], 1.0);
        assert_eq!(p.output_mean, vec![12.0, 6.0]);
        assert_eq!(p.output_std, vec![2.0, 2.0]);
        // A zero network predicts the output mean.
        assert_eq!(p.forecast(&[0.3, 0.5]), vec![12.0, 6.0]);
    }

    #[test]
    fn validate_catches_shape_errors() {
        let mut p = ForecasterParams::init(2, 3, 0);
        assert!(p.validate().is_ok());
        p.b2.pop();
        assert!(p.validate().is_err());
    }
}
