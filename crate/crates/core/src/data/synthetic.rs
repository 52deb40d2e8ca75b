//! Modal-interference specklegram generator.
//!
//! Each image is the intensity of a superposition of `M` guided modes,
//!
//! ```text
//! I(x, y; T) = | Σ_m a_m φ_m(x, y) exp(i (β_m + c_m T) L) |²
//! ```
//!
//! with plane-wave mode profiles `φ_m(x, y) = cos(k_m (x cos θ_m + y sin θ_m) + ψ_m)`,
//! complex amplitudes `a_m`, phase offsets `β_m` and thermo-phase
//! coefficients `c_m` (rad/°C). Everything except the temperature is drawn
//! once per dataset from `amplitude_seed`.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::filters::min_max_normalize;
use super::SpecklegramSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    pub mode_count: usize,
    /// Seed for mode shapes, amplitudes and phase offsets.
    pub amplitude_seed: u64,
    /// Explicit `c_m` values; drawn uniformly from `thermo_phase_range` when absent.
    pub thermo_phase: Option<Vec<f64>>,
    pub thermo_phase_range: [f64; 2],
    pub fiber_length: f64,
    /// Mode spatial frequencies in cycles per image side.
    pub spatial_frequency_range: [f64; 2],
    pub t_min: f64,
    pub t_max: f64,
    pub t_step: f64,
    /// Standard deviation of additive Gaussian noise on the normalized image.
    pub noise_std: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            image_size: 64,
            mode_count: 12,
            amplitude_seed: 7,
            thermo_phase: None,
            thermo_phase_range: [0.0, 0.05],
            fiber_length: 1.0,
            spatial_frequency_range: [1.0, 6.0],
            t_min: 0.0,
            t_max: 120.0,
            t_step: 0.4,
            noise_std: 0.0,
        }
    }
}

impl SyntheticConfig {
    /// Full validation, including the two-mode minimum needed for any
    /// temperature dependence.
    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        if self.mode_count < 2 {
            return Err(Error::Config("mode_count must be at least 2".into()));
        }
        Ok(())
    }

    fn validate_structure(&self) -> Result<()> {
        if self.image_size == 0 || self.mode_count == 0 {
            return Err(Error::Config(
                "image_size and mode_count must be positive".into(),
            ));
        }
        if !(self.t_step > 0.0) || !(self.t_max >= self.t_min) {
            return Err(Error::Config("need t_step > 0 and t_max >= t_min".into()));
        }
        if let Some(c) = &self.thermo_phase {
            if c.len() != self.mode_count {
                return Err(Error::Config(format!(
                    "thermo_phase has {} entries for {} modes",
                    c.len(),
                    self.mode_count
                )));
            }
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be nonnegative".into()));
        }
        Ok(())
    }

    /// Temperature grid `t_min, t_min + step, ...` up to `t_max` inclusive.
    pub fn temperatures(&self) -> Vec<f64> {
        let count = ((self.t_max - self.t_min) / self.t_step + 1e-9).floor() as usize + 1;
        (0..count)
            .map(|i| self.t_min + i as f64 * self.t_step)
            .collect()
    }
}

struct Mode {
    amp: (f64, f64),
    kx: f64,
    ky: f64,
    psi: f64,
    beta: f64,
    thermo: f64,
}

fn draw_modes(config: &SyntheticConfig) -> Vec<Mode> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.amplitude_seed);
    let [f_lo, f_hi] = config.spatial_frequency_range;
    let [c_lo, c_hi] = config.thermo_phase_range;
    (0..config.mode_count)
        .map(|m| {
            let mag = rng.random_range(0.5..1.5);
            let phase = rng.random_range(0.0..TAU);
            let theta = rng.random_range(0.0..TAU);
            let f = if f_hi > f_lo {
                rng.random_range(f_lo..f_hi)
            } else {
                f_lo
            };
            let k = TAU * f;
            let psi = rng.random_range(0.0..TAU);
            let beta = rng.random_range(0.0..TAU);
            let drawn = if c_hi > c_lo {
                rng.random_range(c_lo..c_hi)
            } else {
                c_lo
            };
            let thermo = config.thermo_phase.as_ref().map_or(drawn, |c| c[m]);
            Mode {
                amp: (mag * phase.cos(), mag * phase.sin()),
                kx: k * theta.cos(),
                ky: k * theta.sin(),
                psi,
                beta,
                thermo,
            }
        })
        .collect()
}

/// Raw (unnormalized) intensity at one temperature, `[n, n]`.
fn intensity(modes: &[Mode], profiles: &[Vec<f64>], n: usize, t: f64, length: f64) -> Vec<f64> {
    let phasors: Vec<(f64, f64)> = modes
        .iter()
        .map(|m| {
            let theta = (m.beta + m.thermo * t) * length;
            let (c, s) = (theta.cos(), theta.sin());
            (m.amp.0 * c - m.amp.1 * s, m.amp.0 * s + m.amp.1 * c)
        })
        .collect();
    (0..n * n)
        .map(|p| {
            let (mut re, mut im) = (0.0, 0.0);
            for (prof, ph) in profiles.iter().zip(&phasors) {
                re += prof[p] * ph.0;
                im += prof[p] * ph.1;
            }
            re * re + im * im
        })
        .collect()
}

/// One `[n, n, 1]` specklegram per grid temperature. `seed` drives the noise.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Vec<SpecklegramSample>> {
    config.validate_structure()?;
    let n = config.image_size;
    let modes = draw_modes(config);
    let profiles: Vec<Vec<f64>> = modes
        .iter()
        .map(|m| {
            (0..n * n)
                .map(|p| {
                    let (x, y) = ((p % n) as f64 / n as f64, (p / n) as f64 / n as f64);
                    (m.kx * x + m.ky * y + m.psi).cos()
                })
                .collect()
        })
        .collect();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = (config.noise_std > 0.0).then(|| Normal::new(0.0, config.noise_std).unwrap());
    config
        .temperatures()
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let raw = Tensor::new(
                [n, n, 1],
                intensity(&modes, &profiles, n, t, config.fiber_length),
            )?;
            let mut img = min_max_normalize(&raw);
            if let Some(noise) = &noise {
                for v in img.data_mut() {
                    *v = (*v + noise.sample(&mut noise_rng)).clamp(0.0, 1.0);
                }
            }
            Ok(SpecklegramSample {
                image: img,
                temperature: t,
                source_id: format!("speckle_{i:04}"),
            })
        })
        .collect()
}

/// Zero-mean normalized cross-correlation of two equally sized images.
pub fn zncc(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    num / (va * vb).sqrt()
}
