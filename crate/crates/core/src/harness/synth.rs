//! Synthetic multi-subject band-power images.
//!
//! Each class has a fixed spatial pattern per band: a Gaussian blob whose
//! amplitude rises or falls with the class index and whose position moves
//! slightly with it. Every subject sees the same class patterns through a
//! subject-specific covariate shift: blob positions rotated about the grid
//! centre, each band scaled by a gain and offset by a bias.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::stream_seed;
use crate::error::{config_err, Result};
use crate::imaging::{MultiFrameEEGImage, SubjectDomain, N_CLASSES};
use crate::numerics::Tensor;

/// Standard deviations of the per-subject shift draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftMagnitudes {
    /// Log-gain per band.
    pub gain: f64,
    /// Rotation of the spatial patterns, radians.
    pub rotation: f64,
    /// Additive offset per band.
    pub bias: f64,
}

impl ShiftMagnitudes {
    pub fn none() -> Self {
        Self { gain: 0.0, rotation: 0.0, bias: 0.0 }
    }

    pub fn low() -> Self {
        Self { gain: 0.1, rotation: 0.05, bias: 0.2 }
    }

    pub fn medium() -> Self {
        Self { gain: 0.2, rotation: 0.1, bias: 0.5 }
    }

    pub fn high() -> Self {
        Self { gain: 0.35, rotation: 0.2, bias: 1.0 }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(Self::none()),
            "low" => Ok(Self::low()),
            "medium" => Ok(Self::medium()),
            "high" => Ok(Self::high()),
            other => Err(config_err!("unknown shift level {other:?} (none, low, medium, high)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_per_subject: usize,
    pub frames: usize,
    pub bands: usize,
    pub grid: usize,
    pub shift: ShiftMagnitudes,
    /// Per-pixel Gaussian noise.
    pub noise: f64,
    /// Per-sample log-amplitude jitter.
    pub jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 4,
            n_per_subject: 400,
            frames: 3,
            bands: 3,
            grid: 8,
            shift: ShiftMagnitudes::medium(),
            noise: 0.3,
            jitter: 0.25,
        }
    }
}

/// Blob centre, base amplitude and per-class amplitude step of each band.
fn band_profile(band: usize) -> ((f64, f64), f64, f64) {
    match band % 3 {
        0 => ((0.0, 0.45), 1.0, 0.45),
        1 => ((0.0, -0.45), 2.4, -0.45),
        _ => ((0.35, 0.0), 1.2, 0.25),
    }
}

#[derive(Debug, Clone)]
struct SubjectShift {
    rotation: f64,
    gain: Vec<f64>,
    bias: Vec<f64>,
}

fn draw_shift(rng: &mut ChaCha8Rng, bands: usize, m: &ShiftMagnitudes) -> SubjectShift {
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    SubjectShift {
        rotation: m.rotation * std.sample(rng),
        gain: (0..bands).map(|_| (m.gain * std.sample(rng)).exp()).collect(),
        bias: (0..bands).map(|_| m.bias * std.sample(rng)).collect(),
    }
}

fn sample_image(rng: &mut ChaCha8Rng, cfg: &SynthConfig, class: usize, shift: &SubjectShift) -> Tensor {
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let g = cfg.grid;
    let mut data = Vec::with_capacity(cfg.frames * cfg.bands * g * g);
    let level = class as f64 - (N_CLASSES as f64 - 1.0) / 2.0;
    let amp_jitter: Vec<f64> = (0..cfg.bands).map(|_| (cfg.jitter * std.sample(rng)).exp()).collect();
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let (sin_r, cos_r) = shift.rotation.sin_cos();
    for f in 0..cfg.frames {
        let temporal = 1.0 + 0.2 * (std::f64::consts::TAU * f as f64 / cfg.frames as f64 + phase).sin();
        for b in 0..cfg.bands {
            let ((cx, cy), base, step) = band_profile(b);
            let cx = cx + 0.12 * level;
            let (cx, cy) = (cos_r * cx - sin_r * cy, sin_r * cx + cos_r * cy);
            let amp = (base + step * level).max(0.1) * amp_jitter[b] * temporal;
            for i in 0..g {
                for j in 0..g {
                    let axis = |k: usize| if g == 1 { 0.0 } else { -1.0 + 2.0 * k as f64 / (g - 1) as f64 };
                    let (x, y) = (axis(j), -axis(i));
                    let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                    let clean = amp * (-d2 / (2.0 * 0.35f64.powi(2))).exp();
                    let v = shift.gain[b] * (clean + cfg.noise * std.sample(rng)) + shift.bias[b];
                    // Stored values are f32-exact so a dataset file reproduces them.
                    data.push(v as f32 as f64);
                }
            }
        }
    }
    Tensor::new(vec![cfg.frames, cfg.bands, g, g], data).expect("finite synthetic data")
}

/// Subjects `S1..Sn`, classes balanced and interleaved, all labeled.
pub fn synth_subjects(cfg: &SynthConfig, seed: u64) -> Result<Vec<SubjectDomain>> {
    if cfg.n_subjects < 2 {
        return Err(config_err!("need at least 2 subjects, got {}", cfg.n_subjects));
    }
    if cfg.n_per_subject == 0 || cfg.frames == 0 || cfg.bands == 0 || cfg.grid == 0 {
        return Err(config_err!("synthetic sizes must be positive"));
    }
    (0..cfg.n_subjects)
        .map(|s| {
            let id = format!("S{}", s + 1);
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &id, "synth"));
            let shift = draw_shift(&mut rng, cfg.bands, &cfg.shift);
            let samples = (0..cfg.n_per_subject)
                .map(|k| {
                    let class = k % N_CLASSES;
                    MultiFrameEEGImage::new(sample_image(&mut rng, cfg, class, &shift), Some(class))
                })
                .collect::<Result<Vec<_>>>()?;
            SubjectDomain::new(id, samples)
        })
        .collect()
}
