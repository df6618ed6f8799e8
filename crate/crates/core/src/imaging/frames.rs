use serde::{Deserialize, Serialize};

use super::interpolate::{GridSpec, InterpolationPlan};
use super::montage::ElectrodeMontage;
use super::projection::project_azimuthal_equidistant;
use super::spectral::{Band, Periodogram};
use crate::error::{config_err, data_err, dim_err, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImagingConfig {
    pub sample_rate: f64,
    /// Samples per frame; frames are consecutive and non-overlapping.
    pub window_len: usize,
    pub n_frames: usize,
    pub bands: Vec<Band>,
    /// Side of the square image grid.
    pub grid_size: usize,
}

impl Default for ImagingConfig {
    fn default() -> Self {
        Self { sample_rate: 128.0, window_len: 128, n_frames: 7, bands: Band::defaults(), grid_size: 32 }
    }
}

/// One trial as `[t, bands, w, h]` band-power images.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiFrameEEGImage {
    pub frames: Tensor,
    pub label: Option<usize>,
}

impl MultiFrameEEGImage {
    pub fn new(frames: Tensor, label: Option<usize>) -> Result<Self> {
        if frames.ndim() != 4 {
            return Err(dim_err!("multi-frame image must be [t, c, w, h], got {:?}", frames.shape()));
        }
        Ok(Self { frames, label })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn n_channels(&self) -> usize {
        self.frames.shape()[1]
    }
}

/// Turns raw trials into multi-frame images for a fixed montage and
/// configuration. Projection, grid weights and FFT plan are built once.
#[derive(Debug)]
pub struct ImageBuilder {
    config: ImagingConfig,
    n_electrodes: usize,
    plan: InterpolationPlan,
    periodogram: Periodogram,
}

impl ImageBuilder {
    pub fn new(montage: &ElectrodeMontage, config: &ImagingConfig) -> Result<Self> {
        if config.n_frames == 0 {
            return Err(config_err!("n_frames must be at least 1"));
        }
        if config.bands.is_empty() {
            return Err(config_err!("at least one frequency band is required"));
        }
        if config.grid_size == 0 {
            return Err(config_err!("grid size must be positive"));
        }
        let periodogram = Periodogram::new(config.window_len, config.sample_rate)?;
        for band in &config.bands {
            periodogram.check_band(band)?;
        }
        let points = montage
            .electrodes()
            .iter()
            .map(|e| project_azimuthal_equidistant(e.position))
            .collect::<Result<Vec<_>>>()?;
        let grid = GridSpec::covering(&points, config.grid_size, config.grid_size);
        let plan = InterpolationPlan::new(&points, grid)?;
        Ok(Self { config: config.clone(), n_electrodes: montage.len(), plan, periodogram })
    }

    pub fn config(&self) -> &ImagingConfig {
        &self.config
    }

    /// `trial[e]` is the series recorded at montage electrode `e`. Only the
    /// first `n_frames · window_len` samples are used.
    pub fn build(&self, trial: &[Vec<f64>], label: Option<usize>) -> Result<MultiFrameEEGImage> {
        let cfg = &self.config;
        if trial.len() != self.n_electrodes {
            return Err(data_err!("trial has {} electrode series, montage has {}", trial.len(), self.n_electrodes));
        }
        let needed = cfg.n_frames * cfg.window_len;
        if let Some(short) = trial.iter().position(|s| s.len() < needed) {
            return Err(data_err!(
                "electrode {} series has {} samples, {} frames of {} need {}",
                short,
                trial[short].len(),
                cfg.n_frames,
                cfg.window_len,
                needed
            ));
        }
        let (nb, g) = (cfg.bands.len(), cfg.grid_size);
        let plane = g * g;
        let mut data = vec![0.0; cfg.n_frames * nb * plane];
        let mut powers = vec![vec![0.0; self.n_electrodes]; nb];
        for f in 0..cfg.n_frames {
            let span = f * cfg.window_len..(f + 1) * cfg.window_len;
            for (e, series) in trial.iter().enumerate() {
                let spectrum = self.periodogram.spectrum(&series[span.clone()]);
                for (b, band) in cfg.bands.iter().enumerate() {
                    powers[b][e] = self.periodogram.band_power_from_spectrum(&spectrum, band);
                }
            }
            for (b, values) in powers.iter().enumerate() {
                let start = (f * nb + b) * plane;
                self.plan.apply_into(values, &mut data[start..start + plane])?;
            }
        }
        let frames = Tensor::new(vec![cfg.n_frames, nb, g, g], data)?;
        MultiFrameEEGImage::new(frames, label)
    }
}

/// Convenience wrapper around [`ImageBuilder`] for a single trial.
pub fn build_multiframe(
    trial: &[Vec<f64>],
    montage: &ElectrodeMontage,
    config: &ImagingConfig,
    label: Option<usize>,
) -> Result<MultiFrameEEGImage> {
    ImageBuilder::new(montage, config)?.build(trial, label)
}
