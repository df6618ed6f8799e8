use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Half-open frequency band `[lo, hi)` in Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

impl Band {
    pub fn new(name: &str, lo: f64, hi: f64) -> Self {
        Self { name: name.to_string(), lo, hi }
    }

    /// Theta, alpha and beta.
    pub fn defaults() -> Vec<Band> {
        vec![Band::new("theta", 4.0, 7.0), Band::new("alpha", 8.0, 13.0), Band::new("beta", 13.0, 30.0)]
    }
}

/// Hann-windowed periodogram for a fixed segment length.
pub struct Periodogram {
    len: usize,
    sample_rate: f64,
    window: Vec<f64>,
    /// Σ w², the window power normaliser.
    window_power: f64,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Periodogram {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Periodogram").field("len", &self.len).field("sample_rate", &self.sample_rate).finish()
    }
}

impl Periodogram {
    pub fn new(len: usize, sample_rate: f64) -> Result<Self> {
        if len < 2 {
            return Err(config_err!("periodogram segment needs at least 2 samples, got {len}"));
        }
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(config_err!("sample rate must be positive, got {sample_rate}"));
        }
        let window: Vec<f64> = (0..len).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos()).collect();
        let window_power = window.iter().map(|w| w * w).sum();
        let fft = FftPlanner::new().plan_fft_forward(len);
        Ok(Self { len, sample_rate, window, window_power, fft })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Checks that `band` is below Nyquist, spans at least one frequency bin
    /// and that the segment holds two cycles of its lower edge.
    pub fn check_band(&self, band: &Band) -> Result<()> {
        let nyquist = self.sample_rate / 2.0;
        if !(band.lo >= 0.0 && band.lo < band.hi) {
            return Err(config_err!("band {:?} has invalid edges [{}, {})", band.name, band.lo, band.hi));
        }
        if band.hi > nyquist {
            return Err(config_err!(
                "band {:?} upper edge {} Hz exceeds Nyquist {} Hz",
                band.name,
                band.hi,
                nyquist
            ));
        }
        let duration = self.len as f64 / self.sample_rate;
        if band.lo > 0.0 && duration * band.lo < 2.0 {
            return Err(config_err!(
                "window of {} samples holds fewer than 2 cycles of {} Hz",
                self.len,
                band.lo
            ));
        }
        if self.bins(band).is_empty() {
            return Err(config_err!("band {:?} contains no frequency bin", band.name));
        }
        Ok(())
    }

    fn bins(&self, band: &Band) -> std::ops::Range<usize> {
        let step = self.sample_rate / self.len as f64;
        let first = (band.lo / step).ceil() as usize;
        let mut last = (band.hi / step).ceil() as usize;
        last = last.min(self.len / 2 + 1);
        first.min(last)..last
    }

    /// One-sided power spectral density of `segment`.
    pub fn spectrum(&self, segment: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = segment
            .iter()
            .zip(&self.window)
            .map(|(x, w)| Complex::new(x * w, 0.0))
            .collect();
        self.fft.process(&mut buf);
        let scale = 1.0 / (self.sample_rate * self.window_power);
        (0..=self.len / 2)
            .map(|k| {
                let edge = k == 0 || (self.len % 2 == 0 && k == self.len / 2);
                let p = buf[k].norm_sqr() * scale;
                if edge {
                    p
                } else {
                    2.0 * p
                }
            })
            .collect()
    }

    /// Mean spectral power over the bins of `band`.
    pub fn band_power_from_spectrum(&self, spectrum: &[f64], band: &Band) -> f64 {
        let bins = self.bins(band);
        let n = bins.len() as f64;
        spectrum[bins].iter().sum::<f64>() / n
    }
}

/// Band power of each electrode's signal. Every signal must have the same
/// length, which is used as the periodogram segment.
pub fn band_power(signals: &[Vec<f64>], band: &Band, sample_rate: f64) -> Result<Vec<f64>> {
    let len = signals.first().map_or(0, Vec::len);
    if signals.iter().any(|s| s.len() != len) {
        return Err(config_err!("signals must share one length"));
    }
    let pg = Periodogram::new(len, sample_rate)?;
    pg.check_band(band)?;
    Ok(signals
        .iter()
        .map(|s| pg.band_power_from_spectrum(&pg.spectrum(s), band))
        .collect())
}
