use log::warn;
use serde::{Deserialize, Serialize};

use super::frames::MultiFrameEEGImage;
use crate::error::{config_err, data_err, dim_err, Result};
use crate::numerics::Tensor;

/// Workload classes.
pub const N_CLASSES: usize = 4;
/// Channels whose standard deviation falls below this are only centred.
pub const MIN_STD: f64 = 1e-12;

/// All samples of one subject. Labels, where present, form a prefix: the
/// first `labeled_count` samples carry labels and the rest do not.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectDomain {
    pub subject_id: String,
    samples: Vec<MultiFrameEEGImage>,
    labeled: usize,
}

impl SubjectDomain {
    pub fn new(subject_id: impl Into<String>, samples: Vec<MultiFrameEEGImage>) -> Result<Self> {
        let subject_id = subject_id.into();
        if samples.is_empty() {
            return Err(data_err!("subject {subject_id:?} has no samples"));
        }
        let shape = samples[0].frames.shape().to_vec();
        let mut labeled = 0;
        for (k, s) in samples.iter().enumerate() {
            if s.frames.shape() != shape.as_slice() {
                return Err(dim_err!(
                    "subject {subject_id:?} sample {k} has shape {:?}, expected {:?}",
                    s.frames.shape(),
                    shape
                ));
            }
            match s.label {
                Some(y) if y >= N_CLASSES => {
                    return Err(data_err!("subject {subject_id:?} sample {k} has label {y} outside 0..{N_CLASSES}"));
                }
                Some(_) if labeled == k => labeled += 1,
                Some(_) => {
                    return Err(data_err!("subject {subject_id:?} sample {k} is labeled after an unlabeled sample"));
                }
                None => {}
            }
        }
        Ok(Self { subject_id, samples, labeled })
    }

    pub fn samples(&self) -> &[MultiFrameEEGImage] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labeled_count(&self) -> usize {
        self.labeled
    }

    pub fn unlabeled_count(&self) -> usize {
        self.samples.len() - self.labeled
    }

    /// `[t, c, w, h]` of every sample.
    pub fn sample_shape(&self) -> &[usize] {
        self.samples[0].frames.shape()
    }

    /// Labels of the labeled prefix.
    pub fn labels(&self) -> Vec<usize> {
        self.samples[..self.labeled].iter().map(|s| s.label.unwrap_or(0)).collect()
    }

    /// Keeps labels on the first `n_labeled` samples and drops the rest.
    pub fn with_labeled_count(&self, n_labeled: usize) -> Result<Self> {
        if n_labeled > self.labeled {
            return Err(config_err!(
                "requested {n_labeled} labeled samples, subject {:?} has {}",
                self.subject_id,
                self.labeled
            ));
        }
        let samples = self
            .samples
            .iter()
            .enumerate()
            .map(|(k, s)| MultiFrameEEGImage { frames: s.frames.clone(), label: s.label.filter(|_| k < n_labeled) })
            .collect();
        Ok(Self { subject_id: self.subject_id.clone(), samples, labeled: n_labeled })
    }

    /// Samples at `indices`, in that order. Label prefix order is the
    /// caller's responsibility.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let samples = indices
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| data_err!("sample index {i} out of range for subject {:?}", self.subject_id))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.subject_id.clone(), samples)
    }
}

/// Per band-channel mean and standard deviation, pooled over samples,
/// frames and pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn fit(domain: &SubjectDomain) -> Result<Self> {
        if domain.is_empty() {
            return Err(data_err!("cannot fit channel statistics on an empty domain"));
        }
        let shape = domain.sample_shape();
        let (t, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let count = (domain.len() * t * plane) as f64;
        let mut mean = vec![0.0; c];
        for s in domain.samples() {
            for (k, v) in s.frames.data().iter().enumerate() {
                mean[(k / plane) % c] += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for s in domain.samples() {
            for (k, v) in s.frames.data().iter().enumerate() {
                let ch = (k / plane) % c;
                var[ch] += (v - mean[ch]).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / count).sqrt()).collect();
        Ok(Self { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Standardises a `[.., c, w, h]` tensor in place.
    pub fn apply(&self, x: &mut Tensor) -> Result<()> {
        let nd = x.ndim();
        if nd < 3 || x.shape()[nd - 3] != self.mean.len() {
            return Err(dim_err!("statistics cover {} channels, tensor is {:?}", self.mean.len(), x.shape()));
        }
        let c = self.mean.len();
        let plane = x.shape()[nd - 2] * x.shape()[nd - 1];
        for (k, v) in x.data_mut().iter_mut().enumerate() {
            let ch = (k / plane) % c;
            *v -= self.mean[ch];
            if self.std[ch] >= MIN_STD {
                *v /= self.std[ch];
            }
        }
        Ok(())
    }
}

/// Standardises every sample with `stats`, which should come from the
/// source domain so that target statistics never enter training.
pub fn normalize_images(domain: &SubjectDomain, stats: &ChannelStats) -> Result<SubjectDomain> {
    for (ch, s) in stats.std.iter().enumerate() {
        if *s < MIN_STD {
            warn!("channel {ch} has zero variance; centring only");
        }
    }
    let samples = domain
        .samples()
        .iter()
        .map(|s| {
            let mut frames = s.frames.clone();
            stats.apply(&mut frames)?;
            Ok(MultiFrameEEGImage { frames, label: s.label })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SubjectDomain { subject_id: domain.subject_id.clone(), samples, labeled: domain.labeled })
}
