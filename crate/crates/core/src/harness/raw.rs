//! Raw electrode recordings in a whitespace-separated text format, one line
//! per (trial, electrode):
//!
//! ```text
//! subject trial label electrode v1 v2 ... vT
//! ```
//!
//! `label` is a class id, or `-` for an unlabeled trial. Every trial must
//! list each montage electrode exactly once.

use std::collections::BTreeMap;

use crate::error::{data_err, Result};
use crate::imaging::{ElectrodeMontage, ImageBuilder, ImagingConfig, MultiFrameEEGImage, SubjectDomain};

#[derive(Debug, Default)]
struct RawTrial {
    label: Option<usize>,
    series: BTreeMap<String, Vec<f64>>,
}

/// Builds one domain per subject, subjects and trials in order of first
/// appearance. Labeled trials are placed before unlabeled ones.
pub fn build_domains_from_text(text: &str, montage: &ElectrodeMontage, config: &ImagingConfig) -> Result<Vec<SubjectDomain>> {
    let builder = ImageBuilder::new(montage, config)?;
    let mut subjects: Vec<(String, Vec<(String, RawTrial)>)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let (Some(subject), Some(trial), Some(label), Some(electrode)) =
            (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(data_err!("line {}: expected `subject trial label electrode values...`", lineno + 1));
        };
        let label = match label {
            "-" => None,
            l => Some(l.parse::<usize>().map_err(|_| data_err!("line {}: bad label {l:?}", lineno + 1))?),
        };
        let values = fields
            .map(|v| v.parse::<f64>().map_err(|_| data_err!("line {}: bad sample value {v:?}", lineno + 1)))
            .collect::<Result<Vec<f64>>>()?;
        let si = match subjects.iter().position(|(s, _)| s == subject) {
            Some(i) => i,
            None => {
                subjects.push((subject.to_string(), Vec::new()));
                subjects.len() - 1
            }
        };
        let trials = &mut subjects[si].1;
        let ti = match trials.iter().position(|(t, _)| t == trial) {
            Some(i) => i,
            None => {
                trials.push((trial.to_string(), RawTrial { label, ..RawTrial::default() }));
                trials.len() - 1
            }
        };
        let rt = &mut trials[ti].1;
        if rt.label != label {
            return Err(data_err!("line {}: trial {trial:?} of {subject:?} has inconsistent labels", lineno + 1));
        }
        if rt.series.insert(electrode.to_string(), values).is_some() {
            return Err(data_err!("line {}: electrode {electrode:?} repeated in trial {trial:?}", lineno + 1));
        }
    }

    let mut domains = Vec::with_capacity(subjects.len());
    for (subject, trials) in subjects {
        let mut labeled = Vec::new();
        let mut unlabeled = Vec::new();
        for (trial, mut rt) in trials {
            let series = montage
                .electrodes()
                .iter()
                .map(|e| {
                    rt.series
                        .remove(&e.name)
                        .ok_or_else(|| data_err!("trial {trial:?} of {subject:?} lacks electrode {:?}", e.name))
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some(extra) = rt.series.keys().next() {
                return Err(data_err!("trial {trial:?} of {subject:?} has unknown electrode {extra:?}"));
            }
            let image: MultiFrameEEGImage = builder.build(&series, rt.label)?;
            if rt.label.is_some() {
                labeled.push(image);
            } else {
                unlabeled.push(image);
            }
        }
        labeled.extend(unlabeled);
        domains.push(SubjectDomain::new(subject, labeled)?);
    }
    if domains.is_empty() {
        return Err(data_err!("no trials found"));
    }
    Ok(domains)
}
