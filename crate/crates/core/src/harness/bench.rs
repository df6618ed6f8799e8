//! One-to-one transfer over every ordered subject pair, baselines and result
//! files.
//!
//! Every method sees the same per-subject train/test split. The adapted
//! model is evaluated on the target's held-out split.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{info, warn};

use super::checkpoint::Checkpoint;
use super::train::{evaluate, measure_gap, pretrain_source, split, transfer_adapt, AdaptEpoch, TrainConfig};
use crate::error::{config_err, Result};
use crate::imaging::SubjectDomain;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    CsDasa,
    /// Single-layer discrepancy loss, no attention.
    NonAtt,
    /// Pretrained source model applied to the target as is.
    SourceOnly,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::CsDasa => "csdasa",
            Method::NonAtt => "nonatt",
            Method::SourceOnly => "source_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub target_id: String,
    pub source_id: String,
    pub seed: u64,
    pub accuracy: f64,
    pub final_ce: f64,
    pub final_mmd: f64,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub target_id: String,
    pub source_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub target_id: String,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    pub n_runs: usize,
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: Method,
    pub runs: Vec<RunRecord>,
    /// (target, source, epoch record); epoch 0 is the pre-update measurement.
    pub epochs: Vec<(String, String, AdaptEpoch)>,
    pub failures: Vec<Failure>,
    /// Target ids in dataset order.
    pub targets: Vec<String>,
}

impl MethodResult {
    pub fn summary(&self) -> Vec<SummaryRow> {
        summarize(&self.targets, &self.runs)
    }

    /// Mean over all completed runs.
    pub fn mean_accuracy(&self) -> f64 {
        self.runs.iter().map(|r| r.accuracy).sum::<f64>() / self.runs.len().max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub seed: u64,
    pub methods: Vec<MethodResult>,
}

impl ExperimentResult {
    pub fn method(&self, method: Method) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == method)
    }
}

/// Per-target mean and sample standard deviation over completed runs, in
/// run order.
pub fn summarize(targets: &[String], runs: &[RunRecord]) -> Vec<SummaryRow> {
    targets
        .iter()
        .map(|t| {
            let acc: Vec<f64> = runs.iter().filter(|r| &r.target_id == t).map(|r| r.accuracy).collect();
            let n = acc.len();
            let mean = if n == 0 { f64::NAN } else { acc.iter().sum::<f64>() / n as f64 };
            let std = if n < 2 { 0.0 } else { (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() };
            SummaryRow { target_id: t.clone(), mean, std, n_runs: n }
        })
        .collect()
}

struct Prepared<'a> {
    domains: &'a [SubjectDomain],
    /// (train, test) per subject.
    splits: Vec<(SubjectDomain, SubjectDomain)>,
}

impl<'a> Prepared<'a> {
    fn new(domains: &'a [SubjectDomain], seed: u64) -> Result<Self> {
        if domains.len() < 2 {
            return Err(config_err!("one-to-one transfer needs at least 2 subjects, got {}", domains.len()));
        }
        let splits = domains.iter().map(|d| split(d, seed)).collect::<Result<_>>()?;
        Ok(Self { domains, splits })
    }

    fn targets(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.subject_id.clone()).collect()
    }

    /// Ordered (source, target) index pairs, target-major.
    fn pairs(&self) -> Vec<(usize, usize)> {
        let n = self.domains.len();
        (0..n).flat_map(|t| (0..n).filter(move |&s| s != t).map(move |s| (s, t))).collect()
    }

    fn pretrain_all(&self, model: &ModelConfig, train: &TrainConfig, seed: u64) -> Vec<Result<Checkpoint>> {
        self.domains
            .iter()
            .map(|d| pretrain_source(d, model, train, seed).map(|o| o.checkpoint))
            .collect()
    }

    fn adapt_all(&self, method: Method, pretrained: &[Result<Checkpoint>], train: &TrainConfig, seed: u64) -> MethodResult {
        let mut result = MethodResult { method, runs: Vec::new(), epochs: Vec::new(), failures: Vec::new(), targets: self.targets() };
        for (s, t) in self.pairs() {
            let (sid, tid) = (&self.domains[s].subject_id, &self.domains[t].subject_id);
            let run = || -> Result<(RunRecord, Vec<AdaptEpoch>)> {
                let ckpt = pretrained[s].as_ref().map_err(|e| config_err!("pretraining {sid} failed: {e}"))?;
                let (src_train, _) = &self.splits[s];
                let (tgt_train, tgt_test) = &self.splits[t];
                let (ckpt, log, ce, mmd, epochs_run) = if method == Method::SourceOnly {
                    let gap = measure_gap(ckpt, src_train, tgt_train, train, seed)?;
                    (ckpt.clone(), vec![], ckpt.meta.final_ce, gap.mmd, 0)
                } else {
                    let out = transfer_adapt(ckpt, src_train, tgt_train, train, seed)?;
                    let mut log = vec![out.initial];
                    log.extend(&out.log);
                    let meta = &out.checkpoint.meta;
                    let (ce, mmd, n) = (meta.final_ce, meta.final_mmd.unwrap_or(out.initial.mmd), meta.epochs_run);
                    (out.checkpoint, log, ce, mmd, n)
                };
                let accuracy = evaluate(&ckpt, tgt_test)?.accuracy;
                let record = RunRecord {
                    target_id: tid.clone(),
                    source_id: sid.clone(),
                    seed,
                    accuracy,
                    final_ce: ce,
                    final_mmd: mmd,
                    epochs_run,
                };
                Ok((record, log))
            };
            match run() {
                Ok((record, log)) => {
                    info!("{} {sid}->{tid}: {:.2}%", method.name(), record.accuracy);
                    result.epochs.extend(log.into_iter().map(|e| (tid.clone(), sid.clone(), e)));
                    result.runs.push(record);
                }
                Err(e) => {
                    warn!("{} {sid}->{tid} failed: {e}", method.name());
                    result.failures.push(Failure { target_id: tid.clone(), source_id: sid.clone(), message: e.to_string() });
                }
            }
        }
        result
    }
}

/// Adapted transfer from every subject to every other subject.
pub fn run_one_to_one(domains: &[SubjectDomain], model: &ModelConfig, train: &TrainConfig, seed: u64) -> Result<MethodResult> {
    let prep = Prepared::new(domains, seed)?;
    let pretrained = prep.pretrain_all(model, train, seed);
    Ok(prep.adapt_all(Method::CsDasa, &pretrained, train, seed))
}

/// Source-only and no-attention baselines under the same protocol.
pub fn run_baselines(domains: &[SubjectDomain], model: &ModelConfig, train: &TrainConfig, seed: u64) -> Result<Vec<MethodResult>> {
    let prep = Prepared::new(domains, seed)?;
    let pretrained = prep.pretrain_all(model, train, seed);
    let nonatt_pretrained = prep.pretrain_all(&model.without_attention(), train, seed);
    Ok(vec![
        prep.adapt_all(Method::SourceOnly, &pretrained, train, seed),
        prep.adapt_all(Method::NonAtt, &nonatt_pretrained, train, seed),
    ])
}

/// All three methods; the adapted model and the source-only baseline share
/// one pretrained model per subject.
pub fn run_bench(domains: &[SubjectDomain], model: &ModelConfig, train: &TrainConfig, seed: u64) -> Result<ExperimentResult> {
    let prep = Prepared::new(domains, seed)?;
    let pretrained = prep.pretrain_all(model, train, seed);
    let nonatt_pretrained = prep.pretrain_all(&model.without_attention(), train, seed);
    let methods = vec![
        prep.adapt_all(Method::CsDasa, &pretrained, train, seed),
        prep.adapt_all(Method::NonAtt, &nonatt_pretrained, train, seed),
        prep.adapt_all(Method::SourceOnly, &pretrained, train, seed),
    ];
    Ok(ExperimentResult { seed, methods })
}

pub fn runs_csv(result: &MethodResult) -> String {
    let mut out = String::from("target_id,source_id,seed,accuracy,final_ce,final_mmd,epochs_run\n");
    for r in &result.runs {
        let _ = writeln!(out, "{},{},{},{},{},{},{}", r.target_id, r.source_id, r.seed, r.accuracy, r.final_ce, r.final_mmd, r.epochs_run);
    }
    out
}

pub fn summary_csv(result: &MethodResult) -> String {
    let mut out = String::from("target_id,mean,std,n_runs\n");
    for s in result.summary() {
        let _ = writeln!(out, "{},{},{},{}", s.target_id, s.mean, s.std, s.n_runs);
    }
    out
}

pub fn epochs_csv(result: &MethodResult, seed: u64) -> String {
    let mut out = String::from("target_id,source_id,seed,epoch,ce,mmd\n");
    for (t, s, e) in &result.epochs {
        let _ = writeln!(out, "{t},{s},{seed},{},{},{}", e.epoch, e.ce, e.mmd);
    }
    out
}

pub fn failures_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("method,target_id,source_id,error\n");
    for m in &result.methods {
        for f in &m.failures {
            let msg = f.message.replace(['\n', ','], " ");
            let _ = writeln!(out, "{},{},{},{}", m.method.name(), f.target_id, f.source_id, msg);
        }
    }
    out
}

/// Per-target `mean/std` for every method, one column per method.
pub fn summary_table(result: &ExperimentResult) -> String {
    let Some(first) = result.methods.first() else { return String::new() };
    let headers: Vec<&str> = result.methods.iter().map(|m| m.method.name()).collect();
    let summaries: Vec<Vec<SummaryRow>> = result.methods.iter().map(MethodResult::summary).collect();
    let cell = |s: &SummaryRow| if s.n_runs == 0 { "-".to_string() } else { format!("{:.1}/{:.1}", s.mean, s.std) };
    let mut rows: Vec<Vec<String>> = vec![std::iter::once("target".to_string()).chain(headers.iter().map(|h| h.to_string())).collect()];
    for (i, t) in first.targets.iter().enumerate() {
        rows.push(std::iter::once(t.clone()).chain(summaries.iter().map(|s| cell(&s[i]))).collect());
    }
    let mean_row = std::iter::once("mean".to_string())
        .chain(result.methods.iter().map(|m| if m.runs.is_empty() { "-".to_string() } else { format!("{:.1}", m.mean_accuracy()) }))
        .collect();
    rows.push(mean_row);
    let widths: Vec<usize> = (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r.iter().zip(&widths).enumerate().map(|(c, (v, w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") }).collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

/// Writes `{method}_runs.csv`, `{method}_summary.csv`, `{method}_epochs.csv`
/// (adapted methods), `failures.csv` and `table.txt` into `dir`.
pub fn write_results(dir: &Path, result: &ExperimentResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    for m in &result.methods {
        let name = m.method.name();
        fs::write(dir.join(format!("{name}_runs.csv")), runs_csv(m))?;
        fs::write(dir.join(format!("{name}_summary.csv")), summary_csv(m))?;
        if m.method != Method::SourceOnly {
            fs::write(dir.join(format!("{name}_epochs.csv")), epochs_csv(m, result.seed))?;
        }
    }
    fs::write(dir.join("failures.csv"), failures_csv(result))?;
    fs::write(dir.join("table.txt"), summary_table(result))?;
    Ok(())
}
