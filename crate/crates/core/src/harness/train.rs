//! Source pretraining, freeze-and-adapt transfer and evaluation.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta, Stage};
use super::stream_seed;
use crate::error::{config_err, data_err, Error, Result};
use crate::imaging::{normalize_images, ChannelStats, SubjectDomain, N_CLASSES};
use crate::losses::cross_entropy_var;
use crate::model::{Branch, CsDasa, ModelConfig};
use crate::numerics::{Adam, AdamConfig, Tape, Tensor, Var};

/// Fraction of each class held out for testing.
pub const TEST_FRACTION: f64 = 0.2;

/// Samples per inference chunk.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_pretrain: usize,
    pub epochs_adapt: usize,
    pub lr: f64,
    pub batch: usize,
    /// Pretraining stops after this many epochs without a validation gain.
    pub patience: usize,
    /// Labeled target samples visible during adaptation.
    pub n_labeled: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs_pretrain: 100, epochs_adapt: 50, lr: 1e-4, batch: 8, patience: 10, n_labeled: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(config_err!("batch must be at least 2, got {}", self.batch));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("learning rate must be positive, got {}", self.lr));
        }
        if self.epochs_pretrain == 0 {
            return Err(config_err!("epochs_pretrain must be positive"));
        }
        Ok(())
    }

    fn adam(&self) -> Adam {
        Adam::new(AdamConfig { lr: self.lr, ..AdamConfig::default() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub ce: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<PretrainEpoch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptEpoch {
    pub epoch: usize,
    pub ce: f64,
    pub mmd: f64,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub checkpoint: Checkpoint,
    /// Losses over one pass of adaptation batches before any update.
    pub initial: AdaptEpoch,
    pub log: Vec<AdaptEpoch>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Percent correct, in `[0, 100]`.
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: [[usize; N_CLASSES]; N_CLASSES],
    pub predictions: Vec<usize>,
}

/// Seeded stratified train/test split. Each class (and the unlabeled pool)
/// contributes `round(TEST_FRACTION · count)` test samples; both parts keep
/// the original sample order.
pub fn split(domain: &SubjectDomain, seed: u64) -> Result<(SubjectDomain, SubjectDomain)> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &domain.subject_id, "split"));
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); N_CLASSES + 1];
    for (i, s) in domain.samples().iter().enumerate() {
        pools[s.label.unwrap_or(N_CLASSES)].push(i);
    }
    let mut is_test = vec![false; domain.len()];
    for pool in &mut pools {
        pool.shuffle(&mut rng);
        let k = (TEST_FRACTION * pool.len() as f64).round() as usize;
        for &i in &pool[..k] {
            is_test[i] = true;
        }
    }
    let (test, train): (Vec<usize>, Vec<usize>) = (0..domain.len()).partition(|&i| is_test[i]);
    if train.is_empty() || test.is_empty() {
        return Err(data_err!("subject {:?} has too few samples ({}) to split", domain.subject_id, domain.len()));
    }
    Ok((domain.subset(&train)?, domain.subset(&test)?))
}

fn batch_tensor(domain: &SubjectDomain, idx: &[usize]) -> Result<Tensor> {
    let items: Vec<Tensor> = idx.iter().map(|&i| domain.samples()[i].frames.clone()).collect();
    Tensor::stack(&items)
}

fn batch_labels(domain: &SubjectDomain, idx: &[usize]) -> Result<Vec<usize>> {
    idx.iter()
        .map(|&i| domain.samples()[i].label.ok_or_else(|| data_err!("sample {i} of {:?} is unlabeled", domain.subject_id)))
        .collect()
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn check_shape(model: &ModelConfig, domain: &SubjectDomain) -> Result<()> {
    if domain.sample_shape() != model.input_shape() {
        return Err(config_err!(
            "subject {:?} has samples shaped {:?}, model expects {:?}",
            domain.subject_id,
            domain.sample_shape(),
            model.input_shape()
        ));
    }
    Ok(())
}

fn finite_or_fail(value: f64, step: usize, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Training { step, message: format!("{what} is {value}") })
    }
}

/// Forward/backward/update for one labeled source batch through the source
/// branch. Sample `i` attends to sample `i + 1` of the same batch.
fn pretrain_step(model: &mut CsDasa, adam: &mut Adam, x: &Tensor, labels: &[usize], step: usize) -> Result<(f64, Vec<usize>, Tensor)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let f = model.encode(&mut tape, xv)?;
    let feats = model.branch_forward(&mut tape, Branch::Source, f)?;
    let main = *feats.last().expect("non-empty branch");
    let counter = model.config.attention.then(|| roll_batch(&mut tape, main)).transpose()?;
    let (_, logits) = model.head(&mut tape, main, counter)?;
    let ce = cross_entropy_var(&mut tape, logits, labels)?;
    let loss = tape.value(ce).item()?;
    finite_or_fail(loss, step, "cross-entropy")?;
    let grads = tape.backward(ce)?;
    let g = model.store.collect_grads(&tape, &grads);
    adam.step(&mut model.store, &g);
    Ok((loss, argmax_rows(tape.value(logits)), tape.value(main).clone()))
}

/// Rows shifted up by one, the first row moving to the end.
fn roll_batch(tape: &mut Tape, v: Var) -> Result<Var> {
    let n = tape.shape(v)[0];
    if n < 2 {
        return Ok(v);
    }
    let head = tape.narrow(v, 0, 1, n - 1)?;
    let tail = tape.narrow(v, 0, 0, 1)?;
    tape.concat(&[head, tail], 0)
}

/// Fixed-size batches over a seeded shuffle; a trailing partial batch is
/// dropped unless it is the only one.
fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    if n < batch {
        return vec![order];
    }
    order.chunks_exact(batch).map(<[usize]>::to_vec).collect()
}

/// Trains the whole network on source cross-entropy alone, holding out a
/// stratified 20% of `domain` for validation and early stopping.
pub fn pretrain_source(domain: &SubjectDomain, model_config: &ModelConfig, train: &TrainConfig, seed: u64) -> Result<PretrainOutcome> {
    train.validate()?;
    model_config.validate()?;
    check_shape(model_config, domain)?;
    if domain.unlabeled_count() > 0 {
        return Err(data_err!("source subject {:?} has {} unlabeled samples", domain.subject_id, domain.unlabeled_count()));
    }
    let (train_split, val_split) = split(domain, seed)?;
    let stats = ChannelStats::fit(&train_split)?;
    let train_set = normalize_images(&train_split, &stats)?;
    let val_set = normalize_images(&val_split, &stats)?;

    let id = &domain.subject_id;
    let mut model = CsDasa::new(model_config.clone(), stream_seed(seed, id, "init"))?;
    let mut adam = train.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, id, "pretrain"));

    let mut best: Option<(f64, CsDasa, Option<Tensor>, PretrainEpoch)> = None;
    let mut log = Vec::new();
    let mut since_best = 0;
    let mut step = 0;
    for epoch in 1..=train.epochs_pretrain {
        let mut last_batch = None;
        let (mut ce_sum, mut correct, mut seen) = (0.0, 0, 0);
        let batches = epoch_batches(train_set.len(), train.batch, &mut rng);
        for idx in &batches {
            step += 1;
            let x = batch_tensor(&train_set, idx)?;
            let labels = batch_labels(&train_set, idx)?;
            let (ce, pred, feats) = pretrain_step(&mut model, &mut adam, &x, &labels, step)?;
            last_batch = Some(feats);
            ce_sum += ce;
            correct += pred.iter().zip(&labels).filter(|(p, y)| p == y).count();
            seen += labels.len();
        }
        let reference = last_batch.filter(|_| model.config.attention);
        let val = evaluate_model(&model, &val_set, Branch::Source, reference.as_ref())?;
        let record = PretrainEpoch {
            epoch,
            ce: ce_sum / batches.len() as f64,
            train_accuracy: 100.0 * correct as f64 / seen as f64,
            val_accuracy: val.accuracy,
        };
        debug!("pretrain {id} epoch {epoch}: ce {:.4} train {:.1}% val {:.1}%", record.ce, record.train_accuracy, record.val_accuracy);
        log.push(record);
        // A tie keeps the newer weights but does not reset patience.
        let best_val = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.0);
        if record.val_accuracy >= best_val {
            best = Some((record.val_accuracy, model.clone(), reference, record));
        }
        if record.val_accuracy > best_val {
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= train.patience {
                break;
            }
        }
    }
    let (_, mut model, reference, record) = best.expect("at least one epoch");
    model.sync_target_from_source();
    info!("pretrained {id}: {} epochs, best val {:.1}% at epoch {}", log.len(), record.val_accuracy, record.epoch);
    let meta = CheckpointMeta {
        stage: Stage::Pretrained,
        source_id: id.clone(),
        target_id: None,
        seed,
        epochs_run: log.len(),
        train_accuracy: record.train_accuracy,
        val_accuracy: record.val_accuracy,
        final_ce: record.ce,
        final_mmd: None,
    };
    Ok(PretrainOutcome { checkpoint: Checkpoint { model, stats, reference, meta }, log })
}

/// Endless reshuffled index stream over `n` samples.
struct CyclicSampler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl CyclicSampler {
    fn new(n: usize, seed: u64) -> Self {
        Self { n, order: Vec::new(), pos: 0, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Encoder outputs of every sample, in order. Valid while the encoder is
/// frozen.
fn encode_all(model: &CsDasa, domain: &SubjectDomain) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(domain.len());
    let idx: Vec<usize> = (0..domain.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let enc = model.encode_values(&batch_tensor(domain, chunk)?)?;
        for k in 0..chunk.len() {
            out.push(enc.index_leading(k)?);
        }
    }
    Ok(out)
}

fn gather(items: &[Tensor], idx: &[usize]) -> Result<Tensor> {
    let picked: Vec<Tensor> = idx.iter().map(|&i| items[i].clone()).collect();
    Tensor::stack(&picked)
}

struct AdaptData {
    source_enc: Vec<Tensor>,
    source_labels: Vec<usize>,
    target_enc: Vec<Tensor>,
    /// Labels of the first `n_labeled` target samples only.
    target_labels: Vec<usize>,
}

struct StepOutput {
    total: f64,
    ce: f64,
    mmd: f64,
    source_feats: Tensor,
}

/// One joint step on a paired batch. With `update == false` only the
/// losses are measured.
fn adapt_step(model: &mut CsDasa, adam: &mut Adam, data: &AdaptData, si: &[usize], ti: &[usize], update: bool, step: usize) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let fs = tape.constant(gather(&data.source_enc, si)?);
    let ft = tape.constant(gather(&data.target_enc, ti)?);
    let artifacts = model.forward_pair_encoded_with(&mut tape, fs, ft, true)?;
    let main = artifacts.layer_features.last().expect("non-empty branch").0;
    let source_feats = tape.value(main).clone();
    let labels: Vec<usize> = si.iter().map(|&i| data.source_labels[i]).collect();
    let (mut total, ce, mmd) = model.joint_loss(&mut tape, &artifacts, &labels)?;

    let labeled: Vec<usize> = ti.iter().copied().filter(|&i| i < data.target_labels.len()).collect();
    if !labeled.is_empty() {
        let fl = tape.constant(gather(&data.target_enc, &labeled)?);
        let reference = model.config.attention.then_some(&source_feats);
        let logits = model.classify_encoded(&mut tape, fl, Branch::Target, reference)?;
        let y: Vec<usize> = labeled.iter().map(|&i| data.target_labels[i]).collect();
        let target_ce = cross_entropy_var(&mut tape, logits, &y)?;
        total = tape.add(total, target_ce)?;
    }

    let out = StepOutput { total: tape.value(total).item()?, ce: tape.value(ce).item()?, mmd: tape.value(mmd).item()?, source_feats };
    finite_or_fail(out.total, step, "joint loss")?;
    if update {
        let grads = tape.backward(total)?;
        let g = model.store.collect_grads(&tape, &grads);
        adam.step(&mut model.store, &g);
    }
    Ok(out)
}

struct AdaptPass<'a> {
    data: &'a AdaptData,
    steps: usize,
    batch: usize,
    samplers: (CyclicSampler, CyclicSampler),
}

impl AdaptPass<'_> {
    /// One epoch of paired batches; returns mean losses and the source
    /// features of the last batch.
    fn run(&mut self, model: &mut CsDasa, adam: &mut Adam, epoch: usize, update: bool) -> Result<(AdaptEpoch, Option<Tensor>)> {
        let mut last_batch = None;
        let (mut ce, mut mmd) = (0.0, 0.0);
        for k in 0..self.steps {
            let si = self.samplers.0.take(self.batch);
            let ti = self.samplers.1.take(self.batch);
            let out = adapt_step(model, adam, self.data, &si, &ti, update, epoch * self.steps + k)?;
            ce += out.ce;
            mmd += out.mmd;
            last_batch = Some(out.source_feats);
        }
        let n = self.steps as f64;
        Ok((AdaptEpoch { epoch, ce: ce / n, mmd: mmd / n }, last_batch.filter(|_| model.config.attention)))
    }
}

/// Freezes the shared encoder and fine-tunes the subject-specific branches
/// and classifier on source cross-entropy plus the weighted discrepancy
/// between paired source and target batches. Target labels beyond the first
/// `train.n_labeled` are never read.
pub fn transfer_adapt(pretrained: &Checkpoint, source: &SubjectDomain, target: &SubjectDomain, train: &TrainConfig, seed: u64) -> Result<AdaptOutcome> {
    train.validate()?;
    let cfg = &pretrained.model.config;
    check_shape(cfg, source)?;
    check_shape(cfg, target)?;
    if train.n_labeled > target.len() {
        return Err(config_err!("n_labeled {} exceeds target size {}", train.n_labeled, target.len()));
    }
    let target = target.with_labeled_count(train.n_labeled)?;
    let source_set = normalize_images(source, &pretrained.stats)?;
    let target_set = normalize_images(&target, &pretrained.stats)?;

    let mut model = pretrained.model.clone();
    model.set_shared_frozen(true);
    let data = AdaptData {
        source_enc: encode_all(&model, &source_set)?,
        source_labels: source_set.labels(),
        target_enc: encode_all(&model, &target_set)?,
        target_labels: target_set.labels(),
    };
    if data.source_labels.len() != source_set.len() {
        return Err(data_err!("source subject {:?} has unlabeled samples", source.subject_id));
    }

    let (sid, tid) = (&source.subject_id, &target.subject_id);
    let (ns, nt) = (source_set.len(), target_set.len());
    let bs = train.batch.min(ns).min(nt);
    let steps = (ns.max(nt) / bs).max(1);
    let samplers = || (CyclicSampler::new(ns, stream_seed(seed, sid, "adapt")), CyclicSampler::new(nt, stream_seed(seed, tid, "adapt")));
    let mut adam = train.adam();
    let mut pass = AdaptPass { data: &data, steps, batch: bs, samplers: samplers() };

    let (initial, initial_ref) = pass.run(&mut model, &mut adam, 0, false)?;
    // Training replays the batch stream from its start.
    pass.samplers = samplers();
    let mut log = Vec::with_capacity(train.epochs_adapt);
    let mut reference = initial_ref;
    for epoch in 1..=train.epochs_adapt {
        let (record, r) = pass.run(&mut model, &mut adam, epoch, true)?;
        debug!("adapt {sid}->{tid} epoch {epoch}: ce {:.4} mmd {:.5}", record.ce, record.mmd);
        log.push(record);
        reference = r;
    }
    model.set_shared_frozen(false);
    let last = log.last().copied().unwrap_or(initial);
    if !log.is_empty() {
        info!("adapted {sid}->{tid}: mmd {:.5} -> {:.5}", initial.mmd, last.mmd);
    }
    let meta = CheckpointMeta {
        stage: Stage::Adapted,
        source_id: sid.clone(),
        target_id: Some(tid.clone()),
        seed,
        epochs_run: log.len(),
        train_accuracy: pretrained.meta.train_accuracy,
        val_accuracy: pretrained.meta.val_accuracy,
        final_ce: last.ce,
        final_mmd: Some(last.mmd),
    };
    let checkpoint = Checkpoint { model, stats: pretrained.stats.clone(), reference, meta };
    Ok(AdaptOutcome { checkpoint, initial, log })
}

fn evaluate_model(model: &CsDasa, domain: &SubjectDomain, branch: Branch, reference: Option<&Tensor>) -> Result<Evaluation> {
    let labels = domain.labels();
    if labels.len() != domain.len() || labels.is_empty() {
        return Err(data_err!("evaluation subject {:?} must be fully labeled and non-empty", domain.subject_id));
    }
    let idx: Vec<usize> = (0..domain.len()).collect();
    let mut predictions = Vec::with_capacity(domain.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let logits = model.forward_eval(&batch_tensor(domain, chunk)?, branch, reference)?;
        predictions.extend(argmax_rows(&logits));
    }
    let correct = predictions.iter().zip(&labels).filter(|(p, y)| p == y).count();
    let mut confusion = [[0; N_CLASSES]; N_CLASSES];
    for (&y, &p) in labels.iter().zip(&predictions) {
        confusion[y][p] += 1;
    }
    Ok(Evaluation { accuracy: 100.0 * correct as f64 / labels.len() as f64, confusion, predictions })
}

/// Accuracy of the checkpoint's inference branch on a labeled domain,
/// normalized with the checkpoint's statistics.
pub fn evaluate(ckpt: &Checkpoint, domain: &SubjectDomain) -> Result<Evaluation> {
    check_shape(&ckpt.model.config, domain)?;
    let data = normalize_images(domain, &ckpt.stats)?;
    evaluate_model(&ckpt.model, &data, ckpt.eval_branch(), ckpt.reference.as_ref())
}

/// Mean source cross-entropy and discrepancy of a checkpoint on paired
/// batches, with no parameter updates.
pub fn measure_gap(ckpt: &Checkpoint, source: &SubjectDomain, target: &SubjectDomain, train: &TrainConfig, seed: u64) -> Result<AdaptEpoch> {
    let probe = TrainConfig { epochs_adapt: 0, n_labeled: 0, ..train.clone() };
    Ok(transfer_adapt(ckpt, source, target, &probe, seed)?.initial)
}
