//! The full network: a shared ConvLSTM encoder, subject-specific
//! convolutional branches for the source and target subjects, spatial
//! attention and a classifier head.
//!
//! ```text
//! x [n,t,c,w,h] ─ ConvLSTM stack ─ reshape [n,t·c',w,h] ─┬─ source branch ─ F_S ─┐
//!                                                         └─ target branch ─ F_T ─┤
//!                                   [F_S, F_S·A] ─ conv ─ flatten ─ dense ─ logits
//! ```

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend_var, identity_attend_var};
use crate::convlstm::{stack_forward, ConvLstmStack};
use crate::error::{config_err, dim_err, Result};
use crate::losses::{cross_entropy_var, mmd_transfer_loss_var, total_loss_var, KernelConfig};
use crate::numerics::{glorot_uniform, ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};

/// Which subject-specific layers feed the discrepancy loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmdLayers {
    All,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub frames: usize,
    pub bands: usize,
    /// Side of the square input images.
    pub grid: usize,
    pub convlstm_channels: Vec<usize>,
    pub kernel_size: usize,
    pub specific_channels: Vec<usize>,
    pub classifier_conv: usize,
    pub fc_widths: Vec<usize>,
    pub n_classes: usize,
    /// `false` drops the attention block and feeds `F` alone to the head.
    pub attention: bool,
    pub mmd_layers: MmdLayers,
    pub gamma: f64,
    pub kernel: KernelConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ModelConfig {
    /// Full-size architecture for 7×3×32×32 inputs.
    pub fn paper() -> Self {
        Self {
            frames: 7,
            bands: 3,
            grid: 32,
            convlstm_channels: vec![8, 16, 16, 16],
            kernel_size: 3,
            specific_channels: vec![32, 8],
            classifier_conv: 4,
            fc_widths: vec![4096, 512],
            n_classes: 4,
            attention: true,
            mmd_layers: MmdLayers::All,
            gamma: 1.0,
            kernel: KernelConfig::default(),
        }
    }

    /// Small architecture that trains in seconds on one core.
    pub fn desk() -> Self {
        Self {
            frames: 3,
            bands: 3,
            grid: 8,
            convlstm_channels: vec![4],
            kernel_size: 3,
            specific_channels: vec![8, 4],
            classifier_conv: 4,
            fc_widths: vec![32],
            n_classes: 4,
            ..Self::paper()
        }
    }

    /// Variant without attention whose discrepancy loss covers only the last
    /// subject-specific layer.
    pub fn without_attention(&self) -> Self {
        Self { attention: false, mmd_layers: MmdLayers::Last, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.frames, self.bands, self.grid, self.kernel_size, self.classifier_conv, self.n_classes];
        if counts.contains(&0)
            || self.convlstm_channels.is_empty()
            || self.specific_channels.is_empty()
            || self.convlstm_channels.contains(&0)
            || self.specific_channels.contains(&0)
            || self.fc_widths.contains(&0)
        {
            return Err(config_err!("model sizes must be positive and layer lists non-empty"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(config_err!("kernel size must be odd, got {}", self.kernel_size));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(config_err!("gamma must be non-negative, got {}", self.gamma));
        }
        self.kernel.validate()
    }

    /// `[t, c, w, h]` of one input sample.
    pub fn input_shape(&self) -> [usize; 4] {
        [self.frames, self.bands, self.grid, self.grid]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

/// Outputs of a paired source/target pass.
#[derive(Debug, Clone)]
pub struct ForwardArtifacts {
    /// `[n, n_classes]` for the source batch.
    pub logits: Var,
    /// Per subject-specific layer: (source activation, target activation).
    pub layer_features: Vec<(Var, Var)>,
    /// Classifier input, `[F_S, F_S·A]` or `F_S` without attention.
    pub attended: Var,
}

/// Parameter counts by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub shared: usize,
    pub source_branch: usize,
    pub target_branch: usize,
    pub classifier: usize,
}

impl Census {
    pub fn total(&self) -> usize {
        self.shared + self.source_branch + self.target_branch + self.classifier
    }
}

#[derive(Debug, Clone)]
pub struct CsDasa {
    pub config: ModelConfig,
    pub store: ParamStore,
    encoder: ConvLstmStack,
    source_branch: Vec<Layer>,
    target_branch: Vec<Layer>,
    classifier_conv: Layer,
    dense: Vec<Layer>,
}

/// `[n, t, c, w, h] → [n, t·c, w, h]`, time-major.
pub fn reshape_temporal_channels(tape: &mut Tape, f: Var) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    if s.len() != 5 {
        return Err(dim_err!("expected [n, t, c, w, h], got {:?}", s));
    }
    tape.reshape(f, &[s[0], s[1] * s[2], s[3], s[4]])
}

fn conv_layer(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, group: ParamGroup, c_in: usize, c_out: usize, k: usize) -> Layer {
    let kk = k * k;
    let w = store.add(format!("{name}.w"), group, glorot_uniform(rng, &[c_out, c_in, k, k], c_in * kk, c_out * kk));
    let b = store.add(format!("{name}.b"), group, Tensor::zeros(&[c_out]));
    Layer { w, b }
}

fn dense_layer(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) -> Layer {
    let w = store.add(format!("{name}.w"), ParamGroup::Classifier, glorot_uniform(rng, &[d_in, d_out], d_in, d_out));
    let b = store.add(format!("{name}.b"), ParamGroup::Classifier, Tensor::zeros(&[d_out]));
    Layer { w, b }
}

impl CsDasa {
    /// Fresh model; the target branch starts as a copy of the source branch.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (g, k) = (config.grid, config.kernel_size);
        let encoder = ConvLstmStack::init(&mut store, "shared.convlstm", config.bands, &config.convlstm_channels, k, g, g, &mut rng)?;
        let mut c_in = config.frames * encoder.out_channels();
        let mut source_branch = Vec::new();
        let mut target_branch = Vec::new();
        for (i, &c_out) in config.specific_channels.iter().enumerate() {
            source_branch.push(conv_layer(&mut store, &mut rng, &format!("source.conv{i}"), ParamGroup::SourceBranch, c_in, c_out, k));
            target_branch.push(conv_layer(&mut store, &mut rng, &format!("target.conv{i}"), ParamGroup::TargetBranch, c_in, c_out, k));
            c_in = c_out;
        }
        let head_in = if config.attention { 2 * c_in } else { c_in };
        let classifier_conv = conv_layer(&mut store, &mut rng, "classifier.conv", ParamGroup::Classifier, head_in, config.classifier_conv, k);
        let mut d_in = config.classifier_conv * g * g;
        let mut dense = Vec::new();
        for (i, &w) in config.fc_widths.iter().chain(std::iter::once(&config.n_classes)).enumerate() {
            dense.push(dense_layer(&mut store, &mut rng, &format!("classifier.fc{i}"), d_in, w));
            d_in = w;
        }
        let mut model = Self { config, store, encoder, source_branch, target_branch, classifier_conv, dense };
        model.sync_target_from_source();
        Ok(model)
    }

    /// Copies source-branch weights into the target branch.
    pub fn sync_target_from_source(&mut self) {
        for (s, t) in self.source_branch.clone().iter().zip(self.target_branch.clone()) {
            for (from, to) in [(s.w, t.w), (s.b, t.b)] {
                let v = self.store.get(from).value.clone();
                self.store.get_mut(to).value = v;
            }
        }
    }

    pub fn encoder(&self) -> &ConvLstmStack {
        &self.encoder
    }

    /// Channels of the encoder output after the temporal reshape.
    pub fn encoded_channels(&self) -> usize {
        self.config.frames * self.encoder.out_channels()
    }

    /// Channels of the last subject-specific layer.
    pub fn branch_channels(&self) -> usize {
        *self.config.specific_channels.last().unwrap_or(&0)
    }

    pub fn set_shared_frozen(&mut self, frozen: bool) {
        self.encoder.set_frozen(&mut self.store, frozen);
    }

    pub fn parameter_census(&self) -> Census {
        let mut c = Census { shared: 0, source_branch: 0, target_branch: 0, classifier: 0 };
        for (_, p) in self.store.iter() {
            let n = p.value.numel();
            match p.group {
                ParamGroup::Shared => c.shared += n,
                ParamGroup::SourceBranch => c.source_branch += n,
                ParamGroup::TargetBranch => c.target_branch += n,
                ParamGroup::Classifier => c.classifier += n,
            }
        }
        c
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let s = tape.shape(x);
        let want = self.config.input_shape();
        if s.len() != 5 || s[1..] != want {
            return Err(dim_err!("model expects [n, {}, {}, {}, {}], got {:?}", want[0], want[1], want[2], want[3], s));
        }
        Ok(())
    }

    /// Shared encoder followed by the temporal-channel reshape.
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let f = stack_forward(tape, &self.store, &self.encoder, x)?;
        reshape_temporal_channels(tape, f)
    }

    /// Encoder output as a plain tensor, `[n, t·c', w, h]`.
    pub fn encode_values(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let f = self.encode(&mut tape, xv)?;
        Ok(tape.value(f).clone())
    }

    /// Post-ReLU activations of every layer of one branch.
    pub fn branch_forward(&self, tape: &mut Tape, branch: Branch, f: Var) -> Result<Vec<Var>> {
        let layers = match branch {
            Branch::Source => &self.source_branch,
            Branch::Target => &self.target_branch,
        };
        let mut cur = f;
        let mut out = Vec::with_capacity(layers.len());
        for l in layers {
            let (w, b) = (tape.param(&self.store, l.w), tape.param(&self.store, l.b));
            let z = tape.conv2d(cur, w, Some(b))?;
            cur = tape.relu(z);
            out.push(cur);
        }
        Ok(out)
    }

    /// Attention (if enabled) and classifier. `counter` is the per-sample
    /// counterpart map; `None` substitutes identity attention.
    pub fn head(&self, tape: &mut Tape, main: Var, counter: Option<Var>) -> Result<(Var, Var)> {
        let attended = match (self.config.attention, counter) {
            (false, _) => main,
            (true, Some(c)) => attend_var(tape, main, c)?,
            (true, None) => identity_attend_var(tape, main)?,
        };
        let (w, b) = (tape.param(&self.store, self.classifier_conv.w), tape.param(&self.store, self.classifier_conv.b));
        let z = tape.conv2d(attended, w, Some(b))?;
        let z = tape.relu(z);
        let n = tape.shape(z)[0];
        let width = tape.value(z).numel() / n;
        let mut h = tape.reshape(z, &[n, width])?;
        for (i, l) in self.dense.iter().enumerate() {
            let (w, b) = (tape.param(&self.store, l.w), tape.param(&self.store, l.b));
            let y = tape.matmul(h, w)?;
            let b = tape.repeat_leading(b, n);
            h = tape.add(y, b)?;
            if i + 1 < self.dense.len() {
                h = tape.relu(h);
            }
        }
        Ok((attended, h))
    }

    /// Paired pass from raw inputs.
    pub fn forward_pair(&self, tape: &mut Tape, xs: Var, xt: Var) -> Result<ForwardArtifacts> {
        let fs = self.encode(tape, xs)?;
        let ft = self.encode(tape, xt)?;
        self.forward_pair_encoded(tape, fs, ft)
    }

    /// Paired pass from encoder outputs. Sample `i` of the source batch
    /// attends over sample `i` of the target batch.
    pub fn forward_pair_encoded(&self, tape: &mut Tape, fs: Var, ft: Var) -> Result<ForwardArtifacts> {
        self.forward_pair_encoded_with(tape, fs, ft, false)
    }

    /// As [`forward_pair_encoded`](Self::forward_pair_encoded); with
    /// `detach_counterpart` the target features enter the attention block as
    /// constants, so classification gradients reach only the source branch.
    pub fn forward_pair_encoded_with(&self, tape: &mut Tape, fs: Var, ft: Var, detach_counterpart: bool) -> Result<ForwardArtifacts> {
        if tape.shape(fs) != tape.shape(ft) {
            return Err(dim_err!("source and target batches differ: {:?} vs {:?}", tape.shape(fs), tape.shape(ft)));
        }
        let src = self.branch_forward(tape, Branch::Source, fs)?;
        let tgt = self.branch_forward(tape, Branch::Target, ft)?;
        let (main, mut counter) = (*src.last().unwrap(), *tgt.last().unwrap());
        if detach_counterpart {
            counter = tape.constant(tape.value(counter).clone());
        }
        let (attended, logits) = self.head(tape, main, Some(counter))?;
        Ok(ForwardArtifacts { logits, layer_features: src.into_iter().zip(tgt).collect(), attended })
    }

    /// Layer pairs that enter the discrepancy loss.
    pub fn mmd_pairs(&self, artifacts: &ForwardArtifacts) -> Vec<(Var, Var)> {
        match self.config.mmd_layers {
            MmdLayers::All => artifacts.layer_features.clone(),
            MmdLayers::Last => artifacts.layer_features.last().copied().into_iter().collect(),
        }
    }

    /// Joint objective `CE(source) + γ · Σ MMD`. Returns (total, ce, mmd).
    pub fn joint_loss(&self, tape: &mut Tape, artifacts: &ForwardArtifacts, labels: &[usize]) -> Result<(Var, Var, Var)> {
        let ce = cross_entropy_var(tape, artifacts.logits, labels)?;
        let pairs = self.mmd_pairs(artifacts);
        let mmd = mmd_transfer_loss_var(tape, &pairs, &self.config.kernel)?;
        let total = total_loss_var(tape, ce, mmd, self.config.gamma)?;
        Ok((total, ce, mmd))
    }

    /// Logits for encoder outputs through one branch, attending over a fixed
    /// reference: either one map `[c, w, h]` shared by every sample or a
    /// batch `[m, c, w, h]` where sample `i` uses row `i % m`.
    pub fn classify_encoded(&self, tape: &mut Tape, f: Var, branch: Branch, reference: Option<&Tensor>) -> Result<Var> {
        let feats = self.branch_forward(tape, branch, f)?;
        let main = *feats.last().unwrap();
        let counter = match reference {
            Some(r) if self.config.attention => {
                let want = &tape.shape(main)[1..];
                let n = tape.shape(main)[0];
                if r.shape() == want {
                    let r = tape.constant(r.clone());
                    Some(tape.repeat_leading(r, n))
                } else if r.ndim() == 4 && r.shape()[0] > 0 && &r.shape()[1..] == want {
                    let rows: Vec<Tensor> = (0..n).map(|i| r.index_leading(i % r.shape()[0])).collect::<Result<_>>()?;
                    Some(tape.constant(Tensor::stack(&rows)?))
                } else {
                    return Err(dim_err!("reference is {:?}, features are {:?}", r.shape(), want));
                }
            }
            _ => None,
        };
        Ok(self.head(tape, main, counter)?.1)
    }

    /// Inference on raw inputs `[n, t, c, w, h]`. Without a reference map the
    /// attention block falls back to the identity matrix.
    pub fn forward_eval(&self, x: &Tensor, branch: Branch, reference: Option<&Tensor>) -> Result<Tensor> {
        if reference.is_none() && self.config.attention {
            warn!("no attention reference available; using identity attention");
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let f = self.encode(&mut tape, xv)?;
        let logits = self.classify_encoded(&mut tape, f, branch, reference)?;
        Ok(tape.value(logits).clone())
    }

    /// Mean last-layer branch activation over encoded samples `[n, c', w, h]`.
    pub fn reference_map(&self, encoded: &Tensor, branch: Branch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = tape.constant(encoded.clone());
        let feats = self.branch_forward(&mut tape, branch, f)?;
        let last = tape.value(*feats.last().unwrap());
        let n = last.shape()[0];
        let per = last.numel() / n;
        let mut mean = vec![0.0; per];
        for row in last.data().chunks_exact(per) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        Tensor::new(last.shape()[1..].to_vec(), mean)
    }
}
