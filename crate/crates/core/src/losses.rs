//! Kernel two-sample discrepancy, cross-entropy and the joint objective.
//!
//! The squared MMD between sample sets `S` (n rows) and `T` (m rows) is the
//! squared RKHS distance between their kernel mean embeddings. With a
//! Gaussian kernel it expands to
//!
//! ```text
//! (1/n²) Σ k(s, s') + (1/m²) Σ k(t, t') − (2/nm) Σ k(s, t)
//! ```
//!
//! which is the biased (V-statistic) estimator and the default here. The
//! unbiased U-statistic drops the diagonal self-similarity terms.
//!
//! Both are written as `Σ_ij c_ij k(z_i, z_j)` over the pooled rows
//! `z = S ∪ T`, so value and gradient share one code path.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, dim_err, Result};
use crate::numerics::{CustomOp, Tape, Tensor, Var};

/// Gaussian kernel bandwidth policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Fixed σ > 0.
    Fixed(f64),
    /// σ = median pairwise Euclidean distance over the pooled batch pair.
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Biased,
    Unbiased,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub bandwidth: Bandwidth,
    pub estimator: Estimator,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { bandwidth: Bandwidth::Median, estimator: Estimator::Biased }
    }
}

impl KernelConfig {
    pub fn fixed(sigma: f64) -> Self {
        Self { bandwidth: Bandwidth::Fixed(sigma), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !(s > 0.0 && s.is_finite()) {
                return Err(config_err!("kernel bandwidth must be positive, got {s}"));
            }
        }
        Ok(())
    }
}

fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `exp(−‖x − y‖² / (2σ²))`
pub fn gaussian_kernel(x: &[f64], y: &[f64], sigma: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(dim_err!("kernel arguments differ in length: {} vs {}", x.len(), y.len()));
    }
    if !(sigma > 0.0) {
        return Err(config_err!("kernel bandwidth must be positive, got {sigma}"));
    }
    Ok((-squared_distance(x, y) / (2.0 * sigma * sigma)).exp())
}

/// Median of all pairwise Euclidean distances among the rows of `rows`
/// (flat, `dim` columns). Falls back to 1.0 when the median is zero.
pub fn median_bandwidth(rows: &[f64], dim: usize) -> f64 {
    let count = rows.len() / dim;
    let mut dists = Vec::with_capacity(count * count.saturating_sub(1) / 2);
    for i in 0..count {
        for j in i + 1..count {
            dists.push(squared_distance(&rows[i * dim..][..dim], &rows[j * dim..][..dim]).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 { 0.5 * (dists[mid - 1] + dists[mid]) } else { dists[mid] };
    if median > 0.0 && median.is_finite() {
        median
    } else {
        1.0
    }
}

/// Pairwise coefficients `c_ij` of the estimator over pooled rows.
fn coefficient(estimator: Estimator, n: usize, m: usize, i: usize, j: usize) -> f64 {
    let (si, sj) = (i < n, j < n);
    match (si, sj) {
        (true, true) => match estimator {
            Estimator::Biased => 1.0 / (n * n) as f64,
            Estimator::Unbiased if i == j => 0.0,
            Estimator::Unbiased => 1.0 / (n * (n - 1)) as f64,
        },
        (false, false) => match estimator {
            Estimator::Biased => 1.0 / (m * m) as f64,
            Estimator::Unbiased if i == j => 0.0,
            Estimator::Unbiased => 1.0 / (m * (m - 1)) as f64,
        },
        _ => -1.0 / (n * m) as f64,
    }
}

/// Shapes and bandwidth of one MMD evaluation.
#[derive(Debug, Clone, Copy)]
struct MmdSetup {
    n: usize,
    m: usize,
    dim: usize,
    sigma: f64,
    estimator: Estimator,
}

fn mmd_setup(s: &Tensor, t: &Tensor, kernel: &KernelConfig) -> Result<(MmdSetup, Vec<f64>)> {
    kernel.validate()?;
    if s.ndim() < 1 || t.ndim() < 1 {
        return Err(dim_err!("mmd inputs need a leading sample axis"));
    }
    let (n, m) = (s.shape()[0], t.shape()[0]);
    let dim = s.numel() / n;
    if t.numel() / m != dim || s.shape()[1..] != t.shape()[1..] {
        return Err(dim_err!(
            "source and target feature shapes differ: {:?} vs {:?}",
            s.shape(),
            t.shape()
        ));
    }
    if kernel.estimator == Estimator::Unbiased && (n < 2 || m < 2) {
        return Err(data_err!("unbiased MMD needs at least two samples per domain"));
    }
    let mut pooled = Vec::with_capacity((n + m) * dim);
    pooled.extend_from_slice(s.data());
    pooled.extend_from_slice(t.data());
    let sigma = match kernel.bandwidth {
        Bandwidth::Fixed(s) => s,
        Bandwidth::Median => median_bandwidth(&pooled, dim),
    };
    Ok((MmdSetup { n, m, dim, sigma, estimator: kernel.estimator }, pooled))
}

fn gram(pooled: &[f64], dim: usize, sigma: f64) -> Vec<f64> {
    let count = pooled.len() / dim;
    let denom = 2.0 * sigma * sigma;
    let mut k = vec![0.0; count * count];
    for i in 0..count {
        k[i * count + i] = 1.0;
        for j in i + 1..count {
            let v = (-squared_distance(&pooled[i * dim..][..dim], &pooled[j * dim..][..dim]) / denom).exp();
            k[i * count + j] = v;
            k[j * count + i] = v;
        }
    }
    k
}

/// Within-domain blocks are summed in row order; the cross block is summed
/// in sorted order so that swapping `S` and `T` gives a bit-identical value.
fn mmd_value(setup: &MmdSetup, gram: &[f64]) -> f64 {
    let (n, m) = (setup.n, setup.m);
    let count = n + m;
    let block = |range: std::ops::Range<usize>| {
        let mut total = 0.0;
        for i in range.clone() {
            for j in range.clone() {
                total += coefficient(setup.estimator, n, m, i, j) * gram[i * count + j];
            }
        }
        total
    };
    let within = block(0..n) + block(n..count);
    let mut cross: Vec<f64> = (0..n)
        .flat_map(|i| (n..count).map(move |j| (i, j)))
        .map(|(i, j)| gram[i * count + j])
        .collect();
    cross.sort_by(f64::total_cmp);
    within - 2.0 * cross.iter().sum::<f64>() / (n * m) as f64
}

/// Squared MMD between two sample sets. The leading axis indexes samples;
/// all trailing axes are flattened into the feature vector.
pub fn mmd_squared(s: &Tensor, t: &Tensor, kernel: &KernelConfig) -> Result<f64> {
    if s.numel() == 0 || t.numel() == 0 {
        return Err(data_err!("mmd needs at least one sample per domain"));
    }
    let (setup, pooled) = mmd_setup(s, t, kernel)?;
    Ok(mmd_value(&setup, &gram(&pooled, setup.dim, setup.sigma)))
}

#[derive(Debug)]
struct MmdOp {
    setup: MmdSetup,
    pooled: Vec<f64>,
    gram: Vec<f64>,
}

impl CustomOp for MmdOp {
    fn name(&self) -> &'static str {
        "mmd_squared"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64], needs_grad: &[bool]) -> Vec<Option<Vec<f64>>> {
        let MmdSetup { n, m, dim, sigma, estimator } = self.setup;
        let count = n + m;
        let scale = grad_out[0] * 2.0 / (sigma * sigma);
        let mut grad = vec![0.0; count * dim];
        for a in 0..count {
            if (a < n && !needs_grad[0]) || (a >= n && !needs_grad[1]) {
                continue;
            }
            let za = &self.pooled[a * dim..][..dim];
            let ga = &mut grad[a * dim..][..dim];
            for j in 0..count {
                if j == a {
                    continue;
                }
                let w = coefficient(estimator, n, m, a, j) * self.gram[a * count + j];
                if w == 0.0 {
                    continue;
                }
                let zj = &self.pooled[j * dim..][..dim];
                for ((g, x), y) in ga.iter_mut().zip(za).zip(zj) {
                    *g -= scale * w * (x - y);
                }
            }
        }
        let t_part = grad.split_off(n * dim);
        vec![needs_grad[0].then_some(grad), needs_grad[1].then_some(t_part)]
    }
}

/// Records squared MMD between `s` and `t` on the tape. The bandwidth is
/// resolved from the forward values and treated as a constant.
pub fn mmd_squared_var(tape: &mut Tape, s: Var, t: Var, kernel: &KernelConfig) -> Result<Var> {
    let (setup, pooled) = mmd_setup(tape.value(s), tape.value(t), kernel)?;
    let gram = gram(&pooled, setup.dim, setup.sigma);
    let value = mmd_value(&setup, &gram);
    Ok(tape.custom(&[s, t], Tensor::scalar(value), Box::new(MmdOp { setup, pooled, gram })))
}

/// Paired source/target activations for each adapted layer.
#[derive(Debug, Clone, Default)]
pub struct AdaptationBatch {
    pub layers: Vec<(Tensor, Tensor)>,
}

/// Sum of squared MMD over every layer pair.
pub fn mmd_transfer_loss(batch: &AdaptationBatch, kernel: &KernelConfig) -> Result<f64> {
    if batch.layers.is_empty() {
        return Err(data_err!("transfer loss needs at least one layer pair"));
    }
    batch.layers.iter().map(|(s, t)| mmd_squared(s, t, kernel)).sum()
}

/// Tape version of [`mmd_transfer_loss`].
pub fn mmd_transfer_loss_var(tape: &mut Tape, layers: &[(Var, Var)], kernel: &KernelConfig) -> Result<Var> {
    let mut terms = layers.iter().map(|&(s, t)| mmd_squared_var(tape, s, t, kernel));
    let mut total = terms
        .next()
        .ok_or_else(|| data_err!("transfer loss needs at least one layer pair"))??;
    for term in terms.collect::<Result<Vec<_>>>()? {
        total = tape.add(total, term)?;
    }
    Ok(total)
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    if logits.ndim() != 2 {
        return Err(dim_err!("logits must be [n, classes], got {:?}", logits.shape()));
    }
    let (n, classes) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(dim_err!("{} labels for {} logit rows", labels.len(), n));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(data_err!("label {bad} out of range for {classes} classes"));
    }
    Ok((n, classes))
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Mean negative log-likelihood of the true class.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, classes) = check_labels(logits, labels)?;
    let total: f64 = logits
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .map(|(row, &l)| -log_softmax_row(row)[l])
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug)]
struct CrossEntropyOp {
    labels: Vec<usize>,
}

impl CustomOp for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64], needs_grad: &[bool]) -> Vec<Option<Vec<f64>>> {
        if !needs_grad[0] {
            return vec![None];
        }
        let logits = inputs[0];
        let classes = logits.shape()[1];
        let scale = grad_out[0] / self.labels.len() as f64;
        let mut grad = Vec::with_capacity(logits.numel());
        for (row, &l) in logits.data().chunks_exact(classes).zip(&self.labels) {
            for (c, lp) in log_softmax_row(row).into_iter().enumerate() {
                let indicator = if c == l { 1.0 } else { 0.0 };
                grad.push(scale * (lp.exp() - indicator));
            }
        }
        vec![Some(grad)]
    }
}

pub fn cross_entropy_var(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let value = cross_entropy(tape.value(logits), labels)?;
    Ok(tape.custom(&[logits], Tensor::scalar(value), Box::new(CrossEntropyOp { labels: labels.to_vec() })))
}

/// `ce + γ · l_mmd`
pub fn total_loss(ce: f64, l_mmd: f64, gamma: f64) -> Result<f64> {
    if !(gamma >= 0.0) {
        return Err(config_err!("discrepancy weight must be non-negative, got {gamma}"));
    }
    Ok(ce + gamma * l_mmd)
}

pub fn total_loss_var(tape: &mut Tape, ce: Var, l_mmd: Var, gamma: f64) -> Result<Var> {
    if !(gamma >= 0.0) {
        return Err(config_err!("discrepancy weight must be non-negative, got {gamma}"));
    }
    let weighted = tape.scale(l_mmd, gamma);
    tape.add(ce, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn kernel_closed_forms() {
        let x = [0.3, -1.2, 2.0];
        assert_eq!(gaussian_kernel(&x, &x, 0.7).unwrap(), 1.0);
        // ‖x − y‖² = 2σ² with σ = 1.5: shift one coordinate by 2σ²'s root.
        let sigma: f64 = 1.5;
        let y = [0.3 + (2.0 * sigma * sigma).sqrt(), -1.2, 2.0];
        assert!((gaussian_kernel(&x, &y, sigma).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert!(gaussian_kernel(&x, &y, 0.0).is_err());
        assert!(gaussian_kernel(&x, &[1.0], 1.0).is_err());
    }

    #[test]
    fn singleton_sets_match_hand_expansion() {
        let s = t(&[1, 2], &[0.0, 1.0]);
        let tt = t(&[1, 2], &[1.0, -1.0]);
        let sigma: f64 = 0.8;
        let expected = 2.0 - 2.0 * (-5.0 / (2.0 * sigma * sigma)).exp();
        let got = mmd_squared(&s, &tt, &KernelConfig::fixed(sigma)).unwrap();
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_sets_have_zero_discrepancy() {
        let s = t(&[3, 2], &[0.1, 0.2, -0.4, 1.0, 2.0, 0.5]);
        assert!(mmd_squared(&s, &s, &KernelConfig::default()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn shape_and_config_errors() {
        let s = t(&[2, 3], &[0.0; 6]);
        let tt = t(&[2, 2], &[0.0; 4]);
        assert!(mmd_squared(&s, &tt, &KernelConfig::default()).is_err());
        assert!(mmd_squared(&s, &s, &KernelConfig::fixed(-1.0)).is_err());
        let one = t(&[1, 3], &[0.0; 3]);
        let unbiased = KernelConfig { estimator: Estimator::Unbiased, ..KernelConfig::default() };
        assert!(mmd_squared(&one, &s, &unbiased).is_err());
        assert!(mmd_transfer_loss(&AdaptationBatch::default(), &KernelConfig::default()).is_err());
    }

    #[test]
    fn median_of_even_and_odd_pair_counts() {
        // three collinear points at 0, 1, 3: distances 1, 3, 2 → median 2
        assert_eq!(median_bandwidth(&[0.0, 1.0, 3.0], 1), 2.0);
        // four points 0,1,2,4 → distances 1,2,4,1,3,2 → sorted 1,1,2,2,3,4 → 2
        assert_eq!(median_bandwidth(&[0.0, 1.0, 2.0, 4.0], 1), 2.0);
        assert_eq!(median_bandwidth(&[5.0, 5.0], 1), 1.0);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let uniform = t(&[2, 4], &[0.0; 8]);
        assert!((cross_entropy(&uniform, &[0, 3]).unwrap() - 4f64.ln()).abs() < 1e-15);
        let confident = t(&[1, 4], &[0.0, 1000.0, 0.0, 0.0]);
        assert!(cross_entropy(&confident, &[1]).unwrap() < 1e-12);
        assert!(cross_entropy(&uniform, &[0, 4]).is_err());
        assert!(cross_entropy(&uniform, &[0]).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(0.37, 5.0, 0.0).unwrap(), 0.37);
        assert_eq!(total_loss(1.0, 0.5, 2.0).unwrap(), 2.0);
        assert!(total_loss(1.0, 0.5, -1.0).is_err());
    }
}
