//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the library's numerical code.

#![allow(dead_code)]

use csdasa::convlstm::ConvLstmCellParams;
use csdasa::numerics::{ParamGroup, ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.numel() / t.shape()[0];
    t.data().chunks(d).map(|r| r.to_vec()).collect()
}

/// Three explicit double sums over the Gaussian kernel.
pub fn oracle_mmd(s: &Tensor, t: &Tensor, sigma: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        (-d2 / (2.0 * sigma * sigma)).exp()
    };
    let (s, t) = (rows(s), rows(t));
    let (n, m) = (s.len() as f64, t.len() as f64);
    let mut ss = 0.0;
    for a in &s {
        for b in &s {
            ss += k(a, b);
        }
    }
    let mut tt = 0.0;
    for a in &t {
        for b in &t {
            tt += k(a, b);
        }
    }
    let mut st = 0.0;
    for a in &s {
        for b in &t {
            st += k(a, b);
        }
    }
    ss / (n * n) + tt / (m * m) - 2.0 * st / (n * m)
}

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

pub fn naive_transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub fn naive_softmax_rows(a: &[f64], width: usize) -> Vec<f64> {
    a.chunks(width)
        .flat_map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = e.iter().sum();
            e.into_iter().map(move |v| v / total)
        })
        .collect()
}

/// Columns of a `[c, l]` map reordered so that new column `j` is old column
/// `perm[j]`.
pub fn permute_columns(t: &Tensor, perm: &[usize]) -> Tensor {
    let (c, l) = (t.shape()[0], t.shape()[1]);
    let mut out = Tensor::zeros(&[c, l]);
    for ch in 0..c {
        for (new, &old) in perm.iter().enumerate() {
            out.data_mut()[ch * l + new] = t.get(&[ch, old]);
        }
    }
    out
}

pub fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0f64)];
        let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            return [p[0] / n, p[1] / n, p[2] / n];
        }
    }
}

/// Cell with every parameter (peepholes and biases included) drawn at random.
pub fn random_cell(
    rng: &mut ChaCha8Rng,
    store: &mut ParamStore,
    prefix: &str,
    c_in: usize,
    hidden: usize,
    rows: usize,
    cols: usize,
) -> ConvLstmCellParams {
    let cell = ConvLstmCellParams::init(store, prefix, ParamGroup::Shared, c_in, hidden, 3, rows, cols, rng).unwrap();
    for id in cell.param_ids() {
        let shape = store.get(id).value.shape().to_vec();
        store.get_mut(id).value = random(rng, &shape, 0.6);
    }
    cell
}

// Straight-line ConvLSTM reference, written from the gate equations with
// explicit loops.

pub fn naive_conv(x: &[f64], w: &[f64], c_in: usize, c_out: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; c_out * rows * cols];
    for o in 0..c_out {
        for y in 0..rows {
            for xx in 0..cols {
                let mut acc = 0.0;
                for i in 0..c_in {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            let sx = xx as isize + kx as isize - 1;
                            if sy < 0 || sx < 0 || sy >= rows as isize || sx >= cols as isize {
                                continue;
                            }
                            acc += w[((o * c_in + i) * 3 + ky) * 3 + kx]
                                * x[(i * rows + sy as usize) * cols + sx as usize];
                        }
                    }
                }
                out[(o * rows + y) * cols + xx] = acc;
            }
        }
    }
    out
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// One sample; returns (h, c).
pub fn oracle_step(
    store: &ParamStore,
    cell: &ConvLstmCellParams,
    x: &[f64],
    h: &[f64],
    c: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (hid, rows, cols) = (cell.hidden, cell.rows, cell.cols);
    let p = |id: ParamId| store.get(id).value.data().to_vec();
    let plane = rows * cols;
    let pre = |wx: ParamId, wh: ParamId, peep: Option<ParamId>, b: ParamId| {
        let a = naive_conv(x, &p(wx), cell.in_channels, hid, rows, cols);
        let r = naive_conv(h, &p(wh), hid, hid, rows, cols);
        let bias = p(b);
        let pw = peep.map(p);
        (0..hid * plane)
            .map(|e| {
                let pc = pw.as_ref().map_or(0.0, |w| w[e] * c[e]);
                a[e] + r[e] + pc + bias[e / plane]
            })
            .collect::<Vec<f64>>()
    };
    let i = pre(cell.w_ix, cell.w_ih, Some(cell.w_ic), cell.b_i);
    let f = pre(cell.w_fx, cell.w_fh, Some(cell.w_fc), cell.b_f);
    let o = pre(cell.w_ox, cell.w_oh, Some(cell.w_oc), cell.b_o);
    let g = pre(cell.w_gx, cell.w_gh, None, cell.b_g);
    let mut c_next = vec![0.0; c.len()];
    let mut h_next = vec![0.0; c.len()];
    for e in 0..c.len() {
        c_next[e] = logistic(f[e]) * c[e] + logistic(i[e]) * g[e].tanh();
        h_next[e] = logistic(o[e]) * c_next[e].tanh();
    }
    (h_next, c_next)
}

pub fn oracle_sequence(store: &ParamStore, cell: &ConvLstmCellParams, seq: &Tensor) -> Vec<f64> {
    let s = seq.shape();
    let (n, t) = (s[0], s[1]);
    let frame = s[2] * s[3] * s[4];
    let state_len = cell.hidden * cell.rows * cell.cols;
    let mut out = Vec::new();
    for b in 0..n {
        let (mut h, mut c) = (vec![0.0; state_len], vec![0.0; state_len]);
        for step in 0..t {
            let x = &seq.data()[(b * t + step) * frame..][..frame];
            let (hn, cn) = oracle_step(store, cell, x, &h, &c);
            out.extend_from_slice(&hn);
            h = hn;
            c = cn;
        }
    }
    out
}

/// Median of pooled pairwise Euclidean distances, 1.0 when degenerate.
pub fn oracle_median_sigma(s: &Tensor, t: &Tensor) -> f64 {
    let mut pooled = rows(s);
    pooled.extend(rows(t));
    let mut d = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(pooled[i].iter().zip(&pooled[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = d.len();
    let m = if k % 2 == 1 { d[k / 2] } else { (d[k / 2 - 1] + d[k / 2]) / 2.0 };
    if m > 0.0 { m } else { 1.0 }
}
