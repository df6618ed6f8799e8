//! Subject-to-subject spatial attention.
//!
//! For paired feature maps `F_S`, `F_T` of shape `c × L` (L = w·h spatial
//! positions), the cross-domain attention matrix is
//! `A = softmax_rows(F_Sᵀ F_T)` (L × L) and the attended source map is
//! `F_S A`. The classifier consumes `[F_S, F_S A]` stacked on channels.
//!
//! Because `A` is row-stochastic, right-multiplication conserves each
//! channel's total over spatial positions.

use crate::error::{dim_err, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Row-stochastic `L × L` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix(Tensor);

impl AttentionMatrix {
    /// Wraps an explicit matrix (identity, uniform, ...). Must be square.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.ndim() != 2 || t.shape()[0] != t.shape()[1] {
            return Err(dim_err!("attention matrix must be square, got {:?}", t.shape()));
        }
        Ok(Self(t))
    }

    pub fn identity(size: usize) -> Self {
        let mut t = Tensor::zeros(&[size, size]);
        for i in 0..size {
            t.data_mut()[i * size + i] = 1.0;
        }
        Self(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn size(&self) -> usize {
        self.0.shape()[0]
    }

    /// Largest deviation of any row sum from 1.
    pub fn row_sum_error(&self) -> f64 {
        let l = self.size();
        self.0
            .data()
            .chunks_exact(l)
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// `[c, w, h] → [c, w·h]`, element `(c, i, j)` at column `i·h + j`.
pub fn flatten_spatial(f: &Tensor) -> Result<Tensor> {
    if f.ndim() != 3 {
        return Err(dim_err!("expected [c, w, h], got {:?}", f.shape()));
    }
    let s = f.shape();
    f.reshape(&[s[0], s[1] * s[2]])
}

/// Inverse of [`flatten_spatial`].
pub fn unflatten_spatial(f: &Tensor, w: usize, h: usize) -> Result<Tensor> {
    if f.ndim() != 2 || f.shape()[1] != w * h {
        return Err(dim_err!("cannot unflatten {:?} into spatial {}×{}", f.shape(), w, h));
    }
    f.reshape(&[f.shape()[0], w, h])
}

/// `softmax_rows(F_Sᵀ F_T)` for one pair of `[c, L]` maps.
pub fn attention_matrix(source: &Tensor, target: &Tensor) -> Result<AttentionMatrix> {
    if source.ndim() != 2 || source.shape() != target.shape() {
        return Err(dim_err!(
            "attention needs matching [c, L] maps, got {:?} and {:?}",
            source.shape(),
            target.shape()
        ));
    }
    let mut tape = Tape::new();
    let s = tape.constant(source.clone());
    let t = tape.constant(target.clone());
    let a = attention_scores_var(&mut tape, s, t)?;
    Ok(AttentionMatrix(tape.value(a).clone()))
}

/// `F_S A` for one `[c, L]` map.
pub fn apply_attention(source: &Tensor, attention: &AttentionMatrix) -> Result<Tensor> {
    if source.ndim() != 2 || source.shape()[1] != attention.size() {
        return Err(dim_err!(
            "cannot apply {}×{} attention to {:?}",
            attention.size(),
            attention.size(),
            source.shape()
        ));
    }
    let mut tape = Tape::new();
    let s = tape.constant(source.clone());
    let a = tape.constant(attention.0.clone());
    let out = tape.matmul(s, a)?;
    Ok(tape.value(out).clone())
}

/// `[F_2d, F_att]` along channels; both `[c, w, h]`.
pub fn attended_concat(features: &Tensor, attended: &Tensor) -> Result<Tensor> {
    if features.shape() != attended.shape() || features.ndim() != 3 {
        return Err(dim_err!(
            "concat needs equal [c, w, h] maps, got {:?} and {:?}",
            features.shape(),
            attended.shape()
        ));
    }
    let mut data = features.data().to_vec();
    data.extend_from_slice(attended.data());
    let s = features.shape();
    Tensor::new(vec![2 * s[0], s[1], s[2]], data)
}

/// Scores and row softmax on `[.., c, L]` inputs; returns `[.., L, L]`.
fn attention_scores_var(tape: &mut Tape, main: Var, counter: Var) -> Result<Var> {
    let main_t = tape.transpose_last2(main)?;
    let scores = tape.matmul(main_t, counter)?;
    Ok(tape.softmax(scores))
}

/// Batched attention block on the tape.
///
/// `main` and `counter` are `[n, c, w, h]`; sample `i` of `main` attends over
/// sample `i` of `counter`. Returns `[n, 2c, w, h]` = `[main, main · A]`.
pub fn attend_var(tape: &mut Tape, main: Var, counter: Var) -> Result<Var> {
    let shape = tape.shape(main).to_vec();
    if shape.len() != 4 || tape.shape(counter) != shape.as_slice() {
        return Err(dim_err!(
            "attention needs matching [n, c, w, h] maps, got {:?} and {:?}",
            shape,
            tape.shape(counter)
        ));
    }
    let (n, c, l) = (shape[0], shape[1], shape[2] * shape[3]);
    let main_flat = tape.reshape(main, &[n, c, l])?;
    let counter_flat = tape.reshape(counter, &[n, c, l])?;
    let a = attention_scores_var(tape, main_flat, counter_flat)?;
    let attended = tape.matmul(main_flat, a)?;
    let attended = tape.reshape(attended, &shape)?;
    tape.concat(&[main, attended], 1)
}

/// `[main, main]`, i.e. attention replaced by the identity matrix.
pub fn identity_attend_var(tape: &mut Tape, main: Var) -> Result<Var> {
    tape.concat(&[main, main], 1)
}
