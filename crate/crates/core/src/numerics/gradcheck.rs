//! Central finite-difference verification of tape gradients.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Per-element comparison statistics from [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Compares the tape gradient of a scalar function against central
/// differences with step `h`, over every element of every tensor in `params`.
///
/// `f` builds the computation on a fresh tape from one leaf per entry of
/// `params` and returns the scalar output node.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &leaves)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            tape.shape(out)
        )));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get_or_zeros(*v, p.numel()))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = perturbed.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &leaves)?;
        tape.value(out).item()
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0 };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.numel() {
            let orig = p.data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][ei];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Like [`grad_check`], but differentiates with respect to the trainable
/// parameters of `store`. `f` reads parameters through [`Tape::param`].
///
/// At most `max_per_param` evenly spaced elements of each parameter are
/// perturbed, which bounds the cost on larger models.
pub fn grad_check_store<F>(f: F, store: &ParamStore, h: f64, max_per_param: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            tape.shape(out)
        )));
    }
    let grads = tape.backward(out)?;
    let analytic = store.collect_grads(&tape, &grads);

    let mut work = store.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0 };
    for (id, p) in store.iter() {
        if p.frozen {
            continue;
        }
        let numel = p.value.numel();
        let picks = max_per_param.min(numel).max(1);
        for k in 0..picks {
            let ei = k * numel / picks;
            let orig = p.value.data()[ei];
            let mut eval = |v: f64| -> Result<f64> {
                work.get_mut(id).value.data_mut()[ei] = v;
                let mut tape = Tape::new();
                let out = f(&mut tape, &work)?;
                tape.value(out).item()
            };
            let plus = eval(orig + h)?;
            let minus = eval(orig - h)?;
            work.get_mut(id).value.data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[id.0].as_ref().map_or(0.0, |g| g[ei]);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
