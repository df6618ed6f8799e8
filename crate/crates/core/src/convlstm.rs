//! Convolutional LSTM encoder with peephole connections.
//!
//! One step of a cell, with `*` a same-padded convolution and `∘` the
//! Hadamard product:
//!
//! ```text
//! i = σ(W_ix * x + W_ih * h + W_ic ∘ c + b_i)
//! f = σ(W_fx * x + W_fh * h + W_fc ∘ c + b_f)
//! o = σ(W_ox * x + W_oh * h + W_oc ∘ c + b_o)
//! g = tanh(W_gx * x + W_gh * h + b_g)
//! c' = f ∘ c + i ∘ g
//! h' = o ∘ tanh(c')
//! ```
//!
//! where `h`, `c` are the previous hidden and cell states. Layers are stacked
//! so that layer `i` consumes the full hidden sequence of layer `i − 1`.

use rand::Rng;

use crate::error::{config_err, data_err, dim_err, Result};
use crate::numerics::{glorot_uniform, ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};

/// Parameter handles for one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmCellParams {
    pub in_channels: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub rows: usize,
    pub cols: usize,
    pub w_ix: ParamId,
    pub w_ih: ParamId,
    pub w_fx: ParamId,
    pub w_fh: ParamId,
    pub w_ox: ParamId,
    pub w_oh: ParamId,
    pub w_gx: ParamId,
    pub w_gh: ParamId,
    pub w_ic: ParamId,
    pub w_fc: ParamId,
    pub w_oc: ParamId,
    pub b_i: ParamId,
    pub b_f: ParamId,
    pub b_o: ParamId,
    pub b_g: ParamId,
}

/// Initial forget-gate bias.
pub const FORGET_BIAS: f64 = 1.0;

impl ConvLstmCellParams {
    /// Registers a freshly initialised cell: Glorot-uniform kernels, zero
    /// peepholes and biases, forget bias [`FORGET_BIAS`].
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        in_channels: usize,
        hidden: usize,
        kernel: usize,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(config_err!("ConvLSTM kernel size must be odd, got {kernel}"));
        }
        if in_channels == 0 || hidden == 0 {
            return Err(config_err!("ConvLSTM channel counts must be positive"));
        }
        let kk = kernel * kernel;
        let mut conv = |name: &str, c_in: usize| {
            let t = glorot_uniform(rng, &[hidden, c_in, kernel, kernel], c_in * kk, hidden * kk);
            store.add(format!("{prefix}.{name}"), group, t)
        };
        let w_ix = conv("w_ix", in_channels);
        let w_ih = conv("w_ih", hidden);
        let w_fx = conv("w_fx", in_channels);
        let w_fh = conv("w_fh", hidden);
        let w_ox = conv("w_ox", in_channels);
        let w_oh = conv("w_oh", hidden);
        let w_gx = conv("w_gx", in_channels);
        let w_gh = conv("w_gh", hidden);
        let mut other = |name: &str, t: Tensor| store.add(format!("{prefix}.{name}"), group, t);
        let peep = Tensor::zeros(&[hidden, rows, cols]);
        let w_ic = other("w_ic", peep.clone());
        let w_fc = other("w_fc", peep.clone());
        let w_oc = other("w_oc", peep);
        let b_i = other("b_i", Tensor::zeros(&[hidden]));
        let b_f = other("b_f", Tensor::full(&[hidden], FORGET_BIAS));
        let b_o = other("b_o", Tensor::zeros(&[hidden]));
        let b_g = other("b_g", Tensor::zeros(&[hidden]));
        Ok(Self {
            in_channels,
            hidden,
            kernel,
            rows,
            cols,
            w_ix,
            w_ih,
            w_fx,
            w_fh,
            w_ox,
            w_oh,
            w_gx,
            w_gh,
            w_ic,
            w_fc,
            w_oc,
            b_i,
            b_f,
            b_o,
            b_g,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 15] {
        [
            self.w_ix, self.w_ih, self.w_fx, self.w_fh, self.w_ox, self.w_oh, self.w_gx, self.w_gh,
            self.w_ic, self.w_fc, self.w_oc, self.b_i, self.b_f, self.b_o, self.b_g,
        ]
    }
}

/// Hidden and cell state on a tape. `zero` marks the all-zero initial state,
/// whose recurrent and peephole terms vanish and are skipped.
#[derive(Debug, Clone, Copy)]
pub struct StateVars {
    pub h: Var,
    pub c: Var,
    zero: bool,
}

/// Concrete state values, `[n, hidden, rows, cols]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl StateVars {
    pub fn zeros(tape: &mut Tape, batch: usize, cell: &ConvLstmCellParams) -> Self {
        let z = Tensor::zeros(&[batch, cell.hidden, cell.rows, cell.cols]);
        let h = tape.constant(z.clone());
        let c = tape.constant(z);
        Self { h, c, zero: true }
    }

    pub fn from_vars(h: Var, c: Var) -> Self {
        Self { h, c, zero: false }
    }
}

/// Joins per-gate parameters along the leading (output channel) axis.
fn stacked(tape: &mut Tape, store: &ParamStore, ids: [ParamId; 4]) -> Result<Var> {
    let parts = ids.map(|id| tape.param(store, id));
    tape.concat(&parts, 0)
}

/// Pre-activations of all four gates from one convolution per input. The
/// result is split back into `[i, f, o, g]`.
fn gate_preactivations(
    tape: &mut Tape,
    store: &ParamStore,
    cell: &ConvLstmCellParams,
    x: Var,
    prev: &StateVars,
) -> Result<[Var; 4]> {
    let wx = stacked(tape, store, [cell.w_ix, cell.w_fx, cell.w_ox, cell.w_gx])?;
    let b = stacked(tape, store, [cell.b_i, cell.b_f, cell.b_o, cell.b_g])?;
    let mut pre = tape.conv2d(x, wx, Some(b))?;
    if !prev.zero {
        let wh = stacked(tape, store, [cell.w_ih, cell.w_fh, cell.w_oh, cell.w_gh])?;
        let rec = tape.conv2d(prev.h, wh, None)?;
        pre = tape.add(pre, rec)?;
    }
    let mut gates = [pre; 4];
    for (k, g) in gates.iter_mut().enumerate() {
        *g = tape.narrow(pre, 1, k * cell.hidden, cell.hidden)?;
    }
    if !prev.zero {
        let batch = tape.shape(x)[0];
        for (g, p) in gates.iter_mut().zip([cell.w_ic, cell.w_fc, cell.w_oc]) {
            let p = tape.param(store, p);
            let p = tape.repeat_leading(p, batch);
            let peep = tape.mul(p, prev.c)?;
            *g = tape.add(*g, peep)?;
        }
    }
    Ok(gates)
}

/// One recurrence step. `x` is `[n, c_in, rows, cols]`.
pub fn cell_step(
    tape: &mut Tape,
    store: &ParamStore,
    cell: &ConvLstmCellParams,
    x: Var,
    prev: &StateVars,
) -> Result<StateVars> {
    let xs = tape.shape(x);
    if xs.len() != 4 || xs[1] != cell.in_channels || xs[2] != cell.rows || xs[3] != cell.cols {
        return Err(dim_err!(
            "cell expects [n, {}, {}, {}], got {:?}",
            cell.in_channels,
            cell.rows,
            cell.cols,
            xs
        ));
    }
    if tape.shape(prev.c)[0] != xs[0] {
        return Err(dim_err!("state batch {} != input batch {}", tape.shape(prev.c)[0], xs[0]));
    }
    let [i, f, o, g] = gate_preactivations(tape, store, cell, x, prev)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let o = tape.sigmoid(o);
    let g = tape.tanh(g);
    let ig = tape.mul(i, g)?;
    let c = if prev.zero {
        ig
    } else {
        let fc = tape.mul(f, prev.c)?;
        tape.add(fc, ig)?
    };
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok(StateVars::from_vars(h, c))
}

/// Value-level single step, convenient outside training.
pub fn cell_step_values(
    store: &ParamStore,
    cell: &ConvLstmCellParams,
    x: &Tensor,
    prev: &ConvLstmState,
) -> Result<ConvLstmState> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let h = tape.constant(prev.h.clone());
    let c = tape.constant(prev.c.clone());
    let next = cell_step(&mut tape, store, cell, xv, &StateVars::from_vars(h, c))?;
    Ok(ConvLstmState { h: tape.value(next.h).clone(), c: tape.value(next.c).clone() })
}

/// Runs a cell over `[n, t, c_in, rows, cols]` from the zero state and
/// returns the hidden sequence `[n, t, hidden, rows, cols]`.
pub fn layer_forward(tape: &mut Tape, store: &ParamStore, cell: &ConvLstmCellParams, seq: Var) -> Result<Var> {
    let s = tape.shape(seq).to_vec();
    if s.len() != 5 {
        return Err(dim_err!("sequence must be [n, t, c, rows, cols], got {:?}", s));
    }
    let (n, steps) = (s[0], s[1]);
    if steps == 0 {
        return Err(data_err!("sequence has no time steps"));
    }
    let mut state = StateVars::zeros(tape, n, cell);
    let mut hidden = Vec::with_capacity(steps);
    for t in 0..steps {
        let x = tape.narrow(seq, 1, t, 1)?;
        let x = tape.reshape(x, &[n, s[2], s[3], s[4]])?;
        state = cell_step(tape, store, cell, x, &state)?;
        hidden.push(tape.reshape(state.h, &[n, 1, cell.hidden, s[3], s[4]])?);
    }
    if hidden.len() == 1 {
        return Ok(hidden[0]);
    }
    tape.concat(&hidden, 1)
}

/// Stack of ConvLSTM layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmStack {
    pub layers: Vec<ConvLstmCellParams>,
}

impl ConvLstmStack {
    /// Builds layers with the given hidden widths, chaining channels from
    /// `in_channels`.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        hidden: &[usize],
        kernel: usize,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if hidden.is_empty() {
            return Err(config_err!("ConvLSTM stack needs at least one layer"));
        }
        let mut layers = Vec::with_capacity(hidden.len());
        let mut c_in = in_channels;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(ConvLstmCellParams::init(
                store,
                &format!("{prefix}.{i}"),
                ParamGroup::Shared,
                c_in,
                h,
                kernel,
                rows,
                cols,
                rng,
            )?);
            c_in = h;
        }
        Ok(Self { layers })
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.hidden)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.param_ids()).collect()
    }

    /// Freezes or unfreezes every parameter of the stack.
    pub fn set_frozen(&self, store: &mut ParamStore, frozen: bool) {
        for id in self.param_ids() {
            store.get_mut(id).frozen = frozen;
        }
    }
}

/// Feeds each layer the previous layer's hidden sequence.
pub fn stack_forward(tape: &mut Tape, store: &ParamStore, stack: &ConvLstmStack, seq: Var) -> Result<Var> {
    let mut cur = seq;
    for (i, layer) in stack.layers.iter().enumerate() {
        let c = tape.shape(cur).get(2).copied().unwrap_or(0);
        if c != layer.in_channels {
            return Err(config_err!(
                "layer {} expects {} channels, receives {}",
                i,
                layer.in_channels,
                c
            ));
        }
        cur = layer_forward(tape, store, layer, cur)?;
    }
    Ok(cur)
}
