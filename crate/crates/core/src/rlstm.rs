//! Relational LSTM: an LSTM whose input-to-state and state-to-state
//! transitions are generalised non-local operations.
//!
//! ```text
//! i_t = σ(r_ix(X_t, X_t) + r_ih(X_t, H_{t-1}))
//! f_t = σ(r_fx(X_t, X_t) + r_fh(X_t, H_{t-1}))
//! o_t = σ(r_ox(X_t, X_t) + r_oh(X_t, H_{t-1}))
//! g_t = tanh(r_gx(X_t, X_t) + r_gh(X_t, H_{t-1}))
//! C_t = f_t ∘ C_{t-1} + i_t ∘ g_t
//! H_t = o_t ∘ tanh(C_t)
//! ```
//!
//! Inputs are flattened feature maps of shape `(H·W) × C`; hidden and cell
//! states are `(H·W) × C/2`. No bias terms.

use rand::Rng;

use crate::autograd::{ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::nonlocal::{self, NonLocalIds, NonLocalParams, Normalizer};
use crate::tensor::{self, Shape3, Tensor};

/// Suffixes of the eight `r(·,·)` instances, in storage order.
pub const GATE_INSTANCES: [&str; 8] = ["r_ix", "r_ih", "r_fx", "r_fh", "r_ox", "r_oh", "r_gx", "r_gh"];

#[derive(Clone, Debug, PartialEq)]
pub struct RLSTMParams {
    pub r_ix: NonLocalParams,
    pub r_ih: NonLocalParams,
    pub r_fx: NonLocalParams,
    pub r_fh: NonLocalParams,
    pub r_ox: NonLocalParams,
    pub r_oh: NonLocalParams,
    pub r_gx: NonLocalParams,
    pub r_gh: NonLocalParams,
}

impl RLSTMParams {
    fn build(c: usize, mut make: impl FnMut(usize, usize, usize, usize) -> NonLocalParams) -> Self {
        let half = c / 2;
        let mut x = || make(c, c, half, half);
        let (r_ix, r_fx, r_ox, r_gx) = (x(), x(), x(), x());
        let mut h = || make(c, half, half, half);
        let (r_ih, r_fh, r_oh, r_gh) = (h(), h(), h(), h());
        RLSTMParams {
            r_ix,
            r_ih,
            r_fx,
            r_fh,
            r_ox,
            r_oh,
            r_gx,
            r_gh,
        }
    }

    /// All-zero weights for input width `c` (`c` even).
    pub fn zeros(c: usize) -> Self {
        Self::build(c, NonLocalParams::zeros)
    }

    pub fn xavier<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        Self::build(c, |cx, cy, cz, ce| NonLocalParams::xavier(cx, cy, cz, ce, rng))
    }

    pub fn instances(&self) -> [(&'static str, &NonLocalParams); 8] {
        [
            ("r_ix", &self.r_ix),
            ("r_ih", &self.r_ih),
            ("r_fx", &self.r_fx),
            ("r_fh", &self.r_fh),
            ("r_ox", &self.r_ox),
            ("r_oh", &self.r_oh),
            ("r_gx", &self.r_gx),
            ("r_gh", &self.r_gh),
        ]
    }

    /// Input channel count `C`.
    pub fn input_channels(&self) -> usize {
        self.r_ix.w_theta.shape()[0]
    }

    fn check(&self, x: &Tensor, state: &RLSTMState) -> Result<()> {
        let (n, c) = x.dims2("rlstm_step")?;
        let half = c / 2;
        if c % 2 != 0 || c != self.input_channels() {
            return Err(Error::shape("rlstm_step", x.shape(), self.r_ix.w_theta.shape()));
        }
        if state.h.shape() != [n, half] || state.c.shape() != [n, half] {
            return Err(Error::shape("rlstm_step", x.shape(), state.h.shape()));
        }
        for (name, p) in self.instances() {
            let c_y = if name.ends_with('x') { c } else { half };
            let ok = p.w_theta.shape()[0] == c && p.w_phi.shape()[0] == c_y && p.output_channels() == half;
            if !ok {
                return Err(Error::shape("rlstm_step", x.shape(), p.w_phi.shape()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RLSTMState {
    /// `(H·W) × C/2`
    pub h: Tensor,
    /// `(H·W) × C/2`
    pub c: Tensor,
}

impl RLSTMState {
    pub fn zeros(positions: usize, half_channels: usize) -> Self {
        RLSTMState {
            h: Tensor::zeros(&[positions, half_channels]),
            c: Tensor::zeros(&[positions, half_channels]),
        }
    }
}

/// Gate activations of one step, each `(H·W) × C/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gates {
    pub i: Tensor,
    pub f: Tensor,
    pub o: Tensor,
    pub g: Tensor,
}

/// One cell update; also returns the gate activations.
pub fn rlstm_step_with_gates(x: &Tensor, state: &RLSTMState, params: &RLSTMParams) -> Result<(RLSTMState, Gates)> {
    params.check(x, state)?;
    let pre = |rx: &NonLocalParams, rh: &NonLocalParams| -> Result<Tensor> {
        tensor::add(&nonlocal::r(x, x, rx)?, &nonlocal::r(x, &state.h, rh)?)
    };
    let i = tensor::sigmoid(&pre(&params.r_ix, &params.r_ih)?);
    let f = tensor::sigmoid(&pre(&params.r_fx, &params.r_fh)?);
    let o = tensor::sigmoid(&pre(&params.r_ox, &params.r_oh)?);
    let g = tensor::tanh(&pre(&params.r_gx, &params.r_gh)?);
    let c = tensor::add(&tensor::hadamard(&f, &state.c)?, &tensor::hadamard(&i, &g)?)?;
    let h = tensor::hadamard(&o, &tensor::tanh(&c))?;
    Ok((RLSTMState { h, c }, Gates { i, f, o, g }))
}

pub fn rlstm_step(x: &Tensor, state: &RLSTMState, params: &RLSTMParams) -> Result<RLSTMState> {
    rlstm_step_with_gates(x, state, params).map(|(s, _)| s)
}

/// Result of unrolling the cell over a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub last: RLSTMState,
    /// `H_1 … H_T`, present only when requested.
    pub hidden: Option<Vec<Tensor>>,
}

/// Folds [`rlstm_step`] over `xs` from the zero state `H_0 = C_0 = 0`.
pub fn rlstm_sequence(xs: &[Tensor], params: &RLSTMParams, keep_hidden: bool) -> Result<Rollout> {
    let first = xs.first().ok_or(Error::EmptySequence)?;
    let (n, c) = first.dims2("rlstm_sequence")?;
    if let Some(bad) = xs.iter().find(|x| x.shape() != first.shape()) {
        return Err(Error::shape("rlstm_sequence", first.shape(), bad.shape()));
    }
    let mut state = RLSTMState::zeros(n, c / 2);
    let mut hidden = keep_hidden.then(|| Vec::with_capacity(xs.len()));
    for x in xs {
        state = rlstm_step(x, &state, params)?;
        if let Some(hs) = hidden.as_mut() {
            hs.push(state.h.clone());
        }
    }
    Ok(Rollout { last: state, hidden })
}

/// `H×W×C` feature maps to `(H·W)×C`; position `(i, j)` becomes row `i·W+j`.
pub fn flatten_features(x: &Tensor) -> Result<Tensor> {
    match x.shape() {
        &[h, w, c] => tensor::reshape(x, &[h * w, c]),
        _ => Err(Error::InvalidShape {
            op: "flatten_features",
            shape: x.shape().to_vec(),
            reason: "expected H×W×C",
        }),
    }
}

/// `(H·W)×C/2` hidden state back to `H×W×C/2`; row `i·W+j` lands at `(i, j)`.
pub fn unflatten_hidden(h: &Tensor, shape: Shape3) -> Result<Tensor> {
    let (n, c) = h.dims2("unflatten_hidden")?;
    if n != shape.positions() || c != shape.half_channels() {
        return Err(Error::shape("unflatten_hidden", h.shape(), &[shape.h, shape.w, shape.half_channels()]));
    }
    tensor::reshape(h, &[shape.h, shape.w, c])
}

/// Parameter handles of the eight instances inside a [`ParamSet`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RLSTMIds {
    pub instances: [NonLocalIds; 8],
}

/// Differentiable cell state on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TapeState {
    pub h: Var,
    pub c: Var,
}

impl RLSTMIds {
    /// Registers `{prefix}.r_ix.w_theta`, … for all eight instances.
    pub fn register(params: &mut ParamSet, prefix: &str, init: RLSTMParams) -> Result<Self> {
        let mut ids = Vec::with_capacity(8);
        for (name, p) in init.instances() {
            ids.push(NonLocalIds::register(params, &format!("{prefix}.{name}"), p.clone())?);
        }
        let instances: [NonLocalIds; 8] = ids.try_into().expect("eight instances");
        Ok(RLSTMIds { instances })
    }

    pub fn values(&self, params: &ParamSet) -> RLSTMParams {
        let v = |k: usize| self.instances[k].values(params);
        RLSTMParams {
            r_ix: v(0),
            r_ih: v(1),
            r_fx: v(2),
            r_fh: v(3),
            r_ox: v(4),
            r_oh: v(5),
            r_gx: v(6),
            r_gh: v(7),
        }
    }

    /// Records one cell update on `tape`.
    pub fn step(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: Var,
        state: TapeState,
        normalizer: Normalizer,
    ) -> Result<TapeState> {
        let mut pre = |k: usize| -> Result<Var> {
            let spatial = self.instances[2 * k].apply(tape, params, x, x, normalizer)?;
            let temporal = self.instances[2 * k + 1].apply(tape, params, x, state.h, normalizer)?;
            tape.add(spatial, temporal)
        };
        let (pi, pf, po, pg) = (pre(0)?, pre(1)?, pre(2)?, pre(3)?);
        let i = tape.sigmoid(pi);
        let f = tape.sigmoid(pf);
        let o = tape.sigmoid(po);
        let g = tape.tanh(pg);
        let keep = tape.hadamard(f, state.c)?;
        let write = tape.hadamard(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c);
        let h = tape.hadamard(o, tc)?;
        Ok(TapeState { h, c })
    }

    /// Unrolls over `xs` from the zero state and returns the final state.
    pub fn sequence(&self, tape: &mut Tape, params: &ParamSet, xs: &[Var], normalizer: Normalizer) -> Result<TapeState> {
        let first = *xs.first().ok_or(Error::EmptySequence)?;
        let (n, c) = tape.value(first).dims2("rlstm_sequence")?;
        let zero = Tensor::zeros(&[n, c / 2]);
        let mut state = TapeState {
            h: tape.leaf(zero.clone()),
            c: tape.leaf(zero),
        };
        for &x in xs {
            state = self.step(tape, params, x, state, normalizer)?;
        }
        Ok(state)
    }
}
