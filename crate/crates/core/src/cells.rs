//! Recurrent convolutional cells sharing one step interface:
//! `(input frame, state) -> (output, new state)`.
//!
//! Every product with a kernel is a same-padded 3x3 convolution. Each gate
//! carries one bias (zero at initialization, which reduces the step to the
//! bias-free gate equations).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    FeedforwardConv,
    GruConv,
    LstmConv,
    ElmanConv,
    RgConv,
}

/// What a parameter tensor connects.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// input channels -> output channels
    Input,
    /// output channels -> output channels
    Recurrent,
    Bias,
}

type ParamList = &'static [(&'static str, ParamRole)];

use ParamRole::{Bias, Input, Recurrent};

const FEEDFORWARD: ParamList = &[("w", Input), ("b", Bias)];
const GRU: ParamList = &[
    ("w_zx", Input),
    ("w_zh", Recurrent),
    ("b_z", Bias),
    ("w_rx", Input),
    ("w_rh", Recurrent),
    ("b_r", Bias),
    ("w_hx", Input),
    ("w_hh", Recurrent),
    ("b_h", Bias),
];
const LSTM: ParamList = &[
    ("w_ix", Input),
    ("w_ih", Recurrent),
    ("b_i", Bias),
    ("w_fx", Input),
    ("w_fh", Recurrent),
    ("b_f", Bias),
    ("w_ox", Input),
    ("w_oh", Recurrent),
    ("b_o", Bias),
    ("w_gx", Input),
    ("w_gh", Recurrent),
    ("b_g", Bias),
];
const ELMAN: ParamList = &[("w_h", Recurrent), ("b_h", Bias), ("w_x", Input), ("b_x", Bias)];
const RG: ParamList = &[
    ("w_ch", Recurrent),
    ("b_ch", Bias),
    ("w_xh", Input),
    ("w_hh", Recurrent),
    ("b_hh", Bias),
    ("w_h", Recurrent),
    ("w_hc", Recurrent),
    ("b_hc", Bias),
    ("w_xc", Input),
    ("w_cc", Recurrent),
    ("b_cc", Bias),
    ("w_c", Recurrent),
];

impl CellKind {
    pub const ALL: [CellKind; 5] = [
        CellKind::FeedforwardConv,
        CellKind::GruConv,
        CellKind::LstmConv,
        CellKind::ElmanConv,
        CellKind::RgConv,
    ];

    pub fn param_list(self) -> ParamList {
        match self {
            CellKind::FeedforwardConv => FEEDFORWARD,
            CellKind::GruConv => GRU,
            CellKind::LstmConv => LSTM,
            CellKind::ElmanConv => ELMAN,
            CellKind::RgConv => RG,
        }
    }

    pub fn is_recurrent(self) -> bool {
        self != CellKind::FeedforwardConv
    }

    /// LSTM and RG cells carry a second state tensor.
    pub fn has_cell_state(self) -> bool {
        matches!(self, CellKind::LstmConv | CellKind::RgConv)
    }

    /// `(name, shape, fan_in)` for every parameter in step order.
    pub fn param_shapes(self, in_ch: usize, out_ch: usize) -> Vec<(&'static str, Vec<usize>, usize)> {
        conv_shapes(self.param_list(), in_ch, out_ch)
    }
}

fn conv_shapes(list: ParamList, in_ch: usize, out_ch: usize) -> Vec<(&'static str, Vec<usize>, usize)> {
    list.iter()
        .map(|&(name, role)| match role {
            Input => (name, vec![out_ch, in_ch, 3, 3], in_ch * 9),
            Recurrent => (name, vec![out_ch, out_ch, 3, 3], out_ch * 9),
            Bias => (name, vec![out_ch], 1),
        })
        .collect()
}

/// `(name, shape, fan_in)` for the fully connected GRU used by ablations.
pub fn gru_dense_param_shapes(inputs: usize, units: usize) -> Vec<(&'static str, Vec<usize>, usize)> {
    GRU.iter()
        .map(|&(name, role)| match role {
            Input => (name, vec![units, inputs], inputs),
            Recurrent => (name, vec![units, units], units),
            Bias => (name, vec![units], 1),
        })
        .collect()
}

/// Recurrent state of one layer.
#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub hidden: Var,
    pub cell: Option<Var>,
}

impl CellState {
    /// Zero state (`h_0 = 0`, `c_0 = 0`) of shape `shape`.
    pub fn zeros<T: Element>(g: &mut Graph<T>, kind: CellKind, shape: &[usize]) -> Self {
        let hidden = g.input(Tensor::zeros(shape.to_vec()));
        let cell = kind.has_cell_state().then(|| g.input(Tensor::zeros(shape.to_vec())));
        CellState { hidden, cell }
    }
}

fn check_frame<T: Element>(g: &Graph<T>, x: Var, h: Var) -> Result<()> {
    let (xs, hs) = (g.shape(x), g.shape(h));
    let ok = xs.len() == hs.len() && xs[0] == hs[0] && xs[2..] == hs[2..];
    if !ok {
        return Err(Error::shape(format!(
            "frame {xs:?} and hidden state {hs:?} differ in batch or spatial extents"
        )));
    }
    Ok(())
}

fn take<const N: usize>(kind: &str, params: &[Var]) -> Result<[Var; N]> {
    params
        .try_into()
        .map_err(|_| Error::invalid(format!("{kind} expects {N} parameters, got {}", params.len())))
}

fn cell_of(state: &CellState, kind: &str) -> Result<Var> {
    state
        .cell
        .ok_or_else(|| Error::invalid(format!("{kind} needs a cell state")))
}

/// `sigma(w_x * x + b + w_h * h)` style gate pre-activation.
fn gate_pre<T: Element>(g: &mut Graph<T>, x: Var, wx: Var, b: Var, h: Var, wh: Var) -> Result<Var> {
    let a = g.conv2d(x, wx, Some(b))?;
    let r = g.conv2d(h, wh, None)?;
    g.add(a, r)
}

/// `relu(conv(x))`; stateless.
pub fn feedforward_conv_step<T: Element>(g: &mut Graph<T>, x: Var, params: &[Var]) -> Result<Var> {
    let [w, b] = take("feedforward conv", params)?;
    let y = g.conv2d(x, w, Some(b))?;
    Ok(g.relu(y))
}

/// Convolutional GRU:
/// `z = σ(W_zh*h + W_zx*x)`, `r = σ(W_rh*h + W_rx*x)`,
/// `ĥ = tanh(W_hh*(r∘h) + W_hx*x)`, `h' = z∘h + (1−z)∘ĥ`.
pub fn gru_conv_step<T: Element>(g: &mut Graph<T>, x: Var, h: Var, params: &[Var]) -> Result<Var> {
    check_frame(g, x, h)?;
    let [w_zx, w_zh, b_z, w_rx, w_rh, b_r, w_hx, w_hh, b_h] = take("gru conv", params)?;
    let z = gate_pre(g, x, w_zx, b_z, h, w_zh)?;
    let z = g.sigmoid(z);
    let r = gate_pre(g, x, w_rx, b_r, h, w_rh)?;
    let r = g.sigmoid(r);
    let rh = g.hadamard(r, h)?;
    let cand = gate_pre(g, x, w_hx, b_h, rh, w_hh)?;
    let cand = g.tanh(cand);
    gru_blend(g, z, h, cand)
}

fn gru_blend<T: Element>(g: &mut Graph<T>, z: Var, h: Var, cand: Var) -> Result<Var> {
    let keep = g.hadamard(z, h)?;
    let one_minus_z = g.one_minus(z);
    let fresh = g.hadamard(one_minus_z, cand)?;
    g.add(keep, fresh)
}

/// Peephole-free convolutional LSTM. Returns the new `(h, c)`.
pub fn lstm_conv_step<T: Element>(g: &mut Graph<T>, x: Var, state: &CellState, params: &[Var]) -> Result<CellState> {
    let h = state.hidden;
    let c = cell_of(state, "lstm conv")?;
    check_frame(g, x, h)?;
    let [w_ix, w_ih, b_i, w_fx, w_fh, b_f, w_ox, w_oh, b_o, w_gx, w_gh, b_g] = take("lstm conv", params)?;
    let i = gate_pre(g, x, w_ix, b_i, h, w_ih)?;
    let i = g.sigmoid(i);
    let f = gate_pre(g, x, w_fx, b_f, h, w_fh)?;
    let f = g.sigmoid(f);
    let o = gate_pre(g, x, w_ox, b_o, h, w_oh)?;
    let o = g.sigmoid(o);
    let cand = gate_pre(g, x, w_gx, b_g, h, w_gh)?;
    let cand = g.tanh(cand);
    let kept = g.hadamard(f, c)?;
    let written = g.hadamard(i, cand)?;
    let c_new = g.add(kept, written)?;
    let squashed = g.tanh(c_new);
    let h_new = g.hadamard(o, squashed)?;
    Ok(CellState {
        hidden: h_new,
        cell: Some(c_new),
    })
}

/// Local Elman recurrence `h' = σ(W_h*h) + W_x*x`; the sum itself is not
/// squashed, so the state is unbounded.
pub fn elman_conv_step<T: Element>(g: &mut Graph<T>, x: Var, h: Var, params: &[Var]) -> Result<Var> {
    check_frame(g, x, h)?;
    let [w_h, b_h, w_x, b_x] = take("elman conv", params)?;
    let rec = g.conv2d(h, w_h, Some(b_h))?;
    let rec = g.sigmoid(rec);
    let drive = g.conv2d(x, w_x, Some(b_x))?;
    g.add(rec, drive)
}

/// Recurrent gated cell:
/// `h' = (1−σ(W_ch*c))∘(W_xh*x) + (1−σ(W_hh*h))∘(W_h*h)`,
/// `c' = (1−σ(W_hc*h))∘(W_xc*x) + (1−σ(W_cc*c))∘(W_c*c)`.
pub fn rg_conv_step<T: Element>(g: &mut Graph<T>, x: Var, state: &CellState, params: &[Var]) -> Result<CellState> {
    let h = state.hidden;
    let c = cell_of(state, "rg conv")?;
    check_frame(g, x, h)?;
    let [w_ch, b_ch, w_xh, w_hh, b_hh, w_h, w_hc, b_hc, w_xc, w_cc, b_cc, w_c] = take("rg conv", params)?;

    let gated = |g: &mut Graph<T>, gate_src: Var, w_gate: Var, b_gate: Var, src: Var, w: Var| -> Result<Var> {
        let pre = g.conv2d(gate_src, w_gate, Some(b_gate))?;
        let s = g.sigmoid(pre);
        let open = g.one_minus(s);
        let drive = g.conv2d(src, w, None)?;
        g.hadamard(open, drive)
    };
    let h_in = gated(g, c, w_ch, b_ch, x, w_xh)?;
    let h_rec = gated(g, h, w_hh, b_hh, h, w_h)?;
    let c_in = gated(g, h, w_hc, b_hc, x, w_xc)?;
    let c_rec = gated(g, c, w_cc, b_cc, c, w_c)?;
    Ok(CellState {
        hidden: g.add(h_in, h_rec)?,
        cell: Some(g.add(c_in, c_rec)?),
    })
}

/// One step of any convolutional cell. Feedforward cells ignore and return
/// no state.
pub fn conv_cell_step<T: Element>(
    g: &mut Graph<T>,
    kind: CellKind,
    x: Var,
    state: Option<&CellState>,
    params: &[Var],
) -> Result<(Var, Option<CellState>)> {
    let need = |s: Option<&CellState>| s.copied().ok_or_else(|| Error::invalid(format!("{kind:?} needs a state")));
    match kind {
        CellKind::FeedforwardConv => Ok((feedforward_conv_step(g, x, params)?, None)),
        CellKind::GruConv => {
            let s = need(state)?;
            let h = gru_conv_step(g, x, s.hidden, params)?;
            Ok((h, Some(CellState { hidden: h, cell: None })))
        }
        CellKind::ElmanConv => {
            let s = need(state)?;
            let h = elman_conv_step(g, x, s.hidden, params)?;
            Ok((h, Some(CellState { hidden: h, cell: None })))
        }
        CellKind::LstmConv => {
            let s = lstm_conv_step(g, x, &need(state)?, params)?;
            Ok((s.hidden, Some(s)))
        }
        CellKind::RgConv => {
            let s = rg_conv_step(g, x, &need(state)?, params)?;
            Ok((s.hidden, Some(s)))
        }
    }
}

/// Fully connected GRU over `[batch, n]` inputs and `[batch, m]` state.
pub fn gru_dense_step<T: Element>(g: &mut Graph<T>, x: Var, h: Var, params: &[Var]) -> Result<Var> {
    let [w_zx, w_zh, b_z, w_rx, w_rh, b_r, w_hx, w_hh, b_h] = take("gru dense", params)?;
    let (xs, hs) = (g.shape(x), g.shape(h));
    if xs.len() != 2 || hs.len() != 2 || xs[0] != hs[0] {
        return Err(Error::shape(format!(
            "gru dense input {xs:?} and state {hs:?} disagree"
        )));
    }
    let pre = |g: &mut Graph<T>, wx: Var, b: Var, src: Var, wh: Var| -> Result<Var> {
        let a = g.dense(x, wx, Some(b))?;
        let r = g.dense(src, wh, None)?;
        g.add(a, r)
    };
    let z = pre(g, w_zx, b_z, h, w_zh)?;
    let z = g.sigmoid(z);
    let r = pre(g, w_rx, b_r, h, w_rh)?;
    let r = g.sigmoid(r);
    let rh = g.hadamard(r, h)?;
    let cand = pre(g, w_hx, b_h, rh, w_hh)?;
    let cand = g.tanh(cand);
    gru_blend(g, z, h, cand)
}
