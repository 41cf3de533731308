//! Weighted dilated recurrent cells.
//!
//! A dilated cell reads its state one step back and `d` steps back:
//!
//! ```text
//! f, u, o = sigmoid(W x + V h_{t-1} + U h_{t-d} + b)
//! c~      = tanh(W_c x + V_c h_{t-1} + U_c h_{t-d} + b_c)
//! c_t     = u * (f * c_{t-1} + (1 - f) * c_{t-d}) + (1 - u) * c~
//! h'_t    = o * c_t
//! ```
//!
//! `h'` is split into a weight part `m` (first `s_m` slots) and the
//! controlling state `h`. In a weighted cell the bottom cell's `exp(m)`
//! rescales the input before it reaches the top cell.

use std::collections::VecDeque;

use rand_chacha::ChaCha8Rng;

use crate::data::CALENDAR_DIM;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const CALENDAR_EMBEDDING: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellShape {
    pub input: usize,
    pub s_m: usize,
    pub s_h: usize,
}

impl CellShape {
    pub fn width(&self) -> usize {
        self.s_m + self.s_h
    }

    /// Gate matrices are stacked `[f; u; o; c~]`, each block `width` rows.
    pub fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) -> Result<()> {
        let g = 4 * self.width();
        store.insert_uniform(&format!("{prefix}.W"), &[g, self.input], self.input, rng)?;
        store.insert_uniform(&format!("{prefix}.V"), &[g, self.s_h], self.s_h, rng)?;
        store.insert_uniform(&format!("{prefix}.U"), &[g, self.s_h], self.s_h, rng)?;
        store.insert(format!("{prefix}.b"), Tensor::zeros(&[g]))?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub shape: CellShape,
    pub w: Var,
    pub v: Var,
    pub u: Var,
    pub b: Var,
}

impl CellVars {
    pub fn bind(bound: &Bound, prefix: &str, shape: CellShape) -> Result<Self> {
        let g = |s: &str| bound.get(&format!("{prefix}.{s}"));
        Ok(Self {
            shape,
            w: g("W")?,
            v: g("V")?,
            u: g("U")?,
            b: g("b")?,
        })
    }
}

/// The last `d` controlling and cell states, oldest first.
#[derive(Clone, Debug)]
pub struct CellState {
    dilation: usize,
    h: VecDeque<Var>,
    c: VecDeque<Var>,
}

/// Plain values of a [`CellState`], for carrying across tapes.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSnapshot {
    pub dilation: usize,
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl CellSnapshot {
    pub fn zeros(dilation: usize, shape: CellShape) -> Self {
        Self {
            dilation,
            h: vec![vec![0.0; shape.s_h]; dilation],
            c: vec![vec![0.0; shape.width()]; dilation],
        }
    }
}

impl CellState {
    pub fn from_snapshot(tape: &mut Tape, snap: &CellSnapshot) -> Result<Self> {
        if snap.dilation == 0 || snap.h.len() != snap.dilation || snap.c.len() != snap.dilation {
            return Err(Error::Config(format!("cell state with dilation {} is malformed", snap.dilation)));
        }
        Ok(Self {
            dilation: snap.dilation,
            h: snap.h.iter().map(|v| tape.constant(Tensor::vector(v.clone()))).collect(),
            c: snap.c.iter().map(|v| tape.constant(Tensor::vector(v.clone()))).collect(),
        })
    }

    pub fn zeros(tape: &mut Tape, dilation: usize, shape: CellShape) -> Result<Self> {
        Self::from_snapshot(tape, &CellSnapshot::zeros(dilation, shape))
    }

    pub fn snapshot(&self, tape: &Tape) -> CellSnapshot {
        CellSnapshot {
            dilation: self.dilation,
            h: self.h.iter().map(|v| tape.value(*v).to_vec()).collect(),
            c: self.c.iter().map(|v| tape.value(*v).to_vec()).collect(),
        }
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    fn recent(&self) -> (Var, Var) {
        (self.h[self.dilation - 1], self.c[self.dilation - 1])
    }

    fn dilated(&self) -> (Var, Var) {
        (self.h[0], self.c[0])
    }

    fn push(&mut self, h: Var, c: Var) {
        self.h.pop_front();
        self.c.pop_front();
        self.h.push_back(h);
        self.c.push_back(c);
    }
}

/// One cell output: weight part `m` (empty when `s_m == 0`), state `h`, cell `c`.
#[derive(Clone, Copy, Debug)]
pub struct CellOutput {
    pub m: Option<Var>,
    pub h: Var,
    pub c: Var,
}

pub fn drnn_cell_forward(tape: &mut Tape, x: Var, state: &mut CellState, p: &CellVars) -> Result<CellOutput> {
    let s = p.shape;
    if tape.numel(x) != s.input {
        return Err(Error::Data(format!("cell input of {} values, expected {}", tape.numel(x), s.input)));
    }
    let n = s.width();
    let (h1, c1) = state.recent();
    let (hd, cd) = state.dilated();
    let wx = tape.matmul(p.w, x)?;
    let vh = tape.matmul(p.v, h1)?;
    let uh = tape.matmul(p.u, hd)?;
    let z = tape.add(wx, vh)?;
    let z = tape.add(z, uh)?;
    let z = tape.add(z, p.b)?;
    let gates = tape.slice(z, 0, 3 * n)?;
    let gates = tape.sigmoid(gates)?;
    let f = tape.slice(gates, 0, n)?;
    let u = tape.slice(gates, n, n)?;
    let o = tape.slice(gates, 2 * n, n)?;
    let cand = tape.slice(z, 3 * n, n)?;
    let cand = tape.tanh(cand)?;
    // c = u * (cd + f * (c1 - cd)) + (1 - u) * cand
    let gap = tape.sub(c1, cd)?;
    let mixed = tape.mul(f, gap)?;
    let mixed = tape.add(cd, mixed)?;
    let gap = tape.sub(mixed, cand)?;
    let kept = tape.mul(u, gap)?;
    let c = tape.add(cand, kept)?;
    let out = tape.mul(o, c)?;
    let (m, h) = if s.s_m == 0 {
        (None, out)
    } else {
        (Some(tape.slice(out, 0, s.s_m)?), tape.slice(out, s.s_m, s.s_h)?)
    };
    state.push(h, c);
    Ok(CellOutput { m, h, c })
}

/// Bottom and top cells of one weighted layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub input: usize,
    pub hidden: usize,
    /// Controlling-state width of the bottom cell.
    pub s_h: usize,
}

impl LayerShape {
    pub fn bottom(&self) -> CellShape {
        CellShape {
            input: self.input,
            s_m: self.input,
            s_h: self.s_h,
        }
    }

    pub fn top(&self) -> CellShape {
        CellShape {
            input: self.input,
            s_m: 0,
            s_h: self.hidden,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub bottom: CellVars,
    pub top: CellVars,
}

#[derive(Clone, Debug)]
pub struct LayerState {
    pub bottom: CellState,
    pub top: CellState,
}

/// `y_t` of a weighted cell: the top cell sees `exp(m_t) * x_t`.
pub fn wdrnn_cell_forward(tape: &mut Tape, x: Var, state: &mut LayerState, p: &LayerVars) -> Result<Var> {
    if p.bottom.shape.s_m != tape.numel(x) {
        return Err(Error::Data(format!(
            "weight slots {} do not match input width {}",
            p.bottom.shape.s_m,
            tape.numel(x)
        )));
    }
    let bottom = drnn_cell_forward(tape, x, &mut state.bottom, &p.bottom)?;
    let m = bottom.m.ok_or_else(|| Error::Data("bottom cell has no weight slots".into()))?;
    let a = tape.exp(m)?;
    let xa = tape.mul(a, x)?;
    Ok(drnn_cell_forward(tape, xa, &mut state.top, &p.top)?.h)
}

/// Stacked weighted layers with increasing dilations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StackShape {
    pub input: usize,
    pub hidden: usize,
    pub s_h: usize,
    pub dilations: Vec<usize>,
}

impl StackShape {
    pub fn layer(&self, i: usize) -> LayerShape {
        LayerShape {
            input: if i == 0 { self.input } else { self.hidden },
            hidden: self.hidden,
            s_h: self.s_h,
        }
    }

    pub fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::Config(format!("invalid dilations {:?}", self.dilations)));
        }
        for i in 0..self.dilations.len() {
            let l = self.layer(i);
            l.bottom().init(store, &format!("{prefix}.{i}.bottom"), rng)?;
            l.top().init(store, &format!("{prefix}.{i}.top"), rng)?;
        }
        Ok(())
    }

    pub fn bind(&self, bound: &Bound, prefix: &str) -> Result<Vec<LayerVars>> {
        (0..self.dilations.len())
            .map(|i| {
                let l = self.layer(i);
                Ok(LayerVars {
                    bottom: CellVars::bind(bound, &format!("{prefix}.{i}.bottom"), l.bottom())?,
                    top: CellVars::bind(bound, &format!("{prefix}.{i}.top"), l.top())?,
                })
            })
            .collect()
    }

    pub fn zero_state(&self) -> Vec<(CellSnapshot, CellSnapshot)> {
        self.dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let l = self.layer(i);
                (CellSnapshot::zeros(d, l.bottom()), CellSnapshot::zeros(d, l.top()))
            })
            .collect()
    }
}

pub type StackSnapshot = Vec<(CellSnapshot, CellSnapshot)>;

pub fn stack_state(tape: &mut Tape, snap: &StackSnapshot) -> Result<Vec<LayerState>> {
    snap.iter()
        .map(|(b, t)| {
            Ok(LayerState {
                bottom: CellState::from_snapshot(tape, b)?,
                top: CellState::from_snapshot(tape, t)?,
            })
        })
        .collect()
}

pub fn stack_snapshot(tape: &Tape, state: &[LayerState]) -> StackSnapshot {
    state
        .iter()
        .map(|l| (l.bottom.snapshot(tape), l.top.snapshot(tape)))
        .collect()
}

/// One step through every layer; layers after the first add their input.
pub fn stack_step(tape: &mut Tape, x: Var, state: &mut [LayerState], layers: &[LayerVars]) -> Result<Var> {
    if state.len() != layers.len() {
        return Err(Error::Data(format!("{} layer states for {} layers", state.len(), layers.len())));
    }
    let mut cur = x;
    for (i, (st, p)) in state.iter_mut().zip(layers).enumerate() {
        let y = wdrnn_cell_forward(tape, cur, st, p)?;
        cur = if i == 0 {
            y
        } else {
            if tape.numel(y) != tape.numel(cur) {
                return Err(Error::Data("residual width mismatch".into()));
            }
            tape.add(y, cur)?
        };
    }
    Ok(cur)
}

/// Runs a whole sequence from the given state.
pub fn stack_forward(tape: &mut Tape, xs: &[Var], state: &mut [LayerState], layers: &[LayerVars]) -> Result<Vec<Var>> {
    xs.iter().map(|&x| stack_step(tape, x, state, layers)).collect()
}

/// Sum of the embedding rows selected by a 74-slot calendar one-hot.
/// `embedding` is `[74, 8]`.
pub fn embed_calendar(tape: &mut Tape, onehot: &[f64], embedding: Var) -> Result<Var> {
    if onehot.len() != CALENDAR_DIM
        || onehot.iter().any(|v| *v != 0.0 && *v != 1.0)
        || onehot.iter().filter(|v| **v == 1.0).count() != 4
    {
        return Err(Error::Data("calendar encoding must be 74 slots with four ones".into()));
    }
    let row = tape.constant(Tensor::new(vec![1, CALENDAR_DIM], onehot.to_vec())?);
    let e = tape.matmul(row, embedding)?;
    let n = tape.numel(e);
    Ok(tape.reshape(e, &[n])?)
}
