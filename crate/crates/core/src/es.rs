//! Multiplicative level + seasonal exponential smoothing whose smoothing
//! coefficients are corrected at every step:
//!
//! ```text
//! alpha = sigmoid(alpha_logit + d_alpha)      beta = sigmoid(beta_logit + d_beta)
//! l_t     = alpha * z_t + (1 - alpha) * l_{t-1}
//! s_{t+p} = beta * z_t / l_t + (1 - beta) * s_t
//! ```
//!
//! [`EsState`] is the plain numeric form. [`TapeEs`] runs the same
//! recursion on a [`Tape`] so the corrections and logits receive gradients.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tape, Var};

pub const DEFAULT_LOGIT: f64 = -2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EsState {
    level: f64,
    /// `seasonal[0]` is the factor for the next step.
    seasonal: VecDeque<f64>,
    pub alpha_logit: f64,
    pub beta_logit: f64,
}

/// Initial level and seasonal factors from the first `2p` observations.
///
/// Level is the mean of the first period; factor `i` is the mean of
/// `z_i, z_{i+p}` over the level, renormalized to average one. Missing
/// observations (`mask == false`) are skipped.
pub fn es_init_masked(prefix: &[f64], mask: &[bool], period: usize) -> Result<EsState> {
    if period == 0 {
        return Err(Error::Data("seasonal period must be positive".into()));
    }
    if prefix.len() < 2 * period || mask.len() < 2 * period {
        return Err(Error::Data(format!(
            "smoothing init needs {} observations, got {}",
            2 * period,
            prefix.len()
        )));
    }
    let (z, m) = (&prefix[..2 * period], &mask[..2 * period]);
    if let Some(bad) = z.iter().zip(m).find(|(v, o)| **o && **v <= 0.0) {
        return Err(Error::Data(format!("smoothing init needs positive values, got {}", bad.0)));
    }
    let mean_of = |idx: &mut dyn Iterator<Item = usize>| {
        let (s, c) = idx.filter(|&i| m[i]).fold((0.0, 0usize), |(s, c), i| (s + z[i], c + 1));
        (c > 0).then(|| s / c as f64)
    };
    let level = mean_of(&mut (0..period))
        .or_else(|| mean_of(&mut (0..2 * period)))
        .ok_or_else(|| Error::Data("no observations in the first two periods".into()))?;
    let mut seasonal: VecDeque<f64> = (0..period)
        .map(|i| mean_of(&mut [i, i + period].into_iter()).map_or(1.0, |v| v / level))
        .collect();
    let avg = seasonal.iter().sum::<f64>() / period as f64;
    for s in seasonal.iter_mut() {
        *s /= avg;
    }
    Ok(EsState {
        level,
        seasonal,
        alpha_logit: DEFAULT_LOGIT,
        beta_logit: DEFAULT_LOGIT,
    })
}

pub fn es_init(prefix: &[f64], period: usize) -> Result<EsState> {
    es_init_masked(prefix, &vec![true; prefix.len()], period)
}

impl EsState {
    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn period(&self) -> usize {
        self.seasonal.len()
    }

    /// Factors for the next `p` steps, oldest first.
    pub fn seasonal(&self) -> impl Iterator<Item = f64> + '_ {
        self.seasonal.iter().copied()
    }

    /// Advances one step with observation `z`; returns `(l_t, s_{t+p})`.
    /// A non-positive `z` is rejected and leaves the state unchanged.
    pub fn step(&mut self, z: f64, delta_alpha: f64, delta_beta: f64) -> Result<(f64, f64)> {
        if !(z > 0.0) || !z.is_finite() {
            return Err(Error::Data(format!("smoothing step needs a positive value, got {z}")));
        }
        let alpha = sigmoid(self.alpha_logit + delta_alpha);
        let beta = sigmoid(self.beta_logit + delta_beta);
        let level = alpha * z + (1.0 - alpha) * self.level;
        let s_old = self.seasonal.pop_front().expect("ring holds p factors");
        let s_new = beta * z / level + (1.0 - beta) * s_old;
        self.seasonal.push_back(s_new);
        self.level = level;
        Ok((level, s_new))
    }

    /// Stored factor `offset` steps ahead (`0` is the next step).
    pub fn seasonal_lookup(&self, offset: usize) -> Result<f64> {
        self.seasonal
            .get(offset)
            .copied()
            .ok_or_else(|| Error::Data(format!("seasonal offset {offset} outside period {}", self.seasonal.len())))
    }
}

/// Detached smoothing state carried between tapes.
#[derive(Clone, Debug, PartialEq)]
pub struct EsSnapshot {
    pub level: f64,
    pub ring: Vec<f64>,
    pub history: Vec<f64>,
}

impl EsSnapshot {
    pub fn from_state(s: &EsState) -> Self {
        Self {
            level: s.level,
            ring: s.seasonal.iter().copied().collect(),
            history: Vec::new(),
        }
    }
}

/// Smoothing state living on a tape.
///
/// Besides the ring of upcoming factors, it keeps the last `keep` factors
/// that were consumed, i.e. the factor that applied to each recent step.
#[derive(Clone, Debug)]
pub struct TapeEs {
    level: Var,
    ring: VecDeque<Var>,
    history: VecDeque<Var>,
    keep: usize,
}

impl TapeEs {
    pub fn from_snapshot(tape: &mut Tape, snap: &EsSnapshot, keep: usize) -> Self {
        let level = tape.scalar(snap.level);
        let ring = snap.ring.iter().map(|&v| tape.scalar(v)).collect();
        let skip = snap.history.len().saturating_sub(keep);
        let history = snap.history[skip..].iter().map(|&v| tape.scalar(v)).collect();
        Self {
            level,
            ring,
            history,
            keep,
        }
    }

    pub fn snapshot(&self, tape: &Tape) -> EsSnapshot {
        let get = |v: &Var| tape.value(*v)[0];
        EsSnapshot {
            level: get(&self.level),
            ring: self.ring.iter().map(get).collect(),
            history: self.history.iter().map(get).collect(),
        }
    }

    pub fn level(&self) -> Var {
        self.level
    }

    pub fn period(&self) -> usize {
        self.ring.len()
    }

    /// Consumed factors, oldest first.
    pub fn history(&self) -> &VecDeque<Var> {
        &self.history
    }

    /// Factors for the next `len` steps, repeating the ring's phases past `p`.
    pub fn upcoming(&self, len: usize) -> Vec<Var> {
        let p = self.ring.len();
        (0..len).map(|i| self.ring[i % p]).collect()
    }

    /// One smoothing step. With `z == None` (missing observation) the level
    /// is held and the consumed factor is carried forward unchanged.
    pub fn step(
        &mut self,
        tape: &mut Tape,
        z: Option<f64>,
        alpha_logit: Var,
        beta_logit: Var,
        delta_alpha: Option<Var>,
        delta_beta: Option<Var>,
    ) -> Result<()> {
        let s_old = self.ring.pop_front().ok_or_else(|| Error::Data("empty seasonal ring".into()))?;
        let s_new = match z {
            Some(z) if z > 0.0 => {
                let a_arg = match delta_alpha {
                    Some(d) => tape.add(alpha_logit, d)?,
                    None => alpha_logit,
                };
                let b_arg = match delta_beta {
                    Some(d) => tape.add(beta_logit, d)?,
                    None => beta_logit,
                };
                let alpha = tape.sigmoid(a_arg)?;
                let beta = tape.sigmoid(b_arg)?;
                // l = l_prev + alpha * (z - l_prev)
                let zc = tape.scalar(z);
                let gap = tape.sub(zc, self.level)?;
                let moved = tape.mul(alpha, gap)?;
                let level = tape.add(self.level, moved)?;
                // s_new = s_old + beta * (z / l - s_old)
                let ratio = tape.div(zc, level)?;
                let gap = tape.sub(ratio, s_old)?;
                let moved = tape.mul(beta, gap)?;
                let s_new = tape.add(s_old, moved)?;
                self.level = level;
                s_new
            }
            Some(z) => return Err(Error::Data(format!("smoothing step needs a positive value, got {z}"))),
            None => s_old,
        };
        self.ring.push_back(s_new);
        self.history.push_back(s_old);
        while self.history.len() > self.keep {
            self.history.pop_front();
        }
        Ok(())
    }
}
