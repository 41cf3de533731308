//! Context track: spectral features of a context window, two residual
//! depthwise-separable convolution blocks, and a linear reduction to the
//! per-series context vector plus smoothing corrections.

use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{FftPlan, Padding, Tape, Tensor, TensorError, Var};

/// Re, Im, magnitude, phase, raw input.
pub const FEATURE_CHANNELS: usize = 5;

/// Cached DFT plan for one window length.
#[derive(Clone, Debug)]
pub struct Spectrum {
    plan: FftPlan,
    window: usize,
}

impl Spectrum {
    pub fn new(window: usize) -> Result<Self> {
        if window < 2 {
            return Err(Error::Config(format!("spectral window {window} is shorter than 2")));
        }
        Ok(Self {
            plan: FftPlan::new(window),
            window,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Full-length complex DFT, `X[k] = sum_t x_t e^{-2 pi i k t / W}`.
    pub fn transform(&self, x: &[f64]) -> Result<Vec<Complex64>> {
        self.check(x)?;
        Ok(self.plan.transform(x))
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.window {
            return Err(TensorError::ShapeMismatch {
                op: "fft",
                detail: format!("{} samples for window {}", x.len(), self.window),
            }
            .into());
        }
        Ok(())
    }

    /// The four spectral channels as a flat `[4, W]` row-major buffer.
    pub fn spectral_channels(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(self.plan.channels(x))
    }

    /// `[5, W]` stack: Re, Im, |X|, phase, x.
    pub fn features(&self, x: &[f64]) -> Result<Tensor> {
        let mut v = self.spectral_channels(x)?;
        v.extend_from_slice(x);
        Ok(Tensor::new(vec![FEATURE_CHANNELS, self.window], v)?)
    }

    /// The stack on a tape, differentiable in `x` through every channel.
    pub fn features_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let c = tape.spectrum(x, &self.plan)?;
        let joined = tape.concat(&[c, x])?;
        Ok(tape.reshape(joined, &[FEATURE_CHANNELS, self.window])?)
    }
}

/// Convenience wrapper planning a fresh transform.
pub fn fft_features(x: &[f64]) -> Result<Tensor> {
    Spectrum::new(x.len())?.features(x)
}

/// Shape settings of the convolution stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub window: usize,
    /// Context slots per series (`u`).
    pub slots: usize,
    pub channels: usize,
    pub kernel: usize,
}

impl ConvShape {
    pub fn outputs(&self) -> usize {
        self.slots + 2
    }

    /// Registers the stack's parameters under `prefix`.
    pub fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) -> Result<()> {
        let (c, k, w) = (self.channels, self.kernel, self.window);
        store.insert_uniform(&format!("{prefix}.dw1"), &[FEATURE_CHANNELS, k], k, rng)?;
        store.insert_uniform(&format!("{prefix}.pw1"), &[c, FEATURE_CHANNELS], FEATURE_CHANNELS, rng)?;
        store.insert_uniform(&format!("{prefix}.res1"), &[c, FEATURE_CHANNELS], FEATURE_CHANNELS, rng)?;
        store.insert_uniform(&format!("{prefix}.dw2"), &[c, k], k, rng)?;
        store.insert_uniform(&format!("{prefix}.pw2"), &[c, c], c, rng)?;
        store.insert_uniform(&format!("{prefix}.reduce"), &[self.outputs(), c * w], c * w, rng)?;
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[self.outputs()]))?;
        Ok(())
    }
}

/// Bound convolution parameters.
#[derive(Clone, Copy, Debug)]
pub struct ConvStack {
    pub dw1: Var,
    pub pw1: Var,
    pub res1: Var,
    pub dw2: Var,
    pub pw2: Var,
    pub reduce: Var,
    pub bias: Var,
}

impl ConvStack {
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        let g = |s: &str| bound.get(&format!("{prefix}.{s}"));
        Ok(Self {
            dw1: g("dw1")?,
            pw1: g("pw1")?,
            res1: g("res1")?,
            dw2: g("dw2")?,
            pw2: g("pw2")?,
            reduce: g("reduce")?,
            bias: g("bias")?,
        })
    }
}

/// `stack [5, W]` to `u + 2` outputs; the last two are the smoothing
/// corrections for the context series itself.
///
/// Each block is `relu(pointwise(depthwise(x)) + residual(x))`, where the
/// first block's residual is a learned 1x1 projection and the second's is
/// the identity.
pub fn context_conv_forward(tape: &mut Tape, stack: Var, p: &ConvStack) -> Result<Var> {
    let dw = tape.conv1d_depthwise(stack, p.dw1, Padding::Same)?;
    let pw = tape.conv1d_pointwise(dw, p.pw1)?;
    let skip = tape.conv1d_pointwise(stack, p.res1)?;
    let sum = tape.add(pw, skip)?;
    let h1 = tape.relu(sum)?;
    let dw = tape.conv1d_depthwise(h1, p.dw2, Padding::Same)?;
    let pw = tape.conv1d_pointwise(dw, p.pw2)?;
    let sum = tape.add(pw, h1)?;
    let h2 = tape.relu(sum)?;
    let n = tape.numel(h2);
    let flat = tape.reshape(h2, &[n])?;
    let out = tape.matmul(p.reduce, flat)?;
    Ok(tape.add(out, p.bias)?)
}

/// Concatenates `K` per-series vectors of `u` values in batch order.
pub fn assemble_context(tape: &mut Tape, parts: &[Var], k: usize, u: usize) -> Result<Var> {
    if parts.len() != k {
        return Err(Error::Data(format!("{} context vectors for a batch of {k}", parts.len())));
    }
    if let Some(bad) = parts.iter().find(|&&v| tape.numel(v) != u) {
        return Err(Error::Data(format!("context vector of {} values, expected {u}", tape.numel(*bad))));
    }
    Ok(tape.concat(parts)?)
}

/// Elementwise `r * g`.
pub fn modulate(tape: &mut Tape, r: Var, g: Var) -> Result<Var> {
    if tape.numel(r) != tape.numel(g) {
        return Err(Error::Data(format!(
            "modulation of {} values by {}",
            tape.numel(r),
            tape.numel(g)
        )));
    }
    Ok(tape.mul(r, g)?)
}
