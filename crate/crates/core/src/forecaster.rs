//! Main track, pinball loss, and the training and forecasting loops.
//!
//! Time is walked step by step from the start of the panel. At every step
//! `t >= W` the context track summarizes the context batch, each main series
//! builds its input from the window `[t-W, t)` and emits quantile paths for
//! `[t, t+fh)`, and then every smoothing state consumes `z_t` with the
//! corrections just produced. Gradients are truncated every `bptt` anchors.

use std::collections::{BTreeMap, VecDeque};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ContextMode, TrainConfig};
use crate::context::{assemble_context, context_conv_forward, modulate, ConvStack, Spectrum};
use crate::data::{calendar_features, observed_mean, split_points, SeriesPanel, MAX_LOG_OUTPUT};
use crate::error::{Error, Result};
use crate::es::{es_init_masked, EsSnapshot, TapeEs};
use crate::model::{Ensemble, Model};
use crate::params::{Adam, Bound};
use crate::tensor::{Tape, Tensor, Var};
use crate::wdrnn::{embed_calendar, stack_snapshot, stack_state, stack_step, LayerState, LayerVars, StackSnapshot};

/// Network outputs in log space are clamped to this range before `exp`.
pub const OUTPUT_CLAMP: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quantiles {
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Quantiles {
    pub fn of(c: &TrainConfig) -> Self {
        Self {
            median: c.q_median,
            lower: c.q_lower,
            upper: c.q_upper,
        }
    }
}

fn check_q(q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("quantile {q} outside (0, 1)")))
    }
}

pub fn pinball(actual: f64, predicted: f64, q: f64) -> Result<f64> {
    check_q(q)?;
    Ok(if actual >= predicted {
        q * (actual - predicted)
    } else {
        (1.0 - q) * (predicted - actual)
    })
}

/// Mean over the horizon of `rho(median) + gamma * (rho(lower) + rho(upper))`.
pub fn total_loss(actual: &[f64], median: &[f64], lower: &[f64], upper: &[f64], q: Quantiles, gamma: f64) -> Result<f64> {
    let n = actual.len();
    if median.len() != n || lower.len() != n || upper.len() != n || n == 0 {
        return Err(Error::Data("loss inputs differ in length".into()));
    }
    let mut sum = 0.0;
    for i in 0..n {
        sum += pinball(actual[i], median[i], q.median)?
            + gamma * (pinball(actual[i], lower[i], q.lower)? + pinball(actual[i], upper[i], q.upper)?);
    }
    Ok(sum / n as f64)
}

/// Elementwise pinball of `actual - predicted` on a tape.
fn tape_pinball(tape: &mut Tape, diff: Var, q: f64) -> Result<Var> {
    let pos = tape.relu(diff)?;
    let neg = tape.scale(diff, -1.0)?;
    let neg = tape.relu(neg)?;
    let a = tape.scale(pos, q)?;
    let b = tape.scale(neg, 1.0 - q)?;
    Ok(tape.add(a, b)?)
}

/// Loss of one forecast window over its observed targets, or `None` if
/// no target is observed.
#[allow(clippy::too_many_arguments)]
pub fn window_loss(
    tape: &mut Tape,
    actual: &[f64],
    mask: &[bool],
    median: Var,
    lower: Var,
    upper: Var,
    q: Quantiles,
    gamma: f64,
) -> Result<Option<Var>> {
    let observed = mask.iter().filter(|m| **m).count();
    if observed == 0 {
        return Ok(None);
    }
    let target = tape.constant(Tensor::vector(
        actual.iter().zip(mask).map(|(a, m)| if *m { *a } else { 0.0 }).collect(),
    ));
    let weights = tape.constant(Tensor::vector(
        mask.iter().map(|m| if *m { 1.0 / observed as f64 } else { 0.0 }).collect(),
    ));
    let mut total = None;
    for (pred, qv, w) in [(median, q.median, 1.0), (lower, q.lower, gamma), (upper, q.upper, gamma)] {
        let d = tape.sub(target, pred)?;
        let rho = tape_pinball(tape, d, qv)?;
        let rho = tape.mul(rho, weights)?;
        let s = tape.sum(rho)?;
        let s = if w == 1.0 { s } else { tape.scale(s, w)? };
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    Ok(total)
}

/// `[x_in, seasonal factors, log10(z_bar), calendar embedding, context]`.
pub fn assemble_input(
    tape: &mut Tape,
    x_in: Var,
    seasonal: Var,
    z_bar: f64,
    calendar: Var,
    context: Option<Var>,
) -> Result<Var> {
    if !(z_bar > 0.0) {
        return Err(Error::Data(format!("window mean {z_bar} is not positive")));
    }
    let level = tape.scalar(z_bar.log10());
    let mut parts = vec![x_in, seasonal, level, calendar];
    parts.extend(context);
    Ok(tape.concat(&parts)?)
}

/// Normalized log input `ln(z / (z_bar * s))` on the tape; missing cells
/// give 0. Returns `None` when more than half the window is missing.
fn window_input(tape: &mut Tape, panel: &SeriesPanel, id: usize, t: usize, w: usize, history: &VecDeque<Var>) -> Result<Option<(Var, f64)>> {
    let z = &panel.series(id)[t - w..t];
    let m = &panel.mask(id)[t - w..t];
    let (z_bar, frac) = observed_mean(z, m);
    if frac < 0.5 {
        return Ok(None);
    }
    if history.len() != w {
        return Err(Error::Data(format!("{} seasonal factors for a window of {w}", history.len())));
    }
    let mut logs = Vec::with_capacity(w);
    for (v, o) in z.iter().zip(m) {
        if *o {
            if *v <= 0.0 {
                return Err(Error::Data(format!("series {id} has non-positive value {v}")));
            }
            logs.push((v / z_bar).ln());
        } else {
            logs.push(0.0);
        }
    }
    let hs: Vec<Var> = history.iter().copied().collect();
    let hs = tape.concat(&hs)?;
    let ls = tape.log(hs)?;
    let mask = tape.constant(Tensor::vector(m.iter().map(|o| if *o { 1.0 } else { 0.0 }).collect()));
    let ls = tape.mul(ls, mask)?;
    let c = tape.constant(Tensor::vector(logs));
    Ok(Some((tape.sub(c, ls)?, z_bar)))
}

/// Plain-number forecast for one series at one anchor, in panel units
/// (positivity shift removed).
#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    pub series: usize,
    pub anchor: usize,
    pub median: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Clone, Debug)]
struct MainSnap {
    id: usize,
    es: EsSnapshot,
    rnn: StackSnapshot,
}

#[derive(Clone, Debug)]
struct CtxSnap {
    id: usize,
    es: EsSnapshot,
}

struct MainTrack {
    id: usize,
    es: TapeEs,
    rnn: Vec<LayerState>,
    alpha: Var,
    beta: Var,
    modulation: Option<Var>,
}

struct CtxTrack {
    id: usize,
    es: TapeEs,
    alpha: Var,
    beta: Var,
}

struct Net {
    layers: Vec<LayerVars>,
    calendar: Var,
    head_w: Var,
    head_b: Var,
    conv: Option<ConvStack>,
}

/// Which anchors contribute loss or forecasts during a pass.
#[derive(Clone, Copy, Debug)]
struct Window {
    /// First anchor.
    from: usize,
    /// Targets must end at or before this step.
    until: usize,
}

impl Window {
    fn contains(&self, t: usize, fh: usize) -> bool {
        t >= self.from && t + fh <= self.until
    }
}

struct Pass<'a> {
    model: &'a Model,
    panel: &'a SeriesPanel,
    spectrum: Option<Spectrum>,
    main: Vec<MainSnap>,
    ctx: Vec<CtxSnap>,
    t: usize,
}

#[derive(Default)]
struct ChunkOut {
    terms: Vec<Var>,
    forecasts: Vec<Forecast>,
}

fn slice_logits(tape: &mut Tape, v: Var) -> Result<(Var, Var)> {
    Ok((tape.slice(v, 0, 1)?, tape.slice(v, 1, 1)?))
}

impl<'a> Pass<'a> {
    fn new(model: &'a Model, panel: &'a SeriesPanel, series: &[usize]) -> Result<Self> {
        let c = &model.config;
        if panel.n() != model.n_series {
            return Err(Error::Data(format!(
                "panel has {} series, model expects {}",
                panel.n(),
                model.n_series
            )));
        }
        if panel.len() < 2 * c.period {
            return Err(Error::Data(format!("panel of {} steps cannot seed smoothing of period {}", panel.len(), c.period)));
        }
        let init = |id: usize| -> Result<EsSnapshot> {
            let s = es_init_masked(panel.series(id), panel.mask(id), c.period)?;
            Ok(EsSnapshot::from_state(&s))
        };
        let main = series
            .iter()
            .map(|&id| {
                if id >= panel.n() {
                    return Err(Error::Data(format!("series {id} outside panel of {}", panel.n())));
                }
                Ok(MainSnap {
                    id,
                    es: init(id)?,
                    rnn: model.stack_shape().zero_state(),
                })
            })
            .collect::<Result<_>>()?;
        let ctx = model
            .context_ids
            .iter()
            .map(|&id| Ok(CtxSnap { id, es: init(id)? }))
            .collect::<Result<_>>()?;
        let spectrum = if c.mode.uses_context() { Some(Spectrum::new(c.window)?) } else { None };
        Ok(Self {
            model,
            panel,
            spectrum,
            main,
            ctx,
            t: 0,
        })
    }

    fn bind_net(&self, bound: &Bound) -> Result<Net> {
        Ok(Net {
            layers: self.model.stack_shape().bind(bound, "rnn")?,
            calendar: bound.get("calendar")?,
            head_w: bound.get("head.W")?,
            head_b: bound.get("head.b")?,
            conv: if self.model.config.mode.uses_context() {
                Some(ConvStack::bind(bound, "ctx")?)
            } else {
                None
            },
        })
    }

    fn open(&self, tape: &mut Tape, bound: &Bound) -> Result<(Vec<MainTrack>, Vec<CtxTrack>)> {
        let w = self.model.config.window;
        let main = self
            .main
            .iter()
            .map(|s| {
                let (alpha, beta) = slice_logits(tape, bound.get(&format!("es.main.{}", s.id))?)?;
                let modulation = match self.model.config.mode {
                    ContextMode::Full => Some(bound.get(&format!("mod.{}", s.id))?),
                    _ => None,
                };
                Ok(MainTrack {
                    id: s.id,
                    es: TapeEs::from_snapshot(tape, &s.es, w),
                    rnn: stack_state(tape, &s.rnn)?,
                    alpha,
                    beta,
                    modulation,
                })
            })
            .collect::<Result<_>>()?;
        let ctx = self
            .ctx
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let (alpha, beta) = slice_logits(tape, bound.get(&format!("es.ctx.{k}"))?)?;
                Ok(CtxTrack {
                    id: s.id,
                    es: TapeEs::from_snapshot(tape, &s.es, w),
                    alpha,
                    beta,
                })
            })
            .collect::<Result<_>>()?;
        Ok((main, ctx))
    }

    fn close(&mut self, tape: &Tape, main: &[MainTrack], ctx: &[CtxTrack]) {
        self.main = main
            .iter()
            .map(|m| MainSnap {
                id: m.id,
                es: m.es.snapshot(tape),
                rnn: stack_snapshot(tape, &m.rnn),
            })
            .collect();
        self.ctx = ctx
            .iter()
            .map(|c| CtxSnap {
                id: c.id,
                es: c.es.snapshot(tape),
            })
            .collect();
    }

    /// Runs steps `self.t ..` until `anchors` network steps were taken or
    /// `last_anchor` was processed.
    #[allow(clippy::too_many_arguments)]
    fn run_chunk(
        &mut self,
        tape: &mut Tape,
        bound: &Bound,
        main: &mut [MainTrack],
        ctx: &mut [CtxTrack],
        last_anchor: usize,
        anchors: usize,
        loss: Option<Window>,
        collect: Option<Window>,
    ) -> Result<ChunkOut> {
        let net = self.bind_net(bound)?;
        let c = &self.model.config;
        let (w, fh, p, u) = (c.window, c.horizon, c.period, c.context_size);
        let q = Quantiles::of(c);
        let mut out = ChunkOut::default();
        let mut taken = 0;
        while self.t <= last_anchor && taken < anchors {
            let t = self.t;
            let z_now = |id: usize| -> Option<f64> { self.panel.value(id, t).filter(|_| t < self.panel.len()) };
            let anchor = t >= w;
            // context track
            let mut context = None;
            if let (Some(conv), Some(spec)) = (&net.conv, &self.spectrum) {
                let mut parts = Vec::with_capacity(ctx.len());
                for tr in ctx.iter_mut() {
                    let mut deltas = (None, None);
                    if anchor {
                        let x = match window_input(tape, self.panel, tr.id, t, w, tr.es.history())? {
                            Some((x, _)) => x,
                            None => tape.constant(Tensor::zeros(&[w])),
                        };
                        let stack = spec.features_on_tape(tape, x)?;
                        let o = context_conv_forward(tape, stack, conv)?;
                        parts.push(tape.slice(o, 0, u)?);
                        let da = tape.slice(o, u, 1)?;
                        let db = tape.slice(o, u + 1, 1)?;
                        deltas = (
                            Some(tape.clamp(da, -c.delta_clamp, c.delta_clamp)?),
                            Some(tape.clamp(db, -c.delta_clamp, c.delta_clamp)?),
                        );
                    }
                    if t < self.panel.len() {
                        tr.es.step(tape, z_now(tr.id), tr.alpha, tr.beta, deltas.0, deltas.1)?;
                    }
                }
                if anchor {
                    context = Some(assemble_context(tape, &parts, ctx.len(), u)?);
                }
            }
            // main track
            let calendar = if anchor {
                Some(embed_calendar(tape, &calendar_features(self.panel.timestamp_at(t)), net.calendar)?)
            } else {
                None
            };
            for tr in main.iter_mut() {
                let mut deltas = (None, None);
                let input = if anchor { window_input(tape, self.panel, tr.id, t, w, tr.es.history())? } else { None };
                if let (Some((x_in, z_bar)), Some(cal)) = (input, calendar) {
                    let upcoming = tr.es.upcoming(fh.max(p));
                    let seasonal = tape.concat(&upcoming[..p])?;
                    let ctx_part = match (context, tr.modulation) {
                        (Some(r), Some(g)) => Some(modulate(tape, r, g)?),
                        (r, _) => r,
                    };
                    let x = assemble_input(tape, x_in, seasonal, z_bar, cal, ctx_part)?;
                    let y = stack_step(tape, x, &mut tr.rnn, &net.layers)?;
                    let h = tape.matmul(net.head_w, y)?;
                    let h = tape.add(h, net.head_b)?;
                    let mut paths = [h; 3];
                    for (i, path) in paths.iter_mut().enumerate() {
                        let s = tape.slice(h, i * fh, fh)?;
                        *path = tape.clamp(s, -OUTPUT_CLAMP, OUTPUT_CLAMP)?;
                    }
                    let da = tape.slice(h, 3 * fh, 1)?;
                    let db = tape.slice(h, 3 * fh + 1, 1)?;
                    deltas = (
                        Some(tape.clamp(da, -c.delta_clamp, c.delta_clamp)?),
                        Some(tape.clamp(db, -c.delta_clamp, c.delta_clamp)?),
                    );
                    let future = tape.concat(&upcoming[..fh])?;
                    if loss.is_some_and(|win| win.contains(t, fh)) && t + fh <= self.panel.len() {
                        let mut norm = [h; 3];
                        for (n, path) in norm.iter_mut().zip(paths) {
                            let e = tape.exp(path)?;
                            *n = tape.mul(e, future)?;
                        }
                        let actual: Vec<f64> = self.panel.series(tr.id)[t..t + fh].iter().map(|v| v / z_bar).collect();
                        let mask = &self.panel.mask(tr.id)[t..t + fh];
                        if let Some(l) = window_loss(tape, &actual, mask, norm[0], norm[1], norm[2], q, c.gamma)? {
                            out.terms.push(l);
                        }
                    }
                    if collect.is_some_and(|win| t >= win.from && t <= win.until) {
                        let s = tape.value(future).to_vec();
                        let post = |v: Var| -> Vec<f64> {
                            tape.value(v)
                                .iter()
                                .zip(&s)
                                .map(|(x, f)| x.clamp(-MAX_LOG_OUTPUT, MAX_LOG_OUTPUT).exp() * z_bar * f - self.panel.shift())
                                .collect()
                        };
                        out.forecasts.push(Forecast {
                            series: tr.id,
                            anchor: t,
                            median: post(paths[0]),
                            lower: post(paths[1]),
                            upper: post(paths[2]),
                        });
                    }
                }
                if t < self.panel.len() {
                    tr.es.step(tape, z_now(tr.id), tr.alpha, tr.beta, deltas.0, deltas.1)?;
                }
            }
            if anchor {
                taken += 1;
            }
            self.t += 1;
        }
        Ok(out)
    }
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let all = tape.concat(terms)?;
    Ok(tape.mean(all)?)
}

/// Loss of a single uninterrupted run over `series` with anchors up to
/// `last_anchor`, built on the caller's tape from the given parameter vars.
pub fn sequence_loss(tape: &mut Tape, bound: &Bound, model: &Model, panel: &SeriesPanel, series: &[usize], last_anchor: usize) -> Result<Var> {
    let mut pass = Pass::new(model, panel, series)?;
    let (mut main, mut ctx) = pass.open(tape, bound)?;
    let all = Window { from: 0, until: panel.len() };
    let out = pass.run_chunk(tape, bound, &mut main, &mut ctx, last_anchor, usize::MAX, Some(all), None)?;
    if out.terms.is_empty() {
        return Err(Error::Data("no anchor produced a loss".into()));
    }
    mean_of(tape, &out.terms)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PassStats {
    pub loss_sum: f64,
    pub terms: usize,
}

impl PassStats {
    pub fn mean(&self) -> Option<f64> {
        (self.terms > 0).then(|| self.loss_sum / self.terms as f64)
    }
}

/// Forward-only pass; returns loss statistics and collected forecasts.
fn evaluate_pass(
    model: &Model,
    panel: &SeriesPanel,
    series: &[usize],
    last_anchor: usize,
    loss: Option<Window>,
    collect: Option<Window>,
) -> Result<(PassStats, Vec<Forecast>)> {
    let mut pass = Pass::new(model, panel, series)?;
    let mut stats = PassStats::default();
    let mut forecasts = Vec::new();
    while pass.t <= last_anchor {
        let mut tape = Tape::with_finite_check(false);
        let bound = model.params.bind_frozen(&mut tape);
        let (mut main, mut ctx) = pass.open(&mut tape, &bound)?;
        let out = pass.run_chunk(&mut tape, &bound, &mut main, &mut ctx, last_anchor, model.config.bptt, loss, collect)?;
        for l in &out.terms {
            stats.loss_sum += tape.value(*l)[0];
            stats.terms += 1;
        }
        forecasts.extend(out.forecasts);
        pass.close(&tape, &main, &ctx);
    }
    Ok((stats, forecasts))
}

/// One optimizer pass over a batch of series; returns the summed loss.
fn train_pass(model: &mut Model, adam: &mut Adam, lr: f64, panel: &SeriesPanel, series: &[usize], last_anchor: usize, loss: Window, epoch: usize) -> Result<PassStats> {
    // The pass reads only architecture settings; parameters come from `model`.
    let arch = model.clone();
    let mut pass = Pass::new(&arch, panel, series)?;
    let mut stats = PassStats::default();
    while pass.t <= last_anchor {
        let mut tape = Tape::with_finite_check(false);
        let bound = model.params.bind(&mut tape);
        let (mut main, mut ctx) = pass.open(&mut tape, &bound)?;
        let out = pass.run_chunk(&mut tape, &bound, &mut main, &mut ctx, last_anchor, model.config.bptt, Some(loss), None)?;
        if !out.terms.is_empty() {
            let l = mean_of(&mut tape, &out.terms)?;
            let value = tape.value(l)[0];
            if !value.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch}, step {}: loss is {value}", pass.t)));
            }
            let grads = tape.backward(l)?;
            let g = bound.gradients(&model.params, &grads);
            if g.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Diverged(format!("epoch {epoch}, step {}: non-finite gradient", pass.t)));
            }
            adam.update(&mut model.params, &g, lr)?;
            for l in &out.terms {
                stats.loss_sum += tape.value(*l)[0];
                stats.terms += 1;
            }
        }
        pass.close(&tape, &main, &ctx);
    }
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Anchor ranges derived from the 60/20/20 split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train_end: usize,
    pub validation_end: usize,
    pub len: usize,
}

impl Splits {
    pub fn of(panel: &SeriesPanel) -> Result<Self> {
        let (a, b) = split_points(panel.len())?;
        Ok(Self {
            train_end: a,
            validation_end: b,
            len: panel.len(),
        })
    }
}

/// Trains one network with the given seed.
pub fn train_model(panel: &SeriesPanel, context_ids: &[usize], config: &TrainConfig, seed: u64) -> Result<(Model, TrainLog)> {
    config.validate()?;
    let sp = Splits::of(panel)?;
    let (w, fh) = (config.window, config.horizon);
    if sp.train_end < w + fh {
        return Err(Error::Data(format!(
            "training segment of {} steps is shorter than window + horizon = {}",
            sp.train_end,
            w + fh
        )));
    }
    let mut model = Model::init(config, panel.n(), context_ids, panel.shift(), seed)?;
    let mut adam = Adam::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, crate::params::ParamStore)> = None;
    let all: Vec<usize> = (0..panel.n()).collect();
    let train_window = Window {
        from: w,
        until: sp.train_end,
    };
    let val_window = Window {
        from: sp.train_end,
        until: sp.validation_end,
    };
    let has_validation = sp.validation_end >= fh && sp.validation_end - fh >= sp.train_end.max(w);
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let bs = config.batch_size(epoch, panel.n());
        let lr = config.learning_rate(epoch);
        let mut order = all.clone();
        order.shuffle(&mut rng);
        let mut stats = PassStats::default();
        for batch in order.chunks(bs) {
            let mut ids = batch.to_vec();
            ids.sort_unstable();
            let s = train_pass(&mut model, &mut adam, lr, panel, &ids, sp.train_end - fh, train_window, epoch)?;
            stats.loss_sum += s.loss_sum;
            stats.terms += s.terms;
        }
        let train_loss = stats
            .mean()
            .ok_or_else(|| Error::Data("no training anchor has an observed target".into()))?;
        let validation_loss = if has_validation {
            evaluate_pass(&model, panel, &all, sp.validation_end - fh, Some(val_window), None)?.0.mean()
        } else {
            None
        };
        if let Some(v) = validation_loss {
            if !v.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch}: validation loss is {v}")));
            }
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, model.params.clone()));
                log.best_epoch = epoch;
            }
        } else {
            log.best_epoch = epoch;
        }
        log::info!(
            "epoch {epoch}: batch {bs}, lr {lr:e}, train loss {train_loss:.6}, validation {}",
            validation_loss.map_or("-".to_string(), |v| format!("{v:.6}"))
        );
        log.epochs.push(EpochLog {
            epoch,
            batch_size: bs,
            learning_rate: lr,
            train_loss,
            validation_loss,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, log))
}

/// Trains `config.ensemble` members with seeds `config.seed, config.seed + 1, ...`.
pub fn train(panel: &SeriesPanel, context_ids: &[usize], config: &TrainConfig) -> Result<(Ensemble, Vec<TrainLog>)> {
    let mut members = Vec::with_capacity(config.ensemble);
    let mut logs = Vec::with_capacity(config.ensemble);
    for i in 0..config.ensemble {
        let (m, l) = train_model(panel, context_ids, config, config.seed.wrapping_add(i as u64))?;
        members.push(m);
        logs.push(l);
    }
    Ok((Ensemble { members }, logs))
}

/// Forecasts of one model at every anchor in `[from, to]` for `series`.
pub fn forecast_range(model: &Model, panel: &SeriesPanel, series: &[usize], from: usize, to: usize) -> Result<Vec<Forecast>> {
    let w = model.config.window;
    if from < w || to > panel.len() || from > to {
        return Err(Error::Data(format!(
            "anchors [{from}, {to}] need {w} steps of history within a panel of {}",
            panel.len()
        )));
    }
    let win = Window { from, until: to };
    Ok(evaluate_pass(model, panel, series, to, None, Some(win))?.1)
}

/// Mean loss of `model` over anchors whose targets lie in `[from, until)`.
pub fn evaluate_loss(model: &Model, panel: &SeriesPanel, from: usize, until: usize) -> Result<Option<f64>> {
    let fh = model.config.horizon;
    if until < fh || until - fh < from.max(model.config.window) {
        return Ok(None);
    }
    let all: Vec<usize> = (0..panel.n()).collect();
    let (s, _) = evaluate_pass(model, panel, &all, until - fh, Some(Window { from, until }), None)?;
    Ok(s.mean())
}

/// Mean of member medians, minimum of lowers, maximum of uppers.
pub fn combine(members: &[Vec<Forecast>]) -> Result<Vec<Forecast>> {
    let first = members.first().ok_or_else(|| Error::Data("no ensemble members".into()))?;
    let mut out = first.clone();
    for other in &members[1..] {
        if other.len() != out.len() {
            return Err(Error::Data("ensemble members disagree on forecast count".into()));
        }
        for (o, f) in out.iter_mut().zip(other) {
            if (o.series, o.anchor) != (f.series, f.anchor) {
                return Err(Error::Data("ensemble members disagree on anchors".into()));
            }
            for i in 0..o.median.len() {
                o.median[i] += f.median[i];
                o.lower[i] = o.lower[i].min(f.lower[i]);
                o.upper[i] = o.upper[i].max(f.upper[i]);
            }
        }
    }
    let n = members.len() as f64;
    for o in out.iter_mut() {
        o.median.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

pub fn ensemble_range(ens: &Ensemble, panel: &SeriesPanel, series: &[usize], from: usize, to: usize) -> Result<Vec<Forecast>> {
    let per: Vec<Vec<Forecast>> = ens
        .members
        .iter()
        .map(|m| forecast_range(m, panel, series, from, to))
        .collect::<Result<_>>()?;
    combine(&per)
}

/// Forecast at a single anchor `t`; `t` may equal the panel length to
/// forecast past its end.
pub fn predict(ens: &Ensemble, panel: &SeriesPanel, anchor: usize, series: &[usize]) -> Result<Vec<Forecast>> {
    ensemble_range(ens, panel, series, anchor, anchor)
}

/// Writes `timestamp,series,median,lower,upper` rows.
pub fn write_forecast_csv<W: std::io::Write>(panel: &SeriesPanel, forecasts: &[Forecast], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["timestamp", "series", "median", "lower", "upper"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for f in forecasts {
        for h in 0..f.median.len() {
            let ts = crate::data::format_timestamp(panel.timestamp_at(f.anchor + h));
            out.write_record([
                ts,
                panel.names()[f.series].clone(),
                format!("{}", f.median[h]),
                format!("{}", f.lower[h]),
                format!("{}", f.upper[h]),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Forecasts grouped by horizon step: `(series, anchor) -> values`.
pub fn by_horizon(forecasts: &[Forecast]) -> BTreeMap<usize, Vec<(usize, usize, f64)>> {
    let mut m: BTreeMap<usize, Vec<(usize, usize, f64)>> = BTreeMap::new();
    for f in forecasts {
        for (h, v) in f.median.iter().enumerate() {
            m.entry(h + 1).or_default().push((f.series, f.anchor + h, *v));
        }
    }
    m
}
