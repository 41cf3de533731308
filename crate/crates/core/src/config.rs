//! Flat `key = value` configuration files and the training configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered `key = value` pairs. `#` starts a comment; blank lines are ignored.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", no + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k}", no + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
            })
            .transpose()
    }
}

impl fmt::Display for KeyValues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Which parts of the context machinery are wired in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ContextMode {
    /// Context track plus trainable per-series modulation.
    Full,
    /// Context track; modulation fixed at ones and not optimized.
    GlobalOnly,
    /// No context track; the context slot is absent from the input.
    None,
}

impl ContextMode {
    pub fn code(self) -> u8 {
        match self {
            ContextMode::Full => 0,
            ContextMode::GlobalOnly => 1,
            ContextMode::None => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ContextMode::Full),
            1 => Some(ContextMode::GlobalOnly),
            2 => Some(ContextMode::None),
            _ => None,
        }
    }

    pub fn uses_context(self) -> bool {
        self != ContextMode::None
    }
}

impl fmt::Display for ContextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextMode::Full => "full",
            ContextMode::GlobalOnly => "global-only",
            ContextMode::None => "no-context",
        })
    }
}

impl FromStr for ContextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ContextMode::Full),
            "global-only" | "global" => Ok(ContextMode::GlobalOnly),
            "no-context" | "none" => Ok(ContextMode::None),
            _ => Err(Error::Config(format!("unknown context mode {s:?}"))),
        }
    }
}

/// Step schedule keyed by starting epoch (1-based); the value of the latest
/// start at or before an epoch applies.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule<T> {
    steps: Vec<(usize, T)>,
}

impl<T: Copy + fmt::Display + FromStr> Schedule<T> {
    pub fn new(mut steps: Vec<(usize, T)>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Config("empty schedule".into()));
        }
        steps.sort_by_key(|s| s.0);
        if steps[0].0 != 1 {
            return Err(Error::Config("schedule must start at epoch 1".into()));
        }
        if steps.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Config("schedule repeats an epoch".into()));
        }
        Ok(Self { steps })
    }

    pub fn at(&self, epoch: usize) -> T {
        self.steps
            .iter()
            .rev()
            .find(|(e, _)| *e <= epoch)
            .map(|(_, v)| *v)
            .unwrap_or(self.steps[0].1)
    }

    /// `1:2,4:5` form. Ranges like `1-8:3e-3` use their first epoch.
    pub fn parse(s: &str) -> Result<Self> {
        let mut steps = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (e, v) = part
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("schedule entry {part:?} needs epoch:value")))?;
            let first = e.split('-').next().unwrap_or("").trim();
            let epoch = first
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad epoch in {part:?}")))?;
            let value = v
                .trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad value in {part:?}")))?;
            steps.push((epoch, value));
        }
        Self::new(steps)
    }
}

impl<T: fmt::Display> fmt::Display for Schedule<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.steps.iter().map(|(e, v)| format!("{e}:{v}")).collect();
        f.write_str(&parts.join(","))
    }
}

fn parse_list(key: &str, s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<usize>().map_err(|_| Error::Config(format!("{key}: bad entry {p:?}"))))
        .collect()
}

/// Every hyperparameter of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_schedule: Schedule<usize>,
    pub lr_schedule: Schedule<f64>,
    pub q_median: f64,
    pub q_lower: f64,
    pub q_upper: f64,
    pub gamma: f64,
    /// Input window length W.
    pub window: usize,
    /// Forecast horizon fh.
    pub horizon: usize,
    /// Seasonal period p.
    pub period: usize,
    pub dilations: Vec<usize>,
    /// Per-series context vector size u.
    pub context_size: usize,
    /// Context batch size K.
    pub context_batch: usize,
    /// Contexts selected per target S.
    pub contexts_per_target: usize,
    /// Controlling-state width of every dRNN cell.
    pub state_width: usize,
    /// Output width of every wdRNN layer.
    pub hidden: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    /// Anchors per optimizer step (truncated backpropagation length).
    pub bptt: usize,
    pub granger_maxlag: usize,
    pub seed: u64,
    pub ensemble: usize,
    pub mode: ContextMode,
    /// Bound applied to the smoothing corrections before the sigmoid.
    pub delta_clamp: f64,
    /// Initial smoothing logits for both tracks.
    pub smoothing_logit_init: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 11,
            batch_schedule: Schedule::new(vec![(1, 2), (4, 5), (5, 12), (6, 25), (7, 50), (8, 100)]).unwrap(),
            lr_schedule: Schedule::new(vec![(1, 3e-3), (9, 1e-3), (10, 1e-4)]).unwrap(),
            q_median: 0.48,
            q_lower: 0.025,
            q_upper: 0.975,
            gamma: 0.4,
            window: 168,
            horizon: 24,
            period: 24,
            dilations: vec![2, 6, 12, 24],
            context_size: 2,
            context_batch: 15,
            contexts_per_target: 5,
            state_width: 40,
            hidden: 40,
            conv_channels: 8,
            conv_kernel: 3,
            bptt: 48,
            granger_maxlag: 4,
            seed: 0,
            ensemble: 1,
            mode: ContextMode::Full,
            delta_clamp: 10.0,
            smoothing_logit_init: -2.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0 < self.q_lower && self.q_lower < self.q_median && self.q_median < self.q_upper && self.q_upper < 1.0) {
            return bad("quantiles must satisfy 0 < q_lower < q_median < q_upper < 1");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be >= 0");
        }
        if self.epochs == 0 || self.window < 2 || self.horizon == 0 || self.period == 0 {
            return bad("epochs, horizon and period must be positive and window >= 2");
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return bad("dilations must be a non-empty list of positive integers");
        }
        if self.context_size == 0 || self.context_batch == 0 || self.contexts_per_target == 0 {
            return bad("context sizes must be positive");
        }
        if self.state_width == 0 || self.hidden == 0 || self.conv_channels == 0 || self.conv_kernel == 0 {
            return bad("layer widths must be positive");
        }
        if self.bptt == 0 || self.granger_maxlag == 0 || self.ensemble == 0 {
            return bad("bptt, granger_maxlag and ensemble must be positive");
        }
        if !(self.delta_clamp > 0.0) {
            return bad("delta_clamp must be positive");
        }
        Ok(())
    }

    /// Overrides defaults with any keys present; unknown keys are errors.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mut c = Self::default();
        c.apply(kv)?;
        Ok(c)
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        for key in kv.keys() {
            let v = kv.get(key).unwrap_or_default();
            match key {
                "epochs" => self.epochs = num(key, v)?,
                "batch_schedule" => self.batch_schedule = Schedule::parse(v)?,
                "lr_schedule" => self.lr_schedule = Schedule::parse(v)?,
                "q_median" => self.q_median = num(key, v)?,
                "q_lower" => self.q_lower = num(key, v)?,
                "q_upper" => self.q_upper = num(key, v)?,
                "gamma" => self.gamma = num(key, v)?,
                "window" => self.window = num(key, v)?,
                "horizon" => self.horizon = num(key, v)?,
                "period" => self.period = num(key, v)?,
                "dilations" => self.dilations = parse_list(key, v)?,
                "context_size" => self.context_size = num(key, v)?,
                "context_batch" => self.context_batch = num(key, v)?,
                "contexts_per_target" => self.contexts_per_target = num(key, v)?,
                "state_width" => self.state_width = num(key, v)?,
                "hidden" => self.hidden = num(key, v)?,
                "conv_channels" => self.conv_channels = num(key, v)?,
                "conv_kernel" => self.conv_kernel = num(key, v)?,
                "bptt" => self.bptt = num(key, v)?,
                "granger_maxlag" => self.granger_maxlag = num(key, v)?,
                "seed" => self.seed = num(key, v)?,
                "ensemble" => self.ensemble = num(key, v)?,
                "mode" => self.mode = v.parse()?,
                "delta_clamp" => self.delta_clamp = num(key, v)?,
                "smoothing_logit_init" => self.smoothing_logit_init = num(key, v)?,
                // synthetic-panel keys share the file
                "n" | "T" | "length" | "coupling" | "lag" | "noise" => {}
                other => return Err(Error::Config(format!("unknown key {other:?}"))),
            }
        }
        self.validate()
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("epochs", self.epochs.to_string());
        kv.set("batch_schedule", self.batch_schedule.to_string());
        kv.set("lr_schedule", self.lr_schedule.to_string());
        kv.set("q_median", self.q_median.to_string());
        kv.set("q_lower", self.q_lower.to_string());
        kv.set("q_upper", self.q_upper.to_string());
        kv.set("gamma", self.gamma.to_string());
        kv.set("window", self.window.to_string());
        kv.set("horizon", self.horizon.to_string());
        kv.set("period", self.period.to_string());
        let d: Vec<String> = self.dilations.iter().map(|d| d.to_string()).collect();
        kv.set("dilations", d.join(","));
        kv.set("context_size", self.context_size.to_string());
        kv.set("context_batch", self.context_batch.to_string());
        kv.set("contexts_per_target", self.contexts_per_target.to_string());
        kv.set("state_width", self.state_width.to_string());
        kv.set("hidden", self.hidden.to_string());
        kv.set("conv_channels", self.conv_channels.to_string());
        kv.set("conv_kernel", self.conv_kernel.to_string());
        kv.set("bptt", self.bptt.to_string());
        kv.set("granger_maxlag", self.granger_maxlag.to_string());
        kv.set("seed", self.seed.to_string());
        kv.set("ensemble", self.ensemble.to_string());
        kv.set("mode", self.mode.to_string());
        kv.set("delta_clamp", self.delta_clamp.to_string());
        kv.set("smoothing_logit_init", self.smoothing_logit_init.to_string());
        kv
    }

    /// Batch size for a 1-based epoch, capped at the number of series.
    pub fn batch_size(&self, epoch: usize, n_series: usize) -> usize {
        self.batch_schedule.at(epoch).min(n_series).max(1)
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr_schedule.at(epoch)
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}
