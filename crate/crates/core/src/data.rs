//! Series panels, chronological splits, window normalization, calendar
//! features and synthetic panel generation.

use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate, NaiveDateTime, TimeDelta, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::KeyValues;
use crate::error::{Error, Result};

/// Added on top of `1 - min` when a panel has non-positive values.
pub const SHIFT_EPSILON: f64 = 1e-6;

/// Largest |x| accepted by [`postprocess`] before `exp` overflows.
pub const MAX_LOG_OUTPUT: f64 = 700.0;

/// Number of calendar one-hot slots: hour (24), weekday (7), day of month (31), month (12).
pub const CALENDAR_DIM: usize = 74;

/// An `n x T` matrix of observations on a fixed time grid.
///
/// Values are stored after the positivity shift; `shift()` reports the
/// constant that was added and [`SeriesPanel::unshift`] removes it.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesPanel {
    names: Vec<String>,
    timestamps: Vec<NaiveDateTime>,
    frequency: TimeDelta,
    values: Vec<f64>,
    mask: Vec<bool>,
    n: usize,
    t: usize,
    shift: f64,
}

fn epoch() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(1970, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
}

impl SeriesPanel {
    /// Builds a panel from per-series rows. Missing cells are `None`.
    /// No positivity shift is applied here.
    pub fn new(names: Vec<String>, timestamps: Vec<NaiveDateTime>, rows: Vec<Vec<Option<f64>>>) -> Result<Self> {
        let n = rows.len();
        let t = timestamps.len();
        if n == 0 {
            return Err(Error::Data("panel has no series".into()));
        }
        if names.len() != n {
            return Err(Error::Data(format!("{} names for {} series", names.len(), n)));
        }
        if t == 0 {
            return Err(Error::Data("panel has no timesteps".into()));
        }
        let frequency = if t >= 2 {
            timestamps[1] - timestamps[0]
        } else {
            TimeDelta::hours(1)
        };
        if frequency <= TimeDelta::zero() {
            return Err(Error::Data("timestamps are not strictly increasing".into()));
        }
        for w in timestamps.windows(2) {
            let d = w[1] - w[0];
            if d <= TimeDelta::zero() {
                return Err(Error::Data(format!("timestamps not increasing at {}", w[1])));
            }
            if d != frequency {
                return Err(Error::Data(format!("timestamps not equally spaced at {}", w[1])));
            }
        }
        let mut values = Vec::with_capacity(n * t);
        let mut mask = Vec::with_capacity(n * t);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != t {
                return Err(Error::Data(format!("series {i} has {} values, expected {t}", row.len())));
            }
            for v in row {
                match v {
                    Some(x) if x.is_finite() => {
                        values.push(*x);
                        mask.push(true);
                    }
                    Some(x) => return Err(Error::Data(format!("non-finite value {x} in series {i}"))),
                    None => {
                        values.push(0.0);
                        mask.push(false);
                    }
                }
            }
        }
        Ok(Self {
            names,
            timestamps,
            frequency,
            values,
            mask,
            n,
            t,
            shift: 0.0,
        })
    }

    /// Parses the panel CSV layout: a header row, a timestamp (ISO-8601) or
    /// integer index column, then one column per series. Empty cells are
    /// missing. The positivity shift is applied when needed.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::Data(format!("csv header: {e}")))?.clone();
        if headers.len() < 2 {
            return Err(Error::Data("panel csv needs a time column and at least one series".into()));
        }
        let names: Vec<String> = headers.iter().skip(1).map(|s| s.trim().to_string()).collect();
        let n = names.len();
        let mut timestamps = Vec::new();
        let mut rows: Vec<Vec<Option<f64>>> = vec![Vec::new(); n];
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Data(format!("csv row {}: {e}", line + 2)))?;
            if rec.len() != n + 1 {
                return Err(Error::Data(format!(
                    "ragged row {}: {} fields, expected {}",
                    line + 2,
                    rec.len(),
                    n + 1
                )));
            }
            timestamps.push(parse_timestamp(rec[0].trim())?);
            for (i, cell) in rec.iter().skip(1).enumerate() {
                let cell = cell.trim();
                rows[i].push(if cell.is_empty() {
                    None
                } else {
                    Some(
                        cell.parse::<f64>()
                            .map_err(|_| Error::Data(format!("row {}: bad number {cell:?}", line + 2)))?,
                    )
                });
            }
        }
        let mut panel = Self::new(names, timestamps, rows)?;
        panel.apply_positivity_shift();
        Ok(panel)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of timesteps.
    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn frequency(&self) -> TimeDelta {
        self.frequency
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    /// Stored (shifted) values of one series.
    pub fn series(&self, i: usize) -> &[f64] {
        &self.values[i * self.t..(i + 1) * self.t]
    }

    pub fn mask(&self, i: usize) -> &[bool] {
        &self.mask[i * self.t..(i + 1) * self.t]
    }

    /// Observed value, or `None` when missing or outside the panel.
    pub fn value(&self, i: usize, t: usize) -> Option<f64> {
        if i >= self.n() || t >= self.t {
            return None;
        }
        let k = i * self.t + t;
        self.mask[k].then_some(self.values[k])
    }

    /// Timestamp of step `t`, extrapolated on the grid past the end.
    pub fn timestamp_at(&self, t: usize) -> NaiveDateTime {
        if t < self.t {
            self.timestamps[t]
        } else {
            self.timestamps[self.t - 1] + self.frequency * (t - self.t + 1) as i32
        }
    }

    pub fn unshift(&self, v: f64) -> f64 {
        v - self.shift
    }

    /// Shifts stored values so the smallest observation is at least `1 + SHIFT_EPSILON`
    /// when any observation is non-positive. Returns the shift applied.
    pub fn apply_positivity_shift(&mut self) -> f64 {
        let min = self
            .values
            .iter()
            .zip(&self.mask)
            .filter(|(_, m)| **m)
            .map(|(v, _)| *v)
            .fold(f64::INFINITY, f64::min);
        if min.is_finite() && min <= 0.0 {
            let s = 1.0 - min + SHIFT_EPSILON;
            self.set_shift(self.shift + s).ok();
            s
        } else {
            0.0
        }
    }

    /// Re-expresses the panel with total shift `shift` (as recorded by a model).
    pub fn set_shift(&mut self, shift: f64) -> Result<()> {
        let delta = shift - self.shift;
        for (v, m) in self.values.iter_mut().zip(&self.mask) {
            if *m {
                *v += delta;
                if *v <= 0.0 {
                    return Err(Error::Data(format!("value {v} not positive after shift {shift}")));
                }
            }
        }
        self.shift = shift;
        Ok(())
    }

    /// Contiguous time range `[start, end)` as a new panel.
    pub fn slice_time(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.t {
            return Err(Error::Data(format!("bad time range {start}..{end} of {}", self.t)));
        }
        let len = end - start;
        let mut values = Vec::with_capacity(self.n * len);
        let mut mask = Vec::with_capacity(self.n * len);
        for i in 0..self.n {
            values.extend_from_slice(&self.series(i)[start..end]);
            mask.extend_from_slice(&self.mask(i)[start..end]);
        }
        Ok(Self {
            names: self.names.clone(),
            timestamps: self.timestamps[start..end].to_vec(),
            frequency: self.frequency,
            values,
            mask,
            n: self.n,
            t: len,
            shift: self.shift,
        })
    }

    /// Subset of series, in the given order.
    pub fn select_series(&self, ids: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(ids.len() * self.t);
        let mut mask = Vec::with_capacity(ids.len() * self.t);
        let mut names = Vec::with_capacity(ids.len());
        for &i in ids {
            if i >= self.n {
                return Err(Error::Data(format!("series {i} out of range")));
            }
            values.extend_from_slice(self.series(i));
            mask.extend_from_slice(self.mask(i));
            names.push(self.names[i].clone());
        }
        Ok(Self {
            names,
            timestamps: self.timestamps.clone(),
            frequency: self.frequency,
            values,
            mask,
            n: ids.len(),
            t: self.t,
            shift: self.shift,
        })
    }

    /// Writes the panel in its input CSV layout with the shift removed.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.names.iter().cloned());
        wtr.write_record(&header).map_err(csv_io)?;
        for t in 0..self.t {
            let mut rec = vec![format_timestamp(self.timestamps[t])];
            for i in 0..self.n {
                rec.push(match self.value(i, t) {
                    Some(v) => format!("{}", self.unshift(v)),
                    None => String::new(),
                });
            }
            wtr.write_record(&rec).map_err(csv_io)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub fn load_panel(path: impl AsRef<Path>) -> Result<SeriesPanel> {
    let f = std::fs::File::open(path.as_ref())?;
    SeriesPanel::from_csv_reader(std::io::BufReader::new(f))
}

pub fn format_timestamp(ts: NaiveDateTime) -> String {
    ts.format("%Y-%m-%dT%H:%M:%S").to_string()
}

/// ISO-8601 date-time (with `T` or space), plain date, or integer index
/// (mapped to hours after 1970-01-01).
pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime> {
    if let Ok(i) = s.parse::<i64>() {
        return TimeDelta::try_hours(i)
            .and_then(|d| epoch().checked_add_signed(d))
            .ok_or_else(|| Error::Data(format!("index {i} out of range")));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(ts) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(ts);
        }
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(d.and_hms_opt(0, 0, 0).unwrap());
    }
    Err(Error::Data(format!("unrecognised timestamp {s:?}")))
}

/// Boundaries of the 60/20/20 chronological split: `(⌊0.6T⌋, ⌊0.8T⌋)`.
pub fn split_points(t: usize) -> Result<(usize, usize)> {
    if t < 10 {
        return Err(Error::Data(format!("need at least 10 timesteps to split, got {t}")));
    }
    Ok((t * 6 / 10, t * 8 / 10))
}

/// Train, validation and test panels, in chronological order.
pub fn split(panel: &SeriesPanel) -> Result<(SeriesPanel, SeriesPanel, SeriesPanel)> {
    let (a, b) = split_points(panel.len())?;
    Ok((
        panel.slice_time(0, a)?,
        panel.slice_time(a, b)?,
        panel.slice_time(b, panel.len())?,
    ))
}

/// One normalized training example anchored at `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPair {
    pub series_id: usize,
    pub t: usize,
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    /// Observed flags for `target`.
    pub target_mask: Vec<bool>,
    pub z_bar: f64,
    /// Input-window factors followed by output-window factors.
    pub seasonal_factors: Vec<f64>,
}

/// Mean of the observed values of `z` and the fraction observed.
pub fn observed_mean(z: &[f64], mask: &[bool]) -> (f64, f64) {
    let mut sum = 0.0;
    let mut cnt = 0usize;
    for (v, m) in z.iter().zip(mask) {
        if *m {
            sum += v;
            cnt += 1;
        }
    }
    let frac = if z.is_empty() { 0.0 } else { cnt as f64 / z.len() as f64 };
    (if cnt > 0 { sum / cnt as f64 } else { f64::NAN }, frac)
}

/// Builds the window pair at anchor `t` (input `[t-W, t)`, output `[t, t+fh)`).
/// `seasonal` holds `W + fh` factors. Returns `Ok(None)` when more than half
/// of the input window is missing. Missing input cells map to `x_in = 0`.
pub fn make_window(
    panel: &SeriesPanel,
    series_id: usize,
    t: usize,
    window: usize,
    horizon: usize,
    seasonal: &[f64],
) -> Result<Option<WindowPair>> {
    if t < window || t + horizon > panel.len() {
        return Err(Error::Data(format!(
            "anchor {t} needs {window} steps of history and {horizon} ahead in {}",
            panel.len()
        )));
    }
    if seasonal.len() != window + horizon {
        return Err(Error::Data(format!("{} seasonal factors for {} slots", seasonal.len(), window + horizon)));
    }
    let z = &panel.series(series_id)[t - window..t];
    let m = &panel.mask(series_id)[t - window..t];
    let (z_bar, frac) = observed_mean(z, m);
    if frac < 0.5 {
        return Ok(None);
    }
    let filled: Vec<f64> = z
        .iter()
        .zip(m)
        .zip(&seasonal[..window])
        .map(|((v, o), s)| if *o { *v } else { z_bar * s })
        .collect();
    let input = preprocess_window(&filled, z_bar, &seasonal[..window])?;
    let zo = &panel.series(series_id)[t..t + horizon];
    let mo = panel.mask(series_id)[t..t + horizon].to_vec();
    let target = normalize_output(zo, z_bar)?;
    Ok(Some(WindowPair {
        series_id,
        t,
        input,
        target,
        target_mask: mo,
        z_bar,
        seasonal_factors: seasonal.to_vec(),
    }))
}

/// `x_in = ln(z / (z_bar * s))`, elementwise.
pub fn preprocess_window(z: &[f64], z_bar: f64, seasonal: &[f64]) -> Result<Vec<f64>> {
    if z.len() != seasonal.len() {
        return Err(Error::Data(format!("{} values vs {} seasonal factors", z.len(), seasonal.len())));
    }
    z.iter()
        .zip(seasonal)
        .map(|(&v, &s)| {
            let r = v / (z_bar * s);
            if v > 0.0 && z_bar > 0.0 && s > 0.0 && r.is_finite() {
                Ok(r.ln())
            } else {
                Err(Error::Data(format!("log of non-positive ratio: z={v}, z_bar={z_bar}, s={s}")))
            }
        })
        .collect()
}

/// `x_out = z / z_bar`, elementwise.
pub fn normalize_output(z: &[f64], z_bar: f64) -> Result<Vec<f64>> {
    if !(z_bar > 0.0) {
        return Err(Error::Data(format!("window mean {z_bar} is not positive")));
    }
    Ok(z.iter().map(|v| v / z_bar).collect())
}

/// `z = exp(x) * z_bar * s`, elementwise. The panel shift is not removed here.
pub fn postprocess(x_hat: &[f64], z_bar: f64, seasonal: &[f64]) -> Result<Vec<f64>> {
    if x_hat.len() != seasonal.len() {
        return Err(Error::Data(format!("{} outputs vs {} seasonal factors", x_hat.len(), seasonal.len())));
    }
    x_hat
        .iter()
        .zip(seasonal)
        .map(|(&x, &s)| {
            if !x.is_finite() || x.abs() > MAX_LOG_OUTPUT {
                Err(Error::Data(format!("output {x} would overflow")))
            } else {
                Ok(x.exp() * z_bar * s)
            }
        })
        .collect()
}

/// Index of each one-hot group inside the calendar block.
pub fn calendar_indices(ts: NaiveDateTime) -> [usize; 4] {
    [
        ts.hour() as usize,
        24 + ts.weekday().num_days_from_monday() as usize,
        31 + ts.day0() as usize,
        62 + ts.month0() as usize,
    ]
}

/// Hour-of-day, day-of-week, day-of-month and month one-hots (74 slots, four ones).
/// Sub-hourly timestamps share their hour's slot.
pub fn calendar_features(ts: NaiveDateTime) -> Vec<f64> {
    let mut v = vec![0.0; CALENDAR_DIM];
    for i in calendar_indices(ts) {
        v[i] = 1.0;
    }
    v
}

/// A driver→driven link in a synthetic panel.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    pub driver: usize,
    pub driven: usize,
    pub weight: f64,
}

/// Parameters of a synthetic panel.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub t: usize,
    pub couplings: Vec<Coupling>,
    pub lag: usize,
    pub noise: f64,
    pub period: usize,
}

impl SynthSpec {
    /// Series 0 drives every other series with unit weight.
    pub fn star(n: usize, t: usize, lag: usize, noise: f64, period: usize) -> Self {
        Self {
            n,
            t,
            couplings: (1..n)
                .map(|j| Coupling {
                    driver: 0,
                    driven: j,
                    weight: 1.0,
                })
                .collect(),
            lag,
            noise,
            period,
        }
    }

    /// Series `0..groups` are independent drivers; every later series `j` is
    /// driven by series `j % groups`.
    pub fn grouped(n: usize, groups: usize, t: usize, lag: usize, noise: f64, period: usize) -> Self {
        Self {
            n,
            t,
            couplings: (groups.max(1)..n)
                .map(|j| Coupling {
                    driver: j % groups.max(1),
                    driven: j,
                    weight: 1.0,
                })
                .collect(),
            lag,
            noise,
            period,
        }
    }

    /// Reads `n`, `T` (or `length`), `lag`, `noise`, `period` and `coupling`
    /// (`star`, `none`, `groups:G` or a list like `0>1:1.0,0>2:0.5`). Other
    /// keys are ignored.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let n: usize = kv.parsed("n")?.unwrap_or(4);
        let t: usize = match kv.parsed("T")? {
            Some(t) => t,
            None => kv.parsed("length")?.unwrap_or(2000),
        };
        let lag: usize = kv.parsed("lag")?.unwrap_or(1);
        let noise: f64 = kv.parsed("noise")?.unwrap_or(0.1);
        let period: usize = kv.parsed("period")?.unwrap_or(24);
        let mut spec = Self::star(n, t, lag, noise, period);
        match kv.get("coupling").unwrap_or("star") {
            "star" => {}
            "none" => spec.couplings.clear(),
            g if g.starts_with("groups:") => {
                let groups: usize = g["groups:".len()..]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("coupling {g:?}: bad group count")))?;
                if groups == 0 || groups >= n {
                    return Err(Error::Config(format!("coupling {g:?} needs 1 <= G < n")));
                }
                spec.couplings = Self::grouped(n, groups, t, lag, noise, period).couplings;
            }
            list => {
                spec.couplings = list
                    .split(',')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(parse_coupling)
                    .collect::<Result<_>>()?
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.t < 2 || self.period == 0 {
            return Err(Error::Config("synthetic panel needs n >= 1, T >= 2, period >= 1".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise {} must be finite and >= 0", self.noise)));
        }
        for c in &self.couplings {
            if c.driver >= self.n || c.driven >= self.n || c.driver == c.driven {
                return Err(Error::Config(format!("bad coupling {}>{}", c.driver, c.driven)));
            }
        }
        Ok(())
    }

    /// Series in dependency order; errors on a cyclic coupling graph.
    fn generation_order(&self) -> Result<Vec<usize>> {
        let mut done = vec![false; self.n];
        let mut order = Vec::with_capacity(self.n);
        while order.len() < self.n {
            let before = order.len();
            for j in 0..self.n {
                if !done[j] && self.couplings.iter().filter(|c| c.driven == j).all(|c| done[c.driver]) {
                    done[j] = true;
                    order.push(j);
                }
            }
            if order.len() == before {
                return Err(Error::Config("coupling graph has a cycle".into()));
            }
        }
        Ok(order)
    }
}

fn parse_coupling(s: &str) -> Result<Coupling> {
    let bad = || Error::Config(format!("coupling {s:?} is not driver>driven[:weight]"));
    let (edge, weight) = match s.split_once(':') {
        Some((e, w)) => (e, w.trim().parse::<f64>().map_err(|_| bad())?),
        None => (s, 1.0),
    };
    let (a, b) = edge.split_once('>').ok_or_else(bad)?;
    Ok(Coupling {
        driver: a.trim().parse().map_err(|_| bad())?,
        driven: b.trim().parse().map_err(|_| bad())?,
        weight,
    })
}

/// Deterministic synthetic panel (hourly from 2015-06-01).
///
/// Series without drivers are sinusoid mixtures plus a persistent AR(1)
/// noise term. A driven series is `sum(a * driver[t - lag])` plus its own
/// period-`p` seasonal pattern plus white noise. Each series is then shifted
/// so its minimum is 1.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<SeriesPanel> {
    spec.validate()?;
    let order = spec.generation_order()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = spec.t + spec.lag;
    let tau = std::f64::consts::TAU;
    let p = spec.period as f64;
    let mut raw: Vec<Vec<f64>> = vec![Vec::new(); spec.n];
    for &j in &order {
        let drivers: Vec<&Coupling> = spec.couplings.iter().filter(|c| c.driven == j).collect();
        let phase: f64 = rng.random_range(0.0..tau);
        let amp: f64 = rng.random_range(1.0..3.0);
        let mut series = Vec::with_capacity(total);
        if drivers.is_empty() {
            let slow_period: f64 = rng.random_range(3.0 * p..9.0 * p);
            let slow_phase: f64 = rng.random_range(0.0..tau);
            let slow_amp: f64 = rng.random_range(1.0..4.0);
            let mut ar = 0.0;
            for t in 0..total {
                let tf = t as f64;
                let e: f64 = rng.sample(StandardNormal);
                ar = 0.95 * ar + spec.noise * e;
                series.push(
                    10.0 + amp * (tau * tf / p + phase).sin() + slow_amp * (tau * tf / slow_period + slow_phase).sin() + ar,
                );
            }
        } else {
            for t in 0..total {
                let tf = t as f64;
                let src = t.saturating_sub(spec.lag);
                let coupled: f64 = drivers.iter().map(|c| c.weight * raw[c.driver][src]).sum();
                let e: f64 = rng.sample(StandardNormal);
                series.push(coupled + amp * (tau * tf / p + phase).sin() + spec.noise * e);
            }
        }
        raw[j] = series;
    }
    let start = NaiveDate::from_ymd_opt(2015, 6, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    let timestamps: Vec<NaiveDateTime> = (0..spec.t).map(|t| start + TimeDelta::hours(t as i64)).collect();
    let rows: Vec<Vec<Option<f64>>> = raw
        .iter()
        .map(|s| {
            let s = &s[spec.lag..];
            let min = s.iter().cloned().fold(f64::INFINITY, f64::min);
            s.iter().map(|v| Some(v - min + 1.0)).collect()
        })
        .collect();
    let names = (0..spec.n).map(|i| format!("s{i}")).collect();
    SeriesPanel::new(names, timestamps, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "time,a,b\n2015-01-01T00:00:00,1,2\n2015-01-01T01:00:00,2,\n2015-01-01T02:00:00,3,4\n2015-01-01T03:00:00,4,5\n2015-01-01T04:00:00,5,6\n";

    #[test]
    fn loads_shape_and_mask() {
        let p = SeriesPanel::from_csv_reader(CSV.as_bytes()).unwrap();
        assert_eq!((p.n(), p.len()), (2, 5));
        assert_eq!(p.shift(), 0.0);
        for i in 0..2 {
            for t in 0..5 {
                assert_eq!(p.mask(i)[t], !(i == 1 && t == 1));
            }
        }
    }

    #[test]
    fn zero_value_triggers_shift() {
        let csv = "t,a\n0,0\n1,3\n2,1\n";
        let p = SeriesPanel::from_csv_reader(csv.as_bytes()).unwrap();
        assert!((p.shift() - (1.0 + SHIFT_EPSILON)).abs() < 1e-15);
        assert!(p.series(0).iter().all(|&v| v >= SHIFT_EPSILON));
        assert!((p.unshift(p.series(0)[1]) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(SeriesPanel::from_csv_reader("t\n0\n1\n".as_bytes()).is_err());
        assert!(SeriesPanel::from_csv_reader("t,a,b\n0,1,2\n1,2\n".as_bytes()).is_err());
        assert!(SeriesPanel::from_csv_reader("t,a\n1,1\n0,2\n".as_bytes()).is_err());
        assert!(SeriesPanel::from_csv_reader("t,a\n0,1\n1,2\n3,2\n".as_bytes()).is_err());
        assert!(SeriesPanel::from_csv_reader("t,a\n0,x\n".as_bytes()).is_err());
    }

    #[test]
    fn split_sizes() {
        assert_eq!(split_points(100).unwrap(), (60, 80));
        assert_eq!(split_points(10).unwrap(), (6, 8));
        assert!(split_points(9).is_err());
        let rows = vec![(0..10).map(|v| Some(v as f64 + 1.0)).collect()];
        let ts = (0..10).map(|i| epoch() + TimeDelta::hours(i)).collect();
        let p = SeriesPanel::new(vec!["a".into()], ts, rows).unwrap();
        let (a, b, c) = split(&p).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (6, 2, 2));
        let joined: Vec<f64> = [a.series(0), b.series(0), c.series(0)].concat();
        assert_eq!(joined, p.series(0));
    }

    #[test]
    fn pre_and_post_processing() {
        let x = preprocess_window(&[6.0, 4.0], 5.0, &[1.2, 0.8]).unwrap();
        assert!(x.iter().all(|v| v.abs() < 1e-15));
        let x = preprocess_window(&[10.0], 5.0, &[1.0]).unwrap();
        assert!((x[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(normalize_output(&[3.0, 6.0], 2.0).unwrap(), vec![1.5, 3.0]);
        assert_eq!(normalize_output(&[0.0], 2.0).unwrap(), vec![0.0]);
        assert!(normalize_output(&[1.0], 0.0).is_err());
        let z = postprocess(&[2f64.ln()], 5.0, &[1.1]).unwrap();
        assert!((z[0] - 11.0).abs() < 1e-12);
        assert_eq!(postprocess(&[0.0], 3.0, &[1.0]).unwrap(), vec![3.0]);
        assert!(postprocess(&[701.0], 1.0, &[1.0]).is_err());
        assert!(preprocess_window(&[0.0], 1.0, &[1.0]).is_err());
    }

    #[test]
    fn calendar_known_date() {
        let ts = NaiveDate::from_ymd_opt(2015, 6, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        assert_eq!(calendar_indices(ts), [0, 24, 31, 62 + 5]);
        let v = calendar_features(ts);
        assert_eq!(v.len(), CALENDAR_DIM);
        assert_eq!(v.iter().sum::<f64>(), 4.0);
        let later = ts + TimeDelta::hours(24 + 13);
        assert_eq!(calendar_indices(later), [13, 25, 32, 67]);
        let five_min = ts + TimeDelta::minutes(5);
        assert_eq!(calendar_indices(five_min), calendar_indices(ts));
    }

    #[test]
    fn calendar_injective_over_a_month() {
        let start = NaiveDate::from_ymd_opt(2016, 2, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        let mut seen = std::collections::HashSet::new();
        for h in 0..29 * 24 {
            assert!(seen.insert(calendar_indices(start + TimeDelta::hours(h))));
        }
    }

    #[test]
    fn window_skips_sparse_inputs() {
        let ts: Vec<_> = (0..8).map(|i| epoch() + TimeDelta::hours(i)).collect();
        let row = vec![None, None, None, Some(2.0), Some(4.0), Some(3.0), Some(5.0), Some(6.0)];
        let p = SeriesPanel::new(vec!["a".into()], ts, vec![row]).unwrap();
        assert!(make_window(&p, 0, 4, 4, 2, &[1.0; 6]).unwrap().is_none());
        let w = make_window(&p, 0, 5, 4, 2, &[1.0; 6]).unwrap().unwrap();
        assert!((w.z_bar - 3.0).abs() < 1e-15);
        assert_eq!(w.input[0], 0.0);
        assert_eq!(w.target, vec![1.0, 5.0 / 3.0]);
    }

    #[test]
    fn synth_is_deterministic_and_positive() {
        let spec = SynthSpec::star(3, 200, 1, 0.3, 24);
        let a = synth_generate(&spec, 5).unwrap();
        let b = synth_generate(&spec, 5).unwrap();
        assert_eq!(a, b);
        assert!((0..3).all(|i| a.series(i).iter().all(|&v| v >= 1.0 - 1e-12)));
        assert_ne!(a, synth_generate(&spec, 6).unwrap());
    }

    #[test]
    fn synth_zero_noise_is_shifted_driver_plus_seasonal() {
        let spec = SynthSpec::star(2, 300, 1, 0.0, 12);
        let p = synth_generate(&spec, 1).unwrap();
        let (x, y) = (p.series(0), p.series(1));
        // y[t] - x[t-1] = seasonal(t) + const, so it repeats with the period.
        let d: Vec<f64> = (1..300).map(|t| y[t] - x[t - 1]).collect();
        for t in 0..d.len() - 12 {
            assert!((d[t + 12] - d[t]).abs() < 1e-9);
        }
    }

    #[test]
    fn synth_rejects_cycles() {
        let mut spec = SynthSpec::star(2, 50, 1, 0.1, 4);
        spec.couplings.push(Coupling {
            driver: 1,
            driven: 0,
            weight: 1.0,
        });
        assert!(synth_generate(&spec, 0).is_err());
    }

    #[test]
    fn csv_roundtrip_preserves_values() {
        let spec = SynthSpec::star(2, 30, 1, 0.2, 6);
        let p = synth_generate(&spec, 2).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let q = SeriesPanel::from_csv_reader(buf.as_slice()).unwrap();
        assert_eq!(q.len(), p.len());
        for i in 0..2 {
            for (a, b) in p.series(i).iter().zip(q.series(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
