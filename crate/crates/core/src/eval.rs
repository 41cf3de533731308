//! Test-split metrics and the context ablation.
//!
//! RSE pools every test cell: `sqrt(sum (y - y_hat)^2) / sqrt(sum (y - mean(Y))^2)`
//! with the mean taken over all test cells. CORR is the Pearson correlation of
//! each series over its test cells, averaged over series; constant series are
//! skipped and counted.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{ContextMode, TrainConfig};
use crate::data::SeriesPanel;
use crate::error::{Error, Result};
use crate::forecaster::{ensemble_range, train, Forecast, Splits};
use crate::model::Ensemble;

fn check_rows(predicted: &[Vec<f64>], actual: &[Vec<f64>]) -> Result<()> {
    if predicted.len() != actual.len() {
        return Err(Error::Data(format!("{} predicted rows for {} actual rows", predicted.len(), actual.len())));
    }
    for (i, (p, a)) in predicted.iter().zip(actual).enumerate() {
        if p.len() != a.len() {
            return Err(Error::Data(format!("row {i}: {} predictions for {} actuals", p.len(), a.len())));
        }
    }
    Ok(())
}

/// Root relative squared error over all cells. Rows may differ in length.
pub fn rse(predicted: &[Vec<f64>], actual: &[Vec<f64>]) -> Result<f64> {
    check_rows(predicted, actual)?;
    let cells: usize = actual.iter().map(Vec::len).sum();
    if cells == 0 {
        return Err(Error::Data("no cells to score".into()));
    }
    let mean = actual.iter().flatten().sum::<f64>() / cells as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, a) in predicted.iter().zip(actual) {
        for (x, y) in p.iter().zip(a) {
            num += (y - x) * (y - x);
            den += (y - mean) * (y - mean);
        }
    }
    if !(den > 0.0) {
        return Err(Error::Data("actual values are constant".into()));
    }
    Ok(num.sqrt() / den.sqrt())
}

/// Mean per-row correlation and the number of rows skipped as constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corr {
    pub value: f64,
    pub skipped: usize,
}

/// Pearson correlation of each row pair, averaged over rows whose actual and
/// predicted values both vary.
pub fn corr(predicted: &[Vec<f64>], actual: &[Vec<f64>]) -> Result<Corr> {
    check_rows(predicted, actual)?;
    let mut sum = 0.0;
    let mut used = 0;
    for (p, a) in predicted.iter().zip(actual) {
        if let Some(r) = row_corr(p, a) {
            sum += r;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Data("every series is constant over the scored cells".into()));
    }
    Ok(Corr {
        value: sum / used as f64,
        skipped: predicted.len() - used,
    })
}

fn row_corr(p: &[f64], a: &[f64]) -> Option<f64> {
    let n = p.len();
    if n < 2 {
        return None;
    }
    let mp = p.iter().sum::<f64>() / n as f64;
    let ma = a.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in p.iter().zip(a) {
        sxy += (x - mp) * (y - ma);
        sxx += (x - mp) * (x - mp);
        syy += (y - ma) * (y - ma);
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonScore {
    pub rse: f64,
    /// `None` when every series is constant at this horizon.
    pub corr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rse: f64,
    pub corr: f64,
    /// Series left out of CORR because they are constant over the test cells.
    pub corr_skipped: usize,
    pub cells: usize,
    pub per_horizon: BTreeMap<usize, HorizonScore>,
    pub runtime_seconds: f64,
    pub config: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Parses and checks the metric ranges.
    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let rse_ok = |v: f64| v.is_finite() && v >= 0.0;
        let corr_ok = |v: f64| (-1.0..=1.0).contains(&v);
        if !rse_ok(self.rse) || !corr_ok(self.corr) {
            return Err(Error::Format(format!("rse {} / corr {} out of range", self.rse, self.corr)));
        }
        for (h, s) in &self.per_horizon {
            if *h == 0 || !rse_ok(s.rse) || s.corr.is_some_and(|c| !corr_ok(c)) {
                return Err(Error::Format(format!("horizon {h} scores out of range")));
            }
        }
        if !(self.runtime_seconds >= 0.0 && self.runtime_seconds.is_finite()) {
            return Err(Error::Format(format!("runtime {} is invalid", self.runtime_seconds)));
        }
        Ok(())
    }
}

/// Predicted and actual rows (one per series) from forecasts, keeping only
/// observed targets and optionally one horizon step (1-based).
fn rows(panel: &SeriesPanel, forecasts: &[Forecast], horizon: Option<usize>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut pred = vec![Vec::new(); panel.n()];
    let mut act = vec![Vec::new(); panel.n()];
    for f in forecasts {
        for (h, &p) in f.median.iter().enumerate() {
            if horizon.is_some_and(|k| k != h + 1) {
                continue;
            }
            if let Some(y) = panel.value(f.series, f.anchor + h) {
                pred[f.series].push(p);
                act[f.series].push(panel.unshift(y));
            }
        }
    }
    let keep: Vec<usize> = (0..panel.n()).filter(|&i| !act[i].is_empty()).collect();
    (keep.iter().map(|&i| pred[i].clone()).collect(), keep.iter().map(|&i| act[i].clone()).collect())
}

/// Scores forecasts against the panel, pooled over horizons and per horizon.
pub fn score(panel: &SeriesPanel, forecasts: &[Forecast], horizon: usize) -> Result<EvalReport> {
    let (p, a) = rows(panel, forecasts, None);
    let c = corr(&p, &a)?;
    let mut per_horizon = BTreeMap::new();
    for h in 1..=horizon {
        let (ph, ah) = rows(panel, forecasts, Some(h));
        if ah.is_empty() {
            continue;
        }
        per_horizon.insert(
            h,
            HorizonScore {
                rse: rse(&ph, &ah)?,
                corr: corr(&ph, &ah).ok().map(|c| c.value),
            },
        );
    }
    Ok(EvalReport {
        rse: rse(&p, &a)?,
        corr: c.value,
        corr_skipped: c.skipped,
        cells: a.iter().map(Vec::len).sum(),
        per_horizon,
        runtime_seconds: 0.0,
        config: BTreeMap::new(),
    })
}

/// Forecasts at every test anchor `t` in `[b, T - fh]` and scores them.
pub fn evaluate(ens: &Ensemble, panel: &SeriesPanel) -> Result<EvalReport> {
    let started = Instant::now();
    let model = ens.members.first().ok_or_else(|| Error::Data("empty ensemble".into()))?;
    if model.n_series != panel.n() {
        return Err(Error::Data(format!("model has {} series, panel has {}", model.n_series, panel.n())));
    }
    let sp = Splits::of(panel)?;
    let c = &model.config;
    let from = sp.validation_end.max(c.window);
    if from + c.horizon > panel.len() {
        return Err(Error::Data("test segment is shorter than the horizon".into()));
    }
    let all: Vec<usize> = (0..panel.n()).collect();
    let forecasts = ensemble_range(ens, panel, &all, from, panel.len() - c.horizon)?;
    let mut report = score(panel, &forecasts, c.horizon)?;
    report.runtime_seconds = started.elapsed().as_secs_f64();
    report.config = config_echo(c);
    Ok(report)
}

fn config_echo(c: &TrainConfig) -> BTreeMap<String, String> {
    let kv = c.to_key_values();
    kv.keys().map(|k| (k.to_string(), kv.get(k).unwrap_or_default().to_string())).collect()
}

pub const ABLATION_MODES: [ContextMode; 3] = [ContextMode::Full, ContextMode::GlobalOnly, ContextMode::None];

/// Trains and evaluates one ensemble per context mode with otherwise
/// identical settings.
pub fn ablate(panel: &SeriesPanel, context_ids: &[usize], config: &TrainConfig) -> Result<Vec<(ContextMode, EvalReport)>> {
    ABLATION_MODES
        .iter()
        .map(|&mode| {
            let c = TrainConfig { mode, ..config.clone() };
            let started = Instant::now();
            let (ens, _) = train(panel, context_ids, &c)?;
            let mut r = evaluate(&ens, panel)?;
            r.runtime_seconds = started.elapsed().as_secs_f64();
            Ok((mode, r))
        })
        .collect()
}
