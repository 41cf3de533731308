//! `ctxrnn` command-line interface.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data, format or
//! I/O error, 3 training divergence.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctxrnn::config::{KeyValues, TrainConfig};
use ctxrnn::data::{load_panel, synth_generate, SeriesPanel, SynthSpec};
use ctxrnn::eval::{ablate, evaluate};
use ctxrnn::forecaster::{predict, train, write_forecast_csv, TrainLog};
use ctxrnn::model::Ensemble;
use ctxrnn::select::{build_context_map, ContextMap};
use ctxrnn::Error;

#[derive(Parser, Debug)]
#[command(name = "ctxrnn", version, about = "Context-augmented RNN forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Select contexts for every series and write a context map.
    SelectContext {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model (or ensemble) and write the model file.
    Train {
        #[arg(long)]
        panel: PathBuf,
        /// Context map; selected from the panel when omitted.
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV log.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Forecast every series from one anchor and write a CSV.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        panel: PathBuf,
        /// Anchor step index; defaults to the end of the panel.
        #[arg(long)]
        anchor: Option<usize>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a model on the test split and print a JSON report.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        panel: PathBuf,
    },
    /// Generate a synthetic panel.
    Synth {
        /// `key = value` file with n, T, lag, noise, period, coupling.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Extra `key=value` overrides.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score the full, global-only and no-context variants.
    Ablate {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long)]
        map: Option<PathBuf>,
        /// Also write the three reports as a JSON array.
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for every random choice of the run.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig, Error> {
        let mut kv = match &self.config {
            Some(p) => KeyValues::parse(&read_text(p)?)?,
            None => KeyValues::default(),
        };
        apply_overrides(&mut kv, &self.set)?;
        if let Some(s) = self.seed {
            kv.set("seed", s.to_string());
        }
        TrainConfig::from_key_values(&kv)
    }
}

fn apply_overrides(kv: &mut KeyValues, set: &[String]) -> Result<(), Error> {
    for s in set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set {s:?} is not KEY=VALUE")))?;
        kv.set(k.trim(), v.trim());
    }
    Ok(())
}

fn read_text(p: &Path) -> Result<String, Error> {
    fs::read_to_string(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
}

fn write_text(p: &Path, text: &str) -> Result<(), Error> {
    fs::write(p, text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
}

fn context_ids(panel: &SeriesPanel, map: Option<&Path>, c: &TrainConfig) -> Result<Vec<usize>, Error> {
    let map = match map {
        Some(p) => {
            let m = ContextMap::parse(&read_text(p)?)?;
            m.validate(panel.n())?;
            m
        }
        None => select(panel, c)?,
    };
    Ok(map.global_batch)
}

fn select(panel: &SeriesPanel, c: &TrainConfig) -> Result<ContextMap, Error> {
    let s = c.contexts_per_target.min(panel.n().saturating_sub(1)).max(1);
    Ok(build_context_map(panel, s, c.context_batch, c.granger_maxlag)?.map)
}

fn log_csv(logs: &[TrainLog]) -> String {
    let mut out = String::from("member,epoch,batch_size,learning_rate,train_loss,validation_loss,seconds,best_epoch\n");
    for (m, log) in logs.iter().enumerate() {
        for e in &log.epochs {
            out += &format!(
                "{m},{},{},{},{},{},{:.3},{}\n",
                e.epoch,
                e.batch_size,
                e.learning_rate,
                e.train_loss,
                e.validation_loss.map_or(String::new(), |v| v.to_string()),
                e.seconds,
                log.best_epoch
            );
        }
    }
    out
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), Error> {
    match out {
        Some(p) => fs::write(p, bytes).map_err(|e| Error::Data(format!("{}: {e}", p.display()))),
        None => match std::io::stdout().write_all(bytes) {
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
            _ => Ok(()),
        },
    }
}

fn open_panel(p: &Path) -> Result<SeriesPanel, Error> {
    load_panel(p).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", p.display())),
        other => other,
    })
}

fn open_model(p: &Path) -> Result<Ensemble, Error> {
    Ensemble::load(p).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", p.display())),
        other => other,
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::SelectContext { panel, out, cfg } => {
            let c = cfg.load()?;
            let p = open_panel(&panel)?;
            let map = select(&p, &c)?;
            write_text(&out, &map.to_string())?;
            log::info!("context batch {:?}", map.global_batch);
        }
        Command::Train { panel, map, out, log, cfg } => {
            let c = cfg.load()?;
            let p = open_panel(&panel)?;
            let ids = context_ids(&p, map.as_deref(), &c)?;
            let (ens, logs) = train(&p, &ids, &c)?;
            ens.save(&out)?;
            if let Some(l) = log {
                write_text(&l, &log_csv(&logs))?;
            }
        }
        Command::Predict { model, panel, anchor, out } => {
            let ens = open_model(&model)?;
            let p = open_panel(&panel)?;
            let all: Vec<usize> = (0..p.n()).collect();
            let f = predict(&ens, &p, anchor.unwrap_or(p.len()), &all)?;
            let mut buf = Vec::new();
            write_forecast_csv(&p, &f, &mut buf)?;
            emit(out.as_deref(), &buf)?;
        }
        Command::Evaluate { model, panel } => {
            let ens = open_model(&model)?;
            let p = open_panel(&panel)?;
            let r = evaluate(&ens, &p)?;
            emit(None, format!("{}\n", r.to_json()?).as_bytes())?;
        }
        Command::Synth { spec, set, seed, out } => {
            let mut kv = match &spec {
                Some(s) => KeyValues::parse(&read_text(s)?)?,
                None => KeyValues::default(),
            };
            apply_overrides(&mut kv, &set)?;
            let p = synth_generate(&SynthSpec::from_key_values(&kv)?, seed)?;
            let mut buf = Vec::new();
            p.write_csv(&mut buf)?;
            emit(out.as_deref(), &buf)?;
        }
        Command::Ablate { panel, map, json, cfg } => {
            let c = cfg.load()?;
            let p = open_panel(&panel)?;
            let ids = context_ids(&p, map.as_deref(), &c)?;
            let reports = ablate(&p, &ids, &c)?;
            let mut table = String::new();
            for (mode, r) in &reports {
                table += &format!("{mode}\trse {:.6}\tcorr {:.6}\n", r.rse, r.corr);
            }
            emit(None, table.as_bytes())?;
            if let Some(j) = json {
                let all: Vec<_> = reports.iter().map(|(_, r)| r).collect();
                let text = serde_json::to_string_pretty(&all).map_err(|e| Error::Format(e.to_string()))?;
                write_text(&j, &text)?;
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Diverged(_) => 3,
        Error::Data(_) | Error::Format(_) | Error::Io(_) | Error::Tensor(_) => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
