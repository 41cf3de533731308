//! Model parameters, their layout, and the binary model file.
//!
//! File layout (little endian):
//!
//! ```text
//! "CTXR" | u32 version | u32 block count | blocks...
//! block: u32 name length | name (UTF-8) | u32 rank | u64 dims[rank] | f64 values[prod(dims)]
//! ```
//!
//! Blocks named `meta.*` hold architecture settings; member `i`'s
//! parameters are stored as `m{i}/<name>`.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ContextMode, TrainConfig};
use crate::context::ConvShape;
use crate::data::CALENDAR_DIM;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::wdrnn::{StackShape, CALENDAR_EMBEDDING};

pub const MAGIC: &[u8; 4] = b"CTXR";
pub const FORMAT_VERSION: u32 = 1;

const MAX_BLOCKS: usize = 1 << 20;
const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;
const MAX_VALUES: u64 = 1 << 28;

/// Architecture of one trained network.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub n_series: usize,
    /// Context batch, in order.
    pub context_ids: Vec<usize>,
    /// Positivity shift of the training panel.
    pub shift: f64,
    pub params: ParamStore,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn init(config: &TrainConfig, n_series: usize, context_ids: &[usize], shift: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_series == 0 {
            return Err(Error::Data("model needs at least one series".into()));
        }
        if config.mode.uses_context() {
            if context_ids.is_empty() {
                return Err(Error::Data("context mode needs a non-empty context batch".into()));
            }
            if let Some(bad) = context_ids.iter().find(|&&c| c >= n_series) {
                return Err(Error::Data(format!("context series {bad} outside panel of {n_series}")));
            }
        }
        let context_ids = if config.mode.uses_context() { context_ids.to_vec() } else { Vec::new() };
        let mut m = Self {
            config: config.clone(),
            n_series,
            context_ids,
            shift,
            params: ParamStore::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        m.stack_shape().init(&mut store, "rnn", &mut rng)?;
        store.insert_uniform("calendar", &[CALENDAR_DIM, CALENDAR_EMBEDDING], 4, &mut rng)?;
        let out = m.head_width();
        store.insert_uniform("head.W", &[out, config.hidden], config.hidden, &mut rng)?;
        store.insert("head.b", Tensor::zeros(&[out]))?;
        let logit = config.smoothing_logit_init;
        for j in 0..n_series {
            store.insert(format!("es.main.{j}"), Tensor::vector(vec![logit, logit]))?;
        }
        if config.mode.uses_context() {
            m.conv_shape().init(&mut store, "ctx", &mut rng)?;
            for k in 0..m.k() {
                store.insert(format!("es.ctx.{k}"), Tensor::vector(vec![logit, logit]))?;
            }
        }
        if config.mode == ContextMode::Full {
            for j in 0..n_series {
                store.insert(format!("mod.{j}"), Tensor::filled(&[m.context_width()], 1.0))?;
            }
        }
        m.params = store;
        Ok(m)
    }

    /// Context batch size in use (zero without a context track).
    pub fn k(&self) -> usize {
        self.context_ids.len()
    }

    /// `u * K`, the context slot of the input.
    pub fn context_width(&self) -> usize {
        self.config.context_size * self.k()
    }

    /// `W + p + 1 + 8 + u*K`.
    pub fn input_width(&self) -> usize {
        self.config.window + self.config.period + 1 + CALENDAR_EMBEDDING + self.context_width()
    }

    /// Median, lower and upper paths plus two smoothing corrections.
    pub fn head_width(&self) -> usize {
        3 * self.config.horizon + 2
    }

    pub fn stack_shape(&self) -> StackShape {
        StackShape {
            input: self.input_width(),
            hidden: self.config.hidden,
            s_h: self.config.state_width,
            dilations: self.config.dilations.clone(),
        }
    }

    pub fn conv_shape(&self) -> ConvShape {
        ConvShape {
            window: self.config.window,
            slots: self.config.context_size,
            channels: self.config.conv_channels,
            kernel: self.config.conv_kernel,
        }
    }

    /// Checks that every expected parameter exists with the right shape.
    pub fn check_layout(&self) -> Result<()> {
        let fresh = Self::init(&self.config, self.n_series, &self.context_ids, self.shift, 0)?;
        if fresh.params.len() != self.params.len() {
            return Err(Error::Format(format!(
                "model has {} parameter blocks, expected {}",
                self.params.len(),
                fresh.params.len()
            )));
        }
        for (name, t) in fresh.params.iter() {
            let have = self.params.require(name)?;
            if have.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    have.shape(),
                    t.shape()
                )));
            }
            if have.values().iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("parameter {name} holds non-finite values")));
            }
        }
        Ok(())
    }

    fn meta(&self) -> Vec<(String, Tensor)> {
        let c = &self.config;
        let arch = vec![
            c.window as f64,
            c.horizon as f64,
            c.period as f64,
            c.context_size as f64,
            c.context_batch as f64,
            c.contexts_per_target as f64,
            c.state_width as f64,
            c.hidden as f64,
            c.conv_channels as f64,
            c.conv_kernel as f64,
            c.bptt as f64,
            c.granger_maxlag as f64,
            c.seed as f64,
            c.ensemble as f64,
            c.mode.code() as f64,
            c.delta_clamp,
            c.smoothing_logit_init,
            c.q_median,
            c.q_lower,
            c.q_upper,
            c.gamma,
            c.epochs as f64,
            self.n_series as f64,
            self.shift,
        ];
        vec![
            ("meta.arch".into(), Tensor::vector(arch)),
            (
                "meta.dilations".into(),
                Tensor::vector(c.dilations.iter().map(|&d| d as f64).collect()),
            ),
            (
                "meta.context".into(),
                Tensor::vector(self.context_ids.iter().map(|&d| d as f64).collect()),
            ),
        ]
    }
}

/// One or more independently trained members sharing an architecture.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub members: Vec<Model>,
}

fn count(v: f64, what: &str) -> Result<usize> {
    if v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v < 1e12 {
        Ok(v as usize)
    } else {
        Err(Error::Format(format!("{what} is not a count: {v}")))
    }
}

impl Ensemble {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let first = self
            .members
            .first()
            .ok_or_else(|| Error::Data("cannot save an empty ensemble".into()))?;
        let mut blocks = first.meta();
        blocks.push(("meta.members".into(), Tensor::scalar(self.members.len() as f64)));
        for (i, m) in self.members.iter().enumerate() {
            for (name, t) in m.params.iter() {
                blocks.push((format!("m{i}/{name}"), t.clone()));
            }
        }
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(blocks.len() as u32).to_le_bytes())?;
        for (name, t) in &blocks {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("not a model file (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported model format version {version}")));
        }
        let n_blocks = cur.u32()? as usize;
        if n_blocks > MAX_BLOCKS {
            return Err(Error::Format(format!("{n_blocks} blocks is implausible")));
        }
        let mut blocks: Vec<(String, Tensor)> = Vec::new();
        for _ in 0..n_blocks {
            let len = cur.u32()? as usize;
            if len > MAX_NAME {
                return Err(Error::Format("block name too long".into()));
            }
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Format("block name is not UTF-8".into()))?
                .to_string();
            let rank = cur.u32()? as usize;
            if rank > MAX_RANK {
                return Err(Error::Format(format!("block {name} has rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            let mut total: u64 = 1;
            for _ in 0..rank {
                let d = cur.u64()?;
                total = total
                    .checked_mul(d)
                    .filter(|t| *t <= MAX_VALUES)
                    .ok_or_else(|| Error::Format(format!("block {name} is too large")))?;
                dims.push(d as usize);
            }
            let raw = cur.take(total as usize * 8)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            blocks.push((name, Tensor::new(dims, values)?));
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after the last block".into()));
        }
        Self::from_blocks(blocks)
    }

    fn from_blocks(blocks: Vec<(String, Tensor)>) -> Result<Self> {
        let find = |n: &str| {
            blocks
                .iter()
                .find(|(name, _)| name == n)
                .map(|(_, t)| t.values().to_vec())
                .ok_or_else(|| Error::Format(format!("missing block {n}")))
        };
        let arch = find("meta.arch")?;
        if arch.len() != 24 {
            return Err(Error::Format(format!("meta.arch holds {} values, expected 24", arch.len())));
        }
        let u = |i: usize, what: &str| count(arch[i], what);
        let mut c = TrainConfig::default();
        c.window = u(0, "window")?;
        c.horizon = u(1, "horizon")?;
        c.period = u(2, "period")?;
        c.context_size = u(3, "context_size")?;
        c.context_batch = u(4, "context_batch")?;
        c.contexts_per_target = u(5, "contexts_per_target")?;
        c.state_width = u(6, "state_width")?;
        c.hidden = u(7, "hidden")?;
        c.conv_channels = u(8, "conv_channels")?;
        c.conv_kernel = u(9, "conv_kernel")?;
        c.bptt = u(10, "bptt")?;
        c.granger_maxlag = u(11, "granger_maxlag")?;
        c.seed = u(12, "seed")? as u64;
        c.ensemble = u(13, "ensemble")?;
        c.mode = u8::try_from(u(14, "mode")?)
            .ok()
            .and_then(ContextMode::from_code)
            .ok_or_else(|| Error::Format("unknown context mode".into()))?;
        c.delta_clamp = arch[15];
        c.smoothing_logit_init = arch[16];
        c.q_median = arch[17];
        c.q_lower = arch[18];
        c.q_upper = arch[19];
        c.gamma = arch[20];
        c.epochs = u(21, "epochs")?;
        let n_series = u(22, "series count")?;
        let shift = arch[23];
        if !shift.is_finite() {
            return Err(Error::Format("shift is not finite".into()));
        }
        c.dilations = find("meta.dilations")?
            .into_iter()
            .map(|d| count(d, "dilation"))
            .collect::<Result<_>>()?;
        if c.window > 1 << 20 || c.horizon > 1 << 20 || c.period > 1 << 20 || n_series > 1 << 20 {
            return Err(Error::Format("architecture sizes are implausible".into()));
        }
        c.validate().map_err(|e| Error::Format(format!("stored configuration is invalid: {e}")))?;
        let context_ids: Vec<usize> = find("meta.context")?
            .into_iter()
            .map(|d| count(d, "context id"))
            .collect::<Result<_>>()?;
        let members = count(find("meta.members")?.first().copied().unwrap_or(f64::NAN), "member count")?;
        if members == 0 {
            return Err(Error::Format("model file has no members".into()));
        }
        let mut stores = vec![ParamStore::new(); members];
        for (name, t) in blocks {
            if name.starts_with("meta.") {
                continue;
            }
            let (idx, rest) = name
                .strip_prefix('m')
                .and_then(|s| s.split_once('/'))
                .ok_or_else(|| Error::Format(format!("unexpected block {name}")))?;
            let i: usize = idx.parse().map_err(|_| Error::Format(format!("unexpected block {name}")))?;
            let store = stores
                .get_mut(i)
                .ok_or_else(|| Error::Format(format!("block {name} names member {i} of {members}")))?;
            store.insert(rest, t).map_err(|_| Error::Format(format!("duplicate block {name}")))?;
        }
        let models = stores
            .into_iter()
            .map(|params| {
                let m = Model {
                    config: c.clone(),
                    n_series,
                    context_ids: context_ids.clone(),
                    shift,
                    params,
                };
                m.check_layout()?;
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { members: models })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Format("model file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> TrainConfig {
        TrainConfig {
            window: 8,
            horizon: 2,
            period: 4,
            dilations: vec![1, 2],
            context_size: 2,
            context_batch: 2,
            state_width: 3,
            hidden: 4,
            conv_channels: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn widths_and_counts_per_mode() {
        let c = tiny();
        let full = Model::init(&c, 3, &[0, 2], 0.0, 1).unwrap();
        assert_eq!(full.input_width(), 8 + 4 + 1 + 8 + 4);
        assert!(full.params.get("mod.2").is_some());
        let g = Model::init(&TrainConfig { mode: ContextMode::GlobalOnly, ..c.clone() }, 3, &[0, 2], 0.0, 1).unwrap();
        let none = Model::init(&TrainConfig { mode: ContextMode::None, ..c.clone() }, 3, &[0, 2], 0.0, 1).unwrap();
        assert_eq!(none.input_width(), full.input_width() - 4);
        assert!(g.params.get("mod.0").is_none());
        assert_eq!(full.params.numel() - g.params.numel(), 3 * 4);
        assert!(none.params.get("ctx.dw1").is_none());
        assert!(Model::init(&c, 3, &[3], 0.0, 1).is_err());
    }

    #[test]
    fn file_roundtrip_is_exact() {
        let c = tiny();
        let e = Ensemble {
            members: vec![
                Model::init(&c, 3, &[1, 0], 0.25, 1).unwrap(),
                Model::init(&c, 3, &[1, 0], 0.25, 2).unwrap(),
            ],
        };
        let bytes = e.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"CTXR");
        let back = Ensemble::from_bytes(&bytes).unwrap();
        assert_eq!(back.members.len(), 2);
        assert_eq!(back.members[1].params, e.members[1].params);
        assert_eq!(back.members[0].context_ids, vec![1, 0]);
        assert_eq!(back.members[0].shift, 0.25);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let e = Ensemble {
            members: vec![Model::init(&tiny(), 2, &[0, 1], 0.0, 1).unwrap()],
        };
        let bytes = e.to_bytes().unwrap();
        assert!(Ensemble::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Ensemble::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Ensemble::from_bytes(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Ensemble::from_bytes(&extra).is_err());
        assert!(Ensemble::from_bytes(b"").is_err());
    }
}
