//! Sectioned binary checkpoint container.
//!
//! Layout: the magic string `PAFLOWCKPT`, a u32 version, then length-prefixed
//! sections (`egnn`, `sizer`, `optim`, `trainstate`, `step`, `config`), each
//! a tagged byte payload. Arrays are stored as f64 little-endian regardless
//! of the in-memory scalar, which round-trips f64 runs bit-exactly and f32
//! runs losslessly.

use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use super::Adam;
use crate::egnn::{EgnnConfig, EgnnParams, LayerParams};
use crate::geomdata::FeatureSpec;
use crate::num::Real;
use crate::sizer::SizerParams;

pub const MAGIC: &[u8; 10] = b"PAFLOWCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic string")]
    BadMagic,
    #[error("unsupported checkpoint version {got}, expected {expected}")]
    Version { expected: u32, got: u32 },
    #[error("truncated checkpoint: needed {needed} more bytes in {context}")]
    Truncated { context: &'static str, needed: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint is missing the {0} section")]
    MissingSection(&'static str),
}

/// Mid-run state needed to resume a training stream bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub best_val: f64,
    pub stall: u32,
    pub epoch_order: Vec<u32>,
    pub epoch_pos: u32,
}

/// Everything a run persists: network weights, the optional sizer section,
/// optimizer moments, the resume state, a step counter, and the resolved
/// configuration echo.
#[derive(Debug, Clone)]
pub struct Checkpoint<S> {
    pub egnn: EgnnParams<S>,
    pub sizer: Option<SizerParams<S>>,
    pub optimizer: Option<Adam<S>>,
    pub train_state: Option<TrainState>,
    pub step: u64,
    pub config_echo: String,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
    fn array<S: Real>(&mut self, a: &Array2<S>) {
        self.u64(a.nrows() as u64);
        self.u64(a.ncols() as u64);
        for &v in a.iter() {
            self.f64(v.to_f64x());
        }
    }
    fn arrays<S: Real>(&mut self, list: &[&Array2<S>]) {
        self.u64(list.len() as u64);
        for a in list {
            self.array(a);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    context: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], context: &'static str) -> Self {
        Self { buf, pos: 0, context }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated {
                context: self.context,
                needed: self.pos + n - self.buf.len(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn u128(&mut self) -> Result<u128, CheckpointError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize64(&mut self) -> Result<usize, CheckpointError> {
        Ok(self.u64()? as usize)
    }
    fn array<S: Real>(&mut self) -> Result<Array2<S>, CheckpointError> {
        let rows = self.usize64()?;
        let cols = self.usize64()?;
        if rows.saturating_mul(cols) > 1 << 28 {
            return Err(CheckpointError::Malformed(format!("array {rows}x{cols} too large")));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(S::of(self.f64()?));
        }
        Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| CheckpointError::Malformed(format!("array shape: {e}")))
    }
    fn arrays<S: Real>(&mut self) -> Result<Vec<Array2<S>>, CheckpointError> {
        let n = self.usize64()?;
        if n > 1 << 20 {
            return Err(CheckpointError::Malformed(format!("{n} arrays in one section")));
        }
        (0..n).map(|_| self.array()).collect()
    }
}

fn egnn_section<S: Real>(p: &EgnnParams<S>) -> Vec<u8> {
    let mut w = Writer::new();
    w.u64(p.config.hidden as u64);
    w.u64(p.config.heads as u64);
    w.u64(p.config.layers as u64);
    w.u64(p.config.k as u64);
    w.f64(p.config.gate_clip);
    w.u64(p.features.n_elements as u64);
    w.u64(p.features.n_residue_classes as u64);
    w.u64(p.features.n_ligand_types as u64);
    w.arrays(&p.flatten());
    w.buf
}

fn parse_egnn<S: Real>(buf: &[u8]) -> Result<EgnnParams<S>, CheckpointError> {
    let mut r = Reader::new(buf, "egnn section");
    let config = EgnnConfig {
        hidden: r.usize64()?,
        heads: r.usize64()?,
        layers: r.usize64()?,
        k: r.usize64()?,
        gate_clip: r.f64()?,
    };
    let features = FeatureSpec {
        n_elements: r.usize64()?,
        n_residue_classes: r.usize64()?,
        n_ligand_types: r.usize64()?,
    };
    let arrays: Vec<Array2<S>> = r.arrays()?;
    let expected = 4 + 12 * config.layers + 8;
    if arrays.len() != expected {
        return Err(CheckpointError::Malformed(format!(
            "egnn section holds {} arrays, layout needs {expected}",
            arrays.len()
        )));
    }
    let mut it = arrays.into_iter();
    let mut next = || it.next().expect("length checked");
    let (embed_p_w, embed_p_b, embed_l_w, embed_l_b) = (next(), next(), next(), next());
    let layers = (0..config.layers)
        .map(|_| LayerParams {
            msg_w1: next(),
            msg_b1: next(),
            msg_w2: next(),
            msg_b2: next(),
            att_w1: next(),
            att_b1: next(),
            att_w2: next(),
            att_b2: next(),
            gate_w1: next(),
            gate_b1: next(),
            gate_w2: next(),
            gate_b2: next(),
        })
        .collect();
    Ok(EgnnParams {
        config,
        features,
        embed_p_w,
        embed_p_b,
        embed_l_w,
        embed_l_b,
        layers,
        type_w1: next(),
        type_b1: next(),
        type_w2: next(),
        type_b2: next(),
        aff_w1: next(),
        aff_b1: next(),
        aff_w2: next(),
        aff_b2: next(),
    })
}

fn sizer_section<S: Real>(p: &SizerParams<S>) -> Vec<u8> {
    let mut w = Writer::new();
    w.u64(p.hidden.0 as u64);
    w.u64(p.hidden.1 as u64);
    w.u64(p.hidden.2 as u64);
    for v in p.input_mean {
        w.f64(v.to_f64x());
    }
    for v in p.input_std {
        w.f64(v.to_f64x());
    }
    w.u64(p.n_min as u64);
    w.u64(p.n_max as u64);
    w.f64(p.delta);
    w.arrays(&p.flatten());
    w.buf
}

fn parse_sizer<S: Real>(buf: &[u8]) -> Result<SizerParams<S>, CheckpointError> {
    let mut r = Reader::new(buf, "sizer section");
    let hidden = (r.usize64()?, r.usize64()?, r.usize64()?);
    let mut input_mean = [S::zero(); 4];
    for v in &mut input_mean {
        *v = S::of(r.f64()?);
    }
    let mut input_std = [S::zero(); 4];
    for v in &mut input_std {
        *v = S::of(r.f64()?);
    }
    let n_min = r.usize64()?;
    let n_max = r.usize64()?;
    let delta = r.f64()?;
    let weights: Vec<Array2<S>> = r.arrays()?;
    if weights.len() != 8 {
        return Err(CheckpointError::Malformed(format!(
            "sizer section holds {} arrays, layout needs 8",
            weights.len()
        )));
    }
    Ok(SizerParams { hidden, weights, input_mean, input_std, n_min, n_max, delta })
}

fn optim_section<S: Real>(opt: &Adam<S>) -> Vec<u8> {
    let mut w = Writer::new();
    w.f64(opt.lr);
    w.f64(opt.beta1);
    w.f64(opt.beta2);
    w.f64(opt.eps);
    w.u64(opt.step_count);
    w.arrays(&opt.m.iter().collect::<Vec<_>>());
    w.arrays(&opt.v.iter().collect::<Vec<_>>());
    w.buf
}

fn parse_optim<S: Real>(buf: &[u8]) -> Result<Adam<S>, CheckpointError> {
    let mut r = Reader::new(buf, "optim section");
    Ok(Adam {
        lr: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
        step_count: r.u64()?,
        m: r.arrays()?,
        v: r.arrays()?,
    })
}

fn trainstate_section(s: &TrainState) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(&s.rng_seed);
    w.u128(s.rng_word_pos);
    w.f64(s.best_val);
    w.u32(s.stall);
    w.u32(s.epoch_pos);
    w.u64(s.epoch_order.len() as u64);
    for &i in &s.epoch_order {
        w.u32(i);
    }
    w.buf
}

fn parse_trainstate(buf: &[u8]) -> Result<TrainState, CheckpointError> {
    let mut r = Reader::new(buf, "trainstate section");
    let mut rng_seed = [0u8; 32];
    rng_seed.copy_from_slice(r.take(32)?);
    let rng_word_pos = r.u128()?;
    let best_val = r.f64()?;
    let stall = r.u32()?;
    let epoch_pos = r.u32()?;
    let n = r.usize64()?;
    if n > 1 << 28 {
        return Err(CheckpointError::Malformed(format!("epoch order of length {n}")));
    }
    let mut epoch_order = Vec::with_capacity(n);
    for _ in 0..n {
        epoch_order.push(r.u32()?);
    }
    Ok(TrainState { rng_seed, rng_word_pos, best_val, stall, epoch_order, epoch_pos })
}

/// Serialize a checkpoint to bytes.
pub fn checkpoint_bytes<S: Real>(ckpt: &Checkpoint<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let mut section = |tag: &str, payload: Vec<u8>| {
        out.push(tag.len() as u8);
        out.extend_from_slice(tag.as_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
    };
    section("egnn", egnn_section(&ckpt.egnn));
    if let Some(sizer) = &ckpt.sizer {
        section("sizer", sizer_section(sizer));
    }
    if let Some(opt) = &ckpt.optimizer {
        section("optim", optim_section(opt));
    }
    if let Some(state) = &ckpt.train_state {
        section("trainstate", trainstate_section(state));
    }
    section("step", ckpt.step.to_le_bytes().to_vec());
    section("config", ckpt.config_echo.as_bytes().to_vec());
    out
}

pub fn save_checkpoint<S: Real>(
    path: impl AsRef<Path>,
    ckpt: &Checkpoint<S>,
) -> Result<(), CheckpointError> {
    std::fs::write(path, checkpoint_bytes(ckpt))?;
    Ok(())
}

/// Parse a checkpoint from bytes.
pub fn checkpoint_from_bytes<S: Real>(bytes: &[u8]) -> Result<Checkpoint<S>, CheckpointError> {
    let mut r = Reader::new(bytes, "header");
    if r.take(MAGIC.len())? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version { expected: VERSION, got: version });
    }

    let mut egnn = None;
    let mut sizer = None;
    let mut optimizer = None;
    let mut train_state = None;
    let mut step = 0u64;
    let mut config_echo = String::new();

    r.context = "section table";
    while r.pos < bytes.len() {
        let tag_len = r.take(1)?[0] as usize;
        let tag = std::str::from_utf8(r.take(tag_len)?)
            .map_err(|_| CheckpointError::Malformed("section tag is not utf-8".into()))?
            .to_string();
        let payload_len = r.u64()? as usize;
        let payload = r.take(payload_len)?;
        match tag.as_str() {
            "egnn" => egnn = Some(parse_egnn::<S>(payload)?),
            "sizer" => sizer = Some(parse_sizer::<S>(payload)?),
            "optim" => optimizer = Some(parse_optim::<S>(payload)?),
            "trainstate" => train_state = Some(parse_trainstate(payload)?),
            "step" => {
                let mut sr = Reader::new(payload, "step section");
                step = sr.u64()?;
            }
            "config" => {
                config_echo = String::from_utf8(payload.to_vec())
                    .map_err(|_| CheckpointError::Malformed("config echo is not utf-8".into()))?;
            }
            other => {
                return Err(CheckpointError::Malformed(format!("unknown section tag `{other}`")))
            }
        }
    }

    Ok(Checkpoint {
        egnn: egnn.ok_or(CheckpointError::MissingSection("egnn"))?,
        sizer,
        optimizer,
        train_state,
        step,
        config_echo,
    })
}

pub fn load_checkpoint<S: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<S>, CheckpointError> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}
