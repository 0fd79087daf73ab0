//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `GMOECKPT`, `u32` format version, `u64`
//! header length and a JSON header (model config, stage, step, adapter and
//! routing layout, RNG state, last routing loads), then `u64` tensor count
//! and per tensor: name, `u8` trainable flag, `u32` rank, `u64` extents,
//! raw `f64` values. The optimizer section follows in the same style
//! (name, `u64` step count, moments), and a trailing `u64` FNV-1a checksum
//! covers every preceding byte.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWConfig, Moments};
use super::trainer::{LayerLoad, TrainState};
use crate::model::{sparsify, ModelConfig, VisionLanguageModel};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GMOECKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    stage: u8,
    step: u64,
    lora: bool,
    moe_layers: Vec<usize>,
    rng: Option<RngState>,
    adam: Option<AdamWConfig>,
    routing: Vec<LayerLoad>,
}

/// Everything a checkpoint file holds.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: VisionLanguageModel<f64>,
    pub optimizer: Option<AdamW<f64>>,
    pub stage: u8,
    pub step: u64,
    pub rng: Option<RngState>,
    /// Per-layer routing load of the last training epoch.
    pub routing: Vec<LayerLoad>,
}

impl Checkpoint {
    pub fn from_model(model: VisionLanguageModel<f64>) -> Self {
        Self {
            model,
            optimizer: None,
            stage: 0,
            step: 0,
            rng: None,
            routing: Vec::new(),
        }
    }

    pub fn from_state(st: &TrainState<f64>) -> Self {
        Self {
            model: st.model.clone(),
            optimizer: Some(st.optimizer.clone()),
            stage: st.stage,
            step: st.step,
            rng: Some(RngState::capture(&st.rng)),
            routing: st.routing(),
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn truncated() -> Error {
    Error::Checkpoint("truncated file".into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > self.buf.len() - self.pos {
            return Err(truncated());
        }
        Ok(n)
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8 name".into()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(truncated)?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        config: ck.model.config.clone(),
        stage: ck.stage,
        step: ck.step,
        lora: ck.model.has_lora(),
        moe_layers: ck.model.moe_layers(),
        rng: ck.rng.clone(),
        adam: ck.optimizer.as_ref().map(|o| o.cfg),
        routing: ck.routing.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.bytes(&json);
    let params = ck.model.params();
    w.u64(params.len() as u64);
    for (name, t) in params {
        w.bytes(name.as_bytes());
        w.u8(t.requires_grad() as u8);
        w.u32(t.shape().len() as u32);
        for d in t.shape() {
            w.u64(*d as u64);
        }
        w.f64s(t.data());
    }
    match &ck.optimizer {
        None => w.u64(0),
        Some(o) => {
            w.u64(o.state.len() as u64);
            for (name, m) in &o.state {
                w.bytes(name.as_bytes());
                w.u64(m.t);
                w.u64(m.m.len() as u64);
                w.f64s(&m.m);
                w.f64s(&m.v);
            }
        }
    }
    let sum = fnv1a(&w.0);
    w.u64(sum);
    Ok(w.0)
}

/// Rebuilds the parameter layout described by a header with placeholder
/// values.
fn skeleton(h: &Header) -> Result<VisionLanguageModel<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut m = VisionLanguageModel::new(h.config.clone(), &mut rng)?;
    if h.lora {
        m.wrap_lora(h.config.lora_rank, h.config.lora_scale, &mut rng)?;
    }
    if !h.moe_layers.is_empty() {
        let c = &h.config;
        m = sparsify(&m, c.experts, c.top_k, c.moe_period, c.router_init_std, &mut rng)?;
        if m.moe_layers() != h.moe_layers {
            return Err(Error::Checkpoint("routed layer layout does not match the config".into()));
        }
    }
    Ok(m)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(truncated());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("format version {version}, expected {VERSION}")));
    }
    if u64::from_le_bytes(tail.try_into().unwrap()) != fnv1a(body) {
        return Err(Error::Checkpoint("checksum mismatch (truncated or corrupted)".into()));
    }
    let header: Header =
        serde_json::from_slice(r.bytes()?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    header.config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut model = skeleton(&header)?;

    let count = r.u64()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let trainable = r.u8()? != 0;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).ok_or_else(truncated)?;
        let mut t = Tensor::new(shape, r.f64s(n)?)?;
        t.set_requires_grad(trainable);
        tensors.insert(name, t);
    }
    let mut slots = model.params_mut();
    if slots.len() != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, model layout has {}",
            tensors.len(),
            slots.len()
        )));
    }
    for (name, slot) in slots.iter_mut() {
        let t = tensors
            .remove(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!("tensor `{name}` has shape {:?}, expected {:?}", t.shape(), slot.shape())));
        }
        **slot = t;
    }

    let states = r.u64()? as usize;
    let optimizer = match header.adam {
        None if states == 0 => None,
        None => return Err(Error::Checkpoint("optimizer state without optimizer config".into())),
        Some(cfg) => {
            let mut o = AdamW::new(cfg);
            for _ in 0..states {
                let name = r.string()?;
                let t = r.u64()?;
                let n = r.len()?;
                let m = r.f64s(n)?;
                let v = r.f64s(n)?;
                o.state.insert(name, Moments { m, v, t });
            }
            Some(o)
        }
    };
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after optimizer state".into()));
    }
    Ok(Checkpoint {
        model,
        optimizer,
        stage: header.stage,
        step: header.step,
        rng: header.rng,
        routing: header.routing,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
