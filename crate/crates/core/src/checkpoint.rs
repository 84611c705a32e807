//! Training checkpoints.
//!
//! Layout: magic `DRSK`, `u32` format version, then segments, each a 4-byte
//! tag, a `u64` payload length and the payload, and a trailing CRC-64/XZ.
//! Segments in order: `CONF` (config echo text), `PARM` (named tensors),
//! `MOM1`, `MOM2` (Adam moments), `STEP` (per-parameter step counts),
//! `RNGS` (seed and next epoch stream), `STAG` (stage and epoch), and
//! optionally `BANK` (memory bank bytes, so training can resume).

use std::path::Path;

use crate::bank::MemoryBank;
use crate::codec::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::trainer::{Stage, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DRSK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Storage width for tensor values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    fn code(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Everything stored in a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub params: Vec<(String, Tensor)>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub steps: Vec<u64>,
    pub seed: u64,
    pub epoch: u64,
    pub stage: Stage,
    pub encoder_frozen: bool,
    pub bank: Option<MemoryBank>,
}

fn tensors(w: &mut Writer, items: &[(&str, &Tensor)], p: Precision) {
    w.u8(p.code());
    w.u64(items.len() as u64);
    for (name, t) in items {
        w.str(name);
        w.u32(t.shape().len() as u32);
        for &s in t.shape() {
            w.u64(s as u64);
        }
        for &x in t.data() {
            match p {
                Precision::F32 => w.f32(x as f32),
                Precision::F64 => w.f64(x),
            }
        }
    }
}

fn read_tensors(r: &mut Reader<'_>) -> Result<Vec<(String, Tensor)>> {
    let at = r.offset();
    let width = r.u8()?;
    if width != 4 && width != 8 {
        return Err(Error::format(at, format!("unknown value width {width}")));
    }
    let n = r.count(4)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.str()?;
        let at = r.offset();
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::format(at, format!("bad tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let len = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b));
        let len = len.ok_or_else(|| Error::format(at, "tensor size overflows"))?;
        let mut data = Vec::with_capacity(len.min(1 << 24));
        for _ in 0..len {
            data.push(if width == 4 { f64::from(r.f32()?) } else { r.f64()? });
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::format(at, e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

fn segment(w: &mut Writer, tag: &[u8; 4], payload: Writer) {
    let bytes = payload.into_bytes();
    w.bytes(tag);
    w.u64(bytes.len() as u64);
    w.bytes(&bytes);
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, config: &str, bank: Option<&MemoryBank>) -> Self {
        let params = state.model.params();
        Self {
            config: config.to_string(),
            params: params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            m: state.adam.m.clone(),
            v: state.adam.v.clone(),
            steps: state.adam.steps.clone(),
            seed: state.seed,
            epoch: state.epoch as u64,
            stage: state.stage,
            encoder_frozen: state.model.encoder.is_frozen(),
            bank: bank.cloned(),
        }
    }

    pub fn to_bytes(&self, precision: Precision) -> Vec<u8> {
        let mut w = Writer::with_magic(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);

        let mut s = Writer::default();
        s.str(&self.config);
        segment(&mut w, b"CONF", s);

        let named: Vec<(&str, &Tensor)> = self.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut s = Writer::default();
        tensors(&mut s, &named, precision);
        segment(&mut w, b"PARM", s);

        for (tag, moments) in [(b"MOM1", &self.m), (b"MOM2", &self.v)] {
            let named: Vec<(&str, &Tensor)> =
                self.params.iter().zip(moments).map(|((n, _), t)| (n.as_str(), t)).collect();
            let mut s = Writer::default();
            tensors(&mut s, &named, precision);
            segment(&mut w, tag, s);
        }

        let mut s = Writer::default();
        s.u64(self.steps.len() as u64);
        for &x in &self.steps {
            s.u64(x);
        }
        segment(&mut w, b"STEP", s);

        let mut s = Writer::default();
        s.u64(self.seed);
        s.u64(self.epoch + 1);
        segment(&mut w, b"RNGS", s);

        let mut s = Writer::default();
        s.u8(self.stage.into());
        s.u8(u8::from(self.encoder_frozen));
        s.u64(self.epoch);
        segment(&mut w, b"STAG", s);

        if let Some(bank) = &self.bank {
            let mut s = Writer::default();
            s.bytes(&bank.to_bytes());
            segment(&mut w, b"BANK", s);
        }
        w.finish_with_crc()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Reader::new(bytes).magic(CHECKPOINT_MAGIC)?;
        let body = codec::verify_crc(bytes)?;
        let mut r = Reader::new(body);
        r.magic(CHECKPOINT_MAGIC)?;
        let at = r.offset();
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(at, format!("unsupported checkpoint version {version}")));
        }
        let mut segs: Vec<([u8; 4], u64, &[u8])> = Vec::new();
        while !r.at_end() {
            let tag: [u8; 4] = r.bytes(4)?.try_into().unwrap();
            let len = r.u64()?;
            let start = r.offset();
            let payload = r.bytes(usize::try_from(len).map_err(|_| Error::format(start, "segment too large"))?)?;
            segs.push((tag, start, payload));
        }
        let find = |tag: &[u8; 4]| {
            segs.iter()
                .find(|s| &s.0 == tag)
                .map(|s| (s.1, s.2))
                .ok_or_else(|| Error::format(body.len() as u64, format!("missing segment {}", String::from_utf8_lossy(tag))))
        };
        // segment readers report offsets relative to the segment start
        let sub = |tag: &[u8; 4]| -> Result<(u64, Reader<'_>)> {
            let (start, p) = find(tag)?;
            Ok((start, Reader::new(p)))
        };
        let shift = |start: u64, e: Error| match e {
            Error::Format { offset, message } => Error::format(start + offset, message),
            other => other,
        };

        let (st, mut c) = sub(b"CONF")?;
        let config = c.str().map_err(|e| shift(st, e))?;
        let (st, mut p) = sub(b"PARM")?;
        let params = read_tensors(&mut p).map_err(|e| shift(st, e))?;
        let mut moments = Vec::new();
        for tag in [b"MOM1", b"MOM2"] {
            let (st, mut m) = sub(tag)?;
            let t = read_tensors(&mut m).map_err(|e| shift(st, e))?;
            if t.len() != params.len() || t.iter().zip(&params).any(|(a, b)| a.0 != b.0 || a.1.shape() != b.1.shape()) {
                return Err(Error::format(st, "moments do not match parameters"));
            }
            moments.push(t.into_iter().map(|(_, t)| t).collect::<Vec<_>>());
        }
        let v = moments.pop().unwrap();
        let m = moments.pop().unwrap();
        let (st, mut s) = sub(b"STEP")?;
        let n = s.count(8).map_err(|e| shift(st, e))?;
        if n != params.len() {
            return Err(Error::format(st, "step counts do not match parameters"));
        }
        let steps = (0..n).map(|_| s.u64()).collect::<Result<Vec<_>>>().map_err(|e| shift(st, e))?;
        let (st, mut g) = sub(b"RNGS")?;
        let seed = g.u64().map_err(|e| shift(st, e))?;
        let next_stream = g.u64().map_err(|e| shift(st, e))?;
        let (st, mut s) = sub(b"STAG")?;
        let stage = Stage::try_from(s.u8().map_err(|e| shift(st, e))?).map_err(|e| shift(st, e))?;
        let encoder_frozen = s.u8().map_err(|e| shift(st, e))? != 0;
        let epoch = s.u64().map_err(|e| shift(st, e))?;
        if next_stream != epoch + 1 {
            return Err(Error::format(st, "RNG stream does not match epoch"));
        }
        let bank = match find(b"BANK") {
            Ok((st, bytes)) => Some(MemoryBank::from_bytes(bytes).map_err(|e| shift(st, e))?),
            Err(_) => None,
        };
        Ok(Self {
            config,
            params,
            m,
            v,
            steps,
            seed,
            epoch,
            stage,
            encoder_frozen,
            bank,
        })
    }

    pub fn save(&self, path: &Path, precision: Precision) -> Result<()> {
        codec::write_atomic(path, &self.to_bytes(precision))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }

    /// Overwrites `state` (built from the same config) with this checkpoint.
    /// Parameter names and shapes must match exactly.
    pub fn restore_into(&self, state: &mut TrainState) -> Result<()> {
        {
            let params = state.model.params();
            if params.len() != self.params.len() {
                return Err(Error::Config(format!(
                    "checkpoint has {} parameters, model has {}",
                    self.params.len(),
                    params.len()
                )));
            }
            for (p, (name, t)) in params.iter().zip(&self.params) {
                if &p.name != name || p.value.shape() != t.shape() {
                    return Err(Error::Config(format!(
                        "checkpoint parameter `{name}` {:?} does not match model `{}` {:?}",
                        t.shape(),
                        p.name,
                        p.value.shape()
                    )));
                }
            }
        }
        for (p, (_, t)) in state.model.params_mut().into_iter().zip(&self.params) {
            p.value = t.clone();
        }
        state.model.encoder.set_frozen(self.encoder_frozen);
        state.adam.m = self.m.clone();
        state.adam.v = self.v.clone();
        state.adam.steps = self.steps.clone();
        state.seed = self.seed;
        state.epoch = self.epoch as usize;
        state.stage = self.stage;
        Ok(())
    }
}
