//! `DPGC` checkpoint files.
//!
//! ```text
//! "DPGC" | u32 version | u64 payload length | payload | SHA-256(payload)
//! ```
//!
//! The payload is a fixed-order little-endian encoding: the scalar type name,
//! every parameter and optimizer buffer as f64 bit patterns (lossless for both
//! supported widths), phase/epoch counters, the config hash, and the saved RNG
//! streams. A checksum mismatch or short read rejects the whole file.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::format::write_atomic;
use crate::error::{Error, Result};
use crate::model::state::{ModelState, Optimizers, Phase};
use crate::numerics::{AdamState, RngStream};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DPGC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub state: ModelState<F>,
    pub config_hash: String,
    pub streams: Vec<RngStream>,
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
    fn scalar<F: Scalar>(&mut self, v: F) {
        self.u64(v.as_f64().to_bits());
    }
    fn vec<F: Scalar>(&mut self, v: &[F]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.scalar(x);
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn adam<F: Scalar>(&mut self, a: &AdamState<F>) {
        self.vec(&a.m);
        self.vec(&a.v);
        self.u64(a.t);
        for x in [a.lr, a.weight_decay, a.beta1, a.beta2, a.eps] {
            self.scalar(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("checkpoint payload truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn scalar<F: Scalar>(&mut self) -> Result<F> {
        Ok(F::lit(f64::from_bits(self.u64()?)))
    }
    fn vec<F: Scalar>(&mut self, expected: usize) -> Result<Vec<F>> {
        let n = self.u64()? as usize;
        if n != expected {
            return Err(Error::Format(format!("checkpoint buffer length {n}, expected {expected}")));
        }
        (0..n).map(|_| self.scalar()).collect()
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
    fn adam<F: Scalar>(&mut self, len: usize) -> Result<AdamState<F>> {
        let m = self.vec(len)?;
        let v = self.vec(len)?;
        let t = self.u64()?;
        Ok(AdamState {
            m,
            v,
            t,
            lr: self.scalar()?,
            weight_decay: self.scalar()?,
            beta1: self.scalar()?,
            beta2: self.scalar()?,
            eps: self.scalar()?,
        })
    }
}

fn encode<F: Scalar>(ck: &Checkpoint<F>) -> Vec<u8> {
    let s = &ck.state;
    let mut w = Writer(Vec::new());
    w.str(F::NAME);
    w.u32(s.dim as u32);
    w.vec(&s.adapter);
    w.vec(&s.head);
    w.vec(&s.anchors);
    w.scalar(s.tau);
    w.adam(&s.optim.adapter);
    w.adam(&s.optim.head);
    w.adam(&s.optim.anchors);
    w.u8(match s.phase {
        Phase::Pretrain => 0,
        Phase::Joint => 1,
    });
    w.u32(s.epoch);
    w.str(&ck.config_hash);
    w.u32(ck.streams.len() as u32);
    for st in &ck.streams {
        for word in st.state() {
            w.u64(word);
        }
        w.u64(st.draws());
    }
    w.0
}

fn decode<F: Scalar>(payload: &[u8]) -> Result<Checkpoint<F>> {
    let mut r = Reader { buf: payload, pos: 0 };
    let scalar = r.str()?;
    if scalar != F::NAME {
        return Err(Error::Version(format!("checkpoint stores {scalar} parameters, expected {}", F::NAME)));
    }
    let dim = r.u32()? as usize;
    if dim < 2 {
        return Err(Error::Format("checkpoint dimension must be at least 2".into()));
    }
    let adapter = r.vec(dim * dim + dim)?;
    let head = r.vec(2 * dim + 2)?;
    let anchors = r.vec(2 * dim)?;
    let tau = r.scalar()?;
    let optim = Optimizers {
        adapter: r.adam(adapter.len())?,
        head: r.adam(head.len())?,
        anchors: r.adam(anchors.len())?,
    };
    let phase = match r.u8()? {
        0 => Phase::Pretrain,
        1 => Phase::Joint,
        p => return Err(Error::Format(format!("invalid phase code {p}"))),
    };
    let epoch = r.u32()?;
    let config_hash = r.str()?;
    let n_streams = r.u32()? as usize;
    let mut streams = Vec::with_capacity(n_streams.min(64));
    for _ in 0..n_streams {
        let state = [r.u64()?, r.u64()?, r.u64()?, r.u64()?];
        streams.push(RngStream::from_parts(state, r.u64()?));
    }
    if r.pos != payload.len() {
        return Err(Error::Format("trailing bytes in checkpoint payload".into()));
    }
    let state = ModelState {
        dim,
        adapter,
        head,
        anchors,
        tau,
        optim,
        phase,
        epoch,
    };
    if !state.is_finite() {
        return Err(Error::Format("checkpoint holds non-finite parameters".into()));
    }
    Ok(Checkpoint {
        state,
        config_hash,
        streams,
    })
}

pub fn checkpoint_bytes<F: Scalar>(ck: &Checkpoint<F>) -> Vec<u8> {
    let payload = encode(ck);
    let mut out = Vec::with_capacity(payload.len() + 48);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    out
}

pub fn save_checkpoint<F: Scalar>(ck: &Checkpoint<F>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &checkpoint_bytes(ck))
}

pub fn parse_checkpoint<F: Scalar>(bytes: &[u8]) -> Result<Checkpoint<F>> {
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a DPGC checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version(format!(
            "checkpoint schema version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[16..];
    if (body.len() as u64) != len.saturating_add(32) {
        return Err(Error::Format("checkpoint length does not match its header".into()));
    }
    let (payload, digest) = body.split_at(len as usize);
    if Sha256::digest(payload).as_slice() != digest {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    decode(payload)
}

pub fn load_checkpoint<F: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<F>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}
