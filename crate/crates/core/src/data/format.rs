//! DPGE embedding files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DPGE" | u32 version=1 | u32 dim | u64 count
//! per record:
//!   u32 len + UTF-8 id
//!   u32 len + UTF-8 video_id
//!   u8  domain_kind (0 source, 1 target_unlabeled, 2 eval)
//!   u8  len + UTF-8 dataset_tag
//!   i8  label (-1 unknown, 0 real, 1 fake)
//!   dim x f32 feature
//! ```
//!
//! Features may be stored unnormalized; [`read_embeddings`] normalizes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::record::{DomainKind, EmbeddingRecord, EmbeddingSet, Label};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"DPGE";
pub const VERSION: u32 = 1;

/// A record exactly as stored, before normalization and set validation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub id: String,
    pub video_id: String,
    pub domain_kind: DomainKind,
    pub dataset_tag: String,
    pub label: Label,
    pub feature: Vec<f32>,
}

pub fn write_embeddings<F: Scalar>(set: &EmbeddingSet<F>, path: impl AsRef<Path>) -> Result<()> {
    write_records(path, set.dim(), set.records())
}

/// Serializes records; every feature must have length `dim`.
pub fn write_records<F: Scalar>(
    path: impl AsRef<Path>,
    dim: usize,
    records: &[EmbeddingRecord<F>],
) -> Result<()> {
    let bytes = encode(dim, records)?;
    let path = path.as_ref();
    write_atomic(path, &bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".partial");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn encode<F: Scalar>(dim: usize, records: &[EmbeddingRecord<F>]) -> Result<Vec<u8>> {
    let dim32 = u32::try_from(dim).map_err(|_| Error::Format("dim exceeds u32".into()))?;
    let mut out = Vec::with_capacity(20 + records.len() * (dim * 4 + 32));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dim32.to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        if r.feature.len() != dim {
            return Err(Error::data(
                &r.id,
                format!("feature length {} differs from file dim {dim}", r.feature.len()),
            ));
        }
        put_str32(&mut out, &r.id, &r.id)?;
        put_str32(&mut out, &r.video_id, &r.id)?;
        out.push(r.domain_kind.to_u8());
        let tag = r.dataset_tag.as_bytes();
        let tag_len = u8::try_from(tag.len())
            .map_err(|_| Error::data(&r.id, "dataset_tag longer than 255 bytes"))?;
        out.push(tag_len);
        out.extend_from_slice(tag);
        out.push(r.label.to_i8() as u8);
        for x in &r.feature {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn put_str32(out: &mut Vec<u8>, s: &str, id: &str) -> Result<()> {
    let len = u32::try_from(s.len()).map_err(|_| Error::data(id, "string longer than u32"))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated payload while reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String> {
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format(format!("{what} is not valid UTF-8")))
    }
}

/// Parses a DPGE file without normalizing or validating the set.
pub fn read_raw(path: impl AsRef<Path>) -> Result<(usize, Vec<RawRecord>)> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

fn decode(buf: &[u8]) -> Result<(usize, Vec<RawRecord>)> {
    let mut c = Cursor { buf, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"DPGE\"")));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported DPGE version {version}")));
    }
    let dim = c.u32("dim")? as usize;
    if dim == 0 {
        return Err(Error::Format("dim must be positive".into()));
    }
    let count = c.u64("count")?;
    // Each record needs at least 11 header bytes plus the feature payload.
    let min_record = 11u64 + dim as u64 * 4;
    let remaining = (buf.len() - c.pos) as u64;
    if count.saturating_mul(min_record) > remaining {
        return Err(Error::Format(format!(
            "truncated payload: {count} records of dim {dim} cannot fit in {remaining} bytes"
        )));
    }
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let id_len = c.u32("id length")? as usize;
        let id = c.string(id_len, "id")?;
        let vid_len = c.u32("video_id length")? as usize;
        let video_id = c.string(vid_len, "video_id")?;
        let dk = c.u8("domain_kind")?;
        let domain_kind = DomainKind::from_u8(dk)
            .ok_or_else(|| Error::Format(format!("record `{id}`: invalid domain_kind {dk}")))?;
        let tag_len = c.u8("dataset_tag length")? as usize;
        let dataset_tag = c.string(tag_len, "dataset_tag")?;
        let lb = c.u8("label")? as i8;
        let label = Label::from_i8(lb)
            .ok_or_else(|| Error::Format(format!("record `{id}`: invalid label {lb}")))?;
        let raw = c.take(dim * 4, "feature")?;
        let feature = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        records.push(RawRecord {
            id,
            video_id,
            domain_kind,
            dataset_tag,
            label,
            feature,
        });
    }
    if c.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after last record", buf.len() - c.pos)));
    }
    Ok((dim, records))
}

/// Reads, validates, promotes to `F`, and L2-normalizes every feature.
pub fn read_embeddings<F: Scalar>(path: impl AsRef<Path>) -> Result<EmbeddingSet<F>> {
    let path = path.as_ref();
    let (dim, raw) = read_raw(path)?;
    let records = raw
        .into_iter()
        .map(|r| EmbeddingRecord {
            id: r.id,
            video_id: r.video_id,
            domain_kind: r.domain_kind,
            dataset_tag: r.dataset_tag,
            label: r.label,
            feature: r.feature.iter().map(|&x| F::lit(f64::from(x))).collect(),
        })
        .collect();
    EmbeddingSet::new(dim, records, path.display().to_string())?.normalized()
}
