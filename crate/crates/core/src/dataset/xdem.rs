//! `XDEM` embedding files.
//!
//! Layout (little-endian):
//! - magic `XDEM`, version `u32 = 1`, flags `u32` (bit 0: captions present)
//! - record count `u64`, `d_v u32`, `S u32`, `d_t u32`
//! - per record: `id_len u16` + UTF-8 id, label `i32` (−1 = unlabeled),
//!   image embedding `d_v × f32`, token embeddings `S·d_t × f32` row-major,
//!   attention mask `S × u8`, and when captions are present `cap_len u32` +
//!   UTF-8 caption.

use std::path::Path;

use super::{EmbeddingDims, EmbeddingRecord, EmbeddingSet};
use crate::binio::{write_atomic, ByteReader, ByteWriter, FormatError, FORMAT_VERSION};

pub const XDEM_MAGIC: &[u8; 4] = b"XDEM";
const FLAG_CAPTIONS: u32 = 1;

pub fn encode_embeddings(set: &EmbeddingSet) -> Result<Vec<u8>, FormatError> {
    let dims = &set.dims;
    let captions = set.has_captions();
    let mut w = ByteWriter::new();
    w.bytes(XDEM_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(if captions { FLAG_CAPTIONS } else { 0 });
    w.u64(set.records.len() as u64);
    for d in [dims.d_v, dims.seq_len, dims.d_t] {
        w.u32(u32::try_from(d).map_err(|_| FormatError::DimensionMismatch(format!("dimension {d} exceeds u32")))?);
    }
    for rec in &set.records {
        rec.validate(dims).map_err(FormatError::DimensionMismatch)?;
        w.short_str(&rec.id)?;
        w.i32(match rec.label {
            None => -1,
            Some(l) => i32::try_from(l).map_err(|_| FormatError::InvalidContent(format!("label {l} exceeds i32")))?,
        });
        rec.image_embedding.iter().for_each(|&x| w.f32(x));
        rec.token_embeddings.iter().for_each(|&x| w.f32(x));
        rec.attention_mask.iter().for_each(|&m| w.u8(m as u8));
        if captions {
            let cap = rec.caption.as_deref().unwrap_or("");
            w.u32(u32::try_from(cap.len()).map_err(|_| FormatError::InvalidContent("caption too long".into()))?);
            w.bytes(cap.as_bytes());
        }
    }
    Ok(w.into_inner())
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingSet, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(XDEM_MAGIC)?;
    r.version()?;
    let flags = r.u32()?;
    if flags & !FLAG_CAPTIONS != 0 {
        return Err(FormatError::InvalidContent(format!("unknown flag bits {flags:#x}")));
    }
    let captions = flags & FLAG_CAPTIONS != 0;
    let count = r.u64()?;
    let dims = EmbeddingDims { d_v: r.u32()? as usize, seq_len: r.u32()? as usize, d_t: r.u32()? as usize };
    if dims.d_v == 0 || dims.seq_len == 0 || dims.d_t == 0 {
        return Err(FormatError::DimensionMismatch(format!("zero dimension in header {dims:?}")));
    }
    // The header count is untrusted; cap the reservation by what the body could hold.
    let min_record = 2 + 4 + 4 * (dims.d_v + dims.seq_len * dims.d_t) + dims.seq_len;
    let mut records = Vec::with_capacity((count as usize).min(r.remaining() / min_record + 1));
    for _ in 0..count {
        let id_len = r.u16()? as usize;
        let id = r.utf8(id_len)?;
        let label = match r.i32()? {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(FormatError::InvalidContent(format!("record {id:?}: invalid label {l}"))),
        };
        let image_embedding = r.f32s(dims.d_v)?;
        let token_embeddings = r.f32s(dims.seq_len * dims.d_t)?;
        let mut attention_mask = Vec::with_capacity(dims.seq_len);
        for _ in 0..dims.seq_len {
            attention_mask.push(match r.u8()? {
                0 => false,
                1 => true,
                v => return Err(FormatError::InvalidContent(format!("record {id:?}: mask byte {v}"))),
            });
        }
        let caption = if captions {
            let len = r.u32()? as usize;
            Some(r.utf8(len)?)
        } else {
            None
        };
        let rec = EmbeddingRecord { id, label, image_embedding, token_embeddings, attention_mask, caption };
        rec.validate(&dims).map_err(FormatError::InvalidContent)?;
        records.push(rec);
    }
    r.finish()?;
    Ok(EmbeddingSet { dims, records })
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet, FormatError> {
    decode_embeddings(&std::fs::read(path)?)
}

pub fn save_embeddings(path: impl AsRef<Path>, set: &EmbeddingSet) -> Result<(), FormatError> {
    let bytes = encode_embeddings(set)?;
    write_atomic(path.as_ref(), &bytes)?;
    Ok(())
}
