//! `BTRC` case cache files.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "BTRC"                 magic
//! u32                    format version (1)
//! u32 + bytes            case id (UTF-8)
//! u32 × 4                C, H, W, D
//! f64 × 3                voxel spacing
//! f64 × 2 per channel    normalization mean, sd
//! u32 + per source       u32 + bytes path (UTF-8)
//! f32 × C·H·W·D          image, (C, H, W, D) order, D fastest
//! u8                     1 if a label follows, else 0
//! u8 × H·W·D             external labels
//! u32                    CRC32 of every preceding byte
//! ```

use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, WriteBytesExt};

use super::case::{CaseRecord, Normalization, Volume4D};
use crate::codec::ByteReader;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{numel, SegmentationMask};

pub const CACHE_MAGIC: &[u8; 4] = b"BTRC";
pub const CACHE_VERSION: u32 = 1;

const MAX_DIM: usize = 1 << 16;
const MAX_TEXT: usize = 1 << 16;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.write_u32::<LittleEndian>(s.len() as u32).expect("vec write");
    out.extend_from_slice(s.as_bytes());
}

/// Serializes a record. Image values are stored as f32.
pub fn encode_case(record: &CaseRecord) -> Vec<u8> {
    let v = &record.volume;
    let [h, w, d] = v.dims();
    let mut out = Vec::with_capacity(128 + v.image.numel() * 4 + numel(v.dims()));
    out.extend_from_slice(CACHE_MAGIC);
    out.write_u32::<LittleEndian>(CACHE_VERSION).expect("vec write");
    put_str(&mut out, &record.id);
    for n in [v.channels(), h, w, d] {
        out.write_u32::<LittleEndian>(n as u32).expect("vec write");
    }
    for s in v.spacing {
        out.write_f64::<LittleEndian>(s).expect("vec write");
    }
    for n in &v.normalization {
        out.write_f64::<LittleEndian>(n.mean).expect("vec write");
        out.write_f64::<LittleEndian>(n.sd).expect("vec write");
    }
    out.write_u32::<LittleEndian>(record.sources.len() as u32).expect("vec write");
    for p in &record.sources {
        put_str(&mut out, &p.to_string_lossy());
    }
    for &x in v.image.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    match &record.label {
        Some(l) => {
            out.push(1);
            out.extend_from_slice(l.data());
        }
        None => out.push(0),
    }
    let crc = crc32fast::hash(&out);
    out.write_u32::<LittleEndian>(crc).expect("vec write");
    out
}

pub fn decode_case(bytes: &[u8]) -> Result<CaseRecord> {
    let mut r = ByteReader::new(bytes);
    r.magic(CACHE_MAGIC)?;
    let version = r.u32("version")?;
    if version != CACHE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CACHE_VERSION,
        });
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            offset: bytes.len() as u64,
            detail: "checksum".into(),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = ByteReader::new(body);
    r.take(8, "magic and version")?;
    let id = r.string("case id", MAX_TEXT)?;
    let c = r.len("channels", MAX_DIM)?;
    let dims = [r.len("H", MAX_DIM)?, r.len("W", MAX_DIM)?, r.len("D", MAX_DIM)?];
    let spacing = [r.f64("spacing")?, r.f64("spacing")?, r.f64("spacing")?];
    let mut normalization = Vec::with_capacity(c);
    for _ in 0..c {
        normalization.push(Normalization {
            mean: r.f64("normalization mean")?,
            sd: r.f64("normalization sd")?,
        });
    }
    let n_sources = r.len("source count", MAX_TEXT)?;
    let sources = (0..n_sources)
        .map(|_| r.string("source path", MAX_TEXT).map(PathBuf::from))
        .collect::<Result<Vec<_>>>()?;
    let n = c * numel(dims);
    let mut image = Vec::with_capacity(n);
    for _ in 0..n {
        image.push(r.f32("image")? as f64);
    }
    let at = r.offset();
    let label = match r.u8("label flag")? {
        0 => None,
        1 => Some(SegmentationMask::new(dims, r.take(numel(dims), "label")?.to_vec())?),
        f => {
            return Err(Error::Parse {
                offset: at,
                detail: format!("label flag {f}"),
            })
        }
    };
    if r.remaining() != 0 {
        return Err(Error::Parse {
            offset: r.offset(),
            detail: format!("{} unexpected trailing bytes", r.remaining()),
        });
    }
    let volume = Volume4D {
        image: Tensor::new([c, dims[0], dims[1], dims[2]], image)?,
        spacing,
        normalization,
    };
    let mut record = CaseRecord::new(id, volume, label)?;
    record.sources = sources;
    Ok(record)
}

pub fn save_case(record: &CaseRecord, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_case(record)).map_err(|e| Error::io(path, e))
}

pub fn load_case(path: impl AsRef<Path>) -> Result<CaseRecord> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_case(&bytes)
}
