//! `BTRU` checkpoint files.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "BTRU"                 magic
//! u32                    format version (1)
//! u32 × 12               in_channels, base_width, num_classes, embed_dim,
//!                        vit_layers, heads, ffn_hidden, cbam_reduction,
//!                        max_norm_groups, H, W, D
//! f64                    norm_eps
//! u8                     precision (0 = f32, 1 = f64)
//! u32                    parameter count
//! per parameter:
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, u32 × rank dims
//!   raw data, 4 bytes (f32) or 8 bytes (f64) per element
//! ```

use std::fs;
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use super::{BiTrUnet, ModelConfig, ParamStore, Precision};
use crate::codec::ByteReader;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BTRU";
pub const VERSION: u32 = 1;

const MAX_DIM: usize = 1 << 28;

pub fn encode(model: &BiTrUnet) -> Vec<u8> {
    let c = model.config();
    let mut out = Vec::with_capacity(64 + model.parameter_count() * c.precision.bytes());
    out.extend_from_slice(MAGIC);
    let mut put = |v: u32| out.write_u32::<LittleEndian>(v).expect("vec write");
    put(VERSION);
    for v in [
        c.in_channels,
        c.base_width,
        c.num_classes,
        c.embed_dim,
        c.vit_layers,
        c.heads,
        c.ffn_hidden,
        c.cbam_reduction,
        c.max_norm_groups,
        c.input_size[0],
        c.input_size[1],
        c.input_size[2],
    ] {
        put(v as u32);
    }
    out.write_f64::<LittleEndian>(c.norm_eps).expect("vec write");
    out.push(c.precision.code());
    out.write_u32::<LittleEndian>(model.params().len() as u32).expect("vec write");
    for (name, t) in model.params().iter() {
        out.write_u32::<LittleEndian>(name.len() as u32).expect("vec write");
        out.extend_from_slice(name.as_bytes());
        out.write_u32::<LittleEndian>(t.rank() as u32).expect("vec write");
        for &d in t.shape() {
            out.write_u32::<LittleEndian>(d as u32).expect("vec write");
        }
        match c.precision {
            Precision::F32 => t.data().iter().for_each(|&v| out.write_f32::<LittleEndian>(v as f32).expect("vec write")),
            Precision::F64 => t.data().iter().for_each(|&v| out.write_f64::<LittleEndian>(v).expect("vec write")),
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<BiTrUnet> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let mut fields = [0usize; 12];
    for (i, f) in fields.iter_mut().enumerate() {
        *f = r.len(&format!("config field {i}"), MAX_DIM)?;
    }
    let norm_eps = r.f64("norm_eps")?;
    let at = r.offset();
    let precision = Precision::from_code(r.u8("precision")?).ok_or_else(|| Error::Parse {
        offset: at,
        detail: "unknown precision code".into(),
    })?;
    let config = ModelConfig {
        in_channels: fields[0],
        base_width: fields[1],
        num_classes: fields[2],
        embed_dim: fields[3],
        vit_layers: fields[4],
        heads: fields[5],
        ffn_hidden: fields[6],
        cbam_reduction: fields[7],
        max_norm_groups: fields[8],
        input_size: [fields[9], fields[10], fields[11]],
        norm_eps,
        precision,
    };
    config.validate().map_err(|e| Error::Parse {
        offset: 8,
        detail: format!("config block: {e}"),
    })?;

    let count = r.len("parameter count", 1 << 20)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.string("parameter name", 4096)?;
        let rank = r.len("rank", 8)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.len("dimension", MAX_DIM)?);
        }
        let n: usize = shape.iter().product();
        let at = r.offset();
        let raw = r.take(n * precision.bytes(), &format!("data of `{name}`"))?;
        let data = match precision {
            Precision::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64).collect(),
            Precision::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
        };
        if store.id(&name).is_some() {
            return Err(Error::Parse {
                offset: at,
                detail: format!("duplicate parameter `{name}`"),
            });
        }
        store.register(name, Tensor::from_parts(shape, data));
    }
    if r.remaining() != 0 {
        return Err(Error::Parse {
            offset: r.offset(),
            detail: format!("{} trailing bytes", r.remaining()),
        });
    }
    BiTrUnet::from_parts(config, store)
}

pub fn save_checkpoint(model: &BiTrUnet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<BiTrUnet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
