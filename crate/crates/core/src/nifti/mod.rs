//! Single-file NIfTI-1 volumes (`.nii`, `.nii.gz`), modality stacking,
//! intensity normalization and the `BTRC` case cache.
//!
//! Voxel data in a NIfTI file runs x fastest. In memory a volume is a
//! `(T, X, Y, Z)` tensor with Z fastest, so spatial axes (H, W, D) are the
//! file's (x, y, z).

mod cache;
mod case;

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use cache::{decode_case, encode_case, load_case, save_case, CACHE_MAGIC, CACHE_VERSION};
pub use case::{
    find_modalities, normalize, stack_modalities, CaseRecord, Normalization, Volume4D, MODALITIES,
};

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const DATA_OFFSET: usize = 352;
pub const MAGIC: &[u8; 4] = b"n+1\0";

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_DESCRIP: usize = 148;
const OFF_QFORM_CODE: usize = 252;
const OFF_SFORM_CODE: usize = 254;
const OFF_QUATERN: usize = 256;
const OFF_SROW: usize = 280;
const OFF_MAGIC: usize = 344;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    F32,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::F32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Datatype::U8),
            4 => Ok(Datatype::I16),
            16 => Ok(Datatype::F32),
            _ => Err(Error::UnsupportedDatatype {
                code,
                offset: OFF_DATATYPE as u64,
            }),
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::F32 => 4,
        }
    }
}

/// The header fields this crate reads or passes through.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: Datatype,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub descrip: String,
    pub qform_code: i16,
    pub sform_code: i16,
    /// quatern_b, quatern_c, quatern_d, qoffset_x, qoffset_y, qoffset_z.
    pub quatern: [f32; 6],
    pub srow: [[f32; 4]; 3],
}

impl NiftiHeader {
    /// A 3D header with the given grid and spacing and a scaling affine.
    pub fn new(dims: [usize; 3], spacing: [f64; 3], datatype: Datatype) -> Self {
        let mut dim = [1i16; 8];
        dim[0] = 3;
        for a in 0..3 {
            dim[a + 1] = dims[a] as i16;
        }
        let mut pixdim = [1.0f32; 8];
        for a in 0..3 {
            pixdim[a + 1] = spacing[a] as f32;
        }
        let mut srow = [[0.0f32; 4]; 3];
        for a in 0..3 {
            srow[a][a] = spacing[a] as f32;
        }
        Self {
            dim,
            datatype,
            pixdim,
            vox_offset: DATA_OFFSET as f32,
            scl_slope: 0.0,
            scl_inter: 0.0,
            xyzt_units: 2,
            descrip: String::new(),
            qform_code: 0,
            sform_code: 1,
            quatern: [0.0; 6],
            srow,
        }
    }

    /// Spatial extent (x, y, z).
    pub fn dims(&self) -> [usize; 3] {
        [self.dim[1] as usize, self.dim[2] as usize, self.dim[3] as usize]
    }

    /// Number of volumes along the fourth axis.
    pub fn frames(&self) -> usize {
        if self.dim[0] >= 4 {
            self.dim[4].max(1) as usize
        } else {
            1
        }
    }

    pub fn spacing(&self) -> [f64; 3] {
        [self.pixdim[1] as f64, self.pixdim[2] as f64, self.pixdim[3] as f64]
    }

    /// Copy of this header describing a different grid and datatype, with
    /// scaling cleared. Spacing and affine carry over.
    pub fn with_layout(&self, frames: usize, dims: [usize; 3], datatype: Datatype) -> Self {
        let mut h = self.clone();
        h.dim = [1; 8];
        h.dim[0] = if frames > 1 { 4 } else { 3 };
        for a in 0..3 {
            h.dim[a + 1] = dims[a] as i16;
        }
        h.dim[4] = frames as i16;
        h.datatype = datatype;
        h.vox_offset = DATA_OFFSET as f32;
        h.scl_slope = 0.0;
        h.scl_inter = 0.0;
        h
    }

    fn parse<B: ByteOrder>(b: &[u8]) -> Result<Self> {
        let i16_at = |o: usize| B::read_i16(&b[o..]);
        let f32_at = |o: usize| B::read_f32(&b[o..]);
        let dim: [i16; 8] = std::array::from_fn(|i| i16_at(OFF_DIM + 2 * i));
        if !(3..=4).contains(&dim[0]) {
            return Err(Error::Parse {
                offset: OFF_DIM as u64,
                detail: format!("dim[0] = {}, only 3D and 4D volumes are supported", dim[0]),
            });
        }
        if let Some(a) = (1..=dim[0] as usize).find(|&a| dim[a] < 1) {
            return Err(Error::Parse {
                offset: (OFF_DIM + 2 * a) as u64,
                detail: format!("dim[{a}] = {}", dim[a]),
            });
        }
        let datatype = Datatype::from_code(i16_at(OFF_DATATYPE))?;
        let bitpix = i16_at(OFF_BITPIX);
        if bitpix as usize != 8 * datatype.bytes() {
            return Err(Error::Parse {
                offset: OFF_BITPIX as u64,
                detail: format!("bitpix {bitpix} does not match datatype {}", datatype.code()),
            });
        }
        let descrip = &b[OFF_DESCRIP..OFF_DESCRIP + 80];
        let end = descrip.iter().position(|&c| c == 0).unwrap_or(80);
        Ok(Self {
            dim,
            datatype,
            pixdim: std::array::from_fn(|i| f32_at(OFF_PIXDIM + 4 * i)),
            vox_offset: f32_at(OFF_VOX_OFFSET),
            scl_slope: f32_at(OFF_SCL_SLOPE),
            scl_inter: f32_at(OFF_SCL_INTER),
            xyzt_units: b[OFF_XYZT_UNITS],
            descrip: String::from_utf8_lossy(&descrip[..end]).into_owned(),
            qform_code: i16_at(OFF_QFORM_CODE),
            sform_code: i16_at(OFF_SFORM_CODE),
            quatern: std::array::from_fn(|i| f32_at(OFF_QUATERN + 4 * i)),
            srow: std::array::from_fn(|r| std::array::from_fn(|c| f32_at(OFF_SROW + 16 * r + 4 * c))),
        })
    }

    /// Little-endian header bytes including the zero extension flag.
    pub fn encode(&self) -> Vec<u8> {
        type L = LittleEndian;
        let mut b = vec![0u8; DATA_OFFSET];
        L::write_i32(&mut b[0..], HEADER_SIZE as i32);
        for (i, &d) in self.dim.iter().enumerate() {
            L::write_i16(&mut b[OFF_DIM + 2 * i..], d);
        }
        L::write_i16(&mut b[OFF_DATATYPE..], self.datatype.code());
        L::write_i16(&mut b[OFF_BITPIX..], 8 * self.datatype.bytes() as i16);
        for (i, &p) in self.pixdim.iter().enumerate() {
            L::write_f32(&mut b[OFF_PIXDIM + 4 * i..], p);
        }
        L::write_f32(&mut b[OFF_VOX_OFFSET..], DATA_OFFSET as f32);
        L::write_f32(&mut b[OFF_SCL_SLOPE..], self.scl_slope);
        L::write_f32(&mut b[OFF_SCL_INTER..], self.scl_inter);
        b[OFF_XYZT_UNITS] = self.xyzt_units;
        let desc = self.descrip.as_bytes();
        let n = desc.len().min(79);
        b[OFF_DESCRIP..OFF_DESCRIP + n].copy_from_slice(&desc[..n]);
        L::write_i16(&mut b[OFF_QFORM_CODE..], self.qform_code);
        L::write_i16(&mut b[OFF_SFORM_CODE..], self.sform_code);
        for (i, &q) in self.quatern.iter().enumerate() {
            L::write_f32(&mut b[OFF_QUATERN + 4 * i..], q);
        }
        for (r, row) in self.srow.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                L::write_f32(&mut b[OFF_SROW + 16 * r + 4 * c..], v);
            }
        }
        b[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(MAGIC);
        b
    }
}

/// A decoded NIfTI file: header plus `(T, X, Y, Z)` voxel values with any
/// slope and intercept applied.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiImage {
    pub header: NiftiHeader,
    pub data: Tensor,
}

fn decompress(bytes: Vec<u8>) -> std::io::Result<Vec<u8>> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        MultiGzDecoder::new(bytes.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

/// Decodes an uncompressed NIfTI-1 byte stream.
pub fn decode_nifti(b: &[u8]) -> Result<NiftiImage> {
    if b.len() < HEADER_SIZE {
        return Err(Error::Truncated {
            offset: b.len() as u64,
            detail: format!("header needs {HEADER_SIZE} bytes"),
        });
    }
    if b[OFF_MAGIC..OFF_MAGIC + 4] != MAGIC[..] {
        return Err(Error::BadMagic {
            offset: OFF_MAGIC as u64,
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(&b[OFF_MAGIC..OFF_MAGIC + 4]).into_owned(),
        });
    }
    let big = match (LittleEndian::read_i32(b), BigEndian::read_i32(b)) {
        (348, _) => false,
        (_, 348) => true,
        (v, _) => {
            return Err(Error::Parse {
                offset: 0,
                detail: format!("sizeof_hdr is {v}, expected 348"),
            })
        }
    };
    let header = if big { NiftiHeader::parse::<BigEndian>(b)? } else { NiftiHeader::parse::<LittleEndian>(b)? };
    let start = header.vox_offset as usize;
    if !(header.vox_offset >= DATA_OFFSET as f32) {
        return Err(Error::Parse {
            offset: OFF_VOX_OFFSET as u64,
            detail: format!("vox_offset {} is before the end of the header", header.vox_offset),
        });
    }
    let [x, y, z] = header.dims();
    let t = header.frames();
    let n = t * x * y * z;
    let size = header.datatype.bytes();
    if b.len() < start + n * size {
        return Err(Error::Truncated {
            offset: b.len() as u64,
            detail: format!("voxel data needs {} bytes from offset {start}", n * size),
        });
    }
    let raw = &b[start..start + n * size];
    let value = |i: usize| -> f64 {
        let s = &raw[i * size..];
        match (header.datatype, big) {
            (Datatype::U8, _) => s[0] as f64,
            (Datatype::I16, false) => LittleEndian::read_i16(s) as f64,
            (Datatype::I16, true) => BigEndian::read_i16(s) as f64,
            (Datatype::F32, false) => LittleEndian::read_f32(s) as f64,
            (Datatype::F32, true) => BigEndian::read_f32(s) as f64,
        }
    };
    let scale = header.scl_slope != 0.0 && header.scl_slope.is_finite();
    let (slope, inter) = (header.scl_slope as f64, header.scl_inter as f64);
    let plane = x * y * z;
    let data = Tensor::from_fn([t, x, y, z], |o| {
        let (f, r) = (o / plane, o % plane);
        let (i, j, k) = (r / (y * z), r / z % y, r % z);
        let v = value(f * plane + (k * y + j) * x + i);
        if scale {
            v * slope + inter
        } else {
            v
        }
    });
    Ok(NiftiImage { header, data })
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = decompress(bytes).map_err(|e| Error::io(path, e))?;
    decode_nifti(&bytes)
}

/// Encodes `data` (`(X, Y, Z)` or `(T, X, Y, Z)`) with the grid, spacing
/// and affine of `header` and the requested datatype. Integer datatypes
/// require integral values in range.
pub fn encode_nifti(header: &NiftiHeader, data: &Tensor, datatype: Datatype) -> Result<Vec<u8>> {
    let s = data.shape();
    let (t, [x, y, z]) = match s {
        [x, y, z] => (1, [*x, *y, *z]),
        [t, x, y, z] => (*t, [*x, *y, *z]),
        _ => return Err(Error::shape("write_nifti", format!("expected 3 or 4 axes, got {s:?}"))),
    };
    if [t, x, y, z].iter().any(|&n| n == 0 || n > i16::MAX as usize) {
        return Err(Error::shape("write_nifti", format!("extent out of range in {s:?}")));
    }
    let h = header.with_layout(t, [x, y, z], datatype);
    let mut out = h.encode();
    let plane = x * y * z;
    out.reserve(t * plane * datatype.bytes());
    for f in 0..t {
        for k in 0..z {
            for j in 0..y {
                for i in 0..x {
                    let v = data.data()[f * plane + (i * y + j) * z + k];
                    let check = |lo: f64, hi: f64| {
                        if v.fract() != 0.0 || v < lo || v > hi {
                            Err(Error::Config(format!(
                                "value {v} does not fit NIfTI datatype {}",
                                datatype.code()
                            )))
                        } else {
                            Ok(())
                        }
                    };
                    match datatype {
                        Datatype::U8 => {
                            check(0.0, 255.0)?;
                            out.push(v as u8);
                        }
                        Datatype::I16 => {
                            check(i16::MIN as f64, i16::MAX as f64)?;
                            out.extend_from_slice(&(v as i16).to_le_bytes());
                        }
                        Datatype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Writes a NIfTI file; gzip-compressed when the path ends in `.gz`.
pub fn write_nifti(path: impl AsRef<Path>, header: &NiftiHeader, data: &Tensor, datatype: Datatype) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_nifti(header, data, datatype)?;
    let bytes = if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes).and_then(|_| enc.finish()).map_err(|e| Error::io(path, e))?
    } else {
        bytes
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
