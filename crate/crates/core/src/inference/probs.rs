//! Raw float32 probability dumps with a text sidecar.
//!
//! The data file holds `K·H·W·D` little-endian f32 values in `(K, H, W, D)`
//! order, D fastest. The sidecar at `<path>.txt` reads
//!
//! ```text
//! format float32-le
//! dims K H W D
//! classes 0 1 2 4
//! order class,h,w,d
//! spacing 1 1 1
//! ```
//!
//! where `classes` lists the external label of each internal class.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{to_external, ProbabilityMap};

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".txt");
    PathBuf::from(s)
}

pub fn write_probs(path: &Path, probs: &ProbabilityMap, spacing: [f64; 3]) -> Result<()> {
    let bytes: Vec<u8> = probs.tensor().data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let [h, w, d] = probs.dims();
    let classes = (0..probs.classes())
        .map(|k| to_external(k as u8).map(|l| l.to_string()))
        .collect::<Result<Vec<_>>>()?
        .join(" ");
    let text = format!(
        "format float32-le\ndims {} {h} {w} {d}\nclasses {classes}\norder class,h,w,d\nspacing {} {} {}\n",
        probs.classes(),
        spacing[0],
        spacing[1],
        spacing[2]
    );
    let side = sidecar_path(path);
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

fn field<'a>(text: &'a str, key: &str) -> Result<Vec<&'a str>> {
    text.lines()
        .find_map(|l| l.strip_prefix(key).filter(|r| r.starts_with(' ')))
        .map(|r| r.split_whitespace().collect())
        .ok_or_else(|| Error::Config(format!("probability sidecar lacks `{key}`")))
}

fn numbers<T: std::str::FromStr>(values: &[&str], key: &str) -> Result<Vec<T>> {
    values
        .iter()
        .map(|v| v.parse().map_err(|_| Error::Config(format!("sidecar `{key}`: cannot parse `{v}`"))))
        .collect()
}

/// Reads a dump and its sidecar; returns the map and voxel spacing.
pub fn read_probs(path: &Path) -> Result<(ProbabilityMap, [f64; 3])> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    if field(&text, "format")? != ["float32-le"] {
        return Err(Error::Config(format!("{}: only float32-le dumps are supported", side.display())));
    }
    let dims: Vec<usize> = numbers(&field(&text, "dims")?, "dims")?;
    let spacing: Vec<f64> = numbers(&field(&text, "spacing")?, "spacing")?;
    if dims.len() != 4 || spacing.len() != 3 {
        return Err(Error::Config(format!("{}: dims needs 4 values and spacing 3", side.display())));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = dims.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::Truncated {
            offset: bytes.len() as u64,
            detail: format!("{}: expected {} bytes for dims {dims:?}", path.display(), 4 * n),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((ProbabilityMap::new(Tensor::new(dims, data)?)?, [spacing[0], spacing[1], spacing[2]]))
}
