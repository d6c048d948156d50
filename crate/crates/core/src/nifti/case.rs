use std::path::{Path, PathBuf};

use super::{read_nifti, NiftiHeader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{to_internal, SegmentationMask};

/// Channel order of a stacked case and the file-name suffix of each.
pub const MODALITIES: [&str; 4] = ["t1", "t1ce", "t2", "flair"];

/// Z-score parameters applied to one channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: f64,
    pub sd: f64,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization { mean: 0.0, sd: 1.0 };
}

/// Stacked modalities, `(C, H, W, D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume4D {
    pub image: Tensor,
    pub spacing: [f64; 3],
    /// One entry per channel; identity until [`normalize`] runs.
    pub normalization: Vec<Normalization>,
}

impl Volume4D {
    pub fn new(image: Tensor, spacing: [f64; 3]) -> Result<Self> {
        if image.rank() != 4 {
            return Err(Error::shape("Volume4D", format!("expected (C, H, W, D), got {:?}", image.shape())));
        }
        let c = image.shape()[0];
        Ok(Self {
            image,
            spacing,
            normalization: vec![Normalization::IDENTITY; c],
        })
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[1], s[2], s[3]]
    }
}

/// Per channel z-score over nonzero voxels, population standard deviation.
/// Zero voxels stay zero. A channel with constant nonzero values is only
/// shifted. Results are rounded to f32 so cached cases roundtrip exactly.
pub fn normalize(v: &Volume4D) -> Volume4D {
    let n: usize = v.dims().iter().product();
    let mut data = v.image.data().to_vec();
    let mut params = Vec::with_capacity(v.channels());
    for (c, prior) in v.normalization.iter().enumerate() {
        let chan = &mut data[c * n..(c + 1) * n];
        let nonzero: Vec<f64> = chan.iter().copied().filter(|&x| x != 0.0).collect();
        if nonzero.is_empty() {
            params.push(*prior);
            continue;
        }
        let m = nonzero.len() as f64;
        let mean = nonzero.iter().sum::<f64>() / m;
        let sd = (nonzero.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m).sqrt();
        let div = if sd > 0.0 { sd } else { 1.0 };
        for x in chan.iter_mut().filter(|x| **x != 0.0) {
            *x = (((*x - mean) / div) as f32) as f64;
        }
        params.push(Normalization {
            mean: prior.mean + prior.sd * mean,
            sd: prior.sd * div,
        });
    }
    Volume4D {
        image: Tensor::new(v.image.shape().to_vec(), data).expect("same shape"),
        spacing: v.spacing,
        normalization: params,
    }
}

/// Reads `[t1, t1ce, t2, flair]` and stacks them as channels. Returns the
/// stack and the first file's header.
pub fn stack_modalities(paths: &[PathBuf; 4]) -> Result<(Volume4D, NiftiHeader)> {
    let mut first: Option<NiftiHeader> = None;
    let mut data = Vec::new();
    for path in paths {
        let img = read_nifti(path)?;
        if img.header.frames() != 1 {
            return Err(Error::shape(
                "stack_modalities",
                format!("{}: expected a 3D volume, found {} frames", path.display(), img.header.frames()),
            ));
        }
        match &first {
            None => first = Some(img.header.clone()),
            Some(h) => {
                if h.dims() != img.header.dims() || h.spacing() != img.header.spacing() {
                    return Err(Error::shape(
                        "stack_modalities",
                        format!(
                            "{}: grid {:?} spacing {:?} differs from {:?} spacing {:?}",
                            path.display(),
                            img.header.dims(),
                            img.header.spacing(),
                            h.dims(),
                            h.spacing()
                        ),
                    ));
                }
            }
        }
        data.extend_from_slice(img.data.data());
    }
    let header = first.expect("four paths");
    let [x, y, z] = header.dims();
    let volume = Volume4D::new(Tensor::new([paths.len(), x, y, z], data)?, header.spacing())?;
    Ok((volume, header))
}

/// Locates `<id>_<modality>.nii[.gz]` and `<id>_seg.nii[.gz]` in `dir`.
/// The segmentation is optional.
pub fn find_modalities(dir: &Path) -> Result<([PathBuf; 4], Option<PathBuf>)> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        names.push(entry.file_name().to_string_lossy().into_owned());
    }
    names.sort();
    let find = |suffix: &str| -> Option<PathBuf> {
        names
            .iter()
            .find(|n| {
                let stem = n.strip_suffix(".nii.gz").or_else(|| n.strip_suffix(".nii"));
                stem.is_some_and(|s| s.ends_with(&format!("_{suffix}")))
            })
            .map(|n| dir.join(n))
    };
    let mut paths = Vec::with_capacity(4);
    for m in MODALITIES {
        paths.push(find(m).ok_or_else(|| {
            Error::io(
                dir.join(format!("*_{m}.nii.gz")),
                std::io::Error::new(std::io::ErrorKind::NotFound, "modality file not found"),
            )
        })?);
    }
    let paths: [PathBuf; 4] = paths.try_into().expect("four modalities");
    Ok((paths, find("seg")))
}

/// A preprocessed case ready for caching.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseRecord {
    pub id: String,
    pub volume: Volume4D,
    /// External labels {0, 1, 2, 4}.
    pub label: Option<SegmentationMask>,
    pub sources: Vec<PathBuf>,
}

impl CaseRecord {
    pub fn new(id: impl Into<String>, volume: Volume4D, label: Option<SegmentationMask>) -> Result<Self> {
        if let Some(l) = &label {
            if l.dims() != volume.dims() {
                return Err(Error::shape(
                    "CaseRecord",
                    format!("label grid {:?}, image grid {:?}", l.dims(), volume.dims()),
                ));
            }
            l.to_internal()?;
        }
        Ok(Self {
            id: id.into(),
            volume,
            label,
            sources: Vec::new(),
        })
    }

    /// Reads, stacks and normalizes the modalities in a case directory.
    /// The case id is the directory name.
    pub fn from_dir(dir: &Path) -> Result<(Self, NiftiHeader)> {
        let (paths, seg) = find_modalities(dir)?;
        let (volume, header) = stack_modalities(&paths)?;
        let volume = normalize(&volume);
        let label = match &seg {
            Some(p) => {
                let img = read_nifti(p)?;
                if img.header.dims() != header.dims() || img.header.frames() != 1 {
                    return Err(Error::shape(
                        "CaseRecord::from_dir",
                        format!("{}: label grid {:?}, image grid {:?}", p.display(), img.header.dims(), header.dims()),
                    ));
                }
                let data = img
                    .data
                    .data()
                    .iter()
                    .map(|&v| {
                        if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                            to_internal(v as u8).map(|_| v as u8)
                        } else {
                            Err(Error::Config(format!("{}: label value {v} is not a label", p.display())))
                        }
                    })
                    .collect::<Result<Vec<u8>>>()?;
                Some(SegmentationMask::new(header.dims(), data)?)
            }
            None => None,
        };
        let id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "case".into());
        let mut record = Self::new(id, volume, label)?;
        record.sources = paths.into_iter().chain(seg).collect();
        Ok((record, header))
    }
}
