use crate::error::{Error, Result};

/// Storage precision of model parameters. Arithmetic is always `f64`; with
/// `F32` every parameter is rounded through `f32` after initialization and
/// after each optimizer step, so checkpoints hold it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn code(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Precision::F32),
            1 => Some(Precision::F64),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

/// Hyperparameters of the network.
///
/// Encoder widths are `base_width · 2^i` for `i = 0..=4`; `base_width` plays
/// the role of the "4C" width after the initial convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Input modalities.
    pub in_channels: usize,
    pub base_width: usize,
    /// Output classes, background included.
    pub num_classes: usize,
    pub embed_dim: usize,
    /// Transformer layers per ViT block.
    pub vit_layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Channel-MLP reduction ratio inside CBAM.
    pub cbam_reduction: usize,
    /// Upper bound on group-norm groups in convolution blocks.
    pub max_norm_groups: usize,
    pub norm_eps: f64,
    /// Spatial input size (H, W, D); fixes the positional-embedding lengths.
    pub input_size: [usize; 3],
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            base_width: 16,
            num_classes: 4,
            embed_dim: 384,
            vit_layers: 4,
            heads: 8,
            ffn_hidden: 4 * 384,
            cbam_reduction: 8,
            max_norm_groups: 8,
            norm_eps: 1e-5,
            input_size: [128, 128, 128],
            precision: Precision::F32,
        }
    }
}

pub(crate) const AXIS_NAMES: [&str; 3] = ["H", "W", "D"];

/// Number of down-sampling stages; spatial sizes must be divisible by 2^4.
pub const DOWNSAMPLE_FACTOR: usize = 16;

impl ModelConfig {
    /// A small configuration for tests and gradient checks.
    pub fn tiny(in_channels: usize, input_size: [usize; 3]) -> Self {
        Self {
            in_channels,
            base_width: 4,
            embed_dim: 16,
            vit_layers: 1,
            heads: 2,
            ffn_hidden: 32,
            cbam_reduction: 2,
            input_size,
            precision: Precision::F64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("base_width", self.base_width),
            ("num_classes", self.num_classes),
            ("embed_dim", self.embed_dim),
            ("vit_layers", self.vit_layers),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("cbam_reduction", self.cbam_reduction),
            ("max_norm_groups", self.max_norm_groups),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.num_classes > 4 {
            return Err(Error::Config("at most 4 classes map onto labels {0,1,2,4}".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        check_spatial(self.input_size)
    }

    /// Channel widths after the initial block and each of the four stages.
    pub fn widths(&self) -> [usize; 5] {
        std::array::from_fn(|i| self.base_width << i)
    }

    /// Largest divisor of `channels` not exceeding `max_norm_groups`.
    pub fn norm_groups(&self, channels: usize) -> usize {
        (1..=self.max_norm_groups.min(channels))
            .rev()
            .find(|g| channels.is_multiple_of(*g))
            .unwrap_or(1)
    }

    pub fn cbam_hidden(&self, channels: usize) -> usize {
        (channels / self.cbam_reduction).max(1)
    }

    /// Spatial grid at encoder level `level` (0 = input resolution).
    pub fn grid(&self, level: usize) -> [usize; 3] {
        self.input_size.map(|n| n >> level)
    }
}

/// Each spatial extent must be a positive multiple of 16.
pub fn check_spatial(size: [usize; 3]) -> Result<()> {
    for (axis, n) in AXIS_NAMES.into_iter().zip(size) {
        if n == 0 || n % DOWNSAMPLE_FACTOR != 0 {
            return Err(Error::Divisibility {
                axis,
                size: n,
                divisor: DOWNSAMPLE_FACTOR,
            });
        }
    }
    Ok(())
}
