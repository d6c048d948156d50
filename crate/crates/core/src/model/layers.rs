//! Building blocks: convolution blocks, CBAM, and the ViT block with its
//! embedding, transformer layers and mapping back to a feature map.

use rand::Rng;

use super::params::{p, Bound, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::kernels::ConvSpec;
use crate::tensor::{ops, Tensor, Var};

/// Kaiming-style normal init: `std = sqrt(2 / fan_in)`.
fn kaiming(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Self {
        let taps: usize = spec.kernel.iter().product();
        let fan_in = spec.in_channels * taps;
        let weight = store.register(format!("{name}.weight"), kaiming(spec.weight_shape(), fan_in, rng));
        let bias = store.register(format!("{name}.bias"), Tensor::zeros([spec.out_channels]));
        Self { weight, bias, spec }
    }

    pub fn forward(&self, params: &Bound, x: &Var) -> Result<Var> {
        let (w, b) = (p(params, self.weight), Some(p(params, self.bias)));
        if self.spec.transposed {
            ops::conv_transpose3d(x, w, b, &self.spec)
        } else {
            ops::conv3d(x, w, b, &self.spec)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.register(format!("{name}.gamma"), Tensor::ones([width])),
            beta: store.register(format!("{name}.beta"), Tensor::zeros([width])),
        }
    }

    pub fn group(&self, params: &Bound, x: &Var, groups: usize, eps: f64) -> Result<Var> {
        ops::group_norm(x, groups, p(params, self.gamma), p(params, self.beta), eps)
    }

    pub fn layer(&self, params: &Bound, x: &Var, eps: f64) -> Result<Var> {
        ops::layer_norm(x, p(params, self.gamma), p(params, self.beta), eps)
    }
}

/// Convolution (forward or transposed) → group norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: Norm,
    pub groups: usize,
    pub eps: f64,
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, groups: usize, eps: f64, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv::new(store, &format!("{name}.conv"), spec, rng),
            norm: Norm::new(store, &format!("{name}.norm"), spec.out_channels),
            groups,
            eps,
        }
    }

    pub fn forward(&self, params: &Bound, x: &Var) -> Result<Var> {
        let y = self.conv.forward(params, x)?;
        Ok(ops::relu(&self.norm.group(params, &y, self.groups, self.eps)?))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// `std = 1/sqrt(fan_in)` normal weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.register(
                format!("{name}.weight"),
                Tensor::randn([d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng),
            ),
            bias: store.register(format!("{name}.bias"), Tensor::zeros([d_out])),
        }
    }

    pub fn forward(&self, params: &Bound, x: &Var) -> Result<Var> {
        ops::linear(x, p(params, self.weight), Some(p(params, self.bias)))
    }
}

/// 3D convolutional block attention: a channel map from a shared MLP over
/// average- and max-pooled descriptors, then a spatial map from a 3×3×3
/// convolution over channel-wise average and max.
#[derive(Clone, Debug)]
pub struct Cbam {
    pub channels: usize,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    pub spatial: Conv,
}

/// Intermediate maps of one CBAM application.
#[derive(Clone, Debug)]
pub struct CbamMaps {
    /// `(N, C, 1, 1, 1)`.
    pub channel: Var,
    /// `(N, 1, H, W, D)`.
    pub spatial: Var,
    pub output: Var,
}

impl Cbam {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            channels,
            mlp_in: Linear::new(store, &format!("{name}.mlp_in"), channels, hidden, rng),
            mlp_out: Linear::new(store, &format!("{name}.mlp_out"), hidden, channels, rng),
            spatial: Conv::new(store, &format!("{name}.spatial"), ConvSpec::cube3(2, 1, 1), rng),
        }
    }

    fn mlp(&self, params: &Bound, pooled: &Var) -> Result<Var> {
        let s = pooled.shape();
        let flat = ops::reshape(pooled, [s[0], s[1]])?;
        let h = ops::relu(&self.mlp_in.forward(params, &flat)?);
        self.mlp_out.forward(params, &h)
    }

    pub fn apply_traced(&self, params: &Bound, f: &Var) -> Result<CbamMaps> {
        let s = f.shape().to_vec();
        if s.len() != 5 || s[1] != self.channels {
            return Err(Error::shape(
                "cbam",
                format!("expected {} channels in (N, C, H, W, D), got {s:?}", self.channels),
            ));
        }
        let avg = self.mlp(params, &ops::global_avg_pool(f)?)?;
        let max = self.mlp(params, &ops::global_max_pool(f)?)?;
        let channel = ops::reshape(&ops::sigmoid(&ops::add(&avg, &max)?), [s[0], s[1], 1, 1, 1])?;
        let refined = ops::mul(f, &channel)?;

        let descriptor = ops::concat(&[&ops::mean_axis(&refined, 1)?, &ops::max_axis(&refined, 1)?], 1)?;
        let spatial = ops::sigmoid(&self.spatial.forward(params, &descriptor)?);
        let output = ops::mul(&refined, &spatial)?;
        Ok(CbamMaps {
            channel,
            spatial,
            output,
        })
    }

    /// `F'' = M_s(F') ⊗ F'` with `F' = M_c(F) ⊗ F`.
    pub fn apply(&self, params: &Bound, f: &Var) -> Result<Var> {
        Ok(self.apply_traced(params, f)?.output)
    }
}

/// Pre-norm transformer layer: attention and feed-forward branches, each
/// added back onto its input.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln_attn: Norm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln_ffn: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub heads: usize,
    pub eps: f64,
}

impl TransformerLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        eps: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            ln_attn: Norm::new(store, &format!("{name}.ln_attn"), dim),
            query: Linear::new(store, &format!("{name}.attn.query"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.attn.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.attn.value"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.attn.out"), dim, dim, rng),
            ln_ffn: Norm::new(store, &format!("{name}.ln_ffn"), dim),
            ffn_in: Linear::new(store, &format!("{name}.ffn.in"), dim, ffn_hidden, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn.out"), ffn_hidden, dim, rng),
            heads,
            eps,
        }
    }

    /// `(B, T, d)` → `(B·heads, T, d/heads)`.
    fn split_heads(&self, x: &Var) -> Result<Var> {
        let [b, t, d]: [usize; 3] = x.shape().try_into().expect("rank 3");
        let dh = d / self.heads;
        let x = ops::reshape(x, [b, t, self.heads, dh])?;
        let x = ops::permute(&x, &[0, 2, 1, 3])?;
        ops::reshape(&x, [b * self.heads, t, dh])
    }

    fn merge_heads(&self, x: &Var, batch: usize) -> Result<Var> {
        let [_, t, dh]: [usize; 3] = x.shape().try_into().expect("rank 3");
        let x = ops::reshape(x, [batch, self.heads, t, dh])?;
        let x = ops::permute(&x, &[0, 2, 1, 3])?;
        ops::reshape(&x, [batch, t, self.heads * dh])
    }

    /// Multi-head scaled dot-product self-attention over `(B, T, d)` tokens.
    /// Returns the projected output and the `(B·heads, T, T)` weights.
    pub fn attention(&self, params: &Bound, x: &Var) -> Result<(Var, Var)> {
        let shape = x.shape().to_vec();
        if shape.len() != 3 || !shape[2].is_multiple_of(self.heads) {
            return Err(Error::shape("attention", format!("tokens {shape:?} with {} heads", self.heads)));
        }
        let dh = shape[2] / self.heads;
        let q = self.split_heads(&self.query.forward(params, x)?)?;
        let k = self.split_heads(&self.key.forward(params, x)?)?;
        let v = self.split_heads(&self.value.forward(params, x)?)?;
        let scores = ops::scale(&ops::bmm(&q, &ops::permute(&k, &[0, 2, 1])?)?, 1.0 / (dh as f64).sqrt());
        let weights = ops::softmax(&scores, 2)?;
        let context = self.merge_heads(&ops::bmm(&weights, &v)?, shape[0])?;
        Ok((self.out.forward(params, &context)?, weights))
    }

    pub fn forward(&self, params: &Bound, z: &Var) -> Result<Var> {
        let normed = self.ln_attn.layer(params, z, self.eps)?;
        let (attended, _) = self.attention(params, &normed)?;
        let z_mid = ops::add(&attended, z)?;
        let normed = self.ln_ffn.layer(params, &z_mid, self.eps)?;
        let hidden = ops::gelu(&self.ffn_in.forward(params, &normed)?);
        ops::add(&self.ffn_out.forward(params, &hidden)?, &z_mid)
    }
}

/// Feature embedding, transformer layers and feature mapping around one
/// encoder feature map of `channels` channels on a fixed `grid`.
///
/// Token sequences are `(B, T, d)`: one row per voxel in row-major
/// (H, W, D) order.
#[derive(Clone, Debug)]
pub struct VitBlock {
    pub channels: usize,
    pub dim: usize,
    pub grid: [usize; 3],
    pub projection: Conv,
    pub position: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub mapping: Conv,
}

#[derive(Clone, Copy, Debug)]
pub struct VitShape {
    pub channels: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub grid: [usize; 3],
    pub eps: f64,
}

impl VitBlock {
    pub fn new(store: &mut ParamStore, name: &str, shape: VitShape, rng: &mut impl Rng) -> Self {
        let tokens: usize = shape.grid.iter().product();
        let projection = Conv::new(store, &format!("{name}.projection"), ConvSpec::cube3(shape.channels, shape.dim, 1), rng);
        let position = store.register(format!("{name}.position"), Tensor::randn([tokens, shape.dim], 0.02, rng));
        let layers = (0..shape.layers)
            .map(|l| {
                TransformerLayer::new(store, &format!("{name}.layer{l}"), shape.dim, shape.heads, shape.ffn_hidden, shape.eps, rng)
            })
            .collect();
        let mapping = Conv::new(store, &format!("{name}.mapping"), ConvSpec::cube3(shape.dim, shape.channels, 1), rng);
        Self {
            channels: shape.channels,
            dim: shape.dim,
            grid: shape.grid,
            projection,
            position,
            layers,
            mapping,
        }
    }

    pub fn tokens(&self) -> usize {
        self.grid.iter().product()
    }

    /// `(B, K, h, w, d)` → `(B, T, dim)`: projection, flatten, add positions.
    pub fn embed(&self, params: &Bound, f: &Var) -> Result<Var> {
        let s = f.shape().to_vec();
        if s.len() != 5 || s[1] != self.channels {
            return Err(Error::shape("feature_embed", format!("expected {} channels, got {s:?}", self.channels)));
        }
        let tokens: usize = s[2..].iter().product();
        if tokens != self.tokens() {
            return Err(Error::shape(
                "feature_embed",
                format!("{tokens} tokens from {:?}, positional embedding has {}", &s[2..], self.tokens()),
            ));
        }
        let projected = self.projection.forward(params, f)?;
        let flat = ops::reshape(&projected, [s[0], self.dim, tokens])?;
        let seq = ops::permute(&flat, &[0, 2, 1])?;
        let pe = ops::reshape(p(params, self.position), [1, tokens, self.dim])?;
        ops::add(&seq, &pe)
    }

    /// `(B, T, dim)` → `(B, K, h, w, d)`: reshape onto `grid`, then convolve to `K` channels.
    pub fn map_back(&self, params: &Bound, z: &Var, grid: [usize; 3]) -> Result<Var> {
        let s = z.shape().to_vec();
        let tokens: usize = grid.iter().product();
        if s.len() != 3 || s[1] != tokens || s[2] != self.dim {
            return Err(Error::shape(
                "feature_map_back",
                format!("tokens {s:?} do not fit grid {grid:?} with dim {}", self.dim),
            ));
        }
        let channels_first = ops::permute(z, &[0, 2, 1])?;
        let volume = ops::reshape(&channels_first, [s[0], self.dim, grid[0], grid[1], grid[2]])?;
        self.mapping.forward(params, &volume)
    }

    pub fn forward(&self, params: &Bound, f: &Var) -> Result<Var> {
        let mut z = self.embed(params, f)?;
        for layer in &self.layers {
            z = layer.forward(params, &z)?;
        }
        self.map_back(params, &z, self.grid)
    }
}
