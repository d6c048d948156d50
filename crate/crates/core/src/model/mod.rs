//! The hybrid CNN–Transformer U-Net.
//!
//! Encoder: a stride-1 block to `base_width` channels, then four stride-2
//! blocks each refined by CBAM. The outputs of the last two stages pass
//! through independent ViT blocks: the deeper one feeds the decoder root, the
//! other is concatenated as a skip at 1/8 resolution. The three shallower
//! outputs are concatenated directly. Each decoder stage upsamples with a
//! stride-2 transposed convolution, concatenates its skip, and fuses with a
//! stride-1 block; a final convolution produces raw class scores.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod layers;
pub mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::kernels::ConvSpec;
use crate::tensor::{ops, Tape, Tensor, Var};

pub use config::{ModelConfig, Precision};
pub use layers::{Cbam, CbamMaps, Conv, ConvBlock, Linear, Norm, TransformerLayer, VitBlock, VitShape};
pub use params::{Bound, ParamId, ParamStore};

use config::AXIS_NAMES;

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub down: ConvBlock,
    pub attention: Cbam,
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub up: ConvBlock,
    pub fuse: ConvBlock,
}

impl DecoderStage {
    fn forward(&self, params: &Bound, x: &Var, skip: &Var) -> Result<Var> {
        let up = self.up.forward(params, x)?;
        self.fuse.forward(params, &ops::concat(&[&up, skip], 1)?)
    }
}

/// Output shapes of the named stages of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    pub stages: Vec<(&'static str, Vec<usize>)>,
}

impl ForwardTrace {
    fn push(&mut self, name: &'static str, v: &Var) {
        self.stages.push((name, v.shape().to_vec()));
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.stages.iter().find(|(n, _)| *n == name).map(|(_, s)| s.as_slice())
    }
}

#[derive(Clone, Debug)]
pub struct BiTrUnet {
    config: ModelConfig,
    params: ParamStore,
    pub initial: ConvBlock,
    pub encoder: Vec<EncoderStage>,
    pub vit_skip: VitBlock,
    pub vit_bottleneck: VitBlock,
    /// Deepest first.
    pub decoder: Vec<DecoderStage>,
    pub head: Conv,
}

impl BiTrUnet {
    /// Builds a model with seeded random initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let widths = config.widths();
        let eps = config.norm_eps;
        let block = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, spec: ConvSpec| {
            ConvBlock::new(store, name, spec, config.norm_groups(spec.out_channels), eps, rng)
        };

        let initial = block(&mut store, &mut rng, "initial", ConvSpec::cube3(config.in_channels, widths[0], 1));
        let encoder = (1..=4)
            .map(|i| {
                let name = format!("encoder{i}");
                EncoderStage {
                    down: block(&mut store, &mut rng, &format!("{name}.down"), ConvSpec::cube3(widths[i - 1], widths[i], 2)),
                    attention: Cbam::new(&mut store, &format!("{name}.cbam"), widths[i], config.cbam_hidden(widths[i]), &mut rng),
                }
            })
            .collect();
        let vit = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, level: usize| {
            let shape = VitShape {
                channels: widths[level],
                dim: config.embed_dim,
                layers: config.vit_layers,
                heads: config.heads,
                ffn_hidden: config.ffn_hidden,
                grid: config.grid(level),
                eps,
            };
            VitBlock::new(store, name, shape, rng)
        };
        let vit_skip = vit(&mut store, &mut rng, "vit_skip", 3);
        let vit_bottleneck = vit(&mut store, &mut rng, "vit_bottleneck", 4);
        let decoder = (1..=4)
            .rev()
            .map(|i| {
                let name = format!("decoder{i}");
                DecoderStage {
                    up: block(&mut store, &mut rng, &format!("{name}.up"), ConvSpec::transposed3(widths[i], widths[i - 1], 2)),
                    fuse: block(&mut store, &mut rng, &format!("{name}.fuse"), ConvSpec::cube3(2 * widths[i - 1], widths[i - 1], 1)),
                }
            })
            .collect();
        let head = Conv::new(&mut store, "head", ConvSpec::cube3(widths[0], config.num_classes, 1), &mut rng);

        let mut model = Self {
            config,
            params: store,
            initial,
            encoder,
            vit_skip,
            vit_bottleneck,
            decoder,
            head,
        };
        model.apply_precision();
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Sum of parameter element counts.
    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Rounds parameters to the configured storage precision.
    pub fn apply_precision(&mut self) {
        if self.config.precision == Precision::F32 {
            for (_, t) in self.params.iter_mut() {
                t.round_to_f32();
            }
        }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 {
            return Err(Error::shape("forward", format!("expected (N, C, H, W, D), got {shape:?}")));
        }
        if shape[1] != self.config.in_channels {
            return Err(Error::shape(
                "forward",
                format!("axis C: {} channels, model expects {}", shape[1], self.config.in_channels),
            ));
        }
        let spatial = [shape[2], shape[3], shape[4]];
        config::check_spatial(spatial)?;
        for (axis, (got, want)) in AXIS_NAMES.iter().zip(spatial.iter().zip(self.config.input_size)) {
            if *got != want {
                return Err(Error::shape(
                    "forward",
                    format!("axis {axis}: size {got}, model positional embeddings fix it at {want}"),
                ));
            }
        }
        Ok(())
    }

    /// Forward pass over bound parameters, recording stage shapes.
    pub fn forward_traced(&self, params: &Bound, x: &Var) -> Result<(Var, ForwardTrace)> {
        self.check_input(x.shape())?;
        let mut trace = ForwardTrace::default();
        let x0 = self.initial.forward(params, x)?;
        trace.push("initial", &x0);
        let mut skips = vec![x0];
        for (stage, name) in self.encoder.iter().zip(["encoder1", "encoder2", "encoder3", "encoder4"]) {
            let down = stage.down.forward(params, skips.last().expect("nonempty"))?;
            let refined = stage.attention.apply(params, &down)?;
            trace.push(name, &refined);
            skips.push(refined);
        }
        let bottleneck = self.vit_bottleneck.forward(params, &skips[4])?;
        trace.push("vit_bottleneck", &bottleneck);
        skips[3] = self.vit_skip.forward(params, &skips[3])?;
        trace.push("vit_skip", &skips[3]);

        let mut y = bottleneck;
        for (stage, (level, name)) in self.decoder.iter().zip([(3, "decoder4"), (2, "decoder3"), (1, "decoder2"), (0, "decoder1")]) {
            y = stage.forward(params, &y, &skips[level])?;
            trace.push(name, &y);
        }
        let out = self.head.forward(params, &y)?;
        trace.push("head", &out);
        Ok((out, trace))
    }

    pub fn forward_vars(&self, params: &Bound, x: &Var) -> Result<Var> {
        Ok(self.forward_traced(params, x)?.0)
    }

    /// Tape-free forward pass returning raw class scores `(N, K, H, W, D)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let params = self.params.bind(None);
        Ok(self.forward_vars(&params, &Var::constant(x.clone()))?.into_value())
    }

    /// Binds every parameter as a leaf of a fresh tape.
    pub fn bind_for_training(&self) -> (Tape, Vec<Var>) {
        let tape = Tape::new();
        let params = self.params.bind(Some(&tape));
        (tape, params)
    }

    pub(crate) fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, configuration needs {}",
                params.len(),
                model.params.len()
            )));
        }
        for (name, value) in params.iter() {
            model.params.set(name, value.clone())?;
        }
        Ok(model)
    }
}
