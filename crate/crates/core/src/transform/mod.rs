//! Analysis and synthesis transforms.
//!
//! Four architectures share one parameter container: `identity` (no weights),
//! `linear` (one affine map each way), `mlp` (one GELU hidden layer each way)
//! and `swin_toy` (window attention, see [`swin`]). Forward passes are recorded
//! on a [`tape::Tape`] so the training loop gets exact reverse-mode gradients.

mod swin;
pub mod tape;
mod train;
mod weights;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use train::{
    evaluate_quantized, loss_and_gradients, train, Checkpoint, EpochStats, LossBreakdown, LossMode,
    Optimizer, ParamGradients, QuantizedEval, TrainConfig, TrainOutcome,
};
pub use weights::{WeightFile, WEIGHT_MAGIC, WEIGHT_VERSION};

use crate::channel::{ChannelTensor, Normalization};
use crate::entropy_model::EntropyModelParams;
use crate::error::{Error, Result};
use crate::quantizer::{LatentShape, LatentTensor};
use tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwinConfig {
    pub patch_size: usize,
    pub heads: usize,
    /// Blocks per stage; blocks alternate regular and shifted windows.
    pub depths: Vec<usize>,
    pub embed_dim: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    pub latent_channels: usize,
}

impl SwinConfig {
    /// Desk-scale default `(P, h, L, d, w) = (4, 2, [2, 2], 8, 4)`.
    pub fn desk() -> Self {
        Self {
            patch_size: 4,
            heads: 2,
            depths: vec![2, 2],
            embed_dim: 8,
            window: 4,
            mlp_ratio: 4,
            latent_channels: 16,
        }
    }

    pub fn validate(&self, n_delay: usize, n_tx: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.heads == 0 || self.embed_dim == 0 || self.window == 0 {
            return bad("swin sizes must be positive".into());
        }
        if self.mlp_ratio == 0 || self.latent_channels == 0 {
            return bad("mlp ratio and latent channels must be positive".into());
        }
        if self.depths.is_empty() || self.depths.contains(&0) {
            return bad("every swin stage needs at least one block".into());
        }
        if !n_delay.is_multiple_of(self.patch_size) || !n_tx.is_multiple_of(self.patch_size) {
            return bad(format!(
                "input {n_delay}x{n_tx} is not divisible by patch size {}",
                self.patch_size
            ));
        }
        for s in 0..self.depths.len() {
            let d = swin::stage_dim(self, s);
            if !d.is_multiple_of(self.heads) {
                return bad(format!(
                    "stage {s} width {d} not divisible by {} heads",
                    self.heads
                ));
            }
            let (h, w) = swin::stage_resolution(self, n_delay, n_tx, s);
            if h == 0 || w == 0 {
                return bad(format!("stage {s} has an empty token grid"));
            }
            if s + 1 < self.depths.len() && (h % 2 != 0 || w % 2 != 0) {
                return bad(format!("stage {s} grid {h}x{w} cannot be merged 2x2"));
            }
            let ws = self.window.min(h).min(w);
            if h % ws != 0 || w % ws != 0 {
                return bad(format!(
                    "stage {s} grid {h}x{w} not divisible by window {ws}"
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    Identity,
    Linear { latent_dim: usize },
    Mlp { hidden: usize, latent_dim: usize },
    SwinToy(SwinConfig),
}

impl Architecture {
    pub fn tag(&self) -> u8 {
        match self {
            Architecture::Identity => 0,
            Architecture::Linear { .. } => 1,
            Architecture::Mlp { .. } => 2,
            Architecture::SwinToy(_) => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Identity => "identity",
            Architecture::Linear { .. } => "linear",
            Architecture::Mlp { .. } => "mlp",
            Architecture::SwinToy(_) => "swin_toy",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// Weights of one analysis/synthesis pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformParams {
    pub n_delay: usize,
    pub n_tx: usize,
    pub architecture: Architecture,
    pub tensors: Vec<NamedTensor>,
}

/// Ordered `(name, dims)` of every weight tensor of an architecture.
pub fn parameter_layout(
    arch: &Architecture,
    n_delay: usize,
    n_tx: usize,
) -> Vec<(String, Vec<usize>)> {
    let d = 2 * n_delay * n_tx;
    let l = |n: &str, dims: Vec<usize>| (n.to_string(), dims);
    match arch {
        Architecture::Identity => vec![],
        Architecture::Linear { latent_dim: c } => vec![
            l("enc.weight", vec![d, *c]),
            l("enc.bias", vec![*c]),
            l("dec.bias", vec![*c]),
            l("dec.weight", vec![*c, d]),
        ],
        Architecture::Mlp {
            hidden,
            latent_dim: c,
        } => vec![
            l("enc.fc1.weight", vec![d, *hidden]),
            l("enc.fc1.bias", vec![*hidden]),
            l("enc.fc2.weight", vec![*hidden, *c]),
            l("enc.fc2.bias", vec![*c]),
            l("dec.fc1.weight", vec![*c, *hidden]),
            l("dec.fc1.bias", vec![*hidden]),
            l("dec.fc2.weight", vec![*hidden, d]),
            l("dec.fc2.bias", vec![d]),
        ],
        Architecture::SwinToy(cfg) => swin::layout(cfg),
    }
}

impl TransformParams {
    /// Fan-in uniform initialization: weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// biases and norm shifts zero, norm gains one.
    pub fn init(
        architecture: Architecture,
        n_delay: usize,
        n_tx: usize,
        seed: u64,
    ) -> Result<Self> {
        validate_architecture(&architecture, n_delay, n_tx)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = parameter_layout(&architecture, n_delay, n_tx)
            .into_iter()
            .map(|(name, dims)| {
                let len = dims.iter().product();
                let data = if name.ends_with(".gamma") {
                    vec![1.0; len]
                } else if name.ends_with(".weight") {
                    let bound = 1.0 / (dims[0] as f64).sqrt();
                    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
                } else {
                    vec![0.0; len]
                };
                NamedTensor { name, dims, data }
            })
            .collect();
        Ok(Self {
            n_delay,
            n_tx,
            architecture,
            tensors,
        })
    }

    pub fn identity(n_delay: usize, n_tx: usize) -> Self {
        Self {
            n_delay,
            n_tx,
            architecture: Architecture::Identity,
            tensors: vec![],
        }
    }

    /// Linear transform with `latent_dim = 2·n_delay·n_tx`, identity weights and zero biases.
    pub fn linear_identity(n_delay: usize, n_tx: usize) -> Self {
        let d = 2 * n_delay * n_tx;
        let eye: Vec<f64> = (0..d * d)
            .map(|i| if i / d == i % d { 1.0 } else { 0.0 })
            .collect();
        let tensors = vec![
            NamedTensor {
                name: "enc.weight".into(),
                dims: vec![d, d],
                data: eye.clone(),
            },
            NamedTensor {
                name: "enc.bias".into(),
                dims: vec![d],
                data: vec![0.0; d],
            },
            NamedTensor {
                name: "dec.bias".into(),
                dims: vec![d],
                data: vec![0.0; d],
            },
            NamedTensor {
                name: "dec.weight".into(),
                dims: vec![d, d],
                data: eye,
            },
        ];
        Self {
            n_delay,
            n_tx,
            architecture: Architecture::Linear { latent_dim: d },
            tensors,
        }
    }

    /// Assembles parameters from named tensors, checking them against the layout.
    pub fn from_tensors(
        architecture: Architecture,
        n_delay: usize,
        n_tx: usize,
        tensors: Vec<NamedTensor>,
    ) -> Result<Self> {
        validate_architecture(&architecture, n_delay, n_tx)?;
        let layout = parameter_layout(&architecture, n_delay, n_tx);
        if layout.len() != tensors.len() {
            return Err(Error::Format(format!(
                "{} architecture expects {} tensors, found {}",
                architecture.name(),
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, dims), t) in layout.iter().zip(&tensors) {
            if &t.name != name || &t.dims != dims || t.data.len() != dims.iter().product::<usize>()
            {
                return Err(Error::Format(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    t.name, t.dims, name, dims
                )));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "tensor {} has non-finite weights",
                    t.name
                )));
            }
        }
        Ok(Self {
            n_delay,
            n_tx,
            architecture,
            tensors,
        })
    }

    pub fn input_len(&self) -> usize {
        2 * self.n_delay * self.n_tx
    }

    pub fn latent_shape(&self) -> LatentShape {
        match &self.architecture {
            Architecture::Identity => LatentShape::new(2, self.n_delay, self.n_tx),
            Architecture::Linear { latent_dim } | Architecture::Mlp { latent_dim, .. } => {
                LatentShape::new(*latent_dim, 1, 1)
            }
            Architecture::SwinToy(cfg) => {
                let (h, w) =
                    swin::stage_resolution(cfg, self.n_delay, self.n_tx, cfg.depths.len() - 1);
                LatentShape::new(cfg.latent_channels, h, w)
            }
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut NamedTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    /// Rounds every weight to the nearest `f32`, matching what the weight file stores.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }
}

fn validate_architecture(arch: &Architecture, n_delay: usize, n_tx: usize) -> Result<()> {
    if n_delay == 0 || n_tx == 0 {
        return Err(Error::Config("input dimensions must be positive".into()));
    }
    match arch {
        Architecture::Identity => Ok(()),
        Architecture::Linear { latent_dim } if *latent_dim == 0 => {
            Err(Error::Config("latent dimension must be positive".into()))
        }
        Architecture::Mlp { hidden, latent_dim } if *hidden == 0 || *latent_dim == 0 => {
            Err(Error::Config("mlp sizes must be positive".into()))
        }
        Architecture::SwinToy(cfg) => cfg.validate(n_delay, n_tx),
        _ => Ok(()),
    }
}

/// Trainable scalars in the transform pair.
pub fn count_parameters(params: &TransformParams) -> usize {
    params.tensors.iter().map(|t| t.data.len()).sum()
}

/// Trainable scalars including the entropy model.
pub fn count_parameters_with_entropy(
    params: &TransformParams,
    entropy: &EntropyModelParams,
) -> usize {
    count_parameters(params) + entropy.parameter_count()
}

/// Parameters registered as tape leaves.
pub(crate) struct Graph<'p> {
    pub tape: Tape,
    pub params: Vec<Var>,
    names: HashMap<&'p str, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p TransformParams) -> Self {
        let mut tape = Tape::new();
        let mut names = HashMap::with_capacity(params.tensors.len());
        let vars = params
            .tensors
            .iter()
            .map(|t| {
                let v = tape.leaf(t.data.clone());
                names.insert(t.name.as_str(), v);
                v
            })
            .collect();
        Self {
            tape,
            params: vars,
            names,
        }
    }

    pub fn p(&self, name: &str) -> Var {
        *self
            .names
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from a validated layout"))
    }

    fn dense(&mut self, x: Var, prefix: &str, k: usize, n: usize) -> Var {
        let w = self.p(&format!("{prefix}.weight"));
        let b = self.p(&format!("{prefix}.bias"));
        let y = self.tape.matmul(x, w, k, n);
        self.tape.add_bias(y, b)
    }

    /// `[B, input_len]` to `[B, latent_len]`.
    pub fn encode(&mut self, params: &TransformParams, x: Var, batch: usize) -> Var {
        let d = params.input_len();
        match &params.architecture {
            Architecture::Identity => x,
            Architecture::Linear { latent_dim } => self.dense(x, "enc", d, *latent_dim),
            Architecture::Mlp { hidden, latent_dim } => {
                let h = self.dense(x, "enc.fc1", d, *hidden);
                let h = self.tape.gelu(h);
                self.dense(h, "enc.fc2", *hidden, *latent_dim)
            }
            Architecture::SwinToy(cfg) => {
                swin::encode(self, cfg, x, batch, params.n_delay, params.n_tx)
            }
        }
    }

    /// `[B, latent_len]` to `[B, input_len]`.
    pub fn decode(&mut self, params: &TransformParams, y: Var, batch: usize) -> Var {
        let d = params.input_len();
        match &params.architecture {
            Architecture::Identity => y,
            Architecture::Linear { latent_dim } => {
                // the decoder bias sits on the latent side: x̂ = W (ŷ + b)
                let b = self.p("dec.bias");
                let w = self.p("dec.weight");
                let shifted = self.tape.add_bias(y, b);
                self.tape.matmul(shifted, w, *latent_dim, d)
            }
            Architecture::Mlp { hidden, latent_dim } => {
                let h = self.dense(y, "dec.fc1", *latent_dim, *hidden);
                let h = self.tape.gelu(h);
                self.dense(h, "dec.fc2", *hidden, d)
            }
            Architecture::SwinToy(cfg) => {
                swin::decode(self, cfg, y, batch, params.n_delay, params.n_tx)
            }
        }
    }
}

fn check_input(h: &ChannelTensor, params: &TransformParams) -> Result<()> {
    if h.n_delay != params.n_delay || h.n_tx != params.n_tx || h.planes.len() != params.input_len()
    {
        return Err(Error::Dimension(format!(
            "input 2x{}x{} does not match transform input 2x{}x{}",
            h.n_delay, h.n_tx, params.n_delay, params.n_tx
        )));
    }
    Ok(())
}

/// Analysis transform of a batch.
pub fn analyze_batch(hs: &[&ChannelTensor], params: &TransformParams) -> Result<Vec<LatentTensor>> {
    for h in hs {
        check_input(h, params)?;
    }
    let shape = params.latent_shape();
    if hs.is_empty() {
        return Ok(vec![]);
    }
    let mut g = Graph::new(params);
    let x = g
        .tape
        .leaf(hs.iter().flat_map(|h| h.planes.iter().copied()).collect());
    let y = g.encode(params, x, hs.len());
    g.tape
        .value(y)
        .chunks_exact(shape.len())
        .map(|c| LatentTensor::new(shape, c.to_vec()))
        .collect()
}

pub fn analyze(h: &ChannelTensor, params: &TransformParams) -> Result<LatentTensor> {
    Ok(analyze_batch(&[h], params)?.remove(0))
}

/// Synthesis transform of a batch; outputs carry the normalization `scale`.
pub fn synthesize_batch(
    ys: &[&LatentTensor],
    params: &TransformParams,
    scale: Normalization,
) -> Result<Vec<ChannelTensor>> {
    let shape = params.latent_shape();
    for y in ys {
        if y.shape != shape || y.data.len() != shape.len() {
            return Err(Error::Dimension(format!(
                "latent {:?} does not match transform latent {:?}",
                y.shape, shape
            )));
        }
    }
    if ys.is_empty() {
        return Ok(vec![]);
    }
    let mut g = Graph::new(params);
    let y = g
        .tape
        .leaf(ys.iter().flat_map(|y| y.data.iter().copied()).collect());
    let x = g.decode(params, y, ys.len());
    g.tape
        .value(x)
        .chunks_exact(params.input_len())
        .map(|c| ChannelTensor::new(params.n_delay, params.n_tx, c.to_vec(), scale))
        .collect()
}

pub fn synthesize(
    y: &LatentTensor,
    params: &TransformParams,
    scale: Normalization,
) -> Result<ChannelTensor> {
    Ok(synthesize_batch(&[y], params, scale)?.remove(0))
}
