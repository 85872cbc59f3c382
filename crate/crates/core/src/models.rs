//! Model assembly: configs and presets, parameter stores, gMLP / aMLP blocks
//! and the comparison blocks, plus closed-form parameter and multiply-add
//! accounting.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::layers::{
    self, AttnWeights, MixerWeights, Mode, NormParams, SguParams, SguVariant, SpatialMode,
    SpatialWeights, SPATIAL_INIT_STD,
};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Image split into square patches, linear patch embedding, pooled head.
    VisionPatch,
    /// Token embedding with a tied output projection read at masked positions.
    MlmToken,
}

/// Block family. Everything other than `Gmlp` exists for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockKind {
    #[default]
    Gmlp,
    /// Token-mixing MLP followed by a channel MLP.
    Mixer { d_spatial: usize },
    /// Pre-norm multi-head self-attention and FFN, absolute position
    /// embeddings at the input.
    Transformer { heads: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub protocol: Protocol,
    pub num_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    /// Tokens per sequence (patch count for vision).
    pub seq_len: usize,
    pub sgu_variant: SguVariant,
    pub spatial_mode: SpatialMode,
    /// Head size of the tiny attention; `Some` turns gMLP blocks into aMLP.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tiny_attn: Option<usize>,
    pub survival_prob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(default)]
    pub block: BlockKind,
}

pub const PRESET_NAMES: &[&str] = &[
    "gmlp-ti",
    "gmlp-s",
    "gmlp-b",
    "gmlp-base",
    "amlp-base",
    "gmlp-large",
    "amlp-large",
    "gmlp-xlarge",
    "micro",
];

/// Vocabulary size of the MLM presets.
pub const MLM_VOCAB: usize = 32_000;

fn vision(num_layers: usize, d_model: usize, d_ffn: usize, survival_prob: f64) -> ModelConfig {
    ModelConfig {
        protocol: Protocol::VisionPatch,
        num_layers,
        d_model,
        d_ffn,
        seq_len: 196,
        sgu_variant: SguVariant::MultiplicativeSplit,
        spatial_mode: SpatialMode::Dense,
        tiny_attn: None,
        survival_prob,
        vocab_size: None,
        num_classes: Some(1000),
        patch_size: Some(16),
        channels: Some(3),
        block: BlockKind::Gmlp,
    }
}

fn mlm(num_layers: usize, d_model: usize, d_ffn: usize, tiny_attn: Option<usize>) -> ModelConfig {
    ModelConfig {
        protocol: Protocol::MlmToken,
        num_layers,
        d_model,
        d_ffn,
        seq_len: 512,
        sgu_variant: SguVariant::MultiplicativeSplit,
        spatial_mode: SpatialMode::Toeplitz,
        tiny_attn,
        survival_prob: 1.0,
        vocab_size: Some(MLM_VOCAB),
        num_classes: None,
        patch_size: None,
        channels: None,
        block: BlockKind::Gmlp,
    }
}

impl ModelConfig {
    /// Named configurations. Vision presets use 224×224 inputs cut into
    /// 16×16 patches; MLM presets use Toeplitz spatial weights and a 32K
    /// vocabulary. `micro` is the desk-scale MLM model.
    pub fn preset(name: &str) -> Result<Self> {
        let key = name.to_ascii_lowercase().replace('_', "-");
        Ok(match key.as_str() {
            "gmlp-ti" => vision(30, 128, 768, 1.0),
            "gmlp-s" => vision(30, 256, 1536, 0.95),
            "gmlp-b" => vision(30, 512, 3072, 0.80),
            "gmlp-base" => mlm(48, 512, 3072, None),
            "amlp-base" => mlm(36, 512, 3072, Some(64)),
            "gmlp-large" => mlm(96, 768, 3072, None),
            "amlp-large" => mlm(72, 768, 3072, Some(128)),
            "gmlp-xlarge" => mlm(144, 1024, 4096, None),
            "micro" => Self::micro(),
            _ => {
                return Err(Error::UnknownPreset {
                    name: name.to_string(),
                    available: PRESET_NAMES.join(", "),
                })
            }
        })
    }

    /// Two blocks, 32 channels, 16 tokens, 16 content tokens plus `[MASK]`.
    pub fn micro() -> Self {
        ModelConfig {
            protocol: Protocol::MlmToken,
            num_layers: 2,
            d_model: 32,
            d_ffn: 64,
            seq_len: 16,
            sgu_variant: SguVariant::MultiplicativeSplit,
            spatial_mode: SpatialMode::Dense,
            tiny_attn: None,
            survival_prob: 1.0,
            vocab_size: Some(17),
            num_classes: None,
            patch_size: None,
            channels: None,
            block: BlockKind::Gmlp,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Structural checks. `num_layers == 0` is accepted so cost accounting
    /// can report the embedding/head-only model.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.d_ffn == 0 || self.seq_len == 0 {
            return fail("d_model, d_ffn and seq_len must be positive".into());
        }
        if self.sgu_variant == SguVariant::MultiplicativeSplit && self.d_ffn % 2 != 0 {
            return fail(format!("d_ffn={} must be even for the split variant", self.d_ffn));
        }
        if !(self.survival_prob > 0.0 && self.survival_prob <= 1.0) {
            return fail(format!("survival_prob={} outside (0, 1]", self.survival_prob));
        }
        if self.tiny_attn == Some(0) {
            return fail("tiny_attn must be positive".into());
        }
        match self.block {
            BlockKind::Gmlp => {}
            BlockKind::Mixer { d_spatial } if d_spatial == 0 => {
                return fail("mixer d_spatial must be positive".into())
            }
            BlockKind::Transformer { heads } if heads == 0 || self.d_model % heads != 0 => {
                return fail(format!(
                    "d_model={} is not divisible by {heads} heads",
                    self.d_model
                ))
            }
            _ => {}
        }
        match self.protocol {
            Protocol::MlmToken => match self.vocab_size {
                Some(v) if v >= 2 => {}
                _ => return fail("mlm_token protocol needs vocab_size >= 2".into()),
            },
            Protocol::VisionPatch => {
                if self.num_classes.unwrap_or(0) == 0
                    || self.patch_size.unwrap_or(0) == 0
                    || self.channels.unwrap_or(0) == 0
                {
                    return fail(
                        "vision_patch protocol needs num_classes, patch_size and channels".into(),
                    );
                }
            }
        }
        // every count is at most a small multiple of L·n·M² for the widest
        // dimension M, so this keeps the accounting inside u64
        let p = self.patch_size.unwrap_or(0) as f64;
        let widest = [
            self.seq_len as f64,
            self.d_model as f64,
            self.d_ffn as f64,
            self.tiny_attn.unwrap_or(0) as f64,
            self.vocab_size.unwrap_or(0) as f64,
            self.num_classes.unwrap_or(0) as f64,
            p * p * self.channels.unwrap_or(0) as f64,
            match self.block {
                BlockKind::Mixer { d_spatial } => d_spatial as f64,
                _ => 0.0,
            },
        ]
        .into_iter()
        .fold(0.0, f64::max);
        let bound = 16.0 * (self.num_layers as f64 + 2.0) * (self.seq_len as f64 + 1.0) * widest * widest;
        if bound >= 2f64.powi(63) {
            return fail("model too large to account for in 64-bit counts".into());
        }
        Ok(())
    }

    /// Channels entering the spatial projection of an SGU.
    pub fn gate_width(&self) -> usize {
        self.sgu_variant.gate_width(self.d_ffn)
    }

    pub fn patch_dim(&self) -> usize {
        let p = self.patch_size.unwrap_or(0);
        p * p * self.channels.unwrap_or(0)
    }

    /// Side of the square patch grid, when `seq_len` is a perfect square.
    pub fn patch_grid(&self) -> Option<usize> {
        let side = (self.seq_len as f64).sqrt().round() as usize;
        (side * side == self.seq_len).then_some(side)
    }

    pub fn vocab(&self) -> usize {
        self.vocab_size.unwrap_or(0)
    }

    /// Id of the `[MASK]` token: the last vocabulary entry.
    pub fn mask_token(&self) -> usize {
        self.vocab().saturating_sub(1)
    }
}

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Whether weight decay applies (false for norm affines and biases).
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    pub init: Init,
    pub decay: bool,
}

/// Named, ordered parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn insert(&mut self, name: &str, param: Param<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        self.entries.insert(name.to_string(), param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.tensor.len()).sum()
    }

    /// Allocates and initializes every parameter listed in `specs`.
    pub fn from_specs<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Result<Self> {
        let mut store = Self::default();
        for spec in specs {
            let tensor = match spec.init {
                Init::Zeros => Tensor::zeros(spec.shape.clone()),
                Init::Ones => Tensor::ones(spec.shape.clone()),
                Init::Normal { std } => {
                    let dist = Normal::new(0.0, std)
                        .map_err(|e| invalid("init", e.to_string()))?;
                    Tensor::from_fn(spec.shape.clone(), |_| T::from_f64_lossy(dist.sample(rng)))
                }
            };
            store.insert(
                &spec.name,
                Param {
                    tensor,
                    init: spec.init,
                    decay: spec.decay,
                },
            )?;
        }
        Ok(store)
    }

    /// Rebuilds a store from raw tensors (e.g. a checkpoint), checking names
    /// and shapes against `specs` and reattaching their metadata.
    pub fn from_tensors(
        specs: &[ParamSpec],
        mut tensors: IndexMap<String, Tensor<T>>,
    ) -> Result<Self> {
        let mut store = Self::default();
        for spec in specs {
            let tensor = tensors
                .shift_remove(&spec.name)
                .ok_or_else(|| Error::MissingParam(spec.name.clone()))?;
            if tensor.shape() != spec.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "load parameter",
                    lhs: spec.shape.clone(),
                    rhs: tensor.shape().to_vec(),
                });
            }
            store.insert(
                &spec.name,
                Param {
                    tensor,
                    init: spec.init,
                    decay: spec.decay,
                },
            )?;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::NameMismatch(format!("unexpected tensor `{extra}`")));
        }
        Ok(store)
    }

    /// Registers every parameter on `tape` under its own name.
    pub fn register(&self, tape: &mut Tape<T>) -> Result<()> {
        for (name, p) in &self.entries {
            tape.param(name, p.tensor.clone())?;
        }
        Ok(())
    }

    pub fn to_dtype<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.to_dtype(),
                            init: p.init,
                            decay: p.decay,
                        },
                    )
                })
                .collect(),
        }
    }
}

fn weight(name: String, fan_in: usize, shape: Vec<usize>) -> ParamSpec {
    ParamSpec {
        name,
        shape,
        init: Init::Normal {
            std: 1.0 / (fan_in as f64).sqrt(),
        },
        decay: true,
    }
}

fn zeros(name: String, len: usize) -> ParamSpec {
    ParamSpec {
        name,
        shape: vec![len],
        init: Init::Zeros,
        decay: false,
    }
}

fn norm_specs(prefix: &str, c: usize) -> [ParamSpec; 2] {
    [
        ParamSpec {
            name: format!("{prefix}.gamma"),
            shape: vec![c],
            init: Init::Ones,
            decay: false,
        },
        zeros(format!("{prefix}.beta"), c),
    ]
}

fn linear_specs(prefix: &str, a: usize, b: usize) -> [ParamSpec; 2] {
    [
        weight(format!("{prefix}.weight"), a, vec![a, b]),
        zeros(format!("{prefix}.bias"), b),
    ]
}

fn attn_specs(prefix: &str, d: usize, a: usize, out: usize) -> Vec<ParamSpec> {
    let mut v = vec![
        weight(format!("{prefix}.qkv.weight"), d, vec![d, 3 * a]),
        zeros(format!("{prefix}.q.bias"), a),
        zeros(format!("{prefix}.v.bias"), a),
    ];
    v.extend(linear_specs(&format!("{prefix}.out"), a, out));
    v
}

/// Every parameter of the model described by `cfg`, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let n = cfg.seq_len;
    let mut specs = Vec::new();
    match cfg.protocol {
        Protocol::MlmToken => specs.push(weight("embedding".into(), d, vec![cfg.vocab(), d])),
        Protocol::VisionPatch => specs.extend(linear_specs("patch_embed", cfg.patch_dim(), d)),
    }
    if let BlockKind::Transformer { .. } = cfg.block {
        specs.push(weight("pos_embedding".into(), d, vec![n, d]));
    }
    for i in 0..cfg.num_layers {
        let p = format!("blocks.{i}");
        match cfg.block {
            BlockKind::Gmlp => {
                let g = cfg.gate_width();
                specs.extend(norm_specs(&format!("{p}.norm"), d));
                specs.extend(linear_specs(&format!("{p}.proj_in"), d, cfg.d_ffn));
                specs.extend(norm_specs(&format!("{p}.sgu.norm"), g));
                specs.push(match cfg.spatial_mode {
                    SpatialMode::Dense => ParamSpec {
                        name: format!("{p}.sgu.spatial.weight"),
                        shape: vec![n, n],
                        init: Init::Normal {
                            std: SPATIAL_INIT_STD,
                        },
                        decay: true,
                    },
                    SpatialMode::Toeplitz => ParamSpec {
                        name: format!("{p}.sgu.spatial.toeplitz"),
                        shape: vec![2 * n - 1],
                        init: Init::Normal {
                            std: SPATIAL_INIT_STD,
                        },
                        decay: true,
                    },
                });
                specs.push(ParamSpec {
                    name: format!("{p}.sgu.spatial.bias"),
                    shape: vec![n],
                    init: Init::Ones,
                    decay: false,
                });
                if let Some(a) = cfg.tiny_attn {
                    specs.extend(attn_specs(&format!("{p}.attn"), d, a, g));
                }
                specs.extend(linear_specs(&format!("{p}.proj_out"), g, d));
            }
            BlockKind::Mixer { d_spatial } => {
                specs.extend(norm_specs(&format!("{p}.token_norm"), d));
                specs.push(weight(format!("{p}.token_mlp.w1"), n, vec![n, d_spatial]));
                specs.push(zeros(format!("{p}.token_mlp.b1"), d_spatial));
                specs.push(weight(format!("{p}.token_mlp.w2"), d_spatial, vec![d_spatial, n]));
                specs.push(zeros(format!("{p}.token_mlp.b2"), n));
                specs.extend(norm_specs(&format!("{p}.norm"), d));
                specs.extend(linear_specs(&format!("{p}.proj_in"), d, cfg.d_ffn));
                specs.extend(linear_specs(&format!("{p}.proj_out"), cfg.d_ffn, d));
            }
            BlockKind::Transformer { .. } => {
                specs.extend(norm_specs(&format!("{p}.attn_norm"), d));
                specs.extend(attn_specs(&format!("{p}.attn"), d, d, d));
                specs.extend(norm_specs(&format!("{p}.norm"), d));
                specs.extend(linear_specs(&format!("{p}.proj_in"), d, cfg.d_ffn));
                specs.extend(linear_specs(&format!("{p}.proj_out"), cfg.d_ffn, d));
            }
        }
    }
    specs.extend(norm_specs("final_norm", d));
    match cfg.protocol {
        Protocol::MlmToken => specs.push(zeros("output_bias".into(), cfg.vocab())),
        Protocol::VisionPatch => {
            specs.extend(linear_specs("head", d, cfg.num_classes.unwrap_or(0)))
        }
    }
    specs
}

/// Name of the spatial weight tensor of block `i` (the `2n-1` diagonal
/// values in Toeplitz mode).
pub fn spatial_weight_name(cfg: &ModelConfig, i: usize) -> String {
    match cfg.spatial_mode {
        SpatialMode::Dense => format!("blocks.{i}.sgu.spatial.weight"),
        SpatialMode::Toeplitz => format!("blocks.{i}.sgu.spatial.toeplitz"),
    }
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

fn norm_vars<T: Scalar>(tape: &Tape<T>, prefix: &str) -> Result<NormParams> {
    Ok(NormParams {
        gamma: tape.param_var(&format!("{prefix}.gamma"))?,
        beta: tape.param_var(&format!("{prefix}.beta"))?,
    })
}

fn linear_vars<T: Scalar>(tape: &Tape<T>, prefix: &str) -> Result<(Var, Var)> {
    Ok((
        tape.param_var(&format!("{prefix}.weight"))?,
        tape.param_var(&format!("{prefix}.bias"))?,
    ))
}

fn attn_vars<T: Scalar>(tape: &Tape<T>, prefix: &str) -> Result<AttnWeights> {
    let qkv_weight = tape.param_var(&format!("{prefix}.qkv.weight"))?;
    let q_bias = tape.param_var(&format!("{prefix}.q.bias"))?;
    let v_bias = tape.param_var(&format!("{prefix}.v.bias"))?;
    let (out_weight, out_bias) = linear_vars(tape, &format!("{prefix}.out"))?;
    Ok(AttnWeights {
        qkv_weight,
        q_bias,
        v_bias,
        out_weight,
        out_bias,
    })
}

/// Tape handles of one gMLP / aMLP block.
#[derive(Debug, Clone, Copy)]
pub struct GmlpBlockParams {
    pub norm: NormParams,
    pub proj_in: (Var, Var),
    pub sgu: SguParams,
    pub attn: Option<AttnWeights>,
    pub proj_out: (Var, Var),
}

impl GmlpBlockParams {
    /// Looks up the block's parameters on `tape` under `prefix`.
    pub fn lookup<T: Scalar>(tape: &Tape<T>, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let spatial_weight = match cfg.spatial_mode {
            SpatialMode::Dense => format!("{prefix}.sgu.spatial.weight"),
            SpatialMode::Toeplitz => format!("{prefix}.sgu.spatial.toeplitz"),
        };
        Ok(Self {
            norm: norm_vars(tape, &format!("{prefix}.norm"))?,
            proj_in: linear_vars(tape, &format!("{prefix}.proj_in"))?,
            sgu: SguParams {
                norm: norm_vars(tape, &format!("{prefix}.sgu.norm"))?,
                spatial: SpatialWeights {
                    mode: cfg.spatial_mode,
                    weight: tape.param_var(&spatial_weight)?,
                    bias: tape.param_var(&format!("{prefix}.sgu.spatial.bias"))?,
                    n: cfg.seq_len,
                },
            },
            attn: match cfg.tiny_attn {
                Some(_) => Some(attn_vars(tape, &format!("{prefix}.attn"))?),
                None => None,
            },
            proj_out: linear_vars(tape, &format!("{prefix}.proj_out"))?,
        })
    }
}

fn check_block_input<T: Scalar>(tape: &Tape<T>, x: Var, cfg: &ModelConfig) -> Result<()> {
    let shape = tape.shape(x);
    if shape != [cfg.seq_len, cfg.d_model] {
        return Err(Error::ShapeMismatch {
            op: "block input",
            lhs: vec![cfg.seq_len, cfg.d_model],
            rhs: shape.to_vec(),
        });
    }
    Ok(())
}

fn gated_block<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    p: &GmlpBlockParams,
    attn: Option<&AttnWeights>,
    cfg: &ModelConfig,
    mode: Mode,
    rng: &mut R,
    probs: Option<&mut Vec<Var>>,
) -> Result<Var> {
    check_block_input(tape, x, cfg)?;
    let shortcut = x;
    let xn = layers::layer_norm(tape, x, &p.norm)?;
    let z = layers::channel_proj(tape, xn, p.proj_in.0, p.proj_in.1)?;
    let z = layers::gelu(tape, z);
    let extra = match attn {
        Some(w) => {
            let (a, mut head_probs) = layers::multi_head_attention(tape, xn, w, 1)?;
            if let Some(sink) = probs {
                sink.append(&mut head_probs);
            }
            Some(a)
        }
        None => None,
    };
    let z = layers::sgu(tape, z, cfg.sgu_variant, &p.sgu, extra)?;
    let y = layers::channel_proj(tape, z, p.proj_out.0, p.proj_out.1)?;
    let y = layers::stochastic_depth(tape, y, cfg.survival_prob, mode, rng)?;
    tape.add(y, shortcut)
}

/// `X + V(s(gelu(U norm(X))))` with the branch passed through stochastic
/// depth. Any tiny-attention weights in `p` are ignored.
pub fn gmlp_block<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    p: &GmlpBlockParams,
    cfg: &ModelConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    gated_block(tape, x, p, None, cfg, mode, rng, None)
}

/// [`gmlp_block`] with `tiny_attention(norm(X))` added to the SGU gate.
pub fn amlp_block<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    p: &GmlpBlockParams,
    cfg: &ModelConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let attn = p
        .attn
        .as_ref()
        .ok_or_else(|| Error::Config("amlp_block needs tiny_attn weights".into()))?;
    gated_block(tape, x, p, Some(attn), cfg, mode, rng, None)
}

/// Tape handles of one MLP-Mixer block.
#[derive(Debug, Clone, Copy)]
pub struct MixerBlockParams {
    pub token_norm: NormParams,
    pub token_mlp: MixerWeights,
    pub norm: NormParams,
    pub proj_in: (Var, Var),
    pub proj_out: (Var, Var),
}

impl MixerBlockParams {
    pub fn lookup<T: Scalar>(tape: &Tape<T>, prefix: &str) -> Result<Self> {
        let v = |s: &str| tape.param_var(&format!("{prefix}.token_mlp.{s}"));
        Ok(Self {
            token_norm: norm_vars(tape, &format!("{prefix}.token_norm"))?,
            token_mlp: MixerWeights {
                w1: v("w1")?,
                b1: v("b1")?,
                w2: v("w2")?,
                b2: v("b2")?,
            },
            norm: norm_vars(tape, &format!("{prefix}.norm"))?,
            proj_in: linear_vars(tape, &format!("{prefix}.proj_in"))?,
            proj_out: linear_vars(tape, &format!("{prefix}.proj_out"))?,
        })
    }
}

fn ffn<T: Scalar>(tape: &mut Tape<T>, x: Var, proj_in: (Var, Var), proj_out: (Var, Var)) -> Result<Var> {
    let h = layers::channel_proj(tape, x, proj_in.0, proj_in.1)?;
    let h = layers::gelu(tape, h);
    layers::channel_proj(tape, h, proj_out.0, proj_out.1)
}

pub fn mixer_block<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    p: &MixerBlockParams,
    cfg: &ModelConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    check_block_input(tape, x, cfg)?;
    let xn = layers::layer_norm(tape, x, &p.token_norm)?;
    let t = layers::mixer_token_mlp(tape, xn, &p.token_mlp)?;
    let t = layers::stochastic_depth(tape, t, cfg.survival_prob, mode, rng)?;
    let x = tape.add(x, t)?;
    let xn = layers::layer_norm(tape, x, &p.norm)?;
    let c = ffn(tape, xn, p.proj_in, p.proj_out)?;
    let c = layers::stochastic_depth(tape, c, cfg.survival_prob, mode, rng)?;
    tape.add(x, c)
}

/// Tape handles of one Transformer block.
#[derive(Debug, Clone, Copy)]
pub struct TransformerBlockParams {
    pub attn_norm: NormParams,
    pub attn: AttnWeights,
    pub norm: NormParams,
    pub proj_in: (Var, Var),
    pub proj_out: (Var, Var),
}

impl TransformerBlockParams {
    pub fn lookup<T: Scalar>(tape: &Tape<T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            attn_norm: norm_vars(tape, &format!("{prefix}.attn_norm"))?,
            attn: attn_vars(tape, &format!("{prefix}.attn"))?,
            norm: norm_vars(tape, &format!("{prefix}.norm"))?,
            proj_in: linear_vars(tape, &format!("{prefix}.proj_in"))?,
            proj_out: linear_vars(tape, &format!("{prefix}.proj_out"))?,
        })
    }
}

/// Pre-norm multi-head self-attention followed by a pre-norm FFN, each with a
/// residual connection.
pub fn baseline_transformer_block<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    p: &TransformerBlockParams,
    cfg: &ModelConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    check_block_input(tape, x, cfg)?;
    let heads = match cfg.block {
        BlockKind::Transformer { heads } => heads,
        _ => return Err(Error::Config("baseline_transformer_block needs a transformer config".into())),
    };
    let xn = layers::layer_norm(tape, x, &p.attn_norm)?;
    let (a, _) = layers::multi_head_attention(tape, xn, &p.attn, heads)?;
    let a = layers::stochastic_depth(tape, a, cfg.survival_prob, mode, rng)?;
    let x = tape.add(x, a)?;
    let xn = layers::layer_norm(tape, x, &p.norm)?;
    let c = ffn(tape, xn, p.proj_in, p.proj_out)?;
    let c = layers::stochastic_depth(tape, c, cfg.survival_prob, mode, rng)?;
    tape.add(x, c)
}

// ---------------------------------------------------------------------------
// Full models
// ---------------------------------------------------------------------------

/// Forward definition of a model; parameters live in a [`ParamStore`] and
/// are registered on the tape before each pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
}

/// Validates `config` and initializes its parameters.
pub fn build_model<T: Scalar, R: Rng + ?Sized>(
    config: &ModelConfig,
    rng: &mut R,
) -> Result<(ParamStore<T>, Model)> {
    config.validate()?;
    if config.num_layers == 0 {
        return Err(Error::Config("num_layers must be >= 1".into()));
    }
    let store = ParamStore::from_specs(&param_specs(config), rng)?;
    Ok((
        store,
        Model {
            config: config.clone(),
        },
    ))
}

/// Cuts an `H×W×C` image into non-overlapping `p×p` patches, row-major over
/// the patch grid, each flattened as `(dy, dx, c)`.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let &[h, w, c] = image.shape() else {
        return Err(invalid("patchify", format!("expected H×W×C, got {:?}", image.shape())));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(invalid(
            "patchify",
            format!("{h}×{w} image is not divisible into {patch}×{patch} patches"),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(h * w * c);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..patch {
                for dx in 0..patch {
                    let y = py * patch + dy;
                    let x = px * patch + dx;
                    data.extend_from_slice(&image.data()[(y * w + x) * c..(y * w + x + 1) * c]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, patch * patch * c], data)
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Runs the block stack on an `n×d_model` representation. Attention
    /// probabilities of aMLP blocks are appended to `probs` when given.
    pub fn blocks<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        mut x: Var,
        mode: Mode,
        rng: &mut R,
        mut probs: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if let BlockKind::Transformer { .. } = cfg.block {
            let pos = tape.param_var("pos_embedding")?;
            x = tape.add(x, pos)?;
        }
        for i in 0..cfg.num_layers {
            let prefix = format!("blocks.{i}");
            x = match cfg.block {
                BlockKind::Gmlp => {
                    let p = GmlpBlockParams::lookup(tape, &prefix, cfg)?;
                    let attn = p.attn;
                    gated_block(tape, x, &p, attn.as_ref(), cfg, mode, rng, probs.as_deref_mut())?
                }
                BlockKind::Mixer { .. } => {
                    let p = MixerBlockParams::lookup(tape, &prefix)?;
                    mixer_block(tape, x, &p, cfg, mode, rng)?
                }
                BlockKind::Transformer { .. } => {
                    let p = TransformerBlockParams::lookup(tape, &prefix)?;
                    baseline_transformer_block(tape, x, &p, cfg, mode, rng)?
                }
            };
        }
        let fin = norm_vars(tape, "final_norm")?;
        layers::layer_norm(tape, x, &fin)
    }

    /// Vocabulary logits `[positions.len() × vocab]` for the tokens at
    /// `positions`, using the transposed embedding as output projection.
    pub fn mlm_logits<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        tokens: &[usize],
        positions: &[usize],
        mode: Mode,
        rng: &mut R,
        probs: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if cfg.protocol != Protocol::MlmToken {
            return Err(Error::Config("mlm_logits needs the mlm_token protocol".into()));
        }
        if tokens.len() != cfg.seq_len {
            return Err(invalid(
                "mlm_logits",
                format!("expected {} tokens, got {}", cfg.seq_len, tokens.len()),
            ));
        }
        let emb = tape.param_var("embedding")?;
        let x = tape.gather_rows(emb, tokens)?;
        let h = self.blocks(tape, x, mode, rng, probs)?;
        let h = tape.gather_rows(h, positions)?;
        let et = tape.transpose(emb)?;
        let logits = tape.matmul(h, et)?;
        let bias = tape.param_var("output_bias")?;
        tape.add_row_bias(logits, bias)
    }

    /// Mean cross entropy of the predictions at `positions` against `targets`.
    #[allow(clippy::too_many_arguments)]
    pub fn mlm_loss<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        tokens: &[usize],
        positions: &[usize],
        targets: &[usize],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let logits = self.mlm_logits(tape, tokens, positions, mode, rng, None)?;
        tape.cross_entropy(logits, targets)
    }

    /// Class logits `[1 × num_classes]` for one `H×W×C` image.
    pub fn vision_logits<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        image: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let cfg = &self.config;
        if cfg.protocol != Protocol::VisionPatch {
            return Err(Error::Config("vision_logits needs the vision_patch protocol".into()));
        }
        let patches = patchify(image, cfg.patch_size.unwrap_or(0))?;
        if patches.shape() != [cfg.seq_len, cfg.patch_dim()] {
            return Err(Error::ShapeMismatch {
                op: "vision_logits",
                lhs: vec![cfg.seq_len, cfg.patch_dim()],
                rhs: patches.shape().to_vec(),
            });
        }
        let x = tape.leaf(patches);
        let (w, b) = linear_vars(tape, "patch_embed")?;
        let x = layers::channel_proj(tape, x, w, b)?;
        let h = self.blocks(tape, x, mode, rng, None)?;
        let pooled = tape.mean_rows(h)?;
        let (w, b) = linear_vars(tape, "head")?;
        layers::channel_proj(tape, pooled, w, b)
    }
}

// ---------------------------------------------------------------------------
// Accounting
// ---------------------------------------------------------------------------

/// One line of a cost breakdown: a component and its count summed over all
/// blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostItem {
    pub component: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Breakdown {
    pub items: Vec<CostItem>,
    pub total: u64,
}

impl Breakdown {
    fn new(items: Vec<(&str, u64)>) -> Self {
        let items: Vec<CostItem> = items
            .into_iter()
            .filter(|(_, c)| *c > 0)
            .map(|(component, count)| CostItem {
                component: component.to_string(),
                count,
            })
            .collect();
        let total = items.iter().map(|i| i.count).sum();
        Self { items, total }
    }

    pub fn get(&self, component: &str) -> u64 {
        self.items
            .iter()
            .find(|i| i.component == component)
            .map_or(0, |i| i.count)
    }
}

/// Parameters of a single block, itemized.
pub fn block_param_items(cfg: &ModelConfig) -> Vec<(&'static str, u64)> {
    let d = cfg.d_model as u64;
    let f = cfg.d_ffn as u64;
    let n = cfg.seq_len as u64;
    match cfg.block {
        BlockKind::Gmlp => {
            let g = cfg.gate_width() as u64;
            let spatial = match cfg.spatial_mode {
                SpatialMode::Dense => n * n,
                SpatialMode::Toeplitz => 2 * n - 1,
            };
            let attn = cfg.tiny_attn.map_or(0, |a| {
                let a = a as u64;
                d * 3 * a + 2 * a + a * g + g
            });
            vec![
                ("block.norm", 2 * d),
                ("block.proj_in", d * f + f),
                ("block.sgu.norm", 2 * g),
                ("block.sgu.spatial", spatial + n),
                ("block.tiny_attn", attn),
                ("block.proj_out", g * d + d),
            ]
        }
        BlockKind::Mixer { d_spatial } => {
            let s = d_spatial as u64;
            vec![
                ("block.token_norm", 2 * d),
                ("block.token_mlp", n * s + s + s * n + n),
                ("block.norm", 2 * d),
                ("block.proj_in", d * f + f),
                ("block.proj_out", f * d + d),
            ]
        }
        BlockKind::Transformer { .. } => vec![
            ("block.attn_norm", 2 * d),
            ("block.attn", d * 3 * d + 2 * d + d * d + d),
            ("block.norm", 2 * d),
            ("block.proj_in", d * f + f),
            ("block.proj_out", f * d + d),
        ],
    }
}

/// Closed-form parameter count, itemized per component (block items summed
/// over all blocks). MLM models tie the output projection to the embedding
/// and add a vocabulary bias; vision models use a mean-pooled linear head.
pub fn count_params(cfg: &ModelConfig) -> Breakdown {
    let d = cfg.d_model as u64;
    let l = cfg.num_layers as u64;
    let mut items: Vec<(&str, u64)> = Vec::new();
    match cfg.protocol {
        Protocol::MlmToken => items.push(("embedding", cfg.vocab() as u64 * d)),
        Protocol::VisionPatch => items.push(("patch_embed", cfg.patch_dim() as u64 * d + d)),
    }
    if let BlockKind::Transformer { .. } = cfg.block {
        items.push(("pos_embedding", cfg.seq_len as u64 * d));
    }
    for (name, count) in block_param_items(cfg) {
        items.push((name, count * l));
    }
    items.push(("final_norm", 2 * d));
    match cfg.protocol {
        Protocol::MlmToken => items.push(("output_bias", cfg.vocab() as u64)),
        Protocol::VisionPatch => {
            let c = cfg.num_classes.unwrap_or(0) as u64;
            items.push(("head", d * c + c));
        }
    }
    Breakdown::new(items)
}

/// Multiply-adds of the spatial projection `W Z` inside an SGU whose input has
/// `e` channels: `n²·e/2` for the split variant, `n²·e` otherwise.
pub fn sgu_spatial_macs(n: u64, e: u64, variant: SguVariant) -> u64 {
    n * n * variant.gate_width(e as usize) as u64
}

/// Multiply-adds of single-head attention scores and mixing: `2·n²·d`.
pub fn attention_core_macs(n: u64, d_attn: u64) -> u64 {
    2 * n * n * d_attn
}

/// Multiply-add breakdown of one forward pass at sequence length `n`.
/// Only matrix products are counted; normalization, activations and
/// element-wise gating are excluded. FLOPs are `2 × total`.
pub fn count_macs(cfg: &ModelConfig, n: usize) -> Breakdown {
    let n = n as u64;
    let d = cfg.d_model as u64;
    let f = cfg.d_ffn as u64;
    let l = cfg.num_layers as u64;
    let mut items: Vec<(&str, u64)> = Vec::new();
    if cfg.protocol == Protocol::VisionPatch {
        items.push(("patch_embed", n * cfg.patch_dim() as u64 * d));
    }
    match cfg.block {
        BlockKind::Gmlp => {
            let g = cfg.gate_width() as u64;
            items.push(("block.proj_in", l * n * d * f));
            items.push(("block.sgu.spatial", l * sgu_spatial_macs(n, f, cfg.sgu_variant)));
            if let Some(a) = cfg.tiny_attn {
                let a = a as u64;
                items.push(("block.tiny_attn.qkv", l * n * d * 3 * a));
                items.push(("block.tiny_attn.core", l * attention_core_macs(n, a)));
                items.push(("block.tiny_attn.out", l * n * a * g));
            }
            items.push(("block.proj_out", l * n * g * d));
        }
        BlockKind::Mixer { d_spatial } => {
            let s = d_spatial as u64;
            items.push(("block.token_mlp", l * 2 * n * s * d));
            items.push(("block.proj_in", l * n * d * f));
            items.push(("block.proj_out", l * n * f * d));
        }
        BlockKind::Transformer { .. } => {
            items.push(("block.attn.qkv", l * n * d * 3 * d));
            items.push(("block.attn.core", l * attention_core_macs(n, d)));
            items.push(("block.attn.out", l * n * d * d));
            items.push(("block.proj_in", l * n * d * f));
            items.push(("block.proj_out", l * n * f * d));
        }
    }
    match cfg.protocol {
        Protocol::MlmToken => items.push(("output_logits", n * d * cfg.vocab() as u64)),
        Protocol::VisionPatch => items.push(("head", d * cfg.num_classes.unwrap_or(0) as u64)),
    }
    Breakdown::new(items)
}
