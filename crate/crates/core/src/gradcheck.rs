//! Finite-difference check suites over every primitive, block and model
//! family, shared by the test suites and the `gradcheck` command.
//!
//! Tensor-valued outputs are reduced to a scalar as `sum(out ⊙ R)` with a
//! fixed random `R`, so every output coordinate contributes with a distinct
//! weight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{directional_check, gradient_check, GradCheckOptions, GradCheckReport, Tape, Var};
use crate::error::{invalid, Result};
use crate::layers::{
    self, AttnWeights, MixerWeights, Mode, NormParams, SguParams, SguVariant, SpatialMode,
    SpatialWeights,
};
use crate::models::{
    amlp_block, baseline_transformer_block, gmlp_block, mixer_block, param_specs, BlockKind,
    GmlpBlockParams, MixerBlockParams, Model, ModelConfig, Protocol, TransformerBlockParams,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Op,
    Block,
    Model,
}

impl Scope {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Self::Op),
            "block" => Ok(Self::Block),
            "model" => Ok(Self::Model),
            _ => Err(invalid("gradcheck", format!("unknown scope `{s}` (op, block, model)"))),
        }
    }
}

pub fn run(scope: Scope, seed: u64, opts: GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    match scope {
        Scope::Op => op_suite(seed, opts),
        Scope::Block => block_suite(seed, opts),
        Scope::Model => model_suite(seed, opts),
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, mean: f64, std: f64) -> Tensor<f64> {
    let d = Normal::new(mean, std).expect("valid std");
    Tensor::from_fn(shape, |_| d.sample(rng))
}

/// `sum(out ⊙ r)`, with `r` a constant leaf.
fn project(tape: &mut Tape<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = tape.leaf(r.clone());
    let y = tape.mul(out, r)?;
    Ok(tape.sum(y))
}

/// Checks `build` (returning a tensor) after projecting its output onto a
/// random direction of shape `out_shape`.
fn check_projected<F>(
    name: &str,
    inputs: Vec<(&str, Tensor<f64>)>,
    out_shape: Vec<usize>,
    rng: &mut ChaCha8Rng,
    opts: GradCheckOptions,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let r = normal(rng, out_shape, 0.0, 1.0);
    let inputs: Vec<(String, Tensor<f64>)> =
        inputs.into_iter().map(|(n, t)| (n.to_string(), t)).collect();
    gradient_check(
        name,
        &inputs,
        |tape, v| {
            let out = build(tape, v)?;
            project(tape, out, &r)
        },
        opts,
    )
}

/// Every tape primitive and every layer function.
pub fn op_suite(seed: u64, opts: GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let (n, c) = (5usize, 6usize);
    let mut reports = Vec::new();

    let a = normal(rng, vec![n, 4], 0.0, 1.0);
    let b = normal(rng, vec![4, c], 0.0, 1.0);
    reports.push(check_projected("matmul", vec![("a", a), ("b", b)], vec![n, c], rng, opts, |t, v| {
        t.matmul(v[0], v[1])
    })?);

    for (name, kind) in [("add", 0), ("mul", 1)] {
        let a = normal(rng, vec![n, c], 0.0, 1.0);
        let b = normal(rng, vec![n, c], 0.0, 1.0);
        reports.push(check_projected(name, vec![("a", a), ("b", b)], vec![n, c], rng, opts, move |t, v| {
            if kind == 0 {
                t.add(v[0], v[1])
            } else {
                t.mul(v[0], v[1])
            }
        })?);
    }

    let a = normal(rng, vec![n, c], 0.0, 1.0);
    let s: f64 = rng.gen_range(-2.0..2.0);
    reports.push(check_projected("scale", vec![("x", a)], vec![n, c], rng, opts, move |t, v| {
        Ok(t.scale(v[0], s))
    })?);

    let a = normal(rng, vec![n, c], 0.0, 1.0);
    let bias = normal(rng, vec![c], 0.0, 1.0);
    reports.push(check_projected("add_row_bias", vec![("x", a), ("b", bias)], vec![n, c], rng, opts, |t, v| {
        t.add_row_bias(v[0], v[1])
    })?);

    let a = normal(rng, vec![n, c], 0.0, 1.0);
    let bias = normal(rng, vec![n], 0.0, 1.0);
    reports.push(check_projected("add_col_bias", vec![("x", a), ("b", bias)], vec![n, c], rng, opts, |t, v| {
        t.add_col_bias(v[0], v[1])
    })?);

    let a = normal(rng, vec![n, c], 0.0, 1.0);
    reports.push(check_projected("transpose", vec![("x", a)], vec![c, n], rng, opts, |t, v| {
        t.transpose(v[0])
    })?);

    let a = normal(rng, vec![n, c], 0.0, 1.5);
    reports.push(check_projected("gelu", vec![("x", a)], vec![n, c], rng, opts, |t, v| {
        Ok(layers::gelu(t, v[0]))
    })?);

    let a = normal(rng, vec![n, c], 0.0, 2.0);
    reports.push(check_projected("softmax_rows", vec![("x", a)], vec![n, c], rng, opts, |t, v| {
        t.softmax_rows(v[0])
    })?);

    let a = normal(rng, vec![n, c], 0.5, 1.0);
    let g = normal(rng, vec![c], 1.0, 0.3);
    let be = normal(rng, vec![c], 0.0, 0.3);
    reports.push(check_projected(
        "layer_norm",
        vec![("x", a), ("gamma", g), ("beta", be)],
        vec![n, c],
        rng,
        opts,
        |t, v| layers::layer_norm(t, v[0], &NormParams { gamma: v[1], beta: v[2] }),
    )?);

    let a = normal(rng, vec![n, c], 0.0, 1.0);
    reports.push(check_projected("slice_cols", vec![("x", a)], vec![n, 3], rng, opts, |t, v| {
        t.slice_cols(v[0], 2, 3)
    })?);

    let a = normal(rng, vec![n, c], 0.0, 1.0);
    let r1 = normal(rng, vec![n, c / 2], 0.0, 1.0);
    reports.push(check_projected("split_last_axis", vec![("x", a)], vec![n, c / 2], rng, opts, move |t, v| {
        let parts = t.split_last_axis(v[0], 2)?;
        let w = t.leaf(r1.clone());
        let u = t.mul(parts[0], w)?;
        t.add(u, parts[1])
    })?);

    let a = normal(rng, vec![n, 2], 0.0, 1.0);
    let b = normal(rng, vec![n, 3], 0.0, 1.0);
    reports.push(check_projected("concat_last_axis", vec![("a", a), ("b", b)], vec![n, 5], rng, opts, |t, v| {
        t.concat_last_axis(&[v[0], v[1]])
    })?);

    let w = normal(rng, vec![2 * n - 1], 0.0, 1.0);
    reports.push(check_projected("toeplitz", vec![("w", w)], vec![n, n], rng, opts, move |t, v| {
        t.toeplitz(v[0], n)
    })?);

    let a = normal(rng, vec![n, c], 0.0, 1.0);
    reports.push(gradient_check(
        "sum",
        &[("x".to_string(), a)],
        |t, v| Ok(t.sum(v[0])),
        opts,
    )?);

    let a = normal(rng, vec![n, c], 0.0, 1.0);
    reports.push(check_projected("mean_rows", vec![("x", a)], vec![1, c], rng, opts, |t, v| {
        t.mean_rows(v[0])
    })?);

    let a = normal(rng, vec![n, c], 0.0, 1.0);
    reports.push(check_projected("gather_rows", vec![("x", a)], vec![4, c], rng, opts, |t, v| {
        t.gather_rows(v[0], &[3, 0, 3, 1])
    })?);

    let logits = normal(rng, vec![4, 7], 0.0, 2.0);
    let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..7)).collect();
    reports.push(gradient_check(
        "cross_entropy",
        &[("logits".to_string(), logits)],
        |t, v| t.cross_entropy(v[0], &targets),
        opts,
    )?);

    let a = normal(rng, vec![n, c], 0.0, 1.0);
    let p = normal(rng, vec![c, 4], 0.0, 0.5);
    let bias = normal(rng, vec![4], 0.0, 0.5);
    reports.push(check_projected(
        "channel_proj",
        vec![("x", a), ("p", p), ("b", bias)],
        vec![n, 4],
        rng,
        opts,
        |t, v| layers::channel_proj(t, v[0], v[1], v[2]),
    )?);

    for mode in [SpatialMode::Dense, SpatialMode::Toeplitz] {
        let z = normal(rng, vec![n, c], 0.0, 1.0);
        let w = match mode {
            SpatialMode::Dense => normal(rng, vec![n, n], 0.0, 0.5),
            SpatialMode::Toeplitz => normal(rng, vec![2 * n - 1], 0.0, 0.5),
        };
        let bias = normal(rng, vec![n], 1.0, 0.3);
        let name = match mode {
            SpatialMode::Dense => "spatial_proj_dense",
            SpatialMode::Toeplitz => "spatial_proj_toeplitz",
        };
        reports.push(check_projected(
            name,
            vec![("z", z), ("w", w), ("b", bias)],
            vec![n, c],
            rng,
            opts,
            move |t, v| {
                layers::spatial_proj(t, v[0], &SpatialWeights { mode, weight: v[1], bias: v[2], n })
            },
        )?);
    }

    for variant in SguVariant::ALL {
        let g = variant.gate_width(c);
        let z = normal(rng, vec![n, c], 0.0, 1.0);
        let gamma = normal(rng, vec![g], 1.0, 0.3);
        let beta = normal(rng, vec![g], 0.0, 0.3);
        let w = normal(rng, vec![n, n], 0.0, 0.5);
        let bias = normal(rng, vec![n], 1.0, 0.3);
        reports.push(check_projected(
            &format!("sgu_{}", variant.name()),
            vec![("z", z), ("gamma", gamma), ("beta", beta), ("w", w), ("b", bias)],
            vec![n, g],
            rng,
            opts,
            move |t, v| {
                let p = SguParams {
                    norm: NormParams { gamma: v[1], beta: v[2] },
                    spatial: SpatialWeights { mode: SpatialMode::Dense, weight: v[3], bias: v[4], n },
                };
                layers::sgu(t, v[0], variant, &p, None)
            },
        )?);
    }

    for heads in [1usize, 2] {
        let d_attn = 4;
        let out = 3;
        let xn = normal(rng, vec![n, c], 0.0, 1.0);
        let qkv_w = normal(rng, vec![c, 3 * d_attn], 0.0, 0.6);
        let q_b = normal(rng, vec![d_attn], 0.0, 0.3);
        let v_b = normal(rng, vec![d_attn], 0.0, 0.3);
        let out_w = normal(rng, vec![d_attn, out], 0.0, 0.6);
        let out_b = normal(rng, vec![out], 0.0, 0.3);
        let name = if heads == 1 { "tiny_attention" } else { "multi_head_attention" };
        reports.push(check_projected(
            name,
            vec![
                ("x", xn),
                ("qkv.weight", qkv_w),
                ("q.bias", q_b),
                ("v.bias", v_b),
                ("out.weight", out_w),
                ("out.bias", out_b),
            ],
            vec![n, out],
            rng,
            opts,
            move |t, v| {
                let w = AttnWeights { qkv_weight: v[1], q_bias: v[2], v_bias: v[3], out_weight: v[4], out_bias: v[5] };
                Ok(layers::multi_head_attention(t, v[0], &w, heads)?.0)
            },
        )?);
    }

    let ds = 7;
    let x = normal(rng, vec![n, c], 0.0, 1.0);
    let w1 = normal(rng, vec![n, ds], 0.0, 0.5);
    let b1 = normal(rng, vec![ds], 0.0, 0.3);
    let w2 = normal(rng, vec![ds, n], 0.0, 0.5);
    let b2 = normal(rng, vec![n], 0.0, 0.3);
    reports.push(check_projected(
        "mixer_token_mlp",
        vec![("x", x), ("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)],
        vec![n, c],
        rng,
        opts,
        |t, v| layers::mixer_token_mlp(t, v[0], &MixerWeights { w1: v[1], b1: v[2], w2: v[3], b2: v[4] }),
    )?);

    let x = normal(rng, vec![n, c], 0.0, 1.0);
    let sd_seed: u64 = rng.gen();
    reports.push(check_projected("stochastic_depth", vec![("x", x)], vec![n, c], rng, opts, move |t, v| {
        // same draw on every evaluation
        let mut r = ChaCha8Rng::seed_from_u64(sd_seed);
        layers::stochastic_depth(t, v[0], 0.7, Mode::Train, &mut r)
    })?);

    Ok(reports)
}

/// Random parameters for every tensor in `specs` whose name starts with
/// `prefix`, with norm gains near one and spatial biases near one.
fn random_params(cfg: &ModelConfig, prefix: &str, rng: &mut ChaCha8Rng) -> Vec<(String, Tensor<f64>)> {
    param_specs(cfg)
        .into_iter()
        .filter(|s| s.name.starts_with(prefix))
        .map(|s| {
            let (mean, std) = if s.name.ends_with(".gamma") || s.name.ends_with("spatial.bias") {
                (1.0, 0.3)
            } else {
                (0.0, 0.5)
            };
            let t = normal(rng, s.shape.clone(), mean, std);
            (s.name, t)
        })
        .collect()
}

fn small_block_config(block: BlockKind, variant: SguVariant, mode: SpatialMode, tiny_attn: Option<usize>) -> ModelConfig {
    ModelConfig {
        protocol: Protocol::MlmToken,
        num_layers: 1,
        d_model: 4,
        d_ffn: 8,
        seq_len: 5,
        sgu_variant: variant,
        spatial_mode: mode,
        tiny_attn,
        survival_prob: 1.0,
        vocab_size: Some(7),
        num_classes: None,
        patch_size: None,
        channels: None,
        block,
    }
}

#[derive(Clone, Copy)]
enum BlockFn {
    Gmlp,
    Amlp,
    Mixer,
    Transformer,
}

fn check_block(name: &str, cfg: ModelConfig, f: BlockFn, rng: &mut ChaCha8Rng, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let mut inputs = vec![("x".to_string(), normal(rng, vec![cfg.seq_len, cfg.d_model], 0.0, 1.0))];
    inputs.extend(random_params(&cfg, "blocks.0.", rng));
    let r = normal(rng, vec![cfg.seq_len, cfg.d_model], 0.0, 1.0);
    gradient_check(
        name,
        &inputs,
        |tape, v| {
            let mut unused = ChaCha8Rng::seed_from_u64(0);
            let out = match f {
                BlockFn::Gmlp | BlockFn::Amlp => {
                    let p = GmlpBlockParams::lookup(tape, "blocks.0", &cfg)?;
                    if let BlockFn::Gmlp = f {
                        gmlp_block(tape, v[0], &p, &cfg, Mode::Eval, &mut unused)?
                    } else {
                        amlp_block(tape, v[0], &p, &cfg, Mode::Eval, &mut unused)?
                    }
                }
                BlockFn::Mixer => {
                    let p = MixerBlockParams::lookup(tape, "blocks.0")?;
                    mixer_block(tape, v[0], &p, &cfg, Mode::Eval, &mut unused)?
                }
                BlockFn::Transformer => {
                    let p = TransformerBlockParams::lookup(tape, "blocks.0")?;
                    baseline_transformer_block(tape, v[0], &p, &cfg, Mode::Eval, &mut unused)?
                }
            };
            project(tape, out, &r)
        },
        opts,
    )
}

/// gMLP blocks (every SGU variant, dense and Toeplitz), the aMLP block, the
/// MLP-Mixer block and the baseline Transformer block.
pub fn block_suite(seed: u64, opts: GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for variant in SguVariant::ALL {
        let cfg = small_block_config(BlockKind::Gmlp, variant, SpatialMode::Dense, None);
        reports.push(check_block(&format!("gmlp_block_{}", variant.name()), cfg, BlockFn::Gmlp, &mut rng, opts)?);
    }
    let cfg = small_block_config(BlockKind::Gmlp, SguVariant::MultiplicativeSplit, SpatialMode::Toeplitz, None);
    reports.push(check_block("gmlp_block_toeplitz", cfg, BlockFn::Gmlp, &mut rng, opts)?);
    let cfg = small_block_config(BlockKind::Gmlp, SguVariant::MultiplicativeSplit, SpatialMode::Dense, Some(3));
    reports.push(check_block("amlp_block", cfg, BlockFn::Amlp, &mut rng, opts)?);
    let cfg = small_block_config(BlockKind::Mixer { d_spatial: 6 }, SguVariant::MultiplicativeSplit, SpatialMode::Dense, None);
    reports.push(check_block("mixer_block", cfg, BlockFn::Mixer, &mut rng, opts)?);
    let cfg = small_block_config(BlockKind::Transformer { heads: 2 }, SguVariant::MultiplicativeSplit, SpatialMode::Dense, None);
    reports.push(check_block("transformer_block", cfg, BlockFn::Transformer, &mut rng, opts)?);
    Ok(reports)
}

/// Directions per parameter tensor in the model scope.
const MODEL_DIRECTIONS: usize = 4;

/// End-to-end losses of small MLM and vision models, over all parameters,
/// compared along random directions (see [`directional_check`]).
pub fn model_suite(seed: u64, opts: GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    let mut mlm_cfgs = vec![
        ("mlm_gmlp", small_block_config(BlockKind::Gmlp, SguVariant::MultiplicativeSplit, SpatialMode::Dense, None)),
        ("mlm_amlp_toeplitz", small_block_config(BlockKind::Gmlp, SguVariant::MultiplicativeSplit, SpatialMode::Toeplitz, Some(2))),
        ("mlm_transformer", small_block_config(BlockKind::Transformer { heads: 1 }, SguVariant::MultiplicativeSplit, SpatialMode::Dense, None)),
    ];
    for (_, cfg) in &mut mlm_cfgs {
        cfg.num_layers = 2;
    }
    for (name, cfg) in mlm_cfgs {
        let model = Model::new(cfg.clone())?;
        let inputs = random_params(&cfg, "", &mut rng);
        let tokens: Vec<usize> = (0..cfg.seq_len).map(|_| rng.gen_range(0..cfg.vocab())).collect();
        let targets: Vec<usize> = (0..cfg.seq_len).map(|_| rng.gen_range(0..cfg.vocab())).collect();
        let positions: Vec<usize> = (0..cfg.seq_len).collect();
        reports.push(directional_check(
            name,
            &inputs,
            |tape, _| {
                let mut unused = ChaCha8Rng::seed_from_u64(0);
                model.mlm_loss(tape, &tokens, &positions, &targets, Mode::Eval, &mut unused)
            },
            MODEL_DIRECTIONS,
            rng.gen(),
            opts,
        )?);
    }

    let mut cfg = small_block_config(BlockKind::Gmlp, SguVariant::MultiplicativeSplit, SpatialMode::Dense, None);
    cfg.protocol = Protocol::VisionPatch;
    cfg.vocab_size = None;
    cfg.num_classes = Some(3);
    cfg.patch_size = Some(2);
    cfg.channels = Some(2);
    cfg.seq_len = 4;
    cfg.num_layers = 2;
    let model = Model::new(cfg.clone())?;
    let inputs = random_params(&cfg, "", &mut rng);
    let image = normal(&mut rng, vec![4, 4, 2], 0.0, 1.0);
    let label = rng.gen_range(0..3);
    let dir_seed = rng.gen();
    reports.push(directional_check(
        "vision_gmlp",
        &inputs,
        |tape, _| {
            let mut unused = ChaCha8Rng::seed_from_u64(0);
            let logits = model.vision_logits(tape, &image, Mode::Eval, &mut unused)?;
            tape.cross_entropy(logits, &[label])
        },
        MODEL_DIRECTIONS,
        dir_seed,
        opts,
    )?);
    Ok(reports)
}
