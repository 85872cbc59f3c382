use gmlp::autodiff::{gradient_check, GradCheckOptions, OpTag};
use gmlp::gradcheck::{block_suite, model_suite, op_suite, run, Scope};
use gmlp::layers::{Mode, SguVariant, SpatialMode};
use gmlp::models::{gmlp_block, param_specs, BlockKind, GmlpBlockParams, ModelConfig, Protocol};
use gmlp::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;

fn assert_all_pass(reports: &[gmlp::autodiff::GradCheckReport], seed: u64) {
    for r in reports {
        assert!(r.passed(), "seed {seed}\n{r}");
        assert!(r.max_rel_err() <= 1e-5);
    }
}

#[test]
fn every_primitive_passes_on_twenty_seeds() {
    for seed in 0..SEEDS {
        assert_all_pass(&op_suite(seed, GradCheckOptions::default()).unwrap(), seed);
    }
}

#[test]
fn every_block_passes_on_twenty_seeds() {
    for seed in 0..SEEDS {
        let reports = block_suite(seed, GradCheckOptions::default()).unwrap();
        for name in ["gmlp_block_multiplicative_split", "amlp_block", "transformer_block", "mixer_block"] {
            assert!(reports.iter().any(|r| r.name == name));
        }
        assert_all_pass(&reports, seed);
    }
}

#[test]
fn model_scope_passes() {
    for seed in 0..5 {
        assert_all_pass(&model_suite(seed, GradCheckOptions::default()).unwrap(), seed);
    }
}

#[test]
fn whole_block_at_eight_tokens_sixteen_channels() {
    let cfg = ModelConfig {
        protocol: Protocol::MlmToken,
        num_layers: 1,
        d_model: 16,
        d_ffn: 32,
        seq_len: 8,
        sgu_variant: SguVariant::MultiplicativeSplit,
        spatial_mode: SpatialMode::Dense,
        tiny_attn: None,
        survival_prob: 1.0,
        vocab_size: Some(5),
        num_classes: None,
        patch_size: None,
        channels: None,
        block: BlockKind::Gmlp,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut inputs = vec![("x".to_string(), Tensor::from_fn(vec![8, 16], |_| rng.gen_range(-1.0..1.0)))];
    for spec in param_specs(&cfg).into_iter().filter(|s| s.name.starts_with("blocks.0.")) {
        let centre = if spec.name.ends_with("gamma") || spec.name.ends_with("spatial.bias") { 1.0 } else { 0.0 };
        inputs.push((spec.name, Tensor::from_fn(spec.shape, |_| centre + rng.gen_range(-0.5..0.5))));
    }
    let r = Tensor::from_fn(vec![8, 16], |_| rng.gen_range(-1.0..1.0));
    let report = gradient_check(
        "gmlp_block_8x16",
        &inputs,
        |tape, v| {
            let p = GmlpBlockParams::lookup(tape, "blocks.0", &cfg)?;
            let mut unused = ChaCha8Rng::seed_from_u64(0);
            let y = gmlp_block(tape, v[0], &p, &cfg, Mode::Eval, &mut unused)?;
            let r = tape.leaf(r.clone());
            let y = tape.mul(y, r)?;
            Ok(tape.sum(y))
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn toeplitz_shared_gradients_pass_at_one_in_a_million() {
    let opts = GradCheckOptions { tol: 1e-6, ..Default::default() };
    for seed in 0..SEEDS {
        let reports = op_suite(seed, opts).unwrap();
        for name in ["toeplitz", "spatial_proj_toeplitz"] {
            let r = reports.iter().find(|r| r.name == name).unwrap();
            assert!(r.passed(), "seed {seed}\n{r}");
        }
    }
}

#[test]
fn corrupted_adjoints_are_caught_at_every_scope() {
    for (scope, tag) in [
        (Scope::Op, OpTag::Gelu),
        (Scope::Op, OpTag::Toeplitz),
        (Scope::Block, OpTag::LayerNorm),
        (Scope::Block, OpTag::SoftmaxRows),
        (Scope::Model, OpTag::GatherRows),
    ] {
        let opts = GradCheckOptions { fault: Some(tag), ..Default::default() };
        let reports = run(scope, 7, opts).unwrap();
        assert!(reports.iter().any(|r| !r.passed()), "{scope:?} {tag:?}");
    }
}

#[test]
fn report_renders_one_row_per_input() {
    let reports = op_suite(0, GradCheckOptions::default()).unwrap();
    let ln = reports.iter().find(|r| r.name == "layer_norm").unwrap();
    let text = ln.to_string();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().all(|l| l.starts_with("layer_norm") && l.ends_with("PASS")));
}

#[test]
fn scope_names() {
    assert_eq!(Scope::parse("block").unwrap(), Scope::Block);
    assert!(Scope::parse("everything").is_err());
}
