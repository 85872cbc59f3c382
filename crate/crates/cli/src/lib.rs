//! Command implementations behind the `gmlp` binary. Each command writes its
//! report to the given writer and returns whether everything it checked
//! passed; hard failures come back as errors.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gmlp::autodiff::{GradCheckOptions, OpTag};
use gmlp::checkpoint::{self, AnyTensor, Checkpoint};
use gmlp::gradcheck::{self, Scope};
use gmlp::layers::{Mode, SguVariant, SpatialMode};
use gmlp::models::{
    build_model, count_macs, count_params, param_specs, spatial_weight_name, BlockKind, Model,
    ModelConfig, Protocol,
};
use gmlp::tensor::toeplitz_materialize;
use gmlp::training::{
    eval_batch, evaluate, fit_power_law, parse_points_csv, train, TaskKind, TrainConfig, TrainLog,
    TrainOptions,
};
use gmlp::{Error, Scalar, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Parser)]
#[command(name = "gmlp", version, about = "gMLP / aMLP toolkit: accounting, gradient checks, desk-scale training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-component parameter, multiply-add and FLOP counts.
    Analyze(AnalyzeArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Masked-LM training on a synthetic task.
    Train(TrainArgs),
    /// Loss on the fixed evaluation batch for a saved checkpoint.
    Eval(EvalArgs),
    /// Trains every SGU variant (plus controls) on the same task.
    Ablate(AblateArgs),
    /// Exports spatial weights (and aMLP attention maps) as CSV or PGM.
    DumpFilters(DumpFiltersArgs),
    /// Fits `y = a·x^(-alpha)` to (params, metric) points.
    FitScaling(FitScalingArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TableFormat {
    Table,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImageFormat {
    Csv,
    Pgm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    Op,
    Block,
    Model,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Preset name or path to a config JSON file.
    #[arg(long)]
    pub config: String,
    /// Sequence length; defaults to the config's.
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long, value_enum, default_value_t = TableFormat::Table)]
    pub format: TableFormat,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = ScopeArg::Op)]
    pub scope: ScopeArg,
    #[arg(long, env = "GMLP_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Break the adjoint of one op kind (negative control).
    #[arg(long, hide = true)]
    pub corrupt_adjoint: Option<String>,
}

#[derive(Debug, Args, Clone)]
pub struct RunArgs {
    /// copy_shift_<k>, mod_sum or periodic.
    #[arg(long, default_value = "copy_shift_1")]
    pub task: String,
    /// Preset name or path to a config JSON file.
    #[arg(long, default_value = "micro")]
    pub config: String,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, env = "GMLP_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub eval_every: usize,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    pub dtype: Precision,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Output directory for metrics.csv, model.ckpt and config.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Hold the spatial weights at zero.
    #[arg(long)]
    pub freeze_spatial: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to config.json next to the checkpoint.
    #[arg(long)]
    pub config: Option<String>,
    #[arg(long, default_value = "copy_shift_1")]
    pub task: String,
    #[arg(long, env = "GMLP_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "linear,additive,multiplicative,multiplicative_split"
    )]
    pub variants: Vec<String>,
    /// Skip the token-mixing MLP row.
    #[arg(long)]
    pub no_mixer: bool,
    /// Skip the frozen-spatial-weights row.
    #[arg(long)]
    pub no_control: bool,
    #[arg(long, value_enum, default_value_t = TableFormat::Table)]
    pub format: TableFormat,
}

#[derive(Debug, Args)]
pub struct DumpFiltersArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to config.json next to the checkpoint.
    #[arg(long)]
    pub config: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ImageFormat::Csv)]
    pub format: ImageFormat,
    /// Rows of W to export; defaults to first, middle and last.
    #[arg(long, value_delimiter = ',')]
    pub rows: Vec<usize>,
    /// Seed of the random input used for attention maps.
    #[arg(long, env = "GMLP_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct FitScalingArgs {
    #[arg(long)]
    pub points: PathBuf,
    /// Also print this many log-spaced samples of the fitted curve.
    #[arg(long)]
    pub samples: Option<usize>,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<bool> {
    match cli.command {
        Command::Analyze(a) => analyze(&a, out),
        Command::Gradcheck(a) => gradcheck_cmd(&a, out),
        Command::Train(a) => train_cmd(&a, out),
        Command::Eval(a) => eval_cmd(&a, out),
        Command::Ablate(a) => ablate(&a, out),
        Command::DumpFilters(a) => dump_filters(&a, out),
        Command::FitScaling(a) => fit_scaling(&a, out),
    }
}

/// A preset name, or a path to a JSON config when the file exists or the
/// argument ends in `.json`.
pub fn resolve_config(arg: &str) -> Result<ModelConfig> {
    let path = Path::new(arg);
    if path.is_file() || arg.ends_with(".json") {
        let text = fs::read_to_string(path).with_context(|| format!("reading {arg}"))?;
        return ModelConfig::from_json(&text).with_context(|| format!("parsing {arg}"));
    }
    Ok(ModelConfig::preset(arg)?)
}

/// Writes through a temporary file in the same directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating a temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

pub struct AnalysisRow {
    pub component: String,
    pub params: u64,
    pub macs: u64,
}

/// Components of both breakdowns in order, params first.
pub fn analysis_rows(cfg: &ModelConfig, n: usize) -> (Vec<AnalysisRow>, u64, u64) {
    let params = count_params(cfg);
    let macs = count_macs(cfg, n);
    let mut rows: Vec<AnalysisRow> = params
        .items
        .iter()
        .map(|i| AnalysisRow {
            component: i.component.clone(),
            params: i.count,
            macs: macs.get(&i.component),
        })
        .collect();
    for m in &macs.items {
        if params.get(&m.component) == 0 {
            rows.push(AnalysisRow {
                component: m.component.clone(),
                params: 0,
                macs: m.count,
            });
        }
    }
    (rows, params.total, macs.total)
}

fn analyze(a: &AnalyzeArgs, out: &mut dyn Write) -> Result<bool> {
    let mut cfg = resolve_config(&a.config)?;
    if let Some(n) = a.seq_len {
        cfg.seq_len = n;
    }
    cfg.validate()?;
    let n = cfg.seq_len;
    let (rows, params, macs) = analysis_rows(&cfg, n);
    match a.format {
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["component", "params", "macs", "flops"])?;
            for r in rows.iter().map(|r| (&r.component[..], r.params, r.macs)).chain([("total", params, macs)]) {
                w.write_record([r.0.to_string(), r.1.to_string(), r.2.to_string(), (2 * r.2).to_string()])?;
            }
            out.write_all(&w.into_inner()?)?;
        }
        TableFormat::Table => {
            writeln!(out, "config: {}  (seq_len {n})", a.config)?;
            writeln!(out, "{:<24} {:>16} {:>20} {:>20}", "component", "params", "macs", "flops")?;
            for r in &rows {
                writeln!(out, "{:<24} {:>16} {:>20} {:>20}", r.component, r.params, r.macs, 2 * r.macs)?;
            }
            writeln!(out, "{:<24} {:>16} {:>20} {:>20}", "total", params, macs, 2 * macs)?;
            writeln!(
                out,
                "params {:.2}M, forward {:.3} GFLOPs",
                params as f64 / 1e6,
                2.0 * macs as f64 / 1e9
            )?;
        }
    }
    Ok(true)
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

fn gradcheck_cmd(a: &GradcheckArgs, out: &mut dyn Write) -> Result<bool> {
    let scope = match a.scope {
        ScopeArg::Op => Scope::Op,
        ScopeArg::Block => Scope::Block,
        ScopeArg::Model => Scope::Model,
    };
    let mut opts = GradCheckOptions::default();
    if let Some(tag) = &a.corrupt_adjoint {
        opts.fault = Some(OpTag::parse(tag).with_context(|| format!("unknown op `{tag}`"))?);
    }
    let reports = gradcheck::run(scope, a.seed, opts)?;
    for r in &reports {
        write!(out, "{r}")?;
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    let worst = reports.iter().map(|r| r.max_rel_err()).fold(0.0, f64::max);
    writeln!(
        out,
        "{} of {} checks passed (tol {:e}, worst {:.3e}, seed {})",
        reports.len() - failed,
        reports.len(),
        opts.tol,
        worst,
        a.seed
    )?;
    Ok(failed == 0)
}

// ---------------------------------------------------------------------------
// train / eval
// ---------------------------------------------------------------------------

/// Result of one training run.
pub struct RunOutcome {
    pub log: TrainLog,
    /// Encoded checkpoint of the final parameters.
    pub checkpoint: Vec<u8>,
    /// Step at which the loss became non-finite.
    pub diverged_at: Option<usize>,
}

pub fn train_config(r: &RunArgs) -> TrainConfig {
    let mut tc = TrainConfig::desk(r.steps, r.seed);
    if let Some(lr) = r.lr {
        tc.peak_lr = lr;
    }
    if let Some(b) = r.batch_size {
        tc.batch_size = b;
    }
    tc
}

/// Builds the model from `seed`, trains it, and returns the log and final
/// parameters. Divergence is reported in the outcome, not as an error.
pub fn run_training(
    cfg: &ModelConfig,
    r: &RunArgs,
    freeze_spatial: bool,
) -> Result<RunOutcome> {
    match r.dtype {
        Precision::F32 => run_training_as::<f32>(cfg, r, freeze_spatial),
        Precision::F64 => run_training_as::<f64>(cfg, r, freeze_spatial),
    }
}

fn run_training_as<T: Scalar>(cfg: &ModelConfig, r: &RunArgs, freeze_spatial: bool) -> Result<RunOutcome> {
    if cfg.protocol != Protocol::MlmToken {
        bail!("training needs an mlm_token config");
    }
    let kind = TaskKind::parse(&r.task)?;
    let (mut store, model) = build_model::<T, _>(cfg, &mut ChaCha8Rng::seed_from_u64(r.seed))?;
    let mut opts = TrainOptions::for_model(&model, kind);
    opts.eval_every = r.eval_every;
    opts.freeze_spatial = freeze_spatial;
    let tc = train_config(r);
    match train(&model, &mut store, &opts, &tc) {
        Ok(log) => Ok(RunOutcome {
            log,
            checkpoint: checkpoint::encode(&store),
            diverged_at: None,
        }),
        Err(Error::Diverged { step, log }) => Ok(RunOutcome {
            log: *log,
            checkpoint: checkpoint::encode(&store),
            diverged_at: Some(step),
        }),
        Err(e) => Err(e.into()),
    }
}

fn train_cmd(a: &TrainArgs, out: &mut dyn Write) -> Result<bool> {
    let cfg = resolve_config(&a.run.config)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let outcome = run_training(&cfg, &a.run, a.freeze_spatial)?;
    write_atomic(&a.out.join("metrics.csv"), outcome.log.to_csv().as_bytes())?;
    if let Some(step) = outcome.diverged_at {
        bail!(
            "training diverged at step {step}; partial metrics in {}",
            a.out.join("metrics.csv").display()
        );
    }
    write_atomic(&a.out.join("config.json"), cfg.to_json().as_bytes())?;
    write_atomic(&a.out.join("model.ckpt"), &outcome.checkpoint)?;
    let log = &outcome.log;
    if let (Some(i), Some(f)) = (log.initial_toeplitzness, log.final_toeplitzness) {
        writeln!(out, "toeplitzness: {i:.4} -> {f:.4}")?;
    }
    writeln!(out, "final eval loss: {}", log.final_eval_loss)?;
    eprintln!("trained {} steps in {:.1?}", a.run.steps, log.wall_time);
    Ok(true)
}

fn sibling_config(ckpt: &Path, explicit: Option<&str>) -> Result<ModelConfig> {
    match explicit {
        Some(c) => resolve_config(c),
        None => {
            let p = ckpt.with_file_name("config.json");
            let text = fs::read_to_string(&p)
                .with_context(|| format!("reading {} (pass --config to override)", p.display()))?;
            Ok(ModelConfig::from_json(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
    }
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    checkpoint::decode(&bytes).with_context(|| format!("decoding {}", path.display()))
}

fn checkpoint_dtype(ck: &Checkpoint) -> gmlp::DType {
    ck.tensors
        .values()
        .next()
        .map_or(gmlp::DType::F64, AnyTensor::dtype)
}

/// Eval loss of a checkpoint on the fixed evaluation batch of `seed`, in the
/// checkpoint's own precision.
pub fn checkpoint_eval_loss(ck: Checkpoint, cfg: &ModelConfig, task: TaskKind, seed: u64) -> Result<f64> {
    let model = Model::new(cfg.clone())?;
    let opts = TrainOptions::for_model(&model, task);
    let batch = eval_batch(&opts, seed)?;
    let specs = param_specs(cfg);
    Ok(match checkpoint_dtype(&ck) {
        gmlp::DType::F32 => evaluate(&model, &ck.into_store::<f32>(&specs)?, &batch)?,
        gmlp::DType::F64 => evaluate(&model, &ck.into_store::<f64>(&specs)?, &batch)?,
    })
}

fn eval_cmd(a: &EvalArgs, out: &mut dyn Write) -> Result<bool> {
    let cfg = sibling_config(&a.checkpoint, a.config.as_deref())?;
    let ck = read_checkpoint(&a.checkpoint)?;
    let loss = checkpoint_eval_loss(ck, &cfg, TaskKind::parse(&a.task)?, a.seed)?;
    writeln!(out, "eval loss: {loss}")?;
    Ok(true)
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

pub struct AblationRow {
    pub label: String,
    pub params: u64,
    pub final_eval_loss: f64,
    pub diverged_at: Option<usize>,
}

/// One run per SGU variant, plus a token-mixing MLP and a frozen-W control,
/// all from the same seed and task.
pub fn ablation_rows(a: &AblateArgs) -> Result<Vec<AblationRow>> {
    let base = resolve_config(&a.run.config)?;
    if base.block != BlockKind::Gmlp {
        bail!("ablation needs a gMLP base config");
    }
    let mut runs: Vec<(String, ModelConfig, bool)> = Vec::new();
    for name in &a.variants {
        let v = SguVariant::parse(name.trim()).with_context(|| {
            format!("unknown variant `{name}` (linear, additive, multiplicative, multiplicative_split)")
        })?;
        let mut cfg = base.clone();
        cfg.sgu_variant = v;
        runs.push((v.name().to_string(), cfg, false));
    }
    if !a.no_mixer {
        let mut cfg = base.clone();
        cfg.block = BlockKind::Mixer {
            d_spatial: 2 * base.seq_len,
        };
        cfg.tiny_attn = None;
        runs.push(("mixer_token_mlp".into(), cfg, false));
    }
    if !a.no_control {
        runs.push((format!("{} (frozen W)", base.sgu_variant.name()), base.clone(), true));
    }
    let mut rows = Vec::new();
    for (label, cfg, frozen) in runs {
        cfg.validate().with_context(|| format!("config for {label}"))?;
        let o = run_training(&cfg, &a.run, frozen).with_context(|| format!("training {label}"))?;
        rows.push(AblationRow {
            label,
            params: count_params(&cfg).total,
            final_eval_loss: o.log.final_eval_loss,
            diverged_at: o.diverged_at,
        });
    }
    Ok(rows)
}

fn ablate(a: &AblateArgs, out: &mut dyn Write) -> Result<bool> {
    let rows = ablation_rows(a)?;
    let vocab = resolve_config(&a.run.config)?.vocab().saturating_sub(1);
    let bound = (vocab as f64).ln();
    let loss = |r: &AblationRow| match r.diverged_at {
        Some(s) => format!("diverged@{s}"),
        None => format!("{:.6}", r.final_eval_loss),
    };
    match a.format {
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["variant", "params", "final_eval_loss", "loss_over_log_vocab"])?;
            for r in &rows {
                w.write_record([
                    r.label.clone(),
                    r.params.to_string(),
                    loss(r),
                    format!("{:.4}", r.final_eval_loss / bound),
                ])?;
            }
            out.write_all(&w.into_inner()?)?;
        }
        TableFormat::Table => {
            writeln!(
                out,
                "task {}, {} steps, seed {}; log(vocab) = {bound:.4}",
                a.run.task, a.run.steps, a.run.seed
            )?;
            writeln!(out, "{:<32} {:>8} {:>16} {:>10}", "variant", "params", "final_eval_loss", "/log(V)")?;
            for r in &rows {
                writeln!(
                    out,
                    "{:<32} {:>8} {:>16} {:>10.4}",
                    r.label,
                    r.params,
                    loss(r),
                    r.final_eval_loss / bound
                )?;
            }
        }
    }
    Ok(rows.iter().all(|r| r.diverged_at.is_none()))
}

// ---------------------------------------------------------------------------
// dump-filters
// ---------------------------------------------------------------------------

/// Full `n×n` spatial matrix of block `i`, read straight from the checkpoint.
pub fn spatial_matrix(ck: &Checkpoint, cfg: &ModelConfig, i: usize) -> Result<Tensor<f64>> {
    let name = spatial_weight_name(cfg, i);
    let t = ck
        .tensors
        .get(&name)
        .with_context(|| format!("checkpoint has no tensor `{name}`"))?
        .to_dtype::<f64>();
    let n = cfg.seq_len;
    match cfg.spatial_mode {
        SpatialMode::Dense => {
            if t.shape() != [n, n] {
                bail!("`{name}` has shape {:?}, expected [{n}, {n}]", t.shape());
            }
            Ok(t)
        }
        SpatialMode::Toeplitz => Ok(toeplitz_materialize(&t, n).with_context(|| format!("materializing `{name}`"))?),
    }
}

/// Element-wise max over layers of the aMLP attention maps for one random
/// token sequence.
pub fn attention_max_map(ck: &Checkpoint, cfg: &ModelConfig, seed: u64) -> Result<Tensor<f64>> {
    if cfg.protocol != Protocol::MlmToken {
        bail!("attention export needs an mlm_token config");
    }
    let store = ck.clone().into_store::<f64>(&param_specs(cfg))?;
    let model = Model::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let content = cfg.vocab().saturating_sub(1).max(1);
    let tokens: Vec<usize> = (0..cfg.seq_len).map(|_| rng.gen_range(0..content)).collect();
    let mut tape = Tape::new();
    store.register(&mut tape)?;
    let mut probs = Vec::new();
    model.mlm_logits(&mut tape, &tokens, &[0], Mode::Eval, &mut rng, Some(&mut probs))?;
    let mut maps = probs.iter().map(|&p| tape.value(p).clone());
    let first = maps.next().context("model recorded no attention maps")?;
    maps.try_fold(first, |acc, m| {
        let data = acc.data().iter().zip(m.data()).map(|(a, b)| a.max(*b)).collect();
        Tensor::new(acc.shape().to_vec(), data)
    })
    .map_err(Into::into)
}

pub fn matrix_csv(m: &Tensor<f64>) -> String {
    let mut s = String::new();
    for i in 0..m.shape()[0] {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Binary 8-bit PGM, min-max normalized (a constant image is all zeros).
pub fn pgm(values: &[f64], width: usize, height: usize) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

fn default_rows(n: usize) -> Vec<usize> {
    let mut rows = vec![0, n / 2, n - 1];
    rows.dedup();
    rows
}

fn dump_filters(a: &DumpFiltersArgs, out: &mut dyn Write) -> Result<bool> {
    let cfg = sibling_config(&a.checkpoint, a.config.as_deref())?;
    if cfg.block != BlockKind::Gmlp || cfg.num_layers == 0 {
        bail!("config has no spatial weights to export");
    }
    let ck = read_checkpoint(&a.checkpoint)?;
    let n = cfg.seq_len;
    let rows = if a.rows.is_empty() { default_rows(n) } else { a.rows.clone() };
    if let Some(&r) = rows.iter().find(|&&r| r >= n) {
        bail!("row {r} out of range for seq_len {n}");
    }
    let grid = match a.format {
        ImageFormat::Pgm => Some(cfg.patch_grid().with_context(|| {
            format!("seq_len {n} is not a square patch grid; use --format csv")
        })?),
        ImageFormat::Csv => None,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut written = Vec::new();
    for i in 0..cfg.num_layers {
        let w = spatial_matrix(&ck, &cfg, i)?;
        let path = a.out.join(format!("block{i}_W.csv"));
        write_atomic(&path, matrix_csv(&w).as_bytes())?;
        written.push(path);
        match grid {
            None => {
                let mut s = String::from("token");
                for r in &rows {
                    write!(s, ",row_{r}")?;
                }
                s.push('\n');
                for j in 0..n {
                    write!(s, "{j}")?;
                    for &r in &rows {
                        write!(s, ",{}", w.get2(r, j))?;
                    }
                    s.push('\n');
                }
                let path = a.out.join(format!("block{i}_rows.csv"));
                write_atomic(&path, s.as_bytes())?;
                written.push(path);
            }
            Some(g) => {
                for &r in &rows {
                    let path = a.out.join(format!("block{i}_row{r}.pgm"));
                    write_atomic(&path, &pgm(w.row(r), g, g))?;
                    written.push(path);
                }
            }
        }
    }
    if cfg.tiny_attn.is_some() {
        let m = attention_max_map(&ck, &cfg, a.seed)?;
        let path = a.out.join("attention_max.csv");
        write_atomic(&path, matrix_csv(&m).as_bytes())?;
        written.push(path);
        if a.format == ImageFormat::Pgm {
            let path = a.out.join("attention_max.pgm");
            write_atomic(&path, &pgm(m.data(), n, n))?;
            written.push(path);
        }
    }
    for p in &written {
        writeln!(out, "{}", p.display())?;
    }
    Ok(true)
}

// ---------------------------------------------------------------------------
// fit-scaling
// ---------------------------------------------------------------------------

fn fit_scaling(a: &FitScalingArgs, out: &mut dyn Write) -> Result<bool> {
    let text = fs::read_to_string(&a.points).with_context(|| format!("reading {}", a.points.display()))?;
    let points = parse_points_csv(&text).with_context(|| format!("{}", a.points.display()))?;
    let fit = fit_power_law(&points)?;
    writeln!(out, "points: {}", points.len())?;
    writeln!(out, "a: {}", fit.coefficient)?;
    writeln!(out, "alpha: {}", fit.exponent)?;
    writeln!(out, "residual: {}", fit.residual)?;
    if let Some(k) = a.samples.filter(|&k| k > 0) {
        let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).ln();
        let hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).ln();
        writeln!(out, "x,y_fit")?;
        for i in 0..k {
            let t = if k == 1 { 0.0 } else { i as f64 / (k - 1) as f64 };
            let x = (lo + t * (hi - lo)).exp();
            writeln!(out, "{x},{}", fit.predict(x))?;
        }
    }
    Ok(true)
}
