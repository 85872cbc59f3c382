//! Desk-scale optimization: AdamW, learning-rate schedules, MLM corruption,
//! synthetic tasks, the training loop, and the analysis helpers used on its
//! output (Toeplitz-ness of spatial weights, power-law fits).

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::time::{Duration, Instant};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape};
use crate::error::{invalid, Error, Result};
use crate::layers::{Mode, SpatialMode};
use crate::models::{spatial_weight_name, BlockKind, Model, ParamStore, Protocol};
use crate::tensor::{toeplitz_materialize, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub decay: Decay,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// MLM pretraining hyperparameters of the ablation runs (125K steps,
    /// batch 2048).
    pub fn mlm_pretraining() -> Self {
        Self {
            peak_lr: 7e-4,
            warmup_steps: 10_000,
            total_steps: 125_000,
            decay: Decay::Linear,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-6,
            batch_size: 2048,
            seed: 0,
        }
    }

    /// Same optimizer, scaled down for the micro model.
    pub fn desk(total_steps: usize, seed: u64) -> Self {
        Self {
            peak_lr: 3e-3,
            warmup_steps: (total_steps / 20).max(1).min(total_steps),
            total_steps,
            batch_size: 8,
            seed,
            ..Self::mlm_pretraining()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps exceeds total_steps");
        }
        if !(self.peak_lr > 0.0 && self.adam_eps > 0.0 && self.weight_decay >= 0.0) {
            return bad("rates must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return bad("batch_size and total_steps must be positive");
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, then linear or cosine decay to 0 at
/// `total_steps`.
pub fn lr_schedule(step: usize, tc: &TrainConfig) -> Result<f64> {
    if step > tc.total_steps {
        return Err(invalid(
            "lr_schedule",
            format!("step {step} beyond total_steps {}", tc.total_steps),
        ));
    }
    if step < tc.warmup_steps {
        return Ok(tc.peak_lr * step as f64 / tc.warmup_steps as f64);
    }
    let span = tc.total_steps - tc.warmup_steps;
    if span == 0 {
        return Ok(tc.peak_lr);
    }
    let frac = (step - tc.warmup_steps) as f64 / span as f64;
    Ok(match tc.decay {
        Decay::Linear => tc.peak_lr * (1.0 - frac),
        Decay::Cosine => tc.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
    })
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: HashMap<String, Tensor<T>>,
    pub v: HashMap<String, Tensor<T>>,
}

impl<T> Default for AdamState<T> {
    fn default() -> Self {
        Self {
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }
}

/// One bias-corrected Adam step with decoupled weight decay
/// `θ ← θ·(1 - lr·wd) - lr·m̂/(√v̂ + ε)`. Parameters flagged without decay
/// (norm affines, biases) skip the decay term; names in `frozen` are left
/// untouched and must not appear in `grads`.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
    tc: &TrainConfig,
    frozen: &HashSet<String>,
) -> Result<()> {
    let trainable = params.names().filter(|n| !frozen.contains(*n)).count();
    if trainable != grads.len() {
        return Err(Error::NameMismatch(format!(
            "{} trainable parameters, {} gradients",
            trainable,
            grads.len()
        )));
    }
    for name in grads.keys() {
        if frozen.contains(name) || params.get(name).is_none() {
            return Err(Error::NameMismatch(format!("gradient for `{name}` has no trainable parameter")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (tc.adam_beta1, tc.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let cast = T::from_f64_lossy;
    for (name, p) in params.iter_mut() {
        if frozen.contains(name) {
            continue;
        }
        let g = &grads[name.as_str()];
        if g.shape() != p.tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                lhs: p.tensor.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let shape = g.shape().to_vec();
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape.clone()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape));
        let keep = if p.decay {
            cast(1.0 - lr * tc.weight_decay)
        } else {
            T::one()
        };
        for (((theta, &gi), mi), vi) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = cast(b1) * *mi + cast(1.0 - b1) * gi;
            *vi = cast(b2) * *vi + cast(1.0 - b2) * gi * gi;
            let mhat = *mi / cast(c1);
            let vhat = *vi / cast(c2);
            *theta = *theta * keep - cast(lr) * mhat / (vhat.sqrt() + cast(tc.adam_eps));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// MLM corruption
// ---------------------------------------------------------------------------

/// Fractions of selected positions replaced by `[MASK]` and by a random
/// token; the rest are left unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSplit {
    pub mask: f64,
    pub random: f64,
}

impl MaskSplit {
    pub const BERT: MaskSplit = MaskSplit {
        mask: 0.8,
        random: 0.1,
    };
    pub const MASK_ONLY: MaskSplit = MaskSplit {
        mask: 1.0,
        random: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub tokens: Vec<usize>,
    /// Selected positions, ascending.
    pub positions: Vec<usize>,
    /// Original tokens at `positions`.
    pub targets: Vec<usize>,
}

/// Number of positions selected at `rate` for a sequence of `len` tokens,
/// `⌈rate·len⌉` with products that are integers up to rounding treated as
/// exact.
pub fn mask_count(len: usize, rate: f64) -> usize {
    let raw = rate * len as f64;
    let nearest = raw.round();
    let count = if (raw - nearest).abs() < 1e-9 {
        nearest
    } else {
        raw.ceil()
    };
    (count as usize).min(len)
}

/// Selects `⌈rate·len⌉` positions and corrupts them per `split`; random
/// replacements are drawn from `0..content_vocab`.
pub fn mlm_mask<R: Rng + ?Sized>(
    tokens: &[usize],
    rate: f64,
    rng: &mut R,
    content_vocab: usize,
    mask_token: usize,
    split: MaskSplit,
) -> Result<MaskedSequence> {
    if tokens.is_empty() {
        return Err(invalid("mlm_mask", "empty sequence"));
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(invalid("mlm_mask", format!("rate {rate} outside [0, 1)")));
    }
    if content_vocab == 0 {
        return Err(invalid("mlm_mask", "content vocabulary is empty"));
    }
    let count = mask_count(tokens.len(), rate);
    let mut positions = index::sample(rng, tokens.len(), count).into_vec();
    positions.sort_unstable();
    let mut corrupted = tokens.to_vec();
    let targets = positions.iter().map(|&p| tokens[p]).collect();
    for &p in &positions {
        let u: f64 = rng.gen();
        if u < split.mask {
            corrupted[p] = mask_token;
        } else if u < split.mask + split.random {
            corrupted[p] = rng.gen_range(0..content_vocab);
        }
    }
    Ok(MaskedSequence {
        tokens: corrupted,
        positions,
        targets,
    })
}

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// `x[i] = x[i-k]` for `i >= k`; the first `k` tokens are uniform.
    CopyShift(usize),
    /// `x[i] = (x[i-1] + x[i-2]) mod vocab`.
    ModSum,
    /// A random pattern of random period in `2..=n/2`, repeated.
    Periodic,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(k) = s.strip_prefix("copy_shift_") {
            let k: usize = k
                .parse()
                .map_err(|_| invalid("task", format!("bad shift in `{s}`")))?;
            if k == 0 {
                return Err(invalid("task", "shift must be >= 1"));
            }
            return Ok(Self::CopyShift(k));
        }
        match s {
            "mod_sum" => Ok(Self::ModSum),
            "periodic" => Ok(Self::Periodic),
            _ => Err(invalid(
                "task",
                format!("unknown task `{s}` (copy_shift_<k>, mod_sum, periodic)"),
            )),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::CopyShift(k) => write!(f, "copy_shift_{k}"),
            Self::ModSum => write!(f, "mod_sum"),
            Self::Periodic => write!(f, "periodic"),
        }
    }
}

/// Generates one sequence of `n` content tokens from `0..vocab`.
pub fn synth_sequence<R: Rng + ?Sized>(
    kind: TaskKind,
    n: usize,
    vocab: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n < 4 || vocab < 4 {
        return Err(invalid("synth_task", format!("need n >= 4 and vocab >= 4, got n={n} vocab={vocab}")));
    }
    let mut seq = Vec::with_capacity(n);
    match kind {
        TaskKind::CopyShift(k) => {
            if k >= n {
                return Err(invalid("synth_task", format!("shift {k} >= length {n}")));
            }
            for i in 0..n {
                let t = if i < k { rng.gen_range(0..vocab) } else { seq[i - k] };
                seq.push(t);
            }
        }
        TaskKind::ModSum => {
            for i in 0..n {
                let t = if i < 2 {
                    rng.gen_range(0..vocab)
                } else {
                    (seq[i - 1] + seq[i - 2]) % vocab
                };
                seq.push(t);
            }
        }
        TaskKind::Periodic => {
            let period = rng.gen_range(2..=n / 2);
            let pattern: Vec<usize> = (0..period).map(|_| rng.gen_range(0..vocab)).collect();
            seq.extend((0..n).map(|i| pattern[i % period]));
        }
    }
    Ok(seq)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seq_len: usize,
    /// Content tokens are `0..vocab`; the mask token lies outside this range.
    pub vocab: usize,
    pub mask_token: usize,
    pub mask_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub sequence: Vec<usize>,
    pub masked: MaskedSequence,
}

/// A batch of sequences, each with its corruption plan.
pub fn synth_task_generate<R: Rng + ?Sized>(
    task: &TaskSpec,
    batch: usize,
    split: MaskSplit,
    rng: &mut R,
) -> Result<Vec<Example>> {
    (0..batch)
        .map(|_| {
            let sequence = synth_sequence(task.kind, task.seq_len, task.vocab, rng)?;
            let masked = mlm_mask(&sequence, task.mask_rate, rng, task.vocab, task.mask_token, split)?;
            Ok(Example { sequence, masked })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    pub toeplitzness_mean: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,lr,train_loss,eval_loss,toeplitzness_mean";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<MetricRecord>,
    pub final_eval_loss: f64,
    pub initial_toeplitzness: Option<f64>,
    pub final_toeplitzness: Option<f64>,
    pub wall_time: Duration,
}

impl TrainLog {
    /// Metric log as CSV (header included). Wall time is not part of it so
    /// logs of identical runs compare equal byte for byte.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        w.write_record(METRICS_HEADER.split(',')).expect("in-memory write");
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                format!("{:?}", r.lr),
                format!("{:?}", r.train_loss),
                opt(r.eval_loss),
                opt(r.toeplitzness_mean),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ASCII output")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub task: TaskSpec,
    pub eval_batch: usize,
    pub eval_every: usize,
    /// Hold every spatial weight at exactly zero for the whole run.
    pub freeze_spatial: bool,
}

impl TrainOptions {
    pub fn for_model(model: &Model, kind: TaskKind) -> Self {
        let vocab = model.config.vocab().saturating_sub(1);
        Self {
            task: TaskSpec {
                kind,
                seq_len: model.config.seq_len,
                vocab,
                mask_token: model.config.mask_token(),
                mask_rate: 0.15,
            },
            eval_batch: 64,
            eval_every: 100,
            freeze_spatial: false,
        }
    }
}

/// Training state: optimizer moments plus the data RNG.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub adam: AdamState<T>,
    pub rng: ChaCha8Rng,
    pub running_loss: f64,
}

/// The fixed evaluation batch of a run: seeded independently of the training
/// stream and corrupted with `[MASK]` only.
pub fn eval_batch(opts: &TrainOptions, seed: u64) -> Result<Vec<Example>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e7a1);
    synth_task_generate(&opts.task, opts.eval_batch, MaskSplit::MASK_ONLY, &mut rng)
}

/// Mean masked-position cross entropy over `batch` in eval mode.
pub fn evaluate<T: Scalar>(model: &Model, store: &ParamStore<T>, batch: &[Example]) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in batch {
        if ex.masked.positions.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        store.register(&mut tape)?;
        let loss = model.mlm_loss(
            &mut tape,
            &ex.masked.tokens,
            &ex.masked.positions,
            &ex.masked.targets,
            Mode::Eval,
            &mut rng,
        )?;
        let m = ex.masked.positions.len();
        total += tape.value(loss).data()[0].to_f64_lossy() * m as f64;
        count += m;
    }
    if count == 0 {
        return Err(invalid("evaluate", "no masked positions in the batch"));
    }
    Ok(total / count as f64)
}

/// Materialized `n×n` spatial matrix of every block.
pub fn spatial_matrices<T: Scalar>(model: &Model, store: &ParamStore<T>) -> Result<Vec<Tensor<T>>> {
    let cfg = &model.config;
    if cfg.block != BlockKind::Gmlp {
        return Ok(Vec::new());
    }
    (0..cfg.num_layers)
        .map(|i| {
            let w = store.tensor(&spatial_weight_name(cfg, i))?;
            match cfg.spatial_mode {
                SpatialMode::Dense => Ok(w.clone()),
                SpatialMode::Toeplitz => toeplitz_materialize(w, cfg.seq_len),
            }
        })
        .collect()
}

/// Mean [`toeplitzness`] over the blocks, `None` for models without spatial
/// weights.
pub fn mean_toeplitzness<T: Scalar>(model: &Model, store: &ParamStore<T>) -> Result<Option<f64>> {
    let mats = spatial_matrices(model, store)?;
    if mats.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for m in &mats {
        total += toeplitzness(&m.to_dtype::<f64>())?;
    }
    Ok(Some(total / mats.len() as f64))
}

/// Names of the spatial weight tensors (held at zero by `freeze_spatial`).
pub fn spatial_weight_names(model: &Model) -> Vec<String> {
    if model.config.block != BlockKind::Gmlp {
        return Vec::new();
    }
    (0..model.config.num_layers)
        .map(|i| spatial_weight_name(&model.config, i))
        .collect()
}

/// Mean loss over the batch and its gradients.
fn batch_loss<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    batch: &[Example],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Gradients<T>)> {
    let mut tape = Tape::new();
    store.register(&mut tape)?;
    let mut loss_vars = Vec::with_capacity(batch.len());
    for ex in batch {
        if ex.masked.positions.is_empty() {
            continue;
        }
        loss_vars.push(model.mlm_loss(
            &mut tape,
            &ex.masked.tokens,
            &ex.masked.positions,
            &ex.masked.targets,
            Mode::Train,
            rng,
        )?);
    }
    if loss_vars.is_empty() {
        return Err(invalid("train", "mask rate selects no positions"));
    }
    let mut total = loss_vars[0];
    for &l in &loss_vars[1..] {
        total = tape.add(total, l)?;
    }
    let loss = tape.scale(total, T::one() / T::from_usize(loss_vars.len()).unwrap());
    let value = tape.value(loss).data()[0].to_f64_lossy();
    if !value.is_finite() {
        return Ok((value, Gradients::new()));
    }
    Ok((value, tape.backward(loss)?))
}

/// Masked-LM training on a synthetic task. Deterministic given `tc.seed`.
/// A non-finite loss aborts with [`Error::Diverged`], carrying the records
/// logged so far.
pub fn train<T: Scalar>(
    model: &Model,
    store: &mut ParamStore<T>,
    opts: &TrainOptions,
    tc: &TrainConfig,
) -> Result<TrainLog> {
    tc.validate()?;
    if model.config.protocol != Protocol::MlmToken {
        return Err(Error::Config("training needs the mlm_token protocol".into()));
    }
    if opts.task.seq_len != model.config.seq_len {
        return Err(Error::Config("task and model sequence lengths differ".into()));
    }
    let start = Instant::now();
    let mut frozen = HashSet::new();
    if opts.freeze_spatial {
        for name in spatial_weight_names(model) {
            store.tensor_mut(&name)?.data_mut().fill(T::zero());
            frozen.insert(name);
        }
    }
    let eval = eval_batch(opts, tc.seed)?;
    let mut state = TrainState {
        adam: AdamState::default(),
        rng: ChaCha8Rng::seed_from_u64(tc.seed),
        running_loss: 0.0,
    };
    let mut log = TrainLog {
        initial_toeplitzness: mean_toeplitzness(model, store)?,
        ..TrainLog::default()
    };
    let eval_every = opts.eval_every.max(1);

    for step in 1..=tc.total_steps {
        let lr = lr_schedule(step, tc)?;
        let batch = synth_task_generate(&opts.task, tc.batch_size, MaskSplit::BERT, &mut state.rng)?;
        let forward = batch_loss(model, store, &batch, &mut state.rng);
        let (train_loss, mut grads) = match forward {
            Ok((l, g)) if l.is_finite() => (l, g),
            Ok(_) | Err(Error::NonFinite(_)) => {
                log.wall_time = start.elapsed();
                return Err(Error::Diverged {
                    step,
                    log: Box::new(log),
                });
            }
            Err(e) => return Err(e),
        };
        for name in &frozen {
            grads.shift_remove(name);
        }
        adamw_step(store, &grads, &mut state.adam, lr, tc, &frozen)?;
        state.running_loss = if step == 1 {
            train_loss
        } else {
            0.98 * state.running_loss + 0.02 * train_loss
        };

        let mut record = MetricRecord {
            step,
            lr,
            train_loss,
            eval_loss: None,
            toeplitzness_mean: None,
        };
        if step % eval_every == 0 || step == tc.total_steps {
            let e = match evaluate(model, store, &eval) {
                Err(Error::NonFinite(_)) => f64::NAN,
                other => other?,
            };
            if !e.is_finite() {
                log.records.push(record);
                log.wall_time = start.elapsed();
                return Err(Error::Diverged {
                    step,
                    log: Box::new(log),
                });
            }
            record.eval_loss = Some(e);
            record.toeplitzness_mean = mean_toeplitzness(model, store)?;
            log.final_eval_loss = e;
        }
        log.records.push(record);
    }
    log.final_toeplitzness = mean_toeplitzness(model, store)?;
    log.wall_time = start.elapsed();
    Ok(log)
}

// ---------------------------------------------------------------------------
// Analysis
// ---------------------------------------------------------------------------

/// `1 - (residual variance around the per-diagonal means) / (total
/// variance)`, clamped to `[0, 1]`. Exactly Toeplitz matrices score 1; so does
/// a constant matrix (zero variance). An i.i.d. matrix scores `2/(n+1)` in
/// expectation.
pub fn toeplitzness(w: &Tensor<f64>) -> Result<f64> {
    let (r, c) = w.dims2("toeplitzness")?;
    if r != c {
        return Err(invalid("toeplitzness", format!("expected a square matrix, got {r}×{c}")));
    }
    let n = r;
    if n == 0 {
        return Ok(1.0);
    }
    let mean = w.sum() / (n * n) as f64;
    let total: f64 = w.data().iter().map(|&v| (v - mean) * (v - mean)).sum();
    if total == 0.0 {
        return Ok(1.0);
    }
    let mut sums = vec![0.0; 2 * n - 1];
    let mut counts = vec![0usize; 2 * n - 1];
    for i in 0..n {
        for j in 0..n {
            sums[j + n - 1 - i] += w.get2(i, j);
            counts[j + n - 1 - i] += 1;
        }
    }
    let mut resid = 0.0;
    for i in 0..n {
        for j in 0..n {
            let k = j + n - 1 - i;
            let d = w.get2(i, j) - sums[k] / counts[k] as f64;
            resid += d * d;
        }
    }
    Ok((1.0 - resid / total).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLawFit {
    /// `a` in `y ≈ a·x^(-α)`.
    pub coefficient: f64,
    /// `α` in `y ≈ a·x^(-α)`.
    pub exponent: f64,
    /// Sum of squared residuals in log space.
    pub residual: f64,
}

impl PowerLawFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.coefficient * x.powf(-self.exponent)
    }
}

/// Least squares on `(ln x, ln y)`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 2 {
        return Err(invalid("fit_power_law", "need at least two points"));
    }
    if let Some(&(x, y)) = points.iter().find(|(x, y)| !(*x > 0.0 && *y > 0.0) || !x.is_finite() || !y.is_finite()) {
        return Err(invalid("fit_power_law", format!("non-positive point ({x}, {y})")));
    }
    let k = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(invalid("fit_power_law", "all x values are equal"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    Ok(PowerLawFit {
        coefficient: intercept.exp(),
        exponent: -slope,
        residual,
    })
}

/// Parses `x,y` lines. A non-numeric first line is taken as a header;
/// blank lines and `#` comments are skipped. Errors carry the 1-based line.
pub fn parse_points_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut points = Vec::new();
    let mut first = true;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let is_header = std::mem::replace(&mut first, false);
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        let parsed = match fields[..] {
            [a, b] => a.parse::<f64>().ok().zip(b.parse::<f64>().ok()),
            _ => None,
        };
        match parsed {
            Some((x, y)) => {
                if !(x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite()) {
                    return Err(Error::Parse {
                        line,
                        msg: format!("values must be positive and finite, got ({x}, {y})"),
                    });
                }
                points.push((x, y));
            }
            None if is_header && fields.len() == 2 => {}
            None => {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected `x,y`, got `{trimmed}`"),
                })
            }
        }
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, Init, Param, ModelConfig};

    fn tc(wd: f64) -> TrainConfig {
        TrainConfig {
            weight_decay: wd,
            ..TrainConfig::desk(100, 0)
        }
    }

    fn store_with(name: &str, values: &[f64], decay: bool) -> ParamStore<f64> {
        let mut s = ParamStore::default();
        s.insert(
            name,
            Param {
                tensor: Tensor::from_f64(vec![values.len()], values).unwrap(),
                init: Init::Zeros,
                decay,
            },
        )
        .unwrap();
        s
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_noop() {
        let mut s = store_with("w", &[1.5, -2.0, 0.25], true);
        let before = s.clone();
        let mut grads = Gradients::new();
        grads.insert("w".to_string(), Tensor::zeros(vec![3]));
        let mut st = AdamState::default();
        adamw_step(&mut s, &grads, &mut st, 1e-2, &tc(0.0), &HashSet::new()).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn adamw_decoupled_decay() {
        let mut s = store_with("w", &[1.5, -2.0], true);
        s.insert(
            "b",
            Param {
                tensor: Tensor::from_f64(vec![1], &[3.0]).unwrap(),
                init: Init::Zeros,
                decay: false,
            },
        )
        .unwrap();
        let mut grads = Gradients::new();
        grads.insert("w".to_string(), Tensor::zeros(vec![2]));
        grads.insert("b".to_string(), Tensor::zeros(vec![1]));
        let lr = 0.1;
        adamw_step(&mut s, &grads, &mut AdamState::default(), lr, &tc(0.01), &HashSet::new()).unwrap();
        let k = 1.0 - lr * 0.01;
        assert_eq!(s.tensor("w").unwrap().data(), &[1.5 * k, -2.0 * k]);
        assert_eq!(s.tensor("b").unwrap().data(), &[3.0]);
    }

    #[test]
    fn adamw_descends_quadratic() {
        let mut s = store_with("t", &[1.0], true);
        let mut grads = Gradients::new();
        grads.insert("t".to_string(), Tensor::from_f64(vec![1], &[2.0]).unwrap());
        adamw_step(&mut s, &grads, &mut AdamState::default(), 0.01, &tc(0.0), &HashSet::new()).unwrap();
        assert!(s.tensor("t").unwrap().data()[0].abs() < 1.0);
    }

    #[test]
    fn adamw_rejects_misaligned_names() {
        let mut s = store_with("w", &[1.0], true);
        let mut grads = Gradients::new();
        grads.insert("v".to_string(), Tensor::zeros(vec![1]));
        let r = adamw_step(&mut s, &grads, &mut AdamState::default(), 0.1, &tc(0.0), &HashSet::new());
        assert!(matches!(r, Err(Error::NameMismatch(_))));
        let r = adamw_step(&mut s, &Gradients::new(), &mut AdamState::default(), 0.1, &tc(0.0), &HashSet::new());
        assert!(matches!(r, Err(Error::NameMismatch(_))));
    }

    #[test]
    fn schedule_shape() {
        let mut c = TrainConfig::mlm_pretraining();
        assert_eq!(lr_schedule(0, &c).unwrap(), 0.0);
        assert_eq!(lr_schedule(c.warmup_steps, &c).unwrap(), 7e-4);
        let mid = c.warmup_steps + (c.total_steps - c.warmup_steps) / 2;
        assert!((lr_schedule(mid, &c).unwrap() - 3.5e-4).abs() < 1e-15);
        assert_eq!(lr_schedule(c.total_steps, &c).unwrap(), 0.0);
        assert!(lr_schedule(c.total_steps + 1, &c).is_err());
        c.decay = Decay::Cosine;
        assert!((lr_schedule(mid, &c).unwrap() - 3.5e-4).abs() < 1e-15);
        assert!(lr_schedule(c.total_steps, &c).unwrap().abs() < 1e-18);
    }

    #[test]
    fn mask_counts() {
        assert_eq!(mask_count(100, 0.15), 15);
        assert_eq!(mask_count(16, 0.15), 3);
        assert_eq!(mask_count(10, 0.0), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let toks: Vec<usize> = (0..100).map(|i| i % 7).collect();
        let m = mlm_mask(&toks, 0.15, &mut rng, 7, 7, MaskSplit::BERT).unwrap();
        assert_eq!(m.positions.len(), 15);
        assert_eq!(m.targets, m.positions.iter().map(|&p| toks[p]).collect::<Vec<_>>());
        let m = mlm_mask(&toks, 0.0, &mut rng, 7, 7, MaskSplit::BERT).unwrap();
        assert!(m.positions.is_empty());
        assert_eq!(m.tokens, toks);
        assert!(mlm_mask(&[], 0.1, &mut rng, 7, 7, MaskSplit::BERT).is_err());
        assert!(mlm_mask(&toks, 1.0, &mut rng, 7, 7, MaskSplit::BERT).is_err());
    }

    #[test]
    fn corruption_split_frequencies() {
        // Monte Carlo over 10^5 selections; the sequence uses token 0 only and
        // random replacements come from 1..=1000, so each outcome is
        // identifiable except random draws of 0 (probability 0).
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let toks = vec![0usize; 100];
        let (mut masked, mut random, mut kept, mut total) = (0usize, 0usize, 0usize, 0usize);
        while total < 100_000 {
            let m = mlm_mask(&toks, 0.5, &mut rng, 1000, 5000, MaskSplit::BERT).unwrap();
            for &p in &m.positions {
                match m.tokens[p] {
                    5000 => masked += 1,
                    0 => kept += 1,
                    _ => random += 1,
                }
                total += 1;
            }
        }
        let frac = |c: usize| c as f64 / total as f64;
        // a random draw can land on 0 with probability 1/1000
        assert!((frac(masked) - 0.8).abs() < 0.01);
        assert!((frac(random) - 0.1).abs() < 0.01);
        assert!((frac(kept) - 0.1).abs() < 0.01);
    }

    #[test]
    fn synthetic_tasks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let s = synth_sequence(TaskKind::CopyShift(1), 16, 16, &mut rng).unwrap();
            assert!(s.windows(2).all(|w| w[0] == w[1]));
            let s = synth_sequence(TaskKind::CopyShift(3), 16, 16, &mut rng).unwrap();
            assert!((3..16).all(|i| s[i] == s[i - 3]));
            let s = synth_sequence(TaskKind::ModSum, 16, 7, &mut rng).unwrap();
            assert!((2..16).all(|i| s[i] == (s[i - 1] + s[i - 2]) % 7));
            let s = synth_sequence(TaskKind::Periodic, 16, 5, &mut rng).unwrap();
            let p = (2..=8).find(|&p| (p..16).all(|i| s[i] == s[i - p]));
            assert!(p.is_some());
        }
        assert!(synth_sequence(TaskKind::ModSum, 3, 16, &mut rng).is_err());
        assert!(synth_sequence(TaskKind::ModSum, 8, 3, &mut rng).is_err());
        assert!(TaskKind::parse("copy_shift_x").is_err());
        assert!(TaskKind::parse("sorting").is_err());
        assert_eq!(TaskKind::parse("copy_shift_2").unwrap(), TaskKind::CopyShift(2));

        let spec = TaskSpec {
            kind: TaskKind::Periodic,
            seq_len: 12,
            vocab: 9,
            mask_token: 9,
            mask_rate: 0.15,
        };
        let a = synth_task_generate(&spec, 4, MaskSplit::BERT, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = synth_task_generate(&spec, 4, MaskSplit::BERT, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn copy_shift_entropies() {
        // unigram entropy ~ ln(vocab); conditional on the left neighbour, 0
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vocab = 16;
        let mut counts = vec![0usize; vocab];
        let mut mismatches = 0;
        for _ in 0..4000 {
            let s = synth_sequence(TaskKind::CopyShift(1), 16, vocab, &mut rng).unwrap();
            for i in 0..16 {
                counts[s[i]] += 1;
                if i > 0 && s[i] != s[i - 1] {
                    mismatches += 1;
                }
            }
        }
        let total: usize = counts.iter().sum();
        let h: f64 = counts
            .iter()
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum();
        assert!((h - (vocab as f64).ln()).abs() < 0.01, "{h}");
        assert_eq!(mismatches, 0);
    }

    #[test]
    fn toeplitzness_examples() {
        let w = Tensor::from_fn(vec![7], |i| (i as f64).sin());
        let m = toeplitz_materialize(&w, 4).unwrap();
        assert!((toeplitzness(&m).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(toeplitzness(&Tensor::full(vec![5, 5], 2.0)).unwrap(), 1.0);
        assert!(toeplitzness(&Tensor::zeros(vec![2, 3])).is_err());
        let mut scores = Vec::new();
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Tensor::from_fn(vec![64, 64], |_| rng.gen_range(-1.0..1.0));
            scores.push(toeplitzness(&m).unwrap());
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        assert!(scores.iter().all(|&s| s < 0.2));
        assert!((mean - 2.0 / 65.0).abs() < 0.005, "{mean}");
    }

    #[test]
    fn power_law_exact_recovery() {
        let pts: Vec<(f64, f64)> = [1.0f64, 10.0, 100.0].iter().map(|&x| (x, 3.0 * x.powf(-0.5))).collect();
        let fit = fit_power_law(&pts).unwrap();
        assert!((fit.exponent - 0.5).abs() < 1e-9);
        assert!((fit.coefficient - 3.0).abs() < 1e-9);
        let fit = fit_power_law(&[(2.0, 5.0), (8.0, 1.0)]).unwrap();
        assert!(fit.residual < 1e-24);
        assert!((fit.predict(2.0) - 5.0).abs() < 1e-12);
        assert!(fit_power_law(&[(1.0, 1.0)]).is_err());
        assert!(fit_power_law(&[(1.0, 1.0), (0.0, 2.0)]).is_err());
        assert!(fit_power_law(&[(1.0, -1.0), (3.0, 2.0)]).is_err());
    }

    #[test]
    fn points_csv_parsing() {
        let pts = parse_points_csv("params,ppl\n59e6,5.25\n\n102e6, 4.35\n").unwrap();
        assert_eq!(pts, vec![(59e6, 5.25), (102e6, 4.35)]);
        match parse_points_csv("1,2\n3\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let r = parse_points_csv("1,2\n# note\n\nx,y\n"); assert!(matches!(r, Err(Error::Parse { line: 4, .. })), "{r:?}");
        assert_eq!(parse_points_csv("").unwrap(), vec![]);
        assert!(matches!(parse_points_csv("1,2\n3,-1\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn frozen_spatial_stays_zero_and_runs_deterministic() {
        let mut cfg = ModelConfig::micro();
        cfg.num_layers = 1;
        cfg.seq_len = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (store0, model) = build_model::<f64, _>(&cfg, &mut rng).unwrap();
        let mut opts = TrainOptions::for_model(&model, TaskKind::CopyShift(1));
        opts.eval_batch = 4;
        opts.eval_every = 5;
        opts.freeze_spatial = true;
        let tc = TrainConfig::desk(10, 7);
        let mut s1 = store0.clone();
        let log1 = train(&model, &mut s1, &opts, &tc).unwrap();
        let mut s2 = store0.clone();
        let log2 = train(&model, &mut s2, &opts, &tc).unwrap();
        assert_eq!(log1.to_csv(), log2.to_csv());
        assert_eq!(s1, s2);
        let w = s1.tensor("blocks.0.sgu.spatial.weight").unwrap();
        assert!(w.data().iter().all(|&v| v == 0.0));
        assert_eq!(log1.records.len(), 10);
        assert!(log1.to_csv().starts_with(METRICS_HEADER));
    }
}
