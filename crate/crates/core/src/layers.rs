//! Layer primitives recorded on a [`Tape`].
//!
//! Parameters are passed in as tape handles; initialization and naming live
//! in [`crate::models`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::tensor::Scalar;

/// Standard deviation of the spatial weight initialization.
pub const SPATIAL_INIT_STD: f64 = 1e-3;

/// Default head size of the tiny attention module.
pub const DEFAULT_ATTN_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SguVariant {
    /// `s(Z) = f(norm(Z))`
    Linear,
    /// `s(Z) = Z + f(norm(Z))`
    Additive,
    /// `s(Z) = Z ⊙ f(norm(Z))`
    Multiplicative,
    /// `s(Z) = Z₁ ⊙ f(norm(Z₂))` with `Z = Z₁ ‖ Z₂`
    MultiplicativeSplit,
}

impl SguVariant {
    pub const ALL: [SguVariant; 4] = [
        SguVariant::Linear,
        SguVariant::Additive,
        SguVariant::Multiplicative,
        SguVariant::MultiplicativeSplit,
    ];

    /// Channel count entering `f` (and leaving the unit) for an input of `e`
    /// channels.
    pub fn gate_width(self, e: usize) -> usize {
        match self {
            SguVariant::MultiplicativeSplit => e / 2,
            _ => e,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SguVariant::Linear => "linear",
            SguVariant::Additive => "additive",
            SguVariant::Multiplicative => "multiplicative",
            SguVariant::MultiplicativeSplit => "multiplicative_split",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialMode {
    Dense,
    Toeplitz,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gamma: Var,
    pub beta: Var,
}

/// Spatial projection `f(Z) = WZ + b`. In Toeplitz mode `weight` holds the
/// `2n-1` diagonal values; in dense mode the full `n×n` matrix.
#[derive(Debug, Clone, Copy)]
pub struct SpatialWeights {
    pub mode: SpatialMode,
    pub weight: Var,
    pub bias: Var,
    pub n: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SguParams {
    pub norm: NormParams,
    pub spatial: SpatialWeights,
}

/// Fused `q,k,v` projection followed by an output projection. Keys carry no
/// bias: softmax rows are invariant to it.
#[derive(Debug, Clone, Copy)]
pub struct AttnWeights {
    pub qkv_weight: Var,
    pub q_bias: Var,
    pub v_bias: Var,
    pub out_weight: Var,
    pub out_bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct MixerWeights {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn layer_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &NormParams) -> Result<Var> {
    tape.layer_norm(x, p.gamma, p.beta)
}

pub fn gelu<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    tape.gelu(x)
}

/// `X P + bias`.
pub fn channel_proj<T: Scalar>(tape: &mut Tape<T>, x: Var, p: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul(x, p)?;
    tape.add_row_bias(y, bias)
}

/// `W Z + b`, with `b[i]` added to every channel of token `i`. The same `W`
/// mixes every channel.
pub fn spatial_proj<T: Scalar>(tape: &mut Tape<T>, z: Var, sw: &SpatialWeights) -> Result<Var> {
    let rows = tape.shape(z).first().copied().unwrap_or(0);
    if rows != sw.n {
        return Err(invalid(
            "spatial_proj",
            format!("input has {rows} tokens, spatial weights expect {}", sw.n),
        ));
    }
    let w = match sw.mode {
        SpatialMode::Dense => sw.weight,
        SpatialMode::Toeplitz => tape.toeplitz(sw.weight, sw.n)?,
    };
    let y = tape.matmul(w, z)?;
    tape.add_col_bias(y, sw.bias)
}

/// Spatial gating unit. `gate_extra`, when present, is added to the output of
/// the spatial projection before gating (tiny-attention fusion).
pub fn sgu<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    variant: SguVariant,
    p: &SguParams,
    gate_extra: Option<Var>,
) -> Result<Var> {
    let (_, e) = tape.value(z).dims2("sgu")?;
    let (carry, gate_in) = match variant {
        SguVariant::MultiplicativeSplit => {
            if e % 2 != 0 {
                return Err(invalid(
                    "sgu",
                    format!("split variant needs an even channel count, got {e}"),
                ));
            }
            let parts = tape.split_last_axis(z, 2)?;
            (parts[0], parts[1])
        }
        _ => (z, z),
    };
    let normed = layer_norm(tape, gate_in, &p.norm)?;
    let mut gate = spatial_proj(tape, normed, &p.spatial)?;
    if let Some(extra) = gate_extra {
        gate = tape.add(gate, extra)?;
    }
    match variant {
        SguVariant::Linear => Ok(gate),
        SguVariant::Additive => tape.add(carry, gate),
        SguVariant::Multiplicative | SguVariant::MultiplicativeSplit => tape.mul(carry, gate),
    }
}

/// Softmax self-attention with `heads` heads over a fused `q,k,v` projection.
/// Returns the projected output and the per-head attention probabilities.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: &AttnWeights,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let qkv = tape.matmul(x, w.qkv_weight)?;
    let width3 = tape.shape(qkv)[1];
    if width3 % 3 != 0 {
        return Err(invalid("attention", "fused projection width must be a multiple of 3"));
    }
    let width = width3 / 3;
    if heads == 0 || width % heads != 0 {
        return Err(invalid(
            "attention",
            format!("attention width {width} is not divisible by {heads} heads"),
        ));
    }
    let head_dim = width / heads;
    let scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();
    let q_all = tape.slice_cols(qkv, 0, width)?;
    let q_all = tape.add_row_bias(q_all, w.q_bias)?;
    let k_all = tape.slice_cols(qkv, width, width)?;
    let v_all = tape.slice_cols(qkv, 2 * width, width)?;
    let v_all = tape.add_row_bias(v_all, w.v_bias)?;
    let mut mixed = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (q, k, v) = if heads == 1 {
            (q_all, k_all, v_all)
        } else {
            (
                tape.slice_cols(q_all, h * head_dim, head_dim)?,
                tape.slice_cols(k_all, h * head_dim, head_dim)?,
                tape.slice_cols(v_all, h * head_dim, head_dim)?,
            )
        };
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale);
        let a = tape.softmax_rows(scores)?;
        mixed.push(tape.matmul(a, v)?);
        probs.push(a);
    }
    let joined = if heads == 1 {
        mixed[0]
    } else {
        tape.concat_last_axis(&mixed)?
    };
    let out = channel_proj(tape, joined, w.out_weight, w.out_bias)?;
    Ok((out, probs))
}

/// Single-head attention on the normalized block input. No masking and no
/// positional terms.
pub fn tiny_attention<T: Scalar>(tape: &mut Tape<T>, xn: Var, w: &AttnWeights) -> Result<Var> {
    Ok(multi_head_attention(tape, xn, w, 1)?.0)
}

/// Drops the whole residual branch with probability `1 - survival_p` in
/// training (scaling survivors by `1/survival_p`); identity in eval.
pub fn stochastic_depth<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    branch: Var,
    survival_p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if !(survival_p > 0.0 && survival_p <= 1.0) {
        return Err(invalid(
            "stochastic_depth",
            format!("survival probability {survival_p} outside (0, 1]"),
        ));
    }
    if mode == Mode::Eval || survival_p == 1.0 {
        return Ok(branch);
    }
    let keep = rng.gen::<f64>() < survival_p;
    let factor = if keep { 1.0 / survival_p } else { 0.0 };
    Ok(tape.scale(branch, T::from_f64_lossy(factor)))
}

/// Token-mixing MLP: `W2ᵀ gelu(W1ᵀ X + b1) + b2`, mixing along the token axis
/// with hidden width `d_spatial`.
pub fn mixer_token_mlp<T: Scalar>(tape: &mut Tape<T>, x: Var, w: &MixerWeights) -> Result<Var> {
    let w1t = tape.transpose(w.w1)?;
    let h = tape.matmul(w1t, x)?;
    let h = tape.add_col_bias(h, w.b1)?;
    let h = tape.gelu(h);
    let w2t = tape.transpose(w.w2)?;
    let y = tape.matmul(w2t, h)?;
    tape.add_col_bias(y, w.b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Vec<usize>, data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    fn norm_params(tape: &mut Tape<f64>, c: usize, gamma: f64) -> NormParams {
        NormParams {
            gamma: tape.leaf(Tensor::full(vec![c], gamma)),
            beta: tape.leaf(Tensor::zeros(vec![c])),
        }
    }

    fn spatial(tape: &mut Tape<f64>, w: Tensor<f64>, b: Tensor<f64>) -> SpatialWeights {
        let n = b.len();
        SpatialWeights {
            mode: if w.rank() == 2 {
                SpatialMode::Dense
            } else {
                SpatialMode::Toeplitz
            },
            weight: tape.leaf(w),
            bias: tape.leaf(b),
            n,
        }
    }

    #[test]
    fn channel_proj_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![2, 2], &[1., 2., 3., 4.]));
        let eye = tape.leaf(Tensor::eye(2));
        let zero = tape.leaf(Tensor::zeros(vec![2]));
        let y = channel_proj(&mut tape, x, eye, zero).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let z = tape.leaf(Tensor::zeros(vec![3, 2]));
        let b = tape.leaf(t(vec![2], &[0.5, -1.]));
        let y = channel_proj(&mut tape, z, eye, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1., 0.5, -1., 0.5, -1.]);

        // [[1,2],[3,4]] · [[0,1],[2,-1]] + [1, 10] = [[5, 9], [9, 9]]
        let p = tape.leaf(t(vec![2, 2], &[0., 1., 2., -1.]));
        let b = tape.leaf(t(vec![2], &[1., 10.]));
        let y = channel_proj(&mut tape, x, p, b).unwrap();
        assert_eq!(tape.value(y).data(), &[5., 9., 9., 9.]);

        let bad = tape.leaf(Tensor::zeros(vec![3, 2]));
        assert!(channel_proj(&mut tape, x, bad, b).is_err());
    }

    #[test]
    fn spatial_proj_examples() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(vec![2, 3], &[1., 2., 3., 4., 5., 6.]));
        let sw = spatial(&mut tape, Tensor::zeros(vec![2, 2]), Tensor::ones(vec![2]));
        let y = spatial_proj(&mut tape, z, &sw).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 1.0));

        let sw = spatial(&mut tape, Tensor::eye(2), Tensor::zeros(vec![2]));
        let y = spatial_proj(&mut tape, z, &sw).unwrap();
        assert_eq!(tape.value(y), tape.value(z));

        // W = [[1,2],[0,-1]], b = [10, 20]
        // row0 = Z0 + 2 Z1 + 10 = [19, 22, 25]; row1 = -Z1 + 20 = [16, 15, 14]
        let sw = spatial(&mut tape, t(vec![2, 2], &[1., 2., 0., -1.]), t(vec![2], &[10., 20.]));
        let y = spatial_proj(&mut tape, z, &sw).unwrap();
        assert_eq!(tape.value(y).data(), &[19., 22., 25., 16., 15., 14.]);

        // Toeplitz w=[0, 1, 2] -> [[1, 2], [0, 1]]
        let sw = spatial(&mut tape, t(vec![3], &[0., 1., 2.]), Tensor::zeros(vec![2]));
        let y = spatial_proj(&mut tape, z, &sw).unwrap();
        assert_eq!(tape.value(y).data(), &[9., 12., 15., 4., 5., 6.]);

        let sw = spatial(&mut tape, Tensor::zeros(vec![3, 3]), Tensor::ones(vec![3]));
        assert!(spatial_proj(&mut tape, z, &sw).is_err());
    }

    #[test]
    fn sgu_split_at_init_passes_first_half() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(vec![2, 4], &[1., -2., 3., 4., 0.5, 6., -7., 8.]));
        let p = SguParams {
            norm: norm_params(&mut tape, 2, 1.0),
            spatial: spatial(&mut tape, Tensor::zeros(vec![2, 2]), Tensor::ones(vec![2])),
        };
        let y = sgu(&mut tape, z, SguVariant::MultiplicativeSplit, &p, None).unwrap();
        assert_eq!(tape.value(y).data(), &[1., -2., 0.5, 6.]);

        let odd = tape.leaf(Tensor::zeros(vec![2, 3]));
        assert!(sgu(&mut tape, odd, SguVariant::MultiplicativeSplit, &p, None).is_err());
    }

    #[test]
    fn sgu_multiplicative_with_unit_gate_is_identity() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(vec![2, 2], &[1., -2., 3., 4.]));
        let p = SguParams {
            norm: norm_params(&mut tape, 2, 1.0),
            spatial: spatial(&mut tape, Tensor::zeros(vec![2, 2]), Tensor::ones(vec![2])),
        };
        let y = sgu(&mut tape, z, SguVariant::Multiplicative, &p, None).unwrap();
        assert_eq!(tape.value(y), tape.value(z));
    }

    #[test]
    fn sgu_additive_with_zero_gate_is_identity() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(vec![2, 2], &[1., -2., 3., 4.]));
        let p = SguParams {
            norm: norm_params(&mut tape, 2, 0.0),
            spatial: spatial(&mut tape, Tensor::zeros(vec![2, 2]), Tensor::zeros(vec![2])),
        };
        let y = sgu(&mut tape, z, SguVariant::Additive, &p, None).unwrap();
        assert_eq!(tape.value(y), tape.value(z));
        let lin = sgu(&mut tape, z, SguVariant::Linear, &p, None).unwrap();
        assert!(tape.value(lin).data().iter().all(|&v| v == 0.0));
    }

    fn attn_weights(tape: &mut Tape<f64>, d: usize, a: usize, out: usize, seed: u64) -> AttnWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rand = |shape: Vec<usize>| Tensor::from_fn(shape, |_| rng.gen_range(-0.5..0.5));
        AttnWeights {
            qkv_weight: tape.leaf(rand(vec![d, 3 * a])),
            q_bias: tape.leaf(rand(vec![a])),
            v_bias: tape.leaf(rand(vec![a])),
            out_weight: tape.leaf(rand(vec![a, out])),
            out_bias: tape.leaf(rand(vec![out])),
        }
    }

    #[test]
    fn tiny_attention_single_token() {
        let mut tape = Tape::new();
        let w = attn_weights(&mut tape, 3, 2, 4, 1);
        let x = tape.leaf(t(vec![1, 3], &[0.3, -0.2, 0.9]));
        let y = tiny_attention(&mut tape, x, &w).unwrap();
        // v = x Wqkv[:, 4..6] + bv; out = v Wo + bo
        let xv = tape.value(x).clone();
        let qkv = xv.matmul(tape.value(w.qkv_weight)).unwrap();
        let v = qkv.slice_cols(4, 2).unwrap().add_row_bias(tape.value(w.v_bias)).unwrap();
        let expected = v
            .matmul(tape.value(w.out_weight))
            .unwrap()
            .add_row_bias(tape.value(w.out_bias))
            .unwrap();
        for (a, b) in tape.value(y).data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn tiny_attention_identical_tokens_and_permutation() {
        let mut tape = Tape::new();
        let w = attn_weights(&mut tape, 4, 3, 2, 2);
        let x = tape.leaf(t(vec![2, 4], &[0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4]));
        let y = tiny_attention(&mut tape, x, &w).unwrap();
        assert_eq!(tape.value(y).row(0), tape.value(y).row(1));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = Tensor::from_fn(vec![5, 4], |_| rng.gen_range(-1.0..1.0));
        let perm = [3usize, 0, 4, 1, 2];
        let x = tape.leaf(xs.clone());
        let xp = tape.leaf(xs.gather_rows(&perm).unwrap());
        let y = tiny_attention(&mut tape, x, &w).unwrap();
        let yp = tiny_attention(&mut tape, xp, &w).unwrap();
        let expected = tape.value(y).gather_rows(&perm).unwrap();
        for (a, b) in tape.value(yp).data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut tape = Tape::new();
        let w = attn_weights(&mut tape, 4, 6, 4, 2);
        let x = tape.leaf(Tensor::zeros(vec![2, 4]));
        assert!(multi_head_attention(&mut tape, x, &w, 4).is_err());
        let (_, probs) = multi_head_attention(&mut tape, x, &w, 3).unwrap();
        for p in probs {
            for r in 0..2 {
                assert!((tape.value(p).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn stochastic_depth_modes() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = tape.leaf(t(vec![1, 2], &[1., 2.]));
        for mode in [Mode::Train, Mode::Eval] {
            let y = stochastic_depth(&mut tape, x, 1.0, mode, &mut rng).unwrap();
            assert_eq!(y, x);
        }
        let before = rng.clone();
        let y = stochastic_depth(&mut tape, x, 0.3, Mode::Eval, &mut rng).unwrap();
        assert_eq!(y, x);
        assert_eq!(rng, before, "eval mode must not consume randomness");
        for p in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(stochastic_depth(&mut tape, x, p, Mode::Train, &mut rng).is_err());
        }
    }

    #[test]
    fn stochastic_depth_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples = 100_000;
        let mut total = 0.0;
        for _ in 0..samples {
            let mut tape = Tape::new();
            let x = tape.leaf(t(vec![1], &[3.0]));
            let y = stochastic_depth(&mut tape, x, 0.5, Mode::Train, &mut rng).unwrap();
            total += tape.value(y).data()[0];
        }
        let mean = total / samples as f64;
        assert!((mean - 3.0).abs() / 3.0 < 0.02, "mean {mean}");
    }

    #[test]
    fn mixer_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![2, 3], &[1., 2., 3., 4., 5., 6.]));
        let w = MixerWeights {
            w1: tape.leaf(Tensor::zeros(vec![2, 4])),
            b1: tape.leaf(Tensor::zeros(vec![4])),
            w2: tape.leaf(Tensor::zeros(vec![4, 2])),
            b2: tape.leaf(Tensor::zeros(vec![2])),
        };
        let y = mixer_token_mlp(&mut tape, x, &w).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        // n=2, d_spatial=1: W1 = [[1],[-1]], b1 = [0.5], W2 = [[2, 3]], b2 = [0, 1]
        // h_c = gelu(x0c - x1c + 0.5); y0c = 2 h_c, y1c = 3 h_c + 1
        let w = MixerWeights {
            w1: tape.leaf(t(vec![2, 1], &[1., -1.])),
            b1: tape.leaf(t(vec![1], &[0.5])),
            w2: tape.leaf(t(vec![1, 2], &[2., 3.])),
            b2: tape.leaf(t(vec![2], &[0., 1.])),
        };
        let y = mixer_token_mlp(&mut tape, x, &w).unwrap();
        let h = crate::tensor::gelu_scalar(-2.5f64);
        for c in 0..3 {
            assert!((tape.value(y).get2(0, c) - 2.0 * h).abs() < 1e-15);
            assert!((tape.value(y).get2(1, c) - (3.0 * h + 1.0)).abs() < 1e-15);
        }
    }
}
