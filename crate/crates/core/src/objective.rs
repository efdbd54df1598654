//! Loss terms, priors, free bits and the temperature / KL-weight schedules.
//!
//! The functions here work on plain values for one item. The batched tape
//! version used in training lives in [`crate::model::row_losses`]; tests
//! check the two against each other.

use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::decoder::reconstruction_error;
use crate::encoder::{softmax, EncoderOutput, MessageMode};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::DvaeModel;

/// Weight of `q_L` in the reconstruction mixture; the rest is uniform.
pub const RECON_LENGTH_WEIGHT: f64 = 0.9;

/// Largest `V^T` the enumeration oracle accepts.
pub const ENUMERATION_LIMIT: u128 = 4096;

/// Length prior and vocabulary settings. The geometric stopping
/// probability `α` is carried as the equivalent length cost `λ = -ln(1 - α)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub lambda: f64,
    pub max_len: usize,
    pub vocab: usize,
    /// Free-bits threshold `δ`.
    pub free_bits: f64,
}

impl PriorConfig {
    pub fn from_lambda(lambda: f64, max_len: usize, vocab: usize, free_bits: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("length cost must be finite and >= 0, got {lambda}")));
        }
        if !(free_bits >= 0.0) {
            return Err(Error::InvalidArgument(format!("free-bits threshold must be >= 0, got {free_bits}")));
        }
        Ok(Self { lambda, max_len, vocab, free_bits })
    }

    pub fn from_alpha(alpha: f64, max_len: usize, vocab: usize, free_bits: f64) -> Result<Self> {
        Self::from_lambda(lambda_from_alpha(alpha)?, max_len, vocab, free_bits)
    }

    /// Stopping probability; `None` when `λ = 0` (the uniform-length limit).
    pub fn alpha(&self) -> Option<f64> {
        (self.lambda > 0.0).then(|| alpha_from_lambda(self.lambda))
    }
}

pub fn lambda_from_alpha(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidPrior(alpha));
    }
    Ok(-(-alpha).ln_1p())
}

pub fn alpha_from_lambda(lambda: f64) -> f64 {
    -(-lambda).exp_m1()
}

/// Truncated geometric `p(L) = (1-α)^{L-1} α / (1 - (1-α)^T)`, `L = 1..T`.
pub fn geometric_prior(alpha: f64, max_len: usize) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidPrior(alpha));
    }
    if max_len == 0 {
        return Err(Error::InvalidArgument("max length must be >= 1".into()));
    }
    let keep = 1.0 - alpha;
    let z = 1.0 - keep.powi(max_len as i32);
    Ok((0..max_len).map(|l| keep.powi(l as i32) * alpha / z).collect())
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// `q̃ = 0.9 q + 0.1 / T`.
pub fn smoothed_length(q: &[f64]) -> Vec<f64> {
    let t = q.len() as f64;
    q.iter().map(|v| RECON_LENGTH_WEIGHT * v + (1.0 - RECON_LENGTH_WEIGHT) / t).collect()
}

/// `Σ_t q̃[t] · err_t` over precomputed per-prefix errors.
pub fn weighted_prefix_error(errors: &[f64], q: &[f64]) -> f64 {
    smoothed_length(q).iter().zip(errors).map(|(w, e)| w * e).sum()
}

/// Prefix-weighted reconstruction of `x` from `x̂_1..x̂_T` (rows of `x_hat`).
pub fn reconstruction_loss(x: &[f64], x_hat: &Array2<f64>, q: &[f64]) -> f64 {
    let errors: Vec<f64> = x_hat.rows().into_iter().map(|r| reconstruction_error(x, r.as_slice().unwrap())).collect();
    weighted_prefix_error(&errors, q)
}

/// `KL(softmax(ℓ) ‖ Uniform(V)) = log V - H`.
pub fn kl_to_uniform(logits: &[f64]) -> f64 {
    (logits.len() as f64).ln() - entropy(&softmax(logits))
}

/// `Σ_t a[t] · max(0, KL_t - δ)`; rows of `token_logits` are steps.
pub fn vocab_regularizer(token_logits: &Array2<f64>, alive: &[f64], vocab: usize, free_bits: f64) -> f64 {
    debug_assert_eq!(token_logits.ncols(), vocab);
    token_logits
        .rows()
        .into_iter()
        .zip(alive)
        .map(|(row, a)| a * (kl_to_uniform(&row.to_vec()) - free_bits).max(0.0))
        .sum()
}

pub fn expected_length(q: &[f64]) -> f64 {
    q.iter().enumerate().map(|(t, p)| (t + 1) as f64 * p).sum()
}

/// `λ E[L] - H(q_L)`.
pub fn length_regularizer(q: &[f64], lambda: f64) -> f64 {
    lambda * expected_length(q) - entropy(q)
}

/// `KL(q_L ‖ p_L)` with the prior's normalising constant kept; the uniform
/// prior stands in for `λ = 0`.
pub fn length_kl(q: &[f64], prior: &PriorConfig) -> Result<f64> {
    let p = match prior.alpha() {
        Some(alpha) => geometric_prior(alpha, q.len())?,
        None => vec![1.0 / q.len() as f64; q.len()],
    };
    Ok(q.iter().zip(&p).filter(|(&a, _)| a > 0.0).map(|(a, b)| a * (a / b).ln()).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub vocab_reg: f64,
    pub length_reg: f64,
    pub total: f64,
    pub tau: f64,
    pub beta: f64,
    pub lambda: f64,
}

/// Assembles the objective for one item from encoder and decoder outputs
/// (`decoded` rows are `x̂_1..x̂_T`).
pub fn total_loss(
    x: &[f64],
    enc: &EncoderOutput,
    decoded: &Array2<f64>,
    prior: &PriorConfig,
    tau: f64,
    beta: f64,
) -> LossBreakdown {
    let recon = reconstruction_loss(x, decoded, &enc.length_posterior);
    let vocab_reg = vocab_regularizer(&enc.token_logits, &enc.alive, prior.vocab, prior.free_bits);
    let length_reg = length_regularizer(&enc.length_posterior, prior.lambda);
    LossBreakdown {
        recon,
        vocab_reg,
        length_reg,
        total: recon + beta * (vocab_reg + length_reg),
        tau,
        beta,
        lambda: prior.lambda,
    }
}

/// Linear from 1 at step 0 to `τ_min` at `total_steps`, then flat.
pub fn tau_schedule(step: usize, total_steps: usize, tau_min: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return tau_min;
    }
    1.0 + (tau_min - 1.0) * step as f64 / total_steps as f64
}

/// Cosine ramp from 0 at step 0 to `β_max` at `warmup_steps`, then flat.
pub fn beta_schedule(step: usize, warmup_steps: usize, beta_max: f64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        return beta_max;
    }
    beta_max * (1.0 - (PI * step as f64 / warmup_steps as f64).cos()) / 2.0
}

/// Exact expectations over every hard trajectory of a tiny model.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboEnumeration {
    /// `E_q[total loss]` with the training surrogate (smoothed recon, free bits).
    pub expected_loss: f64,
    pub expected_recon: f64,
    pub expected_vocab: f64,
    pub expected_length: f64,
    /// `E_q[Σ_t a_t KL_t + KL(q_L ‖ p_L)]` with no free bits and the prior
    /// constant retained.
    pub kl: f64,
    pub trajectories: usize,
}

/// All `V^T` token sequences in lexicographic order.
pub fn all_token_sequences(vocab: usize, max_len: usize) -> Result<Vec<Vec<u32>>> {
    let size = (vocab as u128).checked_pow(max_len as u32).unwrap_or(u128::MAX);
    if size > ENUMERATION_LIMIT {
        return Err(Error::EnumerationTooLarge { size, limit: ENUMERATION_LIMIT });
    }
    Ok((0..size as usize)
        .map(|mut code| {
            let mut seq = vec![0u32; max_len];
            for slot in seq.iter_mut().rev() {
                *slot = (code % vocab) as u32;
                code /= vocab;
            }
            seq
        })
        .collect())
}

/// Probability of each forced trajectory under `q(z|x) = Π_t softmax(ℓ_t)[z_t]`
/// together with the per-trajectory loss terms, from one batched pass.
pub(crate) fn trajectory_terms(
    x: &[f64],
    model: &DvaeModel,
    prior: &PriorConfig,
    beta: f64,
    sequences: &[Vec<u32>],
) -> Result<(Vec<f64>, Vec<[f64; 5]>)> {
    let rows = sequences.len();
    let xb = Array2::from_shape_fn((rows, x.len()), |(_, j)| x[j]);
    let mut tape = Tape::new();
    let (enc, _, losses) =
        model.forward_rows(&mut tape, &model.store, &xb, &MessageMode::Forced(sequences), prior, Some(beta))?;
    let no_free_bits = PriorConfig { free_bits: 0.0, ..*prior };
    let mut probs = Vec::with_capacity(rows);
    let mut terms = Vec::with_capacity(rows);
    for (r, seq) in sequences.iter().enumerate() {
        let mut p = 1.0;
        let mut logits = Array2::zeros((seq.len(), model.cfg.vocab));
        for (t, &tok) in seq.iter().enumerate() {
            let row = tape.value(enc.token_logits[t]).row(r).to_vec();
            p *= softmax(&row)[tok as usize];
            logits.row_mut(t).assign(&ndarray::ArrayView1::from(&row));
        }
        let q = tape.value(enc.length_posterior).row(r).to_vec();
        let alive = tape.value(enc.alive).row(r).to_vec();
        let kl = if model.cfg.varlen {
            vocab_regularizer(&logits, &alive, model.cfg.vocab, 0.0) + length_kl(&q, &no_free_bits)?
        } else {
            vocab_regularizer(&logits, &vec![1.0; seq.len()], model.cfg.vocab, 0.0)
        };
        probs.push(p);
        terms.push([
            tape.value(losses.total)[[r, 0]],
            tape.value(losses.recon)[[r, 0]],
            tape.value(losses.vocab)[[r, 0]],
            tape.value(losses.length)[[r, 0]],
            kl,
        ]);
    }
    Ok((probs, terms))
}

/// Exact expectation of the hard-sample objective by enumerating every
/// trajectory. Only feasible for `V^T <= 4096`.
pub fn elbo_enumeration_oracle(x: &[f64], model: &DvaeModel, prior: &PriorConfig, beta: f64) -> Result<ElboEnumeration> {
    let sequences = all_token_sequences(model.cfg.vocab, model.cfg.max_len)?;
    let (probs, terms) = trajectory_terms(x, model, prior, beta, &sequences)?;
    let mut acc = [0.0; 5];
    for (p, t) in probs.iter().zip(&terms) {
        for k in 0..5 {
            acc[k] += p * t[k];
        }
    }
    Ok(ElboEnumeration {
        expected_loss: acc[0],
        expected_recon: acc[1],
        expected_vocab: acc[2],
        expected_length: acc[3],
        kl: acc[4],
        trajectories: sequences.len(),
    })
}
