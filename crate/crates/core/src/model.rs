//! The dVAE: encoder and decoder parameters in one store, plus the batched
//! training objective on a tape.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::decoder::{decode_prefixes, DecoderParams};
use crate::encoder::{encode_batch, encode_hard_full, EncoderParams, EncoderVars, MessageMode};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::objective::{PriorConfig, RECON_LENGTH_WEIGHT};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding dimensionality.
    pub dim: usize,
    /// Encoder hidden width.
    pub hidden: usize,
    /// Maximum message length `T`.
    pub max_len: usize,
    /// Vocabulary size `V`.
    pub vocab: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub ffn_hidden: usize,
    pub init_std: f64,
    /// `false` trains a fixed-length model: every message has length `T` and
    /// only the full prefix is reconstructed.
    pub varlen: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("hidden", self.hidden),
            ("max_len", self.max_len),
            ("vocab", self.vocab),
            ("model_dim", self.model_dim),
            ("ffn_hidden", self.ffn_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(format!("init_std must be finite and >= 0, got {}", self.init_std)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DvaeModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

/// Batch-mean loss terms on a tape, each `1 × 1`.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub recon: Var,
    pub vocab: Var,
    pub length: Var,
    pub total: Var,
    pub expected_len: Var,
}

/// Per-row loss components (`B × 1` each) before batch averaging.
#[derive(Debug, Clone, Copy)]
pub struct RowLosses {
    pub recon: Var,
    pub vocab: Var,
    pub length: Var,
    pub total: Var,
    pub expected_len: Var,
}

impl DvaeModel {
    /// Fresh parameters drawn from the `init` stream of `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = stream(seed, Stream::Init);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::new(&mut store, &cfg, &mut rng);
        let decoder = DecoderParams::new(&mut store, &cfg, &mut rng);
        Self { cfg, store, encoder, decoder }
    }

    /// Rebuilds handles for `cfg` and swaps in stored values.
    pub fn from_values(cfg: ModelConfig, values: Vec<Array2<f64>>) -> Result<Self> {
        let mut model = Self::new(cfg, 0);
        if values.len() != model.store.len() {
            return Err(Error::ShapeMismatch(format!("{} tensors for a model with {}", values.len(), model.store.len())));
        }
        for (slot, v) in model.store.values_mut().iter_mut().zip(values) {
            if slot.dim() != v.dim() {
                return Err(Error::ShapeMismatch(format!("tensor {:?} vs expected {:?}", v.dim(), slot.dim())));
            }
            *slot = v;
        }
        Ok(model)
    }

    /// Encoder, decoder and per-row loss terms for a batch.
    pub fn forward_rows(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Array2<f64>,
        mode: &MessageMode<'_>,
        prior: &PriorConfig,
        beta: Option<f64>,
    ) -> Result<(EncoderVars, Vec<Var>, RowLosses)> {
        if x.ncols() != self.cfg.dim {
            return Err(Error::ShapeMismatch(format!("embedding dim {} vs model dim {}", x.ncols(), self.cfg.dim)));
        }
        let xv = tape.constant(x.clone());
        let enc = encode_batch(tape, store, &self.encoder, xv, mode)?;
        let recon_out = decode_prefixes(tape, store, &self.decoder, &enc.messages)?;
        let rows = row_losses(tape, xv, &enc, &recon_out, prior, beta, self.cfg.varlen);
        if !tape.value(rows.total).iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalOverflow { step: self.cfg.max_len });
        }
        Ok((enc, recon_out, rows))
    }

    /// Batch-summed loss scaled by `1 / denom`, so chunks of one batch can be
    /// accumulated into the batch mean.
    pub fn forward_loss(
        &self,
        tape: &mut Tape,
        x: &Array2<f64>,
        mode: &MessageMode<'_>,
        prior: &PriorConfig,
        beta: Option<f64>,
        denom: f64,
    ) -> Result<LossVars> {
        let (_, _, rows) = self.forward_rows(tape, &self.store, x, mode, prior, beta)?;
        let mut reduce = |v: Var| {
            let s = tape.sum(v);
            tape.scale(s, 1.0 / denom)
        };
        Ok(LossVars {
            recon: reduce(rows.recon),
            vocab: reduce(rows.vocab),
            length: reduce(rows.length),
            total: reduce(rows.total),
            expected_len: reduce(rows.expected_len),
        })
    }

    /// Greedy hard codes: full `T`-token paths with inferred lengths.
    pub fn encode_hard_full(&self, x: &Array2<f64>) -> Result<Vec<(Vec<u32>, usize)>> {
        let mut out = encode_hard_full(&self.store, &self.encoder, x)?;
        if !self.cfg.varlen {
            for (_, len) in out.iter_mut() {
                *len = self.cfg.max_len;
            }
        }
        Ok(out)
    }
}

/// Per-row terms of the objective.
///
/// `recon = Σ_t q̃[t] · ‖x - x̂_t‖²` with `q̃ = 0.9 q_L + 0.1 / T`;
/// `vocab = Σ_t a[t] · max(0, log V - H_t - δ)`;
/// `length = λ E[L] - H(q_L)`; `total = recon + β (vocab + length)`.
/// In fixed-length mode `q_L` is the point mass at `T`, there is no length
/// term and only `x̂_T` is reconstructed.
pub fn row_losses(
    tape: &mut Tape,
    x: Var,
    enc: &EncoderVars,
    recon_out: &[Var],
    prior: &PriorConfig,
    beta: Option<f64>,
    varlen: bool,
) -> RowLosses {
    let t_max = recon_out.len();
    let batch = tape.value(x).nrows();

    let errs: Vec<Var> = recon_out
        .iter()
        .map(|&xh| {
            let d = tape.sub(x, xh);
            let sq = tape.mul(d, d);
            tape.sum_rows(sq)
        })
        .collect();
    let err = tape.concat_cols(&errs);

    let positions = tape.constant(Array2::from_shape_fn((t_max, 1), |(t, _)| (t + 1) as f64));
    let (recon, alive, length, expected_len) = if varlen {
        let q = enc.length_posterior;
        let smoothed = tape.scale(q, RECON_LENGTH_WEIGHT);
        let smoothed = tape.add_scalar(smoothed, (1.0 - RECON_LENGTH_WEIGHT) / t_max as f64);
        let weighted = tape.mul(smoothed, err);
        let recon = tape.sum_rows(weighted);

        let expected_len = tape.matmul(q, positions);
        let logq = tape.log_softmax(enc.length_logits);
        let qlogq = tape.mul(q, logq);
        let neg_entropy = tape.sum_rows(qlogq);
        let len_cost = tape.scale(expected_len, prior.lambda);
        let length = tape.add(len_cost, neg_entropy);
        (recon, enc.alive, length, expected_len)
    } else {
        let recon = errs[t_max - 1];
        let alive = tape.constant(Array2::ones((batch, t_max)));
        let length = tape.constant(Array2::zeros((batch, 1)));
        let expected_len = tape.constant(Array2::from_elem((batch, 1), t_max as f64));
        (recon, alive, length, expected_len)
    };

    let log_v = (prior.vocab as f64).ln();
    let kls: Vec<Var> = enc
        .token_logits
        .iter()
        .map(|&logits| {
            let p = tape.softmax(logits);
            let lp = tape.log_softmax(logits);
            let plp = tape.mul(p, lp);
            // Σ p log p = -H, so KL to uniform = log V + Σ p log p
            let neg_h = tape.sum_rows(plp);
            let kl = tape.add_scalar(neg_h, log_v - prior.free_bits);
            tape.relu(kl)
        })
        .collect();
    let kl = tape.concat_cols(&kls);
    let alive_kl = tape.mul(alive, kl);
    let vocab = tape.sum_rows(alive_kl);

    let total = match beta {
        Some(b) => {
            let reg = tape.add(vocab, length);
            let reg = tape.scale(reg, b);
            tape.add(recon, reg)
        }
        None => recon,
    };
    RowLosses { recon, vocab, length, total, expected_len }
}
