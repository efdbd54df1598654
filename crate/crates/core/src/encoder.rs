//! Residual soft-quantization encoder.
//!
//! At each step the current hidden state produces token logits; a relaxed
//! (or hard) message selects an expected codeword which is subtracted from
//! the state before a parameter-free RMSNorm. The states seen by the token
//! heads double as stop-features for the length head.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{normal_matrix, Linear, ParamId, ParamStore};

pub const RMS_EPS: f64 = 1e-8;
const GUMBEL_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub backbone: [Linear; 2],
    /// `C_t`, `V × hidden`, for `t = 1..T-1`.
    pub codebooks: Vec<ParamId>,
    /// `γ_t` as `1 × 1` matrices, for `t = 1..T-1`.
    pub log_scales: Vec<ParamId>,
    pub token_heads: Vec<Linear>,
    pub length_head: Vec<Linear>,
    pub max_len: usize,
    pub vocab: usize,
    pub hidden: usize,
}

impl EncoderParams {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (t, v, h, std) = (cfg.max_len, cfg.vocab, cfg.hidden, cfg.init_std);
        let backbone = [
            Linear::new(store, "enc.backbone.0", cfg.dim, h, std, rng),
            Linear::new(store, "enc.backbone.1", h, h, std, rng),
        ];
        let mut codebooks = Vec::new();
        let mut log_scales = Vec::new();
        for step in 0..t.saturating_sub(1) {
            codebooks.push(store.add(format!("enc.codebook.{step}"), normal_matrix(rng, v, h, std)));
            log_scales.push(store.add(format!("enc.log_scale.{step}"), Array2::zeros((1, 1))));
        }
        let token_heads = (0..t).map(|s| Linear::new(store, &format!("enc.token_head.{s}"), h, v, std, rng)).collect();
        let length_head = (0..t).map(|s| Linear::new(store, &format!("enc.length_head.{s}"), h, 1, std, rng)).collect();
        Self { backbone, codebooks, log_scales, token_heads, length_head, max_len: t, vocab: v, hidden: h }
    }

    /// Checks shapes against `(T, V, hidden)` and that every entry is finite.
    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        let bad = |what: String| Err(Error::ShapeMismatch(what));
        if self.codebooks.len() + 1 != self.max_len.max(1) || self.log_scales.len() != self.codebooks.len() {
            return bad(format!("{} codebooks for T = {}", self.codebooks.len(), self.max_len));
        }
        if self.token_heads.len() != self.max_len || self.length_head.len() != self.max_len {
            return bad("head count differs from T".into());
        }
        for &c in &self.codebooks {
            if store.value(c).dim() != (self.vocab, self.hidden) {
                return bad(format!("codebook shape {:?}", store.value(c).dim()));
            }
        }
        for head in &self.token_heads {
            if head.inputs(store) != self.hidden || head.outputs(store) != self.vocab {
                return bad("token head shape".into());
            }
        }
        for head in &self.length_head {
            if head.inputs(store) != self.hidden || head.outputs(store) != 1 {
                return bad("length head shape".into());
            }
        }
        let ids = self.backbone.iter().flat_map(|l| [l.weight, l.bias]).chain(self.codebooks.iter().copied());
        for id in ids.chain(self.log_scales.iter().copied()) {
            if !store.value(id).iter().all(|x| x.is_finite()) {
                return Err(Error::NumericalOverflow { step: 0 });
            }
        }
        Ok(())
    }
}

/// How message vectors are formed from token logits.
#[derive(Debug, Clone)]
pub enum MessageMode<'a> {
    /// `softmax((ℓ + g) / τ)` with one `B × V` noise matrix per step.
    Relaxed { tau: f64, gumbels: &'a [Array2<f64>] },
    /// One-hot of `argmax(ℓ + g)`: an exact categorical sample.
    Sampled { gumbels: &'a [Array2<f64>] },
    /// One-hot of `argmax ℓ`, no noise.
    Greedy,
    /// One-hot of the given tokens (`tokens[b][t]`).
    Forced(&'a [Vec<u32>]),
}

/// Tape handles produced by one batched encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub messages: Vec<Var>,
    pub token_logits: Vec<Var>,
    pub stop_features: Vec<Var>,
    /// `B × T`.
    pub length_logits: Var,
    pub length_posterior: Var,
    pub alive: Var,
    /// Chosen token per row and step for the non-relaxed modes.
    pub tokens: Option<Vec<Vec<u32>>>,
}

/// Index of the maximum, ties toward the lower index.
pub fn argmax(xs: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in xs.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

fn one_hot(rows: &[u32], vocab: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), vocab));
    for (r, &tok) in rows.iter().enumerate() {
        m[[r, tok as usize]] = 1.0;
    }
    m
}

fn check_finite(tape: &Tape, v: Var, step: usize) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalOverflow { step })
    }
}

/// Runs the encoder over a batch `x: B × dim` registered on `tape`.
pub fn encode_batch(
    tape: &mut Tape,
    store: &ParamStore,
    params: &EncoderParams,
    x: Var,
    mode: &MessageMode<'_>,
) -> Result<EncoderVars> {
    if let MessageMode::Relaxed { tau, .. } = mode {
        if !(*tau > 0.0) {
            return Err(Error::InvalidTemperature(*tau));
        }
    }
    let batch = tape.value(x).nrows();
    let t_max = params.max_len;
    let v = params.vocab;

    let a = params.backbone[0].forward(tape, store, x);
    let a = tape.relu_sq(a);
    let a = params.backbone[1].forward(tape, store, a);
    let a = tape.relu_sq(a);
    let mut h = tape.rms_norm(a, RMS_EPS);
    check_finite(tape, h, 0)?;

    let mut messages = Vec::with_capacity(t_max);
    let mut token_logits = Vec::with_capacity(t_max);
    let mut stop_features = Vec::with_capacity(t_max);
    let mut chosen: Vec<Vec<u32>> = vec![Vec::with_capacity(t_max); batch];
    let track_tokens = !matches!(mode, MessageMode::Relaxed { .. });

    for t in 0..t_max {
        stop_features.push(h);
        let logits = params.token_heads[t].forward(tape, store, h);
        check_finite(tape, logits, t)?;
        let m = match mode {
            MessageMode::Relaxed { tau, gumbels } => {
                let g = tape.constant(gumbels[t].clone());
                let z = tape.add(logits, g);
                let z = tape.scale(z, 1.0 / tau);
                tape.softmax(z)
            }
            _ => {
                let lv = tape.value(logits);
                let toks: Vec<u32> = (0..batch)
                    .map(|b| match mode {
                        MessageMode::Sampled { gumbels } => {
                            argmax(lv.row(b).iter().zip(gumbels[t].row(b).iter()).map(|(l, g)| l + g)) as u32
                        }
                        MessageMode::Greedy => argmax(lv.row(b).iter().copied()) as u32,
                        MessageMode::Forced(tokens) => tokens[b][t],
                        MessageMode::Relaxed { .. } => unreachable!(),
                    })
                    .collect();
                for (b, &tok) in toks.iter().enumerate() {
                    chosen[b].push(tok);
                }
                tape.constant(one_hot(&toks, v))
            }
        };
        messages.push(m);
        token_logits.push(logits);
        if t + 1 < t_max {
            let c = tape.param(store, params.codebooks[t]);
            let gamma = tape.param(store, params.log_scales[t]);
            let expected = tape.matmul(m, c);
            let s = tape.exp(gamma);
            let scaled = tape.mul(expected, s);
            let r = tape.sub(h, scaled);
            h = tape.rms_norm(r, RMS_EPS);
            check_finite(tape, h, t + 1)?;
        }
    }

    let etas: Vec<Var> = (0..t_max).map(|t| params.length_head[t].forward(tape, store, stop_features[t])).collect();
    let length_logits = tape.concat_cols(&etas);
    let length_posterior = tape.softmax(length_logits);
    let alive = tape.rev_cumsum_cols(length_posterior);
    check_finite(tape, length_posterior, t_max)?;

    Ok(EncoderVars {
        messages,
        token_logits,
        stop_features,
        length_logits,
        length_posterior,
        alive,
        tokens: track_tokens.then_some(chosen),
    })
}

/// Relaxed encoder output for a single item, as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `T × V`, row `t` is `m_t`.
    pub relaxed_messages: Array2<f64>,
    /// `T × V`.
    pub token_logits: Array2<f64>,
    pub length_logits: Vec<f64>,
    pub length_posterior: Vec<f64>,
    pub alive: Vec<f64>,
}

impl EncoderOutput {
    pub(crate) fn from_vars(tape: &Tape, vars: &EncoderVars, row: usize) -> Self {
        let t = vars.messages.len();
        let v = tape.value(vars.token_logits[0]).ncols();
        let mut relaxed_messages = Array2::zeros((t, v));
        let mut token_logits = Array2::zeros((t, v));
        for s in 0..t {
            relaxed_messages.row_mut(s).assign(&tape.value(vars.messages[s]).row(row));
            token_logits.row_mut(s).assign(&tape.value(vars.token_logits[s]).row(row));
        }
        let row_vec = |var: Var| tape.value(var).row(row).to_vec();
        Self {
            relaxed_messages,
            token_logits,
            length_logits: row_vec(vars.length_logits),
            length_posterior: row_vec(vars.length_posterior),
            alive: row_vec(vars.alive),
        }
    }
}

/// Hard semantic identifier: `L` tokens, `1 <= L <= T`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SemanticId {
    pub tokens: Vec<u32>,
}

impl SemanticId {
    pub fn new(tokens: Vec<u32>, max_len: usize) -> Result<Self> {
        if tokens.is_empty() || tokens.len() > max_len {
            return Err(Error::InvalidArgument(format!(
                "semantic id length {} outside 1..={max_len}",
                tokens.len()
            )));
        }
        Ok(Self { tokens })
    }

    pub fn length(&self) -> usize {
        self.tokens.len()
    }
}

/// `-ln(-ln u)` with `u` clamped into `[1e-12, 1 - 1e-12]`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP);
    -(-u.ln()).ln()
}

pub fn sample_gumbel<R: Rng>(count: usize, rng: &mut R) -> Vec<f64> {
    (0..count).map(|_| gumbel_from_uniform(rng.random::<f64>())).collect()
}

/// One `rows × cols` Gumbel matrix per step.
pub fn sample_gumbel_steps<R: Rng>(steps: usize, rows: usize, cols: usize, rng: &mut R) -> Vec<Array2<f64>> {
    (0..steps)
        .map(|_| Array2::from_shape_vec((rows, cols), sample_gumbel(rows * cols, rng)).expect("shape"))
        .collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn gumbel_softmax(logits: &[f64], gumbels: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidTemperature(tau));
    }
    if logits.len() != gumbels.len() {
        return Err(Error::ShapeMismatch(format!("{} logits vs {} gumbels", logits.len(), gumbels.len())));
    }
    let z: Vec<f64> = logits.iter().zip(gumbels).map(|(l, g)| (l + g) / tau).collect();
    Ok(softmax(&z))
}

/// `RMSNorm(h - exp(γ) · mᵀC)` for a single state; `codebook` is `V × H`.
pub fn residual_update(h: &[f64], m: &[f64], codebook: &Array2<f64>, log_scale: f64) -> Result<Vec<f64>> {
    if codebook.dim() != (m.len(), h.len()) {
        return Err(Error::ShapeMismatch(format!(
            "codebook {:?} for message {} and state {}",
            codebook.dim(),
            m.len(),
            h.len()
        )));
    }
    let scale = log_scale.exp();
    let r: Vec<f64> = (0..h.len())
        .map(|j| h[j] - scale * m.iter().enumerate().map(|(k, w)| w * codebook[[k, j]]).sum::<f64>())
        .collect();
    let ms = r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    Ok(r.into_iter().map(|v| v * inv).collect())
}

/// Reverse cumulative sum: `a[t] = Σ_{k >= t} q[k]`.
pub fn alive_from_length(q: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; q.len()];
    let mut acc = 0.0;
    for t in (0..q.len()).rev() {
        acc += q[t];
        out[t] = acc;
    }
    out
}

/// Relaxed encoding of one embedding with freshly drawn noise.
pub fn encode_relaxed<R: Rng>(
    x: &[f64],
    store: &ParamStore,
    params: &EncoderParams,
    tau: f64,
    rng: &mut R,
) -> Result<EncoderOutput> {
    if !(tau > 0.0) {
        return Err(Error::InvalidTemperature(tau));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalOverflow { step: 0 });
    }
    let gumbels = sample_gumbel_steps(params.max_len, 1, params.vocab, rng);
    let mut tape = Tape::new();
    let xv = tape.constant(Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row"));
    let vars = encode_batch(&mut tape, store, params, xv, &MessageMode::Relaxed { tau, gumbels: &gumbels })?;
    Ok(EncoderOutput::from_vars(&tape, &vars, 0))
}

/// Greedy inference for a batch: argmax tokens with hard residual updates,
/// `L = argmax q_L`. Returns the full `T`-token path and the chosen length.
pub fn encode_hard_full(store: &ParamStore, params: &EncoderParams, x: &Array2<f64>) -> Result<Vec<(Vec<u32>, usize)>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalOverflow { step: 0 });
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = encode_batch(&mut tape, store, params, xv, &MessageMode::Greedy)?;
    let q = tape.value(vars.length_posterior);
    let tokens = vars.tokens.expect("greedy mode tracks tokens");
    Ok(tokens
        .into_iter()
        .enumerate()
        .map(|(b, toks)| (toks, argmax(q.row(b).iter().copied()) + 1))
        .collect())
}

pub fn encode_hard(x: &[f64], store: &ParamStore, params: &EncoderParams) -> Result<SemanticId> {
    let batch = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row");
    let (mut toks, len) = encode_hard_full(store, params, &batch)?.remove(0);
    toks.truncate(len);
    SemanticId::new(toks, params.max_len)
}
