//! Causal prefix decoder.
//!
//! The input sequence is `bos, m_1, …, m_S`; the output read at position
//! `t` (1-based, after `bos`) has seen exactly the prefix `m_1..m_t`, so a
//! single pass yields reconstructions for every prefix length.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::encoder::RMS_EPS;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{normal_matrix, Linear, ParamId, ParamStore, Projection};

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub query: Projection,
    pub key: Projection,
    pub value: Projection,
    pub out: Projection,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    /// `V × model_dim`, consumed as `mᵀ · table`.
    pub input_embed: ParamId,
    pub bos: ParamId,
    /// Learned absolute positions, `(T + 1) × model_dim`.
    pub positions: ParamId,
    pub blocks: Vec<Block>,
    pub output_head: Linear,
    pub max_len: usize,
    pub model_dim: usize,
}

impl DecoderParams {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, std) = (cfg.model_dim, cfg.init_std);
        let input_embed = store.add("dec.input_embed", normal_matrix(rng, cfg.vocab, d, std));
        let bos = store.add("dec.bos", normal_matrix(rng, 1, d, std));
        let positions = store.add("dec.positions", normal_matrix(rng, cfg.max_len + 1, d, std));
        let blocks = (0..cfg.n_layers)
            .map(|l| Block {
                query: Projection::new(store, &format!("dec.{l}.query"), d, d, std, rng),
                key: Projection::new(store, &format!("dec.{l}.key"), d, d, std, rng),
                value: Projection::new(store, &format!("dec.{l}.value"), d, d, std, rng),
                out: Projection::new(store, &format!("dec.{l}.out"), d, d, std, rng),
                ff_in: Linear::new(store, &format!("dec.{l}.ff_in"), d, cfg.ffn_hidden, std, rng),
                ff_out: Linear::new(store, &format!("dec.{l}.ff_out"), cfg.ffn_hidden, d, std, rng),
            })
            .collect();
        let output_head = Linear::new(store, "dec.output_head", d, cfg.dim, std, rng);
        Self { input_embed, bos, positions, blocks, output_head, max_len: cfg.max_len, model_dim: d }
    }
}

/// Decodes `messages` (each `B × V`) and returns `x̂_1..x̂_S`, each `B × dim`
/// with unit-norm rows. `S` may be anything in `1..=T`.
pub fn decode_prefixes(tape: &mut Tape, store: &ParamStore, params: &DecoderParams, messages: &[Var]) -> Result<Vec<Var>> {
    let steps = messages.len();
    if steps == 0 || steps > params.max_len {
        return Err(Error::ShapeMismatch(format!("{steps} messages for max length {}", params.max_len)));
    }
    let vocab = store.value(params.input_embed).nrows();
    let batch = tape.value(messages[0]).nrows();
    for &m in messages {
        if tape.value(m).dim() != (batch, vocab) {
            return Err(Error::ShapeMismatch(format!("message {:?}, expected ({batch}, {vocab})", tape.value(m).dim())));
        }
    }
    let len = steps + 1;
    let table = tape.param(store, params.input_embed);
    let bos = tape.param(store, params.bos);
    let pos = tape.param(store, params.positions);

    let mut inputs = Vec::with_capacity(len);
    let zeros = tape.constant(Array2::zeros((batch, params.model_dim)));
    let start = tape.add(zeros, bos);
    let p0 = tape.select_step(pos, 0, params.max_len + 1);
    inputs.push(tape.add(start, p0));
    for (s, &m) in messages.iter().enumerate() {
        let e = tape.matmul(m, table);
        let p = tape.select_step(pos, s + 1, params.max_len + 1);
        inputs.push(tape.add(e, p));
    }
    let mut x = tape.interleave(&inputs);

    for block in &params.blocks {
        let n = tape.rms_norm(x, RMS_EPS);
        let q = block.query.forward(tape, store, n);
        let k = block.key.forward(tape, store, n);
        let v = block.value.forward(tape, store, n);
        let a = tape.causal_attention(q, k, v, len);
        let a = block.out.forward(tape, store, a);
        x = tape.add(x, a);
        let n = tape.rms_norm(x, RMS_EPS);
        let f = block.ff_in.forward(tape, store, n);
        let f = tape.relu_sq(f);
        let f = block.ff_out.forward(tape, store, f);
        x = tape.add(x, f);
    }
    let n = tape.rms_norm(x, RMS_EPS);
    let y = params.output_head.forward(tape, store, n);
    let y = tape.l2_normalize(y);
    Ok((1..len).map(|s| tape.select_step(y, s, len)).collect())
}

/// `Σ_i (x_i - x̂_i)^2`; equals `2 - 2 cos` for unit vectors.
pub fn reconstruction_error(x: &[f64], x_hat: &[f64]) -> f64 {
    x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Decodes a batch of plain simplex points; `messages[t]` is `B × V`.
pub fn decode_values(store: &ParamStore, params: &DecoderParams, messages: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = messages.iter().map(|m| tape.constant(m.clone())).collect();
    let out = decode_prefixes(&mut tape, store, params, &vars)?;
    Ok(out.into_iter().map(|v| tape.value(v).clone()).collect())
}
