//! Sender/receiver trained with policy gradients.
//!
//! The sender is the dVAE encoder with hard sampled tokens; the receiver is
//! the prefix decoder trained by backpropagation on the realized prefix. In
//! variable-length mode the vocabulary gains an end-of-message symbol with
//! index `V`, and a message ends at (and includes) its first occurrence.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::catalog::Catalog;
use crate::checkpoint::{Checkpoint, ModelKind};
use crate::decoder::decode_prefixes;
use crate::encoder::{encode_batch, sample_gumbel_steps, MessageMode};
use crate::error::{Error, Result};
use crate::evaluation::{decode_hard_prefixes, SemanticCoder};
use crate::model::{DvaeModel, ModelConfig};
use crate::nn::ParamStore;
use crate::optim::AdamW;
use crate::rng::{stream, RngState, Stream};
use crate::trainer::{chunk_ranges, thread_pool, DataSource, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReinforceConfig {
    /// Batch, optimizer, architecture, `V`, `T`, seed and threads. The
    /// relaxation and prior fields are unused.
    pub train: TrainConfig,
    pub varlen: bool,
    pub entropy_start: f64,
    pub entropy_end: f64,
    pub length_penalty: f64,
    /// Steps over which both coefficients move to their final values;
    /// half the run when unset.
    pub anneal_steps: Option<usize>,
    pub baseline_decay: f64,
}

impl Default for ReinforceConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            varlen: true,
            entropy_start: 0.03,
            entropy_end: 1e-3,
            length_penalty: 0.02,
            anneal_steps: None,
            baseline_decay: 0.99,
        }
    }
}

impl ReinforceConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::Config(format!("baseline decay must be in [0, 1), got {}", self.baseline_decay)));
        }
        let coefs = [self.entropy_start, self.entropy_end, self.length_penalty];
        if !coefs.iter().all(|c| c.is_finite() && *c >= 0.0) {
            return Err(Error::Config("entropy and length coefficients must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Sender vocabulary: `V`, plus one end symbol in variable-length mode.
    pub fn sender_vocab(&self) -> usize {
        self.train.vocab + usize::from(self.varlen)
    }

    pub fn model_config(&self, dim: usize) -> ModelConfig {
        ModelConfig { vocab: self.sender_vocab(), varlen: self.varlen, ..self.train.model_config(dim) }
    }

    pub fn anneal_steps(&self, total_steps: usize) -> usize {
        self.anneal_steps.unwrap_or(total_steps / 2)
    }

    /// Entropy weight and length penalty at `step`, both linear over the
    /// anneal window and constant afterwards.
    pub fn coefficients(&self, step: usize, total_steps: usize) -> (f64, f64) {
        let window = self.anneal_steps(total_steps);
        let frac = if window == 0 { 1.0 } else { (step as f64 / window as f64).min(1.0) };
        let entropy = self.entropy_start + (self.entropy_end - self.entropy_start) * frac;
        let length = if self.varlen { self.length_penalty * frac } else { 0.0 };
        (entropy, length)
    }
}

/// Exponential moving average seeded with the first observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunningMean {
    pub decay: f64,
    pub value: Option<f64>,
}

impl RunningMean {
    pub fn new(decay: f64) -> Self {
        Self { decay, value: None }
    }

    /// Current estimate, or `fallback` before the first update.
    pub fn get_or(&self, fallback: f64) -> f64 {
        self.value.unwrap_or(fallback)
    }

    pub fn update(&mut self, x: f64) {
        self.value = Some(match self.value {
            None => x,
            Some(v) => self.decay * v + (1.0 - self.decay) * x,
        });
    }
}

/// Realized length: one past the first end symbol, else the full path.
pub fn realized_length(tokens: &[u32], eos: Option<u32>) -> usize {
    eos.and_then(|e| tokens.iter().position(|&t| t == e)).map_or(tokens.len(), |p| p + 1)
}

/// Baselines for the reconstruction, entropy and length signals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Baselines {
    pub recon: RunningMean,
    pub log_prob: RunningMean,
    pub length: RunningMean,
}

impl Baselines {
    fn new(decay: f64) -> Self {
        Self { recon: RunningMean::new(decay), log_prob: RunningMean::new(decay), length: RunningMean::new(decay) }
    }

    fn all(&self) -> [RunningMean; 3] {
        [self.recon, self.log_prob, self.length]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReinforceState {
    pub cfg: ReinforceConfig,
    pub model: DvaeModel,
    pub opt: AdamW,
    pub step: u64,
    pub total_steps: u64,
    pub data_rng: ChaCha8Rng,
    pub gumbel_rng: ChaCha8Rng,
    pub baselines: Baselines,
}

#[derive(Serialize, Deserialize)]
struct StoredConfig {
    reinforce: ReinforceConfig,
    model: ModelConfig,
    total_steps: u64,
}

impl ReinforceState {
    pub fn init(cfg: &ReinforceConfig, dim: usize, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        let mcfg = cfg.model_config(dim);
        mcfg.validate()?;
        let model = DvaeModel::new(mcfg, cfg.train.seed);
        let opt = AdamW::new(cfg.train.adamw(), model.store.values());
        Ok(Self {
            cfg: cfg.clone(),
            model,
            opt,
            step: 0,
            total_steps: total_steps as u64,
            data_rng: stream(cfg.train.seed, Stream::Data),
            gumbel_rng: stream(cfg.train.seed, Stream::Gumbel),
            baselines: Baselines::new(cfg.baseline_decay),
        })
    }

    pub fn eos(&self) -> Option<u32> {
        self.cfg.varlen.then_some(self.cfg.train.vocab as u32)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let stored = StoredConfig { reinforce: self.cfg.clone(), model: self.model.cfg.clone(), total_steps: self.total_steps };
        let extra = self
            .baselines
            .all()
            .iter()
            .flat_map(|b| [f64::from(u8::from(b.value.is_some())), b.value.unwrap_or(0.0)])
            .collect();
        Checkpoint {
            kind: ModelKind::Reinforce,
            config_json: serde_json::to_string(&stored).expect("config serializes"),
            step: self.step,
            rngs: vec![RngState::capture(&self.data_rng), RngState::capture(&self.gumbel_rng)],
            names: self.model.store.names().to_vec(),
            params: self.model.store.values().to_vec(),
            opt_steps: self.opt.t,
            first_moments: self.opt.m.clone(),
            second_moments: self.opt.v.clone(),
            extra,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let corrupt = |msg: String| Error::CorruptCheckpoint(msg);
        if ck.kind != ModelKind::Reinforce {
            return Err(corrupt("not a REINFORCE checkpoint".into()));
        }
        let stored: StoredConfig = serde_json::from_str(&ck.config_json).map_err(|e| corrupt(e.to_string()))?;
        if ck.rngs.len() != 2 || ck.extra.len() != 6 {
            return Err(corrupt("unexpected rng or baseline state".into()));
        }
        let model = DvaeModel::from_values(stored.model, ck.params).map_err(|e| corrupt(e.to_string()))?;
        if ck.names != model.store.names() {
            return Err(corrupt("parameter names differ from the model layout".into()));
        }
        let shapes_ok = |ms: &[Array2<f64>]| {
            ms.len() == model.store.len() && ms.iter().zip(model.store.values()).all(|(a, b)| a.dim() == b.dim())
        };
        if !shapes_ok(&ck.first_moments) || !shapes_ok(&ck.second_moments) {
            return Err(corrupt("optimizer moments do not match parameters".into()));
        }
        let mut opt = AdamW::new(stored.reinforce.train.adamw(), model.store.values());
        opt.m = ck.first_moments;
        opt.v = ck.second_moments;
        opt.t = ck.opt_steps;
        let decay = stored.reinforce.baseline_decay;
        let mean = |i: usize| RunningMean { decay, value: (ck.extra[2 * i] != 0.0).then_some(ck.extra[2 * i + 1]) };
        Ok(Self {
            baselines: Baselines { recon: mean(0), log_prob: mean(1), length: mean(2) },
            cfg: stored.reinforce,
            model,
            opt,
            step: ck.step,
            total_steps: stored.total_steps,
            data_rng: ck.rngs[0].restore(),
            gumbel_rng: ck.rngs[1].restore(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

impl SemanticCoder for ReinforceState {
    fn max_len(&self) -> usize {
        self.model.cfg.max_len
    }

    /// Greedy tokens; the length stops at the first end symbol.
    fn encode_full(&self, x: &Array2<f64>) -> Result<Vec<(Vec<u32>, usize)>> {
        let eos = self.eos();
        Ok(self
            .model
            .encode_hard_full(x)?
            .into_iter()
            .map(|(toks, _)| {
                let len = realized_length(&toks, eos);
                (toks, len)
            })
            .collect())
    }

    fn reconstruct(&self, prefixes: &[Vec<u32>]) -> Result<Array2<f64>> {
        decode_hard_prefixes(&self.model.store, &self.model.decoder, self.model.cfg.vocab, prefixes)
    }
}

/// Batch means at one step, before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReinforceMetrics {
    pub step: u64,
    pub recon: f64,
    /// Mean `-log q(message)`, a one-sample entropy estimate.
    pub entropy: f64,
    pub mean_len: f64,
    pub entropy_coef: f64,
    pub length_coef: f64,
}

impl ReinforceMetrics {
    pub const HEADER: &'static str = "step\trecon\tentropy\tlength\tentropy_coef\tlength_coef";

    pub fn tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.recon, self.entropy, self.mean_len, self.entropy_coef, self.length_coef
        )
    }
}

/// Forward pass of one chunk: the tape plus the pieces the surrogate needs.
pub struct SenderPass {
    pub tape: Tape,
    /// `B × 1` batch-summed receiver loss scaled by `1 / batch`.
    pub receiver_loss: Var,
    /// `B × 1` log-probability of each realized message.
    pub log_prob: Var,
    pub recon: Vec<f64>,
    pub lengths: Vec<usize>,
}

/// Samples messages for `x` and decodes their realized prefixes.
pub fn sender_pass(
    model: &DvaeModel,
    store: &ParamStore,
    x: &Array2<f64>,
    gumbels: &[Array2<f64>],
    eos: Option<u32>,
    denom: f64,
) -> Result<SenderPass> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let enc = encode_batch(&mut tape, store, &model.encoder, xv, &MessageMode::Sampled { gumbels })?;
    let tokens = enc.tokens.as_ref().expect("sampled mode tracks tokens");
    let lengths: Vec<usize> = tokens.iter().map(|t| realized_length(t, eos)).collect();
    let (batch, t_max, vocab) = (x.nrows(), model.cfg.max_len, model.cfg.vocab);

    let x_hat = decode_prefixes(&mut tape, store, &model.decoder, &enc.messages)?;
    let errs: Vec<Var> = x_hat
        .iter()
        .map(|&xh| {
            let d = tape.sub(xv, xh);
            let sq = tape.mul(d, d);
            tape.sum_rows(sq)
        })
        .collect();
    let err = tape.concat_cols(&errs);
    let pick = tape.constant(Array2::from_shape_fn((batch, t_max), |(b, t)| f64::from(u8::from(t + 1 == lengths[b]))));
    let realized = tape.mul(err, pick);
    let per_row = tape.sum_rows(realized);
    let recon = tape.value(per_row).column(0).to_vec();
    let total = tape.sum(per_row);
    let receiver_loss = tape.scale(total, 1.0 / denom);

    let mut log_prob: Option<Var> = None;
    for (t, &logits) in enc.token_logits.iter().enumerate() {
        let mask = Array2::from_shape_fn((batch, vocab), |(b, v)| {
            f64::from(u8::from(t < lengths[b] && tokens[b][t] as usize == v))
        });
        let lp = tape.log_softmax(logits);
        let m = tape.constant(mask);
        let picked = tape.mul(lp, m);
        let row = tape.sum_rows(picked);
        log_prob = Some(match log_prob {
            None => row,
            Some(acc) => tape.add(acc, row),
        });
    }
    let log_prob = log_prob.expect("T >= 1");
    Ok(SenderPass { tape, receiver_loss, log_prob, recon, lengths })
}

/// Adds the policy-gradient surrogate `Σ_b adv_b log q_b / denom` to the
/// receiver loss and backpropagates the sum.
pub fn backward_with_advantages(pass: &mut SenderPass, advantages: &[f64], denom: f64) {
    let tape = &mut pass.tape;
    let adv = tape.constant(Array2::from_shape_vec((advantages.len(), 1), advantages.to_vec()).expect("column"));
    let weighted = tape.mul(adv, pass.log_prob);
    let s = tape.sum(weighted);
    let surrogate = tape.scale(s, 1.0 / denom);
    let total = tape.add(pass.receiver_loss, surrogate);
    tape.backward(total);
}

pub struct ReinforceTrainer {
    pub data: DataSource,
    pub state: ReinforceState,
    pool: rayon::ThreadPool,
}

impl ReinforceTrainer {
    pub fn new(catalog: &Catalog, cfg: &ReinforceConfig) -> Result<Self> {
        let total = cfg.train.total_steps(catalog);
        let state = ReinforceState::init(cfg, catalog.dim(), total)?;
        Self::resume(catalog, state)
    }

    pub fn resume(catalog: &Catalog, state: ReinforceState) -> Result<Self> {
        if catalog.dim() != state.model.cfg.dim {
            return Err(Error::ShapeMismatch(format!("catalog dim {} vs model dim {}", catalog.dim(), state.model.cfg.dim)));
        }
        let data = DataSource::new(catalog, state.cfg.train.sampling)?;
        let pool = thread_pool(state.cfg.train.threads)?;
        Ok(Self { data, state, pool })
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.state.total_steps
    }

    /// One update. Advantages use the baselines from before this batch; the
    /// baselines then absorb the batch means.
    pub fn step(&mut self) -> Result<ReinforceMetrics> {
        let st = &self.state;
        let step = st.step as usize;
        let (entropy_coef, length_coef) = st.cfg.coefficients(step, st.total_steps as usize);
        let batch = st.cfg.train.batch_size;
        let eos = st.eos();
        let overflow = Error::NumericalOverflow { step };

        let mut data_rng = st.data_rng.clone();
        let mut gumbel_rng = st.gumbel_rng.clone();
        let (_, x) = self.data.draw(batch, &mut data_rng);
        let gumbels = sample_gumbel_steps(st.model.cfg.max_len, batch, st.model.cfg.vocab, &mut gumbel_rng);

        let model = &st.model;
        let ranges = chunk_ranges(batch, st.cfg.train.threads);
        let passes: Vec<Result<SenderPass>> = self.pool.install(|| {
            ranges
                .par_iter()
                .map(|r| {
                    let xs = x.slice(s![r.clone(), ..]).to_owned();
                    let gs: Vec<Array2<f64>> = gumbels.iter().map(|g| g.slice(s![r.clone(), ..]).to_owned()).collect();
                    sender_pass(model, &model.store, &xs, &gs, eos, batch as f64)
                })
                .collect()
        });
        let mut passes = passes.into_iter().collect::<Result<Vec<_>>>().map_err(|_| Error::NumericalOverflow { step })?;

        let recon: Vec<f64> = passes.iter().flat_map(|p| p.recon.iter().copied()).collect();
        let log_prob: Vec<f64> = passes.iter().flat_map(|p| p.tape.value(p.log_prob).column(0).to_vec()).collect();
        let lengths: Vec<f64> = passes.iter().flat_map(|p| p.lengths.iter().map(|&l| l as f64)).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (m_recon, m_logp, m_len) = (mean(&recon), mean(&log_prob), mean(&lengths));
        if ![m_recon, m_logp, m_len].iter().all(|v| v.is_finite()) {
            return Err(overflow);
        }
        let b = &st.baselines;
        let (b_recon, b_logp, b_len) = (b.recon.get_or(m_recon), b.log_prob.get_or(m_logp), b.length.get_or(m_len));
        let advantages: Vec<f64> = (0..batch)
            .map(|i| {
                (recon[i] - b_recon) + entropy_coef * (log_prob[i] - b_logp) + length_coef * (lengths[i] - b_len)
            })
            .collect();

        let grads_per_chunk: Vec<Vec<Array2<f64>>> = self.pool.install(|| {
            passes
                .par_iter_mut()
                .zip(ranges.par_iter())
                .map(|(pass, r)| {
                    backward_with_advantages(pass, &advantages[r.clone()], batch as f64);
                    pass.tape.param_grads(&model.store)
                })
                .collect()
        });
        let mut chunks = grads_per_chunk.into_iter();
        let mut grads = chunks.next().expect("at least one chunk");
        for g in chunks {
            grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        if !grads.iter().all(|g| g.iter().all(|v| v.is_finite())) {
            return Err(overflow);
        }

        let mut params = model.store.values().to_vec();
        let mut opt = st.opt.clone();
        opt.step(&mut params, &grads);
        if !params.iter().all(|p| p.iter().all(|v| v.is_finite())) {
            return Err(overflow);
        }

        let st = &mut self.state;
        st.model.store.values_mut().clone_from_slice(&params);
        st.opt = opt;
        st.data_rng = data_rng;
        st.gumbel_rng = gumbel_rng;
        st.baselines.recon.update(m_recon);
        st.baselines.log_prob.update(m_logp);
        st.baselines.length.update(m_len);
        st.step += 1;
        Ok(ReinforceMetrics { step: step as u64, recon: m_recon, entropy: -m_logp, mean_len: m_len, entropy_coef, length_coef })
    }

    pub fn run(&mut self, max_steps: Option<usize>, mut log: Option<&mut dyn Write>) -> Result<Vec<ReinforceMetrics>> {
        let mut out = Vec::new();
        let mut left = max_steps.unwrap_or(usize::MAX);
        while !self.is_done() && left > 0 {
            let m = self.step()?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", m.tsv())?;
            }
            out.push(m);
            left -= 1;
        }
        Ok(out)
    }
}

/// Trains a sender/receiver pair from scratch.
pub fn reinforce_train(catalog: &Catalog, cfg: &ReinforceConfig) -> Result<ReinforceState> {
    let mut trainer = ReinforceTrainer::new(catalog, cfg)?;
    trainer.run(None, None)?;
    Ok(trainer.state)
}
