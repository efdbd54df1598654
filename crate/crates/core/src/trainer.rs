//! Minibatch training of the dVAE, checkpoints and gradient checking.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::catalog::{normalize_embeddings, slice_distributions, Catalog, Slice};
use crate::checkpoint::{Checkpoint, ModelKind};
use crate::encoder::{sample_gumbel_steps, MessageMode};
use crate::error::{Error, Result};
use crate::model::{DvaeModel, ModelConfig};
use crate::objective::{beta_schedule, tau_schedule, PriorConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{stream, RngState, Stream};

/// Which distribution minibatch items are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sampling {
    DataUnigram,
    CatalogUniform,
}

impl FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "data-unigram" | "data" => Ok(Self::DataUnigram),
            "catalog-uniform" | "uniform" => Ok(Self::CatalogUniform),
            other => Err(Error::Config(format!("unknown sampling `{other}` (data-unigram | catalog-uniform)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs × ⌈interactions / batch⌉` when set.
    pub steps: Option<usize>,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_len: usize,
    pub vocab: usize,
    pub hidden: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub ffn_hidden: usize,
    pub init_std: f64,
    pub tau_min: f64,
    pub beta_max: f64,
    /// Share of the run over which β ramps up.
    pub warmup_fraction: f64,
    pub lambda: f64,
    pub free_bits: f64,
    pub varlen: bool,
    pub seed: u64,
    pub sampling: Sampling,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8192,
            epochs: 5,
            steps: None,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            max_len: 5,
            vocab: 4096,
            hidden: 256,
            model_dim: 256,
            n_layers: 2,
            ffn_hidden: 512,
            init_std: 0.1,
            tau_min: 0.5,
            beta_max: 0.002,
            warmup_fraction: 0.2,
            lambda: 2.0,
            free_bits: 2.0,
            varlen: true,
            seed: 0,
            sampling: Sampling::DataUnigram,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("batch_size", self.batch_size), ("threads", self.threads)];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate must be > 0 and weight decay >= 0".into()));
        }
        if !(self.tau_min > 0.0) {
            return Err(Error::InvalidTemperature(self.tau_min));
        }
        if !(self.beta_max >= 0.0) || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("beta_max must be >= 0 and warmup_fraction in [0, 1]".into()));
        }
        PriorConfig::from_lambda(self.lambda, self.max_len, self.vocab, self.free_bits)?;
        self.model_config(1).validate()
    }

    pub fn model_config(&self, dim: usize) -> ModelConfig {
        ModelConfig {
            dim,
            hidden: self.hidden,
            max_len: self.max_len,
            vocab: self.vocab,
            model_dim: self.model_dim,
            n_layers: self.n_layers,
            ffn_hidden: self.ffn_hidden,
            init_std: self.init_std,
            varlen: self.varlen,
        }
    }

    pub fn prior(&self) -> PriorConfig {
        PriorConfig { lambda: self.lambda, max_len: self.max_len, vocab: self.vocab, free_bits: self.free_bits }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.learning_rate, weight_decay: self.weight_decay, ..Default::default() }
    }

    /// `steps` if set, else `epochs × ⌈train interactions / batch⌉`.
    pub fn total_steps(&self, catalog: &Catalog) -> usize {
        self.steps.unwrap_or_else(|| {
            let interactions: u64 = catalog.train_items().iter().map(|&i| catalog.popularity()[i]).sum();
            self.epochs * (interactions as usize).div_ceil(self.batch_size)
        })
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        (self.warmup_fraction * total_steps as f64).round() as usize
    }
}

/// Normalized embeddings plus an item sampler over the training slice.
#[derive(Debug, Clone)]
pub struct DataSource {
    pub embeddings: Array2<f64>,
    sampler: WeightedIndex<f64>,
}

impl DataSource {
    pub fn new(catalog: &Catalog, sampling: Sampling) -> Result<Self> {
        let normalized = normalize_embeddings(catalog)?;
        let (uniform, data) = slice_distributions(&normalized, Slice::Train)?;
        let weights = match sampling {
            Sampling::DataUnigram => data.weights,
            Sampling::CatalogUniform => uniform.weights,
        };
        let sampler = WeightedIndex::new(&weights).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(Self { embeddings: normalized.embeddings().mapv(f64::from), sampler })
    }

    pub fn draw(&self, n: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Array2<f64>) {
        let items: Vec<usize> = (0..n).map(|_| self.sampler.sample(rng)).collect();
        let dim = self.embeddings.ncols();
        let mut x = Array2::zeros((n, dim));
        for (r, &i) in items.iter().enumerate() {
            x.row_mut(r).assign(&self.embeddings.row(i));
        }
        (items, x)
    }
}

/// Contiguous row ranges, one per worker, in a fixed order.
pub(crate) fn chunk_ranges(rows: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let parts = parts.clamp(1, rows.max(1));
    let base = rows / parts;
    let extra = rows % parts;
    let mut start = 0;
    (0..parts)
        .map(|p| {
            let len = base + usize::from(p < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

pub(crate) fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| Error::Config(e.to_string()))
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub cfg: TrainConfig,
    pub model: DvaeModel,
    pub opt: AdamW,
    pub step: u64,
    pub total_steps: u64,
    pub data_rng: ChaCha8Rng,
    pub gumbel_rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct StoredConfig {
    train: TrainConfig,
    model: ModelConfig,
    total_steps: u64,
}

impl ModelState {
    pub fn init(cfg: &TrainConfig, dim: usize, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        let mcfg = cfg.model_config(dim);
        mcfg.validate()?;
        let model = DvaeModel::new(mcfg, cfg.seed);
        let opt = AdamW::new(cfg.adamw(), model.store.values());
        Ok(Self {
            cfg: cfg.clone(),
            model,
            opt,
            step: 0,
            total_steps: total_steps as u64,
            data_rng: stream(cfg.seed, Stream::Data),
            gumbel_rng: stream(cfg.seed, Stream::Gumbel),
        })
    }

    pub fn prior(&self) -> PriorConfig {
        self.cfg.prior()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let stored = StoredConfig { train: self.cfg.clone(), model: self.model.cfg.clone(), total_steps: self.total_steps };
        Checkpoint {
            kind: ModelKind::Dvae,
            config_json: serde_json::to_string(&stored).expect("config serializes"),
            step: self.step,
            rngs: vec![RngState::capture(&self.data_rng), RngState::capture(&self.gumbel_rng)],
            names: self.model.store.names().to_vec(),
            params: self.model.store.values().to_vec(),
            opt_steps: self.opt.t,
            first_moments: self.opt.m.clone(),
            second_moments: self.opt.v.clone(),
            extra: Vec::new(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.kind != ModelKind::Dvae {
            return Err(Error::CorruptCheckpoint("not a dVAE checkpoint".into()));
        }
        let stored: StoredConfig =
            serde_json::from_str(&ck.config_json).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        if ck.rngs.len() != 2 {
            return Err(Error::CorruptCheckpoint(format!("{} rng states, expected 2", ck.rngs.len())));
        }
        let model = DvaeModel::from_values(stored.model, ck.params).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        if ck.names != model.store.names() {
            return Err(Error::CorruptCheckpoint("parameter names differ from the model layout".into()));
        }
        let mut opt = AdamW::new(stored.train.adamw(), model.store.values());
        let shapes_ok = |ms: &[Array2<f64>]| {
            ms.len() == model.store.len() && ms.iter().zip(model.store.values()).all(|(a, b)| a.dim() == b.dim())
        };
        if !shapes_ok(&ck.first_moments) || !shapes_ok(&ck.second_moments) {
            return Err(Error::CorruptCheckpoint("optimizer moments do not match parameters".into()));
        }
        opt.m = ck.first_moments;
        opt.v = ck.second_moments;
        opt.t = ck.opt_steps;
        Ok(Self {
            cfg: stored.train,
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

/// Batch means of the loss terms at one step, before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub recon: f64,
    pub vocab: f64,
    pub length: f64,
    pub total: f64,
    pub tau: f64,
    pub beta: f64,
    pub expected_len: f64,
}

impl StepMetrics {
    pub const HEADER: &'static str = "step\trecon\tvocab\tlength\ttotal\ttau\tbeta\tE[L]";

    pub fn tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.recon, self.vocab, self.length, self.total, self.tau, self.beta, self.expected_len
        )
    }
}

pub struct Trainer {
    pub data: DataSource,
    pub state: ModelState,
    pool: rayon::ThreadPool,
}

impl Trainer {
    pub fn new(catalog: &Catalog, cfg: &TrainConfig) -> Result<Self> {
        let total = cfg.total_steps(catalog);
        let state = ModelState::init(cfg, catalog.dim(), total)?;
        Self::resume(catalog, state)
    }

    pub fn resume(catalog: &Catalog, state: ModelState) -> Result<Self> {
        if catalog.dim() != state.model.cfg.dim {
            return Err(Error::ShapeMismatch(format!("catalog dim {} vs model dim {}", catalog.dim(), state.model.cfg.dim)));
        }
        let data = DataSource::new(catalog, state.cfg.sampling)?;
        let pool = thread_pool(state.cfg.threads)?;
        Ok(Self { data, state, pool })
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.state.total_steps
    }

    /// One optimizer update. On a non-finite loss, gradient or parameter the
    /// state (RNGs included) is left exactly as before the call.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let st = &self.state;
        let cfg = &st.cfg;
        let step = st.step as usize;
        let total = st.total_steps as usize;
        let tau = tau_schedule(step, total, cfg.tau_min);
        let beta = beta_schedule(step, cfg.warmup_steps(total), cfg.beta_max);
        let prior = st.prior();
        let batch = cfg.batch_size;

        let mut data_rng = st.data_rng.clone();
        let mut gumbel_rng = st.gumbel_rng.clone();
        let (_, x) = self.data.draw(batch, &mut data_rng);
        let gumbels = sample_gumbel_steps(cfg.max_len, batch, cfg.vocab, &mut gumbel_rng);

        let model = &st.model;
        let ranges = chunk_ranges(batch, cfg.threads);
        let parts: Vec<Result<(Vec<Array2<f64>>, [f64; 5])>> = self.pool.install(|| {
            ranges
                .par_iter()
                .map(|r| {
                    let xs = x.slice(s![r.clone(), ..]).to_owned();
                    let gs: Vec<Array2<f64>> = gumbels.iter().map(|g| g.slice(s![r.clone(), ..]).to_owned()).collect();
                    let mut tape = Tape::new();
                    let mode = MessageMode::Relaxed { tau, gumbels: &gs };
                    let loss = model.forward_loss(&mut tape, &xs, &mode, &prior, Some(beta), batch as f64)?;
                    tape.backward(loss.total);
                    let scalars = [loss.recon, loss.vocab, loss.length, loss.total, loss.expected_len].map(|v| tape.scalar(v));
                    Ok((tape.param_grads(&model.store), scalars))
                })
                .collect()
        });

        let overflow = Error::NumericalOverflow { step };
        let mut grads: Option<Vec<Array2<f64>>> = None;
        let mut sums = [0.0; 5];
        for part in parts {
            let (g, scalars) = part.map_err(|_| Error::NumericalOverflow { step })?;
            for (acc, v) in sums.iter_mut().zip(scalars) {
                *acc += v;
            }
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            }
        }
        let grads = grads.expect("at least one chunk");
        if !sums.iter().all(|v| v.is_finite()) || !grads.iter().all(|g| g.iter().all(|v| v.is_finite())) {
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
        st.step += 1;
        Ok(StepMetrics {
            step: step as u64,
            recon: sums[0],
            vocab: sums[1],
            length: sums[2],
            total: sums[3],
            tau,
            beta,
            expected_len: sums[4],
        })
    }

    /// Runs up to `max_steps` more updates (all remaining when `None`),
    /// writing one metrics line per step to `log`.
    pub fn run(&mut self, max_steps: Option<usize>, mut log: Option<&mut dyn Write>) -> Result<Vec<StepMetrics>> {
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

/// Trains from scratch for the configured number of steps.
pub fn train(catalog: &Catalog, cfg: &TrainConfig) -> Result<ModelState> {
    let mut trainer = Trainer::new(catalog, cfg)?;
    trainer.run(None, None)?;
    Ok(trainer.state)
}

/// `(f(θ+ε) - f(θ-ε)) / 2ε` for every coordinate of `theta`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            probe[i] = theta[i] + eps;
            let up = f(&probe);
            probe[i] = theta[i] - eps;
            let down = f(&probe);
            probe[i] = theta[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `name[row, col]` of the worst entry.
    pub worst: String,
    pub checked: usize,
}

/// Compares tape gradients of the batch-mean relaxed loss with central
/// differences on every parameter entry. The Gumbel noise is drawn once from
/// `seed` and reused for every evaluation.
pub fn grad_check(
    model: &DvaeModel,
    x: &Array2<f64>,
    prior: &PriorConfig,
    tau: f64,
    beta: f64,
    eps: f64,
    seed: u64,
) -> Result<GradCheck> {
    let gumbels = sample_gumbel_steps(model.cfg.max_len, x.nrows(), model.cfg.vocab, &mut stream(seed, Stream::Gumbel));
    let mode = MessageMode::Relaxed { tau, gumbels: &gumbels };
    let denom = x.nrows() as f64;
    let mut tape = Tape::new();
    let loss = model.forward_loss(&mut tape, x, &mode, prior, Some(beta), denom)?;
    tape.backward(loss.total);
    let analytic = tape.param_grads(&model.store);

    let mut probe = model.clone();
    let eval = |probe: &DvaeModel| -> f64 {
        let mut tape = Tape::new();
        let l = probe.forward_loss(&mut tape, x, &mode, prior, Some(beta), denom).expect("finite loss");
        tape.scalar(l.total)
    };
    let mut result = GradCheck { max_rel_err: 0.0, worst: String::new(), checked: 0 };
    for id in model.store.ids() {
        let shape = model.store.value(id).dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = model.store.value(id)[[r, c]];
                probe.store.value_mut(id)[[r, c]] = orig + eps;
                let up = eval(&probe);
                probe.store.value_mut(id)[[r, c]] = orig - eps;
                let down = eval(&probe);
                probe.store.value_mut(id)[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let err = relative_error(analytic[id.index()][[r, c]], numeric);
                if err > result.max_rel_err || result.checked == 0 {
                    result.max_rel_err = err;
                    result.worst = format!("{}[{r}, {c}]", model.store.name(id));
                }
                result.checked += 1;
            }
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{synth_zipf_catalog, SynthConfig};

    pub(crate) fn tiny_catalog() -> Catalog {
        synth_zipf_catalog(&SynthConfig {
            n_items: 64,
            dim: 8,
            n_clusters: 8,
            interactions: 5_000,
            cold_fraction: 0.1,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 32,
            steps: Some(40),
            vocab: 8,
            max_len: 3,
            hidden: 16,
            model_dim: 16,
            n_layers: 1,
            ffn_hidden: 32,
            learning_rate: 3e-3,
            free_bits: 0.5,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn quadratic_difference() {
        let g = central_difference(|t| t[0] * t[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-9);
        assert!(relative_error(6.0, g[0]) < 1e-9);
    }

    #[test]
    fn chunks_cover_rows_in_order() {
        for (rows, parts) in [(10, 3), (3, 8), (256, 1), (7, 7), (0, 2)] {
            let r = chunk_ranges(rows, parts);
            assert_eq!(r.first().unwrap().start, 0);
            assert_eq!(r.last().unwrap().end, rows);
            for w in r.windows(2) {
                assert_eq!(w[0].end, w[1].start);
            }
        }
    }

    #[test]
    fn zero_steps_leave_init_untouched() {
        let cat = tiny_catalog();
        let cfg = TrainConfig { steps: None, epochs: 0, ..tiny_cfg() };
        let state = train(&cat, &cfg).unwrap();
        let fresh = ModelState::init(&cfg, cat.dim(), 0).unwrap();
        assert_eq!(state, fresh);
    }

    #[test]
    fn total_steps_from_epochs() {
        let cat = tiny_catalog();
        let cfg = TrainConfig { steps: None, epochs: 2, ..tiny_cfg() };
        let interactions: u64 = cat.train_items().iter().map(|&i| cat.popularity()[i]).sum();
        assert_eq!(cfg.total_steps(&cat), 2 * (interactions as usize).div_ceil(32));
    }

    #[test]
    fn data_unigram_sampling_matches_popularity() {
        let cat = tiny_catalog();
        let src = DataSource::new(&cat, Sampling::DataUnigram).unwrap();
        let (_, p) = slice_distributions(&cat, Slice::Train).unwrap();
        let n = 100_000;
        let mut counts = vec![0usize; cat.n_items()];
        let mut rng = stream(5, Stream::Data);
        for i in src.draw(n, &mut rng).0 {
            counts[i] += 1;
        }
        for (c, w) in counts.iter().zip(&p.weights) {
            let sd = (n as f64 * w * (1.0 - w)).sqrt();
            assert!((*c as f64 - n as f64 * w).abs() <= 4.0 * sd + 1e-9, "count {c}, expected {}", n as f64 * w);
        }
        for i in cat.cold_items() {
            assert_eq!(counts[i], 0);
        }
    }

    #[test]
    fn identical_seeds_give_identical_checkpoints() {
        let cat = tiny_catalog();
        let a = train(&cat, &tiny_cfg()).unwrap();
        let b = train(&cat, &tiny_cfg()).unwrap();
        assert_eq!(a.to_checkpoint().to_bytes(), b.to_checkpoint().to_bytes());
        let c = train(&cat, &TrainConfig { seed: 12, ..tiny_cfg() }).unwrap();
        assert_ne!(a.to_checkpoint().to_bytes(), c.to_checkpoint().to_bytes());
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let cat = tiny_catalog();
        let cfg = tiny_cfg();
        let mut straight = Trainer::new(&cat, &cfg).unwrap();
        let full = straight.run(None, None).unwrap();

        let mut first = Trainer::new(&cat, &cfg).unwrap();
        first.run(Some(15), None).unwrap();
        let bytes = first.state.to_checkpoint().to_bytes();
        let restored = ModelState::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(restored, first.state);
        let mut resumed = Trainer::resume(&cat, restored).unwrap();
        let rest = resumed.run(None, None).unwrap();
        assert_eq!(rest.len(), full.len() - 15);
        for (a, b) in rest.iter().zip(&full[15..]) {
            assert_eq!(a.total.to_bits(), b.total.to_bits());
        }
        assert_eq!(resumed.state, straight.state);
    }

    #[test]
    fn decoupled_weight_decay_shrinks_untouched_params() {
        // fixed-length mode never reads the length head, so its gradient is
        // exactly zero and only the decay acts
        let cat = tiny_catalog();
        let cfg = TrainConfig { steps: Some(3), weight_decay: 0.5, learning_rate: 0.01, varlen: false, ..tiny_cfg() };
        let mut tr = Trainer::new(&cat, &cfg).unwrap();
        let id = tr.state.model.encoder.length_head[1].weight;
        let before = tr.state.model.store.value(id).clone();
        tr.run(None, None).unwrap();
        let factor = (1.0f64 - 0.01 * 0.5).powi(3);
        for (a, b) in tr.state.model.store.value(id).iter().zip(before.iter()) {
            assert!((a - b * factor).abs() < 1e-15);
        }
    }
}
