//! Flat run configuration: one namespace of `key = value` settings shared by
//! config files and command-line flags.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::baselines::ReinforceConfig;
use crate::catalog::SynthConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalOptions;
use crate::trainer::{Sampling, TrainConfig};

/// Settings for the gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub rows: usize,
    pub eps: f64,
    pub tau: f64,
    pub beta: f64,
    pub threshold: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { rows: 4, eps: 1e-5, tau: 1.0, beta: 0.5, threshold: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub reinforce: ReinforceConfig,
    pub kmeans_iters: usize,
    pub eval: EvalOptions,
    pub gradcheck: GradCheckOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            reinforce: ReinforceConfig::default(),
            kmeans_iters: 50,
            eval: EvalOptions::default(),
            gradcheck: GradCheckOptions::default(),
        }
    }
}

/// One configurable setting.
#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, help: &'static str) -> Key {
    Key { name, help }
}

pub const SEED_KEYS: &[Key] = &[key("seed", "Seed for every random stream")];

pub const SYNTH_KEYS: &[Key] = &[
    key("items", "Number of items"),
    key("dim", "Embedding dimension"),
    key("zipf", "Zipf exponent of item popularity"),
    key("clusters", "Number of embedding clusters"),
    key("cold_fraction", "Share of items held out as cold"),
    key("interactions", "Total sampled interactions"),
    key("noise", "Within-cluster noise scale"),
];

pub const MODEL_KEYS: &[Key] = &[
    key("maxlen", "Maximum code length T"),
    key("vocab", "Vocabulary size V"),
    key("hidden", "Encoder hidden width"),
    key("model_dim", "Decoder width"),
    key("n_layers", "Decoder layers"),
    key("ffn_hidden", "Decoder feed-forward width"),
    key("init_std", "Initial weight std"),
];

pub const TRAIN_KEYS: &[Key] = &[
    key("batch_size", "Items per minibatch"),
    key("epochs", "Passes over the training interactions (when steps is none)"),
    key("steps", "Total optimizer steps, or none"),
    key("lr", "AdamW learning rate"),
    key("weight_decay", "AdamW decoupled weight decay"),
    key("tau_min", "Final Gumbel-Softmax temperature"),
    key("beta_max", "Final regularizer weight"),
    key("warmup_fraction", "Share of the run spent ramping the regularizer weight"),
    key("lambda", "Length cost per token"),
    key("free_bits", "Free nats per position before the vocabulary penalty"),
    key("varlen", "Variable-length codes (false: always T tokens)"),
    key("sampling", "Minibatch items: data-unigram or catalog-uniform"),
    key("threads", "Worker threads (part of the determinism contract)"),
];

pub const REINFORCE_KEYS: &[Key] = &[
    key("entropy_start", "Initial entropy weight"),
    key("entropy_end", "Final entropy weight"),
    key("length_penalty", "Final per-token length penalty"),
    key("anneal_steps", "Steps to anneal both weights, or none for half the run"),
    key("baseline_decay", "Decay of the running-mean baselines"),
];

pub const KMEANS_KEYS: &[Key] = &[key("kmeans_iters", "Maximum Lloyd sweeps per level")];

pub const EVAL_KEYS: &[Key] = &[
    key("budget", "Token budget per user history"),
    key("n_users", "Synthetic users for budget statistics"),
    key("history_len", "Events per synthetic user"),
];

pub const GRADCHECK_KEYS: &[Key] = &[
    key("rows", "Random inputs in the checked batch"),
    key("eps", "Finite-difference step"),
    key("tau", "Relaxation temperature"),
    key("beta", "Regularizer weight"),
    key("threshold", "Largest accepted relative error"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{value}` for `{key}` (true | false)"))),
    }
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value.trim() {
        "none" | "" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn show_sampling(s: Sampling) -> String {
    match s {
        Sampling::DataUnigram => "data-unigram",
        Sampling::CatalogUniform => "catalog-uniform",
    }
    .to_string()
}

impl RunConfig {
    /// Defaults for `gradcheck`: a model small enough to difference every
    /// parameter.
    pub fn gradcheck_defaults() -> Self {
        let mut cfg = Self::default();
        cfg.synth.dim = 4;
        let t = &mut cfg.train;
        (t.max_len, t.vocab, t.hidden, t.model_dim, t.n_layers, t.ffn_hidden, t.init_std) = (3, 5, 8, 8, 1, 16, 0.5);
        cfg
    }

    /// Updates one setting; `-` and `_` are interchangeable in `key`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key.trim().replace('-', "_");
        let v = value;
        let (s, t, r, e, g) = (&mut self.synth, &mut self.train, &mut self.reinforce, &mut self.eval, &mut self.gradcheck);
        match k.as_str() {
            "seed" => self.seed = parse(&k, v)?,
            "items" => s.n_items = parse(&k, v)?,
            "dim" => s.dim = parse(&k, v)?,
            "zipf" => s.zipf_exponent = parse(&k, v)?,
            "clusters" => s.n_clusters = parse(&k, v)?,
            "cold_fraction" => s.cold_fraction = parse(&k, v)?,
            "interactions" => s.interactions = parse(&k, v)?,
            "noise" => s.noise = parse(&k, v)?,
            "maxlen" => t.max_len = parse(&k, v)?,
            "vocab" => t.vocab = parse(&k, v)?,
            "hidden" => t.hidden = parse(&k, v)?,
            "model_dim" => t.model_dim = parse(&k, v)?,
            "n_layers" => t.n_layers = parse(&k, v)?,
            "ffn_hidden" => t.ffn_hidden = parse(&k, v)?,
            "init_std" => t.init_std = parse(&k, v)?,
            "batch_size" => t.batch_size = parse(&k, v)?,
            "epochs" => t.epochs = parse(&k, v)?,
            "steps" => t.steps = parse_opt(&k, v)?,
            "lr" => t.learning_rate = parse(&k, v)?,
            "weight_decay" => t.weight_decay = parse(&k, v)?,
            "tau_min" => t.tau_min = parse(&k, v)?,
            "beta_max" => t.beta_max = parse(&k, v)?,
            "warmup_fraction" => t.warmup_fraction = parse(&k, v)?,
            "lambda" => t.lambda = parse(&k, v)?,
            "free_bits" => t.free_bits = parse(&k, v)?,
            "varlen" => t.varlen = parse_bool(&k, v)?,
            "sampling" => t.sampling = v.trim().parse()?,
            "threads" => t.threads = parse(&k, v)?,
            "entropy_start" => r.entropy_start = parse(&k, v)?,
            "entropy_end" => r.entropy_end = parse(&k, v)?,
            "length_penalty" => r.length_penalty = parse(&k, v)?,
            "anneal_steps" => r.anneal_steps = parse_opt(&k, v)?,
            "baseline_decay" => r.baseline_decay = parse(&k, v)?,
            "kmeans_iters" => self.kmeans_iters = parse(&k, v)?,
            "budget" => e.budget = parse(&k, v)?,
            "n_users" => e.n_users = parse(&k, v)?,
            "history_len" => e.history_len = parse(&k, v)?,
            "rows" => g.rows = parse(&k, v)?,
            "eps" => g.eps = parse(&k, v)?,
            "tau" => g.tau = parse(&k, v)?,
            "beta" => g.beta = parse(&k, v)?,
            "threshold" => g.threshold = parse(&k, v)?,
            _ => return Err(Error::Config(format!("unknown setting `{key}`"))),
        }
        Ok(())
    }

    /// Current value of a setting in the form `set` accepts.
    pub fn get(&self, key: &str) -> Result<String> {
        let k = key.trim().replace('-', "_");
        let (s, t, r, e, g) = (&self.synth, &self.train, &self.reinforce, &self.eval, &self.gradcheck);
        Ok(match k.as_str() {
            "seed" => self.seed.to_string(),
            "items" => s.n_items.to_string(),
            "dim" => s.dim.to_string(),
            "zipf" => s.zipf_exponent.to_string(),
            "clusters" => s.n_clusters.to_string(),
            "cold_fraction" => s.cold_fraction.to_string(),
            "interactions" => s.interactions.to_string(),
            "noise" => s.noise.to_string(),
            "maxlen" => t.max_len.to_string(),
            "vocab" => t.vocab.to_string(),
            "hidden" => t.hidden.to_string(),
            "model_dim" => t.model_dim.to_string(),
            "n_layers" => t.n_layers.to_string(),
            "ffn_hidden" => t.ffn_hidden.to_string(),
            "init_std" => t.init_std.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "epochs" => t.epochs.to_string(),
            "steps" => show_opt(&t.steps),
            "lr" => t.learning_rate.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "tau_min" => t.tau_min.to_string(),
            "beta_max" => t.beta_max.to_string(),
            "warmup_fraction" => t.warmup_fraction.to_string(),
            "lambda" => t.lambda.to_string(),
            "free_bits" => t.free_bits.to_string(),
            "varlen" => t.varlen.to_string(),
            "sampling" => show_sampling(t.sampling),
            "threads" => t.threads.to_string(),
            "entropy_start" => r.entropy_start.to_string(),
            "entropy_end" => r.entropy_end.to_string(),
            "length_penalty" => r.length_penalty.to_string(),
            "anneal_steps" => show_opt(&r.anneal_steps),
            "baseline_decay" => r.baseline_decay.to_string(),
            "kmeans_iters" => self.kmeans_iters.to_string(),
            "budget" => e.budget.to_string(),
            "n_users" => e.n_users.to_string(),
            "history_len" => e.history_len.to_string(),
            "rows" => g.rows.to_string(),
            "eps" => g.eps.to_string(),
            "tau" => g.tau.to_string(),
            "beta" => g.beta.to_string(),
            "threshold" => g.threshold.to_string(),
            _ => return Err(Error::Config(format!("unknown setting `{key}`"))),
        })
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.apply_str(&text)
    }

    /// Resolved configurations with the shared seed and thread count applied.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig { seed: self.seed, ..self.synth.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn reinforce_config(&self) -> ReinforceConfig {
        ReinforceConfig { train: self.train_config(), varlen: self.train.varlen, ..self.reinforce.clone() }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions { seed: self.seed, ..self.eval }
    }
}
