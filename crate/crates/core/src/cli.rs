//! The `vsid` command line.
//!
//! Settings come from [`RunConfig`] defaults, then an optional `--config`
//! file, then flags typed on the command line. Exit codes: 0 success,
//! 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};
use ndarray::Array2;

use crate::baselines::{rkmeans_fit, ReinforceState, ReinforceTrainer, RKMeansModel};
use crate::catalog::{load_catalog, save_catalog, synth_zipf_catalog, Catalog};
use crate::checkpoint::{Checkpoint, ModelKind, CHECKPOINT_MAGIC};
use crate::baselines::rkmeans::RKMEANS_MAGIC;
use crate::config::{
    Key, RunConfig, EVAL_KEYS, GRADCHECK_KEYS, KMEANS_KEYS, MODEL_KEYS, REINFORCE_KEYS, SEED_KEYS, SYNTH_KEYS, TRAIN_KEYS,
};
use crate::error::{Error, Result};
use crate::evaluation::{comparison_table, evaluate, unit_embeddings, SemanticCoder};
use crate::model::DvaeModel;
use crate::nn::normal_matrix;
use crate::rng::{stream, Stream};
use crate::trainer::{grad_check, ModelState, StepMetrics, Trainer};

/// Any trained tokenizer file.
pub enum LoadedModel {
    Dvae(ModelState),
    Reinforce(ReinforceState),
    RKMeans(RKMeansModel),
}

impl LoadedModel {
    /// Picks the format from the file's magic bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        match bytes.get(..4) {
            Some(m) if m == RKMEANS_MAGIC => Ok(Self::RKMeans(RKMeansModel::from_bytes(&bytes)?)),
            Some(m) if m == CHECKPOINT_MAGIC => {
                let ck = Checkpoint::from_bytes(&bytes)?;
                Ok(match ck.kind {
                    ModelKind::Dvae => Self::Dvae(ModelState::from_checkpoint(ck)?),
                    ModelKind::Reinforce => Self::Reinforce(ReinforceState::from_checkpoint(ck)?),
                })
            }
            Some(m) => Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found: m.try_into().unwrap() }),
            None => Err(Error::Truncated("model file shorter than its magic".into())),
        }
    }

    pub fn coder(&self) -> &dyn SemanticCoder {
        match self {
            Self::Dvae(s) => &s.model,
            Self::Reinforce(s) => s,
            Self::RKMeans(m) => m,
        }
    }
}

/// `item<TAB>L<TAB>tok tok …`, one line per item.
pub fn format_codes(codes: &[(Vec<u32>, usize)]) -> String {
    let mut out = String::new();
    for (item, (path, len)) in codes.iter().enumerate() {
        let toks: Vec<String> = path[..*len].iter().map(u32::to_string).collect();
        let _ = writeln!(out, "{item}\t{len}\t{}", toks.join(" "));
    }
    out
}

/// Inverse of [`format_codes`]: `(item, tokens)` per line.
pub fn parse_codes(text: &str) -> Result<Vec<(usize, Vec<u32>)>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|line| {
            let bad = || Error::InvalidArgument(format!("malformed code line `{line}`"));
            let mut fields = line.split('\t');
            let item = fields.next().and_then(|f| f.parse().ok()).ok_or_else(bad)?;
            let len: usize = fields.next().and_then(|f| f.parse().ok()).ok_or_else(bad)?;
            let toks = fields
                .next()
                .ok_or_else(bad)?
                .split(' ')
                .filter(|t| !t.is_empty())
                .map(|t| t.parse().map_err(|_| bad()))
                .collect::<Result<Vec<u32>>>()?;
            if toks.len() != len || fields.next().is_some() {
                return Err(bad());
            }
            Ok((item, toks))
        })
        .collect()
}

fn key_args(keys: &[Key], defaults: &RunConfig) -> Vec<Arg> {
    keys.iter()
        .map(|k| {
            Arg::new(k.name)
                .long(k.name.replace('_', "-"))
                .value_name("VALUE")
                .help(k.help)
                .default_value(defaults.get(k.name).expect("known key"))
        })
        .collect()
}

fn path_arg(name: &'static str, help: &'static str, required: bool) -> Arg {
    Arg::new(name).long(name).value_name("PATH").value_parser(clap::value_parser!(PathBuf)).help(help).required(required)
}

fn config_arg() -> Arg {
    path_arg("config", "File of `key = value` settings; flags override it", false)
}

fn keys_for(sub: &str, method: Option<&str>) -> Vec<&'static [Key]> {
    match (sub, method) {
        ("synth", _) => vec![SEED_KEYS, SYNTH_KEYS],
        ("train", _) => vec![SEED_KEYS, MODEL_KEYS, TRAIN_KEYS],
        ("baseline", Some("rkmeans")) => vec![SEED_KEYS, MODEL_KEYS, KMEANS_KEYS],
        ("baseline", _) => vec![SEED_KEYS, MODEL_KEYS, TRAIN_KEYS, REINFORCE_KEYS],
        ("eval", _) => vec![SEED_KEYS, EVAL_KEYS],
        ("gradcheck", _) => vec![SEED_KEYS, &SYNTH_KEYS[1..2], MODEL_KEYS, TRAIN_KEYS, GRADCHECK_KEYS],
        _ => vec![],
    }
}

fn with_keys(mut cmd: Command, groups: &[&[Key]], defaults: &RunConfig) -> Command {
    for g in groups {
        cmd = cmd.args(key_args(g, defaults));
    }
    cmd
}

/// The full argument grammar.
pub fn command() -> Command {
    let d = RunConfig::default();
    let synth = with_keys(
        Command::new("synth").about("Generate a synthetic Zipfian catalog").arg(config_arg()).arg(path_arg(
            "out",
            "Catalog file to write",
            true,
        )),
        &keys_for("synth", None),
        &d,
    );
    let train = with_keys(
        Command::new("train")
            .about("Train the variable-length dVAE")
            .arg(config_arg())
            .arg(path_arg("catalog", "Catalog file", true))
            .arg(path_arg("out", "Checkpoint to write", true))
            .arg(path_arg("log", "Per-step metrics log [default: <out>.log]", false))
            .arg(path_arg("resume", "Continue from this checkpoint instead of starting fresh", false)),
        &keys_for("train", None),
        &d,
    );
    // rkmeans reads a subset of the reinforce keys, so the union is exposed
    let mut baseline_keys = keys_for("baseline", Some("reinforce"));
    baseline_keys.push(KMEANS_KEYS);
    let baseline = with_keys(
        Command::new("baseline")
            .about("Fit a reference tokenizer")
            .arg(Arg::new("method").required(true).value_parser(["rkmeans", "reinforce"]).help("Which baseline"))
            .arg(config_arg())
            .arg(path_arg("catalog", "Catalog file", true))
            .arg(path_arg("out", "Model file to write", true))
            .arg(path_arg("log", "Per-step metrics log for reinforce [default: <out>.log]", false)),
        &baseline_keys,
        &d,
    );
    let encode = Command::new("encode")
        .about("Write the semantic ID of every catalog item")
        .arg(path_arg("catalog", "Catalog file", true))
        .arg(path_arg("model", "dVAE, REINFORCE or R-KMeans model file", true))
        .arg(path_arg("out", "TSV to write: item, length, tokens", true));
    let eval = with_keys(
        Command::new("eval")
            .about("Evaluate one or more models and print a comparison table")
            .arg(config_arg())
            .arg(path_arg("catalog", "Catalog file", true))
            .arg(path_arg("model", "Model file (repeatable)", true).action(ArgAction::Append))
            .arg(path_arg("out", "Report stem: writes <out>.tsv and <out>.buckets.tsv per model", true)),
        &keys_for("eval", None),
        &d,
    );
    let gradcheck = with_keys(
        Command::new("gradcheck")
            .about("Compare analytic gradients with central differences on a small random model")
            .arg(config_arg()),
        &keys_for("gradcheck", None),
        &RunConfig::gradcheck_defaults(),
    );
    Command::new("vsid")
        .about("Variable-length semantic IDs for item catalogs")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommands([synth, train, baseline, encode, eval, gradcheck])
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::Runtime(e)
    }
}

fn resolve(sub: &str, m: &ArgMatches) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = if sub == "gradcheck" { RunConfig::gradcheck_defaults() } else { RunConfig::default() };
    if let Some(path) = m.get_one::<PathBuf>("config") {
        cfg.apply_file(path).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let method = m.try_get_one::<String>("method").ok().flatten().map(String::as_str);
    for g in keys_for(sub, method) {
        for k in g.iter() {
            if m.value_source(k.name) == Some(ValueSource::CommandLine) {
                let v = m.get_one::<String>(k.name).expect("value present");
                cfg.set(k.name, v).map_err(|e| Failure::Usage(e.to_string()))?;
            }
        }
    }
    if method == Some("rkmeans") {
        let mut extra = Vec::new();
        for g in [TRAIN_KEYS, REINFORCE_KEYS] {
            extra.extend(g.iter().filter(|k| m.value_source(k.name) == Some(ValueSource::CommandLine)).map(|k| k.name));
        }
        if !extra.is_empty() {
            log::warn!("ignored by rkmeans: {}", extra.join(", "));
        }
    }
    Ok(cfg)
}

fn path<'a>(m: &'a ArgMatches, name: &str) -> &'a PathBuf {
    m.get_one::<PathBuf>(name).expect("required by the grammar")
}

fn log_path(m: &ArgMatches, out: &Path) -> PathBuf {
    m.get_one::<PathBuf>("log").cloned().unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".log");
        PathBuf::from(p)
    })
}

fn cmd_synth(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let catalog = synth_zipf_catalog(&cfg.synth_config())?;
    save_catalog(&catalog, path(m, "out"))?;
    println!("wrote {} items (dim {}) to {}", catalog.n_items(), catalog.dim(), path(m, "out").display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let catalog = load_catalog(path(m, "catalog"))?;
    let out = path(m, "out");
    let mut trainer = match m.get_one::<PathBuf>("resume") {
        Some(p) => Trainer::resume(&catalog, ModelState::load(p)?)?,
        None => Trainer::new(&catalog, &cfg.train_config())?,
    };
    let mut log = BufWriter::new(File::create(log_path(m, out))?);
    writeln!(log, "{}", StepMetrics::HEADER)?;
    let mut last = None;
    while !trainer.is_done() {
        match trainer.step() {
            Ok(metrics) => {
                writeln!(log, "{}", metrics.tsv())?;
                last = Some(metrics);
            }
            Err(e) => {
                log.flush()?;
                trainer.state.save(out)?;
                log::error!("saved the last good state (step {}) to {}", trainer.state.step, out.display());
                return Err(e);
            }
        }
    }
    log.flush()?;
    trainer.state.save(out)?;
    match last {
        Some(s) => println!("step {}\trecon {:.5}\tE[L] {:.3}\ttotal {:.5}", s.step, s.recon, s.expected_len, s.total),
        None => println!("nothing to do: already at step {}", trainer.state.step),
    }
    Ok(())
}

fn cmd_baseline(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let catalog = load_catalog(path(m, "catalog"))?;
    let out = path(m, "out");
    match m.get_one::<String>("method").map(String::as_str) {
        Some("rkmeans") => {
            let t = &cfg.train;
            let model = rkmeans_fit(&catalog, t.max_len, t.vocab, cfg.kmeans_iters, cfg.seed)?;
            model.save(out)?;
            println!("wrote {} levels x {} centroids to {}", model.levels(), model.vocab(), out.display());
        }
        _ => {
            let mut trainer = ReinforceTrainer::new(&catalog, &cfg.reinforce_config())?;
            let mut log = BufWriter::new(File::create(log_path(m, out))?);
            writeln!(log, "{}", crate::baselines::reinforce::ReinforceMetrics::HEADER)?;
            while !trainer.is_done() {
                match trainer.step() {
                    Ok(metrics) => writeln!(log, "{}", metrics.tsv())?,
                    Err(e) => {
                        log.flush()?;
                        trainer.state.save(out)?;
                        return Err(e);
                    }
                }
            }
            log.flush()?;
            trainer.state.save(out)?;
            println!("wrote REINFORCE model after {} steps to {}", trainer.state.step, out.display());
        }
    }
    Ok(())
}

fn encode_catalog(model: &dyn SemanticCoder, catalog: &Catalog) -> Result<Vec<(Vec<u32>, usize)>> {
    let emb = unit_embeddings(catalog)?;
    model.encode_full(&emb)
}

fn cmd_encode(m: &ArgMatches) -> Result<()> {
    let catalog = load_catalog(path(m, "catalog"))?;
    let model = LoadedModel::load(path(m, "model"))?;
    let codes = encode_catalog(model.coder(), &catalog)?;
    fs::write(path(m, "out"), format_codes(&codes))?;
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let catalog = load_catalog(path(m, "catalog"))?;
    let models: Vec<&PathBuf> = m.get_many::<PathBuf>("model").expect("required").collect();
    let out = path(m, "out");
    let mut reports = Vec::new();
    for p in &models {
        let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        let report = evaluate(LoadedModel::load(p)?.coder(), &catalog, &cfg.eval_options())?;
        let stem = if models.len() == 1 {
            out.clone()
        } else {
            let mut s = out.as_os_str().to_owned();
            s.push(format!(".{name}"));
            PathBuf::from(s)
        };
        report.write(&stem)?;
        reports.push((name, report));
    }
    let rows: Vec<(&str, _)> = reports.iter().map(|(n, r)| (n.as_str(), r)).collect();
    print!("{}", comparison_table(&rows));
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<bool> {
    let train = cfg.train_config();
    train.validate()?;
    let g = cfg.gradcheck;
    let model = DvaeModel::new(train.model_config(cfg.synth.dim), cfg.seed);
    let mut x: Array2<f64> = normal_matrix(&mut stream(cfg.seed, Stream::Data), g.rows, cfg.synth.dim, 1.0);
    for mut row in x.rows_mut() {
        let n = row.dot(&row).sqrt().max(1e-12);
        row /= n;
    }
    let r = grad_check(&model, &x, &train.prior(), g.tau, g.beta, g.eps, cfg.seed)?;
    println!("max_rel_err\t{:e}\tworst\t{}\tchecked\t{}", r.max_rel_err, r.worst, r.checked);
    Ok(r.max_rel_err <= g.threshold)
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let (sub, m) = matches.subcommand().expect("subcommand required");
    let outcome = (|| -> std::result::Result<bool, Failure> {
        let cfg = if sub == "encode" { RunConfig::default() } else { resolve(sub, m)? };
        match sub {
            "synth" => cmd_synth(&cfg, m)?,
            "train" => cmd_train(&cfg, m)?,
            "baseline" => cmd_baseline(&cfg, m)?,
            "encode" => cmd_encode(m)?,
            "eval" => cmd_eval(&cfg, m)?,
            "gradcheck" => return Ok(cmd_gradcheck(&cfg)?),
            other => return Err(Failure::Usage(format!("unknown subcommand {other}"))),
        }
        Ok(true)
    })();
    match outcome {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("error: gradient check above threshold");
            1
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}
