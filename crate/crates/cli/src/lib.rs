//! Command-line driver: model generation, transformation, calibration,
//! profiling, inference, benchmarking and self-check.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use commonkv::budget::{estimate_fisher, FisherWeights, MergeStrategy, ScoreVariant};
use commonkv::container::sha256_hex;
use commonkv::corpus::Corpus;
use commonkv::eval::{bench_sweep, perplexity, profile_similarity, to_csv, BenchSpec, CacheMode, EvalContext, PerplexitySpec};
use commonkv::factorization::{transform_model, FactorizedModel};
use commonkv::model::{gen_toy_model, ModelConfig, ModelWeights};
use commonkv::{check, Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Exit status for a completed command whose checks failed.
pub const EXIT_CHECK_FAILED: u8 = 1;
/// Exit status for flag parsing errors (set by clap).
pub const EXIT_USAGE: u8 = 2;

/// Process exit status for an engine error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 10,
        Error::Io(_) | Error::Format(_) | Error::Json(_) => 11,
        Error::Numeric(_) => 12,
        Error::Capacity(_) => 13,
        Error::Input(_) => 14,
    }
}

#[derive(Debug, Parser)]
#[command(name = "commonkv", version, about = "Cross-layer KV-cache compression through shared low-rank factors")]
pub struct Cli {
    /// TOML file supplying defaults for any flag; flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded random toy model.
    GenToy(Opts),
    /// Factorize a model's K/V projections group by group.
    Transform(Opts),
    /// Estimate per-layer Fisher weights on a calibration corpus.
    Fisher(Opts),
    /// Cross-layer similarity of keys, values, hidden states and latents.
    Profile(Opts),
    /// Teacher-forced NLL of one text under one cache mode.
    Run(Opts),
    /// Sweep modes, ratios and seeds; write CSV plus a summary.
    Bench(Opts),
    /// Run the invariant self-check suite.
    Check(Opts),
}

impl Command {
    fn parts(&self) -> (&'static str, &Opts) {
        match self {
            Self::GenToy(o) => ("gen-toy", o),
            Self::Transform(o) => ("transform", o),
            Self::Fisher(o) => ("fisher", o),
            Self::Profile(o) => ("profile", o),
            Self::Run(o) => ("run", o),
            Self::Bench(o) => ("bench", o),
            Self::Check(o) => ("check", o),
        }
    }
}

/// Every flag is optional here; defaults are applied after merging the config file.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct Opts {
    /// Model container.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Factorized container; transformed on the fly when absent.
    #[arg(long)]
    pub factorized: Option<PathBuf>,
    /// Output path (stdout for reports when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Layers per group [default: 4].
    #[arg(long)]
    pub group_size: Option<usize>,
    /// SVD rank as a fraction of d_hidden [default: 0.7].
    #[arg(long)]
    pub rank_fraction: Option<f64>,
    /// Target compression ratio; bench takes a comma-separated list [default: 0.5, bench 0.1..0.6].
    #[arg(long, value_delimiter = ',')]
    pub ratio: Option<Vec<f64>>,
    /// baseline | commonkv | lowrank_perlayer | rawkv_meanmerge; bench takes a list [default: commonkv, bench all].
    #[arg(long, value_delimiter = ',')]
    pub mode: Option<Vec<CacheMode>>,
    /// mean | fisher | shallow | deep [default: fisher]. Only meaningful for commonkv.
    #[arg(long)]
    pub merge: Option<MergeStrategy>,
    /// shortcut | full [default: shortcut]. Only meaningful for commonkv.
    #[arg(long)]
    pub score: Option<ScoreVariant>,
    /// Root seed for every random draw [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Raw byte file used as corpus or text; a seeded Markov corpus is generated when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Fisher weights from `fisher`; estimated on the fly when a fisher merge needs them.
    #[arg(long)]
    pub fisher_file: Option<PathBuf>,
    /// Bench worker threads [default: 1].
    #[arg(long)]
    pub workers: Option<usize>,
    /// Literal text for `run`.
    #[arg(long)]
    pub text: Option<String>,
    /// Sequence length of generated or chunked corpora [default: 64].
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Number of generated sequences [default: 16 for fisher, 4 for profile].
    #[arg(long)]
    pub n_sequences: Option<usize>,
    /// Tokens prefilled before compression [default: 3/4 of the text].
    #[arg(long)]
    pub prefix_len: Option<usize>,
    /// Bench seeds per (mode, ratio), derived from the root seed [default: 3].
    #[arg(long)]
    pub trials: Option<usize>,
    /// toy | micro [default: toy].
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub d_hidden: Option<usize>,
    #[arg(long)]
    pub n_q_heads: Option<usize>,
    #[arg(long)]
    pub n_kv_heads: Option<usize>,
    #[arg(long)]
    pub d_head: Option<usize>,
    #[arg(long)]
    pub d_mlp: Option<usize>,
    #[arg(long)]
    pub max_seq: Option<usize>,
}

macro_rules! overlay {
    ($flags:expr, $file:expr, $($field:ident),+) => {
        Opts { $($field: $flags.$field.or($file.$field)),+ }
    };
}

impl Opts {
    /// Flags win; the file fills the gaps.
    pub fn overlay(self, file: Opts) -> Opts {
        overlay!(
            self, file, model, factorized, out, group_size, rank_fraction, ratio, mode, merge, score, seed, corpus,
            fisher_file, workers, text, seq_len, n_sequences, prefix_len, trials, preset, n_layers, d_hidden,
            n_q_heads, n_kv_heads, d_head, d_mlp, max_seq
        )
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn seq_len(&self) -> usize {
        self.seq_len.unwrap_or(64)
    }

    fn require<'a>(&self, value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        value.as_deref().ok_or_else(|| Error::Config(format!("--{flag} is required")))
    }

    fn model_config(&self) -> Result<ModelConfig> {
        let base = match self.preset.as_deref().unwrap_or("toy") {
            "toy" => ModelConfig::toy(),
            "micro" => ModelConfig::micro(),
            other => return Err(Error::Config(format!("unknown preset {other:?}"))),
        };
        let c = ModelConfig {
            n_layers: self.n_layers.unwrap_or(base.n_layers),
            d_hidden: self.d_hidden.unwrap_or(base.d_hidden),
            n_q_heads: self.n_q_heads.unwrap_or(base.n_q_heads),
            n_kv_heads: self.n_kv_heads.unwrap_or(base.n_kv_heads),
            d_head: self.d_head.unwrap_or(base.d_head),
            d_mlp: self.d_mlp.unwrap_or(base.d_mlp),
            max_seq: self.max_seq.unwrap_or(base.max_seq),
            ..base
        };
        c.validate()?;
        Ok(c)
    }

    fn single_mode(&self) -> Result<CacheMode> {
        match self.mode.as_deref() {
            None => Ok(CacheMode::CommonKv),
            Some([m]) => Ok(*m),
            Some(_) => Err(Error::Config("run takes exactly one --mode".into())),
        }
    }

    fn check_merge_flags(&self, modes: &[CacheMode]) -> Result<()> {
        if (self.merge.is_some() || self.score.is_some()) && !modes.contains(&CacheMode::CommonKv) {
            return Err(Error::Config("--merge and --score apply only to commonkv mode".into()));
        }
        Ok(())
    }
}

/// Parsed command line merged with its optional config file.
pub fn resolve(cli: Cli) -> Result<(&'static str, Opts)> {
    let file = match &cli.config {
        Some(path) => {
            let text = reading(path, |p| Ok(std::fs::read_to_string(p)?))?;
            toml::from_str::<Opts>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => Opts::default(),
    };
    let (name, flags) = cli.command.parts();
    Ok((name, flags.clone().overlay(file)))
}

/// Runs one command; returns the process exit status.
pub fn run(cli: Cli) -> Result<u8> {
    let (name, opts) = resolve(cli)?;
    match name {
        "gen-toy" => cmd_gen_toy(&opts),
        "transform" => cmd_transform(&opts),
        "fisher" => cmd_fisher(&opts),
        "profile" => cmd_profile(&opts),
        "run" => cmd_run(&opts),
        "bench" => cmd_bench(&opts),
        "check" => cmd_check(&opts),
        _ => unreachable!("every subcommand is listed"),
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Prints to stdout; a closed pipe on the reading side is not an error.
fn print_stdout(text: &str) -> Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

/// Writes `value` to `--out`, or prints it.
fn emit(opts: &Opts, value: &impl Serialize) -> Result<()> {
    match &opts.out {
        Some(p) => write_json(p, value),
        None => print_stdout(&(serde_json::to_string_pretty(value)? + "\n")),
    }
}

/// Adds the path to I/O errors raised while reading `path`.
fn reading<T>(path: &Path, f: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    f(path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn manifest(command: &str, opts: &Opts, outputs: &[(&str, &Path)], extra: Value) -> Result<Value> {
    let mut files = serde_json::Map::new();
    for (role, path) in outputs {
        files.insert(
            role.to_string(),
            json!({ "path": path.display().to_string(), "sha256": sha256_hex(&std::fs::read(path)?) }),
        );
    }
    Ok(json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": opts.seed(),
        "outputs": files,
        "details": extra,
    }))
}

fn load_model(opts: &Opts) -> Result<ModelWeights> {
    reading(opts.require(&opts.model, "model")?, |p| ModelWeights::load(p))
}

fn load_or_transform(opts: &Opts, weights: &ModelWeights) -> Result<FactorizedModel> {
    match &opts.factorized {
        Some(path) => {
            let f = reading(path, |p| FactorizedModel::load(p))?;
            if f.config != weights.config {
                return Err(Error::Config("factorized model was built from a different configuration".into()));
            }
            if opts.group_size.is_some_and(|m| m != f.layout().group_size()) {
                log::warn!("--group-size ignored: {} uses {}", path.display(), f.layout().group_size());
            }
            Ok(f)
        }
        None => transform_model(weights, opts.group_size.unwrap_or(4), opts.rank_fraction.unwrap_or(0.7)),
    }
}

fn load_corpus(opts: &Opts, default_sequences: usize, tag: u64) -> Result<Corpus> {
    match &opts.corpus {
        Some(path) => reading(path, |p| Corpus::from_file(p, opts.seq_len())),
        None => Ok(Corpus::markov(
            opts.seed().wrapping_add(tag),
            opts.n_sequences.unwrap_or(default_sequences),
            opts.seq_len(),
        )),
    }
}

/// Fisher weights for a fisher merge: from file, or estimated on a generated corpus.
fn fisher_for(opts: &Opts, weights: &ModelWeights, needed: bool) -> Result<Option<FisherWeights>> {
    match (&opts.fisher_file, needed) {
        (Some(path), _) => {
            let f = reading(path, |p| FisherWeights::load(p))?;
            if f.per_layer.len() != weights.config.n_layers {
                return Err(Error::Config(format!("{} holds {} layers", path.display(), f.per_layer.len())));
            }
            Ok(Some(f))
        }
        (None, true) => {
            log::warn!("no --fisher-file; estimating fisher weights on a generated corpus");
            Ok(Some(estimate_fisher(weights, &Corpus::markov(opts.seed().wrapping_add(1), 8, opts.seq_len().min(64)))?))
        }
        (None, false) => Ok(None),
    }
}

pub fn cmd_gen_toy(opts: &Opts) -> Result<u8> {
    let out = opts.require(&opts.out, "out")?;
    let config = opts.model_config()?;
    let weights = gen_toy_model(&config, opts.seed())?;
    weights.save(out, Some(opts.seed()))?;
    let m = manifest("gen-toy", opts, &[("model", out)], json!({ "config": config }))?;
    write_json(&sidecar(out, ".manifest.json"), &m)?;
    eprintln!("wrote {} ({} layers, d_hidden {})", out.display(), config.n_layers, config.d_hidden);
    Ok(0)
}

pub fn cmd_transform(opts: &Opts) -> Result<u8> {
    let out = opts.require(&opts.out, "out")?;
    let weights = load_model(opts)?;
    let model = transform_model(&weights, opts.group_size.unwrap_or(4), opts.rank_fraction.unwrap_or(0.7))?;
    model.save(out)?;
    let report = model.report();
    let report_path = sidecar(out, ".report.json");
    write_json(&report_path, &report)?;
    let details = json!({
        "group_size": report.group_size,
        "rank": report.rank,
        "rank_fraction": report.rank_fraction,
        "max_key_error": report.layer_errors.iter().map(|e| e.key).fold(0.0, f64::max),
        "max_value_error": report.layer_errors.iter().map(|e| e.value).fold(0.0, f64::max),
    });
    let m = manifest("transform", opts, &[("factorized", out), ("report", &report_path)], details)?;
    write_json(&sidecar(out, ".manifest.json"), &m)?;
    eprintln!("wrote {} (rank {}, {} groups)", out.display(), report.rank, report.groups.len());
    Ok(0)
}

pub fn cmd_fisher(opts: &Opts) -> Result<u8> {
    let out = opts.require(&opts.out, "out")?;
    let weights = load_model(opts)?;
    let corpus = load_corpus(opts, 16, 0)?;
    let fisher = estimate_fisher(&weights, &corpus)?;
    fisher.save(out)?;
    eprintln!("wrote {} ({} sequences, corpus {})", out.display(), corpus.len(), &fisher.corpus_hash[..12]);
    Ok(0)
}

pub fn cmd_profile(opts: &Opts) -> Result<u8> {
    let weights = load_model(opts)?;
    let factorized = load_or_transform(opts, &weights)?;
    let corpus = load_corpus(opts, 4, 0)?;
    let report = profile_similarity(&weights, &factorized, &corpus)?;
    emit(opts, &json!({ "seed": opts.seed(), "group_size": factorized.layout().group_size(), "rank": factorized.rank(), "report": report }))?;
    Ok(0)
}

fn run_text(opts: &Opts, max_seq: usize) -> Result<Vec<u8>> {
    let tokens = match (&opts.text, &opts.corpus) {
        (Some(_), Some(_)) => return Err(Error::Config("give either --text or --corpus".into())),
        (Some(t), None) => t.as_bytes().to_vec(),
        (None, Some(path)) => reading(path, |p| Ok(std::fs::read(p)?))?,
        (None, None) => Corpus::markov(opts.seed(), 1, opts.seq_len()).sequences.remove(0),
    };
    if tokens.len() > max_seq {
        return Err(Error::Capacity(format!("text of {} tokens exceeds max_seq {max_seq}", tokens.len())));
    }
    Ok(tokens)
}

fn default_prefix(opts: &Opts, len: usize) -> usize {
    opts.prefix_len.unwrap_or((3 * len / 4).clamp(1, len.saturating_sub(1).max(1)))
}

pub fn cmd_run(opts: &Opts) -> Result<u8> {
    let mode = opts.single_mode()?;
    opts.check_merge_flags(&[mode])?;
    let ratio = match opts.ratio.as_deref() {
        None => if mode == CacheMode::Baseline { 0.0 } else { 0.5 },
        Some([r]) => *r,
        Some(_) => return Err(Error::Config("run takes exactly one --ratio".into())),
    };
    let weights = load_model(opts)?;
    let factorized = load_or_transform(opts, &weights)?;
    let strategy = opts.merge.unwrap_or(MergeStrategy::Fisher);
    let tokens = run_text(opts, weights.config.max_seq)?;
    let fisher = fisher_for(opts, &weights, mode == CacheMode::CommonKv && strategy == MergeStrategy::Fisher)?;
    let ctx = EvalContext { weights: &weights, factorized: &factorized, fisher: fisher.as_ref() };
    let spec = PerplexitySpec {
        mode,
        target_ratio: ratio,
        prefix_len: default_prefix(opts, tokens.len()),
        strategy,
        score: opts.score.unwrap_or_default(),
    };
    let result = perplexity(&ctx, &tokens, &spec)?;
    for w in &result.warnings {
        log::warn!("{w}");
    }
    emit(opts, &json!({ "seed": opts.seed(), "spec": spec, "tokens": tokens.len(), "result": result }))?;
    Ok(0)
}

pub fn cmd_bench(opts: &Opts) -> Result<u8> {
    let out = opts.require(&opts.out, "out")?;
    let modes = opts.mode.clone().unwrap_or_else(|| CacheMode::ALL.to_vec());
    opts.check_merge_flags(&modes)?;
    let weights = load_model(opts)?;
    let factorized = load_or_transform(opts, &weights)?;
    let strategy = opts.merge.unwrap_or(MergeStrategy::Fisher);
    let fisher = fisher_for(opts, &weights, modes.contains(&CacheMode::CommonKv) && strategy == MergeStrategy::Fisher)?;
    let seq_len = opts.seq_len();
    let spec = BenchSpec {
        modes,
        ratios: opts.ratio.clone().unwrap_or_else(|| (1..=6).map(|i| i as f64 / 10.0).collect()),
        seeds: (0..opts.trials.unwrap_or(3) as u64).map(|i| opts.seed().wrapping_add(i)).collect(),
        seq_len,
        prefix_len: default_prefix(opts, seq_len),
        strategy,
        score: opts.score.unwrap_or_default(),
    };
    let ctx = EvalContext { weights: &weights, factorized: &factorized, fisher: fisher.as_ref() };
    let records = bench_sweep(&ctx, &spec, opts.workers.unwrap_or(1))?;
    std::fs::write(out, to_csv(&records))?;
    let summary = json!({
        "seed": opts.seed(),
        "config": opts,
        "bench": spec,
        "group_size": factorized.layout().group_size(),
        "rank": factorized.rank(),
        "records": records,
    });
    write_json(&sidecar(out, ".summary.json"), &summary)?;
    let unreachable = records.iter().filter(|r| r.unreachable.is_some()).count();
    eprintln!("wrote {} ({} records, {unreachable} unreachable)", out.display(), records.len());
    Ok(0)
}

pub fn cmd_check(opts: &Opts) -> Result<u8> {
    let report = check::run_all(opts.seed())?;
    for r in &report.results {
        eprintln!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let text = report.to_json()?;
    match &opts.out {
        Some(p) => std::fs::write(p, text)?,
        None => print_stdout(&text)?,
    }
    Ok(if report.passed { 0 } else { EXIT_CHECK_FAILED })
}
