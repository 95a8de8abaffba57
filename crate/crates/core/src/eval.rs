//! Measurement harness: cross-layer similarity, per-mode perplexity and sweeps.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::budget::{compress_after_prefill, group_score, select_top_k, FisherWeights, MergeStrategy, ScoreVariant};
use crate::corpus::Corpus;
use crate::error::{bail, Error, Result};
use crate::factorization::{factorize_group, transform_with_rank, FactorizedModel, GroupLayout};
use crate::latent_cache::{compute_latent, LatentSession};
use crate::model::{forward_baseline, forward_with_trace, nll_from_logits, KvCache, Mode, ModelWeights};
use crate::tensor::{row_cosine, Matrix};

/// Mean token cosine between layer `layer` and `layer + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairSimilarity {
    pub layer: usize,
    pub key: f64,
    pub value: f64,
    pub hidden: f64,
    pub latent: f64,
    /// Both layers share one latent basis.
    pub same_group: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub pairs: Vec<PairSimilarity>,
    /// Hidden state of each layer against itself; always 1.
    pub self_check: Vec<f64>,
    pub mean_key: f64,
    pub mean_value: f64,
    pub mean_hidden: f64,
    pub mean_latent: f64,
    /// Latent mean restricted to pairs inside one group (NaN-free: 0 when there are none).
    pub mean_latent_within_group: f64,
    pub corpus_hash: String,
    pub n_tokens: usize,
}

fn mean_row_cosine(a: &Matrix, b: &Matrix) -> f64 {
    (0..a.rows()).map(|t| row_cosine(a.row(t), b.row(t))).sum::<f64>()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Runs prefill on each probe sequence and averages adjacent-layer token cosines.
pub fn profile_similarity(weights: &ModelWeights, factorized: &FactorizedModel, corpus: &Corpus) -> Result<SimilarityReport> {
    if corpus.is_empty() || corpus.sequences.iter().all(Vec::is_empty) {
        bail!(Input, "probe corpus is empty");
    }
    if factorized.config != weights.config {
        bail!(Config, "factorized model does not match the weights' configuration");
    }
    let n_layers = weights.config.n_layers;
    let layout = factorized.layout();
    let mut sums = vec![[0.0f64; 4]; n_layers.saturating_sub(1)];
    let mut self_sum = vec![0.0f64; n_layers];
    let mut n_tokens = 0usize;
    for seq in corpus.sequences.iter().filter(|s| !s.is_empty()) {
        let (_, trace) = forward_with_trace(weights, seq)?;
        let latents: Vec<Matrix> = (0..n_layers)
            .map(|l| compute_latent(&trace.layers[l].normed, factorized.factors.shared_for_layer(l)))
            .collect();
        for (l, s) in sums.iter_mut().enumerate() {
            let (a, b) = (&trace.layers[l], &trace.layers[l + 1]);
            s[0] += mean_row_cosine(&a.k_rope, &b.k_rope);
            s[1] += mean_row_cosine(&a.v, &b.v);
            s[2] += mean_row_cosine(&a.x, &b.x);
            s[3] += mean_row_cosine(&latents[l], &latents[l + 1]);
        }
        for (l, s) in self_sum.iter_mut().enumerate() {
            let x = &trace.layers[l].x;
            *s += mean_row_cosine(x, x);
        }
        n_tokens += seq.len();
    }
    let n = n_tokens as f64;
    let pairs: Vec<PairSimilarity> = sums
        .iter()
        .enumerate()
        .map(|(l, s)| PairSimilarity {
            layer: l,
            key: s[0] / n,
            value: s[1] / n,
            hidden: s[2] / n,
            latent: s[3] / n,
            same_group: layout.group_of(l) == layout.group_of(l + 1),
        })
        .collect();
    Ok(SimilarityReport {
        self_check: self_sum.iter().map(|s| s / n).collect(),
        mean_key: mean(pairs.iter().map(|p| p.key)),
        mean_value: mean(pairs.iter().map(|p| p.value)),
        mean_hidden: mean(pairs.iter().map(|p| p.hidden)),
        mean_latent: mean(pairs.iter().map(|p| p.latent)),
        mean_latent_within_group: mean(pairs.iter().filter(|p| p.same_group).map(|p| p.latent)),
        pairs,
        corpus_hash: corpus.hash(),
        n_tokens,
    })
}

/// Outcome of one synthetic observation trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationTrial {
    pub seed: u64,
    /// Smallest token cosine between any two layers' hidden states.
    pub min_hidden_cosine: f64,
    pub mean_key: f64,
    pub mean_latent: f64,
}

impl ObservationTrial {
    pub fn latent_wins(&self) -> bool {
        self.mean_latent > self.mean_key
    }
}

/// Shared-basis latents vs per-layer keys on constructed, highly similar hidden states.
///
/// Hidden states are `X_l = X_0 + 0.1·N_l` with Gaussian `X_0, N_l`. Each layer
/// gets independent Gaussian `W_k, W_v`; the single shared `A` comes from
/// factorizing all of them together.
pub fn synthetic_observation_trial(
    seed: u64,
    n_layers: usize,
    d_hidden: usize,
    d_kv: usize,
    n_tokens: usize,
    rank: usize,
) -> Result<ObservationTrial> {
    if n_layers < 2 || n_tokens == 0 {
        bail!(Input, "trial needs at least two layers and one token");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (d_hidden as f64).sqrt();
    let mut proj = Vec::with_capacity(2 * n_layers);
    for _ in 0..n_layers {
        proj.push(Matrix::gaussian(d_hidden, d_kv, scale, &mut rng));
        proj.push(Matrix::gaussian(d_hidden, d_kv, scale, &mut rng));
    }
    let factors = factorize_group(&Matrix::hcat(&proj.iter().collect::<Vec<_>>())?, rank, d_kv)?;
    let base = Matrix::gaussian(n_tokens, d_hidden, 1.0, &mut rng);
    let hidden: Vec<Matrix> = (0..n_layers)
        .map(|_| base.add(&Matrix::gaussian(n_tokens, d_hidden, 0.1, &mut rng)))
        .collect();
    let mut min_hidden_cosine = 1.0f64;
    for i in 0..n_layers {
        for j in i + 1..n_layers {
            for t in 0..n_tokens {
                min_hidden_cosine = min_hidden_cosine.min(row_cosine(hidden[i].row(t), hidden[j].row(t)));
            }
        }
    }
    let keys: Vec<Matrix> = (0..n_layers).map(|l| hidden[l].matmul(&proj[2 * l])).collect();
    let latents: Vec<Matrix> = hidden.iter().map(|x| compute_latent(x, &factors.a)).collect();
    let pair_mean = |m: &[Matrix]| mean(m.windows(2).map(|w| mean_row_cosine(&w[0], &w[1]) / n_tokens as f64));
    Ok(ObservationTrial { seed, min_hidden_cosine, mean_key: pair_mean(&keys), mean_latent: pair_mean(&latents) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CacheMode {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "commonkv")]
    CommonKv,
    #[serde(rename = "lowrank_perlayer")]
    LowRankPerLayer,
    #[serde(rename = "rawkv_meanmerge")]
    RawKvMeanMerge,
}

impl CacheMode {
    pub const ALL: [CacheMode; 4] = [Self::Baseline, Self::CommonKv, Self::LowRankPerLayer, Self::RawKvMeanMerge];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::CommonKv => "commonkv",
            Self::LowRankPerLayer => "lowrank_perlayer",
            Self::RawKvMeanMerge => "rawkv_meanmerge",
        }
    }
}

impl fmt::Display for CacheMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CacheMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match Self::ALL.into_iter().find(|m| m.as_str() == s) {
            Some(m) => Ok(m),
            None => bail!(Config, "unknown cache mode {s:?}"),
        }
    }
}

/// Models available to the evaluator.
#[derive(Debug, Clone, Copy)]
pub struct EvalContext<'a> {
    pub weights: &'a ModelWeights,
    pub factorized: &'a FactorizedModel,
    pub fisher: Option<&'a FisherWeights>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerplexitySpec {
    pub mode: CacheMode,
    pub target_ratio: f64,
    /// Tokens processed by prefill before compression; the rest are decoded one by one.
    pub prefix_len: usize,
    pub strategy: MergeStrategy,
    pub score: ScoreVariant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityResult {
    pub mode: CacheMode,
    pub target_ratio: f64,
    /// Mean NLL over all `len − 1` next-token predictions.
    pub nll: f64,
    pub token_nll: Vec<f64>,
    pub cache_elements: usize,
    pub baseline_elements: usize,
    /// `1 − cache_elements / baseline_elements`, from the cache itself.
    pub achieved_ratio: f64,
    pub predicted_elements: usize,
    pub merged_groups: Vec<usize>,
    pub rank: Option<usize>,
    pub warnings: Vec<String>,
}

struct ModeRun {
    token_nll: Vec<f64>,
    cache_elements: usize,
    predicted_elements: usize,
    merged_groups: Vec<usize>,
    rank: Option<usize>,
    warnings: Vec<String>,
}

fn push_nll(out: &mut Vec<f64>, logits: &Matrix, targets: &[u8]) {
    for (t, &target) in targets.iter().enumerate() {
        out.push(nll_from_logits(logits.row(t), target));
    }
}

/// Rank for the per-layer low-rank reference: `floor((1 − ρ)·2·d_kv)`, capped by `d_hidden`.
pub fn lowrank_rank(target_ratio: f64, d_hidden: usize, d_kv: usize) -> Result<usize> {
    let r = ((1.0 - target_ratio) * (2 * d_kv) as f64).floor() as usize;
    if r == 0 {
        bail!(Config, "target ratio {target_ratio} leaves no rank for per-layer low-rank storage");
    }
    Ok(r.min(d_hidden).min(2 * d_kv))
}

fn run_baseline(weights: &ModelWeights, tokens: &[u8], p: usize, merge_groups: Option<(usize, usize)>) -> Result<ModeRun> {
    let cfg = weights.config;
    let mut cache = KvCache::new(&cfg);
    let mut nll = Vec::with_capacity(tokens.len() - 1);
    let logits = forward_baseline(weights, &tokens[..p], Mode::Prefill, &mut cache)?;
    push_nll(&mut nll, &logits, &tokens[1..=p.min(tokens.len() - 1)]);
    let d_kv = cfg.d_kv();
    let decoded = tokens.len() - 1 - p.min(tokens.len() - 1);
    let mut merged_groups = Vec::new();
    let mut predicted = cfg.n_layers * 2 * d_kv * (p + decoded);
    if let Some((group_size, k)) = merge_groups {
        let layout = GroupLayout::new(cfg.n_layers, group_size)?;
        let scores: Vec<f64> = layout
            .groups()
            .iter()
            .map(|g| group_score(cache.prefix_keys(g.start), cache.prefix_keys(g.end - 1)))
            .collect::<Result<_>>()?;
        merged_groups = select_top_k(&scores, k);
        for &g in &merged_groups {
            let range = layout.group(g);
            let w = 1.0 / range.len() as f64;
            let mut k_sum = Matrix::<f64>::zeros(p, d_kv);
            let mut v_sum = Matrix::<f64>::zeros(p, d_kv);
            for l in range.clone() {
                k_sum.add_assign(&cache.prefix_keys(l).cast());
                v_sum.add_assign(&cache.prefix_values(l).cast());
            }
            cache.share_prefix(range, k_sum.scale(w).cast(), v_sum.scale(w).cast())?;
        }
        predicted -= merged_groups.len() * (group_size - 1) * 2 * d_kv * p;
    }
    for t in p..tokens.len() - 1 {
        let logits = forward_baseline(weights, &tokens[t..t + 1], Mode::Decode, &mut cache)?;
        push_nll(&mut nll, &logits, &tokens[t + 1..t + 2]);
    }
    Ok(ModeRun {
        token_nll: nll,
        cache_elements: cache.element_count(),
        predicted_elements: predicted,
        merged_groups,
        rank: None,
        warnings: Vec::new(),
    })
}

fn run_latent(
    model: &FactorizedModel,
    tokens: &[u8],
    p: usize,
    budget: Option<(&PerplexitySpec, Option<&FisherWeights>)>,
) -> Result<ModeRun> {
    let cfg = model.config;
    let mut session = LatentSession::new(model);
    let mut nll = Vec::with_capacity(tokens.len() - 1);
    let logits = session.prefill(&tokens[..p])?;
    push_nll(&mut nll, &logits, &tokens[1..=p.min(tokens.len() - 1)]);
    let decoded = tokens.len() - 1 - p.min(tokens.len() - 1);
    let (predicted, merged_groups, warnings) = match budget {
        Some((spec, fisher)) => {
            let (plan, warnings) = compress_after_prefill(
                session.store_mut(),
                cfg.d_kv(),
                spec.target_ratio,
                spec.strategy,
                spec.score,
                fisher,
                decoded,
            )?;
            (plan.predicted_elements, plan.merged, warnings)
        }
        None => (cfg.n_layers * model.rank() * (p + decoded), Vec::new(), Vec::new()),
    };
    for t in p..tokens.len() - 1 {
        let logits = session.decode(tokens[t])?;
        push_nll(&mut nll, &logits, &tokens[t + 1..t + 2]);
    }
    Ok(ModeRun {
        token_nll: nll,
        cache_elements: session.store().audit().total(),
        predicted_elements: predicted,
        merged_groups,
        rank: Some(model.rank()),
        warnings,
    })
}

/// Teacher-forced NLL of `tokens` under one cache mode.
///
/// The first `prefix_len` tokens are prefilled, the cache is compressed, and
/// the remaining tokens are fed one at a time. Compression never affects the
/// prefill predictions, only the decode ones.
pub fn perplexity(ctx: &EvalContext<'_>, tokens: &[u8], spec: &PerplexitySpec) -> Result<PerplexityResult> {
    let cfg = ctx.weights.config;
    if tokens.len() < 2 {
        bail!(Input, "perplexity needs at least 2 tokens, got {}", tokens.len());
    }
    if tokens.len() > cfg.max_seq {
        bail!(Capacity, "{} tokens exceed max_seq {}", tokens.len(), cfg.max_seq);
    }
    if spec.prefix_len == 0 || spec.prefix_len >= tokens.len() {
        bail!(Input, "prefix length must lie in [1, {}), got {}", tokens.len(), spec.prefix_len);
    }
    if !(0.0..1.0).contains(&spec.target_ratio) {
        bail!(Config, "target ratio must lie in [0, 1), got {}", spec.target_ratio);
    }
    let p = spec.prefix_len;
    let run = match spec.mode {
        CacheMode::Baseline => run_baseline(ctx.weights, tokens, p, None)?,
        CacheMode::RawKvMeanMerge => {
            let m = ctx.factorized.layout().group_size();
            let g = cfg.n_layers / m;
            let k = ((spec.target_ratio * g as f64).round() as usize).min(g);
            run_baseline(ctx.weights, tokens, p, Some((m, k)))?
        }
        CacheMode::CommonKv => {
            if ctx.factorized.config != cfg {
                bail!(Config, "factorized model does not match the weights' configuration");
            }
            run_latent(ctx.factorized, tokens, p, Some((spec, ctx.fisher)))?
        }
        CacheMode::LowRankPerLayer => {
            let r = lowrank_rank(spec.target_ratio, cfg.d_hidden, cfg.d_kv())?;
            let model = transform_with_rank(ctx.weights, GroupLayout::new(cfg.n_layers, 1)?, r, r as f64 / cfg.d_hidden as f64)?;
            run_latent(&model, tokens, p, None)?
        }
    };
    let baseline_elements = cfg.n_layers * 2 * cfg.d_kv() * (tokens.len() - 1);
    if run.cache_elements != run.predicted_elements {
        bail!(
            Numeric,
            "{} cache holds {} elements, accounting predicted {}",
            spec.mode,
            run.cache_elements,
            run.predicted_elements
        );
    }
    let achieved_ratio = 1.0 - run.cache_elements as f64 / baseline_elements as f64;
    let predicted_ratio = 1.0 - run.predicted_elements as f64 / baseline_elements as f64;
    if (achieved_ratio - predicted_ratio).abs() > 1e-9 {
        bail!(Numeric, "achieved ratio {achieved_ratio} disagrees with prediction {predicted_ratio}");
    }
    let nll = run.token_nll.iter().sum::<f64>() / run.token_nll.len() as f64;
    if !nll.is_finite() {
        bail!(Numeric, "{} produced a non-finite NLL", spec.mode);
    }
    Ok(PerplexityResult {
        mode: spec.mode,
        target_ratio: spec.target_ratio,
        nll,
        token_nll: run.token_nll,
        cache_elements: run.cache_elements,
        baseline_elements,
        achieved_ratio,
        predicted_elements: run.predicted_elements,
        merged_groups: run.merged_groups,
        rank: run.rank,
        warnings: run.warnings,
    })
}

/// Sweep grid. Each seed generates one Markov probe sequence of `seq_len` bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub modes: Vec<CacheMode>,
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub seq_len: usize,
    pub prefix_len: usize,
    pub strategy: MergeStrategy,
    pub score: ScoreVariant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub mode: CacheMode,
    pub target_ratio: f64,
    pub seed: u64,
    /// `None` when the target cannot be reached in this mode.
    pub achieved_ratio: Option<f64>,
    pub nll: Option<f64>,
    pub cache_elements: Option<usize>,
    pub baseline_elements: usize,
    pub merged_groups: Vec<usize>,
    pub wall_ms: f64,
    /// Reason the record is empty, if it is.
    pub unreachable: Option<String>,
}

pub const CSV_HEADER: &str = "mode,target_ratio,achieved_ratio,nll,cache_elements,wall_ms,seed";

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        format!(
            "{},{},{},{},{},{:.3},{}",
            self.mode,
            self.target_ratio,
            opt(self.achieved_ratio.map(|v| format!("{v:.12}"))),
            opt(self.nll.map(|v| format!("{v:.12}"))),
            opt(self.cache_elements.map(|v| v.to_string())),
            self.wall_ms,
            self.seed
        )
    }
}

pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn bench_one(ctx: &EvalContext<'_>, spec: &BenchSpec, mode: CacheMode, ratio: f64, seed: u64) -> Result<BenchRecord> {
    let cfg = ctx.weights.config;
    let tokens = Corpus::markov(seed, 1, spec.seq_len).sequences.remove(0);
    let target_ratio = if mode == CacheMode::Baseline { 0.0 } else { ratio };
    let pspec = PerplexitySpec { mode, target_ratio, prefix_len: spec.prefix_len, strategy: spec.strategy, score: spec.score };
    let start = Instant::now();
    let outcome = perplexity(ctx, &tokens, &pspec);
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let baseline_elements = cfg.n_layers * 2 * cfg.d_kv() * (tokens.len().max(1) - 1);
    let mut record = BenchRecord {
        mode,
        target_ratio: ratio,
        seed,
        achieved_ratio: None,
        nll: None,
        cache_elements: None,
        baseline_elements,
        merged_groups: Vec::new(),
        wall_ms,
        unreachable: None,
    };
    match outcome {
        Ok(r) => {
            record.achieved_ratio = Some(r.achieved_ratio);
            record.nll = Some(r.nll);
            record.cache_elements = Some(r.cache_elements);
            record.merged_groups = r.merged_groups;
        }
        Err(Error::Config(msg)) => record.unreachable = Some(msg),
        Err(e) => return Err(e),
    }
    Ok(record)
}

/// One record per `(mode, ratio, seed)`, in that nesting order.
///
/// Unreachable targets are recorded, not fatal. Each record comes from a fresh
/// session, so the result for one mode does not depend on which others ran.
pub fn bench_sweep(ctx: &EvalContext<'_>, spec: &BenchSpec, workers: usize) -> Result<Vec<BenchRecord>> {
    if spec.seq_len < 2 || spec.prefix_len == 0 || spec.prefix_len >= spec.seq_len {
        bail!(Config, "bench needs 1 <= prefix_len < seq_len, got {} and {}", spec.prefix_len, spec.seq_len);
    }
    let jobs: Vec<(CacheMode, f64, u64)> = spec
        .modes
        .iter()
        .flat_map(|&m| spec.ratios.iter().flat_map(move |&r| spec.seeds.iter().map(move |&s| (m, r, s))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    pool.install(|| jobs.par_iter().map(|&(m, r, s)| bench_one(ctx, spec, m, r, s)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::estimate_fisher;
    use crate::factorization::transform_model;
    use crate::model::{gen_toy_model, loss_and_grads, ModelConfig};

    fn toy() -> ModelWeights {
        gen_toy_model(&ModelConfig::toy(), 7).unwrap()
    }

    fn spec(mode: CacheMode, ratio: f64) -> PerplexitySpec {
        PerplexitySpec { mode, target_ratio: ratio, prefix_len: 24, strategy: MergeStrategy::Mean, score: ScoreVariant::Shortcut }
    }

    #[test]
    fn profile_ranges_and_self_check() {
        let w = toy();
        let f = transform_model(&w, 4, 0.7).unwrap();
        let corpus = Corpus::markov(3, 2, 20);
        let r = profile_similarity(&w, &f, &corpus).unwrap();
        assert_eq!(r.pairs.len(), 7);
        assert!(r.self_check.iter().all(|v| (v - 1.0).abs() < 1e-9));
        for p in &r.pairs {
            for v in [p.key, p.value, p.hidden, p.latent] {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
        assert_eq!(r.pairs.iter().filter(|p| p.same_group).count(), 6);
        assert_eq!(r.n_tokens, 40);
        assert!(profile_similarity(&w, &f, &Corpus { sequences: vec![], seed: None }).is_err());
    }

    #[test]
    fn observation_trials() {
        let wins = (0..20)
            .map(|s| synthetic_observation_trial(s, 8, 64, 32, 32, 45).unwrap())
            .inspect(|t| assert!(t.min_hidden_cosine >= 0.95, "{t:?}"))
            .filter(ObservationTrial::latent_wins)
            .count();
        assert!(wins >= 18);
    }

    #[test]
    fn baseline_matches_model_loss() {
        let w = toy();
        let f = transform_model(&w, 4, 0.7).unwrap();
        let ctx = EvalContext { weights: &w, factorized: &f, fisher: None };
        let tokens = Corpus::markov(5, 1, 48).sequences.remove(0);
        let r = perplexity(&ctx, &tokens, &spec(CacheMode::Baseline, 0.0)).unwrap();
        let reference = loss_and_grads(&w, &tokens).unwrap().loss;
        assert!((r.nll - reference).abs() < 1e-6, "{} vs {reference}", r.nll);
        assert_eq!(r.achieved_ratio, 0.0);
        assert_eq!(r.token_nll.len(), 47);
    }

    #[test]
    fn full_rank_commonkv_is_baseline() {
        let w = toy();
        let f = transform_model(&w, 4, 1.0).unwrap();
        let ctx = EvalContext { weights: &w, factorized: &f, fisher: None };
        let tokens = Corpus::markov(6, 1, 40).sequences.remove(0);
        let base = perplexity(&ctx, &tokens, &spec(CacheMode::Baseline, 0.0)).unwrap();
        let ckv = perplexity(&ctx, &tokens, &spec(CacheMode::CommonKv, 0.0)).unwrap();
        assert!(ckv.merged_groups.is_empty());
        assert!((base.nll - ckv.nll).abs() < 1e-5);
    }

    #[test]
    fn every_mode_is_finite_and_audited() {
        let w = toy();
        let f = transform_model(&w, 4, 0.7).unwrap();
        let fisher = estimate_fisher(&w, &Corpus::markov(1, 2, 16)).unwrap();
        let ctx = EvalContext { weights: &w, factorized: &f, fisher: Some(&fisher) };
        let tokens = Corpus::markov(8, 1, 40).sequences.remove(0);
        for mode in CacheMode::ALL {
            for ratio in [0.3, 0.5] {
                let mut s = spec(mode, ratio);
                s.strategy = MergeStrategy::Fisher;
                let r = perplexity(&ctx, &tokens, &s).unwrap();
                assert!(r.nll.is_finite() && r.nll >= 0.0);
                assert_eq!(r.cache_elements, r.predicted_elements);
                if matches!(mode, CacheMode::CommonKv | CacheMode::LowRankPerLayer) {
                    assert!(r.achieved_ratio >= ratio, "{mode} {ratio} {}", r.achieved_ratio);
                }
            }
        }
    }

    #[test]
    fn rawkv_merges_rounded_group_count() {
        let w = toy();
        let f = transform_model(&w, 2, 0.7).unwrap();
        let ctx = EvalContext { weights: &w, factorized: &f, fisher: None };
        let tokens = Corpus::markov(2, 1, 32).sequences.remove(0);
        let r = perplexity(&ctx, &tokens, &spec(CacheMode::RawKvMeanMerge, 0.3)).unwrap();
        // G = 4, round(1.2) = 1 group of 2 layers shares its 24-token prefix.
        assert_eq!(r.merged_groups.len(), 1);
        assert_eq!(r.cache_elements, 8 * 64 * 31 - 64 * 24);
    }

    #[test]
    fn uniform_logits_give_ln_256() {
        let mut w = toy();
        w.head = Matrix::zeros(64, 256);
        let f = transform_model(&w, 4, 0.7).unwrap();
        let ctx = EvalContext { weights: &w, factorized: &f, fisher: None };
        let tokens = Corpus::markov(2, 1, 30).sequences.remove(0);
        for mode in CacheMode::ALL {
            let r = perplexity(&ctx, &tokens, &spec(mode, 0.3)).unwrap();
            assert!((r.nll - 256f64.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn perplexity_preconditions() {
        let w = toy();
        let f = transform_model(&w, 4, 0.7).unwrap();
        let ctx = EvalContext { weights: &w, factorized: &f, fisher: None };
        assert!(matches!(perplexity(&ctx, &[1], &spec(CacheMode::Baseline, 0.0)), Err(Error::Input(_))));
        let long = vec![65u8; 300];
        assert!(matches!(perplexity(&ctx, &long, &spec(CacheMode::Baseline, 0.0)), Err(Error::Capacity(_))));
        let tokens = vec![65u8; 40];
        assert!(matches!(perplexity(&ctx, &tokens, &spec(CacheMode::CommonKv, 0.9)), Err(Error::Config(_))));
    }

    #[test]
    fn sweep_records_and_mode_isolation() {
        let w = toy();
        let f = transform_model(&w, 4, 0.7).unwrap();
        let ctx = EvalContext { weights: &w, factorized: &f, fisher: None };
        let mut bench = BenchSpec {
            modes: CacheMode::ALL.to_vec(),
            ratios: vec![0.3, 0.9],
            seeds: vec![1, 2],
            seq_len: 24,
            prefix_len: 16,
            strategy: MergeStrategy::Mean,
            score: ScoreVariant::Shortcut,
        };
        let a = bench_sweep(&ctx, &bench, 2).unwrap();
        assert_eq!(a.len(), 16);
        assert!(a.iter().filter(|r| r.mode == CacheMode::Baseline).all(|r| r.achieved_ratio == Some(0.0)));
        let ckv_09: Vec<_> = a.iter().filter(|r| r.mode == CacheMode::CommonKv && r.target_ratio == 0.9).collect();
        assert!(ckv_09.iter().all(|r| r.unreachable.is_some() && r.nll.is_none()));
        bench.modes.reverse();
        let b = bench_sweep(&ctx, &bench, 3).unwrap();
        for r in &a {
            let twin = b.iter().find(|x| (x.mode, x.target_ratio, x.seed) == (r.mode, r.target_ratio, r.seed)).unwrap();
            assert_eq!((r.nll, r.achieved_ratio, r.cache_elements), (twin.nll, twin.achieved_ratio, twin.cache_elements));
        }
        let csv = to_csv(&a);
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 17);
    }
}
