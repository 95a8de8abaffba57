//! Group scoring, compression-budget allocation, Fisher weights and merging.
//!
//! Storage per prefill token with `k` of `G` groups merged is
//! `cost(k) = k·r + (G−k)·m·r` latent elements, against `L·2·d_kv` for the
//! uncompressed cache. Decode tokens always cost `L·r`. The achieved ratio is
//! `1 − stored / baseline` over both parts together.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{bail, Result};
use crate::latent_cache::LatentCacheStore;
use crate::model::{loss_and_grads, ModelWeights};
use crate::tensor::{row_cosine, Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeStrategy {
    Mean,
    Fisher,
    Shallow,
    Deep,
}

impl MergeStrategy {
    pub const ALL: [MergeStrategy; 4] = [Self::Mean, Self::Fisher, Self::Shallow, Self::Deep];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::Fisher => "fisher",
            Self::Shallow => "shallow",
            Self::Deep => "deep",
        }
    }
}

impl fmt::Display for MergeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MergeStrategy {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mean" => Self::Mean,
            "fisher" => Self::Fisher,
            "shallow" => Self::Shallow,
            "deep" => Self::Deep,
            other => bail!(Config, "unknown merge strategy {other:?}"),
        })
    }
}

/// Which layers of a group are compared when scoring it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreVariant {
    /// First against last layer only.
    #[default]
    Shortcut,
    /// Every adjacent pair in the group.
    Full,
}

impl FromStr for ScoreVariant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "shortcut" => Self::Shortcut,
            "full" => Self::Full,
            other => bail!(Config, "unknown score variant {other:?}"),
        })
    }
}

impl fmt::Display for ScoreVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Shortcut => "shortcut",
            Self::Full => "full",
        })
    }
}

/// Mean over tokens of `cos(first_t, last_t)`; zero-norm rows count as 0.
pub fn group_score<T: Real>(first: &Matrix<T>, last: &Matrix<T>) -> Result<f64> {
    if first.shape() != last.shape() {
        bail!(Input, "latent prefixes differ in shape: {:?} vs {:?}", first.shape(), last.shape());
    }
    if first.rows() == 0 {
        bail!(Input, "cannot score an empty prefix");
    }
    let total: f64 = (0..first.rows()).map(|t| row_cosine(first.row(t), last.row(t))).sum();
    Ok(total / first.rows() as f64)
}

/// Mean of [`group_score`] over consecutive layer pairs `(l, l+1)` of the group.
pub fn group_score_full<T: Real>(prefixes: &[Matrix<T>]) -> Result<f64> {
    if prefixes.len() < 2 {
        bail!(Input, "a group needs at least two layers to score, got {}", prefixes.len());
    }
    let mut total = 0.0;
    for pair in prefixes.windows(2) {
        total += group_score(&pair[0], &pair[1])?;
    }
    Ok(total / (prefixes.len() - 1) as f64)
}

/// Scores every unmerged group of `store`.
pub fn score_groups(store: &LatentCacheStore, variant: ScoreVariant) -> Result<Vec<f64>> {
    (0..store.layout().n_groups())
        .map(|g| {
            let hs = store.group_prefixes(g)?;
            match (variant, hs.len()) {
                // A single-layer group has nothing to compare; it merges losslessly.
                (_, 1) => Ok(1.0),
                (ScoreVariant::Shortcut, _) => group_score(&hs[0], &hs[hs.len() - 1]),
                (ScoreVariant::Full, _) => group_score_full(hs),
            }
        })
        .collect()
}

/// Dimensions that determine cache storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetShape {
    pub n_layers: usize,
    pub group_size: usize,
    pub d_kv: usize,
    pub rank: usize,
    pub prefill_tokens: usize,
    pub decode_tokens: usize,
}

impl BudgetShape {
    /// Per-token accounting (one prefill token, no decode).
    pub fn per_token(n_layers: usize, group_size: usize, d_kv: usize, rank: usize) -> Self {
        Self { n_layers, group_size, d_kv, rank, prefill_tokens: 1, decode_tokens: 0 }
    }

    pub fn n_groups(&self) -> usize {
        self.n_layers / self.group_size
    }

    /// Latent elements per prefill token with `k` merged groups.
    pub fn prefill_cost_per_token(&self, k: usize) -> usize {
        k * self.rank + (self.n_groups() - k) * self.group_size * self.rank
    }

    /// Total latent elements with `k` merged groups.
    pub fn cost(&self, k: usize) -> usize {
        self.prefill_cost_per_token(k) * self.prefill_tokens + self.n_layers * self.rank * self.decode_tokens
    }

    /// Elements of the uncompressed K/V cache for the same tokens.
    pub fn baseline_elements(&self) -> usize {
        self.n_layers * 2 * self.d_kv * (self.prefill_tokens + self.decode_tokens)
    }

    pub fn ratio(&self, k: usize) -> f64 {
        1.0 - self.cost(k) as f64 / self.baseline_elements() as f64
    }

    pub fn max_ratio(&self) -> f64 {
        self.ratio(self.n_groups())
    }
}

/// Which groups to merge for one session, and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub scores: Vec<f64>,
    pub target_ratio: f64,
    pub shape: BudgetShape,
    /// Merged groups in ascending index order.
    pub merged: Vec<usize>,
    pub strategy: MergeStrategy,
    pub predicted_elements: usize,
    pub predicted_ratio: f64,
}

/// Indices of the `k` highest scores; ties go to the lower index. Returned ascending.
pub fn select_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut top: Vec<usize> = order.into_iter().take(k).collect();
    top.sort_unstable();
    top
}

/// Smallest merge count meeting `target_ratio`, applied to the top-scoring groups.
pub fn allocate_budget(
    scores: &[f64],
    target_ratio: f64,
    shape: &BudgetShape,
    strategy: MergeStrategy,
) -> Result<BudgetPlan> {
    if !(0.0..1.0).contains(&target_ratio) {
        bail!(Config, "target ratio must lie in [0, 1), got {target_ratio}");
    }
    if shape.group_size == 0 || !shape.n_layers.is_multiple_of(shape.group_size) {
        bail!(Config, "{} layers do not split into groups of {}", shape.n_layers, shape.group_size);
    }
    if scores.len() != shape.n_groups() {
        bail!(Config, "{} scores for {} groups", scores.len(), shape.n_groups());
    }
    let Some(k) = (0..=shape.n_groups()).find(|&k| shape.ratio(k) >= target_ratio) else {
        bail!(
            Config,
            "target ratio {target_ratio} unreachable at rank {}: maximum achievable ratio is {:.6}",
            shape.rank,
            shape.max_ratio()
        );
    };
    Ok(BudgetPlan {
        scores: scores.to_vec(),
        target_ratio,
        shape: *shape,
        merged: select_top_k(scores, k),
        strategy,
        predicted_elements: shape.cost(k),
        predicted_ratio: shape.ratio(k),
    })
}

/// Per-layer importance `f_l = F(W_k^l) + F(W_v^l)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherWeights {
    pub per_layer: Vec<f64>,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub corpus_hash: String,
    pub seed: Option<u64>,
    pub n_sequences: usize,
}

impl FisherWeights {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f: FisherWeights = serde_json::from_slice(&std::fs::read(path)?)?;
        if f.per_layer.iter().any(|v| !v.is_finite() || *v < 0.0) {
            bail!(Format, "fisher weights must be finite and nonnegative");
        }
        Ok(f)
    }
}

/// Empirical Fisher: for each calibration sequence, the squared gradient of its
/// mean loss summed over matrix elements; averaged over sequences.
pub fn estimate_fisher<T: Real>(weights: &ModelWeights<T>, corpus: &Corpus) -> Result<FisherWeights> {
    if corpus.is_empty() {
        bail!(Input, "calibration corpus is empty");
    }
    if let Some(s) = corpus.sequences.iter().find(|s| s.len() < 2) {
        bail!(Input, "calibration sequence of length {} is too short", s.len());
    }
    let sq = |m: &Matrix<f64>| m.data().iter().map(|g| g * g).sum::<f64>();
    let per_seq: Vec<(Vec<f64>, Vec<f64>)> = corpus
        .sequences
        .par_iter()
        .map(|s| {
            let g = loss_and_grads(weights, s)?;
            Ok((g.d_wk.iter().map(sq).collect(), g.d_wv.iter().map(sq).collect()))
        })
        .collect::<Result<_>>()?;
    let n_layers = weights.config.n_layers;
    let n = per_seq.len() as f64;
    let mut key = vec![0.0; n_layers];
    let mut value = vec![0.0; n_layers];
    for (k, v) in &per_seq {
        for l in 0..n_layers {
            key[l] += k[l];
            value[l] += v[l];
        }
    }
    key.iter_mut().for_each(|x| *x /= n);
    value.iter_mut().for_each(|x| *x /= n);
    let per_layer = key.iter().zip(&value).map(|(k, v)| k + v).collect();
    Ok(FisherWeights {
        per_layer,
        key,
        value,
        corpus_hash: corpus.hash(),
        seed: corpus.seed,
        n_sequences: corpus.len(),
    })
}

/// Merged prefix plus the weights that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    pub merged: Matrix,
    pub weights: Vec<f64>,
    pub warning: Option<String>,
}

/// Layer weights for one group. `fisher` holds the group's `f_l` values.
pub fn merge_weights(strategy: MergeStrategy, m: usize, fisher: Option<&[f64]>) -> Result<(Vec<f64>, Option<String>)> {
    let uniform = vec![1.0 / m as f64; m];
    Ok(match strategy {
        MergeStrategy::Mean => (uniform, None),
        MergeStrategy::Shallow => ((0..m).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect(), None),
        MergeStrategy::Deep => ((0..m).map(|i| if i + 1 == m { 1.0 } else { 0.0 }).collect(), None),
        MergeStrategy::Fisher => {
            let Some(f) = fisher else { bail!(Config, "fisher merge needs fisher weights") };
            if f.len() != m {
                bail!(Config, "{} fisher weights for a group of {m}", f.len());
            }
            if f.iter().any(|v| !v.is_finite() || *v < 0.0) {
                bail!(Numeric, "fisher weights must be finite and nonnegative");
            }
            let c: f64 = f.iter().sum();
            if c == 0.0 {
                (uniform, Some("all-zero fisher weights; fell back to mean merge".to_string()))
            } else {
                (f.iter().map(|v| v / c).collect(), None)
            }
        }
    })
}

/// `Σ_l w_l H^l` with weights from `strategy`.
pub fn merge_group(prefixes: &[Matrix], strategy: MergeStrategy, fisher: Option<&[f64]>) -> Result<MergeOutcome> {
    let Some(first) = prefixes.first() else { bail!(Input, "no prefixes to merge") };
    if prefixes.iter().any(|h| h.shape() != first.shape()) {
        bail!(Input, "prefixes to merge differ in shape");
    }
    let (weights, warning) = merge_weights(strategy, prefixes.len(), fisher)?;
    let mut acc = vec![0.0f64; first.data().len()];
    for (h, &w) in prefixes.iter().zip(&weights) {
        if w == 0.0 {
            continue;
        }
        for (a, &v) in acc.iter_mut().zip(h.data()) {
            *a += w * v as f64;
        }
    }
    let merged = Matrix::from_vec(first.rows(), first.cols(), acc.into_iter().map(|v| v as f32).collect())?;
    Ok(MergeOutcome { merged, weights, warning })
}

/// Merges every group the plan selects. Returns warnings from fallback merges.
pub fn apply_plan(store: &mut LatentCacheStore, plan: &BudgetPlan, fisher: Option<&FisherWeights>) -> Result<Vec<String>> {
    let mut warnings = Vec::new();
    for &g in &plan.merged {
        let layers = store.layout().group(g);
        let f = fisher.map(|f| &f.per_layer[layers.clone()]);
        let out = merge_group(store.group_prefixes(g)?, plan.strategy, f)?;
        if let Some(w) = out.warning {
            log::warn!("group {g}: {w}");
            warnings.push(format!("group {g}: {w}"));
        }
        store.merge_group(g, out.merged)?;
    }
    Ok(warnings)
}

/// Scores the store's groups, allocates a budget and merges in one go.
///
/// `decode_tokens` is the number of decode steps the caller will run; it
/// enters the ratio so the target holds over the whole session.
pub fn compress_after_prefill(
    store: &mut LatentCacheStore,
    d_kv: usize,
    target_ratio: f64,
    strategy: MergeStrategy,
    variant: ScoreVariant,
    fisher: Option<&FisherWeights>,
    decode_tokens: usize,
) -> Result<(BudgetPlan, Vec<String>)> {
    let layout = store.layout();
    let shape = BudgetShape {
        n_layers: layout.n_layers(),
        group_size: layout.group_size(),
        d_kv,
        rank: store.rank(),
        prefill_tokens: store.prefix_len(),
        decode_tokens,
    };
    let scores = score_groups(store, variant)?;
    let plan = allocate_budget(&scores, target_ratio, &shape, strategy)?;
    let warnings = apply_plan(store, &plan, fisher)?;
    Ok((plan, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gen_toy_model, ModelConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::gaussian(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn score_extremes() {
        let h = gaussian(10, 6, 1);
        assert!((group_score(&h, &h).unwrap() - 1.0).abs() < 1e-12);
        assert!((group_score(&h, &h.scale(-1.0)).unwrap() + 1.0).abs() < 1e-12);
        assert!(group_score(&Matrix::<f32>::zeros(0, 6), &Matrix::zeros(0, 6)).is_err());
        assert!(group_score(&h, &gaussian(9, 6, 2)).is_err());
    }

    #[test]
    fn score_against_direct_computation() {
        let (a, b) = (gaussian(10, 6, 3), gaussian(10, 6, 4));
        let mut expect = 0.0;
        for t in 0..10 {
            let (x, y) = (a.row(t), b.row(t));
            let d: f64 = x.iter().zip(y).map(|(p, q)| *p as f64 * *q as f64).sum();
            let nx: f64 = x.iter().map(|p| (*p as f64).powi(2)).sum::<f64>().sqrt();
            let ny: f64 = y.iter().map(|p| (*p as f64).powi(2)).sum::<f64>().sqrt();
            expect += d / (nx * ny);
        }
        assert!((group_score(&a, &b).unwrap() - expect / 10.0).abs() < 1e-6);
    }

    #[test]
    fn zero_rows_score_zero() {
        let a = Matrix::<f32>::from_vec(2, 2, vec![0., 0., 1., 0.]).unwrap();
        let b = Matrix::<f32>::from_vec(2, 2, vec![1., 1., 1., 0.]).unwrap();
        assert!((group_score(&a, &b).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn full_score_cases() {
        let h = gaussian(8, 5, 5);
        assert!((group_score_full(&[h.clone(), h.clone(), h.clone(), h.clone()]).unwrap() - 1.0).abs() < 1e-12);
        let g = gaussian(8, 5, 6);
        assert_eq!(group_score_full(&[h.clone(), g.clone()]).unwrap(), group_score(&h, &g).unwrap());
        let hs: Vec<Matrix> = (0..4).map(|s| gaussian(8, 5, 10 + s)).collect();
        let mut brute = 0.0;
        for l in 0..3 {
            for t in 0..8 {
                brute += row_cosine(hs[l].row(t), hs[l + 1].row(t));
            }
        }
        assert!((group_score_full(&hs).unwrap() - brute / (3.0 * 8.0)).abs() < 1e-6);
    }

    #[test]
    fn top_k_with_ties() {
        assert_eq!(select_top_k(&[0.9, 0.2, 0.8, 0.5], 2), vec![0, 2]);
        assert_eq!(select_top_k(&[0.5, 0.5, 0.5], 2), vec![0, 1]);
        assert_eq!(select_top_k(&[0.1, 0.7, 0.7], 1), vec![1]);
    }

    #[test]
    fn toy_allocation() {
        // L=8, m=4, d_kv=32, r=45: cost(0)=360, cost(1)=225, cost(2)=90 per token vs 512.
        let shape = BudgetShape::per_token(8, 4, 32, 45);
        let scores = [0.3, 0.6];
        let plan = allocate_budget(&scores, 0.2, &shape, MergeStrategy::Mean).unwrap();
        assert!(plan.merged.is_empty());
        let plan = allocate_budget(&scores, 0.5, &shape, MergeStrategy::Mean).unwrap();
        assert_eq!(plan.merged, vec![1]);
        assert_eq!(plan.predicted_elements, 225);
        let plan = allocate_budget(&scores, 0.6, &shape, MergeStrategy::Mean).unwrap();
        assert_eq!(plan.merged, vec![0, 1]);
        assert!(matches!(allocate_budget(&scores, 0.9, &shape, MergeStrategy::Mean), Err(crate::Error::Config(_))));
        assert!(allocate_budget(&scores, 1.0, &shape, MergeStrategy::Mean).is_err());
    }

    #[test]
    fn four_group_selection() {
        let shape = BudgetShape::per_token(16, 4, 32, 45);
        // cost(k) = 45k + 180(4-k); need ratio 1 - cost/1024 >= 0.5 → cost <= 512 → k >= 2 (cost 450).
        let plan = allocate_budget(&[0.9, 0.2, 0.8, 0.5], 0.5, &shape, MergeStrategy::Fisher).unwrap();
        assert_eq!(plan.merged, vec![0, 2]);
    }

    #[test]
    fn llama_shaped_maximum() {
        let shape = BudgetShape::per_token(32, 4, 1024, 2867);
        assert_eq!(shape.cost(8), 22_936);
        assert_eq!(shape.baseline_elements(), 65_536);
        assert!((shape.max_ratio() - 0.650).abs() < 1e-3);
        assert!(allocate_budget(&[0.0; 8], 0.6, &shape, MergeStrategy::Mean).is_ok());
    }

    #[test]
    fn zero_target_with_wide_latents() {
        // r·m > 2·d_kv·m: unmerged latents exceed the original cache.
        let shape = BudgetShape::per_token(8, 4, 8, 20);
        assert!(shape.ratio(0) < 0.0);
        let plan = allocate_budget(&[0.1, 0.2], 0.0, &shape, MergeStrategy::Mean).unwrap();
        let k = plan.merged.len();
        assert!(k > 0 && shape.ratio(k) >= 0.0 && shape.ratio(k - 1) < 0.0);
    }

    #[test]
    fn merge_arithmetic() {
        let ones = Matrix::from_fn(3, 2, |_, _| 1.0);
        let zeros = Matrix::zeros(3, 2);
        let out = merge_group(&[ones.clone(), zeros.clone()], MergeStrategy::Fisher, Some(&[3.0, 1.0])).unwrap();
        assert!(out.merged.data().iter().all(|v| *v == 0.75));
        let shallow = merge_group(&[ones.clone(), zeros.clone()], MergeStrategy::Shallow, None).unwrap();
        assert_eq!(shallow.merged, ones);
        let deep = merge_group(&[ones, zeros.clone()], MergeStrategy::Deep, None).unwrap();
        assert_eq!(deep.merged, zeros);
    }

    #[test]
    fn uniform_fisher_equals_mean() {
        let hs: Vec<Matrix> = (0..4).map(|s| gaussian(6, 5, 20 + s)).collect();
        let f = merge_group(&hs, MergeStrategy::Fisher, Some(&[2.5; 4])).unwrap();
        let m = merge_group(&hs, MergeStrategy::Mean, None).unwrap();
        assert!(f.merged.max_abs_diff(&m.merged) <= 1e-7);
    }

    #[test]
    fn zero_fisher_falls_back_to_mean() {
        let hs: Vec<Matrix> = (0..2).map(|s| gaussian(4, 3, 30 + s)).collect();
        let f = merge_group(&hs, MergeStrategy::Fisher, Some(&[0.0, 0.0])).unwrap();
        assert!(f.warning.is_some());
        assert_eq!(f.merged, merge_group(&hs, MergeStrategy::Mean, None).unwrap().merged);
        assert!(merge_group(&hs, MergeStrategy::Fisher, None).is_err());
    }

    #[test]
    fn fisher_is_nonnegative_and_mean_invariant() {
        let w = gen_toy_model(&ModelConfig::micro(), 2).unwrap();
        let corpus = Corpus::markov(4, 3, 12);
        let f = estimate_fisher(&w, &corpus).unwrap();
        assert!(f.per_layer.iter().all(|v| *v >= 0.0 && v.is_finite()));
        let doubled = Corpus {
            sequences: corpus.sequences.iter().flat_map(|s| [s.clone(), s.clone()]).collect(),
            seed: corpus.seed,
        };
        let g = estimate_fisher(&w, &doubled).unwrap();
        for (a, b) in f.per_layer.iter().zip(&g.per_layer) {
            assert!((a - b).abs() <= 1e-6 * a.max(1.0));
        }
        assert_eq!(f.corpus_hash, corpus.hash());
        assert!(estimate_fisher(&w, &Corpus { sequences: vec![], seed: None }).is_err());
        assert!(estimate_fisher(&w, &Corpus { sequences: vec![vec![1]], seed: None }).is_err());
    }

    proptest! {
        #[test]
        fn selection_is_scale_invariant(scores in proptest::collection::vec(-1.0f64..1.0, 2), scale in 0.01f64..100.0, rho in 0.0f64..0.8) {
            let shape = BudgetShape::per_token(8, 4, 32, 45);
            let a = allocate_budget(&scores, rho, &shape, MergeStrategy::Mean);
            let scaled: Vec<f64> = scores.iter().map(|s| s * scale).collect();
            let b = allocate_budget(&scaled, rho, &shape, MergeStrategy::Mean);
            match (a, b) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a.merged, b.merged),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false),
            }
        }

        #[test]
        fn unreachable_means_no_k_works(n_groups in 1usize..6, m in 1usize..5, d_kv in 1usize..64, rank in 1usize..128, rho in 0.0f64..0.99) {
            let shape = BudgetShape::per_token(n_groups * m, m, d_kv, rank);
            let scores = vec![0.0; n_groups];
            match allocate_budget(&scores, rho, &shape, MergeStrategy::Mean) {
                Ok(plan) => {
                    let k = plan.merged.len();
                    prop_assert!(shape.ratio(k) >= rho);
                    prop_assert!(k == 0 || shape.ratio(k - 1) < rho);
                }
                Err(_) => prop_assert!((0..=n_groups).all(|k| shape.ratio(k) < rho)),
            }
        }

        #[test]
        fn mean_and_fisher_stay_in_convex_hull(fw in proptest::collection::vec(0.0f64..10.0, 3), seed in 0u64..1000) {
            let hs: Vec<Matrix> = (0..3).map(|s| gaussian(4, 3, seed * 3 + s)).collect();
            for (strategy, f) in [(MergeStrategy::Mean, None), (MergeStrategy::Fisher, Some(fw.as_slice()))] {
                let out = merge_group(&hs, strategy, f).unwrap();
                prop_assert!((out.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(out.weights.iter().all(|w| *w >= 0.0));
                for (i, v) in out.merged.data().iter().enumerate() {
                    let lo = hs.iter().map(|h| h.data()[i]).fold(f32::INFINITY, f32::min);
                    let hi = hs.iter().map(|h| h.data()[i]).fold(f32::NEG_INFINITY, f32::max);
                    prop_assert!(*v >= lo - 1e-6 && *v <= hi + 1e-6);
                }
            }
        }
    }
}
