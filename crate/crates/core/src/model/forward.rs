use crate::error::{bail, Result};
use crate::tensor::{dot, Matrix, Real};

use super::{ModelConfig, ModelWeights, RopeTable};

pub const RMS_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Process a prompt into an empty cache.
    Prefill,
    /// Process exactly one token, appending to the per-layer decode suffix.
    Decode,
}

/// Row-wise RMS normalization with gain. Returns the output and `1/rms` per row.
pub fn rms_norm<T: Real>(x: &Matrix<T>, gain: &Matrix<T>) -> (Matrix<T>, Vec<f64>) {
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let r = 1.0 / (dot(row, row) / d as f64 + RMS_EPS).sqrt();
        inv.push(r);
        for ((o, &v), &g) in out.row_mut(i).iter_mut().zip(row).zip(gain.row(0)) {
            *o = T::from_f64(v.f64() * r * g.f64());
        }
    }
    (out, inv)
}

#[inline]
pub fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

pub(crate) fn softmax_in_place(s: &mut [f64]) {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in s.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in s.iter_mut() {
        *v /= sum;
    }
}

/// Softmax of `q · k_u / sqrt(d_head)` over the first `n_visible` keys.
pub(crate) fn attention_probs<'a, T: Real>(
    q: &[T],
    n_visible: usize,
    key: impl Fn(usize) -> &'a [T],
) -> Vec<f64> {
    let scale = 1.0 / (q.len() as f64).sqrt();
    let mut s: Vec<f64> = (0..n_visible).map(|u| dot(q, key(u)) * scale).collect();
    softmax_in_place(&mut s);
    s
}

pub fn embed_tokens<T: Real>(embed: &Matrix<T>, tokens: &[u8]) -> Matrix<T> {
    let mut x = Matrix::zeros(0, embed.cols());
    for &t in tokens {
        x.push_row(embed.row(t as usize)).expect("embedding width");
    }
    x
}

/// Intermediates of the MLP half of a block.
pub struct MlpOut<T: Real> {
    pub out: Matrix<T>,
    pub inv_rms: Vec<f64>,
    pub normed: Matrix<T>,
    pub pre_act: Matrix<T>,
    pub act: Matrix<T>,
}

/// `x + silu(rms(x)·g · W_up) · W_down`.
pub fn mlp_block<T: Real>(x: &Matrix<T>, norm: &Matrix<T>, w_up: &Matrix<T>, w_down: &Matrix<T>) -> MlpOut<T> {
    let (normed, inv_rms) = rms_norm(x, norm);
    let pre_act = normed.matmul(w_up);
    let act = pre_act.map(silu);
    let out = x.add(&act.matmul(w_down));
    MlpOut { out, inv_rms, normed, pre_act, act }
}

/// Final norm and vocabulary projection. Returns `(logits, normed, inv_rms)`.
pub fn output_logits<T: Real>(x: &Matrix<T>, norm: &Matrix<T>, head: &Matrix<T>) -> (Matrix<T>, Matrix<T>, Vec<f64>) {
    let (normed, inv) = rms_norm(x, norm);
    (normed.matmul(head), normed, inv)
}

/// `-log softmax(logits)[target]`.
pub fn nll_from_logits<T: Real>(logits: &[T], target: u8) -> f64 {
    let max = logits.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln() + max;
    lse - logits[target as usize].f64()
}

pub(crate) fn validate_tokens(config: &ModelConfig, start: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        bail!(Input, "no tokens to process");
    }
    if start + n > config.max_seq {
        bail!(Capacity, "sequence of {} tokens exceeds max_seq {}", start + n, config.max_seq);
    }
    Ok((start..start + n).collect())
}

#[derive(Debug, Clone)]
struct KvBlock<T: Real> {
    k: Matrix<T>,
    v: Matrix<T>,
}

impl<T: Real> KvBlock<T> {
    fn empty(d_kv: usize) -> Self {
        Self { k: Matrix::zeros(0, d_kv), v: Matrix::zeros(0, d_kv) }
    }

    fn append(&mut self, k: &Matrix<T>, v: &Matrix<T>) {
        for i in 0..k.rows() {
            self.k.push_row(k.row(i)).expect("key width");
            self.v.push_row(v.row(i)).expect("value width");
        }
    }
}

/// Full-precision key/value cache of the baseline engine.
///
/// Keys are stored after rotary embedding. Prefill rows live in a prefix block
/// per layer; decode rows go to a per-layer suffix. Prefix blocks can be shared
/// by several layers after a raw-KV merge.
#[derive(Debug, Clone)]
pub struct KvCache<T: Real = f32> {
    config: ModelConfig,
    rope: RopeTable,
    prefix: Vec<Option<KvBlock<T>>>,
    layer_prefix: Vec<usize>,
    suffix: Vec<KvBlock<T>>,
    prefix_len: usize,
    suffix_len: usize,
}

impl<T: Real> KvCache<T> {
    pub fn new(config: &ModelConfig) -> Self {
        let d_kv = config.d_kv();
        Self {
            config: *config,
            rope: RopeTable::new(config.d_head, config.max_seq, config.rope_theta),
            prefix: (0..config.n_layers).map(|_| Some(KvBlock::empty(d_kv))).collect(),
            layer_prefix: (0..config.n_layers).collect(),
            suffix: (0..config.n_layers).map(|_| KvBlock::empty(d_kv)).collect(),
            prefix_len: 0,
            suffix_len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.prefix_len + self.suffix_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn suffix_len(&self) -> usize {
        self.suffix_len
    }

    pub fn rope(&self) -> &RopeTable {
        &self.rope
    }

    fn prefix_block(&self, layer: usize) -> &KvBlock<T> {
        self.prefix[self.layer_prefix[layer]].as_ref().expect("live prefix block")
    }

    pub fn key_row(&self, layer: usize, u: usize) -> &[T] {
        let block = self.prefix_block(layer);
        if u < block.k.rows() {
            block.k.row(u)
        } else {
            self.suffix[layer].k.row(u - block.k.rows())
        }
    }

    pub fn value_row(&self, layer: usize, u: usize) -> &[T] {
        let block = self.prefix_block(layer);
        if u < block.v.rows() {
            block.v.row(u)
        } else {
            self.suffix[layer].v.row(u - block.v.rows())
        }
    }

    /// All visible keys of a layer, prefix then suffix.
    pub fn keys(&self, layer: usize) -> Matrix<T> {
        Matrix::vcat(&[&self.prefix_block(layer).k, &self.suffix[layer].k]).expect("same width")
    }

    pub fn values(&self, layer: usize) -> Matrix<T> {
        Matrix::vcat(&[&self.prefix_block(layer).v, &self.suffix[layer].v]).expect("same width")
    }

    pub fn prefix_keys(&self, layer: usize) -> &Matrix<T> {
        &self.prefix_block(layer).k
    }

    pub fn prefix_values(&self, layer: usize) -> &Matrix<T> {
        &self.prefix_block(layer).v
    }

    pub fn is_shared(&self, layer: usize) -> bool {
        self.layer_prefix.iter().filter(|&&b| b == self.layer_prefix[layer]).count() > 1
    }

    /// Replaces the prefix of every layer in `layers` by one shared block.
    pub fn share_prefix(&mut self, layers: std::ops::Range<usize>, k: Matrix<T>, v: Matrix<T>) -> Result<()> {
        if layers.is_empty() || layers.end > self.config.n_layers {
            bail!(Config, "invalid layer range {layers:?}");
        }
        if k.shape() != (self.prefix_len, self.config.d_kv()) || v.shape() != k.shape() {
            bail!(Config, "shared prefix has shape {:?}, expected ({}, {})", k.shape(), self.prefix_len, self.config.d_kv());
        }
        let id = self.prefix.len();
        self.prefix.push(Some(KvBlock { k, v }));
        for l in layers {
            let old = self.layer_prefix[l];
            self.layer_prefix[l] = id;
            if !self.layer_prefix.contains(&old) {
                self.prefix[old] = None;
            }
        }
        Ok(())
    }

    /// Number of stored scalars across live prefix blocks and suffixes.
    pub fn element_count(&self) -> usize {
        let prefix: usize = self.prefix.iter().flatten().map(|b| b.k.data().len() + b.v.data().len()).sum();
        let suffix: usize = self.suffix.iter().map(|b| b.k.data().len() + b.v.data().len()).sum();
        prefix + suffix
    }

    fn append(&mut self, layer: usize, mode: Mode, k: &Matrix<T>, v: &Matrix<T>) {
        match mode {
            Mode::Prefill => {
                let id = self.layer_prefix[layer];
                self.prefix[id].as_mut().expect("live prefix block").append(k, v)
            }
            Mode::Decode => self.suffix[layer].append(k, v),
        }
    }

    fn commit(&mut self, mode: Mode, n: usize) {
        match mode {
            Mode::Prefill => self.prefix_len += n,
            Mode::Decode => self.suffix_len += n,
        }
    }
}

/// Per-layer intermediates recorded for the reverse pass and for profiling.
#[derive(Debug, Clone)]
pub struct LayerTrace<T: Real> {
    /// Residual stream entering the layer.
    pub x: Matrix<T>,
    pub inv_rms_attn: Vec<f64>,
    /// Normalized input consumed by the K/V projections.
    pub normed: Matrix<T>,
    pub q_rope: Matrix<T>,
    pub k_rope: Matrix<T>,
    pub v: Matrix<T>,
    /// Attention probabilities per query head, `tokens × tokens` (zero above the diagonal).
    pub probs: Vec<Matrix<f64>>,
    /// Concatenated head outputs before `W_o`.
    pub attn_heads: Matrix<T>,
    pub x_mid: Matrix<T>,
    pub inv_rms_mlp: Vec<f64>,
    pub mlp_normed: Matrix<T>,
    pub mlp_pre_act: Matrix<T>,
    pub mlp_act: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace<T: Real> {
    pub layers: Vec<LayerTrace<T>>,
    pub x_final: Matrix<T>,
    pub inv_rms_final: Vec<f64>,
    pub final_normed: Matrix<T>,
    pub positions: Vec<usize>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn hidden(&self, layer: usize) -> super::HiddenState<T> {
        super::HiddenState { x: self.layers[layer].normed.clone(), layer, positions: self.positions.clone() }
    }
}

/// Baseline engine step: logits for `tokens` (one row each), updating `cache`.
///
/// `Prefill` requires an empty cache; `Decode` takes exactly one token.
pub fn forward_baseline<T: Real>(
    weights: &ModelWeights<T>,
    tokens: &[u8],
    mode: Mode,
    cache: &mut KvCache<T>,
) -> Result<Matrix<T>> {
    run(weights, tokens, mode, cache, None)
}

pub(crate) fn forward_with_trace<T: Real>(weights: &ModelWeights<T>, tokens: &[u8]) -> Result<(Matrix<T>, ForwardTrace<T>)> {
    let mut cache = KvCache::new(&weights.config);
    let mut trace = ForwardTrace {
        layers: Vec::with_capacity(weights.config.n_layers),
        x_final: Matrix::zeros(0, 0),
        inv_rms_final: Vec::new(),
        final_normed: Matrix::zeros(0, 0),
        positions: Vec::new(),
    };
    let logits = run(weights, tokens, Mode::Prefill, &mut cache, Some(&mut trace))?;
    Ok((logits, trace))
}

fn run<T: Real>(
    weights: &ModelWeights<T>,
    tokens: &[u8],
    mode: Mode,
    cache: &mut KvCache<T>,
    mut trace: Option<&mut ForwardTrace<T>>,
) -> Result<Matrix<T>> {
    let cfg = &weights.config;
    match mode {
        Mode::Prefill if !cache.is_empty() => bail!(Input, "prefill into a non-empty cache"),
        Mode::Decode if tokens.len() != 1 => bail!(Input, "decode takes one token, got {}", tokens.len()),
        _ => {}
    }
    let past = cache.len();
    let positions = validate_tokens(cfg, past, tokens.len())?;
    let n = tokens.len();
    let (d, dh) = (cfg.d_hidden, cfg.d_head);
    let mut x = embed_tokens(&weights.embed, tokens);

    for (l, layer) in weights.layers.iter().enumerate() {
        let (normed, inv1) = rms_norm(&x, &layer.attn_norm);
        let q = cache.rope.apply(&normed.matmul(&layer.wq), &positions)?;
        let k = cache.rope.apply(&normed.matmul(&layer.wk), &positions)?;
        let v = normed.matmul(&layer.wv);
        cache.append(l, mode, &k, &v);

        let mut heads = Matrix::<T>::zeros(n, d);
        let mut probs_trace: Vec<Matrix<f64>> =
            if trace.is_some() { vec![Matrix::zeros(n, n); cfg.n_q_heads] } else { Vec::new() };
        let cache_ref = &*cache;
        for i in 0..n {
            let visible = past + i + 1;
            for h in 0..cfg.n_q_heads {
                let j = cfg.kv_head_of(h);
                let cols = j * dh..(j + 1) * dh;
                let p = attention_probs(&q.row(i)[h * dh..(h + 1) * dh], visible, |u| &cache_ref.key_row(l, u)[cols.clone()]);
                let mut acc = vec![0.0f64; dh];
                for (u, &pu) in p.iter().enumerate() {
                    for (a, &vv) in acc.iter_mut().zip(&cache_ref.value_row(l, u)[cols.clone()]) {
                        *a += pu * vv.f64();
                    }
                }
                for (o, a) in heads.row_mut(i)[h * dh..(h + 1) * dh].iter_mut().zip(&acc) {
                    *o = T::from_f64(*a);
                }
                if trace.is_some() {
                    probs_trace[h].row_mut(i)[..visible].copy_from_slice(&p);
                }
            }
        }
        let x_mid = x.add(&heads.matmul(&layer.wo));
        let mlp = mlp_block(&x_mid, &layer.mlp_norm, &layer.w_up, &layer.w_down);
        let x_next = mlp.out;
        if let Some(t) = trace.as_deref_mut() {
            t.layers.push(LayerTrace {
                x,
                inv_rms_attn: inv1,
                normed,
                q_rope: q,
                k_rope: k,
                v,
                probs: probs_trace,
                attn_heads: heads,
                x_mid,
                inv_rms_mlp: mlp.inv_rms,
                mlp_normed: mlp.normed,
                mlp_pre_act: mlp.pre_act,
                mlp_act: mlp.act,
            });
        }
        x = x_next;
    }
    cache.commit(mode, n);

    let (logits, final_normed, inv_final) = output_logits(&x, &weights.final_norm, &weights.head);
    if let Some(t) = trace {
        t.x_final = x;
        t.inv_rms_final = inv_final;
        t.final_normed = final_normed;
        t.positions = positions;
    }
    Ok(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gen_toy_model, ModelConfig};

    fn tokens(n: usize, salt: u8) -> Vec<u8> {
        (0..n).map(|i| (i as u8).wrapping_mul(37).wrapping_add(salt)).collect()
    }

    #[test]
    fn prefill_then_decode_matches_one_shot() {
        let w = gen_toy_model(&ModelConfig::toy(), 42).unwrap();
        let toks = tokens(17, 5);
        let mut full = KvCache::new(&w.config);
        let one_shot = forward_baseline(&w, &toks, Mode::Prefill, &mut full).unwrap();
        let mut c = KvCache::new(&w.config);
        forward_baseline(&w, &toks[..16], Mode::Prefill, &mut c).unwrap();
        let step = forward_baseline(&w, &toks[16..], Mode::Decode, &mut c).unwrap();
        let diff = step.row(0).iter().zip(one_shot.row(16)).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(diff <= 1e-5, "max diff {diff}");
        assert_eq!(c.prefix_len(), 16);
        assert_eq!(c.suffix_len(), 1);
    }

    #[test]
    fn first_token_key_is_unrotated() {
        let w = gen_toy_model(&ModelConfig::toy(), 1).unwrap();
        let mut c = KvCache::new(&w.config);
        forward_baseline(&w, &[65], Mode::Prefill, &mut c).unwrap();
        let x = embed_tokens(&w.embed, &[65]);
        let (normed, _) = rms_norm(&x, &w.layers[0].attn_norm);
        assert_eq!(c.keys(0), normed.matmul(&w.layers[0].wk));
    }

    #[test]
    fn logits_are_deterministic() {
        let w = gen_toy_model(&ModelConfig::toy(), 9).unwrap();
        let toks = tokens(12, 1);
        let a = forward_baseline(&w, &toks, Mode::Prefill, &mut KvCache::new(&w.config)).unwrap();
        let b = forward_baseline(&w, &toks, Mode::Prefill, &mut KvCache::new(&w.config)).unwrap();
        let bytes = |m: &Matrix<f32>| m.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>();
        assert_eq!(bytes(&a), bytes(&b));
        assert_eq!(a.shape(), (12, 256));
    }

    #[test]
    fn overflow_is_capacity_error() {
        let cfg = ModelConfig { max_seq: 4, ..ModelConfig::micro() };
        let w = gen_toy_model(&cfg, 0).unwrap();
        let mut c = KvCache::new(&cfg);
        assert!(matches!(forward_baseline(&w, &[1, 2, 3, 4, 5], Mode::Prefill, &mut c), Err(crate::Error::Capacity(_))));
        forward_baseline(&w, &[1, 2, 3, 4], Mode::Prefill, &mut c).unwrap();
        assert!(matches!(forward_baseline(&w, &[1], Mode::Decode, &mut c), Err(crate::Error::Capacity(_))));
    }

    #[test]
    fn mode_preconditions() {
        let w = gen_toy_model(&ModelConfig::micro(), 0).unwrap();
        let mut c = KvCache::new(&w.config);
        assert!(forward_baseline(&w, &[1, 2], Mode::Decode, &mut c).is_err());
        forward_baseline(&w, &[1, 2], Mode::Prefill, &mut c).unwrap();
        assert!(matches!(forward_baseline(&w, &[3], Mode::Prefill, &mut c), Err(crate::Error::Input(_))));
    }

    #[test]
    fn shared_prefix_counts_once() {
        let w = gen_toy_model(&ModelConfig::toy(), 3).unwrap();
        let mut c = KvCache::new(&w.config);
        forward_baseline(&w, &tokens(10, 0), Mode::Prefill, &mut c).unwrap();
        assert_eq!(c.element_count(), 8 * 2 * 32 * 10);
        let (k, v) = (c.prefix_keys(0).clone(), c.prefix_values(0).clone());
        c.share_prefix(0..4, k, v).unwrap();
        assert_eq!(c.element_count(), 5 * 2 * 32 * 10);
        assert!(c.is_shared(2));
        assert!(!c.is_shared(5));
    }
}
