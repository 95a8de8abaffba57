//! Latent KV cache and the CommonKV inference session.
//!
//! Each layer caches `h = x·A` (`A` shared by its group) instead of keys and
//! values. Keys are rebuilt every step as `RoPE(h·B_k)`; the value path goes
//! straight from attention-weighted latents to the residual stream through
//! the fused `M_q` matrices. After prefill, whole groups can be merged so that
//! all their layers read one shared prefix; decode tokens always get private
//! per-layer latents.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::TensorFile;
use crate::error::{bail, Result};
use crate::factorization::{FactorizedModel, GroupLayout};
use crate::model::{
    attention_probs, embed_tokens, mlp_block, output_logits, rms_norm, validate_tokens, ModelConfig, RopeTable,
};
use crate::tensor::Matrix;

/// `h = x·A`. Carries no positional information.
pub fn compute_latent(x: &Matrix, a: &Matrix) -> Matrix {
    x.matmul(a)
}

/// `K = RoPE(H·B_k)` at the given positions.
pub fn restore_keys(h: &Matrix, b_k: &Matrix, positions: &[usize], rope: &RopeTable) -> Result<Matrix> {
    rope.apply(&h.matmul(b_k), positions)
}

/// Causal attention over latents with the fused value path.
///
/// `q_rope` holds the last `n` tokens of the `h.rows()` visible ones. For each
/// query head `q`: `out += (P_q · H) · M_q`.
pub fn attend_latent(
    q_rope: &Matrix,
    h: &Matrix,
    positions: &[usize],
    b_k: &Matrix,
    fused: &[Matrix],
    rope: &RopeTable,
    config: &ModelConfig,
) -> Result<Matrix> {
    let keys = restore_keys(h, b_k, positions, rope)?;
    let (n, t, r) = (q_rope.rows(), h.rows(), h.cols());
    if n > t {
        bail!(Config, "{n} queries but only {t} cached latents");
    }
    let (d, dh) = (config.d_hidden, config.d_head);
    let past = t - n;
    let mut out = Matrix::zeros(n, d);
    let mut acc = vec![0.0f64; d];
    let mut ph = vec![0.0f64; r];
    for i in 0..n {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for q in 0..config.n_q_heads {
            let j = config.kv_head_of(q);
            let p = attention_probs(&q_rope.row(i)[q * dh..(q + 1) * dh], past + i + 1, |u| &keys.row(u)[j * dh..(j + 1) * dh]);
            ph.iter_mut().for_each(|v| *v = 0.0);
            for (u, &pu) in p.iter().enumerate() {
                for (a, &hv) in ph.iter_mut().zip(h.row(u)) {
                    *a += pu * hv as f64;
                }
            }
            let m = &fused[q];
            for (k, &phk) in ph.iter().enumerate() {
                for (a, &mv) in acc.iter_mut().zip(m.row(k)) {
                    *a += phk * mv as f64;
                }
            }
        }
        for (o, a) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    Ok(out)
}

/// Reference path: restore `V = H·B_v`, attend per head, then apply `W_o`.
#[allow(clippy::too_many_arguments)]
pub fn attend_latent_unfused(
    q_rope: &Matrix,
    h: &Matrix,
    positions: &[usize],
    b_k: &Matrix,
    b_v: &Matrix,
    w_o: &Matrix,
    rope: &RopeTable,
    config: &ModelConfig,
) -> Result<Matrix> {
    let keys = restore_keys(h, b_k, positions, rope)?;
    let values = h.matmul(b_v);
    let (n, t) = (q_rope.rows(), h.rows());
    let dh = config.d_head;
    let past = t - n;
    let mut heads = Matrix::zeros(n, config.d_hidden);
    for i in 0..n {
        for q in 0..config.n_q_heads {
            let j = config.kv_head_of(q);
            let p = attention_probs(&q_rope.row(i)[q * dh..(q + 1) * dh], past + i + 1, |u| &keys.row(u)[j * dh..(j + 1) * dh]);
            let mut acc = vec![0.0f64; dh];
            for (u, &pu) in p.iter().enumerate() {
                for (a, &v) in acc.iter_mut().zip(&values.row(u)[j * dh..(j + 1) * dh]) {
                    *a += pu * v as f64;
                }
            }
            for (o, a) in heads.row_mut(i)[q * dh..(q + 1) * dh].iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
    }
    Ok(heads.matmul(w_o))
}

#[derive(Debug, Clone, PartialEq)]
pub enum GroupPrefix {
    PerLayer(Vec<Matrix>),
    Shared(Matrix),
}

/// Stored element counts per part of the cache.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheAudit {
    pub merged_prefix: usize,
    pub unmerged_prefix: usize,
    pub suffix: usize,
}

impl CacheAudit {
    pub fn total(&self) -> usize {
        self.merged_prefix + self.unmerged_prefix + self.suffix
    }
}

/// Token-major latent vectors of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCacheStore {
    layout: GroupLayout,
    rank: usize,
    prefixes: Vec<GroupPrefix>,
    suffixes: Vec<Matrix>,
    prefix_positions: Vec<usize>,
    suffix_positions: Vec<usize>,
}

impl LatentCacheStore {
    pub fn new(layout: GroupLayout, rank: usize) -> Self {
        let prefixes = layout
            .groups()
            .iter()
            .map(|g| GroupPrefix::PerLayer(vec![Matrix::zeros(0, rank); g.len()]))
            .collect();
        let suffixes = vec![Matrix::zeros(0, rank); layout.n_layers()];
        Self { layout, rank, prefixes, suffixes, prefix_positions: Vec::new(), suffix_positions: Vec::new() }
    }

    pub fn layout(&self) -> &GroupLayout {
        &self.layout
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_positions.len()
    }

    pub fn suffix_len(&self) -> usize {
        self.suffix_positions.len()
    }

    pub fn len(&self) -> usize {
        self.prefix_len() + self.suffix_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_merged(&self, group: usize) -> bool {
        matches!(self.prefixes[group], GroupPrefix::Shared(_))
    }

    pub fn merged_groups(&self) -> Vec<usize> {
        (0..self.prefixes.len()).filter(|&g| self.is_merged(g)).collect()
    }

    /// Prefix read by `layer`: the group's shared prefix when merged, else its own.
    pub fn prefix_for_layer(&self, layer: usize) -> &Matrix {
        let g = self.layout.group_of(layer);
        match &self.prefixes[g] {
            GroupPrefix::Shared(h) => h,
            GroupPrefix::PerLayer(hs) => &hs[layer - self.layout.group(g).start],
        }
    }

    pub fn suffix(&self, layer: usize) -> &Matrix {
        &self.suffixes[layer]
    }

    /// Prefix followed by the layer's own decode suffix.
    pub fn visible(&self, layer: usize) -> Matrix {
        Matrix::vcat(&[self.prefix_for_layer(layer), &self.suffixes[layer]]).expect("same rank")
    }

    pub fn positions(&self) -> Vec<usize> {
        self.prefix_positions.iter().chain(&self.suffix_positions).copied().collect()
    }

    /// Per-layer prefixes of an unmerged group.
    pub fn group_prefixes(&self, group: usize) -> Result<&[Matrix]> {
        match &self.prefixes[group] {
            GroupPrefix::PerLayer(hs) => Ok(hs),
            GroupPrefix::Shared(_) => bail!(Input, "group {group} is already merged"),
        }
    }

    /// Overwrites one layer's prefix of an unmerged group.
    pub fn set_layer_prefix(&mut self, layer: usize, h: Matrix) -> Result<()> {
        if h.shape() != (self.prefix_len(), self.rank) {
            bail!(Config, "prefix shape {:?}, expected ({}, {})", h.shape(), self.prefix_len(), self.rank);
        }
        let g = self.layout.group_of(layer);
        let start = self.layout.group(g).start;
        match &mut self.prefixes[g] {
            GroupPrefix::PerLayer(hs) => hs[layer - start] = h,
            GroupPrefix::Shared(_) => bail!(Input, "group {g} is merged; its prefix is immutable"),
        }
        Ok(())
    }

    /// Replaces a group's per-layer prefixes by one shared prefix. Irreversible.
    pub fn merge_group(&mut self, group: usize, merged: Matrix) -> Result<()> {
        if merged.shape() != (self.prefix_len(), self.rank) {
            bail!(Config, "merged prefix shape {:?}, expected ({}, {})", merged.shape(), self.prefix_len(), self.rank);
        }
        if !merged.is_finite() {
            bail!(Numeric, "merged prefix of group {group} is not finite");
        }
        if self.is_merged(group) {
            bail!(Input, "group {group} is already merged");
        }
        self.prefixes[group] = GroupPrefix::Shared(merged);
        Ok(())
    }

    fn append_prefix(&mut self, layer: usize, h: &Matrix) -> Result<()> {
        let g = self.layout.group_of(layer);
        let start = self.layout.group(g).start;
        let GroupPrefix::PerLayer(hs) = &mut self.prefixes[g] else {
            bail!(Input, "cannot prefill into merged group {g}");
        };
        for i in 0..h.rows() {
            hs[layer - start].push_row(h.row(i))?;
        }
        Ok(())
    }

    fn append_suffix(&mut self, layer: usize, h: &Matrix) -> Result<()> {
        for i in 0..h.rows() {
            self.suffixes[layer].push_row(h.row(i))?;
        }
        Ok(())
    }

    pub fn audit(&self) -> CacheAudit {
        let mut audit = CacheAudit::default();
        for p in &self.prefixes {
            match p {
                GroupPrefix::Shared(h) => audit.merged_prefix += h.data().len(),
                GroupPrefix::PerLayer(hs) => audit.unmerged_prefix += hs.iter().map(|h| h.data().len()).sum::<usize>(),
            }
        }
        audit.suffix = self.suffixes.iter().map(|h| h.data().len()).sum();
        audit
    }

    /// SHA-256 of a group's prefix bytes.
    pub fn prefix_checksum(&self, group: usize) -> String {
        let mut hasher = Sha256::new();
        let mut feed = |m: &Matrix| {
            for v in m.data() {
                hasher.update(v.to_le_bytes());
            }
        };
        match &self.prefixes[group] {
            GroupPrefix::Shared(h) => feed(h),
            GroupPrefix::PerLayer(hs) => hs.iter().for_each(feed),
        }
        hex::encode(hasher.finalize())
    }

    /// Debug dump: one tensor per stored prefix and suffix, positions in metadata.
    pub fn to_container(&self) -> Result<TensorFile> {
        let mut f = TensorFile::new();
        f.set_meta("kind", "latent_cache");
        f.set_meta("rank", self.rank);
        f.set_meta("group_size", self.layout.group_size());
        f.set_meta("prefix_positions", self.prefix_positions.clone());
        f.set_meta("suffix_positions", self.suffix_positions.clone());
        f.set_meta("merged_groups", self.merged_groups());
        for (g, p) in self.prefixes.iter().enumerate() {
            match p {
                GroupPrefix::Shared(h) => f.insert(format!("groups.{g}.shared"), h.clone())?,
                GroupPrefix::PerLayer(hs) => {
                    for (i, h) in hs.iter().enumerate() {
                        f.insert(format!("layers.{}.prefix", self.layout.group(g).start + i), h.clone())?;
                    }
                }
            }
        }
        for (l, h) in self.suffixes.iter().enumerate() {
            f.insert(format!("layers.{l}.suffix"), h.clone())?;
        }
        Ok(f)
    }
}

/// Element counts actually held by `store`, split by part.
pub fn cache_bytes(store: &LatentCacheStore) -> CacheAudit {
    store.audit()
}

/// One CommonKV inference session: a latent store plus the shared rope table.
#[derive(Debug, Clone)]
pub struct LatentSession<'m> {
    model: &'m FactorizedModel,
    rope: RopeTable,
    store: LatentCacheStore,
    record_rope: bool,
    rope_fingerprints: Vec<u64>,
}

impl<'m> LatentSession<'m> {
    pub fn new(model: &'m FactorizedModel) -> Self {
        let c = &model.config;
        Self {
            model,
            rope: RopeTable::new(c.d_head, c.max_seq, c.rope_theta),
            store: LatentCacheStore::new(model.layout().clone(), model.rank()),
            record_rope: false,
            rope_fingerprints: Vec::new(),
        }
    }

    pub fn model(&self) -> &FactorizedModel {
        self.model
    }

    pub fn store(&self) -> &LatentCacheStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut LatentCacheStore {
        &mut self.store
    }

    pub fn rope(&self) -> &RopeTable {
        &self.rope
    }

    /// Records, per layer of every decode step, a hash of the rope rows it consumed.
    pub fn record_rope_usage(&mut self, on: bool) {
        self.record_rope = on;
    }

    pub fn rope_fingerprints(&self) -> &[u64] {
        &self.rope_fingerprints
    }

    /// Processes the prompt into per-layer latent prefixes. Requires an empty store.
    pub fn prefill(&mut self, tokens: &[u8]) -> Result<Matrix> {
        if !self.store.is_empty() {
            bail!(Input, "prefill into a non-empty latent cache");
        }
        self.step(tokens, true)
    }

    /// One decode step; appends a private latent for `token` to every layer.
    pub fn decode(&mut self, token: u8) -> Result<Matrix> {
        self.step(&[token], false)
    }

    fn step(&mut self, tokens: &[u8], prefill: bool) -> Result<Matrix> {
        let model = self.model;
        let cfg = &model.config;
        let positions = validate_tokens(cfg, self.store.len(), tokens.len())?;
        let mut x = embed_tokens(&model.embed, tokens);
        for (l, layer) in model.layers.iter().enumerate() {
            let (normed, _) = rms_norm(&x, &layer.attn_norm);
            let q = self.rope.apply(&normed.matmul(&layer.wq), &positions)?;
            let h_new = compute_latent(&normed, model.factors.shared_for_layer(l));
            if prefill {
                self.store.append_prefix(l, &h_new)?;
            } else {
                self.store.append_suffix(l, &h_new)?;
            }
            let h = self.store.visible(l);
            let mut vis_positions = self.store.positions();
            vis_positions.extend(&positions);
            if self.record_rope && !prefill {
                self.rope_fingerprints.push(self.fingerprint(&vis_positions)?);
            }
            let out = attend_latent(&q, &h, &vis_positions, &model.factors.b_k[l], &model.factors.fused[l], &self.rope, cfg)?;
            let x_mid = x.add(&out);
            x = mlp_block(&x_mid, &layer.mlp_norm, &layer.w_up, &layer.w_down).out;
        }
        if prefill {
            self.store.prefix_positions.extend(&positions);
        } else {
            self.store.suffix_positions.extend(&positions);
        }
        let (logits, _, _) = output_logits(&x, &model.final_norm, &model.head);
        Ok(logits)
    }

    fn fingerprint(&self, positions: &[usize]) -> Result<u64> {
        let mut hasher = DefaultHasher::new();
        for &p in positions {
            let (c, s) = self.rope.position(p)?;
            for v in c.iter().chain(s) {
                v.to_bits().hash(&mut hasher);
            }
        }
        Ok(hasher.finish())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorization::transform_model;
    use crate::model::{forward_baseline, gen_toy_model, KvCache, Mode, ModelWeights};
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> ModelWeights {
        gen_toy_model(&ModelConfig::toy(), 42).unwrap()
    }

    fn text(n: usize, seed: u64) -> Vec<u8> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random::<u8>()).collect()
    }

    #[test]
    fn latent_of_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Matrix::<f32>::gaussian(5, 8, 1.0, &mut rng);
        assert_eq!(compute_latent(&x, &Matrix::identity(8)), x);
        assert_eq!(compute_latent(&Matrix::zeros(5, 8), &x.transpose()).max_abs(), 0.0);
    }

    #[test]
    fn orthonormal_columns_preserve_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Matrix::<f64>::gaussian(8, 8, 1.0, &mut rng);
        let q = DMatrix::from_fn(8, 8, |i, j| g.get(i, j)).qr().q();
        let a = Matrix::<f32>::from_fn(8, 8, |i, j| q[(i, j)]);
        let x = Matrix::<f32>::gaussian(2, 8, 1.0, &mut rng);
        let h = compute_latent(&x, &a);
        let before = crate::tensor::row_cosine(x.row(0), x.row(1));
        let after = crate::tensor::row_cosine(h.row(0), h.row(1));
        assert!((before - after).abs() < 1e-6);
    }

    #[test]
    fn restored_keys_match_baseline_at_full_rank() {
        let w = toy();
        let f = transform_model(&w, 4, 1.0).unwrap();
        let toks = text(24, 3);
        let mut cache = KvCache::new(&w.config);
        forward_baseline(&w, &toks, Mode::Prefill, &mut cache).unwrap();
        let mut s = LatentSession::new(&f);
        s.prefill(&toks).unwrap();
        let positions = s.store().positions();
        for l in 0..8 {
            let k = restore_keys(s.store().prefix_for_layer(l), &f.factors.b_k[l], &positions, s.rope()).unwrap();
            assert!(k.max_abs_diff(&cache.keys(l)) < 1e-5, "layer {l}");
            let again = restore_keys(s.store().prefix_for_layer(l), &f.factors.b_k[l], &positions, s.rope()).unwrap();
            assert_eq!(k, again);
        }
    }

    #[test]
    fn zero_key_factor_restores_zero() {
        let rope = RopeTable::new(16, 8, 10_000.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = Matrix::<f32>::gaussian(3, 6, 1.0, &mut rng);
        let k = restore_keys(&h, &Matrix::zeros(6, 32), &[0, 1, 2], &rope).unwrap();
        assert_eq!(k.max_abs(), 0.0);
        assert!(matches!(restore_keys(&h, &Matrix::zeros(6, 32), &[0, 1, 8], &rope), Err(crate::Error::Capacity(_))));
    }

    #[test]
    fn singleton_attention_is_latent_times_fused() {
        let cfg = ModelConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rope = RopeTable::new(16, 8, 10_000.0);
        let h = Matrix::<f32>::gaussian(1, 10, 1.0, &mut rng);
        let q = Matrix::<f32>::gaussian(1, 64, 1.0, &mut rng);
        let b_k = Matrix::<f32>::gaussian(10, 32, 1.0, &mut rng);
        let fused: Vec<Matrix> = (0..4).map(|_| Matrix::gaussian(10, 64, 1.0, &mut rng)).collect();
        let out = attend_latent(&q, &h, &[0], &b_k, &fused, &rope, &cfg).unwrap();
        let mut expect = h.matmul(&fused[0]);
        for m in &fused[1..] {
            expect.add_assign(&h.matmul(m));
        }
        assert!(out.max_abs_diff(&expect) < 1e-5);
    }

    #[test]
    fn fused_matches_unfused() {
        let w = toy();
        let f = transform_model(&w, 4, 0.7).unwrap();
        let cfg = w.config;
        let rope = RopeTable::new(cfg.d_head, cfg.max_seq, cfg.rope_theta);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let positions: Vec<usize> = (0..12).collect();
        for l in [0, 5] {
            let x = Matrix::<f32>::gaussian(12, 64, 1.0, &mut rng);
            let h = compute_latent(&x, f.factors.shared_for_layer(l));
            let q = rope.apply(&x.matmul(&f.layers[l].wq), &positions).unwrap();
            let fused = attend_latent(&q, &h, &positions, &f.factors.b_k[l], &f.factors.fused[l], &rope, &cfg).unwrap();
            let unfused =
                attend_latent_unfused(&q, &h, &positions, &f.factors.b_k[l], &f.factors.b_v[l], &f.layers[l].wo, &rope, &cfg)
                    .unwrap();
            assert!(fused.max_abs_diff(&unfused) < 1e-5);
        }
    }

    #[test]
    fn prefill_and_decode_match_baseline_at_full_rank() {
        let w = toy();
        let f = transform_model(&w, 2, 1.0).unwrap();
        let toks = text(40, 5);
        let mut cache = KvCache::new(&w.config);
        let base = forward_baseline(&w, &toks[..32], Mode::Prefill, &mut cache).unwrap();
        let mut s = LatentSession::new(&f);
        let lat = s.prefill(&toks[..32]).unwrap();
        assert!(lat.max_abs_diff(&base) < 1e-4);
        for &t in &toks[32..] {
            let b = forward_baseline(&w, &[t], Mode::Decode, &mut cache).unwrap();
            let l = s.decode(t).unwrap();
            assert!(l.max_abs_diff(&b) < 1e-4);
        }
        assert!((0..8).all(|l| s.store().suffix(l).rows() == 8));
        assert_eq!(s.store().suffix_len(), 8);
    }

    #[test]
    fn decode_from_empty_cache() {
        let w = toy();
        let f = transform_model(&w, 4, 1.0).unwrap();
        let mut cache = KvCache::new(&w.config);
        let mut s = LatentSession::new(&f);
        for t in [7u8, 99, 200] {
            let b = forward_baseline(&w, &[t], Mode::Decode, &mut cache).unwrap();
            let l = s.decode(t).unwrap();
            assert!(l.max_abs_diff(&b) < 1e-5);
        }
        assert_eq!(s.store().prefix_len(), 0);
        assert_eq!(s.store().suffix_len(), 3);
    }

    #[test]
    fn audit_counts() {
        let w = toy();
        let f = transform_model(&w, 4, 0.7).unwrap();
        let mut s = LatentSession::new(&f);
        s.prefill(&text(100, 6)).unwrap();
        assert_eq!(s.store().audit().total(), 8 * 45 * 100);
        assert_eq!(s.store().to_container().unwrap().payload_len() / 4, 36_000);
        for g in 0..2 {
            let merged = s.store().group_prefixes(g).unwrap()[0].clone();
            s.store_mut().merge_group(g, merged).unwrap();
        }
        let audit = cache_bytes(s.store());
        assert_eq!(audit, CacheAudit { merged_prefix: 9000, unmerged_prefix: 0, suffix: 0 });
        assert_eq!(s.store().to_container().unwrap().payload_len() / 4, 9000);
        s.decode(1).unwrap();
        assert_eq!(s.store().audit().suffix, 8 * 45);
    }

    #[test]
    fn merged_prefix_is_immutable() {
        let w = toy();
        let f = transform_model(&w, 4, 0.7).unwrap();
        let mut s = LatentSession::new(&f);
        s.prefill(&text(10, 7)).unwrap();
        let h = s.store().group_prefixes(0).unwrap()[1].clone();
        s.store_mut().merge_group(0, h.clone()).unwrap();
        let before = s.store().prefix_checksum(0);
        for t in 0..5 {
            s.decode(t).unwrap();
        }
        assert_eq!(s.store().prefix_checksum(0), before);
        assert!(s.store_mut().set_layer_prefix(1, h.clone()).is_err());
        assert!(s.store_mut().merge_group(0, h).is_err());
        assert_ne!(s.store().suffix(0), s.store().suffix(1));
    }

    #[test]
    fn every_layer_reads_same_rope_rows() {
        let w = toy();
        let f = transform_model(&w, 4, 0.7).unwrap();
        let mut s = LatentSession::new(&f);
        s.prefill(&text(6, 8)).unwrap();
        s.record_rope_usage(true);
        for t in 0..3 {
            s.decode(t).unwrap();
        }
        let fp = s.rope_fingerprints();
        assert_eq!(fp.len(), 3 * 8);
        for step in fp.chunks(8) {
            assert!(step.iter().all(|v| *v == step[0]));
        }
        assert_ne!(fp[0], fp[8]);
    }
}
