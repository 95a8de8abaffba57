//! Offline transform into shared-factor form.
//!
//! For a group of `m` consecutive layers the key and value projections are laid
//! side by side, `W_g = [W_k^l | W_v^l | ... | W_k^{l+m-1} | W_v^{l+m-1}]`
//! (`d_hidden × 2·m·d_kv`), and split by a rank-`r` SVD
//! `W_g ≈ (U_r √Σ_r)(√Σ_r V_rᵀ) = A · [B_k^l | B_v^l | ...]`. `A` is shared by
//! the group; each layer keeps its own `B_k`, `B_v`. The value factor is
//! folded into the output projection per query head so decode never
//! materializes values.

use std::ops::Range;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::TensorFile;
use crate::error::{bail, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::tensor::Matrix;

/// Consecutive, equal-sized layer groups covering `[0, n_layers)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupLayout {
    group_size: usize,
    groups: Vec<Range<usize>>,
}

impl GroupLayout {
    pub fn new(n_layers: usize, group_size: usize) -> Result<Self> {
        if group_size == 0 {
            bail!(Config, "group size must be positive");
        }
        if !n_layers.is_multiple_of(group_size) {
            bail!(Config, "{n_layers} layers cannot be split into groups of {group_size}");
        }
        let groups = (0..n_layers / group_size).map(|g| g * group_size..(g + 1) * group_size).collect();
        Ok(Self { group_size, groups })
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_layers(&self) -> usize {
        self.groups.len() * self.group_size
    }

    pub fn groups(&self) -> &[Range<usize>] {
        &self.groups
    }

    pub fn group(&self, g: usize) -> Range<usize> {
        self.groups[g].clone()
    }

    pub fn group_of(&self, layer: usize) -> usize {
        layer / self.group_size
    }
}

/// `[W_k^l | W_v^l | ... ]` for the layers of `group`.
pub fn concat_group_weights(weights: &ModelWeights, group: Range<usize>) -> Result<Matrix> {
    if group.is_empty() || group.end > weights.layers.len() {
        bail!(Config, "group {group:?} invalid for a {}-layer model", weights.layers.len());
    }
    let parts: Vec<&Matrix> = weights.layers[group].iter().flat_map(|l| [&l.wk, &l.wv]).collect();
    Matrix::hcat(&parts)
}

/// Rank-`r` split of one group's concatenated matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupFactors {
    /// `U_r √Σ_r`, d_hidden × r.
    pub a: Matrix,
    /// `√Σ_r V_rᵀ`, r × 2·m·d_kv, before slicing.
    pub right: Matrix,
    pub b_k: Vec<Matrix>,
    pub b_v: Vec<Matrix>,
    /// All singular values of `W_g`, descending.
    pub singular_values: Vec<f64>,
}

/// Truncated SVD split of `w_g`, sliced into `B_k`/`B_v` blocks of width `block_width`.
///
/// Each left singular vector is signed so its largest-magnitude entry is
/// positive (first such entry on ties).
pub fn factorize_group(w_g: &Matrix, rank: usize, block_width: usize) -> Result<GroupFactors> {
    let (rows, cols) = w_g.shape();
    let max_rank = rows.min(cols);
    if rank == 0 || rank > max_rank {
        bail!(Config, "rank {rank} outside [1, {max_rank}] for a {rows}x{cols} matrix");
    }
    if block_width == 0 || cols % (2 * block_width) != 0 {
        bail!(Config, "{cols} columns do not split into K/V blocks of width {block_width}");
    }
    let dense = DMatrix::<f64>::from_fn(rows, cols, |i, j| w_g.get(i, j) as f64);
    let svd = dense
        .try_svd(true, true, f64::EPSILON, 10_000)
        .ok_or_else(|| crate::Error::Numeric("SVD did not converge".into()))?;
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => bail!(Numeric, "SVD returned no singular vectors"),
    };
    let sigma = svd.singular_values;
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    if sigma.iter().any(|s| !s.is_finite()) {
        bail!(Numeric, "non-finite singular values");
    }

    let mut a = Matrix::zeros(rows, rank);
    let mut right = Matrix::zeros(rank, cols);
    for (c, &idx) in order.iter().take(rank).enumerate() {
        let col = u.column(idx);
        let mut pivot = 0;
        for i in 1..rows {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        let root = sigma[idx].sqrt();
        for i in 0..rows {
            a.set(i, c, (sign * col[i] * root) as f32);
        }
        for j in 0..cols {
            right.set(c, j, (sign * v_t[(idx, j)] * root) as f32);
        }
    }
    let n_layers = cols / (2 * block_width);
    let block = |i: usize| right.slice_cols(i * block_width..(i + 1) * block_width);
    let b_k = (0..n_layers).map(|l| block(2 * l)).collect();
    let b_v = (0..n_layers).map(|l| block(2 * l + 1)).collect();
    let singular_values = order.iter().map(|&i| sigma[i]).collect();
    Ok(GroupFactors { a, right, b_k, b_v, singular_values })
}

/// `M_q = B_v[:, cols(kv(q))] · W_o[rows(q), :]` for every query head `q`.
pub fn fuse_value_output(b_v: &Matrix, w_o: &Matrix, config: &ModelConfig) -> Vec<Matrix> {
    let dh = config.d_head;
    (0..config.n_q_heads)
        .map(|q| {
            let j = config.kv_head_of(q);
            let v_slice = b_v.slice_cols(j * dh..(j + 1) * dh);
            let o_rows = w_o.slice_rows(q * dh..(q + 1) * dh);
            v_slice.matmul(&o_rows)
        })
        .collect()
}

/// Rank used by the transform: `round(fraction · d_hidden)` clamped to `[1, min(d_hidden, 2·m·d_kv)]`.
pub fn derive_rank(rank_fraction: f64, config: &ModelConfig, group_size: usize) -> Result<usize> {
    if !(rank_fraction > 0.0 && rank_fraction <= 1.0) {
        bail!(Config, "rank fraction must lie in (0, 1], got {rank_fraction}");
    }
    let cap = config.d_hidden.min(2 * group_size * config.d_kv());
    Ok(((rank_fraction * config.d_hidden as f64).round() as usize).clamp(1, cap))
}

/// Relative Frobenius reconstruction error of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerError {
    pub layer: usize,
    pub key: f64,
    pub value: f64,
}

/// Sidecar summary of a transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformReport {
    pub rank: usize,
    pub rank_fraction: f64,
    pub group_size: usize,
    pub groups: Vec<Range<usize>>,
    pub layer_errors: Vec<LayerError>,
    pub singular_values: Vec<Vec<f64>>,
}

/// Shared factors of every group plus per-layer right factors and fused matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedFactorization {
    pub layout: GroupLayout,
    pub rank: usize,
    /// `A` per group.
    pub shared: Vec<Matrix>,
    pub b_k: Vec<Matrix>,
    pub b_v: Vec<Matrix>,
    /// `M_q` per layer, one per query head.
    pub fused: Vec<Vec<Matrix>>,
    pub errors: Vec<LayerError>,
    pub singular_values: Vec<Vec<f64>>,
}

impl SharedFactorization {
    pub fn shared_for_layer(&self, layer: usize) -> &Matrix {
        &self.shared[self.layout.group_of(layer)]
    }
}

/// Everything a layer needs besides its K/V factors.
#[derive(Debug, Clone, PartialEq)]
pub struct RetainedLayer {
    pub attn_norm: Matrix,
    pub wq: Matrix,
    pub mlp_norm: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
    /// Kept only for the unfused verification path.
    pub wv: Matrix,
    pub wo: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedModel {
    pub config: ModelConfig,
    pub rank_fraction: f64,
    pub factors: SharedFactorization,
    pub embed: Matrix,
    pub layers: Vec<RetainedLayer>,
    pub final_norm: Matrix,
    pub head: Matrix,
}

/// Factorizes every group of `weights` at `r = round(rank_fraction · d_hidden)` (clamped).
pub fn transform_model(weights: &ModelWeights, group_size: usize, rank_fraction: f64) -> Result<FactorizedModel> {
    let config = weights.config;
    weights.validate()?;
    let layout = GroupLayout::new(config.n_layers, group_size)?;
    let rank = derive_rank(rank_fraction, &config, group_size)?;
    transform_with_rank(weights, layout, rank, rank_fraction)
}

/// Same as [`transform_model`] with an explicit rank.
pub fn transform_with_rank(
    weights: &ModelWeights,
    layout: GroupLayout,
    rank: usize,
    rank_fraction: f64,
) -> Result<FactorizedModel> {
    let config = weights.config;
    if layout.n_layers() != config.n_layers {
        bail!(Config, "layout covers {} layers, model has {}", layout.n_layers(), config.n_layers);
    }
    let per_group: Vec<GroupFactors> = layout
        .groups()
        .par_iter()
        .map(|g| factorize_group(&concat_group_weights(weights, g.clone())?, rank, config.d_kv()))
        .collect::<Result<_>>()?;

    let mut shared = Vec::with_capacity(layout.n_groups());
    let mut b_k = Vec::with_capacity(config.n_layers);
    let mut b_v = Vec::with_capacity(config.n_layers);
    let mut singular_values = Vec::with_capacity(layout.n_groups());
    for f in per_group {
        shared.push(f.a);
        b_k.extend(f.b_k);
        b_v.extend(f.b_v);
        singular_values.push(f.singular_values);
    }
    let mut errors = Vec::with_capacity(config.n_layers);
    let mut fused = Vec::with_capacity(config.n_layers);
    for (l, layer) in weights.layers.iter().enumerate() {
        let a = &shared[layout.group_of(l)];
        errors.push(LayerError {
            layer: l,
            key: a.matmul(&b_k[l]).relative_error(&layer.wk),
            value: a.matmul(&b_v[l]).relative_error(&layer.wv),
        });
        fused.push(fuse_value_output(&b_v[l], &layer.wo, &config));
    }
    let layers = weights
        .layers
        .iter()
        .map(|l| RetainedLayer {
            attn_norm: l.attn_norm.clone(),
            wq: l.wq.clone(),
            mlp_norm: l.mlp_norm.clone(),
            w_up: l.w_up.clone(),
            w_down: l.w_down.clone(),
            wv: l.wv.clone(),
            wo: l.wo.clone(),
        })
        .collect();
    Ok(FactorizedModel {
        config,
        rank_fraction,
        factors: SharedFactorization { layout, rank, shared, b_k, b_v, fused, errors, singular_values },
        embed: weights.embed.clone(),
        layers,
        final_norm: weights.final_norm.clone(),
        head: weights.head.clone(),
    })
}

impl FactorizedModel {
    pub fn rank(&self) -> usize {
        self.factors.rank
    }

    pub fn layout(&self) -> &GroupLayout {
        &self.factors.layout
    }

    pub fn report(&self) -> TransformReport {
        TransformReport {
            rank: self.factors.rank,
            rank_fraction: self.rank_fraction,
            group_size: self.factors.layout.group_size(),
            groups: self.factors.layout.groups().to_vec(),
            layer_errors: self.factors.errors.clone(),
            singular_values: self.factors.singular_values.clone(),
        }
    }

    pub fn to_container(&self) -> Result<TensorFile> {
        let f = &self.factors;
        let mut out = TensorFile::new();
        out.set_meta("kind", "factorized");
        out.set_meta("config", serde_json::to_value(self.config)?);
        out.set_meta("group_size", f.layout.group_size());
        out.set_meta("rank", f.rank);
        out.set_meta("rank_fraction", self.rank_fraction);
        out.set_meta("layer_errors", serde_json::to_value(&f.errors)?);
        out.set_meta("singular_values", serde_json::to_value(&f.singular_values)?);
        out.insert("embed", self.embed.clone())?;
        for (g, a) in f.shared.iter().enumerate() {
            out.insert(format!("groups.{g}.a"), a.clone())?;
        }
        for (l, layer) in self.layers.iter().enumerate() {
            out.insert(format!("layers.{l}.attn_norm"), layer.attn_norm.clone())?;
            out.insert(format!("layers.{l}.wq"), layer.wq.clone())?;
            out.insert(format!("layers.{l}.b_k"), f.b_k[l].clone())?;
            out.insert(format!("layers.{l}.b_v"), f.b_v[l].clone())?;
            for (q, m) in f.fused[l].iter().enumerate() {
                out.insert(format!("layers.{l}.fused.{q}"), m.clone())?;
            }
            out.insert(format!("layers.{l}.wv"), layer.wv.clone())?;
            out.insert(format!("layers.{l}.wo"), layer.wo.clone())?;
            out.insert(format!("layers.{l}.mlp_norm"), layer.mlp_norm.clone())?;
            out.insert(format!("layers.{l}.w_up"), layer.w_up.clone())?;
            out.insert(format!("layers.{l}.w_down"), layer.w_down.clone())?;
        }
        out.insert("final_norm", self.final_norm.clone())?;
        out.insert("head", self.head.clone())?;
        Ok(out)
    }

    pub fn from_container(f: &TensorFile) -> Result<Self> {
        if f.meta("kind")?.as_str() != Some("factorized") {
            bail!(Format, "container is not a factorized model");
        }
        let config: ModelConfig = serde_json::from_value(f.meta("config")?.clone())?;
        config.validate()?;
        let layout = GroupLayout::new(config.n_layers, f.meta_usize("group_size")?)?;
        let rank = f.meta_usize("rank")?;
        let rank_fraction =
            f.meta("rank_fraction")?.as_f64().ok_or_else(|| crate::Error::Format("rank_fraction".into()))?;
        let errors: Vec<LayerError> = serde_json::from_value(f.meta("layer_errors")?.clone())?;
        let singular_values: Vec<Vec<f64>> = serde_json::from_value(f.meta("singular_values")?.clone())?;
        let (d, dkv) = (config.d_hidden, config.d_kv());
        let shared = (0..layout.n_groups()).map(|g| f.expect(&format!("groups.{g}.a"), d, rank)).collect::<Result<_>>()?;
        let mut b_k = Vec::new();
        let mut b_v = Vec::new();
        let mut fused = Vec::new();
        let mut layers = Vec::new();
        for l in 0..config.n_layers {
            b_k.push(f.expect(&format!("layers.{l}.b_k"), rank, dkv)?);
            b_v.push(f.expect(&format!("layers.{l}.b_v"), rank, dkv)?);
            fused.push(
                (0..config.n_q_heads)
                    .map(|q| f.expect(&format!("layers.{l}.fused.{q}"), rank, d))
                    .collect::<Result<Vec<_>>>()?,
            );
            layers.push(RetainedLayer {
                attn_norm: f.expect(&format!("layers.{l}.attn_norm"), 1, d)?,
                wq: f.expect(&format!("layers.{l}.wq"), d, d)?,
                mlp_norm: f.expect(&format!("layers.{l}.mlp_norm"), 1, d)?,
                w_up: f.expect(&format!("layers.{l}.w_up"), d, config.d_mlp)?,
                w_down: f.expect(&format!("layers.{l}.w_down"), config.d_mlp, d)?,
                wv: f.expect(&format!("layers.{l}.wv"), d, dkv)?,
                wo: f.expect(&format!("layers.{l}.wo"), d, d)?,
            });
        }
        Ok(FactorizedModel {
            config,
            rank_fraction,
            factors: SharedFactorization { layout, rank, shared, b_k, b_v, fused, errors, singular_values },
            embed: f.expect("embed", config.vocab_size, d)?,
            layers,
            final_norm: f.expect("final_norm", 1, d)?,
            head: f.expect("head", d, config.vocab_size)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&TensorFile::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gen_toy_model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro_weights() -> ModelWeights {
        // d_hidden 8, d_kv 4
        let cfg = ModelConfig { n_layers: 4, ..ModelConfig::micro() };
        gen_toy_model(&cfg, 5).unwrap()
    }

    #[test]
    fn layout_rejects_indivisible() {
        assert!(matches!(GroupLayout::new(8, 3), Err(crate::Error::Config(_))));
        let l = GroupLayout::new(8, 4).unwrap();
        assert_eq!(l.groups(), &[0..4, 4..8]);
        assert_eq!(l.group_of(5), 1);
    }

    #[test]
    fn concat_shapes_and_order() {
        let w = micro_weights();
        let g = concat_group_weights(&w, 0..2).unwrap();
        assert_eq!(g.shape(), (8, 16));
        assert_eq!(g.slice_cols(0..4), w.layers[0].wk);
        assert_eq!(g.slice_cols(4..8), w.layers[0].wv);
        assert_eq!(g.slice_cols(8..12), w.layers[1].wk);
        let single = concat_group_weights(&w, 3..4).unwrap();
        assert_eq!(single.shape(), (8, 8));
        assert_eq!(single, Matrix::hcat(&[&w.layers[3].wk, &w.layers[3].wv]).unwrap());
    }

    #[test]
    fn identity_full_rank() {
        let id = Matrix::identity(8);
        let f = factorize_group(&id, 8, 4).unwrap();
        assert!(f.a.matmul(&f.right).max_abs_diff(&id) < 1e-6);
    }

    #[test]
    fn rank_one_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = Matrix::<f32>::gaussian(8, 1, 1.0, &mut rng);
        let v = Matrix::<f32>::gaussian(1, 16, 1.0, &mut rng);
        let w = u.matmul(&v);
        let f = factorize_group(&w, 1, 4).unwrap();
        assert!(f.a.matmul(&f.right).relative_error(&w) <= 1e-6);
    }

    #[test]
    fn rank_out_of_range() {
        let id = Matrix::identity(8);
        assert!(matches!(factorize_group(&id, 0, 4), Err(crate::Error::Config(_))));
        assert!(matches!(factorize_group(&id, 9, 4), Err(crate::Error::Config(_))));
    }

    #[test]
    fn sign_convention_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Matrix::<f32>::gaussian(8, 16, 1.0, &mut rng);
        let f = factorize_group(&w, 8, 4).unwrap();
        assert!(f.singular_values.windows(2).all(|p| p[0] >= p[1]));
        for c in 0..8 {
            let col: Vec<f32> = (0..8).map(|i| f.a.get(i, c)).collect();
            let pivot = col.iter().cloned().fold(0.0f32, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn slices_reassemble_right_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Matrix::<f32>::gaussian(8, 16, 1.0, &mut rng);
        let f = factorize_group(&w, 5, 4).unwrap();
        let parts: Vec<&Matrix> = f.b_k.iter().zip(&f.b_v).flat_map(|(k, v)| [k, v]).collect();
        assert_eq!(Matrix::hcat(&parts).unwrap(), f.right);
    }

    #[test]
    fn fusion_single_head_and_zero() {
        let cfg = ModelConfig { n_q_heads: 1, n_kv_heads: 1, d_head: 8, d_hidden: 8, ..ModelConfig::micro() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b_v = Matrix::<f32>::gaussian(5, 8, 1.0, &mut rng);
        let w_o = Matrix::<f32>::gaussian(8, 8, 1.0, &mut rng);
        let m = fuse_value_output(&b_v, &w_o, &cfg);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0], b_v.matmul(&w_o));
        let z = fuse_value_output(&Matrix::zeros(5, 8), &w_o, &cfg);
        assert_eq!(z[0].max_abs(), 0.0);
    }

    #[test]
    fn fused_blocks_follow_head_routing() {
        let cfg = ModelConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b_v = Matrix::<f32>::gaussian(45, 32, 1.0, &mut rng);
        let w_o = Matrix::<f32>::gaussian(64, 64, 1.0, &mut rng);
        let m = fuse_value_output(&b_v, &w_o, &cfg);
        let expect = b_v.slice_cols(16..32).matmul(&w_o.slice_rows(48..64));
        assert!(m[3].max_abs_diff(&expect) <= 1e-6);
    }

    #[test]
    fn default_rank_arithmetic() {
        assert_eq!(derive_rank(0.7, &ModelConfig::toy(), 4).unwrap(), 45);
        assert_eq!(derive_rank(1.0, &ModelConfig::toy(), 1).unwrap(), 64);
        assert!(derive_rank(0.0, &ModelConfig::toy(), 4).is_err());
        assert!(derive_rank(1.5, &ModelConfig::toy(), 4).is_err());
    }

    #[test]
    fn full_rank_single_layer_groups_are_exact() {
        let w = gen_toy_model(&ModelConfig::toy(), 42).unwrap();
        let f = transform_model(&w, 1, 1.0).unwrap();
        assert_eq!(f.rank(), 64);
        for e in &f.factors.errors {
            assert!(e.key <= 1e-5 && e.value <= 1e-5, "{e:?}");
        }
    }

    #[test]
    fn transform_is_byte_deterministic_and_roundtrips() {
        let w = gen_toy_model(&ModelConfig::toy(), 42).unwrap();
        let a = transform_model(&w, 4, 0.7).unwrap();
        let b = transform_model(&w, 4, 0.7).unwrap();
        let bytes = a.to_container().unwrap().to_bytes().unwrap();
        assert_eq!(bytes, b.to_container().unwrap().to_bytes().unwrap());
        assert_eq!(a.rank(), 45);
        let back = FactorizedModel::from_container(&TensorFile::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn error_non_increasing_in_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = Matrix::<f32>::gaussian(8, 16, 1.0, &mut rng);
        let errs: Vec<f64> =
            (1..=8).map(|r| factorize_group(&w, r, 4).map(|f| f.a.matmul(&f.right).relative_error(&w)).unwrap()).collect();
        assert!(errs.windows(2).all(|p| p[1] <= p[0] + 1e-7), "{errs:?}");
    }
}
