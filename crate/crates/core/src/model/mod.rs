//! Minimal GQA decoder-only transformer with a byte vocabulary.
//!
//! Row-vector convention throughout: projections are `y = x · W` with `W`
//! stored as `(fan_in × fan_out)`. Each block is pre-norm (RMS with gain):
//!
//! ```text
//! a  = rms(x) ⊙ g_attn
//! x' = x  + attn(a·W_q, a·W_k, a·W_v) · W_o
//! x''= x' + silu(rms(x') ⊙ g_mlp · W_up) · W_down
//! ```

mod forward;
mod grad;
mod rope;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::TensorFile;
use crate::error::{bail, Result};
use crate::tensor::{Matrix, Real};

pub use forward::{
    embed_tokens, forward_baseline, mlp_block, nll_from_logits, output_logits, rms_norm, silu, ForwardTrace,
    KvCache, LayerTrace, Mode, RMS_EPS,
};
pub(crate) use forward::{attention_probs, forward_with_trace, validate_tokens};
pub use grad::{batch_loss_and_grads, loss_and_grads, LossGrads};
pub use rope::{apply_rope, RopeTable};

pub const VOCAB_SIZE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_hidden: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub rope_theta: f64,
    pub max_seq: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// 8 layers, d_hidden 64, 4 query heads sharing 2 KV heads of width 16.
    pub fn toy() -> Self {
        Self {
            n_layers: 8,
            d_hidden: 64,
            n_q_heads: 4,
            n_kv_heads: 2,
            d_head: 16,
            d_mlp: 128,
            vocab_size: VOCAB_SIZE,
            rope_theta: 10_000.0,
            max_seq: 256,
        }
    }

    /// Two layers of width 8, used for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            n_layers: 2,
            d_hidden: 8,
            n_q_heads: 2,
            n_kv_heads: 1,
            d_head: 4,
            d_mlp: 16,
            vocab_size: VOCAB_SIZE,
            rope_theta: 10_000.0,
            max_seq: 32,
        }
    }

    #[inline]
    pub fn d_kv(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    /// Query heads served by each KV head.
    #[inline]
    pub fn group_factor(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    /// KV head read by query head `q`.
    #[inline]
    pub fn kv_head_of(&self, q: usize) -> usize {
        q / self.group_factor()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_hidden", self.d_hidden),
            ("n_q_heads", self.n_q_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in positive {
            if v == 0 {
                bail!(Config, "{name} must be positive");
            }
        }
        if self.vocab_size != VOCAB_SIZE {
            bail!(Config, "vocab_size must be {VOCAB_SIZE} (byte-level), got {}", self.vocab_size);
        }
        if !self.n_q_heads.is_multiple_of(self.n_kv_heads) {
            bail!(Config, "n_q_heads ({}) is not a multiple of n_kv_heads ({})", self.n_q_heads, self.n_kv_heads);
        }
        if self.d_hidden != self.n_q_heads * self.d_head {
            bail!(
                Config,
                "d_hidden ({}) must equal n_q_heads × d_head ({} × {})",
                self.d_hidden,
                self.n_q_heads,
                self.d_head
            );
        }
        if !self.d_head.is_multiple_of(2) {
            bail!(Config, "d_head must be even for rotary embeddings, got {}", self.d_head);
        }
        if self.d_kv() > self.d_hidden {
            bail!(Config, "d_kv ({}) exceeds d_hidden ({})", self.d_kv(), self.d_hidden);
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            bail!(Config, "rope_theta must be positive, got {}", self.rope_theta);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T: Real = f32> {
    /// Pre-attention RMS gain, 1 × d_hidden.
    pub attn_norm: Matrix<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    /// Pre-MLP RMS gain, 1 × d_hidden.
    pub mlp_norm: Matrix<T>,
    pub w_up: Matrix<T>,
    pub w_down: Matrix<T>,
}

/// All dense parameters. Immutable once built; share by reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T: Real = f32> {
    pub config: ModelConfig,
    /// vocab × d_hidden.
    pub embed: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Matrix<T>,
    /// d_hidden × vocab.
    pub head: Matrix<T>,
}

/// Seeded toy model: Gaussian matrices scaled by `1/sqrt(fan_in)`, unit norm gains.
pub fn gen_toy_model(config: &ModelConfig, seed: u64) -> Result<ModelWeights<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_hidden;
    let mut dense = |rows: usize, cols: usize| Matrix::gaussian(rows, cols, 1.0 / (rows as f64).sqrt(), &mut rng);
    let embed = dense(1, config.vocab_size * d);
    let embed = Matrix::from_vec(config.vocab_size, d, embed.into_data())?;
    let ones = || Matrix::from_fn(1, d, |_, _| 1.0);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerWeights {
            attn_norm: ones(),
            wq: dense(d, d),
            wk: dense(d, config.d_kv()),
            wv: dense(d, config.d_kv()),
            wo: dense(d, d),
            mlp_norm: ones(),
            w_up: dense(d, config.d_mlp),
            w_down: dense(config.d_mlp, d),
        });
    }
    let head = dense(d, config.vocab_size);
    Ok(ModelWeights { config: *config, embed, layers, final_norm: ones(), head })
}

impl<T: Real> ModelWeights<T> {
    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights {
            config: self.config,
            embed: self.embed.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    mlp_norm: l.mlp_norm.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            head: self.head.cast(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.embed.is_finite()
            && self.final_norm.is_finite()
            && self.head.is_finite()
            && self.layers.iter().all(|l| {
                [&l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.mlp_norm, &l.w_up, &l.w_down]
                    .iter()
                    .all(|m| m.is_finite())
            })
    }

    /// Checks every shape against the config and that all entries are finite.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.d_hidden;
        let check = |name: String, m: &Matrix<T>, shape: (usize, usize)| -> Result<()> {
            if m.shape() != shape {
                bail!(Config, "{name} has shape {:?}, expected {shape:?}", m.shape());
            }
            Ok(())
        };
        check("embed".into(), &self.embed, (c.vocab_size, d))?;
        check("head".into(), &self.head, (d, c.vocab_size))?;
        check("final_norm".into(), &self.final_norm, (1, d))?;
        if self.layers.len() != c.n_layers {
            bail!(Config, "{} layers stored, config says {}", self.layers.len(), c.n_layers);
        }
        for (i, l) in self.layers.iter().enumerate() {
            check(format!("layers.{i}.attn_norm"), &l.attn_norm, (1, d))?;
            check(format!("layers.{i}.wq"), &l.wq, (d, d))?;
            check(format!("layers.{i}.wk"), &l.wk, (d, c.d_kv()))?;
            check(format!("layers.{i}.wv"), &l.wv, (d, c.d_kv()))?;
            check(format!("layers.{i}.wo"), &l.wo, (d, d))?;
            check(format!("layers.{i}.mlp_norm"), &l.mlp_norm, (1, d))?;
            check(format!("layers.{i}.w_up"), &l.w_up, (d, c.d_mlp))?;
            check(format!("layers.{i}.w_down"), &l.w_down, (c.d_mlp, d))?;
        }
        if !self.is_finite() {
            bail!(Numeric, "model weights contain non-finite values");
        }
        Ok(())
    }
}

impl ModelWeights<f32> {
    pub fn to_container(&self, seed: Option<u64>) -> Result<TensorFile> {
        let mut f = TensorFile::new();
        f.set_meta("kind", "model");
        f.set_meta("config", serde_json::to_value(self.config)?);
        if let Some(seed) = seed {
            f.set_meta("seed", seed);
        }
        f.insert("embed", self.embed.clone())?;
        for (i, l) in self.layers.iter().enumerate() {
            f.insert(format!("layers.{i}.attn_norm"), l.attn_norm.clone())?;
            f.insert(format!("layers.{i}.wq"), l.wq.clone())?;
            f.insert(format!("layers.{i}.wk"), l.wk.clone())?;
            f.insert(format!("layers.{i}.wv"), l.wv.clone())?;
            f.insert(format!("layers.{i}.wo"), l.wo.clone())?;
            f.insert(format!("layers.{i}.mlp_norm"), l.mlp_norm.clone())?;
            f.insert(format!("layers.{i}.w_up"), l.w_up.clone())?;
            f.insert(format!("layers.{i}.w_down"), l.w_down.clone())?;
        }
        f.insert("final_norm", self.final_norm.clone())?;
        f.insert("head", self.head.clone())?;
        Ok(f)
    }

    pub fn from_container(f: &TensorFile) -> Result<Self> {
        if f.meta("kind")?.as_str() != Some("model") {
            bail!(Format, "container is not a model file");
        }
        let config: ModelConfig = serde_json::from_value(f.meta("config")?.clone())?;
        config.validate()?;
        let d = config.d_hidden;
        let layers = (0..config.n_layers)
            .map(|i| -> Result<LayerWeights> {
                Ok(LayerWeights {
                    attn_norm: f.expect(&format!("layers.{i}.attn_norm"), 1, d)?,
                    wq: f.expect(&format!("layers.{i}.wq"), d, d)?,
                    wk: f.expect(&format!("layers.{i}.wk"), d, config.d_kv())?,
                    wv: f.expect(&format!("layers.{i}.wv"), d, config.d_kv())?,
                    wo: f.expect(&format!("layers.{i}.wo"), d, d)?,
                    mlp_norm: f.expect(&format!("layers.{i}.mlp_norm"), 1, d)?,
                    w_up: f.expect(&format!("layers.{i}.w_up"), d, config.d_mlp)?,
                    w_down: f.expect(&format!("layers.{i}.w_down"), config.d_mlp, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let weights = ModelWeights {
            config,
            embed: f.expect("embed", config.vocab_size, d)?,
            layers,
            final_norm: f.expect("final_norm", 1, d)?,
            head: f.expect("head", d, config.vocab_size)?,
        };
        weights.validate()?;
        Ok(weights)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>, seed: Option<u64>) -> Result<()> {
        self.to_container(seed)?.write(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(&TensorFile::read(path)?)
    }
}

/// Hidden state consumed by a layer's projections.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState<T: Real = f32> {
    pub x: Matrix<T>,
    pub layer: usize,
    pub positions: Vec<usize>,
}
