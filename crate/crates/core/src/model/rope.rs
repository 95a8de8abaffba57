use crate::error::{bail, Result};
use crate::tensor::{Matrix, Real};

/// Precomputed cos/sin for every position and dimension pair, shared by all layers.
///
/// Pairs are `(2i, 2i+1)` within each head; pair `i` at position `p` rotates by
/// `p · theta^(-2i/d_head)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    d_head: usize,
    max_seq: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(d_head: usize, max_seq: usize, theta: f64) -> Self {
        assert!(d_head.is_multiple_of(2), "d_head must be even");
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(max_seq * half);
        let mut sin = Vec::with_capacity(max_seq * half);
        for p in 0..max_seq {
            for i in 0..half {
                let inv_freq = theta.powf(-(2.0 * i as f64) / d_head as f64);
                let angle = p as f64 * inv_freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Self { d_head, max_seq, cos, sin }
    }

    /// Table rotating by `-p` instead of `p`.
    pub fn inverse(&self) -> Self {
        Self { sin: self.sin.iter().map(|s| -s).collect(), ..self.clone() }
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn max_seq(&self) -> usize {
        self.max_seq
    }

    /// `(cos, sin)` rows for one position.
    pub fn position(&self, p: usize) -> Result<(&[f64], &[f64])> {
        if p >= self.max_seq {
            bail!(Capacity, "position {p} beyond rope table of {} positions", self.max_seq);
        }
        let half = self.d_head / 2;
        Ok((&self.cos[p * half..(p + 1) * half], &self.sin[p * half..(p + 1) * half]))
    }

    /// Rotates one row in place; the row may hold several heads back to back.
    pub fn rotate_row<T: Real>(&self, row: &mut [T], p: usize) -> Result<()> {
        let (cos, sin) = self.position(p)?;
        for head in row.chunks_exact_mut(self.d_head) {
            for (i, pair) in head.chunks_exact_mut(2).enumerate() {
                let (x0, x1) = (pair[0].f64(), pair[1].f64());
                pair[0] = T::from_f64(x0 * cos[i] - x1 * sin[i]);
                pair[1] = T::from_f64(x0 * sin[i] + x1 * cos[i]);
            }
        }
        Ok(())
    }

    /// Rotates each row `i` of `m` to position `positions[i]`.
    pub fn apply<T: Real>(&self, m: &Matrix<T>, positions: &[usize]) -> Result<Matrix<T>> {
        apply_rope(m, positions, self)
    }
}

pub fn apply_rope<T: Real>(vectors: &Matrix<T>, positions: &[usize], table: &RopeTable) -> Result<Matrix<T>> {
    if positions.len() != vectors.rows() {
        bail!(Config, "{} position ids for {} rows", positions.len(), vectors.rows());
    }
    if !vectors.cols().is_multiple_of(table.d_head) {
        bail!(Config, "row width {} is not a multiple of d_head {}", vectors.cols(), table.d_head);
    }
    let mut out = vectors.clone();
    for (i, &p) in positions.iter().enumerate() {
        table.rotate_row(out.row_mut(i), p)?;
    }
    Ok(out)
}
