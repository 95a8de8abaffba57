//! Seeded synthetic byte corpora for calibration and probing.
//!
//! Generator: a first-order Markov chain over the 95 printable ASCII bytes
//! (`0x20..=0x7e`). Each state gets 4 successors drawn uniformly at random,
//! with weights drawn uniformly from `[0, 1)` and normalized. At every step the
//! chain follows its successor table with probability 0.9 and otherwise jumps
//! to a uniformly random printable byte. The start byte of each sequence is
//! uniform. All draws come from one `ChaCha8` stream seeded by the corpus seed.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{bail, Result};

const FIRST: u8 = 0x20;
const N_SYMBOLS: usize = 95;
const SUCCESSORS: usize = 4;
const FOLLOW_PROB: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub sequences: Vec<Vec<u8>>,
    /// Generator seed, when the corpus is synthetic.
    pub seed: Option<u64>,
}

impl Corpus {
    pub fn markov(seed: u64, n_sequences: usize, seq_len: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table: Vec<[(u8, f64); SUCCESSORS]> = (0..N_SYMBOLS)
            .map(|_| {
                let mut row = [(0u8, 0.0f64); SUCCESSORS];
                let mut total = 0.0;
                for slot in row.iter_mut() {
                    *slot = (FIRST + rng.random_range(0..N_SYMBOLS as u8), rng.random::<f64>());
                    total += slot.1;
                }
                for slot in row.iter_mut() {
                    slot.1 /= total;
                }
                row
            })
            .collect();
        let sequences = (0..n_sequences)
            .map(|_| {
                let mut s = Vec::with_capacity(seq_len);
                let mut cur = FIRST + rng.random_range(0..N_SYMBOLS as u8);
                for _ in 0..seq_len {
                    s.push(cur);
                    cur = if rng.random::<f64>() < FOLLOW_PROB {
                        let mut u = rng.random::<f64>();
                        let row = &table[(cur - FIRST) as usize];
                        let mut next = row[SUCCESSORS - 1].0;
                        for &(b, w) in row {
                            if u < w {
                                next = b;
                                break;
                            }
                            u -= w;
                        }
                        next
                    } else {
                        FIRST + rng.random_range(0..N_SYMBOLS as u8)
                    };
                }
                s
            })
            .collect();
        Self { sequences, seed: Some(seed) }
    }

    /// Splits raw bytes into consecutive chunks of `seq_len` (the tail is dropped).
    pub fn from_bytes(bytes: &[u8], seq_len: usize) -> Result<Self> {
        if seq_len < 2 {
            bail!(Input, "sequence length must be at least 2");
        }
        let sequences: Vec<Vec<u8>> = bytes.chunks_exact(seq_len).map(<[u8]>::to_vec).collect();
        if sequences.is_empty() {
            bail!(Input, "corpus of {} bytes holds no sequence of length {seq_len}", bytes.len());
        }
        Ok(Self { sequences, seed: None })
    }

    pub fn from_file(path: impl AsRef<Path>, seq_len: usize) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, seq_len)
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    /// SHA-256 over `(len as u64 LE, bytes)` of every sequence, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.sequences {
            h.update((s.len() as u64).to_le_bytes());
            h.update(s);
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn markov_is_seeded_and_printable() {
        let a = Corpus::markov(1, 3, 50);
        assert_eq!(a, Corpus::markov(1, 3, 50));
        assert_ne!(a, Corpus::markov(2, 3, 50));
        assert!(a.sequences.iter().flatten().all(|b| (0x20..=0x7e).contains(b)));
        assert_eq!(a.hash(), Corpus::markov(1, 3, 50).hash());
    }

    #[test]
    fn chain_has_structure() {
        // The successor table concentrates mass: bigram entropy is well below uniform.
        let c = Corpus::markov(9, 20, 200);
        let mut counts = std::collections::HashMap::new();
        for s in &c.sequences {
            for w in s.windows(2) {
                *counts.entry((w[0], w[1])).or_insert(0usize) += 1;
            }
        }
        assert!(counts.len() < 95 * 20);
    }

    #[test]
    fn chunking() {
        let c = Corpus::from_bytes(b"abcdefg", 3).unwrap();
        assert_eq!(c.sequences, vec![b"abc".to_vec(), b"def".to_vec()]);
        assert!(Corpus::from_bytes(b"ab", 3).is_err());
    }
}
