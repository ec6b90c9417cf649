//! PPMI + truncated-SVD word vectors and greedy-matching similarity.

use std::path::Path;

use nalgebra::DMatrix;

use super::{MetricsError, Prf, Result};
use crate::corpus::{Corpus, Vocab};

const MAGIC: &[u8; 8] = b"GCNFEMB1";

/// Frozen token vectors, one row per vocabulary id. Rows are unit length or
/// exactly zero (tokens without co-occurrence evidence).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: Vec<f64>,
}

impl EmbeddingTable {
    /// Builds a table from explicit rows, L2-normalizing each non-zero row.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(MetricsError::Embedding("rows must share a positive dimension".into()));
        }
        let mut vectors: Vec<f64> = rows.concat();
        normalize_rows(&mut vectors, dim);
        Ok(Self { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, id: u32) -> &[f64] {
        let i = id as usize;
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Cosine similarity floored at zero; identical ids always score 1.
    pub fn similarity(&self, a: u32, b: u32) -> f64 {
        if a == b {
            return 1.0;
        }
        let dot: f64 = self.vector(a).iter().zip(self.vector(b)).map(|(x, y)| x * y).sum();
        dot.clamp(0.0, 1.0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 8 * self.vectors.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| MetricsError::Embedding(m.to_string());
        if bytes.len() < 24 || &bytes[..8] != MAGIC {
            return Err(bad("not an embedding file"));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes")) as usize;
        let (n, dim) = (word(8), word(16));
        if dim == 0 || bytes.len() != 24 + 8 * n * dim {
            return Err(bad("payload length does not match header"));
        }
        let vectors = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self { dim, vectors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| MetricsError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| MetricsError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn normalize_rows(data: &mut [f64], dim: usize) {
    for row in data.chunks_exact_mut(dim) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            row.iter_mut().for_each(|v| *v /= norm);
        } else {
            row.fill(0.0);
        }
    }
}

/// Symmetric-window co-occurrence counts within each turn, positive PMI,
/// rank-`d_e` SVD (rows of `U·sqrt(S)`), then row normalization. Columns
/// beyond the matrix rank stay zero.
pub fn train_embeddings(corpus: &Corpus, vocab: &Vocab, d_e: usize, window: usize) -> Result<EmbeddingTable> {
    if corpus.is_empty() {
        return Err(MetricsError::Embedding("corpus is empty".into()));
    }
    if d_e == 0 {
        return Err(MetricsError::Embedding("dimension must be positive".into()));
    }
    let v = vocab.len();
    let mut counts = DMatrix::<f64>::zeros(v, v);
    for conv in &corpus.conversations {
        for turn in &conv.turns {
            let ids = vocab.encode_text(&turn.text);
            for (i, &a) in ids.iter().enumerate() {
                for &b in &ids[i + 1..(i + 1 + window).min(ids.len())] {
                    counts[(a as usize, b as usize)] += 1.0;
                    counts[(b as usize, a as usize)] += 1.0;
                }
            }
        }
    }
    let total: f64 = counts.iter().sum();
    let row_sums: Vec<f64> = (0..v).map(|i| counts.row(i).sum()).collect();
    let mut ppmi = DMatrix::<f64>::zeros(v, v);
    if total > 0.0 {
        for i in 0..v {
            for j in 0..v {
                let c = counts[(i, j)];
                if c > 0.0 {
                    ppmi[(i, j)] = (c * total / (row_sums[i] * row_sums[j])).ln().max(0.0);
                }
            }
        }
    }
    let svd = ppmi.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let s = &svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let mut vectors = vec![0.0; v * d_e];
    for (col, &k) in order.iter().take(d_e).enumerate() {
        if s[k] <= 1e-10 {
            continue;
        }
        let uk = u.column(k);
        // sign convention: the largest-magnitude component is positive
        let mut pivot = 0;
        for i in 1..v {
            if uk[i].abs() > uk[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if uk[pivot] < 0.0 { -1.0 } else { 1.0 };
        let scale = sign * s[k].sqrt();
        for i in 0..v {
            vectors[i * d_e + col] = uk[i] * scale;
        }
    }
    normalize_rows(&mut vectors, d_e);
    Ok(EmbeddingTable { dim: d_e, vectors })
}

/// Greedy-matching score: every token pairs with its most similar
/// counterpart on the other side.
pub fn embed_score(hyp: &[u32], reference: &[u32], table: &EmbeddingTable) -> Prf {
    if hyp.is_empty() || reference.is_empty() {
        return Prf::default();
    }
    let best = |x: u32, side: &[u32]| side.iter().map(|&y| table.similarity(x, y)).fold(0.0, f64::max);
    let p = hyp.iter().map(|&h| best(h, reference)).sum::<f64>() / hyp.len() as f64;
    let r = reference.iter().map(|&t| best(t, hyp)).sum::<f64>() / reference.len() as f64;
    Prf::from_pr(p, r)
}
