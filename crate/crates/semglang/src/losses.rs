//! Training objectives: reconstruction, embedding/commitment, the Zipf and
//! context-sensitivity regularizers, co-occurrence bookkeeping with the
//! cross-generation preservation penalty, and their weighted composition
//!
//!   total = rec + emb + lambda1 * com + lambda2 * (zipf + context + preserving)
//!
//! Every reduction is a mean, so loss values are invariant to batch size.

use thiserror::Error;

use crate::metrics::zipf_distribution;
use crate::net::{js_divergence_raw, Graph, Var};
use crate::quantizer::Codebook;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0} vs {1} elements")]
    ShapeMismatch(usize, usize),
    #[error("frequency vector sums to {0}, expected 1")]
    NotNormalized(f64),
    #[error("token id {id} out of range for K={k}")]
    TokenOutOfRange { id: usize, k: usize },
    #[error("co-occurrence matrices have different sizes: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("non-finite component: {0}")]
    NonFinite(&'static str),
    #[error("invalid parameter: {0}")]
    BadParam(String),
}

/// All loss terms of one training step, plus the composed total.
#[derive(Debug, Clone, Copy, Default, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub emb: f64,
    pub com: f64,
    pub zipf: f64,
    pub context: f64,
    pub preserving: f64,
    pub human: f64,
    pub total: f64,
}

/// Compose the total objective from its parts.
pub fn total_loss(
    rec: f64,
    emb: f64,
    com: f64,
    zipf: f64,
    context: f64,
    preserving: f64,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossBreakdown, LossError> {
    for (name, v) in [
        ("rec", rec),
        ("emb", emb),
        ("com", com),
        ("zipf", zipf),
        ("context", context),
        ("preserving", preserving),
    ] {
        if !v.is_finite() {
            return Err(LossError::NonFinite(name));
        }
    }
    let human = zipf + context + preserving;
    Ok(LossBreakdown {
        rec,
        emb,
        com,
        zipf,
        context,
        preserving,
        human,
        total: rec + emb + lambda1 * com + lambda2 * human,
    })
}

/// Mean smooth-L1 distance: 0.5 d^2 below |d| = 1, |d| - 0.5 above.
pub fn rec_loss(x: &[f64], x_hat: &[f64]) -> Result<f64, LossError> {
    if x.len() != x_hat.len() || x.is_empty() {
        return Err(LossError::ShapeMismatch(x.len(), x_hat.len()));
    }
    let mut acc = 0.0;
    for (a, b) in x.iter().zip(x_hat) {
        let d = a - b;
        acc += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
    }
    Ok(acc / x.len() as f64)
}

/// Embedding and commitment losses. Both equal the mean squared distance
/// between z_e and z_q; the stop-gradient split (embedding loss moves only
/// the codebook, commitment only the encoder) is realized on the tape where
/// the trainer composes them.
pub fn emb_com_losses(z_e: &[f64], z_q: &[f64]) -> Result<(f64, f64), LossError> {
    if z_e.len() != z_q.len() || z_e.is_empty() {
        return Err(LossError::ShapeMismatch(z_e.len(), z_q.len()));
    }
    let mse = z_e
        .iter()
        .zip(z_q)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / z_e.len() as f64;
    Ok((mse, mse))
}

/// Jensen-Shannon divergence between a usage distribution and the Zipf
/// target over codebook index order.
pub fn zipf_loss(freq: &[f64], exponent: f64) -> Result<f64, LossError> {
    let sum: f64 = freq.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(LossError::NotNormalized(sum));
    }
    let target = zipf_distribution(freq.len(), exponent);
    Ok(js_divergence_raw(freq, &target))
}

const COSINE_EPS: f64 = 1e-12;

/// Sequence-level context correlation: the mean cosine similarity between
/// codebook embeddings of adjacent token pairs, affinely mapped to [0, 1].
/// Sequences shorter than two tokens count as fully correlated.
pub fn context_loss(sequences: &[Vec<usize>], codebook: &Codebook) -> Result<f64, LossError> {
    if sequences.is_empty() {
        return Err(LossError::BadParam("empty batch".into()));
    }
    let k = codebook.k();
    let n = sequences.len() as f64;
    let mut corr_mean = 0.0;
    for seq in sequences {
        for &id in seq {
            if id >= k {
                return Err(LossError::TokenOutOfRange { id, k });
            }
        }
        if seq.len() < 2 {
            corr_mean += 1.0 / n;
            continue;
        }
        let pairs = (seq.len() - 1) as f64;
        for w in seq.windows(2) {
            let a = codebook.row(w[0]);
            let b = codebook.row(w[1]);
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let cos = dot / (na * nb + COSINE_EPS);
            corr_mean += (0.5 * cos + 0.5) / (n * pairs);
        }
    }
    Ok(1.0 - corr_mean)
}

/// Tape version of [`context_loss`]; gradients flow into the codebook rows.
/// Uses the same epsilon-guarded cosine so the two routes agree to roundoff.
pub fn context_loss_graph(
    g: &mut Graph,
    codebook_var: Var,
    sequences: &[Vec<usize>],
) -> Var {
    let n = sequences.len() as f64;
    let mut ida = Vec::new();
    let mut idb = Vec::new();
    let mut weights = Vec::new();
    let mut short = 0usize;
    for seq in sequences {
        if seq.len() < 2 {
            short += 1;
            continue;
        }
        let pairs = (seq.len() - 1) as f64;
        for w in seq.windows(2) {
            ida.push(w[0]);
            idb.push(w[1]);
            weights.push(1.0 / (n * pairs));
        }
    }
    let const_part = short as f64 / n;
    if ida.is_empty() {
        return g.scalar(1.0 - const_part);
    }
    let a = g.gather(codebook_var, &ida);
    let b = g.gather(codebook_var, &idb);
    let ab = g.mul(a, b);
    let dots = g.sum_last_dim(ab);
    let aa = g.mul(a, a);
    let saa = g.sum_last_dim(aa);
    let na = g.sqrt(saa);
    let bb = g.mul(b, b);
    let sbb = g.sum_last_dim(bb);
    let nb = g.sqrt(sbb);
    let prod = g.mul(na, nb);
    let denom = g.add_scalar(prod, COSINE_EPS);
    let cos = g.div(dots, denom);
    let half = g.mul_scalar(cos, 0.5);
    let mapped = g.add_scalar(half, 0.5);
    let wleaf = g.leaf(weights, &[ida.len()]);
    let weighted = g.mul(mapped, wleaf);
    let total = g.sum(weighted);
    let corr = g.add_scalar(total, const_part);
    let neg = g.neg(corr);
    g.add_scalar(neg, 1.0)
}

/// Decayed symmetric token co-occurrence counts within a distance window.
#[derive(Debug, Clone)]
pub struct CooccurrenceMatrix {
    pub counts: Vec<f32>,
    pub k: usize,
    pub generation: u32,
    pub decay: f32,
}

impl CooccurrenceMatrix {
    pub fn new(k: usize, decay: f32) -> Self {
        Self {
            counts: vec![0.0; k * k],
            k,
            generation: 0,
            decay,
        }
    }

    /// Row-normalized copy (rows summing to one; empty rows stay zero).
    pub fn normalized(&self) -> Vec<f64> {
        let mut out = vec![0.0f64; self.k * self.k];
        for r in 0..self.k {
            let row = &self.counts[r * self.k..(r + 1) * self.k];
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            if sum > 0.0 {
                for c in 0..self.k {
                    out[r * self.k + c] = row[c] as f64 / sum;
                }
            }
        }
        out
    }
}

/// Apply decay, then count every unordered token pair within `window`
/// positions of each other, incrementing both symmetric cells.
pub fn update_cooccurrence(
    m: &mut CooccurrenceMatrix,
    batch: &[Vec<usize>],
    window: usize,
) -> Result<(), LossError> {
    if window == 0 {
        return Err(LossError::BadParam("window must be >= 1".into()));
    }
    for seq in batch {
        for &id in seq {
            if id >= m.k {
                return Err(LossError::TokenOutOfRange { id, k: m.k });
            }
        }
    }
    if m.decay < 1.0 {
        for v in &mut m.counts {
            *v *= m.decay;
        }
    }
    for seq in batch {
        for i in 0..seq.len() {
            for j in i + 1..seq.len().min(i + window + 1) {
                let (a, b) = (seq[i], seq[j]);
                m.counts[a * m.k + b] += 1.0;
                m.counts[b * m.k + a] += 1.0;
            }
        }
    }
    Ok(())
}

/// Squared Frobenius distance between the row-normalized matrices. Zero iff
/// the normalized matrices coincide; symmetric in its arguments.
pub fn preserving_loss(
    m_new: &CooccurrenceMatrix,
    m_prev: &CooccurrenceMatrix,
) -> Result<f64, LossError> {
    if m_new.k != m_prev.k {
        return Err(LossError::DimMismatch(m_new.k, m_prev.k));
    }
    let a = m_new.normalized();
    let b = m_prev.normalized();
    Ok(frobenius_sq_diff(&a, &b))
}

pub fn frobenius_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
