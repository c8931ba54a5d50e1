//! Learnable codebook and nearest-neighbor token assignment.
//!
//! Tokens are codebook row indices. Assignment is the argmin of Euclidean
//! distance with ties broken toward the lowest index; during the early phase
//! of training, [`zipf_weighted_quantize`] instead samples tokens from a
//! softmax biased by a Zipf prior over codebook ranks, which seeds a
//! frequent-core/rare-tail usage structure before the hard argmin takes over.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::metrics::zipf_distribution;
use crate::net::{Graph, ParamTensor, Var};
use crate::seeds;

#[derive(Debug, Error)]
pub enum QuantizerError {
    #[error("latent dimension {latent} does not match codebook dimension {codebook}")]
    DimMismatch { latent: usize, codebook: usize },
    #[error("codebook must have at least 2 vectors, got {0}")]
    TooSmall(usize),
    #[error("no tokens emitted yet")]
    ZeroUsage,
    #[error("invalid parameter: {0}")]
    BadParam(String),
}

/// Continuous latent sequence: row `s` of `data` is the D-dimensional vector
/// for slice `s`.
#[derive(Debug, Clone)]
pub struct LatentSequence {
    pub dim: usize,
    pub len: usize,
    pub data: Vec<f64>,
    pub source: String,
}

impl LatentSequence {
    pub fn row(&self, s: usize) -> &[f64] {
        &self.data[s * self.dim..(s + 1) * self.dim]
    }
}

/// Discrete counterpart of a latent sequence: token ids plus the codebook
/// rows they name, with the latent it came from.
#[derive(Debug, Clone)]
pub struct QuantizedSequence {
    pub token_ids: Vec<usize>,
    /// Row `s` equals codebook row `token_ids[s]`.
    pub vectors: Vec<f64>,
    pub latent: LatentSequence,
}

/// K learnable D-dimensional prototypes plus usage statistics for the
/// current generation.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub vectors: ParamTensor,
    pub usage_counts: Vec<u64>,
    pub generation: u32,
}

impl Codebook {
    /// Uniform init in [-scale, scale], seeded.
    pub fn init_with_scale(
        k: usize,
        d: usize,
        seed: u64,
        scale: f64,
    ) -> Result<Self, QuantizerError> {
        if k < 2 {
            return Err(QuantizerError::TooSmall(k));
        }
        if d == 0 {
            return Err(QuantizerError::BadParam("zero latent dimension".into()));
        }
        if !(scale > 0.0) {
            return Err(QuantizerError::BadParam("init scale must be positive".into()));
        }
        let mut rng = seeds::rng(seed, "codebook-init", 0);
        let bound = scale;
        let data: Vec<f32> = (0..k * d)
            .map(|_| rng.gen_range(-bound..bound) as f32)
            .collect();
        Ok(Self {
            vectors: ParamTensor {
                name: "codebook.vectors".into(),
                data,
                shape: vec![k, d],
            },
            usage_counts: vec![0; k],
            generation: 0,
        })
    }

    /// Default init: uniform in [-1/K, 1/K].
    pub fn init(k: usize, d: usize, seed: u64) -> Result<Self, QuantizerError> {
        Self::init_with_scale(k, d, seed, 1.0 / k as f64)
    }

    pub fn k(&self) -> usize {
        self.vectors.shape[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape[1]
    }

    pub fn row(&self, j: usize) -> Vec<f64> {
        let d = self.dim();
        self.vectors.data[j * d..(j + 1) * d]
            .iter()
            .map(|&v| v as f64)
            .collect()
    }

    pub fn hash(&self) -> u64 {
        self.vectors.hash()
    }

    pub fn reset_usage(&mut self) {
        self.usage_counts.iter_mut().for_each(|c| *c = 0);
    }

    pub fn total_usage(&self) -> u64 {
        self.usage_counts.iter().sum()
    }

    fn check_dim(&self, latent: &LatentSequence) -> Result<(), QuantizerError> {
        if latent.dim != self.dim() {
            return Err(QuantizerError::DimMismatch {
                latent: latent.dim,
                codebook: self.dim(),
            });
        }
        Ok(())
    }

    /// Nearest-token assignment without touching usage counts; safe over a
    /// shared read-only codebook.
    pub fn assign(&self, latent: &LatentSequence) -> Result<Vec<usize>, QuantizerError> {
        self.check_dim(latent)?;
        Ok((0..latent.len)
            .map(|s| nearest_token(&self.vectors.data, self.dim(), latent.row(s)))
            .collect())
    }

    /// Squared Euclidean distances from one latent vector to every row.
    pub fn distances_sq(&self, z: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..self.k())
            .map(|j| {
                let mut acc = 0.0;
                for p in 0..d {
                    let diff = z[p] - self.vectors.data[j * d + p] as f64;
                    acc += diff * diff;
                }
                acc
            })
            .collect()
    }

    /// JSON summary written next to codebook exports: size, generation,
    /// perplexity, and the 16 most-used tokens.
    pub fn summary(&self) -> serde_json::Value {
        let mut top: Vec<(usize, u64)> = self
            .usage_counts
            .iter()
            .copied()
            .enumerate()
            .collect();
        top.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        top.truncate(16);
        serde_json::json!({
            "k": self.k(),
            "d": self.dim(),
            "generation": self.generation,
            "perplexity": codebook_perplexity(self).ok(),
            "top_usage": top.iter().map(|(t, c)| serde_json::json!({"token": t, "count": c})).collect::<Vec<_>>(),
        })
    }
}

fn nearest_token(vectors: &[f32], d: usize, z: &[f64]) -> usize {
    let k = vectors.len() / d;
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for j in 0..k {
        let mut acc = 0.0;
        for p in 0..d {
            let diff = z[p] - vectors[j * d + p] as f64;
            acc += diff * diff;
        }
        // Strict less-than keeps the lowest index on ties.
        if acc < best_dist {
            best_dist = acc;
            best = j;
        }
    }
    best
}

/// Hard nearest-neighbor quantization; increments usage counts.
pub fn quantize(
    codebook: &mut Codebook,
    latent: &LatentSequence,
) -> Result<QuantizedSequence, QuantizerError> {
    let ids = codebook.assign(latent)?;
    commit_and_build(codebook, latent, ids)
}

/// Token sampling under the Zipf prior without committing usage counts:
/// token `k_s` is drawn from softmax(-dist^2 / temperature + ln w_j) with
/// w_j proportional to 1/rank(j)^exponent, rank being the codebook index
/// order. As the temperature approaches zero this degenerates to the argmin
/// assignment.
pub fn sample_zipf_ids(
    codebook: &Codebook,
    latent: &LatentSequence,
    exponent: f64,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>, QuantizerError> {
    if !(exponent >= 0.0) || !exponent.is_finite() {
        return Err(QuantizerError::BadParam(format!(
            "zipf exponent must be finite and non-negative, got {exponent}"
        )));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(QuantizerError::BadParam(format!(
            "temperature must be finite and positive, got {temperature}"
        )));
    }
    codebook.check_dim(latent)?;
    let k = codebook.k();
    let log_w: Vec<f64> = (1..=k).map(|rank| -exponent * (rank as f64).ln()).collect();

    let mut ids = Vec::with_capacity(latent.len);
    let mut probs = vec![0.0f64; k];
    for s in 0..latent.len {
        let d2 = codebook.distances_sq(latent.row(s));
        let mut mx = f64::NEG_INFINITY;
        for j in 0..k {
            probs[j] = -d2[j] / temperature + log_w[j];
            mx = mx.max(probs[j]);
        }
        let mut z = 0.0;
        for p in probs.iter_mut() {
            *p = (*p - mx).exp();
            z += *p;
        }
        let u: f64 = rng.gen::<f64>() * z;
        let mut acc = 0.0;
        let mut chosen = k - 1;
        for (j, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = j;
                break;
            }
        }
        ids.push(chosen);
    }
    Ok(ids)
}

/// Stochastic counterpart of [`quantize`] for the early training phase;
/// samples via [`sample_zipf_ids`] and commits usage counts.
pub fn zipf_weighted_quantize(
    codebook: &mut Codebook,
    latent: &LatentSequence,
    exponent: f64,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<QuantizedSequence, QuantizerError> {
    let ids = sample_zipf_ids(codebook, latent, exponent, temperature, rng)?;
    commit_and_build(codebook, latent, ids)
}

fn commit_and_build(
    codebook: &mut Codebook,
    latent: &LatentSequence,
    ids: Vec<usize>,
) -> Result<QuantizedSequence, QuantizerError> {
    let d = codebook.dim();
    let mut vectors = Vec::with_capacity(ids.len() * d);
    for &id in &ids {
        codebook.usage_counts[id] += 1;
        vectors.extend(codebook.row(id));
    }
    Ok(QuantizedSequence {
        token_ids: ids,
        vectors,
        latent: latent.clone(),
    })
}

/// usage_counts / total.
pub fn usage_distribution(codebook: &Codebook) -> Result<Vec<f64>, QuantizerError> {
    let total = codebook.total_usage();
    if total == 0 {
        return Err(QuantizerError::ZeroUsage);
    }
    Ok(codebook
        .usage_counts
        .iter()
        .map(|&c| c as f64 / total as f64)
        .collect())
}

/// exp(entropy of the usage distribution); 1 when a single token dominates,
/// K under perfectly uniform usage.
pub fn codebook_perplexity(codebook: &Codebook) -> Result<f64, QuantizerError> {
    let dist = usage_distribution(codebook)?;
    let h: f64 = dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    Ok(h.exp())
}

/// Straight-through estimator on the tape: the forward value is the selected
/// codebook rows, while the gradient of anything downstream flows untouched
/// into `z`. The codebook receives no gradient through this path; it learns
/// from the embedding loss instead.
pub fn straight_through(g: &mut Graph, z: Var, codebook_var: Var, ids: &[usize]) -> Var {
    let rows = g.gather(codebook_var, ids);
    let jump = g.sub(rows, z);
    let frozen = g.stop_grad(jump);
    g.add(z, frozen)
}

/// The Zipf prior over codebook ranks used both for sampling weights and as
/// the regularization target.
pub fn zipf_target(k: usize, exponent: f64) -> Vec<f64> {
    zipf_distribution(k, exponent)
}
