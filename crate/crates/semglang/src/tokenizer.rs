//! Residual-driven adaptive token allocation and emission of the final token
//! sequences.
//!
//! Slices that the decoder reconstructs poorly carry more short-term
//! structure, so they receive a larger share of the fixed token budget. The
//! budget is apportioned by largest remainder, clamped to at least one token
//! per slice, and any surplus is taken back from the quietest slices first.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::graph::pool_bin;
use crate::net::{batch_leaf, decode, encode, Decoder, Encoder, Graph, NetError};
use crate::quantizer::{Codebook, LatentSequence, QuantizerError};
use crate::signal::Segment;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("shape mismatch: segment has {expected} values, reconstruction {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("slice count {s} does not divide segment length {t}")]
    SlicesDontDivide { s: usize, t: usize },
    #[error("token budget {t_max} cannot cover {s} slices")]
    BudgetTooSmall { t_max: usize, s: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    BadRecord {
        path: String,
        line: usize,
        reason: String,
    },
}

/// Per-slice residual energies R_s and their normalization P_s.
#[derive(Debug, Clone)]
pub struct ResidualProfile {
    pub energies: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl ResidualProfile {
    /// Normalize energies into a probability vector; all-zero energies fall
    /// back to the uniform profile.
    pub fn from_energies(energies: Vec<f64>) -> Self {
        let total: f64 = energies.iter().sum();
        let s = energies.len();
        let probabilities = if total > 0.0 {
            energies.iter().map(|e| e / total).collect()
        } else {
            vec![1.0 / s as f64; s]
        };
        Self {
            energies,
            probabilities,
        }
    }

    pub fn uniform(s: usize) -> Self {
        Self::from_energies(vec![0.0; s])
    }
}

/// Integer token counts per slice, summing exactly to the budget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocationPlan {
    pub per_slice: Vec<usize>,
    pub budget: usize,
}

/// A finished token sequence with its slice boundaries (cumulative counts).
#[derive(Debug, Clone)]
pub struct EmittedSequence {
    pub token_ids: Vec<usize>,
    pub slice_boundaries: Vec<usize>,
    pub origin: String,
    pub label: u32,
}

/// Squared reconstruction error per temporal slice.
pub fn residual_profile(
    segment: &Segment,
    reconstruction: &[f64],
    s: usize,
) -> Result<ResidualProfile, TokenizerError> {
    if reconstruction.len() != segment.values.len() {
        return Err(TokenizerError::ShapeMismatch {
            expected: segment.values.len(),
            got: reconstruction.len(),
        });
    }
    if s == 0 || segment.len % s != 0 {
        return Err(TokenizerError::SlicesDontDivide {
            s,
            t: segment.len,
        });
    }
    let slice_len = segment.len / s;
    let c = segment.channels;
    let mut energies = vec![0.0; s];
    for (i, energy) in energies.iter_mut().enumerate() {
        for t in i * slice_len..(i + 1) * slice_len {
            for ch in 0..c {
                let d = segment.values[t * c + ch] - reconstruction[t * c + ch];
                *energy += d * d;
            }
        }
    }
    Ok(ResidualProfile::from_energies(energies))
}

/// Apportion the token budget to slices:
///  1. real-valued targets T_max * P_s,
///  2. floors plus largest-remainder distribution of the leftover,
///  3. every empty slice raised to one token,
///  4. surplus repeatedly taken from the smallest-residual slice that still
///     has more than one token (ties to the lowest index).
pub fn allocate(
    profile: &ResidualProfile,
    t_max: usize,
) -> Result<AllocationPlan, TokenizerError> {
    let s = profile.probabilities.len();
    if t_max < s {
        return Err(TokenizerError::BudgetTooSmall { t_max, s });
    }
    let targets: Vec<f64> = profile
        .probabilities
        .iter()
        .map(|p| p * t_max as f64)
        .collect();
    let mut counts: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let leftover = t_max.saturating_sub(assigned);
    let mut remainders: Vec<(usize, f64)> = targets
        .iter()
        .enumerate()
        .map(|(i, t)| (i, t - t.floor()))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for &(i, _) in remainders.iter().take(leftover) {
        counts[i] += 1;
    }
    for c in counts.iter_mut() {
        if *c == 0 {
            *c = 1;
        }
    }
    let mut total: usize = counts.iter().sum();
    while total > t_max {
        let mut pick = None;
        for i in 0..s {
            if counts[i] <= 1 {
                continue;
            }
            pick = match pick {
                None => Some(i),
                Some(j) if profile.energies[i] < profile.energies[j] => Some(i),
                keep => keep,
            };
        }
        let i = pick.expect("surplus with no reducible slice");
        counts[i] -= 1;
        total -= 1;
    }
    Ok(AllocationPlan {
        per_slice: counts,
        budget: t_max,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmissionMode {
    /// Residual-adaptive allocation with sub-slice re-encoding.
    Adaptive,
    /// One token per slice from the plain quantizer, duplicated to fill the
    /// same budget.
    Uniform,
}

/// Emit the token sequence for one segment under a fixed budget.
pub fn emit(
    encoder: &Encoder,
    codebook: &Codebook,
    decoder: &Decoder,
    segment: &Segment,
    t_max: usize,
    mode: EmissionMode,
) -> Result<EmittedSequence, TokenizerError> {
    let s = segment.slices;
    if t_max < s {
        return Err(TokenizerError::BudgetTooSmall { t_max, s });
    }
    let latent = encode(encoder, segment)?;
    let base_ids = codebook.assign(&latent)?;

    let plan = match mode {
        EmissionMode::Uniform => allocate(&ResidualProfile::uniform(s), t_max)?,
        EmissionMode::Adaptive => {
            let mut z_rows = Vec::with_capacity(latent.len * latent.dim);
            for &id in &base_ids {
                z_rows.extend(codebook.row(id));
            }
            let reconstruction = decode(decoder, &z_rows)?;
            let profile = residual_profile(segment, &reconstruction, s)?;
            allocate(&profile, t_max)?
        }
    };

    let mut token_ids = Vec::with_capacity(t_max);
    let mut slice_boundaries = Vec::with_capacity(s);
    match mode {
        EmissionMode::Uniform => {
            for (slice, &count) in plan.per_slice.iter().enumerate() {
                token_ids.extend(std::iter::repeat(base_ids[slice]).take(count));
                slice_boundaries.push(token_ids.len());
            }
        }
        EmissionMode::Adaptive => {
            // Dense feature map [D, t]; its strided grid reproduces the
            // training latents exactly, and the in-between columns provide
            // the sub-slice features pooled for multi-token slices.
            let mut g = Graph::new();
            let x = batch_leaf(&mut g, std::slice::from_ref(segment));
            let fine = encoder.forward_fine(&mut g, x, false);
            let fine_map = g.data(fine.out).to_vec();
            let d = encoder.cfg.latent_dim;
            let t = encoder.cfg.seg_len;
            let span = t / s;

            for (slice, &count) in plan.per_slice.iter().enumerate() {
                if count == 1 {
                    token_ids.push(base_ids[slice]);
                } else {
                    // Pool this slice's span of the dense map into `count`
                    // vectors and quantize each.
                    let mut rows = vec![0.0; count * d];
                    for bin in 0..count {
                        let (lo, hi) = pool_bin(bin, span, count);
                        for di in 0..d {
                            let mut acc = 0.0;
                            for p in lo..hi {
                                acc += fine_map[di * t + slice * span + p];
                            }
                            rows[bin * d + di] = acc / (hi - lo) as f64;
                        }
                    }
                    let pooled = LatentSequence {
                        dim: d,
                        len: count,
                        data: rows,
                        source: segment.origin(),
                    };
                    token_ids.extend(codebook.assign(&pooled)?);
                }
                slice_boundaries.push(token_ids.len());
            }
        }
    }
    debug_assert_eq!(token_ids.len(), t_max);
    Ok(EmittedSequence {
        token_ids,
        slice_boundaries,
        origin: segment.origin(),
        label: segment.label,
    })
}

/// One line of the token dump.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TokenRecord {
    pub tokens: Vec<usize>,
    pub slices: Vec<usize>,
    pub label: u32,
    pub origin: String,
}

impl From<&EmittedSequence> for TokenRecord {
    fn from(seq: &EmittedSequence) -> Self {
        Self {
            tokens: seq.token_ids.clone(),
            slices: seq.slice_boundaries.clone(),
            label: seq.label,
            origin: seq.origin.clone(),
        }
    }
}

pub fn write_token_dump(path: &Path, records: &[TokenRecord]) -> Result<(), TokenizerError> {
    let err = |source: std::io::Error| TokenizerError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(fs::File::create(path).map_err(err)?);
    for rec in records {
        let line = serde_json::to_string(rec)
            .expect("token record serialization is infallible");
        w.write_all(line.as_bytes()).map_err(err)?;
        w.write_all(b"\n").map_err(err)?;
    }
    w.flush().map_err(err)
}

pub fn read_token_dump(path: &Path) -> Result<Vec<TokenRecord>, TokenizerError> {
    let err = |source: std::io::Error| TokenizerError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(fs::File::open(path).map_err(err)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(err)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TokenRecord =
            serde_json::from_str(&line).map_err(|e| TokenizerError::BadRecord {
                path: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;
    use crate::quantizer::quantize;
    use proptest::prelude::*;
    use rand::Rng;

    fn segment(values: Vec<f64>, len: usize, channels: usize, slices: usize) -> Segment {
        Segment {
            values,
            len,
            channels,
            recording_id: "tok".into(),
            start: 0,
            label: 1,
            slices,
        }
    }

    #[test]
    fn residual_profile_degenerate_and_concentrated() {
        let seg = segment(vec![1.0; 8], 8, 1, 4);
        let perfect = residual_profile(&seg, &seg.values.clone(), 4).unwrap();
        assert!(perfect.energies.iter().all(|&e| e == 0.0));
        assert_eq!(perfect.probabilities, vec![0.25; 4]);

        let mut recon = seg.values.clone();
        recon[0] = 0.0; // error only in slice 0
        let p = residual_profile(&seg, &recon, 4).unwrap();
        assert_eq!(p.probabilities, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn residual_profile_matches_direct_sum() {
        let mut rng = crate::seeds::rng(41, "resid", 0);
        let t = 12;
        let c = 3;
        let s = 4;
        let seg = segment((0..t * c).map(|_| rng.gen_range(-1.0..1.0)).collect(), t, c, s);
        let recon: Vec<f64> = (0..t * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = residual_profile(&seg, &recon, s).unwrap();
        let slice_len = t / s;
        for i in 0..s {
            let mut direct = 0.0;
            for ti in i * slice_len..(i + 1) * slice_len {
                for ch in 0..c {
                    direct += (seg.values[ti * c + ch] - recon[ti * c + ch]).powi(2);
                }
            }
            assert!((p.energies[i] - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn allocate_plain_case() {
        let p = ResidualProfile::from_energies(vec![0.5, 0.3, 0.2]);
        let plan = allocate(&p, 10).unwrap();
        assert_eq!(plan.per_slice, vec![5, 3, 2]);
    }

    #[test]
    fn allocate_surplus_subtraction_trace() {
        // All mass on slice 0 with budget 4: initial [4,0,0,0], coverage
        // raises to [4,1,1,1], and the surplus of three comes back out of
        // slice 0 because the others are already at the floor.
        let p = ResidualProfile::from_energies(vec![9.0, 0.0, 0.0, 0.0]);
        let plan = allocate(&p, 4).unwrap();
        assert_eq!(plan.per_slice, vec![1, 1, 1, 1]);
    }

    #[test]
    fn allocate_uniform_symmetry() {
        let p = ResidualProfile::uniform(6);
        let plan = allocate(&p, 12).unwrap();
        assert_eq!(plan.per_slice, vec![2; 6]);
    }

    #[test]
    fn allocate_rejects_small_budget() {
        let p = ResidualProfile::uniform(4);
        assert!(matches!(
            allocate(&p, 3),
            Err(TokenizerError::BudgetTooSmall { .. })
        ));
    }

    fn toy_models(seed: u64) -> (Encoder, Codebook, Decoder) {
        let cfg = NetConfig {
            in_channels: 2,
            seg_len: 16,
            slices: 4,
            latent_dim: 3,
            hidden: 4,
        };
        let enc = Encoder::init(cfg.clone(), seed).unwrap();
        let dec = Decoder::init(cfg, seed + 1).unwrap();
        let cb = Codebook::init(8, 3, seed + 2).unwrap();
        (enc, cb, dec)
    }

    #[test]
    fn emit_budget_equals_slices_reduces_to_plain_quantize() {
        let (enc, cb, dec) = toy_models(50);
        let seg = segment(
            (0..32).map(|i| (i as f64 * 0.61).sin()).collect(),
            16,
            2,
            4,
        );
        let emitted = emit(&enc, &cb, &dec, &seg, 4, EmissionMode::Adaptive).unwrap();
        let mut cb2 = cb.clone();
        let latent = encode(&enc, &seg).unwrap();
        let q = quantize(&mut cb2, &latent).unwrap();
        assert_eq!(emitted.token_ids, q.token_ids);
        assert_eq!(emitted.slice_boundaries, vec![1, 2, 3, 4]);
    }

    #[test]
    fn emit_length_is_always_budget() {
        let (enc, cb, dec) = toy_models(51);
        let mut rng = crate::seeds::rng(52, "emit", 0);
        for trial in 0..50 {
            let seg = segment(
                (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                16,
                2,
                4,
            );
            let t_max = rng.gen_range(4..16);
            for mode in [EmissionMode::Adaptive, EmissionMode::Uniform] {
                let emitted = emit(&enc, &cb, &dec, &seg, t_max, mode).unwrap();
                assert_eq!(emitted.token_ids.len(), t_max, "trial {trial}");
                assert_eq!(*emitted.slice_boundaries.last().unwrap(), t_max);
                assert_eq!(emitted.slice_boundaries.len(), 4);
            }
        }
    }

    #[test]
    fn uniform_mode_duplicates_slice_tokens() {
        let (enc, cb, dec) = toy_models(53);
        let seg = segment(
            (0..32).map(|i| (i as f64 * 0.17).cos()).collect(),
            16,
            2,
            4,
        );
        let emitted = emit(&enc, &cb, &dec, &seg, 8, EmissionMode::Uniform).unwrap();
        let latent = encode(&enc, &seg).unwrap();
        let base = cb.assign(&latent).unwrap();
        let expect: Vec<usize> = base.iter().flat_map(|&t| [t, t]).collect();
        assert_eq!(emitted.token_ids, expect);
    }

    #[test]
    fn token_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tokens.jsonl");
        let records = vec![
            TokenRecord {
                tokens: vec![1, 2, 3],
                slices: vec![1, 2, 3],
                label: 0,
                origin: "a:0".into(),
            },
            TokenRecord {
                tokens: vec![5, 5],
                slices: vec![1, 2],
                label: 3,
                origin: "b:16".into(),
            },
        ];
        write_token_dump(&path, &records).unwrap();
        let back = read_token_dump(&path).unwrap();
        assert_eq!(records, back);
        // Empty dump is a valid (empty) file.
        write_token_dump(&path, &[]).unwrap();
        assert!(read_token_dump(&path).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn allocation_conserves_budget_and_coverage(seed in 0u64..2000) {
            let mut rng = crate::seeds::rng(seed, "prop-alloc", 0);
            let s = rng.gen_range(1..24usize);
            let energies: Vec<f64> = (0..s).map(|_| rng.gen_range(0.0..10.0f64)).collect();
            let profile = ResidualProfile::from_energies(energies);
            let t_max = rng.gen_range(s..s * 5);
            let plan = allocate(&profile, t_max).unwrap();
            prop_assert_eq!(plan.per_slice.iter().sum::<usize>(), t_max);
            prop_assert!(plan.per_slice.iter().all(|&c| c >= 1));
        }

        #[test]
        fn allocation_is_monotone_up_to_rounding(seed in 0u64..1000) {
            let mut rng = crate::seeds::rng(seed, "prop-mono", 0);
            let s = rng.gen_range(2..16usize);
            let energies: Vec<f64> = (0..s).map(|_| rng.gen_range(0.001..10.0f64)).collect();
            let profile = ResidualProfile::from_energies(energies.clone());
            let t_max = rng.gen_range(s..s * 6);
            let plan = allocate(&profile, t_max).unwrap();
            for a in 0..s {
                for b in 0..s {
                    if energies[a] > energies[b] {
                        prop_assert!(
                            plan.per_slice[a] + 1 >= plan.per_slice[b],
                            "R[{a}]={} > R[{b}]={} but T=[{:?}]",
                            energies[a], energies[b], plan.per_slice
                        );
                    }
                }
            }
        }

        #[test]
        fn allocation_is_permutation_equivariant(seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let mut rng = crate::seeds::rng(seed, "prop-perm", 0);
            let s = rng.gen_range(2..12usize);
            // Distinct energies keep tie-breaking out of the picture.
            let mut energies: Vec<f64> = (0..s)
                .map(|i| (i as f64 + 1.0) * rng.gen_range(1.0..1.9f64))
                .collect();
            energies.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
            let s = energies.len();
            let t_max = rng.gen_range(s..s * 4 + 1);
            let base = allocate(&ResidualProfile::from_energies(energies.clone()), t_max).unwrap();
            let mut perm: Vec<usize> = (0..s).collect();
            perm.shuffle(&mut rng);
            let permuted: Vec<f64> = perm.iter().map(|&i| energies[i]).collect();
            let plan = allocate(&ResidualProfile::from_energies(permuted), t_max).unwrap();
            for (new_pos, &old_pos) in perm.iter().enumerate() {
                prop_assert_eq!(plan.per_slice[new_pos], base.per_slice[old_pos]);
            }
        }
    }
}
