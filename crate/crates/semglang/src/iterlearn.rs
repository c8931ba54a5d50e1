//! The iterated-learning trainer.
//!
//! Training runs in generations. Each generation renews the decoder from a
//! fresh seeded initialization while the encoder and codebook carry over,
//! warms the new decoder up against the frozen codebook on reconstruction
//! alone, then trains everything jointly (knowledge transmission) under the
//! full objective. The final generation's transmission is extended by a
//! configurable number of steps.
//!
//! Every random draw is derived from (seed, purpose, index), and the data
//! order is a pure function of the global step, so training is bitwise
//! reproducible and a checkpointed run resumes onto the identical
//! trajectory.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{
    self, context_loss_graph, CooccurrenceMatrix, LossBreakdown, LossError,
};
use crate::net::checkpoint::Container;
use crate::net::{
    adamw_step, batch_leaf, AdamHyper, AdamState, Decoder, Encoder, Graph, NetConfig, NetError,
    Var,
};
use crate::quantizer::{
    sample_zipf_ids, straight_through, zipf_target, Codebook, LatentSequence, QuantizerError,
};
use crate::seeds;
use crate::signal::{window, Recording, SignalError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset has {data} channels but config expects {config}")]
    ChannelMismatch { data: usize, config: usize },
    #[error("non-finite loss at step {step}; last good state attached")]
    NonFiniteLoss { step: u64, checkpoint: Box<Container> },
    #[error("renewal is only valid at a generation boundary")]
    NotAtBoundary,
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Full training configuration. `t`/`stride`/`s` control windowing, `k`/`d`
/// the codebook, the step counts the generation schedule, and the three
/// `*_enabled` switches the individual linguistic biases.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub generations: u32,
    pub warmup_steps: u64,
    pub transmission_steps: u64,
    pub final_extra_steps: u64,
    /// Fraction of all planned steps during which tokens are sampled under
    /// the Zipf prior instead of taken by argmin.
    pub zipf_phase_fraction: f64,
    pub zipf_exponent: f64,
    /// Starting temperature of the sampling phase; annealed linearly to the
    /// argmin limit across the phase.
    pub zipf_temperature: f64,
    /// Softmax temperature of the differentiable usage distribution fed to
    /// the Zipf regularizer.
    pub freq_temperature: f64,
    /// Codebook init range [-scale, scale]; zero selects the conventional
    /// [-1/K, 1/K].
    pub codebook_init_scale: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub k: usize,
    pub d: usize,
    pub s: usize,
    pub t: usize,
    pub stride: usize,
    pub hidden: usize,
    pub channels: usize,
    pub cooc_window: usize,
    pub cooc_decay: f32,
    pub zipf_enabled: bool,
    pub context_enabled: bool,
    pub preserving_enabled: bool,
    /// When false, emission defaults to uniform duplicated tokens instead of
    /// residual-adaptive allocation.
    pub residual_enabled: bool,
    /// Token budget carried along for the tokenizer stage.
    pub t_max: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            generations: 4,
            warmup_steps: 200,
            transmission_steps: 2000,
            final_extra_steps: 500,
            zipf_phase_fraction: 0.25,
            zipf_exponent: 1.0,
            zipf_temperature: 1.0,
            freq_temperature: 1.0,
            codebook_init_scale: 0.5,
            lambda1: 0.25,
            lambda2: 0.1,
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 32,
            seed: 0,
            k: 512,
            d: 32,
            s: 16,
            t: 64,
            stride: 32,
            hidden: 32,
            channels: 8,
            cooc_window: 2,
            cooc_decay: 0.99,
            zipf_enabled: true,
            context_enabled: true,
            preserving_enabled: true,
            residual_enabled: true,
            t_max: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.generations == 0 {
            return bad("generations must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.k < 2 {
            return bad(format!("codebook size {} too small", self.k));
        }
        if self.t == 0 || self.s == 0 || self.t % self.s != 0 {
            return bad(format!("slices {} must divide window length {}", self.s, self.t));
        }
        if self.stride == 0 || self.stride > self.t {
            return bad(format!("stride {} out of range 1..={}", self.stride, self.t));
        }
        if !(0.0..=1.0).contains(&self.zipf_phase_fraction) {
            return bad("zipf_phase_fraction must lie in [0, 1]".into());
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive".into());
        }
        if !(self.zipf_temperature > 0.0) || !(self.freq_temperature > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if self.cooc_window == 0 {
            return bad("cooc_window must be >= 1".into());
        }
        if !(self.cooc_decay > 0.0 && self.cooc_decay <= 1.0) {
            return bad("cooc_decay must lie in (0, 1]".into());
        }
        if self.t_max < self.s {
            return bad(format!("t_max {} below slice count {}", self.t_max, self.s));
        }
        Ok(())
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            in_channels: self.channels,
            seg_len: self.t,
            slices: self.s,
            latent_dim: self.d,
            hidden: self.hidden,
        }
    }

    /// Total optimizer steps the schedule will execute.
    pub fn planned_steps(&self) -> u64 {
        self.generations as u64 * (self.warmup_steps + self.transmission_steps)
            + self.final_extra_steps
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamHyper::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Warmup,
    Transmission,
}

/// One row of the per-step loss log.
#[derive(Debug, Clone, Serialize)]
pub struct LossRow {
    pub step: u64,
    pub generation: u32,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

impl LossRow {
    pub const CSV_HEADER: &'static str =
        "step,generation,rec,emb,com,zipf,context,preserving,total";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.generation,
            self.losses.rec,
            self.losses.emb,
            self.losses.com,
            self.losses.zipf,
            self.losses.context,
            self.losses.preserving,
            self.losses.total
        )
    }
}

/// Parameter fingerprints and usage statistics recorded at the boundaries of
/// one generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub generation: u32,
    pub encoder_hash_start: u64,
    pub encoder_hash_after_warmup: u64,
    pub encoder_hash_end: u64,
    pub codebook_hash_start: u64,
    pub codebook_hash_after_warmup: u64,
    pub codebook_hash_end: u64,
    pub decoder_hash_start: u64,
    pub decoder_hash_after_warmup: u64,
    pub decoder_hash_end: u64,
    /// JS divergence between this generation's token usage and the Zipf
    /// target.
    pub js_usage_to_zipf: f64,
    pub codebook_perplexity: f64,
    /// Preservation distance between this generation's co-occurrence matrix
    /// and the previous generation's snapshot.
    pub cooc_drift: f64,
    /// Mean of the last few transmission-step losses.
    pub final_losses: LossBreakdown,
    pub steps_in_generation: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub planned_steps: u64,
    pub total_steps: u64,
    pub segments: usize,
    pub generations: Vec<GenerationSummary>,
}

pub struct TrainOutcome {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub codebook: Codebook,
    pub report: TrainReport,
    pub rows: Vec<LossRow>,
}

/// Observer hooks for logging and checkpoint cadence. `after_step` sees the
/// trainer in a consistent post-step state.
pub trait TrainObserver {
    fn on_step(&mut self, _row: &LossRow) {}
    fn on_generation_end(&mut self, _summary: &GenerationSummary) {}
    fn after_step(&mut self, _trainer: &Trainer) {}
}

/// No-op observer.
pub struct SilentObserver;
impl TrainObserver for SilentObserver {}

struct GenMarks {
    enc_start: u64,
    cb_start: u64,
    dec_start: u64,
    enc_warm: u64,
    cb_warm: u64,
    dec_warm: u64,
}

/// Trainer state for one run: the three model parts, their optimizer states,
/// co-occurrence accumulators, phase counters, and the log so far.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub codebook: Codebook,
    enc_opt: Vec<AdamState>,
    dec_opt: Vec<AdamState>,
    cb_opt: AdamState,
    pub cooc: CooccurrenceMatrix,
    pub cooc_prev: CooccurrenceMatrix,
    pub generation: u32,
    pub phase: Phase,
    pub step_in_phase: u64,
    pub global_step: u64,
    marks: GenMarks,
    summaries: Vec<GenerationSummary>,
    rows: Vec<LossRow>,
    recent: Vec<LossBreakdown>,
    perm_cache: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let net_cfg = cfg.net_config();
        net_cfg.validate()?;
        let encoder = Encoder::init(net_cfg.clone(), seeds::derive_u64(cfg.seed, "encoder", 0))?;
        let decoder = Decoder::init(net_cfg, seeds::derive_u64(cfg.seed, "decoder", 0))?;
        let cb_scale = if cfg.codebook_init_scale > 0.0 {
            cfg.codebook_init_scale
        } else {
            1.0 / cfg.k as f64
        };
        let codebook = Codebook::init_with_scale(
            cfg.k,
            cfg.d,
            seeds::derive_u64(cfg.seed, "codebook", 0),
            cb_scale,
        )?;
        let enc_opt = encoder
            .params()
            .iter()
            .map(|p| AdamState::zeros(p.numel()))
            .collect();
        let dec_opt = decoder
            .params()
            .iter()
            .map(|p| AdamState::zeros(p.numel()))
            .collect();
        let cb_opt = AdamState::zeros(codebook.vectors.numel());
        let marks = GenMarks {
            enc_start: encoder.hash(),
            cb_start: codebook.hash(),
            dec_start: decoder.hash(),
            enc_warm: encoder.hash(),
            cb_warm: codebook.hash(),
            dec_warm: decoder.hash(),
        };
        Ok(Self {
            cooc: CooccurrenceMatrix::new(cfg.k, cfg.cooc_decay),
            cooc_prev: CooccurrenceMatrix::new(cfg.k, cfg.cooc_decay),
            enc_opt,
            dec_opt,
            cb_opt,
            encoder,
            decoder,
            codebook,
            generation: 0,
            phase: Phase::Warmup,
            step_in_phase: 0,
            global_step: 0,
            marks,
            summaries: Vec::new(),
            rows: Vec::new(),
            recent: Vec::new(),
            cfg,
            perm_cache: None,
        })
    }

    /// Replace the decoder with a freshly initialized agent, keeping encoder
    /// and codebook bit-identical. Snapshots the co-occurrence matrix of the
    /// finished generation and rewinds the phase clock.
    pub fn renew_decoder(&mut self, seed: u64) -> Result<(), TrainError> {
        if self.phase != Phase::Transmission {
            return Err(TrainError::NotAtBoundary);
        }
        self.decoder = Decoder::init(self.cfg.net_config(), seed)?;
        self.dec_opt = self
            .decoder
            .params()
            .iter()
            .map(|p| AdamState::zeros(p.numel()))
            .collect();
        self.generation += 1;
        self.codebook.generation = self.generation;
        self.codebook.reset_usage();
        self.cooc_prev = self.cooc.clone();
        self.cooc.generation = self.generation;
        self.phase = Phase::Warmup;
        self.step_in_phase = 0;
        self.recent.clear();
        self.marks = GenMarks {
            enc_start: self.encoder.hash(),
            cb_start: self.codebook.hash(),
            dec_start: self.decoder.hash(),
            enc_warm: self.encoder.hash(),
            cb_warm: self.codebook.hash(),
            dec_warm: self.decoder.hash(),
        };
        Ok(())
    }

    /// Segment the recordings under the configured windowing.
    pub fn make_segments(
        &self,
        recordings: &[Recording],
    ) -> Result<Vec<crate::signal::Segment>, TrainError> {
        if recordings.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        if recordings[0].channels != self.cfg.channels {
            return Err(TrainError::ChannelMismatch {
                data: recordings[0].channels,
                config: self.cfg.channels,
            });
        }
        let mut segments = Vec::new();
        for rec in recordings {
            segments.extend(window(rec, self.cfg.t, self.cfg.stride, self.cfg.s)?);
        }
        if segments.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        Ok(segments)
    }

    /// Indices of the batch consumed at `global_step`. A pure function of
    /// (seed, dataset size, step): epoch permutations are derived, not
    /// stateful, so a resumed run sees the same data order.
    fn batch_indices(&mut self, n: usize, step: u64) -> Vec<usize> {
        let eff = self.cfg.batch_size.min(n);
        let per_epoch = (n / eff) as u64;
        let epoch = step / per_epoch;
        let offset = (step % per_epoch) as usize;
        let fresh = match &self.perm_cache {
            Some((e, _)) => *e != epoch,
            None => true,
        };
        if fresh {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut seeds::rng(self.cfg.seed, "data-order", epoch));
            self.perm_cache = Some((epoch, perm));
        }
        let perm = &self.perm_cache.as_ref().unwrap().1;
        perm[offset * eff..(offset + 1) * eff].to_vec()
    }

    fn zipf_window_steps(&self) -> f64 {
        self.cfg.zipf_phase_fraction * self.cfg.planned_steps() as f64
    }

    /// Zipf-weighted sampling is active during the first
    /// `zipf_phase_fraction` of all planned steps.
    pub fn zipf_sampling_active(&self) -> bool {
        self.cfg.zipf_enabled && (self.global_step as f64) < self.zipf_window_steps()
    }

    /// Linear anneal from the configured temperature to the argmin limit
    /// across the sampling window.
    fn zipf_temperature_now(&self) -> f64 {
        let window = self.zipf_window_steps();
        let progress = self.global_step as f64 / window;
        (self.cfg.zipf_temperature * (1.0 - progress)).max(1e-3)
    }

    /// One optimizer step over the given batch. Nothing is committed until
    /// the loss and all gradients have been checked finite, so on failure
    /// the trainer still holds the last good state.
    fn step(&mut self, segments: &[crate::signal::Segment], indices: &[usize]) -> Result<LossBreakdown, TrainError> {
        let warmup = self.phase == Phase::Warmup;
        let b = indices.len();
        let s = self.cfg.s;
        let d = self.cfg.d;
        let batch: Vec<crate::signal::Segment> =
            indices.iter().map(|&i| segments[i].clone()).collect();

        let mut g = Graph::new();
        let x = batch_leaf(&mut g, &batch);
        let enc_pass = self.encoder.forward(&mut g, x, !warmup);
        let z_perm = g.swap_axes12(enc_pass.out);
        let z_flat = g.reshape(z_perm, &[b * s, d]);

        // Token assignment, hard or Zipf-sampled, outside the tape.
        let latent = LatentSequence {
            dim: d,
            len: b * s,
            data: g.data(z_flat).to_vec(),
            source: String::new(),
        };
        let ids = if self.zipf_sampling_active() {
            let mut rng = seeds::rng(self.cfg.seed, "zipf-sample", self.global_step);
            sample_zipf_ids(
                &self.codebook,
                &latent,
                self.cfg.zipf_exponent,
                self.zipf_temperature_now(),
                &mut rng,
            )?
        } else {
            self.codebook.assign(&latent)?
        };

        let cb_var = if warmup {
            g.leaf(self.codebook.vectors.to_f64(), &self.codebook.vectors.shape)
        } else {
            g.param(self.codebook.vectors.to_f64(), &self.codebook.vectors.shape)
        };

        // Decoder input: straight-through in joint training; during warmup
        // the quantized rows are used as plain constants.
        let zq_flat = if warmup {
            g.gather(cb_var, &ids)
        } else {
            straight_through(&mut g, z_flat, cb_var, &ids)
        };
        let zq_seq = g.reshape(zq_flat, &[b, s, d]);
        let zq_bds = g.swap_axes12(zq_seq);
        let dec_pass = self.decoder.forward(&mut g, zq_bds, true);
        let rec_var = g.smooth_l1(dec_pass.out, x);

        let mut breakdown = LossBreakdown::default();
        let sequences: Vec<Vec<usize>> = ids.chunks(s).map(|c| c.to_vec()).collect();

        let total_var: Var = if warmup {
            breakdown.rec = g.value(rec_var);
            breakdown.total = breakdown.rec;
            rec_var
        } else {
            let rows = g.gather(cb_var, &ids);
            let z_sg = g.stop_grad(z_flat);
            let emb_diff = g.sub(z_sg, rows);
            let emb_sq = g.mul(emb_diff, emb_diff);
            let emb_var = g.mean(emb_sq);
            let rows_sg = g.stop_grad(rows);
            let com_diff = g.sub(z_flat, rows_sg);
            let com_sq = g.mul(com_diff, com_diff);
            let com_var = g.mean(com_sq);

            let bias_active = self.cfg.lambda2 != 0.0
                && (self.cfg.zipf_enabled
                    || self.cfg.context_enabled
                    || self.cfg.preserving_enabled);
            let total = if bias_active {
                let zipf_var = if self.cfg.zipf_enabled {
                    // Differentiable usage estimate: soft assignments from
                    // distances, averaged over the batch. The temperature is
                    // relative to the mean squared distance of the batch so
                    // the softmax keeps a meaningful reach as codes tighten
                    // around the data.
                    let d2 = g.pairwise_sq_dist(z_flat, cb_var);
                    let mean_d2: f64 =
                        g.data(d2).iter().sum::<f64>() / g.data(d2).len() as f64;
                    let temp = (self.cfg.freq_temperature * mean_d2).max(1e-9);
                    let scaled = g.mul_scalar(d2, -1.0 / temp);
                    let soft = g.softmax_rows(scaled);
                    let freq = g.mean_axis0(soft);
                    g.js_div(freq, zipf_target(self.cfg.k, self.cfg.zipf_exponent))
                } else {
                    g.scalar(0.0)
                };
                let context_var = if self.cfg.context_enabled {
                    context_loss_graph(&mut g, cb_var, &sequences)
                } else {
                    g.scalar(0.0)
                };
                let preserving_val = if self.cfg.preserving_enabled && self.generation > 0 {
                    losses::preserving_loss(&self.cooc, &self.cooc_prev)?
                } else {
                    0.0
                };
                let preserving_var = g.scalar(preserving_val);
                let zc = g.add(zipf_var, context_var);
                let human_var = g.add(zc, preserving_var);
                let com_weighted = g.mul_scalar(com_var, self.cfg.lambda1);
                let human_weighted = g.mul_scalar(human_var, self.cfg.lambda2);
                let re = g.add(rec_var, emb_var);
                let ch = g.add(com_weighted, human_weighted);
                breakdown.zipf = g.value(zipf_var);
                breakdown.context = g.value(context_var);
                breakdown.preserving = preserving_val;
                g.add(re, ch)
            } else {
                let com_weighted = g.mul_scalar(com_var, self.cfg.lambda1);
                let re = g.add(rec_var, emb_var);
                g.add(re, com_weighted)
            };
            breakdown.rec = g.value(rec_var);
            breakdown.emb = g.value(emb_var);
            breakdown.com = g.value(com_var);
            breakdown.human = breakdown.zipf + breakdown.context + breakdown.preserving;
            breakdown.total = g.value(total);
            total
        };

        let attach_state = |e: TrainError, trainer: &Trainer| -> TrainError {
            match e {
                TrainError::Net(NetError::Graph(_)) | TrainError::Net(NetError::NonFiniteGradient(_)) => {
                    TrainError::NonFiniteLoss {
                        step: trainer.global_step,
                        checkpoint: Box::new(trainer.to_container()),
                    }
                }
                other => other,
            }
        };

        let grads = g
            .backward(total_var)
            .map_err(|e| attach_state(TrainError::Net(NetError::Graph(e)), self))?;

        // Collect every gradient first and verify finiteness before any
        // parameter is touched.
        let dec_grads: Vec<Vec<f64>> = dec_pass
            .param_vars
            .iter()
            .map(|&v| grads.wrt(v, g.data(v).len()))
            .collect();
        let (enc_grads, cb_grad) = if warmup {
            (Vec::new(), Vec::new())
        } else {
            (
                enc_pass
                    .param_vars
                    .iter()
                    .map(|&v| grads.wrt(v, g.data(v).len()))
                    .collect(),
                grads.wrt(cb_var, self.codebook.vectors.numel()),
            )
        };
        let all_finite = dec_grads
            .iter()
            .chain(enc_grads.iter())
            .all(|gr| gr.iter().all(|v| v.is_finite()))
            && cb_grad.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(TrainError::NonFiniteLoss {
                step: self.global_step,
                checkpoint: Box::new(self.to_container()),
            });
        }

        let hyper = self.cfg.hyper();
        for (param, (grad, state)) in self
            .decoder
            .params_mut()
            .into_iter()
            .zip(dec_grads.iter().zip(self.dec_opt.iter_mut()))
        {
            adamw_step(param, grad, state, &hyper)?;
        }
        if !warmup {
            for (param, (grad, state)) in self
                .encoder
                .params_mut()
                .into_iter()
                .zip(enc_grads.iter().zip(self.enc_opt.iter_mut()))
            {
                adamw_step(param, grad, state, &hyper)?;
            }
            adamw_step(&mut self.codebook.vectors, &cb_grad, &mut self.cb_opt, &hyper)?;
        }

        // Commit the side effects of this step.
        for &id in &ids {
            self.codebook.usage_counts[id] += 1;
        }
        if !warmup {
            losses::update_cooccurrence(&mut self.cooc, &sequences, self.cfg.cooc_window)?;
        }
        Ok(breakdown)
    }

    fn run_steps(
        &mut self,
        segments: &[crate::signal::Segment],
        planned: u64,
        observer: &mut dyn TrainObserver,
        stop_after: Option<u64>,
    ) -> Result<bool, TrainError> {
        while self.step_in_phase < planned {
            if let Some(limit) = stop_after {
                if self.global_step >= limit {
                    return Ok(false);
                }
            }
            let indices = self.batch_indices(segments.len(), self.global_step);
            let losses = self.step(segments, &indices)?;
            self.global_step += 1;
            self.step_in_phase += 1;
            let row = LossRow {
                step: self.global_step,
                generation: self.generation,
                losses,
            };
            if self.phase == Phase::Transmission {
                self.recent.push(losses);
                if self.recent.len() > 20 {
                    self.recent.remove(0);
                }
            }
            observer.on_step(&row);
            self.rows.push(row);
            observer.after_step(self);
        }
        Ok(true)
    }

    fn transmission_planned(&self) -> u64 {
        self.cfg.transmission_steps
            + if self.generation + 1 == self.cfg.generations {
                self.cfg.final_extra_steps
            } else {
                0
            }
    }

    /// Drive the generation schedule to completion (or to `stop_after`
    /// global steps). Returns true when the schedule finished.
    pub fn run(
        &mut self,
        recordings: &[Recording],
        observer: &mut dyn TrainObserver,
        stop_after: Option<u64>,
    ) -> Result<bool, TrainError> {
        let segments = self.make_segments(recordings)?;
        loop {
            match self.phase {
                Phase::Warmup => {
                    if !self.run_steps(&segments, self.cfg.warmup_steps, observer, stop_after)? {
                        return Ok(false);
                    }
                    // Warmup must leave encoder and codebook untouched.
                    let enc = self.encoder.hash();
                    let cb = self.codebook.hash();
                    assert_eq!(enc, self.marks.enc_start, "encoder mutated during warmup");
                    assert_eq!(cb, self.marks.cb_start, "codebook mutated during warmup");
                    self.marks.enc_warm = enc;
                    self.marks.cb_warm = cb;
                    self.marks.dec_warm = self.decoder.hash();
                    self.phase = Phase::Transmission;
                    self.step_in_phase = 0;
                }
                Phase::Transmission => {
                    let planned = self.transmission_planned();
                    if !self.run_steps(&segments, planned, observer, stop_after)? {
                        return Ok(false);
                    }
                    let summary = self.finish_generation();
                    observer.on_generation_end(&summary);
                    if self.generation + 1 < self.cfg.generations {
                        let seed = seeds::derive_u64(
                            self.cfg.seed,
                            "decoder",
                            self.generation as u64 + 1,
                        );
                        self.renew_decoder(seed)?;
                    } else {
                        return Ok(true);
                    }
                }
            }
        }
    }

    fn finish_generation(&mut self) -> GenerationSummary {
        let js = crate::quantizer::usage_distribution(&self.codebook)
            .map(|dist| {
                crate::metrics::js_divergence(
                    &dist,
                    &zipf_target(self.cfg.k, self.cfg.zipf_exponent),
                )
            })
            .unwrap_or(f64::NAN);
        let perplexity =
            crate::quantizer::codebook_perplexity(&self.codebook).unwrap_or(f64::NAN);
        let drift = losses::preserving_loss(&self.cooc, &self.cooc_prev).unwrap_or(f64::NAN);
        let n = self.recent.len().max(1) as f64;
        let mut avg = LossBreakdown::default();
        for l in &self.recent {
            avg.rec += l.rec / n;
            avg.emb += l.emb / n;
            avg.com += l.com / n;
            avg.zipf += l.zipf / n;
            avg.context += l.context / n;
            avg.preserving += l.preserving / n;
            avg.human += l.human / n;
            avg.total += l.total / n;
        }
        let summary = GenerationSummary {
            generation: self.generation,
            encoder_hash_start: self.marks.enc_start,
            encoder_hash_after_warmup: self.marks.enc_warm,
            encoder_hash_end: self.encoder.hash(),
            codebook_hash_start: self.marks.cb_start,
            codebook_hash_after_warmup: self.marks.cb_warm,
            codebook_hash_end: self.codebook.hash(),
            decoder_hash_start: self.marks.dec_start,
            decoder_hash_after_warmup: self.marks.dec_warm,
            decoder_hash_end: self.decoder.hash(),
            js_usage_to_zipf: js,
            codebook_perplexity: perplexity,
            cooc_drift: drift,
            final_losses: avg,
            steps_in_generation: self.cfg.warmup_steps + self.transmission_planned(),
        };
        self.summaries.push(summary.clone());
        summary
    }

    pub fn report(&self, segments: usize) -> TrainReport {
        TrainReport {
            config: self.cfg.clone(),
            planned_steps: self.cfg.planned_steps(),
            total_steps: self.global_step,
            segments,
            generations: self.summaries.clone(),
        }
    }

    pub fn rows(&self) -> &[LossRow] {
        &self.rows
    }

    pub fn summaries(&self) -> &[GenerationSummary] {
        &self.summaries
    }

    /// Serialize the complete trainer state.
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.push_bytes(
            "config",
            serde_json::to_vec(&self.cfg).expect("config serializes"),
        );
        for p in self.encoder.params().into_iter().chain(self.decoder.params()) {
            c.push_f32(format!("param.{}", p.name), &p.shape, p.data.clone());
        }
        c.push_f32(
            "param.codebook.vectors",
            &self.codebook.vectors.shape,
            self.codebook.vectors.data.clone(),
        );
        let opt_entries: Vec<(String, &AdamState)> = self
            .encoder
            .params()
            .iter()
            .zip(&self.enc_opt)
            .map(|(p, s)| (p.name.clone(), s))
            .chain(
                self.decoder
                    .params()
                    .iter()
                    .zip(&self.dec_opt)
                    .map(|(p, s)| (p.name.clone(), s)),
            )
            .chain(std::iter::once((
                "codebook.vectors".to_string(),
                &self.cb_opt,
            )))
            .collect();
        for (name, state) in opt_entries {
            c.push_f32(format!("adam.m.{name}"), &[state.m.len()], state.m.clone());
            c.push_f32(format!("adam.v.{name}"), &[state.v.len()], state.v.clone());
            c.push_u64(format!("adam.t.{name}"), vec![state.t]);
        }
        c.push_u64("state.global_step", vec![self.global_step]);
        c.push_u64("state.generation", vec![self.generation as u64]);
        c.push_u64(
            "state.phase",
            vec![match self.phase {
                Phase::Warmup => 0,
                Phase::Transmission => 1,
            }],
        );
        c.push_u64("state.step_in_phase", vec![self.step_in_phase]);
        c.push_u64("state.usage_counts", self.codebook.usage_counts.clone());
        c.push_u64("state.codebook_generation", vec![self.codebook.generation as u64]);
        c.push_f32(
            "state.cooc.counts",
            &[self.cfg.k, self.cfg.k],
            self.cooc.counts.clone(),
        );
        c.push_u64("state.cooc.generation", vec![self.cooc.generation as u64]);
        c.push_f32(
            "state.cooc_prev.counts",
            &[self.cfg.k, self.cfg.k],
            self.cooc_prev.counts.clone(),
        );
        c.push_u64(
            "state.cooc_prev.generation",
            vec![self.cooc_prev.generation as u64],
        );
        c.push_u64(
            "state.marks",
            vec![
                self.marks.enc_start,
                self.marks.cb_start,
                self.marks.dec_start,
                self.marks.enc_warm,
                self.marks.cb_warm,
                self.marks.dec_warm,
            ],
        );
        c.push_bytes(
            "state.summaries",
            serde_json::to_vec(&self.summaries).expect("summaries serialize"),
        );
        c
    }

    /// Restore a trainer from a checkpoint.
    pub fn from_container(c: &Container) -> Result<Self, TrainError> {
        let cfg: TrainConfig = serde_json::from_slice(c.bytes("config")?)
            .map_err(|e| TrainError::Config(format!("bad config blob: {e}")))?;
        let mut trainer = Self::new(cfg)?;
        {
            let load =
                |p: &mut crate::net::ParamTensor| -> Result<(), TrainError> {
                    let blob = c.f32s(&format!("param.{}", p.name))?;
                    if blob.len() != p.data.len() {
                        return Err(TrainError::Config(format!(
                            "parameter `{}` has wrong size in checkpoint",
                            p.name
                        )));
                    }
                    p.data.copy_from_slice(blob);
                    Ok(())
                };
            for p in trainer.encoder.params_mut() {
                load(p)?;
            }
            for p in trainer.decoder.params_mut() {
                load(p)?;
            }
            load(&mut trainer.codebook.vectors)?;
        }
        let load_opt = |name: &str, state: &mut AdamState| -> Result<(), TrainError> {
            state.m.copy_from_slice(c.f32s(&format!("adam.m.{name}"))?);
            state.v.copy_from_slice(c.f32s(&format!("adam.v.{name}"))?);
            state.t = c.scalar_u64(&format!("adam.t.{name}"))?;
            Ok(())
        };
        let enc_names: Vec<String> = trainer
            .encoder
            .params()
            .iter()
            .map(|p| p.name.clone())
            .collect();
        for (name, state) in enc_names.iter().zip(trainer.enc_opt.iter_mut()) {
            load_opt(name, state)?;
        }
        let dec_names: Vec<String> = trainer
            .decoder
            .params()
            .iter()
            .map(|p| p.name.clone())
            .collect();
        for (name, state) in dec_names.iter().zip(trainer.dec_opt.iter_mut()) {
            load_opt(name, state)?;
        }
        load_opt("codebook.vectors", &mut trainer.cb_opt)?;

        trainer.global_step = c.scalar_u64("state.global_step")?;
        trainer.generation = c.scalar_u64("state.generation")? as u32;
        trainer.phase = match c.scalar_u64("state.phase")? {
            0 => Phase::Warmup,
            _ => Phase::Transmission,
        };
        trainer.step_in_phase = c.scalar_u64("state.step_in_phase")?;
        trainer
            .codebook
            .usage_counts
            .copy_from_slice(c.u64s("state.usage_counts")?);
        trainer.codebook.generation = c.scalar_u64("state.codebook_generation")? as u32;
        trainer.cooc.counts.copy_from_slice(c.f32s("state.cooc.counts")?);
        trainer.cooc.generation = c.scalar_u64("state.cooc.generation")? as u32;
        trainer
            .cooc_prev
            .counts
            .copy_from_slice(c.f32s("state.cooc_prev.counts")?);
        trainer.cooc_prev.generation = c.scalar_u64("state.cooc_prev.generation")? as u32;
        let marks = c.u64s("state.marks")?;
        if marks.len() != 6 {
            return Err(TrainError::Config("bad marks blob".into()));
        }
        trainer.marks = GenMarks {
            enc_start: marks[0],
            cb_start: marks[1],
            dec_start: marks[2],
            enc_warm: marks[3],
            cb_warm: marks[4],
            dec_warm: marks[5],
        };
        trainer.summaries = serde_json::from_slice(c.bytes("state.summaries")?)
            .map_err(|e| TrainError::Config(format!("bad summaries blob: {e}")))?;
        Ok(trainer)
    }
}

/// Train to completion and hand back the final models plus the report.
pub fn train(cfg: TrainConfig, recordings: &[Recording]) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(cfg)?;
    let segments = trainer.make_segments(recordings)?.len();
    trainer.run(recordings, &mut SilentObserver, None)?;
    Ok(TrainOutcome {
        report: trainer.report(segments),
        rows: trainer.rows.clone(),
        encoder: trainer.encoder,
        decoder: trainer.decoder,
        codebook: trainer.codebook,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{synthesize, SynthConfig};

    pub(crate) fn tiny_config(seed: u64) -> TrainConfig {
        TrainConfig {
            generations: 2,
            warmup_steps: 3,
            transmission_steps: 8,
            final_extra_steps: 2,
            batch_size: 4,
            seed,
            k: 8,
            d: 4,
            s: 4,
            t: 16,
            stride: 8,
            hidden: 4,
            channels: 2,
            t_max: 8,
            ..TrainConfig::default()
        }
    }

    pub(crate) fn tiny_data(seed: u64) -> Vec<Recording> {
        let cfg = SynthConfig {
            num_classes: 2,
            channels: 2,
            burst_rates: vec![4.0, 10.0],
            seed,
            ..SynthConfig::default()
        };
        synthesize(&cfg, 2, 128).unwrap()
    }

    #[test]
    fn schedule_accounting() {
        let cfg = tiny_config(1);
        assert_eq!(cfg.planned_steps(), 2 * (3 + 8) + 2);
        let recs = tiny_data(1);
        let out = train(cfg.clone(), &recs).unwrap();
        assert_eq!(out.report.total_steps, cfg.planned_steps());
        assert_eq!(out.rows.len() as u64, cfg.planned_steps());
        assert_eq!(out.report.generations.len(), 2);
    }

    #[test]
    fn single_generation_schedule() {
        let cfg = TrainConfig {
            generations: 1,
            final_extra_steps: 0,
            ..tiny_config(2)
        };
        let recs = tiny_data(2);
        let out = train(cfg.clone(), &recs).unwrap();
        assert_eq!(out.report.total_steps, 3 + 8);
        assert_eq!(out.report.generations.len(), 1);
    }

    #[test]
    fn generation_boundaries_preserve_knowledge_carriers() {
        let cfg = tiny_config(3);
        let recs = tiny_data(3);
        let out = train(cfg, &recs).unwrap();
        let gens = &out.report.generations;
        for pair in gens.windows(2) {
            assert_eq!(pair[0].encoder_hash_end, pair[1].encoder_hash_start);
            assert_eq!(pair[0].codebook_hash_end, pair[1].codebook_hash_start);
            assert_ne!(pair[0].decoder_hash_end, pair[1].decoder_hash_start);
        }
        for g in gens {
            // Warmup leaves encoder/codebook fixed and moves the decoder.
            assert_eq!(g.encoder_hash_start, g.encoder_hash_after_warmup);
            assert_eq!(g.codebook_hash_start, g.codebook_hash_after_warmup);
            assert_ne!(g.decoder_hash_start, g.decoder_hash_after_warmup);
        }
    }

    #[test]
    fn renewal_is_seeded_and_preserves_encoder() {
        let cfg = tiny_config(4);
        let recs = tiny_data(4);
        let mut a = Trainer::new(cfg.clone()).unwrap();
        a.run(&recs, &mut SilentObserver, Some(cfg.warmup_steps + 1))
            .unwrap();
        // Force to a boundary state for the renewal contract.
        let mut t1 = Trainer::new(cfg.clone()).unwrap();
        t1.phase = Phase::Transmission;
        let enc_before = t1.encoder.hash();
        let cb_before = t1.codebook.hash();
        t1.renew_decoder(99).unwrap();
        assert_eq!(t1.encoder.hash(), enc_before);
        assert_eq!(t1.codebook.hash(), cb_before);
        assert_eq!(t1.generation, 1);
        assert_eq!(t1.phase, Phase::Warmup);

        let mut t2 = Trainer::new(cfg.clone()).unwrap();
        t2.phase = Phase::Transmission;
        t2.renew_decoder(99).unwrap();
        assert_eq!(t1.decoder.hash(), t2.decoder.hash());

        let mut t3 = Trainer::new(cfg).unwrap();
        assert!(matches!(
            t3.renew_decoder(99),
            Err(TrainError::NotAtBoundary)
        ));
    }

    #[test]
    fn renewed_decoder_is_uncorrelated_with_predecessor() {
        // Larger decoder so the correlation estimate has >= 1e4 samples.
        let cfg = TrainConfig {
            hidden: 28,
            d: 16,
            channels: 4,
            k: 8,
            s: 4,
            t: 16,
            stride: 8,
            ..tiny_config(5)
        };
        let recs = synthesize(
            &SynthConfig {
                num_classes: 2,
                channels: 4,
                burst_rates: vec![4.0, 10.0],
                seed: 5,
                ..SynthConfig::default()
            },
            2,
            64,
        )
        .unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        t.run(&recs, &mut SilentObserver, Some(5)).unwrap();
        t.phase = Phase::Transmission;
        let old: Vec<f64> = t
            .decoder
            .params()
            .iter()
            .flat_map(|p| p.data.iter().map(|&v| v as f64))
            .collect();
        t.renew_decoder(1234).unwrap();
        let new: Vec<f64> = t
            .decoder
            .params()
            .iter()
            .flat_map(|p| p.data.iter().map(|&v| v as f64))
            .collect();
        assert!(old.len() >= 10_000, "decoder too small: {}", old.len());
        let n = old.len() as f64;
        let (mo, mn) = (
            old.iter().sum::<f64>() / n,
            new.iter().sum::<f64>() / n,
        );
        let mut cov = 0.0;
        let mut vo = 0.0;
        let mut vn = 0.0;
        for (a, b) in old.iter().zip(&new) {
            cov += (a - mo) * (b - mn);
            vo += (a - mo) * (a - mo);
            vn += (b - mn) * (b - mn);
        }
        let corr = cov / (vo.sqrt() * vn.sqrt());
        assert!(corr.abs() < 0.05, "correlation {corr}");
    }

    #[test]
    fn zero_warmup_passes_through() {
        let cfg = TrainConfig {
            warmup_steps: 0,
            generations: 1,
            transmission_steps: 4,
            final_extra_steps: 0,
            ..tiny_config(6)
        };
        let recs = tiny_data(6);
        let out = train(cfg, &recs).unwrap();
        assert_eq!(out.report.total_steps, 4);
    }

    #[test]
    fn zipf_fraction_zero_never_samples() {
        let cfg = TrainConfig {
            zipf_phase_fraction: 0.0,
            ..tiny_config(7)
        };
        let trainer = Trainer::new(cfg).unwrap();
        assert!(!trainer.zipf_sampling_active());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let cfg = tiny_config(8);
        let recs = tiny_data(8);
        let mut t = Trainer::new(cfg).unwrap();
        t.run(&recs, &mut SilentObserver, Some(7)).unwrap();
        let bytes = t.to_container().to_bytes();
        let restored = Trainer::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(restored.to_container().to_bytes(), bytes);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = tiny_config(9);
        let recs = tiny_data(9);

        let mut full = Trainer::new(cfg.clone()).unwrap();
        full.run(&recs, &mut SilentObserver, None).unwrap();

        let mut first = Trainer::new(cfg).unwrap();
        first.run(&recs, &mut SilentObserver, Some(13)).unwrap();
        let container = first.to_container();
        let mut resumed = Trainer::from_container(&container).unwrap();
        resumed.run(&recs, &mut SilentObserver, None).unwrap();

        assert_eq!(
            full.to_container().to_bytes(),
            resumed.to_container().to_bytes()
        );
    }

    #[test]
    fn reruns_are_bitwise_identical() {
        let cfg = tiny_config(10);
        let recs = tiny_data(10);
        let a = train(cfg.clone(), &recs).unwrap();
        let b = train(cfg, &recs).unwrap();
        assert_eq!(a.encoder.hash(), b.encoder.hash());
        assert_eq!(a.decoder.hash(), b.decoder.hash());
        assert_eq!(a.codebook.hash(), b.codebook.hash());
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.losses.total, rb.losses.total);
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let cfg = tiny_config(11);
        assert!(matches!(
            train(cfg, &[]),
            Err(TrainError::EmptyDataset)
        ));
    }
}

