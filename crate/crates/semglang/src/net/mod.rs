//! Differentiable building blocks: the 1D-convolutional encoder/decoder pair,
//! parameter storage, the AdamW optimizer, and the checkpoint container.
//!
//! Parameters persist as f32 (that is what checkpoints store, and rounding at
//! every optimizer step keeps an interrupted-and-resumed run bit-identical to
//! an uninterrupted one); all arithmetic runs in f64 on the tape.

pub mod adamw;
pub mod checkpoint;
pub mod graph;

pub use adamw::{adamw_step, AdamHyper, AdamState};
pub use graph::{js_divergence_raw, Gradients, Graph, GraphError, Var};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::quantizer::LatentSequence;
use crate::seeds;
use crate::signal::Segment;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch in {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid net config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// A named, persistently stored parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub data: Vec<f32>,
    pub shape: Vec<usize>,
}

impl ParamTensor {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            data: vec![0.0; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    /// He-uniform fan-in initialization: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
    pub fn he_uniform(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..shape.iter().product())
            .map(|_| rng.gen_range(-bound..bound) as f32)
            .collect();
        Self {
            name: name.into(),
            data,
            shape: shape.to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn hash(&self) -> u64 {
        seeds::hash_f32(&self.data)
    }
}

/// Geometry of the encoder/decoder pair.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    /// Segment length t.
    pub seg_len: usize,
    /// Latent sequence length S; must divide `seg_len`.
    pub slices: usize,
    /// Latent dimension D.
    pub latent_dim: usize,
    /// Hidden conv width.
    pub hidden: usize,
}

pub const CONV_KERNEL: usize = 5;
pub const CONV_PAD: usize = 2;

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.in_channels == 0
            || self.seg_len == 0
            || self.slices == 0
            || self.latent_dim == 0
            || self.hidden == 0
        {
            return Err(NetError::BadConfig("all dimensions must be positive".into()));
        }
        if self.seg_len % self.slices != 0 {
            return Err(NetError::BadConfig(format!(
                "slices {} must divide segment length {}",
                self.slices, self.seg_len
            )));
        }
        Ok(())
    }

    /// Per-layer strides whose product downsamples seg_len to slices across
    /// the three conv layers. Prime factors are distributed to keep the
    /// strides balanced.
    pub fn strides(&self) -> Result<[usize; 3], NetError> {
        self.validate()?;
        let mut r = self.seg_len / self.slices;
        let mut primes = Vec::new();
        let mut p = 2;
        while p * p <= r {
            while r % p == 0 {
                primes.push(p);
                r /= p;
            }
            p += 1;
        }
        if r > 1 {
            primes.push(r);
        }
        primes.sort_unstable_by(|a, b| b.cmp(a));
        let mut buckets = [1usize; 3];
        for prime in primes {
            let idx = (0..3).min_by_key(|&i| buckets[i]).unwrap();
            buckets[idx] *= prime;
        }
        buckets.sort_unstable_by(|a, b| b.cmp(a));
        Ok(buckets)
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: ParamTensor,
    pub b: ParamTensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    fn init(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = ParamTensor::he_uniform(
            format!("{name}.w"),
            &[out_ch, in_ch, kernel],
            in_ch * kernel,
            rng,
        );
        let b = ParamTensor::zeros(format!("{name}.b"), &[out_ch]);
        Self { w, b, stride, pad }
    }

    fn apply(
        &self,
        g: &mut Graph,
        x: Var,
        stride: usize,
        dilation: usize,
        trainable: bool,
    ) -> (Var, Var, Var) {
        let w = if trainable {
            g.param(self.w.to_f64(), &self.w.shape)
        } else {
            g.leaf(self.w.to_f64(), &self.w.shape)
        };
        let b = if trainable {
            g.param(self.b.to_f64(), &self.b.shape)
        } else {
            g.leaf(self.b.to_f64(), &self.b.shape)
        };
        let out = g.conv1d(x, w, b, stride, self.pad * dilation, dilation);
        (out, w, b)
    }
}

/// One recorded forward pass: the output node plus the tape handles of every
/// model parameter, aligned with `params()` order.
pub struct ForwardPass {
    pub out: Var,
    pub param_vars: Vec<Var>,
}

/// Maps t×C segments to D×S latent sequences with a three-layer strided conv
/// stack (kernel 5, GELU) and a final 1×1 projection.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: NetConfig,
    pub convs: Vec<ConvLayer>,
    pub proj: ConvLayer,
}

impl Encoder {
    pub fn init(cfg: NetConfig, seed: u64) -> Result<Self, NetError> {
        let strides = cfg.strides()?;
        let mut rng = seeds::rng(seed, "encoder-init", 0);
        let mut convs = Vec::new();
        let mut in_ch = cfg.in_channels;
        for (i, &stride) in strides.iter().enumerate() {
            convs.push(ConvLayer::init(
                &format!("encoder.conv{i}"),
                in_ch,
                cfg.hidden,
                CONV_KERNEL,
                stride,
                CONV_PAD,
                &mut rng,
            ));
            in_ch = cfg.hidden;
        }
        let proj = ConvLayer::init(
            "encoder.proj",
            cfg.hidden,
            cfg.latent_dim,
            1,
            1,
            0,
            &mut rng,
        );
        Ok(Self { cfg, convs, proj })
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(&c.w);
            out.push(&c.b);
        }
        out.push(&self.proj.w);
        out.push(&self.proj.b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.w);
            out.push(&mut c.b);
        }
        out.push(&mut self.proj.w);
        out.push(&mut self.proj.b);
        out
    }

    pub fn hash(&self) -> u64 {
        let mut all = Vec::new();
        for p in self.params() {
            all.extend_from_slice(&p.data);
        }
        seeds::hash_f32(&all)
    }

    /// Forward at training geometry: [B, C, t] -> [B, D, S].
    pub fn forward(&self, g: &mut Graph, x: Var, trainable: bool) -> ForwardPass {
        self.forward_with_strides(g, x, trainable, false)
    }

    /// Dense evaluation of the same network: [B, C, t] -> [B, D, t]. Strides
    /// become dilations (the a-trous scheme), so the result restricted to the
    /// strided grid equals `forward` exactly; in between it provides the
    /// sub-slice features the tokenizer pools when a slice earns more than
    /// one token.
    pub fn forward_fine(&self, g: &mut Graph, x: Var, trainable: bool) -> ForwardPass {
        self.forward_with_strides(g, x, trainable, true)
    }

    fn forward_with_strides(
        &self,
        g: &mut Graph,
        x: Var,
        trainable: bool,
        dense: bool,
    ) -> ForwardPass {
        let mut param_vars = Vec::new();
        let mut h = x;
        let mut dilation = 1usize;
        for conv in &self.convs {
            let (stride, dil) = if dense { (1, dilation) } else { (conv.stride, 1) };
            let (out, w, b) = conv.apply(g, h, stride, dil, trainable);
            h = g.gelu(out);
            param_vars.push(w);
            param_vars.push(b);
            if dense {
                dilation *= conv.stride;
            }
        }
        let (out, w, b) = self.proj.apply(g, h, 1, 1, trainable);
        param_vars.push(w);
        param_vars.push(b);
        ForwardPass { out, param_vars }
    }

    fn check_segment(&self, segment: &Segment) -> Result<(), NetError> {
        if segment.len != self.cfg.seg_len || segment.channels != self.cfg.in_channels {
            return Err(NetError::ShapeMismatch {
                what: "segment".into(),
                expected: vec![self.cfg.seg_len, self.cfg.in_channels],
                got: vec![segment.len, segment.channels],
            });
        }
        if segment.slices != self.cfg.slices {
            return Err(NetError::ShapeMismatch {
                what: "segment slices".into(),
                expected: vec![self.cfg.slices],
                got: vec![segment.slices],
            });
        }
        Ok(())
    }
}

/// Row-major [t][C] sample matrix to a [1, C, t] graph leaf.
pub fn segment_leaf(g: &mut Graph, segment: &Segment) -> Var {
    batch_leaf(g, std::slice::from_ref(segment))
}

/// Stack segments into one [B, C, t] constant leaf.
pub fn batch_leaf(g: &mut Graph, batch: &[Segment]) -> Var {
    let b = batch.len();
    let c = batch[0].channels;
    let t = batch[0].len;
    let mut data = vec![0.0; b * c * t];
    for (bi, seg) in batch.iter().enumerate() {
        for ch in 0..c {
            for ti in 0..t {
                data[bi * c * t + ch * t + ti] = seg.value(ti, ch);
            }
        }
    }
    g.leaf(data, &[b, c, t])
}

/// Encode one segment into its latent sequence.
pub fn encode(encoder: &Encoder, segment: &Segment) -> Result<LatentSequence, NetError> {
    encoder.check_segment(segment)?;
    let mut g = Graph::new();
    let x = batch_leaf(&mut g, std::slice::from_ref(segment));
    let pass = encoder.forward(&mut g, x, false);
    let d = encoder.cfg.latent_dim;
    let s = encoder.cfg.slices;
    // [1, D, S] -> rows s = z_{e,s}
    let map = g.data(pass.out);
    let mut rows = vec![0.0; s * d];
    for di in 0..d {
        for si in 0..s {
            rows[si * d + di] = map[di * s + si];
        }
    }
    Ok(LatentSequence {
        dim: d,
        len: s,
        data: rows,
        source: segment.origin(),
    })
}

/// Mirror of the encoder: upsample-then-conv stages bring D×S back to t×C.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: NetConfig,
    pub proj: ConvLayer,
    pub stages: Vec<(usize, ConvLayer)>,
    pub out: ConvLayer,
    pub init_seed: u64,
}

impl Decoder {
    pub fn init(cfg: NetConfig, seed: u64) -> Result<Self, NetError> {
        let strides = cfg.strides()?;
        let mut rng = seeds::rng(seed, "decoder-init", 0);
        let proj = ConvLayer::init("decoder.proj", cfg.latent_dim, cfg.hidden, 1, 1, 0, &mut rng);
        let mut stages = Vec::new();
        for (i, &stride) in strides.iter().rev().enumerate() {
            stages.push((
                stride,
                ConvLayer::init(
                    &format!("decoder.conv{i}"),
                    cfg.hidden,
                    cfg.hidden,
                    CONV_KERNEL,
                    1,
                    CONV_PAD,
                    &mut rng,
                ),
            ));
        }
        let out = ConvLayer::init(
            "decoder.out",
            cfg.hidden,
            cfg.in_channels,
            CONV_KERNEL,
            1,
            CONV_PAD,
            &mut rng,
        );
        Ok(Self {
            cfg,
            proj,
            stages,
            out,
            init_seed: seed,
        })
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        let mut out = vec![&self.proj.w, &self.proj.b];
        for (_, c) in &self.stages {
            out.push(&c.w);
            out.push(&c.b);
        }
        out.push(&self.out.w);
        out.push(&self.out.b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out = vec![&mut self.proj.w, &mut self.proj.b];
        for (_, c) in &mut self.stages {
            out.push(&mut c.w);
            out.push(&mut c.b);
        }
        out.push(&mut self.out.w);
        out.push(&mut self.out.b);
        out
    }

    pub fn hash(&self) -> u64 {
        let mut all = Vec::new();
        for p in self.params() {
            all.extend_from_slice(&p.data);
        }
        seeds::hash_f32(&all)
    }

    /// [B, D, S] -> [B, C, t].
    pub fn forward(&self, g: &mut Graph, z: Var, trainable: bool) -> ForwardPass {
        let mut param_vars = Vec::new();
        let (mut h, w, b) = self.proj.apply(g, z, 1, 1, trainable);
        h = g.gelu(h);
        param_vars.push(w);
        param_vars.push(b);
        for (factor, conv) in &self.stages {
            if *factor > 1 {
                h = g.upsample_nearest(h, *factor);
            }
            let (out, w, b) = conv.apply(g, h, 1, 1, trainable);
            h = g.gelu(out);
            param_vars.push(w);
            param_vars.push(b);
        }
        let (out, w, b) = self.out.apply(g, h, 1, 1, trainable);
        param_vars.push(w);
        param_vars.push(b);
        ForwardPass { out, param_vars }
    }
}

/// Decode a quantized latent (rows of length D, S of them) into a t×C
/// row-major sample matrix.
pub fn decode(decoder: &Decoder, z_rows: &[f64]) -> Result<Vec<f64>, NetError> {
    let d = decoder.cfg.latent_dim;
    let s = decoder.cfg.slices;
    if z_rows.len() != d * s {
        return Err(NetError::ShapeMismatch {
            what: "quantized latent".into(),
            expected: vec![d, s],
            got: vec![z_rows.len()],
        });
    }
    let mut g = Graph::new();
    // rows [S][D] -> [1, D, S]
    let mut data = vec![0.0; d * s];
    for si in 0..s {
        for di in 0..d {
            data[di * s + si] = z_rows[si * d + di];
        }
    }
    let z = g.leaf(data, &[1, d, s]);
    let pass = decoder.forward(&mut g, z, false);
    let map = g.data(pass.out);
    let t = decoder.cfg.seg_len;
    let c = decoder.cfg.in_channels;
    let mut rows = vec![0.0; t * c];
    for ch in 0..c {
        for ti in 0..t {
            rows[ti * c + ch] = map[ch * t + ti];
        }
    }
    Ok(rows)
}

/// Gradients of a scalar loss for an explicit parameter list; parameters the
/// loss never touched come back as zeros.
pub fn grad(graph: &Graph, loss: Var, params: &[Var]) -> Result<Vec<Vec<f64>>, NetError> {
    let grads = graph.backward(loss)?;
    Ok(params
        .iter()
        .map(|&p| grads.wrt(p, graph.data(p).len()))
        .collect())
}
