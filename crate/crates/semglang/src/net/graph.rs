//! Tape-based reverse-mode differentiation over dense f64 tensors.
//!
//! A [`Graph`] records every operation as it executes; [`Graph::backward`]
//! walks the tape in reverse and accumulates vector-Jacobian products. The op
//! set is exactly what the encoder/decoder/quantizer/loss stack needs — this
//! is not a general autodiff library and does not try to be one.
//!
//! Values are computed in f64 even though persistent parameters are stored as
//! f32: widening is exact, and the extra headroom keeps finite-difference
//! gradient checks far away from roundoff noise.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("loss must be a finite scalar, got value {0}")]
    NonFiniteLoss(f64),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { trainable: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    AddScalar(Var, #[allow(dead_code)] f64),
    MulScalar(Var, f64),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    /// [m, n] -> [m]
    SumLastDim(Var),
    /// [m, n] -> [n]
    MeanAxis0(Var),
    /// [m, k] x [k, n] -> [m, n]
    Matmul(Var, Var),
    /// [m, k] x [n, k] -> [m, n] (second operand used transposed)
    MatmulBt(Var, Var),
    /// rows of [k, d] selected by index -> [ids.len(), d]
    Gather(Var, Vec<usize>),
    StopGrad(#[allow(dead_code)] Var),
    Reshape(Var),
    /// [a, b, c] -> [a, c, b]
    SwapAxes12(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        dilation: usize,
    },
    /// [b, c, l] -> [b, c, l * factor]
    UpsampleNearest(Var, usize),
    /// [c, l] -> [c, out]; bins follow the adaptive-pooling convention
    AdaptiveAvgPool(Var, usize),
    /// z [n, d], e [k, d] -> squared Euclidean distances [n, k]
    PairwiseSqDist(Var, Var),
    /// row-wise softmax over [m, n]
    SoftmaxRows(Var),
    /// Jensen-Shannon divergence of a probability vector against a fixed
    /// reference, natural log
    JsDiv(Var, Vec<f64>),
    /// mean smooth-L1 between two same-shape tensors -> scalar
    SmoothL1(Var, Var),
    /// logits [n] with a target index -> scalar cross-entropy
    CrossEntropy(Var, usize),
    /// [m, p] ++ [m, q] -> [m, p + q]
    ConcatCols(Var, Var),
    /// [m, n] + [n] -> [m, n]
    AddRowBroadcast(Var, Var),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Gradients produced by one backward pass, indexed by tape position.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if `v` never
    /// influenced the loss.
    pub fn wrt(&self, v: Var, len: usize) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; len],
        }
    }

    pub fn has(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node { op, shape, data });
        Var(self.nodes.len() - 1)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a scalar node.
    pub fn value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf: no gradient is accumulated for it.
    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize]) -> Var {
        assert_eq!(numel(shape), data.len(), "leaf shape/data mismatch");
        self.push(Op::Leaf { trainable: false }, shape.to_vec(), data)
    }

    /// Trainable leaf: gradients are accumulated during backward.
    pub fn param(&mut self, data: Vec<f64>, shape: &[usize]) -> Var {
        assert_eq!(numel(shape), data.len(), "param shape/data mismatch");
        self.push(Op::Leaf { trainable: true }, shape.to_vec(), data)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(vec![v], &[1])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "{what}: shape mismatch"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let data = self.zip(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), self.nodes[a.0].shape.clone(), data)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let data = self.zip(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), self.nodes[a.0].shape.clone(), data)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let data = self.zip(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), self.nodes[a.0].shape.clone(), data)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        let data = self.zip(a, b, |x, y| x / y);
        self.push(Op::Div(a, b), self.nodes[a.0].shape.clone(), data)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.nodes[a.0].data.iter().map(|&x| f(x)).collect()
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data = self.map(a, |x| -x);
        self.push(Op::Neg(a), self.nodes[a.0].shape.clone(), data)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.map(a, |x| x + c);
        self.push(Op::AddScalar(a, c), self.nodes[a.0].shape.clone(), data)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.map(a, |x| x * c);
        self.push(Op::MulScalar(a, c), self.nodes[a.0].shape.clone(), data)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.map(a, f64::exp);
        self.push(Op::Exp(a), self.nodes[a.0].shape.clone(), data)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let data = self.map(a, f64::ln);
        self.push(Op::Ln(a), self.nodes[a.0].shape.clone(), data)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let data = self.map(a, f64::sqrt);
        self.push(Op::Sqrt(a), self.nodes[a.0].shape.clone(), data)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.map(a, gelu);
        self.push(Op::Gelu(a), self.nodes[a.0].shape.clone(), data)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.push(Op::Sum(a), vec![1], vec![s])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.push(Op::Mean(a), vec![1], vec![s / n])
    }

    pub fn sum_last_dim(&mut self, a: Var) -> Var {
        let shape = &self.nodes[a.0].shape;
        assert_eq!(shape.len(), 2, "sum_last_dim expects a 2-d tensor");
        let (m, n) = (shape[0], shape[1]);
        let mut out = vec![0.0; m];
        for i in 0..m {
            out[i] = self.nodes[a.0].data[i * n..(i + 1) * n].iter().sum();
        }
        self.push(Op::SumLastDim(a), vec![m], out)
    }

    pub fn mean_axis0(&mut self, a: Var) -> Var {
        let shape = &self.nodes[a.0].shape;
        assert_eq!(shape.len(), 2, "mean_axis0 expects a 2-d tensor");
        let (m, n) = (shape[0], shape[1]);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += self.nodes[a.0].data[i * n + j];
            }
        }
        for v in &mut out {
            *v /= m as f64;
        }
        self.push(Op::MeanAxis0(a), vec![n], out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul shapes");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += av * db[p * n + j];
                }
            }
        }
        self.push(Op::Matmul(a, b), vec![m, n], out)
    }

    /// `a @ b.T` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1], "matmul_bt shapes");
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += da[i * k + p] * db[j * k + p];
                }
                out[i * n + j] = acc;
            }
        }
        self.push(Op::MatmulBt(a, b), vec![m, n], out)
    }

    pub fn gather(&mut self, src: Var, ids: &[usize]) -> Var {
        let shape = &self.nodes[src.0].shape;
        assert_eq!(shape.len(), 2, "gather expects a 2-d source");
        let (k, d) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < k, "gather index {id} out of range {k}");
            out.extend_from_slice(&self.nodes[src.0].data[id * d..(id + 1) * d]);
        }
        self.push(Op::Gather(src, ids.to_vec()), vec![ids.len(), d], out)
    }

    pub fn stop_grad(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.clone();
        self.push(Op::StopGrad(a), self.nodes[a.0].shape.clone(), data)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        assert_eq!(numel(shape), self.nodes[a.0].data.len(), "reshape numel");
        let data = self.nodes[a.0].data.clone();
        self.push(Op::Reshape(a), shape.to_vec(), data)
    }

    pub fn swap_axes12(&mut self, a: Var) -> Var {
        let shape = &self.nodes[a.0].shape;
        assert_eq!(shape.len(), 3, "swap_axes12 expects a 3-d tensor");
        let (b, c, l) = (shape[0], shape[1], shape[2]);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; src.len()];
        for i in 0..b {
            for j in 0..c {
                for t in 0..l {
                    out[i * l * c + t * c + j] = src[i * c * l + j * l + t];
                }
            }
        }
        self.push(Op::SwapAxes12(a), vec![b, l, c], out)
    }

    /// 1-D convolution: x [B, Cin, L], w [Cout, Cin, k], b [Cout], zero
    /// padding `pad` on both sides, tap spacing `dilation`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Var {
        let sx = self.nodes[x.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        assert_eq!(sx.len(), 3, "conv1d input must be [B, C, L]");
        assert_eq!(sw.len(), 3, "conv1d weight must be [Cout, Cin, k]");
        assert_eq!(sx[1], sw[1], "conv1d channel mismatch");
        assert_eq!(self.nodes[b.0].shape, vec![sw[0]], "conv1d bias shape");
        assert!(dilation >= 1);
        let (batch, cin, l) = (sx[0], sx[1], sx[2]);
        let (cout, _, k) = (sw[0], sw[1], sw[2]);
        let span = (k - 1) * dilation + 1;
        assert!(l + 2 * pad >= span, "conv1d kernel longer than padded input");
        let lout = (l + 2 * pad - span) / stride + 1;

        let dx = &self.nodes[x.0].data;
        let dw = &self.nodes[w.0].data;
        let dbias = &self.nodes[b.0].data;
        let mut out = vec![0.0; batch * cout * lout];
        for bi in 0..batch {
            for co in 0..cout {
                for o in 0..lout {
                    let mut acc = dbias[co];
                    let base = o * stride;
                    for ci in 0..cin {
                        let xoff = bi * cin * l + ci * l;
                        let woff = co * cin * k + ci * k;
                        for u in 0..k {
                            let pos = base + u * dilation;
                            if pos < pad || pos - pad >= l {
                                continue;
                            }
                            acc += dw[woff + u] * dx[xoff + pos - pad];
                        }
                    }
                    out[bi * cout * lout + co * lout + o] = acc;
                }
            }
        }
        self.push(
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
                dilation,
            },
            vec![batch, cout, lout],
            out,
        )
    }

    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Var {
        assert!(factor >= 1);
        let shape = &self.nodes[a.0].shape;
        assert_eq!(shape.len(), 3, "upsample expects [B, C, L]");
        let (b, c, l) = (shape[0], shape[1], shape[2]);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; b * c * l * factor];
        for i in 0..b * c {
            for t in 0..l {
                let v = src[i * l + t];
                for r in 0..factor {
                    out[i * l * factor + t * factor + r] = v;
                }
            }
        }
        self.push(Op::UpsampleNearest(a, factor), vec![b, c, l * factor], out)
    }

    /// Adaptive average pooling of [C, L] to [C, out]; output bin `i` averages
    /// input positions [floor(i*L/out), ceil((i+1)*L/out)).
    pub fn adaptive_avg_pool(&mut self, a: Var, out_len: usize) -> Var {
        assert!(out_len >= 1);
        let shape = &self.nodes[a.0].shape;
        assert_eq!(shape.len(), 2, "adaptive_avg_pool expects [C, L]");
        let (c, l) = (shape[0], shape[1]);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; c * out_len];
        for ch in 0..c {
            for i in 0..out_len {
                let (lo, hi) = pool_bin(i, l, out_len);
                let mut acc = 0.0;
                for t in lo..hi {
                    acc += src[ch * l + t];
                }
                out[ch * out_len + i] = acc / (hi - lo) as f64;
            }
        }
        self.push(Op::AdaptiveAvgPool(a, out_len), vec![c, out_len], out)
    }

    pub fn pairwise_sq_dist(&mut self, z: Var, e: Var) -> Var {
        let (sz, se) = (&self.nodes[z.0].shape, &self.nodes[e.0].shape);
        assert!(sz.len() == 2 && se.len() == 2 && sz[1] == se[1], "pairwise shapes");
        let (n, d, k) = (sz[0], sz[1], se[0]);
        let (dz, de) = (&self.nodes[z.0].data, &self.nodes[e.0].data);
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            for j in 0..k {
                let mut acc = 0.0;
                for p in 0..d {
                    let diff = dz[i * d + p] - de[j * d + p];
                    acc += diff * diff;
                }
                out[i * k + j] = acc;
            }
        }
        self.push(Op::PairwiseSqDist(z, e), vec![n, k], out)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let shape = &self.nodes[a.0].shape;
        assert_eq!(shape.len(), 2, "softmax_rows expects [m, n]");
        let (m, n) = (shape[0], shape[1]);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            for j in 0..n {
                out[i * n + j] /= z;
            }
        }
        self.push(Op::SoftmaxRows(a), vec![m, n], out)
    }

    /// JS(p || q) with a fixed reference q. Zero entries contribute zero on
    /// their own side, matching the p·ln p -> 0 limit.
    pub fn js_div(&mut self, p: Var, q: Vec<f64>) -> Var {
        let dp = &self.nodes[p.0].data;
        assert_eq!(dp.len(), q.len(), "js_div length mismatch");
        let val = js_divergence_raw(dp, &q);
        self.push(Op::JsDiv(p, q), vec![1], vec![val])
    }

    pub fn smooth_l1(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "smooth_l1");
        let n = self.nodes[a.0].data.len() as f64;
        let mut acc = 0.0;
        for (x, y) in self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data) {
            let d = x - y;
            acc += if d.abs() < 1.0 {
                0.5 * d * d
            } else {
                d.abs() - 0.5
            };
        }
        self.push(Op::SmoothL1(a, b), vec![1], vec![acc / n])
    }

    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let shape = &self.nodes[logits.0].shape;
        let n = numel(shape);
        assert!(target < n, "cross_entropy target out of range");
        let row = &self.nodes[logits.0].data;
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
        let val = lse - row[target];
        self.push(Op::CrossEntropy(logits, target), vec![1], vec![val])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        assert!(sa.len() == 2 && sb.len() == 2 && sa[0] == sb[0], "concat_cols shapes");
        let (m, p, q) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(&self.nodes[a.0].data[i * p..(i + 1) * p]);
            out.extend_from_slice(&self.nodes[b.0].data[i * q..(i + 1) * q]);
        }
        self.push(Op::ConcatCols(a, b), vec![m, p + q], out)
    }

    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Var {
        let (sa, sr) = (&self.nodes[a.0].shape, &self.nodes[row.0].shape);
        assert!(sa.len() == 2 && sr == &vec![sa[1]], "add_row_broadcast shapes");
        let (m, n) = (sa[0], sa[1]);
        let mut out = self.nodes[a.0].data.clone();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += self.nodes[row.0].data[j];
            }
        }
        self.push(Op::AddRowBroadcast(a, row), vec![m, n], out)
    }

    /// Reverse pass from a scalar loss. Returns one gradient buffer per tape
    /// node that influenced the loss; parameters that never entered the loss
    /// read back as zeros through [`Gradients::wrt`].
    pub fn backward(&self, loss: Var) -> Result<Gradients, GraphError> {
        let ln = &self.nodes[loss.0];
        if ln.data.len() != 1 {
            return Err(GraphError::NonScalarLoss(ln.shape.clone()));
        }
        if !ln.data[0].is_finite() {
            return Err(GraphError::NonFiniteLoss(ln.data[0]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            match &node.op {
                // Trainable leaves keep their gradient; constants drop it.
                Op::Leaf { trainable } => {
                    if *trainable {
                        grads[id] = Some(g);
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, &g);
                    self.accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accumulate(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    let db: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(gv, av)| gv * av)
                        .collect();
                    self.accumulate(&mut grads, *a, &da);
                    self.accumulate(&mut grads, *b, &db);
                }
                Op::Div(a, b) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(gv, bv)| gv / bv)
                        .collect();
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data))
                        .map(|(gv, (av, bv))| -gv * av / (bv * bv))
                        .collect();
                    self.accumulate(&mut grads, *a, &da);
                    self.accumulate(&mut grads, *b, &db);
                }
                Op::Neg(a) => {
                    let da: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::AddScalar(a, _) => self.accumulate(&mut grads, *a, &g),
                Op::MulScalar(a, c) => {
                    let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::Exp(a) => {
                    let da: Vec<f64> =
                        g.iter().zip(&node.data).map(|(gv, ov)| gv * ov).collect();
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::Ln(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(gv, xv)| gv / xv)
                        .collect();
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::Sqrt(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&node.data)
                        .map(|(gv, ov)| gv * 0.5 / ov)
                        .collect();
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::Gelu(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(gv, xv)| gv * gelu_grad(*xv))
                        .collect();
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::Sum(a) => {
                    let da = vec![g[0]; self.nodes[a.0].data.len()];
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].data.len() as f64;
                    let da = vec![g[0] / n; self.nodes[a.0].data.len()];
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::SumLastDim(a) => {
                    let (m, n) = two_dims(&self.nodes[a.0].shape);
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[i];
                        }
                    }
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::MeanAxis0(a) => {
                    let (m, n) = two_dims(&self.nodes[a.0].shape);
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[j] / m as f64;
                        }
                    }
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::Matmul(a, b) => {
                    let (m, k) = two_dims(&self.nodes[a.0].shape);
                    let n = self.nodes[b.0].shape[1];
                    let (da0, db0) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                    // dA = g @ B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * db0[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    // dB = A^T @ g
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for i in 0..m {
                            let av = da0[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    self.accumulate(&mut grads, *a, &da);
                    self.accumulate(&mut grads, *b, &db);
                }
                Op::MatmulBt(a, b) => {
                    let (m, k) = two_dims(&self.nodes[a.0].shape);
                    let n = self.nodes[b.0].shape[0];
                    let (da0, db0) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                    // out = A @ B^T; dA = g @ B, dB = g^T @ A
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gv * db0[j * k + p];
                            }
                        }
                    }
                    let mut db = vec![0.0; n * k];
                    for j in 0..n {
                        for i in 0..m {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                db[j * k + p] += gv * da0[i * k + p];
                            }
                        }
                    }
                    self.accumulate(&mut grads, *a, &da);
                    self.accumulate(&mut grads, *b, &db);
                }
                Op::Gather(src, ids) => {
                    let (k, d) = two_dims(&self.nodes[src.0].shape);
                    let mut dsrc = vec![0.0; k * d];
                    for (row, &id) in ids.iter().enumerate() {
                        for p in 0..d {
                            dsrc[id * d + p] += g[row * d + p];
                        }
                    }
                    self.accumulate(&mut grads, *src, &dsrc);
                }
                Op::StopGrad(_) => {}
                Op::Reshape(a) => self.accumulate(&mut grads, *a, &g),
                Op::SwapAxes12(a) => {
                    let s = &self.nodes[a.0].shape;
                    let (b, c, l) = (s[0], s[1], s[2]);
                    let mut da = vec![0.0; b * c * l];
                    for i in 0..b {
                        for j in 0..c {
                            for t in 0..l {
                                da[i * c * l + j * l + t] = g[i * l * c + t * c + j];
                            }
                        }
                    }
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::Conv1d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    dilation,
                } => {
                    let sx = &self.nodes[x.0].shape;
                    let sw = &self.nodes[w.0].shape;
                    let (batch, cin, l) = (sx[0], sx[1], sx[2]);
                    let (cout, _, k) = (sw[0], sw[1], sw[2]);
                    let span = (k - 1) * dilation + 1;
                    let lout = (l + 2 * pad - span) / stride + 1;
                    let dxsrc = &self.nodes[x.0].data;
                    let dwsrc = &self.nodes[w.0].data;
                    let mut dx = vec![0.0; batch * cin * l];
                    let mut dw = vec![0.0; cout * cin * k];
                    let mut db = vec![0.0; cout];
                    for bi in 0..batch {
                        for co in 0..cout {
                            for o in 0..lout {
                                let gv = g[bi * cout * lout + co * lout + o];
                                if gv == 0.0 {
                                    continue;
                                }
                                db[co] += gv;
                                let base = o * stride;
                                for ci in 0..cin {
                                    let xoff = bi * cin * l + ci * l;
                                    let woff = co * cin * k + ci * k;
                                    for u in 0..k {
                                        let pos = base + u * dilation;
                                        if pos < *pad || pos - pad >= l {
                                            continue;
                                        }
                                        dw[woff + u] += gv * dxsrc[xoff + pos - pad];
                                        dx[xoff + pos - pad] += gv * dwsrc[woff + u];
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, &dx);
                    self.accumulate(&mut grads, *w, &dw);
                    self.accumulate(&mut grads, *b, &db);
                }
                Op::UpsampleNearest(a, factor) => {
                    let s = &self.nodes[a.0].shape;
                    let (b, c, l) = (s[0], s[1], s[2]);
                    let mut da = vec![0.0; b * c * l];
                    for i in 0..b * c {
                        for t in 0..l {
                            let mut acc = 0.0;
                            for r in 0..*factor {
                                acc += g[i * l * factor + t * factor + r];
                            }
                            da[i * l + t] = acc;
                        }
                    }
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::AdaptiveAvgPool(a, out_len) => {
                    let (c, l) = two_dims(&self.nodes[a.0].shape);
                    let mut da = vec![0.0; c * l];
                    for ch in 0..c {
                        for i in 0..*out_len {
                            let (lo, hi) = pool_bin(i, l, *out_len);
                            let share = g[ch * out_len + i] / (hi - lo) as f64;
                            for t in lo..hi {
                                da[ch * l + t] += share;
                            }
                        }
                    }
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::PairwiseSqDist(z, e) => {
                    let (n, d) = two_dims(&self.nodes[z.0].shape);
                    let k = self.nodes[e.0].shape[0];
                    let (dz0, de0) = (&self.nodes[z.0].data, &self.nodes[e.0].data);
                    let mut dz = vec![0.0; n * d];
                    let mut de = vec![0.0; k * d];
                    for i in 0..n {
                        for j in 0..k {
                            let gv = g[i * k + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..d {
                                let diff = dz0[i * d + p] - de0[j * d + p];
                                dz[i * d + p] += 2.0 * gv * diff;
                                de[j * d + p] -= 2.0 * gv * diff;
                            }
                        }
                    }
                    self.accumulate(&mut grads, *z, &dz);
                    self.accumulate(&mut grads, *e, &de);
                }
                Op::SoftmaxRows(a) => {
                    let (m, n) = two_dims(&node.shape);
                    let y = &node.data;
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += g[i * n + j] * y[i * n + j];
                        }
                        for j in 0..n {
                            da[i * n + j] = y[i * n + j] * (g[i * n + j] - dot);
                        }
                    }
                    self.accumulate(&mut grads, *a, &da);
                }
                Op::JsDiv(p, q) => {
                    let dp = &self.nodes[p.0].data;
                    let mut da = vec![0.0; dp.len()];
                    for i in 0..dp.len() {
                        let m = 0.5 * (dp[i] + q[i]);
                        if dp[i] > 0.0 && m > 0.0 {
                            da[i] = g[0] * 0.5 * (dp[i] / m).ln();
                        }
                    }
                    self.accumulate(&mut grads, *p, &da);
                }
                Op::SmoothL1(a, b) => {
                    let n = self.nodes[a.0].data.len() as f64;
                    let mut da = vec![0.0; self.nodes[a.0].data.len()];
                    for (i, (x, y)) in self.nodes[a.0]
                        .data
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .enumerate()
                    {
                        let d = x - y;
                        let slope = if d.abs() < 1.0 { d } else { d.signum() };
                        da[i] = g[0] * slope / n;
                    }
                    let db: Vec<f64> = da.iter().map(|v| -v).collect();
                    self.accumulate(&mut grads, *a, &da);
                    self.accumulate(&mut grads, *b, &db);
                }
                Op::CrossEntropy(logits, target) => {
                    let row = &self.nodes[logits.0].data;
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
                    let mut da = vec![0.0; row.len()];
                    for j in 0..row.len() {
                        let p = (row[j] - mx).exp() / z;
                        da[j] = g[0] * (p - if j == *target { 1.0 } else { 0.0 });
                    }
                    self.accumulate(&mut grads, *logits, &da);
                }
                Op::ConcatCols(a, b) => {
                    let (m, p) = two_dims(&self.nodes[a.0].shape);
                    let q = self.nodes[b.0].shape[1];
                    let mut da = vec![0.0; m * p];
                    let mut db = vec![0.0; m * q];
                    for i in 0..m {
                        da[i * p..(i + 1) * p]
                            .copy_from_slice(&g[i * (p + q)..i * (p + q) + p]);
                        db[i * q..(i + 1) * q]
                            .copy_from_slice(&g[i * (p + q) + p..(i + 1) * (p + q)]);
                    }
                    self.accumulate(&mut grads, *a, &da);
                    self.accumulate(&mut grads, *b, &db);
                }
                Op::AddRowBroadcast(a, row) => {
                    let (m, n) = two_dims(&node.shape);
                    self.accumulate(&mut grads, *a, &g);
                    let mut drow = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            drow[j] += g[i * n + j];
                        }
                    }
                    self.accumulate(&mut grads, *row, &drow);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            None => grads[v.0] = Some(delta.to_vec()),
        }
    }
}

fn two_dims(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1])
}

/// Input range [lo, hi) averaged by adaptive-pooling output bin `i`.
pub fn pool_bin(i: usize, len: usize, out: usize) -> (usize, usize) {
    let lo = i * len / out;
    let hi = ((i + 1) * len + out - 1) / out;
    (lo, hi.max(lo + 1).min(len))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// JS divergence between two non-negative vectors, natural log. Not
/// normalized internally; zero entries contribute zero on their side.
pub fn js_divergence_raw(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let m = 0.5 * (pi + qi);
        if pi > 0.0 && m > 0.0 {
            acc += 0.5 * pi * (pi / m).ln();
        }
        if qi > 0.0 && m > 0.0 {
            acc += 0.5 * qi * (qi / m).ln();
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Central finite differences of `f` with respect to the values in
    /// `inputs`, re-running the closure on perturbed copies.
    pub fn finite_diff(
        f: &dyn Fn(&[f64]) -> f64,
        inputs: &[f64],
        eps: f64,
    ) -> Vec<f64> {
        let mut out = vec![0.0; inputs.len()];
        let mut work = inputs.to_vec();
        for i in 0..inputs.len() {
            work[i] = inputs[i] + eps;
            let up = f(&work);
            work[i] = inputs[i] - eps;
            let down = f(&work);
            work[i] = inputs[i];
            out[i] = (up - down) / (2.0 * eps);
        }
        out
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let p = g.param(vec![1.0, 2.0], &[2]);
        let sq = g.mul(p, p);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(p, 2), vec![2.0, 4.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut g = Graph::new();
        let p = g.param(vec![1.0, 2.0], &[2]);
        let c = g.leaf(vec![5.0], &[1]);
        let loss = g.mul_scalar(c, 1.0);
        let grads = g.backward(loss).unwrap();
        assert!(!grads.has(p));
        assert_eq!(grads.wrt(p, 2), vec![0.0, 0.0]);
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut g = Graph::new();
        let p = g.param(vec![3.0], &[1]);
        let blocked = g.stop_grad(p);
        let loss = g.mul(blocked, blocked);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(p, 1), vec![0.0]);
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let mut g = Graph::new();
        let p = g.param(vec![-1.0], &[1]);
        let loss = g.ln(p); // ln(-1) = NaN
        assert!(matches!(g.backward(loss), Err(GraphError::NonFiniteLoss(_))));
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        let mut rng = crate::seeds::rng(11, "graph-fd", 0);
        for trial in 0..5 {
            let n = 6;
            let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.5)).collect();
            let f = |vals: &[f64]| -> f64 {
                let mut g = Graph::new();
                let x = g.param(vals.to_vec(), &[2, 3]);
                let e = g.exp(x);
                let s = g.sqrt(e);
                let l = g.ln(s);
                let gl = g.gelu(l);
                let m = g.mul(gl, x);
                let sm = g.softmax_rows(m);
                let r = g.sum_last_dim(sm);
                let q = g.mul(r, r);
                let loss = g.mean(q);
                g.value(loss)
            };
            let mut g = Graph::new();
            let x = g.param(x0.clone(), &[2, 3]);
            let e = g.exp(x);
            let s = g.sqrt(e);
            let l = g.ln(s);
            let gl = g.gelu(l);
            let m = g.mul(gl, x);
            let sm = g.softmax_rows(m);
            let r = g.sum_last_dim(sm);
            let q = g.mul(r, r);
            let loss = g.mean(q);
            let grads = g.backward(loss).unwrap();
            let numeric = finite_diff(&f, &x0, 1e-5);
            let err = max_rel_err(&grads.wrt(x, n), &numeric);
            assert!(err < 1e-4, "trial {trial}: rel err {err}");
        }
    }

    #[test]
    fn conv_and_pool_match_finite_differences() {
        let mut rng = crate::seeds::rng(12, "graph-fd", 1);
        let xs: Vec<f64> = (0..2 * 2 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ws: Vec<f64> = (0..3 * 2 * 5).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let bs: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.1..0.1)).collect();

        let run = |xv: &[f64], wv: &[f64], bv: &[f64]| -> f64 {
            let mut g = Graph::new();
            let x = g.param(xv.to_vec(), &[2, 2, 8]);
            let w = g.param(wv.to_vec(), &[3, 2, 5]);
            let b = g.param(bv.to_vec(), &[3]);
            let y = g.conv1d(x, w, b, 2, 2, 1);
            let up = g.upsample_nearest(y, 2);
            let flat = g.reshape(up, &[6, 8]);
            let pooled = g.adaptive_avg_pool(flat, 5);
            let act = g.gelu(pooled);
            let loss = g.mean(act);
            g.value(loss)
        };

        let mut g = Graph::new();
        let x = g.param(xs.clone(), &[2, 2, 8]);
        let w = g.param(ws.clone(), &[3, 2, 5]);
        let b = g.param(bs.clone(), &[3]);
        let y = g.conv1d(x, w, b, 2, 2, 1);
        let up = g.upsample_nearest(y, 2);
        let flat = g.reshape(up, &[6, 8]);
        let pooled = g.adaptive_avg_pool(flat, 5);
        let act = g.gelu(pooled);
        let loss = g.mean(act);
        let grads = g.backward(loss).unwrap();

        let fx = finite_diff(&|v: &[f64]| run(v, &ws, &bs), &xs, 1e-5);
        let fw = finite_diff(&|v: &[f64]| run(&xs, v, &bs), &ws, 1e-5);
        let fb = finite_diff(&|v: &[f64]| run(&xs, &ws, v), &bs, 1e-5);
        assert!(max_rel_err(&grads.wrt(x, xs.len()), &fx) < 1e-6);
        assert!(max_rel_err(&grads.wrt(w, ws.len()), &fw) < 1e-6);
        assert!(max_rel_err(&grads.wrt(b, bs.len()), &fb) < 1e-6);
    }

    #[test]
    fn matmul_attention_path_matches_finite_differences() {
        let mut rng = crate::seeds::rng(13, "graph-fd", 2);
        let xv: Vec<f64> = (0..4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wv: Vec<f64> = (0..3 * 3).map(|_| rng.gen_range(-0.5..0.5)).collect();

        let run = |x0: &[f64], w0: &[f64]| -> f64 {
            let mut g = Graph::new();
            let x = g.param(x0.to_vec(), &[4, 3]);
            let w = g.param(w0.to_vec(), &[3, 3]);
            let q = g.matmul(x, w);
            let scores = g.matmul_bt(q, x);
            let attn = g.softmax_rows(scores);
            let o = g.matmul(attn, x);
            let pooled = g.mean_axis0(o);
            let r = g.reshape(pooled, &[1, 3]);
            let ce = g.cross_entropy(r, 1);
            g.value(ce)
        };

        let mut g = Graph::new();
        let x = g.param(xv.clone(), &[4, 3]);
        let w = g.param(wv.clone(), &[3, 3]);
        let q = g.matmul(x, w);
        let scores = g.matmul_bt(q, x);
        let attn = g.softmax_rows(scores);
        let o = g.matmul(attn, x);
        let pooled = g.mean_axis0(o);
        let r = g.reshape(pooled, &[1, 3]);
        let ce = g.cross_entropy(r, 1);
        let grads = g.backward(ce).unwrap();

        let fx = finite_diff(&|v: &[f64]| run(v, &wv), &xv, 1e-5);
        let fw = finite_diff(&|v: &[f64]| run(&xv, v), &wv, 1e-5);
        assert!(max_rel_err(&grads.wrt(x, xv.len()), &fx) < 1e-6);
        assert!(max_rel_err(&grads.wrt(w, wv.len()), &fw) < 1e-6);
    }

    #[test]
    fn gather_scatter_and_concat_match_finite_differences() {
        let mut rng = crate::seeds::rng(14, "graph-fd", 3);
        let table: Vec<f64> = (0..5 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ids = vec![4usize, 0, 4, 2];

        let run = |tv: &[f64]| -> f64 {
            let mut g = Graph::new();
            let t = g.param(tv.to_vec(), &[5, 3]);
            let rows = g.gather(t, &ids);
            let rows2 = g.gather(t, &[1, 1, 3, 2]);
            let cat = g.concat_cols(rows, rows2);
            let sq = g.mul(cat, cat);
            let loss = g.mean(sq);
            g.value(loss)
        };

        let mut g = Graph::new();
        let t = g.param(table.clone(), &[5, 3]);
        let rows = g.gather(t, &ids);
        let rows2 = g.gather(t, &[1, 1, 3, 2]);
        let cat = g.concat_cols(rows, rows2);
        let sq = g.mul(cat, cat);
        let loss = g.mean(sq);
        let grads = g.backward(loss).unwrap();
        let ft = finite_diff(&|v: &[f64]| run(v), &table, 1e-5);
        assert!(max_rel_err(&grads.wrt(t, table.len()), &ft) < 1e-6);
    }

    #[test]
    fn subsampled_conv_equals_strided_conv() {
        // Running a strided conv must equal the stride-1 conv subsampled at
        // the stride grid. The fine-resolution tokenizer path relies on this.
        let mut rng = crate::seeds::rng(15, "graph", 4);
        let xv: Vec<f64> = (0..1 * 2 * 12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wv: Vec<f64> = (0..3 * 2 * 5).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let bv: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let mut g = Graph::new();
        let x = g.leaf(xv, &[1, 2, 12]);
        let w = g.leaf(wv, &[3, 2, 5]);
        let b = g.leaf(bv, &[3]);
        let strided = g.conv1d(x, w, b, 2, 2, 1);
        let fine = g.conv1d(x, w, b, 1, 2, 1);
        let ds = g.data(strided);
        let df = g.data(fine);
        for co in 0..3 {
            for o in 0..6 {
                let a = ds[co * 6 + o];
                let bf = df[co * 12 + o * 2];
                assert!((a - bf).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn js_matches_hand_formula_and_gradient() {
        let p = vec![0.6, 0.3, 0.1];
        let q = vec![0.5, 0.25, 0.25];
        let direct = {
            let kl = |a: &[f64], b: &[f64]| {
                a.iter()
                    .zip(b)
                    .filter(|(x, _)| **x > 0.0)
                    .map(|(x, y)| x * (x / y).ln())
                    .sum::<f64>()
            };
            let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
            0.5 * kl(&p, &m) + 0.5 * kl(&q, &m)
        };
        let mut g = Graph::new();
        let pv = g.param(p.clone(), &[3]);
        let loss = g.js_div(pv, q.clone());
        assert!((g.value(loss) - direct).abs() < 1e-14);

        let grads = g.backward(loss).unwrap();
        let run = |vals: &[f64]| {
            let mut g = Graph::new();
            let pv = g.param(vals.to_vec(), &[3]);
            let l = g.js_div(pv, q.clone());
            g.value(l)
        };
        let fd = finite_diff(&run, &p, 1e-6);
        assert!(max_rel_err(&grads.wrt(pv, 3), &fd) < 1e-6);
    }
}
