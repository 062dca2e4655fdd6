//! The recording tape: differentiable primitive operations.
//!
//! A [`Tape`] is an append-only arena of nodes. Each node owns the forward
//! value of one primitive op plus whatever context the op's backward pass
//! needs (pooling argmaxes, batch statistics, softmax rows). Because every
//! op only reads nodes created before it, the arena order is already
//! topological and [`Tape::backward`] is a single reverse sweep.
//!
//! A tape lives for one training step on one thread. Parameters enter as
//! gradient-carrying leaves via [`Tape::leaf`]; network inputs enter via
//! [`Tape::constant`] so no gradient work is spent on them.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Whether batch statistics are computed (train) or read from running
/// estimates (eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Zero-padding policy for convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding; output shrinks by kernel size minus one per axis.
    Valid,
    /// Output spatial size is `ceil(input / stride)`; padding is split
    /// evenly with the extra element on the trailing side.
    Same,
}

/// Exponentially averaged batch statistics for eval-mode normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        RunningStats {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }
}

/// Resolved convolution / pooling geometry. Input is `[n, d, h, w, c_in]`
/// (n = 1 for rank-4 input), output `[n, od, oh, ow, c_out]`.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    d: usize,
    h: usize,
    w: usize,
    cin: usize,
    co: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    sd: usize,
    sh: usize,
    sw: usize,
    pd: usize,
    ph: usize,
    pw: usize,
    od: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn in_sample(&self) -> usize {
        self.d * self.h * self.w * self.cin
    }
    fn out_sample(&self) -> usize {
        self.od * self.oh * self.ow * self.co
    }
    fn taps(&self) -> usize {
        self.kd * self.kh * self.kw
    }
}

/// Output size and front padding for one axis.
fn resolve_axis(input: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::Dimension("stride must be at least 1".into()));
    }
    if k == 0 {
        return Err(Error::Dimension("kernel extent must be at least 1".into()));
    }
    match padding {
        Padding::Valid => {
            if k > input {
                return Err(Error::Dimension(format!(
                    "kernel extent {k} exceeds input extent {input}"
                )));
            }
            Ok(((input - k) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let needed = (out - 1) * stride + k;
            let total = needed.saturating_sub(input);
            Ok((out, total / 2))
        }
    }
}

enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    AddScalar(TensorId),
    SubScalar(TensorId),
    Scale(TensorId, f64),
    Relu(TensorId),
    Sum(TensorId),
    Reshape(TensorId),
    Matmul {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: TensorId,
        rows: usize,
        cols: usize,
    },
    AddBias {
        x: TensorId,
        bias: TensorId,
        features: usize,
    },
    Conv3d {
        input: TensorId,
        kernels: TensorId,
        bias: TensorId,
        geom: ConvGeom,
    },
    MaxPool3d {
        input: TensorId,
        argmax: Vec<u32>,
    },
    BatchNorm {
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    GlobalAvgPool {
        input: TensorId,
        voxels: usize,
    },
    L2NormalizeRows {
        input: TensorId,
        inv_norms: Vec<f64>,
    },
    CrossEntropy {
        logits: TensorId,
        labels: Vec<usize>,
        softmax: Vec<f64>,
    },
    CenterLoss {
        embeddings: TensorId,
        residuals: Vec<f64>,
    },
    SpeakerBias {
        weight: TensorId,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of primitive ops; see the module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Registers a gradient-carrying leaf (a parameter).
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf)
    }

    /// Registers a constant leaf (an input); backward skips it.
    pub fn constant(&mut self, t: &Tensor) -> TensorId {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.node(id).shape
    }

    /// Forward value of a node. Empty after `backward` consumed the node.
    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.node(id).data
    }

    /// Copies a node's value out as a [`Tensor`].
    pub fn tensor(&self, id: TensorId) -> Tensor {
        let n = self.node(id);
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape node is a valid tensor")
    }

    /// The value of a single-element node.
    pub fn value(&self, id: TensorId) -> Result<f64> {
        let n = self.node(id);
        if n.data.len() != 1 {
            return Err(Error::Contract(format!(
                "value() on node of shape {:?}",
                n.shape
            )));
        }
        Ok(n.data[0])
    }

    /// Gradient of a node as a tensor; all-zeros when no path from the loss
    /// reached it.
    pub fn grad(&self, id: TensorId) -> Tensor {
        let n = self.node(id);
        let data = match &n.grad {
            Some(g) => g.clone(),
            None => vec![0.0; n.shape.iter().product()],
        };
        Tensor::new(n.shape.clone(), data).expect("gradient matches node shape")
    }

    /// Gradient buffer of a node, if any contribution reached it.
    pub fn grad_slice(&self, id: TensorId) -> Option<&[f64]> {
        self.node(id).grad.as_deref()
    }

    // ---- elementwise -------------------------------------------------

    fn binary_same_shape(
        &mut self,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::Dimension(format!(
                "elementwise op on shapes {:?} and {:?}",
                self.node(a).shape,
                self.node(b).shape
            )));
        }
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(self.node(a).shape.clone(), data, req, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.node(a).data.iter().map(|&x| x + c).collect();
        let req = self.requires(a);
        self.push(self.node(a).shape.clone(), data, req, Op::AddScalar(a))
    }

    pub fn sub_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.node(a).data.iter().map(|&x| x - c).collect();
        let req = self.requires(a);
        self.push(self.node(a).shape.clone(), data, req, Op::SubScalar(a))
    }

    /// Multiplies every element by a scalar.
    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.node(a).data.iter().map(|&x| x * c).collect();
        let req = self.requires(a);
        self.push(self.node(a).shape.clone(), data, req, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.node(a).data.iter().map(|&x| x.max(0.0)).collect();
        let req = self.requires(a);
        self.push(self.node(a).shape.clone(), data, req, Op::Relu(a))
    }

    /// Sum of all elements, as a `[1]`-shaped node.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.node(a).data.iter().sum();
        let req = self.requires(a);
        self.push(vec![1], vec![s], req, Op::Sum(a))
    }

    /// Reinterprets a node under a new shape with the same element count.
    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let n: usize = shape.iter().product();
        if n != self.node(a).data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {:?}",
                self.node(a).shape,
                shape
            )));
        }
        let data = self.node(a).data.clone();
        let req = self.requires(a);
        Ok(self.push(shape, data, req, Op::Reshape(a)))
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Dimension(format!(
                "matmul wants rank-2 operands, got {sa:?} and {sb:?}"
            )));
        }
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = (sb[0], sb[1]);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {sa:?} vs {sb:?}"
            )));
        }
        let mut out = vec![0.0; m * n];
        {
            let da = &self.node(a).data;
            let db = &self.node(b).data;
            for i in 0..m {
                let out_row = &mut out[i * n..(i + 1) * n];
                for kk in 0..k {
                    let av = da[i * k + kk];
                    let b_row = &db[kk * n..(kk + 1) * n];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o += av * bv;
                    }
                }
            }
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], out, req, Op::Matmul { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let s = &self.node(x).shape;
        if s.len() != 2 {
            return Err(Error::Dimension(format!("transpose wants rank 2, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let d = &self.node(x).data;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = d[r * cols + c];
            }
        }
        let req = self.requires(x);
        Ok(self.push(vec![cols, rows], out, req, Op::Transpose { x, rows, cols }))
    }

    /// Adds a `[F]` vector to every row of an `[..., F]` tensor.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let bs = &self.node(bias).shape;
        if bs.len() != 1 {
            return Err(Error::Dimension(format!("bias wants rank 1, got {bs:?}")));
        }
        let features = bs[0];
        let xs = &self.node(x).shape;
        if xs.last() != Some(&features) {
            return Err(Error::Dimension(format!(
                "bias of {features} features against tensor {xs:?}"
            )));
        }
        let bias_data = self.node(bias).data.clone();
        let mut data = self.node(x).data.clone();
        for row in data.chunks_exact_mut(features) {
            for (v, &b) in row.iter_mut().zip(&bias_data) {
                *v += b;
            }
        }
        let req = self.requires(x) || self.requires(bias);
        Ok(self.push(
            self.node(x).shape.clone(),
            data,
            req,
            Op::AddBias { x, bias, features },
        ))
    }

    // ---- convolution / pooling ----------------------------------------

    /// 3-D convolution (cross-correlation) over `[d, h, w, c_in]` or
    /// `[n, d, h, w, c_in]` input with `[c_out, kd, kh, kw, c_in]` kernels.
    pub fn conv3d(
        &mut self,
        input: TensorId,
        kernels: TensorId,
        bias: TensorId,
        stride: [usize; 3],
        padding: Padding,
    ) -> Result<TensorId> {
        let ks = self.node(kernels).shape.clone();
        if ks.len() != 5 {
            return Err(Error::Dimension(format!(
                "conv3d kernels want rank 5, got {ks:?}"
            )));
        }
        let xs = self.node(input).shape.clone();
        let (n, spatial, batched) = match xs.len() {
            4 => (1, [xs[0], xs[1], xs[2], xs[3]], false),
            5 => (xs[0], [xs[1], xs[2], xs[3], xs[4]], true),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv3d input wants rank 4 or 5, got {xs:?}"
                )))
            }
        };
        let (co, kd, kh, kw, kcin) = (ks[0], ks[1], ks[2], ks[3], ks[4]);
        if kcin != spatial[3] {
            return Err(Error::Dimension(format!(
                "conv3d kernels expect {kcin} input channels, input has {}",
                spatial[3]
            )));
        }
        if self.node(bias).shape != [co] {
            return Err(Error::Dimension(format!(
                "conv3d bias wants shape [{co}], got {:?}",
                self.node(bias).shape
            )));
        }
        let (od, pd) = resolve_axis(spatial[0], kd, stride[0], padding)?;
        let (oh, ph) = resolve_axis(spatial[1], kh, stride[1], padding)?;
        let (ow, pw) = resolve_axis(spatial[2], kw, stride[2], padding)?;
        let geom = ConvGeom {
            n,
            d: spatial[0],
            h: spatial[1],
            w: spatial[2],
            cin: spatial[3],
            co,
            kd,
            kh,
            kw,
            sd: stride[0],
            sh: stride[1],
            sw: stride[2],
            pd,
            ph,
            pw,
            od,
            oh,
            ow,
        };

        // Kernels repacked as [tap][c_in][c_out] so the innermost loop runs
        // over contiguous output channels.
        let wt = repack_kernels_tap_ci_co(&self.node(kernels).data, &geom);
        let bias_data = self.node(bias).data.clone();
        let mut out = vec![0.0; n * geom.out_sample()];
        for s in 0..n {
            let x = &self.node(input).data[s * geom.in_sample()..(s + 1) * geom.in_sample()];
            let o = &mut out[s * geom.out_sample()..(s + 1) * geom.out_sample()];
            conv_forward_sample(&geom, x, &wt, &bias_data, o);
        }
        let out_shape = if batched {
            vec![n, od, oh, ow, co]
        } else {
            vec![od, oh, ow, co]
        };
        let req = self.requires(input) || self.requires(kernels) || self.requires(bias);
        Ok(self.push(
            out_shape,
            out,
            req,
            Op::Conv3d {
                input,
                kernels,
                bias,
                geom,
            },
        ))
    }

    /// Max pooling over `[d, h, w, c]` or `[n, d, h, w, c]` input. Gradient
    /// routes to the first maximum in row-major window order.
    pub fn maxpool3d(
        &mut self,
        input: TensorId,
        window: [usize; 3],
        stride: [usize; 3],
    ) -> Result<TensorId> {
        let xs = self.node(input).shape.clone();
        let (n, spatial, batched) = match xs.len() {
            4 => (1, [xs[0], xs[1], xs[2], xs[3]], false),
            5 => (xs[0], [xs[1], xs[2], xs[3], xs[4]], true),
            _ => {
                return Err(Error::Dimension(format!(
                    "maxpool3d input wants rank 4 or 5, got {xs:?}"
                )))
            }
        };
        let (od, _) = resolve_axis(spatial[0], window[0], stride[0], Padding::Valid)?;
        let (oh, _) = resolve_axis(spatial[1], window[1], stride[1], Padding::Valid)?;
        let (ow, _) = resolve_axis(spatial[2], window[2], stride[2], Padding::Valid)?;
        let c = spatial[3];
        if self.node(input).data.len() > u32::MAX as usize {
            return Err(Error::Dimension("maxpool3d input too large".into()));
        }
        let geom = ConvGeom {
            n,
            d: spatial[0],
            h: spatial[1],
            w: spatial[2],
            cin: c,
            co: c,
            kd: window[0],
            kh: window[1],
            kw: window[2],
            sd: stride[0],
            sh: stride[1],
            sw: stride[2],
            pd: 0,
            ph: 0,
            pw: 0,
            od,
            oh,
            ow,
        };
        let mut out = vec![0.0; n * geom.out_sample()];
        let mut argmax = vec![0u32; n * geom.out_sample()];
        for s in 0..n {
            let base = s * geom.in_sample();
            let x = &self.node(input).data[base..base + geom.in_sample()];
            let obase = s * geom.out_sample();
            maxpool_forward_sample(
                &geom,
                x,
                base,
                &mut out[obase..obase + geom.out_sample()],
                &mut argmax[obase..obase + geom.out_sample()],
            );
        }
        let out_shape = if batched {
            vec![n, od, oh, ow, c]
        } else {
            vec![od, oh, ow, c]
        };
        let req = self.requires(input);
        Ok(self.push(out_shape, out, req, Op::MaxPool3d { input, argmax }))
    }

    /// Per-feature batch normalization over the last axis. In train mode,
    /// batch statistics normalize the input and the running estimates are
    /// updated in place with the given momentum; in eval mode the running
    /// estimates normalize the input and are left untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
        momentum: f64,
        mode: Mode,
        running: &mut RunningStats,
    ) -> Result<TensorId> {
        let xs = self.node(input).shape.clone();
        if xs.len() < 2 {
            return Err(Error::Dimension(format!(
                "batchnorm input wants rank >= 2, got {xs:?}"
            )));
        }
        let features = *xs.last().expect("rank checked");
        let rows = self.node(input).data.len() / features;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.node(id).shape != [features] {
                return Err(Error::Dimension(format!(
                    "batchnorm {name} wants shape [{features}], got {:?}",
                    self.node(id).shape
                )));
            }
        }
        if running.mean.len() != features || running.var.len() != features {
            return Err(Error::Dimension(format!(
                "running stats hold {} features, input has {features}",
                running.mean.len()
            )));
        }

        let (mean, var, train) = match mode {
            Mode::Train => {
                if rows < 2 {
                    return Err(Error::DegenerateBatch(format!(
                        "batchnorm needs at least 2 rows in train mode, got {rows}"
                    )));
                }
                let x = &self.node(input).data;
                let mut mean = vec![0.0; features];
                for row in x.chunks_exact(features) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                for m in &mut mean {
                    *m /= rows as f64;
                }
                let mut var = vec![0.0; features];
                for row in x.chunks_exact(features) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v - m;
                        *s += d * d;
                    }
                }
                for v in &mut var {
                    *v /= rows as f64;
                }
                for c in 0..features {
                    running.mean[c] = momentum * running.mean[c] + (1.0 - momentum) * mean[c];
                    running.var[c] = momentum * running.var[c] + (1.0 - momentum) * var[c];
                }
                (mean, var, true)
            }
            Mode::Eval => (running.mean.clone(), running.var.clone(), false),
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

        let gamma_data = self.node(gamma).data.clone();
        let beta_data = self.node(beta).data.clone();
        let mut out = vec![0.0; self.node(input).data.len()];
        for (orow, xrow) in out
            .chunks_exact_mut(features)
            .zip(self.node(input).data.chunks_exact(features))
        {
            for c in 0..features {
                orow[c] = gamma_data[c] * (xrow[c] - mean[c]) * inv_std[c] + beta_data[c];
            }
        }
        let req = self.requires(input) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            xs,
            out,
            req,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            },
        ))
    }

    /// Per-channel mean over the spatial axes: `[d, h, w, c]` collapses to
    /// `[c]`, `[n, d, h, w, c]` to `[n, c]`.
    pub fn global_avg_pool(&mut self, input: TensorId) -> Result<TensorId> {
        let xs = self.node(input).shape.clone();
        let (n, voxels, c, batched) = match xs.len() {
            4 => (1, xs[0] * xs[1] * xs[2], xs[3], false),
            5 => (xs[0], xs[1] * xs[2] * xs[3], xs[4], true),
            _ => {
                return Err(Error::Dimension(format!(
                    "global_avg_pool input wants rank 4 or 5, got {xs:?}"
                )))
            }
        };
        let mut out = vec![0.0; n * c];
        let x = &self.node(input).data;
        for s in 0..n {
            let acc = &mut out[s * c..(s + 1) * c];
            for row in x[s * voxels * c..(s + 1) * voxels * c].chunks_exact(c) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a /= voxels as f64;
            }
        }
        let out_shape = if batched { vec![n, c] } else { vec![c] };
        let req = self.requires(input);
        Ok(self.push(out_shape, out, req, Op::GlobalAvgPool { input, voxels }))
    }

    /// Scales each row of `[n, e]` (or a single `[e]` vector) to unit
    /// Euclidean norm.
    pub fn l2_normalize(&mut self, input: TensorId) -> Result<TensorId> {
        let xs = self.node(input).shape.clone();
        let e = match xs.len() {
            1 => xs[0],
            2 => xs[1],
            _ => {
                return Err(Error::Dimension(format!(
                    "l2_normalize input wants rank 1 or 2, got {xs:?}"
                )))
            }
        };
        let x = &self.node(input).data;
        let mut inv_norms = Vec::with_capacity(x.len() / e);
        let mut out = vec![0.0; x.len()];
        for (orow, xrow) in out.chunks_exact_mut(e).zip(x.chunks_exact(e)) {
            let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "cannot normalize a row with norm {norm}"
                )));
            }
            let inv = 1.0 / norm;
            for (o, &v) in orow.iter_mut().zip(xrow) {
                *o = v * inv;
            }
            inv_norms.push(inv);
        }
        let req = self.requires(input);
        Ok(self.push(xs, out, req, Op::L2NormalizeRows { input, inv_norms }))
    }

    // ---- losses --------------------------------------------------------

    /// Mean negative log-softmax of the true class over a `[n, s]` logit
    /// matrix, computed in log-sum-exp form.
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let xs = self.node(logits).shape.clone();
        if xs.len() != 2 {
            return Err(Error::Dimension(format!(
                "cross_entropy logits want rank 2, got {xs:?}"
            )));
        }
        let (n, s) = (xs[0], xs[1]);
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "{} labels for {n} logit rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s) {
            return Err(Error::Index(format!("label {bad} out of range for {s} classes")));
        }
        let z = &self.node(logits).data;
        let mut softmax = vec![0.0; n * s];
        let mut total = 0.0;
        for (i, (prow, zrow)) in softmax.chunks_exact_mut(s).zip(z.chunks_exact(s)).enumerate() {
            let m = zrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (p, &v) in prow.iter_mut().zip(zrow) {
                let e = (v - m).exp();
                *p = e;
                sum += e;
            }
            for p in prow.iter_mut() {
                *p /= sum;
            }
            total += m + sum.ln() - zrow[labels[i]];
        }
        let loss = total / n as f64;
        let req = self.requires(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            req,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                softmax,
            },
        ))
    }

    /// Half the mean squared distance between each `[n, e]` embedding row
    /// and its class center. Centers are constants for the step.
    pub fn center_loss(
        &mut self,
        embeddings: TensorId,
        labels: &[usize],
        centers: &Tensor,
    ) -> Result<TensorId> {
        let xs = self.node(embeddings).shape.clone();
        if xs.len() != 2 {
            return Err(Error::Dimension(format!(
                "center_loss embeddings want rank 2, got {xs:?}"
            )));
        }
        let (n, e) = (xs[0], xs[1]);
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "{} labels for {n} embedding rows",
                labels.len()
            )));
        }
        if centers.rank() != 2 || centers.shape()[1] != e {
            return Err(Error::Dimension(format!(
                "centers of shape {:?} against embeddings {xs:?}",
                centers.shape()
            )));
        }
        let num_classes = centers.shape()[0];
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Index(format!(
                "no center for label {bad} ({num_classes} centers)"
            )));
        }
        let x = &self.node(embeddings).data;
        let c = centers.data();
        let mut residuals = vec![0.0; n * e];
        let mut total = 0.0;
        for i in 0..n {
            let xrow = &x[i * e..(i + 1) * e];
            let crow = &c[labels[i] * e..(labels[i] + 1) * e];
            let rrow = &mut residuals[i * e..(i + 1) * e];
            for ((r, &xv), &cv) in rrow.iter_mut().zip(xrow).zip(crow) {
                *r = xv - cv;
                total += *r * *r;
            }
        }
        let loss = total / (2.0 * n as f64);
        let req = self.requires(embeddings);
        Ok(self.push(
            vec![1],
            vec![loss],
            req,
            Op::CenterLoss {
                embeddings,
                residuals,
            },
        ))
    }

    /// Mean squared hinged cosine between all pairs of rows of `[s, e]`,
    /// after normalizing each row. Zero iff no pair of rows has positive
    /// cosine; one iff all rows point the same way.
    pub fn speaker_bias_loss(&mut self, weight: TensorId) -> Result<TensorId> {
        let xs = self.node(weight).shape.clone();
        if xs.len() != 2 {
            return Err(Error::Dimension(format!(
                "speaker_bias_loss weight wants rank 2, got {xs:?}"
            )));
        }
        let (s, e) = (xs[0], xs[1]);
        if s < 2 {
            return Err(Error::Contract(format!(
                "speaker_bias_loss needs at least 2 rows, got {s}"
            )));
        }
        let (units, _) = normalize_rows(&self.node(weight).data, s, e)?;
        let mut total = 0.0;
        for i in 0..s {
            for j in (i + 1)..s {
                let c = dot(&units[i * e..(i + 1) * e], &units[j * e..(j + 1) * e]);
                if c > 0.0 {
                    total += c * c;
                }
            }
        }
        let pairs = (s * (s - 1)) as f64 / 2.0;
        let loss = total / pairs;
        let req = self.requires(weight);
        Ok(self.push(vec![1], vec![loss], req, Op::SpeakerBias { weight }))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar loss node. Populates gradients on every
    /// gradient-carrying leaf at or below `loss`; intermediate buffers are
    /// consumed as the sweep passes them.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        {
            let n = self.node(loss);
            if n.data.len() != 1 {
                return Err(Error::Contract(format!(
                    "backward from non-scalar node of shape {:?}",
                    n.shape
                )));
            }
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.nodes[idx].grad = Some(g);
                continue;
            }
            let (before, at) = self.nodes.split_at_mut(idx);
            let node = &mut at[0];
            match &node.op {
                Op::Leaf => unreachable!("leaves handled above"),
                Op::Add(a, b) => {
                    accumulate(before, *a, |dst| axpy(dst, 1.0, &g));
                    accumulate(before, *b, |dst| axpy(dst, 1.0, &g));
                }
                Op::Sub(a, b) => {
                    accumulate(before, *a, |dst| axpy(dst, 1.0, &g));
                    accumulate(before, *b, |dst| axpy(dst, -1.0, &g));
                }
                Op::Mul(a, b) => {
                    let (ai, bi) = (a.0, b.0);
                    if before[ai].requires_grad {
                        let contrib: Vec<f64> = g
                            .iter()
                            .zip(&before[bi].data)
                            .map(|(&gv, &bv)| gv * bv)
                            .collect();
                        accumulate(before, *a, |dst| axpy(dst, 1.0, &contrib));
                    }
                    if before[bi].requires_grad {
                        let contrib: Vec<f64> = g
                            .iter()
                            .zip(&before[ai].data)
                            .map(|(&gv, &av)| gv * av)
                            .collect();
                        accumulate(before, *b, |dst| axpy(dst, 1.0, &contrib));
                    }
                }
                Op::AddScalar(a) => accumulate(before, *a, |dst| axpy(dst, 1.0, &g)),
                Op::SubScalar(a) => accumulate(before, *a, |dst| axpy(dst, 1.0, &g)),
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(before, *a, |dst| axpy(dst, c, &g));
                }
                Op::Relu(a) => {
                    let mask: Vec<f64> = node
                        .data
                        .iter()
                        .zip(&g)
                        .map(|(&y, &gv)| if y > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(before, *a, |dst| axpy(dst, 1.0, &mask));
                }
                Op::Sum(a) => {
                    let gv = g[0];
                    accumulate(before, *a, |dst| {
                        for d in dst.iter_mut() {
                            *d += gv;
                        }
                    });
                }
                Op::Reshape(a) => accumulate(before, *a, |dst| axpy(dst, 1.0, &g)),
                Op::Matmul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let (ai, bi) = (a.0, b.0);
                    if before[ai].requires_grad {
                        // dA = g . B^T
                        let db = &before[bi].data;
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            let darow = &mut da[i * k..(i + 1) * k];
                            for (kk, dv) in darow.iter_mut().enumerate() {
                                *dv = dot(grow, &db[kk * n..(kk + 1) * n]);
                            }
                        }
                        accumulate(before, *a, |dst| axpy(dst, 1.0, &da));
                    }
                    if before[bi].requires_grad {
                        // dB = A^T . g
                        let da_ = &before[ai].data;
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for kk in 0..k {
                                let av = da_[i * k + kk];
                                let dbrow = &mut db[kk * n..(kk + 1) * n];
                                for (dv, &gv) in dbrow.iter_mut().zip(grow) {
                                    *dv += av * gv;
                                }
                            }
                        }
                        accumulate(before, *b, |dst| axpy(dst, 1.0, &db));
                    }
                }
                Op::Transpose { x, rows, cols } => {
                    let (rows, cols) = (*rows, *cols);
                    let mut dx = vec![0.0; rows * cols];
                    for c in 0..cols {
                        for r in 0..rows {
                            dx[r * cols + c] = g[c * rows + r];
                        }
                    }
                    accumulate(before, *x, |dst| axpy(dst, 1.0, &dx));
                }
                Op::AddBias { x, bias, features } => {
                    let features = *features;
                    accumulate(before, *x, |dst| axpy(dst, 1.0, &g));
                    let mut db = vec![0.0; features];
                    for row in g.chunks_exact(features) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    accumulate(before, *bias, |dst| axpy(dst, 1.0, &db));
                }
                Op::Conv3d {
                    input,
                    kernels,
                    bias,
                    geom,
                } => {
                    let geom = *geom;
                    let (ii, ki) = (input.0, kernels.0);
                    let want_input = before[ii].requires_grad;
                    let x_all = &before[ii].data;
                    let k_all = &before[ki].data;

                    let w_oc = repack_kernels_tap_co_ci(k_all, &geom);
                    let mut d_in = if want_input {
                        vec![0.0; x_all.len()]
                    } else {
                        Vec::new()
                    };
                    let mut d_wt = vec![0.0; geom.taps() * geom.cin * geom.co];
                    let mut d_bias = vec![0.0; geom.co];
                    for s in 0..geom.n {
                        let x = &x_all[s * geom.in_sample()..(s + 1) * geom.in_sample()];
                        let go = &g[s * geom.out_sample()..(s + 1) * geom.out_sample()];
                        let din = if want_input {
                            Some(&mut d_in[s * geom.in_sample()..(s + 1) * geom.in_sample()])
                        } else {
                            None
                        };
                        conv_backward_sample(&geom, x, &w_oc, go, din, &mut d_wt, &mut d_bias);
                    }
                    let d_k = unpack_kernel_grad(&d_wt, &geom);
                    if want_input {
                        accumulate(before, *input, |dst| axpy(dst, 1.0, &d_in));
                    }
                    accumulate(before, *kernels, |dst| axpy(dst, 1.0, &d_k));
                    accumulate(before, *bias, |dst| axpy(dst, 1.0, &d_bias));
                }
                Op::MaxPool3d { input, argmax } => {
                    let contributions: Vec<(u32, f64)> =
                        argmax.iter().copied().zip(g.iter().copied()).collect();
                    accumulate(before, *input, |dst| {
                        for &(pos, gv) in &contributions {
                            dst[pos as usize] += gv;
                        }
                    });
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    train,
                } => {
                    let features = mean.len();
                    let rows = g.len() / features;
                    let x = &before[input.0].data;
                    let gamma_data = &before[gamma.0].data;

                    // d_beta and d_gamma are plain per-channel reductions.
                    let mut d_beta = vec![0.0; features];
                    let mut d_gamma = vec![0.0; features];
                    for (grow, xrow) in g.chunks_exact(features).zip(x.chunks_exact(features)) {
                        for c in 0..features {
                            let xhat = (xrow[c] - mean[c]) * inv_std[c];
                            d_beta[c] += grow[c];
                            d_gamma[c] += grow[c] * xhat;
                        }
                    }
                    if before[input.0].requires_grad {
                        let mut dx = vec![0.0; g.len()];
                        if *train {
                            let inv_rows = 1.0 / rows as f64;
                            for ((dxrow, grow), xrow) in dx
                                .chunks_exact_mut(features)
                                .zip(g.chunks_exact(features))
                                .zip(x.chunks_exact(features))
                            {
                                for c in 0..features {
                                    let xhat = (xrow[c] - mean[c]) * inv_std[c];
                                    dxrow[c] = gamma_data[c]
                                        * inv_std[c]
                                        * (grow[c]
                                            - d_beta[c] * inv_rows
                                            - xhat * d_gamma[c] * inv_rows);
                                }
                            }
                        } else {
                            for (dxrow, grow) in
                                dx.chunks_exact_mut(features).zip(g.chunks_exact(features))
                            {
                                for c in 0..features {
                                    dxrow[c] = grow[c] * gamma_data[c] * inv_std[c];
                                }
                            }
                        }
                        accumulate(before, *input, |dst| axpy(dst, 1.0, &dx));
                    }
                    accumulate(before, *gamma, |dst| axpy(dst, 1.0, &d_gamma));
                    accumulate(before, *beta, |dst| axpy(dst, 1.0, &d_beta));
                }
                Op::GlobalAvgPool { input, voxels } => {
                    let voxels = *voxels;
                    let channels = *node.shape.last().expect("pool output has a channel axis");
                    let inv = 1.0 / voxels as f64;
                    let samples = g.len() / channels;
                    accumulate(before, *input, |dst| {
                        for s in 0..samples {
                            let grow = &g[s * channels..(s + 1) * channels];
                            let sample =
                                &mut dst[s * voxels * channels..(s + 1) * voxels * channels];
                            for row in sample.chunks_exact_mut(channels) {
                                for (d, &gv) in row.iter_mut().zip(grow) {
                                    *d += gv * inv;
                                }
                            }
                        }
                    });
                }
                Op::L2NormalizeRows { input, inv_norms } => {
                    let e = node.data.len() / inv_norms.len();
                    let y = &node.data;
                    let mut dx = vec![0.0; y.len()];
                    for (r, &inv) in inv_norms.iter().enumerate() {
                        let yrow = &y[r * e..(r + 1) * e];
                        let grow = &g[r * e..(r + 1) * e];
                        let proj = dot(grow, yrow);
                        let dxrow = &mut dx[r * e..(r + 1) * e];
                        for ((d, &gv), &yv) in dxrow.iter_mut().zip(grow).zip(yrow) {
                            *d = inv * (gv - yv * proj);
                        }
                    }
                    accumulate(before, *input, |dst| axpy(dst, 1.0, &dx));
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    softmax,
                } => {
                    let n = labels.len();
                    let s = softmax.len() / n;
                    let go = g[0] / n as f64;
                    let mut dz = softmax.clone();
                    for (i, &label) in labels.iter().enumerate() {
                        dz[i * s + label] -= 1.0;
                    }
                    for v in &mut dz {
                        *v *= go;
                    }
                    accumulate(before, *logits, |dst| axpy(dst, 1.0, &dz));
                }
                Op::CenterLoss {
                    embeddings,
                    residuals,
                } => {
                    let e = before[embeddings.0].shape[1];
                    let n = residuals.len() / e;
                    let go = g[0] / n as f64;
                    let contrib: Vec<f64> = residuals.iter().map(|&r| r * go).collect();
                    accumulate(before, *embeddings, |dst| axpy(dst, 1.0, &contrib));
                }
                Op::SpeakerBias { weight } => {
                    let shape = before[weight.0].shape.clone();
                    let (s, e) = (shape[0], shape[1]);
                    let (units, norms) = normalize_rows(&before[weight.0].data, s, e)
                        .expect("validated at forward time");
                    let pairs = (s * (s - 1)) as f64 / 2.0;
                    let go = g[0];
                    let mut dw = vec![0.0; s * e];
                    for i in 0..s {
                        for j in (i + 1)..s {
                            let ui = &units[i * e..(i + 1) * e];
                            let uj = &units[j * e..(j + 1) * e];
                            let c = dot(ui, uj);
                            if c <= 0.0 {
                                continue;
                            }
                            let coef = go * 2.0 * c / pairs;
                            for k in 0..e {
                                dw[i * e + k] += coef * (uj[k] - c * ui[k]) / norms[i];
                                dw[j * e + k] += coef * (ui[k] - c * uj[k]) / norms[j];
                            }
                        }
                    }
                    accumulate(before, *weight, |dst| axpy(dst, 1.0, &dw));
                }
            }
            // Intermediate values are never read again after this point.
            node.data = Vec::new();
        }
        Ok(())
    }
}

/// Adds `contribution` into `id`'s gradient buffer if that node wants one.
fn accumulate(nodes: &mut [Node], id: TensorId, write: impl FnOnce(&mut [f64])) {
    let node = &mut nodes[id.0];
    if !node.requires_grad {
        return;
    }
    let len = node.shape.iter().product();
    let dst = node.grad.get_or_insert_with(|| vec![0.0; len]);
    write(dst);
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Unit rows and their norms; errors on a zero-norm row.
fn normalize_rows(data: &[f64], rows: usize, cols: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut units = vec![0.0; rows * cols];
    let mut norms = vec![0.0; rows];
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateBasis(format!("basis row {r} has zero norm")));
        }
        norms[r] = norm;
        for (u, &v) in units[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *u = v / norm;
        }
    }
    Ok((units, norms))
}

/// `[co][kd][kh][kw][ci]` kernels repacked as `[tap][ci][co]`.
fn repack_kernels_tap_ci_co(k: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let taps = geom.taps();
    let mut wt = vec![0.0; taps * geom.cin * geom.co];
    for co in 0..geom.co {
        for tap in 0..taps {
            for ci in 0..geom.cin {
                wt[(tap * geom.cin + ci) * geom.co + co] = k[(co * taps + tap) * geom.cin + ci];
            }
        }
    }
    wt
}

/// `[co][kd][kh][kw][ci]` kernels repacked as `[tap][co][ci]`.
fn repack_kernels_tap_co_ci(k: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let taps = geom.taps();
    let mut wt = vec![0.0; taps * geom.cin * geom.co];
    for co in 0..geom.co {
        for tap in 0..taps {
            for ci in 0..geom.cin {
                wt[(tap * geom.co + co) * geom.cin + ci] = k[(co * taps + tap) * geom.cin + ci];
            }
        }
    }
    wt
}

/// `[tap][ci][co]` kernel gradient back into `[co][kd][kh][kw][ci]` order.
fn unpack_kernel_grad(d_wt: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let taps = geom.taps();
    let mut dk = vec![0.0; geom.co * taps * geom.cin];
    for tap in 0..taps {
        for ci in 0..geom.cin {
            for co in 0..geom.co {
                dk[(co * taps + tap) * geom.cin + ci] = d_wt[(tap * geom.cin + ci) * geom.co + co];
            }
        }
    }
    dk
}

fn conv_forward_sample(geom: &ConvGeom, x: &[f64], wt: &[f64], bias: &[f64], out: &mut [f64]) {
    let ConvGeom {
        d,
        h,
        w,
        cin,
        co,
        kd,
        kh,
        kw,
        sd,
        sh,
        sw,
        pd,
        ph,
        pw,
        od,
        oh,
        ow,
        ..
    } = *geom;
    let mut oidx = 0;
    for odi in 0..od {
        let id0 = (odi * sd) as isize - pd as isize;
        for ohi in 0..oh {
            let ih0 = (ohi * sh) as isize - ph as isize;
            for owi in 0..ow {
                let iw0 = (owi * sw) as isize - pw as isize;
                let out_row = &mut out[oidx * co..(oidx + 1) * co];
                out_row.copy_from_slice(bias);
                for kdi in 0..kd {
                    let id = id0 + kdi as isize;
                    if id < 0 || id >= d as isize {
                        continue;
                    }
                    for khi in 0..kh {
                        let ih = ih0 + khi as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kwi in 0..kw {
                            let iw = iw0 + kwi as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let in_base =
                                (((id as usize * h) + ih as usize) * w + iw as usize) * cin;
                            let x_row = &x[in_base..in_base + cin];
                            let tap = (kdi * kh + khi) * kw + kwi;
                            for (ci, &xv) in x_row.iter().enumerate() {
                                let w_row = &wt[(tap * cin + ci) * co..(tap * cin + ci + 1) * co];
                                for (o, &wv) in out_row.iter_mut().zip(w_row) {
                                    *o += xv * wv;
                                }
                            }
                        }
                    }
                }
                oidx += 1;
            }
        }
    }
}

/// One sample of the conv backward pass. `w_oc` is `[tap][co][ci]`; kernel
/// gradient accumulates into `[tap][ci][co]` layout.
fn conv_backward_sample(
    geom: &ConvGeom,
    x: &[f64],
    w_oc: &[f64],
    g_out: &[f64],
    mut d_in: Option<&mut [f64]>,
    d_wt: &mut [f64],
    d_bias: &mut [f64],
) {
    let ConvGeom {
        d,
        h,
        w,
        cin,
        co,
        kd,
        kh,
        kw,
        sd,
        sh,
        sw,
        pd,
        ph,
        pw,
        od,
        oh,
        ow,
        ..
    } = *geom;
    let mut oidx = 0;
    for odi in 0..od {
        let id0 = (odi * sd) as isize - pd as isize;
        for ohi in 0..oh {
            let ih0 = (ohi * sh) as isize - ph as isize;
            for owi in 0..ow {
                let iw0 = (owi * sw) as isize - pw as isize;
                let g_row = &g_out[oidx * co..(oidx + 1) * co];
                for (b, &gv) in d_bias.iter_mut().zip(g_row) {
                    *b += gv;
                }
                for kdi in 0..kd {
                    let id = id0 + kdi as isize;
                    if id < 0 || id >= d as isize {
                        continue;
                    }
                    for khi in 0..kh {
                        let ih = ih0 + khi as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kwi in 0..kw {
                            let iw = iw0 + kwi as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let in_base =
                                (((id as usize * h) + ih as usize) * w + iw as usize) * cin;
                            let tap = (kdi * kh + khi) * kw + kwi;
                            if let Some(din) = d_in.as_deref_mut() {
                                let din_row = &mut din[in_base..in_base + cin];
                                for (coi, &gv) in g_row.iter().enumerate() {
                                    let w_row =
                                        &w_oc[(tap * co + coi) * cin..(tap * co + coi + 1) * cin];
                                    for (dv, &wv) in din_row.iter_mut().zip(w_row) {
                                        *dv += gv * wv;
                                    }
                                }
                            }
                            let x_row = &x[in_base..in_base + cin];
                            for (ci, &xv) in x_row.iter().enumerate() {
                                let dw_row =
                                    &mut d_wt[(tap * cin + ci) * co..(tap * cin + ci + 1) * co];
                                for (dw, &gv) in dw_row.iter_mut().zip(g_row) {
                                    *dw += xv * gv;
                                }
                            }
                        }
                    }
                }
                oidx += 1;
            }
        }
    }
}

/// `sample_base` is the flat offset of this sample in the whole input
/// buffer, so stored argmaxes are global indices.
fn maxpool_forward_sample(
    geom: &ConvGeom,
    x: &[f64],
    sample_base: usize,
    out: &mut [f64],
    argmax: &mut [u32],
) {
    let ConvGeom {
        h,
        w,
        co: c,
        kd,
        kh,
        kw,
        sd,
        sh,
        sw,
        od,
        oh,
        ow,
        ..
    } = *geom;
    let mut oidx = 0;
    for odi in 0..od {
        let id0 = odi * sd;
        for ohi in 0..oh {
            let ih0 = ohi * sh;
            for owi in 0..ow {
                let iw0 = owi * sw;
                let out_row = &mut out[oidx * c..(oidx + 1) * c];
                let arg_row = &mut argmax[oidx * c..(oidx + 1) * c];
                let mut first = true;
                for kdi in 0..kd {
                    for khi in 0..kh {
                        for kwi in 0..kw {
                            let in_base = (((id0 + kdi) * h + ih0 + khi) * w + iw0 + kwi) * c;
                            let x_row = &x[in_base..in_base + c];
                            if first {
                                out_row.copy_from_slice(x_row);
                                for (a, ch) in arg_row.iter_mut().enumerate() {
                                    *ch = (sample_base + in_base + a) as u32;
                                }
                                first = false;
                            } else {
                                for (ch, &xv) in x_row.iter().enumerate() {
                                    if xv > out_row[ch] {
                                        out_row[ch] = xv;
                                        arg_row[ch] = (sample_base + in_base + ch) as u32;
                                    }
                                }
                            }
                        }
                    }
                }
                oidx += 1;
            }
        }
    }
}
