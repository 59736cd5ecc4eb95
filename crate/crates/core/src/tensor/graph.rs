use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::dense::Tensor;
use super::error::{shape_mismatch, Result, TensorError};
use super::kernels::{self, ConvGeometry};
use super::scalar::Scalar;

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

/// Whether batch normalization uses batch statistics (and updates the running
/// estimates) or the stored running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running per-channel mean/variance owned by a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T = f32> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(vec![channels]),
            var: Tensor::ones(vec![channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.numel()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormOptions {
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for BatchNormOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeometry,
    },
    MaxPool2 {
        input: usize,
        argmax: Vec<usize>,
    },
    Upsample {
        input: usize,
        planes: usize,
        from: (usize, usize),
        to: (usize, usize),
    },
    BatchNorm {
        input: usize,
        scale: usize,
        shift: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
        channels: usize,
        plane: usize,
    },
    Relu {
        input: usize,
    },
    Sigmoid {
        input: usize,
    },
    Softmax {
        input: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        trans_a: bool,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Concat {
        a: usize,
        b: usize,
        batch: usize,
        a_len: usize,
        b_len: usize,
    },
    AbsDiff {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    AddScaled {
        a: usize,
        b: usize,
        gamma: usize,
    },
    Scale {
        input: usize,
        factor: T,
    },
    Reshape {
        input: usize,
    },
    Slice {
        input: usize,
        offset: usize,
    },
    Sum {
        input: usize,
    },
    Mean {
        input: usize,
    },
    WeightedBce {
        input: usize,
        target: Vec<T>,
        w0: T,
        w1: T,
        delta: T,
    },
    WeightedNll {
        input: usize,
        target: Vec<usize>,
        weights: Vec<T>,
        delta: T,
        classes: usize,
        plane: usize,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::BatchNorm {
                input,
                scale,
                shift,
                ..
            } => vec![*input, *scale, *shift],
            Op::MaxPool2 { input, .. }
            | Op::Upsample { input, .. }
            | Op::Relu { input }
            | Op::Sigmoid { input }
            | Op::Softmax { input, .. }
            | Op::Scale { input, .. }
            | Op::Reshape { input }
            | Op::Slice { input, .. }
            | Op::Sum { input }
            | Op::Mean { input }
            | Op::WeightedBce { input, .. }
            | Op::WeightedNll { input, .. } => vec![*input],
            Op::MatMul { a, b, .. }
            | Op::Concat { a, b, .. }
            | Op::AbsDiff { a, b }
            | Op::Sub { a, b }
            | Op::Add { a, b }
            | Op::Mul { a, b } => vec![*a, *b],
            Op::AddScaled { a, b, gamma } => vec![*a, *b, *gamma],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of executed operations. Nodes are appended in execution order, so the
/// reverse of insertion order is a valid topological order for backward.
pub struct Graph<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<usize, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn t<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

fn sum_f64<T: Scalar>(xs: impl Iterator<Item = T>) -> f64 {
    xs.map(|v| v.as_f64()).sum()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = match &op {
            Op::Leaf => value.requires_grad(),
            other => other.inputs().iter().any(|&i| self.nodes[i].requires_grad),
        };
        let value = value.detached();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Records a leaf; it is trainable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Result<Var> {
        self.push(tensor, Op::Leaf, "leaf")
    }

    /// Records a non-trainable leaf.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Result<Var> {
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Leaf, "constant")
    }

    /// Binds a trainable parameter identified by `key`. Binding the same key
    /// twice returns the same variable, so every use of one parameter shares
    /// a single leaf and its gradient.
    pub fn param(&mut self, key: usize, tensor: &Tensor<T>) -> Result<Var> {
        if let Some(&v) = self.params.get(&key) {
            return Ok(v);
        }
        let v = self.leaf(tensor.detached().with_grad())?;
        self.params.insert(key, v);
        Ok(v)
    }

    pub fn bound_param(&self, key: usize) -> Option<Var> {
        self.params.get(&key).copied()
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.params.iter().map(|(&k, &v)| (k, v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let i = self.index(v).expect("variable belongs to this graph");
        &self.nodes[i].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.index(v)
            .map(|i| self.nodes[i].requires_grad)
            .unwrap_or(false)
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if it was computed.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        let i = self.index(v).ok()?;
        self.grads.get(i)?.as_deref()
    }

    // ---------------------------------------------------------------- ops

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xi, wi) = (self.index(input)?, self.index(weight)?);
        let bi = bias.map(|b| self.index(b)).transpose()?;
        let xs = self.nodes[xi].value.shape().to_vec();
        let ws = self.nodes[wi].value.shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_mismatch(
                "conv2d",
                format!("expected N×C×H×W input and O×C×k×k weight, got {xs:?} and {ws:?}"),
            ));
        }
        let kernel = ws[2];
        if ws[3] != kernel || !(kernel == 1 || kernel == 3) {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                detail: format!("kernel must be 1×1 or 3×3, got {}×{}", ws[2], ws[3]),
            });
        }
        if ws[1] != xs[1] {
            return Err(shape_mismatch(
                "conv2d",
                format!("input has {} channels, weight expects {}", xs[1], ws[1]),
            ));
        }
        if let Some(bi) = bi {
            if self.nodes[bi].value.shape() != [ws[0]] {
                return Err(shape_mismatch(
                    "conv2d",
                    format!("bias shape {:?} for {} outputs", self.nodes[bi].value.shape(), ws[0]),
                ));
            }
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        let extent = |len: usize| -> Result<usize> {
            let padded = len + 2 * padding;
            if padded < kernel || !(padded - kernel).is_multiple_of(stride) {
                return Err(TensorError::NonIntegralExtent {
                    op: "conv2d",
                    extent: len,
                    kernel,
                    stride,
                    padding,
                });
            }
            Ok((padded - kernel) / stride + 1)
        };
        let geom = ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            out_channels: ws[0],
            height: xs[2],
            width: xs[3],
            kernel,
            stride,
            padding,
            out_height: extent(xs[2])?,
            out_width: extent(xs[3])?,
        };
        let out = kernels::conv2d_forward(
            self.nodes[xi].value.data(),
            self.nodes[wi].value.data(),
            bi.map(|b| self.nodes[b].value.data()),
            &geom,
        );
        let value = Tensor::new(
            vec![geom.batch, geom.out_channels, geom.out_height, geom.out_width],
            out,
        )?;
        self.push(
            value,
            Op::Conv2d {
                input: xi,
                weight: wi,
                bias: bi,
                geom,
            },
            "conv2d",
        )
    }

    fn spatial(&self, op: &'static str, i: usize) -> Result<(usize, usize, usize)> {
        let s = self.nodes[i].value.shape();
        if s.len() < 3 {
            return Err(shape_mismatch(op, format!("expected ≥3-d tensor, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Ok((self.nodes[i].value.numel() / (h * w).max(1), h, w))
    }

    /// 2×2 max pooling with stride 2.
    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let xi = self.index(input)?;
        let (planes, h, w) = self.spatial("max_pool2d", xi)?;
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(TensorError::OddExtent {
                op: "max_pool2d",
                height: h,
                width: w,
            });
        }
        let (out, argmax) = kernels::maxpool2_forward(self.nodes[xi].value.data(), planes, h, w);
        let mut shape = self.nodes[xi].value.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = h / 2;
        shape[r - 1] = w / 2;
        self.push(
            Tensor::new(shape, out)?,
            Op::MaxPool2 { input: xi, argmax },
            "max_pool2d",
        )
    }

    /// Bilinear upsampling by an integer factor (only 2 is supported), with
    /// half-pixel sample positions.
    pub fn upsample_bilinear(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor != 2 {
            return Err(TensorError::InvalidArgument {
                op: "upsample_bilinear",
                detail: format!("factor must be 2, got {factor}"),
            });
        }
        let xi = self.index(input)?;
        let (planes, h, w) = self.spatial("upsample_bilinear", xi)?;
        let to = (h * factor, w * factor);
        let out = kernels::bilinear_forward(self.nodes[xi].value.data(), planes, (h, w), to);
        let mut shape = self.nodes[xi].value.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = to.0;
        shape[r - 1] = to.1;
        self.push(
            Tensor::new(shape, out)?,
            Op::Upsample {
                input: xi,
                planes,
                from: (h, w),
                to,
            },
            "upsample_bilinear",
        )
    }

    /// Per-channel batch normalization of an `N×C×…` tensor.
    pub fn batch_norm(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
        options: BatchNormOptions,
    ) -> Result<Var> {
        let (xi, si, hi) = (self.index(input)?, self.index(scale)?, self.index(shift)?);
        let shape = self.nodes[xi].value.shape().to_vec();
        if shape.len() < 2 {
            return Err(shape_mismatch("batch_norm", format!("expected N×C×…, got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let plane: usize = shape[2..].iter().product();
        if n * plane == 0 {
            return Err(TensorError::InvalidArgument {
                op: "batch_norm",
                detail: "no elements per channel".into(),
            });
        }
        for (what, idx) in [("scale", si), ("shift", hi)] {
            if self.nodes[idx].value.shape() != [c] {
                return Err(shape_mismatch(
                    "batch_norm",
                    format!("{what} shape {:?} for {c} channels", self.nodes[idx].value.shape()),
                ));
            }
        }
        if stats.channels() != c {
            return Err(shape_mismatch(
                "batch_norm",
                format!("running stats have {} channels, input has {c}", stats.channels()),
            ));
        }
        let eps = options.epsilon;
        let x = self.nodes[xi].value.data();
        let (mean, var, batch_stats) = match mode {
            Mode::Train => {
                let (mean, var) = kernels::channel_moments(x, n, c, plane);
                let count = (n * plane) as f64;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let mom = options.momentum;
                for ch in 0..c {
                    let rm = &mut stats.mean.data_mut()[ch];
                    *rm = t::<T>((1.0 - mom) * rm.as_f64() + mom * mean[ch].as_f64());
                    let rv = &mut stats.var.data_mut()[ch];
                    *rv = t::<T>((1.0 - mom) * rv.as_f64() + mom * var[ch].as_f64() * unbias);
                }
                (mean, var, true)
            }
            Mode::Eval => (stats.mean.data().to_vec(), stats.var.data().to_vec(), false),
        };
        let inv_std: Vec<T> = var.iter().map(|v| t::<T>(1.0 / (v.as_f64() + eps).sqrt())).collect();
        let gamma = self.nodes[si].value.data();
        let beta = self.nodes[hi].value.data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let start = (b * c + ch) * plane;
                for i in start..start + plane {
                    let z = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = z;
                    out[i] = z * gamma[ch] + beta[ch];
                }
            }
        }
        self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                input: xi,
                scale: si,
                shift: hi,
                xhat,
                inv_std,
                batch_stats,
                channels: c,
                plane,
            },
            "batch_norm",
        )
    }

    fn map_unary(&mut self, input: Var, f: impl Fn(T) -> T) -> Result<(usize, Tensor<T>)> {
        let xi = self.index(input)?;
        let x = &self.nodes[xi].value;
        let data = x.data().iter().map(|&v| f(v)).collect();
        Ok((xi, Tensor::new(x.shape().to_vec(), data)?))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let (xi, value) = self.map_unary(input, |v| if v > T::zero() { v } else { T::zero() })?;
        self.push(value, Op::Relu { input: xi }, "relu")
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let (xi, value) = self.map_unary(input, |v| T::one() / (T::one() + (-v).exp()))?;
        self.push(value, Op::Sigmoid { input: xi }, "sigmoid")
    }

    /// Overflow-safe softmax along `axis`.
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let xi = self.index(input)?;
        let shape = self.nodes[xi].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                detail: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let y = kernels::softmax_forward(self.nodes[xi].value.data(), outer, len, inner);
        self.push(
            Tensor::new(shape, y)?,
            Op::Softmax {
                input: xi,
                outer,
                len,
                inner,
            },
            "softmax",
        )
    }

    /// Matrix product of `m×k` and `k×n` operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Product `op(a)·op(b)` where `op` optionally transposes the last two
    /// axes. Operands are both rank 2, or both rank 3 with the same batch.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let sa = self.nodes[ai].value.shape().to_vec();
        let sb = self.nodes[bi].value.shape().to_vec();
        let batched = match (sa.len(), sb.len()) {
            (2, 2) => false,
            (3, 3) if sa[0] == sb[0] => true,
            _ => {
                return Err(shape_mismatch(
                    "matmul",
                    format!("incompatible ranks/batches {sa:?} and {sb:?}"),
                ))
            }
        };
        let off = usize::from(batched);
        let batch = if batched { sa[0] } else { 1 };
        let (m, ka) = if trans_a { (sa[off + 1], sa[off]) } else { (sa[off], sa[off + 1]) };
        let (kb, n) = if trans_b { (sb[off + 1], sb[off]) } else { (sb[off], sb[off + 1]) };
        if ka != kb {
            return Err(shape_mismatch(
                "matmul",
                format!("inner dimensions {ka} and {kb} differ ({sa:?} · {sb:?})"),
            ));
        }
        let k = ka;
        let (a_st, b_st) = (mat_strides(trans_a, m, k), mat_strides(trans_b, k, n));
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.nodes[ai].value.data();
            let bd = self.nodes[bi].value.data();
            for bt in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &ad[bt * m * k..(bt + 1) * m * k],
                    a_st,
                    &bd[bt * k * n..(bt + 1) * k * n],
                    b_st,
                    T::zero(),
                    &mut out[bt * m * n..(bt + 1) * m * n],
                    (n, 1),
                );
            }
        }
        let shape = if batched { vec![batch, m, n] } else { vec![m, n] };
        self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a: ai,
                b: bi,
                trans_a,
                trans_b,
                batch,
                m,
                k,
                n,
            },
            "matmul",
        )
    }

    /// Concatenation along axis 1 of `N×C_a×…` and `N×C_b×…`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let sa = self.nodes[ai].value.shape().to_vec();
        let sb = self.nodes[bi].value.shape().to_vec();
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(shape_mismatch("concat_channels", format!("{sa:?} and {sb:?}")));
        }
        let batch = sa[0];
        let a_len = self.nodes[ai].value.numel() / batch.max(1);
        let b_len = self.nodes[bi].value.numel() / batch.max(1);
        let mut out = Vec::with_capacity(batch * (a_len + b_len));
        for n in 0..batch {
            out.extend_from_slice(&self.nodes[ai].value.data()[n * a_len..(n + 1) * a_len]);
            out.extend_from_slice(&self.nodes[bi].value.data()[n * b_len..(n + 1) * b_len]);
        }
        let mut shape = sa.clone();
        shape[1] = sa[1] + sb[1];
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                a: ai,
                b: bi,
                batch,
                a_len,
                b_len,
            },
            "concat_channels",
        )
    }

    /// Concatenation along axis 0 of `N_a×…` and `N_b×…`.
    pub fn concat_batch(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let sa = self.nodes[ai].value.shape().to_vec();
        let sb = self.nodes[bi].value.shape().to_vec();
        if sa.is_empty() || sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(shape_mismatch("concat_batch", format!("{sa:?} and {sb:?}")));
        }
        let (a_len, b_len) = (self.nodes[ai].value.numel(), self.nodes[bi].value.numel());
        let mut out = Vec::with_capacity(a_len + b_len);
        out.extend_from_slice(self.nodes[ai].value.data());
        out.extend_from_slice(self.nodes[bi].value.data());
        let mut shape = sa;
        shape[0] += sb[0];
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                a: ai,
                b: bi,
                batch: 1,
                a_len,
                b_len,
            },
            "concat_batch",
        )
    }

    /// Samples `start..start + len` along axis 0.
    pub fn batch_slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.index(input)?;
        let shape = self.nodes[xi].value.shape().to_vec();
        if shape.is_empty() || start + len > shape[0] || len == 0 {
            return Err(TensorError::InvalidArgument {
                op: "batch_slice",
                detail: format!("samples {start}..{} of {shape:?}", start + len),
            });
        }
        let sample = self.nodes[xi].value.numel() / shape[0];
        let data = self.nodes[xi].value.data()[start * sample..(start + len) * sample].to_vec();
        let mut out = shape;
        out[0] = len;
        self.push(
            Tensor::new(out, data)?,
            Op::Slice {
                input: xi,
                offset: start * sample,
            },
            "batch_slice",
        )
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(usize, usize, Tensor<T>)> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if va.shape() != vb.shape() {
            return Err(shape_mismatch(op, format!("{:?} and {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ai, bi, Tensor::new(va.shape().to_vec(), data)?))
    }

    /// Elementwise `|a − b|`.
    pub fn abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.zip_same("abs_diff", a, b, |x, y| (x - y).abs())?;
        self.push(v, Op::AbsDiff { a: ai, b: bi }, "abs_diff")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push(v, Op::Sub { a: ai, b: bi }, "sub")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push(v, Op::Add { a: ai, b: bi }, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push(v, Op::Mul { a: ai, b: bi }, "mul")
    }

    /// `gamma · a + b` with `gamma` a one-element (trainable) tensor.
    pub fn add_scaled(&mut self, a: Var, b: Var, gamma: Var) -> Result<Var> {
        let gi = self.index(gamma)?;
        if self.nodes[gi].value.numel() != 1 {
            return Err(shape_mismatch(
                "add_scaled",
                format!("gamma must hold one value, got {:?}", self.nodes[gi].value.shape()),
            ));
        }
        let g = self.nodes[gi].value.data()[0];
        let (ai, bi, v) = self.zip_same("add_scaled", a, b, |x, y| g * x + y)?;
        self.push(v, Op::AddScaled { a: ai, b: bi, gamma: gi }, "add_scaled")
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let (xi, v) = self.map_unary(input, |x| x * factor)?;
        self.push(v, Op::Scale { input: xi, factor }, "scale")
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let xi = self.index(input)?;
        let v = self.nodes[xi].value.clone().reshape(shape)?;
        self.push(v, Op::Reshape { input: xi }, "reshape")
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let xi = self.index(input)?;
        let s = sum_f64(self.nodes[xi].value.data().iter().copied());
        self.push(Tensor::scalar(t(s)), Op::Sum { input: xi }, "sum")
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let xi = self.index(input)?;
        let x = &self.nodes[xi].value;
        let s = sum_f64(x.data().iter().copied()) / x.numel().max(1) as f64;
        self.push(Tensor::scalar(t(s)), Op::Mean { input: xi }, "mean")
    }

    /// Mean over elements of `−(w1·y·log p + w0·(1−y)·log(1−p))` with `p`
    /// clamped to `[delta, 1 − delta]`.
    pub fn weighted_bce(&mut self, input: Var, target: &[T], w0: T, w1: T, delta: T) -> Result<Var> {
        let xi = self.index(input)?;
        let p = &self.nodes[xi].value;
        if target.len() != p.numel() {
            return Err(shape_mismatch(
                "weighted_bce",
                format!("{} targets for prediction shape {:?}", target.len(), p.shape()),
            ));
        }
        let hi = T::one() - delta;
        let total: f64 = p
            .data()
            .iter()
            .zip(target)
            .map(|(&pv, &y)| {
                let pc = pv.max(delta).min(hi).as_f64();
                let y = y.as_f64();
                -(w1.as_f64() * y * pc.ln() + w0.as_f64() * (1.0 - y) * (1.0 - pc).ln())
            })
            .sum();
        let loss = total / p.numel().max(1) as f64;
        self.push(
            Tensor::scalar(t(loss)),
            Op::WeightedBce {
                input: xi,
                target: target.to_vec(),
                w0,
                w1,
                delta,
            },
            "weighted_bce",
        )
    }

    /// Mean over pixels of `−w[c]·log p(c)` for the true class `c` of each
    /// pixel of an `N×C×H×W` distribution; `p` is clamped below at `delta`.
    pub fn weighted_nll(&mut self, input: Var, target: &[usize], weights: &[T], delta: T) -> Result<Var> {
        let xi = self.index(input)?;
        let p = &self.nodes[xi].value;
        let s = p.shape();
        if s.len() < 2 || s[1] != weights.len() {
            return Err(shape_mismatch(
                "weighted_nll",
                format!("prediction {s:?} vs {} class weights", weights.len()),
            ));
        }
        let classes = s[1];
        let plane: usize = s[2..].iter().product();
        if target.len() != s[0] * plane {
            return Err(shape_mismatch(
                "weighted_nll",
                format!("{} targets for prediction {s:?}", target.len()),
            ));
        }
        if let Some(&bad) = target.iter().find(|&&c| c >= classes) {
            return Err(TensorError::InvalidArgument {
                op: "weighted_nll",
                detail: format!("target class {bad} outside 0..{classes}"),
            });
        }
        let data = p.data();
        let mut total = 0.0;
        for (pix, &c) in target.iter().enumerate() {
            let (n, i) = (pix / plane, pix % plane);
            let pv = data[(n * classes + c) * plane + i].max(delta).min(T::one());
            total -= weights[c].as_f64() * pv.as_f64().ln();
        }
        let loss = total / target.len().max(1) as f64;
        self.push(
            Tensor::scalar(t(loss)),
            Op::WeightedNll {
                input: xi,
                target: target.to_vec(),
                weights: weights.to_vec(),
                delta,
                classes,
                plane,
            },
            "weighted_nll",
        )
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Afterwards every trainable leaf
    /// has a gradient (zeros when it does not influence the loss).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.index(loss)?;
        let shape = self.nodes[li].value.shape();
        if self.nodes[li].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        if !self.nodes[li].requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![T::one()]);
        for i in (0..=li).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backward_node(i, &gy, &mut grads);
            }
            grads[i] = Some(gy);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Copies the gradient of `v` into `target`'s gradient buffer (adding to
    /// what is already there).
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor<T>) -> Result<()> {
        match self.grad(v) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }

    fn backward_node(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let wants = |j: usize| self.nodes[j].requires_grad;
        let val = |j: usize| self.nodes[j].value.data();
        let mut acc = |j: usize, delta: Vec<T>| {
            if !self.nodes[j].requires_grad {
                return;
            }
            match &mut grads[j] {
                Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let want = (wants(*input), wants(*weight), bias.is_some_and(wants));
                let g = kernels::conv2d_backward(val(*input), val(*weight), gy, geom, want);
                if let Some(d) = g.input {
                    acc(*input, d);
                }
                if let Some(d) = g.weight {
                    acc(*weight, d);
                }
                if let (Some(b), Some(d)) = (bias, g.bias) {
                    acc(*b, d);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = vec![T::zero(); self.nodes[*input].value.numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += gy[o];
                }
                acc(*input, dx);
            }
            Op::Upsample {
                input,
                planes,
                from,
                to,
            } => acc(*input, kernels::bilinear_backward(gy, *planes, *from, *to)),
            Op::BatchNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats,
                channels,
                plane,
            } => {
                let (c, plane) = (*channels, *plane);
                let n = xhat.len() / (c * plane);
                let gamma = val(*scale);
                let mut dscale = vec![0.0f64; c];
                let mut dshift = vec![0.0f64; c];
                for b in 0..n {
                    for ch in 0..c {
                        let start = (b * c + ch) * plane;
                        for k in start..start + plane {
                            dscale[ch] += (gy[k] * xhat[k]).as_f64();
                            dshift[ch] += gy[k].as_f64();
                        }
                    }
                }
                if wants(*input) {
                    let mut dx = vec![T::zero(); xhat.len()];
                    let m = (n * plane) as f64;
                    for b in 0..n {
                        for ch in 0..c {
                            let start = (b * c + ch) * plane;
                            let k0 = gamma[ch] * inv_std[ch];
                            if *batch_stats {
                                let (ds, dh) = (t::<T>(dscale[ch] / m), t::<T>(dshift[ch] / m));
                                for k in start..start + plane {
                                    dx[k] = k0 * (gy[k] - dh - xhat[k] * ds);
                                }
                            } else {
                                for k in start..start + plane {
                                    dx[k] = k0 * gy[k];
                                }
                            }
                        }
                    }
                    acc(*input, dx);
                }
                acc(*scale, dscale.into_iter().map(t).collect());
                acc(*shift, dshift.into_iter().map(t).collect());
            }
            Op::Relu { input } => {
                let y = node.value.data();
                acc(
                    *input,
                    y.iter()
                        .zip(gy)
                        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
                        .collect(),
                );
            }
            Op::Sigmoid { input } => {
                let y = node.value.data();
                acc(
                    *input,
                    y.iter().zip(gy).map(|(&y, &g)| g * y * (T::one() - y)).collect(),
                );
            }
            Op::Softmax {
                input,
                outer,
                len,
                inner,
            } => acc(
                *input,
                kernels::softmax_backward(node.value.data(), gy, *outer, *len, *inner),
            ),
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let a_st = mat_strides(*trans_a, m, k);
                let b_st = mat_strides(*trans_b, k, n);
                if wants(*a) {
                    let bd = val(*b);
                    let mut da = vec![T::zero(); batch * m * k];
                    for bt in 0..*batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &gy[bt * m * n..(bt + 1) * m * n],
                            (n, 1),
                            &bd[bt * k * n..(bt + 1) * k * n],
                            (b_st.1, b_st.0),
                            T::zero(),
                            &mut da[bt * m * k..(bt + 1) * m * k],
                            a_st,
                        );
                    }
                    acc(*a, da);
                }
                if wants(*b) {
                    let ad = val(*a);
                    let mut db = vec![T::zero(); batch * k * n];
                    for bt in 0..*batch {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &ad[bt * m * k..(bt + 1) * m * k],
                            (a_st.1, a_st.0),
                            &gy[bt * m * n..(bt + 1) * m * n],
                            (n, 1),
                            T::zero(),
                            &mut db[bt * k * n..(bt + 1) * k * n],
                            b_st,
                        );
                    }
                    acc(*b, db);
                }
            }
            Op::Concat {
                a,
                b,
                batch,
                a_len,
                b_len,
            } => {
                let stride = a_len + b_len;
                if wants(*a) {
                    let mut da = Vec::with_capacity(batch * a_len);
                    for s in 0..*batch {
                        da.extend_from_slice(&gy[s * stride..s * stride + a_len]);
                    }
                    acc(*a, da);
                }
                if wants(*b) {
                    let mut db = Vec::with_capacity(batch * b_len);
                    for s in 0..*batch {
                        db.extend_from_slice(&gy[s * stride + a_len..(s + 1) * stride]);
                    }
                    acc(*b, db);
                }
            }
            Op::AbsDiff { a, b } => {
                let sign: Vec<T> = val(*a)
                    .iter()
                    .zip(val(*b))
                    .zip(gy)
                    .map(|((&x, &y), &g)| {
                        if x > y {
                            g
                        } else if x < y {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if wants(*b) {
                    acc(*b, sign.iter().map(|&v| -v).collect());
                }
                acc(*a, sign);
            }
            Op::Sub { a, b } => {
                acc(*a, gy.to_vec());
                acc(*b, gy.iter().map(|&g| -g).collect());
            }
            Op::Add { a, b } => {
                acc(*a, gy.to_vec());
                acc(*b, gy.to_vec());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    acc(*a, gy.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                }
                if wants(*b) {
                    acc(*b, gy.iter().zip(av).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::AddScaled { a, b, gamma } => {
                let g0 = val(*gamma)[0];
                let av = val(*a);
                if wants(*gamma) {
                    let d = sum_f64(av.iter().zip(gy).map(|(&x, &g)| x * g));
                    acc(*gamma, vec![t(d)]);
                }
                if wants(*a) {
                    acc(*a, gy.iter().map(|&g| g * g0).collect());
                }
                acc(*b, gy.to_vec());
            }
            Op::Scale { input, factor } => acc(*input, gy.iter().map(|&g| g * *factor).collect()),
            Op::Reshape { input } => acc(*input, gy.to_vec()),
            Op::Slice { input, offset } => {
                let mut d = vec![T::zero(); self.nodes[*input].value.numel()];
                d[*offset..*offset + gy.len()].copy_from_slice(gy);
                acc(*input, d);
            }
            Op::Sum { input } => acc(*input, vec![gy[0]; self.nodes[*input].value.numel()]),
            Op::Mean { input } => {
                let n = self.nodes[*input].value.numel();
                acc(*input, vec![gy[0] / t(n as f64); n]);
            }
            Op::WeightedBce {
                input,
                target,
                w0,
                w1,
                delta,
            } => {
                let p = val(*input);
                let scale = gy[0] / t(p.len() as f64);
                let hi = T::one() - *delta;
                acc(
                    *input,
                    p.iter()
                        .zip(target)
                        .map(|(&pv, &y)| {
                            if pv < *delta || pv > hi {
                                T::zero()
                            } else {
                                -(*w1 * y / pv - *w0 * (T::one() - y) / (T::one() - pv)) * scale
                            }
                        })
                        .collect(),
                );
            }
            Op::WeightedNll {
                input,
                target,
                weights,
                delta,
                classes,
                plane,
            } => {
                let p = val(*input);
                let scale = gy[0] / t(target.len() as f64);
                let mut dp = vec![T::zero(); p.len()];
                for (pix, &c) in target.iter().enumerate() {
                    let (n, k) = (pix / plane, pix % plane);
                    let at = (n * classes + c) * plane + k;
                    if p[at] >= *delta {
                        dp[at] = -weights[c] / p[at] * scale;
                    }
                }
                acc(*input, dp);
            }
        }
    }
}

/// Row/column strides of the logical `rows×cols` view of a row-major matrix
/// that is stored either as-is or transposed.
fn mat_strides(transposed: bool, rows: usize, cols: usize) -> (usize, usize) {
    if transposed {
        (1, rows)
    } else {
        (cols, 1)
    }
}
