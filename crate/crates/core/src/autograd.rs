//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Tape`] owns every value computed during one forward pass. Operations
//! append nodes in execution order, so node order is a topological order and
//! the backward pass is a single reverse sweep. Tapes are single-owner units;
//! independent tapes share nothing and may live on different threads.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{gemm, numel, pad4, Element, Tensor, MAX_RANK};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Stride, zero padding and dilation of a 2-D convolution, as (rows, cols).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
        }
    }
}

impl ConvGeometry {
    pub fn padded(padding: (usize, usize)) -> Self {
        Self {
            padding,
            ..Self::default()
        }
    }

    pub fn with_dilation(mut self, dilation: (usize, usize)) -> Self {
        self.dilation = dilation;
        self
    }

    /// Output extents for an `input` map and `kernel` window, or `None` when
    /// the dilated kernel does not fit inside the padded input.
    pub fn output_extent(
        &self,
        input: (usize, usize),
        kernel: (usize, usize),
    ) -> Option<(usize, usize)> {
        let axis = |len: usize, k: usize, s: usize, p: usize, d: usize| {
            let footprint = d * (k - 1) + 1;
            let padded = len + 2 * p;
            (k > 0 && s > 0 && d > 0 && footprint <= padded).then(|| (padded - footprint) / s + 1)
        };
        Some((
            axis(input.0, kernel.0, self.stride.0, self.padding.0, self.dilation.0)?,
            axis(input.1, kernel.1, self.stride.1, self.padding.1, self.dilation.1)?,
        ))
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryOp,
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    AddScalar {
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Activation {
        kind: Activation,
        x: Var,
    },
    Reduce {
        kind: ReduceKind,
        x: Var,
        axes: [bool; MAX_RANK],
        argmax: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Transpose {
        x: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geometry: ConvGeometry,
        cols: Vec<T>,
    },
    Pool2d {
        kind: PoolKind,
        x: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
        argmax: Vec<usize>,
    },
    Upsample2x {
        x: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradients produced by one backward pass, indexed by the tape's leaves.
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u32,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for a leaf created with `requires_grad`; `None` for anything
    /// else or for a variable from another tape.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index()).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.index()).and_then(|g| g.take())
    }
}

#[derive(Debug)]
pub struct Tape<T> {
    id: u32,
    seed: u64,
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    pub fn with_seed(seed: u64) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            seed,
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.tape != self.id || var.index() >= self.nodes.len() {
            return Err(Error::DetachedGraph);
        }
        Ok(())
    }

    fn node(&self, var: Var) -> &Node<T> {
        &self.nodes[var.index()]
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        assert_eq!(var.tape, self.id, "variable from another tape");
        &self.node(var).value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.node(var).requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let index = u32::try_from(self.nodes.len()).expect("tape overflow");
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var {
            tape: self.id,
            index,
        })
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn parameter(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    // ---------------------------------------------------------------- elementwise

    /// `a (op) b` where `b` either matches `a` or has extent 1 along every
    /// axis where they differ. The result has `a`'s shape.
    pub fn elementwise(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let av = &self.node(a).value;
        let bv = &self.node(b).value;
        let op_name = match kind {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        };
        let map = BroadcastMap::new(op_name, av.shape(), bv.shape())?;
        let f = |x: T, y: T| match kind {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
        };
        let (ad, bd) = (av.data(), bv.data());
        let mut out = Vec::with_capacity(ad.len());
        if map.identical {
            out.extend(ad.iter().zip(bd).map(|(&x, &y)| f(x, y)));
        } else {
            map.for_each(|ia, ib| {
                debug_assert_eq!(ia, out.len());
                out.push(f(ad[ia], bd[ib]));
            });
        }
        let value = Tensor::from_vec(av.shape(), out)?;
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        self.push(op_name, value, Op::Binary { kind, a, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        self.check(x)?;
        let node = self.node(x);
        let data = node.value.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::from_vec(node.value.shape(), data)?;
        let rg = node.requires_grad;
        self.push("scale", value, Op::Scale { x, factor }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.check(x)?;
        let node = self.node(x);
        let data = node.value.data().iter().map(|&v| v + c).collect();
        let value = Tensor::from_vec(node.value.shape(), data)?;
        let rg = node.requires_grad;
        self.push("add_scalar", value, Op::AddScalar { x }, rg)
    }

    // ---------------------------------------------------------------- matmul

    /// Matrix product of `M×K` and `K×N` operands, or a batched product of
    /// `B×M×K` and `B×K×N`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        let dims = matmul_dims(av.shape(), bv.shape())?;
        let (batch, m, k, n) = dims;
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                T::one(),
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                false,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let shape: Vec<usize> = if av.rank() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let value = Tensor::from_vec(&shape, out)?;
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        self.push("matmul", value, Op::MatMul { a, b }, rg)
    }

    // ---------------------------------------------------------------- softmax

    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let xv = &self.node(x).value;
        if axis >= xv.rank() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for shape {:?}", xv.shape()),
            ));
        }
        if !xv.is_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let value = Tensor::from_vec(xv.shape(), out)?;
        let rg = self.node(x).requires_grad;
        self.push("softmax", value, Op::Softmax { x, axis }, rg)
    }

    // ---------------------------------------------------------------- activations

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        self.check(x)?;
        let node = self.node(x);
        let data = node
            .value
            .data()
            .iter()
            .map(|&v| match kind {
                Activation::Relu => v.max(T::zero()),
                Activation::Sigmoid => T::one() / (T::one() + (-v).exp()),
            })
            .collect();
        let value = Tensor::from_vec(node.value.shape(), data)?;
        let rg = node.requires_grad;
        let name = match kind {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        };
        self.push(name, value, Op::Activation { kind, x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    // ---------------------------------------------------------------- reductions

    /// Reduce over `axes`, keeping each reduced axis with extent 1. Max picks
    /// the first maximiser in row-major order.
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axes: &[usize]) -> Result<Var> {
        self.check(x)?;
        let xv = &self.node(x).value;
        let rank = xv.rank();
        if axes.is_empty() {
            return Err(Error::invalid("reduce", "empty reduction set"));
        }
        let off = MAX_RANK - rank;
        let mut mask = [false; MAX_RANK];
        for &ax in axes {
            if ax >= rank || mask[ax + off] {
                return Err(Error::invalid(
                    "reduce",
                    format!("axes {axes:?} invalid for shape {:?}", xv.shape()),
                ));
            }
            mask[ax + off] = true;
        }
        let in4 = xv.shape4();
        let mut out4 = in4;
        for d in 0..MAX_RANK {
            if mask[d] {
                out4[d] = 1;
            }
        }
        let ostrides = reduced_strides(&out4, &mask);
        let n_out = numel(&out4);
        let src = xv.data();
        let mut out = vec![
            match kind {
                ReduceKind::Max => T::neg_infinity(),
                _ => T::zero(),
            };
            n_out
        ];
        let mut argmax = Vec::new();
        if kind == ReduceKind::Max {
            argmax = vec![usize::MAX; n_out];
        }
        for_each_index4(&in4, |flat, idx| {
            let o = dot4(&idx, &ostrides);
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => out[o] += src[flat],
                ReduceKind::Max => {
                    if argmax[o] == usize::MAX || src[flat] > out[o] {
                        out[o] = src[flat];
                        argmax[o] = flat;
                    }
                }
            }
        });
        if kind == ReduceKind::Mean {
            let count = T::from_usize(src.len() / n_out);
            for v in &mut out {
                *v = *v / count;
            }
        }
        let shape: Vec<usize> = out4[off..].to_vec();
        let value = Tensor::from_vec(&shape, out)?;
        let rg = self.node(x).requires_grad;
        let name = match kind {
            ReduceKind::Sum => "sum",
            ReduceKind::Mean => "mean",
            ReduceKind::Max => "max",
        };
        self.push(
            name,
            value,
            Op::Reduce {
                kind,
                x,
                axes: mask,
                argmax,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, axes)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Mean, x, axes)
    }

    pub fn max(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Max, x, axes)
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        let s = self.sum(x, &(0..rank).collect::<Vec<_>>())?;
        self.reshape(s, &[1])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        let s = self.mean(x, &(0..rank).collect::<Vec<_>>())?;
        self.reshape(s, &[1])
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let xv = &self.node(x).value;
        if numel(shape) != xv.len() || shape.is_empty() || shape.len() > MAX_RANK {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: xv.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = xv.clone().with_shape(shape);
        let rg = self.node(x).requires_grad;
        self.push("reshape", value, Op::Reshape { x }, rg)
    }

    /// Swap the last two axes; leading axes are treated as a batch.
    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = &self.node(x).value;
        let rank = xv.rank();
        if rank < 2 {
            return Err(Error::invalid(
                "transpose2d",
                format!("needs rank >= 2, got shape {:?}", xv.shape()),
            ));
        }
        let (r, c) = (xv.shape()[rank - 2], xv.shape()[rank - 1]);
        let data = transpose_batched(xv.data(), r, c);
        let mut shape = xv.shape().to_vec();
        shape.swap(rank - 2, rank - 1);
        let value = Tensor::from_vec(&shape, data)?;
        let rg = self.node(x).requires_grad;
        self.push("transpose2d", value, Op::Transpose { x }, rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        for &v in inputs {
            self.check(v)?;
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for shape {base:?}"),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ragged = s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b);
            if ragged {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let vv = self.value(v);
                let chunk = vv.shape()[axis] * inner;
                out.extend_from_slice(&vv.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::from_vec(&shape, out)?;
        let rg = inputs.iter().any(|&v| self.node(v).requires_grad);
        self.push(
            "concat",
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    // ---------------------------------------------------------------- spatial

    /// Cross-correlation of `x: N×Cin×H×W` with `weight: Cout×Cin×k1×k2`,
    /// zero-padded, plus an optional per-channel `bias: Cout`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geometry: ConvGeometry,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(weight)?;
        if let Some(b) = bias {
            self.check(b)?;
        }
        let xv = &self.node(x).value;
        let wv = &self.node(weight).value;
        if xv.rank() != 4 || wv.rank() != 4 {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "expects 4-d input and weight, got {:?} and {:?}",
                    xv.shape(),
                    wv.shape()
                ),
            ));
        }
        let [n, cin, h, w] = xv.shape4();
        let [cout, wcin, k1, k2] = wv.shape4();
        if wcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![cout],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let (ho, wo) = geometry.output_extent((h, w), (k1, k2)).ok_or_else(|| {
            Error::invalid(
                "conv2d",
                format!(
                    "kernel {k1}x{k2} with {geometry:?} does not fit input {h}x{w}"
                ),
            )
        })?;
        let g = ConvShape {
            cin,
            h,
            w,
            k1,
            k2,
            ho,
            wo,
            geometry,
        };
        let rows = cin * k1 * k2;
        let plane = ho * wo;
        let mut col = vec![T::zero(); rows * plane];
        let keep_cols = self.node(weight).requires_grad;
        let mut cols = Vec::new();
        let mut out = vec![T::zero(); n * cout * plane];
        let bias_data = bias.map(|b| self.value(b).data().to_vec());
        for i in 0..n {
            let xs = &xv.data()[i * cin * h * w..(i + 1) * cin * h * w];
            im2col(xs, &g, &mut col);
            let os = &mut out[i * cout * plane..(i + 1) * cout * plane];
            if let Some(bd) = &bias_data {
                for (co, chunk) in os.chunks_mut(plane).enumerate() {
                    chunk.fill(bd[co]);
                }
            }
            let beta = if bias_data.is_some() { T::one() } else { T::zero() };
            gemm(cout, rows, plane, T::one(), wv.data(), false, &col, false, beta, os);
            if keep_cols {
                cols.extend_from_slice(&col);
            }
        }
        let value = Tensor::from_vec(&[n, cout, ho, wo], out)?;
        let rg = self.node(x).requires_grad
            || self.node(weight).requires_grad
            || bias.is_some_and(|b| self.node(b).requires_grad);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                x,
                weight,
                bias,
                geometry,
                cols,
            },
            rg,
        )
    }

    /// Windowed max or average pooling without padding.
    pub fn pool2d(
        &mut self,
        kind: PoolKind,
        x: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        self.check(x)?;
        let xv = &self.node(x).value;
        if xv.rank() != 4 {
            return Err(Error::invalid(
                "pool2d",
                format!("expects 4-d input, got {:?}", xv.shape()),
            ));
        }
        let [n, c, h, w] = xv.shape4();
        if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::invalid("pool2d", "kernel and stride must be positive"));
        }
        if kernel.0 > h || kernel.1 > w {
            return Err(Error::invalid(
                "pool2d",
                format!(
                    "kernel {}x{} larger than input {h}x{w}",
                    kernel.0, kernel.1
                ),
            ));
        }
        let ho = (h - kernel.0) / stride.0 + 1;
        let wo = (w - kernel.1) / stride.1 + 1;
        let src = xv.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::new();
        let area = T::from_usize(kernel.0 * kernel.1);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let (y0, x0) = (oy * stride.0, ox * stride.1);
                    match kind {
                        PoolKind::Max => {
                            let mut best = base + y0 * w + x0;
                            for ky in 0..kernel.0 {
                                for kx in 0..kernel.1 {
                                    let at = base + (y0 + ky) * w + x0 + kx;
                                    if src[at] > src[best] {
                                        best = at;
                                    }
                                }
                            }
                            out.push(src[best]);
                            argmax.push(best);
                        }
                        PoolKind::Avg => {
                            let mut acc = T::zero();
                            for ky in 0..kernel.0 {
                                let row = base + (y0 + ky) * w + x0;
                                for kx in 0..kernel.1 {
                                    acc += src[row + kx];
                                }
                            }
                            out.push(acc / area);
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], out)?;
        let rg = self.node(x).requires_grad;
        let name = match kind {
            PoolKind::Max => "maxpool2d",
            PoolKind::Avg => "avgpool2d",
        };
        self.push(
            name,
            value,
            Op::Pool2d {
                kind,
                x,
                kernel,
                stride,
                argmax,
            },
            rg,
        )
    }

    /// Nearest-neighbour 2× upsampling of an `N×C×H×W` map.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = &self.node(x).value;
        if xv.rank() != 4 {
            return Err(Error::invalid(
                "upsample2x",
                format!("expects 4-d input, got {:?}", xv.shape()),
            ));
        }
        let [n, c, h, w] = xv.shape4();
        let src = xv.data();
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for plane in 0..n * c {
            for y in 0..2 * h {
                let srow = &src[plane * h * w + (y / 2) * w..][..w];
                let drow = &mut out[plane * 4 * h * w + y * 2 * w..][..2 * w];
                for (x, v) in srow.iter().enumerate() {
                    drow[2 * x] = *v;
                    drow[2 * x + 1] = *v;
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, 2 * h, 2 * w], out)?;
        let rg = self.node(x).requires_grad;
        self.push("upsample2x", value, Op::Upsample2x { x }, rg)
    }

    // ---------------------------------------------------------------- backward

    pub fn reset_backward(&mut self) {
        self.backward_done = false;
    }

    /// Back-propagate from a one-element `loss`. Every leaf created with
    /// `requires_grad` receives a gradient (zeros if `loss` does not depend
    /// on it). A second call without [`Tape::reset_backward`] is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let loss_shape = self.node(loss).value.shape().to_vec();
        if numel(&loss_shape) != 1 {
            return Err(Error::NotScalar(loss_shape));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.node(loss).requires_grad {
            grads[loss.index()] = Some(Tensor::ones(&loss_shape));
        }
        for idx in (0..=loss.index()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            let is_grad_leaf = node.requires_grad && matches!(node.op, Op::Leaf);
            if !is_grad_leaf {
                grads[idx] = None;
            } else if grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (av, bv) = (&self.node(*a).value, &self.node(*b).value);
                let map = BroadcastMap::new("backward", av.shape(), bv.shape())
                    .expect("shapes validated in forward");
                let gd = g.data();
                if self.wants(*a) {
                    let ga = match kind {
                        BinaryOp::Add | BinaryOp::Sub => g.clone(),
                        BinaryOp::Mul => {
                            let bd = bv.data();
                            let mut out = Vec::with_capacity(gd.len());
                            map.for_each(|ia, ib| out.push(gd[ia] * bd[ib]));
                            Tensor::from_vec(av.shape(), out).expect("shape")
                        }
                    };
                    accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); bv.len()];
                    let ad = av.data();
                    map.for_each(|ia, ib| match kind {
                        BinaryOp::Add => gb[ib] += gd[ia],
                        BinaryOp::Sub => gb[ib] -= gd[ia],
                        BinaryOp::Mul => gb[ib] += gd[ia] * ad[ia],
                    });
                    accumulate(grads, *b, Tensor::from_vec(bv.shape(), gb).expect("shape"));
                }
            }
            Op::Scale { x, factor } => {
                let data = g.data().iter().map(|&v| v * *factor).collect();
                accumulate(grads, *x, Tensor::from_vec(g.shape(), data).expect("shape"));
            }
            Op::AddScalar { x } => accumulate(grads, *x, g.clone()),
            Op::MatMul { a, b } => {
                let (av, bv) = (&self.node(*a).value, &self.node(*b).value);
                let (batch, m, k, n) = matmul_dims(av.shape(), bv.shape()).expect("validated");
                let gd = g.data();
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &gd[i * m * n..][..m * n],
                            false,
                            &bv.data()[i * k * n..][..k * n],
                            true,
                            T::zero(),
                            &mut ga[i * m * k..][..m * k],
                        );
                    }
                    accumulate(grads, *a, Tensor::from_vec(av.shape(), ga).expect("shape"));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &av.data()[i * m * k..][..m * k],
                            true,
                            &gd[i * m * n..][..m * n],
                            false,
                            T::zero(),
                            &mut gb[i * k * n..][..k * n],
                        );
                    }
                    accumulate(grads, *b, Tensor::from_vec(bv.shape(), gb).expect("shape"));
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let gd = g.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: T = (0..len).map(|j| gd[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(g.shape(), gx).expect("shape"));
            }
            Op::Activation { kind, x } => {
                let gd = g.data();
                let gx: Vec<T> = match kind {
                    Activation::Relu => self
                        .node(*x)
                        .value
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                        .collect(),
                    Activation::Sigmoid => node
                        .value
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&y, &gv)| gv * y * (T::one() - y))
                        .collect(),
                };
                accumulate(grads, *x, Tensor::from_vec(g.shape(), gx).expect("shape"));
            }
            Op::Reduce {
                kind,
                x,
                axes,
                argmax,
            } => {
                let xv = &self.node(*x).value;
                let gd = g.data();
                let mut gx = vec![T::zero(); xv.len()];
                match kind {
                    ReduceKind::Max => {
                        for (o, &src) in argmax.iter().enumerate() {
                            gx[src] += gd[o];
                        }
                    }
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let scale = if *kind == ReduceKind::Mean {
                            T::one() / T::from_usize(xv.len() / g.len())
                        } else {
                            T::one()
                        };
                        let in4 = xv.shape4();
                        let ostrides = reduced_strides(&pad4(g.shape()), axes);
                        for_each_index4(&in4, |flat, idx| {
                            gx[flat] = gd[dot4(&idx, &ostrides)] * scale;
                        });
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), gx).expect("shape"));
            }
            Op::Reshape { x } => {
                let shape = self.node(*x).value.shape().to_vec();
                accumulate(grads, *x, g.clone().with_shape(&shape));
            }
            Op::Transpose { x } => {
                let s = g.shape();
                let r = s.len();
                let data = transpose_batched(g.data(), s[r -2], s[r - 1]);
                let shape = self.node(*x).value.shape().to_vec();
                accumulate(grads, *x, Tensor::from_vec(&shape, data).expect("shape"));
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(g.shape(), *axis);
                let mut parts: Vec<Vec<T>> = inputs
                    .iter()
                    .map(|&v| Vec::with_capacity(self.value(v).len()))
                    .collect();
                let gd = g.data();
                let mut cursor = 0;
                for _ in 0..outer {
                    for (p, &v) in parts.iter_mut().zip(inputs) {
                        let chunk = self.value(v).shape()[*axis] * inner;
                        p.extend_from_slice(&gd[cursor..cursor + chunk]);
                        cursor += chunk;
                    }
                }
                for (p, &v) in parts.into_iter().zip(inputs) {
                    if self.wants(v) {
                        let shape = self.value(v).shape().to_vec();
                        accumulate(grads, v, Tensor::from_vec(&shape, p).expect("shape"));
                    }
                }
            }
            Op::Conv2d {
                x,
                weight,
                bias,
                geometry,
                cols,
            } => self.backward_conv(g, *x, *weight, *bias, *geometry, cols, grads),
            Op::Pool2d {
                kind,
                x,
                kernel,
                stride,
                argmax,
            } => {
                let xv = &self.node(*x).value;
                let gd = g.data();
                let mut gx = vec![T::zero(); xv.len()];
                match kind {
                    PoolKind::Max => {
                        for (o, &src) in argmax.iter().enumerate() {
                            gx[src] += gd[o];
                        }
                    }
                    PoolKind::Avg => {
                        let [_, _, h, w] = xv.shape4();
                        let [n, c, ho, wo] = g.shape4();
                        let area = T::from_usize(kernel.0 * kernel.1);
                        for plane in 0..n * c {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let gv = gd[(plane * ho + oy) * wo + ox] / area;
                                    for ky in 0..kernel.0 {
                                        let row = plane * h * w + (oy * stride.0 + ky) * w;
                                        for kx in 0..kernel.1 {
                                            gx[row + ox * stride.1 + kx] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), gx).expect("shape"));
            }
            Op::Upsample2x { x } => {
                let xv = &self.node(*x).value;
                let [n, c, h, w] = xv.shape4();
                let gd = g.data();
                let mut gx = vec![T::zero(); xv.len()];
                for plane in 0..n * c {
                    for y in 0..2 * h {
                        let grow = &gd[plane * 4 * h * w + y * 2 * w..][..2 * w];
                        let xrow = &mut gx[plane * h * w + (y / 2) * w..][..w];
                        for (xi, acc) in xrow.iter_mut().enumerate() {
                            *acc += grow[2 * xi] + grow[2 * xi + 1];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), gx).expect("shape"));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv(
        &self,
        g: &Tensor<T>,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geometry: ConvGeometry,
        cols: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xv = &self.node(x).value;
        let wv = &self.node(weight).value;
        let [n, cin, h, w] = xv.shape4();
        let [cout, _, k1, k2] = wv.shape4();
        let [_, _, ho, wo] = g.shape4();
        let plane = ho * wo;
        let rows = cin * k1 * k2;
        let gd = g.data();

        if let Some(b) = bias.filter(|&b| self.wants(b)) {
            let mut gb = vec![T::zero(); cout];
            for i in 0..n {
                for (co, acc) in gb.iter_mut().enumerate() {
                    *acc += gd[(i * cout + co) * plane..][..plane].iter().copied().sum();
                }
            }
            accumulate(grads, b, Tensor::from_vec(&[cout], gb).expect("shape"));
        }
        if self.wants(weight) {
            let mut gw = vec![T::zero(); wv.len()];
            for i in 0..n {
                gemm(
                    cout,
                    plane,
                    rows,
                    T::one(),
                    &gd[i * cout * plane..][..cout * plane],
                    false,
                    &cols[i * rows * plane..][..rows * plane],
                    true,
                    T::one(),
                    &mut gw,
                );
            }
            accumulate(grads, weight, Tensor::from_vec(wv.shape(), gw).expect("shape"));
        }
        if self.wants(x) {
            let shape = ConvShape {
                cin,
                h,
                w,
                k1,
                k2,
                ho,
                wo,
                geometry,
            };
            let mut dcol = vec![T::zero(); rows * plane];
            let mut gx = vec![T::zero(); xv.len()];
            for i in 0..n {
                gemm(
                    rows,
                    cout,
                    plane,
                    T::one(),
                    wv.data(),
                    true,
                    &gd[i * cout * plane..][..cout * plane],
                    false,
                    T::zero(),
                    &mut dcol,
                );
                col2im(&dcol, &shape, &mut gx[i * cin * h * w..][..cin * h * w]);
            }
            accumulate(grads, x, Tensor::from_vec(xv.shape(), gx).expect("shape"));
        }
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) {
    match &mut grads[var.index()] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

// -------------------------------------------------------------------- helpers

/// Index mapping from an output of shape `a` to a broadcast operand `b`.
struct BroadcastMap {
    a4: [usize; MAX_RANK],
    bstrides: [usize; MAX_RANK],
    identical: bool,
}

impl BroadcastMap {
    fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if b.len() > a.len() {
            return Err(mismatch());
        }
        let (a4, b4) = (pad4(a), pad4(b));
        let mut bstrides = [0; MAX_RANK];
        let mut stride = 1;
        for d in (0..MAX_RANK).rev() {
            if b4[d] == a4[d] {
                bstrides[d] = if b4[d] == 1 { 0 } else { stride };
            } else if b4[d] == 1 {
                bstrides[d] = 0;
            } else {
                return Err(mismatch());
            }
            stride *= b4[d];
        }
        Ok(Self {
            a4,
            bstrides,
            identical: a4 == b4,
        })
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        for_each_index4(&self.a4, |flat, idx| f(flat, dot4(&idx, &self.bstrides)));
    }
}

fn for_each_index4(shape: &[usize; MAX_RANK], mut f: impl FnMut(usize, [usize; MAX_RANK])) {
    let mut flat = 0;
    for i0 in 0..shape[0] {
        for i1 in 0..shape[1] {
            for i2 in 0..shape[2] {
                for i3 in 0..shape[3] {
                    f(flat, [i0, i1, i2, i3]);
                    flat += 1;
                }
            }
        }
    }
}

fn dot4(idx: &[usize; MAX_RANK], strides: &[usize; MAX_RANK]) -> usize {
    idx.iter().zip(strides).map(|(i, s)| i * s).sum()
}

/// Row-major strides of the reduced shape, zero along reduced axes.
fn reduced_strides(out4: &[usize; MAX_RANK], mask: &[bool; MAX_RANK]) -> [usize; MAX_RANK] {
    let mut strides = [0; MAX_RANK];
    let mut stride = 1;
    for d in (0..MAX_RANK).rev() {
        strides[d] = if mask[d] { 0 } else { stride };
        stride *= out4[d];
    }
    strides
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn transpose_batched<T: Copy>(src: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for m in src.chunks(r * c) {
        for j in 0..c {
            for i in 0..r {
                out.push(m[i * c + j]);
            }
        }
    }
    out
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Ok((1, *m, *k, *n)),
        ([ba, m, k], [bb, k2, n]) if ba == bb && k == k2 => Ok((*ba, *m, *k, *n)),
        _ => Err(mismatch()),
    }
}

struct ConvShape {
    cin: usize,
    h: usize,
    w: usize,
    k1: usize,
    k2: usize,
    ho: usize,
    wo: usize,
    geometry: ConvGeometry,
}

impl ConvShape {
    /// Input coordinate read by output position `o` through kernel tap `k`
    /// along one axis, or `None` when it falls in the zero padding.
    #[inline]
    fn source(o: usize, k: usize, s: usize, d: usize, p: usize, len: usize) -> Option<usize> {
        (o * s + k * d).checked_sub(p).filter(|&i| i < len)
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvShape, col: &mut [T]) {
    let ConvGeometry {
        stride: (sh, sw),
        padding: (ph, pw),
        dilation: (dh, dw),
    } = g.geometry;
    let plane = g.ho * g.wo;
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.k1 {
            for kj in 0..g.k2 {
                let dst = &mut col[row * plane..][..plane];
                for oy in 0..g.ho {
                    let drow = &mut dst[oy * g.wo..][..g.wo];
                    match ConvShape::source(oy, ki, sh, dh, ph, g.h) {
                        None => drow.fill(T::zero()),
                        Some(iy) => {
                            let srow = &xc[iy * g.w..][..g.w];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                *d = match ConvShape::source(ox, kj, sw, dw, pw, g.w) {
                                    Some(ix) => srow[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Element>(col: &[T], g: &ConvShape, gx: &mut [T]) {
    let ConvGeometry {
        stride: (sh, sw),
        padding: (ph, pw),
        dilation: (dh, dw),
    } = g.geometry;
    let plane = g.ho * g.wo;
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &mut gx[ci * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.k1 {
            for kj in 0..g.k2 {
                let src = &col[row * plane..][..plane];
                for oy in 0..g.ho {
                    if let Some(iy) = ConvShape::source(oy, ki, sh, dh, ph, g.h) {
                        let srow = &src[oy * g.wo..][..g.wo];
                        let drow = &mut xc[iy * g.w..][..g.w];
                        for (ox, &v) in srow.iter().enumerate() {
                            if let Some(ix) = ConvShape::source(ox, kj, sw, dw, pw, g.w) {
                                drow[ix] += v;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}
