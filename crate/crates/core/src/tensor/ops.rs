//! Forward primitives. Each op computes its value eagerly and records a node
//! when any operand is attached to a graph.

use std::rc::Rc;

use super::array::{self, Array, PAD};
use super::{Graph, Input, Op, Tensor};
use crate::error::{Error, Result};

fn record(op: Op, operands: &[&Tensor], value: Array) -> Result<Tensor> {
    let mut graph: Option<&Graph> = None;
    for t in operands {
        if let Some(node) = &t.node {
            match graph {
                None => graph = Some(&node.graph),
                Some(g) if g.same(&node.graph) => {}
                Some(_) => {
                    return Err(Error::InvalidArgument(
                        "operands belong to different graphs".into(),
                    ))
                }
            }
        }
    }
    Ok(match graph {
        Some(g) => {
            let inputs: Vec<Input> = operands.iter().map(|t| t.as_input()).collect();
            g.push(op, inputs, Rc::new(value))
        }
        None => Tensor::constant(value),
    })
}

/// Records an op that cannot fail.
fn record_ok(op: Op, operands: &[&Tensor], value: Array) -> Tensor {
    // Unary ops have a single operand, so there is no graph to conflict with.
    record(op, operands, value).expect("unary op cannot mix graphs")
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let v = array::zip_broadcast("add", &self.value, &other.value, |a, b| a + b)?;
        record(Op::Add, &[self, other], v)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let v = array::zip_broadcast("sub", &self.value, &other.value, |a, b| a - b)?;
        record(Op::Sub, &[self, other], v)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let v = array::zip_broadcast("mul", &self.value, &other.value, |a, b| a * b)?;
        record(Op::Mul, &[self, other], v)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let v = array::zip_broadcast("div", &self.value, &other.value, |a, b| a / b)?;
        record(Op::Div, &[self, other], v)
    }

    pub fn neg(&self) -> Tensor {
        record_ok(Op::Neg, &[self], self.value.map(|a| -a))
    }

    pub fn scale(&self, k: f64) -> Tensor {
        record_ok(Op::Scale(k), &[self], self.value.map(|a| a * k))
    }

    pub fn add_scalar(&self, k: f64) -> Tensor {
        self.add(&Tensor::scalar(k))
            .expect("scalar broadcasts to any shape")
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let v = array::matmul(&self.value, &other.value)?;
        record(Op::MatMul, &[self, other], v)
    }

    pub fn relu(&self) -> Tensor {
        record_ok(
            Op::Relu,
            &[self],
            self.value.map(|a| if a < 0.0 { 0.0 } else { a }),
        )
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let v = array::softmax(&self.value, axis)?;
        record(Op::Softmax(axis), &[self], v)
    }

    pub fn log(&self) -> Tensor {
        record_ok(Op::Log, &[self], self.value.map(f64::ln))
    }

    pub fn exp(&self) -> Tensor {
        record_ok(Op::Exp, &[self], self.value.map(f64::exp))
    }

    pub fn abs(&self) -> Tensor {
        record_ok(Op::Abs, &[self], self.value.map(f64::abs))
    }

    pub fn sqrt(&self) -> Tensor {
        record_ok(Op::Sqrt, &[self], self.value.map(f64::sqrt))
    }

    /// `max(x, floor)` elementwise; the gradient is zero where the floor is active.
    pub fn clamp_min(&self, floor: f64) -> Tensor {
        record_ok(
            Op::ClampMin(floor),
            &[self],
            self.value.map(|a| if a < floor { floor } else { a }),
        )
    }

    /// Natural log of `max(x, floor)`.
    pub fn log_clamped(&self, floor: f64) -> Tensor {
        self.clamp_min(floor).log()
    }

    pub fn sum(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let v = array::sum_axis(&self.value, axis, keepdim)?;
        record(Op::Sum { axis, keepdim }, &[self], v)
    }

    pub fn sum_all(&self) -> Tensor {
        let total = self.value.data().iter().sum();
        record_ok(Op::SumAll, &[self], Array::scalar(total))
    }

    pub fn mean(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let n = *self.shape().get(axis).ok_or_else(|| {
            Error::shape(
                "mean",
                format!("axis {axis} out of range for {:?}", self.shape()),
            )
        })?;
        Ok(self.sum(axis, keepdim)?.scale(1.0 / n as f64))
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.value.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let v = self.value.reshape(shape)?;
        record(Op::Reshape, &[self], v)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let v = array::permute(&self.value, perm)?;
        record(Op::Permute(perm.to_vec()), &[self], v)
    }

    /// Transpose of a rank-2 tensor.
    pub fn t(&self) -> Result<Tensor> {
        if self.value.rank() != 2 {
            return Err(Error::shape(
                "transpose",
                format!("expected rank 2, got {:?}", self.shape()),
            ));
        }
        self.permute(&[1, 0])
    }

    /// Broadcasts to a larger shape.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let v = array::expand(&self.value, shape)?;
        record(Op::Expand, &[self], v)
    }

    /// Sums broadcast axes away so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        if shape.is_empty() {
            return Ok(self.sum_all());
        }
        let mut t = self.clone();
        while t.shape().len() > shape.len() {
            t = t.sum(0, false)?;
        }
        for axis in 0..shape.len() {
            if shape[axis] == 1 && t.shape()[axis] != 1 {
                t = t.sum(axis, true)?;
            }
        }
        if t.shape() != shape {
            return Err(Error::shape(
                "sum_to",
                format!("{:?} is not a broadcast of {shape:?}", self.shape()),
            ));
        }
        Ok(t)
    }

    /// `out[i] = self.flat[index[i]]`, with [`PAD`] entries reading as zero.
    pub fn gather(&self, index: Rc<[usize]>, out_shape: &[usize]) -> Result<Tensor> {
        let n = self.value.numel();
        if out_shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape(
                "gather",
                "index length does not match output shape",
            ));
        }
        if let Some(&bad) = index.iter().find(|&&j| j != PAD && j >= n) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range for {n} values"),
            ));
        }
        let v = array::gather(&self.value, &index, out_shape);
        record(Op::Gather(index), &[self], v)
    }

    /// Adjoint of [`Tensor::gather`]: accumulates values into a zero tensor of `out_shape`.
    pub fn scatter_add(&self, index: Rc<[usize]>, out_shape: &[usize]) -> Result<Tensor> {
        let n: usize = out_shape.iter().product();
        if index.len() != self.value.numel() {
            return Err(Error::shape(
                "scatter_add",
                "index length does not match input",
            ));
        }
        if let Some(&bad) = index.iter().find(|&&j| j != PAD && j >= n) {
            return Err(Error::shape(
                "scatter_add",
                format!("index {bad} out of range for {n} values"),
            ));
        }
        let v = array::scatter_add(&self.value, &index, out_shape);
        record(Op::ScatterAdd(index), &[self], v)
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for k in start..start + len {
                let base = (o * full + k) * inner;
                index.extend(base..base + inner);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        self.gather(index.into(), &out_shape)
    }
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let values: Vec<&Array> = parts.iter().map(|t| t.value.as_ref()).collect();
    let v = array::concat(&values, axis)?;
    record(Op::Concat(axis), parts, v)
}

/// Rows of `table` (shape `[V, e]`) selected by `indices`, shape `[len, e]`.
pub fn embedding_lookup(table: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let shape = table.shape();
    if shape.len() != 2 {
        return Err(Error::shape(
            "embedding_lookup",
            format!("table must be rank 2, got {shape:?}"),
        ));
    }
    let (rows, width) = (shape[0], shape[1]);
    let mut index = Vec::with_capacity(indices.len() * width);
    for &r in indices {
        if r >= rows {
            return Err(Error::shape(
                "embedding_lookup",
                format!("row {r} out of range for {rows}"),
            ));
        }
        index.extend(r * width..(r + 1) * width);
    }
    table.gather(index.into(), &[indices.len(), width])
}

/// Output extent of a convolution or pooling window along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad)
        .checked_sub(kernel)
        .map(|span| span / stride + 1)
}

/// 2-d convolution (cross-correlation) of `input` `[N, Cin, H, W]` with
/// `kernel` `[Cout, Cin, kh, kw]`, lowered to an im2col gather followed by a
/// matrix product, so all derivatives come from the gather and matmul rules.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (is, ks) = (input.shape(), kernel.shape());
    if is.len() != 4 || ks.len() != 4 || is[1] != ks[1] || stride == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("input {is:?} and kernel {ks:?} (stride {stride}) do not conform"),
        ));
    }
    let (n, cin, h, w) = (is[0], is[1], is[2], is[3]);
    let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
    let (oh, ow) = match (
        conv_out_extent(h, kh, stride, pad),
        conv_out_extent(w, kw, stride, pad),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
            ))
        }
    };
    let patch = cin * kh * kw;
    let mut index = Vec::with_capacity(n * oh * ow * patch);
    for b in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                for c in 0..cin {
                    for i in 0..kh {
                        for j in 0..kw {
                            let iy = (y * stride + i) as isize - pad as isize;
                            let ix = (x * stride + j) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                index.push(PAD);
                            } else {
                                index.push(((b * cin + c) * h + iy as usize) * w + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
    let cols = input.gather(index.into(), &[n * oh * ow, patch])?;
    let weights = kernel.reshape(&[cout, patch])?.t()?;
    cols.matmul(&weights)?
        .reshape(&[n, oh * ow, cout])?
        .permute(&[0, 2, 1])?
        .reshape(&[n, cout, oh, ow])
}

/// Non-overlapping `size`x`size` max pooling over `[N, C, H, W]` (floor on
/// ragged edges). Ties go to the first element in row-major window order.
pub fn max_pool2d(input: &Tensor, size: usize) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 4 || size == 0 || s[2] < size || s[3] < size {
        return Err(Error::shape(
            "max_pool2d",
            format!("cannot pool {s:?} by {size}"),
        ));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / size, w / size);
    let data = input.data();
    let mut index = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + (y * size) * w + x * size;
                for i in 0..size {
                    for j in 0..size {
                        let k = base + (y * size + i) * w + x * size + j;
                        if data[k] > data[best] {
                            best = k;
                        }
                    }
                }
                index.push(best);
            }
        }
    }
    input.gather(index.into(), &[n, c, oh, ow])
}
