//! Dense row-major `f64` arrays and the numeric kernels the graph ops run on.

use std::fmt;

use crate::error::{Error, Result};

/// Sentinel used in gather/scatter index maps for "no source element" (zero padding).
pub const PAD: usize = usize::MAX;

/// A dense, row-major array of `f64` values.
#[derive(Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Array{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Array{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Array {
    /// Builds an array, checking that every extent is positive and that the
    /// extents multiply out to `data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(
                "array",
                format!("zero extent in shape {shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "array",
                format!(
                    "shape {shape:?} holds {n} values but {} were given",
                    data.len()
                ),
            ));
        }
        Ok(Array { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Array { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Array::from_parts(vec![], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Array::from_parts(vec![data.len()], data)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Array::from_parts(shape.to_vec(), vec![v; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Array::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Array::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut a = Array::zeros(&[n, n]);
        for i in 0..n {
            a.data[i * n + i] = 1.0;
        }
        a
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.data.len(),
            1,
            "item() on array of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Array> {
        Array::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Row `i` of a rank-2 array.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.rank(), 2);
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    /// Rows `[start, start + len)` along the leading axis.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Array> {
        let rows = *self
            .shape
            .first()
            .ok_or_else(|| Error::shape("slice_rows", "rank 0"))?;
        if len == 0 || start + len > rows {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} out of range for {rows}", start + len),
            ));
        }
        let stride: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Array::from_parts(
            shape,
            self.data[start * stride..(start + len) * stride].to_vec(),
        ))
    }

    /// Gathers rows along the leading axis in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Array> {
        let n = *self
            .shape
            .first()
            .ok_or_else(|| Error::shape("select_rows", "rank 0"))?;
        let stride: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= n {
                return Err(Error::shape(
                    "select_rows",
                    format!("row {r} out of range for {n}"),
                ));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Array::new(shape, data)
    }

    pub fn max_abs_diff(&self, other: &Array) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Index of the largest entry in each row of a rank-2 array (lowest index wins ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        assert_eq!(self.rank(), 2);
        (0..self.shape[0]).map(|i| argmax(self.row(i))).collect()
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(
                    op,
                    format!("cannot broadcast {a:?} with {b:?} (axis {i}: {da} vs {db})"),
                ))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast `target`; broadcast axes get stride 0.
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = target.len() - shape.len();
    (0..target.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Walks every index of `shape` in row-major order, calling `f(out_pos, a_pos, b_pos)`.
fn for_each_broadcast(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = shape.iter().product();
    if shape.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = shape.len();
    let inner = shape[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut counter = vec![0usize; rank];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut pos = 0;
    while pos < n {
        for k in 0..inner {
            f(pos + k, base_a + k * ia, base_b + k * ib);
        }
        pos += inner;
        // advance the outer counter
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            counter[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if counter[d] < shape[d] {
                break;
            }
            base_a -= sa[d] * shape[d];
            base_b -= sb[d] * shape[d];
            counter[d] = 0;
        }
    }
}

pub(crate) fn zip_broadcast(
    op: &'static str,
    a: &Array,
    b: &Array,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Array> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Array::from_parts(a.shape.clone(), data));
    }
    let shape = broadcast_shape(op, &a.shape, &b.shape)?;
    if b.numel() == 1 && shape == a.shape {
        let y = b.data[0];
        return Ok(Array::from_parts(
            shape,
            a.data.iter().map(|&x| f(x, y)).collect(),
        ));
    }
    if a.numel() == 1 && shape == b.shape {
        let x = a.data[0];
        return Ok(Array::from_parts(
            shape,
            b.data.iter().map(|&y| f(x, y)).collect(),
        ));
    }
    let sa = broadcast_strides(&a.shape, &shape);
    let sb = broadcast_strides(&b.shape, &shape);
    let n = shape.iter().product();
    let mut data = vec![0.0; n];
    for_each_broadcast(&shape, &sa, &sb, |o, i, j| {
        data[o] = f(a.data[i], b.data[j])
    });
    Ok(Array::from_parts(shape, data))
}

pub(crate) fn expand(a: &Array, shape: &[usize]) -> Result<Array> {
    let target = broadcast_shape("expand", &a.shape, shape)?;
    if target != shape {
        return Err(Error::shape(
            "expand",
            format!("{:?} does not broadcast to {shape:?}", a.shape),
        ));
    }
    let sa = broadcast_strides(&a.shape, shape);
    let zero = vec![0; shape.len()];
    let mut data = vec![0.0; shape.iter().product()];
    for_each_broadcast(shape, &sa, &zero, |o, i, _| data[o] = a.data[i]);
    Ok(Array::from_parts(shape.to_vec(), data))
}

/// (outer, len, inner) decomposition of `shape` around `axis`.
fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(
            op,
            format!("axis {axis} out of range for {shape:?}"),
        ));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

pub(crate) fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut out = shape.to_vec();
    if keepdim {
        out[axis] = 1;
    } else {
        out.remove(axis);
    }
    out
}

pub(crate) fn sum_axis(a: &Array, axis: usize, keepdim: bool) -> Result<Array> {
    let (outer, len, inner) = split_axis("sum", &a.shape, axis)?;
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for k in 0..len {
            let src = &a.data[(o * len + k) * inner..(o * len + k + 1) * inner];
            let dst = &mut data[o * inner..(o + 1) * inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    Ok(Array::from_parts(
        reduced_shape(&a.shape, axis, keepdim),
        data,
    ))
}

pub(crate) fn softmax(a: &Array, axis: usize) -> Result<Array> {
    let (outer, len, inner) = split_axis("softmax", &a.shape, axis)?;
    let mut out = vec![0.0; a.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len)
                .map(|k| a.data[at(k)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (a.data[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[at(k)] /= total;
            }
        }
    }
    Ok(Array::from_parts(a.shape.clone(), out))
}

pub(crate) fn matmul(a: &Array, b: &Array) -> Result<Array> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape(
            "matmul",
            format!("cannot multiply {:?} by {:?}", a.shape, b.shape),
        ));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut c = vec![0.0; m * n];
    // SAFETY: the pointers cover m*k, k*n and m*n contiguous row-major values.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            k as isize,
            1,
            b.data.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(Array::from_parts(vec![m, n], c))
}

pub(crate) fn permute(a: &Array, perm: &[usize]) -> Result<Array> {
    let rank = a.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank
        || perm
            .iter()
            .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
    {
        return Err(Error::shape(
            "permute",
            format!("{perm:?} is not a permutation of {rank} axes"),
        ));
    }
    let shape: Vec<usize> = perm.iter().map(|&p| a.shape[p]).collect();
    let src = strides(&a.shape);
    let sa: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
    let zero = vec![0; rank];
    let mut data = vec![0.0; a.numel()];
    for_each_broadcast(&shape, &sa, &zero, |o, i, _| data[o] = a.data[i]);
    Ok(Array::from_parts(shape, data))
}

pub(crate) fn concat(parts: &[&Array], axis: usize) -> Result<Array> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let (outer, _, inner) = split_axis("concat", &first.shape, axis)?;
    let mut total = 0;
    for p in parts {
        let ok = p.rank() == first.rank()
            && (0..p.rank()).all(|d| d == axis || p.shape[d] == first.shape[d]);
        if !ok {
            return Err(Error::shape(
                "concat",
                format!(
                    "{:?} does not match {:?} off axis {axis}",
                    p.shape, first.shape
                ),
            ));
        }
        total += p.shape[axis];
    }
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Ok(Array::from_parts(shape, data))
}

/// `out[i] = src[index[i]]`, with [`PAD`] producing zero.
pub(crate) fn gather(src: &Array, index: &[usize], out_shape: &[usize]) -> Array {
    let data = index
        .iter()
        .map(|&j| if j == PAD { 0.0 } else { src.data[j] })
        .collect();
    Array::from_parts(out_shape.to_vec(), data)
}

/// `out[index[i]] += src[i]`; the adjoint of [`gather`].
pub(crate) fn scatter_add(src: &Array, index: &[usize], out_shape: &[usize]) -> Array {
    let mut out = Array::zeros(out_shape);
    for (&j, &v) in index.iter().zip(&src.data) {
        if j != PAD {
            out.data[j] += v;
        }
    }
    out
}
