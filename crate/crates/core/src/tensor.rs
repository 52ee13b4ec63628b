//! Dense row-major `f32` arrays and the handful of primitive ops the rest of
//! the crate is built from.
//!
//! Every op here has a hand-written backward pass in [`crate::grad`]; nothing
//! records a tape.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that the data fills the shape and is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::input(format!("shape {shape:?} has a zero dimension")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::input(format!("shape {shape:?} needs {expected} values, got {}", data.len())));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for results of ops on already-valid tensors.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    /// Uniform entries in `[-scale, scale]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], scale: f32, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::precondition(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    /// `(h, w, c)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[h, w, c] => Ok((h, w, c)),
            other => Err(Error::precondition(format!("expected an H×W×C grid, got shape {other:?}"))),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension { op: "reshape", left: self.shape, right: shape.to_vec() });
        }
        Ok(Self::from_parts(shape.to_vec(), self.data))
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = *self.shape.last().expect("rank >= 1");
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.same_shape("zip_map", other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape("add_assign", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }

    fn same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension { op, left: self.shape.clone(), right: other.shape.clone() });
        }
        Ok(())
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    /// Standard matrix product `[m×k]·[k×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let mismatch = || Error::Dimension { op: "matmul", left: self.shape.clone(), right: other.shape.clone() };
        let (m, k) = self.dims2().map_err(|_| mismatch())?;
        let (k2, n) = other.dims2().map_err(|_| mismatch())?;
        if k != k2 {
            return Err(mismatch());
        }
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in self.data[i * k..(i + 1) * k].iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::from_parts(vec![m, n], out))
    }

    /// Adds `bias` (length = cols) to every row of a matrix.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if bias.numel() != c {
            return Err(Error::Dimension { op: "add_row_bias", left: self.shape.clone(), right: bias.shape.clone() });
        }
        let mut out = self.data.clone();
        for i in 0..r {
            for (o, &b) in out[i * c..(i + 1) * c].iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    /// Column sums of a matrix (the bias gradient of [`Tensor::add_row_bias`]).
    pub fn sum_rows(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0f32; c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(&self.data[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        Ok(Self::from_parts(vec![c], out))
    }
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![0.0f32; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| src[idx(k)]).fold(f32::NEG_INFINITY, f32::max);
            let mut total = 0.0f64;
            for k in 0..len {
                let e = (src[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += f64::from(e);
            }
            for k in 0..len {
                out[idx(k)] = (f64::from(out[idx(k)]) / total) as f32;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Splits a shape into (outer, axis length, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::precondition(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Halves both spatial dimensions of an `H×W×C` grid. Each output cell is the
/// mean of its 2×2 input window, which is what bilinear sampling at the
/// half-pixel output centers reduces to for an exact 2× reduction.
pub fn bilinear_downsample2x(f: &Tensor) -> Result<Tensor> {
    let (h, w, c) = f.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::precondition(format!("bilinear 2x downsampling needs even spatial dims, got {h}×{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = f.data();
    let mut out = vec![0.0f32; oh * ow * c];
    for i in 0..oh {
        for j in 0..ow {
            let dst = &mut out[(i * ow + j) * c..(i * ow + j + 1) * c];
            for (di, dj) in WINDOW {
                let base = ((2 * i + di) * w + 2 * j + dj) * c;
                for (o, &v) in dst.iter_mut().zip(&src[base..base + c]) {
                    *o += v;
                }
            }
            for o in dst.iter_mut() {
                *o *= 0.25;
            }
        }
    }
    Ok(Tensor::from_parts(vec![oh, ow, c], out))
}

/// Row-major offsets of the four cells in a 2×2 window.
pub(crate) const WINDOW: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

/// Pointwise nonlinearities used by the scorer, connectors and decoder MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    /// tanh-approximated GELU.
    #[default]
    Gelu,
}

const SQRT_2_OVER_PI: f32 = 0.797_884_6;
const GELU_CUBIC: f32 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Identity => x,
            Activation::Gelu => {
                let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
        }
    }

    pub fn derivative(self, x: f32) -> f32 {
        match self {
            Activation::Identity => 1.0,
            Activation::Gelu => {
                let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                let t = u.tanh();
                let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }
}
