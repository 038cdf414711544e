//! Dense row-major tensors.
//!
//! Volumes use a channels-first `(C, D, H, W)` layout so that convolution
//! inner loops run along the contiguous `W` axis. Convolution weights are
//! `(C_out, C_in, k, k, k)`.

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type. `f32` is the compute precision; `f64` exists
/// for finite-difference gradient verification.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + fmt::Debug + Send + Sync + 'static
{
    const DTYPE: DType;

    fn from_f64_lossy(v: f64) -> Self;

    /// `C = alpha * A * B + beta * C` over strided row/column views.
    ///
    /// # Safety
    /// The strides and extents must describe valid regions of the slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte chunk"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"))
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::InvalidShape {
                dims,
                reason: "rank 0",
            });
        }
        if dims.contains(&0) {
            return Err(Error::InvalidShape {
                dims,
                reason: "zero extent",
            });
        }
        let mut n: usize = 1;
        for &d in &dims {
            n = match n.checked_mul(d) {
                Some(v) if v <= isize::MAX as usize => v,
                _ => {
                    return Err(Error::InvalidShape {
                        dims,
                        reason: "element count overflows",
                    })
                }
            };
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides: `stride[i] = prod(dims[i+1..])`.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }

    pub fn offset(&self, index: &[usize]) -> Option<usize> {
        if index.len() != self.0.len() {
            return None;
        }
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.0) {
            if i >= d {
                return None;
            }
            off = off * d + i;
        }
        Some(off)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl TryFrom<&[usize]> for Shape {
    type Error = Error;
    fn try_from(dims: &[usize]) -> Result<Self> {
        Shape::new(dims.to_vec())
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Shape,
    data: Vec<S>,
}

impl<S: fmt::Debug> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        write!(f, "Tensor{:?} {:?}", self.shape, preview)?;
        if self.data.len() > 8 {
            write!(f, "…")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Max0,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
    ArgMax,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distribution {
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, std: f64 },
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = Shape::new(shape)?;
        if shape.numel() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                left: shape.dims().to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Result<Self> {
        let shape = Shape::new(shape)?;
        let n = shape.numel();
        Ok(Tensor {
            shape,
            data: vec![value; n],
        })
    }

    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![S::zero(); self.data.len()],
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: Shape(vec![1]),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn get(&self, index: &[usize]) -> Option<S> {
        self.shape.offset(index).map(|o| self.data[o])
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.dims().to_vec(),
                right: shape.dims().to_vec(),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| T::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.dims().to_vec(),
                right: other.dims().to_vec(),
            });
        }
        Ok(())
    }

    pub fn elementwise(op: Elementwise, a: &Self, b: Option<&Self>) -> Result<Self> {
        let out = match (op, b) {
            (Elementwise::Add, Some(b)) => a.zip_map(b, "add", |x, y| x + y)?,
            (Elementwise::Mul, Some(b)) => a.zip_map(b, "mul", |x, y| x * y)?,
            (Elementwise::Max0, None) => a.map(|x| if x > S::zero() { x } else { S::zero() }),
            (Elementwise::Max0, Some(_)) => {
                return Err(Error::invalid("max0 is unary"));
            }
            (_, None) => return Err(Error::invalid(format!("{op:?} needs two operands"))),
        };
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        Self::elementwise(Elementwise::Add, self, Some(other))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        Self::elementwise(Elementwise::Mul, self, Some(other))
    }

    pub fn relu(&self) -> Self {
        self.map(|x| if x > S::zero() { x } else { S::zero() })
    }

    pub fn scale(&self, factor: S) -> Self {
        self.map(|x| x * factor)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum_all(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v)
    }

    /// Reduces over `axes` (all axes when empty). Reduced axes are removed;
    /// a full reduction yields shape `[1]`. `ArgMax` needs exactly one axis
    /// (or a rank-1 tensor with `axes` empty) and breaks ties toward the
    /// lowest index.
    pub fn reduce(&self, op: Reduce, axes: &[usize]) -> Result<Self> {
        let rank = self.shape.rank();
        let mut axes: Vec<usize> = if axes.is_empty() {
            (0..rank).collect()
        } else {
            axes.to_vec()
        };
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&a| a >= rank) {
            return Err(Error::invalid(format!(
                "reduction axes {axes:?} out of range for rank {rank}"
            )));
        }
        if op == Reduce::ArgMax && axes.len() != 1 {
            return Err(Error::invalid("argmax reduces over exactly one axis"));
        }
        let dims = self.dims();
        let kept: Vec<usize> = (0..rank).filter(|a| !axes.contains(a)).collect();
        let out_dims: Vec<usize> = if kept.is_empty() {
            vec![1]
        } else {
            kept.iter().map(|&a| dims[a]).collect()
        };
        let out_shape = Shape::new(out_dims)?;
        let red_count: usize = axes.iter().map(|&a| dims[a]).product();

        // Walk every element once; map it to its output slot and accumulate
        // in flat order, which fixes the floating-point summation order.
        let out_n = out_shape.numel();
        let mut acc = match op {
            Reduce::Max => vec![S::neg_infinity(); out_n],
            _ => vec![S::zero(); out_n],
        };
        let mut best = vec![S::neg_infinity(); out_n];
        let mut arg = vec![0usize; out_n];
        let mut index = vec![0usize; rank];
        for &v in &self.data {
            let mut o = 0;
            for &a in &kept {
                o = o * dims[a] + index[a];
            }
            match op {
                Reduce::Sum | Reduce::Mean => acc[o] = acc[o] + v,
                Reduce::Max => {
                    if v > acc[o] {
                        acc[o] = v
                    }
                }
                Reduce::ArgMax => {
                    if v > best[o] {
                        best[o] = v;
                        arg[o] = index[axes[0]];
                    }
                }
            }
            for a in (0..rank).rev() {
                index[a] += 1;
                if index[a] < dims[a] {
                    break;
                }
                index[a] = 0;
            }
        }
        let data = match op {
            Reduce::Sum | Reduce::Max => acc,
            Reduce::Mean => {
                let n = S::from_usize(red_count).unwrap();
                acc.into_iter().map(|v| v / n).collect()
            }
            Reduce::ArgMax => arg.into_iter().map(|i| S::from_usize(i).unwrap()).collect(),
        };
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    pub fn random_fill(rng: &mut Rng, dist: Distribution, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        let data = match dist {
            Distribution::Uniform { low, high } => {
                if low > high || !low.is_finite() || !high.is_finite() {
                    return Err(Error::invalid(format!("uniform({low}, {high})")));
                }
                (0..n).map(|_| S::from_f64_lossy(rng.uniform(low, high))).collect()
            }
            Distribution::Normal { mean, std } => {
                if std < 0.0 || !mean.is_finite() || !std.is_finite() {
                    return Err(Error::invalid(format!("normal({mean}, {std})")));
                }
                (0..n).map(|_| S::from_f64_lossy(rng.normal(mean, std))).collect()
            }
        };
        Ok(Tensor { shape, data })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64().unwrap() - b.to_f64().unwrap()).abs())
            .fold(0.0, f64::max))
    }

    /// Spatial extents `(D, H, W)` of a `(C, D, H, W)` volume.
    pub fn spatial(&self) -> Result<[usize; 3]> {
        match self.dims() {
            &[_, d, h, w] => Ok([d, h, w]),
            other => Err(Error::InvalidShape {
                dims: other.to_vec(),
                reason: "expected (C, D, H, W)",
            }),
        }
    }

    pub fn channels(&self) -> usize {
        self.dims()[0]
    }

    /// Copies the box `origin .. origin + size` out of every channel.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Self> {
        let [d, h, w] = self.spatial()?;
        for a in 0..3 {
            if origin[a] + size[a] > [d, h, w][a] {
                return Err(Error::invalid(format!(
                    "crop {origin:?}+{size:?} exceeds volume {:?}",
                    [d, h, w]
                )));
            }
        }
        let c = self.channels();
        let mut out = Vec::with_capacity(c * size.iter().product::<usize>());
        for ch in 0..c {
            for z in 0..size[0] {
                for y in 0..size[1] {
                    let start = ((ch * d + origin[0] + z) * h + origin[1] + y) * w + origin[2];
                    out.extend_from_slice(&self.data[start..start + size[2]]);
                }
            }
        }
        Tensor::from_vec(vec![c, size[0], size[1], size[2]], out)
    }

    /// Surrounds every channel with `pad` voxels of `fill` on each side.
    pub fn pad(&self, pad: usize, fill: S) -> Result<Self> {
        if pad == 0 {
            return Ok(self.clone());
        }
        let [d, h, w] = self.spatial()?;
        let c = self.channels();
        let (pd, ph, pw) = (d + 2 * pad, h + 2 * pad, w + 2 * pad);
        let mut out = Tensor::full(vec![c, pd, ph, pw], fill)?;
        for ch in 0..c {
            for z in 0..d {
                for y in 0..h {
                    let src = ((ch * d + z) * h + y) * w;
                    let dst = ((ch * pd + z + pad) * ph + y + pad) * pw + pad;
                    out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
                }
            }
        }
        Ok(out)
    }
}
