//! Dense tensors and the small amount of linear algebra the networks need.
//!
//! Activations use a channel-major layout `[C, N, H, W]` so that a whole
//! batch convolution is a single matrix product. Vectors of per-sample
//! features are `[F, N]` for the same reason.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type. Training runs in `f32`; gradient checks in `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    /// `c = alpha * a·b + beta * c` with arbitrary row/column strides.
    ///
    /// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    assert!(
        rs >= 0 && cs >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index reachable through the given dims and
                // strides was bounds-checked above.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element-wise conversion to another precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn l2_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// Shape of a channel-major activation `[C, N, H, W]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapShape {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl MapShape {
    pub fn of<T: Real>(t: &Tensor<T>) -> Self {
        let s = t.shape();
        assert_eq!(s.len(), 4, "expected a [C, N, H, W] activation, got {s:?}");
        Self {
            channels: s[0],
            batch: s[1],
            height: s[2],
            width: s[3],
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.channels, self.batch, self.height, self.width]
    }
}

/// Stacks `[C, H, W]` samples into a `[C, N, H, W]` batch.
pub fn stack_samples<T: Real>(samples: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Shape("cannot stack an empty batch".into()))?;
    let s = first.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected [C, H, W] samples, got {s:?}")));
    }
    let (c, plane) = (s[0], s[1] * s[2]);
    let n = samples.len();
    let mut out = Tensor::zeros(&[c, n, s[1], s[2]]);
    for (i, sample) in samples.iter().enumerate() {
        if sample.shape() != s.as_slice() {
            return Err(Error::Shape(format!(
                "batch sample {i} has shape {:?}, expected {s:?}",
                sample.shape()
            )));
        }
        for ch in 0..c {
            let dst = (ch * n + i) * plane;
            out.data[dst..dst + plane].copy_from_slice(&sample.data[ch * plane..(ch + 1) * plane]);
        }
    }
    Ok(out)
}

/// Inverse of [`stack_samples`].
pub fn unstack_samples<T: Real>(batch: &Tensor<T>) -> Vec<Tensor<T>> {
    let ms = MapShape::of(batch);
    let plane = ms.plane();
    (0..ms.batch)
        .map(|i| {
            let mut data = Vec::with_capacity(ms.channels * plane);
            for ch in 0..ms.channels {
                let src = (ch * ms.batch + i) * plane;
                data.extend_from_slice(&batch.data[src..src + plane]);
            }
            Tensor {
                shape: vec![ms.channels, ms.height, ms.width],
                data,
            }
        })
        .collect()
}

/// Concatenates two batches along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (MapShape::of(a), MapShape::of(b));
    if (sa.batch, sa.height, sa.width) != (sb.batch, sb.height, sb.width) {
        return Err(Error::Shape(format!(
            "cannot concatenate {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[sa.channels + sb.channels, sa.batch, sa.height, sa.width], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 1.0).collect(); // 3x4
        let mut c = vec![0.0; 8];
        f64::gemm(2, 3, 4, 1.0, &a, (3, 1), &b, (4, 1), 0.0, &mut c, (4, 1));
        for i in 0..2 {
            for j in 0..4 {
                let naive: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert!((c[i * 4 + j] - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stack_round_trip() {
        let x = Tensor::<f32>::from_vec(&[2, 2, 1], vec![1., 2., 3., 4.]).unwrap();
        let y = Tensor::<f32>::from_vec(&[2, 2, 1], vec![5., 6., 7., 8.]).unwrap();
        let batch = stack_samples(&[&x, &y]).unwrap();
        assert_eq!(batch.shape(), &[2, 2, 2, 1]);
        assert_eq!(batch.data(), &[1., 2., 5., 6., 3., 4., 7., 8.]);
        assert_eq!(unstack_samples(&batch), vec![x, y]);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
    }
}
