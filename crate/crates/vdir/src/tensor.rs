//! Dense rank-4 tensors in NHWC layout.
//!
//! Everything in this crate flows through [`Tensor`]: images are
//! `(batch, height, width, channels)` with values nominally in `[0, 1]`,
//! latent maps are quarter-resolution 4-channel tensors, and scalars or
//! per-sample vectors are degenerate shapes (`[1,1,1,1]` / `[n,1,1,1]`).
//! Training runs on `f32`; gradient checks run the same code on `f64`.

use num_traits::Float;

/// Element type for tensors. `f32` for training/inference, `f64` for
/// finite-difference verification.
pub trait Scalar:
    Float + Send + Sync + std::fmt::Debug + std::fmt::Display + std::iter::Sum + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// C[m x n] += alpha * A[m x k] * B[k x n], with arbitrary strides.
    ///
    /// `beta` scales the existing contents of `c` (0 overwrites, 1 accumulates).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

/// NHWC tensor. Scalars use shape `[1,1,1,1]`, per-sample vectors `[n,1,1,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: [usize; 4],
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: [usize; 4], v: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }
    pub fn height(&self) -> usize {
        self.shape[1]
    }
    pub fn width(&self) -> usize {
        self.shape[2]
    }
    pub fn channels(&self) -> usize {
        self.shape[3]
    }

    #[inline(always)]
    pub fn idx(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        ((n * self.shape[1] + y) * self.shape[2] + x) * self.shape[3] + c
    }

    #[inline(always)]
    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> T {
        self.data[self.idx(n, y, x, c)]
    }

    #[inline(always)]
    pub fn at_mut(&mut self, n: usize, y: usize, x: usize, c: usize) -> &mut T {
        let i = self.idx(n, y, x, c);
        &mut self.data[i]
    }

    /// Value of a rank-0 (scalar) tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape == other.shape
    }

    /// Slice of one sample along the batch axis.
    pub fn sample(&self, n: usize) -> Tensor<T> {
        let stride: usize = self.shape[1] * self.shape[2] * self.shape[3];
        Tensor {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[n * stride..(n + 1) * stride].to_vec(),
        }
    }

    /// Stack single-sample tensors along the batch axis.
    pub fn stack(parts: &[Tensor<T>]) -> Tensor<T> {
        assert!(!parts.is_empty());
        let [_, h, w, c] = parts[0].shape;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
        for p in parts {
            assert_eq!(p.shape, [1, h, w, c], "stack: inhomogeneous shapes");
            data.extend_from_slice(&p.data);
        }
        Tensor {
            shape: [parts.len(), h, w, c],
            data,
        }
    }

    pub fn clip01(&self) -> Tensor<T> {
        self.map(|v| v.max(T::zero()).min(T::one()))
    }

    /// Mean of all elements, accumulated at f64.
    pub fn mean_f64(&self) -> f64 {
        let s: f64 = self.data.iter().map(|v| v.to_f64()).sum();
        s / self.numel() as f64
    }

    /// Convert element type (exact for f32 -> f64).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_row_major_nhwc() {
        let mut t = Tensor::<f32>::zeros([2, 3, 4, 5]);
        *t.at_mut(1, 2, 3, 4) = 7.0;
        assert_eq!(t.data[((1 * 3 + 2) * 4 + 3) * 5 + 4], 7.0);
        assert_eq!(t.at(1, 2, 3, 4), 7.0);
    }

    #[test]
    fn stack_and_sample_round_trip() {
        let a = Tensor::from_vec([1, 1, 2, 1], vec![1.0f32, 2.0]);
        let b = Tensor::from_vec([1, 1, 2, 1], vec![3.0f32, 4.0]);
        let s = Tensor::stack(&[a.clone(), b.clone()]);
        assert_eq!(s.shape, [2, 1, 2, 1]);
        assert_eq!(s.sample(0), a);
        assert_eq!(s.sample(1), b);
    }

    #[test]
    fn gemm_small_case() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = vec![1.0f32, 2.0, 3.0, 4.0];
        let b = vec![5.0f32, 6.0, 7.0, 8.0];
        let mut c = vec![0.0f32; 4];
        f32::gemm(2, 2, 2, 1.0, &a, 2, 1, &b, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }
}
