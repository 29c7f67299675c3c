//! Dense tensors: shape + contiguous row-major storage.
//!
//! Tensors are immutable once constructed. Cloning is cheap (the storage is
//! behind an `Arc`), which is what lets model parameters be shared read-only
//! across independent evaluation tapes.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Element precision stored in tensor files and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    /// 32-bit IEEE float ("single").
    F32,
    /// 64-bit IEEE float ("double").
    F64,
}

impl Dtype {
    pub fn byte_tag(self) -> u8 {
        match self {
            Dtype::F32 => 0x01,
            Dtype::F64 => 0x02,
        }
    }

    pub fn from_byte_tag(tag: u8) -> Result<Self> {
        match tag {
            0x01 => Ok(Dtype::F32),
            0x02 => Ok(Dtype::F64),
            other => Err(Error::format(format!("unknown dtype tag 0x{other:02x}"))),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Scalar element type of a tensor. Implemented for `f32` and `f64`.
///
/// Everything numeric in the crate is generic over this trait: models train
/// in single precision while gradient oracles run the same code paths in
/// double precision.
pub trait Element:
    num_traits::Float + num_traits::NumAssign + Copy + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: Dtype;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Little-endian encoding into `out` (4 or 8 bytes).
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    fn byte_width() -> usize;

    /// `c = alpha * a @ b + beta * c` with caller-supplied strides, so
    /// transposed operands need no copies.
    ///
    /// # Safety
    /// Pointers must reference buffers covering every strided access for the
    /// m×k, k×n and m×n operands.
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
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }

    fn byte_width() -> usize {
        4
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }

    fn byte_width() -> usize {
        8
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// N-dimensional array with row-major contiguous storage.
///
/// Image-like data uses the N×C×H×W convention.
#[derive(Clone)]
pub struct Tensor<T: Element> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Element> Tensor<T> {
    /// Build a tensor from a shape and matching row-major data.
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![T::zero(); numel]),
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![value; numel]),
        }
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> Dtype {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Copy out the underlying data (or take it if this is the only handle).
    pub fn into_data(self) -> Vec<T> {
        match Arc::try_unwrap(self.data) {
            Ok(v) => v,
            Err(arc) => arc.as_ref().clone(),
        }
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent along dimension `d`.
    pub fn dim(&self, d: usize) -> usize {
        self.shape[d]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn scalar_value(&self) -> T {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret the same storage under a new shape with equal element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.numel(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    /// Convert elementwise to a different precision.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect()),
        }
    }

    /// Interpret as N×C×H×W and return the extents.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        if self.rank() != 4 {
            return Err(Error::shape(format!(
                "expected a rank-4 N×C×H×W tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    /// Slice out sample `n` of an N×C×H×W batch as a 1×C×H×W tensor.
    pub fn sample(&self, n: usize) -> Result<Self> {
        let (batch, c, h, w) = self.nchw()?;
        if n >= batch {
            return Err(Error::shape(format!("sample {n} out of range 0..{batch}")));
        }
        let stride = c * h * w;
        let data = self.data[n * stride..(n + 1) * stride].to_vec();
        Tensor::from_vec(vec![1, c, h, w], data)
    }

    /// Stack rank-4 tensors with identical C×H×W along the batch axis.
    pub fn stack_batch(parts: &[Tensor<T>]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::shape("cannot stack an empty list".to_string()));
        }
        let (_, c, h, w) = parts[0].nchw()?;
        let mut data = Vec::new();
        let mut n_total = 0;
        for p in parts {
            let (n, pc, ph, pw) = p.nchw()?;
            if (pc, ph, pw) != (c, h, w) {
                return Err(Error::shape("stack_batch: mismatched sample shapes".to_string()));
            }
            n_total += n;
            data.extend_from_slice(p.data());
        }
        Tensor::from_vec(vec![n_total, c, h, w], data)
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", T::DTYPE, self.shape)
    }
}

/// Asserts in debug builds that a freshly produced tensor holds only finite
/// values. Forward ops call this on their outputs.
#[inline]
pub fn debug_check_finite<T: Element>(label: &str, t: &Tensor<T>) {
    debug_assert!(t.all_finite(), "non-finite values after {label}");
    let _ = (label, t);
}
