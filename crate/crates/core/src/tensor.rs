//! Dense rank-4 tensors and the integer label/mask containers.
//!
//! [`Tensor4`] carries every activation and parameter in the crate as a
//! row-major `(batch, channels, height, width)` buffer. Element types are
//! `f32` (the training dtype) and `f64` (used by the gradient-check
//! oracles); both implement [`Element`].

use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use crate::{Error, Result};

/// Element dtypes understood by the tensor container format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    I32,
    U8,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::I32 => 2,
            Dtype::U8 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            2 => Some(Dtype::I32),
            3 => Some(Dtype::U8),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

/// Floating-point element of a [`Tensor4`].
///
/// Bridges the generic tensor code to the concrete GEMM kernels and the
/// little-endian container encoding.
pub trait Element:
    num_traits::Float + core::fmt::Debug + core::iter::Sum + Default + Copy + 'static
{
    const DTYPE: Dtype;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `C := alpha * A(m x k) * B(k x n) + beta * C(m x n)`, with explicit
    /// row/column strides per operand (in elements).
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

macro_rules! element_impl {
    ($ty:ty, $dtype:expr, $gemm:path, $bytes:literal) => {
        impl Element for $ty {
            const DTYPE: Dtype = $dtype;

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $ty
            }

            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }

            #[inline]
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            #[inline]
            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $bytes];
                buf.copy_from_slice(&bytes[..$bytes]);
                <$ty>::from_le_bytes(buf)
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
                if m == 0 || n == 0 {
                    return;
                }
                // Bounds of the strided views, checked up front so the
                // unsafe kernel call cannot touch memory outside the slices.
                let amax = (m - 1) as isize * rsa + (k.max(1) - 1) as isize * csa;
                let bmax = (k.max(1) - 1) as isize * rsb + (n - 1) as isize * csb;
                let cmax = (m - 1) as isize * rsc + (n - 1) as isize * csc;
                assert!(k == 0 || (amax >= 0 && (amax as usize) < a.len()));
                assert!(k == 0 || (bmax >= 0 && (bmax as usize) < b.len()));
                assert!(cmax >= 0 && (cmax as usize) < c.len());
                unsafe {
                    $gemm(
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
    };
}

element_impl!(f32, Dtype::F32, matrixmultiply::sgemm, 4);
element_impl!(f64, Dtype::F64, matrixmultiply::dgemm, 8);

/// Dense `(batch, channels, height, width)` tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: [usize; 4],
    data: Vec<T>,
    /// Marks a leaf that should receive a gradient from `backward`.
    pub requires_grad: bool,
}

impl<T: Element> Tensor4<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::dim(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor4 {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor4 {
            shape,
            data: vec![T::zero(); shape.iter().product()],
            requires_grad: false,
        }
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.iter().product()],
            requires_grad: false,
        }
    }

    /// Scalar wrapped as a `(1,1,1,1)` tensor.
    pub fn scalar(value: T) -> Self {
        Tensor4 {
            shape: [1, 1, 1, 1],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Tensor4 {
            shape,
            data: (0..numel).map(&mut f).collect(),
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        let [_, ch, h, w] = self.shape;
        self.data[((b * ch + c) * h + y) * w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, c: usize, y: usize, x: usize) -> &mut T {
        let [_, ch, h, w] = self.shape;
        &mut self.data[((b * ch + c) * h + y) * w + x]
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: [usize; 4]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Copies the rows `indices` of the batch axis into a new tensor.
    pub fn gather_batch(&self, indices: &[usize]) -> Result<Self> {
        let [_, c, h, w] = self.shape;
        let row = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= self.shape[0] {
                return Err(Error::dim(format!(
                    "batch index {i} out of range for batch {}",
                    self.shape[0]
                )));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        Tensor4::new([indices.len(), c, h, w], data)
    }

    pub fn iter(&self) -> core::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Deterministic random fill, uniform in `[lo, hi)`.
    pub fn random_uniform(
        shape: [usize; 4],
        lo: f64,
        hi: f64,
        rng: &mut crate::rng::StreamRng,
    ) -> Self {
        Tensor4::from_fn(shape, |_| T::from_f64(rng.uniform(lo, hi)))
    }

    /// Deterministic He-style fill: normal with the given standard deviation.
    pub fn random_normal(shape: [usize; 4], std: f64, rng: &mut crate::rng::StreamRng) -> Self {
        Tensor4::from_fn(shape, |_| T::from_f64(rng.normal() * std))
    }
}

/// Class sentinel marking unlabeled pixels.
pub const UNLABELED: i32 = -1;

/// Integer class map over `(batch, height, width)`.
///
/// Values are class indices `>= 0`, or [`UNLABELED`] for pixels that must
/// never enter an objective or a split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    shape: [usize; 3],
    data: Vec<i32>,
}

impl LabelMap {
    pub fn new(shape: [usize; 3], data: Vec<i32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::dim(format!(
                "label data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        if data.iter().any(|&v| v < UNLABELED) {
            return Err(Error::config(String::from(
                "label values must be >= 0 or the -1 unlabeled sentinel",
            )));
        }
        Ok(LabelMap { shape, data })
    }

    pub fn filled(shape: [usize; 3], value: i32) -> Self {
        LabelMap {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[i32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [i32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, b: usize, y: usize, x: usize) -> i32 {
        let [_, h, w] = self.shape;
        self.data[(b * h + y) * w + x]
    }

    /// Largest class index present, ignoring the sentinel.
    pub fn max_class(&self) -> Option<i32> {
        self.data.iter().copied().filter(|&v| v >= 0).max()
    }

    pub fn labeled_count(&self) -> usize {
        self.data.iter().filter(|&&v| v >= 0).count()
    }

    pub fn gather_batch(&self, indices: &[usize]) -> Result<Self> {
        let [_, h, w] = self.shape;
        let row = h * w;
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= self.shape[0] {
                return Err(Error::dim(format!(
                    "batch index {i} out of range for batch {}",
                    self.shape[0]
                )));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        LabelMap::new([indices.len(), h, w], data)
    }
}

/// Boolean pixel selector over `(batch, height, width)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    shape: [usize; 3],
    data: Vec<bool>,
}

impl PixelMask {
    pub fn new(shape: [usize; 3], data: Vec<bool>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::dim(format!(
                "mask data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(PixelMask { shape, data })
    }

    pub fn filled(shape: [usize; 3], value: bool) -> Self {
        PixelMask {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, b: usize, y: usize, x: usize) -> bool {
        let [_, h, w] = self.shape;
        self.data[(b * h + y) * w + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_disjoint_with(&self, other: &PixelMask) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(&a, &b)| !(a && b))
    }

    pub fn gather_batch(&self, indices: &[usize]) -> Result<Self> {
        let [_, h, w] = self.shape;
        let row = h * w;
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= self.shape[0] {
                return Err(Error::dim(format!(
                    "batch index {i} out of range for batch {}",
                    self.shape[0]
                )));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        PixelMask::new([indices.len(), h, w], data)
    }
}
