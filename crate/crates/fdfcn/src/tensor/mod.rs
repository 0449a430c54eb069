//! Dense tensor kernel.
//!
//! [`Tensor5`] is the universal carrier for activations and convolution
//! weights: a contiguous row-major `(n, c, d, h, w)` array (`n` outermost,
//! `w` innermost). Every operation in this module comes in a forward and an
//! analytic backward flavor; nothing here tapes a graph.
//!
//! All ops are generic over [`Scalar`] so the production `f32` path and the
//! 64-bit gradient-check path run the same code.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};
use std::sync::atomic::{AtomicBool, Ordering};

use thiserror::Error;

static FINITE_AUDIT: AtomicBool = AtomicBool::new(false);

/// Toggles the debug-build NaN/Inf audit that runs after each op. Off by
/// default; release builds compile it out.
pub fn set_finite_audit(enabled: bool) {
    FINITE_AUDIT.store(enabled, Ordering::Relaxed);
}

#[inline]
pub(crate) fn audit_finite<T: Scalar>(op: &str, out: &Tensor5<T>) {
    if cfg!(debug_assertions) && FINITE_AUDIT.load(Ordering::Relaxed) {
        assert!(out.all_finite(), "non-finite value in output of {op}");
    }
}

mod conv;
mod loss;
mod norm;

pub use conv::{conv3d_backward, conv3d_forward, conv_out_size, ConvSpec};
pub use loss::{softmax_cross_entropy, softmax_cross_entropy_backward, ClassTargets, SoftmaxCache};
pub use norm::{
    batch_norm_backward, batch_norm_forward, batch_norm_reconstruct, prelu_backward, prelu_forward,
    BnCache, BnState, Mode, BN_EPS, BN_MOMENTUM,
};

/// Element type of the tensor kernel. Implemented for `f32` (production) and
/// `f64` (gradient-check harness).
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Default
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("effective kernel {kd} exceeds padded input {input}+2*{padding}")]
    KernelExceedsInput {
        input: usize,
        padding: usize,
        kd: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no centered crop from edge {source_edge} to edge {target}: parity differs")]
    ParityMismatch { source_edge: usize, target: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u16, classes: usize },
    #[error("data length {actual} does not match shape product {expected}")]
    LengthMismatch { expected: usize, actual: usize },
}

/// Dense 5-axis array of scalars in `(n, c, d, h, w)` row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor5<T> {
    shape: [usize; 5],
    data: Vec<T>,
}

impl<T: Scalar> Tensor5<T> {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Tensor5 {
            shape,
            data: vec![T::ZERO; shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 5], value: T) -> Self {
        Tensor5 {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<T>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor5 { shape, data })
    }

    #[inline]
    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn c(&self) -> usize {
        self.shape[1]
    }

    /// Spatial extents `(d, h, w)`.
    #[inline]
    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    #[inline]
    pub fn spatial_len(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, d: usize, h: usize, w: usize) -> usize {
        let [_, cs, ds, hs, ws] = self.shape;
        (((n * cs + c) * ds + d) * hs + h) * ws + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, d: usize, h: usize, w: usize) -> T {
        self.data[self.idx(n, c, d, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, d: usize, h: usize, w: usize, v: T) {
        let i = self.idx(n, c, d, h, w);
        self.data[i] = v;
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Contiguous `(d*h*w)` block for one `(n, c)` pair.
    #[inline]
    pub fn channel_block(&self, n: usize, c: usize) -> &[T] {
        let sp = self.spatial_len();
        let start = (n * self.shape[1] + c) * sp;
        &self.data[start..start + sp]
    }

    #[inline]
    pub fn channel_block_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let sp = self.spatial_len();
        let start = (n * self.shape[1] + c) * sp;
        &mut self.data[start..start + sp]
    }

    /// Converts the element type through `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor5<U> {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn same_shape_err(op: &str, a: [usize; 5], b: [usize; 5]) -> TensorError {
    TensorError::ShapeMismatch(format!("{op}: {a:?} vs {b:?}"))
}

/// Concatenates along the channel axis, preserving argument order.
pub fn concat_channels<T: Scalar>(inputs: &[&Tensor5<T>]) -> Result<Tensor5<T>, TensorError> {
    let first = inputs
        .first()
        .ok_or_else(|| TensorError::ShapeMismatch("concat of zero tensors".into()))?;
    let [n, _, d, h, w] = first.shape();
    let mut c_total = 0;
    for t in inputs {
        let [tn, tc, td, th, tw] = t.shape();
        if [tn, td, th, tw] != [n, d, h, w] {
            return Err(same_shape_err("concat_channels", first.shape(), t.shape()));
        }
        c_total += tc;
    }
    let mut out = Tensor5::zeros([n, c_total, d, h, w]);
    let sp = d * h * w;
    for ni in 0..n {
        let mut co = 0;
        for t in inputs {
            for ci in 0..t.c() {
                out.channel_block_mut(ni, co + ci)
                    .copy_from_slice(t.channel_block(ni, ci));
            }
            co += t.c();
        }
        debug_assert_eq!(co * sp, c_total * sp);
    }
    Ok(out)
}

/// Backward of [`concat_channels`]: splits the gradient back into parts of
/// the given channel widths.
pub fn concat_channels_backward<T: Scalar>(
    grad: &Tensor5<T>,
    widths: &[usize],
) -> Result<Vec<Tensor5<T>>, TensorError> {
    let [n, c, d, h, w] = grad.shape();
    if widths.iter().sum::<usize>() != c {
        return Err(TensorError::ShapeMismatch(format!(
            "split widths {widths:?} do not sum to {c} channels"
        )));
    }
    let mut parts = Vec::with_capacity(widths.len());
    let mut offset = 0;
    for &wc in widths {
        let mut part = Tensor5::zeros([n, wc, d, h, w]);
        for ni in 0..n {
            for ci in 0..wc {
                part.channel_block_mut(ni, ci)
                    .copy_from_slice(grad.channel_block(ni, offset + ci));
            }
        }
        offset += wc;
        parts.push(part);
    }
    Ok(parts)
}

/// Extracts the centered cube of spatial edge `target` from every channel.
/// The crop must be exactly centered: each spatial extent must have the same
/// parity as `target`.
pub fn center_crop<T: Scalar>(
    input: &Tensor5<T>,
    target: usize,
) -> Result<Tensor5<T>, TensorError> {
    let [n, c, d, h, w] = input.shape();
    for edge in [d, h, w] {
        if target > edge {
            return Err(TensorError::ShapeMismatch(format!(
                "crop target {target} exceeds source edge {edge}"
            )));
        }
        if !(edge - target).is_multiple_of(2) {
            return Err(TensorError::ParityMismatch {
                source_edge: edge,
                target,
            });
        }
    }
    if [d, h, w] == [target, target, target] {
        return Ok(input.clone());
    }
    let (od, oh, ow) = ((d - target) / 2, (h - target) / 2, (w - target) / 2);
    let mut out = Tensor5::zeros([n, c, target, target, target]);
    for ni in 0..n {
        for ci in 0..c {
            for dz in 0..target {
                for dy in 0..target {
                    let src = input.idx(ni, ci, od + dz, oh + dy, ow);
                    let dst = out.idx(ni, ci, dz, dy, 0);
                    out.data[dst..dst + target].copy_from_slice(&input.data[src..src + target]);
                }
            }
        }
    }
    Ok(out)
}

/// Backward of [`center_crop`]: embeds the gradient back into a zero tensor
/// with the source spatial extents.
pub fn center_crop_backward<T: Scalar>(
    grad: &Tensor5<T>,
    source_spatial: [usize; 3],
) -> Result<Tensor5<T>, TensorError> {
    let [n, c, t, th, tw] = grad.shape();
    debug_assert!(t == th && th == tw);
    let [d, h, w] = source_spatial;
    for edge in [d, h, w] {
        if t > edge {
            return Err(TensorError::ShapeMismatch(format!(
                "crop target {t} exceeds source edge {edge}"
            )));
        }
        if !(edge - t).is_multiple_of(2) {
            return Err(TensorError::ParityMismatch {
                source_edge: edge,
                target: t,
            });
        }
    }
    let (od, oh, ow) = ((d - t) / 2, (h - t) / 2, (w - t) / 2);
    let mut out = Tensor5::zeros([n, c, d, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            for dz in 0..t {
                for dy in 0..t {
                    let dst = out.idx(ni, ci, od + dz, oh + dy, ow);
                    let src = grad.idx(ni, ci, dz, dy, 0);
                    out.data[dst..dst + t].copy_from_slice(&grad.data[src..src + t]);
                }
            }
        }
    }
    Ok(out)
}

/// Elementwise sum of identically shaped tensors.
pub fn elementwise_sum<T: Scalar>(inputs: &[&Tensor5<T>]) -> Result<Tensor5<T>, TensorError> {
    let first = inputs
        .first()
        .ok_or_else(|| TensorError::ShapeMismatch("sum of zero tensors".into()))?;
    let mut out = (*first).clone();
    for t in &inputs[1..] {
        if t.shape() != first.shape() {
            return Err(same_shape_err("elementwise_sum", first.shape(), t.shape()));
        }
        for (o, v) in out.data.iter_mut().zip(t.data.iter()) {
            *o += *v;
        }
    }
    Ok(out)
}

/// Backward of [`elementwise_sum`]: every addend receives the gradient.
pub fn elementwise_sum_backward<T: Scalar>(grad: &Tensor5<T>, arity: usize) -> Vec<Tensor5<T>> {
    (0..arity).map(|_| grad.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        let err = Tensor5::<f32>::from_vec([1, 1, 2, 2, 2], vec![0.0; 7]).unwrap_err();
        assert_eq!(
            err,
            TensorError::LengthMismatch {
                expected: 8,
                actual: 7
            }
        );
    }

    #[test]
    fn indexing_is_row_major_w_innermost() {
        let mut t = Tensor5::<f32>::zeros([2, 3, 2, 2, 2]);
        t.set(1, 2, 1, 1, 1, 9.0);
        assert_eq!(t.data()[t.len() - 1], 9.0);
        t.set(0, 0, 0, 0, 1, 5.0);
        assert_eq!(t.data()[1], 5.0);
    }

    #[test]
    fn concat_preserves_block_order() {
        let a = Tensor5::<f32>::filled([1, 48, 1, 1, 2], 1.0);
        let b = Tensor5::<f32>::filled([1, 6, 1, 1, 2], 2.0);
        let out = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(out.shape(), [1, 54, 1, 1, 2]);
        assert_eq!(out.get(0, 47, 0, 0, 0), 1.0);
        assert_eq!(out.get(0, 48, 0, 0, 0), 2.0);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor5::<f32>::zeros([1, 2, 2, 2, 2]);
        let b = Tensor5::<f32>::zeros([1, 2, 2, 2, 3]);
        assert!(matches!(
            concat_channels(&[&a, &b]),
            Err(TensorError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn crop_13_to_9_removes_two_per_side() {
        let mut t = Tensor5::<f32>::zeros([1, 1, 13, 13, 13]);
        for z in 0..13 {
            for y in 0..13 {
                for x in 0..13 {
                    t.set(0, 0, z, y, x, (z * 169 + y * 13 + x) as f32);
                }
            }
        }
        let c = center_crop(&t, 9).unwrap();
        assert_eq!(c.shape(), [1, 1, 9, 9, 9]);
        assert_eq!(c.get(0, 0, 0, 0, 0), t.get(0, 0, 2, 2, 2));
        assert_eq!(c.get(0, 0, 8, 8, 8), t.get(0, 0, 10, 10, 10));
    }

    #[test]
    fn crop_same_size_is_identity() {
        let t = Tensor5::<f32>::filled([2, 3, 5, 5, 5], 1.25);
        assert_eq!(center_crop(&t, 5).unwrap(), t);
    }

    #[test]
    fn crop_parity_mismatch_rejected() {
        let t = Tensor5::<f32>::zeros([1, 1, 10, 10, 10]);
        assert_eq!(
            center_crop(&t, 9).unwrap_err(),
            TensorError::ParityMismatch {
                source_edge: 10,
                target: 9
            }
        );
    }

    #[test]
    fn crop_backward_embeds_centered() {
        let g = Tensor5::<f32>::filled([1, 1, 3, 3, 3], 1.0);
        let out = center_crop_backward(&g, [5, 5, 5]).unwrap();
        assert_eq!(out.get(0, 0, 0, 0, 0), 0.0);
        assert_eq!(out.get(0, 0, 1, 1, 1), 1.0);
        assert_eq!(out.get(0, 0, 3, 3, 3), 1.0);
        assert_eq!(out.get(0, 0, 4, 4, 4), 0.0);
        let total: f32 = out.data().iter().sum();
        assert_eq!(total, 27.0);
    }

    #[test]
    fn sum_rejects_shape_mismatch() {
        let a = Tensor5::<f32>::zeros([1, 1, 2, 2, 2]);
        let b = Tensor5::<f32>::zeros([1, 2, 2, 2, 2]);
        assert!(elementwise_sum(&[&a, &b]).is_err());
    }

    #[test]
    fn finite_audit_catches_nan_when_enabled() {
        let spec = super::ConvSpec {
            kernel: 1,
            stride: 1,
            padding: 0,
            rate: 1,
            c_in: 1,
            c_out: 1,
        };
        let mut input = Tensor5::<f32>::zeros([1, 1, 2, 2, 2]);
        input.set(0, 0, 0, 0, 0, f32::NAN);
        let weights = Tensor5::<f32>::filled([1, 1, 1, 1, 1], 1.0);
        // off by default: the op goes through
        assert!(super::conv3d_forward(&input, &weights, &[0.0], &spec).is_ok());
        if cfg!(debug_assertions) {
            set_finite_audit(true);
            let caught = std::panic::catch_unwind(|| {
                let _ = super::conv3d_forward(&input, &weights, &[0.0], &spec);
            });
            set_finite_audit(false);
            assert!(caught.is_err(), "audit should flag the NaN");
        }
    }
}
