//! Dense tensors and a tape-based reverse-mode differentiator.
//!
//! Everything numeric in the crate runs on [`Tensor`] buffers. Parameters are
//! tensors with a gradient buffer attached; a [`Tape`] records the primitive
//! ops of one forward pass and replays them backwards to produce
//! [`Gradients`], which are then accumulated into the parameter tensors.
//!
//! Two precision profiles are available through the [`Real`] trait: `f32`
//! ("fast", used for training) and `f64` ("check", used for finite-difference
//! gradient checks).

pub mod gradcheck;
mod optim;
mod tape;
#[cfg(test)]
mod tests_ops;

use std::fmt::{self, Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

use crate::error::{Error, Result};

pub use optim::{Adam, AdamConfig};
pub use tape::{Gradients, Tape, Var};

/// Numeric precision profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    /// Single precision, roughly 7 significant digits.
    Fast,
    /// Double precision, roughly 15 significant digits.
    Check,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::Fast => "fast",
            Precision::Check => "check",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "fast" => Some(Precision::Fast),
            "check" => Some(Precision::Check),
            _ => None,
        }
    }
}

/// Scalar type usable as tensor element.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const PRECISION: Precision;
    /// Width in bytes of the little-endian encoding.
    const BYTES: u8;

    /// Converts an `f64` literal; panics never, rounds to nearest.
    fn lit(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// `c (+)= op(a) · op(b)` for row-major matrices.
    ///
    /// `op(a)` is `m×k` and `op(b)` is `k×n`; `a_t` means `a` is stored as `k×m`,
    /// `b_t` means `b` is stored as `n×k`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // stored as rows×cols when not transposed, cols×rows otherwise
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

/// Below this many multiply-adds the packing overhead of the blocked kernel
/// outweighs the arithmetic.
const SMALL_GEMM: usize = 1024;

#[allow(clippy::too_many_arguments)]
fn small_gemm<T: Float + AddAssign>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    if !accumulate {
        c.iter_mut().for_each(|x| *x = T::zero());
    }
    let a_at = |i: usize, p: usize| if a_t { a[p * m + i] } else { a[i * k + p] };
    if b_t {
        // rows of b are the columns of op(b)
        for i in 0..m {
            for (j, brow) in b.chunks_exact(k).enumerate() {
                let mut s = T::zero();
                for (p, &y) in brow.iter().enumerate() {
                    s += a_at(i, p) * y;
                }
                c[i * n + j] += s;
            }
        }
    } else {
        for (i, crow) in c.chunks_exact_mut(n).enumerate() {
            for (p, brow) in b.chunks_exact(n).enumerate() {
                let x = a_at(i, p);
                for (o, &y) in crow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
    }
}

macro_rules! impl_real {
    ($t:ty, $prec:expr, $bytes:expr, $gemm:path) => {
        impl Real for $t {
            const PRECISION: Precision = $prec;
            const BYTES: u8 = $bytes;

            #[inline]
            fn lit(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn to_f64_lossy(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                debug_assert_eq!(a.len(), m * k);
                debug_assert_eq!(b.len(), k * n);
                debug_assert_eq!(c.len(), m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c.iter_mut().for_each(|x| *x = 0.0);
                    }
                    return;
                }
                if m * k * n <= SMALL_GEMM {
                    small_gemm(m, k, n, a, a_t, b, b_t, c, accumulate);
                    return;
                }
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: slice lengths are checked above against the
                // dimensions, and the strides address only in-bounds elements.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $bytes];
                buf.copy_from_slice(&bytes[..$bytes]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_real!(f32, Precision::Fast, 4, matrixmultiply::sgemm);
impl_real!(f64, Precision::Check, 8, matrixmultiply::dgemm);

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a tensor buffer, used to route gradients back to parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Dense row-major n-dimensional array with an optional gradient buffer.
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    id: ParamId,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("tensor", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            id: ParamId::fresh(),
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
            id: ParamId::fresh(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim("from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Self::new(&[rows.len(), cols], data)
    }

    /// Uniform initialization in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            id: ParamId::fresh(),
        }
    }

    /// Marks the tensor as a trainable parameter with a zeroed gradient buffer.
    pub fn into_param(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    /// Rows of a 2-D tensor (or 1 for vectors).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Columns of a 2-D tensor (the length for vectors).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        if on && self.grad.is_none() {
            self.grad = Some(vec![T::zero(); self.data.len()]);
        } else if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    /// Adds `delta` into the gradient buffer. A no-op for untracked tensors.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        match self.grad.as_mut() {
            None => Ok(()),
            Some(g) if g.len() == delta.len() => {
                g.iter_mut().zip(delta).for_each(|(a, &b)| *a += b);
                Ok(())
            }
            Some(g) => Err(Error::dim("accumulate_grad", &[g.len()], &[delta.len()])),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Copies the values of `other` (same shape) into `self`, keeping identity
    /// and gradient tracking.
    pub fn copy_from(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("copy_from", &self.shape, &other.shape));
        }
        self.data.copy_from_slice(&other.data);
        Ok(())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

impl<T: Real> Clone for Tensor<T> {
    /// Clones values and gradient buffer under a fresh identity.
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: self.grad.clone(),
            id: ParamId::fresh(),
        }
    }
}

impl<T: Real> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data && self.grad == other.grad
    }
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

/// A set of parameter tensors with a stable, named ordering.
pub trait Module<T: Real> {
    /// Parameters with dotted names, in a fixed order.
    fn named_params(&self) -> Vec<(String, &Tensor<T>)>;

    /// Mutable parameters, in the same order as [`Module::named_params`].
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn params(&self) -> Vec<&Tensor<T>> {
        self.named_params().into_iter().map(|(_, p)| p).collect()
    }

    /// Adds every gradient routed to one of this module's parameters.
    fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for p in self.params_mut() {
            if let Some(g) = grads.get(p.id()) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn set_requires_grad(&mut self, on: bool) {
        for p in self.params_mut() {
            p.set_requires_grad(on);
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// A free-standing list of parameters, named by position.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamList<T: Real>(pub Vec<Tensor<T>>);

impl<T: Real> Module<T> for ParamList<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.0.iter().enumerate().map(|(i, p)| (i.to_string(), p)).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.0.iter_mut().collect()
    }
}

/// Prefixes every name in `params` with `prefix.`.
pub(crate) fn prefixed<'a, T: Real>(
    prefix: &str,
    params: Vec<(String, &'a Tensor<T>)>,
) -> Vec<(String, &'a Tensor<T>)> {
    params.into_iter().map(|(n, p)| (format!("{prefix}.{n}"), p)).collect()
}
