//! A small CPU tensor engine: NCHW tensors, convolution layers, batch
//! normalization, pointwise activations and Adam, each with a hand-written
//! backward pass. Layers are generic over [`Real`] so the same network runs
//! in `f32` for training and in `f64` for gradient checks.

mod activation;
mod conv;
mod norm;
mod optim;
mod tensor;

pub use activation::{leaky_relu, leaky_relu_backward, relu, relu_backward, sigmoid, sigmoid_backward};
pub use conv::{Conv2d, ConvTranspose2d};
pub use norm::{BatchNorm2d, BnCache};
pub use optim::{Adam, AdamState};
pub use tensor::Tensor;

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

/// Floating point element type of the engine.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    /// `c = alpha * a * b + beta * c` with arbitrary element strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }

    fn to_bits_le(self) -> Vec<u8>;
    fn from_bits_le(bytes: &[u8]) -> Self;

    /// Runs `f` with two reusable per-thread scratch buffers of the given
    /// lengths. Contents are unspecified on entry.
    fn with_scratch<R>(a: usize, b: usize, f: impl FnOnce(&mut [Self], &mut [Self]) -> R) -> R;
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * rs + (cols - 1) * cs < len, "gemm operand out of bounds");
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path, $name:literal, $scratch:ident) => {
        thread_local! {
            static $scratch: std::cell::RefCell<(Vec<$t>, Vec<$t>)> = const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
        }

        impl Real for $t {
            const DTYPE: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, csc);
                // SAFETY: extents checked above; the output does not alias the inputs.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    )
                }
            }

            fn to_bits_le(self) -> Vec<u8> {
                self.to_le_bytes().to_vec()
            }

            fn from_bits_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }

            fn with_scratch<R>(a: usize, b: usize, f: impl FnOnce(&mut [Self], &mut [Self]) -> R) -> R {
                $scratch.with(|cell| {
                    // A nested call (not expected) falls back to fresh buffers.
                    match cell.try_borrow_mut() {
                        Ok(mut bufs) => {
                            let (x, y) = &mut *bufs;
                            if x.len() < a {
                                x.resize(a, 0.0);
                            }
                            if y.len() < b {
                                y.resize(b, 0.0);
                            }
                            f(&mut x[..a], &mut y[..b])
                        }
                        Err(_) => f(&mut vec![0.0; a], &mut vec![0.0; b]),
                    }
                })
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, "f32", SCRATCH_F32);
impl_real!(f64, matrixmultiply::dgemm, "f64", SCRATCH_F64);

/// Whether normalization layers use batch statistics or frozen running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), value: vec![T::zero(); len], grad: vec![T::zero(); len] }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let mut p = Self::zeros(shape);
        p.value.fill(v);
        p
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        let dist = Uniform::new_inclusive(-bound, bound);
        for v in &mut p.value {
            *v = T::of(dist.sample(rng));
        }
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Mutable access to one named tensor of a network.
pub enum Slot<'a, T> {
    Param(&'a mut Param<T>),
    Buffer(&'a mut Vec<T>),
}

impl<T> Slot<'_, T> {
    pub fn values(&self) -> &[T] {
        match self {
            Slot::Param(p) => &p.value,
            Slot::Buffer(b) => b,
        }
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        match self {
            Slot::Param(p) => &mut p.value,
            Slot::Buffer(b) => b,
        }
    }
}

/// Anything that owns named parameters and buffers.
pub trait Module<T: Real> {
    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, Slot<'a, T>)>);

    fn params(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut all = Vec::new();
        self.slots("", &mut all);
        all.into_iter()
            .filter_map(|(n, s)| match s {
                Slot::Param(p) => Some((n, p)),
                Slot::Buffer(_) => None,
            })
            .collect()
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.params() {
            p.zero_grad();
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
