//! Minimal differentiable building blocks for point-set networks.
//!
//! Activations are `(points × channels)` matrices. Every layer exposes a
//! forward pass that returns its cache and a backward pass that consumes it;
//! gradients are stored in a value of the same type as the layer, so a whole
//! network can be flattened into parameter and gradient vectors with
//! identical ordering.

mod layers;

pub use layers::{BatchNorm, BnCache, Dense, DenseBlock, BlockCache};

use ndarray::{Array1, Array2, LinalgScalar, ScalarOperand};
use num_traits::Float;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating-point element type of a network (`f32` or `f64`).
pub trait Scalar:
    LinalgScalar
    + Float
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
    const NAME: &'static str;
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
    const NAME: &'static str = "f64";
}

/// Whether batch normalization uses batch statistics or running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Trainable parameters versus running-statistics buffers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Buffer,
}

/// Named view of one tensor inside a network.
pub struct TensorRef<'a, T> {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

/// Ordered traversal over every tensor of a network.
pub trait Tensors<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(TensorRef<'a, T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut [T]));

    fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = Vec::new();
        self.visit("", &mut |t| out.push(t));
        out
    }

    /// Concatenation of all tensors of `kind`, in traversal order.
    fn flatten(&self, kind: TensorKind) -> Vec<T> {
        let mut out = Vec::new();
        self.visit("", &mut |t| {
            if t.kind == kind {
                out.extend_from_slice(t.data);
            }
        });
        out
    }

    /// Overwrites all tensors of `kind` from a flat vector.
    fn unflatten(&mut self, kind: TensorKind, values: &[T]) {
        let mut offset = 0;
        self.visit_mut("", &mut |_, k, data| {
            if k == kind {
                data.copy_from_slice(&values[offset..offset + data.len()]);
                offset += data.len();
            }
        });
        assert_eq!(offset, values.len(), "flat vector length mismatch");
    }

    fn count(&self, kind: TensorKind) -> usize {
        let mut n = 0;
        self.visit("", &mut |t| {
            if t.kind == kind {
                n += t.data.len();
            }
        });
        n
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |t| ok &= t.data.iter().all(|v| v.is_finite()));
        ok
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn slice1<T>(a: &Array1<T>) -> &[T] {
    a.as_slice().expect("standard layout")
}

pub(crate) fn slice1_mut<T>(a: &mut Array1<T>) -> &mut [T] {
    a.as_slice_mut().expect("standard layout")
}

pub(crate) fn slice2<T>(a: &Array2<T>) -> &[T] {
    a.as_slice().expect("standard layout")
}

pub(crate) fn slice2_mut<T>(a: &mut Array2<T>) -> &mut [T] {
    a.as_slice_mut().expect("standard layout")
}

pub fn relu<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through ReLU given the layer output.
pub fn relu_backward<T: Scalar>(out: &Array2<T>, grad: &Array2<T>) -> Array2<T> {
    let mut g = grad.clone();
    g.zip_mut_with(out, |g, &o| {
        if o <= T::zero() {
            *g = T::zero();
        }
    });
    g
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Binary cross-entropy of a logit against a `{0, 1}` target.
pub fn bce_with_logit<T: Scalar>(z: T, target: T) -> T {
    z.max(T::zero()) - z * target + (-z.abs()).exp().ln_1p()
}

/// Column-wise maximum with the row index attaining it (first on ties).
pub fn max_pool<T: Scalar>(x: &Array2<T>) -> (Array1<T>, Vec<usize>) {
    let (n, c) = x.dim();
    assert!(n > 0, "max-pool over an empty set");
    let mut best = x.row(0).to_owned();
    let mut arg = vec![0usize; c];
    for i in 1..n {
        for (j, &v) in x.row(i).iter().enumerate() {
            if v > best[j] {
                best[j] = v;
                arg[j] = i;
            }
        }
    }
    (best, arg)
}
