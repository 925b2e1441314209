#![allow(dead_code)]

use fmamba_core::{Scalar, Shape, Tensor};
use rand::Rng;

pub fn random<S: Scalar, R: Rng>(rng: &mut R, shape: Shape, bound: f64) -> Tensor<S> {
    Tensor::from_fn(shape, |_, _, _, _| S::of(rng.gen_range(-bound..=bound)))
}

/// `max |a − b| / max |b|`, or the absolute difference when `b` is zero.
pub fn rel_diff<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x.f64() - y.f64()).abs())
        .fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.f64().abs()).fold(0.0, f64::max);
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

pub fn bits_equal(a: &Tensor<f32>, b: &Tensor<f32>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}
