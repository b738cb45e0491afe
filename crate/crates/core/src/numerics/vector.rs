use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn norm<F: Scalar>(a: &[F]) -> F {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn l2_distance_sq<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

#[inline]
pub fn l2_distance<F: Scalar>(a: &[F], b: &[F]) -> F {
    l2_distance_sq(a, b).sqrt()
}

/// Returns `a / ‖a‖`; a zero or non-finite norm is a numeric error.
pub fn normalize<F: Scalar>(a: &[F]) -> Result<Vec<F>> {
    let mut out = a.to_vec();
    normalize_in_place(&mut out)?;
    Ok(out)
}

pub fn normalize_in_place<F: Scalar>(a: &mut [F]) -> Result<()> {
    let n = norm(a);
    if !(n > F::zero()) || !n.is_finite() {
        return Err(Error::Numeric(format!("cannot normalize vector with norm {n}")));
    }
    for x in a.iter_mut() {
        *x /= n;
    }
    Ok(())
}

/// Max-shifted softmax. Rejects empty or non-finite input.
pub fn softmax<F: Scalar>(logits: &[F]) -> Result<Vec<F>> {
    if logits.is_empty() {
        return Err(Error::Numeric("softmax of empty input".into()));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("softmax of non-finite input".into()));
    }
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let mut out: Vec<F> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: F = out.iter().copied().sum();
    for p in out.iter_mut() {
        *p /= total;
    }
    Ok(out)
}

/// Cosine similarity, clamped to [-1, 1] against rounding.
pub fn cosine_sim<F: Scalar>(a: &[F], b: &[F]) -> Result<F> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let na = norm(a);
    let nb = norm(b);
    if !(na > F::zero()) || !(nb > F::zero()) {
        return Err(Error::Numeric("cosine similarity with a zero vector".into()));
    }
    let c = dot(a, b) / (na * nb);
    Ok(c.max(-F::one()).min(F::one()))
}
