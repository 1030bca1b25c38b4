//! Small dense row-major matrices over a generic scalar, sized D×D with D the
//! data dimension. Large matrices (the P×P Hessian) go through nalgebra.

use crate::diff::Real;

/// Lower Cholesky factor of a symmetric row-major `d×d` matrix, or `None` if
/// a pivot is not strictly positive.
pub(crate) fn cholesky<T: Real>(a: &[T], d: usize) -> Option<Vec<T>> {
    let mut l = vec![T::zero(); d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s.value() > 0.0) {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// Solves `L x = b` for lower-triangular `L`.
pub(crate) fn solve_lower<T: Real>(l: &[T], d: usize, b: &[T], out: &mut [T]) {
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * out[k];
        }
        out[i] = s / l[i * d + i];
    }
}

/// Inverse of a lower-triangular matrix (itself lower-triangular).
pub(crate) fn invert_lower<T: Real>(l: &[T], d: usize) -> Vec<T> {
    let mut inv = vec![T::zero(); d * d];
    for j in 0..d {
        inv[j * d + j] = l[j * d + j].recip();
        for i in (j + 1)..d {
            let mut s = T::zero();
            for k in j..i {
                s -= l[i * d + k] * inv[k * d + j];
            }
            inv[i * d + j] = s / l[i * d + i];
        }
    }
    inv
}

/// `A⁻¹` and `log|A|` for SPD `A`, through its Cholesky factor.
pub(crate) fn spd_inverse_logdet<T: Real>(a: &[T], d: usize) -> Option<(Vec<T>, T)> {
    let l = cholesky(a, d)?;
    let li = invert_lower(&l, d);
    let mut inv = vec![T::zero(); d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = T::zero();
            for k in i..d {
                s += li[k * d + i] * li[k * d + j];
            }
            inv[i * d + j] = s;
            inv[j * d + i] = s;
        }
    }
    let mut logdet = T::zero();
    for i in 0..d {
        logdet += l[i * d + i].ln();
    }
    Some((inv, logdet * 2.0))
}

pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], d: usize) -> Vec<T> {
    let mut c = vec![T::zero(); d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                c[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    c
}

pub(crate) fn quad_form<T: Real>(a: &[T], v: &[T], d: usize) -> T {
    let mut s = T::zero();
    for i in 0..d {
        let mut row = T::zero();
        for j in 0..d {
            row += a[i * d + j] * v[j];
        }
        s += v[i] * row;
    }
    s
}
