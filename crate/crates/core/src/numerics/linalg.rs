use crate::error::{Error, Result};
use crate::Scalar;

use super::dense::{Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

/// `c = op(a) @ op(b) + beta * c` for row-major buffers.
///
/// `op(a)` is m×k and `op(b)` is k×n. With `Transpose::Yes` the stored
/// buffer holds the k×m (resp. n×k) matrix.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: Transpose,
    b: &[T],
    tb: Transpose,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer length");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer length");
    assert_eq!(c.len(), m * n, "gemm: output buffer length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match ta {
        Transpose::No => (k as isize, 1),
        Transpose::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Transpose::No => (n as isize, 1),
        Transpose::Yes => (1, k as isize),
    };
    // SAFETY: the asserts above bound every index reachable through these
    // strides within the three slices.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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

/// Solves `(gram + lambda I) w = moment` by Cholesky factorization.
///
/// There is no pseudo-inverse fallback: a non-positive pivot is reported as
/// rank deficiency.
pub fn ridge_fit<T: Scalar>(gram: &Matrix<T>, moment: &Vector<T>, lambda: T) -> Result<Vector<T>> {
    let n = gram.rows();
    if gram.cols() != n {
        return Err(Error::Dimension("gram matrix must be square".into()));
    }
    if moment.dim() != n {
        return Err(Error::Dimension(format!(
            "moment has length {}, gram is {n}x{n}",
            moment.dim()
        )));
    }
    if !(lambda >= T::zero()) || !lambda.is_finite() {
        return Err(Error::InvalidArgument("lambda must be a nonnegative finite number".into()));
    }
    let scale = (0..n)
        .map(|i| gram.get(i, i).abs())
        .fold(T::zero(), T::max)
        .max(lambda);
    if !gram.is_symmetric(T::lit(1e-12) * scale.max(T::one())) {
        return Err(Error::InvalidArgument("gram matrix must be symmetric".into()));
    }
    let tol = T::lit(n as f64) * T::epsilon() * scale;

    // Lower-triangular factor, row-major.
    let mut l = vec![T::zero(); n * n];
    for j in 0..n {
        let mut d = gram.get(j, j) + lambda;
        for p in 0..j {
            d = d - l[j * n + p] * l[j * n + p];
        }
        if !(d > tol) {
            return Err(Error::RankDeficient);
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = gram.get(i, j);
            for p in 0..j {
                s = s - l[i * n + p] * l[j * n + p];
            }
            l[i * n + j] = s / d;
        }
    }

    let mut y = vec![T::zero(); n];
    for i in 0..n {
        let mut s = moment[i];
        for p in 0..i {
            s = s - l[i * n + p] * y[p];
        }
        y[i] = s / l[i * n + i];
    }
    let mut w = vec![T::zero(); n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for p in i + 1..n {
            s = s - l[p * n + i] * w[p];
        }
        w[i] = s / l[i * n + i];
    }
    Vector::new(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Vector<f64> {
        Vector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn identity_gram_returns_moment() {
        let w = ridge_fit(&Matrix::identity(2), &v(&[2.0, 3.0]), 0.0).unwrap();
        assert_eq!(w.as_slice(), &[2.0, 3.0]);
    }

    #[test]
    fn ridge_shrinks_identity_system() {
        let w = ridge_fit(&Matrix::identity(2), &v(&[2.0, 3.0]), 1.0).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-15);
        assert!((w[1] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn singular_without_ridge_is_rejected() {
        let gram = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let err = ridge_fit(&gram, &v(&[2.0, 0.0]), 0.0).unwrap_err();
        assert_eq!(err.to_string(), "rank-deficient; supply λ>0");
        assert!(ridge_fit(&gram, &v(&[2.0, 0.0]), 1e-3).is_ok());
    }

    #[test]
    fn gemm_transposes_agree_with_naive() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 + 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64) * 0.5 - 2.0).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a, Transpose::No, &b, Transpose::No, 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-12);
            }
        }
        // aᵀ stored as 3x2, bᵀ stored as 4x3
        let at: Vec<f64> = (0..6).map(|idx| a[(idx % 2) * 3 + idx / 2]).collect();
        let bt: Vec<f64> = (0..12).map(|idx| b[(idx % 3) * 4 + idx / 3]).collect();
        let mut c2 = vec![0.0; 8];
        gemm(2, 3, 4, &at, Transpose::Yes, &bt, Transpose::Yes, 0.0, &mut c2);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn ridge_residual_is_small(
            entries in proptest::collection::vec(-3.0f64..3.0, 12),
            rhs in proptest::collection::vec(-5.0f64..5.0, 3),
            lambda in 1e-3f64..2.0,
        ) {
            // gram = XᵀX for a 4x3 design
            let mut gram = Matrix::<f64>::zeros(3, 3);
            for i in 0..3 {
                for j in 0..3 {
                    let s: f64 = (0..4).map(|r| entries[r * 3 + i] * entries[r * 3 + j]).sum();
                    gram.set(i, j, s);
                }
            }
            let moment = v(&rhs);
            let w = ridge_fit(&gram, &moment, lambda).unwrap();
            let inf = rhs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for i in 0..3 {
                let mut s = lambda * w[i];
                for j in 0..3 {
                    s += gram.get(i, j) * w[j];
                }
                prop_assert!((s - rhs[i]).abs() <= 1e-9 * inf.max(1e-300));
            }
        }
    }
}
