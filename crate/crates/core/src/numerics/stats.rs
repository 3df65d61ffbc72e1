use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

use super::dense::{dot, Vector};

/// Softmax with explicit handling of masked (−∞) logits.
///
/// Masked entries map to exactly zero. With `neg_inf_allowed = false` a −∞
/// logit is rejected as non-finite instead.
pub fn softmax<T: Scalar>(logits: &[T], neg_inf_allowed: bool) -> Result<Vec<T>> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out, neg_inf_allowed)?;
    Ok(out)
}

pub fn softmax_in_place<T: Scalar>(xs: &mut [T], neg_inf_allowed: bool) -> Result<()> {
    let mut max = T::neg_infinity();
    for (i, &x) in xs.iter().enumerate() {
        if x.is_nan() || x == T::infinity() {
            return Err(Error::NonFinite(format!("logit {i}")));
        }
        if x == T::neg_infinity() && !neg_inf_allowed {
            return Err(Error::NonFinite(format!("logit {i} is -inf")));
        }
        if x > max {
            max = x;
        }
    }
    if max == T::neg_infinity() {
        return Err(Error::EmptySupport);
    }
    let mut total = T::zero();
    for x in xs.iter_mut() {
        *x = if *x == T::neg_infinity() {
            T::zero()
        } else {
            (*x - max).exp()
        };
        total = total + *x;
    }
    for x in xs.iter_mut() {
        *x = *x / total;
    }
    Ok(())
}

pub fn cosine<T: Scalar>(u: &Vector<T>, v: &Vector<T>) -> Result<T> {
    if u.dim() != v.dim() {
        return Err(Error::Dimension(format!("cosine of {} vs {} dims", u.dim(), v.dim())));
    }
    let nu = u.norm();
    let nv = v.norm();
    if nu == T::zero() || nv == T::zero() {
        return Err(Error::UndefinedCosine);
    }
    let c = dot(u.as_slice(), v.as_slice()) / (nu * nv);
    Ok(c.max(-T::one()).min(T::one()))
}

pub fn mean<T: Scalar>(xs: &[T]) -> T {
    let mut s = T::zero();
    for &x in xs {
        s = s + x;
    }
    s / T::lit(xs.len() as f64)
}

/// Coefficient of determination `1 − SS_res / SS_tot`.
pub fn r_squared<T: Scalar>(pred: &Vector<T>, target: &Vector<T>) -> Result<T> {
    if pred.dim() != target.dim() {
        return Err(Error::Dimension(format!(
            "r_squared of {} vs {} dims",
            pred.dim(),
            target.dim()
        )));
    }
    let m = mean(target.as_slice());
    let mut ss_tot = T::zero();
    let mut ss_res = T::zero();
    for (&p, &t) in pred.as_slice().iter().zip(target.as_slice()) {
        ss_tot = ss_tot + (t - m) * (t - m);
        ss_res = ss_res + (t - p) * (t - p);
    }
    if ss_tot == T::zero() {
        return Err(Error::ZeroVariance);
    }
    Ok(T::one() - ss_res / ss_tot)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ci95 {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub n_resamples: usize,
}

/// Percentile bootstrap interval (2.5 / 97.5) for the mean.
///
/// Quantiles use linear interpolation between order statistics. The reported
/// bounds are widened to contain the sample mean when the resampling
/// distribution is lopsided enough to exclude it.
pub fn bootstrap_ci(samples: &[f64], n_resamples: usize, seed: u64) -> Result<Ci95> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("bootstrap needs at least one sample".into()));
    }
    if n_resamples == 0 {
        return Err(Error::InvalidArgument("n_resamples must be positive".into()));
    }
    let n = samples.len();
    let center = mean(samples);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..n_resamples)
        .map(|_| {
            let mut s = 0.0;
            for _ in 0..n {
                s += samples[rng.gen_range(0..n)];
            }
            s / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let quantile = |q: f64| {
        let pos = q * (means.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        means[lo] + (means[hi] - means[lo]) * frac
    };
    Ok(Ci95 {
        mean: center,
        lo: quantile(0.025).min(center),
        hi: quantile(0.975).max(center),
        n_resamples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Vector<f64> {
        Vector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&[0.0f64, 0.0, 0.0], false).unwrap();
        for p in u {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(softmax(&[f64::NEG_INFINITY, 0.0], true).unwrap(), vec![0.0, 1.0]);
        let p = softmax(&[1f64.ln(), 3f64.ln()], false).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_empty_support() {
        let err = softmax(&[f64::NEG_INFINITY; 3], true).unwrap_err();
        assert_eq!(err.to_string(), "empty attention support");
        assert!(softmax(&[f64::NEG_INFINITY, 0.0], false).is_err());
        assert!(softmax(&[f64::NAN, 0.0], true).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&v(&[1.0, 2.0]), &v(&[1.0, 2.0])).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine(&v(&[1.0, 0.0]), &v(&[1.0, 1.0])).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        let err = cosine(&v(&[0.0, 0.0]), &v(&[1.0, 1.0])).unwrap_err();
        assert_eq!(err.to_string(), "undefined cosine");
    }

    #[test]
    fn r_squared_examples() {
        let t = v(&[1.0, 4.0, 2.0]);
        assert_eq!(r_squared(&t, &t).unwrap(), 1.0);
        let m = 7.0 / 3.0;
        assert!(r_squared(&v(&[m, m, m]), &t).unwrap().abs() < 1e-15);
        assert_eq!(r_squared(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), -3.0);
        let err = r_squared(&t, &v(&[2.0, 2.0, 2.0])).unwrap_err();
        assert_eq!(err.to_string(), "zero variance");
    }

    #[test]
    fn bootstrap_degenerate_and_deterministic() {
        let ci = bootstrap_ci(&[0.7; 20], 500, 3).unwrap();
        assert!(ci.lo == ci.mean && ci.hi == ci.mean && (ci.mean - 0.7).abs() < 1e-12);
        let xs: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        assert_eq!(bootstrap_ci(&xs, 1000, 9).unwrap(), bootstrap_ci(&xs, 1000, 9).unwrap());
        assert!(bootstrap_ci(&[], 10, 0).is_err());
    }

    /// Independent oracle: for 500 zeros and 500 ones the bootstrap mean is
    /// Binomial(1000, 1/2) / 1000, so the percentile interval must sit near
    /// the exact binomial 2.5% / 97.5% quantiles.
    #[test]
    fn bootstrap_matches_binomial_oracle() {
        let xs: Vec<f64> = (0..1000).map(|i| (i % 2) as f64).collect();
        let ci = bootstrap_ci(&xs, 1000, 42).unwrap();
        assert!(ci.lo < 0.5 && 0.5 < ci.hi);

        let n = 1000u32;
        let mut pmf = Vec::with_capacity(n as usize + 1);
        let mut log_c = 0.0f64;
        for k in 0..=n {
            if k > 0 {
                log_c += ((n - k + 1) as f64).ln() - (k as f64).ln();
            }
            pmf.push((log_c - n as f64 * 2f64.ln()).exp());
        }
        let quantile = |q: f64| {
            let mut acc = 0.0;
            for (k, p) in pmf.iter().enumerate() {
                acc += p;
                if acc >= q {
                    return k as f64 / n as f64;
                }
            }
            1.0
        };
        let (lo, hi) = (quantile(0.025), quantile(0.975));
        assert!((ci.lo - lo).abs() < 0.01, "{} vs {}", ci.lo, lo);
        assert!((ci.hi - hi).abs() < 0.01, "{} vs {}", ci.hi, hi);
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_shift_invariant(
            xs in proptest::collection::vec(-30.0f64..30.0, 1..12),
            shift in -50.0f64..50.0,
        ) {
            let p = softmax(&xs, false).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            let shifted: Vec<f64> = xs.iter().map(|x| x + shift).collect();
            let q = softmax(&shifted, false).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            u in proptest::collection::vec(-5.0f64..5.0, 4),
            w in proptest::collection::vec(-5.0f64..5.0, 4),
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            let (u, w) = (v(&u), v(&w));
            prop_assume!(u.norm() > 1e-6 && w.norm() > 1e-6);
            let c = cosine(&u, &w).unwrap();
            prop_assert!((c - cosine(&w, &u).unwrap()).abs() <= 1e-12);
            prop_assert!((c - cosine(&u.scaled(a), &w.scaled(b)).unwrap()).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }
}
