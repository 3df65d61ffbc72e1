use crate::error::{Error, Result};
use crate::Scalar;

use super::dense::{dot, Vector};

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 10_000;

#[derive(Clone, Debug)]
pub struct PcaResult<T: Scalar> {
    /// Two unit-norm principal directions.
    pub components: [Vec<T>; 2],
    /// Variance along each component (covariance eigenvalues).
    pub variances: [T; 2],
    pub projections: Vec<[T; 2]>,
}

/// Projects mean-centred points onto their top-2 principal components.
///
/// Components come from power iteration with deflation on the sample
/// covariance. Each component's sign is fixed so that its first nonzero
/// loading is positive.
pub fn pca2<T: Scalar>(points: &[Vector<T>]) -> Result<PcaResult<T>> {
    if points.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "pca2 needs at least 3 points, got {}",
            points.len()
        )));
    }
    let d = points[0].dim();
    if d < 2 {
        return Err(Error::Dimension("pca2 needs dimension >= 2".into()));
    }
    if points.iter().any(|p| p.dim() != d) {
        return Err(Error::Dimension("pca2 points have mixed dimensions".into()));
    }
    let n = T::lit(points.len() as f64);
    let mut centroid = vec![T::zero(); d];
    for p in points {
        for (c, &x) in centroid.iter_mut().zip(p.as_slice()) {
            *c = *c + x;
        }
    }
    for c in &mut centroid {
        *c = *c / n;
    }
    let centered: Vec<Vec<T>> = points
        .iter()
        .map(|p| p.as_slice().iter().zip(&centroid).map(|(&x, &c)| x - c).collect())
        .collect();

    let mut cov = vec![T::zero(); d * d];
    for row in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] = cov[i * d + j] + row[i] * row[j];
            }
        }
    }
    for c in &mut cov {
        *c = *c / n;
    }
    let trace = (0..d).fold(T::zero(), |acc, i| acc + cov[i * d + i]);
    if !(trace > T::zero()) {
        return Err(Error::NoVariance);
    }
    let tiny = trace * T::lit(1e-14);

    let (v1, l1) = power_iteration(&cov, d, None, tiny).ok_or(Error::NoVariance)?;
    // Deflate and repeat; a rank-1 cloud leaves nothing, so fall back to an
    // arbitrary unit direction orthogonal to the first component.
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            deflated[i * d + j] = deflated[i * d + j] - l1 * v1[i] * v1[j];
        }
    }
    let (v2, l2) = match power_iteration(&deflated, d, Some(&v1), tiny) {
        Some(found) => found,
        None => (orthogonal_unit(&v1), T::zero()),
    };

    let projections = centered
        .iter()
        .map(|row| [dot(row, &v1), dot(row, &v2)])
        .collect();
    Ok(PcaResult {
        components: [v1, v2],
        variances: [l1, l2],
        projections,
    })
}

fn mat_vec<T: Scalar>(m: &[T], d: usize, v: &[T]) -> Vec<T> {
    (0..d).map(|i| dot(&m[i * d..(i + 1) * d], v)).collect()
}

fn normalize<T: Scalar>(v: &mut [T]) -> T {
    let norm = dot(v, v).sqrt();
    if norm > T::zero() {
        for x in v.iter_mut() {
            *x = *x / norm;
        }
    }
    norm
}

fn fix_sign<T: Scalar>(v: &mut [T]) {
    let scale = v.iter().fold(T::zero(), |m, x| m.max(x.abs()));
    if let Some(&first) = v.iter().find(|x| x.abs() > scale * T::lit(1e-12)) {
        if first < T::zero() {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
    }
}

fn project_out<T: Scalar>(v: &mut [T], against: Option<&[T]>) {
    if let Some(u) = against {
        let c = dot(v, u);
        for (x, &y) in v.iter_mut().zip(u) {
            *x = *x - c * y;
        }
    }
}

fn power_iteration<T: Scalar>(
    m: &[T],
    d: usize,
    orthogonal_to: Option<&[T]>,
    tiny: T,
) -> Option<(Vec<T>, T)> {
    // Start from the column with the largest diagonal entry: for a PSD
    // matrix it is nonzero whenever that diagonal entry is.
    let j = (0..d)
        .max_by(|&a, &b| m[a * d + a].partial_cmp(&m[b * d + b]).unwrap())
        .unwrap();
    if !(m[j * d + j] > tiny) {
        return None;
    }
    let mut v: Vec<T> = (0..d).map(|i| m[i * d + j]).collect();
    project_out(&mut v, orthogonal_to);
    if !(normalize(&mut v) > T::zero()) {
        return None;
    }
    let tol = T::lit(POWER_TOL);
    for _ in 0..POWER_MAX_ITERS {
        let mut next = mat_vec(m, d, &v);
        project_out(&mut next, orthogonal_to);
        let norm = normalize(&mut next);
        if !(norm > tiny) {
            return None;
        }
        let delta = next
            .iter()
            .zip(&v)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()));
        v = next;
        if delta < tol {
            break;
        }
    }
    fix_sign(&mut v);
    let lambda = dot(&v, &mat_vec(m, d, &v));
    Some((v, lambda))
}

fn orthogonal_unit<T: Scalar>(v: &[T]) -> Vec<T> {
    let d = v.len();
    // Gram–Schmidt the basis vector least aligned with v.
    let k = (0..d)
        .min_by(|&a, &b| v[a].abs().partial_cmp(&v[b].abs()).unwrap())
        .unwrap();
    let mut e = vec![T::zero(); d];
    e[k] = T::one();
    project_out(&mut e, Some(v));
    normalize(&mut e);
    fix_sign(&mut e);
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pts(rows: &[&[f64]]) -> Vec<Vector<f64>> {
        rows.iter().map(|r| Vector::new(r.to_vec()).unwrap()).collect()
    }

    #[test]
    fn rank_one_line_has_zero_second_coordinate() {
        let p: Vec<Vector<f64>> = (0..6)
            .map(|t| Vector::new(vec![t as f64, t as f64, 0.0]).unwrap())
            .collect();
        let r = pca2(&p).unwrap();
        for proj in &r.projections {
            assert!(proj[1].abs() < 1e-9);
        }
    }

    /// Points (±2, 0), (0, ±1): covariance diag(2, 0.5) by hand, so PC1 is
    /// the x-axis.
    #[test]
    fn axis_aligned_ellipse_picks_x_axis() {
        let p = pts(&[&[2.0, 0.0], &[-2.0, 0.0], &[0.0, 1.0], &[0.0, -1.0]]);
        let r = pca2(&p).unwrap();
        assert!((r.components[0][0] - 1.0).abs() < 1e-9);
        assert!(r.components[0][1].abs() < 1e-9);
        assert!((r.variances[0] - 2.0).abs() < 1e-9);
        assert!((r.variances[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn identical_points_have_no_variance() {
        let p = pts(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        assert_eq!(pca2(&p).unwrap_err().to_string(), "no variance");
        assert!(pca2(&p[..2]).is_err());
    }

    fn rotation(theta: f64, phi: f64) -> [[f64; 3]; 3] {
        let (s, c) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        let rz = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|k| rz[i][k] * rx[k][j]).sum();
            }
        }
        out
    }

    proptest! {
        #[test]
        fn rotation_preserves_projected_distances(theta in 0.0f64..6.28, phi in 0.0f64..6.28) {
            // Well-separated spectrum so the top-2 subspace is stable.
            let base: Vec<[f64; 3]> = (0..12)
                .map(|i| {
                    let t = i as f64;
                    [3.0 * (t * 0.7).sin(), 1.5 * (t * 1.3).cos(), 0.2 * (t * 2.1).sin()]
                })
                .collect();
            let r = rotation(theta, phi);
            let rotated: Vec<Vector<f64>> = base
                .iter()
                .map(|p| Vector::new((0..3).map(|i| (0..3).map(|k| r[i][k] * p[k]).sum()).collect()).unwrap())
                .collect();
            let original: Vec<Vector<f64>> = base.iter().map(|p| Vector::new(p.to_vec()).unwrap()).collect();
            let a = pca2(&original).unwrap().projections;
            let b = pca2(&rotated).unwrap().projections;
            for i in 0..a.len() {
                for j in 0..i {
                    let da = ((a[i][0] - a[j][0]).powi(2) + (a[i][1] - a[j][1]).powi(2)).sqrt();
                    let db = ((b[i][0] - b[j][0]).powi(2) + (b[i][1] - b[j][1]).powi(2)).sqrt();
                    prop_assert!((da - db).abs() < 1e-9, "{} vs {}", da, db);
                }
            }
        }

        #[test]
        fn two_components_beat_any_axis(raw in proptest::collection::vec(-4.0f64..4.0, 15)) {
            let p: Vec<Vector<f64>> = raw.chunks(3).map(|c| Vector::new(c.to_vec()).unwrap()).collect();
            let r = match pca2(&p) { Ok(r) => r, Err(_) => return Ok(()) };
            let n = p.len() as f64;
            let captured = r.projections.iter().map(|q| q[0] * q[0] + q[1] * q[1]).sum::<f64>() / n;
            for axis in 0..3 {
                let m = p.iter().map(|x| x[axis]).sum::<f64>() / n;
                let var = p.iter().map(|x| (x[axis] - m).powi(2)).sum::<f64>() / n;
                prop_assert!(captured >= var - 1e-9);
            }
        }
    }
}
