#![allow(dead_code)]

use fvlab::analysis::SuperpositionSample;
use fvlab::numerics::Vector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Sub-FVs `u_i + noise·ε_{b,i}` sharing a per-position component `u_i`,
/// with `full_fv = Σ w_i v_i` exactly.
pub fn synthetic_batch(b: usize, n: usize, d: usize, weights: &[f64], noise: f64, seed: u64) -> Vec<SuperpositionSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |len: usize| -> Vec<f64> { (0..len).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let shared: Vec<Vec<f64>> = (0..n).map(|_| gauss(d)).collect();
    (0..b)
        .map(|_| {
            let subs: Vec<Vec<f64>> = shared
                .iter()
                .map(|u| u.iter().zip(gauss(d)).map(|(a, e)| a + noise * e).collect())
                .collect();
            let mut full = vec![0.0; d];
            for (w, v) in weights.iter().zip(&subs) {
                for (f, x) in full.iter_mut().zip(v) {
                    *f += w * x;
                }
            }
            SuperpositionSample {
                sub_fvs: subs.into_iter().map(|v| Vector::new(v).unwrap()).collect(),
                full_fv: Vector::new(full).unwrap(),
            }
        })
        .collect()
}
