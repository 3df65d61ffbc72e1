use fvlab::theory::{
    construct_analytic_optimum, enumerate_prompts, theory_attention, theory_forward, theory_loss, train_theory,
    verify_theorem, DiscreteTaskPair, TheoryHyper, TheoryParams,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn analytic_optimum_beats_nearby_points() {
    let pair = DiscreteTaskPair::standard(6, 1.0 / 3.0).unwrap();
    let opt = construct_analytic_optimum(&pair, 3, 0.01, 0.01, 4).unwrap();
    let base = opt.loss.total;
    let flat = opt.params.to_flat();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worse = 0;
    for _ in 0..50 {
        let moved: Vec<f64> = flat.iter().map(|x| x + 1e-3 * rng.gen_range(-1.0..1.0)).collect();
        let p = TheoryParams::from_flat(6, 4, &moved).unwrap();
        let l = theory_loss(&p, &pair, 3, 0.01, 0.01).unwrap().total;
        if l >= base - 1e-9 {
            worse += 1;
        }
    }
    assert_eq!(worse, 50);
}

#[test]
fn trained_model_on_a_larger_pair_ignores_ambiguous_examples() {
    let pair = DiscreteTaskPair::standard(8, 0.25).unwrap();
    let init = TheoryParams::random(8, 4, 0.1, 1);
    let hyper = TheoryHyper {
        steps: 3000,
        n: 3,
        seed: 2,
        ..TheoryHyper::default()
    };
    let out = train_theory(&init, &pair, 0.01, 0.01, &hyper).unwrap();
    let opt = construct_analytic_optimum(&pair, 3, 0.01, 0.01, 4).unwrap();
    let trained = theory_loss(&out.params, &pair, 3, 0.01, 0.01).unwrap();
    let report = verify_theorem(&out.params, &pair, 3, 0.01, 0.01, 0.05).unwrap();
    println!("trained {} analytic {} report {report:?}", trained.total, opt.loss.total);
    assert!(report.passed);
    assert!(trained.total <= 1.05 * opt.loss.total);
    assert!(out.loss_trace.last().unwrap() < out.loss_trace.first().unwrap());
}

#[test]
fn prompt_weights_form_a_distribution() {
    let pair = DiscreteTaskPair::standard(6, 1.0 / 3.0).unwrap();
    let prompts = enumerate_prompts(&pair, 2);
    let total: f64 = prompts.iter().map(|p| p.weight).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert!(prompts.iter().all(|p| (1..=2).contains(&p.examples.len())));
}

#[test]
fn invalid_pairs_and_prompts_are_rejected() {
    assert!(DiscreteTaskPair::new(vec![1, -1], vec![1, -1]).is_err());
    assert!(DiscreteTaskPair::new(vec![1, -1], vec![-1, 1]).is_err());
    let pair = DiscreteTaskPair::standard(6, 1.0 / 3.0).unwrap();
    assert!(theory_forward(&TheoryParams::zeros(6, 2), &[], 0).is_err());
    assert!(theory_loss(&TheoryParams::zeros(6, 2), &pair, 1, 0.01, 0.01).is_err());
}

proptest! {
    #[test]
    fn attention_is_a_distribution(seed in 0u64..500, k in 1usize..6, xq in 0usize..6) {
        let p = TheoryParams::random(6, 3, 2.0, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let ex: Vec<(usize, i8)> = (0..k).map(|_| (rng.gen_range(0..6), if rng.gen() { 1 } else { -1 })).collect();
        let w = theory_attention(&p, &ex, xq);
        prop_assert_eq!(w.len(), k);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flat_roundtrip(seed in 0u64..500) {
        let p = TheoryParams::random(6, 3, 1.0, seed);
        prop_assert_eq!(TheoryParams::from_flat(6, 3, &p.to_flat()).unwrap(), p);
    }
}
