mod common;

use fvlab::analysis::{
    attention_stats, example_masses, factorial_plans, fit_superposition, reconstruction_ratio, run_null, NullKind,
    SuperpositionFit, SuperpositionSample,
};
use fvlab::fv::{all_heads, extract_fv, zero_shot_set, FVHeadSet, SweepConfig};
use fvlab::interventions::{build_subfv_plan, build_uncontextualized_plan, ContextualizationMode};
use fvlab::model::{forward, InterventionPlan, ModelConfig, Params};
use fvlab::tasks::{make_normal_task, sample_prompt, PositionalSetting, PromptSource, SamplingOptions, Vocab};
use proptest::prelude::*;

#[test]
fn null_ordering_on_structured_synthetic_data() {
    let w = [0.4, -0.3, 0.9, 0.2];
    let batch = common::synthetic_batch(50, 4, 1024, &w, 1.0, 17);
    let real = fit_superposition(&batch, 0.0).unwrap();
    let mism = run_null(&batch, NullKind::MismatchedDictionary, 0.0, 3).unwrap();
    let orth = run_null(&batch, NullKind::Orthogonalized, 0.0, 3).unwrap();
    println!("real {} mismatched {} orthogonalized {}", real.mean_cosine, mism.mean_cosine, orth.mean_cosine);
    for (a, b) in real.weights.iter().zip(w) {
        assert!((a - b).abs() < 1e-9);
    }
    assert!(real.mean_cosine > mism.mean_cosine && mism.mean_cosine > orth.mean_cosine);
    assert!(orth.mean_cosine.abs() <= 0.05);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn exact_mixtures_are_recovered(w in proptest::collection::vec(-2.0f64..2.0, 3), seed in 0u64..1000) {
        let batch = common::synthetic_batch(12, 3, 24, &w, 1.0, seed);
        let fit = fit_superposition(&batch, 0.0).unwrap();
        for (a, b) in fit.weights.iter().zip(&w) {
            prop_assert!((a - b).abs() < 1e-8);
        }
        for r2 in &fit.per_prompt_r2 {
            prop_assert!((r2 - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ridge_shrinks_weights(seed in 0u64..1000) {
        let batch = common::synthetic_batch(8, 3, 16, &[1.0, 1.0, 1.0], 0.5, seed);
        let norm = |f: &SuperpositionFit| f.weights.iter().map(|x| x * x).sum::<f64>();
        let small = fit_superposition(&batch, 1e-6).unwrap();
        let big = fit_superposition(&batch, 1e3).unwrap();
        prop_assert!(norm(&big) < norm(&small));
    }
}

fn small_model() -> (Vocab, Params<f64>) {
    let vocab = Vocab::new(20).unwrap();
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_head: 8,
        d_ff: 32,
        vocab_size: vocab.size(),
        max_seq: 42,
        seed: 21,
    };
    (vocab, Params::init(&cfg).unwrap())
}

#[test]
fn factorial_corners_match_plain_modes() {
    let (vocab, params) = small_model();
    let task = make_normal_task(&vocab, 2, 12, 8).unwrap();
    let p = sample_prompt(&vocab, PromptSource::Task(&task), 4, PositionalSetting::Uniform, 0, SamplingOptions::default()).unwrap();
    let [p00, _, _, p11] = factorial_plans(&params, &p).unwrap();
    let unc = forward(&params, &p, &build_uncontextualized_plan(&p)).unwrap();
    let ctx = forward(&params, &p, &InterventionPlan::empty()).unwrap();
    assert_eq!(forward(&params, &p, &p00).unwrap().logits, unc.logits);
    assert_eq!(forward(&params, &p, &p11).unwrap().logits, ctx.logits);
}

#[test]
fn attention_mass_is_bounded_and_subfv_mass_is_local() {
    let (vocab, params) = small_model();
    let task = make_normal_task(&vocab, 2, 12, 8).unwrap();
    let p = sample_prompt(&vocab, PromptSource::Task(&task), 5, PositionalSetting::Uniform, 1, SamplingOptions::default()).unwrap();
    let heads = FVHeadSet {
        heads: all_heads(2, 2),
        aie_scores: vec![0.0; 4],
    };
    let run = forward(&params, &p, &InterventionPlan::empty()).unwrap();
    let s = attention_stats(&run, &heads, &p).unwrap();
    assert!(s.t > 0.0 && s.t <= 1.0 + 1e-12);
    assert!((s.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let sub = forward(&params, &p, &build_subfv_plan(&p, 2, ContextualizationMode::Contextualized).unwrap()).unwrap();
    let m = example_masses(&sub, &heads, &p).unwrap();
    for (i, x) in m.iter().enumerate() {
        if i != 2 {
            assert_eq!(*x, 0.0);
        }
    }
}

#[test]
fn exact_reconstruction_has_unit_ratio() {
    let (vocab, params) = small_model();
    let task = make_normal_task(&vocab, 2, 12, 8).unwrap();
    let heads = FVHeadSet {
        heads: all_heads(2, 2),
        aie_scores: vec![0.0; 4],
    };
    let zs = zero_shot_set(&vocab, &task).unwrap();
    let mut samples = Vec::new();
    for seed in 0..3 {
        let p = sample_prompt(&vocab, PromptSource::Task(&task), 3, PositionalSetting::Uniform, seed, SamplingOptions::default()).unwrap();
        let run = forward(&params, &p, &InterventionPlan::empty()).unwrap();
        let full = extract_fv(&params, &run, &heads, &p, ContextualizationMode::Contextualized).unwrap().vec;
        samples.push(SuperpositionSample {
            sub_fvs: vec![full.clone()],
            full_fv: full,
        });
    }
    let fit = fit_superposition(&samples, 0.0).unwrap();
    let sweep = SweepConfig {
        alpha_grid: vec![1.0, 4.0, 16.0],
        ..SweepConfig::default_for(2)
    };
    match reconstruction_ratio(&params, &fit, &samples, &vec![zs; 3], &sweep) {
        Ok(r) => assert!((r.ratio_of_means - 1.0).abs() < 1e-12, "{r:?}"),
        Err(fvlab::Error::FullFvIneffective) => {}
        Err(e) => panic!("{e}"),
    }
}
