use fvlab::fv::{
    ablated_accuracy, all_heads, cie_table, extract_fv, head_contribution, injection_sweep, localize_fv_heads,
    mediation_prompts, patched_prob, zero_shot_set, FVHeadSet, HeadId, SweepConfig,
};
use fvlab::interventions::ContextualizationMode;
use fvlab::model::{accuracy, forward, InterventionPlan, ModelConfig, Params};
use fvlab::numerics::{bootstrap_ci, Vector};
use fvlab::tasks::{make_normal_task, TaskDef, Vocab};

fn setup() -> (Vocab, Params<f64>, TaskDef) {
    let vocab = Vocab::new(20).unwrap();
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_head: 8,
        d_ff: 32,
        vocab_size: vocab.size(),
        max_seq: 42,
        seed: 13,
    };
    let task = make_normal_task(&vocab, 4, 12, 8).unwrap();
    (vocab, Params::init(&cfg).unwrap(), task)
}

#[test]
fn random_model_has_no_mediating_heads() {
    let (vocab, params, task) = setup();
    let (clean, corrupted) = mediation_prompts(&vocab, &task, 40, 5, 3).unwrap();
    let table = cie_table(&params, &clean, &corrupted).unwrap();
    for (h, row) in all_heads(2, 2).iter().zip(&table) {
        let ci = bootstrap_ci(row, 1000, 8).unwrap();
        println!("{h:?}: AIE {:.2e} CI [{:.2e}, {:.2e}]", ci.mean, ci.lo, ci.hi);
        assert!(ci.mean.abs() < 1e-2, "{h:?} {ci:?}");
    }
}

#[test]
fn self_patch_has_zero_indirect_effect() {
    let (vocab, params, task) = setup();
    let (_, corrupted) = mediation_prompts(&vocab, &task, 10, 4, 0).unwrap();
    for p in &corrupted {
        let run = forward(&params, p, &InterventionPlan::empty()).unwrap();
        let base = run.prob(p.answer);
        for h in all_heads(2, 2) {
            let own = run.cache.head_output(h.layer, h.head, p.t_final).to_vec();
            assert_eq!(patched_prob(&params, p, h, &own).unwrap(), base);
        }
    }
}

#[test]
fn extraction_is_additive_over_heads() {
    let (vocab, params, task) = setup();
    let (clean, _) = mediation_prompts(&vocab, &task, 10, 5, 1).unwrap();
    let p = &clean[0];
    let run = forward(&params, p, &InterventionPlan::empty()).unwrap();
    let heads = all_heads(2, 2);
    let set = FVHeadSet {
        heads: heads.clone(),
        aie_scores: vec![0.0; 4],
    };
    let fv = extract_fv(&params, &run, &set, p, ContextualizationMode::Contextualized).unwrap();
    let mut sum = vec![0.0; 16];
    for &h in &heads {
        for (s, x) in sum.iter_mut().zip(head_contribution(&params, &run, h, p.t_final).unwrap()) {
            *s += x;
        }
    }
    for (a, b) in fv.vec.as_slice().iter().zip(&sum) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(fv.heads, heads);
    assert!(head_contribution(&params, &run, HeadId { layer: 2, head: 0 }, p.t_final).is_err());
}

#[test]
fn zero_alpha_sweep_is_the_baseline() {
    let (vocab, params, task) = setup();
    let zs = zero_shot_set(&vocab, &task).unwrap();
    let fv = Vector::new(vec![5.0; 16]).unwrap();
    let cfg = SweepConfig {
        l_prime: 1,
        alpha_grid: vec![0.0],
        ..SweepConfig::default_for(2)
    };
    let r = injection_sweep(&params, &fv, &zs, &cfg).unwrap();
    assert_eq!(r.acc_max, r.baseline_zero_shot_acc);
    assert_eq!(r.baseline_zero_shot_acc, accuracy(&params, &zs).unwrap());
    let bad = SweepConfig { l_prime: 2, ..cfg };
    assert!(injection_sweep(&params, &fv, &zs, &bad).is_err());
}

#[test]
fn localization_covers_all_heads_when_asked() {
    let (vocab, params, task) = setup();
    let set = localize_fv_heads(&params, &vocab, std::slice::from_ref(&task), 10, 3, 4, 0).unwrap();
    let mut got = set.heads.clone();
    got.sort();
    assert_eq!(got, all_heads(2, 2));
    assert!(set.aie_scores.windows(2).all(|w| w[0] >= w[1]));
    assert!(localize_fv_heads(&params, &vocab, &[task.clone()], 10, 3, 5, 0).is_err());
    assert!(localize_fv_heads(&params, &vocab, &[task], 9, 3, 1, 0).is_err());
}

#[test]
fn ablating_nothing_is_plain_accuracy() {
    let (vocab, params, task) = setup();
    let (clean, _) = mediation_prompts(&vocab, &task, 10, 5, 2).unwrap();
    assert_eq!(ablated_accuracy(&params, &[], &clean).unwrap(), accuracy(&params, &clean).unwrap());
}
