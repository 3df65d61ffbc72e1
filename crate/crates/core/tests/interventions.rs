use fvlab::interventions::{
    build_key_swap_plan, build_qkv_patch_plan, build_subfv_plan, build_uncontextualized_plan, subfv_keys,
    uncontextualized_mask, ContextualizationMode, KeySwapDirection, PatchChannelSet,
};
use fvlab::model::{forward, Channel, InterventionPlan, ModelConfig, Params};
use fvlab::tasks::{
    corrupt_prompt, make_ambiguous_pair, make_normal_task, sample_prompt, CorruptionKind, Donor, ExampleFlag,
    PairMember, PositionalSetting, Prompt, PromptSource, SamplingOptions, Vocab,
};

fn setup() -> (Vocab, Params<f64>) {
    let vocab = Vocab::new(20).unwrap();
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_head: 8,
        d_ff: 32,
        vocab_size: vocab.size(),
        max_seq: 42,
        seed: 5,
    };
    let params = Params::init(&cfg).unwrap();
    (vocab, params)
}

fn normal_prompt(vocab: &Vocab, n: usize, seed: u64) -> Prompt {
    let task = make_normal_task(vocab, 1, 12, 8).unwrap();
    sample_prompt(vocab, PromptSource::Task(&task), n, PositionalSetting::Uniform, seed, SamplingOptions::default()).unwrap()
}

#[test]
fn uncontextualized_mask_blocks_only_cross_component_edges() {
    let (vocab, _) = setup();
    let p = normal_prompt(&vocab, 4, 0);
    let m = uncontextualized_mask(&p);
    let comp = p.component_of();
    for r in 0..p.len() {
        for c in 0..p.len() {
            let expect = c <= r && (r == p.t_final || comp[r] == comp[c]);
            assert_eq!(m.get(r, c), expect, "edge {r}->{c}");
        }
    }
}

#[test]
fn subfv_row_reads_one_example_and_the_query() {
    let (vocab, _) = setup();
    let p = normal_prompt(&vocab, 3, 1);
    for mode in [ContextualizationMode::Contextualized, ContextualizationMode::Uncontextualized] {
        for i in 0..3 {
            let plan = build_subfv_plan::<f64>(&p, i, mode).unwrap();
            let mask = plan.edge_mask.as_ref().unwrap();
            assert_eq!(mask.allowed_keys(p.t_final), subfv_keys(&p, i));
            // Rows other than t_final keep the base mask of the mode.
            let base = match mode {
                ContextualizationMode::Contextualized => fvlab::model::EdgeMask::causal(p.len()),
                ContextualizationMode::Uncontextualized => uncontextualized_mask(&p),
            };
            for r in 0..p.t_final {
                assert_eq!(mask.allowed_keys(r), base.allowed_keys(r));
            }
        }
        assert!(build_subfv_plan::<f64>(&p, 3, mode).is_err());
    }
}

#[test]
fn v_patch_leaves_attention_unchanged() {
    let (vocab, params) = setup();
    let target = normal_prompt(&vocab, 3, 2);
    let source = normal_prompt(&vocab, 3, 3);
    let src_run = forward(&params, &source, &InterventionPlan::empty()).unwrap();
    let base = forward(&params, &target, &InterventionPlan::empty()).unwrap();
    let plan = build_qkv_patch_plan(&target, &src_run, &PatchChannelSet::new(&[Channel::V]).unwrap()).unwrap();
    let patched = forward(&params, &target, &plan).unwrap();
    let t = target.t_final;
    for h in 0..2 {
        assert_eq!(patched.cache.attn_row(0, h, t), base.cache.attn_row(0, h, t));
    }
    assert_ne!(patched.logits, base.logits);
}

#[test]
fn q_patch_scope_is_the_final_row() {
    let (vocab, params) = setup();
    let target = normal_prompt(&vocab, 3, 4);
    let source = normal_prompt(&vocab, 3, 5);
    let src_run = forward(&params, &source, &InterventionPlan::empty()).unwrap();
    let base = forward(&params, &target, &InterventionPlan::empty()).unwrap();
    let plan = build_qkv_patch_plan(&target, &src_run, &PatchChannelSet::new(&[Channel::Q]).unwrap()).unwrap();
    let patched = forward(&params, &target, &plan).unwrap();
    for r in 0..target.t_final {
        assert_eq!(patched.cache.attn_row(0, 0, r), base.cache.attn_row(0, 0, r));
    }
    assert_eq!(patched.cache.q(0, 0, target.t_final), src_run.cache.q(0, 0, target.t_final));
}

#[test]
fn qkv_patch_rejects_other_layouts() {
    let (vocab, params) = setup();
    let target = normal_prompt(&vocab, 3, 6);
    let longer = normal_prompt(&vocab, 4, 6);
    let run = forward(&params, &longer, &InterventionPlan::empty()).unwrap();
    assert!(build_qkv_patch_plan(&target, &run, &PatchChannelSet::all()).is_err());
    assert!(PatchChannelSet::new(&[]).is_err());
}

#[test]
fn key_swap_self_patch_equals_uncontextualized_run() {
    let (vocab, params) = setup();
    let pair = make_ambiguous_pair(&vocab, 9, 12, 8, 1.0 / 3.0).unwrap();
    let p = sample_prompt(&vocab, PromptSource::Pair(&pair, PairMember::A), 5, PositionalSetting::Setting1, 0, SamplingOptions::default()).unwrap();
    let unc = build_uncontextualized_plan(&p);
    let own = forward(&params, &p, &unc).unwrap();
    let plan = build_key_swap_plan(&p, &p, &own, KeySwapDirection::AmbiguousToUnambiguous).unwrap();
    assert_eq!(forward(&params, &p, &plan).unwrap().logits, own.logits);
}

#[test]
fn key_swap_scope_and_flag_checks() {
    let (vocab, params) = setup();
    let pair = make_ambiguous_pair(&vocab, 9, 12, 8, 1.0 / 3.0).unwrap();
    let p = sample_prompt(&vocab, PromptSource::Pair(&pair, PairMember::B), 5, PositionalSetting::Setting2, 1, SamplingOptions::default()).unwrap();
    let donor = corrupt_prompt(&vocab, &p, CorruptionKind::UnambigKeyPool, Donor::Pair(&pair), 3).unwrap();
    let donor_run = forward(&params, &donor, &build_uncontextualized_plan(&donor)).unwrap();
    let plan = build_key_swap_plan(&p, &donor, &donor_run, KeySwapDirection::AmbiguousToUnambiguous).unwrap();
    let ov = plan.row_overrides.last().unwrap();
    assert_eq!(ov.channel, Channel::K);
    assert_eq!(ov.rows, vec![p.t_final]);
    let expected: Vec<usize> = (0..p.n_shots())
        .filter(|&i| p.example_flags[i] == ExampleFlag::Ambiguous)
        .flat_map(|i| p.example_span(i).positions())
        .collect();
    assert_eq!(ov.positions, expected);
    // The same donor cannot serve the opposite direction.
    assert!(build_key_swap_plan(&p, &donor, &donor_run, KeySwapDirection::UnambiguousToAmbiguous).is_err());
}
