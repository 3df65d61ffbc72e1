use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analysis::{
    attention_stats, contextualization_contrast, factorial_shapley, fit_superposition, q_composition_experiment,
    reconstruction_ratio, run_null, shared_qk_pca, AttentionStats, NullKind, QInfoPrompt, Regime, SuperpositionSample,
};
use crate::error::{Error, Result};
use crate::fv::{
    ablated_accuracy, all_heads, extract_fv, injection_sweep, localize_fv_heads, FVHeadSet, HeadId,
};
use crate::interventions::{
    build_key_swap_plan, build_subfv_plan, build_uncontextualized_plan, ContextualizationMode, KeySwapDirection,
};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint};
use crate::model::{accuracy, forward, train, EdgeMask, InterventionPlan, Params};
use crate::numerics::{bootstrap_ci, cosine};
use crate::tasks::{
    corrupt_prompt, make_ambiguous_pair, make_normal_task, sample_prompt, AmbiguousPair, CorruptionKind, Donor,
    ExampleFlag, PairMember, PositionalSetting, Prompt, PromptSource, SamplingOptions, TaskDef, Vocab,
};
use crate::theory::{
    construct_analytic_optimum, theory_grad_check, theory_loss, train_theory, verify_theorem, DiscreteTaskPair,
    TheoryParams,
};
use crate::Vec64;

use super::config::{derive_seed, ExperimentConfig, Precision};
use super::report::{emit_report, write_json, Cell, Table};

pub const CHECKPOINT_FILE: &str = "model.fvlb";
pub const HEADS_FILE: &str = "fv_heads.json";

/// Everything a stage needs: validated config, output directory and the
/// task suite rebuilt from the config.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub vocab: Vocab,
    pub normal: Vec<TaskDef>,
    pub pairs: Vec<AmbiguousPair>,
}

impl Context {
    pub fn new(cfg: ExperimentConfig, out: PathBuf) -> Result<Self> {
        cfg.validate()?;
        let t = &cfg.tasks;
        let vocab = Vocab::new(t.n_symbols)?;
        let normal = t
            .normal_seeds
            .iter()
            .map(|&s| make_normal_task(&vocab, s, t.x_size, t.y_size))
            .collect::<Result<_>>()?;
        let pairs = t
            .ambiguous_seeds
            .iter()
            .map(|&s| make_ambiguous_pair(&vocab, s, t.x_size, t.y_size, t.overlap_fraction))
            .collect::<Result<_>>()?;
        std::fs::create_dir_all(&out)?;
        Ok(Self {
            cfg,
            out,
            vocab,
            normal,
            pairs,
        })
    }

    pub fn seed(&self, label: &str) -> u64 {
        derive_seed(self.cfg.master_seed, label)
    }

    fn members(&self) -> Vec<(&AmbiguousPair, PairMember)> {
        self.pairs
            .iter()
            .flat_map(|p| [(p, PairMember::A), (p, PairMember::B)])
            .collect()
    }

    fn training_tasks(&self) -> Vec<TaskDef> {
        let mut tasks = self.normal.clone();
        for p in &self.pairs {
            tasks.push(p.task_a.clone());
            tasks.push(p.task_b.clone());
        }
        tasks
    }

    fn checkpoint(&self) -> PathBuf {
        self.out.join(CHECKPOINT_FILE)
    }

    fn load_params(&self) -> Result<Params<f64>> {
        let path = self.checkpoint();
        if !path.exists() {
            return Err(Error::MissingArtifact(format!(
                "checkpoint {} not found; run the train stage first",
                path.display()
            )));
        }
        let (params, side) = load_checkpoint::<f64>(&path)?;
        if side.config != self.cfg.model_config() {
            return Err(Error::Config {
                field: "model".into(),
                msg: format!("checkpoint {} was trained with a different model config", path.display()),
            });
        }
        Ok(params)
    }

    fn load_heads(&self) -> Result<FVHeadSet> {
        let path = self.out.join(HEADS_FILE);
        if !path.exists() {
            return Err(Error::MissingArtifact(format!(
                "{} not found; run the localize stage first",
                path.display()
            )));
        }
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    fn prompts(&self, source: PromptSource<'_>, n: usize, setting: PositionalSetting, count: usize, label: &str) -> Result<Vec<Prompt>> {
        let base = self.seed(label);
        (0..count as u64)
            .map(|i| sample_prompt(&self.vocab, source, n, setting, base.wrapping_add(i), SamplingOptions::default()))
            .collect()
    }

    fn zero_shot(&self, task: &TaskDef, pair: Option<&AmbiguousPair>) -> Result<Vec<Prompt>> {
        let inputs = match pair {
            Some(p) => p.unambiguous_inputs(),
            None => task.input_space.clone(),
        };
        inputs.iter().map(|&x| Prompt::zero_shot(&self.vocab, task, x)).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageOutput {
    pub artifacts: Vec<PathBuf>,
}

fn rel(paths: Vec<PathBuf>, out: &Path) -> Vec<PathBuf> {
    paths
        .into_iter()
        .map(|p| p.strip_prefix(out).map(Path::to_path_buf).unwrap_or(p))
        .collect()
}

fn ci(samples: &[f64], resamples: usize, seed: u64) -> Result<(f64, f64, f64)> {
    let c = bootstrap_ci(samples, resamples, seed)?;
    Ok((c.mean, c.lo, c.hi))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn mode_plan(p: &Prompt, mode: ContextualizationMode) -> InterventionPlan<f64> {
    match mode {
        ContextualizationMode::Contextualized => InterventionPlan::empty(),
        ContextualizationMode::Uncontextualized => build_uncontextualized_plan(p),
    }
}

const MODES: [ContextualizationMode; 2] = [ContextualizationMode::Contextualized, ContextualizationMode::Uncontextualized];

fn setting_label(s: PositionalSetting) -> &'static str {
    match s {
        PositionalSetting::Setting1 => "setting1",
        PositionalSetting::Setting2 => "setting2",
        PositionalSetting::Uniform => "uniform",
    }
}

pub fn train_stage(ctx: &Context) -> Result<StageOutput> {
    let cfg = &ctx.cfg;
    let model = cfg.model_config();
    let hyper = cfg.train_hyper();
    let tasks = ctx.training_tasks();
    let (params, trace) = match cfg.train.precision {
        Precision::F32 => {
            let out = train::<f32>(&model, &ctx.vocab, &tasks, &hyper)?;
            (out.params.cast::<f64>(), out.loss_trace)
        }
        Precision::F64 => {
            let out = train::<f64>(&model, &ctx.vocab, &tasks, &hyper)?;
            (out.params, out.loss_trace)
        }
    };
    save_checkpoint(&params, &ctx.checkpoint(), json!({ "config_hash": cfg.hash(), "train_seed": hyper.seed }))?;
    let mut artifacts = vec![ctx.checkpoint()];

    let mut loss = Table::new("train_loss", &["step", "loss", "seed"]);
    for (step, l) in trace.iter().enumerate() {
        loss.push(vec![step.into(), (*l).into(), hyper.seed.into()])?;
    }
    let tail = &trace[trace.len().saturating_sub(100)..];
    artifacts.extend(emit_report(&loss, &json!({ "final_loss_mean_last_100": mean(tail) }), &ctx.out)?);

    let mut eval = Table::new("train_eval", &["task", "family", "shots", "accuracy", "n_prompts", "seed"]);
    let mut normal_by_shots: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &n in &cfg.shots {
        for task in &ctx.normal {
            let label = format!("eval/{}/{n}", task.name);
            let ps = ctx.prompts(PromptSource::Task(task), n, PositionalSetting::Uniform, cfg.train.eval_prompts, &label)?;
            let acc = accuracy(&params, &ps)?;
            normal_by_shots.entry(n).or_default().push(acc);
            eval.push(vec![task.name.clone().into(), "normal".into(), n.into(), acc.into(), ps.len().into(), ctx.seed(&label).into()])?;
        }
        for (pair, which) in ctx.members() {
            let task = pair.member(which);
            let label = format!("eval/{}/{n}", task.name);
            let ps = ctx.prompts(PromptSource::Pair(pair, which), n, PositionalSetting::Uniform, cfg.train.eval_prompts, &label)?;
            let acc = accuracy(&params, &ps)?;
            eval.push(vec![task.name.clone().into(), "ambiguous".into(), n.into(), acc.into(), ps.len().into(), ctx.seed(&label).into()])?;
        }
    }
    let summary: BTreeMap<String, f64> = normal_by_shots
        .iter()
        .map(|(n, accs)| (format!("normal_mean_accuracy_{n}_shot"), mean(accs)))
        .collect();
    artifacts.extend(emit_report(&eval, &summary, &ctx.out)?);
    Ok(StageOutput {
        artifacts: rel(artifacts, &ctx.out),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FvSummary {
    pub top_k: usize,
    pub heads: Vec<HeadId>,
    pub n_fvs: usize,
    pub baseline_zero_shot_acc: f64,
    pub mean_acc_max: f64,
    pub gain: f64,
    pub gain_ci: (f64, f64),
}

pub fn localize_stage(ctx: &Context) -> Result<StageOutput> {
    let cfg = &ctx.cfg;
    let params = ctx.load_params()?;
    let c = &params.config;
    let seed = ctx.seed("localize");
    let ranking = localize_fv_heads(&params, &ctx.vocab, &ctx.normal, cfg.fv.aie_prompts, cfg.fv.aie_shots, c.n_total_heads(), seed)?;
    let top_k = cfg.top_k();
    let heads = ranking.top(top_k);
    write_json(&ctx.out.join(HEADS_FILE), &heads)?;
    let mut artifacts = vec![ctx.out.join(HEADS_FILE)];

    let mut table = Table::new("heads", &["rank", "layer", "head", "aie", "selected", "seed"]);
    for (r, (h, s)) in ranking.heads.iter().zip(&ranking.aie_scores).enumerate() {
        table.push(vec![(r + 1).into(), h.layer.into(), h.head.into(), (*s).into(), (r < top_k).into(), seed.into()])?;
    }
    artifacts.extend(emit_report(&table, &json!({ "top_k": top_k }), &ctx.out)?);

    let sweep = cfg.sweep_config();
    let mut cells = Table::new("fv_sweep", &["task", "prompt", "layer", "alpha", "acc", "seed"]);
    let mut per_fv = Table::new("fv_injection", &["task", "prompt", "baseline", "acc_max", "argmax_layer", "argmax_alpha", "seed"]);
    let (mut bases, mut maxes, mut gains) = (Vec::new(), Vec::new(), Vec::new());
    for task in &ctx.normal {
        let label = format!("fv/{}", task.name);
        let s = ctx.seed(&label);
        let zs = ctx.zero_shot(task, None)?;
        let ps = ctx.prompts(PromptSource::Task(task), cfg.fv.fv_shots, PositionalSetting::Uniform, cfg.fv.fv_prompts_per_task, &label)?;
        for (i, p) in ps.iter().enumerate() {
            let run = forward(&params, p, &InterventionPlan::empty())?;
            let fv = extract_fv(&params, &run, &heads, p, ContextualizationMode::Contextualized)?;
            let r = injection_sweep(&params, &fv.vec, &zs, &sweep)?;
            for cell in &r.acc {
                cells.push(vec![task.name.clone().into(), i.into(), cell.layer.into(), cell.alpha.into(), cell.acc.into(), s.into()])?;
            }
            per_fv.push(vec![
                task.name.clone().into(),
                i.into(),
                r.baseline_zero_shot_acc.into(),
                r.acc_max.into(),
                r.argmax.0.into(),
                r.argmax.1.into(),
                s.into(),
            ])?;
            bases.push(r.baseline_zero_shot_acc);
            maxes.push(r.acc_max);
            gains.push(r.acc_max - r.baseline_zero_shot_acc);
        }
    }
    let (gain, lo, hi) = ci(&gains, cfg.bootstrap.resamples, ctx.seed("fv/gain-ci"))?;
    let summary = FvSummary {
        top_k,
        heads: heads.heads.clone(),
        n_fvs: gains.len(),
        baseline_zero_shot_acc: mean(&bases),
        mean_acc_max: mean(&maxes),
        gain,
        gain_ci: (lo, hi),
    };
    artifacts.extend(emit_report(&cells, &json!({ "l_prime": sweep.l_prime, "alpha_grid": sweep.alpha_grid }), &ctx.out)?);
    artifacts.extend(emit_report(&per_fv, &summary, &ctx.out)?);

    // Ablation: top-k heads against random non-FV sets of the same size.
    let abl_seed = ctx.seed("ablation");
    let mut ps = Vec::new();
    for task in &ctx.normal {
        ps.extend(ctx.prompts(PromptSource::Task(task), cfg.fv.fv_shots, PositionalSetting::Uniform, cfg.fv.aie_prompts, &format!("ablation/{}", task.name))?);
    }
    let mut abl = Table::new("ablation", &["kind", "draw", "heads", "accuracy", "seed"]);
    let fmt_heads = |hs: &[HeadId]| hs.iter().map(|h| format!("L{}H{}", h.layer, h.head)).collect::<Vec<_>>().join(" ");
    let intact = accuracy(&params, &ps)?;
    abl.push(vec!["intact".into(), 0usize.into(), "".into(), intact.into(), abl_seed.into()])?;
    let top_acc = ablated_accuracy(&params, &heads.heads, &ps)?;
    abl.push(vec!["fv_heads".into(), 0usize.into(), fmt_heads(&heads.heads).into(), top_acc.into(), abl_seed.into()])?;
    let others: Vec<HeadId> = all_heads(c.n_layers, c.n_heads)
        .into_iter()
        .filter(|h| !heads.heads.contains(h))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(abl_seed);
    let mut random_accs = Vec::new();
    for d in 0..cfg.fv.ablation_draws {
        let pick: Vec<HeadId> = others.choose_multiple(&mut rng, top_k.min(others.len())).copied().collect();
        let acc = ablated_accuracy(&params, &pick, &ps)?;
        random_accs.push(acc);
        abl.push(vec!["random".into(), d.into(), fmt_heads(&pick).into(), acc.into(), abl_seed.into()])?;
    }
    artifacts.extend(emit_report(
        &abl,
        &json!({
            "intact": intact,
            "fv_heads_ablated": top_acc,
            "random_ablated_mean": mean(&random_accs),
            "fv_heads_hurt_more": top_acc < mean(&random_accs),
        }),
        &ctx.out,
    )?);
    Ok(StageOutput {
        artifacts: rel(artifacts, &ctx.out),
    })
}

/// Full FV and per-example sub-FVs of one prompt under `mode`.
pub fn superposition_sample(params: &Params<f64>, heads: &FVHeadSet, p: &Prompt, mode: ContextualizationMode) -> Result<SuperpositionSample> {
    let run = forward(params, p, &mode_plan(p, mode))?;
    let full_fv = extract_fv(params, &run, heads, p, mode)?.vec;
    let sub_fvs = (0..p.n_shots())
        .map(|i| {
            let r = forward(params, p, &build_subfv_plan(p, i, mode)?)?;
            Ok(extract_fv(params, &r, heads, p, mode)?.vec)
        })
        .collect::<Result<_>>()?;
    Ok(SuperpositionSample { sub_fvs, full_fv })
}

pub fn superpose_stage(ctx: &Context) -> Result<StageOutput> {
    let cfg = &ctx.cfg;
    let params = ctx.load_params()?;
    let heads = ctx.load_heads()?;
    let n = cfg.analysis.superposition_shots;
    let lambda = cfg.analysis.lambda;
    let sweep = cfg.sweep_config();
    let mut prompts = Vec::new();
    let mut zero_shot = Vec::new();
    for task in &ctx.normal {
        let ps = ctx.prompts(PromptSource::Task(task), n, PositionalSetting::Uniform, cfg.analysis.superposition_prompts_per_task, &format!("superpose/{}", task.name))?;
        for p in ps {
            prompts.push(p);
            zero_shot.push(ctx.zero_shot(task, None)?);
        }
    }
    let mut cols = vec!["mode", "fit", "mean_cosine", "cosine_lo", "cosine_hi", "mean_r2"];
    let wnames: Vec<String> = (1..=n).map(|i| format!("w{i}")).collect();
    cols.extend(wnames.iter().map(String::as_str));
    cols.push("seed");
    let mut fits = Table::new("superposition", &cols);
    let mut per_prompt = Table::new("superposition_prompts", &["mode", "fit", "prompt", "task", "cosine", "r2", "seed"]);
    let mut recon = Table::new("reconstruction", &["mode", "prompt", "task", "acc_max_full", "acc_max_reconstructed", "seed"]);
    let mut summary = BTreeMap::new();
    let mut full_by_mode = Vec::new();
    for mode in MODES {
        let samples: Vec<SuperpositionSample> = prompts
            .iter()
            .map(|p| superposition_sample(&params, &heads, p, mode))
            .collect::<Result<_>>()?;
        let null_seed = ctx.seed(&format!("superpose/null/{}", mode.label()));
        let real = fit_superposition(&samples, lambda)?;
        let mism = run_null(&samples, NullKind::MismatchedDictionary, lambda, null_seed)?;
        let orth = run_null(&samples, NullKind::Orthogonalized, lambda, null_seed)?;
        let mut means = BTreeMap::new();
        for (name, fit) in [("real", &real), ("mismatched", &mism), ("orthogonalized", &orth)] {
            let (m, lo, hi) = ci(&fit.per_prompt_cosine, cfg.bootstrap.resamples, null_seed)?;
            let mut row: Vec<Cell> = vec![mode.label().into(), name.into(), m.into(), lo.into(), hi.into(), fit.mean_r2.into()];
            row.extend(fit.weights.iter().map(|&w| Cell::from(w)));
            row.push(null_seed.into());
            fits.push(row)?;
            for (b, (c, r2)) in fit.per_prompt_cosine.iter().zip(&fit.per_prompt_r2).enumerate() {
                per_prompt.push(vec![mode.label().into(), name.into(), b.into(), prompts[b].task.clone().into(), (*c).into(), (*r2).into(), null_seed.into()])?;
            }
            means.insert(name, m);
        }
        let rr = reconstruction_ratio(&params, &real, &samples, &zero_shot, &sweep)?;
        for (b, (f, h)) in rr.acc_max_full.iter().zip(&rr.acc_max_reconstructed).enumerate() {
            recon.push(vec![mode.label().into(), b.into(), prompts[b].task.clone().into(), (*f).into(), (*h).into(), null_seed.into()])?;
        }
        summary.insert(
            mode.label(),
            json!({
                "mean_cosine": means,
                "ordering_holds": means["real"] > means["mismatched"] && means["mismatched"] > means["orthogonalized"],
                "ratio_of_means": rr.ratio_of_means,
                "mean_of_ratios": rr.mean_of_ratios,
                "degenerate": rr.degenerate,
            }),
        );
        full_by_mode.push(samples.into_iter().map(|s| s.full_fv).collect::<Vec<Vec64>>());
    }
    let mut cos = Table::new("fv_ctx_unc_cosine", &["prompt", "task", "cosine", "seed"]);
    let s = ctx.seed("superpose/ctx-unc");
    for (b, (a, u)) in full_by_mode[0].iter().zip(&full_by_mode[1]).enumerate() {
        cos.push(vec![b.into(), prompts[b].task.clone().into(), cosine_or_zero(a, u)?.into(), s.into()])?;
    }
    let mut artifacts = emit_report(&fits, &summary, &ctx.out)?;
    artifacts.extend(emit_report(&per_prompt, &json!({ "lambda": lambda }), &ctx.out)?);
    artifacts.extend(emit_report(&recon, &summary, &ctx.out)?);
    artifacts.extend(emit_report(&cos, &json!({}), &ctx.out)?);
    Ok(StageOutput {
        artifacts: rel(artifacts, &ctx.out),
    })
}

fn cosine_or_zero(a: &Vec64, b: &Vec64) -> Result<f64> {
    match cosine(a, b) {
        Err(Error::UndefinedCosine) => Ok(0.0),
        other => other,
    }
}

/// FV when `t_final` may read only the examples in `keep` plus the query.
fn restricted_fv(params: &Params<f64>, heads: &FVHeadSet, p: &Prompt, keep: &[usize]) -> Result<Vec64> {
    let mut mask = EdgeMask::causal(p.len());
    for c in 0..p.len() {
        mask.set(p.t_final, c, false);
    }
    for &i in keep {
        for c in p.example_span(i).positions() {
            mask.set(p.t_final, c, true);
        }
    }
    for c in p.query_span().start..=p.t_final {
        mask.set(p.t_final, c, true);
    }
    let run = forward(params, p, &InterventionPlan::with_mask(mask))?;
    Ok(extract_fv(params, &run, heads, p, ContextualizationMode::Contextualized)?.vec)
}

fn stats_row(family: &str, task: &str, n: usize, setting: &str, mode: &str, b: usize, s: &AttentionStats, seed: u64) -> Vec<Cell> {
    let p = s.p.iter().map(|x| super::report::fmt_sig(*x)).collect::<Vec<_>>().join(";");
    vec![
        family.into(),
        task.into(),
        n.into(),
        setting.into(),
        mode.into(),
        b.into(),
        s.h_hat.into(),
        s.c.into(),
        s.t.into(),
        s.unambig_share.into(),
        p.into(),
        seed.into(),
    ]
}

pub fn attention_stage(ctx: &Context) -> Result<StageOutput> {
    let cfg = &ctx.cfg;
    let params = ctx.load_params()?;
    let heads = ctx.load_heads()?;
    let count = cfg.analysis.attention_prompts;
    let mut rows = Table::new(
        "attention",
        &["family", "task", "shots", "setting", "mode", "prompt", "h_hat", "c", "t", "unambig_share", "p", "seed"],
    );
    // (family, shots, setting) -> per-prompt (ctx, unc) stats
    let mut groups: BTreeMap<(String, usize, String), Vec<(AttentionStats, AttentionStats)>> = BTreeMap::new();
    let mut record = |family: &str, task: &str, n: usize, setting: &str, ps: &[Prompt], seed: u64, rows: &mut Table| -> Result<()> {
        for (b, p) in ps.iter().enumerate() {
            let c = attention_stats(&forward(&params, p, &InterventionPlan::empty())?, &heads, p)?;
            let u = attention_stats(&forward(&params, p, &build_uncontextualized_plan(p))?, &heads, p)?;
            rows.push(stats_row(family, task, n, setting, "ctx", b, &c, seed))?;
            rows.push(stats_row(family, task, n, setting, "unc", b, &u, seed))?;
            groups.entry((family.into(), n, setting.into())).or_default().push((c.clone(), u.clone()));
            if family == "ambiguous" {
                groups.entry((family.into(), n, "pooled".into())).or_default().push((c, u));
            }
        }
        Ok(())
    };
    for &n in &cfg.shots {
        for task in &ctx.normal {
            let label = format!("attention/{}/{n}", task.name);
            let ps = ctx.prompts(PromptSource::Task(task), n, PositionalSetting::Uniform, count, &label)?;
            record("normal", &task.name, n, "uniform", &ps, ctx.seed(&label), &mut rows)?;
        }
        for &setting in &cfg.positional_settings {
            for (pair, which) in ctx.members() {
                let task = pair.member(which);
                let label = format!("attention/{}/{n}/{}", task.name, setting_label(setting));
                let ps = ctx.prompts(PromptSource::Pair(pair, which), n, setting, count, &label)?;
                record("ambiguous", &task.name, n, setting_label(setting), &ps, ctx.seed(&label), &mut rows)?;
            }
        }
    }
    let mut summary = Table::new(
        "attention_summary",
        &["family", "shots", "setting", "quantity", "ctx", "unc", "delta", "delta_lo", "delta_hi", "n", "seed"],
    );
    for ((family, n, setting), pairs) in &groups {
        let seed = ctx.seed(&format!("attention-ci/{family}/{n}/{setting}"));
        for (name, get) in [
            ("h_hat", (|s: &AttentionStats| s.h_hat) as fn(&AttentionStats) -> f64),
            ("c", |s: &AttentionStats| s.c),
            ("t", |s: &AttentionStats| s.t),
            ("unambig_share", |s: &AttentionStats| s.unambig_share),
        ] {
            let deltas: Vec<f64> = pairs
                .iter()
                .map(|(c, u)| {
                    let d = contextualization_contrast(c, u)?;
                    Ok(match name {
                        "h_hat" => d.delta_h,
                        "c" => d.delta_c,
                        "unambig_share" => d.delta_unambig_share,
                        _ => get(c) - get(u),
                    })
                })
                .collect::<Result<_>>()?;
            let (m, lo, hi) = ci(&deltas, cfg.bootstrap.resamples, seed)?;
            let cm = mean(&pairs.iter().map(|(c, _)| get(c)).collect::<Vec<_>>());
            let um = mean(&pairs.iter().map(|(_, u)| get(u)).collect::<Vec<_>>());
            summary.push(vec![
                family.clone().into(),
                (*n).into(),
                setting.clone().into(),
                name.into(),
                cm.into(),
                um.into(),
                m.into(),
                lo.into(),
                hi.into(),
                pairs.len().into(),
                seed.into(),
            ])?;
        }
    }
    let mut artifacts = emit_report(&rows, &json!({ "heads": heads.heads }), &ctx.out)?;
    artifacts.extend(emit_report(
        &summary,
        &json!({ "reference_annotations": { "delta_c_10shot_normal": [-0.6, -0.4], "delta_h_ambiguous": [-0.15, -0.08] } }),
        &ctx.out,
    )?);

    // Key swap under the uncontextualized mask, plus class-restricted FV cosines.
    let sweep = cfg.sweep_config();
    let n = cfg.analysis.factorial_shots;
    let mut swap = Table::new("key_swap", &["task", "prompt", "condition", "acc_max", "unambig_share", "h_hat", "seed"]);
    let mut cos = Table::new("fv_class_cosine", &["task", "prompt", "pair", "cosine", "seed"]);
    let mut by_cond: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (pair, which) in ctx.members() {
        let task = pair.member(which);
        let label = format!("key-swap/{}", task.name);
        let seed = ctx.seed(&label);
        let zs = ctx.zero_shot(task, Some(pair))?;
        let ps = ctx.prompts(PromptSource::Pair(pair, which), n, PositionalSetting::Setting1, cfg.analysis.factorial_prompts, &label)?;
        for (b, p) in ps.iter().enumerate() {
            let mut conditions: Vec<(&str, InterventionPlan<f64>)> = vec![("unc_baseline", build_uncontextualized_plan(p))];
            for (name, kind, dir) in [
                ("amb_to_unamb", CorruptionKind::UnambigKeyPool, KeySwapDirection::AmbiguousToUnambiguous),
                ("unamb_to_amb", CorruptionKind::AmbigKeyPool, KeySwapDirection::UnambiguousToAmbiguous),
            ] {
                let donor = corrupt_prompt(&ctx.vocab, p, kind, Donor::Pair(pair), seed.wrapping_add(b as u64))?;
                let donor_run = forward(&params, &donor, &build_uncontextualized_plan(&donor))?;
                conditions.push((name, build_key_swap_plan(p, &donor, &donor_run, dir)?));
            }
            for (name, plan) in conditions {
                let run = forward(&params, p, &plan)?;
                let fv = extract_fv(&params, &run, &heads, p, ContextualizationMode::Uncontextualized)?;
                let acc = injection_sweep(&params, &fv.vec, &zs, &sweep)?.acc_max;
                let st = attention_stats(&run, &heads, p)?;
                by_cond.entry(name).or_default().push(acc);
                swap.push(vec![task.name.clone().into(), b.into(), name.into(), acc.into(), st.unambig_share.into(), st.h_hat.into(), seed.into()])?;
            }
            let amb: Vec<usize> = (0..p.n_shots()).filter(|&i| p.example_flags[i] == ExampleFlag::Ambiguous).collect();
            let unamb: Vec<usize> = (0..p.n_shots()).filter(|&i| p.example_flags[i] == ExampleFlag::Unambiguous).collect();
            let full = restricted_fv(&params, &heads, p, &(0..p.n_shots()).collect::<Vec<_>>())?;
            let fa = restricted_fv(&params, &heads, p, &amb)?;
            let fu = restricted_fv(&params, &heads, p, &unamb)?;
            for (name, x, y) in [("amb_vs_unamb", &fa, &fu), ("amb_vs_full", &fa, &full), ("unamb_vs_full", &fu, &full)] {
                cos.push(vec![task.name.clone().into(), b.into(), name.into(), cosine_or_zero(x, y)?.into(), seed.into()])?;
            }
        }
    }
    let swap_summary: BTreeMap<&str, f64> = by_cond.iter().map(|(k, v)| (*k, mean(v))).collect();
    artifacts.extend(emit_report(&swap, &json!({ "mean_acc_max": swap_summary }), &ctx.out)?);
    artifacts.extend(emit_report(&cos, &json!({}), &ctx.out)?);
    Ok(StageOutput {
        artifacts: rel(artifacts, &ctx.out),
    })
}

pub fn shapley_stage(ctx: &Context) -> Result<StageOutput> {
    let cfg = &ctx.cfg;
    let params = ctx.load_params()?;
    let heads = ctx.load_heads()?;
    let sweep = cfg.sweep_config();
    let n = cfg.analysis.factorial_shots;
    let mut table = Table::new(
        "factorial",
        &["family", "task", "f00", "f01", "f10", "f11", "phi_qk", "phi_v", "g", "regime", "seed"],
    );
    let mut regimes: BTreeMap<String, usize> = BTreeMap::new();
    let mut run = |family: &str, task: &TaskDef, source: PromptSource<'_>, setting, pair: Option<&AmbiguousPair>, table: &mut Table| -> Result<()> {
        let label = format!("shapley/{}", task.name);
        let ps = ctx.prompts(source, n, setting, cfg.analysis.factorial_prompts, &label)?;
        let zs = ctx.zero_shot(task, pair)?;
        let (f, s) = factorial_shapley(&params, &heads, &ps, &zs, &sweep)?;
        let regime = regime_label(s.regime);
        *regimes.entry(regime.into()).or_default() += 1;
        table.push(vec![
            family.into(),
            task.name.clone().into(),
            f.f00.into(),
            f.f01.into(),
            f.f10.into(),
            f.f11.into(),
            s.phi_qk.into(),
            s.phi_v.into(),
            s.g.into(),
            regime.into(),
            ctx.seed(&label).into(),
        ])
    };
    for task in &ctx.normal {
        run("normal", task, PromptSource::Task(task), PositionalSetting::Uniform, None, &mut table)?;
    }
    for (pair, which) in ctx.members() {
        run("ambiguous", pair.member(which), PromptSource::Pair(pair, which), PositionalSetting::Setting1, Some(pair), &mut table)?;
    }
    let artifacts = emit_report(&table, &json!({ "regime_counts": regimes, "activity_threshold": crate::analysis::ACTIVITY_THRESHOLD }), &ctx.out)?;
    Ok(StageOutput {
        artifacts: rel(artifacts, &ctx.out),
    })
}

fn regime_label(r: Regime) -> &'static str {
    match r {
        Regime::QkOnly => "qk_only",
        Regime::VOnly => "v_only",
        Regime::QkPlusV => "qk_plus_v",
        Regime::Others => "others",
    }
}

pub fn qinfo_stage(ctx: &Context) -> Result<StageOutput> {
    let cfg = &ctx.cfg;
    let params = ctx.load_params()?;
    let heads = ctx.load_heads()?;
    let sweep = cfg.sweep_config();
    let n = cfg.analysis.qinfo_shots;
    let mut table = Table::new("qinfo", &["task", "condition", "acc", "prop_unambiguous", "prop_ambiguous", "t", "seed"]);
    let mut artifacts = Vec::new();
    if ctx.pairs.is_empty() {
        artifacts.extend(emit_report(&table, &json!({ "skipped": "no ambiguous tasks configured" }), &ctx.out)?);
        return Ok(StageOutput {
            artifacts: rel(artifacts, &ctx.out),
        });
    }
    let donor_task = &ctx.normal[0];
    for (pair, which) in ctx.members() {
        let task = pair.member(which);
        let label = format!("qinfo/{}", task.name);
        let seed = ctx.seed(&label);
        let ps = ctx.prompts(PromptSource::Pair(pair, which), n, PositionalSetting::Setting1, cfg.analysis.qinfo_prompts, &label)?;
        let items = ps
            .into_iter()
            .enumerate()
            .map(|(b, clean)| {
                let s = seed.wrapping_add(2 * b as u64);
                Ok(QInfoPrompt {
                    examples_corrupt: corrupt_prompt(&ctx.vocab, &clean, CorruptionKind::ExamplesOtherTask, Donor::Task(donor_task), s)?,
                    query_corrupt: corrupt_prompt(&ctx.vocab, &clean, CorruptionKind::QueryReplace, Donor::Task(task), s + 1)?,
                    clean,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let r = q_composition_experiment(&params, &heads, &items, &ctx.zero_shot(task, Some(pair))?, &sweep)?;
        for c in &r.conditions {
            let cond = match c.condition {
                crate::analysis::QCondition::Clean => "clean",
                crate::analysis::QCondition::ExamplesOnlyCorrupt => "examples_only_corrupt",
                crate::analysis::QCondition::QueryOnlyCorrupt => "query_only_corrupt",
            };
            table.push(vec![task.name.clone().into(), cond.into(), c.acc.into(), c.prop_unambiguous.into(), c.prop_ambiguous.into(), c.t.into(), seed.into()])?;
        }
    }
    artifacts.extend(emit_report(&table, &json!({ "examples_donor": donor_task.name }), &ctx.out)?);

    // Shared Q/K PCA of the top-1 FV head.
    let (pair, which) = ctx.members()[0];
    let label = "pca";
    let ps = ctx.prompts(PromptSource::Pair(pair, which), n, PositionalSetting::Setting1, cfg.analysis.pca_prompts, label)?;
    let mut runs = Vec::new();
    for mode in MODES {
        for p in &ps {
            runs.push((mode, forward(&params, p, &mode_plan(p, mode))?, p));
        }
    }
    let refs: Vec<_> = runs.iter().map(|(m, r, p)| (*m, r, *p)).collect();
    let pca = shared_qk_pca(&refs, heads.heads[0])?;
    let mut t = Table::new("qk_pca", &["mode", "class", "prompt", "example", "x", "y", "seed"]);
    let seed = ctx.seed(label);
    for r in &pca {
        let class = match r.class {
            crate::analysis::PcaClass::Query => "query",
            crate::analysis::PcaClass::AmbKey => "amb_key",
            crate::analysis::PcaClass::UnambKey => "unamb_key",
        };
        let ex = r.example.map(|e| (e + 1).to_string()).unwrap_or_default();
        t.push(vec![r.mode.label().into(), class.into(), (r.prompt % ps.len()).into(), ex.into(), r.x.into(), r.y.into(), seed.into()])?;
    }
    artifacts.extend(emit_report(&t, &json!({ "head": heads.heads[0] }), &ctx.out)?);
    Ok(StageOutput {
        artifacts: rel(artifacts, &ctx.out),
    })
}

pub fn theory_stage(ctx: &Context) -> Result<StageOutput> {
    let th = &ctx.cfg.theory;
    let pair = DiscreteTaskPair::standard(th.n_inputs, th.overlap_fraction)?;
    let opt = construct_analytic_optimum(&pair, th.max_shots, th.tau, th.eta, th.d)?;
    let opt_report = verify_theorem(&opt.params, &pair, th.max_shots, th.tau, th.eta, th.tol)?;
    let init_seed = ctx.seed("theory-init");
    let init = TheoryParams::random(th.n_inputs, th.d, th.init_scale, init_seed);
    let hyper = ctx.cfg.theory_hyper();
    let trained = train_theory(&init, &pair, th.tau, th.eta, &hyper)?;
    let loss = theory_loss(&trained.params, &pair, th.max_shots, th.tau, th.eta)?;
    let report = verify_theorem(&trained.params, &pair, th.max_shots, th.tau, th.eta, th.tol)?;
    let gc_seed = ctx.seed("theory-grad-check");
    let gc = theory_grad_check(&init, &pair, th.max_shots, th.tau, th.eta, 50.0, 1e-3, 1000, gc_seed)?;
    let rel_gap = (loss.total - opt.loss.total) / opt.loss.total;

    let mut trace = Table::new("theory_loss", &["step", "loss", "seed"]);
    for (i, l) in trained.loss_trace.iter().enumerate() {
        trace.push(vec![i.into(), (*l).into(), hyper.seed.into()])?;
    }
    let mut artifacts = emit_report(&trace, &json!({ "final": loss.total }), &ctx.out)?;
    let mut t = Table::new(
        "theory",
        &[
            "model",
            "total_loss",
            "prediction_error",
            "psi_norm_term",
            "lipschitz_term",
            "max_ambiguous_attention",
            "psi_task_cohesion",
            "antipodality",
            "midpoint_deviation",
            "passed",
            "seed",
        ],
    );
    for (name, l, r, seed) in [("analytic", &opt.loss, &opt_report, 0u64), ("trained", &loss, &report, init_seed)] {
        t.push(vec![
            name.into(),
            l.total.into(),
            l.prediction_error.into(),
            l.psi_norm_term.into(),
            l.lipschitz_term.into(),
            r.max_ambiguous_attention_in_mixed.into(),
            r.psi_task_cohesion.into(),
            r.antipodality.into(),
            r.midpoint_deviation.into(),
            r.passed.into(),
            seed.into(),
        ])?;
    }
    artifacts.extend(emit_report(
        &t,
        &json!({
            "pair": pair,
            "analytic": { "s": opt.s, "l": opt.l, "loss": opt.loss, "predicted_loss": opt.predicted_loss, "lower_bound": opt.lower_bound, "report": opt_report },
            "trained": { "loss": loss, "relative_gap": rel_gap, "report": report },
            "grad_check": gc,
        }),
        &ctx.out,
    )?);
    let report_path = ctx.out.join("theorem_report.json");
    write_json(&report_path, &report)?;
    artifacts.push(report_path);
    Ok(StageOutput {
        artifacts: rel(artifacts, &ctx.out),
    })
}

/// Pipeline stages in execution order; `All` runs every other stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Train,
    Localize,
    Superpose,
    Attention,
    Shapley,
    Qinfo,
    Theory,
    All,
}

impl Stage {
    pub const ORDER: [Stage; 7] = [
        Stage::Train,
        Stage::Localize,
        Stage::Superpose,
        Stage::Attention,
        Stage::Shapley,
        Stage::Qinfo,
        Stage::Theory,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Localize => "localize",
            Stage::Superpose => "superpose",
            Stage::Attention => "attention",
            Stage::Shapley => "shapley",
            Stage::Qinfo => "qinfo",
            Stage::Theory => "theory",
            Stage::All => "all",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub seconds: f64,
    pub artifacts: Vec<PathBuf>,
}

/// Written to `manifest.json` after every invocation. Timings vary between
/// runs; everything else is a function of the config.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub master_seed: u64,
    pub version: String,
    pub stages: Vec<StageRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn run_one(ctx: &Context, stage: Stage) -> Result<StageOutput> {
    match stage {
        Stage::Train => train_stage(ctx),
        Stage::Localize => localize_stage(ctx),
        Stage::Superpose => superpose_stage(ctx),
        Stage::Attention => attention_stage(ctx),
        Stage::Shapley => shapley_stage(ctx),
        Stage::Qinfo => qinfo_stage(ctx),
        Stage::Theory => theory_stage(ctx),
        Stage::All => unreachable!("expanded by run_stage"),
    }
}

/// Runs `stage` (or every stage for `All`) and writes the manifest.
pub fn run_stage(ctx: &Context, stage: Stage) -> Result<RunManifest> {
    let stages: Vec<Stage> = if stage == Stage::All { Stage::ORDER.to_vec() } else { vec![stage] };
    let mut records = Vec::new();
    for s in stages {
        log::info!("stage {} starting", s.name());
        let t0 = std::time::Instant::now();
        let out = run_one(ctx, s)?;
        let seconds = t0.elapsed().as_secs_f64();
        log::info!("stage {} done in {seconds:.1}s", s.name());
        records.push(StageRecord {
            stage: s,
            seconds,
            artifacts: out.artifacts,
        });
    }
    let manifest = RunManifest {
        config_hash: ctx.cfg.hash(),
        master_seed: ctx.cfg.master_seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        stages: records,
    };
    write_json(&ctx.out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}
