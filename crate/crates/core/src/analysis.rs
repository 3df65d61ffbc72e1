//! Analyses built on function vectors: linear superposition with null
//! baselines, attention metrics, the QK/V factorial decomposition,
//! query-composition patching and a shared Q/K projection.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fv::{extract_fv, injection_sweep, FVHeadSet, SweepConfig};
use crate::interventions::{build_qkv_patch_plan, build_uncontextualized_plan, ContextualizationMode, PatchChannelSet};
use crate::model::{forward, Channel, InterventionPlan, Params, RowOverride, RunResult};
use crate::numerics::{cosine, pca2, r_squared, ridge_fit, Matrix, Vector};
use crate::scalar::Scalar;
use crate::tasks::{ExampleFlag, Prompt};
use crate::Vec64;

/// Sub-FVs `v_1 … v_n` of one prompt together with its full FV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperpositionSample {
    pub sub_fvs: Vec<Vec64>,
    pub full_fv: Vec64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperpositionFit {
    pub weights: Vec<f64>,
    pub lambda: f64,
    pub per_prompt_cosine: Vec<f64>,
    pub per_prompt_r2: Vec<f64>,
    pub mean_cosine: f64,
    pub mean_r2: f64,
}

impl SuperpositionFit {
    /// `Σ w_i v_i` for one sample.
    pub fn reconstruct(&self, sample: &SuperpositionSample) -> Result<Vec64> {
        combine(&self.weights, &sample.sub_fvs)
    }
}

fn combine(w: &[f64], vs: &[Vec64]) -> Result<Vec64> {
    if w.len() != vs.len() || vs.is_empty() {
        return Err(Error::Dimension(format!("{} weights for {} vectors", w.len(), vs.len())));
    }
    let mut out = Vector::zeros(vs[0].dim());
    for (&wi, v) in w.iter().zip(vs) {
        out.add_scaled(wi, v);
    }
    Ok(out)
}

/// Cosine, taken as 0 when either side is the zero vector.
fn cosine_or_zero(a: &Vec64, b: &Vec64) -> Result<f64> {
    match cosine(a, b) {
        Err(Error::UndefinedCosine) => Ok(0.0),
        other => other,
    }
}

fn check_batch(batch: &[SuperpositionSample]) -> Result<(usize, usize)> {
    let first = batch
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty superposition batch".into()))?;
    let n = first.sub_fvs.len();
    let d = first.full_fv.dim();
    if n == 0 {
        return Err(Error::InvalidArgument("prompts need at least one sub-FV".into()));
    }
    for (b, s) in batch.iter().enumerate() {
        if s.sub_fvs.len() != n {
            return Err(Error::InvalidArgument(format!(
                "prompt {b} has {} sub-FVs, expected {n}",
                s.sub_fvs.len()
            )));
        }
        if s.full_fv.dim() != d || s.sub_fvs.iter().any(|v| v.dim() != d) {
            return Err(Error::Dimension(format!("prompt {b} mixes vector dimensions")));
        }
    }
    Ok((n, d))
}

/// One ridge fit of shared weights over the whole batch.
pub fn fit_superposition(batch: &[SuperpositionSample], lambda: f64) -> Result<SuperpositionFit> {
    let (n, _) = check_batch(batch)?;
    let mut gram = Matrix::zeros(n, n);
    let mut moment = vec![0.0; n];
    for s in batch {
        for i in 0..n {
            for j in 0..n {
                gram.set(i, j, gram.get(i, j) + s.sub_fvs[i].dot(&s.sub_fvs[j]));
            }
            moment[i] += s.sub_fvs[i].dot(&s.full_fv);
        }
    }
    let weights = ridge_fit(&gram, &Vector::new(moment)?, lambda)?.into_inner();
    let (cos, r2): (Vec<f64>, Vec<f64>) = batch
        .iter()
        .map(|s| {
            let pred = combine(&weights, &s.sub_fvs)?;
            Ok((cosine_or_zero(&pred, &s.full_fv)?, r_squared(&pred, &s.full_fv)?))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    Ok(SuperpositionFit {
        mean_cosine: cos.iter().sum::<f64>() / cos.len() as f64,
        mean_r2: r2.iter().sum::<f64>() / r2.len() as f64,
        weights,
        lambda,
        per_prompt_cosine: cos,
        per_prompt_r2: r2,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullKind {
    MismatchedDictionary,
    Orthogonalized,
}

/// Pairs each full FV with another prompt's sub-FVs (a random cyclic
/// permutation, so no prompt keeps its own dictionary).
pub fn mismatched_batch(batch: &[SuperpositionSample], seed: u64) -> Result<Vec<SuperpositionSample>> {
    if batch.len() < 2 {
        return Err(Error::InvalidArgument("mismatched null needs at least 2 prompts".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..batch.len()).collect();
    for i in (1..perm.len()).rev() {
        let j = rng.gen_range(0..i);
        perm.swap(i, j);
    }
    Ok(batch
        .iter()
        .zip(&perm)
        .map(|(s, &j)| SuperpositionSample {
            sub_fvs: s.sub_fvs.clone(),
            full_fv: batch[j].full_fv.clone(),
        })
        .collect())
}

/// One coordinate permutation with independent sign flips, applied to every
/// sub-FV; full FVs are left alone.
pub fn orthogonalized_batch(batch: &[SuperpositionSample], seed: u64) -> Result<Vec<SuperpositionSample>> {
    let (_, d) = check_batch(batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..d).collect();
    perm.shuffle(&mut rng);
    let signs: Vec<f64> = (0..d).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
    batch
        .iter()
        .map(|s| {
            let sub_fvs = s
                .sub_fvs
                .iter()
                .map(|v| Vector::new((0..d).map(|j| signs[j] * v[perm[j]]).collect()))
                .collect::<Result<_>>()?;
            Ok(SuperpositionSample {
                sub_fvs,
                full_fv: s.full_fv.clone(),
            })
        })
        .collect()
}

pub fn run_null(batch: &[SuperpositionSample], kind: NullKind, lambda: f64, seed: u64) -> Result<SuperpositionFit> {
    let nulled = match kind {
        NullKind::MismatchedDictionary => mismatched_batch(batch, seed)?,
        NullKind::Orthogonalized => orthogonalized_batch(batch, seed)?,
    };
    fit_superposition(&nulled, lambda)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub acc_max_reconstructed: Vec<f64>,
    pub acc_max_full: Vec<f64>,
    /// `mean(Acc_max(v̂)) / mean(Acc_max(v_FV))`.
    pub ratio_of_means: f64,
    /// Mean of per-prompt ratios over prompts whose full FV has nonzero Acc_max.
    pub mean_of_ratios: f64,
    /// All fitted weights are zero, so `v̂` injects nothing.
    pub degenerate: bool,
}

/// Causal check of the fit: sweeps `v̂ = Σ w_i v_i` against the true FV.
/// `zero_shot_sets[b]` belongs to `samples[b]`.
pub fn reconstruction_ratio<T: Scalar>(
    params: &Params<T>,
    fit: &SuperpositionFit,
    samples: &[SuperpositionSample],
    zero_shot_sets: &[Vec<Prompt>],
    sweep: &SweepConfig,
) -> Result<ReconstructionReport> {
    if samples.len() != zero_shot_sets.len() || samples.is_empty() {
        return Err(Error::InvalidArgument("one zero-shot set per sample required".into()));
    }
    let cast = |v: &Vec64| Vector::new(v.as_slice().iter().map(|&x| T::lit(x)).collect());
    let pairs: Vec<(f64, f64)> = samples
        .par_iter()
        .zip(zero_shot_sets)
        .map(|(s, zs)| {
            let hat = injection_sweep(params, &cast(&fit.reconstruct(s)?)?, zs, sweep)?.acc_max;
            let full = injection_sweep(params, &cast(&s.full_fv)?, zs, sweep)?.acc_max;
            Ok((hat, full))
        })
        .collect::<Result<_>>()?;
    let (hat, full): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let mean_full = full.iter().sum::<f64>() / full.len() as f64;
    if mean_full == 0.0 {
        return Err(Error::FullFvIneffective);
    }
    let ratios: Vec<f64> = hat.iter().zip(&full).filter(|p| *p.1 > 0.0).map(|(h, f)| h / f).collect();
    Ok(ReconstructionReport {
        ratio_of_means: hat.iter().sum::<f64>() / hat.len() as f64 / mean_full,
        mean_of_ratios: ratios.iter().sum::<f64>() / ratios.len().max(1) as f64,
        degenerate: fit.weights.iter().all(|&w| w == 0.0),
        acc_max_reconstructed: hat,
        acc_max_full: full,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub p: Vec<f64>,
    pub h_hat: f64,
    pub c: f64,
    pub t: f64,
    pub unambig_share: f64,
}

/// Metrics from raw per-example masses.
pub fn attention_stats_from_mass(raw: &[f64], flags: &[ExampleFlag]) -> Result<AttentionStats> {
    let n = raw.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("entropy needs n >= 2 examples, got {n}")));
    }
    if flags.len() != n {
        return Err(Error::Dimension(format!("{} flags for {n} examples", flags.len())));
    }
    let t: f64 = raw.iter().sum();
    if t <= 0.0 {
        return Err(Error::EmptySupport);
    }
    let p: Vec<f64> = raw.iter().map(|&r| r / t).collect();
    let ent: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    let c = p.iter().enumerate().map(|(i, &x)| (i + 1) as f64 * x).sum();
    let unambig_share = p
        .iter()
        .zip(flags)
        .filter(|(_, f)| **f == ExampleFlag::Unambiguous)
        .map(|(x, _)| x)
        .sum();
    Ok(AttentionStats {
        h_hat: (ent / (n as f64).ln()).clamp(0.0, 1.0),
        c,
        t,
        unambig_share,
        p,
    })
}

/// Per-example attention mass from `t_final`, averaged over the FV heads.
pub fn example_masses<T: Scalar>(run: &RunResult<T>, heads: &FVHeadSet, prompt: &Prompt) -> Result<Vec<f64>> {
    if heads.is_empty() {
        return Err(Error::InvalidArgument("FV head set must be nonempty".into()));
    }
    if run.cache.seq_len != prompt.len() {
        return Err(Error::MissingArtifact("run cache does not belong to this prompt".into()));
    }
    let inv = 1.0 / heads.len() as f64;
    Ok((0..prompt.n_shots())
        .map(|i| {
            let span = prompt.example_span(i);
            heads
                .heads
                .iter()
                .map(|h| {
                    let row = run.cache.attn_row(h.layer, h.head, prompt.t_final);
                    span.positions().map(|c| row[c].as_f64()).sum::<f64>()
                })
                .sum::<f64>()
                * inv
        })
        .collect())
}

pub fn attention_stats<T: Scalar>(run: &RunResult<T>, heads: &FVHeadSet, prompt: &Prompt) -> Result<AttentionStats> {
    attention_stats_from_mass(&example_masses(run, heads, prompt)?, &prompt.example_flags)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextualizationDelta {
    pub delta_h: f64,
    pub delta_c: f64,
    pub delta_unambig_share: f64,
}

/// Contextualized minus uncontextualized.
pub fn contextualization_contrast(ctx: &AttentionStats, unc: &AttentionStats) -> Result<ContextualizationDelta> {
    if ctx.p.len() != unc.p.len() {
        return Err(Error::Dimension(format!("{} vs {} examples", ctx.p.len(), unc.p.len())));
    }
    Ok(ContextualizationDelta {
        delta_h: ctx.h_hat - unc.h_hat,
        delta_c: ctx.c - unc.c,
        delta_unambig_share: ctx.unambig_share - unc.unambig_share,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorialResult {
    pub f00: f64,
    pub f01: f64,
    pub f10: f64,
    pub f11: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    QkOnly,
    VOnly,
    QkPlusV,
    Others,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapleyResult {
    pub phi_qk: f64,
    pub phi_v: f64,
    pub g: f64,
    pub regime: Regime,
}

pub const ACTIVITY_THRESHOLD: f64 = 0.05;

pub fn classify_regime(phi_qk: f64, phi_v: f64) -> Regime {
    let qk = phi_qk >= ACTIVITY_THRESHOLD;
    let v = phi_v >= ACTIVITY_THRESHOLD;
    match (qk, v) {
        (true, true) => Regime::QkPlusV,
        (true, false) => Regime::QkOnly,
        (false, true) => Regime::VOnly,
        (false, false) => Regime::Others,
    }
}

/// Two-factor Shapley split of `F11 − F00`; the first index is QK, the second V.
pub fn shapley_from_table(f: &FactorialResult) -> ShapleyResult {
    let phi_qk = 0.5 * (f.f10 - f.f00) + 0.5 * (f.f11 - f.f01);
    let phi_v = 0.5 * (f.f01 - f.f00) + 0.5 * (f.f11 - f.f10);
    ShapleyResult {
        phi_qk,
        phi_v,
        g: f.f11 - f.f00,
        regime: classify_regime(phi_qk, phi_v),
    }
}

/// V seen by row `t_final` replaced with the values of `source`.
fn v_patch<T: Scalar>(p: &Prompt, source: &RunResult<T>) -> RowOverride<T> {
    RowOverride {
        layers: None,
        channel: Channel::V,
        rows: vec![p.t_final],
        positions: (0..=p.t_final).collect(),
        source: std::sync::Arc::clone(&source.cache),
        label: "v-context".into(),
    }
}

/// Plans for the four QK/V configurations of one prompt, in the order
/// (00, 01, 10, 11): first digit QK contextualized, second V contextualized.
pub fn factorial_plans<T: Scalar>(params: &Params<T>, p: &Prompt) -> Result<[InterventionPlan<T>; 4]> {
    let unc_plan = build_uncontextualized_plan::<T>(p);
    let unc = forward(params, p, &unc_plan)?;
    let ctx = forward(params, p, &InterventionPlan::empty())?;
    let mut p01 = unc_plan.clone();
    p01.row_overrides.push(v_patch(p, &ctx));
    let mut p10 = InterventionPlan::empty();
    p10.row_overrides.push(v_patch(p, &unc));
    Ok([unc_plan, p01, p10, InterventionPlan::empty()])
}

/// Per-prompt `Acc_max` under the four configurations, then the Shapley split
/// of the means. `zero_shot_set` is shared by all prompts.
pub fn factorial_shapley<T: Scalar>(
    params: &Params<T>,
    heads: &FVHeadSet,
    prompts: &[Prompt],
    zero_shot_set: &[Prompt],
    sweep: &SweepConfig,
) -> Result<(FactorialResult, ShapleyResult)> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("factorial needs prompts".into()));
    }
    let rows: Vec<[f64; 4]> = prompts
        .par_iter()
        .map(|p| {
            let plans = factorial_plans(params, p)?;
            let mut out = [0.0; 4];
            for (o, plan) in out.iter_mut().zip(&plans) {
                let run = forward(params, p, plan)?;
                let fv = extract_fv(params, &run, heads, p, ContextualizationMode::Contextualized)?;
                *o = injection_sweep(params, &fv.vec, zero_shot_set, sweep)?.acc_max;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let m = |k: usize| rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64;
    let f = FactorialResult {
        f00: m(0),
        f01: m(1),
        f10: m(2),
        f11: m(3),
    };
    Ok((f, shapley_from_table(&f)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QCondition {
    Clean,
    ExamplesOnlyCorrupt,
    QueryOnlyCorrupt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QConditionResult {
    pub condition: QCondition,
    pub acc: f64,
    pub prop_unambiguous: f64,
    pub prop_ambiguous: f64,
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QInfoResult {
    pub conditions: Vec<QConditionResult>,
}

/// One clean prompt with its two corrupted variants (same layout).
#[derive(Clone, Debug)]
pub struct QInfoPrompt {
    pub clean: Prompt,
    pub examples_corrupt: Prompt,
    pub query_corrupt: Prompt,
}

/// Q at `t_final` taken from a corrupted run and patched into the clean run;
/// FV extracted from the patched run and swept.
pub fn q_composition_experiment<T: Scalar>(
    params: &Params<T>,
    heads: &FVHeadSet,
    prompts: &[QInfoPrompt],
    zero_shot_set: &[Prompt],
    sweep: &SweepConfig,
) -> Result<QInfoResult> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("query-composition needs prompts".into()));
    }
    let q_only = PatchChannelSet::new(&[Channel::Q])?;
    let conditions = [QCondition::Clean, QCondition::ExamplesOnlyCorrupt, QCondition::QueryOnlyCorrupt];
    let per_prompt: Vec<Vec<(f64, f64, f64, f64)>> = prompts
        .par_iter()
        .map(|qp| {
            let clean_run = forward(params, &qp.clean, &InterventionPlan::empty())?;
            conditions
                .iter()
                .map(|cond| {
                    let source = match cond {
                        QCondition::Clean => clean_run.clone(),
                        QCondition::ExamplesOnlyCorrupt => {
                            forward(params, &qp.examples_corrupt, &InterventionPlan::empty())?
                        }
                        QCondition::QueryOnlyCorrupt => forward(params, &qp.query_corrupt, &InterventionPlan::empty())?,
                    };
                    if !source_matches(&qp.clean, &source) {
                        return Err(Error::Plan("corrupted prompt changed the layout".into()));
                    }
                    let plan = build_qkv_patch_plan(&qp.clean, &source, &q_only)?;
                    let run = forward(params, &qp.clean, &plan)?;
                    let fv = extract_fv(params, &run, heads, &qp.clean, ContextualizationMode::Contextualized)?;
                    let acc = injection_sweep(params, &fv.vec, zero_shot_set, sweep)?.acc_max;
                    let mass = example_masses(&run, heads, &qp.clean)?;
                    let t: f64 = mass.iter().sum();
                    let unamb: f64 = mass
                        .iter()
                        .zip(&qp.clean.example_flags)
                        .filter(|(_, f)| **f == ExampleFlag::Unambiguous)
                        .map(|(m, _)| m)
                        .sum();
                    if t <= 0.0 {
                        return Err(Error::EmptySupport);
                    }
                    Ok((acc, unamb / t, 1.0 - unamb / t, t))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let k = per_prompt.len() as f64;
    Ok(QInfoResult {
        conditions: conditions
            .iter()
            .enumerate()
            .map(|(c, &condition)| {
                let sum = |f: fn(&(f64, f64, f64, f64)) -> f64| per_prompt.iter().map(|r| f(&r[c])).sum::<f64>() / k;
                let prop_unambiguous = sum(|r| r.1);
                QConditionResult {
                    condition,
                    acc: sum(|r| r.0),
                    prop_unambiguous,
                    prop_ambiguous: 1.0 - prop_unambiguous,
                    t: sum(|r| r.3),
                }
            })
            .collect(),
    })
}

fn source_matches<T: Scalar>(p: &Prompt, run: &RunResult<T>) -> bool {
    run.cache.seq_len == p.len()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaClass {
    Query,
    AmbKey,
    UnambKey,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaRow {
    pub mode: ContextualizationMode,
    pub class: PcaClass,
    pub prompt: usize,
    pub example: Option<usize>,
    pub x: f64,
    pub y: f64,
}

/// Labelled points: the top head's `t_final` query, and per example the key
/// of the token it attends to most.
pub fn qk_points<T: Scalar>(
    runs: &[(ContextualizationMode, &RunResult<T>, &Prompt)],
    head: crate::fv::HeadId,
) -> Vec<(ContextualizationMode, PcaClass, usize, Option<usize>, Vec64)> {
    let to64 = |s: &[T]| Vector::new(s.iter().map(|x| x.as_f64()).collect()).expect("finite activations");
    let mut out = Vec::new();
    for (b, (mode, run, p)) in runs.iter().enumerate() {
        out.push((*mode, PcaClass::Query, b, None, to64(run.cache.q(head.layer, head.head, p.t_final))));
        let row = run.cache.attn_row(head.layer, head.head, p.t_final);
        for i in 0..p.n_shots() {
            let span = p.example_span(i);
            let best = span
                .positions()
                .fold(span.start, |best, c| if row[c] > row[best] { c } else { best });
            let class = match p.example_flags[i] {
                ExampleFlag::Ambiguous => PcaClass::AmbKey,
                ExampleFlag::Unambiguous => PcaClass::UnambKey,
            };
            out.push((*mode, class, b, Some(i), to64(run.cache.k(head.layer, head.head, best))));
        }
    }
    out
}

pub fn shared_qk_pca<T: Scalar>(
    runs: &[(ContextualizationMode, &RunResult<T>, &Prompt)],
    head: crate::fv::HeadId,
) -> Result<Vec<PcaRow>> {
    for mode in [ContextualizationMode::Contextualized, ContextualizationMode::Uncontextualized] {
        if runs.iter().filter(|r| r.0 == mode).count() < 3 {
            return Err(Error::InvalidArgument(format!("need at least 3 {} prompts", mode.label())));
        }
    }
    let points = qk_points(runs, head);
    let vecs: Vec<Vec64> = points.iter().map(|p| p.4.clone()).collect();
    let pca = pca2(&vecs)?;
    Ok(points
        .into_iter()
        .zip(pca.projections)
        .map(|((mode, class, prompt, example, _), xy)| PcaRow {
            mode,
            class,
            prompt,
            example,
            x: xy[0],
            y: xy[1],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Vec64 {
        Vector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn shapley_examples() {
        let s = shapley_from_table(&FactorialResult {
            f00: 0.2,
            f01: 0.3,
            f10: 0.5,
            f11: 0.7,
        });
        assert!((s.phi_qk - 0.35).abs() < 1e-12);
        assert!((s.phi_v - 0.15).abs() < 1e-12);
        assert!((s.g - 0.5).abs() < 1e-12);
        assert_eq!(s.regime, Regime::QkPlusV);
        let t = shapley_from_table(&FactorialResult {
            f00: 0.4,
            f01: 0.6,
            f10: 0.6,
            f11: 0.4,
        });
        assert!((t.phi_qk + t.phi_v).abs() < 1e-12);
    }

    #[test]
    fn regime_boundaries() {
        assert_eq!(classify_regime(0.2, 0.01), Regime::QkOnly);
        assert_eq!(classify_regime(0.04, 0.04), Regime::Others);
        assert_eq!(classify_regime(0.05, 0.05), Regime::QkPlusV);
        assert_eq!(classify_regime(0.0, 0.05), Regime::VOnly);
        assert_eq!(classify_regime(0.049_999, 0.3), Regime::VOnly);
    }

    #[test]
    fn attention_metric_examples() {
        let flags = vec![ExampleFlag::Unambiguous; 5];
        let u = attention_stats_from_mass(&[0.2; 5], &flags).unwrap();
        assert!((u.h_hat - 1.0).abs() < 1e-9 && (u.c - 3.0).abs() < 1e-9);
        let hot = attention_stats_from_mass(&[0.0, 0.0, 0.7, 0.0, 0.0], &flags).unwrap();
        assert_eq!(hot.h_hat, 0.0);
        assert!((hot.c - 3.0).abs() < 1e-12);
        let half = attention_stats_from_mass(&[0.5, 0.5, 0.0, 0.0, 0.0], &flags).unwrap();
        assert!((half.h_hat - 2f64.ln() / 5f64.ln()).abs() < 1e-9);
        assert!((half.h_hat - 0.43068).abs() < 1e-5);
        assert!(attention_stats_from_mass(&[0.0; 3], &flags[..3]).is_err());
        let d = contextualization_contrast(&half, &half).unwrap();
        assert_eq!((d.delta_h, d.delta_c, d.delta_unambig_share), (0.0, 0.0, 0.0));
    }

    fn synthetic(seed: u64, b: usize, n: usize, d: usize, w: &[f64]) -> Vec<SuperpositionSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..b)
            .map(|_| {
                let sub_fvs: Vec<Vec64> = (0..n)
                    .map(|_| v(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()))
                    .collect();
                let full_fv = combine(w, &sub_fvs).unwrap();
                SuperpositionSample { sub_fvs, full_fv }
            })
            .collect()
    }

    #[test]
    fn exact_combination_is_recovered() {
        let batch = synthetic(1, 20, 2, 16, &[2.0, 3.0]);
        let fit = fit_superposition(&batch, 0.0).unwrap();
        assert!((fit.weights[0] - 2.0).abs() < 1e-9 && (fit.weights[1] - 3.0).abs() < 1e-9);
        assert!((fit.mean_cosine - 1.0).abs() < 1e-9 && (fit.mean_r2 - 1.0).abs() < 1e-9);
        let shrunk = fit_superposition(&batch, 1e12).unwrap();
        assert!(shrunk.weights.iter().all(|w| w.abs() < 1e-6));
        assert!(shrunk.per_prompt_r2.iter().all(|&r| r <= 1e-6));
    }

    #[test]
    fn identical_prompts_make_mismatched_null_trivial() {
        let one = synthetic(2, 1, 3, 8, &[1.0, -1.0, 0.5]);
        let batch = vec![one[0].clone(); 6];
        assert_eq!(
            run_null(&batch, NullKind::MismatchedDictionary, 1e-6, 4).unwrap(),
            fit_superposition(&batch, 1e-6).unwrap()
        );
        assert!(run_null(&batch[..1], NullKind::MismatchedDictionary, 1e-6, 4).is_err());
    }

    #[test]
    fn inconsistent_shot_counts_are_rejected() {
        let mut batch = synthetic(3, 4, 3, 8, &[1.0, 1.0, 1.0]);
        batch[2].sub_fvs.pop();
        assert!(fit_superposition(&batch, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn shapley_additivity(f in proptest::array::uniform4(0.0f64..=1.0)) {
            let s = shapley_from_table(&FactorialResult { f00: f[0], f01: f[1], f10: f[2], f11: f[3] });
            prop_assert!((s.phi_qk + s.phi_v - s.g).abs() <= 1e-12);
        }

        #[test]
        fn orthogonalized_null_preserves_norms(seed in 0u64..200) {
            let batch = synthetic(seed, 3, 4, 10, &[1.0, 0.0, 2.0, -1.0]);
            let out = orthogonalized_batch(&batch, seed).unwrap();
            for (a, b) in batch.iter().zip(&out) {
                for (x, y) in a.sub_fvs.iter().zip(&b.sub_fvs) {
                    let sorted = |v: &Vec64| {
                        let mut m: Vec<f64> = v.as_slice().iter().map(|e| e.abs()).collect();
                        m.sort_by(f64::total_cmp);
                        m
                    };
                    prop_assert_eq!(sorted(x), sorted(y));
                    prop_assert!((x.norm() - y.norm()).abs() <= 1e-12 * x.norm());
                }
            }
        }

        #[test]
        fn entropy_and_center_bounds(raw in proptest::collection::vec(0.0f64..1.0, 2..12)) {
            prop_assume!(raw.iter().sum::<f64>() > 1e-6);
            let flags = vec![ExampleFlag::Ambiguous; raw.len()];
            let s = attention_stats_from_mass(&raw, &flags).unwrap();
            let n = raw.len() as f64;
            prop_assert!((0.0..=1.0).contains(&s.h_hat));
            prop_assert!(s.c >= 1.0 - 1e-12 && s.c <= n + 1e-12);
            prop_assert!((s.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
