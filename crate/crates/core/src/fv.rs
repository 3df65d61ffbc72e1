//! FV-head localization, function-vector extraction and injection sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::ContextualizationMode;
use crate::model::{forward, HeadOverride, InjectionSite, InterventionPlan, Params, ResidualAddition, RunResult, TensorId};
use crate::numerics::Vector;
use crate::scalar::Scalar;
use crate::tasks::{
    corrupt_prompt, sample_prompt, CorruptionKind, Donor, PositionalSetting, Prompt, PromptSource, SamplingOptions,
    TaskDef, Vocab,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

/// Heads sorted by descending AIE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FVHeadSet {
    pub heads: Vec<HeadId>,
    pub aie_scores: Vec<f64>,
}

impl FVHeadSet {
    pub fn new(mut scored: Vec<(HeadId, f64)>) -> Result<Self> {
        if scored.is_empty() {
            return Err(Error::InvalidArgument("FV head set must be nonempty".into()));
        }
        if scored.iter().any(|(_, s)| !s.is_finite()) {
            return Err(Error::NonFinite("AIE score".into()));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(Self {
            heads: scored.iter().map(|s| s.0).collect(),
            aie_scores: scored.iter().map(|s| s.1).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn top(&self, k: usize) -> FVHeadSet {
        FVHeadSet {
            heads: self.heads[..k.min(self.len())].to_vec(),
            aie_scores: self.aie_scores[..k.min(self.len())].to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionVector<T: Scalar> {
    pub vec: Vector<T>,
    pub source_prompt: String,
    pub mode: ContextualizationMode,
    pub heads: Vec<HeadId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub layer: usize,
    pub alpha: f64,
    pub acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Layer-major, alpha-minor.
    pub acc: Vec<SweepCell>,
    pub acc_max: f64,
    pub argmax: (usize, f64),
    pub baseline_zero_shot_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub l_prime: usize,
    pub alpha_grid: Vec<f64>,
    pub site: InjectionSite,
}

impl SweepConfig {
    pub fn default_for(n_layers: usize) -> Self {
        Self {
            l_prime: n_layers / 3,
            alpha_grid: vec![0.0, 0.5, 1.0, 2.0, 4.0, 8.0],
            site: InjectionSite::LayerInput,
        }
    }
}

/// 10% of all heads, rounded down, at least one.
pub fn default_top_k(n_layers: usize, n_heads: usize) -> usize {
    (n_layers * n_heads / 10).max(1)
}

pub fn all_heads(params_layers: usize, n_heads: usize) -> Vec<HeadId> {
    (0..params_layers)
        .flat_map(|layer| (0..n_heads).map(move |head| HeadId { layer, head }))
        .collect()
}

fn check_head<T: Scalar>(params: &Params<T>, h: HeadId) -> Result<()> {
    let c = &params.config;
    if h.layer >= c.n_layers || h.head >= c.n_heads {
        return Err(Error::InvalidArgument(format!("head {h:?} outside {}x{}", c.n_layers, c.n_heads)));
    }
    Ok(())
}

/// Probability of `answer` after replacing one head's pre-projection output
/// at `t_final` with `value`.
pub fn patched_prob<T: Scalar>(params: &Params<T>, prompt: &Prompt, head: HeadId, value: &[T]) -> Result<f64> {
    let mut plan = InterventionPlan::empty();
    plan.head_overrides.push(HeadOverride {
        layer: head.layer,
        head: head.head,
        position: prompt.t_final,
        value: value.to_vec(),
    });
    Ok(forward(params, prompt, &plan)?.prob(prompt.answer).as_f64())
}

/// Clean prompts and their label-shuffled corruptions for mediation analysis.
pub fn mediation_prompts(
    vocab: &Vocab,
    task: &TaskDef,
    n_prompts: usize,
    n_shots: usize,
    seed: u64,
) -> Result<(Vec<Prompt>, Vec<Prompt>)> {
    let clean: Vec<Prompt> = (0..n_prompts as u64)
        .map(|i| {
            sample_prompt(
                vocab,
                PromptSource::Task(task),
                n_shots,
                PositionalSetting::Uniform,
                seed.wrapping_add(2 * i),
                SamplingOptions::default(),
            )
        })
        .collect::<Result<_>>()?;
    let corrupted = clean
        .iter()
        .enumerate()
        .map(|(i, p)| {
            corrupt_prompt(vocab, p, CorruptionKind::ShuffledLabels, Donor::None, seed.wrapping_add(2 * i as u64 + 1))
        })
        .collect::<Result<_>>()?;
    Ok((clean, corrupted))
}

/// Per-head task-conditioned mean output at `t_final`, in `all_heads` order.
pub fn mean_head_outputs<T: Scalar>(params: &Params<T>, clean: &[Prompt]) -> Result<Vec<Vec<T>>> {
    let c = &params.config;
    let runs: Vec<RunResult<T>> = clean
        .par_iter()
        .map(|p| forward(params, p, &InterventionPlan::empty()))
        .collect::<Result<_>>()?;
    let inv = T::lit(1.0 / clean.len().max(1) as f64);
    Ok(all_heads(c.n_layers, c.n_heads)
        .iter()
        .map(|h| {
            let mut acc = vec![T::zero(); c.d_head];
            for (run, p) in runs.iter().zip(clean) {
                for (a, &v) in acc.iter_mut().zip(run.cache.head_output(h.layer, h.head, p.t_final)) {
                    *a = *a + v;
                }
            }
            acc.iter().map(|&a| a * inv).collect()
        })
        .collect())
}

/// Per-prompt CIE of every head (outer: heads in `all_heads` order).
pub fn cie_table<T: Scalar>(params: &Params<T>, clean: &[Prompt], corrupted: &[Prompt]) -> Result<Vec<Vec<f64>>> {
    let c = &params.config;
    let means = mean_head_outputs(params, clean)?;
    let base: Vec<f64> = corrupted
        .par_iter()
        .map(|p| Ok(forward(params, p, &InterventionPlan::empty())?.prob(p.answer).as_f64()))
        .collect::<Result<_>>()?;
    all_heads(c.n_layers, c.n_heads)
        .iter()
        .zip(&means)
        .map(|(&h, mean)| {
            corrupted
                .par_iter()
                .zip(&base)
                .map(|(p, &b)| Ok(patched_prob(params, p, h, mean)? - b))
                .collect()
        })
        .collect()
}

/// Mean CIE of `head` over label-shuffled prompts of `task`.
pub fn compute_aie<T: Scalar>(
    params: &Params<T>,
    vocab: &Vocab,
    head: HeadId,
    task: &TaskDef,
    n_prompts: usize,
    n_shots: usize,
    seed: u64,
) -> Result<f64> {
    check_head(params, head)?;
    if n_prompts < 10 {
        return Err(Error::InvalidArgument(format!("need at least 10 prompts, got {n_prompts}")));
    }
    let (clean, corrupted) = mediation_prompts(vocab, task, n_prompts, n_shots, seed)?;
    let means = mean_head_outputs(params, &clean)?;
    let mean = &means[head.layer * params.config.n_heads + head.head];
    let cies: Vec<f64> = corrupted
        .par_iter()
        .map(|p| {
            let b = forward(params, p, &InterventionPlan::empty())?.prob(p.answer).as_f64();
            Ok(patched_prob(params, p, head, mean)? - b)
        })
        .collect::<Result<_>>()?;
    Ok(cies.iter().sum::<f64>() / cies.len() as f64)
}

/// AIE of every head averaged over tasks, ranked, truncated to `top_k`.
pub fn localize_fv_heads<T: Scalar>(
    params: &Params<T>,
    vocab: &Vocab,
    tasks: &[TaskDef],
    n_prompts: usize,
    n_shots: usize,
    top_k: usize,
    seed: u64,
) -> Result<FVHeadSet> {
    let c = &params.config;
    let n_all = c.n_layers * c.n_heads;
    if top_k == 0 || top_k > n_all {
        return Err(Error::InvalidArgument(format!("top_k {top_k} outside 1..={n_all}")));
    }
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no tasks to localize on".into()));
    }
    if n_prompts < 10 {
        return Err(Error::InvalidArgument(format!("need at least 10 prompts, got {n_prompts}")));
    }
    let mut totals = vec![0.0; n_all];
    for (t, task) in tasks.iter().enumerate() {
        let (clean, corrupted) = mediation_prompts(vocab, task, n_prompts, n_shots, seed.wrapping_add(1_000_003 * t as u64))?;
        for (total, row) in totals.iter_mut().zip(cie_table(params, &clean, &corrupted)?) {
            *total += row.iter().sum::<f64>() / row.len() as f64;
        }
    }
    let scored = all_heads(c.n_layers, c.n_heads)
        .into_iter()
        .zip(totals)
        .map(|(h, s)| (h, s / tasks.len() as f64))
        .collect();
    Ok(FVHeadSet::new(scored)?.top(top_k))
}

/// One head's output at `pos`, mapped into model space through its W_O rows.
pub fn head_contribution<T: Scalar>(params: &Params<T>, run: &RunResult<T>, head: HeadId, pos: usize) -> Result<Vec<T>> {
    check_head(params, head)?;
    let c = &params.config;
    let d = c.d_model;
    let wo = params.get(TensorId::Wo(head.layer));
    let h = run.cache.head_output(head.layer, head.head, pos);
    let mut out = vec![T::zero(); d];
    for (i, &hi) in h.iter().enumerate() {
        let row = &wo[(head.head * c.d_head + i) * d..(head.head * c.d_head + i + 1) * d];
        for (o, &w) in out.iter_mut().zip(row) {
            *o = *o + hi * w;
        }
    }
    Ok(out)
}

/// Sum of the FV heads' model-space outputs at `t_final`, in set order.
pub fn extract_fv<T: Scalar>(
    params: &Params<T>,
    run: &RunResult<T>,
    heads: &FVHeadSet,
    prompt: &Prompt,
    mode: ContextualizationMode,
) -> Result<FunctionVector<T>> {
    if heads.is_empty() {
        return Err(Error::InvalidArgument("FV head set must be nonempty".into()));
    }
    if run.cache.seq_len != prompt.len() {
        return Err(Error::MissingArtifact("run cache does not belong to this prompt".into()));
    }
    let mut sum = vec![T::zero(); params.config.d_model];
    for &h in &heads.heads {
        for (s, v) in sum.iter_mut().zip(head_contribution(params, run, h, prompt.t_final)?) {
            *s = *s + v;
        }
    }
    Ok(FunctionVector {
        vec: Vector::new(sum)?,
        source_prompt: prompt_id(prompt),
        mode,
        heads: heads.heads.clone(),
    })
}

/// Stable identifier of a prompt: task name plus token string.
pub fn prompt_id(p: &Prompt) -> String {
    let toks: Vec<String> = p.tokens.iter().map(|t| t.to_string()).collect();
    format!("{}:{}", p.task, toks.join("."))
}

/// Element-wise mean of several vectors in the given order.
pub fn mean_vector<T: Scalar>(vs: &[Vector<T>]) -> Result<Vector<T>> {
    let first = vs.first().ok_or_else(|| Error::InvalidArgument("nothing to average".into()))?;
    let mut acc = vec![T::zero(); first.dim()];
    for v in vs {
        if v.dim() != acc.len() {
            return Err(Error::Dimension("vectors differ in length".into()));
        }
        for (a, &x) in acc.iter_mut().zip(v.as_slice()) {
            *a = *a + x;
        }
    }
    let inv = T::lit(1.0 / vs.len() as f64);
    Vector::new(acc.into_iter().map(|a| a * inv).collect())
}

fn injected_accuracy<T: Scalar>(
    params: &Params<T>,
    fv: &[T],
    prompts: &[Prompt],
    layer: usize,
    alpha: f64,
    site: InjectionSite,
) -> Result<f64> {
    let hits = prompts
        .iter()
        .map(|p| {
            let mut plan = InterventionPlan::empty();
            if alpha != 0.0 {
                plan.residual_additions.push(ResidualAddition {
                    layer,
                    position: p.t_final,
                    vector: fv.to_vec(),
                    scale: T::lit(alpha),
                    site,
                });
            }
            Ok(usize::from(forward(params, p, &plan)?.predicted == p.answer))
        })
        .sum::<Result<usize>>()?;
    Ok(hits as f64 / prompts.len() as f64)
}

/// Accuracy on zero-shot prompts after adding `α·fv` at `t_final` of layer
/// `ℓ`, for every `ℓ ≤ L′` and `α` in the grid.
pub fn injection_sweep<T: Scalar>(
    params: &Params<T>,
    fv: &Vector<T>,
    zero_shot_set: &[Prompt],
    cfg: &SweepConfig,
) -> Result<SweepResult> {
    if cfg.l_prime >= params.config.n_layers {
        return Err(Error::InvalidArgument(format!(
            "L' = {} must be below n_layers = {}",
            cfg.l_prime, params.config.n_layers
        )));
    }
    if cfg.alpha_grid.is_empty() || zero_shot_set.is_empty() {
        return Err(Error::InvalidArgument("sweep needs alphas and prompts".into()));
    }
    if fv.dim() != params.config.d_model {
        return Err(Error::Dimension(format!("FV has dim {}, model {}", fv.dim(), params.config.d_model)));
    }
    if let Some(p) = zero_shot_set.iter().find(|p| p.n_shots() != 0) {
        return Err(Error::InvalidArgument(format!("sweep prompt {} is not zero-shot", prompt_id(p))));
    }
    let baseline = injected_accuracy(params, fv.as_slice(), zero_shot_set, 0, 0.0, cfg.site)?;
    let grid: Vec<(usize, f64)> = (0..=cfg.l_prime)
        .flat_map(|l| cfg.alpha_grid.iter().map(move |&a| (l, a)))
        .collect();
    let acc: Vec<SweepCell> = grid
        .par_iter()
        .map(|&(layer, alpha)| {
            let acc = if alpha == 0.0 {
                baseline
            } else {
                injected_accuracy(params, fv.as_slice(), zero_shot_set, layer, alpha, cfg.site)?
            };
            Ok(SweepCell { layer, alpha, acc })
        })
        .collect::<Result<_>>()?;
    let best = acc
        .iter()
        .fold(acc[0], |best, c| if c.acc > best.acc { *c } else { best });
    Ok(SweepResult {
        acc_max: best.acc,
        argmax: (best.layer, best.alpha),
        baseline_zero_shot_acc: baseline,
        acc,
    })
}

/// Zero-shot prompts `(x, IO_SEP)` for every input of `task`.
pub fn zero_shot_set(vocab: &Vocab, task: &TaskDef) -> Result<Vec<Prompt>> {
    task.input_space.iter().map(|&x| Prompt::zero_shot(vocab, task, x)).collect()
}

/// Accuracy with the given heads' outputs zeroed at `t_final`.
pub fn ablated_accuracy<T: Scalar>(params: &Params<T>, heads: &[HeadId], prompts: &[Prompt]) -> Result<f64> {
    for &h in heads {
        check_head(params, h)?;
    }
    let dh = params.config.d_head;
    let hits = prompts
        .par_iter()
        .map(|p| {
            let mut plan = InterventionPlan::empty();
            for h in heads {
                plan.head_overrides.push(HeadOverride {
                    layer: h.layer,
                    head: h.head,
                    position: p.t_final,
                    value: vec![T::zero(); dh],
                });
            }
            Ok(usize::from(forward(params, p, &plan)?.predicted == p.answer))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / prompts.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_set_sorts_descending_with_stable_ties() {
        let h = |layer, head| HeadId { layer, head };
        let set = FVHeadSet::new(vec![(h(1, 0), 0.1), (h(0, 1), 0.3), (h(0, 0), 0.1)]).unwrap();
        assert_eq!(set.heads, vec![h(0, 1), h(0, 0), h(1, 0)]);
        assert!(FVHeadSet::new(vec![]).is_err());
        assert_eq!(set.top(2).aie_scores, vec![0.3, 0.1]);
    }

    #[test]
    fn top_k_defaults() {
        assert_eq!(default_top_k(4, 4), 1);
        assert_eq!(default_top_k(4, 8), 3);
        assert_eq!(default_top_k(2, 2), 1);
        assert_eq!(default_top_k(10, 10), 10);
        assert_eq!(SweepConfig::default_for(4).l_prime, 1);
    }
}
