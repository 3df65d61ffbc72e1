use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::{sample_prompt, PositionalSetting, Prompt, PromptSource, SamplingOptions, TaskDef, TokenId, Vocab, EXAMPLE_LEN};
use crate::Scalar;

use super::backward::{backward, cross_entropy};
use super::config::ModelConfig;
use super::forward::forward_tokens;
use super::params::Params;
use super::plan::InterventionPlan;

/// Which positions contribute to the training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPositions {
    /// Only the answer at `t_final`.
    FinalOnly,
    /// Every `IO_SEP`: each is the `t_final` of the prompt prefix ending there.
    AllSeparators,
    /// Every `IO_SEP` with at least one example before it.
    ContextSeparators,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub shot_min: usize,
    pub shot_max: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub min_lr_frac: f64,
    pub loss_positions: LossPositions,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 16,
            lr: 3e-4,
            warmup: 100,
            weight_decay: 0.01,
            shot_min: 1,
            shot_max: 10,
            seed: 0,
            grad_clip: 1.0,
            min_lr_frac: 0.1,
            loss_positions: LossPositions::AllSeparators,
        }
    }
}

pub struct TrainOutput<T: Scalar> {
    pub params: Params<T>,
    pub loss_trace: Vec<f64>,
}

/// Loss positions and targets of one prompt.
pub fn loss_targets(prompt: &Prompt, mode: LossPositions) -> (Vec<usize>, Vec<TokenId>) {
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    let skip = match mode {
        LossPositions::FinalOnly => prompt.n_shots(),
        LossPositions::AllSeparators => 0,
        LossPositions::ContextSeparators => 1,
    };
    for span in prompt.spans[..prompt.n_shots()].iter().skip(skip) {
        positions.push(span.start + 1);
        targets.push(prompt.tokens[span.start + 2]);
    }
    positions.push(prompt.t_final);
    targets.push(prompt.answer);
    (positions, targets)
}

/// Mean cross-entropy over every loss position of the batch, with its
/// gradient in the flat parameter layout.
pub fn batch_loss_and_grad<T: Scalar>(
    params: &Params<T>,
    batch: &[Prompt],
    mode: LossPositions,
) -> Result<(f64, Vec<T>)> {
    let targets: Vec<_> = batch.iter().map(|p| loss_targets(p, mode)).collect();
    let count: usize = targets.iter().map(|t| t.0.len()).sum();
    let weight = T::one() / T::lit(count as f64);
    let parts = batch
        .par_iter()
        .zip(&targets)
        .map(|(p, (pos, tgt))| -> Result<(T, Vec<T>)> {
            let cache = forward_tokens(params, &p.tokens, &InterventionPlan::empty())?;
            let (loss, dlogits) = cross_entropy(&cache, pos, tgt, weight);
            let grad = backward(params, &cache, &p.tokens, &dlogits)?;
            Ok((loss, grad))
        })
        .collect::<Vec<_>>();
    let mut total = T::zero();
    let mut grad = vec![T::zero(); params.layout().total()];
    for part in parts {
        let (loss, g) = part?;
        total = total + loss;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a = *a + *b;
        }
    }
    Ok((total.as_f64() / count as f64, grad))
}

pub fn batch_loss<T: Scalar>(params: &Params<T>, batch: &[Prompt], mode: LossPositions) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for p in batch {
        let (pos, tgt) = loss_targets(p, mode);
        let cache = forward_tokens(params, &p.tokens, &InterventionPlan::empty())?;
        let (loss, _) = cross_entropy(&cache, &pos, &tgt, T::one());
        total += loss.as_f64();
        count += pos.len();
    }
    Ok(total / count as f64)
}

fn lr_at(h: &TrainHyper, step: usize) -> f64 {
    if step < h.warmup {
        return h.lr * (step + 1) as f64 / h.warmup as f64;
    }
    let span = (h.steps - h.warmup).max(1) as f64;
    let progress = (step - h.warmup) as f64 / span;
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    h.lr * (h.min_lr_frac + (1.0 - h.min_lr_frac) * cosine)
}

pub fn sample_training_batch<R: RngCore>(
    vocab: &Vocab,
    tasks: &[TaskDef],
    shot_min: usize,
    shot_max: usize,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<Prompt>> {
    (0..batch)
        .map(|_| {
            let task = &tasks[rng.gen_range(0..tasks.len())];
            let n = rng.gen_range(shot_min..=shot_max);
            sample_prompt(
                vocab,
                PromptSource::Task(task),
                n,
                PositionalSetting::Uniform,
                rng.next_u64(),
                SamplingOptions::default(),
            )
        })
        .collect()
}

/// AdamW with linear warmup, cosine decay and global-norm clipping.
pub fn train<T: Scalar>(
    config: &ModelConfig,
    vocab: &Vocab,
    tasks: &[TaskDef],
    hyper: &TrainHyper,
) -> Result<TrainOutput<T>> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one task".into()));
    }
    if hyper.shot_min == 0 || hyper.shot_min > hyper.shot_max {
        return Err(Error::Config {
            field: "train.shot_min".into(),
            msg: "shot range must satisfy 1 <= shot_min <= shot_max".into(),
        });
    }
    if EXAMPLE_LEN * hyper.shot_max + 2 > config.max_seq {
        return Err(Error::Config {
            field: "train.shot_max".into(),
            msg: format!("{}-shot prompts exceed max_seq {}", hyper.shot_max, config.max_seq),
        });
    }
    if vocab.size() != config.vocab_size {
        return Err(Error::Config {
            field: "model.vocab_size".into(),
            msg: format!("must equal the task vocabulary size {}", vocab.size()),
        });
    }
    let mut params = Params::<T>::init(config)?;
    let n = params.layout().total();
    let decay_mask: Vec<bool> = {
        let mut m = vec![false; n];
        for (id, _, r) in params.layout().entries() {
            if id.is_matrix() {
                m[r].fill(true);
            }
        }
        m
    };
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let mut m1 = vec![0.0f64; n];
    let mut m2 = vec![0.0f64; n];
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut loss_trace = Vec::with_capacity(hyper.steps);
    for step in 0..hyper.steps {
        let batch = sample_training_batch(vocab, tasks, hyper.shot_min, hyper.shot_max, hyper.batch, &mut rng)?;
        let (loss, grad) = batch_loss_and_grad(&params, &batch, hyper.loss_positions)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        loss_trace.push(loss);
        let mut norm_sq = 0.0;
        for g in &grad {
            norm_sq += g.as_f64() * g.as_f64();
        }
        let norm = norm_sq.sqrt();
        let clip = if hyper.grad_clip > 0.0 && norm > hyper.grad_clip {
            hyper.grad_clip / norm
        } else {
            1.0
        };
        let lr = lr_at(hyper, step);
        let t = (step + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (i, theta) in params.flat_mut().iter_mut().enumerate() {
            let g = grad[i].as_f64() * clip;
            m1[i] = b1 * m1[i] + (1.0 - b1) * g;
            m2[i] = b2 * m2[i] + (1.0 - b2) * g * g;
            let mut update = (m1[i] / c1) / ((m2[i] / c2).sqrt() + eps);
            if decay_mask[i] {
                update += hyper.weight_decay * theta.as_f64();
            }
            *theta = *theta - T::lit(lr * update);
        }
        if !params.all_finite() {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
    }
    Ok(TrainOutput { params, loss_trace })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub n_checked: usize,
    pub worst_index: usize,
}

/// Compares analytic gradients with fourth-order central differences
/// (stencil at ±eps, ±2eps) on `n_samples` uniformly drawn parameters.
/// Relative error uses `max(|g|, 1e-8)` with `g` the analytic gradient.
pub fn grad_check(
    params: &Params<f64>,
    batch: &[Prompt],
    eps: f64,
    n_samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside [1e-5, 1e-2]")));
    }
    let mode = LossPositions::AllSeparators;
    let (_, grad) = batch_loss_and_grad(params, batch, mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut worst = (0.0f64, 0usize);
    for _ in 0..n_samples {
        let i = rng.gen_range(0..grad.len());
        let orig = probe.flat()[i];
        let mut at = |h: f64| -> Result<f64> {
            probe.flat_mut()[i] = orig + h;
            batch_loss(&probe, batch, mode)
        };
        let fd = central_difference(&mut at, eps)?;
        probe.flat_mut()[i] = orig;
        let rel = (grad[i] - fd).abs() / grad[i].abs().max(1e-8);
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_err: worst.0,
        n_checked: n_samples,
        worst_index: worst.1,
    })
}

/// `(-f(2h) + 8f(h) - 8f(-h) + f(-2h)) / 12h`, error O(h^4).
pub(crate) fn central_difference(f: &mut impl FnMut(f64) -> Result<f64>, h: f64) -> Result<f64> {
    let (p1, m1, p2, m2) = (f(h)?, f(-h)?, f(2.0 * h)?, f(-2.0 * h)?);
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}

/// Top-1 accuracy at `t_final`.
pub fn accuracy<T: Scalar>(params: &Params<T>, prompts: &[Prompt]) -> Result<f64> {
    let hits = prompts
        .par_iter()
        .map(|p| {
            let r = super::forward::forward(params, p, &InterventionPlan::empty())?;
            Ok(usize::from(r.predicted == p.answer))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / prompts.len().max(1) as f64)
}
