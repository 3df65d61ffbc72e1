//! One-layer, one-head softmax model over a discrete two-task family.
//!
//! Output for a prompt `(x_1,y_1)…(x_k,y_k) x_q` is `φ(x_q, Σ a_i ψ(x_i,y_i))`
//! with `a = softmax(α(x_q, x_i, y_i))`. `φ` is affine in the aggregate,
//! `φ(x_q, z) = b(x_q) + m(x_q)·z`, so its Lipschitz constant in `z` is
//! exactly `‖m(x_q)‖`. Infinite logits are replaced by a cap of ±30.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::central_difference;

pub const LOGIT_CAP: f64 = 30.0;

fn y_index(y: i8) -> usize {
    usize::from(y > 0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteTaskPair {
    pub n_inputs: usize,
    pub f_a: Vec<i8>,
    pub f_b: Vec<i8>,
    pub ambiguous_set: Vec<usize>,
    /// Probability of a disagreement query under the uniform query law.
    pub delta: f64,
}

impl DiscreteTaskPair {
    pub fn new(f_a: Vec<i8>, f_b: Vec<i8>) -> Result<Self> {
        if f_a.len() != f_b.len() || f_a.is_empty() {
            return Err(Error::InvalidArgument("task tables must be nonempty and equal length".into()));
        }
        if f_a.iter().chain(&f_b).any(|&y| y != 1 && y != -1) {
            return Err(Error::InvalidArgument("task outputs must be ±1".into()));
        }
        let ambiguous_set: Vec<usize> = (0..f_a.len()).filter(|&x| f_a[x] == f_b[x]).collect();
        if ambiguous_set.len() == f_a.len() {
            return Err(Error::InvalidArgument("at least one input must be unambiguous".into()));
        }
        if ambiguous_set.is_empty() {
            return Err(Error::InvalidArgument("at least one input must be ambiguous".into()));
        }
        let n = f_a.len();
        Ok(Self {
            delta: (n - ambiguous_set.len()) as f64 / n as f64,
            n_inputs: n,
            f_a,
            f_b,
            ambiguous_set,
        })
    }

    /// `n_inputs` inputs, the first `⌊overlap·n⌋` ambiguous; task A alternates
    /// signs and task B flips A outside the agreement set.
    pub fn standard(n_inputs: usize, overlap: f64) -> Result<Self> {
        let k = (overlap * n_inputs as f64 + 1e-9).floor() as usize;
        let f_a: Vec<i8> = (0..n_inputs).map(|x| if x % 2 == 0 { 1 } else { -1 }).collect();
        let f_b = f_a.iter().enumerate().map(|(x, &y)| if x < k { y } else { -y }).collect();
        Self::new(f_a, f_b)
    }

    pub fn is_ambiguous(&self, x: usize) -> bool {
        self.f_a[x] == self.f_b[x]
    }

    pub fn apply(&self, task: TheoryTask, x: usize) -> i8 {
        match task {
            TheoryTask::A => self.f_a[x],
            TheoryTask::B => self.f_b[x],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TheoryTask {
    A,
    B,
}

/// Tables stored flat: `ψ[x][y][d]`, `α[x_q][x][y]`, `m[x_q][d]`, `b[x_q]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    pub n_inputs: usize,
    pub d: usize,
    pub psi: Vec<f64>,
    pub alpha_logits: Vec<f64>,
    pub phi_slope: Vec<f64>,
    pub phi_bias: Vec<f64>,
}

impl TheoryParams {
    pub fn zeros(n_inputs: usize, d: usize) -> Self {
        Self {
            n_inputs,
            d,
            psi: vec![0.0; 2 * n_inputs * d],
            alpha_logits: vec![0.0; 2 * n_inputs * n_inputs],
            phi_slope: vec![0.0; n_inputs * d],
            phi_bias: vec![0.0; n_inputs],
        }
    }

    pub fn random(n_inputs: usize, d: usize, scale: f64, seed: u64) -> Self {
        let mut p = Self::zeros(n_inputs, d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).expect("valid scale");
        for v in p.psi.iter_mut().chain(&mut p.alpha_logits).chain(&mut p.phi_slope).chain(&mut p.phi_bias) {
            *v = normal.sample(&mut rng);
        }
        p
    }

    pub fn psi(&self, x: usize, y: i8) -> &[f64] {
        let o = (2 * x + y_index(y)) * self.d;
        &self.psi[o..o + self.d]
    }

    fn psi_offset(&self, x: usize, y: i8) -> usize {
        (2 * x + y_index(y)) * self.d
    }

    fn alpha_index(&self, xq: usize, x: usize, y: i8) -> usize {
        (xq * self.n_inputs + x) * 2 + y_index(y)
    }

    pub fn alpha(&self, xq: usize, x: usize, y: i8) -> f64 {
        self.alpha_logits[self.alpha_index(xq, x, y)]
    }

    pub fn slope(&self, xq: usize) -> &[f64] {
        &self.phi_slope[xq * self.d..(xq + 1) * self.d]
    }

    pub fn len(&self) -> usize {
        self.psi.len() + self.alpha_logits.len() + self.phi_slope.len() + self.phi_bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        [&self.psi[..], &self.alpha_logits, &self.phi_slope, &self.phi_bias].concat()
    }

    pub fn from_flat(n_inputs: usize, d: usize, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(n_inputs, d);
        if flat.len() != p.len() {
            return Err(Error::Dimension(format!("expected {} theory parameters, got {}", p.len(), flat.len())));
        }
        let mut rest = flat;
        for part in [&mut p.psi, &mut p.alpha_logits, &mut p.phi_slope, &mut p.phi_bias] {
            let (head, tail) = rest.split_at(part.len());
            part.copy_from_slice(head);
            rest = tail;
        }
        Ok(p)
    }

    fn clamp_logits(&mut self) {
        for a in &mut self.alpha_logits {
            *a = a.clamp(-LOGIT_CAP, LOGIT_CAP);
        }
    }

    fn check(&self, pair: &DiscreteTaskPair) -> Result<()> {
        if self.n_inputs != pair.n_inputs {
            return Err(Error::Dimension(format!(
                "params cover {} inputs, pair has {}",
                self.n_inputs, pair.n_inputs
            )));
        }
        if self.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("theory parameters".into()));
        }
        Ok(())
    }
}

/// Attention weights over the examples for query `xq`.
pub fn theory_attention(params: &TheoryParams, examples: &[(usize, i8)], xq: usize) -> Vec<f64> {
    let logits: Vec<f64> = examples.iter().map(|&(x, y)| params.alpha(xq, x, y)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn aggregate(params: &TheoryParams, examples: &[(usize, i8)], a: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; params.d];
    for (&(x, y), &ai) in examples.iter().zip(a) {
        for (zj, &pj) in z.iter_mut().zip(params.psi(x, y)) {
            *zj += ai * pj;
        }
    }
    z
}

/// `φ(x_q, z)` for an arbitrary aggregate `z`.
pub fn theory_readout(params: &TheoryParams, xq: usize, z: &[f64]) -> f64 {
    params.phi_bias[xq] + params.slope(xq).iter().zip(z).map(|(m, z)| m * z).sum::<f64>()
}

pub fn theory_forward(params: &TheoryParams, examples: &[(usize, i8)], xq: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("theory prompt needs at least one example".into()));
    }
    let a = theory_attention(params, examples, xq);
    Ok(theory_readout(params, xq, &aggregate(params, examples, &a)))
}

/// One prompt of the enumerated distribution with its probability.
#[derive(Clone, Debug, PartialEq)]
pub struct TheoryPrompt {
    pub task: TheoryTask,
    pub examples: Vec<(usize, i8)>,
    pub query: usize,
    pub weight: f64,
}

/// Uniform shot count in `1..=n`, uniform task, i.i.d. uniform example inputs
/// and uniform query.
pub fn enumerate_prompts(pair: &DiscreteTaskPair, n: usize) -> Vec<TheoryPrompt> {
    let nx = pair.n_inputs;
    let mut out = Vec::new();
    for k in 1..=n {
        let w = 1.0 / n as f64 * 0.5 * (nx as f64).powi(-(k as i32) - 1);
        for task in [TheoryTask::A, TheoryTask::B] {
            for code in 0..nx.pow(k as u32) {
                let mut c = code;
                let examples: Vec<(usize, i8)> = (0..k)
                    .map(|_| {
                        let x = c % nx;
                        c /= nx;
                        (x, pair.apply(task, x))
                    })
                    .collect();
                for query in 0..nx {
                    out.push(TheoryPrompt {
                        task,
                        examples: examples.clone(),
                        query,
                        weight: w,
                    });
                }
            }
        }
    }
    out
}

/// Above this many prompts the expectation is estimated by sampling.
pub const ENUMERATION_BUDGET: usize = 2_000_000;

fn prompt_count(pair: &DiscreteTaskPair, n: usize) -> usize {
    (1..=n).map(|k| 2 * pair.n_inputs.pow(k as u32 + 1)).sum()
}

/// Prompt set for the loss: exhaustive, or an equal-weight sample when the
/// enumeration exceeds the budget.
pub fn loss_prompts(pair: &DiscreteTaskPair, n: usize, seed: u64) -> (Vec<TheoryPrompt>, bool) {
    if prompt_count(pair, n) <= ENUMERATION_BUDGET {
        return (enumerate_prompts(pair, n), false);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = 200_000;
    let prompts = (0..m)
        .map(|_| {
            let k = rng.gen_range(1..=n);
            let task = if rng.gen::<bool>() { TheoryTask::A } else { TheoryTask::B };
            let examples = (0..k)
                .map(|_| {
                    let x = rng.gen_range(0..pair.n_inputs);
                    (x, pair.apply(task, x))
                })
                .collect();
            TheoryPrompt {
                task,
                examples,
                query: rng.gen_range(0..pair.n_inputs),
                weight: 1.0 / m as f64,
            }
        })
        .collect();
    (prompts, true)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryLoss {
    pub tau: f64,
    pub eta: f64,
    pub prediction_error: f64,
    pub psi_norm_term: f64,
    pub lipschitz_term: f64,
    pub total: f64,
    pub sampled: bool,
}

fn psi_norms_sq(params: &TheoryParams) -> Vec<f64> {
    params.psi.chunks_exact(params.d).map(|c| c.iter().map(|v| v * v).sum()).collect()
}

fn slope_norms(params: &TheoryParams) -> Vec<f64> {
    params
        .phi_slope
        .chunks_exact(params.d)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

fn prediction_error(params: &TheoryParams, pair: &DiscreteTaskPair, prompts: &[TheoryPrompt]) -> f64 {
    prompts
        .iter()
        .map(|p| {
            let a = theory_attention(params, &p.examples, p.query);
            let out = theory_readout(params, p.query, &aggregate(params, &p.examples, &a));
            let r = out - f64::from(pair.apply(p.task, p.query));
            p.weight * r * r
        })
        .sum()
}

pub fn theory_loss(params: &TheoryParams, pair: &DiscreteTaskPair, n: usize, tau: f64, eta: f64) -> Result<TheoryLoss> {
    if n <= 1 {
        return Err(Error::InvalidArgument(format!("shot range must exceed 1, got {n}")));
    }
    params.check(pair)?;
    let (prompts, sampled) = loss_prompts(pair, n, 0);
    let pe = prediction_error(params, pair, &prompts);
    let s = psi_norms_sq(params).into_iter().fold(0.0, f64::max);
    let l = slope_norms(params).into_iter().fold(0.0, f64::max);
    Ok(TheoryLoss {
        tau,
        eta,
        prediction_error: pe,
        psi_norm_term: s,
        lipschitz_term: l,
        total: pe + tau * s + eta * l,
        sampled,
    })
}

/// `(1/β)·log Σ exp(β v)` and its softmax weights.
fn smooth_max(v: &[f64], beta: f64) -> (f64, Vec<f64>) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (beta * (x - max)).exp()).collect();
    let s: f64 = e.iter().sum();
    (max + s.ln() / beta, e.iter().map(|x| x / s).collect())
}

/// Loss with both max terms replaced by a log-sum-exp at inverse
/// temperature `beta`, and its gradient in the flat layout.
pub fn smoothed_loss_and_grad(
    params: &TheoryParams,
    pair: &DiscreteTaskPair,
    prompts: &[TheoryPrompt],
    tau: f64,
    eta: f64,
    beta: f64,
) -> (f64, TheoryParams) {
    let d = params.d;
    let mut g = TheoryParams::zeros(params.n_inputs, d);
    let mut pe = 0.0;
    for p in prompts {
        let a = theory_attention(params, &p.examples, p.query);
        let z = aggregate(params, &p.examples, &a);
        let out = theory_readout(params, p.query, &z);
        let r = out - f64::from(pair.apply(p.task, p.query));
        pe += p.weight * r * r;
        let dout = 2.0 * p.weight * r;
        g.phi_bias[p.query] += dout;
        let m = params.slope(p.query);
        for j in 0..d {
            g.phi_slope[p.query * d + j] += dout * z[j];
        }
        let dz: Vec<f64> = m.iter().map(|&mj| dout * mj).collect();
        let z_dz: f64 = z.iter().zip(&dz).map(|(a, b)| a * b).sum();
        for (&(x, y), &ai) in p.examples.iter().zip(&a) {
            let o = params.psi_offset(x, y);
            let psi = params.psi(x, y);
            let mut psi_dz = 0.0;
            for j in 0..d {
                g.psi[o + j] += ai * dz[j];
                psi_dz += psi[j] * dz[j];
            }
            g.alpha_logits[params.alpha_index(p.query, x, y)] += ai * (psi_dz - z_dz);
        }
    }
    let (s, ws) = smooth_max(&psi_norms_sq(params), beta);
    for (k, w) in ws.iter().enumerate() {
        for j in 0..d {
            g.psi[k * d + j] += tau * w * 2.0 * params.psi[k * d + j];
        }
    }
    let norms = slope_norms(params);
    let (l, wl) = smooth_max(&norms, beta);
    for (k, (w, &nk)) in wl.iter().zip(&norms).enumerate() {
        if nk > 0.0 {
            for j in 0..d {
                g.phi_slope[k * d + j] += eta * w * params.phi_slope[k * d + j] / nk;
            }
        }
    }
    (pe + tau * s + eta * l, g)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryHyper {
    pub steps: usize,
    pub lr: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub n: usize,
    pub seed: u64,
}

impl Default for TheoryHyper {
    fn default() -> Self {
        Self {
            steps: 6000,
            lr: 0.02,
            beta_start: 20.0,
            beta_end: 2000.0,
            n: 3,
            seed: 0,
        }
    }
}

pub struct TheoryTrainOutput {
    pub params: TheoryParams,
    /// True (unsmoothed) total loss after every step.
    pub loss_trace: Vec<f64>,
}

/// Adam on the smoothed loss with geometrically annealed `beta`; logits are
/// projected back into `[-cap, cap]` after every step.
pub fn train_theory(
    init: &TheoryParams,
    pair: &DiscreteTaskPair,
    tau: f64,
    eta: f64,
    hyper: &TheoryHyper,
) -> Result<TheoryTrainOutput> {
    if !(hyper.lr >= 0.0) {
        return Err(Error::InvalidArgument("learning rate must be nonnegative".into()));
    }
    if hyper.n <= 1 {
        return Err(Error::InvalidArgument("shot range must exceed 1".into()));
    }
    init.check(pair)?;
    let (prompts, _) = loss_prompts(pair, hyper.n, hyper.seed);
    let mut params = init.clone();
    let mut flat = params.to_flat();
    let mut m1 = vec![0.0; flat.len()];
    let mut m2 = vec![0.0; flat.len()];
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut trace = Vec::with_capacity(hyper.steps);
    for step in 0..hyper.steps {
        let frac = step as f64 / hyper.steps.max(2).saturating_sub(1) as f64;
        let beta = hyper.beta_start * (hyper.beta_end / hyper.beta_start).powf(frac);
        let (loss, grad) = smoothed_loss_and_grad(&params, pair, &prompts, tau, eta, beta);
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        if hyper.lr > 0.0 {
            let g = grad.to_flat();
            let t = (step + 1) as i32;
            for i in 0..flat.len() {
                m1[i] = b1 * m1[i] + (1.0 - b1) * g[i];
                m2[i] = b2 * m2[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m1[i] / (1.0 - b1.powi(t));
                let vh = m2[i] / (1.0 - b2.powi(t));
                flat[i] -= hyper.lr * mh / (vh.sqrt() + eps);
            }
            params = TheoryParams::from_flat(params.n_inputs, params.d, &flat)?;
            params.clamp_logits();
            flat = params.to_flat();
        }
        let pe = prediction_error(&params, pair, &prompts);
        let s = psi_norms_sq(&params).into_iter().fold(0.0, f64::max);
        let l = slope_norms(&params).into_iter().fold(0.0, f64::max);
        trace.push(pe + tau * s + eta * l);
    }
    Ok(TheoryTrainOutput { params, loss_trace: trace })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryGradCheck {
    pub max_rel_err: f64,
    pub n_checked: usize,
}

/// Fourth-order central differences of the smoothed loss against its analytic gradient.
#[allow(clippy::too_many_arguments)]
pub fn theory_grad_check(
    params: &TheoryParams,
    pair: &DiscreteTaskPair,
    n: usize,
    tau: f64,
    eta: f64,
    beta: f64,
    eps: f64,
    n_samples: usize,
    seed: u64,
) -> Result<TheoryGradCheck> {
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside [1e-5, 1e-2]")));
    }
    let prompts = enumerate_prompts(pair, n);
    let (_, g) = smoothed_loss_and_grad(params, pair, &prompts, tau, eta, beta);
    let g = g.to_flat();
    let base = params.to_flat();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let eval = |flat: &[f64]| -> Result<f64> {
        let p = TheoryParams::from_flat(params.n_inputs, params.d, flat)?;
        Ok(smoothed_loss_and_grad(&p, pair, &prompts, tau, eta, beta).0)
    };
    for _ in 0..n_samples {
        let i = rng.gen_range(0..base.len());
        let mut probe = base.clone();
        let fd = central_difference(
            &mut |h| {
                probe[i] = base[i] + h;
                eval(&probe)
            },
            eps,
        )?;
        worst = worst.max((g[i] - fd).abs() / g[i].abs().max(1e-8));
    }
    Ok(TheoryGradCheck {
        max_rel_err: worst,
        n_checked: n_samples,
    })
}

/// Probability that every example of a prompt is ambiguous.
pub fn all_ambiguous_probability(pair: &DiscreteTaskPair, n: usize) -> f64 {
    let r = pair.ambiguous_set.len() as f64 / pair.n_inputs as f64;
    (1..=n).map(|k| r.powi(k as i32)).sum::<f64>() / n as f64
}

/// `δ(1 − L√S)₊² + τS + ηL`.
pub fn lower_bound(delta: f64, tau: f64, eta: f64, s: f64, l: f64) -> f64 {
    let gap = (1.0 - l * s.sqrt()).max(0.0);
    delta * gap * gap + tau * s + eta * l
}

/// Exact loss of the construction at `(S, L)`: fully ambiguous prompts with a
/// disagreement query cost 1 (the output is the midpoint 0), every other
/// disagreement-query prompt costs `(1 − L√S)²`.
pub fn construction_loss(delta: f64, q: f64, tau: f64, eta: f64, s: f64, l: f64) -> f64 {
    let gap = 1.0 - l * s.sqrt();
    delta * q + delta * (1.0 - q) * gap * gap + tau * s + eta * l
}

fn minimize_1d(f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    // golden section on a log scale
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    while (b - a).abs() > 1e-12 {
        if f(c.exp()) < f(d.exp()) {
            b = d;
        } else {
            a = c;
        }
        c = b - r * (b - a);
        d = a + r * (b - a);
    }
    lo = a.exp();
    hi = b.exp();
    0.5 * (lo + hi)
}

/// Minimizes `obj(S, L)` by a log grid then coordinate descent until the
/// relative change drops below 1e-8.
pub fn minimize_s_l(obj: &dyn Fn(f64, f64) -> f64) -> (f64, f64) {
    let grid: Vec<f64> = (0..=80).map(|i| 10f64.powf(-4.0 + 8.0 * i as f64 / 80.0)).collect();
    let mut best = (grid[0], grid[0], f64::INFINITY);
    for &s in &grid {
        for &l in &grid {
            let v = obj(s, l);
            if v < best.2 {
                best = (s, l, v);
            }
        }
    }
    let (mut s, mut l, mut v) = best;
    for _ in 0..1000 {
        s = minimize_1d(&|x| obj(x, l), s / 10.0, s * 10.0);
        l = minimize_1d(&|x| obj(s, x), l / 10.0, l * 10.0);
        let nv = obj(s, l);
        let done = (v - nv).abs() <= 1e-8 * v.abs();
        v = nv;
        if done {
            break;
        }
    }
    (s, l)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticOptimum {
    pub params: TheoryParams,
    pub loss: TheoryLoss,
    pub s: f64,
    pub l: f64,
    /// Exact construction loss at `(S, L)`.
    pub predicted_loss: f64,
    /// `δ(1 − L√S)₊² + τS + ηL` at `(S, L)`.
    pub lower_bound: f64,
}

/// The proof's construction: antipodal task vectors along the first basis
/// direction, zero ψ and minimal logits on ambiguous examples, slope of norm
/// `L` with sign `F_A(x_q)` on disagreement queries, constant `F_A(x_q)`
/// elsewhere. `(S, L)` minimize the construction's exact loss.
pub fn construct_analytic_optimum(pair: &DiscreteTaskPair, n: usize, tau: f64, eta: f64, d: usize) -> Result<AnalyticOptimum> {
    if !(tau > 0.0 && eta > 0.0) {
        return Err(Error::InvalidArgument("tau and eta must be positive".into()));
    }
    if d == 0 {
        return Err(Error::InvalidArgument("d must be positive".into()));
    }
    let q = all_ambiguous_probability(pair, n);
    let delta = pair.delta;
    let (s, l) = minimize_s_l(&|s, l| construction_loss(delta, q, tau, eta, s, l));
    let mut p = TheoryParams::zeros(pair.n_inputs, d);
    let root = s.sqrt();
    for x in 0..pair.n_inputs {
        if !pair.is_ambiguous(x) {
            let oa = p.psi_offset(x, pair.f_a[x]);
            p.psi[oa] = root;
            let ob = p.psi_offset(x, pair.f_b[x]);
            p.psi[ob] = -root;
        }
    }
    for xq in 0..pair.n_inputs {
        for x in 0..pair.n_inputs {
            for y in [-1i8, 1] {
                let i = p.alpha_index(xq, x, y);
                p.alpha_logits[i] = if pair.is_ambiguous(x) { -LOGIT_CAP } else { LOGIT_CAP };
            }
        }
        if pair.is_ambiguous(xq) {
            p.phi_bias[xq] = f64::from(pair.f_a[xq]);
        } else {
            p.phi_slope[xq * d] = l * f64::from(pair.f_a[xq]);
        }
    }
    let loss = theory_loss(&p, pair, n, tau, eta)?;
    Ok(AnalyticOptimum {
        params: p,
        loss,
        s,
        l,
        predicted_loss: construction_loss(delta, q, tau, eta, s, l),
        lower_bound: lower_bound(delta, tau, eta, s, l),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    /// Largest single ambiguous-example weight over mixed prompts with a
    /// disagreement query.
    pub max_ambiguous_attention_in_mixed: f64,
    /// Same, for agreement queries (where the readout ignores the aggregate).
    pub max_ambiguous_attention_in_mixed_ambiguous_query: f64,
    /// Smallest single unambiguous-example weight in the same prompts.
    pub min_unambiguous_attention_in_mixed: f64,
    pub psi_task_cohesion: f64,
    pub antipodality: f64,
    pub affine_check: bool,
    pub midpoint_deviation: f64,
    pub prediction_error: f64,
    pub passed: bool,
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0)
}

/// Measures the structural properties over every mixed prompt up to `n`
/// shots. Never fails on a property; `passed` summarizes against `tol`.
pub fn verify_theorem(params: &TheoryParams, pair: &DiscreteTaskPair, n: usize, tau: f64, eta: f64, tol: f64) -> Result<TheoremReport> {
    let loss = theory_loss(params, pair, n, tau, eta)?;
    if loss.prediction_error >= 1.0 - 1e-9 {
        return Err(Error::HypothesisUnmet(loss.prediction_error));
    }
    let mut max_amb: f64 = 0.0;
    let mut max_amb_aq: f64 = 0.0;
    let mut min_unamb: f64 = 1.0;
    for p in enumerate_prompts(pair, n) {
        let flags: Vec<bool> = p.examples.iter().map(|e| pair.is_ambiguous(e.0)).collect();
        if !(flags.iter().any(|&f| f) && flags.iter().any(|&f| !f)) {
            continue;
        }
        let a = theory_attention(params, &p.examples, p.query);
        for (&w, &amb) in a.iter().zip(&flags) {
            if amb {
                if pair.is_ambiguous(p.query) {
                    max_amb_aq = max_amb_aq.max(w);
                } else {
                    max_amb = max_amb.max(w);
                }
            } else if !pair.is_ambiguous(p.query) {
                min_unamb = min_unamb.min(w);
            }
        }
    }
    let unamb: Vec<usize> = (0..pair.n_inputs).filter(|&x| !pair.is_ambiguous(x)).collect();
    let mut cohesion: f64 = 1.0;
    let mut mean = [vec![0.0; params.d], vec![0.0; params.d]];
    for (t, task) in [TheoryTask::A, TheoryTask::B].into_iter().enumerate() {
        for (i, &x) in unamb.iter().enumerate() {
            let px = params.psi(x, pair.apply(task, x));
            for (m, v) in mean[t].iter_mut().zip(px) {
                *m += v / unamb.len() as f64;
            }
            for &x2 in &unamb[i + 1..] {
                cohesion = cohesion.min(cos(px, params.psi(x2, pair.apply(task, x2))));
            }
        }
    }
    let mut midpoint: f64 = 0.0;
    for &xq in &unamb {
        let target = f64::from(pair.f_a[xq] + pair.f_b[xq]) / 2.0;
        for &x in &pair.ambiguous_set {
            let z = params.psi(x, pair.f_a[x]);
            midpoint = midpoint.max((theory_readout(params, xq, z) - target).abs());
        }
    }
    let antipodality = cos(&mean[0], &mean[1]);
    Ok(TheoremReport {
        max_ambiguous_attention_in_mixed: max_amb,
        max_ambiguous_attention_in_mixed_ambiguous_query: max_amb_aq,
        min_unambiguous_attention_in_mixed: min_unamb,
        psi_task_cohesion: cohesion,
        antipodality,
        affine_check: true,
        midpoint_deviation: midpoint,
        prediction_error: loss.prediction_error,
        passed: max_amb <= tol && max_amb < min_unamb,
    })
}
