use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{gemm, softmax_in_place, Transpose};
use crate::tasks::{Prompt, TokenId};
use crate::Scalar;

use super::cache::{ActivationCache, LayerCache};
use super::params::{Params, TensorId};
use super::plan::{Channel, InjectionSite, InterventionPlan};

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct RunResult<T: Scalar> {
    /// Logits at `t_final`.
    pub logits: Vec<T>,
    pub cache: Arc<ActivationCache<T>>,
    pub predicted: TokenId,
}

impl<T: Scalar> RunResult<T> {
    /// Softmax probability of `token` at `t_final`.
    pub fn prob(&self, token: TokenId) -> T {
        let max = self.logits.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let mut total = T::zero();
        for &x in &self.logits {
            total = total + (x - max).exp();
        }
        (self.logits[token as usize] - max).exp() / total
    }
}

pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Runs the prompt under `plan` and reports the prediction at `t_final`.
pub fn forward<T: Scalar>(params: &Params<T>, prompt: &Prompt, plan: &InterventionPlan<T>) -> Result<RunResult<T>> {
    let cache = forward_tokens(params, &prompt.tokens, plan)?;
    let logits = cache.logits_at(prompt.t_final).to_vec();
    let predicted = argmax(&logits) as TokenId;
    Ok(RunResult {
        logits,
        cache: Arc::new(cache),
        predicted,
    })
}

pub(crate) fn layer_norm<T: Scalar>(
    x: &[T],
    gain: &[T],
    d: usize,
    xhat: &mut [T],
    rstd: &mut [T],
    out: &mut [T],
) {
    let inv_d = T::lit(1.0 / d as f64);
    let eps = T::lit(LN_EPS);
    for (t, row) in x.chunks_exact(d).enumerate() {
        let mut mean = T::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean * inv_d;
        let mut var = T::zero();
        for &v in row {
            var = var + (v - mean) * (v - mean);
        }
        var = var * inv_d;
        let r = T::one() / (var + eps).sqrt();
        rstd[t] = r;
        for j in 0..d {
            let xh = (row[j] - mean) * r;
            xhat[t * d + j] = xh;
            out[t * d + j] = xh * gain[j];
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

fn add_residuals<T: Scalar>(
    h: &mut [T],
    d: usize,
    plan: &InterventionPlan<T>,
    layer: usize,
    site: InjectionSite,
) {
    for a in &plan.residual_additions {
        if a.layer == layer && a.site == site {
            let row = &mut h[a.position * d..(a.position + 1) * d];
            for (x, &v) in row.iter_mut().zip(&a.vector) {
                *x = *x + a.scale * v;
            }
        }
    }
}

/// Full forward pass over a token sequence, recording every activation.
pub fn forward_tokens<T: Scalar>(
    params: &Params<T>,
    tokens: &[TokenId],
    plan: &InterventionPlan<T>,
) -> Result<ActivationCache<T>> {
    let c = &params.config;
    let (s, d, nh, dh, f, vsz) = (tokens.len(), c.d_model, c.n_heads, c.d_head, c.d_ff, c.vocab_size);
    if s == 0 {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    if s > c.max_seq {
        return Err(Error::InvalidArgument(format!(
            "sequence of {s} tokens exceeds max_seq {}",
            c.max_seq
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vsz) {
        return Err(Error::InvalidArgument(format!("token {t} outside vocabulary of {vsz}")));
    }
    plan.validate(c, s)?;

    let tok_emb = params.get(TensorId::TokEmb);
    let pos_emb = params.get(TensorId::PosEmb);
    let mut h = vec![T::zero(); s * d];
    for (t, &tok) in tokens.iter().enumerate() {
        let e = &tok_emb[tok as usize * d..(tok as usize + 1) * d];
        let p = &pos_emb[t * d..(t + 1) * d];
        for j in 0..d {
            h[t * d + j] = e[j] + p[j];
        }
    }

    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut layers = Vec::with_capacity(c.n_layers);
    let mut scores = vec![T::zero(); s];
    for l in 0..c.n_layers {
        add_residuals(&mut h, d, plan, l, InjectionSite::LayerInput);
        let resid_in = h.clone();
        let mut ln1_xhat = vec![T::zero(); s * d];
        let mut ln1_rstd = vec![T::zero(); s];
        let mut ln1_out = vec![T::zero(); s * d];
        layer_norm(&resid_in, params.get(TensorId::Ln1(l)), d, &mut ln1_xhat, &mut ln1_rstd, &mut ln1_out);

        let mut q = vec![T::zero(); s * d];
        let mut k = vec![T::zero(); s * d];
        let mut v = vec![T::zero(); s * d];
        gemm(s, d, d, &ln1_out, Transpose::No, params.get(TensorId::Wq(l)), Transpose::No, T::zero(), &mut q);
        gemm(s, d, d, &ln1_out, Transpose::No, params.get(TensorId::Wk(l)), Transpose::No, T::zero(), &mut k);
        gemm(s, d, d, &ln1_out, Transpose::No, params.get(TensorId::Wv(l)), Transpose::No, T::zero(), &mut v);

        for o in plan.row_overrides.iter().filter(|o| o.channel == Channel::Q && o.applies_to_layer(l)) {
            let src = &o.source.layers[l].q;
            for &r in &o.rows {
                q[r * d..(r + 1) * d].copy_from_slice(&src[r * d..(r + 1) * d]);
            }
        }
        let kv_overrides: Vec<_> = plan
            .row_overrides
            .iter()
            .filter(|o| o.channel != Channel::Q && o.applies_to_layer(l))
            .collect();

        let mut attn = vec![T::zero(); nh * s * s];
        let mut head_out = vec![T::zero(); s * d];
        let mut k_src: Vec<&[T]> = vec![&k[..]; s];
        let mut v_src: Vec<&[T]> = vec![&v[..]; s];
        for r in 0..s {
            if !kv_overrides.is_empty() {
                k_src.fill(&k[..]);
                v_src.fill(&v[..]);
                for o in kv_overrides.iter().filter(|o| o.rows.contains(&r)) {
                    let layer_src = &o.source.layers[l];
                    for &p in &o.positions {
                        match o.channel {
                            Channel::K => k_src[p] = &layer_src.k[..],
                            Channel::V => v_src[p] = &layer_src.v[..],
                            Channel::Q => unreachable!(),
                        }
                    }
                }
            }
            for hd in 0..nh {
                let off = hd * dh;
                let q_r = &q[r * d + off..r * d + off + dh];
                let row = &mut scores[..=r];
                for (p, sc) in row.iter_mut().enumerate() {
                    let allowed = plan.edge_mask.as_ref().map_or(true, |m| m.get(r, p));
                    *sc = if allowed {
                        let k_p = &k_src[p][p * d + off..p * d + off + dh];
                        let mut acc = T::zero();
                        for i in 0..dh {
                            acc = acc + q_r[i] * k_p[i];
                        }
                        acc * scale
                    } else {
                        T::neg_infinity()
                    };
                }
                softmax_in_place(row, true).map_err(|_| {
                    Error::Plan(format!("query row {r} has empty key support in layer {l}"))
                })?;
                attn[(hd * s + r) * s..(hd * s + r) * s + r + 1].copy_from_slice(row);
                let out = &mut head_out[r * d + off..r * d + off + dh];
                for (p, &a) in row.iter().enumerate() {
                    let v_p = &v_src[p][p * d + off..p * d + off + dh];
                    for i in 0..dh {
                        out[i] = out[i] + a * v_p[i];
                    }
                }
            }
        }
        for o in plan.head_overrides.iter().filter(|o| o.layer == l) {
            let start = o.position * d + o.head * dh;
            head_out[start..start + dh].copy_from_slice(&o.value);
        }

        let mut resid_mid = resid_in.clone();
        gemm(s, d, d, &head_out, Transpose::No, params.get(TensorId::Wo(l)), Transpose::No, T::one(), &mut resid_mid);
        add_residuals(&mut resid_mid, d, plan, l, InjectionSite::PostAttention);

        let mut ln2_xhat = vec![T::zero(); s * d];
        let mut ln2_rstd = vec![T::zero(); s];
        let mut ln2_out = vec![T::zero(); s * d];
        layer_norm(&resid_mid, params.get(TensorId::Ln2(l)), d, &mut ln2_xhat, &mut ln2_rstd, &mut ln2_out);

        let b1 = params.get(TensorId::B1(l));
        let mut mlp_pre: Vec<T> = (0..s).flat_map(|_| b1.iter().copied()).collect();
        gemm(s, d, f, &ln2_out, Transpose::No, params.get(TensorId::W1(l)), Transpose::No, T::one(), &mut mlp_pre);
        let mlp_act: Vec<T> = mlp_pre.iter().map(|&x| gelu(x)).collect();
        let b2 = params.get(TensorId::B2(l));
        let mut mlp_out: Vec<T> = (0..s).flat_map(|_| b2.iter().copied()).collect();
        gemm(s, f, d, &mlp_act, Transpose::No, params.get(TensorId::W2(l)), Transpose::No, T::one(), &mut mlp_out);
        for ((x, &m), &o) in h.iter_mut().zip(&resid_mid).zip(&mlp_out) {
            *x = m + o;
        }

        layers.push(LayerCache {
            resid_in,
            ln1_xhat,
            ln1_rstd,
            ln1_out,
            q,
            k,
            v,
            attn,
            head_out,
            resid_mid,
            ln2_xhat,
            ln2_rstd,
            ln2_out,
            mlp_pre,
            mlp_act,
        });
    }

    let mut lnf_xhat = vec![T::zero(); s * d];
    let mut lnf_rstd = vec![T::zero(); s];
    let mut lnf_out = vec![T::zero(); s * d];
    layer_norm(&h, params.get(TensorId::LnF), d, &mut lnf_xhat, &mut lnf_rstd, &mut lnf_out);
    let mut logits = vec![T::zero(); s * vsz];
    gemm(s, d, vsz, &lnf_out, Transpose::No, params.get(TensorId::Unembed), Transpose::No, T::zero(), &mut logits);

    Ok(ActivationCache {
        seq_len: s,
        d_model: d,
        n_heads: nh,
        d_head: dh,
        vocab_size: vsz,
        layers,
        final_resid: h,
        lnf_xhat,
        lnf_rstd,
        lnf_out,
        logits,
        plain: plan.is_empty(),
    })
}
