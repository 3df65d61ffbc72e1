//! Reverse-mode gradients for the uninterventioned forward pass.

use crate::error::{Error, Result};
use crate::numerics::{gemm, Transpose};
use crate::tasks::TokenId;
use crate::Scalar;

use super::cache::ActivationCache;
use super::forward::gelu_grad;
use super::params::{Params, TensorId};

/// Sum of token cross-entropies at `positions` and its gradient w.r.t. the
/// logits (scaled by `weight`).
pub fn cross_entropy<T: Scalar>(
    cache: &ActivationCache<T>,
    positions: &[usize],
    targets: &[TokenId],
    weight: T,
) -> (T, Vec<T>) {
    let v = cache.vocab_size;
    let mut dlogits = vec![T::zero(); cache.seq_len * v];
    let mut loss = T::zero();
    for (&pos, &target) in positions.iter().zip(targets) {
        let logits = cache.logits_at(pos);
        let max = logits.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let mut total = T::zero();
        for &x in logits {
            total = total + (x - max).exp();
        }
        let log_z = max + total.ln();
        loss = loss + (log_z - logits[target as usize]);
        let g = &mut dlogits[pos * v..(pos + 1) * v];
        for (gi, &x) in g.iter_mut().zip(logits) {
            *gi = (x - log_z).exp() * weight;
        }
        g[target as usize] = g[target as usize] - weight;
    }
    (loss, dlogits)
}

fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    d: usize,
    dgain: &mut [T],
    dx: &mut [T],
) {
    let inv_d = T::lit(1.0 / d as f64);
    let mut dxhat = vec![T::zero(); d];
    for t in 0..rstd.len() {
        let dy_t = &dy[t * d..(t + 1) * d];
        let xh_t = &xhat[t * d..(t + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            dgain[j] = dgain[j] + dy_t[j] * xh_t[j];
            dxhat[j] = dy_t[j] * gain[j];
            mean_dxhat = mean_dxhat + dxhat[j];
            mean_dxhat_xhat = mean_dxhat_xhat + dxhat[j] * xh_t[j];
        }
        mean_dxhat = mean_dxhat * inv_d;
        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
        for j in 0..d {
            dx[t * d + j] = dx[t * d + j] + rstd[t] * (dxhat[j] - mean_dxhat - xh_t[j] * mean_dxhat_xhat);
        }
    }
}

/// Gradient of `Σ dlogits · logits` w.r.t. every parameter, in the flat
/// parameter layout.
pub fn backward<T: Scalar>(
    params: &Params<T>,
    cache: &ActivationCache<T>,
    tokens: &[TokenId],
    dlogits: &[T],
) -> Result<Vec<T>> {
    if !cache.plain {
        return Err(Error::InvalidArgument(
            "backward is only defined for runs without interventions".into(),
        ));
    }
    let c = &params.config;
    let (s, d, nh, dh, f, vsz) = (cache.seq_len, c.d_model, c.n_heads, c.d_head, c.d_ff, c.vocab_size);
    let layout = params.layout();
    let mut grad = vec![T::zero(); layout.total()];

    // unembedding and final norm
    {
        let r = layout.range(TensorId::Unembed);
        gemm(d, s, vsz, &cache.lnf_out, Transpose::Yes, dlogits, Transpose::No, T::one(), &mut grad[r]);
    }
    let mut dlnf = vec![T::zero(); s * d];
    gemm(s, vsz, d, dlogits, Transpose::No, params.get(TensorId::Unembed), Transpose::Yes, T::zero(), &mut dlnf);
    let mut dh_buf = vec![T::zero(); s * d];
    {
        let r = layout.range(TensorId::LnF);
        layer_norm_backward(&dlnf, &cache.lnf_xhat, &cache.lnf_rstd, params.get(TensorId::LnF), d, &mut grad[r], &mut dh_buf);
    }

    let scale = T::one() / T::lit(dh as f64).sqrt();
    for l in (0..c.n_layers).rev() {
        let lc = &cache.layers[l];
        // MLP: h_out = resid_mid + W2·gelu(W1·ln2 + b1) + b2
        let dout = &dh_buf;
        {
            let r = layout.range(TensorId::W2(l));
            gemm(f, s, d, &lc.mlp_act, Transpose::Yes, dout, Transpose::No, T::one(), &mut grad[r]);
            let r = layout.range(TensorId::B2(l));
            let gb = &mut grad[r];
            for row in dout.chunks_exact(d) {
                for (g, &x) in gb.iter_mut().zip(row) {
                    *g = *g + x;
                }
            }
        }
        let mut dact = vec![T::zero(); s * f];
        gemm(s, d, f, dout, Transpose::No, params.get(TensorId::W2(l)), Transpose::Yes, T::zero(), &mut dact);
        for (g, &pre) in dact.iter_mut().zip(&lc.mlp_pre) {
            *g = *g * gelu_grad(pre);
        }
        {
            let r = layout.range(TensorId::W1(l));
            gemm(d, s, f, &lc.ln2_out, Transpose::Yes, &dact, Transpose::No, T::one(), &mut grad[r]);
            let r = layout.range(TensorId::B1(l));
            let gb = &mut grad[r];
            for row in dact.chunks_exact(f) {
                for (g, &x) in gb.iter_mut().zip(row) {
                    *g = *g + x;
                }
            }
        }
        let mut dln2 = vec![T::zero(); s * d];
        gemm(s, f, d, &dact, Transpose::No, params.get(TensorId::W1(l)), Transpose::Yes, T::zero(), &mut dln2);
        let mut dmid = dh_buf.clone();
        {
            let r = layout.range(TensorId::Ln2(l));
            layer_norm_backward(&dln2, &lc.ln2_xhat, &lc.ln2_rstd, params.get(TensorId::Ln2(l)), d, &mut grad[r], &mut dmid);
        }

        // attention: resid_mid = resid_in + head_out·Wo
        {
            let r = layout.range(TensorId::Wo(l));
            gemm(d, s, d, &lc.head_out, Transpose::Yes, &dmid, Transpose::No, T::one(), &mut grad[r]);
        }
        let mut dz = vec![T::zero(); s * d];
        gemm(s, d, d, &dmid, Transpose::No, params.get(TensorId::Wo(l)), Transpose::Yes, T::zero(), &mut dz);

        let mut dq = vec![T::zero(); s * d];
        let mut dk = vec![T::zero(); s * d];
        let mut dv = vec![T::zero(); s * d];
        let mut da = vec![T::zero(); s];
        for hd in 0..nh {
            let off = hd * dh;
            for r in 0..s {
                let a_row = &lc.attn[(hd * s + r) * s..(hd * s + r) * s + s];
                let dz_r = &dz[r * d + off..r * d + off + dh];
                let mut weighted = T::zero();
                for p in 0..=r {
                    let v_p = &lc.v[p * d + off..p * d + off + dh];
                    let mut acc = T::zero();
                    for i in 0..dh {
                        acc = acc + dz_r[i] * v_p[i];
                    }
                    da[p] = acc;
                    weighted = weighted + a_row[p] * acc;
                    let dv_p = &mut dv[p * d + off..p * d + off + dh];
                    for i in 0..dh {
                        dv_p[i] = dv_p[i] + a_row[p] * dz_r[i];
                    }
                }
                for p in 0..=r {
                    let ds = a_row[p] * (da[p] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for i in 0..dh {
                        dq[r * d + off + i] = dq[r * d + off + i] + ds * lc.k[p * d + off + i];
                        dk[p * d + off + i] = dk[p * d + off + i] + ds * lc.q[r * d + off + i];
                    }
                }
            }
        }
        for (id, dproj) in [(TensorId::Wq(l), &dq), (TensorId::Wk(l), &dk), (TensorId::Wv(l), &dv)] {
            let r = layout.range(id);
            gemm(d, s, d, &lc.ln1_out, Transpose::Yes, dproj, Transpose::No, T::one(), &mut grad[r]);
        }
        let mut dln1 = vec![T::zero(); s * d];
        gemm(s, d, d, &dq, Transpose::No, params.get(TensorId::Wq(l)), Transpose::Yes, T::one(), &mut dln1);
        gemm(s, d, d, &dk, Transpose::No, params.get(TensorId::Wk(l)), Transpose::Yes, T::one(), &mut dln1);
        gemm(s, d, d, &dv, Transpose::No, params.get(TensorId::Wv(l)), Transpose::Yes, T::one(), &mut dln1);
        let mut din = dmid;
        {
            let r = layout.range(TensorId::Ln1(l));
            layer_norm_backward(&dln1, &lc.ln1_xhat, &lc.ln1_rstd, params.get(TensorId::Ln1(l)), d, &mut grad[r], &mut din);
        }
        dh_buf = din;
    }

    let te = layout.range(TensorId::TokEmb);
    let pe = layout.range(TensorId::PosEmb);
    for (t, &tok) in tokens.iter().enumerate() {
        let row = &dh_buf[t * d..(t + 1) * d];
        let base = te.start + tok as usize * d;
        for j in 0..d {
            grad[base + j] = grad[base + j] + row[j];
        }
        let base = pe.start + t * d;
        for j in 0..d {
            grad[base + j] = grad[base + j] + row[j];
        }
    }
    Ok(grad)
}
