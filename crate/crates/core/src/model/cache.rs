use crate::Scalar;

/// Activations of one layer for every position. Matrices are row-major
/// `seq_len × width`; per-head slices occupy column block `h·d_head..`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache<T: Scalar> {
    pub resid_in: Vec<T>,
    pub ln1_xhat: Vec<T>,
    pub ln1_rstd: Vec<T>,
    pub ln1_out: Vec<T>,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// `n_heads × seq_len × seq_len`; masked and acausal entries are 0.
    pub attn: Vec<T>,
    /// Concatenated per-head outputs before the output projection.
    pub head_out: Vec<T>,
    pub resid_mid: Vec<T>,
    pub ln2_xhat: Vec<T>,
    pub ln2_rstd: Vec<T>,
    pub ln2_out: Vec<T>,
    pub mlp_pre: Vec<T>,
    pub mlp_act: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCache<T: Scalar> {
    pub seq_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub layers: Vec<LayerCache<T>>,
    pub final_resid: Vec<T>,
    pub lnf_xhat: Vec<T>,
    pub lnf_rstd: Vec<T>,
    pub lnf_out: Vec<T>,
    /// `seq_len × vocab_size`
    pub logits: Vec<T>,
    /// True when produced without any intervention (backward is valid).
    pub plain: bool,
}

impl<T: Scalar> ActivationCache<T> {
    fn head_slice<'a>(&self, buf: &'a [T], head: usize, pos: usize) -> &'a [T] {
        let start = pos * self.d_model + head * self.d_head;
        &buf[start..start + self.d_head]
    }

    pub fn q(&self, layer: usize, head: usize, pos: usize) -> &[T] {
        self.head_slice(&self.layers[layer].q, head, pos)
    }

    pub fn k(&self, layer: usize, head: usize, pos: usize) -> &[T] {
        self.head_slice(&self.layers[layer].k, head, pos)
    }

    pub fn v(&self, layer: usize, head: usize, pos: usize) -> &[T] {
        self.head_slice(&self.layers[layer].v, head, pos)
    }

    pub fn head_output(&self, layer: usize, head: usize, pos: usize) -> &[T] {
        self.head_slice(&self.layers[layer].head_out, head, pos)
    }

    /// Attention weights of query `row` over all key positions.
    pub fn attn_row(&self, layer: usize, head: usize, row: usize) -> &[T] {
        let s = self.seq_len;
        let start = (head * s + row) * s;
        &self.layers[layer].attn[start..start + s]
    }

    pub fn logits_at(&self, pos: usize) -> &[T] {
        &self.logits[pos * self.vocab_size..(pos + 1) * self.vocab_size]
    }

    pub fn resid_in(&self, layer: usize, pos: usize) -> &[T] {
        &self.layers[layer].resid_in[pos * self.d_model..(pos + 1) * self.d_model]
    }
}
