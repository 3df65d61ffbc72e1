//! Intervention plans executed inside a single forward pass.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

use super::cache::ActivationCache;
use super::config::ModelConfig;

/// Allowed (query, key) pairs, composed with the causal mask by logical AND.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeMask {
    len: usize,
    allowed: Vec<bool>,
}

impl EdgeMask {
    pub fn all_allowed(len: usize) -> Self {
        Self {
            len,
            allowed: vec![true; len * len],
        }
    }

    pub fn causal(len: usize) -> Self {
        let mut m = Self::all_allowed(len);
        for r in 0..len {
            for c in r + 1..len {
                m.set(r, c, false);
            }
        }
        m
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.len + col]
    }

    pub fn set(&mut self, row: usize, col: usize, allowed: bool) {
        self.allowed[row * self.len + col] = allowed;
    }

    pub fn and(&self, other: &EdgeMask) -> Result<EdgeMask> {
        if self.len != other.len {
            return Err(Error::Plan(format!(
                "cannot compose masks of size {} and {}",
                self.len, other.len
            )));
        }
        Ok(EdgeMask {
            len: self.len,
            allowed: self.allowed.iter().zip(&other.allowed).map(|(a, b)| *a && *b).collect(),
        })
    }

    /// Keys visible from `row` once causality is applied.
    pub fn allowed_keys(&self, row: usize) -> Vec<usize> {
        (0..=row).filter(|&c| self.get(row, c)).collect()
    }

    /// Run-length encoding per row: alternating run lengths starting with a
    /// run of `false`.
    pub fn to_rle(&self) -> Vec<Vec<usize>> {
        (0..self.len)
            .map(|r| {
                let mut runs = Vec::new();
                let mut current = false;
                let mut count = 0;
                for c in 0..self.len {
                    if self.get(r, c) == current {
                        count += 1;
                    } else {
                        runs.push(count);
                        current = !current;
                        count = 1;
                    }
                }
                runs.push(count);
                runs
            })
            .collect()
    }

    pub fn from_rle(rows: &[Vec<usize>]) -> Result<Self> {
        let len = rows.len();
        let mut m = Self::all_allowed(len);
        for (r, runs) in rows.iter().enumerate() {
            let mut c = 0;
            let mut value = false;
            for &run in runs {
                for _ in 0..run {
                    if c >= len {
                        return Err(Error::Plan(format!("RLE row {r} overflows {len} columns")));
                    }
                    m.set(r, c, value);
                    c += 1;
                }
                value = !value;
            }
            if c != len {
                return Err(Error::Plan(format!("RLE row {r} covers {c} of {len} columns")));
            }
        }
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Channel {
    Q,
    K,
    V,
}

/// Replaces q at `rows`, or the k/v at `positions` as seen by query `rows`,
/// with values recorded in `source`.
#[derive(Clone, Debug)]
pub struct RowOverride<T: Scalar> {
    /// `None` means every layer.
    pub layers: Option<Vec<usize>>,
    pub channel: Channel,
    pub rows: Vec<usize>,
    /// Key positions for K/V; ignored for Q.
    pub positions: Vec<usize>,
    pub source: Arc<ActivationCache<T>>,
    pub label: String,
}

impl<T: Scalar> RowOverride<T> {
    pub fn applies_to_layer(&self, layer: usize) -> bool {
        self.layers.as_ref().map_or(true, |ls| ls.contains(&layer))
    }
}

/// Replaces one head's pre-projection output vector at one position.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOverride<T: Scalar> {
    pub layer: usize,
    pub head: usize,
    pub position: usize,
    pub value: Vec<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionSite {
    /// Residual stream entering the layer.
    #[default]
    LayerInput,
    /// Residual stream after the layer's attention block.
    PostAttention,
}

/// `h ← h + scale · vector` at one layer and position.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualAddition<T: Scalar> {
    pub layer: usize,
    pub position: usize,
    pub vector: Vec<T>,
    pub scale: T,
    pub site: InjectionSite,
}

#[derive(Clone, Debug)]
pub struct InterventionPlan<T: Scalar> {
    pub edge_mask: Option<EdgeMask>,
    pub row_overrides: Vec<RowOverride<T>>,
    pub head_overrides: Vec<HeadOverride<T>>,
    pub residual_additions: Vec<ResidualAddition<T>>,
}

impl<T: Scalar> Default for InterventionPlan<T> {
    fn default() -> Self {
        Self::empty()
    }
}

impl<T: Scalar> InterventionPlan<T> {
    pub fn empty() -> Self {
        Self {
            edge_mask: None,
            row_overrides: Vec::new(),
            head_overrides: Vec::new(),
            residual_additions: Vec::new(),
        }
    }

    pub fn with_mask(mask: EdgeMask) -> Self {
        Self {
            edge_mask: Some(mask),
            ..Self::empty()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.edge_mask.is_none()
            && self.row_overrides.is_empty()
            && self.head_overrides.is_empty()
            && self.residual_additions.is_empty()
    }

    /// Union of two plans: masks are AND-ed, override lists concatenated.
    pub fn compose(mut self, other: InterventionPlan<T>) -> Result<Self> {
        self.edge_mask = match (self.edge_mask.take(), other.edge_mask) {
            (Some(a), Some(b)) => Some(a.and(&b)?),
            (a, b) => a.or(b),
        };
        self.row_overrides.extend(other.row_overrides);
        self.head_overrides.extend(other.head_overrides);
        self.residual_additions.extend(other.residual_additions);
        Ok(self)
    }

    pub fn validate(&self, config: &ModelConfig, seq_len: usize) -> Result<()> {
        let oob = |what: &str, v: usize, bound: usize| {
            Err(Error::Plan(format!("{what} {v} out of range (< {bound} required)")))
        };
        if let Some(mask) = &self.edge_mask {
            if mask.len() != seq_len {
                return Err(Error::Plan(format!(
                    "edge mask is {}x{} but the sequence has {seq_len} tokens",
                    mask.len(),
                    mask.len()
                )));
            }
            for r in 0..seq_len {
                if mask.allowed_keys(r).is_empty() {
                    return Err(Error::Plan(format!("query row {r} has empty key support")));
                }
            }
        }
        for o in &self.row_overrides {
            if o.source.seq_len != seq_len || o.source.d_model != config.d_model || o.source.layers.len() != config.n_layers {
                return Err(Error::Plan(format!(
                    "override source `{}` is not shape-compatible with the target run",
                    o.label
                )));
            }
            for &r in &o.rows {
                if r >= seq_len {
                    return oob("override row", r, seq_len);
                }
            }
            for &p in &o.positions {
                if p >= seq_len {
                    return oob("override position", p, seq_len);
                }
            }
            for &l in o.layers.iter().flatten() {
                if l >= config.n_layers {
                    return oob("override layer", l, config.n_layers);
                }
            }
        }
        for h in &self.head_overrides {
            if h.layer >= config.n_layers {
                return oob("head override layer", h.layer, config.n_layers);
            }
            if h.head >= config.n_heads {
                return oob("head index", h.head, config.n_heads);
            }
            if h.position >= seq_len {
                return oob("head override position", h.position, seq_len);
            }
            if h.value.len() != config.d_head {
                return Err(Error::Plan("head override value must have d_head entries".into()));
            }
        }
        for a in &self.residual_additions {
            if a.layer >= config.n_layers {
                return oob("injection layer", a.layer, config.n_layers);
            }
            if a.position >= seq_len {
                return oob("injection position", a.position, seq_len);
            }
            if a.vector.len() != config.d_model {
                return Err(Error::Plan("injected vector must have d_model entries".into()));
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> PlanManifest {
        PlanManifest {
            edge_mask_rle: self.edge_mask.as_ref().map(EdgeMask::to_rle),
            row_overrides: self
                .row_overrides
                .iter()
                .map(|o| RowOverrideManifest {
                    layers: o.layers.clone(),
                    channel: o.channel,
                    rows: o.rows.clone(),
                    positions: o.positions.clone(),
                    source: o.label.clone(),
                })
                .collect(),
            head_overrides: self
                .head_overrides
                .iter()
                .map(|h| (h.layer, h.head, h.position))
                .collect(),
            residual_additions: self
                .residual_additions
                .iter()
                .map(|a| ResidualAdditionManifest {
                    layer: a.layer,
                    position: a.position,
                    scale: a.scale.as_f64(),
                    site: a.site,
                    vector: a.vector.iter().map(|x| x.as_f64()).collect(),
                })
                .collect(),
        }
    }
}

/// JSON-serialisable description of a plan. Source caches are referenced by
/// label rather than embedded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanManifest {
    pub edge_mask_rle: Option<Vec<Vec<usize>>>,
    pub row_overrides: Vec<RowOverrideManifest>,
    pub head_overrides: Vec<(usize, usize, usize)>,
    pub residual_additions: Vec<ResidualAdditionManifest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowOverrideManifest {
    pub layers: Option<Vec<usize>>,
    pub channel: Channel,
    pub rows: Vec<usize>,
    pub positions: Vec<usize>,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualAdditionManifest {
    pub layer: usize,
    pub position: usize,
    pub scale: f64,
    pub site: InjectionSite,
    pub vector: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn rle_round_trips(bits in proptest::collection::vec(proptest::bool::ANY, 1..64)) {
            let len = (bits.len() as f64).sqrt().floor() as usize;
            prop_assume!(len > 0);
            let mut m = EdgeMask::all_allowed(len);
            for r in 0..len {
                for c in 0..len {
                    m.set(r, c, bits[r * len + c]);
                }
            }
            prop_assert_eq!(EdgeMask::from_rle(&m.to_rle()).unwrap(), m);
        }
    }

    #[test]
    fn causal_rle_is_readable() {
        let m = EdgeMask::causal(3);
        assert_eq!(m.to_rle(), vec![vec![0, 1, 2], vec![0, 2, 1], vec![0, 3]]);
    }
}
