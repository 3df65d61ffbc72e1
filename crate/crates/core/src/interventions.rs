//! Builders that turn experiment-level interventions into validated plans.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Channel, EdgeMask, InterventionPlan, RowOverride, RunResult};
use crate::scalar::Scalar;
use crate::tasks::{ExampleFlag, Prompt};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextualizationMode {
    Contextualized,
    Uncontextualized,
}

impl ContextualizationMode {
    pub fn label(self) -> &'static str {
        match self {
            Self::Contextualized => "ctx",
            Self::Uncontextualized => "unc",
        }
    }
}

/// Nonempty subset of {Q, K, V}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchChannelSet(BTreeSet<Channel>);

impl PatchChannelSet {
    pub fn new(channels: &[Channel]) -> Result<Self> {
        let set: BTreeSet<Channel> = channels.iter().copied().collect();
        if set.is_empty() {
            return Err(Error::InvalidArgument("patch channel set must be nonempty".into()));
        }
        Ok(Self(set))
    }

    pub fn all() -> Self {
        Self([Channel::Q, Channel::K, Channel::V].into_iter().collect())
    }

    pub fn contains(&self, c: Channel) -> bool {
        self.0.contains(&c)
    }

    pub fn iter(&self) -> impl Iterator<Item = Channel> + '_ {
        self.0.iter().copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeySwapDirection {
    /// Keys at ambiguous examples are replaced by unambiguous donor keys.
    AmbiguousToUnambiguous,
    /// Keys at unambiguous examples are replaced by ambiguous donor keys.
    UnambiguousToAmbiguous,
}

/// Mask keeping within-component edges and every edge into `t_final`.
pub fn uncontextualized_mask(p: &Prompt) -> EdgeMask {
    let comp = p.component_of();
    let mut mask = EdgeMask::causal(p.len());
    for r in 0..p.len() {
        if r == p.t_final {
            continue;
        }
        for c in 0..=r {
            if comp[r] != comp[c] {
                mask.set(r, c, false);
            }
        }
    }
    mask
}

pub fn build_uncontextualized_plan<T: Scalar>(p: &Prompt) -> InterventionPlan<T> {
    InterventionPlan::with_mask(uncontextualized_mask(p))
}

/// Keys visible to `t_final` when only example `i` (0-indexed) is readable.
/// The query component includes `t_final` itself.
pub fn subfv_keys(p: &Prompt, i: usize) -> Vec<usize> {
    p.example_span(i)
        .positions()
        .chain(p.query_span().start..=p.t_final)
        .collect()
}

/// `t_final` reads only example `i` (0-indexed) and the query.
pub fn build_subfv_plan<T: Scalar>(p: &Prompt, i: usize, mode: ContextualizationMode) -> Result<InterventionPlan<T>> {
    if i >= p.n_shots() {
        return Err(Error::InvalidArgument(format!(
            "example index {i} out of range for {}-shot prompt",
            p.n_shots()
        )));
    }
    let mut mask = match mode {
        ContextualizationMode::Contextualized => EdgeMask::causal(p.len()),
        ContextualizationMode::Uncontextualized => uncontextualized_mask(p),
    };
    for c in 0..p.len() {
        mask.set(p.t_final, c, false);
    }
    for c in subfv_keys(p, i) {
        mask.set(p.t_final, c, true);
    }
    Ok(InterventionPlan::with_mask(mask))
}

fn check_layout<T: Scalar>(target: &Prompt, source: &RunResult<T>) -> Result<()> {
    if source.cache.seq_len != target.len() {
        return Err(Error::Plan(format!(
            "layout mismatch: source length {} vs target {}",
            source.cache.seq_len,
            target.len()
        )));
    }
    Ok(())
}

/// Q at `t_final`, and/or K/V at every position as seen by row `t_final`,
/// on all layers and heads.
pub fn build_qkv_patch_plan<T: Scalar>(
    target: &Prompt,
    source_run: &RunResult<T>,
    channels: &PatchChannelSet,
) -> Result<InterventionPlan<T>> {
    check_layout(target, source_run)?;
    let mut plan = InterventionPlan::empty();
    for channel in channels.iter() {
        let positions = match channel {
            Channel::Q => Vec::new(),
            Channel::K | Channel::V => (0..=target.t_final).collect(),
        };
        plan.row_overrides.push(RowOverride {
            layers: None,
            channel,
            rows: vec![target.t_final],
            positions,
            source: Arc::clone(&source_run.cache),
            label: format!("{channel:?}-patch"),
        });
    }
    Ok(plan)
}

/// Key swap on one example class, under the uncontextualized mask.
///
/// The donor must come from a key-pool corruption of `target`: at every
/// patched example the donor carries the opposite flag. A donor identical
/// to the target is accepted as a self-patch.
pub fn build_key_swap_plan<T: Scalar>(
    target: &Prompt,
    donor: &Prompt,
    donor_run: &RunResult<T>,
    direction: KeySwapDirection,
) -> Result<InterventionPlan<T>> {
    if !target.same_layout(donor) {
        return Err(Error::Plan("key swap donor layout differs from target".into()));
    }
    check_layout(target, donor_run)?;
    let (patched, wanted) = match direction {
        KeySwapDirection::AmbiguousToUnambiguous => (ExampleFlag::Ambiguous, ExampleFlag::Unambiguous),
        KeySwapDirection::UnambiguousToAmbiguous => (ExampleFlag::Unambiguous, ExampleFlag::Ambiguous),
    };
    let self_patch = donor.tokens == target.tokens;
    let mut positions = Vec::new();
    for i in 0..target.n_shots() {
        if target.example_flags[i] != patched {
            continue;
        }
        if !self_patch && donor.example_flags[i] != wanted {
            return Err(Error::Plan(format!(
                "key swap flag mismatch at example {}: donor is {:?}, expected {:?}",
                i + 1,
                donor.example_flags[i],
                wanted
            )));
        }
        positions.extend(target.example_span(i).positions());
    }
    let mut plan = build_uncontextualized_plan(target);
    plan.row_overrides.push(RowOverride {
        layers: None,
        channel: Channel::K,
        rows: vec![target.t_final],
        positions,
        source: Arc::clone(&donor_run.cache),
        label: format!("key-swap-{direction:?}"),
    });
    Ok(plan)
}
