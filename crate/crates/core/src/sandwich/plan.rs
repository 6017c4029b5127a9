use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Supported sandwich widths: the replaced block alone, one unpruned
/// neighbour per side, or two per side.
pub const WIDTHS: [usize; 3] = [1, 3, 5];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandwichPlan {
    pub center: usize,
    pub n_blocks: usize,
    pub width: usize,
    /// Previously pruned blocks, ascending.
    pub replaced: Vec<usize>,
    /// Unpruned flanks before the center, nearest last.
    pub before: Vec<usize>,
    /// Unpruned flanks after the center, nearest first.
    pub after: Vec<usize>,
    /// First and last block of the training span.
    pub lo: usize,
    pub hi: usize,
    /// Pruned blocks inside the span, including the center.
    pub trainable_surrogates: Vec<usize>,
    pub missing_before: bool,
    pub missing_after: bool,
}

impl SandwichPlan {
    /// Nearest unpruned block before the center.
    pub fn u(&self) -> Option<usize> {
        self.before.last().copied()
    }

    /// Nearest unpruned block after the center.
    pub fn d(&self) -> Option<usize> {
        self.after.first().copied()
    }

    pub fn one_sided(&self) -> bool {
        self.missing_before || self.missing_after
    }

    /// Both direct neighbours are unpruned.
    pub fn non_overlap(&self) -> bool {
        self.center > 0 && self.u() == Some(self.center - 1) && self.d() == Some(self.center + 1)
    }

    /// Blocks that carry adapters, ascending.
    pub fn adapter_blocks(&self) -> Vec<usize> {
        self.before.iter().chain(&self.after).copied().collect()
    }
}

/// Three-block sandwich around `i` given the already pruned set.
pub fn plan_sandwich(i: usize, replaced: &[usize], n: usize) -> Result<SandwichPlan> {
    plan_sandwich_width(i, replaced, n, 3)
}

pub fn plan_sandwich_width(
    i: usize,
    replaced: &[usize],
    n: usize,
    width: usize,
) -> Result<SandwichPlan> {
    if !WIDTHS.contains(&width) {
        return Err(Error::Planning(format!(
            "width must be one of {WIDTHS:?}, got {width}"
        )));
    }
    if i >= n {
        return Err(Error::Planning(format!(
            "center {i} out of range (N = {n})"
        )));
    }
    let r: BTreeSet<usize> = replaced.iter().copied().collect();
    if r.contains(&i) {
        return Err(Error::Planning(format!("center {i} is already pruned")));
    }
    if let Some(&j) = r.iter().find(|&&j| j >= n) {
        return Err(Error::Planning(format!(
            "pruned index {j} out of range (N = {n})"
        )));
    }
    let per_side = (width - 1) / 2;
    let mut before: Vec<usize> = (0..i)
        .rev()
        .filter(|j| !r.contains(j))
        .take(per_side)
        .collect();
    before.reverse();
    let after: Vec<usize> = (i + 1..n)
        .filter(|j| !r.contains(j))
        .take(per_side)
        .collect();
    let missing_before = per_side > 0 && before.is_empty();
    let missing_after = per_side > 0 && after.is_empty();
    if missing_before && missing_after {
        return Err(Error::Planning(format!(
            "no unpruned block on either side of {i}"
        )));
    }
    let (lo, hi) = if per_side == 0 {
        (i, i)
    } else {
        (
            before.first().copied().unwrap_or(0),
            after.last().copied().unwrap_or(n - 1),
        )
    };
    let trainable_surrogates = (lo..=hi).filter(|j| *j == i || r.contains(j)).collect();
    Ok(SandwichPlan {
        center: i,
        n_blocks: n,
        width,
        replaced: r.into_iter().collect(),
        before,
        after,
        lo,
        hi,
        trainable_surrogates,
        missing_before,
        missing_after,
    })
}
