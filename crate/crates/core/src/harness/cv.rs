//! Block-wise cross-validation and fold ensembling.
//!
//! Folds are temporally contiguous groups of trial blocks, which keeps
//! adjacent (correlated) trials out of opposite sides of a split.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// A partition of block indices into `k` contiguous folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    folds: Vec<Vec<u32>>,
}

impl FoldSpec {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn fold_blocks(&self, fold: usize) -> &[u32] {
        &self.folds[fold]
    }

    pub fn fold_of(&self, block: u32) -> Option<usize> {
        self.folds.iter().position(|f| f.contains(&block))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<u32>> {
        self.folds.iter()
    }
}

/// Splits the distinct block indices, sorted ascending, into `k` contiguous
/// folds as equal as possible; earlier folds take the remainder.
pub fn blockwise_folds(blocks: &[u32], k: usize) -> Result<FoldSpec> {
    if k == 0 {
        return Err(Error::InvalidArgument("fold count must be positive".into()));
    }
    let mut distinct: Vec<u32> = blocks.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::TooFewBlocks {
            blocks: distinct.len(),
            folds: k,
        });
    }
    let base = distinct.len() / k;
    let remainder = distinct.len() % k;
    let mut folds = Vec::with_capacity(k);
    let mut cursor = 0;
    for i in 0..k {
        let size = base + usize::from(i < remainder);
        folds.push(distinct[cursor..cursor + size].to_vec());
        cursor += size;
    }
    Ok(FoldSpec { folds })
}

/// Per-trial modal class over the fold models' prediction vectors; ties break
/// toward the lowest class index.
pub fn majority_vote(predictions: &[Vec<usize>]) -> Result<Vec<usize>> {
    let first = predictions
        .first()
        .ok_or(Error::EmptyInput("majority_vote"))?;
    let n = first.len();
    for p in predictions {
        if p.len() != n {
            return Err(Error::LengthMismatch {
                op: "majority_vote",
                left: n,
                right: p.len(),
            });
        }
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut counts = std::collections::BTreeMap::new();
        for p in predictions {
            *counts.entry(p[i]).or_insert(0usize) += 1;
        }
        // BTreeMap iterates classes ascending, so strict > keeps the lowest.
        let mut best = (usize::MAX, 0usize);
        for (&class, &count) in &counts {
            if count > best.1 {
                best = (class, count);
            }
        }
        out.push(best.0);
    }
    Ok(out)
}
