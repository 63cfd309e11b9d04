//! Channel independence.
//!
//! For a layer's activation matrix `A` (`c × hw`), the CI of channel `i` is
//! `‖A‖_* − ‖A with row i zeroed‖_*`. Zeroing a row and deleting it leave
//! the same non-zero singular values, so masked norms are always computed on
//! the row-deleted submatrix. For wide matrices that submatrix is further
//! reduced to `c × c` through a QR factor computed once per matrix (see
//! [`CiContext`]).
//!
//! By singular value interlacing, deleting rows never increases any singular
//! value, so every CI is non-negative up to rounding. Values below zero but
//! within `1e-9·‖A‖_*` are clamped; anything more negative is reported as a
//! numerical failure.

use itertools::Itertools;
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor_io::ActivationMatrix;

/// Relative tolerance (to `‖A‖_*`) below which a negative CI is rounding noise.
pub const NEGATIVE_CI_TOLERANCE: f64 = 1e-9;

/// Default rank threshold, relative to `σ_max(A)`.
pub const DEFAULT_RANK_TOL: f64 = 1e-6;

/// Brute-force subsets whose exact CI differs by less than this (relative to
/// `‖A‖_*`) are treated as tied, and the lexicographically smaller one wins.
pub const TIE_TOLERANCE: f64 = 1e-10;

/// Rows to zero out of a `size`-row matrix. Never covers every row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowMask {
    size: usize,
    zeroed: Vec<usize>,
}

impl RowMask {
    pub fn new(size: usize, rows: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut zeroed: Vec<usize> = rows.into_iter().collect();
        zeroed.sort_unstable();
        if let Some(&bad) = zeroed.iter().find(|&&r| r >= size) {
            return Err(Error::InvalidMask(format!(
                "row {bad} out of range for {size} rows"
            )));
        }
        if zeroed.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidMask(format!("duplicate rows in {zeroed:?}")));
        }
        if zeroed.len() >= size {
            return Err(Error::InvalidMask(format!(
                "mask would zero all {size} rows"
            )));
        }
        Ok(Self { size, zeroed })
    }

    pub fn empty(size: usize) -> Self {
        Self {
            size,
            zeroed: Vec::new(),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Sorted indices of masked rows.
    pub fn zeroed_rows(&self) -> &[usize] {
        &self.zeroed
    }

    /// Sorted indices of rows that survive the mask.
    pub fn kept_rows(&self) -> Vec<usize> {
        let mut z = self.zeroed.iter().peekable();
        (0..self.size)
            .filter(|r| {
                if z.peek() == Some(&r) {
                    z.next();
                    false
                } else {
                    true
                }
            })
            .collect()
    }
}

/// CI of one channel.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CiValue {
    pub channel: usize,
    pub value: f64,
}

/// Nuclear norm (sum of singular values).
pub fn nuclear_norm(m: &ActivationMatrix) -> Result<f64> {
    let factor = linalg::row_factor(m.as_matrix());
    linalg::nuclear_norm_of(&factor, m.layer_id())
}

/// Per-matrix state for repeated CI queries: the row factor, `‖A‖_*` and `σ_max`.
#[derive(Debug, Clone)]
pub struct CiContext {
    layer_id: String,
    factor: DMatrix<f64>,
    full_norm: f64,
    sigma_max: f64,
}

impl CiContext {
    pub fn new(m: &ActivationMatrix) -> Result<Self> {
        let factor = linalg::row_factor(m.as_matrix());
        let sv = linalg::singular_values(&factor, m.layer_id())?;
        Ok(Self {
            layer_id: m.layer_id().to_string(),
            full_norm: sv.iter().sum(),
            sigma_max: sv.iter().copied().fold(0.0, f64::max),
            factor,
        })
    }

    pub fn rows(&self) -> usize {
        self.factor.nrows()
    }

    pub fn full_norm(&self) -> f64 {
        self.full_norm
    }

    /// Absolute rounding allowance `1e-9·‖A‖_*`.
    pub fn epsilon(&self) -> f64 {
        NEGATIVE_CI_TOLERANCE * self.full_norm
    }

    fn check_mask(&self, mask: &RowMask) -> Result<()> {
        if mask.size() != self.rows() {
            return Err(Error::InvalidMask(format!(
                "mask over {} rows applied to a {}-row matrix",
                mask.size(),
                self.rows()
            )));
        }
        Ok(())
    }

    fn singular_values_of_rows(&self, rows: &[usize]) -> Result<Vec<f64>> {
        linalg::singular_values(&linalg::select_rows(&self.factor, rows), &self.layer_id)
    }

    /// `‖M ⊙ A‖_*`.
    pub fn masked_norm(&self, mask: &RowMask) -> Result<f64> {
        self.check_mask(mask)?;
        if mask.zeroed_rows().is_empty() {
            return Ok(self.full_norm);
        }
        Ok(self
            .singular_values_of_rows(&mask.kept_rows())?
            .iter()
            .sum())
    }

    /// `‖A‖_* − ‖M ⊙ A‖_*`, clamped at zero within [`Self::epsilon`].
    pub fn combined(&self, mask: &RowMask) -> Result<f64> {
        if mask.zeroed_rows().is_empty() {
            self.check_mask(mask)?;
            return Ok(0.0);
        }
        let diff = self.full_norm - self.masked_norm(mask)?;
        self.clamp(diff)
    }

    fn clamp(&self, value: f64) -> Result<f64> {
        if value >= 0.0 {
            Ok(value)
        } else if value >= -self.epsilon() {
            Ok(0.0)
        } else {
            Err(Error::NegativeCi {
                layer_id: self.layer_id.clone(),
                value,
                tolerance: self.epsilon(),
            })
        }
    }

    pub fn single(&self, channel: usize) -> Result<CiValue> {
        let rows = self.rows();
        if channel >= rows {
            return Err(Error::ChannelOutOfRange { channel, rows });
        }
        if rows < 2 {
            return Err(Error::InvalidInput(format!(
                "CI needs at least 2 channels, layer {} has {rows}",
                self.layer_id
            )));
        }
        let value = self.combined(&RowMask::new(rows, [channel])?)?;
        Ok(CiValue { channel, value })
    }

    /// CI of every channel, computed in parallel; order is by channel.
    pub fn all_single(&self) -> Result<Vec<CiValue>> {
        (0..self.rows())
            .into_par_iter()
            .map(|c| self.single(c))
            .collect()
    }

    /// Number of singular values above `rel_tol·σ_max(A)` among the given rows.
    fn rank_of_rows(&self, rows: &[usize], rel_tol: f64) -> Result<usize> {
        let threshold = rel_tol * self.sigma_max;
        Ok(self
            .singular_values_of_rows(rows)?
            .iter()
            .filter(|&&s| s > threshold)
            .count())
    }

    pub fn rank(&self, rel_tol: f64) -> Result<usize> {
        let all: Vec<usize> = (0..self.rows()).collect();
        self.rank_of_rows(&all, rel_tol)
    }

    pub fn rank_change(&self, channel: usize, rel_tol: f64) -> Result<usize> {
        let rows = self.rows();
        if channel >= rows {
            return Err(Error::ChannelOutOfRange { channel, rows });
        }
        if rel_tol.is_nan() || rel_tol <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "rank tolerance must be positive, got {rel_tol}"
            )));
        }
        let full = self.rank(rel_tol)?;
        let kept = RowMask::new(rows, [channel])?.kept_rows();
        let reduced = self.rank_of_rows(&kept, rel_tol)?;
        // Interlacing guarantees reduced <= full; saturate against threshold jitter.
        Ok(full.saturating_sub(reduced))
    }
}

/// CI of one channel (one removed row).
pub fn ci_single(m: &ActivationMatrix, channel: usize) -> Result<CiValue> {
    if channel >= m.rows() {
        return Err(Error::ChannelOutOfRange {
            channel,
            rows: m.rows(),
        });
    }
    CiContext::new(m)?.single(channel)
}

/// CI of every channel of `m`.
pub fn ci_all(m: &ActivationMatrix) -> Result<Vec<CiValue>> {
    CiContext::new(m)?.all_single()
}

/// Exact combined CI: nuclear-norm drop with all masked rows removed at once.
pub fn ci_combined_exact(m: &ActivationMatrix, mask: &RowMask) -> Result<f64> {
    CiContext::new(m)?.combined(mask)
}

/// Approximated combined CI: the sum of the listed channels' single CIs.
pub fn ci_combined_approx(scores: &[CiValue], channels: &[usize]) -> Result<f64> {
    channels
        .iter()
        .map(|&c| {
            scores
                .iter()
                .find(|s| s.channel == c)
                .map(|s| s.value)
                .ok_or_else(|| Error::InvalidInput(format!("no CI score for channel {c}")))
        })
        .sum()
}

/// `rank(A) − rank(A without row channel)`.
pub fn rank_change(m: &ActivationMatrix, channel: usize, rel_tol: f64) -> Result<usize> {
    CiContext::new(m)?.rank_change(channel, rel_tol)
}

/// A set of channels chosen for removal and its exact combined CI.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetChoice {
    pub channels: Vec<usize>,
    pub value: f64,
}

/// Bounds on exhaustive search.
#[derive(Debug, Clone, Copy)]
pub struct BruteForceLimits {
    pub max_rows: usize,
    pub max_subsets: u128,
}

impl Default for BruteForceLimits {
    fn default() -> Self {
        Self {
            max_rows: 20,
            max_subsets: 1_000_000,
        }
    }
}

/// `C(n, k)`, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step.
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

fn check_prune_count(rows: usize, prune_count: usize) -> Result<()> {
    if prune_count >= rows {
        return Err(Error::InvalidMask(format!(
            "cannot remove {prune_count} of {rows} rows"
        )));
    }
    Ok(())
}

/// Exhaustive minimum of the exact combined CI over all `prune_count`-subsets.
/// Ties go to the lexicographically smallest subset.
pub fn brute_force_min_subset(
    m: &ActivationMatrix,
    prune_count: usize,
    limits: BruteForceLimits,
) -> Result<SubsetChoice> {
    let rows = m.rows();
    if rows > limits.max_rows {
        return Err(Error::CombinatorialGuard(format!(
            "layer {} has {rows} rows, above the limit of {}",
            m.layer_id(),
            limits.max_rows
        )));
    }
    let count = binomial(rows, prune_count);
    if count > limits.max_subsets {
        return Err(Error::CombinatorialGuard(format!(
            "C({rows}, {prune_count}) = {count} subsets exceeds the limit of {}",
            limits.max_subsets
        )));
    }
    check_prune_count(rows, prune_count)?;
    if prune_count == 0 {
        return Ok(SubsetChoice {
            channels: Vec::new(),
            value: 0.0,
        });
    }
    let ctx = CiContext::new(m)?;
    let subsets: Vec<Vec<usize>> = (0..rows).combinations(prune_count).collect();
    let values: Vec<f64> = subsets
        .par_iter()
        .map(|s| ctx.combined(&RowMask::new(rows, s.iter().copied())?))
        .collect::<Result<_>>()?;
    let tie = TIE_TOLERANCE * ctx.full_norm();
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] - tie {
            best = i;
        }
    }
    Ok(SubsetChoice {
        channels: subsets[best].clone(),
        value: values[best],
    })
}

/// The `prune_count` channels with the smallest single CI (lowest index on
/// ties), with their exact combined CI.
pub fn greedy_min_subset(m: &ActivationMatrix, prune_count: usize) -> Result<SubsetChoice> {
    check_prune_count(m.rows(), prune_count)?;
    if prune_count == 0 {
        return Ok(SubsetChoice {
            channels: Vec::new(),
            value: 0.0,
        });
    }
    let ctx = CiContext::new(m)?;
    let mut scores = ctx.all_single()?;
    scores.sort_by(|a, b| a.value.total_cmp(&b.value).then(a.channel.cmp(&b.channel)));
    let mut channels: Vec<usize> = scores[..prune_count].iter().map(|s| s.channel).collect();
    channels.sort_unstable();
    let value = ctx.combined(&RowMask::new(m.rows(), channels.iter().copied())?)?;
    Ok(SubsetChoice { channels, value })
}

/// Number of distinct values, treating neighbours (after sorting) closer
/// than `tol` as equal.
pub fn distinct_count(values: &[f64], tol: f64) -> usize {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    match sorted.first() {
        None => 0,
        Some(_) => 1 + sorted.windows(2).filter(|w| w[1] - w[0] > tol).count(),
    }
}
