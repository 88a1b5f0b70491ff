//! Intensity similarity metrics for multi-modal registration.
//!
//! The correlation ratio `eta(Y|X) = Var[E(Y|X)] / Var(Y)` is made
//! differentiable by estimating the conditional expectation with Gaussian
//! Parzen windows over intensity bins of `X`:
//!
//! ```text
//! g_ik      = exp(-(x_i - bin_k)^2 / 2h^2)
//! w_ik      = g_ik / sum_k g_ik
//! ybar_k    = sum_i w_ik y_i / sum_i w_ik
//! n_k       = sum_i w_ik / sum_i sum_k w_ik
//! var_cond  = sum_k n_k (ybar_k - ybar)^2
//! eta(Y|X)  = var_cond / Var(Y)
//! ```
//!
//! Each sample's weights sum to one over the bins, so the `ybar_k` average
//! back to `ybar` and `eta` stays in `[0, 1]`.
//!
//! The registration loss is the symmetric `-(eta(Y|X) + eta(X|Y)) / 2`,
//! evaluated globally or averaged over non-overlapping patches. A Parzen
//! mutual information is provided for comparison, and the hard-binned
//! correlation ratio serves as an oracle.
//!
//! Every reduction runs over fixed-size chunks combined in index order, so
//! results do not depend on the number of worker threads.

mod cr;
mod mi;
mod objective;
pub(crate) mod parzen;
mod patch;

pub use cr::{correlation_ratio, cr_loss_symmetric, discrete_cr_oracle};
pub use mi::mutual_information;
pub use objective::{loss_and_gradient, Evaluation, Objective, MIN_VALID_FRACTION};
pub use patch::cr_loss_patch;

use crate::error::{Error, Result};

/// Minimum bin mass (sum of window weights) for a bin to contribute.
pub const EMPTY_BIN_MASS: f64 = 1e-12;
/// Variance below which a target image counts as constant.
pub const MIN_VARIANCE: f64 = 1e-12;

/// Chunk length for deterministic partial reductions.
pub(crate) const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskPolicy {
    /// Every fixed voxel contributes; samples outside the moving grid read as zero.
    UseAll,
    /// Voxels are weighted by the warp validity weight.
    #[default]
    ValidOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParzenConfig {
    pub num_bins: usize,
    /// Kernel bandwidth as a multiple of the bin width `1 / num_bins`.
    pub bandwidth_ratio: f64,
    pub mask_policy: MaskPolicy,
}

impl Default for ParzenConfig {
    fn default() -> Self {
        Self {
            num_bins: 32,
            bandwidth_ratio: 0.5,
            mask_policy: MaskPolicy::ValidOnly,
        }
    }
}

impl ParzenConfig {
    pub fn new(num_bins: usize, bandwidth_ratio: f64) -> Result<Self> {
        let cfg = Self {
            num_bins,
            bandwidth_ratio,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_bins < 2 {
            return Err(Error::invalid(format!("need at least 2 bins, got {}", self.num_bins)));
        }
        if !(self.bandwidth_ratio > 0.0 && self.bandwidth_ratio.is_finite()) {
            return Err(Error::invalid(format!(
                "bandwidth ratio must be positive, got {}",
                self.bandwidth_ratio
            )));
        }
        Ok(())
    }

    /// Kernel bandwidth `h` on the `[0, 1]` intensity scale.
    pub fn bandwidth(&self) -> f64 {
        self.bandwidth_ratio / self.num_bins as f64
    }

    pub fn bin_center(&self, k: usize) -> f64 {
        (k as f64 + 0.5) / self.num_bins as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchConfig {
    /// Edge length of the cubic patches in voxels.
    pub patch_size: usize,
    /// Minimum fraction of valid voxels for a patch to count.
    pub min_valid: f64,
    /// Minimum number of voxels in a patch.
    pub min_voxels: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            min_valid: 0.5,
            min_voxels: 64,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 2 {
            return Err(Error::invalid("patch size must be at least 2"));
        }
        if !(self.min_valid > 0.0 && self.min_valid <= 1.0) {
            return Err(Error::invalid("min_valid must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    /// Contributing voxels (global metrics) or patches (patch metric).
    pub n_effective: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    CrGlobal,
    CrPatch,
    Mi,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::CrGlobal => "cr_global",
            Metric::CrPatch => "cr_patch",
            Metric::Mi => "mi",
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cr_global" => Ok(Metric::CrGlobal),
            "cr_patch" => Ok(Metric::CrPatch),
            "mi" => Ok(Metric::Mi),
            _ => Err(Error::invalid(format!("unknown metric '{s}'"))),
        }
    }
}

/// An ordered set of sample indices.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Span<'a> {
    All(usize),
    List(&'a [u32]),
}

impl Span<'_> {
    #[inline]
    pub fn len(&self) -> usize {
        match self {
            Span::All(n) => *n,
            Span::List(l) => l.len(),
        }
    }

    #[inline]
    pub fn at(&self, pos: usize) -> usize {
        match self {
            Span::All(_) => pos,
            Span::List(l) => l[pos] as usize,
        }
    }

    pub fn chunks(&self) -> usize {
        self.len().div_ceil(CHUNK)
    }

    pub fn chunk_range(&self, c: usize) -> std::ops::Range<usize> {
        c * CHUNK..((c + 1) * CHUNK).min(self.len())
    }
}

pub(crate) fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "sample arrays differ in length ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::invalid("need at least 2 samples"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("samples must be finite"));
    }
    Ok(())
}
