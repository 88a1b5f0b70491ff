//! Scalar 3D volumes, the normalized physical coordinate frame, interpolated
//! sampling and intensity normalization.
//!
//! Voxel data is stored x-fastest: the linear index of `(i, j, k)` is
//! `i + nx * (j + ny * k)`.
//!
//! Every volume defines a grid-centered, physically isotropic frame. Along each
//! axis the continuous voxel index `u` maps to
//! `c = ((u + 0.5) * spacing - extent / 2) / max_half_extent`, where
//! `extent = dim * spacing` and `max_half_extent` is the largest of the three
//! half extents. The volume occupies a subset of `[-1, 1]^3` and a physical
//! point keeps its coordinates when the grid is resampled with the same extent.

use crate::error::{Error, Result};

/// Continuous voxel positions closer than this to an integer are snapped onto
/// the grid, so round trips through the normalized frame hit voxel centers.
pub(crate) const SNAP_TOLERANCE: f64 = 1e-9;

/// A coordinate in the normalized isotropic frame of a volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormCoord(pub [f64; 3]);

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f64>,
    header: Option<Vec<u8>>,
}

impl Volume {
    /// Builds a volume, rejecting inconsistent sizes, non-positive spacing and
    /// non-finite samples.
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        check_geometry(dims, spacing, data.len())?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite sample {} at index {pos}",
                data[pos]
            )));
        }
        Ok(Self {
            dims,
            spacing,
            data,
            header: None,
        })
    }

    /// Like [`Volume::new`] but replaces NaN and infinite samples with zero.
    /// Returns the volume and the number of replaced samples.
    pub fn new_sanitized(
        dims: [usize; 3],
        spacing: [f64; 3],
        mut data: Vec<f64>,
    ) -> Result<(Self, usize)> {
        check_geometry(dims, spacing, data.len())?;
        let mut replaced = 0;
        for v in data.iter_mut().filter(|v| !v.is_finite()) {
            *v = 0.0;
            replaced += 1;
        }
        Ok((
            Self {
                dims,
                spacing,
                data,
                header: None,
            },
            replaced,
        ))
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: f64) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing, vec![value; n])
    }

    /// A volume on the same grid (and header) as `self` with new samples.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        let mut out = Self::new(self.dims, self.spacing, data)?;
        out.header = self.header.clone();
        Ok(out)
    }

    pub fn with_header(mut self, header: Option<Vec<u8>>) -> Self {
        self.header = header;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn header(&self) -> Option<&[u8]> {
        self.header.as_deref()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    /// Physical extent per axis in millimeters.
    pub fn extent(&self) -> [f64; 3] {
        [
            self.dims[0] as f64 * self.spacing[0],
            self.dims[1] as f64 * self.spacing[1],
            self.dims[2] as f64 * self.spacing[2],
        ]
    }

    /// Millimeters per normalized unit.
    pub fn max_half_extent(&self) -> f64 {
        let e = self.extent();
        0.5 * e[0].max(e[1]).max(e[2])
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    /// Normalized coordinate of a continuous voxel position.
    pub fn voxel_to_norm(&self, u: [f64; 3]) -> NormCoord {
        let h = self.max_half_extent();
        let e = self.extent();
        let mut c = [0.0; 3];
        for a in 0..3 {
            c[a] = ((u[a] + 0.5) * self.spacing[a] - 0.5 * e[a]) / h;
        }
        NormCoord(c)
    }

    /// Continuous voxel position of a normalized coordinate (inverse of
    /// [`Volume::voxel_to_norm`]).
    pub fn norm_to_voxel(&self, c: NormCoord) -> [f64; 3] {
        let h = self.max_half_extent();
        let e = self.extent();
        let mut u = [0.0; 3];
        for a in 0..3 {
            u[a] = (c.0[a] * h + 0.5 * e[a]) / self.spacing[a] - 0.5;
        }
        u
    }

    /// Per-axis affine map `u = scale * c + offset` from normalized
    /// coordinates to continuous voxel positions.
    pub(crate) fn norm_to_voxel_affine(&self) -> ([f64; 3], [f64; 3]) {
        let h = self.max_half_extent();
        let e = self.extent();
        let mut scale = [0.0; 3];
        let mut offset = [0.0; 3];
        for a in 0..3 {
            scale[a] = h / self.spacing[a];
            offset[a] = 0.5 * e[a] / self.spacing[a] - 0.5;
        }
        (scale, offset)
    }

    /// Trilinear sample at a normalized coordinate. `valid` is true iff the
    /// position lies inside the interpolatable region `[0, n-1]` on every
    /// axis; invalid samples return zero.
    pub fn sample_trilinear(&self, c: NormCoord) -> (f64, bool) {
        let u = snap(self.norm_to_voxel(c));
        let inside = (0..3).all(|a| u[a] >= 0.0 && u[a] <= (self.dims[a] - 1) as f64);
        if !inside {
            return (0.0, false);
        }
        (self.interp_clamped(u).value, true)
    }

    /// Nearest-neighbour sample at a normalized coordinate, for label volumes.
    pub fn sample_nearest(&self, c: NormCoord) -> (f64, bool) {
        let u = snap(self.norm_to_voxel(c));
        match self.nearest_index(u) {
            Some(idx) => (self.data[idx], true),
            None => (0.0, false),
        }
    }

    #[inline]
    pub(crate) fn nearest_index(&self, u: [f64; 3]) -> Option<usize> {
        let mut ijk = [0usize; 3];
        for a in 0..3 {
            let r = (u[a] + 0.5).floor();
            if !(r >= 0.0 && r < self.dims[a] as f64) {
                return None;
            }
            ijk[a] = r as usize;
        }
        Some(self.index(ijk[0], ijk[1], ijk[2]))
    }

    /// Trilinear interpolation with edge clamping, plus the coverage weight
    /// (the trilinear interpolant of the grid's indicator function) and the
    /// gradients of both with respect to the voxel position.
    ///
    /// Derivatives at kinks (integer positions, coverage ramp ends) are the
    /// mean of the one-sided slopes, which is what a central difference sees.
    pub(crate) fn interp_clamped(&self, u: [f64; 3]) -> InterpSample {
        let taps = [
            AxisTaps::new(u[0], self.dims[0]),
            AxisTaps::new(u[1], self.dims[1]),
            AxisTaps::new(u[2], self.dims[2]),
        ];
        let weight = taps[0].cov * taps[1].cov * taps[2].cov;
        let weight_grad = [
            taps[0].dcov * taps[1].cov * taps[2].cov,
            taps[0].cov * taps[1].dcov * taps[2].cov,
            taps[0].cov * taps[1].cov * taps[2].dcov,
        ];
        if taps.iter().any(|t| t.outside) {
            return InterpSample {
                value: 0.0,
                grad: [0.0; 3],
                weight,
                weight_grad,
            };
        }
        let (nx, nxy) = (self.dims[0], self.dims[0] * self.dims[1]);
        let (tx, ty, tz) = (&taps[0], &taps[1], &taps[2]);
        let mut value = 0.0;
        let mut grad = [0.0; 3];
        for c in 0..tz.n {
            let zoff = tz.idx[c] * nxy;
            for b in 0..ty.n {
                let yzoff = zoff + ty.idx[b] * nx;
                let (vy, dy) = (ty.val[b], ty.der[b]);
                let (vz, dz) = (tz.val[c], tz.der[c]);
                for a in 0..tx.n {
                    let d = self.data[yzoff + tx.idx[a]];
                    let (vx, dx) = (tx.val[a], tx.der[a]);
                    value += vx * vy * vz * d;
                    grad[0] += dx * vy * vz * d;
                    grad[1] += vx * dy * vz * d;
                    grad[2] += vx * vy * dz * d;
                }
            }
        }
        InterpSample {
            value,
            grad,
            weight,
            weight_grad,
        }
    }
}

fn check_geometry(dims: [usize; 3], spacing: [f64; 3], len: usize) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("dimensions must be positive, got {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::invalid(format!(
            "spacing must be finite and positive, got {spacing:?}"
        )));
    }
    let expected = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| Error::invalid("volume size overflows"))?;
    if expected != len {
        return Err(Error::invalid(format!(
            "data length {len} does not match dims {dims:?} ({expected})"
        )));
    }
    Ok(())
}

#[inline]
pub(crate) fn snap(mut u: [f64; 3]) -> [f64; 3] {
    for v in u.iter_mut() {
        let r = v.round();
        if (*v - r).abs() < SNAP_TOLERANCE {
            *v = r;
        }
    }
    u
}

/// Result of [`Volume::interp_clamped`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct InterpSample {
    pub value: f64,
    pub grad: [f64; 3],
    pub weight: f64,
    pub weight_grad: [f64; 3],
}

/// One-dimensional interpolation stencil along an axis.
struct AxisTaps {
    idx: [usize; 3],
    val: [f64; 3],
    der: [f64; 3],
    n: usize,
    cov: f64,
    dcov: f64,
    outside: bool,
}

impl AxisTaps {
    #[inline]
    fn new(u: f64, n: usize) -> Self {
        let last = (n - 1) as f64;
        let nf = n as f64;
        let outside = u < -1.0 || u > nf;
        let cov = (u + 1.0).min(nf - u).clamp(0.0, 1.0);
        let right = if u < -1.0 {
            0.0
        } else if u < 0.0 {
            1.0
        } else if u < last {
            0.0
        } else if u < nf {
            -1.0
        } else {
            0.0
        };
        let left = if u <= -1.0 {
            0.0
        } else if u <= 0.0 {
            1.0
        } else if u <= last {
            0.0
        } else if u <= nf {
            -1.0
        } else {
            0.0
        };
        let dcov = 0.5 * (left + right);
        if outside {
            return Self {
                idx: [0; 3],
                val: [0.0; 3],
                der: [0.0; 3],
                n: 0,
                cov,
                dcov,
                outside,
            };
        }
        let clamp = |i: i64| i.clamp(0, n as i64 - 1) as usize;
        let k = u.floor();
        let t = u - k;
        let k = k as i64;
        if t == 0.0 {
            Self {
                idx: [clamp(k - 1), clamp(k), clamp(k + 1)],
                val: [0.0, 1.0, 0.0],
                der: [-0.5, 0.0, 0.5],
                n: 3,
                cov,
                dcov,
                outside,
            }
        } else {
            Self {
                idx: [clamp(k), clamp(k + 1), 0],
                val: [1.0 - t, t, 0.0],
                der: [-1.0, 1.0, 0.0],
                n: 2,
                cov,
                dcov,
                outside,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizationMode {
    MinMax,
    Percentile,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationPolicy {
    pub mode: NormalizationMode,
    /// Lower percentile in `[0, 100]`, used in percentile mode.
    pub p_lo: f64,
    /// Upper percentile in `[0, 100]`, used in percentile mode.
    pub p_hi: f64,
}

impl NormalizationPolicy {
    pub fn minmax() -> Self {
        Self {
            mode: NormalizationMode::MinMax,
            p_lo: 0.0,
            p_hi: 100.0,
        }
    }

    pub fn percentile(p_lo: f64, p_hi: f64) -> Self {
        Self {
            mode: NormalizationMode::Percentile,
            p_lo,
            p_hi,
        }
    }
}

impl Default for NormalizationPolicy {
    fn default() -> Self {
        Self::percentile(0.5, 99.5)
    }
}

#[derive(Debug, Clone)]
pub struct Normalized {
    pub volume: Volume,
    pub lo: f64,
    pub hi: f64,
    /// Set when `hi <= lo`; the volume is then all zeros.
    pub degenerate: bool,
}

/// Clips intensities to `[lo, hi]` (per policy) and maps them linearly to `[0, 1]`.
pub fn normalize_intensity(vol: &Volume, policy: &NormalizationPolicy) -> Result<Normalized> {
    let (lo, hi) = match policy.mode {
        NormalizationMode::MinMax => {
            let lo = vol.data.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vol.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        }
        NormalizationMode::Percentile => {
            if !(0.0..=100.0).contains(&policy.p_lo)
                || !(0.0..=100.0).contains(&policy.p_hi)
                || policy.p_lo > policy.p_hi
            {
                return Err(Error::invalid(format!(
                    "percentiles must satisfy 0 <= p_lo <= p_hi <= 100, got {} and {}",
                    policy.p_lo, policy.p_hi
                )));
            }
            let mut sorted = vol.data.clone();
            sorted.sort_by(f64::total_cmp);
            (
                percentile_sorted(&sorted, policy.p_lo),
                percentile_sorted(&sorted, policy.p_hi),
            )
        }
    };
    if !(hi > lo) {
        log::warn!("degenerate intensity range [{lo}, {hi}]; normalized volume is all zeros");
        return Ok(Normalized {
            volume: vol.with_data(vec![0.0; vol.len()])?,
            lo,
            hi,
            degenerate: true,
        });
    }
    let inv = 1.0 / (hi - lo);
    let data = vol
        .data
        .iter()
        .map(|&v| ((v.clamp(lo, hi) - lo) * inv).clamp(0.0, 1.0))
        .collect();
    Ok(Normalized {
        volume: vol.with_data(data)?,
        lo,
        hi,
        degenerate: false,
    })
}

/// Percentile of sorted data with linear interpolation between order
/// statistics (position `p/100 * (n-1)`).
pub(crate) fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p / 100.0 * (n - 1) as f64;
    let i = (pos.floor() as usize).min(n - 2);
    let t = pos - i as f64;
    sorted[i] + t * (sorted[i + 1] - sorted[i])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3], spacing: [f64; 3]) -> Volume {
        let n = dims.iter().product();
        let data = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        Volume::new(dims, spacing, data).unwrap()
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(Volume::new([2, 2, 2], [1.0; 3], vec![0.0; 7]).is_err());
        assert!(Volume::new([2, 2, 2], [1.0, 0.0, 1.0], vec![0.0; 8]).is_err());
        assert!(Volume::new([0, 2, 2], [1.0; 3], vec![]).is_err());
        assert!(Volume::new([1, 1, 2], [1.0; 3], vec![0.0, f64::NAN]).is_err());
        let (v, n) = Volume::new_sanitized([1, 1, 2], [1.0; 3], vec![f64::INFINITY, 2.0]).unwrap();
        assert_eq!(n, 1);
        assert_eq!(v.data(), &[0.0, 2.0]);
    }

    #[test]
    fn norm_coords_roundtrip_and_center() {
        let v = ramp([5, 7, 3], [2.8, 2.8, 3.8]);
        let c = v.voxel_to_norm([2.0, 3.0, 1.0]);
        assert!(c.0.iter().all(|x| x.abs() < 1e-12));
        let u = v.norm_to_voxel(v.voxel_to_norm([1.25, 4.5, 0.1]));
        assert!((u[0] - 1.25).abs() < 1e-12 && (u[1] - 4.5).abs() < 1e-12 && (u[2] - 0.1).abs() < 1e-12);
        // largest axis spans exactly [-1, 1]
        let lo = v.voxel_to_norm([-0.5, -0.5, -0.5]);
        let hi = v.voxel_to_norm([4.5, 6.5, 2.5]);
        assert!((lo.0[1] + 1.0).abs() < 1e-12 && (hi.0[1] - 1.0).abs() < 1e-12);
        assert!(lo.0[0] > -1.0 && lo.0[2] > -1.0);
    }

    #[test]
    fn trilinear_exact_at_voxel_centers() {
        let v = ramp([4, 5, 6], [1.0, 2.0, 0.5]);
        for k in 0..6 {
            for j in 0..5 {
                for i in 0..4 {
                    let c = v.voxel_to_norm([i as f64, j as f64, k as f64]);
                    let (s, ok) = v.sample_trilinear(c);
                    assert!(ok);
                    assert_eq!(s, v.get(i, j, k));
                }
            }
        }
    }

    #[test]
    fn trilinear_midpoint_and_outside() {
        let mut data = vec![0.0; 8];
        data[0] = 2.0;
        data[1] = 4.0;
        // constant along y and z
        data[2] = 2.0;
        data[3] = 4.0;
        data[4] = 2.0;
        data[5] = 4.0;
        data[6] = 2.0;
        data[7] = 4.0;
        let v = Volume::new([2, 2, 2], [1.0; 3], data).unwrap();
        let (s, ok) = v.sample_trilinear(v.voxel_to_norm([0.5, 0.0, 0.0]));
        assert!(ok);
        assert!((s - 3.0).abs() < 1e-12);
        assert_eq!(v.sample_trilinear(NormCoord([5.0, 0.0, 0.0])), (0.0, false));
        assert_eq!(v.sample_trilinear(NormCoord([-3.0, -3.0, 9.0])), (0.0, false));
    }

    #[test]
    fn nearest_sampling() {
        let v = ramp([4, 4, 4], [1.0; 3]);
        let (s, ok) = v.sample_nearest(v.voxel_to_norm([2.0, 1.0, 3.0]));
        assert!(ok && s == v.get(2, 1, 3));
        let (s, _) = v.sample_nearest(v.voxel_to_norm([1.4, 1.0, 1.0]));
        assert_eq!(s, v.get(1, 1, 1));
        let (s, _) = v.sample_nearest(v.voxel_to_norm([1.6, 1.0, 1.0]));
        assert_eq!(s, v.get(2, 1, 1));
        assert_eq!(v.sample_nearest(NormCoord([2.0, 0.0, 0.0])), (0.0, false));
    }

    #[test]
    fn interp_gradient_matches_differences_off_grid() {
        let v = ramp([6, 6, 6], [1.0; 3]);
        let u = [2.3, 1.7, 3.1];
        let s = v.interp_clamped(u);
        for a in 0..3 {
            let h = 1e-6;
            let mut up = u;
            let mut dn = u;
            up[a] += h;
            dn[a] -= h;
            let fd = (v.interp_clamped(up).value - v.interp_clamped(dn).value) / (2.0 * h);
            assert!((fd - s.grad[a]).abs() < 1e-8, "axis {a}: {fd} vs {}", s.grad[a]);
        }
    }

    #[test]
    fn interp_derivative_at_kinks_is_central() {
        let v = ramp([6, 6, 6], [1.0; 3]);
        for u in [[2.0, 1.5, 3.5], [0.0, 2.5, 2.5], [5.0, 2.5, 2.5], [-1.0, 2.5, 2.5], [-0.5, 2.5, 2.5]] {
            let s = v.interp_clamped(u);
            let h = 1e-3;
            let f = |x: [f64; 3]| {
                let s = v.interp_clamped(x);
                (s.value, s.weight)
            };
            let mut up = u;
            let mut dn = u;
            up[0] += h;
            dn[0] -= h;
            let fd_v = (f(up).0 - f(dn).0) / (2.0 * h);
            let fd_w = (f(up).1 - f(dn).1) / (2.0 * h);
            assert!((fd_w - s.weight_grad[0]).abs() < 1e-9, "{u:?}");
            // the clamped value is only meaningful where coverage is positive
            if s.weight > 0.0 {
                assert!((fd_v - s.grad[0]).abs() < 1e-9, "{u:?}: {fd_v} vs {}", s.grad[0]);
            }
        }
    }

    #[test]
    fn coverage_profile() {
        let v = ramp([4, 4, 4], [1.0; 3]);
        let w = |x: f64| v.interp_clamped([x, 1.0, 1.0]).weight;
        assert_eq!(w(-1.5), 0.0);
        assert!((w(-0.25) - 0.75).abs() < 1e-15);
        assert_eq!(w(0.0), 1.0);
        assert_eq!(w(3.0), 1.0);
        assert!((w(3.5) - 0.5).abs() < 1e-15);
        assert_eq!(w(4.0), 0.0);
    }

    #[test]
    fn normalize_minmax_and_degenerate() {
        let v = Volume::new([3, 1, 1], [1.0; 3], vec![-1000.0, 0.0, 1000.0]).unwrap();
        let n = normalize_intensity(&v, &NormalizationPolicy::minmax()).unwrap();
        assert_eq!(n.volume.data(), &[0.0, 0.5, 1.0]);
        let unit = Volume::new([3, 1, 1], [1.0; 3], vec![0.0, 0.25, 1.0]).unwrap();
        let n = normalize_intensity(&unit, &NormalizationPolicy::minmax()).unwrap();
        assert_eq!(n.volume.data(), unit.data());
        let flat = Volume::filled([2, 2, 2], [1.0; 3], 7.0).unwrap();
        let n = normalize_intensity(&flat, &NormalizationPolicy::default()).unwrap();
        assert!(n.degenerate);
        assert!(n.volume.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalize_percentile_clips_outliers() {
        // 1000 interior samples plus 1% outliers on each side
        let mut data: Vec<f64> = (0..1000).map(|i| i as f64 / 999.0).collect();
        data.extend((0..10).map(|i| 1e6 + i as f64));
        data.extend((0..10).map(|i| -1e6 - i as f64));
        let n = data.len();
        let v = Volume::new([n, 1, 1], [1.0; 3], data.clone()).unwrap();
        let out = normalize_intensity(&v, &NormalizationPolicy::percentile(0.5, 99.5)).unwrap();
        // oracle: direct percentile on the sorted array
        let mut sorted = data.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pos = |p: f64| p / 100.0 * (n - 1) as f64;
        let at = |p: f64| {
            let x = pos(p);
            let i = x.floor() as usize;
            sorted[i] + (x - i as f64) * (sorted[i + 1] - sorted[i])
        };
        let (lo, hi) = (at(0.5), at(99.5));
        assert_eq!(out.lo, lo);
        assert_eq!(out.hi, hi);
        for (x, y) in data.iter().zip(out.volume.data()) {
            if *x <= lo {
                assert_eq!(*y, 0.0);
            } else if *x >= hi {
                assert_eq!(*y, 1.0);
            } else {
                assert!((y - (x - lo) / (hi - lo)).abs() < 1e-12);
            }
        }
        assert!(out.volume.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}
