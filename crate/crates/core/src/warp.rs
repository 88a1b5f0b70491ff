//! Resampling a moving volume onto a fixed grid through an affine map.

use rayon::prelude::*;

use crate::affine::{build_matrix, AffineMatrix, AffineParams};
use crate::error::Result;
use crate::volume::{snap, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    #[default]
    Trilinear,
    Nearest,
}

/// A warped volume and its per-voxel validity weight.
///
/// For trilinear interpolation the weight is the coverage of the sample by the
/// moving grid: 1 inside `[0, n-1]` on every axis, ramping linearly to 0 one
/// voxel beyond the grid. Sample values are zero-padded trilinear
/// interpolants. For nearest interpolation the weight is 0 or 1.
#[derive(Debug, Clone)]
pub struct Warped {
    pub image: Volume,
    pub weight: Vec<f64>,
}

impl Warped {
    pub fn validity(&self) -> Vec<bool> {
        self.weight.iter().map(|&w| w > 0.0).collect()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.weight.iter().sum::<f64>() / self.weight.len() as f64
    }
}

/// Affine map from fixed-grid voxel indices to continuous moving-grid voxel
/// positions, `u = A * i + b`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct VoxelMap {
    pub a: [[f64; 3]; 3],
    pub b: [f64; 3],
    /// d(moving voxel position) / d(moving normalized coordinate), per axis.
    pub moving_scale: [f64; 3],
}

impl VoxelMap {
    pub fn new(m: &AffineMatrix, moving: &Volume, fixed: &Volume) -> Self {
        let (sm, om) = moving.norm_to_voxel_affine();
        // fixed voxel -> fixed normalized: c = af * i + bf
        let hf = fixed.max_half_extent();
        let (ef, spf) = (fixed.extent(), fixed.spacing());
        let af: [f64; 3] = std::array::from_fn(|a| spf[a] / hf);
        let bf: [f64; 3] = std::array::from_fn(|a| (0.5 * spf[a] - 0.5 * ef[a]) / hf);
        let mut a = [[0.0; 3]; 3];
        let mut b = [0.0; 3];
        for r in 0..3 {
            let mut lin_b = m.get(r, 3);
            for c in 0..3 {
                a[r][c] = sm[r] * m.get(r, c) * af[c];
                lin_b += m.get(r, c) * bf[c];
            }
            b[r] = sm[r] * lin_b + om[r];
        }
        Self {
            a,
            b,
            moving_scale: sm,
        }
    }

    #[inline]
    pub fn apply(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let (x, y, z) = (i as f64, j as f64, k as f64);
        let u = std::array::from_fn(|r| self.a[r][0] * x + self.a[r][1] * y + self.a[r][2] * z + self.b[r]);
        snap(u)
    }
}

/// Warps `moving` onto the grid of `fixed` with the transform of `p`.
pub fn warp(moving: &Volume, fixed: &Volume, p: &AffineParams, interp: Interpolation) -> Result<Warped> {
    let m = build_matrix(p)?;
    warp_matrix(moving, fixed, &m, interp)
}

/// Warps `moving` onto the grid of `fixed`; `m` maps fixed normalized
/// coordinates to moving normalized coordinates.
pub fn warp_matrix(
    moving: &Volume,
    fixed: &Volume,
    m: &AffineMatrix,
    interp: Interpolation,
) -> Result<Warped> {
    let map = VoxelMap::new(m, moving, fixed);
    let [nx, ny, nz] = fixed.dims();
    let slices: Vec<(Vec<f64>, Vec<f64>)> = (0..nz)
        .into_par_iter()
        .map(|k| {
            let mut vals = Vec::with_capacity(nx * ny);
            let mut wts = Vec::with_capacity(nx * ny);
            for j in 0..ny {
                for i in 0..nx {
                    let u = map.apply(i, j, k);
                    match interp {
                        Interpolation::Trilinear => {
                            let s = moving.interp_clamped(u);
                            vals.push(s.weight * s.value);
                            wts.push(s.weight);
                        }
                        Interpolation::Nearest => match moving.nearest_index(u) {
                            Some(idx) => {
                                vals.push(moving.data()[idx]);
                                wts.push(1.0);
                            }
                            None => {
                                vals.push(0.0);
                                wts.push(0.0);
                            }
                        },
                    }
                }
            }
            (vals, wts)
        })
        .collect();
    let mut data = Vec::with_capacity(fixed.len());
    let mut weight = Vec::with_capacity(fixed.len());
    for (v, w) in slices {
        data.extend(v);
        weight.extend(w);
    }
    Ok(Warped {
        image: fixed.with_data(data)?,
        weight,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::gaussian_downsample;
    use std::collections::BTreeSet;

    fn textured(dims: [usize; 3], spacing: [f64; 3]) -> Volume {
        let mut data = Vec::new();
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(((i as f64 * 0.7).sin() + (j as f64 * 0.4).cos() * (k as f64 * 0.3).sin()).abs());
                }
            }
        }
        Volume::new(dims, spacing, data).unwrap()
    }

    #[test]
    fn identity_is_exact_copy() {
        let v = textured([9, 8, 7], [2.8, 2.8, 3.8]);
        let w = warp(&v, &v, &AffineParams::identity(), Interpolation::Trilinear).unwrap();
        assert_eq!(w.image.data(), v.data());
        assert!(w.validity().iter().all(|&b| b));
        let w = warp(&v, &v, &AffineParams::identity(), Interpolation::Nearest).unwrap();
        assert_eq!(w.image.data(), v.data());
    }

    #[test]
    fn one_voxel_translation_matches_index_shift() {
        let v = textured([10, 6, 5], [1.5, 1.5, 1.5]);
        let mut p = AffineParams::identity();
        p.translation[0] = v.spacing()[0] / v.max_half_extent();
        let w = warp(&v, &v, &p, Interpolation::Trilinear).unwrap();
        let valid = w.validity();
        for k in 0..5 {
            for j in 0..6 {
                for i in 0..10 {
                    let idx = v.index(i, j, k);
                    if i + 1 < 10 {
                        assert!((w.image.data()[idx] - v.get(i + 1, j, k)).abs() < 1e-12);
                        assert!(valid[idx]);
                    } else {
                        assert_eq!(w.image.data()[idx], 0.0);
                        assert!(!valid[idx]);
                    }
                }
            }
        }
    }

    #[test]
    fn nearest_keeps_label_set() {
        let dims = [12, 12, 12];
        let labels: Vec<f64> = (0..1728).map(|i| ((i / 7) % 5) as f64).collect();
        let v = Volume::new(dims, [1.0; 3], labels).unwrap();
        let p = AffineParams {
            translation: [0.13, -0.07, 0.2],
            rotation: [0.2, 0.1, -0.3],
            scale: [1.1, 0.9, 1.0],
            shear: [0.05, 0.0, 0.02],
        };
        let w = warp(&v, &v, &p, Interpolation::Nearest).unwrap();
        let input: BTreeSet<i64> = v.data().iter().map(|&x| x as i64).collect();
        let output: BTreeSet<i64> = w.image.data().iter().map(|&x| x as i64).collect();
        assert!(output.iter().all(|l| *l == 0 || input.contains(l)));
        assert!(w.image.data().iter().all(|x| x.fract() == 0.0));
    }

    #[test]
    fn resolution_consistency() {
        // smooth blob normalized to [0, 1]
        let dims = [32, 32, 32];
        let mut data = Vec::new();
        for k in 0..32 {
            for j in 0..32 {
                for i in 0..32 {
                    let (x, y, z) = (i as f64 - 14.0, j as f64 - 17.0, k as f64 - 15.0);
                    data.push((-(x * x / 60.0 + y * y / 40.0 + z * z / 90.0)).exp());
                }
            }
        }
        let v = Volume::new(dims, [1.0; 3], data).unwrap();
        let p = AffineParams {
            translation: [0.05, -0.04, 0.03],
            rotation: [0.1, -0.05, 0.12],
            scale: [1.03, 0.97, 1.0],
            shear: [0.02, 0.0, -0.01],
        };
        for f in [2, 4] {
            let a = gaussian_downsample(&warp(&v, &v, &p, Interpolation::Trilinear).unwrap().image, f).unwrap();
            let vd = gaussian_downsample(&v, f).unwrap();
            let b = warp(&vd, &vd, &p, Interpolation::Trilinear).unwrap().image;
            let rms = (a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
                / a.len() as f64)
                .sqrt();
            assert!(rms < 0.05, "factor {f}: rms {rms}");
        }
    }
}
