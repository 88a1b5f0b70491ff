//! Registration loss of a moving volume warped by affine parameters against a
//! fixed volume, with its exact gradient in the parameters.

use rayon::prelude::*;

use super::cr::symmetric_term;
use super::mi::{mi_backward, mi_forward};
use super::parzen::Windows;
use super::patch::{patch_loss, tiles};
use super::{MaskPolicy, Metric, ParzenConfig, PatchConfig, Span, CHUNK};
use crate::affine::{build_matrix, matrix_jacobian, AffineParams};
use crate::error::{Error, Result};
use crate::volume::Volume;
use crate::warp::VoxelMap;

/// Overlap fraction below which an evaluation is rejected as diverged.
pub const MIN_VALID_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// d(loss)/d(params) in [`AffineParams::to_array`] order; zero when only
    /// the value was requested.
    pub grad: [f64; 12],
    /// Mean warp validity weight over the fixed grid.
    pub valid_fraction: f64,
    /// Contributing voxels (global metrics) or patches (patch metric).
    pub n_effective: usize,
}

/// A loss bound to one moving/fixed pair at one resolution. Quantities that
/// depend only on the fixed volume are computed once.
pub struct Objective<'a> {
    moving: &'a Volume,
    fixed: &'a Volume,
    metric: Metric,
    cfg: ParzenConfig,
    patch: PatchConfig,
    fixed_windows: Windows,
    tiles: Vec<Vec<u32>>,
    /// Normalized fixed-grid coordinate of each index, per axis.
    axis_coords: [Vec<f64>; 3],
}

struct Sampled {
    values: Vec<f64>,
    weights: Vec<f64>,
}

impl<'a> Objective<'a> {
    pub fn new(
        moving: &'a Volume,
        fixed: &'a Volume,
        metric: Metric,
        cfg: ParzenConfig,
        patch: PatchConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if metric == Metric::CrPatch {
            patch.validate()?;
        }
        if fixed.len() < 2 {
            return Err(Error::invalid("fixed volume needs at least 2 voxels"));
        }
        let fixed_windows = Windows::compute(fixed.data(), &cfg, None, false);
        let tiles = if metric == Metric::CrPatch {
            tiles(fixed.dims(), patch.patch_size)
        } else {
            Vec::new()
        };
        let axis_coords = std::array::from_fn(|a| {
            (0..fixed.dims()[a])
                .map(|i| {
                    let mut u = [0.0; 3];
                    u[a] = i as f64;
                    fixed.voxel_to_norm(u).0[a]
                })
                .collect()
        });
        Ok(Self {
            moving,
            fixed,
            metric,
            cfg,
            patch,
            fixed_windows,
            tiles,
            axis_coords,
        })
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    /// Loss only.
    pub fn value(&self, p: &AffineParams) -> Result<Evaluation> {
        self.run(p, false)
    }

    /// Loss and gradient.
    pub fn evaluate(&self, p: &AffineParams) -> Result<Evaluation> {
        self.run(p, true)
    }

    fn use_weights(&self) -> bool {
        self.cfg.mask_policy == MaskPolicy::ValidOnly
    }

    fn sample(&self, map: &VoxelMap) -> Sampled {
        let [nx, ny, nz] = self.fixed.dims();
        let use_w = self.use_weights();
        let slices: Vec<(Vec<f64>, Vec<f64>)> = (0..nz)
            .into_par_iter()
            .map(|k| {
                let mut v = Vec::with_capacity(nx * ny);
                let mut w = Vec::with_capacity(nx * ny);
                for j in 0..ny {
                    for i in 0..nx {
                        let s = self.moving.interp_clamped(map.apply(i, j, k));
                        v.push(if use_w { s.value } else { s.weight * s.value });
                        w.push(s.weight);
                    }
                }
                (v, w)
            })
            .collect();
        let mut values = Vec::with_capacity(self.fixed.len());
        let mut weights = Vec::with_capacity(self.fixed.len());
        for (v, w) in slices {
            values.extend(v);
            weights.extend(w);
        }
        Sampled { values, weights }
    }

    fn run(&self, p: &AffineParams, with_grad: bool) -> Result<Evaluation> {
        let m = build_matrix(p)?;
        let map = VoxelMap::new(&m, self.moving, self.fixed);
        let s = self.sample(&map);
        let n = self.fixed.len();
        let valid_fraction = chunked_sum(&s.weights) / n as f64;
        if !(valid_fraction >= MIN_VALID_FRACTION) {
            return Err(Error::NoOverlap { valid_fraction });
        }
        let w = self.use_weights().then_some(s.weights.as_slice());
        let mw = Windows::compute(&s.values, &self.cfg, w, with_grad);
        let k = self.cfg.num_bins;
        let fixed = self.fixed.data();
        let span = Span::All(n);
        let counted = || match w {
            Some(w) => w.iter().filter(|&&v| v > 0.0).count(),
            None => n,
        };

        // per-voxel (dL/d value, dL/d weight)
        let (loss, n_effective, voxel_grad): (f64, usize, Option<Vec<[f64; 2]>>) = match self.metric {
            Metric::CrGlobal => {
                let gs = with_grad.then_some(1.0);
                let (v, g) = symmetric_term(&mw, &s.values, &self.fixed_windows, fixed, w, span, k, gs)?;
                (v, counted(), g)
            }
            Metric::CrPatch => {
                let out = patch_loss(
                    &mw,
                    &s.values,
                    &self.fixed_windows,
                    fixed,
                    w,
                    &self.tiles,
                    &self.cfg,
                    &self.patch,
                    with_grad,
                )?;
                (out.value, out.admitted, out.grad)
            }
            Metric::Mi => {
                let f = mi_forward(&mw, &self.fixed_windows, w, span, k)?;
                let g = with_grad.then(|| {
                    mi_backward(&f, &mw, &self.fixed_windows, w, span, -1.0, true, false)
                        .into_iter()
                        .map(|d| [d[0], d[2]])
                        .collect()
                });
                (-f.mi, counted(), g)
            }
        };

        let mut grad = [0.0; 12];
        if let Some(vg) = voxel_grad {
            let g_m = self.matrix_gradient(&map, &vg, w.is_some());
            let jac = matrix_jacobian(p);
            for (j, out) in grad.iter_mut().enumerate() {
                let mut acc = 0.0;
                for r in 0..3 {
                    for c in 0..4 {
                        acc += g_m[r][c] * jac[j][r][c];
                    }
                }
                *out = acc;
            }
        }
        Ok(Evaluation {
            loss,
            grad,
            valid_fraction,
            n_effective,
        })
    }

    /// d(loss)/d(M) for the top three rows of the normalized matrix.
    fn matrix_gradient(&self, map: &VoxelMap, vg: &[[f64; 2]], weighted: bool) -> [[f64; 4]; 3] {
        let [nx, ny, _] = self.fixed.dims();
        let n = vg.len();
        let sm = map.moving_scale;
        let [cx, cy, cz] = &self.axis_coords;
        let parts: Vec<[[f64; 4]; 3]> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut acc = [[0.0; 4]; 3];
                for idx in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    let [gv, gw] = vg[idx];
                    if gv == 0.0 && gw == 0.0 {
                        continue;
                    }
                    let (i, j, k) = (idx % nx, (idx / nx) % ny, idx / (nx * ny));
                    let s = self.moving.interp_clamped(map.apply(i, j, k));
                    let cf = [cx[i], cy[j], cz[k], 1.0];
                    for r in 0..3 {
                        let du = if weighted {
                            gv * s.grad[r] + gw * s.weight_grad[r]
                        } else {
                            gv * (s.weight * s.grad[r] + s.value * s.weight_grad[r])
                        };
                        let dc = du * sm[r];
                        for (col, &cv) in cf.iter().enumerate() {
                            acc[r][col] += dc * cv;
                        }
                    }
                }
                acc
            })
            .collect();
        let mut total = [[0.0; 4]; 3];
        for p in &parts {
            for r in 0..3 {
                for c in 0..4 {
                    total[r][c] += p[r][c];
                }
            }
        }
        total
    }
}

fn chunked_sum(v: &[f64]) -> f64 {
    let parts: Vec<f64> = v.par_chunks(CHUNK).map(|c| c.iter().sum()).collect();
    parts.iter().sum()
}

/// One-shot loss and gradient of `moving` warped by `p` against `fixed`.
pub fn loss_and_gradient(
    p: &AffineParams,
    moving: &Volume,
    fixed: &Volume,
    metric: Metric,
    cfg: &ParzenConfig,
    patch: &PatchConfig,
) -> Result<Evaluation> {
    Objective::new(moving, fixed, metric, *cfg, *patch)?.evaluate(p)
}
