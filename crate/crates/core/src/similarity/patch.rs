//! Correlation-ratio loss averaged over non-overlapping cubic patches.

use rayon::prelude::*;

use super::cr::symmetric_term;
use super::parzen::Windows;
use super::{MetricValue, ParzenConfig, PatchConfig, Span};
use crate::error::{Error, Result};
use crate::volume::Volume;

/// Voxel indices of each tile of a non-overlapping cubic tiling; tiles on the
/// far faces may be thinner than `size`.
pub(crate) fn tiles(dims: [usize; 3], size: usize) -> Vec<Vec<u32>> {
    let [nx, ny, nz] = dims;
    let mut out = Vec::new();
    for z0 in (0..nz).step_by(size) {
        for y0 in (0..ny).step_by(size) {
            for x0 in (0..nx).step_by(size) {
                let mut idx = Vec::new();
                for k in z0..(z0 + size).min(nz) {
                    for j in y0..(y0 + size).min(ny) {
                        for i in x0..(x0 + size).min(nx) {
                            idx.push((i + nx * (j + ny * k)) as u32);
                        }
                    }
                }
                out.push(idx);
            }
        }
    }
    out
}

pub(crate) struct PatchOutcome {
    pub value: f64,
    pub admitted: usize,
    /// `(dL/dx, dL/dw)` per voxel, zero outside admitted patches.
    pub grad: Option<Vec<[f64; 2]>>,
}

/// Mean symmetric loss over admissible tiles. A tile is admissible when its
/// valid fraction and population meet `patch` and neither side is constant
/// over it.
#[allow(clippy::too_many_arguments)]
pub(crate) fn patch_loss(
    xw: &Windows,
    x: &[f64],
    yw: &Windows,
    y: &[f64],
    w: Option<&[f64]>,
    tiles: &[Vec<u32>],
    cfg: &ParzenConfig,
    patch: &PatchConfig,
    with_grad: bool,
) -> Result<PatchOutcome> {
    let terms: Vec<Option<(f64, Option<Vec<[f64; 2]>>)>> = tiles
        .par_iter()
        .map(|tile| {
            if tile.len() < patch.min_voxels {
                return Ok(None);
            }
            if let Some(w) = w {
                let mass: f64 = tile.iter().map(|&i| w[i as usize]).sum();
                if mass / (tile.len() as f64) < patch.min_valid {
                    return Ok(None);
                }
            }
            let grad_scale = with_grad.then_some(1.0);
            match symmetric_term(xw, x, yw, y, w, Span::List(tile), cfg.num_bins, grad_scale) {
                Ok(t) => Ok(Some(t)),
                Err(Error::ConstantTarget { .. } | Error::NoOverlap { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let admitted = terms.iter().filter(|t| t.is_some()).count();
    if admitted == 0 {
        return Err(Error::NoAdmissiblePatches { tested: tiles.len() });
    }
    let inv = 1.0 / admitted as f64;
    let value = terms.iter().flatten().map(|t| t.0).sum::<f64>() * inv;
    let grad = with_grad.then(|| {
        let mut g = vec![[0.0; 2]; x.len()];
        for (tile, term) in tiles.iter().zip(&terms) {
            if let Some((_, Some(tg))) = term {
                for (&i, d) in tile.iter().zip(tg) {
                    g[i as usize] = [d[0] * inv, d[1] * inv];
                }
            }
        }
        g
    });
    Ok(PatchOutcome { value, admitted, grad })
}

/// Patch-averaged symmetric correlation-ratio loss between two volumes on the
/// same grid, optionally weighting voxels by `weight` in `[0, 1]`.
pub fn cr_loss_patch(
    x: &Volume,
    y: &Volume,
    cfg: &ParzenConfig,
    patch: &PatchConfig,
    weight: Option<&[f64]>,
) -> Result<MetricValue> {
    cfg.validate()?;
    patch.validate()?;
    if !x.same_grid(y) {
        return Err(Error::invalid("patch loss needs both volumes on the same grid"));
    }
    if weight.is_some_and(|w| w.len() != x.len()) {
        return Err(Error::invalid("weight length does not match the grid"));
    }
    let xw = Windows::compute(x.data(), cfg, weight, false);
    let yw = Windows::compute(y.data(), cfg, weight, false);
    let t = tiles(x.dims(), patch.patch_size);
    let out = patch_loss(&xw, x.data(), &yw, y.data(), weight, &t, cfg, patch, false)?;
    Ok(MetricValue {
        value: out.value,
        n_effective: out.admitted,
    })
}
