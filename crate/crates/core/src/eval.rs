//! Overlap and transform-recovery metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use crate::affine::{build_matrix, AffineMatrix, AffineParams};
use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq)]
pub struct DiceReport {
    /// Dice coefficient per evaluated label.
    pub per_label: BTreeMap<i64, f64>,
    /// Mean over evaluated labels; 0 when none were evaluated.
    pub mean: f64,
}

impl DiceReport {
    /// CSV with rows `label_id,dsc` and a final `mean` row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::invalid(format!("eval CSV: {e}"));
        w.write_record(["label_id", "dsc"]).map_err(err)?;
        for (l, d) in &self.per_label {
            w.write_record([l.to_string(), format!("{d:?}")]).map_err(err)?;
        }
        w.write_record(["mean".to_string(), format!("{:?}", self.mean)]).map_err(err)?;
        w.flush().map_err(|e| Error::invalid(format!("eval CSV: {e}")))?;
        Ok(())
    }
}

fn label_of(v: f64) -> i64 {
    v.round() as i64
}

/// Dice `2|A∩B| / (|A|+|B|)` per label. With `labels = None` every nonzero
/// label present in either volume is evaluated; labels absent from both are
/// skipped.
pub fn dice(a: &Volume, b: &Volume, labels: Option<&[i64]>) -> Result<DiceReport> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!(
            "label volumes differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut size_a: BTreeMap<i64, usize> = BTreeMap::new();
    let mut size_b: BTreeMap<i64, usize> = BTreeMap::new();
    let mut inter: BTreeMap<i64, usize> = BTreeMap::new();
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (la, lb) = (label_of(x), label_of(y));
        *size_a.entry(la).or_default() += 1;
        *size_b.entry(lb).or_default() += 1;
        if la == lb {
            *inter.entry(la).or_default() += 1;
        }
    }
    let set: BTreeSet<i64> = match labels {
        Some(l) => l.iter().copied().collect(),
        None => size_a.keys().chain(size_b.keys()).copied().filter(|&l| l != 0).collect(),
    };
    let mut per_label = BTreeMap::new();
    for l in set {
        let (na, nb) = (size_a.get(&l).copied().unwrap_or(0), size_b.get(&l).copied().unwrap_or(0));
        if na + nb == 0 {
            continue;
        }
        let ni = inter.get(&l).copied().unwrap_or(0);
        per_label.insert(l, 2.0 * ni as f64 / (na + nb) as f64);
    }
    let mean = if per_label.is_empty() {
        0.0
    } else {
        per_label.values().sum::<f64>() / per_label.len() as f64
    };
    Ok(DiceReport { per_label, mean })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Displacement {
    pub mean_mm: f64,
    pub max_mm: f64,
}

/// Distance between the images of every fixed-grid voxel center under two
/// normalized-space transforms, in millimeters of the fixed frame.
pub fn displacement_error(true_p: &AffineParams, est_p: &AffineParams, fixed: &Volume) -> Result<Displacement> {
    Ok(displacement_error_matrices(&build_matrix(true_p)?, &build_matrix(est_p)?, fixed))
}

/// [`displacement_error`] for transforms given as matrices.
pub fn displacement_error_matrices(a: &AffineMatrix, b: &AffineMatrix, fixed: &Volume) -> Displacement {
    let [nx, ny, nz] = fixed.dims();
    let h = fixed.max_half_extent();
    let mut diff = [[0.0; 4]; 3];
    for (r, row) in diff.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = a.get(r, c) - b.get(r, c);
        }
    }
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let c = fixed.voxel_to_norm([i as f64, j as f64, k as f64]).0;
                let d2: f64 = diff
                    .iter()
                    .map(|row| (row[0] * c[0] + row[1] * c[1] + row[2] * c[2] + row[3]).powi(2))
                    .sum();
                let d = d2.sqrt() * h;
                sum += d;
                max = max.max(d);
            }
        }
    }
    Displacement {
        mean_mm: sum / fixed.len() as f64,
        max_mm: max,
    }
}
