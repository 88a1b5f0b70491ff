//! Versioned JSON document holding an affine transform and how it was made.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::affine::{build_matrix, params_to_world_matrix, AffineParams};
use crate::error::{Error, Result};
use crate::volume::Volume;

pub const SCHEMA_VERSION: u32 = 1;
const MATRIX_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamGroups {
    /// Translation in normalized units.
    pub t: [f64; 3],
    /// Rotation in radians.
    pub r: [f64; 3],
    pub s: [f64; 3],
    pub k: [f64; 3],
}

impl From<&AffineParams> for ParamGroups {
    fn from(p: &AffineParams) -> Self {
        Self {
            t: p.translation,
            r: p.rotation,
            s: p.scale,
            k: p.shear,
        }
    }
}

impl From<&ParamGroups> for AffineParams {
    fn from(g: &ParamGroups) -> Self {
        Self {
            translation: g.t,
            rotation: g.r,
            scale: g.s,
            shear: g.k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metadata {
    pub metric: String,
    pub scales: Vec<usize>,
    pub iters: Vec<usize>,
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
    pub tool_version: String,
}

impl Metadata {
    pub fn new(metric: impl Into<String>, scales: Vec<usize>, iters: Vec<usize>) -> Self {
        Self {
            metric: metric.into(),
            scales,
            iters,
            seeds: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineDocument {
    pub schema_version: u32,
    pub params: ParamGroups,
    /// Row-major map from fixed to moving normalized coordinates.
    pub matrix_normalized: [[f64; 4]; 4],
    /// Row-major map from fixed to moving millimeter coordinates, with the
    /// first voxel center at the origin.
    pub matrix_world_mm: [[f64; 4]; 4],
    pub metadata: Metadata,
}

impl AffineDocument {
    pub fn new(p: &AffineParams, fixed: &Volume, moving: &Volume, metadata: Metadata) -> Result<Self> {
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            params: p.into(),
            matrix_normalized: build_matrix(p)?.rows(),
            matrix_world_mm: params_to_world_matrix(p, fixed, moving)?.rows(),
            metadata,
        })
    }

    pub fn params(&self) -> AffineParams {
        (&self.params).into()
    }

    /// Checks the version, the parameters and that the stored normalized
    /// matrix matches the parameters.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Document(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let p = self.params();
        p.validate()?;
        let m = build_matrix(&p)?.rows();
        for (r, (a, b)) in m.iter().zip(&self.matrix_normalized).enumerate() {
            for (c, (x, y)) in a.iter().zip(b).enumerate() {
                if (x - y).abs() > MATRIX_TOLERANCE {
                    return Err(Error::Document(format!(
                        "matrix_normalized[{r}][{c}] = {y} disagrees with the parameters ({x})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Document(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text).map_err(|e| Error::Document(e.to_string()))?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
