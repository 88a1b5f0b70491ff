//! The 12-parameter affine model and its matrix realization.
//!
//! Matrices map fixed-image normalized coordinates into moving-image
//! normalized coordinates (pull-back semantics). The linear part is composed
//! as `T * Rz * Ry * Rx * K * S`: scaling first, then a unit upper-triangular
//! shear, then rotations about x, y and z (right-handed, radians), then the
//! translation. Rotation happens about the origin of the normalized frame,
//! which is the volume center.

use nalgebra::{Matrix3, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    /// Translation in normalized units.
    pub translation: [f64; 3],
    /// Rotation angles about x, y, z in radians.
    pub rotation: [f64; 3],
    /// Per-axis scale factors.
    pub scale: [f64; 3],
    /// Shear coefficients `(kxy, kxz, kyz)`.
    pub shear: [f64; 3],
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineParams {
    pub const COUNT: usize = 12;

    pub fn identity() -> Self {
        Self {
            translation: [0.0; 3],
            rotation: [0.0; 3],
            scale: [1.0; 3],
            shear: [0.0; 3],
        }
    }

    /// Flattened as translation, rotation, scale, shear.
    pub fn to_array(&self) -> [f64; 12] {
        let mut a = [0.0; 12];
        a[0..3].copy_from_slice(&self.translation);
        a[3..6].copy_from_slice(&self.rotation);
        a[6..9].copy_from_slice(&self.scale);
        a[9..12].copy_from_slice(&self.shear);
        a
    }

    pub fn from_array(a: [f64; 12]) -> Self {
        Self {
            translation: [a[0], a[1], a[2]],
            rotation: [a[3], a[4], a[5]],
            scale: [a[6], a[7], a[8]],
            shear: [a[9], a[10], a[11]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("affine parameters must be finite"));
        }
        if self.scale.iter().any(|&s| s == 0.0) {
            return Err(Error::invalid(format!(
                "scale factors must be nonzero, got {:?}",
                self.scale
            )));
        }
        Ok(())
    }
}

/// Homogeneous 4x4 matrix whose last row is `(0, 0, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMatrix(Matrix4<f64>);

impl AffineMatrix {
    pub fn identity() -> Self {
        Self(Matrix4::identity())
    }

    /// Builds a matrix from 16 row-major values. The last row must be
    /// exactly `(0, 0, 0, 1)`.
    pub fn from_rows(rows: [[f64; 4]; 4]) -> Result<Self> {
        if rows[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::invalid(format!(
                "last row of an affine matrix must be (0, 0, 0, 1), got {:?}",
                rows[3]
            )));
        }
        Ok(Self(Matrix4::from_fn(|r, c| rows[r][c])))
    }

    pub fn rows(&self) -> [[f64; 4]; 4] {
        let mut out = [[0.0; 4]; 4];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.0[(r, c)];
            }
        }
        out
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0[(r, c)]
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.0 * Vector4::new(p[0], p[1], p[2], 1.0);
        [v[0], v[1], v[2]]
    }

    pub(crate) fn from_linear_translation(a: Matrix3<f64>, t: [f64; 3]) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&a);
        m[(0, 3)] = t[0];
        m[(1, 3)] = t[1];
        m[(2, 3)] = t[2];
        Self(m)
    }

    fn linear(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }
}

fn rot_x(a: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let (s, c) = a.sin_cos();
    (
        Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
        Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s),
    )
}

fn rot_y(a: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let (s, c) = a.sin_cos();
    (
        Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
        Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s),
    )
}

fn rot_z(a: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let (s, c) = a.sin_cos();
    (
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
        Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0),
    )
}

fn shear_matrix(k: [f64; 3]) -> Matrix3<f64> {
    Matrix3::new(1.0, k[0], k[1], 0.0, 1.0, k[2], 0.0, 0.0, 1.0)
}

/// Matrix realization `T * Rz * Ry * Rx * K * S` of the parameters.
pub fn build_matrix(p: &AffineParams) -> Result<AffineMatrix> {
    p.validate()?;
    let (rx, _) = rot_x(p.rotation[0]);
    let (ry, _) = rot_y(p.rotation[1]);
    let (rz, _) = rot_z(p.rotation[2]);
    let a = rz * ry * rx * shear_matrix(p.shear) * Matrix3::from_diagonal(&p.scale.into());
    Ok(AffineMatrix::from_linear_translation(a, p.translation))
}

/// Partial derivatives of [`build_matrix`] with respect to each of the 12
/// parameters, in [`AffineParams::to_array`] order. Only the top three rows
/// are meaningful; the last row is zero.
pub(crate) fn matrix_jacobian(p: &AffineParams) -> [[[f64; 4]; 3]; 12] {
    let (rx, drx) = rot_x(p.rotation[0]);
    let (ry, dry) = rot_y(p.rotation[1]);
    let (rz, drz) = rot_z(p.rotation[2]);
    let k = shear_matrix(p.shear);
    let s = Matrix3::from_diagonal(&p.scale.into());
    let r = rz * ry * rx;
    let mut out = [[[0.0; 4]; 3]; 12];
    for (axis, jac) in out.iter_mut().take(3).enumerate() {
        jac[axis][3] = 1.0;
    }
    let linear = [
        rz * ry * drx * k * s,
        rz * dry * rx * k * s,
        drz * ry * rx * k * s,
        r * k * Matrix3::from_diagonal(&[1.0, 0.0, 0.0].into()),
        r * k * Matrix3::from_diagonal(&[0.0, 1.0, 0.0].into()),
        r * k * Matrix3::from_diagonal(&[0.0, 0.0, 1.0].into()),
        r * Matrix3::new(0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0) * s,
        r * Matrix3::new(0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0) * s,
        r * Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0) * s,
    ];
    for (j, d) in linear.iter().enumerate() {
        for row in 0..3 {
            for col in 0..3 {
                out[3 + j][row][col] = d[(row, col)];
            }
        }
    }
    out
}

/// Matrix product `a * b` (apply `b` first).
pub fn compose(a: &AffineMatrix, b: &AffineMatrix) -> AffineMatrix {
    let mut m = a.0 * b.0;
    // keep the homogeneous row exact
    m[(3, 0)] = 0.0;
    m[(3, 1)] = 0.0;
    m[(3, 2)] = 0.0;
    m[(3, 3)] = 1.0;
    AffineMatrix(m)
}

/// Exact homogeneous inverse `[A^-1, -A^-1 t]`.
pub fn invert(m: &AffineMatrix) -> Result<AffineMatrix> {
    let a = m.linear();
    let det = a.determinant();
    let scale = a.abs().max().max(f64::MIN_POSITIVE);
    if !det.is_finite() || det.abs() <= 1e-14 * scale * scale * scale {
        return Err(Error::SingularMatrix);
    }
    let inv = a.try_inverse().ok_or(Error::SingularMatrix)?;
    let t = nalgebra::Vector3::new(m.0[(0, 3)], m.0[(1, 3)], m.0[(2, 3)]);
    let ti = -(inv * t);
    Ok(AffineMatrix::from_linear_translation(inv, [ti[0], ti[1], ti[2]]))
}

/// Millimeter-space (voxel index times spacing) mapping from the fixed grid
/// into the moving grid equivalent to the normalized-space matrix of `p`.
pub fn params_to_world_matrix(
    p: &AffineParams,
    fixed: &Volume,
    moving: &Volume,
) -> Result<AffineMatrix> {
    let m = build_matrix(p)?;
    Ok(normalized_to_world(&m, fixed, moving))
}

pub(crate) fn normalized_to_world(m: &AffineMatrix, fixed: &Volume, moving: &Volume) -> AffineMatrix {
    compose(&compose(&norm_to_mm(moving), m), &mm_to_norm(fixed))
}

/// `c = (x_mm - o) / H` with `o = extent/2 - spacing/2`.
fn mm_to_norm(v: &Volume) -> AffineMatrix {
    let h = v.max_half_extent();
    let (e, s) = (v.extent(), v.spacing());
    let mut m = Matrix4::identity();
    for a in 0..3 {
        m[(a, a)] = 1.0 / h;
        m[(a, 3)] = -(0.5 * e[a] - 0.5 * s[a]) / h;
    }
    AffineMatrix(m)
}

fn norm_to_mm(v: &Volume) -> AffineMatrix {
    let h = v.max_half_extent();
    let (e, s) = (v.extent(), v.spacing());
    let mut m = Matrix4::identity();
    for a in 0..3 {
        m[(a, a)] = h;
        m[(a, 3)] = 0.5 * e[a] - 0.5 * s[a];
    }
    AffineMatrix(m)
}

/// Parameters whose [`build_matrix`] reproduces `m`, found by a QR
/// factorization of the linear block into a rotation and a scaled unit upper
/// triangle. Reflections yield a negative z scale.
pub fn decompose(m: &AffineMatrix) -> Result<AffineParams> {
    let a = m.linear();
    if !(a.determinant().abs() > 0.0) {
        return Err(Error::SingularMatrix);
    }
    let qr = a.qr();
    let (mut q, mut r) = (qr.q(), qr.r());
    for i in 0..3 {
        if r[(i, i)] < 0.0 {
            r.row_mut(i).neg_mut();
            q.column_mut(i).neg_mut();
        }
    }
    if q.determinant() < 0.0 {
        r.row_mut(2).neg_mut();
        q.column_mut(2).neg_mut();
    }
    let ry = (-q[(2, 0)]).clamp(-1.0, 1.0).asin();
    let rx = q[(2, 1)].atan2(q[(2, 2)]);
    let rz = q[(1, 0)].atan2(q[(0, 0)]);
    let scale = [r[(0, 0)], r[(1, 1)], r[(2, 2)]];
    let shear = [r[(0, 1)] / scale[1], r[(0, 2)] / scale[2], r[(1, 2)] / scale[2]];
    let p = AffineParams {
        translation: [m.get(0, 3), m.get(1, 3), m.get(2, 3)],
        rotation: [rx, ry, rz],
        scale,
        shear,
    };
    p.validate()?;
    Ok(p)
}
