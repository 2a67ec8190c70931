//! Tangent-space charts on the unit sphere.
//!
//! Every direction `mu` owns a chart given by the azimuthal equidistant
//! projection: `log_mu` maps a direction to a 2D tangent vector whose length
//! is the geodesic distance to `mu`, and `exp_mu` is its inverse on the open
//! disk of radius pi. The chart basis is fixed by [`Rotation::to_pole`], so all
//! code that stores tangent-space quantities must go through [`Chart`].

use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix3x2, Vector2, Vector3};

use crate::error::{Error, Result};

/// Two directions are treated as antipodal when their dot product is at or
/// below this value.
pub const ANTIPODAL_DOT: f64 = -1.0 + 1e-12;

/// Below this cosine the shortest-arc rotation switches to the flipped branch.
const FLIP_BRANCH_DOT: f64 = -1.0 + 1e-6;

pub type TangentVec2 = Vector2<f64>;

/// A direction on the unit sphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitVec3(Vector3<f64>);

impl UnitVec3 {
    pub const Z: UnitVec3 = UnitVec3(Vector3::new(0.0, 0.0, 1.0));

    /// Normalizes `v`; returns `None` for zero-length or non-finite input.
    pub fn new_normalize(v: Vector3<f64>) -> Option<Self> {
        let n = v.norm();
        if n.is_finite() && n > 1e-300 {
            Some(UnitVec3(v / n))
        } else {
            None
        }
    }

    /// Wraps a vector the caller guarantees to be unit length.
    pub fn new_unchecked(v: Vector3<f64>) -> Self {
        debug_assert!((v.norm() - 1.0).abs() < 1e-6, "not unit: {v:?}");
        UnitVec3(v)
    }

    pub fn from_xyz(x: f64, y: f64, z: f64) -> Option<Self> {
        Self::new_normalize(Vector3::new(x, y, z))
    }

    /// Direction from spherical coordinates (polar angle from +z, azimuth from +x).
    pub fn from_spherical(theta: f64, phi: f64) -> Self {
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        UnitVec3(Vector3::new(st * cp, st * sp, ct))
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }
    pub fn y(&self) -> f64 {
        self.0.y
    }
    pub fn z(&self) -> f64 {
        self.0.z
    }

    pub fn as_vector(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn into_vector(self) -> Vector3<f64> {
        self.0
    }

    pub fn dot(&self, other: &UnitVec3) -> f64 {
        self.0.dot(&other.0)
    }

    pub fn neg(&self) -> UnitVec3 {
        UnitVec3(-self.0)
    }

    /// Polar angle and azimuth in `[0, pi] x [0, 2pi)`.
    pub fn to_spherical(&self) -> (f64, f64) {
        let theta = self.0.z.clamp(-1.0, 1.0).acos();
        let mut phi = self.0.y.atan2(self.0.x);
        if phi < 0.0 {
            phi += 2.0 * PI;
        }
        (theta, phi)
    }
}

/// Great-circle distance between two unit vectors.
pub fn geodesic_distance(a: &UnitVec3, b: &UnitVec3) -> f64 {
    // atan2 form stays accurate near 0 and pi.
    let cross = a.0.cross(&b.0).norm();
    cross.atan2(a.dot(b))
}

/// Unnormalized sinc, `sin(x)/x`, with the removable singularity filled in.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// A proper rotation of R^3.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix after checking orthonormality and orientation.
    pub fn from_matrix(m: Matrix3<f64>) -> Option<Self> {
        let err = (m.transpose() * m - Matrix3::identity()).abs().max();
        if err < 1e-9 && (m.determinant() - 1.0).abs() < 1e-9 {
            Some(Rotation(m))
        } else {
            None
        }
    }

    /// Rotation whose columns are the images of the canonical axes, i.e. the
    /// map from a local frame `(s, t, n)` to world space.
    pub fn from_frame(s: &Vector3<f64>, t: &Vector3<f64>, n: &Vector3<f64>) -> Option<Self> {
        Self::from_matrix(Matrix3::from_columns(&[*s, *t, *n]))
    }

    /// Rotation about an axis by `angle` radians.
    pub fn from_axis_angle(axis: &UnitVec3, angle: f64) -> Self {
        let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(axis.0), angle);
        Rotation(*rot.matrix())
    }

    /// Shortest-arc rotation taking `mu` to `(0, 0, 1)`.
    ///
    /// Near `-z` the arc formula degenerates, so the vector is first flipped
    /// by a half turn about the x axis and the short arc is taken from there.
    pub fn to_pole(mu: &UnitVec3) -> Self {
        let c = mu.z();
        if c >= FLIP_BRANCH_DOT {
            Rotation(arc_to_pole(&mu.0))
        } else {
            let flip = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
            let flipped = flip * mu.0;
            Rotation(arc_to_pole(&flipped) * flip)
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn apply(&self, v: &UnitVec3) -> UnitVec3 {
        UnitVec3(self.0 * v.0)
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn inverse(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }
}

fn arc_to_pole(a: &Vector3<f64>) -> Matrix3<f64> {
    // Rodrigues form of the rotation taking a onto e_z.
    let v = Vector3::new(a.y, -a.x, 0.0); // a x e_z
    let c = a.z;
    let vx = Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0);
    Matrix3::identity() + vx + vx * vx * (1.0 / (1.0 + c))
}

/// A tangent-space chart centered at a unit vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Chart {
    mean: UnitVec3,
    rot: Rotation,
}

impl Chart {
    pub fn new(mean: UnitVec3) -> Self {
        debug_assert!((mean.0.norm() - 1.0).abs() < 1e-6, "chart mean not unit: {mean:?}");
        Chart { mean, rot: Rotation::to_pole(&mean) }
    }

    pub fn mean(&self) -> &UnitVec3 {
        &self.mean
    }

    /// `R_mu`, taking the mean to the pole.
    pub fn rotation(&self) -> &Rotation {
        &self.rot
    }

    /// World-space directions of the tangent axes `u` and `v`.
    pub fn basis(&self) -> (Vector3<f64>, Vector3<f64>) {
        let m = self.rot.matrix();
        (m.row(0).transpose(), m.row(1).transpose())
    }

    pub fn log(&self, omega: &UnitVec3) -> Result<TangentVec2> {
        let w = self.rot.0 * omega.0;
        if w.z <= ANTIPODAL_DOT {
            return Err(Error::Antipodal);
        }
        let s = (w.x * w.x + w.y * w.y).sqrt();
        let theta = s.atan2(w.z);
        let scale = if theta < 1e-4 { 1.0 + theta * theta / 6.0 } else { theta / s };
        Ok(TangentVec2::new(w.x * scale, w.y * scale))
    }

    pub fn exp(&self, nu: &TangentVec2) -> Result<UnitVec3> {
        let r = nu.norm();
        if !(r < PI) {
            return Err(Error::OutOfChart { norm: r });
        }
        Ok(self.exp_unchecked(nu, r))
    }

    fn exp_unchecked(&self, nu: &TangentVec2, r: f64) -> UnitVec3 {
        let s = sinc(r);
        let local = Vector3::new(nu.x * s, nu.y * s, r.cos());
        // Renormalize so repeated chart hops cannot accumulate drift.
        UnitVec3((self.rot.0.transpose() * local).normalize())
    }

    /// Jacobian of `log` as a map on R^3 (2x3).
    pub fn jacobian_log(&self, omega: &UnitVec3) -> Result<Matrix2x3<f64>> {
        let w = self.rot.0 * omega.0;
        if w.z <= ANTIPODAL_DOT {
            return Err(Error::Antipodal);
        }
        let s = (w.x * w.x + w.y * w.y).sqrt();
        let theta = s.atan2(w.z);
        let (g, dg) = if theta < 1e-3 {
            let t2 = theta * theta;
            (1.0 + t2 / 6.0, -1.0 / 3.0 - 2.0 * t2 / 15.0)
        } else {
            let st = theta.sin();
            (theta / st, (theta * theta.cos() - st) / (st * st * st))
        };
        let local = Matrix2x3::new(g, 0.0, w.x * dg, 0.0, g, w.y * dg);
        Ok(local * self.rot.0)
    }

    /// Jacobian of `exp` at `nu` (3x2).
    pub fn jacobian_exp(&self, nu: &TangentVec2) -> Result<Matrix3x2<f64>> {
        let r = nu.norm();
        if !(r < PI) {
            return Err(Error::OutOfChart { norm: r });
        }
        let s = sinc(r);
        let j = if r < 1e-3 { -1.0 / 3.0 + r * r / 30.0 } else { (r.cos() - s) / (r * r) };
        let (u, v) = (nu.x, nu.y);
        let local = Matrix3x2::new(s + u * u * j, u * v * j, u * v * j, s + v * v * j, -u * s, -v * s);
        Ok(self.rot.0.transpose() * local)
    }
}

pub fn log_map(mu: &UnitVec3, omega: &UnitVec3) -> Result<TangentVec2> {
    Chart::new(*mu).log(omega)
}

pub fn exp_map(mu: &UnitVec3, nu: &TangentVec2) -> Result<UnitVec3> {
    Chart::new(*mu).exp(nu)
}

pub fn jacobian_log(mu: &UnitVec3, omega: &UnitVec3) -> Result<Matrix2x3<f64>> {
    Chart::new(*mu).jacobian_log(omega)
}

pub fn jacobian_exp(mu: &UnitVec3, nu: &TangentVec2) -> Result<Matrix3x2<f64>> {
    Chart::new(*mu).jacobian_exp(nu)
}

/// Factor converting a tangent-space density at `nu` into a solid-angle
/// density: `p_omega = p_tangent * metric_correction(nu)`.
///
/// The exp map preserves radial lengths and shrinks the circumferential
/// direction by `sinc(|nu|)`, so `sqrt(det G) = sinc(|nu|)` is the solid angle
/// per unit tangent area and densities pick up its reciprocal.
pub fn metric_correction(nu: &TangentVec2) -> f64 {
    1.0 / sinc(nu.norm())
}

/// `sqrt(det(J^T J))` of the exp map at `nu`.
pub fn area_element(nu: &TangentVec2) -> f64 {
    sinc(nu.norm())
}

/// First-order map of tangent coordinates at `mu2` into the chart of `mu1`:
/// the Jacobian of `log_mu1 . exp_mu2` at the origin.
pub fn transport_jacobian(mu1: &UnitVec3, mu2: &UnitVec3) -> Result<Matrix2<f64>> {
    let to = Chart::new(*mu1);
    let from = Chart::new(*mu2);
    chart_change_jacobian(&from, &TangentVec2::zeros(), &to)
}

/// Jacobian of `to.log . from.exp` evaluated at `nu` in the `from` chart.
pub fn chart_change_jacobian(from: &Chart, nu: &TangentVec2, to: &Chart) -> Result<Matrix2<f64>> {
    let omega = from.exp(nu)?;
    Ok(to.jacobian_log(&omega)? * from.jacobian_exp(nu)?)
}

/// 2x2 rotation taking `from`-chart coordinates at `mean` to coordinates in
/// the chart of `rotation * mean`.
pub fn azimuthal_rotation(from: &Chart, rotation: &Rotation, to: &Chart) -> Matrix2<f64> {
    let (e1, e2) = from.basis();
    let (f1, f2) = to.basis();
    let r1 = rotation.apply_vector(&e1);
    let r2 = rotation.apply_vector(&e2);
    Matrix2::new(f1.dot(&r1), f1.dot(&r2), f2.dot(&r1), f2.dot(&r2))
}
