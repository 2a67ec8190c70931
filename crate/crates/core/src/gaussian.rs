//! A single tangent-space Gaussian over one or two spheres plus up to three
//! Euclidean dimensions.
//!
//! Tangent coordinates are ordered `[sphere 0 (2), sphere 1 (2), euclid]`.
//! Sphere 0 is always the sampled direction; the remaining dimensions are the
//! ones a component can be conditioned on.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix2, SMatrix, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{sinc, Chart, TangentVec2, UnitVec3};
use crate::linalg::{self, MatD, VecD, MAX_DIM};

/// Smallest eigenvalue kept in a conditional covariance.
pub const CONDITIONAL_EIGEN_FLOOR: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Dimensional signature shared by all components of a mixture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Layout {
    pub spheres: usize,
    pub euclid: usize,
}

impl Layout {
    /// Direction plus 3D position.
    pub const RADIANCE: Layout = Layout { spheres: 1, euclid: 3 };
    pub const DIRECTIONAL: Layout = Layout { spheres: 1, euclid: 0 };

    pub fn new(spheres: usize, euclid: usize) -> Result<Self> {
        if !(1..=2).contains(&spheres) || euclid > 3 {
            return Err(Error::InvalidMixture(format!(
                "unsupported layout: {spheres} spheres, {euclid} euclidean dims"
            )));
        }
        Ok(Layout { spheres, euclid })
    }

    /// Incident and outgoing direction plus `params` BSDF parameters.
    pub fn bsdf(params: usize) -> Self {
        assert!(params <= 3);
        Layout { spheres: 2, euclid: params }
    }

    pub fn dim(&self) -> usize {
        2 * self.spheres + self.euclid
    }

    /// Offset of the first Euclidean coordinate.
    pub fn euclid_offset(&self) -> usize {
        2 * self.spheres
    }
}

/// A point of the product manifold. Entries beyond the layout are ignored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub dirs: [UnitVec3; 2],
    pub euclid: [f64; 3],
}

impl Point {
    pub fn directional(dir: UnitVec3) -> Self {
        Point { dirs: [dir, UnitVec3::Z], euclid: [0.0; 3] }
    }

    pub fn radiance(dir: UnitVec3, position: [f64; 3]) -> Self {
        Point { dirs: [dir, UnitVec3::Z], euclid: position }
    }

    pub fn bsdf(wi: UnitVec3, wo: UnitVec3, params: &[f64]) -> Self {
        let mut euclid = [0.0; 3];
        euclid[..params.len()].copy_from_slice(params);
        Point { dirs: [wi, wo], euclid }
    }
}

/// Cached quantities for conditioning sphere 0 on all remaining dimensions.
#[derive(Clone, Debug, PartialEq)]
struct CondCache {
    /// `Sigma_ab Sigma_bb^-1`, zero-padded beyond the conditioning block.
    regression: SMatrix<f64, 2, MAX_DIM>,
    cov: Matrix2<f64>,
    /// Cholesky factor of the conditioning block, identity-padded.
    marginal_chol: MatD,
    marginal_log_norm: f64,
}

/// A Gaussian whose covariance lives in the tangent spaces of its means.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentGaussian {
    layout: Layout,
    charts: [Chart; 2],
    euclid_mean: [f64; 3],
    cov: MatD,
    chol: MatD,
    log_norm: f64,
    cond: Option<CondCache>,
}

impl TangentGaussian {
    /// Builds a component from its means and the leading `dim x dim` block of
    /// `cov`. Fails unless the block is symmetric positive definite.
    pub fn new(layout: Layout, dir_means: &[UnitVec3], euclid_mean: &[f64], cov: &MatD) -> Result<Self> {
        if dir_means.len() != layout.spheres {
            return Err(Error::DimensionMismatch { expected: layout.spheres, got: dir_means.len() });
        }
        if euclid_mean.len() != layout.euclid {
            return Err(Error::DimensionMismatch { expected: layout.euclid, got: euclid_mean.len() });
        }
        let mut charts = [Chart::new(UnitVec3::Z); 2];
        for (c, m) in charts.iter_mut().zip(dir_means) {
            *c = Chart::new(*m);
        }
        let mut e = [0.0; 3];
        e[..layout.euclid].copy_from_slice(euclid_mean);
        Self::from_charts(layout, charts, e, cov)
    }

    /// Same as [`TangentGaussian::new`] with the covariance given as a dense matrix.
    pub fn from_dmatrix(
        layout: Layout,
        dir_means: &[UnitVec3],
        euclid_mean: &[f64],
        cov: &DMatrix<f64>,
    ) -> Result<Self> {
        if cov.nrows() != layout.dim() || cov.ncols() != layout.dim() {
            return Err(Error::DimensionMismatch { expected: layout.dim(), got: cov.nrows() });
        }
        Self::new(layout, dir_means, euclid_mean, &linalg::from_dmatrix(cov))
    }

    pub(crate) fn from_charts(layout: Layout, charts: [Chart; 2], euclid_mean: [f64; 3], cov: &MatD) -> Result<Self> {
        let d = layout.dim();
        if euclid_mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMixture("non-finite mean".into()));
        }
        let mut cov = linalg::pad_identity(d, cov);
        if linalg::asymmetry(d, &cov) > 1e-9 {
            return Err(Error::InvalidMixture("covariance is not symmetric".into()));
        }
        linalg::symmetrize(d, &mut cov);
        let chol = linalg::cholesky(&cov).ok_or(Error::NotPositiveDefinite)?;
        let log_norm = -0.5 * d as f64 * LN_2PI - linalg::half_log_det(d, &chol);
        let cond = if d > 2 { Some(conditional_cache(d, &cov)?) } else { None };
        Ok(TangentGaussian { layout, charts, euclid_mean, cov, chol, log_norm, cond })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn dir_mean(&self, sphere: usize) -> &UnitVec3 {
        assert!(sphere < self.layout.spheres);
        self.charts[sphere].mean()
    }

    pub fn chart(&self, sphere: usize) -> &Chart {
        assert!(sphere < self.layout.spheres);
        &self.charts[sphere]
    }

    pub fn euclid_mean(&self) -> &[f64] {
        &self.euclid_mean[..self.layout.euclid]
    }

    /// Identity-padded covariance storage.
    pub fn cov(&self) -> &MatD {
        &self.cov
    }

    pub fn cov_dmatrix(&self) -> DMatrix<f64> {
        linalg::to_dmatrix(self.dim(), &self.cov)
    }

    pub fn cholesky(&self) -> &MatD {
        &self.chol
    }

    pub fn mean_point(&self) -> Point {
        Point { dirs: [*self.charts[0].mean(), *self.charts[1].mean()], euclid: self.euclid_mean }
    }

    /// Tangent coordinates of `p` in this component's charts.
    pub fn tangent_coords(&self, p: &Point) -> Result<VecD> {
        let mut nu = VecD::zeros();
        for s in 0..self.layout.spheres {
            let v = self.charts[s].log(&p.dirs[s])?;
            nu[2 * s] = v.x;
            nu[2 * s + 1] = v.y;
        }
        let off = self.layout.euclid_offset();
        for e in 0..self.layout.euclid {
            nu[off + e] = p.euclid[e] - self.euclid_mean[e];
        }
        Ok(nu)
    }

    /// Log of the Gaussian density at tangent coordinates `nu`.
    pub fn log_tangent_density(&self, nu: &VecD) -> f64 {
        self.log_norm - 0.5 * linalg::mahalanobis_sq(self.dim(), &self.chol, nu)
    }

    /// Log density with respect to solid angle on each sphere (and Lebesgue
    /// measure on the Euclidean block). `-inf` when a direction is antipodal
    /// to its mean.
    pub fn log_density(&self, p: &Point) -> f64 {
        match self.tangent_coords(p) {
            Ok(nu) => self.log_tangent_density(&nu) + log_metric(self.layout.spheres, &nu, 0),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    /// Draws tangent coordinates `L z`.
    pub fn sample_tangent<R: Rng + ?Sized>(&self, rng: &mut R) -> VecD {
        let mut z = VecD::zeros();
        for i in 0..self.dim() {
            z[i] = rng.sample(StandardNormal);
        }
        self.chol * z
    }

    /// Maps tangent coordinates back to a point; fails when a spherical block
    /// leaves its chart.
    pub fn point_from_tangent(&self, nu: &VecD) -> Result<Point> {
        let mut p = self.mean_point();
        for s in 0..self.layout.spheres {
            p.dirs[s] = self.charts[s].exp(&Vector2::new(nu[2 * s], nu[2 * s + 1]))?;
        }
        let off = self.layout.euclid_offset();
        for e in 0..self.layout.euclid {
            p.euclid[e] = self.euclid_mean[e] + nu[off + e];
        }
        Ok(p)
    }

    /// Samples a point from the joint; `Err(OutOfChart)` means discard.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Point> {
        let nu = self.sample_tangent(rng);
        self.point_from_tangent(&nu)
    }

    /// Conditions sphere 0 on the remaining coordinates of `given`.
    ///
    /// Returns the log likelihood of the conditioning coordinates (including
    /// the solid-angle factor of any conditioning sphere), the conditional
    /// mean offset in the sphere-0 chart, and the conditional covariance.
    pub fn condition(&self, given: &Point) -> Result<(f64, TangentVec2, Matrix2<f64>)> {
        let Some(cache) = &self.cond else {
            return Ok((0.0, TangentVec2::zeros(), self.cov.fixed_view::<2, 2>(0, 0).into_owned()));
        };
        let d = self.dim();
        let mut nu_b = VecD::zeros();
        for s in 1..self.layout.spheres {
            let v = self.charts[s].log(&given.dirs[s])?;
            nu_b[2 * s - 2] = v.x;
            nu_b[2 * s - 1] = v.y;
        }
        let off = self.layout.euclid_offset() - 2;
        for e in 0..self.layout.euclid {
            nu_b[off + e] = given.euclid[e] - self.euclid_mean[e];
        }
        let bd = d - 2;
        let log_lik = cache.marginal_log_norm - 0.5 * linalg::mahalanobis_sq(bd, &cache.marginal_chol, &nu_b)
            + log_metric(self.layout.spheres - 1, &nu_b, 0);
        let offset = cache.regression * nu_b;
        Ok((log_lik, offset, cache.cov))
    }
}

/// Log solid-angle factor `-sum ln sinc(|nu_s|)` over `spheres` consecutive
/// 2D blocks starting at `start`.
fn log_metric(spheres: usize, nu: &VecD, start: usize) -> f64 {
    let mut acc = 0.0;
    for s in 0..spheres {
        let r = (nu[start + 2 * s].powi(2) + nu[start + 2 * s + 1].powi(2)).sqrt();
        acc -= sinc(r.min(PI)).ln();
    }
    acc
}

fn conditional_cache(d: usize, cov: &MatD) -> Result<CondCache> {
    let bd = d - 2;
    let mut sbb = MatD::identity();
    for i in 0..bd {
        for j in 0..bd {
            sbb[(i, j)] = cov[(i + 2, j + 2)];
        }
    }
    let lb = linalg::cholesky(&sbb).ok_or(Error::NotPositiveDefinite)?;
    // Regression rows solve Sigma_bb x = Sigma_ba.
    let mut regression = SMatrix::<f64, 2, MAX_DIM>::zeros();
    for r in 0..2 {
        let mut rhs = VecD::zeros();
        for j in 0..bd {
            rhs[j] = cov[(r, j + 2)];
        }
        let x = linalg::solve_upper_transposed(bd, &lb, &linalg::solve_lower(bd, &lb, &rhs));
        for j in 0..bd {
            regression[(r, j)] = x[j];
        }
    }
    let mut c = cov.fixed_view::<2, 2>(0, 0).into_owned();
    for r in 0..2 {
        for s in 0..2 {
            let mut acc = 0.0;
            for j in 0..bd {
                acc += regression[(r, j)] * cov[(s, j + 2)];
            }
            c[(r, s)] -= acc;
        }
    }
    let c = linalg::clamp_eigen2(&c, CONDITIONAL_EIGEN_FLOOR);
    let marginal_log_norm = -0.5 * bd as f64 * LN_2PI - linalg::half_log_det(bd, &lb);
    Ok(CondCache { regression, cov: c, marginal_chol: lb, marginal_log_norm })
}

/// Density of `N(0, cov)` at `nu`, the plain multivariate normal over the
/// active dimensions of `g`.
pub fn tangent_density(g: &TangentGaussian, nu: &VecD) -> f64 {
    g.log_tangent_density(nu).exp()
}
