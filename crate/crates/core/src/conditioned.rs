//! Purely directional mixtures produced by conditioning, rotation and products.
//!
//! Components reference shared charts: after a product every pair built from
//! the same radiance component lives in that component's tangent space, so
//! the log map is evaluated once per chart rather than once per component.

use nalgebra::Matrix2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gaussian::CONDITIONAL_EIGEN_FLOOR;
use crate::geometry::{azimuthal_rotation, sinc, Chart, Rotation, TangentVec2, UnitVec3};
use crate::linalg::{cholesky2, clamp_eigen2};
use crate::mixture::pick_index;

/// Product pairs lighter than this fraction of the heaviest pair are dropped.
pub const PRODUCT_PRUNE_RATIO: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Outcome of drawing a direction from a mixture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampled {
    Direction(UnitVec3),
    /// The tangent sample fell outside its chart.
    Discard,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CondComponent {
    chart: usize,
    offset: TangentVec2,
    cov: Matrix2<f64>,
    chol: Matrix2<f64>,
    inv: Matrix2<f64>,
    log_norm: f64,
}

impl CondComponent {
    fn new(chart: usize, offset: TangentVec2, cov: Matrix2<f64>) -> Result<Self> {
        let cov = 0.5 * (cov + cov.transpose());
        let chol = match cholesky2(&cov) {
            Some(l) => l,
            None => cholesky2(&clamp_eigen2(&cov, CONDITIONAL_EIGEN_FLOOR)).ok_or(Error::NotPositiveDefinite)?,
        };
        let cov = chol * chol.transpose();
        let det = (chol[(0, 0)] * chol[(1, 1)]).powi(2);
        let inv = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
        let log_norm = -LN_2PI - (chol[(0, 0)] * chol[(1, 1)]).ln();
        Ok(CondComponent { chart, offset, cov, chol, inv, log_norm })
    }

    pub fn offset(&self) -> &TangentVec2 {
        &self.offset
    }

    pub fn cov(&self) -> &Matrix2<f64> {
        &self.cov
    }

    fn log_tangent(&self, nu: &TangentVec2) -> f64 {
        let d = nu - self.offset;
        self.log_norm - 0.5 * d.dot(&(self.inv * d))
    }
}

/// A normalized mixture over a single direction.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionedMixture {
    charts: Vec<Chart>,
    comps: Vec<CondComponent>,
    weights: Vec<f64>,
    log_marginal: f64,
}

impl ConditionedMixture {
    /// Components are `(chart index, mean offset, covariance)`; weights may be
    /// unnormalized. `log_marginal` is carried along for callers that need the
    /// conditioning likelihood.
    pub fn from_parts(
        charts: Vec<Chart>,
        comps: Vec<(usize, TangentVec2, Matrix2<f64>)>,
        mut weights: Vec<f64>,
        log_marginal: f64,
    ) -> Result<Self> {
        if comps.is_empty() || comps.len() != weights.len() {
            return Err(Error::InvalidMixture("component/weight count mismatch".into()));
        }
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::InvalidMixture("weights must be non-negative with positive sum".into()));
        }
        weights.iter_mut().for_each(|w| *w /= sum);
        let comps = comps
            .into_iter()
            .map(|(chart, off, cov)| {
                if chart >= charts.len() {
                    return Err(Error::InvalidMixture("chart index out of range".into()));
                }
                CondComponent::new(chart, off, cov)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ConditionedMixture { charts, comps, weights, log_marginal })
    }

    /// A mixture of Gaussians centered at their chart origins.
    pub fn centered(means: &[UnitVec3], covs: &[Matrix2<f64>], weights: Vec<f64>) -> Result<Self> {
        let charts = means.iter().map(|m| Chart::new(*m)).collect();
        let comps = covs.iter().enumerate().map(|(k, c)| (k, TangentVec2::zeros(), *c)).collect();
        Self::from_parts(charts, comps, weights, 0.0)
    }

    pub fn len(&self) -> usize {
        self.comps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.comps.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[CondComponent] {
        &self.comps
    }

    pub fn chart_of(&self, k: usize) -> &Chart {
        &self.charts[self.comps[k].chart]
    }

    pub fn log_marginal(&self) -> f64 {
        self.log_marginal
    }

    /// World-space direction of component `k`'s mean, if it is inside the chart.
    pub fn component_mean(&self, k: usize) -> Result<UnitVec3> {
        self.chart_of(k).exp(&self.comps[k].offset)
    }

    /// Solid-angle density. Mass that sampling would discard is not included,
    /// so the density integrates to one minus the discard probability.
    pub fn pdf(&self, omega: &UnitVec3) -> f64 {
        let mut acc = 0.0;
        let mut cur = usize::MAX;
        let mut nu = TangentVec2::zeros();
        let mut metric = 0.0;
        for (c, w) in self.comps.iter().zip(&self.weights) {
            if c.chart != cur {
                cur = c.chart;
                match self.charts[cur].log(omega) {
                    Ok(v) => {
                        nu = v;
                        metric = 1.0 / sinc(v.norm());
                    }
                    Err(_) => metric = 0.0,
                }
            }
            if metric > 0.0 && *w > 0.0 {
                acc += w * c.log_tangent(&nu).exp() * metric;
            }
        }
        acc
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Sampled {
        let k = pick_index(&self.weights, rng.random());
        let c = &self.comps[k];
        let z = TangentVec2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        let nu = c.offset + c.chol * z;
        match self.charts[c.chart].exp(&nu) {
            Ok(d) => Sampled::Direction(d),
            Err(_) => Sampled::Discard,
        }
    }

    /// Applies `frame` to every mean and carries each covariance along with
    /// the induced change of tangent basis, so that `pdf'(R w) = pdf(w)`.
    pub fn rotate_to_frame(&self, frame: &Rotation) -> ConditionedMixture {
        let mut charts = Vec::with_capacity(self.charts.len());
        let mut qs = Vec::with_capacity(self.charts.len());
        for ch in &self.charts {
            let to = Chart::new(frame.apply(ch.mean()));
            qs.push(azimuthal_rotation(ch, frame, &to));
            charts.push(to);
        }
        let comps = self
            .comps
            .iter()
            .map(|c| {
                let q = qs[c.chart];
                let cov = q * c.cov * q.transpose();
                let chol = q * c.chol;
                // Rotating the factor keeps it a valid (non-triangular) square root.
                CondComponent {
                    chart: c.chart,
                    offset: q * c.offset,
                    cov: 0.5 * (cov + cov.transpose()),
                    chol,
                    inv: q * c.inv * q.transpose(),
                    log_norm: c.log_norm,
                }
            })
            .collect();
        ConditionedMixture { charts, comps, weights: self.weights.clone(), log_marginal: self.log_marginal }
    }

    /// Keeps the two heaviest components (lower index wins ties) and renormalizes.
    pub fn prune_top2(&self) -> ConditionedMixture {
        if self.len() <= 2 {
            return self.clone();
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.weights[b].total_cmp(&self.weights[a]).then(a.cmp(&b)));
        let mut keep = [order[0], order[1]];
        keep.sort_unstable();
        let sum = self.weights[keep[0]] + self.weights[keep[1]];
        ConditionedMixture {
            charts: self.charts.clone(),
            comps: keep.iter().map(|&k| self.comps[k].clone()).collect(),
            weights: keep.iter().map(|&k| self.weights[k] / sum).collect(),
            log_marginal: self.log_marginal,
        }
    }

    /// Approximate normalized product `self * other`.
    ///
    /// Each component of `other` is linearized into the chart of each
    /// component of `self` around its mean; the pairwise Gaussian products
    /// then live in `self`'s charts. `other` should be the smaller mixture.
    pub fn product(&self, other: &ConditionedMixture) -> Result<ConditionedMixture> {
        struct Carried {
            mean: UnitVec3,
            cov: Matrix2<f64>,
            jexp: nalgebra::Matrix3x2<f64>,
        }
        let carried: Vec<Option<Carried>> = (0..other.len())
            .map(|j| {
                let c = &other.comps[j];
                let chart = *other.chart_of(j);
                let mean = chart.exp(&c.offset).ok()?;
                let jexp = chart.jacobian_exp(&c.offset).ok()?;
                Some(Carried { mean, cov: c.cov, jexp })
            })
            .collect();

        let mut comps = Vec::with_capacity(self.len() * other.len());
        let mut logw = Vec::with_capacity(self.len() * other.len());
        for (i, a) in self.comps.iter().enumerate() {
            let chart = &self.charts[a.chart];
            for (j, b) in carried.iter().enumerate() {
                let Some(b) = b else { continue };
                if self.weights[i] <= 0.0 || other.weights[j] <= 0.0 {
                    continue;
                }
                let Ok(m) = chart.log(&b.mean) else { continue };
                let Ok(jlog) = chart.jacobian_log(&b.mean) else { continue };
                let jac = jlog * b.jexp;
                let s = jac * b.cov * jac.transpose();
                let c = a.cov + s;
                let Some(cl) = cholesky2(&c) else { continue };
                let det = (cl[(0, 0)] * cl[(1, 1)]).powi(2);
                let cinv = Matrix2::new(c[(1, 1)], -c[(0, 1)], -c[(1, 0)], c[(0, 0)]) / det;
                let d = a.offset - m;
                let lw = self.weights[i].ln() + other.weights[j].ln()
                    - LN_2PI
                    - (cl[(0, 0)] * cl[(1, 1)]).ln()
                    - 0.5 * d.dot(&(cinv * d));
                let gain = a.cov * cinv;
                let mean = a.offset + gain * (m - a.offset);
                let cov = a.cov - gain * a.cov;
                comps.push((a.chart, mean, cov));
                logw.push(lw);
            }
        }
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::EmptyProduct);
        }
        let floor = PRODUCT_PRUNE_RATIO.ln();
        let mut kept = Vec::with_capacity(comps.len());
        let mut weights = Vec::with_capacity(comps.len());
        let mut sum = 0.0;
        for (c, lw) in comps.into_iter().zip(logw) {
            if lw - max >= floor {
                let w = (lw - max).exp();
                sum += w;
                weights.push(w);
                kept.push(c);
            }
        }
        ConditionedMixture::from_parts(
            self.charts.clone(),
            kept,
            weights,
            self.log_marginal + other.log_marginal + max + sum.ln(),
        )
    }
}
