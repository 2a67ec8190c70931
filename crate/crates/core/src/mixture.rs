//! Weighted mixtures of tangent-space Gaussians.

use rand::Rng;

use crate::conditioned::ConditionedMixture;
use crate::error::{Error, Result};
use crate::gaussian::{Layout, Point, TangentGaussian};
use crate::geometry::UnitVec3;

/// Conditional weights whose largest log value falls below this are
/// considered to have vanished.
pub const LOG_WEIGHT_FLOOR: f64 = -690.775_527_898_213_7; // ln(1e-300)

#[derive(Clone, Debug, PartialEq)]
pub struct Sdmm {
    layout: Layout,
    components: Vec<TangentGaussian>,
    weights: Vec<f64>,
}

impl Sdmm {
    /// Weights must be non-negative and sum to one within 1e-9; they are
    /// stored as given.
    pub fn new(components: Vec<TangentGaussian>, weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidMixture(format!("weights sum to {sum}")));
        }
        let mut m = Self::normalized(components, weights.clone())?;
        m.weights = weights;
        Ok(m)
    }

    /// Like [`Sdmm::new`] but accepts any positive weight total.
    pub fn normalized(components: Vec<TangentGaussian>, mut weights: Vec<f64>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::InvalidMixture("no components".into()));
        };
        let layout = first.layout();
        if components.iter().any(|c| c.layout() != layout) {
            return Err(Error::InvalidMixture("components disagree on layout".into()));
        }
        if weights.len() != components.len() {
            return Err(Error::DimensionMismatch { expected: components.len(), got: weights.len() });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidMixture("weights must be finite and non-negative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::InvalidMixture("weights sum to zero".into()));
        }
        weights.iter_mut().for_each(|w| *w /= sum);
        Ok(Sdmm { layout, components, weights })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[TangentGaussian] {
        &self.components
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_parts(self) -> (Vec<TangentGaussian>, Vec<f64>) {
        (self.components, self.weights)
    }

    /// Log of the joint density (solid angle on spheres, Lebesgue on the rest).
    pub fn log_density(&self, p: &Point) -> f64 {
        let mut logs = [0.0f64; 64];
        let mut max = f64::NEG_INFINITY;
        let mut acc = 0.0;
        // Small mixtures take the single-pass stack path.
        if self.len() <= logs.len() {
            for (k, (c, w)) in self.components.iter().zip(&self.weights).enumerate() {
                logs[k] = w.ln() + c.log_density(p);
                max = max.max(logs[k]);
            }
            if max == f64::NEG_INFINITY {
                return max;
            }
            for l in &logs[..self.len()] {
                acc += (l - max).exp();
            }
            return max + acc.ln();
        }
        let logs: Vec<f64> =
            self.components.iter().zip(&self.weights).map(|(c, w)| w.ln() + c.log_density(p)).collect();
        log_sum_exp(&logs)
    }

    pub fn density(&self, p: &Point) -> f64 {
        self.log_density(p).exp()
    }

    /// Density at direction `omega` and Euclidean coordinates `x`.
    pub fn solid_angle_density(&self, omega: &UnitVec3, x: &[f64]) -> f64 {
        let mut p = Point::directional(*omega);
        p.euclid[..x.len()].copy_from_slice(x);
        self.density(&p)
    }

    /// Index of the component selected by a uniform variate `u` in `[0, 1)`.
    pub fn pick(&self, u: f64) -> usize {
        pick_index(&self.weights, u)
    }

    /// Draws from the joint; `Err(OutOfChart)` is a discard.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Point> {
        let k = self.pick(rng.random());
        self.components[k].sample(rng)
    }

    /// Conditions the mixture on every coordinate except the sphere-0
    /// direction. A purely directional mixture is returned unchanged.
    pub fn condition(&self, given: &Point) -> Result<ConditionedMixture> {
        let mut parts = Vec::with_capacity(self.len());
        let mut max = f64::NEG_INFINITY;
        for (c, w) in self.components.iter().zip(&self.weights) {
            match c.condition(given) {
                Ok((ll, offset, cov)) => {
                    let lw = w.ln() + ll;
                    max = max.max(lw);
                    parts.push((lw, offset, cov));
                }
                Err(_) => {
                    parts.push((f64::NEG_INFINITY, Default::default(), c.cov().fixed_view::<2, 2>(0, 0).into_owned()))
                }
            }
        }
        if !(max >= LOG_WEIGHT_FLOOR) {
            return Err(Error::EmptyConditional);
        }
        let mut sum = 0.0;
        let weights: Vec<f64> = parts
            .iter()
            .map(|(lw, _, _)| {
                let w = (lw - max).exp();
                sum += w;
                w
            })
            .collect();
        let charts = self.components.iter().map(|c| *c.chart(0)).collect();
        let comps = parts.into_iter().enumerate().map(|(k, (_, off, cov))| (k, off, cov)).collect::<Vec<_>>();
        ConditionedMixture::from_parts(charts, comps, weights, max + sum.ln())
    }
}

/// Numerically stable `ln sum exp`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Inverse-CDF selection over normalized weights.
pub(crate) fn pick_index(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    // Rounding can leave the cumulative sum just below u; take the last live one.
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(weights.len() - 1)
}
