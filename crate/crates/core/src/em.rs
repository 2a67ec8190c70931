//! Mini-batch MAP expectation maximization for tangent-space mixtures.
//!
//! Sufficient statistics of a component are accumulated in the tangent space
//! of that component's current mean (its "center"). Averaging across batches
//! and the M-step both move statistics between charts with a first-order
//! chart-change Jacobian instead of revisiting the samples.

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::gaussian::{Layout, Point, TangentGaussian};
use crate::geometry::{chart_change_jacobian, Chart};
use crate::linalg::{MatD, VecD};
use crate::mixture::Sdmm;
use crate::par::{self, Execution};

/// Samples per parallel work item in the E-step reduction.
const CHUNK: usize = 512;

/// Component mass below which a component is treated as unobserved.
const MIN_MASS: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq)]
pub struct EmConfig {
    /// Robbins-Monro exponent.
    pub alpha: f64,
    /// Robbins-Monro rate.
    pub beta: f64,
    /// Dirichlet prior on the weights.
    pub prior_weight: f64,
    /// Inverse-Wishart degrees-of-freedom style scalar.
    pub prior_scale: f64,
    /// Inverse-Wishart scale matrix, identity-padded past the active block.
    pub prior_cov: MatD,
    /// Batches smaller than this are not used for training.
    pub min_batch: usize,
    /// Multiplies the decayed prior strength; zero gives maximum likelihood.
    pub prior_strength: f64,
}

impl EmConfig {
    /// Priors for a `k`-component mixture with the given layout: Dirichlet
    /// `1/K`, Wishart scalar `5/K` and a small diagonal scale matrix (tighter
    /// on directional dimensions).
    pub fn new(layout: Layout, k: usize) -> Self {
        let a = 5.0 / k as f64;
        let mut b = MatD::identity();
        for i in 0..layout.dim() {
            let unit = if i < layout.euclid_offset() { 0.1 } else { 1.0 };
            b[(i, i)] = a * unit * 1e-4;
        }
        EmConfig {
            alpha: 0.5,
            beta: 0.1,
            prior_weight: 1.0 / k as f64,
            prior_scale: a,
            prior_cov: b,
            min_batch: 16,
            prior_strength: 1.0,
        }
    }

    /// Same schedule without priors.
    pub fn maximum_likelihood(layout: Layout, k: usize) -> Self {
        EmConfig { prior_strength: 0.0, ..Self::new(layout, k) }
    }

    /// Robbins-Monro step size for batch `j >= 1`.
    pub fn step_size(&self, j: u64) -> f64 {
        (self.beta * j as f64 + 1.0).powf(-self.alpha)
    }
}

/// Prior strength after `j >= 1` batches.
pub fn prior_decay(j: u64) -> f64 {
    1.0 / j.max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightedSample {
    pub point: Point,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentStats {
    pub s0: f64,
    /// First moment of tangent coordinates about the center.
    pub s1: VecD,
    /// Raw second moment about the center (zero-padded).
    pub s2: MatD,
    /// Component mean the statistics are expressed around.
    pub center: Point,
}

impl ComponentStats {
    fn zero(center: Point) -> Self {
        ComponentStats { s0: 0.0, s1: VecD::zeros(), s2: MatD::zeros(), center }
    }

    fn add_scaled(&mut self, other: &ComponentStats, s: f64) {
        self.s0 += s * other.s0;
        self.s1 += s * other.s1;
        self.s2 += s * other.s2;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SufficientStats {
    pub layout: Layout,
    pub comps: Vec<ComponentStats>,
    /// Average sample weight, the normalization carried across batches.
    pub norm: f64,
    /// Number of batches folded in.
    pub batches: u64,
}

impl SufficientStats {
    pub fn total_mass(&self) -> f64 {
        self.comps.iter().map(|c| c.s0).sum()
    }
}

/// Per-sample responsibilities under the solid-angle densities of `m`.
/// Samples with zero density under every component get all zeros.
pub fn responsibilities(m: &Sdmm, p: &Point) -> Vec<f64> {
    let logs: Vec<f64> = m.components().iter().zip(m.weights()).map(|(c, w)| w.ln() + c.log_density(p)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![0.0; logs.len()];
    }
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Weighted sufficient statistics of `batch`, normalized by the total weight.
pub fn e_step(m: &Sdmm, batch: &[WeightedSample], exec: Execution) -> SufficientStats {
    let k = m.len();
    let d = m.layout().dim();
    let chunks: Vec<&[WeightedSample]> = batch.chunks(CHUNK).collect();
    let partials = par::map(exec, &chunks, |chunk| {
        let mut acc: Vec<ComponentStats> =
            m.components().iter().map(|c| ComponentStats::zero(c.mean_point())).collect();
        let mut total = 0.0;
        let mut logs = vec![0.0; k];
        let mut nus = vec![VecD::zeros(); k];
        for s in chunk.iter() {
            total += s.weight;
            if s.weight == 0.0 {
                continue;
            }
            let mut max = f64::NEG_INFINITY;
            for (j, (c, w)) in m.components().iter().zip(m.weights()).enumerate() {
                match c.tangent_coords(&s.point) {
                    Ok(nu) => {
                        logs[j] = w.ln() + c.log_tangent_density(&nu) + log_metric(c.layout(), &nu);
                        nus[j] = nu;
                    }
                    Err(_) => logs[j] = f64::NEG_INFINITY,
                }
                max = max.max(logs[j]);
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
            for j in 0..k {
                let r = (logs[j] - max).exp() / sum;
                if r == 0.0 {
                    continue;
                }
                let wr = s.weight * r;
                let a = &mut acc[j];
                a.s0 += wr;
                let nu = &nus[j];
                for p in 0..d {
                    a.s1[p] += wr * nu[p];
                    for q in 0..=p {
                        a.s2[(p, q)] += wr * nu[p] * nu[q];
                    }
                }
            }
        }
        (acc, total)
    });

    let mut comps: Vec<ComponentStats> = m.components().iter().map(|c| ComponentStats::zero(c.mean_point())).collect();
    let mut total = 0.0;
    for (acc, t) in &partials {
        total += t;
        for (c, a) in comps.iter_mut().zip(acc) {
            c.add_scaled(a, 1.0);
        }
    }
    for c in &mut comps {
        for p in 0..d {
            for q in 0..p {
                c.s2[(q, p)] = c.s2[(p, q)];
            }
        }
        if total > 0.0 {
            c.s0 /= total;
            c.s1 /= total;
            c.s2 /= total;
        } else {
            *c = ComponentStats::zero(c.center);
        }
    }
    let norm = if batch.is_empty() { 0.0 } else { total / batch.len() as f64 };
    SufficientStats { layout: m.layout(), comps, norm, batches: 1 }
}

fn log_metric(layout: Layout, nu: &VecD) -> f64 {
    let mut acc = 0.0;
    for s in 0..layout.spheres {
        let r = Vector2::new(nu[2 * s], nu[2 * s + 1]).norm();
        acc -= crate::geometry::sinc(r).ln();
    }
    acc
}

fn charts_of(layout: Layout, p: &Point) -> [Chart; 2] {
    let mut c = [Chart::new(p.dirs[0]); 2];
    if layout.spheres > 1 {
        c[1] = Chart::new(p.dirs[1]);
    }
    c
}

/// Tangent coordinates of the point at offset `nu` from `center`, expressed
/// around `to`, together with the block-diagonal chart-change Jacobian.
fn move_offset(layout: Layout, center: &Point, nu: &VecD, to: &Point) -> Result<(VecD, MatD)> {
    let from = charts_of(layout, center);
    let dest = charts_of(layout, to);
    let mut out = VecD::zeros();
    let mut jac = MatD::identity();
    for s in 0..layout.spheres {
        let v = Vector2::new(nu[2 * s], nu[2 * s + 1]);
        let omega = from[s].exp(&v)?;
        let w = dest[s].log(&omega)?;
        let j = chart_change_jacobian(&from[s], &v, &dest[s])?;
        out[2 * s] = w.x;
        out[2 * s + 1] = w.y;
        for a in 0..2 {
            for b in 0..2 {
                jac[(2 * s + a, 2 * s + b)] = j[(a, b)];
            }
        }
    }
    let off = layout.euclid_offset();
    for e in 0..layout.euclid {
        out[off + e] = center.euclid[e] + nu[off + e] - to.euclid[e];
    }
    Ok((out, jac))
}

fn outer(d: usize, a: &VecD, b: &VecD) -> MatD {
    let mut m = MatD::zeros();
    for i in 0..d {
        for j in 0..d {
            m[(i, j)] = a[i] * b[j];
        }
    }
    m
}

/// Re-expresses one component's statistics around `to`: the spread about the
/// component mean is carried by the chart-change Jacobian at that mean, the
/// mean itself is mapped exactly.
fn transport(layout: Layout, c: &ComponentStats, to: &Point) -> Option<ComponentStats> {
    let d = layout.dim();
    if c.s0 <= MIN_MASS {
        return Some(ComponentStats::zero(*to));
    }
    let m_old = c.s1 / c.s0;
    let (m_new, j) = move_offset(layout, &c.center, &m_old, to).ok()?;
    let scatter = c.s2 - c.s0 * outer(d, &m_old, &m_old);
    let s2 = j * scatter * j.transpose() + c.s0 * outer(d, &m_new, &m_new);
    let mut s2 = s2;
    crate::linalg::symmetrize(d, &mut s2);
    Some(ComponentStats { s0: c.s0, s1: c.s0 * m_new, s2, center: *to })
}

/// Robbins-Monro average of previous and fresh statistics, both weighted by
/// their normalization factors. `new` must be centered on the current means;
/// `prev` is transported there first.
pub fn rm_average(prev: Option<&SufficientStats>, new: SufficientStats, cfg: &EmConfig) -> SufficientStats {
    let Some(prev) = prev else {
        let eta = cfg.step_size(1);
        return SufficientStats { norm: eta * new.norm, batches: 1, ..new };
    };
    let j = prev.batches + 1;
    let eta = cfg.step_size(j);
    let np = (1.0 - eta) * prev.norm;
    let nn = eta * new.norm;
    let norm = np + nn;
    if !(norm > 0.0) {
        return SufficientStats { norm: 0.0, batches: j, ..new };
    }
    let comps = prev
        .comps
        .iter()
        .zip(&new.comps)
        .map(|(p, n)| {
            let mut out = ComponentStats::zero(n.center);
            if let Some(tp) = transport(new.layout, p, &n.center) {
                out.add_scaled(&tp, np / norm);
            }
            out.add_scaled(n, nn / norm);
            out
        })
        .collect();
    SufficientStats { layout: new.layout, comps, norm, batches: j }
}

/// MAP parameter update. Components without data and without a prior keep
/// their previous parameters, as do components whose update is not SPD.
pub fn m_step(m: &Sdmm, stats: &SufficientStats, cfg: &EmConfig) -> Result<Sdmm> {
    if stats.comps.len() != m.len() || stats.layout != m.layout() {
        return Err(Error::Em("statistics do not match mixture".into()));
    }
    let layout = m.layout();
    let k = m.len() as f64;
    let beta = cfg.prior_strength * prior_decay(stats.batches);
    let total = stats.total_mass();
    let denom = k * beta * cfg.prior_weight + total;

    let mut comps = Vec::with_capacity(m.len());
    let mut weights = Vec::with_capacity(m.len());
    for (j, (old, s)) in m.components().iter().zip(&stats.comps).enumerate() {
        let w = if denom > 0.0 { (beta * cfg.prior_weight + s.s0) / denom } else { m.weights()[j] };
        weights.push(w);
        let cov_denom = beta * cfg.prior_scale + s.s0;
        if !(cov_denom > MIN_MASS) {
            comps.push(old.clone());
            continue;
        }
        let mean = if s.s0 > MIN_MASS { s.s1 / s.s0 } else { VecD::zeros() };
        match update_component(layout, s, &mean, beta, cfg, cov_denom) {
            Some(c) => comps.push(c),
            None => {
                log::debug!("component {j}: covariance update not SPD, keeping previous parameters");
                comps.push(old.clone());
            }
        }
    }
    Sdmm::normalized(comps, weights)
}

fn update_component(
    layout: Layout,
    s: &ComponentStats,
    mean: &VecD,
    beta: f64,
    cfg: &EmConfig,
    cov_denom: f64,
) -> Option<TangentGaussian> {
    let d = layout.dim();
    let from = charts_of(layout, &s.center);
    let mut new_point = s.center;
    for sph in 0..layout.spheres {
        new_point.dirs[sph] = from[sph].exp(&Vector2::new(mean[2 * sph], mean[2 * sph + 1])).ok()?;
    }
    let off = layout.euclid_offset();
    for e in 0..layout.euclid {
        new_point.euclid[e] = s.center.euclid[e] + mean[off + e];
    }
    let (_, jac) = move_offset(layout, &s.center, mean, &new_point).ok()?;
    let scatter = s.s2 - s.s0 * outer(d, mean, mean);
    let mut cov = (beta * cfg.prior_cov + jac * scatter * jac.transpose()) / cov_denom;
    crate::linalg::symmetrize(d, &mut cov);
    let dirs: Vec<_> = new_point.dirs[..layout.spheres].to_vec();
    TangentGaussian::new(layout, &dirs, &new_point.euclid[..layout.euclid], &cov).ok()
}

/// Running EM state for one mixture.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmState {
    pub stats: Option<SufficientStats>,
}

impl EmState {
    pub fn batches(&self) -> u64 {
        self.stats.as_ref().map_or(0, |s| s.batches)
    }
}

/// One mini-batch EM iteration: E-step, averaging, M-step.
pub fn em_step(
    m: &Sdmm,
    state: &mut EmState,
    batch: &[WeightedSample],
    cfg: &EmConfig,
    exec: Execution,
) -> Result<Sdmm> {
    if batch.len() < cfg.min_batch {
        return Err(Error::Em(format!("batch of {} is below the minimum of {}", batch.len(), cfg.min_batch)));
    }
    let fresh = e_step(m, batch, exec);
    let averaged = rm_average(state.stats.as_ref(), fresh, cfg);
    let next = m_step(m, &averaged, cfg)?;
    state.stats = Some(averaged);
    Ok(next)
}

/// Sum of `w_i ln p(x_i)` over the batch.
pub fn weighted_log_likelihood(m: &Sdmm, batch: &[WeightedSample]) -> f64 {
    batch.iter().filter(|s| s.weight > 0.0).map(|s| s.weight * m.log_density(&s.point)).sum()
}
