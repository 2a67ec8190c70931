//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{Matrix2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sdmm::conditioned::{ConditionedMixture, Sampled};
use sdmm::em::{em_step, EmConfig, EmState, WeightedSample};
use sdmm::gaussian::{Layout, Point, TangentGaussian};
use sdmm::geometry::{geodesic_distance, transport_jacobian, Chart, TangentVec2, UnitVec3};
use sdmm::linalg::MatD;
use sdmm::mixture::Sdmm;
use sdmm::model_init::init_kmeanspp;
use sdmm::par::Execution;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_dir(rng: &mut impl Rng) -> UnitVec3 {
    let z: f64 = rng.random_range(-1.0..1.0);
    let phi: f64 = rng.random_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).sqrt();
    UnitVec3::new_unchecked(Vector3::new(r * phi.cos(), r * phi.sin(), z))
}

pub fn cov2(a: f64, b: f64, c: f64) -> MatD {
    let mut m = MatD::identity();
    m[(0, 0)] = a;
    m[(1, 1)] = b;
    m[(0, 1)] = c;
    m[(1, 0)] = c;
    m
}

pub fn frobenius2(m: &Matrix2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Four well separated anisotropic directional components.
pub fn synthetic_truth() -> Sdmm {
    let specs = [
        ((0.0, 0.2, 1.0), (0.020, 0.008, 0.004)),
        ((1.0, 0.1, 0.1), (0.010, 0.030, -0.006)),
        ((-0.4, 1.0, -0.2), (0.015, 0.015, 0.0)),
        ((-0.3, -0.8, -0.7), (0.040, 0.012, 0.010)),
    ];
    let comps = specs
        .iter()
        .map(|(d, c)| {
            let mu = UnitVec3::from_xyz(d.0, d.1, d.2).unwrap();
            TangentGaussian::new(Layout::DIRECTIONAL, &[mu], &[], &cov2(c.0, c.1, c.2)).unwrap()
        })
        .collect();
    Sdmm::new(comps, vec![0.3, 0.25, 0.25, 0.2]).unwrap()
}

pub fn draw(m: &Sdmm, n: usize, rng: &mut impl Rng) -> Vec<WeightedSample> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        if let Ok(p) = m.sample(rng) {
            out.push(WeightedSample { point: p, weight: 1.0 });
        }
    }
    out
}

/// Runs mini-batch EM from a k-means++ start and reports, for the best
/// matching of recovered to true components, the worst mean error in
/// degrees and the worst relative Frobenius covariance error (true
/// covariance carried into the recovered chart).
pub fn em_recovery(seed: u64, cfg: &EmConfig) -> (f64, f64) {
    let truth = synthetic_truth();
    let mut r = rng(seed);
    let data = draw(&truth, 100_000, &mut r);
    let batches: Vec<&[WeightedSample]> = data.chunks(2000).collect();
    let mut m = init_kmeanspp(Layout::DIRECTIONAL, batches[0], 4, &cov2(0.1, 0.1, 0.0), &mut r).unwrap();
    let mut state = EmState::default();
    for b in &batches {
        m = em_step(&m, &mut state, b, cfg, Execution::Sequential).unwrap();
    }
    let mut best = (f64::INFINITY, f64::INFINITY);
    for perm in permutations(4) {
        let mut worst_angle: f64 = 0.0;
        let mut worst_cov: f64 = 0.0;
        for (t, &e) in perm.iter().enumerate() {
            let tc = &truth.components()[t];
            let ec = &m.components()[e];
            let ang = geodesic_distance(tc.dir_mean(0), ec.dir_mean(0)).to_degrees();
            let j = match transport_jacobian(ec.dir_mean(0), tc.dir_mean(0)) {
                Ok(j) => j,
                Err(_) => {
                    worst_angle = f64::INFINITY;
                    continue;
                }
            };
            let tcov: Matrix2<f64> = tc.cov().fixed_view::<2, 2>(0, 0).into_owned();
            let ecov: Matrix2<f64> = ec.cov().fixed_view::<2, 2>(0, 0).into_owned();
            let carried = j * tcov * j.transpose();
            worst_angle = worst_angle.max(ang);
            worst_cov = worst_cov.max(frobenius2(&(ecov - carried)) / frobenius2(&carried));
        }
        if worst_angle < best.0 {
            best = (worst_angle, worst_cov);
        }
    }
    best
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

pub fn directional_point(d: UnitVec3) -> Point {
    Point::directional(d)
}

pub fn random_cond(k: usize, var: (f64, f64), rng: &mut impl Rng) -> ConditionedMixture {
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for _ in 0..k {
        means.push(uniform_dir(rng));
        covs.push(random_cov2(var, rng));
    }
    let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
    ConditionedMixture::centered(&means, &covs, w).unwrap()
}

/// Random SPD 2x2 matrix with eigenvalues in `var`.
pub fn random_cov2(var: (f64, f64), rng: &mut impl Rng) -> Matrix2<f64> {
    let a = rng.random_range(var.0..var.1);
    let b = rng.random_range(var.0..var.1);
    let t: f64 = rng.random_range(0.0..PI);
    let r = Matrix2::new(t.cos(), -t.sin(), t.sin(), t.cos());
    r * Matrix2::new(a, 0.0, 0.0, b) * r.transpose()
}

fn spherical(theta: f64, phi: f64) -> UnitVec3 {
    UnitVec3::from_spherical(theta, phi)
}

/// Jittered stratified estimate of a sphere integral with `side * side`
/// strata in (cos theta, phi).
pub fn integrate_sphere(f: impl Fn(&UnitVec3) -> f64 + Sync, side: usize, seed: u64) -> f64 {
    use rayon::prelude::*;
    let rows: Vec<f64> = (0..side)
        .into_par_iter()
        .map(|i| {
            let mut r = rng(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut acc = 0.0;
            for j in 0..side {
                let z = -1.0 + 2.0 * (i as f64 + r.random::<f64>()) / side as f64;
                let phi = 2.0 * PI * (j as f64 + r.random::<f64>()) / side as f64;
                let s = (1.0 - z * z).max(0.0).sqrt();
                acc += f(&UnitVec3::new_unchecked(Vector3::new(s * phi.cos(), s * phi.sin(), z)));
            }
            acc
        })
        .collect();
    rows.iter().sum::<f64>() * 4.0 * PI / (side * side) as f64
}

/// Midpoint rule in geodesic polar coordinates around `center`, for
/// integrands concentrated near it.
pub fn integrate_around(center: &UnitVec3, f: impl Fn(&UnitVec3) -> f64, nr: usize, nphi: usize) -> f64 {
    let chart = Chart::new(*center);
    let dr = PI / nr as f64;
    let dphi = 2.0 * PI / nphi as f64;
    let mut acc = 0.0;
    for i in 0..nr {
        let r = (i as f64 + 0.5) * dr;
        for j in 0..nphi {
            let phi = (j as f64 + 0.5) * dphi;
            let w = chart.exp(&TangentVec2::new(r * phi.cos(), r * phi.sin())).unwrap();
            acc += f(&w) * r.sin() * dr * dphi;
        }
    }
    acc
}

pub fn discard_rate(m: &ConditionedMixture, n: usize, rng: &mut impl Rng) -> f64 {
    (0..n).filter(|_| m.sample(rng) == Sampled::Discard).count() as f64 / n as f64
}

pub const HIST_THETA: usize = 64;
pub const HIST_PHI: usize = 128;

fn cell_of(w: &UnitVec3) -> usize {
    let (theta, phi) = w.to_spherical();
    let phi = if phi < 0.0 { phi + 2.0 * PI } else { phi };
    let i = ((theta / PI * HIST_THETA as f64) as usize).min(HIST_THETA - 1);
    let j = ((phi / (2.0 * PI) * HIST_PHI as f64) as usize).min(HIST_PHI - 1);
    i * HIST_PHI + j
}

/// Chi-square goodness of fit of `n` samples against the mixture density on a
/// 64 x 128 (theta, phi) histogram. Cells expecting fewer than five samples
/// are pooled. Returns the p-value.
pub fn sphere_chi2(m: &ConditionedMixture, n: usize, rng: &mut impl Rng) -> f64 {
    use rayon::prelude::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    const SUB: usize = 6;
    let dt = PI / HIST_THETA as f64;
    let dp = 2.0 * PI / HIST_PHI as f64;
    let probs: Vec<f64> = (0..HIST_THETA * HIST_PHI)
        .into_par_iter()
        .map(|c| {
            let (i, j) = (c / HIST_PHI, c % HIST_PHI);
            let mut acc = 0.0;
            for a in 0..SUB {
                let t = (i as f64 + (a as f64 + 0.5) / SUB as f64) * dt;
                for b in 0..SUB {
                    let p = (j as f64 + (b as f64 + 0.5) / SUB as f64) * dp;
                    acc += m.pdf(&spherical(t, p)) * t.sin();
                }
            }
            acc * dt * dp / (SUB * SUB) as f64
        })
        .collect();
    let mut counts = vec![0usize; probs.len()];
    let mut accepted = 0usize;
    while accepted < n {
        if let Sampled::Direction(w) = m.sample(rng) {
            counts[cell_of(&w)] += 1;
            accepted += 1;
        }
    }
    let total: f64 = probs.iter().sum();
    let (mut stat, mut bins) = (0.0, 0usize);
    let (mut pooled_e, mut pooled_o) = (0.0, 0.0);
    for (p, o) in probs.iter().zip(&counts) {
        let e = n as f64 * p / total;
        if e < 5.0 {
            pooled_e += e;
            pooled_o += *o as f64;
        } else {
            stat += (*o as f64 - e).powi(2) / e;
            bins += 1;
        }
    }
    if pooled_e > 0.0 {
        stat += (pooled_o - pooled_e).powi(2) / pooled_e;
        bins += 1;
    }
    1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(stat)
}

/// Worst relative error of the product mixture against the normalized
/// pointwise product, over polar grid points around the true mode whose
/// density is at least `level` times the peak.
pub fn product_error(a: &ConditionedMixture, b: &ConditionedMixture, level: f64) -> f64 {
    let prod = a.product(b).unwrap();
    let f = |w: &UnitVec3| a.pdf(w) * b.pdf(w);
    // Locate the mode from the heaviest product component, then refine on a grid.
    let k = (0..prod.len()).max_by(|&i, &j| prod.weights()[i].total_cmp(&prod.weights()[j])).unwrap();
    let guess = prod.component_mean(k).unwrap();
    let z = integrate_around(&guess, f, 1500, 720);
    let chart = Chart::new(guess);
    let mut pts = Vec::new();
    let mut peak: f64 = 0.0;
    for i in 0..120 {
        let r = (i as f64 + 0.5) * 0.005;
        for j in 0..72 {
            let phi = j as f64 * 2.0 * PI / 72.0;
            let w = chart.exp(&TangentVec2::new(r * phi.cos(), r * phi.sin())).unwrap();
            let t = f(&w) / z;
            peak = peak.max(t);
            pts.push((w, t));
        }
    }
    pts.iter().filter(|(_, t)| *t >= level * peak).map(|(w, t)| (prod.pdf(w) / t - 1.0).abs()).fold(0.0, f64::max)
}

/// Worst-case errors of the chart maps over randomized charts.
#[derive(Debug, Default)]
pub struct GeometryReport {
    pub round_trip: f64,
    pub isometry: f64,
    pub jacobian_exp: f64,
    pub jacobian_log: f64,
    /// Smallest observed convergence order of the transport linearization.
    pub transport_order: f64,
    pub min_transport_det: f64,
}

fn orthonormal_to(w: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let a = if w.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let t1 = w.cross(&a).normalize();
    (t1, w.cross(&t1))
}

fn rel(a: f64, b: f64) -> f64 {
    a / b.max(1e-12)
}

pub fn geometry_suite(charts: usize, seed: u64) -> GeometryReport {
    use sdmm::geometry::{exp_map, jacobian_exp, jacobian_log, log_map};
    let mut r = rng(seed);
    let mut rep =
        GeometryReport { transport_order: f64::INFINITY, min_transport_det: f64::INFINITY, ..Default::default() };
    let h = 1e-5;
    for _ in 0..charts {
        let mu = uniform_dir(&mut r);
        for _ in 0..10 {
            let omega = uniform_dir(&mut r);
            if mu.dot(&omega) < -1.0 + 1e-6 {
                continue;
            }
            let nu = log_map(&mu, &omega).unwrap();
            let back = exp_map(&mu, &nu).unwrap();
            rep.round_trip = rep.round_trip.max((back.as_vector() - omega.as_vector()).norm());
            rep.isometry = rep.isometry.max((nu.norm() - geodesic_distance(&mu, &omega)).abs());
        }

        // Exp Jacobian against central differences in the tangent plane.
        let radius = r.random_range(0.0..0.9 * PI);
        let a: f64 = r.random_range(0.0..2.0 * PI);
        let nu = TangentVec2::new(radius * a.cos(), radius * a.sin());
        let je = jacobian_exp(&mu, &nu).unwrap();
        let mut fd = nalgebra::Matrix3x2::zeros();
        for c in 0..2 {
            let mut e = TangentVec2::zeros();
            e[c] = h;
            let d = (exp_map(&mu, &(nu + e)).unwrap().into_vector() - exp_map(&mu, &(nu - e)).unwrap().into_vector())
                / (2.0 * h);
            fd.set_column(c, &d);
        }
        rep.jacobian_exp = rep.jacobian_exp.max(rel((je - fd).norm(), je.norm()));

        // Log Jacobian along geodesics leaving omega in two tangent directions.
        let omega = exp_map(&mu, &nu).unwrap();
        let (t1, t2) = orthonormal_to(omega.as_vector());
        let jl = jacobian_log(&mu, &omega).unwrap();
        let mut fd = Matrix2::zeros();
        let mut an = Matrix2::zeros();
        for (c, t) in [t1, t2].iter().enumerate() {
            let plus = UnitVec3::new_normalize(omega.as_vector() + h * t).unwrap();
            let minus = UnitVec3::new_normalize(omega.as_vector() - h * t).unwrap();
            let d = (log_map(&mu, &plus).unwrap() - log_map(&mu, &minus).unwrap()) / (2.0 * h);
            fd.set_column(c, &d);
            an.set_column(c, &(jl * t));
        }
        rep.jacobian_log = rep.jacobian_log.max(rel((an - fd).norm(), an.norm()));

        // Transport linearization error shrinks quadratically.
        let sep = r.random_range(0.05..0.5 * PI - 0.05);
        let dir: f64 = r.random_range(0.0..2.0 * PI);
        let mu2 = exp_map(&mu, &TangentVec2::new(sep * dir.cos(), sep * dir.sin())).unwrap();
        let j = transport_jacobian(&mu, &mu2).unwrap();
        rep.min_transport_det = rep.min_transport_det.min(j.determinant());
        let b: f64 = r.random_range(0.0..2.0 * PI);
        let unit = TangentVec2::new(b.cos(), b.sin());
        let err = |s: f64| {
            let v = s * unit;
            (j * v - log_map(&mu, &exp_map(&mu2, &v).unwrap()).unwrap() + log_map(&mu, &mu2).unwrap()).norm()
        };
        let (e1, e2) = (err(0.02), err(0.01));
        if e1 > 1e-13 {
            rep.transport_order = rep.transport_order.min((e1 / e2).log2());
        }
    }
    rep
}
