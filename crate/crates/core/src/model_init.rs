//! Initial mixtures for freshly observed leaves and for offline fits.

use std::sync::OnceLock;

use nalgebra::Vector3;
use rand::Rng;
use statrs::function::erf::erf;

use crate::em::WeightedSample;
use crate::error::{Error, Result};
use crate::gaussian::{Layout, Point, TangentGaussian};
use crate::geometry::{geodesic_distance, UnitVec3};
use crate::linalg::MatD;
use crate::mixture::Sdmm;

#[derive(Clone, Debug, PartialEq)]
pub struct InitConfig {
    /// Normal-angle radius (radians) of the poisson-disk rejection.
    pub t_n: f64,
    /// Spatial radius of the poisson-disk rejection.
    pub t_x: f64,
    /// Weight clamp used when resampling seeds.
    pub w_min: f64,
    pub w_max: f64,
    /// 90%-mass radius along the surface normal.
    pub r_n: f64,
    pub spatial_seeds: usize,
    pub directional_seeds: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig { t_n: 0.2, t_x: 1.6e-3, w_min: 0.1, w_max: 3.0, r_n: 3e-2, spatial_seeds: 2, directional_seeds: 8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeedPoint {
    pub position: [f64; 3],
    pub normal: UnitVec3,
    pub weight: f64,
}

fn position_distance(a: &SeedPoint, b: &SeedPoint) -> f64 {
    let dx = Vector3::from(a.position) - Vector3::from(b.position);
    dx.norm()
}

/// Seed distance: Euclidean distance extended by the normalized angle between
/// normals, zeroed when both the positions and the normals are close.
pub fn seed_distance(a: &SeedPoint, b: &SeedPoint, cfg: &InitConfig) -> f64 {
    let spatial = position_distance(a, b);
    let angle = geodesic_distance(&a.normal, &b.normal);
    if spatial <= cfg.t_x && angle <= cfg.t_n {
        return 0.0;
    }
    ((angle / std::f64::consts::PI).powi(2) + spatial * spatial).sqrt()
}

fn sample_proportional<R: Rng + ?Sized>(scores: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = scores.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, s) in scores.iter().enumerate() {
        acc += s;
        if u < acc {
            return Some(i);
        }
    }
    scores.iter().rposition(|s| *s > 0.0)
}

/// Picks `cfg.spatial_seeds` seed indices with the weighted k-means++ rule.
/// When every remaining candidate is at zero distance the first seed is reused.
pub fn seed_positions<R: Rng + ?Sized>(points: &[SeedPoint], cfg: &InitConfig, rng: &mut R) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::InvalidMixture("no seed points".into()));
    }
    let clamped: Vec<f64> = points.iter().map(|p| p.weight.clamp(cfg.w_min, cfg.w_max)).collect();
    let first = sample_proportional(&clamped, rng).unwrap_or(0);
    let mut chosen = vec![first];
    let mut nearest: Vec<f64> = points.iter().map(|p| seed_distance(p, &points[first], cfg)).collect();
    while chosen.len() < cfg.spatial_seeds {
        let scores: Vec<f64> = clamped.iter().zip(&nearest).map(|(w, d)| w * d).collect();
        let next = sample_proportional(&scores, rng).unwrap_or(first);
        chosen.push(next);
        for (n, p) in nearest.iter_mut().zip(points) {
            *n = n.min(seed_distance(p, &points[next], cfg));
        }
    }
    Ok(chosen)
}

/// Regularized lower incomplete gamma CDF of the chi-square law with three
/// degrees of freedom.
fn chi2_3_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    erf((x / 2.0).sqrt()) - (2.0 * x / std::f64::consts::PI).sqrt() * (-x / 2.0).exp()
}

/// Inverse CDF of the chi-square law with three degrees of freedom.
pub fn chi2_3_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0);
    let (mut lo, mut hi) = (0.0, 1.0);
    while chi2_3_cdf(hi) < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_3_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn chi2_3_q90() -> f64 {
    static Q: OnceLock<f64> = OnceLock::new();
    *Q.get_or_init(|| chi2_3_quantile(0.9))
}

/// An orthonormal tangent pair `(s, t)` completing `n`.
pub fn tangent_frame(n: &UnitVec3) -> (Vector3<f64>, Vector3<f64>) {
    let n = n.as_vector();
    // Branchless orthonormal basis; stable for every normal including -z.
    let sign = 1.0f64.copysign(n.z);
    let a = -1.0 / (sign + n.z);
    let b = n.x * n.y * a;
    let s = Vector3::new(1.0 + sign * n.x * n.x * a, sign * b, -sign * n.x);
    let t = Vector3::new(b, sign + n.y * n.y * a, -n.y);
    (s, t)
}

/// Initial 5D covariance: isotropic directional block, spatial block that is
/// disk-shaped in the surface plane with 90% of its mass inside the radii.
pub fn init_covariance(normal: &UnitVec3, leaf_extent: f64, cfg: &InitConfig) -> MatD {
    let r_st = 2.0 * leaf_extent / cfg.spatial_seeds as f64;
    let (s, t) = tangent_frame(normal);
    let n = normal.as_vector();
    let spatial =
        (r_st * r_st * (s * s.transpose() + t * t.transpose()) + cfg.r_n * cfg.r_n * n * n.transpose()) / chi2_3_q90();
    let mut cov = MatD::identity();
    let dir_var = 2.0 * std::f64::consts::PI / cfg.directional_seeds as f64;
    cov[(0, 0)] = dir_var;
    cov[(1, 1)] = dir_var;
    for i in 0..3 {
        for j in 0..3 {
            cov[(2 + i, 2 + j)] = spatial[(i, j)];
        }
    }
    cov
}

/// The eight vertices of the cube inscribed in the unit sphere.
pub fn canonical_directions() -> [UnitVec3; 8] {
    let c = 1.0 / 3f64.sqrt();
    let mut out = [UnitVec3::Z; 8];
    for (i, d) in out.iter_mut().enumerate() {
        let sx = if i & 1 == 0 { c } else { -c };
        let sy = if i & 2 == 0 { c } else { -c };
        let sz = if i & 4 == 0 { c } else { -c };
        *d = UnitVec3::new_unchecked(Vector3::new(sx, sy, sz));
    }
    out
}

/// Sixteen-component radiance mixture: two seeded positions times eight
/// canonical directions, uniform weights.
pub fn init_leaf_mixture<R: Rng + ?Sized>(
    points: &[SeedPoint],
    leaf_extent: f64,
    cfg: &InitConfig,
    rng: &mut R,
) -> Result<Sdmm> {
    if cfg.directional_seeds != 8 {
        return Err(Error::InvalidMixture("only the 8-direction canonical set is available".into()));
    }
    let seeds = seed_positions(points, cfg, rng)?;
    let dirs = canonical_directions();
    let mut comps = Vec::with_capacity(seeds.len() * dirs.len());
    for &i in &seeds {
        let p = &points[i];
        let cov = init_covariance(&p.normal, leaf_extent, cfg);
        for d in &dirs {
            comps.push(TangentGaussian::new(Layout::RADIANCE, &[*d], &p.position, &cov)?);
        }
    }
    let n = comps.len();
    Sdmm::normalized(comps, vec![1.0; n])
}

fn point_distance_sq(layout: Layout, a: &Point, b: &Point) -> f64 {
    let mut d = 0.0;
    for s in 0..layout.spheres {
        d += geodesic_distance(&a.dirs[s], &b.dirs[s]).powi(2);
    }
    for e in 0..layout.euclid {
        d += (a.euclid[e] - b.euclid[e]).powi(2);
    }
    d
}

/// Weighted greedy k-means++ seeding on the product manifold: each new
/// center is the best of a few candidates drawn by the k-means++ rule, judged
/// by the weighted potential it leaves behind. Every component gets `cov`.
pub fn init_kmeanspp<R: Rng + ?Sized>(
    layout: Layout,
    samples: &[WeightedSample],
    k: usize,
    cov: &MatD,
    rng: &mut R,
) -> Result<Sdmm> {
    if samples.is_empty() || k == 0 {
        return Err(Error::InvalidMixture("k-means++ needs samples and k > 0".into()));
    }
    let trials = 2 + (k as f64).ln().floor() as usize;
    let weights: Vec<f64> = samples.iter().map(|s| s.weight.max(0.0)).collect();
    let first = sample_proportional(&weights, rng).unwrap_or(0);
    let mut centers = vec![samples[first].point];
    let mut nearest: Vec<f64> = samples.iter().map(|s| point_distance_sq(layout, &s.point, &centers[0])).collect();
    while centers.len() < k {
        let scores: Vec<f64> = weights.iter().zip(&nearest).map(|(w, d)| w * d).collect();
        let mut best: Option<(f64, Vec<f64>, usize)> = None;
        for _ in 0..trials {
            let cand = sample_proportional(&scores, rng).unwrap_or(first);
            let c = samples[cand].point;
            let updated: Vec<f64> =
                nearest.iter().zip(samples).map(|(n, s)| n.min(point_distance_sq(layout, &s.point, &c))).collect();
            let potential: f64 = updated.iter().zip(&weights).map(|(d, w)| d * w).sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, updated, cand));
            }
        }
        let (_, updated, idx) = best.expect("at least one trial");
        nearest = updated;
        centers.push(samples[idx].point);
    }
    let comps = centers
        .iter()
        .map(|c| TangentGaussian::new(layout, &c.dirs[..layout.spheres], &c.euclid[..layout.euclid], cov))
        .collect::<Result<Vec<_>>>()?;
    Sdmm::normalized(comps, vec![1.0; k])
}
