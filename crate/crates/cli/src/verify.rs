//! Self checks that need no rendering: chart geometry, EM recovery of a
//! known mixture and density normalization.

use std::f64::consts::PI;

use anyhow::bail;
use nalgebra::{Matrix2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdmm::conditioned::{ConditionedMixture, Sampled};
use sdmm::em::{em_step, EmConfig, EmState, WeightedSample};
use sdmm::gaussian::{Layout, TangentGaussian};
use sdmm::geometry::{exp_map, geodesic_distance, jacobian_exp, log_map, transport_jacobian, TangentVec2, UnitVec3};
use sdmm::linalg::MatD;
use sdmm::mixture::Sdmm;
use sdmm::model_init::init_kmeanspp;
use sdmm::par::Execution;

fn uniform_dir(rng: &mut impl Rng) -> UnitVec3 {
    let z: f64 = rng.random_range(-1.0..1.0);
    let phi: f64 = rng.random_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).sqrt();
    UnitVec3::new_unchecked(Vector3::new(r * phi.cos(), r * phi.sin(), z))
}

fn cov2(a: f64, b: f64, c: f64) -> MatD {
    let mut m = MatD::identity();
    m[(0, 0)] = a;
    m[(1, 1)] = b;
    m[(0, 1)] = c;
    m[(1, 0)] = c;
    m
}

struct Check {
    name: &'static str,
    value: f64,
    limit: f64,
}

impl Check {
    fn passed(&self) -> bool {
        self.value < self.limit
    }
}

/// Worst round-trip, isometry and exp-Jacobian errors over random charts.
fn geometry(rng: &mut ChaCha8Rng) -> anyhow::Result<Vec<Check>> {
    let (mut round, mut iso, mut jac) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let mu = uniform_dir(rng);
        for _ in 0..10 {
            let omega = uniform_dir(rng);
            if mu.dot(&omega) < -1.0 + 1e-6 {
                continue;
            }
            let nu = log_map(&mu, &omega)?;
            let back = exp_map(&mu, &nu)?;
            round = round.max((back.as_vector() - omega.as_vector()).norm());
            iso = iso.max((nu.norm() - geodesic_distance(&mu, &omega)).abs());
        }
        let r: f64 = rng.random_range(0.0..2.5);
        let a: f64 = rng.random_range(0.0..2.0 * PI);
        let nu = TangentVec2::new(r * a.cos(), r * a.sin());
        let j = jacobian_exp(&mu, &nu)?;
        let h = 1e-5;
        for c in 0..2 {
            let mut d = TangentVec2::zeros();
            d[c] = h;
            let fd = (exp_map(&mu, &(nu + d))?.into_vector() - exp_map(&mu, &(nu - d))?.into_vector()) / (2.0 * h);
            jac = jac.max((fd - j.column(c)).norm() / fd.norm().max(1e-12));
        }
    }
    Ok(vec![
        Check { name: "log/exp round trip", value: round, limit: 1e-6 },
        Check { name: "geodesic isometry", value: iso, limit: 1e-7 },
        Check { name: "exp Jacobian vs finite differences", value: jac, limit: 1e-4 },
    ])
}

/// Fits four components to samples of a known directional mixture.
fn em_recovery(rng: &mut ChaCha8Rng) -> anyhow::Result<Vec<Check>> {
    let specs = [
        ((0.0, 0.2, 1.0), (0.020, 0.008, 0.004)),
        ((1.0, 0.1, 0.1), (0.010, 0.030, -0.006)),
        ((-0.4, 1.0, -0.2), (0.015, 0.015, 0.0)),
        ((-0.3, -0.8, -0.7), (0.040, 0.012, 0.010)),
    ];
    let mut comps = Vec::new();
    for (d, c) in specs {
        let Some(mu) = UnitVec3::from_xyz(d.0, d.1, d.2) else { bail!("degenerate mean") };
        comps.push(TangentGaussian::new(Layout::DIRECTIONAL, &[mu], &[], &cov2(c.0, c.1, c.2))?);
    }
    let truth = Sdmm::new(comps, vec![0.3, 0.25, 0.25, 0.2])?;
    let mut data = Vec::with_capacity(100_000);
    while data.len() < 100_000 {
        if let Ok(point) = truth.sample(rng) {
            data.push(WeightedSample { point, weight: 1.0 });
        }
    }
    let cfg = EmConfig::maximum_likelihood(Layout::DIRECTIONAL, 4);
    let mut m = init_kmeanspp(Layout::DIRECTIONAL, &data[..2000], 4, &cov2(0.1, 0.1, 0.0), rng)?;
    let mut state = EmState::default();
    for batch in data.chunks(2000) {
        m = em_step(&m, &mut state, batch, &cfg, Execution::Sequential)?;
    }
    // Greedy nearest matching; the components are far apart.
    let (mut angle, mut cov) = (0.0f64, 0.0f64);
    for t in truth.components() {
        let e = m
            .components()
            .iter()
            .min_by(|a, b| {
                geodesic_distance(a.dir_mean(0), t.dir_mean(0))
                    .total_cmp(&geodesic_distance(b.dir_mean(0), t.dir_mean(0)))
            })
            .expect("four components");
        angle = angle.max(geodesic_distance(e.dir_mean(0), t.dir_mean(0)).to_degrees());
        let j = transport_jacobian(e.dir_mean(0), t.dir_mean(0))?;
        let tc: Matrix2<f64> = t.cov().fixed_view::<2, 2>(0, 0).into_owned();
        let ec: Matrix2<f64> = e.cov().fixed_view::<2, 2>(0, 0).into_owned();
        let carried = j * tc * j.transpose();
        cov = cov.max((ec - carried).norm() / carried.norm());
    }
    Ok(vec![
        Check { name: "EM recovery mean error (deg)", value: angle, limit: 2.0 },
        Check { name: "EM recovery covariance error", value: cov, limit: 0.1 },
    ])
}

/// Uniform MC integral of random mixtures against one minus their discard mass.
fn normalization(rng: &mut ChaCha8Rng) -> anyhow::Result<Vec<Check>> {
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let k = rng.random_range(1..=8);
        let means: Vec<UnitVec3> = (0..k).map(|_| uniform_dir(rng)).collect();
        let covs: Vec<Matrix2<f64>> = (0..k)
            .map(|_| {
                let (a, b): (f64, f64) = (rng.random_range(0.02..0.5), rng.random_range(0.02..0.5));
                let rho: f64 = rng.random_range(-0.5..0.5);
                let c = rho * (a * b).sqrt();
                Matrix2::new(a, c, c, b)
            })
            .collect();
        let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let m = ConditionedMixture::centered(&means, &covs, weights.iter().map(|w| w / total).collect())?;
        let n = 1_000_000;
        let integral = (0..n).map(|_| m.pdf(&uniform_dir(rng))).sum::<f64>() * 4.0 * PI / n as f64;
        let discards = (0..n).filter(|_| matches!(m.sample(rng), Sampled::Discard)).count() as f64 / n as f64;
        worst = worst.max((integral - (1.0 - discards)).abs());
    }
    Ok(vec![Check { name: "density integrates to 1 - discard", value: worst, limit: 0.01 }])
}

pub fn run() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checks = geometry(&mut rng)?;
    checks.extend(em_recovery(&mut rng)?);
    checks.extend(normalization(&mut rng)?);
    let mut failed = 0;
    for c in &checks {
        let tag = if c.passed() { "PASS" } else { "FAIL" };
        println!("{tag} {:<40} {:.3e} (limit {:.1e})", c.name, c.value, c.limit);
        failed += usize::from(!c.passed());
    }
    if failed > 0 {
        bail!("{failed} of {} checks failed", checks.len());
    }
    Ok(())
}
