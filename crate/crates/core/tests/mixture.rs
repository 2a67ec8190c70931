mod common;

use std::f64::consts::PI;

use nalgebra::Matrix2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use sdmm::conditioned::{ConditionedMixture, Sampled};
use sdmm::gaussian::{tangent_density, Layout, Point, TangentGaussian};
use sdmm::geometry::{Chart, Rotation, TangentVec2, UnitVec3};
use sdmm::linalg::{MatD, VecD};
use sdmm::mixture::Sdmm;

fn random_rotation(rng: &mut impl Rng) -> Rotation {
    let axis = common::uniform_dir(rng);
    Rotation::from_axis_angle(&axis, rng.random_range(0.0..2.0 * PI))
}

fn random_spd(dim: usize, scale: f64, rng: &mut impl Rng) -> MatD {
    let mut a = MatD::zeros();
    for i in 0..dim {
        for j in 0..dim {
            a[(i, j)] = rng.random_range(-1.0..1.0);
        }
    }
    let mut m = scale * a * a.transpose() / dim as f64;
    for i in 0..dim {
        m[(i, i)] += 0.2 * scale;
    }
    for i in dim..m.nrows() {
        m[(i, i)] = 1.0;
        for j in 0..dim {
            m[(i, j)] = 0.0;
            m[(j, i)] = 0.0;
        }
    }
    m
}

fn random_radiance(k: usize, rng: &mut impl Rng) -> Sdmm {
    let comps = (0..k)
        .map(|_| {
            let x = [rng.random(), rng.random(), rng.random()];
            TangentGaussian::new(Layout::RADIANCE, &[common::uniform_dir(rng)], &x, &random_spd(5, 0.05, rng)).unwrap()
        })
        .collect();
    Sdmm::normalized(comps, (0..k).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap()
}

#[test]
fn tangent_density_integrates_to_one() {
    // Importance-sampled from a Gaussian 20% wider than the target, so the
    // estimate does not reuse the density being checked.
    let mut rng = common::rng(1);
    let cov = random_spd(5, 0.1, &mut rng);
    let g = TangentGaussian::new(Layout::RADIANCE, &[UnitVec3::Z], &[0.5; 3], &cov).unwrap();
    let l = cov.fixed_view::<5, 5>(0, 0).into_owned().cholesky().unwrap().l();
    let s: f64 = 1.2;
    let log_norm = -2.5 * (2.0 * PI).ln() - 5.0 * s.ln() - l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let n = 1_000_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let z = nalgebra::SVector::<f64, 5>::from_fn(|_, _| StandardNormal.sample(&mut rng));
        let x = s * l * z;
        let mut nu = VecD::zeros();
        nu.fixed_rows_mut::<5>(0).copy_from(&x);
        acc += tangent_density(&g, &nu) / (log_norm - 0.5 * z.norm_squared()).exp();
    }
    let est = acc / n as f64;
    assert!((est - 1.0).abs() < 0.01, "{est}");
}

#[test]
fn directional_mixtures_integrate_to_one_minus_discard() {
    let mut rng = common::rng(2);
    for _ in 0..4 {
        let m = common::random_cond(4, (0.05, 0.8), &mut rng);
        let mass = common::integrate_sphere(|w| m.pdf(w), 2000, rng.random());
        let discard = common::discard_rate(&m, 1_000_000, &mut rng);
        assert!((mass - (1.0 - discard)).abs() < 0.01, "mass {mass} discard {discard}");
    }
}

#[test]
fn tight_components_never_discard() {
    let mut rng = common::rng(3);
    let m = ConditionedMixture::centered(&[common::uniform_dir(&mut rng)], &[Matrix2::identity() * 1e-4], vec![1.0])
        .unwrap();
    assert_eq!(common::discard_rate(&m, 1_000_000, &mut rng), 0.0);
}

#[test]
fn samples_match_density_chi_square() {
    let mut rng = common::rng(4);
    for _ in 0..3 {
        let k = rng.random_range(1..6);
        let m = common::random_cond(k, (0.01, 0.5), &mut rng);
        let p = common::sphere_chi2(&m, 1_000_000, &mut rng);
        assert!(p > 0.01, "p = {p}");
    }
}

#[test]
fn chi_square_detects_a_wrong_sampler() {
    // Octant counts from a mixture with permuted weights, against the
    // original density.
    let mut rng = common::rng(5);
    let m = common::random_cond(3, (0.02, 0.2), &mut rng);
    let mut w = m.weights().to_vec();
    w.rotate_left(1);
    let means: Vec<UnitVec3> = (0..m.len()).map(|k| m.component_mean(k).unwrap()).collect();
    let covs: Vec<Matrix2<f64>> = m.components().iter().map(|c| *c.cov()).collect();
    let wrong = ConditionedMixture::centered(&means, &covs, w).unwrap();

    let octant = |w: &UnitVec3| (w.x() > 0.0) as usize | ((w.y() > 0.0) as usize) << 1 | ((w.z() > 0.0) as usize) << 2;
    let n = 200_000;
    let mut hist = [0usize; 8];
    let mut got = 0;
    while got < n {
        if let Sampled::Direction(w) = wrong.sample(&mut rng) {
            hist[octant(&w)] += 1;
            got += 1;
        }
    }
    let total = common::integrate_sphere(|w| m.pdf(w), 1000, 7);
    let stat: f64 = (0..8)
        .map(|o| {
            let e =
                common::integrate_sphere(|w| if octant(w) == o { m.pdf(w) } else { 0.0 }, 1000, 7) / total * n as f64;
            if e > 0.0 {
                (hist[o] as f64 - e).powi(2) / e
            } else {
                0.0
            }
        })
        .sum();
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let p = 1.0 - ChiSquared::new(7.0).unwrap().cdf(stat);
    assert!(p < 1e-6, "p = {p}");
}

#[test]
fn conditioning_satisfies_bayes_identity() {
    let mut rng = common::rng(8);
    for _ in 0..20 {
        let m = random_radiance(5, &mut rng);
        let x = [rng.random(), rng.random(), rng.random()];
        let Ok(c) = m.condition(&Point::radiance(UnitVec3::Z, x)) else { continue };
        for _ in 0..25 {
            let w = common::uniform_dir(&mut rng);
            let joint = m.density(&Point::radiance(w, x));
            if joint < 1e-250 {
                continue;
            }
            let rebuilt = c.pdf(&w) * c.log_marginal().exp();
            assert!((rebuilt / joint - 1.0).abs() < 1e-6, "{rebuilt} vs {joint}");
        }
    }
}

#[test]
fn conditioning_a_directional_mixture_is_idempotent() {
    let mut rng = common::rng(9);
    let comps = (0..3)
        .map(|_| {
            TangentGaussian::new(
                Layout::DIRECTIONAL,
                &[common::uniform_dir(&mut rng)],
                &[],
                &common::cov2(0.1, 0.05, 0.01),
            )
            .unwrap()
        })
        .collect();
    let m = Sdmm::normalized(comps, vec![1.0, 2.0, 3.0]).unwrap();
    let p = Point::directional(UnitVec3::Z);
    let a = m.condition(&p).unwrap();
    let b = m.condition(&p).unwrap();
    assert_eq!(a, b);
    for _ in 0..50 {
        let w = common::uniform_dir(&mut rng);
        assert!((a.pdf(&w) - m.density(&Point::directional(w))).abs() <= 1e-12 * a.pdf(&w).max(1e-300));
    }
}

#[test]
fn rotation_preserves_density() {
    let mut rng = common::rng(10);
    for _ in 0..1000 {
        let m = common::random_cond(3, (0.01, 0.5), &mut rng);
        let r = random_rotation(&mut rng);
        let rotated = m.rotate_to_frame(&r);
        let w = common::uniform_dir(&mut rng);
        let a = m.pdf(&w);
        let b = rotated.pdf(&r.apply(&w));
        assert!((a - b).abs() <= 1e-6 * a.max(1e-12), "{a} vs {b}");
    }
}

#[test]
fn rotations_compose() {
    let mut rng = common::rng(11);
    for _ in 0..100 {
        let m = common::random_cond(4, (0.01, 0.5), &mut rng);
        let r1 = random_rotation(&mut rng);
        let r2 = random_rotation(&mut rng);
        let twice = m.rotate_to_frame(&r1).rotate_to_frame(&r2);
        let once = m.rotate_to_frame(&r2.compose(&r1));
        for _ in 0..10 {
            let w = common::uniform_dir(&mut rng);
            let (a, b) = (twice.pdf(&w), once.pdf(&w));
            assert!((a - b).abs() <= 1e-6 * a.max(1e-12));
        }
    }
}

#[test]
fn rotation_preserves_discard_rate() {
    let mut rng = common::rng(12);
    let m = common::random_cond(2, (0.6, 1.2), &mut rng);
    let r = random_rotation(&mut rng);
    let a = common::discard_rate(&m, 400_000, &mut rng);
    let b = common::discard_rate(&m.rotate_to_frame(&r), 400_000, &mut rng);
    let se = (a * (1.0 - a) / 400_000.0).sqrt();
    assert!(a > 0.0);
    assert!((a - b).abs() < 5.0 * se * 2f64.sqrt(), "{a} vs {b}");
}

#[test]
fn product_tracks_pointwise_product_near_mode() {
    let mut rng = common::rng(13);
    for _ in 0..10 {
        let center = common::uniform_dir(&mut rng);
        let chart = Chart::new(center);
        let near = |rng: &mut rand_chacha::ChaCha8Rng| {
            let a: f64 = rng.random_range(0.0..2.0 * PI);
            let r = rng.random_range(0.0..0.3);
            chart.exp(&TangentVec2::new(r * a.cos(), r * a.sin())).unwrap()
        };
        let radius2 = (0.003, 0.09);
        let a_means: Vec<UnitVec3> = (0..3).map(|_| near(&mut rng)).collect();
        let a_covs: Vec<Matrix2<f64>> = (0..3).map(|_| common::random_cov2(radius2, &mut rng)).collect();
        let b_means: Vec<UnitVec3> = (0..2).map(|_| near(&mut rng)).collect();
        let b_covs: Vec<Matrix2<f64>> = (0..2).map(|_| common::random_cov2(radius2, &mut rng)).collect();
        let a = ConditionedMixture::centered(&a_means, &a_covs, vec![0.5, 0.3, 0.2]).unwrap();
        let b = ConditionedMixture::centered(&b_means, &b_covs, vec![0.6, 0.4]).unwrap();
        let err = common::product_error(&a, &b, 0.5);
        assert!(err < 0.05, "relative error {err}");
    }
}

/// Grid search for the density maximum around each component mean.
fn argmax(m: &ConditionedMixture) -> UnitVec3 {
    let mut best = (f64::NEG_INFINITY, UnitVec3::Z);
    for k in 0..m.len() {
        let chart = Chart::new(m.component_mean(k).unwrap());
        for i in 0..100 {
            let r = i as f64 * 0.002;
            for j in 0..72 {
                let a = j as f64 * 2.0 * PI / 72.0;
                let w = chart.exp(&TangentVec2::new(r * a.cos(), r * a.sin())).unwrap();
                let p = m.pdf(&w);
                if p > best.0 {
                    best = (p, w);
                }
            }
        }
    }
    best.1
}

#[test]
fn product_with_wide_mixture_keeps_argmax() {
    // A tangent Gaussian this wide is flat in its chart; near its mean it is
    // also nearly flat per solid angle, which is where the first factor lives.
    let mut rng = common::rng(14);
    for _ in 0..10 {
        let center = common::uniform_dir(&mut rng);
        let chart = Chart::new(center);
        let means: Vec<UnitVec3> = (0..3)
            .map(|_| {
                let a: f64 = rng.random_range(0.0..2.0 * PI);
                let r = rng.random_range(0.0..0.4);
                chart.exp(&TangentVec2::new(r * a.cos(), r * a.sin())).unwrap()
            })
            .collect();
        let covs: Vec<Matrix2<f64>> = (0..3).map(|_| common::random_cov2((0.002, 0.02), &mut rng)).collect();
        let a = ConditionedMixture::centered(&means, &covs, vec![0.5, 0.3, 0.2]).unwrap();
        let wide = ConditionedMixture::centered(&[center], &[Matrix2::identity() * 1e4], vec![1.0]).unwrap();
        let prod = a.product(&wide).unwrap();
        let d = sdmm::geometry::geodesic_distance(&argmax(&a), &argmax(&prod)).to_degrees();
        assert!(d < 2.0, "{d} deg");
    }
}

#[test]
fn product_weights_are_normalized() {
    let mut rng = common::rng(15);
    for _ in 0..50 {
        let a = common::random_cond(16, (0.01, 0.3), &mut rng);
        let b = common::random_cond(2, (0.01, 0.3), &mut rng);
        if let Ok(p) = a.product(&b) {
            assert!(p.len() <= 32);
            assert!((p.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
