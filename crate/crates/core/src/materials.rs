//! Isotropic reflectance models with built-in importance sampling.
//!
//! All directions are in the shading frame (normal along +z). Both `wo` and
//! `wi` point away from the surface.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng;

pub type Rgb = Vector3<f64>;

/// Parameter ranges the fitted BSDF models cover.
pub const ROUGHNESS_RANGE: (f64, f64) = (0.1, 0.6);
pub const SPECULAR_RANGE: (f64, f64) = (0.1, 0.9);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BsdfKind {
    Lambertian,
    /// GGX microfacet conductor. Parameter: roughness (GGX alpha).
    RoughConductor,
    /// Diffuse base under a GGX coat. Parameters: roughness, specular weight.
    GlossyPlastic,
}

impl BsdfKind {
    pub const ALL: [BsdfKind; 3] = [BsdfKind::Lambertian, BsdfKind::RoughConductor, BsdfKind::GlossyPlastic];

    pub fn name(self) -> &'static str {
        match self {
            BsdfKind::Lambertian => "lambertian",
            BsdfKind::RoughConductor => "conductor",
            BsdfKind::GlossyPlastic => "plastic",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn param_count(self) -> usize {
        self.param_ranges().len()
    }

    pub fn param_ranges(self) -> &'static [(f64, f64)] {
        match self {
            BsdfKind::Lambertian => &[],
            BsdfKind::RoughConductor => &[ROUGHNESS_RANGE],
            BsdfKind::GlossyPlastic => &[ROUGHNESS_RANGE, SPECULAR_RANGE],
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            BsdfKind::Lambertian => 0,
            BsdfKind::RoughConductor => 1,
            BsdfKind::GlossyPlastic => 2,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == t)
    }
}

/// A material instance: kind, parameters and color.
#[derive(Clone, Debug, PartialEq)]
pub struct Material {
    pub kind: BsdfKind,
    params: [f64; 2],
    /// Diffuse albedo, or specular color for conductors.
    pub color: Rgb,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BsdfSample {
    pub wi: Vector3<f64>,
    pub pdf: f64,
}

impl Material {
    /// Parameters are clamped to the fitted ranges.
    pub fn new(kind: BsdfKind, params: &[f64], color: Rgb) -> Self {
        assert_eq!(params.len(), kind.param_count(), "wrong parameter count for {}", kind.name());
        let mut p = [0.0; 2];
        for (i, (v, (lo, hi))) in params.iter().zip(kind.param_ranges()).enumerate() {
            p[i] = v.clamp(*lo, *hi);
        }
        Material { kind, params: p, color }
    }

    pub fn lambertian(albedo: Rgb) -> Self {
        Self::new(BsdfKind::Lambertian, &[], albedo)
    }

    pub fn params(&self) -> &[f64] {
        &self.params[..self.kind.param_count()]
    }

    /// Reflectance with white color, used as the fitting target.
    pub fn eval_scalar(&self, wo: &Vector3<f64>, wi: &Vector3<f64>) -> f64 {
        self.eval_parts(wo, wi).map_or(0.0, |(d, s)| d + s)
    }

    pub fn eval(&self, wo: &Vector3<f64>, wi: &Vector3<f64>) -> Rgb {
        let Some((diffuse, spec)) = self.eval_parts(wo, wi) else { return Rgb::zeros() };
        match self.kind {
            BsdfKind::Lambertian => self.color * diffuse,
            BsdfKind::RoughConductor => schlick(&self.color, wo.dot(&half_vector(wo, wi))) * spec,
            BsdfKind::GlossyPlastic => self.color * diffuse + Rgb::repeat(spec),
        }
    }

    /// Diffuse and specular scalar parts; `None` below the horizon.
    fn eval_parts(&self, wo: &Vector3<f64>, wi: &Vector3<f64>) -> Option<(f64, f64)> {
        if wo.z <= 0.0 || wi.z <= 0.0 {
            return None;
        }
        Some(match self.kind {
            BsdfKind::Lambertian => (1.0 / PI, 0.0),
            BsdfKind::RoughConductor => (0.0, ggx_reflection(self.params[0], wo, wi)),
            BsdfKind::GlossyPlastic => {
                let ks = self.params[1];
                ((1.0 - ks) / PI, ks * ggx_reflection(self.params[0], wo, wi))
            }
        })
    }

    pub fn pdf(&self, wo: &Vector3<f64>, wi: &Vector3<f64>) -> f64 {
        if wo.z <= 0.0 || wi.z <= 0.0 {
            return 0.0;
        }
        match self.kind {
            BsdfKind::Lambertian => wi.z / PI,
            BsdfKind::RoughConductor => ggx_pdf(self.params[0], wo, wi),
            BsdfKind::GlossyPlastic => {
                let ks = self.params[1];
                ks * ggx_pdf(self.params[0], wo, wi) + (1.0 - ks) * wi.z / PI
            }
        }
    }

    /// Draws `wi`; `None` when the sample leaves the upper hemisphere, which
    /// is a zero-valued outcome of the same density.
    pub fn sample<R: Rng + ?Sized>(&self, wo: &Vector3<f64>, rng: &mut R) -> Option<BsdfSample> {
        if wo.z <= 0.0 {
            return None;
        }
        let u: [f64; 2] = [rng.random(), rng.random()];
        let wi = match self.kind {
            BsdfKind::Lambertian => cosine_hemisphere(u),
            BsdfKind::RoughConductor => ggx_sample(self.params[0], wo, u),
            BsdfKind::GlossyPlastic => {
                if rng.random::<f64>() < self.params[1] {
                    ggx_sample(self.params[0], wo, u)
                } else {
                    cosine_hemisphere(u)
                }
            }
        };
        if wi.z <= 0.0 {
            return None;
        }
        Some(BsdfSample { wi, pdf: self.pdf(wo, &wi) })
    }
}

pub fn cosine_hemisphere(u: [f64; 2]) -> Vector3<f64> {
    let r = u[0].sqrt();
    let phi = 2.0 * PI * u[1];
    Vector3::new(r * phi.cos(), r * phi.sin(), (1.0 - u[0]).max(0.0).sqrt())
}

fn half_vector(wo: &Vector3<f64>, wi: &Vector3<f64>) -> Vector3<f64> {
    (wo + wi).normalize()
}

fn schlick(f0: &Rgb, cos: f64) -> Rgb {
    let m = (1.0 - cos.clamp(0.0, 1.0)).powi(5);
    f0 + (Rgb::repeat(1.0) - f0) * m
}

pub fn ggx_d(alpha: f64, cos_h: f64) -> f64 {
    if cos_h <= 0.0 {
        return 0.0;
    }
    let a2 = alpha * alpha;
    let t = cos_h * cos_h * (a2 - 1.0) + 1.0;
    a2 / (PI * t * t)
}

fn smith_g1(alpha: f64, cos: f64) -> f64 {
    let a2 = alpha * alpha;
    2.0 * cos / (cos + (a2 + (1.0 - a2) * cos * cos).sqrt())
}

/// Microfacet reflection term without Fresnel.
fn ggx_reflection(alpha: f64, wo: &Vector3<f64>, wi: &Vector3<f64>) -> f64 {
    let h = half_vector(wo, wi);
    ggx_d(alpha, h.z) * smith_g1(alpha, wo.z) * smith_g1(alpha, wi.z) / (4.0 * wo.z * wi.z)
}

fn ggx_pdf(alpha: f64, wo: &Vector3<f64>, wi: &Vector3<f64>) -> f64 {
    let h = half_vector(wo, wi);
    let oh = wo.dot(&h);
    if oh <= 0.0 {
        return 0.0;
    }
    ggx_d(alpha, h.z) * h.z / (4.0 * oh)
}

/// Half vector drawn from `D(h) cos(theta_h)`, reflected about it.
fn ggx_sample(alpha: f64, wo: &Vector3<f64>, u: [f64; 2]) -> Vector3<f64> {
    let tan2 = alpha * alpha * u[0] / (1.0 - u[0]).max(1e-300);
    let cos = 1.0 / (1.0 + tan2).sqrt();
    let sin = (1.0 - cos * cos).max(0.0).sqrt();
    let phi = 2.0 * PI * u[1];
    let h = Vector3::new(sin * phi.cos(), sin * phi.sin(), cos);
    2.0 * wo.dot(&h) * h - wo
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameters_are_clamped() {
        let m = Material::new(BsdfKind::RoughConductor, &[2.0], Rgb::repeat(1.0));
        assert_eq!(m.params(), &[0.6]);
    }

    #[test]
    fn ggx_distribution_is_normalized() {
        // Integral of D(h) cos(theta_h) over the hemisphere is one.
        let alpha = 0.3;
        let n = 4000;
        let mut acc = 0.0;
        for i in 0..n {
            let theta = (i as f64 + 0.5) / n as f64 * PI / 2.0;
            acc += ggx_d(alpha, theta.cos()) * theta.cos() * theta.sin() * 2.0 * PI * (PI / 2.0 / n as f64);
        }
        assert!((acc - 1.0).abs() < 1e-4, "{acc}");
    }

    #[test]
    fn sampled_pdf_matches_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let wo = Vector3::new(0.5, 0.1, 0.8).normalize();
        for kind in BsdfKind::ALL {
            let params: Vec<f64> = kind.param_ranges().iter().map(|r| 0.5 * (r.0 + r.1)).collect();
            let m = Material::new(kind, &params, Rgb::repeat(0.8));
            for _ in 0..100 {
                if let Some(s) = m.sample(&wo, &mut rng) {
                    assert!((s.pdf - m.pdf(&wo, &s.wi)).abs() <= 1e-12 * s.pdf);
                    assert!(s.pdf > 0.0);
                }
            }
        }
    }
}
