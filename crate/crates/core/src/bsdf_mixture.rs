//! Offline mixture fits of the built-in BSDFs over incident direction,
//! outgoing direction and parameters, conditioned per shading point.
//!
//! Model blob layout:
//!
//! ```text
//! "SDBM" | version u32 | kind u8 | P u32 | P x { min f64 | max f64 } | mixture blob
//! ```

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditioned::ConditionedMixture;
use crate::em::{em_step, EmConfig, EmState, WeightedSample};
use crate::error::{Error, Result};
use crate::gaussian::{Layout, Point};
use crate::geometry::UnitVec3;
use crate::linalg::MatD;
use crate::materials::{BsdfKind, Material, Rgb};
use crate::mixture::Sdmm;
use crate::model_init::init_kmeanspp;
use crate::par::Execution;
use crate::serialize::{self, Reader, Writer};

pub const MODEL_MAGIC: &[u8; 4] = b"SDBM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub components: usize,
    pub batches: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { components: 16, batches: 256, batch_size: 4096, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BsdfModel {
    kind: BsdfKind,
    ranges: Vec<(f64, f64)>,
    mixture: Sdmm,
}

/// Outgoing direction uniform in (theta, phi) over the upper hemisphere.
fn sample_outgoing<R: Rng + ?Sized>(rng: &mut R) -> UnitVec3 {
    let theta = rng.random::<f64>() * 0.5 * PI;
    let phi = rng.random::<f64>() * 2.0 * PI;
    UnitVec3::from_spherical(theta, phi)
}

fn draw_batch<R: Rng + ?Sized>(kind: BsdfKind, n: usize, rng: &mut R) -> Vec<WeightedSample> {
    let ranges = kind.param_ranges();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let params: Vec<f64> = ranges.iter().map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>()).collect();
        let m = Material::new(kind, &params, Rgb::repeat(1.0));
        let wo = sample_outgoing(rng);
        let wov = *wo.as_vector();
        let Some(s) = m.sample(&wov, rng) else { continue };
        let weight = m.eval_scalar(&wov, &s.wi) * s.wi.z / s.pdf;
        if !weight.is_finite() {
            continue;
        }
        let Some(wi) = UnitVec3::new_normalize(s.wi) else { continue };
        out.push(WeightedSample { point: Point::bsdf(wi, wo, &params), weight });
    }
    out
}

/// Mini-batch EM fit of `f_s cos` for one BSDF kind.
pub fn fit_bsdf(kind: BsdfKind, cfg: &FitConfig) -> Result<BsdfModel> {
    let layout = Layout::bsdf(kind.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let first = draw_batch(kind, cfg.batch_size, &mut rng);

    let mut cov = MatD::identity();
    for i in 0..layout.euclid_offset() {
        cov[(i, i)] = 0.1;
    }
    for (p, (lo, hi)) in kind.param_ranges().iter().enumerate() {
        let i = layout.euclid_offset() + p;
        cov[(i, i)] = ((hi - lo) / 4.0).powi(2);
    }
    let mut m = init_kmeanspp(layout, &first, cfg.components, &cov, &mut rng)?;

    // The radiance priors starve overlapping components of a smooth lobe;
    // offline fits see enough samples to go without them.
    let em = EmConfig::maximum_likelihood(layout, cfg.components);
    let mut state = EmState::default();
    let mut batch = first;
    for b in 0..cfg.batches {
        if b > 0 {
            batch = draw_batch(kind, cfg.batch_size, &mut rng);
        }
        m = em_step(&m, &mut state, &batch, &em, Execution::Sequential)
            .map_err(|e| Error::Em(format!("{} fit failed at batch {b}: {e}", kind.name())))?;
    }
    Ok(BsdfModel { kind, ranges: kind.param_ranges().to_vec(), mixture: m })
}

impl BsdfModel {
    pub fn new(kind: BsdfKind, mixture: Sdmm) -> Result<Self> {
        if mixture.layout() != Layout::bsdf(kind.param_count()) {
            return Err(Error::InvalidMixture(format!("mixture layout does not match {}", kind.name())));
        }
        Ok(BsdfModel { kind, ranges: kind.param_ranges().to_vec(), mixture })
    }

    pub fn kind(&self) -> BsdfKind {
        self.kind
    }

    pub fn ranges(&self) -> &[(f64, f64)] {
        &self.ranges
    }

    pub fn mixture(&self) -> &Sdmm {
        &self.mixture
    }

    /// Distribution of the incident direction in the shading frame, given the
    /// outgoing direction (shading frame) and parameters. Parameters are
    /// clamped to the trained ranges.
    pub fn condition(&self, wo: &UnitVec3, params: &[f64]) -> Result<ConditionedMixture> {
        if params.len() != self.ranges.len() {
            return Err(Error::DimensionMismatch { expected: self.ranges.len(), got: params.len() });
        }
        let clamped: Vec<f64> = params.iter().zip(&self.ranges).map(|(p, (lo, hi))| p.clamp(*lo, *hi)).collect();
        self.mixture.condition(&Point::bsdf(UnitVec3::Z, *wo, &clamped))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MODEL_MAGIC);
        w.u32(MODEL_VERSION);
        w.u8(self.kind.tag());
        w.u32(self.ranges.len() as u32);
        for (lo, hi) in &self.ranges {
            w.f64(*lo);
            w.f64(*hi);
        }
        w.blob(&serialize::mixture_to_bytes(&self.mixture));
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect(MODEL_MAGIC)?;
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported BSDF model version {version}")));
        }
        let tag = r.u8()?;
        let kind = BsdfKind::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown BSDF kind tag {tag}")))?;
        let n = r.u32()? as usize;
        if n != kind.param_count() {
            return Err(Error::Format(format!(
                "{} expects {} parameters, file has {n}",
                kind.name(),
                kind.param_count()
            )));
        }
        let mut ranges = Vec::with_capacity(n);
        for _ in 0..n {
            ranges.push((r.f64()?, r.f64()?));
        }
        let mixture = serialize::mixture_from_bytes(r.blob()?)?;
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after BSDF model".into()));
        }
        let mut model = BsdfModel::new(kind, mixture).map_err(|e| Error::Format(e.to_string()))?;
        model.ranges = ranges;
        Ok(model)
    }
}
