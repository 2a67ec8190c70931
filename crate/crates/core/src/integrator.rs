//! Iterated unidirectional path tracer that trains the spatial cache during
//! the first quarter of the budget and then renders with it frozen.
//!
//! Directions are drawn from a one-sample mixture of the BSDF sampler and the
//! guide, and every path weight uses the full mixture pdf.

use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bsdf_mixture::BsdfModel;
use crate::conditioned::{ConditionedMixture, Sampled};
use crate::error::{Error, Result};
use crate::gaussian::Point;
use crate::geometry::{Rotation, UnitVec3};
use crate::image::{self, Image};
use crate::materials::{BsdfKind, Material, Rgb};
use crate::model_init::tangent_frame;
use crate::par::{self, Execution};
use crate::scene::{Ray, Scene};
use crate::spatial::{PathVertex, SpatialTree, TreeConfig};

pub const SPP_PER_ITERATION: u32 = 4;
pub const TILE_SIZE: usize = 8;
pub const DEFAULT_MAX_VERTICES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GuidingMode {
    Off,
    Radiance,
    Product,
}

impl GuidingMode {
    pub const ALL: [GuidingMode; 3] = [GuidingMode::Off, GuidingMode::Radiance, GuidingMode::Product];

    pub fn name(self) -> &'static str {
        match self {
            GuidingMode::Off => "off",
            GuidingMode::Radiance => "radiance",
            GuidingMode::Product => "product",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn default_bsdf_fraction(self) -> f64 {
        match self {
            GuidingMode::Off => 1.0,
            GuidingMode::Radiance => 0.5,
            GuidingMode::Product => 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig {
    /// Total samples per pixel; a multiple of 4.
    pub spp: u32,
    pub mode: GuidingMode,
    pub bsdf_fraction: f64,
    /// Surface interactions per path, including the first hit.
    pub max_vertices: usize,
    pub seed: u64,
    /// Weight every iteration by its reciprocal mean pixel variance instead
    /// of averaging the post-training iterations.
    pub iv_combine: bool,
    pub exec: Execution,
    pub tree: TreeConfig,
}

impl RenderConfig {
    pub fn new(spp: u32, mode: GuidingMode, seed: u64) -> Self {
        RenderConfig {
            spp,
            mode,
            bsdf_fraction: mode.default_bsdf_fraction(),
            max_vertices: DEFAULT_MAX_VERTICES,
            seed,
            iv_combine: false,
            exec: Execution::default(),
            tree: TreeConfig { seed, ..TreeConfig::default() },
        }
    }

    pub fn iterations(&self) -> usize {
        (self.spp / SPP_PER_ITERATION) as usize
    }

    /// Iterations that deposit vertices and train the cache: the first quarter.
    pub fn training_iterations(&self) -> usize {
        if self.mode == GuidingMode::Off {
            0
        } else {
            self.iterations() / 4
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.spp == 0 || !self.spp.is_multiple_of(SPP_PER_ITERATION) {
            return Err(Error::Scene(format!(
                "spp must be a positive multiple of {SPP_PER_ITERATION}, got {}",
                self.spp
            )));
        }
        if !(self.bsdf_fraction > 0.0 && self.bsdf_fraction <= 1.0) {
            return Err(Error::Scene(format!("BSDF sampling fraction must be in (0, 1], got {}", self.bsdf_fraction)));
        }
        if self.tree.initial_splits > 4 {
            return Err(Error::Scene(format!("initial_splits must be at most 4, got {}", self.tree.initial_splits)));
        }
        if self.max_vertices == 0 {
            return Err(Error::Scene("max_vertices must be at least 1".into()));
        }
        Ok(())
    }
}

/// Fitted BSDF models by kind.
#[derive(Clone, Debug, Default)]
pub struct BsdfModels {
    models: [Option<BsdfModel>; 3],
}

impl BsdfModels {
    pub fn insert(&mut self, model: BsdfModel) {
        let slot = model.kind().tag() as usize;
        self.models[slot] = Some(model);
    }

    pub fn get(&self, kind: BsdfKind) -> Option<&BsdfModel> {
        self.models[kind.tag() as usize].as_ref()
    }
}

/// Local shading context at a path vertex.
#[derive(Clone, Debug)]
pub struct ShadingQuery<'a> {
    /// Position in the cache's unit cube.
    pub position: [f64; 3],
    /// Outgoing direction, world space, on the side of `frame`'s normal.
    pub wo: UnitVec3,
    /// Local-to-world rotation; local +z is the shading normal.
    pub frame: Rotation,
    pub material: &'a Material,
    wo_local: Vector3<f64>,
}

impl<'a> ShadingQuery<'a> {
    /// `normal` is flipped to the side of `wo`.
    pub fn new(position: [f64; 3], normal: &Vector3<f64>, wo: UnitVec3, material: &'a Material) -> Option<Self> {
        let n = if normal.dot(wo.as_vector()) < 0.0 { -normal } else { *normal };
        let n = UnitVec3::new_normalize(n)?;
        let (s, t) = tangent_frame(&n);
        let frame = Rotation::from_frame(&s, &t, n.as_vector())?;
        let wo_local = frame.inverse().apply_vector(wo.as_vector());
        Some(ShadingQuery { position, wo, frame, material, wo_local })
    }

    pub fn normal(&self) -> UnitVec3 {
        UnitVec3::new_unchecked(self.frame.matrix().column(2).into_owned())
    }

    pub fn to_local(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.frame.inverse().apply_vector(v)
    }

    pub fn wo_local(&self) -> &Vector3<f64> {
        &self.wo_local
    }
}

/// The guiding distribution at one vertex, if any, with its mixing fraction.
#[derive(Clone, Debug)]
pub struct Guide {
    mixture: Option<ConditionedMixture>,
    bsdf_fraction: f64,
}

impl Guide {
    pub fn none() -> Self {
        Guide { mixture: None, bsdf_fraction: 1.0 }
    }

    pub fn new(mixture: ConditionedMixture, bsdf_fraction: f64) -> Self {
        Guide { mixture: Some(mixture), bsdf_fraction }
    }

    /// Builds the guide for `q`. Uninitialized leaves and numerical failures
    /// give no guide, which means pure BSDF sampling.
    pub fn build(
        tree: &SpatialTree,
        models: &BsdfModels,
        mode: GuidingMode,
        bsdf_fraction: f64,
        q: &ShadingQuery,
    ) -> Self {
        if mode == GuidingMode::Off {
            return Guide::none();
        }
        let Some(leaf_mix) = &tree.leaf_at(&q.position).mixture else { return Guide::none() };
        let Ok(radiance) = leaf_mix.condition(&Point::radiance(UnitVec3::Z, q.position)) else { return Guide::none() };
        let mixture = match mode {
            GuidingMode::Radiance => Some(radiance),
            GuidingMode::Product => models.get(q.material.kind).and_then(|model| {
                let wo = UnitVec3::new_normalize(q.wo_local)?;
                let bsdf = model.condition(&wo, q.material.params()).ok()?;
                radiance.product(&bsdf.prune_top2().rotate_to_frame(&q.frame)).ok()
            }),
            GuidingMode::Off => None,
        };
        match mixture {
            Some(m) => Guide::new(m, bsdf_fraction),
            None => Guide::none(),
        }
    }

    pub fn mixture(&self) -> Option<&ConditionedMixture> {
        self.mixture.as_ref()
    }

    /// Probability of picking the BSDF sampler; 1 without a guide.
    pub fn bsdf_fraction(&self) -> f64 {
        if self.mixture.is_some() {
            self.bsdf_fraction
        } else {
            1.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Technique {
    Bsdf,
    Guide,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DirectionSample {
    /// World-space direction; `None` for a zero-valued outcome (a guide
    /// discard or a BSDF sample below the horizon).
    pub direction: Option<UnitVec3>,
    /// One-sample mixture pdf of `direction`, 0 when there is none.
    pub pdf: f64,
    pub technique: Technique,
}

/// Mixture pdf `c pdf_bsdf + (1 - c) pdf_guide` of a world-space direction.
pub fn direction_pdf(q: &ShadingQuery, guide: &Guide, wi: &UnitVec3) -> f64 {
    let c = guide.bsdf_fraction();
    let pb = q.material.pdf(&q.wo_local, &q.to_local(wi.as_vector()));
    match guide.mixture() {
        Some(m) => c * pb + (1.0 - c) * m.pdf(wi),
        None => pb,
    }
}

pub fn sample_direction<R: Rng + ?Sized>(q: &ShadingQuery, guide: &Guide, rng: &mut R) -> DirectionSample {
    let c = guide.bsdf_fraction();
    let (direction, technique) = match guide.mixture() {
        Some(m) if rng.random::<f64>() >= c => match m.sample(rng) {
            Sampled::Direction(d) => (Some(d), Technique::Guide),
            Sampled::Discard => (None, Technique::Guide),
        },
        _ => {
            let d =
                q.material.sample(&q.wo_local, rng).and_then(|s| UnitVec3::new_normalize(q.frame.apply_vector(&s.wi)));
            (d, Technique::Bsdf)
        }
    };
    let pdf = direction.map_or(0.0, |d| direction_pdf(q, guide, &d));
    DirectionSample { direction, pdf, technique }
}

/// Training record for a scattering vertex: the incident-radiance estimate
/// along the sampled direction divided by its pdf. `None` when not finite.
pub fn deposit_vertex(
    position: [f64; 3],
    normal: UnitVec3,
    direction: UnitVec3,
    incident: &Rgb,
    pdf: f64,
) -> Option<PathVertex> {
    let weight = (incident.x + incident.y + incident.z) / 3.0 / pdf;
    weight.is_finite().then_some(PathVertex { position, normal, direction, weight })
}

/// Per-path and per-tile event counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    /// Directions drawn from the guide.
    pub guide_samples: u64,
    /// Vertices that fell back to BSDF sampling in a guided mode.
    pub unguided: u64,
    /// Guide draws that fell outside the chart.
    pub discards: u64,
    /// Vertices whose weight was not finite.
    pub dropped: u64,
    /// Camera samples with a non-finite value, replaced by zero.
    pub invalid_samples: u64,
}

impl Counters {
    fn add(&mut self, o: &Counters) {
        self.guide_samples += o.guide_samples;
        self.unguided += o.unguided;
        self.discards += o.discards;
        self.dropped += o.dropped;
        self.invalid_samples += o.invalid_samples;
    }
}

/// Everything a path needs besides its RNG.
pub struct PathTracer<'a> {
    pub scene: &'a Scene,
    pub tree: &'a SpatialTree,
    pub models: &'a BsdfModels,
    pub mode: GuidingMode,
    pub bsdf_fraction: f64,
    pub max_vertices: usize,
}

struct Scatter {
    position: [f64; 3],
    normal: UnitVec3,
    direction: UnitVec3,
    pdf: f64,
    /// `f cos / pdf` per channel.
    factor: Rgb,
}

fn is_black(m: &Material) -> bool {
    m.kind == BsdfKind::Lambertian && m.color == Rgb::zeros()
}

impl PathTracer<'_> {
    /// Radiance arriving along `ray`. When `vertices` is given, every
    /// scattering vertex is appended as a training record.
    pub fn trace<R: Rng + ?Sized>(
        &self,
        ray: Ray,
        rng: &mut R,
        mut vertices: Option<&mut Vec<PathVertex>>,
        counters: &mut Counters,
    ) -> Rgb {
        let offset = 1e-6 * self.scene.extent();
        let mut emitted: Vec<Rgb> = Vec::with_capacity(self.max_vertices + 1);
        let mut scatters: Vec<Scatter> = Vec::with_capacity(self.max_vertices);
        let mut ray = ray;
        for k in 0..self.max_vertices {
            let Some(hit) = self.scene.intersect(&ray) else {
                emitted.push(self.scene.environment);
                break;
            };
            emitted.push(self.scene.emission(&hit, &ray.dir));
            let material = &self.scene.primitives[hit.primitive].material;
            if k + 1 == self.max_vertices || is_black(material) {
                break;
            }
            let Some(wo) = UnitVec3::new_normalize(-ray.dir) else { break };
            let position = self.scene.normalize_position(&hit.position);
            let Some(q) = ShadingQuery::new(position, &hit.normal, wo, material) else { break };
            let guide = Guide::build(self.tree, self.models, self.mode, self.bsdf_fraction, &q);
            if self.mode != GuidingMode::Off && guide.mixture().is_none() {
                counters.unguided += 1;
            }
            let s = sample_direction(&q, &guide, rng);
            if s.technique == Technique::Guide {
                counters.guide_samples += 1;
                if s.direction.is_none() {
                    counters.discards += 1;
                }
            }
            let Some(wi) = s.direction else { break };
            let wi_local = q.to_local(wi.as_vector());
            if wi_local.z <= 0.0 || !(s.pdf > 0.0) {
                break;
            }
            let factor = material.eval(q.wo_local(), &wi_local) * (wi_local.z / s.pdf);
            let normal = q.normal();
            scatters.push(Scatter { position, normal, direction: wi, pdf: s.pdf, factor });
            ray = Ray { origin: hit.position + normal.as_vector() * offset, dir: wi.into_vector() };
        }

        // emitted[k + 1] arrives at scatter k; walk back accumulating the
        // incident radiance at each vertex.
        let mut incident = Rgb::zeros();
        for k in (0..scatters.len()).rev() {
            if k + 1 < scatters.len() {
                incident = emitted[k + 1] + scatters[k + 1].factor.component_mul(&incident);
            } else {
                incident = emitted[k + 1];
            }
            if let Some(out) = vertices.as_deref_mut() {
                let sc = &scatters[k];
                match deposit_vertex(sc.position, sc.normal, sc.direction, &incident, sc.pdf) {
                    Some(v) => out.push(v),
                    None => counters.dropped += 1,
                }
            }
        }
        let value = match scatters.first() {
            Some(s0) => emitted[0] + s0.factor.component_mul(&incident),
            None => emitted[0],
        };
        if value.iter().all(|c| c.is_finite()) {
            value
        } else {
            counters.invalid_samples += 1;
            Rgb::zeros()
        }
    }
}

/// Pixel block rendered as one parallel work item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tile {
    pub index: usize,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

pub fn tiles(width: usize, height: usize) -> Vec<Tile> {
    let mut out = Vec::new();
    for y0 in (0..height).step_by(TILE_SIZE) {
        for x0 in (0..width).step_by(TILE_SIZE) {
            out.push(Tile {
                index: out.len(),
                x0,
                y0,
                x1: (x0 + TILE_SIZE).min(width),
                y1: (y0 + TILE_SIZE).min(height),
            });
        }
    }
    out
}

/// RNG stream for one tile in one iteration.
pub fn tile_seed(seed: u64, tile: usize, iteration: usize) -> u64 {
    let mut z = seed;
    for w in [tile as u64, iteration as u64] {
        // splitmix64 step absorbing each word.
        z = (z ^ w).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// One iteration's output for a tile.
#[derive(Clone, Debug, Default)]
pub struct TileResult {
    /// Per pixel in row-major tile order: mean RGB and the sample variance
    /// of the channel mean.
    pub pixels: Vec<(Rgb, f64)>,
    pub vertices: Vec<PathVertex>,
    pub counters: Counters,
}

impl PathTracer<'_> {
    pub fn render_tile(&self, tile: &Tile, seed: u64, iteration: usize, record: bool) -> TileResult {
        let mut rng = ChaCha8Rng::seed_from_u64(tile_seed(seed, tile.index, iteration));
        let mut out = TileResult::default();
        let n = SPP_PER_ITERATION as usize;
        for y in tile.y0..tile.y1 {
            for x in tile.x0..tile.x1 {
                let mut sum = Rgb::zeros();
                let mut vals = [0.0; SPP_PER_ITERATION as usize];
                for v in vals.iter_mut() {
                    let ray = self.scene.camera.ray(x as f64 + rng.random::<f64>(), y as f64 + rng.random::<f64>());
                    let l = self.trace(ray, &mut rng, record.then_some(&mut out.vertices), &mut out.counters);
                    sum += l;
                    *v = (l.x + l.y + l.z) / 3.0;
                }
                let mean = vals.iter().sum::<f64>() / n as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                out.pixels.push((sum / n as f64, var));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationStats {
    /// Zero-based.
    pub iteration: usize,
    pub training: bool,
    /// Median over pixels of the per-sample variance estimate.
    pub median_variance: f64,
    pub mean_variance: f64,
    /// Mean pixel value of this iteration's image.
    pub mean: f64,
    /// Guide draws that were discarded, over all guide draws.
    pub discard_rate: f64,
    pub leaf_count: usize,
    pub deposited: usize,
    pub dropped: u64,
    pub train_ms: f64,
    pub render_ms: f64,
    /// Error of the running estimate against the reference, if one was given.
    pub mape: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image: Image,
    pub stats: Vec<IterationStats>,
    pub tree: SpatialTree,
    /// Cache hash when training stopped (or at the start for a loaded cache).
    pub frozen_fingerprint: Option<u64>,
    pub final_fingerprint: u64,
    pub counters: Counters,
}

impl RenderOutput {
    /// True when no mixture parameter changed after the training cutoff.
    pub fn cache_stayed_frozen(&self) -> bool {
        self.frozen_fingerprint.is_none_or(|f| f == self.final_fingerprint)
    }
}

struct Accum {
    sum: Vec<Rgb>,
    weight: f64,
}

impl Accum {
    fn new(n: usize) -> Self {
        Accum { sum: vec![Rgb::zeros(); n], weight: 0.0 }
    }

    fn add(&mut self, img: &[Rgb], w: f64) {
        for (s, p) in self.sum.iter_mut().zip(img) {
            *s += p * w;
        }
        self.weight += w;
    }

    fn image(&self, width: usize, height: usize) -> Image {
        let inv = if self.weight > 0.0 { 1.0 / self.weight } else { 0.0 };
        let px = self.sum.iter().map(|p| [(p.x * inv) as f32, (p.y * inv) as f32, (p.z * inv) as f32]).collect();
        Image::from_pixels(width, height, px).expect("accumulator sized to the image")
    }
}

pub struct Renderer<'a> {
    scene: &'a Scene,
    cfg: RenderConfig,
    models: BsdfModels,
    cache: Option<SpatialTree>,
    reference: Option<&'a Image>,
}

impl<'a> Renderer<'a> {
    pub fn new(scene: &'a Scene, cfg: RenderConfig) -> Self {
        Renderer { scene, cfg, models: BsdfModels::default(), cache: None, reference: None }
    }

    pub fn with_models(mut self, models: BsdfModels) -> Self {
        self.models = models;
        self
    }

    /// Renders with a previously trained cache, frozen from the start.
    pub fn with_cache(mut self, tree: SpatialTree) -> Self {
        self.cache = Some(tree);
        self
    }

    pub fn with_reference(mut self, reference: &'a Image) -> Self {
        self.reference = Some(reference);
        self
    }

    /// BSDF kinds product guiding needs a model for.
    pub fn required_models(&self) -> Vec<BsdfKind> {
        let mut kinds: Vec<BsdfKind> = Vec::new();
        for m in self.scene.materials().filter(|m| !is_black(m)) {
            if !kinds.contains(&m.kind) {
                kinds.push(m.kind);
            }
        }
        kinds
    }

    pub fn render(self) -> Result<RenderOutput> {
        let cfg = &self.cfg;
        cfg.validate()?;
        let (w, h) = (self.scene.camera.width, self.scene.camera.height);
        if let Some(r) = self.reference {
            if (r.width(), r.height()) != (w, h) {
                return Err(Error::Image(format!(
                    "reference is {}x{} but the scene renders {w}x{h}",
                    r.width(),
                    r.height()
                )));
            }
        }
        if cfg.mode == GuidingMode::Product {
            if let Some(k) = self.required_models().into_iter().find(|k| self.models.get(*k).is_none()) {
                return Err(Error::MissingBsdfModel(k.name().to_string()));
            }
        }
        let frozen_from_start = self.cache.is_some();
        let mut tree = match self.cache {
            Some(t) => t,
            None => SpatialTree::build_initial(cfg.tree.clone()),
        };
        let iterations = cfg.iterations();
        let training_iterations = if frozen_from_start { 0 } else { cfg.training_iterations() };
        let mut frozen_fingerprint = frozen_from_start.then(|| tree.fingerprint());
        let tiles = tiles(w, h);
        let npx = w * h;
        let mut uniform = Accum::new(npx);
        let mut weighted = Accum::new(npx);
        let mut running = Accum::new(npx);
        let mut stats = Vec::with_capacity(iterations);
        let mut counters = Counters::default();

        for it in 0..iterations {
            let training = it < training_iterations;
            let start = Instant::now();
            let results = {
                let tracer = PathTracer {
                    scene: self.scene,
                    tree: &tree,
                    models: &self.models,
                    mode: cfg.mode,
                    bsdf_fraction: cfg.bsdf_fraction,
                    max_vertices: cfg.max_vertices,
                };
                par::map(cfg.exec, &tiles, |t| tracer.render_tile(t, cfg.seed, it, training))
            };
            let render_ms = start.elapsed().as_secs_f64() * 1e3;

            let mut img = vec![Rgb::zeros(); npx];
            let mut vars = Vec::with_capacity(npx);
            let mut it_counters = Counters::default();
            for (tile, r) in tiles.iter().zip(&results) {
                let mut px = r.pixels.iter();
                for y in tile.y0..tile.y1 {
                    for x in tile.x0..tile.x1 {
                        let (v, var) = px.next().expect("one entry per tile pixel");
                        img[y * w + x] = *v;
                        vars.push(*var);
                    }
                }
                it_counters.add(&r.counters);
            }
            counters.add(&it_counters);

            let mut train_ms = 0.0;
            let mut deposited = 0;
            if training {
                let start = Instant::now();
                tree.begin_iteration();
                for r in &results {
                    tree.deposit(&r.vertices);
                    deposited += r.vertices.len();
                }
                tree.refine();
                let report = tree.train_leaves(cfg.exec);
                if report.failed > 0 {
                    log::warn!("iteration {it}: {} leaves failed to train", report.failed);
                }
                tree.collapse();
                train_ms = start.elapsed().as_secs_f64() * 1e3;
                if it + 1 == training_iterations {
                    frozen_fingerprint = Some(tree.fingerprint());
                }
            }

            let mean_variance = vars.iter().sum::<f64>() / npx as f64;
            vars.sort_by(f64::total_cmp);
            let median_variance = median(&vars);
            if cfg.iv_combine {
                let wgt = if mean_variance > 0.0 && mean_variance.is_finite() { 1.0 / mean_variance } else { 0.0 };
                weighted.add(&img, wgt);
            }
            if !training {
                uniform.add(&img, 1.0);
            }
            running.add(&img, 1.0);

            let mape = match self.reference {
                Some(r) => {
                    let current = current_estimate(cfg.iv_combine, &weighted, &uniform, &running);
                    Some(image::mape(&current.image(w, h), r)?)
                }
                None => None,
            };
            let mean = img.iter().map(|p| (p.x + p.y + p.z) / 3.0).sum::<f64>() / npx as f64;
            stats.push(IterationStats {
                iteration: it,
                training,
                median_variance,
                mean_variance,
                mean,
                discard_rate: if it_counters.guide_samples > 0 {
                    it_counters.discards as f64 / it_counters.guide_samples as f64
                } else {
                    0.0
                },
                leaf_count: tree.leaf_count(),
                deposited,
                dropped: it_counters.dropped,
                train_ms,
                render_ms,
                mape,
            });
        }
        if counters.invalid_samples > 0 {
            log::warn!("{} camera samples were non-finite and set to zero", counters.invalid_samples);
        }
        let image = current_estimate(cfg.iv_combine, &weighted, &uniform, &running).image(w, h);
        let final_fingerprint = tree.fingerprint();
        Ok(RenderOutput { image, stats, tree, frozen_fingerprint, final_fingerprint, counters })
    }
}

/// Reciprocal-variance weights when asked for and usable, otherwise the
/// post-training average, otherwise everything so far.
fn current_estimate<'b>(iv: bool, weighted: &'b Accum, uniform: &'b Accum, running: &'b Accum) -> &'b Accum {
    if iv && weighted.weight > 0.0 {
        weighted
    } else if uniform.weight > 0.0 {
        uniform
    } else {
        running
    }
}

fn median(sorted: &[f64]) -> f64 {
    match sorted.len() {
        0 => 0.0,
        n if n % 2 == 1 => sorted[n / 2],
        n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    }
}
