use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use sdmm::bsdf_mixture::{fit_bsdf, BsdfModel, FitConfig};
use sdmm::error::Error;
use sdmm::image::Image;
use sdmm::integrator::{BsdfModels, GuidingMode, IterationStats, RenderConfig, Renderer};
use sdmm::materials::BsdfKind;
use sdmm::par::Execution;
use sdmm::scene::Scene;
use sdmm::spatial::SpatialTree;

mod verify;

const THREADS_ENV: &str = "SDMM_THREADS";

#[derive(Parser)]
#[command(name = "sdmm", version, about = "Path guiding with tangent-space Gaussian mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a scene to a PFM image.
    Render(Box<RenderArgs>),
    /// Fit a mixture model of a built-in BSDF for product guiding.
    FitBsdf(FitArgs),
    /// Run the non-rendering self checks.
    Verify,
}

#[derive(clap::Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Total samples per pixel, a multiple of 4. Defaults to the scene's value.
    #[arg(long)]
    spp: Option<u32>,
    /// off, radiance or product. Defaults to the scene's value, then off.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Per-iteration metrics as CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Reference image for MAPE.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Write the trained spatial cache here.
    #[arg(long, conflicts_with = "load_cache")]
    save_cache: Option<PathBuf>,
    /// Render with a saved cache; no further training.
    #[arg(long)]
    load_cache: Option<PathBuf>,
    /// Render threads; overrides SDMM_THREADS.
    #[arg(long)]
    threads: Option<usize>,
    /// Weight iterations by reciprocal variance.
    #[arg(long)]
    iv_combine: bool,
    /// Directory with `<kind>.bin` models from `fit-bsdf`, for product mode.
    #[arg(long, default_value = "bsdf_models")]
    bsdf_models: PathBuf,
    #[arg(long)]
    max_vertices: Option<usize>,
    #[arg(long)]
    bsdf_fraction: Option<f64>,
    /// Center splits per axis of the initial cache grid (3 gives 8x8x8 leaves).
    #[arg(long)]
    initial_splits: Option<u32>,
}

#[derive(clap::Args)]
struct FitArgs {
    /// lambertian, conductor or plastic.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = FitConfig::default().batches)]
    batches: usize,
    #[arg(long, default_value_t = FitConfig::default().batch_size)]
    batch_size: usize,
}

/// Failure classes mapped to exit codes 1 and 2.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Scene(_) | Error::MissingBsdfModel(_) => Failure::Usage(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Render(a) => render(*a),
        Command::FitBsdf(a) => fit(a),
        Command::Verify => verify::run().map_err(runtime),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Failure> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            v.trim().parse().map(Some).map_err(|_| usage(anyhow!("{THREADS_ENV} must be a thread count, got '{v}'")))
        }
        Err(_) => Ok(None),
    }
}

fn load_models(dir: &Path, kinds: &[BsdfKind]) -> Result<BsdfModels, Failure> {
    let mut models = BsdfModels::default();
    for kind in kinds {
        let path = dir.join(format!("{}.bin", kind.name()));
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(_) => {
                return Err(usage(anyhow!(
                    "missing BSDF model {} for product mode; create it with `sdmm fit-bsdf --kind {} --out {}`",
                    path.display(),
                    kind.name(),
                    path.display()
                )))
            }
        };
        let model =
            BsdfModel::from_bytes(&bytes).with_context(|| format!("reading {}", path.display())).map_err(runtime)?;
        if model.kind() != *kind {
            return Err(usage(anyhow!(
                "{} holds a '{}' model, expected '{}'",
                path.display(),
                model.kind().name(),
                kind.name()
            )));
        }
        models.insert(model);
    }
    Ok(models)
}

#[derive(Serialize)]
struct MetricsRow {
    iteration: usize,
    training: bool,
    median_variance: f64,
    mean_variance: f64,
    mean: f64,
    discard_rate: f64,
    leaf_count: usize,
    deposited: usize,
    dropped: u64,
    train_ms: f64,
    render_ms: f64,
    mape: Option<f64>,
}

impl From<&IterationStats> for MetricsRow {
    fn from(s: &IterationStats) -> Self {
        MetricsRow {
            iteration: s.iteration,
            training: s.training,
            median_variance: s.median_variance,
            mean_variance: s.mean_variance,
            mean: s.mean,
            discard_rate: s.discard_rate,
            leaf_count: s.leaf_count,
            deposited: s.deposited,
            dropped: s.dropped,
            train_ms: s.train_ms,
            render_ms: s.render_ms,
            mape: s.mape,
        }
    }
}

fn write_metrics(path: &Path, stats: &[IterationStats]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for s in stats {
        w.serialize(MetricsRow::from(s))?;
    }
    w.flush()?;
    Ok(())
}

fn render(a: RenderArgs) -> Result<(), Failure> {
    let scene = Scene::load(&a.scene)?;
    let settings = &scene.integrator;
    let mode_name = a.mode.clone().or_else(|| settings.mode.clone()).unwrap_or_else(|| "off".into());
    let mode = GuidingMode::from_name(&mode_name)
        .ok_or_else(|| usage(anyhow!("unknown mode '{mode_name}' (expected off, radiance or product)")))?;
    let spp = a.spp.or(settings.spp).unwrap_or(64);
    let seed = a.seed.or(settings.seed).unwrap_or(0);
    let mut cfg = RenderConfig::new(spp, mode, seed);
    if let Some(f) = a.bsdf_fraction.or(settings.bsdf_fraction) {
        cfg.bsdf_fraction = f;
    }
    if let Some(v) = a.max_vertices.or(settings.max_vertices) {
        cfg.max_vertices = v;
    }
    if let Some(v) = a.initial_splits.or(settings.initial_splits) {
        cfg.tree.initial_splits = v;
    }
    cfg.iv_combine = a.iv_combine || settings.iv_combine.unwrap_or(false);
    cfg.validate().map_err(usage)?;

    let threads = thread_count(a.threads)?;
    if let Some(t) = threads {
        if t == 0 {
            return Err(usage(anyhow!("thread count must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().map_err(runtime)?;
        if t == 1 {
            cfg.exec = Execution::Sequential;
        }
    }

    let reference = match &a.reference {
        Some(p) => Some(Image::read_pfm(p).map_err(runtime)?),
        None => None,
    };
    let mut renderer = Renderer::new(&scene, cfg.clone());
    if mode == GuidingMode::Product {
        let kinds = renderer.required_models();
        renderer = renderer.with_models(load_models(&a.bsdf_models, &kinds)?);
    }
    if let Some(p) = &a.load_cache {
        let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display())).map_err(runtime)?;
        let tree = SpatialTree::from_bytes(&bytes, cfg.tree.clone())?;
        renderer = renderer.with_cache(tree);
    }
    if let Some(r) = &reference {
        renderer = renderer.with_reference(r);
    }

    log::info!(
        "rendering {} at {}x{}: {} spp, mode {}, seed {}",
        a.scene.display(),
        scene.camera.width,
        scene.camera.height,
        spp,
        mode.name(),
        seed
    );
    let out = renderer.render()?;
    if !out.cache_stayed_frozen() {
        log::warn!("spatial cache changed after the training cutoff");
    }
    out.image.write_pfm(&a.out)?;
    if let Some(p) = &a.metrics {
        write_metrics(p, &out.stats).map_err(runtime)?;
    }
    if let Some(p) = &a.save_cache {
        std::fs::write(p, out.tree.to_bytes()).with_context(|| format!("writing {}", p.display())).map_err(runtime)?;
    }
    let render_ms: f64 = out.stats.iter().map(|s| s.render_ms).sum();
    let train_ms: f64 = out.stats.iter().map(|s| s.train_ms).sum();
    log::info!(
        "done: mean {:.6}, {} leaves, render {:.0} ms, train {:.0} ms, discards {}/{}",
        out.image.mean(),
        out.tree.leaf_count(),
        render_ms,
        train_ms,
        out.counters.discards,
        out.counters.guide_samples
    );
    if let Some(m) = out.stats.last().and_then(|s| s.mape) {
        log::info!("MAPE {m:.6}");
    }
    Ok(())
}

fn fit(a: FitArgs) -> Result<(), Failure> {
    let kind = BsdfKind::from_name(&a.kind).ok_or_else(|| {
        let names: Vec<&str> = BsdfKind::ALL.iter().map(|k| k.name()).collect();
        usage(anyhow!("unknown BSDF kind '{}' (expected one of {})", a.kind, names.join(", ")))
    })?;
    if a.batches == 0 || a.batch_size == 0 {
        return Err(usage(anyhow!("batches and batch size must be positive")));
    }
    let cfg = FitConfig { batches: a.batches, batch_size: a.batch_size, seed: a.seed, ..FitConfig::default() };
    log::info!("fitting {} with {} batches of {}", kind.name(), cfg.batches, cfg.batch_size);
    let model = fit_bsdf(kind, &cfg)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(runtime)?;
    }
    std::fs::write(&a.out, model.to_bytes())
        .with_context(|| format!("writing {}", a.out.display()))
        .map_err(runtime)?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}
