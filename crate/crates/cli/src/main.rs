use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use circlefuse::bench::{bench_table1, BenchConfig};
use circlefuse::evaluation::{evaluate, load_ground_truth, EvalConfig};
use circlefuse::fusion::{ColorMap, FusedDetection, RetentionPolicy};
use circlefuse::geojson_io::import_geojson;
use circlefuse::pipeline::{run_pipeline, write_text, BackendConfig, FusedFile, PipelineConfig};
use circlefuse::synthsim::{generate_ground_truth, run_to_detection_file, simulate_ensemble, SynthConfig};
use circlefuse::tiling::{generate_patches, SlideGeometry, TilingConfig};
use circlefuse_review::{serve, App, BackgroundImage, ServiceConfig};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::Value;

#[derive(Parser)]
#[command(name = "circlefuse", version, about = "Ensemble post-processing for circle detections on whole-slide images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the patch grid for a slide.
    Tile(TileArgs),
    /// Generate a seeded synthetic ground truth and model ensemble.
    Simulate(SimulateArgs),
    /// Assemble, suppress and fuse per-patch detections.
    Fuse(FuseArgs),
    /// Score predictions against ground truth over a cIoU sweep.
    Eval(EvalArgs),
    /// Compare single models, pooled NMS, pooled Soft-NMS and WCF over seeds.
    Bench(BenchArgs),
    /// Start the review service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct TileArgs {
    #[arg(long)]
    slide_id: String,
    #[arg(long)]
    width: u64,
    #[arg(long)]
    height: u64,
    #[arg(long, default_value_t = 512)]
    patch: u64,
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// SynthConfig JSON; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 512)]
    patch: u64,
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    /// PipelineConfig JSON; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    patches: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    detections: Vec<PathBuf>,
    #[arg(long)]
    slide_id: Option<String>,
    #[arg(long, requires = "height")]
    width: Option<u64>,
    #[arg(long, requires = "width")]
    height: Option<u64>,
    #[arg(long)]
    nms_ciou: Option<f64>,
    #[arg(long)]
    t_match: Option<f64>,
    #[arg(long)]
    t_count: Option<usize>,
    #[arg(long)]
    t_score: Option<f64>,
    /// count_or_score, count_and_score or count_only.
    #[arg(long)]
    retention: Option<RetentionPolicy>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    geojson: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// EvalConfig JSON; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fused JSON or GeoJSON predictions.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Threshold range `start:stop:step`.
    #[arg(long)]
    thresholds: Option<String>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// BenchConfig JSON; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Also write per-seed results as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Fused JSON or GeoJSON to review.
    #[arg(long)]
    fused: PathBuf,
    /// Where the reviewed GeoJSON is written (edit log alongside).
    #[arg(long)]
    geojson: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    downsample: f64,
    #[arg(long)]
    width: Option<u64>,
    #[arg(long)]
    height: Option<u64>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "CIRCLEFUSE_TOKEN")]
    token: Option<String>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn tile(a: TileArgs) -> Result<()> {
    let slide = SlideGeometry::new(a.slide_id, a.width, a.height)?;
    let cfg = TilingConfig { patch_size: a.patch, overlap_fraction: a.overlap };
    let patches = generate_patches(&slide, &cfg)?;
    write_json(&a.output, &patches)?;
    println!("{} patches -> {}", patches.len(), a.output.display());
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let tiling = TilingConfig { patch_size: a.patch, overlap_fraction: a.overlap };
    let patches = generate_patches(&cfg.slide, &tiling)?;
    let gt = generate_ground_truth(&cfg)?;
    let runs = simulate_ensemble(&gt, &cfg)?;

    std::fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    write_json(&a.output.join("gt.json"), &gt.to_file())?;
    write_json(&a.output.join("patches.json"), &patches)?;
    for run in &runs {
        let doc = run_to_detection_file(run, &cfg.slide.slide_id, &patches);
        write_json(&a.output.join(format!("{}.detections.json", run.model_id)), &doc)?;
    }
    println!(
        "{} GT circles, {} models ({} detections) -> {}",
        gt.circles.len(),
        runs.len(),
        runs.iter().map(|r| r.len()).sum::<usize>(),
        a.output.display()
    );
    Ok(())
}

fn fuse_config(a: &FuseArgs) -> Result<PipelineConfig> {
    let mut cfg: PipelineConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => {
            if a.detections.is_empty() {
                bail!("either --config or --detections is required");
            }
            PipelineConfig::new(BackendConfig::Files { patches: None, detections: Vec::new() })
        }
    };
    if !a.detections.is_empty() || a.patches.is_some() {
        let (mut patches, mut detections) = match &cfg.backend {
            BackendConfig::Files { patches, detections } => (patches.clone(), detections.clone()),
            _ => (None, Vec::new()),
        };
        if a.patches.is_some() {
            patches = a.patches.clone();
        }
        if !a.detections.is_empty() {
            detections = a.detections.clone();
        }
        cfg.backend = BackendConfig::Files { patches, detections };
    }
    if let (Some(w), Some(h)) = (a.width, a.height) {
        let id = a
            .slide_id
            .clone()
            .or_else(|| cfg.slide.as_ref().map(|s| s.slide_id.clone()))
            .unwrap_or_else(|| "slide".into());
        cfg.slide = Some(SlideGeometry::new(id, w, h)?);
    } else if let (Some(id), Some(s)) = (&a.slide_id, cfg.slide.as_mut()) {
        s.slide_id = id.clone();
    }
    if let Some(v) = a.nms_ciou {
        cfg.nms_ciou = v;
    }
    if let Some(v) = a.t_match {
        cfg.wcf.t_match = v;
    }
    if let Some(v) = a.t_count {
        cfg.wcf.t_count = v;
    }
    if let Some(v) = a.t_score {
        cfg.wcf.t_score = v;
    }
    if let Some(v) = a.retention {
        cfg.wcf.retention_policy = v;
    }
    if a.workers.is_some() {
        cfg.workers = a.workers;
    }
    Ok(cfg)
}

fn fuse(a: FuseArgs) -> Result<()> {
    let cfg = fuse_config(&a)?;
    let out = run_pipeline(&cfg)?;
    out.write(&a.output, a.geojson.as_deref(), a.manifest.as_deref())?;
    let c = &out.manifest.counts;
    println!(
        "{}: {} detections in, {} after NMS, {} clusters, {} fused retained",
        out.slide_id, c.detections_in, c.detections_after_nms, c.clusters_formed, c.fused_retained
    );
    if c.failed_patches > 0 {
        eprintln!("warning: {} patch requests failed; see the manifest", c.failed_patches);
    }
    Ok(())
}

/// Reads either a fused JSON document or a GeoJSON FeatureCollection.
fn load_fused(path: &Path) -> Result<(String, Vec<FusedDetection>)> {
    let doc: Value = read_json(path)?;
    if doc.get("type").and_then(Value::as_str) == Some("FeatureCollection") {
        let report = import_geojson(&doc)?;
        for e in &report.errors {
            eprintln!("warning: {}: feature {} skipped: {}", path.display(), e.index, e.reason);
        }
        let slide_id = report.slide_id.clone().unwrap_or_else(|| "slide".into());
        return Ok((slide_id, report.fused()));
    }
    let file = FusedFile::load(path)?;
    let fused = file.to_fused(&ColorMap::default())?;
    Ok((file.slide_id, fused))
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg: EvalConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => EvalConfig::default(),
    };
    if let Some(spec) = &a.thresholds {
        cfg.thresholds = EvalConfig::parse_range(spec)?;
    }
    let (_, fused) = load_fused(&a.pred)?;
    let preds: Vec<_> = fused
        .iter()
        .map(|f| circlefuse::evaluation::ScoredCircle { circle: f.circle, score: f.score })
        .collect();
    let gt = load_ground_truth(&a.gt)?;
    let gts: Vec<_> = gt.circles.iter().map(|c| c.circle()).collect();
    let report = evaluate(&preds, &gts, &cfg)?;
    print!("{}", report.to_table());
    if let Some(o) = &a.output {
        write_json(o, &report)?;
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    if a.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let cfg: BenchConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => BenchConfig::default(),
    };
    let seeds: Vec<u64> = (a.first_seed..a.first_seed + a.seeds).collect();
    let table = bench_table1(&cfg, &seeds)?;
    let md = table.to_markdown();
    print!("{md}");
    if let Some(o) = &a.output {
        write_text(o, &md)?;
    }
    if let Some(j) = &a.json {
        write_json(j, &table)?;
    }
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let (slide_id, fused) = load_fused(&a.fused)?;
    let export = a.geojson.clone().unwrap_or_else(|| a.fused.with_extension("reviewed.geojson"));
    if !(a.downsample.is_finite() && a.downsample > 0.0) {
        bail!("--downsample must be positive");
    }
    let mut cfg = ServiceConfig::new(slide_id, export);
    cfg.width = a.width;
    cfg.height = a.height;
    cfg.downsample = a.downsample;
    cfg.token = a.token;
    if let Some(p) = &a.image {
        cfg.image = Some(BackgroundImage::load(p).with_context(|| format!("loading {}", p.display()))?);
    }
    let n = fused.len();
    let app = App::new(cfg, fused);

    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .with_context(|| format!("binding {}:{}", a.host, a.port))?;
        println!("reviewing {n} detections on http://{}", listener.local_addr()?);
        let result = serve(app, listener, async {
            tokio::signal::ctrl_c().await.ok();
        })
        .await?;
        println!("exported {} features to {}", result.features, result.geojson.display());
        Ok(())
    })
}

fn main() -> ExitCode {
    let result = match Cli::parse().command {
        Command::Tile(a) => tile(a),
        Command::Simulate(a) => simulate(a),
        Command::Fuse(a) => fuse(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Serve(a) => serve_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
