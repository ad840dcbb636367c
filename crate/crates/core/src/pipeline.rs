//! End-to-end slide run: tile, ingest, assemble, per-model NMS, WCF,
//! categorize, export. Every run produces a manifest recording its config,
//! input digests, per-stage counts and timings, and per-patch failures.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::backends::{assemble, load_detection_file, PatchDetections, PatchFailure, RemoteClient, RemoteConfig};
use crate::detection::{Detection, ModelRun, DEFAULT_LABEL};
use crate::error::{Error, Result};
use crate::evaluation::ScoredCircle;
use crate::fusion::{categorize, category_name, wcf_outcome, ColorMap, FusedDetection, WcfConfig};
use crate::geojson_io::export_geojson;
use crate::geometry::Circle;
use crate::suppression::{nms, DEFAULT_NMS_CIOU};
use crate::synthsim::{generate_ground_truth, run_to_detection_file, simulate_ensemble, SynthConfig};
use crate::tiling::{generate_patches, Patch, SlideGeometry, TilingConfig};

pub const FUSED_SCHEMA: &str = "circlefuse-fused/1";
pub const MANIFEST_SCHEMA: &str = "circlefuse-manifest/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteModel {
    pub model_id: String,
    #[serde(flatten)]
    pub remote: RemoteConfig,
}

/// Where per-patch detections come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Files {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        patches: Option<PathBuf>,
        detections: Vec<PathBuf>,
    },
    Remote { models: Vec<RemoteModel> },
    Synthetic(SynthConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slide: Option<SlideGeometry>,
    #[serde(default)]
    pub tiling: TilingConfig,
    pub backend: BackendConfig,
    #[serde(default = "default_nms_ciou")]
    pub nms_ciou: f64,
    #[serde(default)]
    pub wcf: WcfConfig,
    #[serde(default)]
    pub colors: ColorMap,
    /// Worker threads; `None` uses the global pool. Outputs do not depend on it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

fn default_nms_ciou() -> f64 {
    DEFAULT_NMS_CIOU
}

impl PipelineConfig {
    pub fn new(backend: BackendConfig) -> Self {
        Self {
            slide: None,
            tiling: TilingConfig::default(),
            backend,
            nms_ciou: DEFAULT_NMS_CIOU,
            wcf: WcfConfig::default(),
            colors: ColorMap::default(),
            workers: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.slide {
            s.validate()?;
        }
        self.tiling.stride()?;
        self.wcf.validate()?;
        if !(self.nms_ciou > 0.0 && self.nms_ciou < 1.0) {
            return Err(Error::Config(format!("nms_ciou must lie in (0, 1), got {}", self.nms_ciou)));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        match &self.backend {
            BackendConfig::Files { patches, detections } => {
                if detections.is_empty() {
                    return Err(Error::Config("no detection files given".into()));
                }
                if patches.is_none() && self.slide.is_none() {
                    return Err(Error::Config("either a patch list or slide dimensions are required".into()));
                }
            }
            BackendConfig::Remote { models } => {
                if models.is_empty() {
                    return Err(Error::Config("remote backend lists no models".into()));
                }
                if self.slide.is_none() {
                    return Err(Error::Config("remote backend requires slide dimensions".into()));
                }
            }
            BackendConfig::Synthetic(s) => s.validate()?,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub model_id: String,
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedRecord {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub score: f64,
    pub count: usize,
    pub category: String,
    pub members: Vec<MemberRecord>,
}

/// `circlefuse-fused/1` document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedFile {
    pub schema: String,
    pub slide_id: String,
    pub fused: Vec<FusedRecord>,
}

impl FusedFile {
    pub fn from_fused(slide_id: &str, fused: &[FusedDetection]) -> Self {
        Self {
            schema: FUSED_SCHEMA.to_string(),
            slide_id: slide_id.to_string(),
            fused: fused
                .iter()
                .map(|f| FusedRecord {
                    cx: f.circle.cx,
                    cy: f.circle.cy,
                    r: f.circle.r,
                    score: f.score,
                    count: f.count,
                    category: f.category.clone(),
                    members: f
                        .members
                        .iter()
                        .map(|m| MemberRecord {
                            model_id: m.model_id.clone(),
                            cx: m.circle.cx,
                            cy: m.circle.cy,
                            r: m.circle.r,
                            score: m.score,
                            label: (m.label != DEFAULT_LABEL).then(|| m.label.clone()),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn to_fused(&self, colors: &ColorMap) -> Result<Vec<FusedDetection>> {
        self.fused
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let circle = Circle::new(r.cx, r.cy, r.r)
                    .map_err(|e| Error::Validation(format!("fused[{i}]: {e}")))?;
                let members = r
                    .members
                    .iter()
                    .map(|m| {
                        Ok(Detection {
                            circle: Circle::new(m.cx, m.cy, m.r)
                                .map_err(|e| Error::Validation(format!("fused[{i}] member: {e}")))?,
                            score: m.score,
                            model_id: m.model_id.clone(),
                            label: m.label.clone().unwrap_or_else(|| DEFAULT_LABEL.to_string()),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let category = if r.category.is_empty() { category_name(r.count) } else { r.category.clone() };
                Ok(FusedDetection {
                    circle,
                    score: r.score,
                    count: r.count,
                    members,
                    category,
                    color: colors.color_for(r.count).to_string(),
                })
            })
            .collect()
    }

    pub fn predictions(&self) -> Vec<ScoredCircle> {
        self.fused
            .iter()
            .map(|r| ScoredCircle { circle: Circle { cx: r.cx, cy: r.cy, r: r.r }, score: r.score })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fused document serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: FusedFile = serde_json::from_str(&text).map_err(|source| Error::Parse {
            context: path.display().to_string(),
            source,
        })?;
        if doc.schema != FUSED_SCHEMA {
            return Err(Error::Validation(format!(
                "{}: expected schema `{FUSED_SCHEMA}`, found `{}`",
                path.display(),
                doc.schema
            )));
        }
        Ok(doc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelCounts {
    pub model_id: String,
    pub detections_in: usize,
    pub after_nms: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct StageCounts {
    pub patches: usize,
    pub models: usize,
    pub detections_in: usize,
    pub detections_after_assembly: usize,
    pub detections_after_nms: usize,
    pub clusters_formed: usize,
    pub fused_retained: usize,
    pub failed_patches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub millis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub slide_id: String,
    pub config: PipelineConfig,
    pub inputs: Vec<InputDigest>,
    pub counts: StageCounts,
    pub per_model: Vec<ModelCounts>,
    pub failures: Vec<PatchFailure>,
    pub stage_timings: Vec<StageTiming>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub slide_id: String,
    pub patches: Vec<Patch>,
    pub fused: Vec<FusedDetection>,
    pub fused_file: FusedFile,
    pub geojson: Value,
    pub manifest: Manifest,
}

impl PipelineOutput {
    /// Writes fused JSON, GeoJSON, and (optionally) the manifest.
    pub fn write(&self, fused_path: &Path, geojson_path: Option<&Path>, manifest_path: Option<&Path>) -> Result<()> {
        write_text(fused_path, &self.fused_file.to_json())?;
        if let Some(p) = geojson_path {
            write_text(p, &serde_json::to_string_pretty(&self.geojson).expect("geojson serializes"))?;
        }
        if let Some(p) = manifest_path {
            write_text(p, &serde_json::to_string_pretty(&self.manifest).expect("manifest serializes"))?;
        }
        Ok(())
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn digest_file(path: &Path) -> Result<InputDigest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

pub fn load_patches(path: &Path) -> Result<Vec<Patch>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Parse {
        context: path.display().to_string(),
        source,
    })
}

/// Per-model NMS, concurrent across models. Run order is preserved.
pub fn nms_runs(runs: &[ModelRun], t_ciou: f64) -> Vec<ModelRun> {
    runs.par_iter()
        .map(|r| ModelRun::new(r.model_id.clone(), nms(&r.detections, t_ciou), r.source))
        .collect()
}

struct Timer {
    timings: Vec<StageTiming>,
    last: Instant,
}

impl Timer {
    fn new() -> Self {
        Self { timings: Vec::new(), last: Instant::now() }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            millis: (now - self.last).as_secs_f64() * 1e3,
        });
        self.last = now;
    }
}

struct Ingested {
    slide_id: String,
    patches: Vec<Patch>,
    files: Vec<PatchDetections>,
    inputs: Vec<InputDigest>,
    failures: Vec<PatchFailure>,
}

fn ingest(cfg: &PipelineConfig) -> Result<Ingested> {
    let tile = |slide: &SlideGeometry| generate_patches(slide, &cfg.tiling);
    match &cfg.backend {
        BackendConfig::Files { patches, detections } => {
            let mut inputs = Vec::new();
            let patch_list = match patches {
                Some(p) => {
                    inputs.push(digest_file(p)?);
                    load_patches(p)?
                }
                None => tile(cfg.slide.as_ref().expect("validated"))?,
            };
            let files: Vec<PatchDetections> =
                detections.par_iter().map(load_detection_file).collect::<Result<_>>()?;
            for d in detections {
                inputs.push(digest_file(d)?);
            }
            let slide_id = cfg
                .slide
                .as_ref()
                .map(|s| s.slide_id.clone())
                .or_else(|| files.first().map(|f| f.slide_id.clone()))
                .unwrap_or_default();
            Ok(Ingested { slide_id, patches: patch_list, files, inputs, failures: Vec::new() })
        }
        BackendConfig::Remote { models } => {
            let slide = cfg.slide.as_ref().expect("validated");
            let patches = tile(slide)?;
            let mut files = Vec::new();
            let mut failures = Vec::new();
            for m in models {
                let client = RemoteClient::new(m.remote.clone())?;
                let (f, mut fail) = client.infer_slide(&m.model_id, &slide.slide_id, &patches);
                files.push(f);
                failures.append(&mut fail);
            }
            Ok(Ingested { slide_id: slide.slide_id.clone(), patches, files, inputs: Vec::new(), failures })
        }
        BackendConfig::Synthetic(synth) => {
            let patches = tile(&synth.slide)?;
            let gt = generate_ground_truth(synth)?;
            let runs = simulate_ensemble(&gt, synth)?;
            let files = runs
                .iter()
                .map(|r| {
                    let doc = run_to_detection_file(r, &synth.slide.slide_id, &patches);
                    let text = serde_json::to_string(&doc).expect("detection file serializes");
                    crate::backends::parse_detections(&text, &r.model_id)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Ingested {
                slide_id: synth.slide.slide_id.clone(),
                patches,
                files,
                inputs: Vec::new(),
                failures: Vec::new(),
            })
        }
    }
}

/// Runs every stage. Configuration problems abort before any work; per-patch
/// backend failures are recorded in the manifest and the run continues.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    match cfg.workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
            pool.install(|| run_stages(cfg))
        }
        None => run_stages(cfg),
    }
}

fn run_stages(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let mut timer = Timer::new();
    let ingested = ingest(cfg)?;
    timer.lap("ingest");

    let detections_in: usize = ingested.files.iter().map(PatchDetections::len).sum();
    let runs = assemble(&ingested.files, &ingested.patches)?;
    timer.lap("assemble");
    let detections_after_assembly: usize = runs.iter().map(ModelRun::len).sum();

    let deduped = nms_runs(&runs, cfg.nms_ciou);
    timer.lap("nms");

    let (clusters_formed, mut fused) = if deduped.is_empty() {
        (0, Vec::new())
    } else {
        let outcome = wcf_outcome(&deduped, &cfg.wcf)?;
        (outcome.clusters.len(), outcome.retained)
    };
    timer.lap("fuse");

    categorize(&mut fused, &cfg.colors);
    let fused_file = FusedFile::from_fused(&ingested.slide_id, &fused);
    let geojson = export_geojson(&fused, &ingested.slide_id);
    timer.lap("export");

    let per_model = runs
        .iter()
        .zip(&deduped)
        .map(|(r, d)| ModelCounts {
            model_id: r.model_id.clone(),
            detections_in: r.len(),
            after_nms: d.len(),
        })
        .collect();
    let counts = StageCounts {
        patches: ingested.patches.len(),
        models: runs.len(),
        detections_in,
        detections_after_assembly,
        detections_after_nms: deduped.iter().map(ModelRun::len).sum(),
        clusters_formed,
        fused_retained: fused.len(),
        failed_patches: ingested.failures.len(),
    };
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.to_string(),
        slide_id: ingested.slide_id.clone(),
        config: cfg.clone(),
        inputs: ingested.inputs,
        counts,
        per_model,
        failures: ingested.failures,
        stage_timings: timer.timings,
    };
    Ok(PipelineOutput {
        slide_id: ingested.slide_id,
        patches: ingested.patches,
        fused,
        fused_file,
        geojson,
        manifest,
    })
}
