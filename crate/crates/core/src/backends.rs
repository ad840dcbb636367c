//! Detection sources: the detection-file reader, the optional remote inference
//! client, and assembly of patch-local records into slide-space model runs.

use std::collections::BTreeMap;
use std::path::Path;
use std::thread;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::{sort_canonical, Detection, ModelRun, RunSource, DEFAULT_LABEL};
use crate::error::{Error, Result};
use crate::geometry::Circle;
use crate::tiling::{to_slide_coords, Patch};

pub const DETECTIONS_SCHEMA: &str = "circlefuse-detections/1";

/// Wire form of one detection, in patch-local pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalDetection {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl LocalDetection {
    pub fn circle(&self) -> Circle {
        Circle {
            cx: self.cx,
            cy: self.cy,
            r: self.r,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(format!("score {} outside [0, 1]", self.score));
        }
        if !self.r.is_finite() || self.r <= 0.0 {
            return Err(format!("radius {} must be positive", self.r));
        }
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(format!("center ({}, {}) is not finite", self.cx, self.cy));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecords {
    pub patch_id: String,
    #[serde(default)]
    pub detections: Vec<LocalDetection>,
}

/// On-disk detection file: one model, one slide, records grouped by patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFile {
    pub schema: String,
    pub model_id: String,
    pub slide_id: String,
    #[serde(default)]
    pub patches: Vec<PatchRecords>,
}

impl DetectionFile {
    pub fn new(model_id: impl Into<String>, slide_id: impl Into<String>) -> Self {
        Self {
            schema: DETECTIONS_SCHEMA.to_string(),
            model_id: model_id.into(),
            slide_id: slide_id.into(),
            patches: Vec::new(),
        }
    }
}

/// Parsed and validated detections of one model, keyed by patch id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PatchDetections {
    pub model_id: String,
    pub slide_id: String,
    pub by_patch: BTreeMap<String, Vec<LocalDetection>>,
}

impl PatchDetections {
    pub fn len(&self) -> usize {
        self.by_patch.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_file(&self) -> DetectionFile {
        let mut f = DetectionFile::new(&self.model_id, &self.slide_id);
        f.patches = self
            .by_patch
            .iter()
            .map(|(id, dets)| PatchRecords {
                patch_id: id.clone(),
                detections: dets.clone(),
            })
            .collect();
        f
    }
}

/// Parses a detection document. Validation errors name the patch and record
/// index that failed.
pub fn parse_detections(text: &str, context: &str) -> Result<PatchDetections> {
    let doc: DetectionFile = serde_json::from_str(text).map_err(|source| Error::Parse {
        context: context.to_string(),
        source,
    })?;
    if doc.schema != DETECTIONS_SCHEMA {
        return Err(Error::Validation(format!(
            "{context}: expected schema `{DETECTIONS_SCHEMA}`, found `{}`",
            doc.schema
        )));
    }
    let mut by_patch: BTreeMap<String, Vec<LocalDetection>> = BTreeMap::new();
    for (pi, p) in doc.patches.into_iter().enumerate() {
        for (di, d) in p.detections.iter().enumerate() {
            d.validate().map_err(|msg| {
                Error::Validation(format!(
                    "{context}: patches[{pi}] (`{}`) detections[{di}]: {msg}",
                    p.patch_id
                ))
            })?;
        }
        by_patch.entry(p.patch_id).or_default().extend(p.detections);
    }
    Ok(PatchDetections {
        model_id: doc.model_id,
        slide_id: doc.slide_id,
        by_patch,
    })
}

pub fn load_detection_file(path: impl AsRef<Path>) -> Result<PatchDetections> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, &path.display().to_string())
}

/// Moves patch-local records into slide space and groups them per model.
/// Records from files sharing a model id are merged. Runs come back ordered by
/// model id, detections in canonical order.
pub fn assemble(files: &[PatchDetections], patches: &[Patch]) -> Result<Vec<ModelRun>> {
    let index: BTreeMap<&str, &Patch> = patches.iter().map(|p| (p.patch_id.as_str(), p)).collect();
    let mut runs: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for f in files {
        let out = runs.entry(f.model_id.clone()).or_default();
        for (patch_id, dets) in &f.by_patch {
            let patch = index
                .get(patch_id.as_str())
                .ok_or_else(|| Error::UnknownPatch(patch_id.clone()))?;
            out.extend(dets.iter().map(|d| Detection {
                circle: to_slide_coords(patch, &d.circle()),
                score: d.score,
                model_id: f.model_id.clone(),
                label: d.label.clone().unwrap_or_else(|| DEFAULT_LABEL.to_string()),
            }));
        }
    }
    Ok(runs
        .into_iter()
        .map(|(model_id, mut dets)| {
            sort_canonical(&mut dets);
            ModelRun::new(model_id, dets, RunSource::File)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_ms: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            max_retries: 2,
            backoff_ms: 200,
            timeout_ms: 30_000,
        }
    }
}

#[derive(Serialize)]
struct InferPatch {
    x: u64,
    y: u64,
    w: u64,
    h: u64,
}

#[derive(Serialize)]
struct InferRequest<'a> {
    slide_id: &'a str,
    patch: InferPatch,
}

#[derive(Deserialize)]
struct InferResponse {
    detections: Vec<LocalDetection>,
}

/// Blocking client for a model server exposing `POST {endpoint}/infer`.
#[derive(Debug, Clone)]
pub struct RemoteClient {
    cfg: RemoteConfig,
    http: reqwest::blocking::Client,
}

enum Attempt {
    Transient(String),
    Fatal(Error),
}

impl RemoteClient {
    pub fn new(cfg: RemoteConfig) -> Result<Self> {
        if cfg.endpoint.is_empty() {
            return Err(Error::Config("remote endpoint is empty".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| Error::Config(format!("cannot build http client: {e}")))?;
        Ok(Self { cfg, http })
    }

    fn url(&self) -> String {
        format!("{}/infer", self.cfg.endpoint.trim_end_matches('/'))
    }

    fn attempt(&self, body: &InferRequest<'_>, patch_id: &str) -> std::result::Result<Vec<LocalDetection>, Attempt> {
        let resp = self
            .http
            .post(self.url())
            .json(body)
            .send()
            .map_err(|e| Attempt::Transient(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status == reqwest::StatusCode::TOO_MANY_REQUESTS {
            return Err(Attempt::Transient(format!("server returned {status}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(Error::Backend {
                patch_id: patch_id.to_string(),
                reason: format!("server returned {status}"),
            }));
        }
        let text = resp.text().map_err(|e| Attempt::Transient(e.to_string()))?;
        let parsed: InferResponse = serde_json::from_str(&text).map_err(|source| {
            Attempt::Fatal(Error::Parse {
                context: format!("inference response for patch `{patch_id}`"),
                source,
            })
        })?;
        for (i, d) in parsed.detections.iter().enumerate() {
            d.validate().map_err(|msg| {
                Attempt::Fatal(Error::Validation(format!(
                    "inference response for patch `{patch_id}` detections[{i}]: {msg}"
                )))
            })?;
        }
        Ok(parsed.detections)
    }

    /// Patch-local detections for one patch, retrying transient failures with
    /// exponential backoff.
    pub fn infer_remote(&self, slide_id: &str, patch: &Patch) -> Result<Vec<LocalDetection>> {
        let body = InferRequest {
            slide_id,
            patch: InferPatch {
                x: patch.x,
                y: patch.y,
                w: patch.w,
                h: patch.h,
            },
        };
        let mut last = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                let wait = self.cfg.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                thread::sleep(Duration::from_millis(wait));
            }
            match self.attempt(&body, &patch.patch_id) {
                Ok(d) => return Ok(d),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Transient(msg)) => last = msg,
            }
        }
        Err(Error::Backend {
            patch_id: patch.patch_id.clone(),
            reason: format!("gave up after {} attempts: {last}", self.cfg.max_retries + 1),
        })
    }

    /// Runs every patch (concurrently on the current rayon pool) and collects
    /// successes into one model's patch mapping. Failed patches are returned
    /// alongside instead of aborting the rest.
    pub fn infer_slide(
        &self,
        model_id: &str,
        slide_id: &str,
        patches: &[Patch],
    ) -> (PatchDetections, Vec<PatchFailure>) {
        let results: Vec<(String, Result<Vec<LocalDetection>>)> = patches
            .par_iter()
            .map(|p| (p.patch_id.clone(), self.infer_remote(slide_id, p)))
            .collect();
        let mut out = PatchDetections {
            model_id: model_id.to_string(),
            slide_id: slide_id.to_string(),
            by_patch: BTreeMap::new(),
        };
        let mut failures = Vec::new();
        for (patch_id, r) in results {
            match r {
                Ok(d) => {
                    out.by_patch.insert(patch_id, d);
                }
                Err(e) => failures.push(PatchFailure {
                    model_id: model_id.to_string(),
                    patch_id,
                    reason: e.to_string(),
                }),
            }
        }
        (out, failures)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchFailure {
    pub model_id: String,
    pub patch_id: String,
    pub reason: String,
}
