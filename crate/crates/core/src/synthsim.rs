//! Seeded synthetic ensembles: planted ground-truth circles plus K noisy,
//! independent model detection sets.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::backends::{DetectionFile, LocalDetection, PatchRecords};
use crate::detection::{sort_canonical, Detection, ModelRun, RunSource, DEFAULT_LABEL};
use crate::error::{Error, Result};
use crate::evaluation::{GroundTruthFile, GtCircle, GT_SCHEMA};
use crate::geometry::{ciou, Circle};
use crate::spatial::GridIndex;
use crate::tiling::{from_slide_coords, Patch, SlideGeometry};

/// Planted objects may overlap, but never with cIoU at or above this.
pub const MAX_GT_CIOU: f64 = 0.3;

const ATTEMPTS_PER_OBJECT: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub slide: SlideGeometry,
    pub n_objects: usize,
    pub radius_range: [f64; 2],
    pub n_models: usize,
    pub center_jitter_sigma: f64,
    pub radius_jitter_sigma: f64,
    pub miss_rate: f64,
    /// Expected false positives per model per megapixel.
    pub fp_rate: f64,
    pub tp_score_range: [f64; 2],
    pub fp_score_range: [f64; 2],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            slide: SlideGeometry {
                slide_id: "synthetic".into(),
                width: 8000,
                height: 8000,
            },
            n_objects: 200,
            radius_range: [30.0, 70.0],
            n_models: 5,
            center_jitter_sigma: 4.0,
            radius_jitter_sigma: 3.0,
            miss_rate: 0.15,
            fp_rate: 0.47,
            tp_score_range: [0.1, 1.0],
            fp_score_range: [0.05, 0.6],
        }
    }
}

impl SynthConfig {
    /// Every model reproduces the ground truth exactly.
    pub fn noiseless(self) -> Self {
        Self {
            center_jitter_sigma: 0.0,
            radius_jitter_sigma: 0.0,
            miss_rate: 0.0,
            fp_rate: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.slide.validate()?;
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !ordered(self.radius_range) || self.radius_range[0] <= 0.0 {
            return Err(Error::Config(format!("radius_range {:?} must be positive and ordered", self.radius_range)));
        }
        for (name, r) in [("tp_score_range", self.tp_score_range), ("fp_score_range", self.fp_score_range)] {
            if !ordered(r) || r[0] < 0.0 || r[1] > 1.0 {
                return Err(Error::Config(format!("{name} {r:?} must be an ordered sub-range of [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.miss_rate) {
            return Err(Error::Config(format!("miss_rate {} outside [0, 1]", self.miss_rate)));
        }
        if !(self.fp_rate >= 0.0 && self.fp_rate.is_finite()) {
            return Err(Error::Config(format!("fp_rate {} must be non-negative", self.fp_rate)));
        }
        if !(self.center_jitter_sigma >= 0.0 && self.radius_jitter_sigma >= 0.0) {
            return Err(Error::Config("jitter sigmas must be non-negative".into()));
        }
        let max_r = self.radius_range[1];
        if self.n_objects > 0 && (2.0 * max_r > self.slide.width as f64 || 2.0 * max_r > self.slide.height as f64) {
            return Err(Error::Config("radius_range does not fit inside the slide".into()));
        }
        Ok(())
    }

    pub fn model_id(index: usize) -> String {
        format!("model_{}", index + 1)
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSet {
    pub slide_id: String,
    pub circles: Vec<Circle>,
    pub label: String,
}

impl GroundTruthSet {
    pub fn to_file(&self) -> GroundTruthFile {
        GroundTruthFile {
            schema: GT_SCHEMA.to_string(),
            slide_id: self.slide_id.clone(),
            circles: self
                .circles
                .iter()
                .map(|c| GtCircle { cx: c.cx, cy: c.cy, r: c.r, label: Some(self.label.clone()) })
                .collect(),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

/// Rejection-samples `n_objects` circles fully inside the slide with pairwise
/// cIoU below [`MAX_GT_CIOU`].
pub fn generate_ground_truth(cfg: &SynthConfig) -> Result<GroundTruthSet> {
    cfg.validate()?;
    let mut rng = cfg.rng(0);
    let (w, h) = (cfg.slide.width as f64, cfg.slide.height as f64);
    let mut grid = GridIndex::new(2.0 * cfg.radius_range[1].max(1.0));
    let mut circles: Vec<Circle> = Vec::with_capacity(cfg.n_objects);
    let mut cand = Vec::new();
    for i in 0..cfg.n_objects {
        let mut placed = false;
        for _ in 0..ATTEMPTS_PER_OBJECT {
            let r = uniform(&mut rng, cfg.radius_range);
            let c = Circle {
                cx: uniform(&mut rng, [r, w - r]),
                cy: uniform(&mut rng, [r, h - r]),
                r,
            };
            grid.candidates_into(&c, &mut cand);
            if cand.iter().all(|&j| ciou(&c, &circles[j]) < MAX_GT_CIOU) {
                grid.insert(circles.len(), &c);
                circles.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement(format!(
                "could not place object {} of {} after {ATTEMPTS_PER_OBJECT} attempts; lower n_objects or radius_range",
                i + 1,
                cfg.n_objects
            )));
        }
    }
    Ok(GroundTruthSet {
        slide_id: cfg.slide.slide_id.clone(),
        circles,
        label: DEFAULT_LABEL.to_string(),
    })
}

/// One simulated model. Each model draws from its own RNG stream, so models
/// are independent of each other and of generation order.
pub fn simulate_model(gt: &GroundTruthSet, cfg: &SynthConfig, model_index: usize) -> Result<ModelRun> {
    cfg.validate()?;
    let model_id = SynthConfig::model_id(model_index);
    let mut rng = cfg.rng(model_index as u64 + 1);
    let center = Normal::new(0.0, cfg.center_jitter_sigma)
        .map_err(|e| Error::Config(format!("center jitter: {e}")))?;
    let radius = Normal::new(0.0, cfg.radius_jitter_sigma)
        .map_err(|e| Error::Config(format!("radius jitter: {e}")))?;
    let mut dets = Vec::new();
    for g in &gt.circles {
        if rng.random::<f64>() < cfg.miss_rate {
            continue;
        }
        let dx = center.sample(&mut rng);
        let dy = center.sample(&mut rng);
        let dr = radius.sample(&mut rng);
        let score = uniform(&mut rng, cfg.tp_score_range);
        let circle = Circle {
            cx: g.cx + dx,
            cy: g.cy + dy,
            r: (g.r + dr).max(1.0),
        };
        dets.push(Detection::new(circle, score, model_id.clone()));
    }
    let megapixels = cfg.slide.width as f64 * cfg.slide.height as f64 / 1e6;
    let lambda = cfg.fp_rate * megapixels;
    let n_fp = if lambda > 0.0 {
        Poisson::new(lambda)
            .map_err(|e| Error::Config(format!("fp_rate: {e}")))?
            .sample(&mut rng) as usize
    } else {
        0
    };
    let (w, h) = (cfg.slide.width as f64, cfg.slide.height as f64);
    for _ in 0..n_fp {
        let r = uniform(&mut rng, cfg.radius_range).min(w / 2.0).min(h / 2.0);
        let circle = Circle {
            cx: uniform(&mut rng, [r, w - r]),
            cy: uniform(&mut rng, [r, h - r]),
            r,
        };
        let score = uniform(&mut rng, cfg.fp_score_range);
        dets.push(Detection::new(circle, score, model_id.clone()));
    }
    sort_canonical(&mut dets);
    Ok(ModelRun::new(model_id, dets, RunSource::Synthetic))
}

pub fn simulate_ensemble(gt: &GroundTruthSet, cfg: &SynthConfig) -> Result<Vec<ModelRun>> {
    (0..cfg.n_models).map(|k| simulate_model(gt, cfg, k)).collect()
}

fn rect_distance(p: &Patch, x: f64, y: f64) -> f64 {
    let dx = (p.x as f64 - x).max(0.0).max(x - (p.x + p.w) as f64);
    let dy = (p.y as f64 - y).max(0.0).max(y - (p.y + p.h) as f64);
    dx.hypot(dy)
}

/// Serializes a slide-space run as a detection file. Each detection is written
/// into every patch containing its center (or the nearest patch when the
/// center lies off-slide), so tiled output carries the same overlap
/// duplicates a patch-wise detector would produce.
pub fn run_to_detection_file(run: &ModelRun, slide_id: &str, patches: &[Patch]) -> DetectionFile {
    let mut cols: Vec<(u64, u64)> = patches.iter().map(|p| (p.x, p.w)).collect();
    let mut rows: Vec<(u64, u64)> = patches.iter().map(|p| (p.y, p.h)).collect();
    cols.sort_unstable();
    cols.dedup();
    rows.sort_unstable();
    rows.dedup();
    let by_origin: HashMap<(u64, u64), usize> =
        patches.iter().enumerate().map(|(i, p)| ((p.x, p.y), i)).collect();
    let inside = |spans: &[(u64, u64)], v: f64| -> Vec<u64> {
        spans
            .iter()
            .filter(|&&(s, len)| v >= s as f64 && v < (s + len) as f64)
            .map(|&(s, _)| s)
            .collect()
    };

    let mut records: Vec<Vec<LocalDetection>> = vec![Vec::new(); patches.len()];
    for d in &run.detections {
        let (x, y) = (d.circle.cx, d.circle.cy);
        let mut hit = false;
        for px in inside(&cols, x) {
            for py in inside(&rows, y) {
                if let Some(&i) = by_origin.get(&(px, py)) {
                    records[i].push(local_record(&patches[i], d));
                    hit = true;
                }
            }
        }
        if !hit {
            if let Some((i, p)) = patches
                .iter()
                .enumerate()
                .min_by(|a, b| rect_distance(a.1, x, y).total_cmp(&rect_distance(b.1, x, y)))
            {
                records[i].push(local_record(p, d));
            }
        }
    }
    let mut file = DetectionFile::new(&run.model_id, slide_id);
    file.patches = patches
        .iter()
        .zip(records)
        .filter(|(_, r)| !r.is_empty())
        .map(|(p, detections)| PatchRecords { patch_id: p.patch_id.clone(), detections })
        .collect();
    file
}

fn local_record(p: &Patch, d: &Detection) -> LocalDetection {
    let c = from_slide_coords(p, &d.circle);
    LocalDetection {
        cx: c.cx,
        cy: c.cy,
        r: c.r,
        score: d.score,
        label: (d.label != DEFAULT_LABEL).then(|| d.label.clone()),
    }
}
