//! cIoU-threshold matching and COCO-style interpolated AP / AR.

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ciou, Circle};
use crate::spatial::GridIndex;

pub const GT_SCHEMA: &str = "circlefuse-gt/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub interpolation_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            interpolation_points: 101,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::Config("at least one cIoU threshold is required".into()));
        }
        for w in self.thresholds.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config("thresholds must be strictly increasing".into()));
            }
        }
        if self.thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::Config("thresholds must lie in (0, 1]".into()));
        }
        if self.interpolation_points < 2 {
            return Err(Error::Config("interpolation_points must be at least 2".into()));
        }
        Ok(())
    }

    /// Parses `start:stop:step`, e.g. `0.5:0.95:0.05`.
    pub fn parse_range(spec: &str) -> Result<Vec<f64>> {
        let parts: Vec<&str> = spec.split(':').collect();
        let bad = || Error::Config(format!("threshold range `{spec}` is not start:stop:step"));
        if parts.len() == 1 {
            return Ok(vec![parts[0].trim().parse().map_err(|_| bad())?]);
        }
        if parts.len() != 3 {
            return Err(bad());
        }
        let start: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let stop: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let step: f64 = parts[2].trim().parse().map_err(|_| bad())?;
        if step.is_nan() || step <= 0.0 || stop < start {
            return Err(bad());
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        // Rounded to 1e-12 so 0.5 + 9 * 0.05 reads back as 0.95.
        Ok((0..=n)
            .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredCircle {
    pub circle: Circle,
    pub score: f64,
}

fn scored_cmp(a: &ScoredCircle, b: &ScoredCircle) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.circle.cx.total_cmp(&b.circle.cx))
        .then_with(|| a.circle.cy.total_cmp(&b.circle.cy))
        .then_with(|| a.circle.r.total_cmp(&b.circle.r))
}

pub fn sort_predictions(preds: &mut [ScoredCircle]) {
    preds.sort_by(scored_cmp);
}

/// Greedy matching of score-ordered predictions: each prediction takes the
/// unmatched ground truth with the highest cIoU at or above `t` (lowest index
/// on ties). Returns TP flags in prediction order.
pub fn match_at_threshold(preds: &[ScoredCircle], gts: &[Circle], t: f64) -> Vec<bool> {
    let mut grid = GridIndex::for_circles(gts.iter());
    for (i, g) in gts.iter().enumerate() {
        grid.insert(i, g);
    }
    match_with_index(preds, gts, &grid, t)
}

fn match_with_index(preds: &[ScoredCircle], gts: &[Circle], grid: &GridIndex, t: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    let mut cand = Vec::new();
    preds
        .iter()
        .map(|p| {
            grid.candidates_into(&p.circle, &mut cand);
            let mut best: Option<(usize, f64)> = None;
            for &g in &cand {
                if taken[g] {
                    continue;
                }
                let v = ciou(&p.circle, &gts[g]);
                if v >= t && v > 0.0 && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Interpolated average precision over `points` evenly spaced recall levels.
/// `flags` must already be in descending score order.
pub fn average_precision(flags: &[bool], n_gt: usize, points: usize) -> f64 {
    if n_gt == 0 {
        return if flags.is_empty() { 1.0 } else { 0.0 };
    }
    if flags.is_empty() || points == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // Precision envelope: best precision at any recall to the right.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let last = (points - 1).max(1) as f64;
    let mut sum = 0.0;
    for k in 0..points {
        let level = k as f64 / last;
        let idx = recall.partition_point(|&r| r < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / points as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub threshold: f64,
    pub ap: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_per_threshold: Vec<ThresholdResult>,
    pub map_50_95: f64,
    pub ap_50: f64,
    pub ap_75: f64,
    pub average_recall: f64,
    pub n_gt: usize,
    pub n_pred: usize,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("predictions: {}  ground truth: {}\n", self.n_pred, self.n_gt));
        s.push_str("threshold      AP  recall\n");
        for t in &self.ap_per_threshold {
            s.push_str(&format!("{:>9.2}  {:.4}  {:.4}\n", t.threshold, t.ap, t.recall));
        }
        s.push_str(&format!("mAP(0.5:0.95)  {:.4}\n", self.map_50_95));
        s.push_str(&format!("mAP@0.5        {:.4}\n", self.ap_50));
        s.push_str(&format!("mAP@0.75       {:.4}\n", self.ap_75));
        s.push_str(&format!("AR(0.5:0.95)   {:.4}\n", self.average_recall));
        s
    }
}

fn threshold_result(sorted: &[ScoredCircle], gts: &[Circle], grid: &GridIndex, t: f64, points: usize) -> ThresholdResult {
    let flags = match_with_index(sorted, gts, grid, t);
    let matched = flags.iter().filter(|&&f| f).count();
    let recall = if gts.is_empty() { 1.0 } else { matched as f64 / gts.len() as f64 };
    ThresholdResult {
        threshold: t,
        ap: average_precision(&flags, gts.len(), points),
        recall,
    }
}

/// Full metric suite over the configured cIoU thresholds.
pub fn evaluate(preds: &[ScoredCircle], gts: &[Circle], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut sorted = preds.to_vec();
    sort_predictions(&mut sorted);
    let mut grid = GridIndex::for_circles(gts.iter());
    for (i, g) in gts.iter().enumerate() {
        grid.insert(i, g);
    }
    let per: Vec<ThresholdResult> = cfg
        .thresholds
        .par_iter()
        .map(|&t| threshold_result(&sorted, gts, &grid, t, cfg.interpolation_points))
        .collect();
    let at = |t: f64| {
        per.iter()
            .find(|r| (r.threshold - t).abs() < 1e-9)
            .map(|r| r.ap)
            .unwrap_or_else(|| threshold_result(&sorted, gts, &grid, t, cfg.interpolation_points).ap)
    };
    let n = per.len() as f64;
    Ok(EvalReport {
        map_50_95: per.iter().map(|r| r.ap).sum::<f64>() / n,
        ap_50: at(0.5),
        ap_75: at(0.75),
        average_recall: per.iter().map(|r| r.recall).sum::<f64>() / n,
        n_gt: gts.len(),
        n_pred: preds.len(),
        ap_per_threshold: per,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtCircle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl GtCircle {
    pub fn circle(&self) -> Circle {
        Circle { cx: self.cx, cy: self.cy, r: self.r }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub schema: String,
    pub slide_id: String,
    pub circles: Vec<GtCircle>,
}

pub fn parse_ground_truth(text: &str, context: &str) -> Result<GroundTruthFile> {
    let doc: GroundTruthFile = serde_json::from_str(text).map_err(|source| Error::Parse {
        context: context.to_string(),
        source,
    })?;
    if doc.schema != GT_SCHEMA {
        return Err(Error::Validation(format!(
            "{context}: expected schema `{GT_SCHEMA}`, found `{}`",
            doc.schema
        )));
    }
    for (i, c) in doc.circles.iter().enumerate() {
        c.circle()
            .validate()
            .map_err(|e| Error::Validation(format!("{context}: circles[{i}]: {e}")))?;
    }
    Ok(doc)
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruthFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ground_truth(&text, &path.display().to_string())
}
