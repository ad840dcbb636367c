//! Weighted circle fusion (WCF) across an ensemble of model runs.
//!
//! Detections from every model are pooled and visited in canonical order.
//! Each one joins the existing cluster whose current fused circle overlaps it
//! best (cIoU at least `t_match`), unless that cluster already holds a
//! detection from the same model; otherwise it seeds a new cluster. Cluster
//! geometry is the score-weighted mean of its members, the cluster score is
//! the plain mean, and `count` is the number of contributing models.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detection::{canonical_cmp, Detection};
use crate::error::{Error, Result};
use crate::geometry::{ciou, Circle};
use crate::spatial::GridIndex;
use crate::ModelRun;

pub const HUMAN_CATEGORY: &str = "human";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RetentionPolicy {
    /// Keep when enough models agree, or when the fused score alone is high.
    #[default]
    CountOrScore,
    CountAndScore,
    CountOnly,
}

impl std::str::FromStr for RetentionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "count_or_score" => Ok(Self::CountOrScore),
            "count_and_score" => Ok(Self::CountAndScore),
            "count_only" => Ok(Self::CountOnly),
            other => Err(Error::Config(format!("unknown retention policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WcfConfig {
    pub t_match: f64,
    pub t_count: usize,
    pub t_score: f64,
    pub retention_policy: RetentionPolicy,
}

impl Default for WcfConfig {
    fn default() -> Self {
        Self {
            t_match: 0.5,
            t_count: 2,
            t_score: 0.9,
            retention_policy: RetentionPolicy::CountOrScore,
        }
    }
}

impl WcfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_match > 0.0 && self.t_match < 1.0) {
            return Err(Error::Config(format!("t_match must lie in (0, 1), got {}", self.t_match)));
        }
        if self.t_count < 1 {
            return Err(Error::Config("t_count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.t_score) {
            return Err(Error::Config(format!("t_score must lie in [0, 1], got {}", self.t_score)));
        }
        Ok(())
    }

    pub fn retains(&self, count: usize, score: f64) -> bool {
        let by_count = count >= self.t_count;
        let by_score = score >= self.t_score;
        match self.retention_policy {
            RetentionPolicy::CountOrScore => by_count || by_score,
            RetentionPolicy::CountAndScore => by_count && by_score,
            RetentionPolicy::CountOnly => by_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedDetection {
    pub circle: Circle,
    pub score: f64,
    /// Distinct contributing models; 0 marks a reviewer-added circle.
    pub count: usize,
    pub members: Vec<Detection>,
    pub category: String,
    pub color: String,
}

impl FusedDetection {
    pub fn human(circle: Circle) -> Self {
        Self {
            circle,
            score: 1.0,
            count: 0,
            members: Vec::new(),
            category: HUMAN_CATEGORY.to_string(),
            color: ColorMap::default().human.clone(),
        }
    }

    pub fn is_human(&self) -> bool {
        self.count == 0
    }
}

pub fn category_name(count: usize) -> String {
    if count == 0 {
        HUMAN_CATEGORY.to_string()
    } else {
        format!("consensus_{count}")
    }
}

/// Display colours per consensus count. The last entry applies to every
/// larger count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColorMap {
    pub by_count: Vec<String>,
    pub human: String,
}

impl Default for ColorMap {
    fn default() -> Self {
        Self {
            by_count: ["#E6194B", "#F58231", "#FFE119", "#BFEF45", "#3CB44B"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            human: "#4363D8".to_string(),
        }
    }
}

impl ColorMap {
    pub fn color_for(&self, count: usize) -> &str {
        if count == 0 || self.by_count.is_empty() {
            return &self.human;
        }
        let i = (count - 1).min(self.by_count.len() - 1);
        &self.by_count[i]
    }
}

/// Parses `#RRGGBB` into an RGB triple.
pub fn hex_to_rgb(hex: &str) -> Option<[u8; 3]> {
    let h = hex.strip_prefix('#').unwrap_or(hex);
    if h.len() != 6 {
        return None;
    }
    let bytes = hex::decode(h).ok()?;
    Some([bytes[0], bytes[1], bytes[2]])
}

pub fn rgb_to_hex(rgb: [u8; 3]) -> String {
    format!("#{}", hex::encode_upper(rgb))
}

/// Assigns `consensus_{count}` categories and colours from `colors`.
pub fn categorize(fused: &mut [FusedDetection], colors: &ColorMap) {
    for f in fused {
        f.category = category_name(f.count);
        f.color = colors.color_for(f.count).to_string();
    }
}

#[derive(Debug, Clone, Copy)]
struct Axis {
    weighted: f64,
    plain: f64,
    min: f64,
    max: f64,
}

impl Axis {
    fn new(v: f64, w: f64) -> Self {
        Self { weighted: w * v, plain: v, min: v, max: v }
    }

    fn add(&mut self, v: f64, w: f64) {
        self.weighted += w * v;
        self.plain += v;
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    fn mean(&self, weight: f64, n: usize) -> f64 {
        let m = if weight > 0.0 { self.weighted / weight } else { self.plain / n as f64 };
        m.clamp(self.min, self.max)
    }
}

struct Cluster {
    members: Vec<usize>,
    models: Vec<String>,
    weight: f64,
    score_sum: f64,
    x: Axis,
    y: Axis,
    r: Axis,
    geometry: Circle,
}

impl Cluster {
    fn seed(idx: usize, d: &Detection) -> Self {
        let s = d.score;
        Self {
            members: vec![idx],
            models: vec![d.model_id.clone()],
            weight: s,
            score_sum: s,
            x: Axis::new(d.circle.cx, s),
            y: Axis::new(d.circle.cy, s),
            r: Axis::new(d.circle.r, s),
            geometry: d.circle,
        }
    }

    fn join(&mut self, idx: usize, d: &Detection) {
        let s = d.score;
        self.members.push(idx);
        self.models.push(d.model_id.clone());
        self.weight += s;
        self.score_sum += s;
        self.x.add(d.circle.cx, s);
        self.y.add(d.circle.cy, s);
        self.r.add(d.circle.r, s);
        let n = self.members.len();
        self.geometry = Circle {
            cx: self.x.mean(self.weight, n),
            cy: self.y.mean(self.weight, n),
            r: self.r.mean(self.weight, n),
        };
    }

    fn has_model(&self, model_id: &str) -> bool {
        self.models.iter().any(|m| m == model_id)
    }
}

/// Fusion output before and after retention.
#[derive(Debug, Clone, PartialEq)]
pub struct WcfOutcome {
    /// Every cluster, in creation order.
    pub clusters: Vec<FusedDetection>,
    /// Clusters passing the retention rule, sorted by score descending.
    pub retained: Vec<FusedDetection>,
}

fn fused_cmp(a: &FusedDetection, b: &FusedDetection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.circle.cx.total_cmp(&b.circle.cx))
        .then_with(|| a.circle.cy.total_cmp(&b.circle.cy))
        .then_with(|| a.circle.r.total_cmp(&b.circle.r))
        .then_with(|| b.count.cmp(&a.count))
}

pub fn wcf_outcome(runs: &[ModelRun], cfg: &WcfConfig) -> Result<WcfOutcome> {
    if runs.is_empty() {
        return Err(Error::NoRuns);
    }
    cfg.validate()?;
    let mut pooled: Vec<Detection> = runs.iter().flat_map(|r| r.detections.iter().cloned()).collect();
    pooled.sort_by(canonical_cmp);

    let mut clusters: Vec<Cluster> = Vec::new();
    let mut grid = GridIndex::for_circles(pooled.iter().map(|d| &d.circle));
    let mut cand = Vec::new();
    for (i, d) in pooled.iter().enumerate() {
        grid.candidates_into(&d.circle, &mut cand);
        let mut best: Option<(usize, f64)> = None;
        for &c in &cand {
            let v = ciou(&d.circle, &clusters[c].geometry);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((c, v));
            }
        }
        match best {
            Some((c, v)) if v > 0.0 && v >= cfg.t_match && !clusters[c].has_model(&d.model_id) => {
                let old = clusters[c].geometry;
                clusters[c].join(i, d);
                grid.remove(c, &old);
                grid.insert(c, &clusters[c].geometry);
            }
            _ => {
                let id = clusters.len();
                clusters.push(Cluster::seed(i, d));
                grid.insert(id, &d.circle);
            }
        }
    }

    let colors = ColorMap::default();
    let all: Vec<FusedDetection> = clusters
        .into_iter()
        .map(|c| {
            let mut distinct: Vec<&String> = c.models.iter().collect();
            distinct.sort();
            distinct.dedup();
            let count = distinct.len();
            FusedDetection {
                circle: c.geometry,
                score: c.score_sum / c.members.len() as f64,
                count,
                members: c.members.iter().map(|&m| pooled[m].clone()).collect(),
                category: category_name(count),
                color: colors.color_for(count).to_string(),
            }
        })
        .collect();
    let mut retained: Vec<FusedDetection> =
        all.iter().filter(|f| cfg.retains(f.count, f.score)).cloned().collect();
    retained.sort_by(fused_cmp);
    Ok(WcfOutcome { clusters: all, retained })
}

/// Fuses NMS-deduplicated model runs and applies the retention rule.
pub fn wcf(runs: &[ModelRun], cfg: &WcfConfig) -> Result<Vec<FusedDetection>> {
    Ok(wcf_outcome(runs, cfg)?.retained)
}

/// Number of retained detections per category.
pub fn category_counts(fused: &[FusedDetection]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for f in fused {
        *out.entry(f.category.clone()).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::RunSource;

    fn det(cx: f64, cy: f64, r: f64, score: f64, model: &str) -> Detection {
        Detection::new(Circle { cx, cy, r }, score, model)
    }

    fn run(model: &str, dets: Vec<Detection>) -> ModelRun {
        ModelRun::new(model, dets, RunSource::Synthetic)
    }

    #[test]
    fn worked_pair() {
        let a = det(100.0, 100.0, 50.0, 0.9, "model1");
        let b = det(104.0, 100.0, 50.0, 0.6, "model2");
        assert!(ciou(&a.circle, &b.circle) > 0.5);
        let out = wcf(&[run("model1", vec![a]), run("model2", vec![b])], &WcfConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        let f = &out[0];
        assert!((f.circle.cx - 101.6).abs() < 1e-12);
        assert_eq!(f.circle.cy, 100.0);
        assert_eq!(f.circle.r, 50.0);
        assert!((f.score - 0.75).abs() < 1e-12);
        assert_eq!(f.count, 2);
        assert_eq!(f.category, "consensus_2");
    }

    #[test]
    fn retention_rules() {
        let cfg = WcfConfig::default();
        let hi = wcf(&[run("m", vec![det(0.0, 0.0, 10.0, 0.95, "m")])], &cfg).unwrap();
        assert_eq!(hi.len(), 1);
        assert_eq!(hi[0].count, 1);
        let lo = wcf(&[run("m", vec![det(0.0, 0.0, 10.0, 0.5, "m")])], &cfg).unwrap();
        assert!(lo.is_empty());
        let strict = WcfConfig { retention_policy: RetentionPolicy::CountAndScore, ..cfg };
        assert!(wcf(&[run("m", vec![det(0.0, 0.0, 10.0, 0.95, "m")])], &strict).unwrap().is_empty());
        let count_only = WcfConfig { retention_policy: RetentionPolicy::CountOnly, ..cfg };
        assert!(wcf(&[run("m", vec![det(0.0, 0.0, 10.0, 0.95, "m")])], &count_only).unwrap().is_empty());
    }

    #[test]
    fn identical_models() {
        let runs: Vec<ModelRun> = (0..5)
            .map(|k| {
                let m = format!("m{k}");
                run(&m, vec![det(123.4, 567.8, 41.3, 0.8, &m)])
            })
            .collect();
        let out = wcf(&runs, &WcfConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].circle, Circle { cx: 123.4, cy: 567.8, r: 41.3 });
        assert!((out[0].score - 0.8).abs() < 1e-15);
        assert_eq!(out[0].count, 5);
    }

    #[test]
    fn same_model_never_joins_twice() {
        let a = det(0.0, 0.0, 10.0, 0.9, "m");
        let b = det(0.5, 0.0, 10.0, 0.8, "m");
        let out = wcf_outcome(&[run("m", vec![a, b])], &WcfConfig::default()).unwrap();
        assert_eq!(out.clusters.len(), 2);
        assert!(out.clusters.iter().all(|c| c.count == 1));
    }

    #[test]
    fn errors_and_empty() {
        assert!(matches!(wcf(&[], &WcfConfig::default()), Err(Error::NoRuns)));
        assert!(wcf(&[run("m", vec![])], &WcfConfig::default()).unwrap().is_empty());
        let bad = WcfConfig { t_match: 0.0, ..WcfConfig::default() };
        assert!(wcf(&[run("m", vec![])], &bad).is_err());
    }

    #[test]
    fn zero_scores_use_plain_mean() {
        let a = det(0.0, 0.0, 10.0, 0.0, "a");
        let b = det(2.0, 0.0, 10.0, 0.0, "b");
        let out = wcf_outcome(&[run("a", vec![a]), run("b", vec![b])], &WcfConfig::default()).unwrap();
        assert_eq!(out.clusters.len(), 1);
        assert_eq!(out.clusters[0].circle.cx, 1.0);
    }

    #[test]
    fn colors() {
        let map = ColorMap::default();
        assert_eq!(map.color_for(1), "#E6194B");
        assert_eq!(map.color_for(5), "#3CB44B");
        assert_eq!(map.color_for(7), "#3CB44B");
        assert_eq!(category_name(7), "consensus_7");
        assert_eq!(hex_to_rgb("#F58231"), Some([0xF5, 0x82, 0x31]));
        assert_eq!(rgb_to_hex([0xF5, 0x82, 0x31]), "#F58231");
        let mut f = vec![FusedDetection::human(Circle { cx: 0.0, cy: 0.0, r: 1.0 })];
        f[0].count = 1;
        categorize(&mut f, &map);
        assert_eq!((f[0].category.as_str(), f[0].color.as_str()), ("consensus_1", "#E6194B"));
    }
}
