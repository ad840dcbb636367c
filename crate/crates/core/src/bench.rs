//! Seeded ensemble benchmark comparing single models, pooled NMS, pooled
//! Soft-NMS and WCF on synthetic slides.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::detection::{Detection, ModelRun};
use crate::error::Result;
use crate::evaluation::{evaluate, EvalConfig, EvalReport, ScoredCircle};
use crate::fusion::{wcf, WcfConfig};
use crate::suppression::{nms, soft_nms, SoftNmsConfig, DEFAULT_NMS_CIOU};
use crate::synthsim::{generate_ground_truth, simulate_ensemble, SynthConfig};

pub const MODEL_AVG: &str = "model avg.";
pub const NMS_POOL: &str = "nms-pool";
pub const SOFT_NMS_POOL: &str = "soft-nms-pool";
pub const WCF: &str = "wcf";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub synth: SynthConfig,
    pub nms_ciou: f64,
    pub soft_nms: SoftNmsConfig,
    pub wcf: WcfConfig,
    pub eval: EvalConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            nms_ciou: DEFAULT_NMS_CIOU,
            soft_nms: SoftNmsConfig::default(),
            wcf: WcfConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// The four headline numbers of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Metrics {
    pub map_50_95: f64,
    pub ap_50: f64,
    pub ap_75: f64,
    pub average_recall: f64,
}

impl From<&EvalReport> for Metrics {
    fn from(r: &EvalReport) -> Self {
        Self {
            map_50_95: r.map_50_95,
            ap_50: r.ap_50,
            ap_75: r.ap_75,
            average_recall: r.average_recall,
        }
    }
}

impl Metrics {
    fn mean<'a>(items: impl IntoIterator<Item = &'a Metrics>) -> Metrics {
        let mut acc = Metrics::default();
        let mut n = 0usize;
        for m in items {
            acc.map_50_95 += m.map_50_95;
            acc.ap_50 += m.ap_50;
            acc.ap_75 += m.ap_75;
            acc.average_recall += m.average_recall;
            n += 1;
        }
        if n > 0 {
            let k = n as f64;
            acc.map_50_95 /= k;
            acc.ap_50 /= k;
            acc.ap_75 /= k;
            acc.average_recall /= k;
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Full reports per method (models individually plus the fusion methods).
    pub reports: BTreeMap<String, EvalReport>,
    /// Headline metrics per method, including the per-seed model average.
    pub metrics: BTreeMap<String, Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub mean: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub rows: Vec<MethodRow>,
    pub seeds: Vec<SeedResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided p-value for "first method better".
    pub p_value: f64,
}

/// Paired one-sided sign test; ties are dropped.
pub fn sign_test(better: &[f64], worse: &[f64]) -> SignTest {
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for (a, b) in better.iter().zip(worse) {
        match a.partial_cmp(b) {
            Some(std::cmp::Ordering::Greater) => wins += 1,
            Some(std::cmp::Ordering::Less) => losses += 1,
            _ => ties += 1,
        }
    }
    let n = (wins + losses) as u64;
    let p_value = if wins == 0 {
        1.0
    } else {
        let dist = Binomial::new(0.5, n).expect("valid binomial");
        // P(X >= wins)
        dist.sf(wins as u64 - 1)
    };
    SignTest { wins, losses, ties, p_value }
}

fn predictions(dets: &[Detection]) -> Vec<ScoredCircle> {
    dets.iter().map(|d| ScoredCircle { circle: d.circle, score: d.score }).collect()
}

fn pooled(runs: &[ModelRun]) -> Vec<Detection> {
    runs.iter().flat_map(|r| r.detections.iter().cloned()).collect()
}

pub fn run_seed(cfg: &BenchConfig, seed: u64) -> Result<SeedResult> {
    let synth = SynthConfig { seed, ..cfg.synth.clone() };
    let gt = generate_ground_truth(&synth)?;
    let runs = simulate_ensemble(&gt, &synth)?;
    let gts = &gt.circles;
    let mut reports = BTreeMap::new();

    let deduped: Vec<ModelRun> = runs
        .iter()
        .map(|r| ModelRun::new(r.model_id.clone(), nms(&r.detections, cfg.nms_ciou), r.source))
        .collect();
    for r in &deduped {
        reports.insert(r.model_id.clone(), evaluate(&predictions(&r.detections), gts, &cfg.eval)?);
    }
    let all = pooled(&runs);
    reports.insert(NMS_POOL.to_string(), evaluate(&predictions(&nms(&all, cfg.nms_ciou)), gts, &cfg.eval)?);
    reports.insert(
        SOFT_NMS_POOL.to_string(),
        evaluate(&predictions(&soft_nms(&all, &cfg.soft_nms)), gts, &cfg.eval)?,
    );
    let fused = if deduped.is_empty() { Vec::new() } else { wcf(&deduped, &cfg.wcf)? };
    let fused_preds: Vec<ScoredCircle> =
        fused.iter().map(|f| ScoredCircle { circle: f.circle, score: f.score }).collect();
    reports.insert(WCF.to_string(), evaluate(&fused_preds, gts, &cfg.eval)?);

    let mut metrics: BTreeMap<String, Metrics> = reports.iter().map(|(k, v)| (k.clone(), v.into())).collect();
    let model_avg = Metrics::mean(deduped.iter().map(|r| &metrics[&r.model_id]));
    metrics.insert(MODEL_AVG.to_string(), model_avg);
    Ok(SeedResult { seed, reports, metrics })
}

/// Runs every seed (concurrently) and averages per method.
pub fn bench_table1(cfg: &BenchConfig, seeds: &[u64]) -> Result<BenchTable> {
    let results: Vec<SeedResult> = seeds.par_iter().map(|&s| run_seed(cfg, s)).collect::<Result<_>>()?;
    let mut order: Vec<String> = (0..cfg.synth.n_models).map(SynthConfig::model_id).collect();
    order.extend([MODEL_AVG, NMS_POOL, SOFT_NMS_POOL, WCF].map(String::from));
    let rows = order
        .into_iter()
        .map(|method| {
            let mean = Metrics::mean(results.iter().filter_map(|r| r.metrics.get(&method)));
            MethodRow { method, mean }
        })
        .collect();
    Ok(BenchTable { rows, seeds: results })
}

impl BenchTable {
    pub fn per_seed(&self, method: &str, pick: impl Fn(&Metrics) -> f64) -> Vec<f64> {
        self.seeds.iter().map(|s| s.metrics.get(method).map(&pick).unwrap_or(f64::NAN)).collect()
    }

    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn comparisons(&self) -> Vec<(String, String, SignTest)> {
        let map = |m: &Metrics| m.map_50_95;
        [(WCF, NMS_POOL), (WCF, MODEL_AVG), (NMS_POOL, SOFT_NMS_POOL)]
            .into_iter()
            .map(|(a, b)| (a.to_string(), b.to_string(), sign_test(&self.per_seed(a, map), &self.per_seed(b, map))))
            .collect()
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("Mean over {} seeds.\n\n", self.seeds.len()));
        s.push_str("| Model | mAP(0.5:0.95) | mAP@0.5 | mAP@0.75 | AR(0.5:0.95) |\n");
        s.push_str("|---|---|---|---|---|\n");
        for r in &self.rows {
            let m = &r.mean;
            s.push_str(&format!(
                "| {} | {:.3} | {:.3} | {:.3} | {:.3} |\n",
                r.method, m.map_50_95, m.ap_50, m.ap_75, m.average_recall
            ));
        }
        s.push_str("\n| Comparison (mAP 0.5:0.95) | wins | losses | ties | sign-test p |\n");
        s.push_str("|---|---|---|---|---|\n");
        for (a, b, t) in self.comparisons() {
            s.push_str(&format!("| {a} > {b} | {} | {} | {} | {:.2e} |\n", t.wins, t.losses, t.ties, t.p_value));
        }
        s
    }
}
