//! Independent reference implementations used by the integration suites.
//! Nothing here calls into the grid index or the fast paths it checks.

#![allow(dead_code)]

use circlefuse::fusion::{RetentionPolicy, WcfConfig};
use circlefuse::{ciou, Circle, Detection, ModelRun};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Monte-Carlo lens area: uniform points in the bounding box of the smaller
/// circle, counted when they fall inside both circles.
pub fn monte_carlo_intersection(a: &Circle, b: &Circle, samples: usize, seed: u64) -> f64 {
    let small = if a.r <= b.r { a } else { b };
    let (x0, y0) = (small.cx - small.r, small.cy - small.r);
    let side = 2.0 * small.r;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0u64;
    for _ in 0..samples {
        let x = x0 + side * rng.random::<f64>();
        let y = y0 + side * rng.random::<f64>();
        let inside = |c: &Circle| {
            let dx = x - c.cx;
            let dy = y - c.cy;
            dx * dx + dy * dy <= c.r * c.r
        };
        if inside(a) && inside(b) {
            hits += 1;
        }
    }
    side * side * hits as f64 / samples as f64
}

fn order_key(d: &Detection) -> (f64, f64, f64, f64, String, String) {
    (-d.score, d.circle.cx, d.circle.cy, d.circle.r, d.model_id.clone(), d.label.clone())
}

pub fn reference_sort(dets: &mut [Detection]) {
    dets.sort_by(|a, b| order_key(a).partial_cmp(&order_key(b)).unwrap());
}

#[derive(Debug, Clone)]
pub struct RefCluster {
    pub members: Vec<Detection>,
}

impl RefCluster {
    pub fn geometry(&self) -> Circle {
        let w: f64 = self.members.iter().map(|m| m.score).sum();
        let n = self.members.len() as f64;
        let avg = |f: &dyn Fn(&Detection) -> f64| {
            if w > 0.0 {
                self.members.iter().map(|m| m.score * f(m)).sum::<f64>() / w
            } else {
                self.members.iter().map(f).sum::<f64>() / n
            }
        };
        Circle {
            cx: avg(&|m| m.circle.cx),
            cy: avg(&|m| m.circle.cy),
            r: avg(&|m| m.circle.r),
        }
    }

    pub fn score(&self) -> f64 {
        self.members.iter().map(|m| m.score).sum::<f64>() / self.members.len() as f64
    }

    pub fn count(&self) -> usize {
        let mut ids: Vec<&str> = self.members.iter().map(|m| m.model_id.as_str()).collect();
        ids.sort();
        ids.dedup();
        ids.len()
    }
}

/// Naive greedy fusion: every detection is compared with every cluster,
/// whose geometry is recomputed from scratch each time.
pub fn reference_wcf(runs: &[ModelRun], cfg: &WcfConfig) -> (Vec<RefCluster>, Vec<RefCluster>) {
    let mut pooled: Vec<Detection> = runs.iter().flat_map(|r| r.detections.clone()).collect();
    reference_sort(&mut pooled);
    let mut clusters: Vec<RefCluster> = Vec::new();
    for d in pooled {
        let mut best: Option<usize> = None;
        let mut best_v = f64::NEG_INFINITY;
        for (k, c) in clusters.iter().enumerate() {
            let v = ciou(&d.circle, &c.geometry());
            if v > best_v {
                best_v = v;
                best = Some(k);
            }
        }
        let joins = match best {
            Some(k) => best_v >= cfg.t_match && clusters[k].members.iter().all(|m| m.model_id != d.model_id),
            None => false,
        };
        if joins {
            clusters[best.unwrap()].members.push(d);
        } else {
            clusters.push(RefCluster { members: vec![d] });
        }
    }
    let keep = |c: &RefCluster| {
        let enough = c.count() >= cfg.t_count;
        let confident = c.score() >= cfg.t_score;
        match cfg.retention_policy {
            RetentionPolicy::CountOrScore => enough || confident,
            RetentionPolicy::CountAndScore => enough && confident,
            RetentionPolicy::CountOnly => enough,
        }
    };
    let mut retained: Vec<RefCluster> = clusters.iter().filter(|c| keep(c)).cloned().collect();
    retained.sort_by(|a, b| {
        let (ga, gb) = (a.geometry(), b.geometry());
        (-a.score(), ga.cx, ga.cy, ga.r, -(a.count() as f64))
            .partial_cmp(&(-b.score(), gb.cx, gb.cy, gb.r, -(b.count() as f64)))
            .unwrap()
    });
    (clusters, retained)
}

/// Naive greedy matching: predictions in the given order, each scanning all
/// ground truth for the best unmatched cIoU at or above `t`.
pub fn reference_match(preds: &[Circle], gts: &[Circle], t: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(preds.len());
    for p in preds {
        let mut best = None;
        let mut best_v = 0.0;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] {
                continue;
            }
            let v = ciou(p, gt);
            if v >= t && v > best_v {
                best_v = v;
                best = Some(g);
            }
        }
        if let Some(g) = best {
            used[g] = true;
        }
        flags.push(best.is_some());
    }
    flags
}

/// AP by direct enumeration of the recall levels.
pub fn reference_ap(flags: &[bool], n_gt: usize, levels: usize) -> f64 {
    let mut points = Vec::new();
    let mut tp = 0;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut total = 0.0;
    for k in 0..levels {
        let level = k as f64 / (levels - 1) as f64;
        let best = points
            .iter()
            .filter(|(r, _)| *r >= level)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        total += best;
    }
    total / levels as f64
}
