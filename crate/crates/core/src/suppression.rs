//! Circle non-maximum suppression and the Gaussian Soft-NMS baseline.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::detection::{canonical_cmp, sort_canonical, Detection};
use crate::geometry::ciou;
use crate::spatial::GridIndex;

pub const DEFAULT_NMS_CIOU: f64 = 0.5;

/// Greedy circle NMS: walk detections in canonical order, keep each survivor
/// and drop every later detection whose cIoU with it exceeds `t_ciou`.
pub fn nms(detections: &[Detection], t_ciou: f64) -> Vec<Detection> {
    let mut sorted = detections.to_vec();
    sort_canonical(&mut sorted);
    let mut grid = GridIndex::for_circles(sorted.iter().map(|d| &d.circle));
    for (i, d) in sorted.iter().enumerate() {
        grid.insert(i, &d.circle);
    }
    let mut suppressed = vec![false; sorted.len()];
    let mut keep = Vec::new();
    let mut cand = Vec::new();
    for i in 0..sorted.len() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        grid.candidates_into(&sorted[i].circle, &mut cand);
        for &j in cand.iter().filter(|&&j| j > i) {
            if !suppressed[j] && ciou(&sorted[i].circle, &sorted[j].circle) > t_ciou {
                suppressed[j] = true;
            }
        }
    }
    let mut sorted: Vec<Option<Detection>> = sorted.into_iter().map(Some).collect();
    keep.into_iter().filter_map(|i| sorted[i].take()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoftNmsConfig {
    pub sigma: f64,
    pub score_floor: f64,
}

impl Default for SoftNmsConfig {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            score_floor: 0.05,
        }
    }
}

#[derive(PartialEq)]
struct Ranked {
    score: f64,
    rank: usize,
}

impl Eq for Ranked {}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.rank.cmp(&self.rank))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Gaussian Soft-NMS. Each time the highest-scoring unprocessed detection is
/// selected, every remaining detection is rescaled by `exp(-ciou^2 / sigma)`;
/// detections whose score drops below `score_floor` are discarded. Output is
/// ordered by final score.
pub fn soft_nms(detections: &[Detection], cfg: &SoftNmsConfig) -> Vec<Detection> {
    let mut dets = detections.to_vec();
    sort_canonical(&mut dets);
    let mut alive: Vec<bool> = dets.iter().map(|d| d.score >= cfg.score_floor).collect();
    let mut grid = GridIndex::for_circles(dets.iter().map(|d| &d.circle));
    let mut heap = BinaryHeap::with_capacity(dets.len());
    for (i, d) in dets.iter().enumerate() {
        if alive[i] {
            grid.insert(i, &d.circle);
            heap.push(Ranked { score: d.score, rank: i });
        }
    }
    let mut out = Vec::new();
    let mut cand = Vec::new();
    while let Some(Ranked { score, rank }) = heap.pop() {
        if !alive[rank] || score != dets[rank].score {
            continue;
        }
        alive[rank] = false;
        let top = dets[rank].circle;
        grid.remove(rank, &top);
        out.push(rank);
        grid.candidates_into(&top, &mut cand);
        for &j in &cand {
            let overlap = ciou(&top, &dets[j].circle);
            if overlap <= 0.0 {
                continue;
            }
            let decayed = dets[j].score * (-(overlap * overlap) / cfg.sigma).exp();
            dets[j].score = decayed;
            if decayed < cfg.score_floor {
                alive[j] = false;
                grid.remove(j, &dets[j].circle);
            } else {
                heap.push(Ranked { score: decayed, rank: j });
            }
        }
    }
    let mut result: Vec<Detection> = out.into_iter().map(|i| dets[i].clone()).collect();
    result.sort_by(canonical_cmp);
    result
}
