//! Uniform-grid index over circle centers for overlap candidate queries.

use std::collections::HashMap;

use crate::geometry::Circle;

/// Buckets circle ids by the grid cell holding their center. A query returns
/// every id whose circle could overlap the probe, given the largest radius
/// ever inserted.
#[derive(Debug, Clone)]
pub struct GridIndex {
    cell: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
    max_r: f64,
}

impl GridIndex {
    pub fn new(cell: f64) -> Self {
        let cell = if cell.is_finite() && cell > 0.0 { cell } else { 1.0 };
        Self {
            cell,
            cells: HashMap::new(),
            max_r: 0.0,
        }
    }

    /// Cell size sized to the typical radius of `circles`.
    pub fn for_circles<'a>(circles: impl IntoIterator<Item = &'a Circle>) -> Self {
        let (mut sum, mut n) = (0.0, 0usize);
        for c in circles {
            sum += c.r;
            n += 1;
        }
        let mean = if n == 0 { 1.0 } else { sum / n as f64 };
        Self::new(2.0 * mean)
    }

    fn key(&self, x: f64, y: f64) -> (i64, i64) {
        (
            (x / self.cell).floor() as i64,
            (y / self.cell).floor() as i64,
        )
    }

    pub fn insert(&mut self, id: usize, c: &Circle) {
        self.max_r = self.max_r.max(c.r);
        let k = self.key(c.cx, c.cy);
        self.cells.entry(k).or_default().push(id);
    }

    /// Removes `id`, which must have been inserted with the same center.
    pub fn remove(&mut self, id: usize, c: &Circle) {
        let k = self.key(c.cx, c.cy);
        if let Some(bucket) = self.cells.get_mut(&k) {
            if let Some(pos) = bucket.iter().position(|&v| v == id) {
                bucket.swap_remove(pos);
            }
            if bucket.is_empty() {
                self.cells.remove(&k);
            }
        }
    }

    /// Ids of stored circles that may overlap `c`, in ascending id order.
    pub fn candidates(&self, c: &Circle) -> Vec<usize> {
        let mut out = Vec::new();
        self.candidates_into(c, &mut out);
        out
    }

    pub fn candidates_into(&self, c: &Circle, out: &mut Vec<usize>) {
        out.clear();
        if self.cells.is_empty() {
            return;
        }
        let reach = c.r + self.max_r;
        let (x0, y0) = self.key(c.cx - reach, c.cy - reach);
        let (x1, y1) = self.key(c.cx + reach, c.cy + reach);
        let span = (x1 - x0 + 1).saturating_mul(y1 - y0 + 1);
        if span > self.cells.len() as i64 {
            for bucket in self.cells.values() {
                out.extend_from_slice(bucket);
            }
        } else {
            for gy in y0..=y1 {
                for gx in x0..=x1 {
                    if let Some(bucket) = self.cells.get(&(gx, gy)) {
                        out.extend_from_slice(bucket);
                    }
                }
            }
        }
        out.sort_unstable();
    }
}
