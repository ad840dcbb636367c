//! GeoJSON export/import of fused detections.
//!
//! Circles are written as closed 64-vertex polygons so any GeoJSON viewer can
//! draw them; the exact circle and its provenance travel in a namespaced
//! `circlefuse` property block, which import prefers over refitting.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::detection::{Detection, DEFAULT_LABEL};
use crate::error::{Error, Result};
use crate::fusion::{category_name, hex_to_rgb, rgb_to_hex, ColorMap, FusedDetection, HUMAN_CATEGORY};
use crate::geometry::Circle;

pub const RING_VERTICES: usize = 64;
pub const CRS_NOTE: &str = "level-0 slide pixel coordinates, origin top-left, y increasing downward";

/// Closed counter-clockwise ring (first vertex repeated last).
pub fn circle_ring(c: &Circle) -> Vec<[f64; 2]> {
    let mut ring: Vec<[f64; 2]> = (0..RING_VERTICES)
        .map(|k| {
            let a = TAU * k as f64 / RING_VERTICES as f64;
            [c.cx + c.r * a.cos(), c.cy + c.r * a.sin()]
        })
        .collect();
    ring.push(ring[0]);
    ring
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MemberRecord {
    model_id: String,
    cx: f64,
    cy: f64,
    r: f64,
    score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CircleBlock {
    cx: f64,
    cy: f64,
    radius: f64,
    score: f64,
    count: usize,
    #[serde(default)]
    models: Vec<String>,
    #[serde(default)]
    members: Vec<MemberRecord>,
}

fn feature(id: Option<&str>, f: &FusedDetection) -> Value {
    let rgb = hex_to_rgb(&f.color).unwrap_or_else(|| {
        hex_to_rgb(ColorMap::default().color_for(f.count)).unwrap_or([0, 0, 0])
    });
    let mut models: Vec<String> = f.members.iter().map(|m| m.model_id.clone()).collect();
    models.sort();
    models.dedup();
    let block = CircleBlock {
        cx: f.circle.cx,
        cy: f.circle.cy,
        radius: f.circle.r,
        score: f.score,
        count: f.count,
        models,
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
    };
    let mut feat = json!({
        "type": "Feature",
        "geometry": {
            "type": "Polygon",
            "coordinates": [circle_ring(&f.circle)],
        },
        "properties": {
            "objectType": "annotation",
            "classification": { "name": f.category, "color": rgb },
            "circlefuse": block,
        },
    });
    if let Some(id) = id {
        feat["id"] = Value::String(id.to_string());
    }
    feat
}

/// FeatureCollection for `fused`, optionally tagging each feature with an id.
pub fn export_with_ids<'a>(
    items: impl IntoIterator<Item = (Option<&'a str>, &'a FusedDetection)>,
    slide_id: &str,
) -> Value {
    let features: Vec<Value> = items.into_iter().map(|(id, f)| feature(id, f)).collect();
    json!({
        "type": "FeatureCollection",
        "slide_id": slide_id,
        "crs_note": CRS_NOTE,
        "features": features,
    })
}

pub fn export_geojson(fused: &[FusedDetection], slide_id: &str) -> Value {
    export_with_ids(fused.iter().map(|f| (None, f)), slide_id)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureError {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImportReport {
    pub slide_id: Option<String>,
    /// Successfully imported features with their ids, in document order.
    pub features: Vec<(Option<String>, FusedDetection)>,
    pub errors: Vec<FeatureError>,
}

impl ImportReport {
    pub fn fused(&self) -> Vec<FusedDetection> {
        self.features.iter().map(|(_, f)| f.clone()).collect()
    }
}

fn ring_points(geometry: &Value) -> std::result::Result<Vec<[f64; 2]>, String> {
    let kind = geometry.get("type").and_then(Value::as_str).unwrap_or("<missing>");
    if kind != "Polygon" {
        return Err(format!("unsupported geometry type `{kind}`"));
    }
    let ring = geometry
        .get("coordinates")
        .and_then(|c| c.get(0))
        .and_then(Value::as_array)
        .ok_or("polygon has no exterior ring")?;
    let mut pts = Vec::with_capacity(ring.len());
    for p in ring {
        let x = p.get(0).and_then(Value::as_f64);
        let y = p.get(1).and_then(Value::as_f64);
        match (x, y) {
            (Some(x), Some(y)) => pts.push([x, y]),
            _ => return Err("ring contains a malformed position".into()),
        }
    }
    if pts.len() > 1 && pts.first() == pts.last() {
        pts.pop();
    }
    if pts.len() < 3 {
        return Err("ring has fewer than three distinct vertices".into());
    }
    Ok(pts)
}

/// Centroid of the vertices and their mean distance from it.
pub fn fit_circle(points: &[[f64; 2]]) -> Option<Circle> {
    if points.is_empty() {
        return None;
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let r = points.iter().map(|p| (p[0] - cx).hypot(p[1] - cy)).sum::<f64>() / n;
    Circle::new(cx, cy, r).ok()
}

fn import_feature(feat: &Value) -> std::result::Result<FusedDetection, String> {
    let geometry = feat.get("geometry").ok_or("feature has no geometry")?;
    let points = ring_points(geometry)?;
    let props = feat.get("properties").cloned().unwrap_or(Value::Object(Map::new()));
    let class = props.get("classification");
    let class_name = class.and_then(|c| c.get("name")).and_then(Value::as_str);
    let class_color = class
        .and_then(|c| c.get("color"))
        .and_then(|c| serde_json::from_value::<[u8; 3]>(c.clone()).ok())
        .map(rgb_to_hex);

    if let Some(block) = props.get("circlefuse") {
        let block: CircleBlock =
            serde_json::from_value(block.clone()).map_err(|e| format!("bad circlefuse block: {e}"))?;
        let circle = Circle::new(block.cx, block.cy, block.radius).map_err(|e| e.to_string())?;
        let mut members = Vec::with_capacity(block.members.len());
        for m in block.members {
            let c = Circle::new(m.cx, m.cy, m.r).map_err(|e| e.to_string())?;
            members.push(Detection {
                circle: c,
                score: m.score,
                model_id: m.model_id,
                label: m.label.unwrap_or_else(|| DEFAULT_LABEL.to_string()),
            });
        }
        let count = block.count;
        return Ok(FusedDetection {
            circle,
            score: block.score,
            count,
            members,
            category: class_name.map(str::to_string).unwrap_or_else(|| category_name(count)),
            color: class_color.unwrap_or_else(|| ColorMap::default().color_for(count).to_string()),
        });
    }

    let circle = fit_circle(&points).ok_or("cannot fit a circle to the ring")?;
    let mut f = FusedDetection::human(circle);
    if let Some(name) = class_name {
        f.category = name.to_string();
    } else {
        f.category = HUMAN_CATEGORY.to_string();
    }
    if let Some(color) = class_color {
        f.color = color;
    }
    Ok(f)
}

/// Imports a FeatureCollection. Document-level problems are errors; features
/// that cannot be read are collected into the report and skipped.
pub fn import_geojson(doc: &Value) -> Result<ImportReport> {
    if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(Error::Validation("document is not a GeoJSON FeatureCollection".into()));
    }
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Validation("FeatureCollection has no `features` array".into()))?;
    let mut report = ImportReport {
        slide_id: doc.get("slide_id").and_then(Value::as_str).map(str::to_string),
        ..Default::default()
    };
    for (index, feat) in features.iter().enumerate() {
        let id = feat.get("id").and_then(|v| match v {
            Value::String(s) => Some(s.clone()),
            Value::Number(n) => Some(n.to_string()),
            _ => None,
        });
        match import_feature(feat) {
            Ok(f) => report.features.push((id, f)),
            Err(reason) => report.errors.push(FeatureError { index, reason }),
        }
    }
    Ok(report)
}

pub fn import_geojson_str(text: &str) -> Result<ImportReport> {
    let doc: Value = serde_json::from_str(text).map_err(|source| Error::Parse {
        context: "GeoJSON document".into(),
        source,
    })?;
    import_geojson(&doc)
}
