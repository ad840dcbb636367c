//! Review session state: fused items, their review status, and the edit log
//! that reproduces the state when replayed over the initial set.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use circlefuse::fusion::{ColorMap, FusedDetection};
use circlefuse::Circle;
use serde::{Deserialize, Serialize};

pub const EDITS_SCHEMA: &str = "circlefuse-edits/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Accept,
    Reject,
    Move,
    Resize,
    Add,
    Relabel,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Payload {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dx: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub new_r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cx: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOp {
    pub op: OpKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_id: Option<String>,
    #[serde(default)]
    pub payload: Payload,
    pub actor: String,
    pub timestamp: DateTime<Utc>,
    /// Revision the client last saw; a mismatch is a conflict.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revision: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditLog {
    pub schema: String,
    pub ops: Vec<EditOp>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    Accepted,
    Rejected,
    Edited,
    HumanAdded,
}

impl std::str::FromStr for Status {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown status `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: String,
    pub fused: FusedDetection,
    pub status: Status,
    pub revision: u64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EditError {
    #[error("unknown target_id `{0}`")]
    NotFound(String),
    #[error("invalid payload: {0}")]
    Invalid(String),
    #[error("stale revision for `{id}`: client has {given}, current is {current}")]
    Conflict { id: String, given: u64, current: u64 },
}

/// Serializable view of one item as returned by the API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub id: String,
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub score: f64,
    pub count: usize,
    pub category: String,
    pub color: String,
    pub models: Vec<String>,
    pub status: Status,
    pub revision: u64,
}

impl From<&Item> for ItemView {
    fn from(it: &Item) -> Self {
        let mut models: Vec<String> = it.fused.members.iter().map(|m| m.model_id.clone()).collect();
        models.sort();
        models.dedup();
        Self {
            id: it.id.clone(),
            cx: it.fused.circle.cx,
            cy: it.fused.circle.cy,
            r: it.fused.circle.r,
            score: it.fused.score,
            count: it.fused.count,
            category: it.fused.category.clone(),
            color: it.fused.color.clone(),
            models,
            status: it.status,
            revision: it.revision,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Filter {
    pub min_count: Option<usize>,
    pub max_count: Option<usize>,
    pub min_score: Option<f64>,
    pub status: Option<Status>,
}

impl Filter {
    pub fn matches(&self, it: &Item) -> bool {
        let f = &it.fused;
        self.min_count.is_none_or(|m| f.count >= m)
            && self.max_count.is_none_or(|m| f.count <= m)
            && self.min_score.is_none_or(|m| f.score >= m)
            && self.status.is_none_or(|s| it.status == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReviewState {
    items: Vec<Item>,
    index: BTreeMap<String, usize>,
    log: Vec<EditOp>,
    next_human: usize,
    colors: ColorMap,
}

fn finite(name: &str, v: Option<f64>) -> Result<f64, EditError> {
    match v {
        Some(v) if v.is_finite() => Ok(v),
        Some(v) => Err(EditError::Invalid(format!("`{name}` must be finite, got {v}"))),
        None => Err(EditError::Invalid(format!("`{name}` is required"))),
    }
}

impl ReviewState {
    pub fn new(fused: Vec<FusedDetection>, colors: ColorMap) -> Self {
        let items: Vec<Item> = fused
            .into_iter()
            .enumerate()
            .map(|(i, fused)| Item {
                id: format!("f{i}"),
                status: if fused.is_human() { Status::HumanAdded } else { Status::Pending },
                fused,
                revision: 0,
            })
            .collect();
        let index = items.iter().enumerate().map(|(i, it)| (it.id.clone(), i)).collect();
        Self { items, index, log: Vec::new(), next_human: 0, colors }
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn get(&self, id: &str) -> Option<&Item> {
        self.index.get(id).map(|&i| &self.items[i])
    }

    pub fn log(&self) -> &[EditOp] {
        &self.log
    }

    pub fn edit_log(&self) -> EditLog {
        EditLog { schema: EDITS_SCHEMA.to_string(), ops: self.log.clone() }
    }

    pub fn filtered(&self, filter: &Filter) -> Vec<&Item> {
        self.items.iter().filter(|it| filter.matches(it)).collect()
    }

    /// Category counts over items that are not rejected.
    pub fn category_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for it in self.items.iter().filter(|it| it.status != Status::Rejected) {
            *out.entry(it.fused.category.clone()).or_insert(0) += 1;
        }
        out
    }

    /// Items to persist, in id order of creation.
    pub fn exportable(&self, include_rejected: bool) -> Vec<&Item> {
        self.items
            .iter()
            .filter(|it| include_rejected || it.status != Status::Rejected)
            .collect()
    }

    /// Validates and applies `op`; on error nothing changes.
    pub fn apply(&mut self, op: EditOp) -> Result<ItemView, EditError> {
        let updated = self.plan(&op)?;
        let idx = match self.index.get(&updated.id) {
            Some(&i) => {
                self.items[i] = updated;
                i
            }
            None => {
                self.next_human += 1;
                self.index.insert(updated.id.clone(), self.items.len());
                self.items.push(updated);
                self.items.len() - 1
            }
        };
        self.log.push(op);
        Ok(ItemView::from(&self.items[idx]))
    }

    /// Computes the post-edit item without touching state.
    fn plan(&self, op: &EditOp) -> Result<Item, EditError> {
        if op.op == OpKind::Add {
            if op.target_id.is_some() {
                return Err(EditError::Invalid("`target_id` must be absent for add".into()));
            }
            let p = &op.payload;
            let circle = Circle::new(finite("cx", p.cx)?, finite("cy", p.cy)?, finite("r", p.r)?)
                .map_err(|e| EditError::Invalid(e.to_string()))?;
            let mut fused = FusedDetection::human(circle);
            fused.color = self.colors.color_for(0).to_string();
            if let Some(label) = &p.label {
                fused.category = non_empty_label(label)?;
            }
            return Ok(Item {
                id: format!("h{}", self.next_human),
                fused,
                status: Status::HumanAdded,
                revision: 0,
            });
        }

        let id = op
            .target_id
            .as_deref()
            .ok_or_else(|| EditError::Invalid("`target_id` is required".into()))?;
        let current = self.get(id).ok_or_else(|| EditError::NotFound(id.to_string()))?;
        if let Some(given) = op.revision {
            if given != current.revision {
                return Err(EditError::Conflict { id: id.to_string(), given, current: current.revision });
            }
        }
        let mut next = current.clone();
        next.revision += 1;
        match op.op {
            OpKind::Accept => next.status = Status::Accepted,
            OpKind::Reject => next.status = Status::Rejected,
            OpKind::Move => {
                let dx = op.payload.dx.map_or(Ok(0.0), |v| finite("dx", Some(v)))?;
                let dy = op.payload.dy.map_or(Ok(0.0), |v| finite("dy", Some(v)))?;
                if op.payload.dx.is_none() && op.payload.dy.is_none() {
                    return Err(EditError::Invalid("move requires `dx` and/or `dy`".into()));
                }
                next.fused.circle = next.fused.circle.translated(dx, dy);
                next.status = Status::Edited;
            }
            OpKind::Resize => {
                let r = finite("new_r", op.payload.new_r)?;
                if r <= 0.0 {
                    return Err(EditError::Invalid(format!("`new_r` must be > 0, got {r}")));
                }
                next.fused.circle.r = r;
                next.status = Status::Edited;
            }
            OpKind::Relabel => {
                let label = op
                    .payload
                    .label
                    .as_deref()
                    .ok_or_else(|| EditError::Invalid("`label` is required".into()))?;
                next.fused.category = non_empty_label(label)?;
                next.status = Status::Edited;
            }
            OpKind::Add => unreachable!(),
        }
        Ok(next)
    }

    /// Rebuilds a state from the initial set and a log of ops.
    pub fn replay(initial: Vec<FusedDetection>, colors: ColorMap, ops: &[EditOp]) -> Result<Self, (usize, EditError)> {
        let mut state = Self::new(initial, colors);
        for (i, op) in ops.iter().enumerate() {
            state.apply(op.clone()).map_err(|e| (i, e))?;
        }
        Ok(state)
    }
}

fn non_empty_label(label: &str) -> Result<String, EditError> {
    let t = label.trim();
    if t.is_empty() {
        Err(EditError::Invalid("`label` must not be empty".into()))
    } else {
        Ok(t.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use circlefuse::fusion::categorize;
    use circlefuse::Detection;

    fn fused(cx: f64, cy: f64, r: f64, score: f64, count: usize) -> FusedDetection {
        let circle = Circle::new(cx, cy, r).unwrap();
        let members = (0..count)
            .map(|k| Detection::new(circle, score, format!("model_{}", k + 1)))
            .collect();
        let mut f = vec![FusedDetection {
            circle,
            score,
            count,
            members,
            category: String::new(),
            color: String::new(),
        }];
        categorize(&mut f, &ColorMap::default());
        f.pop().unwrap()
    }

    fn op(kind: OpKind, target: Option<&str>, payload: Payload) -> EditOp {
        EditOp {
            op: kind,
            target_id: target.map(str::to_string),
            payload,
            actor: "tester".into(),
            timestamp: DateTime::from_timestamp(1_700_000_000, 0).unwrap(),
            revision: None,
        }
    }

    fn state() -> ReviewState {
        ReviewState::new(vec![fused(100.0, 100.0, 50.0, 0.8, 3), fused(300.0, 300.0, 20.0, 0.95, 1)], ColorMap::default())
    }

    #[test]
    fn move_translates_and_marks_edited() {
        let mut s = state();
        let v = s
            .apply(op(OpKind::Move, Some("f0"), Payload { dx: Some(5.0), dy: Some(-3.0), ..Default::default() }))
            .unwrap();
        assert_eq!((v.cx, v.cy, v.r), (105.0, 97.0, 50.0));
        assert_eq!(v.status, Status::Edited);
        assert_eq!(v.revision, 1);
    }

    #[test]
    fn invalid_ops_leave_state_untouched() {
        let mut s = state();
        let before = s.clone();
        let bad = [
            op(OpKind::Resize, Some("f0"), Payload { new_r: Some(0.0), ..Default::default() }),
            op(OpKind::Resize, Some("f0"), Payload::default()),
            op(OpKind::Move, Some("f0"), Payload::default()),
            op(OpKind::Add, None, Payload { cx: Some(1.0), cy: Some(1.0), ..Default::default() }),
            op(OpKind::Add, None, Payload { cx: Some(1.0), cy: Some(1.0), r: Some(-2.0), ..Default::default() }),
            op(OpKind::Relabel, Some("f0"), Payload { label: Some("  ".into()), ..Default::default() }),
            op(OpKind::Accept, None, Payload::default()),
        ];
        for b in bad {
            assert!(matches!(s.apply(b), Err(EditError::Invalid(_))));
        }
        assert!(matches!(s.apply(op(OpKind::Reject, Some("f9"), Payload::default())), Err(EditError::NotFound(_))));
        assert_eq!(s, before);
    }

    #[test]
    fn stale_revision_conflicts() {
        let mut s = state();
        let mut a = op(OpKind::Accept, Some("f1"), Payload::default());
        a.revision = Some(0);
        let mut b = op(OpKind::Reject, Some("f1"), Payload::default());
        b.revision = Some(0);
        s.apply(a).unwrap();
        assert_eq!(
            s.apply(b),
            Err(EditError::Conflict { id: "f1".into(), given: 0, current: 1 })
        );
        assert_eq!(s.log().len(), 1);
    }

    #[test]
    fn add_assigns_human_ids_and_replay_matches() {
        let mut s = state();
        let v = s
            .apply(op(OpKind::Add, None, Payload { cx: Some(400.0), cy: Some(400.0), r: Some(35.0), ..Default::default() }))
            .unwrap();
        assert_eq!(v.id, "h0");
        assert_eq!((v.count, v.category.as_str(), v.status), (0, "human", Status::HumanAdded));
        s.apply(op(OpKind::Reject, Some("f1"), Payload::default())).unwrap();
        s.apply(op(OpKind::Add, None, Payload { cx: Some(10.0), cy: Some(10.0), r: Some(5.0), ..Default::default() }))
            .unwrap();
        assert!(s.get("h1").is_some());
        assert_eq!(s.category_counts().get("consensus_1"), None);
        assert_eq!(s.category_counts()["human"], 2);

        let initial = state().items().iter().map(|it| it.fused.clone()).collect();
        let replayed = ReviewState::replay(initial, ColorMap::default(), s.log()).unwrap();
        assert_eq!(replayed, s);
    }

    #[test]
    fn status_parses_from_query_text() {
        assert_eq!("human_added".parse::<Status>().unwrap(), Status::HumanAdded);
        assert!("done".parse::<Status>().is_err());
    }
}
