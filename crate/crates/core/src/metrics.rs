//! Detection evaluation (rotated BEV IoU, greedy NMS, average precision) and
//! corruption-robustness summaries.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corruption::{CorruptionKind, MAX_SEVERITY};
use crate::error::{Error, Result};

/// Oriented 3-D box. Ground truth carries `score = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    /// `(l, w, h)`: extent along heading, across heading, vertical.
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: u32,
    pub score: f64,
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut a = yaw.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, class_id: u32, score: f64) -> Result<Self> {
        let b = Self {
            center,
            size,
            yaw: normalize_yaw(yaw),
            class_id,
            score,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.center.iter().chain(&self.size).chain([&self.yaw, &self.score]).all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("box has a non-finite field"));
        }
        if self.size.iter().any(|&s| s <= 0.0) {
            return Err(Error::invalid(format!("box size must be positive, got {:?}", self.size)));
        }
        if !(self.yaw > -PI && self.yaw <= PI) {
            return Err(Error::invalid(format!("box yaw {} outside (-pi, pi]", self.yaw)));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::invalid(format!("box score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }

    /// Ground-plane corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]]
            .map(|[x, y]| [self.center[0] + c * x - s * y, self.center[1] + s * x + c * y])
    }

    pub fn bev_area(&self) -> f64 {
        self.size[0] * self.size[1]
    }

    /// True if the ground-plane point lies inside the rotated footprint.
    pub fn contains_bev(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.size[0] / 2.0 && v.abs() <= self.size[1] / 2.0
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    twice.abs() / 2.0
}

/// Clips `subject` by the convex counter-clockwise polygon `clip`.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (dp, dq) = (cross(a, b, p), cross(a, b, q));
            if dp >= 0.0 {
                out.push(p);
            }
            if (dp >= 0.0) != (dq >= 0.0) {
                let t = dp / (dp - dq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Intersection-over-union of the rotated ground rectangles; height is
/// ignored. Zero-area boxes give 0.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let (aa, ab) = (a.bev_area(), b.bev_area());
    if !(aa > 0.0 && ab > 0.0) {
        return 0.0;
    }
    let inter = polygon_area(&clip_convex(&a.bev_corners(), &b.bev_corners()));
    let union = aa + ab - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Descending score, ascending index on ties.
fn score_order(boxes: &[Box3D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| boxes[j].score.total_cmp(&boxes[i].score).then(i.cmp(&j)));
    order
}

/// Greedy non-maximum suppression. A box is dropped when its IoU with an
/// already kept box exceeds `iou_threshold`. Returns kept indices in
/// selection order.
pub fn nms(boxes: &[Box3D], iou_threshold: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::invalid(format!("nms threshold {iou_threshold} outside [0, 1]")));
    }
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(boxes) {
        if kept.iter().all(|&k| bev_iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    Ok(kept)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// Mean interpolated precision at recall 0, 0.01, ..., 1.
    #[default]
    Interp101,
    /// Area under the interpolated precision envelope.
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApOutcome {
    pub ap: f64,
    /// Set when there was no ground truth; `ap` is then 0.
    pub no_ground_truth: bool,
}

/// Greedy matching in descending score order: each prediction takes the
/// unmatched ground truth with the highest IoU at or above the threshold.
/// Returns the true-positive flag of each prediction in that order.
pub fn match_predictions(preds: &[Box3D], gts: &[Box3D], iou_threshold: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    score_order(preds)
        .into_iter()
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let iou = bev_iou(&preds[i], gt);
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            best.is_some()
        })
        .collect()
}

/// Single-class average precision.
pub fn average_precision(preds: &[Box3D], gts: &[Box3D], iou_threshold: f64, mode: ApMode) -> ApOutcome {
    if gts.is_empty() {
        log::warn!("average precision requested with no ground truth; reporting 0");
        return ApOutcome {
            ap: 0.0,
            no_ground_truth: true,
        };
    }
    let tp = match_predictions(preds, gts, iou_threshold);
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (n, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / gts.len() as f64);
        precision.push(hits as f64 / (n + 1) as f64);
    }
    // precision envelope: best precision at this recall or beyond
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let ap = match mode {
        ApMode::Interp101 => {
            let total: f64 = (0..=100)
                .map(|r| {
                    let level = r as f64 / 100.0;
                    recall
                        .iter()
                        .position(|&x| x >= level - 1e-12)
                        .map_or(0.0, |i| precision[i])
                })
                .sum();
            total / 101.0
        }
        ApMode::Exact => {
            let mut prev = 0.0;
            let mut area = 0.0;
            for (r, p) in recall.iter().zip(&precision) {
                area += (r - prev) * p;
                prev = *r;
            }
            area
        }
    };
    ApOutcome {
        ap,
        no_ground_truth: false,
    }
}

/// Relative degradation `(ap_cln - x) / ap_cln`.
pub fn rce(ap_cln: f64, x: f64) -> Result<f64> {
    if !(ap_cln > 0.0) {
        return Err(Error::invalid(format!("clean AP must be positive, got {ap_cln}")));
    }
    Ok((ap_cln - x) / ap_cln)
}

/// Clean AP and per-cell corrupted AP over a set of corruption kinds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RobustnessTable {
    pub ap_cln: f64,
    pub kinds: Vec<CorruptionKind>,
    pub ap: BTreeMap<CorruptionKind, BTreeMap<u8, f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSummary {
    pub ap_cln: f64,
    pub ap_corr: f64,
    pub rce: f64,
    pub rce_cells: BTreeMap<CorruptionKind, BTreeMap<u8, f64>>,
}

impl RobustnessTable {
    pub fn new(ap_cln: f64, kinds: &[CorruptionKind]) -> Self {
        Self {
            ap_cln,
            kinds: kinds.to_vec(),
            ap: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, kind: CorruptionKind, severity: u8, ap: f64) {
        self.ap.entry(kind).or_default().insert(severity, ap);
    }

    pub fn get(&self, kind: CorruptionKind, severity: u8) -> Option<f64> {
        self.ap.get(&kind)?.get(&severity).copied()
    }

    pub fn missing(&self) -> Vec<String> {
        let mut out = Vec::new();
        for &k in &self.kinds {
            for s in 1..=MAX_SEVERITY {
                if self.get(k, s).is_none() {
                    out.push(format!("{k}@{s}"));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let values = std::iter::once(&self.ap_cln).chain(self.ap.values().flat_map(|m| m.values()));
        for v in values {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::invalid(format!("AP value {v} outside [0, 1]")));
            }
        }
        if self.kinds.is_empty() {
            return Err(Error::invalid("robustness table lists no corruption kinds"));
        }
        Ok(())
    }

    pub fn summary(&self) -> Result<RobustnessSummary> {
        let corr = ap_corr(self)?;
        let mut rce_cells = BTreeMap::new();
        for &k in &self.kinds {
            let row: &mut BTreeMap<u8, f64> = rce_cells.entry(k).or_default();
            for s in 1..=MAX_SEVERITY {
                row.insert(s, rce(self.ap_cln, self.get(k, s).expect("checked complete"))?);
            }
        }
        Ok(RobustnessSummary {
            ap_cln: self.ap_cln,
            ap_corr: corr,
            rce: rce(self.ap_cln, corr)?,
            rce_cells,
        })
    }
}

/// Mean over kinds of the mean over severities 1..=5.
pub fn ap_corr(table: &RobustnessTable) -> Result<f64> {
    table.validate()?;
    let missing = table.missing();
    if !missing.is_empty() {
        return Err(Error::MissingCells(missing));
    }
    let per_kind: f64 = table
        .kinds
        .iter()
        .map(|&k| (1..=MAX_SEVERITY).map(|s| table.get(k, s).expect("checked")).sum::<f64>() / MAX_SEVERITY as f64)
        .sum();
    Ok(per_kind / table.kinds.len() as f64)
}

/// One box per line: `class_id score cx cy cz l w h yaw`. Blank lines and
/// lines starting with `#` are ignored.
pub fn parse_detections(text: &str) -> Result<Vec<Box3D>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 9 {
            return Err(Error::Format(format!("line {}: expected 9 fields, got {}", n + 1, fields.len())));
        }
        let class_id: u32 = fields[0]
            .parse()
            .map_err(|e| Error::Format(format!("line {}: class id: {e}", n + 1)))?;
        let mut v = [0.0; 8];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|e| Error::Format(format!("line {}: {f:?}: {e}", n + 1)))?;
        }
        let b = Box3D::new([v[1], v[2], v[3]], [v[4], v[5], v[6]], v[7], class_id, v[0])
            .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        out.push(b);
    }
    Ok(out)
}

pub fn format_detections(boxes: &[Box3D]) -> String {
    let mut s = String::new();
    for b in boxes {
        let [x, y, z] = b.center;
        let [l, w, h] = b.size;
        let _ = writeln!(s, "{} {} {x} {y} {z} {l} {w} {h} {}", b.class_id, b.score, b.yaw);
    }
    s
}
