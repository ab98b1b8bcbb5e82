use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corruption::{corrupt_image, corrupt_lidar, CorruptionKind, CorruptionSpec, SeverityTable, MAX_SEVERITY};
use crate::error::{Error, Result};
use crate::metrics::{average_precision, bev_iou, nms, parse_detections, ApMode, Box3D, RobustnessSummary, RobustnessTable};
use crate::numerics::Tensor;

use super::config::{GridConfig, PipelineConfig};
use super::forward::{run_forward, FrameOutputs, Model};
use super::scene::{Frame, SyntheticScene};

pub const REPORT_SCHEMA: &str = "savid-report/1";

/// One evaluation condition of the sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Cell {
    Clean,
    Corrupted(CorruptionKind, u8),
}

impl Cell {
    /// `clean` or `<kind>_<severity>`; also the detection file stem.
    pub fn key(&self) -> String {
        match self {
            Cell::Clean => "clean".into(),
            Cell::Corrupted(k, s) => format!("{k}_{s}"),
        }
    }
}

/// Produces detections for one cell. `features` is the last evaluated frame
/// when [`DetectionProvider::needs_features`] is true.
pub trait DetectionProvider: Sync {
    fn describe(&self) -> String;

    fn needs_features(&self) -> bool {
        true
    }

    fn detect(&self, cell: Cell, features: Option<&FrameOutputs>, gts: &[Box3D]) -> Result<Vec<Box3D>>;
}

/// Returns the ground truth unchanged.
pub struct GroundTruthProvider;

impl DetectionProvider for GroundTruthProvider {
    fn describe(&self) -> String {
        "ground truth passthrough".into()
    }

    fn needs_features(&self) -> bool {
        false
    }

    fn detect(&self, _: Cell, _: Option<&FrameOutputs>, gts: &[Box3D]) -> Result<Vec<Box3D>> {
        Ok(gts.to_vec())
    }
}

/// Reads `<dir>/<cell key>.txt` in the detection text format.
pub struct DetectionFiles {
    pub dir: PathBuf,
}

impl DetectionProvider for DetectionFiles {
    fn describe(&self) -> String {
        "detection files".into()
    }

    fn needs_features(&self) -> bool {
        false
    }

    fn detect(&self, cell: Cell, _: Option<&FrameOutputs>, _: &[Box3D]) -> Result<Vec<Box3D>> {
        let path = self.dir.join(format!("{}.txt", cell.key()));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        parse_detections(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Stand-in detection head that exercises the metrics harness. It is not a
/// trained detector. Each ground-truth box plus a fixed set of distractor
/// boxes is described by the log-magnitude of the fused features pooled over
/// its bird's-eye footprint. On the clean cell a nearest-centroid classifier
/// is fitted with ground truth as positives and distractors as negatives;
/// every cell is then scored with that fit and suppressed with NMS, so the
/// AP drop measures how far corruption moves the features.
pub struct ProxyScorer {
    pub grid: GridConfig,
    pub height: usize,
    pub width: usize,
    pub nms_threshold: f64,
    pub distractors: usize,
    pub seed: u64,
    head: Mutex<Option<CentroidHead>>,
}

#[derive(Clone, Debug)]
struct CentroidHead {
    /// Unit normal of the decision boundary.
    normal: Vec<f64>,
    midpoint: Vec<f64>,
}

impl CentroidHead {
    fn fit(pos: &[Vec<f64>], neg: &[Vec<f64>], c: usize) -> Self {
        let mean = |v: &[Vec<f64>]| -> Vec<f64> {
            (0..c).map(|k| v.iter().map(|x| x[k]).sum::<f64>() / v.len().max(1) as f64).collect()
        };
        let (mp, mn) = (mean(pos), mean(neg));
        let diff: Vec<f64> = (0..c).map(|k| mp[k] - mn[k]).collect();
        let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self {
            normal: diff.iter().map(|v| if norm > 0.0 { v / norm } else { 0.0 }).collect(),
            midpoint: (0..c).map(|k| 0.5 * (mp[k] + mn[k])).collect(),
        }
    }

    /// Logistic of the signed distance to the boundary.
    fn score(&self, s: &[f64]) -> f64 {
        let z: f64 = s.iter().zip(&self.normal).zip(&self.midpoint).map(|((x, w), m)| w * (x - m)).sum();
        1.0 / (1.0 + (-z).exp())
    }
}

/// Per-map constants of the log-magnitude transform.
struct LogScale {
    floor: f64,
    mean: Vec<f64>,
}

impl LogScale {
    /// The floor sits three decades under the map RMS so the transform is
    /// invariant to the overall feature scale.
    fn of(f: &Tensor) -> Self {
        let rms = (f.data().iter().map(|v| v * v).sum::<f64>() / f.numel().max(1) as f64).sqrt();
        let floor = 1e-3 * rms.max(f64::MIN_POSITIVE);
        let (n, c) = (f.rows(), f.last_dim());
        let mut mean = vec![0.0; c];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(f.row(i)) {
                *m += (v.abs() + floor).ln() / n as f64;
            }
        }
        Self { floor, mean }
    }
}

impl ProxyScorer {
    pub const DESCRIPTION: &'static str = "proxy scorer: nearest-centroid head over log-magnitude fused features in \
                                           bird's-eye footprints, fitted on the clean cell (non-paper stand-in, not a \
                                           trained detector)";

    pub fn new(config: &PipelineConfig) -> Self {
        Self {
            grid: config.grid.clone(),
            height: config.height,
            width: config.width,
            nms_threshold: config.nms_thresholds[1],
            distractors: 2 * config.scene.objects.max(1),
            seed: config.seeds.scene ^ 0xd157_7ac7,
            head: Mutex::new(None),
        }
    }

    fn pixel_center(&self, r: usize, q: usize) -> (f64, f64) {
        let ext = self.grid.extent();
        (
            self.grid.origin[0] + (r as f64 + 0.5) / self.height as f64 * ext[0],
            self.grid.origin[1] + (q as f64 + 0.5) / self.width as f64 * ext[1],
        )
    }

    fn pixel_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let ext = self.grid.extent();
        let r = ((x - self.grid.origin[0]) / ext[0] * self.height as f64).floor();
        let q = ((y - self.grid.origin[1]) / ext[1] * self.width as f64).floor();
        (r >= 0.0 && q >= 0.0 && r < self.height as f64 && q < self.width as f64).then_some((r as usize, q as usize))
    }

    /// Fixed distractor boxes away from every ground-truth box.
    pub fn distractor_boxes(&self, gts: &[Box3D]) -> Vec<Box3D> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let ext = self.grid.extent();
        let mut out = Vec::with_capacity(self.distractors);
        for _ in 0..self.distractors * 20 {
            if out.len() == self.distractors {
                break;
            }
            let b = Box3D::new(
                [
                    self.grid.origin[0] + rng.gen_range(0.0..ext[0]),
                    self.grid.origin[1] + rng.gen_range(0.0..ext[1]),
                    -1.0,
                ],
                [rng.gen_range(3.5..5.0), rng.gen_range(1.6..2.0), 1.6],
                rng.gen_range(-PI..PI),
                0,
                1.0,
            )
            .expect("valid distractor");
            if gts.iter().chain(&out).all(|g| bev_iou(g, &b) == 0.0) {
                out.push(b);
            }
        }
        out
    }

    /// Mean log-magnitude per channel over the pixels whose centers fall in
    /// the footprint (the pixel under the center for tiny boxes), relative
    /// to the map mean. Zero for boxes off the raster.
    fn signature(&self, f: &Tensor, scale: &LogScale, b: &Box3D) -> Vec<f64> {
        let c = f.last_dim();
        let mut pixels: Vec<usize> = (0..self.height * self.width)
            .filter(|&i| {
                let (x, y) = self.pixel_center(i / self.width, i % self.width);
                b.contains_bev(x, y)
            })
            .collect();
        if pixels.is_empty() {
            match self.pixel_of(b.center[0], b.center[1]) {
                Some((r, q)) => pixels.push(r * self.width + q),
                None => return vec![0.0; c],
            }
        }
        let mut acc = vec![0.0; c];
        for &i in &pixels {
            for (a, v) in acc.iter_mut().zip(f.row(i)) {
                *a += (v.abs() + scale.floor).ln();
            }
        }
        let n = pixels.len();
        acc.iter().zip(&scale.mean).map(|(a, m)| a / n as f64 - m).collect()
    }
}

impl DetectionProvider for ProxyScorer {
    fn describe(&self) -> String {
        Self::DESCRIPTION.into()
    }

    fn detect(&self, cell: Cell, features: Option<&FrameOutputs>, gts: &[Box3D]) -> Result<Vec<Box3D>> {
        let f = &features.ok_or_else(|| Error::invalid("proxy scorer needs fused features"))?.f_kgf;
        if f.shape() != [self.height, self.width, f.last_dim()] {
            return Err(Error::shape("proxy scorer", f.shape(), &[self.height, self.width]));
        }
        let scale = LogScale::of(f);
        let distractors = self.distractor_boxes(gts);
        let sig = |b: &Box3D| self.signature(f, &scale, b);
        let head = {
            let mut slot = self.head.lock().expect("proxy head lock");
            if cell == Cell::Clean {
                let pos: Vec<Vec<f64>> = gts.iter().map(sig).collect();
                let neg: Vec<Vec<f64>> = distractors.iter().map(sig).collect();
                *slot = Some(CentroidHead::fit(&pos, &neg, f.last_dim()));
            }
            slot.clone()
                .ok_or_else(|| Error::invalid("proxy scorer must see the clean cell before corrupted ones"))?
        };
        let mut proposals: Vec<Box3D> = gts.iter().chain(&distractors).copied().collect();
        for p in &mut proposals {
            p.score = head.score(&sig(p));
        }
        Ok(nms(&proposals, self.nms_threshold)?.into_iter().map(|i| proposals[i]).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub schema: String,
    pub scorer: String,
    pub ap_iou: f64,
    pub ap_mode: ApMode,
    pub sequence_length: usize,
    pub table: RobustnessTable,
    /// Absent when a cell is missing or the clean AP is zero.
    pub summary: Option<RobustnessSummary>,
    /// Cell key to error message for cells that could not be evaluated.
    pub failures: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

impl RobustnessReport {
    pub fn empty(scorer: &str) -> Self {
        Self {
            schema: REPORT_SCHEMA.into(),
            scorer: scorer.into(),
            ap_iou: 0.5,
            ap_mode: ApMode::default(),
            sequence_length: 1,
            table: RobustnessTable::default(),
            summary: None,
            failures: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| Error::Format(format!("report: {e}")))?;
        if r.schema != REPORT_SCHEMA {
            return Err(Error::Format(format!("unsupported report schema {:?}", r.schema)));
        }
        Ok(r)
    }

    /// `kind,severity,ap,rce` rows, one per cell; `rce` is blank when the
    /// clean AP is zero.
    pub fn rce_csv(&self) -> String {
        let mut s = String::from("kind,severity,ap,rce\n");
        for (kind, row) in &self.table.ap {
            for (sev, ap) in row {
                let rce = crate::metrics::rce(self.table.ap_cln, *ap).map(|v| v.to_string()).unwrap_or_default();
                let _ = writeln!(s, "{kind},{sev},{ap},{rce}");
            }
        }
        s
    }
}

/// Writes `report.json` and `rce.csv` into `dir`.
pub fn emit_report(report: &RobustnessReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, body) in [("report.json", report.to_json()), ("rce.csv", report.rce_csv())] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn corrupt_frames(frames: &[Frame], spec_of: impl Fn(usize) -> CorruptionSpec, table: &SeverityTable) -> Result<Vec<Frame>> {
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let spec = spec_of(i);
            let mut out = f.clone();
            if spec.kind.is_lidar() {
                out.cloud = corrupt_lidar(&f.cloud, &spec, table)?;
            } else {
                out.image = corrupt_image(&f.image, &spec, table)?;
            }
            Ok(out)
        })
        .collect()
}

fn evaluate(
    config: &PipelineConfig,
    model: &Model,
    frames: &[Frame],
    provider: &dyn DetectionProvider,
    cell: Cell,
) -> Result<(f64, bool)> {
    let gts = &frames[config.sequence_length - 1].boxes;
    let dets = if provider.needs_features() {
        let out = run_forward(config, model, frames)?;
        provider.detect(cell, Some(out.last()), gts)?
    } else {
        provider.detect(cell, None, gts)?
    };
    let ap = average_precision(&dets, gts, config.ap_iou, config.ap_mode);
    Ok((ap.ap, ap.no_ground_truth))
}

/// Clean AP, then AP for every kind and severity on corrupted copies of the
/// scene, evaluated concurrently. A failing cell is recorded and left out of
/// the table, which then has no summary.
pub fn run_robustness_suite(
    config: &PipelineConfig,
    model: &Model,
    scene: &SyntheticScene,
    provider: &dyn DetectionProvider,
    table: &SeverityTable,
) -> Result<RobustnessReport> {
    config.validate()?;
    let t = config.sequence_length;
    if scene.frames.len() < t {
        return Err(Error::invalid(format!("scene has {} frames, need {t}", scene.frames.len())));
    }
    let frames = &scene.frames[..t];
    let (ap_cln, no_gt) = evaluate(config, model, frames, provider, Cell::Clean)?;

    let cells: Vec<(CorruptionKind, u8)> = CorruptionKind::ALL
        .iter()
        .flat_map(|&k| (1..=MAX_SEVERITY).map(move |s| (k, s)))
        .collect();
    let results: Vec<Result<f64>> = cells
        .par_iter()
        .map(|&(kind, severity)| {
            let spec_of = |i: usize| CorruptionSpec {
                kind,
                severity,
                seed: config.seeds.corruption.wrapping_add(i as u64),
            };
            let corrupted = corrupt_frames(frames, spec_of, table)?;
            Ok(evaluate(config, model, &corrupted, provider, Cell::Corrupted(kind, severity))?.0)
        })
        .collect();

    let mut report = RobustnessReport {
        schema: REPORT_SCHEMA.into(),
        scorer: provider.describe(),
        ap_iou: config.ap_iou,
        ap_mode: config.ap_mode,
        sequence_length: t,
        table: RobustnessTable::new(ap_cln, &CorruptionKind::ALL),
        summary: None,
        failures: BTreeMap::new(),
        warnings: Vec::new(),
    };
    if no_gt {
        report.warnings.push("scene has no ground truth; every AP is reported as 0".into());
    }
    for (&(kind, severity), res) in cells.iter().zip(results) {
        match res {
            Ok(ap) => report.table.insert(kind, severity, ap),
            Err(e) => {
                log::error!("cell {kind}_{severity} failed: {e}");
                report.failures.insert(Cell::Corrupted(kind, severity).key(), e.to_string());
            }
        }
    }
    match report.table.summary() {
        Ok(s) => report.summary = Some(s),
        Err(e) => report.warnings.push(format!("no summary: {e}")),
    }
    Ok(report)
}
