use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::asmn::{AsmnMode, AsmnParams};
use crate::depth::CameraModel;
use crate::error::{Error, Result};
use crate::kgf::{CosineKind, NeighborSpec};
use crate::metrics::ApMode;
use crate::numerics::Mode;

/// Voxel grid placement in the LiDAR frame (`x` forward, `y` left, `z` up).
/// The encoder's coarsest stage is 8x the voxel size, so 0.25 m voxels keep
/// a car-sized object at two to three cells across.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub origin: [f64; 3],
    pub voxel_size: [f64; 3],
    pub dims: [usize; 3],
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            origin: [0.0, -32.0, -2.0],
            voxel_size: [0.25, 0.25, 0.5],
            dims: [256, 256, 8],
        }
    }
}

impl GridConfig {
    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.voxel_size[a] * self.dims[a] as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub objects: usize,
    pub range_m: f64,
    pub ground_points: usize,
    /// Expected points on an object 10 m away; falls off as `1/d^2`.
    pub points_at_10m: f64,
    /// Minimum center spacing between objects.
    pub min_separation_m: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            objects: 6,
            range_m: 60.0,
            ground_points: 4000,
            points_at_10m: 400.0,
            min_separation_m: 6.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub model: u64,
    pub scene: u64,
    pub corruption: u64,
}

/// Which of the three fusion stages run. A disabled stage passes its input
/// through (Stage 1 falls back to the plain image embedding).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub gman: bool,
    pub asmn: bool,
    pub kgf: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            gman: true,
            asmn: true,
            kgf: true,
        }
    }
}

impl Ablation {
    /// All eight on/off combinations, full model first.
    pub fn grid() -> Vec<Ablation> {
        (0..8u8)
            .map(|m| Ablation {
                gman: m & 4 == 0,
                asmn: m & 2 == 0,
                kgf: m & 1 == 0,
            })
            .collect()
    }

    pub fn label(&self) -> String {
        let flag = |on: bool, name: &str| format!("{}{name}", if on { "+" } else { "-" });
        format!("{}{}{}", flag(self.gman, "gman"), flag(self.asmn, "asmn"), flag(self.kgf, "kgf"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    pub height: usize,
    pub width: usize,
    pub keypoints: usize,
    pub sequence_length: usize,
    pub dropout: f64,
    pub mode: Mode,
    pub hfov_deg: f64,
    /// Suppression thresholds: the first for general use, the second for
    /// the proxy scorer's proposals.
    pub nms_thresholds: [f64; 2],
    pub ap_iou: f64,
    pub ap_mode: ApMode,
    pub asmn_mode: AsmnMode,
    pub asmn_sparsity: f64,
    /// Rescale the Stage 2 state between frames; see `AsmnParams`.
    pub asmn_rescale_state: bool,
    pub kgf_cosine: CosineKind,
    pub neighbors: NeighborSpec,
    pub grid: GridConfig,
    pub scene: SceneConfig,
    pub seeds: Seeds,
    pub ablation: Ablation,
    /// Severity table override; the shipped table when absent.
    pub severity_table: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            heads: 8,
            window: 7,
            height: 56,
            width: 56,
            keypoints: 256,
            sequence_length: 7,
            dropout: 0.30,
            mode: Mode::Inference,
            hfov_deg: 90.0,
            nms_thresholds: [0.7, 0.1],
            ap_iou: 0.5,
            ap_mode: ApMode::Interp101,
            asmn_mode: AsmnMode::Attention,
            asmn_sparsity: AsmnParams::DEFAULT_SPARSITY,
            asmn_rescale_state: true,
            kgf_cosine: CosineKind::Paper,
            neighbors: NeighborSpec::Window3x3,
            grid: GridConfig::default(),
            scene: SceneConfig::default(),
            seeds: Seeds::default(),
            ablation: Ablation::default(),
            severity_table: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg = Self::parse_unchecked(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses without validating, for callers that apply overrides first.
    pub fn parse_unchecked(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Self::load_unchecked(path)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load_unchecked(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_unchecked(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn camera(&self) -> CameraModel {
        CameraModel::forward_facing(self.height, self.width, self.hfov_deg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("heads", self.heads),
            ("window", self.window),
            ("height", self.height),
            ("width", self.width),
            ("sequence_length", self.sequence_length),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "channels ({}) must be divisible by heads ({})",
                self.channels, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return Err(Error::invalid(format!("hfov_deg {} outside (0, 180)", self.hfov_deg)));
        }
        for t in self.nms_thresholds.iter().chain([&self.ap_iou]) {
            if !(0.0..=1.0).contains(t) {
                return Err(Error::invalid(format!("IoU threshold {t} outside [0, 1]")));
            }
        }
        if !(self.asmn_sparsity > 0.0 && self.asmn_sparsity <= 1.0) {
            return Err(Error::invalid(format!("asmn_sparsity {} outside (0, 1]", self.asmn_sparsity)));
        }
        self.neighbors.validate()?;
        let g = &self.grid;
        if g.dims.contains(&0) || g.voxel_size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("grid dims and voxel sizes must be positive"));
        }
        let s = &self.scene;
        if !(s.range_m > 0.0) {
            return Err(Error::invalid(format!("scene range {} must be positive", s.range_m)));
        }
        if !(s.points_at_10m >= 0.0 && s.min_separation_m >= 0.0) {
            return Err(Error::invalid("scene densities and spacing must be non-negative"));
        }
        Ok(())
    }
}
