use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asmn::{asmn_step, AsmnParams, AsmnState};
use crate::depth::{densify_depth, project_points, CameraModel, DepthMap};
use crate::error::{Error, Result};
use crate::gman::{embed_image, gman_forward, Ctx, GmanParams, LstmState};
use crate::kgf::kgf_fuse;
use crate::numerics::Tensor;
use crate::pointcloud::{fps_sample, LidarEncoder, PointCloud};

use super::config::PipelineConfig;
use super::scene::Frame;

/// All fixed weights of the three stages and the LiDAR encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub gman: GmanParams,
    pub lidar: LidarEncoder,
    pub asmn: AsmnParams,
    pub camera: CameraModel,
}

impl Model {
    pub fn new(config: &PipelineConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seeds.model;
        let gman = GmanParams::init(config.channels, config.heads, config.window, config.dropout, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let g = &config.grid;
        let lidar = LidarEncoder::init(g.origin, g.voxel_size, g.dims, config.channels, &mut rng);
        let mut asmn = AsmnParams::init(config.channels, seed.wrapping_add(2));
        asmn.mode = config.asmn_mode;
        asmn.sparsity = config.asmn_sparsity;
        asmn.rescale_state = config.asmn_rescale_state;
        let camera = config.camera();
        camera.validate()?;
        Ok(Self {
            gman,
            lidar,
            asmn,
            camera,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FrameOutputs {
    pub depth: DepthMap,
    /// True when the cloud had no return in view and depth fell back to zero.
    pub depth_fallback: bool,
    pub f_i: Tensor,
    pub f_l: Tensor,
    pub f_s: Tensor,
    pub f_kgf: Tensor,
    pub keypoints: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub depth: Duration,
    pub gman: Duration,
    pub lidar: Duration,
    pub asmn: Duration,
    pub kgf: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.depth + self.gman + self.lidar + self.asmn + self.kgf
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub frames: Vec<FrameOutputs>,
    /// Stage 1 recurrent state after each frame; empty when Stage 1 is off.
    pub gman_states: Vec<LstmState>,
    /// Stage 2 recurrent state after each frame; empty when Stage 2 is off.
    pub asmn_states: Vec<AsmnState>,
    pub timings: StageTimings,
}

impl ForwardOutput {
    pub fn last(&self) -> &FrameOutputs {
        self.frames.last().expect("at least one frame")
    }
}

fn timed<T>(slot: &mut Duration, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f();
    *slot += start.elapsed();
    out
}

fn depth_for(cloud: &PointCloud, camera: &CameraModel) -> Result<(DepthMap, bool)> {
    match densify_depth(&project_points(cloud, camera)) {
        Ok(d) => Ok((d, false)),
        Err(Error::NoDepthSupport) => {
            log::warn!("no LiDAR return in view; using an all-zero depth map");
            Ok((DepthMap::invalid(camera.height, camera.width), true))
        }
        Err(e) => Err(e),
    }
}

/// Runs the first `config.sequence_length` frames through depth, Stage 1,
/// the LiDAR encoder, Stage 2 and Stage 3, threading recurrent state.
pub fn run_forward(config: &PipelineConfig, model: &Model, frames: &[Frame]) -> Result<ForwardOutput> {
    config.validate()?;
    let t = config.sequence_length;
    if frames.len() < t {
        return Err(Error::invalid(format!(
            "sequence length {t} exceeds the {} frames available",
            frames.len()
        )));
    }
    let (h, w, c) = (config.height, config.width, config.channels);
    let ab = config.ablation;
    let mut timings = StageTimings::default();
    let mut gman_state: Option<LstmState> = None;
    let mut asmn_state = AsmnState::initial(h * w, c);
    let mut out = ForwardOutput {
        frames: Vec::with_capacity(t),
        gman_states: Vec::new(),
        asmn_states: Vec::new(),
        timings,
    };
    for (idx, frame) in frames[..t].iter().enumerate() {
        if frame.image.shape() != [h, w, 3] {
            return Err(Error::shape("run_forward image", frame.image.shape(), &[h, w, 3]).in_stage("input"));
        }
        let (depth, depth_fallback) =
            timed(&mut timings.depth, || depth_for(&frame.cloud, &model.camera)).map_err(|e| e.in_stage("depth"))?;
        let ctx = Ctx {
            mode: config.mode,
            seed: config.seeds.model ^ (idx as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407),
        };
        let f_i = timed(&mut timings.gman, || {
            if ab.gman {
                let (f, next) = gman_forward(&frame.image, &depth, &model.gman, gman_state.as_ref(), ctx)?;
                out.gman_states.push(next.clone());
                gman_state = Some(next);
                Ok(f)
            } else {
                embed_image(&frame.image, &model.gman)
            }
        })
        .map_err(|e| e.in_stage("gman"))?;
        let (f_l, keypoints) = timed(&mut timings.lidar, || {
            let feats = model.lidar.encode(&frame.cloud, h, w)?;
            let k = config.keypoints.min(frame.cloud.len());
            let keypoints = if k == 0 { Vec::new() } else { fps_sample(&frame.cloud, k, 0)? };
            Ok((feats.raster, keypoints))
        })
        .map_err(|e| e.in_stage("lidar"))?;
        let f_s = timed(&mut timings.asmn, || {
            if ab.asmn {
                let (f, next) = asmn_step(&f_i, &f_l, &model.asmn, &asmn_state)?;
                out.asmn_states.push(next.clone());
                asmn_state = next.carried(&model.asmn);
                Ok(f)
            } else {
                Ok(f_i.clone())
            }
        })
        .map_err(|e| e.in_stage("asmn"))?;
        let f_kgf = timed(&mut timings.kgf, || {
            if ab.kgf {
                kgf_fuse(&f_s, &f_l, config.neighbors, config.kgf_cosine)
            } else {
                Ok(f_s.clone())
            }
        })
        .map_err(|e| e.in_stage("kgf"))?;
        f_kgf.check_finite("fused features").map_err(|e| e.in_stage("kgf"))?;
        out.frames.push(FrameOutputs {
            depth,
            depth_fallback,
            f_i,
            f_l,
            f_s,
            f_kgf,
            keypoints,
        });
    }
    out.timings = timings;
    Ok(out)
}
