//! Procedural driving scenes: cuboid objects on a flat ground plane seen by a
//! forward-facing camera and a LiDAR whose returns thin out with distance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::depth::CameraModel;
use crate::error::{Error, Result};
use crate::metrics::Box3D;
use crate::numerics::Tensor;
use crate::pointcloud::PointCloud;

use super::config::{GridConfig, SceneConfig};

/// Ground height in the LiDAR frame.
pub const GROUND_Z: f64 = -1.7;
const PLACEMENT_RETRIES: usize = 1000;
const MIN_RANGE_M: f64 = 5.0;
/// Objects stay inside this azimuth so they are in view of a 90 degree camera.
const MAX_AZIMUTH_DEG: f64 = 40.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub cloud: PointCloud,
    /// `(H, W, 3)` in `[0, 1]`.
    pub image: Tensor,
    pub boxes: Vec<Box3D>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub camera: CameraModel,
    pub frames: Vec<Frame>,
}

impl SyntheticScene {
    /// Same scene with every point cloud emptied.
    pub fn without_lidar(&self) -> Self {
        let mut s = self.clone();
        for f in &mut s.frames {
            f.cloud = PointCloud::default();
        }
        s
    }
}

/// Expected LiDAR returns on an object at ground distance `d`.
pub fn expected_object_points(points_at_10m: f64, d: f64) -> f64 {
    points_at_10m * (10.0 / d.max(1e-3)).powi(2)
}

struct Object {
    center: [f64; 3],
    size: [f64; 3],
    yaw: f64,
    /// Per-frame displacement along the heading.
    speed: f64,
    color: [f64; 3],
}

impl Object {
    fn at_frame(&self, f: usize) -> Box3D {
        let (s, c) = self.yaw.sin_cos();
        let d = self.speed * f as f64;
        let center = [self.center[0] + c * d, self.center[1] + s * d, self.center[2]];
        Box3D::new(center, self.size, self.yaw, 0, 1.0).expect("generated box is valid")
    }
}

fn place_objects(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Object>> {
    let mut objects: Vec<Object> = Vec::with_capacity(cfg.objects);
    if cfg.objects > 0 && cfg.range_m <= MIN_RANGE_M {
        return Err(Error::InfeasibleScene(format!(
            "range {} m leaves no room beyond the {MIN_RANGE_M} m near zone",
            cfg.range_m
        )));
    }
    for n in 0..cfg.objects {
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            // uniform over the annular sector by area
            let r = (rng.gen_range(MIN_RANGE_M.powi(2)..cfg.range_m.powi(2))).sqrt();
            let az = rng.gen_range(-MAX_AZIMUTH_DEG..MAX_AZIMUTH_DEG).to_radians();
            let (x, y) = (r * az.cos(), r * az.sin());
            let clear = objects.iter().all(|o| {
                let (dx, dy) = (o.center[0] - x, o.center[1] - y);
                (dx * dx + dy * dy).sqrt() >= cfg.min_separation_m
            });
            if clear {
                placed = Some((x, y));
                break;
            }
        }
        let (x, y) = placed.ok_or_else(|| {
            Error::InfeasibleScene(format!(
                "could not place object {} of {} with {} m spacing within {} m",
                n + 1,
                cfg.objects,
                cfg.min_separation_m,
                cfg.range_m
            ))
        })?;
        let size = [rng.gen_range(3.5..5.0), rng.gen_range(1.6..2.0), rng.gen_range(1.4..1.8)];
        objects.push(Object {
            center: [x, y, GROUND_Z + size[2] / 2.0],
            size,
            yaw: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            speed: rng.gen_range(0.0..1.5),
            color: [rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0)],
        });
    }
    Ok(objects)
}

fn sample_in_box(b: &Box3D, rng: &mut ChaCha8Rng) -> [f64; 4] {
    let u = [0, 1, 2].map(|a| rng.gen_range(-0.5..0.5) * b.size[a]);
    let (s, c) = b.yaw.sin_cos();
    [
        b.center[0] + c * u[0] - s * u[1],
        b.center[1] + s * u[0] + c * u[1],
        b.center[2] + u[2],
        rng.gen_range(0.3..0.9),
    ]
}

fn render(camera: &CameraModel, boxes: &[(Box3D, [f64; 3])]) -> Tensor {
    let (h, w) = (camera.height, camera.width);
    let horizon = camera.cy;
    let mut img = Tensor::from_fn(&[h, w, 3], |i| {
        let (r, ch) = (i / 3 / w, i % 3);
        let t = r as f64 / h.max(1) as f64;
        if (r as f64) < horizon {
            [0.55, 0.65, 0.85][ch] + 0.1 * t
        } else {
            [0.35, 0.33, 0.30][ch] + 0.2 * t
        }
    });
    // painter's order: far to near
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    let dist = |b: &Box3D| b.center[0].hypot(b.center[1]);
    order.sort_by(|&a, &b| dist(&boxes[b].0).total_cmp(&dist(&boxes[a].0)));
    for i in order {
        let (b, color) = &boxes[i];
        let shade = (1.0 - dist(b) / 200.0).clamp(0.3, 1.0);
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        let mut visible = false;
        for corner in b.bev_corners() {
            for dz in [-0.5, 0.5] {
                let pc = camera.to_camera([corner[0], corner[1], b.center[2] + dz * b.size[2]]);
                if pc[2] <= 0.0 {
                    continue;
                }
                visible = true;
                let u = camera.fx * pc[0] / pc[2] + camera.cx;
                let v = camera.fy * pc[1] / pc[2] + camera.cy;
                lo = [lo[0].min(v), lo[1].min(u)];
                hi = [hi[0].max(v), hi[1].max(u)];
            }
        }
        if !visible {
            continue;
        }
        let r0 = lo[0].round().max(0.0) as usize;
        let c0 = lo[1].round().max(0.0) as usize;
        let r1 = (hi[0].round().min(h as f64 - 1.0)).max(-1.0);
        let c1 = (hi[1].round().min(w as f64 - 1.0)).max(-1.0);
        if r1 < 0.0 || c1 < 0.0 {
            continue;
        }
        for r in r0..=r1 as usize {
            for q in c0..=c1 as usize {
                let top = if r as f64 - lo[0] < 1.0 { 1.1 } else { 1.0 };
                for ch in 0..3 {
                    img.set(&[r, q, ch], (color[ch] * shade * top).clamp(0.0, 1.0));
                }
            }
        }
    }
    img
}

/// Deterministic scene with `frames` frames. Objects move rigidly along
/// their heading; every ground-truth box holds at least one LiDAR point in
/// the first frame.
pub fn generate_scene(
    seed: u64,
    cfg: &SceneConfig,
    grid: &GridConfig,
    camera: &CameraModel,
    frames: usize,
) -> Result<SyntheticScene> {
    if !(cfg.range_m > 0.0) {
        return Err(Error::invalid(format!("scene range {} must be positive", cfg.range_m)));
    }
    if frames == 0 {
        return Err(Error::invalid("a scene needs at least one frame"));
    }
    camera.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = place_objects(cfg, &mut rng)?;
    let ext = grid.extent();
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let boxes: Vec<Box3D> = objects.iter().map(|o| o.at_frame(f)).collect();
        let mut points = Vec::with_capacity(cfg.ground_points);
        for _ in 0..cfg.ground_points {
            points.push([
                grid.origin[0] + rng.gen_range(0.0..ext[0]),
                grid.origin[1] + rng.gen_range(0.0..ext[1]),
                GROUND_Z,
                rng.gen_range(0.05..0.3),
            ]);
        }
        for b in &boxes {
            let lambda = expected_object_points(cfg.points_at_10m, b.center[0].hypot(b.center[1]));
            let mut n = if lambda > 0.0 {
                Poisson::new(lambda).expect("positive rate").sample(&mut rng) as usize
            } else {
                0
            };
            if f == 0 {
                n = n.max(1);
            }
            for _ in 0..n {
                points.push(sample_in_box(b, &mut rng));
            }
        }
        let colored: Vec<(Box3D, [f64; 3])> = boxes.iter().copied().zip(objects.iter().map(|o| o.color)).collect();
        out.push(Frame {
            cloud: PointCloud::new(points)?,
            image: render(camera, &colored),
            boxes,
        });
    }
    Ok(SyntheticScene {
        camera: camera.clone(),
        frames: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraModel {
        CameraModel::forward_facing(56, 56, 90.0)
    }

    #[test]
    fn empty_scene_is_ground_only() {
        let cfg = SceneConfig {
            objects: 0,
            ..Default::default()
        };
        let s = generate_scene(1, &cfg, &GridConfig::default(), &cam(), 2).unwrap();
        assert!(s.frames.iter().all(|f| f.boxes.is_empty()));
        assert!(s.frames[0].cloud.points.iter().all(|p| p[2] == GROUND_Z));
        assert_eq!(s.frames[0].cloud.len(), cfg.ground_points);
    }

    #[test]
    fn deterministic_and_supported() {
        let cfg = SceneConfig::default();
        let a = generate_scene(7, &cfg, &GridConfig::default(), &cam(), 3).unwrap();
        let b = generate_scene(7, &cfg, &GridConfig::default(), &cam(), 3).unwrap();
        assert_eq!(a, b);
        let f0 = &a.frames[0];
        assert_eq!(f0.boxes.len(), cfg.objects);
        for bx in &f0.boxes {
            let inside = f0.cloud.points.iter().filter(|p| {
                bx.contains_bev(p[0], p[1]) && (p[2] - bx.center[2]).abs() <= bx.size[2] / 2.0
            });
            assert!(inside.count() >= 1);
        }
        assert!(f0.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, generate_scene(8, &cfg, &GridConfig::default(), &cam(), 3).unwrap());
    }

    #[test]
    fn infeasible_placement_is_reported() {
        let cfg = SceneConfig {
            objects: 50,
            range_m: 8.0,
            min_separation_m: 5.0,
            ..Default::default()
        };
        assert!(matches!(
            generate_scene(0, &cfg, &GridConfig::default(), &cam(), 1),
            Err(Error::InfeasibleScene(_))
        ));
    }

    #[test]
    fn density_falls_with_square_of_distance() {
        let cfg = SceneConfig {
            objects: 1,
            ground_points: 0,
            ..Default::default()
        };
        // observed over expected counts, for objects nearer and farther than 25 m
        let (mut obs, mut exp) = ([0.0; 2], [0.0; 2]);
        for seed in 0..300 {
            let s = generate_scene(seed, &cfg, &GridConfig::default(), &cam(), 2).unwrap();
            let f = &s.frames[1];
            let d = f.boxes[0].center[0].hypot(f.boxes[0].center[1]);
            let bin = (d >= 25.0) as usize;
            obs[bin] += f.cloud.len() as f64;
            exp[bin] += expected_object_points(cfg.points_at_10m, d);
        }
        for b in 0..2 {
            assert!((obs[b] / exp[b] - 1.0).abs() < 0.05, "bin {b}: {}", obs[b] / exp[b]);
        }
        // halving the rate per doubling of distance squared
        let ratio = expected_object_points(400.0, 30.0) / expected_object_points(400.0, 15.0);
        assert!((ratio - 0.25).abs() < 1e-12);
    }
}
