//! Depth map construction: LiDAR projection into the camera followed by a
//! nearest-valid-pixel fill. Stands in for a learned depth-completion
//! network, so the result is deterministic and checkable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::pointcloud::PointCloud;
use crate::spatial::{GridIndex, Site};

/// Pinhole camera. `rotation` and `translation` map LiDAR coordinates into
/// the camera frame (`x` right, `y` down, `z` forward): `p_cam = R p + t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub height: usize,
    pub width: usize,
}

impl CameraModel {
    /// Camera at the LiDAR origin looking along LiDAR `+x` with `+z` up.
    pub fn forward_facing(height: usize, width: usize, hfov_deg: f64) -> Self {
        let fx = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        Self {
            fx,
            fy: fx,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            rotation: [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]],
            translation: [0.0; 3],
            height,
            width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("camera image size must be positive"));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return Err(Error::invalid("camera rotation is not orthonormal"));
                }
            }
        }
        Ok(())
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + self.translation[i])
    }

    /// Nearest-integer pixel `(row, col)` of a camera-frame point in front of
    /// the camera, if it lands inside the image.
    pub fn pixel_of(&self, pc: [f64; 3]) -> Option<(usize, usize)> {
        if !(pc[2] > 0.0) {
            return None;
        }
        let u = (self.fx * pc[0] / pc[2] + self.cx).round();
        let v = (self.fy * pc[1] / pc[2] + self.cy).round();
        if u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64 {
            Some((v as usize, u as usize))
        } else {
            None
        }
    }
}

/// Single-channel depth image in meters; `0` marks invalid pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn invalid(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            depth: vec![0.0; height * width],
            valid: vec![false; height * width],
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.depth[row * self.width + col]
    }

    /// `(H, W, 3)` tensor with depth replicated across channels.
    pub fn to_tensor3(&self, scale: f64) -> Tensor {
        Tensor::from_fn(&[self.height, self.width, 3], |i| self.depth[i / 3] * scale)
    }
}

/// Projects every point in front of the camera to its nearest pixel, keeping
/// the smallest depth per pixel.
pub fn project_points(cloud: &PointCloud, cam: &CameraModel) -> DepthMap {
    let mut map = DepthMap::invalid(cam.height, cam.width);
    for p in &cloud.points {
        let pc = cam.to_camera([p[0], p[1], p[2]]);
        if let Some((r, c)) = cam.pixel_of(pc) {
            let i = r * cam.width + c;
            if !map.valid[i] || pc[2] < map.depth[i] {
                map.depth[i] = pc[2];
                map.valid[i] = true;
            }
        }
    }
    map
}

/// Fills each pixel with the depth of its nearest valid pixel (Euclidean
/// pixel distance, row-major order on ties).
pub fn densify_depth(sparse: &DepthMap) -> Result<DepthMap> {
    let (h, w) = (sparse.height, sparse.width);
    let sites = (0..h * w)
        .filter(|&i| sparse.valid[i])
        .map(|i| Site { row: i / w, col: i % w });
    let index = GridIndex::new(h, w, 4, sites);
    if index.is_empty() {
        return Err(Error::NoDepthSupport);
    }
    let mut out = sparse.clone();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if sparse.valid[i] {
                continue;
            }
            let s = index.nearest(r, c, 1)[0];
            out.depth[i] = sparse.depth[s.row * w + s.col];
            out.valid[i] = true;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_cam(size: usize) -> CameraModel {
        CameraModel {
            fx: 20.0,
            fy: 20.0,
            cx: 32.0,
            cy: 32.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            height: size,
            width: size,
        }
    }

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.iter().map(|p| [p[0], p[1], p[2], 0.5]).collect()).unwrap()
    }

    #[test]
    fn on_axis_point_projects_to_principal_point() {
        let m = project_points(&cloud(&[[0.0, 0.0, 10.0]]), &identity_cam(64));
        assert_eq!(m.valid_count(), 1);
        assert_eq!(m.get(32, 32), 10.0);
    }

    #[test]
    fn points_behind_camera_are_dropped() {
        let m = project_points(&cloud(&[[0.0, 0.0, -5.0], [0.0, 0.0, 0.0]]), &identity_cam(64));
        assert_eq!(m.valid_count(), 0);
    }

    #[test]
    fn nearest_surface_wins() {
        let m = project_points(&cloud(&[[0.0, 0.0, 7.0], [0.0, 0.0, 3.0], [0.0, 0.0, 9.0]]), &identity_cam(64));
        assert_eq!(m.get(32, 32), 3.0);
    }

    #[test]
    fn depth_scales_along_rays() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<[f64; 3]> = (0..200)
            .map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(1.0..30.0)])
            .collect();
        let cam = identity_cam(64);
        let a = project_points(&cloud(&pts), &cam);
        let scaled: Vec<[f64; 3]> = pts.iter().map(|p| p.map(|v| v * 2.5)).collect();
        let b = project_points(&cloud(&scaled), &cam);
        assert_eq!(a.valid, b.valid);
        for (x, y) in a.depth.iter().zip(&b.depth) {
            assert!((x * 2.5 - y).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_facing_camera_is_orthonormal() {
        let cam = CameraModel::forward_facing(57, 57, 90.0);
        cam.validate().unwrap();
        let pc = cam.to_camera([20.0, 0.0, 0.0]);
        assert_eq!(cam.pixel_of(pc), Some((28, 28)));
        // left of the sensor maps to smaller columns, above to smaller rows
        let (r, c) = cam.pixel_of(cam.to_camera([20.0, 5.0, 3.0])).unwrap();
        assert!(r < 28 && c < 28);
        let mut bad = cam.clone();
        bad.rotation[0][0] = 2.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn densify_examples() {
        let mut full = DepthMap::invalid(3, 3);
        full.valid = vec![true; 9];
        full.depth = (1..=9).map(|v| v as f64).collect();
        assert_eq!(densify_depth(&full).unwrap(), full);

        let mut one = DepthMap::invalid(5, 7);
        one.valid[12] = true;
        one.depth[12] = 5.0;
        let d = densify_depth(&one).unwrap();
        assert!(d.depth.iter().all(|&v| v == 5.0));
        assert!(d.valid.iter().all(|&v| v));

        assert!(matches!(densify_depth(&DepthMap::invalid(2, 2)), Err(Error::NoDepthSupport)));
    }

    #[test]
    fn densify_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let (h, w) = (rng.gen_range(1..30), rng.gen_range(1..30));
            let mut m = DepthMap::invalid(h, w);
            for i in 0..h * w {
                if rng.gen_bool(0.08) {
                    m.valid[i] = true;
                    m.depth[i] = rng.gen_range(1.0..50.0);
                }
            }
            if m.valid_count() == 0 {
                m.valid[0] = true;
                m.depth[0] = 1.0;
            }
            let d = densify_depth(&m).unwrap();
            for r in 0..h {
                for c in 0..w {
                    let mut best = (i64::MAX, 0.0);
                    for rr in 0..h {
                        for cc in 0..w {
                            if m.valid[rr * w + cc] {
                                let dist = (rr as i64 - r as i64).pow(2) + (cc as i64 - c as i64).pow(2);
                                if dist < best.0 {
                                    best = (dist, m.depth[rr * w + cc]);
                                }
                            }
                        }
                    }
                    assert_eq!(d.depth[r * w + c], best.1);
                }
            }
            assert_eq!(densify_depth(&d).unwrap(), d);
        }
    }
}
