//! Sensor corruptions for robustness sweeps: seven LiDAR kinds and three image
//! kinds, each at severities 1..=5. Magnitudes come from a [`SeverityTable`].
//!
//! Every kind draws from its own stream of a seeded ChaCha generator and
//! makes the same draws at every severity, so stronger levels nest the
//! weaker ones: dropped points stay dropped, and noise keeps its direction
//! while its scale grows.

use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::pointcloud::PointCloud;

pub const MAX_SEVERITY: u8 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    DensityDecrease,
    Cutout,
    Crosstalk,
    FovLost,
    GaussianNoiseL,
    UniformNoiseL,
    ImpulseNoiseL,
    GaussianNoiseI,
    UniformNoiseI,
    ImpulseNoiseI,
    // reserved, always rejected
    Snow,
    Rain,
    Fog,
    Sunlight,
}

impl CorruptionKind {
    /// The implemented kinds, LiDAR first.
    pub const ALL: [CorruptionKind; 10] = [
        Self::DensityDecrease,
        Self::Cutout,
        Self::Crosstalk,
        Self::FovLost,
        Self::GaussianNoiseL,
        Self::UniformNoiseL,
        Self::ImpulseNoiseL,
        Self::GaussianNoiseI,
        Self::UniformNoiseI,
        Self::ImpulseNoiseI,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::DensityDecrease => "density_decrease",
            Self::Cutout => "cutout",
            Self::Crosstalk => "crosstalk",
            Self::FovLost => "fov_lost",
            Self::GaussianNoiseL => "gaussian_noise_l",
            Self::UniformNoiseL => "uniform_noise_l",
            Self::ImpulseNoiseL => "impulse_noise_l",
            Self::GaussianNoiseI => "gaussian_noise_i",
            Self::UniformNoiseI => "uniform_noise_i",
            Self::ImpulseNoiseI => "impulse_noise_i",
            Self::Snow => "snow",
            Self::Rain => "rain",
            Self::Fog => "fog",
            Self::Sunlight => "sunlight",
        }
    }

    pub fn is_weather(self) -> bool {
        matches!(self, Self::Snow | Self::Rain | Self::Fog | Self::Sunlight)
    }

    pub fn is_lidar(self) -> bool {
        matches!(
            self,
            Self::DensityDecrease
                | Self::Cutout
                | Self::Crosstalk
                | Self::FovLost
                | Self::GaussianNoiseL
                | Self::UniformNoiseL
                | Self::ImpulseNoiseL
        )
    }

    pub fn is_image(self) -> bool {
        matches!(self, Self::GaussianNoiseI | Self::UniformNoiseI | Self::ImpulseNoiseI)
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

impl std::fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .chain(&[Self::Snow, Self::Rain, Self::Fog, Self::Sunlight])
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown corruption kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        let spec = Self { kind, severity, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.is_weather() {
            return Err(Error::NotImplemented("physics-based weather simulation"));
        }
        if !(1..=MAX_SEVERITY).contains(&self.severity) {
            return Err(Error::invalid(format!("severity must be in 1..=5, got {}", self.severity)));
        }
        Ok(())
    }

    fn level(&self) -> usize {
        self.severity as usize - 1
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.kind.stream());
        rng
    }
}

type Schedule = [f64; 5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityParams {
    pub drop_fraction: Schedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutoutParams {
    pub spheres: [usize; 5],
    pub radius_m: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrosstalkParams {
    pub fraction: Schedule,
    pub sigma_m: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FovParams {
    pub span_deg: Schedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarGaussianParams {
    pub sigma_m: Schedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarUniformParams {
    pub bound_m: Schedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarImpulseParams {
    pub fraction: Schedule,
    pub sigma_m: Schedule,
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageGaussianParams {
    pub sigma: Schedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageUniformParams {
    pub bound: Schedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageImpulseParams {
    pub fraction: Schedule,
}

/// Magnitudes for every `(kind, severity)`. Loaded from TOML; the shipped
/// table is compiled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeverityTable {
    pub density_decrease: DensityParams,
    pub cutout: CutoutParams,
    pub crosstalk: CrosstalkParams,
    pub fov_lost: FovParams,
    pub gaussian_noise_l: LidarGaussianParams,
    pub uniform_noise_l: LidarUniformParams,
    pub impulse_noise_l: LidarImpulseParams,
    pub gaussian_noise_i: ImageGaussianParams,
    pub uniform_noise_i: ImageUniformParams,
    pub impulse_noise_i: ImageImpulseParams,
}

const BUILTIN_TABLE: &str = include_str!("../../../configs/severity.toml");

fn check_schedule(name: &str, s: &Schedule, lo: f64, hi: f64, increasing: bool) -> Result<()> {
    for (i, v) in s.iter().enumerate() {
        if !(v.is_finite() && *v >= lo && *v <= hi) {
            return Err(Error::invalid(format!("{name}[{i}] = {v} outside [{lo}, {hi}]")));
        }
    }
    let monotone = s
        .windows(2)
        .all(|w| if increasing { w[0] <= w[1] } else { w[0] >= w[1] });
    if !monotone {
        let dir = if increasing { "non-decreasing" } else { "non-increasing" };
        return Err(Error::invalid(format!("{name} must be {dir} in severity")));
    }
    Ok(())
}

impl SeverityTable {
    /// The table shipped in `configs/severity.toml`.
    pub fn builtin() -> &'static SeverityTable {
        static TABLE: OnceLock<SeverityTable> = OnceLock::new();
        TABLE.get_or_init(|| SeverityTable::from_toml_str(BUILTIN_TABLE).expect("shipped severity table is valid"))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: Self = toml::from_str(text).map_err(|e| Error::Format(format!("severity table: {e}")))?;
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let inf = f64::INFINITY;
        check_schedule("density_decrease.drop_fraction", &self.density_decrease.drop_fraction, 0.0, 1.0, true)?;
        check_schedule("cutout.spheres", &self.cutout.spheres.map(|s| s as f64), 0.0, inf, true)?;
        check_schedule("cutout.radius_m", &[self.cutout.radius_m; 5], 0.0, inf, true)?;
        check_schedule("crosstalk.fraction", &self.crosstalk.fraction, 0.0, 1.0, true)?;
        check_schedule("crosstalk.sigma_m", &[self.crosstalk.sigma_m; 5], 0.0, inf, true)?;
        check_schedule("fov_lost.span_deg", &self.fov_lost.span_deg, 0.0, 360.0, false)?;
        check_schedule("gaussian_noise_l.sigma_m", &self.gaussian_noise_l.sigma_m, 0.0, inf, true)?;
        check_schedule("uniform_noise_l.bound_m", &self.uniform_noise_l.bound_m, 0.0, inf, true)?;
        check_schedule("impulse_noise_l.fraction", &self.impulse_noise_l.fraction, 0.0, 1.0, true)?;
        check_schedule("impulse_noise_l.sigma_m", &self.impulse_noise_l.sigma_m, 0.0, inf, true)?;
        check_schedule("impulse_noise_l.magnitude", &[self.impulse_noise_l.magnitude; 5], 0.0, inf, true)?;
        check_schedule("gaussian_noise_i.sigma", &self.gaussian_noise_i.sigma, 0.0, inf, true)?;
        check_schedule("uniform_noise_i.bound", &self.uniform_noise_i.bound, 0.0, inf, true)?;
        check_schedule("impulse_noise_i.fraction", &self.impulse_noise_i.fraction, 0.0, 1.0, true)
    }
}

fn count_of(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).min(n)
}

fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn offset_xyz(points: &mut [[f64; 4]], mut draw: impl FnMut() -> [f64; 3]) {
    for p in points {
        let d = draw();
        for a in 0..3 {
            p[a] += d[a];
        }
    }
}

/// Applies a LiDAR corruption. Surviving points keep their input order.
pub fn corrupt_lidar(cloud: &PointCloud, spec: &CorruptionSpec, table: &SeverityTable) -> Result<PointCloud> {
    spec.validate()?;
    if !spec.kind.is_lidar() {
        return Err(Error::invalid(format!("{} is not a LiDAR corruption", spec.kind)));
    }
    let s = spec.level();
    let n = cloud.len();
    let mut rng = spec.rng();
    let mut points = cloud.points.clone();
    match spec.kind {
        CorruptionKind::DensityDecrease => {
            let order = permutation(n, &mut rng);
            let mut keep = vec![true; n];
            for &i in &order[..count_of(table.density_decrease.drop_fraction[s], n)] {
                keep[i] = false;
            }
            points = retain(points, &keep);
        }
        CorruptionKind::Cutout => {
            let r2 = table.cutout.radius_m.powi(2);
            let centers: Vec<[f64; 4]> = if n == 0 {
                Vec::new()
            } else {
                (0..table.cutout.spheres[s]).map(|_| cloud.points[rng.gen_range(0..n)]).collect()
            };
            let keep: Vec<bool> = points
                .iter()
                .map(|p| {
                    centers
                        .iter()
                        .all(|c| (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() > r2)
                })
                .collect();
            points = retain(points, &keep);
        }
        CorruptionKind::Crosstalk => {
            let sigma = table.crosstalk.sigma_m;
            let order = permutation(n, &mut rng);
            for &i in &order[..count_of(table.crosstalk.fraction[s], n)] {
                offset_xyz(std::slice::from_mut(&mut points[i]), || [0; 3].map(|_| sigma * normal(&mut rng)));
            }
        }
        CorruptionKind::FovLost => {
            let half = table.fov_lost.span_deg[s] / 2.0;
            let keep: Vec<bool> = points.iter().map(|p| p[1].atan2(p[0]).to_degrees().abs() <= half).collect();
            points = retain(points, &keep);
        }
        CorruptionKind::GaussianNoiseL => {
            let sigma = table.gaussian_noise_l.sigma_m[s];
            offset_xyz(&mut points, || [0; 3].map(|_| sigma * normal(&mut rng)));
        }
        CorruptionKind::UniformNoiseL => {
            let b = table.uniform_noise_l.bound_m[s];
            offset_xyz(&mut points, || [0; 3].map(|_| b * rng.gen_range(-1.0..1.0)));
        }
        CorruptionKind::ImpulseNoiseL => {
            let p = &table.impulse_noise_l;
            let step = p.magnitude * p.sigma_m[s];
            let order = permutation(n, &mut rng);
            for &i in &order[..count_of(p.fraction[s], n)] {
                offset_xyz(std::slice::from_mut(&mut points[i]), || {
                    [0; 3].map(|_| if rng.gen_bool(0.5) { step } else { -step })
                });
            }
        }
        _ => unreachable!("checked is_lidar"),
    }
    PointCloud::new(points)
}

fn retain(points: Vec<[f64; 4]>, keep: &[bool]) -> Vec<[f64; 4]> {
    points.into_iter().zip(keep).filter(|(_, &k)| k).map(|(p, _)| p).collect()
}

fn check_image(image: &Tensor) -> Result<(usize, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::invalid(format!("image must be [H, W, 3], got {s:?}")));
    }
    if let Some(i) = image.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid(format!("image value {} at index {i} outside [0, 1]", image.data()[i])));
    }
    Ok((s[0], s[1]))
}

/// Pixels (row-major indices) an impulse corruption overwrites: exactly
/// `round(fraction * H * W)` of them.
pub fn impulse_mask(height: usize, width: usize, spec: &CorruptionSpec, table: &SeverityTable) -> Result<Vec<usize>> {
    spec.validate()?;
    if spec.kind != CorruptionKind::ImpulseNoiseI {
        return Err(Error::invalid(format!("{} has no impulse mask", spec.kind)));
    }
    let n = height * width;
    let mut order = permutation(n, &mut spec.rng());
    order.truncate(count_of(table.impulse_noise_i.fraction[spec.level()], n));
    Ok(order)
}

/// Applies an image corruption to an `[H, W, 3]` image in `[0, 1]`. Output is
/// clamped to `[0, 1]`.
pub fn corrupt_image(image: &Tensor, spec: &CorruptionSpec, table: &SeverityTable) -> Result<Tensor> {
    spec.validate()?;
    if !spec.kind.is_image() {
        return Err(Error::invalid(format!("{} is not an image corruption", spec.kind)));
    }
    let (h, w) = check_image(image)?;
    let s = spec.level();
    let mut rng = spec.rng();
    let mut out = image.clone();
    match spec.kind {
        CorruptionKind::GaussianNoiseI => {
            let sigma = table.gaussian_noise_i.sigma[s];
            for v in out.data_mut() {
                *v += sigma * normal(&mut rng);
            }
        }
        CorruptionKind::UniformNoiseI => {
            let b = table.uniform_noise_i.bound[s];
            for v in out.data_mut() {
                *v += b * rng.gen_range(-1.0..1.0);
            }
        }
        CorruptionKind::ImpulseNoiseI => {
            let mask = impulse_mask(h, w, spec, table)?;
            // the mask consumed its own generator; the coin flips use a fresh one
            let mut coin = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_c01d);
            coin.set_stream(spec.kind.stream());
            for px in mask {
                let v = if coin.gen_bool(0.5) { 1.0 } else { 0.0 };
                out.data_mut()[px * 3..px * 3 + 3].fill(v);
            }
        }
        _ => unreachable!("checked is_image"),
    }
    Ok(out.map(|v| v.clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> &'static SeverityTable {
        SeverityTable::builtin()
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.gen_range(-40.0..40.0),
                        rng.gen_range(-40.0..40.0),
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(0.0..1.0),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    fn spec(kind: CorruptionKind, severity: u8, seed: u64) -> CorruptionSpec {
        CorruptionSpec::new(kind, severity, seed).unwrap()
    }

    fn std_dev(v: &[f64]) -> f64 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
    }

    #[test]
    fn names_round_trip() {
        for k in CorruptionKind::ALL {
            assert_eq!(k.name().parse::<CorruptionKind>().unwrap(), k);
            assert!(k.is_lidar() ^ k.is_image());
        }
        assert!("hail".parse::<CorruptionKind>().is_err());
    }

    #[test]
    fn weather_and_severity_rejected() {
        let err = CorruptionSpec::new("fog".parse().unwrap(), 1, 0).unwrap_err();
        assert!(err.to_string().contains("not implemented: physics-based weather simulation"));
        assert!(CorruptionSpec::new(CorruptionKind::Cutout, 0, 0).is_err());
        assert!(CorruptionSpec::new(CorruptionKind::Cutout, 6, 0).is_err());
    }

    #[test]
    fn wrong_kind_rejected() {
        let cloud = random_cloud(10, 0);
        assert!(corrupt_lidar(&cloud, &spec(CorruptionKind::GaussianNoiseI, 1, 0), table()).is_err());
        let img = Tensor::zeros(&[4, 4, 3]);
        assert!(corrupt_image(&img, &spec(CorruptionKind::Cutout, 1, 0), table()).is_err());
        assert!(corrupt_image(&Tensor::full(&[4, 4, 3], 1.5), &spec(CorruptionKind::GaussianNoiseI, 1, 0), table()).is_err());
    }

    #[test]
    fn density_decrease_halves_at_top_severity() {
        let out = corrupt_lidar(&random_cloud(1000, 1), &spec(CorruptionKind::DensityDecrease, 5, 3), table()).unwrap();
        assert_eq!(out.len(), 500);
    }

    #[test]
    fn fov_lost_keeps_forward_span() {
        let out = corrupt_lidar(&random_cloud(5000, 2), &spec(CorruptionKind::FovLost, 5, 0), table()).unwrap();
        assert!(!out.is_empty());
        for p in &out.points {
            assert!(p[1].atan2(p[0]).to_degrees().abs() <= 30.0);
        }
    }

    #[test]
    fn lidar_gaussian_noise_std() {
        let cloud = random_cloud(100_000, 3);
        let out = corrupt_lidar(&cloud, &spec(CorruptionKind::GaussianNoiseL, 1, 4), table()).unwrap();
        for a in 0..3 {
            let d: Vec<f64> = out.points.iter().zip(&cloud.points).map(|(p, q)| p[a] - q[a]).collect();
            assert!((std_dev(&d) - 0.02).abs() < 0.002);
        }
    }

    #[test]
    fn cutout_clears_spheres() {
        let cloud = random_cloud(4000, 5);
        let sp = spec(CorruptionKind::Cutout, 3, 6);
        let out = corrupt_lidar(&cloud, &sp, table()).unwrap();
        assert!(out.len() < cloud.len());
        let mut rng = sp.rng();
        let centers: Vec<[f64; 4]> = (0..3).map(|_| cloud.points[rng.gen_range(0..cloud.len())]).collect();
        for p in &out.points {
            for c in &centers {
                assert!((0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() > 4.0);
            }
        }
    }

    #[test]
    fn impulse_mask_count_on_zero_image() {
        let img = Tensor::zeros(&[50, 40, 3]);
        let sp = spec(CorruptionKind::ImpulseNoiseI, 1, 7);
        let mask = impulse_mask(50, 40, &sp, table()).unwrap();
        assert_eq!(mask.len(), 20);
        let out = corrupt_image(&img, &sp, table()).unwrap();
        for px in 0..2000 {
            let changed = out.data()[px * 3] != 0.0;
            if changed {
                assert!(mask.contains(&px));
                assert_eq!(&out.data()[px * 3..px * 3 + 3], &[1.0; 3]);
            }
        }
    }

    #[test]
    fn zero_sigma_is_identity() {
        let mut t = table().clone();
        t.gaussian_noise_i.sigma = [0.0; 5];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = Tensor::uniform(&[6, 5, 3], 0.0, 1.0, &mut rng);
        assert_eq!(corrupt_image(&img, &spec(CorruptionKind::GaussianNoiseI, 2, 1), &t).unwrap(), img);
    }

    #[test]
    fn image_gaussian_std() {
        let img = Tensor::full(&[200, 200, 3], 0.5);
        let out = corrupt_image(&img, &spec(CorruptionKind::GaussianNoiseI, 3, 9), table()).unwrap();
        let d: Vec<f64> = out.data().iter().map(|v| v - 0.5).collect();
        assert!((std_dev(&d) - 0.08).abs() < 0.008);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn deterministic_and_finite() {
        let cloud = random_cloud(500, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = Tensor::uniform(&[8, 8, 3], 0.0, 1.0, &mut rng);
        for kind in CorruptionKind::ALL {
            for sev in 1..=5 {
                let sp = spec(kind, sev, 42);
                if kind.is_lidar() {
                    let a = corrupt_lidar(&cloud, &sp, table()).unwrap();
                    assert_eq!(a, corrupt_lidar(&cloud, &sp, table()).unwrap());
                    assert!(a.points.iter().flatten().all(|v| v.is_finite()));
                } else {
                    let a = corrupt_image(&img, &sp, table()).unwrap();
                    assert_eq!(a, corrupt_image(&img, &sp, table()).unwrap());
                }
            }
        }
    }

    #[test]
    fn strength_monotone_in_severity() {
        let cloud = random_cloud(3000, 12);
        let img = Tensor::full(&[40, 40, 3], 0.5);
        for seed in 0..5 {
            for kind in CorruptionKind::ALL {
                let mut prev: Option<f64> = None;
                for sev in 1..=5 {
                    let sp = spec(kind, sev, seed);
                    let strength = match kind {
                        CorruptionKind::DensityDecrease | CorruptionKind::Cutout | CorruptionKind::FovLost => {
                            -(corrupt_lidar(&cloud, &sp, table()).unwrap().len() as f64)
                        }
                        k if k.is_lidar() => {
                            let out = corrupt_lidar(&cloud, &sp, table()).unwrap();
                            out.points
                                .iter()
                                .zip(&cloud.points)
                                .map(|(p, q)| (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>())
                                .sum()
                        }
                        _ => {
                            let out = corrupt_image(&img, &sp, table()).unwrap();
                            out.data().iter().map(|v| (v - 0.5).powi(2)).sum()
                        }
                    };
                    if let Some(p) = prev {
                        assert!(strength >= p - 1e-9, "{kind} severity {sev}");
                    }
                    prev = Some(strength);
                }
            }
        }
    }

    #[test]
    fn table_validation() {
        let mut bad = table().clone();
        bad.fov_lost.span_deg = [60.0, 120.0, 180.0, 240.0, 300.0];
        assert!(bad.validate().is_err());
        assert!(SeverityTable::from_toml_str("[cutout]\nspheres = [1]").is_err());
        let text = toml::to_string(table()).unwrap();
        assert_eq!(&SeverityTable::from_toml_str(&text).unwrap(), table());
    }
}
