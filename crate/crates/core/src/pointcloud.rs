//! LiDAR preprocessing: mean-pooled voxelization, farthest point sampling and
//! strided sparse 3-D convolution, plus the bird's-eye raster that turns the
//! coarsest voxel stage into a dense `(H, W, C)` feature map.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{LinearMap, Tensor};

/// `(x, y, z, reflectance)` records in meters / unitless.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<[f64; 4]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 4]>) -> Result<Self> {
        let cloud = Self { points };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "point cloud".into(),
                    index: i,
                });
            }
            if !(0.0..=1.0).contains(&p[3]) {
                return Err(Error::invalid(format!(
                    "point {i}: reflectance {} outside [0, 1]",
                    p[3]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelCell {
    pub feature: Vec<f64>,
    pub count: usize,
}

/// Sparse voxel grid storing only non-empty cells, keyed by `[i, j, k]`
/// along `(x, y, z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub origin: [f64; 3],
    pub voxel_size: [f64; 3],
    pub dims: [usize; 3],
    pub feature_dim: usize,
    pub cells: BTreeMap<[usize; 3], VoxelCell>,
}

impl VoxelGrid {
    pub fn empty(origin: [f64; 3], voxel_size: [f64; 3], dims: [usize; 3], feature_dim: usize) -> Self {
        Self {
            origin,
            voxel_size,
            dims,
            feature_dim,
            cells: BTreeMap::new(),
        }
    }

    pub fn total_count(&self) -> usize {
        self.cells.values().map(|c| c.count).sum()
    }

    /// Voxel index of a position, or `None` when out of bounds.
    pub fn index_of(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size[a]).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            idx[a] = f as usize;
        }
        Some(idx)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Voxelization {
    pub grid: VoxelGrid,
    /// Points that fell outside the grid bounds.
    pub dropped: usize,
}

/// Bins points into `floor((p - origin) / voxel_size)` and averages their
/// `(x, y, z, r)` records per non-empty cell.
pub fn voxelize_mean(
    cloud: &PointCloud,
    origin: [f64; 3],
    voxel_size: [f64; 3],
    dims: [usize; 3],
) -> Result<Voxelization> {
    if voxel_size.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::invalid(format!("voxel size must be positive, got {voxel_size:?}")));
    }
    if dims.contains(&0) {
        return Err(Error::invalid(format!("grid dims must be positive, got {dims:?}")));
    }
    let mut grid = VoxelGrid::empty(origin, voxel_size, dims, 4);
    let mut dropped = 0;
    for p in &cloud.points {
        match grid.index_of([p[0], p[1], p[2]]) {
            Some(idx) => {
                let cell = grid.cells.entry(idx).or_insert_with(|| VoxelCell {
                    feature: vec![0.0; 4],
                    count: 0,
                });
                for (f, v) in cell.feature.iter_mut().zip(p) {
                    *f += v;
                }
                cell.count += 1;
            }
            None => dropped += 1,
        }
    }
    for cell in grid.cells.values_mut() {
        let n = cell.count as f64;
        cell.feature.iter_mut().for_each(|f| *f /= n);
    }
    Ok(Voxelization { grid, dropped })
}

fn sq_dist(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

/// Greedy farthest point sampling on xyz. Returns `min(k, N)` distinct
/// indices beginning with `start_index`; ties go to the lowest index.
pub fn fps_sample(cloud: &PointCloud, k: usize, start_index: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if n == 0 || k == 0 {
        return Ok(Vec::new());
    }
    if start_index >= n {
        return Err(Error::invalid(format!(
            "fps start index {start_index} out of range for {n} points"
        )));
    }
    let pts = &cloud.points;
    let mut min_d: Vec<f64> = pts.iter().map(|p| sq_dist(p, &pts[start_index])).collect();
    let mut taken = vec![false; n];
    taken[start_index] = true;
    let mut out = vec![start_index];
    while out.len() < k.min(n) {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if !taken[i] && min_d[i] > best_d {
                best = i;
                best_d = min_d[i];
            }
        }
        taken[best] = true;
        out.push(best);
        let pb = pts[best];
        for (d, p) in min_d.iter_mut().zip(pts) {
            *d = d.min(sq_dist(p, &pb));
        }
    }
    Ok(out)
}

/// `3x3x3` convolution weights laid out `[tap][c_in][c_out]`, tap index
/// `(di + 1) * 9 + (dj + 1) * 3 + (dk + 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvKernel {
    pub c_in: usize,
    pub c_out: usize,
    pub weights: Vec<f64>,
}

impl ConvKernel {
    pub const TAPS: usize = 27;

    pub fn new(c_in: usize, c_out: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != Self::TAPS * c_in * c_out {
            return Err(Error::shape("conv kernel", &[27, c_in, c_out], &[weights.len()]));
        }
        Ok(Self { c_in, c_out, weights })
    }

    pub fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (c_in as f64).sqrt();
        let weights = (0..Self::TAPS * c_in * c_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self { c_in, c_out, weights }
    }

    pub fn tap_index(d: [isize; 3]) -> usize {
        ((d[0] + 1) * 9 + (d[1] + 1) * 3 + (d[2] + 1)) as usize
    }

    /// Weight block `(c_in, c_out)` of one tap.
    pub fn tap(&self, t: usize) -> &[f64] {
        let n = self.c_in * self.c_out;
        &self.weights[t * n..(t + 1) * n]
    }
}

/// Sparse `3x3x3` convolution with ReLU. Output sites are those whose
/// receptive field (centered on `stride * o`) touches a non-empty input
/// cell; empty inputs contribute zero. Stride 2 halves each dim, rounding up.
pub fn sparse_conv_downsample(grid: &VoxelGrid, kernel: &ConvKernel, stride: usize) -> Result<VoxelGrid> {
    if stride != 1 && stride != 2 {
        return Err(Error::invalid(format!("stride must be 1 or 2, got {stride}")));
    }
    if kernel.c_in != grid.feature_dim {
        return Err(Error::shape(
            "sparse_conv",
            &[grid.feature_dim],
            &[kernel.c_in, kernel.c_out],
        ));
    }
    let out_dims = grid.dims.map(|d| d.div_ceil(stride));
    let mut out = VoxelGrid::empty(
        grid.origin,
        grid.voxel_size.map(|v| v * stride as f64),
        out_dims,
        kernel.c_out,
    );
    // scatter each input cell into every output site whose window covers it
    let s = stride as isize;
    let co = kernel.c_out;
    let mut acc: BTreeMap<[usize; 3], (Vec<f64>, usize)> = BTreeMap::new();
    for (idx, cell) in &grid.cells {
        let lo: Vec<isize> = (0..3).map(|a| (idx[a] as isize - 1 + s - 1).div_euclid(s)).collect();
        let hi: Vec<isize> = (0..3).map(|a| (idx[a] as isize + 1).div_euclid(s)).collect();
        for oi in lo[0].max(0)..=hi[0].min(out_dims[0] as isize - 1) {
            for oj in lo[1].max(0)..=hi[1].min(out_dims[1] as isize - 1) {
                for ok in lo[2].max(0)..=hi[2].min(out_dims[2] as isize - 1) {
                    let d = [
                        idx[0] as isize - s * oi,
                        idx[1] as isize - s * oj,
                        idx[2] as isize - s * ok,
                    ];
                    let w = kernel.tap(ConvKernel::tap_index(d));
                    let entry = acc
                        .entry([oi as usize, oj as usize, ok as usize])
                        .or_insert_with(|| (vec![0.0; co], 0));
                    for (p, &x) in cell.feature.iter().enumerate() {
                        if x == 0.0 {
                            continue;
                        }
                        for (o, &wv) in entry.0.iter_mut().zip(&w[p * co..(p + 1) * co]) {
                            *o += x * wv;
                        }
                    }
                    entry.1 += cell.count;
                }
            }
        }
    }
    for (idx, (mut feature, count)) in acc {
        feature.iter_mut().for_each(|v| *v = v.max(0.0));
        out.cells.insert(idx, VoxelCell { feature, count });
    }
    Ok(out)
}

/// Fixed-weight LiDAR feature extractor: voxelize, four sparse conv stages
/// (1x, 2x, 4x, 8x), bird's-eye raster, channel projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarEncoder {
    pub origin: [f64; 3],
    pub voxel_size: [f64; 3],
    pub dims: [usize; 3],
    pub stages: Vec<(ConvKernel, usize)>,
    pub projection: LinearMap,
}

/// Intermediates of one [`LidarEncoder::encode`] call.
#[derive(Clone, Debug)]
pub struct LidarFeatures {
    pub voxels: Voxelization,
    pub stages: Vec<VoxelGrid>,
    /// `(H, W, C)` bird's-eye feature map.
    pub raster: Tensor,
}

impl LidarEncoder {
    pub const STAGE_WIDTHS: [usize; 4] = [16, 32, 64, 64];
    pub const STAGE_STRIDES: [usize; 4] = [1, 2, 2, 2];

    pub fn init<R: Rng + ?Sized>(
        origin: [f64; 3],
        voxel_size: [f64; 3],
        dims: [usize; 3],
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let mut c_in = 4;
        let mut stages = Vec::new();
        for (&w, &s) in Self::STAGE_WIDTHS.iter().zip(&Self::STAGE_STRIDES) {
            stages.push((ConvKernel::init(c_in, w, rng), s));
            c_in = w;
        }
        // bias-free so cells without LiDAR stay exactly zero
        let projection = LinearMap::init(c_in, channels, false, rng);
        Self {
            origin,
            voxel_size,
            dims,
            stages,
            projection,
        }
    }

    fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.voxel_size[a] * self.dims[a] as f64)
    }

    pub fn encode(&self, cloud: &PointCloud, height: usize, width: usize) -> Result<LidarFeatures> {
        let voxels = voxelize_mean(cloud, self.origin, self.voxel_size, self.dims)?;
        // positions rescaled to the unit cube so conv inputs stay O(1)
        let ext = self.extent();
        let mut grid = voxels.grid.clone();
        for cell in grid.cells.values_mut() {
            for a in 0..3 {
                cell.feature[a] = (cell.feature[a] - self.origin[a]) / ext[a];
            }
        }
        let mut stages = Vec::with_capacity(self.stages.len());
        for (kernel, stride) in &self.stages {
            grid = sparse_conv_downsample(&grid, kernel, *stride)?;
            stages.push(grid.clone());
        }
        let bev = bev_raster(&grid, height, width)?;
        let raster = self.projection.apply(&bev)?;
        Ok(LidarFeatures {
            voxels,
            stages,
            raster,
        })
    }
}

/// Collapses z by keeping the highest-count cell per `(i, j)` column (lowest
/// k on ties) and paints each column onto the `height x width` pixels whose
/// centers fall inside it. Pixels over empty columns are zero.
pub fn bev_raster(grid: &VoxelGrid, height: usize, width: usize) -> Result<Tensor> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("raster dims must be positive"));
    }
    let c = grid.feature_dim;
    let mut columns: BTreeMap<(usize, usize), &VoxelCell> = BTreeMap::new();
    for (idx, cell) in &grid.cells {
        let slot = columns.entry((idx[0], idx[1])).or_insert(cell);
        if cell.count > slot.count {
            *slot = cell;
        }
    }
    let mut out = Tensor::zeros(&[height, width, c]);
    for r in 0..height {
        let i = (r * grid.dims[0]) / height;
        for q in 0..width {
            let j = (q * grid.dims[1]) / width;
            if let Some(cell) = columns.get(&(i, j)) {
                out.row_mut(r * width + q).copy_from_slice(&cell.feature);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn cloud(points: &[[f64; 4]]) -> PointCloud {
        PointCloud::new(points.to_vec()).unwrap()
    }

    fn random_cloud(n: usize, lo: f64, hi: f64, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.gen_range(lo..hi),
                        rng.gen_range(lo..hi),
                        rng.gen_range(lo..hi),
                        rng.gen_range(0.0..1.0),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_reflectance_and_nan() {
        assert!(PointCloud::new(vec![[0.0, 0.0, 0.0, 1.5]]).is_err());
        assert!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0, 0.5]]).is_err());
    }

    #[test]
    fn voxelize_single_and_pair() {
        let v = voxelize_mean(&cloud(&[[0.5, 0.5, 0.5, 0.2]]), [0.0; 3], [1.0; 3], [4; 3]).unwrap();
        assert_eq!(v.grid.cells.len(), 1);
        assert_eq!(v.grid.cells[&[0, 0, 0]].feature, vec![0.5, 0.5, 0.5, 0.2]);

        let v = voxelize_mean(
            &cloud(&[[0.2, 0.2, 0.2, 0.2], [0.4, 0.4, 0.4, 0.4]]),
            [0.0; 3],
            [1.0; 3],
            [4; 3],
        )
        .unwrap();
        let cell = &v.grid.cells[&[0, 0, 0]];
        assert_eq!(cell.count, 2);
        assert!((cell.feature[3] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn voxelize_empty_and_errors() {
        let v = voxelize_mean(&PointCloud::default(), [0.0; 3], [1.0; 3], [2; 3]).unwrap();
        assert!(v.grid.cells.is_empty());
        assert_eq!(v.dropped, 0);
        assert!(voxelize_mean(&PointCloud::default(), [0.0; 3], [1.0, 0.0, 1.0], [2; 3]).is_err());
    }

    #[test]
    fn voxelize_matches_hash_and_average() {
        let c = random_cloud(1000, -1.0, 9.0, 5);
        let (origin, size, dims) = ([0.0, 0.0, 0.0], [1.0, 0.5, 2.0], [8, 16, 4]);
        let v = voxelize_mean(&c, origin, size, dims).unwrap();
        let mut groups: HashMap<[i64; 3], Vec<[f64; 4]>> = HashMap::new();
        let mut dropped = 0;
        for p in &c.points {
            let key = [0, 1, 2].map(|a| ((p[a] - origin[a]) / size[a]).floor() as i64);
            if (0..3).all(|a| key[a] >= 0 && key[a] < dims[a] as i64) {
                groups.entry(key).or_default().push(*p);
            } else {
                dropped += 1;
            }
        }
        assert_eq!(v.dropped, dropped);
        assert_eq!(v.grid.cells.len(), groups.len());
        for (key, pts) in groups {
            let cell = &v.grid.cells[&key.map(|k| k as usize)];
            assert_eq!(cell.count, pts.len());
            for a in 0..4 {
                let mean = pts.iter().map(|p| p[a]).sum::<f64>() / pts.len() as f64;
                assert!((cell.feature[a] - mean).abs() < 1e-12);
            }
        }
        assert_eq!(v.grid.total_count() + v.dropped, c.len());
    }

    #[test]
    fn fps_examples() {
        let line = cloud(&[[0.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [10.0, 0.0, 0.0, 0.0]]);
        assert_eq!(fps_sample(&line, 2, 0).unwrap(), vec![0, 2]);
        let all = fps_sample(&line, 3, 1).unwrap();
        assert_eq!(all[0], 1);
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2]);
        assert!(fps_sample(&line, 2, 3).is_err());
        assert!(fps_sample(&PointCloud::default(), 4, 0).unwrap().is_empty());
    }

    #[test]
    fn fps_handles_duplicate_points() {
        let dup = cloud(&[[1.0, 1.0, 1.0, 0.0]; 4]);
        let mut idx = fps_sample(&dup, 4, 2).unwrap();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }

    #[test]
    fn conv_rejects_bad_stride_and_dims() {
        let g = VoxelGrid::empty([0.0; 3], [1.0; 3], [4; 3], 4);
        let k = ConvKernel::new(4, 2, vec![0.0; 27 * 8]).unwrap();
        assert!(sparse_conv_downsample(&g, &k, 3).is_err());
        let k3 = ConvKernel::new(3, 2, vec![0.0; 27 * 6]).unwrap();
        assert!(sparse_conv_downsample(&g, &k3, 1).is_err());
        assert!(sparse_conv_downsample(&g, &k, 2).unwrap().cells.is_empty());
    }

    #[test]
    fn identity_kernel_stride_one() {
        let c = random_cloud(50, 0.0, 4.0, 2);
        let mut grid = voxelize_mean(&c, [0.0; 3], [1.0; 3], [4; 3]).unwrap().grid;
        // give some features negative values to exercise the ReLU
        for cell in grid.cells.values_mut() {
            cell.feature[1] -= 2.0;
        }
        let mut w = vec![0.0; 27 * 16];
        let center = ConvKernel::tap_index([0, 0, 0]);
        for p in 0..4 {
            w[center * 16 + p * 4 + p] = 1.0;
        }
        let k = ConvKernel::new(4, 4, w).unwrap();
        let out = sparse_conv_downsample(&grid, &k, 1).unwrap();
        for (idx, cell) in &grid.cells {
            let want: Vec<f64> = cell.feature.iter().map(|v| v.max(0.0)).collect();
            assert_eq!(out.cells[idx].feature, want);
        }
    }

    #[test]
    fn single_voxel_all_ones_stride_two() {
        let grid = voxelize_mean(&cloud(&[[3.5, 2.5, 0.5, 0.5]]), [0.0; 3], [1.0; 3], [6, 6, 6])
            .unwrap()
            .grid;
        let k = ConvKernel::new(4, 1, vec![1.0; 27 * 4]).unwrap();
        let out = sparse_conv_downsample(&grid, &k, 2).unwrap();
        assert_eq!(out.dims, [3, 3, 3]);
        // input (3, 2, 0) is covered by outputs o with |idx - 2o| <= 1
        let sites: Vec<[usize; 3]> = out.cells.keys().copied().collect();
        assert_eq!(sites, vec![[1, 1, 0], [2, 1, 0]]);
        for cell in out.cells.values() {
            assert!((cell.feature[0] - (3.5 + 2.5 + 0.5 + 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn bev_raster_paints_columns() {
        let mut grid = VoxelGrid::empty([0.0; 3], [1.0; 3], [2, 2, 2], 1);
        grid.cells.insert([0, 1, 0], VoxelCell { feature: vec![1.0], count: 1 });
        grid.cells.insert([0, 1, 1], VoxelCell { feature: vec![2.0], count: 3 });
        let r = bev_raster(&grid, 4, 4).unwrap();
        assert_eq!(r.get(&[0, 2, 0]), 2.0);
        assert_eq!(r.get(&[1, 3, 0]), 2.0);
        assert_eq!(r.get(&[2, 2, 0]), 0.0);
        assert_eq!(r.get(&[0, 0, 0]), 0.0);
    }
}
