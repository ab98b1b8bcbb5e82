//! Self-verification suites: finite-difference gradient checks, brute-force
//! oracles and algebraic invariants over every numerical kernel. Shared by
//! `savid selftest` and the acceptance tests.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::asmn::{asmn_backward, asmn_step, AsmnMode, AsmnParams, AsmnState};
use crate::corruption::{corrupt_image, corrupt_lidar, CorruptionKind, CorruptionSpec, SeverityTable};
use crate::error::Result;
use crate::gman::{gma_backward, gma_forward, lstm_step, lstm_step_backward, multi_head_attention, Ctx, GmaParams, LstmState, LstmWeights};
use crate::kgf::{channel_projection, cosine_paper, kgf_fuse, kgf_oracle, neighbor_min_distance, CosineKind, NeighborSpec};
use crate::metrics::{ap_corr, average_precision, bev_iou, match_predictions, nms, rce, ApMode, Box3D, RobustnessTable};
use crate::numerics::ops::softmax_backward;
use crate::numerics::{grad_check, layer_norm, softmax_lastdim, Tensor};
use crate::numerics::ops::layer_norm_backward;
use crate::numerics::spectral::dft_in_place;
use crate::pointcloud::{fps_sample, sparse_conv_downsample, voxelize_mean, ConvKernel, PointCloud, VoxelCell, VoxelGrid};

/// Relative-error bound for every gradient check.
pub const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: Vec<Check>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

type CheckFn = fn() -> Result<(bool, String)>;

fn run_suite(name: &'static str, checks: &[(&str, CheckFn)]) -> SuiteReport {
    let start = Instant::now();
    let checks = checks
        .iter()
        .map(|(n, f)| {
            let (passed, detail) = match f() {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            Check {
                name: n.to_string(),
                passed,
                detail,
            }
        })
        .collect();
    SuiteReport {
        name,
        checks,
        elapsed: start.elapsed(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn within(err: f64, tol: f64) -> (bool, String) {
    (err < tol, format!("max error {err:.3e} (limit {tol:.0e})"))
}

// ---------------------------------------------------------------- gradients

fn grad_softmax() -> Result<(bool, String)> {
    let mut r = rng(1);
    let x = Tensor::uniform(&[3, 5], -2.0, 2.0, &mut r);
    let proj = Tensor::uniform(&[3, 5], -1.0, 1.0, &mut r);
    let analytic = softmax_backward(&softmax_lastdim(&x), &proj)?;
    let err = grad_check(|t| softmax_lastdim(t).mul(&proj).map(|y| y.sum()), &x, &analytic)?;
    Ok(within(err, GRAD_TOLERANCE))
}

fn grad_layer_norm() -> Result<(bool, String)> {
    let mut r = rng(2);
    let x = Tensor::uniform(&[4, 6], -2.0, 2.0, &mut r);
    let gamma: Vec<f64> = (0..6).map(|_| r.gen_range(0.5..1.5)).collect();
    let beta: Vec<f64> = (0..6).map(|_| r.gen_range(-0.5..0.5)).collect();
    let proj = Tensor::uniform(&[4, 6], -1.0, 1.0, &mut r);
    let eps = 1e-5;
    let analytic = layer_norm_backward(&x, &gamma, eps, &proj)?;
    let err = grad_check(|t| layer_norm(t, &gamma, &beta, eps)?.mul(&proj).map(|y| y.sum()), &x, &analytic)?;
    Ok(within(err, GRAD_TOLERANCE))
}

fn grad_lstm() -> Result<(bool, String)> {
    let mut r = rng(3);
    let w = LstmWeights::init(3, &mut r);
    let x = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut r);
    let st = LstmState {
        h: Tensor::uniform(&[2, 3], -1.0, 1.0, &mut r),
        c: Tensor::uniform(&[2, 3], 0.2, 1.0, &mut r),
    };
    let ph = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut r);
    let pc = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut r);
    let loss = |x: &Tensor, st: &LstmState| -> Result<f64> {
        let (h, next) = lstm_step(x, st, &w)?;
        Ok(h.mul(&ph)?.sum() + next.c.mul(&pc)?.sum())
    };
    let g = lstm_step_backward(&x, &st, &w, &ph, Some(&pc))?;
    let ex = grad_check(|t| loss(t, &st), &x, &g.x)?;
    let eh = grad_check(|t| loss(&x, &LstmState { h: t.clone(), c: st.c.clone() }), &st.h, &g.h)?;
    let ec = grad_check(|t| loss(&x, &LstmState { h: st.h.clone(), c: t.clone() }), &st.c, &g.c)?;
    Ok(within(ex.max(eh).max(ec), GRAD_TOLERANCE))
}

fn grad_gma() -> Result<(bool, String)> {
    let mut r = rng(4);
    let mut p = GmaParams::init(4, &mut r);
    p.norm.gamma = (0..4).map(|_| r.gen_range(0.5..1.5)).collect();
    p.norm.beta = (0..4).map(|_| r.gen_range(-0.5..0.5)).collect();
    let i = Tensor::uniform(&[1, 3, 4], -1.0, 1.0, &mut r);
    let d = Tensor::uniform(&[1, 3, 4], -1.0, 1.0, &mut r);
    let st = LstmState {
        h: Tensor::uniform(&[1, 3, 4], -0.5, 0.5, &mut r),
        c: Tensor::uniform(&[1, 3, 4], 0.5, 1.0, &mut r),
    };
    let proj = Tensor::uniform(&[1, 3, 4], -1.0, 1.0, &mut r);
    let loss = |i: &Tensor, d: &Tensor| -> Result<f64> {
        gma_forward(i, d, &p, 2, &st, 0.0, Ctx::inference())?.0.mul(&proj).map(|y| y.sum())
    };
    let (gi, gd) = gma_backward(&i, &d, &p, 2, &st, &proj)?;
    let ei = grad_check(|t| loss(t, &d), &i, &gi)?;
    let ed = grad_check(|t| loss(&i, t), &d, &gd)?;
    Ok(within(ei.max(ed), GRAD_TOLERANCE))
}

fn grad_asmn() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for (n, mode) in [AsmnMode::Attention, AsmnMode::Elementwise].into_iter().enumerate() {
        let mut r = rng(5 + n as u64);
        let mut p = AsmnParams::init(3, 50 + n as u64);
        p.mode = mode;
        p.sparsity = 1.0;
        let fi = Tensor::uniform(&[1, 3, 3], -1.0, 1.0, &mut r);
        let fl = Tensor::uniform(&[1, 3, 3], -1.0, 1.0, &mut r);
        let st = AsmnState {
            h: Tensor::uniform(&[3, 3], 0.5, 1.5, &mut r),
            c: Tensor::uniform(&[3, 3], 0.5, 1.5, &mut r),
        };
        let proj = Tensor::uniform(&[1, 3, 3], -1.0, 1.0, &mut r);
        let loss = |a: &Tensor, b: &Tensor| -> Result<f64> { asmn_step(a, b, &p, &st)?.0.mul(&proj).map(|y| y.sum()) };
        let (gi, gl) = asmn_backward(&fi, &fl, &p, &st, &proj)?;
        worst = worst
            .max(grad_check(|t| loss(t, &fl), &fi, &gi)?)
            .max(grad_check(|t| loss(&fi, t), &fl, &gl)?);
    }
    Ok(within(worst, GRAD_TOLERANCE))
}

/// Finite-difference against analytic gradients of every differentiable
/// kernel.
pub fn gradient_suite() -> SuiteReport {
    run_suite(
        "gradient",
        &[
            ("softmax", grad_softmax),
            ("layer_norm", grad_layer_norm),
            ("lstm_step", grad_lstm),
            ("gma_forward", grad_gma),
            ("asmn_step", grad_asmn),
        ],
    )
}

// ------------------------------------------------------------------ oracles

fn random_cloud(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| [r.gen_range(lo..hi), r.gen_range(lo..hi), r.gen_range(lo..hi), r.gen_range(0.0..1.0)])
            .collect(),
    )
    .expect("finite points")
}

fn oracle_kgf() -> Result<(bool, String)> {
    let mut r = rng(10);
    let mut mismatches = 0;
    for trial in 0..100 {
        let (h, w, c) = (r.gen_range(1..8), r.gen_range(1..8), r.gen_range(1..6));
        let f_s = Tensor::uniform(&[h, w, c], -1.0, 1.0, &mut r);
        let f_l = Tensor::from_fn(&[h, w, c], |_| if r.gen_bool(0.4) { 0.0 } else { r.gen_range(-1.0..1.0) });
        let spec = if trial % 2 == 0 {
            NeighborSpec::Window3x3
        } else {
            NeighborSpec::Knn { k: r.gen_range(1..12) }
        };
        if kgf_fuse(&f_s, &f_l, spec, CosineKind::Paper)? != kgf_oracle(&f_s, &f_l, spec, CosineKind::Paper)? {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{mismatches} of 100 instances differ")))
}

fn oracle_voxelize() -> Result<(bool, String)> {
    let mut r = rng(11);
    let cloud = random_cloud(&mut r, 2000, -1.0, 9.0);
    let (origin, size, dims) = ([0.0; 3], [1.0, 0.5, 2.0], [8, 16, 4]);
    let v = voxelize_mean(&cloud, origin, size, dims)?;
    let mut groups: HashMap<[i64; 3], Vec<[f64; 4]>> = HashMap::new();
    let mut dropped = 0;
    for p in &cloud.points {
        let key = [0, 1, 2].map(|a| ((p[a] - origin[a]) / size[a]).floor() as i64);
        if (0..3).all(|a| key[a] >= 0 && key[a] < dims[a] as i64) {
            groups.entry(key).or_default().push(*p);
        } else {
            dropped += 1;
        }
    }
    let mut worst: f64 = 0.0;
    let mut ok = v.dropped == dropped && v.grid.cells.len() == groups.len();
    for (key, pts) in &groups {
        let Some(cell) = v.grid.cells.get(&key.map(|k| k as usize)) else {
            ok = false;
            continue;
        };
        ok &= cell.count == pts.len();
        for a in 0..4 {
            let mean = pts.iter().map(|p| p[a]).sum::<f64>() / pts.len() as f64;
            worst = worst.max((cell.feature[a] - mean).abs());
        }
    }
    Ok((ok && worst < 1e-12, format!("{} cells, max mean error {worst:.1e}", groups.len())))
}

fn oracle_fps() -> Result<(bool, String)> {
    let mut r = rng(12);
    for _ in 0..10 {
        let cloud = random_cloud(&mut r, 300, -5.0, 5.0);
        let k = r.gen_range(1..40);
        let got = fps_sample(&cloud, k, 0)?;
        // recompute every minimum distance from scratch at each step
        let mut want = vec![0usize];
        while want.len() < k {
            let mut best = (f64::NEG_INFINITY, 0);
            for i in 0..cloud.len() {
                if want.contains(&i) {
                    continue;
                }
                let d = want
                    .iter()
                    .map(|&j| (0..3).map(|a| (cloud.points[i][a] - cloud.points[j][a]).powi(2)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min);
                if d > best.0 {
                    best = (d, i);
                }
            }
            want.push(best.1);
        }
        if got != want {
            return Ok((false, format!("k={k}: {got:?} vs {want:?}")));
        }
    }
    Ok((true, "10 clouds agree".into()))
}

fn dense_conv_reference(grid: &VoxelGrid, kernel: &ConvKernel, stride: usize) -> Vec<([usize; 3], Vec<f64>, usize)> {
    let out_dims = grid.dims.map(|d| d.div_ceil(stride));
    let mut out = Vec::new();
    for i in 0..out_dims[0] {
        for j in 0..out_dims[1] {
            for k in 0..out_dims[2] {
                let mut acc = vec![0.0; kernel.c_out];
                let mut count = 0;
                let mut active = false;
                for t in 0..27usize {
                    let d = [t / 9, (t / 3) % 3, t % 3].map(|v| v as isize - 1);
                    let src = [
                        (stride * i) as isize + d[0],
                        (stride * j) as isize + d[1],
                        (stride * k) as isize + d[2],
                    ];
                    if src.iter().any(|&v| v < 0) {
                        continue;
                    }
                    let Some(cell) = grid.cells.get(&src.map(|v| v as usize)) else { continue };
                    active = true;
                    count += cell.count;
                    let wt = kernel.tap(ConvKernel::tap_index(d));
                    for p in 0..kernel.c_in {
                        for o in 0..kernel.c_out {
                            acc[o] += cell.feature[p] * wt[p * kernel.c_out + o];
                        }
                    }
                }
                if active {
                    out.push(([i, j, k], acc.into_iter().map(|v| v.max(0.0)).collect(), count));
                }
            }
        }
    }
    out
}

fn oracle_sparse_conv() -> Result<(bool, String)> {
    let mut r = rng(13);
    let mut worst: f64 = 0.0;
    for trial in 0..8 {
        let dims = [r.gen_range(1..9), r.gen_range(1..9), r.gen_range(1..6)];
        let mut grid = VoxelGrid::empty([0.0; 3], [1.0; 3], dims, 3);
        for _ in 0..r.gen_range(1..30) {
            let idx = [0, 1, 2].map(|a| r.gen_range(0..dims[a]));
            grid.cells.insert(
                idx,
                VoxelCell {
                    feature: (0..3).map(|_| r.gen_range(-1.0..1.0)).collect(),
                    count: r.gen_range(1..5),
                },
            );
        }
        let kernel = ConvKernel::init(3, 4, &mut r);
        let stride = 1 + trial % 2;
        let got = sparse_conv_downsample(&grid, &kernel, stride)?;
        let want = dense_conv_reference(&grid, &kernel, stride);
        if got.cells.len() != want.len() {
            return Ok((false, format!("trial {trial}: {} sites vs {}", got.cells.len(), want.len())));
        }
        for (idx, feat, count) in want {
            let Some(cell) = got.cells.get(&idx) else {
                return Ok((false, format!("trial {trial}: missing site {idx:?}")));
            };
            if cell.count != count {
                return Ok((false, format!("trial {trial}: count at {idx:?}")));
            }
            for (a, b) in cell.feature.iter().zip(&feat) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(within(worst, 1e-12))
}

fn random_box(r: &mut ChaCha8Rng) -> Box3D {
    Box3D::new(
        [r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0), 0.0],
        [r.gen_range(0.5..4.0), r.gen_range(0.5..3.0), 1.0],
        r.gen_range(-PI..PI),
        0,
        r.gen_range(0.0..1.0),
    )
    .expect("valid box")
}

fn oracle_nms() -> Result<(bool, String)> {
    let mut r = rng(14);
    for trial in 0..10 {
        let boxes: Vec<Box3D> = (0..50).map(|_| random_box(&mut r)).collect();
        let t = [0.1, 0.5, 0.7][trial % 3];
        let got = nms(&boxes, t)?;
        // repeatedly take the best survivor and remove its overlaps
        let mut alive = vec![true; boxes.len()];
        let mut want = Vec::new();
        while let Some(b) = (0..boxes.len())
            .filter(|&i| alive[i])
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if boxes[b].score >= boxes[i].score => Some(b),
                _ => Some(i),
            })
        {
            want.push(b);
            alive[b] = false;
            for i in 0..boxes.len() {
                if alive[i] && bev_iou(&boxes[b], &boxes[i]) > t {
                    alive[i] = false;
                }
            }
        }
        if got != want {
            return Ok((false, format!("trial {trial}: kept sets differ")));
        }
    }
    Ok((true, "10 sets of 50 boxes agree".into()))
}

fn oracle_bev_iou() -> Result<(bool, String)> {
    let mut r = rng(15);
    let mut worst: f64 = 0.0;
    for _ in 0..4 {
        let a = random_box(&mut r);
        let mut b = random_box(&mut r);
        b.center[0] = a.center[0] + r.gen_range(-1.0..1.0);
        b.center[1] = a.center[1] + r.gen_range(-1.0..1.0);
        let (mut inter, mut union) = (0u64, 0u64);
        for _ in 0..1_000_000 {
            let (x, y) = (r.gen_range(-8.0..8.0), r.gen_range(-8.0..8.0));
            let (ia, ib) = (a.contains_bev(x, y), b.contains_bev(x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
        worst = worst.max((bev_iou(&a, &b) - inter as f64 / union as f64).abs());
    }
    Ok(within(worst, 0.01))
}

/// Exhaustive PR table: precision and recall after every prefix of the
/// score-ranked predictions, then the envelope at each of the 101 levels.
fn exhaustive_ap(preds: &[Box3D], gts: &[Box3D], thr: f64) -> f64 {
    let tp = match_predictions(preds, gts, thr);
    let points: Vec<(f64, f64)> = (1..=tp.len())
        .map(|n| {
            let hits = tp[..n].iter().filter(|&&t| t).count() as f64;
            (hits / gts.len() as f64, hits / n as f64)
        })
        .collect();
    (0..=100)
        .map(|l| {
            points
                .iter()
                .filter(|(rc, _)| *rc >= l as f64 / 100.0 - 1e-12)
                .map(|p| p.1)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

fn oracle_ap() -> Result<(bool, String)> {
    let gts: Vec<Box3D> = (0..3)
        .map(|i| Box3D::new([10.0 * i as f64, 0.0, 0.0], [2.0, 2.0, 1.0], 0.0, 0, 1.0).expect("valid"))
        .collect();
    let pred = |x: f64, s: f64| Box3D::new([x, 0.0, 0.0], [2.0, 2.0, 1.0], 0.0, 0, s).expect("valid");
    let preds = [pred(0.0, 0.9), pred(40.0, 0.8), pred(10.1, 0.7), pred(20.0, 0.6)];
    // hand table: TP FP TP TP, envelope 1 up to recall 1/3 then 3/4
    let hand = (34.0 + 67.0 * 0.75) / 101.0;
    let got = average_precision(&preds, &gts, 0.5, ApMode::Interp101).ap;
    let mut worst = (got - hand).abs();
    let mut r = rng(16);
    for _ in 0..30 {
        let gts: Vec<Box3D> = (0..5).map(|i| pred(6.0 * i as f64, 1.0)).collect();
        let preds: Vec<Box3D> = (0..8)
            .map(|_| pred(6.0 * r.gen_range(0..7) as f64 + r.gen_range(-0.8..0.8), r.gen_range(0.0..1.0)))
            .collect();
        let got = average_precision(&preds, &gts, 0.5, ApMode::Interp101).ap;
        worst = worst.max((got - exhaustive_ap(&preds, &gts, 0.5)).abs());
    }
    Ok(within(worst, 1e-12))
}

/// Implementations against independent brute-force references.
pub fn oracle_suite() -> SuiteReport {
    run_suite(
        "oracle",
        &[
            ("kgf_fuse == kgf_oracle (100 instances)", oracle_kgf),
            ("voxelize_mean vs hash-and-average", oracle_voxelize),
            ("fps_sample vs recomputed distances", oracle_fps),
            ("sparse_conv_downsample vs dense gather", oracle_sparse_conv),
            ("nms vs repeated arg-max", oracle_nms),
            ("bev_iou vs Monte-Carlo", oracle_bev_iou),
            ("average_precision vs PR table", oracle_ap),
        ],
    )
}

// --------------------------------------------------------------- invariants

fn inv_softmax_rows() -> Result<(bool, String)> {
    let mut r = rng(20);
    let x = Tensor::uniform(&[50, 17], -30.0, 30.0, &mut r);
    let y = softmax_lastdim(&x);
    let worst = (0..50).map(|i| (y.row(i).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    Ok(within(worst, 1e-12))
}

fn inv_fft_round_trip() -> Result<(bool, String)> {
    let mut r = rng(21);
    let mut worst: f64 = 0.0;
    for n in [1, 2, 7, 16, 49, 64, 100] {
        let x: Vec<Complex64> = (0..n).map(|_| Complex64::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0))).collect();
        let mut buf = x.clone();
        dft_in_place(&mut buf, false);
        dft_in_place(&mut buf, true);
        for (a, b) in buf.iter().zip(&x) {
            worst = worst.max((a - b).norm());
        }
    }
    Ok(within(worst, 1e-9))
}

fn inv_attention_rows() -> Result<(bool, String)> {
    let mut r = rng(22);
    let q = Tensor::uniform(&[3, 10, 8], -2.0, 2.0, &mut r);
    let k = Tensor::uniform(&[3, 10, 8], -2.0, 2.0, &mut r);
    let v = Tensor::uniform(&[3, 10, 8], -2.0, 2.0, &mut r);
    let a = multi_head_attention(&q, &k, &v, 4, 0.0, Ctx::inference())?;
    let rows = a.weights.numel() / 10;
    let mut worst: f64 = 0.0;
    for i in 0..rows {
        let row = &a.weights.data()[i * 10..(i + 1) * 10];
        worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        if row.iter().any(|&w| w < 0.0) {
            return Ok((false, format!("negative weight in row {i}")));
        }
    }
    Ok(within(worst, 1e-12))
}

fn inv_kgf_bound() -> Result<(bool, String)> {
    let mut r = rng(23);
    for _ in 0..50 {
        let (h, w, c) = (r.gen_range(1..6), r.gen_range(1..6), r.gen_range(1..8));
        let f_s = Tensor::uniform(&[h, w, c], -2.0, 2.0, &mut r);
        let f_l = Tensor::uniform(&[h, w, c], -2.0, 2.0, &mut r);
        let (row, col) = (r.gen_range(0..h), r.gen_range(0..w));
        let v = neighbor_min_distance(&f_s, &f_l, row, col, NeighborSpec::Window3x3, CosineKind::Paper)?;
        let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let p = channel_projection(&v);
        if p.abs() > (1.0 - 0.5f64.powi(c as i32)) * max + 1e-12 {
            return Ok((false, format!("|P| = {p} exceeds the bound for max |V| = {max}")));
        }
    }
    Ok((true, "50 locations within the geometric bound".into()))
}

fn inv_cosine_homogeneity() -> Result<(bool, String)> {
    let mut r = rng(24);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let a: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
        let l = r.gen_range(0.1..10.0);
        let la: Vec<f64> = a.iter().map(|x| x * l).collect();
        let lb: Vec<f64> = b.iter().map(|x| x * l).collect();
        worst = worst.max((cosine_paper(&la, &lb) - l * cosine_paper(&a, &b)).abs());
    }
    Ok(within(worst, 1e-12))
}

fn corruption_strength(kind: CorruptionKind, cloud: &PointCloud, img: &Tensor, spec: &CorruptionSpec) -> Result<f64> {
    let table = SeverityTable::builtin();
    Ok(match kind {
        CorruptionKind::DensityDecrease | CorruptionKind::Cutout | CorruptionKind::FovLost => {
            -(corrupt_lidar(cloud, spec, table)?.len() as f64)
        }
        k if k.is_lidar() => {
            let out = corrupt_lidar(cloud, spec, table)?;
            out.points
                .iter()
                .zip(&cloud.points)
                .map(|(p, q)| (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>())
                .sum()
        }
        _ => {
            let out = corrupt_image(img, spec, table)?;
            out.data().iter().zip(img.data()).map(|(a, b)| (a - b).powi(2)).sum()
        }
    })
}

fn inv_corruption_monotone() -> Result<(bool, String)> {
    let mut r = rng(25);
    let cloud = random_cloud(&mut r, 2000, -30.0, 30.0);
    let img = Tensor::uniform(&[24, 24, 3], 0.2, 0.8, &mut r);
    for seed in 0..20 {
        for kind in CorruptionKind::ALL {
            let mut prev = f64::NEG_INFINITY;
            for sev in 1..=5 {
                let spec = CorruptionSpec::new(kind, sev, seed)?;
                let s = corruption_strength(kind, &cloud, &img, &spec)?;
                if s < prev - 1e-9 {
                    return Ok((false, format!("{kind} seed {seed}: severity {sev} weaker than {}", sev - 1)));
                }
                prev = s;
            }
        }
    }
    Ok((true, "10 kinds x 20 seeds non-decreasing".into()))
}

/// Algebraic properties that hold for any input.
pub fn invariant_suite() -> SuiteReport {
    run_suite(
        "invariant",
        &[
            ("softmax rows sum to 1", inv_softmax_rows),
            ("DFT round trip", inv_fft_round_trip),
            ("attention rows stochastic", inv_attention_rows),
            ("KGF geometric-series bound", inv_kgf_bound),
            ("cosine_paper homogeneity", inv_cosine_homogeneity),
            ("corruption monotone in severity", inv_corruption_monotone),
        ],
    )
}

// ------------------------------------------------------------------ metrics

fn metric_rce() -> Result<(bool, String)> {
    let v = rce(0.3817, 0.2777)?;
    Ok(((v - 0.2724).abs() <= 0.0005, format!("rce = {v:.6}")))
}

fn metric_flat_mean() -> Result<(bool, String)> {
    let mut r = rng(30);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut t = RobustnessTable::new(0.5, &CorruptionKind::ALL);
        let mut flat = Vec::new();
        for k in CorruptionKind::ALL {
            for s in 1..=5 {
                let v = r.gen_range(0.0..1.0);
                flat.push(v);
                t.insert(k, s, v);
            }
        }
        let mean = flat.iter().sum::<f64>() / flat.len() as f64;
        worst = worst.max((ap_corr(&t)? - mean).abs());
    }
    Ok(within(worst, 1e-12))
}

/// Robustness-metric arithmetic.
pub fn metric_suite() -> SuiteReport {
    run_suite(
        "metric",
        &[("rce(0.3817, 0.2777) = 0.2724", metric_rce), ("ap_corr flat-mean identity", metric_flat_mean)],
    )
}

pub fn run_all() -> Vec<SuiteReport> {
    vec![gradient_suite(), oracle_suite(), invariant_suite(), metric_suite()]
}
