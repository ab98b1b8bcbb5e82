//! Stage 3: parameter-free graph fusion of fused image features with LiDAR
//! features. Each location takes, per channel, the minimum pairwise distance
//! score against its neighbors, then adds a `2^-k` weighted channel sum to
//! every channel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::spatial::{GridIndex, Site};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CosineKind {
    /// `a.b / sqrt(|a|^2 + |b|^2)`.
    #[default]
    Paper,
    /// `a.b / (|a| |b|)`.
    Standard,
}

impl std::str::FromStr for CosineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "standard" => Ok(Self::Standard),
            other => Err(Error::invalid(format!("unknown cosine kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
#[derive(Default)]
pub enum NeighborSpec {
    #[default]
    Window3x3,
    Knn { k: usize },
}


impl NeighborSpec {
    pub const DEFAULT_K: usize = 9;

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Knn { k: 0 } => Err(Error::invalid("knn neighbor count must be positive")),
            _ => Ok(()),
        }
    }
}

/// Both-zero input yields 0.
pub fn cosine_paper(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let norm2: f64 = a.iter().chain(b).map(|x| x * x).sum();
    if norm2 == 0.0 {
        0.0
    } else {
        dot / norm2.sqrt()
    }
}

/// A zero vector on either side yields 0.
pub fn cosine_standard(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn scalar_cosine(kind: CosineKind, a: f64, b: f64) -> f64 {
    match kind {
        CosineKind::Paper => cosine_paper(&[a], &[b]),
        CosineKind::Standard => cosine_standard(&[a], &[b]),
    }
}

/// Shared geometry for one pair of feature maps.
struct Neighbors {
    h: usize,
    w: usize,
    c: usize,
    supported: Vec<bool>,
    index: Option<GridIndex>,
    spec: NeighborSpec,
}

impl Neighbors {
    fn new(f_s: &Tensor, f_l: &Tensor, spec: NeighborSpec) -> Result<Self> {
        spec.validate()?;
        if f_s.ndim() != 3 || f_s.shape() != f_l.shape() {
            return Err(Error::shape("kgf", f_s.shape(), f_l.shape()));
        }
        let (h, w, c) = (f_s.shape()[0], f_s.shape()[1], f_s.shape()[2]);
        let supported: Vec<bool> = (0..h * w)
            .map(|i| f_l.data()[i * c..(i + 1) * c].iter().any(|&v| v != 0.0))
            .collect();
        let index = matches!(spec, NeighborSpec::Knn { .. }).then(|| {
            let sites = (0..h * w)
                .filter(|&i| supported[i])
                .map(|i| Site { row: i / w, col: i % w });
            GridIndex::new(h, w, 4, sites)
        });
        Ok(Self {
            h,
            w,
            c,
            supported,
            index,
            spec,
        })
    }

    /// Supported neighbor sites of `(row, col)` as flat indices.
    fn of(&self, row: usize, col: usize) -> Vec<usize> {
        match self.spec {
            NeighborSpec::Window3x3 => {
                let mut out = Vec::with_capacity(9);
                for r in row.saturating_sub(1)..=(row + 1).min(self.h - 1) {
                    for c in col.saturating_sub(1)..=(col + 1).min(self.w - 1) {
                        let i = r * self.w + c;
                        if self.supported[i] {
                            out.push(i);
                        }
                    }
                }
                out
            }
            NeighborSpec::Knn { k } => self
                .index
                .as_ref()
                .expect("knn index")
                .nearest(row, col, k)
                .into_iter()
                .map(|s| s.row * self.w + s.col)
                .collect(),
        }
    }
}

fn min_distance_at(nb: &Neighbors, f_s: &Tensor, f_l: &Tensor, site: usize, kind: CosineKind) -> Vec<f64> {
    let c = nb.c;
    let sites = nb.of(site / nb.w, site % nb.w);
    let mut v = vec![0.0; c];
    if sites.is_empty() {
        return v;
    }
    let s = &f_s.data()[site * c..(site + 1) * c];
    for (k, out) in v.iter_mut().enumerate() {
        *out = sites
            .iter()
            .map(|&j| scalar_cosine(kind, s[k], f_l.data()[j * c + k]))
            .fold(f64::INFINITY, f64::min);
    }
    v
}

/// Per-channel minimum distance score at `(row, col)`. Neighbors without
/// LiDAR support are skipped; no supported neighbor gives zeros.
pub fn neighbor_min_distance(
    f_s: &Tensor,
    f_l: &Tensor,
    row: usize,
    col: usize,
    spec: NeighborSpec,
    kind: CosineKind,
) -> Result<Vec<f64>> {
    let nb = Neighbors::new(f_s, f_l, spec)?;
    if row >= nb.h || col >= nb.w {
        return Err(Error::invalid(format!("site ({row}, {col}) outside {}x{}", nb.h, nb.w)));
    }
    Ok(min_distance_at(&nb, f_s, f_l, row * nb.w + col, kind))
}

/// `sum_k 2^-k v[k-1]` for `k = 1..C`, accumulated in increasing `k`.
pub fn channel_projection(v: &[f64]) -> f64 {
    let mut p = 0.0;
    let mut weight = 1.0;
    for x in v {
        weight *= 0.5;
        p += weight * x;
    }
    p
}

/// Adds the per-location projection to every channel of `f_s`.
pub fn kgf_fuse(f_s: &Tensor, f_l: &Tensor, spec: NeighborSpec, kind: CosineKind) -> Result<Tensor> {
    let nb = Neighbors::new(f_s, f_l, spec)?;
    let c = nb.c;
    let mut out = f_s.clone();
    out.data_mut()
        .par_chunks_mut(c)
        .enumerate()
        .for_each(|(site, cell)| {
            let p = channel_projection(&min_distance_at(&nb, f_s, f_l, site, kind));
            for x in cell {
                *x += p;
            }
        });
    Ok(out)
}

/// Direct triple loop over locations, channels and neighbors. Ground truth for
/// [`kgf_fuse`].
pub fn kgf_oracle(f_s: &Tensor, f_l: &Tensor, spec: NeighborSpec, kind: CosineKind) -> Result<Tensor> {
    spec.validate()?;
    if f_s.ndim() != 3 || f_s.shape() != f_l.shape() {
        return Err(Error::shape("kgf", f_s.shape(), f_l.shape()));
    }
    let (h, w, c) = (f_s.shape()[0], f_s.shape()[1], f_s.shape()[2]);
    let supported = |r: usize, q: usize| (0..c).any(|k| f_l.get(&[r, q, k]) != 0.0);
    let mut out = f_s.clone();
    for r in 0..h {
        for q in 0..w {
            let neighbors: Vec<(usize, usize)> = match spec {
                NeighborSpec::Window3x3 => {
                    let mut v = vec![];
                    for dr in -1i64..=1 {
                        for dq in -1i64..=1 {
                            let (rr, qq) = (r as i64 + dr, q as i64 + dq);
                            if rr >= 0 && qq >= 0 && (rr as usize) < h && (qq as usize) < w {
                                v.push((rr as usize, qq as usize));
                            }
                        }
                    }
                    v.into_iter().filter(|&(a, b)| supported(a, b)).collect()
                }
                NeighborSpec::Knn { k } => {
                    let mut all: Vec<(i64, usize, (usize, usize))> = vec![];
                    for a in 0..h {
                        for b in 0..w {
                            if supported(a, b) {
                                let d = (a as i64 - r as i64).pow(2) + (b as i64 - q as i64).pow(2);
                                all.push((d, a * w + b, (a, b)));
                            }
                        }
                    }
                    all.sort();
                    all.into_iter().take(k).map(|e| e.2).collect()
                }
            };
            let mut p = 0.0;
            let mut weight = 1.0;
            for k in 0..c {
                weight *= 0.5;
                let mut v = if neighbors.is_empty() { 0.0 } else { f64::INFINITY };
                for &(a, b) in &neighbors {
                    v = v.min(scalar_cosine(kind, f_s.get(&[r, q, k]), f_l.get(&[a, b, k])));
                }
                p += weight * v;
            }
            for k in 0..c {
                out.set(&[r, q, k], f_s.get(&[r, q, k]) + p);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, sparse: f64) -> Tensor {
        Tensor::from_fn(shape, |_| if rng.gen_bool(sparse) { 0.0 } else { rng.gen_range(-1.0..1.0) })
    }

    #[test]
    fn cosine_examples() {
        let a = [0.6, 0.8];
        assert!((cosine_paper(&a, &a) - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(cosine_paper(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_eq!(cosine_paper(&[0.0; 3], &[0.0; 3]), 0.0);
        assert!((cosine_standard(&[2.0, 0.0], &[5.0, 0.0]) - 1.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let l = rng.gen_range(0.1..10.0);
            let la: Vec<f64> = a.iter().map(|x| x * l).collect();
            let lb: Vec<f64> = b.iter().map(|x| x * l).collect();
            assert!((cosine_paper(&la, &lb) - l * cosine_paper(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_neighbor_is_plain_cosine() {
        let f_s = Tensor::new(vec![1, 1, 2], vec![0.5, -2.0]).unwrap();
        let f_l = Tensor::new(vec![1, 1, 2], vec![1.5, 3.0]).unwrap();
        let v = neighbor_min_distance(&f_s, &f_l, 0, 0, NeighborSpec::Window3x3, CosineKind::Paper).unwrap();
        assert_eq!(v, vec![cosine_paper(&[0.5], &[1.5]), cosine_paper(&[-2.0], &[3.0])]);
    }

    #[test]
    fn identical_maps_center_term() {
        let f = Tensor::full(&[3, 3, 1], 2.0);
        let v = neighbor_min_distance(&f, &f, 1, 1, NeighborSpec::Window3x3, CosineKind::Paper).unwrap();
        assert!((v[0] - 2.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn unsupported_neighbors_give_zero() {
        let f_s = Tensor::full(&[4, 4, 2], 1.0);
        let f_l = Tensor::zeros(&[4, 4, 2]);
        for spec in [NeighborSpec::Window3x3, NeighborSpec::Knn { k: 9 }] {
            assert_eq!(kgf_fuse(&f_s, &f_l, spec, CosineKind::Paper).unwrap(), f_s);
        }
    }

    #[test]
    fn single_channel_unit_score_adds_half() {
        // paper cosine of (x, x) is x/sqrt(2); pick x so that it equals 1
        let x = 2f64.sqrt();
        let f = Tensor::full(&[2, 3, 1], x);
        let out = kgf_fuse(&f, &f, NeighborSpec::Window3x3, CosineKind::Paper).unwrap();
        for v in out.data() {
            assert!((v - (x + 0.5)).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..100 {
            let (h, w, c) = (rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(1..5));
            let f_s = random(&[h, w, c], &mut rng, 0.0);
            let f_l = random(&[h, w, c], &mut rng, 0.5);
            let spec = if trial % 2 == 0 {
                NeighborSpec::Window3x3
            } else {
                NeighborSpec::Knn { k: rng.gen_range(1..10) }
            };
            let kind = if trial % 3 == 0 { CosineKind::Standard } else { CosineKind::Paper };
            let fast = kgf_fuse(&f_s, &f_l, spec, kind).unwrap();
            let slow = kgf_oracle(&f_s, &f_l, spec, kind).unwrap();
            assert_eq!(fast, slow, "trial {trial}");
        }
    }

    #[test]
    fn min_matches_exhaustive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f_s = random(&[5, 5, 3], &mut rng, 0.0);
        let f_l = random(&[5, 5, 3], &mut rng, 0.3);
        for r in 0..5 {
            for q in 0..5 {
                let v = neighbor_min_distance(&f_s, &f_l, r, q, NeighborSpec::Window3x3, CosineKind::Paper).unwrap();
                for k in 0..3 {
                    let mut want = f64::INFINITY;
                    for a in r.saturating_sub(1)..(r + 2).min(5) {
                        for b in q.saturating_sub(1)..(q + 2).min(5) {
                            if (0..3).any(|j| f_l.get(&[a, b, j]) != 0.0) {
                                want = want.min(cosine_paper(&[f_s.get(&[r, q, k])], &[f_l.get(&[a, b, k])]));
                            }
                        }
                    }
                    if want.is_infinite() {
                        want = 0.0;
                    }
                    assert_eq!(v[k], want);
                }
            }
        }
    }

    #[test]
    fn projection_bound_and_discount() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let c = rng.gen_range(1..9);
            let v: Vec<f64> = (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let p = channel_projection(&v);
            let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(p.abs() <= (1.0 - 0.5f64.powi(c as i32)) * max + 1e-12);
            let k = rng.gen_range(0..c);
            let mut z = v.clone();
            z[k] = 0.0;
            let delta = p - channel_projection(&z);
            assert!((delta - 0.5f64.powi(k as i32 + 1) * v[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn knn_neighbor_counts_and_validation() {
        let mut f_l = Tensor::zeros(&[4, 4, 1]);
        f_l.set(&[0, 0, 0], 1.0);
        f_l.set(&[3, 3, 0], 1.0);
        let nb = Neighbors::new(&f_l, &f_l, NeighborSpec::Knn { k: 9 }).unwrap();
        assert_eq!(nb.of(1, 1), vec![0, 15]);
        let nb = Neighbors::new(&f_l, &f_l, NeighborSpec::Knn { k: 1 }).unwrap();
        assert_eq!(nb.of(2, 2), vec![15]);
        assert!(kgf_fuse(&f_l, &f_l, NeighborSpec::Knn { k: 0 }, CosineKind::Paper).is_err());
        assert!(kgf_fuse(&f_l, &Tensor::zeros(&[4, 3, 1]), NeighborSpec::Window3x3, CosineKind::Paper).is_err());
    }
}
