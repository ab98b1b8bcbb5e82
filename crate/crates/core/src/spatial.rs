//! Bucketed nearest-neighbor index over integer pixel sites.

/// A site on an `height x width` raster, identified by its row-major index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Site {
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug)]
pub struct GridIndex {
    width: usize,
    bucket: usize,
    bucket_rows: usize,
    bucket_cols: usize,
    buckets: Vec<Vec<Site>>,
    len: usize,
}

impl GridIndex {
    pub fn new(height: usize, width: usize, bucket: usize, sites: impl IntoIterator<Item = Site>) -> Self {
        let bucket = bucket.max(1);
        let bucket_rows = height.div_ceil(bucket).max(1);
        let bucket_cols = width.div_ceil(bucket).max(1);
        let mut buckets = vec![Vec::new(); bucket_rows * bucket_cols];
        let mut len = 0;
        for s in sites {
            debug_assert!(s.row < height && s.col < width);
            buckets[(s.row / bucket) * bucket_cols + s.col / bucket].push(s);
            len += 1;
        }
        Self {
            width,
            bucket,
            bucket_rows,
            bucket_cols,
            buckets,
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// The `k` sites nearest to `(row, col)` by Euclidean distance, ordered
    /// by `(distance, row-major index)`.
    pub fn nearest(&self, row: usize, col: usize, k: usize) -> Vec<Site> {
        if k == 0 || self.len == 0 {
            return Vec::new();
        }
        let k = k.min(self.len);
        let br = (row / self.bucket) as isize;
        let bc = (col / self.bucket) as isize;
        let key = |s: &Site| {
            let dr = s.row as i64 - row as i64;
            let dc = s.col as i64 - col as i64;
            (dr * dr + dc * dc, s.row * self.width + s.col)
        };
        let mut found: Vec<((i64, usize), Site)> = Vec::new();
        let max_ring = self.bucket_rows.max(self.bucket_cols) as isize;
        for ring in 0..=max_ring {
            for r in (br - ring)..=(br + ring) {
                if r < 0 || r >= self.bucket_rows as isize {
                    continue;
                }
                let on_edge_row = (r - br).abs() == ring;
                let step = if on_edge_row { 1 } else { (2 * ring).max(1) };
                let mut c = bc - ring;
                while c <= bc + ring {
                    if c >= 0 && c < self.bucket_cols as isize {
                        for s in &self.buckets[r as usize * self.bucket_cols + c as usize] {
                            found.push((key(s), *s));
                        }
                    }
                    c += step;
                }
            }
            if found.len() >= k {
                found.sort_unstable_by_key(|(k, _)| *k);
                found.truncate(k);
                // anything not yet visited is at least this far away
                let bound = ring as i64 * self.bucket as i64 + 1;
                if found[k - 1].0 .0 < bound * bound {
                    break;
                }
            }
        }
        found.sort_unstable_by_key(|(k, _)| *k);
        found.truncate(k);
        found.into_iter().map(|(_, s)| s).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(sites: &[Site], width: usize, row: usize, col: usize, k: usize) -> Vec<Site> {
        let mut v: Vec<_> = sites
            .iter()
            .map(|s| {
                let d = (s.row as i64 - row as i64).pow(2) + (s.col as i64 - col as i64).pow(2);
                ((d, s.row * width + s.col), *s)
            })
            .collect();
        v.sort_by_key(|(k, _)| *k);
        v.into_iter().take(k).map(|(_, s)| s).collect()
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..30 {
            let (h, w) = (rng.gen_range(1..40), rng.gen_range(1..40));
            let n = rng.gen_range(0..60);
            let mut sites: Vec<Site> = (0..n)
                .map(|_| Site {
                    row: rng.gen_range(0..h),
                    col: rng.gen_range(0..w),
                })
                .collect();
            sites.sort_by_key(|s| s.row * w + s.col);
            sites.dedup();
            let bucket = 1 + trial % 7;
            let index = GridIndex::new(h, w, bucket, sites.iter().copied());
            for _ in 0..20 {
                let (r, c) = (rng.gen_range(0..h), rng.gen_range(0..w));
                let k = rng.gen_range(1..12);
                assert_eq!(index.nearest(r, c, k), brute(&sites, w, r, c, k));
            }
        }
    }

    #[test]
    fn empty_index_returns_nothing() {
        let index = GridIndex::new(4, 4, 2, std::iter::empty());
        assert!(index.nearest(1, 1, 3).is_empty());
    }
}
