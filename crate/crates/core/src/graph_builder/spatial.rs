//! Uniform-grid spatial hash for planar fixed-radius and k-nearest queries.

pub struct GridIndex<'a> {
    points: &'a [[f64; 2]],
    cell: f64,
    /// Point indices sorted by (bucket key, index).
    order: Vec<usize>,
    /// Bucket key of each entry of `order`.
    keys: Vec<(i64, i64)>,
    min_key: (i64, i64),
    max_key: (i64, i64),
}

impl<'a> GridIndex<'a> {
    /// `cell` is the bucket edge length; use the query radius for radius
    /// searches.
    pub fn new(points: &'a [[f64; 2]], cell: f64) -> Self {
        let cell = if cell.is_finite() && cell > 0.0 { cell } else { 1.0 };
        let mut keyed: Vec<((i64, i64), usize)> = points.iter().enumerate().map(|(i, p)| (Self::key_for(cell, p), i)).collect();
        keyed.sort_unstable();
        let mut min_key = (i64::MAX, i64::MAX);
        let mut max_key = (i64::MIN, i64::MIN);
        for &(k, _) in &keyed {
            min_key = (min_key.0.min(k.0), min_key.1.min(k.1));
            max_key = (max_key.0.max(k.0), max_key.1.max(k.1));
        }
        let (keys, order) = keyed.into_iter().unzip();
        Self {
            points,
            cell,
            order,
            keys,
            min_key,
            max_key,
        }
    }

    fn key_for(cell: f64, p: &[f64; 2]) -> (i64, i64) {
        ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64)
    }

    /// Points in buckets `(bx, y_lo..=y_hi)`, which are contiguous in `order`.
    fn column(&self, bx: i64, y_lo: i64, y_hi: i64) -> &[usize] {
        let start = self.keys.partition_point(|&k| k < (bx, y_lo));
        let end = start + self.keys[start..].partition_point(|&k| k <= (bx, y_hi));
        &self.order[start..end]
    }

    /// Indices of points within `radius` (inclusive) of `p`, excluding
    /// `exclude`, in ascending index order.
    pub fn within(&self, p: &[f64; 2], radius: f64, exclude: Option<usize>) -> Vec<(usize, f64)> {
        let r2 = radius * radius;
        let reach = (radius / self.cell).ceil() as i64;
        let (kx, ky) = Self::key_for(self.cell, p);
        let (y_lo, y_hi) = ((ky - reach).max(self.min_key.1), (ky + reach).min(self.max_key.1));
        let mut out = Vec::new();
        for bx in (kx - reach).max(self.min_key.0)..=(kx + reach).min(self.max_key.0) {
            for &j in self.column(bx, y_lo, y_hi) {
                if Some(j) == exclude {
                    continue;
                }
                let q = &self.points[j];
                let d2 = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
                if d2 <= r2 {
                    out.push((j, d2));
                }
            }
        }
        out.sort_unstable_by_key(|&(j, _)| j);
        out
    }

    /// The `k` nearest points to `p` other than `exclude`, ordered by
    /// (squared distance, index).
    pub fn nearest(&self, p: &[f64; 2], k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        let available = self.points.len() - usize::from(exclude.is_some_and(|e| e < self.points.len()));
        let k = k.min(available);
        if k == 0 {
            return Vec::new();
        }
        let (kx, ky) = Self::key_for(self.cell, p);
        let span = (self.max_key.0 - self.min_key.0).max(self.max_key.1 - self.min_key.1)
            + (kx - self.min_key.0).abs().max((kx - self.max_key.0).abs())
            + (ky - self.min_key.1).abs().max((ky - self.max_key.1).abs());
        let mut found: Vec<(usize, f64)> = Vec::new();
        let mut ring = 0i64;
        loop {
            for bx in kx - ring..=kx + ring {
                // Interior columns only contribute their top and bottom cells.
                let edge = (bx - kx).abs() == ring;
                let ranges = if edge || ring == 0 {
                    [(ky - ring, ky + ring), (1, 0)]
                } else {
                    [(ky - ring, ky - ring), (ky + ring, ky + ring)]
                };
                for (lo, hi) in ranges {
                    if lo > hi {
                        continue;
                    }
                    for &j in self.column(bx, lo, hi) {
                        if Some(j) == exclude {
                            continue;
                        }
                        let q = &self.points[j];
                        found.push((j, (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)));
                    }
                }
            }
            // Everything closer than `ring * cell` has been visited.
            if found.len() >= k {
                found.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                let safe = (ring as f64 * self.cell).powi(2);
                if found[k - 1].1 < safe || ring > span {
                    // Points at exactly the safe distance may sit in the
                    // next ring; `<` keeps ties complete.
                    found.truncate(k);
                    return found;
                }
            }
            if ring > span + 1 {
                found.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                found.truncate(k);
                return found;
            }
            ring += 1;
        }
    }
}
