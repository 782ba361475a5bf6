//! Uniform spatial hash over 3D points for nearest-neighbor queries.
//!
//! Cell size should be on the order of the expected query radius; lookups
//! expand in rings around the query cell until the ring distance exceeds the
//! best match, so results are exact.

use std::collections::HashMap;

use nalgebra::Vector3;

#[derive(Debug, Clone)]
pub struct PointGrid {
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
    points: Vec<Vector3<f64>>,
    key_lo: (i64, i64, i64),
    key_hi: (i64, i64, i64),
}

impl PointGrid {
    pub fn build(points: &[Vector3<f64>], cell: f64) -> Self {
        assert!(cell > 0.0, "cell size must be positive");
        let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        let mut key_lo = (i64::MAX, i64::MAX, i64::MAX);
        let mut key_hi = (i64::MIN, i64::MIN, i64::MIN);
        for (i, p) in points.iter().enumerate() {
            let k = Self::key(p, cell);
            key_lo = (key_lo.0.min(k.0), key_lo.1.min(k.1), key_lo.2.min(k.2));
            key_hi = (key_hi.0.max(k.0), key_hi.1.max(k.1), key_hi.2.max(k.2));
            cells.entry(k).or_default().push(i as u32);
        }
        Self { cell, cells, points: points.to_vec(), key_lo, key_hi }
    }

    /// Largest ring around the query cell that can still contain points.
    fn ring_bound(&self, cx: i64, cy: i64, cz: i64) -> i64 {
        if self.points.is_empty() {
            return 0;
        }
        let span = |c: i64, lo: i64, hi: i64| (c - lo).abs().max((hi - c).abs());
        span(cx, self.key_lo.0, self.key_hi.0)
            .max(span(cy, self.key_lo.1, self.key_hi.1))
            .max(span(cz, self.key_lo.2, self.key_hi.2))
    }

    fn key(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and distance of the nearest point within `max_dist`, if any.
    pub fn nearest(&self, q: &Vector3<f64>, max_dist: f64) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        let (cx, cy, cz) = Self::key(q, self.cell);
        let max_ring = ((max_dist / self.cell).ceil().min(1e18) as i64 + 1)
            .min(self.ring_bound(cx, cy, cz));
        for ring in 0..=max_ring {
            let ring_min_dist = if ring == 0 { 0.0 } else { (ring - 1) as f64 * self.cell };
            if let Some((_, d)) = best {
                // Cells in this ring cannot contain anything closer.
                if d <= ring_min_dist {
                    break;
                }
            }
            self.visit_ring(cx, cy, cz, ring, |idx, points| {
                let d = (points[idx] - q).norm();
                if d <= max_dist && best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((idx, d));
                }
            });
        }
        best
    }

    /// Up to `k` nearest points within `max_dist`, closest first.
    pub fn k_nearest(&self, q: &Vector3<f64>, k: usize, max_dist: f64) -> Vec<(usize, f64)> {
        let mut found: Vec<(usize, f64)> = Vec::new();
        let (cx, cy, cz) = Self::key(q, self.cell);
        let max_ring = ((max_dist / self.cell).ceil().min(1e18) as i64 + 1)
            .min(self.ring_bound(cx, cy, cz));
        for ring in 0..=max_ring {
            let ring_min_dist = if ring == 0 { 0.0 } else { (ring - 1) as f64 * self.cell };
            if found.len() >= k && found.last().map_or(false, |(_, d)| *d <= ring_min_dist) {
                break;
            }
            self.visit_ring(cx, cy, cz, ring, |idx, points| {
                let d = (points[idx] - q).norm();
                if d <= max_dist {
                    let pos = found.partition_point(|(_, fd)| *fd <= d);
                    found.insert(pos, (idx, d));
                    if found.len() > k {
                        found.pop();
                    }
                }
            });
        }
        found
    }

    /// All point indices within `radius` of `q` (unsorted).
    pub fn within(&self, q: &Vector3<f64>, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        let r = (radius / self.cell).ceil() as i64;
        let (cx, cy, cz) = Self::key(q, self.cell);
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    if let Some(ids) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &i in ids {
                            if (self.points[i as usize] - q).norm() <= radius {
                                out.push(i as usize);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Visits every point stored in cells of one Chebyshev ring.
    fn visit_ring(
        &self,
        cx: i64,
        cy: i64,
        cz: i64,
        ring: i64,
        mut visit: impl FnMut(usize, &[Vector3<f64>]),
    ) {
        for dz in -ring..=ring {
            for dy in -ring..=ring {
                for dx in -ring..=ring {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                        continue;
                    }
                    if let Some(ids) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &i in ids {
                            visit(i as usize, &self.points);
                        }
                    }
                }
            }
        }
    }
}
