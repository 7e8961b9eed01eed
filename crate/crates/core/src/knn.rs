//! Uniform-grid nearest-neighbor search.

use std::collections::HashMap;

use nalgebra::Vector3;

/// Spatial hash over a fixed point set. Results are ordered by
/// `(squared distance, index)` so ties resolve the same way every run.
pub struct GridIndex<'a> {
    points: &'a [Vector3<f64>],
    cell: f64,
    origin: Vector3<f64>,
    cells: HashMap<[i64; 3], Vec<u32>>,
    max_ring: i64,
}

impl<'a> GridIndex<'a> {
    pub fn new(points: &'a [Vector3<f64>]) -> Self {
        let (mut lo, mut hi) = (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY));
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        if points.is_empty() {
            lo = Vector3::zeros();
            hi = Vector3::zeros();
        }
        let ext = hi - lo;
        let volume = ext.iter().map(|e| e.max(1e-9)).product::<f64>();
        // Roughly two points per occupied cell.
        let mut cell = (2.0 * volume / points.len().max(1) as f64).cbrt();
        let longest = ext.amax();
        if !(cell > 0.0) || !cell.is_finite() {
            cell = 1.0;
        }
        cell = cell.max(longest / 256.0).max(1e-9);
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key_of(p, &lo, cell)).or_default().push(i as u32);
        }
        let max_ring = (longest / cell).ceil() as i64 + 1;
        Self {
            points,
            cell,
            origin: lo,
            cells,
            max_ring,
        }
    }

    fn key_of(p: &Vector3<f64>, origin: &Vector3<f64>, cell: f64) -> [i64; 3] {
        let q = (p - origin) / cell;
        [q.x.floor() as i64, q.y.floor() as i64, q.z.floor() as i64]
    }

    /// The `k` nearest points to `q`, skipping index `exclude`.
    pub fn nearest(&self, q: &Vector3<f64>, k: usize, exclude: Option<usize>) -> Vec<(f64, usize)> {
        let mut found: Vec<(f64, usize)> = Vec::new();
        if k == 0 {
            return found;
        }
        let center = Self::key_of(q, &self.origin, self.cell);
        for ring in 0..=self.max_ring {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let key = [center[0] + dx, center[1] + dy, center[2] + dz];
                        if let Some(list) = self.cells.get(&key) {
                            for &i in list {
                                let i = i as usize;
                                if Some(i) == exclude {
                                    continue;
                                }
                                found.push(((self.points[i] - q).norm_squared(), i));
                            }
                        }
                    }
                }
            }
            if found.len() >= k {
                found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                // Anything outside the searched rings is at least `ring` cells away.
                let reach = ring as f64 * self.cell;
                if found[k - 1].0 <= reach * reach {
                    found.truncate(k);
                    return found;
                }
            }
        }
        found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        found.truncate(k);
        found
    }
}
