use std::collections::HashMap;

use crate::manifold::Vec3;

/// Uniform hash grid over point indices.
#[derive(Debug, Clone, Default)]
pub struct PointGrid {
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl PointGrid {
    pub fn new(cell: f64) -> Self {
        PointGrid {
            cell,
            cells: HashMap::new(),
        }
    }

    fn key(&self, p: &Vec3) -> (i64, i64, i64) {
        (
            (p.x / self.cell).floor() as i64,
            (p.y / self.cell).floor() as i64,
            (p.z / self.cell).floor() as i64,
        )
    }

    pub fn insert(&mut self, index: usize, p: &Vec3) {
        let k = self.key(p);
        self.cells.entry(k).or_default().push(index);
    }

    /// Indices of points within `radius` of `p` (radius ≤ cell size),
    /// sorted by distance then index.
    pub fn within(&self, points: &[Vec3], p: &Vec3, radius: f64) -> Vec<(usize, f64)> {
        let (x, y, z) = self.key(p);
        let r2 = radius * radius;
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(v) = self.cells.get(&(x + dx, y + dy, z + dz)) {
                        for &i in v {
                            let d2 = (points[i] - p).norm_squared();
                            if d2 <= r2 {
                                out.push((i, d2.sqrt()));
                            }
                        }
                    }
                }
            }
        }
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    pub fn any_within(&self, points: &[Vec3], p: &Vec3, radius: f64) -> bool {
        let (x, y, z) = self.key(p);
        let r2 = radius * radius;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(v) = self.cells.get(&(x + dx, y + dy, z + dz)) {
                        if v.iter().any(|&i| (points[i] - p).norm_squared() <= r2) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}
