//! Decreasing filtrations of finite atom partitions, `F_{j-1} ⊇ F_j`.
//!
//! Level index `0` is the finest partition. Larger indices are coarser. Each
//! level carries an integer label (typically the dyadic level `k`).

use crate::dyadic::{point_units, DyadicSystem};
use crate::error::{invalid, Error, Result};
use crate::field::{VectorField, C64};
use crate::haar::Tree;
use crate::measure::AtomicMeasure;

#[derive(Clone, Debug)]
pub struct Filtration {
    weights: Vec<f64>,
    levels: Vec<i32>,
    /// `labels[l][atom]`, normalized to first-appearance order.
    labels: Vec<Vec<u32>>,
    /// `cells[l][c]`: atoms of cell `c`, ascending.
    cells: Vec<Vec<Vec<usize>>>,
    masses: Vec<Vec<f64>>,
}

impl Filtration {
    /// Builds a filtration from per-level atom labels, finest level first.
    /// Fails if some cell of level `l - 1` is split by level `l`.
    pub fn new(weights: Vec<f64>, levels: Vec<i32>, labels: Vec<Vec<u32>>) -> Result<Self> {
        let n = weights.len();
        if labels.len() != levels.len() || levels.is_empty() {
            return Err(invalid("labels", "one label vector per level is required"));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(invalid("weights", "must be finite and nonnegative"));
        }
        let mut norm = Vec::with_capacity(labels.len());
        for (l, lab) in labels.iter().enumerate() {
            if lab.len() != n {
                return Err(invalid("labels", format!("level {l} has {} labels for {n} atoms", lab.len())));
            }
            let mut map = std::collections::HashMap::new();
            let v: Vec<u32> = lab
                .iter()
                .map(|x| {
                    let next = map.len() as u32;
                    *map.entry(*x).or_insert(next)
                })
                .collect();
            norm.push(v);
        }
        for l in 1..norm.len() {
            let mut up: Vec<Option<u32>> = vec![None; count(&norm[l - 1])];
            for a in 0..n {
                let c = norm[l - 1][a] as usize;
                match up[c] {
                    None => up[c] = Some(norm[l][a]),
                    Some(p) if p != norm[l][a] => {
                        return Err(Error::Measurability(format!(
                            "a cell of level index {} is split at level index {l}",
                            l - 1
                        )))
                    }
                    _ => {}
                }
            }
        }
        let mut cells = Vec::with_capacity(norm.len());
        let mut masses = Vec::with_capacity(norm.len());
        for lab in &norm {
            let mut cs = vec![Vec::new(); count(lab)];
            let mut ms = vec![0.0; cs.len()];
            for (a, &c) in lab.iter().enumerate() {
                cs[c as usize].push(a);
                ms[c as usize] += weights[a];
            }
            cells.push(cs);
            masses.push(ms);
        }
        Ok(Filtration { weights, levels, labels: norm, cells, masses })
    }

    /// Cells of `sys` at the given dyadic levels (sorted ascending).
    pub fn from_system(sys: &DyadicSystem, m: &AtomicMeasure, levels: &[i32]) -> Result<Self> {
        let mut lv = levels.to_vec();
        lv.sort_unstable();
        lv.dedup();
        let units: Vec<_> = (0..m.len()).map(|i| point_units(m.point(i))).collect();
        let labels = lv
            .iter()
            .map(|&k| {
                let mut seen = std::collections::HashMap::new();
                units
                    .iter()
                    .map(|u| {
                        let q = sys.cube_at_units(u, k);
                        let next = seen.len() as u32;
                        *seen.entry(q).or_insert(next)
                    })
                    .collect()
            })
            .collect();
        Self::new(m.weights().to_vec(), lv, labels)
    }

    /// The cells of a Haar tree, from its bottom level to its top level.
    pub fn from_tree(tree: &Tree) -> Result<Self> {
        let n = tree.len();
        let mut weights = vec![0.0; n];
        for pos in 0..n {
            weights[tree.order()[pos]] = tree.weights_pos()[pos];
        }
        let mut levels = Vec::new();
        let mut labels = Vec::new();
        for li in (0..tree.num_levels()).rev() {
            levels.push(tree.level(li));
            labels.push((0..n).map(|a| tree.cell_at(li, tree.pos_of(a)) as u32).collect());
        }
        Self::new(weights, levels, labels)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Label of level index `l`.
    pub fn level(&self, l: usize) -> i32 {
        self.levels[l]
    }

    pub fn levels(&self) -> &[i32] {
        &self.levels
    }

    pub fn label(&self, l: usize, atom: usize) -> usize {
        self.labels[l][atom] as usize
    }

    pub fn cells(&self, l: usize) -> &[Vec<usize>] {
        &self.cells[l]
    }

    pub fn mass(&self, l: usize, c: usize) -> f64 {
        self.masses[l][c]
    }

    /// `E_l f`: the `mu`-average over the level-`l` cell, zero on null cells.
    pub fn cond_expectation(&self, l: usize, f: &VectorField) -> VectorField {
        let d = f.dim();
        let mut out = VectorField::zeros(f.len(), f.space);
        for (c, atoms) in self.cells[l].iter().enumerate() {
            let m = self.masses[l][c];
            if m == 0.0 {
                continue;
            }
            let mut avg = vec![C64::new(0.0, 0.0); d];
            for &a in atoms {
                for (s, v) in avg.iter_mut().zip(f.at(a)) {
                    *s += v * self.weights[a];
                }
            }
            for s in &mut avg {
                *s /= m;
            }
            for &a in atoms {
                out.at_mut(a).copy_from_slice(&avg);
            }
        }
        out
    }

    /// Scalar version of [`Filtration::cond_expectation`].
    pub fn cond_expectation_scalar(&self, l: usize, f: &[C64]) -> Vec<C64> {
        self.cond_expectation(l, &VectorField::scalar(f.to_vec())).values().to_vec()
    }

    /// Whether `f` is constant (within `tol`) on every level-`l` cell.
    pub fn is_measurable(&self, l: usize, f: &VectorField, tol: f64) -> bool {
        self.cells[l].iter().all(|atoms| {
            let first = f.at(atoms[0]);
            atoms[1..]
                .iter()
                .all(|&a| f.at(a).iter().zip(first).all(|(x, y)| (x - y).norm() <= tol))
        })
    }
}

fn count(lab: &[u32]) -> usize {
    lab.iter().map(|&c| c as usize + 1).max().unwrap_or(0)
}
