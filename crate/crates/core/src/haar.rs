//! `b`-adapted conditional expectations, martingale differences and Haar
//! functions.
//!
//! [`Tree`] is the workhorse: it fixes a dyadic system, a measure and `b`,
//! orders every cell's children and lays the atoms out so that each cell and
//! each tail `Q_u, Q_{u+1}, ...` of its ordered children is a contiguous range
//! of positions. Coefficients and synthesis then reduce to prefix sums.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dyadic::{cube_id, point_units, Cube, DyadicSystem, MIN_LEVEL};
use crate::error::{invalid, Error, Result};
use crate::field::{NormSpace, VectorField, C64};
use crate::measure::{AccretiveFn, AtomicMeasure};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const TIE_REL: f64 = 1e-12;

/// Default guard on `|b(Q)| / mu(Q)` relative to the declared accretivity.
pub const DELTA_FLOOR_FACTOR: f64 = 1e-6;

pub fn delta_floor(b: &AccretiveFn) -> f64 {
    DELTA_FLOOR_FACTOR * b.delta()
}

fn check_inputs(m: &AtomicMeasure, f: &VectorField, b: &AccretiveFn) -> Result<()> {
    if f.len() != m.len() || b.len() != m.len() {
        return Err(invalid("f", "field, b and measure must have the same number of atoms"));
    }
    Ok(())
}

/// Groups atoms by their level-`k` cube, in cube order.
fn group_by_cube(m: &AtomicMeasure, sys: &DyadicSystem, k: i32) -> BTreeMap<Cube, Vec<usize>> {
    let mut groups: BTreeMap<Cube, Vec<usize>> = BTreeMap::new();
    for i in 0..m.len() {
        groups.entry(sys.cube_at_units(&point_units(m.point(i)), k)).or_default().push(i);
    }
    groups
}

/// `E_k^b f = b E_k f / E_k b` on the level-`k` cubes of `sys`.
pub fn cond_expectation(
    m: &AtomicMeasure,
    f: &VectorField,
    b: &AccretiveFn,
    k: i32,
    sys: &DyadicSystem,
    delta_floor: f64,
) -> Result<VectorField> {
    check_inputs(m, f, b)?;
    let dim = f.dim();
    let mut out = VectorField::zeros(m.len(), f.space);
    for atoms in group_by_cube(m, sys, k).values() {
        let mass: f64 = atoms.iter().map(|&i| m.weight(i)).sum();
        if mass == 0.0 {
            continue;
        }
        let bq: C64 = atoms.iter().map(|&i| b.value(i) * m.weight(i)).sum();
        if bq.norm() < delta_floor * mass {
            return Err(Error::AccretivityViolation { level: k, integral: bq.norm(), floor: delta_floor * mass });
        }
        let mut fq = vec![ZERO; dim];
        for &i in atoms {
            for (c, v) in f.at(i).iter().enumerate() {
                fq[c] += v * m.weight(i);
            }
        }
        for &i in atoms {
            let s = b.value(i) / bq;
            for (c, o) in out.at_mut(i).iter_mut().enumerate() {
                *o = fq[c] * s;
            }
        }
    }
    Ok(out)
}

/// `D_k^b f = E_{k-1}^b f - E_k^b f`.
pub fn martingale_difference(
    m: &AtomicMeasure,
    f: &VectorField,
    b: &AccretiveFn,
    k: i32,
    sys: &DyadicSystem,
    delta_floor: f64,
) -> Result<VectorField> {
    let fine = cond_expectation(m, f, b, k - 1, sys, delta_floor)?;
    let coarse = cond_expectation(m, f, b, k, sys, delta_floor)?;
    Ok(fine.sub(&coarse))
}

/// Greedy ordering of children with `b`-integrals `ints` so that every tail
/// `|b(Q_k u ... u Q_{2^N})| >= [1 - (k-1) 2^-N] * required`, where
/// `required = delta mu(Q)`. At each step the child whose removal leaves the
/// largest tail is taken; near ties go to the smaller index.
pub fn greedy_order(ints: &[C64], required: f64) -> Result<Vec<usize>> {
    let n = ints.len();
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut tail: C64 = ints.iter().sum();
    let slack = 1.0 - TIE_REL;
    if tail.norm() < required * slack {
        return Err(Error::NoValidChild { step: 0, tail: tail.norm(), required });
    }
    let mut order = Vec::with_capacity(n);
    for j in 1..n {
        let need = (1.0 - j as f64 / n as f64) * required;
        let mut best: Option<(usize, f64)> = None;
        for (pos, &u) in remaining.iter().enumerate() {
            let t = (tail - ints[u]).norm();
            match best {
                Some((_, bt)) if t <= bt * (1.0 + TIE_REL) => {}
                _ => best = Some((pos, t)),
            }
        }
        let (pos, t) = best.expect("remaining is nonempty");
        if t < need * slack {
            return Err(Error::NoValidChild { step: j, tail: t, required: need });
        }
        let u = remaining.remove(pos);
        tail -= ints[u];
        order.push(u);
    }
    order.extend(remaining);
    Ok(order)
}

/// Children `b`-integrals and masses of `Q`, indexed by geometric child index.
fn child_integrals(q: &Cube, m: &AtomicMeasure, b: &AccretiveFn) -> (Vec<C64>, Vec<f64>, Vec<Vec<usize>>) {
    let nc = 1usize << q.dim();
    let mut ints = vec![ZERO; nc];
    let mut mass = vec![0.0; nc];
    let mut atoms = vec![Vec::new(); nc];
    for i in 0..m.len() {
        let u = point_units(m.point(i));
        if q.contains_units(&u) {
            let e = q.child_index(&u);
            ints[e] += b.value(i) * m.weight(i);
            mass[e] += m.weight(i);
            atoms[e].push(i);
        }
    }
    (ints, mass, atoms)
}

/// Orders the `2^N` children of `Q` (geometric indices) for the Haar
/// construction, using the declared accretivity of `b`.
pub fn order_subcubes(q: &Cube, m: &AtomicMeasure, b: &AccretiveFn) -> Result<Vec<usize>> {
    let (ints, mass, _) = child_integrals(q, m, b);
    greedy_order(&ints, b.delta() * mass.iter().sum::<f64>())
}

/// Checks the tail inequalities for an ordering; returns the number of
/// violations.
pub fn subaccretive_violations(ints: &[C64], order: &[usize], required: f64) -> usize {
    let n = order.len();
    (1..=n)
        .filter(|&k| {
            let tail: C64 = order[k - 1..].iter().map(|&u| ints[u]).sum();
            tail.norm() < (1.0 - (k - 1) as f64 / n as f64) * required * (1.0 - TIE_REL)
        })
        .count()
}

/// An explicit Haar function with its values on every atom.
#[derive(Clone, Debug)]
pub struct HaarFunction {
    pub cube: Cube,
    pub u: usize,
    pub cancellative: bool,
    pub values: Vec<C64>,
    /// 1 on `Q_u`, 2 on the tail `Q^_{u+1}`, 0 elsewhere.
    pub region: Vec<u8>,
    pub qu_mass: f64,
    pub q_mass: f64,
}

impl HaarFunction {
    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == ZERO)
    }
}

/// `phi_{Q,u}` for `u >= 1` with the children ordered by [`order_subcubes`],
/// or the non-cancellative `phi_{Q,0} = b(Q)^{-1/2} 1_Q` for `u = 0`.
pub fn build_haar(q: &Cube, u: usize, m: &AtomicMeasure, b: &AccretiveFn) -> Result<HaarFunction> {
    let nc = 1usize << q.dim();
    if u >= nc {
        return Err(invalid("u", format!("must be below 2^N = {nc}")));
    }
    let (ints, mass, atoms) = child_integrals(q, m, b);
    let q_mass: f64 = mass.iter().sum();
    let floor = delta_floor(b);
    let bq: C64 = ints.iter().sum();
    if q_mass > 0.0 && bq.norm() < floor * q_mass {
        return Err(Error::AccretivityViolation { level: q.level, integral: bq.norm(), floor: floor * q_mass });
    }
    let mut values = vec![ZERO; m.len()];
    let mut region = vec![0u8; m.len()];
    if u == 0 {
        if q_mass > 0.0 {
            let a = bq.sqrt().inv();
            for list in &atoms {
                for &i in list {
                    values[i] = a;
                    region[i] = 1;
                }
            }
        }
        return Ok(HaarFunction { cube: *q, u, cancellative: false, values, region, qu_mass: q_mass, q_mass });
    }
    let order = greedy_order(&ints, b.delta() * q_mass)?;
    let g = order[u - 1];
    let tail = &order[u..];
    let tail_mass: f64 = tail.iter().map(|&e| mass[e]).sum();
    let qu_mass = mass[g];
    if qu_mass > 0.0 && tail_mass > 0.0 {
        let (a, beta) = haar_constants(ints[g], tail.iter().map(|&e| ints[e]).sum());
        for &i in &atoms[g] {
            values[i] = a;
            region[i] = 1;
        }
        for &e in tail {
            for &i in &atoms[e] {
                values[i] = beta;
                region[i] = 2;
            }
        }
    }
    Ok(HaarFunction { cube: *q, u, cancellative: true, values, region, qu_mass, q_mass })
}

/// Values of `phi` on `Q_u` and on the tail, from `b(Q_u)` and `b(Q^_{u+1})`.
fn haar_constants(bu: C64, hat_next: C64) -> (C64, C64) {
    let c = (bu * hat_next / (bu + hat_next)).sqrt();
    (c / bu, -c / hat_next)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct HaarNormReport {
    pub integral_b_phi: C64,
    pub integral_b_phi_sq: C64,
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
    pub l1_linf: f64,
    pub qu_mass: f64,
    /// `||phi||_p / mu(Q_u)^(1/p - 1/2)` for `p = 1, 2, inf`.
    pub norm_constants: [f64; 3],
    /// Range of `|phi(x)|` divided by the pointwise profile
    /// `sqrt(mu(Q_u)) (1_{Q_u}/mu(Q_u) + 1_{tail}/mu(Q))` over the support.
    pub pointwise_lower: f64,
    pub pointwise_upper: f64,
}

pub fn verify_haar_norms(phi: &HaarFunction, m: &AtomicMeasure, b: &AccretiveFn) -> HaarNormReport {
    let mut ib = ZERO;
    let mut ib2 = ZERO;
    let (mut l1, mut l2, mut linf) = (0.0, 0.0, 0.0f64);
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    let s = phi.qu_mass.sqrt();
    for i in 0..m.len() {
        let v = phi.values[i];
        let w = m.weight(i);
        ib += b.value(i) * v * w;
        ib2 += b.value(i) * v * v * w;
        let a = v.norm();
        l1 += a * w;
        l2 += a * a * w;
        linf = linf.max(a);
        let profile = match phi.region[i] {
            1 if phi.cancellative => s / phi.qu_mass,
            2 => s / phi.q_mass,
            1 => 1.0 / phi.q_mass.sqrt(),
            _ => continue,
        };
        lo = lo.min(a / profile);
        hi = hi.max(a / profile);
    }
    let l2 = l2.sqrt();
    let mq = phi.qu_mass;
    HaarNormReport {
        integral_b_phi: ib,
        integral_b_phi_sq: ib2,
        l1,
        l2,
        linf,
        l1_linf: l1 * linf,
        qu_mass: mq,
        norm_constants: [l1 / mq.sqrt(), l2, linf * mq.sqrt()],
        pointwise_lower: if lo.is_finite() { lo } else { 0.0 },
        pointwise_upper: hi,
    }
}

/// One cell of a [`Tree`].
#[derive(Clone, Debug)]
pub struct Cell {
    pub cube: Cube,
    /// Position range `[start, end)`.
    pub start: usize,
    pub end: usize,
    pub parent: Option<usize>,
    /// Indices (at the next finer level) of the nonempty children, in Haar order.
    pub children: Vec<usize>,
    pub mass: f64,
    pub b_integral: C64,
    /// Haar entries belonging to this cell.
    pub haar: std::ops::Range<usize>,
}

impl Cell {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// A nonzero Haar function in compact form: value `a` on positions `[s0, s1)`
/// and `beta` on `[s1, s2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HaarEntry {
    /// Level index in the tree (0 is the top).
    pub li: usize,
    pub cell: usize,
    pub u: usize,
    pub s0: usize,
    pub s1: usize,
    pub s2: usize,
    pub a: C64,
    pub beta: C64,
}

impl HaarEntry {
    pub fn cancellative(&self) -> bool {
        self.u > 0
    }

    /// Value at position `pos`.
    #[inline]
    pub fn value_at(&self, pos: usize) -> C64 {
        if pos >= self.s0 && pos < self.s1 {
            self.a
        } else if pos >= self.s1 && pos < self.s2 {
            self.beta
        } else {
            ZERO
        }
    }
}

/// Cells of one dyadic system restricted to the atoms, from the top level `m`
/// down to the first level where every cell holds one atom, together with the
/// `b`-adapted Haar basis.
#[derive(Clone, Debug)]
pub struct Tree {
    pub dim: usize,
    top: i32,
    bottom: i32,
    /// `order[pos] = atom`.
    order: Vec<usize>,
    pos_of: Vec<usize>,
    weights_pos: Vec<f64>,
    b_pos: Vec<C64>,
    levels: Vec<Vec<Cell>>,
    /// `cell_of[li][pos]`.
    cell_of: Vec<Vec<u32>>,
    haar: Vec<HaarEntry>,
    /// Number of Haar functions counting the zero ones (`2^N - 1` per splitting cell plus the top cells).
    formal_count: usize,
}

/// Smallest level at which the atoms meet at most `2^N` cubes of any system.
pub fn auto_top_level(m: &AtomicMeasure) -> i32 {
    let n = m.dim();
    let mut extent: f64 = 0.0;
    for c in 0..n {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..m.len() {
            lo = lo.min(m.point(i)[c]);
            hi = hi.max(m.point(i)[c]);
        }
        extent = extent.max(hi - lo);
    }
    if extent <= 0.0 {
        return 0;
    }
    extent.log2().floor() as i32 + 1
}

impl Tree {
    /// Builds the tree with top level `top` (default [`auto_top_level`]).
    pub fn build(m: &AtomicMeasure, b: &AccretiveFn, sys: &DyadicSystem, top: Option<i32>) -> Result<Tree> {
        Self::build_with_floor(m, b, sys, top, delta_floor(b))
    }

    pub fn build_with_floor(
        m: &AtomicMeasure,
        b: &AccretiveFn,
        sys: &DyadicSystem,
        top: Option<i32>,
        delta_floor: f64,
    ) -> Result<Tree> {
        let n = m.len();
        if b.len() != n {
            return Err(invalid("b", "length differs from the measure"));
        }
        if sys.dim() != m.dim() {
            return Err(invalid("system", "dimension differs from the measure"));
        }
        if n == 0 {
            return Err(invalid("measure", "empty"));
        }
        let top = top.unwrap_or_else(|| auto_top_level(m));
        let (k_lo, k_hi) = sys.window();
        if top > k_hi || top < k_lo {
            return Err(Error::WindowTooSmall(format!("top level {top} outside window [{k_lo}, {k_hi}]")));
        }
        let nc = 1usize << m.dim();
        let units: Vec<_> = (0..n).map(|i| point_units(m.point(i))).collect();
        let wb = |i: usize| b.value(i) * m.weight(i);

        let mut order: Vec<usize> = (0..n).collect();
        let tops: Vec<Cube> = units.iter().map(|u| sys.cube_at_units(u, top)).collect();
        order.sort_by(|&a, &c| tops[a].cmp(&tops[c]).then(a.cmp(&c)));
        let mut first = Vec::new();
        let mut s = 0;
        while s < n {
            let mut e = s + 1;
            while e < n && tops[order[e]] == tops[order[s]] {
                e += 1;
            }
            first.push(Cell {
                cube: tops[order[s]],
                start: s,
                end: e,
                parent: None,
                children: Vec::new(),
                mass: 0.0,
                b_integral: ZERO,
                haar: 0..0,
            });
            s = e;
        }
        for c in &mut first {
            c.mass = order[c.start..c.end].iter().map(|&i| m.weight(i)).sum();
            c.b_integral = order[c.start..c.end].iter().map(|&i| wb(i)).sum();
        }
        let mut levels = vec![first];
        // Per cell at each level: greedy order over all 2^N geometric children.
        let mut kid_u: Vec<Vec<Vec<usize>>> = Vec::new();
        loop {
            let cur = levels.last().expect("nonempty");
            if cur.iter().all(|c| c.len() == 1) {
                kid_u.push(vec![Vec::new(); cur.len()]);
                break;
            }
            let level = cur[0].cube.level;
            if level - 1 < MIN_LEVEL {
                return Err(Error::WindowTooSmall("atoms not separated above the finest supported level".into()));
            }
            let mut next = Vec::new();
            let mut level_u = Vec::with_capacity(cur.len());
            let li = levels.len() - 1;
            let mut new_children = Vec::with_capacity(cur.len());
            for (ci, cell) in cur.iter().enumerate() {
                if cell.mass > 0.0 && cell.b_integral.norm() < delta_floor * cell.mass {
                    return Err(Error::AccretivityViolation {
                        level,
                        integral: cell.b_integral.norm(),
                        floor: delta_floor * cell.mass,
                    });
                }
                let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); nc];
                for &i in &order[cell.start..cell.end] {
                    buckets[cell.cube.child_index(&units[i])].push(i);
                }
                let ints: Vec<C64> = buckets.iter().map(|v| v.iter().map(|&i| wb(i)).sum()).collect();
                let masses: Vec<f64> = buckets.iter().map(|v| v.iter().map(|&i| m.weight(i)).sum()).collect();
                let nonempty = buckets.iter().filter(|v| !v.is_empty()).count();
                let ord = if nonempty > 1 {
                    greedy_order(&ints, b.delta() * cell.mass)?
                } else {
                    let mut o: Vec<usize> = (0..nc).filter(|&e| buckets[e].is_empty()).collect();
                    o.extend((0..nc).filter(|&e| !buckets[e].is_empty()));
                    o
                };
                let mut pos = cell.start;
                let mut kids = Vec::new();
                let mut us = Vec::new();
                for (u1, &e) in ord.iter().enumerate() {
                    if buckets[e].is_empty() {
                        continue;
                    }
                    us.push(u1 + 1);
                    let len = buckets[e].len();
                    order[pos..pos + len].copy_from_slice(&buckets[e]);
                    kids.push(next.len());
                    next.push(Cell {
                        cube: cell.cube.child(e),
                        start: pos,
                        end: pos + len,
                        parent: Some(ci),
                        children: Vec::new(),
                        mass: masses[e],
                        b_integral: ints[e],
                        haar: 0..0,
                    });
                    pos += len;
                }
                new_children.push(kids);
                level_u.push(us);
            }
            for (ci, kids) in new_children.into_iter().enumerate() {
                levels[li][ci].children = kids;
            }
            kid_u.push(level_u);
            levels.push(next);
        }
        let bottom = top - (levels.len() as i32 - 1);
        if bottom < k_lo {
            return Err(Error::WindowTooSmall(format!(
                "atoms are separated only at level {bottom}, below the window start {k_lo}"
            )));
        }

        let mut pos_of = vec![0usize; n];
        for (p, &a) in order.iter().enumerate() {
            pos_of[a] = p;
        }
        let mut cell_of = Vec::with_capacity(levels.len());
        for cells in &levels {
            let mut v = vec![0u32; n];
            for (ci, c) in cells.iter().enumerate() {
                for x in &mut v[c.start..c.end] {
                    *x = ci as u32;
                }
            }
            cell_of.push(v);
        }

        let mut haar = Vec::new();
        let mut formal_count = 0;
        let mut ranges = Vec::with_capacity(levels.len());
        for li in 0..levels.len() {
            let mut lr = Vec::with_capacity(levels[li].len());
            for ci in 0..levels[li].len() {
                let cell = &levels[li][ci];
                let h0 = haar.len();
                if li == 0 {
                    formal_count += 1;
                    if cell.mass > 0.0 {
                        haar.push(HaarEntry {
                            li,
                            cell: ci,
                            u: 0,
                            s0: cell.start,
                            s1: cell.end,
                            s2: cell.end,
                            a: cell.b_integral.sqrt().inv(),
                            beta: ZERO,
                        });
                    }
                }
                if cell.children.len() > 1 {
                    formal_count += nc - 1;
                    let kids: Vec<&Cell> = cell.children.iter().map(|&k| &levels[li + 1][k]).collect();
                    let mut hat: C64 = kids.iter().map(|k| k.b_integral).sum();
                    for (t, kid) in kids.iter().enumerate().take(kids.len() - 1) {
                        hat -= kid.b_integral;
                        if kid.mass == 0.0 {
                            continue;
                        }
                        let (a, beta) = haar_constants(kid.b_integral, hat);
                        haar.push(HaarEntry {
                            li,
                            cell: ci,
                            u: kid_u[li][ci][t],
                            s0: kid.start,
                            s1: kid.end,
                            s2: cell.end,
                            a,
                            beta,
                        });
                    }
                }
                lr.push(h0..haar.len());
            }
            ranges.push(lr);
        }
        for (cells, lr) in levels.iter_mut().zip(ranges) {
            for (c, r) in cells.iter_mut().zip(lr) {
                c.haar = r;
            }
        }
        Ok(Tree {
            dim: m.dim(),
            top,
            bottom,
            weights_pos: order.iter().map(|&i| m.weight(i)).collect(),
            b_pos: order.iter().map(|&i| b.value(i)).collect(),
            order,
            pos_of,
            levels,
            cell_of,
            haar,
            formal_count,
        })
    }
}

impl Tree {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn top_level(&self) -> i32 {
        self.top
    }

    /// Finest level; every cell there holds a single atom.
    pub fn bottom_level(&self) -> i32 {
        self.bottom
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Dyadic level of level index `li`.
    pub fn level(&self, li: usize) -> i32 {
        self.top - li as i32
    }

    /// Level index of dyadic level `k`, if it lies in the tree.
    pub fn level_index(&self, k: i32) -> Option<usize> {
        if k > self.top || k < self.bottom {
            None
        } else {
            Some((self.top - k) as usize)
        }
    }

    pub fn cells(&self, li: usize) -> &[Cell] {
        &self.levels[li]
    }

    pub fn cell(&self, li: usize, ci: usize) -> &Cell {
        &self.levels[li][ci]
    }

    /// Cell index at level index `li` holding position `pos`.
    pub fn cell_at(&self, li: usize, pos: usize) -> usize {
        self.cell_of[li][pos] as usize
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn pos_of(&self, atom: usize) -> usize {
        self.pos_of[atom]
    }

    pub fn weights_pos(&self) -> &[f64] {
        &self.weights_pos
    }

    pub fn b_pos(&self) -> &[C64] {
        &self.b_pos
    }

    pub fn haar(&self) -> &[HaarEntry] {
        &self.haar
    }

    /// Count of Haar functions including the identically zero ones.
    pub fn formal_haar_count(&self) -> usize {
        self.formal_count
    }

    pub fn haar_cube(&self, h: &HaarEntry) -> Cube {
        self.levels[h.li][h.cell].cube
    }

    /// Dense values of Haar entry `h` in atom order.
    pub fn haar_values(&self, h: &HaarEntry) -> Vec<C64> {
        let mut v = vec![ZERO; self.len()];
        for pos in h.s0..h.s2 {
            v[self.order[pos]] = h.value_at(pos);
        }
        v
    }

    /// Explicit [`HaarFunction`] for entry `h`.
    pub fn haar_function(&self, h: &HaarEntry) -> HaarFunction {
        let mut region = vec![0u8; self.len()];
        for pos in h.s0..h.s2 {
            region[self.order[pos]] = if pos < h.s1 { 1 } else { 2 };
        }
        let mass = |a: usize, e: usize| self.weights_pos[a..e].iter().sum::<f64>();
        let cell = &self.levels[h.li][h.cell];
        HaarFunction {
            cube: cell.cube,
            u: h.u,
            cancellative: h.cancellative(),
            values: self.haar_values(h),
            region,
            qu_mass: mass(h.s0, h.s1),
            q_mass: cell.mass,
        }
    }

    /// Prefix sums (position order) of `w f`, flat with stride `dim`.
    pub fn prefix(&self, f: &VectorField) -> Vec<C64> {
        let d = f.dim();
        let mut p = vec![ZERO; (self.len() + 1) * d];
        for pos in 0..self.len() {
            let a = self.order[pos];
            let w = self.weights_pos[pos];
            for c in 0..d {
                p[(pos + 1) * d + c] = p[pos * d + c] + f.at(a)[c] * w;
            }
        }
        p
    }

    /// `<phi_h, f>` for every Haar entry, flat with stride `dim`.
    pub fn coefficients(&self, f: &VectorField) -> Vec<C64> {
        let d = f.dim();
        let p = self.prefix(f);
        let mut out = vec![ZERO; self.haar.len() * d];
        for (k, h) in self.haar.iter().enumerate() {
            for c in 0..d {
                let first = p[h.s1 * d + c] - p[h.s0 * d + c];
                let second = p[h.s2 * d + c] - p[h.s1 * d + c];
                out[k * d + c] = h.a * first + h.beta * second;
            }
        }
        out
    }

    /// `sum_h s_h b phi_h c_h` with optional per-entry scalars `s`.
    pub fn synthesize(&self, coeffs: &[C64], space: NormSpace, scale: Option<&[C64]>) -> VectorField {
        self.synth(coeffs, space, scale, true)
    }

    /// `sum_h s_h phi_h c_h`, without the factor `b`.
    pub fn combine(&self, coeffs: &[C64], space: NormSpace, scale: Option<&[C64]>) -> VectorField {
        self.synth(coeffs, space, scale, false)
    }

    fn synth(&self, coeffs: &[C64], space: NormSpace, scale: Option<&[C64]>, with_b: bool) -> VectorField {
        let d = space.dim;
        let n = self.len();
        let mut diff = vec![ZERO; (n + 1) * d];
        for (k, h) in self.haar.iter().enumerate() {
            let s = scale.map_or(C64::new(1.0, 0.0), |s| s[k]);
            for c in 0..d {
                let v = coeffs[k * d + c] * s;
                if v == ZERO {
                    continue;
                }
                let va = v * h.a;
                diff[h.s0 * d + c] += va;
                diff[h.s1 * d + c] -= va;
                if h.s2 > h.s1 {
                    let vb = v * h.beta;
                    diff[h.s1 * d + c] += vb;
                    diff[h.s2 * d + c] -= vb;
                }
            }
        }
        let mut out = VectorField::zeros(n, space);
        let mut run = vec![ZERO; d];
        for pos in 0..n {
            let a = self.order[pos];
            let b = if with_b { self.b_pos[pos] } else { C64::new(1.0, 0.0) };
            for c in 0..d {
                run[c] += diff[pos * d + c];
                out.at_mut(a)[c] = run[c] * b;
            }
        }
        out
    }

    /// `E_k^b f` for a level inside the tree, via the stored cells.
    pub fn cond_expectation(&self, f: &VectorField, li: usize) -> VectorField {
        let d = f.dim();
        let p = self.prefix(f);
        let mut out = VectorField::zeros(self.len(), f.space);
        for cell in &self.levels[li] {
            if cell.mass == 0.0 {
                continue;
            }
            for pos in cell.start..cell.end {
                let a = self.order[pos];
                let s = self.b_pos[pos] / cell.b_integral;
                for c in 0..d {
                    out.at_mut(a)[c] = (p[cell.end * d + c] - p[cell.start * d + c]) * s;
                }
            }
        }
        out
    }

    /// Level index of the sign attached to each Haar entry: the cell level for
    /// cancellative entries and a separate slot `num_levels()` for the top
    /// `E_m^b` terms.
    pub fn sign_slot(&self, h: &HaarEntry) -> usize {
        if h.cancellative() {
            h.li
        } else {
            self.levels.len()
        }
    }
}

/// Haar coefficients `<phi_{Q,u}, f>` of a field.
#[derive(Clone, Debug)]
pub struct Decomposition {
    pub space: NormSpace,
    pub top_level: i32,
    pub bottom_level: i32,
    /// `(cube, u)` per entry, aligned with the tree's Haar list.
    pub keys: Vec<(Cube, usize)>,
    /// Flat coefficients with stride `space.dim`.
    pub coeffs: Vec<C64>,
}

impl Decomposition {
    pub fn coeff(&self, k: usize) -> &[C64] {
        let d = self.space.dim;
        &self.coeffs[k * d..(k + 1) * d]
    }

    /// CSV rows: level, cube id, u, then real and imaginary parts per component.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let d = self.space.dim;
        let mut header = vec!["level".to_string(), "cube".into(), "u".into()];
        for c in 0..d {
            header.push(format!("re{c}"));
            header.push(format!("im{c}"));
        }
        wr.write_record(&header)?;
        for (k, (q, u)) in self.keys.iter().enumerate() {
            let mut row = vec![q.level.to_string(), cube_id(q), u.to_string()];
            for z in self.coeff(k) {
                row.push(format!("{:.17e}", z.re));
                row.push(format!("{:.17e}", z.im));
            }
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub fn decompose(f: &VectorField, tree: &Tree) -> Result<Decomposition> {
    if f.len() != tree.len() {
        return Err(invalid("f", "length differs from the tree"));
    }
    Ok(Decomposition {
        space: f.space,
        top_level: tree.top,
        bottom_level: tree.bottom,
        keys: tree.haar.iter().map(|h| (tree.haar_cube(h), h.u)).collect(),
        coeffs: tree.coefficients(f),
    })
}

pub fn reconstruct(dec: &Decomposition, tree: &Tree) -> Result<VectorField> {
    if dec.keys.len() != tree.haar.len() {
        return Err(invalid("decomposition", "does not belong to this tree"));
    }
    Ok(tree.synthesize(&dec.coeffs, dec.space, None))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct UnconditionalityReport {
    pub max_ratio: f64,
    pub mean_ratio: f64,
    pub trials: usize,
}

/// Ratios `||sum_k eps_k D_k^b f + eps_top E_m^b f||_p / ||f||_p` over random
/// sign patterns, one sign per level.
pub fn unconditionality_estimate(
    f: &VectorField,
    tree: &Tree,
    weights: &[f64],
    p: f64,
    trials: usize,
    seed: u64,
) -> Result<UnconditionalityReport> {
    if !(p >= 1.0) {
        return Err(invalid("p", "must be at least 1"));
    }
    let dec = decompose(f, tree)?;
    let base = f.lp_norm(weights, p);
    if base == 0.0 {
        return Ok(UnconditionalityReport { max_ratio: 0.0, mean_ratio: 0.0, trials });
    }
    let slots = tree.num_levels() + 1;
    let mut rng = crate::rng::root(seed);
    let (mut max, mut sum) = (0.0f64, 0.0);
    for _ in 0..trials {
        let eps: Vec<f64> = (0..slots).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        let scale: Vec<C64> = tree.haar.iter().map(|h| C64::new(eps[tree.sign_slot(h)], 0.0)).collect();
        let g = tree.synthesize(&dec.coeffs, f.space, Some(&scale));
        let r = g.lp_norm(weights, p) / base;
        max = max.max(r);
        sum += r;
    }
    Ok(UnconditionalityReport { max_ratio: max, mean_ratio: sum / trials.max(1) as f64, trials })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct HaarIdentityReport {
    pub cancellative: usize,
    /// `max |int b phi dmu|`.
    pub max_abs_integral: f64,
    /// `max |int b phi^2 dmu - 1|`.
    pub max_norm_err: f64,
    pub cells_checked: usize,
    /// Tail inequality failures after ordering the children of every cell.
    pub subaccretive_violations: usize,
}

/// Checks `int b phi = 0`, `int b phi^2 = 1` for every cancellative entry and
/// the ordered tail inequalities for every splitting cell of the tree.
pub fn identity_check(tree: &Tree, b: &AccretiveFn, m: &AtomicMeasure) -> Result<HaarIdentityReport> {
    let mut rep = HaarIdentityReport {
        cancellative: 0,
        max_abs_integral: 0.0,
        max_norm_err: 0.0,
        cells_checked: 0,
        subaccretive_violations: 0,
    };
    let (w, bp) = (tree.weights_pos(), tree.b_pos());
    for h in tree.haar().iter().filter(|h| h.cancellative()) {
        let (mut i1, mut i2) = (ZERO, ZERO);
        for pos in h.s0..h.s2 {
            let v = h.value_at(pos);
            i1 += bp[pos] * v * w[pos];
            i2 += bp[pos] * v * v * w[pos];
        }
        rep.cancellative += 1;
        rep.max_abs_integral = rep.max_abs_integral.max(i1.norm());
        rep.max_norm_err = rep.max_norm_err.max((i2 - 1.0).norm());
    }
    for li in 0..tree.num_levels() {
        for cell in tree.cells(li).iter().filter(|c| c.children.len() > 1) {
            let q = cell.cube;
            let mut ints = vec![ZERO; 1 << q.dim()];
            for pos in cell.start..cell.end {
                let a = tree.order()[pos];
                ints[q.child_index(&point_units(m.point(a)))] += bp[pos] * w[pos];
            }
            let ord = greedy_order(&ints, b.delta() * cell.mass)?;
            rep.cells_checked += 1;
            rep.subaccretive_violations += subaccretive_violations(&ints, &ord, b.delta() * cell.mass);
        }
    }
    Ok(rep)
}
