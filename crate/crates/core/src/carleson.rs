//! Carleson norms of adapted sequences, the abstract paraproduct, BMO, and the
//! `T* b2` paraproduct `Pi_2`.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::dyadic::{point_units, Cube, DyadicSystem};
use crate::error::{invalid, Error, Result};
use crate::field::{NormSpace, VectorField, C64};
use crate::filtration::Filtration;
use crate::haar::{delta_floor, Tree};
use crate::kernel::DiscreteOperator;
use crate::measure::{AccretiveFn, AtomicMeasure};
use crate::rng;

/// Sign patterns are enumerated exactly up to this many nonzero terms.
pub const EXACT_SIGN_TERMS: usize = 12;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Rademacher moments of partial sums.
///
/// `terms` lists `(slot, values)` with flat values of stride `space.dim`,
/// slots strictly increasing. Returns `m[l][x] = E ||sum_{slot <= l} eps_slot
/// v_slot(x)||^p` for `l < num_slots` (only the last row is filled when
/// `all_levels` is false) and whether the expectation was exact.
pub fn sign_moments(
    space: NormSpace,
    n_atoms: usize,
    terms: &[(usize, &[C64])],
    num_slots: usize,
    p: f64,
    trials: usize,
    seed: u64,
    all_levels: bool,
) -> (Vec<Vec<f64>>, bool) {
    let d = space.dim;
    let k = terms.len();
    let mut out = vec![vec![0.0; n_atoms]; num_slots];
    if k == 0 || num_slots == 0 {
        return (out, true);
    }
    let exact = k <= EXACT_SIGN_TERMS;
    let patterns: Vec<Vec<f64>> = if exact {
        Vec::new()
    } else {
        (0..trials.max(1))
            .map(|t| {
                let mut r = rng::substream(seed, t as u64);
                (0..k).map(|_| if r.gen::<bool>() { 1.0 } else { -1.0 }).collect()
            })
            .collect()
    };
    let np = patterns.len() as f64;
    // Slot ranges on which the partial sum through term t is the relevant one.
    let ranges: Vec<(usize, usize)> = (0..k)
        .map(|t| {
            let lo = terms[t].0;
            let hi = if t + 1 < k { terms[t + 1].0 } else { num_slots };
            (lo, hi)
        })
        .collect();
    let per_atom: Vec<Vec<f64>> = (0..n_atoms)
        .into_par_iter()
        .map(|x| {
            if exact {
                return exact_prefix_moments(space, terms, x, p);
            }
            let mut acc = vec![0.0; k];
            let mut s = vec![ZERO; d];
            for pat in &patterns {
                s.iter_mut().for_each(|v| *v = ZERO);
                for t in 0..k {
                    let v = &terms[t].1[x * d..(x + 1) * d];
                    for c in 0..d {
                        s[c] += v[c] * pat[t];
                    }
                    if all_levels || t + 1 == k {
                        acc[t] += space.norm(&s).powf(p);
                    }
                }
            }
            acc.iter().map(|a| a / np).collect()
        })
        .collect();
    for (x, acc) in per_atom.iter().enumerate() {
        for t in 0..k {
            if !all_levels && t + 1 != k {
                continue;
            }
            let (lo, hi) = ranges[t];
            let lo = if all_levels { lo } else { num_slots - 1 };
            for row in out.iter_mut().take(hi).skip(lo) {
                row[x] = acc[t];
            }
        }
    }
    (out, exact)
}

/// `E ||sum_{u <= t} eps_u v_u(x)||^p` for every `t` by full enumeration.
/// Terms vanishing at `x` are skipped and the partial sums are grown one term
/// at a time, with the first sign fixed (a global flip changes no norm).
fn exact_prefix_moments(space: NormSpace, terms: &[(usize, &[C64])], x: usize, p: f64) -> Vec<f64> {
    let d = space.dim;
    let mut acc = vec![0.0; terms.len()];
    let mut sums: Vec<C64> = Vec::new();
    let mut count = 0usize;
    let mut last = 0.0;
    for (t, (_, vals)) in terms.iter().enumerate() {
        let v = &vals[x * d..(x + 1) * d];
        if v.iter().any(|c| *c != ZERO) {
            if count == 0 {
                sums = v.to_vec();
                count = 1;
            } else {
                let mut next = Vec::with_capacity(2 * sums.len());
                for s in sums.chunks(d) {
                    next.extend(s.iter().zip(v).map(|(a, b)| a + b));
                    next.extend(s.iter().zip(v).map(|(a, b)| a - b));
                }
                sums = next;
                count *= 2;
            }
            last = sums.chunks(d).map(|s| space.norm(s).powf(p)).sum::<f64>() / count as f64;
        }
        acc[t] = last;
    }
    acc
}

/// A sequence `theta_j` indexed by filtration levels with values in `X`.
#[derive(Clone, Debug)]
pub struct CarlesonSequence {
    pub space: NormSpace,
    /// Level index to values; missing levels are zero.
    pub theta: BTreeMap<usize, VectorField>,
}

impl CarlesonSequence {
    pub fn new(space: NormSpace) -> Self {
        CarlesonSequence { space, theta: BTreeMap::new() }
    }

    pub fn insert(&mut self, level: usize, v: VectorField) -> Result<()> {
        if v.space.dim != self.space.dim {
            return Err(invalid("theta", "dimension differs from the sequence space"));
        }
        self.theta.insert(level, v);
        Ok(())
    }

    /// Whether `theta_j = E_j theta_j` for every stored level.
    pub fn is_adapted(&self, filt: &Filtration, tol: f64) -> bool {
        self.theta.iter().all(|(&l, v)| l < filt.num_levels() && filt.is_measurable(l, v, tol))
    }

    fn terms(&self) -> Vec<(usize, &[C64])> {
        self.theta.iter().filter(|(_, v)| v.max_abs() > 0.0).map(|(&l, v)| (l, v.values())).collect()
    }
}

/// Random adapted sequence: independent Gaussian vectors per cell, each cell
/// kept with probability `density`.
pub fn random_adapted_sequence<R: Rng + ?Sized>(
    filt: &Filtration,
    space: NormSpace,
    density: f64,
    rng: &mut R,
) -> CarlesonSequence {
    let mut seq = CarlesonSequence::new(space);
    let d = space.dim;
    for l in 0..filt.num_levels() {
        let mut v = VectorField::zeros(filt.len(), space);
        for atoms in filt.cells(l) {
            if rng.gen::<f64>() >= density {
                continue;
            }
            let val: Vec<C64> = (0..d)
                .map(|_| C64::new(StandardNormal.sample(&mut *rng), StandardNormal.sample(&mut *rng)))
                .collect();
            for &a in atoms {
                v.at_mut(a).copy_from_slice(&val);
            }
        }
        seq.theta.insert(l, v);
    }
    seq
}

#[derive(Clone, Copy, Debug)]
pub struct SignOptions {
    pub trials: usize,
    pub seed: u64,
    /// Random unions of two or three cells sampled per level.
    pub union_samples: usize,
}

impl Default for SignOptions {
    fn default() -> Self {
        SignOptions { trials: 2000, seed: 0, union_samples: 32 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CarlesonReport {
    pub p: f64,
    pub norm: f64,
    /// Level index and cell of the maximizing set.
    pub level: usize,
    pub cell: usize,
    pub exact: bool,
    /// Largest value over the sampled unions of cells (never above `norm`).
    pub union_sup: f64,
    pub unions_sampled: usize,
}

/// `Car^p = sup_k sup_A mu(A)^{-1/p} || 1_A sum_{j <= k} eps_j theta_j ||_{L^p(P x mu; X)}`
/// with `A` ranging over the cells of level `k`.
pub fn carleson_norm(filt: &Filtration, seq: &CarlesonSequence, p: f64, opts: &SignOptions) -> Result<CarlesonReport> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(invalid("p", "must lie in [1, inf)"));
    }
    let terms = seq.terms();
    let (m, exact) = sign_moments(seq.space, filt.len(), &terms, filt.num_levels(), p, opts.trials, opts.seed, true);
    let w = filt.weights();
    let mut best = (0.0, 0usize, 0usize);
    let mut union_sup: f64 = 0.0;
    let mut unions = 0;
    let mut r = rng::root(rng::derive(opts.seed, "carleson-unions"));
    for l in 0..filt.num_levels() {
        let cells = filt.cells(l);
        let integrals: Vec<f64> = cells.iter().map(|atoms| atoms.iter().map(|&a| w[a] * m[l][a]).sum()).collect();
        for (c, &s) in integrals.iter().enumerate() {
            let mass = filt.mass(l, c);
            if mass > 0.0 {
                let v = (s / mass).powf(1.0 / p);
                if v > best.0 {
                    best = (v, l, c);
                }
            }
        }
        if cells.len() >= 2 {
            for _ in 0..opts.union_samples {
                let size = r.gen_range(2..=3.min(cells.len()));
                let pick = sample(&mut r, cells.len(), size);
                let (s, mass) = pick.iter().fold((0.0, 0.0), |(s, ms), c| (s + integrals[c], ms + filt.mass(l, c)));
                if mass > 0.0 {
                    union_sup = union_sup.max((s / mass).powf(1.0 / p));
                    unions += 1;
                }
            }
        }
    }
    Ok(CarlesonReport { p, norm: best.0, level: best.1, cell: best.2, exact, union_sup, unions_sampled: unions })
}

#[derive(Clone, Debug, Serialize)]
pub struct JnReport {
    pub ps: Vec<f64>,
    /// `values[i][k] = Car^{ps[k]}` of instance `i`.
    pub values: Vec<Vec<f64>>,
    /// Per `k`: min, mean and max over instances of `Car^{ps[k]} / Car^{ps[0]}`.
    pub ratio_min: Vec<f64>,
    pub ratio_mean: Vec<f64>,
    pub ratio_max: Vec<f64>,
    pub all_exact: bool,
}

/// Carleson norms of every instance for each exponent, with ratios against
/// the first exponent. Rejects sequences that are not adapted.
pub fn jn_equivalence_test(
    filt: &Filtration,
    seqs: &[CarlesonSequence],
    ps: &[f64],
    opts: &SignOptions,
) -> Result<JnReport> {
    if ps.is_empty() {
        return Err(invalid("ps", "at least one exponent is required"));
    }
    for (i, s) in seqs.iter().enumerate() {
        if !s.is_adapted(filt, 1e-12) {
            return Err(Error::Measurability(format!("sequence {i} is not adapted to the filtration")));
        }
    }
    let mut values = Vec::with_capacity(seqs.len());
    let mut all_exact = true;
    for s in seqs {
        let mut row = Vec::with_capacity(ps.len());
        for &p in ps {
            let rep = carleson_norm(filt, s, p, &SignOptions { union_samples: 0, ..*opts })?;
            all_exact &= rep.exact;
            row.push(rep.norm);
        }
        values.push(row);
    }
    let mut ratio_min = vec![f64::INFINITY; ps.len()];
    let mut ratio_max = vec![0.0f64; ps.len()];
    let mut ratio_sum = vec![0.0; ps.len()];
    let mut cnt = 0usize;
    for row in &values {
        if row[0] <= 0.0 {
            continue;
        }
        cnt += 1;
        for k in 0..ps.len() {
            let q = row[k] / row[0];
            ratio_min[k] = ratio_min[k].min(q);
            ratio_max[k] = ratio_max[k].max(q);
            ratio_sum[k] += q;
        }
    }
    let ratio_mean = ratio_sum.iter().map(|s| if cnt > 0 { s / cnt as f64 } else { f64::NAN }).collect();
    if cnt == 0 {
        ratio_min.iter_mut().for_each(|v| *v = f64::NAN);
    }
    Ok(JnReport { ps: ps.to_vec(), values, ratio_min, ratio_mean, ratio_max, all_exact })
}

#[derive(Clone, Debug, Serialize)]
pub struct ParaproductReport {
    pub pf_norm: f64,
    pub car1: f64,
    pub f_norm: f64,
    /// `||Pf|| / (Car^1 ||f||)`.
    pub ratio: f64,
    pub exact: bool,
}

/// `P f = sum_j eps_j theta_j E_j f` in `L^p(P x mu; X)`. `theta` is scalar or
/// acts diagonally with the dimension of `f`.
pub fn abstract_paraproduct_field(filt: &Filtration, seq: &CarlesonSequence, f: &VectorField) -> Result<Vec<(usize, VectorField)>> {
    let td = seq.space.dim;
    if td != 1 && td != f.dim() {
        return Err(invalid("theta", "must be scalar or match the dimension of f"));
    }
    let mut out = Vec::new();
    for (&l, th) in &seq.theta {
        if l >= filt.num_levels() {
            return Err(invalid("theta", format!("level index {l} outside the filtration")));
        }
        let mut e = filt.cond_expectation(l, f);
        let d = f.dim();
        for x in 0..f.len() {
            let t = th.at(x);
            for c in 0..d {
                e.at_mut(x)[c] *= if td == 1 { t[0] } else { t[c] };
            }
        }
        out.push((l, e));
    }
    Ok(out)
}

pub fn abstract_paraproduct(
    filt: &Filtration,
    seq: &CarlesonSequence,
    f: &VectorField,
    p: f64,
    opts: &SignOptions,
) -> Result<ParaproductReport> {
    if !seq.is_adapted(filt, 1e-12) {
        return Err(Error::Measurability("theta is not adapted to the filtration".into()));
    }
    let parts = abstract_paraproduct_field(filt, seq, f)?;
    let terms: Vec<(usize, &[C64])> =
        parts.iter().filter(|(_, v)| v.max_abs() > 0.0).map(|(l, v)| (*l, v.values())).collect();
    let (m, exact) = sign_moments(f.space, f.len(), &terms, filt.num_levels(), p, opts.trials, opts.seed, false);
    let w = filt.weights();
    let last = &m[filt.num_levels() - 1];
    let pf_norm = (0..f.len()).map(|x| w[x] * last[x]).sum::<f64>().powf(1.0 / p);
    let car1 = carleson_norm(filt, seq, 1.0, &SignOptions { union_samples: 0, ..*opts })?.norm;
    let f_norm = f.lp_norm(w, p);
    let den = car1 * f_norm;
    let ratio = if den > 0.0 { pf_norm / den } else { 0.0 };
    Ok(ParaproductReport { pf_norm, car1, f_norm, ratio, exact: exact && car1 >= 0.0 })
}

/// `||h||_{BMO^p_lambda} = sup_Q ( mu(lambda Q)^{-1} int_Q |h - <h>_Q|^p dmu )^{1/p}`
/// over the given cubes; cubes whose dilate has no mass are skipped.
pub fn bmo_norm(m: &AtomicMeasure, h: &VectorField, p: f64, lambda: f64, cubes: &[Cube]) -> Result<f64> {
    if h.len() != m.len() {
        return Err(invalid("h", "length differs from the measure"));
    }
    if !(lambda >= 1.0) {
        return Err(invalid("lambda", "must be at least 1"));
    }
    let units: Vec<_> = (0..m.len()).map(|i| point_units(m.point(i))).collect();
    let d = h.dim();
    let v = cubes
        .par_iter()
        .map(|q| {
            let mut big = 0.0;
            let mut inside = Vec::new();
            let mut mass = 0.0;
            for (i, u) in units.iter().enumerate() {
                if q.dilate_contains(u, lambda) {
                    big += m.weight(i);
                }
                if q.contains_units(u) {
                    inside.push(i);
                    mass += m.weight(i);
                }
            }
            if big <= 0.0 || mass <= 0.0 {
                return 0.0;
            }
            let mut avg = vec![ZERO; d];
            for &i in &inside {
                for c in 0..d {
                    avg[c] += h.at(i)[c] * m.weight(i);
                }
            }
            avg.iter_mut().for_each(|a| *a /= mass);
            let mut diff = vec![ZERO; d];
            let s: f64 = inside
                .iter()
                .map(|&i| {
                    for c in 0..d {
                        diff[c] = h.at(i)[c] - avg[c];
                    }
                    m.weight(i) * h.space.norm(&diff).powf(p)
                })
                .sum();
            (s / big).powf(1.0 / p)
        })
        .reduce(|| 0.0, f64::max);
    Ok(v)
}

/// Cubes of every cell of a tree.
pub fn tree_cubes(tree: &Tree) -> Vec<Cube> {
    (0..tree.num_levels()).flat_map(|li| tree.cells(li).iter().map(|c| c.cube)).collect()
}

/// Cell data of a tree keyed by cube: mass, `int b`, `int g` (stride `dim`).
struct CellSums {
    map: HashMap<Cube, (f64, C64, Vec<C64>)>,
}

impl CellSums {
    fn new(tree: &Tree, g: &VectorField) -> Self {
        let d = g.dim();
        let pre = tree.prefix(g);
        let mut map = HashMap::new();
        for li in 0..tree.num_levels() {
            for c in tree.cells(li) {
                let ig = (0..d).map(|k| pre[c.end * d + k] - pre[c.start * d + k]).collect();
                map.insert(c.cube, (c.mass, c.b_integral, ig));
            }
        }
        CellSums { map }
    }

    /// `<g>_R / <b>_R`.
    fn ratio(&self, r: &Cube, floor: f64) -> Result<Option<Vec<C64>>> {
        let Some((mass, bi, ig)) = self.map.get(r) else { return Ok(None) };
        if *mass <= 0.0 {
            return Ok(None);
        }
        if bi.norm() < floor * mass {
            return Err(Error::AccretivityViolation { level: r.level, integral: bi.norm() / mass, floor });
        }
        Ok(Some(ig.iter().map(|v| v / bi).collect()))
    }
}

/// Inputs shared by the `Pi_2` routines. `tree_f` carries `b1` on the system
/// `D`, `tree_g` carries `b2` on `D'`.
pub struct Pi2Setup<'a> {
    pub t: &'a DiscreteOperator,
    pub b1: &'a AccretiveFn,
    pub b2: &'a AccretiveFn,
    pub tree_f: &'a Tree,
    pub tree_g: &'a Tree,
    pub dp: &'a DyadicSystem,
    pub r: u32,
}

impl Pi2Setup<'_> {
    /// `<T^t b2, b1 phi_Q>` for every Haar entry of `tree_f`.
    pub fn tstar_b2_coefficients(&self) -> Vec<C64> {
        let tb = self.t.apply_transpose(&VectorField::scalar(self.b2.values().to_vec()));
        let prod: Vec<C64> = tb.values().iter().zip(self.b1.values()).map(|(a, b)| a * b).collect();
        self.tree_f.coefficients(&VectorField::scalar(prod))
    }

    /// The cube `R` of `D'` with `l(R) = 2^r l(Q)` containing `Q`, if it lies in
    /// the window and contains `Q` entirely.
    fn parent_r(&self, q: &Cube) -> Option<Cube> {
        let k = q.level + self.r as i32;
        if k > self.tree_g.top_level() {
            return None;
        }
        let r = self.dp.cube_at_units(&q.corner, k);
        r.contains_cube(q).then_some(r)
    }
}

/// `Pi_2 g = sum_{R good} sum_{Q good, Q in R, l(Q) = 2^-r l(R)} <g>_R / <b2>_R
/// <T^t b2, b1 phi_Q> phi_Q`.
pub fn paraproduct_pi2(
    s: &Pi2Setup,
    g: &VectorField,
    good_q: &(dyn Fn(&Cube) -> bool + Sync),
    good_r: &(dyn Fn(&Cube) -> bool + Sync),
) -> Result<VectorField> {
    let d = g.dim();
    let sums = CellSums::new(s.tree_g, g);
    let floor = delta_floor(s.b2);
    let c = s.tstar_b2_coefficients();
    let mut coeffs = vec![ZERO; s.tree_f.haar().len() * d];
    for (k, h) in s.tree_f.haar().iter().enumerate() {
        if !h.cancellative() {
            continue;
        }
        let q = s.tree_f.haar_cube(h);
        if !good_q(&q) {
            continue;
        }
        let Some(r) = s.parent_r(&q) else { continue };
        if !good_r(&r) {
            continue;
        }
        let Some(avg) = sums.ratio(&r, floor)? else { continue };
        for j in 0..d {
            coeffs[k * d + j] = avg[j] * c[k];
        }
    }
    Ok(s.tree_f.combine(&coeffs, g.space, None))
}

#[derive(Clone, Debug, Serialize)]
pub struct TelescopeReport {
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

/// For each cancellative `Q` of `tree_f` below a cube `R0` of `D'` with
/// `l(R0) = 2^r l(Q)`, compares
/// `sum_{R ⊋ R0} <D_R^{b2} g / b2>_Q + <E_top^{b2} g / b2>_Q` (from the Haar
/// coefficients of `tree_g`) with `<g>_{R0} / <b2>_{R0}` (from atom sums).
pub fn pi2_telescoping_check(s: &Pi2Setup, g: &VectorField) -> Result<TelescopeReport> {
    let d = g.dim();
    let tg = s.tree_g;
    let sums = CellSums::new(tg, g);
    let floor = delta_floor(s.b2);
    let cg = tg.coefficients(g);
    let mut checked = 0;
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    for h in s.tree_f.haar() {
        if !h.cancellative() {
            continue;
        }
        let q = s.tree_f.haar_cube(h);
        let Some(r0) = s.parent_r(&q) else { continue };
        let Some(collapsed) = sums.ratio(&r0, floor)? else { continue };
        let cell_f = s.tree_f.cell(h.li, h.cell);
        let atom = s.tree_f.order()[cell_f.start];
        let pos = tg.pos_of(atom);
        let Some(li0) = tg.level_index(r0.level) else { continue };
        let mut full = vec![ZERO; d];
        let mut ci = tg.cell_at(li0, pos);
        let mut li = li0;
        while li > 0 {
            ci = tg.cell(li, ci).parent.expect("non-top cell has a parent");
            li -= 1;
            for k in tg.cell(li, ci).haar.clone() {
                let v = tg.haar()[k].value_at(pos);
                for j in 0..d {
                    full[j] += v * cg[k * d + j];
                }
            }
        }
        if li0 == 0 {
            // R0 is a top cube: only the E_top term, which is R0 itself.
            for k in tg.cell(0, tg.cell_at(0, pos)).haar.clone() {
                if !tg.haar()[k].cancellative() {
                    let v = tg.haar()[k].value_at(pos);
                    for j in 0..d {
                        full[j] += v * cg[k * d + j];
                    }
                }
            }
        }
        for j in 0..d {
            let e = (full[j] - collapsed[j]).norm();
            max_abs = max_abs.max(e);
            max_rel = max_rel.max(e / collapsed[j].norm().max(1e-300));
        }
        checked += 1;
    }
    Ok(TelescopeReport { checked, max_abs_err: max_abs, max_rel_err: max_rel })
}

#[derive(Clone, Debug, Serialize)]
pub struct Pi2Report {
    pub pi2_norm: f64,
    pub bmo: f64,
    pub g_norm: f64,
    /// `||Pi_2 g||_{p'} / (||T^t b2||_BMO ||g||_{p'})`.
    pub ratio: f64,
    pub nonzero_terms: usize,
}

/// `Pi_2 g` together with the bound's denominator. The BMO norm uses the cells
/// of both trees.
pub fn pi2_bound(
    s: &Pi2Setup,
    m: &AtomicMeasure,
    g: &VectorField,
    p_dual: f64,
    lambda: f64,
    good_q: &(dyn Fn(&Cube) -> bool + Sync),
    good_r: &(dyn Fn(&Cube) -> bool + Sync),
) -> Result<Pi2Report> {
    let pi = paraproduct_pi2(s, g, good_q, good_r)?;
    let tb = s.t.apply_transpose(&VectorField::scalar(s.b2.values().to_vec()));
    let mut cubes = tree_cubes(s.tree_f);
    cubes.extend(tree_cubes(s.tree_g));
    let bmo = bmo_norm(m, &tb, p_dual, lambda, &cubes)?;
    let pi2_norm = pi.lp_norm(m.weights(), p_dual);
    let g_norm = g.lp_norm(m.weights(), p_dual);
    let nonzero_terms = (0..pi.len()).filter(|&x| pi.at(x).iter().any(|v| v.norm() > 0.0)).count();
    let den = bmo * g_norm;
    Ok(Pi2Report { pi2_norm, bmo, g_norm, ratio: if den > 0.0 { pi2_norm / den } else { 0.0 }, nonzero_terms })
}

#[derive(Clone, Debug, Serialize)]
pub struct BmoHaarReport {
    pub lhs: f64,
    pub mass_r: f64,
    pub bmo: f64,
    /// `lhs / (mu(R)^{1/p} ||h||_BMO)`.
    pub ratio: f64,
    pub terms: usize,
    pub exact: bool,
}

/// `|| sum_{good Q in R, l(Q) <= 2^-r l(R)} eps_Q <h, b1 phi_Q> phi_Q ||_{L^p(P x mu)}`
/// against `mu(R)^{1/p} ||h||_{BMO^p_lambda}`, one independent sign per Haar function.
#[allow(clippy::too_many_arguments)]
pub fn bmo_haar_sum_test(
    m: &AtomicMeasure,
    tree: &Tree,
    b1: &AccretiveFn,
    h: &VectorField,
    r_cube: &Cube,
    p: f64,
    r: u32,
    lambda: f64,
    good_q: &(dyn Fn(&Cube) -> bool + Sync),
    opts: &SignOptions,
) -> Result<BmoHaarReport> {
    let d = h.dim();
    let coeffs = tree.coefficients(&h.mul_scalar_fn(b1.values()));
    let mut terms: Vec<VectorField> = Vec::new();
    for (k, e) in tree.haar().iter().enumerate() {
        if !e.cancellative() {
            continue;
        }
        let q = tree.haar_cube(e);
        if q.level > r_cube.level - r as i32 || !r_cube.contains_cube(&q) || !good_q(&q) {
            continue;
        }
        let mut c = vec![ZERO; tree.haar().len() * d];
        c[k * d..(k + 1) * d].copy_from_slice(&coeffs[k * d..(k + 1) * d]);
        let v = tree.combine(&c, h.space, None);
        if v.max_abs() > 0.0 {
            terms.push(v);
        }
    }
    let slots: Vec<(usize, &[C64])> = terms.iter().enumerate().map(|(i, v)| (i, v.values())).collect();
    let n_slots = terms.len().max(1);
    let (mo, exact) = sign_moments(h.space, h.len(), &slots, n_slots, p, opts.trials, opts.seed, false);
    let lhs = (0..h.len()).map(|x| m.weight(x) * mo[n_slots - 1][x]).sum::<f64>().powf(1.0 / p);
    let mass_r: f64 = (0..m.len())
        .filter(|&i| r_cube.contains_units(&point_units(m.point(i))))
        .map(|i| m.weight(i))
        .sum();
    let bmo = bmo_norm(m, h, p, lambda, &tree_cubes(tree))?;
    let den = mass_r.powf(1.0 / p) * bmo;
    Ok(BmoHaarReport { lhs, mass_r, bmo, ratio: if den > 0.0 { lhs / den } else { 0.0 }, terms: terms.len(), exact })
}
