//! Calderón–Zygmund kernels, truncated discrete operators on atomic measures,
//! matrix coefficients `T_RQ = <psi_R b2, T(b1 phi_Q)>` and the empirical decay
//! checks for separated, contained and close pairs of cubes.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dyadic::{point_units, Cube};
use crate::error::{invalid, Error, Result};
use crate::field::{VectorField, C64};
use crate::haar::HaarFunction;
use crate::measure::{AccretiveFn, AtomicMeasure};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// A kernel selected by name. All kernels here are scalar valued.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    /// `1 / (z - w)` with `z = x_0 + i x_1` (the second coordinate is zero on
    /// the line). `d = 1`, `alpha = 1`.
    Cauchy,
    /// `(x_c - y_c) / |x - y|^(d+1)`, an odd kernel of homogeneity `-d`.
    OddPower { d: f64, component: usize },
    /// `K = c` off the diagonal; for calibration only.
    Constant { c: f64, d: f64 },
    Zero { d: f64 },
}

impl KernelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            KernelSpec::Cauchy => "cauchy",
            KernelSpec::OddPower { .. } => "odd_power",
            KernelSpec::Constant { .. } => "constant",
            KernelSpec::Zero { .. } => "zero",
        }
    }

    pub fn d(&self) -> f64 {
        match self {
            KernelSpec::Cauchy => 1.0,
            KernelSpec::OddPower { d, .. } | KernelSpec::Constant { d, .. } | KernelSpec::Zero { d } => *d,
        }
    }

    pub fn alpha(&self) -> f64 {
        1.0
    }

    /// `K(y, x) = -K(x, y)`.
    pub fn antisymmetric(&self) -> bool {
        matches!(self, KernelSpec::Cauchy | KernelSpec::OddPower { .. } | KernelSpec::Zero { .. })
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            KernelSpec::Cauchy if dim > 2 => Err(invalid("kernel", "the Cauchy kernel needs dimension 1 or 2")),
            KernelSpec::OddPower { d, component } => {
                if !(*d > 0.0) {
                    return Err(invalid("kernel.d", "must be positive"));
                }
                if *component >= dim {
                    return Err(invalid("kernel.component", format!("must be below the dimension {dim}")));
                }
                Ok(())
            }
            KernelSpec::Constant { c, d } => {
                if !c.is_finite() || !(*d > 0.0) {
                    return Err(invalid("kernel", "constant kernel needs finite c and positive d"));
                }
                Ok(())
            }
            KernelSpec::Zero { d } if !(*d > 0.0) => Err(invalid("kernel.d", "must be positive")),
            _ => Ok(()),
        }
    }

    /// `K(x, y)` for `x != y`.
    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64]) -> C64 {
        match self {
            KernelSpec::Cauchy => {
                let dx = x[0] - y[0];
                let dy = if x.len() > 1 { x[1] - y[1] } else { 0.0 };
                C64::new(dx, dy).inv()
            }
            KernelSpec::OddPower { d, component } => {
                let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                let r = r2.sqrt();
                C64::new((x[*component] - y[*component]) / r.powf(d + 1.0), 0.0)
            }
            KernelSpec::Constant { c, .. } => C64::new(*c, 0.0),
            KernelSpec::Zero { .. } => ZERO,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CzkReport {
    /// `sup |K(x,y)| |x-y|^d`.
    pub worst_size_ratio: f64,
    /// Larger of the two one-variable quotients
    /// `|K(x,y) - K(x',y)| |x-y|^(d+alpha) / |x-x'|^alpha` and its transpose.
    pub worst_holder_ratio: f64,
    /// The same with the two differences added, as in the combined smoothness
    /// condition.
    pub worst_holder_sum_ratio: f64,
    pub samples: usize,
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Samples configurations with `|x - y| > 2 |x - x'|` over many scales.
pub fn czk_check<R: Rng + ?Sized>(k: &KernelSpec, dim: usize, n_samples: usize, rng: &mut R) -> Result<CzkReport> {
    if dim == 0 || dim > crate::dyadic::MAX_DIM {
        return Err(invalid("dim", "unsupported dimension"));
    }
    k.validate(dim)?;
    let (d, alpha) = (k.d(), k.alpha());
    let mut rep = CzkReport { worst_size_ratio: 0.0, worst_holder_ratio: 0.0, worst_holder_sum_ratio: 0.0, samples: 0 };
    let mut x = vec![0.0; dim];
    let mut y = vec![0.0; dim];
    let mut xp = vec![0.0; dim];
    while rep.samples < n_samples {
        let scale = 2f64.powf(rng.gen_range(-12.0..12.0));
        for c in 0..dim {
            x[c] = rng.gen_range(-1.0..1.0) * scale;
            y[c] = rng.gen_range(-1.0..1.0) * scale;
        }
        let r = l2(&x, &y);
        if r == 0.0 {
            continue;
        }
        let mut dir: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            continue;
        }
        let h = r * rng.gen_range(1e-6..0.4999);
        for c in 0..dim {
            dir[c] /= n;
            xp[c] = x[c] + h * dir[c];
        }
        let h = l2(&x, &xp);
        if !(r > 2.0 * h) || h == 0.0 {
            continue;
        }
        rep.samples += 1;
        rep.worst_size_ratio = rep.worst_size_ratio.max(k.eval(&x, &y).norm() * r.powf(d));
        let scale = r.powf(d + alpha) / h.powf(alpha);
        let a = (k.eval(&x, &y) - k.eval(&xp, &y)).norm();
        let b = (k.eval(&y, &x) - k.eval(&y, &xp)).norm();
        rep.worst_holder_ratio = rep.worst_holder_ratio.max(a.max(b) * scale);
        rep.worst_holder_sum_ratio = rep.worst_holder_sum_ratio.max((a + b) * scale);
    }
    Ok(rep)
}

/// `T` truncated to pairs with `|x_i - x_j| >= eps`, acting on functions on the
/// atoms of a measure.
#[derive(Clone, Debug)]
pub struct DiscreteOperator {
    pub kernel: KernelSpec,
    measure: AtomicMeasure,
    eps: f64,
}

impl DiscreteOperator {
    /// `eps` defaults to half the minimal atom separation.
    pub fn new(kernel: KernelSpec, measure: AtomicMeasure, eps: Option<f64>) -> Result<Self> {
        kernel.validate(measure.dim())?;
        let eps = match eps {
            Some(e) if e > 0.0 && e.is_finite() => e,
            Some(_) => return Err(invalid("truncation_eps", "must be positive and finite")),
            None => {
                let s = measure.min_separation();
                if s.is_finite() && s > 0.0 {
                    s / 2.0
                } else {
                    1.0
                }
            }
        };
        Ok(DiscreteOperator { kernel, measure, eps })
    }

    pub fn measure(&self) -> &AtomicMeasure {
        &self.measure
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Whether no pair of distinct atoms is truncated away.
    pub fn is_maximal(&self) -> bool {
        self.eps <= self.measure.min_separation()
    }

    /// `K(x_i, x_j)` or zero inside the truncation.
    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> C64 {
        if i == j {
            return ZERO;
        }
        let (x, y) = (self.measure.point(i), self.measure.point(j));
        if l2(x, y) < self.eps {
            ZERO
        } else {
            self.kernel.eval(x, y)
        }
    }

    pub fn len(&self) -> usize {
        self.measure.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measure.is_empty()
    }

    /// `(T h)(x_i)` for a scalar `h` supported on `support` (all atoms when
    /// `None`).
    pub fn apply_scalar(&self, h: &[C64], support: Option<&[usize]>) -> Vec<C64> {
        let all: Vec<usize>;
        let supp = match support {
            Some(s) => s,
            None => {
                all = (0..self.len()).filter(|&j| h[j] != ZERO).collect();
                &all
            }
        };
        let wh: Vec<(usize, C64)> = supp.iter().map(|&j| (j, h[j] * self.measure.weight(j))).collect();
        (0..self.len())
            .into_par_iter()
            .map(|i| wh.iter().fold(ZERO, |s, &(j, v)| s + self.entry(i, j) * v))
            .collect()
    }

    fn apply_with(&self, f: &VectorField, entry: impl Fn(usize, usize) -> C64 + Sync) -> VectorField {
        let d = f.dim();
        let n = self.len();
        let rows: Vec<Vec<C64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut acc = vec![ZERO; d];
                for j in 0..n {
                    let k = entry(i, j);
                    if k == ZERO {
                        continue;
                    }
                    let kw = k * self.measure.weight(j);
                    for (a, v) in acc.iter_mut().zip(f.at(j)) {
                        *a += kw * v;
                    }
                }
                acc
            })
            .collect();
        let mut out = VectorField::zeros(n, f.space);
        for (i, r) in rows.into_iter().enumerate() {
            out.at_mut(i).copy_from_slice(&r);
        }
        out
    }

    /// `(Tf)(x_i) = sum_{j : |x_i - x_j| >= eps} w_j K(x_i, x_j) f(x_j)`,
    /// componentwise.
    pub fn apply(&self, f: &VectorField) -> VectorField {
        self.apply_with(f, |i, j| self.entry(i, j))
    }

    /// The transpose for the bilinear pairing: kernel `K(y, x)`.
    pub fn apply_transpose(&self, g: &VectorField) -> VectorField {
        self.apply_with(g, |i, j| self.entry(j, i))
    }

    /// The adjoint for the sesquilinear pairing: kernel `conj K(y, x)`.
    pub fn apply_adjoint(&self, g: &VectorField) -> VectorField {
        self.apply_with(g, |i, j| self.entry(j, i).conj())
    }

    /// Dense matrix `K(x_i, x_j) sqrt(w_i w_j)`, whose spectral norm is the
    /// `L^2(mu)` operator norm.
    pub fn weighted_matrix(&self) -> nalgebra::DMatrix<C64> {
        let n = self.len();
        nalgebra::DMatrix::from_fn(n, n, |i, j| {
            self.entry(i, j) * (self.measure.weight(i) * self.measure.weight(j)).sqrt()
        })
    }
}

fn support(phi: &HaarFunction) -> Vec<usize> {
    (0..phi.values.len()).filter(|&i| phi.values[i] != ZERO).collect()
}

/// `<psi b2, T(b1 phi)>` (bilinear) by the double sum over the two supports.
pub fn matrix_coeff(t: &DiscreteOperator, psi: &HaarFunction, phi: &HaarFunction, b1: &AccretiveFn, b2: &AccretiveFn) -> C64 {
    let m = t.measure();
    let sp = support(psi);
    let sq = support(phi);
    sp.par_iter()
        .map(|&i| {
            let left = psi.values[i] * b2.value(i) * m.weight(i);
            let inner = sq
                .iter()
                .fold(ZERO, |s, &j| s + t.entry(i, j) * b1.value(j) * phi.values[j] * m.weight(j));
            left * inner
        })
        .reduce(|| ZERO, |a, b| a + b)
}

/// `<1_A b2, T(b1 1_B)>` for atom sets `A`, `B`.
pub fn block_coeff(t: &DiscreteOperator, a: &[usize], b: &[usize], b1: &AccretiveFn, b2: &AccretiveFn) -> C64 {
    let m = t.measure();
    a.par_iter()
        .map(|&i| {
            let inner = b.iter().fold(ZERO, |s, &j| s + t.entry(i, j) * b1.value(j) * m.weight(j));
            b2.value(i) * m.weight(i) * inner
        })
        .reduce(|| ZERO, |x, y| x + y)
}

/// `<1_A b2, T(b1 1_A)>` summed pair by pair, so that an antisymmetric kernel
/// with `b1 = b2 = 1` gives exactly zero.
pub fn diagonal_block_coeff(t: &DiscreteOperator, a: &[usize], b1: &AccretiveFn, b2: &AccretiveFn) -> C64 {
    let m = t.measure();
    (0..a.len())
        .into_par_iter()
        .map(|p| {
            let i = a[p];
            let mut s = ZERO;
            for &j in &a[p + 1..] {
                let w = m.weight(i) * m.weight(j);
                s += (b2.value(i) * t.entry(i, j) * b1.value(j) + b2.value(j) * t.entry(j, i) * b1.value(i)) * w;
            }
            s
        })
        .reduce(|| ZERO, |x, y| x + y)
}

fn l1(phi: &HaarFunction, m: &AtomicMeasure) -> f64 {
    phi.values.iter().enumerate().map(|(i, v)| v.norm() * m.weight(i)).sum()
}

fn linf(phi: &HaarFunction) -> f64 {
    phi.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
}

/// Why a pair was left out of a decay report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairFlag {
    Ok,
    /// The geometric hypothesis of the estimate fails.
    Hypothesis,
    /// The estimate needs a good `Q`.
    BadQ,
    /// `Q` is not inside a single child of `R`.
    Straddles,
}

/// A pair `(psi_R, phi_Q)` with the goodness of `Q` attached.
#[derive(Clone, Copy, Debug)]
pub struct CoeffPair<'a> {
    pub psi: &'a HaarFunction,
    pub phi: &'a HaarFunction,
    pub q_good: bool,
}

/// `n = log2(l(R)/l(Q))` and `j` with `2^j < D(Q,R)/l(R) <= 2^(j+1)`.
pub fn scale_indices(q: &Cube, r: &Cube) -> (i32, u32) {
    let g = crate::dyadic::geometry(q, r);
    let t = g.long_distance / r.side();
    let j = (t.log2() - 1e-12).ceil() as i64 - 1;
    (r.level - q.level, j.max(0) as u32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparatedRow {
    pub q_level: i32,
    pub r_level: i32,
    pub n: i32,
    pub j: u32,
    pub dist: f64,
    pub long_distance: f64,
    pub coeff_abs: f64,
    pub psi_l1: f64,
    pub phi_l1: f64,
    /// `l(Q)^alpha / dist^(d+alpha) ||psi||_1 ||phi||_1`.
    pub rhs_near: f64,
    /// `l(Q)^(alpha/2) l(R)^(alpha/2) / D^(d+alpha) ||psi||_1 ||phi||_1`.
    pub rhs_long: f64,
    pub ratio_near: f64,
    /// Only for good `Q`.
    pub ratio_long: Option<f64>,
    pub flag: PairFlag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparatedReport {
    pub rows: Vec<SeparatedRow>,
    pub sup_ratio_near: f64,
    pub sup_ratio_long: f64,
    pub skipped: usize,
    /// Least-squares slope of `ln max |T_RQ|` per `(n, j)` cell against `n + j`.
    pub slope_nj: Option<f64>,
    /// Slope against `n` at the `j` with the most cells, and that `j`.
    pub slope_n: Option<(u32, f64)>,
}

/// Per-cell maxima of `|T_RQ|` keyed by `(n, j)`.
pub fn cell_maxima(rows: impl IntoIterator<Item = (i32, u32, f64)>) -> Vec<((i32, u32), f64)> {
    let mut cells: HashMap<(i32, u32), f64> = HashMap::new();
    for (n, j, v) in rows {
        let e = cells.entry((n, j)).or_insert(0.0);
        *e = e.max(v);
    }
    let mut v: Vec<_> = cells.into_iter().collect();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}

/// Slopes of `ln max` against `n + j` over all cells, and against `n` at the
/// most populated `j`. Cells whose maximum is zero are left out.
pub fn decay_slopes(cells: &[((i32, u32), f64)]) -> (Option<f64>, Option<(u32, f64)>) {
    let live: Vec<_> = cells.iter().filter(|c| c.1 > 0.0).collect();
    let x: Vec<f64> = live.iter().map(|c| (c.0 .0 + c.0 .1 as i32) as f64).collect();
    let y: Vec<f64> = live.iter().map(|c| c.1.ln()).collect();
    let nj = crate::stats::linear_fit(&x, &y).map(|f| f.0);
    let mut per_j: HashMap<u32, Vec<(f64, f64)>> = HashMap::new();
    for c in &live {
        per_j.entry(c.0 .1).or_default().push((c.0 .0 as f64, c.1.ln()));
    }
    let best = per_j
        .iter()
        .filter(|(_, v)| v.len() >= 2)
        .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(a.0)))
        .and_then(|(j, v)| {
            let (x, y): (Vec<f64>, Vec<f64>) = v.iter().cloned().unzip();
            crate::stats::linear_fit(&x, &y).map(|f| (*j, f.0))
        });
    (nj, best)
}

/// Checks `|T_RQ|` on pairs with `l(Q) <= l(R)` and `l(Q) <= dist(Q, R)`
/// against the near and long-distance bounds.
pub fn decay_separated(
    t: &DiscreteOperator,
    pairs: &[CoeffPair<'_>],
    b1: &AccretiveFn,
    b2: &AccretiveFn,
) -> SeparatedReport {
    let m = t.measure();
    let (d, alpha) = (t.kernel.d(), t.kernel.alpha());
    let rows: Vec<SeparatedRow> = pairs
        .par_iter()
        .map(|p| {
            let (q, r) = (p.phi.cube, p.psi.cube);
            let g = crate::dyadic::geometry(&q, &r);
            let (n, j) = scale_indices(&q, &r);
            let ok = q.side() <= r.side() && q.side() <= g.dist;
            let mut row = SeparatedRow {
                q_level: q.level,
                r_level: r.level,
                n,
                j,
                dist: g.dist,
                long_distance: g.long_distance,
                coeff_abs: 0.0,
                psi_l1: l1(p.psi, m),
                phi_l1: l1(p.phi, m),
                rhs_near: 0.0,
                rhs_long: 0.0,
                ratio_near: 0.0,
                ratio_long: None,
                flag: if ok { PairFlag::Ok } else { PairFlag::Hypothesis },
            };
            if !ok {
                return row;
            }
            let c = matrix_coeff(t, p.psi, p.phi, b1, b2).norm();
            let norms = row.psi_l1 * row.phi_l1;
            row.coeff_abs = c;
            row.rhs_near = q.side().powf(alpha) / g.dist.powf(d + alpha) * norms;
            row.rhs_long = (q.side() * r.side()).powf(alpha / 2.0) / g.long_distance.powf(d + alpha) * norms;
            row.ratio_near = ratio(c, row.rhs_near);
            if p.q_good {
                row.ratio_long = Some(ratio(c, row.rhs_long));
            } else {
                row.flag = PairFlag::BadQ;
            }
            row
        })
        .collect();
    let used = rows.iter().filter(|r| r.flag != PairFlag::Hypothesis);
    let sup_ratio_near = used.clone().map(|r| r.ratio_near).fold(0.0, f64::max);
    let sup_ratio_long = used.clone().filter_map(|r| r.ratio_long).fold(0.0, f64::max);
    let cells = cell_maxima(used.filter(|r| r.ratio_long.is_some()).map(|r| (r.n, r.j, r.coeff_abs)));
    let (slope_nj, slope_n) = decay_slopes(&cells);
    let skipped = rows.iter().filter(|r| r.flag == PairFlag::Hypothesis).count();
    SeparatedReport { rows, sup_ratio_near, sup_ratio_long, skipped, slope_nj, slope_n }
}

fn ratio(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a / b
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainedRow {
    pub q_level: i32,
    pub r_level: i32,
    pub n: i32,
    pub coeff: C64,
    /// `<b2, T(b1 phi_Q)> <psi_R>_Q`.
    pub correction: C64,
    /// `T_RQ - correction`.
    pub corrected: C64,
    /// The same quantity from the split over the children of `R`.
    pub split: C64,
    pub split_rel_err: f64,
    /// `(l(Q)/l(R))^(alpha/2) (|<psi_R>_S| + ||psi_R||_1/mu(R)) ||phi_Q||_1`.
    pub rhs: f64,
    pub ratio: f64,
    /// `sup |psi_R(x) T~ phi_Q(y)|` over the profile
    /// `(l(Q)/l(R))^(alpha/2) (1_{R\S}/mu(R) + 1_S/mu(S))`.
    pub pointwise_ratio: f64,
    pub flag: PairFlag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainedReport {
    pub rows: Vec<ContainedRow>,
    pub sup_ratio: f64,
    pub sup_pointwise_ratio: f64,
    pub max_split_rel_err: f64,
    pub skipped: usize,
}

/// Corrected coefficients for good `Q` inside `R` with `l(Q) < 2^-r l(R)`.
pub fn decay_contained(
    t: &DiscreteOperator,
    pairs: &[CoeffPair<'_>],
    b1: &AccretiveFn,
    b2: &AccretiveFn,
    r: u32,
) -> ContainedReport {
    let m = t.measure();
    let alpha = t.kernel.alpha();
    let units: Vec<_> = (0..m.len()).map(|i| point_units(m.point(i))).collect();
    let rows: Vec<ContainedRow> = pairs
        .par_iter()
        .map(|p| {
            let (q, rc) = (p.phi.cube, p.psi.cube);
            let n = rc.level - q.level;
            let mut row = ContainedRow {
                q_level: q.level,
                r_level: rc.level,
                n,
                coeff: ZERO,
                correction: ZERO,
                corrected: ZERO,
                split: ZERO,
                split_rel_err: 0.0,
                rhs: 0.0,
                ratio: 0.0,
                pointwise_ratio: 0.0,
                flag: PairFlag::Ok,
            };
            if !(rc.contains_cube(&q) && n > r as i32) {
                row.flag = PairFlag::Hypothesis;
                return row;
            }
            let q_atoms: Vec<usize> = (0..m.len()).filter(|&i| q.contains_units(&units[i])).collect();
            let r_atoms: Vec<usize> = (0..m.len()).filter(|&i| rc.contains_units(&units[i])).collect();
            let child_of = |i: usize| rc.child_index(&units[i]);
            let s = match q_atoms.first() {
                Some(&i) => child_of(i),
                None => {
                    row.flag = PairFlag::Hypothesis;
                    return row;
                }
            };
            if q_atoms.iter().any(|&i| child_of(i) != s) {
                row.flag = PairFlag::Straddles;
                return row;
            }
            // T(b1 phi_Q) on every atom.
            let h: Vec<C64> = (0..m.len()).map(|j| b1.value(j) * p.phi.values[j]).collect();
            let supp = support(p.phi);
            let v = t.apply_scalar(&h, Some(&supp));
            let global: C64 = (0..m.len()).map(|i| b2.value(i) * v[i] * m.weight(i)).sum();
            let mq: f64 = q_atoms.iter().map(|&i| m.weight(i)).sum();
            let avg_q: C64 = if mq > 0.0 {
                q_atoms.iter().map(|&i| p.psi.values[i] * m.weight(i)).sum::<C64>() / mq
            } else {
                ZERO
            };
            let coeff: C64 = r_atoms.iter().map(|&i| p.psi.values[i] * b2.value(i) * v[i] * m.weight(i)).sum();
            let correction = global * avg_q;
            let corrected = coeff - correction;

            // Split: -<psi>_S <1_{S^c} b2, T(b1 phi)> + sum over the other children.
            let in_s = |i: usize| rc.contains_units(&units[i]) && child_of(i) == s;
            let ms: f64 = r_atoms.iter().filter(|&&i| in_s(i)).map(|&i| m.weight(i)).sum();
            let avg_s: C64 = if ms > 0.0 {
                r_atoms.iter().filter(|&&i| in_s(i)).map(|&i| p.psi.values[i] * m.weight(i)).sum::<C64>() / ms
            } else {
                ZERO
            };
            let outside_s: C64 = (0..m.len()).filter(|&i| !in_s(i)).map(|i| b2.value(i) * v[i] * m.weight(i)).sum();
            let others: C64 = r_atoms
                .iter()
                .filter(|&&i| !in_s(i))
                .map(|&i| p.psi.values[i] * b2.value(i) * v[i] * m.weight(i))
                .sum();
            let split = -avg_s * outside_s + others;
            let scale = corrected.norm().max(coeff.norm()).max(correction.norm()).max(f64::MIN_POSITIVE);

            let mr: f64 = r_atoms.iter().map(|&i| m.weight(i)).sum();
            let psi_l1 = l1(p.psi, m);
            let phi_l1 = l1(p.phi, m);
            let gap = (q.side() / rc.side()).powf(alpha / 2.0);
            let rhs = gap * (avg_s.norm() + if mr > 0.0 { psi_l1 / mr } else { 0.0 }) * phi_l1;
            let phi_sup = linf(p.phi);
            let mut pw: f64 = 0.0;
            for &i in &r_atoms {
                let prof = if in_s(i) { 1.0 / ms } else { 1.0 / mr };
                pw = pw.max(p.psi.values[i].norm() * corrected.norm() * phi_sup / (gap * prof));
            }
            row.coeff = coeff;
            row.correction = correction;
            row.corrected = corrected;
            row.split = split;
            row.split_rel_err = (split - corrected).norm() / scale;
            row.rhs = rhs;
            row.ratio = ratio(corrected.norm(), rhs);
            row.pointwise_ratio = pw;
            if !p.q_good {
                row.flag = PairFlag::BadQ;
            }
            row
        })
        .collect();
    let ok = rows.iter().filter(|r| r.flag == PairFlag::Ok);
    ContainedReport {
        sup_ratio: ok.clone().map(|r| r.ratio).fold(0.0, f64::max),
        sup_pointwise_ratio: ok.clone().map(|r| r.pointwise_ratio).fold(0.0, f64::max),
        max_split_rel_err: rows
            .iter()
            .filter(|r| matches!(r.flag, PairFlag::Ok | PairFlag::BadQ))
            .map(|r| r.split_rel_err)
            .fold(0.0, f64::max),
        skipped: rows.iter().filter(|r| r.flag != PairFlag::Ok).count(),
        rows,
    }
}

/// The five pieces of `<1_R b2, T(b1 1_Q)>` for a close pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloseSplit {
    /// `<1_{R_sep} b2, T(b1 1_Q)>`.
    pub r_sep: C64,
    /// `<1_{R_bdry} b2, T(b1 1_Q)>`.
    pub r_bdry: C64,
    /// `<1_D b2, T(b1 1_D)>` with `D = Q cap R`.
    pub delta: C64,
    /// `<1_D b2, T(b1 1_{Q_bdry})>`.
    pub q_bdry: C64,
    /// `<1_D b2, T(b1 1_{Q_sep})>`.
    pub q_sep: C64,
    pub direct: C64,
    pub rel_err: f64,
    pub delta_mass: f64,
    /// `delta / mu(D)`, zero when `D` carries no mass.
    pub t_delta: f64,
    /// `|r_sep| dist(R_sep, Q)^d / (mu(R_sep) mu(Q))`.
    pub r_sep_ratio: f64,
    /// `|q_sep| dist(Q_sep, D)^d / (mu(Q_sep) mu(D))`.
    pub q_sep_ratio: f64,
}

impl CloseSplit {
    pub fn terms(&self) -> [C64; 5] {
        [self.r_sep, self.r_bdry, self.delta, self.q_bdry, self.q_sep]
    }

    pub fn sum(&self) -> C64 {
        self.terms().iter().sum()
    }
}

fn set_dist(m: &AtomicMeasure, a: &[usize], b: &[usize]) -> f64 {
    let mut best = f64::INFINITY;
    for &i in a {
        for &j in b {
            best = best.min(m.dist(i, j));
        }
    }
    best
}

fn mass(m: &AtomicMeasure, a: &[usize]) -> f64 {
    a.iter().map(|&i| m.weight(i)).sum()
}

/// Splits the coefficient over `D = Q cap R`, the separated parts and the
/// boundary parts `(Q minus D) cap delta_R` and `(R minus D) cap delta_Q`.
pub fn close_split(
    t: &DiscreteOperator,
    q: &Cube,
    r: &Cube,
    b1: &AccretiveFn,
    b2: &AccretiveFn,
    eta: f64,
) -> Result<CloseSplit> {
    if !(eta > 0.0 && eta < 0.25) {
        return Err(invalid("eta", "must lie in (0, 1/4)"));
    }
    if q.dim() != r.dim() || q.dim() != t.measure().dim() {
        return Err(invalid("cubes", "dimension mismatch"));
    }
    let m = t.measure();
    let units: Vec<_> = (0..m.len()).map(|i| point_units(m.point(i))).collect();
    let (mut qa, mut ra) = (Vec::new(), Vec::new());
    let (mut dl, mut q_sep, mut q_bd, mut r_sep, mut r_bd) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, u) in units.iter().enumerate() {
        let (iq, ir) = (q.contains_units(u), r.contains_units(u));
        if iq {
            qa.push(i);
        }
        if ir {
            ra.push(i);
        }
        match (iq, ir) {
            (true, true) => dl.push(i),
            (true, false) if r.in_boundary_region(u, eta) => q_bd.push(i),
            (true, false) => q_sep.push(i),
            (false, true) if q.in_boundary_region(u, eta) => r_bd.push(i),
            (false, true) => r_sep.push(i),
            _ => {}
        }
    }
    let c = |a: &[usize], b: &[usize]| if a.is_empty() || b.is_empty() { ZERO } else { block_coeff(t, a, b, b1, b2) };
    let direct = c(&ra, &qa);
    let mut out = CloseSplit {
        r_sep: c(&r_sep, &qa),
        r_bdry: c(&r_bd, &qa),
        delta: c(&dl, &dl),
        q_bdry: c(&dl, &q_bd),
        q_sep: c(&dl, &q_sep),
        direct,
        rel_err: 0.0,
        delta_mass: mass(m, &dl),
        t_delta: 0.0,
        r_sep_ratio: 0.0,
        q_sep_ratio: 0.0,
    };
    let scale = out.terms().iter().map(|z| z.norm()).fold(direct.norm(), f64::max).max(f64::MIN_POSITIVE);
    out.rel_err = (out.sum() - direct).norm() / scale;
    if out.delta_mass > 0.0 {
        out.t_delta = out.delta.norm() / out.delta_mass;
    }
    let d = t.kernel.d();
    if out.r_sep != ZERO {
        out.r_sep_ratio = out.r_sep.norm() * set_dist(m, &r_sep, &qa).powf(d) / (mass(m, &r_sep) * mass(m, &qa));
    }
    if out.q_sep != ZERO {
        out.q_sep_ratio = out.q_sep.norm() * set_dist(m, &q_sep, &dl).powf(d) / (mass(m, &q_sep) * mass(m, &dl));
    }
    Ok(out)
}

/// An axis-parallel half-open box `[lo, hi)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Rect {
    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *v >= *a && *v < *b)
    }

    pub fn from_cube(q: &Cube) -> Rect {
        Rect { lo: (0..q.dim()).map(|c| q.lower(c)).collect(), hi: (0..q.dim()).map(|c| q.upper(c)).collect() }
    }
}

/// Boxes with corners drawn uniformly in the bounding box of the atoms.
pub fn random_rects<R: Rng + ?Sized>(m: &AtomicMeasure, count: usize, rng: &mut R) -> Vec<Rect> {
    let dim = m.dim();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for i in 0..m.len() {
        for c in 0..dim {
            lo[c] = lo[c].min(m.point(i)[c]);
            hi[c] = hi[c].max(m.point(i)[c]);
        }
    }
    (0..count)
        .map(|_| {
            let mut a = vec![0.0; dim];
            let mut b = vec![0.0; dim];
            for c in 0..dim {
                let span = (hi[c] - lo[c]).max(1e-9);
                let x = lo[c] + rng.gen::<f64>() * span;
                let y = lo[c] + rng.gen::<f64>() * span;
                a[c] = x.min(y);
                b[c] = x.max(y) + span * 1e-9;
            }
            Rect { lo: a, hi: b }
        })
        .collect()
}

/// `sup |<1_E b2, T(b1 1_E)>| / mu(E)` over the boxes that carry mass.
pub fn weak_boundedness_check(t: &DiscreteOperator, b1: &AccretiveFn, b2: &AccretiveFn, rects: &[Rect]) -> Result<f64> {
    let m = t.measure();
    if b1.len() != m.len() || b2.len() != m.len() {
        return Err(Error::Precondition("b1, b2 must live on the operator's atoms".into()));
    }
    let mut best: f64 = 0.0;
    for e in rects {
        if e.lo.len() != m.dim() || e.hi.len() != m.dim() {
            return Err(invalid("rectangle", "dimension mismatch"));
        }
        let atoms: Vec<usize> = (0..m.len()).filter(|&i| e.contains(m.point(i))).collect();
        let mu = mass(m, &atoms);
        if mu <= 0.0 {
            continue;
        }
        best = best.max(diagonal_block_coeff(t, &atoms, b1, b2).norm() / mu);
    }
    Ok(best)
}
