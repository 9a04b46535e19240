//! End-to-end expansion of `<g, Tf>` in the two adapted Haar bases, regime
//! classification of cube pairs, per-regime accounting, good/bad splits and
//! operator-norm estimates.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::Serialize;

use crate::carleson::sign_moments;
use crate::config::{at, ExperimentConfig};
use crate::dyadic::{geometry, Cube, GoodnessParams, RandomSystems, MAX_LEVEL, MIN_LEVEL};
use crate::error::{Error, Result};
use crate::field::{dot, pair, NormSpace, VectorField, C64};
use crate::haar::{auto_top_level, Tree};
use crate::kernel::{cell_maxima, close_split, decay_slopes, DiscreteOperator};
use crate::measure::{build_accretive, build_measure, AccretiveFn, AtomicMeasure};
use crate::rng;
use crate::stats::{mean_stderr, rel_diff};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Regime of a pair `(Q, R)` with `Q` from `D` and `R` from `D'`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tag {
    Separated,
    Contained,
    Close,
    TransposedSeparated,
    TransposedContained,
    /// Deep pairs within distance `l(Q)` of each other but not nested. Only
    /// possible when the smaller cube is bad.
    Straddling,
    TransposedStraddling,
}

impl Tag {
    pub const ALL: [Tag; 7] = [
        Tag::Separated,
        Tag::Contained,
        Tag::Close,
        Tag::TransposedSeparated,
        Tag::TransposedContained,
        Tag::Straddling,
        Tag::TransposedStraddling,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Tag::Separated => "separated",
            Tag::Contained => "contained",
            Tag::Close => "close",
            Tag::TransposedSeparated => "transposed-separated",
            Tag::TransposedContained => "transposed-contained",
            Tag::Straddling => "straddling",
            Tag::TransposedStraddling => "transposed-straddling",
        }
    }

    pub fn is_separated(&self) -> bool {
        matches!(self, Tag::Separated | Tag::TransposedSeparated)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct PairClass {
    pub tag: Tag,
    /// Level gap `|log2(l(R)/l(Q))|`.
    pub n: u32,
    /// `2^j < D(Q,R) / max(l(Q), l(R)) <= 2^(j+1)`, floored at 0.
    pub j: u32,
}

/// Classifies `(Q, R)`. `*_canc` tells whether the Haar function on the cube
/// is cancellative; a non-cancellative smaller function (only at the top
/// level) makes the pair close.
pub fn classify_pair(q: &Cube, q_canc: bool, r: &Cube, r_canc: bool, r_param: u32) -> PairClass {
    let g = geometry(q, r);
    let (small, big, small_canc, transposed) =
        if q.level <= r.level { (q, r, q_canc, false) } else { (r, q, r_canc, true) };
    let n = (big.level - small.level) as u32;
    let t = g.long_distance / big.side();
    let j = ((t.log2() - 1e-12).ceil() as i64 - 1).max(0) as u32;
    let tag = if !small_canc {
        Tag::Close
    } else if small.side() <= g.dist {
        if transposed {
            Tag::TransposedSeparated
        } else {
            Tag::Separated
        }
    } else if n > r_param && big.contains_cube(small) {
        if transposed {
            Tag::TransposedContained
        } else {
            Tag::Contained
        }
    } else if n <= r_param {
        Tag::Close
    } else if transposed {
        Tag::TransposedStraddling
    } else {
        Tag::Straddling
    };
    PairClass { tag, n, j }
}

/// Everything one experiment needs: measure, accretive functions, operator,
/// random systems, both trees and the goodness of every Haar cube.
pub struct Context {
    pub params: GoodnessParams,
    pub m: AtomicMeasure,
    pub b1: AccretiveFn,
    pub b2: AccretiveFn,
    pub op: DiscreteOperator,
    pub sys: RandomSystems,
    pub tf: Tree,
    pub tg: Tree,
    pub good_f: Vec<bool>,
    pub good_g: Vec<bool>,
    pub space: NormSpace,
}

impl Context {
    pub fn build(cfg: &ExperimentConfig) -> Result<Context> {
        cfg.validate()?;
        let params = cfg.goodness_params()?;
        let m = build_measure(&cfg.measure).map_err(|e| at("measure", e))?;
        let b1 = build_accretive(&cfg.b1, &m).map_err(|e| at("b1", e))?;
        let b2 = build_accretive(&cfg.b2, &m).map_err(|e| at("b2", e))?;
        if let Some(eps) = cfg.truncation_eps {
            if m.len() > 1 && eps >= m.min_separation() {
                return Err(Error::Config {
                    path: "truncation_eps".into(),
                    message: format!("{eps} is not below the atom separation {}", m.min_separation()),
                });
            }
        }
        let op = DiscreteOperator::new(cfg.kernel.clone(), m.clone(), cfg.truncation_eps).map_err(|e| at("kernel", e))?;
        let auto = auto_top_level(&m);
        let top = cfg.window.top.unwrap_or(auto);
        if top < auto {
            return Err(Error::Config {
                path: "window.top".into(),
                message: format!("{top} is below the level {auto} needed to cover the measure"),
            });
        }
        let k_hi = top + params.max_excess as i32;
        if k_hi > MAX_LEVEL {
            return Err(Error::Config {
                path: "goodness.max_excess".into(),
                message: format!("top level {top} plus max_excess exceeds the supported level {MAX_LEVEL}"),
            });
        }
        let sys = RandomSystems::sample(&mut rng::root(rng::derive(cfg.seed, "systems")), m.dim(), MIN_LEVEL, k_hi)?;
        Self::from_parts(params, m, b1, b2, op, sys, top, cfg.x)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        params: GoodnessParams,
        m: AtomicMeasure,
        b1: AccretiveFn,
        b2: AccretiveFn,
        op: DiscreteOperator,
        sys: RandomSystems,
        top: i32,
        space: NormSpace,
    ) -> Result<Context> {
        let tf = Tree::build(&m, &b1, &sys.d, Some(top))?;
        let tg = Tree::build(&m, &b2, &sys.dp, Some(top))?;
        let good_f = goodness_flags(&tf, |q| sys.is_good_d(q, &params))?;
        let good_g = goodness_flags(&tg, |r| sys.is_good_dp(r, &params))?;
        Ok(Context { params, m, b1, b2, op, sys, tf, tg, good_f, good_g, space })
    }

    /// Seeded Gaussian test functions `f` (in `X`) and `g` (in `X*`).
    pub fn random_fields(&self, seed: u64) -> (VectorField, VectorField) {
        let f = VectorField::random_gaussian(&mut rng::root(rng::derive(seed, "f")), self.m.len(), self.space);
        let g = VectorField::random_gaussian(&mut rng::root(rng::derive(seed, "g")), self.m.len(), self.space.dual());
        (f, g)
    }
}

/// Goodness of the cube of every Haar entry.
pub fn goodness_flags(tree: &Tree, good: impl Fn(&Cube) -> Result<bool>) -> Result<Vec<bool>> {
    let mut cache: HashMap<Cube, bool> = HashMap::new();
    tree.haar()
        .iter()
        .map(|h| {
            let q = tree.haar_cube(h);
            if let Some(&v) = cache.get(&q) {
                return Ok(v);
            }
            let v = good(&q)?;
            cache.insert(q, v);
            Ok(v)
        })
        .collect()
}

/// Where a pair's contribution is booked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Part {
    /// Good pairs; for contained pairs only the corrected coefficient.
    Regime,
    /// The subtracted `<b2, T(b1 phi_Q)> <psi_R>_Q` terms of good contained
    /// pairs (and their transposes).
    Paraproduct,
    /// Pairs with a bad cube.
    Bad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct CellKey {
    pub part: Part,
    pub tag: Tag,
    pub n: u32,
    pub j: u32,
}

#[derive(Clone, Debug, Default)]
pub struct CellStats {
    pub sum: C64,
    pub abs_sum: f64,
    pub pairs: u64,
    /// Largest `|T_RQ|` (or corrected coefficient) in the cell.
    pub max_coeff: f64,
    /// Sums per sign slot of `Q`.
    pub slot_sums: Vec<C64>,
}

impl CellStats {
    fn add(&mut self, v: C64, coeff: f64, slot: usize, slots: usize) {
        if self.slot_sums.is_empty() {
            self.slot_sums = vec![ZERO; slots];
        }
        self.sum += v;
        self.abs_sum += v.norm();
        self.pairs += 1;
        self.max_coeff = self.max_coeff.max(coeff);
        self.slot_sums[slot] += v;
    }

    fn merge(&mut self, o: &CellStats) {
        if self.slot_sums.is_empty() {
            self.slot_sums = vec![ZERO; o.slot_sums.len()];
        }
        self.sum += o.sum;
        self.abs_sum += o.abs_sum;
        self.pairs += o.pairs;
        self.max_coeff = self.max_coeff.max(o.max_coeff);
        for (a, b) in self.slot_sums.iter_mut().zip(&o.slot_sums) {
            *a += b;
        }
    }
}

/// One term `<g, psi_R> T_RQ <phi_Q, f>` of the expansion.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Term {
    pub q: usize,
    pub r: usize,
    pub t_rq: C64,
    pub term: C64,
    pub class: PairClass,
}

#[derive(Clone, Debug)]
pub struct Expansion {
    pub total: C64,
    /// `<g, Tf>` by applying `T` and pairing.
    pub oracle: C64,
    pub rel_err: f64,
    pub pairs: u64,
    pub cells: BTreeMap<CellKey, CellStats>,
    /// Max `|T_RQ|` over separated pairs per `(n, j)`, regardless of goodness.
    pub separated_decay: BTreeMap<(u32, u32), f64>,
    /// Present when the pair count is within the table limit.
    pub table: Option<Vec<Term>>,
    /// Close pairs with `|Q| |R|` atoms below a cap, for the boundary split.
    pub close_good: Vec<(usize, usize)>,
    pub close_any: Vec<(usize, usize)>,
    pub slots: usize,
}

struct Chunk {
    total: C64,
    pairs: u64,
    cells: BTreeMap<CellKey, CellStats>,
    decay: BTreeMap<(u32, u32), f64>,
    table: Vec<Term>,
    close_good: Vec<(usize, usize)>,
    close_any: Vec<(usize, usize)>,
}

const CHUNK: usize = 32;
const CLOSE_SIZE_CAP: usize = 1 << 14;

/// Expands `<g, Tf> = sum_{R,Q} <g, psi_R> T_RQ <phi_Q, f>` with
/// `T_RQ = <b2 psi_R, T(b1 phi_Q)>`, booking each term into its cell.
pub fn expand_pairing(
    ctx: &Context,
    g: &VectorField,
    f: &VectorField,
    table_max_pairs: usize,
) -> Result<Expansion> {
    let (tf, tg) = (&ctx.tf, &ctx.tg);
    let n = ctx.m.len();
    if f.len() != n || g.len() != n || f.dim() != g.dim() {
        return Err(Error::InvalidParameter { field: "f, g".into(), reason: "shape mismatch".into() });
    }
    let d = f.dim();
    let cf = tf.coefficients(f);
    let cg = tg.coefficients(g);
    let hf = tf.haar();
    let hg = tg.haar();
    let r_param = ctx.params.r;
    let slots = tf.num_levels() + 1;
    let w = ctx.m.weights();
    let b1 = ctx.b1.values();
    let b2 = ctx.b2.values();

    let qcubes: Vec<Cube> = hf.iter().map(|h| tf.haar_cube(h)).collect();
    let rcubes: Vec<Cube> = hg.iter().map(|h| tg.haar_cube(h)).collect();
    let qsize: Vec<usize> = hf.iter().map(|h| tf.cell(h.li, h.cell).len()).collect();
    let rsize: Vec<usize> = hg.iter().map(|h| tg.cell(h.li, h.cell).len()).collect();
    let tb1 = ctx.op.apply_scalar(b1, None);
    let c_r: Vec<C64> = {
        let v: Vec<C64> = tb1.iter().zip(b2).map(|(a, b)| a * b).collect();
        tg.coefficients(&VectorField::scalar(v))
    };
    let total_pairs = (hf.len() * hg.len()) as u64;
    let keep_table = total_pairs <= table_max_pairs as u64;

    let chunks: Vec<Chunk> = (0..hf.len())
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|ks| {
            let mut ch = Chunk {
                total: ZERO,
                pairs: 0,
                cells: BTreeMap::new(),
                decay: BTreeMap::new(),
                table: Vec::new(),
                close_good: Vec::new(),
                close_any: Vec::new(),
            };
            let mut h = vec![ZERO; n];
            for &kq in ks {
                let e = &hf[kq];
                let support: Vec<usize> = (e.s0..e.s2).map(|pos| tf.order()[pos]).collect();
                for (pos, &a) in (e.s0..e.s2).zip(&support) {
                    h[a] = b1[a] * e.value_at(pos);
                }
                let v = ctx.op.apply_scalar(&h, Some(&support));
                for &a in &support {
                    h[a] = ZERO;
                }
                let b2v: Vec<C64> = v.iter().zip(b2).map(|(x, y)| x * y).collect();
                let s_q: C64 = b2v.iter().zip(w).map(|(x, wi)| x * wi).sum();
                let t_rq = tg.coefficients(&VectorField::scalar(b2v));
                let qcell = tf.cell(e.li, e.cell);
                let q_atoms: Vec<usize> = (qcell.start..qcell.end).map(|p| tf.order()[p]).collect();
                let slot = tf.sign_slot(e);
                let cfq = &cf[kq * d..(kq + 1) * d];
                for kr in 0..hg.len() {
                    let t = t_rq[kr];
                    let er = &hg[kr];
                    let dv = dot(&cg[kr * d..(kr + 1) * d], cfq);
                    let term = dv * t;
                    let cls = classify_pair(&qcubes[kq], e.cancellative(), &rcubes[kr], er.cancellative(), r_param);
                    ch.total += term;
                    ch.pairs += 1;
                    if keep_table {
                        ch.table.push(Term { q: kq, r: kr, t_rq: t, term, class: cls });
                    }
                    if cls.tag.is_separated() {
                        let c = ch.decay.entry((cls.n, cls.j)).or_insert(0.0);
                        *c = c.max(t.norm());
                    }
                    let good = ctx.good_f[kq] && ctx.good_g[kr];
                    let key = |part| CellKey { part, tag: cls.tag, n: cls.n, j: cls.j };
                    if cls.tag == Tag::Close && qsize[kq] * rsize[kr] <= CLOSE_SIZE_CAP {
                        if good {
                            ch.close_good.push((kq, kr));
                        }
                        ch.close_any.push((kq, kr));
                    }
                    if !good {
                        ch.cells.entry(key(Part::Bad)).or_default().add(term, t.norm(), slot, slots);
                        continue;
                    }
                    let corr = match cls.tag {
                        Tag::Contained => {
                            // <psi_R>_Q
                            let (mut s, mut mass) = (ZERO, 0.0);
                            for &a in &q_atoms {
                                s += er.value_at(tg.pos_of(a)) * w[a];
                                mass += w[a];
                            }
                            Some(s_q * (s / mass))
                        }
                        Tag::TransposedContained => {
                            // <phi_Q>_R
                            let rc = tg.cell(er.li, er.cell);
                            let (mut s, mut mass) = (ZERO, 0.0);
                            for p in rc.start..rc.end {
                                let a = tg.order()[p];
                                s += e.value_at(tf.pos_of(a)) * w[a];
                                mass += w[a];
                            }
                            Some(c_r[kr] * (s / mass))
                        }
                        _ => None,
                    };
                    match corr {
                        Some(c) => {
                            let tt = t - c;
                            ch.cells.entry(key(Part::Regime)).or_default().add(dv * tt, tt.norm(), slot, slots);
                            ch.cells.entry(key(Part::Paraproduct)).or_default().add(dv * c, c.norm(), slot, slots);
                        }
                        None => ch.cells.entry(key(Part::Regime)).or_default().add(term, t.norm(), slot, slots),
                    }
                }
            }
            ch
        })
        .collect();

    let mut exp = Expansion {
        total: ZERO,
        oracle: ZERO,
        rel_err: 0.0,
        pairs: 0,
        cells: BTreeMap::new(),
        separated_decay: BTreeMap::new(),
        table: keep_table.then(Vec::new),
        close_good: Vec::new(),
        close_any: Vec::new(),
        slots,
    };
    for ch in chunks {
        exp.total += ch.total;
        exp.pairs += ch.pairs;
        for (k, v) in &ch.cells {
            exp.cells.entry(*k).or_default().merge(v);
        }
        for (k, v) in ch.decay {
            let c = exp.separated_decay.entry(k).or_insert(0.0);
            *c = c.max(v);
        }
        if let Some(t) = exp.table.as_mut() {
            t.extend(ch.table);
        }
        exp.close_good.extend(ch.close_good);
        exp.close_any.extend(ch.close_any);
    }
    debug_assert_eq!(exp.pairs, total_pairs);
    exp.oracle = pair(w, g, &ctx.op.apply(f));
    exp.rel_err = (exp.total - exp.oracle).norm() / exp.oracle.norm().max(f64::MIN_POSITIVE);
    Ok(exp)
}

#[derive(Clone, Debug, Serialize)]
pub struct CellRow {
    pub part: Part,
    pub tag: Tag,
    pub n: u32,
    pub j: u32,
    pub pairs: u64,
    pub sum_re: f64,
    pub sum_im: f64,
    pub abs_sum: f64,
    /// `E |sum_slot eps_slot s_slot|` over signs per level of `Q`.
    pub randomized: f64,
    pub max_coeff: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassRow {
    pub part: Part,
    pub tag: Tag,
    pub pairs: u64,
    pub sum_abs: f64,
    pub abs_sum: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayRow {
    pub n: u32,
    pub j: u32,
    pub max_coeff: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PartReport {
    pub cells: Vec<CellRow>,
    pub classes: Vec<ClassRow>,
    /// `|sum of all cells - total| / |total|`.
    pub reconciliation_rel_err: f64,
    /// `|sum of all cells - oracle| / |oracle|`.
    pub oracle_rel_err: f64,
    pub pairs: u64,
    pub decay: Vec<DecayRow>,
    /// Slope of `ln max|T_RQ|` against `n + j` over separated cells with `n + j <= decay_max_nj`.
    pub decay_slope: Option<f64>,
    pub decay_threshold: f64,
    pub decay_max_nj: u32,
}

pub const DECAY_MAX_NJ: u32 = 8;

/// Per-cell aggregates, class totals, reconciliation and the decay fit.
pub fn regime_norms(exp: &Expansion, alpha: f64, trials: usize, seed: u64) -> PartReport {
    let cells: Vec<CellRow> = exp
        .cells
        .iter()
        .map(|(k, c)| {
            let live: Vec<(usize, Vec<C64>)> =
                c.slot_sums.iter().enumerate().filter(|(_, v)| v.norm() > 0.0).map(|(i, v)| (i, vec![*v])).collect();
            let terms: Vec<(usize, &[C64])> = live.iter().map(|(i, v)| (*i, v.as_slice())).collect();
            let slots = c.slot_sums.len().max(1);
            let (m, _) = sign_moments(NormSpace::scalar(), 1, &terms, slots, 1.0, trials, seed, false);
            CellRow {
                part: k.part,
                tag: k.tag,
                n: k.n,
                j: k.j,
                pairs: c.pairs,
                sum_re: c.sum.re,
                sum_im: c.sum.im,
                abs_sum: c.abs_sum,
                randomized: m[slots - 1][0],
                max_coeff: c.max_coeff,
            }
        })
        .collect();
    let mut classes: BTreeMap<(Part, Tag), (u64, C64, f64)> = BTreeMap::new();
    let mut all = ZERO;
    for (k, c) in &exp.cells {
        let e = classes.entry((k.part, k.tag)).or_insert((0, ZERO, 0.0));
        e.0 += c.pairs;
        e.1 += c.sum;
        e.2 += c.abs_sum;
        all += c.sum;
    }
    let classes = classes
        .into_iter()
        .map(|((part, tag), (pairs, s, a))| ClassRow { part, tag, pairs, sum_abs: s.norm(), abs_sum: a })
        .collect();
    let decay: Vec<DecayRow> =
        exp.separated_decay.iter().map(|(&(n, j), &v)| DecayRow { n, j, max_coeff: v }).collect();
    let fit: Vec<((i32, u32), f64)> = cell_maxima(
        decay.iter().filter(|r| r.n + r.j <= DECAY_MAX_NJ).map(|r| (r.n as i32, r.j, r.max_coeff)),
    );
    let (decay_slope, _) = decay_slopes(&fit);
    PartReport {
        cells,
        classes,
        reconciliation_rel_err: (all - exp.total).norm() / exp.total.norm().max(f64::MIN_POSITIVE),
        oracle_rel_err: (all - exp.oracle).norm() / exp.oracle.norm().max(f64::MIN_POSITIVE),
        pairs: exp.pairs,
        decay,
        decay_slope,
        decay_threshold: -alpha / 2.0 * std::f64::consts::LN_2 + 0.15,
        decay_max_nj: DECAY_MAX_NJ,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CloseSplitSummary {
    pub sampled: usize,
    /// Whether the sample consists of good pairs.
    pub good_pairs: bool,
    pub max_rel_err: f64,
    /// Share `(|R_bdry| + |Q_bdry|) / sum |terms|`.
    pub mean_boundary_share: f64,
    pub max_boundary_share: f64,
}

/// Pieces on which a Haar function is constant: its children for a
/// cancellative function, the cell itself otherwise.
fn pieces(tree: &Tree, k: usize) -> Vec<(Cube, C64)> {
    let e = &tree.haar()[k];
    let cell = tree.cell(e.li, e.cell);
    if !e.cancellative() {
        return vec![(cell.cube, e.a)];
    }
    cell.children
        .iter()
        .map(|&c| {
            let ch = tree.cell(e.li + 1, c);
            (ch.cube, e.value_at(ch.start))
        })
        .filter(|(_, v)| v.norm() > 0.0)
        .collect()
}

/// `T_RQ` as the sum over child pairs of the five-term close split.
pub fn close_pair_split(ctx: &Context, kq: usize, kr: usize) -> Result<([C64; 5], C64)> {
    let mut parts = [ZERO; 5];
    let mut direct = ZERO;
    for (qc, fv) in pieces(&ctx.tf, kq) {
        for (rc, gv) in pieces(&ctx.tg, kr) {
            let s = close_split(&ctx.op, &qc, &rc, &ctx.b1, &ctx.b2, ctx.params.eta)?;
            let c = fv * gv;
            for (p, t) in parts.iter_mut().zip(s.terms()) {
                *p += c * t;
            }
            direct += c * s.direct;
        }
    }
    Ok((parts, direct))
}

pub fn close_split_summary(ctx: &Context, exp: &Expansion, samples: usize) -> Result<CloseSplitSummary> {
    let (list, good) = if exp.close_good.is_empty() { (&exp.close_any, false) } else { (&exp.close_good, true) };
    let take = samples.min(list.len());
    let picks: Vec<(usize, usize)> = (0..take).map(|i| list[i * list.len() / take.max(1)]).collect();
    let res: Vec<Result<(f64, f64)>> = picks
        .par_iter()
        .map(|&(kq, kr)| {
            let (parts, direct) = close_pair_split(ctx, kq, kr)?;
            let sum: C64 = parts.iter().sum();
            let scale: f64 = parts.iter().map(|p| p.norm()).sum::<f64>().max(direct.norm()).max(f64::MIN_POSITIVE);
            let share = (parts[1].norm() + parts[3].norm()) / scale;
            Ok(((sum - direct).norm() / scale, share))
        })
        .collect();
    let mut max_err: f64 = 0.0;
    let mut shares = Vec::new();
    for r in res {
        let (e, s) = r?;
        max_err = max_err.max(e);
        shares.push(s);
    }
    Ok(CloseSplitSummary {
        sampled: take,
        good_pairs: good,
        max_rel_err: max_err,
        mean_boundary_share: mean_stderr(&shares).0,
        max_boundary_share: shares.iter().cloned().fold(0.0, f64::max),
    })
}

#[derive(Clone, Debug)]
pub struct GoodBadSplit {
    pub f_good: VectorField,
    pub f_bad: VectorField,
    /// `||f_bad||_p / ||f||_p`.
    pub bad_fraction: f64,
    /// `max |f_good + f_bad - f| / max |f|`.
    pub recon_err: f64,
}

/// `f_good` keeps the Haar terms on good cubes, `f_bad` the others.
pub fn good_bad_split(tree: &Tree, good: &[bool], f: &VectorField, weights: &[f64], p: f64) -> GoodBadSplit {
    let c = tree.coefficients(f);
    let one = C64::new(1.0, 0.0);
    let sg: Vec<C64> = good.iter().map(|&g| if g { one } else { ZERO }).collect();
    let sb: Vec<C64> = good.iter().map(|&g| if g { ZERO } else { one }).collect();
    let f_good = tree.synthesize(&c, f.space, Some(&sg));
    let f_bad = tree.synthesize(&c, f.space, Some(&sb));
    let mut s = f_good.clone();
    s.add_assign(&f_bad);
    let recon_err = s.max_abs_diff(f) / f.max_abs().max(f64::MIN_POSITIVE);
    let fnorm = f.lp_norm(weights, p);
    let bad_fraction = if fnorm > 0.0 { f_bad.lp_norm(weights, p) / fnorm } else { 0.0 };
    GoodBadSplit { f_good, f_bad, bad_fraction, recon_err }
}

#[derive(Clone, Debug, Serialize)]
pub struct BadFractionRow {
    pub r: u32,
    pub draws: usize,
    pub mean: f64,
    pub stderr: f64,
    /// Mean share of bad cubes among the Haar entries.
    pub cube_share: f64,
}

/// Monte Carlo mean of `||f_bad||_p / ||f||_p` over independent shift draws,
/// for each `r`. The badness search covers `extra` levels beyond `r`.
#[allow(clippy::too_many_arguments)]
pub fn bad_fraction_sweep(
    m: &AtomicMeasure,
    b: &AccretiveFn,
    f: &VectorField,
    base: &GoodnessParams,
    rs: &[u32],
    extra: u32,
    draws: usize,
    p: f64,
    seed: u64,
) -> Result<Vec<BadFractionRow>> {
    let top = auto_top_level(m);
    let r_max = rs.iter().copied().max().unwrap_or(1);
    let k_hi = top + (r_max + extra) as i32;
    if k_hi > MAX_LEVEL {
        return Err(Error::WindowTooSmall(format!("r + extra reaches level {k_hi}")));
    }
    let params: Vec<GoodnessParams> = rs
        .iter()
        .map(|&r| GoodnessParams::with_search(base.alpha, base.d, r, base.lambda_bmo, base.eta, r + extra))
        .collect::<Result<_>>()?;
    let per: Vec<Result<Vec<(f64, f64)>>> = (0..draws)
        .into_par_iter()
        .map(|t| {
            let sys = RandomSystems::sample(&mut rng::substream(seed, t as u64), m.dim(), MIN_LEVEL, k_hi)?;
            let tree = Tree::build(m, b, &sys.d, Some(top))?;
            params
                .iter()
                .map(|pr| {
                    let good = goodness_flags(&tree, |q| sys.is_good_d(q, pr))?;
                    let share = good.iter().filter(|g| !**g).count() as f64 / good.len().max(1) as f64;
                    Ok((good_bad_split(&tree, &good, f, m.weights(), p).bad_fraction, share))
                })
                .collect()
        })
        .collect();
    let mut vals = vec![Vec::with_capacity(draws); rs.len()];
    let mut shares = vec![0.0; rs.len()];
    for r in per {
        for (i, (v, s)) in r?.into_iter().enumerate() {
            vals[i].push(v);
            shares[i] += s;
        }
    }
    Ok(rs
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let (mean, stderr) = mean_stderr(&vals[i]);
            BadFractionRow { r, draws, mean, stderr, cube_share: shares[i] / draws.max(1) as f64 }
        })
        .collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct NormEstimate {
    pub estimate: f64,
    pub probes: usize,
    /// Largest singular value of the weighted kernel matrix (`p = 2`, scalar).
    pub svd: Option<f64>,
    pub rel_diff: Option<f64>,
}

/// `max ||Tf||_p / ||f||_p` over the iterates of a power method started from
/// seeded random probes (probe `i` uses substream `i`, so more probes never
/// lower the estimate).
pub fn operator_norm_estimate(
    op: &DiscreteOperator,
    space: NormSpace,
    p: f64,
    probes: usize,
    iterations: usize,
    seed: u64,
    svd_max_atoms: usize,
) -> NormEstimate {
    let w = op.measure().weights().to_vec();
    let n = op.len();
    let pd = crate::field::conjugate_exponent(p);
    let duality = |v: &VectorField, q: f64| -> VectorField {
        let mut out = v.clone();
        for x in 0..n {
            let nv = space.norm(v.at(x));
            let s = if nv > 0.0 { nv.powf(q - 2.0) } else { 0.0 };
            for c in out.at_mut(x) {
                *c = c.conj() * s;
            }
        }
        out
    };
    let mut estimate: f64 = 0.0;
    for i in 0..probes {
        let mut f = VectorField::random_gaussian(&mut rng::substream(seed, i as u64), n, space);
        for it in 0..=iterations {
            let fn_ = f.lp_norm(&w, p);
            if fn_ <= 0.0 {
                break;
            }
            let tf = op.apply(&f);
            estimate = estimate.max(tf.lp_norm(&w, p) / fn_);
            if it == iterations {
                break;
            }
            // f <- J_{p'}(T^t J_p(Tf)), bilinear form of the dual step.
            let back = op.apply_transpose(&duality(&tf, p));
            f = duality(&back, pd);
        }
    }
    let svd = (p == 2.0 && space.dim == 1 && n <= svd_max_atoms && n > 0)
        .then(|| op.weighted_matrix().singular_values().iter().cloned().fold(0.0, f64::max));
    let rel = svd.map(|s| rel_diff(estimate, s, f64::MIN_POSITIVE));
    NormEstimate { estimate, probes, svd, rel_diff: rel }
}

#[derive(Clone, Debug, Serialize)]
pub struct Assertion {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

impl Assertion {
    fn at_most(name: &str, value: f64, bound: f64) -> Self {
        Assertion { name: name.into(), value, bound, pass: value <= bound }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub name: Option<String>,
    pub seed: u64,
    pub atoms: usize,
    pub dim: usize,
    pub top_level: i32,
    pub bottom_level: i32,
    pub levels: usize,
    pub goodness: GoodnessParams,
    pub haar_f: usize,
    pub haar_g: usize,
    pub good_share_f: f64,
    pub good_share_g: f64,
    pub total: [f64; 2],
    pub oracle: [f64; 2],
    pub expansion_rel_err: f64,
    pub parts: PartReport,
    pub close_split: CloseSplitSummary,
    pub bad_fraction_f: f64,
    pub bad_fraction_g: f64,
    pub split_recon_err: f64,
    pub operator_norm: NormEstimate,
    pub assertions: Vec<Assertion>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.pass)
    }

    /// Pretty JSON; identical for identical configs.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn share(v: &[bool]) -> f64 {
    v.iter().filter(|g| **g).count() as f64 / v.len().max(1) as f64
}

/// Builds the context, expands `<g, Tf>` for seeded random `f, g`, books the
/// regimes and collects the diagnostics into a report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let ctx = Context::build(cfg)?;
    let (f, g) = ctx.random_fields(cfg.seed);
    let exp = expand_pairing(&ctx, &g, &f, cfg.table_max_pairs)?;
    let parts = regime_norms(&exp, ctx.params.alpha, cfg.trials, rng::derive(cfg.seed, "cells"));
    let close = close_split_summary(&ctx, &exp, cfg.close_samples)?;
    let w = ctx.m.weights();
    let pd = crate::field::conjugate_exponent(cfg.p);
    let sf = good_bad_split(&ctx.tf, &ctx.good_f, &f, w, cfg.p);
    let sg = good_bad_split(&ctx.tg, &ctx.good_g, &g, w, pd);
    let norm = operator_norm_estimate(
        &ctx.op,
        ctx.space,
        cfg.p,
        cfg.probes,
        cfg.power_iterations,
        rng::derive(cfg.seed, "probes"),
        cfg.svd_max_atoms,
    );

    let mut assertions = vec![
        Assertion::at_most("expansion-vs-oracle", exp.rel_err, 1e-8),
        Assertion::at_most("cells-reconcile-total", parts.reconciliation_rel_err, 1e-8),
        Assertion::at_most("cells-reconcile-oracle", parts.oracle_rel_err, 1e-8),
        Assertion::at_most("good-bad-reconstruction", sf.recon_err.max(sg.recon_err), 1e-12),
    ];
    if let Some(s) = parts.decay_slope {
        assertions.push(Assertion::at_most("separated-decay-slope", s, parts.decay_threshold));
    }
    if close.sampled > 0 {
        assertions.push(Assertion::at_most("close-split-sum", close.max_rel_err, 1e-8));
    }
    if let Some(r) = norm.rel_diff {
        assertions.push(Assertion::at_most("operator-norm-vs-svd", r, 0.05));
    }

    Ok(RunReport {
        name: cfg.name.clone(),
        seed: cfg.seed,
        atoms: ctx.m.len(),
        dim: ctx.m.dim(),
        top_level: ctx.tf.top_level(),
        bottom_level: ctx.tf.bottom_level(),
        levels: ctx.tf.num_levels(),
        goodness: ctx.params.clone(),
        haar_f: ctx.tf.haar().len(),
        haar_g: ctx.tg.haar().len(),
        good_share_f: share(&ctx.good_f),
        good_share_g: share(&ctx.good_g),
        total: [exp.total.re, exp.total.im],
        oracle: [exp.oracle.re, exp.oracle.im],
        expansion_rel_err: exp.rel_err,
        parts,
        close_split: close,
        bad_fraction_f: sf.bad_fraction,
        bad_fraction_g: sg.bad_fraction,
        split_recon_err: sf.recon_err.max(sg.recon_err),
        operator_norm: norm,
        assertions,
    })
}
