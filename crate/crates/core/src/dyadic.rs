//! Shifted dyadic systems, cube geometry, singular pairs and good/bad cubes.
//!
//! Coordinates are handled as integers in units of `2^UNIT_EXP`, so lattice
//! offsets `sum_{j<k} beta_j 2^j` and cube corners are exact. Levels follow the
//! side length: a cube of level `k` has side `2^k`.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const MAX_DIM: usize = 3;
/// Exponent of the integer coordinate unit.
pub const UNIT_EXP: i32 = -60;
pub const MIN_LEVEL: i32 = -56;
pub const MAX_LEVEL: i32 = 60;
/// Points must satisfy `|x_i| < MAX_COORD`.
pub const MAX_COORD: f64 = 1099511627776.0; // 2^40

const UNIT: f64 = 8.673617379884035e-19; // 2^-60
const INV_UNIT: f64 = 1152921504606846976.0; // 2^60

pub type Units = [i128; MAX_DIM];

#[inline]
pub fn side_units(level: i32) -> i128 {
    1i128 << (level - UNIT_EXP)
}

#[inline]
pub fn to_units(x: f64) -> i128 {
    (x * INV_UNIT).floor() as i128
}

#[inline]
pub fn units_to_f64(u: i128) -> f64 {
    u as f64 * UNIT
}

/// Point in integer units.
pub fn point_units(x: &[f64]) -> Units {
    let mut u = [0i128; MAX_DIM];
    for (c, v) in x.iter().enumerate() {
        u[c] = to_units(*v);
    }
    u
}

fn check_level(k: i32) -> Result<()> {
    if !(MIN_LEVEL..=MAX_LEVEL).contains(&k) {
        return Err(invalid("level", format!("{k} outside supported range [{MIN_LEVEL}, {MAX_LEVEL}]")));
    }
    Ok(())
}

/// Binary shift bits `beta_k in {0,1}^N` on a finite scale window. Bits outside
/// the window are zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShiftSequence {
    dim: usize,
    k_lo: i32,
    k_hi: i32,
    /// Bit mask per level (bit `c` is coordinate `c`).
    bits: Vec<u8>,
    /// `offsets[k - k_lo]` for `k in k_lo..=k_hi+1`.
    offsets: Vec<Units>,
}

impl ShiftSequence {
    pub fn zero(dim: usize, k_lo: i32, k_hi: i32) -> Result<Self> {
        Self::from_masks(dim, k_lo, k_hi, vec![0; (k_hi - k_lo + 1).max(0) as usize])
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, dim: usize, k_lo: i32, k_hi: i32) -> Result<Self> {
        let n = (k_hi - k_lo + 1).max(0) as usize;
        let masks = (0..n).map(|_| rng.gen_range(0..(1u16 << dim)) as u8).collect();
        Self::from_masks(dim, k_lo, k_hi, masks)
    }

    /// Builds from per-level bit vectors: `bits[k - k_lo][c]`.
    pub fn from_bits(dim: usize, k_lo: i32, bits: &[Vec<u8>]) -> Result<Self> {
        let mut masks = Vec::with_capacity(bits.len());
        for b in bits {
            if b.len() != dim || b.iter().any(|&x| x > 1) {
                return Err(invalid("bits", "each level needs N entries in {0,1}"));
            }
            masks.push(b.iter().enumerate().fold(0u8, |m, (c, &x)| m | (x << c)));
        }
        if bits.is_empty() {
            return Err(invalid("window", "shift window must be nonempty"));
        }
        Self::from_masks(dim, k_lo, k_lo + bits.len() as i32 - 1, masks)
    }

    fn from_masks(dim: usize, k_lo: i32, k_hi: i32, bits: Vec<u8>) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(invalid("dim", format!("must be in 1..={MAX_DIM}")));
        }
        if k_hi < k_lo {
            return Err(invalid("window", "shift window must be nonempty"));
        }
        check_level(k_lo)?;
        check_level(k_hi)?;
        let mut offsets = Vec::with_capacity(bits.len() + 1);
        let mut acc = [0i128; MAX_DIM];
        offsets.push(acc);
        for (t, &m) in bits.iter().enumerate() {
            let s = side_units(k_lo + t as i32);
            for (c, a) in acc.iter_mut().enumerate().take(dim) {
                if (m >> c) & 1 == 1 {
                    *a += s;
                }
            }
            offsets.push(acc);
        }
        Ok(ShiftSequence { dim, k_lo, k_hi, bits, offsets })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn window(&self) -> (i32, i32) {
        (self.k_lo, self.k_hi)
    }

    /// Bit `c` of `beta_k` (zero outside the window).
    pub fn bit(&self, k: i32, c: usize) -> u8 {
        if k < self.k_lo || k > self.k_hi {
            0
        } else {
            (self.bits[(k - self.k_lo) as usize] >> c) & 1
        }
    }

    /// Lattice offset of level `k`: `sum_{j<k} beta_j 2^j`, in units. The sum is
    /// already reduced modulo `2^k` because every bit is below `2^k`.
    pub fn offset(&self, k: i32) -> Units {
        if k <= self.k_lo {
            [0; MAX_DIM]
        } else if k > self.k_hi + 1 {
            self.offsets[self.offsets.len() - 1]
        } else {
            self.offsets[(k - self.k_lo) as usize]
        }
    }

    /// Bits from `low` below `split` and from `high` at and above `split`.
    pub fn hybrid(low: &ShiftSequence, high: &ShiftSequence, split: i32) -> Result<ShiftSequence> {
        if low.dim != high.dim {
            return Err(invalid("dim", "hybrid of sequences with different dimension"));
        }
        let k_lo = low.k_lo.min(high.k_lo);
        let k_hi = low.k_hi.max(high.k_hi);
        let masks = (k_lo..=k_hi)
            .map(|k| {
                let src = if k < split { low } else { high };
                (0..src.dim).fold(0u8, |m, c| m | (src.bit(k, c) << c))
            })
            .collect();
        Self::from_masks(low.dim, k_lo, k_hi, masks)
    }
}

/// A half-open cube `corner + [0, 2^level)^N`, coordinates in units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cube {
    pub level: i32,
    pub dim: u8,
    pub corner: Units,
}

impl Cube {
    pub fn new(level: i32, dim: usize, corner: Units) -> Self {
        Cube { level, dim: dim as u8, corner }
    }

    /// Cube from a real corner (must be a multiple of the unit).
    pub fn from_corner(level: i32, corner: &[f64]) -> Result<Self> {
        check_level(level)?;
        if corner.is_empty() || corner.len() > MAX_DIM {
            return Err(invalid("corner", "unsupported dimension"));
        }
        Ok(Cube::new(level, corner.len(), point_units(corner)))
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn side(&self) -> f64 {
        2f64.powi(self.level)
    }

    pub fn side_units(&self) -> i128 {
        side_units(self.level)
    }

    pub fn lower(&self, c: usize) -> f64 {
        units_to_f64(self.corner[c])
    }

    pub fn upper(&self, c: usize) -> f64 {
        units_to_f64(self.corner[c] + self.side_units())
    }

    pub fn contains_units(&self, u: &Units) -> bool {
        let s = self.side_units();
        (0..self.dim()).all(|c| u[c] >= self.corner[c] && u[c] < self.corner[c] + s)
    }

    pub fn contains_point(&self, x: &[f64]) -> bool {
        self.contains_units(&point_units(x))
    }

    /// Half-open containment of cubes.
    pub fn contains_cube(&self, other: &Cube) -> bool {
        let (s, t) = (self.side_units(), other.side_units());
        (0..self.dim()).all(|c| other.corner[c] >= self.corner[c] && other.corner[c] + t <= self.corner[c] + s)
    }

    pub fn intersects(&self, other: &Cube) -> bool {
        let (s, t) = (self.side_units(), other.side_units());
        (0..self.dim()).all(|c| other.corner[c] < self.corner[c] + s && self.corner[c] < other.corner[c] + t)
    }

    /// Child with geometric index `e` (bit `c` set means the upper half in
    /// coordinate `c`). Children do not depend on the shift.
    pub fn child(&self, e: usize) -> Cube {
        let h = side_units(self.level - 1);
        let mut corner = self.corner;
        for (c, v) in corner.iter_mut().enumerate().take(self.dim()) {
            if (e >> c) & 1 == 1 {
                *v += h;
            }
        }
        Cube { level: self.level - 1, dim: self.dim, corner }
    }

    pub fn children(&self) -> Vec<Cube> {
        (0..1usize << self.dim()).map(|e| self.child(e)).collect()
    }

    /// Geometric index of the child containing `u` (which must lie in the cube).
    pub fn child_index(&self, u: &Units) -> usize {
        let h = side_units(self.level - 1);
        (0..self.dim()).fold(0, |e, c| e | (((u[c] - self.corner[c] >= h) as usize) << c))
    }

    /// Relative position `(u - corner) / side` per coordinate.
    fn relative(&self, u: &Units, c: usize) -> f64 {
        (u[c] - self.corner[c]) as f64 / self.side_units() as f64
    }

    /// Membership in the concentric dilate `lambda Q` (half-open).
    pub fn dilate_contains(&self, u: &Units, lambda: f64) -> bool {
        (0..self.dim()).all(|c| {
            let t = self.relative(u, c) - 0.5;
            t >= -lambda / 2.0 && t < lambda / 2.0
        })
    }

    /// `x in delta_Q = (1+2 eta) Q minus (1-2 eta) Q`.
    pub fn in_boundary_region(&self, u: &Units, eta: f64) -> bool {
        self.dilate_contains(u, 1.0 + 2.0 * eta) && !self.dilate_contains(u, 1.0 - 2.0 * eta)
    }
}

/// A shifted dyadic system `D^0 + beta`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DyadicSystem {
    pub shift: ShiftSequence,
}

impl DyadicSystem {
    pub fn new(shift: ShiftSequence) -> Self {
        DyadicSystem { shift }
    }

    pub fn standard(dim: usize, k_lo: i32, k_hi: i32) -> Result<Self> {
        Ok(DyadicSystem { shift: ShiftSequence::zero(dim, k_lo, k_hi)? })
    }

    pub fn dim(&self) -> usize {
        self.shift.dim
    }

    pub fn window(&self) -> (i32, i32) {
        self.shift.window()
    }

    /// The cube of level `k` containing `x`.
    pub fn cube_of_point(&self, x: &[f64], k: i32) -> Result<Cube> {
        let (lo, hi) = self.window();
        if k < lo || k > hi {
            return Err(invalid("level", format!("{k} outside shift window [{lo}, {hi}]")));
        }
        if x.len() != self.dim() {
            return Err(invalid("x", "dimension mismatch"));
        }
        Ok(self.cube_at_units(&point_units(x), k))
    }

    /// The cube of level `k` containing `u`; bits outside the window are zero.
    pub fn cube_at_units(&self, u: &Units, k: i32) -> Cube {
        let off = self.shift.offset(k);
        let s = side_units(k);
        let mut corner = [0i128; MAX_DIM];
        for c in 0..self.dim() {
            corner[c] = off[c] + (u[c] - off[c]).div_euclid(s) * s;
        }
        Cube::new(k, self.dim(), corner)
    }

    pub fn parent(&self, q: &Cube) -> Cube {
        self.cube_at_units(&q.corner, q.level + 1)
    }

    /// The ancestor `Q^{(j)}` of level `level(Q) + j`.
    pub fn ancestor(&self, q: &Cube, j: u32) -> Cube {
        self.cube_at_units(&q.corner, q.level + j as i32)
    }

    /// Whether `q` is a cube of this system.
    pub fn owns(&self, q: &Cube) -> bool {
        self.cube_at_units(&q.corner, q.level) == *q
    }
}

/// Distances between two cubes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// Euclidean distance between the closed cubes.
    pub dist: f64,
    pub dist_linf: f64,
    /// Euclidean distance from `Q` to the boundary of `R`.
    pub dist_to_boundary: f64,
    pub dist_to_boundary_linf: f64,
    /// `D(Q,R) = l(Q) + dist(Q,R) + l(R)`.
    pub long_distance: f64,
}

fn axis_gaps(q: &Cube, r: &Cube) -> [i128; MAX_DIM] {
    let (s, t) = (q.side_units(), r.side_units());
    let mut g = [0i128; MAX_DIM];
    for c in 0..q.dim() {
        g[c] = 0.max(r.corner[c] - (q.corner[c] + s)).max(q.corner[c] - (r.corner[c] + t));
    }
    g
}

fn norms(g: &[i128; MAX_DIM], dim: usize) -> (f64, f64) {
    let mut l2 = 0.0;
    let mut li: f64 = 0.0;
    for &v in g.iter().take(dim) {
        let x = units_to_f64(v);
        l2 += x * x;
        li = li.max(x);
    }
    (l2.sqrt(), li)
}

/// Euclidean distance between closed cubes.
pub fn dist(q: &Cube, r: &Cube) -> f64 {
    norms(&axis_gaps(q, r), q.dim()).0
}

/// Distance from closed `Q` to the boundary of `R`, as `(l2, linf)`.
pub fn dist_to_boundary(q: &Cube, r: &Cube) -> (f64, f64) {
    let (s, t) = (q.side_units(), r.side_units());
    let n = q.dim();
    let inside = (0..n).all(|c| r.corner[c] < q.corner[c] && q.corner[c] + s < r.corner[c] + t);
    if inside {
        let m = (0..n)
            .map(|c| (q.corner[c] - r.corner[c]).min(r.corner[c] + t - q.corner[c] - s))
            .min()
            .unwrap_or(0);
        let v = units_to_f64(m);
        return (v, v);
    }
    let outside = (0..n).any(|c| q.corner[c] + s <= r.corner[c] || q.corner[c] >= r.corner[c] + t);
    if outside {
        return norms(&axis_gaps(q, r), n);
    }
    (0.0, 0.0)
}

pub fn geometry(q: &Cube, r: &Cube) -> Geometry {
    let (d2, di) = norms(&axis_gaps(q, r), q.dim());
    let (b2, bi) = dist_to_boundary(q, r);
    Geometry {
        dist: d2,
        dist_linf: di,
        dist_to_boundary: b2,
        dist_to_boundary_linf: bi,
        long_distance: q.side() + d2 + r.side(),
    }
}

/// Goodness parameters `alpha, d, gamma, r, lambda, eta` and the badness search
/// depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GoodnessSpec", into = "GoodnessSpec")]
pub struct GoodnessParams {
    pub alpha: f64,
    pub d: f64,
    pub gamma: f64,
    pub r: u32,
    pub lambda_bmo: f64,
    pub eta: f64,
    /// Largest level excess searched for essentially singular partners.
    pub max_excess: u32,
}

/// Serialized form of [`GoodnessParams`]; `gamma` is derived.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoodnessSpec {
    pub alpha: f64,
    pub d: f64,
    pub r: u32,
    #[serde(default = "default_lambda")]
    pub lambda_bmo: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_max_excess")]
    pub max_excess: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

fn default_lambda() -> f64 {
    1.0
}
fn default_eta() -> f64 {
    0.1
}
fn default_max_excess() -> u32 {
    40
}

impl TryFrom<GoodnessSpec> for GoodnessParams {
    type Error = Error;
    fn try_from(s: GoodnessSpec) -> Result<Self> {
        let p = GoodnessParams::with_search(s.alpha, s.d, s.r, s.lambda_bmo, s.eta, s.max_excess)?;
        if let Some(g) = s.gamma {
            if (g - p.gamma).abs() > 1e-12 {
                return Err(invalid("gamma", format!("given {g} but alpha/(2(alpha+d)) = {}", p.gamma)));
            }
        }
        Ok(p)
    }
}

impl From<GoodnessParams> for GoodnessSpec {
    fn from(p: GoodnessParams) -> Self {
        GoodnessSpec {
            alpha: p.alpha,
            d: p.d,
            r: p.r,
            lambda_bmo: p.lambda_bmo,
            eta: p.eta,
            max_excess: p.max_excess,
            gamma: Some(p.gamma),
        }
    }
}

impl GoodnessParams {
    pub fn new(alpha: f64, d: f64, r: u32, lambda_bmo: f64, eta: f64) -> Result<Self> {
        Self::with_search(alpha, d, r, lambda_bmo, eta, default_max_excess())
    }

    pub fn with_search(alpha: f64, d: f64, r: u32, lambda_bmo: f64, eta: f64, max_excess: u32) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(invalid("alpha", "must lie in (0, 1]"));
        }
        if !(d > 0.0) {
            return Err(invalid("d", "must be positive"));
        }
        if r == 0 {
            return Err(invalid("r", "must be a positive integer"));
        }
        if !(lambda_bmo >= 1.0) {
            return Err(invalid("lambda_bmo", "must be at least 1"));
        }
        if !(eta > 0.0 && eta < 0.25) {
            return Err(invalid("eta", "must lie in (0, 1/4)"));
        }
        if max_excess == 0 {
            return Err(invalid("max_excess", "must be positive"));
        }
        let gamma = alpha / (2.0 * (alpha + d));
        let p = GoodnessParams { alpha, d, gamma, r, lambda_bmo, eta, max_excess };
        if !p.r_constraint_holds() {
            return Err(invalid(
                "r",
                format!(
                    "constraint 2^(r(1-gamma)) >= 4 lambda fails: r = {r}, gamma = {gamma:.6}, lambda = {lambda_bmo} (need r >= {})",
                    p.min_r()
                ),
            ));
        }
        Ok(p)
    }

    pub fn r_constraint_holds(&self) -> bool {
        (self.r as f64) * (1.0 - self.gamma) >= (4.0 * self.lambda_bmo).log2() - 1e-12
    }

    /// Smallest `r` satisfying the constraint.
    pub fn min_r(&self) -> u32 {
        ((4.0 * self.lambda_bmo).log2() / (1.0 - self.gamma) - 1e-12).ceil().max(1.0) as u32
    }

    /// `l(Q)^gamma l(R)^(1-gamma)`.
    pub fn threshold(&self, lq: f64, lr: f64) -> f64 {
        lq.powf(self.gamma) * lr.powf(1.0 - self.gamma)
    }
}

/// `theta(j) = ceil((j gamma + r) / (1 - gamma))`.
pub fn theta(j: u32, p: &GoodnessParams) -> u32 {
    let v = (j as f64 * p.gamma + p.r as f64) / (1.0 - p.gamma);
    (v - 1e-12).ceil() as u32
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Singularity {
    Neither,
    Singular,
    EssentiallySingular,
}

/// Classifies `{Q, R}` with `l(Q) <= l(R)` against the threshold
/// `l(Q)^gamma l(R)^(1-gamma)` for `S = R` and each child of `R`.
pub fn is_singular_pair(q: &Cube, r: &Cube, p: &GoodnessParams) -> Result<Singularity> {
    if q.level > r.level {
        return Err(Error::Precondition("is_singular_pair needs l(Q) <= l(R)".into()));
    }
    let t = p.threshold(q.side(), r.side());
    let singular = std::iter::once(*r)
        .chain(r.children())
        .any(|s| dist_to_boundary(q, &s).0 <= t);
    Ok(if !singular {
        Singularity::Neither
    } else if r.level - q.level >= p.r as i32 {
        Singularity::EssentiallySingular
    } else {
        Singularity::Singular
    })
}

/// Result of a badness search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoodnessInfo {
    pub good: bool,
    /// Smallest level excess with an essentially singular partner.
    pub witness_excess: Option<u32>,
    /// `min over searched excess e of dist(Q, lattice boundaries) / threshold`;
    /// the cube is bad iff this is at most 1. Infinite when nothing is searched.
    pub min_margin: f64,
}

/// Badness of `Q` against the hybrid system with bits from `low` below
/// `level(Q)` and from `high` above.
///
/// For a level-`K` cube `R` of the hybrid system the boundaries of `R` and its
/// children lie on the level-`(K-1)` lattice hyperplanes, and every point of
/// those hyperplanes lies on such a boundary. So `Q` has an essentially
/// singular partner at level `K` iff its distance to that hyperplane family is
/// at most `l(Q)^gamma 2^(K(1-gamma))`.
pub fn goodness(q: &Cube, low: &ShiftSequence, high: &ShiftSequence, p: &GoodnessParams) -> Result<GoodnessInfo> {
    let k = q.level;
    if p.r > p.max_excess {
        return Ok(GoodnessInfo { good: true, witness_excess: None, min_margin: f64::INFINITY });
    }
    let top = k + p.max_excess as i32 - 1;
    if high.k_hi < top {
        return Err(Error::WindowTooSmall(format!(
            "badness search needs bits up to level {top}, window ends at {}",
            high.k_hi
        )));
    }
    if top + 1 > MAX_LEVEL {
        return Err(Error::WindowTooSmall(format!("level {} exceeds supported range", top + 1)));
    }
    let low_off = low.offset(k);
    let high_k = high.offset(k);
    let side = q.side_units();
    let mut witness = None;
    let mut margin = f64::INFINITY;
    for e in p.r..=p.max_excess {
        let lat = k + e as i32 - 1;
        let high_l = high.offset(lat);
        let s = side_units(lat);
        let mut gap = i128::MAX;
        for c in 0..q.dim() {
            let off = low_off[c] + high_l[c] - high_k[c];
            let a = (q.corner[c] - off).rem_euclid(s);
            let g = if a == 0 || a + side >= s { 0 } else { a.min(s - a - side) };
            gap = gap.min(g);
        }
        let allowed = 2f64.powf(e as f64 * (1.0 - p.gamma));
        let ratio = gap as f64 / side as f64 / allowed;
        margin = margin.min(ratio);
        if ratio <= 1.0 && witness.is_none() {
            witness = Some(e);
        }
    }
    Ok(GoodnessInfo { good: witness.is_none(), witness_excess: witness, min_margin: margin })
}

/// `Q` is good iff no essentially singular partner exists in the hybrid system.
pub fn is_good(q: &Cube, low: &ShiftSequence, high: &ShiftSequence, p: &GoodnessParams) -> Result<bool> {
    Ok(goodness(q, low, high, p)?.good)
}

/// The four independent shift sequences `beta, beta', beta~, beta~'` of one
/// experiment.
#[derive(Clone, Debug)]
pub struct RandomSystems {
    pub d: DyadicSystem,
    pub dp: DyadicSystem,
    pub tilde: ShiftSequence,
    pub tilde_p: ShiftSequence,
}

impl RandomSystems {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, dim: usize, k_lo: i32, k_hi: i32) -> Result<Self> {
        Ok(RandomSystems {
            d: DyadicSystem::new(ShiftSequence::random(rng, dim, k_lo, k_hi)?),
            dp: DyadicSystem::new(ShiftSequence::random(rng, dim, k_lo, k_hi)?),
            tilde: ShiftSequence::random(rng, dim, k_lo, k_hi)?,
            tilde_p: ShiftSequence::random(rng, dim, k_lo, k_hi)?,
        })
    }

    /// Resamples the opposing pair `beta', beta~'` keeping `beta, beta~`.
    pub fn resample_opposing<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Self> {
        let (lo, hi) = self.d.window();
        let dim = self.d.dim();
        Ok(RandomSystems {
            d: self.d.clone(),
            dp: DyadicSystem::new(ShiftSequence::random(rng, dim, lo, hi)?),
            tilde: self.tilde.clone(),
            tilde_p: ShiftSequence::random(rng, dim, lo, hi)?,
        })
    }

    /// Goodness of a cube of `D` (against the hybrid of `beta~'` and `beta'`).
    pub fn goodness_d(&self, q: &Cube, p: &GoodnessParams) -> Result<GoodnessInfo> {
        goodness(q, &self.tilde_p, &self.dp.shift, p)
    }

    /// Goodness of a cube of `D'` (against the hybrid of `beta~` and `beta`).
    pub fn goodness_dp(&self, r: &Cube, p: &GoodnessParams) -> Result<GoodnessInfo> {
        goodness(r, &self.tilde, &self.d.shift, p)
    }

    pub fn is_good_d(&self, q: &Cube, p: &GoodnessParams) -> Result<bool> {
        Ok(self.goodness_d(q, p)?.good)
    }

    pub fn is_good_dp(&self, r: &Cube, p: &GoodnessParams) -> Result<bool> {
        Ok(self.goodness_dp(r, p)?.good)
    }

    /// Separation property of a good `Q in D` against `R in D'` with
    /// `l(R) >= 2^r l(Q)` within the searched excess range:
    /// `dist(Q, boundary R) >= l(Q)^gamma l(R)^(1-gamma) / 2`.
    pub fn good_separation_check(&self, q: &Cube, r: &Cube, p: &GoodnessParams) -> Result<bool> {
        let excess = r.level - q.level;
        if excess < p.r as i32 || excess > p.max_excess as i32 {
            return Err(Error::Precondition(format!(
                "level excess {excess} outside [r, max_excess] = [{}, {}]",
                p.r, p.max_excess
            )));
        }
        if !self.is_good_d(q, p)? {
            return Err(Error::Precondition("Q is not good".into()));
        }
        let d = dist_to_boundary(q, r).0;
        Ok(d >= 0.5 * p.threshold(q.side(), r.side()))
    }

    /// For a good `R in D'` with `l(R) = 2^n l(Q)`, `Q in D` and
    /// `D(Q,R) <= 2^(j+1) l(R)`: checks `R subset Q^(n+j+theta(j))`.
    pub fn containment_level_check(&self, q: &Cube, r: &Cube, j: u32, n: u32, p: &GoodnessParams) -> Result<bool> {
        if r.level - q.level != n as i32 {
            return Err(Error::Precondition(format!("l(R) != 2^{n} l(Q)")));
        }
        let g = geometry(q, r);
        if g.long_distance > 2f64.powi(j as i32 + 1) * r.side() * (1.0 + 1e-12) {
            return Err(Error::Precondition(format!("D(Q,R) > 2^{} l(R)", j + 1)));
        }
        let lift = j + theta(j, p);
        if lift > p.max_excess {
            return Err(Error::Precondition(format!(
                "ancestor excess {lift} beyond the searched range {}",
                p.max_excess
            )));
        }
        if !self.is_good_dp(r, p)? {
            return Err(Error::Precondition("R is not good".into()));
        }
        let anc = self.d.ancestor(q, n + lift);
        Ok(anc.contains_cube(r))
    }
}

/// Analytic badness bound `2N 2^(-r gamma) / (1 - 2^(-gamma))`.
pub fn badness_bound(n_dim: usize, gamma: f64, r: u32) -> f64 {
    2.0 * n_dim as f64 * 2f64.powf(-(r as f64) * gamma) / (1.0 - 2f64.powf(-gamma))
}

/// Tail of the badness series beyond the searched excess `l_max`.
pub fn badness_tail(n_dim: usize, gamma: f64, l_max: u32) -> f64 {
    badness_bound(n_dim, gamma, l_max + 1)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BadProbReport {
    pub dim: usize,
    pub gamma: f64,
    pub r: u32,
    pub trials: u64,
    pub bad: u64,
    pub frequency: f64,
    /// Binomial standard error of `frequency`.
    pub stderr: f64,
    pub analytic_bound: f64,
    /// Analytic bound on the contribution of excess levels beyond the search.
    pub truncation_tail: f64,
    pub within_bound: bool,
}

/// Monte Carlo badness rate of the fixed cube `[0,1)^N` under random opposing
/// shifts. Trial `t` uses substream `t` of `seed`.
pub fn bad_probability_mc(dim: usize, p: &GoodnessParams, trials: u64, seed: u64) -> Result<BadProbReport> {
    if trials == 0 {
        return Err(invalid("trials", "must be at least 1"));
    }
    if dim == 0 || dim > MAX_DIM {
        return Err(invalid("dim", "unsupported dimension"));
    }
    let q = Cube::new(0, dim, [0; MAX_DIM]);
    let hi = p.max_excess as i32 + 1;
    let bad: u64 = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<u64> {
            let mut rng = crate::rng::substream(seed, t);
            let low = ShiftSequence::random(&mut rng, dim, -30, -1)?;
            let high = ShiftSequence::random(&mut rng, dim, 0, hi)?;
            Ok(u64::from(!is_good(&q, &low, &high, p)?))
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    let f = bad as f64 / trials as f64;
    let se = (f * (1.0 - f) / trials as f64).sqrt();
    let bound = badness_bound(dim, p.gamma, p.r);
    Ok(BadProbReport {
        dim,
        gamma: p.gamma,
        r: p.r,
        trials,
        bad,
        frequency: f,
        stderr: se,
        analytic_bound: bound,
        truncation_tail: badness_tail(dim, p.gamma, p.max_excess),
        within_bound: f <= bound + 3.0 * se,
    })
}

/// Boundary-region memberships of a point relative to `Q` and the opposing
/// system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryMembership {
    pub in_delta_q: bool,
    /// Membership in the union of `delta_R` over `R` of the opposing system with
    /// level in `[level(Q) - r, level(Q) + r]`.
    pub in_delta_k: bool,
    /// `x in Q_bad = Q cap delta(k)`.
    pub in_q_bad: bool,
}

/// Whether `u` lies in `delta_R` for some level-`k` cube `R` of `sys`.
pub fn in_delta_level(u: &Units, sys: &DyadicSystem, k: i32, eta: f64) -> bool {
    let base = sys.cube_at_units(u, k);
    let s = side_units(k);
    let dim = sys.dim();
    let count = 3usize.pow(dim as u32);
    (0..count).any(|t| {
        let mut c = base;
        let mut r = t;
        for i in 0..dim {
            c.corner[i] += ((r % 3) as i128 - 1) * s;
            r /= 3;
        }
        c.in_boundary_region(u, eta)
    })
}

pub fn boundary_membership(x: &[f64], q: &Cube, other: &DyadicSystem, p: &GoodnessParams) -> BoundaryMembership {
    let u = point_units(x);
    let in_delta_q = q.in_boundary_region(&u, p.eta);
    let r = p.r as i32;
    let in_delta_k = (q.level - r..=q.level + r)
        .filter(|k| (MIN_LEVEL..=MAX_LEVEL).contains(k))
        .any(|k| in_delta_level(&u, other, k, p.eta));
    BoundaryMembership { in_delta_q, in_delta_k, in_q_bad: in_delta_k && q.contains_units(&u) }
}

/// Cubes of level `k` that contain at least one atom, sorted.
pub fn occupied_cubes(sys: &DyadicSystem, m: &crate::measure::AtomicMeasure, k: i32) -> Vec<Cube> {
    let mut v: Vec<Cube> = (0..m.len()).map(|i| sys.cube_at_units(&point_units(m.point(i)), k)).collect();
    v.sort();
    v.dedup();
    v
}

/// Stable textual id of a cube: `level:corner0,corner1,...` with corners in
/// units of the cube's own side when exact, raw units otherwise.
pub fn cube_id(q: &Cube) -> String {
    let s = q.side_units();
    let parts: Vec<String> = (0..q.dim())
        .map(|c| {
            let v = q.corner[c];
            if v % s == 0 {
                format!("{}", v / s)
            } else {
                format!("{}u", v)
            }
        })
        .collect();
    format!("{}:{}", q.level, parts.join(","))
}

/// CSV of a classification sweep: cube id, level, good/bad, smallest margin.
pub fn write_goodness_csv<W: Write>(w: W, rows: &[(Cube, GoodnessInfo)]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["cube", "level", "status", "min_margin"])?;
    for (q, g) in rows {
        wr.write_record([
            cube_id(q),
            q.level.to_string(),
            if g.good { "good".into() } else { "bad".into() },
            format!("{:.6e}", g.min_margin),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
