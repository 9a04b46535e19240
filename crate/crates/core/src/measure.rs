//! Atomic measures with growth diagnostics, integration, and test-measure
//! builders.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dyadic::Cube;
use crate::error::{invalid, Result};
use crate::field::C64;

/// Relative slack allowed by [`growth_check`] on top of the declared constant.
pub const GROWTH_TOL: f64 = 1e-9;

/// A finite weighted point set in `R^N`.
#[derive(Clone, Debug)]
pub struct AtomicMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
    growth_d: f64,
    growth_constant: f64,
    native_r_min: f64,
}

impl AtomicMeasure {
    /// Validates and builds a measure. `points` is atom-major with `dim`
    /// coordinates per atom.
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>, growth_d: f64) -> Result<Self> {
        if dim == 0 || dim > crate::dyadic::MAX_DIM {
            return Err(invalid("dim", format!("must be in 1..={}", crate::dyadic::MAX_DIM)));
        }
        if points.len() != dim * weights.len() {
            return Err(invalid("points", "coordinate count does not match weights"));
        }
        if weights.is_empty() {
            return Err(invalid("weights", "measure has no atoms"));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(invalid("weights", format!("weight {w} is not a positive finite number")));
        }
        if points.iter().any(|x| !x.is_finite() || x.abs() >= crate::dyadic::MAX_COORD) {
            return Err(invalid("points", "coordinates must be finite and below 2^40 in size"));
        }
        if !(growth_d > 0.0 && growth_d <= dim as f64) {
            return Err(invalid("growth_d", format!("d = {growth_d} must lie in (0, {dim}]")));
        }
        let mut m = AtomicMeasure {
            dim,
            points,
            weights,
            growth_d,
            growth_constant: 1.0,
            native_r_min: 0.0,
        };
        let sep = m.min_separation();
        if sep <= 0.0 {
            return Err(invalid("points", "atoms must be pairwise distinct"));
        }
        m.native_r_min = sep;
        Ok(m)
    }

    /// Sets the growth constant `C` in `mu(B(x,r)) <= C r^d` that the builder
    /// can certify, together with the smallest radius for which it holds.
    pub fn with_growth_bound(mut self, constant: f64, r_min: f64) -> Self {
        self.growth_constant = constant;
        self.native_r_min = r_min;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn growth_d(&self) -> f64 {
        self.growth_d
    }

    pub fn growth_constant(&self) -> f64 {
        self.growth_constant
    }

    pub fn native_r_min(&self) -> f64 {
        self.native_r_min
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.point(i), self.point(j));
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    pub fn dist_linf(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.point(i), self.point(j));
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    /// Smallest Euclidean distance between two atoms (infinite for one atom).
    pub fn min_separation(&self) -> f64 {
        self.min_pair(|i, j| self.dist(i, j))
    }

    /// Smallest sup-norm distance between two atoms.
    pub fn min_separation_linf(&self) -> f64 {
        self.min_pair(|i, j| self.dist_linf(i, j))
    }

    fn min_pair(&self, d: impl Fn(usize, usize) -> f64) -> f64 {
        // Sort along the first axis and prune by the first-coordinate gap.
        let n = self.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| self.point(a)[0].total_cmp(&self.point(b)[0]));
        let mut best = f64::INFINITY;
        for a in 0..n {
            for b in a + 1..n {
                let (i, j) = (idx[a], idx[b]);
                if self.point(j)[0] - self.point(i)[0] >= best {
                    break;
                }
                best = best.min(d(i, j));
            }
        }
        best
    }

    /// Euclidean diameter of the support.
    pub fn diameter(&self) -> f64 {
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for i in 0..self.len() {
            for (c, &x) in self.point(i).iter().enumerate() {
                lo[c] = lo[c].min(x);
                hi[c] = hi[c].max(x);
            }
        }
        // Bounding-box diagonal is an upper bound; refine exactly for small sets.
        if self.len() <= 4096 {
            let mut best: f64 = 0.0;
            for i in 0..self.len() {
                for j in i + 1..self.len() {
                    best = best.max(self.dist(i, j));
                }
            }
            best
        } else {
            lo.iter().zip(&hi).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt()
        }
    }

    /// Restriction to a subset of atoms, keeping the declared growth data.
    pub fn restrict(&self, atoms: &[usize]) -> Result<Self> {
        let mut points = Vec::with_capacity(atoms.len() * self.dim);
        let mut weights = Vec::with_capacity(atoms.len());
        for &i in atoms {
            points.extend_from_slice(self.point(i));
            weights.push(self.weights[i]);
        }
        let m = AtomicMeasure::new(self.dim, points, weights, self.growth_d)?;
        Ok(m.with_growth_bound(self.growth_constant, self.native_r_min))
    }

    /// CSV export, one row per atom: coordinates then weight.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.dim).map(|c| format!("x{c}")).collect();
        header.push("weight".into());
        wr.write_record(&header)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.point(i).iter().map(|x| format!("{x:.17e}")).collect();
            row.push(format!("{:.17e}", self.weights[i]));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// `sum over atoms in region of f(atom) * weight(atom)`.
pub fn integrate(m: &AtomicMeasure, f: &[C64], region: impl Fn(&[f64]) -> bool) -> C64 {
    let mut s = C64::new(0.0, 0.0);
    for i in 0..m.len() {
        if region(m.point(i)) {
            s += f[i] * m.weight(i);
        }
    }
    s
}

/// Outcome of [`growth_check`].
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GrowthReport {
    /// `max mu(B(x,r)) / r^d` over the scanned balls.
    pub worst_ratio: f64,
    /// `worst_ratio` divided by the builder's certified constant.
    pub normalized_ratio: f64,
    pub r_min: f64,
    pub samples: usize,
    pub pass: bool,
}

/// Scans closed balls centred at atoms with radii in `[r_min, diam]`.
///
/// `mu(B(x,r))` is a step function of `r`, so the supremum over a radius range
/// is attained at `r_min` or at a distance to another atom; every such radius
/// is evaluated. At most `n_samples` centres are used (evenly strided).
pub fn growth_check(m: &AtomicMeasure, d: f64, n_samples: usize, r_min: f64) -> Result<GrowthReport> {
    if !(r_min > 0.0) {
        return Err(invalid("r_min", "must be positive; atomic measures violate the bound as r -> 0"));
    }
    if !(d > 0.0) {
        return Err(invalid("d", "must be positive"));
    }
    let n = m.len();
    let centres = n_samples.clamp(1, n);
    let stride = n as f64 / centres as f64;
    let mut worst: f64 = 0.0;
    let mut dists: Vec<(f64, f64)> = Vec::with_capacity(n);
    for s in 0..centres {
        let c = ((s as f64) * stride) as usize;
        dists.clear();
        for j in 0..n {
            dists.push((m.dist(c, j), m.weight(j)));
        }
        dists.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut mass = 0.0;
        let mut k = 0;
        // Ball of radius r_min.
        while k < n && dists[k].0 <= r_min {
            mass += dists[k].1;
            k += 1;
        }
        worst = worst.max(mass / r_min.powf(d));
        while k < n {
            let r = dists[k].0;
            while k < n && dists[k].0 <= r {
                mass += dists[k].1;
                k += 1;
            }
            worst = worst.max(mass / r.powf(d));
        }
    }
    let normalized = worst / m.growth_constant();
    Ok(GrowthReport {
        worst_ratio: worst,
        normalized_ratio: normalized,
        r_min,
        samples: centres,
        pass: normalized <= 1.0 + GROWTH_TOL,
    })
}

/// A bounded complex function on the atoms, stored with sup norm at most one.
#[derive(Clone, Debug)]
pub struct AccretiveFn {
    values: Vec<C64>,
    delta: f64,
    sup_norm: f64,
    scale: f64,
}

impl AccretiveFn {
    /// Builds `b`. Values with sup norm above one are rescaled and the factor
    /// recorded. Without an explicit `delta` a certified lower bound for every
    /// average is used: `min|b| * cos(w/2)` where `w < pi` is the angular width
    /// of the values.
    pub fn new(values: Vec<C64>, delta: Option<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("b", "no values"));
        }
        if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(invalid("b", "values must be finite"));
        }
        let sup = values.iter().map(|v| v.norm()).fold(0.0, f64::max);
        if sup == 0.0 {
            return Err(invalid("b", "b vanishes identically"));
        }
        let scale = if sup > 1.0 { 1.0 / sup } else { 1.0 };
        let values: Vec<C64> = values.into_iter().map(|v| v * scale).collect();
        let sup_norm = sup * scale;
        let delta = match delta {
            Some(dl) => dl,
            None => certified_delta(&values).ok_or_else(|| {
                invalid("b.delta", "values spread over an arc of width >= pi; give delta explicitly")
            })?,
        };
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(invalid("b.delta", format!("delta = {delta} must lie in (0, 1]")));
        }
        Ok(AccretiveFn { values, delta, sup_norm, scale })
    }

    pub fn one(n: usize) -> Self {
        AccretiveFn::new(vec![C64::new(1.0, 0.0); n], Some(1.0)).expect("constant one is accretive")
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn value(&self, i: usize) -> C64 {
        self.values[i]
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn sup_norm(&self) -> f64 {
        self.sup_norm
    }

    /// Factor applied by the constructor (1 when no rescaling was needed).
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn certified_delta(values: &[C64]) -> Option<f64> {
    let min_mod = values.iter().map(|v| v.norm()).fold(f64::INFINITY, f64::min);
    if min_mod == 0.0 {
        return None;
    }
    // Angular width: rotate by the argument of the sum, then take the spread.
    let s: C64 = values.iter().sum();
    if s.norm() == 0.0 {
        return None;
    }
    let rot = s.conj() / s.norm();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        let a = (v * rot).arg();
        lo = lo.min(a);
        hi = hi.max(a);
    }
    let width = hi - lo;
    if width >= std::f64::consts::PI {
        return None;
    }
    Some((min_mod * (width / 2.0).cos()).min(1.0))
}

/// `min over cubes of |integral_Q b| / mu(Q)`; zero-mass cubes are skipped.
/// Returns infinity when every cube is empty.
pub fn accretivity_check(m: &AtomicMeasure, b: &AccretiveFn, cubes: &[Cube]) -> f64 {
    let mut best = f64::INFINITY;
    for q in cubes {
        let mut mass = 0.0;
        let mut s = C64::new(0.0, 0.0);
        for i in 0..m.len() {
            if q.contains_point(m.point(i)) {
                mass += m.weight(i);
                s += b.value(i) * m.weight(i);
            }
        }
        if mass > 0.0 {
            best = best.min(s.norm() / mass);
        }
    }
    best
}

/// JSON description of a measure.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureSpec {
    /// Cell-centred uniform grid on `[0,1)^N` with `resolution` atoms per axis.
    LebesgueGrid {
        #[serde(default = "one_usize")]
        dim: usize,
        resolution: usize,
    },
    /// Self-similar Cantor set with `2^dim` corner pieces per generation.
    Cantor {
        ratio: f64,
        depth: u32,
        #[serde(default = "one_usize")]
        dim: usize,
    },
    /// Arclength measure on the graph of a function over `[-1, 1]` in `R^2`.
    GraphArclength {
        #[serde(default = "abs_name")]
        function: String,
        samples: usize,
    },
    Custom {
        points: Vec<Vec<f64>>,
        weights: Vec<f64>,
        d: f64,
    },
}

fn one_usize() -> usize {
    1
}

fn abs_name() -> String {
    "abs".into()
}

/// Builds a measure from its description.
pub fn build_measure(spec: &MeasureSpec) -> Result<AtomicMeasure> {
    match spec {
        MeasureSpec::LebesgueGrid { dim, resolution } => lebesgue_grid(*dim, *resolution),
        MeasureSpec::Cantor { ratio, depth, dim } => cantor(*ratio, *depth, *dim),
        MeasureSpec::GraphArclength { function, samples } => graph_arclength(function, *samples),
        MeasureSpec::Custom { points, weights, d } => {
            let dim = points.first().map(|p| p.len()).unwrap_or(0);
            if points.iter().any(|p| p.len() != dim) {
                return Err(invalid("points", "all points need the same dimension"));
            }
            AtomicMeasure::new(dim, points.concat(), weights.clone(), *d)
        }
    }
}

/// Uniform grid of `resolution^dim` cell-centred atoms on `[0,1)^dim`.
/// Certified growth: `mu(B(x,r)) <= (2r + h)^N <= 3^N r^N` for `r >= h`.
pub fn lebesgue_grid(dim: usize, resolution: usize) -> Result<AtomicMeasure> {
    if resolution == 0 {
        return Err(invalid("resolution", "must be positive"));
    }
    if dim == 0 || dim > crate::dyadic::MAX_DIM {
        return Err(invalid("dim", "unsupported dimension"));
    }
    let n = resolution.pow(dim as u32);
    let h = 1.0 / resolution as f64;
    let mut points = Vec::with_capacity(n * dim);
    for k in 0..n {
        let mut r = k;
        for _ in 0..dim {
            points.push((((r % resolution) as f64) + 0.5) * h);
            r /= resolution;
        }
    }
    let weights = vec![1.0 / n as f64; n];
    let m = AtomicMeasure::new(dim, points, weights, dim as f64)?;
    Ok(m.with_growth_bound(3f64.powi(dim as i32), h))
}

/// Cantor measure with contraction `ratio` in `(0, 1/2)` and `2^dim` pieces per
/// generation (for `dim = 2` the four-corner set). Atoms sit at the centres of
/// the generation-`depth` cells, each of weight `2^(-dim*depth)`.
/// Growth exponent `d = dim * ln 2 / ln(1/ratio)`.
pub fn cantor(ratio: f64, depth: u32, dim: usize) -> Result<AtomicMeasure> {
    if !(ratio > 0.0 && ratio < 0.5) {
        return Err(invalid("ratio", format!("contraction ratio {ratio} must lie in (0, 1/2)")));
    }
    if dim == 0 || dim > crate::dyadic::MAX_DIM {
        return Err(invalid("dim", "unsupported dimension"));
    }
    if (dim as u32) * depth > 20 {
        return Err(invalid("depth", "too many atoms (at most 2^20)"));
    }
    // Left corners per axis of the generation-depth intervals.
    let mut corners = vec![0.0f64];
    let mut len = 1.0;
    for _ in 0..depth {
        let next_len = len * ratio;
        let mut next = Vec::with_capacity(corners.len() * 2);
        for &c in &corners {
            next.push(c);
            next.push(c + len - next_len);
        }
        corners = next;
        len = next_len;
    }
    let per_axis = corners.len();
    let n = per_axis.pow(dim as u32);
    let mut points = Vec::with_capacity(n * dim);
    for k in 0..n {
        let mut r = k;
        for _ in 0..dim {
            points.push(corners[r % per_axis] + len / 2.0);
            r /= per_axis;
        }
    }
    let weights = vec![1.0 / n as f64; n];
    let d = dim as f64 * 2f64.ln() / (1.0 / ratio).ln();
    let m = AtomicMeasure::new(dim, points, weights, d.min(dim as f64))?;
    // A ball of radius r in (ratio^(j+1), ratio^j] meets at most `per` cells of
    // generation j per axis; each has mass 2^(-dim j) < 2^dim r^d.
    let per = (2.0 * ratio / (1.0 - 2.0 * ratio)).floor() + 1.0;
    let constant = per.powi(dim as i32) * 2f64.powi(dim as i32);
    Ok(m.with_growth_bound(constant, len))
}

/// Arclength measure of `y = f(x)` on `[-1, 1]`: `samples` equal x-segments,
/// one atom per segment at its midpoint carrying the segment length.
pub fn graph_arclength(function: &str, samples: usize) -> Result<AtomicMeasure> {
    if samples < 2 {
        return Err(invalid("samples", "need at least two segments"));
    }
    let (f, lip): (fn(f64) -> f64, f64) = match function {
        "abs" => (|x: f64| x.abs(), 1.0),
        "zigzag" => (|x: f64| (x * 4.0 - (x * 4.0).round()).abs() / 4.0, 1.0),
        other => return Err(invalid("function", format!("unknown graph function `{other}`"))),
    };
    let dx = 2.0 / samples as f64;
    let mut points = Vec::with_capacity(samples * 2);
    let mut weights = Vec::with_capacity(samples);
    let mut seg_min = f64::INFINITY;
    for k in 0..samples {
        let a = -1.0 + k as f64 * dx;
        let b = a + dx;
        let mid = 0.5 * (a + b);
        let len = (dx * dx + (f(b) - f(a)).powi(2)).sqrt();
        seg_min = seg_min.min(len);
        points.push(mid);
        points.push(f(mid));
        weights.push(len);
    }
    let m = AtomicMeasure::new(2, points, weights, 1.0)?;
    // Atoms inside B(x,r) have x-midpoints in an interval of length 2r, so their
    // segments cover x-length at most 2r + dx: mass <= (2r+dx) sqrt(1+L^2).
    let constant = 3.0 * (1.0 + lip * lip).sqrt();
    Ok(m.with_growth_bound(constant, seg_min))
}

/// JSON description of an accretive function.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AccretiveSpec {
    One,
    /// `b(x) = exp(i pi <freq, x>)`.
    Phase { freq: Vec<f64> },
    /// `b(x) = exp(i theta_x)` with `theta_x` uniform in `[-max_angle, max_angle]`.
    RandomPhase { max_angle: f64, seed: u64 },
    Values { re: Vec<f64>, im: Vec<f64>, delta: Option<f64> },
}

pub fn build_accretive(spec: &AccretiveSpec, m: &AtomicMeasure) -> Result<AccretiveFn> {
    use rand::Rng;
    match spec {
        AccretiveSpec::One => Ok(AccretiveFn::one(m.len())),
        AccretiveSpec::Phase { freq } => {
            if freq.len() != m.dim() {
                return Err(invalid("b.freq", "needs one frequency per coordinate"));
            }
            let v = (0..m.len())
                .map(|i| {
                    let t: f64 = m.point(i).iter().zip(freq).map(|(x, a)| x * a).sum();
                    C64::from_polar(1.0, std::f64::consts::PI * t)
                })
                .collect();
            AccretiveFn::new(v, None)
        }
        AccretiveSpec::RandomPhase { max_angle, seed } => {
            if !(*max_angle >= 0.0 && *max_angle < std::f64::consts::FRAC_PI_2) {
                return Err(invalid("b.max_angle", "must lie in [0, pi/2)"));
            }
            let mut rng = crate::rng::root(*seed);
            let v = (0..m.len())
                .map(|_| C64::from_polar(1.0, rng.gen_range(-1.0..=1.0) * max_angle))
                .collect();
            AccretiveFn::new(v, Some(max_angle.cos().max(f64::MIN_POSITIVE)))
        }
        AccretiveSpec::Values { re, im, delta } => {
            if re.len() != m.len() || im.len() != m.len() {
                return Err(invalid("b.values", "need one value per atom"));
            }
            AccretiveFn::new(re.iter().zip(im).map(|(a, b)| C64::new(*a, *b)).collect(), *delta)
        }
    }
}
