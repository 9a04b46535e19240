//! Decoupling diagnostics: tangent sequences over a decreasing family of
//! partitions, averaged kernels, and R-bounds of operator families.

use nalgebra::{DMatrix, DVector};
use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::carleson::sign_moments;
use crate::error::{invalid, Error, Result};
use crate::field::{NormSpace, VectorField, C64};
use crate::filtration::Filtration;
use crate::rng;
use crate::stats::mean_stderr;

/// Partitions `A_k` (the cells of a filtration, finest first) with one function
/// per level: `f[l](x) = f_A(x)` for the level-`l` cell `A` containing `x`.
/// `f_A` must be measurable with respect to the next finer partition.
#[derive(Clone, Debug)]
pub struct PartitionSystem {
    pub filt: Filtration,
    pub f: Vec<VectorField>,
}

impl PartitionSystem {
    pub fn new(filt: Filtration, f: Vec<VectorField>) -> Result<Self> {
        if f.len() != filt.num_levels() {
            return Err(invalid("f", "one field per level is required"));
        }
        let space = f[0].space;
        for (l, v) in f.iter().enumerate() {
            if v.len() != filt.len() || v.space != space {
                return Err(invalid("f", format!("field {l} has the wrong shape")));
            }
            if l > 0 && !filt.is_measurable(l - 1, v, 1e-12) {
                return Err(Error::Measurability(format!(
                    "f at level index {l} is not measurable for level index {}",
                    l - 1
                )));
            }
        }
        Ok(PartitionSystem { filt, f })
    }

    pub fn space(&self) -> NormSpace {
        self.f[0].space
    }

    /// Level `l` gets a Gaussian field averaged over the cells of level `l - 1`.
    pub fn random<R: Rng>(filt: Filtration, space: NormSpace, rng: &mut R) -> Self {
        let f = (0..filt.num_levels())
            .map(|l| {
                let raw = VectorField::random_gaussian(rng, filt.len(), space);
                if l == 0 {
                    raw
                } else {
                    filt.cond_expectation(l - 1, &raw)
                }
            })
            .collect();
        PartitionSystem { filt, f }
    }

    fn terms(&self) -> Vec<(usize, &[C64])> {
        self.f.iter().enumerate().map(|(l, v)| (l, v.values())).collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TangentReport {
    pub p: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    pub lhs_stderr: f64,
    pub rhs_stderr: f64,
    pub trials: usize,
}

fn root_with_stderr(v: &[f64], p: f64) -> (f64, f64) {
    let (m, se) = mean_stderr(v);
    if m <= 0.0 {
        return (0.0, 0.0);
    }
    let r = m.powf(1.0 / p);
    (r, se * r / (p * m))
}

/// `|| sum_k eps_k sum_A f_A(x) ||_p` against the tangent sequence
/// `|| sum_k eps_k sum_A 1_A(x) f_A(y_A) ||_p` with `y_A ~ mu(A)^{-1} mu|_A`,
/// both in `L^p(P x mu; X)`. The two sides share their signs per trial.
pub fn tangent_equivalence(sys: &PartitionSystem, p: f64, trials: usize, seed: u64) -> Result<TangentReport> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(invalid("p", "must lie in [1, inf)"));
    }
    if trials == 0 {
        return Err(invalid("trials", "must be positive"));
    }
    let filt = &sys.filt;
    let w = filt.weights();
    let n = filt.len();
    let nl = filt.num_levels();
    let space = sys.space();
    let d = space.dim;
    let samplers: Vec<Vec<Option<WeightedIndex<f64>>>> = (0..nl)
        .map(|l| {
            filt.cells(l)
                .iter()
                .map(|atoms| WeightedIndex::new(atoms.iter().map(|&a| w[a])).ok())
                .collect()
        })
        .collect();
    let per_trial: Vec<(f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::substream(seed, t as u64);
            let eps: Vec<f64> = (0..nl).map(|_| if r.gen::<bool>() { 1.0 } else { -1.0 }).collect();
            let ys: Vec<Vec<usize>> = (0..nl)
                .map(|l| {
                    filt.cells(l)
                        .iter()
                        .zip(&samplers[l])
                        .map(|(atoms, s)| s.as_ref().map_or(atoms[0], |s| atoms[s.sample(&mut r)]))
                        .collect()
                })
                .collect();
            let mut a = vec![C64::new(0.0, 0.0); d];
            let mut b = vec![C64::new(0.0, 0.0); d];
            let (mut lhs, mut rhs) = (0.0, 0.0);
            for x in 0..n {
                a.iter_mut().chain(b.iter_mut()).for_each(|v| *v = C64::new(0.0, 0.0));
                for l in 0..nl {
                    let y = ys[l][filt.label(l, x)];
                    let (fx, fy) = (sys.f[l].at(x), sys.f[l].at(y));
                    for c in 0..d {
                        a[c] += fx[c] * eps[l];
                        b[c] += fy[c] * eps[l];
                    }
                }
                lhs += w[x] * space.norm(&a).powf(p);
                rhs += w[x] * space.norm(&b).powf(p);
            }
            (lhs, rhs)
        })
        .collect();
    let l: Vec<f64> = per_trial.iter().map(|v| v.0).collect();
    let r: Vec<f64> = per_trial.iter().map(|v| v.1).collect();
    let (lhs, lhs_stderr) = root_with_stderr(&l, p);
    let (rhs, rhs_stderr) = root_with_stderr(&r, p);
    let ratio = if rhs > 0.0 { lhs / rhs } else { 0.0 };
    Ok(TangentReport { p, lhs, rhs, ratio, lhs_stderr, rhs_stderr, trials })
}

/// Deterministic sign in `{-1, 1}` for a kernel entry, from a seed.
pub fn hashed_sign(seed: u64, l: usize, cell: usize, x: usize, z: usize) -> f64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [l, cell, x, z] {
        h = (h ^ v as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    if h & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AveragedKernelReport {
    pub p: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    pub exact: bool,
    pub max_kernel: f64,
}

/// Kernel `k(l, cell, x, z)` for `x, z` in the same level-`l` cell.
pub type CellKernel<'a> = &'a (dyn Fn(usize, usize, usize, usize) -> C64 + Sync);

/// `|| sum_k eps_k sum_A 1_A(x) mu(A)^{-1} int_A k_A(x, z) f_A(z) dmu(z) ||_p`
/// against `|| sum_k eps_k sum_A f_A ||_p`. Requires `|k_A| <= 1`.
pub fn averaged_kernel_bound(
    sys: &PartitionSystem,
    kernel: CellKernel,
    p: f64,
    trials: usize,
    seed: u64,
) -> Result<AveragedKernelReport> {
    let filt = &sys.filt;
    let w = filt.weights();
    let space = sys.space();
    let d = space.dim;
    let mut max_kernel: f64 = 0.0;
    let mut avg = Vec::with_capacity(filt.num_levels());
    for l in 0..filt.num_levels() {
        let mut g = VectorField::zeros(filt.len(), space);
        for (c, atoms) in filt.cells(l).iter().enumerate() {
            let mass = filt.mass(l, c);
            for &x in atoms {
                let mut s = vec![C64::new(0.0, 0.0); d];
                for &z in atoms {
                    let k = kernel(l, c, x, z);
                    max_kernel = max_kernel.max(k.norm());
                    if k.norm() > 1.0 + 1e-12 {
                        return Err(Error::Precondition(format!(
                            "|k_A(x, z)| = {:.6} exceeds 1 at level index {l}",
                            k.norm()
                        )));
                    }
                    for (sc, v) in s.iter_mut().zip(sys.f[l].at(z)) {
                        *sc += k * v * w[z];
                    }
                }
                if mass > 0.0 {
                    for (o, v) in g.at_mut(x).iter_mut().zip(&s) {
                        *o = v / mass;
                    }
                }
            }
        }
        avg.push(g);
    }
    let nl = filt.num_levels();
    let at: Vec<(usize, &[C64])> = avg.iter().enumerate().map(|(l, v)| (l, v.values())).collect();
    let (ml, e1) = sign_moments(space, filt.len(), &at, nl, p, trials, seed, false);
    let (mr, e2) = sign_moments(space, filt.len(), &sys.terms(), nl, p, trials, seed, false);
    let lhs = (0..filt.len()).map(|x| w[x] * ml[nl - 1][x]).sum::<f64>().powf(1.0 / p);
    let rhs = (0..filt.len()).map(|x| w[x] * mr[nl - 1][x]).sum::<f64>().powf(1.0 / p);
    Ok(AveragedKernelReport { p, lhs, rhs, ratio: if rhs > 0.0 { lhs / rhs } else { 0.0 }, exact: e1 && e2, max_kernel })
}

#[derive(Clone, Debug, Serialize)]
pub struct RBoundReport {
    /// Largest observed ratio; a lower bound for the R-bound.
    pub estimate: f64,
    pub tuples: usize,
    /// Whether every assignment of maps to vectors was tried for each tuple.
    pub exhaustive: bool,
}

const ASSIGNMENT_BUDGET: usize = 4096;

/// Lower estimate of the R-bound of a family of maps on `X = l_q^m`:
/// the largest `(E||sum eps_k T_k xi_k||^2)^{1/2} / (E||sum eps_k xi_k||^2)^{1/2}`
/// over seeded Gaussian tuples `xi_1..xi_n`, together with the single-vector
/// ratios `||T e_i|| / ||e_i||`. The tuples do not depend on the family, so
/// enlarging the family cannot lower the estimate while the assignments are
/// enumerated exhaustively.
pub fn rbound_estimate(
    family: &[DMatrix<C64>],
    space: NormSpace,
    n_vectors: usize,
    trials: usize,
    seed: u64,
) -> Result<RBoundReport> {
    let m = space.dim;
    if family.is_empty() {
        return Err(invalid("family", "must be nonempty"));
    }
    if family.iter().any(|t| t.nrows() != m || t.ncols() != m) {
        return Err(invalid("family", format!("maps must be {m} x {m}")));
    }
    if n_vectors == 0 {
        return Err(invalid("n_vectors", "must be positive"));
    }
    let mut best: f64 = 0.0;
    for t in family {
        for i in 0..m {
            let mut e = DVector::from_element(m, C64::new(0.0, 0.0));
            e[i] = C64::new(1.0, 0.0);
            let te = t * &e;
            best = best.max(space.norm(te.as_slice()));
        }
    }
    let nf = family.len();
    let exhaustive = (nf as f64).powi(n_vectors as i32) <= ASSIGNMENT_BUDGET as f64;
    let rad2 = |vs: &[Vec<C64>]| -> f64 {
        let terms: Vec<(usize, &[C64])> = vs.iter().enumerate().map(|(k, v)| (k, v.as_slice())).collect();
        let (mo, _) = sign_moments(space, 1, &terms, vs.len(), 2.0, 2000, seed, false);
        mo[vs.len() - 1][0].sqrt()
    };
    let per: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::substream(seed, t as u64);
            let xs: Vec<DVector<C64>> = (0..n_vectors)
                .map(|_| {
                    DVector::from_fn(m, |_, _| C64::new(StandardNormal.sample(&mut r), StandardNormal.sample(&mut r)))
                })
                .collect();
            let den = rad2(&xs.iter().map(|x| x.as_slice().to_vec()).collect::<Vec<_>>());
            if den <= 0.0 {
                return 0.0;
            }
            let images: Vec<Vec<Vec<C64>>> =
                family.iter().map(|tm| xs.iter().map(|x| (tm * x).as_slice().to_vec()).collect()).collect();
            let assignments: Vec<Vec<usize>> = if exhaustive {
                (0..nf.pow(n_vectors as u32))
                    .map(|mut a| {
                        (0..n_vectors)
                            .map(|_| {
                                let v = a % nf;
                                a /= nf;
                                v
                            })
                            .collect()
                    })
                    .collect()
            } else {
                let mut ra = rng::substream(rng::derive(seed, "assign"), t as u64);
                (0..64).map(|_| (0..n_vectors).map(|_| ra.gen_range(0..nf)).collect()).collect()
            };
            assignments
                .iter()
                .map(|asg| {
                    let vs: Vec<Vec<C64>> = asg.iter().enumerate().map(|(k, &f)| images[f][k].clone()).collect();
                    rad2(&vs) / den
                })
                .fold(0.0, f64::max)
        })
        .collect();
    best = per.iter().cloned().fold(best, f64::max);
    Ok(RBoundReport { estimate: best, tuples: trials, exhaustive })
}
