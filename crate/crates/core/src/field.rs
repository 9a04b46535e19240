//! Atom-indexed vector fields with values in a finite-dimensional space `X`.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub type C64 = Complex64;

/// The target space `X = l_q^m` over the complex numbers. `m = 1` is the
/// scalar case, where `q` is irrelevant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormSpace {
    pub q: f64,
    pub dim: usize,
}

impl NormSpace {
    pub fn scalar() -> Self {
        NormSpace { q: 2.0, dim: 1 }
    }

    pub fn lq(q: f64, dim: usize) -> Result<Self> {
        let s = NormSpace { q, dim };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(invalid("x.dim", "must be at least 1"));
        }
        if !(self.q >= 1.0) {
            return Err(invalid("x.q", "must lie in [1, inf]"));
        }
        Ok(())
    }

    /// Norm of one vector in `X`.
    pub fn norm(&self, v: &[C64]) -> f64 {
        if v.len() == 1 {
            return v[0].norm();
        }
        if self.q.is_infinite() {
            v.iter().map(|z| z.norm()).fold(0.0, f64::max)
        } else if self.q == 2.0 {
            v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
        } else if self.q == 1.0 {
            v.iter().map(|z| z.norm()).sum()
        } else {
            v.iter().map(|z| z.norm().powf(self.q)).sum::<f64>().powf(1.0 / self.q)
        }
    }

    /// The dual space `l_{q'}^m`.
    pub fn dual(&self) -> Self {
        let q = if self.q == 1.0 {
            f64::INFINITY
        } else if self.q.is_infinite() {
            1.0
        } else {
            self.q / (self.q - 1.0)
        };
        NormSpace { q, dim: self.dim }
    }
}

/// Conjugate exponent of `p`.
pub fn conjugate_exponent(p: f64) -> f64 {
    if p == 1.0 {
        f64::INFINITY
    } else if p.is_infinite() {
        1.0
    } else {
        p / (p - 1.0)
    }
}

/// A function from atoms to `X`, stored atom-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    pub space: NormSpace,
    values: Vec<C64>,
}

impl VectorField {
    pub fn zeros(n_atoms: usize, space: NormSpace) -> Self {
        VectorField { space, values: vec![C64::new(0.0, 0.0); n_atoms * space.dim] }
    }

    pub fn from_values(values: Vec<C64>, space: NormSpace) -> Result<Self> {
        space.validate()?;
        if values.len() % space.dim != 0 {
            return Err(invalid("values", "length is not a multiple of the space dimension"));
        }
        Ok(VectorField { space, values })
    }

    /// Scalar field from complex values.
    pub fn scalar(values: Vec<C64>) -> Self {
        VectorField { space: NormSpace::scalar(), values }
    }

    pub fn scalar_real(values: &[f64]) -> Self {
        Self::scalar(values.iter().map(|&v| C64::new(v, 0.0)).collect())
    }

    /// Independent complex Gaussian entries.
    pub fn random_gaussian<R: Rng>(rng: &mut R, n_atoms: usize, space: NormSpace) -> Self {
        let values = (0..n_atoms * space.dim)
            .map(|_| {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                C64::new(re, im)
            })
            .collect();
        VectorField { space, values }
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.space.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.space.dim
    }

    pub fn at(&self, atom: usize) -> &[C64] {
        let d = self.space.dim;
        &self.values[atom * d..(atom + 1) * d]
    }

    pub fn at_mut(&mut self, atom: usize) -> &mut [C64] {
        let d = self.space.dim;
        &mut self.values[atom * d..(atom + 1) * d]
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [C64] {
        &mut self.values
    }

    /// `L^p(mu; X)` norm with atom weights `w`. `p = inf` gives the sup over atoms.
    pub fn lp_norm(&self, weights: &[f64], p: f64) -> f64 {
        if p.is_infinite() {
            return (0..self.len()).map(|i| self.space.norm(self.at(i))).fold(0.0, f64::max);
        }
        let s: f64 = (0..self.len())
            .map(|i| weights[i] * self.space.norm(self.at(i)).powf(p))
            .sum();
        s.powf(1.0 / p)
    }

    pub fn add_assign(&mut self, other: &VectorField) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += *b;
        }
    }

    pub fn sub(&self, other: &VectorField) -> VectorField {
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        VectorField { space: self.space, values }
    }

    pub fn scale(&self, c: C64) -> VectorField {
        VectorField { space: self.space, values: self.values.iter().map(|v| v * c).collect() }
    }

    /// Pointwise product with a scalar function.
    pub fn mul_scalar_fn(&self, s: &[C64]) -> VectorField {
        let d = self.space.dim;
        let values = self.values.iter().enumerate().map(|(k, v)| v * s[k / d]).collect();
        VectorField { space: self.space, values }
    }

    /// Maximum absolute entry difference.
    pub fn max_abs_diff(&self, other: &VectorField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|a| a.norm()).fold(0.0, f64::max)
    }
}

/// Bilinear pairing `sum_x w_x sum_c g_c(x) f_c(x)`.
pub fn pair(weights: &[f64], g: &VectorField, f: &VectorField) -> C64 {
    let d = f.dim();
    let mut s = C64::new(0.0, 0.0);
    for (i, &w) in weights.iter().enumerate() {
        let mut t = C64::new(0.0, 0.0);
        for c in 0..d {
            t += g.values[i * d + c] * f.values[i * d + c];
        }
        s += t * w;
    }
    s
}

/// Sesquilinear pairing `sum_x w_x sum_c conj(g_c(x)) f_c(x)`.
pub fn inner(weights: &[f64], g: &VectorField, f: &VectorField) -> C64 {
    let d = f.dim();
    let mut s = C64::new(0.0, 0.0);
    for (i, &w) in weights.iter().enumerate() {
        let mut t = C64::new(0.0, 0.0);
        for c in 0..d {
            t += g.values[i * d + c].conj() * f.values[i * d + c];
        }
        s += t * w;
    }
    s
}

/// Dot product of two vectors of `X` (bilinear).
#[inline]
pub fn dot(a: &[C64], b: &[C64]) -> C64 {
    let mut s = C64::new(0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}
