//! Sparse trigonometric series on the half-frequency lattice.
//!
//! A [`Series`] stores `Σ_m c_m e^{iν_m x}` with `ν_m = ⟨m,ω⟩/2`. Potentials
//! live on the even sublattice (`m = 2k`), while conjugations built during
//! reduction may use any `m`. On the torus the same data is read at
//! `θ ∈ [0,4π)^d` as `Σ_m c_m e^{i⟨m,θ⟩/2}`.

use crate::lattice::Mode;
use crate::mat2::Mat2;
use crate::potential::QuasiPeriodicPotential;
use num_complex::Complex64;
use std::collections::BTreeMap;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

/// Coefficient algebra: complex scalars or 2×2 complex matrices.
pub trait Coeff:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Neg<Output = Self>
    + Mul<Output = Self>
    + Mul<Complex64, Output = Self>
    + AddAssign
    + PartialEq
    + std::fmt::Debug
{
    fn zero() -> Self;
    fn magnitude(&self) -> f64;
}

impl Coeff for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn magnitude(&self) -> f64 {
        self.norm()
    }
}

impl Coeff for Mat2 {
    fn zero() -> Self {
        Mat2::ZERO
    }
    fn magnitude(&self) -> f64 {
        self.norm()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series<T> {
    terms: BTreeMap<Mode, T>,
}

pub type MatSeries = Series<Mat2>;
pub type ScalarSeries = Series<Complex64>;

/// `ν_m = ⟨m,ω⟩/2`.
#[inline]
pub fn half_freq(m: &Mode, omega: &[f64]) -> f64 {
    0.5 * m.dot(omega)
}

impl<T: Coeff> Default for Series<T> {
    fn default() -> Self {
        Self { terms: BTreeMap::new() }
    }
}

impl<T: Coeff> Series<T> {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: T) -> Self {
        let mut s = Self::zero();
        s.insert(Mode::ZERO, c);
        s
    }

    pub fn from_terms(terms: impl IntoIterator<Item = (Mode, T)>) -> Self {
        let mut s = Self::zero();
        for (m, c) in terms {
            s.add_term(m, c);
        }
        s
    }

    pub fn terms(&self) -> &BTreeMap<Mode, T> {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn get(&self, m: &Mode) -> T {
        self.terms.get(m).copied().unwrap_or_else(T::zero)
    }

    pub fn insert(&mut self, m: Mode, c: T) {
        self.terms.insert(m, c);
    }

    pub fn add_term(&mut self, m: Mode, c: T) {
        *self.terms.entry(m).or_insert_with(T::zero) += c;
    }

    pub fn remove(&mut self, m: &Mode) -> T {
        self.terms.remove(m).unwrap_or_else(T::zero)
    }

    /// Zero mode.
    pub fn mean(&self) -> T {
        self.get(&Mode::ZERO)
    }

    pub fn without_mean(&self) -> Self {
        let mut s = self.clone();
        s.terms.remove(&Mode::ZERO);
        s
    }

    /// `Σ_m |c_m|`, an upper bound for the sup norm.
    pub fn norm(&self) -> f64 {
        self.terms.values().map(|c| c.magnitude()).sum()
    }

    pub fn max_mode(&self) -> i32 {
        self.terms.keys().map(Mode::norm).max().unwrap_or(0)
    }

    /// Drops modes with `|m| > cap` or magnitude `≤ tol`.
    pub fn prune(&mut self, cap: i32, tol: f64) {
        self.terms.retain(|m, c| m.norm() <= cap && c.magnitude() > tol);
    }

    pub fn map(&self, f: impl Fn(&Mode, &T) -> T) -> Self {
        Self { terms: self.terms.iter().map(|(m, c)| (*m, f(m, c))).collect() }
    }

    pub fn scale(&self, s: Complex64) -> Self {
        self.map(|_, c| *c * s)
    }

    /// Cauchy product restricted to output modes with `|m| ≤ cap`.
    pub fn mul_capped(&self, other: &Self, cap: i32, tol: f64) -> Self {
        let rhs: Vec<(Mode, T)> = other.terms.iter().map(|(m, c)| (*m, *c)).collect();
        let mut out = BTreeMap::new();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &rhs {
                let m = *ma + *mb;
                if m.norm() > cap {
                    continue;
                }
                *out.entry(m).or_insert_with(T::zero) += *ca * *cb;
            }
        }
        let mut s = Self { terms: out };
        s.prune(cap, tol);
        s
    }

    /// Left multiplication by a constant coefficient.
    pub fn lmul(&self, c: T) -> Self {
        self.map(|_, x| c * *x)
    }

    pub fn rmul(&self, c: T) -> Self {
        self.map(|_, x| *x * c)
    }

    /// `D_ω`, i.e. `d/dx` along the line.
    pub fn derivative(&self, omega: &[f64]) -> Self {
        self.map(|m, c| *c * Complex64::new(0.0, half_freq(m, omega)))
    }

    /// Value at torus point `θ` (half-angle convention, period `4π`).
    pub fn eval_torus(&self, theta: &[f64]) -> T {
        let mut acc = T::zero();
        for (m, c) in &self.terms {
            acc += *c * Complex64::from_polar(1.0, 0.5 * m.dot(theta));
        }
        acc
    }

    /// Value at `x`, i.e. at `θ = ωx`.
    pub fn eval(&self, x: f64, omega: &[f64]) -> T {
        let mut acc = T::zero();
        for (m, c) in &self.terms {
            acc += *c * Complex64::from_polar(1.0, half_freq(m, omega) * x);
        }
        acc
    }

    /// Values on the uniform grid `x0 + j·dx`, `j < n`, by phase recurrence.
    pub fn eval_uniform(&self, x0: f64, dx: f64, n: usize, omega: &[f64]) -> Vec<T> {
        let mut out = vec![T::zero(); n];
        for (m, c) in &self.terms {
            let nu = half_freq(m, omega);
            let step = Complex64::from_polar(1.0, nu * dx);
            let mut ph = Complex64::from_polar(1.0, nu * x0);
            for (j, o) in out.iter_mut().enumerate() {
                // re-anchor periodically to keep the recurrence from drifting
                if j % 256 == 0 && j > 0 {
                    ph = Complex64::from_polar(1.0, nu * (x0 + j as f64 * dx));
                }
                *o += *c * ph;
                ph *= step;
            }
        }
        out
    }

    /// Multiplies mode `m` by `e^{iν_s x}`, i.e. shifts every index by `s`.
    pub fn shift(&self, s: Mode) -> Self {
        Self { terms: self.terms.iter().map(|(m, c)| (*m + s, *c)).collect() }
    }
}

impl<T: Coeff> Add for &Series<T> {
    type Output = Series<T>;
    fn add(self, o: &Series<T>) -> Series<T> {
        let mut s = self.clone();
        for (m, c) in &o.terms {
            s.add_term(*m, *c);
        }
        s
    }
}

impl<T: Coeff> Sub for &Series<T> {
    type Output = Series<T>;
    fn sub(self, o: &Series<T>) -> Series<T> {
        let mut s = self.clone();
        for (m, c) in &o.terms {
            s.add_term(*m, -*c);
        }
        s
    }
}

impl MatSeries {
    pub fn identity() -> Self {
        Self::constant(Mat2::IDENTITY)
    }

    /// Entrywise adjugate; the pointwise inverse when `det ≡ 1`.
    pub fn adj(&self) -> Self {
        self.map(|_, c| c.adj())
    }

    pub fn entry(&self, i: usize, j: usize) -> ScalarSeries {
        let mut s = ScalarSeries::zero();
        for (m, c) in &self.terms {
            s.insert(*m, c.get(i, j));
        }
        s
    }

    /// `exp(W)` by Taylor series; terms are summed until they drop below `tol`.
    pub fn exp_capped(&self, cap: i32, tol: f64) -> Self {
        let mut sum = Self::identity();
        let mut term = Self::identity();
        for n in 1..60 {
            term = term.mul_capped(self, cap, tol).scale(Complex64::new(1.0 / n as f64, 0.0));
            if term.is_empty() {
                break;
            }
            sum = &sum + &term;
            if term.norm() < tol {
                break;
            }
        }
        sum.prune(cap, tol);
        sum
    }

    /// `F₀ = [[0,0],[V,0]]` with `V`'s modes placed at `m = 2k`.
    pub fn potential_block(v: &QuasiPeriodicPotential) -> Self {
        let zero = Complex64::new(0.0, 0.0);
        Self::from_terms(v.coeffs().iter().map(|(k, c)| (k.scale(2), Mat2::new(zero, zero, *c, zero))))
    }
}

impl ScalarSeries {
    /// Scalar series of a potential, modes placed at `m = 2k`.
    pub fn from_potential(v: &QuasiPeriodicPotential) -> Self {
        Self::from_terms(v.coeffs().iter().map(|(k, c)| (k.scale(2), *c)))
    }

    pub fn eval_real(&self, x: f64, omega: &[f64]) -> f64 {
        self.eval(x, omega).re
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::FrequencyVector;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn product_matches_pointwise_product() {
        let omega = FrequencyVector::golden_pair().omega().to_vec();
        let a = ScalarSeries::from_terms([
            (Mode::from_slice(&[1, 0]), c(0.3, 0.1)),
            (Mode::from_slice(&[0, -1]), c(-0.2, 0.4)),
            (Mode::ZERO, c(1.0, 0.0)),
        ]);
        let b = ScalarSeries::from_terms([
            (Mode::from_slice(&[1, 1]), c(0.5, 0.0)),
            (Mode::from_slice(&[-2, 0]), c(0.0, -0.7)),
        ]);
        let p = a.mul_capped(&b, 10, 0.0);
        for x in [0.0, 0.37, -4.2] {
            let lhs = p.eval(x, &omega);
            let rhs = a.eval(x, &omega) * b.eval(x, &omega);
            assert!((lhs - rhs).norm() < 1e-14);
        }
    }

    #[test]
    fn derivative_matches_difference_quotient() {
        let omega = FrequencyVector::golden_pair().omega().to_vec();
        let a = ScalarSeries::from_terms([
            (Mode::from_slice(&[1, 0]), c(0.3, 0.1)),
            (Mode::from_slice(&[3, -1]), c(-0.2, 0.4)),
        ]);
        let d = a.derivative(&omega);
        let (x, h) = (0.8, 1e-5);
        let fd = (a.eval(x + h, &omega) - a.eval(x - h, &omega)) / (2.0 * h);
        assert!((d.eval(x, &omega) - fd).norm() < 1e-8);
    }

    #[test]
    fn exponential_of_nilpotent_is_exact() {
        // W = [[0,w],[0,0]] constant: exp W = I + W
        let w = Mat2::new(c(0.0, 0.0), c(0.25, 0.0), c(0.0, 0.0), c(0.0, 0.0));
        let e = MatSeries::constant(w).exp_capped(4, 1e-18);
        assert!((e.mean() - (Mat2::IDENTITY + w)).norm() < 1e-15);
    }

    #[test]
    fn exponential_has_unit_determinant_for_traceless_input() {
        let omega = FrequencyVector::golden_pair().omega().to_vec();
        let w = MatSeries::from_terms([
            (Mode::from_slice(&[2, 0]), Mat2::new(c(0.01, 0.0), c(0.02, 0.01), c(-0.01, 0.0), c(-0.01, 0.0))),
            (Mode::from_slice(&[-2, 0]), Mat2::new(c(0.01, 0.0), c(0.02, -0.01), c(-0.01, 0.0), c(-0.01, 0.0))),
        ]);
        let z = w.exp_capped(30, 1e-18);
        for x in [0.0, 1.3, 7.9] {
            let det = z.eval(x, &omega).det();
            assert!((det - c(1.0, 0.0)).norm() < 1e-13, "{det}");
        }
    }

    #[test]
    fn uniform_evaluation_agrees_with_direct() {
        let omega = FrequencyVector::golden_pair().omega().to_vec();
        let a = ScalarSeries::from_terms([
            (Mode::from_slice(&[1, 2]), c(0.3, 0.1)),
            (Mode::from_slice(&[-3, 1]), c(-0.2, 0.4)),
        ]);
        let vals = a.eval_uniform(-20.0, 0.05, 1000, &omega);
        for j in [0, 1, 255, 256, 999] {
            let x = -20.0 + j as f64 * 0.05;
            assert!((vals[j] - a.eval(x, &omega)).norm() < 1e-12);
        }
    }

    #[test]
    fn potential_block_reproduces_potential() {
        let f = FrequencyVector::golden_pair();
        let v = QuasiPeriodicPotential::cosine_sum(f.clone(), &[0.3, 0.2], 0.5).unwrap();
        let blk = MatSeries::potential_block(&v);
        for x in [0.0, 2.5] {
            let m = blk.eval(x, f.omega());
            assert!((m.get(1, 0).re - v.eval(x)).abs() < 1e-14);
            assert!(m.get(1, 0).im.abs() < 1e-14);
        }
    }
}
