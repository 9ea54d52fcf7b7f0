//! Quasi-periodic potentials `V(ωx)` stored as finite Fourier series on `T^d`.
//!
//! A potential is `V(θ) = Σ_k v̂_k e^{i⟨k,θ⟩}` with Hermitian coefficients
//! `v̂_{−k} = conj(v̂_k)`, so `V` is real. Along the line it is evaluated at
//! `θ = ωx`. Lattice norms `|k|` are max-norms throughout.

use crate::lattice::{box_points, Mode, MAX_DIM};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PotentialError {
    #[error("frequency dimension must be in 1..={MAX_DIM}, got {0}")]
    BadDimension(usize),
    #[error("Diophantine constants must be finite with gamma > 0 and tau > d - 1 (gamma={gamma}, tau={tau}, d={d})")]
    BadDiophantine { gamma: f64, tau: f64, d: usize },
    #[error("frequency components must be finite")]
    NonFiniteFrequency,
    #[error("analyticity radius must lie in (0, 1], got {0}")]
    BadRadius(f64),
    #[error("mode {0:?} has {1} components, expected {2}")]
    ModeDimension(Vec<i32>, usize, usize),
    #[error("coefficients of {0:?} and its negative are not conjugate")]
    NotHermitian(Mode),
    #[error("mean mode k=0 must be real, got imaginary part {0}")]
    ComplexMean(f64),
    #[error("potential file: {0}")]
    Parse(String),
}

/// Frequency vector `ω` together with its Diophantine constants `(γ, τ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyVector {
    omega: Vec<f64>,
    gamma: f64,
    tau: f64,
}

impl FrequencyVector {
    pub fn new(omega: Vec<f64>, gamma: f64, tau: f64) -> Result<Self, PotentialError> {
        let d = omega.len();
        if d == 0 || d > MAX_DIM {
            return Err(PotentialError::BadDimension(d));
        }
        if omega.iter().any(|w| !w.is_finite()) {
            return Err(PotentialError::NonFiniteFrequency);
        }
        if !(gamma.is_finite() && gamma > 0.0 && tau.is_finite() && tau > d as f64 - 1.0) {
            return Err(PotentialError::BadDiophantine { gamma, tau, d });
        }
        Ok(Self { omega, gamma, tau })
    }

    /// `ω = (2π, 2π(√5−1)/2)`, the default two-frequency test vector.
    pub fn golden_pair() -> Self {
        let g = (5f64.sqrt() - 1.0) / 2.0;
        Self::new(vec![2.0 * PI, 2.0 * PI * g], 0.05, 3.0).expect("valid constants")
    }

    pub fn dim(&self) -> usize {
        self.omega.len()
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// `⟨k,ω⟩/2`, the rotation value a gap labelled `k` is locked to.
    pub fn half_frequency(&self, k: &Mode) -> f64 {
        0.5 * k.dot(&self.omega)
    }

    /// Whether the Diophantine inequality holds for all `0 < |k| ≤ k_max`.
    pub fn holds_up_to(&self, k_max: i32) -> bool {
        diophantine_margin(self, k_max) > self.gamma
    }
}

/// Distance from `t` to the nearest point of `πZ`.
fn dist_to_pi_lattice(t: f64) -> f64 {
    let j = (t / PI).round();
    (t - j * PI).abs()
}

/// `min_{0<|k|≤k_max} |k|^τ · inf_j |⟨k,ω⟩/2 − jπ|`.
///
/// Exact rational resonances give a margin of zero. `k` and `−k` give the
/// same value, so only one of each pair is scanned.
pub fn diophantine_margin(freq: &FrequencyVector, k_max: i32) -> f64 {
    assert!(k_max >= 1, "k_max must be at least 1");
    let mut worst = f64::INFINITY;
    for k in box_points(freq.dim(), k_max) {
        if k.is_zero() || k < Mode::ZERO {
            continue;
        }
        let dist = dist_to_pi_lattice(freq.half_frequency(&k));
        let m = (k.norm() as f64).powf(freq.tau) * dist;
        worst = worst.min(m);
    }
    worst
}

/// Real-analytic quasi-periodic potential.
#[derive(Debug, Clone, PartialEq)]
pub struct QuasiPeriodicPotential {
    freq: FrequencyVector,
    coeffs: BTreeMap<Mode, Complex64>,
    radius: f64,
}

impl QuasiPeriodicPotential {
    /// Builds a potential from coefficients. Missing conjugate partners are
    /// filled in; partners that are present must already be conjugate.
    pub fn new(
        freq: FrequencyVector,
        modes: impl IntoIterator<Item = (Mode, Complex64)>,
        radius: f64,
    ) -> Result<Self, PotentialError> {
        if !(radius > 0.0 && radius <= 1.0) {
            return Err(PotentialError::BadRadius(radius));
        }
        let given: BTreeMap<Mode, Complex64> = modes.into_iter().collect();
        let mut coeffs = BTreeMap::new();
        for (&k, &c) in &given {
            if k.is_zero() {
                if c.im.abs() > 1e-14 * c.re.abs().max(1.0) {
                    return Err(PotentialError::ComplexMean(c.im));
                }
                coeffs.insert(k, Complex64::new(c.re, 0.0));
                continue;
            }
            if let Some(&partner) = given.get(&(-k)) {
                if (partner - c.conj()).norm() > 1e-14 * c.norm().max(1.0) {
                    return Err(PotentialError::NotHermitian(k));
                }
            }
            coeffs.insert(k, c);
            coeffs.insert(-k, c.conj());
        }
        coeffs.retain(|_, c| c.norm() > 0.0);
        Ok(Self { freq, coeffs, radius })
    }

    /// `V ≡ 0`.
    pub fn zero(freq: FrequencyVector) -> Self {
        Self { freq, coeffs: BTreeMap::new(), radius: 1.0 }
    }

    /// `V(θ) = Σ_j a_j cos θ_j`.
    pub fn cosine_sum(freq: FrequencyVector, amplitudes: &[f64], radius: f64) -> Result<Self, PotentialError> {
        if amplitudes.len() != freq.dim() {
            return Err(PotentialError::ModeDimension(vec![], amplitudes.len(), freq.dim()));
        }
        let modes = amplitudes
            .iter()
            .enumerate()
            .filter(|(_, a)| **a != 0.0)
            .map(|(j, a)| (Mode::unit(j), Complex64::new(a / 2.0, 0.0)));
        Self::new(freq, modes, radius)
    }

    /// Equal-amplitude cosine sum scaled so that `|V|_r = eps0`.
    pub fn with_analytic_norm(freq: FrequencyVector, eps0: f64, radius: f64) -> Result<Self, PotentialError> {
        let d = freq.dim();
        // each cosine contributes 2 · (a/2) · e^r to |V|_r
        let a = eps0 / (d as f64 * radius.exp());
        Self::cosine_sum(freq, &vec![a; d], radius)
    }

    pub fn freq(&self) -> &FrequencyVector {
        &self.freq
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn coeffs(&self) -> &BTreeMap<Mode, Complex64> {
        &self.coeffs
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Largest `|k|` carried by the series.
    pub fn max_mode(&self) -> i32 {
        self.coeffs.keys().map(Mode::norm).max().unwrap_or(0)
    }

    /// `V` at a torus point `θ ∈ T^d`.
    pub fn eval_torus(&self, theta: &[f64]) -> f64 {
        self.coeffs
            .iter()
            .map(|(k, c)| {
                let phase = k.dot(theta);
                c.re * phase.cos() - c.im * phase.sin()
            })
            .sum()
    }

    /// `V(ωx)`.
    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs
            .iter()
            .map(|(k, c)| {
                let phase = k.dot(self.freq.omega()) * x;
                c.re * phase.cos() - c.im * phase.sin()
            })
            .sum()
    }

    /// `sup_θ |V(θ)| ≤ Σ|v̂_k|`.
    pub fn sup_bound(&self) -> f64 {
        self.coeffs.values().map(|c| c.norm()).sum()
    }

    /// `|V|_r = Σ_k |v̂_k| e^{r|k|}`.
    pub fn analytic_norm(&self) -> f64 {
        self.coeffs.iter().map(|(k, c)| c.norm() * (self.radius * k.norm() as f64).exp()).sum()
    }
}

/// Real-form evaluator along the line, `V(x) = v₀ + Σ_{k>0} a_k cos(ν_k x) + b_k sin(ν_k x)`.
#[derive(Debug, Clone)]
pub struct LineEvaluator {
    mean: f64,
    terms: Vec<(f64, f64, f64)>,
}

impl LineEvaluator {
    pub fn new(v: &QuasiPeriodicPotential) -> Self {
        let mut mean = 0.0;
        let mut terms = Vec::new();
        for (k, c) in v.coeffs() {
            if k.is_zero() {
                mean = c.re;
            } else if *k > Mode::ZERO {
                terms.push((k.dot(v.freq().omega()), 2.0 * c.re, -2.0 * c.im));
            }
        }
        Self { mean, terms }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        let mut acc = self.mean;
        for &(nu, a, b) in &self.terms {
            let (s, c) = (nu * x).sin_cos();
            acc += a * c + b * s;
        }
        acc
    }
}

/// Free-function form of [`QuasiPeriodicPotential::eval`].
pub fn eval_potential(v: &QuasiPeriodicPotential, x: f64) -> f64 {
    v.eval(x)
}

/// Free-function form of [`QuasiPeriodicPotential::analytic_norm`].
pub fn analytic_norm(v: &QuasiPeriodicPotential) -> f64 {
    v.analytic_norm()
}

/// One Fourier mode in a potential file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModeSpec {
    pub k: Vec<i32>,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

/// On-disk potential description (TOML).
///
/// ```toml
/// d = 2
/// omega = [6.283185307179586, 3.883222077450933]
/// gamma = 0.05
/// tau = 3.0
/// r = 0.5
/// modes = [{ k = [1, 0], re = 0.15 }, { k = [0, 1], re = 0.15 }]
/// ```
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PotentialSpec {
    pub d: usize,
    pub omega: Vec<f64>,
    pub gamma: f64,
    pub tau: f64,
    pub r: f64,
    #[serde(default)]
    pub modes: Vec<ModeSpec>,
}

impl PotentialSpec {
    pub fn from_toml_str(s: &str) -> Result<Self, PotentialError> {
        toml::from_str(s).map_err(|e| PotentialError::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("potential spec serializes")
    }

    pub fn build(&self) -> Result<QuasiPeriodicPotential, PotentialError> {
        if self.omega.len() != self.d {
            return Err(PotentialError::BadDimension(self.omega.len()));
        }
        let freq = FrequencyVector::new(self.omega.clone(), self.gamma, self.tau)?;
        let mut modes = Vec::with_capacity(self.modes.len());
        for m in &self.modes {
            if m.k.len() != self.d {
                return Err(PotentialError::ModeDimension(m.k.clone(), m.k.len(), self.d));
            }
            modes.push((Mode::from_slice(&m.k), Complex64::new(m.re, m.im)));
        }
        QuasiPeriodicPotential::new(freq, modes, self.r)
    }

    /// Inverse of [`PotentialSpec::build`]; lists one of each conjugate pair.
    pub fn from_potential(v: &QuasiPeriodicPotential) -> Self {
        let d = v.freq().dim();
        let modes = v
            .coeffs()
            .iter()
            .filter(|(k, _)| **k >= Mode::ZERO)
            .map(|(k, c)| ModeSpec { k: k.components(d).to_vec(), re: c.re, im: c.im })
            .collect();
        Self { d, omega: v.freq().omega().to_vec(), gamma: v.freq().gamma(), tau: v.freq().tau(), r: v.radius(), modes }
    }
}
