//! Finite-step KAM reducibility of the Schrödinger cocycle.
//!
//! The cocycle `A₀(E) + F₀(ωx)`, with `A₀ = [[0,1],[−E,0]]` and
//! `F₀ = [[0,0],[V,0]]`, is conjugated step by step towards a constant
//! matrix. The bookkeeping invariant after every step is
//!
//! `(A₀ + F₀)Y − D_ω Y = Y(A + F)`
//!
//! so once `F` is negligible, `X(x) = Y(ωx)e^{Bx}` solves the original system
//! with `B = A + F̂(0)`.

use crate::lattice::Mode;
use crate::mat2::Mat2;
use crate::potential::QuasiPeriodicPotential;
use crate::series::{half_freq, MatSeries, ScalarSeries};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReduceError {
    #[error("constant part is not elliptic (det = {0})")]
    HyperbolicInput(f64),
    #[error("step {step} did not contract: |F| {before:.3e} -> {after:.3e}")]
    NoContraction { step: usize, before: f64, after: f64 },
    #[error("reduction did not converge (status {0:?})")]
    NotConverged(ReduceStatus),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// `A₀(E) = [[0,1],[−E,0]]`.
pub fn a0(e: f64) -> Mat2 {
    Mat2::real(0.0, 1.0, -e, 0.0)
}

/// Smallness schedule `ε_{j+1} = ε_j^{1+σ}`, `N_j = 4^{j+1} σ |ln ε_j|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KamSchedule {
    pub eps0: f64,
    pub sigma: f64,
    pub max_steps: usize,
}

/// Largest truncation order used on the half lattice.
pub const MAX_TRUNC: i32 = 64;

impl KamSchedule {
    pub fn new(eps0: f64, sigma: f64, max_steps: usize) -> Result<Self, ReduceError> {
        if !(eps0 >= 0.0 && eps0 < 1.0) {
            return Err(ReduceError::InvalidSchedule(format!("eps0 must lie in [0,1), got {eps0}")));
        }
        if !(sigma > 0.0 && sigma < 1.0) {
            return Err(ReduceError::InvalidSchedule(format!("sigma must lie in (0,1), got {sigma}")));
        }
        Ok(Self { eps0, sigma, max_steps })
    }

    /// Schedule for `V` with `ε₀ = |V|_r`.
    pub fn for_potential(v: &QuasiPeriodicPotential, sigma: f64, max_steps: usize) -> Result<Self, ReduceError> {
        Self::new(v.analytic_norm(), sigma, max_steps)
    }

    pub fn eps(&self, j: usize) -> f64 {
        let mut e = self.eps0;
        for _ in 0..j {
            e = e.powf(1.0 + self.sigma);
        }
        e
    }

    pub fn eps_list(&self) -> Vec<f64> {
        (0..=self.max_steps).map(|j| self.eps(j)).collect()
    }

    pub fn n_j(&self, j: usize) -> f64 {
        4f64.powi(j as i32 + 1) * self.sigma * self.eps(j).ln().abs()
    }

    pub fn n_list(&self) -> Vec<f64> {
        (0..=self.max_steps).map(|j| self.n_j(j)).collect()
    }

    /// Truncation order on the half lattice at step `j` for a potential of
    /// degree `k_v`: the schedule's `N_j`, raised to at least `k_v·2^{j+2}`.
    pub fn n_trunc(&self, j: usize, k_v: i32) -> i32 {
        let floor = (k_v.max(1) as i64) << (j + 2).min(20);
        let nj = self.n_j(j);
        let nj = if nj.is_finite() { nj.ceil() as i64 } else { i64::MAX };
        nj.max(floor).min(MAX_TRUNC as i64) as i32
    }

    /// Resonance window `ε_j^σ`.
    pub fn window(&self, j: usize) -> f64 {
        self.eps(j).powf(self.sigma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReduceOptions {
    pub divisor_floor: f64,
    /// Iteration stops once the conjugation residual is below this.
    pub target_residual: f64,
    /// Residual below which a run counts as converged.
    pub accept_residual: f64,
    pub n_theta: usize,
    pub prune_tol: f64,
}

impl Default for ReduceOptions {
    fn default() -> Self {
        Self { divisor_floor: 1e-6, target_residual: 1e-11, accept_residual: 1e-8, n_theta: 256, prune_tol: 1e-16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceStatus {
    Converged,
    ResonantSkipped,
    Diverged,
}

impl ReduceStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReduceStatus::Converged => "converged",
            ReduceStatus::ResonantSkipped => "resonant_skipped",
            ReduceStatus::Diverged => "diverged",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resonance {
    pub step: usize,
    /// Label on the integer lattice; the rotation shift is `⟨k,ω⟩/2`.
    pub k: Mode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConjugationResult {
    pub e: f64,
    pub b: Mat2,
    /// Signed rotation rate of `B`: eigenvalues are `±iα`.
    pub alpha: f64,
    pub y: MatSeries,
    /// Renormalized rotation `ξ = ρ − Σ⟨k_j,ω⟩/2`.
    pub xi: f64,
    pub rho_total: f64,
    pub resonances: Vec<Resonance>,
    pub residual: f64,
    /// Residual after each completed step (index 0 is before any step).
    pub residual_history: Vec<f64>,
    /// `‖F_j‖` entering each step, and the final one.
    pub f_norms: Vec<f64>,
    pub steps: usize,
    pub status: ReduceStatus,
}

impl ConjugationResult {
    /// First step count after which the residual was below `tol`.
    pub fn steps_to(&self, tol: f64) -> Option<usize> {
        self.residual_history.iter().position(|r| *r < tol)
    }

    /// `min_j log‖F_{j+1}‖ / log‖F_j‖` over the recorded steps.
    pub fn contraction_exponent(&self) -> Option<f64> {
        let ratios: Vec<f64> = self
            .f_norms
            .windows(2)
            .filter(|w| w[0] > 0.0 && w[0] < 1.0 && w[1] > 0.0)
            .map(|w| w[1].ln() / w[0].ln())
            .collect();
        ratios.into_iter().reduce(f64::min)
    }
}

/// Eigen-frame of an elliptic traceless `A`: `(α_s, P, P⁻¹)` with
/// `P = [[b, b], [iα_s − a, −iα_s − a]]`, columns for `±iα_s`.
fn elliptic_frame(a: &Mat2) -> Result<(f64, Mat2, Mat2), ReduceError> {
    let (a11, b) = (a.get(0, 0), a.get(0, 1));
    let det = (-(a11 * a11) - b * a.get(1, 0)).re;
    if !(det > 0.0) {
        return Err(ReduceError::HyperbolicInput(det));
    }
    let alpha = det.sqrt() * if b.re >= 0.0 { 1.0 } else { -1.0 };
    let p = Mat2::new(b, b, I * alpha - a11, -I * alpha - a11);
    let pinv = p.inverse().ok_or(ReduceError::HyperbolicInput(det))?;
    Ok((alpha, p, pinv))
}

fn traceless(m: Mat2) -> Mat2 {
    let h = m.trace() * 0.5;
    m - Mat2::IDENTITY.scale(h)
}

/// Solves `iν_m Ŵ_m = [A, Ŵ_m] + F̂_m` mode by mode in the eigenbasis of `A`.
///
/// Entries whose divisor `iν`, `i(ν − 2α)` or `i(ν + 2α)` is smaller than
/// `divisor_floor` are left at zero and their modes returned separately.
pub fn homological_solve(
    a: &Mat2,
    f_hat: &MatSeries,
    omega: &[f64],
    n_trunc: i32,
    divisor_floor: f64,
) -> Result<(MatSeries, Vec<Mode>), ReduceError> {
    let (alpha, p, pinv) = elliptic_frame(a)?;
    let mut w = MatSeries::zero();
    let mut removed = Vec::new();
    for (m, fm) in f_hat.terms() {
        if m.is_zero() || m.norm() > n_trunc {
            continue;
        }
        let nu = half_freq(m, omega);
        let g = pinv * *fm * p;
        let divisors = [[nu, nu - 2.0 * alpha], [nu + 2.0 * alpha, nu]];
        let mut wt = Mat2::ZERO;
        let mut diverted = false;
        for i in 0..2 {
            for j in 0..2 {
                let d = divisors[i][j];
                if d.abs() < divisor_floor {
                    diverted |= g.get(i, j).norm() > 0.0;
                    continue;
                }
                wt.0[i][j] = g.get(i, j) / (I * d);
            }
        }
        if diverted {
            removed.push(*m);
        }
        w.insert(*m, traceless(p * wt * pinv));
    }
    Ok((w, removed))
}

/// Constant part and perturbation entering or leaving a step.
#[derive(Debug, Clone, PartialEq)]
pub struct KamState {
    pub a: Mat2,
    pub f: MatSeries,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub next: KamState,
    /// Conjugation applied this step; `Y ← Y · conj`.
    pub conj: MatSeries,
    pub resonance: Option<Resonance>,
    pub removed: Vec<Mode>,
    /// Rotation shift `⟨k,ω⟩/2` applied by a renormalization.
    pub shift: f64,
    /// Set when the renormalized constant part turned hyperbolic.
    pub hyperbolic: bool,
}

/// Conjugates by `Q = P diag(e^{iν x/2}, e^{−iν x/2}) P⁻¹`, `ν = ν_{m*}`.
/// Returns the new state (mean not yet absorbed) and `Q`.
fn renormalize(
    alpha: f64,
    p: &Mat2,
    pinv: &Mat2,
    f: &MatSeries,
    mstar: Mode,
    k: Mode,
    omega: &[f64],
) -> (KamState, MatSeries) {
    let nu = half_freq(&mstar, omega);
    let mut shifted = MatSeries::zero();
    for (m, fm) in f.terms() {
        let g = *pinv * *fm * *p;
        let z = Complex64::new(0.0, 0.0);
        shifted.add_term(*m, Mat2::new(g.get(0, 0), z, z, g.get(1, 1)));
        shifted.add_term(*m - mstar, Mat2::new(z, g.get(0, 1), z, z));
        shifted.add_term(*m + mstar, Mat2::new(z, z, g.get(1, 0), z));
    }
    let f_new = shifted.map(|_, g| traceless(*p * *g * *pinv));
    let a_new = *p * Mat2::new(I * (alpha - 0.5 * nu), c(0.0), c(0.0), -I * (alpha - 0.5 * nu)) * *pinv;
    let e00 = *p * Mat2::real(1.0, 0.0, 0.0, 0.0) * *pinv;
    let e11 = *p * Mat2::real(0.0, 0.0, 0.0, 1.0) * *pinv;
    let q = MatSeries::from_terms([(k, e00), (-k, e11)]);
    (KamState { a: a_new, f: f_new }, q)
}

/// One Newton step: absorb the average, renormalize at most one resonance,
/// solve the homological equation, and conjugate by `e^W`.
pub fn kam_step(
    current: &KamState,
    schedule: &KamSchedule,
    j: usize,
    omega: &[f64],
    k_v: i32,
    opts: &ReduceOptions,
) -> Result<StepOutput, ReduceError> {
    let n_trunc = schedule.n_trunc(j, k_v);
    let cap = (2 * n_trunc).min(2 * MAX_TRUNC);
    let mut a = traceless(current.a + current.f.mean());
    let mut f = current.f.without_mean();
    let f_in = f.norm();
    let (alpha, p, pinv) = elliptic_frame(&a)?;

    // resonance search on the (0,1) entry; (1,0) at −m is its mirror
    let window = schedule.window(j).max(opts.divisor_floor);
    let gain_floor = f_in.sqrt();
    let mut best: Option<(f64, Mode)> = None;
    for (m, fm) in f.terms() {
        let Some(_) = m.halve() else { continue };
        let nu = half_freq(m, omega);
        let div = nu - 2.0 * alpha;
        let g01 = (pinv * *fm * p).get(0, 1).norm();
        if g01 == 0.0 {
            continue;
        }
        let gain = g01 / div.abs();
        let hit = div.abs() < opts.divisor_floor || (0.5 * div.abs() < window && gain > gain_floor);
        if hit && best.map_or(true, |(g, _)| gain > g) {
            best = Some((gain, *m));
        }
    }

    let mut conj = MatSeries::identity();
    let mut resonance = None;
    let mut shift = 0.0;
    if let Some((_, mstar)) = best {
        let k = mstar.halve().expect("even mode");
        let (st, q) = renormalize(alpha, &p, &pinv, &f, mstar, k, omega);
        shift = 0.5 * half_freq(&mstar, omega);
        resonance = Some(Resonance { step: j, k });
        a = traceless(st.a + st.f.mean());
        f = st.f.without_mean();
        conj = q;
        if elliptic_frame(&a).is_err() {
            return Ok(StepOutput {
                next: KamState { a, f },
                conj,
                resonance,
                removed: Vec::new(),
                shift,
                hyperbolic: true,
            });
        }
    }

    let (w, removed) = homological_solve(&a, &f, omega, n_trunc, opts.divisor_floor)?;
    let z = w.exp_capped(cap, opts.prune_tol);
    let zinv = z.adj();
    let mut inner = &z.lmul(a) + &f.mul_capped(&z, cap, opts.prune_tol);
    inner = &inner - &z.derivative(omega);
    let mut f_next = zinv.mul_capped(&inner, cap, opts.prune_tol);
    f_next.add_term(Mode::ZERO, -a);
    f_next = f_next.map(|_, m| traceless(*m));
    f_next.prune(cap, opts.prune_tol);

    let f_out = f_next.norm();
    if resonance.is_none() && f_in > 0.0 && f_out >= f_in {
        return Err(ReduceError::NoContraction { step: j, before: f_in, after: f_out });
    }
    let conj = if resonance.is_some() { conj.mul_capped(&z, cap, opts.prune_tol) } else { z };
    Ok(StepOutput { next: KamState { a, f: f_next }, conj, resonance, removed, shift, hyperbolic: false })
}

/// Low-discrepancy points in `[0, 4π)^d` (additive recurrence with the
/// generalized golden ratio).
pub fn kronecker_points(d: usize, n: usize) -> Vec<Vec<f64>> {
    // φ_d solves x^{d+1} = x + 1
    let mut phi = 2.0f64;
    for _ in 0..64 {
        phi = (1.0 + phi).powf(1.0 / (d as f64 + 1.0));
    }
    let steps: Vec<f64> = (1..=d).map(|j| phi.powi(-(j as i32))).collect();
    (0..n).map(|i| steps.iter().map(|s| 4.0 * std::f64::consts::PI * (0.5 + i as f64 * s).fract()).collect()).collect()
}

/// `sup_θ ‖D_ω Y(θ) − (A₀(E) + F₀(θ))Y(θ) + Y(θ)B‖` over `n_theta` points.
pub fn conjugation_residual(y: &MatSeries, b: &Mat2, e: f64, v: &QuasiPeriodicPotential, n_theta: usize) -> f64 {
    let omega = v.freq().omega();
    let dy = y.derivative(omega);
    let a = a0(e);
    kronecker_points(v.freq().dim(), n_theta.max(1))
        .iter()
        .map(|theta| {
            let yt = y.eval_torus(theta);
            let vt = v.eval_torus(theta);
            let f0 = Mat2::real(0.0, 0.0, vt, 0.0);
            (dy.eval_torus(theta) - (a + f0) * yt + yt * *b).norm()
        })
        .fold(0.0, f64::max)
}

fn absorb_final(state: &KamState) -> Mat2 {
    let b = traceless(state.a + state.f.mean());
    let [[p, q], [r, s]] = b.re_parts();
    let h = 0.5 * (p + s);
    Mat2::real(p - h, q, r, s - h)
}

/// Iterates [`kam_step`] until the residual drops below the target or the
/// schedule runs out. Never fails; the outcome is in `status`.
pub fn reduce_cocycle(
    e: f64,
    v: &QuasiPeriodicPotential,
    schedule: &KamSchedule,
    opts: &ReduceOptions,
) -> ConjugationResult {
    let omega = v.freq().omega().to_vec();
    let k_v = v.max_mode();
    let mut state = KamState { a: a0(e), f: MatSeries::potential_block(v) };
    let mut y = MatSeries::identity();
    let mut resonances = Vec::new();
    let mut shift_total = 0.0;
    let mut f_norms = vec![state.f.norm()];
    let mut residual_history = Vec::new();
    let mut outcome: Option<ReduceStatus> = None;
    let mut steps = 0;

    let mut b = absorb_final(&state);
    let mut residual = conjugation_residual(&y, &b, e, v, opts.n_theta);
    residual_history.push(residual);

    for j in 0..schedule.max_steps {
        if residual < opts.target_residual {
            break;
        }
        let out = match kam_step(&state, schedule, j, &omega, k_v, opts) {
            Ok(o) => o,
            Err(ReduceError::HyperbolicInput(_)) => {
                outcome = Some(ReduceStatus::ResonantSkipped);
                break;
            }
            Err(_) => {
                outcome = Some(ReduceStatus::Diverged);
                break;
            }
        };
        let cap = 2 * schedule.n_trunc(j, k_v);
        y = y.mul_capped(&out.conj, cap, opts.prune_tol);
        if let Some(r) = out.resonance {
            resonances.push(r);
            shift_total += out.shift;
        }
        state = out.next;
        steps = j + 1;
        if out.hyperbolic {
            outcome = Some(ReduceStatus::ResonantSkipped);
            break;
        }
        f_norms.push(state.f.norm());
        b = absorb_final(&state);
        residual = conjugation_residual(&y, &b, e, v, opts.n_theta);
        residual_history.push(residual);
    }

    let b = absorb_final(&state);
    let frame = elliptic_frame(&b);
    let status = match outcome {
        Some(s) => s,
        None if frame.is_err() => ReduceStatus::ResonantSkipped,
        None if residual < opts.accept_residual => ReduceStatus::Converged,
        None => ReduceStatus::Diverged,
    };
    let alpha = frame.map(|(a, _, _)| a).unwrap_or(0.0);
    ConjugationResult {
        e,
        b,
        alpha,
        y,
        xi: alpha,
        rho_total: alpha + shift_total,
        resonances,
        residual,
        residual_history,
        f_norms,
        steps,
        status,
    }
}

/// Bloch-wave coefficients `β̃₀ = Y₁₁B₁₂ − Y₁₂B₁₁`, `β̃₁ = Y₁₂`.
///
/// With `α` the rotation rate of `B`, `ψ(x) = e^{iαx}(β̃₀ + iαβ̃₁)(ωx)` solves
/// `−ψ'' + Vψ = Eψ`, and its real and imaginary parts are
/// `J = β̃₀cos(αx) − αβ̃₁sin(αx)` and `K = β̃₀sin(αx) + αβ̃₁cos(αx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlochCoefficients {
    pub e: f64,
    /// Rotation number reported for this energy.
    pub rho: f64,
    /// Phase rate `α` of `ψ`; equals `rho` when no resonance was renormalized.
    pub phase_rate: f64,
    pub beta0: ScalarSeries,
    pub beta1: ScalarSeries,
    pub smoothing_applied: bool,
}

impl BlochCoefficients {
    /// `ψ` as a series in `e^{iν_m x}` times `e^{iαx}`.
    pub fn psi_series(&self) -> ScalarSeries {
        &self.beta0 + &self.beta1.scale(I * self.phase_rate)
    }

    /// `sup |−ψ'' + Vψ − Eψ|` on `n` evenly spaced points of `[x0, x1]`.
    pub fn residual(&self, v: &QuasiPeriodicPotential, x0: f64, x1: f64, n: usize) -> f64 {
        let omega = v.freq().omega();
        let f = self.psi_series();
        let a = self.phase_rate;
        // −ψ'' = Σ (ν_m + α)² c_m e^{i(ν_m+α)x}
        let d2 = f.map(|m, cm| *cm * c((half_freq(m, omega) + a).powi(2)));
        let n = n.max(2);
        (0..n)
            .map(|i| {
                let x = x0 + (x1 - x0) * i as f64 / (n - 1) as f64;
                let ph = Complex64::from_polar(1.0, a * x);
                let psi = f.eval(x, omega) * ph;
                let kin = d2.eval(x, omega) * ph;
                (kin + psi * (v.eval(x) - self.e)).norm()
            })
            .fold(0.0, f64::max)
    }

    pub fn eval(&self, x: f64, omega: &[f64]) -> (f64, f64) {
        (self.beta0.eval(x, omega).re, self.beta1.eval(x, omega).re)
    }
}

fn bloch_parts(result: &ConjugationResult) -> (ScalarSeries, ScalarSeries) {
    let b = &result.b;
    let y11 = result.y.entry(0, 0);
    let y12 = result.y.entry(0, 1);
    let beta0 = &y11.scale(b.get(0, 1)) - &y12.scale(b.get(0, 0));
    (beta0, y12)
}

pub fn bloch_from_reduction(result: &ConjugationResult, rho: f64) -> Result<BlochCoefficients, ReduceError> {
    if result.status != ReduceStatus::Converged {
        return Err(ReduceError::NotConverged(result.status));
    }
    let (beta0, beta1) = bloch_parts(result);
    Ok(BlochCoefficients { e: result.e, rho, phase_rate: result.alpha, beta0, beta1, smoothing_applied: false })
}

/// As [`bloch_from_reduction`], scaling `β` by `ξ⁸` when a resonance was
/// renormalized and `|ξ| < threshold`.
pub fn bloch_smoothed(result: &ConjugationResult, rho: f64, threshold: f64) -> Result<BlochCoefficients, ReduceError> {
    let mut out = bloch_from_reduction(result, rho)?;
    if !result.resonances.is_empty() && result.xi.abs() < threshold {
        let s = c(result.xi.powi(8));
        out.beta0 = out.beta0.scale(s);
        out.beta1 = out.beta1.scale(s);
        out.smoothing_applied = true;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::FrequencyVector;

    fn small(eps0: f64) -> QuasiPeriodicPotential {
        QuasiPeriodicPotential::with_analytic_norm(FrequencyVector::golden_pair(), eps0, 0.5).unwrap()
    }

    #[test]
    fn schedule_shape() {
        let s = KamSchedule::new(1e-3, 0.02, 5).unwrap();
        let eps = s.eps_list();
        assert!(eps.windows(2).all(|w| w[1] < w[0]));
        let n = s.n_list();
        assert!(n.windows(2).all(|w| w[1] > w[0]));
        assert!((s.window(0) - 1e-3f64.powf(0.02)).abs() < 1e-15);
        assert_eq!(s.n_trunc(0, 1), 4);
        assert!(KamSchedule::new(1.5, 0.02, 3).is_err());
    }

    #[test]
    fn homological_zero_input() {
        let (w, rem) = homological_solve(&a0(2.0), &MatSeries::zero(), &[1.0, 2.0], 8, 1e-6).unwrap();
        assert!(w.is_empty() && rem.is_empty());
        assert!(matches!(
            homological_solve(&a0(-1.0), &MatSeries::zero(), &[1.0], 8, 1e-6),
            Err(ReduceError::HyperbolicInput(_))
        ));
    }

    #[test]
    fn homological_single_mode_satisfies_equation() {
        let omega = FrequencyVector::golden_pair().omega().to_vec();
        let a = a0(2.0);
        let m = Mode::from_slice(&[2, 0]);
        let fm = Mat2::new(c(0.0), c(0.0), Complex64::new(0.3, -0.2), c(0.0));
        let f = MatSeries::from_terms([(m, fm)]);
        let (w, rem) = homological_solve(&a, &f, &omega, 8, 1e-6).unwrap();
        assert!(rem.is_empty());
        let wm = w.get(&m);
        let nu = half_freq(&m, &omega);
        // iν W = [A, W] + F (F is traceless so no projection is lost)
        let lhs = wm.scale(I * nu);
        let rhs = a * wm - wm * a + fm;
        assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn homological_diverts_small_divisors() {
        let omega = [2.0];
        // α = 1 so ν = 2 on m = 2 hits ν − 2α = 0
        let a = a0(1.0);
        let f = MatSeries::from_terms([(Mode::from_slice(&[2]), Mat2::real(0.0, 0.0, 0.1, 0.0))]);
        let (_, rem) = homological_solve(&a, &f, &omega, 8, 1e-6).unwrap();
        assert_eq!(rem, vec![Mode::from_slice(&[2])]);
    }

    #[test]
    fn free_reduction_is_trivial() {
        let v = QuasiPeriodicPotential::zero(FrequencyVector::golden_pair());
        let s = KamSchedule::for_potential(&v, 0.02, 4).unwrap();
        let r = reduce_cocycle(2.0, &v, &s, &ReduceOptions::default());
        assert_eq!(r.status, ReduceStatus::Converged);
        assert_eq!(r.steps, 0);
        assert!((r.y.mean() - Mat2::IDENTITY).norm() < 1e-15 && r.y.len() == 1);
        assert!((r.b - a0(2.0)).norm() < 1e-15);
        assert!(r.residual < 1e-14);
        assert!((r.rho_total - 2f64.sqrt()).abs() < 1e-15);
        let bl = bloch_from_reduction(&r, r.rho_total).unwrap();
        assert!((bl.beta0.mean() - c(1.0)).norm() < 1e-15 && bl.beta1.norm() == 0.0);
    }

    #[test]
    fn residual_of_identity_is_the_perturbation() {
        let v = small(0.05);
        let y = MatSeries::identity();
        let r = conjugation_residual(&y, &a0(1.0), 1.0, &v, 512);
        assert!(r <= v.sup_bound() + 1e-15);
        assert!(r > 0.9 * v.sup_bound());
        let v0 = QuasiPeriodicPotential::zero(FrequencyVector::golden_pair());
        assert_eq!(conjugation_residual(&y, &a0(1.0), 1.0, &v0, 64), 0.0);
    }

    #[test]
    fn nonresonant_reduction_converges_fast() {
        let v = small(1e-3);
        let s = KamSchedule::for_potential(&v, 0.02, 5).unwrap();
        let opts = ReduceOptions::default();
        let r = reduce_cocycle(2.0, &v, &s, &opts);
        assert_eq!(r.status, ReduceStatus::Converged, "{r:?}");
        assert!(r.steps_to(1e-8).unwrap() <= 3);
        assert!(r.resonances.is_empty());
        assert!(r.contraction_exponent().unwrap() >= 1.3, "{:?}", r.f_norms);
        assert!(r.b.trace().norm() == 0.0 && r.b.max_imag() == 0.0);
        let fresh = conjugation_residual(&r.y, &r.b, r.e, &v, opts.n_theta);
        assert!((fresh - r.residual).abs() < 1e-12);
        // eigenvector (B₁₂, iα − B₁₁) of B for iα
        let ev = [r.b.get(0, 1), I * r.alpha - r.b.get(0, 0)];
        let bv = r.b.mul_vec(ev);
        let err = ((bv[0] - I * r.alpha * ev[0]).norm_sqr() + (bv[1] - I * r.alpha * ev[1]).norm_sqr()).sqrt();
        assert!(err <= 10.0 * r.residual.max(1e-15));
        let bl = bloch_from_reduction(&r, r.rho_total).unwrap();
        assert!(bl.residual(&v, 0.0, 100.0, 2001) < 1e-6);
        for x in [0.0, 1.3, 50.0] {
            let (b0, b1) = bl.eval(x, v.freq().omega());
            assert!((b0 - 1.0).abs() < 0.1 && b1.abs() < 0.1);
        }
    }

    #[test]
    fn contraction_in_first_step() {
        let v = small(1e-3);
        let s = KamSchedule::for_potential(&v, 0.02, 5).unwrap();
        let st = KamState { a: a0(2.0), f: MatSeries::potential_block(&v) };
        let out = kam_step(&st, &s, 0, v.freq().omega(), 1, &ReduceOptions::default()).unwrap();
        let (f0, f1) = (st.f.norm(), out.next.f.norm());
        assert!(f1 <= f0.powf(1.4), "{f0} -> {f1}");
    }

    #[test]
    fn gap_energy_is_skipped_with_label() {
        // first-order gap at ρ = ⟨(0,1),ω⟩/2 = πg
        let v = small(0.05);
        let freq = v.freq().clone();
        let k = Mode::from_slice(&[0, 1]);
        let rho = freq.half_frequency(&k);
        let s = KamSchedule::for_potential(&v, 0.02, 5).unwrap();
        let r = reduce_cocycle(rho * rho, &v, &s, &ReduceOptions::default());
        assert_eq!(r.status, ReduceStatus::ResonantSkipped, "{r:?}");
        assert_eq!(r.resonances.first().map(|x| x.k), Some(k));
    }

    #[test]
    fn near_resonant_energy_records_label() {
        let v = small(1e-3);
        let k = Mode::from_slice(&[0, 1]);
        let rho = v.freq().half_frequency(&k) + 5e-4;
        let s = KamSchedule::for_potential(&v, 0.02, 5).unwrap();
        let r = reduce_cocycle(rho * rho, &v, &s, &ReduceOptions::default());
        assert_eq!(r.resonances.first().map(|x| x.k), Some(k), "{r:?}");
        if r.status == ReduceStatus::Converged {
            assert!((r.rho_total - rho).abs() < 1e-3);
            let sm = bloch_smoothed(&r, r.rho_total, 0.1).unwrap();
            assert!(sm.smoothing_applied);
            assert!(sm.beta0.norm() <= 1e-3f64.powf(0.02) * 2.0);
        }
    }

    #[test]
    fn below_spectrum_is_not_converged() {
        let v = small(1e-3);
        let s = KamSchedule::for_potential(&v, 0.02, 5).unwrap();
        let r = reduce_cocycle(-1.0, &v, &s, &ReduceOptions::default());
        assert_ne!(r.status, ReduceStatus::Converged);
        assert!(matches!(bloch_from_reduction(&r, 0.0), Err(ReduceError::NotConverged(_))));
    }
}
