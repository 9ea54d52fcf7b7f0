//! The modified spectral transformation `Sq = (∫qK dx, ∫qJ dx)` built from
//! Bloch waves, its weighted norms, and the oscillatory integrals behind the
//! transport estimate.
//!
//! Weights per retained energy:
//!
//! * `dφ`: `w = (π∂ρ)^{−1}` for `ρ ≤ ρ_c`, `(π∂ρ(1+ρ⁸))^{−1}` above,
//! * `dφ̂`: `(∂ρ)²w`,
//! * `dφ̃`: `4ρ²(∂ρ)²w`.

use crate::cocycle::{nonuniform_derivative, rotation_curve, CocycleError, CurveOptions, PointClass, RotationCurve};
use crate::evolve::{linear_fit, WaveState};
use crate::potential::QuasiPeriodicPotential;
use crate::quad::{filon_cos, runs, trapezoid_weights};
use crate::reduce::{
    bloch_from_reduction, bloch_smoothed, reduce_cocycle, ConjugationResult, KamSchedule, ReduceOptions, ReduceStatus,
};
use crate::series::ScalarSeries;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("no energies retained in the frame")]
    EmptyFrame,
    #[error("energy {0} is not in the frame")]
    EnergyNotInFrame(f64),
    #[error("energy spacing {spacing} exceeds {threshold} for finite differences")]
    GridTooCoarse { spacing: f64, threshold: f64 },
    #[error("M = {m} with rho spacing {max_step} cannot resolve cos(M rho)")]
    QuadratureUnderResolved { m: f64, max_step: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Cocycle(#[from] CocycleError),
}

/// `ε₀^{−σ/4}`, infinite for `ε₀ = 0`.
pub fn default_cutoff(eps0: f64, sigma: f64) -> f64 {
    if eps0 <= 0.0 {
        f64::INFINITY
    } else {
        eps0.powf(-sigma / 4.0)
    }
}

/// Energies `E = ρ²` on a grid uniform in `ρ`.
pub fn rho_uniform_grid(rho_min: f64, rho_max: f64, d_rho: f64) -> Vec<f64> {
    let n = ((rho_max - rho_min) / d_rho).round() as usize;
    (0..=n).map(|i| (rho_min + i as f64 * d_rho).powi(2)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameOptions {
    /// Overrides the cutoff; `None` uses `ε₀^{−σ/4}`.
    pub cutoff_rho_c: Option<f64>,
    pub sigma: f64,
    /// Largest energy spacing allowed inside a component.
    pub max_fd_spacing: f64,
    /// Allowed gap between the reduction's and the curve's rotation numbers.
    pub rho_tol: f64,
    /// Admit renormalized energies with `ξ⁸`-smoothed coefficients when `|ξ|` is below this.
    pub smoothing_threshold: Option<f64>,
    /// Extend the lowest component down to `ρ = 0` in oscillatory integrals.
    pub anchor_bottom: bool,
}

impl Default for FrameOptions {
    fn default() -> Self {
        Self {
            cutoff_rho_c: None,
            sigma: 0.02,
            max_fd_spacing: 0.1,
            rho_tol: 1e-5,
            smoothing_threshold: None,
            anchor_bottom: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePoint {
    pub e: f64,
    pub rho: f64,
    pub drho: f64,
    /// Phase rate `α` used in `K`, `J`.
    pub phase_rate: f64,
    pub beta0: ScalarSeries,
    pub beta1: ScalarSeries,
    pub dbeta0: ScalarSeries,
    pub dbeta1: ScalarSeries,
    /// `dφ` density.
    pub w: f64,
    /// Trapezoid weight in `E` within the point's component.
    pub quad: f64,
    pub smoothed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub e: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFrame {
    pub points: Vec<FramePoint>,
    pub cutoff_rho_c: f64,
    pub omega: Vec<f64>,
    /// Contiguous runs of retained grid energies.
    pub components: Vec<Range<usize>>,
    pub rejected: Vec<Rejection>,
    pub anchor_bottom: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Dphi,
    DphiHat,
    DphiTilde,
}

impl SpectralFrame {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn energies(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.e).collect()
    }

    pub fn weight(&self, i: usize, kind: NormKind) -> f64 {
        let p = &self.points[i];
        match kind {
            NormKind::Dphi => p.w,
            NormKind::DphiHat => p.drho * p.drho * p.w,
            NormKind::DphiTilde => 4.0 * p.rho * p.rho * p.drho * p.drho * p.w,
        }
    }

    fn index_of(&self, e: f64) -> Result<usize, TransformError> {
        self.points
            .iter()
            .position(|p| (p.e - e).abs() <= 1e-12 * e.abs().max(1.0))
            .ok_or(TransformError::EnergyNotInFrame(e))
    }

    /// Whether `∂ρ > (2ρ)^{−1}` at every retained energy.
    pub fn transversal(&self) -> bool {
        self.points.iter().all(|p| p.drho * 2.0 * p.rho > 1.0)
    }
}

fn dphi_density(rho: f64, drho: f64, rho_c: f64) -> f64 {
    let base = 1.0 / (PI * drho);
    if rho <= rho_c {
        base
    } else {
        base / (1.0 + rho.powi(8))
    }
}

/// Coefficient-wise derivative in `E` of a family of series.
fn series_derivative(e: &[f64], s: &[&ScalarSeries]) -> Vec<ScalarSeries> {
    let modes: BTreeSet<_> = s.iter().flat_map(|x| x.terms().keys().copied()).collect();
    let mut out = vec![ScalarSeries::zero(); e.len()];
    for m in modes {
        let re: Vec<f64> = s.iter().map(|x| x.get(&m).re).collect();
        let im: Vec<f64> = s.iter().map(|x| x.get(&m).im).collect();
        let dre = nonuniform_derivative(e, &re);
        let dim = nonuniform_derivative(e, &im);
        for (i, o) in out.iter_mut().enumerate() {
            let v = Complex64::new(dre[i], dim[i]);
            if v.norm() > 0.0 {
                o.insert(m, v);
            }
        }
    }
    out
}

/// Assembles the frame from a rotation curve and per-energy reductions on
/// the same grid. Only spectrum-classified, converged energies whose
/// rotation numbers agree are retained.
pub fn build_frame(
    v: &QuasiPeriodicPotential,
    curve: &RotationCurve,
    reductions: &[ConjugationResult],
    opts: &FrameOptions,
) -> Result<SpectralFrame, TransformError> {
    let n = curve.energies.len();
    if reductions.len() != n {
        return Err(TransformError::InvalidInput(format!("{} reductions for {n} energies", reductions.len())));
    }
    let rho_c = opts.cutoff_rho_c.unwrap_or_else(|| default_cutoff(v.analytic_norm(), opts.sigma));
    let mut rejected = Vec::new();
    let mut bloch = Vec::with_capacity(n);
    let mut keep = vec![false; n];
    for i in 0..n {
        let r = &reductions[i];
        let e = curve.energies[i];
        let reject = |why: String| Rejection { e, reason: why };
        if (r.e - e).abs() > 1e-12 * e.abs().max(1.0) {
            return Err(TransformError::InvalidInput(format!("reduction energy {} differs from grid {e}", r.e)));
        }
        if curve.classification[i] != PointClass::Spectrum {
            rejected.push(reject(format!("classified {}", curve.classification[i].as_str())));
            bloch.push(None);
            continue;
        }
        if r.status != ReduceStatus::Converged {
            rejected.push(reject(r.status.as_str().to_string()));
            bloch.push(None);
            continue;
        }
        let b = match (r.resonances.is_empty(), opts.smoothing_threshold) {
            (true, _) => bloch_from_reduction(r, r.rho_total).ok(),
            (false, Some(th)) => bloch_smoothed(r, r.rho_total, th).ok().filter(|b| b.smoothing_applied),
            (false, None) => None,
        };
        let Some(b) = b else {
            rejected.push(reject("resonant".into()));
            bloch.push(None);
            continue;
        };
        if (r.rho_total - curve.rho[i]).abs() > opts.rho_tol {
            rejected.push(reject(format!("rho mismatch {:.3e}", (r.rho_total - curve.rho[i]).abs())));
            bloch.push(None);
            continue;
        }
        keep[i] = true;
        bloch.push(Some(b));
    }

    // drho must be positive; rejecting a point splits components, so repeat
    let mut drho = vec![f64::NAN; n];
    loop {
        let mut changed = false;
        for comp in runs(&keep) {
            if comp.len() < 2 {
                for i in comp {
                    keep[i] = false;
                    rejected.push(Rejection { e: curve.energies[i], reason: "isolated".into() });
                }
                changed = true;
                continue;
            }
            let e = &curve.energies[comp.clone()];
            let rho: Vec<f64> = comp.clone().map(|i| reductions[i].rho_total).collect();
            let d = nonuniform_derivative(e, &rho);
            for (off, i) in comp.clone().enumerate() {
                drho[i] = d[off];
                if !(d[off] > 0.0) {
                    keep[i] = false;
                    rejected.push(Rejection { e: curve.energies[i], reason: format!("drho {:.3e} <= 0", d[off]) });
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let comps = runs(&keep);
    if comps.is_empty() {
        return Err(TransformError::EmptyFrame);
    }
    let mut points = Vec::new();
    let mut components = Vec::new();
    for comp in comps {
        let e = &curve.energies[comp.clone()];
        if let Some(sp) = e.windows(2).map(|w| w[1] - w[0]).reduce(f64::max) {
            if sp > opts.max_fd_spacing {
                return Err(TransformError::GridTooCoarse { spacing: sp, threshold: opts.max_fd_spacing });
            }
        }
        let b0: Vec<&ScalarSeries> = comp.clone().map(|i| &bloch[i].as_ref().unwrap().beta0).collect();
        let b1: Vec<&ScalarSeries> = comp.clone().map(|i| &bloch[i].as_ref().unwrap().beta1).collect();
        let db0 = series_derivative(e, &b0);
        let db1 = series_derivative(e, &b1);
        let quad = trapezoid_weights(e);
        let start = points.len();
        for (off, i) in comp.clone().enumerate() {
            let b = bloch[i].as_ref().unwrap();
            let rho = reductions[i].rho_total;
            points.push(FramePoint {
                e: e[off],
                rho,
                drho: drho[i],
                phase_rate: b.phase_rate,
                beta0: b.beta0.clone(),
                beta1: b.beta1.clone(),
                dbeta0: db0[off].clone(),
                dbeta1: db1[off].clone(),
                w: dphi_density(rho, drho[i], rho_c),
                quad: quad[off],
                smoothed: b.smoothing_applied,
            });
        }
        components.push(start..points.len());
    }
    rejected.sort_by(|a, b| a.e.total_cmp(&b.e));
    Ok(SpectralFrame {
        points,
        cutoff_rho_c: rho_c,
        omega: v.freq().omega().to_vec(),
        components,
        rejected,
        anchor_bottom: opts.anchor_bottom,
    })
}

/// Everything needed for a frame: curve, reductions and assembly.
#[derive(Debug, Clone)]
pub struct FrameBundle {
    pub curve: RotationCurve,
    pub reductions: Vec<ConjugationResult>,
    pub frame: SpectralFrame,
}

/// Runs the rotation curve and the reductions over `egrid` in parallel and
/// builds the frame.
pub fn compute_frame(
    v: &QuasiPeriodicPotential,
    egrid: &[f64],
    curve_opts: &CurveOptions,
    max_steps: usize,
    reduce_opts: &ReduceOptions,
    frame_opts: &FrameOptions,
) -> Result<FrameBundle, TransformError> {
    let curve = rotation_curve(v, egrid, curve_opts)?;
    let schedule = KamSchedule::for_potential(v, frame_opts.sigma, max_steps)
        .map_err(|e| TransformError::InvalidInput(e.to_string()))?;
    let reductions: Vec<ConjugationResult> =
        egrid.par_iter().map(|&e| reduce_cocycle(e, v, &schedule, reduce_opts)).collect();
    let frame = build_frame(v, &curve, &reductions, frame_opts)?;
    Ok(FrameBundle { curve, reductions, frame })
}

/// `(K, J)` at energy `e` and position `x`.
pub fn eval_k_j(frame: &SpectralFrame, e: f64, x: f64) -> Result<(f64, f64), TransformError> {
    let p = &frame.points[frame.index_of(e)?];
    let b0 = p.beta0.eval(x, &frame.omega).re;
    let b1 = p.beta1.eval(x, &frame.omega).re;
    let a = p.phase_rate;
    let (s, c) = (a * x).sin_cos();
    Ok((b0 * s + b1 * a * c, b0 * c - b1 * a * s))
}

/// Per-energy pairs `G = (g₁, g₂)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedPair {
    pub energies: Vec<f64>,
    pub g1: Vec<Complex64>,
    pub g2: Vec<Complex64>,
}

impl TransformedPair {
    pub fn scaled(&self, a: Complex64) -> Self {
        Self {
            energies: self.energies.clone(),
            g1: self.g1.iter().map(|g| g * a).collect(),
            g2: self.g2.iter().map(|g| g * a).collect(),
        }
    }

    /// `max_E sqrt(|g₁|² + |g₂|²)`.
    pub fn sup(&self) -> f64 {
        self.g1.iter().zip(&self.g2).map(|(a, b)| (a.norm_sqr() + b.norm_sqr()).sqrt()).fold(0.0, f64::max)
    }
}

/// Integrates `q` against per-point kernels built from `(x, β₀, β₁, ∂β₀, ∂β₁)`.
fn integrate_kernels(
    q: &WaveState,
    frame: &SpectralFrame,
    kernel: impl Fn(&FramePoint, f64, f64, f64, Complex64, Complex64) -> (f64, f64) + Sync,
    need_derivs: bool,
) -> TransformedPair {
    let sup = q.support(1e-15);
    let grid = q.grid;
    let dx = grid.dx();
    let x0 = grid.x(sup.start);
    let vals = &q.values[sup.clone()];
    let n = vals.len();
    let omega = &frame.omega;
    let pairs: Vec<(Complex64, Complex64)> = frame
        .points
        .par_iter()
        .map(|p| {
            if n == 0 {
                return (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
            }
            let b0 = p.beta0.eval_uniform(x0, dx, n, omega);
            let b1 = p.beta1.eval_uniform(x0, dx, n, omega);
            let (d0, d1) = if need_derivs {
                (p.dbeta0.eval_uniform(x0, dx, n, omega), p.dbeta1.eval_uniform(x0, dx, n, omega))
            } else {
                (Vec::new(), Vec::new())
            };
            let zero = Complex64::new(0.0, 0.0);
            let mut g1 = zero;
            let mut g2 = zero;
            for j in 0..n {
                let x = x0 + j as f64 * dx;
                let (db0, db1) = if need_derivs { (d0[j], d1[j]) } else { (zero, zero) };
                let (k, jv) = kernel(p, x, b0[j].re, b1[j].re, db0, db1);
                g1 += vals[j] * k;
                g2 += vals[j] * jv;
            }
            (g1 * dx, g2 * dx)
        })
        .collect();
    TransformedPair {
        energies: frame.energies(),
        g1: pairs.iter().map(|p| p.0).collect(),
        g2: pairs.iter().map(|p| p.1).collect(),
    }
}

/// `Sq = (∫q K dx, ∫q J dx)` at every frame energy.
pub fn apply_transform(q: &WaveState, frame: &SpectralFrame) -> TransformedPair {
    integrate_kernels(
        q,
        frame,
        |p, x, b0, b1, _, _| {
            let a = p.phase_rate;
            let (s, c) = (a * x).sin_cos();
            (b0 * s + b1 * a * c, b0 * c - b1 * a * s)
        },
        false,
    )
}

/// `(∫q ∂_E K dx, ∫q ∂_E J dx)`.
pub fn derivative_transform(q: &WaveState, frame: &SpectralFrame) -> TransformedPair {
    integrate_kernels(
        q,
        frame,
        |p, x, b0, b1, db0, db1| {
            let (a, dr) = (p.phase_rate, p.drho);
            let (db0, db1) = (db0.re, db1.re);
            let (s, c) = (a * x).sin_cos();
            let dk = db0 * s + b0 * x * c * dr + db1 * a * c + b1 * dr * c - b1 * a * x * s * dr;
            let dj = db0 * c - b0 * x * s * dr - db1 * a * s - b1 * dr * s - b1 * a * x * c * dr;
            (dk, dj)
        },
        true,
    )
}

/// `‖G‖ = (Σ_E (|g₁|² + |g₂|²) w_kind(E) ΔE)^{1/2}`.
pub fn transform_norm(g: &TransformedPair, frame: &SpectralFrame, kind: NormKind) -> f64 {
    (0..frame.len())
        .map(|i| (g.g1[i].norm_sqr() + g.g2[i].norm_sqr()) * frame.weight(i, kind) * frame.points[i].quad)
        .sum::<f64>()
        .sqrt()
}

/// `C = ‖Sq₀‖_{L²(dφ)}`.
pub fn ballistic_constant(q0: &WaveState, frame: &SpectralFrame) -> f64 {
    transform_norm(&apply_transform(q0, frame), frame, NormKind::Dphi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FKind {
    Beta00,
    Beta11,
    ConstOne,
}

fn f_values(frame: &SpectralFrame, kind: FKind, xy: (f64, f64)) -> Vec<f64> {
    let om = &frame.omega;
    frame
        .points
        .iter()
        .map(|p| match kind {
            FKind::ConstOne => 1.0,
            FKind::Beta00 => p.beta0.eval(xy.0, om).re * p.beta0.eval(xy.1, om).re,
            FKind::Beta11 => p.beta1.eval(xy.0, om).re * p.beta1.eval(xy.1, om).re,
        })
        .collect()
}

/// Low- and high-branch parts of `∫ f ρ^k cos(Mρ) ∂ρ dE`, integrated in `ρ`
/// with exact piecewise-linear (Filon) panels. The split is placed exactly
/// at `ρ_c`; the high branch carries the factor `(1+ρ⁸)^{−1}`.
pub fn oscillatory_branches(
    frame: &SpectralFrame,
    kind: FKind,
    power_k: i32,
    m: f64,
    xy: (f64, f64),
) -> Result<(f64, f64), TransformError> {
    if !(m.abs() > 1.0) {
        return Err(TransformError::InvalidInput(format!("|M| must exceed 1, got {m}")));
    }
    let max_step = frame
        .components
        .iter()
        .flat_map(|c| frame.points[c.clone()].windows(2).map(|w| w[1].rho - w[0].rho))
        .fold(0.0, f64::max);
    if m.abs() * max_step > PI {
        return Err(TransformError::QuadratureUnderResolved { m, max_step });
    }
    let f = f_values(frame, kind, xy);
    let rc = frame.cutoff_rho_c;
    let (mut low, mut high) = (0.0, 0.0);
    for (ci, comp) in frame.components.iter().enumerate() {
        let mut r: Vec<f64> = frame.points[comp.clone()].iter().map(|p| p.rho).collect();
        let mut fv: Vec<f64> = f[comp.clone()].to_vec();
        if ci == 0 && frame.anchor_bottom && r[0] > 0.0 {
            // constant f below the first node, sampled as finely as the component itself
            let step = if r.len() > 1 { r[1] - r[0] } else { r[0] };
            let n = (r[0] / step).ceil().max(1.0) as usize;
            let head: Vec<f64> = (0..n).map(|i| r[0] * i as f64 / n as f64).collect();
            fv.splice(0..0, std::iter::repeat(fv[0]).take(n));
            r.splice(0..0, head);
        }
        let g: Vec<f64> = r.iter().zip(&fv).map(|(r, f)| f * r.powi(power_k)).collect();
        // split at ρ_c with a shared interpolated node
        let (mut rl, mut gl, mut rh, mut gh) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for i in 0..r.len() {
            if r[i] <= rc {
                rl.push(r[i]);
                gl.push(g[i]);
            } else {
                if i > 0 && r[i - 1] < rc {
                    let t = (rc - r[i - 1]) / (r[i] - r[i - 1]);
                    let gc = g[i - 1] + t * (g[i] - g[i - 1]);
                    rl.push(rc);
                    gl.push(gc);
                    rh.push(rc);
                    gh.push(gc / (1.0 + rc.powi(8)));
                }
                rh.push(r[i]);
                gh.push(g[i] / (1.0 + r[i].powi(8)));
            }
        }
        low += filon_cos(&rl, &gl, m);
        high += filon_cos(&rh, &gh, m);
    }
    Ok((low, high))
}

/// Sum of both branches of [`oscillatory_branches`].
pub fn oscillatory_integral(
    frame: &SpectralFrame,
    kind: FKind,
    power_k: i32,
    m: f64,
    xy: (f64, f64),
) -> Result<f64, TransformError> {
    oscillatory_branches(frame, kind, power_k, m, xy).map(|(l, h)| l + h)
}

/// The same integral by trapezoid in `E` with the finite-difference `∂ρ`.
pub fn oscillatory_integral_de(frame: &SpectralFrame, kind: FKind, power_k: i32, m: f64, xy: (f64, f64)) -> f64 {
    let f = f_values(frame, kind, xy);
    frame
        .points
        .iter()
        .zip(&f)
        .map(|(p, f)| {
            let damp = if p.rho <= frame.cutoff_rho_c { 1.0 } else { 1.0 / (1.0 + p.rho.powi(8)) };
            f * p.rho.powi(power_k) * (m * p.rho).cos() * damp * p.drho * p.quad
        })
        .sum()
}

/// Decay exponent `p` in `|I(M)| ~ M^{−p}`.
///
/// Samples are grouped into `n_bins` logarithmic bins; the root mean square
/// of `|I|` in each bin is regressed against the bin's geometric-mean `M`.
pub fn decay_exponent(ms: &[f64], values: &[f64], n_bins: usize) -> Option<f64> {
    let (lo, hi) = ms.iter().fold((f64::INFINITY, 0.0f64), |(a, b), m| (a.min(*m), b.max(*m)));
    if !(lo > 0.0 && hi > lo) || n_bins < 2 {
        return None;
    }
    let width = (hi / lo).ln() / n_bins as f64;
    let mut acc = vec![(0.0f64, 0.0f64, 0usize); n_bins];
    for (m, v) in ms.iter().zip(values) {
        let b = (((m / lo).ln() / width) as usize).min(n_bins - 1);
        acc[b].0 += v * v;
        acc[b].1 += m.ln();
        acc[b].2 += 1;
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) =
        acc.iter().filter(|a| a.2 > 0 && a.0 > 0.0).map(|a| (a.1 / a.2 as f64, 0.5 * (a.0 / a.2 as f64).ln())).unzip();
    if xs.len() < 2 {
        return None;
    }
    Some(-linear_fit(&xs, &ys).0)
}

/// Relative error of the free-case Parseval identity truncated at `E_max`:
/// `∫₀^{E_max} (|∫q u|² E^{−1/2} + |∫q v|² E^{1/2}) dE/(2π)` against `‖q‖²`,
/// with `u = cos(√E x)`, `v = sin(√E x)/√E`, evaluated after `E = ρ²`.
pub fn verify_classical_parseval(q: &WaveState, e_max: f64) -> f64 {
    let mass = q.l2().powi(2);
    if mass == 0.0 {
        return 0.0;
    }
    let sup = q.support(1e-15);
    let dx = q.grid.dx();
    let xs: Vec<f64> = sup.clone().map(|j| q.grid.x(j)).collect();
    let vals = &q.values[sup];
    let rho_max = e_max.max(0.0).sqrt();
    let extent = xs.last().unwrap().abs().max(xs[0].abs()).max(1.0);
    // resolve the ρ-oscillation of the integrand
    let mut n = ((rho_max * extent / 0.05).ceil() as usize).max(64);
    n += n % 2;
    let h = rho_max / n as f64;
    let integrand = |rho: f64| {
        let (mut c, mut s) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
        for (x, v) in xs.iter().zip(vals) {
            let (sn, cs) = (rho * x).sin_cos();
            c += v * cs;
            s += v * sn;
        }
        ((c * dx).norm_sqr() + (s * dx).norm_sqr()) / PI
    };
    let vals_rho: Vec<f64> = (0..=n).into_par_iter().map(|i| integrand(i as f64 * h)).collect();
    // composite Simpson
    let mut acc = vals_rho[0] + vals_rho[n];
    for i in 1..n {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * vals_rho[i];
    }
    ((acc * h / 3.0) - mass).abs() / mass
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolve::{init_packet, SpatialGrid};
    use crate::potential::FrequencyVector;

    fn free_frame(rho_max: f64, d_rho: f64, rho_c: Option<f64>) -> FrameBundle {
        let v = QuasiPeriodicPotential::zero(FrequencyVector::golden_pair());
        let grid = rho_uniform_grid(0.1, rho_max, d_rho);
        let curve_opts = CurveOptions { h: 0.02, ..Default::default() };
        let fopts = FrameOptions { cutoff_rho_c: rho_c, ..Default::default() };
        compute_frame(&v, &grid, &curve_opts, 3, &ReduceOptions::default(), &fopts).unwrap()
    }

    #[test]
    fn default_cutoff_value() {
        assert!((default_cutoff(1e-3, 0.02) - 1.0351).abs() < 1e-4);
        assert!(default_cutoff(0.0, 0.02).is_infinite());
    }

    #[test]
    fn free_frame_weights_and_kernels() {
        let b = free_frame(2.0, 0.01, Some(1.0));
        let f = &b.frame;
        assert_eq!(f.len(), 191, "{:?}", &f.rejected[..f.rejected.len().min(8)]);
        assert!(f.rejected.is_empty());
        for p in &f.points {
            let rho = p.e.sqrt();
            assert!((p.rho - rho).abs() < 1e-12);
            assert!((p.drho * 2.0 * rho - 1.0).abs() < 1e-2, "E={} drho={}", p.e, p.drho);
            let branch = if rho <= 1.0 { 1.0 } else { 1.0 + rho.powi(8) };
            assert!((p.w * PI * p.drho * branch - 1.0).abs() < 1e-12);
        }
        let e = f.points[50].e;
        for x in [0.0, 0.7, -3.0] {
            let (k, j) = eval_k_j(f, e, x).unwrap();
            assert!((k - (x * e.sqrt()).sin()).abs() < 1e-14);
            assert!((j - (x * e.sqrt()).cos()).abs() < 1e-14);
        }
        assert!(matches!(eval_k_j(f, 0.123456, 0.0), Err(TransformError::EnergyNotInFrame(_))));
    }

    #[test]
    fn free_transform_matches_gaussian_integrals() {
        let b = free_frame(2.0, 0.02, None);
        let grid = SpatialGrid::new(60.0, 2048).unwrap();
        let (w, p) = (1.5, 0.8);
        let q = init_packet(grid, 0.0, w, p).unwrap();
        let g = apply_transform(&q, &b.frame);
        // q = c·e^{−x²/(2w²)+ipx}: ∫q e^{±iρx} = c·w√(2π) e^{−w²(p±ρ)²/2}
        let c0 = q.values[grid.n_points / 2].re;
        for (i, pt) in b.frame.points.iter().enumerate() {
            let r = pt.rho;
            let ep = c0 * w * (2.0 * PI).sqrt() * (-(w * w) * (p + r).powi(2) / 2.0).exp();
            let em = c0 * w * (2.0 * PI).sqrt() * (-(w * w) * (p - r).powi(2) / 2.0).exp();
            // cos → (e^{iρx}+e^{−iρx})/2, sin → (e^{iρx}−e^{−iρx})/(2i)
            let g2 = Complex64::new(0.5 * (ep + em), 0.0);
            let g1 = Complex64::new(0.0, -0.5) * (ep - em);
            assert!((g.g2[i] - g2).norm() < 1e-8, "{} {}", g.g2[i], g2);
            assert!((g.g1[i] - g1).norm() < 1e-8);
        }
        let zero = apply_transform(&WaveState::zeros(grid), &b.frame);
        assert_eq!(transform_norm(&zero, &b.frame, NormKind::Dphi), 0.0);
        let n1 = transform_norm(&g, &b.frame, NormKind::DphiHat);
        let n3 = transform_norm(&g.scaled(Complex64::new(0.0, -3.0)), &b.frame, NormKind::DphiHat);
        assert!((n3 - 3.0 * n1).abs() < 1e-12 * n3);
    }

    #[test]
    fn free_const_one_low_branch_is_sine_integral() {
        let b = free_frame(1.6, 0.005, Some(1.0));
        for m in [2.0, 17.5, 200.0] {
            let (low, _) = oscillatory_branches(&b.frame, FKind::ConstOne, 0, m, (0.0, 0.0)).unwrap();
            assert!((low - m.sin() / m).abs() < 1e-8, "M={m}: {low}");
        }
        assert!(matches!(
            oscillatory_integral(&b.frame, FKind::ConstOne, 0, 1.0, (0.0, 0.0)),
            Err(TransformError::InvalidInput(_))
        ));
        assert!(matches!(
            oscillatory_integral(&b.frame, FKind::ConstOne, 0, 1e4, (0.0, 0.0)),
            Err(TransformError::QuadratureUnderResolved { .. })
        ));
    }

    #[test]
    fn exponent_of_pure_power_law() {
        let ms: Vec<f64> = (0..400).map(|i| 2.0 * 100f64.powf(i as f64 / 399.0)).collect();
        let vals: Vec<f64> = ms.iter().map(|m| 3.0 * m.powf(-1.3)).collect();
        assert!((decay_exponent(&ms, &vals, 8).unwrap() - 1.3).abs() < 1e-3);
    }

    #[test]
    fn parseval_gaussian() {
        let grid = SpatialGrid::new(50.0, 1024).unwrap();
        let q = init_packet(grid, 0.0, 2.0, 0.0).unwrap();
        assert!(verify_classical_parseval(&q, 100.0) < 0.02);
        let e1 = verify_classical_parseval(&q, 0.1);
        let e2 = verify_classical_parseval(&q, 0.2);
        assert!(e2 < e1);
        assert_eq!(verify_classical_parseval(&WaveState::zeros(grid), 100.0), 0.0);
    }
}
