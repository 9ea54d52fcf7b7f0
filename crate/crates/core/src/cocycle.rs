//! The Schrödinger cocycle `(q,q')' = (A₀(E) + F₀(ωx))(q,q')`, its rotation
//! number, Lyapunov exponent, and gap labels.

use crate::lattice::{box_points, Mode};
use crate::potential::{FrequencyVector, LineEvaluator, QuasiPeriodicPotential};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CocycleError {
    #[error("phase guard still failing at x={x} with step {h}")]
    StepTooLarge { x: f64, h: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("energy grid must be strictly increasing (index {0})")]
    UnsortedGrid(usize),
    #[error("plateau at rho={rho} on [{e_lo}, {e_hi}] matches both {a:?} and {b:?}")]
    AmbiguousLabel { rho: f64, e_lo: f64, e_hi: f64, a: Mode, b: Mode },
}

type Real2 = [[f64; 2]; 2];

const ID: Real2 = [[1.0, 0.0], [0.0, 1.0]];
/// Maximum number of halvings of a nominal step.
const MAX_HALVINGS: u32 = 24;

/// Fundamental solution and tracked phase at `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct CocycleState {
    pub x: f64,
    pub phi: Real2,
    /// Unwrapped angle `atan2(v₁, v₀)` of `v = Φ(x)X₀`.
    pub phase: f64,
}

impl CocycleState {
    pub fn det(&self) -> f64 {
        det(&self.phi)
    }

    pub fn norm(&self) -> f64 {
        self.phi.iter().flatten().map(|a| a * a).sum::<f64>().sqrt()
    }
}

#[inline]
fn det(m: &Real2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

#[inline]
fn mm(a: &Real2, b: &Real2) -> Real2 {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}

#[inline]
fn mv(a: &Real2, v: [f64; 2]) -> [f64; 2] {
    [a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]]
}

/// `A · M` with `A = [[0,1],[a,0]]`.
#[inline]
fn amul(a: f64, m: &Real2) -> Real2 {
    [[m[1][0], m[1][1]], [a * m[0][0], a * m[0][1]]]
}

#[inline]
fn axpy(m: &Real2, s: f64, k: &Real2) -> Real2 {
    [[m[0][0] + s * k[0][0], m[0][1] + s * k[0][1]], [m[1][0] + s * k[1][0], m[1][1] + s * k[1][1]]]
}

/// RK4 propagator over `[x, x+h]` for `Y' = [[0,1],[V−E,0]]Y`, rescaled onto `det = 1`.
fn rk4_propagator(ev: &LineEvaluator, e: f64, x: f64, h: f64) -> Real2 {
    let a0 = ev.eval(x) - e;
    let am = ev.eval(x + 0.5 * h) - e;
    let a1 = ev.eval(x + h) - e;
    let k1 = amul(a0, &ID);
    let k2 = amul(am, &axpy(&ID, 0.5 * h, &k1));
    let k3 = amul(am, &axpy(&ID, 0.5 * h, &k2));
    let k4 = amul(a1, &axpy(&ID, h, &k3));
    let mut m = ID;
    for i in 0..2 {
        for j in 0..2 {
            m[i][j] += h / 6.0 * (k1[i][j] + 2.0 * k2[i][j] + 2.0 * k3[i][j] + k4[i][j]);
        }
    }
    let s = det(&m).sqrt().recip();
    m.iter_mut().flatten().for_each(|c| *c *= s);
    m
}

/// Signed angle from `u` to `w`.
#[inline]
fn angle_between(u: [f64; 2], w: [f64; 2]) -> f64 {
    let cross = u[0] * w[1] - u[1] * w[0];
    let dot = u[0] * w[0] + u[1] * w[1];
    cross.atan2(dot)
}

/// One nominal step with local halving; calls `accept(x, h, M)` for each accepted piece.
fn guarded_step(
    ev: &LineEvaluator,
    e: f64,
    x: f64,
    h: f64,
    v: [f64; 2],
    accept: &mut impl FnMut(f64, f64, &Real2, [f64; 2]) -> [f64; 2],
) -> Result<[f64; 2], CocycleError> {
    let m = rk4_propagator(ev, e, x, h);
    if angle_between(v, mv(&m, v)).abs() < FRAC_PI_2 {
        return Ok(accept(x, h, &m, v));
    }
    let mut pieces = 2u32;
    'outer: loop {
        let hp = h / pieces as f64;
        // trial pass: every piece must satisfy the guard
        let mut w = v;
        let mut props = Vec::with_capacity(pieces as usize);
        for p in 0..pieces {
            let xp = x + p as f64 * hp;
            let m = rk4_propagator(ev, e, xp, hp);
            let nw = mv(&m, w);
            if angle_between(w, nw).abs() >= FRAC_PI_2 {
                if pieces >= 1 << MAX_HALVINGS {
                    return Err(CocycleError::StepTooLarge { x: xp, h: hp });
                }
                pieces *= 2;
                continue 'outer;
            }
            props.push(m);
            w = nw;
        }
        let mut w = v;
        for (p, m) in props.iter().enumerate() {
            w = accept(x + p as f64 * hp, hp, m, w);
        }
        return Ok(w);
    }
}

fn check_inputs(t: f64, h: f64) -> Result<(), CocycleError> {
    if !(t.is_finite() && t > 0.0) {
        return Err(CocycleError::InvalidInput(format!("T must be positive, got {t}")));
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(CocycleError::InvalidInput(format!("h must be positive, got {h}")));
    }
    Ok(())
}

/// Integrates `Φ` from `0` to `T` and the unwrapped phase of `Φ(x)X₀`.
pub fn integrate_cocycle(
    e: f64,
    v: &QuasiPeriodicPotential,
    t: f64,
    h: f64,
    x0: [f64; 2],
) -> Result<CocycleState, CocycleError> {
    check_inputs(t, h)?;
    if x0 == [0.0, 0.0] {
        return Err(CocycleError::InvalidInput("X0 must be nonzero".into()));
    }
    let ev = LineEvaluator::new(v);
    let n = (t / h).ceil().max(1.0) as usize;
    let hn = t / n as f64;
    let mut phi = ID;
    let mut phase = x0[1].atan2(x0[0]);
    let scale = (x0[0] * x0[0] + x0[1] * x0[1]).sqrt();
    let mut w = [x0[0] / scale, x0[1] / scale];
    for i in 0..n {
        let x = i as f64 * hn;
        w = guarded_step(&ev, e, x, hn, w, &mut |_, _, m, u| {
            phi = mm(m, &phi);
            let nu = mv(m, u);
            phase += angle_between(u, nu);
            let r = (nu[0] * nu[0] + nu[1] * nu[1]).sqrt();
            [nu[0] / r, nu[1] / r]
        })?;
    }
    Ok(CocycleState { x: t, phi, phase })
}

/// Smooth bump `exp(−1/(s(1−s)))` on `(0,1)`.
#[inline]
fn bump(s: f64) -> f64 {
    if s <= 0.0 || s >= 1.0 {
        0.0
    } else {
        (-1.0 / (s * (1.0 - s))).exp()
    }
}

/// Weighted time averages over one orbit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrbitAverages {
    pub rho: f64,
    pub err_est: f64,
    pub lyapunov: f64,
}

/// Burn-in `T₀ = min(10, T/10)`.
pub fn burn_in(t: f64) -> f64 {
    (t / 10.0).min(10.0)
}

/// Rotation number and Lyapunov exponent from a single orbit.
///
/// Phase and log-norm increments are averaged over `[T₀, T]` with the
/// weight `exp(−1/(s(1−s)))`, which converges much faster than the plain
/// endpoint difference for quasi-periodic increments. `err_est` compares
/// against the same average over the first half of the window.
pub fn orbit_averages(e: f64, v: &QuasiPeriodicPotential, t: f64, h: f64) -> Result<OrbitAverages, CocycleError> {
    check_inputs(t, h)?;
    let ev = LineEvaluator::new(v);
    let t0 = burn_in(t);
    let span = t - t0;
    let half = 0.5 * span;
    let n = (t / h).ceil().max(1.0) as usize;
    let hn = t / n as f64;
    // [Σw Δφ, Σw Δlog, Σw h] for the full and the half window
    let mut full = [0.0f64; 3];
    let mut part = [0.0f64; 3];
    let mut w = [1.0, 0.0];
    for i in 0..n {
        let x = i as f64 * hn;
        w = guarded_step(&ev, e, x, hn, w, &mut |xp, hp, m, u| {
            let nu = mv(m, u);
            let dphi = angle_between(u, nu);
            let r = (nu[0] * nu[0] + nu[1] * nu[1]).sqrt();
            let mid = xp + 0.5 * hp - t0;
            let wf = bump(mid / span);
            if wf > 0.0 {
                full[0] += wf * dphi;
                full[1] += wf * r.ln();
                full[2] += wf * hp;
            }
            let wp = bump(mid / half);
            if wp > 0.0 {
                part[0] += wp * dphi;
                part[1] += wp * r.ln();
                part[2] += wp * hp;
            }
            [nu[0] / r, nu[1] / r]
        })?;
    }
    let rho = (full[0] / full[2]).abs();
    let rho_half = (part[0] / part[2]).abs();
    Ok(OrbitAverages { rho, err_est: (rho - rho_half).abs(), lyapunov: (full[1] / full[2]).max(0.0) })
}

/// `(ρ, err_est)` with `ρ ≥ 0`; the free case gives `ρ = √E`.
pub fn rotation_number(e: f64, v: &QuasiPeriodicPotential, t: f64, h: f64) -> Result<(f64, f64), CocycleError> {
    orbit_averages(e, v, t, h).map(|o| (o.rho, o.err_est))
}

pub fn lyapunov_exponent(e: f64, v: &QuasiPeriodicPotential, t: f64, h: f64) -> Result<f64, CocycleError> {
    orbit_averages(e, v, t, h).map(|o| o.lyapunov)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointClass {
    Spectrum,
    Gap,
    Uncertain,
}

impl PointClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            PointClass::Spectrum => "spectrum",
            PointClass::Gap => "gap",
            PointClass::Uncertain => "uncertain",
        }
    }
}

/// Parameters for [`rotation_curve`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurveOptions {
    pub t: f64,
    pub h: f64,
    /// `drho` below this is treated as flat.
    pub flat_threshold: f64,
    pub lambda_tol: f64,
    pub k_max: i32,
    pub label_tol: f64,
    /// Minimum number of flat grid points forming a plateau.
    pub min_plateau_points: usize,
    /// Points with `err_est` above this are recomputed with `4T`, up to `t_max`.
    pub refine_tol: f64,
    pub t_max: f64,
}

impl Default for CurveOptions {
    fn default() -> Self {
        Self {
            t: 500.0,
            h: 0.01,
            flat_threshold: 1e-3,
            lambda_tol: 1e-2,
            k_max: 3,
            label_tol: 1e-3,
            min_plateau_points: 2,
            refine_tol: 1e-3,
            t_max: 8000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapLabel {
    pub e_lo: f64,
    pub e_hi: f64,
    pub n_points: usize,
    /// Mean rotation number over the plateau.
    pub level: f64,
    pub k: Option<Mode>,
    /// `|level − ⟨k,ω⟩/2|` for the best candidate.
    pub mismatch: f64,
    pub ambiguous: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationCurve {
    pub energies: Vec<f64>,
    /// Monotone projection of `rho_raw`.
    pub rho: Vec<f64>,
    pub rho_raw: Vec<f64>,
    pub err_est: Vec<f64>,
    pub drho: Vec<f64>,
    pub lyapunov: Vec<f64>,
    pub classification: Vec<PointClass>,
    pub gap_labels: Vec<GapLabel>,
    /// Indices `i` with `rho_raw[i] > rho_raw[i+1] + 1e-6`.
    pub monotone_violations: Vec<usize>,
    pub freq: FrequencyVector,
    pub options: CurveOptions,
}

impl RotationCurve {
    /// Lowest energy classified as spectrum.
    pub fn spectrum_bottom(&self) -> Option<f64> {
        self.energies.iter().zip(&self.classification).find(|(_, c)| **c == PointClass::Spectrum).map(|(e, _)| *e)
    }
}

/// Derivative at every node from the nonuniform three-point stencil,
/// one-sided at the ends.
pub fn nonuniform_derivative(x: &[f64], f: &[f64]) -> Vec<f64> {
    let n = x.len();
    assert_eq!(n, f.len());
    if n < 2 {
        return vec![0.0; n];
    }
    let mut d = vec![0.0; n];
    if n == 2 {
        let s = (f[1] - f[0]) / (x[1] - x[0]);
        return vec![s, s];
    }
    let (h1, h2) = (x[1] - x[0], x[2] - x[1]);
    d[0] = -(2.0 * h1 + h2) / (h1 * (h1 + h2)) * f[0] + (h1 + h2) / (h1 * h2) * f[1] - h1 / (h2 * (h1 + h2)) * f[2];
    let (h1, h2) = (x[n - 1] - x[n - 2], x[n - 2] - x[n - 3]);
    d[n - 1] = (2.0 * h1 + h2) / (h1 * (h1 + h2)) * f[n - 1] - (h1 + h2) / (h1 * h2) * f[n - 2]
        + h1 / (h2 * (h1 + h2)) * f[n - 3];
    for i in 1..n - 1 {
        let h1 = x[i] - x[i - 1];
        let h2 = x[i + 1] - x[i];
        d[i] = -h2 / (h1 * (h1 + h2)) * f[i - 1] + (h2 - h1) / (h1 * h2) * f[i] + h1 / (h2 * (h1 + h2)) * f[i + 1];
    }
    d
}

/// Labels `k` with `|k| ≤ k_max` and `⟨k,ω⟩ ≥ 0`, sorted by level.
pub fn label_levels(freq: &FrequencyVector, k_max: i32) -> Vec<(Mode, f64)> {
    let mut out: Vec<(Mode, f64)> = box_points(freq.dim(), k_max)
        .into_iter()
        .filter_map(|k| {
            let lv = freq.half_frequency(&k);
            (k.is_zero() || lv > 0.0).then_some((k, lv))
        })
        .collect();
    out.sort_by(|a, b| a.1.total_cmp(&b.1));
    out
}

/// Closest level to `rho` and the runner-up distance.
fn nearest_level(levels: &[(Mode, f64)], rho: f64) -> Option<((Mode, f64), Option<(Mode, f64)>)> {
    let mut best: Option<(Mode, f64)> = None;
    let mut second: Option<(Mode, f64)> = None;
    for &(k, lv) in levels {
        let d = (rho - lv).abs();
        match best {
            Some((_, bd)) if d >= bd => {
                if second.map_or(true, |(_, sd)| d < sd) {
                    second = Some((k, d));
                }
            }
            _ => {
                second = best;
                best = Some((k, d));
            }
        }
    }
    best.map(|b| (b, second))
}

fn plateau_runs(curve: &RotationCurve) -> Vec<(usize, usize)> {
    let flat = curve.options.flat_threshold;
    let mut runs = Vec::new();
    let mut start = None;
    for i in 0..=curve.energies.len() {
        let is_flat = i < curve.energies.len() && curve.rho_raw[i].is_finite() && curve.drho[i].abs() < flat;
        match (is_flat, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                if i - s >= curve.options.min_plateau_points {
                    runs.push((s, i));
                }
                start = None;
            }
            _ => {}
        }
    }
    runs
}

fn collect_labels(curve: &RotationCurve, k_max: i32, tol: f64) -> Vec<GapLabel> {
    let levels = label_levels(&curve.freq, k_max);
    plateau_runs(curve)
        .into_iter()
        .map(|(s, e)| {
            let level = curve.rho[s..e].iter().sum::<f64>() / (e - s) as f64;
            let (k, mismatch, ambiguous) = match nearest_level(&levels, level) {
                Some(((k, d), second)) => {
                    let amb = d <= tol && second.is_some_and(|(_, sd)| sd <= tol);
                    ((d <= tol && !amb).then_some(k), d, amb)
                }
                None => (None, f64::INFINITY, false),
            };
            GapLabel {
                e_lo: curve.energies[s],
                e_hi: curve.energies[e - 1],
                n_points: e - s,
                level,
                k,
                mismatch,
                ambiguous,
            }
        })
        .collect()
}

/// Labels every plateau of the curve with the unique `|k| ≤ k_max` whose
/// level `⟨k,ω⟩/2` lies within `tol`. Plateaus with no such `k` keep `k = None`.
pub fn label_gaps(curve: &RotationCurve, k_max: i32, tol: f64) -> Result<Vec<GapLabel>, CocycleError> {
    let labels = collect_labels(curve, k_max, tol);
    if let Some(g) = labels.iter().find(|g| g.ambiguous) {
        let levels = label_levels(&curve.freq, k_max);
        let mut close = levels.iter().filter(|(_, lv)| (lv - g.level).abs() <= tol);
        let a = close.next().map(|x| x.0).unwrap_or_default();
        let b = close.next().map(|x| x.0).unwrap_or_default();
        return Err(CocycleError::AmbiguousLabel { rho: g.level, e_lo: g.e_lo, e_hi: g.e_hi, a, b });
    }
    Ok(labels)
}

/// Rotation curve over a strictly increasing energy grid, computed in parallel.
pub fn rotation_curve(
    v: &QuasiPeriodicPotential,
    egrid: &[f64],
    opts: &CurveOptions,
) -> Result<RotationCurve, CocycleError> {
    check_inputs(opts.t, opts.h)?;
    if let Some(i) = egrid.windows(2).position(|w| !(w[0] < w[1])) {
        return Err(CocycleError::UnsortedGrid(i + 1));
    }
    let orbits: Vec<Option<OrbitAverages>> = egrid
        .par_iter()
        .map(|&e| {
            let mut t = opts.t;
            let mut o = orbit_averages(e, v, t, opts.h).ok()?;
            while o.err_est > opts.refine_tol && t * 4.0 <= opts.t_max {
                t *= 4.0;
                o = orbit_averages(e, v, t, opts.h).ok()?;
            }
            Some(o)
        })
        .collect();
    let rho_raw: Vec<f64> = orbits.iter().map(|o| o.map_or(f64::NAN, |o| o.rho)).collect();
    let err_est = orbits.iter().map(|o| o.map_or(f64::NAN, |o| o.err_est)).collect();
    let lyapunov: Vec<f64> = orbits.iter().map(|o| o.map_or(f64::NAN, |o| o.lyapunov)).collect();

    let mut monotone_violations = Vec::new();
    let mut last: Option<(usize, f64)> = None;
    for (i, &r) in rho_raw.iter().enumerate() {
        if !r.is_finite() {
            continue;
        }
        if let Some((j, lr)) = last {
            if lr > r + 1e-6 {
                monotone_violations.push(j);
            }
        }
        last = Some((i, r));
    }
    let mut run_max = f64::NEG_INFINITY;
    let rho: Vec<f64> = rho_raw
        .iter()
        .map(|&r| {
            if r.is_finite() {
                run_max = run_max.max(r);
                run_max
            } else {
                f64::NAN
            }
        })
        .collect();
    let drho = nonuniform_derivative(egrid, &rho);

    let levels = label_levels(v.freq(), opts.k_max);
    let classification = (0..egrid.len())
        .map(|i| {
            if !rho[i].is_finite() || !drho[i].is_finite() {
                return PointClass::Uncertain;
            }
            let near = nearest_level(&levels, rho[i]).map_or(f64::INFINITY, |((_, d), _)| d);
            if drho[i].abs() < opts.flat_threshold && near <= opts.label_tol {
                PointClass::Gap
            } else if lyapunov[i] < opts.lambda_tol && drho[i] > opts.flat_threshold {
                PointClass::Spectrum
            } else {
                PointClass::Uncertain
            }
        })
        .collect();

    let mut curve = RotationCurve {
        energies: egrid.to_vec(),
        rho,
        rho_raw,
        err_est,
        drho,
        lyapunov,
        classification,
        gap_labels: Vec::new(),
        monotone_violations,
        freq: v.freq().clone(),
        options: *opts,
    };
    curve.gap_labels = collect_labels(&curve, opts.k_max, opts.label_tol);
    Ok(curve)
}
