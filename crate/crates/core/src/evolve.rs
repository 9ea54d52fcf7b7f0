//! Split-step Fourier evolution of `i∂_t q = −∂²_x q + V(ωx) q` on a
//! periodic box `[−L, L)`, with diffusion-norm bookkeeping.

use crate::potential::QuasiPeriodicPotential;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvolveError {
    #[error("grid needs a power-of-two size >= 16 and L > 0 (n={n}, L={l})")]
    BadGrid { n: usize, l: f64 },
    #[error("packet does not fit the box: {0}")]
    PacketTooWide(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("fit window holds {0} samples, need at least 10")]
    WindowTooSmall(usize),
    #[error("state and grid sizes differ")]
    SizeMismatch,
}

/// Fraction of the half-length beyond which mass counts as boundary mass.
pub const BOUNDARY_FRACTION: f64 = 0.9;
/// Boundary mass that truncates a run.
pub const CONTAINMENT_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    pub half_length: f64,
    pub n_points: usize,
}

impl SpatialGrid {
    pub fn new(half_length: f64, n_points: usize) -> Result<Self, EvolveError> {
        if !(half_length.is_finite() && half_length > 0.0) || n_points < 16 || !n_points.is_power_of_two() {
            return Err(EvolveError::BadGrid { n: n_points, l: half_length });
        }
        Ok(Self { half_length, n_points })
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.half_length / self.n_points as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        -self.half_length + j as f64 * self.dx()
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.n_points).map(|j| self.x(j)).collect()
    }

    /// Angular wavenumbers in FFT order.
    pub fn wavenumbers(&self) -> Vec<f64> {
        let n = self.n_points;
        let dk = PI / self.half_length;
        (0..n).map(|m| if m < n / 2 { m as f64 } else { m as f64 - n as f64 } * dk).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveState {
    pub grid: SpatialGrid,
    pub values: Vec<Complex64>,
    pub time: f64,
}

impl WaveState {
    pub fn zeros(grid: SpatialGrid) -> Self {
        Self { grid, values: vec![Complex64::new(0.0, 0.0); grid.n_points], time: 0.0 }
    }

    pub fn from_fn(grid: SpatialGrid, f: impl Fn(f64) -> Complex64) -> Self {
        Self { grid, values: grid.xs().into_iter().map(f).collect(), time: 0.0 }
    }

    pub fn scaled(&self, a: Complex64) -> Self {
        Self { values: self.values.iter().map(|v| v * a).collect(), ..self.clone() }
    }

    /// `self + a·other` on the same grid.
    pub fn axpy(&self, a: Complex64, other: &WaveState) -> Result<Self, EvolveError> {
        if self.grid != other.grid {
            return Err(EvolveError::SizeMismatch);
        }
        let values = self.values.iter().zip(&other.values).map(|(x, y)| x + a * y).collect();
        Ok(Self { values, ..self.clone() })
    }

    /// Index range outside of which `|q| ≤ tol·max|q|`.
    pub fn support(&self, tol: f64) -> std::ops::Range<usize> {
        let peak = self.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
        if peak == 0.0 {
            return 0..0;
        }
        let cut = tol * peak;
        let lo = self.values.iter().position(|v| v.norm() > cut).unwrap_or(0);
        let hi = self.values.iter().rposition(|v| v.norm() > cut).map_or(0, |i| i + 1);
        lo..hi
    }

    pub fn l2(&self) -> f64 {
        (self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.grid.dx()).sqrt()
    }

    /// Mass with `|x| > 0.9 L`.
    pub fn boundary_mass(&self) -> f64 {
        let edge = BOUNDARY_FRACTION * self.grid.half_length;
        let dx = self.grid.dx();
        self.values
            .iter()
            .enumerate()
            .filter(|(j, _)| self.grid.x(*j).abs() > edge)
            .map(|(_, v)| v.norm_sqr())
            .sum::<f64>()
            * dx
    }
}

/// `(‖q‖_{L²}, ‖q‖_{H¹}, ‖q‖_D)` at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Norms {
    pub l2: f64,
    pub h1: f64,
    pub diffusion: f64,
}

/// `‖∂_x q‖_{L²}` by spectral differentiation.
pub fn derivative_norm(state: &WaveState) -> f64 {
    let grid = state.grid;
    let n = grid.n_points;
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut buf = state.values.clone();
    fft.process(&mut buf);
    // discrete Parseval: Σ|q_j|² dx = (dx/n) Σ|q̂_m|²
    let s: f64 = buf.iter().zip(grid.wavenumbers()).map(|(c, k)| k * k * c.norm_sqr()).sum();
    (s * grid.dx() / n as f64).sqrt()
}

pub fn norms(state: &WaveState) -> Norms {
    let dx = state.grid.dx();
    let l2 = state.l2();
    let d1 = derivative_norm(state);
    let m2: f64 = state
        .values
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let x = state.grid.x(j);
            x * x * v.norm_sqr()
        })
        .sum::<f64>()
        * dx;
    Norms { l2, h1: (l2 * l2 + d1 * d1).sqrt(), diffusion: m2.sqrt() }
}

/// Normalized Gaussian `e^{−(x−x₀)²/(2w²)} e^{ipx}`.
pub fn init_packet(grid: SpatialGrid, x0: f64, width: f64, momentum: f64) -> Result<WaveState, EvolveError> {
    if !(width.is_finite() && width > 0.0) {
        return Err(EvolveError::InvalidInput(format!("width must be positive, got {width}")));
    }
    if width > grid.half_length / 4.0 {
        return Err(EvolveError::PacketTooWide(format!("width {width} > L/4 = {}", grid.half_length / 4.0)));
    }
    let raw = WaveState::from_fn(grid, |x| {
        let a = (-(x - x0).powi(2) / (2.0 * width * width)).exp();
        Complex64::from_polar(a, momentum * x)
    });
    let norm = raw.l2();
    let q = raw.scaled(Complex64::new(1.0 / norm, 0.0));
    let tail = q.boundary_mass();
    if tail > 1e-12 {
        return Err(EvolveError::PacketTooWide(format!("boundary mass {tail:.3e} > 1e-12")));
    }
    Ok(q)
}

/// Strang stepper with precomputed phases and FFT plans.
pub struct Stepper {
    grid: SpatialGrid,
    dt: f64,
    half_potential: Vec<Complex64>,
    kinetic: Vec<Complex64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
}

impl Stepper {
    pub fn new(grid: SpatialGrid, v: &QuasiPeriodicPotential, dt: f64) -> Self {
        Self::with_values(grid, &grid.xs().iter().map(|&x| v.eval(x)).collect::<Vec<_>>(), dt)
    }

    /// Stepper for a potential given by its grid values.
    pub fn with_values(grid: SpatialGrid, vx: &[f64], dt: f64) -> Self {
        let n = grid.n_points;
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        let scratch =
            vec![Complex64::new(0.0, 0.0); forward.get_inplace_scratch_len().max(inverse.get_inplace_scratch_len())];
        let inv_n = 1.0 / n as f64;
        Self {
            grid,
            dt,
            half_potential: vx.iter().map(|v| Complex64::from_polar(1.0, -0.5 * v * dt)).collect(),
            kinetic: grid.wavenumbers().iter().map(|k| Complex64::from_polar(inv_n, -k * k * dt)).collect(),
            forward,
            inverse,
            scratch,
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// One step `e^{−iVdt/2} e^{−iξ²dt} e^{−iVdt/2}` in place.
    pub fn step(&mut self, state: &mut WaveState) {
        let q = &mut state.values;
        for (v, p) in q.iter_mut().zip(&self.half_potential) {
            *v *= p;
        }
        self.forward.process_with_scratch(q, &mut self.scratch);
        for (v, p) in q.iter_mut().zip(&self.kinetic) {
            *v *= p;
        }
        self.inverse.process_with_scratch(q, &mut self.scratch);
        for (v, p) in q.iter_mut().zip(&self.half_potential) {
            *v *= p;
        }
        state.time += self.dt;
    }

    pub fn grid(&self) -> SpatialGrid {
        self.grid
    }
}

/// Single Strang step; builds a fresh [`Stepper`].
pub fn step_strang(state: &WaveState, v: &QuasiPeriodicPotential, dt: f64) -> WaveState {
    let mut out = state.clone();
    Stepper::new(state.grid, v, dt).step(&mut out);
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NormSeries {
    pub times: Vec<f64>,
    pub l2: Vec<f64>,
    pub h1: Vec<f64>,
    pub diffusion: Vec<f64>,
    pub boundary_mass: Vec<f64>,
    /// Set when the run stopped early because mass reached the boundary.
    pub containment_violated: bool,
}

impl NormSeries {
    fn push(&mut self, state: &WaveState) {
        let n = norms(state);
        self.times.push(state.time);
        self.l2.push(n.l2);
        self.h1.push(n.h1);
        self.diffusion.push(n.diffusion);
        self.boundary_mass.push(state.boundary_mass());
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `max_t |‖q(t)‖ − ‖q(0)‖|`.
    pub fn l2_drift(&self) -> f64 {
        let Some(&first) = self.l2.first() else { return 0.0 };
        self.l2.iter().map(|v| (v - first).abs()).fold(0.0, f64::max)
    }
}

/// Whether a packet moving at speed `2p` stays `margin` away from the box edge up to `T`.
pub fn containment_ok(grid: &SpatialGrid, x0: f64, width: f64, momentum: f64, t: f64) -> bool {
    let extent = x0.abs() + 8.0 * width + 2.0 * t * (momentum.abs() + 6.0 / width);
    extent < BOUNDARY_FRACTION * grid.half_length
}

/// Evolves `q0` to time `T`, sampling norms every `sample_stride` steps.
/// Returns the series and the final state.
pub fn evolve_and_record(
    q0: &WaveState,
    v: &QuasiPeriodicPotential,
    t: f64,
    dt: f64,
    sample_stride: usize,
) -> Result<(NormSeries, WaveState), EvolveError> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(EvolveError::InvalidInput(format!("T must be >= 0, got {t}")));
    }
    if !(dt.is_finite() && dt > 0.0) || sample_stride == 0 {
        return Err(EvolveError::InvalidInput("dt must be positive and stride >= 1".into()));
    }
    let mut stepper = Stepper::new(q0.grid, v, dt);
    let mut state = q0.clone();
    let mut series = NormSeries::default();
    series.push(&state);
    let steps = (t / dt).round() as usize;
    for i in 1..=steps {
        stepper.step(&mut state);
        if i % sample_stride == 0 || i == steps {
            series.push(&state);
            if *series.boundary_mass.last().unwrap() > CONTAINMENT_THRESHOLD {
                series.containment_violated = true;
                break;
            }
        }
    }
    Ok((series, state))
}

/// Least-squares line through the last `late_fraction` of the diffusion
/// series. Returns `(slope ≥ 0, r²)`.
pub fn fit_slope(series: &NormSeries, late_fraction: f64) -> Result<(f64, f64), EvolveError> {
    if !(late_fraction > 0.0 && late_fraction <= 1.0) {
        return Err(EvolveError::InvalidInput(format!("late_fraction must be in (0,1], got {late_fraction}")));
    }
    let n = series.len();
    let take = ((n as f64) * late_fraction).round() as usize;
    if take < 10 {
        return Err(EvolveError::WindowTooSmall(take));
    }
    let t = &series.times[n - take..];
    let y = &series.diffusion[n - take..];
    let (slope, _, r2) = linear_fit(t, y);
    Ok((slope.max(0.0), r2))
}

/// `(slope, intercept, r²)` of the least-squares line.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

/// Smallest `c ≥ 0` with `‖q(t)‖_D ≤ ‖q(0)‖_D + c(‖q(0)‖_{H¹} + ‖q(0)‖_D)t` at every sample.
pub fn check_upper_bound(series: &NormSeries, q0: &Norms) -> f64 {
    let scale = q0.h1 + q0.diffusion;
    series
        .times
        .iter()
        .zip(&series.diffusion)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, d)| (d - q0.diffusion) / (scale * t))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::FrequencyVector;

    fn grid() -> SpatialGrid {
        SpatialGrid::new(100.0, 2048).unwrap()
    }

    fn free() -> QuasiPeriodicPotential {
        QuasiPeriodicPotential::zero(FrequencyVector::golden_pair())
    }

    /// Free Gaussian `e^{−x²/(2w²)+ipx}` evolved to time `t` (unnormalized by
    /// the same constant as the grid packet, so compare after normalizing).
    fn free_gaussian(x: f64, w: f64, p: f64, t: f64) -> Complex64 {
        let s = Complex64::new(w * w, 2.0 * t);
        let pre = (Complex64::new(w * w, 0.0) / s).sqrt();
        let arg = -(Complex64::new(x, 0.0) - Complex64::new(0.0, w * w * p)).powi(2) / (2.0 * s) - w * w * p * p / 2.0;
        pre * arg.exp()
    }

    #[test]
    fn grid_validation() {
        assert!(SpatialGrid::new(10.0, 100).is_err());
        assert!(SpatialGrid::new(10.0, 8).is_err());
        assert!(SpatialGrid::new(-1.0, 64).is_err());
        let g = SpatialGrid::new(10.0, 64).unwrap();
        assert_eq!(g.x(32), 0.0);
    }

    #[test]
    fn packet_moments() {
        let q = init_packet(grid(), 0.0, 2.0, 0.0).unwrap();
        let n = norms(&q);
        assert!((n.l2 - 1.0).abs() < 1e-12);
        assert!((n.diffusion - 2f64.sqrt()).abs() < 1e-6);
        let shifted = norms(&init_packet(grid(), 5.0, 2.0, 0.0).unwrap());
        assert!((shifted.diffusion.powi(2) - (2.0 + 25.0)).abs() < 1e-5);
        let moving = norms(&init_packet(grid(), 0.0, 2.0, 2.0).unwrap());
        assert!(moving.h1 > n.h1);
        // ‖q'‖² = p² + 1/(2w²)
        assert!((moving.h1.powi(2) - 1.0 - 4.125).abs() < 1e-10);
        assert!(matches!(init_packet(grid(), 0.0, 30.0, 0.0), Err(EvolveError::PacketTooWide(_))));
        assert!(matches!(init_packet(grid(), 95.0, 2.0, 0.0), Err(EvolveError::PacketTooWide(_))));
    }

    #[test]
    fn zero_step_is_identity() {
        let q = init_packet(grid(), 0.0, 2.0, 1.0).unwrap();
        let out = step_strang(&q, &free(), 0.0);
        let err = out.values.iter().zip(&q.values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-14);
    }

    #[test]
    fn constant_potential_is_global_phase() {
        let f = FrequencyVector::golden_pair();
        let c = 0.7;
        let vc = QuasiPeriodicPotential::new(f, [(crate::Mode::ZERO, Complex64::new(c, 0.0))], 0.5).unwrap();
        let q = init_packet(grid(), 0.0, 2.0, 1.0).unwrap();
        let a = step_strang(&q, &vc, 0.05);
        let b = step_strang(&q, &free(), 0.05);
        let ph = Complex64::from_polar(1.0, -c * 0.05);
        let err = a.values.iter().zip(&b.values).map(|(x, y)| (x - ph * y).norm()).fold(0.0, f64::max);
        assert!(err < 1e-13);
    }

    #[test]
    fn free_step_matches_closed_form() {
        let g = grid();
        let (w, p, dt) = (2.0, 1.5, 0.01);
        let q = init_packet(g, 0.0, w, p).unwrap();
        let norm0 = free_gaussian(0.0, w, p, 0.0).norm() / q.values[g.n_points / 2].norm();
        let out = step_strang(&q, &free(), dt);
        let err = (0..g.n_points)
            .map(|j| (out.values[j] - free_gaussian(g.x(j), w, p, dt) / norm0).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn unitarity_and_reversal() {
        let f = FrequencyVector::golden_pair();
        let v = QuasiPeriodicPotential::cosine_sum(f, &[0.3, 0.3], 0.5).unwrap();
        let q = init_packet(grid(), 0.0, 2.0, 1.0).unwrap();
        let mut fwd = Stepper::new(q.grid, &v, 0.01);
        let mut bwd = Stepper::new(q.grid, &v, -0.01);
        let mut s = q.clone();
        for _ in 0..200 {
            fwd.step(&mut s);
        }
        assert!((s.l2() - 1.0).abs() < 1e-12);
        for _ in 0..200 {
            bwd.step(&mut s);
        }
        let err = s.values.iter().zip(&q.values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-10);
    }

    #[test]
    fn record_zero_time_and_exact_line() {
        let q = init_packet(grid(), 0.0, 2.0, 0.0).unwrap();
        let (s, _) = evolve_and_record(&q, &free(), 0.0, 0.01, 10).unwrap();
        assert_eq!(s.len(), 1);
        assert!((s.diffusion[0] - norms(&q).diffusion).abs() < 1e-15);
        assert!(matches!(fit_slope(&s, 0.5), Err(EvolveError::WindowTooSmall(_))));

        let times: Vec<f64> = (0..40).map(|i| i as f64 * 0.5).collect();
        let line = NormSeries {
            diffusion: times.iter().map(|t| 3.0 * t + 1.0).collect(),
            l2: vec![1.0; 40],
            h1: vec![1.0; 40],
            boundary_mass: vec![0.0; 40],
            times,
            containment_violated: false,
        };
        let (slope, r2) = fit_slope(&line, 0.5).unwrap();
        assert!((slope - 3.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_series_needs_no_constant() {
        let n0 = Norms { l2: 1.0, h1: 2.0, diffusion: 1.5 };
        let s = NormSeries {
            times: vec![0.0, 1.0, 2.0],
            l2: vec![1.0; 3],
            h1: vec![2.0; 3],
            diffusion: vec![1.5; 3],
            boundary_mass: vec![0.0; 3],
            containment_violated: false,
        };
        assert_eq!(check_upper_bound(&s, &n0), 0.0);
    }

    #[test]
    fn short_free_run_is_convex_increasing() {
        let q = init_packet(grid(), 0.0, 2.0, 1.0).unwrap();
        let (s, _) = evolve_and_record(&q, &free(), 5.0, 0.01, 20).unwrap();
        let d = &s.diffusion;
        assert!(d.windows(2).all(|w| w[1] > w[0]));
        // D² is an exact quadratic in t for the free flow
        let d2: Vec<f64> = d.iter().map(|x| x * x).collect();
        assert!(d2.windows(3).all(|w| w[2] - 2.0 * w[1] + w[0] > 0.0));
        assert!(!s.containment_violated);
    }

    #[test]
    fn leaving_the_box_truncates_the_run() {
        let g = SpatialGrid::new(20.0, 512).unwrap();
        let q = init_packet(g, 0.0, 1.0, 3.0).unwrap();
        let (s, st) = evolve_and_record(&q, &free(), 10.0, 0.01, 5).unwrap();
        assert!(s.containment_violated);
        assert!(st.time < 10.0);
        assert!(!containment_ok(&g, 0.0, 1.0, 3.0, 10.0));
    }
}
