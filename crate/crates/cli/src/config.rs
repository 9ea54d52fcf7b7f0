//! Run configuration (TOML).
//!
//! ```toml
//! out = "results"
//!
//! [potential]
//! golden_eps0 = 1e-3
//!
//! [grid]
//! half_length = 400.0
//! n = 8192
//! t = 40.0
//!
//! [energy]
//! scale = "rho"
//! min = 0.06
//! max = 5.0
//! spacing = 0.005
//! ```
//!
//! Unknown keys are rejected. Errors carry `path:line:col` anchors.

use crate::error::CliError;
use qpbt::cocycle::{rotation_curve, CurveOptions};
use qpbt::potential::PotentialSpec;
use qpbt::reduce::ReduceOptions;
use qpbt::transform::{rho_uniform_grid, FKind, FrameOptions};
use qpbt::{FrequencyVector, QuasiPeriodicPotential};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub potential: PotentialConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub packet: PacketConfig,
    #[serde(default)]
    pub energy: EnergyConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub curve: CurveOptions,
    #[serde(default)]
    pub frame: FrameConfig,
    #[serde(default)]
    pub reduce: ReduceConfig,
    #[serde(default)]
    pub integrals: IntegralsConfig,
}

/// Exactly one source must be given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialConfig {
    /// Potential file, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    /// Golden-pair two-cosine potential scaled to this analytic norm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub golden_eps0: Option<f64>,
    /// Golden-pair potential `Σ a_i cos θ_i`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cosine: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<PotentialSpec>,
    #[serde(default = "default_radius")]
    pub radius: f64,
}

fn default_radius() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub half_length: f64,
    pub n: usize,
    pub dt: f64,
    pub t: f64,
    pub sample_stride: usize,
    /// Fraction of the series used for the slope fit.
    pub late_fraction: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { half_length: 400.0, n: 8192, dt: 0.005, t: 40.0, sample_stride: 20, late_fraction: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PacketConfig {
    pub x0: f64,
    pub width: f64,
    pub momentum: f64,
}

impl Default for PacketConfig {
    fn default() -> Self {
        Self { x0: 0.0, width: 2.0, momentum: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridScale {
    Energy,
    Rho,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConfig {
    /// `energy`: uniform in E. `rho`: uniform in √E, bounds given in √E.
    pub scale: GridScale,
    pub min: f64,
    pub max: f64,
    pub spacing: f64,
    /// Extra points at this spacing around gap edges found on a first pass.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refine_spacing: Option<f64>,
    pub refine_width: f64,
    /// Keep a seeded random subset of this many grid points.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample: Option<usize>,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            scale: GridScale::Rho,
            min: 0.06,
            max: 5.0,
            spacing: 0.005,
            refine_spacing: None,
            refine_width: 0.05,
            sample: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub sigma: f64,
    pub max_steps: usize,
    pub divisor_floor: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { sigma: 0.02, max_steps: 4, divisor_floor: ReduceOptions::default().divisor_floor }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameConfig {
    /// Overrides the default cutoff `ε₀^{−σ/4}`; `inf` keeps every point undamped.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cutoff_rho_c: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReduceConfig {
    /// Run fails when fewer spectrum points than this fraction converge.
    pub min_converged_fraction: f64,
}

impl Default for ReduceConfig {
    fn default() -> Self {
        Self { min_converged_fraction: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegralsConfig {
    pub kinds: Vec<FKind>,
    pub powers: Vec<i32>,
    pub m_min: f64,
    pub m_max: f64,
    pub n_m: usize,
    pub x: f64,
    pub y: f64,
    pub n_bins: usize,
    pub min_exponent: f64,
}

impl Default for IntegralsConfig {
    fn default() -> Self {
        Self {
            kinds: vec![FKind::Beta00, FKind::Beta11, FKind::ConstOne],
            powers: vec![0, 2, 4],
            m_min: 2.0,
            m_max: 200.0,
            n_m: 64,
            x: 0.0,
            y: 0.0,
            n_bins: 8,
            min_exponent: 1.0,
        }
    }
}

/// A parsed configuration with its source text and location.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub source: String,
    pub path: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let source = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&source, path)
    }

    pub fn parse(source: &str, path: &Path) -> Result<Self, CliError> {
        let config: RunConfig = toml::from_str(source).map_err(|e| {
            let (line, col) = e.span().map(|s| line_col(source, s.start)).unwrap_or((1, 1));
            CliError::Validation(format!("{}:{line}:{col}: {}", path.display(), e.message()))
        })?;
        let loaded = Self { config, source: source.to_string(), path: path.to_path_buf() };
        loaded.validate()?;
        Ok(loaded)
    }

    fn dir(&self) -> PathBuf {
        self.path.parent().map(Path::to_path_buf).unwrap_or_default()
    }

    /// Validation error anchored at `table.key`, or at the table header.
    pub fn error_at(&self, table: &str, key: &str, msg: impl std::fmt::Display) -> CliError {
        let line = anchor(&self.source, table, key).unwrap_or(1);
        CliError::Validation(format!("{}:{line}: {table}.{key}: {msg}", self.path.display()))
    }

    fn validate(&self) -> Result<(), CliError> {
        let c = &self.config;
        let g = &c.grid;
        if !g.n.is_power_of_two() || g.n < 16 {
            return Err(self.error_at("grid", "n", format!("must be a power of two >= 16, got {}", g.n)));
        }
        if !(g.half_length > 0.0) {
            return Err(self.error_at("grid", "half_length", "must be positive"));
        }
        if !(g.dt > 0.0 && g.dt.is_finite()) {
            return Err(self.error_at("grid", "dt", "must be positive"));
        }
        if !(g.t >= 0.0 && g.t.is_finite()) {
            return Err(self.error_at("grid", "t", "must be >= 0"));
        }
        if g.sample_stride == 0 {
            return Err(self.error_at("grid", "sample_stride", "must be >= 1"));
        }
        if !(g.late_fraction > 0.0 && g.late_fraction <= 1.0) {
            return Err(self.error_at("grid", "late_fraction", "must lie in (0, 1]"));
        }
        if !(c.packet.width > 0.0) {
            return Err(self.error_at("packet", "width", "must be positive"));
        }
        let e = &c.energy;
        if !(e.spacing > 0.0) {
            return Err(self.error_at("energy", "spacing", "must be positive"));
        }
        if !(e.min < e.max) {
            return Err(self.error_at("energy", "max", format!("must exceed min ({} >= {})", e.min, e.max)));
        }
        if e.scale == GridScale::Rho && !(e.min > 0.0) {
            return Err(self.error_at("energy", "min", "must be positive on the rho scale"));
        }
        if (e.max - e.min) / e.spacing > 1e6 {
            return Err(self.error_at("energy", "spacing", "grid would exceed 10^6 points"));
        }
        if let Some(r) = e.refine_spacing {
            if !(r > 0.0 && r < e.spacing) || !(e.refine_width > 0.0) {
                return Err(self.error_at("energy", "refine_spacing", "must be positive and below spacing"));
            }
        }
        if e.sample == Some(0) {
            return Err(self.error_at("energy", "sample", "must be >= 1"));
        }
        let s = &c.schedule;
        if !(s.sigma > 0.0 && s.sigma < 1.0) {
            return Err(self.error_at("schedule", "sigma", "must lie in (0, 1)"));
        }
        if s.max_steps == 0 {
            return Err(self.error_at("schedule", "max_steps", "must be >= 1"));
        }
        if !(s.divisor_floor > 0.0) {
            return Err(self.error_at("schedule", "divisor_floor", "must be positive"));
        }
        if let Some(rc) = c.frame.cutoff_rho_c {
            if !(rc > 0.0) {
                return Err(self.error_at("frame", "cutoff_rho_c", "must be positive"));
            }
        }
        if !(c.curve.t > 0.0 && c.curve.h > 0.0) {
            return Err(self.error_at("curve", "t", "t and h must be positive"));
        }
        let i = &c.integrals;
        if !(i.m_min > 1.0) {
            return Err(self.error_at("integrals", "m_min", format!("|M| must exceed 1, got {}", i.m_min)));
        }
        if !(i.m_max > i.m_min) || i.n_m < 2 {
            return Err(self.error_at("integrals", "m_max", "need m_max > m_min and n_m >= 2"));
        }
        if i.powers.iter().any(|k| *k < 0) {
            return Err(self.error_at("integrals", "powers", "powers must be >= 0"));
        }
        if i.n_bins < 2 {
            return Err(self.error_at("integrals", "n_bins", "must be >= 2"));
        }
        if !(c.reduce.min_converged_fraction >= 0.0 && c.reduce.min_converged_fraction <= 1.0) {
            return Err(self.error_at("reduce", "min_converged_fraction", "must lie in [0, 1]"));
        }
        self.potential_spec().map(|_| ())
    }

    /// The potential as an explicit spec, reading the file if referenced.
    pub fn potential_spec(&self) -> Result<PotentialSpec, CliError> {
        let p = &self.config.potential;
        let given = [p.file.is_some(), p.golden_eps0.is_some(), p.cosine.is_some(), p.spec.is_some()];
        if given.iter().filter(|g| **g).count() != 1 {
            return Err(self.error_at("potential", "", "give exactly one of file, golden_eps0, cosine, spec"));
        }
        let built = if let Some(f) = &p.file {
            let path = self.dir().join(f);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| self.error_at("potential", "file", format!("{}: {e}", path.display())))?;
            return PotentialSpec::from_toml_str(&text)
                .map_err(|e| self.error_at("potential", "file", format!("{}: {e}", path.display())));
        } else if let Some(eps0) = p.golden_eps0 {
            QuasiPeriodicPotential::with_analytic_norm(FrequencyVector::golden_pair(), eps0, p.radius)
                .map_err(|e| self.error_at("potential", "golden_eps0", e))?
        } else if let Some(a) = &p.cosine {
            QuasiPeriodicPotential::cosine_sum(FrequencyVector::golden_pair(), a, p.radius)
                .map_err(|e| self.error_at("potential", "cosine", e))?
        } else {
            return Ok(p.spec.clone().expect("checked above"));
        };
        Ok(PotentialSpec::from_potential(&built))
    }

    pub fn potential(&self) -> Result<QuasiPeriodicPotential, CliError> {
        self.potential_spec()?.build().map_err(|e| self.error_at("potential", "", e))
    }

    /// The configuration with the potential resolved to an inline spec,
    /// serialized. Identical physics gives identical text.
    pub fn canonical(&self) -> Result<String, CliError> {
        let mut c = self.config.clone();
        c.potential =
            PotentialConfig { spec: Some(self.potential_spec()?), radius: c.potential.radius, ..Default::default() };
        c.out = None;
        toml::to_string(&c).map_err(|e| CliError::Validation(e.to_string()))
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        match (flag, &self.config.out) {
            (Some(f), _) => f.to_path_buf(),
            (None, Some(o)) => self.dir().join(o),
            (None, None) => self.dir().join("qpbt-out"),
        }
    }

    pub fn reduce_options(&self) -> ReduceOptions {
        ReduceOptions { divisor_floor: self.config.schedule.divisor_floor, ..Default::default() }
    }

    pub fn frame_options(&self) -> FrameOptions {
        FrameOptions {
            cutoff_rho_c: self.config.frame.cutoff_rho_c,
            sigma: self.config.schedule.sigma,
            ..Default::default()
        }
    }

    /// The energy grid: uniform base, optional refinement near gap edges,
    /// optional seeded subsample. Strictly increasing.
    pub fn energy_grid(&self, v: &QuasiPeriodicPotential, seed: u64) -> Result<Vec<f64>, CliError> {
        let e = &self.config.energy;
        let mut grid = match e.scale {
            GridScale::Rho => rho_uniform_grid(e.min, e.max, e.spacing),
            GridScale::Energy => {
                let n = ((e.max - e.min) / e.spacing + 1e-9).floor() as usize;
                (0..=n).map(|i| e.min + i as f64 * e.spacing).collect()
            }
        };
        if let Some(fine) = e.refine_spacing {
            let curve = rotation_curve(v, &grid, &self.config.curve).map_err(|x| CliError::Numerical(x.to_string()))?;
            let (lo, hi) = (grid[0], *grid.last().unwrap());
            for g in &curve.gap_labels {
                for edge in [g.e_lo, g.e_hi] {
                    let n = (2.0 * e.refine_width / fine).round() as usize;
                    grid.extend(
                        (0..=n).map(|i| edge - e.refine_width + i as f64 * fine).filter(|x| *x > lo && *x < hi),
                    );
                }
            }
            grid.sort_by(f64::total_cmp);
            grid.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        }
        if let Some(n) = e.sample {
            if n < grid.len() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut idx = sample(&mut rng, grid.len(), n).into_vec();
                idx.sort_unstable();
                grid = idx.into_iter().map(|i| grid[i]).collect();
            }
        }
        if grid.is_empty() {
            return Err(self.error_at("energy", "min", "energy grid is empty"));
        }
        Ok(grid)
    }
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

/// 1-based line of `key = ...` inside `[table]`; the header line if the key
/// is absent; `None` if neither appears.
pub fn anchor(src: &str, table: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header = None;
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == table && header.is_none() {
                header = Some(i + 1);
            }
            continue;
        }
        let Some((k, _)) = line.split_once('=') else { continue };
        let k = k.trim();
        let dotted = format!("{table}.{key}");
        if (current == table && k == key) || (current.is_empty() && k == dotted) {
            return Some(i + 1);
        }
    }
    header
}
