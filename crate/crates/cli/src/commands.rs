//! Subcommand bodies.

use crate::config::LoadedConfig;
use crate::error::CliError;
use crate::output::{config_hash, num, up_to_date, OutputDir, RunManifest, StageStatus, MANIFEST_SUFFIX};
use crate::svg::{line_plot, Axes, Series};
use qpbt::cocycle::{rotation_curve, PointClass, RotationCurve};
use qpbt::evolve::{
    check_upper_bound, containment_ok, derivative_norm, evolve_and_record, fit_slope, init_packet, linear_fit, norms,
    EvolveError, SpatialGrid,
};
use qpbt::reduce::{reduce_cocycle, KamSchedule, ReduceStatus};
use qpbt::transform::{
    apply_transform, ballistic_constant, compute_frame, decay_exponent, oscillatory_branches, FKind, FrameBundle,
    NormKind, TransformError,
};
use qpbt::{Mode, QuasiPeriodicPotential};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Rotation,
    Reduce,
    Transport,
    Integrals,
    Report,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Rotation => "rotation",
            Command::Reduce => "reduce",
            Command::Transport => "transport",
            Command::Integrals => "integrals",
            Command::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub force: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Ran(RunManifest),
    /// A previous run with the same configuration hash is still intact.
    Skipped(RunManifest),
}

impl Outcome {
    pub fn manifest(&self) -> &RunManifest {
        match self {
            Outcome::Ran(m) | Outcome::Skipped(m) => m,
        }
    }
}

/// Runs `cmd`. A failed numerical stage still writes its manifest and is
/// then reported as [`CliError::Numerical`].
pub fn execute(cmd: Command, opts: &RunOptions) -> Result<Outcome, CliError> {
    if cmd == Command::Report {
        return report(opts);
    }
    let path =
        opts.config.as_deref().ok_or_else(|| CliError::Validation(format!("{} requires --config", cmd.name())))?;
    let cfg = LoadedConfig::load(path)?;
    let canonical = cfg.canonical()?;
    let hash = config_hash(cmd.name(), opts.seed, &canonical);
    let root = cfg.out_dir(opts.out.as_deref());
    if !opts.force {
        if let Some(m) = up_to_date(&root, cmd.name(), &hash) {
            return settle(Outcome::Skipped(m));
        }
    }
    let v = cfg.potential()?;
    if cmd == Command::Transport {
        precheck_transport(&cfg)?;
    }
    let mut out = OutputDir::create(&root)?;
    let mut m = RunManifest::new(cmd.name(), hash, opts.seed, canonical);
    let res = match cmd {
        Command::Rotation => rotation(&cfg, &v, opts.seed, &mut out, &mut m),
        Command::Reduce => reduce(&cfg, &v, opts.seed, &mut out, &mut m),
        Command::Transport => transport(&cfg, &v, opts.seed, &mut out, &mut m),
        Command::Integrals => integrals(&cfg, &v, opts.seed, &mut out, &mut m),
        Command::Report => unreachable!(),
    };
    if let Err(e) = res {
        match e {
            CliError::Numerical(msg) => m.stage("run", StageStatus::Failed, msg),
            other => return Err(other),
        }
    }
    settle(Outcome::Ran(out.finish(m)?))
}

fn settle(o: Outcome) -> Result<Outcome, CliError> {
    match o.manifest().failed() {
        Some(s) => Err(CliError::Numerical(format!("stage {} failed: {}", s.name, s.detail))),
        None => Ok(o),
    }
}

fn numerical(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

fn mode_str(k: &Mode, d: usize) -> String {
    k.0[..d].iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";")
}

fn gap_of(curve: &RotationCurve, e: f64) -> String {
    let d = curve.freq.dim();
    curve
        .gap_labels
        .iter()
        .find(|g| e >= g.e_lo && e <= g.e_hi)
        .and_then(|g| g.k)
        .map(|k| mode_str(&k, d))
        .unwrap_or_default()
}

fn rotation(
    cfg: &LoadedConfig,
    v: &QuasiPeriodicPotential,
    seed: u64,
    out: &mut OutputDir,
    m: &mut RunManifest,
) -> Result<(), CliError> {
    let grid = cfg.energy_grid(v, seed)?;
    let curve = rotation_curve(v, &grid, &cfg.config.curve).map_err(numerical)?;
    m.stage("curve", StageStatus::Ok, format!("{} energies", grid.len()));
    let rows: Vec<Vec<String>> = (0..grid.len())
        .map(|i| {
            vec![
                num(grid[i]),
                num(curve.rho[i]),
                num(curve.drho[i]),
                num(curve.lyapunov[i]),
                curve.classification[i].as_str().into(),
                gap_of(&curve, grid[i]),
            ]
        })
        .collect();
    out.csv("rotation.csv", &["E", "rho", "drho", "lyapunov", "class", "gap_k"], &rows)?;
    let d = v.freq().dim();
    let gaps: Vec<Vec<String>> = curve
        .gap_labels
        .iter()
        .map(|g| {
            vec![
                num(g.e_lo),
                num(g.e_hi),
                g.n_points.to_string(),
                num(g.level),
                g.k.map(|k| mode_str(&k, d)).unwrap_or_default(),
                num(g.mismatch),
                g.ambiguous.to_string(),
            ]
        })
        .collect();
    out.csv("rotation_gaps.csv", &["e_lo", "e_hi", "n_points", "level", "k", "mismatch", "ambiguous"], &gaps)?;
    let pts: Vec<(f64, f64)> = grid.iter().copied().zip(curve.rho.iter().copied()).collect();
    out.columns("rotation.dat", &["E", "rho"], &pts.iter().map(|p| vec![p.0, p.1]).collect::<Vec<_>>())?;
    let svg = line_plot(
        &Axes { title: "rotation number", x_label: "E", y_label: "rho", ..Default::default() },
        &[Series { label: "rho(E)", points: pts, markers: false }],
    );
    out.write("rotation.svg", svg.as_bytes())?;
    let n_spec = curve.classification.iter().filter(|c| **c == PointClass::Spectrum).count();
    m.metric("n_energies", grid.len() as f64);
    m.metric("n_spectrum", n_spec as f64);
    m.metric("n_gaps", curve.gap_labels.len() as f64);
    m.metric("max_err_est", curve.err_est.iter().copied().fold(0.0, f64::max));
    m.metric("monotone_violations", curve.monotone_violations.len() as f64);
    m.flag("ambiguous_labels", curve.gap_labels.iter().any(|g| g.ambiguous));
    m.stage("labels", StageStatus::Ok, format!("{} plateaus", curve.gap_labels.len()));
    Ok(())
}

fn schedule(cfg: &LoadedConfig, v: &QuasiPeriodicPotential) -> Result<KamSchedule, CliError> {
    let s = &cfg.config.schedule;
    KamSchedule::for_potential(v, s.sigma, s.max_steps).map_err(|e| cfg.error_at("potential", "", e))
}

fn reduce(
    cfg: &LoadedConfig,
    v: &QuasiPeriodicPotential,
    seed: u64,
    out: &mut OutputDir,
    m: &mut RunManifest,
) -> Result<(), CliError> {
    let sched = schedule(cfg, v)?;
    let grid = cfg.energy_grid(v, seed)?;
    let curve = rotation_curve(v, &grid, &cfg.config.curve).map_err(numerical)?;
    m.stage("curve", StageStatus::Ok, format!("{} energies", grid.len()));
    let opts = cfg.reduce_options();
    let res: Vec<_> = grid.par_iter().map(|&e| reduce_cocycle(e, v, &sched, &opts)).collect();
    let rows: Vec<Vec<String>> = res
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                num(r.e),
                curve.classification[i].as_str().into(),
                r.status.as_str().into(),
                num(r.residual),
                r.steps.to_string(),
                num(r.alpha),
                num(r.rho_total),
                num(r.xi),
                r.contraction_exponent().map(num).unwrap_or_default(),
                r.resonances.len().to_string(),
            ]
        })
        .collect();
    out.csv(
        "reduce.csv",
        &["E", "class", "status", "residual", "steps", "alpha", "rho_total", "xi", "contraction", "resonances"],
        &rows,
    )?;
    let spec: Vec<_> = (0..grid.len()).filter(|&i| curve.classification[i] == PointClass::Spectrum).collect();
    let conv = spec.iter().filter(|&&i| res[i].status == ReduceStatus::Converged).count();
    let count = |s: ReduceStatus| res.iter().filter(|r| r.status == s).count() as f64;
    let max_res = res.iter().filter(|r| r.status == ReduceStatus::Converged).map(|r| r.residual).fold(0.0, f64::max);
    m.metric("converged", count(ReduceStatus::Converged));
    m.metric("resonant_skipped", count(ReduceStatus::ResonantSkipped));
    m.metric("diverged", count(ReduceStatus::Diverged));
    m.metric("max_residual_converged", max_res);
    let pts: Vec<Vec<f64>> = res.iter().map(|r| vec![r.e, r.residual]).collect();
    out.columns("reduce.dat", &["E", "residual"], &pts)?;
    if spec.is_empty() {
        m.stage("reduce", StageStatus::Ok, "no spectrum points on the grid");
        return Ok(());
    }
    let frac = conv as f64 / spec.len() as f64;
    m.metric("converged_fraction_spectrum", frac);
    let need = cfg.config.reduce.min_converged_fraction;
    let status = if frac >= need { StageStatus::Ok } else { StageStatus::Failed };
    m.stage("reduce", status, format!("{conv}/{} spectrum points converged (need {need})", spec.len()));
    Ok(())
}

fn precheck_transport(cfg: &LoadedConfig) -> Result<(), CliError> {
    let g = &cfg.config.grid;
    let p = &cfg.config.packet;
    let grid = SpatialGrid::new(g.half_length, g.n).map_err(|e| cfg.error_at("grid", "n", e))?;
    if !containment_ok(&grid, p.x0, p.width, p.momentum, g.t) {
        return Err(cfg.error_at("grid", "t", "packet would reach the boundary before T; enlarge half_length"));
    }
    Ok(())
}

fn frame(cfg: &LoadedConfig, v: &QuasiPeriodicPotential, seed: u64) -> Result<FrameBundle, CliError> {
    let grid = cfg.energy_grid(v, seed)?;
    let s = &cfg.config.schedule;
    compute_frame(v, &grid, &cfg.config.curve, s.max_steps, &cfg.reduce_options(), &cfg.frame_options()).map_err(|e| {
        match e {
            TransformError::GridTooCoarse { .. } => cfg.error_at("energy", "spacing", e),
            other => numerical(other),
        }
    })
}

fn write_frame(out: &mut OutputDir, name: &str, b: &FrameBundle) -> Result<(), CliError> {
    let f = &b.frame;
    let mut rows: Vec<(f64, Vec<String>)> = f
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let row = vec![
                num(p.e),
                num(p.rho),
                num(p.drho),
                num(f.weight(i, NormKind::Dphi)),
                num(p.beta0.mean().re),
                num(p.beta1.mean().re),
                "retained".into(),
            ];
            (p.e, row)
        })
        .collect();
    for r in &f.rejected {
        let empty = String::new;
        rows.push((
            r.e,
            vec![num(r.e), empty(), empty(), empty(), empty(), empty(), format!("rejected: {}", r.reason)],
        ));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let rows: Vec<Vec<String>> = rows.into_iter().map(|r| r.1).collect();
    out.csv(name, &["E", "rho", "drho", "w", "beta0_0", "beta1_0", "status"], &rows)
}

fn transport(
    cfg: &LoadedConfig,
    v: &QuasiPeriodicPotential,
    seed: u64,
    out: &mut OutputDir,
    m: &mut RunManifest,
) -> Result<(), CliError> {
    let g = &cfg.config.grid;
    let p = &cfg.config.packet;
    let grid = SpatialGrid::new(g.half_length, g.n).map_err(numerical)?;
    let q0 = init_packet(grid, p.x0, p.width, p.momentum).map_err(|e| cfg.error_at("packet", "width", e))?;
    let (series, _) = evolve_and_record(&q0, v, g.t, g.dt, g.sample_stride).map_err(numerical)?;
    let contained = !series.containment_violated;
    m.flag("containment_violated", !contained);
    m.metric("l2_drift", series.l2_drift());
    let n0 = norms(&q0);
    m.metric("upper_bound_c", check_upper_bound(&series, &n0));
    m.stage(
        "evolve",
        if contained { StageStatus::Ok } else { StageStatus::Failed },
        if contained { format!("{} samples", series.len()) } else { "mass reached the boundary".into() },
    );
    let rows: Vec<Vec<String>> = (0..series.len())
        .map(|i| {
            vec![
                num(series.times[i]),
                num(series.l2[i]),
                num(series.h1[i]),
                num(series.diffusion[i]),
                num(series.boundary_mass[i]),
            ]
        })
        .collect();
    out.csv("transport_norms.csv", &["t", "l2", "h1", "diffusion", "boundary_mass"], &rows)?;

    let fit = fit_slope(&series, g.late_fraction);
    let mut line = None;
    match fit {
        Ok((slope, r2)) => {
            m.metric("slope", slope);
            m.metric("slope_r2", r2);
            let take = ((series.len() as f64) * g.late_fraction).round() as usize;
            let k = series.len() - take;
            let (_, icpt, _) = linear_fit(&series.times[k..], &series.diffusion[k..]);
            line = Some((slope, icpt));
            m.stage("fit", StageStatus::Ok, "");
        }
        Err(EvolveError::WindowTooSmall(n)) => {
            m.stage("fit", StageStatus::Failed, format!("slope undefined: WindowTooSmall ({n} samples)"));
        }
        Err(e) => return Err(numerical(e)),
    }
    let fitted = |t: f64| line.map_or(f64::NAN, |(s, c)| s * t + c);
    let dat: Vec<Vec<f64>> =
        (0..series.len()).map(|i| vec![series.times[i], series.diffusion[i], fitted(series.times[i])]).collect();
    out.columns("transport_diffusion.dat", &["t", "diffusion", "fit"], &dat)?;
    let mut plot = vec![Series {
        label: "diffusion norm",
        points: series.times.iter().copied().zip(series.diffusion.iter().copied()).collect(),
        markers: false,
    }];
    if line.is_some() {
        let (a, b) = (series.times[0], *series.times.last().unwrap());
        plot.push(Series { label: "late-window fit", points: vec![(a, fitted(a)), (b, fitted(b))], markers: false });
    }
    let svg = line_plot(&Axes { title: "transport", x_label: "t", y_label: "|q(t)|_D", ..Default::default() }, &plot);
    out.write("transport_diffusion.svg", svg.as_bytes())?;

    if v.is_zero() {
        m.metric("free_oracle_slope", 2.0 * derivative_norm(&q0));
    }
    let b = frame(cfg, v, seed)?;
    m.metric("frame_points", b.frame.len() as f64);
    m.metric("frame_rejected", b.frame.rejected.len() as f64);
    write_frame(out, "transport_frame.csv", &b)?;
    let gq = apply_transform(&q0, &b.frame);
    let rows: Vec<Vec<String>> = (0..b.frame.len())
        .map(|i| vec![num(gq.energies[i]), num(gq.g1[i].re), num(gq.g1[i].im), num(gq.g2[i].re), num(gq.g2[i].im)])
        .collect();
    out.csv("transport_transform.csv", &["E", "re_g1", "im_g1", "re_g2", "im_g2"], &rows)?;
    let c = ballistic_constant(&q0, &b.frame);
    m.metric("C", c);
    m.metric("hat_norm_ratio", {
        let l2 = q0.l2();
        qpbt::transform::transform_norm(&gq, &b.frame, NormKind::DphiHat) / l2
    });
    if let Some((slope, _)) = line {
        m.metric("slope_over_C", slope / c);
    }
    m.stage("frame", StageStatus::Ok, format!("{} retained", b.frame.len()));
    Ok(())
}

fn kind_name(k: FKind) -> &'static str {
    match k {
        FKind::Beta00 => "beta00",
        FKind::Beta11 => "beta11",
        FKind::ConstOne => "const_one",
    }
}

fn integrals(
    cfg: &LoadedConfig,
    v: &QuasiPeriodicPotential,
    seed: u64,
    out: &mut OutputDir,
    m: &mut RunManifest,
) -> Result<(), CliError> {
    let ic = &cfg.config.integrals;
    let b = frame(cfg, v, seed)?;
    let f = &b.frame;
    m.stage("frame", StageStatus::Ok, format!("{} retained", f.len()));
    write_frame(out, "integrals_frame.csv", &b)?;
    let ms: Vec<f64> =
        (0..ic.n_m).map(|i| ic.m_min * (ic.m_max / ic.m_min).powf(i as f64 / (ic.n_m - 1) as f64)).collect();
    // the free first component reaches ρ = 0 and, below ρ_c, carries f = 1
    let reference = v.is_zero() && f.anchor_bottom && f.cutoff_rho_c.is_finite() && f.components.len() == 1;
    let mut rows = Vec::new();
    let mut exps = Vec::new();
    let mut plot = Vec::new();
    let mut labels = Vec::new();
    for &kind in &ic.kinds {
        for &k in &ic.powers {
            let mut vals = Vec::with_capacity(ms.len());
            for &mm in &ms {
                let (lo, hi) = oscillatory_branches(f, kind, k, mm, (ic.x, ic.y)).map_err(|e| match e {
                    TransformError::QuadratureUnderResolved { .. } => cfg.error_at("integrals", "m_max", e),
                    other => numerical(other),
                })?;
                let r = if reference && k == 0 && kind == FKind::ConstOne {
                    num((mm * f.cutoff_rho_c).sin() / mm)
                } else {
                    String::new()
                };
                rows.push(vec![kind_name(kind).into(), k.to_string(), num(mm), num(lo), num(hi), num(lo + hi), r]);
                vals.push((lo + hi).abs());
            }
            // an identically vanishing integral decays faster than any power
            let p = if vals.iter().all(|v| *v == 0.0) {
                f64::INFINITY
            } else {
                decay_exponent(&ms, &vals, ic.n_bins).unwrap_or(f64::NAN)
            };
            exps.push(vec![kind_name(kind).into(), k.to_string(), num(p), (p >= ic.min_exponent).to_string()]);
            labels.push(format!("{} k={k}", kind_name(kind)));
            plot.push(ms.iter().copied().zip(vals).collect::<Vec<_>>());
            m.metric(&format!("exponent_{}_k{k}", kind_name(kind)), p);
        }
    }
    out.csv("integrals.csv", &["kind", "k", "M", "low", "high", "total", "reference_low"], &rows)?;
    out.csv("integrals_exponents.csv", &["kind", "k", "exponent", "meets_min"], &exps)?;
    let series: Vec<Series> =
        labels.iter().zip(plot).map(|(l, p)| Series { label: l, points: p, markers: true }).collect();
    let svg = line_plot(
        &Axes { title: "oscillatory integrals", x_label: "M", y_label: "|I(M)|", log_x: true, log_y: true },
        &series,
    );
    out.write("integrals.svg", svg.as_bytes())?;
    let all = exps.iter().all(|r| r[3] == "true");
    m.flag("all_exponents_meet_min", all);
    m.stage("sweep", StageStatus::Ok, format!("{} combinations", exps.len()));
    Ok(())
}

/// Cross-checks every manifest in the output directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Audit {
    pub manifests: Vec<RunManifest>,
    /// Files present but listed by no manifest.
    pub orphans: Vec<String>,
    /// Files listed by more than one manifest.
    pub shared: Vec<String>,
    /// Files listed but absent.
    pub missing: Vec<String>,
}

impl Audit {
    pub fn clean(&self) -> bool {
        self.orphans.is_empty() && self.shared.is_empty() && self.missing.is_empty()
    }
}

pub fn audit(root: &Path) -> Result<Audit, CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", root.display()));
    let mut names: Vec<String> = std::fs::read_dir(root)
        .map_err(io)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| !n.starts_with('.'))
        .collect();
    names.sort();
    let mut a = Audit::default();
    let mut owners: BTreeMap<String, usize> = BTreeMap::new();
    for n in names.iter().filter(|n| n.ends_with(MANIFEST_SUFFIX)) {
        let m = RunManifest::read(&root.join(n))?;
        for o in &m.outputs {
            *owners.entry(o.clone()).or_default() += 1;
        }
        a.manifests.push(m);
    }
    for n in &names {
        if !n.ends_with(MANIFEST_SUFFIX) && !owners.contains_key(n) {
            a.orphans.push(n.clone());
        }
    }
    for (o, c) in &owners {
        if *c > 1 {
            a.shared.push(o.clone());
        }
        if !root.join(o).is_file() {
            a.missing.push(o.clone());
        }
    }
    Ok(a)
}

fn report(opts: &RunOptions) -> Result<Outcome, CliError> {
    let root = match (&opts.out, &opts.config) {
        (Some(o), _) => o.clone(),
        (None, Some(c)) => LoadedConfig::load(c)?.out_dir(None),
        (None, None) => return Err(CliError::Validation("report requires --out or --config".into())),
    };
    if !root.is_dir() {
        return Err(CliError::Io(format!("{}: no such output directory", root.display())));
    }
    let mut a = audit(&root)?;
    a.manifests.retain(|m| m.command != "report");
    a.orphans.retain(|o| o != "report.txt");
    let mut key = String::new();
    for m in &a.manifests {
        key.push_str(&format!("{} {}\n", m.command, m.config_hash));
    }
    let hash = config_hash("report", opts.seed, &key);
    if !opts.force && a.clean() {
        if let Some(m) = up_to_date(&root, "report", &hash) {
            return Ok(Outcome::Skipped(m));
        }
    }
    let mut text = String::new();
    for m in &a.manifests {
        text.push_str(&format!("[{}] hash {} version {}\n", m.command, &m.config_hash[..12], m.tool_version));
        for s in &m.stages {
            let st = match s.status {
                StageStatus::Ok => "ok",
                StageStatus::Failed => "FAILED",
                StageStatus::Skipped => "skipped",
            };
            text.push_str(&format!("  stage {:<10} {st} {}\n", s.name, s.detail));
        }
        for (k, v) in &m.metrics {
            text.push_str(&format!("  {k} = {v}\n"));
        }
        for (k, v) in &m.flags {
            text.push_str(&format!("  {k} = {v}\n"));
        }
    }
    for (what, list) in [("orphan", &a.orphans), ("shared", &a.shared), ("missing", &a.missing)] {
        for f in list.iter() {
            text.push_str(&format!("{what}: {f}\n"));
        }
    }
    let mut out = OutputDir::create(&root)?;
    out.write("report.txt", text.as_bytes())?;
    let mut m = RunManifest::new("report", hash, opts.seed, key);
    m.metric("manifests", a.manifests.len() as f64);
    m.metric("orphans", a.orphans.len() as f64);
    m.stage(
        "audit",
        if a.clean() { StageStatus::Ok } else { StageStatus::Failed },
        format!("{} orphan, {} shared, {} missing", a.orphans.len(), a.shared.len(), a.missing.len()),
    );
    let m = out.finish(m)?;
    if !a.clean() {
        return Err(CliError::Validation(format!(
            "output directory inconsistent: {} orphan, {} shared, {} missing (see report.txt)",
            a.orphans.len(),
            a.shared.len(),
            a.missing.len()
        )));
    }
    Ok(Outcome::Ran(m))
}
