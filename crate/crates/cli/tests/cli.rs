use qpbt_cli::commands::audit;
use qpbt_cli::output::RunManifest;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn qpbt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qpbt")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn run(cmd: &str, cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    qpbt(&args)
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_csv(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

fn manifest(out: &Path, cmd: &str) -> RunManifest {
    RunManifest::read(&out.join(format!("{cmd}.manifest.toml"))).unwrap()
}

const FREE_TRANSPORT: &str = r#"
[potential]
golden_eps0 = 0.0

[grid]
half_length = 150.0
n = 4096
t = 10.0

[energy]
scale = "rho"
min = 0.06
max = 4.0
spacing = 0.01

[frame]
cutoff_rho_c = inf
"#;

#[test]
fn free_rotation_column_is_sqrt_e() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        "run.toml",
        "[potential]\ngolden_eps0 = 0.0\n[energy]\nscale = \"energy\"\nmin = 0.1\nmax = 10.0\nspacing = 0.1\n",
    );
    let out = d.path().join("out");
    let o = run("rotation", &cfg, &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = read_csv(&out.join("rotation.csv"));
    assert_eq!(rows.len(), 100);
    for r in &rows {
        let e: f64 = r[0].parse().unwrap();
        let rho: f64 = r[1].parse().unwrap();
        assert!((rho - e.sqrt()).abs() < 1e-3, "E={e} rho={rho}");
        assert_eq!(&r[4], "spectrum");
    }
}

#[test]
fn two_cosine_gap_table_nonempty() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        "run.toml",
        "[potential]\ncosine = [0.3, 0.3]\n[energy]\nscale = \"energy\"\nmin = 9.5\nmax = 10.3\nspacing = 0.01\n",
    );
    let out = d.path().join("out");
    let o = run("rotation", &cfg, &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let gaps = read_csv(&out.join("rotation_gaps.csv"));
    assert!(gaps.iter().any(|g| &g[4] == "1;0"), "{gaps:?}");
    let rows = read_csv(&out.join("rotation.csv"));
    assert!(rows.iter().any(|r| &r[4] == "gap" && &r[5] == "1;0"));
    assert!(fs::read_to_string(out.join("rotation.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn missing_potential_file_is_validation_error() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "run.toml", "\n[potential]\nfile = \"nope.toml\"\n");
    let o = run("rotation", &cfg, &d.path().join("out"), &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("run.toml:3: potential.file"), "{}", stderr(&o));
    assert!(!d.path().join("out").exists());
}

#[test]
fn potential_file_is_resolved_relative_to_config() {
    let d = tempfile::tempdir().unwrap();
    fs::create_dir(d.path().join("conf")).unwrap();
    write_config(
        &d.path().join("conf"),
        "v.toml",
        "d = 1\nomega = [1.0]\ngamma = 0.1\ntau = 1.5\nr = 0.5\nmodes = [{ k = [1], re = 0.01 }]\n",
    );
    let cfg = write_config(
        &d.path().join("conf"),
        "run.toml",
        "[potential]\nfile = \"v.toml\"\n[energy]\nscale = \"energy\"\nmin = 1.0\nmax = 2.0\nspacing = 0.5\n",
    );
    let o = run("rotation", &cfg, &d.path().join("out"), &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn unknown_key_and_bad_values_are_line_anchored() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "run.toml", "[potential]\ngolden_eps0 = 0.0\n[grid]\ndtt = 0.1\n");
    let o = run("transport", &cfg, &d.path().join("out"), &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("run.toml:4:"), "{}", stderr(&o));
    let cfg = write_config(d.path(), "run.toml", "[potential]\ngolden_eps0 = 0.0\n[integrals]\nm_min = 1.0\n");
    let o = run("integrals", &cfg, &d.path().join("out"), &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("run.toml:4: integrals.m_min"), "{}", stderr(&o));
}

#[test]
fn flag_errors() {
    assert_eq!(code(&qpbt(&["rotation"])), 2);
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&qpbt(&["report", "--out", d.path().join("none").to_str().unwrap()])), 4);
    let cfg = write_config(d.path(), "run.toml", "[potential]\ngolden_eps0 = 0.0\n");
    assert_eq!(code(&qpbt(&["rotation", "--config", cfg.to_str().unwrap(), "--threads", "0"])), 2);
    assert_eq!(code(&qpbt(&["rotation", "--config", d.path().join("absent.toml").to_str().unwrap()])), 4);
}

#[test]
fn reruns_skip_and_outputs_are_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        "run.toml",
        "[potential]\ncosine = [0.3, 0.3]\n[energy]\nscale = \"energy\"\nmin = 0.0\nmax = 5.0\nspacing = 0.05\n",
    );
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    assert_eq!(code(&run("rotation", &cfg, &a, &["--threads", "1"])), 0);
    let first = manifest(&a, "rotation");

    let o = run("rotation", &cfg, &a, &[]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("up to date"));
    assert_eq!(manifest(&a, "rotation"), first);

    let o = run("rotation", &cfg, &a, &["--force"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("rotation done"));
    assert_eq!(manifest(&a, "rotation").config_hash, first.config_hash);

    assert_eq!(code(&run("rotation", &cfg, &b, &[])), 0);
    for f in &first.outputs {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let o = run("rotation", &cfg, &b, &["--seed", "9"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("rotation done"));
    assert_ne!(manifest(&b, "rotation").config_hash, first.config_hash);

    // a removed output invalidates the previous run
    fs::remove_file(a.join("rotation.dat")).unwrap();
    let o = run("rotation", &cfg, &a, &[]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("rotation done"));
}

#[test]
fn free_transport_ratio_near_one() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "run.toml", FREE_TRANSPORT);
    let out = d.path().join("out");
    let o = run("transport", &cfg, &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = manifest(&out, "transport");
    let ratio = m.metrics["slope_over_C"];
    assert!((ratio - 1.0).abs() < 0.1, "{ratio}");
    assert!((m.metrics["slope"] / m.metrics["free_oracle_slope"] - 1.0).abs() < 0.02);
    assert!(m.stages.iter().all(|s| s.status == qpbt_cli::output::StageStatus::Ok));
    let frame = read_csv(&out.join("transport_frame.csv"));
    assert!(frame.len() > 300);
    let t = read_csv(&out.join("transport_transform.csv"));
    assert_eq!(t.len(), m.metrics["frame_points"] as usize);
    let dat = fs::read_to_string(out.join("transport_diffusion.dat")).unwrap();
    assert!(dat.starts_with("# t diffusion fit\n"));
    assert_eq!(dat.lines().nth(1).unwrap().split_whitespace().count(), 3);
}

#[test]
fn zero_time_surfaces_window_too_small() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "run.toml", &FREE_TRANSPORT.replace("t = 10.0", "t = 0.0"));
    let out = d.path().join("out");
    let o = run("transport", &cfg, &out, &[]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let m = manifest(&out, "transport");
    let fit = m.stages.iter().find(|s| s.name == "fit").unwrap();
    assert!(fit.detail.contains("WindowTooSmall"), "{fit:?}");
    assert!(!m.metrics.contains_key("slope"));
    // rerunning a failed configuration reports the failure again
    assert_eq!(code(&run("transport", &cfg, &out, &[])), 3);
}

#[test]
fn transport_rejects_uncontained_setup() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "run.toml", &FREE_TRANSPORT.replace("t = 10.0", "t = 100.0"));
    let o = run("transport", &cfg, &d.path().join("out"), &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("grid.t"), "{}", stderr(&o));
}

#[test]
fn small_potential_transport_all_stages_green() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "run.toml", &FREE_TRANSPORT.replace("golden_eps0 = 0.0", "golden_eps0 = 1e-2"));
    let out = d.path().join("out");
    let o = run("transport", &cfg, &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = manifest(&out, "transport");
    for key in ["slope", "C", "slope_over_C", "l2_drift", "upper_bound_c", "frame_points"] {
        assert!(m.metrics[key].is_finite(), "{key}");
    }
    assert_eq!(m.flags["containment_violated"], false);
    assert!((m.metrics["slope_over_C"] - 1.0).abs() < 0.1);
    assert_eq!(m.outputs.len(), 5);
}

#[test]
fn reduce_statistics() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("out");
    let free = write_config(
        d.path(),
        "free.toml",
        "[potential]\ngolden_eps0 = 0.0\n[energy]\nscale = \"energy\"\nmin = 0.1\nmax = 10.0\nspacing = 0.5\n",
    );
    assert_eq!(code(&run("reduce", &free, &out, &[])), 0);
    for r in read_csv(&out.join("reduce.csv")) {
        assert_eq!(&r[2], "converged");
        assert!(r[3].parse::<f64>().unwrap() < 1e-14);
    }
    let small = write_config(
        d.path(),
        "small.toml",
        "[potential]\ngolden_eps0 = 1e-3\n[energy]\nscale = \"energy\"\nmin = 0.5\nmax = 12.0\nspacing = 0.1\n",
    );
    assert_eq!(code(&run("reduce", &small, &out, &["--force"])), 0);
    assert!(manifest(&out, "reduce").metrics["converged_fraction_spectrum"] >= 0.95);
    let gap = write_config(
        d.path(),
        "gap.toml",
        "[potential]\ncosine = [0.3, 0.3]\n[energy]\nscale = \"energy\"\nmin = 9.85\nmax = 9.95\nspacing = 0.02\n",
    );
    assert_eq!(code(&run("reduce", &gap, &out, &["--force"])), 0);
    for r in read_csv(&out.join("reduce.csv")) {
        assert_eq!((&r[1], &r[2]), ("gap", "resonant_skipped"));
    }
}

#[test]
fn reduce_seeded_sample() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        "run.toml",
        "[potential]\ngolden_eps0 = 1e-3\n[energy]\nscale = \"energy\"\nmin = 0.5\nmax = 12.0\nspacing = 0.01\nsample = 20\n",
    );
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    assert_eq!(code(&run("reduce", &cfg, &a, &["--seed", "5"])), 0);
    assert_eq!(code(&run("reduce", &cfg, &b, &["--seed", "6"])), 0);
    let ra = read_csv(&a.join("reduce.csv"));
    let rb = read_csv(&b.join("reduce.csv"));
    assert_eq!((ra.len(), rb.len()), (20, 20));
    assert_ne!(
        ra.iter().map(|r| r[0].to_string()).collect::<Vec<_>>(),
        rb.iter().map(|r| r[0].to_string()).collect::<Vec<_>>()
    );
}

#[test]
fn free_integrals_match_sine_family_and_decay() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        "run.toml",
        "[potential]\ngolden_eps0 = 0.0\n[energy]\nscale = \"rho\"\nmin = 0.1\nmax = 4.0\nspacing = 0.005\n\
         [frame]\ncutoff_rho_c = 2.0\n[integrals]\nn_m = 24\nkinds = [\"const_one\", \"beta11\"]\npowers = [0]\n",
    );
    let out = d.path().join("out");
    let o = run("integrals", &cfg, &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = read_csv(&out.join("integrals.csv"));
    let mut checked = 0;
    for r in rows.iter().filter(|r| &r[0] == "const_one") {
        let low: f64 = r[3].parse().unwrap();
        let reference: f64 = r[6].parse().unwrap();
        assert!((low - reference).abs() < 1e-8, "{r:?}");
        checked += 1;
    }
    assert_eq!(checked, 24);
    let exps = read_csv(&out.join("integrals_exponents.csv"));
    let p: f64 = exps.iter().find(|r| &r[0] == "const_one").unwrap()[2].parse().unwrap();
    assert!(p >= 1.0, "{p}");
    assert_eq!(&exps.iter().find(|r| &r[0] == "beta11").unwrap()[2], "inf");
}

#[test]
fn report_audits_output_directory() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        "run.toml",
        "[potential]\ngolden_eps0 = 0.0\n[energy]\nscale = \"energy\"\nmin = 0.1\nmax = 2.0\nspacing = 0.1\n",
    );
    let out = d.path().join("out");
    assert_eq!(code(&run("rotation", &cfg, &out, &[])), 0);
    assert_eq!(code(&run("reduce", &cfg, &out, &[])), 0);
    let o = qpbt(&["report", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let a = audit(&out).unwrap();
    assert!(a.clean(), "{a:?}");
    assert_eq!(a.manifests.len(), 3);
    let text = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(text.contains("[rotation]") && text.contains("[reduce]"));

    fs::write(out.join("stray.csv"), "x\n").unwrap();
    let o = qpbt(&["report", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(fs::read_to_string(out.join("report.txt")).unwrap().contains("orphan: stray.csv"));
    fs::remove_file(out.join("stray.csv")).unwrap();
    fs::remove_file(out.join("reduce.dat")).unwrap();
    assert_eq!(audit(&out).unwrap().missing, vec!["reduce.dat".to_string()]);
    assert_eq!(code(&qpbt(&["report", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])), 2);
}
