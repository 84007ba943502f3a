//! End-to-end behavior of the `msinvert` binary on small configurations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TRUTH: &str = "0.1 0.3 0.9 0.6\n";
const PRIOR: &str = "0.1 0.4 0.9 0.55\n";

/// 2x2 coarse grid, three steps, two iterations. `overrides` replaces the
/// step length, iteration count or noise level.
fn small_config(dir: &Path, prior: &str, overrides: &[(&str, &str)]) -> PathBuf {
    fs::write(dir.join("truth.txt"), TRUTH).unwrap();
    fs::write(dir.join("prior.txt"), prior).unwrap();
    let get = |s: &str, default: &str| {
        overrides
            .iter()
            .find(|(k, _)| *k == s)
            .map(|(_, v)| v.to_string())
            .unwrap_or_else(|| default.to_string())
    };
    let text = format!(
        "[mesh]\ncoarse_n = 2\nrefine_r = 4\n\n\
         [fractures]\ntrue = truth.txt\nprior = prior.txt\n\n\
         [params]\nt_final = 3\nn_t = 3\n\n\
         [space]\nn_b = 2\n\n\
         [inversion]\nsigma_f = 1e-2\nstep_length = {}\niterations = {}\nstep_policy = halving\n\n\
         [observations]\ncells = all\nnoise = {}\nseed = 3\n\n\
         [output]\ndir = out\n",
        get("step_length", "1e-12"),
        get("iterations", "2"),
        get("noise", "0"),
    );
    let path = dir.join("case.cfg");
    fs::write(&path, text).unwrap();
    path
}

fn msinvert(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_msinvert"));
    cmd.args(args).env_remove("MSINVERT_OUT");
    if let Some(dir) = out_env {
        cmd.env("MSINVERT_OUT", dir);
    }
    cmd.output().unwrap()
}

fn report_value(report: &str, key: &str) -> String {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("report has no `{key}`"))
        .to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_all_artifacts_and_reports_mode_and_rejections() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), PRIOR, &[]);
    let o = msinvert(&["run", cfg.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = tmp.path().join("out");
    for f in ["history.csv", "errors.csv", "observations.csv", "report.txt"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    assert_eq!(report_value(&report, "gradient_mode"), "consistent");
    let rejected = report_value(&report, "rejected_steps");
    assert!(rejected.starts_with("yes (") || rejected == "no (0)", "{rejected}");
    let j0: f64 = report_value(&report, "initial_J").parse().unwrap();
    let j1: f64 = report_value(&report, "final_J").parse().unwrap();
    assert!(j1 <= j0);
}

#[test]
fn zero_iterations_report_the_prior_unchanged() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), PRIOR, &[("iterations", "0")]);
    let o = msinvert(&["run", cfg.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(tmp.path().join("out/report.txt")).unwrap();
    assert_eq!(report_value(&report, "initial_J"), report_value(&report, "final_J"));
    assert_eq!(report_value(&report, "rejected_steps"), "no (0)");
    let history = fs::read_to_string(tmp.path().join("out/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2, "{history}");
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), PRIOR, &[("noise", "0.05")]);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = msinvert(&["run", cfg.to_str().unwrap()], Some(dir));
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["history.csv", "errors.csv", "observations.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn output_override_redirects_artifacts() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), PRIOR, &[]);
    let elsewhere = tmp.path().join("elsewhere");
    let o = msinvert(&["run", cfg.to_str().unwrap()], Some(&elsewhere));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(elsewhere.join("report.txt").is_file());
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn sweep_writes_one_directory_per_value() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), PRIOR, &[]);
    let o = msinvert(
        &["sweep", cfg.to_str().unwrap(), "--vary", "observations.noise=0,0.01,0.02,0.05"],
        None,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = tmp.path().join("out");
    for v in ["0", "0.01", "0.02", "0.05"] {
        assert!(out.join(format!("observations.noise={v}/history.csv")).is_file(), "missing run {v}");
    }
    let table = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
}

#[test]
fn validate_prints_cell_counts() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), PRIOR, &[]);
    let o = msinvert(&["validate", cfg.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("coarse_elements = 8"), "{text}");
    assert!(text.contains("observed_cells = 8"), "{text}");
    assert!(text.contains("updated_cells = 8"), "{text}");
    assert!(text.contains("truth_fracture_0_snap_residual"), "{text}");
}

#[test]
fn parse_error_names_line_and_key_and_exits_one() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), PRIOR, &[]);
    let mut text = fs::read_to_string(&cfg).unwrap();
    text = text.replace("n_b = 2", "n_b = two");
    fs::write(&cfg, &text).unwrap();
    let line = text.lines().position(|l| l.contains("two")).unwrap() + 1;
    let o = msinvert(&["run", cfg.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains(&format!("line {line}")) && err.contains("space.n_b"), "{err}");
}

#[test]
fn missing_fracture_file_is_named_and_exits_one() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), PRIOR, &[]);
    fs::remove_file(tmp.path().join("prior.txt")).unwrap();
    let o = msinvert(&["validate", cfg.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("prior.txt"), "{}", stderr(&o));
}

#[test]
fn unknown_key_and_bad_usage_exit_one() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), PRIOR, &[]);
    let text = fs::read_to_string(&cfg).unwrap() + "[space]\nbasis = 3\n";
    fs::write(&cfg, text).unwrap();
    let o = msinvert(&["run", cfg.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("space.basis"), "{}", stderr(&o));
    assert_eq!(msinvert(&["frobnicate"], None).status.code(), Some(1));
}

#[test]
fn unusable_output_directory_exits_two() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), PRIOR, &[]);
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "").unwrap();
    let o = msinvert(&["run", cfg.to_str().unwrap()], Some(&blocker.join("sub")));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
