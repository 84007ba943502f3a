//! `run`, `validate` and `sweep`.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use msinv_core::assembly::FineOperators;
use msinv_core::forward::{fine_cell_averages, integrate_fine, make_observations, ObservationSeries};
use msinv_core::geometry::{build_coarse_mesh, build_fine_mesh, CoarseMesh, FineMesh, FractureNetwork};
use msinv_core::gmsfem::{Realization, SpaceOptions};
use msinv_core::inversion::{
    error_report, history_csv, run_inversion, ErrorReport, InversionConfig, InversionProblem, InversionState,
    ObjectiveTerms, StopReason,
};

use crate::config::{ExperimentConfig, RawConfig};
use crate::CliError;

fn stage<T>(name: &'static str, r: msinv_core::Result<T>) -> Result<T, CliError> {
    r.map_err(|source| CliError::Stage { stage: name, source })
}

fn read_fractures(path: &Path, k_f: f64) -> Result<FractureNetwork, CliError> {
    if !path.is_file() {
        return Err(CliError::Config(format!("fracture file `{}` does not exist", path.display())));
    }
    FractureNetwork::read(path, k_f).map_err(|e| CliError::Config(format!("fracture file `{}`: {e}", path.display())))
}

fn stop_label(stop: StopReason) -> &'static str {
    match stop {
        StopReason::IterationCap => "iteration_cap",
        StopReason::Converged => "converged",
        StopReason::StepExhausted => "step_exhausted",
        StopReason::Failed => "failed",
    }
}

/// Everything a finished run produced.
#[derive(Debug)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub observed_cells: Vec<usize>,
    pub update_mask: Vec<bool>,
    pub observations: ObservationSeries,
    pub state: InversionState,
    pub stop: StopReason,
    pub errors: ErrorReport,
    pub wall_seconds: f64,
}

impl RunSummary {
    pub fn initial(&self) -> ObjectiveTerms {
        self.state.history[0]
    }

    pub fn final_terms(&self) -> ObjectiveTerms {
        *self.state.history.last().expect("history holds the prior objective")
    }
}

struct MeshStats {
    coarse_vertices: usize,
    coarse_elements: usize,
    fine_vertices: usize,
    fine_elements: usize,
    truth_fracture_edges: usize,
    prior_fracture_edges: usize,
    free_coarse_dofs: usize,
    block_size: usize,
}

impl MeshStats {
    fn new(coarse: &CoarseMesh, truth: &FineMesh, prior: &FineMesh, n_b: usize) -> Self {
        let free_vertices = (0..coarse.num_vertices()).filter(|&v| !coarse.is_dirichlet_vertex(v)).count();
        Self {
            coarse_vertices: coarse.num_vertices(),
            coarse_elements: coarse.num_elements(),
            fine_vertices: truth.num_vertices(),
            fine_elements: truth.num_elements(),
            truth_fracture_edges: truth.fracture_edges.len(),
            prior_fracture_edges: prior.fracture_edges.len(),
            free_coarse_dofs: free_vertices * n_b,
            block_size: 3 * n_b,
        }
    }
}

impl fmt::Display for MeshStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "coarse_vertices = {}", self.coarse_vertices)?;
        writeln!(f, "coarse_elements = {}", self.coarse_elements)?;
        writeln!(f, "fine_vertices = {}", self.fine_vertices)?;
        writeln!(f, "fine_elements = {}", self.fine_elements)?;
        writeln!(f, "truth_fracture_edges = {}", self.truth_fracture_edges)?;
        writeln!(f, "prior_fracture_edges = {}", self.prior_fracture_edges)?;
        writeln!(f, "free_coarse_dofs = {}", self.free_coarse_dofs)?;
        writeln!(f, "block_size = {}", self.block_size)
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| CliError::Output { path, source })
}

fn resolve_cells(cfg: &ExperimentConfig, coarse: &CoarseMesh) -> Result<(Vec<usize>, Vec<bool>), CliError> {
    let observed = cfg
        .observed_cells
        .resolve(coarse)
        .map_err(|e| CliError::Config(format!("observations.cells: {e}")))?;
    let mask = cfg
        .update_mask
        .mask(coarse)
        .map_err(|e| CliError::Config(format!("inversion.update_mask: {e}")))?;
    if !mask.iter().any(|&m| m) {
        return Err(CliError::Config("inversion.update_mask selects no cells".into()));
    }
    Ok((observed, mask))
}

/// Truth simulation, data generation, prior model and inversion; writes
/// `history.csv`, `errors.csv`, `observations.csv` and `report.txt`.
pub fn run_case(cfg: &ExperimentConfig) -> Result<RunSummary, CliError> {
    let started = Instant::now();
    let truth_fr = read_fractures(&cfg.true_fractures, cfg.params.k_f)?;
    let prior_fr = read_fractures(&cfg.prior_fractures, cfg.params.k_f)?;

    let mut coarse = stage("truth model", build_coarse_mesh(cfg.coarse_n))?;
    let (observed, mask) = resolve_cells(cfg, &coarse)?;
    let truth_fine = stage("truth model", build_fine_mesh(&mut coarse, cfg.refine_r, &truth_fr))?;
    let truth_ops = stage("truth model", FineOperators::new(&truth_fine, &cfg.params))?;
    let truth_traj = stage("truth forward", integrate_fine(&truth_fine, &truth_ops))?;
    let data = stage(
        "observations",
        make_observations(&truth_traj, &truth_fine, &coarse, &truth_ops, &observed, cfg.noise, cfg.seed),
    )?;
    let truth_avgs: Vec<Vec<f64>> = truth_traj
        .states
        .iter()
        .map(|u| fine_cell_averages(&truth_fine, &coarse, &truth_ops, u))
        .collect();

    let options = SpaceOptions {
        weight: cfg.spectral_weight,
        ..SpaceOptions::new(cfg.n_b)
    };
    let prior = stage(
        "prior model",
        Realization::build(cfg.coarse_n, cfg.refine_r, &prior_fr, &cfg.params, options),
    )?;

    let problem = stage(
        "inversion",
        InversionProblem::new(&prior.system, &data, cfg.params.p0, cfg.params.t_final, cfg.params.n_t),
    )?;
    let inv_cfg = InversionConfig {
        sigma_m: cfg.sigma_m,
        sigma_a: cfg.sigma_a,
        sigma_f: cfg.sigma_f,
        step_length: cfg.step_length,
        max_iterations: cfg.iterations,
        j_rel_tol: cfg.j_rel_tol,
        update_mask: mask.clone(),
        gradient_mode: cfg.gradient_mode,
        step_policy: cfg.step_policy,
        ..InversionConfig::new(coarse.num_elements())
    };
    let outcome = stage("inversion", run_inversion(&prior.system, &problem, &inv_cfg))?;
    let errors = stage("error report", error_report(&problem, &outcome.state, &truth_avgs))?;

    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|source| CliError::Output {
        path: dir.clone(),
        source,
    })?;
    write_file(&dir, "history.csv", &history_csv(&outcome.state.history))?;
    write_file(&dir, "errors.csv", &errors.to_csv())?;
    write_file(&dir, "observations.csv", &data.to_csv())?;

    let stats = MeshStats::new(&coarse, &truth_fine, &prior.fine, cfg.n_b);
    let wall_seconds = started.elapsed().as_secs_f64();
    let summary = RunSummary {
        output_dir: dir.clone(),
        observed_cells: observed,
        update_mask: mask,
        observations: data,
        stop: outcome.stop,
        errors,
        wall_seconds,
        state: outcome.state,
    };
    write_file(&dir, "report.txt", &report(cfg, &stats, &summary, outcome.failure.as_ref()))?;

    match outcome.failure {
        Some(source) => Err(CliError::Stage {
            stage: "inversion",
            source,
        }),
        None => Ok(summary),
    }
}

fn report(cfg: &ExperimentConfig, stats: &MeshStats, s: &RunSummary, failure: Option<&msinv_core::Error>) -> String {
    let mut out = String::from("[config]\n");
    for (k, v) in &cfg.resolved {
        let _ = writeln!(out, "{k} = {v}");
    }
    let _ = write!(out, "\n[mesh]\n{stats}");
    let _ = writeln!(out, "observed_cells = {}", s.observed_cells.len());
    let _ = writeln!(out, "updated_cells = {}", s.update_mask.iter().filter(|&&m| m).count());
    let (init, fin) = (s.initial(), s.final_terms());
    let _ = writeln!(out, "\n[result]");
    let _ = writeln!(out, "gradient_mode = {}", cfg.gradient_mode);
    let _ = writeln!(out, "step_policy = {}", cfg.step_policy);
    let _ = writeln!(out, "iterations = {}", s.state.iteration);
    let _ = writeln!(out, "stop_reason = {}", stop_label(s.stop));
    if let Some(e) = failure {
        let _ = writeln!(out, "failure = {e}");
    }
    let rejected = s.state.rejected_steps;
    let _ = writeln!(out, "rejected_steps = {} ({rejected})", if rejected > 0 { "yes" } else { "no" });
    let _ = writeln!(out, "initial_J = {:.17e}", init.total);
    let _ = writeln!(out, "final_J = {:.17e}", fin.total);
    let _ = writeln!(out, "final_term_M = {:.17e}", fin.mass);
    let _ = writeln!(out, "final_term_A = {:.17e}", fin.stiffness);
    let _ = writeln!(out, "final_term_F = {:.17e}", fin.misfit);
    let _ = writeln!(out, "error_initial_rms = {:.17e}", s.errors.aggregate_initial());
    let _ = writeln!(out, "error_final_rms = {:.17e}", s.errors.aggregate_final());
    let _ = writeln!(out, "wall_time_s = {:.3}", s.wall_seconds);
    out
}

/// Checks a config without solving anything.
#[derive(Debug, Clone)]
pub struct Diagnostics {
    pub observed_cells: Vec<usize>,
    pub updated_cells: usize,
    pub coarse_elements: usize,
    /// Per fracture, the larger endpoint snap residual.
    pub truth_snap: Vec<f64>,
    pub prior_snap: Vec<f64>,
    pub fine_vertices: usize,
    pub free_coarse_dofs: usize,
    pub block_size: usize,
}

impl fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "coarse_elements = {}", self.coarse_elements)?;
        writeln!(f, "observed_cells = {}", self.observed_cells.len())?;
        writeln!(f, "updated_cells = {}", self.updated_cells)?;
        for (name, snaps) in [("truth", &self.truth_snap), ("prior", &self.prior_snap)] {
            for (i, r) in snaps.iter().enumerate() {
                writeln!(f, "{name}_fracture_{i}_snap_residual = {r:.3e}")?;
            }
        }
        writeln!(f, "fine_vertices = {}", self.fine_vertices)?;
        writeln!(f, "free_coarse_dofs = {}", self.free_coarse_dofs)?;
        writeln!(f, "block_size = {}", self.block_size)?;
        writeln!(f, "block_entries = {}", 2 * self.coarse_elements * self.block_size * self.block_size)
    }
}

pub fn validate(cfg: &ExperimentConfig) -> Result<Diagnostics, CliError> {
    let truth_fr = read_fractures(&cfg.true_fractures, cfg.params.k_f)?;
    let prior_fr = read_fractures(&cfg.prior_fractures, cfg.params.k_f)?;
    let mut coarse = stage("mesh", build_coarse_mesh(cfg.coarse_n))?;
    let (observed, mask) = resolve_cells(cfg, &coarse)?;
    let truth = stage("mesh", build_fine_mesh(&mut coarse, cfg.refine_r, &truth_fr))?;
    let prior = stage("mesh", build_fine_mesh(&mut coarse, cfg.refine_r, &prior_fr))?;
    let stats = MeshStats::new(&coarse, &truth, &prior, cfg.n_b);
    let worst = |m: &FineMesh| m.snap_residuals.iter().map(|r| r[0].max(r[1])).collect();
    Ok(Diagnostics {
        observed_cells: observed,
        updated_cells: mask.iter().filter(|&&m| m).count(),
        coarse_elements: stats.coarse_elements,
        truth_snap: worst(&truth),
        prior_snap: worst(&prior),
        fine_vertices: stats.fine_vertices,
        free_coarse_dofs: stats.free_coarse_dofs,
        block_size: stats.block_size,
    })
}

/// One run per value of `key`, each in `<output>/<key>=<value>/`; writes
/// `sweep.csv` with the final objective and error of every run.
pub fn sweep(
    raw: &RawConfig,
    base: &Path,
    key: &str,
    values: &[String],
    output_override: Option<&Path>,
) -> Result<Vec<(String, RunSummary)>, CliError> {
    if values.is_empty() {
        return Err(CliError::Config(format!("sweep over `{key}` has no values")));
    }
    let root = match output_override {
        Some(p) => p.to_path_buf(),
        None => ExperimentConfig::from_raw(raw, base)?.output_dir,
    };
    let mut runs = Vec::with_capacity(values.len());
    let mut table = String::from("value,final_J,final_term_F,error_final_rms,stop_reason\n");
    for value in values {
        let mut varied = raw.clone();
        varied.set(key, value);
        let mut cfg = ExperimentConfig::from_raw(&varied, base)?;
        cfg.output_dir = root.join(format!("{key}={value}"));
        let summary = run_case(&cfg)?;
        let fin = summary.final_terms();
        let _ = writeln!(
            table,
            "{value},{:.17e},{:.17e},{:.17e},{}",
            fin.total,
            fin.misfit,
            summary.errors.aggregate_final(),
            stop_label(summary.stop)
        );
        runs.push((value.clone(), summary));
    }
    std::fs::create_dir_all(&root).map_err(|source| CliError::Output {
        path: root.clone(),
        source,
    })?;
    write_file(&root, "sweep.csv", &table)?;
    Ok(runs)
}
