//! Recovery of element-wise coarse mass and stiffness blocks from cell-average
//! data by adjoint-state gradient descent.
//!
//! Discrete problem over the free coarse indices, `S = M + dt A`:
//!
//! ```text
//! M c_0 = r(M),            r_i = p0 sum_K sum_{a -> i} sum_{l in PoU} M^K_al
//! S c_{n+1} = M c_n + dt b,                        n = 0..N-1
//! J = |M - M0|^2 / sM^2 + |A - A0|^2 / sA^2
//!   + sum_{K observed} sum_{n=1..N} dt (g^K_n - d^K_n)^2 / sF^2
//! ```
//!
//! The adjoint is the exact transpose of this map: `lambda_N = 0` and
//! `S lambda_{n-1} = q_n + M lambda_n` with `q_n = dJ/dc_n`.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::forward::{block_cell_average, integrate_coarse, ObservationSeries, Trajectory};
use crate::gmsfem::CoarseSystem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientMode {
    /// Adjoint-times-state integrals scaled entrywise by the current block,
    /// with right-endpoint quadrature and backward-difference `dλ/dt`.
    Scaled,
    /// Exact gradient of the discrete objective.
    #[default]
    Consistent,
}

impl FromStr for GradientMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "scaled" => Ok(Self::Scaled),
            "consistent" => Ok(Self::Consistent),
            other => Err(Error::InvalidArgument(format!(
                "unknown gradient mode `{other}` (expected `scaled` or `consistent`)"
            ))),
        }
    }
}

impl std::fmt::Display for GradientMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Scaled => "scaled",
            Self::Consistent => "consistent",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepPolicy {
    /// Constant step; a step that breaks positive definiteness is an error.
    #[default]
    Fixed,
    /// Every iteration starts from the configured step and halves it until
    /// the step keeps `M` positive definite and does not increase `J`.
    Halving,
}

impl FromStr for StepPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "fixed" => Ok(Self::Fixed),
            "halving" => Ok(Self::Halving),
            other => Err(Error::InvalidArgument(format!(
                "unknown step policy `{other}` (expected `fixed` or `halving`)"
            ))),
        }
    }
}

impl std::fmt::Display for StepPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fixed => "fixed",
            Self::Halving => "halving",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionConfig {
    pub sigma_m: f64,
    pub sigma_a: f64,
    pub sigma_f: f64,
    pub step_length: f64,
    pub max_iterations: usize,
    /// Stop when `|J_n - J_{n-1}| <= j_rel_tol * |J_{n-1}|`.
    pub j_rel_tol: f64,
    /// Per coarse element: whether its blocks are updated.
    pub update_mask: Vec<bool>,
    pub gradient_mode: GradientMode,
    pub step_policy: StepPolicy,
    /// Halvings allowed within one iteration.
    pub max_halvings: usize,
}

impl InversionConfig {
    pub fn new(num_elements: usize) -> Self {
        Self {
            sigma_m: 1.0,
            sigma_a: 1.0,
            sigma_f: 1e4,
            step_length: 1e-12,
            max_iterations: 100,
            j_rel_tol: 1e-10,
            update_mask: vec![true; num_elements],
            gradient_mode: GradientMode::Consistent,
            step_policy: StepPolicy::Fixed,
            max_halvings: 40,
        }
    }

    pub fn validate(&self, num_elements: usize) -> Result<()> {
        for (name, v) in [("sigma_m", self.sigma_m), ("sigma_a", self.sigma_a), ("sigma_f", self.sigma_f)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.step_length > 0.0) || !self.step_length.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "step length must be positive, got {}",
                self.step_length
            )));
        }
        if !(self.j_rel_tol >= 0.0) {
            return Err(Error::InvalidArgument("j_rel_tol must be non-negative".into()));
        }
        if self.update_mask.len() != num_elements {
            return Err(Error::InvalidArgument(format!(
                "update mask covers {} elements, mesh has {num_elements}",
                self.update_mask.len()
            )));
        }
        Ok(())
    }
}

/// Objective value and its three terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveTerms {
    pub total: f64,
    pub mass: f64,
    pub stiffness: f64,
    pub misfit: f64,
}

/// Fixed data of one inversion: coarse index maps, observations and time grid.
#[derive(Debug, Clone)]
pub struct InversionProblem<'a> {
    pub system: &'a CoarseSystem,
    pub data: &'a ObservationSeries,
    pub p0: f64,
    pub t_final: f64,
    pub n_t: usize,
}

impl<'a> InversionProblem<'a> {
    pub fn new(system: &'a CoarseSystem, data: &'a ObservationSeries, p0: f64, t_final: f64, n_t: usize) -> Result<Self> {
        if data.n_t != n_t {
            return Err(Error::InvalidArgument(format!(
                "observations cover {} steps, forward model uses {n_t}",
                data.n_t
            )));
        }
        if let Some(&k) = data.cells.iter().find(|&&k| k >= system.num_elements()) {
            return Err(Error::InvalidArgument(format!("observed cell {k} does not exist")));
        }
        Ok(Self {
            system,
            data,
            p0,
            t_final,
            n_t,
        })
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.n_t as f64
    }

    pub fn forward(&self, mass: &[DMatrix<f64>], stiffness: &[DMatrix<f64>]) -> Result<Trajectory> {
        integrate_coarse(self.system, mass, stiffness, self.p0, self.t_final, self.n_t)
    }

    /// Model cell averages `g[i][n]` for observed cell `i`, `n = 0..=N`.
    pub fn model_observations(&self, mass: &[DMatrix<f64>], traj: &Trajectory) -> Vec<Vec<f64>> {
        let full: Vec<Vec<f64>> = traj.states.iter().map(|c| self.system.expand_free(c)).collect();
        self.data
            .cells
            .iter()
            .map(|&k| {
                full.iter()
                    .map(|c| {
                        block_cell_average(&mass[k], &self.system.local_state(k, c), self.system.n_b, self.system.volumes[k])
                    })
                    .collect()
            })
            .collect()
    }
}

/// Iterate of the inversion together with its prior and trajectories.
#[derive(Debug, Clone)]
pub struct InversionState {
    pub iteration: usize,
    pub mass_blocks: Vec<DMatrix<f64>>,
    pub stiffness_blocks: Vec<DMatrix<f64>>,
    pub prior_mass: Vec<DMatrix<f64>>,
    pub prior_stiffness: Vec<DMatrix<f64>>,
    /// Forward states over the free indices for the current blocks.
    pub forward: Option<Trajectory>,
    /// `lambda_0..lambda_N` over the free indices.
    pub adjoint: Option<Vec<Vec<f64>>>,
    pub history: Vec<ObjectiveTerms>,
    pub rejected_steps: usize,
    /// Step length of the last attempted update.
    pub step_length: f64,
}

impl InversionState {
    pub fn from_prior(prior: &CoarseSystem, step_length: f64) -> Self {
        Self {
            iteration: 0,
            mass_blocks: prior.mass_blocks.clone(),
            stiffness_blocks: prior.stiffness_blocks.clone(),
            prior_mass: prior.mass_blocks.clone(),
            prior_stiffness: prior.stiffness_blocks.clone(),
            forward: None,
            adjoint: None,
            history: Vec::new(),
            rejected_steps: 0,
            step_length,
        }
    }

    pub fn update_forward(&mut self, problem: &InversionProblem) -> Result<()> {
        self.forward = Some(problem.forward(&self.mass_blocks, &self.stiffness_blocks)?);
        self.adjoint = None;
        Ok(())
    }

    fn trajectory(&self) -> Result<&Trajectory> {
        self.forward
            .as_ref()
            .ok_or_else(|| Error::State("forward trajectory has not been computed".into()))
    }

    pub fn history_csv(&self) -> String {
        history_csv(&self.history)
    }
}

fn frobenius_sq(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum()
}

pub fn objective(state: &InversionState, config: &InversionConfig, problem: &InversionProblem) -> Result<ObjectiveTerms> {
    let traj = state.trajectory()?;
    let mass = frobenius_sq(&state.mass_blocks, &state.prior_mass) / config.sigma_m.powi(2);
    let stiffness = frobenius_sq(&state.stiffness_blocks, &state.prior_stiffness) / config.sigma_a.powi(2);
    let g = problem.model_observations(&state.mass_blocks, traj);
    let dt = problem.dt();
    let mut sq = 0.0;
    for (i, gi) in g.iter().enumerate() {
        for n in 1..=problem.n_t {
            sq += dt * (gi[n] - problem.data.value(i, n)).powi(2);
        }
    }
    let misfit = sq / config.sigma_f.powi(2);
    Ok(ObjectiveTerms {
        total: mass + stiffness + misfit,
        mass,
        stiffness,
        misfit,
    })
}

/// Backward sweep `S lambda_{n-1} = q_n + M lambda_n`, `lambda_N = 0`.
pub fn solve_adjoint(state: &mut InversionState, config: &InversionConfig, problem: &InversionProblem) -> Result<()> {
    let traj = state.trajectory()?;
    let sys = problem.system;
    let n_t = problem.n_t;
    let dt = problem.dt();
    let g = problem.model_observations(&state.mass_blocks, traj);
    let m = sys.assemble_free_dense(&state.mass_blocks);
    let a = sys.assemble_free_dense(&state.stiffness_blocks);
    let stepper = crate::forward::DenseStepper::new(&m, &a, dt)?;

    // Observation rows: dg^K/dc over the free indices.
    let rows: Vec<Vec<(usize, f64)>> = problem
        .data
        .cells
        .iter()
        .map(|&k| {
            let block = &state.mass_blocks[k];
            (0..sys.dofs_per_element())
                .filter_map(|a| {
                    sys.free_index(k, a).map(|i| {
                        let s: f64 = sys.partition_columns().iter().map(|&l| block[(a, l)]).sum();
                        (i, s / sys.volumes[k])
                    })
                })
                .collect()
        })
        .collect();

    let scale = 2.0 * dt / config.sigma_f.powi(2);
    let mut lambda = vec![DVector::zeros(sys.n_free); n_t + 1];
    for n in (1..=n_t).rev() {
        let mut rhs = &m * &lambda[n];
        for (i, row) in rows.iter().enumerate() {
            let r = scale * (g[i][n] - problem.data.value(i, n));
            if r != 0.0 {
                for &(j, w) in row {
                    rhs[j] += r * w;
                }
            }
        }
        lambda[n - 1] = stepper.solve(&rhs);
    }
    state.adjoint = Some(lambda.into_iter().map(|v| v.as_slice().to_vec()).collect());
    Ok(())
}

/// Per-element gradient blocks; zero outside the update mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub mass: Vec<DMatrix<f64>>,
    pub stiffness: Vec<DMatrix<f64>>,
}

impl Gradient {
    pub fn norm(&self) -> f64 {
        self.mass
            .iter()
            .chain(&self.stiffness)
            .map(|b| b.norm_squared())
            .sum::<f64>()
            .sqrt()
    }
}

pub fn gradient(state: &InversionState, config: &InversionConfig, problem: &InversionProblem) -> Result<Gradient> {
    let traj = state.trajectory()?;
    let lambda = state
        .adjoint
        .as_ref()
        .ok_or_else(|| Error::State("adjoint trajectory has not been computed".into()))?;
    let sys = problem.system;
    let n_t = problem.n_t;
    let dt = problem.dt();
    let d = sys.dofs_per_element();
    let c_full: Vec<Vec<f64>> = traj.states.iter().map(|c| sys.expand_free(c)).collect();
    let l_full: Vec<Vec<f64>> = lambda.iter().map(|l| sys.expand_free(l)).collect();
    let g = problem.model_observations(&state.mass_blocks, traj);
    let observed: Vec<Option<usize>> = {
        let mut idx = vec![None; sys.num_elements()];
        for (i, &k) in problem.data.cells.iter().enumerate() {
            idx[k] = Some(i);
        }
        idx
    };
    let wm = 2.0 / config.sigma_m.powi(2);
    let wa = 2.0 / config.sigma_a.powi(2);
    let wf = 2.0 / config.sigma_f.powi(2);

    let mut gm = Vec::with_capacity(sys.num_elements());
    let mut ga = Vec::with_capacity(sys.num_elements());
    for k in 0..sys.num_elements() {
        if !config.update_mask[k] {
            gm.push(DMatrix::zeros(d, d));
            ga.push(DMatrix::zeros(d, d));
            continue;
        }
        let map = &sys.local_to_full[k];
        let mk = &state.mass_blocks[k];
        let ak = &state.stiffness_blocks[k];
        let mut bm = (mk - &state.prior_mass[k]) * wm;
        let mut ba = (ak - &state.prior_stiffness[k]) * wa;
        match config.gradient_mode {
            GradientMode::Consistent => {
                // Observation weights of the partition-of-unity columns.
                let obs: Vec<f64> = match observed[k] {
                    Some(i) => (0..d)
                        .map(|a| {
                            (1..=n_t)
                                .map(|n| (g[i][n] - problem.data.value(i, n)) * c_full[n][map[a]])
                                .sum::<f64>()
                                * wf
                                * dt
                                / sys.volumes[k]
                        })
                        .collect(),
                    None => vec![0.0; d],
                };
                for a in 0..d {
                    let ia = map[a];
                    for b in 0..d {
                        let jb = map[b];
                        let mut s_next = 0.0;
                        for n in 0..n_t {
                            s_next += l_full[n][ia] * c_full[n + 1][jb];
                        }
                        let mut s_same = 0.0;
                        for n in 1..n_t {
                            s_same += l_full[n][ia] * c_full[n][jb];
                        }
                        let mut gmab = -s_next + s_same;
                        if sys.is_partition_column(b) {
                            gmab += problem.p0 * l_full[0][ia] + obs[a];
                        }
                        bm[(a, b)] += gmab;
                        ba[(a, b)] -= dt * s_next;
                    }
                }
            }
            GradientMode::Scaled => {
                for a in 0..d {
                    let ia = map[a];
                    for b in 0..d {
                        let jb = map[b];
                        let mut dl = 0.0;
                        let mut il = 0.0;
                        for n in 1..=n_t {
                            dl += (l_full[n][jb] - l_full[n - 1][jb]) * c_full[n][ia];
                            il += dt * l_full[n][jb] * c_full[n][ia];
                        }
                        bm[(a, b)] -= wf * mk[(a, b)] * dl;
                        ba[(a, b)] -= wf * ak[(a, b)] * il;
                    }
                }
            }
        }
        gm.push(bm);
        ga.push(ba);
    }
    Ok(Gradient { mass: gm, stiffness: ga })
}

/// `(b + b^T) / 2` with both mirrored entries assigned the same value.
pub fn symmetrize(b: &mut DMatrix<f64>) {
    let n = b.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (b[(i, j)] + b[(j, i)]);
            b[(i, j)] = s;
            b[(j, i)] = s;
        }
    }
}

/// Blocks after one descent step of length `eps`; masked-out blocks are cloned unchanged.
pub fn stepped_blocks(
    state: &InversionState,
    grad: &Gradient,
    config: &InversionConfig,
    eps: f64,
) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let update = |blocks: &[DMatrix<f64>], g: &[DMatrix<f64>]| -> Vec<DMatrix<f64>> {
        blocks
            .iter()
            .zip(g)
            .zip(&config.update_mask)
            .map(|((b, gb), &on)| {
                if !on {
                    return b.clone();
                }
                let mut nb = b - gb * eps;
                symmetrize(&mut nb);
                nb
            })
            .collect()
    };
    (
        update(&state.mass_blocks, &grad.mass),
        update(&state.stiffness_blocks, &grad.stiffness),
    )
}

/// Applies one step of length `state.step_length` and recomputes the forward trajectory.
pub fn step(state: &mut InversionState, grad: &Gradient, config: &InversionConfig, problem: &InversionProblem) -> Result<()> {
    let (m, a) = stepped_blocks(state, grad, config, state.step_length);
    let traj = problem.forward(&m, &a).map_err(|e| Error::StepRejected {
        iteration: state.iteration + 1,
        reason: format!("{e}; reduce the step length"),
    })?;
    state.mass_blocks = m;
    state.stiffness_blocks = a;
    state.forward = Some(traj);
    state.adjoint = None;
    state.iteration += 1;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    IterationCap,
    Converged,
    /// No step with `J` decrease found within the halving budget.
    StepExhausted,
    Failed,
}

#[derive(Debug)]
pub struct InversionOutcome {
    pub state: InversionState,
    pub stop: StopReason,
    /// Error that ended the run; history up to it is kept in `state`.
    pub failure: Option<Error>,
}

fn relative_change(prev: f64, next: f64) -> f64 {
    let diff = (next - prev).abs();
    if diff == 0.0 {
        0.0
    } else if prev == 0.0 {
        f64::INFINITY
    } else {
        diff / prev.abs()
    }
}

/// Gradient descent from the prior blocks of `prior`.
pub fn run_inversion(prior: &CoarseSystem, problem: &InversionProblem, config: &InversionConfig) -> Result<InversionOutcome> {
    config.validate(prior.num_elements())?;
    let mut state = InversionState::from_prior(prior, config.step_length);
    state.update_forward(problem)?;
    let mut current = objective(&state, config, problem)?;
    state.history.push(current);

    for _ in 0..config.max_iterations {
        let iterate = (|| -> Result<Option<StopReason>> {
            solve_adjoint(&mut state, config, problem)?;
            let grad = gradient(&state, config, problem)?;
            match config.step_policy {
                StepPolicy::Fixed => {
                    step(&mut state, &grad, config, problem)?;
                    Ok(None)
                }
                StepPolicy::Halving => {
                    let mut halvings = 0;
                    state.step_length = config.step_length;
                    loop {
                        let (m, a) = stepped_blocks(&state, &grad, config, state.step_length);
                        let accepted = match problem.forward(&m, &a) {
                            Ok(traj) => {
                                let mut trial = InversionState {
                                    mass_blocks: m,
                                    stiffness_blocks: a,
                                    forward: Some(traj),
                                    adjoint: None,
                                    history: Vec::new(),
                                    ..state.clone()
                                };
                                let terms = objective(&trial, config, problem)?;
                                if terms.total <= current.total {
                                    trial.history = std::mem::take(&mut state.history);
                                    trial.iteration += 1;
                                    state = trial;
                                    true
                                } else {
                                    false
                                }
                            }
                            Err(Error::Forward { .. } | Error::NotPositiveDefinite(_)) => false,
                            Err(e) => return Err(e),
                        };
                        if accepted {
                            return Ok(None);
                        }
                        state.rejected_steps += 1;
                        halvings += 1;
                        if halvings > config.max_halvings {
                            return Ok(Some(StopReason::StepExhausted));
                        }
                        state.step_length *= 0.5;
                    }
                }
            }
        })();
        match iterate {
            Ok(Some(stop)) => {
                return Ok(InversionOutcome {
                    state,
                    stop,
                    failure: None,
                })
            }
            Ok(None) => {}
            Err(e) => {
                return Ok(InversionOutcome {
                    state,
                    stop: StopReason::Failed,
                    failure: Some(e),
                })
            }
        }
        let next = objective(&state, config, problem)?;
        state.history.push(next);
        let change = relative_change(current.total, next.total);
        current = next;
        if change <= config.j_rel_tol {
            return Ok(InversionOutcome {
                state,
                stop: StopReason::Converged,
                failure: None,
            });
        }
    }
    Ok(InversionOutcome {
        state,
        stop: StopReason::IterationCap,
        failure: None,
    })
}

/// `iteration,J,term_M,term_A,term_F`.
pub fn history_csv(history: &[ObjectiveTerms]) -> String {
    let mut out = String::from("iteration,J,term_M,term_A,term_F\n");
    for (i, t) in history.iter().enumerate() {
        let _ = writeln!(out, "{i},{:.17e},{:.17e},{:.17e},{:.17e}", t.total, t.mass, t.stiffness, t.misfit);
    }
    out
}

/// Per-time root-mean-square cell-average error against the truth, for the
/// prior and the final blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    /// Time indices `1..=N`.
    pub initial: Vec<f64>,
    pub final_: Vec<f64>,
}

impl ErrorReport {
    pub fn aggregate_initial(&self) -> f64 {
        rms(&self.initial)
    }

    pub fn aggregate_final(&self) -> f64 {
        rms(&self.final_)
    }

    /// `time_index,l2_error_initial,l2_error_final`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_index,l2_error_initial,l2_error_final\n");
        for (n, (a, b)) in self.initial.iter().zip(&self.final_).enumerate() {
            let _ = writeln!(out, "{},{a:.17e},{b:.17e}", n + 1);
        }
        out
    }
}

fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
    }
}

/// Root-mean-square over all cells of model minus truth cell averages, per
/// time index `1..=N`. `truth[n][k]` holds the truth average of cell `k` at `t_n`.
pub fn cell_average_errors(
    system: &CoarseSystem,
    mass: &[DMatrix<f64>],
    traj: &Trajectory,
    truth: &[Vec<f64>],
) -> Vec<f64> {
    (1..traj.states.len())
        .map(|n| {
            let full = system.expand_free(&traj.states[n]);
            let sq: f64 = (0..system.num_elements())
                .map(|k| {
                    let g = block_cell_average(&mass[k], &system.local_state(k, &full), system.n_b, system.volumes[k]);
                    (g - truth[n][k]).powi(2)
                })
                .sum();
            (sq / system.num_elements() as f64).sqrt()
        })
        .collect()
}

pub fn error_report(
    problem: &InversionProblem,
    state: &InversionState,
    truth: &[Vec<f64>],
) -> Result<ErrorReport> {
    let prior = problem.forward(&state.prior_mass, &state.prior_stiffness)?;
    let fin = match &state.forward {
        Some(t) => t.clone(),
        None => problem.forward(&state.mass_blocks, &state.stiffness_blocks)?,
    };
    Ok(ErrorReport {
        initial: cell_average_errors(problem.system, &state.prior_mass, &prior, truth),
        final_: cell_average_errors(problem.system, &state.mass_blocks, &fin, truth),
    })
}
