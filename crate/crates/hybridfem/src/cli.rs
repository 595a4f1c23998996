//! Configuration-driven entry point: a flat `key = value` file selects
//! one of four run modes (`equivalence`, `conserve`, `converge`, `sizes`)
//! and the runs write fixed-schema CSV files plus a machine-readable
//! summary. Identical configurations produce byte-identical outputs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use nalgebra::DVector;

use crate::diagnostics::{
    divergence_norm, dof_table, error_norms, extract_field, field_difference_l2, fit_rate,
    hamiltonian, scatter_space, step_diagnostics, DofRow, ErrorReport,
};
use crate::mesh::{build_structured_box, facet_adjacency, tag_boundary, BoundaryPartition, Mesh};
use crate::physystem::{
    build_dual_hybrid, build_mixed_reference, build_primal_hybrid, Formulation, ProblemKind,
    SystemBlocks,
};
use crate::problems::{
    hybrid_initial_state, hybrid_inputs, maxwell_case_with, mixed_initial_state, mixed_inputs,
    wave_case_with_speed, Field, ManufacturedCase, Profile,
};
use crate::solver::{prepare, prepare_mixed, step, step_mixed, Inputs};
use crate::Error;

/// Which run a configuration requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Step the hybrid and the mixed discretizations side by side and
    /// record per-variable relative L2 differences.
    Equivalence,
    /// Record per-step energy bookkeeping for a driven run and a
    /// zero-input companion started from the same state.
    Conserve,
    /// Loop over mesh resolutions, record error reports, and fit rates.
    Converge,
    /// Emit the mixed-versus-condensed unknown-count table.
    Sizes,
}

/// Formulation selection; `Both` is accepted by the equivalence mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormulationChoice {
    Primal,
    Dual,
    Both,
}

impl FormulationChoice {
    fn list(self) -> Vec<Formulation> {
        match self {
            FormulationChoice::Primal => vec![Formulation::Primal],
            FormulationChoice::Dual => vec![Formulation::Dual],
            FormulationChoice::Both => vec![Formulation::Primal, Formulation::Dual],
        }
    }

    fn single(self, mode: &str) -> Result<Formulation, CliError> {
        match self {
            FormulationChoice::Primal => Ok(Formulation::Primal),
            FormulationChoice::Dual => Ok(Formulation::Dual),
            FormulationChoice::Both => Err(CliError::Config(format!(
                "{mode} mode needs formulation = primal or dual"
            ))),
        }
    }
}

/// Named selector for the essential part `gamma1` of the boundary; the
/// rest carries the natural data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundarySelector {
    /// The three coordinate planes through the origin (default).
    Origin,
    /// Empty: the whole boundary carries natural data.
    None,
    /// The whole boundary is essential; no natural faces remain.
    All,
}

/// A parsed and validated run request.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub problem: ProblemKind,
    pub formulation: FormulationChoice,
    pub mode: Mode,
    /// Mesh resolutions; a list for `converge`/`sizes`, one entry for the
    /// stepping modes.
    pub ns: Vec<usize>,
    pub degree: usize,
    pub dt: f64,
    pub t_end: f64,
    pub profile: Profile,
    pub gamma1: BoundarySelector,
    pub c: f64,
    pub eps: f64,
    pub mu: f64,
    pub out_dir: PathBuf,
    pub tol: f64,
    pub threads: usize,
}

impl RunConfig {
    /// A configuration with every optional key at its default.
    pub fn new(mode: Mode, problem: ProblemKind, formulation: FormulationChoice) -> Self {
        RunConfig {
            problem,
            formulation,
            mode,
            ns: vec![2],
            degree: 1,
            dt: 0.01,
            t_end: 1.0,
            profile: Profile::Eigenmode,
            gamma1: BoundarySelector::Origin,
            c: 1.0,
            eps: 1.0,
            mu: 1.0,
            out_dir: PathBuf::from("."),
            tol: 1e-10,
            threads: 0,
        }
    }

    /// Parses the flat `key = value` format. Blank lines and lines
    /// starting with `#` are skipped; unknown and duplicate keys are
    /// errors; `mode`, `problem`, and `formulation` are required.
    pub fn parse(text: &str) -> Result<RunConfig, String> {
        let mut mode = None;
        let mut problem = None;
        let mut formulation = None;
        let mut cfg = RunConfig::new(
            Mode::Sizes,
            ProblemKind::Wave,
            FormulationChoice::Primal,
        );
        let mut seen = BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = idx + 1;
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {lineno}: expected key = value, got '{line}'"))?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(format!("line {lineno}: duplicate key '{key}'"));
            }
            match key {
                "problem" => {
                    problem = Some(match value {
                        "wave" => ProblemKind::Wave,
                        "maxwell" => ProblemKind::Maxwell,
                        _ => return Err(format!("problem must be wave or maxwell, got '{value}'")),
                    })
                }
                "formulation" => {
                    formulation = Some(match value {
                        "primal" => FormulationChoice::Primal,
                        "dual" => FormulationChoice::Dual,
                        "both" => FormulationChoice::Both,
                        _ => {
                            return Err(format!(
                                "formulation must be primal, dual, or both, got '{value}'"
                            ))
                        }
                    })
                }
                "mode" => {
                    mode = Some(match value {
                        "equivalence" => Mode::Equivalence,
                        "conserve" => Mode::Conserve,
                        "converge" => Mode::Converge,
                        "sizes" => Mode::Sizes,
                        _ => {
                            return Err(format!(
                                "mode must be equivalence, conserve, converge, or sizes, got '{value}'"
                            ))
                        }
                    })
                }
                "n" => {
                    cfg.ns = value
                        .split(',')
                        .map(|part| {
                            part.trim()
                                .parse::<usize>()
                                .map_err(|_| format!("n must be a list of integers, got '{value}'"))
                        })
                        .collect::<Result<Vec<_>, _>>()?
                }
                "degree" => cfg.degree = parse_num::<usize>("degree", value)?,
                "dt" => cfg.dt = parse_num::<f64>("dt", value)?,
                "t_end" => cfg.t_end = parse_num::<f64>("t_end", value)?,
                "profile" => {
                    cfg.profile = match value {
                        "eigenmode" => Profile::Eigenmode,
                        "quadratic" => Profile::Quadratic,
                        _ => {
                            return Err(format!(
                                "profile must be eigenmode or quadratic, got '{value}'"
                            ))
                        }
                    }
                }
                "gamma1" => {
                    cfg.gamma1 = match value {
                        "origin" => BoundarySelector::Origin,
                        "none" => BoundarySelector::None,
                        "all" => BoundarySelector::All,
                        _ => {
                            return Err(format!(
                                "gamma1 must be origin, none, or all, got '{value}'"
                            ))
                        }
                    }
                }
                "c" => cfg.c = parse_num::<f64>("c", value)?,
                "eps" => cfg.eps = parse_num::<f64>("eps", value)?,
                "mu" => cfg.mu = parse_num::<f64>("mu", value)?,
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                "tol" => cfg.tol = parse_num::<f64>("tol", value)?,
                "threads" => cfg.threads = parse_num::<usize>("threads", value)?,
                _ => return Err(format!("line {lineno}: unknown key '{key}'")),
            }
        }
        cfg.mode = mode.ok_or("missing required key 'mode'")?;
        cfg.problem = problem.ok_or("missing required key 'problem'")?;
        cfg.formulation = formulation.ok_or("missing required key 'formulation'")?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), String> {
        if self.degree != 1 {
            return Err(format!(
                "degree must be 1: only the lowest-order trimmed family is implemented, got {}",
                self.degree
            ));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(format!("dt must be positive and finite, got {}", self.dt));
        }
        if !(self.t_end >= self.dt && self.t_end.is_finite()) {
            return Err(format!(
                "t_end must be at least dt = {}, got {}",
                self.dt, self.t_end
            ));
        }
        if self.ns.is_empty() || self.ns.iter().any(|&n| n < 1) {
            return Err("n must be a non-empty list of integers >= 1".into());
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(format!("tol must be positive and finite, got {}", self.tol));
        }
        for (name, v) in [("c", self.c), ("eps", self.eps), ("mu", self.mu)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive and finite, got {v}"));
            }
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse::<T>()
        .map_err(|_| format!("{key} must be a number, got '{value}'"))
}

/// Failure classes of a run, carrying the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Unusable configuration (exit code 2).
    Config(String),
    /// The run itself failed: factorization, non-finite values, or output
    /// writing (exit code 3).
    Numerical(String),
}

impl CliError {
    /// Process exit code of this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "run failed: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Config(m),
            Error::InvalidMesh(m) => CliError::Config(format!("invalid mesh: {m}")),
            Error::Singular(m) => CliError::Numerical(format!("singular system: {m}")),
            Error::Io(m) => CliError::Numerical(format!("i/o: {m}")),
        }
    }
}

/// Machine-readable outcome of one run; the CSV files hold the full data.
#[derive(Debug, Default)]
pub struct RunSummary {
    /// Files written, in order.
    pub files: Vec<PathBuf>,
    /// Per (formulation, variable) maxima of the relative L2 difference
    /// over the whole equivalence run.
    pub equivalence_maxima: Vec<(Formulation, &'static str, f64)>,
    /// Driven run: maximum of `|residual| / max(|H|, 1)` over all steps.
    pub max_power_residual: Option<f64>,
    /// Zero-input companion: maximum relative energy drift
    /// `|H(t) - H(0)| / |H(0)|` (absolute drift when `H(0) = 0`).
    pub homogeneous_drift: Option<f64>,
    /// Driven run: maximum `|div(t) - div(0)|` of the tracked flux field.
    pub divergence_drift: Option<f64>,
    /// Error reports per resolution, in configured order.
    pub reports: Vec<(usize, ErrorReport)>,
    /// Fitted `(variable, norm, rate)` rows.
    pub rates: Vec<(&'static str, &'static str, f64)>,
    /// Unknown-count table rows.
    pub size_rows: Vec<DofRow>,
}

/// Executes a validated configuration. CSV outputs land in
/// `config.out_dir`; scalar outcomes are returned for the caller to print
/// or assert on.
pub fn run(cfg: &RunConfig) -> Result<RunSummary, CliError> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| {
        CliError::Numerical(format!("cannot create {}: {e}", cfg.out_dir.display()))
    })?;
    match cfg.mode {
        Mode::Sizes => run_sizes(cfg),
        Mode::Conserve => run_conserve(cfg),
        Mode::Equivalence => run_equivalence(cfg),
        Mode::Converge => run_converge(cfg),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn build_case(cfg: &RunConfig) -> Result<ManufacturedCase, CliError> {
    let case = match cfg.problem {
        ProblemKind::Wave => wave_case_with_speed(cfg.profile, cfg.c)?,
        ProblemKind::Maxwell => maxwell_case_with(cfg.profile, cfg.eps, cfg.mu)?,
    };
    Ok(case)
}

fn build_partition(cfg: &RunConfig, mesh: &Mesh) -> Result<BoundaryPartition, CliError> {
    let adjacency = facet_adjacency(mesh)?;
    Ok(match cfg.gamma1 {
        BoundarySelector::Origin => tag_boundary(mesh, &adjacency, crate::mesh::origin_planes),
        BoundarySelector::None => tag_boundary(mesh, &adjacency, |_| false),
        BoundarySelector::All => tag_boundary(mesh, &adjacency, |_| true),
    })
}

fn build_system(
    cfg: &RunConfig,
    formulation: Formulation,
    case: &ManufacturedCase,
    mesh: &Mesh,
    partition: &BoundaryPartition,
) -> Result<SystemBlocks, CliError> {
    let (p, q) = cfg.problem.degrees();
    let sys = match formulation {
        Formulation::Primal => build_primal_hybrid(p, mesh, partition, &case.materials)?,
        Formulation::Dual => build_dual_hybrid(q, mesh, partition, &case.materials)?,
    };
    Ok(sys)
}

fn single_n(cfg: &RunConfig, mode: &str) -> Result<usize, CliError> {
    match cfg.ns.as_slice() {
        [n] => Ok(*n),
        _ => Err(CliError::Config(format!(
            "{mode} mode needs a single n, got {:?}",
            cfg.ns
        ))),
    }
}

fn step_count(cfg: &RunConfig) -> Result<usize, CliError> {
    let steps = (cfg.t_end / cfg.dt).round();
    if steps < 1.0 || (steps * cfg.dt - cfg.t_end).abs() > 1e-8 * cfg.t_end.max(1.0) {
        return Err(CliError::Config(format!(
            "t_end = {} must be an integer multiple of dt = {}",
            cfg.t_end, cfg.dt
        )));
    }
    Ok(steps as usize)
}

/// `(alpha, beta)` physical variable names of a family.
fn variable_names(problem: ProblemKind) -> (&'static str, &'static str) {
    match problem {
        ProblemKind::Wave => ("pressure", "velocity"),
        ProblemKind::Maxwell => ("electric", "magnetic"),
    }
}

fn conforming_name(problem: ProblemKind, formulation: Formulation) -> &'static str {
    let (alpha, beta) = variable_names(problem);
    match formulation {
        Formulation::Primal => beta,
        Formulation::Dual => alpha,
    }
}

fn formulation_label(f: Formulation) -> &'static str {
    match f {
        Formulation::Primal => "primal",
        Formulation::Dual => "dual",
    }
}

fn write_file(
    cfg: &RunConfig,
    summary: &mut RunSummary,
    name: &str,
    contents: &str,
) -> Result<(), CliError> {
    let path = cfg.out_dir.join(name);
    fs::write(&path, contents)
        .map_err(|e| CliError::Numerical(format!("cannot write {}: {e}", path.display())))?;
    summary.files.push(path);
    Ok(())
}

fn numerical_at(step_index: usize, e: Error) -> CliError {
    CliError::Numerical(format!("step {step_index}: {e}"))
}

// ---------------------------------------------------------------------------
// Modes
// ---------------------------------------------------------------------------

fn run_sizes(cfg: &RunConfig) -> Result<RunSummary, CliError> {
    let formulation = cfg.formulation.single("sizes")?;
    let rows = dof_table(cfg.problem, formulation, &cfg.ns)?;
    let mut csv = String::from("# sizes.csv v1: n,mixed_dofs,hybrid_dofs,ratio\n");
    for row in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            row.n,
            row.mixed,
            row.hybrid,
            row.ratio_rounded()
        );
    }
    let mut summary = RunSummary::default();
    write_file(cfg, &mut summary, "sizes.csv", &csv)?;
    summary.size_rows = rows;
    Ok(summary)
}

fn run_conserve(cfg: &RunConfig) -> Result<RunSummary, CliError> {
    let formulation = cfg.formulation.single("conserve")?;
    let n = single_n(cfg, "conserve")?;
    let steps = step_count(cfg)?;
    let case = Arc::new(build_case(cfg)?);
    let mesh = Arc::new(build_structured_box(n)?);
    let partition = build_partition(cfg, &mesh)?;
    let sys = build_system(cfg, formulation, &case, &mesh, &partition)?;

    // Maxwell tracks the divergence of its flux-type (degree-2) field.
    let div_field = match (cfg.problem, formulation) {
        (ProblemKind::Maxwell, Formulation::Primal) => Some(Field::Alpha),
        (ProblemKind::Maxwell, Formulation::Dual) => Some(Field::Beta),
        _ => None,
    };
    let div_space = match div_field {
        Some(Field::Alpha) => Some(&sys.alpha_space),
        Some(Field::Beta) => Some(&sys.beta_space),
        None => None,
    };
    let schema = if div_field.is_some() {
        "# steps.csv v1: t,hamiltonian,boundary_power,residual,div_norm\n"
    } else {
        "# steps.csv v1: t,hamiltonian,boundary_power,residual\n"
    };

    let initial = hybrid_initial_state(&case, &sys, &mesh, 0.0)?;
    let op = prepare(&sys, cfg.dt).map_err(|e| numerical_at(0, e))?;
    let driven_inputs = hybrid_inputs(&case, &sys, &mesh);
    let zero_inputs = Inputs::zero(&sys);

    let mut summary = RunSummary::default();
    let mut max_residual = 0.0f64;
    let mut div_drift = 0.0f64;
    let mut driven_csv = String::from(schema);
    {
        let mut state = initial.clone();
        let div0 = match (div_field, div_space) {
            (Some(field), Some(space)) => {
                Some(divergence_norm(&extract_field(&sys, &state.x_l, field), space, &mesh)?)
            }
            _ => None,
        };
        for s in 1..=steps {
            let next = step(&op, &sys, &state, &driven_inputs).map_err(|e| numerical_at(s, e))?;
            let d = step_diagnostics(&sys, &state, &next, &driven_inputs);
            max_residual = max_residual.max(d.residual.abs() / d.hamiltonian.abs().max(1.0));
            match (div_field, div_space, div0) {
                (Some(field), Some(space), Some(div0)) => {
                    let div =
                        divergence_norm(&extract_field(&sys, &next.x_l, field), space, &mesh)?;
                    div_drift = div_drift.max((div - div0).abs());
                    let _ = writeln!(
                        driven_csv,
                        "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                        d.time, d.hamiltonian, d.boundary_power, d.residual, div
                    );
                }
                _ => {
                    let _ = writeln!(
                        driven_csv,
                        "{:.16e},{:.16e},{:.16e},{:.16e}",
                        d.time, d.hamiltonian, d.boundary_power, d.residual
                    );
                }
            }
            state = next;
        }
    }
    write_file(cfg, &mut summary, "steps.csv", &driven_csv)?;

    // Zero-input companion from the same initial state.
    let h0 = hamiltonian(&sys, &initial);
    let mut drift = 0.0f64;
    let mut homogeneous_csv = String::from(schema);
    {
        let mut state = initial;
        for s in 1..=steps {
            let next = step(&op, &sys, &state, &zero_inputs).map_err(|e| numerical_at(s, e))?;
            let d = step_diagnostics(&sys, &state, &next, &zero_inputs);
            drift = drift.max((d.hamiltonian - h0).abs());
            match (div_field, div_space) {
                (Some(field), Some(space)) => {
                    let div =
                        divergence_norm(&extract_field(&sys, &next.x_l, field), space, &mesh)?;
                    let _ = writeln!(
                        homogeneous_csv,
                        "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                        d.time, d.hamiltonian, d.boundary_power, d.residual, div
                    );
                }
                _ => {
                    let _ = writeln!(
                        homogeneous_csv,
                        "{:.16e},{:.16e},{:.16e},{:.16e}",
                        d.time, d.hamiltonian, d.boundary_power, d.residual
                    );
                }
            }
            state = next;
        }
    }
    write_file(cfg, &mut summary, "steps_homogeneous.csv", &homogeneous_csv)?;

    summary.max_power_residual = Some(max_residual);
    summary.homogeneous_drift = Some(if h0.abs() > 0.0 { drift / h0.abs() } else { drift });
    summary.divergence_drift = div_field.map(|_| div_drift);
    Ok(summary)
}

fn run_equivalence(cfg: &RunConfig) -> Result<RunSummary, CliError> {
    let n = single_n(cfg, "equivalence")?;
    let steps = step_count(cfg)?;
    let case = Arc::new(build_case(cfg)?);
    let mesh = Arc::new(build_structured_box(n)?);
    let partition = build_partition(cfg, &mesh)?;
    let (alpha_name, beta_name) = variable_names(cfg.problem);

    let mut summary = RunSummary::default();
    let mut csv = String::from("# equivalence.csv v1: t,formulation,variable,rel_diff\n");
    for formulation in cfg.formulation.list() {
        let sys = build_system(cfg, formulation, &case, &mesh, &partition)?;
        let mixed = build_mixed_reference(cfg.problem, formulation, &mesh, &partition, &case.materials)?;
        let hyb_inputs = hybrid_inputs(&case, &sys, &mesh);
        let mix_inputs = mixed_inputs(&case, &mixed, &mesh);
        let mut hyb = hybrid_initial_state(&case, &sys, &mesh, 0.0)?;
        let mut mix = mixed_initial_state(&case, &mixed, &mesh, 0.0)?;
        let hyb_op = prepare(&sys, cfg.dt).map_err(|e| numerical_at(0, e))?;
        let mix_op = prepare_mixed(&mixed, cfg.dt).map_err(|e| numerical_at(0, e))?;

        // (variable name, form degree, hybrid block, mixed scatterer)
        let (broken_name, conf_name) = match formulation {
            Formulation::Primal => (alpha_name, beta_name),
            Formulation::Dual => (beta_name, alpha_name),
        };
        let (broken_block, conf_block) = match formulation {
            Formulation::Primal => (Field::Alpha, Field::Beta),
            Formulation::Dual => (Field::Beta, Field::Alpha),
        };
        let mut maxima = [(broken_name, 0.0f64), (conf_name, 0.0f64)];

        for s in 1..=steps {
            hyb = step(&hyb_op, &sys, &hyb, &hyb_inputs).map_err(|e| numerical_at(s, e))?;
            mix = step_mixed(&mix_op, &mixed, &mix, &mix_inputs).map_err(|e| numerical_at(s, e))?;
            let t = hyb.time;
            let pairs = [
                (
                    broken_name,
                    mixed.broken_degree,
                    extract_field(&sys, &hyb.x_l, broken_block),
                    scatter_space(&mixed.broken_space, &mix.broken),
                ),
                (
                    conf_name,
                    mixed.conforming_degree,
                    extract_field(&sys, &hyb.x_l, conf_block),
                    scatter_space(&mixed.conforming_space, &mix.conforming),
                ),
            ];
            for (i, (name, k, h_coeffs, m_coeffs)) in pairs.into_iter().enumerate() {
                let zeros = DVector::zeros(m_coeffs.len());
                let diff = field_difference_l2(&mesh, k, &h_coeffs, k, &m_coeffs)?;
                let scale = field_difference_l2(&mesh, k, &m_coeffs, k, &zeros)?;
                let rel = diff / scale.max(1e-300);
                maxima[i].1 = maxima[i].1.max(rel);
                let _ = writeln!(
                    csv,
                    "{:.16e},{},{},{:.16e}",
                    t,
                    formulation_label(formulation),
                    name,
                    rel
                );
            }
        }
        for (name, value) in maxima {
            summary.equivalence_maxima.push((formulation, name, value));
        }
    }
    write_file(cfg, &mut summary, "equivalence.csv", &csv)?;
    Ok(summary)
}

fn run_converge(cfg: &RunConfig) -> Result<RunSummary, CliError> {
    let formulation = cfg.formulation.single("converge")?;
    if cfg.ns.len() < 2 {
        return Err(CliError::Config(
            "converge mode needs at least two values of n".into(),
        ));
    }
    let steps = step_count(cfg)?;
    let case = Arc::new(build_case(cfg)?);
    let (alpha_name, beta_name) = variable_names(cfg.problem);
    let conf_name = conforming_name(cfg.problem, formulation);
    let broken_name = match formulation {
        Formulation::Primal => alpha_name,
        Formulation::Dual => beta_name,
    };

    let mut summary = RunSummary::default();
    let mut csv = String::from("# convergence.csv v1: n,h,variable,norm,error\n");
    for &n in &cfg.ns {
        let mesh = Arc::new(build_structured_box(n)?);
        let partition = build_partition(cfg, &mesh)?;
        let sys = build_system(cfg, formulation, &case, &mesh, &partition)?;
        let inputs = hybrid_inputs(&case, &sys, &mesh);
        let mut state = hybrid_initial_state(&case, &sys, &mesh, 0.0)?;
        let op = prepare(&sys, cfg.dt).map_err(|e| numerical_at(0, e))?;
        for s in 1..=steps {
            state = step(&op, &sys, &state, &inputs).map_err(|e| numerical_at(s, e))?;
        }
        let report = error_norms(&case, &sys, &state, &mesh)?;
        for (variable, norm, error) in
            report_rows(&report, alpha_name, beta_name, conf_name, broken_name)
        {
            let _ = writeln!(csv, "{},{:.16e},{},{},{:.16e}", n, report.h, variable, norm, error);
        }
        summary.reports.push((n, report));
    }
    write_file(cfg, &mut summary, "convergence.csv", &csv)?;

    let hs: Vec<f64> = summary.reports.iter().map(|(_, r)| r.h).collect();
    let mut rates_csv = String::from("# rates.csv v1: variable,norm,rate\n");
    for i in 0..6 {
        let (variable, norm, _) = report_rows(
            &summary.reports[0].1,
            alpha_name,
            beta_name,
            conf_name,
            broken_name,
        )[i];
        // Floor exactly-represented (zero-error) series so the fit stays
        // defined; the resulting rate is meaningless but finite.
        let errs: Vec<f64> = summary
            .reports
            .iter()
            .map(|(_, r)| {
                report_rows(r, alpha_name, beta_name, conf_name, broken_name)[i].2.max(1e-300)
            })
            .collect();
        let rate = fit_rate(&hs, &errs)?;
        let _ = writeln!(rates_csv, "{},{},{:.16e}", variable, norm, rate);
        summary.rates.push((variable, norm, rate));
    }
    write_file(cfg, &mut summary, "rates.csv", &rates_csv)?;
    Ok(summary)
}

fn report_rows(
    report: &ErrorReport,
    alpha_name: &'static str,
    beta_name: &'static str,
    conf_name: &'static str,
    broken_name: &'static str,
) -> [(&'static str, &'static str, f64); 6] {
    [
        (alpha_name, "l2", report.alpha_l2),
        (beta_name, "l2", report.beta_l2),
        (conf_name, "graph", report.conforming_graph),
        (broken_name, "graph_broken", report.broken_graph),
        (conf_name, "facet_trace", report.conforming_trace_facet),
        ("multiplier", "facet", report.multiplier_facet),
    ]
}

// ---------------------------------------------------------------------------
// Process entry
// ---------------------------------------------------------------------------

/// Full process body: parses `argv`, runs, prints a human summary to
/// stdout, and returns the exit code (0 success, 2 configuration error,
/// 3 run failure).
pub fn main_entry(args: impl Iterator<Item = String>) -> i32 {
    let paths: Vec<String> = args.skip(1).collect();
    let [path] = paths.as_slice() else {
        eprintln!("usage: hybridfem <config-file>");
        eprintln!("       (flat key = value lines; see the README for the key table)");
        return 2;
    };
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read {path}: {e}");
            return 2;
        }
    };
    let cfg = match RunConfig::parse(&text) {
        Ok(c) => c,
        Err(m) => {
            eprintln!("configuration error: {m}");
            return 2;
        }
    };
    if cfg.threads > 0 {
        // A failure here only means a pool already exists (ignored: the
        // run proceeds on the existing pool).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }
    match run(&cfg) {
        Ok(summary) => {
            print_summary(&cfg, &summary);
            0
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn print_summary(cfg: &RunConfig, summary: &RunSummary) {
    for file in &summary.files {
        println!("wrote {}", file.display());
    }
    for row in &summary.size_rows {
        println!(
            "n = {:>3}: mixed = {:>8}, condensed = {:>8}, ratio = {}%",
            row.n,
            row.mixed,
            row.hybrid,
            row.ratio_rounded()
        );
    }
    if let Some(r) = summary.max_power_residual {
        println!(
            "driven run: max scaled power residual = {r:.3e} (tol = {:.1e}: {})",
            cfg.tol,
            if r <= cfg.tol { "ok" } else { "EXCEEDED" }
        );
    }
    if let Some(d) = summary.homogeneous_drift {
        println!("homogeneous run: max |H(t) - H(0)|/H(0) = {d:.3e}");
    }
    if let Some(d) = summary.divergence_drift {
        println!("driven run: max divergence drift = {d:.3e}");
    }
    for (formulation, variable, value) in &summary.equivalence_maxima {
        println!(
            "{} {}: max relative difference = {value:.3e} (tol = {:.1e}: {})",
            formulation_label(*formulation),
            variable,
            cfg.tol,
            if *value <= cfg.tol { "ok" } else { "EXCEEDED" }
        );
    }
    for (variable, norm, rate) in &summary.rates {
        println!("{variable} {norm}: fitted rate = {rate:.3}");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("hybridfem-cli-{}-{tag}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn parsing_accepts_the_documented_keys() {
        let text = "\n# full configuration\nproblem = maxwell\nformulation = both\n\
                    mode = equivalence\nn = 2\ndegree = 1\ndt = 0.02\nt_end = 0.1\n\
                    profile = quadratic\ngamma1 = all\nc = 1.5\neps = 2.0\nmu = 0.5\n\
                    out_dir = /tmp/somewhere\ntol = 1e-9\nthreads = 3\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.problem, ProblemKind::Maxwell);
        assert_eq!(cfg.formulation, FormulationChoice::Both);
        assert_eq!(cfg.mode, Mode::Equivalence);
        assert_eq!(cfg.ns, vec![2]);
        assert_eq!(cfg.dt, 0.02);
        assert_eq!(cfg.profile, Profile::Quadratic);
        assert_eq!(cfg.gamma1, BoundarySelector::All);
        assert_eq!(cfg.eps, 2.0);
        assert_eq!(cfg.threads, 3);

        let list = RunConfig::parse("mode = sizes\nproblem = wave\nformulation = primal\nn = 1, 2, 4\n")
            .unwrap();
        assert_eq!(list.ns, vec![1, 2, 4]);
    }

    #[test]
    fn parsing_rejects_bad_configurations() {
        let base = "mode = sizes\nproblem = wave\nformulation = primal\n";
        for (text, needle) in [
            ("problem = wave\nformulation = primal\n", "missing required key 'mode'"),
            ("mode = sizes\nformulation = primal\n", "missing required key 'problem'"),
            ("mode = sizes\nproblem = wave\n", "missing required key 'formulation'"),
            (&format!("{base}unknown_key = 1\n") as &str, "unknown key"),
            (&format!("{base}n = 2\nn = 4\n"), "duplicate key"),
            (&format!("{base}degree = 2\n"), "degree must be 1"),
            (&format!("{base}dt = 0\n"), "dt must be positive"),
            (&format!("{base}dt = 0.5\nt_end = 0.1\n"), "t_end must be at least"),
            (&format!("{base}n = 0\n"), "n must be"),
            (&format!("{base}profile = cubic\n"), "profile must be"),
            (&format!("{base}c = -1\n"), "c must be positive"),
            ("mode: sizes\n", "expected key = value"),
        ] {
            let err = RunConfig::parse(text).unwrap_err();
            assert!(err.contains(needle), "'{err}' does not mention '{needle}'");
        }
    }

    #[test]
    fn sizes_mode_writes_the_reference_table() {
        let mut cfg = RunConfig::new(Mode::Sizes, ProblemKind::Wave, FormulationChoice::Primal);
        cfg.ns = vec![1, 2];
        cfg.out_dir = temp_dir("sizes");
        let summary = run(&cfg).unwrap();
        assert_eq!(summary.size_rows.len(), 2);
        let text = fs::read_to_string(cfg.out_dir.join("sizes.csv")).unwrap();
        assert_eq!(
            text,
            "# sizes.csv v1: n,mixed_dofs,hybrid_dofs,ratio\n1,24,18,75\n2,168,120,71\n"
        );
        // formulation = both has no single table.
        cfg.formulation = FormulationChoice::Both;
        assert!(matches!(run(&cfg), Err(CliError::Config(_))));
    }

    #[test]
    fn conserve_mode_reports_flat_energy_without_inputs() {
        let mut cfg = RunConfig::new(Mode::Conserve, ProblemKind::Wave, FormulationChoice::Dual);
        cfg.ns = vec![1];
        cfg.dt = 0.05;
        cfg.t_end = 0.25;
        cfg.out_dir = temp_dir("conserve");
        let summary = run(&cfg).unwrap();
        assert!(summary.homogeneous_drift.unwrap() <= 1e-12);
        assert!(summary.max_power_residual.unwrap() <= 1e-10);
        assert!(summary.divergence_drift.is_none());
        let steps = fs::read_to_string(cfg.out_dir.join("steps.csv")).unwrap();
        assert!(steps.starts_with("# steps.csv v1: t,hamiltonian,boundary_power,residual\n"));
        assert_eq!(steps.lines().count(), 6);
        assert!(cfg.out_dir.join("steps_homogeneous.csv").exists());
    }

    #[test]
    fn conserve_mode_tracks_maxwell_divergence() {
        let mut cfg =
            RunConfig::new(Mode::Conserve, ProblemKind::Maxwell, FormulationChoice::Primal);
        cfg.ns = vec![1];
        cfg.dt = 0.05;
        cfg.t_end = 0.2;
        cfg.out_dir = temp_dir("conserve-maxwell");
        let summary = run(&cfg).unwrap();
        assert!(summary.divergence_drift.unwrap() <= 1e-10);
        let steps = fs::read_to_string(cfg.out_dir.join("steps.csv")).unwrap();
        assert!(steps.contains("div_norm"));
        let first = steps.lines().nth(1).unwrap();
        assert_eq!(first.split(',').count(), 5);
    }

    #[test]
    fn equivalence_mode_matches_the_discretizations() {
        let mut cfg =
            RunConfig::new(Mode::Equivalence, ProblemKind::Wave, FormulationChoice::Both);
        cfg.ns = vec![1];
        cfg.dt = 0.05;
        cfg.t_end = 0.2;
        cfg.out_dir = temp_dir("equivalence");
        let summary = run(&cfg).unwrap();
        assert_eq!(summary.equivalence_maxima.len(), 4);
        for (formulation, variable, value) in &summary.equivalence_maxima {
            assert!(
                *value <= 1e-9,
                "{:?} {variable}: relative difference {value}",
                formulation
            );
        }
        let text = fs::read_to_string(cfg.out_dir.join("equivalence.csv")).unwrap();
        // 4 steps x 2 formulations x 2 variables + 1 header line.
        assert_eq!(text.lines().count(), 17);
        assert!(text.lines().nth(1).unwrap().contains("primal"));
    }

    #[test]
    fn converge_mode_fits_finite_rates() {
        let mut cfg = RunConfig::new(Mode::Converge, ProblemKind::Wave, FormulationChoice::Dual);
        cfg.ns = vec![1, 2];
        cfg.profile = Profile::Quadratic;
        cfg.dt = 0.05;
        cfg.t_end = 0.2;
        cfg.out_dir = temp_dir("converge");
        let summary = run(&cfg).unwrap();
        assert_eq!(summary.reports.len(), 2);
        assert_eq!(summary.rates.len(), 6);
        for (variable, norm, rate) in &summary.rates {
            assert!(rate.is_finite(), "{variable}/{norm} rate not finite");
        }
        let text = fs::read_to_string(cfg.out_dir.join("convergence.csv")).unwrap();
        assert_eq!(text.lines().count(), 13);
        assert!(cfg.out_dir.join("rates.csv").exists());
    }

    #[test]
    fn identical_configurations_write_identical_bytes() {
        let mut cfg = RunConfig::new(Mode::Conserve, ProblemKind::Wave, FormulationChoice::Primal);
        cfg.ns = vec![1];
        cfg.dt = 0.1;
        cfg.t_end = 0.3;
        cfg.out_dir = temp_dir("repeat-a");
        run(&cfg).unwrap();
        let a = fs::read(cfg.out_dir.join("steps.csv")).unwrap();
        cfg.out_dir = temp_dir("repeat-b");
        run(&cfg).unwrap();
        let b = fs::read(cfg.out_dir.join("steps.csv")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn entry_point_maps_failures_to_exit_codes() {
        let argv = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>().into_iter();
        assert_eq!(main_entry(argv(&["bin"])), 2);
        assert_eq!(main_entry(argv(&["bin", "/nonexistent/config"])), 2);

        let dir = temp_dir("entry");
        fs::create_dir_all(&dir).unwrap();
        let bad = dir.join("bad.cfg");
        fs::write(&bad, "mode = sizes\nproblem = wave\nformulation = primal\ndegree = 2\n").unwrap();
        assert_eq!(main_entry(argv(&["bin", bad.to_str().unwrap()])), 2);

        let good = dir.join("good.cfg");
        fs::write(
            &good,
            format!(
                "mode = sizes\nproblem = wave\nformulation = dual\nn = 1, 2\nout_dir = {}\n",
                dir.join("out").display()
            ),
        )
        .unwrap();
        assert_eq!(main_entry(argv(&["bin", good.to_str().unwrap()])), 0);

        // An extreme wave speed underflows the material weights to zero;
        // the builders catch that as a configuration error.
        let underflow = dir.join("underflow.cfg");
        fs::write(
            &underflow,
            format!(
                "mode = conserve\nproblem = wave\nformulation = dual\nn = 1\n\
                 profile = quadratic\nc = 1e200\ndt = 0.1\nt_end = 0.1\nout_dir = {}\n",
                dir.join("out2").display()
            ),
        )
        .unwrap();
        assert_eq!(main_entry(argv(&["bin", underflow.to_str().unwrap()])), 2);

        // A run failure (the implicit midpoint step itself cannot be made
        // to blow up from a validated configuration): the output
        // directory cannot be created because a file sits in its place.
        let blocker = dir.join("blocker");
        fs::write(&blocker, "not a directory").unwrap();
        let failing = dir.join("failing.cfg");
        fs::write(
            &failing,
            format!(
                "mode = sizes\nproblem = wave\nformulation = primal\nn = 1\nout_dir = {}\n",
                blocker.join("out").display()
            ),
        )
        .unwrap();
        assert_eq!(main_entry(argv(&["bin", failing.to_str().unwrap()])), 3);
    }
}
