//! Run configuration and the commands behind the `eqlab` binary.
//!
//! A [`RunConfig`] is a TOML document whose sections carry the settings of
//! the library modules. Unknown keys are rejected. Each command writes its
//! artifacts into one output directory together with `config.toml` (the
//! resolved configuration), `result.json` (deterministic outcome) and
//! `run_meta.json` (wall-clock data, the only non-reproducible file).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::annealing::{anneal, AnnealSchedule};
use crate::error::{LabError, Result};
use crate::evaluation::{EvalContext, McConfig, PdeSolveConfig};
use crate::fixed_point::{solve_regularized_equilibrium, FixedPointConfig};
use crate::gibbs::{ActionGrid, ActionRule, PolicyField};
use crate::grid::{Grid, GridConfig};
use crate::problem::{catalog_family, check_assumptions, CustomProblem, ProblemSpec};
use crate::verifier::{default_start_points, library_for, verify_equilibrium, Candidate, Engine};

/// Exit code of a successful command.
pub const EXIT_OK: i32 = 0;
/// Numerical failure or a failed verdict.
pub const EXIT_FAIL: i32 = 1;
/// Unreadable or invalid configuration, bad arguments.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemSection {
    /// Catalog name, or any label when `custom` is given.
    pub name: String,
    pub custom: Option<CustomProblem>,
}

impl Default for ProblemSection {
    fn default() -> Self {
        ProblemSection {
            name: "R1".into(),
            custom: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GibbsSection {
    pub n_actions: usize,
    pub rule: ActionRule,
}

impl Default for GibbsSection {
    fn default() -> Self {
        GibbsSection {
            n_actions: 201,
            rule: ActionRule::Lobatto,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub pde: PdeSolveConfig,
    /// `rng_seed` is replaced by the top-level `seed`.
    pub mc: McConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineChoice {
    #[default]
    Pde,
    Mc,
}

/// Candidate built by `verify` when no candidate directory is given.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateChoice {
    /// Last annealing stage policy, evaluated at zero temperature.
    #[default]
    Anneal,
    /// Uniform policy at zero temperature.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifierSection {
    pub epsilons: Vec<f64>,
    pub tol: f64,
    pub n_start_points: usize,
    pub engine: EngineChoice,
    pub candidate: CandidateChoice,
}

impl Default for VerifierSection {
    fn default() -> Self {
        VerifierSection {
            epsilons: vec![0.4, 0.2, 0.1, 0.05, 0.025],
            tol: 1e-2,
            n_start_points: 5,
            engine: EngineChoice::Pde,
            candidate: CandidateChoice::Anneal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliSection {
    pub output_dir: PathBuf,
    /// Temperature of `solve` and `convergence`.
    pub lambda: f64,
    /// Rayon worker count; all cores when absent.
    pub workers: Option<usize>,
    pub assumption_samples: usize,
    pub holder_alpha: f64,
    /// Number of nested grids in `convergence`.
    pub convergence_levels: usize,
    pub convergence_min_ratio: f64,
}

impl Default for CliSection {
    fn default() -> Self {
        CliSection {
            output_dir: PathBuf::from("runs/latest"),
            lambda: 0.5,
            workers: None,
            assumption_samples: 2000,
            holder_alpha: 0.5,
            convergence_levels: 3,
            convergence_min_ratio: 1.8,
        }
    }
}

/// Complete configuration of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub problem_model: ProblemSection,
    pub discretization_norms: GridConfig,
    pub gibbs_policy: GibbsSection,
    pub policy_evaluation: EvaluationSection,
    pub equilibrium_fixed_point: FixedPointConfig,
    pub entropy_annealing: AnnealSchedule,
    pub equilibrium_verifier: VerifierSection,
    pub experiment_cli: CliSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            seed: 0,
            problem_model: ProblemSection::default(),
            discretization_norms: GridConfig::default(),
            gibbs_policy: GibbsSection::default(),
            policy_evaluation: EvaluationSection::default(),
            equilibrium_fixed_point: FixedPointConfig::default(),
            entropy_annealing: AnnealSchedule::default(),
            equilibrium_verifier: VerifierSection::default(),
            experiment_cli: CliSection::default(),
        };
        cfg.set_seed(0);
        cfg
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.policy_evaluation.mc.rng_seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.policy_evaluation.mc.rng_seed = seed;
    }

    /// Checks every section and that the problem name resolves.
    pub fn validate(&self) -> Result<()> {
        let spec = self.problem_spec()?;
        self.grid(&spec)?;
        self.action_grid(&spec)?;
        self.policy_evaluation.pde.validate()?;
        self.policy_evaluation.mc.validate()?;
        self.equilibrium_fixed_point.validate()?;
        self.entropy_annealing.validate()?;
        let v = &self.equilibrium_verifier;
        if v.epsilons.is_empty() || v.epsilons.iter().any(|e| !(*e > 0.0)) {
            return Err(LabError::Config("verifier epsilons must be positive".into()));
        }
        if v.epsilons.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(LabError::Config("verifier epsilons must be strictly decreasing".into()));
        }
        if !(v.tol > 0.0) || v.n_start_points == 0 {
            return Err(LabError::Config(
                "verifier needs a positive tol and at least one start point".into(),
            ));
        }
        let c = &self.experiment_cli;
        if !(c.lambda > 0.0 && c.lambda.is_finite()) {
            return Err(LabError::Config(format!("lambda {} must be positive", c.lambda)));
        }
        if c.workers == Some(0) {
            return Err(LabError::Config("workers must be at least 1".into()));
        }
        if c.convergence_levels < 2 {
            return Err(LabError::Config("convergence needs at least two grid levels".into()));
        }
        Ok(())
    }

    pub fn problem_spec(&self) -> Result<ProblemSpec> {
        let p = &self.problem_model;
        let family = match &p.custom {
            Some(c) => c.clone(),
            None => catalog_family(&p.name)?,
        };
        family.build(&p.name, self.discretization_norms.boundary)
    }

    pub fn grid(&self, spec: &ProblemSpec) -> Result<Grid> {
        self.discretization_norms.build(spec)
    }

    pub fn action_grid(&self, spec: &ProblemSpec) -> Result<ActionGrid> {
        ActionGrid::for_spec(spec, self.gibbs_policy.n_actions, self.gibbs_policy.rule)
    }

    pub fn engine(&self) -> Engine {
        match self.equilibrium_verifier.engine {
            EngineChoice::Pde => Engine::Pde,
            EngineChoice::Mc => Engine::Mc(self.policy_evaluation.mc),
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub lambda: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(l) = self.lambda {
            cfg.experiment_cli.lambda = l;
        }
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        if let Some(o) = &self.out {
            cfg.experiment_cli.output_dir = o.clone();
        }
        if let Some(w) = self.workers {
            cfg.experiment_cli.workers = Some(w);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Check,
    Solve,
    Anneal,
    Verify { candidate: Option<PathBuf> },
    Convergence,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Check => "check",
            Command::Solve => "solve",
            Command::Anneal => "anneal",
            Command::Verify { .. } => "verify",
            Command::Convergence => "convergence",
        }
    }
}

/// Exit code and a one-line message of a finished command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Outcome {
    pub exit_code: i32,
    pub message: String,
}

impl Outcome {
    fn new(ok: bool, message: String) -> Self {
        Outcome {
            exit_code: if ok { EXIT_OK } else { EXIT_FAIL },
            message,
        }
    }
}

#[derive(Serialize)]
struct ResultFile<'a, T: Serialize> {
    command: &'a str,
    seed: u64,
    exit_code: i32,
    message: &'a str,
    details: T,
}

#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    version: &'a str,
    started_unix: f64,
    elapsed_seconds: f64,
    workers: usize,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn write_result<T: Serialize>(dir: &Path, cmd: &Command, cfg: &RunConfig, out: &Outcome, details: T) -> Result<()> {
    write_json(
        &dir.join("result.json"),
        &ResultFile {
            command: cmd.name(),
            seed: cfg.seed,
            exit_code: out.exit_code,
            message: &out.message,
            details,
        },
    )
}

/// Runs one command, writing every artifact into `cfg.experiment_cli.output_dir`.
///
/// The configuration snapshot is written before any numerics so that a
/// failing run still leaves it behind.
pub fn run(cmd: &Command, cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let dir = cfg.experiment_cli.output_dir.clone();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let started = unix_now();
    let clock = Instant::now();
    let outcome = match cmd {
        Command::Check => cmd_check(cfg, &dir),
        Command::Solve => cmd_solve(cfg, &dir),
        Command::Anneal => cmd_anneal(cfg, &dir),
        Command::Verify { candidate } => cmd_verify(cfg, &dir, candidate.as_deref()),
        Command::Convergence => cmd_convergence(cfg, &dir),
    };
    let meta = RunMeta {
        command: cmd.name(),
        version: env!("CARGO_PKG_VERSION"),
        started_unix: started,
        elapsed_seconds: clock.elapsed().as_secs_f64(),
        workers: rayon::current_num_threads(),
    };
    write_json(&dir.join("run_meta.json"), &meta)?;
    outcome
}

pub fn cmd_check(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let spec = cfg.problem_spec()?;
    let report = check_assumptions(
        &spec,
        cfg.experiment_cli.assumption_samples,
        cfg.experiment_cli.holder_alpha,
    )?;
    write_json(&dir.join("assumptions.json"), &report)?;
    let out = if report.passed() {
        Outcome::new(
            true,
            format!("all assumption checks pass on {} (eta = {})", spec.name, report.eta),
        )
    } else {
        Outcome::new(false, format!("assumption checks fail: {}", report.notes.join("; ")))
    };
    write_result(dir, &Command::Check, cfg, &out, &report)?;
    Ok(out)
}

pub fn cmd_solve(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let spec = cfg.problem_spec()?;
    let grid = cfg.grid(&spec)?;
    let actions = cfg.action_grid(&spec)?;
    let ctx = EvalContext::new(&spec, &grid, &actions)?;
    let lambda = cfg.experiment_cli.lambda;
    let res = solve_regularized_equilibrium(
        &ctx,
        lambda,
        &cfg.equilibrium_fixed_point,
        &cfg.policy_evaluation.pde,
        None,
    )?;
    let cand = Candidate {
        label: format!("solve lambda={lambda}"),
        value: res.value.clone(),
        policy: res.policy.clone(),
        lambda,
    };
    cand.save(dir, &ctx)?;
    res.write_history_csv(&dir.join("residuals.csv"))?;
    let summary = res.summary();
    write_json(&dir.join("summary.json"), &summary)?;
    let out = Outcome::new(
        res.converged,
        format!(
            "lambda {lambda}: {} after {} iterations, defect {:.3e}, EEHJB residual t0 {:.3e} field {:.3e}",
            if res.converged { "converged" } else { "not converged" },
            res.iterations,
            res.fixed_point_defect,
            res.residual.res_t0,
            res.residual.res_field
        ),
    );
    write_result(dir, &Command::Solve, cfg, &out, summary)?;
    Ok(out)
}

pub fn cmd_anneal(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let spec = cfg.problem_spec()?;
    let grid = cfg.grid(&spec)?;
    let actions = cfg.action_grid(&spec)?;
    let ctx = EvalContext::new(&spec, &grid, &actions)?;
    let trace = anneal(
        &ctx,
        &cfg.entropy_annealing,
        &cfg.equilibrium_fixed_point,
        &cfg.policy_evaluation.pde,
    )?;
    trace.export(dir, &ctx)?;
    let limit = trace.limit_value.is_some();
    let out = Outcome::new(
        limit,
        format!(
            "{} stages, last Cauchy difference {}, limit {}",
            trace.stages.len(),
            trace
                .cauchy_diffs
                .last()
                .map(|d| format!("{d:.3e}"))
                .unwrap_or_else(|| "n/a".into()),
            if limit { "available" } else { "not reached" }
        ),
    );
    write_result(dir, &Command::Anneal, cfg, &out, trace.summary())?;
    Ok(out)
}

/// Zero-temperature candidate chosen by `equilibrium_verifier.candidate`.
pub fn build_candidate(cfg: &RunConfig, ctx: &EvalContext<'_>) -> Result<Candidate> {
    let pde = &cfg.policy_evaluation.pde;
    match cfg.equilibrium_verifier.candidate {
        CandidateChoice::Uniform => {
            let policy = PolicyField::uniform(ctx.grid.n_space(), ctx.actions);
            Candidate::from_policy(ctx, policy, 0.0, pde, "uniform")
        }
        CandidateChoice::Anneal => {
            let trace = anneal(ctx, &cfg.entropy_annealing, &cfg.equilibrium_fixed_point, pde)?;
            let policy = match (&trace.limit_policy, trace.stages.last()) {
                (Some(p), _) => p.clone(),
                (None, Some(st)) => st.policy.clone(),
                (None, None) => return Err(LabError::State("annealing produced no stage".into())),
            };
            Candidate::from_policy(ctx, policy, 0.0, pde, "anneal")
        }
    }
}

pub fn cmd_verify(cfg: &RunConfig, dir: &Path, candidate_dir: Option<&Path>) -> Result<Outcome> {
    let spec = cfg.problem_spec()?;
    let grid = cfg.grid(&spec)?;
    let actions = cfg.action_grid(&spec)?;
    let ctx = EvalContext::new(&spec, &grid, &actions)?;
    let cand = match candidate_dir {
        Some(p) => Candidate::load(p, &ctx)?,
        None => {
            let c = build_candidate(cfg, &ctx)?;
            c.save(&dir.join("candidate"), &ctx)?;
            c
        }
    };
    let v = &cfg.equilibrium_verifier;
    let library = library_for(&ctx, &cand);
    let x_points = default_start_points(&grid, v.n_start_points);
    let report = verify_equilibrium(
        &ctx,
        &cand,
        &library,
        &x_points,
        &v.epsilons,
        v.tol,
        &cfg.engine(),
        &cfg.policy_evaluation.pde,
    )?;
    report.write_csv(&dir.join("gaps.csv"))?;
    report.write_json(&dir.join("report.json"))?;
    let out = Outcome::new(
        report.pass,
        format!(
            "{}: worst offender {} at x = {:?} with limsup {:.4e} (tol {:.1e})",
            if report.pass { "pass" } else { "fail" },
            report.worst.deviation,
            report.worst.x,
            report.worst.limsup,
            report.tol
        ),
    );
    write_result(
        dir,
        &Command::Verify {
            candidate: candidate_dir.map(Path::to_path_buf),
        },
        cfg,
        &out,
        &report.worst,
    )?;
    Ok(out)
}

/// One row of the grid-refinement table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub level: usize,
    pub n_space: usize,
    pub n_time: usize,
    pub dx: f64,
    pub dt0: f64,
    pub iterations: usize,
    pub converged: bool,
    pub res_t0: f64,
    pub res_field: f64,
    /// Residual ratio against the previous level (NaN on level 0).
    pub ratio_t0: f64,
    pub ratio_field: f64,
}

/// Solves at nested grids and tabulates the residual ratios.
pub fn convergence_study(cfg: &RunConfig) -> Result<Vec<ConvergenceRow>> {
    let spec = cfg.problem_spec()?;
    let actions = cfg.action_grid(&spec)?;
    let lambda = cfg.experiment_cli.lambda;
    let mut grid = cfg.grid(&spec)?;
    let mut rows: Vec<ConvergenceRow> = Vec::new();
    for level in 0..cfg.experiment_cli.convergence_levels {
        if level > 0 {
            grid = grid.refined();
        }
        let ctx = EvalContext::new(&spec, &grid, &actions)?;
        let res = solve_regularized_equilibrium(
            &ctx,
            lambda,
            &cfg.equilibrium_fixed_point,
            &cfg.policy_evaluation.pde,
            None,
        )?;
        let (ratio_t0, ratio_field) = match rows.last() {
            Some(p) => (p.res_t0 / res.residual.res_t0, p.res_field / res.residual.res_field),
            None => (f64::NAN, f64::NAN),
        };
        rows.push(ConvergenceRow {
            level,
            n_space: grid.n_space(),
            n_time: grid.n_time(),
            dx: grid.dx()[0],
            dt0: grid.t_nodes()[1] - grid.t_nodes()[0],
            iterations: res.iterations,
            converged: res.converged,
            res_t0: res.residual.res_t0,
            res_field: res.residual.res_field,
            ratio_t0,
            ratio_field,
        });
    }
    Ok(rows)
}

pub fn write_convergence_csv(path: &Path, rows: &[ConvergenceRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "level,n_space,n_time,dx,dt0,iterations,converged,res_t0,res_field,ratio_t0,ratio_field"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{:e},{:e},{},{},{:e},{:e},{},{}",
            r.level,
            r.n_space,
            r.n_time,
            r.dx,
            r.dt0,
            r.iterations,
            r.converged,
            r.res_t0,
            r.res_field,
            r.ratio_t0,
            r.ratio_field
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn cmd_convergence(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let rows = convergence_study(cfg)?;
    write_convergence_csv(&dir.join("convergence.csv"), &rows)?;
    let min_ratio = cfg.experiment_cli.convergence_min_ratio;
    let ok = rows.iter().all(|r| r.converged)
        && rows
            .iter()
            .skip(1)
            .all(|r| r.ratio_t0 >= min_ratio && r.ratio_field >= min_ratio);
    let worst = rows
        .iter()
        .skip(1)
        .map(|r| r.ratio_t0.min(r.ratio_field))
        .fold(f64::INFINITY, f64::min);
    let out = Outcome::new(
        ok,
        format!(
            "{} levels, smallest residual ratio {worst:.3} (required {min_ratio})",
            rows.len()
        ),
    );
    write_result(dir, &Command::Convergence, cfg, &out, &rows)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("[discretization_norms]\nnxx = [11]\n").unwrap_err();
        assert!(matches!(err, LabError::Config(_)));
        assert!(RunConfig::from_toml_str("sed = 3\n").is_err());
    }

    #[test]
    fn unknown_problem_fails_validation() {
        let cfg = RunConfig::from_toml_str("[problem_model]\nname = \"nope\"\n").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn seed_drives_the_sampler() {
        let mut cfg = RunConfig::from_toml_str("seed = 11\n").unwrap();
        assert_eq!(cfg.policy_evaluation.mc.rng_seed, 11);
        Overrides {
            seed: Some(5),
            lambda: Some(0.25),
            ..Default::default()
        }
        .apply(&mut cfg);
        assert_eq!(cfg.policy_evaluation.mc.rng_seed, 5);
        assert_eq!(cfg.experiment_cli.lambda, 0.25);
    }

    #[test]
    fn custom_problem_round_trips() {
        let cfg = RunConfig {
            problem_model: ProblemSection {
                name: "mine".into(),
                custom: Some(catalog_family("R1").unwrap()),
            },
            ..RunConfig::default()
        };
        let back = RunConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.problem_spec().unwrap().name, "mine");
    }

    #[test]
    fn check_on_zero_problem_writes_report() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::from_toml_str("[problem_model]\nname = \"D0\"\n").unwrap();
        cfg.experiment_cli.output_dir = dir.path().to_path_buf();
        let out = run(&Command::Check, &cfg).unwrap();
        assert_eq!(out.exit_code, EXIT_OK);
        for f in ["assumptions.json", "config.toml", "result.json", "run_meta.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }
}
