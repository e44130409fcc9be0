//! Spike-perturbation test of the equilibrium condition: the deviation is
//! played on `[0, ε)` and the candidate afterwards, and the gap
//! `(J' − J)/ε` is tracked as `ε` shrinks.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::evaluation::{
    evaluate_policy_pde_with, interpolate, reflect_into, solve_backward, DensitySampler, EvalContext, McConfig,
    PdeSolveConfig, PolicyAverages,
};
use crate::gibbs::{hard_max_from_exponents, PolicyField};
use crate::grid::{read_field, slice_grad, write_field, write_static_field, Grid, ValueField};

pub const REPORT_HEADER: &str =
    "Finite deviation library plus greedy construction; a pass is evidence of equilibrium, not a proof.";

/// A deviation `ϖ` played on the initial window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeviationKind {
    /// Constant action, evaluated exactly (not snapped to the action grid).
    Atom {
        action: Vec<f64>,
    },
    Uniform,
    /// Atom at the hard argmax of the candidate's `t = 0` exponents per node.
    Greedy,
    /// Densities over the action grid, `n_space × n_actions`.
    Density {
        densities: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: DeviationKind,
}

impl DeviationSpec {
    pub fn is_atomic(&self) -> bool {
        matches!(self.kind, DeviationKind::Atom { .. } | DeviationKind::Greedy)
    }
}

/// Five atoms spread over the (first axis of the) action set, the uniform
/// density and the greedy deviation.
pub fn default_library(ctx: &EvalContext<'_>) -> Vec<DeviationSpec> {
    let set = ctx.actions.set();
    let mut out: Vec<DeviationSpec> = [0.0, 0.25, 0.5, 0.75, 1.0]
        .iter()
        .map(|&f| DeviationSpec {
            name: format!("atom_{f:.2}"),
            kind: DeviationKind::Atom {
                action: set.lo.iter().zip(&set.hi).map(|(l, h)| l + f * (h - l)).collect(),
            },
        })
        .collect();
    out.push(DeviationSpec {
        name: "uniform".into(),
        kind: DeviationKind::Uniform,
    });
    out.push(DeviationSpec {
        name: "greedy".into(),
        kind: DeviationKind::Greedy,
    });
    out
}

/// Deviations admissible at positive temperature: Gaussian bumps (width a
/// tenth of the action diameter) at the five atom locations of
/// [`default_library`], the uniform density and the candidate's own policy.
pub fn density_library(ctx: &EvalContext<'_>, cand: &Candidate) -> Vec<DeviationSpec> {
    let set = ctx.actions.set();
    let width = 0.1 * ctx.actions.diameter();
    let ns = ctx.grid.n_space();
    let mut out: Vec<DeviationSpec> = [0.0, 0.25, 0.5, 0.75, 1.0]
        .iter()
        .map(|&f| {
            let c: Vec<f64> = set.lo.iter().zip(&set.hi).map(|(l, h)| l + f * (h - l)).collect();
            let mut q: Vec<f64> = ctx
                .actions
                .nodes()
                .iter()
                .map(|a| {
                    let r2: f64 = a.iter().zip(&c).map(|(x, y)| (x - y) * (x - y)).sum();
                    (-0.5 * r2 / (width * width)).exp()
                })
                .collect();
            let z: f64 = q.iter().zip(ctx.actions.weights()).map(|(v, w)| v * w).sum();
            q.iter_mut().for_each(|v| *v /= z);
            DeviationSpec {
                name: format!("bump_{f:.2}"),
                kind: DeviationKind::Density {
                    densities: q.repeat(ns),
                },
            }
        })
        .collect();
    out.push(DeviationSpec {
        name: "uniform".into(),
        kind: DeviationKind::Uniform,
    });
    if !cand.policy.is_atomic() {
        out.push(DeviationSpec {
            name: "self".into(),
            kind: DeviationKind::Density {
                densities: cand.policy.densities().to_vec(),
            },
        });
    }
    out
}

/// [`default_library`] at zero temperature, [`density_library`] otherwise.
pub fn library_for(ctx: &EvalContext<'_>, cand: &Candidate) -> Vec<DeviationSpec> {
    if cand.lambda > 0.0 {
        density_library(ctx, cand)
    } else {
        default_library(ctx)
    }
}

/// Value field and policy under test.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub label: String,
    pub value: ValueField,
    pub policy: PolicyField,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CandidateMeta {
    label: String,
    lambda: f64,
    atomic: bool,
    n_space: usize,
    n_actions: usize,
}

impl Candidate {
    /// Evaluates `policy` at temperature `lambda` on the context grid.
    pub fn from_policy(
        ctx: &EvalContext<'_>,
        policy: PolicyField,
        lambda: f64,
        pde_cfg: &PdeSolveConfig,
        label: &str,
    ) -> Result<Self> {
        let (value, _) = evaluate_policy_pde_with(ctx, &policy, lambda, pde_cfg)?;
        Ok(Candidate {
            label: label.into(),
            value,
            policy,
            lambda,
        })
    }

    /// Writes `value.eqf`, `policy.eqf` and `candidate.json`.
    pub fn save(&self, dir: &Path, ctx: &EvalContext<'_>) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_field(&dir.join("value.eqf"), ctx.grid, &[], self.value.values())?;
        let anodes: Vec<f64> = ctx.actions.nodes().iter().map(|a| a[0]).collect();
        write_static_field(&dir.join("policy.eqf"), ctx.grid, &anodes, self.policy.densities())?;
        let meta = CandidateMeta {
            label: self.label.clone(),
            lambda: self.lambda,
            atomic: self.policy.is_atomic(),
            n_space: self.policy.n_space(),
            n_actions: self.policy.n_actions(),
        };
        std::fs::write(dir.join("candidate.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Reads a candidate saved on the same grid and action grid.
    pub fn load(dir: &Path, ctx: &EvalContext<'_>) -> Result<Self> {
        let meta: CandidateMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("candidate.json"))?)?;
        let vf = read_field(&dir.join("value.eqf"))?;
        let grid = ctx.grid;
        if vf.t_nodes != grid.t_nodes() || vf.shape != grid.shape() || vf.lo != grid.lo() {
            return Err(LabError::Config(format!(
                "candidate in {} was computed on a different grid",
                dir.display()
            )));
        }
        let pf = read_field(&dir.join("policy.eqf"))?;
        if meta.n_space != grid.n_space() || meta.n_actions != ctx.actions.len() || pf.extra.len() != ctx.actions.len()
        {
            return Err(LabError::Config(
                "candidate policy does not match the action grid".into(),
            ));
        }
        let policy = if meta.atomic {
            let w = ctx.actions.weights();
            PolicyField::atoms(grid.n_space(), ctx.actions, |i| {
                let row = &pf.data[i * meta.n_actions..(i + 1) * meta.n_actions];
                (0..meta.n_actions).filter(|&j| row[j] * w[j] > 0.0).collect()
            })
        } else {
            PolicyField::new(grid.n_space(), ctx.actions, pf.data)?
        };
        let value = crate::grid::finite_diff(&ValueField::new(grid, vf.data)?, grid)?;
        Ok(Candidate {
            label: meta.label,
            value,
            policy,
            lambda: meta.lambda,
        })
    }

    /// `J(x) = V(0, x)` interpolated from the grid.
    pub fn value_at(&self, grid: &Grid, x: &[f64]) -> f64 {
        interpolate(grid, self.value.slice(0), x)
    }
}

/// Engine used for the window `[0, ε]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Pde,
    Mc(McConfig),
}

/// Snaps requested windows to time nodes, drops those below twice the first
/// time step and deduplicates. Returns `(time index, ε)` in decreasing order.
pub fn snap_epsilons(grid: &Grid, eps: &[f64]) -> Result<Vec<(usize, f64)>> {
    let t = grid.t_nodes();
    let floor = 2.0 * (t[1] - t[0]);
    let mut out: Vec<(usize, f64)> = Vec::new();
    for &e in eps {
        if !(e >= 0.0 && e.is_finite()) {
            return Err(LabError::Parameter(format!("window {e} must be finite and >= 0")));
        }
        let k = t.partition_point(|&s| s < e);
        let k = if k == 0 {
            0
        } else if k >= t.len() {
            t.len() - 1
        } else if (t[k] - e) <= (e - t[k - 1]) {
            k
        } else {
            k - 1
        };
        if t[k] + 1e-12 < floor {
            continue;
        }
        if !out.iter().any(|(j, _)| *j == k) {
            out.push((k, t[k]));
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    if out.is_empty() {
        return Err(LabError::Parameter(format!("no window at or above 2Δt = {floor}")));
    }
    Ok(out)
}

fn check_deviation(dev: &DeviationSpec, lambda: f64, ctx: &EvalContext<'_>) -> Result<()> {
    if dev.is_atomic() && lambda > 0.0 {
        return Err(LabError::Contract(format!(
            "deviation '{}' is atomic; its entropy is undefined at temperature {lambda}",
            dev.name
        )));
    }
    if let DeviationKind::Atom { action } = &dev.kind {
        ctx.spec.check_action(action)?;
    }
    Ok(())
}

/// Greedy action node per space node from the candidate's `t = 0` gradient.
fn greedy_nodes(ctx: &EvalContext<'_>, cand: &Candidate) -> Vec<usize> {
    let grid = ctx.grid;
    let u0 = cand.value.slice(0);
    (0..grid.n_space())
        .into_par_iter()
        .map(|i| {
            let mut p = vec![0.0; grid.dim()];
            slice_grad(grid, u0, i, &mut p);
            let mut g = vec![0.0; ctx.actions.len()];
            ctx.tables.exponents(i, &p, 0.0, &mut g);
            hard_max_from_exponents(&g).1[0]
        })
        .collect()
}

fn deviation_averages(ctx: &EvalContext<'_>, cand: &Candidate, dev: &DeviationSpec) -> Result<PolicyAverages> {
    match &dev.kind {
        DeviationKind::Atom { action } => PolicyAverages::from_actions(ctx.spec, ctx.grid, |_| action.clone()),
        DeviationKind::Greedy => {
            let nodes = greedy_nodes(ctx, cand);
            PolicyAverages::from_actions(ctx.spec, ctx.grid, |i| ctx.actions.nodes()[nodes[i]].clone())
        }
        DeviationKind::Uniform => PolicyAverages::from_policy(
            &ctx.tables,
            ctx.actions,
            &PolicyField::uniform(ctx.grid.n_space(), ctx.actions),
        ),
        DeviationKind::Density { densities } => {
            let pol = PolicyField::new(ctx.grid.n_space(), ctx.actions, densities.clone())?;
            PolicyAverages::from_policy(&ctx.tables, ctx.actions, &pol)
        }
    }
}

/// `J^{ϖ⊗_ε π*}` at time node `k_eps` for every space node (PDE engine).
fn spike_field_pde(
    ctx: &EvalContext<'_>,
    cand: &Candidate,
    dev: &DeviationSpec,
    k_eps: usize,
    pde_cfg: &PdeSolveConfig,
) -> Result<Vec<f64>> {
    check_deviation(dev, cand.lambda, ctx)?;
    let ns = ctx.grid.n_space();
    if k_eps == 0 {
        return Ok(cand.value.slice(0).to_vec());
    }
    let avg = deviation_averages(ctx, cand, dev)?;
    let terminal = cand.value.slice(k_eps).to_vec();
    let (vals, _) = solve_backward(
        ctx.grid,
        &avg,
        &ctx.spec.discount,
        cand.lambda,
        k_eps,
        &terminal,
        pde_cfg,
    )?;
    Ok(vals[..ns].to_vec())
}

enum ActionSource<'a> {
    Fixed(Vec<f64>),
    Nodes(Vec<usize>),
    Density(DensitySampler, &'a EvalContext<'a>),
}

/// Spike value by Euler–Maruyama on `[0, ε]` with terminal payoff
/// `V(ε, X_ε)` interpolated from the candidate.
fn spike_mc(
    ctx: &EvalContext<'_>,
    cand: &Candidate,
    dev: &DeviationSpec,
    k_eps: usize,
    x: &[f64],
    cfg: &McConfig,
) -> Result<(f64, f64)> {
    cfg.validate()?;
    check_deviation(dev, cand.lambda, ctx)?;
    let grid = ctx.grid;
    let spec = ctx.spec;
    let eps = grid.t_nodes()[k_eps];
    if k_eps == 0 {
        return Ok((cand.value_at(grid, x), 0.0));
    }
    let source = match &dev.kind {
        DeviationKind::Atom { action } => ActionSource::Fixed(action.clone()),
        DeviationKind::Greedy => ActionSource::Nodes(greedy_nodes(ctx, cand)),
        DeviationKind::Uniform => ActionSource::Density(
            DensitySampler::new(grid, ctx.actions, &PolicyField::uniform(grid.n_space(), ctx.actions))?,
            ctx,
        ),
        DeviationKind::Density { densities } => {
            let pol = PolicyField::new(grid.n_space(), ctx.actions, densities.clone())?;
            ActionSource::Density(DensitySampler::new(grid, ctx.actions, &pol)?, ctx)
        }
    };
    let n_steps = (eps / cfg.dt_sim).ceil().max(1.0) as usize;
    let h = eps / n_steps as f64;
    let (d, m) = (spec.dim, spec.noise_dim);
    let lo = grid.lo().to_vec();
    let hi = grid.hi();
    let terminal = cand.value.slice(k_eps);
    let lambda = cand.lambda;
    let draw = |rng: &mut ChaCha8Rng, xs: &[f64]| -> (Vec<f64>, f64) {
        match &source {
            ActionSource::Fixed(a) => (a.clone(), 0.0),
            ActionSource::Nodes(nodes) => {
                let i = DensitySampler::draw_node(grid, rng, xs);
                (ctx.actions.nodes()[nodes[i]].clone(), 0.0)
            }
            ActionSource::Density(s, c) => {
                let j = s.draw(grid, rng, xs);
                let hval = if lambda > 0.0 { s.entropy(grid, xs) } else { 0.0 };
                (c.actions.nodes()[j].clone(), hval)
            }
        }
    };
    let results: Vec<f64> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
            rng.set_stream(path as u64);
            let mut xs = x.to_vec();
            let mut b = vec![0.0; d];
            let mut sig = vec![0.0; d * m];
            let (mut a, mut hx) = draw(&mut rng, &xs);
            let mut f_prev = spec.reward(0.0, &xs, &a) + lambda * spec.discount_at(0.0) * hx;
            let mut total = 0.0;
            for n in 0..n_steps {
                spec.drift_into(&xs, &a, &mut b);
                spec.diffusion_into(&xs, &mut sig);
                let sq = h.sqrt();
                let dw: Vec<f64> = (0..m)
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        z * sq
                    })
                    .collect();
                for i in 0..d {
                    xs[i] += b[i] * h + (0..m).map(|k| sig[i * m + k] * dw[k]).sum::<f64>();
                }
                reflect_into(&mut xs, &lo, &hi, cfg.reflect);
                let s = (n + 1) as f64 * h;
                (a, hx) = draw(&mut rng, &xs);
                let f_next = spec.reward(s, &xs, &a) + lambda * spec.discount_at(s) * hx;
                total += 0.5 * h * (f_prev + f_next);
                f_prev = f_next;
            }
            total + interpolate(grid, terminal, &xs)
        })
        .collect();
    let n = results.len() as f64;
    let mean = results.iter().sum::<f64>() / n;
    let var = results.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// `J^{ϖ⊗_ε π*}(x)` with its Monte Carlo standard error (zero for the PDE
/// engine). `eps = 0` returns the candidate's own value exactly.
pub fn spike_perturb_value(
    ctx: &EvalContext<'_>,
    cand: &Candidate,
    dev: &DeviationSpec,
    eps: f64,
    x: &[f64],
    engine: &Engine,
    pde_cfg: &PdeSolveConfig,
) -> Result<(f64, f64)> {
    ctx.spec.check_point(x)?;
    let k = if eps == 0.0 {
        0
    } else {
        snap_epsilons(ctx.grid, &[eps])?[0].0
    };
    match engine {
        Engine::Pde => {
            let f = spike_field_pde(ctx, cand, dev, k, pde_cfg)?;
            Ok((interpolate(ctx.grid, &f, x), 0.0))
        }
        Engine::Mc(cfg) => spike_mc(ctx, cand, dev, k, x, cfg),
    }
}

/// Gap curve of one deviation at several start points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapCurve {
    pub deviation: String,
    pub epsilons: Vec<f64>,
    /// `gaps[x][e]`.
    pub gaps: Vec<Vec<f64>>,
    pub limsup: Vec<f64>,
}

/// `max(g(ε₁), g(ε₂), linear extrapolation to 0)` over the two smallest
/// windows `ε₁ < ε₂`.
pub fn limsup_estimate(epsilons: &[f64], gaps: &[f64]) -> f64 {
    let n = gaps.len();
    match n {
        0 => f64::NAN,
        1 => gaps[0],
        _ => {
            let (e1, g1) = (epsilons[n - 1], gaps[n - 1]);
            let (e2, g2) = (epsilons[n - 2], gaps[n - 2]);
            let ext = g1 - e1 * (g2 - g1) / (e2 - e1);
            g1.max(g2).max(ext)
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn equilibrium_gap(
    ctx: &EvalContext<'_>,
    cand: &Candidate,
    dev: &DeviationSpec,
    x_points: &[Vec<f64>],
    eps_grid: &[f64],
    engine: &Engine,
    pde_cfg: &PdeSolveConfig,
) -> Result<GapCurve> {
    let snapped = snap_epsilons(ctx.grid, eps_grid)?;
    for x in x_points {
        ctx.spec.check_point(x)?;
    }
    let base: Vec<f64> = x_points.iter().map(|x| cand.value_at(ctx.grid, x)).collect();
    let mut gaps = vec![Vec::with_capacity(snapped.len()); x_points.len()];
    for &(k, e) in &snapped {
        let vals: Vec<f64> = match engine {
            Engine::Pde => {
                let f = spike_field_pde(ctx, cand, dev, k, pde_cfg)?;
                x_points.iter().map(|x| interpolate(ctx.grid, &f, x)).collect()
            }
            Engine::Mc(cfg) => x_points
                .iter()
                .map(|x| spike_mc(ctx, cand, dev, k, x, cfg).map(|r| r.0))
                .collect::<Result<_>>()?,
        };
        for (xi, v) in vals.iter().enumerate() {
            gaps[xi].push((v - base[xi]) / e);
        }
    }
    let epsilons: Vec<f64> = snapped.iter().map(|s| s.1).collect();
    let limsup = gaps.iter().map(|g| limsup_estimate(&epsilons, g)).collect();
    Ok(GapCurve {
        deviation: dev.name.clone(),
        epsilons,
        gaps,
        limsup,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstOffender {
    pub deviation: String,
    pub x: Vec<f64>,
    pub limsup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub header: String,
    pub candidate: String,
    pub lambda: f64,
    pub tol: f64,
    pub x_points: Vec<Vec<f64>>,
    pub curves: Vec<GapCurve>,
    pub pass: bool,
    pub worst: WorstOffender,
}

impl GapReport {
    /// Rows `deviation,x,eps,gap` (coordinates joined by `;`).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "deviation,x,eps,gap")?;
        for c in &self.curves {
            for (xi, x) in self.x_points.iter().enumerate() {
                let xs: Vec<String> = x.iter().map(|v| format!("{v:e}")).collect();
                for (e, g) in c.epsilons.iter().zip(&c.gaps[xi]) {
                    writeln!(f, "{},{},{e:e},{g:e}", c.deviation, xs.join(";"))?;
                }
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Runs [`equilibrium_gap`] for every deviation; passes iff every limsup
/// estimate is at most `tol`.
#[allow(clippy::too_many_arguments)]
pub fn verify_equilibrium(
    ctx: &EvalContext<'_>,
    cand: &Candidate,
    library: &[DeviationSpec],
    x_points: &[Vec<f64>],
    eps_grid: &[f64],
    tol: f64,
    engine: &Engine,
    pde_cfg: &PdeSolveConfig,
) -> Result<GapReport> {
    if library.is_empty() || x_points.is_empty() {
        return Err(LabError::Parameter("empty deviation library or start-point set".into()));
    }
    let curves = library
        .par_iter()
        .map(|dev| equilibrium_gap(ctx, cand, dev, x_points, eps_grid, engine, pde_cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut worst = WorstOffender {
        deviation: String::new(),
        x: vec![],
        limsup: f64::NEG_INFINITY,
    };
    for c in &curves {
        for (xi, l) in c.limsup.iter().enumerate() {
            if *l > worst.limsup || worst.x.is_empty() {
                worst = WorstOffender {
                    deviation: c.deviation.clone(),
                    x: x_points[xi].clone(),
                    limsup: *l,
                };
            }
        }
    }
    Ok(GapReport {
        header: REPORT_HEADER.into(),
        candidate: cand.label.clone(),
        lambda: cand.lambda,
        tol,
        x_points: x_points.to_vec(),
        pass: curves.iter().all(|c| c.limsup.iter().all(|l| *l <= tol)),
        curves,
        worst,
    })
}

/// Interior grid nodes nearest to `n` points spread evenly over the middle
/// 80% of the first axis (other axes at their centre).
pub fn default_start_points(grid: &Grid, n: usize) -> Vec<Vec<f64>> {
    let lo = grid.lo();
    let hi = grid.hi();
    (0..n)
        .map(|k| {
            let f = if n == 1 {
                0.5
            } else {
                0.1 + 0.8 * k as f64 / (n - 1) as f64
            };
            let x: Vec<f64> = (0..grid.dim())
                .map(|a| {
                    if a == 0 {
                        lo[a] + f * (hi[a] - lo[a])
                    } else {
                        0.5 * (lo[a] + hi[a])
                    }
                })
                .collect();
            grid.point(grid.nearest_node(&x))
        })
        .collect()
}
