//! Value of a fixed feedback policy, computed by a backward θ-scheme for the
//! linear parabolic evaluation PDE and by Feynman–Kac Monte Carlo over the
//! relaxed SDE.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::gibbs::{entropy_unchecked, ActionGrid, NodeTables, PolicyField};
use crate::grid::{finite_diff, Grid, Stencil, ValueField};
use crate::problem::{ProblemSpec, TimeProfile};

/// Sub-, main and super-diagonal of a tridiagonal system.
type Bands = (Vec<f64>, Vec<f64>, Vec<f64>);

/// Settings of the backward PDE solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdeSolveConfig {
    /// 0.5 is Crank–Nicolson, 1 is implicit Euler.
    pub theta: f64,
    /// Relative residual tolerance of the iterative solver (`d = 2`).
    pub linear_tol: f64,
    pub max_linear_iters: usize,
    pub terminal_value: f64,
}

impl Default for PdeSolveConfig {
    fn default() -> Self {
        PdeSolveConfig {
            theta: 1.0,
            linear_tol: 1e-12,
            max_linear_iters: 2000,
            terminal_value: 0.0,
        }
    }
}

impl PdeSolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..=1.0).contains(&self.theta) {
            return Err(LabError::Parameter(format!("theta {} not in [0.5, 1]", self.theta)));
        }
        if !(self.linear_tol > 0.0) || self.max_linear_iters == 0 {
            return Err(LabError::Parameter(
                "linear_tol and max_linear_iters must be positive".into(),
            ));
        }
        if !self.terminal_value.is_finite() {
            return Err(LabError::Parameter("terminal value must be finite".into()));
        }
        Ok(())
    }
}

/// Record of one backward solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub time_steps: usize,
    pub horizon: f64,
    /// `tail_mass(horizon)`, the truncation budget.
    pub tail_mass: f64,
    pub max_linear_iterations: usize,
    pub max_linear_residual: f64,
}

/// Policy-averaged coefficients at every space node.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyAverages {
    pub n_space: usize,
    pub dim: usize,
    /// `b^π(x_i)`, flat `[i * d + axis]`.
    pub drift: Vec<f64>,
    /// `∫ρ_m(x_i, a) π(x_i, da)` per reward piece.
    pub rewards: Vec<Vec<f64>>,
    pub times: Vec<TimeProfile>,
    /// `H(π(x_i))`, zero for atomic policies.
    pub entropy: Vec<f64>,
    /// `σσᵀ(x_i)`.
    pub cov: Vec<f64>,
}

impl PolicyAverages {
    pub fn from_policy(tables: &NodeTables, actions: &ActionGrid, policy: &PolicyField) -> Result<Self> {
        if policy.n_space() != tables.n_space || policy.n_actions() != tables.n_actions {
            return Err(LabError::Shape(format!(
                "policy is {}x{}, tables are {}x{}",
                policy.n_space(),
                policy.n_actions(),
                tables.n_space,
                tables.n_actions
            )));
        }
        let (ns, j_n, d) = (tables.n_space, tables.n_actions, tables.dim);
        let w = actions.weights();
        let mut drift = vec![0.0; ns * d];
        drift.par_chunks_mut(d).enumerate().for_each(|(i, out)| {
            let dens = policy.density(i);
            for (j, (&p, &wj)) in dens.iter().zip(w).enumerate() {
                let m = p * wj;
                if m == 0.0 {
                    continue;
                }
                for (o, b) in out.iter_mut().zip(tables.drift_at(i, j)) {
                    *o += m * b;
                }
            }
        });
        let rewards = tables
            .kernels
            .iter()
            .map(|k| {
                (0..ns)
                    .into_par_iter()
                    .map(|i| policy.average(i, actions, &k[i * j_n..(i + 1) * j_n]))
                    .collect()
            })
            .collect();
        let entropy = if policy.is_atomic() {
            vec![0.0; ns]
        } else {
            (0..ns)
                .into_par_iter()
                .map(|i| entropy_unchecked(policy.density(i), w))
                .collect()
        };
        Ok(PolicyAverages {
            n_space: ns,
            dim: d,
            drift,
            rewards,
            times: tables.times.clone(),
            entropy,
            cov: tables.cov.clone(),
        })
    }

    /// Coefficients of the fixed action `action(i)` at each node (zero
    /// entropy).
    pub fn from_actions<F: Fn(usize) -> Vec<f64>>(spec: &ProblemSpec, grid: &Grid, action: F) -> Result<Self> {
        let ns = grid.n_space();
        let d = grid.dim();
        let mut drift = vec![0.0; ns * d];
        let mut rewards = vec![vec![0.0; ns]; spec.reward_pieces().len()];
        let mut cov = Vec::with_capacity(ns * d * d);
        for i in 0..ns {
            let x = grid.point(i);
            let a = action(i);
            spec.check_action(&a)?;
            spec.drift_into(&x, &a, &mut drift[i * d..(i + 1) * d]);
            for (m, piece) in spec.reward_pieces().iter().enumerate() {
                rewards[m][i] = (piece.kernel)(&x, &a);
            }
            cov.extend(spec.covariance(&x));
        }
        Ok(PolicyAverages {
            n_space: ns,
            dim: d,
            drift,
            rewards,
            times: spec.reward_pieces().iter().map(|p| p.time).collect(),
            entropy: vec![0.0; ns],
            cov,
        })
    }

    /// `r^π(t, x_i)`.
    #[inline]
    pub fn reward_at(&self, t: f64, i: usize) -> f64 {
        self.times
            .iter()
            .zip(&self.rewards)
            .map(|(tp, r)| tp.value(t) * r[i])
            .sum()
    }

    /// `r^π(t, ·) + λ δ(t) H(π(·))` into `out`.
    pub fn source(&self, t: f64, discount: &TimeProfile, lambda: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (tp, r) in self.times.iter().zip(&self.rewards) {
            let c = tp.value(t);
            if c != 0.0 {
                out.iter_mut().zip(r).for_each(|(o, r)| *o += c * r);
            }
        }
        let e = lambda * discount.value(t);
        if e != 0.0 {
            out.iter_mut().zip(&self.entropy).for_each(|(o, h)| *o += e * h);
        }
    }
}

/// Sparse rows of the spatial operator `L = ½tr(C D²) + b·D`.
struct Operator {
    rows: Vec<Vec<(usize, f64)>>,
}

impl Operator {
    fn assemble(grid: &Grid, avg: &PolicyAverages) -> Self {
        let d = grid.dim();
        let rows = (0..grid.n_space())
            .into_par_iter()
            .map(|i| {
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(9);
                let mut add = |st: Stencil, c: f64| {
                    if c == 0.0 {
                        return;
                    }
                    for (j, w) in st.entries() {
                        match row.iter_mut().find(|(k, _)| *k == j) {
                            Some(e) => e.1 += c * w,
                            None => row.push((j, c * w)),
                        }
                    }
                };
                for a in 0..d {
                    add(grid.grad_stencil(i, a), avg.drift[i * d + a]);
                }
                let c = &avg.cov[i * d * d..(i + 1) * d * d];
                for a in 0..d {
                    for b in 0..d {
                        add(grid.hess_stencil(i, a, b), 0.5 * c[a * d + b]);
                    }
                }
                row.sort_by_key(|e| e.0);
                row
            })
            .collect();
        Operator { rows }
    }

    fn apply(&self, u: &[f64], out: &mut [f64]) {
        out.par_iter_mut().zip(&self.rows).for_each(|(o, row)| {
            *o = row.iter().map(|(j, w)| w * u[*j]).sum();
        });
    }

    /// Tridiagonal bands `(sub, diag, sup)` of `I - s·L` (`d = 1` only).
    fn bands(&self, s: f64) -> Bands {
        let n = self.rows.len();
        let (mut lo, mut di, mut up) = (vec![0.0; n], vec![1.0; n], vec![0.0; n]);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                if j == i {
                    di[i] -= s * w;
                } else if j + 1 == i {
                    lo[i] -= s * w;
                } else if j == i + 1 {
                    up[i] -= s * w;
                }
            }
        }
        (lo, di, up)
    }
}

fn thomas(lo: &[f64], di: &[f64], up: &[f64], rhs: &mut [f64]) {
    let n = di.len();
    let mut c = vec![0.0; n];
    let mut beta = di[0];
    c[0] = up[0] / beta;
    rhs[0] /= beta;
    for i in 1..n {
        beta = di[i] - lo[i] * c[i - 1];
        c[i] = up[i] / beta;
        rhs[i] = (rhs[i] - lo[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
}

/// Jacobi-preconditioned BiCGSTAB for `(I - s·L) x = b`; `x` holds the
/// initial guess. Returns `(iterations, relative residual)`.
fn bicgstab(op: &Operator, s: f64, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> (usize, f64) {
    let n = b.len();
    let diag: Vec<f64> = op
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| 1.0 - s * row.iter().find(|e| e.0 == i).map_or(0.0, |e| e.1))
        .collect();
    let mut tmp = vec![0.0; n];
    let matvec = |v: &[f64], out: &mut [f64], tmp: &mut [f64]| {
        op.apply(v, tmp);
        for i in 0..n {
            out[i] = v[i] - s * tmp[i];
        }
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let bnorm = dot(b, b).sqrt().max(1e-300);
    let mut r = vec![0.0; n];
    matvec(x, &mut r, &mut tmp);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let r0 = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut sv = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut res = dot(&r, &r).sqrt() / bnorm;
    if res <= tol {
        return (0, res);
    }
    for it in 1..=max_iter {
        let rho_new = dot(&r0, &r);
        if rho_new == 0.0 {
            return (it, res);
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            y[i] = p[i] / diag[i];
        }
        matvec(&y, &mut v, &mut tmp);
        alpha = rho / dot(&r0, &v);
        for i in 0..n {
            sv[i] = r[i] - alpha * v[i];
        }
        if dot(&sv, &sv).sqrt() / bnorm <= tol {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            return (it, dot(&sv, &sv).sqrt() / bnorm);
        }
        for i in 0..n {
            z[i] = sv[i] / diag[i];
        }
        matvec(&z, &mut t, &mut tmp);
        omega = dot(&t, &sv) / dot(&t, &t);
        for i in 0..n {
            x[i] += alpha * y[i] + omega * z[i];
            r[i] = sv[i] - omega * t[i];
        }
        res = dot(&r, &r).sqrt() / bnorm;
        if res <= tol {
            return (it, res);
        }
    }
    (max_iter, res)
}

/// Backward θ-scheme on time nodes `0..=k_end` from `terminal` at `t_{k_end}`.
/// Returns values laid out time-major over those nodes.
pub fn solve_backward(
    grid: &Grid,
    avg: &PolicyAverages,
    discount: &TimeProfile,
    lambda: f64,
    k_end: usize,
    terminal: &[f64],
    cfg: &PdeSolveConfig,
) -> Result<(Vec<f64>, SolveDiagnostics)> {
    cfg.validate()?;
    let ns = grid.n_space();
    if avg.n_space != ns || terminal.len() != ns {
        return Err(LabError::Shape(
            "averages or terminal data do not match the grid".into(),
        ));
    }
    if k_end == 0 || k_end >= grid.n_time() {
        return Err(LabError::Parameter(format!("bad end index {k_end}")));
    }
    let op = Operator::assemble(grid, avg);
    let t = grid.t_nodes();
    let theta = cfg.theta;
    let mut out = vec![0.0; (k_end + 1) * ns];
    out[k_end * ns..].copy_from_slice(terminal);
    let mut s_next = vec![0.0; ns];
    let mut s_now = vec![0.0; ns];
    let mut lu = vec![0.0; ns];
    let mut rhs = vec![0.0; ns];
    avg.source(t[k_end], discount, lambda, &mut s_next);
    let mut max_iters = 0;
    let mut max_res: f64 = 0.0;
    let mut band_cache: Option<(f64, Bands)> = None;
    for k in (0..k_end).rev() {
        let h = t[k + 1] - t[k];
        avg.source(t[k], discount, lambda, &mut s_now);
        let (head, tail) = out.split_at_mut((k + 1) * ns);
        let u_next = &tail[..ns];
        let u_now = &mut head[k * ns..];
        if theta < 1.0 {
            op.apply(u_next, &mut lu);
        }
        for i in 0..ns {
            rhs[i] = u_next[i] + h * ((1.0 - theta) * lu[i] + theta * s_now[i] + (1.0 - theta) * s_next[i]);
        }
        let s = h * theta;
        if grid.dim() == 1 {
            let fresh = match &band_cache {
                Some((cs, _)) => *cs != s,
                None => true,
            };
            if fresh {
                band_cache = Some((s, op.bands(s)));
            }
            let (lo, di, up) = &band_cache.as_ref().unwrap().1;
            thomas(lo, di, up, &mut rhs);
            u_now.copy_from_slice(&rhs);
        } else {
            u_now.copy_from_slice(u_next);
            let (iters, res) = bicgstab(&op, s, &rhs, u_now, cfg.linear_tol, cfg.max_linear_iters);
            max_iters = max_iters.max(iters);
            max_res = max_res.max(res);
            if !(res <= cfg.linear_tol) {
                return Err(LabError::Solver {
                    time_index: k,
                    residual: res,
                    iterations: iters,
                });
            }
        }
        if u_now.iter().any(|v| !v.is_finite()) {
            return Err(LabError::Solver {
                time_index: k,
                residual: f64::INFINITY,
                iterations: max_iters,
            });
        }
        std::mem::swap(&mut s_now, &mut s_next);
    }
    Ok((
        out,
        SolveDiagnostics {
            time_steps: k_end,
            horizon: t[k_end],
            tail_mass: f64::NAN,
            max_linear_iterations: max_iters,
            max_linear_residual: max_res,
        },
    ))
}

/// Context shared by repeated evaluations on one grid.
#[derive(Debug, Clone)]
pub struct EvalContext<'a> {
    pub spec: &'a ProblemSpec,
    pub grid: &'a Grid,
    pub actions: &'a ActionGrid,
    pub tables: NodeTables,
}

impl<'a> EvalContext<'a> {
    pub fn new(spec: &'a ProblemSpec, grid: &'a Grid, actions: &'a ActionGrid) -> Result<Self> {
        Ok(EvalContext {
            spec,
            grid,
            actions,
            tables: NodeTables::build(spec, grid, actions)?,
        })
    }
}

fn check_policy_lambda(policy: &PolicyField, actions: &ActionGrid, lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(LabError::Parameter(format!(
            "temperature {lambda} must be finite and >= 0"
        )));
    }
    if policy.is_atomic() && lambda > 0.0 {
        return Err(LabError::Contract(
            "atomic policy has no entropy; temperature must be 0".into(),
        ));
    }
    policy.validate(actions, 1e-8)?;
    if lambda > 0.0 && policy.densities().iter().any(|p| *p <= 0.0) {
        return Err(LabError::Contract(
            "entropy term needs a strictly positive policy".into(),
        ));
    }
    Ok(())
}

/// `V^π_λ` on the whole grid with derivatives populated, plus diagnostics.
pub fn evaluate_policy_pde_with(
    ctx: &EvalContext<'_>,
    policy: &PolicyField,
    lambda: f64,
    cfg: &PdeSolveConfig,
) -> Result<(ValueField, SolveDiagnostics)> {
    check_policy_lambda(policy, ctx.actions, lambda)?;
    let avg = PolicyAverages::from_policy(&ctx.tables, ctx.actions, policy)?;
    let grid = ctx.grid;
    let terminal = vec![cfg.terminal_value; grid.n_space()];
    let (vals, mut diag) = solve_backward(
        grid,
        &avg,
        &ctx.spec.discount,
        lambda,
        grid.n_time() - 1,
        &terminal,
        cfg,
    )?;
    diag.tail_mass = ctx.spec.tail_mass(grid.horizon())?;
    let field = finite_diff(&ValueField::new(grid, vals)?, grid)?;
    Ok((field, diag))
}

/// `V^π_λ` on the whole grid with derivatives populated.
pub fn evaluate_policy_pde(
    spec: &ProblemSpec,
    grid: &Grid,
    actions: &ActionGrid,
    policy: &PolicyField,
    lambda: f64,
    cfg: &PdeSolveConfig,
) -> Result<ValueField> {
    let ctx = EvalContext::new(spec, grid, actions)?;
    Ok(evaluate_policy_pde_with(&ctx, policy, lambda, cfg)?.0)
}

/// Pointwise residual of the evaluation PDE with its sup over interior nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    /// Time-major, zero on boundary nodes.
    pub field: Vec<f64>,
    pub sup: f64,
    /// Sup over interior nodes at `t = 0`.
    pub sup_t0: f64,
}

/// `∂_t u + ½tr(σσᵀD²u) + b^π·Du + r^π + λδH(π)` at interior nodes.
pub fn pde_residual_avg(
    grid: &Grid,
    u: &ValueField,
    avg: &PolicyAverages,
    discount: &TimeProfile,
    lambda: f64,
) -> Result<Residual> {
    u.check_grid(grid)?;
    let der = u.derivatives()?;
    let (ns, d) = (grid.n_space(), grid.dim());
    let interior: Vec<bool> = (0..ns).map(|i| grid.is_interior(i)).collect();
    let mut field = vec![0.0; grid.len()];
    field.par_chunks_mut(ns).enumerate().for_each(|(k, row)| {
        let t = grid.t_nodes()[k];
        let mut src = vec![0.0; ns];
        avg.source(t, discount, lambda, &mut src);
        for i in 0..ns {
            if !interior[i] {
                continue;
            }
            let at = k * ns + i;
            let mut v = der.dt[at] + src[i];
            let c = &avg.cov[i * d * d..(i + 1) * d * d];
            for a in 0..d {
                v += avg.drift[i * d + a] * der.grad[a][at];
                for b in 0..d {
                    v += 0.5 * c[a * d + b] * der.hess[a * d + b][at];
                }
            }
            row[i] = v;
        }
    });
    let sup = field.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let sup_t0 = field[..ns].iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    Ok(Residual { field, sup, sup_t0 })
}

pub fn pde_residual(
    spec: &ProblemSpec,
    grid: &Grid,
    actions: &ActionGrid,
    u: &ValueField,
    policy: &PolicyField,
    lambda: f64,
) -> Result<Residual> {
    let tables = NodeTables::build(spec, grid, actions)?;
    let avg = PolicyAverages::from_policy(&tables, actions, policy)?;
    pde_residual_avg(grid, u, &avg, &spec.discount, lambda)
}

// ── Monte Carlo ──────────────────────────────────────────────────────────

/// Settings of the Feynman–Kac estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    pub n_paths: usize,
    /// Initial Euler step.
    pub dt_sim: f64,
    /// Steps grow as `dt_sim + step_growth · s`, capped at `max_step`.
    pub step_growth: f64,
    pub max_step: f64,
    pub rng_seed: u64,
    /// Reflect paths at the box boundary; otherwise project onto the box.
    pub reflect: bool,
    /// The path horizon leaves a remaining tail mass below
    /// `0.1 · target_precision`.
    pub target_precision: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            n_paths: 10_000,
            dt_sim: 0.005,
            step_growth: 0.002,
            max_step: 5.0,
            rng_seed: 7,
            reflect: true,
            target_precision: 5e-3,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths < 100 {
            return Err(LabError::Parameter(format!("n_paths {} below 100", self.n_paths)));
        }
        if !(self.dt_sim > 0.0
            && self.step_growth >= 0.0
            && self.max_step >= self.dt_sim
            && self.target_precision > 0.0)
        {
            return Err(LabError::Parameter(
                "dt_sim and target_precision must be positive and max_step at least dt_sim".into(),
            ));
        }
        Ok(())
    }
}

/// Monte Carlo estimate with diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub horizon: f64,
    pub steps: usize,
    /// Boundary reflections summed over all paths.
    pub reflections: u64,
}

/// Grid nodes and weights for multilinear interpolation at `x`.
pub fn interp_weights(grid: &Grid, x: &[f64]) -> [(usize, f64); 4] {
    let d = grid.dim();
    let mut out = [(0usize, 0.0); 4];
    let mut base = [0usize; 2];
    let mut frac = [0.0; 2];
    for a in 0..d {
        let n = grid.shape()[a];
        let s = ((x[a] - grid.lo()[a]) / grid.dx()[a]).clamp(0.0, (n - 1) as f64);
        let j = (s.floor() as usize).min(n - 2);
        base[a] = j;
        frac[a] = s - j as f64;
    }
    let stride1 = if d == 2 { grid.shape()[1] } else { 1 };
    for (c, o) in out.iter_mut().enumerate().take(1 << d) {
        let mut idx = 0;
        let mut w = 1.0;
        for a in 0..d {
            let bit = (c >> a) & 1;
            let j = base[a] + bit;
            idx += if a == 0 && d == 2 { j * stride1 } else { j };
            w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        *o = (idx, w);
    }
    out
}

/// Action sampling from a policy interpolated linearly between grid nodes:
/// a node is drawn with its interpolation weight, then an action node from
/// that node's quadrature masses `w_j π_j`.
pub(crate) struct DensitySampler {
    cdf: Vec<f64>,
    entropy: Vec<f64>,
    j_n: usize,
}

impl DensitySampler {
    pub(crate) fn new(grid: &Grid, actions: &ActionGrid, policy: &PolicyField) -> Result<Self> {
        if policy.n_space() != grid.n_space() || policy.n_actions() != actions.len() {
            return Err(LabError::Shape("policy does not match grid".into()));
        }
        let j_n = actions.len();
        let ns = grid.n_space();
        let mut cdf = vec![0.0; ns * j_n];
        for i in 0..ns {
            let mut acc = 0.0;
            for (j, (&p, &w)) in policy.density(i).iter().zip(actions.weights()).enumerate() {
                acc += p * w;
                cdf[i * j_n + j] = acc;
            }
            for c in &mut cdf[i * j_n..(i + 1) * j_n] {
                *c /= acc;
            }
        }
        let entropy = (0..ns).map(|i| policy.entropy_at(i, actions)).collect::<Result<_>>()?;
        Ok(DensitySampler { cdf, entropy, j_n })
    }

    pub(crate) fn draw_node<R: Rng>(grid: &Grid, rng: &mut R, x: &[f64]) -> usize {
        let iw = interp_weights(grid, x);
        let mut u: f64 = rng.random();
        let mut node = iw[0].0;
        for &(i, w) in iw.iter().take(1 << grid.dim()) {
            node = i;
            if u < w {
                break;
            }
            u -= w;
        }
        node
    }

    pub(crate) fn draw<R: Rng>(&self, grid: &Grid, rng: &mut R, x: &[f64]) -> usize {
        let node = Self::draw_node(grid, rng, x);
        let v: f64 = rng.random();
        let row = &self.cdf[node * self.j_n..(node + 1) * self.j_n];
        row.partition_point(|&c| c < v).min(self.j_n - 1)
    }

    pub(crate) fn entropy(&self, grid: &Grid, x: &[f64]) -> f64 {
        interpolate(grid, &self.entropy, x)
    }
}

/// Multilinear interpolation of a nodal array at `x`.
pub fn interpolate(grid: &Grid, f: &[f64], x: &[f64]) -> f64 {
    interp_weights(grid, x)
        .iter()
        .take(1 << grid.dim())
        .map(|&(i, w)| w * f[i])
        .sum()
}

/// Reflects (or projects) `x` back into the box; returns the number of
/// boundary events.
pub fn reflect_into(x: &mut [f64], lo: &[f64], hi: &[f64], reflect: bool) -> u64 {
    let mut count = 0;
    for a in 0..x.len() {
        if reflect {
            while x[a] < lo[a] || x[a] > hi[a] {
                x[a] = if x[a] < lo[a] {
                    2.0 * lo[a] - x[a]
                } else {
                    2.0 * hi[a] - x[a]
                };
                count += 1;
            }
        } else if x[a] < lo[a] || x[a] > hi[a] {
            x[a] = x[a].clamp(lo[a], hi[a]);
            count += 1;
        }
    }
    count
}

/// Simulates `dX = b(X, a)ds + σ(X)dW` with actions drawn each step from the
/// policy density interpolated linearly between grid nodes, accumulating
/// `∫ [r(t+s, X, a) + δ(t+s) λ H(π(X))] ds` by the trapezoid rule.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy_mc(
    spec: &ProblemSpec,
    grid: &Grid,
    actions: &ActionGrid,
    policy: &PolicyField,
    lambda: f64,
    t: f64,
    x: &[f64],
    cfg: &McConfig,
) -> Result<McEstimate> {
    cfg.validate()?;
    check_policy_lambda(policy, actions, lambda)?;
    spec.check_point(x)?;
    if !(t >= 0.0) {
        return Err(LabError::Parameter(format!("start time {t} must be >= 0")));
    }
    if policy.n_space() != grid.n_space() {
        return Err(LabError::Shape("policy does not match grid".into()));
    }
    let sampler = DensitySampler::new(grid, actions, policy)?;

    let zero_integrand =
        spec.reward_pieces().is_empty() && (lambda == 0.0 || matches!(spec.discount, TimeProfile::Zero));
    let tail_target = 0.1 * cfg.target_precision;
    let horizon = if zero_integrand {
        0.0
    } else {
        let mut s = 1.0;
        while spec.tail_mass(t + s)? >= tail_target {
            s *= 2.0;
            if s > 1e9 {
                return Err(LabError::Assumption("tail mass does not fall below target".into()));
            }
        }
        s
    };
    let mut steps = vec![0.0];
    while *steps.last().unwrap() < horizon {
        let s = *steps.last().unwrap();
        steps.push((s + (cfg.dt_sim + cfg.step_growth * s).min(cfg.max_step)).min(horizon));
    }
    let n_steps = steps.len() - 1;
    let d = spec.dim;
    let m = spec.noise_dim;
    let lo = grid.lo().to_vec();
    let hi = grid.hi();
    let rate: Vec<f64> = steps.iter().map(|s| lambda * spec.discount_at(t + s)).collect();

    let results: Vec<(f64, u64)> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
            rng.set_stream(path as u64);
            let mut xs = x.to_vec();
            let mut b = vec![0.0; d];
            let mut sig = vec![0.0; d * m];
            let mut dw = vec![0.0; m];
            let mut total = 0.0;
            let mut reflections = 0;
            let mut a_idx = sampler.draw(grid, &mut rng, &xs);
            let mut f_prev = spec.reward(t, &xs, &actions.nodes()[a_idx]) + rate[0] * sampler.entropy(grid, &xs);
            for n in 0..n_steps {
                let h = steps[n + 1] - steps[n];
                let a = &actions.nodes()[a_idx];
                spec.drift_into(&xs, a, &mut b);
                spec.diffusion_into(&xs, &mut sig);
                let sq = h.sqrt();
                for w in dw.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *w = z * sq;
                }
                for i in 0..d {
                    let noise: f64 = (0..m).map(|k| sig[i * m + k] * dw[k]).sum();
                    xs[i] += b[i] * h + noise;
                }
                reflections += reflect_into(&mut xs, &lo, &hi, cfg.reflect);
                a_idx = sampler.draw(grid, &mut rng, &xs);
                let f_next = spec.reward(t + steps[n + 1], &xs, &actions.nodes()[a_idx])
                    + rate[n + 1] * sampler.entropy(grid, &xs);
                total += 0.5 * h * (f_prev + f_next);
                f_prev = f_next;
            }
            (total, reflections)
        })
        .collect();
    let n = results.len() as f64;
    let mut sum = 0.0;
    let mut reflections = 0;
    for (v, r) in &results {
        sum += v;
        reflections += r;
    }
    let mean = sum / n;
    let var = results.iter().map(|(v, _)| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(McEstimate {
        estimate: mean,
        std_error: (var / n).sqrt(),
        n_paths: cfg.n_paths,
        horizon,
        steps: n_steps,
        reflections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gibbs::ActionRule;
    use crate::grid::{graded_times, BoundaryMode, GridConfig};

    use crate::problem::catalog;

    fn setup(name: &str, cfg: GridConfig) -> (ProblemSpec, Grid, ActionGrid) {
        let spec = catalog(name).unwrap();
        let grid = cfg.build(&spec).unwrap();
        let ag = ActionGrid::for_spec(&spec, 21, ActionRule::Lobatto).unwrap();
        (spec, grid, ag)
    }

    #[test]
    fn zero_problem_has_zero_value() {
        let (spec, grid, ag) = setup(
            "zero",
            GridConfig {
                horizon: Some(5.0),
                nx: vec![21],
                ..GridConfig::default()
            },
        );
        let pol = PolicyField::uniform(grid.n_space(), &ag);
        let v = evaluate_policy_pde(&spec, &grid, &ag, &pol, 0.7, &PdeSolveConfig::default()).unwrap();
        assert!(v.values().iter().all(|&x| x == 0.0));
        let res = pde_residual(&spec, &grid, &ag, &v, &pol, 0.7).unwrap();
        assert_eq!(res.sup, 0.0);
    }

    #[test]
    fn d0_matches_closed_form_with_crank_nicolson() {
        let (spec, grid, ag) = setup(
            "D0",
            GridConfig {
                nx: vec![21],
                dt: 0.01,
                grading: 0.02,
                ..GridConfig::default()
            },
        );
        let pol = PolicyField::uniform(grid.n_space(), &ag);
        let cfg = PdeSolveConfig {
            theta: 0.5,
            ..PdeSolveConfig::default()
        };
        let v = evaluate_policy_pde(&spec, &grid, &ag, &pol, 0.3, &cfg).unwrap();
        let mut err = 0.0_f64;
        for (k, &t) in grid.t_nodes().iter().enumerate() {
            for i in 0..grid.n_space() {
                err = err.max((v.at(k, i) - 1.0 / (1.0 + t)).abs());
            }
        }
        assert!(err <= 1e-3, "{err}");
    }

    #[test]
    fn heat_sine_amplitude() {
        let spec = catalog("heat_sine").unwrap();
        let grid = GridConfig {
            nx: vec![81],
            dt: 0.01,
            grading: 0.02,
            ..GridConfig::default()
        }
        .build(&spec)
        .unwrap();
        let ag = ActionGrid::for_spec(&spec, 5, ActionRule::Lobatto).unwrap();
        let pol = PolicyField::uniform(grid.n_space(), &ag);
        let cfg = PdeSolveConfig {
            theta: 0.5,
            ..PdeSolveConfig::default()
        };
        let v = evaluate_policy_pde(&spec, &grid, &ag, &pol, 0.0, &cfg).unwrap();
        // ∫_0^∞ e^{-s}(1+s)^{-2} ds by quadrature.
        let amp = crate::quadrature::tail_integral(&|s: f64| (-s).exp() / (1.0 + s).powi(2), 0.0).unwrap();
        assert!((amp - 0.40365).abs() < 1e-4, "{amp}");
        let mut err = 0.0_f64;
        for i in 0..grid.n_space() {
            err = err.max((v.at(0, i) - amp * grid.coord(i, 0).sin()).abs());
        }
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn perturbation_shifts_residual_by_stencil_weight() {
        let (spec, grid, ag) = setup(
            "R1",
            GridConfig {
                nx: vec![41],
                horizon: Some(4.0),
                dt: 0.05,
                ..GridConfig::default()
            },
        );
        let pol = PolicyField::uniform(grid.n_space(), &ag);
        let v = evaluate_policy_pde(&spec, &grid, &ag, &pol, 0.0, &PdeSolveConfig::default()).unwrap();
        let base = pde_residual(&spec, &grid, &ag, &v, &pol, 0.0).unwrap();
        let eps = 1e-6;
        let i = 20;
        let mut vals = v.values().to_vec();
        vals[i] += eps;
        let pert = finite_diff(&ValueField::new(&grid, vals).unwrap(), &grid).unwrap();
        let res = pde_residual(&spec, &grid, &ag, &pert, &pol, 0.0).unwrap();
        let change = (res.field[i] - base.field[i]).abs();
        let h = grid.dx()[0];
        let expect = eps * (1.0 / grid.t_nodes()[1] + 1.0 / (h * h));
        assert!(change > expect / 2.0 && change < expect * 2.0, "{change} vs {expect}");
    }

    #[test]
    fn larger_source_never_lowers_solution() {
        let spec = catalog("R1").unwrap();
        let grid = Grid::new(
            graded_times(3.0, 0.05, 1.0, 0.1).unwrap(),
            &spec.domain,
            &[31],
            BoundaryMode::Neumann,
        )
        .unwrap();
        let ag = ActionGrid::for_spec(&spec, 11, ActionRule::Lobatto).unwrap();
        let tables = NodeTables::build(&spec, &grid, &ag).unwrap();
        let pol = PolicyField::uniform(grid.n_space(), &ag);
        let mut avg = PolicyAverages::from_policy(&tables, &ag, &pol).unwrap();
        let cfg = PdeSolveConfig::default();
        let term = vec![0.0; grid.n_space()];
        let (a, _) = solve_backward(&grid, &avg, &spec.discount, 0.0, grid.n_time() - 1, &term, &cfg).unwrap();
        for (i, r) in avg.rewards[0].iter_mut().enumerate() {
            *r += 0.01 * ((i * 7) % 5) as f64;
        }
        let (b, _) = solve_backward(&grid, &avg, &spec.discount, 0.0, grid.n_time() - 1, &term, &cfg).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| y >= x));
    }

    #[test]
    fn atomic_policy_requires_zero_temperature() {
        let (spec, grid, ag) = setup(
            "D0",
            GridConfig {
                nx: vec![11],
                horizon: Some(1.0),
                ..GridConfig::default()
            },
        );
        let pol = PolicyField::atoms(grid.n_space(), &ag, |_| vec![0]);
        let err = evaluate_policy_pde(&spec, &grid, &ag, &pol, 0.5, &PdeSolveConfig::default()).unwrap_err();
        assert!(matches!(err, LabError::Contract(_)));
        assert!(evaluate_policy_pde(&spec, &grid, &ag, &pol, 0.0, &PdeSolveConfig::default()).is_ok());
    }

    #[test]
    fn two_dimensional_solve_uses_iterative_solver() {
        use crate::problem::{CustomProblem, RewardPieceConfig, Term};
        let fam = CustomProblem {
            domain_lo: vec![-1.0, -1.0],
            domain_hi: vec![1.0, 1.0],
            action_lo: vec![0.0],
            action_hi: vec![1.0],
            noise_dim: None,
            drift: vec![vec![], vec![]],
            diffusion: vec![vec![Term::constant(1.0)], vec![], vec![], vec![Term::constant(1.0)]],
            reward: vec![RewardPieceConfig {
                time: TimeProfile::Power {
                    scale: 1.0,
                    shift: 1.0,
                    power: 2.0,
                },
                terms: vec![Term::constant(1.0)],
            }],
            discount: TimeProfile::Exponential { scale: 1.0, rate: 1.0 },
        };
        let spec = fam.build("flat2d", BoundaryMode::Neumann).unwrap();
        let grid = Grid::new(
            graded_times(50.0, 0.05, 1.0, 0.02).unwrap(),
            &spec.domain,
            &[9, 9],
            BoundaryMode::Neumann,
        )
        .unwrap();
        let ag = ActionGrid::for_spec(&spec, 5, ActionRule::Lobatto).unwrap();
        let ctx = EvalContext::new(&spec, &grid, &ag).unwrap();
        let pol = PolicyField::uniform(grid.n_space(), &ag);
        let cfg = PdeSolveConfig {
            theta: 0.5,
            ..PdeSolveConfig::default()
        };
        let (v, diag) = evaluate_policy_pde_with(&ctx, &pol, 0.0, &cfg).unwrap();
        assert!(diag.max_linear_iterations >= 1);
        assert!(diag.max_linear_residual <= cfg.linear_tol);
        // Exact value is 1/(1+t) minus the truncated tail 1/(1+T).
        assert!((v.at(0, 40) - (1.0 - 1.0 / 51.0)).abs() < 1e-3, "{}", v.at(0, 40));
    }

    #[test]
    fn mc_zero_and_d0() {
        let (spec, grid, ag) = setup(
            "zero",
            GridConfig {
                nx: vec![11],
                horizon: Some(1.0),
                ..GridConfig::default()
            },
        );
        let pol = PolicyField::uniform(grid.n_space(), &ag);
        let est = evaluate_policy_mc(&spec, &grid, &ag, &pol, 0.0, 0.0, &[0.0], &McConfig::default()).unwrap();
        assert_eq!((est.estimate, est.std_error), (0.0, 0.0));

        let (spec, grid, ag) = setup(
            "D0",
            GridConfig {
                nx: vec![11],
                horizon: Some(1.0),
                ..GridConfig::default()
            },
        );
        let pol = PolicyField::uniform(grid.n_space(), &ag);
        let cfg = McConfig {
            n_paths: 200,
            ..McConfig::default()
        };
        let est = evaluate_policy_mc(&spec, &grid, &ag, &pol, 0.0, 0.0, &[0.0], &cfg).unwrap();
        // Truncation leaves tail < 5e-4 and the trapezoid error is O(dt²).
        assert!((est.estimate - 1.0).abs() <= 3.0 * est.std_error + 1e-3, "{est:?}");
        let again = evaluate_policy_mc(&spec, &grid, &ag, &pol, 0.0, 0.0, &[0.0], &cfg).unwrap();
        assert_eq!(est.estimate.to_bits(), again.estimate.to_bits());
    }
}
