//! Damped Picard iteration of `Φ_λ(w) = V^{Γ_λ(D_x w(0,·))}` and residuals of
//! the exploratory equilibrium HJB system.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::evaluation::{evaluate_policy_pde_with, pde_residual_avg, EvalContext, PdeSolveConfig, PolicyAverages};
use crate::gibbs::{gibbs_policy, hard_max_from_exponents, softmax_from_exponents, PolicyField};
use crate::grid::{slice_grad, slice_trace, weighted_global_norm, NormConfig, ValueField};

/// Norm used for the convergence test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormChoice {
    #[default]
    Sup,
    WeightedGlobal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixedPointConfig {
    pub damping: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub norm: NormChoice,
    /// Hölder exponent and cylinder count of the weighted-global norm.
    pub norm_alpha: f64,
    pub norm_n_max: usize,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        FixedPointConfig {
            damping: 0.5,
            max_iters: 200,
            tol: 1e-6,
            norm: NormChoice::Sup,
            norm_alpha: 0.5,
            norm_n_max: 4,
        }
    }
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(LabError::Parameter(format!("damping {} not in (0, 1]", self.damping)));
        }
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(LabError::Parameter(
                "tol must be positive and max_iters at least 1".into(),
            ));
        }
        Ok(())
    }

    fn distance(&self, a: &ValueField, b: &ValueField, ctx: &EvalContext<'_>) -> Result<f64> {
        match self.norm {
            NormChoice::Sup => Ok(a.sup_diff(b)),
            NormChoice::WeightedGlobal => {
                let diff: Vec<f64> = a.values().iter().zip(b.values()).map(|(x, y)| x - y).collect();
                let cfg = NormConfig::new(self.norm_alpha, ctx.grid.dim(), self.norm_n_max)?;
                weighted_global_norm(&ValueField::new(ctx.grid, diff)?, ctx.grid, &cfg)
            }
        }
    }
}

/// Residuals of the equilibrium system, sup and 99th percentile over
/// interior nodes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HjbResidual {
    pub res_t0: f64,
    pub res_field: f64,
    pub res_t0_p99: f64,
    pub res_field_p99: f64,
}

/// One row of the iteration log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub norm: f64,
    pub res_t0: f64,
    pub res_field: f64,
}

#[derive(Debug, Clone)]
pub struct EquilibriumResult {
    pub value: ValueField,
    pub policy: PolicyField,
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Distance between successive images `Φ(w_k)`, `Φ(w_{k-1})`.
    pub residual_history: Vec<f64>,
    pub records: Vec<IterationRecord>,
    /// `‖Φ(v) − v‖` of the returned value.
    pub fixed_point_defect: f64,
    pub residual: HjbResidual,
}

impl EquilibriumResult {
    pub fn eehjb_residual_t0(&self) -> f64 {
        self.residual.res_t0
    }

    pub fn eehjb_residual_field(&self) -> f64 {
        self.residual.res_field
    }

    pub fn summary(&self) -> EquilibriumSummary {
        EquilibriumSummary {
            lambda: self.lambda,
            iterations: self.iterations,
            converged: self.converged,
            final_norm: self.residual_history.last().copied().unwrap_or(f64::NAN),
            fixed_point_defect: self.fixed_point_defect,
            residual: self.residual,
        }
    }

    /// Writes `iter,norm,res_t0,res_field`.
    pub fn write_history_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "iter,norm,res_t0,res_field")?;
        for r in &self.records {
            writeln!(f, "{},{:e},{:e},{:e}", r.iter, r.norm, r.res_t0, r.res_field)?;
        }
        f.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSummary {
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_norm: f64,
    pub fixed_point_defect: f64,
    pub residual: HjbResidual,
}

fn t0_gradients(ctx: &EvalContext<'_>, w: &ValueField) -> Result<Vec<Vec<f64>>> {
    w.check_grid(ctx.grid)?;
    let (ns, d) = (ctx.grid.n_space(), ctx.grid.dim());
    let u0 = w.slice(0);
    let mut grad = vec![vec![0.0; ns]; d];
    let mut p = vec![0.0; d];
    for i in 0..ns {
        slice_grad(ctx.grid, u0, i, &mut p);
        for a in 0..d {
            grad[a][i] = p[a];
        }
    }
    Ok(grad)
}

/// `Γ_λ(x, D_x w(0, x))` at every node.
pub fn policy_from_value(ctx: &EvalContext<'_>, w: &ValueField, lambda: f64) -> Result<PolicyField> {
    let grad = t0_gradients(ctx, w)?;
    let refs: Vec<&[f64]> = grad.iter().map(|g| g.as_slice()).collect();
    gibbs_policy(&ctx.tables, ctx.actions, &refs, lambda)
}

/// One application of `Φ_λ`.
pub fn apply_phi(
    ctx: &EvalContext<'_>,
    w: &ValueField,
    lambda: f64,
    pde_cfg: &PdeSolveConfig,
) -> Result<(ValueField, PolicyField)> {
    if !(lambda > 0.0) {
        return Err(LabError::Parameter(format!("temperature {lambda} must be positive")));
    }
    let policy = policy_from_value(ctx, w, lambda)?;
    let (value, _) = evaluate_policy_pde_with(ctx, &policy, lambda, pde_cfg)?;
    Ok((value, policy))
}

fn percentile99(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let idx = ((0.99 * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    v[idx]
}

/// Residuals of the equilibrium system for `(value, policy)`.
///
/// At `t = 0` the Hamiltonian is the softmax for `lambda > 0` and the hard
/// maximum for `lambda = 0`. The field residual evaluates the policy's
/// evaluation PDE at every interior node.
pub fn hjb_residual(
    ctx: &EvalContext<'_>,
    value: &ValueField,
    policy: &PolicyField,
    lambda: f64,
) -> Result<HjbResidual> {
    let value = if value.has_derivatives() {
        value.clone()
    } else {
        crate::grid::finite_diff(value, ctx.grid)?
    };
    let der = value.derivatives()?;
    let grid = ctx.grid;
    let (ns, d) = (grid.n_space(), grid.dim());
    let j_n = ctx.actions.len();
    let w = ctx.actions.weights();
    let u0 = value.slice(0);
    let t0: Vec<f64> = grid
        .interior_nodes()
        .into_par_iter()
        .map(|i| {
            let p: Vec<f64> = (0..d).map(|a| der.grad[a][i]).collect();
            let mut g = vec![0.0; j_n];
            ctx.tables.exponents(i, &p, 0.0, &mut g);
            let ham = if lambda > 0.0 {
                softmax_from_exponents(&g, w, lambda)
            } else {
                hard_max_from_exponents(&g).0
            };
            let diffusion = 0.5 * slice_trace(grid, u0, i, ctx.tables.cov_at(i));
            (der.dt[i] + diffusion + ham).abs()
        })
        .collect();
    let avg = PolicyAverages::from_policy(&ctx.tables, ctx.actions, policy)?;
    let field = pde_residual_avg(grid, &value, &avg, &ctx.spec.discount, lambda)?;
    let interior = grid.interior_nodes();
    let all: Vec<f64> = (0..grid.n_time())
        .flat_map(|k| interior.iter().map(move |&i| k * ns + i))
        .map(|at| field.field[at].abs())
        .collect();
    Ok(HjbResidual {
        res_t0: t0.iter().fold(0.0, |m: f64, v| m.max(*v)),
        res_field: field.sup,
        res_t0_p99: percentile99(t0),
        res_field_p99: percentile99(all),
    })
}

/// Residuals of a fixed-point result under its own temperature.
pub fn eehjb_residual(ctx: &EvalContext<'_>, result: &EquilibriumResult) -> Result<HjbResidual> {
    hjb_residual(ctx, &result.value, &result.policy, result.lambda)
}

/// Damped iteration `w ← (1 − θ)w + θΦ_λ(w)` from `w0` (zero by default).
///
/// The iteration stops once two successive images are within `tol`, then
/// applies `Φ_λ` once more undamped to confirm `‖Φ(v) − v‖ ≤ tol` for the
/// returned `v`. An unconfirmed image restarts the iteration from it.
/// Without convergence the image with the smallest recorded distance is
/// returned with `converged = false`.
pub fn solve_regularized_equilibrium(
    ctx: &EvalContext<'_>,
    lambda: f64,
    fp_cfg: &FixedPointConfig,
    pde_cfg: &PdeSolveConfig,
    w0: Option<&ValueField>,
) -> Result<EquilibriumResult> {
    fp_cfg.validate()?;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(LabError::Parameter(format!("temperature {lambda} must be positive")));
    }
    let mut w = match w0 {
        Some(w) => {
            w.check_grid(ctx.grid)?;
            ValueField::new(ctx.grid, w.values().to_vec())?
        }
        None => ValueField::zeros(ctx.grid),
    };
    let theta = fp_cfg.damping;
    let wrap = |k: usize| {
        move |e: LabError| LabError::FixedPoint {
            iteration: k,
            source: Box::new(e),
        }
    };
    let mut history = Vec::new();
    let mut records = Vec::new();
    let mut prev_image: Option<ValueField> = None;
    let mut best: Option<(f64, ValueField)> = None;
    let mut iter = 0;
    let mut converged = false;
    let mut defect = f64::NAN;
    let mut final_value = None;
    while iter < fp_cfg.max_iters {
        iter += 1;
        let (u, _) = apply_phi(ctx, &w, lambda, pde_cfg).map_err(wrap(iter))?;
        let reference = prev_image.as_ref().unwrap_or(&w);
        let dist = fp_cfg.distance(&u, reference, ctx)?;
        let pol = policy_from_value(ctx, &u, lambda)?;
        let res = hjb_residual(ctx, &u, &pol, lambda)?;
        history.push(dist);
        records.push(IterationRecord {
            iter,
            norm: dist,
            res_t0: res.res_t0,
            res_field: res.res_field,
        });
        if best.as_ref().is_none_or(|(b, _)| dist < *b) {
            best = Some((dist, u.clone()));
        }
        if dist <= fp_cfg.tol {
            let (check, _) = apply_phi(ctx, &u, lambda, pde_cfg).map_err(wrap(iter + 1))?;
            defect = fp_cfg.distance(&check, &u, ctx)?;
            if defect <= fp_cfg.tol {
                converged = true;
                final_value = Some(u);
                break;
            }
            w = ValueField::new(ctx.grid, u.values().to_vec())?;
            prev_image = Some(check);
            continue;
        }
        let next: Vec<f64> = w
            .values()
            .iter()
            .zip(u.values())
            .map(|(a, b)| (1.0 - theta) * a + theta * b)
            .collect();
        w = ValueField::new(ctx.grid, next)?;
        prev_image = Some(u);
    }
    let value = match final_value {
        Some(v) => v,
        None => best
            .map(|(_, u)| u)
            .ok_or_else(|| LabError::State("no iterate produced".into()))?,
    };
    let policy = policy_from_value(ctx, &value, lambda)?;
    if !converged {
        let (check, _) = apply_phi(ctx, &value, lambda, pde_cfg).map_err(wrap(iter + 1))?;
        defect = fp_cfg.distance(&check, &value, ctx)?;
    }
    let residual = hjb_residual(ctx, &value, &policy, lambda)?;
    Ok(EquilibriumResult {
        value,
        policy,
        lambda,
        iterations: iter,
        converged,
        residual_history: history,
        records,
        fixed_point_defect: defect,
        residual,
    })
}
