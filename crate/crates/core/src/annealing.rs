//! Temperature annealing `λ_k ↓ 0` with warm starts, Cauchy and weak
//! convergence diagnostics, and residuals of the zero-temperature system.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::evaluation::{EvalContext, PdeSolveConfig};
use crate::fixed_point::{
    hjb_residual, solve_regularized_equilibrium, EquilibriumResult, EquilibriumSummary, FixedPointConfig, HjbResidual,
};
use crate::gibbs::{concentration_mass, PolicyField};
use crate::grid::{slice_grad, write_field, write_static_field, Grid, ValueField};

/// Version tag of [`default_test_family`].
pub const TEST_FAMILY_VERSION: &str = "v1";

/// Concentration radius as a fraction of the action-set diameter.
pub const CONCENTRATION_RADIUS: f64 = 0.05;

/// Minimum per-node concentration for the limit policy to be flagged atomic.
pub const ATOMIC_THRESHOLD: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnealSchedule {
    pub lambdas: Vec<f64>,
    /// The limit is declared once the last Cauchy difference is at most this.
    pub stop_rule: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule::dyadic(0, 7, 0.05)
    }
}

impl AnnealSchedule {
    /// `λ_k = 2^{-k}` for `k = k0..=k1`.
    pub fn dyadic(k0: i32, k1: i32, stop_rule: f64) -> Self {
        AnnealSchedule {
            lambdas: (k0..=k1).map(|k| 2f64.powi(-k)).collect(),
            stop_rule,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(LabError::Parameter("empty temperature schedule".into()));
        }
        if self.lambdas.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(LabError::Parameter("temperatures must be positive and finite".into()));
        }
        if self.lambdas.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(LabError::Parameter("temperatures must be strictly decreasing".into()));
        }
        if !(self.stop_rule > 0.0) {
            return Err(LabError::Parameter("stop_rule must be positive".into()));
        }
        Ok(())
    }
}

/// Kernel factor of a test function `φ(x, a) = 1_box(x) · k(x, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestKernel {
    Zero,
    One,
    /// One component of `b(x, a)`.
    Drift {
        axis: usize,
    },
    /// `r(0, x, a)`.
    Reward,
    /// `Π (1 - |z/r|²)²` on `|z/r| < 1` over the `(x, a)` coordinates.
    Bump {
        x_center: Vec<f64>,
        x_radius: f64,
        a_center: Vec<f64>,
        a_radius: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub name: String,
    /// Spatial box; `None` is the whole domain.
    pub region: Option<(Vec<f64>, Vec<f64>)>,
    pub kernel: TestKernel,
}

fn bump(z: &[f64], c: &[f64], r: f64) -> f64 {
    let s: f64 = z.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (r * r);
    if s >= 1.0 {
        0.0
    } else {
        (1.0 - s) * (1.0 - s)
    }
}

/// Fixed test family: drift and reward against two boxes each, two smooth
/// bumps and one action-independent box. Boxes are placed at fixed
/// fractions of the domain.
pub fn default_test_family(grid: &Grid, action_center: &[f64], action_diameter: f64) -> Vec<TestFunction> {
    let lo = grid.lo().to_vec();
    let hi = grid.hi();
    let frac = |f0: f64, f1: f64| -> (Vec<f64>, Vec<f64>) {
        (
            lo.iter().zip(&hi).map(|(l, h)| l + f0 * (h - l)).collect(),
            lo.iter().zip(&hi).map(|(l, h)| l + f1 * (h - l)).collect(),
        )
    };
    let mid: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
    let quarter: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| l + 0.7 * (h - l)).collect();
    let span = lo.iter().zip(&hi).map(|(l, h)| h - l).fold(f64::INFINITY, f64::min);
    let mut out = vec![
        TestFunction {
            name: "drift_box_centre".into(),
            region: Some(frac(0.35, 0.65)),
            kernel: TestKernel::Drift { axis: 0 },
        },
        TestFunction {
            name: "drift_box_right".into(),
            region: Some(frac(0.5, 0.9)),
            kernel: TestKernel::Drift { axis: 0 },
        },
        TestFunction {
            name: "reward_box_centre".into(),
            region: Some(frac(0.35, 0.65)),
            kernel: TestKernel::Reward,
        },
        TestFunction {
            name: "reward_box_left".into(),
            region: Some(frac(0.1, 0.5)),
            kernel: TestKernel::Reward,
        },
        TestFunction {
            name: "bump_centre".into(),
            region: None,
            kernel: TestKernel::Bump {
                x_center: mid,
                x_radius: 0.25 * span,
                a_center: action_center.to_vec(),
                a_radius: 0.3 * action_diameter,
            },
        },
        TestFunction {
            name: "bump_offset".into(),
            region: None,
            kernel: TestKernel::Bump {
                x_center: quarter,
                x_radius: 0.2 * span,
                a_center: action_center.iter().map(|c| c + 0.2 * action_diameter).collect(),
                a_radius: 0.25 * action_diameter,
            },
        },
        TestFunction {
            name: "mass_box".into(),
            region: Some(frac(0.2, 0.6)),
            kernel: TestKernel::One,
        },
    ];
    if grid.dim() > 1 {
        out.push(TestFunction {
            name: "drift_box_centre_axis1".into(),
            region: Some(frac(0.35, 0.65)),
            kernel: TestKernel::Drift { axis: 1 },
        });
    }
    out
}

/// Measure of each node's dual cell intersected with the domain and `region`.
pub fn cell_weights(grid: &Grid, region: Option<&(Vec<f64>, Vec<f64>)>) -> Vec<f64> {
    let d = grid.dim();
    let hi = grid.hi();
    (0..grid.n_space())
        .map(|i| {
            (0..d)
                .map(|a| {
                    let x = grid.coord(i, a);
                    let h = grid.dx()[a];
                    let mut l = (x - 0.5 * h).max(grid.lo()[a]);
                    let mut r = (x + 0.5 * h).min(hi[a]);
                    if let Some((bl, bh)) = region {
                        l = l.max(bl[a]);
                        r = r.min(bh[a]);
                    }
                    (r - l).max(0.0)
                })
                .product()
        })
        .collect()
}

/// `∬ φ(x, a) π(x, a) da dx` with dual-cell weights in `x` and the action
/// quadrature in `a`.
pub fn test_integral(ctx: &EvalContext<'_>, policy: &PolicyField, phi: &TestFunction) -> Result<f64> {
    let grid = ctx.grid;
    if let TestKernel::Drift { axis } = phi.kernel {
        if axis >= grid.dim() {
            return Err(LabError::Parameter(format!("drift axis {axis} out of range")));
        }
    }
    let cw = cell_weights(grid, phi.region.as_ref());
    let j_n = ctx.actions.len();
    let vals: Vec<f64> = (0..grid.n_space())
        .into_par_iter()
        .map(|i| {
            if cw[i] == 0.0 {
                return 0.0;
            }
            let x = grid.point(i);
            let k: Vec<f64> = (0..j_n)
                .map(|j| match &phi.kernel {
                    TestKernel::Zero => 0.0,
                    TestKernel::One => 1.0,
                    TestKernel::Drift { axis } => ctx.tables.drift_at(i, j)[*axis],
                    TestKernel::Reward => ctx.spec.reward(0.0, &x, &ctx.actions.nodes()[j]),
                    TestKernel::Bump {
                        x_center,
                        x_radius,
                        a_center,
                        a_radius,
                    } => bump(&x, x_center, *x_radius) * bump(&ctx.actions.nodes()[j], a_center, *a_radius),
                })
                .collect();
            cw[i] * policy.average(i, ctx.actions, &k)
        })
        .collect();
    Ok(vals.iter().sum())
}

/// Stage integrals and successive differences of the weak probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakProbe {
    pub version: String,
    pub names: Vec<String>,
    /// `integrals[f][k]` for test function `f` at stage `k`.
    pub integrals: Vec<Vec<f64>>,
    /// `diffs[f][k] = |integrals[f][k+1] − integrals[f][k]|`.
    pub diffs: Vec<Vec<f64>>,
}

pub fn weak_convergence_probe(
    ctx: &EvalContext<'_>,
    policies: &[&PolicyField],
    tests: &[TestFunction],
) -> Result<WeakProbe> {
    let mut integrals = Vec::with_capacity(tests.len());
    for phi in tests {
        let row = policies
            .iter()
            .map(|p| test_integral(ctx, p, phi))
            .collect::<Result<Vec<f64>>>()?;
        integrals.push(row);
    }
    let diffs = integrals
        .iter()
        .map(|row| row.windows(2).map(|w| (w[1] - w[0]).abs()).collect())
        .collect();
    Ok(WeakProbe {
        version: TEST_FAMILY_VERSION.into(),
        names: tests.iter().map(|t| t.name.clone()).collect(),
        integrals,
        diffs,
    })
}

/// Per-node concentration mass near the hard argmax of the `t = 0`
/// exponents of `value`.
pub fn concentration_profile(ctx: &EvalContext<'_>, value: &ValueField, policy: &PolicyField) -> Result<Vec<f64>> {
    value.check_grid(ctx.grid)?;
    let grid = ctx.grid;
    let d = grid.dim();
    let radius = CONCENTRATION_RADIUS * ctx.actions.diameter();
    let u0 = value.slice(0);
    Ok((0..grid.n_space())
        .into_par_iter()
        .map(|i| {
            let mut p = vec![0.0; d];
            slice_grad(grid, u0, i, &mut p);
            let mut g = vec![0.0; ctx.actions.len()];
            ctx.tables.exponents(i, &p, 0.0, &mut g);
            concentration_mass(ctx.actions, &g, policy.density(i), radius)
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct AnnealTrace {
    pub stages: Vec<EquilibriumResult>,
    /// Temperatures actually solved, including any inserted midpoint.
    pub lambdas: Vec<f64>,
    pub inserted: Vec<f64>,
    pub cauchy_diffs: Vec<f64>,
    pub weak: WeakProbe,
    /// Space-averaged concentration mass per stage.
    pub concentration: Vec<f64>,
    pub limit_value: Option<ValueField>,
    pub limit_policy: Option<PolicyField>,
    pub limit_atomic: bool,
    /// Residuals of the zero-temperature system at the limit.
    pub ehjb_residuals: Option<HjbResidual>,
    /// A stage failed even after midpoint insertion.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealSummary {
    pub stages: Vec<EquilibriumSummary>,
    pub lambdas: Vec<f64>,
    pub inserted: Vec<f64>,
    pub cauchy_diffs: Vec<f64>,
    pub weak: WeakProbe,
    pub concentration: Vec<f64>,
    pub limit_available: bool,
    pub limit_atomic: bool,
    pub ehjb_residuals: Option<HjbResidual>,
    pub truncated: bool,
}

impl AnnealTrace {
    pub fn summary(&self) -> AnnealSummary {
        AnnealSummary {
            stages: self.stages.iter().map(|s| s.summary()).collect(),
            lambdas: self.lambdas.clone(),
            inserted: self.inserted.clone(),
            cauchy_diffs: self.cauchy_diffs.clone(),
            weak: self.weak.clone(),
            concentration: self.concentration.clone(),
            limit_available: self.limit_value.is_some(),
            limit_atomic: self.limit_atomic,
            ehjb_residuals: self.ehjb_residuals,
            truncated: self.truncated,
        }
    }

    /// Writes `stage_KK_value.eqf`, `stage_KK_policy.eqf`, the limit fields
    /// when present, and `summary.json`.
    pub fn export(&self, dir: &Path, ctx: &EvalContext<'_>) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let anodes: Vec<f64> = ctx.actions.nodes().iter().map(|a| a[0]).collect();
        for (k, st) in self.stages.iter().enumerate() {
            write_field(
                &dir.join(format!("stage_{k:02}_value.eqf")),
                ctx.grid,
                &[],
                st.value.values(),
            )?;
            write_static_field(
                &dir.join(format!("stage_{k:02}_policy.eqf")),
                ctx.grid,
                &anodes,
                st.policy.densities(),
            )?;
        }
        if let (Some(v), Some(p)) = (&self.limit_value, &self.limit_policy) {
            write_field(&dir.join("limit_value.eqf"), ctx.grid, &[], v.values())?;
            write_static_field(&dir.join("limit_policy.eqf"), ctx.grid, &anodes, p.densities())?;
        }
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.summary())?)?;
        Ok(())
    }
}

/// Solves the schedule in order, warm-starting each stage from the previous
/// value. A failed stage triggers one insertion of the geometric midpoint
/// between the last success and the failure; a second failure truncates the
/// trace.
pub fn anneal(
    ctx: &EvalContext<'_>,
    schedule: &AnnealSchedule,
    fp_cfg: &FixedPointConfig,
    pde_cfg: &PdeSolveConfig,
) -> Result<AnnealTrace> {
    schedule.validate()?;
    let mut stages: Vec<EquilibriumResult> = Vec::new();
    let mut lambdas = Vec::new();
    let mut inserted = Vec::new();
    let mut truncated = false;
    let mut queue: std::collections::VecDeque<f64> = schedule.lambdas.iter().copied().collect();
    let mut retried = false;
    while let Some(lam) = queue.pop_front() {
        let warm = stages.last().map(|s| &s.value);
        let res = solve_regularized_equilibrium(ctx, lam, fp_cfg, pde_cfg, warm)?;
        if res.converged {
            lambdas.push(lam);
            stages.push(res);
            continue;
        }
        match (stages.last(), retried) {
            (Some(prev), false) => {
                let mid = (prev.lambda * lam).sqrt();
                inserted.push(mid);
                queue.push_front(lam);
                queue.push_front(mid);
                retried = true;
            }
            _ => {
                truncated = true;
                break;
            }
        }
    }
    let cauchy_diffs: Vec<f64> = stages.windows(2).map(|w| w[1].value.sup_diff(&w[0].value)).collect();
    let policies: Vec<&PolicyField> = stages.iter().map(|s| &s.policy).collect();
    let tests = default_test_family(
        ctx.grid,
        &ctx.actions
            .set()
            .lo
            .iter()
            .zip(&ctx.actions.set().hi)
            .map(|(l, h)| 0.5 * (l + h))
            .collect::<Vec<_>>(),
        ctx.actions.diameter(),
    );
    let weak = weak_convergence_probe(ctx, &policies, &tests)?;
    let mut concentration = Vec::with_capacity(stages.len());
    let mut last_profile = Vec::new();
    for st in &stages {
        let prof = concentration_profile(ctx, &st.value, &st.policy)?;
        concentration.push(prof.iter().sum::<f64>() / prof.len() as f64);
        last_profile = prof;
    }
    let stop_met = !stages.is_empty() && !truncated && cauchy_diffs.last().is_none_or(|d| *d <= schedule.stop_rule);
    let (mut limit_value, mut limit_policy, mut limit_atomic, mut ehjb) = (None, None, false, None);
    if stop_met {
        let last = stages.last().unwrap();
        let atomic = last_profile.iter().all(|m| *m > ATOMIC_THRESHOLD);
        let policy = if atomic {
            last.policy.collapse_to_atoms(ctx.actions)
        } else {
            last.policy.clone()
        };
        ehjb = Some(hjb_residual(ctx, &last.value, &policy, 0.0)?);
        limit_value = Some(last.value.clone());
        limit_policy = Some(policy);
        limit_atomic = atomic;
    }
    Ok(AnnealTrace {
        stages,
        lambdas,
        inserted,
        cauchy_diffs,
        weak,
        concentration,
        limit_value,
        limit_policy,
        limit_atomic,
        ehjb_residuals: ehjb,
        truncated,
    })
}

/// Residuals of the zero-temperature system at the trace's limit pair.
pub fn ehjb_residual_limit(ctx: &EvalContext<'_>, trace: &AnnealTrace) -> Result<HjbResidual> {
    match (&trace.limit_value, &trace.limit_policy) {
        (Some(v), Some(p)) => hjb_residual(ctx, v, p, 0.0),
        _ => Err(LabError::State("trace has no limit fields".into())),
    }
}
