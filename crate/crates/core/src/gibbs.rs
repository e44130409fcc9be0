//! Gibbs policies over a discretized action set: the operator `Γ_λ`, the
//! Shannon entropy, soft and hard maxima of the Hamiltonian exponent.
//!
//! All exponentials go through max-subtracted log-sum-exp.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grid::Grid;
use crate::problem::{BoxDomain, ProblemSpec, TimeProfile};
use crate::quadrature::{gauss_lobatto, trapezoid_weights};

/// Node placement rule on each action axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionRule {
    /// Gauss–Lobatto–Legendre nodes (endpoints included).
    #[default]
    Lobatto,
    /// Uniform nodes with composite trapezoid weights.
    Trapezoid,
}

/// Action nodes with positive quadrature weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionGrid {
    nodes: Vec<Vec<f64>>,
    weights: Vec<f64>,
    set: BoxDomain,
    rule: ActionRule,
}

impl ActionGrid {
    /// Tensor rule with `n` nodes per action axis.
    pub fn new(set: &BoxDomain, n: usize, rule: ActionRule) -> Result<Self> {
        if n < 2 {
            return Err(LabError::Parameter(format!(
                "action grid needs at least 2 nodes per axis, got {n}"
            )));
        }
        let axes: Vec<(Vec<f64>, Vec<f64>)> = (0..set.dim())
            .map(|a| {
                let (lo, hi) = (set.lo[a], set.hi[a]);
                match rule {
                    ActionRule::Lobatto => {
                        let (x, w) = gauss_lobatto(n);
                        let half = 0.5 * (hi - lo);
                        (
                            x.iter().map(|x| lo + half * (x + 1.0)).collect(),
                            w.iter().map(|w| w * half).collect(),
                        )
                    }
                    ActionRule::Trapezoid => {
                        let x: Vec<f64> = (0..n).map(|j| lo + (hi - lo) * j as f64 / (n - 1) as f64).collect();
                        let w = trapezoid_weights(&x);
                        (x, w)
                    }
                }
            })
            .collect();
        let total = n.pow(set.dim() as u32);
        let mut nodes = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        for mut k in 0..total {
            let mut p = vec![0.0; set.dim()];
            let mut w = 1.0;
            for a in (0..set.dim()).rev() {
                let j = k % n;
                k /= n;
                p[a] = axes[a].0[j];
                w *= axes[a].1[j];
            }
            nodes.push(p);
            weights.push(w);
        }
        // The largest weight absorbs rounding so that the sequential sum is
        // exactly the measure of the set.
        let measure = set.measure();
        let big = (0..total)
            .max_by(|&a, &b| weights[a].total_cmp(&weights[b]))
            .unwrap_or(0);
        for _ in 0..8 {
            let s: f64 = weights.iter().sum();
            if s == measure {
                break;
            }
            weights[big] += measure - s;
        }
        Ok(ActionGrid {
            nodes,
            weights,
            set: set.clone(),
            rule,
        })
    }

    pub fn for_spec(spec: &ProblemSpec, n: usize, rule: ActionRule) -> Result<Self> {
        ActionGrid::new(&spec.action_set, n, rule)
    }

    pub fn nodes(&self) -> &[Vec<f64>] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn rule(&self) -> ActionRule {
        self.rule
    }

    pub fn set(&self) -> &BoxDomain {
        &self.set
    }

    /// `Leb(U)`.
    pub fn measure(&self) -> f64 {
        self.set.measure()
    }

    pub fn diameter(&self) -> f64 {
        self.set.diameter()
    }

    /// Index of the node closest to `a`.
    pub fn nearest(&self, a: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (j, n) in self.nodes.iter().enumerate() {
            let d: f64 = n.iter().zip(a).map(|(x, y)| (x - y) * (x - y)).sum();
            if d < best.0 {
                best = (d, j);
            }
        }
        best.1
    }
}

/// Coefficients tabulated at every (space node, action node) pair.
#[derive(Debug, Clone)]
pub struct NodeTables {
    pub n_space: usize,
    pub n_actions: usize,
    pub dim: usize,
    /// `b(x_i, a_j)`, flat `[(i * J + j) * d + axis]`.
    pub drift: Vec<f64>,
    /// Reward kernels `ρ_m(x_i, a_j)`, one flat `[i * J + j]` array per piece.
    pub kernels: Vec<Vec<f64>>,
    pub times: Vec<TimeProfile>,
    /// `σσᵀ(x_i)`, flat `[i * d * d + a * d + b]`.
    pub cov: Vec<f64>,
}

impl NodeTables {
    pub fn build(spec: &ProblemSpec, grid: &Grid, actions: &ActionGrid) -> Result<Self> {
        if grid.dim() != spec.dim {
            return Err(LabError::Shape(format!(
                "grid dimension {} but problem dimension {}",
                grid.dim(),
                spec.dim
            )));
        }
        if actions.set().dim() != spec.action_dim() {
            return Err(LabError::Shape("action grid does not match the action set".into()));
        }
        let pts = grid.points();
        NodeTables::from_points(spec, &pts, actions)
    }

    /// Tables at arbitrary points (each must lie in the spatial domain).
    pub fn from_points(spec: &ProblemSpec, pts: &[Vec<f64>], actions: &ActionGrid) -> Result<Self> {
        for p in pts {
            spec.check_point(p)?;
        }
        let d = spec.dim;
        let j_n = actions.len();
        let ns = pts.len();
        let mut drift = vec![0.0; ns * j_n * d];
        drift.par_chunks_mut(j_n * d).zip(pts.par_iter()).for_each(|(row, x)| {
            for (j, a) in actions.nodes().iter().enumerate() {
                spec.drift_into(x, a, &mut row[j * d..(j + 1) * d]);
            }
        });
        let kernels = spec
            .reward_pieces()
            .iter()
            .map(|piece| {
                let mut k = vec![0.0; ns * j_n];
                k.par_chunks_mut(j_n).zip(pts.par_iter()).for_each(|(row, x)| {
                    for (o, a) in row.iter_mut().zip(actions.nodes()) {
                        *o = (piece.kernel)(x, a);
                    }
                });
                k
            })
            .collect();
        let cov = pts.iter().flat_map(|x| spec.covariance(x)).collect();
        Ok(NodeTables {
            n_space: ns,
            n_actions: j_n,
            dim: d,
            drift,
            kernels,
            times: spec.reward_pieces().iter().map(|p| p.time).collect(),
            cov,
        })
    }

    /// `g_j = b(x_i, a_j)·p + r(t, x_i, a_j)` for all action nodes.
    pub fn exponents(&self, i: usize, p: &[f64], t: f64, out: &mut [f64]) {
        let (d, j_n) = (self.dim, self.n_actions);
        let base = i * j_n;
        for (j, o) in out.iter_mut().enumerate() {
            let b = &self.drift[(base + j) * d..(base + j + 1) * d];
            *o = b.iter().zip(p).map(|(b, p)| b * p).sum();
        }
        for (tp, k) in self.times.iter().zip(&self.kernels) {
            let c = tp.value(t);
            if c == 0.0 {
                continue;
            }
            for (o, kv) in out.iter_mut().zip(&k[base..base + j_n]) {
                *o += c * kv;
            }
        }
    }

    pub fn drift_at(&self, i: usize, j: usize) -> &[f64] {
        let d = self.dim;
        let at = (i * self.n_actions + j) * d;
        &self.drift[at..at + d]
    }

    pub fn cov_at(&self, i: usize) -> &[f64] {
        let dd = self.dim * self.dim;
        &self.cov[i * dd..(i + 1) * dd]
    }
}

/// Per-space-node densities over an [`ActionGrid`].
///
/// Atomic policies store each atom as a spike `p / w_j` on its node so that
/// quadrature averages stay correct; their entropy is defined to be zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyField {
    n_space: usize,
    n_actions: usize,
    densities: Vec<f64>,
    atomic: bool,
}

impl PolicyField {
    pub fn new(n_space: usize, actions: &ActionGrid, densities: Vec<f64>) -> Result<Self> {
        let pf = PolicyField {
            n_space,
            n_actions: actions.len(),
            densities,
            atomic: false,
        };
        pf.validate(actions, 1e-10)?;
        Ok(pf)
    }

    pub fn uniform(n_space: usize, actions: &ActionGrid) -> Self {
        let v = 1.0 / actions.measure();
        PolicyField {
            n_space,
            n_actions: actions.len(),
            densities: vec![v; n_space * actions.len()],
            atomic: false,
        }
    }

    /// Point mass at node `j_of(i)` for every space node.
    pub fn atoms<F: Fn(usize) -> Vec<usize>>(n_space: usize, actions: &ActionGrid, j_of: F) -> Self {
        let j_n = actions.len();
        let mut densities = vec![0.0; n_space * j_n];
        for i in 0..n_space {
            let set = j_of(i);
            let p = 1.0 / set.len() as f64;
            for j in set {
                densities[i * j_n + j] = p / actions.weights()[j];
            }
        }
        PolicyField {
            n_space,
            n_actions: j_n,
            densities,
            atomic: true,
        }
    }

    pub fn n_space(&self) -> usize {
        self.n_space
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn is_atomic(&self) -> bool {
        self.atomic
    }

    pub fn densities(&self) -> &[f64] {
        &self.densities
    }

    pub fn density(&self, i: usize) -> &[f64] {
        &self.densities[i * self.n_actions..(i + 1) * self.n_actions]
    }

    /// Checks nonnegativity and normalization within `tol` at every node.
    pub fn validate(&self, actions: &ActionGrid, tol: f64) -> Result<()> {
        if actions.len() != self.n_actions || self.densities.len() != self.n_space * self.n_actions {
            return Err(LabError::Shape(format!(
                "policy is {}x{}, action grid has {} nodes",
                self.n_space,
                self.n_actions,
                actions.len()
            )));
        }
        for i in 0..self.n_space {
            let row = self.density(i);
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(LabError::Contract(format!(
                    "negative or non-finite density at node {i}"
                )));
            }
            let mass: f64 = row.iter().zip(actions.weights()).map(|(p, w)| p * w).sum();
            if (mass - 1.0).abs() > tol {
                return Err(LabError::Contract(format!("density at node {i} has mass {mass}")));
            }
        }
        Ok(())
    }

    /// `∫ v(a) π(x_i, da)` for tabulated `v`.
    #[inline]
    pub fn average(&self, i: usize, actions: &ActionGrid, v: &[f64]) -> f64 {
        self.density(i)
            .iter()
            .zip(actions.weights())
            .zip(v)
            .map(|((p, w), v)| p * w * v)
            .sum()
    }

    /// Shannon entropy at node `i` (zero for atomic policies).
    pub fn entropy_at(&self, i: usize, actions: &ActionGrid) -> Result<f64> {
        if self.atomic {
            return Ok(0.0);
        }
        entropy(actions, self.density(i))
    }

    /// Collapses each node to equal atoms on the nodes of maximal density.
    pub fn collapse_to_atoms(&self, actions: &ActionGrid) -> PolicyField {
        PolicyField::atoms(self.n_space, actions, |i| {
            let row = self.density(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            argmax_set(row, m)
        })
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(LabError::Parameter(format!(
            "temperature must be positive, got {lambda} (use hard_max_value for the zero-temperature object)"
        )))
    }
}

fn max_of(g: &[f64]) -> f64 {
    g.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

fn argmax_set(g: &[f64], m: f64) -> Vec<usize> {
    let tol = 1e-12 * m.abs().max(1.0);
    (0..g.len()).filter(|&j| g[j] >= m - tol).collect()
}

/// Gibbs density of tabulated exponents; returns `ln Σ w exp((g - max)/λ)`.
pub fn gibbs_from_exponents(g: &[f64], weights: &[f64], lambda: f64, out: &mut [f64]) -> f64 {
    let m = max_of(g);
    let mut z = 0.0;
    for ((o, &gj), &w) in out.iter_mut().zip(g).zip(weights) {
        *o = ((gj - m) / lambda).exp();
        z += w * *o;
    }
    let inv = 1.0 / z;
    for o in out.iter_mut() {
        // Underflowed tails are floored at the smallest normal float.
        *o = (*o * inv).max(f64::MIN_POSITIVE);
    }
    z.ln()
}

/// `λ · ln Σ_j w_j exp(g_j / λ)` via max subtraction.
pub fn softmax_from_exponents(g: &[f64], weights: &[f64], lambda: f64) -> f64 {
    let m = max_of(g);
    let z: f64 = g.iter().zip(weights).map(|(gj, w)| w * ((gj - m) / lambda).exp()).sum();
    m + lambda * z.ln()
}

/// `b(x, a)·p + r(0, x, a)`.
pub fn exponent(spec: &ProblemSpec, x: &[f64], p: &[f64], a: &[f64]) -> f64 {
    let b = spec.drift(x, a);
    b.iter().zip(p).map(|(b, p)| b * p).sum::<f64>() + spec.reward(0.0, x, a)
}

fn exponents_at(spec: &ProblemSpec, actions: &ActionGrid, x: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    spec.check_point(x)?;
    if p.len() != spec.dim {
        return Err(LabError::Shape(format!(
            "gradient has {} components, expected {}",
            p.len(),
            spec.dim
        )));
    }
    Ok(actions.nodes().iter().map(|a| exponent(spec, x, p, a)).collect())
}

/// `Γ_λ(x, p, ·)` on the action grid.
pub fn gibbs_density(spec: &ProblemSpec, actions: &ActionGrid, x: &[f64], p: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    let g = exponents_at(spec, actions, x, p)?;
    let mut out = vec![0.0; g.len()];
    gibbs_from_exponents(&g, actions.weights(), lambda, &mut out);
    Ok(out)
}

/// `-Σ_j w_j π_j ln π_j` with `0 ln 0 = 0`.
pub fn entropy(actions: &ActionGrid, density: &[f64]) -> Result<f64> {
    if density.len() != actions.len() {
        return Err(LabError::Shape(format!(
            "density has {} entries, action grid {}",
            density.len(),
            actions.len()
        )));
    }
    let mass: f64 = density.iter().zip(actions.weights()).map(|(p, w)| p * w).sum();
    if !((mass - 1.0).abs() <= 1e-6) || density.iter().any(|p| *p < 0.0) {
        return Err(LabError::Contract(format!("density is not normalized (mass {mass})")));
    }
    Ok(entropy_unchecked(density, actions.weights()))
}

#[inline]
pub(crate) fn entropy_unchecked(density: &[f64], weights: &[f64]) -> f64 {
    -density
        .iter()
        .zip(weights)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, w)| w * p * p.ln())
        .sum::<f64>()
}

/// `λ ln ∫_U exp(g(a)/λ) da` by quadrature.
pub fn softmax_value(spec: &ProblemSpec, actions: &ActionGrid, x: &[f64], p: &[f64], lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let g = exponents_at(spec, actions, x, p)?;
    Ok(softmax_from_exponents(&g, actions.weights(), lambda))
}

/// Maximum of the exponent over action nodes and the nodes attaining it
/// within `1e-12`.
pub fn hard_max_value(spec: &ProblemSpec, actions: &ActionGrid, x: &[f64], p: &[f64]) -> Result<(f64, Vec<usize>)> {
    let g = exponents_at(spec, actions, x, p)?;
    Ok(hard_max_from_exponents(&g))
}

pub fn hard_max_from_exponents(g: &[f64]) -> (f64, Vec<usize>) {
    let m = max_of(g);
    (m, argmax_set(g, m))
}

/// Quadrature mass of `density` within distance `radius` of the argmax set
/// of `g`.
pub fn concentration_mass(actions: &ActionGrid, g: &[f64], density: &[f64], radius: f64) -> f64 {
    let (_, arg) = hard_max_from_exponents(g);
    let nodes = actions.nodes();
    (0..actions.len())
        .filter(|&j| {
            arg.iter().any(|&k| {
                let d2: f64 = nodes[j].iter().zip(&nodes[k]).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() <= radius + 1e-12
            })
        })
        .map(|j| actions.weights()[j] * density[j])
        .sum()
}

/// Least-squares fit `|H| ≈ c1 + c2 ln(1 + |p|)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthFit {
    pub c1: f64,
    pub c2: f64,
    pub max_residual: f64,
    pub magnitudes: Vec<f64>,
    /// Mean `|H|` per magnitude.
    pub mean_abs_entropy: Vec<f64>,
    pub samples_per_magnitude: usize,
}

/// Samples `|H(Γ_λ(x, p, ·))|` at random `x` and random directions of `p`
/// for each magnitude, then fits the logarithmic growth shape.
pub fn entropy_growth_probe(
    spec: &ProblemSpec,
    actions: &ActionGrid,
    lambda: f64,
    magnitudes: &[f64],
    samples: usize,
    seed: u64,
) -> Result<GrowthFit> {
    check_lambda(lambda)?;
    if lambda > 1.0 {
        return Err(LabError::Parameter(format!("probe temperature {lambda} exceeds 1")));
    }
    if magnitudes.len() < 2 || samples == 0 {
        return Err(LabError::Parameter(
            "probe needs at least two magnitudes and one sample".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.dim;
    let mut xs = Vec::new();
    let mut hs = Vec::new();
    let mut means = Vec::new();
    let mut dens = vec![0.0; actions.len()];
    for &m in magnitudes {
        let mut acc = 0.0;
        for _ in 0..samples {
            let x: Vec<f64> = (0..d)
                .map(|a| rng.random_range(spec.domain.lo[a]..=spec.domain.hi[a]))
                .collect();
            let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = dir.iter().map(|v: &f64| v * v).sum::<f64>().sqrt().max(1e-300);
            dir.iter_mut().for_each(|v| *v *= m / n);
            let g = exponents_at(spec, actions, &x, &dir)?;
            gibbs_from_exponents(&g, actions.weights(), lambda, &mut dens);
            let h = entropy_unchecked(&dens, actions.weights()).abs();
            acc += h;
            xs.push((1.0 + m).ln());
            hs.push(h);
        }
        means.push(acc / samples as f64);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = hs.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&hs).map(|(x, y)| (x - mx) * (y - my)).sum();
    let c2 = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let c1 = my - c2 * mx;
    let max_residual = xs
        .iter()
        .zip(&hs)
        .map(|(x, y)| (y - c1 - c2 * x).abs())
        .fold(0.0, f64::max);
    Ok(GrowthFit {
        c1,
        c2,
        max_residual,
        magnitudes: magnitudes.to_vec(),
        mean_abs_entropy: means,
        samples_per_magnitude: samples,
    })
}

/// Gibbs policy `Γ_λ(x_i, p_i, ·)` at every space node, with `p_i` taken from
/// per-axis gradient arrays.
pub fn gibbs_policy(tables: &NodeTables, actions: &ActionGrid, grad: &[&[f64]], lambda: f64) -> Result<PolicyField> {
    check_lambda(lambda)?;
    let (ns, j_n, d) = (tables.n_space, tables.n_actions, tables.dim);
    let mut densities = vec![0.0; ns * j_n];
    densities.par_chunks_mut(j_n).enumerate().for_each(|(i, row)| {
        let p: Vec<f64> = (0..d).map(|a| grad[a][i]).collect();
        let mut g = vec![0.0; j_n];
        tables.exponents(i, &p, 0.0, &mut g);
        gibbs_from_exponents(&g, actions.weights(), lambda, row);
    });
    Ok(PolicyField {
        n_space: ns,
        n_actions: j_n,
        densities,
        atomic: false,
    })
}
