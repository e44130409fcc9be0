//! Space-time grids, finite-difference stencils, discrete parabolic norms
//! and field serialization.
//!
//! Spatial nodes form a tensor lattice stored row-major (last axis fastest);
//! a field over the grid is stored time-major, `values[k * n_space + i]`.
//! Every derivative used anywhere in the crate is produced by the stencils in
//! this module, so residuals and PDE operators see the same discretization.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::problem::{BoxDomain, ProblemSpec};

/// Ghost-node rule at the spatial boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// Zero normal derivative: the ghost node mirrors the first interior node.
    #[default]
    Neumann,
    /// Ghost node on the line through the last two nodes.
    LinearExtrapolation,
}

/// Seed for the pair subsampling of [`holder_seminorm`].
pub const HOLDER_SEED: u64 = 0x00E0_1AB5;
/// Largest number of node pairs examined by a Hölder estimate.
pub const HOLDER_MAX_PAIRS: usize = 1_000_000;

/// At most four weighted node references.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    idx: [usize; 4],
    w: [f64; 4],
    len: usize,
}

impl Stencil {
    const EMPTY: Stencil = Stencil {
        idx: [0; 4],
        w: [0.0; 4],
        len: 0,
    };

    fn push(&mut self, i: usize, w: f64) {
        if w == 0.0 {
            return;
        }
        for s in 0..self.len {
            if self.idx[s] == i {
                self.w[s] += w;
                return;
            }
        }
        self.idx[self.len] = i;
        self.w[self.len] = w;
        self.len += 1;
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len).map(move |s| (self.idx[s], self.w[s]))
    }

    #[inline]
    pub fn apply(&self, u: &[f64]) -> f64 {
        let mut acc = 0.0;
        for s in 0..self.len {
            acc += self.w[s] * u[self.idx[s]];
        }
        acc
    }
}

/// Space-time grid over a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    t_nodes: Vec<f64>,
    lo: Vec<f64>,
    dx: Vec<f64>,
    shape: Vec<usize>,
    boundary: BoundaryMode,
}

impl Grid {
    pub fn new(t_nodes: Vec<f64>, domain: &BoxDomain, shape: &[usize], boundary: BoundaryMode) -> Result<Self> {
        if shape.len() != domain.dim() {
            return Err(LabError::Shape(format!(
                "{} axis sizes for a {}-dimensional box",
                shape.len(),
                domain.dim()
            )));
        }
        if shape.iter().any(|&n| n < 3) {
            return Err(LabError::Parameter(format!(
                "need at least 3 nodes per axis, got {shape:?}"
            )));
        }
        if t_nodes.len() < 3 {
            return Err(LabError::Parameter("need at least 3 time nodes".into()));
        }
        if t_nodes[0] != 0.0 {
            return Err(LabError::Parameter(format!("first time node is {}, not 0", t_nodes[0])));
        }
        if t_nodes.windows(2).any(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return Err(LabError::Parameter(
                "time nodes must be finite and strictly increasing".into(),
            ));
        }
        let dx = domain
            .lo
            .iter()
            .zip(&domain.hi)
            .zip(shape)
            .map(|((l, h), &n)| (h - l) / (n - 1) as f64)
            .collect();
        Ok(Grid {
            t_nodes,
            lo: domain.lo.clone(),
            dx,
            shape: shape.to_vec(),
            boundary,
        })
    }

    pub fn t_nodes(&self) -> &[f64] {
        &self.t_nodes
    }

    pub fn horizon(&self) -> f64 {
        *self.t_nodes.last().unwrap()
    }

    pub fn n_time(&self) -> usize {
        self.t_nodes.len()
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.dx)
            .zip(&self.shape)
            .map(|((l, h), &n)| l + h * (n - 1) as f64)
            .collect()
    }

    pub fn boundary(&self) -> BoundaryMode {
        self.boundary
    }

    pub fn n_space(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.n_time() * self.n_space()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn stride(&self, axis: usize) -> usize {
        self.shape[axis + 1..].iter().product()
    }

    /// Per-axis indices of space node `i`.
    pub fn multi_index(&self, mut i: usize) -> Vec<usize> {
        let mut m = vec![0; self.dim()];
        for axis in (0..self.dim()).rev() {
            m[axis] = i % self.shape[axis];
            i /= self.shape[axis];
        }
        m
    }

    pub fn axis_index(&self, i: usize, axis: usize) -> usize {
        (i / self.stride(axis)) % self.shape[axis]
    }

    pub fn coord(&self, i: usize, axis: usize) -> f64 {
        self.lo[axis] + self.dx[axis] * self.axis_index(i, axis) as f64
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        (0..self.dim()).map(|a| self.coord(i, a)).collect()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.n_space()).map(|i| self.point(i)).collect()
    }

    pub fn is_interior(&self, i: usize) -> bool {
        (0..self.dim()).all(|a| {
            let j = self.axis_index(i, a);
            j > 0 && j + 1 < self.shape[a]
        })
    }

    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.n_space()).filter(|&i| self.is_interior(i)).collect()
    }

    /// Nearest space node to `x` (clamped to the box).
    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let mut i = 0;
        for a in 0..self.dim() {
            let j = ((x[a] - self.lo[a]) / self.dx[a]).round();
            let j = j.clamp(0.0, (self.shape[a] - 1) as f64) as usize;
            i += j * self.stride(a);
        }
        i
    }

    /// Index of the time node equal to `t` up to `1e-9` relative slack.
    pub fn time_index(&self, t: f64) -> Option<usize> {
        let k = self.t_nodes.partition_point(|&s| s < t - 1e-9 * t.abs().max(1.0));
        (k < self.n_time() && (self.t_nodes[k] - t).abs() <= 1e-9 * t.abs().max(1.0)).then_some(k)
    }

    /// Weighted references `(node, weight)` along `axis` for the neighbor at
    /// offset `off ∈ {-1, +1}` of node `i`, with the ghost rule applied.
    fn neighbor(&self, i: usize, axis: usize, off: isize) -> [(usize, f64); 2] {
        let j = self.axis_index(i, axis) as isize;
        let n = self.shape[axis] as isize;
        let s = self.stride(axis) as isize;
        let target = j + off;
        if (0..n).contains(&target) {
            return [((i as isize + off * s) as usize, 1.0), (i, 0.0)];
        }
        let inward = (i as isize - off * s) as usize;
        match self.boundary {
            BoundaryMode::Neumann => [(inward, 1.0), (i, 0.0)],
            BoundaryMode::LinearExtrapolation => [(i, 2.0), (inward, -1.0)],
        }
    }

    /// Central first difference along `axis` at node `i`.
    pub fn grad_stencil(&self, i: usize, axis: usize) -> Stencil {
        let h = self.dx[axis];
        let mut st = Stencil::EMPTY;
        for (off, sign) in [(1isize, 1.0), (-1, -1.0)] {
            for (node, w) in self.neighbor(i, axis, off) {
                st.push(node, sign * w / (2.0 * h));
            }
        }
        st
    }

    /// Second difference `∂²/∂x_a∂x_b` at node `i`: three-point for `a == b`,
    /// product of first differences otherwise.
    pub fn hess_stencil(&self, i: usize, a: usize, b: usize) -> Stencil {
        let mut st = Stencil::EMPTY;
        if a == b {
            let h2 = self.dx[a] * self.dx[a];
            st.push(i, -2.0 / h2);
            for off in [1isize, -1] {
                for (node, w) in self.neighbor(i, a, off) {
                    st.push(node, w / h2);
                }
            }
            return st;
        }
        if a > b {
            return self.hess_stencil(i, b, a);
        }
        let ga = self.grad_stencil(i, a);
        for (na, wa) in ga.entries() {
            for (nb, wb) in self.grad_stencil(na, b).entries() {
                st.push(nb, wa * wb);
            }
        }
        st
    }

    /// `(node offset, weight)` pairs of the time-derivative stencil at time
    /// node `k`: forward at `t_0`, central inside, backward at the horizon.
    pub fn dt_stencil(&self, k: usize) -> [(usize, f64); 2] {
        let t = &self.t_nodes;
        let last = t.len() - 1;
        let (lo, hi) = if k == 0 {
            (0, 1)
        } else if k == last {
            (last - 1, last)
        } else {
            (k - 1, k + 1)
        };
        let w = 1.0 / (t[hi] - t[lo]);
        [(hi, w), (lo, -w)]
    }

    /// Grid with every time interval bisected and every spatial cell halved.
    pub fn refined(&self) -> Grid {
        let mut t = Vec::with_capacity(2 * self.n_time() - 1);
        for w in self.t_nodes.windows(2) {
            t.push(w[0]);
            t.push(0.5 * (w[0] + w[1]));
        }
        t.push(self.horizon());
        Grid {
            t_nodes: t,
            lo: self.lo.clone(),
            dx: self.dx.iter().map(|h| 0.5 * h).collect(),
            shape: self.shape.iter().map(|n| 2 * n - 1).collect(),
            boundary: self.boundary,
        }
    }

    /// Copy of this grid restricted to time nodes `0..=k_end`.
    pub fn truncated(&self, k_end: usize) -> Result<Grid> {
        if k_end < 1 || k_end >= self.n_time() {
            return Err(LabError::Parameter(format!(
                "cannot truncate {} time nodes at index {k_end}",
                self.n_time()
            )));
        }
        let mut g = self.clone();
        g.t_nodes.truncate(k_end + 1);
        Ok(g)
    }

    /// Box domain spanned by the spatial lattice.
    pub fn domain(&self) -> BoxDomain {
        BoxDomain {
            lo: self.lo.clone(),
            hi: self.hi(),
        }
    }
}

/// Uniform steps `dt` up to `uniform_end`, then steps growing linearly as
/// `dt + grading · (t - uniform_end)`; the last node is exactly `horizon`.
pub fn graded_times(horizon: f64, dt: f64, uniform_end: f64, grading: f64) -> Result<Vec<f64>> {
    if !(horizon > 0.0 && dt > 0.0 && grading >= 0.0 && uniform_end >= 0.0) {
        return Err(LabError::Parameter(format!(
            "bad time grid: horizon {horizon}, dt {dt}, uniform_end {uniform_end}, grading {grading}"
        )));
    }
    let mut t = vec![0.0];
    let mut k = 0usize;
    loop {
        let last = *t.last().unwrap();
        // Uniform nodes are placed by index to avoid drift.
        let next = if last < uniform_end - 1e-12 {
            ((k + 1) as f64 * dt).min(uniform_end.max(dt))
        } else {
            last + dt + grading * (last - uniform_end).max(0.0)
        };
        k += 1;
        if next >= horizon - 1e-9 * dt {
            if horizon - last < 0.5 * (next - last) && t.len() > 2 {
                t.pop();
            }
            t.push(horizon);
            break;
        }
        t.push(next);
        if t.len() > 50_000_000 {
            return Err(LabError::Parameter("time grid exceeds 5e7 nodes".into()));
        }
    }
    Ok(t)
}

/// Grid resolution and horizon settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Nodes per spatial axis.
    pub nx: Vec<usize>,
    pub dt: f64,
    pub t_uniform_end: f64,
    pub grading: f64,
    /// Fixed horizon; when absent the horizon is chosen from `tail_eps`.
    pub horizon: Option<f64>,
    pub tail_eps: f64,
    pub boundary: BoundaryMode,
    /// Overrides the problem's spatial box.
    pub domain_lo: Option<Vec<f64>>,
    pub domain_hi: Option<Vec<f64>>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            nx: vec![101],
            dt: 0.02,
            t_uniform_end: 2.0,
            grading: 0.04,
            horizon: None,
            tail_eps: 1e-4,
            boundary: BoundaryMode::Neumann,
            domain_lo: None,
            domain_hi: None,
        }
    }
}

impl GridConfig {
    pub fn horizon_for(&self, spec: &ProblemSpec) -> Result<f64> {
        match self.horizon {
            Some(h) => Ok(h),
            None => Ok(spec.horizon_for_tail(self.tail_eps)?.max(2.0 * self.dt)),
        }
    }

    pub fn build(&self, spec: &ProblemSpec) -> Result<Grid> {
        let horizon = self.horizon_for(spec)?;
        let t = graded_times(horizon, self.dt, self.t_uniform_end, self.grading)?;
        let domain = match (&self.domain_lo, &self.domain_hi) {
            (None, None) => spec.domain.clone(),
            (lo, hi) => BoxDomain::new(
                lo.clone().unwrap_or_else(|| spec.domain.lo.clone()),
                hi.clone().unwrap_or_else(|| spec.domain.hi.clone()),
            )?,
        };
        let shape = if self.nx.len() == 1 && domain.dim() > 1 {
            vec![self.nx[0]; domain.dim()]
        } else {
            self.nx.clone()
        };
        Grid::new(t, &domain, &shape, self.boundary)
    }
}

/// Derivative arrays of a [`ValueField`], each laid out like the values.
#[derive(Debug, Clone, PartialEq)]
pub struct Derivatives {
    /// One array per axis.
    pub grad: Vec<Vec<f64>>,
    /// `d × d` arrays, row-major over `(a, b)`.
    pub hess: Vec<Vec<f64>>,
    pub dt: Vec<f64>,
}

/// Scalar field over the space-time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    n_time: usize,
    n_space: usize,
    values: Vec<f64>,
    derivs: Option<Arc<Derivatives>>,
}

impl ValueField {
    pub fn new(grid: &Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(LabError::Shape(format!(
                "field has {} values, grid has {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(LabError::Contract(format!(
                "non-finite field value at flat index {pos}"
            )));
        }
        Ok(ValueField {
            n_time: grid.n_time(),
            n_space: grid.n_space(),
            values,
            derivs: None,
        })
    }

    pub fn zeros(grid: &Grid) -> Self {
        ValueField {
            n_time: grid.n_time(),
            n_space: grid.n_space(),
            values: vec![0.0; grid.len()],
            derivs: None,
        }
    }

    pub fn from_fn<F: Fn(f64, &[f64]) -> f64>(grid: &Grid, f: F) -> Result<Self> {
        let pts = grid.points();
        let mut v = Vec::with_capacity(grid.len());
        for &t in grid.t_nodes() {
            for p in &pts {
                v.push(f(t, p));
            }
        }
        ValueField::new(grid, v)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn n_time(&self) -> usize {
        self.n_time
    }

    pub fn n_space(&self) -> usize {
        self.n_space
    }

    #[inline]
    pub fn at(&self, k: usize, i: usize) -> f64 {
        self.values[k * self.n_space + i]
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        &self.values[k * self.n_space..(k + 1) * self.n_space]
    }

    pub fn derivatives(&self) -> Result<&Derivatives> {
        self.derivs
            .as_deref()
            .ok_or_else(|| LabError::State("field derivatives not populated".into()))
    }

    pub fn has_derivatives(&self) -> bool {
        self.derivs.is_some()
    }

    pub fn check_grid(&self, grid: &Grid) -> Result<()> {
        if self.n_time != grid.n_time() || self.n_space != grid.n_space() {
            return Err(LabError::Shape(format!(
                "field is {}x{}, grid is {}x{}",
                self.n_time,
                self.n_space,
                grid.n_time(),
                grid.n_space()
            )));
        }
        Ok(())
    }

    /// Spatial gradient at `(k, i)`.
    pub fn grad_at(&self, k: usize, i: usize) -> Result<Vec<f64>> {
        let d = self.derivatives()?;
        Ok(d.grad.iter().map(|g| g[k * self.n_space + i]).collect())
    }

    /// Restriction to the first `n_time` time nodes (derivatives dropped).
    pub fn truncated(&self, n_time: usize) -> ValueField {
        ValueField {
            n_time,
            n_space: self.n_space,
            values: self.values[..n_time * self.n_space].to_vec(),
            derivs: None,
        }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sup_diff(&self, other: &ValueField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Spatial gradient of one time slice at node `i`.
pub fn slice_grad(grid: &Grid, u: &[f64], i: usize, out: &mut [f64]) {
    for (a, o) in out.iter_mut().enumerate() {
        *o = grid.grad_stencil(i, a).apply(u);
    }
}

/// `tr(C · D²u)` of one time slice at node `i`, `C` row-major `d × d`.
pub fn slice_trace(grid: &Grid, u: &[f64], i: usize, c: &[f64]) -> f64 {
    let d = grid.dim();
    let mut acc = 0.0;
    for a in 0..d {
        for b in 0..d {
            let w = c[a * d + b];
            if w != 0.0 {
                acc += w * grid.hess_stencil(i, a, b).apply(u);
            }
        }
    }
    acc
}

/// Time derivative of a field-shaped array.
pub fn time_derivative(grid: &Grid, f: &[f64]) -> Vec<f64> {
    let ns = grid.n_space();
    let mut out = vec![0.0; f.len()];
    out.par_chunks_mut(ns).enumerate().for_each(|(k, row)| {
        let [(hi, wh), (lo, wl)] = grid.dt_stencil(k);
        for (i, o) in row.iter_mut().enumerate() {
            *o = wh * f[hi * ns + i] + wl * f[lo * ns + i];
        }
    });
    out
}

/// Returns a copy of `field` with gradient, Hessian and time derivative
/// populated.
pub fn finite_diff(field: &ValueField, grid: &Grid) -> Result<ValueField> {
    field.check_grid(grid)?;
    let d = grid.dim();
    let ns = grid.n_space();
    let grad_st: Vec<Vec<Stencil>> = (0..d)
        .map(|a| (0..ns).map(|i| grid.grad_stencil(i, a)).collect())
        .collect();
    let hess_st: Vec<Vec<Stencil>> = (0..d * d)
        .map(|ab| (0..ns).map(|i| grid.hess_stencil(i, ab / d, ab % d)).collect())
        .collect();
    let apply = |st: &Vec<Stencil>| -> Vec<f64> {
        let mut out = vec![0.0; field.values.len()];
        out.par_chunks_mut(ns).enumerate().for_each(|(k, row)| {
            let u = field.slice(k);
            for (o, s) in row.iter_mut().zip(st) {
                *o = s.apply(u);
            }
        });
        out
    };
    let derivs = Derivatives {
        grad: grad_st.iter().map(apply).collect(),
        hess: hess_st.iter().map(apply).collect(),
        dt: time_derivative(grid, &field.values),
    };
    Ok(ValueField {
        derivs: Some(Arc::new(derivs)),
        ..field.clone()
    })
}

// ── Norms ────────────────────────────────────────────────────────────────

/// Exponents of the discrete parabolic norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormConfig {
    pub alpha: f64,
    pub p: f64,
    pub n_max: usize,
}

impl NormConfig {
    /// `p = (d + 2) / (1 - alpha)`.
    pub fn new(alpha: f64, dim: usize, n_max: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(LabError::Parameter(format!("Hölder exponent {alpha} not in (0, 1)")));
        }
        if n_max == 0 {
            return Err(LabError::Parameter("n_max must be positive".into()));
        }
        Ok(NormConfig {
            alpha,
            p: (dim as f64 + 2.0) / (1.0 - alpha),
            n_max,
        })
    }
}

/// Sub-box of the grid: `[t_lo, t_hi] × Π [lo_a, hi_a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub t_lo: f64,
    pub t_hi: f64,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Region {
    pub fn whole(grid: &Grid) -> Self {
        Region {
            t_lo: 0.0,
            t_hi: grid.horizon(),
            lo: grid.lo().to_vec(),
            hi: grid.hi(),
        }
    }

    /// `[0, n] × [-n, n]^d`, the box hull of the cylinder of radius `n`.
    pub fn cylinder(n: f64, dim: usize) -> Self {
        Region {
            t_lo: 0.0,
            t_hi: n,
            lo: vec![-n; dim],
            hi: vec![n; dim],
        }
    }

    /// Node index ranges `(time, per axis)` inside the region, or `None` if
    /// empty.
    fn index_ranges(&self, grid: &Grid) -> Option<(std::ops::Range<usize>, Vec<std::ops::Range<usize>>)> {
        let slack = 1e-12;
        let t = grid.t_nodes();
        let k0 = t.partition_point(|&s| s < self.t_lo - slack);
        let k1 = t.partition_point(|&s| s <= self.t_hi + slack);
        if k0 >= k1 {
            return None;
        }
        let mut axes = Vec::with_capacity(grid.dim());
        for a in 0..grid.dim() {
            let h = grid.dx()[a];
            let n = grid.shape()[a];
            let j0 = ((self.lo[a] - grid.lo()[a]) / h - slack).ceil().max(0.0) as usize;
            let j1 = (((self.hi[a] - grid.lo()[a]) / h + slack).floor() + 1.0).min(n as f64);
            if j1 <= j0 as f64 {
                return None;
            }
            axes.push(j0..j1 as usize);
        }
        Some((k0..k1, axes))
    }
}

/// Hölder estimate with its sampling record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HolderEstimate {
    pub value: f64,
    pub pairs: usize,
    /// Seed of the pair subsampling, `None` when all pairs were enumerated.
    pub seed: Option<u64>,
}

struct RegionNodes {
    times: Vec<usize>,
    axes: Vec<Vec<usize>>,
}

impl RegionNodes {
    fn count_space(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    fn count(&self) -> usize {
        self.times.len() * self.count_space()
    }

    /// Flat space index and per-axis coordinates of the `s`-th region node.
    fn space_node(&self, grid: &Grid, mut s: usize) -> usize {
        let mut i = 0;
        for a in (0..self.axes.len()).rev() {
            let n = self.axes[a].len();
            i += self.axes[a][s % n] * grid.stride(a);
            s /= n;
        }
        i
    }
}

fn region_nodes(grid: &Grid, region: &Region) -> Option<RegionNodes> {
    let (tr, axes) = region.index_ranges(grid)?;
    Some(RegionNodes {
        times: tr.collect(),
        axes: axes.into_iter().map(|r| r.collect()).collect(),
    })
}

fn parabolic_dist(grid: &Grid, ka: usize, ia: usize, kb: usize, ib: usize) -> f64 {
    let t = grid.t_nodes();
    let mut r2 = 0.0;
    for a in 0..grid.dim() {
        let dx = grid.coord(ia, a) - grid.coord(ib, a);
        r2 += dx * dx;
    }
    (t[ka] - t[kb]).abs() + r2
}

/// Hölder seminorm of a field-shaped array over `region`, with sampling
/// record. All pairs are enumerated when there are at most
/// [`HOLDER_MAX_PAIRS`]; otherwise that many pairs are drawn with
/// `ChaCha8(seed)`, each from a uniform node and a uniform partner inside the
/// unit parabolic window around it.
pub fn holder_estimate(grid: &Grid, f: &[f64], alpha: f64, region: &Region, seed: u64) -> HolderEstimate {
    let Some(nodes) = region_nodes(grid, region) else {
        return HolderEstimate {
            value: 0.0,
            pairs: 0,
            seed: None,
        };
    };
    let ns = grid.n_space();
    let n = nodes.count();
    let nsp = nodes.count_space();
    let node = |s: usize| -> (usize, usize) { (nodes.times[s / nsp], nodes.space_node(grid, s % nsp)) };
    let quotient = |(ka, ia): (usize, usize), (kb, ib): (usize, usize)| -> Option<f64> {
        let rho = parabolic_dist(grid, ka, ia, kb, ib);
        if rho > 0.0 && rho <= 1.0 {
            Some((f[ka * ns + ia] - f[kb * ns + ib]).abs() / rho.powf(0.5 * alpha))
        } else {
            None
        }
    };
    let total_pairs = n.saturating_mul(n.saturating_sub(1)) / 2;
    if total_pairs <= HOLDER_MAX_PAIRS {
        let value = (0..n)
            .into_par_iter()
            .map(|a| {
                let pa = node(a);
                ((a + 1)..n).filter_map(|b| quotient(pa, node(b))).fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max);
        return HolderEstimate {
            value,
            pairs: total_pairs,
            seed: None,
        };
    }
    let t = grid.t_nodes();
    let k_lo = nodes.times[0];
    let k_hi = *nodes.times.last().unwrap();
    let windows: Vec<usize> = (0..grid.dim()).map(|a| (1.0 / grid.dx()[a]).floor() as usize).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0.0_f64;
    for _ in 0..HOLDER_MAX_PAIRS {
        let (ka, ia) = node(rng.random_range(0..n));
        let t_lo = t[ka] - 1.0;
        let t_hi = t[ka] + 1.0;
        let kb0 = t.partition_point(|&s| s < t_lo).max(k_lo);
        let kb1 = t.partition_point(|&s| s <= t_hi).min(k_hi + 1);
        let kb = rng.random_range(kb0..kb1);
        let mut ib = 0;
        for a in 0..grid.dim() {
            let ax = &nodes.axes[a];
            let ja = grid.axis_index(ia, a);
            let lo = ja.saturating_sub(windows[a]).max(ax[0]);
            let hi = (ja + windows[a]).min(*ax.last().unwrap());
            ib += rng.random_range(lo..=hi) * grid.stride(a);
        }
        if let Some(q) = quotient((ka, ia), (kb, ib)) {
            best = best.max(q);
        }
    }
    HolderEstimate {
        value: best,
        pairs: HOLDER_MAX_PAIRS,
        seed: Some(seed),
    }
}

/// Hölder seminorm of `field` over `region` (see [`holder_estimate`]).
pub fn holder_seminorm(field: &ValueField, grid: &Grid, alpha: f64, region: &Region) -> Result<f64> {
    field.check_grid(grid)?;
    Ok(holder_estimate(grid, field.values(), alpha, region, HOLDER_SEED).value)
}

/// All derivative arrays `∂_t^j D_x^a u`, `j ≤ 1`, `|a| ≤ 2` (the symmetric
/// Hessian counted once per unordered pair).
fn derivative_components(field: &ValueField, grid: &Grid) -> Result<Vec<Vec<f64>>> {
    let der = field.derivatives()?;
    let d = grid.dim();
    let mut spatial: Vec<Vec<f64>> = vec![field.values.clone()];
    spatial.extend(der.grad.iter().cloned());
    for a in 0..d {
        for b in a..d {
            spatial.push(der.hess[a * d + b].clone());
        }
    }
    let mut comps = Vec::with_capacity(2 * spatial.len());
    for (n, s) in spatial.into_iter().enumerate() {
        let dt = if n == 0 {
            der.dt.clone()
        } else {
            time_derivative(grid, &s)
        };
        comps.push(s);
        comps.push(dt);
    }
    Ok(comps)
}

fn sup_over(grid: &Grid, f: &[f64], region: &Region) -> f64 {
    let Some(nodes) = region_nodes(grid, region) else {
        return 0.0;
    };
    let ns = grid.n_space();
    let nsp = nodes.count_space();
    let mut best = 0.0_f64;
    for &k in &nodes.times {
        for s in 0..nsp {
            best = best.max(f[k * ns + nodes.space_node(grid, s)].abs());
        }
    }
    best
}

/// `Σ_{N=1}^{n_max} 2^{-N} ‖u‖_{C^{1,2}(D_N ∩ grid)}` where each local norm
/// sums sup-norm and Hölder seminorm over all derivatives of order
/// `≤ (1, 2)`.
pub fn weighted_global_norm(field: &ValueField, grid: &Grid, cfg: &NormConfig) -> Result<f64> {
    field.check_grid(grid)?;
    let comps = derivative_components(field, grid)?;
    let terms: Vec<f64> = (1..=cfg.n_max)
        .into_par_iter()
        .map(|n| {
            let region = Region::cylinder(n as f64, grid.dim());
            let local: f64 = comps
                .iter()
                .map(|c| {
                    sup_over(grid, c, &region)
                        + holder_estimate(grid, c, cfg.alpha, &region, HOLDER_SEED ^ n as u64).value
                })
                .sum();
            local * 0.5f64.powi(n as i32)
        })
        .collect();
    Ok(terms.iter().sum())
}

/// `Σ_components sup_{(t,x)} ‖·‖_{L^p(D_1(t,x) ∩ grid)}` with `D_1(t,x) =
/// [t, t+1] × [x-1, x+1]^d` anchored at grid nodes. The discrete `L^p` norm
/// integrates cell averages of `|f|^p` over the cells inside the box.
pub fn local_sobolev_norm(field: &ValueField, grid: &Grid, cfg: &NormConfig) -> Result<f64> {
    field.check_grid(grid)?;
    let comps = derivative_components(field, grid)?;
    let norms: Vec<f64> = comps.par_iter().map(|c| local_lp_sup(grid, c, cfg.p)).collect();
    Ok(norms.iter().sum())
}

fn local_lp_sup(grid: &Grid, f: &[f64], p: f64) -> f64 {
    let d = grid.dim();
    let t = grid.t_nodes();
    let nt = grid.n_time();
    let shape = grid.shape();
    let ns = grid.n_space();
    let cell_vol: f64 = grid.dx().iter().product();
    // Cell grid: (nt-1) × Π (n_a - 1), row-major with time slowest.
    let cshape: Vec<usize> = std::iter::once(nt - 1).chain(shape.iter().map(|n| n - 1)).collect();
    let ncell: usize = cshape.iter().product();
    let corners = 1usize << (d + 1);
    let mut cells = vec![0.0; ncell];
    let mut idx = vec![0usize; d + 1];
    for (c, cell) in cells.iter_mut().enumerate() {
        let mut r = c;
        for ax in (0..=d).rev() {
            idx[ax] = r % cshape[ax];
            r /= cshape[ax];
        }
        let mut acc = 0.0;
        for corner in 0..corners {
            let k = idx[0] + (corner & 1);
            let mut i = 0;
            for a in 0..d {
                let j = idx[a + 1] + ((corner >> (a + 1)) & 1);
                i += j * grid.stride(a);
            }
            acc += f[k * ns + i].abs().powf(p);
        }
        *cell = acc / corners as f64 * (t[idx[0] + 1] - t[idx[0]]) * cell_vol;
    }
    // Inclusive prefix sums over all d+1 cell axes.
    let mut pre = cells;
    let mut stride = 1;
    for ax in (0..=d).rev() {
        let n = cshape[ax];
        for c in 0..ncell {
            if (c / stride) % n > 0 {
                pre[c] += pre[c - stride];
            }
        }
        stride *= n;
    }
    let box_sum = |lo: &[usize], hi: &[usize]| -> f64 {
        // Sum over cells with lo <= idx < hi (per axis), inclusion-exclusion.
        let mut total = 0.0;
        for mask in 0..(1usize << (d + 1)) {
            let mut c = 0;
            let mut sign = 1.0;
            let mut skip = false;
            let mut s = 1;
            for ax in (0..=d).rev() {
                let use_lo = (mask >> ax) & 1 == 1;
                let end = if use_lo { lo[ax] } else { hi[ax] };
                if end == 0 {
                    skip = true;
                    break;
                }
                if use_lo {
                    sign = -sign;
                }
                c += (end - 1) * s;
                s *= cshape[ax];
            }
            if !skip {
                total += sign * pre[c];
            }
        }
        total
    };
    let reach: Vec<usize> = grid.dx().iter().map(|h| ((1.0 + 1e-12) / h).floor() as usize).collect();
    let mut best = 0.0_f64;
    let mut lo = vec![0usize; d + 1];
    let mut hi = vec![0usize; d + 1];
    for k in 0..nt - 1 {
        let k_end = t.partition_point(|&s| s <= t[k] + 1.0 + 1e-12) - 1;
        if k_end <= k {
            continue;
        }
        lo[0] = k;
        hi[0] = k_end;
        for i in 0..ns {
            for a in 0..d {
                let j = grid.axis_index(i, a);
                lo[a + 1] = j.saturating_sub(reach[a]);
                hi[a + 1] = (j + reach[a]).min(shape[a] - 1);
            }
            best = best.max(box_sum(&lo, &hi));
        }
    }
    best.max(0.0).powf(1.0 / p)
}

// ── Serialization ────────────────────────────────────────────────────────

const FIELD_MAGIC: &[u8; 8] = b"EQLFLD01";

/// Array over the grid with an optional trailing axis (action nodes).
#[derive(Debug, Clone, PartialEq)]
pub struct FieldFile {
    pub t_nodes: Vec<f64>,
    pub lo: Vec<f64>,
    pub dx: Vec<f64>,
    pub shape: Vec<usize>,
    pub extra: Vec<f64>,
    pub data: Vec<f64>,
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64s(w: &mut impl Write, v: &[f64]) -> Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

/// Little-endian layout: magic, `d`, `n_time`, shape, `n_extra`, time nodes,
/// per-axis `(lo, dx)`, extra-axis nodes, then data row-major over
/// `(t, x…, extra)`.
pub fn write_field(path: &Path, grid: &Grid, extra: &[f64], data: &[f64]) -> Result<()> {
    let per = extra.len().max(1);
    if data.len() != grid.len() * per {
        return Err(LabError::Shape(format!(
            "data length {} does not match grid {} x {per}",
            data.len(),
            grid.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FIELD_MAGIC)?;
    put_u64(&mut w, grid.dim() as u64)?;
    put_u64(&mut w, grid.n_time() as u64)?;
    for &n in grid.shape() {
        put_u64(&mut w, n as u64)?;
    }
    put_u64(&mut w, extra.len() as u64)?;
    put_f64s(&mut w, grid.t_nodes())?;
    for a in 0..grid.dim() {
        put_f64s(&mut w, &[grid.lo()[a], grid.dx()[a]])?;
    }
    put_f64s(&mut w, extra)?;
    put_f64s(&mut w, data)?;
    w.flush()?;
    Ok(())
}

/// Time-independent array over the spatial lattice (one time node at 0),
/// e.g. a policy with action nodes as the extra axis.
pub fn write_static_field(path: &Path, grid: &Grid, extra: &[f64], data: &[f64]) -> Result<()> {
    let per = extra.len().max(1);
    if data.len() != grid.n_space() * per {
        return Err(LabError::Shape(format!(
            "data length {} does not match lattice {} x {per}",
            data.len(),
            grid.n_space()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FIELD_MAGIC)?;
    put_u64(&mut w, grid.dim() as u64)?;
    put_u64(&mut w, 1)?;
    for &n in grid.shape() {
        put_u64(&mut w, n as u64)?;
    }
    put_u64(&mut w, extra.len() as u64)?;
    put_f64s(&mut w, &[0.0])?;
    for a in 0..grid.dim() {
        put_f64s(&mut w, &[grid.lo()[a], grid.dx()[a]])?;
    }
    put_f64s(&mut w, extra)?;
    put_f64s(&mut w, data)?;
    w.flush()?;
    Ok(())
}

pub fn read_field(path: &Path) -> Result<FieldFile> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != FIELD_MAGIC {
        return Err(LabError::Config(format!("{} is not a field file", path.display())));
    }
    let d = get_u64(&mut r)? as usize;
    if !(1..=2).contains(&d) {
        return Err(LabError::Config(format!("field file dimension {d}")));
    }
    let nt = get_u64(&mut r)? as usize;
    let shape: Vec<usize> = (0..d)
        .map(|_| get_u64(&mut r).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let n_extra = get_u64(&mut r)? as usize;
    let t_nodes = get_f64s(&mut r, nt)?;
    let mut lo = Vec::with_capacity(d);
    let mut dx = Vec::with_capacity(d);
    for _ in 0..d {
        let v = get_f64s(&mut r, 2)?;
        lo.push(v[0]);
        dx.push(v[1]);
    }
    let extra = get_f64s(&mut r, n_extra)?;
    let n = nt * shape.iter().product::<usize>() * n_extra.max(1);
    let data = get_f64s(&mut r, n)?;
    Ok(FieldFile {
        t_nodes,
        lo,
        dx,
        shape,
        extra,
        data,
    })
}

impl FieldFile {
    pub fn grid(&self, boundary: BoundaryMode) -> Result<Grid> {
        let hi: Vec<f64> = self
            .lo
            .iter()
            .zip(&self.dx)
            .zip(&self.shape)
            .map(|((l, h), &n)| l + h * (n - 1) as f64)
            .collect();
        Grid::new(
            self.t_nodes.clone(),
            &BoxDomain::new(self.lo.clone(), hi)?,
            &self.shape,
            boundary,
        )
    }
}

/// CSV with columns `t, x0[, x1], value` for every node of every listed time
/// index.
pub fn write_field_csv(path: &Path, grid: &Grid, field: &ValueField, time_indices: &[usize]) -> Result<()> {
    field.check_grid(grid)?;
    let mut w = BufWriter::new(File::create(path)?);
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((0..grid.dim()).map(|a| format!("x{a}")))
        .chain(std::iter::once("value".to_string()))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for &k in time_indices {
        let t = grid.t_nodes()[k];
        for i in 0..grid.n_space() {
            write!(w, "{t:e}")?;
            for a in 0..grid.dim() {
                write!(w, ",{:e}", grid.coord(i, a))?;
            }
            writeln!(w, ",{:e}", field.at(k, i))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the `value` column of a CSV written by [`write_field_csv`].
pub fn read_csv_column(path: &Path, column: &str) -> Result<Vec<f64>> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| LabError::Config(format!("{} is empty", path.display())))??;
    let col = header
        .split(',')
        .position(|h| h == column)
        .ok_or_else(|| LabError::Config(format!("no column '{column}' in {}", path.display())))?;
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        let cell = line
            .split(',')
            .nth(col)
            .ok_or_else(|| LabError::Config(format!("short row in {}", path.display())))?;
        out.push(
            cell.parse::<f64>()
                .map_err(|e| LabError::Config(format!("bad number '{cell}': {e}")))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_grid(n: usize, lo: f64, hi: f64, t: Vec<f64>, mode: BoundaryMode) -> Grid {
        Grid::new(t, &BoxDomain::new(vec![lo], vec![hi]).unwrap(), &[n], mode).unwrap()
    }

    fn uniform_t(n: usize, dt: f64) -> Vec<f64> {
        (0..n).map(|k| k as f64 * dt).collect()
    }

    #[test]
    fn grid_rejects_degenerate_axes() {
        let dom = BoxDomain::new(vec![0.0], vec![1.0]).unwrap();
        assert!(Grid::new(uniform_t(5, 0.1), &dom, &[2], BoundaryMode::Neumann).is_err());
        assert!(Grid::new(vec![0.1, 0.2, 0.3], &dom, &[5], BoundaryMode::Neumann).is_err());
        assert!(Grid::new(vec![0.0, 0.2, 0.2], &dom, &[5], BoundaryMode::Neumann).is_err());
    }

    #[test]
    fn graded_times_hit_horizon() {
        let t = graded_times(100.0, 0.02, 2.0, 0.04).unwrap();
        assert_eq!(t[0], 0.0);
        assert_eq!(*t.last().unwrap(), 100.0);
        assert!((t[100] - 2.0).abs() < 1e-12);
        assert!(t.windows(2).all(|w| w[1] > w[0]));
        let u = graded_times(1.0, 0.01, 2.0, 0.0).unwrap();
        assert_eq!(u.len(), 101);
    }

    #[test]
    fn refined_grid_nests() {
        let g = line_grid(
            11,
            -1.0,
            1.0,
            graded_times(10.0, 0.1, 1.0, 0.1).unwrap(),
            BoundaryMode::Neumann,
        );
        let f = g.refined();
        assert_eq!(f.shape(), &[21]);
        for (k, &t) in g.t_nodes().iter().enumerate() {
            assert_eq!(f.t_nodes()[2 * k], t);
        }
        for i in 0..11 {
            assert!((f.coord(2 * i, 0) - g.coord(i, 0)).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_field_has_zero_derivatives() {
        let g = line_grid(21, 0.0, 1.0, uniform_t(5, 0.1), BoundaryMode::LinearExtrapolation);
        let f = finite_diff(&ValueField::from_fn(&g, |_, _| 3.5).unwrap(), &g).unwrap();
        let d = f.derivatives().unwrap();
        assert!(d.grad[0].iter().chain(&d.hess[0]).chain(&d.dt).all(|&v| v == 0.0));
    }

    #[test]
    fn linear_field_is_differentiated_exactly() {
        for mode in [BoundaryMode::Neumann, BoundaryMode::LinearExtrapolation] {
            let g = line_grid(41, -1.0, 1.0, uniform_t(4, 0.25), mode);
            let f = finite_diff(&ValueField::from_fn(&g, |_, x| x[0]).unwrap(), &g).unwrap();
            let d = f.derivatives().unwrap();
            for i in g.interior_nodes() {
                assert!((d.grad[0][i] - 1.0).abs() < 1e-12);
                assert!(d.hess[0][i].abs() < 1e-9);
            }
            if mode == BoundaryMode::LinearExtrapolation {
                assert!((d.grad[0][0] - 1.0).abs() < 1e-12);
                assert!(d.hess[0][0].abs() < 1e-9);
            } else {
                assert_eq!(d.grad[0][0], 0.0);
            }
        }
    }

    #[test]
    fn quadratic_hessian_is_two() {
        let g = line_grid(201, -1.0, 1.0, uniform_t(3, 0.01), BoundaryMode::Neumann);
        let f = finite_diff(&ValueField::from_fn(&g, |_, x| x[0] * x[0]).unwrap(), &g).unwrap();
        let d = f.derivatives().unwrap();
        for i in g.interior_nodes() {
            assert!((d.hess[0][i] - 2.0).abs() < 1e-9, "{}", d.hess[0][i]);
        }
    }

    #[test]
    fn time_derivative_uses_forward_difference_at_origin() {
        let t = vec![0.0, 0.1, 0.3, 0.6];
        let g = line_grid(5, 0.0, 1.0, t, BoundaryMode::Neumann);
        let f = finite_diff(&ValueField::from_fn(&g, |t, _| t * t).unwrap(), &g).unwrap();
        let d = f.derivatives().unwrap();
        assert!((d.dt[0] - 0.1).abs() < 1e-14);
        assert!((d.dt[5] - (0.09 - 0.0) / 0.3).abs() < 1e-14);
        assert!((d.dt[15] - (0.36 - 0.09) / 0.3).abs() < 1e-14);
    }

    #[test]
    fn stencils_exact_on_low_degree_polynomials_in_2d() {
        let dom = BoxDomain::new(vec![-1.0, 0.0], vec![1.0, 2.0]).unwrap();
        let g = Grid::new(uniform_t(4, 0.5), &dom, &[11, 9], BoundaryMode::Neumann).unwrap();
        let f = ValueField::from_fn(&g, |t, x| {
            1.0 + 2.0 * t + x[0] - 3.0 * x[1] + x[0] * x[0] + 0.5 * x[1] * x[1] - x[0] * x[1] + t * x[0] * x[1] * x[1]
        })
        .unwrap();
        let f = finite_diff(&f, &g).unwrap();
        let d = f.derivatives().unwrap();
        let ns = g.n_space();
        for k in 1..3 {
            let t = g.t_nodes()[k];
            for i in g.interior_nodes() {
                let x = g.point(i);
                let j = k * ns + i;
                let gx = 1.0 + 2.0 * x[0] - x[1] + t * x[1] * x[1];
                let gy = -3.0 + x[1] - x[0] + 2.0 * t * x[0] * x[1];
                assert!((d.grad[0][j] - gx).abs() < 1e-11);
                assert!((d.grad[1][j] - gy).abs() < 1e-11);
                assert!((d.hess[0][j] - 2.0).abs() < 1e-9);
                assert!((d.hess[3][j] - (1.0 + 2.0 * t * x[0])).abs() < 1e-9);
                assert!((d.hess[1][j] - (-1.0 + 2.0 * t * x[1])).abs() < 1e-9);
                assert_eq!(d.hess[1][j], d.hess[2][j]);
                assert!((d.dt[j] - (2.0 + x[0] * x[1] * x[1])).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn hessian_converges_at_second_order() {
        let err = |n: usize| {
            let g = line_grid(n, 0.0, 3.0, uniform_t(3, 0.1), BoundaryMode::Neumann);
            let f = finite_diff(&ValueField::from_fn(&g, |t, x| x[0].sin() * (-t).exp()).unwrap(), &g).unwrap();
            let d = f.derivatives().unwrap();
            let ns = g.n_space();
            let mut e = 0.0_f64;
            for k in 0..3 {
                for i in g.interior_nodes() {
                    let exact = -g.coord(i, 0).sin() * (-g.t_nodes()[k]).exp();
                    e = e.max((d.hess[0][k * ns + i] - exact).abs());
                }
            }
            e
        };
        let ratio = err(31) / err(61);
        assert!(ratio >= 3.5, "{ratio}");
    }

    #[test]
    fn holder_of_identity_is_one() {
        let g = line_grid(101, 0.0, 1.0, uniform_t(3, 0.5), BoundaryMode::Neumann);
        let f = ValueField::from_fn(&g, |_, x| x[0]).unwrap();
        let region = Region {
            t_lo: 0.0,
            t_hi: 0.0,
            lo: vec![0.0],
            hi: vec![1.0],
        };
        let v = holder_seminorm(&f, &g, 0.5, &region).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{v}");
        let c = ValueField::from_fn(&g, |_, _| 2.0).unwrap();
        assert_eq!(holder_seminorm(&c, &g, 0.5, &region).unwrap(), 0.0);
    }

    #[test]
    fn sampled_holder_is_reproducible() {
        let g = line_grid(401, -4.0, 4.0, uniform_t(401, 0.01), BoundaryMode::Neumann);
        let f = ValueField::from_fn(&g, |t, x| (x[0] + t).sin()).unwrap();
        let r = Region::whole(&g);
        let a = holder_estimate(&g, f.values(), 0.5, &r, HOLDER_SEED);
        let b = holder_estimate(&g, f.values(), 0.5, &r, HOLDER_SEED);
        assert_eq!(a, b);
        assert_eq!(a.seed, Some(HOLDER_SEED));
        assert!(a.value > 0.5 && a.value < 2.5, "{}", a.value);
    }

    #[test]
    fn weighted_global_norm_of_constant() {
        let g = line_grid(
            9,
            -1.0,
            1.0,
            graded_times(30.0, 0.25, 1.0, 0.5).unwrap(),
            BoundaryMode::Neumann,
        );
        let f = finite_diff(&ValueField::from_fn(&g, |_, _| 1.5).unwrap(), &g).unwrap();
        let cfg = NormConfig::new(0.5, 1, 20).unwrap();
        let v = weighted_global_norm(&f, &g, &cfg).unwrap();
        assert!((v - 1.5 * (1.0 - 0.5f64.powi(20))).abs() < 1e-12, "{v}");
        let z = finite_diff(&ValueField::zeros(&g), &g).unwrap();
        assert_eq!(weighted_global_norm(&z, &g, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn weighted_global_norm_grows_with_truncation() {
        let g = line_grid(
            17,
            -2.0,
            2.0,
            graded_times(20.0, 0.1, 1.0, 0.2).unwrap(),
            BoundaryMode::Neumann,
        );
        let f = finite_diff(&ValueField::from_fn(&g, |t, x| x[0].cos() / (1.0 + t)).unwrap(), &g).unwrap();
        let a = weighted_global_norm(&f, &g, &NormConfig::new(0.5, 1, 5).unwrap()).unwrap();
        let b = weighted_global_norm(&f, &g, &NormConfig::new(0.5, 1, 10).unwrap()).unwrap();
        assert!(a <= b && a > 0.0);
    }

    #[test]
    fn local_sobolev_norm_of_constant_on_unit_box() {
        let g = line_grid(11, 0.0, 1.0, uniform_t(11, 0.1), BoundaryMode::Neumann);
        let cfg = NormConfig::new(0.5, 1, 1).unwrap();
        let f = finite_diff(&ValueField::from_fn(&g, |_, _| 2.0).unwrap(), &g).unwrap();
        let v = local_sobolev_norm(&f, &g, &cfg).unwrap();
        assert!((v - 2.0).abs() < 1e-12, "{v}");
        let z = finite_diff(&ValueField::zeros(&g), &g).unwrap();
        assert_eq!(local_sobolev_norm(&z, &g, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn field_roundtrips_through_binary_file() {
        let dir = tempfile::tempdir().unwrap();
        let g = line_grid(7, -1.0, 2.0, vec![0.0, 0.5, 2.0], BoundaryMode::Neumann);
        let f = ValueField::from_fn(&g, |t, x| t - x[0]).unwrap();
        let p = dir.path().join("v.bin");
        write_field(&p, &g, &[], f.values()).unwrap();
        let back = read_field(&p).unwrap();
        assert_eq!(back.data, f.values());
        assert_eq!(back.grid(BoundaryMode::Neumann).unwrap(), g);
        let c = dir.path().join("v.csv");
        write_field_csv(&c, &g, &f, &[0, 2]).unwrap();
        let col = read_csv_column(&c, "value").unwrap();
        assert_eq!(col.len(), 14);
        assert_eq!(col[7], f.at(2, 0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn small_grid() -> Grid {
            line_grid(9, -1.0, 1.0, uniform_t(6, 0.3), BoundaryMode::Neumann)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn norms_are_seminorms(
                a in proptest::collection::vec(-3.0f64..3.0, 54),
                b in proptest::collection::vec(-3.0f64..3.0, 54),
                s in -4.0f64..4.0,
            ) {
                let g = small_grid();
                let cfg = NormConfig::new(0.4, 1, 4).unwrap();
                let fa = finite_diff(&ValueField::new(&g, a.clone()).unwrap(), &g).unwrap();
                let fb = finite_diff(&ValueField::new(&g, b.clone()).unwrap(), &g).unwrap();
                let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
                let fs = finite_diff(&ValueField::new(&g, sum).unwrap(), &g).unwrap();
                let scaled: Vec<f64> = a.iter().map(|x| s * x).collect();
                let fsc = finite_diff(&ValueField::new(&g, scaled).unwrap(), &g).unwrap();
                let region = Region::whole(&g);
                let norms = |f: &ValueField| -> [f64; 3] {
                    [
                        holder_seminorm(f, &g, 0.4, &region).unwrap(),
                        weighted_global_norm(f, &g, &cfg).unwrap(),
                        local_sobolev_norm(f, &g, &cfg).unwrap(),
                    ]
                };
                let (va, vb, vs, vsc) = (norms(&fa), norms(&fb), norms(&fs), norms(&fsc));
                for n in 0..3 {
                    let (na, nb, ns, nsc) = (va[n], vb[n], vs[n], vsc[n]);
                    prop_assert!(na >= 0.0);
                    prop_assert!(ns <= na + nb + 1e-12 * (1.0 + na + nb));
                    prop_assert!((nsc - s.abs() * na).abs() <= 1e-10 * (1.0 + nsc));
                }
            }
        }
    }
}
