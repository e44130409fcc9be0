//! One-dimensional quadrature primitives: adaptive Simpson on finite
//! windows, semi-infinite tail integrals by doubling horizons, and the
//! node/weight rules used for action grids.

use crate::error::{LabError, Result};

/// Horizon (measured from the lower limit) beyond which a tail integral is
/// declared divergent unless its increments decay geometrically.
pub const TAIL_HORIZON_CAP: f64 = 1.0e6;
/// Window increment below which a tail integral is considered converged.
pub const TAIL_INCREMENT_TOL: f64 = 1.0e-10;

const MAX_SIMPSON_DEPTH: usize = 48;

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance
/// `tol`. Returns `None` when the recursion depth limit is reached without
/// meeting the tolerance.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> Option<f64> {
    if b <= a {
        return Some(0.0);
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(f, a, b, fa, fm, fb, whole, tol, 0)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> Option<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if !delta.is_finite() {
        return None;
    }
    if depth >= 4 && delta.abs() <= 15.0 * tol {
        return Some(left + right + delta / 15.0);
    }
    if depth >= MAX_SIMPSON_DEPTH {
        return None;
    }
    let l = simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth + 1)?;
    let r = simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth + 1)?;
    Some(l + r)
}

/// Integral of a nonnegative integrand over `[t0, ∞)`.
///
/// Windows `[t0 + 2^k - 1, t0 + 2^{k+1} - 1]` are integrated in turn until a
/// window contributes less than [`TAIL_INCREMENT_TOL`]. If the horizon cap is
/// reached first, the remainder is extrapolated geometrically from the ratio
/// of the last two window increments, provided that ratio is at most 0.95;
/// otherwise the integral is reported divergent.
pub fn tail_integral<F: Fn(f64) -> f64>(f: &F, t0: f64) -> Result<f64> {
    let mut total = 0.0_f64;
    let mut lo = 0.0_f64;
    let mut width = 1.0_f64;
    let mut prev_inc = f64::NAN;
    loop {
        let hi = lo + width;
        let inc = adaptive_simpson(f, t0 + lo, t0 + hi, 1.0e-14_f64.max(1.0e-12 * total.abs()))
            .ok_or_else(|| LabError::Assumption(format!("quadrature failed on window [{}, {}]", t0 + lo, t0 + hi)))?;
        if !inc.is_finite() {
            return Err(LabError::Assumption(format!(
                "non-finite integrand on window [{}, {}]",
                t0 + lo,
                t0 + hi
            )));
        }
        total += inc;
        if inc.abs() < TAIL_INCREMENT_TOL {
            return Ok(total);
        }
        if hi >= TAIL_HORIZON_CAP {
            let ratio = inc / prev_inc;
            if prev_inc.is_finite() && prev_inc > 0.0 && (0.0..=0.95).contains(&ratio) {
                return Ok(total + inc * ratio / (1.0 - ratio));
            }
            return Err(LabError::Assumption(format!(
                "tail integral from t = {t0} does not converge (window increment {inc:e} at horizon {})",
                t0 + hi
            )));
        }
        prev_inc = inc;
        lo = hi;
        width *= 2.0;
    }
}

/// Gauss–Lobatto–Legendre nodes and weights on `[-1, 1]` with `n` points
/// (`n >= 2`), endpoints included.
pub fn gauss_lobatto(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 2, "Gauss-Lobatto needs at least two nodes");
    if n == 2 {
        return (vec![-1.0, 1.0], vec![1.0, 1.0]);
    }
    let order = n - 1;
    let nf = order as f64;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for k in 0..n {
        // Chebyshev–Gauss–Lobatto initial guess, refined by Newton on
        // (1 - x^2) P'_N(x).
        let mut x = -(std::f64::consts::PI * k as f64 / nf).cos();
        let mut p_n = 0.0;
        for _ in 0..100 {
            let (pn, pn1) = legendre_pair(order, x);
            p_n = pn;
            let dx = (x * pn - pn1) / (nf * pn);
            x -= dx;
            if dx.abs() < 1.0e-16 {
                let (pn, _) = legendre_pair(order, x);
                p_n = pn;
                break;
            }
        }
        nodes[k] = x;
        weights[k] = 2.0 / (nf * (nf + 1.0) * p_n * p_n);
    }
    nodes[0] = -1.0;
    nodes[n - 1] = 1.0;
    // Enforce exact antisymmetry of nodes and symmetry of weights.
    for k in 0..n / 2 {
        let j = n - 1 - k;
        let x = 0.5 * (nodes[j] - nodes[k]);
        nodes[k] = -x;
        nodes[j] = x;
        let w = 0.5 * (weights[k] + weights[j]);
        weights[k] = w;
        weights[j] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// Returns `(P_n(x), P_{n-1}(x))`.
fn legendre_pair(n: usize, x: f64) -> (f64, f64) {
    let mut p_prev = 1.0;
    let mut p = x;
    for k in 2..=n {
        let kf = k as f64;
        let next = ((2.0 * kf - 1.0) * x * p - (kf - 1.0) * p_prev) / kf;
        p_prev = p;
        p = next;
    }
    (p, p_prev)
}

/// Composite trapezoid weights for the given increasing nodes.
pub fn trapezoid_weights(nodes: &[f64]) -> Vec<f64> {
    let n = nodes.len();
    let mut w = vec![0.0; n];
    for i in 0..n.saturating_sub(1) {
        let h = nodes[i + 1] - nodes[i];
        w[i] += 0.5 * h;
        w[i + 1] += 0.5 * h;
    }
    w
}
