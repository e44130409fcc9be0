//! Control problem instances and empirical checks of their standing
//! assumptions.
//!
//! A [`ProblemSpec`] bundles the drift `b(x, a)`, diffusion `σ(x)`, reward
//! `r(t, x, a)`, discount `δ(t)` and the action and spatial boxes of one
//! time-inconsistent control problem. Rewards are stored as a sum of
//! separable pieces `Σ_m τ_m(t) ρ_m(x, a)`, which lets the solvers evaluate
//! policy-averaged rewards once per policy and rescale them in time.
//!
//! Instances come from a small named catalog (`R1`, `D0`, ...) or from the
//! polynomial/trigonometric term families in [`CustomProblem`].

use std::f64::consts::PI;
use std::fmt;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grid::BoundaryMode;
use crate::quadrature::tail_integral;

pub type DriftFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
pub type DiffusionFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type KernelFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Scalar time profile used for discounts and reward time factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeProfile {
    Zero,
    Constant {
        value: f64,
    },
    /// `scale · (shift + t)^(-power)`
    Power {
        scale: f64,
        shift: f64,
        power: f64,
    },
    /// `scale · exp(-rate · t)`
    Exponential {
        scale: f64,
        rate: f64,
    },
    /// `scale / (1 + rate · t)`
    Hyperbolic {
        scale: f64,
        rate: f64,
    },
}

impl TimeProfile {
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            TimeProfile::Zero => 0.0,
            TimeProfile::Constant { value } => value,
            TimeProfile::Power { scale, shift, power } => scale * (shift + t).powf(-power),
            TimeProfile::Exponential { scale, rate } => scale * (-rate * t).exp(),
            TimeProfile::Hyperbolic { scale, rate } => scale / (1.0 + rate * t),
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match *self {
            TimeProfile::Zero | TimeProfile::Constant { .. } => 0.0,
            TimeProfile::Power { scale, shift, power } => -power * scale * (shift + t).powf(-power - 1.0),
            TimeProfile::Exponential { scale, rate } => -rate * scale * (-rate * t).exp(),
            TimeProfile::Hyperbolic { scale, rate } => -rate * scale / (1.0 + rate * t).powi(2),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            TimeProfile::Zero => true,
            TimeProfile::Constant { value } => value.is_finite(),
            TimeProfile::Power { scale, shift, power } => scale.is_finite() && shift > 0.0 && power.is_finite(),
            TimeProfile::Exponential { scale, rate } => scale.is_finite() && rate.is_finite(),
            TimeProfile::Hyperbolic { scale, rate } => scale.is_finite() && rate >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(LabError::Parameter(format!("invalid time profile {self:?}")))
        }
    }
}

/// One-coordinate factor of a separable term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Factor {
    One,
    Pow {
        n: i32,
    },
    Cos {
        #[serde(default = "one")]
        freq: f64,
        #[serde(default)]
        phase: f64,
    },
    Sin {
        #[serde(default = "one")]
        freq: f64,
        #[serde(default)]
        phase: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl Factor {
    fn eval(&self, z: f64) -> f64 {
        match *self {
            Factor::One => 1.0,
            Factor::Pow { n } => z.powi(n),
            Factor::Cos { freq, phase } => (freq * z + phase).cos(),
            Factor::Sin { freq, phase } => (freq * z + phase).sin(),
        }
    }
}

/// `coef · Π_i x_i-factor · Π_l a_l^{a_pow[l]}`; missing entries count as 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub coef: f64,
    #[serde(default)]
    pub x: Vec<Factor>,
    #[serde(default)]
    pub a_pow: Vec<u32>,
}

impl Term {
    pub fn constant(coef: f64) -> Self {
        Term {
            coef,
            x: vec![],
            a_pow: vec![],
        }
    }

    fn eval(&self, x: &[f64], a: &[f64]) -> f64 {
        let mut v = self.coef;
        for (f, &xi) in self.x.iter().zip(x) {
            v *= f.eval(xi);
        }
        for (&p, &al) in self.a_pow.iter().zip(a) {
            v *= al.powi(p as i32);
        }
        v
    }
}

fn eval_terms(terms: &[Term], x: &[f64], a: &[f64]) -> f64 {
    terms.iter().map(|t| t.eval(x, a)).sum()
}

/// Axis-aligned box `Π [lo_i, hi_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(LabError::Parameter("box bounds must have equal nonzero length".into()));
        }
        if lo
            .iter()
            .zip(&hi)
            .any(|(l, h)| !(l.is_finite() && h.is_finite() && l < h))
        {
            return Err(LabError::Parameter(format!("degenerate box {lo:?} x {hi:?}")));
        }
        Ok(BoxDomain { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn measure(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).product()
    }

    /// Euclidean diameter.
    pub fn diameter(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| (h - l) * (h - l))
            .sum::<f64>()
            .sqrt()
    }

    fn outside(&self, p: &[f64]) -> Option<(usize, f64)> {
        let tol = 1e-12;
        p.iter().enumerate().find_map(|(i, &v)| {
            let span = (self.hi[i] - self.lo[i]).abs().max(1.0);
            if !(v >= self.lo[i] - tol * span && v <= self.hi[i] + tol * span) {
                Some((i, v))
            } else {
                None
            }
        })
    }

    /// Uniform lattice with `n` points per axis, row-major.
    pub fn lattice(&self, n: usize) -> Vec<Vec<f64>> {
        let d = self.dim();
        let total = n.pow(d as u32);
        (0..total)
            .map(|mut k| {
                let mut p = vec![0.0; d];
                for i in (0..d).rev() {
                    let j = k % n;
                    k /= n;
                    p[i] = if n == 1 {
                        0.5 * (self.lo[i] + self.hi[i])
                    } else {
                        self.lo[i] + (self.hi[i] - self.lo[i]) * j as f64 / (n - 1) as f64
                    };
                }
                p
            })
            .collect()
    }
}

/// One separable reward piece `τ(t) · ρ(x, a)`.
#[derive(Clone)]
pub struct RewardPiece {
    pub time: TimeProfile,
    pub kernel: KernelFn,
}

/// An immutable control problem instance.
#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub dim: usize,
    pub noise_dim: usize,
    pub domain: BoxDomain,
    pub boundary: BoundaryMode,
    pub action_set: BoxDomain,
    drift: DriftFn,
    diffusion: DiffusionFn,
    reward: Vec<RewardPiece>,
    pub discount: TimeProfile,
    envelope: Arc<OnceLock<RewardEnvelope>>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("domain", &self.domain)
            .field("boundary", &self.boundary)
            .field("action_set", &self.action_set)
            .field("reward_pieces", &self.reward.len())
            .field("discount", &self.discount)
            .finish()
    }
}

/// Pointwise evaluation of all coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub drift: Vec<f64>,
    /// Row-major `d × m`.
    pub diffusion: Vec<f64>,
    pub reward: f64,
    pub discount: f64,
}

impl ProblemSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        domain: BoxDomain,
        boundary: BoundaryMode,
        action_set: BoxDomain,
        noise_dim: usize,
        drift: DriftFn,
        diffusion: DiffusionFn,
        reward: Vec<RewardPiece>,
        discount: TimeProfile,
    ) -> Result<Self> {
        let dim = domain.dim();
        if !(1..=2).contains(&dim) {
            return Err(LabError::Parameter(format!("state dimension {dim} not in {{1, 2}}")));
        }
        if !(1..=2).contains(&action_set.dim()) {
            return Err(LabError::Parameter(format!(
                "action dimension {} not in {{1, 2}}",
                action_set.dim()
            )));
        }
        if noise_dim == 0 {
            return Err(LabError::Parameter("noise dimension must be positive".into()));
        }
        discount.validate()?;
        for piece in &reward {
            piece.time.validate()?;
        }
        Ok(ProblemSpec {
            name: name.into(),
            dim,
            noise_dim,
            domain,
            boundary,
            action_set,
            drift,
            diffusion,
            reward,
            discount,
            envelope: Arc::new(OnceLock::new()),
        })
    }

    pub fn action_dim(&self) -> usize {
        self.action_set.dim()
    }

    pub fn reward_pieces(&self) -> &[RewardPiece] {
        &self.reward
    }

    /// `b(x, a)` written into `out` (length `d`).
    #[inline]
    pub fn drift_into(&self, x: &[f64], a: &[f64], out: &mut [f64]) {
        (self.drift)(x, a, out)
    }

    pub fn drift(&self, x: &[f64], a: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.drift_into(x, a, &mut out);
        out
    }

    /// `σ(x)` as a row-major `d × m` matrix written into `out`.
    #[inline]
    pub fn diffusion_into(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, out)
    }

    pub fn diffusion(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.noise_dim];
        self.diffusion_into(x, &mut out);
        out
    }

    /// Row-major `d × d` matrix `σσᵀ(x)`.
    pub fn covariance(&self, x: &[f64]) -> Vec<f64> {
        let s = self.diffusion(x);
        let (d, m) = (self.dim, self.noise_dim);
        let mut c = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                c[i * d + j] = (0..m).map(|k| s[i * m + k] * s[j * m + k]).sum();
            }
        }
        c
    }

    #[inline]
    pub fn reward(&self, t: f64, x: &[f64], a: &[f64]) -> f64 {
        self.reward.iter().map(|p| p.time.value(t) * (p.kernel)(x, a)).sum()
    }

    /// `∂_t r(t, x, a)`.
    pub fn reward_rate(&self, t: f64, x: &[f64], a: &[f64]) -> f64 {
        self.reward
            .iter()
            .map(|p| p.time.derivative(t) * (p.kernel)(x, a))
            .sum()
    }

    #[inline]
    pub fn discount_at(&self, t: f64) -> f64 {
        self.discount.value(t)
    }

    pub fn discount_rate(&self, t: f64) -> f64 {
        self.discount.derivative(t)
    }

    pub fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(LabError::Shape(format!(
                "point has {} coordinates, expected {}",
                x.len(),
                self.dim
            )));
        }
        if let Some((axis, value)) = self.domain.outside(x) {
            return Err(LabError::Domain {
                axis,
                value,
                lo: self.domain.lo[axis],
                hi: self.domain.hi[axis],
            });
        }
        Ok(())
    }

    pub fn check_action(&self, a: &[f64]) -> Result<()> {
        if a.len() != self.action_dim() {
            return Err(LabError::Shape(format!(
                "action has {} components, expected {}",
                a.len(),
                self.action_dim()
            )));
        }
        if let Some((axis, value)) = self.action_set.outside(a) {
            return Err(LabError::Action {
                axis,
                value,
                lo: self.action_set.lo[axis],
                hi: self.action_set.hi[axis],
            });
        }
        Ok(())
    }

    /// Evaluates drift, diffusion, reward and discount at `(t, x, a)`.
    pub fn eval_coefficients(&self, t: f64, x: &[f64], a: &[f64]) -> Result<Coefficients> {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(LabError::Parameter(format!("time {t} must be finite and nonnegative")));
        }
        self.check_point(x)?;
        self.check_action(a)?;
        Ok(Coefficients {
            drift: self.drift(x, a),
            diffusion: self.diffusion(x),
            reward: self.reward(t, x, a),
            discount: self.discount_at(t),
        })
    }

    fn envelope(&self) -> &RewardEnvelope {
        self.envelope.get_or_init(|| RewardEnvelope::build(self))
    }

    /// `sup_{x,a} |r(t, x, a)|` over the sampling lattice.
    pub fn reward_sup(&self, t: f64) -> f64 {
        self.envelope().sup(|p| p.value(t))
    }

    /// `sup_{x,a} |∂_t r(t, x, a)|` over the sampling lattice.
    pub fn reward_rate_sup(&self, t: f64) -> f64 {
        self.envelope().sup(|p| p.derivative(t))
    }

    /// `∫_T^∞ [sup_{x,a}|r(t,x,a)| + |δ(t)|] dt`.
    pub fn tail_mass(&self, horizon: f64) -> Result<f64> {
        if !(horizon >= 0.0) {
            return Err(LabError::Parameter(format!("tail start {horizon} must be >= 0")));
        }
        let env = self.envelope();
        let f = |t: f64| env.sup(|p| p.value(t)) + self.discount.value(t).abs();
        tail_integral(&f, horizon)
    }

    /// Smallest horizon `T*` (to bisection accuracy) with
    /// `tail_mass(T*) <= eps`.
    pub fn horizon_for_tail(&self, eps: f64) -> Result<f64> {
        if !(eps > 0.0) {
            return Err(LabError::Parameter("tail tolerance must be positive".into()));
        }
        if self.tail_mass(0.0)? <= eps {
            return Ok(0.0);
        }
        let mut hi = 1.0;
        while self.tail_mass(hi)? > eps {
            hi *= 2.0;
            if hi > 1.0e9 {
                return Err(LabError::Assumption(format!(
                    "tail mass stays above {eps:e} beyond t = 1e9"
                )));
            }
        }
        let mut lo = hi / 2.0;
        if hi == 1.0 {
            lo = 0.0;
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.tail_mass(mid)? > eps {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-9 * hi.max(1.0) {
                break;
            }
        }
        Ok(hi)
    }
}

/// Sampled reward kernels used for sup-envelopes over `(x, a)`.
struct RewardEnvelope {
    times: Vec<TimeProfile>,
    /// `pieces × samples` kernel values.
    kernels: Vec<Vec<f64>>,
    single_max: Option<f64>,
}

impl RewardEnvelope {
    fn build(spec: &ProblemSpec) -> Self {
        let nx = if spec.dim == 1 { 201 } else { 41 };
        let na = if spec.action_dim() == 1 { 101 } else { 21 };
        let xs = spec.domain.lattice(nx);
        let acts = spec.action_set.lattice(na);
        let kernels: Vec<Vec<f64>> = spec
            .reward
            .iter()
            .map(|p| {
                let mut vals = Vec::with_capacity(xs.len() * acts.len());
                for x in &xs {
                    for a in &acts {
                        vals.push((p.kernel)(x, a));
                    }
                }
                vals
            })
            .collect();
        let single_max = if kernels.len() == 1 {
            Some(kernels[0].iter().fold(0.0_f64, |m, v| m.max(v.abs())))
        } else {
            None
        };
        RewardEnvelope {
            times: spec.reward.iter().map(|p| p.time).collect(),
            kernels,
            single_max,
        }
    }

    /// `max_s |Σ_m factor(τ_m) · ρ_m(s)|`.
    fn sup<F: Fn(&TimeProfile) -> f64>(&self, factor: F) -> f64 {
        if self.kernels.is_empty() {
            return 0.0;
        }
        let coefs: Vec<f64> = self.times.iter().map(&factor).collect();
        if let Some(m) = self.single_max {
            return coefs[0].abs() * m;
        }
        let n = self.kernels[0].len();
        (0..n)
            .map(|s| {
                coefs
                    .iter()
                    .zip(&self.kernels)
                    .map(|(c, k)| c * k[s])
                    .sum::<f64>()
                    .abs()
            })
            .fold(0.0, f64::max)
    }
}

// ── Catalog ──────────────────────────────────────────────────────────────

/// Polynomial/trigonometric coefficient families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomProblem {
    pub domain_lo: Vec<f64>,
    pub domain_hi: Vec<f64>,
    pub action_lo: Vec<f64>,
    pub action_hi: Vec<f64>,
    /// Number of Brownian components `m`; defaults to `d`.
    #[serde(default)]
    pub noise_dim: Option<usize>,
    /// One term list per drift component.
    pub drift: Vec<Vec<Term>>,
    /// Row-major `d × m` matrix of term lists (action powers ignored).
    pub diffusion: Vec<Vec<Term>>,
    #[serde(default)]
    pub reward: Vec<RewardPieceConfig>,
    pub discount: TimeProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardPieceConfig {
    pub time: TimeProfile,
    pub terms: Vec<Term>,
}

impl CustomProblem {
    pub fn build(&self, name: &str, boundary: BoundaryMode) -> Result<ProblemSpec> {
        let domain = BoxDomain::new(self.domain_lo.clone(), self.domain_hi.clone())?;
        let action = BoxDomain::new(self.action_lo.clone(), self.action_hi.clone())?;
        let d = domain.dim();
        let m = self.noise_dim.unwrap_or(d);
        if self.drift.len() != d {
            return Err(LabError::Parameter(format!(
                "drift needs {d} components, got {}",
                self.drift.len()
            )));
        }
        if self.diffusion.len() != d * m {
            return Err(LabError::Parameter(format!(
                "diffusion needs {} entries (d x m), got {}",
                d * m,
                self.diffusion.len()
            )));
        }
        let drift_terms = self.drift.clone();
        let drift: DriftFn = Arc::new(move |x: &[f64], a: &[f64], out: &mut [f64]| {
            for (o, terms) in out.iter_mut().zip(&drift_terms) {
                *o = eval_terms(terms, x, a);
            }
        });
        let diff_terms = self.diffusion.clone();
        let diffusion: DiffusionFn = Arc::new(move |x: &[f64], out: &mut [f64]| {
            for (o, terms) in out.iter_mut().zip(&diff_terms) {
                *o = eval_terms(terms, x, &[]);
            }
        });
        let reward = self
            .reward
            .iter()
            .map(|p| {
                let terms = p.terms.clone();
                RewardPiece {
                    time: p.time,
                    kernel: Arc::new(move |x: &[f64], a: &[f64]| eval_terms(&terms, x, a)),
                }
            })
            .collect();
        ProblemSpec::new(
            name,
            domain,
            boundary,
            action,
            m,
            drift,
            diffusion,
            reward,
            self.discount,
        )
    }
}

fn cos_x() -> Factor {
    Factor::Cos { freq: 1.0, phase: 0.0 }
}

/// Family description of a named catalog instance.
pub fn catalog_family(name: &str) -> Result<CustomProblem> {
    let pi = PI;
    let unit_action = (vec![0.0], vec![1.0]);
    let inverse_square = TimeProfile::Power {
        scale: 1.0,
        shift: 1.0,
        power: 2.0,
    };
    let exp_discount = TimeProfile::Exponential { scale: 1.0, rate: 1.0 };
    let fam = match name {
        // b(x,a) = a, σ = 1, r = (1+t)^-2 (cos x + a(1-a)), δ = e^-t
        "R1" => CustomProblem {
            domain_lo: vec![-pi],
            domain_hi: vec![pi],
            action_lo: unit_action.0,
            action_hi: unit_action.1,
            noise_dim: None,
            drift: vec![vec![Term {
                coef: 1.0,
                x: vec![],
                a_pow: vec![1],
            }]],
            diffusion: vec![vec![Term::constant(1.0)]],
            reward: vec![RewardPieceConfig {
                time: inverse_square,
                terms: vec![
                    Term {
                        coef: 1.0,
                        x: vec![cos_x()],
                        a_pow: vec![],
                    },
                    Term {
                        coef: 1.0,
                        x: vec![],
                        a_pow: vec![1],
                    },
                    Term {
                        coef: -1.0,
                        x: vec![],
                        a_pow: vec![2],
                    },
                ],
            }],
            discount: exp_discount,
        },
        // b ≡ 0, σ = 1, r = (1+t)^-2, δ = e^-t
        "D0" => CustomProblem {
            domain_lo: vec![-1.0],
            domain_hi: vec![1.0],
            action_lo: unit_action.0,
            action_hi: unit_action.1,
            noise_dim: None,
            drift: vec![vec![]],
            diffusion: vec![vec![Term::constant(1.0)]],
            reward: vec![RewardPieceConfig {
                time: inverse_square,
                terms: vec![Term::constant(1.0)],
            }],
            discount: exp_discount,
        },
        // b ≡ 0, σ = √2, r = (1+t)^-2 sin x, δ = e^-t
        "heat_sine" => CustomProblem {
            domain_lo: vec![-pi / 2.0],
            domain_hi: vec![pi / 2.0],
            action_lo: unit_action.0,
            action_hi: unit_action.1,
            noise_dim: None,
            drift: vec![vec![]],
            diffusion: vec![vec![Term::constant(2.0_f64.sqrt())]],
            reward: vec![RewardPieceConfig {
                time: inverse_square,
                terms: vec![Term {
                    coef: 1.0,
                    x: vec![Factor::Sin { freq: 1.0, phase: 0.0 }],
                    a_pow: vec![],
                }],
            }],
            discount: exp_discount,
        },
        // r ≡ 0, δ ≡ 0
        "zero" => CustomProblem {
            domain_lo: vec![-1.0],
            domain_hi: vec![1.0],
            action_lo: unit_action.0,
            action_hi: unit_action.1,
            noise_dim: None,
            drift: vec![vec![]],
            diffusion: vec![vec![Term::constant(1.0)]],
            reward: vec![],
            discount: TimeProfile::Zero,
        },
        other => {
            return Err(LabError::Config(format!(
                "unknown problem '{other}' (known: R1, D0, heat_sine, zero, custom)"
            )))
        }
    };
    Ok(fam)
}

/// Builds a named catalog instance with its default domain.
pub fn catalog(name: &str) -> Result<ProblemSpec> {
    catalog_family(name)?.build(name, BoundaryMode::Neumann)
}

// ── Assumption checks ────────────────────────────────────────────────────

/// Empirical estimates of the standing-assumption constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub problem: String,
    /// Space-time Hölder norm of `r` and `∂_t r`, sup over sampled actions.
    pub k0: f64,
    /// `∫ sup|r| dt + ∫ sup|∂_t r| dt`.
    pub k1: f64,
    /// The `∫ sup|r| dt` part of `k1`.
    pub k1_reward: f64,
    /// The `∫ sup|∂_t r| dt` part of `k1`.
    pub k1_reward_rate: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub k5: f64,
    pub eta: f64,
    pub theta: f64,
    pub cone_ok: bool,
    pub cone_zeta: f64,
    pub cone_gamma: f64,
    pub alpha: f64,
    pub samples: usize,
    pub notes: Vec<String>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.notes.is_empty()
    }
}

/// Estimates the assumption constants on sampled lattices.
///
/// Non-integrable tails and degenerate diffusions are recorded in
/// `notes` rather than raised.
pub fn check_assumptions(spec: &ProblemSpec, sample_budget: usize, alpha: f64) -> Result<AssumptionReport> {
    if sample_budget < 100 {
        return Err(LabError::Parameter(format!("sample budget {sample_budget} below 100")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(LabError::Parameter(format!("Hölder exponent {alpha} not in (0, 1)")));
    }
    let mut notes = Vec::new();
    let d = spec.dim;
    let l = spec.action_dim();
    let per_axis = |budget: usize, dims: usize| -> usize {
        let n = (budget as f64).powf(1.0 / dims as f64).round() as usize;
        let n = n.clamp(3, 201);
        n | 1
    };
    let xs = spec.domain.lattice(per_axis(sample_budget, d + l));
    let acts = spec.action_set.lattice(per_axis(sample_budget, d + l));
    let samples = xs.len() * acts.len();

    let finite = |name: &str, v: f64, notes: &mut Vec<String>| -> f64 {
        if !v.is_finite() {
            notes.push(format!("{name} estimate is not finite"));
        }
        v
    };

    // K0: space-time Hölder norm of r and r_t on [0, 4] × lattice.
    let k0 = {
        let nt = 9usize;
        let nx_small = if d == 1 { 17 } else { 7 };
        let xs_small = spec.domain.lattice(nx_small);
        let ts: Vec<f64> = (0..nt).map(|k| 4.0 * k as f64 / (nt - 1) as f64).collect();
        let mut best = 0.0_f64;
        for a in &acts {
            let mut pts = Vec::with_capacity(nt * xs_small.len());
            let mut rv = Vec::with_capacity(pts.capacity());
            let mut rtv = Vec::with_capacity(pts.capacity());
            for &t in &ts {
                for x in &xs_small {
                    pts.push((t, x.clone()));
                    rv.push(spec.reward(t, x, a));
                    rtv.push(spec.reward_rate(t, x, a));
                }
            }
            let sup_r = rv.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let sup_rt = rtv.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let norm = sup_r + sup_rt + parabolic_holder(&pts, &rv, alpha) + parabolic_holder(&pts, &rtv, alpha);
            best = best.max(norm);
        }
        finite("K0", best, &mut notes)
    };

    let integral = |name: &str, f: &dyn Fn(f64) -> f64, notes: &mut Vec<String>| -> f64 {
        match tail_integral(&f, 0.0) {
            Ok(v) => v,
            Err(e) => {
                notes.push(format!("{name}: {e}"));
                f64::INFINITY
            }
        }
    };

    let k1_reward = integral("K1 (reward)", &|t| spec.reward_sup(t), &mut notes);
    let k1_reward_rate = integral("K1 (reward rate)", &|t| spec.reward_rate_sup(t), &mut notes);
    let k1 = k1_reward + k1_reward_rate;

    // Offsets u - s in (0, 1] for the time-Hölder quotients of derivatives.
    let offsets: Vec<f64> = (0..16)
        .map(|k| 0.5f64.powi(k))
        .chain((1..16).map(|k| k as f64 / 16.0))
        .collect();
    let env = spec.envelope();
    let k2 = integral(
        "K2",
        &|s: f64| {
            offsets
                .iter()
                .map(|&h| env.sup(|p| p.derivative(s) - p.derivative(s + h)) / h.powf(alpha / 2.0))
                .fold(0.0, f64::max)
        },
        &mut notes,
    );

    let k3 = {
        let mut best_b = 0.0_f64;
        for a in &acts {
            let mut sup = 0.0_f64;
            let vals: Vec<Vec<f64>> = xs.iter().map(|x| spec.drift(x, a)).collect();
            for v in &vals {
                sup = sup.max(norm2(v));
            }
            best_b = best_b.max(sup + spatial_holder(&xs, &vals, alpha));
        }
        let svals: Vec<Vec<f64>> = xs.iter().map(|x| spec.diffusion(x)).collect();
        let sup_s = svals.iter().map(|v| norm2(v)).fold(0.0, f64::max);
        finite("K3", best_b + sup_s + spatial_holder(&xs, &svals, alpha), &mut notes)
    };

    let k4 = integral(
        "K4",
        &|t| spec.discount_at(t).abs() + spec.discount_rate(t).abs(),
        &mut notes,
    );
    let disc = spec.discount;
    let k5 = integral(
        "K5",
        &|s: f64| {
            offsets
                .iter()
                .map(|&h| (disc.derivative(s) - disc.derivative(s + h)).abs() / h.powf(alpha / 2.0))
                .fold(0.0, f64::max)
        },
        &mut notes,
    );

    let eta = {
        let e = xs
            .iter()
            .map(|x| min_eigenvalue(&spec.covariance(x), d))
            .fold(f64::INFINITY, f64::min);
        if !(e > 0.0) {
            notes.push(format!("ellipticity fails: min eigenvalue of σσᵀ is {e:e}"));
        }
        e
    };

    // Θ: largest difference quotient in the action of b and of r.
    let theta = {
        let ts = [0.0, 0.5, 1.0, 2.0];
        let mut lip_b = 0.0_f64;
        let mut lip_r = 0.0_f64;
        let bs: Vec<Vec<Vec<f64>>> = xs
            .iter()
            .map(|x| acts.iter().map(|a| spec.drift(x, a)).collect())
            .collect();
        for (xi, x) in xs.iter().enumerate() {
            for i in 0..acts.len() {
                for j in (i + 1)..acts.len() {
                    let dist = dist2(&acts[i], &acts[j]);
                    let db = dist2(&bs[xi][i], &bs[xi][j]);
                    lip_b = lip_b.max(db / dist);
                    for &t in &ts {
                        let dr = (spec.reward(t, x, &acts[i]) - spec.reward(t, x, &acts[j])).abs();
                        lip_r = lip_r.max(dr / dist);
                    }
                }
            }
        }
        finite("Theta", lip_b.max(lip_r), &mut notes)
    };

    let sides: Vec<f64> = spec
        .action_set
        .lo
        .iter()
        .zip(&spec.action_set.hi)
        .map(|(lo, hi)| hi - lo)
        .collect();
    let cone_zeta = 0.5 * sides.iter().cloned().fold(f64::INFINITY, f64::min);
    let cone_gamma = if l == 1 { PI / 2.0 } else { PI / 4.0 };

    for (name, v) in [("K1", k1), ("K2", k2), ("K4", k4), ("K5", k5)] {
        if v.is_finite() {
            continue;
        }
        if !notes.iter().any(|n| n.starts_with(name)) {
            notes.push(format!("{name} estimate is not finite"));
        }
    }

    Ok(AssumptionReport {
        problem: spec.name.clone(),
        k0,
        k1,
        k1_reward,
        k1_reward_rate,
        k2,
        k3,
        k4,
        k5,
        eta,
        theta,
        cone_ok: true,
        cone_zeta,
        cone_gamma,
        alpha,
        samples,
        notes,
    })
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Smallest eigenvalue of a symmetric `d × d` matrix, `d ∈ {1, 2}`.
pub fn min_eigenvalue(m: &[f64], d: usize) -> f64 {
    match d {
        1 => m[0],
        2 => {
            let (a, b, c) = (m[0], 0.5 * (m[1] + m[2]), m[3]);
            let mean = 0.5 * (a + c);
            let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            mean - rad
        }
        _ => unreachable!("dimension checked at construction"),
    }
}

/// Hölder quotient over sample pairs with parabolic distance in (0, 1].
fn parabolic_holder(pts: &[(f64, Vec<f64>)], vals: &[f64], alpha: f64) -> f64 {
    let mut best = 0.0_f64;
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            let dx = dist2(&pts[i].1, &pts[j].1);
            let rho = (pts[i].0 - pts[j].0).abs() + dx * dx;
            if rho > 0.0 && rho <= 1.0 {
                best = best.max((vals[i] - vals[j]).abs() / rho.powf(alpha / 2.0));
            }
        }
    }
    best
}

/// Spatial Hölder quotient `|f(x) - f(y)| / |x - y|^α` over `|x - y| <= 1`.
fn spatial_holder(xs: &[Vec<f64>], vals: &[Vec<f64>], alpha: f64) -> f64 {
    let mut best = 0.0_f64;
    for i in 0..xs.len() {
        for j in (i + 1)..xs.len() {
            let r = dist2(&xs[i], &xs[j]);
            if r > 0.0 && r <= 1.0 {
                best = best.max(dist2(&vals[i], &vals[j]) / r.powf(alpha));
            }
        }
    }
    best
}
