use eqlab::evaluation::{evaluate_policy_mc, evaluate_policy_pde, interpolate, EvalContext, McConfig, PdeSolveConfig};
use eqlab::fixed_point::{solve_regularized_equilibrium, FixedPointConfig};
use eqlab::gibbs::{ActionGrid, ActionRule, PolicyField};
use eqlab::grid::{Grid, GridConfig};
use eqlab::problem::{catalog, ProblemSpec};
use eqlab::verifier::{
    default_start_points, equilibrium_gap, library_for, spike_perturb_value, Candidate, DeviationKind, DeviationSpec,
    Engine,
};

fn coarse(name: &str) -> (ProblemSpec, Grid, ActionGrid) {
    let spec = catalog(name).unwrap();
    let grid = GridConfig {
        nx: vec![61],
        grading: 0.05,
        ..GridConfig::default()
    }
    .build(&spec)
    .unwrap();
    let ag = ActionGrid::for_spec(&spec, 61, ActionRule::Lobatto).unwrap();
    (spec, grid, ag)
}

fn cn() -> PdeSolveConfig {
    PdeSolveConfig {
        theta: 0.5,
        ..PdeSolveConfig::default()
    }
}

#[test]
fn spike_engines_agree_on_atom_deviation() {
    let (spec, grid, ag) = coarse("R1");
    let ctx = EvalContext::new(&spec, &grid, &ag).unwrap();
    let cand = Candidate::from_policy(&ctx, PolicyField::uniform(grid.n_space(), &ag), 0.0, &cn(), "uniform").unwrap();
    let dev = DeviationSpec {
        name: "atom".into(),
        kind: DeviationKind::Atom { action: vec![0.0] },
    };
    let x = grid.point(grid.nearest_node(&[0.0]));
    let (pde, _) = spike_perturb_value(&ctx, &cand, &dev, 0.1, &x, &Engine::Pde, &cn()).unwrap();
    let mc = McConfig {
        n_paths: 4000,
        rng_seed: 21,
        ..McConfig::default()
    };
    let (est, se) = spike_perturb_value(&ctx, &cand, &dev, 0.1, &x, &Engine::Mc(mc), &cn()).unwrap();
    assert!(se > 0.0);
    assert!((pde - est).abs() <= 3.0 * se + 5e-3, "pde {pde} mc {est} se {se}");
}

#[test]
fn heat_sine_engines_agree() {
    let (spec, grid, ag) = coarse("heat_sine");
    let pol = PolicyField::uniform(grid.n_space(), &ag);
    let v = evaluate_policy_pde(&spec, &grid, &ag, &pol, 0.0, &cn()).unwrap();
    let mc = McConfig {
        n_paths: 2000,
        rng_seed: 5,
        ..McConfig::default()
    };
    for xq in [-1.0, 0.4] {
        let x = grid.point(grid.nearest_node(&[xq]));
        let est = evaluate_policy_mc(&spec, &grid, &ag, &pol, 0.0, 0.0, &x, &mc).unwrap();
        let pde = interpolate(&grid, v.slice(0), &x);
        assert!(
            (pde - est.estimate).abs() <= 3.0 * est.std_error + 5e-3,
            "x {xq}: {pde} vs {}",
            est.estimate
        );
    }
}

#[test]
fn solved_equilibrium_survives_disk_and_has_null_self_gap() {
    let (spec, grid, ag) = coarse("R1");
    let ctx = EvalContext::new(&spec, &grid, &ag).unwrap();
    let lam = 0.25;
    let res = solve_regularized_equilibrium(&ctx, lam, &FixedPointConfig::default(), &cn(), None).unwrap();
    assert!(res.converged);
    let cand = Candidate {
        label: "solve".into(),
        value: res.value.clone(),
        policy: res.policy.clone(),
        lambda: lam,
    };
    let dir = tempfile::tempdir().unwrap();
    cand.save(dir.path(), &ctx).unwrap();
    let back = Candidate::load(dir.path(), &ctx).unwrap();
    assert_eq!(back.lambda, lam);
    let lib = library_for(&ctx, &back);
    let me = lib.iter().find(|d| d.name == "self").unwrap();
    let xs = default_start_points(&grid, 3);
    let curve = equilibrium_gap(&ctx, &back, me, &xs, &[0.2, 0.1, 0.05], &Engine::Pde, &cn()).unwrap();
    assert!(curve.limsup.iter().all(|l| l.abs() < 1e-6), "{:?}", curve.limsup);
    for dev in lib.iter().filter(|d| d.name != "self") {
        let c = equilibrium_gap(&ctx, &back, dev, &xs, &[0.2, 0.1, 0.05], &Engine::Pde, &cn()).unwrap();
        assert!(c.limsup.iter().all(|l| *l <= 1e-2), "{}: {:?}", dev.name, c.limsup);
    }
}
