use hawkes_lob::kernels::TimeKernel;
use hawkes_lob::limit::{solve_path, LimitOptions, NoisePath};
use hawkes_lob::model::VolumeInit;
use hawkes_lob::oracles::{
    closed_form_book_check, one_sided_volatility_clustering, simulate_cir, spread_positive_model, spread_reduction, CirCoef, CirParams,
    CirScheme, ClusteringPlan, OneSidedParams,
};
use hawkes_lob::rng::{stream, StreamRole};
use hawkes_lob::stats::{variance_with_se, Summary};
use hawkes_lob::volterra::SpatialGrid;
use hawkes_lob::kernels::Profile;

const SEED: u64 = 0x5eed_0003;

fn affine(x0: f64) -> CirParams {
    CirParams { x0, a: CirCoef::Constant(1.0), b: CirCoef::Constant(0.0), c: CirCoef::Constant(1.0) }
}

fn terminal(params: &CirParams, scheme: CirScheme, dt: f64, steps: usize, n: usize) -> Vec<f64> {
    (0..n)
        .map(|r| *simulate_cir(params, dt, steps, scheme, &mut stream(SEED, r as u64, StreamRole::Cir)).unwrap().last().unwrap())
        .collect()
}

#[test]
fn exact_cir_has_affine_mean_and_variance() {
    // dx = dt + sqrt(2x) dW: E x(t) = x0 + t, Var x(t) = 2 x0 t + t².
    let (x0, t) = (0.5, 1.0);
    let xs = terminal(&affine(x0), CirScheme::Exact, 0.01, 100, 10_000);
    let s = Summary::of(&xs);
    assert!(s.within(x0 + t, 3.0), "{s:?}");
    let (var, se) = variance_with_se(&xs);
    let expected = 2.0 * x0 * t + t * t;
    assert!((var - expected).abs() <= 3.0 * se, "variance {var} ± {se} vs {expected}");
}

#[test]
fn euler_cir_mean_agrees_with_exact() {
    let (x0, t) = (0.5, 1.0);
    let xs = terminal(&affine(x0), CirScheme::Euler, 0.001, 1000, 4000);
    let s = Summary::of(&xs);
    assert!(s.within(x0 + t, 3.0), "{s:?}");
}

#[test]
fn clustering_vanishes_at_long_lag() {
    let p = OneSidedParams { sigma2: 0.5, c: 1.0, kappa: 1.0, p0: 1.0, barrier: Some(2.0) };
    let plan = |lag: f64| ClusteringPlan { t: 0.5, epsilon: 0.05, lag, dt: 1e-3, replicates: 20_000, seed: SEED };
    let near = one_sided_volatility_clustering(&p, &plan(0.1));
    let far = one_sided_volatility_clustering(&p, &plan(4.0));
    assert!(near.positive_at(3.0), "{near:?}");
    assert!(far.null_at(3.0), "{far:?}");
    assert!(far.covariance < near.covariance, "{far:?} vs {near:?}");
}

#[test]
fn clustering_control_is_null() {
    let p = OneSidedParams { sigma2: 0.5, c: 0.0, kappa: 1.0, p0: 1.0, barrier: Some(2.0) };
    let plan = ClusteringPlan { t: 0.5, epsilon: 0.05, lag: 0.1, dt: 1e-3, replicates: 20_000, seed: SEED };
    let r = one_sided_volatility_clustering(&p, &plan);
    assert!(r.null_at(3.0), "{r:?}");
}

#[test]
fn closed_form_book_holds_across_kernel_families() {
    let v0 = VolumeInit { level: 1.0, bump: Profile::gaussian(0.3, 0.8, 0.5) };
    for phi in [TimeKernel::constant(0.2), TimeKernel::exponential(0.5, 1.0), TimeKernel::gamma(0.5, 1.0)] {
        let r = closed_form_book_check(&phi, 0.8, v0, SpatialGrid::new(4.0, 201).unwrap(), 1.0, 1e-3).unwrap();
        assert!(r.max_abs_error <= 1e-3, "{phi:?}: {r:?}");
        assert!(r.resolvent_residual <= 1e-6, "{phi:?}: {r:?}");
    }
}

#[test]
fn spread_reduction_keeps_a_at_least_c() {
    let model = spread_positive_model(0.5, 1.0, 0.1);
    let params = model.limit_params(SpatialGrid::new(2.0, 41).unwrap()).unwrap();
    let (steps, dt) = (500, 1e-3);
    for r in 0..20 {
        let noise = NoisePath::generate(steps, dt, &mut stream(SEED, r, StreamRole::LimitNoise));
        let path = solve_path(&params, &noise, &LimitOptions { cadence: 1, ..Default::default() }).unwrap();
        let red = spread_reduction(&params, &path.records);
        assert_eq!(red.a_ge_c_fraction, 1.0, "path {r}");
        assert!(red.points.iter().all(|p| p.c >= 0.0));
    }
}
