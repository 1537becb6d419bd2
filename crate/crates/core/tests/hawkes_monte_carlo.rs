use hawkes_lob::hawkes::{compensated_integral, make_exponential_markov, make_multivariate, simulate_thinning_rng, HawkesSpec};
use hawkes_lob::kernels::TimeKernel;
use hawkes_lob::rng::{stream, StreamRole};
use hawkes_lob::stats::{correlation, ks_two_sample, variance_with_se, Summary};

const SEED: u64 = 0x5eed_0001;

/// `w · β · e^{-βt}`, mass `w`.
fn exp_kernel(w: f64, beta: f64) -> TimeKernel {
    TimeKernel::exponential(w * beta, beta)
}

fn univariate(mu: f64, kernel: TimeKernel) -> HawkesSpec {
    make_multivariate(vec![TimeKernel::constant(mu)], vec![vec![kernel]]).unwrap()
}

fn counts(spec: &HawkesSpec, horizon: f64, n: usize, role: StreamRole, label: usize) -> Vec<f64> {
    (0..n)
        .map(|r| {
            let s = simulate_thinning_rng(spec, horizon, &mut stream(SEED, r as u64, role)).unwrap();
            s.count_label(label) as f64
        })
        .collect()
}

#[test]
fn independent_components_have_uncorrelated_counts() {
    let k = exp_kernel(0.5, 2.0);
    let spec = make_multivariate(
        vec![TimeKernel::constant(1.0); 2],
        vec![vec![k.clone(), TimeKernel::zero()], vec![TimeKernel::zero(), k]],
    )
    .unwrap();
    let n = 2000;
    let (mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for r in 0..n {
        let s = simulate_thinning_rng(&spec, 10.0, &mut stream(SEED, r as u64, StreamRole::Hawkes)).unwrap();
        a.push(s.count_label(0) as f64);
        b.push(s.count_label(1) as f64);
    }
    let r = correlation(&a, &b);
    assert!(r.abs() <= 4.0 / (n as f64).sqrt(), "correlation {r}");
}

#[test]
fn symmetric_components_are_exchangeable() {
    let spec = make_multivariate(
        vec![TimeKernel::constant(1.0); 2],
        vec![vec![exp_kernel(0.3, 2.0), exp_kernel(0.2, 1.0)], vec![exp_kernel(0.2, 1.0), exp_kernel(0.3, 2.0)]],
    )
    .unwrap();
    // Labels taken from disjoint replicates so the two samples are independent.
    let n = 2000;
    let first = counts(&spec, 10.0, n, StreamRole::Hawkes, 0);
    let second = counts(&spec, 10.0, n, StreamRole::Custom(7), 1);
    let ks = ks_two_sample(&first, &second);
    assert!(ks.passes(0.01), "{ks:?}");
}

#[test]
fn markov_and_thinning_counts_agree() {
    let spec = univariate(1.0, exp_kernel(0.5, 1.5));
    let markov = make_exponential_markov(&spec).unwrap();
    let n = 10_000;
    let horizon = 10.0;
    let generic = counts(&spec, horizon, n, StreamRole::Hawkes, 0);
    let fast: Vec<f64> = (0..n)
        .map(|r| markov.simulate(horizon, &mut stream(SEED, r as u64, StreamRole::Custom(3))).len() as f64)
        .collect();
    let ks = ks_two_sample(&generic, &fast);
    assert!(ks.passes(0.01), "{ks:?}");
    let (g, f) = (Summary::of(&generic), Summary::of(&fast));
    assert!((g.mean - f.mean).abs() <= 3.0 * g.se.hypot(f.se), "{g:?} vs {f:?}");
}

#[test]
fn short_memory_kernel_approaches_poisson() {
    // Peak βw held at 0.5 while β grows, so the mass w vanishes.
    let (mu, horizon, n) = (1.0, 10.0, 10_000);
    let beta = 1000.0;
    let spec = univariate(mu, exp_kernel(0.5 / beta, beta));
    let poisson = univariate(mu, TimeKernel::zero());
    let hawkes = counts(&spec, horizon, n, StreamRole::Hawkes, 0);
    let reference = counts(&poisson, horizon, n, StreamRole::Custom(11), 0);
    let ks = ks_two_sample(&hawkes, &reference);
    assert!(ks.passes(0.01), "{ks:?}");
    let s = Summary::of(&hawkes);
    assert!(s.within(mu * horizon, 3.0), "{s:?}");
    let (var, se) = variance_with_se(&hawkes);
    assert!((var - mu * horizon).abs() <= 3.0 * se, "variance {var} ± {se}");
}

fn compensated_mean_is_zero(spec: &HawkesSpec, f: &dyn Fn(f64) -> f64) {
    let n = 4000;
    let values: Vec<f64> = (0..n)
        .map(|r| {
            let s = simulate_thinning_rng(spec, 5.0, &mut stream(SEED, r as u64, StreamRole::Hawkes)).unwrap();
            compensated_integral(spec, &s, &|t, _| f(t))
        })
        .collect();
    let s = Summary::of(&values);
    assert!(s.within(0.0, 3.0), "{s:?}");
}

#[test]
fn compensated_integral_is_centred_for_poisson() {
    let spec = univariate(2.0, TimeKernel::zero());
    compensated_mean_is_zero(&spec, &|_| 1.0);
    compensated_mean_is_zero(&spec, &|t| t.sin());
}

#[test]
fn compensated_integral_is_centred_for_exponential_kernel() {
    let spec = univariate(1.0, exp_kernel(0.6, 2.0));
    compensated_mean_is_zero(&spec, &|_| 1.0);
    compensated_mean_is_zero(&spec, &|t| 1.0 + t);
}

#[test]
fn subcritical_mean_count_matches_renewal_formula() {
    // E N(T) = μT/(1 - w) - μ w (1 - e^{-(1-w)βT}) / ((1 - w)² β) for the exponential kernel.
    let (mu, w, beta, horizon) = (1.0, 0.5, 2.0, 10.0);
    let spec = univariate(mu, exp_kernel(w, beta));
    let a = (1.0 - w) * beta;
    let expected = mu * horizon / (1.0 - w) - mu * w * (1.0 - (-a * horizon).exp()) / ((1.0 - w).powi(2) * beta);
    let s = Summary::of(&counts(&spec, horizon, 4000, StreamRole::Hawkes, 0));
    assert!(s.within(expected, 3.0), "{s:?} vs {expected}");
}
