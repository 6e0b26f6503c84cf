use lex_core::gradest::{conditional_relaxed_sample, rebar_grad, reinforce_grad, Quadratic};
use lex_core::imputers::{fit_imputer, ImputerSpec};
use lex_core::maskdist::{self, MaskMode};
use lex_core::rng::seeded;
use lex_core::synthgen::{gen_replicate, Split, SynthName, X10Sign};
use rand::Rng;

/// Two-sample Kolmogorov–Smirnov statistic.
fn ks(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut best) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        best = best.max((i as f64 / n - j as f64 / m).abs());
    }
    best
}

/// 1% critical value of the two-sample statistic.
fn ks_critical(n: usize, m: usize) -> f64 {
    1.628 * ((n + m) as f64 / (n * m) as f64).sqrt()
}

#[test]
fn ks_statistic_sanity() {
    assert_eq!(ks(vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]), 0.0);
    assert_eq!(ks(vec![0.0, 0.1], vec![5.0, 6.0]), 1.0);
}

fn conditional_marginals_match(mode: MaskMode, seed: u64) {
    let d = 4;
    let tau = 0.5;
    let n = 100_000;
    let mut rng = seeded(seed);
    let logits: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let mut uncond = vec![Vec::with_capacity(n); d];
    let mut cond = vec![Vec::with_capacity(n); d];
    for _ in 0..n {
        let s = maskdist::sample(mode, &logits, tau, &mut rng).unwrap();
        for j in 0..d {
            uncond[j].push(s.relaxed[j]);
        }
        let c = conditional_relaxed_sample(mode, &logits, &s, tau, &mut rng).unwrap();
        for j in 0..d {
            cond[j].push(c[j]);
        }
    }
    let crit = ks_critical(n, n);
    for j in 0..d {
        let stat = ks(uncond[j].clone(), cond[j].clone());
        assert!(stat < crit, "{mode:?} coordinate {j}: KS {stat} >= {crit}");
    }
}

#[test]
fn conditional_relaxation_has_the_unconditional_marginal_bernoulli() {
    conditional_marginals_match(MaskMode::Bernoulli, 31);
}

#[test]
fn conditional_relaxation_has_the_unconditional_marginal_subset() {
    conditional_marginals_match(MaskMode::Subset { k: 2 }, 32);
}

#[test]
fn conditional_relaxation_is_coupled_to_the_hard_mask() {
    let mut rng = seeded(5);
    let logits = [0.3, -0.7, 1.1, 0.0];
    for _ in 0..1000 {
        let s = maskdist::sample(MaskMode::Bernoulli, &logits, 0.5, &mut rng).unwrap();
        let c = conditional_relaxed_sample(MaskMode::Bernoulli, &logits, &s, 0.5, &mut rng).unwrap();
        for j in 0..4 {
            assert_eq!(c[j] > 0.5, s.hard[j] == 1);
        }
    }
}

#[test]
fn rebar_variance_does_not_exceed_reinforce() {
    let d = 4;
    let tau = 0.5;
    let mode = MaskMode::Bernoulli;
    let mut rng = seeded(8);
    let obj = Quadratic::random(d, &mut rng);
    let logits: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let n = 100_000;
    let (mut s1, mut q1, mut s2, mut q2) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for _ in 0..n {
        let s = maskdist::sample(mode, &logits, tau, &mut rng).unwrap();
        let one = std::slice::from_ref(&s);
        let a = reinforce_grad(&obj, mode, &logits, one, 0.0).unwrap();
        let b = rebar_grad(&obj, mode, &logits, one, tau, 1.0, 0.0, false).unwrap();
        for j in 0..d {
            s1[j] += a[j];
            q1[j] += a[j] * a[j];
            s2[j] += b[j];
            q2[j] += b[j] * b[j];
        }
    }
    let var = |s: &[f64], q: &[f64]| -> f64 { (0..d).map(|j| q[j] / n as f64 - (s[j] / n as f64).powi(2)).sum() };
    let (v_reinforce, v_rebar) = (var(&s1, &q1), var(&s2, &q2));
    eprintln!("total variance: reinforce {v_reinforce:.4}, rebar {v_rebar:.4}, rebar <= reinforce: {}", v_rebar <= v_reinforce);
    assert!(v_rebar <= 1.5 * v_reinforce);
}

#[test]
fn constant_objective_with_matching_baseline_has_zero_gradient() {
    let mut rng = seeded(2);
    let obj = Quadratic::linear(vec![0.0; 5], 2.5);
    let logits = [0.1, -2.0, 0.4, 1.0, 3.0];
    for mode in [MaskMode::Bernoulli, MaskMode::Subset { k: 3 }] {
        let samples: Vec<_> = (0..3).map(|_| maskdist::sample(mode, &logits, 0.5, &mut rng).unwrap()).collect();
        let g = reinforce_grad(&obj, mode, &logits, &samples, 2.5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn marginal_imputer_matches_the_validation_marginal() {
    let rep = gen_replicate(SynthName::S3, 1000, 10, 6, X10Sign::Negative);
    let train = rep.train.subset(Split::Train);
    let val = rep.train.subset(Split::Val);
    let d = train.n_features;
    let (imp, _) = fit_imputer(&ImputerSpec::Marginal, &train.x, &val.x, d, 3).unwrap();
    let mut rng = seeded(10);
    let n = 10_000;
    let z = vec![0u8; d];
    let x = vec![0.0; d];
    let mut draws = vec![Vec::with_capacity(n); d];
    for _ in 0..n {
        let out = imp.impute(&x, &z, &mut rng).unwrap();
        for j in 0..d {
            draws[j].push(out[j]);
        }
    }
    let crit = ks_critical(n, val.len());
    for j in 0..d {
        let column: Vec<f64> = (0..val.len()).map(|i| val.row(i)[j]).collect();
        let stat = ks(draws[j].clone(), column);
        assert!(stat < crit, "feature {j}: KS {stat} >= {crit}");
    }
}
