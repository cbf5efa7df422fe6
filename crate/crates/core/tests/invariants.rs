use limval_core::examples::{builtin, ex3_with_dim};
use limval_core::grid::GridSpec;
use limval_core::integrate::{average_cost, rollout, rollout_with, BoxPolicy, PiecewiseConstantControl};
use limval_core::nonexpansive::{check_delta, check_scalar, DeltaKind, DeltaMetric, Modulus};
use limval_core::problem::{normalize_cost, ControlPoint, ControlProblem, Cost};
use limval_core::value::{nu_sup_average, value_backward, w_min_sup, SearchBudget};
use proptest::prelude::*;

fn norm(y: &[f64]) -> f64 {
    y.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn word(len: usize, n_u: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..n_u, len)
}

#[test]
fn rotation_norm_is_conserved() {
    let p = builtin("ex1").unwrap().problem;
    let c = PiecewiseConstantControl::constant(1e-3, 0, 20_000);
    let tr = rollout(&p, &c, &p.y0, 20.0).unwrap();
    let drift = tr.states.iter().map(|y| (norm(y) - 1.0).abs()).fold(0.0, f64::max);
    assert!(drift <= 1e-6, "drift {drift}");
}

#[test]
fn bang_control_average_is_half_plus_order_one_over_t() {
    // u = 1 until t_hat, then coast at speed t_hat: y1 = t_hat^2 / 2 + t_hat (t - t_hat)
    // enters the band at 1 / t_hat + t_hat / 2 and leaves it at T = 2 / t_hat + t_hat / 2
    let p = builtin("ex5").unwrap().problem;
    for (t_hat, step) in [(0.1, 0.05), (0.05, 0.025), (0.02, 0.01)] {
        let big_t: f64 = 2.0 / t_hat + t_hat / 2.0;
        let n = (big_t / step).round() as usize;
        let k = (t_hat / step).round() as usize;
        let idx: Vec<usize> = (0..n).map(|i| if i < k { 4 } else { 0 }).collect();
        let c = PiecewiseConstantControl::new(step, idx);
        let tr = rollout(&p, &c, &p.y0, n as f64 * step).unwrap();
        let g = average_cost(&tr, 0.0, big_t).unwrap();
        let oracle = (1.0 / t_hat + t_hat / 2.0) / big_t;
        assert!(g >= 0.5 - 1e-9 && g <= 0.5 + 4.0 / big_t, "T = {big_t}: {g}");
        assert!((g - oracle).abs() <= 2.0 * step / big_t + 1e-9, "T = {big_t}: {g} vs {oracle}");
    }
}

#[test]
fn two_point_contraction_search_matches_enumeration() {
    let mut p = builtin("ex3").unwrap().problem;
    p.codebook = vec![ControlPoint(vec![-1.0]), ControlPoint(vec![1.0])];
    let budget = SearchBudget {
        beam_width: 16,
        restarts: 0,
        seed: 0,
    };
    for z in [-1.7, -0.3, 0.0, 0.9, 1.5] {
        for (m, n) in [(0.0, 2.0), (0.5, 1.5)] {
            let s = w_min_sup(&p, &[z], m, n, 0.5, &budget, None, &[]).unwrap();
            let best = (0..16usize)
                .map(|w| {
                    let c = PiecewiseConstantControl::new(0.5, (0..4).map(|b| (w >> (3 - b)) & 1).collect());
                    nu_sup_average(&p, &[z], &c, m, n).unwrap().value
                })
                .fold(f64::INFINITY, f64::min);
            assert!((s.value - best).abs() <= 1e-9, "z = {z}, m = {m}: {} vs {best}", s.value);
        }
    }
}

#[test]
fn rotation_value_field_matches_rollout() {
    let (p, map) = normalize_cost(&builtin("ex1").unwrap().problem).unwrap();
    let g = GridSpec::new(p.state_box.clone(), vec![50, 50]).unwrap();
    let f = value_backward(&p, &g, 10.0, 0.05).unwrap();
    let c = PiecewiseConstantControl::constant(0.05, 0, 200);
    let tr = rollout(&p, &c, &p.y0, 10.0).unwrap();
    for t in [1.0, 2.0, 5.0, 10.0] {
        let v = map.denormalize(f.value_at(t, &p.y0).unwrap());
        let r = map.denormalize(average_cost(&tr, 0.0, t).unwrap());
        assert!((v - r).abs() < 5e-3 * t, "t = {t}: field {v}, rollout {r}");
    }
}

#[test]
fn builtin_hypothesis_flags_agree_with_checks() {
    use limval_core::nonexpansive::{sample_pairs, PairSampling};
    let cfg = PairSampling {
        max_centers: 0,
        random_pairs: 300,
        seed: 3,
    };
    for name in ["ex1", "ex2", "ex3", "ex4", "ex5"] {
        let ex = builtin(name).unwrap();
        let pairs = sample_pairs(&ex.problem, None, &cfg);
        let r = check_scalar(&ex.problem, &pairs, 1e-9);
        assert_eq!(r.passed, ex.hypothesis_flags.scalar_nonexpansive, "{name}: {}", r.max_violation);
        if let Some(kind) = &ex.hypothesis_flags.delta_nonexpansive {
            let kind = DeltaKind::parse(kind).unwrap();
            let metric = DeltaMetric::for_problem(&ex.problem, kind, 3);
            // forward differences of a quadratic carry tau |g1 - g2|^2 at the
            // smallest tau; on these boxes |g1 - g2|^2 <= 12.5
            let tol = if kind == DeltaKind::SquaredEuclidean { 1e-4 * 12.5 } else { 1e-6 };
            let r = check_delta(&ex.problem, &metric, &pairs, tol).unwrap();
            assert!(r.passed, "{name}: {}", r.max_violation);
        }
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    use limval_core::par::with_threads;
    let p = builtin("ex4").unwrap().problem;
    let g = GridSpec::new(p.state_box.clone(), vec![24, 24]).unwrap();
    let run = || {
        let f = value_backward(&p, &g, 3.0, 0.1).unwrap();
        let s = w_min_sup(&p, &p.y0, 0.5, 2.0, 0.1, &SearchBudget::default(), Some(&f), &[]).unwrap();
        (f, s)
    };
    let (f1, s1) = with_threads(1, run);
    let (f3, s3) = with_threads(3, run);
    assert_eq!(f1, f3);
    assert_eq!(s1, s3);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn concatenation_is_consistent(w1 in word(20, 3), w2 in word(30, 3), z in -1.9f64..1.9) {
        let p = builtin("ex3").unwrap().problem;
        let step = 0.1;
        let a = PiecewiseConstantControl::new(step, w1);
        let b = PiecewiseConstantControl::new(step, w2);
        let ab = a.concat(&b).unwrap();
        let t1 = rollout(&p, &a, &[z], a.duration()).unwrap();
        let t2 = rollout(&p, &b, t1.final_state(), b.duration()).unwrap();
        let t12 = rollout(&p, &ab, &[z], ab.duration()).unwrap();
        let total = ab.duration();
        prop_assert!((t12.final_state()[0] - t2.final_state()[0]).abs() <= 1e-9 * total);
        let cost = t1.cumulative_cost.last().unwrap() + t2.cumulative_cost.last().unwrap();
        prop_assert!((t12.cumulative_cost.last().unwrap() - cost).abs() <= 1e-9 * total);
    }

    #[test]
    fn saturating_pair_stays_ordered(w in word(200, 9)) {
        let p = builtin("ex4").unwrap().problem;
        let c = PiecewiseConstantControl::new(0.1, w);
        let tr = rollout(&p, &c, &p.y0, 20.0).unwrap();
        for y in &tr.states {
            prop_assert!(y[1] <= y[0] + 1e-12);
            prop_assert!(p.state_box.contains(y));
        }
    }

    #[test]
    fn cumulative_cost_is_monotone_and_bounded(w in word(100, 5)) {
        let p = builtin("ex5").unwrap().problem;
        let c = PiecewiseConstantControl::new(0.05, w);
        let tr = rollout_with(&p, &c, &p.y0, 5.0, BoxPolicy::Ignore).unwrap();
        for k in 1..tr.times.len() {
            let inc = tr.cumulative_cost[k] - tr.cumulative_cost[k - 1];
            prop_assert!((-1e-15..=0.05 + 1e-12).contains(&inc));
            prop_assert!(tr.cumulative_cost[k] <= tr.times[k] + 1e-12);
        }
    }

    #[test]
    fn zero_shift_average_is_plain_average(w in word(60, 3), k in 1usize..=60) {
        let p = builtin("ex3").unwrap().problem;
        let c = PiecewiseConstantControl::new(0.1, w);
        let tr = rollout(&p, &c, &[0.5], 6.0).unwrap();
        let t = k as f64 * 0.1;
        let g = average_cost(&tr, 0.0, t).unwrap();
        prop_assert!((g - tr.cumulative_cost[k] / tr.times[k]).abs() <= 1e-15);
    }

    #[test]
    fn constant_cost_gives_constant_averages(c in 0.0f64..=1.0, w in word(40, 3), m in 0usize..20, t in 1usize..20) {
        let mut p = builtin("ex3").unwrap().problem;
        p.cost = Cost::Constant { value: c };
        let ctl = PiecewiseConstantControl::new(0.1, w);
        let tr = rollout(&p, &ctl, &[0.0], 4.0).unwrap();
        let g = average_cost(&tr, m as f64 * 0.1, t as f64 * 0.1).unwrap();
        prop_assert!((g - c).abs() <= 1e-12);
    }

    #[test]
    fn contraction_scalar_value_is_minus_squared_distance(a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let p = builtin("ex3").unwrap().problem;
        let r = check_scalar(&p, &[(vec![a], vec![b])], 1e-9);
        prop_assert!((r.max_violation + (a - b) * (a - b)).abs() <= 1e-12);
    }

    #[test]
    fn contraction_passes_in_two_dimensions(
        y1 in prop::collection::vec(-2.0f64..2.0, 2),
        y2 in prop::collection::vec(-2.0f64..2.0, 2),
    ) {
        let p: ControlProblem = ex3_with_dim(2).problem;
        let r = check_scalar(&p, &[(y1, y2)], 1e-9);
        prop_assert!(r.passed);
    }

    #[test]
    fn l1_delta_is_a_premetric(
        a in prop::collection::vec(0.0f64..1.0, 2),
        b in prop::collection::vec(0.0f64..1.0, 2),
    ) {
        let m = DeltaMetric::new(DeltaKind::L1, Modulus::Linear { slope: 2.0 });
        prop_assert_eq!(m.delta(&a, &a), 0.0);
        prop_assert_eq!(m.delta(&a, &b), m.delta(&b, &a));
        prop_assert!(m.delta(&a, &b) >= 0.0);
    }

    #[test]
    fn search_value_is_an_achieved_sup(z in -1.9f64..1.9, seed in 0u64..1000) {
        let p = builtin("ex3").unwrap().problem;
        let b = SearchBudget { beam_width: 4, restarts: 2, seed };
        let s = w_min_sup(&p, &[z], 0.5, 2.0, 0.25, &b, None, &[]).unwrap();
        let again = nu_sup_average(&p, &[z], &s.control, 0.5, 2.0).unwrap();
        prop_assert!((s.value - again.value).abs() <= 1e-12);
    }
}
