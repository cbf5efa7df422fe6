//! Data-parallel kernels under the rayon pool and sequentially.
//!
//! `cargo bench` measures the rayon build (all threads and a one-thread
//! pool); `cargo bench --no-default-features` measures the sequential
//! fallback under the same benchmark names.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use limval_core::examples::builtin;
use limval_core::grid::GridSpec;
use limval_core::nonexpansive::{check_scalar, sample_pairs, PairSampling};
use limval_core::par;
use limval_core::value::{value_backward, w_min_sup, SearchBudget};

fn mode() -> &'static str {
    if cfg!(feature = "parallel") {
        "rayon"
    } else {
        "sequential"
    }
}

fn threads() -> Vec<usize> {
    if cfg!(feature = "parallel") {
        let n = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        if n > 1 {
            vec![1, n]
        } else {
            vec![1]
        }
    } else {
        vec![1]
    }
}

fn kernels(c: &mut Criterion) {
    let ex4 = builtin("ex4").unwrap().problem;
    let grid = GridSpec::new(ex4.state_box.clone(), vec![40, 40]).unwrap();
    let ex5 = builtin("ex5").unwrap().problem;
    let pairs = sample_pairs(
        &ex5,
        None,
        &PairSampling {
            max_centers: 0,
            random_pairs: 2000,
            seed: 1,
        },
    );
    let ex3 = builtin("ex3").unwrap().problem;
    let budget = SearchBudget::default();

    let mut g = c.benchmark_group("kernels");
    g.sample_size(10);
    for n in threads() {
        let id = |what: &str| format!("{what}/{}/{n}t", mode());
        g.bench_function(id("value_backward_ex4_40x40_T10"), |b| {
            b.iter(|| par::with_threads(n, || black_box(value_backward(&ex4, &grid, 10.0, 0.05).unwrap())))
        });
        g.bench_function(id("check_scalar_ex5_2000_pairs"), |b| {
            b.iter(|| par::with_threads(n, || black_box(check_scalar(&ex5, &pairs, 1e-9))))
        });
        g.bench_function(id("w_min_sup_ex3_n8"), |b| {
            b.iter(|| par::with_threads(n, || black_box(w_min_sup(&ex3, &[1.5], 1.0, 8.0, 0.1, &budget, None, &[]).unwrap())))
        });
    }
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
