use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nsens_core::diversity::exact_distance;
use nsens_core::genome::{arch_rep, normalize, random_genome, SearchSpaceBounds};
use nsens_core::rng::seeded;
use nsens_core::search::{step, NsConfig, SearchState, SurrogateOracle};
use nsens_core::surrogate::{fit, DistanceRecord};
use nsens_core::{DistanceVector, ForestParams, Metric, Mode, PredictionProfile};
use rand::Rng;

fn profile(n: usize, accuracy: f64, rng: &mut impl Rng) -> PredictionProfile {
    PredictionProfile::from_correct((0..n).map(|_| rng.random_bool(accuracy)).collect())
}

fn exact_metrics(c: &mut Criterion) {
    let bounds = SearchSpaceBounds::expanded();
    let mut rng = seeded(1);
    let a = arch_rep(&normalize(&random_genome(&bounds, &mut rng), &bounds));
    let b = arch_rep(&normalize(&random_genome(&bounds, &mut rng), &bounds));
    let mut group = c.benchmark_group("exact_distance");
    for n in [100, 1_000, 10_000] {
        let (p, q) = (profile(n, 0.8, &mut rng), profile(n, 0.8, &mut rng));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| exact_distance(black_box(&p), black_box(&q), &a, &b).unwrap())
        });
    }
    group.finish();
}

/// Random records with a smooth target so the trees have some depth.
fn records(n: usize, bounds: &SearchSpaceBounds) -> Vec<DistanceRecord> {
    let mut rng = seeded(2);
    (0..n)
        .map(|_| {
            let x = normalize(&random_genome(bounds, &mut rng), bounds);
            let y = normalize(&random_genome(bounds, &mut rng), bounds);
            let d: f64 = x.values().iter().zip(y.values()).map(|(u, v)| (u - v).abs()).sum::<f64>() / x.len() as f64;
            let mut input = x.values().to_vec();
            input.extend_from_slice(y.values());
            DistanceRecord { x: input, d: DistanceVector([d; 6]) }
        })
        .collect()
}

fn forest(c: &mut Criterion) {
    let bounds = SearchSpaceBounds::expanded();
    let data = records(780, &bounds);
    let params = ForestParams { trees: 100, ..ForestParams::default() };
    c.bench_function("forest_fit_780_rows", |bench| bench.iter(|| fit(black_box(&data), &params, true).unwrap()));

    let rf = fit(&data, &params, true).unwrap();
    let mut rng = seeded(3);
    let x = normalize(&random_genome(&bounds, &mut rng), &bounds);
    let y = normalize(&random_genome(&bounds, &mut rng), &bounds);
    c.bench_function("forest_predict_pair", |bench| bench.iter(|| rf.predict(black_box(&x), black_box(&y)).unwrap()));
}

fn surrogate_step(c: &mut Criterion) {
    let bounds = SearchSpaceBounds::expanded();
    let rf = fit(&records(300, &bounds), &ForestParams { trees: 50, ..ForestParams::default() }, true).unwrap();
    let cfg = NsConfig {
        iterations: 20,
        population_size: 20,
        ensemble_size: 5,
        metric: Metric::Prop2,
        neighbours: 5,
        archive_sample: 5,
        tournament_size: 10,
        mode: Mode::Surrogate,
        seed: 4,
    };
    c.bench_function("surrogate_search_20x20", |bench| {
        bench.iter(|| {
            let mut oracle = SurrogateOracle::new(&rf, bounds.clone());
            let mut state = SearchState::new(&cfg, &bounds);
            for _ in 0..cfg.iterations {
                step(&mut state, &cfg, &bounds, &mut oracle).unwrap();
            }
            state
        })
    });
}

criterion_group!(benches, exact_metrics, forest, surrogate_step);
criterion_main!(benches);
