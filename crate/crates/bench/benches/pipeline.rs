use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tlsr_core::inference::{ModelRates, RateProvider, RateQuery};
use tlsr_core::simulator::{simulate_cohort, true_loglik, CensoringSpec, SimulationConfig};
use tlsr_core::thinning::thinning_sample_next;
use tlsr_core::training::{mc_integral, patient_gradient, patient_loss};
use tlsr_core::transformer::{ModelConfig, ModelParameters};

fn cohort(n: usize) -> tlsr_core::simulator::Cohort {
    let cfg = SimulationConfig {
        n_patients: n,
        seed: 1,
        ..SimulationConfig::with_censoring(CensoringSpec::MEDIUM)
    };
    simulate_cohort(&cfg).expect("simulation")
}

fn simulation(c: &mut Criterion) {
    let cfg = SimulationConfig {
        n_patients: 100,
        seed: 1,
        ..SimulationConfig::with_censoring(CensoringSpec::MEDIUM)
    };
    c.bench_function("simulate_100_patients", |b| b.iter(|| simulate_cohort(black_box(&cfg)).expect("simulation")));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    c.bench_function("thinning_3t^0.25", |b| {
        b.iter(|| thinning_sample_next(|t| 3.0 * t.powf(0.25), 0.0, 5.0, &mut rng).expect("thinning"))
    });

    let co = cohort(1);
    let (record, oracle) = (&co.dataset.records[0], &co.oracles[0]);
    c.bench_function("true_loglik", |b| b.iter(|| true_loglik(black_box(record), oracle).expect("quadrature")));
    c.bench_function("mc_integral_oracle_n1000", |b| {
        b.iter(|| mc_integral(|t, _| oracle.intensity(t).expect("rate"), &[0.0, record.terminal_time()], 1000, &mut rng).expect("integral"))
    });
}

fn model(c: &mut Criterion) {
    let co = cohort(20);
    let record = co
        .dataset
        .records
        .iter()
        .max_by_key(|r| r.n_visits())
        .expect("patients");
    let params = ModelParameters::init(&ModelConfig::default(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut group = c.benchmark_group(format!("model_{}_visits", record.n_visits()));
    group.sample_size(20);
    group.bench_function("patient_loss", |b| b.iter(|| patient_loss(&params, record, 1, &mut rng).expect("loss")));
    group.bench_function("patient_gradient", |b| {
        b.iter(|| patient_gradient(&params, record, 1, Some(5), &mut rng).expect("gradient"))
    });
    let queries: Vec<RateQuery> = (1..=100)
        .map(|k| RateQuery {
            time: record.terminal_time() * k as f64 / 100.0,
            history: record.n_visits(),
        })
        .collect();
    group.bench_function("rates_100_queries", |b| {
        b.iter(|| ModelRates::new(&params).rates(record, &queries).expect("rates"))
    });
    group.finish();
}

criterion_group!(benches, simulation, model);
criterion_main!(benches);
