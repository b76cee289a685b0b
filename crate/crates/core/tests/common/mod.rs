#![allow(dead_code)]

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tlsr_core::data::{flatten_trajectory, BaselineCovariates, ConcurrentOrder, LongitudinalObservation, PatientRecord};
use tlsr_core::embedding::{embed_stream, PredKind};
use tlsr_core::transformer::{decode, encode, DecoderGroup, DecoderToken, ModelConfig, ModelParameters, ModelRun, Query};

pub const LEAK_TOL: f64 = 1e-10;

/// Visits at increasing times after `start`, each dimension missing with
/// probability `missing`.
pub fn random_visits<R: Rng>(rng: &mut R, m: usize, n: usize, start: f64, missing: f64) -> (Vec<f64>, Vec<LongitudinalObservation>) {
    let mut t = start;
    let mut times = Vec::with_capacity(n);
    let mut obs = Vec::with_capacity(n);
    for _ in 0..n {
        t += rng.gen_range(0.5..50.0);
        times.push(t);
        let v: Vec<Option<f64>> = (0..m).map(|_| (rng.gen::<f64>() >= missing).then(|| rng.gen_range(-3.0..3.0))).collect();
        obs.push(LongitudinalObservation::from_options(&v));
    }
    (times, obs)
}

pub fn random_record<R: Rng>(rng: &mut R, m: usize, p: usize, n: usize, missing: f64) -> PatientRecord {
    let cov = BaselineCovariates((0..p).map(|_| rng.gen_range(-2.0..2.0)).collect());
    let (times, obs) = random_visits(rng, m, n, 0.0, missing);
    let end = times.last().copied().unwrap_or(0.0) + rng.gen_range(0.0..30.0);
    PatientRecord::new("r", cov, times, obs, end, rng.gen())
        .expect("valid random record")
}

/// Small multi-layer model with random weights and no dropout.
pub fn random_params<R: Rng>(rng: &mut R, m: usize, p: usize) -> ModelParameters {
    let cfg = ModelConfig {
        m,
        p,
        d_time: 4,
        d_type: 4,
        d_base: 4,
        n_heads: 2,
        d_ff: 8,
        encoder_layers: 2,
        decoder_layers: 2,
        dropout: 0.0,
        scale_dot_products: rng.gen(),
    };
    let mut params = ModelParameters::init(&cfg, rng.gen());
    let mut perm: Vec<usize> = (0..m).collect();
    perm.shuffle(rng);
    params.meta.order = ConcurrentOrder::new(perm).expect("permutation");
    params
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rows(a: &Array2<f64>, n: usize) -> Vec<f64> {
    a.rows().into_iter().take(n).flat_map(|r| r.to_vec()).collect()
}

fn encoder_rows(params: &ModelParameters, record: &PatientRecord, n_visits: usize, keep: usize) -> Vec<f64> {
    let mut run = ModelRun::new(params, record.covariates.as_slice(), None);
    let enc = run.encode(record, n_visits).expect("encode");
    rows(run.tape.value(enc.out), keep)
}

fn query_outputs(params: &ModelParameters, record: &PatientRecord, n_visits: usize, time: f64, history: usize) -> Vec<f64> {
    let mut run = ModelRun::new(params, record.covariates.as_slice(), None);
    let enc = run.encode(record, n_visits).expect("encode");
    let q = [Query::full(time, history)];
    let preds = run.predict(&enc, &q);
    let r = run.read(&preds, &q).remove(0);
    let mut v = vec![r.intensity, r.hazard];
    v.extend(r.longitudinal.expect("longitudinal"));
    v
}

/// Replaces everything after visit `j` with fresh visits, terminal time
/// and censoring flag.
fn perturb_future<R: Rng>(rng: &mut R, record: &PatientRecord, j: usize, m: usize) -> PatientRecord {
    let start = record.visit_times()[j - 1];
    let k = rng.gen_range(0..5);
    let (later_t, later_o) = random_visits(rng, m, k, start, 0.3);
    let mut times = record.visit_times()[..j].to_vec();
    let mut obs = record.observations()[..j].to_vec();
    times.extend(later_t);
    obs.extend(later_o);
    let end = times.last().copied().unwrap_or(start) + rng.gen_range(0.0..30.0);
    PatientRecord::new("r", record.covariates.clone(), times, obs, end, rng.gen()).expect("valid perturbed record")
}

/// One randomized causal-integrity trial. Returns a description of every
/// violated invariant.
pub fn leakage_trial(seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(1..=3);
    let p = rng.gen_range(1..=3);
    let params = random_params(&mut rng, m, p);
    let n = rng.gen_range(2..=6);
    let record = random_record(&mut rng, m, p, n, 0.3);
    let j = rng.gen_range(1..n);
    let other = perturb_future(&mut rng, &record, j, m);
    let mut bad = Vec::new();

    // Encoder: rows of the first j visits ignore everything later.
    let full = encoder_rows(&params, &record, n, m * j);
    let prefix = encoder_rows(&params, &record, j, m * j);
    let perturbed = encoder_rows(&params, &other, other.n_visits(), m * j);
    let d = max_abs_diff(&full, &prefix).max(max_abs_diff(&full, &perturbed));
    if d > LEAK_TOL {
        bad.push(format!("encoder: prefix rows changed by {d:e} (seed {seed})"));
    }

    // Decoder: a query with history j ignores later visits.
    let s = record.visit_times()[j - 1] + rng.gen_range(0.1..20.0);
    let a = query_outputs(&params, &record, n, s, j);
    let b = query_outputs(&params, &record, j, s, j);
    let c = query_outputs(&params, &other, other.n_visits(), s, j);
    let d = max_abs_diff(&a, &b).max(max_abs_diff(&a, &c));
    if d > LEAK_TOL {
        bad.push(format!("decoder: history-{j} query changed by {d:e} (seed {seed})"));
    }

    // Decoder self-attention: token k of a group ignores later tokens and
    // other groups.
    let dm = params.config.d_model();
    let enc_stream = flatten_trajectory(&record, &params.meta.order, n).expect("flatten");
    let enc_in = embed_stream(&params, &enc_stream, record.covariates.as_slice()).expect("embed");
    let enc_out = encode(&params, &enc_in, &enc_stream.observed_mask);
    let group_len = 2 + m;
    let groups = vec![
        DecoderGroup {
            time: s,
            history: j,
            tokens: (0..group_len).map(|k| DecoderToken::Predict(pred_kind(k))).collect(),
        },
        DecoderGroup {
            time: s + 1.0,
            history: n,
            tokens: (0..group_len).map(|k| DecoderToken::Predict(pred_kind(k))).collect(),
        },
    ];
    let tokens = Array2::from_shape_fn((2 * group_len, dm), |_| rng.gen_range(-1.0..1.0));
    let base = decode(&params, &enc_out, &enc_stream.observed_mask, &tokens, &groups);
    let k = rng.gen_range(0..group_len);
    let mut changed = tokens.clone();
    for r in k + 1..2 * group_len {
        for c in 0..dm {
            changed[[r, c]] += rng.gen_range(-1.0..1.0);
        }
    }
    let after = decode(&params, &enc_out, &enc_stream.observed_mask, &changed, &groups);
    let d = max_abs_diff(&rows(&base, k + 1), &rows(&after, k + 1));
    if d > LEAK_TOL {
        bad.push(format!("decoder self-attention: token {k} saw later tokens ({d:e}, seed {seed})"));
    }

    // Missing slots: arbitrary content in masked rows changes no observed
    // encoder row and no decoder output.
    let observed = &enc_stream.observed_mask;
    if observed.iter().any(|o| !o) {
        let mut noisy_in = enc_in.clone();
        let mut noisy_out = enc_out.clone();
        for (r, &o) in observed.iter().enumerate() {
            if !o {
                for c in 0..dm {
                    noisy_in[[r, c]] += rng.gen_range(-5.0..5.0);
                    noisy_out[[r, c]] += rng.gen_range(-5.0..5.0);
                }
            }
        }
        let out2 = encode(&params, &noisy_in, observed);
        let d = (0..observed.len())
            .filter(|&r| observed[r])
            .map(|r| max_abs_diff(&enc_out.row(r).to_vec(), &out2.row(r).to_vec()))
            .fold(0.0, f64::max);
        if d > LEAK_TOL {
            bad.push(format!("masking: encoder rows changed by {d:e} (seed {seed})"));
        }
        let dec2 = decode(&params, &noisy_out, observed, &tokens, &groups);
        let d = max_abs_diff(&rows(&base, 2 * group_len), &rows(&dec2, 2 * group_len));
        if d > LEAK_TOL {
            bad.push(format!("masking: decoder outputs changed by {d:e} (seed {seed})"));
        }
    }
    bad
}

fn pred_kind(k: usize) -> PredKind {
    match k {
        0 => PredKind::Intensity,
        1 => PredKind::Hazard,
        u => PredKind::Longitudinal(u - 2),
    }
}
