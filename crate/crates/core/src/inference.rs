//! Dynamic prediction: longitudinal forecasts, conditional survival and
//! event-free probabilities, next-event sampling, MC-dropout intervals and
//! one-step rollout.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PatientRecord;
use crate::error::{LsrError, Result};
use crate::simulator::GroundTruthOracle;
use crate::transformer::{ModelParameters, ModelRun, Query};

pub use crate::thinning::{thinning_sample_next, ThinningOutcome};

/// Largest number of decoder queries evaluated in one forward pass.
pub const QUERY_CHUNK: usize = 1024;

/// Rates at `time` given the first `history` visits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateQuery {
    pub time: f64,
    pub history: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub intensity: f64,
    pub hazard: f64,
}

/// Anything that can evaluate visit intensity and death hazard for a patient.
pub trait RateProvider {
    fn rates(&mut self, record: &PatientRecord, queries: &[RateQuery]) -> Result<Vec<Rates>>;
}

impl RateProvider for &GroundTruthOracle {
    fn rates(&mut self, _record: &PatientRecord, queries: &[RateQuery]) -> Result<Vec<Rates>> {
        queries
            .iter()
            .map(|q| {
                Ok(Rates {
                    intensity: self.intensity(q.time)?,
                    hazard: self.hazard(q.time)?,
                })
            })
            .collect()
    }
}

/// Constant rates, independent of time and history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrozenRates {
    pub intensity: f64,
    pub hazard: f64,
}

impl RateProvider for FrozenRates {
    fn rates(&mut self, _record: &PatientRecord, queries: &[RateQuery]) -> Result<Vec<Rates>> {
        Ok(vec![
            Rates {
                intensity: self.intensity,
                hazard: self.hazard,
            };
            queries.len()
        ])
    }
}

/// Rates read from the model's intensity and hazard heads.
#[derive(Debug, Clone, Copy)]
pub struct ModelRates<'a> {
    pub params: &'a ModelParameters,
    /// Dropout rate and seed, `None` for evaluation mode.
    pub dropout: Option<(f64, u64)>,
}

impl<'a> ModelRates<'a> {
    pub fn new(params: &'a ModelParameters) -> Self {
        Self { params, dropout: None }
    }
}

impl RateProvider for ModelRates<'_> {
    fn rates(&mut self, record: &PatientRecord, queries: &[RateQuery]) -> Result<Vec<Rates>> {
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(QUERY_CHUNK) {
            let history = chunk.iter().map(|q| q.history).max().unwrap_or(0);
            let mut run = ModelRun::with_dropout(self.params, record.covariates.as_slice(), self.dropout);
            let enc = run.encode(record, history.min(record.n_visits()))?;
            let qs: Vec<Query> = chunk.iter().map(|q| Query::rates(q.time, q.history)).collect();
            let preds = run.predict(&enc, &qs);
            out.extend(run.read(&preds, &qs).into_iter().map(|r| Rates {
                intensity: r.intensity,
                hazard: r.hazard,
            }));
        }
        Ok(out)
    }
}

fn last_visit(history: &PatientRecord) -> Result<f64> {
    history.visit_times().last().copied().ok_or(LsrError::NoVisits)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(LsrError::config("tau", format!("must be positive and finite, got {tau}")))
    }
}

/// Longitudinal forecast at `t_J + τ` given every visit of `history`,
/// indexed by dimension. `overrides[k]` replaces the fed-back forecast of
/// order position `k`.
pub fn predict_longitudinal(
    params: &ModelParameters,
    history: &PatientRecord,
    tau: f64,
    overrides: &[Option<f64>],
    dropout: Option<(f64, u64)>,
) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let t = last_visit(history)? + tau;
    predict_longitudinal_at(params, history, history.n_visits(), t, overrides, dropout)
}

/// Longitudinal forecast at absolute time `t` given the first `n_history`
/// visits of `record`.
pub fn predict_longitudinal_at(
    params: &ModelParameters,
    record: &PatientRecord,
    n_history: usize,
    t: f64,
    overrides: &[Option<f64>],
    dropout: Option<(f64, u64)>,
) -> Result<Vec<f64>> {
    let mut run = ModelRun::with_dropout(params, record.covariates.as_slice(), dropout);
    let enc = run.encode(record, n_history)?;
    let q = [Query {
        time: t,
        history: n_history,
        longitudinal: true,
        overrides: overrides.to_vec(),
    }];
    let preds = run.predict(&enc, &q);
    Ok(run.read(&preds, &q).remove(0).longitudinal.expect("longitudinal query"))
}

/// Which rate a probability integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateKind {
    Intensity,
    Hazard,
}

/// `exp(-∫_start^{start+τ} rate)` for every `τ` in `horizons`, with the
/// first `n_history` visits as history. One set of `n` uniform samples on
/// `(start, start + max τ]` is shared by all horizons, so the curve is
/// non-increasing in `τ`.
pub fn survival_curve<P: RateProvider, R: Rng + ?Sized>(
    provider: &mut P,
    record: &PatientRecord,
    n_history: usize,
    start: f64,
    horizons: &[f64],
    kind: RateKind,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(LsrError::TooFewSamples { min: 1, got: 0 });
    }
    if let Some(&bad) = horizons.iter().find(|h| !(**h >= 0.0 && h.is_finite())) {
        return Err(LsrError::config("tau", format!("must be non-negative and finite, got {bad}")));
    }
    let tau_max = horizons.iter().copied().fold(0.0, f64::max);
    if tau_max == 0.0 {
        return Ok(vec![1.0; horizons.len()]);
    }
    let offsets: Vec<f64> = (0..n).map(|_| (1.0 - rng.gen::<f64>()) * tau_max).collect();
    let queries: Vec<RateQuery> = offsets
        .iter()
        .map(|&o| RateQuery {
            time: start + o,
            history: n_history,
        })
        .collect();
    let rates = provider.rates(record, &queries)?;
    let values: Vec<f64> = rates
        .iter()
        .zip(&queries)
        .map(|(r, q)| {
            let v = match kind {
                RateKind::Intensity => r.intensity,
                RateKind::Hazard => r.hazard,
            };
            if v.is_finite() && v >= 0.0 {
                Ok(v)
            } else {
                Err(LsrError::NonFiniteRate { time: q.time, value: v })
            }
        })
        .collect::<Result<_>>()?;
    let weight = tau_max / n as f64;
    Ok(horizons
        .iter()
        .map(|&tau| {
            let integral: f64 = offsets.iter().zip(&values).filter(|(o, _)| **o <= tau).map(|(_, v)| v).sum::<f64>() * weight;
            (-integral).exp()
        })
        .collect())
}

/// `P(no death in (t_J, t_J + τ] | H_J)`.
pub fn conditional_survival<P: RateProvider, R: Rng + ?Sized>(
    provider: &mut P,
    history: &PatientRecord,
    tau: f64,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    check_tau(tau)?;
    let start = last_visit(history)?;
    Ok(survival_curve(provider, history, history.n_visits(), start, &[tau], RateKind::Hazard, n, rng)?[0])
}

/// `P(no visit in (t_J, t_J + τ] | H_J)`.
pub fn event_free_probability<P: RateProvider, R: Rng + ?Sized>(
    provider: &mut P,
    history: &PatientRecord,
    tau: f64,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    check_tau(tau)?;
    let start = last_visit(history)?;
    Ok(survival_curve(provider, history, history.n_visits(), start, &[tau], RateKind::Intensity, n, rng)?[0])
}

/// Next visit on `(t0, t_bound]` by thinning the provider's intensity given
/// the first `n_history` visits.
pub fn sample_next_visit<P: RateProvider, R: Rng + ?Sized>(
    provider: &mut P,
    record: &PatientRecord,
    n_history: usize,
    t0: f64,
    t_bound: f64,
    rng: &mut R,
) -> Result<ThinningOutcome> {
    let mut failure = None;
    let out = thinning_sample_next(
        |t| match provider.rates(record, &[RateQuery { time: t, history: n_history }]) {
            Ok(r) => r[0].intensity,
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        },
        t0,
        t_bound,
        rng,
    )?;
    match failure {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyInterval {
    pub mean: f64,
    pub q05: f64,
    pub q95: f64,
    pub n_samples: usize,
}

/// Lower empirical quantile: the smallest sample `x` with `F̂(x) >= p`.
pub fn lower_quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[k - 1]
}

/// Runs `predict` `n` times with independent dropout seeds drawn from
/// `seed` and summarises the spread.
pub fn mc_dropout<F: FnMut(u64) -> Result<f64>>(mut predict: F, n: usize, seed: u64) -> Result<UncertaintyInterval> {
    if n < 2 {
        return Err(LsrError::TooFewSamples { min: 2, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n).map(|_| predict(rng.gen())).collect::<Result<Vec<f64>>>()?;
    Ok(UncertaintyInterval {
        mean: samples.iter().sum::<f64>() / n as f64,
        q05: lower_quantile(&samples, 0.05),
        q95: lower_quantile(&samples, 0.95),
        n_samples: n,
    })
}

/// Number of thinning draws averaged by [`rollout`].
pub const ROLLOUT_SAMPLES: usize = 100;

/// Mean of `n` thinning draws of the next visit on `(t_J, t_J + horizon]`.
/// Unaccepted draws are left out of the mean; when none is accepted the
/// boundary is returned. Returns `(t_next, accepted draws)`.
pub fn expected_next_visit<P: RateProvider, R: Rng + ?Sized>(
    provider: &mut P,
    history: &PatientRecord,
    horizon: f64,
    n: usize,
    rng: &mut R,
) -> Result<(f64, usize)> {
    check_tau(horizon)?;
    let t_j = last_visit(history)?;
    let mut sum = 0.0;
    let mut accepted = 0;
    for _ in 0..n {
        let out = sample_next_visit(provider, history, history.n_visits(), t_j, t_j + horizon, rng)?;
        if out.accepted {
            sum += out.time;
            accepted += 1;
        }
    }
    if accepted == 0 {
        Ok((t_j + horizon, 0))
    } else {
        Ok((sum / accepted as f64, accepted))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub time: f64,
    pub intensity: f64,
    pub hazard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub t_next: f64,
    pub accepted_samples: usize,
    /// Set when no draw was accepted and `t_next` is the horizon boundary.
    pub at_boundary: bool,
    pub longitudinal: Vec<f64>,
    /// Fitted rates at each observed visit (given the preceding visits) and
    /// at `t_next` (given all visits).
    pub trace: Vec<TracePoint>,
}

/// Predicts the next visit time as the mean of thinning draws, then the
/// longitudinal values at that time.
pub fn rollout<R: Rng + ?Sized>(params: &ModelParameters, history: &PatientRecord, horizon: f64, rng: &mut R) -> Result<Rollout> {
    let mut provider = ModelRates::new(params);
    let (t_next, accepted) = expected_next_visit(&mut provider, history, horizon, ROLLOUT_SAMPLES, rng)?;
    let longitudinal = predict_longitudinal_at(params, history, history.n_visits(), t_next, &[], None)?;
    let mut queries: Vec<RateQuery> = history
        .visit_times()
        .iter()
        .enumerate()
        .map(|(j, &t)| RateQuery { time: t, history: j })
        .collect();
    queries.push(RateQuery {
        time: t_next,
        history: history.n_visits(),
    });
    let rates = provider.rates(history, &queries)?;
    Ok(Rollout {
        t_next,
        accepted_samples: accepted,
        at_boundary: accepted == 0,
        longitudinal,
        trace: queries
            .iter()
            .zip(rates)
            .map(|(q, r)| TracePoint {
                time: q.time,
                intensity: r.intensity,
                hazard: r.hazard,
            })
            .collect(),
    })
}

/// Default rollout horizon: twice the stored 99th percentile of training
/// inter-visit gaps.
pub fn default_horizon(params: &ModelParameters) -> Result<f64> {
    params
        .meta
        .gap_q99
        .map(|g| 2.0 * g)
        .ok_or_else(|| LsrError::config("horizon", "checkpoint has no inter-visit gap statistic; pass a horizon"))
}
