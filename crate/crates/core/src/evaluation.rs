//! Simulation-study metrics: one-step longitudinal RMSE, log-likelihood RMSE
//! against the generating process, landmark survival curves and the
//! IPCW (Graf) Brier score.

use std::collections::HashMap;
use std::io::Write;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PatientRecord, Split};
use crate::error::{LsrError, Result};
use crate::inference::{lower_quantile, survival_curve, ModelRates, RateKind, RateProvider};
use crate::simulator::{true_loglik, GroundTruthOracle};
use crate::training::{loglik_terms, sub_seed};
use crate::transformer::{ModelParameters, ModelRun, Query};

/// Number of Brier-score time points between the 10% and 90% death-time
/// quantiles.
pub const BS_POINTS: usize = 6;

/// Per-dimension RMSE over observed entries of `(forecast, record)` pairs,
/// where `forecast[j]` predicts visit `j` of the record (`None` skips it).
pub fn rmse_from_forecasts<'a, I>(m: usize, pairs: I) -> Vec<f64>
where
    I: IntoIterator<Item = (&'a PatientRecord, Vec<Option<Vec<f64>>>)>,
{
    let mut se = vec![0.0; m];
    let mut count = vec![0usize; m];
    for (record, forecasts) in pairs {
        for (obs, f) in record.observations().iter().zip(forecasts) {
            let Some(f) = f else { continue };
            for u in 0..m {
                if let Some(y) = obs.get(u) {
                    se[u] += (f[u] - y).powi(2);
                    count[u] += 1;
                }
            }
        }
    }
    se.iter()
        .zip(&count)
        .map(|(s, &c)| if c == 0 { f64::NAN } else { (s / c as f64).sqrt() })
        .collect()
}

/// One-step-ahead forecasts of visits `j >= 1` (0-based) given visits
/// `0..j`, all decoded in one pass.
pub fn one_step_forecasts(params: &ModelParameters, record: &PatientRecord) -> Result<Vec<Option<Vec<f64>>>> {
    let j = record.n_visits();
    let mut out = vec![None; j];
    if j < 2 {
        return Ok(out);
    }
    let mut run = ModelRun::new(params, record.covariates.as_slice(), None);
    let enc = run.encode(record, j - 1)?;
    let queries: Vec<Query> = (1..j).map(|k| Query::full(record.visit_times()[k], k)).collect();
    let preds = run.predict(&enc, &queries);
    for (k, r) in run.read(&preds, &queries).into_iter().enumerate() {
        out[k + 1] = r.longitudinal;
    }
    Ok(out)
}

/// One-step-ahead longitudinal RMSE per dimension over `records`.
pub fn rmse_longitudinal(params: &ModelParameters, records: &[&PatientRecord]) -> Result<Vec<f64>> {
    let pairs = records
        .iter()
        .map(|&r| Ok((r, one_step_forecasts(params, r)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(rmse_from_forecasts(params.config.m, pairs))
}

/// `(rmse_λ, rmse_h)` between `provider`'s MC log-likelihoods (`n` samples
/// per interval) and the generating process's exact ones.
pub fn loglik_rmse<P: RateProvider>(
    provider: &mut P,
    records: &[&PatientRecord],
    oracles: &HashMap<&str, &GroundTruthOracle>,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(LsrError::config("records", "no patients to evaluate"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut se = (0.0, 0.0);
    for r in records {
        let oracle = oracles.get(r.id.as_str()).ok_or_else(|| LsrError::MissingOracle(r.id.clone()))?;
        let (true_l, true_h) = true_loglik(r, oracle)?;
        let terms = loglik_terms(provider, r, n, &mut rng)?;
        se.0 += (terms.recurrent() - true_l).powi(2);
        se.1 += (terms.survival() - true_h).powi(2);
    }
    let k = records.len() as f64;
    Ok(((se.0 / k).sqrt(), (se.1 / k).sqrt()))
}

/// Landmark time and the evaluation patients still at risk there.
#[derive(Debug, Clone)]
pub struct Landmark<'a> {
    pub time: f64,
    pub patients: Vec<&'a PatientRecord>,
}

/// Observed death times of `records`.
pub fn death_times(records: &[&PatientRecord]) -> Vec<f64> {
    records.iter().filter(|r| r.died()).map(|r| r.terminal_time()).collect()
}

/// `t_LT` is the lower empirical 10% quantile of training death times.
pub fn landmark_cohort<'a>(train: &[&PatientRecord], eval: &[&'a PatientRecord]) -> Result<Landmark<'a>> {
    let deaths = death_times(train);
    if deaths.is_empty() {
        return Err(LsrError::NoDeaths);
    }
    let time = lower_quantile(&deaths, 0.1);
    let patients: Vec<&PatientRecord> = eval.iter().copied().filter(|r| r.terminal_time() > time).collect();
    if patients.is_empty() {
        warn!("no evaluation patient is at risk at the landmark time {time}");
    }
    Ok(Landmark { time, patients })
}

/// Kaplan–Meier estimate of the censoring survivor function `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct CensoringKm {
    /// Distinct censoring times and `G` just after each.
    steps: Vec<(f64, f64)>,
}

impl CensoringKm {
    /// Censorings are the events; deaths are censored observations.
    pub fn fit(records: &[&PatientRecord]) -> Self {
        let mut times: Vec<(f64, bool)> = records.iter().map(|r| (r.terminal_time(), r.censored())).collect();
        times.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut at_risk = times.len();
        let mut g = 1.0;
        let mut steps = Vec::new();
        let mut i = 0;
        while i < times.len() {
            let t = times[i].0;
            let mut events = 0;
            let mut leaving = 0;
            while i < times.len() && times[i].0 == t {
                events += times[i].1 as usize;
                leaving += 1;
                i += 1;
            }
            if events > 0 {
                g *= 1.0 - events as f64 / at_risk as f64;
                steps.push((t, g));
            }
            at_risk -= leaving;
        }
        Self { steps }
    }

    /// `G(t)`, right-continuous.
    pub fn value(&self, t: f64) -> f64 {
        let k = self.steps.partition_point(|s| s.0 <= t);
        if k == 0 {
            1.0
        } else {
            self.steps[k - 1].1
        }
    }

    /// `G(t⁻)`.
    pub fn left_limit(&self, t: f64) -> f64 {
        let k = self.steps.partition_point(|s| s.0 < t);
        if k == 0 {
            1.0
        } else {
            self.steps[k - 1].1
        }
    }

    /// Weights `G ≡ 1`, for data without censoring.
    pub fn none() -> Self {
        Self { steps: Vec::new() }
    }
}

/// Outcome of one evaluation patient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub time: f64,
    pub died: bool,
}

/// IPCW Brier score at `t`:
/// `(1/n) Σ [S_i(t)² 1(T_i <= t, death) / G(T_i⁻) + (1 - S_i(t))² 1(T_i > t) / G(t)]`.
/// Patients whose weight would divide by zero are dropped from the sum
/// and from `n`.
pub fn brier_score(t: f64, predicted: &[f64], outcomes: &[Outcome], km: &CensoringKm, left_limit: bool) -> Result<f64> {
    if predicted.len() != outcomes.len() {
        return Err(LsrError::Shape {
            name: "predicted_survival".into(),
            expected: vec![outcomes.len()],
            actual: vec![predicted.len()],
        });
    }
    if let Some(bad) = predicted.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(LsrError::config("predicted_survival", format!("{bad} is not a probability")));
    }
    let g_t = km.value(t);
    let mut sum = 0.0;
    let mut n = 0usize;
    for (s, o) in predicted.iter().zip(outcomes) {
        if o.time <= t && o.died {
            let g = if left_limit { km.left_limit(o.time) } else { km.value(o.time) };
            if g <= 0.0 {
                warn!("censoring weight vanishes at {}; patient excluded", o.time);
                continue;
            }
            sum += s * s / g;
        } else if o.time > t {
            if g_t <= 0.0 {
                warn!("censoring weight vanishes at {t}; patient excluded");
                continue;
            }
            sum += (1.0 - s).powi(2) / g_t;
        }
        n += 1;
    }
    if n == 0 {
        return Err(LsrError::config("outcomes", "no patient contributes to the Brier score"));
    }
    Ok(sum / n as f64)
}

/// Trapezoidal integral of `(t, BS(t))` divided by the time range.
pub fn integrated_brier(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(LsrError::TooFewSamples { min: 2, got: points.len() });
    }
    let range = points[points.len() - 1].0 - points[0].0;
    if !(range > 0.0) {
        return Err(LsrError::config("bs_points", "times must increase"));
    }
    let area: f64 = points.windows(2).map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0)).sum();
    Ok(area / range)
}

/// `BS_POINTS` evenly spaced times from the 10% to the 90% quantile of
/// training death times.
pub fn brier_times(train: &[&PatientRecord]) -> Result<Vec<f64>> {
    let deaths = death_times(train);
    if deaths.is_empty() {
        return Err(LsrError::NoDeaths);
    }
    let (lo, hi) = (lower_quantile(&deaths, 0.1), lower_quantile(&deaths, 0.9));
    Ok((0..BS_POINTS).map(|k| lo + (hi - lo) * k as f64 / (BS_POINTS - 1) as f64).collect())
}

/// Conditional survival `S(t | H(t_LT), T > t_LT)` of each patient at each
/// absolute time in `times`, sharing MC samples across times.
pub fn landmark_survival<P: RateProvider>(
    provider: &mut P,
    patients: &[&PatientRecord],
    landmark: f64,
    times: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let horizons: Vec<f64> = times.iter().map(|t| (t - landmark).max(0.0)).collect();
    patients
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 7, i as u64));
            let history = r.visit_times().partition_point(|&v| v <= landmark);
            survival_curve(provider, r, history, landmark, &horizons, RateKind::Hazard, n, &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// MC samples per interval for log-likelihoods.
    pub loglik_mc_samples: usize,
    /// MC samples per patient for survival probabilities.
    pub survival_mc_samples: usize,
    pub grid_to: f64,
    pub grid_points: usize,
    /// Use `G(T_i⁻)` rather than `G(T_i)` for the death term.
    pub left_limit: bool,
    pub seed: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            loglik_mc_samples: 100,
            survival_mc_samples: 1000,
            grid_to: 16000.0,
            grid_points: 101,
            left_limit: true,
            seed: 0,
        }
    }
}

impl EvaluationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.loglik_mc_samples == 0 || self.survival_mc_samples == 0 {
            return Err(LsrError::config("mc_samples", "must be at least 1"));
        }
        if self.grid_points < 2 {
            return Err(LsrError::config("grid_points", "must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SurvivalCurves {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub patients: Vec<(String, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rmse: Vec<f64>,
    pub loglik_rmse_recurrent: Option<f64>,
    pub loglik_rmse_survival: Option<f64>,
    pub landmark_time: f64,
    pub landmark_patients: usize,
    pub bs_points: Vec<(f64, f64)>,
    pub ibs: f64,
    #[serde(skip)]
    pub survival_curves: SurvivalCurves,
}

/// Evaluates a trained model on the evaluation split of `dataset`, using the
/// training split for the landmark and the censoring estimator.
pub fn evaluate(params: &ModelParameters, dataset: &Dataset, oracles: Option<&[GroundTruthOracle]>, cfg: &EvaluationConfig) -> Result<EvaluationReport> {
    cfg.validate()?;
    if dataset.splits.is_none() {
        return Err(LsrError::config("data.split", "dataset has no train/val/eval assignment"));
    }
    let train = dataset.split(Split::Train);
    let eval = dataset.split(Split::Eval);
    if eval.is_empty() {
        return Err(LsrError::config("data.split", "evaluation split is empty"));
    }
    let rmse = rmse_longitudinal(params, &eval)?;

    let (loglik_rmse_recurrent, loglik_rmse_survival) = match oracles {
        Some(list) => {
            let map: HashMap<&str, &GroundTruthOracle> = list.iter().map(|o| (o.id.as_str(), o)).collect();
            let (l, h) = loglik_rmse(&mut ModelRates::new(params), &eval, &map, cfg.loglik_mc_samples, sub_seed(cfg.seed, 5, 0))?;
            (Some(l), Some(h))
        }
        None => (None, None),
    };

    let landmark = landmark_cohort(&train, &eval)?;
    let bs_times = brier_times(&train)?;
    let grid: Vec<f64> = (0..cfg.grid_points)
        .map(|k| landmark.time + (cfg.grid_to - landmark.time) * k as f64 / (cfg.grid_points - 1) as f64)
        .collect();
    let mut times = bs_times.clone();
    times.extend_from_slice(&grid);
    let surv = landmark_survival(
        &mut ModelRates::new(params),
        &landmark.patients,
        landmark.time,
        &times,
        cfg.survival_mc_samples,
        sub_seed(cfg.seed, 6, 0),
    )?;

    let km = CensoringKm::fit(&train);
    let outcomes: Vec<Outcome> = landmark
        .patients
        .iter()
        .map(|r| Outcome {
            time: r.terminal_time(),
            died: r.died(),
        })
        .collect();
    let mut bs_points = Vec::with_capacity(BS_POINTS);
    for (k, &t) in bs_times.iter().enumerate() {
        let predicted: Vec<f64> = surv.iter().map(|s| s[k]).collect();
        bs_points.push((t, brier_score(t, &predicted, &outcomes, &km, cfg.left_limit)?));
    }
    let ibs = integrated_brier(&bs_points)?;

    let patients: Vec<(String, Vec<f64>)> = landmark.patients.iter().zip(&surv).map(|(r, s)| (r.id.clone(), s[BS_POINTS..].to_vec())).collect();
    let mean = (0..grid.len())
        .map(|g| patients.iter().map(|p| p.1[g]).sum::<f64>() / patients.len().max(1) as f64)
        .collect();
    Ok(EvaluationReport {
        rmse,
        loglik_rmse_recurrent,
        loglik_rmse_survival,
        landmark_time: landmark.time,
        landmark_patients: landmark.patients.len(),
        bs_points,
        ibs,
        survival_curves: SurvivalCurves { grid, mean, patients },
    })
}

/// `t,bs` rows.
pub fn write_bs_points<W: Write>(mut w: W, points: &[(f64, f64)]) -> Result<()> {
    writeln!(w, "t,bs")?;
    for (t, bs) in points {
        writeln!(w, "{t},{bs}")?;
    }
    Ok(())
}

/// Wide table: `t,mean,<patient id>...`.
pub fn write_survival_curves<W: Write>(mut w: W, curves: &SurvivalCurves) -> Result<()> {
    write!(w, "t,mean")?;
    for (id, _) in &curves.patients {
        write!(w, ",{id}")?;
    }
    writeln!(w)?;
    for (g, t) in curves.grid.iter().enumerate() {
        write!(w, "{t},{}", curves.mean[g])?;
        for (_, s) in &curves.patients {
            write!(w, ",{}", s[g])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BaselineCovariates, LongitudinalObservation};

    fn outcome_rec(id: &str, t: f64, censored: bool) -> PatientRecord {
        PatientRecord::new(id, BaselineCovariates(vec![]), vec![], vec![], t, censored).unwrap()
    }

    #[test]
    fn rmse_examples() {
        let r = PatientRecord::new(
            "a",
            BaselineCovariates(vec![]),
            vec![1.0, 2.0],
            vec![
                LongitudinalObservation::fully_observed(vec![1.0, 2.0]),
                LongitudinalObservation::from_options(&[Some(3.0), None]),
            ],
            2.0,
            true,
        )
        .unwrap();
        let perfect = rmse_from_forecasts(2, [(&r, vec![Some(vec![1.0, 2.0]), Some(vec![3.0, 0.0])])]);
        assert_eq!(perfect, vec![0.0, 0.0]);
        let constant = rmse_from_forecasts(2, [(&r, vec![None, Some(vec![5.5, 5.5])])]);
        assert_eq!(constant[0], 2.5);
        assert!(constant[1].is_nan());
    }

    #[test]
    fn landmark_lower_quantile() {
        let train: Vec<PatientRecord> = (1..=10).map(|k| outcome_rec(&k.to_string(), 10.0 * k as f64, false)).collect();
        let eval = [outcome_rec("e1", 5.0, false), outcome_rec("e2", 15.0, true)];
        let tr: Vec<&PatientRecord> = train.iter().collect();
        let ev: Vec<&PatientRecord> = eval.iter().collect();
        let lm = landmark_cohort(&tr, &ev).unwrap();
        assert_eq!(lm.time, 10.0);
        assert_eq!(lm.patients.len(), 1);
        assert_eq!(lm.patients[0].id, "e2");
        let early = [outcome_rec("e3", 1.0, false)];
        assert!(landmark_cohort(&tr, &early.iter().collect::<Vec<_>>()).unwrap().patients.is_empty());
        let censored_only = [outcome_rec("c", 3.0, true)];
        assert!(matches!(landmark_cohort(&censored_only.iter().collect::<Vec<_>>(), &ev), Err(LsrError::NoDeaths)));
        assert_eq!(brier_times(&tr).unwrap(), vec![10.0, 26.0, 42.0, 58.0, 74.0, 90.0]);
    }

    #[test]
    fn km_censoring_estimator() {
        let recs = [
            outcome_rec("a", 1.0, false),
            outcome_rec("b", 2.0, true),
            outcome_rec("c", 3.0, false),
            outcome_rec("d", 4.0, true),
        ];
        let km = CensoringKm::fit(&recs.iter().collect::<Vec<_>>());
        assert_eq!(km.value(1.5), 1.0);
        assert!((km.value(2.0) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(km.left_limit(2.0), 1.0);
        assert!((km.value(3.5) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(km.value(4.0), 0.0);
    }

    #[test]
    fn brier_without_censoring() {
        let outcomes: Vec<Outcome> = [(2.0, true), (5.0, true), (7.0, true)].iter().map(|&(time, died)| Outcome { time, died }).collect();
        let km = CensoringKm::none();
        let perfect = [0.0, 1.0, 1.0];
        assert_eq!(brier_score(3.0, &perfect, &outcomes, &km, true).unwrap(), 0.0);
        assert_eq!(brier_score(3.0, &[0.5; 3], &outcomes, &km, true).unwrap(), 0.25);
    }

    #[test]
    fn brier_hand_example_with_censoring() {
        // training censoring: one censoring at 4 among five subjects at risk
        let train = [
            outcome_rec("a", 1.0, false),
            outcome_rec("b", 4.0, true),
            outcome_rec("c", 5.0, false),
            outcome_rec("d", 6.0, false),
            outcome_rec("e", 8.0, false),
        ];
        let km = CensoringKm::fit(&train.iter().collect::<Vec<_>>());
        // G = 1 before 4, 3/4 from 4 on
        let outcomes = [
            Outcome { time: 2.0, died: true },
            Outcome { time: 3.0, died: false },
            Outcome { time: 4.5, died: true },
            Outcome { time: 7.0, died: true },
            Outcome { time: 9.0, died: false },
        ];
        let s = [0.1, 0.9, 0.4, 0.8, 0.7];
        let t = 5.0;
        // death terms: 0.1²/1 + 0.4²/(3/4); censored before t: 0; at risk: (0.2² + 0.3²)/(3/4)
        let want = (0.01 + 0.16 / 0.75 + (0.04 + 0.09) / 0.75) / 5.0;
        assert!((brier_score(t, &s, &outcomes, &km, true).unwrap() - want).abs() < 1e-14);
        // left limit matters only for a death exactly at a censoring time
        let tie = [Outcome { time: 4.0, died: true }];
        assert_eq!(brier_score(4.5, &[0.5], &tie, &km, true).unwrap(), 0.25);
        assert!((brier_score(4.5, &[0.5], &tie, &km, false).unwrap() - 0.25 / 0.75).abs() < 1e-15);
    }

    #[test]
    fn integrated_brier_properties() {
        let flat: Vec<(f64, f64)> = (0..6).map(|k| (k as f64 * 3.0, 0.2)).collect();
        assert!((integrated_brier(&flat).unwrap() - 0.2).abs() < 1e-15);
        let linear: Vec<(f64, f64)> = (0..6).map(|k| (1.0 + k as f64, 0.1 + 0.02 * (1.0 + k as f64))).collect();
        // mean of a + b t over [1, 6] = a + b * 3.5
        assert!((integrated_brier(&linear).unwrap() - (0.1 + 0.02 * 3.5)).abs() < 1e-15);
        let rescaled: Vec<(f64, f64)> = linear.iter().map(|&(t, b)| (7.0 * t - 2.0, b)).collect();
        assert!((integrated_brier(&rescaled).unwrap() - integrated_brier(&linear).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn csv_writers() {
        let mut buf = Vec::new();
        write_bs_points(&mut buf, &[(1.0, 0.5)]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,bs\n1,0.5\n");
        let curves = SurvivalCurves {
            grid: vec![0.0, 1.0],
            mean: vec![1.0, 0.5],
            patients: vec![("p".into(), vec![1.0, 0.5])],
        };
        let mut buf = Vec::new();
        write_survival_curves(&mut buf, &curves).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,mean,p\n0,1,1\n1,0.5,0.5\n");
    }
}
