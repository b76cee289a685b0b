//! Joint loss `L = L_Y + L_λ + L_h` with Monte Carlo non-event integrals,
//! Adam, and the per-patient training loop.

use log::{info, warn};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PatientRecord, Split};
use crate::error::{LsrError, Result};
use crate::inference::{lower_quantile, RateProvider, RateQuery};
use crate::transformer::{ModelConfig, ModelParameters, ModelRun, Query};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// MC samples per interval during training.
    pub mc_samples: usize,
    /// MC samples per interval for validation losses.
    pub val_mc_samples: usize,
    /// Patients whose gradients are summed per optimizer step.
    pub patients_per_step: usize,
    pub seed: u64,
    /// Run the micro-model gradient check before training.
    pub gradient_check: bool,
    /// Start the intensity and hazard head biases at the inverse softplus of
    /// the crude training event rates.
    pub init_rate_bias: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            mc_samples: 1,
            val_mc_samples: 20,
            patients_per_step: 1,
            seed: 0,
            gradient_check: true,
            init_rate_bias: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LsrError::config("learning_rate", "must be positive"));
        }
        if self.mc_samples == 0 {
            return Err(LsrError::config("mc_samples", "must be at least 1"));
        }
        if self.val_mc_samples == 0 {
            return Err(LsrError::config("val_mc_samples", "must be at least 1"));
        }
        if self.patients_per_step == 0 {
            return Err(LsrError::config("patients_per_step", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(LsrError::config("beta1/beta2", "must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(LsrError::config("epsilon", "must be positive"));
        }
        Ok(())
    }
}

/// Per-patient loss decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `L_Y`.
    pub mse: f64,
    /// `-l_λ`.
    pub recurrent_nll: f64,
    /// `-l_h`.
    pub survival_nll: f64,
    pub mc_samples_used: usize,
    /// `Λ̂`.
    pub intensity_integral: f64,
    /// `ζ̂`.
    pub hazard_integral: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.mse + self.recurrent_nll + self.survival_nll
    }

    fn accumulate(&mut self, other: &LossBreakdown) {
        self.mse += other.mse;
        self.recurrent_nll += other.recurrent_nll;
        self.survival_nll += other.survival_nll;
        self.mc_samples_used += other.mc_samples_used;
        self.intensity_integral += other.intensity_integral;
        self.hazard_integral += other.hazard_integral;
    }

    fn scaled(mut self, k: f64) -> Self {
        self.mse *= k;
        self.recurrent_nll *= k;
        self.survival_nll *= k;
        self.intensity_integral *= k;
        self.hazard_integral *= k;
        self
    }
}

/// Mean squared error over observed entries. `predictions[j][u]` is the
/// forecast of dimension `u` at visit `j`.
pub fn longitudinal_loss(predictions: &[Vec<f64>], record: &PatientRecord) -> Result<f64> {
    if predictions.len() != record.n_visits() {
        return Err(LsrError::Shape {
            name: "predictions".into(),
            expected: vec![record.n_visits()],
            actual: vec![predictions.len()],
        });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (pred, obs) in predictions.iter().zip(record.observations()) {
        for (u, p) in pred.iter().enumerate() {
            if let Some(y) = obs.get(u) {
                sum += (p - y).powi(2);
                count += 1;
            }
        }
    }
    if count == 0 {
        warn!("patient {} has no observed longitudinal entries; L_Y = 0", record.id);
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}

/// `[0, t_1, ..., t_J]`, plus `T` when `T > t_J`.
pub fn interval_endpoints(record: &PatientRecord) -> Vec<f64> {
    let mut e = Vec::with_capacity(record.n_visits() + 2);
    e.push(0.0);
    e.extend_from_slice(record.visit_times());
    if record.terminal_time() > *e.last().expect("nonempty") {
        e.push(record.terminal_time());
    }
    e
}

/// `Σ_k (t_{k+1} - t_k) (1/N) Σ_n rate(t_{k,n}, k)` with fresh uniform
/// samples on each interval. `rate` receives the interval index, which is
/// also the number of visits in the history at that time.
pub fn mc_integral<F, R>(mut rate: F, endpoints: &[f64], n: usize, rng: &mut R) -> Result<f64>
where
    F: FnMut(f64, usize) -> f64,
    R: Rng + ?Sized,
{
    if endpoints.len() < 2 {
        return Err(LsrError::config("endpoints", "need at least one interval"));
    }
    if n == 0 {
        return Err(LsrError::TooFewSamples { min: 1, got: 0 });
    }
    let mut total = 0.0;
    for (k, w) in endpoints.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let mut acc = 0.0;
        for _ in 0..n {
            let s = a + (b - a) * (1.0 - rng.gen::<f64>());
            let v = rate(s, k);
            if !v.is_finite() {
                return Err(LsrError::NonFiniteRate { time: s, value: v });
            }
            acc += v;
        }
        total += (b - a) * acc / n as f64;
    }
    Ok(total)
}

/// Every rate evaluation needed by the likelihood of one record.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodPlan {
    /// `λ(t_j)` given `H_{j-1}`.
    pub visits: Vec<RateQuery>,
    /// `h(T)` given the visits before `T`, for deaths only.
    pub terminal: Option<RateQuery>,
    /// MC sample points for `Λ̂` and `ζ̂`.
    pub mc: Vec<RateQuery>,
    pub mc_weights: Vec<f64>,
}

impl LikelihoodPlan {
    pub fn new<R: Rng + ?Sized>(record: &PatientRecord, n: usize, rng: &mut R) -> Result<Self> {
        if n == 0 {
            return Err(LsrError::TooFewSamples { min: 1, got: 0 });
        }
        let visits = record
            .visit_times()
            .iter()
            .enumerate()
            .map(|(j, &t)| RateQuery { time: t, history: j })
            .collect();
        let terminal = record.died().then(|| RateQuery {
            time: record.terminal_time(),
            history: record.history_len_before(record.terminal_time()),
        });
        let endpoints = interval_endpoints(record);
        let mut mc = Vec::with_capacity(n * (endpoints.len() - 1));
        let mut mc_weights = Vec::with_capacity(mc.capacity());
        for (k, w) in endpoints.windows(2).enumerate() {
            for _ in 0..n {
                mc.push(RateQuery {
                    time: w[0] + (w[1] - w[0]) * (1.0 - rng.gen::<f64>()),
                    history: k,
                });
                mc_weights.push((w[1] - w[0]) / n as f64);
            }
        }
        Ok(Self {
            visits,
            terminal,
            mc,
            mc_weights,
        })
    }

    pub fn queries(&self) -> Vec<RateQuery> {
        let mut q = self.visits.clone();
        q.extend(self.terminal);
        q.extend_from_slice(&self.mc);
        q
    }
}

/// Event and integral terms of both point-process log-likelihoods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoglikTerms {
    pub sum_log_intensity: f64,
    pub intensity_integral: f64,
    /// `log h(T)` for deaths, 0 when censored.
    pub log_hazard_terminal: f64,
    pub hazard_integral: f64,
}

impl LoglikTerms {
    /// `l_λ = Σ log λ(t_j) - Λ`.
    pub fn recurrent(&self) -> f64 {
        self.sum_log_intensity - self.intensity_integral
    }

    /// `l_h = (1 - δ) log h(T) - ζ`.
    pub fn survival(&self) -> f64 {
        self.log_hazard_terminal - self.hazard_integral
    }
}

/// Evaluates both log-likelihoods of `record` under `provider` with `n` MC
/// samples per interval.
pub fn loglik_terms<P: RateProvider, R: Rng + ?Sized>(provider: &mut P, record: &PatientRecord, n: usize, rng: &mut R) -> Result<LoglikTerms> {
    let plan = LikelihoodPlan::new(record, n, rng)?;
    let queries = plan.queries();
    let rates = provider.rates(record, &queries)?;
    for (q, r) in queries.iter().zip(&rates) {
        for v in [r.intensity, r.hazard] {
            if !v.is_finite() || v < 0.0 {
                return Err(LsrError::NonFiniteRate { time: q.time, value: v });
            }
        }
    }
    let j = plan.visits.len();
    let sum_log_intensity = rates[..j].iter().map(|r| r.intensity.ln()).sum();
    let log_hazard_terminal = if plan.terminal.is_some() { rates[j].hazard.ln() } else { 0.0 };
    let offset = j + plan.terminal.is_some() as usize;
    let mc = &rates[offset..];
    let intensity_integral = mc.iter().zip(&plan.mc_weights).map(|(r, w)| r.intensity * w).sum();
    let hazard_integral = mc.iter().zip(&plan.mc_weights).map(|(r, w)| r.hazard * w).sum();
    let terms = LoglikTerms {
        sum_log_intensity,
        intensity_integral,
        log_hazard_terminal,
        hazard_integral,
    };
    if !terms.recurrent().is_finite() {
        return Err(LsrError::NonFiniteLoss {
            patient: record.id.clone(),
            term: "recurrent",
        });
    }
    if !terms.survival().is_finite() {
        return Err(LsrError::NonFiniteLoss {
            patient: record.id.clone(),
            term: "survival",
        });
    }
    Ok(terms)
}

/// `-[Σ log λ(t_j) - Λ̂]`.
pub fn recurrent_nll<P: RateProvider, R: Rng + ?Sized>(provider: &mut P, record: &PatientRecord, n: usize, rng: &mut R) -> Result<f64> {
    Ok(-loglik_terms(provider, record, n, rng)?.recurrent())
}

/// `-[(1 - δ) log h(T) - ζ̂]`.
pub fn survival_nll<P: RateProvider, R: Rng + ?Sized>(provider: &mut P, record: &PatientRecord, n: usize, rng: &mut R) -> Result<f64> {
    Ok(-loglik_terms(provider, record, n, rng)?.survival())
}

/// Records the full patient loss on `run`'s tape and returns its root.
pub fn record_patient_loss<R: Rng + ?Sized>(
    run: &mut ModelRun,
    record: &PatientRecord,
    n_mc: usize,
    rng: &mut R,
) -> Result<(crate::autodiff::Var, LossBreakdown)> {
    let plan = LikelihoodPlan::new(record, n_mc, rng)?;
    let j = record.n_visits();
    let enc = run.encode(record, j)?;
    let mut queries: Vec<Query> = plan.visits.iter().map(|q| Query::full(q.time, q.history)).collect();
    queries.extend(plan.terminal.iter().map(|q| Query::rates(q.time, q.history)));
    queries.extend(plan.mc.iter().map(|q| Query::rates(q.time, q.history)));
    let preds = run.predict(&enc, &queries);
    let n = queries.len();
    let offset = j + plan.terminal.is_some() as usize;
    let tape = &mut run.tape;

    let mut weights = Array2::zeros((n, 1));
    for (k, w) in plan.mc_weights.iter().enumerate() {
        weights[[offset + k, 0]] = *w;
    }
    let lam_int = tape.weighted_sum(preds.intensity, weights.clone());
    let haz_int = tape.weighted_sum(preds.hazard, weights);

    let mut rec_parts = vec![lam_int];
    let mut rec_signs = vec![1.0];
    if j > 0 {
        let lam_visits = tape.gather_rows(preds.intensity, (0..j).collect());
        let log_lam = tape.ln(lam_visits);
        rec_parts.push(tape.weighted_sum(log_lam, Array2::ones((j, 1))));
        rec_signs.push(-1.0);
    }
    let rec = signed_sum(tape, &rec_parts, &rec_signs);

    let mut surv_parts = vec![haz_int];
    let mut surv_signs = vec![1.0];
    if plan.terminal.is_some() {
        let h_t = tape.gather_rows(preds.hazard, vec![j]);
        surv_parts.push(tape.ln(h_t));
        surv_signs.push(-1.0);
    }
    let surv = signed_sum(tape, &surv_parts, &surv_signs);

    let order = &run.params.meta.order;
    let n_obs: usize = record.observations().iter().map(|o| o.n_observed()).sum();
    let mut mse_parts = Vec::new();
    if n_obs == 0 {
        warn!("patient {} has no observed longitudinal entries; L_Y = 0", record.id);
    } else {
        for (k, &col) in preds.longitudinal.iter().enumerate() {
            let u = order.dim_at(k);
            let mut target = Array2::zeros((j, 1));
            let mut w = Array2::zeros((j, 1));
            for (i, obs) in record.observations().iter().enumerate() {
                if let Some(y) = obs.get(u) {
                    target[[i, 0]] = y;
                    w[[i, 0]] = 1.0 / n_obs as f64;
                }
            }
            mse_parts.push(tape.squared_error(col, target, w));
        }
    }
    let mse = tape.sum_scalars(&mse_parts);
    let total = tape.sum_scalars(&[mse, rec, surv]);

    let breakdown = LossBreakdown {
        mse: tape.scalar(mse),
        recurrent_nll: tape.scalar(rec),
        survival_nll: tape.scalar(surv),
        mc_samples_used: n_mc,
        intensity_integral: tape.scalar(lam_int),
        hazard_integral: tape.scalar(haz_int),
    };
    for (term, v) in [
        ("mse", breakdown.mse),
        ("recurrent", breakdown.recurrent_nll),
        ("survival", breakdown.survival_nll),
    ] {
        if !v.is_finite() {
            return Err(LsrError::NonFiniteLoss {
                patient: record.id.clone(),
                term,
            });
        }
    }
    Ok((total, breakdown))
}

fn signed_sum(tape: &mut crate::autodiff::Tape, parts: &[crate::autodiff::Var], signs: &[f64]) -> crate::autodiff::Var {
    let col = tape.assemble(parts.iter().map(|&p| crate::autodiff::Scalar::Elem(p, 0, 0)).collect());
    tape.weighted_sum(col, Array2::from_shape_vec((signs.len(), 1), signs.to_vec()).expect("column"))
}

/// Loss and parameter gradients of one patient.
pub fn patient_gradient<R: Rng + ?Sized>(
    params: &ModelParameters,
    record: &PatientRecord,
    n_mc: usize,
    dropout_seed: Option<u64>,
    rng: &mut R,
) -> Result<(LossBreakdown, Vec<Array2<f64>>)> {
    let mut run = ModelRun::new(params, record.covariates.as_slice(), dropout_seed);
    let (root, breakdown) = record_patient_loss(&mut run, record, n_mc, rng)?;
    run.tape.backward(root);
    let mut grads: Vec<Array2<f64>> = params.tensors.iter().map(|t| Array2::zeros(t.dim())).collect();
    for (id, g) in run.tape.param_grads() {
        grads[id] += g;
    }
    Ok((breakdown, grads))
}

/// Loss of one patient with dropout off.
pub fn patient_loss<R: Rng + ?Sized>(params: &ModelParameters, record: &PatientRecord, n_mc: usize, rng: &mut R) -> Result<LossBreakdown> {
    let mut run = ModelRun::new(params, record.covariates.as_slice(), None);
    Ok(record_patient_loss(&mut run, record, n_mc, rng)?.1)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParameters, cfg: &TrainingConfig) -> Self {
        let zeros: Vec<Array2<f64>> = params.tensors.iter().map(|t| Array2::zeros(t.dim())).collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ModelParameters, grads: &[Array2<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, g), (m, v)) in params.tensors.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    /// Mean per-patient training losses (dropout on, training MC samples).
    pub train: LossBreakdown,
    /// Mean per-patient validation losses (dropout off).
    pub val: Option<LossBreakdown>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParameters,
    pub trace: Vec<EpochTrace>,
    pub gradient_check: Option<GradientCheck>,
}

/// Deterministic 64-bit sub-seed for stream `(a, b)` of `seed`.
pub fn sub_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b);
    rng.next_u64()
}

fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Events per unit time across `records`: `(visits, deaths)`.
pub fn crude_rates(records: &[&PatientRecord]) -> (f64, f64) {
    let exposure: f64 = records.iter().map(|r| r.terminal_time()).sum();
    let visits: usize = records.iter().map(|r| r.n_visits()).sum();
    let deaths = records.iter().filter(|r| r.died()).count();
    (visits as f64 / exposure, deaths as f64 / exposure)
}

/// 99th percentile of gaps between consecutive visits.
pub fn inter_visit_gap_q99(records: &[&PatientRecord]) -> Option<f64> {
    let gaps: Vec<f64> = records.iter().flat_map(|r| r.visit_times().windows(2).map(|w| w[1] - w[0])).collect();
    (!gaps.is_empty()).then(|| lower_quantile(&gaps, 0.99))
}

fn training_records(dataset: &Dataset) -> Vec<&PatientRecord> {
    if dataset.splits.is_some() {
        dataset.split(Split::Train)
    } else {
        dataset.records.iter().collect()
    }
}

/// Trains a fresh model on the training split of `dataset`.
pub fn train(dataset: &Dataset, model_cfg: &ModelConfig, cfg: &TrainingConfig) -> Result<TrainOutput> {
    train_with(dataset, model_cfg, cfg, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with<F: FnMut(&EpochTrace)>(dataset: &Dataset, model_cfg: &ModelConfig, cfg: &TrainingConfig, mut on_epoch: F) -> Result<TrainOutput> {
    model_cfg.validate()?;
    cfg.validate()?;
    if model_cfg.m != dataset.m || model_cfg.p != dataset.p {
        return Err(LsrError::config(
            "model.m/model.p",
            format!("model expects m = {}, p = {} but data has m = {}, p = {}", model_cfg.m, model_cfg.p, dataset.m, dataset.p),
        ));
    }
    let train_set = training_records(dataset);
    if train_set.is_empty() {
        return Err(LsrError::config("data", "training split is empty"));
    }
    let val_set = if dataset.splits.is_some() { dataset.split(Split::Val) } else { Vec::new() };

    let gradient_check = if cfg.gradient_check {
        let report = micro_gradient_check(train_set[0], dataset.order.clone(), cfg.seed)?;
        info!("gradient check: max relative error {:.3e} ({})", report.max_rel_error, report.worst_param);
        if report.max_rel_error >= GRADIENT_CHECK_TOLERANCE {
            return Err(LsrError::GradientCheck {
                max_rel_error: report.max_rel_error,
                param: report.worst_param,
            });
        }
        Some(report)
    } else {
        None
    };

    let mut params = ModelParameters::init(model_cfg, cfg.seed);
    params.meta.order = dataset.order.clone();
    params.meta.gap_q99 = inter_visit_gap_q99(&train_set);
    if cfg.init_rate_bias {
        let (lam, haz) = crude_rates(&train_set);
        let h = params.layout.heads.clone();
        if lam > 0.0 {
            params.tensors[h.lambda_b].fill(inverse_softplus(lam));
        }
        if haz > 0.0 {
            params.tensors[h.hazard_b].fill(inverse_softplus(haz));
        }
    }

    let mut adam = Adam::new(&params, cfg);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 1, epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossBreakdown::default();
        let mut acc: Option<Vec<Array2<f64>>> = None;
        for (step, &i) in order.iter().enumerate() {
            let record = train_set[i];
            let mut mc_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 2 + epoch as u64, step as u64));
            let dropout_seed = sub_seed(cfg.seed, 1_000_000 + epoch as u64, step as u64);
            let (loss, grads) = patient_gradient(&params, record, cfg.mc_samples, Some(dropout_seed), &mut mc_rng)?;
            sum.accumulate(&loss);
            match acc.as_mut() {
                Some(a) => a.iter_mut().zip(&grads).for_each(|(a, g)| *a += g),
                None => acc = Some(grads),
            }
            if (step + 1) % cfg.patients_per_step == 0 || step + 1 == order.len() {
                adam.step(&mut params, &acc.take().expect("accumulated gradient"));
            }
        }
        let train_mean = sum.scaled(1.0 / train_set.len() as f64);
        let val = if val_set.is_empty() {
            None
        } else {
            let mut val_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 3, epoch as u64));
            let mut vs = LossBreakdown::default();
            for r in &val_set {
                vs.accumulate(&patient_loss(&params, r, cfg.val_mc_samples, &mut val_rng)?);
            }
            Some(vs.scaled(1.0 / val_set.len() as f64))
        };
        let entry = EpochTrace {
            epoch: epoch + 1,
            train: train_mean,
            val,
        };
        info!(
            "epoch {}: train {:.4} (L_Y {:.4}, L_λ {:.4}, L_h {:.4}) val {}",
            entry.epoch,
            train_mean.total(),
            train_mean.mse,
            train_mean.recurrent_nll,
            train_mean.survival_nll,
            val.map(|v| format!("{:.4}", v.total())).unwrap_or_else(|| "-".into())
        );
        on_epoch(&entry);
        trace.push(entry);
    }
    Ok(TrainOutput {
        params,
        trace,
        gradient_check,
    })
}

pub const GRADIENT_CHECK_TOLERANCE: f64 = 1e-4;
pub const GRADIENT_CHECK_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub n_checked: usize,
}

/// Compares analytic gradients of the total loss with central differences
/// for every scalar parameter. Dropout is off and the MC sample points are
/// frozen by reseeding. The relative-error denominator is floored at
/// `1e-6 · max(1, |L|)`, above the central-difference roundoff `ε|L|/h`.
pub fn gradient_check(params: &ModelParameters, record: &PatientRecord, seed: u64) -> Result<GradientCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, analytic) = patient_gradient(params, record, 1, None, &mut rng)?;
    let loss_at = |p: &ModelParameters| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(patient_loss(p, record, 1, &mut rng)?.total())
    };
    let floor = 1e-6 * loss_at(params)?.abs().max(1.0);
    let mut probe = params.clone();
    let mut worst = (0.0f64, String::new());
    let mut n_checked = 0;
    for id in 0..params.tensors.len() {
        for idx in ndarray::indices(params.tensors[id].dim()) {
            let x0 = params.tensors[id][idx];
            probe.tensors[id][idx] = x0 + GRADIENT_CHECK_STEP;
            let up = loss_at(&probe)?;
            probe.tensors[id][idx] = x0 - GRADIENT_CHECK_STEP;
            let down = loss_at(&probe)?;
            probe.tensors[id][idx] = x0;
            let numeric = (up - down) / (2.0 * GRADIENT_CHECK_STEP);
            let a = analytic[id][idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            n_checked += 1;
            if rel > worst.0 || worst.1.is_empty() {
                worst = (rel, format!("{}[{},{}]", params.layout.names[id], idx.0, idx.1));
            }
        }
    }
    Ok(GradientCheck {
        max_rel_error: worst.0,
        worst_param: worst.1,
        n_checked,
    })
}

/// Gradient check on a micro model (`d_model = 8`, one head, one layer each)
/// using at most four history tokens of `record`.
pub fn micro_gradient_check(record: &PatientRecord, order: crate::data::ConcurrentOrder, seed: u64) -> Result<GradientCheck> {
    let m = record.observations().first().map(|o| o.dims()).unwrap_or(order.len());
    let cfg = ModelConfig::micro(m, record.covariates.len());
    let mut params = ModelParameters::init(&cfg, seed);
    params.meta.order = order;
    let visits = (4 / m.max(1)).max(1).min(record.n_visits());
    let short = record.truncated(visits);
    gradient_check(&params, &short, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BaselineCovariates, ConcurrentOrder, LongitudinalObservation};
    use crate::inference::FrozenRates;

    fn rec(times: Vec<f64>, obs: Vec<Vec<Option<f64>>>, t: f64, censored: bool) -> PatientRecord {
        PatientRecord::new(
            "x",
            BaselineCovariates(vec![0.5, -1.0, 1.0]),
            times,
            obs.iter().map(|o| LongitudinalObservation::from_options(o)).collect(),
            t,
            censored,
        )
        .unwrap()
    }

    #[test]
    fn longitudinal_loss_examples() {
        let r = rec(vec![1.0], vec![vec![Some(1.0), Some(3.0)]], 2.0, true);
        assert_eq!(longitudinal_loss(&[vec![1.0, 3.0]], &r).unwrap(), 0.0);
        let single = rec(vec![1.0], vec![vec![Some(1.0), None]], 2.0, true);
        assert_eq!(longitudinal_loss(&[vec![3.0, 100.0]], &single).unwrap(), 4.0);
        let none = rec(vec![1.0], vec![vec![None, None]], 2.0, true);
        assert_eq!(longitudinal_loss(&[vec![3.0, 100.0]], &none).unwrap(), 0.0);
    }

    #[test]
    fn mc_integral_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = mc_integral(|_, _| 0.7, &[0.0, 1.0, 4.0, 10.0], 3, &mut rng).unwrap();
        assert!((v - 7.0).abs() < 1e-12);
        let v = mc_integral(|t, _| t, &[0.0, 2.0], 10_000, &mut rng).unwrap();
        // sd of the estimator is 2 * sd(U(0,2)) / 100 = 0.0115
        assert!((v - 2.0).abs() < 3.0 * 0.0116, "{v}");
        assert!(mc_integral(|_, _| f64::NAN, &[0.0, 1.0], 1, &mut rng).is_err());
        assert!(mc_integral(|_, _| 1.0, &[0.0], 1, &mut rng).is_err());
    }

    #[test]
    fn endpoints_skip_empty_final_interval() {
        let r = rec(vec![1.0, 3.0], vec![vec![Some(0.0)], vec![Some(0.0)]], 3.0, false);
        assert_eq!(interval_endpoints(&r), vec![0.0, 1.0, 3.0]);
        let r = rec(vec![1.0, 3.0], vec![vec![Some(0.0)], vec![Some(0.0)]], 5.0, true);
        assert_eq!(interval_endpoints(&r), vec![0.0, 1.0, 3.0, 5.0]);
    }

    #[test]
    fn closed_form_likelihoods() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let no_visits = PatientRecord::new("z", BaselineCovariates(vec![]), vec![], vec![], 8.0, true).unwrap();
        let mut c = FrozenRates { intensity: 0.25, hazard: 0.1 };
        assert!((recurrent_nll(&mut c, &no_visits, 3, &mut rng).unwrap() - 2.0).abs() < 1e-12);
        let one = rec(vec![2.0], vec![vec![Some(0.0)]], 5.0, true);
        let mut unit = FrozenRates { intensity: 1.0, hazard: 0.1 };
        assert!((recurrent_nll(&mut unit, &one, 3, &mut rng).unwrap() - 5.0).abs() < 1e-12);
        // censored: no event term
        assert!((survival_nll(&mut unit, &one, 3, &mut rng).unwrap() - 0.5).abs() < 1e-12);
        let dead = rec(vec![2.0], vec![vec![Some(0.0)]], 5.0, false);
        let want = -(0.1f64).ln() + 0.5;
        assert!((survival_nll(&mut unit, &dead, 3, &mut rng).unwrap() - want).abs() < 1e-12);
    }

    fn micro_params(seed: u64) -> ModelParameters {
        let mut p = ModelParameters::init(&ModelConfig::micro(2, 3), seed);
        p.meta.order = ConcurrentOrder::new(vec![1, 0]).unwrap();
        p
    }

    #[test]
    fn loss_decomposition_and_masking() {
        let p = micro_params(3);
        let full = rec(vec![1.0, 2.5], vec![vec![Some(0.3), Some(1.0)], vec![Some(-0.2), Some(0.8)]], 4.0, false);
        let masked = rec(vec![1.0, 2.5], vec![vec![Some(0.3), None], vec![Some(-0.2), Some(0.8)]], 4.0, false);
        let censored = rec(vec![1.0, 2.5], vec![vec![Some(0.3), Some(1.0)], vec![Some(-0.2), Some(0.8)]], 4.0, true);
        let loss = |r: &PatientRecord| patient_loss(&p, r, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let a = loss(&full);
        let (_, grads_total) = patient_gradient(&p, &full, 2, None, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(grads_total.len(), p.tensors.len());
        assert!((a.total() - (a.mse + a.recurrent_nll + a.survival_nll)).abs() < 1e-12);
        assert!(a.intensity_integral >= 0.0 && a.hazard_integral >= 0.0);

        // masked entry removes its MSE term: compare with the predictions
        let preds = |r: &PatientRecord| -> Vec<Vec<f64>> {
            (0..2)
                .map(|j| crate::inference::predict_longitudinal_at(&p, r, j, r.visit_times()[j], &[], None).unwrap())
                .collect()
        };
        assert!((a.mse - longitudinal_loss(&preds(&full), &full).unwrap()).abs() < 1e-12);
        let pm = preds(&masked);
        assert!((loss(&masked).mse - longitudinal_loss(&pm, &masked).unwrap()).abs() < 1e-12);
        // the first visit's forecast has no history, so only the masked term differs there
        assert_eq!(pm[0], preds(&full)[0]);

        // censoring only removes log h(T)
        let c = loss(&censored);
        assert_eq!(c.recurrent_nll, a.recurrent_nll);
        let mut probe = ModelRates(&p);
        let h_t = probe.hazard(&full, 4.0, 2);
        assert!((a.survival_nll - (c.survival_nll - h_t.ln())).abs() < 1e-10);
    }

    struct ModelRates<'a>(&'a ModelParameters);

    impl ModelRates<'_> {
        fn hazard(&mut self, r: &PatientRecord, t: f64, history: usize) -> f64 {
            let mut m = crate::inference::ModelRates::new(self.0);
            m.rates(r, &[RateQuery { time: t, history }]).unwrap()[0].hazard
        }
    }

    #[test]
    fn model_loglik_matches_tape_loss() {
        let p = micro_params(4);
        let r = rec(vec![1.0, 2.5], vec![vec![Some(0.3), Some(1.0)], vec![None, Some(0.8)]], 4.0, false);
        let a = patient_loss(&p, &r, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let terms = loglik_terms(&mut crate::inference::ModelRates::new(&p), &r, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!((a.recurrent_nll + terms.recurrent()).abs() < 1e-10);
        assert!((a.survival_nll + terms.survival()).abs() < 1e-10);
    }

    #[test]
    fn micro_gradients_match_finite_differences() {
        let p = micro_params(6);
        let r = rec(vec![0.8, 2.0], vec![vec![Some(0.3), Some(1.0)], vec![None, Some(0.8)]], 3.0, false);
        let report = gradient_check(&p, &r, 12).unwrap();
        assert_eq!(report.n_checked, p.n_scalars());
        assert!(report.max_rel_error < GRADIENT_CHECK_TOLERANCE, "{report:?}");
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = micro_params(7);
        let before = p.tensors.clone();
        let cfg = TrainingConfig::default();
        let mut adam = Adam::new(&p, &cfg);
        let grads: Vec<Array2<f64>> = p.tensors.iter().map(|t| Array2::from_elem(t.dim(), -3.0)).collect();
        adam.step(&mut p, &grads);
        for (a, b) in p.tensors.iter().zip(&before) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y - 1e-4).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig::default().validate().is_ok());
        assert!(TrainingConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainingConfig { mc_samples: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn sub_seeds_differ() {
        assert_ne!(sub_seed(1, 0, 0), sub_seed(1, 0, 1));
        assert_ne!(sub_seed(1, 0, 1), sub_seed(1, 1, 0));
        assert_eq!(sub_seed(4, 2, 3), sub_seed(4, 2, 3));
    }
}
