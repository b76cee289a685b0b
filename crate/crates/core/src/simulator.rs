//! Synthetic cohort generator with a closed-form ground truth.
//!
//! Three longitudinal variables per visit: a trough level `Y1` and a
//! creatinine-like `Y2` following linear mixed-effects models in continuous
//! time, and a dosage `Y3` prescribed at each visit that stays constant until
//! the next one. Visits arrive with intensity
//! `λ(t) = 3 exp(-(Y2*(t) + 1.5)) t^0.25` and death follows a Weibull
//! proportional hazard `h(t) = exp(-(1 + Y2*(t) + 0.9 Y3(t))) ω t^(ω-1)`.
//!
//! Before the first visit the dosage is initialised deterministically from the
//! dosage equation, evaluated with the noise-free `Y2*(0)` computed under a
//! zero dosage. Continuous-time curves use the noise-free `Y1*` inside `Y2*`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, StandardNormal, Weibull};
use serde::{Deserialize, Serialize};

use crate::data::{BaselineCovariates, ConcurrentOrder, Dataset, LongitudinalObservation, PatientRecord};
use crate::error::{LsrError, Result};
use crate::quadrature::integrate;
use crate::thinning::thinning_sample_next;

/// Censoring time distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CensoringSpec {
    Normal { mean: f64, sd: f64 },
    Weibull { shape: f64, scale: f64 },
}

impl CensoringSpec {
    /// `N(15000, 100²)`: about 2% censored.
    pub const LOW: CensoringSpec = CensoringSpec::Normal { mean: 15000.0, sd: 100.0 };
    /// `Weibull(2, 8000)`: about 13% censored.
    pub const MEDIUM: CensoringSpec = CensoringSpec::Weibull { shape: 2.0, scale: 8000.0 };
    /// `N(1000, 100²)`: about 59% censored.
    pub const HIGH: CensoringSpec = CensoringSpec::Normal { mean: 1000.0, sd: 100.0 };

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R, floor: f64) -> f64 {
        let c = match *self {
            CensoringSpec::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
            CensoringSpec::Weibull { shape, scale } => Weibull::new(scale, shape)
                .map(|d| d.sample(rng))
                .unwrap_or(scale),
        };
        c.max(floor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub n_patients: usize,
    pub beta1: [f64; 6],
    pub beta2: [f64; 7],
    pub beta3: [f64; 5],
    /// Diagonal of the random-effects covariance (intercept, dosage, time).
    pub random_effect_var: [f64; 3],
    pub noise_sd: [f64; 3],
    pub intensity_scale: f64,
    pub intensity_offset: f64,
    pub intensity_exponent: f64,
    /// Coefficients of `(1, Y2*, Y3)` inside the hazard exponent.
    pub hazard_coef: [f64; 3],
    pub weibull_shape: f64,
    pub censoring: CensoringSpec,
    pub censoring_floor: f64,
    pub missing_rate: [f64; 3],
    pub t_max: f64,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_patients: 1000,
            beta1: [2.0, 0.3, 0.1, 0.6, 0.2, -1e-4],
            beta2: [3.3, 0.1, 0.3, 0.4, 0.25, 1.0, -1e-4],
            beta3: [1.0, 0.2, 0.15, 0.2, 0.15],
            random_effect_var: [0.2 * 0.2, 0.07 * 0.07, 1e-8],
            noise_sd: [0.1, 0.1, 0.3],
            intensity_scale: 3.0,
            intensity_offset: 1.5,
            intensity_exponent: 0.25,
            hazard_coef: [1.0, 1.0, 0.9],
            weibull_shape: 1.25,
            censoring: CensoringSpec::LOW,
            censoring_floor: 1.0,
            missing_rate: [0.25, 0.15, 0.03],
            t_max: 16000.0,
            seed: 0,
        }
    }
}

impl SimulationConfig {
    pub fn with_censoring(censoring: CensoringSpec) -> Self {
        Self {
            censoring,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(LsrError::config("n_patients", "must be positive"));
        }
        if self.random_effect_var.iter().any(|&v| !(v >= 0.0)) {
            return Err(LsrError::config("random_effect_var", "variances must be non-negative"));
        }
        if self.noise_sd.iter().any(|&v| !(v >= 0.0)) {
            return Err(LsrError::config("noise_sd", "must be non-negative"));
        }
        if self.missing_rate.iter().any(|&r| !(0.0..1.0).contains(&r)) {
            return Err(LsrError::config("missing_rate", "rates must lie in [0, 1)"));
        }
        if !(self.weibull_shape > 0.0) {
            return Err(LsrError::config("weibull_shape", "must be positive"));
        }
        if !(self.t_max > 0.0) {
            return Err(LsrError::config("t_max", "must be positive"));
        }
        match self.censoring {
            CensoringSpec::Normal { sd, .. } if !(sd >= 0.0) => {
                return Err(LsrError::config("censoring.sd", "must be non-negative"))
            }
            CensoringSpec::Weibull { shape, scale } if !(shape > 0.0 && scale > 0.0) => {
                return Err(LsrError::config("censoring", "Weibull shape and scale must be positive"))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Random intercept, dosage slope and time slope of `Y1` and `Y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomEffects {
    pub b1: [f64; 3],
    pub b2: [f64; 3],
}

impl RandomEffects {
    pub const ZERO: RandomEffects = RandomEffects { b1: [0.0; 3], b2: [0.0; 3] };
}

/// `X1, X2 ~ N(0, 1)`, `X3 ~ Bernoulli(0.4)`.
pub fn sample_baseline<R: Rng + ?Sized>(rng: &mut R) -> BaselineCovariates {
    let x1: f64 = rng.sample(StandardNormal);
    let x2: f64 = rng.sample(StandardNormal);
    let x3 = if Bernoulli::new(0.4).map(|b| b.sample(rng)).unwrap_or(false) { 1.0 } else { 0.0 };
    BaselineCovariates(vec![x1, x2, x3])
}

fn sample_random_effects<R: Rng + ?Sized>(cfg: &SimulationConfig, rng: &mut R) -> RandomEffects {
    let mut draw = || -> [f64; 3] {
        let mut b = [0.0; 3];
        for (k, v) in b.iter_mut().enumerate() {
            *v = cfg.random_effect_var[k].sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
        b
    };
    let b1 = draw();
    let b2 = draw();
    RandomEffects { b1, b2 }
}

/// Noise-free `(Y1*(t), Y2*(t))` given the dosage in force at `t`.
pub fn mean_processes(
    cfg: &SimulationConfig,
    t: f64,
    x: &[f64],
    re: &RandomEffects,
    dosage: f64,
) -> (f64, f64) {
    let b1 = &cfg.beta1;
    let y1 = b1[0] + b1[1] * dosage + b1[2] * x[0] + b1[3] * x[1] + b1[4] * x[2] + b1[5] * t
        + re.b1[0]
        + re.b1[1] * dosage
        + re.b1[2] * t;
    let b2 = &cfg.beta2;
    let y2 = b2[0] + b2[1] * dosage + b2[2] * x[0] + b2[3] * x[1] + b2[4] * x[2] + b2[5] * y1 + b2[6] * t
        + re.b2[0]
        + re.b2[1] * dosage
        + re.b2[2] * t;
    (y1, y2)
}

fn dosage_rule(cfg: &SimulationConfig, y2: f64, x: &[f64]) -> f64 {
    let b = &cfg.beta3;
    b[0] + b[1] * y2 + b[2] * x[0] + b[3] * x[1] + b[4] * x[2]
}

fn intensity_given(cfg: &SimulationConfig, t: f64, y2: f64) -> f64 {
    cfg.intensity_scale * (-(y2 + cfg.intensity_offset)).exp() * t.powf(cfg.intensity_exponent)
}

fn hazard_given(cfg: &SimulationConfig, t: f64, y2: f64, dosage: f64) -> f64 {
    let c = &cfg.hazard_coef;
    let w = cfg.weibull_shape;
    (-(c[0] + c[1] * y2 + c[2] * dosage)).exp() * w * t.powf(w - 1.0)
}

/// Per-patient ground truth: covariates, random effects and the realised
/// dosage step function. `dosage_times[0] == 0` holds the initial dosage;
/// dosage `k` applies on `(dosage_times[k], dosage_times[k + 1]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthOracle {
    pub id: String,
    pub covariates: Vec<f64>,
    pub random_effects: RandomEffects,
    pub dosage_times: Vec<f64>,
    pub dosages: Vec<f64>,
    #[serde(skip)]
    pub config: SimulationConfig,
}

impl GroundTruthOracle {
    /// Dosage in force at `t` (right-closed steps).
    pub fn dosage_at(&self, t: f64) -> f64 {
        let k = self.dosage_times.partition_point(|&s| s < t);
        self.dosages[k.saturating_sub(1)]
    }

    pub fn mean_at(&self, t: f64) -> (f64, f64) {
        mean_processes(&self.config, t, &self.covariates, &self.random_effects, self.dosage_at(t))
    }

    pub fn intensity(&self, t: f64) -> Result<f64> {
        if !(t > 0.0) {
            return Err(LsrError::NonPositiveTime(t));
        }
        Ok(intensity_given(&self.config, t, self.mean_at(t).1))
    }

    pub fn hazard(&self, t: f64) -> Result<f64> {
        if !(t > 0.0) {
            return Err(LsrError::NonPositiveTime(t));
        }
        Ok(hazard_given(&self.config, t, self.mean_at(t).1, self.dosage_at(t)))
    }

    /// Breakpoints of the dosage step function inside `(0, t_end)`.
    fn pieces(&self, t_end: f64) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        for (k, &d) in self.dosages.iter().enumerate() {
            let a = self.dosage_times[k];
            let b = self.dosage_times.get(k + 1).copied().unwrap_or(f64::INFINITY).min(t_end);
            if b > a {
                out.push((a, b, d));
            }
            if b >= t_end {
                break;
            }
        }
        out
    }

    /// `∫_a^b λ`, integrating each constant-dosage piece separately.
    pub fn cumulative_intensity(&self, a: f64, b: f64) -> f64 {
        self.cumulative(a, b, |t, y2, _| intensity_given(&self.config, t, y2))
    }

    /// `∫_a^b h`.
    pub fn cumulative_hazard(&self, a: f64, b: f64) -> f64 {
        self.cumulative(a, b, |t, y2, d| hazard_given(&self.config, t, y2, d))
    }

    fn cumulative<F: Fn(f64, f64, f64) -> f64>(&self, a: f64, b: f64, rate: F) -> f64 {
        let cfg = &self.config;
        self.pieces(b)
            .into_iter()
            .filter(|&(_, hi, _)| hi > a)
            .map(|(lo, hi, d)| {
                let lo = lo.max(a);
                integrate(
                    |t| {
                        let (_, y2) = mean_processes(cfg, t, &self.covariates, &self.random_effects, d);
                        rate(t, y2, d)
                    },
                    lo,
                    hi,
                    1e-10,
                )
            })
            .sum()
    }
}

/// Outcome of simulating one patient, including the number of discarded
/// zero-visit draws.
#[derive(Debug, Clone)]
pub struct SimulatedPatient {
    pub record: PatientRecord,
    pub oracle: GroundTruthOracle,
    pub resampled: usize,
}

/// Draws one patient by alternating thinning of the visit and death processes.
pub fn simulate_patient<R: Rng + ?Sized>(
    cfg: &SimulationConfig,
    id: &str,
    rng: &mut R,
) -> Result<SimulatedPatient> {
    let mut resampled = 0;
    loop {
        if let Some((record, oracle)) = simulate_once(cfg, id, rng)? {
            return Ok(SimulatedPatient { record, oracle, resampled });
        }
        resampled += 1;
    }
}

fn simulate_once<R: Rng + ?Sized>(
    cfg: &SimulationConfig,
    id: &str,
    rng: &mut R,
) -> Result<Option<(PatientRecord, GroundTruthOracle)>> {
    let x = sample_baseline(rng);
    let re = sample_random_effects(cfg, rng);
    let c = cfg.censoring.sample(rng, cfg.censoring_floor);
    let horizon = c.min(cfg.t_max);

    let (_, y2_init) = mean_processes(cfg, 0.0, x.as_slice(), &re, 0.0);
    let mut dosage = dosage_rule(cfg, y2_init, x.as_slice());
    let mut dosage_times = vec![0.0];
    let mut dosages = vec![dosage];

    let noise1 = Normal::new(0.0, cfg.noise_sd[0]).map_err(|e| LsrError::config("noise_sd", e.to_string()))?;
    let noise2 = Normal::new(0.0, cfg.noise_sd[1]).map_err(|e| LsrError::config("noise_sd", e.to_string()))?;
    let noise3 = Normal::new(0.0, cfg.noise_sd[2]).map_err(|e| LsrError::config("noise_sd", e.to_string()))?;

    let mut visits = Vec::new();
    let mut obs = Vec::new();
    let mut t_now = 0.0;
    let (terminal, censored) = loop {
        if t_now >= horizon {
            break (horizon, true);
        }
        let d = dosage;
        let xs = x.as_slice();
        let lambda = |t: f64| intensity_given(cfg, t, mean_processes(cfg, t, xs, &re, d).1);
        let hazard = |t: f64| hazard_given(cfg, t, mean_processes(cfg, t, xs, &re, d).1, d);
        let visit = thinning_sample_next(lambda, t_now, horizon, rng)?;
        let death = thinning_sample_next(hazard, t_now, horizon, rng)?;
        match (visit.accepted, death.accepted) {
            (_, true) if !visit.accepted || death.time <= visit.time => break (death.time, false),
            (true, _) => {
                let t = visit.time;
                let (m1, m2) = mean_processes(cfg, t, xs, &re, d);
                let y1 = m1 + noise1.sample(rng);
                let y2 = m2 + noise2.sample(rng);
                let y3 = dosage_rule(cfg, y2, xs) + noise3.sample(rng);
                visits.push(t);
                obs.push(LongitudinalObservation::fully_observed(vec![y1, y2, y3]));
                dosage = y3;
                dosage_times.push(t);
                dosages.push(y3);
                t_now = t;
            }
            _ => break (horizon, true),
        }
    };
    if visits.is_empty() {
        return Ok(None);
    }
    for o in obs.iter_mut() {
        for u in 0..3 {
            if rng.gen::<f64>() < cfg.missing_rate[u] {
                o.mask(u);
            }
        }
    }
    let record = PatientRecord::new(id, x.clone(), visits, obs, terminal, censored)?;
    let oracle = GroundTruthOracle {
        id: id.to_string(),
        covariates: x.0,
        random_effects: re,
        dosage_times,
        dosages,
        config: cfg.clone(),
    };
    Ok(Some((record, oracle)))
}

/// A simulated cohort with its ground truth, in patient order.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub dataset: Dataset,
    pub oracles: Vec<GroundTruthOracle>,
    pub resampled: usize,
}

impl Cohort {
    pub fn censoring_rate(&self) -> f64 {
        let n = self.dataset.len().max(1);
        self.dataset.records.iter().filter(|r| r.censored()).count() as f64 / n as f64
    }

    pub fn oracle(&self, id: &str) -> Option<&GroundTruthOracle> {
        self.oracles.iter().find(|o| o.id == id)
    }
}

/// Per-patient generator: stream `i` of a ChaCha8 generator seeded with the
/// master seed.
pub fn patient_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn simulate_cohort(cfg: &SimulationConfig) -> Result<Cohort> {
    cfg.validate()?;
    let mut records = Vec::with_capacity(cfg.n_patients);
    let mut oracles = Vec::with_capacity(cfg.n_patients);
    let mut resampled = 0;
    for i in 0..cfg.n_patients {
        let mut rng = patient_rng(cfg.seed, i);
        let sim = simulate_patient(cfg, &format!("p{i:05}"), &mut rng)?;
        resampled += sim.resampled;
        records.push(sim.record);
        oracles.push(sim.oracle);
    }
    if resampled > 0 {
        log::info!("resampled {resampled} zero-visit patients");
    }
    let dataset = Dataset::new(3, 3, ConcurrentOrder::identity(3), records)?;
    Ok(Cohort { dataset, oracles, resampled })
}

/// Ground-truth log-likelihoods `(l_λ, l_h)` of a record by quadrature.
pub fn true_loglik(record: &PatientRecord, oracle: &GroundTruthOracle) -> Result<(f64, f64)> {
    let t_end = record.terminal_time();
    let mut l_lambda = -oracle.cumulative_intensity(0.0, t_end);
    for &t in record.visit_times() {
        l_lambda += oracle.intensity(t)?.ln();
    }
    let mut l_h = -oracle.cumulative_hazard(0.0, t_end);
    if record.died() {
        l_h += oracle.hazard(t_end)?.ln();
    }
    Ok((l_lambda, l_h))
}

pub const TRUTH_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TruthHeader {
    version: u32,
    config: SimulationConfig,
}

/// Writes the generating configuration, then one oracle per line.
pub fn write_truth<W: Write>(config: &SimulationConfig, oracles: &[GroundTruthOracle], mut w: W) -> Result<()> {
    serde_json::to_writer(
        &mut w,
        &TruthHeader {
            version: TRUTH_VERSION,
            config: config.clone(),
        },
    )?;
    writeln!(w)?;
    for o in oracles {
        serde_json::to_writer(&mut w, o)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a truth file written by [`write_truth`]; every oracle gets the
/// stored configuration.
pub fn read_truth<R: BufRead>(r: R) -> Result<(SimulationConfig, Vec<GroundTruthOracle>)> {
    let mut lines = r.lines();
    let header: TruthHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?)?,
        None => return Err(LsrError::InvalidRecord("truth file is empty".into())),
    };
    if header.version != TRUTH_VERSION {
        return Err(LsrError::config("version", format!("unsupported truth file version {}", header.version)));
    }
    let mut oracles = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut o: GroundTruthOracle = serde_json::from_str(&line)?;
        if o.dosage_times.len() != o.dosages.len() || o.dosages.is_empty() {
            return Err(LsrError::InvalidRecord(format!("oracle {}: dosage steps are inconsistent", o.id)));
        }
        o.config = header.config.clone();
        oracles.push(o);
    }
    Ok((header.config, oracles))
}

pub fn save_truth(path: impl AsRef<Path>, config: &SimulationConfig, oracles: &[GroundTruthOracle]) -> Result<()> {
    write_truth(config, oracles, BufWriter::new(File::create(path)?))
}

pub fn load_truth(path: impl AsRef<Path>) -> Result<(SimulationConfig, Vec<GroundTruthOracle>)> {
    read_truth(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle_with(dosage: f64, re: RandomEffects, x: [f64; 3]) -> GroundTruthOracle {
        GroundTruthOracle {
            id: "o".into(),
            covariates: x.to_vec(),
            random_effects: re,
            dosage_times: vec![0.0],
            dosages: vec![dosage],
            config: SimulationConfig::default(),
        }
    }

    #[test]
    fn mean_process_examples() {
        let cfg = SimulationConfig::default();
        let (y1, y2) = mean_processes(&cfg, 0.0, &[0.0; 3], &RandomEffects::ZERO, 0.0);
        assert!((y1 - 2.0).abs() < 1e-15);
        assert!((y2 - 5.3).abs() < 1e-12);
        let (y1, _) = mean_processes(&cfg, 10000.0, &[0.0; 3], &RandomEffects::ZERO, 0.0);
        assert!((y1 - 1.0).abs() < 1e-12);

        let re = RandomEffects { b1: [0.3, 0.0, 0.0], b2: [0.0; 3] };
        let re2 = RandomEffects { b1: [0.6, 0.0, 0.0], b2: [0.0; 3] };
        let a = mean_processes(&cfg, 50.0, &[0.2, -0.4, 1.0], &re, 1.3).0;
        let b = mean_processes(&cfg, 50.0, &[0.2, -0.4, 1.0], &re2, 1.3).0;
        assert!((b - a - 0.3).abs() < 1e-12);
    }

    #[test]
    fn intensity_and_hazard_closed_forms() {
        let cfg = SimulationConfig::default();
        assert!((intensity_given(&cfg, 16.0, -1.5) - 6.0).abs() < 1e-12);
        assert!((intensity_given(&cfg, 7.0, -1.5) - 3.0 * 7f64.powf(0.25)).abs() < 1e-12);
        assert!(intensity_given(&cfg, 7.0, 0.2) < intensity_given(&cfg, 7.0, 0.1));
        assert!((hazard_given(&cfg, 1.0, -1.0, 0.0) - 1.25).abs() < 1e-12);
        for &t in &[0.1, 1.0, 37.0, 5000.0] {
            let ratio = hazard_given(&cfg, t, 2.0, 1.7) / hazard_given(&cfg, t, 2.0, 1.2);
            assert!((ratio - (-0.9f64 * 0.5).exp()).abs() < 1e-14);
            let shape = hazard_given(&cfg, 16.0 * t, 2.0, 1.0) / hazard_given(&cfg, t, 2.0, 1.0);
            assert!((shape - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_rejects_non_positive_time() {
        let o = oracle_with(1.0, RandomEffects::ZERO, [0.0; 3]);
        assert!(o.intensity(0.0).is_err());
        assert!(o.hazard(-1.0).is_err());
    }

    #[test]
    fn dosage_steps_are_right_closed() {
        let mut o = oracle_with(1.0, RandomEffects::ZERO, [0.0; 3]);
        o.dosage_times = vec![0.0, 10.0, 20.0];
        o.dosages = vec![1.0, 2.0, 3.0];
        assert_eq!(o.dosage_at(5.0), 1.0);
        assert_eq!(o.dosage_at(10.0), 1.0);
        assert_eq!(o.dosage_at(10.5), 2.0);
        assert_eq!(o.dosage_at(25.0), 3.0);
    }

    #[test]
    fn cumulative_intensity_matches_antiderivative() {
        // Choose covariates/effects so that Y2* ≡ -1.5 on the whole line:
        // zero time slopes and an intercept offset.
        let mut cfg = SimulationConfig::default();
        cfg.beta1[5] = 0.0;
        cfg.beta2[6] = 0.0;
        let mut o = oracle_with(0.0, RandomEffects { b1: [-2.0, 0.0, 0.0], b2: [-4.8, 0.0, 0.0] }, [0.0; 3]);
        o.config = cfg;
        assert!((o.mean_at(3.0).1 + 1.5).abs() < 1e-12);
        let (a, b) = (2.0f64, 9.0f64);
        let exact = 3.0 * (b.powf(1.25) - a.powf(1.25)) / 1.25;
        let got = o.cumulative_intensity(a, b);
        assert!(((got - exact) / exact).abs() < 1e-6);
    }

    #[test]
    fn true_loglik_constant_and_censored_cases() {
        // λ ≡ c requires a zero time exponent.
        let mut cfg = SimulationConfig::default();
        cfg.intensity_exponent = 0.0;
        cfg.beta1[5] = 0.0;
        cfg.beta2[6] = 0.0;
        let mut o = oracle_with(0.0, RandomEffects::ZERO, [0.0; 3]);
        o.config = cfg.clone();
        let c = o.intensity(1.0).unwrap();
        let rec = PatientRecord::new(
            "o",
            BaselineCovariates(vec![0.0; 3]),
            vec![1.0, 4.0, 6.5],
            vec![LongitudinalObservation::fully_observed(vec![0.0; 3]); 3],
            10.0,
            true,
        )
        .unwrap();
        let (l_lambda, l_h) = true_loglik(&rec, &o).unwrap();
        assert!((l_lambda - (3.0 * c.ln() - 10.0 * c)).abs() < 1e-9 * c.abs().max(1.0));
        assert!((l_h + o.cumulative_hazard(0.0, 10.0)).abs() < 1e-15);
    }

    #[test]
    fn baseline_moments_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let draws: Vec<BaselineCovariates> = (0..10_000).map(|_| sample_baseline(&mut rng)).collect();
        let n = draws.len() as f64;
        let mean3 = draws.iter().map(|x| x.0[2]).sum::<f64>() / n;
        assert!((mean3 - 0.4).abs() < 0.02, "{mean3}");
        let mean1 = draws.iter().map(|x| x.0[0]).sum::<f64>() / n;
        let var1 = draws.iter().map(|x| (x.0[0] - mean1).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var1 - 1.0).abs() < 0.05, "{var1}");

        let a = sample_baseline(&mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_baseline(&mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn simulated_records_satisfy_invariants() {
        let cfg = SimulationConfig { n_patients: 40, seed: 9, ..SimulationConfig::default() };
        let cohort = simulate_cohort(&cfg).unwrap();
        assert_eq!(cohort.dataset.len(), 40);
        for (r, o) in cohort.dataset.records.iter().zip(&cohort.oracles) {
            assert!(r.n_visits() >= 1);
            assert!(r.terminal_time() >= *r.visit_times().last().unwrap());
            assert!(r.visit_times().windows(2).all(|w| w[0] < w[1]));
            assert_eq!(o.dosages.len(), r.n_visits() + 1);
            assert!(o.intensity(r.terminal_time()).unwrap() > 0.0);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = SimulationConfig { missing_rate: [1.0, 0.0, 0.0], ..SimulationConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = SimulationConfig { weibull_shape: 0.0, ..SimulationConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn truth_round_trip_restores_oracles() {
        let cfg = SimulationConfig { n_patients: 5, seed: 3, ..SimulationConfig::with_censoring(CensoringSpec::MEDIUM) };
        let cohort = simulate_cohort(&cfg).unwrap();
        let mut buf = Vec::new();
        write_truth(&cfg, &cohort.oracles, &mut buf).unwrap();
        let (cfg2, oracles) = read_truth(buf.as_slice()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(oracles, cohort.oracles);
        for (r, o) in cohort.dataset.records.iter().zip(&oracles) {
            assert_eq!(true_loglik(r, o).unwrap(), true_loglik(r, cohort.oracle(&r.id).unwrap()).unwrap());
        }
    }
}
