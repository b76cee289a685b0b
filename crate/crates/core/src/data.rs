//! Patient records, the flattened token representation of a trajectory, and
//! dataset splitting.
//!
//! Censoring convention: `censored == true` means the terminal time is a
//! censoring time (the patient was still alive). Likelihood code uses
//! `!censored` as the death indicator.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LsrError, Result};

pub mod io;

/// Baseline covariate vector of one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineCovariates(pub Vec<f64>);

impl BaselineCovariates {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// One visit's measurements. Missing entries are stored as `0.0` with
/// `observed[u] == false`.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalObservation {
    values: Vec<f64>,
    observed: Vec<bool>,
}

impl LongitudinalObservation {
    pub fn from_options(values: &[Option<f64>]) -> Self {
        Self {
            values: values.iter().map(|v| v.unwrap_or(0.0)).collect(),
            observed: values.iter().map(Option::is_some).collect(),
        }
    }

    pub fn fully_observed(values: Vec<f64>) -> Self {
        let observed = vec![true; values.len()];
        Self { values, observed }
    }

    pub fn dims(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, u: usize) -> Option<f64> {
        self.observed[u].then_some(self.values[u])
    }

    pub fn is_observed(&self, u: usize) -> bool {
        self.observed[u]
    }

    pub fn mask(&mut self, u: usize) {
        self.observed[u] = false;
        self.values[u] = 0.0;
    }

    pub fn to_options(&self) -> Vec<Option<f64>> {
        (0..self.dims()).map(|u| self.get(u)).collect()
    }

    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }
}

/// A patient's baseline covariates, visit history and terminal outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub covariates: BaselineCovariates,
    visit_times: Vec<f64>,
    observations: Vec<LongitudinalObservation>,
    terminal_time: f64,
    censored: bool,
}

impl PatientRecord {
    /// Builds a record and checks its invariants: `0 < t_1 < ... < t_J <= T`,
    /// finite values, and one observation per visit with a common dimension.
    pub fn new(
        id: impl Into<String>,
        covariates: BaselineCovariates,
        visit_times: Vec<f64>,
        observations: Vec<LongitudinalObservation>,
        terminal_time: f64,
        censored: bool,
    ) -> Result<Self> {
        let rec = Self {
            id: id.into(),
            covariates,
            visit_times,
            observations,
            terminal_time,
            censored,
        };
        rec.validate().map_err(LsrError::InvalidRecord)?;
        Ok(rec)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.covariates.0.iter().any(|x| !x.is_finite()) {
            return Err("non-finite covariate".into());
        }
        if self.visit_times.len() != self.observations.len() {
            return Err(format!(
                "{} visit times but {} observations",
                self.visit_times.len(),
                self.observations.len()
            ));
        }
        if !self.terminal_time.is_finite() {
            return Err("non-finite terminal time".into());
        }
        let mut prev = 0.0;
        for (j, &t) in self.visit_times.iter().enumerate() {
            if !t.is_finite() || t <= prev {
                return Err(format!("visit {j}: time {t} is not strictly increasing and positive"));
            }
            prev = t;
        }
        if self.terminal_time < prev {
            return Err(format!("terminal time {} precedes last visit {prev}", self.terminal_time));
        }
        let m = self.observations.first().map_or(0, LongitudinalObservation::dims);
        for (j, obs) in self.observations.iter().enumerate() {
            if obs.dims() != m {
                return Err(format!("visit {j}: expected {m} dimensions, got {}", obs.dims()));
            }
            for u in 0..m {
                if let Some(v) = obs.get(u) {
                    if !v.is_finite() {
                        return Err(format!("visit {j}: non-finite value in dimension {u}"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn visit_times(&self) -> &[f64] {
        &self.visit_times
    }

    pub fn observations(&self) -> &[LongitudinalObservation] {
        &self.observations
    }

    pub fn n_visits(&self) -> usize {
        self.visit_times.len()
    }

    pub fn terminal_time(&self) -> f64 {
        self.terminal_time
    }

    /// `true` when the terminal time is a censoring time.
    pub fn censored(&self) -> bool {
        self.censored
    }

    /// `true` when death was observed at the terminal time.
    pub fn died(&self) -> bool {
        !self.censored
    }

    /// Number of visits strictly before `t`, i.e. the size of the history
    /// available to a prediction at `t`.
    pub fn history_len_before(&self, t: f64) -> usize {
        self.visit_times.partition_point(|&v| v < t)
    }

    /// Copy of the record restricted to its first `j` visits. The terminal
    /// time becomes `t_j` and the copy is marked censored.
    pub fn truncated(&self, j: usize) -> PatientRecord {
        let j = j.min(self.n_visits());
        PatientRecord {
            id: self.id.clone(),
            covariates: self.covariates.clone(),
            visit_times: self.visit_times[..j].to_vec(),
            observations: self.observations[..j].to_vec(),
            terminal_time: if j == self.n_visits() {
                self.terminal_time
            } else if j == 0 {
                0.0
            } else {
                self.visit_times[j - 1]
            },
            censored: j < self.n_visits() || self.censored,
        }
    }
}

/// Within-visit ordering of the longitudinal dimensions (0-based indices).
/// Causative variables come first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConcurrentOrder(Vec<usize>);

impl ConcurrentOrder {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &u in &perm {
            if u >= perm.len() || seen[u] {
                return Err(LsrError::config("order", format!("{perm:?} is not a permutation")));
            }
            seen[u] = true;
        }
        Ok(Self(perm))
    }

    pub fn identity(m: usize) -> Self {
        Self((0..m).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Dimension at within-visit position `k`.
    pub fn dim_at(&self, k: usize) -> usize {
        self.0[k]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Longitudinal(usize),
    Intensity,
    Hazard,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Token {
    pub time: f64,
    pub kind: TokenKind,
    /// Measured (or fed-back) value; `0.0` for prediction tokens and masked slots.
    pub value: f64,
    pub is_prediction: bool,
}

/// Boolean attention mask with `true` meaning "may attend".
#[derive(Debug, Clone, PartialEq)]
pub struct CausalMask {
    pub allowed: Array2<bool>,
    /// Rows without any allowed column. Their encoder output must not be used.
    pub empty_rows: Vec<usize>,
}

/// Flattened trajectory: one token slot per (visit, dimension).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream {
    pub tokens: Vec<Token>,
    pub observed_mask: Vec<bool>,
    pub causal_mask: CausalMask,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Flattens the first `upto_visit` visits into
/// `(Y[1,σ(1)], .., Y[1,σ(m)], .., Y[j,σ(1)], .., Y[j,σ(m)])`. Missing
/// measurements keep their slot with `observed_mask == false`.
pub fn flatten_trajectory(
    record: &PatientRecord,
    order: &ConcurrentOrder,
    upto_visit: usize,
) -> Result<TokenStream> {
    if record.n_visits() == 0 {
        return Err(LsrError::NoVisits);
    }
    if upto_visit == 0 || upto_visit > record.n_visits() {
        return Err(LsrError::InvalidRecord(format!(
            "upto_visit {upto_visit} outside 1..={}",
            record.n_visits()
        )));
    }
    let m = order.len();
    let mut tokens = Vec::with_capacity(m * upto_visit);
    let mut observed_mask = Vec::with_capacity(m * upto_visit);
    for (t, obs) in record.visit_times[..upto_visit]
        .iter()
        .zip(&record.observations[..upto_visit])
    {
        for &u in order.as_slice() {
            let v = obs.get(u);
            tokens.push(Token {
                time: *t,
                kind: TokenKind::Longitudinal(u),
                value: v.unwrap_or(0.0),
                is_prediction: false,
            });
            observed_mask.push(v.is_some());
        }
    }
    let causal_mask = build_causal_mask(tokens.len(), &observed_mask)?;
    Ok(TokenStream {
        tokens,
        observed_mask,
        causal_mask,
    })
}

/// Lower-triangular mask restricted to observed columns: `(l, z)` is allowed
/// iff `z <= l` and token `z` is observed.
pub fn build_causal_mask(length: usize, observed_mask: &[bool]) -> Result<CausalMask> {
    if length == 0 || observed_mask.len() != length {
        return Err(LsrError::Shape {
            name: "observed_mask".into(),
            expected: vec![length.max(1)],
            actual: vec![observed_mask.len()],
        });
    }
    let allowed = Array2::from_shape_fn((length, length), |(l, z)| z <= l && observed_mask[z]);
    let empty_rows = (0..length)
        .filter(|&l| !allowed.row(l).iter().any(|&a| a))
        .collect();
    Ok(CausalMask {
        allowed,
        empty_rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Eval,
}

/// A cohort sharing `m`, `p` and a concurrent order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub m: usize,
    pub p: usize,
    pub order: ConcurrentOrder,
    pub records: Vec<PatientRecord>,
    /// One label per record once split.
    pub splits: Option<Vec<Split>>,
}

impl Dataset {
    pub fn new(m: usize, p: usize, order: ConcurrentOrder, records: Vec<PatientRecord>) -> Result<Self> {
        if order.len() != m {
            return Err(LsrError::config("order", format!("length {} != m = {m}", order.len())));
        }
        for (i, r) in records.iter().enumerate() {
            if r.covariates.len() != p {
                return Err(LsrError::Parse {
                    record: i,
                    field: "x".into(),
                    reason: format!("expected {p} covariates, got {}", r.covariates.len()),
                });
            }
            if let Some(o) = r.observations.iter().find(|o| o.dims() != m) {
                return Err(LsrError::Parse {
                    record: i,
                    field: "visits.y".into(),
                    reason: format!("expected {m} dimensions, got {}", o.dims()),
                });
            }
        }
        Ok(Self {
            m,
            p,
            order,
            records,
            splits: None,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records carrying the given split label (empty if unsplit).
    pub fn split(&self, which: Split) -> Vec<&PatientRecord> {
        match &self.splits {
            Some(labels) => self
                .records
                .iter()
                .zip(labels)
                .filter(|(_, &s)| s == which)
                .map(|(r, _)| r)
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn find(&self, id: &str) -> Option<&PatientRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

/// Part sizes by largest remainder, each part at least one record.
fn part_sizes(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = (e + 1e-9).floor() as usize;
    }
    let mut rest = n - sizes.iter().sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..3).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = exact[a] - sizes[a] as f64;
        let rb = exact[b] - sizes[b] as f64;
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &k in by_remainder.iter().cycle() {
        if rest == 0 {
            break;
        }
        sizes[k] += 1;
        rest -= 1;
    }
    for k in 0..3 {
        if sizes[k] == 0 {
            let donor = (0..3).max_by_key(|&d| sizes[d]).unwrap_or(0);
            sizes[donor] -= 1;
            sizes[k] = 1;
        }
    }
    sizes
}

/// Randomly assigns train/val/eval labels with the given fractions.
pub fn split_dataset(dataset: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<Dataset> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|&f| !(f > 0.0)) || ((fr.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
        return Err(LsrError::config("fractions", format!("{fr:?} must be positive and sum to 1")));
    }
    let n = dataset.len();
    if n < 3 {
        return Err(LsrError::TooFewRecords { records: n, parts: 3 });
    }
    let sizes = part_sizes(n, fr);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labels = vec![Split::Eval; n];
    for (rank, &i) in idx.iter().enumerate() {
        labels[i] = if rank < sizes[0] {
            Split::Train
        } else if rank < sizes[0] + sizes[1] {
            Split::Val
        } else {
            Split::Eval
        };
    }
    let mut out = dataset.clone();
    out.splits = Some(labels);
    Ok(out)
}
