//! Exact evaluation on small discrete data-generating models.
//!
//! A [`DiscreteDgm`] has one categorical covariate `L_k` per interval and
//! conditional probability tables indexed by the full history of
//! `(L_j, treatment_j)` pairs. Censoring, when present, only affects subjects
//! untreated through the interval and masks the outcome; `L` and `Y` never
//! depend on it.
//!
//! Two independent routes give the counterfactual risk:
//! * [`gformula_risk`] propagates the intervened distribution forward,
//! * [`gformula_hazard_repr`] enumerates the factual distribution with exact
//!   inverse probability weights and chains the weighted hazards.
//!
//! They agree whenever positivity holds, which makes them a check on each other
//! and on the estimator.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::regime::{resolve_arm, ArmResolution, RegimeError, RegimeSpec, Variant};
use crate::scalar::{CompensatedSum, Scalar};

pub const DEFAULT_STATE_BOUND: usize = 10_000_000;

/// Slack for probability-range checks on table entries and densities.
const PROB_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("state space of {states} history states exceeds the bound {bound}")]
    StateSpaceTooLarge { states: usize, bound: usize },
    #[error("interval {k}, entry `{key}`: {reason}")]
    InvalidCpt { k: usize, key: String, reason: String },
    #[error("interval {k}: missing entry `{key}`")]
    MissingEntry { k: usize, key: String },
    #[error("interval {k}: unexpected entry `{key}`")]
    UnexpectedEntry { k: usize, key: String },
    #[error("dgm: {0}")]
    Shape(String),
    #[error("interval {k}: intervention density {value} outside [0, 1]")]
    NegativeInterventionDensity { k: usize, value: f64 },
    #[error(transparent)]
    Regime(#[from] RegimeError),
    #[error("json: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Trt {
    None = 0,
    B = 1,
    H = 2,
}

impl Trt {
    pub const ALL: [Trt; 3] = [Trt::None, Trt::B, Trt::H];

    fn from_digit(d: usize) -> Self {
        match d {
            0 => Trt::None,
            1 => Trt::B,
            _ => Trt::H,
        }
    }

    fn token(self) -> char {
        match self {
            Trt::None => 'n',
            Trt::B => 'b',
            Trt::H => 'h',
        }
    }
}

/// One completed interval of a history.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    pub l: usize,
    pub trt: Trt,
}

/// Conditional probabilities of a DGM, queried once per reachable history.
pub trait CptSource {
    /// Distribution of `L_k` given the history before interval `k`.
    fn l(&self, history: &[Step]) -> Vec<f64>;
    /// `P(B_k = 1 | history, L_k)` for eligible histories.
    fn b(&self, history: &[Step], l: usize) -> f64;
    /// `P(H_k = 1 | history, L_k, B_k = 0)` for eligible histories.
    fn h(&self, history: &[Step], l: usize) -> f64;
    /// `P(C_k = 1 | history, L_k)` for histories untreated through `k`;
    /// `None` disables censoring.
    fn c(&self, _history: &[Step], _l: usize) -> Option<f64> {
        None
    }
    /// `P(Y_k = 1 | history, L_k, treatment at k)`.
    fn y(&self, history: &[Step], l: usize, trt: Trt) -> f64;
}

#[derive(Debug, Clone, PartialEq)]
struct IntervalCpt<T> {
    /// `[hist * levels + l]`
    l: Vec<T>,
    b: Vec<T>,
    h: Vec<T>,
    /// Empty without censoring.
    c: Vec<T>,
    /// `[(hist * levels + l) * 3 + trt]`
    y: Vec<T>,
}

/// Finite-state DGM with dense history-indexed tables.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDgm<T> {
    horizon: usize,
    levels: usize,
    censoring: bool,
    intervals: Vec<IntervalCpt<T>>,
}

fn decode(mut code: usize, len: usize, levels: usize) -> Vec<Step> {
    let radix = 3 * levels;
    let mut steps = vec![
        Step {
            l: 0,
            trt: Trt::None
        };
        len
    ];
    for slot in steps.iter_mut().rev() {
        let d = code % radix;
        code /= radix;
        *slot = Step {
            l: d / 3,
            trt: Trt::from_digit(d % 3),
        };
    }
    steps
}

fn history_token(steps: &[Step]) -> String {
    steps
        .iter()
        .map(|s| format!("{}{}", s.l, s.trt.token()))
        .collect::<Vec<_>>()
        .join(".")
}

fn key_with_l(steps: &[Step], l: usize) -> String {
    if steps.is_empty() {
        l.to_string()
    } else {
        format!("{}.{l}", history_token(steps))
    }
}

fn key_with_step(steps: &[Step], l: usize, trt: Trt) -> String {
    let mut s = steps.to_vec();
    s.push(Step { l, trt });
    history_token(&s)
}

/// Reachable: at most one treatment, and none after it.
fn treated(steps: &[Step]) -> Option<bool> {
    let n = steps.iter().filter(|s| s.trt != Trt::None).count();
    match n {
        0 => Some(false),
        1 => Some(true),
        _ => None,
    }
}

fn state_count(horizon: usize, levels: usize) -> Option<usize> {
    (3 * levels).checked_pow(horizon.saturating_sub(1) as u32)?.checked_mul(levels)
}

fn check_prob(k: usize, key: &str, v: f64) -> Result<f64, OracleError> {
    if v.is_finite() && (-PROB_SLACK..=1.0 + PROB_SLACK).contains(&v) {
        Ok(v.clamp(0.0, 1.0))
    } else {
        Err(OracleError::InvalidCpt {
            k,
            key: key.to_string(),
            reason: format!("probability {v} outside [0, 1]"),
        })
    }
}

impl<T: Scalar> DiscreteDgm<T> {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn has_censoring(&self) -> bool {
        self.censoring
    }

    /// Number of history states at the last interval.
    pub fn state_count(&self) -> usize {
        state_count(self.horizon, self.levels).unwrap_or(usize::MAX)
    }

    pub fn check_bound(&self, bound: usize) -> Result<(), OracleError> {
        let states = self.state_count();
        if states > bound {
            return Err(OracleError::StateSpaceTooLarge { states, bound });
        }
        Ok(())
    }

    /// Tabulate `source` over every reachable history.
    pub fn from_source(
        horizon: usize,
        levels: usize,
        source: &dyn CptSource,
        bound: usize,
    ) -> Result<Self, OracleError> {
        if horizon == 0 || levels == 0 {
            return Err(OracleError::Shape("horizon and levels must be positive".into()));
        }
        let states = state_count(horizon, levels).unwrap_or(usize::MAX);
        if states > bound {
            return Err(OracleError::StateSpaceTooLarge { states, bound });
        }
        let censoring = source.c(&[], 0).is_some();
        let mut intervals = Vec::with_capacity(horizon);
        for k in 1..=horizon {
            let hists = (3 * levels).pow(k as u32 - 1);
            let mut cpt = IntervalCpt {
                l: vec![T::zero(); hists * levels],
                b: vec![T::zero(); hists * levels],
                h: vec![T::zero(); hists * levels],
                c: if censoring {
                    vec![T::zero(); hists * levels]
                } else {
                    Vec::new()
                },
                y: vec![T::zero(); hists * levels * 3],
            };
            for hist in 0..hists {
                let steps = decode(hist, k - 1, levels);
                let Some(was_treated) = treated(&steps) else {
                    continue;
                };
                let dist = source.l(&steps);
                let token = history_token(&steps);
                if dist.len() != levels {
                    return Err(OracleError::InvalidCpt {
                        k,
                        key: token,
                        reason: format!("L distribution has {} entries", dist.len()),
                    });
                }
                let total: f64 = dist.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(OracleError::InvalidCpt {
                        k,
                        key: token,
                        reason: format!("L distribution sums to {total}"),
                    });
                }
                for (l, p) in dist.iter().enumerate() {
                    let i = hist * levels + l;
                    let key = key_with_l(&steps, l);
                    cpt.l[i] = T::lit(check_prob(k, &token, *p)?);
                    if !was_treated {
                        cpt.b[i] = T::lit(check_prob(k, &key, source.b(&steps, l))?);
                        cpt.h[i] = T::lit(check_prob(k, &key, source.h(&steps, l))?);
                        if censoring {
                            let c = source.c(&steps, l).ok_or_else(|| OracleError::MissingEntry {
                                k,
                                key: key.clone(),
                            })?;
                            cpt.c[i] = T::lit(check_prob(k, &key, c)?);
                        }
                    }
                    for trt in Trt::ALL {
                        if was_treated && trt != Trt::None {
                            continue;
                        }
                        let key = key_with_step(&steps, l, trt);
                        cpt.y[i * 3 + trt as usize] =
                            T::lit(check_prob(k, &key, source.y(&steps, l, trt))?);
                    }
                }
            }
            intervals.push(cpt);
        }
        Ok(Self {
            horizon,
            levels,
            censoring,
            intervals,
        })
    }

    /// Random tables with every probability inside `ranges`.
    pub fn random<R: Rng>(
        rng: &mut R,
        horizon: usize,
        levels: usize,
        censoring: bool,
        ranges: &RandomRanges,
    ) -> Result<Self, OracleError> {
        let states = state_count(horizon, levels).unwrap_or(usize::MAX);
        if states > DEFAULT_STATE_BOUND {
            return Err(OracleError::StateSpaceTooLarge {
                states,
                bound: DEFAULT_STATE_BOUND,
            });
        }
        let mut table = TableSource::default();
        for k in 1..=horizon {
            let hists = (3 * levels).pow(k as u32 - 1);
            for hist in 0..hists {
                let steps = decode(hist, k - 1, levels);
                let Some(was_treated) = treated(&steps) else {
                    continue;
                };
                let raw: Vec<f64> = (0..levels).map(|_| rng.random_range(0.2..1.0)).collect();
                let total: f64 = raw.iter().sum();
                table
                    .l
                    .insert(history_token(&steps), raw.iter().map(|v| v / total).collect());
                for l in 0..levels {
                    let key = key_with_l(&steps, l);
                    if !was_treated {
                        table.b.insert(key.clone(), ranges.b.sample(rng));
                        table.h.insert(key.clone(), ranges.h.sample(rng));
                        if censoring {
                            table.c.insert(key.clone(), ranges.c.sample(rng));
                        }
                    }
                    for trt in Trt::ALL {
                        if was_treated && trt != Trt::None {
                            continue;
                        }
                        table
                            .y
                            .insert(key_with_step(&steps, l, trt), ranges.y.sample(rng));
                    }
                }
            }
        }
        table.censoring = censoring;
        Self::from_source(horizon, levels, &table, DEFAULT_STATE_BOUND)
    }

    fn l_prob(&self, k: usize, hist: usize, l: usize) -> T {
        self.intervals[k - 1].l[hist * self.levels + l]
    }

    fn b_prob(&self, k: usize, hist: usize, l: usize) -> T {
        self.intervals[k - 1].b[hist * self.levels + l]
    }

    fn h_prob(&self, k: usize, hist: usize, l: usize) -> T {
        self.intervals[k - 1].h[hist * self.levels + l]
    }

    fn c_prob(&self, k: usize, hist: usize, l: usize) -> T {
        if self.censoring {
            self.intervals[k - 1].c[hist * self.levels + l]
        } else {
            T::zero()
        }
    }

    fn y_prob(&self, k: usize, hist: usize, l: usize, trt: Trt) -> T {
        self.intervals[k - 1].y[(hist * self.levels + l) * 3 + trt as usize]
    }

    /// Probabilities used to simulate interval `k` of a subject with history code `hist`.
    pub fn cpt(&self, k: usize, hist: usize, l: usize) -> CptRow<T> {
        CptRow {
            b: self.b_prob(k, hist, l),
            h: self.h_prob(k, hist, l),
            c: self.c_prob(k, hist, l),
            y: [
                self.y_prob(k, hist, l, Trt::None),
                self.y_prob(k, hist, l, Trt::B),
                self.y_prob(k, hist, l, Trt::H),
            ],
        }
    }

    /// `P(L_k = · | history)`.
    pub fn l_dist(&self, k: usize, hist: usize) -> &[T] {
        let n = self.levels;
        &self.intervals[k - 1].l[hist * n..(hist + 1) * n]
    }

    /// History code after appending `(l, trt)` to `hist`.
    pub fn next_history(&self, hist: usize, l: usize, trt: Trt) -> usize {
        hist * 3 * self.levels + l * 3 + trt as usize
    }

    /// Convert the tables to another scalar type.
    pub fn cast<U: Scalar>(&self) -> DiscreteDgm<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::lit(x.as_f64())).collect();
        DiscreteDgm {
            horizon: self.horizon,
            levels: self.levels,
            censoring: self.censoring,
            intervals: self
                .intervals
                .iter()
                .map(|c| IntervalCpt {
                    l: conv(&c.l),
                    b: conv(&c.b),
                    h: conv(&c.h),
                    c: conv(&c.c),
                    y: conv(&c.y),
                })
                .collect(),
        }
    }

    pub fn to_document(&self) -> DgmDocument {
        let mut intervals = Vec::with_capacity(self.horizon);
        for k in 1..=self.horizon {
            let hists = (3 * self.levels).pow(k as u32 - 1);
            let mut doc = IntervalDocument::default();
            if self.censoring {
                doc.c = Some(BTreeMap::new());
            }
            for hist in 0..hists {
                let steps = decode(hist, k - 1, self.levels);
                let Some(was_treated) = treated(&steps) else {
                    continue;
                };
                doc.l.insert(
                    history_token(&steps),
                    self.l_dist(k, hist).iter().map(|v| v.as_f64()).collect(),
                );
                for l in 0..self.levels {
                    let key = key_with_l(&steps, l);
                    if !was_treated {
                        doc.b.insert(key.clone(), self.b_prob(k, hist, l).as_f64());
                        doc.h.insert(key.clone(), self.h_prob(k, hist, l).as_f64());
                        if let Some(c) = doc.c.as_mut() {
                            c.insert(key.clone(), self.c_prob(k, hist, l).as_f64());
                        }
                    }
                    for trt in Trt::ALL {
                        if was_treated && trt != Trt::None {
                            continue;
                        }
                        doc.y.insert(
                            key_with_step(&steps, l, trt),
                            self.y_prob(k, hist, l, trt).as_f64(),
                        );
                    }
                }
            }
            intervals.push(doc);
        }
        DgmDocument {
            horizon: self.horizon,
            levels: self.levels,
            intervals,
        }
    }

    pub fn from_document(doc: &DgmDocument, bound: usize) -> Result<Self, OracleError> {
        if doc.intervals.len() != doc.horizon {
            return Err(OracleError::Shape(format!(
                "horizon {} but {} interval tables",
                doc.horizon,
                doc.intervals.len()
            )));
        }
        let censoring = doc.intervals.first().is_some_and(|i| i.c.is_some());
        if doc.intervals.iter().any(|i| i.c.is_some() != censoring) {
            return Err(OracleError::Shape(
                "censoring tables must be given for every interval or none".into(),
            ));
        }
        // every key must be consumed exactly once
        for (i, interval) in doc.intervals.iter().enumerate() {
            let k = i + 1;
            let mut expected_l = std::collections::BTreeSet::new();
            let mut expected_bh = std::collections::BTreeSet::new();
            let mut expected_y = std::collections::BTreeSet::new();
            let hists = (3 * doc.levels).checked_pow(k as u32 - 1).unwrap_or(usize::MAX);
            if hists.saturating_mul(doc.levels) > bound {
                return Err(OracleError::StateSpaceTooLarge {
                    states: hists.saturating_mul(doc.levels),
                    bound,
                });
            }
            for hist in 0..hists {
                let steps = decode(hist, k - 1, doc.levels);
                let Some(was_treated) = treated(&steps) else {
                    continue;
                };
                expected_l.insert(history_token(&steps));
                for l in 0..doc.levels {
                    if !was_treated {
                        expected_bh.insert(key_with_l(&steps, l));
                    }
                    for trt in Trt::ALL {
                        if !(was_treated && trt != Trt::None) {
                            expected_y.insert(key_with_step(&steps, l, trt));
                        }
                    }
                }
            }
            let tables: [(&BTreeMap<String, f64>, _); 2] =
                [(&interval.b, &expected_bh), (&interval.h, &expected_bh)];
            let extra = interval
                .l
                .keys()
                .find(|key| !expected_l.contains(*key))
                .or_else(|| {
                    tables
                        .iter()
                        .find_map(|(t, e)| t.keys().find(|key| !e.contains(*key)))
                })
                .or_else(|| {
                    interval
                        .c
                        .as_ref()
                        .and_then(|c| c.keys().find(|key| !expected_bh.contains(*key)))
                })
                .or_else(|| interval.y.keys().find(|key| !expected_y.contains(*key)));
            if let Some(key) = extra {
                return Err(OracleError::UnexpectedEntry {
                    k,
                    key: key.clone(),
                });
            }
        }
        let source = DocumentSource { doc };
        let dgm = Self::from_source(doc.horizon, doc.levels, &source, bound);
        match source_error(doc) {
            Some(err) => Err(err),
            None => dgm,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("serializable")
    }

    pub fn from_json(text: &str, bound: usize) -> Result<Self, OracleError> {
        let doc: DgmDocument =
            serde_json::from_str(text).map_err(|e| OracleError::Json(e.to_string()))?;
        Self::from_document(&doc, bound)
    }
}

/// Simulation view of one history cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CptRow<T> {
    pub b: T,
    pub h: T,
    pub c: T,
    /// Indexed by [`Trt`].
    pub y: [T; 3],
}

/// Uniform sampling range for random tables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbRange {
    pub lo: f64,
    pub hi: f64,
}

impl ProbRange {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..self.hi)
        } else {
            self.lo
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomRanges {
    pub b: ProbRange,
    pub h: ProbRange,
    pub c: ProbRange,
    pub y: ProbRange,
}

impl Default for RandomRanges {
    fn default() -> Self {
        Self {
            b: ProbRange::new(0.05, 0.6),
            h: ProbRange::new(0.05, 0.6),
            c: ProbRange::new(0.05, 0.4),
            y: ProbRange::new(0.02, 0.4),
        }
    }
}

/// Tables keyed by the document tokens.
#[derive(Debug, Clone, Default)]
struct TableSource {
    censoring: bool,
    l: BTreeMap<String, Vec<f64>>,
    b: BTreeMap<String, f64>,
    h: BTreeMap<String, f64>,
    c: BTreeMap<String, f64>,
    y: BTreeMap<String, f64>,
}

impl CptSource for TableSource {
    fn l(&self, history: &[Step]) -> Vec<f64> {
        self.l[&history_token(history)].clone()
    }
    fn b(&self, history: &[Step], l: usize) -> f64 {
        self.b[&key_with_l(history, l)]
    }
    fn h(&self, history: &[Step], l: usize) -> f64 {
        self.h[&key_with_l(history, l)]
    }
    fn c(&self, history: &[Step], l: usize) -> Option<f64> {
        if !self.censoring {
            return None;
        }
        Some(self.c.get(&key_with_l(history, l)).copied().unwrap_or(0.0))
    }
    fn y(&self, history: &[Step], l: usize, trt: Trt) -> f64 {
        self.y[&key_with_step(history, l, trt)]
    }
}

/// Serialized DGM. Keys are history tokens: one `<level><n|b|h>` token per
/// completed interval joined by `.`, e.g. `0n.1b`. `l` tables are keyed by
/// the history before the interval (`""` at k = 1), `b`/`h`/`c` by the history
/// plus the current level (`0n.1`), and `y` by the history plus the current
/// level and treatment (`0n.1b`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgmDocument {
    pub horizon: usize,
    pub levels: usize,
    pub intervals: Vec<IntervalDocument>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IntervalDocument {
    pub l: BTreeMap<String, Vec<f64>>,
    pub b: BTreeMap<String, f64>,
    pub h: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<BTreeMap<String, f64>>,
    pub y: BTreeMap<String, f64>,
}

struct DocumentSource<'a> {
    doc: &'a DgmDocument,
}

const MISSING: f64 = f64::NAN;

impl DocumentSource<'_> {
    fn interval(&self, history: &[Step]) -> &IntervalDocument {
        &self.doc.intervals[history.len()]
    }
}

impl CptSource for DocumentSource<'_> {
    fn l(&self, history: &[Step]) -> Vec<f64> {
        self.interval(history)
            .l
            .get(&history_token(history))
            .cloned()
            .unwrap_or_else(|| vec![MISSING; self.doc.levels])
    }
    fn b(&self, history: &[Step], l: usize) -> f64 {
        *self
            .interval(history)
            .b
            .get(&key_with_l(history, l))
            .unwrap_or(&MISSING)
    }
    fn h(&self, history: &[Step], l: usize) -> f64 {
        *self
            .interval(history)
            .h
            .get(&key_with_l(history, l))
            .unwrap_or(&MISSING)
    }
    fn c(&self, history: &[Step], l: usize) -> Option<f64> {
        let table = self.interval(history).c.as_ref()?;
        Some(*table.get(&key_with_l(history, l)).unwrap_or(&MISSING))
    }
    fn y(&self, history: &[Step], l: usize, trt: Trt) -> f64 {
        *self
            .interval(history)
            .y
            .get(&key_with_step(history, l, trt))
            .unwrap_or(&MISSING)
    }
}

/// First reachable key absent from the document, if any.
fn source_error(doc: &DgmDocument) -> Option<OracleError> {
    for (i, interval) in doc.intervals.iter().enumerate() {
        let k = i + 1;
        let hists = (3 * doc.levels).pow(k as u32 - 1);
        for hist in 0..hists {
            let steps = decode(hist, k - 1, doc.levels);
            let Some(was_treated) = treated(&steps) else {
                continue;
            };
            let token = history_token(&steps);
            if !interval.l.contains_key(&token) {
                return Some(OracleError::MissingEntry { k, key: token });
            }
            for l in 0..doc.levels {
                let key = key_with_l(&steps, l);
                if !was_treated {
                    let tables = [Some(&interval.b), Some(&interval.h), interval.c.as_ref()];
                    if tables.iter().flatten().any(|t| !t.contains_key(&key)) {
                        return Some(OracleError::MissingEntry { k, key });
                    }
                }
                for trt in Trt::ALL {
                    if was_treated && trt != Trt::None {
                        continue;
                    }
                    let key = key_with_step(&steps, l, trt);
                    if !interval.y.contains_key(&key) {
                        return Some(OracleError::MissingEntry { k, key });
                    }
                }
            }
        }
    }
    None
}

/// Treatment rule for the deterministic comparison regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StaticRule {
    Never,
    AllEligible,
    Natural,
}

impl StaticRule {
    fn arm<T: Scalar>(self) -> ArmResolution<T> {
        match self {
            StaticRule::Natural => ArmResolution::identity(),
            StaticRule::Never => ArmResolution {
                beth: true,
                scale: T::zero(),
                ..ArmResolution::identity()
            },
            StaticRule::AllEligible => ArmResolution {
                aleph: false,
                beth: false,
                scale: T::zero(),
                ..ArmResolution::identity()
            },
        }
    }
}

/// Per-interval output of the forward route.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleStep<T> {
    pub k: usize,
    pub b: ArmResolution<T>,
    pub h: ArmResolution<T>,
    /// `P(B_k^{g+} = 1)`.
    pub b_post: T,
    /// `P(H_k^{g+} = 1)`.
    pub h_post: T,
    /// Marginal hazard among survivors.
    pub hazard: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRisk<T> {
    /// Cumulative risk at `k = 1..K`.
    pub risk: Vec<T>,
    pub steps: Vec<OracleStep<T>>,
}

trait Policy<T> {
    fn b(&mut self, k: usize, natural: T, eligible: T) -> Result<ArmResolution<T>, OracleError>;
    fn h(&mut self, k: usize, natural: T, eligible: T) -> Result<ArmResolution<T>, OracleError>;
}

struct FixedPolicy<T> {
    b: ArmResolution<T>,
    h: ArmResolution<T>,
}

impl<T: Scalar> Policy<T> for FixedPolicy<T> {
    fn b(&mut self, _: usize, natural: T, eligible: T) -> Result<ArmResolution<T>, OracleError> {
        Ok(ArmResolution {
            natural,
            eligible,
            ..self.b
        })
    }
    fn h(&mut self, _: usize, natural: T, eligible: T) -> Result<ArmResolution<T>, OracleError> {
        Ok(ArmResolution {
            natural,
            eligible,
            ..self.h
        })
    }
}

struct RegimePolicy<'a, T> {
    regime: &'a RegimeSpec,
    variant: Variant,
    observed: &'a [(T, T)],
}

impl<T: Scalar> Policy<T> for RegimePolicy<'_, T> {
    fn b(&mut self, k: usize, natural: T, eligible: T) -> Result<ArmResolution<T>, OracleError> {
        let q = T::lit(self.regime.q_at(k as u32));
        Ok(resolve_arm(q, self.observed[k - 1].0, natural, eligible, self.variant)?)
    }
    fn h(&mut self, k: usize, natural: T, eligible: T) -> Result<ArmResolution<T>, OracleError> {
        let m = T::lit(self.regime.m_at(k as u32));
        Ok(resolve_arm(m, self.observed[k - 1].1, natural, eligible, self.variant)?)
    }
}

fn density<T: Scalar>(arm: &ArmResolution<T>, f: T, k: usize) -> Result<T, OracleError> {
    let p = arm.intervened_prob(f);
    let slack = T::lit(PROB_SLACK);
    if !p.is_finite() || p < -slack || p > T::one() + slack {
        return Err(OracleError::NegativeInterventionDensity { k, value: p.as_f64() });
    }
    Ok(p)
}

#[derive(Clone, Copy)]
struct FwdState<T> {
    hist: usize,
    treated: bool,
    mass: T,
}

/// Forward propagation of the intervened distribution with censoring abolished.
fn propagate<T: Scalar>(
    dgm: &DiscreteDgm<T>,
    horizon: usize,
    policy: &mut dyn Policy<T>,
) -> Result<OracleRisk<T>, OracleError> {
    let levels = dgm.levels;
    let mut states = vec![FwdState {
        hist: 0,
        treated: false,
        mass: T::one(),
    }];
    let mut risk = Vec::with_capacity(horizon);
    let mut steps = Vec::with_capacity(horizon);
    let mut dead = CompensatedSum::new();
    for k in 1..=horizon {
        // (state, l, mass)
        let mut cells = Vec::with_capacity(states.len() * levels);
        for s in &states {
            for l in 0..levels {
                let m = s.mass * dgm.l_prob(k, s.hist, l);
                if m > T::zero() {
                    cells.push((*s, l, m));
                }
            }
        }
        let mut elig = CompensatedSum::new();
        let mut nat_b = CompensatedSum::new();
        for (s, l, m) in &cells {
            if !s.treated {
                elig.add(*m);
                nat_b.add(*m * dgm.b_prob(k, s.hist, *l));
            }
        }
        let arm_b = policy.b(k, nat_b.value(), elig.value())?;
        let mut b_star = Vec::with_capacity(cells.len());
        let mut s_mass = CompensatedSum::new();
        let mut nat_h = CompensatedSum::new();
        let mut b_post = CompensatedSum::new();
        for (s, l, m) in &cells {
            let pb = if s.treated {
                T::zero()
            } else {
                density(&arm_b, dgm.b_prob(k, s.hist, *l), k)?
            };
            b_star.push(pb);
            if !s.treated {
                b_post.add(*m * pb);
                let untreated = *m * (T::one() - pb);
                s_mass.add(untreated);
                nat_h.add(untreated * dgm.h_prob(k, s.hist, *l));
            }
        }
        let arm_h = policy.h(k, nat_h.value(), s_mass.value())?;
        let mut next = Vec::with_capacity(cells.len() * 3);
        let mut h_post = CompensatedSum::new();
        let mut deaths = CompensatedSum::new();
        let mut alive = CompensatedSum::new();
        for ((s, l, m), pb) in cells.iter().zip(&b_star) {
            alive.add(*m);
            let branches: Vec<(Trt, T)> = if s.treated {
                vec![(Trt::None, *m)]
            } else {
                let ph = density(&arm_h, dgm.h_prob(k, s.hist, *l), k)?;
                let untreated = *m * (T::one() - *pb);
                h_post.add(untreated * ph);
                vec![
                    (Trt::B, *m * *pb),
                    (Trt::H, untreated * ph),
                    (Trt::None, untreated * (T::one() - ph)),
                ]
            };
            for (trt, mt) in branches {
                if mt == T::zero() {
                    continue;
                }
                let fy = dgm.y_prob(k, s.hist, *l, trt);
                deaths.add(mt * fy);
                let survive = mt * (T::one() - fy);
                if survive > T::zero() {
                    next.push(FwdState {
                        hist: dgm.next_history(s.hist, *l, trt),
                        treated: s.treated || trt != Trt::None,
                        mass: survive,
                    });
                }
            }
        }
        let d = deaths.value();
        dead.add(d);
        let a = alive.value();
        steps.push(OracleStep {
            k,
            b: arm_b,
            h: arm_h,
            b_post: b_post.value(),
            h_post: h_post.value(),
            hazard: if a > T::zero() { d / a } else { T::zero() },
        });
        risk.push(dead.value());
        states = next;
    }
    Ok(OracleRisk { risk, steps })
}

fn check_horizon<T: Scalar>(dgm: &DiscreteDgm<T>, horizon: usize, bound: usize) -> Result<(), OracleError> {
    if horizon == 0 || horizon > dgm.horizon {
        return Err(OracleError::Shape(format!(
            "horizon {horizon} outside 1..={}",
            dgm.horizon
        )));
    }
    dgm.check_bound(bound)
}

/// Factual utilization `(P(B_k = 1), P(H_k = 1))` under the natural course
/// with censoring abolished.
pub fn factual_utilization<T: Scalar>(
    dgm: &DiscreteDgm<T>,
    horizon: usize,
) -> Result<Vec<(T, T)>, OracleError> {
    let mut policy = FixedPolicy {
        b: ArmResolution::identity(),
        h: ArmResolution::identity(),
    };
    let run = propagate(dgm, horizon, &mut policy)?;
    Ok(run.steps.iter().map(|s| (s.b_post, s.h_post)).collect())
}

/// Factual cumulative incidence with censoring abolished.
pub fn factual_risk<T: Scalar>(dgm: &DiscreteDgm<T>, horizon: usize) -> Result<Vec<T>, OracleError> {
    let mut policy = FixedPolicy {
        b: ArmResolution::identity(),
        h: ArmResolution::identity(),
    };
    Ok(propagate(dgm, horizon, &mut policy)?.risk)
}

/// Counterfactual risk by forward propagation of the intervened distribution.
pub fn gformula_risk<T: Scalar>(
    dgm: &DiscreteDgm<T>,
    regime: &RegimeSpec,
    horizon: usize,
    variant: Variant,
    bound: usize,
) -> Result<OracleRisk<T>, OracleError> {
    check_horizon(dgm, horizon, bound)?;
    regime.validate(horizon as u32)?;
    let observed = factual_utilization(dgm, horizon)?;
    let mut policy = RegimePolicy {
        regime,
        variant,
        observed: &observed,
    };
    propagate(dgm, horizon, &mut policy)
}

/// Risk under a deterministic rule for each treatment.
pub fn static_regime_risk<T: Scalar>(
    dgm: &DiscreteDgm<T>,
    b: StaticRule,
    h: StaticRule,
    horizon: usize,
    bound: usize,
) -> Result<OracleRisk<T>, OracleError> {
    check_horizon(dgm, horizon, bound)?;
    let mut policy = FixedPolicy {
        b: b.arm(),
        h: h.arm(),
    };
    propagate(dgm, horizon, &mut policy)
}

/// How the baseline covariate stratifies the hazard representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VPartition {
    Empty,
    FirstL,
}

/// Per-interval output of the weighted route.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedStep<T> {
    pub k: usize,
    pub b: ArmResolution<T>,
    pub h: ArmResolution<T>,
    /// `E[W B_k]` with `W = W_{B,k} W_{H,k−1} W_{C,k−1}`.
    pub b_achieved: T,
    /// `E[W H_k]` with `W = W_{B,k} W_{H,k} W_{C,k−1}`.
    pub h_achieved: T,
    /// Weighted hazard per stratum of `V`.
    pub hazard: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HazardRepr<T> {
    pub risk: Vec<T>,
    pub steps: Vec<WeightedStep<T>>,
    /// `P(V = v)`.
    pub v_mass: Vec<T>,
}

#[derive(Clone, Copy)]
struct WState<T> {
    hist: usize,
    treated: bool,
    v: usize,
    mass: T,
    wb: T,
    wh: T,
    wc: T,
}

/// Counterfactual risk from the weighted factual distribution:
/// `Σ_v P(v) Σ_k λ_k(v) Π_{j<k} (1 − λ_j(v))`.
pub fn gformula_hazard_repr<T: Scalar>(
    dgm: &DiscreteDgm<T>,
    regime: &RegimeSpec,
    horizon: usize,
    partition: VPartition,
    variant: Variant,
    bound: usize,
) -> Result<HazardRepr<T>, OracleError> {
    check_horizon(dgm, horizon, bound)?;
    regime.validate(horizon as u32)?;
    let levels = dgm.levels;
    let n_v = match partition {
        VPartition::Empty => 1,
        VPartition::FirstL => levels,
    };
    let mut states = vec![WState {
        hist: 0,
        treated: false,
        v: 0,
        mass: T::one(),
        wb: T::one(),
        wh: T::one(),
        wc: T::one(),
    }];
    let mut steps = Vec::with_capacity(horizon);
    let mut v_mass = vec![T::zero(); n_v];
    for k in 1..=horizon {
        let mut cells = Vec::with_capacity(states.len() * levels);
        for s in &states {
            for l in 0..levels {
                let m = s.mass * dgm.l_prob(k, s.hist, l);
                if m > T::zero() {
                    let v = if k == 1 && partition == VPartition::FirstL {
                        l
                    } else {
                        s.v
                    };
                    if k == 1 {
                        v_mass[v] += m;
                    }
                    cells.push((WState { v, ..*s }, l, m));
                }
            }
        }
        let (mut obs_b, mut obs_h) = (CompensatedSum::new(), CompensatedSum::new());
        let (mut pi_r, mut nat_b) = (CompensatedSum::new(), CompensatedSum::new());
        for (s, l, m) in &cells {
            if s.treated {
                continue;
            }
            let fb = dgm.b_prob(k, s.hist, *l);
            let fh = dgm.h_prob(k, s.hist, *l);
            obs_b.add(*m * fb * s.wc);
            obs_h.add(*m * (T::one() - fb) * fh * s.wc);
            let w = s.wb * s.wh * s.wc;
            pi_r.add(*m * w);
            nat_b.add(*m * fb * w);
        }
        let arm_b = resolve_arm(
            T::lit(regime.q_at(k as u32)),
            obs_b.value(),
            nat_b.value(),
            pi_r.value(),
            variant,
        )?;
        // (state with updated wb, l, b, mass)
        let mut after_b = Vec::with_capacity(cells.len() * 2);
        let mut b_ach = CompensatedSum::new();
        for (s, l, m) in &cells {
            if s.treated {
                after_b.push((*s, *l, false, *m));
                continue;
            }
            let fb = dgm.b_prob(k, s.hist, *l);
            density(&arm_b, fb, k)?;
            for (b, pb) in [(true, fb), (false, T::one() - fb)] {
                let mb = *m * pb;
                if mb == T::zero() {
                    continue;
                }
                let factor = arm_b
                    .weight_factor(fb, b)
                    .ok_or(OracleError::NegativeInterventionDensity { k, value: f64::NAN })?;
                let st = WState {
                    wb: s.wb * factor,
                    ..*s
                };
                if b {
                    b_ach.add(mb * st.wb * st.wh * st.wc);
                }
                after_b.push((st, *l, b, mb));
            }
        }
        let (mut pi_s, mut nat_h) = (CompensatedSum::new(), CompensatedSum::new());
        for (s, l, b, m) in &after_b {
            if s.treated || *b {
                continue;
            }
            let w = s.wb * s.wh * s.wc;
            pi_s.add(*m * w);
            nat_h.add(*m * dgm.h_prob(k, s.hist, *l) * w);
        }
        let arm_h = resolve_arm(
            T::lit(regime.m_at(k as u32)),
            obs_h.value(),
            nat_h.value(),
            pi_s.value(),
            variant,
        )?;
        let mut h_ach = CompensatedSum::new();
        let mut num = vec![CompensatedSum::new(); n_v];
        let mut den = vec![CompensatedSum::new(); n_v];
        let mut next = Vec::with_capacity(after_b.len() * 2);
        for (s, l, b, m) in &after_b {
            let branches: Vec<(Trt, T, T)> = if s.treated {
                vec![(Trt::None, *m, s.wh)]
            } else if *b {
                vec![(Trt::B, *m, s.wh)]
            } else {
                let fh = dgm.h_prob(k, s.hist, *l);
                density(&arm_h, fh, k)?;
                let mut out = Vec::with_capacity(2);
                for (h, ph) in [(true, fh), (false, T::one() - fh)] {
                    let mh = *m * ph;
                    if mh == T::zero() {
                        continue;
                    }
                    let factor = arm_h
                        .weight_factor(fh, h)
                        .ok_or(OracleError::NegativeInterventionDensity { k, value: f64::NAN })?;
                    let wh = s.wh * factor;
                    if h {
                        h_ach.add(mh * s.wb * wh * s.wc);
                    }
                    out.push((if h { Trt::H } else { Trt::None }, mh, wh));
                }
                out
            };
            for (trt, mt, wh) in branches {
                let censor_eligible = !s.treated && trt == Trt::None;
                let (mass, wc) = if censor_eligible && dgm.censoring {
                    let pc = dgm.c_prob(k, s.hist, *l);
                    let kept = T::one() - pc;
                    if kept == T::zero() {
                        continue;
                    }
                    let wc = if regime.abolish_censoring {
                        s.wc / kept
                    } else {
                        s.wc
                    };
                    (mt * kept, wc)
                } else {
                    (mt, s.wc)
                };
                if mass == T::zero() {
                    continue;
                }
                let w = s.wb * wh * wc;
                let fy = dgm.y_prob(k, s.hist, *l, trt);
                num[s.v].add(mass * w * fy);
                den[s.v].add(mass * w);
                let survive = mass * (T::one() - fy);
                if survive > T::zero() {
                    next.push(WState {
                        hist: dgm.next_history(s.hist, *l, trt),
                        treated: s.treated || trt != Trt::None,
                        v: s.v,
                        mass: survive,
                        wb: s.wb,
                        wh,
                        wc,
                    });
                }
            }
        }
        let hazard = num
            .iter()
            .zip(&den)
            .map(|(n, d)| {
                let d = d.value();
                if d > T::zero() {
                    n.value() / d
                } else {
                    T::zero()
                }
            })
            .collect();
        steps.push(WeightedStep {
            k,
            b: arm_b,
            h: arm_h,
            b_achieved: b_ach.value(),
            h_achieved: h_ach.value(),
            hazard,
        });
        states = next;
    }
    let mut risk = Vec::with_capacity(horizon);
    let mut per_v: Vec<(CompensatedSum<T>, T)> = vec![(CompensatedSum::new(), T::one()); n_v];
    for step in &steps {
        let mut total = CompensatedSum::new();
        for (v, (acc, surv)) in per_v.iter_mut().enumerate() {
            acc.add(step.hazard[v] * *surv);
            *surv *= T::one() - step.hazard[v];
            total.add(v_mass[v] * acc.value());
        }
        risk.push(total.value());
    }
    Ok(HazardRepr {
        risk,
        steps,
        v_mass,
    })
}

/// Achieved versus targeted utilization at one interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintCheck<T> {
    pub k: usize,
    pub b: ArmResolution<T>,
    pub h: ArmResolution<T>,
    pub b_achieved: T,
    pub h_achieved: T,
}

impl<T: Scalar> ConstraintCheck<T> {
    pub fn max_deviation(&self) -> T {
        (self.b_achieved - self.b.target)
            .abs()
            .max((self.h_achieved - self.h.target).abs())
    }
}

/// Exact weighted utilization against the resolved targets.
pub fn check_constraints<T: Scalar>(
    dgm: &DiscreteDgm<T>,
    regime: &RegimeSpec,
    horizon: usize,
    variant: Variant,
    bound: usize,
) -> Result<Vec<ConstraintCheck<T>>, OracleError> {
    let repr = gformula_hazard_repr(dgm, regime, horizon, VPartition::Empty, variant, bound)?;
    Ok(repr
        .steps
        .iter()
        .map(|s| ConstraintCheck {
            k: s.k,
            b: s.b,
            h: s.h,
            b_achieved: s.b_achieved,
            h_achieved: s.h_achieved,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regime::preset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, horizon: usize, censoring: bool) -> DiscreteDgm<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DiscreteDgm::random(&mut rng, horizon, 2, censoring, &RandomRanges::default()).unwrap()
    }

    struct Flat {
        y: f64,
    }

    impl CptSource for Flat {
        fn l(&self, _: &[Step]) -> Vec<f64> {
            vec![0.5, 0.5]
        }
        fn b(&self, _: &[Step], _: usize) -> f64 {
            0.3
        }
        fn h(&self, _: &[Step], _: usize) -> f64 {
            0.2
        }
        fn y(&self, _: &[Step], _: usize, _: Trt) -> f64 {
            self.y
        }
    }

    #[test]
    fn zero_hazard_gives_zero_risk() {
        let dgm: DiscreteDgm<f64> =
            DiscreteDgm::from_source(3, 2, &Flat { y: 0.0 }, DEFAULT_STATE_BOUND).unwrap();
        let r = gformula_risk(&dgm, &preset("g1").unwrap(), 3, Variant::Generalized, DEFAULT_STATE_BOUND)
            .unwrap();
        assert!(r.risk.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn g0_matches_factual_risk() {
        let dgm = random(3, 3, false);
        let g0 = gformula_risk(&dgm, &preset("g0").unwrap(), 3, Variant::Generalized, DEFAULT_STATE_BOUND)
            .unwrap();
        let fact = factual_risk(&dgm, 3).unwrap();
        for (a, b) in g0.risk.iter().zip(&fact) {
            assert!((a - b).abs() < 1e-14);
        }
        for s in &g0.steps {
            assert!((s.b.scale - 1.0).abs() < 1e-12 && (s.h.scale - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_hazard_risk() {
        let dgm: DiscreteDgm<f64> =
            DiscreteDgm::from_source(3, 2, &Flat { y: 0.1 }, DEFAULT_STATE_BOUND).unwrap();
        let r = factual_risk(&dgm, 3).unwrap();
        assert!((r[2] - (1.0 - 0.9_f64.powi(3))).abs() < 1e-15);
    }

    #[test]
    fn representations_agree_with_censoring() {
        for seed in 0..5 {
            let dgm = random(seed, 3, true);
            for regime in [
                preset("g0").unwrap(),
                preset("g1").unwrap(),
                RegimeSpec::new("x", 1.7, 0.4),
            ] {
                let a = gformula_risk(&dgm, &regime, 3, Variant::Generalized, DEFAULT_STATE_BOUND)
                    .unwrap();
                for part in [VPartition::Empty, VPartition::FirstL] {
                    let b = gformula_hazard_repr(
                        &dgm,
                        &regime,
                        3,
                        part,
                        Variant::Generalized,
                        DEFAULT_STATE_BOUND,
                    )
                    .unwrap();
                    for (x, y) in a.risk.iter().zip(&b.risk) {
                        assert!((x - y).abs() < 1e-12, "seed {seed}: {x} vs {y}");
                    }
                }
            }
        }
    }

    #[test]
    fn one_interval_hazard_is_weighted_mean() {
        let dgm = random(11, 1, false);
        let g0 = preset("g0").unwrap();
        let repr =
            gformula_hazard_repr(&dgm, &g0, 1, VPartition::Empty, Variant::Generalized, DEFAULT_STATE_BOUND)
                .unwrap();
        let fact = factual_risk(&dgm, 1).unwrap();
        assert!((repr.steps[0].hazard[0] - fact[0]).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip_and_corruption() {
        let dgm = random(5, 2, true);
        let text = dgm.to_json();
        let back = DiscreteDgm::<f64>::from_json(&text, DEFAULT_STATE_BOUND).unwrap();
        assert_eq!(back, dgm);
        let mut doc = dgm.to_document();
        doc.intervals[0].l.insert(String::new(), vec![0.7, 0.7]);
        assert!(matches!(
            DiscreteDgm::<f64>::from_document(&doc, DEFAULT_STATE_BOUND),
            Err(OracleError::InvalidCpt { .. })
        ));
        let mut doc = dgm.to_document();
        doc.intervals[1].y.remove("0n.1h");
        assert!(matches!(
            DiscreteDgm::<f64>::from_document(&doc, DEFAULT_STATE_BOUND),
            Err(OracleError::MissingEntry { .. })
        ));
        let mut doc = dgm.to_document();
        doc.intervals[1].b.insert("0b.1".into(), 0.5);
        assert!(matches!(
            DiscreteDgm::<f64>::from_document(&doc, DEFAULT_STATE_BOUND),
            Err(OracleError::UnexpectedEntry { .. })
        ));
    }

    #[test]
    fn state_bound() {
        let dgm = random(1, 3, false);
        assert!(matches!(
            gformula_risk(&dgm, &preset("g0").unwrap(), 3, Variant::Generalized, 10),
            Err(OracleError::StateSpaceTooLarge { .. })
        ));
    }

    #[test]
    fn single_precision_agrees() {
        let dgm = random(9, 2, false);
        let g1 = preset("g1").unwrap();
        let a = gformula_risk(&dgm, &g1, 2, Variant::Generalized, DEFAULT_STATE_BOUND).unwrap();
        let b = gformula_risk(&dgm.cast::<f32>(), &g1, 2, Variant::Generalized, DEFAULT_STATE_BOUND)
            .unwrap();
        assert!((a.risk[1] - f64::from(b.risk[1])).abs() < 1e-5);
    }

    #[test]
    fn probabilities_of_trajectories_sum_to_one() {
        let dgm = random(21, 3, false);
        let r = gformula_risk(&dgm, &RegimeSpec::new("x", 0.5, 1.8), 3, Variant::Generalized, DEFAULT_STATE_BOUND)
            .unwrap();
        assert!(r.risk.windows(2).all(|w| w[0] <= w[1]));
        assert!(r.risk[2] <= 1.0);
    }
}
