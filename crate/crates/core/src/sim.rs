//! Synthetic panels from a [`DiscreteDgm`] or a transplant-like parametric
//! generator, plus a Monte Carlo sampler of the intervened distribution.
//!
//! Every uniform draw is keyed by `(seed, subject, interval, slot)` on a
//! counter-based ChaCha stream, so output does not depend on thread
//! scheduling or on how many subjects are drawn.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CovariateSpec, DataError, PanelDataset, PanelRecord, PanelSchema, Timing};
use crate::oracle::{DiscreteDgm, OracleError, OracleStep, Trt};
use crate::regime::ArmResolution;
use crate::scalar::{expit, CompensatedSum};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulation needs at least one subject")]
    NoSubjects,
    #[error("horizon {requested} outside 1..={max}")]
    Horizon { requested: usize, max: usize },
    #[error("{0} intervention arms given for horizon {1}")]
    Arms(usize, usize),
    #[error("interval {k}: intervention density {value} outside [0, 1]")]
    InvalidDensity { k: usize, value: f64 },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Draw slots per interval; each slot owns four 64-bit words so rejection
/// samplers rarely spill into the next slot.
const SLOTS: u64 = 16;

/// Reproducible per-subject uniform source.
pub struct SubjectStream {
    rng: ChaCha8Rng,
}

impl SubjectStream {
    pub fn new(seed: u64, subject: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(subject);
        Self { rng }
    }

    /// Uniform on `[0, 1)` for `(k, slot)`.
    pub fn uniform(&mut self, k: usize, slot: u64) -> f64 {
        debug_assert!(slot < SLOTS);
        self.rng.set_word_pos(u128::from((k as u64 * SLOTS + slot) * 8));
        // 53 random mantissa bits
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn bernoulli(&mut self, k: usize, slot: u64, p: f64) -> bool {
        self.uniform(k, slot) < p
    }

    pub fn normal(&mut self, k: usize, slot: u64) -> f64 {
        self.rng.set_word_pos(u128::from((k as u64 * SLOTS + slot) * 8));
        StandardNormal.sample(&mut self.rng)
    }

    /// Index drawn from a discrete distribution by inversion.
    pub fn categorical(&mut self, k: usize, slot: u64, probs: &[f64]) -> usize {
        let u = self.uniform(k, slot);
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }
}

mod slot {
    pub const L: u64 = 0;
    pub const B: u64 = 1;
    pub const H: u64 = 2;
    pub const C: u64 = 3;
    pub const Y: u64 = 4;
    pub const AGE: u64 = 5;
    pub const SEX: u64 = 6;
    pub const EXCEPTION: u64 = 7;
}

/// Schema of panels drawn from a [`DiscreteDgm`]: one numeric time-varying `L`.
pub fn dgm_schema() -> PanelSchema {
    PanelSchema::new(vec![CovariateSpec::numeric("L", Timing::TimeVarying)])
}

/// Where subjects come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Generator {
    Dgm(DiscreteDgm<f64>),
    Transplant(TransplantGenerator),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub horizon: usize,
    pub seed: u64,
    pub generator: Generator,
}

fn dgm_subject(
    dgm: &DiscreteDgm<f64>,
    horizon: usize,
    stream: &mut SubjectStream,
) -> Vec<PanelRecord> {
    let mut out = Vec::with_capacity(horizon);
    let mut hist = 0;
    let mut treated = false;
    for k in 1..=horizon {
        let l = stream.categorical(k, slot::L, dgm.l_dist(k, hist));
        let cpt = dgm.cpt(k, hist, l);
        let mut trt = Trt::None;
        if !treated {
            if stream.bernoulli(k, slot::B, cpt.b) {
                trt = Trt::B;
            } else if stream.bernoulli(k, slot::H, cpt.h) {
                trt = Trt::H;
            }
        }
        let x = vec![l as f64];
        let (b, h) = (trt == Trt::B, trt == Trt::H);
        if dgm.has_censoring() && !treated && trt == Trt::None && stream.bernoulli(k, slot::C, cpt.c) {
            out.push(PanelRecord::new(k as u32, x, b, h, true, false));
            break;
        }
        let y = stream.bernoulli(k, slot::Y, cpt.y[trt as usize]);
        out.push(PanelRecord::new(k as u32, x, b, h, false, y));
        if y {
            break;
        }
        hist = dgm.next_history(hist, l, trt);
        treated |= trt != Trt::None;
    }
    out
}

fn assemble(
    schema: PanelSchema,
    subjects: Vec<Vec<PanelRecord>>,
) -> Result<PanelDataset, SimError> {
    let records = subjects
        .into_iter()
        .enumerate()
        .flat_map(|(i, recs)| {
            let id = (i + 1).to_string();
            recs.into_iter().map(move |r| (id.clone(), r))
        })
        .collect();
    Ok(PanelDataset::from_records(schema, records)?)
}

/// Draw an observational panel.
pub fn sample_panel(cfg: &SimConfig) -> Result<PanelDataset, SimError> {
    if cfg.n == 0 {
        return Err(SimError::NoSubjects);
    }
    match &cfg.generator {
        Generator::Dgm(dgm) => {
            if cfg.horizon == 0 || cfg.horizon > dgm.horizon() {
                return Err(SimError::Horizon {
                    requested: cfg.horizon,
                    max: dgm.horizon(),
                });
            }
            let subjects = (0..cfg.n)
                .into_par_iter()
                .map(|i| dgm_subject(dgm, cfg.horizon, &mut SubjectStream::new(cfg.seed, i as u64)))
                .collect();
            assemble(dgm_schema(), subjects)
        }
        Generator::Transplant(g) => {
            if cfg.horizon == 0 {
                return Err(SimError::Horizon {
                    requested: 0,
                    max: usize::MAX,
                });
            }
            let subjects = (0..cfg.n)
                .into_par_iter()
                .map(|i| g.subject(cfg.horizon, &mut SubjectStream::new(cfg.seed, i as u64)))
                .collect();
            assemble(TransplantGenerator::schema(), subjects)
        }
    }
}

/// Monte Carlo estimate of the counterfactual cumulative incidence.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloRisk {
    pub risk: Vec<f64>,
    /// Binomial standard error per interval.
    pub se: Vec<f64>,
    pub draws: usize,
    /// Subjects assigned each treatment under the intervention.
    pub b_assigned: usize,
    pub h_assigned: usize,
}

fn intervened(arm: &ArmResolution<f64>, f: f64, k: usize) -> Result<f64, SimError> {
    let p = arm.intervened_prob(f);
    if !(-1e-12..=1.0 + 1e-12).contains(&p) {
        return Err(SimError::InvalidDensity { k, value: p });
    }
    Ok(p.clamp(0.0, 1.0))
}

/// Draw subjects directly from the intervened densities implied by the
/// resolved arms (censoring abolished) and report the empirical risk.
pub fn sample_interventional(
    dgm: &DiscreteDgm<f64>,
    arms: &[OracleStep<f64>],
    n: usize,
    seed: u64,
) -> Result<MonteCarloRisk, SimError> {
    if n == 0 {
        return Err(SimError::NoSubjects);
    }
    let horizon = arms.len();
    if horizon == 0 || horizon > dgm.horizon() {
        return Err(SimError::Arms(horizon, dgm.horizon()));
    }
    // (death interval or 0, treatment assigned)
    let draws: Vec<(usize, Trt)> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<(usize, Trt), SimError> {
            let mut stream = SubjectStream::new(seed, i as u64);
            let mut hist = 0;
            let mut assigned = Trt::None;
            for (step, k) in arms.iter().zip(1..) {
                let l = stream.categorical(k, slot::L, dgm.l_dist(k, hist));
                let cpt = dgm.cpt(k, hist, l);
                let mut trt = Trt::None;
                if assigned == Trt::None {
                    if stream.bernoulli(k, slot::B, intervened(&step.b, cpt.b, k)?) {
                        trt = Trt::B;
                    } else if stream.bernoulli(k, slot::H, intervened(&step.h, cpt.h, k)?) {
                        trt = Trt::H;
                    }
                }
                if stream.bernoulli(k, slot::Y, cpt.y[trt as usize]) {
                    return Ok((k, assigned.max(trt)));
                }
                hist = dgm.next_history(hist, l, trt);
                if trt != Trt::None {
                    assigned = trt;
                }
            }
            Ok((0, assigned))
        })
        .collect::<Result<_, _>>()?;
    let mut deaths = vec![0usize; horizon + 1];
    let (mut nb, mut nh) = (0, 0);
    for (k, trt) in &draws {
        deaths[*k] += 1;
        match trt {
            Trt::B => nb += 1,
            Trt::H => nh += 1,
            Trt::None => {}
        }
    }
    let mut risk = Vec::with_capacity(horizon);
    let mut se = Vec::with_capacity(horizon);
    let mut cum = 0;
    for d in &deaths[1..] {
        cum += d;
        let p = cum as f64 / n as f64;
        risk.push(p);
        se.push((p * (1.0 - p) / n as f64).sqrt());
    }
    Ok(MonteCarloRisk {
        risk,
        se,
        draws: n,
        b_assigned: nb,
        h_assigned: nh,
    })
}

/// Waitlist-like generator: baseline age, sex and exception status, a
/// drifting severity score, and logistic hazards for the two treatments,
/// censoring and death.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransplantGenerator {
    pub age_mean: f64,
    pub age_sd: f64,
    pub female_prob: f64,
    pub exception_prob: f64,
    pub meld_mean: f64,
    pub meld_sd: f64,
    pub meld_drift: f64,
    pub meld_step_sd: f64,
    /// Intercept, meld, exception.
    pub b_coef: [f64; 3],
    /// Intercept, meld, age.
    pub h_coef: [f64; 3],
    /// Intercept, meld, age.
    pub c_coef: [f64; 3],
    /// Intercept, meld, age, female.
    pub y_coef: [f64; 4],
    /// Log-odds shift in the death hazard once treated.
    pub b_effect: f64,
    pub h_effect: f64,
}

impl Default for TransplantGenerator {
    fn default() -> Self {
        Self {
            age_mean: 52.0,
            age_sd: 11.0,
            female_prob: 0.35,
            exception_prob: 0.15,
            meld_mean: 20.0,
            meld_sd: 6.0,
            meld_drift: 0.25,
            meld_step_sd: 1.2,
            b_coef: [-3.0, 0.08, 0.6],
            h_coef: [-3.8, 0.05, 0.01],
            c_coef: [-4.6, -0.04, 0.015],
            y_coef: [-4.2, 0.14, 0.02, -0.1],
            b_effect: -1.2,
            h_effect: -0.5,
        }
    }
}

const MELD_RANGE: (f64, f64) = (6.0, 40.0);

impl TransplantGenerator {
    pub fn schema() -> PanelSchema {
        PanelSchema::new(vec![
            CovariateSpec::numeric("age", Timing::Baseline),
            CovariateSpec::numeric("female", Timing::Baseline),
            CovariateSpec::categorical("exception", &["no", "yes"], "no", Timing::Baseline),
            CovariateSpec::numeric("meld", Timing::TimeVarying),
        ])
    }

    fn subject(&self, horizon: usize, stream: &mut SubjectStream) -> Vec<PanelRecord> {
        let age = self.age_mean + self.age_sd * stream.normal(0, slot::AGE);
        let female = f64::from(u8::from(stream.bernoulli(0, slot::SEX, self.female_prob)));
        let exception = f64::from(u8::from(stream.bernoulli(0, slot::EXCEPTION, self.exception_prob)));
        let mut meld = (self.meld_mean + self.meld_sd * stream.normal(0, slot::L))
            .clamp(MELD_RANGE.0, MELD_RANGE.1);
        let mut treated = Trt::None;
        let mut out = Vec::with_capacity(horizon);
        for k in 1..=horizon {
            if k > 1 {
                meld = (meld + self.meld_drift + self.meld_step_sd * stream.normal(k, slot::L))
                    .clamp(MELD_RANGE.0, MELD_RANGE.1);
            }
            let dm = meld - self.meld_mean;
            let da = age - self.age_mean;
            let x = vec![age, female, exception, meld];
            let mut trt = Trt::None;
            if treated == Trt::None {
                let [b0, b1, b2] = self.b_coef;
                let [h0, h1, h2] = self.h_coef;
                if stream.bernoulli(k, slot::B, expit(b0 + b1 * dm + b2 * exception)) {
                    trt = Trt::B;
                } else if stream.bernoulli(k, slot::H, expit(h0 + h1 * dm + h2 * da)) {
                    trt = Trt::H;
                }
                if trt == Trt::None {
                    let [c0, c1, c2] = self.c_coef;
                    if stream.bernoulli(k, slot::C, expit(c0 + c1 * dm + c2 * da)) {
                        out.push(PanelRecord::new(k as u32, x, false, false, true, false));
                        break;
                    }
                }
            }
            if trt != Trt::None {
                treated = trt;
            }
            let [y0, y1, y2, y3] = self.y_coef;
            let shift = match treated {
                Trt::None => 0.0,
                Trt::B => self.b_effect,
                Trt::H => self.h_effect,
            };
            let y = stream.bernoulli(k, slot::Y, expit(y0 + y1 * dm + y2 * da + y3 * female + shift));
            out.push(PanelRecord::new(
                k as u32,
                x,
                trt == Trt::B,
                trt == Trt::H,
                false,
                y,
            ));
            if y {
                break;
            }
        }
        out
    }
}

/// Empirical mean of `f` over records at interval `k`, used by large-sample checks.
pub fn empirical_rate(
    panel: &PanelDataset,
    k: u32,
    filter: impl Fn(&PanelRecord) -> bool + Sync,
    event: impl Fn(&PanelRecord) -> bool + Sync,
) -> (f64, usize) {
    let mut hits = CompensatedSum::new();
    let mut n = 0;
    for s in panel.subjects() {
        if let Some(r) = s.records.get(k as usize - 1) {
            if filter(r) {
                n += 1;
                hits.add(f64::from(u8::from(event(r))));
            }
        }
    }
    (if n > 0 { hits.value() / n as f64 } else { f64::NAN }, n)
}

/// A fresh random [`DiscreteDgm`] seeded deterministically.
pub fn seeded_dgm(
    seed: u64,
    horizon: usize,
    levels: usize,
    censoring: bool,
    ranges: &crate::oracle::RandomRanges,
) -> Result<DiscreteDgm<f64>, OracleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DiscreteDgm::random(&mut rng, horizon, levels, censoring, ranges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{factual_risk, gformula_risk, CptSource, RandomRanges, Step, DEFAULT_STATE_BOUND};
    use crate::regime::{preset, Variant};

    struct NoDeath;

    impl CptSource for NoDeath {
        fn l(&self, _: &[Step]) -> Vec<f64> {
            vec![0.4, 0.6]
        }
        fn b(&self, _: &[Step], _: usize) -> f64 {
            0.3
        }
        fn h(&self, _: &[Step], _: usize) -> f64 {
            0.2
        }
        fn y(&self, _: &[Step], _: usize, _: Trt) -> f64 {
            0.0
        }
    }

    fn cfg(dgm: DiscreteDgm<f64>, n: usize, seed: u64) -> SimConfig {
        SimConfig {
            n,
            horizon: dgm.horizon(),
            seed,
            generator: Generator::Dgm(dgm),
        }
    }

    #[test]
    fn zero_hazard_keeps_everyone() {
        let dgm = DiscreteDgm::from_source(3, 2, &NoDeath, DEFAULT_STATE_BOUND).unwrap();
        let panel = sample_panel(&cfg(dgm, 500, 1)).unwrap();
        assert!(panel.subjects().iter().all(|s| s.rows() == 3));
    }

    #[test]
    fn seed_determinism() {
        let dgm = seeded_dgm(4, 3, 2, true, &RandomRanges::default()).unwrap();
        let a = sample_panel(&cfg(dgm.clone(), 300, 9)).unwrap();
        let b = sample_panel(&cfg(dgm.clone(), 300, 9)).unwrap();
        let c = sample_panel(&cfg(dgm, 300, 10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn prefix_stability() {
        let dgm = seeded_dgm(4, 2, 2, false, &RandomRanges::default()).unwrap();
        let a = sample_panel(&cfg(dgm.clone(), 50, 3)).unwrap();
        let b = sample_panel(&cfg(dgm, 80, 3)).unwrap();
        assert_eq!(a.subjects()[..], b.subjects()[..50]);
    }

    #[test]
    fn first_interval_treatment_rate() {
        let dgm = DiscreteDgm::from_source(1, 2, &NoDeath, DEFAULT_STATE_BOUND).unwrap();
        let n = 200_000;
        let panel = sample_panel(&cfg(dgm, n, 5)).unwrap();
        let (rate, m) = empirical_rate(&panel, 1, |_| true, |r| r.b);
        assert_eq!(m, n);
        let sd = (0.3 * 0.7 / n as f64).sqrt();
        assert!((rate - 0.3).abs() < 4.0 * sd, "{rate}");
    }

    #[test]
    fn interventional_g1_never_assigns_h() {
        let dgm = seeded_dgm(7, 2, 2, false, &RandomRanges::default()).unwrap();
        let g1 = gformula_risk(&dgm, &preset("g1").unwrap(), 2, Variant::Generalized, DEFAULT_STATE_BOUND)
            .unwrap();
        let mc = sample_interventional(&dgm, &g1.steps, 20_000, 1).unwrap();
        assert_eq!(mc.h_assigned, 0);
        assert!(mc.b_assigned > 0);
    }

    #[test]
    fn interventional_g0_matches_factual() {
        let dgm = seeded_dgm(8, 2, 2, false, &RandomRanges::default()).unwrap();
        let g0 = gformula_risk(&dgm, &preset("g0").unwrap(), 2, Variant::Generalized, DEFAULT_STATE_BOUND)
            .unwrap();
        let mc = sample_interventional(&dgm, &g0.steps, 100_000, 2).unwrap();
        let truth = factual_risk(&dgm, 2).unwrap();
        assert!((mc.risk[1] - truth[1]).abs() < 3.0 * mc.se[1] + 1e-12);
    }

    #[test]
    fn transplant_panel_is_valid() {
        let panel = sample_panel(&SimConfig {
            n: 400,
            horizon: 24,
            seed: 1,
            generator: Generator::Transplant(TransplantGenerator::default()),
        })
        .unwrap();
        assert_eq!(panel.n(), 400);
        assert!(panel.subjects().iter().any(|s| s.records.iter().any(|r| r.b)));
        assert!(panel.subjects().iter().any(|s| s.records.iter().any(|r| r.h)));
        assert!(panel.has_censoring());
        assert_eq!(panel.columns(), ["age", "female", "exception[yes]", "meld"]);
    }

    #[test]
    fn uniform_stream_is_keyed() {
        let mut a = SubjectStream::new(1, 3);
        let x = a.uniform(2, 1);
        let _ = a.uniform(5, 0);
        assert_eq!(a.uniform(2, 1), x);
        assert_ne!(SubjectStream::new(1, 4).uniform(2, 1), x);
    }
}
