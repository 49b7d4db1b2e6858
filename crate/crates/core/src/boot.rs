//! Nonparametric subject-level bootstrap of the whole pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::data::PanelDataset;
use crate::pipeline::{run_pipeline, PipelineConfig};

pub const DEFAULT_REPLICATES: usize = 500;

/// Largest tolerated share of failed replicates.
pub const MAX_FAILURE_SHARE: f64 = 0.10;

#[derive(Debug, Error, PartialEq)]
pub enum BootError {
    #[error("at least one replicate is required")]
    NoReplicates,
    #[error("{failures} of {replicates} replicates failed (first: {first})")]
    TooManyFailures {
        failures: usize,
        replicates: usize,
        first: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Band {
    pub label: String,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub replicates: usize,
    pub failures: usize,
    pub labels: Vec<String>,
    /// Risk curves per successful replicate, `[replicate][z][k − 1]`.
    pub draws: Vec<Vec<Vec<f64>>>,
    pub bands: Vec<Band>,
    /// `risk_j − risk_i` for every pair `i < j`, labelled `j-i`.
    pub differences: Vec<Band>,
}

/// Percentile of unsorted `values` by linear interpolation at rank
/// `(m + 1) p`, clamped to the sample extremes.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len();
    let rank = ((m as f64 + 1.0) * p).clamp(1.0, m as f64);
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo >= m {
        v[m - 1]
    } else {
        v[lo - 1] + frac * (v[lo] - v[lo - 1])
    }
}

/// Subject indices drawn for replicate `b`.
pub fn resample_indices(n: usize, seed: u64, replicate: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

fn band(label: String, draws: &[Vec<f64>], level: f64) -> Band {
    let horizon = draws[0].len();
    let col = |k: usize| draws.iter().map(|d| d[k]).collect::<Vec<_>>();
    let a = (1.0 - level) / 2.0;
    Band {
        label,
        lo: (0..horizon).map(|k| percentile(&col(k), a)).collect(),
        hi: (0..horizon).map(|k| percentile(&col(k), 1.0 - a)).collect(),
    }
}

/// Resample subjects with replacement `replicates` times, rerun the pipeline
/// on each and summarise by 95% percentile bands.
pub fn bootstrap(
    panel: &PanelDataset,
    cfg: &PipelineConfig,
    replicates: usize,
    seed: u64,
) -> Result<BootstrapResult, BootError> {
    if replicates == 0 {
        return Err(BootError::NoReplicates);
    }
    let n = panel.n();
    let runs: Vec<Result<Vec<Vec<f64>>, String>> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let sample = panel.resample(&resample_indices(n, seed, b as u64));
            run_pipeline(&sample, cfg)
                .map(|r| r.curves.into_iter().map(|c| c.risk).collect())
                .map_err(|e| e.to_string())
        })
        .collect();
    let failures = runs.iter().filter(|r| r.is_err()).count();
    if failures as f64 > MAX_FAILURE_SHARE * replicates as f64 || failures == replicates {
        let first = runs
            .iter()
            .find_map(|r| r.as_ref().err().cloned())
            .unwrap_or_default();
        return Err(BootError::TooManyFailures {
            failures,
            replicates,
            first,
        });
    }
    if failures > 0 {
        log::warn!("{failures} of {replicates} bootstrap replicates failed");
    }
    let draws: Vec<Vec<Vec<f64>>> = runs.into_iter().filter_map(Result::ok).collect();
    let labels: Vec<String> = cfg.regimes.iter().map(|r| r.label.clone()).collect();
    let bands = labels
        .iter()
        .enumerate()
        .map(|(z, l)| {
            let per: Vec<Vec<f64>> = draws.iter().map(|d| d[z].clone()).collect();
            band(l.clone(), &per, 0.95)
        })
        .collect();
    let mut differences = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            let per: Vec<Vec<f64>> = draws
                .iter()
                .map(|d| d[j].iter().zip(&d[i]).map(|(a, b)| a - b).collect())
                .collect();
            differences.push(band(format!("{}-{}", labels[j], labels[i]), &per, 0.95));
        }
    }
    Ok(BootstrapResult {
        replicates,
        failures,
        labels,
        draws,
        bands,
        differences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{Factor, FormulaSpec, Term};
    use crate::glm::GlmOptions;
    use crate::oracle::RandomRanges;
    use crate::regime::{preset, Variant};
    use crate::sim::{sample_panel, seeded_dgm, Generator, SimConfig};
    use crate::weights::TreatmentFormulas;
    use proptest::prelude::*;

    #[test]
    fn percentile_interpolation() {
        let v: Vec<f64> = (1..=9).map(f64::from).collect();
        // rank (9 + 1) · 0.25 = 2.5
        assert_eq!(percentile(&v, 0.25), 2.5);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 1.0), 9.0);
        assert_eq!(percentile(&[4.0], 0.975), 4.0);
    }

    proptest! {
        #[test]
        fn percentile_within_range(v in prop::collection::vec(-10.0..10.0f64, 1..50), p in 0.0..=1.0f64) {
            let x = percentile(&v, p);
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= x && x <= hi);
        }
    }

    fn setup() -> (PanelDataset, PipelineConfig) {
        let dgm = seeded_dgm(3, 2, 2, false, &RandomRanges::default()).unwrap();
        let panel = sample_panel(&SimConfig {
            n: 800,
            horizon: 2,
            seed: 4,
            generator: Generator::Dgm(dgm),
        })
        .unwrap();
        let sat = |f: Vec<Factor>| FormulaSpec::new(false, vec![Term::Saturated(f)]);
        let cfg = PipelineConfig {
            formulas: TreatmentFormulas {
                b: sat(vec![Factor::Interval, Factor::Covariate("L".into())]),
                h: sat(vec![Factor::Interval, Factor::Covariate("L".into())]),
                c: FormulaSpec::intercept_only(),
            },
            gamma: sat(vec![Factor::Interval, Factor::Regime]),
            regimes: vec![preset("g0").unwrap(), preset("g1").unwrap()],
            horizon: None,
            weight_cap: None,
            variant: Variant::Generalized,
            glm: GlmOptions::default(),
        };
        (panel, cfg)
    }

    #[test]
    fn reproducible_and_single_replicate_collapses() {
        let (panel, cfg) = setup();
        let a = bootstrap(&panel, &cfg, 8, 11).unwrap();
        let b = bootstrap(&panel, &cfg, 8, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.differences[0].label, "g1-g0");
        let one = bootstrap(&panel, &cfg, 1, 11).unwrap();
        assert_eq!(one.bands[0].lo, one.bands[0].hi);
        assert_eq!(one.bands[0].lo, one.draws[0][0]);
    }

    #[test]
    fn failures_are_counted() {
        let (panel, mut cfg) = setup();
        cfg.regimes = vec![preset("g0").unwrap()];
        let err = bootstrap(&panel, &cfg, 4, 1).unwrap_err();
        assert!(matches!(err, BootError::TooManyFailures { failures: 4, .. }));
        assert_eq!(bootstrap(&panel, &cfg, 0, 1), Err(BootError::NoReplicates));
    }

    #[test]
    fn resampling_draws_subjects() {
        let idx = resample_indices(100, 3, 7);
        assert_eq!(idx.len(), 100);
        assert!(idx.iter().all(|&i| i < 100));
        assert_ne!(idx, resample_indices(100, 3, 8));
    }
}
