//! Oracle self-checks on small finite DGMs.

use std::path::Path;

use prorep::oracle::{
    check_constraints, gformula_hazard_repr, gformula_risk, static_regime_risk, DiscreteDgm,
    OracleError, StaticRule,
};
use prorep::regime::{preset, RegimeSpec, Variant};
use prorep::sim::seeded_dgm;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{resolve_regimes, RunConfig};
use crate::error::{Failure, Kind, ResultExt};

const TOL: f64 = 1e-12;
const SHOWN_FAILURES: usize = 5;

#[derive(Debug, Serialize)]
pub struct Suite {
    pub name: &'static str,
    pub checks: usize,
    pub failures: usize,
    pub max_deviation: f64,
    pub examples: Vec<String>,
}

impl Suite {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            checks: 0,
            failures: 0,
            max_deviation: 0.0,
            examples: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.failures += 1;
            if self.examples.len() < SHOWN_FAILURES {
                self.examples.push(what());
            }
        }
    }

    fn deviation(&mut self, dev: f64, what: impl FnOnce() -> String) {
        self.max_deviation = self.max_deviation.max(dev);
        self.check(dev < TOL, || format!("{} (|Δ| = {dev:e})", what()));
    }

    fn error(&mut self, context: &str, e: OracleError) {
        self.check(false, || format!("{context}: {e}"));
    }
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub dgms: usize,
    pub regimes: Vec<String>,
    pub suites: Vec<Suite>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.failures == 0)
    }
}

/// Factual `(k, f_B, f_H)` for every history cell of the tables.
fn cells(dgm: &DiscreteDgm<f64>, horizon: usize) -> Vec<(usize, f64, f64)> {
    let radix = 3 * dgm.levels();
    let mut out = Vec::new();
    for k in 1..=horizon {
        for hist in 0..radix.pow(k as u32 - 1) {
            for l in 0..dgm.levels() {
                let row = dgm.cpt(k, hist, l);
                out.push((k, row.b, row.h));
            }
        }
    }
    out
}

struct Ctx<'a> {
    name: String,
    dgm: &'a DiscreteDgm<f64>,
    horizon: usize,
    variant: Variant,
    bound: usize,
}

fn equivalence(s: &mut Suite, c: &Ctx<'_>, regime: &RegimeSpec, v: prorep::oracle::VPartition) {
    let tag = format!("{} {}", c.name, regime.label);
    let fwd = match gformula_risk(c.dgm, regime, c.horizon, c.variant, c.bound) {
        Ok(r) => r,
        Err(e) => return s.error(&tag, e),
    };
    match gformula_hazard_repr(c.dgm, regime, c.horizon, v, c.variant, c.bound) {
        Ok(repr) => {
            for (k, (a, b)) in fwd.risk.iter().zip(&repr.risk).enumerate() {
                s.deviation((a - b).abs(), || format!("{tag} k={}", k + 1));
            }
        }
        Err(e) => s.error(&tag, e),
    }
}

fn constraints(s: &mut Suite, c: &Ctx<'_>, regime: &RegimeSpec) {
    let tag = format!("{} {}", c.name, regime.label);
    match check_constraints(c.dgm, regime, c.horizon, c.variant, c.bound) {
        Ok(checks) => {
            for ck in checks {
                s.deviation(ck.max_deviation(), || format!("{tag} k={}", ck.k));
            }
        }
        Err(e) => s.error(&tag, e),
    }
}

fn ranges(s: &mut Suite, c: &Ctx<'_>, regime: &RegimeSpec, cells: &[(usize, f64, f64)]) {
    let tag = format!("{} {}", c.name, regime.label);
    let run = match gformula_risk(c.dgm, regime, c.horizon, c.variant, c.bound) {
        Ok(r) => r,
        Err(e) => return s.error(&tag, e),
    };
    let shrinking = run
        .steps
        .iter()
        .all(|st| st.b.target <= st.b.observed && st.h.target <= st.h.observed);
    if shrinking {
        for st in &run.steps {
            for (arm, a) in [("alpha", &st.b), ("beta", &st.h)] {
                s.check((0.0..=1.0).contains(&a.scale), || {
                    format!("{tag} k={} {arm} = {}", st.k, a.scale)
                });
            }
        }
    }
    for &(k, fb, fh) in cells {
        let st = &run.steps[k - 1];
        for p in [st.b.intervened_prob(fb), st.h.intervened_prob(fh)] {
            s.check((0.0..=1.0).contains(&p), || format!("{tag} k={k} density {p}"));
        }
    }
}

fn degeneration(s: &mut Suite, c: &Ctx<'_>, cells: &[(usize, f64, f64)]) {
    let regime = RegimeSpec::new("treat-all", 1e6, 1.0);
    let tag = format!("{} {}", c.name, regime.label);
    let run = match gformula_risk(c.dgm, &regime, c.horizon, Variant::Generalized, c.bound) {
        Ok(r) => r,
        Err(e) => return s.error(&tag, e),
    };
    for st in &run.steps {
        s.check(!st.b.aleph, || format!("{tag} k={}: limit does not exceed eligibility", st.k));
    }
    for &(k, fb, _) in cells {
        let p = run.steps[k - 1].b.intervened_prob(fb);
        s.check(p == 1.0, || format!("{tag} k={k} density {p}"));
    }
    match static_regime_risk(c.dgm, StaticRule::AllEligible, StaticRule::Natural, c.horizon, c.bound) {
        Ok(reference) => {
            for (k, (a, b)) in run.risk.iter().zip(&reference.risk).enumerate() {
                s.deviation((a - b).abs(), || format!("{tag} k={} vs treat-all-eligible", k + 1));
            }
        }
        Err(e) => s.error(&tag, e),
    }
}

pub fn run(cfg: &RunConfig) -> Result<Report, Failure> {
    let section = &cfg.validate;
    let variant = cfg.model.as_ref().map_or(Variant::Generalized, |m| m.variant);
    let mut dgms = Vec::new();
    match &section.dgm {
        Some(path) => {
            let dgm = crate::commands::load_dgm(cfg, path)?;
            dgms.push((path.display().to_string(), dgm));
        }
        None => {
            if section.horizon == 0 || section.dgms == 0 {
                return Err(Failure::msg(Kind::Config, "validate needs horizon ≥ 1 and dgms ≥ 1"));
            }
            for i in 0..section.dgms as u64 {
                let seed = cfg.seed.wrapping_add(i);
                let censoring = section.censoring && i % 2 == 0;
                let dgm = seeded_dgm(seed, section.horizon, section.levels, censoring, &Default::default())
                    .kind(Kind::Config)?;
                dgms.push((format!("seed {seed}"), dgm));
            }
        }
    }
    let extra = resolve_regimes(&section.regimes)?;
    let mut suites = [
        Suite::new("representation equivalence"),
        Suite::new("constraint satisfaction"),
        Suite::new("scale and density ranges"),
        Suite::new("deterministic degeneration"),
    ];
    let mut labels = Vec::new();
    for (i, (name, dgm)) in dgms.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        rng.set_stream(i as u64);
        let mut regimes = vec![preset("g0").kind(Kind::Config)?, preset("g1").kind(Kind::Config)?];
        regimes.push(RegimeSpec::new(
            "random",
            rng.random_range(0.0..2.0),
            rng.random_range(0.0..2.0),
        ));
        regimes.extend(extra.iter().cloned());
        if i == 0 {
            labels = regimes.iter().map(|r| r.label.clone()).collect();
        }
        let ctx = Ctx {
            name: name.clone(),
            dgm,
            horizon: dgm.horizon(),
            variant,
            bound: cfg.oracle_bound,
        };
        let cells = cells(dgm, ctx.horizon);
        for regime in &regimes {
            equivalence(&mut suites[0], &ctx, regime, section.v.into());
            constraints(&mut suites[1], &ctx, regime);
            ranges(&mut suites[2], &ctx, regime, &cells);
        }
        degeneration(&mut suites[3], &ctx, &cells);
    }
    Ok(Report {
        dgms: dgms.len(),
        regimes: labels,
        suites: suites.into(),
    })
}

pub fn write(report: &Report, out: &Path) -> Result<(), Failure> {
    crate::commands::prepare_out(out)?;
    let text = serde_json::to_string_pretty(report).kind(Kind::Data)?;
    std::fs::write(out.join("validation.json"), text + "\n").kind(Kind::Data)
}
