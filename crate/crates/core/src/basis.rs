//! Feature bases for the pooled logistic models.
//!
//! The time basis is the raw truncated-power construction
//! `g(k) = {k, k², k³, t_I(k, ξ_I,1..m), t_B(k, ξ_B,1), t_B(k, ξ_B,2)}` with
//! `t_I(k, ξ) = (k − ξ)³₊` and `t_B(k, ξ) = (k − ξ)₊`. It over-parameterizes a
//! natural cubic spline; the redundancy is kept and left to the fitter's ridge.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CovariateKind, PanelDataset, PanelRecord};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("knots: {0}")]
    InvalidKnots(String),
    #[error("basis argument {0} is outside the domain")]
    OutOfDomain(f64),
    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),
    #[error("covariate `{0}` must be numeric for a spline term")]
    NotNumeric(String),
    #[error("term `{0}` is not allowed in this formula")]
    TermNotAllowed(String),
    #[error("level {level} of saturated term was not seen when the design was built")]
    UnknownLevel { level: String },
    #[error("regime index {0} out of range")]
    UnknownRegime(usize),
    #[error("percentile {0} outside [0, 100]")]
    InvalidPercentile(f64),
}

/// Knot layout of a truncated-power spline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineSpec {
    pub internal_knots: Vec<f64>,
    pub boundary_knots: [f64; 2],
}

impl SplineSpec {
    pub fn new(internal_knots: Vec<f64>, boundary_knots: [f64; 2]) -> Result<Self, BasisError> {
        let spec = Self {
            internal_knots,
            boundary_knots,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Time basis knots used for the 30-day-interval transplant analysis.
    pub fn transplant_time() -> Self {
        Self {
            internal_knots: vec![2.0, 4.0, 12.0, 24.0, 54.0],
            boundary_knots: [1.0, 120.0],
        }
    }

    pub fn validate(&self) -> Result<(), BasisError> {
        let [lo, hi] = self.boundary_knots;
        let all_finite = lo.is_finite()
            && hi.is_finite()
            && self.internal_knots.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(BasisError::InvalidKnots("knots must be finite".into()));
        }
        if self.internal_knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(BasisError::InvalidKnots(
                "internal knots must be strictly increasing".into(),
            ));
        }
        match (self.internal_knots.first(), self.internal_knots.last()) {
            (Some(&first), Some(&last)) => {
                if lo >= first || last >= hi {
                    return Err(BasisError::InvalidKnots(
                        "internal knots must lie strictly inside the boundary knots".into(),
                    ));
                }
            }
            _ if lo >= hi => {
                return Err(BasisError::InvalidKnots(
                    "boundary knots must be increasing".into(),
                ));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        3 + self.internal_knots.len() + 2
    }
}

#[inline]
fn cubic_trunc<T: Scalar>(x: T, knot: T) -> T {
    if x > knot {
        let d = x - knot;
        d * d * d
    } else {
        T::zero()
    }
}

#[inline]
fn linear_trunc<T: Scalar>(x: T, knot: T) -> T {
    if x > knot {
        x - knot
    } else {
        T::zero()
    }
}

/// Append the truncated-power features of `x` (or just `x, x², x³` without a spec).
pub fn spline_features_into<T: Scalar>(x: T, spec: Option<&SplineSpec>, out: &mut Vec<T>) {
    out.push(x);
    out.push(x * x);
    out.push(x * x * x);
    if let Some(spec) = spec {
        for &knot in &spec.internal_knots {
            out.push(cubic_trunc(x, T::lit(knot)));
        }
        for &knot in &spec.boundary_knots {
            out.push(linear_trunc(x, T::lit(knot)));
        }
    }
}

/// `g(k)` for interval `k ≥ 1`.
pub fn time_basis<T: Scalar>(k: T, spec: &SplineSpec) -> Result<Vec<T>, BasisError> {
    if !k.is_finite() || k < T::one() {
        return Err(BasisError::OutOfDomain(k.as_f64()));
    }
    let mut out = Vec::with_capacity(spec.width());
    spline_features_into(k, Some(spec), &mut out);
    Ok(out)
}

/// Sample percentile with linear interpolation between order statistics
/// (`h = (n − 1) p`).
pub fn percentile(sorted: &[f64], pct: f64) -> Result<f64, BasisError> {
    if !(0.0..=100.0).contains(&pct) {
        return Err(BasisError::InvalidPercentile(pct));
    }
    match sorted.len() {
        0 => Err(BasisError::InvalidKnots("empty sample".into())),
        1 => Ok(sorted[0]),
        n => {
            let h = (n - 1) as f64 * pct / 100.0;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
        }
    }
}

/// Percentile positions of the covariate-spline knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplinePercentiles {
    pub internal: Vec<f64>,
    pub boundary: [f64; 2],
}

impl Default for SplinePercentiles {
    fn default() -> Self {
        Self {
            internal: vec![35.0, 65.0],
            boundary: [5.0, 95.0],
        }
    }
}

/// Knots from the empirical distribution of `sample`. Returns `None` (a
/// polynomial-only basis) when the percentiles do not give valid knots.
pub fn covariate_knots(
    sample: &[f64],
    percentiles: &SplinePercentiles,
) -> Result<Option<SplineSpec>, BasisError> {
    let mut sorted: Vec<f64> = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let internal = percentiles
        .internal
        .iter()
        .map(|&p| percentile(&sorted, p))
        .collect::<Result<Vec<_>, _>>()?;
    let boundary = [
        percentile(&sorted, percentiles.boundary[0])?,
        percentile(&sorted, percentiles.boundary[1])?,
    ];
    let spec = SplineSpec {
        internal_knots: internal,
        boundary_knots: boundary,
    };
    match spec.validate() {
        Ok(()) => Ok(Some(spec)),
        Err(_) => {
            log::warn!(
                "degenerate spline knots {:?} / {:?}; using a polynomial-only basis",
                spec.internal_knots,
                spec.boundary_knots
            );
            Ok(None)
        }
    }
}

/// Feature vector of a covariate spline.
pub fn covariate_spline<T: Scalar>(x: T, knots: Option<&SplineSpec>) -> Vec<T> {
    let mut out = Vec::with_capacity(3 + knots.map_or(0, |s| s.internal_knots.len() + 2));
    spline_features_into(x, knots, &mut out);
    out
}

/// Factors of a saturated (one indicator per observed level combination) term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Interval,
    Regime,
    Covariate(String),
    Baseline(String),
    /// All values of a covariate from interval 1 through the current one.
    History(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    /// `k` alone.
    TimeLinear,
    /// `g(k)`.
    TimeSpline(SplineSpec),
    /// Current value (all dummies for a categorical covariate).
    Covariate(String),
    /// Value at interval 1.
    Baseline(String),
    CovariateSpline {
        covariate: String,
        #[serde(default)]
        baseline: bool,
        #[serde(default)]
        percentiles: SplinePercentiles,
    },
    /// Regime dummies against the first regime.
    Regime,
    /// Elementwise products over the cartesian product of the parts' columns.
    Interaction(Vec<Term>),
    Saturated(Vec<Factor>),
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormulaSpec {
    #[serde(default = "default_true")]
    pub intercept: bool,
    #[serde(default)]
    pub terms: Vec<Term>,
}

impl FormulaSpec {
    pub fn new(intercept: bool, terms: Vec<Term>) -> Self {
        Self { intercept, terms }
    }

    pub fn intercept_only() -> Self {
        Self::new(true, vec![])
    }

    /// `ψ₀ + ψ₁ᵀ g(k) + ψ₂ Z + ψ₃ Z k`.
    pub fn msm_time_by_regime(spec: SplineSpec) -> Self {
        Self::new(
            true,
            vec![
                Term::TimeSpline(spec),
                Term::Regime,
                Term::Interaction(vec![Term::Regime, Term::TimeLinear]),
            ],
        )
    }

    pub fn uses_regime(&self) -> bool {
        fn walk(t: &Term) -> bool {
            match t {
                Term::Regime => true,
                Term::Interaction(parts) => parts.iter().any(walk),
                Term::Saturated(f) => f.contains(&Factor::Regime),
                _ => false,
            }
        }
        self.terms.iter().any(walk)
    }

    /// True when every term depends only on `k`, the regime and baseline values.
    pub fn baseline_only(&self) -> bool {
        fn walk(t: &Term) -> bool {
            match t {
                Term::Covariate(_) => false,
                Term::CovariateSpline { baseline, .. } => *baseline,
                Term::Interaction(parts) => parts.iter().all(walk),
                Term::Saturated(f) => f
                    .iter()
                    .all(|f| !matches!(f, Factor::Covariate(_) | Factor::History(_))),
                _ => true,
            }
        }
        self.terms.iter().all(walk)
    }
}

/// What a design row is evaluated on: the subject's records through the
/// current row (the last element), the interval and the regime index.
#[derive(Debug, Clone, Copy)]
pub struct RowContext<'a> {
    pub k: u32,
    pub z: usize,
    pub records: &'a [PanelRecord],
}

impl<'a> RowContext<'a> {
    pub fn new(k: u32, z: usize, records: &'a [PanelRecord]) -> Self {
        debug_assert!(!records.is_empty());
        Self { k, z, records }
    }

    fn current(&self) -> &'a PanelRecord {
        self.records.last().expect("non-empty history")
    }

    fn baseline(&self) -> &'a PanelRecord {
        &self.records[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
enum CompiledFactor {
    Interval,
    Regime,
    Current(std::ops::Range<usize>),
    Baseline(std::ops::Range<usize>),
    History(std::ops::Range<usize>),
}

#[derive(Debug, Clone, PartialEq)]
enum Compiled {
    TimeLinear,
    TimeSpline(SplineSpec),
    Current(std::ops::Range<usize>),
    Baseline(std::ops::Range<usize>),
    Spline {
        col: usize,
        baseline: bool,
        knots: Option<SplineSpec>,
    },
    Regime(usize),
    Interaction(Vec<Compiled>),
    Saturated {
        factors: Vec<CompiledFactor>,
        levels: BTreeMap<Vec<u64>, usize>,
    },
}

impl Compiled {
    fn width(&self) -> usize {
        match self {
            Compiled::TimeLinear => 1,
            Compiled::TimeSpline(s) => s.width(),
            Compiled::Current(r) | Compiled::Baseline(r) => r.len(),
            Compiled::Spline { knots, .. } => {
                3 + knots.as_ref().map_or(0, |s| s.internal_knots.len() + 2)
            }
            Compiled::Regime(n) => n.saturating_sub(1),
            Compiled::Interaction(parts) => parts.iter().map(Compiled::width).product(),
            Compiled::Saturated { levels, .. } => levels.len(),
        }
    }

    fn eval(&self, ctx: &RowContext<'_>, out: &mut Vec<f64>) -> Result<(), BasisError> {
        match self {
            Compiled::TimeLinear => out.push(f64::from(ctx.k)),
            Compiled::TimeSpline(spec) => {
                if ctx.k < 1 {
                    return Err(BasisError::OutOfDomain(f64::from(ctx.k)));
                }
                spline_features_into(f64::from(ctx.k), Some(spec), out);
            }
            Compiled::Current(r) => out.extend_from_slice(&ctx.current().x[r.clone()]),
            Compiled::Baseline(r) => out.extend_from_slice(&ctx.baseline().x[r.clone()]),
            Compiled::Spline {
                col,
                baseline,
                knots,
            } => {
                let rec = if *baseline {
                    ctx.baseline()
                } else {
                    ctx.current()
                };
                spline_features_into(rec.x[*col], knots.as_ref(), out);
            }
            Compiled::Regime(n) => {
                if ctx.z >= *n {
                    return Err(BasisError::UnknownRegime(ctx.z));
                }
                out.extend((1..*n).map(|z| if z == ctx.z { 1.0 } else { 0.0 }));
            }
            Compiled::Interaction(parts) => {
                let mut acc = vec![1.0];
                let mut buf = Vec::new();
                for part in parts {
                    buf.clear();
                    part.eval(ctx, &mut buf)?;
                    acc = acc
                        .iter()
                        .flat_map(|a| buf.iter().map(move |b| a * b))
                        .collect();
                }
                out.extend(acc);
            }
            Compiled::Saturated { factors, levels } => {
                let key = level_key(factors, ctx);
                let hit = levels.get(&key).copied().ok_or_else(|| BasisError::UnknownLevel {
                    level: format_key(&key),
                })?;
                out.extend((0..levels.len()).map(|i| if i == hit { 1.0 } else { 0.0 }));
            }
        }
        Ok(())
    }
}

fn level_key(factors: &[CompiledFactor], ctx: &RowContext<'_>) -> Vec<u64> {
    let mut key = Vec::new();
    for f in factors {
        match f {
            CompiledFactor::Interval => key.push(u64::from(ctx.k)),
            CompiledFactor::Regime => key.push(ctx.z as u64),
            CompiledFactor::Current(r) => {
                key.extend(ctx.current().x[r.clone()].iter().map(|v| v.to_bits()))
            }
            CompiledFactor::Baseline(r) => {
                key.extend(ctx.baseline().x[r.clone()].iter().map(|v| v.to_bits()))
            }
            CompiledFactor::History(r) => {
                key.push(ctx.records.len() as u64);
                for rec in ctx.records {
                    key.extend(rec.x[r.clone()].iter().map(|v| v.to_bits()));
                }
            }
        }
    }
    key
}

fn format_key(key: &[u64]) -> String {
    let mut s = String::new();
    for (i, v) in key.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        // small integers are interval / regime / length codes, the rest are f64 bits
        if *v < 1 << 32 {
            let _ = write!(s, "{v}");
        } else {
            let _ = write!(s, "{}", f64::from_bits(*v));
        }
    }
    s
}

/// A formula bound to a panel layout, ready to evaluate rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    intercept: bool,
    terms: Vec<Compiled>,
    names: Vec<String>,
}

struct CompileCtx<'a> {
    panel: &'a PanelDataset,
    regimes: &'a [String],
    rows: &'a [RowContext<'a>],
}

impl CompileCtx<'_> {
    fn numeric_col(&self, name: &str) -> Result<usize, BasisError> {
        let (_, spec) = self
            .panel
            .schema()
            .covariate(name)
            .ok_or_else(|| BasisError::UnknownCovariate(name.into()))?;
        if !matches!(spec.kind, CovariateKind::Numeric) {
            return Err(BasisError::NotNumeric(name.into()));
        }
        Ok(self.span(name)?.start)
    }

    fn span(&self, name: &str) -> Result<std::ops::Range<usize>, BasisError> {
        self.panel
            .covariate_columns(name)
            .ok_or_else(|| BasisError::UnknownCovariate(name.into()))
    }

    fn compile(&self, term: &Term) -> Result<(Compiled, Vec<String>), BasisError> {
        let cols = self.panel.columns();
        Ok(match term {
            Term::TimeLinear => (Compiled::TimeLinear, vec!["k".into()]),
            Term::TimeSpline(spec) => {
                spec.validate()?;
                (Compiled::TimeSpline(spec.clone()), spline_names("k", Some(spec)))
            }
            Term::Covariate(name) => {
                let r = self.span(name)?;
                let names = cols[r.clone()].to_vec();
                (Compiled::Current(r), names)
            }
            Term::Baseline(name) => {
                let r = self.span(name)?;
                let names = cols[r.clone()].iter().map(|c| format!("{c}@1")).collect();
                (Compiled::Baseline(r), names)
            }
            Term::CovariateSpline {
                covariate,
                baseline,
                percentiles,
            } => {
                let col = self.numeric_col(covariate)?;
                let sample: Vec<f64> = self
                    .rows
                    .iter()
                    .map(|r| {
                        if *baseline {
                            r.baseline().x[col]
                        } else {
                            r.current().x[col]
                        }
                    })
                    .collect();
                let knots = if sample.is_empty() {
                    None
                } else {
                    covariate_knots(&sample, percentiles)?
                };
                let label = if *baseline {
                    format!("{covariate}@1")
                } else {
                    covariate.clone()
                };
                let names = spline_names(&label, knots.as_ref());
                (
                    Compiled::Spline {
                        col,
                        baseline: *baseline,
                        knots,
                    },
                    names,
                )
            }
            Term::Regime => (
                Compiled::Regime(self.regimes.len()),
                self.regimes
                    .iter()
                    .skip(1)
                    .map(|r| format!("Z[{r}]"))
                    .collect(),
            ),
            Term::Interaction(parts) => {
                if parts.is_empty() {
                    return Err(BasisError::TermNotAllowed("empty interaction".into()));
                }
                let mut compiled = Vec::new();
                let mut names = vec![String::new()];
                for part in parts {
                    let (c, n) = self.compile(part)?;
                    compiled.push(c);
                    names = names
                        .iter()
                        .flat_map(|a| {
                            n.iter().map(move |b| {
                                if a.is_empty() {
                                    b.clone()
                                } else {
                                    format!("{a}:{b}")
                                }
                            })
                        })
                        .collect();
                }
                (Compiled::Interaction(compiled), names)
            }
            Term::Saturated(factors) => {
                let compiled = factors
                    .iter()
                    .map(|f| {
                        Ok(match f {
                            Factor::Interval => CompiledFactor::Interval,
                            Factor::Regime => CompiledFactor::Regime,
                            Factor::Covariate(n) => CompiledFactor::Current(self.span(n)?),
                            Factor::Baseline(n) => CompiledFactor::Baseline(self.span(n)?),
                            Factor::History(n) => CompiledFactor::History(self.span(n)?),
                        })
                    })
                    .collect::<Result<Vec<_>, BasisError>>()?;
                let mut keys: Vec<Vec<u64>> =
                    self.rows.iter().map(|r| level_key(&compiled, r)).collect();
                keys.sort_unstable();
                keys.dedup();
                let names = keys.iter().map(|k| format!("[{}]", format_key(k))).collect();
                let levels = keys.into_iter().enumerate().map(|(i, k)| (k, i)).collect();
                (
                    Compiled::Saturated {
                        factors: compiled,
                        levels,
                    },
                    names,
                )
            }
        })
    }
}

fn spline_names(label: &str, spec: Option<&SplineSpec>) -> Vec<String> {
    let mut names = vec![
        label.to_string(),
        format!("{label}^2"),
        format!("{label}^3"),
    ];
    if let Some(spec) = spec {
        names.extend(spec.internal_knots.iter().map(|k| format!("tI({label},{k})")));
        names.extend(spec.boundary_knots.iter().map(|k| format!("tB({label},{k})")));
    }
    names
}

fn term_rank(term: &Term, panel: &PanelDataset) -> (u8, usize) {
    let schema_pos = |name: &str| {
        panel
            .schema()
            .covariate(name)
            .map_or(usize::MAX, |(i, _)| i)
    };
    match term {
        Term::TimeLinear | Term::TimeSpline(_) => (0, 0),
        Term::Covariate(n) | Term::Baseline(n) => (1, schema_pos(n)),
        Term::CovariateSpline { covariate, .. } => (1, schema_pos(covariate)),
        Term::Regime => (2, 0),
        Term::Saturated(_) => (3, 0),
        Term::Interaction(_) => (4, 0),
    }
}

impl Design {
    /// Bind `formula` to `panel`. `rows` are the rows the model will be fit
    /// on; they fix spline knots and the levels of saturated terms.
    pub fn compile(
        formula: &FormulaSpec,
        panel: &PanelDataset,
        regimes: &[String],
        rows: &[RowContext<'_>],
    ) -> Result<Self, BasisError> {
        let ctx = CompileCtx {
            panel,
            regimes,
            rows,
        };
        let mut order: Vec<&Term> = formula.terms.iter().collect();
        order.sort_by_key(|t| term_rank(t, panel));
        let mut names = Vec::new();
        if formula.intercept {
            names.push("(Intercept)".to_string());
        }
        let mut terms = Vec::new();
        for term in order {
            let (c, n) = ctx.compile(term)?;
            debug_assert_eq!(c.width(), n.len());
            terms.push(c);
            names.extend(n);
        }
        Ok(Self {
            intercept: formula.intercept,
            terms,
            names,
        })
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn row_into<T: Scalar>(
        &self,
        ctx: &RowContext<'_>,
        out: &mut Vec<T>,
    ) -> Result<(), BasisError> {
        let mut buf = Vec::with_capacity(self.width());
        if self.intercept {
            buf.push(1.0);
        }
        for term in &self.terms {
            term.eval(ctx, &mut buf)?;
        }
        out.extend(buf.into_iter().map(T::lit));
        Ok(())
    }

    pub fn row<T: Scalar>(&self, ctx: &RowContext<'_>) -> Result<Vec<T>, BasisError> {
        let mut out = Vec::with_capacity(self.width());
        self.row_into(ctx, &mut out)?;
        Ok(out)
    }

    /// Row-major design matrix over `rows`.
    pub fn matrix<T: Scalar>(
        &self,
        rows: &[RowContext<'_>],
    ) -> Result<ndarray::Array2<T>, BasisError> {
        use rayon::prelude::*;
        let p = self.width();
        let mut data = vec![T::zero(); rows.len() * p];
        data.par_chunks_mut(p.max(1))
            .zip(rows.par_iter())
            .try_for_each(|(chunk, ctx)| -> Result<(), BasisError> {
                let row: Vec<T> = self.row(ctx)?;
                chunk.copy_from_slice(&row);
                Ok(())
            })?;
        Ok(ndarray::Array2::from_shape_vec((rows.len(), p), data).expect("shape"))
    }
}

/// Design matrix of `formula` over `rows` (compiled on the same rows).
pub fn build_design(
    panel: &PanelDataset,
    regimes: &[String],
    rows: &[RowContext<'_>],
    formula: &FormulaSpec,
) -> Result<(Design, ndarray::Array2<f64>), BasisError> {
    let design = Design::compile(formula, panel, regimes, rows)?;
    let x = design.matrix(rows)?;
    Ok((design, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_panel, CovariateSpec, PanelSchema, Timing};
    use proptest::prelude::*;

    #[test]
    fn time_basis_at_one_has_no_truncations() {
        let spec = SplineSpec::new(vec![2.0, 4.0], [1.0, 10.0]).unwrap();
        assert_eq!(
            time_basis(1.0_f64, &spec).unwrap(),
            vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn time_basis_arithmetic() {
        let spec = SplineSpec::new(vec![2.0, 4.0], [1.0, 10.0]).unwrap();
        let g = time_basis(5.0_f64, &spec).unwrap();
        assert_eq!(g, vec![5.0, 25.0, 125.0, 27.0, 1.0, 4.0, 0.0]);
        let g32 = time_basis(5.0_f32, &spec).unwrap();
        assert_eq!(g32[4], 1.0);
    }

    #[test]
    fn transplant_knots_width() {
        let spec = SplineSpec::transplant_time();
        assert_eq!(spec.internal_knots, vec![2.0, 4.0, 12.0, 24.0, 54.0]);
        let g = time_basis(120.0_f64, &spec).unwrap();
        assert_eq!(g.len(), 10);
        assert_eq!(g[3], 118.0_f64.powi(3));
        assert_eq!(g[8], 119.0);
        assert_eq!(g[9], 0.0);
    }

    #[test]
    fn domain_and_knot_errors() {
        let spec = SplineSpec::transplant_time();
        assert!(matches!(
            time_basis(0.0_f64, &spec),
            Err(BasisError::OutOfDomain(_))
        ));
        assert!(time_basis(f64::NAN, &spec).is_err());
        assert!(SplineSpec::new(vec![4.0, 2.0], [1.0, 10.0]).is_err());
        assert!(SplineSpec::new(vec![1.0, 2.0], [1.0, 10.0]).is_err());
        assert!(SplineSpec::new(vec![2.0, 10.0], [1.0, 10.0]).is_err());
    }

    #[test]
    fn knots_continuity() {
        let spec = SplineSpec::transplant_time();
        let eps = 1e-6;
        let knots: Vec<f64> = spec
            .internal_knots
            .iter()
            .chain(&spec.boundary_knots)
            .copied()
            .collect();
        for (j, &knot) in knots.iter().enumerate() {
            let below = time_basis(knot.max(1.0), &spec).unwrap()[3 + j];
            let above = time_basis(knot + eps, &spec).unwrap()[3 + j];
            assert_eq!(below, 0.0);
            assert!(above.abs() <= eps * (1.0 + 1e-9), "jump at knot {knot}");
        }
    }

    #[test]
    fn percentile_knots_on_uniform_grid() {
        let sample: Vec<f64> = (1..=100).map(f64::from).collect();
        // independent type-7 computation: x[floor(h)] + frac(h) * gap, h = 99 p
        let expect = |p: f64| {
            let h = 99.0 * p;
            let lo = h.floor();
            (lo + 1.0) + (h - lo)
        };
        let spec = covariate_knots(&sample, &SplinePercentiles::default())
            .unwrap()
            .unwrap();
        for (got, p) in spec.internal_knots.iter().zip([0.35, 0.65]) {
            assert!((got - expect(p)).abs() < 1e-12);
        }
        assert!((spec.internal_knots[0] - 35.65).abs() < 1e-12);
        assert!((spec.internal_knots[1] - 65.35).abs() < 1e-12);
        assert!((spec.boundary_knots[0] - 5.95).abs() < 1e-12);
        assert!((spec.boundary_knots[1] - 95.05).abs() < 1e-12);
    }

    #[test]
    fn constant_covariate_collapses_to_polynomial() {
        let knots = covariate_knots(&[3.0; 20], &SplinePercentiles::default()).unwrap();
        assert!(knots.is_none());
        assert_eq!(covariate_spline(2.0_f64, knots.as_ref()), vec![2.0, 4.0, 8.0]);
    }

    #[test]
    fn below_lowest_knot_zeroes_truncations() {
        let spec = SplineSpec::new(vec![10.0, 20.0], [5.0, 30.0]).unwrap();
        let f = covariate_spline(4.0_f64, Some(&spec));
        assert!(f[3..].iter().all(|v| *v == 0.0));
    }

    fn panel() -> PanelDataset {
        let schema = PanelSchema::new(vec![
            CovariateSpec::numeric("meld", Timing::TimeVarying),
            CovariateSpec::categorical("sex", &["F", "M"], "F", Timing::Baseline),
            CovariateSpec::categorical("dx", &["a", "b", "c"], "a", Timing::Baseline),
        ]);
        let text = "id,k,meld,sex,dx,B,H,C,Y\n\
            1,1,10,M,b,0,0,0,0\n1,2,20,M,b,0,0,0,0\n\
            2,1,30,F,c,0,0,0,0\n2,2,40,F,c,0,0,0,1\n";
        load_panel(text.as_bytes(), &schema).unwrap()
    }

    fn rows(panel: &PanelDataset, z: usize) -> Vec<RowContext<'_>> {
        panel
            .subjects()
            .iter()
            .flat_map(|s| {
                (0..s.records.len())
                    .map(move |i| RowContext::new(s.records[i].k, z, &s.records[..=i]))
            })
            .collect()
    }

    #[test]
    fn intercept_only_is_ones() {
        let p = panel();
        let r = rows(&p, 0);
        let (d, x) = build_design(&p, &["g0".into()], &r, &FormulaSpec::intercept_only()).unwrap();
        assert_eq!(d.names(), &["(Intercept)".to_string()]);
        assert!(x.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn reference_coding() {
        let p = panel();
        let r = rows(&p, 0);
        let f = FormulaSpec::new(false, vec![Term::Covariate("sex".into())]);
        let (d, x) = build_design(&p, &["g0".into()], &r, &f).unwrap();
        assert_eq!(d.width(), 1);
        assert_eq!(x.column(0).to_vec(), vec![1.0, 1.0, 0.0, 0.0]);
        let f = FormulaSpec::new(false, vec![Term::Covariate("dx".into())]);
        let (d, _) = build_design(&p, &["g0".into()], &r, &f).unwrap();
        assert_eq!(d.names(), &["dx[b]".to_string(), "dx[c]".to_string()]);
    }

    #[test]
    fn msm_layout_and_column_order() {
        let p = panel();
        let regimes: Vec<String> = vec!["g0".into(), "g1".into()];
        let r = rows(&p, 1);
        let mut f = FormulaSpec::msm_time_by_regime(SplineSpec::transplant_time());
        // declared out of order on purpose
        f.terms.insert(0, Term::Baseline("sex".into()));
        let d = Design::compile(&f, &p, &regimes, &r).unwrap();
        let names = d.names();
        assert_eq!(names[0], "(Intercept)");
        assert_eq!(names[1], "k");
        assert_eq!(names[11], "sex[M]@1");
        assert_eq!(names[12], "Z[g1]");
        assert_eq!(names[13], "Z[g1]:k");
        let row: Vec<f64> = d.row(&r[1]).unwrap();
        assert_eq!(row[1], 2.0);
        assert_eq!(row[12], 1.0);
        assert_eq!(row[13], 2.0);
    }

    #[test]
    fn saturated_levels_and_unknown_level() {
        let p = panel();
        let r = rows(&p, 0);
        let f = FormulaSpec::new(
            false,
            vec![Term::Saturated(vec![
                Factor::Interval,
                Factor::History("meld".into()),
            ])],
        );
        let (d, x) = build_design(&p, &["g0".into()], &r, &f).unwrap();
        assert_eq!(d.width(), 4);
        for row in x.rows() {
            assert_eq!(row.sum(), 1.0);
        }
        let other = [crate::data::PanelRecord::new(1, vec![99.0, 0.0, 0.0, 0.0], false, false, false, false)];
        let ctx = RowContext::new(1, 0, &other);
        assert!(matches!(
            d.row::<f64>(&ctx),
            Err(BasisError::UnknownLevel { .. })
        ));
    }

    #[test]
    fn unknown_covariate_is_rejected() {
        let p = panel();
        let r = rows(&p, 0);
        let f = FormulaSpec::new(true, vec![Term::Covariate("bmi".into())]);
        assert!(matches!(
            build_design(&p, &["g0".into()], &r, &f),
            Err(BasisError::UnknownCovariate(_))
        ));
    }

    #[test]
    fn formula_round_trips_through_json() {
        let f = FormulaSpec::new(
            true,
            vec![
                Term::TimeSpline(SplineSpec::transplant_time()),
                Term::CovariateSpline {
                    covariate: "meld".into(),
                    baseline: false,
                    percentiles: SplinePercentiles::default(),
                },
                Term::Interaction(vec![Term::Baseline("sex".into()), Term::TimeLinear]),
                Term::Saturated(vec![Factor::Interval, Factor::Regime]),
            ],
        );
        let text = serde_json::to_string(&f).unwrap();
        let back: FormulaSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, f);
    }

    proptest! {
        #[test]
        fn design_is_bit_reproducible(k in 1u32..200) {
            let spec = SplineSpec::transplant_time();
            let a = time_basis(f64::from(k), &spec).unwrap();
            let b = time_basis(f64::from(k), &spec).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn truncations_vanish_below_knots(x in -50.0f64..1.0) {
            let spec = SplineSpec::transplant_time();
            let f = covariate_spline(x, Some(&spec));
            prop_assert!(f[3..].iter().all(|v| *v == 0.0));
        }
    }
}
