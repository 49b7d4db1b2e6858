//! Resource-constrained regimes and their per-interval resolution.
//!
//! A regime caps the marginal utilization of the superior (`B`) and inferior
//! (`H`) treatments at `q_k` and `m_k` times their factual utilization. The
//! cap is reached by scaling every eligible individual's treatment probability
//! by a common factor, on the treated side when the cap is below the natural
//! utilization (`ℶ = 1`) and on the untreated side otherwise. When the cap
//! exceeds the eligible mass (`ℵ = 0`) everyone eligible is treated.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Marginals below this are treated as zero in the ratio denominators.
pub const DENOMINATOR_GUARD: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegimeError {
    #[error("unknown preset `{0}` (expected g0, g1, g2 or g3)")]
    UnknownPreset(String),
    #[error("regime `{label}`: multiplier {value} at interval {k} must be finite and nonnegative")]
    InvalidMultiplier { label: String, k: u32, value: f64 },
    #[error("regime `{label}`: multiplier series has {len} entries, horizon is {horizon}")]
    SeriesTooShort {
        label: String,
        len: usize,
        horizon: u32,
    },
    #[error("marginal `{name}` = {value} is outside [0, 1]")]
    MarginalOutOfRange { name: &'static str, value: f64 },
    #[error("natural utilization {natural:e} is too small to scale down to target {target:e}")]
    ConstraintInfeasible { natural: f64, target: f64 },
}

/// A multiplier that is constant or given per interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Multiplier {
    Scalar(f64),
    Series(Vec<f64>),
}

impl Multiplier {
    /// Value at interval `k ≥ 1`.
    pub fn at(&self, k: u32) -> Option<f64> {
        match self {
            Multiplier::Scalar(v) => Some(*v),
            Multiplier::Series(s) => s.get(k as usize - 1).copied(),
        }
    }
}

impl From<f64> for Multiplier {
    fn from(v: f64) -> Self {
        Multiplier::Scalar(v)
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub label: String,
    pub q: Multiplier,
    pub m: Multiplier,
    #[serde(default = "default_true")]
    pub abolish_censoring: bool,
}

impl RegimeSpec {
    pub fn new(label: &str, q: impl Into<Multiplier>, m: impl Into<Multiplier>) -> Self {
        Self {
            label: label.to_string(),
            q: q.into(),
            m: m.into(),
            abolish_censoring: true,
        }
    }

    pub fn validate(&self, horizon: u32) -> Result<(), RegimeError> {
        for series in [&self.q, &self.m] {
            if let Multiplier::Series(s) = series {
                if s.len() < horizon as usize {
                    return Err(RegimeError::SeriesTooShort {
                        label: self.label.clone(),
                        len: s.len(),
                        horizon,
                    });
                }
            }
            for k in 1..=horizon.max(1) {
                let value = series.at(k).unwrap_or(f64::NAN);
                if !value.is_finite() || value < 0.0 {
                    return Err(RegimeError::InvalidMultiplier {
                        label: self.label.clone(),
                        k,
                        value,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn q_at(&self, k: u32) -> f64 {
        self.q.at(k).unwrap_or(f64::NAN)
    }

    pub fn m_at(&self, k: u32) -> f64 {
        self.m.at(k).unwrap_or(f64::NAN)
    }
}

/// Named regimes: current practice (`g0`), no inferior treatment (`g1`) and
/// inferior-treatment expansions by 25% (`g2`) and 50% (`g3`).
pub fn preset(name: &str) -> Result<RegimeSpec, RegimeError> {
    let m = match name {
        "g0" => 1.0,
        "g1" => 0.0,
        "g2" => 1.25,
        "g3" => 1.5,
        other => return Err(RegimeError::UnknownPreset(other.to_string())),
    };
    Ok(RegimeSpec::new(name, 1.0, m))
}

/// How the scaling factor is derived from the marginals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Caps at the eligible mass and picks the scaled side by `ℶ`.
    #[default]
    Generalized,
    /// Always scales the treated side by `target / natural` with an
    /// uncapped target; only valid for shrinking regimes.
    MainText,
}

/// Resolution of one treatment arm at one interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmResolution<T> {
    pub multiplier: T,
    /// Factual utilization `P(B_k = 1)`.
    pub observed: T,
    /// Natural-value utilization under the regime.
    pub natural: T,
    /// Eligible mass under the regime.
    pub eligible: T,
    pub target: T,
    pub aleph: bool,
    pub beth: bool,
    /// `α_k` (or `β_k`).
    pub scale: T,
}

impl<T: Scalar> ArmResolution<T> {
    /// Identity intervention.
    pub fn identity() -> Self {
        Self {
            multiplier: T::one(),
            observed: T::zero(),
            natural: T::zero(),
            eligible: T::zero(),
            target: T::zero(),
            aleph: true,
            beth: true,
            scale: T::one(),
        }
    }

    /// Treatment probability under the intervention for an eligible
    /// individual whose factual probability is `f`.
    #[inline]
    pub fn intervened_prob(&self, f: T) -> T {
        if self.scale == T::one() {
            f
        } else if self.beth {
            self.scale * f
        } else {
            T::one() - self.scale * (T::one() - f)
        }
    }

    /// Density ratio `f^{g+}(a) / f(a)` for an eligible individual with
    /// factual probability `f` and observed level `treated`. Returns `None`
    /// when the factual density of the observed level is zero but the ratio
    /// would not cancel.
    #[inline]
    pub fn weight_factor(&self, f: T, treated: bool) -> Option<T> {
        if self.scale == T::one() {
            return Some(T::one());
        }
        // the scaled side cancels the factual density exactly
        match (self.beth, treated) {
            (true, true) | (false, false) => Some(self.scale),
            (true, false) => {
                let num = T::one() - self.scale * f;
                let den = T::one() - f;
                ratio(num, den)
            }
            (false, true) => {
                let num = T::one() - self.scale * (T::one() - f);
                ratio(num, f)
            }
        }
    }
}

#[inline]
fn ratio<T: Scalar>(num: T, den: T) -> Option<T> {
    if den > T::zero() {
        Some(num / den)
    } else if num == T::zero() {
        Some(T::one())
    } else {
        None
    }
}

fn check_marginal<T: Scalar>(name: &'static str, value: T) -> Result<T, RegimeError> {
    let slack = T::lit(1e-9);
    if !value.is_finite() || value < -slack || value > T::one() + slack {
        return Err(RegimeError::MarginalOutOfRange {
            name,
            value: value.as_f64(),
        });
    }
    Ok(value.max(T::zero()).min(T::one()))
}

/// Resolve one arm: `ℵ = 1{mult·observed ≤ eligible}`, the target, `ℶ` and the scale.
pub fn resolve_arm<T: Scalar>(
    multiplier: T,
    observed: T,
    natural: T,
    eligible: T,
    variant: Variant,
) -> Result<ArmResolution<T>, RegimeError> {
    let observed = check_marginal("observed", observed)?;
    let natural = check_marginal("natural", natural)?;
    let eligible = check_marginal("eligible", eligible)?;
    let guard = T::lit(DENOMINATOR_GUARD);
    let wanted = multiplier * observed;
    match variant {
        Variant::MainText => {
            let scale = if natural >= guard {
                wanted / natural
            } else if wanted < guard {
                T::one()
            } else {
                return Err(RegimeError::ConstraintInfeasible {
                    natural: natural.as_f64(),
                    target: wanted.as_f64(),
                });
            };
            Ok(ArmResolution {
                multiplier,
                observed,
                natural,
                eligible,
                target: wanted,
                aleph: true,
                beth: true,
                scale,
            })
        }
        Variant::Generalized => {
            let aleph = wanted <= eligible;
            let target = if aleph { wanted } else { eligible };
            let beth = aleph && natural > target;
            let scale = if !aleph {
                T::zero()
            } else if beth {
                if natural < guard {
                    return Err(RegimeError::ConstraintInfeasible {
                        natural: natural.as_f64(),
                        target: target.as_f64(),
                    });
                }
                target / natural
            } else if eligible - natural > T::zero() {
                // target ≥ natural, so this stays in [0, 1]
                ((eligible - target) / (eligible - natural)).max(T::zero()).min(T::one())
            } else {
                T::one()
            };
            Ok(ArmResolution {
                multiplier,
                observed,
                natural,
                eligible,
                target,
                aleph,
                beth,
                scale,
            })
        }
    }
}

/// Both arms of one interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintResolution<T> {
    pub k: u32,
    pub b: ArmResolution<T>,
    pub h: ArmResolution<T>,
}

/// Marginals feeding one interval's resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Marginals<T> {
    pub b_observed: T,
    pub h_observed: T,
    pub b_natural: T,
    pub h_natural: T,
    pub r: T,
    pub s: T,
}

/// Resolve both arms of interval `k` from already-computed marginals.
pub fn resolve_constraints<T: Scalar>(
    spec: &RegimeSpec,
    k: u32,
    pi: &Marginals<T>,
    variant: Variant,
) -> Result<ConstraintResolution<T>, RegimeError> {
    Ok(ConstraintResolution {
        k,
        b: resolve_arm(T::lit(spec.q_at(k)), pi.b_observed, pi.b_natural, pi.r, variant)?,
        h: resolve_arm(T::lit(spec.m_at(k)), pi.h_observed, pi.h_natural, pi.s, variant)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gen(mult: f64, obs: f64, nat: f64, elig: f64) -> ArmResolution<f64> {
        resolve_arm(mult, obs, nat, elig, Variant::Generalized).unwrap()
    }

    #[test]
    fn presets() {
        let g1 = preset("g1").unwrap();
        assert_eq!((g1.q_at(7), g1.m_at(7)), (1.0, 0.0));
        let g0 = preset("g0").unwrap();
        assert_eq!((g0.q_at(1), g0.m_at(1)), (1.0, 1.0));
        assert_eq!(preset("g3").unwrap().m_at(3), 1.5);
        assert_eq!(preset("g2").unwrap().m_at(3), 1.25);
        assert!(preset("g0").unwrap().abolish_censoring);
        assert!(matches!(preset("g9"), Err(RegimeError::UnknownPreset(_))));
    }

    #[test]
    fn equal_natural_and_factual_gives_untreated_side() {
        let r = gen(1.0, 0.3, 0.3, 0.6);
        assert!(r.aleph && !r.beth);
        assert_eq!(r.target, 0.3);
        assert_eq!(r.scale, 1.0);
    }

    #[test]
    fn cap_above_eligibility() {
        let r = gen(2.0, 0.4, 0.35, 0.5);
        assert!(!r.aleph && !r.beth);
        assert_eq!(r.target, 0.5);
        assert_eq!(r.intervened_prob(0.2), 1.0);
    }

    #[test]
    fn zero_multiplier_scales_to_zero() {
        let r = gen(0.0, 0.3, 0.2, 0.6);
        assert!(r.beth);
        assert_eq!(r.target, 0.0);
        assert_eq!(r.intervened_prob(0.7), 0.0);
    }

    #[test]
    fn tie_at_eligibility_uses_ratio_form() {
        let r = gen(1.0, 0.5, 0.4, 0.5);
        assert!(r.aleph);
        assert_eq!(r.target, 0.5);
        assert_eq!(r.scale, 0.0);
        assert_eq!(r.intervened_prob(0.3), 1.0);
    }

    #[test]
    fn weight_factor_arithmetic() {
        let r = ArmResolution {
            scale: 0.6,
            beth: true,
            ..ArmResolution::<f64>::identity()
        };
        assert!((r.weight_factor(0.5, true).unwrap() - 0.6).abs() < 1e-15);
        assert!((r.weight_factor(0.5, false).unwrap() - 1.4).abs() < 1e-15);
        let u = ArmResolution { beth: false, ..r };
        // untreated side scaled: f+ = 1 - 0.6 * 0.5 = 0.7
        assert!((u.weight_factor(0.5, true).unwrap() - 1.4).abs() < 1e-15);
        assert!((u.weight_factor(0.5, false).unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn zero_factual_density_positivity() {
        let r = ArmResolution {
            scale: 0.5,
            beth: false,
            ..ArmResolution::<f64>::identity()
        };
        assert_eq!(r.weight_factor(0.0, true), None);
        let id = ArmResolution::<f64> {
            beth: false,
            ..ArmResolution::identity()
        };
        assert_eq!(id.weight_factor(0.0, true), Some(1.0));
    }

    #[test]
    fn main_text_variant() {
        let r = resolve_arm(0.5f64, 0.4, 0.4, 0.6, Variant::MainText).unwrap();
        assert!(r.aleph && r.beth);
        assert!((r.scale - 0.5).abs() < 1e-15);
        let r = resolve_arm(1.5f64, 0.4, 0.4, 0.5, Variant::MainText).unwrap();
        assert!((r.target - 0.6).abs() < 1e-15);
        assert!(r.intervened_prob(0.9) > 1.0);
    }

    #[test]
    fn invalid_marginals_and_infeasible_targets() {
        assert!(matches!(
            resolve_arm(1.0, 1.2, 0.1, 0.5, Variant::Generalized),
            Err(RegimeError::MarginalOutOfRange { .. })
        ));
        assert!(matches!(
            resolve_arm(1.0, 0.5, 1e-14, 0.9, Variant::MainText),
            Err(RegimeError::ConstraintInfeasible { .. })
        ));
    }

    #[test]
    fn multiplier_validation() {
        let mut g = RegimeSpec::new("x", Multiplier::Series(vec![1.0, 2.0]), 1.0);
        assert!(g.validate(2).is_ok());
        assert!(matches!(g.validate(3), Err(RegimeError::SeriesTooShort { .. })));
        g.m = Multiplier::Scalar(-1.0);
        assert!(matches!(g.validate(2), Err(RegimeError::InvalidMultiplier { .. })));
        let parsed: RegimeSpec =
            serde_json::from_str(r#"{"label":"s","q":[1,0.5],"m":0}"#).unwrap();
        assert!(parsed.abolish_censoring);
        assert_eq!(parsed.q_at(2), 0.5);
    }

    fn marginals() -> impl Strategy<Value = (f64, f64, f64)> {
        // eligible ≥ natural; observed anywhere in [0, 1]
        (0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64).prop_map(|(e, a, o)| (e, a * e, o))
    }

    proptest! {
        #[test]
        fn target_monotone_in_multiplier(
            (elig, nat, obs) in marginals(),
            q1 in 0.0..3.0f64,
            dq in 0.0..3.0f64,
        ) {
            let a = gen(q1, obs, nat, elig);
            let b = gen(q1 + dq, obs, nat, elig);
            prop_assert!(b.target >= a.target);
        }

        #[test]
        fn resolution_invariants((elig, nat, obs) in marginals(), q in 0.0..3.0f64, f in 0.0..=1.0f64) {
            let r = gen(q, obs, nat, elig);
            prop_assert!(r.target <= (q * obs).min(elig) + 1e-15);
            prop_assert!((0.0..=1.0).contains(&r.target));
            if r.aleph && r.beth {
                prop_assert!(r.target < r.natural);
            }
            if !r.aleph {
                prop_assert_eq!(r.target, elig);
            }
            let p = r.intervened_prob(f);
            prop_assert!((-1e-15..=1.0 + 1e-15).contains(&p));
            // the scaled population mass hits the target when f is homogeneous
            if nat > 1e-9 && elig > 1e-9 {
                let fr = nat / elig;
                let mass = elig * r.intervened_prob(fr);
                prop_assert!((mass - r.target).abs() < 1e-9);
            }
        }

        #[test]
        fn shrink_keeps_scale_in_unit_interval((elig, nat, obs) in marginals(), q in 0.0..=1.0f64) {
            let r = gen(q, obs.min(nat), nat, elig);
            prop_assert!((0.0..=1.0).contains(&r.scale));
        }
    }
}
