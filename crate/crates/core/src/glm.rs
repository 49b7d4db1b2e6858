//! Weighted logistic regression by damped Newton iterations.
//!
//! Columns are rescaled to unit max-abs internally so the raw truncated-power
//! bases stay well conditioned; coefficients are reported on the caller's scale.

use std::collections::hash_map::{Entry, HashMap};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use thiserror::Error;

use crate::scalar::{clamp_prob, expit, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlmError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("case weights must be finite and nonnegative")]
    InvalidWeights,
    #[error("outcome must be 0 or 1")]
    InvalidOutcome,
    #[error("weighted outcome has no {0}s")]
    DegenerateOutcome(u8),
    #[error("no convergence after {iterations} iterations (max score {max_score:e})")]
    NonConvergence { iterations: usize, max_score: f64 },
    #[error("complete separation: coefficient of `{column}` diverges")]
    CompleteSeparation { column: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmOptions {
    pub max_iter: usize,
    /// Tolerance on the weight-normalized max score.
    pub tol: f64,
    /// Diagonal ridge, in units of the mean case weight.
    pub ridge: f64,
    /// Linear predictor magnitude beyond which fitted rows count as separated.
    pub separation_eta: f64,
}

impl Default for GlmOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-8,
            ridge: 1e-10,
            separation_eta: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit<T> {
    pub coefficients: Array1<T>,
    pub columns: Vec<String>,
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: T,
    /// `max_j |Σ w (y − p) x_j|` at the solution, original column scale.
    pub max_score: T,
}

const CHUNK: usize = 2048;

struct Pass<T> {
    loglik: T,
    grad: Vec<T>,
    hess: Vec<T>,
}

/// Log-likelihood, score and (packed full) negative Hessian at `beta`.
fn pass<T: Scalar>(
    x: ArrayView2<'_, T>,
    y: &[T],
    w: &[T],
    beta: &[T],
    with_hessian: bool,
) -> Pass<T> {
    let p = beta.len();
    let n = y.len();
    let chunks: Vec<Pass<T>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let mut out = Pass {
                loglik: T::zero(),
                grad: vec![T::zero(); p],
                hess: if with_hessian {
                    vec![T::zero(); p * p]
                } else {
                    Vec::new()
                },
            };
            for i in lo..hi {
                let wi = w[i];
                if wi == T::zero() {
                    continue;
                }
                let row = x.row(i);
                let eta = row
                    .iter()
                    .zip(beta)
                    .fold(T::zero(), |acc, (a, b)| acc + *a * *b);
                let mu = expit(eta);
                let pc = clamp_prob(mu);
                out.loglik += wi * (y[i] * pc.ln() + (T::one() - y[i]) * (T::one() - pc).ln());
                let r = wi * (y[i] - mu);
                for (g, xv) in out.grad.iter_mut().zip(row.iter()) {
                    *g += r * *xv;
                }
                if with_hessian {
                    let v = wi * mu * (T::one() - mu);
                    for a in 0..p {
                        let va = v * row[a];
                        if va == T::zero() {
                            continue;
                        }
                        for b in a..p {
                            out.hess[a * p + b] += va * row[b];
                        }
                    }
                }
            }
            out
        })
        .collect();
    // ordered reduction keeps results independent of the thread schedule
    let mut total = Pass {
        loglik: T::zero(),
        grad: vec![T::zero(); p],
        hess: if with_hessian {
            vec![T::zero(); p * p]
        } else {
            Vec::new()
        },
    };
    for c in chunks {
        total.loglik += c.loglik;
        for (a, b) in total.grad.iter_mut().zip(&c.grad) {
            *a += *b;
        }
        for (a, b) in total.hess.iter_mut().zip(&c.hess) {
            *a += *b;
        }
    }
    if with_hessian {
        for a in 0..p {
            for b in 0..a {
                total.hess[a * p + b] = total.hess[b * p + a];
            }
        }
    }
    total
}

/// Solve `(H + λI) d = g` by Cholesky, growing λ until `H + λI` factors.
fn solve_spd<T: Scalar>(hess: &[T], grad: &[T], ridge: T) -> Vec<T> {
    let p = grad.len();
    let mut lambda = ridge.max(T::min_positive_value());
    loop {
        if let Some(l) = cholesky(hess, p, lambda) {
            let mut z = vec![T::zero(); p];
            for i in 0..p {
                let mut s = grad[i];
                for j in 0..i {
                    s -= l[i * p + j] * z[j];
                }
                z[i] = s / l[i * p + i];
            }
            let mut d = vec![T::zero(); p];
            for i in (0..p).rev() {
                let mut s = z[i];
                for j in i + 1..p {
                    s -= l[j * p + i] * d[j];
                }
                d[i] = s / l[i * p + i];
            }
            return d;
        }
        lambda = lambda * T::lit(10.0);
    }
}

fn cholesky<T: Scalar>(a: &[T], p: usize, lambda: T) -> Option<Vec<T>> {
    let mut l = vec![T::zero(); p * p];
    for i in 0..p {
        for j in 0..=i {
            let mut s = a[i * p + j];
            if i == j {
                s += lambda;
            }
            for m in 0..j {
                s -= l[i * p + m] * l[j * p + m];
            }
            if i == j {
                if s <= T::zero() || !s.is_finite() {
                    return None;
                }
                l[i * p + i] = s.sqrt();
            } else {
                l[i * p + j] = s / l[j * p + j];
            }
        }
    }
    Some(l)
}

fn max_abs<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |a, b| a.max(b.abs()))
}

/// Maximize `Σ w [y log p + (1 − y) log(1 − p)]`, `p = expit(x·β)`.
pub fn fit_pooled_logistic<T: Scalar>(
    design: ArrayView2<'_, T>,
    outcome: ArrayView1<'_, T>,
    weights: ArrayView1<'_, T>,
    columns: &[String],
    opts: &GlmOptions,
) -> Result<GlmFit<T>, GlmError> {
    let (n, p) = design.dim();
    if outcome.len() != n || weights.len() != n {
        return Err(GlmError::Dimension(format!(
            "{n} design rows, {} outcomes, {} weights",
            outcome.len(),
            weights.len()
        )));
    }
    if columns.len() != p {
        return Err(GlmError::Dimension(format!(
            "{p} design columns, {} names",
            columns.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < T::zero()) {
        return Err(GlmError::InvalidWeights);
    }
    if outcome.iter().any(|y| *y != T::zero() && *y != T::one()) {
        return Err(GlmError::InvalidOutcome);
    }
    let y: Vec<T> = outcome.to_vec();
    let w: Vec<T> = weights.to_vec();
    let (mut w1, mut w0) = (T::zero(), T::zero());
    for (yi, wi) in y.iter().zip(&w) {
        if *yi == T::one() {
            w1 += *wi;
        } else {
            w0 += *wi;
        }
    }
    if w1 <= T::zero() {
        return Err(GlmError::DegenerateOutcome(1));
    }
    if w0 <= T::zero() {
        return Err(GlmError::DegenerateOutcome(0));
    }
    let wsum = w1 + w0;

    let scale: Vec<T> = design
        .axis_iter(Axis(1))
        .map(|col| {
            let m = col.iter().fold(T::zero(), |a, b| a.max(b.abs()));
            if m > T::zero() {
                m
            } else {
                T::one()
            }
        })
        .collect();
    let mut xs: Array2<T> = design.to_owned();
    for (mut col, s) in xs.axis_iter_mut(Axis(1)).zip(&scale) {
        col.mapv_inplace(|v| v / *s);
    }

    let (xs, y, w) = collapse(xs, y, w);

    let tol = T::lit(opts.tol).max(T::epsilon() * T::lit(64.0));
    // ridge in units of the mean case weight keeps the fit weight-scale invariant
    let ridge = T::lit(opts.ridge) * wsum / T::from_usize(n).unwrap_or(T::one());
    let mut beta = vec![T::zero(); p];
    let mut cur = pass(xs.view(), &y, &w, &beta, true);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        let step = solve_spd(&cur.hess, &cur.grad, ridge);
        // Newton decrement: predicted mean log-likelihood gain of the full step
        let decrement = cur.grad.iter().zip(&step).fold(T::zero(), |a, (g, d)| a + *g * *d) / wsum;
        if max_abs(&cur.grad) / wsum < tol && decrement < tol * tol {
            converged = true;
            break;
        }
        iterations += 1;
        match line_search(xs.view(), &y, &w, &beta, &step, cur.loglik) {
            Some(next) => {
                beta = next;
                cur = pass(xs.view(), &y, &w, &beta, true);
            }
            None => {
                // no ascent possible at working precision
                converged = max_abs(&cur.grad) / wsum < tol.sqrt();
                break;
            }
        }
    }
    if converged {
        // full steps drive the unnormalized score toward rounding level
        for _ in 0..3 {
            let step = solve_spd(&cur.hess, &cur.grad, ridge);
            let cand: Vec<T> = beta.iter().zip(&step).map(|(b, d)| *b + *d).collect();
            let next = pass(xs.view(), &y, &w, &cand, true);
            if max_abs(&next.grad) < max_abs(&cur.grad) && next.loglik.is_finite() {
                beta = cand;
                cur = next;
            } else {
                break;
            }
        }
    }

    let coefficients: Array1<T> = beta.iter().zip(&scale).map(|(b, s)| *b / *s).collect();
    if let Some(column) = separated(xs.view(), &w, &beta, columns, opts.separation_eta) {
        return Err(GlmError::CompleteSeparation { column });
    }
    let max_score = design
        .axis_iter(Axis(1))
        .zip(&scale)
        .zip(&cur.grad)
        .map(|((_, s), g)| (*g * *s).abs())
        .fold(T::zero(), T::max);
    if !converged {
        return Err(GlmError::NonConvergence {
            iterations,
            max_score: max_score.as_f64(),
        });
    }
    Ok(GlmFit {
        coefficients,
        columns: columns.to_vec(),
        converged,
        iterations,
        log_likelihood: cur.loglik,
        max_score,
    })
}

/// Merge rows with identical covariates and outcome, summing their weights.
/// The likelihood, score and Hessian are unchanged; indicator designs shrink
/// to a handful of cells.
fn collapse<T: Scalar>(xs: Array2<T>, y: Vec<T>, w: Vec<T>) -> (Array2<T>, Vec<T>, Vec<T>) {
    let (n, p) = xs.dim();
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut first = Vec::new();
    let mut merged_w: Vec<T> = Vec::new();
    for i in 0..n {
        if w[i] == T::zero() {
            continue;
        }
        let mut key: Vec<u64> = xs.row(i).iter().map(|v| v.as_f64().to_bits()).collect();
        key.push(u64::from(y[i] == T::one()));
        match index.entry(key) {
            Entry::Occupied(e) => merged_w[*e.get()] += w[i],
            Entry::Vacant(e) => {
                e.insert(first.len());
                first.push(i);
                merged_w.push(w[i]);
            }
        }
    }
    if first.len() * 2 > n {
        return (xs, y, w);
    }
    let mut out = Array2::zeros((first.len(), p));
    for (mut row, &i) in out.axis_iter_mut(Axis(0)).zip(&first) {
        row.assign(&xs.row(i));
    }
    let y = first.iter().map(|&i| y[i]).collect();
    (out, y, merged_w)
}

fn line_search<T: Scalar>(
    x: ArrayView2<'_, T>,
    y: &[T],
    w: &[T],
    beta: &[T],
    step: &[T],
    loglik: T,
) -> Option<Vec<T>> {
    let mut t = T::one();
    let slack = loglik.abs() * T::epsilon() * T::lit(16.0);
    for _ in 0..40 {
        let cand: Vec<T> = beta.iter().zip(step).map(|(b, d)| *b + t * *d).collect();
        let ll = pass(x, y, w, &cand, false).loglik;
        if ll.is_finite() && ll >= loglik - slack {
            return Some(cand);
        }
        t = t * T::lit(0.5);
    }
    None
}

/// Name of the column driving fitted probabilities to 0 or 1, if any.
fn separated<T: Scalar>(
    xs: ArrayView2<'_, T>,
    w: &[T],
    beta: &[T],
    columns: &[String],
    limit: f64,
) -> Option<String> {
    let limit = T::lit(limit);
    let worst = (0..xs.nrows())
        .into_par_iter()
        .filter(|&i| w[i] > T::zero())
        .map(|i| {
            let row = xs.row(i);
            let eta = row
                .iter()
                .zip(beta)
                .fold(T::zero(), |acc, (a, b)| acc + *a * *b);
            (eta.abs(), i)
        })
        .filter(|(e, _)| *e > limit)
        .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(b.1.cmp(&a.1)))?;
    let row = xs.row(worst.1);
    let (j, _) = beta
        .iter()
        .zip(row.iter())
        .enumerate()
        .map(|(j, (b, x))| (j, (*b * *x).abs()))
        .fold((0, T::zero()), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
    Some(columns[j].clone())
}

impl<T: Scalar> GlmFit<T> {
    pub fn width(&self) -> usize {
        self.coefficients.len()
    }

    pub fn linear_predictor(&self, row: &[T]) -> Result<T, GlmError> {
        if row.len() != self.width() {
            return Err(GlmError::Dimension(format!(
                "row has {} values, fit has {} coefficients",
                row.len(),
                self.width()
            )));
        }
        Ok(row
            .iter()
            .zip(self.coefficients.iter())
            .fold(T::zero(), |acc, (a, b)| acc + *a * *b))
    }

    /// `expit(row · coef)`, clamped to `[1e−15, 1 − 1e−15]`.
    pub fn predict_prob(&self, row: &[T]) -> Result<T, GlmError> {
        Ok(clamp_prob(expit(self.linear_predictor(row)?)))
    }

    pub fn predict(&self, design: ArrayView2<'_, T>) -> Result<Array1<T>, GlmError> {
        if design.ncols() != self.width() {
            return Err(GlmError::Dimension(format!(
                "design has {} columns, fit has {} coefficients",
                design.ncols(),
                self.width()
            )));
        }
        Ok(design.dot(&self.coefficients).mapv(|e| clamp_prob(expit(e))))
    }
}

/// Weighted log-likelihood at arbitrary coefficients (original scale).
pub fn log_likelihood<T: Scalar>(
    design: ArrayView2<'_, T>,
    outcome: ArrayView1<'_, T>,
    weights: ArrayView1<'_, T>,
    beta: &[T],
) -> T {
    let y = outcome.to_vec();
    let w = weights.to_vec();
    pass(design, &y, &w, beta, false).loglik
}

/// Weighted score `Σ w (y − p) x` at arbitrary coefficients (original scale).
pub fn score<T: Scalar>(
    design: ArrayView2<'_, T>,
    outcome: ArrayView1<'_, T>,
    weights: ArrayView1<'_, T>,
    beta: &[T],
) -> Vec<T> {
    let y = outcome.to_vec();
    let w = weights.to_vec();
    pass(design, &y, &w, beta, false).grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::logit;
    use ndarray::{array, Array1, Array2};
    use proptest::prelude::*;

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|j| format!("x{j}")).collect()
    }

    fn fit(x: &Array2<f64>, y: &Array1<f64>, w: &Array1<f64>) -> Result<GlmFit<f64>, GlmError> {
        fit_pooled_logistic(x.view(), y.view(), w.view(), &names(x.ncols()), &GlmOptions::default())
    }

    #[test]
    fn intercept_only_is_logit_of_weighted_mean() {
        let x = Array2::ones((5, 1));
        let y = array![1.0, 0.0, 0.0, 1.0, 0.0];
        let w = array![1.0, 2.0, 0.5, 3.0, 1.5];
        let f = fit(&x, &y, &w).unwrap();
        let p = 4.0 / 8.0;
        assert!((f.coefficients[0] - logit(p)).abs() < 1e-12);
    }

    #[test]
    fn saturated_reproduces_stratum_means() {
        // three strata with distinct frequencies
        let mut x = Array2::zeros((12, 3));
        let mut y = Array1::zeros(12);
        let ys = [1, 0, 0, 0, 1, 1, 0, 0, 1, 1, 1, 0];
        for i in 0..12 {
            x[[i, i / 4]] = 1.0;
            y[i] = f64::from(ys[i]);
        }
        let f = fit(&x, &y, &Array1::ones(12)).unwrap();
        let p = f.predict(x.view()).unwrap();
        let means = [0.25, 0.5, 0.75];
        for i in 0..12 {
            assert!((p[i] - means[i / 4]).abs() < 1e-12);
        }
    }

    #[test]
    fn doubling_weights_leaves_solution() {
        let x = array![[1.0, 0.1], [1.0, 0.5], [1.0, 0.9], [1.0, 1.3], [1.0, 2.0]];
        let y = array![0.0, 1.0, 0.0, 1.0, 1.0];
        let w = array![1.0, 1.0, 2.0, 1.0, 0.5];
        let a = fit(&x, &y, &w).unwrap();
        let b = fit(&x, &y, &(&w * 2.0)).unwrap();
        for (u, v) in a.coefficients.iter().zip(b.coefficients.iter()) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn predict_policies() {
        let zero: GlmFit<f64> = GlmFit {
            coefficients: array![0.0, 0.0],
            columns: names(2),
            converged: true,
            iterations: 0,
            log_likelihood: 0.0,
            max_score: 0.0,
        };
        assert_eq!(zero.predict_prob(&[1.0, 3.0]).unwrap(), 0.5);
        assert!(zero.predict_prob(&[1.0]).is_err());
        let mut one = zero.clone();
        one.coefficients = array![logit(0.3)];
        assert!((one.predict_prob(&[1.0]).unwrap() - 0.3).abs() < 1e-15);
        one.coefficients = array![40.0];
        assert_eq!(one.predict_prob(&[1.0]).unwrap(), 1.0 - 1e-15);
        one.coefficients = array![-40.0];
        assert_eq!(one.predict_prob(&[1.0]).unwrap(), 1e-15);
    }

    #[test]
    fn separation_names_the_column() {
        let x = array![[1.0, 0.0], [1.0, 0.0], [1.0, 1.0], [1.0, 1.0], [1.0, 0.0]];
        let y = array![0.0, 1.0, 1.0, 1.0, 0.0];
        match fit(&x, &y, &Array1::ones(5)) {
            Err(GlmError::CompleteSeparation { column }) => assert_eq!(column, "x1"),
            other => panic!("expected separation, got {other:?}"),
        }
    }

    #[test]
    fn degenerate_outcome() {
        let x = Array2::ones((3, 1));
        assert_eq!(
            fit(&x, &array![0.0, 0.0, 0.0], &Array1::ones(3)),
            Err(GlmError::DegenerateOutcome(1))
        );
        // the only event carries zero weight
        assert_eq!(
            fit(&x, &array![1.0, 0.0, 0.0], &array![0.0, 1.0, 1.0]),
            Err(GlmError::DegenerateOutcome(1))
        );
    }

    #[test]
    fn input_validation() {
        let x = Array2::ones((3, 1));
        assert!(matches!(
            fit(&x, &array![0.0, 1.0], &Array1::ones(3)),
            Err(GlmError::Dimension(_))
        ));
        assert_eq!(
            fit(&x, &array![0.0, 1.0, 0.0], &array![1.0, -1.0, 1.0]),
            Err(GlmError::InvalidWeights)
        );
        assert_eq!(
            fit(&x, &array![0.0, 2.0, 0.0], &Array1::ones(3)),
            Err(GlmError::InvalidOutcome)
        );
    }

    #[test]
    fn single_precision_fit() {
        let x = Array2::<f32>::ones((4, 1));
        let y = Array1::from(vec![1.0_f32, 0.0, 0.0, 0.0]);
        let f = fit_pooled_logistic(
            x.view(),
            y.view(),
            Array1::ones(4).view(),
            &names(1),
            &GlmOptions::default(),
        )
        .unwrap();
        assert!((f.coefficients[0] - logit(0.25_f32)).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn row_order_invariance(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 60;
            let mut x = Array2::zeros((n, 3));
            let mut y = Array1::zeros(n);
            for i in 0..n {
                x[[i, 0]] = 1.0;
                x[[i, 1]] = rng.random_range(-1.0..1.0);
                x[[i, 2]] = rng.random_range(0.0..5.0);
                let eta = 0.3 + x[[i, 1]] - 0.2 * x[[i, 2]];
                y[i] = f64::from(u8::from(rng.random::<f64>() < expit(eta)));
            }
            let w = Array1::from_shape_fn(n, |i| 0.5 + (i % 3) as f64);
            let a = fit(&x, &y, &w);
            let perm: Vec<usize> = (0..n).rev().collect();
            let xp = x.select(Axis(0), &perm);
            let yp = y.select(Axis(0), &perm);
            let wp = w.select(Axis(0), &perm);
            let b = fit(&xp, &yp, &wp);
            if let (Ok(a), Ok(b)) = (a, b) {
                for (u, v) in a.coefficients.iter().zip(b.coefficients.iter()) {
                    prop_assert!((u - v).abs() < 1e-8);
                }
            }
        }
    }
}
