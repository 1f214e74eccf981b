//! Regression solvers behind every nuisance fit and both targeting steps:
//! weighted least squares, quasi-binomial logistic regression by IRLS, and
//! the one-parameter logistic fluctuation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

const IRLS_MAX_ITER: usize = 100;
const IRLS_DEVIANCE_TOL: f64 = 1e-10;
const SEPARATION_EPS: f64 = 1e-10;
const RANK_TOL: f64 = 1e-10;
const FLUCTUATION_SCORE_TOL: f64 = 1e-10;
const FLUCTUATION_MAX_ITER: usize = 200;

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Row-major design: one row per observation, first column the intercept
/// unless the caller built it otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix(DMatrix<f64>);

impl DesignMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.ncols() == 0 {
            return Err(contract("design matrix needs at least one column"));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(contract("design matrix has non-finite entries"));
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: &[Vec<f64>], ncols: usize) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            if r.len() != ncols {
                return Err(contract(format!(
                    "design row {i} has {} entries, expected {ncols}",
                    r.len()
                )));
            }
        }
        Self::new(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }

    /// Intercept-only design with `n` rows.
    pub fn intercept(n: usize) -> Self {
        Self(DMatrix::from_element(n, 1, 1.0))
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Logistic,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub family: Family,
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub deviance: f64,
    /// Set when IRLS stopped because fitted probabilities ran to 0 or 1.
    pub separation: bool,
    /// Columns dropped as collinear with earlier ones (coefficient 0).
    pub dropped: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluctuationFit {
    pub epsilon: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Score Σ wᵢhᵢ(yᵢ − expit(offsetᵢ + ε hᵢ)) at the returned ε.
    pub score: f64,
}

fn check_weights(w: &[f64], n: usize) -> Result<()> {
    if w.len() != n {
        return Err(contract(format!(
            "weight vector has length {}, expected {n}",
            w.len()
        )));
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(contract("weights must be finite and non-negative"));
    }
    if w.iter().sum::<f64>() <= 0.0 {
        return Err(contract("weights sum to zero"));
    }
    Ok(())
}

fn check_len(what: &str, len: usize, n: usize) -> Result<()> {
    if len != n {
        return Err(contract(format!("{what} has length {len}, expected {n}")));
    }
    Ok(())
}

/// Weighted least squares of `y` on `x` through a QR factorization of the
/// retained columns. Columns whose weighted residual after projection on the
/// earlier retained columns is negligible are dropped.
fn wls(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let n = x.nrows();
    let p = x.ncols();
    let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let xw = DMatrix::from_fn(n, p, |i, j| x[(i, j)] * sw[i]);

    // Rank detection by Gram-Schmidt with one re-orthogonalization pass.
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..p {
        let col = xw.column(j).into_owned();
        let norm0 = col.norm();
        let mut v = col;
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm0 == 0.0 || norm <= RANK_TOL * norm0 {
            dropped.push(j);
        } else {
            basis.push(v / norm);
            keep.push(j);
        }
    }

    let mut beta = vec![0.0; p];
    if keep.is_empty() {
        return (beta, dropped);
    }
    let xk = DMatrix::from_fn(n, keep.len(), |i, k| xw[(i, keep[k])]);
    let yw = DVector::from_iterator(n, y.iter().zip(&sw).map(|(a, b)| a * b));
    let qr = xk.qr();
    let qty = qr.q().transpose() * yw;
    let r = qr.r();
    let sol = r
        .solve_upper_triangular(&qty)
        .expect("retained columns are linearly independent");
    for (k, &j) in keep.iter().enumerate() {
        beta[j] = sol[k];
    }
    (beta, dropped)
}

fn linear_predictor(x: &DMatrix<f64>, beta: &[f64], offset: &[f64]) -> Vec<f64> {
    (0..x.nrows())
        .map(|i| {
            offset[i]
                + x.row(i)
                    .iter()
                    .zip(beta)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        })
        .collect()
}

fn binomial_deviance(y: &[f64], p: &[f64], w: &[f64]) -> f64 {
    let mut dev = 0.0;
    for ((&yi, &pi), &wi) in y.iter().zip(p).zip(w) {
        if wi == 0.0 {
            continue;
        }
        let mut d = 0.0;
        if yi > 0.0 {
            d += yi * (yi / pi).ln();
        }
        if yi < 1.0 {
            d += (1.0 - yi) * ((1.0 - yi) / (1.0 - pi)).ln();
        }
        dev += wi * d;
    }
    2.0 * dev
}

/// Quasi-binomial logistic regression by iteratively reweighted least squares.
///
/// Outcomes may be fractional. Non-convergence (iteration cap or separation)
/// is reported through the returned flags rather than as an error; the
/// coefficients are then those of the last stable iterate.
pub fn fit_logistic(x: &DesignMatrix, y: &[f64], w: &[f64], offset: &[f64]) -> Result<GlmFit> {
    let n = x.nrows();
    check_len("outcome", y.len(), n)?;
    check_len("offset", offset.len(), n)?;
    check_weights(w, n)?;
    if y.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(contract("logistic outcomes must lie in [0,1]"));
    }
    if offset.iter().any(|v| !v.is_finite()) {
        return Err(contract("offset must be finite"));
    }
    let xm = x.as_matrix();
    let p_cols = x.ncols();

    let mut beta = vec![0.0; p_cols];
    let mut eta = linear_predictor(xm, &beta, offset);
    let mut mu: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
    let mut dev = binomial_deviance(y, &mu, w);
    let mut dropped = Vec::new();
    let mut converged = false;
    let mut separation = false;
    let mut iterations = 0;

    while iterations < IRLS_MAX_ITER {
        iterations += 1;
        let mut wz = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        for i in 0..n {
            let v = (mu[i] * (1.0 - mu[i])).max(f64::MIN_POSITIVE);
            wz.push(w[i] * v);
            z.push(eta[i] - offset[i] + (y[i] - mu[i]) / v);
        }
        if wz.iter().sum::<f64>() <= 0.0 {
            separation = true;
            break;
        }
        let (mut beta_new, dr) = wls(xm, &z, &wz);
        dropped = dr;

        let mut eta_new = linear_predictor(xm, &beta_new, offset);
        let mut mu_new: Vec<f64> = eta_new.iter().map(|&e| expit(e)).collect();
        let mut dev_new = binomial_deviance(y, &mu_new, w);

        // Step-halving when the deviance does not decrease.
        let mut halvings = 0;
        while !(dev_new <= dev * (1.0 + 1e-12) + 1e-12) && halvings < 30 {
            for (b, old) in beta_new.iter_mut().zip(&beta) {
                *b = 0.5 * (*b + old);
            }
            eta_new = linear_predictor(xm, &beta_new, offset);
            mu_new = eta_new.iter().map(|&e| expit(e)).collect();
            dev_new = binomial_deviance(y, &mu_new, w);
            halvings += 1;
        }

        let norm_old: f64 = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
        let norm_new: f64 = beta_new.iter().map(|b| b * b).sum::<f64>().sqrt();
        let extreme = mu_new
            .iter()
            .zip(w)
            .any(|(&m, &wi)| wi > 0.0 && !(SEPARATION_EPS..=1.0 - SEPARATION_EPS).contains(&m));
        if extreme && norm_new > norm_old {
            separation = true;
            break;
        }

        let change = (dev_new - dev).abs() / (dev_new.abs() + 0.1);
        beta = beta_new;
        eta = eta_new;
        mu = mu_new;
        dev = dev_new;
        if change < IRLS_DEVIANCE_TOL {
            converged = true;
            break;
        }
    }

    Ok(GlmFit {
        family: Family::Logistic,
        coefficients: beta,
        converged,
        iterations,
        deviance: dev,
        separation,
        dropped,
    })
}

/// Weighted least squares. Collinear trailing columns get coefficient 0.
pub fn fit_linear(x: &DesignMatrix, y: &[f64], w: &[f64]) -> Result<GlmFit> {
    let n = x.nrows();
    check_len("outcome", y.len(), n)?;
    check_weights(w, n)?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(contract("linear outcomes must be finite"));
    }
    let (beta, dropped) = wls(x.as_matrix(), y, w);
    let fitted = linear_predictor(x.as_matrix(), &beta, &vec![0.0; n]);
    let deviance = y
        .iter()
        .zip(&fitted)
        .zip(w)
        .map(|((a, b), wi)| wi * (a - b) * (a - b))
        .sum();
    Ok(GlmFit {
        family: Family::Linear,
        coefficients: beta,
        converged: true,
        iterations: 1,
        deviance,
        separation: false,
        dropped,
    })
}

pub fn predict(fit: &GlmFit, x: &DesignMatrix, offset: &[f64]) -> Result<Vec<f64>> {
    if x.ncols() != fit.coefficients.len() {
        return Err(contract(format!(
            "design has {} columns but the fit has {} coefficients",
            x.ncols(),
            fit.coefficients.len()
        )));
    }
    check_len("offset", offset.len(), x.nrows())?;
    let eta = linear_predictor(x.as_matrix(), &fit.coefficients, offset);
    Ok(match fit.family {
        Family::Logistic => eta.into_iter().map(expit).collect(),
        Family::Linear => eta,
    })
}

fn fluctuation_terms(offset: &[f64], h: &[f64], y: &[f64], w: &[f64], eps: f64) -> (f64, f64, f64) {
    let mut score = 0.0;
    let mut info = 0.0;
    let mut loglik = 0.0;
    for i in 0..offset.len() {
        if w[i] == 0.0 {
            continue;
        }
        let eta = offset[i] + eps * h[i];
        let p = expit(eta);
        score += w[i] * h[i] * (y[i] - p);
        info += w[i] * h[i] * h[i] * p * (1.0 - p);
        // log p = -softplus(-eta), log(1-p) = -softplus(eta)
        loglik -= w[i] * (y[i] * softplus(-eta) + (1.0 - y[i]) * softplus(eta));
    }
    (score, info, loglik)
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Maximum-likelihood ε in the submodel expit(offset + ε·h) by Newton's
/// method with step-halving.
pub fn fit_fluctuation(offset: &[f64], h: &[f64], y: &[f64], w: &[f64]) -> Result<FluctuationFit> {
    let n = offset.len();
    check_len("clever covariate", h.len(), n)?;
    check_len("outcome", y.len(), n)?;
    check_len("weights", w.len(), n)?;
    if offset.iter().any(|v| !v.is_finite()) {
        return Err(contract(
            "fluctuation offset is not finite; truncate predictions before taking logits",
        ));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(contract("clever covariate must be finite"));
    }
    if y.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(contract("fluctuation outcomes must lie in [0,1]"));
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(contract("weights must be finite and non-negative"));
    }
    if h.iter().zip(w).all(|(hi, wi)| hi * wi == 0.0) {
        return Ok(FluctuationFit {
            epsilon: 0.0,
            converged: true,
            iterations: 0,
            score: 0.0,
        });
    }

    let mut eps = 0.0;
    let (mut score, mut info, mut ll) = fluctuation_terms(offset, h, y, w, eps);
    let mut iterations = 0;
    while score.abs() > FLUCTUATION_SCORE_TOL && iterations < FLUCTUATION_MAX_ITER {
        iterations += 1;
        if !(info > 0.0) {
            break;
        }
        let mut step = score / info;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = eps + step;
            let (s2, i2, l2) = fluctuation_terms(offset, h, y, w, cand);
            if l2 >= ll - 1e-12 * ll.abs().max(1.0) {
                eps = cand;
                score = s2;
                info = i2;
                ll = l2;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted || step.abs() <= f64::EPSILON * eps.abs().max(1.0) {
            break;
        }
    }
    Ok(FluctuationFit {
        epsilon: eps,
        converged: score.abs() <= FLUCTUATION_SCORE_TOL,
        iterations,
        score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn design(rows: Vec<Vec<f64>>) -> DesignMatrix {
        let p = rows[0].len();
        DesignMatrix::from_rows(&rows, p).unwrap()
    }

    #[test]
    fn intercept_only_symmetric() {
        let x = DesignMatrix::intercept(4);
        let fit = fit_logistic(&x, &[0.0, 1.0, 0.0, 1.0], &[1.0; 4], &[0.0; 4]).unwrap();
        assert!(fit.converged);
        assert!(fit.coefficients[0].abs() < 1e-12);
    }

    #[test]
    fn separation_is_flagged_not_thrown() {
        let xs = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];
        let x = design(xs.iter().map(|&v| vec![1.0, v]).collect());
        let y: Vec<f64> = xs.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        let fit = fit_logistic(&x, &y, &[1.0; 6], &[0.0; 6]).unwrap();
        assert!(!fit.converged);
        assert!(fit.separation);
        assert!(fit.coefficients.iter().all(|c| c.is_finite()));
    }

    #[test]
    fn logistic_contract_errors() {
        let x = DesignMatrix::intercept(3);
        assert!(fit_logistic(&x, &[0.0, 1.0], &[1.0; 3], &[0.0; 3]).is_err());
        assert!(fit_logistic(&x, &[0.0, 1.0, 1.0], &[0.0; 3], &[0.0; 3]).is_err());
    }

    #[test]
    fn exact_linear_fit() {
        let x = design((1..=5).map(|v| vec![1.0, v as f64]).collect());
        let y: Vec<f64> = (1..=5).map(|v| 2.0 * v as f64).collect();
        let fit = fit_linear(&x, &y, &[1.0; 5]).unwrap();
        assert!(fit.coefficients[0].abs() < 1e-12);
        assert!((fit.coefficients[1] - 2.0).abs() < 1e-12);
        let pred = predict(&fit, &x, &[0.0; 5]).unwrap();
        for (a, b) in pred.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_column_gets_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let v: f64 = rng.random();
                vec![1.0, v, v]
            })
            .collect();
        let y: Vec<f64> = rows.iter().map(|r| 1.0 + 3.0 * r[1] + rng.random::<f64>()).collect();
        let full = fit_linear(&design(rows.clone()), &y, &[1.0; 20]).unwrap();
        assert_eq!(full.dropped, vec![2]);
        assert_eq!(full.coefficients[2], 0.0);
        let reduced_rows: Vec<Vec<f64>> = rows.iter().map(|r| r[..2].to_vec()).collect();
        let reduced = fit_linear(&design(reduced_rows), &y, &[1.0; 20]).unwrap();
        assert!((full.deviance - reduced.deviance).abs() < 1e-10);
    }

    #[test]
    fn predict_zero_coefficients_half() {
        let fit = GlmFit {
            family: Family::Logistic,
            coefficients: vec![0.0, 0.0],
            converged: true,
            iterations: 0,
            deviance: 0.0,
            separation: false,
            dropped: vec![],
        };
        let x = design(vec![vec![1.0, 3.0], vec![1.0, -1.0]]);
        assert_eq!(predict(&fit, &x, &[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let bad = design(vec![vec![1.0]]);
        assert!(predict(&fit, &bad, &[0.0]).is_err());
    }

    #[test]
    fn logistic_score_equations_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![1.0, rng.random::<f64>() * 2.0 - 1.0, rng.random_range(0..2) as f64])
            .collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| (rng.random::<f64>() < expit(0.3 + r[1] - r[2])) as u8 as f64)
            .collect();
        let w: Vec<f64> = (0..n).map(|_| 0.5 + rng.random::<f64>()).collect();
        let x = design(rows.clone());
        let fit = fit_logistic(&x, &y, &w, &vec![0.0; n]).unwrap();
        assert!(fit.converged);
        let p = predict(&fit, &x, &vec![0.0; n]).unwrap();
        let sw: f64 = w.iter().sum();
        for j in 0..3 {
            let s: f64 = (0..n).map(|i| w[i] * rows[i][j] * (y[i] - p[i])).sum();
            assert!(s.abs() <= 1e-8 * sw, "column {j} score {s}");
        }
    }

    #[test]
    fn fluctuation_degenerate_cases() {
        let offset = [0.2, -0.4, 1.0];
        let y: Vec<f64> = offset.iter().map(|&o| expit(o)).collect();
        let fit = fit_fluctuation(&offset, &[1.0, 2.0, 0.5], &y, &[1.0; 3]).unwrap();
        assert!(fit.converged);
        assert!(fit.epsilon.abs() < 1e-12);

        let fit = fit_fluctuation(&offset, &[0.0; 3], &[0.1, 0.9, 0.3], &[1.0; 3]).unwrap();
        assert!(fit.converged);
        assert_eq!(fit.epsilon, 0.0);

        assert!(fit_fluctuation(&[f64::INFINITY, 0.0, 0.0], &[1.0; 3], &y, &[1.0; 3]).is_err());
    }

    #[test]
    fn solvers_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..50).map(|_| vec![1.0, rng.random(), rng.random()]).collect();
        let y: Vec<f64> = (0..50).map(|_| rng.random()).collect();
        let x = design(rows);
        let a = fit_logistic(&x, &y, &[1.0; 50], &[0.0; 50]).unwrap();
        let b = fit_logistic(&x, &y, &[1.0; 50], &[0.0; 50]).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn fluctuation_rescaling_equivariance(seed in 0u64..500, c in 0.1f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 30;
            let offset: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let h: Vec<f64> = (0..n).map(|_| 0.2 + rng.random::<f64>() * 3.0).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let w = vec![1.0; n];
            let a = fit_fluctuation(&offset, &h, &y, &w).unwrap();
            let hc: Vec<f64> = h.iter().map(|v| v * c).collect();
            let b = fit_fluctuation(&offset, &hc, &y, &w).unwrap();
            prop_assert!(a.converged && b.converged);
            prop_assert!((b.epsilon - a.epsilon / c).abs() <= 1e-9 * (1.0 + a.epsilon.abs() / c));
            for i in 0..n {
                let fa = expit(offset[i] + a.epsilon * h[i]);
                let fb = expit(offset[i] + b.epsilon * hc[i]);
                prop_assert!((fa - fb).abs() < 1e-10);
            }
        }

        #[test]
        fn truncation_clamp_idempotent(p in -1.0f64..2.0) {
            let t = crate::estimand::Truncation::default();
            prop_assert_eq!(t.apply(t.apply(p)), t.apply(p));
        }
    }
}
