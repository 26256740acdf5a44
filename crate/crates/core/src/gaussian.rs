//! Isotropic Gaussian posteriors and their weighted product.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// `N(mean, variance * I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    mean: Vec<f64>,
    variance: f64,
}

impl GaussianPosterior {
    pub fn new(mean: Vec<f64>, variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::param(
                "variance",
                format!("{variance} is not a positive finite number"),
            ));
        }
        if let Some(bad) = mean.iter().find(|m| !m.is_finite()) {
            return Err(Error::param(
                "mean",
                format!("component {bad} is not finite"),
            ));
        }
        Ok(GaussianPosterior { mean, variance })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn into_mean(self) -> Vec<f64> {
        self.mean
    }
}

/// Tolerance below which a weight vector counts as already normalized.
const SIMPLEX_EXACT_TOL: f64 = 1e-12;
/// Weight vectors summing to within this of 1 are renormalized; anything
/// further off is rejected.
const SIMPLEX_RENORM_TOL: f64 = 1e-6;

/// A point on the probability simplex, one weight per objective.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceWeights(Vec<f64>);

impl PreferenceWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::param("w", "empty weight vector"));
        }
        if let Some(bad) = w.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(Error::param(
                "w",
                format!("weight {bad} is negative or not finite"),
            ));
        }
        let sum: f64 = w.iter().sum();
        let off = (sum - 1.0).abs();
        if off <= SIMPLEX_EXACT_TOL {
            Ok(PreferenceWeights(w))
        } else if off <= SIMPLEX_RENORM_TOL {
            Ok(PreferenceWeights(w.iter().map(|x| x / sum).collect()))
        } else {
            Err(Error::param("w", format!("weights sum to {sum}, not 1")))
        }
    }

    /// Two-objective weights `(w, 1 - w)`.
    pub fn pair(w: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::param("w", format!("{w} not in [0, 1]")));
        }
        Self::new(vec![w, 1.0 - w])
    }

    /// The vertex `e_i` of the simplex.
    pub fn vertex(len: usize, i: usize) -> Result<Self> {
        if i >= len {
            return Err(Error::param(
                "w",
                format!("vertex {i} out of range for {len} objectives"),
            ));
        }
        let mut w = vec![0.0; len];
        w[i] = 1.0;
        Ok(PreferenceWeights(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Indices with strictly positive weight.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(i, _)| i)
    }
}

/// Normalized weighted product `prod_i p_i^{w_i}` of isotropic Gaussians.
///
/// The result has precision `sum_i w_i / var_i` and a precision-weighted mean.
/// Entries with zero weight are skipped and may hold anything. Contributors
/// are summed in a canonical order, so permuting the inputs (together with
/// their weights) gives a bit-identical answer.
pub fn fuse(posteriors: &[GaussianPosterior], w: &PreferenceWeights) -> Result<GaussianPosterior> {
    if posteriors.is_empty() {
        return Err(Error::param("posteriors", "empty list"));
    }
    if posteriors.len() != w.len() {
        return Err(Error::dim("fuse weights", posteriors.len(), w.len()));
    }
    let dim = posteriors[0].dim();
    if let Some(p) = posteriors.iter().find(|p| p.dim() != dim) {
        return Err(Error::dim("fuse posteriors", dim, p.dim()));
    }

    let mut terms: Vec<(f64, &GaussianPosterior)> = Vec::with_capacity(posteriors.len());
    for i in w.support() {
        let p = &posteriors[i];
        if !(p.variance > 0.0 && p.variance.is_finite()) {
            return Err(Error::param(
                "variance",
                format!(
                    "posterior {i} has variance {} with weight {}",
                    p.variance, w.0[i]
                ),
            ));
        }
        terms.push((w.0[i], p));
    }
    if terms.is_empty() {
        return Err(Error::param("w", "no positive weight"));
    }
    terms.sort_by(canonical_order);

    // Precisions are taken relative to the smallest variance so that a single
    // contributor, or several identical ones, reproduce their input exactly.
    let reference = terms[0].1.variance;
    let rel: Vec<f64> = terms
        .iter()
        .map(|(wi, p)| wi * (reference / p.variance))
        .collect();
    let total: f64 = rel.iter().sum();
    let variance = reference / total;

    let mut mean = vec![0.0; dim];
    for (k, m) in mean.iter_mut().enumerate() {
        let mut acc = (rel[0] / total) * terms[0].1.mean[k];
        for (r, (_, p)) in rel.iter().zip(&terms).skip(1) {
            acc += (r / total) * p.mean[k];
        }
        *m = acc;
    }
    GaussianPosterior::new(mean, variance)
}

fn canonical_order(a: &(f64, &GaussianPosterior), b: &(f64, &GaussianPosterior)) -> Ordering {
    a.1.variance
        .total_cmp(&b.1.variance)
        .then(a.0.total_cmp(&b.0))
        .then_with(|| {
            a.1.mean
                .iter()
                .zip(&b.1.mean)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

pub fn log_density(p: &GaussianPosterior, x: &[f64]) -> Result<f64> {
    if x.len() != p.dim() {
        return Err(Error::dim("log_density", p.dim(), x.len()));
    }
    let sq: f64 = x.iter().zip(&p.mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let d = p.dim() as f64;
    Ok(-0.5 * d * (2.0 * std::f64::consts::PI * p.variance).ln() - sq / (2.0 * p.variance))
}

/// `KL(p || q)` between isotropic Gaussians of the same dimension.
pub fn kl_divergence(p: &GaussianPosterior, q: &GaussianPosterior) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::dim("kl_divergence", p.dim(), q.dim()));
    }
    let d = p.dim() as f64;
    let sq: f64 = p
        .mean
        .iter()
        .zip(&q.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let per_dim = 0.5 * (q.variance / p.variance).ln() + p.variance / (2.0 * q.variance) - 0.5;
    Ok((d * per_dim + sq / (2.0 * q.variance)).max(0.0))
}
