//! Reference computations that share no code with the library.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use msdda_core::harness::ExperimentConfig;

/// `|a - b| / max(|b|, 1)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

pub fn tiny_config() -> ExperimentConfig {
    ExperimentConfig::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/tiny.toml"))
        .unwrap()
}

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (x - mean) * (x - mean) / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
}

/// Composite Simpson weights for `n` (odd) uniform nodes with spacing `h`.
fn simpson_weights(n: usize, h: f64) -> Vec<f64> {
    assert!(n % 2 == 1 && n >= 3);
    (0..n)
        .map(|i| {
            let c = if i == 0 || i == n - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            c * h / 3.0
        })
        .collect()
}

/// Mean and variance of the density proportional to `exp(log_f)` over
/// `[lo, hi]` with `n` Simpson nodes.
pub fn moments_on_interval(log_f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> (f64, f64) {
    let h = (hi - lo) / (n - 1) as f64;
    let xs: Vec<f64> = (0..n).map(|i| lo + i as f64 * h).collect();
    let logs: Vec<f64> = xs.iter().map(|&x| log_f(x)).collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ws = simpson_weights(n, h);
    let mut z = 0.0;
    let mut m1 = 0.0;
    for ((x, l), w) in xs.iter().zip(&logs).zip(&ws) {
        let p = w * (l - top).exp();
        z += p;
        m1 += p * x;
    }
    let mean = m1 / z;
    let mut m2 = 0.0;
    for ((x, l), w) in xs.iter().zip(&logs).zip(&ws) {
        m2 += w * (l - top).exp() * (x - mean) * (x - mean);
    }
    (mean, m2 / z)
}

/// Maximizer of a concave function on `[lo, hi]` by golden-section search.
pub fn argmax_concave(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - g * (hi - lo);
    let mut b = lo + g * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..200 {
        if fa < fb {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = f(b);
        } else {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = f(a);
        }
        if hi - lo < 1e-13 * (1.0 + lo.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Moments of the density `exp(log_f)` for a log-concave `log_f`: locate the
/// mode, estimate the width from the curvature there, and integrate over 14
/// widths either side.
pub fn laplace_centered_moments(log_f: impl Fn(f64) -> f64, nodes: usize) -> (f64, f64) {
    let mode = argmax_concave(&log_f, -1e4, 1e4);
    let h = 1e-3 * (1.0 + mode.abs());
    let curv = -(log_f(mode + h) - 2.0 * log_f(mode) + log_f(mode - h)) / (h * h);
    assert!(curv > 0.0, "not log-concave at the mode");
    let width = curv.sqrt().recip();
    moments_on_interval(&log_f, mode - 14.0 * width, mode + 14.0 * width, nodes)
}

/// Mean and variance of `prod_i N(m_i, v_i)^{w_i}` (normalized), by
/// integration on a uniform grid.
pub fn density_product_moments(means: &[f64], vars: &[f64], w: &[f64]) -> (f64, f64) {
    let live: Vec<usize> = (0..w.len()).filter(|&i| w[i] > 0.0).collect();
    let lo = live
        .iter()
        .map(|&i| means[i] - 12.0 * vars[i].sqrt())
        .fold(f64::INFINITY, f64::min);
    let hi = live
        .iter()
        .map(|&i| means[i] + 12.0 * vars[i].sqrt())
        .fold(f64::NEG_INFINITY, f64::max);
    let log_f = |x: f64| {
        live.iter()
            .map(|&i| w[i] * log_normal(x, means[i], vars[i]))
            .sum::<f64>()
    };
    moments_on_interval(log_f, lo, hi, 20_001)
}

/// A linear noise schedule, recomputed from its definition.
pub struct PlainSchedule {
    pub betas: Vec<f64>,
}

impl PlainSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        PlainSchedule { betas }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `prod_{s <= t} (1 - beta_s)`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.betas[..t].iter().map(|b| 1.0 - b).product()
    }
}

/// Moments of `q(x_{t-1} | x_t) exp(c E[x_0 | x_{t-1}] / lambda)` for data
/// `N(m, s2)`, with every density written out from the forward process and
/// both expectations done by quadrature.
pub fn tilted_moments_by_integration(
    sched: &PlainSchedule,
    m: f64,
    s2: f64,
    c: f64,
    lambda: f64,
    t: usize,
    x_t: f64,
) -> (f64, f64) {
    let ab_prev = sched.alpha_bar(t - 1);
    let beta = sched.beta(t);
    let q_of = |z: f64| -> f64 {
        if t == 1 {
            return c * z;
        }
        // x_{t-1} | x_0 ~ N(sqrt(ab_prev) x_0, 1 - ab_prev)
        let inner =
            |x0: f64| log_normal(x0, m, s2) + log_normal(z, ab_prev.sqrt() * x0, 1.0 - ab_prev);
        c * laplace_centered_moments(inner, 401).0
    };
    // Marginal of x_{t-1} is N(sqrt(ab_prev) m, ab_prev s2 + 1 - ab_prev).
    let outer = |z: f64| {
        log_normal(z, ab_prev.sqrt() * m, ab_prev * s2 + 1.0 - ab_prev)
            + log_normal(x_t, (1.0 - beta).sqrt() * z, beta)
            + q_of(z) / lambda
    };
    laplace_centered_moments(outer, 1001)
}

/// Central difference of `f` along coordinate `i`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] += h;
    let mut m = x.to_vec();
    m[i] -= h;
    (f(&p) - f(&m)) / (2.0 * h)
}

/// Sample mean and standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
