//! Beta-Bernoulli numeric kernels: regularized incomplete beta, quantiles,
//! posterior sampling, Thompson selection, and the exploration scheduler.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HgmError, Result};

/// Shape pair of a Beta posterior over a success probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    alpha: f64,
    beta: f64,
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha.is_finite() && beta.is_finite() && alpha > 0.0 && beta > 0.0) {
            return Err(HgmError::Param(format!(
                "Beta shapes must be positive and finite, got ({alpha}, {beta})"
            )));
        }
        Ok(Self { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Posterior for `successes`/`failures` observed counts under a uniform
    /// prior, sharpened by `tau`: Beta(tau*(1+s), tau*(1+f)).
    pub fn sharpened_posterior(successes: u64, failures: u64, tau: Tau) -> Self {
        // tau >= 1 and counts >= 0, so shapes are always valid.
        Self {
            alpha: tau.value() * (1.0 + successes as f64),
            beta: tau.value() * (1.0 + failures as f64),
        }
    }
}

/// Posterior sharpening multiplier produced by the exploration scheduler.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Tau(f64);

impl Tau {
    pub fn new(value: f64) -> Result<Self> {
        if !(value.is_finite() && value > 0.0) {
            return Err(HgmError::Param(format!(
                "tau must be positive and finite, got {value}"
            )));
        }
        Ok(Self(value))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// tau = B / b for total budget B and remaining budget b.
pub fn scheduler_tau(total_budget: u64, remaining_budget: u64) -> Result<Tau> {
    if remaining_budget == 0 || remaining_budget > total_budget {
        return Err(HgmError::Param(format!(
            "remaining budget {remaining_budget} must be in 1..={total_budget}"
        )));
    }
    Tau::new(total_budget as f64 / remaining_budget as f64)
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function (Lanczos approximation), x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEF[0];
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

fn ln_beta_fn(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Continued fraction for the incomplete beta (Lentz's algorithm).
fn beta_cont_frac(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 400;
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;

    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;

    for m in 1..=MAX_ITER {
        let m_f = m as f64;
        let m2 = 2.0 * m_f;

        let aa = m_f * (b - m_f) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;

        let aa = -(a + m_f) * (qab + m_f) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(alpha, beta): the CDF of
/// Beta(alpha, beta) at x.
pub fn reg_inc_beta(x: f64, params: BetaParams) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) || x.is_nan() {
        return Err(HgmError::Param(format!("x must lie in [0,1], got {x}")));
    }
    let (a, b) = (params.alpha, params.beta);
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let front = (a * x.ln() + b * (1.0 - x).ln() - ln_beta_fn(a, b)).exp();
    // Symmetry reduction keeps the continued fraction in its fast-converging
    // region: I_x(a,b) = 1 - I_{1-x}(b,a).
    let v = if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cont_frac(a, b, x) / a
    } else {
        1.0 - front * beta_cont_frac(b, a, 1.0 - x) / b
    };
    Ok(v.clamp(0.0, 1.0))
}

fn beta_pdf(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    ((a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_beta_fn(a, b)).exp()
}

/// Inverse of `reg_inc_beta` in x: the q-quantile of Beta(alpha, beta).
///
/// Safeguarded Newton iteration with a bisection bracket; converges to a CDF
/// residual below 1e-12 (well inside the 1e-10 contract).
pub fn beta_quantile(q: f64, params: BetaParams) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(HgmError::Param(format!("q must lie in (0,1), got {q}")));
    }
    let (a, b) = (params.alpha, params.beta);
    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    let mut x = a / (a + b);
    for _ in 0..200 {
        let f = reg_inc_beta(x, params)? - q;
        if f.abs() <= 1e-13 {
            break;
        }
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let dfdx = beta_pdf(x, a, b);
        let newton = x - f / dfdx;
        x = if dfdx > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 1e-16 {
            break;
        }
    }
    Ok(x)
}

/// One draw from Beta(alpha, beta) by CDF inversion.
///
/// RNG consumption contract: exactly one `f64` uniform draw per call,
/// regardless of the shape parameters. Replay depends on this.
pub fn sample_beta<R: Rng + ?Sized>(params: BetaParams, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    // random() is [0,1); pin into the open interval so the quantile is defined.
    let u = u.clamp(1e-16, 1.0 - 1e-16);
    beta_quantile(u, params).expect("u in (0,1) and params validated")
}

/// Thompson selection: one posterior sample per candidate, in list order,
/// returning the id with the maximal sample. Exact ties break to the
/// smallest id.
///
/// RNG consumption contract: exactly one uniform draw per candidate.
pub fn thompson_select<I, R>(candidates: &[(I, BetaParams)], rng: &mut R) -> Result<I>
where
    I: Copy + Ord,
    R: Rng + ?Sized,
{
    if candidates.is_empty() {
        return Err(HgmError::Usage("thompson_select on empty candidate list".into()));
    }
    let mut best: Option<(I, f64)> = None;
    for &(id, params) in candidates {
        let s = sample_beta(params, rng);
        best = match best {
            None => Some((id, s)),
            Some((bid, bs)) => {
                if s > bs || (s == bs && id < bid) {
                    Some((id, s))
                } else {
                    Some((bid, bs))
                }
            }
        };
    }
    Ok(best.map(|(id, _)| id).unwrap())
}
