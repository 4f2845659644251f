//! Digamma, trigamma and log-gamma for positive real arguments.
//!
//! Each function shifts the argument above 10 with the recurrence and then
//! evaluates the asymptotic (Stirling / Bernoulli) series, which is accurate
//! to well below 1e-12 from that point on.

use crate::error::{Error, Result};

const SHIFT: f64 = 10.0;

fn check(x: f64, name: &str) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "{name}({x}) requires a finite x > 0"
        )))
    }
}

pub fn digamma(x: f64) -> Result<f64> {
    check(x, "digamma")?;
    Ok(digamma_unchecked(x))
}

pub fn trigamma(x: f64) -> Result<f64> {
    check(x, "trigamma")?;
    Ok(trigamma_unchecked(x))
}

pub fn lgamma(x: f64) -> Result<f64> {
    check(x, "lgamma")?;
    Ok(lgamma_unchecked(x))
}

/// Digamma without the domain check; callers guarantee `x > 0`.
pub(crate) fn digamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < SHIFT {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * 691.0 / 32760.0)))));
    acc + x.ln() - 0.5 * inv - series
}

pub(crate) fn trigamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < SHIFT {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        + 0.5 * inv2
        + inv
            * inv2
            * (1.0 / 6.0
                - inv2
                    * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * 5.0 / 66.0))));
    acc + series
}

pub(crate) fn lgamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < SHIFT {
        acc -= x.ln();
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        * (1.0 / 12.0
            - inv2
                * (1.0 / 360.0
                    - inv2 * (1.0 / 1260.0 - inv2 * (1.0 / 1680.0 - inv2 * (1.0 / 1188.0)))));
    acc + (x - 0.5) * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI).ln() + series
}
