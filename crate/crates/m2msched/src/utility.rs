//! Sigmoidal per-class utilities and the proportionally fair system utility.
//!
//! The class utility is
//!
//! ```text
//! U(l) = 1 - c*(1/(1 + e^{-a(l-b)}) - d),   c = (1+e^{ab})/e^{ab},  d = 1/(1+e^{ab})
//! ```
//!
//! which algebraically collapses to `U(l) = c / (1 + e^{a(l-b)})` with
//! `c = 1 + e^{-ab}`. All evaluation goes through that collapsed form (and its
//! log), so nothing here ever computes `e^{ab}` and overflow is impossible for
//! any positive `a*b`. `U(0) = 1` holds exactly: `log U(0)` is the difference
//! of two identical `log1p` calls.

use thiserror::Error;

use crate::model::QosClass;

/// log of the smallest positive f64 (subnormal); below this a utility has
/// underflowed to zero at floating precision.
pub const LOG_UNDERFLOW: f64 = -744.0;

#[derive(Debug, Error, PartialEq)]
pub enum UtilityError {
    #[error("latency must be finite and >= 0, got {0}")]
    Domain(f64),
    #[error("empty sample stream")]
    EmptyStream,
}

/// Utility shape `(a, b)`: roll-off factor and inflection latency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilityParams {
    pub a: f64,
    pub b: f64,
}

impl UtilityParams {
    pub fn new(a: f64, b: f64) -> Self {
        assert!(a > 0.0 && b > 0.0, "utility parameters must be positive");
        UtilityParams { a, b }
    }

    /// Normalization constant `c = (1+e^{ab})/e^{ab} = 1 + e^{-ab}`.
    pub fn c(&self) -> f64 {
        1.0 + (-self.a * self.b).exp()
    }

    /// Offset `d = 1/(1+e^{ab})`, computed as `e^{-ab}/(1+e^{-ab})`.
    pub fn d(&self) -> f64 {
        let t = (-self.a * self.b).exp();
        t / (1.0 + t)
    }

    /// `U(l)` in (0, 1]; exactly 1 at `l = 0`.
    pub fn utility(&self, l: f64) -> Result<f64, UtilityError> {
        Ok(self.log_utility(l)?.exp())
    }

    /// `log U(l)`, stable for any latency.
    pub fn log_utility(&self, l: f64) -> Result<f64, UtilityError> {
        if !(l >= 0.0) || l.is_nan() {
            return Err(UtilityError::Domain(l));
        }
        Ok((-self.a * self.b).exp().ln_1p() - softplus(self.a * (l - self.b)))
    }

    /// Analytic `dU/dl = -c a e^{-a(l-b)} / (1+e^{-a(l-b)})^2`; always negative.
    pub fn derivative(&self, l: f64) -> Result<f64, UtilityError> {
        if !(l >= 0.0) || l.is_nan() {
            return Err(UtilityError::Domain(l));
        }
        let x = self.a * (l - self.b);
        Ok(-self.c() * self.a * sigmoid(x) * sigmoid(-x))
    }
}

impl From<&QosClass> for UtilityParams {
    fn from(c: &QosClass) -> Self {
        UtilityParams::new(c.a, c.b)
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `1/(1+e^{-x})` without overflow.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let t = x.exp();
        t / (1.0 + t)
    }
}

/// Proportionally fair system utility `sum_i beta_i log U_i(l_i)`.
///
/// Returns `-inf` when any class utility underflows to zero at floating
/// precision; optimizers treat that as "reject this iterate". Panics if the
/// latency slice does not cover every class (contract error).
pub fn system_log_utility(classes: &[QosClass], latencies: &[f64]) -> f64 {
    assert_eq!(
        classes.len(),
        latencies.len(),
        "one latency per class required"
    );
    let mut v = 0.0;
    for (c, &l) in classes.iter().zip(latencies) {
        let log_u = UtilityParams::from(c)
            .log_utility(l)
            .unwrap_or(f64::NEG_INFINITY);
        if log_u <= LOG_UNDERFLOW {
            return f64::NEG_INFINITY;
        }
        v += c.beta * log_u;
    }
    v
}

/// Utility of the mean latency over a sample stream (not the mean of the
/// utilities). Uses a Welford running mean so the stream never needs to be
/// materialized.
pub fn steady_state_utility<I>(params: UtilityParams, samples: I) -> Result<f64, UtilityError>
where
    I: IntoIterator<Item = f64>,
{
    let mut mean = 0.0;
    let mut n = 0u64;
    for s in samples {
        n += 1;
        mean += (s - mean) / n as f64;
    }
    if n == 0 {
        return Err(UtilityError::EmptyStream);
    }
    params.utility(mean)
}
