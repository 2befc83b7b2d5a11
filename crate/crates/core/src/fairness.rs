//! Fairness objectives over per-agent value vectors.
//!
//! All three objectives are concave and entrywise non-decreasing. Max-min is
//! nonsmooth; gradient-based solvers use its log-sum-exp soft-min surrogate,
//! whose error is at most `temperature * ln N`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FairnessKind {
    MaxMin,
    Proportional,
    /// Alpha-fairness with `alpha > 0`, `alpha != 1`.
    Alpha(f64),
}

impl FairnessKind {
    /// Alpha-fairness, mapping `alpha = 1` to the logarithmic case.
    pub fn alpha(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidConfig(format!("alpha must be positive and finite, got {alpha}")));
        }
        Ok(if alpha == 1.0 { FairnessKind::Proportional } else { FairnessKind::Alpha(alpha) })
    }
}

impl fmt::Display for FairnessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FairnessKind::MaxMin => write!(f, "max-min"),
            FairnessKind::Proportional => write!(f, "proportional"),
            FairnessKind::Alpha(a) => write!(f, "alpha:{a}"),
        }
    }
}

impl FromStr for FairnessKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "max-min" | "maxmin" | "max_min" => Ok(FairnessKind::MaxMin),
            "proportional" => Ok(FairnessKind::Proportional),
            _ => {
                let value = s
                    .strip_prefix("alpha:")
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown fairness kind {s:?}")))?;
                let alpha: f64 = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("cannot parse alpha from {value:?}")))?;
                FairnessKind::alpha(alpha)
            }
        }
    }
}

impl TryFrom<String> for FairnessKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FairnessKind> for String {
    fn from(kind: FairnessKind) -> String {
        kind.to_string()
    }
}

/// A fairness objective with its value floor and soft-min temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FairnessObjective {
    pub kind: FairnessKind,
    pub epsilon: f64,
    pub softmin_temperature: f64,
}

impl FairnessObjective {
    pub fn new(kind: FairnessKind, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!("epsilon must be positive, got {epsilon}")));
        }
        let kind = match kind {
            FairnessKind::Alpha(a) => FairnessKind::alpha(a)?,
            other => other,
        };
        Ok(Self { kind, epsilon, softmin_temperature: 1e-3 })
    }

    pub fn max_min(epsilon: f64) -> Result<Self> {
        Self::new(FairnessKind::MaxMin, epsilon)
    }

    pub fn proportional(epsilon: f64) -> Result<Self> {
        Self::new(FairnessKind::Proportional, epsilon)
    }

    pub fn alpha(alpha: f64, epsilon: f64) -> Result<Self> {
        Self::new(FairnessKind::alpha(alpha)?, epsilon)
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidConfig(format!("soft-min temperature must be positive, got {temperature}")));
        }
        self.softmin_temperature = temperature;
        Ok(self)
    }

    fn check_domain(&self, v: &[f64]) -> Result<()> {
        if v.is_empty() {
            return Err(Error::Empty("value vector"));
        }
        let floor = match self.kind {
            FairnessKind::MaxMin => 0.0,
            _ => self.epsilon,
        };
        match v.iter().position(|x| !(*x >= floor)) {
            Some(agent) => Err(Error::Domain { agent, value: v[agent], floor }),
            None => Ok(()),
        }
    }

    /// Exact objective value. Every entry must be at least `epsilon`
    /// (at least 0 for max-min).
    pub fn evaluate(&self, v: &[f64]) -> Result<f64> {
        self.check_domain(v)?;
        Ok(self.evaluate_unchecked(v))
    }

    fn evaluate_unchecked(&self, v: &[f64]) -> f64 {
        match self.kind {
            FairnessKind::MaxMin => v.iter().copied().fold(f64::INFINITY, f64::min),
            FairnessKind::Proportional => v.iter().map(|x| x.ln()).sum(),
            FairnessKind::Alpha(a) => v.iter().map(|x| x.powf(1.0 - a) / (1.0 - a)).sum(),
        }
    }

    /// Gradient of the objective. For max-min this is the soft-min weight
    /// vector; use [`Self::subgradient`] for the exact argmin indicator.
    pub fn gradient(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_domain(v)?;
        Ok(match self.kind {
            FairnessKind::MaxMin => softmin_weights(v, self.softmin_temperature),
            _ => v.iter().map(|x| self.scalar_derivative(*x)).collect(),
        })
    }

    /// Exact (sub)gradient: the indicator of the lowest-index argmin for
    /// max-min, the ordinary gradient otherwise.
    pub fn subgradient(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_domain(v)?;
        Ok(match self.kind {
            FairnessKind::MaxMin => {
                let mut g = vec![0.0; v.len()];
                g[argmin(v)] = 1.0;
                g
            }
            _ => v.iter().map(|x| self.scalar_derivative(*x)).collect(),
        })
    }

    /// `-tau * ln sum_i exp(-v_i / tau)`, within `[min v - tau ln N, min v]`.
    pub fn evaluate_softmin(&self, v: &[f64]) -> f64 {
        softmin(v, self.softmin_temperature)
    }

    /// The differentiable surrogate maximized by the solvers: soft-min for
    /// max-min, the exact objective otherwise. No domain check.
    pub fn smoothed_value(&self, v: &[f64]) -> f64 {
        match self.kind {
            FairnessKind::MaxMin => softmin(v, self.softmin_temperature),
            _ => self.evaluate_unchecked(v),
        }
    }

    /// Objective extended below the floor: each per-agent term continues as
    /// its tangent line at `epsilon`. Concave, non-decreasing, and equal to
    /// [`Self::evaluate`] wherever that is defined. Max-min needs no guard.
    pub fn evaluate_guarded(&self, v: &[f64]) -> f64 {
        match self.kind {
            FairnessKind::MaxMin => self.evaluate_unchecked(v),
            _ => v.iter().map(|x| self.guarded_term(*x)).sum(),
        }
    }

    /// Surrogate used when values may fall below the floor.
    pub fn smoothed_value_guarded(&self, v: &[f64]) -> f64 {
        match self.kind {
            FairnessKind::MaxMin => softmin(v, self.softmin_temperature),
            _ => self.evaluate_guarded(v),
        }
    }

    /// Gradient of [`Self::smoothed_value_guarded`].
    pub fn gradient_guarded(&self, v: &[f64]) -> Vec<f64> {
        match self.kind {
            FairnessKind::MaxMin => softmin_weights(v, self.softmin_temperature),
            _ => v.iter().map(|x| self.scalar_derivative(x.max(self.epsilon))).collect(),
        }
    }

    fn guarded_term(&self, x: f64) -> f64 {
        if x >= self.epsilon {
            self.scalar_term(x)
        } else {
            self.scalar_term(self.epsilon) + self.scalar_derivative(self.epsilon) * (x - self.epsilon)
        }
    }

    fn scalar_term(&self, x: f64) -> f64 {
        match self.kind {
            FairnessKind::MaxMin => x,
            FairnessKind::Proportional => x.ln(),
            FairnessKind::Alpha(a) => x.powf(1.0 - a) / (1.0 - a),
        }
    }

    fn scalar_derivative(&self, x: f64) -> f64 {
        match self.kind {
            FairnessKind::MaxMin => 1.0,
            FairnessKind::Proportional => 1.0 / x,
            FairnessKind::Alpha(a) => x.powf(-a),
        }
    }

    /// Lipschitz constant `C_F` on `[epsilon, inf)^N`, measured so that
    /// `|F(v) - F(w)| <= N * C_F * max_i |v_i - w_i|`.
    pub fn lipschitz_constant(&self, num_agents: usize) -> f64 {
        match self.kind {
            FairnessKind::MaxMin => 1.0 / num_agents as f64,
            FairnessKind::Proportional => 1.0 / self.epsilon,
            FairnessKind::Alpha(a) => self.epsilon.powf(-a),
        }
    }
}

/// Index of the smallest entry; ties go to the lowest index.
pub fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

fn softmin(v: &[f64], tau: f64) -> f64 {
    let m = v.iter().copied().fold(f64::INFINITY, f64::min);
    let sum: f64 = v.iter().map(|x| (-(x - m) / tau).exp()).sum();
    m - tau * sum.ln()
}

fn softmin_weights(v: &[f64], tau: f64) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::INFINITY, f64::min);
    let mut w: Vec<f64> = v.iter().map(|x| (-(x - m) / tau).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}
