//! Score-function policy gradient for fairness objectives.
//!
//! The estimators only need `sum_h grad log pi(a_h | s_h)` per trajectory,
//! so the parameterization sits behind [`ScoreFunction`]. Tabular softmax is
//! the one shipped here.

use std::io::Write;

use ndarray::{Array1, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fairness::{argmin, FairnessKind, FairnessObjective};
use crate::mdp::{TabularMdp, Trajectory};
use crate::occupancy::PolicyTable;
use crate::rng::{indexed_rng, Stream};

/// A differentiable stochastic policy with a flat parameter vector.
pub trait ScoreFunction {
    fn num_params(&self) -> usize;
    fn policy(&self) -> PolicyTable;
    /// `sum_h grad_theta log pi(a_h | s_h)` along `trajectory`, flattened.
    fn score(&self, trajectory: &Trajectory) -> Array1<f64>;
    /// `theta += step * direction`.
    fn ascend(&mut self, direction: &Array1<f64>, step: f64);
}

/// One logit per `(h, s, a)`; `pi_h(. | s)` is the softmax of the row.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicyParams {
    pub theta: Array3<f64>,
}

impl SoftmaxPolicyParams {
    /// All-zero logits, i.e. the uniform policy.
    pub fn zeros(horizon: usize, states: usize, actions: usize) -> Self {
        Self { theta: Array3::zeros((horizon, states, actions)) }
    }

    pub fn from_array(theta: Array3<f64>) -> Result<Self> {
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidConfig("softmax logits must be finite".into()));
        }
        Ok(Self { theta })
    }

    fn probabilities(&self) -> Array3<f64> {
        let mut p = self.theta.clone();
        for mut row in p.lanes_mut(Axis(2)) {
            let top = row.fold(f64::NEG_INFINITY, |m, x| m.max(*x));
            row.mapv_inplace(|x| (x - top).exp());
            let total = row.sum();
            row /= total;
        }
        p
    }
}

impl ScoreFunction for SoftmaxPolicyParams {
    fn num_params(&self) -> usize {
        self.theta.len()
    }

    fn policy(&self) -> PolicyTable {
        PolicyTable::from_array(self.probabilities()).expect("softmax rows are distributions")
    }

    fn score(&self, trajectory: &Trajectory) -> Array1<f64> {
        let probs = self.probabilities();
        let (_, states, actions) = self.theta.dim();
        let mut g = Array1::zeros(self.theta.len());
        for (h, step) in trajectory.steps.iter().enumerate() {
            let base = (h * states + step.state) * actions;
            for a in 0..actions {
                let indicator = if a == step.action { 1.0 } else { 0.0 };
                g[base + a] += indicator - probs[[h, step.state, a]];
            }
        }
        g
    }

    fn ascend(&mut self, direction: &Array1<f64>, step: f64) {
        for (t, d) in self.theta.iter_mut().zip(direction) {
            *t += step * d;
        }
    }
}

/// Per-agent sum of observed rewards.
pub fn returns_per_agent(trajectory: &Trajectory) -> Vec<f64> {
    trajectory.returns()
}

/// Batch estimate of the gradient of `F(V(pi_theta))`.
pub fn estimate_gradient<P: ScoreFunction + ?Sized>(
    fairness: &FairnessObjective,
    batch: &[Trajectory],
    params: &P,
) -> Result<Array1<f64>> {
    if batch.is_empty() {
        return Err(Error::Empty("gradient batch"));
    }
    let scores: Vec<Array1<f64>> = batch.iter().map(|t| params.score(t)).collect();
    let returns: Vec<Vec<f64>> = batch.iter().map(returns_per_agent).collect();
    let agents = returns[0].len();
    let totals: Vec<f64> = (0..agents).map(|i| returns.iter().map(|r| r[i]).sum()).collect();
    let weighted = |i: usize| {
        let mut acc = Array1::<f64>::zeros(params.num_params());
        for (score, r) in scores.iter().zip(&returns) {
            acc.scaled_add(r[i], score);
        }
        acc
    };
    match fairness.kind {
        FairnessKind::MaxMin => {
            let worst = argmin(&totals);
            Ok(weighted(worst) / batch.len() as f64)
        }
        FairnessKind::Proportional => ratio_gradient(&totals, weighted, |total| 1.0 / total),
        FairnessKind::Alpha(alpha) => {
            let size_factor = (batch.len() as f64).powf(alpha - 1.0);
            ratio_gradient(&totals, weighted, |total| size_factor / total.powf(alpha))
        }
    }
}

/// `sum_i coefficient(sum_tau R_i) * sum_tau R_i(tau) score(tau)`.
fn ratio_gradient(
    totals: &[f64],
    weighted: impl Fn(usize) -> Array1<f64>,
    coefficient: impl Fn(f64) -> f64,
) -> Result<Array1<f64>> {
    let mut g: Option<Array1<f64>> = None;
    for (i, total) in totals.iter().enumerate() {
        if *total <= 0.0 {
            return Err(Error::ZeroBatchReturn { agent: i });
        }
        let term = weighted(i) * coefficient(*total);
        g = Some(match g {
            Some(acc) => acc + term,
            None => term,
        });
    }
    g.ok_or(Error::Empty("agent list"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgConfig {
    pub step_size: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for PgConfig {
    fn default() -> Self {
        Self { step_size: 0.1, batch_size: 20, iterations: 1000, seed: 0 }
    }
}

impl PgConfig {
    pub fn validate(&self) -> Result<()> {
        // a zero step is allowed: it freezes the policy
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidConfig(format!("step size must be non-negative, got {}", self.step_size)));
        }
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::InvalidConfig("batch size and iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Exact values of the current policy, logged once per iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub fair_value: f64,
    pub agent_values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PgRun {
    /// Starts with the initial policy at iteration 0.
    pub curve: Vec<CurvePoint>,
    pub params: SoftmaxPolicyParams,
}

impl PgRun {
    pub fn final_value(&self) -> f64 {
        self.curve.last().map_or(f64::NAN, |p| p.fair_value)
    }
}

/// Gradient ascent from the uniform policy. Iteration `l` draws its batch
/// from its own random stream, so runs are reproducible per seed.
pub fn run_policy_gradient(env: &TabularMdp, fairness: &FairnessObjective, cfg: &PgConfig) -> Result<PgRun> {
    cfg.validate()?;
    let mut params = SoftmaxPolicyParams::zeros(env.horizon(), env.num_states(), env.num_actions());
    let record = |iteration: usize, params: &SoftmaxPolicyParams| -> Result<CurvePoint> {
        let agent_values = env.exact_agent_values(&params.policy());
        Ok(CurvePoint { iteration, fair_value: fairness.evaluate(&agent_values)?, agent_values })
    };
    let mut curve = Vec::with_capacity(cfg.iterations + 1);
    curve.push(record(0, &params)?);
    for l in 1..=cfg.iterations {
        let policy = params.policy();
        let mut rng = indexed_rng(cfg.seed, Stream::Gradient, l as u64);
        let batch: Vec<Trajectory> = (0..cfg.batch_size).map(|_| env.sample_episode(&policy, &mut rng)).collect();
        let g = estimate_gradient(fairness, &batch, &params)?;
        params.ascend(&g, cfg.step_size);
        curve.push(record(l, &params)?);
    }
    Ok(PgRun { curve, params })
}

/// Writes `iteration,fair_value,value_0,...,value_{N-1}`.
pub fn write_curve_csv<W: Write>(curve: &[CurvePoint], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    let agents = curve.first().map_or(0, |p| p.agent_values.len());
    let mut header = vec!["iteration".to_string(), "fair_value".to_string()];
    header.extend((0..agents).map(|i| format!("value_{i}")));
    writer.write_record(&header)?;
    for p in curve {
        let mut row = vec![p.iteration.to_string(), p.fair_value.to_string()];
        row.extend(p.agent_values.iter().map(f64::to_string));
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}
