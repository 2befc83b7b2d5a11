//! Concave maximization of a fairness objective over occupancy polytopes.
//!
//! Frank-Wolfe only needs a linear maximization oracle. Over the occupancy
//! polytope of a known kernel that oracle is backward induction; over the
//! confidence-band polytope it is extended value iteration, which also
//! picks the most favorable transition row inside each band.

use ndarray::{s, Array1, Array3, Array4, ArrayView1, ArrayView3, ArrayView4, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fairness::{FairnessKind, FairnessObjective};
use crate::mdp::TabularMdp;
use crate::occupancy::{agent_values_from_q, OccupancyQ, OccupancyZ, PolicyTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    /// `2 / (t + 2)`.
    Diminishing,
    /// Golden-section search of the surrogate along the segment.
    LineSearch,
}

impl std::str::FromStr for StepRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diminishing" => Ok(StepRule::Diminishing),
            "line-search" | "line_search" => Ok(StepRule::LineSearch),
            other => Err(Error::InvalidConfig(format!("unknown step rule {other:?}"))),
        }
    }
}

/// How the soft-min temperature evolves for max-min objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemperaturePolicy {
    /// Always `tolerance / (2 ln N)`.
    Fixed,
    /// Follows the certified gap: `tau = 2 gap / ln N`, so the smoothing
    /// bias `tau ln N` shrinks with the remaining error, down to the fixed
    /// value. Starts at 0.1.
    Annealed,
}

const INITIAL_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub step_rule: StepRule,
    pub temperature: TemperaturePolicy,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            tolerance: 1e-5,
            step_rule: StepRule::Diminishing,
            temperature: TemperaturePolicy::Annealed,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidConfig(format!("solver tolerance must be positive, got {}", self.tolerance)));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("solver needs at least one iteration".into()));
        }
        Ok(())
    }

    /// Soft-min temperature giving a surrogate bias of at most half the
    /// tolerance.
    pub fn final_temperature(&self, num_agents: usize) -> f64 {
        if num_agents <= 1 {
            self.tolerance
        } else {
            self.tolerance / (2.0 * (num_agents as f64).ln())
        }
    }

    /// Temperature for the next max-min iteration given the certified gap
    /// of the previous one (infinite before the first).
    fn temperature_for(&self, gap: f64, num_agents: usize) -> f64 {
        let floor = self.final_temperature(num_agents);
        match self.temperature {
            TemperaturePolicy::Fixed => floor,
            TemperaturePolicy::Annealed if !gap.is_finite() => INITIAL_TEMPERATURE.max(floor),
            TemperaturePolicy::Annealed => {
                let log_n = (num_agents as f64).ln().max(std::f64::consts::LN_2);
                (2.0 * gap / log_n).clamp(floor, 1.0f64.max(floor))
            }
        }
    }
}

/// Termination summary of a Frank-Wolfe run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// Frank-Wolfe gap of the surrogate at the returned point.
    pub gap: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct PlanSolution {
    pub occupancy: OccupancyQ,
    pub agent_values: Vec<f64>,
    /// Exact objective at the returned point.
    pub value: f64,
    pub report: SolveReport,
}

#[derive(Debug, Clone)]
pub struct ExtendedSolution {
    pub occupancy: OccupancyZ,
    /// Agent values under the optimistic rewards.
    pub agent_values: Vec<f64>,
    pub value: f64,
    pub report: SolveReport,
}

/// Empirical model with confidence widths defining the optimistic set.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceModel {
    /// Visit counts, shape `(H, S, A)`.
    pub counts: Array3<f64>,
    /// Empirical kernel, shape `(H - 1, S, A, S)`; unvisited rows are uniform.
    pub p_bar: Array4<f64>,
    /// Empirical mean rewards, shape `(H, N, S, A)`.
    pub r_bar: Array4<f64>,
    /// Kernel widths, shape `(H - 1, S, A, S)`.
    pub beta_p: Array4<f64>,
    /// Reward widths, shape `(H, S, A)`.
    pub beta_r: Array3<f64>,
}

impl ConfidenceModel {
    /// The true model with zero-width bands.
    pub fn exact(mdp: &TabularMdp) -> Self {
        let (h, _, s, a) = mdp.reward().dim();
        Self {
            counts: Array3::zeros((h, s, a)),
            p_bar: mdp.transition().to_owned(),
            r_bar: mdp.reward().to_owned(),
            beta_p: Array4::zeros(mdp.transition().dim()),
            beta_r: Array3::zeros((h, s, a)),
        }
    }

    pub fn horizon(&self) -> usize {
        self.r_bar.dim().0
    }
    pub fn num_agents(&self) -> usize {
        self.r_bar.dim().1
    }
    pub fn num_states(&self) -> usize {
        self.r_bar.dim().2
    }
    pub fn num_actions(&self) -> usize {
        self.r_bar.dim().3
    }

    /// Optimistic rewards `min(r_bar + beta_r, 1)`.
    pub fn optimistic_rewards(&self) -> Array4<f64> {
        let mut r = self.r_bar.clone();
        for ((h, _, s, a), x) in r.indexed_iter_mut() {
            *x = (*x + self.beta_r[[h, s, a]]).min(1.0);
        }
        r
    }

    /// True when `(reward, transition)` lies inside every band.
    pub fn contains(&self, reward: ArrayView4<f64>, transition: ArrayView4<f64>) -> bool {
        let reward_ok = reward
            .indexed_iter()
            .all(|((h, i, s, a), r)| (r - self.r_bar[[h, i, s, a]]).abs() <= self.beta_r[[h, s, a]]);
        let kernel_ok = Zip::from(&transition).and(&self.p_bar).and(&self.beta_p).all(|p, pb, b| (p - pb).abs() <= *b);
        reward_ok && kernel_ok
    }

    fn validate(&self) -> Result<()> {
        let (h, _, s, a) = self.r_bar.dim();
        let kernel = (h.saturating_sub(1), s, a, s);
        if self.p_bar.dim() != kernel || self.beta_p.dim() != kernel || self.beta_r.dim() != (h, s, a) {
            return Err(Error::Dimension("confidence model tables disagree on dimensions".into()));
        }
        if self.beta_p.iter().chain(self.beta_r.iter()).any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::InvalidConfig("confidence widths must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Best deterministic policy for per-step linear weights `c[[h, s, a]]`,
/// returned as its occupancy measure together with the attained objective
/// `sum c * q` and the chosen actions.
pub fn linear_oracle_q(
    weights: ArrayView3<f64>,
    transition: ArrayView4<f64>,
    initial: ArrayView1<f64>,
) -> (OccupancyQ, f64, ndarray::Array2<usize>) {
    let (horizon, states, actions) = weights.dim();
    let mut value_next = Array1::<f64>::zeros(states);
    let mut value = Array1::<f64>::zeros(states);
    let mut choice = ndarray::Array2::<usize>::zeros((horizon, states));
    for h in (0..horizon).rev() {
        for s in 0..states {
            let mut best = f64::NEG_INFINITY;
            for a in 0..actions {
                let mut q = weights[[h, s, a]];
                if h + 1 < horizon {
                    q += transition.slice(s![h, s, a, ..]).dot(&value_next);
                }
                if q > best {
                    best = q;
                    choice[[h, s]] = a;
                }
            }
            value[s] = best;
        }
        std::mem::swap(&mut value, &mut value_next);
    }
    let objective = value_next.dot(&initial);

    let mut q = Array3::<f64>::zeros((horizon, states, actions));
    let mut reach = initial.to_owned();
    for h in 0..horizon {
        for s in 0..states {
            q[[h, s, choice[[h, s]]]] = reach[s];
        }
        if h + 1 < horizon {
            let mut next = Array1::<f64>::zeros(states);
            for s in 0..states {
                if reach[s] > 0.0 {
                    next.scaled_add(reach[s], &transition.slice(s![h, s, choice[[h, s]], ..]));
                }
            }
            reach = next;
        }
    }
    (OccupancyQ(q), objective, choice)
}

/// Distribution in the band `|p - p_bar| <= beta` maximizing `p . v_next`.
///
/// Starts from the clipped lower bounds and pours the remaining mass into
/// states in decreasing order of `v_next` (lowest index first on ties),
/// capping each at its upper bound.
pub fn inner_max_transition(
    v_next: ArrayView1<f64>,
    p_bar: ArrayView1<f64>,
    beta: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    let n = v_next.len();
    let mut p = Array1::<f64>::zeros(n);
    let mut upper = Array1::<f64>::zeros(n);
    for k in 0..n {
        p[k] = (p_bar[k] - beta[k]).clamp(0.0, 1.0);
        upper[k] = (p_bar[k] + beta[k]).clamp(0.0, 1.0);
    }
    let lower_sum = p.sum();
    let upper_sum = upper.sum();
    if lower_sum > 1.0 + 1e-12 || upper_sum < 1.0 - 1e-12 {
        return Err(Error::InfeasibleBand { lower_sum, upper_sum });
    }
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps lower indices first among equal values
    order.sort_by(|a, b| v_next[*b].partial_cmp(&v_next[*a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut remaining = 1.0 - lower_sum;
    for k in order {
        if remaining <= 0.0 {
            break;
        }
        let add = (upper[k] - p[k]).min(remaining);
        p[k] += add;
        remaining -= add;
    }
    Ok(p)
}

/// Extended value iteration: the best deterministic policy and in-band
/// kernel for weights `c[[h, s, a]]`. Returns the resulting `z`, the
/// objective, and its state-action marginal.
pub fn linear_oracle_extended(
    weights: ArrayView3<f64>,
    model: &ConfidenceModel,
    initial: ArrayView1<f64>,
) -> Result<(OccupancyZ, f64, OccupancyQ)> {
    let (horizon, states, actions) = weights.dim();
    let mut kernel = Array4::<f64>::zeros((horizon.saturating_sub(1), states, actions, states));
    let mut value_next = Array1::<f64>::zeros(states);
    let mut value = Array1::<f64>::zeros(states);
    let mut choice = ndarray::Array2::<usize>::zeros((horizon, states));
    for h in (0..horizon).rev() {
        if h + 1 < horizon {
            for s in 0..states {
                for a in 0..actions {
                    let row = inner_max_transition(
                        value_next.view(),
                        model.p_bar.slice(s![h, s, a, ..]),
                        model.beta_p.slice(s![h, s, a, ..]),
                    )?;
                    kernel.slice_mut(s![h, s, a, ..]).assign(&row);
                }
            }
        }
        for s in 0..states {
            let mut best = f64::NEG_INFINITY;
            for a in 0..actions {
                let mut q = weights[[h, s, a]];
                if h + 1 < horizon {
                    q += kernel.slice(s![h, s, a, ..]).dot(&value_next);
                }
                if q > best {
                    best = q;
                    choice[[h, s]] = a;
                }
            }
            value[s] = best;
        }
        std::mem::swap(&mut value, &mut value_next);
    }
    let objective = value_next.dot(&initial);

    let mut z = Array4::<f64>::zeros((horizon, states, actions, states));
    let mut q = Array3::<f64>::zeros((horizon, states, actions));
    let mut reach = initial.to_owned();
    for h in 0..horizon {
        let mut next = Array1::<f64>::zeros(states);
        for s in 0..states {
            let a = choice[[h, s]];
            let mass = reach[s];
            q[[h, s, a]] = mass;
            if mass == 0.0 {
                continue;
            }
            if h + 1 < horizon {
                for sp in 0..states {
                    let flow = mass * kernel[[h, s, a, sp]];
                    z[[h, s, a, sp]] = flow;
                    next[sp] += flow;
                }
            } else {
                z.slice_mut(s![h, s, a, ..]).fill(mass / states as f64);
            }
        }
        reach = next;
    }
    Ok((OccupancyZ(z), objective, OccupancyQ(q)))
}

/// Which extension of the objective the solver maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Domain {
    /// Values must stay above the floor.
    Strict,
    /// Tangent-line extension below the floor (pessimistic models).
    Guarded,
}

struct FrankWolfeOutcome<D: Dimension> {
    point: ndarray::Array<f64, D>,
    values: Vec<f64>,
    report: SolveReport,
}

/// Generic Frank-Wolfe loop. `oracle` maps linear weights on `(h, s, a)` to
/// a vertex and that vertex's agent values.
///
/// For max-min the soft-min weights `w` lie in the simplex, so each oracle
/// call also yields the upper bound `max_q w . V(q) >= OPT`. The reported
/// gap is then the best such bound minus the exact min at the returned
/// point, which certifies suboptimality of the true objective.
fn frank_wolfe<D, O>(
    start: ndarray::Array<f64, D>,
    start_values: Vec<f64>,
    reward: ArrayView4<f64>,
    fairness: &FairnessObjective,
    domain: Domain,
    cfg: &SolverConfig,
    mut oracle: O,
) -> Result<FrankWolfeOutcome<D>>
where
    D: Dimension,
    O: FnMut(ArrayView3<f64>) -> Result<(ndarray::Array<f64, D>, Vec<f64>)>,
{
    cfg.validate()?;
    let (horizon, agents, states, actions) = reward.dim();
    let max_min = fairness.kind == FairnessKind::MaxMin;
    let mut point = start;
    let mut values = start_values;
    let mut weights = Array3::<f64>::zeros((horizon, states, actions));
    let mut gap = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut upper_bound = f64::INFINITY;
    let mut best: Option<(ndarray::Array<f64, D>, Vec<f64>, f64)> = None;

    for t in 0..=cfg.max_iterations {
        let mut surrogate = *fairness;
        if max_min {
            surrogate.softmin_temperature = cfg.temperature_for(gap, agents);
        }
        let grad = match domain {
            Domain::Strict => surrogate.gradient(&values)?,
            Domain::Guarded => surrogate.gradient_guarded(&values),
        };
        weights.fill(0.0);
        for (i, g) in grad.iter().enumerate() {
            weights.scaled_add(*g, &reward.slice(s![.., i, .., ..]));
        }
        let (vertex, vertex_values) = oracle(weights.view())?;
        let direction: Vec<f64> = vertex_values.iter().zip(&values).map(|(a, b)| a - b).collect();
        if max_min {
            upper_bound = upper_bound.min(grad.iter().zip(&vertex_values).map(|(g, v)| g * v).sum());
            let current = values.iter().copied().fold(f64::INFINITY, f64::min);
            if best.as_ref().map_or(true, |b| current > b.2) {
                best = Some((point.clone(), values.clone(), current));
            }
            gap = (upper_bound - best.as_ref().map_or(current, |b| b.2)).max(0.0);
        } else {
            gap = grad.iter().zip(&direction).map(|(g, d)| g * d).sum::<f64>().max(0.0);
        }
        if gap <= cfg.tolerance {
            converged = true;
            break;
        }
        if t == cfg.max_iterations {
            break;
        }
        let gamma = match cfg.step_rule {
            StepRule::Diminishing => 2.0 / (t as f64 + 2.0),
            StepRule::LineSearch => line_search(&surrogate, domain, &values, &direction),
        };
        if gamma > 0.0 {
            point *= 1.0 - gamma;
            point.scaled_add(gamma, &vertex);
            for (v, d) in values.iter_mut().zip(&direction) {
                *v += gamma * d;
            }
        }
        iterations = t + 1;
    }
    if let Some((best_point, best_values, _)) = best {
        point = best_point;
        values = best_values;
    }
    if !converged {
        log::debug!("Frank-Wolfe stopped after {iterations} iterations with gap {gap:.3e}");
    }
    Ok(FrankWolfeOutcome { point, values, report: SolveReport { iterations, gap, converged } })
}

/// Golden-section maximization of the concave surrogate on `[0, 1]`.
fn line_search(f: &FairnessObjective, domain: Domain, values: &[f64], direction: &[f64]) -> f64 {
    let eval = |gamma: f64| {
        let v: Vec<f64> = values.iter().zip(direction).map(|(x, d)| x + gamma * d).collect();
        match domain {
            Domain::Strict => f.smoothed_value(&v),
            Domain::Guarded => f.smoothed_value_guarded(&v),
        }
    };
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let mut f1 = eval(x1);
    let mut f2 = eval(x2);
    while hi - lo > 1e-10 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = eval(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = eval(x1);
        }
    }
    let mid = 0.5 * (lo + hi);
    // endpoints can beat the interior bracket when the optimum sits on the boundary
    [(0.0, eval(0.0)), (mid, eval(mid)), (1.0, eval(1.0))]
        .into_iter()
        .fold((0.0, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best })
        .0
}

pub(crate) fn solve_plan_in(
    reward: ArrayView4<f64>,
    transition: ArrayView4<f64>,
    initial: ArrayView1<f64>,
    fairness: &FairnessObjective,
    cfg: &SolverConfig,
    domain: Domain,
) -> Result<PlanSolution> {
    let (horizon, _, states, actions) = reward.dim();
    let start = crate::occupancy::q_from_policy(&PolicyTable::uniform(horizon, states, actions), transition, initial);
    let start_values = agent_values_from_q(&start, reward);
    let outcome = frank_wolfe(start.0, start_values, reward, fairness, domain, cfg, |w| {
        let (q, _, _) = linear_oracle_q(w, transition, initial);
        let v = agent_values_from_q(&q, reward);
        Ok((q.0, v))
    })?;
    let value = match domain {
        Domain::Strict => fairness.evaluate(&outcome.values)?,
        Domain::Guarded => fairness.evaluate_guarded(&outcome.values),
    };
    if !outcome.report.converged {
        log::warn!("fair planning did not reach tolerance {:.1e}; final gap {:.3e}", cfg.tolerance, outcome.report.gap);
    }
    Ok(PlanSolution {
        occupancy: OccupancyQ(outcome.point),
        agent_values: outcome.values,
        value,
        report: outcome.report,
    })
}

/// Fair planning with a known model: maximizes `F(values(q))` over the
/// occupancy polytope of `transition`, starting from the uniform policy.
pub fn solve_fair_plan(
    reward: ArrayView4<f64>,
    transition: ArrayView4<f64>,
    initial: ArrayView1<f64>,
    fairness: &FairnessObjective,
    cfg: &SolverConfig,
) -> Result<PlanSolution> {
    solve_plan_in(reward, transition, initial, fairness, cfg, Domain::Strict)
}

/// Optimistic planning: maximizes `F` over all `z` whose induced kernel
/// lies inside the model's bands, with rewards fixed at their optimistic
/// values.
pub fn solve_fair_extended(
    model: &ConfidenceModel,
    fairness: &FairnessObjective,
    initial: ArrayView1<f64>,
    cfg: &SolverConfig,
) -> Result<ExtendedSolution> {
    model.validate()?;
    let reward = model.optimistic_rewards();
    let (horizon, _, states, actions) = reward.dim();
    let start_q =
        crate::occupancy::q_from_policy(&PolicyTable::uniform(horizon, states, actions), model.p_bar.view(), initial);
    let start_values = agent_values_from_q(&start_q, reward.view());
    let start = crate::occupancy::z_from_q(&start_q, model.p_bar.view());
    let outcome = frank_wolfe(start.0, start_values, reward.view(), fairness, Domain::Strict, cfg, |w| {
        let (z, _, q) = linear_oracle_extended(w, model, initial)?;
        let v = agent_values_from_q(&q, reward.view());
        Ok((z.0, v))
    })?;
    let value = fairness.evaluate(&outcome.values)?;
    Ok(ExtendedSolution {
        occupancy: OccupancyZ(outcome.point),
        agent_values: outcome.values,
        value,
        report: outcome.report,
    })
}
