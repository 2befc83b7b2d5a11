//! Occupancy measures, policies, and the conversions between them.
//!
//! `q[[h, s, a]]` is the probability of visiting `(s, a)` at step `h`;
//! `z[[h, s, a, s']]` additionally records the next state. The final step
//! has no successor, so the last layer of `z` spreads each `q_H(s, a)`
//! evenly over `s'`; marginalizing still recovers `q_H`.

use ndarray::{s, Array3, Array4, ArrayView1, ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_TOLERANCE: f64 = 1e-9;

/// Flattened row-major table used for JSON output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableDocument {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Time-dependent stochastic policy `pi[[h, s, a]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TableDocument", into = "TableDocument")]
pub struct PolicyTable(Array3<f64>);

impl PolicyTable {
    pub fn uniform(horizon: usize, states: usize, actions: usize) -> Self {
        PolicyTable(Array3::from_elem((horizon, states, actions), 1.0 / actions as f64))
    }

    pub fn from_array(probs: Array3<f64>) -> Result<Self> {
        for (idx, row) in probs.lanes(Axis(2)).into_iter().enumerate() {
            if row.iter().any(|p| !(*p >= 0.0)) || (row.sum() - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::InvalidConfig(format!("policy row {idx} is not a distribution: {row}")));
            }
        }
        Ok(PolicyTable(probs))
    }

    pub fn from_rows(horizon: usize, states: usize, actions: usize, data: Vec<f64>) -> Result<Self> {
        let probs = Array3::from_shape_vec((horizon, states, actions), data)
            .map_err(|e| Error::Dimension(format!("policy: {e}")))?;
        Self::from_array(probs)
    }

    /// Deterministic policy from `action[[h, s]]`.
    pub fn deterministic(actions: &ndarray::Array2<usize>, num_actions: usize) -> Self {
        let (h, s) = actions.dim();
        let mut probs = Array3::zeros((h, s, num_actions));
        for ((hh, ss), a) in actions.indexed_iter() {
            probs[[hh, ss, *a]] = 1.0;
        }
        PolicyTable(probs)
    }

    pub fn prob(&self, h: usize, s: usize, a: usize) -> f64 {
        self.0[[h, s, a]]
    }

    pub fn probabilities(&self) -> ArrayView3<'_, f64> {
        self.0.view()
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    pub fn max_abs_diff(&self, other: &PolicyTable) -> f64 {
        max_abs_diff(self.0.iter(), other.0.iter())
    }
}

impl From<PolicyTable> for TableDocument {
    fn from(p: PolicyTable) -> Self {
        TableDocument { shape: p.0.shape().to_vec(), data: p.0.iter().copied().collect() }
    }
}

impl TryFrom<TableDocument> for PolicyTable {
    type Error = Error;
    fn try_from(doc: TableDocument) -> Result<Self> {
        match doc.shape[..] {
            [h, s, a] => Self::from_rows(h, s, a, doc.data),
            _ => Err(Error::Dimension(format!("policy shape {:?} is not 3-dimensional", doc.shape))),
        }
    }
}

/// State-action occupancy measure `q[[h, s, a]]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(into = "TableDocument")]
pub struct OccupancyQ(pub Array3<f64>);

impl From<OccupancyQ> for TableDocument {
    fn from(q: OccupancyQ) -> Self {
        TableDocument { shape: q.0.shape().to_vec(), data: q.0.iter().copied().collect() }
    }
}

impl OccupancyQ {
    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.0.view()
    }

    pub fn horizon(&self) -> usize {
        self.0.dim().0
    }

    /// Total mass of each step.
    pub fn step_mass(&self) -> Vec<f64> {
        self.0.outer_iter().map(|layer| layer.sum()).collect()
    }

    pub fn max_abs_diff(&self, other: &OccupancyQ) -> f64 {
        max_abs_diff(self.0.iter(), other.0.iter())
    }

    /// `lambda * self + (1 - lambda) * other`.
    pub fn blend(&self, other: &OccupancyQ, lambda: f64) -> OccupancyQ {
        OccupancyQ(&self.0 * lambda + &other.0 * (1.0 - lambda))
    }
}

/// State-action-next-state occupancy measure `z[[h, s, a, s']]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(into = "TableDocument")]
pub struct OccupancyZ(pub Array4<f64>);

impl From<OccupancyZ> for TableDocument {
    fn from(z: OccupancyZ) -> Self {
        TableDocument { shape: z.0.shape().to_vec(), data: z.0.iter().copied().collect() }
    }
}

impl OccupancyZ {
    pub fn view(&self) -> ArrayView4<'_, f64> {
        self.0.view()
    }
}

/// Forward recursion `q_1 = mu * pi_1`, `q_h(s, .) = pi_h(.|s) * sum p_{h-1}(s|s', a') q_{h-1}(s', a')`.
pub fn q_from_policy(policy: &PolicyTable, transition: ArrayView4<f64>, initial: ArrayView1<f64>) -> OccupancyQ {
    let pi = policy.probabilities();
    let (horizon, states, actions) = pi.dim();
    let mut q = Array3::<f64>::zeros((horizon, states, actions));
    let mut reach = initial.to_owned();
    for h in 0..horizon {
        for s in 0..states {
            for a in 0..actions {
                q[[h, s, a]] = reach[s] * pi[[h, s, a]];
            }
        }
        if h + 1 < horizon {
            reach.fill(0.0);
            for s in 0..states {
                for a in 0..actions {
                    let mass = q[[h, s, a]];
                    if mass == 0.0 {
                        continue;
                    }
                    for next in 0..states {
                        reach[next] += mass * transition[[h, s, a, next]];
                    }
                }
            }
        }
    }
    OccupancyQ(q)
}

/// Per-agent values `V_i = sum_{h,s,a} r_{h,i}(s, a) q_h(s, a)`; `reward`
/// has shape `(H, N, S, A)`.
pub fn agent_values_from_q(q: &OccupancyQ, reward: ArrayView4<f64>) -> Vec<f64> {
    let agents = reward.dim().1;
    (0..agents)
        .map(|i| {
            let r_i = reward.index_axis(Axis(1), i);
            r_i.iter().zip(q.0.iter()).map(|(r, m)| r * m).sum()
        })
        .collect()
}

fn normalize_rows(mass: Array3<f64>) -> PolicyTable {
    let actions = mass.dim().2;
    let mut probs = mass;
    for mut row in probs.lanes_mut(Axis(2)) {
        let total = row.sum();
        if total > 0.0 {
            row /= total;
        } else {
            row.fill(1.0 / actions as f64);
        }
    }
    PolicyTable(probs)
}

/// Row-wise normalization of `q`; zero-mass rows become uniform.
pub fn policy_from_q(q: &OccupancyQ) -> PolicyTable {
    normalize_rows(q.0.clone())
}

/// Policy induced by `z` after summing out the next state.
pub fn policy_from_z(z: &OccupancyZ) -> PolicyTable {
    normalize_rows(z.0.sum_axis(Axis(3)))
}

pub fn marginalize_z(z: &OccupancyZ) -> OccupancyQ {
    OccupancyQ(z.0.sum_axis(Axis(3)))
}

/// `z_h(s, a, s') = p_h(s'|s, a) q_h(s, a)` for `h < H`; the last layer is
/// spread evenly over `s'`.
pub fn z_from_q(q: &OccupancyQ, transition: ArrayView4<f64>) -> OccupancyZ {
    let (horizon, states, actions) = q.0.dim();
    let mut z = Array4::<f64>::zeros((horizon, states, actions, states));
    for h in 0..horizon {
        for s in 0..states {
            for a in 0..actions {
                let mass = q.0[[h, s, a]];
                for next in 0..states {
                    z[[h, s, a, next]] =
                        if h + 1 < horizon { mass * transition[[h, s, a, next]] } else { mass / states as f64 };
                }
            }
        }
    }
    OccupancyZ(z)
}

/// Transition kernel implied by `z` on the first `H - 1` steps; rows with no
/// mass are uniform.
pub fn induced_transition(z: &OccupancyZ) -> Array4<f64> {
    let (horizon, states, actions, _) = z.0.dim();
    let mut p = z.0.slice(s![..horizon.saturating_sub(1), .., .., ..]).to_owned();
    for mut row in p.lanes_mut(Axis(3)) {
        let total = row.sum();
        if total > 0.0 {
            row /= total;
        } else {
            row.fill(1.0 / states as f64);
        }
    }
    debug_assert_eq!(p.dim().2, actions);
    p
}

/// Checks membership of `q` in the occupancy polytope for kernel
/// `transition` and start distribution `initial`, including the redundant
/// unit-mass-per-step condition.
pub fn validate_q(q: &OccupancyQ, transition: ArrayView4<f64>, initial: ArrayView1<f64>, tol: f64) -> Result<()> {
    let (horizon, states, _) = q.0.dim();
    if let Some(x) = q.0.iter().find(|x| !(**x >= -tol)) {
        return Err(Error::InvalidConfig(format!("occupancy has negative entry {x}")));
    }
    let state_mass = q.0.sum_axis(Axis(2));
    for s in 0..states {
        let diff = state_mass[[0, s]] - initial[s];
        if diff.abs() > tol {
            return Err(Error::InvalidConfig(format!("step 1 mass at state {s} differs from mu by {diff}")));
        }
    }
    for h in 1..horizon {
        for s in 0..states {
            let inflow: f64 =
                q.0.index_axis(Axis(0), h - 1)
                    .indexed_iter()
                    .map(|((sp, ap), m)| m * transition[[h - 1, sp, ap, s]])
                    .sum();
            let diff = state_mass[[h, s]] - inflow;
            if diff.abs() > tol {
                return Err(Error::InvalidConfig(format!("flow conservation violated at h={h}, s={s} by {diff}")));
            }
        }
    }
    for (h, m) in q.step_mass().into_iter().enumerate() {
        if (m - 1.0).abs() > tol {
            return Err(Error::InvalidConfig(format!("step {h} carries mass {m}")));
        }
    }
    Ok(())
}

/// Checks membership of `z` in the state-action-next-state polytope:
/// non-negativity, initial mass, and flow conservation between layers.
pub fn validate_z(z: &OccupancyZ, initial: ArrayView1<f64>, tol: f64) -> Result<()> {
    let (horizon, states, _, _) = z.0.dim();
    if let Some(x) = z.0.iter().find(|x| !(**x >= -tol)) {
        return Err(Error::InvalidConfig(format!("occupancy has negative entry {x}")));
    }
    let out_mass = z.0.sum_axis(Axis(3)).sum_axis(Axis(2));
    for s in 0..states {
        let diff = out_mass[[0, s]] - initial[s];
        if diff.abs() > tol {
            return Err(Error::InvalidConfig(format!("step 1 mass at state {s} differs from mu by {diff}")));
        }
    }
    for h in 1..horizon {
        let inflow = z.0.index_axis(Axis(0), h - 1).sum_axis(Axis(0)).sum_axis(Axis(0));
        for s in 0..states {
            let diff = out_mass[[h, s]] - inflow[s];
            if diff.abs() > tol {
                return Err(Error::InvalidConfig(format!("flow conservation violated at h={h}, s={s} by {diff}")));
            }
        }
    }
    Ok(())
}

fn max_abs_diff<'a>(a: impl Iterator<Item = &'a f64>, b: impl Iterator<Item = &'a f64>) -> f64 {
    a.zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
