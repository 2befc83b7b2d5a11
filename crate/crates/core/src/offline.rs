//! Pessimistic learning from a fixed dataset.
//!
//! Rewards are lowered by their uncertainty widths and by a kernel penalty,
//! then the fair program is solved on the empirical kernel. The resulting
//! per-agent values lower-bound the truth with high probability.

use std::io::{BufRead, Write};

use ndarray::{s, Array3, Array4, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fairness::FairnessObjective;
use crate::mdp::{evaluate_policy, TabularMdp, Trajectory};
use crate::occupancy::{policy_from_q, q_from_policy, PolicyTable};
use crate::online::OnlineState;
use crate::rng::{stream_rng, Stream};
use crate::solver::{solve_plan_in, Domain, SolveReport, SolverConfig};

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    /// Description of the behavior policy.
    pub behavior: String,
    pub seed: Option<u64>,
}

/// A fixed collection of episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub episodes: Vec<Trajectory>,
    pub num_states: usize,
    pub num_actions: usize,
    pub provenance: Provenance,
}

/// One JSON line of a serialized dataset.
#[derive(Serialize, Deserialize)]
struct EpisodeLine {
    num_states: usize,
    num_actions: usize,
    #[serde(default)]
    behavior: String,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(flatten)]
    episode: Trajectory,
}

impl Dataset {
    pub fn new(
        episodes: Vec<Trajectory>,
        num_states: usize,
        num_actions: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        let data = Self { episodes, num_states, num_actions, provenance };
        data.validate()?;
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.episodes.first().map_or(0, Trajectory::horizon)
    }

    pub fn num_agents(&self) -> usize {
        self.episodes.first().map_or(0, Trajectory::num_agents)
    }

    fn validate(&self) -> Result<()> {
        let first = self.episodes.first().ok_or(Error::Empty("dataset"))?;
        let (horizon, agents) = (first.horizon(), first.num_agents());
        if horizon == 0 || agents == 0 {
            return Err(Error::Dimension("dataset episodes need at least one step and one agent".into()));
        }
        for (k, ep) in self.episodes.iter().enumerate() {
            let fits = ep.horizon() == horizon
                && ep
                    .steps
                    .iter()
                    .all(|st| st.rewards.len() == agents && st.state < self.num_states && st.action < self.num_actions);
            if !fits {
                return Err(Error::Dimension(format!("episode {k} does not match the dataset dimensions")));
            }
        }
        Ok(())
    }

    /// Writes one episode per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for ep in &self.episodes {
            let line = EpisodeLine {
                num_states: self.num_states,
                num_actions: self.num_actions,
                behavior: self.provenance.behavior.clone(),
                seed: self.provenance.seed,
                episode: ep.clone(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a dataset written by [`Self::write_jsonl`]. Blank lines are
    /// skipped; the provenance is taken from the first line.
    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut episodes = Vec::new();
        let mut header: Option<(usize, usize, Provenance)> = None;
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: EpisodeLine = serde_json::from_str(&line)?;
            match &header {
                None => {
                    header = Some((
                        parsed.num_states,
                        parsed.num_actions,
                        Provenance { behavior: parsed.behavior, seed: parsed.seed },
                    ))
                }
                Some((s, a, _)) if (*s, *a) != (parsed.num_states, parsed.num_actions) => {
                    return Err(Error::Dimension("dataset lines disagree on state or action counts".into()));
                }
                Some(_) => {}
            }
            episodes.push(parsed.episode);
        }
        let (num_states, num_actions, provenance) = header.ok_or(Error::Empty("dataset"))?;
        Self::new(episodes, num_states, num_actions, provenance)
    }
}

/// Rolls out `episodes` episodes of the uniform policy on `mdp`.
pub fn generate_uniform_dataset(mdp: &TabularMdp, episodes: usize, seed: u64) -> Result<Dataset> {
    let policy = PolicyTable::uniform(mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let mut rng = stream_rng(seed, Stream::Dataset);
    let data = (0..episodes).map(|_| mdp.sample_episode(&policy, &mut rng)).collect();
    Dataset::new(data, mdp.num_states(), mdp.num_actions(), Provenance { behavior: "uniform".into(), seed: Some(seed) })
}

/// `max(r_bar - b_r, floor) - kernel_penalty`, where the penalty is
/// `H * sum_{s'} b_p`.
pub fn pessimistic_reward(r_bar: f64, b_r: f64, kernel_penalty: f64, floor: f64) -> f64 {
    (r_bar - b_r).max(floor) - kernel_penalty
}

/// Empirical model with rewards lowered by their widths.
#[derive(Debug, Clone, PartialEq)]
pub struct PessimisticModel {
    /// Visit counts, shape `(H, S, A)`.
    pub counts: Array3<f64>,
    /// Empirical kernel, shape `(H - 1, S, A, S)`; unvisited rows are uniform.
    pub p_bar: Array4<f64>,
    /// Empirical mean rewards, shape `(H, N, S, A)`.
    pub r_bar: Array4<f64>,
    /// Pessimistic rewards, shape `(H, N, S, A)`, never below `-H`.
    pub r_lower: Array4<f64>,
    /// Reward widths, shape `(H, S, A)`.
    pub b_r: Array3<f64>,
    /// Kernel widths, shape `(H - 1, S, A, S)`.
    pub b_p: Array4<f64>,
    pub delta: f64,
    pub epsilon: f64,
}

impl PessimisticModel {
    /// The true model with zero widths; `r_lower` equals the true rewards.
    pub fn exact(mdp: &TabularMdp) -> Self {
        let (h, _, s, a) = mdp.reward().dim();
        Self {
            counts: Array3::zeros((h, s, a)),
            p_bar: mdp.transition().to_owned(),
            r_bar: mdp.reward().to_owned(),
            r_lower: mdp.reward().to_owned(),
            b_r: Array3::zeros((h, s, a)),
            b_p: Array4::zeros(mdp.transition().dim()),
            delta: 0.0,
            epsilon: mdp.epsilon(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.r_bar.dim().0
    }

    /// `sum_{s'} b_p(h, s, a, s')`, zero on the last step.
    pub fn kernel_width_sums(&self) -> Array3<f64> {
        let (horizon, _, states, actions) = self.r_bar.dim();
        let mut sums = Array3::zeros((horizon, states, actions));
        for ((h, s, a), x) in sums.indexed_iter_mut() {
            if h + 1 < horizon {
                *x = self.b_p.slice(s![h, s, a, ..]).sum();
            }
        }
        sums
    }

    /// Per-agent values of `policy` under `(r_lower, p_bar)`.
    pub fn pessimistic_values(&self, policy: &PolicyTable, initial: ArrayView1<f64>) -> Vec<f64> {
        evaluate_policy(self.r_lower.view(), self.p_bar.view(), initial, policy.probabilities())
    }
}

/// Builds the pessimistic model with the theoretical widths. `K` in the
/// log terms is the number of episodes in the dataset.
pub fn build_pessimistic_model(data: &Dataset, delta: f64, epsilon: f64) -> Result<PessimisticModel> {
    build_pessimistic_model_scaled(data, delta, epsilon, 1.0)
}

/// As [`build_pessimistic_model`] with both widths multiplied by
/// `width_scale`.
pub fn build_pessimistic_model_scaled(
    data: &Dataset,
    delta: f64,
    epsilon: f64,
    width_scale: f64,
) -> Result<PessimisticModel> {
    data.validate()?;
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(width_scale >= 0.0) {
        return Err(Error::InvalidConfig(format!("width scale must be non-negative, got {width_scale}")));
    }
    let horizon = data.horizon();
    let mut stats = OnlineState::new(data.num_agents(), data.num_states, data.num_actions, horizon, delta, data.len())?;
    for ep in &data.episodes {
        stats.update(ep)?;
    }
    let (b_p, b_r) = stats.confidence_widths();
    let mut model = PessimisticModel {
        counts: stats.visits.mapv(|n| n as f64),
        p_bar: stats.empirical_transition(),
        r_bar: stats.empirical_reward(),
        r_lower: Array4::zeros(stats.reward_sums.dim()),
        b_r: b_r * width_scale,
        b_p: b_p * width_scale,
        delta,
        epsilon,
    };
    let penalty = model.kernel_width_sums() * horizon as f64;
    let floor = epsilon / horizon as f64;
    for ((h, i, s, a), x) in model.r_lower.indexed_iter_mut() {
        let r = pessimistic_reward(model.r_bar[[h, i, s, a]], model.b_r[[h, s, a]], penalty[[h, s, a]], floor);
        *x = r.max(-(horizon as f64));
    }
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct OfflineSolution {
    pub policy: PolicyTable,
    /// Per-agent values under the pessimistic model.
    pub agent_values: Vec<f64>,
    /// Objective at `agent_values`, tangent-extended below the floor.
    pub value: f64,
    /// Every pessimistic agent value reached the floor `epsilon`.
    pub floor_satisfied: bool,
    pub report: SolveReport,
}

/// Maximizes `F` of the pessimistic values over the occupancy polytope of
/// the empirical kernel.
pub fn solve_offline(
    model: &PessimisticModel,
    fairness: &FairnessObjective,
    initial: ArrayView1<f64>,
    cfg: &SolverConfig,
) -> Result<OfflineSolution> {
    let plan = solve_plan_in(model.r_lower.view(), model.p_bar.view(), initial, fairness, cfg, Domain::Guarded)?;
    let floor_satisfied = plan.agent_values.iter().all(|v| *v >= fairness.epsilon);
    if !floor_satisfied {
        log::warn!(
            "pessimistic agent values {:?} fall below epsilon = {}; the learned policy carries no guarantee",
            plan.agent_values,
            fairness.epsilon
        );
    }
    Ok(OfflineSolution {
        policy: policy_from_q(&plan.occupancy),
        agent_values: plan.agent_values,
        value: plan.value,
        floor_satisfied,
        report: plan.report,
    })
}

/// `oracle_value - F(true values of policy)`.
pub fn evaluate_suboptimality(
    policy: &PolicyTable,
    truth: &TabularMdp,
    fairness: &FairnessObjective,
    oracle_value: f64,
) -> Result<f64> {
    Ok(oracle_value - fairness.evaluate(&truth.exact_agent_values(policy))?)
}

/// Suboptimality bound `2 N C_F E[sum_h (b_r + H sum_{s'} b_p)]`, with the
/// expectation taken exactly along the occupancy of `reference_policy` on
/// the true model.
pub fn suboptimality_bound(
    model: &PessimisticModel,
    truth: &TabularMdp,
    fairness: &FairnessObjective,
    reference_policy: &PolicyTable,
) -> f64 {
    let q = q_from_policy(reference_policy, truth.transition(), truth.initial());
    let width = &model.b_r + &(model.kernel_width_sums() * truth.horizon() as f64);
    let expected: f64 = (&q.0 * &width).sum();
    let n = truth.num_agents() as f64;
    2.0 * n * fairness.lipschitz_constant(truth.num_agents()) * expected
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::fixtures::m1;
    use crate::mdp::{generate_random_mdp, RandomMdpConfig};
    use crate::solver::solve_fair_plan;
    use approx::assert_abs_diff_eq;

    fn app_f(seed: u64) -> TabularMdp {
        generate_random_mdp(&RandomMdpConfig { seed, ..Default::default() }).unwrap()
    }

    fn solver() -> SolverConfig {
        SolverConfig::default()
    }

    #[test]
    fn pessimistic_reward_formula() {
        assert_abs_diff_eq!(pessimistic_reward(0.5, 0.1, 0.2, 0.05), 0.2, epsilon = 1e-12);
        // the clamp binds before the kernel penalty applies
        assert_abs_diff_eq!(pessimistic_reward(0.1, 0.3, 0.2, 0.05), -0.15, epsilon = 1e-12);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let err = Dataset::new(Vec::new(), 2, 2, Provenance::default()).unwrap_err();
        assert!(matches!(err, Error::Empty(_)));
        let err = Dataset::read_jsonl("\n\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Empty(_)));
    }

    #[test]
    fn mismatched_episode_is_rejected() {
        let mdp = app_f(0);
        let mut data = generate_uniform_dataset(&mdp, 5, 1).unwrap();
        data.episodes[3].steps.pop();
        assert!(Dataset::new(data.episodes, 2, 2, data.provenance).is_err());
    }

    #[test]
    fn zero_width_recovers_empirical_means() {
        let mdp = m1();
        let data = generate_uniform_dataset(&mdp, 200, 4).unwrap();
        let model = build_pessimistic_model_scaled(&data, 0.1, 0.1, 0.0).unwrap();
        for ((h, i, s, a), r) in model.r_lower.indexed_iter() {
            assert_eq!(*r, mdp.reward()[[h, i, s, a]]);
        }
    }

    #[test]
    fn rich_data_lowers_every_visited_reward() {
        let mdp = m1();
        let data = generate_uniform_dataset(&mdp, 10_000, 7).unwrap();
        let model = build_pessimistic_model(&data, 0.1, 0.1).unwrap();
        for ((h, i, s, a), r) in model.r_lower.indexed_iter() {
            let truth = mdp.reward()[[h, i, s, a]];
            assert!(model.counts[[h, s, a]] > 0.0);
            assert!(*r <= model.r_bar[[h, i, s, a]]);
            // a true reward sitting on the floor epsilon / H is reproduced exactly by the clamp
            if truth > mdp.reward_floor() {
                assert!(*r < truth);
            } else {
                assert_eq!(*r, truth);
            }
        }
    }

    #[test]
    fn unvisited_cells_sit_at_the_floor() {
        let mdp = app_f(2);
        let data = generate_uniform_dataset(&mdp, 1, 0).unwrap();
        let model = build_pessimistic_model(&data, 0.1, 0.1).unwrap();
        let visited: Vec<_> = data.episodes[0].steps.iter().map(|st| (st.state, st.action)).collect();
        for ((h, _, s, a), r) in model.r_lower.indexed_iter() {
            if (s, a) != visited[h] {
                // no kernel penalty on the last step, so only the clamp applies there
                let expected = if h + 1 < 3 { -3.0 } else { mdp.reward_floor() };
                assert_eq!(*r, expected);
            }
        }
        assert!(model.b_r.iter().chain(model.b_p.iter()).all(|b| *b >= 0.0));
    }

    #[test]
    fn build_is_deterministic() {
        let data = generate_uniform_dataset(&app_f(1), 300, 9).unwrap();
        let a = build_pessimistic_model(&data, 0.1, 0.1).unwrap();
        let b = build_pessimistic_model(&data, 0.1, 0.1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn jsonl_round_trip() {
        let data = generate_uniform_dataset(&app_f(5), 25, 3).unwrap();
        let mut buf = Vec::new();
        data.write_jsonl(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().count(), 25);
        let back = Dataset::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn exact_model_reduces_to_planning() {
        let mdp = app_f(3);
        for f in
            [FairnessObjective::max_min(0.1), FairnessObjective::proportional(0.1), FairnessObjective::alpha(2.0, 0.1)]
        {
            let f = f.unwrap();
            let plan = solve_fair_plan(mdp.reward(), mdp.transition(), mdp.initial(), &f, &solver()).unwrap();
            let off = solve_offline(&PessimisticModel::exact(&mdp), &f, mdp.initial(), &solver()).unwrap();
            assert_abs_diff_eq!(off.value, plan.value, epsilon = 1e-9);
            assert!(off.floor_satisfied);
        }
    }

    #[test]
    fn m1_suboptimality_of_a_deterministic_policy() {
        let mdp = m1();
        let f = FairnessObjective::max_min(0.1).unwrap();
        let pi = PolicyTable::from_rows(1, 1, 2, vec![1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(evaluate_suboptimality(&pi, &mdp, &f, 0.55).unwrap(), 0.45, epsilon = 1e-12);
    }

    #[test]
    fn m1_pessimistic_value_respects_the_bound() {
        let mdp = m1();
        let f = FairnessObjective::max_min(0.1).unwrap();
        let data = generate_uniform_dataset(&mdp, 10_000, 11).unwrap();
        let model = build_pessimistic_model(&data, 0.1, 0.1).unwrap();
        let sol = solve_offline(&model, &f, mdp.initial(), &solver()).unwrap();
        let max_br = model.b_r.iter().cloned().fold(0.0, f64::max);
        let max_bp = model.kernel_width_sums().iter().cloned().fold(0.0, f64::max);
        let n = 2.0;
        let lower = 0.55 - 2.0 * n * f.lipschitz_constant(2) * (max_br + max_bp);
        assert!(sol.value <= 0.55 + 1e-9, "{}", sol.value);
        assert!(sol.value >= lower, "{} < {lower}", sol.value);
        let truth = mdp.exact_agent_values(&sol.policy);
        for (p, t) in model.pessimistic_values(&sol.policy, mdp.initial()).iter().zip(&truth) {
            assert!(p <= t);
        }
    }

    #[test]
    fn rich_data_suboptimality_is_below_the_bound() {
        let mdp = app_f(6);
        for f in
            [FairnessObjective::max_min(0.1), FairnessObjective::proportional(0.1), FairnessObjective::alpha(2.0, 0.1)]
        {
            let f = f.unwrap();
            let plan = solve_fair_plan(mdp.reward(), mdp.transition(), mdp.initial(), &f, &solver()).unwrap();
            let star = policy_from_q(&plan.occupancy);
            let data = generate_uniform_dataset(&mdp, 10_000, 2).unwrap();
            let model = build_pessimistic_model(&data, 0.1, 0.1).unwrap();
            let sol = solve_offline(&model, &f, mdp.initial(), &solver()).unwrap();
            let gap = evaluate_suboptimality(&sol.policy, &mdp, &f, plan.value).unwrap();
            let bound = suboptimality_bound(&model, &mdp, &f, &star);
            assert!(gap <= bound, "{}: {gap} > {bound}", f.kind);
        }
    }

    #[test]
    fn more_data_helps_on_average() {
        let f = FairnessObjective::max_min(0.1).unwrap();
        let mut small = 0.0;
        let mut large = 0.0;
        for seed in 0..10 {
            let mdp = app_f(seed);
            let opt = solve_fair_plan(mdp.reward(), mdp.transition(), mdp.initial(), &f, &solver()).unwrap().value;
            for (size, acc) in [(10, &mut small), (10_000, &mut large)] {
                let data = generate_uniform_dataset(&mdp, size, seed).unwrap();
                let model = build_pessimistic_model(&data, 0.1, 0.1).unwrap();
                let sol = solve_offline(&model, &f, mdp.initial(), &solver()).unwrap();
                *acc += evaluate_suboptimality(&sol.policy, &mdp, &f, opt).unwrap();
            }
        }
        assert!(large <= small, "{large} > {small}");
    }
}
