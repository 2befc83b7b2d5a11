//! Episodic optimistic learning: estimate, widen, solve, act.

use std::io::Write;

use ndarray::{s, Array3, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fairness::FairnessObjective;
use crate::mdp::{TabularMdp, Trajectory};
use crate::occupancy::{policy_from_z, PolicyTable};
use crate::rng::{stream_rng, Stream};
use crate::solver::{solve_fair_extended, ConfidenceModel, SolverConfig};

/// Log terms `(L_p, L_r)` of the confidence widths:
/// `ln(12 S^2 A H K / delta)` and `2 ln(3 S A H N K / delta)`.
pub fn log_terms(
    states: usize,
    actions: usize,
    horizon: usize,
    agents: usize,
    episodes: usize,
    delta: f64,
) -> (f64, f64) {
    let (s, a, h, n, k) = (states as f64, actions as f64, horizon as f64, agents as f64, episodes as f64);
    ((12.0 * s * s * a * h * k / delta).ln(), 2.0 * (3.0 * s * a * h * n * k / delta).ln())
}

/// Empirical-Bernstein width of one kernel entry.
pub fn kernel_width(p_bar: f64, visits: f64, log_term: f64) -> f64 {
    let n = visits.max(1.0);
    (4.0 * p_bar * (1.0 - p_bar) * log_term / n).sqrt() + 14.0 * log_term / (3.0 * n)
}

/// Hoeffding width of one reward mean.
pub fn reward_width(visits: f64, log_term: f64) -> f64 {
    (log_term / visits.max(1.0)).sqrt()
}

/// Sufficient statistics gathered from observed episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineState {
    /// `n[[h, s, a]]`.
    pub visits: Array3<u64>,
    /// `n[[h, s, a, s']]` for `h < H - 1`.
    pub transitions: Array4<u64>,
    /// Per-agent reward sums, shape `(H, N, S, A)`.
    pub reward_sums: Array4<f64>,
    /// Episodes absorbed so far.
    pub episode: usize,
    pub delta: f64,
    /// Planned number of episodes `K`; enters the width log terms.
    pub planned_episodes: usize,
}

impl OnlineState {
    pub fn new(
        agents: usize,
        states: usize,
        actions: usize,
        horizon: usize,
        delta: f64,
        planned_episodes: usize,
    ) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidConfig(format!("delta must lie in (0, 1), got {delta}")));
        }
        if planned_episodes == 0 {
            return Err(Error::InvalidConfig("the planned number of episodes must be positive".into()));
        }
        Ok(Self {
            visits: Array3::zeros((horizon, states, actions)),
            transitions: Array4::zeros((horizon.saturating_sub(1), states, actions, states)),
            reward_sums: Array4::zeros((horizon, agents, states, actions)),
            episode: 0,
            delta,
            planned_episodes,
        })
    }

    pub fn for_mdp(mdp: &TabularMdp, delta: f64, planned_episodes: usize) -> Result<Self> {
        Self::new(mdp.num_agents(), mdp.num_states(), mdp.num_actions(), mdp.horizon(), delta, planned_episodes)
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        self.reward_sums.dim()
    }

    /// Adds one episode's counts and rewards along the visited path.
    pub fn update(&mut self, trajectory: &Trajectory) -> Result<()> {
        let (horizon, agents, states, actions) = self.dims();
        if trajectory.horizon() != horizon {
            return Err(Error::Dimension(format!("trajectory has {} steps, expected {horizon}", trajectory.horizon())));
        }
        for step in &trajectory.steps {
            if step.state >= states || step.action >= actions || step.rewards.len() != agents {
                return Err(Error::Dimension(format!(
                    "step (state {}, action {}, {} rewards) does not fit {states} states, {actions} actions, {agents} agents",
                    step.state,
                    step.action,
                    step.rewards.len()
                )));
            }
        }
        for (h, step) in trajectory.steps.iter().enumerate() {
            self.visits[[h, step.state, step.action]] += 1;
            for (i, r) in step.rewards.iter().enumerate() {
                self.reward_sums[[h, i, step.state, step.action]] += r;
            }
            if let Some(next) = trajectory.steps.get(h + 1) {
                self.transitions[[h, step.state, step.action, next.state]] += 1;
            }
        }
        self.episode += 1;
        Ok(())
    }

    /// Σ_{s'} n(h, s, a, s') equals n(h, s, a) on every non-final step.
    pub fn counts_consistent(&self) -> bool {
        let horizon = self.dims().0;
        let sums = self.transitions.sum_axis(Axis(3));
        (0..horizon.saturating_sub(1)).all(|h| sums.index_axis(Axis(0), h) == self.visits.index_axis(Axis(0), h))
    }

    /// Empirical kernel with uniform rows where nothing was observed.
    pub fn empirical_transition(&self) -> Array4<f64> {
        let states = self.dims().2;
        let mut p = self.transitions.mapv(|c| c as f64);
        for ((h, s, a), n) in self.visits.indexed_iter() {
            if h + 1 >= self.dims().0 {
                continue;
            }
            let mut row = p.slice_mut(s![h, s, a, ..]);
            if *n == 0 {
                row.fill(1.0 / states as f64);
            } else {
                row /= *n as f64;
            }
        }
        p
    }

    /// Empirical mean rewards, zero where nothing was observed.
    pub fn empirical_reward(&self) -> Array4<f64> {
        let mut r = self.reward_sums.clone();
        for ((h, _, s, a), x) in r.indexed_iter_mut() {
            *x /= self.visits[[h, s, a]].max(1) as f64;
        }
        r
    }

    /// Kernel and reward widths `(beta_p, beta_r)`.
    pub fn confidence_widths(&self) -> (Array4<f64>, Array3<f64>) {
        let (horizon, agents, states, actions) = self.dims();
        let (log_p, log_r) = log_terms(states, actions, horizon, agents, self.planned_episodes, self.delta);
        let p_bar = self.empirical_transition();
        let mut beta_p = Array4::zeros(p_bar.dim());
        for ((h, s, a, sp), b) in beta_p.indexed_iter_mut() {
            *b = kernel_width(p_bar[[h, s, a, sp]], self.visits[[h, s, a]] as f64, log_p);
        }
        let beta_r = self.visits.mapv(|n| reward_width(n as f64, log_r));
        (beta_p, beta_r)
    }

    /// Confidence model with widths multiplied by `width_scale`.
    pub fn confidence_model(&self, width_scale: f64) -> ConfidenceModel {
        let (beta_p, beta_r) = self.confidence_widths();
        ConfidenceModel {
            counts: self.visits.mapv(|n| n as f64),
            p_bar: self.empirical_transition(),
            r_bar: self.empirical_reward(),
            beta_p: beta_p * width_scale,
            beta_r: beta_r * width_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OnlineConfig {
    pub episodes: usize,
    pub delta: f64,
    /// Multiplier on both confidence widths. 1.0 keeps the theoretical
    /// widths; smaller values explore less.
    pub width_scale: f64,
    pub keep_trajectories: bool,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self { episodes: 600, delta: 0.1, width_scale: 1.0, keep_trajectories: false }
    }
}

/// Per-episode log line. `fair_value` and `agent_values` come from the true
/// model and are never shown to the learner.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeRecord {
    pub k: usize,
    pub fair_value: f64,
    pub agent_values: Vec<f64>,
    pub optimistic_objective: f64,
    pub solver_gap: f64,
    pub solver_converged: bool,
    /// Whether the true model lay inside the bands used this episode.
    pub truth_in_bands: bool,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub episodes: Vec<EpisodeRecord>,
    pub policies: Vec<PolicyTable>,
    pub trajectories: Vec<Trajectory>,
    pub final_model: ConfidenceModel,
}

impl RunResult {
    pub fn fair_values(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.fair_value).collect()
    }
}

/// Runs `config.episodes` rounds of optimistic planning on `env`.
pub fn run_online(
    env: &TabularMdp,
    fairness: &FairnessObjective,
    config: &OnlineConfig,
    solver: &SolverConfig,
    seed: u64,
) -> Result<RunResult> {
    if !(config.width_scale >= 0.0) {
        return Err(Error::InvalidConfig(format!("width scale must be non-negative, got {}", config.width_scale)));
    }
    let mut state = OnlineState::for_mdp(env, config.delta, config.episodes)?;
    let mut rng = stream_rng(seed, Stream::Episodes);
    let mut episodes = Vec::with_capacity(config.episodes);
    let mut policies = Vec::with_capacity(config.episodes);
    let mut trajectories = Vec::new();
    let mut non_converged = 0usize;
    for k in 1..=config.episodes {
        let model = state.confidence_model(config.width_scale);
        let solution = solve_fair_extended(&model, fairness, env.initial(), solver)?;
        if !solution.report.converged {
            non_converged += 1;
        }
        let policy = policy_from_z(&solution.occupancy);
        let trajectory = env.sample_episode(&policy, &mut rng);
        state.update(&trajectory)?;

        let agent_values = env.exact_agent_values(&policy);
        episodes.push(EpisodeRecord {
            k,
            fair_value: fairness.evaluate(&agent_values)?,
            agent_values,
            optimistic_objective: solution.value,
            solver_gap: solution.report.gap,
            solver_converged: solution.report.converged,
            truth_in_bands: model.contains(env.reward(), env.transition()),
        });
        policies.push(policy);
        if config.keep_trajectories {
            trajectories.push(trajectory);
        }
    }
    if non_converged > 0 {
        log::warn!("solver stopped before tolerance in {non_converged} of {} episodes", config.episodes);
    }
    Ok(RunResult { episodes, policies, trajectories, final_model: state.confidence_model(config.width_scale) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegretPoint {
    pub k: usize,
    pub fair_value: f64,
    pub regret: f64,
}

/// Cumulative regret `Reg(k) = sum_{j <= k} (V* - V^{pi_j})`.
pub fn regret_curve(fair_values: &[f64], optimal_value: f64) -> Vec<RegretPoint> {
    fair_values
        .iter()
        .enumerate()
        .scan(0.0, |total, (j, v)| {
            *total += optimal_value - v;
            Some(RegretPoint { k: j + 1, fair_value: *v, regret: *total })
        })
        .collect()
}

/// Writes the per-episode CSV:
/// `k,fair_value,optimal_value,regret,optimistic_objective,solver_gap`.
pub fn write_run_csv<W: Write>(result: &RunResult, optimal_value: f64, out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["k", "fair_value", "optimal_value", "regret", "optimistic_objective", "solver_gap"])?;
    let curve = regret_curve(&result.fair_values(), optimal_value);
    for (record, point) in result.episodes.iter().zip(curve) {
        writer.write_record(&[
            record.k.to_string(),
            record.fair_value.to_string(),
            optimal_value.to_string(),
            point.regret.to_string(),
            record.optimistic_objective.to_string(),
            record.solver_gap.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Uniform mixture over a list of policies: one member is drawn at the
/// start of each episode and followed throughout.
#[derive(Debug, Clone)]
pub struct MixturePolicy {
    members: Vec<PolicyTable>,
}

impl MixturePolicy {
    pub fn new(members: Vec<PolicyTable>) -> Result<Self> {
        let first = members.first().ok_or(Error::Empty("mixture member list"))?.dim();
        if members.iter().any(|m| m.dim() != first) {
            return Err(Error::Dimension("mixture members have different shapes".into()));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[PolicyTable] {
        &self.members
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> &PolicyTable {
        &self.members[rng.gen_range(0..self.members.len())]
    }

    pub fn sample_episode<R: Rng + ?Sized>(&self, mdp: &TabularMdp, rng: &mut R) -> Trajectory {
        let member = self.draw(rng);
        mdp.sample_episode(member, rng)
    }

    /// Per-agent values: the average of the members' values.
    pub fn agent_values(&self, mdp: &TabularMdp) -> Vec<f64> {
        let mut total = vec![0.0; mdp.num_agents()];
        for member in &self.members {
            for (t, v) in total.iter_mut().zip(mdp.exact_agent_values(member)) {
                *t += v;
            }
        }
        total.iter().map(|t| t / self.members.len() as f64).collect()
    }

    /// `F` applied to the averaged agent values.
    pub fn fair_value(&self, mdp: &TabularMdp, fairness: &FairnessObjective) -> Result<f64> {
        fairness.evaluate(&self.agent_values(mdp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::fixtures::m1;
    use crate::mdp::{generate_random_mdp, RandomMdpConfig, Step};
    use approx::assert_abs_diff_eq;

    fn one_step(state: usize, action: usize, rewards: Vec<f64>) -> Trajectory {
        Trajectory { steps: vec![Step { state, action, rewards }] }
    }

    #[test]
    fn single_update_increments_one_cell() {
        let mut state = OnlineState::new(2, 1, 2, 1, 0.1, 10).unwrap();
        state.update(&one_step(0, 0, vec![1.0, 0.1])).unwrap();
        assert_eq!(state.visits[[0, 0, 0]], 1);
        assert_eq!(state.visits.sum(), 1);
        assert_eq!(state.episode, 1);
    }

    #[test]
    fn reward_means_average_observations() {
        let mut state = OnlineState::new(2, 1, 2, 1, 0.1, 10).unwrap();
        state.update(&one_step(0, 1, vec![0.4, 0.2])).unwrap();
        state.update(&one_step(0, 1, vec![0.6, 0.2])).unwrap();
        assert_abs_diff_eq!(state.empirical_reward()[[0, 0, 0, 1]], 0.5, epsilon = 1e-15);
        assert_eq!(state.empirical_reward()[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn update_rejects_mismatched_trajectories() {
        let mut state = OnlineState::new(2, 1, 2, 1, 0.1, 10).unwrap();
        assert!(state.update(&one_step(0, 2, vec![0.4, 0.2])).is_err());
        assert!(state.update(&one_step(0, 0, vec![0.4])).is_err());
        assert!(state.update(&Trajectory { steps: vec![] }).is_err());
        assert_eq!(state.episode, 0);
    }

    #[test]
    fn empirical_kernel_converges() {
        let mdp = generate_random_mdp(&RandomMdpConfig { seed: 17, ..Default::default() }).unwrap();
        let pi = PolicyTable::uniform(3, 2, 2);
        let mut state = OnlineState::for_mdp(&mdp, 0.1, 10_000).unwrap();
        let mut rng = stream_rng(1, Stream::Episodes);
        for _ in 0..10_000 {
            state.update(&mdp.sample_episode(&pi, &mut rng)).unwrap();
            debug_assert!(state.counts_consistent());
        }
        assert!(state.counts_consistent());
        let p_bar = state.empirical_transition();
        for ((h, s, a, sp), p) in p_bar.indexed_iter() {
            if state.visits[[h, s, a]] > 0 {
                assert!((p - mdp.transition()[[h, s, a, sp]]).abs() < 0.02);
            }
        }
    }

    #[test]
    fn width_closed_forms() {
        // S = A = N = 2, H = 3, K = 1000, delta = 0.1
        let (log_p, log_r) = log_terms(2, 2, 3, 2, 1000, 0.1);
        assert_abs_diff_eq!(log_p, (2.88e6f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(log_r, 2.0 * (720_000f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(reward_width(100.0, log_r), 0.5194, epsilon = 1e-4);
        let bp = kernel_width(0.5, 100.0, log_p);
        assert_abs_diff_eq!((0.25 * 4.0 * log_p / 100.0).sqrt(), 0.3857, epsilon = 1e-4);
        assert_abs_diff_eq!(14.0 * log_p / 300.0, 0.6941, epsilon = 1e-4);
        assert_abs_diff_eq!(bp, 1.0797, epsilon = 1e-4);
        assert_eq!(reward_width(0.0, log_r), log_r.sqrt());
    }

    #[test]
    fn fresh_state_has_full_width_bands() {
        let state = OnlineState::new(2, 2, 2, 3, 0.1, 100).unwrap();
        let model = state.confidence_model(1.0);
        assert!(model.p_bar.iter().all(|p| *p == 0.5));
        assert!(model.beta_p.iter().all(|b| *b > 1.0));
        assert!(model.optimistic_rewards().iter().all(|r| *r == 1.0));
    }

    #[test]
    fn single_episode_run() {
        let mdp = generate_random_mdp(&RandomMdpConfig { seed: 1, ..Default::default() }).unwrap();
        let f = FairnessObjective::max_min(mdp.epsilon()).unwrap();
        let cfg = OnlineConfig { episodes: 1, keep_trajectories: true, ..Default::default() };
        let result = run_online(&mdp, &f, &cfg, &SolverConfig::default(), 3).unwrap();
        assert_eq!(result.episodes.len(), 1);
        assert_eq!(result.trajectories.len(), 1);
        assert_eq!(result.final_model.counts.sum(), 3.0);
        // all-uniform prior: the optimistic objective is H
        assert_abs_diff_eq!(result.episodes[0].optimistic_objective, 3.0, epsilon = 1e-9);
    }

    #[test]
    fn runs_are_reproducible() {
        let mdp = generate_random_mdp(&RandomMdpConfig { seed: 2, ..Default::default() }).unwrap();
        let f = FairnessObjective::proportional(mdp.epsilon()).unwrap();
        let cfg = OnlineConfig { episodes: 30, ..Default::default() };
        let a = run_online(&mdp, &f, &cfg, &SolverConfig::default(), 9).unwrap();
        let b = run_online(&mdp, &f, &cfg, &SolverConfig::default(), 9).unwrap();
        assert_eq!(a.episodes, b.episodes);
        let mut out_a = Vec::new();
        let mut out_b = Vec::new();
        write_run_csv(&a, 1.0, &mut out_a).unwrap();
        write_run_csv(&b, 1.0, &mut out_b).unwrap();
        assert_eq!(out_a, out_b);
        let text = String::from_utf8(out_a).unwrap();
        assert!(text.starts_with("k,fair_value,optimal_value,regret,optimistic_objective,solver_gap\n"));
        assert_eq!(text.lines().count(), 31);
    }

    #[test]
    fn regret_examples() {
        assert!(regret_curve(&[0.5, 0.5, 0.5], 0.5).iter().all(|p| p.regret == 0.0));
        let curve = regret_curve(&[0.3; 5], 0.5);
        for p in &curve {
            assert_abs_diff_eq!(p.regret, 0.2 * p.k as f64, epsilon = 1e-12);
        }
        let values = [0.1, 0.4, 0.2, 0.5];
        let curve = regret_curve(&values, 0.5);
        assert!(curve.windows(2).all(|w| w[1].regret >= w[0].regret));
    }

    #[test]
    fn mixture_examples() {
        let mdp = m1();
        let f = FairnessObjective::max_min(0.1).unwrap();
        let a1 = PolicyTable::from_rows(1, 1, 2, vec![1.0, 0.0]).unwrap();
        let a2 = PolicyTable::from_rows(1, 1, 2, vec![0.0, 1.0]).unwrap();
        assert!(MixturePolicy::new(vec![]).is_err());

        let single = MixturePolicy::new(vec![a1.clone()]).unwrap();
        assert_eq!(single.agent_values(&mdp), mdp.exact_agent_values(&a1));
        let mut rng = stream_rng(0, Stream::Evaluation);
        assert_eq!(single.sample_episode(&mdp, &mut rng).returns(), vec![1.0, 0.1]);

        let both = MixturePolicy::new(vec![a1, a2]).unwrap();
        let v = both.agent_values(&mdp);
        assert_abs_diff_eq!(v[0], 0.55, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 0.55, epsilon = 1e-15);
        assert_abs_diff_eq!(both.fair_value(&mdp, &f).unwrap(), 0.55, epsilon = 1e-15);
    }

    #[test]
    fn mixture_value_dominates_average_fair_value() {
        use rand::Rng;
        let mdp = generate_random_mdp(&RandomMdpConfig { seed: 23, ..Default::default() }).unwrap();
        let mut rng = stream_rng(4, Stream::Custom(3));
        let mut random_policy = || {
            let mut probs = Array3::from_shape_fn((3, 2, 2), |_| rng.gen::<f64>());
            for mut row in probs.lanes_mut(Axis(2)) {
                let t = row.sum();
                row /= t;
            }
            PolicyTable::from_array(probs).unwrap()
        };
        for f in [
            FairnessObjective::max_min(0.1).unwrap(),
            FairnessObjective::proportional(0.1).unwrap(),
            FairnessObjective::alpha(2.0, 0.1).unwrap(),
        ] {
            for _ in 0..100 {
                let pair = vec![random_policy(), random_policy()];
                let mean_f = pair.iter().map(|p| f.evaluate(&mdp.exact_agent_values(p)).unwrap()).sum::<f64>() / 2.0;
                let mix = MixturePolicy::new(pair).unwrap();
                assert!(mix.fair_value(&mdp, &f).unwrap() >= mean_f - 1e-12);
            }
        }
    }
}
