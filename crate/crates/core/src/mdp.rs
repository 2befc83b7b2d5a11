//! Finite-horizon tabular MDP with one reward table per agent.

use ndarray::{Array1, Array3, Array4, ArrayView1, ArrayView3, ArrayView4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::occupancy::PolicyTable;
use crate::rng::{stream_rng, Stream};

const ROW_TOLERANCE: f64 = 1e-9;

/// Known dynamics and mean rewards of a multi-agent episodic MDP.
///
/// `transition[[h, s, a, s']]` is defined for the first `H - 1` steps only;
/// `reward[[h, i, s, a]]` holds the true mean reward of agent `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument", into = "MdpDocument")]
pub struct TabularMdp {
    num_agents: usize,
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    transition: Array4<f64>,
    reward: Array4<f64>,
    initial: Array1<f64>,
    noise_half_width: f64,
    epsilon: f64,
    seed: Option<u64>,
}

impl TabularMdp {
    /// Builds an MDP from its tables.
    ///
    /// `reward` has shape `(H, N, S, A)` and `transition` `(H - 1, S, A, S)`.
    pub fn new(
        transition: Array4<f64>,
        reward: Array4<f64>,
        initial: Array1<f64>,
        noise_half_width: f64,
        epsilon: f64,
    ) -> Result<Self> {
        let (horizon, num_agents, num_states, num_actions) = reward.dim();
        if horizon == 0 || num_agents == 0 || num_states == 0 || num_actions == 0 {
            return Err(Error::InvalidConfig("all MDP dimensions must be at least 1".into()));
        }
        let expected = (horizon - 1, num_states, num_actions, num_states);
        if transition.dim() != expected {
            return Err(Error::Dimension(format!(
                "transition has shape {:?}, expected {:?}",
                transition.dim(),
                expected
            )));
        }
        if initial.len() != num_states {
            return Err(Error::Dimension(format!(
                "initial distribution has {} entries, expected {num_states}",
                initial.len()
            )));
        }
        if !(epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!("epsilon floor must be positive, got {epsilon}")));
        }
        if !(noise_half_width >= 0.0) {
            return Err(Error::InvalidConfig(format!("noise half-width must be non-negative, got {noise_half_width}")));
        }
        check_distribution(initial.view(), "initial distribution")?;
        for h in 0..horizon - 1 {
            for s in 0..num_states {
                for a in 0..num_actions {
                    let row = transition.slice(ndarray::s![h, s, a, ..]);
                    check_distribution(row, &format!("transition row (h={h}, s={s}, a={a})"))?;
                }
            }
        }
        let floor = epsilon / horizon as f64;
        if let Some(((h, i, s, a), r)) =
            reward.indexed_iter().find(|(_, r)| !(**r >= floor - 1e-12 && **r <= 1.0 + 1e-12))
        {
            return Err(Error::InvalidConfig(format!(
                "reward[h={h}][agent={i}][s={s}][a={a}] = {r} is outside [{floor}, 1]"
            )));
        }
        Ok(Self {
            num_agents,
            num_states,
            num_actions,
            horizon,
            transition,
            reward,
            initial,
            noise_half_width,
            epsilon,
            seed: None,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }
    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn transition(&self) -> ArrayView4<'_, f64> {
        self.transition.view()
    }
    pub fn reward(&self) -> ArrayView4<'_, f64> {
        self.reward.view()
    }
    pub fn initial(&self) -> ArrayView1<'_, f64> {
        self.initial.view()
    }
    pub fn noise_half_width(&self) -> f64 {
        self.noise_half_width
    }
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Smallest reward an agent can observe, `epsilon / H`.
    pub fn reward_floor(&self) -> f64 {
        self.epsilon / self.horizon as f64
    }

    /// One noisy reward observation: the mean plus uniform noise, clipped
    /// to `[epsilon / H, 1]`.
    pub fn observe_reward<R: Rng + ?Sized>(&self, h: usize, agent: usize, s: usize, a: usize, rng: &mut R) -> f64 {
        let mean = self.reward[[h, agent, s, a]];
        if self.noise_half_width == 0.0 {
            return mean;
        }
        let w = self.noise_half_width;
        (mean + rng.gen_range(-w..=w)).clamp(self.reward_floor(), 1.0)
    }

    /// Rolls out one episode under `policy`, observing every agent's reward
    /// at each visited state-action pair.
    pub fn sample_episode<R: Rng + ?Sized>(&self, policy: &PolicyTable, rng: &mut R) -> Trajectory {
        let probs = policy.probabilities();
        let mut steps = Vec::with_capacity(self.horizon);
        let mut state = sample_index(self.initial.view(), rng);
        for h in 0..self.horizon {
            let action = sample_index(probs.slice(ndarray::s![h, state, ..]), rng);
            let rewards = (0..self.num_agents).map(|i| self.observe_reward(h, i, state, action, rng)).collect();
            steps.push(Step { state, action, rewards });
            if h + 1 < self.horizon {
                state = sample_index(self.transition.slice(ndarray::s![h, state, action, ..]), rng);
            }
        }
        Trajectory { steps }
    }

    /// Exact per-agent expected return of `policy`, averaged over the
    /// initial distribution.
    pub fn exact_agent_values(&self, policy: &PolicyTable) -> Vec<f64> {
        evaluate_policy(self.reward.view(), self.transition.view(), self.initial.view(), policy.probabilities())
    }

    /// Per-step, per-state value table `V[h][i][s]` for `policy`.
    pub fn value_table(&self, policy: &PolicyTable) -> Array3<f64> {
        value_table(self.reward.view(), self.transition.view(), policy.probabilities())
    }
}

/// Per-step value table `V[[h, i, s]]` (with an all-zero layer at `h = H`)
/// computed by backward induction for arbitrary reward and kernel tables.
pub fn value_table(reward: ArrayView4<f64>, transition: ArrayView4<f64>, policy: ArrayView3<f64>) -> Array3<f64> {
    let (horizon, agents, states, actions) = reward.dim();
    let mut values = Array3::<f64>::zeros((horizon + 1, agents, states));
    for h in (0..horizon).rev() {
        for s in 0..states {
            for a in 0..actions {
                let pi = policy[[h, s, a]];
                if pi == 0.0 {
                    continue;
                }
                for i in 0..agents {
                    let mut q = reward[[h, i, s, a]];
                    if h + 1 < horizon {
                        for next in 0..states {
                            q += transition[[h, s, a, next]] * values[[h + 1, i, next]];
                        }
                    }
                    values[[h, i, s]] += pi * q;
                }
            }
        }
    }
    values
}

/// Exact per-agent values `sum_s mu(s) V_1(s)` for raw tables. No range
/// checks are applied to `reward`.
pub fn evaluate_policy(
    reward: ArrayView4<f64>,
    transition: ArrayView4<f64>,
    initial: ArrayView1<f64>,
    policy: ArrayView3<f64>,
) -> Vec<f64> {
    let table = value_table(reward, transition, policy);
    let first = table.index_axis(Axis(0), 0);
    first.rows().into_iter().map(|row| row.dot(&initial)).collect()
}

fn check_distribution(row: ArrayView1<f64>, what: &str) -> Result<()> {
    if row.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::InvalidConfig(format!("{what} has a negative or NaN entry")));
    }
    let total = row.sum();
    if (total - 1.0).abs() > ROW_TOLERANCE {
        return Err(Error::InvalidConfig(format!("{what} sums to {total}, expected 1")));
    }
    Ok(())
}

/// Inverse-CDF draw from a discrete distribution.
pub fn sample_index<R: Rng + ?Sized>(probs: ArrayView1<f64>, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (k, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            acc += p;
            last_positive = k;
            if u < acc {
                return k;
            }
        }
    }
    last_positive
}

/// One step of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    /// Observed reward of every agent.
    pub rewards: Vec<f64>,
}

/// A full episode of length `H`. The next state of step `h` is the state of
/// step `h + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn num_agents(&self) -> usize {
        self.steps.first().map_or(0, |s| s.rewards.len())
    }

    /// Per-agent sum of observed rewards over the episode.
    pub fn returns(&self) -> Vec<f64> {
        let mut totals = vec![0.0; self.num_agents()];
        for step in &self.steps {
            for (t, r) in totals.iter_mut().zip(&step.rewards) {
                *t += r;
            }
        }
        totals
    }
}

/// Parameters for drawing random instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomMdpConfig {
    pub num_agents: usize,
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub reward_low: f64,
    pub reward_high: f64,
    pub noise_half_width: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for RandomMdpConfig {
    fn default() -> Self {
        Self {
            num_agents: 2,
            num_states: 2,
            num_actions: 2,
            horizon: 3,
            reward_low: 0.15,
            reward_high: 0.95,
            noise_half_width: 0.05,
            epsilon: 0.1,
            seed: 0,
        }
    }
}

impl RandomMdpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_agents == 0 || self.num_states == 0 || self.num_actions == 0 || self.horizon == 0 {
            return Err(Error::InvalidConfig("all MDP dimensions must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.noise_half_width >= 0.0) {
            return Err(Error::InvalidConfig("noise half-width must be non-negative".into()));
        }
        if !(self.reward_low <= self.reward_high) {
            return Err(Error::InvalidConfig(format!(
                "reward_low {} exceeds reward_high {}",
                self.reward_low, self.reward_high
            )));
        }
        let floor = self.epsilon / self.horizon as f64;
        if self.reward_low - self.noise_half_width < floor - 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "reward_low - noise_half_width = {} is below epsilon / H = {floor}",
                self.reward_low - self.noise_half_width
            )));
        }
        if self.reward_high + self.noise_half_width > 1.0 + 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "reward_high + noise_half_width = {} exceeds 1",
                self.reward_high + self.noise_half_width
            )));
        }
        Ok(())
    }
}

/// Random instance: kernel entries uniform on `[0, 1)` then row-normalized,
/// rewards i.i.d. uniform on `[reward_low, reward_high]`, start in state 0.
pub fn generate_random_mdp(config: &RandomMdpConfig) -> Result<TabularMdp> {
    config.validate()?;
    let RandomMdpConfig { num_agents: n, num_states: s, num_actions: a, horizon: h, .. } = *config;
    let mut rng = stream_rng(config.seed, Stream::Instance);
    let mut transition = Array4::<f64>::zeros((h - 1, s, a, s));
    for mut row in transition.lanes_mut(Axis(3)) {
        // Keep drawing until the row has positive mass; a zero row has probability 0.
        loop {
            row.map_inplace(|p| *p = rng.gen::<f64>());
            let total = row.sum();
            if total > 0.0 {
                row /= total;
                break;
            }
        }
    }
    let reward = Array4::from_shape_fn((h, n, s, a), |_| {
        if config.reward_low == config.reward_high {
            config.reward_low
        } else {
            rng.gen_range(config.reward_low..=config.reward_high)
        }
    });
    let mut initial = Array1::zeros(s);
    initial[0] = 1.0;
    Ok(TabularMdp::new(transition, reward, initial, config.noise_half_width, config.epsilon)?.with_seed(config.seed))
}

/// Flattened JSON layout of an MDP (row-major arrays).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpDocument {
    pub num_agents: usize,
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    /// Shape `(H - 1, S, A, S)`.
    pub transition: Vec<f64>,
    /// Shape `(H, N, S, A)`.
    pub reward: Vec<f64>,
    pub initial_distribution: Vec<f64>,
    pub noise_half_width: f64,
    pub epsilon_floor: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl From<TabularMdp> for MdpDocument {
    fn from(mdp: TabularMdp) -> Self {
        Self {
            num_agents: mdp.num_agents,
            num_states: mdp.num_states,
            num_actions: mdp.num_actions,
            horizon: mdp.horizon,
            transition: mdp.transition.iter().copied().collect(),
            reward: mdp.reward.iter().copied().collect(),
            initial_distribution: mdp.initial.to_vec(),
            noise_half_width: mdp.noise_half_width,
            epsilon_floor: mdp.epsilon,
            seed: mdp.seed,
        }
    }
}

impl TryFrom<MdpDocument> for TabularMdp {
    type Error = Error;

    fn try_from(doc: MdpDocument) -> Result<Self> {
        if doc.horizon == 0 {
            return Err(Error::InvalidConfig("horizon must be at least 1".into()));
        }
        let (n, s, a, h) = (doc.num_agents, doc.num_states, doc.num_actions, doc.horizon);
        let transition = Array4::from_shape_vec((h - 1, s, a, s), doc.transition)
            .map_err(|e| Error::Dimension(format!("transition: {e}")))?;
        let reward =
            Array4::from_shape_vec((h, n, s, a), doc.reward).map_err(|e| Error::Dimension(format!("reward: {e}")))?;
        let mdp = TabularMdp::new(
            transition,
            reward,
            Array1::from(doc.initial_distribution),
            doc.noise_half_width,
            doc.epsilon_floor,
        )?;
        Ok(match doc.seed {
            Some(seed) => mdp.with_seed(seed),
            None => mdp,
        })
    }
}
