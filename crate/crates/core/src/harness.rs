//! Ground truth and experiment plumbing.
//!
//! The brute-force oracle enumerates a grid of stochastic policies and is
//! independent of the Frank-Wolfe machinery, so the two can check each
//! other. `run_experiment` drives every learner across seeds and writes one
//! CSV per seed, an aggregate CSV and a JSON manifest.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array1, Array3, Array4, ArrayView1, ArrayView4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fairness::{FairnessKind, FairnessObjective};
use crate::mdp::{evaluate_policy, generate_random_mdp, value_table, MdpDocument, RandomMdpConfig, TabularMdp};
use crate::occupancy::{policy_from_q, PolicyTable};
use crate::offline::{
    build_pessimistic_model_scaled, evaluate_suboptimality, generate_uniform_dataset, solve_offline,
    suboptimality_bound, Dataset,
};
use crate::online::{regret_curve, run_online, OnlineConfig};
use crate::pgrad::{run_policy_gradient, PgConfig, ScoreFunction};
use crate::solver::{solve_fair_plan, SolverConfig, StepRule};

/// Default cap on the number of grid policies the oracle may enumerate.
pub const DEFAULT_ORACLE_BUDGET: u128 = 200_000_000;

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub value: f64,
    pub policy: PolicyTable,
    pub agent_values: Vec<f64>,
    /// `N * C_F * H * grid_step`, the reported discretization allowance.
    pub error_bound: f64,
    /// Number of grid policies evaluated.
    pub evaluated: u128,
}

/// All points of the simplex in `actions` dimensions whose coordinates are
/// multiples of `1 / resolution`.
fn simplex_grid(actions: usize, resolution: usize) -> Vec<Vec<f64>> {
    fn fill(prefix: &mut Vec<usize>, left: usize, slots: usize, out: &mut Vec<Vec<usize>>) {
        if slots == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in 0..=left {
            prefix.push(k);
            fill(prefix, left - k, slots - 1, out);
            prefix.pop();
        }
    }
    let mut raw = Vec::new();
    fill(&mut Vec::new(), resolution, actions, &mut raw);
    raw.into_iter().map(|p| p.into_iter().map(|k| k as f64 / resolution as f64).collect()).collect()
}

fn grid_resolution(grid_step: f64) -> Result<usize> {
    if !(grid_step > 0.0 && grid_step <= 0.5) {
        return Err(Error::InvalidConfig(format!("grid step must lie in (0, 0.5], got {grid_step}")));
    }
    let resolution = (1.0 / grid_step).round();
    if ((1.0 / resolution) - grid_step).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("grid step {grid_step} must divide 1")));
    }
    Ok(resolution as usize)
}

/// Rows `(h, s)` that some policy can reach with positive probability.
fn reachable_rows(mdp: &TabularMdp) -> Vec<Vec<bool>> {
    let (horizon, states, actions) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let mut reach = vec![vec![false; states]; horizon];
    for s in 0..states {
        reach[0][s] = mdp.initial()[s] > 0.0;
    }
    for h in 0..horizon.saturating_sub(1) {
        for s in 0..states {
            if !reach[h][s] {
                continue;
            }
            for a in 0..actions {
                for next in 0..states {
                    if mdp.transition()[[h, s, a, next]] > 0.0 {
                        reach[h + 1][next] = true;
                    }
                }
            }
        }
    }
    reach
}

/// Number of grid policies the oracle would enumerate at `grid_step`.
pub fn oracle_size(mdp: &TabularMdp, grid_step: f64) -> Result<u128> {
    let points = simplex_grid(mdp.num_actions(), grid_resolution(grid_step)?).len() as u128;
    let rows = reachable_rows(mdp).iter().flatten().filter(|r| **r).count() as u32;
    Ok(points.checked_pow(rows).unwrap_or(u128::MAX))
}

struct Enumeration<'a> {
    mdp: &'a TabularMdp,
    objectives: &'a [FairnessObjective],
    grid: Vec<Vec<f64>>,
    /// `rewards[h][s][g][i]`: expected reward of grid point `g` at `(h, s)`.
    rewards: Vec<Vec<Vec<Vec<f64>>>>,
    /// `kernels[h][s][g][s']`: next-state distribution of grid point `g`.
    kernels: Vec<Vec<Vec<Vec<f64>>>>,
    choice: Vec<Vec<usize>>,
    /// Per-level scratch: state distribution and accumulated values.
    dists: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    best: Vec<(f64, Vec<Vec<usize>>, Vec<f64>)>,
    evaluated: u128,
}

impl Enumeration<'_> {
    /// Enumerates the rows of step `h`. `dists[h]` holds the state
    /// distribution and `values[h]` the reward collected before step `h`;
    /// level `h + 1` of both buffers is overwritten for each choice.
    fn descend(&mut self, h: usize) {
        let states = self.mdp.num_states();
        let active: Vec<usize> = (0..states).filter(|s| self.dists[h][*s] > 0.0).collect();
        self.choice[h].fill(0);
        let last = h + 1 == self.mdp.horizon();
        let mut counter = vec![0usize; active.len()];
        loop {
            let (done, rest) = self.values.split_at_mut(h + 1);
            let v = &mut rest[0];
            v.copy_from_slice(&done[h]);
            let (dist_done, dist_rest) = self.dists.split_at_mut(h + 1);
            let next = &mut dist_rest[0];
            next.fill(0.0);
            for (slot, s) in active.iter().enumerate() {
                let g = counter[slot];
                let weight = dist_done[h][*s];
                self.choice[h][*s] = g;
                for (vi, ri) in v.iter_mut().zip(&self.rewards[h][*s][g]) {
                    *vi += weight * ri;
                }
                if !last {
                    for (n, p) in next.iter_mut().zip(&self.kernels[h][*s][g]) {
                        *n += weight * p;
                    }
                }
            }
            if last {
                self.leaf(h + 1);
            } else {
                self.descend(h + 1);
            }
            // mixed-radix increment over the active rows
            let mut slot = 0;
            loop {
                if slot == counter.len() {
                    return;
                }
                counter[slot] += 1;
                if counter[slot] < self.grid.len() {
                    break;
                }
                counter[slot] = 0;
                slot += 1;
            }
        }
    }

    fn leaf(&mut self, level: usize) {
        self.evaluated += 1;
        let values = &self.values[level];
        for (k, f) in self.objectives.iter().enumerate() {
            let score = f.evaluate_guarded(values);
            if score > self.best[k].0 {
                self.best[k] = (score, self.choice.clone(), values.clone());
            }
        }
    }
}

/// Exhaustive maximization of `F(values(pi))` over grid policies, for
/// several objectives in one sweep. Rows that cannot be reached are fixed
/// to the first grid point, which does not change any value.
pub fn brute_force_oracle_multi(
    mdp: &TabularMdp,
    objectives: &[FairnessObjective],
    grid_step: f64,
    budget: u128,
) -> Result<Vec<OracleResult>> {
    let resolution = grid_resolution(grid_step)?;
    let required = oracle_size(mdp, grid_step)?;
    if required > budget {
        return Err(Error::BudgetExceeded { required, budget });
    }
    let (horizon, agents, states, actions) = mdp.reward().dim();
    let grid = simplex_grid(actions, resolution);
    let mut rewards = vec![vec![Vec::with_capacity(grid.len()); states]; horizon];
    let mut kernels = vec![vec![Vec::with_capacity(grid.len()); states]; horizon];
    for h in 0..horizon {
        for s in 0..states {
            for g in &grid {
                let r = (0..agents).map(|i| (0..actions).map(|a| g[a] * mdp.reward()[[h, i, s, a]]).sum()).collect();
                rewards[h][s].push(r);
                if h + 1 < horizon {
                    let p = (0..states)
                        .map(|n| (0..actions).map(|a| g[a] * mdp.transition()[[h, s, a, n]]).sum())
                        .collect();
                    kernels[h][s].push(p);
                }
            }
        }
    }
    let mut run = Enumeration {
        mdp,
        objectives,
        grid,
        rewards,
        kernels,
        choice: vec![vec![0; states]; horizon],
        dists: vec![vec![0.0; states]; horizon + 1],
        values: vec![vec![0.0; agents]; horizon + 1],
        best: vec![(f64::NEG_INFINITY, Vec::new(), Vec::new()); objectives.len()],
        evaluated: 0,
    };
    run.dists[0] = mdp.initial().to_vec();
    run.descend(0);
    let Enumeration { grid, best, evaluated, .. } = run;
    best.into_iter()
        .zip(objectives)
        .map(|((value, choice, agent_values), f)| {
            let mut probs = Array3::zeros((horizon, states, actions));
            for h in 0..horizon {
                for s in 0..states {
                    for a in 0..actions {
                        probs[[h, s, a]] = grid[choice[h][s]][a];
                    }
                }
            }
            Ok(OracleResult {
                value,
                policy: PolicyTable::from_array(probs)?,
                agent_values,
                error_bound: agents as f64 * f.lipschitz_constant(agents) * horizon as f64 * grid_step,
                evaluated,
            })
        })
        .collect()
}

/// Grid-search oracle with the default budget.
pub fn brute_force_oracle(mdp: &TabularMdp, fairness: &FairnessObjective, grid_step: f64) -> Result<OracleResult> {
    let mut out = brute_force_oracle_multi(mdp, std::slice::from_ref(fairness), grid_step, DEFAULT_ORACLE_BUDGET)?;
    Ok(out.remove(0))
}

/// Best known optimum: the larger of the grid oracle and an accurate
/// Frank-Wolfe solve, both of which are attained by feasible policies.
/// Falls back to the solver alone when the grid exceeds the budget.
pub fn reference_optimum(mdp: &TabularMdp, fairness: &FairnessObjective, grid_step: f64) -> Result<f64> {
    let cfg = SolverConfig { step_rule: StepRule::LineSearch, max_iterations: 5000, ..SolverConfig::default() };
    let plan = solve_fair_plan(mdp.reward(), mdp.transition(), mdp.initial(), fairness, &cfg)?.value;
    match brute_force_oracle(mdp, fairness, grid_step) {
        Ok(oracle) => Ok(plan.max(oracle.value)),
        Err(Error::BudgetExceeded { required, .. }) => {
            log::info!("oracle grid would need {required} policies; using the solver value alone");
            Ok(plan)
        }
        Err(e) => Err(e),
    }
}

/// Both sides of the value-difference identity
/// `V' - V'' = E''[sum (r' - r'')] + E''[sum_t sum_x (P'_t - P''_t)(x | s_t, a_t) V'_{t+1}(x)]`,
/// where `E''` follows `policy` on `P''`. Returns `(lhs, rhs)` per agent.
pub fn value_difference_sides(
    reward_a: ArrayView4<f64>,
    transition_a: ArrayView4<f64>,
    reward_b: ArrayView4<f64>,
    transition_b: ArrayView4<f64>,
    initial: ArrayView1<f64>,
    policy: &PolicyTable,
) -> (Vec<f64>, Vec<f64>) {
    let pi = policy.probabilities();
    let v_a = evaluate_policy(reward_a, transition_a, initial, pi);
    let v_b = evaluate_policy(reward_b, transition_b, initial, pi);
    let lhs = v_a.iter().zip(&v_b).map(|(a, b)| a - b).collect();

    let (horizon, agents, states, actions) = reward_a.dim();
    let table_a = value_table(reward_a, transition_a, pi);
    let mut surrogate = &reward_a - &reward_b;
    for h in 0..horizon.saturating_sub(1) {
        for i in 0..agents {
            for s in 0..states {
                for a in 0..actions {
                    let shift: f64 = (0..states)
                        .map(|x| (transition_a[[h, s, a, x]] - transition_b[[h, s, a, x]]) * table_a[[h + 1, i, x]])
                        .sum();
                    surrogate[[h, i, s, a]] += shift;
                }
            }
        }
    }
    let rhs = evaluate_policy(surrogate.view(), transition_b, initial, pi);
    (lhs, rhs)
}

/// Checks the value-difference identity on `pairs` random MDP pairs with a
/// random policy each, returning the largest absolute discrepancy.
pub fn value_difference_self_test(pairs: usize, seed: u64) -> Result<f64> {
    use rand::Rng;
    let mut rng = crate::rng::stream_rng(seed, crate::rng::Stream::Custom(0x5e1f));
    let mut worst = 0.0f64;
    for k in 0..pairs {
        let dims = RandomMdpConfig {
            num_agents: rng.gen_range(1..=3),
            num_states: rng.gen_range(1..=3),
            num_actions: rng.gen_range(1..=3),
            horizon: rng.gen_range(1..=4),
            ..RandomMdpConfig::default()
        };
        let a = generate_random_mdp(&RandomMdpConfig { seed: 2 * k as u64 + seed, ..dims.clone() })?;
        let b = generate_random_mdp(&RandomMdpConfig { seed: 2 * k as u64 + seed + 1, ..dims.clone() })?;
        let mut probs = Array3::<f64>::zeros((dims.horizon, dims.num_states, dims.num_actions));
        probs.mapv_inplace(|_| rng.gen_range(0.01..1.0));
        for mut row in probs.lanes_mut(ndarray::Axis(2)) {
            let total = row.sum();
            row /= total;
        }
        let policy = PolicyTable::from_array(probs)?;
        let (lhs, rhs) =
            value_difference_sides(a.reward(), a.transition(), b.reward(), b.transition(), a.initial(), &policy);
        for (l, r) in lhs.iter().zip(&rhs) {
            worst = worst.max((l - r).abs());
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Plan,
    Online,
    Offline,
    Pg,
    Oracle,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plan" => Ok(Mode::Plan),
            "online" => Ok(Mode::Online),
            "offline" => Ok(Mode::Offline),
            "pg" => Ok(Mode::Pg),
            "oracle" => Ok(Mode::Oracle),
            other => Err(Error::InvalidConfig(format!(
                "unknown mode '{other}', expected plan, online, offline, pg or oracle"
            ))),
        }
    }
}

/// Everything one experiment needs. Mirrors the TOML layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub fairness: FairnessKind,
    pub epsilon: f64,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Online: number of episodes `K`. Offline: dataset size.
    pub episodes: usize,
    pub delta: f64,
    pub width_scale: f64,
    pub grid_step: f64,
    /// Use one instance for every seed instead of one instance per seed.
    pub instance_seed: Option<u64>,
    /// Load the instance from an MDP JSON file instead of generating it.
    pub mdp_file: Option<PathBuf>,
    /// Offline: read this JSON-lines dataset instead of generating one.
    pub dataset: Option<PathBuf>,
    /// Also write each seed's final policy as JSON.
    pub dump_policy: bool,
    /// Worker threads; all available cores when unset.
    pub parallelism: Option<usize>,
    pub mdp: RandomMdpConfig,
    pub solver: SolverConfig,
    pub pg: PgConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Plan,
            fairness: FairnessKind::MaxMin,
            epsilon: 0.1,
            seeds: (0..10).collect(),
            out: PathBuf::from("out"),
            episodes: 600,
            delta: 0.1,
            width_scale: 1.0,
            grid_step: 0.05,
            instance_seed: None,
            mdp_file: None,
            dataset: None,
            dump_policy: false,
            parallelism: None,
            mdp: RandomMdpConfig::default(),
            solver: SolverConfig::default(),
            pg: PgConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        grid_resolution(self.grid_step)?;
        self.objective()?;
        self.solver.validate()?;
        if self.mdp_file.is_none() {
            self.mdp.validate()?;
        }
        for path in self.mdp_file.iter().chain(&self.dataset) {
            if !path.is_file() {
                return Err(Error::InvalidConfig(format!("input file {} does not exist", path.display())));
            }
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidConfig(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.width_scale >= 0.0) {
            return Err(Error::InvalidConfig("width_scale must be non-negative".into()));
        }
        if self.parallelism == Some(0) {
            return Err(Error::InvalidConfig("parallelism must be positive".into()));
        }
        match self.mode {
            Mode::Online if self.episodes == 0 => Err(Error::InvalidConfig("online mode needs episodes > 0".into())),
            Mode::Offline if self.episodes == 0 && self.dataset.is_none() => {
                Err(Error::InvalidConfig("offline mode needs episodes > 0 or a dataset file".into()))
            }
            Mode::Pg => self.pg.validate(),
            _ => Ok(()),
        }
    }

    pub fn objective(&self) -> Result<FairnessObjective> {
        FairnessObjective::new(self.fairness, self.epsilon)
    }

    /// The instance used for `seed`.
    pub fn instance(&self, seed: u64) -> Result<TabularMdp> {
        match &self.mdp_file {
            Some(path) => {
                let doc: MdpDocument = serde_json::from_reader(BufReader::new(File::open(path)?))?;
                TabularMdp::try_from(doc)
            }
            None => {
                generate_random_mdp(&RandomMdpConfig { seed: self.instance_seed.unwrap_or(seed), ..self.mdp.clone() })
            }
        }
    }
}

/// A numeric table whose first column is the row key.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        writer.write_record(&self.header)?;
        for row in &self.rows {
            writer.write_record(row.iter().map(f64::to_string))?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Row-wise mean, min and max of every non-key column across tables that
/// share a header and key column.
pub fn aggregate(tables: &[Table]) -> Result<Table> {
    let first = tables.first().ok_or(Error::Empty("per-seed tables"))?;
    if tables.iter().any(|t| t.header != first.header || t.rows.len() != first.rows.len()) {
        return Err(Error::Dimension("per-seed tables differ in shape".into()));
    }
    let mut header = vec![first.header[0].clone()];
    for name in &first.header[1..] {
        header.extend(["mean", "min", "max"].iter().map(|stat| format!("{name}_{stat}")));
    }
    let mut rows = Vec::with_capacity(first.rows.len());
    for r in 0..first.rows.len() {
        let mut row = vec![first.rows[r][0]];
        for c in 1..first.header.len() {
            let column: Vec<f64> = tables.iter().map(|t| t.rows[r][c]).collect();
            let min = column.iter().copied().fold(f64::INFINITY, f64::min);
            let max = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            // rounding can push the mean of equal entries one ulp outside
            let mean = (column.iter().sum::<f64>() / column.len() as f64).clamp(min, max);
            row.extend([mean, min, max]);
        }
        rows.push(row);
    }
    Ok(Table { header, rows })
}

/// What a single seed produced.
#[derive(Debug, Clone)]
pub struct SeedOutput {
    pub seed: u64,
    pub table: Table,
    pub policy: Option<PolicyTable>,
}

fn bool_value(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn with_agent_columns(base: &[&str], agents: usize) -> Vec<String> {
    let mut header: Vec<String> = base.iter().map(|s| s.to_string()).collect();
    header.extend((0..agents).map(|i| format!("value_{i}")));
    header
}

/// Runs one seed of the configured mode.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedOutput> {
    let fairness = config.objective()?;
    let mdp = config.instance(seed)?;
    let agents = mdp.num_agents();
    match config.mode {
        Mode::Oracle => {
            let oracle = brute_force_oracle(&mdp, &fairness, config.grid_step)?;
            let mut table = Table::new(&["row", "value", "error_bound"]);
            table.rows.push(vec![0.0, oracle.value, oracle.error_bound]);
            Ok(SeedOutput { seed, table, policy: Some(oracle.policy) })
        }
        Mode::Plan => {
            let sol = solve_fair_plan(mdp.reward(), mdp.transition(), mdp.initial(), &fairness, &config.solver)?;
            let mut table = Table {
                header: with_agent_columns(&["row", "value", "gap", "iterations", "converged"], agents),
                rows: Vec::new(),
            };
            let mut row =
                vec![0.0, sol.value, sol.report.gap, sol.report.iterations as f64, bool_value(sol.report.converged)];
            row.extend(&sol.agent_values);
            table.rows.push(row);
            Ok(SeedOutput { seed, table, policy: Some(policy_from_q(&sol.occupancy)) })
        }
        Mode::Online => {
            let optimum = reference_optimum(&mdp, &fairness, config.grid_step)?;
            let online = OnlineConfig {
                episodes: config.episodes,
                delta: config.delta,
                width_scale: config.width_scale,
                keep_trajectories: false,
            };
            let run = run_online(&mdp, &fairness, &online, &config.solver, seed)?;
            let mut table =
                Table::new(&["k", "fair_value", "optimal_value", "regret", "optimistic_objective", "solver_gap"]);
            for (record, point) in run.episodes.iter().zip(regret_curve(&run.fair_values(), optimum)) {
                table.rows.push(vec![
                    record.k as f64,
                    record.fair_value,
                    optimum,
                    point.regret,
                    record.optimistic_objective,
                    record.solver_gap,
                ]);
            }
            Ok(SeedOutput { seed, table, policy: run.policies.last().cloned() })
        }
        Mode::Offline => {
            let optimum = reference_optimum(&mdp, &fairness, config.grid_step)?;
            let data = match &config.dataset {
                Some(path) => Dataset::read_jsonl(BufReader::new(File::open(path)?))?,
                None => generate_uniform_dataset(&mdp, config.episodes, seed)?,
            };
            if (data.num_states, data.num_actions, data.horizon(), data.num_agents())
                != (mdp.num_states(), mdp.num_actions(), mdp.horizon(), agents)
            {
                return Err(Error::Dimension("dataset does not match the instance dimensions".into()));
            }
            let model = build_pessimistic_model_scaled(&data, config.delta, config.epsilon, config.width_scale)?;
            let sol = solve_offline(&model, &fairness, mdp.initial(), &config.solver)?;
            let plan_cfg =
                SolverConfig { step_rule: StepRule::LineSearch, max_iterations: 5000, ..config.solver.clone() };
            let star = solve_fair_plan(mdp.reward(), mdp.transition(), mdp.initial(), &fairness, &plan_cfg)?;
            let bound = suboptimality_bound(&model, &mdp, &fairness, &policy_from_q(&star.occupancy));
            let true_values = mdp.exact_agent_values(&sol.policy);
            let mut table = Table {
                header: with_agent_columns(
                    &[
                        "dataset_size",
                        "pessimistic_value",
                        "true_value",
                        "optimal_value",
                        "suboptimality",
                        "bound",
                        "floor_satisfied",
                    ],
                    agents,
                ),
                rows: Vec::new(),
            };
            let mut row = vec![
                data.len() as f64,
                sol.value,
                fairness.evaluate(&true_values)?,
                optimum,
                evaluate_suboptimality(&sol.policy, &mdp, &fairness, optimum)?,
                bound,
                bool_value(sol.floor_satisfied),
            ];
            row.extend(&true_values);
            table.rows.push(row);
            Ok(SeedOutput { seed, table, policy: Some(sol.policy) })
        }
        Mode::Pg => {
            let run = run_policy_gradient(&mdp, &fairness, &PgConfig { seed, ..config.pg.clone() })?;
            let mut table =
                Table { header: with_agent_columns(&["iteration", "fair_value"], agents), rows: Vec::new() };
            for p in &run.curve {
                let mut row = vec![p.iteration as f64, p.fair_value];
                row.extend(&p.agent_values);
                table.rows.push(row);
            }
            Ok(SeedOutput { seed, table, policy: Some(run.params.policy()) })
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    config: &'a ExperimentConfig,
    version: &'static str,
    wall_time_seconds: f64,
    seed_files: Vec<String>,
    failures: Vec<String>,
}

/// Summary of a finished experiment.
#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub outputs: Vec<SeedOutput>,
    pub aggregate: Table,
    pub out_dir: PathBuf,
}

/// Runs every seed (concurrently), then writes `seed-<n>.csv`,
/// `aggregate.csv` and `manifest.json` under `config.out`. Seeds that fail
/// are reported in the manifest; the other seeds' files are still written
/// and the first failure is returned with its seed attached.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentSummary> {
    config.validate()?;
    let started = Instant::now();
    fs::create_dir_all(&config.out)?;
    let work = || -> Vec<(u64, Result<SeedOutput>)> {
        config.seeds.par_iter().map(|seed| (*seed, run_seed(config, *seed))).collect()
    };
    let results = match config.parallelism {
        Some(threads) => rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?
            .install(work),
        None => work(),
    };

    let mut outputs = Vec::new();
    let mut failures = Vec::new();
    let mut first_error = None;
    let mut seed_files = Vec::new();
    for (seed, result) in results {
        match result {
            Ok(output) => {
                let name = format!("seed-{seed}.csv");
                output.table.write_csv(&config.out.join(&name))?;
                if config.dump_policy {
                    if let Some(policy) = &output.policy {
                        let file = File::create(config.out.join(format!("policy-{seed}.json")))?;
                        serde_json::to_writer_pretty(BufWriter::new(file), policy)?;
                    }
                }
                seed_files.push(name);
                outputs.push(output);
            }
            Err(e) => {
                log::error!("seed {seed} failed: {e}");
                failures.push(format!("seed {seed}: {e}"));
                first_error.get_or_insert(Error::Seed { seed, source: Box::new(e) });
            }
        }
    }
    let aggregate = if outputs.is_empty() {
        Table::new(&[])
    } else {
        let tables: Vec<Table> = outputs.iter().map(|o| o.table.clone()).collect();
        let agg = aggregate(&tables)?;
        agg.write_csv(&config.out.join("aggregate.csv"))?;
        agg
    };
    let manifest = Manifest {
        config,
        version: env!("CARGO_PKG_VERSION"),
        wall_time_seconds: started.elapsed().as_secs_f64(),
        seed_files,
        failures,
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(config.out.join("manifest.json"))?), &manifest)?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(ExperimentSummary { outputs, aggregate, out_dir: config.out.clone() }),
    }
}

/// Random reward and kernel tables of the given shape, for property tests
/// of the DP machinery. Rewards are unrestricted in `[-1, 1]`.
pub fn random_tables<R: rand::Rng + ?Sized>(
    rng: &mut R,
    agents: usize,
    states: usize,
    actions: usize,
    horizon: usize,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let reward = Array4::from_shape_fn((horizon, agents, states, actions), |_| rng.gen_range(-1.0..1.0));
    let mut transition =
        Array4::from_shape_fn((horizon.saturating_sub(1), states, actions, states), |_| rng.gen_range(0.0..1.0));
    for mut row in transition.lanes_mut(ndarray::Axis(3)) {
        let total = row.sum();
        row /= total;
    }
    let mut initial = Array1::from_shape_fn(states, |_| rng.gen_range(0.0..1.0));
    let total = initial.sum();
    initial /= total;
    (reward, transition, initial)
}
