//! End-to-end acceptance checks, one line per check.
//!
//! Each check prints `[PASS]` or `[FAIL]` with the measured numbers. The
//! process exits 0 regardless so the suite can run as part of the normal test
//! pass; set `FAIRMDP_STRICT_ACCEPTANCE=1` to exit 1 when any check fails.
//! The full run takes a few minutes in release mode.

use std::fs;
use std::path::Path;
use std::time::Instant;

use fairmdp::fairness::FairnessKind;
use fairmdp::harness::{
    brute_force_oracle_multi, oracle_size, reference_optimum, run_experiment, value_difference_self_test,
    ExperimentConfig, Mode, DEFAULT_ORACLE_BUDGET,
};
use fairmdp::mdp::generate_random_mdp;
use fairmdp::occupancy::policy_from_q;
use fairmdp::offline::{
    build_pessimistic_model, evaluate_suboptimality, generate_uniform_dataset, solve_offline, suboptimality_bound,
};
use fairmdp::online::{regret_curve, run_online, OnlineConfig, RunResult};
use fairmdp::pgrad::{estimate_gradient, run_policy_gradient, PgConfig, ScoreFunction, SoftmaxPolicyParams};
use fairmdp::rng::{indexed_rng, stream_rng, Stream};
use fairmdp::solver::solve_fair_plan;
use fairmdp::{FairnessObjective, RandomMdpConfig, SolverConfig, StepRule, TabularMdp};
use ndarray::{Array1, Array3, Array4};
use rand::Rng;
use rayon::prelude::*;

const EPSILON: f64 = 0.1;
const SEEDS: u64 = 10;

struct Outcome {
    passed: bool,
    detail: String,
}

fn objectives() -> Vec<(&'static str, FairnessObjective)> {
    vec![
        ("max-min", FairnessObjective::max_min(EPSILON).unwrap()),
        ("proportional", FairnessObjective::proportional(EPSILON).unwrap()),
        ("alpha=2", FairnessObjective::alpha(2.0, EPSILON).unwrap()),
    ]
}

fn app_f(seed: u64) -> TabularMdp {
    generate_random_mdp(&RandomMdpConfig { seed, ..Default::default() }).unwrap()
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target.abs()
}

/// Optimum per (objective, seed) on the default instances.
fn optima() -> Vec<Vec<f64>> {
    objectives()
        .iter()
        .map(|(_, f)| (0..SEEDS).into_par_iter().map(|s| reference_optimum(&app_f(s), f, 0.05).unwrap()).collect())
        .collect()
}

fn oracle_equivalence() -> Outcome {
    let grid = 0.02;
    let objs: Vec<FairnessObjective> = objectives().into_iter().map(|(_, f)| f).collect();
    let results: Vec<(f64, f64)> = (0..100u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = indexed_rng(2024, Stream::Instance, i);
            // small shapes only: the grid grows as (1/grid)^(rows * (A - 1))
            let mdp = loop {
                let cfg = RandomMdpConfig {
                    num_agents: rng.gen_range(1..=3),
                    num_states: rng.gen_range(1..=3),
                    num_actions: rng.gen_range(1..=3),
                    horizon: rng.gen_range(1..=3),
                    seed: i,
                    ..Default::default()
                };
                let mdp = generate_random_mdp(&cfg).unwrap();
                if oracle_size(&mdp, grid).unwrap() <= 2_000_000 {
                    break mdp;
                }
            };
            let oracle = brute_force_oracle_multi(&mdp, &objs, grid, DEFAULT_ORACLE_BUDGET).unwrap();
            let mut worst_ratio = 0.0f64;
            let mut worst_gap = 0.0f64;
            for (f, o) in objs.iter().zip(&oracle) {
                let plan = solve_fair_plan(mdp.reward(), mdp.transition(), mdp.initial(), f, &SolverConfig::default())
                    .unwrap();
                let n = mdp.num_agents() as f64;
                let allowed = grid * n * f.lipschitz_constant(mdp.num_agents()) * mdp.horizon() as f64 + 1e-4;
                let gap = (plan.value - o.value).abs();
                worst_ratio = worst_ratio.max(gap / allowed);
                worst_gap = worst_gap.max(gap);
            }
            (worst_ratio, worst_gap)
        })
        .collect();
    let failures = results.iter().filter(|(r, _)| *r > 1.0).count();
    let worst = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let gap = results.iter().map(|r| r.1).fold(0.0, f64::max);
    Outcome {
        passed: failures == 0,
        detail: format!(
            "100 instances x 3 objectives, {failures} outside tolerance, largest |plan - oracle| = {gap:.2e}, \
             largest fraction of tolerance used = {worst:.3}"
        ),
    }
}

fn online_runs(episodes: usize) -> Vec<Vec<RunResult>> {
    let online = OnlineConfig { episodes, ..OnlineConfig::default() };
    objectives()
        .iter()
        .map(|(_, f)| {
            (0..SEEDS)
                .into_par_iter()
                .map(|s| run_online(&app_f(s), f, &online, &SolverConfig::default(), s).unwrap())
                .collect()
        })
        .collect()
}

fn late_values(runs: &[Vec<RunResult>], optima: &[Vec<f64>]) -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    for (((name, _), runs), opt) in objectives().iter().zip(runs).zip(optima) {
        let mut hits = 0;
        let mut worst = 0.0f64;
        for (run, o) in runs.iter().zip(opt) {
            let tail = &run.fair_values()[550..600];
            let mean = tail.iter().sum::<f64>() / tail.len() as f64;
            let rel = (mean - o).abs() / o.abs();
            worst = worst.max(rel);
            if within(mean, *o, 0.05) {
                hits += 1;
            }
        }
        passed &= hits >= 8;
        parts.push(format!("{name} {hits}/10 (worst rel. gap {worst:.3})"));
    }
    Outcome { passed, detail: format!("episodes 551-600 within 5% of optimum: {}", parts.join(", ")) }
}

fn optimism(runs: &[Vec<RunResult>], optima: &[Vec<f64>]) -> Outcome {
    let slack = 2.0 * SolverConfig::default().tolerance;
    let mut total = 0usize;
    let mut held = 0usize;
    let mut parts = Vec::new();
    for (((name, _), runs), opt) in objectives().iter().zip(runs).zip(optima) {
        let mut local = 0usize;
        let mut count = 0usize;
        for (run, o) in runs.iter().zip(opt) {
            for e in &run.episodes {
                count += 1;
                if e.optimistic_objective >= o - slack {
                    local += 1;
                }
            }
        }
        parts.push(format!("{name} {local}/{count}"));
        total += count;
        held += local;
    }
    let share = held as f64 / total as f64;
    Outcome {
        passed: share >= 0.95,
        detail: format!("optimistic objective >= optimum in {:.2}% ({})", 100.0 * share, parts.join(", ")),
    }
}

/// Least-squares slope of `ln y` against `ln x`.
fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points.iter().filter(|(_, y)| *y > 0.0).map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn regret_trend(optima: &[Vec<f64>]) -> Outcome {
    let k_max = 2000;
    let runs = online_runs(k_max);
    let mut passed = true;
    let mut parts = Vec::new();
    for (((name, _), runs), opt) in objectives().iter().zip(&runs).zip(optima) {
        let curves: Vec<Vec<f64>> = runs
            .iter()
            .zip(opt)
            .map(|(run, o)| regret_curve(&run.fair_values(), *o).iter().map(|p| p.regret).collect())
            .collect();
        let halved = curves.iter().filter(|c| c[k_max - 1] / (k_max as f64) < 0.5 * c[199] / 200.0).count();
        let mean: Vec<(f64, f64)> = (200..=k_max)
            .map(|k| (k as f64, curves.iter().map(|c| c[k - 1]).sum::<f64>() / curves.len() as f64))
            .collect();
        let b = loglog_slope(&mean);
        passed &= halved >= 8 && b < 0.85;
        parts.push(format!("{name} halved {halved}/10, b = {b:.3}"));
    }
    Outcome { passed, detail: format!("K = 2000: {}", parts.join(", ")) }
}

fn offline_pessimism(optima: &[Vec<f64>]) -> Outcome {
    let mdp = app_f(0);
    let line = SolverConfig { step_rule: StepRule::LineSearch, max_iterations: 5000, ..SolverConfig::default() };
    let mut passed = true;
    let mut parts = Vec::new();
    for ((name, f), opt) in objectives().iter().zip(optima) {
        let star = solve_fair_plan(mdp.reward(), mdp.transition(), mdp.initial(), f, &line).unwrap();
        let star_policy = policy_from_q(&star.occupancy);
        let trials: Vec<(bool, bool)> = (0..200u64)
            .into_par_iter()
            .map(|t| {
                let data = generate_uniform_dataset(&mdp, 1000, 1000 + t).unwrap();
                let model = build_pessimistic_model(&data, 0.1, EPSILON).unwrap();
                let sol = solve_offline(&model, f, mdp.initial(), &SolverConfig::default()).unwrap();
                let lower = model.pessimistic_values(&sol.policy, mdp.initial());
                let truth = mdp.exact_agent_values(&sol.policy);
                let pessimistic = lower.iter().zip(&truth).all(|(l, v)| *l <= v + 1e-12);
                let subopt = evaluate_suboptimality(&sol.policy, &mdp, f, opt[0]).unwrap();
                let bounded = subopt <= suboptimality_bound(&model, &mdp, f, &star_policy);
                (pessimistic, bounded)
            })
            .collect();
        let pess = trials.iter().filter(|t| t.0).count();
        let bound = trials.iter().filter(|t| t.1).count();
        passed &= pess >= 190 && bound >= 190;
        parts.push(format!("{name} pessimistic {pess}/200, bounded {bound}/200"));
    }
    Outcome { passed, detail: parts.join(", ") }
}

fn offline_scaling(optima: &[Vec<f64>]) -> Outcome {
    let sizes = [100usize, 1000, 10_000];
    let mut passed = true;
    let mut parts = Vec::new();
    for ((name, f), opt) in objectives().iter().zip(optima) {
        let means: Vec<f64> = sizes
            .iter()
            .map(|&n| {
                let total: f64 = (0..SEEDS)
                    .into_par_iter()
                    .map(|s| {
                        let mdp = app_f(s);
                        let data = generate_uniform_dataset(&mdp, n, s).unwrap();
                        let model = build_pessimistic_model(&data, 0.1, EPSILON).unwrap();
                        let sol = solve_offline(&model, f, mdp.initial(), &SolverConfig::default()).unwrap();
                        evaluate_suboptimality(&sol.policy, &mdp, f, opt[s as usize]).unwrap()
                    })
                    .sum();
                total / SEEDS as f64
            })
            .collect();
        passed &= means.windows(2).all(|w| w[1] <= w[0]);
        parts.push(format!("{name} {:.4} / {:.4} / {:.4}", means[0], means[1], means[2]));
    }
    Outcome { passed, detail: format!("mean SubOpt at 1e2 / 1e3 / 1e4 episodes: {}", parts.join(", ")) }
}

fn policy_gradient(optima: &[Vec<f64>]) -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    for ((name, f), opt) in objectives().iter().zip(optima) {
        let finals: Vec<f64> = (0..SEEDS)
            .into_par_iter()
            .map(|s| {
                let cfg = PgConfig { seed: s, ..PgConfig::default() };
                run_policy_gradient(&app_f(s), f, &cfg).unwrap().final_value()
            })
            .collect();
        let hits = finals.iter().zip(opt).filter(|(v, o)| within(**v, **o, 0.05)).count();
        let worst = finals.iter().zip(opt).map(|(v, o)| (v - o).abs() / o.abs()).fold(0.0, f64::max);
        passed &= hits >= 8;
        parts.push(format!("{name} {hits}/10 (worst rel. gap {worst:.3})"));
    }
    Outcome { passed, detail: format!("final value within 5% after 1000 iterations: {}", parts.join(", ")) }
}

fn two_action_bandit() -> TabularMdp {
    let reward = Array4::from_shape_vec((1, 2, 1, 2), vec![1.0, 0.1, 0.1, 1.0]).unwrap();
    TabularMdp::new(Array4::zeros((0, 1, 2, 1)), reward, Array1::from(vec![1.0]), 0.0, EPSILON).unwrap()
}

fn gradient_consistency() -> Outcome {
    let mdp = two_action_bandit();
    // off the symmetric point, where every objective has a nonzero gradient
    let theta = Array3::from_shape_vec((1, 1, 2), vec![0.4, -0.3]).unwrap();
    let params = SoftmaxPolicyParams::from_array(theta).unwrap();
    let mut rng = stream_rng(8, Stream::Gradient);
    let batch: Vec<_> = (0..100_000).map(|_| mdp.sample_episode(&params.policy(), &mut rng)).collect();
    let cases = [
        ("proportional", FairnessObjective::proportional(EPSILON).unwrap()),
        ("alpha=0.5", FairnessObjective::alpha(0.5, EPSILON).unwrap()),
        ("alpha=2", FairnessObjective::alpha(2.0, EPSILON).unwrap()),
    ];
    let mut passed = true;
    let mut parts = Vec::new();
    for (name, f) in &cases {
        let estimate = estimate_gradient(f, &batch, &params).unwrap();
        let exact = |p: &SoftmaxPolicyParams| f.evaluate(&mdp.exact_agent_values(&p.policy())).unwrap();
        let h = 1e-6;
        let fd: Array1<f64> = (0..params.num_params())
            .map(|j| {
                let mut e = Array1::zeros(params.num_params());
                e[j] = 1.0;
                let (mut up, mut down) = (params.clone(), params.clone());
                up.ascend(&e, h);
                down.ascend(&e, -h);
                (exact(&up) - exact(&down)) / (2.0 * h)
            })
            .collect();
        let cosine = estimate.dot(&fd) / (estimate.dot(&estimate).sqrt() * fd.dot(&fd).sqrt());
        let diff = &estimate - &fd;
        let rel = diff.dot(&diff).sqrt() / fd.dot(&fd).sqrt();
        passed &= cosine >= 0.9 && rel <= 0.1;
        parts.push(format!("{name} cos {cosine:.4} rel.err {rel:.4}"));
    }
    Outcome { passed, detail: format!("batch 1e5 vs finite differences: {}", parts.join(", ")) }
}

fn property_suites() -> Outcome {
    let slack = 1e-12;
    let mut rng = stream_rng(9, Stream::Custom(9));
    let kinds = [
        FairnessKind::MaxMin,
        FairnessKind::Proportional,
        FairnessKind::alpha(0.5).unwrap(),
        FairnessKind::alpha(2.0).unwrap(),
    ];
    let mut violations = [0usize; 3];
    for kind in kinds {
        let f = FairnessObjective::new(kind, EPSILON).unwrap();
        for _ in 0..10_000 {
            let n = rng.gen_range(1..=4);
            let u: Vec<f64> = (0..n).map(|_| rng.gen_range(EPSILON..3.0)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(EPSILON..3.0)).collect();
            let (fu, fv) = (f.evaluate(&u).unwrap(), f.evaluate(&v).unwrap());
            let dist = u.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if (fu - fv).abs() > n as f64 * f.lipschitz_constant(n) * dist + slack {
                violations[0] += 1;
            }
            let lambda: f64 = rng.gen();
            let mix: Vec<f64> = u.iter().zip(&v).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect();
            if f.evaluate(&mix).unwrap() < lambda * fu + (1.0 - lambda) * fv - slack {
                violations[1] += 1;
            }
            let bumped: Vec<f64> = u.iter().map(|x| x + rng.gen_range(0.0..1.0)).collect();
            if f.evaluate(&bumped).unwrap() < fu - slack {
                violations[2] += 1;
            }
        }
    }
    let identity = value_difference_self_test(100, 77).unwrap();
    Outcome {
        passed: violations == [0, 0, 0] && identity <= 1e-10,
        detail: format!(
            "violations lipschitz/concavity/monotonicity = {violations:?} over 4 x 1e4 draws, \
             value-difference identity max error {identity:.2e} on 100 pairs"
        ),
    }
}

fn csv_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let mut identical = true;
    let mut checked = 0;
    for (mode, fairness) in [
        (Mode::Online, FairnessKind::MaxMin),
        (Mode::Offline, FairnessKind::Proportional),
        (Mode::Pg, FairnessKind::alpha(2.0).unwrap()),
    ] {
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let mut cfg =
                ExperimentConfig { mode, fairness, seeds: (0..4).collect(), episodes: 60, ..Default::default() };
            cfg.pg.iterations = 50;
            cfg.out = root.path().join(format!("{mode:?}-{rep}"));
            run_experiment(&cfg).unwrap();
            outputs.push(csv_bytes(&cfg.out));
        }
        checked += outputs[0].len();
        identical &= !outputs[0].is_empty() && outputs[0] == outputs[1];
    }
    Outcome { passed: identical, detail: format!("{checked} CSV files compared across two runs each") }
}

fn main() {
    let start = Instant::now();
    let optima = optima();
    let fig1 = online_runs(600);

    let checks: Vec<(&str, Box<dyn FnOnce() -> Outcome + '_>)> = vec![
        ("oracle equivalence", Box::new(oracle_equivalence)),
        ("online convergence", Box::new(|| late_values(&fig1, &optima))),
        ("sub-linear regret", Box::new(|| regret_trend(&optima))),
        ("optimism", Box::new(|| optimism(&fig1, &optima))),
        ("offline pessimism", Box::new(|| offline_pessimism(&optima))),
        ("offline data scaling", Box::new(|| offline_scaling(&optima))),
        ("policy gradient", Box::new(|| policy_gradient(&optima))),
        ("gradient consistency", Box::new(gradient_consistency)),
        ("objective properties", Box::new(property_suites)),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.into_iter().enumerate() {
        let t = Instant::now();
        let outcome = check();
        if !outcome.passed {
            failed += 1;
        }
        let tag = if outcome.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {:>2} {name}: {} ({:.1}s)", i + 1, outcome.detail, t.elapsed().as_secs_f64());
    }
    println!("{} of 10 passed in {:.0}s", 10 - failed, start.elapsed().as_secs_f64());
    if failed > 0 && std::env::var_os("FAIRMDP_STRICT_ACCEPTANCE").is_some() {
        std::process::exit(1);
    }
}
