//! The `verify` report: every theory check with its tolerance and outcome.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{gradcheck_a2c, gradcheck_lower_bound_q, gradcheck_sil};
use super::{
    grad_equivalence_check, lb_sil_gap, soft_value_iteration, tabular_lb_q_learning, verify_lower_bound,
    verify_lower_bound_expected, LbSample, LimitInstance, LowerBoundReport, SoftSolution, TabularMdp, TabularPolicy,
};
use crate::error::Result;
use crate::losses::{sil_loss, SilBatch};
use crate::nn::{backprop, forward, Matrix, MlpParams};
use crate::replay::{PrioritizedBuffer, PrioritizedConfig, ReplayEntry, SumTree};

pub const GRAD_REL_TOL: f64 = 1e-4;
pub const BOUND_TOL: f64 = 1e-9;
pub const EQUIVALENCE_TOL: f64 = 1e-8;
pub const LBQ_EXCESS_TOL: f64 = 1e-6;
pub const LBQ_CONVERGENCE_TOL: f64 = 1e-4;
/// Entries count as converged-on once updated this often.
pub const LBQ_MIN_VISITS: usize = 20;
const LBQ_LR: f64 = 0.5;
pub const SAMPLING_REL_TOL: f64 = 0.01;
pub const VI_TOL: f64 = 1e-13;
const VI_MAX_ITERS: usize = 100_000;
const GAMMA: f64 = 0.9;
const N_ACTIONS: usize = 4;
pub const BOUND_ALPHAS: [f64; 3] = [0.0, 0.1, 1.0];
pub const EQUIVALENCE_ALPHAS: [f64; 3] = [0.1, 1.0, 10.0];
pub const LIMIT_ALPHAS: [f64; 3] = [1e-1, 1e-2, 1e-3];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub id: &'static str,
    pub passed: bool,
    /// Informational checks are reported but do not decide the overall result.
    pub gating: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(id: &'static str, passed: bool, detail: String) -> Self {
        Self {
            id,
            passed,
            gating: true,
            detail,
        }
    }

    fn informational(mut self) -> Self {
        self.gating = false;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub checks: Vec<CheckOutcome>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed || !c.gating)
    }

    pub fn get(&self, id: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.id == id)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let tag = match (c.passed, c.gating) {
                (true, _) => "PASS",
                (false, true) => "FAIL",
                (false, false) => "NOTE",
            };
            let _ = writeln!(s, "[{tag}] {:<28} {}", c.id, c.detail);
        }
        let gating_failures = self.checks.iter().filter(|c| c.gating && !c.passed).count();
        let _ = writeln!(
            s,
            "{} checks, {} failed, {:.1}s: {}",
            self.checks.len(),
            gating_failures,
            self.elapsed.as_secs_f64(),
            if self.passed() { "OK" } else { "FAILED" }
        );
        s
    }
}

/// Problem sizes; [`SuiteSizes::full`] matches the documented acceptance
/// protocol, [`SuiteSizes::quick`] is a smoke run.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteSizes {
    pub grad_draws: usize,
    pub bound_mdps: usize,
    pub bound_trajectories: usize,
    pub expected_mdps: usize,
    pub expected_rollouts: usize,
    pub equivalence_instances: usize,
    pub limit_instances: usize,
    pub lbq_mdps: usize,
    pub lbq_episodes: usize,
    pub sampling_draws: usize,
    pub tree_ops: usize,
    pub clip_batches: usize,
}

impl SuiteSizes {
    pub fn full() -> Self {
        Self {
            grad_draws: 10,
            bound_mdps: 100,
            bound_trajectories: 50,
            expected_mdps: 20,
            expected_rollouts: 2_000,
            equivalence_instances: 1_000,
            limit_instances: 1_000,
            lbq_mdps: 20,
            lbq_episodes: 600,
            sampling_draws: 1_000_000,
            tree_ops: 100_000,
            clip_batches: 20,
        }
    }

    pub fn quick() -> Self {
        Self {
            grad_draws: 10,
            bound_mdps: 20,
            bound_trajectories: 20,
            expected_mdps: 3,
            expected_rollouts: 500,
            equivalence_instances: 200,
            limit_instances: 200,
            lbq_mdps: 4,
            lbq_episodes: 400,
            sampling_draws: 200_000,
            tree_ops: 10_000,
            clip_batches: 5,
        }
    }
}

fn solve(mdp: &TabularMdp, alpha: f64) -> Result<SoftSolution> {
    soft_value_iteration(mdp, alpha, VI_TOL, VI_MAX_ITERS)
}

fn random_size<R: Rng + ?Sized>(rng: &mut R) -> usize {
    rng.random_range(2..=10)
}

pub fn check_gradients(draws: usize, rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let reports = [gradcheck_sil(draws, rng)?, gradcheck_a2c(draws, rng)?, gradcheck_lower_bound_q(draws, rng)?];
    let passed = reports.iter().all(|r| r.passed(GRAD_REL_TOL));
    let detail = reports
        .iter()
        .map(|r| format!("{} {:.2e}", r.loss, r.max_rel_error))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(CheckOutcome::new(
        "gradients",
        passed,
        format!("max relative error over {draws} draws each: {detail} (tol {GRAD_REL_TOL:e})"),
    ))
}

pub fn check_soft_solutions(n_mdps: usize, rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    for _ in 0..n_mdps {
        let n = random_size(rng);
        let mdp = TabularMdp::random_stochastic(n, N_ACTIONS, 3, GAMMA, rng)?;
        for alpha in BOUND_ALPHAS {
            worst = worst.max(solve(&mdp, alpha)?.consistency_error(&mdp));
        }
    }
    Ok(CheckOutcome::new(
        "soft-solution-identities",
        worst <= 1e-9,
        format!("max error of the soft value and policy identities over {n_mdps} MDPs: {worst:.2e} (tol 1e-9)"),
    ))
}

/// Per-trajectory lower-bound results keyed by alpha.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundSweep {
    pub per_alpha: Vec<(f64, LowerBoundReport)>,
    /// Same sweep with the optimal policy as behavior (bound must be tight).
    pub tight_max_gap: f64,
}

impl BoundSweep {
    pub fn report(&self, alpha: f64) -> Option<&LowerBoundReport> {
        self.per_alpha.iter().find(|(a, _)| *a == alpha).map(|(_, r)| r)
    }
}

/// Random deterministic MDPs with random behavior policies. Behavior rows
/// are flat-Dirichlet draws mixed with 1% uniform mass.
pub fn lower_bound_sweep(n_mdps: usize, n_trajectories: usize, rng: &mut ChaCha8Rng) -> Result<BoundSweep> {
    let mut per_alpha: Vec<(f64, LowerBoundReport)> = BOUND_ALPHAS
        .iter()
        .map(|&a| {
            (
                a,
                LowerBoundReport {
                    samples: 0,
                    violations: 0,
                    max_excess: f64::NEG_INFINITY,
                    counterexample: None,
                },
            )
        })
        .collect();
    let mut tight_max_gap: f64 = 0.0;
    for _ in 0..n_mdps {
        let n = random_size(rng);
        let mdp = TabularMdp::random_deterministic(n, N_ACTIONS, GAMMA, rng)?;
        let mu = TabularPolicy::random(n, N_ACTIONS, 0.0025, rng);
        for (alpha, acc) in per_alpha.iter_mut() {
            let sol = solve(&mdp, *alpha)?;
            acc.merge(&verify_lower_bound(&mdp, &sol, &mu, n_trajectories, BOUND_TOL, rng)?);
            if *alpha > 0.0 {
                let tight = verify_lower_bound(&mdp, &sol, &sol.pi, 5, BOUND_TOL, rng)?;
                tight_max_gap = tight_max_gap.max(tight.max_excess.abs());
            }
        }
    }
    Ok(BoundSweep { per_alpha, tight_max_gap })
}

fn bound_outcomes(sweep: &BoundSweep, n_mdps: usize, n_traj: usize) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    for (alpha, rep) in &sweep.per_alpha {
        let detail = format!(
            "alpha {alpha}: {} violations of Q*(s,a) >= R - {BOUND_TOL:e} in {} samples ({n_mdps} MDPs x {n_traj} episodes), max R - Q* = {:.3e}{}",
            rep.violations,
            rep.samples,
            rep.max_excess,
            rep.counterexample.as_ref().map(|c| format!("; worst: {c}")).unwrap_or_default()
        );
        let check = CheckOutcome::new(
            if *alpha == 0.0 {
                "lower-bound-per-episode"
            } else {
                "lower-bound-per-episode-soft"
            },
            rep.violations == 0,
            detail,
        );
        // With alpha > 0 the sampled entropy terms make single-episode
        // returns exceed Q* whenever mu under-weights the actions it took
        // relative to pi*; the bound is a statement about the expectation.
        out.push(if *alpha == 0.0 { check } else { check.informational() });
    }
    out.push(CheckOutcome::new(
        "lower-bound-tight",
        sweep.tight_max_gap <= BOUND_TOL,
        format!("behavior = optimal soft policy: max |R - Q*| = {:.2e} (tol {BOUND_TOL:e})", sweep.tight_max_gap),
    ));
    out
}

pub fn check_lower_bound_expected(n_mdps: usize, rollouts: usize, rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let mut violations = 0;
    let mut pairs = 0;
    let mut exact: f64 = f64::NEG_INFINITY;
    let mut sampled: f64 = f64::NEG_INFINITY;
    for i in 0..n_mdps {
        let n = rng.random_range(2..=6);
        // alternate deterministic and stochastic dynamics
        let mdp = if i % 2 == 0 {
            TabularMdp::random_deterministic(n, N_ACTIONS, GAMMA, rng)?
        } else {
            TabularMdp::random_stochastic(n, N_ACTIONS, 3, GAMMA, rng)?
        };
        let mu = TabularPolicy::random(n, N_ACTIONS, 0.0025, rng);
        for alpha in BOUND_ALPHAS {
            let rep = verify_lower_bound_expected(&mdp, &solve(&mdp, alpha)?, &mu, rollouts, BOUND_TOL, rng)?;
            violations += rep.violations;
            pairs += rep.pairs;
            exact = exact.max(rep.max_exact_excess);
            sampled = sampled.max(rep.max_sampled_excess);
        }
    }
    Ok(CheckOutcome::new(
        "lower-bound-expected",
        violations == 0,
        format!(
            "{violations} violations over {pairs} (s,a,alpha) cases: max E_mu[R] - Q* = {exact:.2e} exact, {sampled:.2e} sampled minus 4 s.e."
        ),
    ))
}

pub fn check_grad_equivalence(instances: usize, rng: &mut ChaCha8Rng) -> Result<(CheckOutcome, Vec<(f64, f64)>)> {
    let mut per_alpha = Vec::new();
    for alpha in EQUIVALENCE_ALPHAS {
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let n = random_size(rng);
            let scale = rng.random_range(0.5..5.0);
            let q: Vec<f64> = (0..n * N_ACTIONS).map(|_| rng.random_range(-scale..scale)).collect();
            let samples: Vec<LbSample> = (0..16)
                .map(|_| LbSample {
                    state: rng.random_range(0..n),
                    action: rng.random_range(0..N_ACTIONS),
                    ret: rng.random_range(-2.0 * scale..2.0 * scale),
                })
                .collect();
            worst = worst.max(grad_equivalence_check(&q, N_ACTIONS, &samples, alpha)?);
        }
        per_alpha.push((alpha, worst));
    }
    let max = per_alpha.iter().map(|p| p.1).fold(0.0, f64::max);
    let detail = per_alpha
        .iter()
        .map(|(a, d)| format!("alpha {a}: {d:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((
        CheckOutcome::new(
            "gradient-equivalence",
            max <= EQUIVALENCE_TOL,
            format!("max |direct - decomposed| over {instances} tables per alpha: {detail} (tol {EQUIVALENCE_TOL:e})"),
        ),
        per_alpha,
    ))
}

pub fn check_alpha_limit(instances: usize, rng: &mut ChaCha8Rng) -> Result<(CheckOutcome, Vec<f64>)> {
    let inst: Vec<LimitInstance> = (0..instances).map(|_| LimitInstance::random(N_ACTIONS, 1e-3, rng)).collect();
    let gaps = LIMIT_ALPHAS.iter().map(|&a| lb_sil_gap(&inst, a)).collect::<Result<Vec<f64>>>()?;
    let monotone = gaps.windows(2).all(|w| w[1] < w[0]);
    let slopes: Vec<String> = gaps.iter().zip(LIMIT_ALPHAS).map(|(g, a)| format!("{:.3}", g / a)).collect();
    Ok((
        CheckOutcome::new(
            "alpha-limit",
            monotone,
            format!(
                "mean |L_lb - L_sil| at alpha {LIMIT_ALPHAS:?}: {:.3e} {:.3e} {:.3e}; gap/alpha {}",
                gaps[0],
                gaps[1],
                gaps[2],
                slopes.join(" ")
            ),
        ),
        gaps,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LbqSummary {
    pub largest_decrease: f64,
    pub largest_excess: f64,
    pub visited_error: f64,
}

/// Tabular lower-bound Q-learning from a table below `Q*`: hard returns
/// under random behavior, and soft returns (alpha 0.5) under the optimal
/// soft policy, where the visited entries must also converge.
pub fn lbq_sweep(n_mdps: usize, episodes: usize, rng: &mut ChaCha8Rng) -> Result<LbqSummary> {
    let mut s = LbqSummary {
        largest_decrease: 0.0,
        largest_excess: f64::NEG_INFINITY,
        visited_error: 0.0,
    };
    for _ in 0..n_mdps {
        let n = random_size(rng);
        let mdp = TabularMdp::random_deterministic(n, N_ACTIONS, GAMMA, rng)?;
        let mut init = vec![-1.0 / (1.0 - GAMMA); n * N_ACTIONS];
        for st in 0..n {
            if mdp.is_terminal(st) {
                init[st * N_ACTIONS..(st + 1) * N_ACTIONS].fill(0.0);
            }
        }
        let hard = solve(&mdp, 0.0)?;
        let mu = TabularPolicy::random(n, N_ACTIONS, 0.0025, rng);
        let trace = tabular_lb_q_learning(&mdp, &mu, 0.0, LBQ_LR, episodes / 4, &init, rng)?;
        s.largest_decrease = s.largest_decrease.max(trace.largest_decrease());
        s.largest_excess = s.largest_excess.max(trace.largest_excess(&hard.q));

        let soft = solve(&mdp, 0.5)?;
        let trace = tabular_lb_q_learning(&mdp, &soft.pi, 0.5, LBQ_LR, episodes, &init, rng)?;
        s.largest_decrease = s.largest_decrease.max(trace.largest_decrease());
        s.largest_excess = s.largest_excess.max(trace.largest_excess(&soft.q));
        s.visited_error = s.visited_error.max(trace.visited_error(&soft.q, LBQ_MIN_VISITS));
    }
    Ok(s)
}

fn lbq_outcome(s: &LbqSummary, n_mdps: usize) -> CheckOutcome {
    CheckOutcome::new(
        "lower-bound-q-learning",
        s.largest_decrease == 0.0 && s.largest_excess <= LBQ_EXCESS_TOL && s.visited_error <= LBQ_CONVERGENCE_TOL,
        format!(
            "{n_mdps} MDPs: largest entry decrease {:.1e}, max Q - Q* {:.2e} (tol {LBQ_EXCESS_TOL:e}), error on entries updated >= {LBQ_MIN_VISITS} times under pi* {:.2e} (tol {LBQ_CONVERGENCE_TOL:e})",
            s.largest_decrease, s.largest_excess, s.visited_error
        ),
    )
}

/// Empirical sampling frequencies of a small prioritized buffer against
/// `(adv + eps)^0.6 / sum` computed here from the raw advantages.
pub fn prioritized_frequency_error(draws: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let config = PrioritizedConfig {
        capacity: 16,
        ..PrioritizedConfig::default()
    };
    let mut buffer = PrioritizedBuffer::new(config.clone())?;
    let mut expected = Vec::new();
    for i in 0..config.capacity {
        let adv = rng.random_range(0.05..2.0);
        buffer.push(
            ReplayEntry {
                observation: vec![i as f64],
                action: 0,
                ret: adv,
            },
            0.0,
        );
        expected.push((adv + config.epsilon).powf(config.exponent));
    }
    let z: f64 = expected.iter().sum();
    let batch = 1000;
    let mut counts = vec![0usize; config.capacity];
    for _ in 0..draws.div_ceil(batch) {
        for h in buffer.sample_batch(batch, rng)?.handles {
            counts[h.slot] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    Ok(counts
        .iter()
        .zip(&expected)
        .map(|(&c, e)| {
            let p = e / z;
            (c as f64 / total as f64 - p).abs() / p
        })
        .fold(0.0, f64::max))
}

/// Random set/find sequences; returns the worst invariant error seen and the
/// number of `find` answers inconsistent with a linear prefix-sum scan.
pub fn sum_tree_stress(ops: usize, rng: &mut ChaCha8Rng) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut bad_finds = 0;
    let mut done = 0;
    while done < ops {
        let leaves = rng.random_range(1..=100);
        let mut tree = SumTree::new(leaves);
        let mut shadow = vec![0.0; leaves];
        for _ in 0..1000.min(ops - done) {
            done += 1;
            if rng.random::<f64>() < 0.7 {
                let i = rng.random_range(0..leaves);
                let v = if rng.random::<f64>() < 0.1 { 0.0 } else { rng.random_range(0.0..10.0) };
                tree.set(i, v);
                shadow[i] = v;
                worst = worst.max(tree.max_invariant_error());
                let direct: f64 = shadow.iter().sum();
                worst = worst.max((tree.total() - direct).abs() / direct.max(1e-300));
            } else if tree.total() > 0.0 {
                let mass = rng.random::<f64>() * tree.total();
                let i = tree.find(mass);
                let before: f64 = shadow[..i].iter().sum();
                let slack = 1e-9 * tree.total();
                if shadow[i] == 0.0 || mass < before - slack || mass > before + shadow[i] + slack {
                    bad_finds += 1;
                }
            }
        }
    }
    (worst, bad_finds)
}

/// Largest absolute parameter gradient from SIL batches whose returns never
/// exceed the value estimates (including ties).
pub fn sil_clip_max_gradient(batches: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..batches {
        let params = MlpParams::init(6, &[16, 16], N_ACTIONS, rng);
        let n = 32;
        let obs = Matrix::new(n, 6, (0..n * 6).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let out = forward(&params, &obs)?;
        let batch = SilBatch {
            observations: obs,
            actions: (0..n).map(|_| rng.random_range(0..N_ACTIONS)).collect(),
            returns: out
                .values
                .iter()
                .enumerate()
                .map(|(i, v)| if i % 4 == 0 { *v } else { v - rng.random_range(0.0..2.0) })
                .collect(),
            importance_weights: (0..n).map(|_| rng.random_range(0.1..1.0)).collect(),
        };
        let rep = sil_loss(&batch, &out.logits, &out.values, 0.01)?;
        let grads = backprop(&params, &out, &rep.dlogits, &rep.dvalue)?;
        let m = grads.to_flat().iter().map(|g| g.abs()).fold(0.0, f64::max);
        worst = worst.max(m);
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub sizes: SuiteSizes,
    pub seed: u64,
}

impl SuiteOptions {
    pub fn full(seed: u64) -> Self {
        Self {
            sizes: SuiteSizes::full(),
            seed,
        }
    }

    pub fn quick(seed: u64) -> Self {
        Self {
            sizes: SuiteSizes::quick(),
            seed,
        }
    }
}

/// Runs every check. Each check draws from its own seeded stream, so
/// individual results do not depend on which other checks ran.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let start = Instant::now();
    let z = &opts.sizes;
    let rng = |stream: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(opts.seed);
        r.set_stream(stream);
        r
    };
    let mut checks = vec![check_gradients(z.grad_draws, &mut rng(1))?];
    checks.push(check_soft_solutions(z.bound_mdps.min(30), &mut rng(2))?);
    let sweep = lower_bound_sweep(z.bound_mdps, z.bound_trajectories, &mut rng(3))?;
    checks.extend(bound_outcomes(&sweep, z.bound_mdps, z.bound_trajectories));
    checks.push(check_lower_bound_expected(z.expected_mdps, z.expected_rollouts, &mut rng(4))?);
    checks.push(check_grad_equivalence(z.equivalence_instances, &mut rng(5))?.0);
    checks.push(check_alpha_limit(z.limit_instances, &mut rng(6))?.0);
    checks.push(lbq_outcome(&lbq_sweep(z.lbq_mdps, z.lbq_episodes, &mut rng(7))?, z.lbq_mdps));
    let freq = prioritized_frequency_error(z.sampling_draws, &mut rng(8))?;
    checks.push(CheckOutcome::new(
        "prioritized-sampling",
        freq <= SAMPLING_REL_TOL,
        format!("max relative frequency error over {} draws: {freq:.2e} (tol {SAMPLING_REL_TOL})", z.sampling_draws),
    ));
    let (tree_err, bad_finds) = sum_tree_stress(z.tree_ops, &mut rng(9));
    checks.push(CheckOutcome::new(
        "sum-tree-invariant",
        tree_err <= 1e-12 && bad_finds == 0,
        format!("{} random ops: max invariant error {tree_err:.1e}, {bad_finds} bad finds", z.tree_ops),
    ));
    let clip = sil_clip_max_gradient(z.clip_batches, &mut rng(10))?;
    checks.push(CheckOutcome::new(
        "sil-clip",
        clip == 0.0,
        format!("max |gradient| from batches with R <= V: {clip:e}"),
    ));
    Ok(SuiteReport {
        checks,
        elapsed: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes_its_gating_checks() {
        let report = run_suite(&SuiteOptions::quick(0)).unwrap();
        assert!(report.passed(), "{}", report.render());
        assert!(report.get("sil-clip").unwrap().passed);
    }

    #[test]
    fn render_lists_every_check() {
        let report = SuiteReport {
            checks: vec![
                CheckOutcome::new("a", true, "ok".into()),
                CheckOutcome::new("b", false, "bad".into()).informational(),
            ],
            elapsed: Duration::from_millis(5),
        };
        let text = report.render();
        assert!(text.contains("[PASS] a"));
        assert!(text.contains("[NOTE] b"));
        assert!(report.passed());
    }
}
