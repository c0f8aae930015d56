//! Tabular reference computations for entropy-regularized RL and the
//! lower-bound view of self-imitation.
//!
//! Everything here works on explicit `(S, A, P, r, gamma)` tables. The
//! [`suite`] module strings the checks together into the `verify` report and
//! [`gradcheck`] compares every training loss against finite differences.

pub mod gradcheck;
pub mod suite;

use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::{lower_bound_q_loss, sil_loss, SilBatch};
use crate::nn::{log_softmax, logsumexp, Matrix};

/// Finite MDP. Terminal states are absorbing, earn nothing and end episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// `(next state, probability)` lists indexed by `s * n_actions + a`.
    transitions: Vec<Vec<(usize, f64)>>,
    rewards: Vec<f64>,
    terminal: Vec<bool>,
    gamma: f64,
    deterministic: bool,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<Vec<(usize, f64)>>,
        rewards: Vec<f64>,
        terminal: Vec<bool>,
        gamma: f64,
    ) -> Result<Self> {
        let sa = n_states * n_actions;
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Usage("MDP needs at least one state and one action".into()));
        }
        if transitions.len() != sa || rewards.len() != sa {
            return Err(Error::shape(
                "TabularMdp tables",
                sa,
                format!("{} transition lists, {} rewards", transitions.len(), rewards.len()),
            ));
        }
        if terminal.len() != n_states {
            return Err(Error::shape("TabularMdp terminal flags", n_states, terminal.len()));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Usage(format!("gamma {gamma} outside [0, 1]")));
        }
        for (i, succ) in transitions.iter().enumerate() {
            let total: f64 = succ.iter().map(|&(_, p)| p).sum();
            if succ.is_empty() || (total - 1.0).abs() > 1e-9 || succ.iter().any(|&(t, p)| t >= n_states || !(p >= 0.0)) {
                return Err(Error::Usage(format!(
                    "transition list for state {} action {} is not a distribution over states",
                    i / n_actions,
                    i % n_actions
                )));
            }
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::Usage("rewards must be finite".into()));
        }
        let deterministic = transitions.iter().all(|s| s.len() == 1);
        Ok(Self {
            n_states,
            n_actions,
            transitions,
            rewards,
            terminal,
            gamma,
            deterministic,
        })
    }

    /// Random deterministic MDP: the last state is terminal, every other
    /// `(s, a)` moves to a uniformly drawn state (terminal included) and pays a
    /// reward uniform in `[-1, 1]`.
    pub fn random_deterministic<R: Rng + ?Sized>(n_states: usize, n_actions: usize, gamma: f64, rng: &mut R) -> Result<Self> {
        Self::random(n_states, n_actions, 1, gamma, rng)
    }

    /// As [`Self::random_deterministic`] with `n_successors` random
    /// successors per pair and Dirichlet-like random probabilities.
    pub fn random_stochastic<R: Rng + ?Sized>(n_states: usize, n_actions: usize, n_successors: usize, gamma: f64, rng: &mut R) -> Result<Self> {
        Self::random(n_states, n_actions, n_successors.max(1), gamma, rng)
    }

    fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, n_successors: usize, gamma: f64, rng: &mut R) -> Result<Self> {
        if n_states < 2 {
            return Err(Error::Usage("random MDPs need a terminal and one other state".into()));
        }
        let term = n_states - 1;
        let mut transitions = Vec::with_capacity(n_states * n_actions);
        let mut rewards = Vec::with_capacity(n_states * n_actions);
        for s in 0..n_states {
            for _ in 0..n_actions {
                if s == term {
                    transitions.push(vec![(term, 1.0)]);
                    rewards.push(0.0);
                    continue;
                }
                let weights: Vec<f64> = (0..n_successors).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
                let total: f64 = weights.iter().sum();
                let mut succ: Vec<(usize, f64)> = Vec::with_capacity(n_successors);
                for w in weights {
                    let t = rng.random_range(0..n_states);
                    match succ.iter_mut().find(|(u, _)| *u == t) {
                        Some(e) => e.1 += w / total,
                        None => succ.push((t, w / total)),
                    }
                }
                // renormalize the merged list so it sums to one exactly enough
                let z: f64 = succ.iter().map(|e| e.1).sum();
                succ.iter_mut().for_each(|e| e.1 /= z);
                transitions.push(succ);
                rewards.push(rng.random_range(-1.0..=1.0));
            }
        }
        let mut terminal = vec![false; n_states];
        terminal[term] = true;
        Self::new(n_states, n_actions, transitions, rewards, terminal, gamma)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    pub fn successors(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.transitions[s * self.n_actions + a]
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        let succ = self.successors(s, a);
        if succ.len() == 1 {
            return succ[0].0;
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for &(t, p) in succ {
            acc += p;
            if u < acc {
                return t;
            }
        }
        succ[succ.len() - 1].0
    }

    pub fn non_terminal_states(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_states).filter(|&s| !self.terminal[s])
    }

    /// `r(s, a) + gamma * E[v(s')]`.
    fn backup(&self, v: &[f64], s: usize, a: usize) -> f64 {
        let next: f64 = self.successors(s, a).iter().map(|&(t, p)| p * v[t]).sum();
        self.reward(s, a) + self.gamma * next
    }
}

/// State-action table stored row-major by state.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::shape("TabularPolicy", n_states * n_actions, probs.len()));
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 || row.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::Usage(format!("policy row for state {s} is not a distribution")));
            }
        }
        Ok(Self { n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// Rows drawn from a flat Dirichlet, then mixed with `floor` of uniform
    /// mass so every probability is at least `floor`.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, floor: f64, rng: &mut R) -> Self {
        let mix = floor * n_actions as f64;
        let mut probs = Vec::with_capacity(n_states * n_actions);
        for _ in 0..n_states {
            let w: Vec<f64> = (0..n_actions).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
            let z: f64 = w.iter().sum();
            probs.extend(w.iter().map(|x| (1.0 - mix) * x / z + floor));
        }
        Self { n_actions, probs }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, p) in self.row(s).iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        // rounding left some mass unassigned; fall back to the last supported action
        self.row(s).iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

/// Optimal soft action values, state values and policy.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftSolution {
    pub alpha: f64,
    /// Row-major `n_states x n_actions`.
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub pi: TabularPolicy,
    pub iterations: usize,
    pub residual: f64,
}

impl SoftSolution {
    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.pi.n_actions + a]
    }

    /// Largest violation of `V = alpha * logsumexp(Q / alpha)` (max for
    /// alpha = 0) and of `pi = exp((Q - V) / alpha)` with unit row sums.
    pub fn consistency_error(&self, mdp: &TabularMdp) -> f64 {
        let na = mdp.n_actions();
        let mut worst: f64 = 0.0;
        for s in mdp.non_terminal_states() {
            let row = &self.q[s * na..(s + 1) * na];
            worst = worst.max((soft_max(row, self.alpha) - self.v[s]).abs());
            let pi_row = self.pi.row(s);
            worst = worst.max((pi_row.iter().sum::<f64>() - 1.0).abs());
            if self.alpha > 0.0 {
                for (q, p) in row.iter().zip(pi_row) {
                    worst = worst.max((((q - self.v[s]) / self.alpha).exp() - p).abs());
                }
            }
        }
        worst
    }
}

/// `alpha * logsumexp(x / alpha)`, or `max x` at alpha = 0.
pub fn soft_max(x: &[f64], alpha: f64) -> f64 {
    if alpha == 0.0 {
        return x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    let scaled: Vec<f64> = x.iter().map(|q| q / alpha).collect();
    alpha * logsumexp(&scaled)
}

/// Soft value iteration on `Q(s,a) = r + gamma * E V(s')` with the soft max
/// backup, run until the sup-norm change drops below `tol`. At alpha = 0 the
/// policy spreads evenly over the maximizing actions.
pub fn soft_value_iteration(mdp: &TabularMdp, alpha: f64, tol: f64, max_iters: usize) -> Result<SoftSolution> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::Usage(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut q = vec![0.0; ns * na];
    let mut v = vec![0.0; ns];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        residual = 0.0;
        let mut next_q = vec![0.0; ns * na];
        for s in mdp.non_terminal_states() {
            for a in 0..na {
                let nq = mdp.backup(&v, s, a);
                residual = f64::max(residual, (nq - q[s * na + a]).abs());
                next_q[s * na + a] = nq;
            }
        }
        q = next_q;
        for s in mdp.non_terminal_states() {
            v[s] = soft_max(&q[s * na..(s + 1) * na], alpha);
        }
        if residual < tol {
            break;
        }
    }
    if !(residual < tol) {
        return Err(Error::NoConvergence { iterations, residual });
    }
    let mut probs = vec![1.0 / na as f64; ns * na];
    for s in mdp.non_terminal_states() {
        let row = &q[s * na..(s + 1) * na];
        let out = &mut probs[s * na..(s + 1) * na];
        if alpha > 0.0 {
            for (p, qa) in out.iter_mut().zip(row) {
                *p = ((qa - v[s]) / alpha).exp();
            }
        } else {
            let best = row.iter().filter(|&&x| x == v[s]).count() as f64;
            for (p, qa) in out.iter_mut().zip(row) {
                *p = if *qa == v[s] { 1.0 / best } else { 0.0 };
            }
        }
    }
    Ok(SoftSolution {
        alpha,
        q,
        v,
        pi: TabularPolicy { n_actions: na, probs },
        iterations,
        residual,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajStep {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
}

/// One episode generated by the behavior policy `mu`.
#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorTrajectory {
    pub steps: Vec<TrajStep>,
    pub mu: TabularPolicy,
    /// True when the episode hit `max_len` before reaching a terminal state.
    pub truncated: bool,
}

pub fn rollout<R: Rng + ?Sized>(mdp: &TabularMdp, mu: &TabularPolicy, start: usize, max_len: usize, rng: &mut R) -> BehaviorTrajectory {
    let mut steps = Vec::new();
    let mut s = start;
    while !mdp.is_terminal(s) && steps.len() < max_len {
        let a = mu.sample(s, rng);
        steps.push(TrajStep {
            state: s,
            action: a,
            reward: mdp.reward(s, a),
        });
        s = mdp.sample_next(s, a, rng);
    }
    BehaviorTrajectory {
        truncated: !mdp.is_terminal(s),
        steps,
        mu: mu.clone(),
    }
}

/// `R_t = r_t + sum_{k>t} gamma^(k-t) (r_k + alpha * H_k)` with
/// `H_k = -log mu(a_k|s_k)`; no entropy term at step `t` itself.
pub fn entropy_regularized_return(traj: &BehaviorTrajectory, alpha: f64, gamma: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; traj.steps.len()];
    // G_k includes the entropy term at k, R_k does not
    let mut g_next = 0.0;
    for (k, st) in traj.steps.iter().enumerate().rev() {
        let p = traj.mu.prob(st.state, st.action);
        if !(p > 0.0) {
            return Err(Error::ZeroProbabilityAction {
                state: st.state,
                action: st.action,
            });
        }
        let r = st.reward + gamma * g_next;
        out[k] = r;
        g_next = if alpha == 0.0 { r } else { r + alpha * -p.ln() };
    }
    Ok(out)
}

/// Longest episode needed before the discounted tail is negligible.
fn horizon(gamma: f64) -> usize {
    if gamma < 1.0 {
        ((1e-14f64).ln() / gamma.ln()).ceil() as usize + 1
    } else {
        10_000
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowerBoundReport {
    pub samples: usize,
    pub violations: usize,
    /// Largest `R_t - Q*(s_t, a_t)`; negative when every sample is strictly below.
    pub max_excess: f64,
    /// Description of the worst sample when it violated the bound.
    pub counterexample: Option<String>,
}

impl LowerBoundReport {
    fn empty() -> Self {
        Self {
            samples: 0,
            violations: 0,
            max_excess: f64::NEG_INFINITY,
            counterexample: None,
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.samples += other.samples;
        self.violations += other.violations;
        if other.max_excess > self.max_excess {
            self.max_excess = other.max_excess;
            if other.counterexample.is_some() {
                self.counterexample = other.counterexample.clone();
            }
        }
    }
}

/// Checks `Q*(s_t, a_t) >= R_t - tol` on every step of `n_trajectories`
/// episodes sampled from `mu`, starting in uniformly drawn non-terminal states.
pub fn verify_lower_bound<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    solution: &SoftSolution,
    mu: &TabularPolicy,
    n_trajectories: usize,
    tol: f64,
    rng: &mut R,
) -> Result<LowerBoundReport> {
    if !mdp.is_deterministic() {
        return Err(Error::Usage(
            "per-trajectory bound applies to deterministic MDPs; use verify_lower_bound_expected".into(),
        ));
    }
    let starts: Vec<usize> = mdp.non_terminal_states().collect();
    let mut report = LowerBoundReport::empty();
    for _ in 0..n_trajectories {
        let start = starts[rng.random_range(0..starts.len())];
        let traj = rollout(mdp, mu, start, horizon(mdp.gamma()), rng);
        let returns = entropy_regularized_return(&traj, solution.alpha, mdp.gamma())?;
        for (t, (st, r)) in traj.steps.iter().zip(&returns).enumerate() {
            let excess = r - solution.q(st.state, st.action);
            report.samples += 1;
            if excess > tol {
                report.violations += 1;
            }
            if excess > report.max_excess {
                report.max_excess = excess;
                report.counterexample = (excess > tol).then(|| {
                    format!(
                        "alpha {}: step {t} of a {}-step episode, state {} action {}: R = {r:.12}, Q* = {:.12}, mu(a|s) = {:.6}, pi*(a|s) = {:.6}",
                        solution.alpha,
                        traj.steps.len(),
                        st.state,
                        st.action,
                        solution.q(st.state, st.action),
                        mu.prob(st.state, st.action),
                        solution.pi.prob(st.state, st.action)
                    )
                });
            }
        }
    }
    Ok(report)
}

/// Exact `E_mu[R_t | s_t = s, a_t = a]`: the soft action value of `mu`,
/// `Q^mu(s,a) = r + gamma * E[V^mu(s')]` with
/// `V^mu(s) = sum_a mu(a|s) (Q^mu(s,a) - alpha log mu(a|s))`.
pub fn behavior_soft_q(mdp: &TabularMdp, mu: &TabularPolicy, alpha: f64, tol: f64, max_iters: usize) -> Result<Vec<f64>> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut q = vec![0.0; ns * na];
    let mut v = vec![0.0; ns];
    for it in 1..=max_iters {
        let mut residual: f64 = 0.0;
        for s in mdp.non_terminal_states() {
            for a in 0..na {
                let nq = mdp.backup(&v, s, a);
                residual = residual.max((nq - q[s * na + a]).abs());
                q[s * na + a] = nq;
            }
        }
        for s in mdp.non_terminal_states() {
            v[s] = (0..na)
                .map(|a| {
                    let p = mu.prob(s, a);
                    if p > 0.0 {
                        p * (q[s * na + a] - alpha * p.ln())
                    } else {
                        0.0
                    }
                })
                .sum();
        }
        if residual < tol {
            return Ok(q);
        }
        if it == max_iters {
            return Err(Error::NoConvergence { iterations: it, residual });
        }
    }
    Err(Error::NoConvergence {
        iterations: 0,
        residual: f64::INFINITY,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpectedBoundReport {
    pub pairs: usize,
    /// Largest `Q^mu(s,a) - Q*(s,a)` from exact evaluation.
    pub max_exact_excess: f64,
    /// Largest Monte Carlo excess after subtracting the statistical margin.
    pub max_sampled_excess: f64,
    pub violations: usize,
}

/// Expectation form of the bound for arbitrary (possibly stochastic) MDPs:
/// exact behavior values must not exceed `Q*`, and Monte Carlo means over
/// `rollouts` episodes per pair must stay within four standard errors.
pub fn verify_lower_bound_expected<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    solution: &SoftSolution,
    mu: &TabularPolicy,
    rollouts: usize,
    tol: f64,
    rng: &mut R,
) -> Result<ExpectedBoundReport> {
    let exact = behavior_soft_q(mdp, mu, solution.alpha, 1e-13, 100_000)?;
    let na = mdp.n_actions();
    let mut report = ExpectedBoundReport {
        pairs: 0,
        max_exact_excess: f64::NEG_INFINITY,
        max_sampled_excess: f64::NEG_INFINITY,
        violations: 0,
    };
    let max_len = horizon(mdp.gamma());
    for s in mdp.non_terminal_states() {
        for a in 0..na {
            report.pairs += 1;
            let excess = exact[s * na + a] - solution.q(s, a);
            report.max_exact_excess = report.max_exact_excess.max(excess);
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..rollouts {
                // force the first action, then follow mu
                let next = mdp.sample_next(s, a, rng);
                let tail = rollout(mdp, mu, next, max_len, rng);
                let mut steps = vec![TrajStep {
                    state: s,
                    action: a,
                    reward: mdp.reward(s, a),
                }];
                steps.extend(tail.steps);
                let traj = BehaviorTrajectory {
                    steps,
                    mu: mu.clone(),
                    truncated: tail.truncated,
                };
                // the forced action is not part of mu's entropy, and R_0 has none
                let r0 = entropy_regularized_return(&traj, solution.alpha, mdp.gamma())?[0];
                sum += r0;
                sum_sq += r0 * r0;
            }
            let n = rollouts as f64;
            let mean = sum / n;
            let se = ((sum_sq / n - mean * mean).max(0.0) / n).sqrt();
            let sampled = mean - 4.0 * se - solution.q(s, a);
            report.max_sampled_excess = report.max_sampled_excess.max(sampled);
            if excess > tol || sampled > tol {
                report.violations += 1;
            }
        }
    }
    Ok(report)
}

/// Q tables recorded after every episode of lower-bound Q-learning.
#[derive(Clone, Debug, PartialEq)]
pub struct LbqTrace {
    /// `snapshots[0]` is the initialization.
    pub snapshots: Vec<Vec<f64>>,
    /// Updates applied to each entry.
    pub visits: Vec<usize>,
    pub updates: usize,
}

impl LbqTrace {
    pub fn last(&self) -> &[f64] {
        self.snapshots.last().expect("trace starts with the initial table")
    }

    /// Most negative change of any entry between consecutive snapshots
    /// (0 for a non-decreasing trace).
    pub fn largest_decrease(&self) -> f64 {
        self.snapshots
            .windows(2)
            .flat_map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| a - b))
            .fold(0.0, f64::max)
    }

    /// Largest `Q - Q*` over the whole trace.
    pub fn largest_excess(&self, q_star: &[f64]) -> f64 {
        self.snapshots
            .iter()
            .flat_map(|q| q.iter().zip(q_star).map(|(a, b)| a - b))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest `|Q - Q*|` in the final table over entries updated at least
    /// `min_visits` times.
    pub fn visited_error(&self, q_star: &[f64], min_visits: usize) -> f64 {
        self.last()
            .iter()
            .zip(q_star)
            .zip(&self.visits)
            .filter(|(_, &v)| v >= min_visits.max(1))
            .map(|((a, b), _)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Tabular SGD on `0.5 * (R - Q(s,a))_+^2` with returns from episodes of
/// `mu`; each visited pair takes `Q <- Q - lr * dq` with `dq = -(R - Q)_+`.
pub fn tabular_lb_q_learning<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    mu: &TabularPolicy,
    alpha: f64,
    lr: f64,
    n_episodes: usize,
    init: &[f64],
    rng: &mut R,
) -> Result<LbqTrace> {
    let na = mdp.n_actions();
    if init.len() != mdp.n_states() * na {
        return Err(Error::shape("tabular_lb_q_learning init", mdp.n_states() * na, init.len()));
    }
    let starts: Vec<usize> = mdp.non_terminal_states().collect();
    let mut q = init.to_vec();
    let mut trace = LbqTrace {
        snapshots: vec![q.clone()],
        visits: vec![0; q.len()],
        updates: 0,
    };
    for _ in 0..n_episodes {
        let start = starts[rng.random_range(0..starts.len())];
        let traj = rollout(mdp, mu, start, horizon(mdp.gamma()), rng);
        let returns = entropy_regularized_return(&traj, alpha, mdp.gamma())?;
        for (st, &r) in traj.steps.iter().zip(&returns) {
            let i = st.state * na + st.action;
            let (_, dq) = lower_bound_q_loss(&[q[i]], &[r])?;
            q[i] -= lr * dq[0];
            trace.visits[i] += 1;
            trace.updates += 1;
        }
        trace.snapshots.push(q.clone());
    }
    Ok(trace)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LbSample {
    pub state: usize,
    pub action: usize,
    pub ret: f64,
}

/// Compares the direct gradient of `mean 0.5 * (R - Q(s,a))_+^2` with respect
/// to the Q table against `alpha * grad L_policy + grad L_value`, where
/// `V = alpha * logsumexp(Q / alpha)`, `log pi = (Q - V) / alpha`,
/// `R_hat = R - alpha * log pi(a|s)` and both clipped gaps are held constant.
/// Returns the largest absolute difference over table entries.
pub fn grad_equivalence_check(q: &[f64], n_actions: usize, samples: &[LbSample], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::Usage("the decomposition needs alpha > 0".into()));
    }
    let n = samples.len() as f64;
    let q_sa: Vec<f64> = samples.iter().map(|x| q[x.state * n_actions + x.action]).collect();
    let rets: Vec<f64> = samples.iter().map(|x| x.ret).collect();
    let (_, dq) = lower_bound_q_loss(&q_sa, &rets)?;
    let mut direct = vec![0.0; q.len()];
    for (x, g) in samples.iter().zip(&dq) {
        direct[x.state * n_actions + x.action] += g / n;
    }

    let mut decomposed = vec![0.0; q.len()];
    for x in samples {
        let row = &q[x.state * n_actions..(x.state + 1) * n_actions];
        let v = soft_max(row, alpha);
        let log_pi: Vec<f64> = row.iter().map(|qb| (qb - v) / alpha).collect();
        let r_hat = x.ret - alpha * log_pi[x.action];
        let gap = (r_hat - v).max(0.0);
        let grad = &mut decomposed[x.state * n_actions..(x.state + 1) * n_actions];
        for (b, g) in grad.iter_mut().enumerate() {
            let pi_b = log_pi[b].exp();
            let onehot = if b == x.action { 1.0 } else { 0.0 };
            // L_policy = -log pi(a|s) * gap:  d log pi(a|s) / dQ_b = (onehot - pi_b) / alpha
            let policy = -gap * (onehot - pi_b) / alpha;
            // L_value = 0.5 * (R_hat - V)_+^2 with R_hat fixed:  dV / dQ_b = pi_b
            let value = -gap * pi_b;
            *g += (alpha * policy + value) / n;
        }
    }
    Ok(direct
        .iter()
        .zip(&decomposed)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// A fixed `(pi, V, R, a)` draw for the small-alpha comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct LimitInstance {
    pub probs: Vec<f64>,
    pub value: f64,
    pub ret: f64,
    pub action: usize,
}

impl LimitInstance {
    /// Probabilities bounded below by `floor`, values and returns standard normal.
    pub fn random<R: Rng + ?Sized>(n_actions: usize, floor: f64, rng: &mut R) -> Self {
        let pi = TabularPolicy::random(1, n_actions, floor, rng);
        let normal = |rng: &mut R| -> f64 { rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng) };
        Self {
            probs: pi.row(0).to_vec(),
            value: normal(rng),
            ret: normal(rng),
            action: rng.random_range(0..n_actions),
        }
    }
}

/// Mean over instances of `|L^lb_policy - L^sil_policy| + |L^lb_value - L^sil_value|`
/// at the given alpha. The SIL side comes from [`sil_loss`].
pub fn lb_sil_gap(instances: &[LimitInstance], alpha: f64) -> Result<f64> {
    let mut total = 0.0;
    for inst in instances {
        let logits: Vec<f64> = inst.probs.iter().map(|p| p.ln()).collect();
        let batch = SilBatch {
            observations: Matrix::zeros(1, 1),
            actions: vec![inst.action],
            returns: vec![inst.ret],
            importance_weights: vec![1.0],
        };
        let sil = sil_loss(&batch, &Matrix::new(1, logits.len(), logits.clone())?, &[inst.value], 1.0)?;
        let log_pi = log_softmax(&logits)[inst.action];
        let r_hat = inst.ret - alpha * log_pi;
        let gap = (r_hat - inst.value).max(0.0);
        let lb_policy = -log_pi * gap;
        let lb_value = 0.5 * gap * gap;
        total += (lb_policy - sil.policy_loss).abs() + (lb_value - sil.value_loss).abs();
    }
    Ok(total / instances.len().max(1) as f64)
}
