mod common;

use rand::Rng;
use sil_core::oracle::{entropy_regularized_return, rollout, soft_value_iteration, TabularMdp, TabularPolicy};
use sil_core::replay::discounted_returns;

use common::stream;

/// Exact value of a deterministic stationary policy by fixed-point iteration
/// of its Bellman operator.
fn policy_value(mdp: &TabularMdp, policy: &[usize]) -> Vec<f64> {
    let n = mdp.n_states();
    let mut v = vec![0.0; n];
    for _ in 0..5000 {
        let next: Vec<f64> = (0..n)
            .map(|s| {
                if mdp.is_terminal(s) {
                    return 0.0;
                }
                let a = policy[s];
                mdp.reward(s, a) + mdp.gamma() * mdp.successors(s, a).iter().map(|&(s2, p)| p * v[s2]).sum::<f64>()
            })
            .collect();
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < 1e-15 {
            break;
        }
    }
    v
}

/// Optimal state values by enumerating every deterministic policy.
fn brute_force_values(mdp: &TabularMdp) -> Vec<f64> {
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let mut best = vec![f64::NEG_INFINITY; n];
    let mut policy = vec![0; n];
    loop {
        for (b, v) in best.iter_mut().zip(policy_value(mdp, &policy)) {
            *b = b.max(v);
        }
        // odometer increment
        let mut i = 0;
        while i < n {
            policy[i] += 1;
            if policy[i] < na {
                break;
            }
            policy[i] = 0;
            i += 1;
        }
        if i == n {
            return best;
        }
    }
}

#[test]
fn hard_value_iteration_matches_policy_enumeration() {
    let mut rng = stream(31, 0);
    for i in 0..30 {
        let n = rng.random_range(2..=5);
        let mdp = if i % 2 == 0 {
            TabularMdp::random_deterministic(n, 3, 0.9, &mut rng).unwrap()
        } else {
            TabularMdp::random_stochastic(n, 3, 2, 0.9, &mut rng).unwrap()
        };
        let sol = soft_value_iteration(&mdp, 0.0, 1e-13, 100_000).unwrap();
        let brute = brute_force_values(&mdp);
        for s in 0..n {
            assert!((sol.v[s] - brute[s]).abs() <= 1e-9, "state {s}: {} vs {}", sol.v[s], brute[s]);
        }
    }
}

#[test]
fn soft_values_exceed_hard_values_by_at_most_the_entropy_budget() {
    let mut rng = stream(32, 0);
    let alpha = 0.3;
    for _ in 0..20 {
        let n = rng.random_range(2..=6);
        let mdp = TabularMdp::random_stochastic(n, 4, 3, 0.9, &mut rng).unwrap();
        let hard = soft_value_iteration(&mdp, 0.0, 1e-13, 100_000).unwrap();
        let soft = soft_value_iteration(&mdp, alpha, 1e-13, 100_000).unwrap();
        let budget = alpha * (4f64).ln() / (1.0 - 0.9);
        for s in 0..n {
            assert!(soft.v[s] >= hard.v[s] - 1e-9);
            assert!(soft.v[s] <= hard.v[s] + budget + 1e-9);
        }
    }
}

#[test]
fn zero_temperature_return_is_the_discounted_reward_sum() {
    let mut rng = stream(33, 0);
    let mdp = TabularMdp::random_deterministic(6, 4, 0.95, &mut rng).unwrap();
    let mu = TabularPolicy::uniform(6, 4);
    for _ in 0..50 {
        let traj = rollout(&mdp, &mu, 0, 40, &mut rng);
        let rewards: Vec<f64> = traj.steps.iter().map(|s| s.reward).collect();
        // independent backwards sum
        let mut want = vec![0.0; rewards.len()];
        let mut acc = 0.0;
        for t in (0..rewards.len()).rev() {
            acc = rewards[t] + 0.95 * acc;
            want[t] = acc;
        }
        let got = entropy_regularized_return(&traj, 0.0, 0.95).unwrap();
        assert_eq!(got, discounted_returns(&rewards, 0.95));
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12);
        }
    }
}
