//! Training objectives and their gradients with respect to the network
//! outputs (logits and state values).
//!
//! Every loss returns `dlogits` / `dvalue` for the batch-mean objective; feed
//! them to [`crate::nn::backprop`] to obtain parameter gradients. Advantages in
//! the policy terms are constants (no gradient flows into the value head
//! through them).

use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};
use crate::nn::{log_softmax, Matrix};

/// Replayed `(s, a, R)` samples plus their importance weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SilBatch {
    pub observations: Matrix,
    pub actions: Vec<usize>,
    pub returns: Vec<f64>,
    pub importance_weights: Vec<f64>,
}

impl SilBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.actions.len();
        if self.observations.rows() != n || self.returns.len() != n || self.importance_weights.len() != n {
            return Err(Error::shape(
                "SilBatch",
                format!("{n} aligned rows"),
                format!(
                    "{} observations, {} returns, {} weights",
                    self.observations.rows(),
                    self.returns.len(),
                    self.importance_weights.len()
                ),
            ));
        }
        if let Some(r) = self.returns.iter().find(|r| !r.is_finite()) {
            return Err(Error::NonFinite {
                context: "SIL returns",
                diagnostics: format!("return {r}"),
            });
        }
        Ok(())
    }
}

/// On-policy rollout of `n_steps` steps from each of `n_envs` environments.
/// Rows are step-major: row `t * n_envs + e` is step `t` of environment `e`.
#[derive(Clone, Debug, PartialEq)]
pub struct A2cRollout {
    pub n_envs: usize,
    pub n_steps: usize,
    pub observations: Matrix,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// `dones[i]` is true when the transition in row `i` ended its episode.
    pub dones: Vec<bool>,
    /// `V(s)` of the observation following the last step, per environment.
    pub bootstrap_values: Vec<f64>,
    pub gamma: f64,
}

impl A2cRollout {
    pub fn len(&self) -> usize {
        self.n_envs * self.n_steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        if self.observations.rows() != n || self.actions.len() != n || self.rewards.len() != n || self.dones.len() != n {
            return Err(Error::shape(
                "A2cRollout",
                format!("{n} rows"),
                format!(
                    "{} observations, {} actions, {} rewards, {} dones",
                    self.observations.rows(),
                    self.actions.len(),
                    self.rewards.len(),
                    self.dones.len()
                ),
            ));
        }
        if self.bootstrap_values.len() != self.n_envs {
            return Err(Error::shape("A2cRollout bootstrap", self.n_envs, self.bootstrap_values.len()));
        }
        Ok(())
    }

    /// Bootstrapped targets: each step accumulates discounted rewards up to the
    /// end of the rollout and then adds the discounted bootstrap value. A done
    /// flag cuts the accumulation, so nothing beyond an episode end leaks in.
    pub fn value_targets(&self) -> Vec<f64> {
        n_step_targets(&self.rewards, &self.dones, &self.bootstrap_values, self.gamma, self.n_envs)
    }
}

pub fn n_step_targets(rewards: &[f64], dones: &[bool], bootstrap: &[f64], gamma: f64, n_envs: usize) -> Vec<f64> {
    let n_steps = rewards.len() / n_envs.max(1);
    let mut targets = vec![0.0; rewards.len()];
    for (e, &boot) in bootstrap.iter().enumerate().take(n_envs) {
        let mut acc = boot;
        for t in (0..n_steps).rev() {
            let i = t * n_envs + e;
            let cont = if dones[i] { 0.0 } else { 1.0 };
            acc = rewards[i] + gamma * cont * acc;
            targets[i] = acc;
        }
    }
    targets
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    /// Batch-mean of the (weighted) policy term.
    pub policy_loss: f64,
    /// Batch-mean of the (weighted) value term, before its coefficient.
    pub value_loss: f64,
    /// Mean policy entropy over the batch.
    pub entropy: f64,
    /// The optimized scalar.
    pub total: f64,
    pub dlogits: Matrix,
    pub dvalue: Vec<f64>,
    /// Share of samples whose advantage term is active (SIL only; 1 for A2C).
    pub valid_fraction: f64,
    pub valid_mask: Vec<bool>,
}

static CLIP_FAULT: AtomicBool = AtomicBool::new(false);

/// Fault injection for the verification suite: while enabled, `sil_loss`
/// clips the advantage with the wrong sign. Process-wide.
#[doc(hidden)]
pub fn set_clip_fault(on: bool) {
    CLIP_FAULT.store(on, Ordering::SeqCst);
}

#[doc(hidden)]
pub fn clip_fault() -> bool {
    CLIP_FAULT.load(Ordering::SeqCst)
}

fn entropy_of(log_probs: &[f64]) -> f64 {
    -log_probs.iter().map(|lp| lp.exp() * lp).sum::<f64>()
}

fn check_outputs(context: &'static str, n: usize, logits: &Matrix, values: &[f64]) -> Result<()> {
    if logits.rows() != n || values.len() != n {
        return Err(Error::shape(
            context,
            format!("{n} outputs"),
            format!("{} logit rows, {} values", logits.rows(), values.len()),
        ));
    }
    Ok(())
}

fn check_actions(actions: &[usize], n_actions: usize) -> Result<()> {
    match actions.iter().find(|&&a| a >= n_actions) {
        Some(a) => Err(Error::Usage(format!("action {a} out of range for {n_actions} logits"))),
        None => Ok(()),
    }
}

/// Self-imitation loss: mean over samples of
/// `w * (-log pi(a|s) * (R - V)_+ + beta_sil * 0.5 * (R - V)_+^2)`.
pub fn sil_loss(batch: &SilBatch, logits: &Matrix, values: &[f64], beta_sil: f64) -> Result<LossReport> {
    batch.check()?;
    let n = batch.len();
    check_outputs("sil_loss", n, logits, values)?;
    check_actions(&batch.actions, logits.cols())?;
    let inv_n = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let mut dlogits = Matrix::zeros(n, logits.cols());
    let mut dvalue = vec![0.0; n];
    let mut valid_mask = vec![false; n];
    let (mut policy_loss, mut value_loss, mut entropy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let lp = log_softmax(logits.row(i));
        entropy += entropy_of(&lp) * inv_n;
        let gap = batch.returns[i] - values[i];
        let adv = if clip_fault() { (-gap).max(0.0) } else { gap.max(0.0) };
        if adv <= 0.0 {
            continue;
        }
        valid_mask[i] = true;
        let w = batch.importance_weights[i];
        let a = batch.actions[i];
        policy_loss += w * -lp[a] * adv * inv_n;
        value_loss += w * 0.5 * adv * adv * inv_n;
        let scale = w * adv * inv_n;
        for (j, (d, l)) in dlogits.row_mut(i).iter_mut().zip(&lp).enumerate() {
            let onehot = if j == a { 1.0 } else { 0.0 };
            *d = scale * (l.exp() - onehot);
        }
        dvalue[i] = -w * beta_sil * adv * inv_n;
    }
    let valid = valid_mask.iter().filter(|&&v| v).count();
    Ok(LossReport {
        policy_loss,
        value_loss,
        entropy,
        total: policy_loss + beta_sil * value_loss,
        dlogits,
        dvalue,
        valid_fraction: if n == 0 { 0.0 } else { valid as f64 / n as f64 },
        valid_mask,
    })
}

/// Advantage actor-critic loss with entropy bonus:
/// mean of `-log pi(a|s) * (V^n - V) - alpha * H` plus
/// `beta_a2c * mean 0.5 * (V - V^n)^2`.
pub fn a2c_loss(rollout: &A2cRollout, logits: &Matrix, values: &[f64], alpha: f64, beta_a2c: f64) -> Result<LossReport> {
    rollout.check()?;
    let n = rollout.len();
    check_outputs("a2c_loss", n, logits, values)?;
    check_actions(&rollout.actions, logits.cols())?;
    let targets = rollout.value_targets();
    let inv_n = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let mut dlogits = Matrix::zeros(n, logits.cols());
    let mut dvalue = vec![0.0; n];
    let (mut policy_loss, mut value_loss, mut entropy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let lp = log_softmax(logits.row(i));
        let h = entropy_of(&lp);
        let adv = targets[i] - values[i];
        let a = rollout.actions[i];
        policy_loss += (-lp[a] * adv - alpha * h) * inv_n;
        value_loss += 0.5 * adv * adv * inv_n;
        entropy += h * inv_n;
        for (j, (d, l)) in dlogits.row_mut(i).iter_mut().zip(&lp).enumerate() {
            let p = l.exp();
            let onehot = if j == a { 1.0 } else { 0.0 };
            *d = (adv * (p - onehot) + alpha * p * (l + h)) * inv_n;
        }
        dvalue[i] = beta_a2c * (values[i] - targets[i]) * inv_n;
    }
    Ok(LossReport {
        policy_loss,
        value_loss,
        entropy,
        total: policy_loss + beta_a2c * value_loss,
        dlogits,
        dvalue,
        valid_fraction: 1.0,
        valid_mask: vec![true; n],
    })
}

/// Lower-bound soft Q regression: `mean 0.5 * (R - Q)_+^2`.
///
/// `dq[i] = -(R_i - Q_i)_+` is the per-sample gradient (not divided by the
/// batch size).
pub fn lower_bound_q_loss(q_estimates: &[f64], returns: &[f64]) -> Result<(f64, Vec<f64>)> {
    if q_estimates.len() != returns.len() {
        return Err(Error::shape("lower_bound_q_loss", q_estimates.len(), returns.len()));
    }
    let n = q_estimates.len();
    let mut loss = 0.0;
    let dq = q_estimates
        .iter()
        .zip(returns)
        .map(|(q, r)| {
            let gap = (r - q).max(0.0);
            loss += 0.5 * gap * gap;
            -gap
        })
        .collect();
    if n > 0 {
        loss /= n as f64;
    }
    Ok((loss, dq))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    fn sil_batch(actions: Vec<usize>, returns: Vec<f64>, weights: Vec<f64>) -> SilBatch {
        SilBatch {
            observations: Matrix::zeros(actions.len(), 1),
            actions,
            returns,
            importance_weights: weights,
        }
    }

    #[test]
    fn sil_scalar_example() {
        let batch = sil_batch(vec![0], vec![1.0], vec![1.0]);
        let logits = Matrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        let rep = sil_loss(&batch, &logits, &[0.0], 0.01).unwrap();
        assert!((rep.policy_loss - 2f64.ln()).abs() < 1e-12);
        assert!((rep.value_loss - 0.5).abs() < 1e-15);
        assert!((rep.total - (2f64.ln() + 0.005)).abs() < 1e-12);
        assert_eq!(rep.dlogits.row(0), &[-0.5, 0.5]);
        assert!((rep.dvalue[0] + 0.01).abs() < 1e-15);
        assert_eq!(rep.valid_fraction, 1.0);
    }

    #[test]
    fn sil_ignores_samples_below_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = random_matrix(&mut rng, 3, 4, 2.0);
        let batch = sil_batch(vec![0, 1, 3], vec![1.0, -2.0, 0.5], vec![1.0, 0.7, 0.2]);
        let rep = sil_loss(&batch, &logits, &[1.0, 0.0, 0.5], 0.01).unwrap();
        assert_eq!(rep.total, 0.0);
        assert!(rep.dlogits.as_slice().iter().all(|&x| x == 0.0));
        assert!(rep.dvalue.iter().all(|&x| x == 0.0));
        assert_eq!(rep.valid_fraction, 0.0);
        assert_eq!(rep.valid_mask, vec![false; 3]);
    }

    #[test]
    fn sil_gradient_signal_mask_matches_valid_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = random_matrix(&mut rng, 64, 4, 2.0);
        let returns: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let actions = (0..64).map(|_| rng.random_range(0..4)).collect();
        let batch = sil_batch(actions, returns.clone(), vec![1.0; 64]);
        let rep = sil_loss(&batch, &logits, &values, 0.01).unwrap();
        for i in 0..64 {
            let has_signal = rep.dvalue[i] != 0.0 || rep.dlogits.row(i).iter().any(|&x| x != 0.0);
            assert_eq!(has_signal, rep.valid_mask[i]);
            assert_eq!(rep.valid_mask[i], returns[i] > values[i]);
        }
    }

    /// Central differences of the surrogate with advantages frozen in the
    /// policy term.
    #[test]
    fn sil_output_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 8;
        let logits = random_matrix(&mut rng, n, 3, 1.5);
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let returns: Vec<f64> = values.iter().map(|v| v + rng.random_range(-1.0..1.0)).collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let actions: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let batch = sil_batch(actions.clone(), returns.clone(), weights.clone());
        let beta = 0.3;
        let frozen: Vec<f64> = returns.iter().zip(&values).map(|(r, v)| (r - v).max(0.0)).collect();
        let surrogate = |l: &Matrix, v: &[f64]| -> f64 {
            (0..n)
                .map(|i| {
                    let lp = log_softmax(l.row(i));
                    let gap = (returns[i] - v[i]).max(0.0);
                    weights[i] * (-lp[actions[i]] * frozen[i] + beta * 0.5 * gap * gap)
                })
                .sum::<f64>()
                / n as f64
        };
        let rep = sil_loss(&batch, &logits, &values, beta).unwrap();
        let h = 1e-6;
        for k in 0..logits.as_slice().len() {
            let (mut up, mut down) = (logits.clone(), logits.clone());
            up.as_mut_slice()[k] += h;
            down.as_mut_slice()[k] -= h;
            let fd = (surrogate(&up, &values) - surrogate(&down, &values)) / (2.0 * h);
            assert!((fd - rep.dlogits.as_slice()[k]).abs() < 1e-8);
        }
        for k in 0..n {
            let (mut up, mut down) = (values.clone(), values.clone());
            up[k] += h;
            down[k] -= h;
            let fd = (surrogate(&logits, &up) - surrogate(&logits, &down)) / (2.0 * h);
            assert!((fd - rep.dvalue[k]).abs() < 1e-8);
        }
    }

    fn rollout(rewards: Vec<f64>, dones: Vec<bool>, boot: Vec<f64>, n_envs: usize, gamma: f64) -> A2cRollout {
        let n = rewards.len();
        A2cRollout {
            n_envs,
            n_steps: n / n_envs,
            observations: Matrix::zeros(n, 1),
            actions: vec![0; n],
            rewards,
            dones,
            bootstrap_values: boot,
            gamma,
        }
    }

    #[test]
    fn five_step_target_is_discounted_bootstrap() {
        let r = rollout(vec![0.0; 5], vec![false; 5], vec![2.0], 1, 0.99);
        let t = r.value_targets();
        assert!((t[0] - 0.99f64.powi(5) * 2.0).abs() < 1e-15);
        assert!((t[4] - 0.99 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn terminal_cuts_bootstrap() {
        // two envs, three steps; env 0 ends its episode at step 1
        let rewards = vec![1.0, 0.0, 2.0, 0.0, 3.0, 0.0];
        let dones = vec![false, false, true, false, false, false];
        let r = rollout(rewards, dones, vec![100.0, 10.0], 2, 0.5);
        let t = r.value_targets();
        assert_eq!(t[0], 1.0 + 0.5 * 2.0);
        assert_eq!(t[2], 2.0);
        assert_eq!(t[4], 3.0 + 0.5 * 100.0);
        assert_eq!(t[1], 0.125 * 10.0);
    }

    #[test]
    fn uniform_policy_entropy_is_log_n() {
        let r = rollout(vec![0.0; 3], vec![false; 3], vec![0.0], 1, 0.99);
        let rep = a2c_loss(&r, &Matrix::zeros(3, 4), &[0.0; 3], 0.01, 0.5).unwrap();
        assert!((rep.entropy - 4f64.ln()).abs() < 1e-15);
        assert!((rep.policy_loss + 0.01 * 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn a2c_output_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n_envs, n_steps) = (3, 4);
        let n = n_envs * n_steps;
        let mut r = rollout(
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..n).map(|_| rng.random_bool(0.2)).collect(),
            (0..n_envs).map(|_| rng.random_range(-1.0..1.0)).collect(),
            n_envs,
            0.9,
        );
        r.actions = (0..n).map(|_| rng.random_range(0..4)).collect();
        let logits = random_matrix(&mut rng, n, 4, 1.0);
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (alpha, beta) = (0.05, 0.5);
        let targets = r.value_targets();
        let frozen: Vec<f64> = targets.iter().zip(&values).map(|(t, v)| t - v).collect();
        let surrogate = |l: &Matrix, v: &[f64]| -> f64 {
            (0..n)
                .map(|i| {
                    let lp = log_softmax(l.row(i));
                    let h = -lp.iter().map(|x| x.exp() * x).sum::<f64>();
                    -lp[r.actions[i]] * frozen[i] - alpha * h + beta * 0.5 * (v[i] - targets[i]).powi(2)
                })
                .sum::<f64>()
                / n as f64
        };
        let rep = a2c_loss(&r, &logits, &values, alpha, beta).unwrap();
        assert!((rep.total - surrogate(&logits, &values)).abs() < 1e-12);
        let h = 1e-6;
        for k in 0..logits.as_slice().len() {
            let (mut up, mut down) = (logits.clone(), logits.clone());
            up.as_mut_slice()[k] += h;
            down.as_mut_slice()[k] -= h;
            let fd = (surrogate(&up, &values) - surrogate(&down, &values)) / (2.0 * h);
            assert!((fd - rep.dlogits.as_slice()[k]).abs() < 1e-8);
        }
        for k in 0..n {
            let (mut up, mut down) = (values.clone(), values.clone());
            up[k] += h;
            down[k] -= h;
            let fd = (surrogate(&logits, &up) - surrogate(&logits, &down)) / (2.0 * h);
            assert!((fd - rep.dvalue[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn uniform_policy_maximizes_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let uniform = entropy_of(&log_softmax(&[0.0; 4]));
        for _ in 0..10_000 {
            let l: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
            assert!(entropy_of(&log_softmax(&l)) <= uniform + 1e-15);
        }
    }

    #[test]
    fn lower_bound_q_examples() {
        let (loss, dq) = lower_bound_q_loss(&[3.0], &[5.0]).unwrap();
        assert_eq!(loss, 2.0);
        assert_eq!(dq, vec![-2.0]);
        let (loss, dq) = lower_bound_q_loss(&[3.0, 1.0], &[2.0, 1.0]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(dq.iter().all(|&d| d == 0.0));
        assert!(lower_bound_q_loss(&[1.0], &[]).is_err());
    }

    #[test]
    fn lower_bound_step_never_decreases_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let q: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let r: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let lr = rng.random_range(0.01..0.99);
            let (_, dq) = lower_bound_q_loss(&q, &r).unwrap();
            for i in 0..8 {
                let next = q[i] - lr * dq[i];
                if r[i] > q[i] {
                    assert!(next > q[i] && next < r[i]);
                } else {
                    assert_eq!(next, q[i]);
                }
            }
        }
    }

    #[test]
    fn losses_are_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 6;
        let logits = random_matrix(&mut rng, n, 3, 1.0);
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let returns: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let actions: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let perm = [3, 0, 5, 1, 4, 2];
        let base = sil_loss(&sil_batch(actions.clone(), returns.clone(), vec![1.0; n]), &logits, &values, 0.1).unwrap();
        let pl = Matrix::from_rows(&perm.iter().map(|&i| logits.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let pv: Vec<f64> = perm.iter().map(|&i| values[i]).collect();
        let pb = sil_batch(
            perm.iter().map(|&i| actions[i]).collect(),
            perm.iter().map(|&i| returns[i]).collect(),
            vec![1.0; n],
        );
        let permuted = sil_loss(&pb, &pl, &pv, 0.1).unwrap();
        assert!((base.total - permuted.total).abs() < 1e-14);
        let pr: Vec<f64> = perm.iter().map(|&i| returns[i]).collect();
        let pq: Vec<f64> = perm.iter().map(|&i| values[i]).collect();
        let (a, _) = lower_bound_q_loss(&values, &returns).unwrap();
        let (b, _) = lower_bound_q_loss(&pq, &pr).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn shape_errors() {
        let batch = sil_batch(vec![0, 1], vec![1.0], vec![1.0, 1.0]);
        assert!(sil_loss(&batch, &Matrix::zeros(2, 2), &[0.0, 0.0], 0.01).is_err());
        let batch = sil_batch(vec![5], vec![1.0], vec![1.0]);
        assert!(sil_loss(&batch, &Matrix::zeros(1, 2), &[0.0], 0.01).is_err());
    }
}
