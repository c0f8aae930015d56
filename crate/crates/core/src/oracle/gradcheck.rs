//! Finite-difference checks of every training loss through the network.
//!
//! Each check draws a small random network and batch, computes parameter
//! gradients through the loss module and `backprop`, and compares them with
//! central differences of an independently written scalar objective in which
//! advantages and bootstrap targets are frozen at the unperturbed parameters.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::Result;
use crate::losses::{a2c_loss, lower_bound_q_loss, sil_loss, A2cRollout, SilBatch};
use crate::nn::{backprop, forward, log_softmax, BatchOutput, Matrix, MlpParams};

pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const FLOOR: f64 = 1e-6;
/// Returns are kept at least this far from the clipping kink.
const KINK_MARGIN: f64 = 0.1;

const OBS_DIM: usize = 6;
const HIDDEN: [usize; 2] = [8, 8];
const N_ACTIONS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub loss: &'static str,
    pub draws: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

impl GradcheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

fn random_net<R: Rng + ?Sized>(rng: &mut R) -> MlpParams {
    let mut p = MlpParams::init(OBS_DIM, &HIDDEN, N_ACTIONS, rng);
    let noise = Normal::new(0.0, 0.5).unwrap();
    p.for_each_slice_mut(|s| s.iter_mut().for_each(|x| *x += noise.sample(rng)));
    p
}

fn random_obs<R: Rng + ?Sized>(rows: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * OBS_DIM).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::new(rows, OBS_DIM, data).unwrap()
}

/// Return at distance at least the kink margin from `v`, on either side.
fn return_near<R: Rng + ?Sized>(v: f64, rng: &mut R) -> f64 {
    let d = rng.random_range(KINK_MARGIN..1.5);
    if rng.random::<bool>() {
        v + d
    } else {
        v - d
    }
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

/// Largest coordinate-wise relative error between `analytic` and central
/// differences of `objective` around `params`.
fn compare(params: &MlpParams, analytic: &MlpParams, objective: impl Fn(&BatchOutput) -> f64, obs: &Matrix) -> Result<f64> {
    let flat = params.to_flat();
    let grads = analytic.to_flat();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    let mut shifted = flat.clone();
    for i in 0..flat.len() {
        shifted[i] = flat[i] + STEP;
        probe.assign_flat(&shifted)?;
        let up = objective(&forward(&probe, obs)?);
        shifted[i] = flat[i] - STEP;
        probe.assign_flat(&shifted)?;
        let down = objective(&forward(&probe, obs)?);
        shifted[i] = flat[i];
        worst = worst.max(rel_error(grads[i], (up - down) / (2.0 * STEP)));
    }
    Ok(worst)
}

pub fn gradcheck_sil<R: Rng + ?Sized>(draws: usize, rng: &mut R) -> Result<GradcheckReport> {
    let beta = 0.01 + rng.random::<f64>();
    let mut worst: f64 = 0.0;
    let mut coordinates = 0;
    for _ in 0..draws {
        let params = random_net(rng);
        let n = 12;
        let obs = random_obs(n, rng);
        let out = forward(&params, &obs)?;
        let batch = SilBatch {
            observations: obs.clone(),
            actions: (0..n).map(|_| rng.random_range(0..N_ACTIONS)).collect(),
            returns: out.values.iter().map(|&v| return_near(v, rng)).collect(),
            importance_weights: (0..n).map(|_| rng.random_range(0.1..1.0)).collect(),
        };
        let rep = sil_loss(&batch, &out.logits, &out.values, beta)?;
        let grads = backprop(&params, &out, &rep.dlogits, &rep.dvalue)?;
        let frozen: Vec<f64> = batch.returns.iter().zip(&out.values).map(|(r, v)| (r - v).max(0.0)).collect();
        let objective = |o: &BatchOutput| {
            let mut total = 0.0;
            for i in 0..n {
                let lp = log_softmax(o.logits.row(i));
                let gap = (batch.returns[i] - o.values[i]).max(0.0);
                total += batch.importance_weights[i] * (-lp[batch.actions[i]] * frozen[i] + beta * 0.5 * gap * gap);
            }
            total / n as f64
        };
        worst = worst.max(compare(&params, &grads, objective, &obs)?);
        coordinates += params.num_params();
    }
    Ok(GradcheckReport {
        loss: "sil",
        draws,
        coordinates,
        max_rel_error: worst,
    })
}

pub fn gradcheck_a2c<R: Rng + ?Sized>(draws: usize, rng: &mut R) -> Result<GradcheckReport> {
    let alpha = rng.random_range(0.0..0.5);
    let beta = rng.random_range(0.1..1.0);
    let mut worst: f64 = 0.0;
    let mut coordinates = 0;
    for _ in 0..draws {
        let params = random_net(rng);
        let (n_envs, n_steps) = (3, 4);
        let n = n_envs * n_steps;
        let obs = random_obs(n, rng);
        let rollout = A2cRollout {
            n_envs,
            n_steps,
            observations: obs.clone(),
            actions: (0..n).map(|_| rng.random_range(0..N_ACTIONS)).collect(),
            rewards: (0..n).map(|_| StandardNormal.sample(rng)).collect(),
            dones: (0..n).map(|_| rng.random::<f64>() < 0.2).collect(),
            bootstrap_values: (0..n_envs).map(|_| StandardNormal.sample(rng)).collect(),
            gamma: 0.99,
        };
        let out = forward(&params, &obs)?;
        let rep = a2c_loss(&rollout, &out.logits, &out.values, alpha, beta)?;
        let grads = backprop(&params, &out, &rep.dlogits, &rep.dvalue)?;
        let targets = rollout.value_targets();
        let frozen: Vec<f64> = targets.iter().zip(&out.values).map(|(t, v)| t - v).collect();
        let objective = |o: &BatchOutput| {
            let mut total = 0.0;
            for i in 0..n {
                let lp = log_softmax(o.logits.row(i));
                let entropy: f64 = -lp.iter().map(|l| l.exp() * l).sum::<f64>();
                let err = o.values[i] - targets[i];
                total += -lp[rollout.actions[i]] * frozen[i] - alpha * entropy + beta * 0.5 * err * err;
            }
            total / n as f64
        };
        worst = worst.max(compare(&params, &grads, objective, &obs)?);
        coordinates += params.num_params();
    }
    Ok(GradcheckReport {
        loss: "a2c",
        draws,
        coordinates,
        max_rel_error: worst,
    })
}

/// The Q estimate of sample `i` is the logit of its action.
pub fn gradcheck_lower_bound_q<R: Rng + ?Sized>(draws: usize, rng: &mut R) -> Result<GradcheckReport> {
    let mut worst: f64 = 0.0;
    let mut coordinates = 0;
    for _ in 0..draws {
        let params = random_net(rng);
        let n = 12;
        let obs = random_obs(n, rng);
        let out = forward(&params, &obs)?;
        let actions: Vec<usize> = (0..n).map(|_| rng.random_range(0..N_ACTIONS)).collect();
        let q: Vec<f64> = (0..n).map(|i| out.logits.get(i, actions[i])).collect();
        let returns: Vec<f64> = q.iter().map(|&x| return_near(x, rng)).collect();
        let (_, dq) = lower_bound_q_loss(&q, &returns)?;
        let mut dlogits = Matrix::zeros(n, N_ACTIONS);
        for i in 0..n {
            dlogits.set(i, actions[i], dq[i] / n as f64);
        }
        let grads = backprop(&params, &out, &dlogits, &vec![0.0; n])?;
        let objective = |o: &BatchOutput| {
            let mut total = 0.0;
            for i in 0..n {
                let gap = (returns[i] - o.logits.get(i, actions[i])).max(0.0);
                total += 0.5 * gap * gap;
            }
            total / n as f64
        };
        worst = worst.max(compare(&params, &grads, objective, &obs)?);
        coordinates += params.num_params();
    }
    Ok(GradcheckReport {
        loss: "lower_bound_q",
        draws,
        coordinates,
        max_rel_error: worst,
    })
}
