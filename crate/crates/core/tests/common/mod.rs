#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sil_core::config::TrainConfig;
use sil_core::env::{Action, GridWorld};
use sil_core::nn::{backprop, forward, log_softmax, softmax, Matrix, MlpParams, Optimizer};

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Per-iteration losses of a plain actor-critic run.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceLosses {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

/// Plain synchronous advantage actor-critic written straight from its
/// definition: n-step bootstrapped targets, entropy bonus, one optimizer.
/// No replay, no bonus, no delay.
pub fn reference_a2c(config: &TrainConfig, iterations: usize) -> (MlpParams, Vec<ReferenceLosses>) {
    let spec = config.env.load_spec().unwrap();
    let dim = spec.obs_dim();
    let mut init = stream(config.seed, u64::MAX);
    let mut params = MlpParams::init(dim, &config.net.hidden, 4, &mut init);
    let mut opt = Optimizer::new(config.net.optimizer.clone(), &params);
    let n_envs = config.n_envs;
    let mut worlds: Vec<GridWorld> = (0..n_envs).map(|_| GridWorld::new(spec.clone())).collect();
    let mut obs: Vec<Vec<f64>> = worlds.iter_mut().map(|w| w.reset(config.seed)).collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..n_envs).map(|e| stream(config.seed, e as u64)).collect();
    let mut history = Vec::new();

    for _ in 0..iterations {
        let mut batch_obs = Vec::new();
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        let mut dones = Vec::new();
        for _ in 0..config.n_steps {
            let out = forward(&params, &Matrix::from_rows(&obs).unwrap()).unwrap();
            for e in 0..n_envs {
                let probs = softmax(out.logits.row(e));
                let u: f64 = rngs[e].random();
                let mut cdf = 0.0;
                let mut a = probs.len() - 1;
                for (i, p) in probs.iter().enumerate() {
                    cdf += p;
                    if u < cdf {
                        a = i;
                        break;
                    }
                }
                let step = worlds[e].step(Action::ALL[a]).unwrap();
                batch_obs.push(std::mem::replace(&mut obs[e], step.observation));
                actions.push(a);
                rewards.push(step.reward);
                dones.push(step.done);
                if step.done {
                    obs[e] = worlds[e].reset(config.seed);
                }
            }
        }
        let last = forward(&params, &Matrix::from_rows(&obs).unwrap()).unwrap().values;

        let n = batch_obs.len();
        let mut targets = vec![0.0; n];
        for e in 0..n_envs {
            let mut ret = last[e];
            for t in (0..config.n_steps).rev() {
                let i = t * n_envs + e;
                let mask = if dones[i] { 0.0 } else { 1.0 };
                ret = rewards[i] + config.gamma * mask * ret;
                targets[i] = ret;
            }
        }

        let out = forward(&params, &Matrix::from_rows(&batch_obs).unwrap()).unwrap();
        let inv_n = 1.0 / n as f64;
        let mut dlogits = Matrix::zeros(n, 4);
        let mut dvalue = vec![0.0; n];
        let mut losses = ReferenceLosses {
            policy_loss: 0.0,
            value_loss: 0.0,
            entropy: 0.0,
        };
        for i in 0..n {
            let logp = log_softmax(out.logits.row(i));
            let h = -logp.iter().map(|l| l.exp() * l).sum::<f64>();
            let adv = targets[i] - out.values[i];
            losses.policy_loss += (-logp[actions[i]] * adv - config.alpha * h) * inv_n;
            losses.value_loss += 0.5 * adv * adv * inv_n;
            losses.entropy += h * inv_n;
            for j in 0..4 {
                let p = logp[j].exp();
                let chosen = if j == actions[i] { 1.0 } else { 0.0 };
                dlogits.set(i, j, (adv * (p - chosen) + config.alpha * p * (logp[j] + h)) * inv_n);
            }
            dvalue[i] = config.beta_a2c * (out.values[i] - targets[i]) * inv_n;
        }
        let grads = backprop(&params, &out, &dlogits, &dvalue).unwrap();
        opt.step(&mut params, &grads).unwrap();
        history.push(losses);
    }
    (params, history)
}

/// Minimal gridworld simulator over the map text, separate from the library
/// environment. Returns the episode's raw return.
pub struct MiniGrid {
    cells: Vec<Vec<u8>>,
    start: (usize, usize),
    pub apple: f64,
    pub key: f64,
    pub door: f64,
    pub treasure: f64,
    pub time_limit: usize,
}

impl MiniGrid {
    pub fn parse(map: &str, time_limit: usize) -> Self {
        let cells: Vec<Vec<u8>> = map.lines().filter(|l| !l.trim().is_empty()).map(|l| l.trim_end().bytes().collect()).collect();
        let mut start = (0, 0);
        for (r, row) in cells.iter().enumerate() {
            for (c, &b) in row.iter().enumerate() {
                if b == b'S' {
                    start = (r, c);
                }
            }
        }
        Self {
            cells,
            start,
            apple: 1.0,
            key: 1.0,
            door: 1.0,
            treasure: 5.0,
            time_limit,
        }
    }

    /// Plays `policy(step)` (0 up, 1 down, 2 left, 3 right) until the
    /// treasure or the time limit.
    pub fn play(&self, mut policy: impl FnMut(usize) -> usize) -> f64 {
        let mut grid = self.cells.clone();
        let (mut r, mut c) = self.start;
        let mut has_key = false;
        let mut total = 0.0;
        for t in 0..self.time_limit {
            let (nr, nc) = match policy(t) {
                0 => (r - 1, c),
                1 => (r + 1, c),
                2 => (r, c - 1),
                _ => (r, c + 1),
            };
            match grid[nr][nc] {
                b'#' => {}
                b'D' => {
                    if has_key {
                        total += self.door;
                        grid[nr][nc] = b'.';
                        (r, c) = (nr, nc);
                    }
                }
                b'K' => {
                    total += self.key;
                    has_key = true;
                    grid[nr][nc] = b'.';
                    (r, c) = (nr, nc);
                }
                b'A' => {
                    total += self.apple;
                    grid[nr][nc] = b'.';
                    (r, c) = (nr, nc);
                }
                b'T' => return total + self.treasure,
                _ => (r, c) = (nr, nc),
            }
        }
        total
    }
}

const U: usize = 0;
const D: usize = 1;
const L: usize = 2;
const R: usize = 3;

/// Shortest full-collection route on the key-door-treasure map, worked out
/// by hand.
pub fn key_door_route() -> Vec<usize> {
    let mut route = vec![L; 5];
    route.extend([U; 6]);
    route.push(L);
    route.extend([D; 2]);
    route.extend([R; 4]);
    route.extend([U; 2]);
    route.extend([R; 2]);
    route
}

/// Same route with a detour through both apples first.
pub fn apple_route() -> Vec<usize> {
    let mut route = vec![L, U, R];
    route.extend([L; 5]);
    route.extend([U; 5]);
    route.push(L);
    route.extend([D; 2]);
    route.extend([R; 4]);
    route.extend([U; 2]);
    route.extend([R; 2]);
    route
}
