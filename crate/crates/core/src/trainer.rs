//! Actor-critic with self-imitation learning on vectorized gridworlds.
//!
//! Each iteration steps every environment `n_steps` times with actions sampled
//! from the current policy, moves finished episodes into the prioritized
//! replay buffer, applies one A2C update on the fresh rollout and then `M`
//! self-imitation updates on prioritized replay batches.

use std::collections::{HashMap, VecDeque};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::env::{Action, DelayedReward, GridSpec, GridWorld, StepResult, VisitCounter};
use crate::error::{Error, Result};
use crate::losses::{a2c_loss, sil_loss, A2cRollout, SilBatch};
use crate::nn::{backprop, forward, softmax, Activation, BatchOutput, Matrix, MlpParams, Optimizer};
use crate::replay::{compute_returns, EpisodeBuffer, PrioritizedBuffer, ReplayEntry};

/// Episodes averaged into `mean_return`.
pub const RETURN_WINDOW: usize = 100;

pub const CSV_HEADER: &str = "iteration,env_steps,mean_return,best_return,policy_loss,value_loss,entropy,sil_policy_loss,sil_value_loss,sil_valid_fraction,buffer_size";

const INIT_STREAM: u64 = u64::MAX;
const REPLAY_STREAM: u64 = u64::MAX - 1;

/// One logged row. Loss columns average the iterations since the previous row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub env_steps: u64,
    /// Mean raw return of the last [`RETURN_WINDOW`] finished episodes (NaN
    /// before the first episode ends).
    pub mean_return: f64,
    pub best_return: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub sil_policy_loss: f64,
    pub sil_value_loss: f64,
    pub sil_valid_fraction: f64,
    pub buffer_size: usize,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{}",
            self.iteration,
            self.env_steps,
            self.mean_return,
            self.best_return,
            self.policy_loss,
            self.value_loss,
            self.entropy,
            self.sil_policy_loss,
            self.sil_value_loss,
            self.sil_valid_fraction,
            self.buffer_size
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 11 {
            return Err(Error::Usage(format!("metrics row has {} fields, expected 11", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::Usage(format!("bad number `{}` in metrics column {i}", f[i])))
        };
        Ok(Self {
            iteration: num(0)? as u64,
            env_steps: num(1)? as u64,
            mean_return: num(2)?,
            best_return: num(3)?,
            policy_loss: num(4)?,
            value_loss: num(5)?,
            entropy: num(6)?,
            sil_policy_loss: num(7)?,
            sil_value_loss: num(8)?,
            sil_valid_fraction: num(9)?,
            buffer_size: num(10)? as usize,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub rows: Vec<MetricsRow>,
}

impl RunMetrics {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.to_csv_line());
            s.push('\n');
        }
        s
    }

    /// First logged step count at which `mean_return >= threshold`.
    pub fn first_step_reaching(&self, threshold: f64) -> Option<u64> {
        self.rows
            .iter()
            .find(|r| r.mean_return >= threshold)
            .map(|r| r.env_steps)
    }

    pub fn final_mean_return(&self) -> Option<f64> {
        self.rows.last().map(|r| r.mean_return)
    }
}

/// Statistics of one A2C or SIL update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub valid_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationReport {
    pub a2c: UpdateStats,
    /// One entry per SIL update actually performed.
    pub sil: Vec<UpdateStats>,
    /// Raw returns of episodes that finished during the iteration.
    pub finished_returns: Vec<f64>,
}

#[derive(Clone, Debug)]
struct EnvSlot {
    world: GridWorld,
    delay: Option<DelayedReward>,
    rng: ChaCha8Rng,
    obs: Vec<f64>,
    episode: EpisodeBuffer,
    raw_return: f64,
    /// Rewards as seen by the learner, kept for replay-consistency checks.
    learner_rewards: Vec<f64>,
}

/// A finished episode as stored into replay (recorded only when enabled).
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub rewards: Vec<f64>,
    pub entries: Vec<ReplayEntry>,
    pub raw_return: f64,
}

pub struct Trainer {
    config: TrainConfig,
    spec: Arc<GridSpec>,
    params: MlpParams,
    a2c_opt: Optimizer,
    sil_opt: Optimizer,
    buffer: PrioritizedBuffer,
    envs: Vec<EnvSlot>,
    counter: VisitCounter,
    replay_rng: ChaCha8Rng,
    rollout_threads: usize,
    iteration: u64,
    env_steps: u64,
    recent_returns: VecDeque<f64>,
    best_return: f64,
    episodes: u64,
    episode_log: Option<Vec<EpisodeRecord>>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.env.load_spec()?;
        Self::with_spec(config, spec)
    }

    pub fn with_spec(config: TrainConfig, spec: Arc<GridSpec>) -> Result<Self> {
        config.validate()?;
        let mut init_rng = stream_rng(config.seed, INIT_STREAM);
        let params = MlpParams::init(spec.obs_dim(), &config.net.hidden, Action::ALL.len(), &mut init_rng);
        let a2c_opt = Optimizer::new(config.net.optimizer.clone(), &params);
        let sil_opt = Optimizer::new(config.net.optimizer.clone(), &params);
        let buffer = PrioritizedBuffer::new(config.replay.buffer.clone())?;
        let mut envs = Vec::with_capacity(config.n_envs);
        for e in 0..config.n_envs {
            let mut world = GridWorld::new(spec.clone());
            let obs = world.reset(config.seed);
            let delay = match config.env.delay_period {
                0 => None,
                p => Some(DelayedReward::new(p)?),
            };
            envs.push(EnvSlot {
                world,
                delay,
                rng: stream_rng(config.seed, e as u64),
                obs,
                episode: EpisodeBuffer::new(),
                raw_return: 0.0,
                learner_rewards: Vec::new(),
            });
        }
        Ok(Self {
            replay_rng: stream_rng(config.seed, REPLAY_STREAM),
            config,
            spec,
            params,
            a2c_opt,
            sil_opt,
            buffer,
            envs,
            counter: VisitCounter::new(),
            rollout_threads: 1,
            iteration: 0,
            env_steps: 0,
            recent_returns: VecDeque::with_capacity(RETURN_WINDOW),
            best_return: f64::NAN,
            episodes: 0,
            episode_log: None,
        })
    }

    /// Environment stepping fans out over this many scoped threads. Results do
    /// not depend on the thread count.
    pub fn set_rollout_threads(&mut self, threads: usize) {
        self.rollout_threads = threads.max(1);
    }

    /// Keeps a copy of every episode pushed into replay.
    pub fn record_episodes(&mut self, on: bool) {
        self.episode_log = on.then(Vec::new);
    }

    pub fn episode_log(&self) -> Option<&[EpisodeRecord]> {
        self.episode_log.as_deref()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn spec(&self) -> &Arc<GridSpec> {
        &self.spec
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    pub fn into_params(self) -> MlpParams {
        self.params
    }

    pub fn buffer(&self) -> &PrioritizedBuffer {
        &self.buffer
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn is_finished(&self) -> bool {
        self.env_steps >= self.config.total_steps
    }

    pub fn mean_return(&self) -> f64 {
        if self.recent_returns.is_empty() {
            f64::NAN
        } else {
            self.recent_returns.iter().sum::<f64>() / self.recent_returns.len() as f64
        }
    }

    pub fn best_return(&self) -> f64 {
        self.best_return
    }

    fn obs_matrix<'a>(&self, rows: impl Iterator<Item = &'a [f64]>) -> Matrix {
        let dim = self.spec.obs_dim();
        let mut data = Vec::new();
        let mut n = 0;
        for r in rows {
            data.extend_from_slice(r);
            n += 1;
        }
        Matrix::new(n, dim, data).expect("observation rows share the spec width")
    }

    /// Runs one full iteration (rollout, A2C update, SIL updates).
    pub fn iterate(&mut self) -> Result<IterationReport> {
        let n_envs = self.config.n_envs;
        let n_steps = self.config.n_steps;
        let dim = self.spec.obs_dim();
        let mut obs_rows = Vec::with_capacity(n_envs * n_steps * dim);
        let mut actions = Vec::with_capacity(n_envs * n_steps);
        let mut rewards = Vec::with_capacity(n_envs * n_steps);
        let mut dones = Vec::with_capacity(n_envs * n_steps);
        let mut finished_returns = Vec::new();

        for _ in 0..n_steps {
            let current = self.obs_matrix(self.envs.iter().map(|e| e.obs.as_slice()));
            let mut out = forward(&self.params, &current)?;
            out.discard_cache();
            let step_actions: Vec<usize> = self
                .envs
                .iter_mut()
                .enumerate()
                .map(|(e, slot)| sample_action(out.get(e).logits, &mut slot.rng))
                .collect();
            let results = step_all(&mut self.envs, &step_actions, self.rollout_threads)?;
            for (e, mut result) in results.into_iter().enumerate() {
                let beta = self.config.env.exploration_beta;
                let slot = &mut self.envs[e];
                result = self.counter.bonus_step(result, slot.world.state(), beta);
                self.env_steps += 1;
                obs_rows.extend_from_slice(&slot.obs);
                actions.push(step_actions[e]);
                rewards.push(result.reward);
                dones.push(result.done);
                slot.raw_return += result.info.raw_reward;
                let replay_reward = if self.config.env.bonus_in_replay {
                    result.reward
                } else {
                    result.reward - result.info.bonus_reward
                };
                let prev_obs = std::mem::replace(&mut slot.obs, result.observation);
                slot.episode.push(prev_obs, step_actions[e], replay_reward);
                slot.learner_rewards.push(result.reward);
                if result.done {
                    finished_returns.push(slot.raw_return);
                    self.finish_episode(e)?;
                }
            }
        }

        // bootstrap values for the states following the rollout
        let next = self.obs_matrix(self.envs.iter().map(|e| e.obs.as_slice()));
        let bootstrap_values = forward(&self.params, &next)?.values;
        let rollout = A2cRollout {
            n_envs,
            n_steps,
            observations: Matrix::new(n_envs * n_steps, dim, obs_rows)?,
            actions,
            rewards,
            dones,
            bootstrap_values,
            gamma: self.config.gamma,
        };
        let a2c = self.a2c_update(&rollout)?;

        let mut sil = Vec::with_capacity(self.config.sil_updates);
        for _ in 0..self.config.sil_updates {
            if self.buffer.len() < self.config.replay.min_fill_batches * self.config.replay.batch_size {
                break;
            }
            sil.push(self.sil_update()?);
        }
        self.iteration += 1;
        Ok(IterationReport {
            a2c,
            sil,
            finished_returns,
        })
    }

    fn finish_episode(&mut self, e: usize) -> Result<()> {
        let slot = &mut self.envs[e];
        let episode = slot.episode.take();
        let raw_return = std::mem::take(&mut slot.raw_return);
        let learner_rewards = std::mem::take(&mut slot.learner_rewards);
        slot.obs = slot.world.reset(self.config.seed);
        if let Some(d) = slot.delay.as_mut() {
            d.reset();
        }

        let entries = compute_returns(&episode, self.config.gamma);
        if !entries.is_empty() {
            let obs = self.obs_matrix(entries.iter().map(|en| en.observation.as_slice()));
            let values = forward(&self.params, &obs)?.values;
            if let Some(log) = self.episode_log.as_mut() {
                let rewards = if self.config.env.bonus_in_replay {
                    learner_rewards
                } else {
                    episode.rewards()
                };
                log.push(EpisodeRecord {
                    rewards,
                    entries: entries.clone(),
                    raw_return,
                });
            }
            self.buffer.push_episode(entries, &values)?;
        }
        if self.recent_returns.len() == RETURN_WINDOW {
            self.recent_returns.pop_front();
        }
        self.recent_returns.push_back(raw_return);
        if !(raw_return <= self.best_return) {
            self.best_return = raw_return;
        }
        self.episodes += 1;
        Ok(())
    }

    fn a2c_update(&mut self, rollout: &A2cRollout) -> Result<UpdateStats> {
        let out = forward(&self.params, &rollout.observations)?;
        let rep = a2c_loss(rollout, &out.logits, &out.values, self.config.alpha, self.config.beta_a2c)?;
        self.check_finite("A2C loss", rep.total)?;
        let grads = backprop(&self.params, &out, &rep.dlogits, &rep.dvalue)?;
        self.a2c_opt.step(&mut self.params, &grads)?;
        Ok(UpdateStats {
            policy_loss: rep.policy_loss,
            value_loss: rep.value_loss,
            entropy: rep.entropy,
            valid_fraction: rep.valid_fraction,
        })
    }

    fn sil_update(&mut self) -> Result<UpdateStats> {
        let batch = self.buffer.sample_batch(self.config.replay.batch_size, &mut self.replay_rng)?;
        let n = batch.len();
        // Replayed states repeat heavily; evaluate and backpropagate each
        // distinct observation once and sum its per-sample signals.
        let compact = compact_rows(
            batch.handles.iter().map(|h| self.buffer.entry(h.slot).observation.as_slice()),
            self.spec.obs_dim(),
        );
        let out = forward(&self.params, &compact.rows)?;
        let n_actions = self.params.n_actions();
        let mut logits = Matrix::zeros(n, n_actions);
        let mut values = Vec::with_capacity(n);
        let mut observations = Matrix::zeros(n, self.spec.obs_dim());
        let mut sil_actions = Vec::with_capacity(n);
        let mut returns = Vec::with_capacity(n);
        for (i, (h, &u)) in batch.handles.iter().zip(&compact.index).enumerate() {
            let entry = self.buffer.entry(h.slot);
            logits.row_mut(i).copy_from_slice(out.logits.row(u));
            values.push(out.values[u]);
            observations.row_mut(i).copy_from_slice(&entry.observation);
            sil_actions.push(entry.action);
            returns.push(entry.ret);
        }
        let sil_batch = SilBatch {
            observations,
            actions: sil_actions,
            returns,
            importance_weights: batch.weights.clone(),
        };
        let rep = sil_loss(&sil_batch, &logits, &values, self.config.beta_sil)?;
        self.check_finite("SIL loss", rep.total)?;
        debug_assert!((0..n).all(|i| {
            let signal = rep.dvalue[i] != 0.0 || rep.dlogits.row(i).iter().any(|&x| x != 0.0);
            !signal || rep.valid_mask[i]
        }));

        let w = self.config.sil_loss_weight;
        let mut dl = Matrix::zeros(compact.rows.rows(), n_actions);
        let mut dv = vec![0.0; compact.rows.rows()];
        for (i, &u) in compact.index.iter().enumerate() {
            if !rep.valid_mask[i] {
                continue;
            }
            for (a, b) in dl.row_mut(u).iter_mut().zip(rep.dlogits.row(i)) {
                *a += w * b;
            }
            dv[u] += w * rep.dvalue[i];
        }
        let grads = backprop(&self.params, &out, &dl, &dv)?;
        self.sil_opt.step(&mut self.params, &grads)?;

        // refresh priorities of the sampled entries with the updated critic
        let refreshed = forward(&self.params, &compact.rows)?.values;
        let advantages: Vec<f64> = compact
            .index
            .iter()
            .zip(&sil_batch.returns)
            .map(|(&u, r)| (r - refreshed[u]).max(0.0))
            .collect();
        self.buffer.update_priorities(&batch.handles, &advantages)?;
        Ok(UpdateStats {
            policy_loss: rep.policy_loss,
            value_loss: rep.value_loss,
            entropy: rep.entropy,
            valid_fraction: rep.valid_fraction,
        })
    }

    fn check_finite(&self, what: &'static str, v: f64) -> Result<()> {
        if v.is_finite() {
            return Ok(());
        }
        Err(Error::NonFinite {
            context: what,
            diagnostics: format!(
                "value {v} at iteration {}, env step {}, buffer size {}, params finite: {}",
                self.iteration,
                self.env_steps,
                self.buffer.len(),
                self.params.is_finite()
            ),
        })
    }

    /// Trains until the step budget is spent, emitting one row every
    /// `log_interval` iterations (and after the last iteration).
    pub fn run(&mut self, mut on_row: impl FnMut(&MetricsRow)) -> Result<RunMetrics> {
        let mut metrics = RunMetrics::default();
        let mut acc = IntervalAccumulator::default();
        while !self.is_finished() {
            let report = self.iterate()?;
            acc.add(&report);
            if self.iteration % self.config.log_interval as u64 == 0 || self.is_finished() {
                let row = acc.finish(self);
                on_row(&row);
                metrics.rows.push(row);
            }
        }
        Ok(metrics)
    }
}

#[derive(Default)]
struct IntervalAccumulator {
    iterations: usize,
    a2c: UpdateStats,
    sil: UpdateStats,
    sil_updates: usize,
}

impl IntervalAccumulator {
    fn add(&mut self, r: &IterationReport) {
        self.iterations += 1;
        self.a2c.policy_loss += r.a2c.policy_loss;
        self.a2c.value_loss += r.a2c.value_loss;
        self.a2c.entropy += r.a2c.entropy;
        for s in &r.sil {
            self.sil.policy_loss += s.policy_loss;
            self.sil.value_loss += s.value_loss;
            self.sil.valid_fraction += s.valid_fraction;
            self.sil_updates += 1;
        }
    }

    fn finish(&mut self, t: &Trainer) -> MetricsRow {
        let it = self.iterations.max(1) as f64;
        let su = self.sil_updates.max(1) as f64;
        let row = MetricsRow {
            iteration: t.iteration,
            env_steps: t.env_steps,
            mean_return: t.mean_return(),
            best_return: t.best_return,
            policy_loss: self.a2c.policy_loss / it,
            value_loss: self.a2c.value_loss / it,
            entropy: self.a2c.entropy / it,
            sil_policy_loss: self.sil.policy_loss / su,
            sil_value_loss: self.sil.value_loss / su,
            sil_valid_fraction: self.sil.valid_fraction / su,
            buffer_size: t.buffer.len(),
        };
        *self = Self::default();
        row
    }
}

/// Runs a full training job and returns its metrics with the final network.
pub fn train(config: TrainConfig, on_row: impl FnMut(&MetricsRow)) -> Result<(RunMetrics, MlpParams)> {
    let mut trainer = Trainer::new(config)?;
    let metrics = trainer.run(on_row)?;
    Ok((metrics, trainer.into_params()))
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Inverse-CDF draw from the softmax of `logits`.
pub fn sample_action<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> usize {
    let probs = softmax(logits);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    probs.len() - 1
}

pub fn argmax(x: &[f64]) -> usize {
    x.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

fn step_slot(slot: &mut EnvSlot, action: usize) -> Result<StepResult> {
    let mut r = slot.world.step(Action::from_index(action)?)?;
    if let Some(d) = slot.delay.as_mut() {
        r = d.delayed_step(r);
    }
    Ok(r)
}

fn step_all(envs: &mut [EnvSlot], actions: &[usize], threads: usize) -> Result<Vec<StepResult>> {
    if threads <= 1 || envs.len() < 2 {
        return envs.iter_mut().zip(actions).map(|(s, &a)| step_slot(s, a)).collect();
    }
    let chunk = envs.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = envs
            .chunks_mut(chunk)
            .zip(actions.chunks(chunk))
            .map(|(slots, acts)| {
                scope.spawn(move || {
                    slots
                        .iter_mut()
                        .zip(acts)
                        .map(|(s, &a)| step_slot(s, a))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(actions.len());
        for h in handles {
            out.extend(h.join().expect("rollout worker panicked")?);
        }
        Ok(out)
    })
}

struct Compacted {
    rows: Matrix,
    /// Row of `rows` holding each input row.
    index: Vec<usize>,
}

fn compact_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Compacted {
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut data = Vec::new();
    let mut index = Vec::new();
    for r in rows {
        let key: Vec<u64> = r.iter().map(|x| x.to_bits()).collect();
        let next = seen.len();
        let u = *seen.entry(key).or_insert_with(|| {
            data.extend_from_slice(r);
            next
        });
        index.push(u);
    }
    Compacted {
        rows: Matrix::new(index.iter().max().map_or(0, |m| m + 1), dim, data).expect("rows have equal width"),
        index,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Sample,
    Argmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalStats {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
}

impl EvalStats {
    fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len().max(1) as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        let max = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            returns,
            mean,
            std: var.sqrt(),
            max,
        }
    }
}

/// Plays `n_episodes` without learning, wrappers or bonuses and reports raw
/// returns.
pub fn evaluate(params: &MlpParams, spec: Arc<GridSpec>, n_episodes: usize, mode: EvalMode, seed: u64) -> Result<EvalStats> {
    let mut rng = stream_rng(seed, 0);
    let mut world = GridWorld::new(spec);
    let mut returns = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let mut obs = world.reset(seed);
        let mut total = 0.0;
        loop {
            let out: BatchOutput = forward(params, &Matrix::new(1, obs.len(), obs)?)?;
            let logits = out.get(0).logits;
            let a = match mode {
                EvalMode::Sample => sample_action(logits, &mut rng),
                EvalMode::Argmax => argmax(logits),
            };
            let r = world.step(Action::from_index(a)?)?;
            total += r.reward;
            obs = r.observation;
            if r.done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(EvalStats::from_returns(returns))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SILCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes parameters as: magic, u32 version, u32 activation (0 tanh,
/// 1 identity), u64 input dim, u64 action count, u64 hidden layer count, u64
/// per hidden width, then every parameter as little-endian f64 in canonical
/// order.
pub fn save_checkpoint(params: &MlpParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let act: u32 = match params.activation {
        Activation::Tanh => 0,
        Activation::Identity => 1,
    };
    buf.extend_from_slice(&act.to_le_bytes());
    let hidden = params.hidden_sizes();
    for v in [params.input_dim(), params.n_actions(), hidden.len()].into_iter().chain(hidden) {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for x in params.to_flat() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.at..self.at + n)?;
        self.at += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MlpParams> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let truncated = || bad("truncated checkpoint".into());
    let mut c = Cursor { bytes: &bytes, at: 0 };
    if c.take(8) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = c.u32().ok_or_else(truncated)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let activation = match c.u32().ok_or_else(truncated)? {
        0 => Activation::Tanh,
        1 => Activation::Identity,
        other => return Err(bad(format!("unknown activation tag {other}"))),
    };
    let input_dim = c.u64().ok_or_else(truncated)? as usize;
    let n_actions = c.u64().ok_or_else(truncated)? as usize;
    let n_hidden = c.u64().ok_or_else(truncated)? as usize;
    if n_hidden > 64 {
        return Err(bad("implausible layer count".into()));
    }
    let hidden = (0..n_hidden)
        .map(|_| c.u64().map(|v| v as usize).ok_or_else(truncated))
        .collect::<Result<Vec<_>>>()?;
    let expected = 16 + 8 * (3 + n_hidden);
    let mut params = MlpParams::zeros(input_dim, &hidden, n_actions, activation);
    if bytes.len() != expected + 8 * params.num_params() {
        return Err(bad(format!(
            "size {} does not match a {}-parameter network",
            bytes.len(),
            params.num_params()
        )));
    }
    let flat: Vec<f64> = (0..params.num_params()).map(|_| c.f64().unwrap()).collect();
    params.assign_flat(&flat)?;
    Ok(params)
}
