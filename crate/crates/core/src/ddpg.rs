//! Deep deterministic policy gradient: replay memory, exploration noise,
//! critic regression, sampled policy gradient and target tracking.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{violation_scores, BatteryEnv, EnvRecord, Observation, Termination, Transition};
use crate::error::{Error, Result};
use crate::nn::{self, adam_step, soft_update, AdamState, ForwardCache, Mlp, OutputActivation, ParameterVector};

/// Fixed-capacity ring of transitions; the oldest entry is overwritten first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    /// Total number of pushes so far.
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: Vec::new(),
            inserted: 0,
        })
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            let slot = (self.inserted % self.capacity as u64) as usize;
            self.items[slot] = t;
        }
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Contents from oldest to newest.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity {
            0
        } else {
            (self.inserted % self.capacity as u64) as usize
        };
        self.items[split..].iter().chain(self.items[..split].iter())
    }

    /// Uniform sample with replacement.
    pub fn sample<'a, R: Rng + ?Sized>(&'a self, rng: &mut R, n: usize) -> Result<Vec<&'a Transition>> {
        if n == 0 || n > self.items.len() {
            return Err(Error::InsufficientSamples {
                available: self.items.len(),
                requested: n,
            });
        }
        Ok((0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect())
    }
}

/// Ornstein-Uhlenbeck process with unit time step and zero mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuNoise {
    pub theta: f64,
    pub sigma: f64,
    pub value: f64,
}

impl OuNoise {
    pub fn new(theta: f64, sigma: f64) -> Self {
        Self { theta, sigma, value: 0.0 }
    }

    pub fn reset(&mut self) {
        self.value = 0.0;
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R, sigma_scale: f64) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.value += -self.theta * self.value + self.sigma * sigma_scale * z;
        self.value
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub warmup: usize,
    pub gamma: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub tau: f64,
    pub noise_theta: f64,
    pub noise_sigma: f64,
    /// Noise scale falls linearly from 1 to 0 over this many episodes.
    pub noise_anneal_episodes: usize,
    pub seed: u64,
    /// Run a greedy evaluation every this many episodes; 0 disables.
    pub eval_every: usize,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            batch_size: 64,
            buffer_capacity: 100_000,
            warmup: 1000,
            gamma: 0.99,
            lr_actor: 1e-4,
            lr_critic: 1e-3,
            tau: 1e-3,
            noise_theta: 0.15,
            noise_sigma: 0.2,
            noise_anneal_episodes: 1000,
            seed: 0,
            eval_every: 10,
            actor_hidden: vec![20, 20],
            critic_hidden: vec![100, 75],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.batch_size >= 1 && self.batch_size <= self.warmup && self.warmup <= self.buffer_capacity) {
            return bad(format!(
                "need 1 <= batch_size <= warmup <= buffer_capacity, got {} / {} / {}",
                self.batch_size, self.warmup, self.buffer_capacity
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        for (name, lr) in [("lr_actor", self.lr_actor), ("lr_critic", self.lr_critic)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return bad(format!("{name} must be non-negative, got {lr}"));
            }
        }
        if !(self.noise_theta >= 0.0 && self.noise_theta <= 1.0 && self.noise_sigma >= 0.0) {
            return bad("noise_theta must lie in [0, 1] and noise_sigma must be non-negative".into());
        }
        if self.actor_hidden.is_empty() || self.critic_hidden.is_empty() {
            return bad("networks need at least one hidden layer".into());
        }
        Ok(())
    }

    /// Exploration scale for a zero-based episode index.
    pub fn noise_scale(&self, episode: usize) -> f64 {
        if self.noise_anneal_episodes == 0 {
            return 0.0;
        }
        (1.0 - episode as f64 / self.noise_anneal_episodes as f64).max(0.0)
    }
}

#[derive(Debug, Clone, Default)]
struct Scratch {
    fc_a: ForwardCache,
    fc_c: ForwardCache,
    input: Vec<f64>,
    g_actor: ParameterVector,
    g_critic: ParameterVector,
    g_unused: ParameterVector,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Agent {
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_target: Mlp,
    pub critic_target: Mlp,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
    pub gamma: f64,
    pub tau: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub noise: OuNoise,
    noise_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
    #[serde(skip)]
    scratch: Scratch,
}

impl PartialEq for Agent {
    fn eq(&self, o: &Self) -> bool {
        self.actor == o.actor
            && self.critic == o.critic
            && self.actor_target == o.actor_target
            && self.critic_target == o.critic_target
            && self.actor_opt == o.actor_opt
            && self.critic_opt == o.critic_opt
            && self.gamma == o.gamma
            && self.tau == o.tau
            && self.lr_actor == o.lr_actor
            && self.lr_critic == o.lr_critic
            && self.noise == o.noise
            && self.noise_rng == o.noise_rng
            && self.sample_rng == o.sample_rng
    }
}

/// Independent streams derived from the run seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Agent {
    pub fn new(obs_dim: usize, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut sizes = vec![obs_dim];
        sizes.extend(&config.actor_hidden);
        sizes.push(1);
        let actor = Mlp::with_rng(&sizes, OutputActivation::Tanh, &mut stream(config.seed, 1))?;
        let mut sizes = vec![obs_dim + 1];
        sizes.extend(&config.critic_hidden);
        sizes.push(1);
        let critic = Mlp::with_rng(&sizes, OutputActivation::Identity, &mut stream(config.seed, 2))?;
        Self::from_networks(actor, critic, config)
    }

    pub fn from_networks(actor: Mlp, critic: Mlp, config: &TrainConfig) -> Result<Self> {
        if actor.output_dim() != 1 || critic.output_dim() != 1 || critic.input_dim() != actor.input_dim() + 1 {
            return Err(Error::InvalidConfig(format!(
                "actor {:?} and critic {:?} do not fit a scalar action",
                actor.layer_sizes(),
                critic.layer_sizes()
            )));
        }
        Ok(Self {
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor_opt: AdamState::for_network(&actor),
            critic_opt: AdamState::for_network(&critic),
            actor,
            critic,
            gamma: config.gamma,
            tau: config.tau,
            lr_actor: config.lr_actor,
            lr_critic: config.lr_critic,
            noise: OuNoise::new(config.noise_theta, config.noise_sigma),
            noise_rng: stream(config.seed, 3),
            sample_rng: stream(config.seed, 4),
            scratch: Scratch::default(),
        })
    }

    /// Restarts the exploration and replay-sampling streams from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.noise_rng = stream(seed, 3);
        self.sample_rng = stream(seed, 4);
        self.noise.reset();
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.input_dim()
    }

    /// Greedy action.
    pub fn policy(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.actor.forward(obs)?[0])
    }

    pub fn select_action(&mut self, obs: &[f64], explore: bool, noise_scale: f64) -> Result<f64> {
        let a = self.policy(obs)?;
        if !explore {
            return Ok(a);
        }
        let n = self.noise.sample(&mut self.noise_rng, noise_scale);
        Ok((a + n).clamp(-1.0, 1.0))
    }

    fn check_batch(&self, batch: &[&Transition]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        for t in batch {
            for v in [&t.obs.values, &t.next_obs.values] {
                if v.len() != self.obs_dim() {
                    return Err(Error::DimensionMismatch {
                        expected: self.obs_dim(),
                        actual: v.len(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Bellman targets from the current target networks.
    pub fn targets(&mut self, batch: &[&Transition]) -> Result<Vec<f64>> {
        self.check_batch(batch)?;
        let s = &mut self.scratch;
        let mut y = Vec::with_capacity(batch.len());
        for t in batch {
            if t.done || self.gamma == 0.0 {
                y.push(t.reward);
                continue;
            }
            let a_next = self.actor_target.forward_cached(&t.next_obs.values, &mut s.fc_a)?[0];
            s.input.clear();
            s.input.extend_from_slice(&t.next_obs.values);
            s.input.push(a_next);
            let q_next = self.critic_target.forward_cached(&s.input, &mut s.fc_c)?[0];
            y.push(t.reward + self.gamma * q_next);
        }
        Ok(y)
    }

    /// One descent step on the mean squared Bellman error; returns the loss
    /// before the step.
    pub fn critic_update(&mut self, batch: &[&Transition]) -> Result<f64> {
        let y = self.targets(batch)?;
        let n = batch.len() as f64;
        let s = &mut self.scratch;
        if s.g_critic.len() != self.critic.parameters().len() {
            s.g_critic = ParameterVector::zeros(self.critic.parameters().len());
        }
        s.g_critic.fill(0.0);
        let mut loss = 0.0;
        for (t, yi) in batch.iter().zip(&y) {
            s.input.clear();
            s.input.extend_from_slice(&t.obs.values);
            s.input.push(t.action);
            let q = self.critic.forward_cached(&s.input, &mut s.fc_c)?[0];
            let diff = q - yi;
            loss += diff * diff / n;
            self.critic
                .backward_accumulate(&mut s.fc_c, &[2.0 * diff / n], &mut s.g_critic)?;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("critic loss"));
        }
        adam_step(&mut self.critic, &s.g_critic, &mut self.critic_opt, self.lr_critic)?;
        Ok(loss)
    }

    /// Mean critic value of the policy's actions and its gradient with
    /// respect to actor parameters.
    pub fn actor_objective_gradient(&mut self, batch: &[&Transition]) -> Result<(f64, ParameterVector)> {
        self.check_batch(batch)?;
        let n = batch.len() as f64;
        let s = &mut self.scratch;
        let mut g_actor = ParameterVector::zeros(self.actor.parameters().len());
        if s.g_unused.len() != self.critic.parameters().len() {
            s.g_unused = ParameterVector::zeros(self.critic.parameters().len());
        }
        let mut objective = 0.0;
        for t in batch {
            let a = self.actor.forward_cached(&t.obs.values, &mut s.fc_a)?[0];
            s.input.clear();
            s.input.extend_from_slice(&t.obs.values);
            s.input.push(a);
            objective += self.critic.forward_cached(&s.input, &mut s.fc_c)?[0] / n;
            let dq_da = *self.critic.backward_accumulate(&mut s.fc_c, &[1.0], &mut s.g_unused)?.last().unwrap();
            self.actor.backward_accumulate(&mut s.fc_a, &[dq_da / n], &mut g_actor)?;
        }
        Ok((objective, g_actor))
    }

    /// One ascent step on the critic's value of the policy; returns the
    /// objective before the step.
    pub fn actor_update(&mut self, batch: &[&Transition]) -> Result<f64> {
        let (objective, mut g) = self.actor_objective_gradient(batch)?;
        if !objective.is_finite() {
            return Err(Error::NonFinite("actor objective"));
        }
        g.scale(-1.0);
        let s = &mut self.scratch;
        s.g_actor = g;
        adam_step(&mut self.actor, &s.g_actor, &mut self.actor_opt, self.lr_actor)?;
        Ok(objective)
    }

    pub fn sync_targets(&mut self) -> Result<()> {
        soft_update(&mut self.actor_target, &self.actor, self.tau)?;
        soft_update(&mut self.critic_target, &self.critic, self.tau)
    }

    /// Critic update, actor update and target sync on one replay sample.
    pub fn learn(&mut self, buffer: &ReplayBuffer, batch_size: usize) -> Result<(f64, f64)> {
        let mut rng = self.sample_rng.clone();
        let batch = buffer.sample(&mut rng, batch_size)?;
        self.sample_rng = rng;
        let loss = self.critic_update(&batch)?;
        let objective = self.actor_update(&batch)?;
        self.sync_targets()?;
        Ok((loss, objective))
    }

    pub fn reset_noise(&mut self) {
        self.noise.reset();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub cum_reward: f64,
    pub v_score: f64,
    pub t_score: f64,
    pub charge_time_min: f64,
    pub steps: usize,
    pub evaluated: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<EpisodeRecord>,
}

pub const RUNLOG_HEADER: [&str; 7] = [
    "episode",
    "cum_reward",
    "v_score",
    "t_score",
    "charge_time_min",
    "steps",
    "evaluated_flag",
];

impl RunLog {
    pub fn training(&self) -> impl Iterator<Item = &EpisodeRecord> {
        self.records.iter().filter(|r| !r.evaluated)
    }

    pub fn evaluations(&self) -> impl Iterator<Item = &EpisodeRecord> {
        self.records.iter().filter(|r| r.evaluated)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let err = |e: csv::Error| Error::parse("run log csv", e);
        let mut w = csv::Writer::from_writer(out);
        w.write_record(RUNLOG_HEADER).map_err(err)?;
        for r in &self.records {
            w.write_record([
                r.episode.to_string(),
                r.cum_reward.to_string(),
                r.v_score.to_string(),
                r.t_score.to_string(),
                r.charge_time_min.to_string(),
                r.steps.to_string(),
                u8::from(r.evaluated).to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::parse("run log csv", e))?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R, context: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(input);
        let headers = rd.headers().map_err(|e| Error::parse(context, e))?.clone();
        if headers.iter().ne(RUNLOG_HEADER) {
            return Err(Error::parse(context, format!("unexpected header {headers:?}")));
        }
        let mut records = Vec::new();
        for row in rd.records() {
            let row = row.map_err(|e| Error::parse(context, e))?;
            let f = |i: usize| -> Result<f64> {
                row[i]
                    .parse::<f64>()
                    .map_err(|e| Error::parse(context, format!("column {}: {e}", RUNLOG_HEADER[i])))
            };
            let u = |i: usize| -> Result<usize> {
                row[i]
                    .parse::<usize>()
                    .map_err(|e| Error::parse(context, format!("column {}: {e}", RUNLOG_HEADER[i])))
            };
            records.push(EpisodeRecord {
                episode: u(0)?,
                cum_reward: f(1)?,
                v_score: f(2)?,
                t_score: f(3)?,
                charge_time_min: f(4)?,
                steps: u(5)?,
                evaluated: match &row[6] {
                    "0" => false,
                    "1" => true,
                    other => return Err(Error::parse(context, format!("bad evaluated_flag `{other}`"))),
                },
            });
        }
        Ok(Self { records })
    }
}

/// Greedy rollout result.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub trajectory: Vec<EnvRecord>,
    pub cum_reward: f64,
    pub v_score: f64,
    pub t_score: f64,
    pub charge_time_min: f64,
    pub steps: usize,
    pub termination: Termination,
}

impl Evaluation {
    pub fn record(&self, episode: usize, evaluated: bool) -> EpisodeRecord {
        EpisodeRecord {
            episode,
            cum_reward: self.cum_reward,
            v_score: self.v_score,
            t_score: self.t_score,
            charge_time_min: self.charge_time_min,
            steps: self.steps,
            evaluated,
        }
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.trajectory.iter().skip(1).map(|r| r.reward).collect()
    }
}

/// Runs one episode with `policy` from a fresh reset.
pub fn rollout<F>(env: &mut BatteryEnv, seed: u64, mut policy: F) -> Result<Evaluation>
where
    F: FnMut(&Observation, &BatteryEnv) -> Result<f64>,
{
    let mut obs = env.reset(seed)?;
    let mut cum_reward = 0.0;
    let termination = loop {
        let a = policy(&obs, env)?;
        let out = env.step(a)?;
        cum_reward += out.reward.total;
        obs = out.observation;
        if let Some(t) = out.info.termination {
            break t;
        }
    };
    summarize(env, cum_reward, termination)
}

fn summarize(env: &BatteryEnv, cum_reward: f64, termination: Termination) -> Result<Evaluation> {
    let trajectory = env.trajectory().to_vec();
    let points: Vec<_> = trajectory.iter().map(|r| r.point).collect();
    let (v_score, t_score) = violation_scores(&points, env.config())?;
    Ok(Evaluation {
        trajectory,
        cum_reward,
        v_score,
        t_score,
        charge_time_min: env.steps() as f64 * env.config().dt_ctrl / 60.0,
        steps: env.steps(),
        termination,
    })
}

/// Greedy rollout; the agent is not modified.
pub fn evaluate(agent: &Agent, env: &mut BatteryEnv, seed: u64) -> Result<Evaluation> {
    if agent.obs_dim() != env.observation_dim() {
        return Err(Error::DimensionMismatch {
            expected: env.observation_dim(),
            actual: agent.obs_dim(),
        });
    }
    rollout(env, seed, |obs, _| agent.policy(&obs.values))
}

/// `G_t = sum_k gamma^k r_{t+k}` for every `t`, by backward recursion.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *o = acc;
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    pub log: RunLog,
    /// Set when a non-finite loss or gradient stopped training early.
    pub diverged: Option<String>,
}

fn episode_seed(run_seed: u64, episode: usize) -> u64 {
    run_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(episode as u64)
}

pub fn train(env: &BatteryEnv, config: &TrainConfig) -> Result<TrainOutcome> {
    let agent = Agent::new(env.observation_dim(), config)?;
    train_from(agent, env, config)
}

/// Trains `agent` for `config.episodes` episodes with a fresh replay buffer.
/// Episode indices and the noise schedule restart at zero.
pub fn train_from(mut agent: Agent, env: &BatteryEnv, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if agent.obs_dim() != env.observation_dim() {
        return Err(Error::DimensionMismatch {
            expected: env.observation_dim(),
            actual: agent.obs_dim(),
        });
    }
    let mut buffer = ReplayBuffer::new(config.buffer_capacity)?;
    let mut log = RunLog::default();
    let mut train_env = env.clone();
    let mut eval_env = env.clone();
    let mut diverged = None;

    'episodes: for episode in 0..config.episodes {
        let scale = config.noise_scale(episode);
        let mut obs = train_env.reset(episode_seed(config.seed, episode))?;
        agent.reset_noise();
        let mut cum_reward = 0.0;
        let termination = loop {
            let a = agent.select_action(&obs.values, true, scale)?;
            let out = train_env.step(a)?;
            cum_reward += out.reward.total;
            let t = Transition {
                obs,
                action: a,
                reward: out.reward.total,
                next_obs: out.observation.clone(),
                done: out.info.termination.is_some_and(Termination::is_absorbing),
                v_margin: out.info.v_margin,
                t_margin: out.info.t_margin,
            };
            buffer.push(t);
            obs = out.observation;
            if buffer.len() >= config.warmup {
                match agent.learn(&buffer, config.batch_size) {
                    Ok(_) => {}
                    Err(Error::NonFinite(what)) => {
                        diverged = Some(format!("non-finite {what} in episode {episode}"));
                        break 'episodes;
                    }
                    Err(e) => return Err(e),
                }
            }
            if let Some(t) = out.info.termination {
                break t;
            }
        };
        let ev = summarize(&train_env, cum_reward, termination)?;
        log.records.push(ev.record(episode, false));
        if config.eval_every > 0 && (episode + 1) % config.eval_every == 0 {
            let ev = evaluate(&agent, &mut eval_env, episode_seed(config.seed, episode))?;
            log.records.push(ev.record(episode, true));
        }
    }
    Ok(TrainOutcome {
        agent,
        buffer,
        log,
        diverged,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub version: u32,
    pub agent: Agent,
    pub buffer: Option<ReplayBuffer>,
}

impl AgentCheckpoint {
    pub fn new(agent: Agent, buffer: Option<ReplayBuffer>) -> Self {
        Self {
            version: nn::CHECKPOINT_VERSION,
            agent,
            buffer,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        nn::save_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = nn::load_json(path)?;
        nn::check_version(c.version, path)?;
        Ok(c)
    }
}
