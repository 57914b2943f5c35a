//! Deterministic actor-critic with target networks and experience replay.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::checkpoint::{read_mlp, write_mlp};
use super::mlp::{Activation, Mlp, MlpGrads};
use super::optim::Adam;
use super::replay::{ReplayBuffer, Transition};
use super::{Action, ActionSpace, AgentState, Policy, RunningNorm};
use crate::error::{invalid, Error, Result};
use crate::seeding::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdpgConfig {
    pub hidden: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub discount: f64,
    pub tau: f64,
    pub batch: usize,
    pub buffer: usize,
    /// Transitions collected before training starts.
    pub warmup: usize,
    pub noise_start: f64,
    pub noise_end: f64,
    /// Episodes over which the exploration noise decays linearly.
    pub noise_episodes: usize,
    /// Rewards are clipped to `[-reward_clip, reward_clip]` before storage.
    pub reward_clip: f64,
    /// Gradient updates per stored transition once warm.
    pub updates: usize,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            discount: 0.9,
            tau: 0.005,
            batch: 64,
            buffer: 10_000,
            warmup: 64,
            noise_start: 0.3,
            noise_end: 0.02,
            noise_episodes: 100,
            reward_clip: 2.0,
            updates: 1,
        }
    }
}

impl DdpgConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.hidden > 0
            && self.actor_lr > 0.0
            && self.critic_lr > 0.0
            && self.discount > 0.0
            && self.discount <= 1.0
            && self.tau > 0.0
            && self.tau <= 1.0
            && self.batch > 0
            && self.buffer > 0
            && self.noise_start >= 0.0
            && self.noise_end >= 0.0
            && self.reward_clip > 0.0
            && self.updates > 0;
        if ok {
            Ok(())
        } else {
            Err(invalid("ddpg settings out of range"))
        }
    }
}

/// `r + gamma * q_next`, or `r` for a terminal transition.
pub fn target_value(reward: f64, discount: f64, q_next: f64, terminal: bool) -> f64 {
    if terminal {
        reward
    } else {
        reward + discount * q_next
    }
}

/// Mean squared error of the critic on `(input, target)` pairs, with its
/// parameter gradient.
pub fn critic_loss_and_grad(critic: &Mlp, samples: &[(Vec<f64>, f64)]) -> Result<(f64, MlpGrads)> {
    if samples.is_empty() {
        return Err(invalid("empty batch"));
    }
    let n = samples.len() as f64;
    let mut grads = critic.zero_grads();
    let mut loss = 0.0;
    for (input, y) in samples {
        let trace = critic.forward_trace(input)?;
        let diff = trace.output()[0] - y;
        loss += diff * diff / n;
        critic.backward_into(&trace, &[2.0 * diff / n], &mut grads)?;
    }
    Ok((loss, grads))
}

/// Mean critic value of the actor's actions, `J = mean Q(s, pi(s))`, with
/// its gradient with respect to the actor parameters.
pub fn actor_objective_and_grad(actor: &Mlp, critic: &Mlp, states: &[Vec<f64>]) -> Result<(f64, MlpGrads)> {
    if states.is_empty() {
        return Err(invalid("empty batch"));
    }
    let n = states.len() as f64;
    let s_dim = actor.input_dim();
    let mut grads = actor.zero_grads();
    let mut scratch = critic.zero_grads();
    let mut objective = 0.0;
    for s in states {
        let a_trace = actor.forward_trace(s)?;
        let mut input = s.clone();
        input.extend_from_slice(a_trace.output());
        let q_trace = critic.forward_trace(&input)?;
        objective += q_trace.output()[0] / n;
        let d_input = critic.backward_into(&q_trace, &[1.0 / n], &mut scratch)?;
        actor.backward_into(&a_trace, &d_input[s_dim..], &mut grads)?;
    }
    Ok((objective, grads))
}

fn concat(s: &[f64], a: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(s.len() + a.len());
    v.extend_from_slice(s);
    v.extend_from_slice(a);
    v
}

#[derive(Debug, Clone)]
pub struct DdpgAgent {
    config: DdpgConfig,
    space: ActionSpace,
    actor: Mlp,
    critic: Mlp,
    actor_target: Mlp,
    critic_target: Mlp,
    actor_opt: Adam,
    critic_opt: Adam,
    replay: ReplayBuffer,
    norm: RunningNorm,
    rng: Rng,
    noise: f64,
}

impl DdpgAgent {
    pub fn new(state_dim: usize, space: ActionSpace, config: DdpgConfig, mut rng: Rng) -> Result<Self> {
        config.validate()?;
        if state_dim == 0 {
            return Err(invalid("state must have at least one feature"));
        }
        let h = config.hidden;
        let mut actor = Mlp::random(&[state_dim, h, h, space.dim()], Activation::Relu, Activation::Sigmoid, &mut rng)?;
        let mut critic = Mlp::random(&[state_dim + space.dim(), h, h, 1], Activation::Relu, Activation::Identity, &mut rng)?;
        actor.scale_output_layer(0.1);
        critic.scale_output_layer(0.1);
        Ok(Self {
            actor_opt: Adam::new(config.actor_lr, actor.param_count()),
            critic_opt: Adam::new(config.critic_lr, critic.param_count()),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            replay: ReplayBuffer::new(config.buffer)?,
            norm: RunningNorm::new(state_dim),
            noise: config.noise_start,
            rng,
            space,
            config,
        })
    }

    pub fn config(&self) -> &DdpgConfig {
        &self.config
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    pub fn critic(&self) -> &Mlp {
        &self.critic
    }

    pub fn critic_mut(&mut self) -> &mut Mlp {
        &mut self.critic
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    /// Sets the exploration noise for episode `e` (0-based).
    pub fn begin_episode(&mut self, e: usize) {
        let span = self.config.noise_episodes.max(1) as f64;
        let frac = (e as f64 / span).min(1.0);
        self.noise = self.config.noise_start * (1.0 - frac) + self.config.noise_end * frac;
    }

    pub fn critic_value(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        Ok(self.critic.forward(&concat(&self.norm.normalize(state), action))?[0])
    }

    /// One update from `batch`: critic on the TD targets, actor along the
    /// critic's action gradient, then both targets soft-updated. Returns the
    /// critic loss and the actor objective.
    pub fn train_step(&mut self, batch: &[&Transition]) -> Result<(f64, f64)> {
        let mut samples = Vec::with_capacity(batch.len());
        let mut states = Vec::with_capacity(batch.len());
        for t in batch {
            let s = self.norm.normalize(&t.state);
            let q_next = if t.terminal {
                0.0
            } else {
                let s2 = self.norm.normalize(&t.next_state);
                let a2 = self.actor_target.forward(&s2)?;
                self.critic_target.forward(&concat(&s2, &a2))?[0]
            };
            samples.push((concat(&s, &t.action), target_value(t.reward, self.config.discount, q_next, t.terminal)));
            states.push(s);
        }
        let (critic_loss, cg) = critic_loss_and_grad(&self.critic, &samples)?;
        let (objective, ag) = actor_objective_and_grad(&self.actor, &self.critic, &states)?;
        if !critic_loss.is_finite() || !objective.is_finite() {
            return Err(Error::NonFinite(format!("critic loss {critic_loss}, actor objective {objective}")));
        }
        let mut p = self.critic.params();
        self.critic_opt.step(&mut p, &cg.0)?;
        self.critic.set_params(&p)?;
        // Ascend J by descending -J.
        let neg: Vec<f64> = ag.0.iter().map(|g| -g).collect();
        let mut p = self.actor.params();
        self.actor_opt.step(&mut p, &neg)?;
        self.actor.set_params(&p)?;
        self.critic_target.soft_update_from(&self.critic, self.config.tau)?;
        self.actor_target.soft_update_from(&self.actor, self.config.tau)?;
        Ok((critic_loss, objective))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for net in [&self.actor, &self.critic, &self.actor_target, &self.critic_target] {
            write_mlp(net, &mut out)?;
        }
        Ok(())
    }

    /// Restores the four networks saved by [`save`](Self::save).
    pub fn load_networks(&mut self, path: &Path) -> Result<()> {
        let mut input = BufReader::new(File::open(path)?);
        let nets = [(); 4].map(|_| read_mlp(&mut input));
        let [a, c, at, ct] = nets;
        let (a, c, at, ct) = (a?, c?, at?, ct?);
        if a.param_count() != self.actor.param_count() || c.param_count() != self.critic.param_count() {
            return Err(invalid("checkpoint networks do not match this agent"));
        }
        self.actor = a;
        self.critic = c;
        self.actor_target = at;
        self.critic_target = ct;
        Ok(())
    }
}

impl Policy for DdpgAgent {
    fn act(&mut self, state: &AgentState, explore: bool) -> Result<Action> {
        self.norm.update(&state.0);
        let mut raw = self.actor.forward(&self.norm.normalize(&state.0))?;
        if explore && self.noise > 0.0 {
            for v in raw.iter_mut() {
                let z: f64 = self.rng.sample(StandardNormal);
                *v = (*v + self.noise * z).clamp(0.0, 1.0);
            }
        }
        let decision = self.space.project(&raw)?;
        Ok(Action { raw, decision })
    }

    fn observe(&mut self, mut transition: Transition) -> Result<Option<f64>> {
        let clip = self.config.reward_clip;
        transition.reward = transition.reward.clamp(-clip, clip);
        self.replay.push(transition)?;
        if self.replay.len() < self.config.warmup.max(1) {
            return Ok(None);
        }
        let mut total = 0.0;
        for _ in 0..self.config.updates {
            let batch: Vec<Transition> = self.replay.sample(self.config.batch, &mut self.rng).into_iter().cloned().collect();
            let refs: Vec<&Transition> = batch.iter().collect();
            total += self.train_step(&refs)?.0;
        }
        Ok(Some(total / self.config.updates as f64))
    }
}
