//! Tabular actor-critic for HOC/FON networks with update-on-arrival.
//!
//! Step convention: `t` counts environment steps and is incremented as soon as
//! the next state arrives, so the reward of the `i`-th step of an activation is
//! discounted by `γ^i` and the critic bootstrap after `l` steps uses `γ^l`.
//!
//! Only the options that were called back at a step are updated: every option
//! that terminated plus ω, the deepest option that kept running and therefore
//! selects again. The legacy mode updates every option on the active path.

use crate::env::Environment;
use crate::graph::{NoopSink, TraceSink};
use crate::option_net::{softmax_into, ActiveChain, Hyperparams, NetError, Network, NetworkSpec, OptionId, ROOT};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Action values `Q_{π_o}(x, u)` for every option, row-major `state × action`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub values: Vec<Vec<f64>>,
    pub widths: Vec<usize>,
}

impl QTable {
    pub fn zeros(net: &Network) -> Self {
        let widths: Vec<usize> = (0..net.layout.len()).map(|o| net.layout.n_actions(o)).collect();
        let values = widths.iter().map(|&w| vec![0.0; w * net.n_states]).collect();
        Self { values, widths }
    }

    #[inline]
    pub fn get(&self, o: OptionId, state: usize, action: usize) -> f64 {
        self.values[o][state * self.widths[o] + action]
    }

    #[inline]
    pub fn get_mut(&mut self, o: OptionId, state: usize, action: usize) -> &mut f64 {
        &mut self.values[o][state * self.widths[o] + action]
    }

    pub fn row(&self, o: OptionId, state: usize) -> &[f64] {
        let w = self.widths[o];
        &self.values[o][state * w..(state + 1) * w]
    }

    #[inline]
    pub fn max(&self, o: OptionId, state: usize) -> f64 {
        self.row(o, state).iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateCounters {
    pub actor_updates: u64,
    pub critic_updates: u64,
    pub termination_updates: u64,
    /// Actor updates the update-on-arrival schedule performs on this trajectory.
    pub on_arrival_actor_updates: u64,
    /// Actor updates the every-parent-every-step schedule performs on this trajectory.
    pub legacy_actor_updates: u64,
}

impl std::ops::AddAssign for UpdateCounters {
    fn add_assign(&mut self, rhs: Self) {
        self.actor_updates += rhs.actor_updates;
        self.critic_updates += rhs.critic_updates;
        self.termination_updates += rhs.termination_updates;
        self.on_arrival_actor_updates += rhs.on_arrival_actor_updates;
        self.legacy_actor_updates += rhs.legacy_actor_updates;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeStats {
    pub steps: usize,
    pub discounted_return: f64,
    pub reached_goal: bool,
    /// Completed activation durations per option (root = 0).
    pub per_option_lengths: Vec<Vec<usize>>,
    pub counters: UpdateCounters,
}

impl EpisodeStats {
    /// Mean completed activation length per option, `None` when there was none.
    pub fn mean_lengths(&self) -> Vec<Option<f64>> {
        self.per_option_lengths
            .iter()
            .map(|l| {
                if l.is_empty() {
                    None
                } else {
                    Some(l.iter().sum::<usize>() as f64 / l.len() as f64)
                }
            })
            .collect()
    }
}

/// Serialized learner state: spec, logit tables and Q tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub spec: NetworkSpec,
    pub hyper: Hyperparams,
    pub n_states: usize,
    pub options: Vec<OptionTables>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionTables {
    pub policy_logits: Vec<f64>,
    pub termination_logits: Vec<f64>,
    pub q: Vec<f64>,
}

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Clone)]
pub struct TabularLearner {
    pub net: Network,
    pub q: QTable,
    pub hyper: Hyperparams,
    pub legacy_updates: bool,
    /// Active options, root first.
    pub chain: ActiveChain,
    values: Vec<f64>,
    betas: Vec<f64>,
    probs: Vec<f64>,
}

impl TabularLearner {
    pub fn new(spec: &NetworkSpec, n_states: usize, hyper: Hyperparams) -> Result<Self, NetError> {
        hyper.validate()?;
        let net = Network::init(spec, n_states, hyper.temperatures())?;
        let q = QTable::zeros(&net);
        let width = (0..net.layout.len())
            .map(|o| net.layout.n_actions(o))
            .max()
            .unwrap_or(1);
        Ok(Self {
            net,
            q,
            hyper,
            legacy_updates: false,
            chain: vec![ROOT],
            values: Vec::new(),
            betas: Vec::new(),
            probs: vec![0.0; width],
        })
    }

    pub fn with_legacy_updates(mut self, legacy: bool) -> Self {
        self.legacy_updates = legacy;
        self
    }

    pub fn learn_episode<E: Environment, R: Rng + ?Sized>(
        &mut self,
        env: &mut E,
        t_max: usize,
        rng: &mut R,
    ) -> EpisodeStats {
        self.learn_episode_traced(env, t_max, rng, &mut NoopSink)
    }

    /// One episode of the tabular actor-critic, reporting coagent decisions to `sink`.
    pub fn learn_episode_traced<E: Environment, R: Rng + ?Sized, S: TraceSink>(
        &mut self,
        env: &mut E,
        t_max: usize,
        rng: &mut R,
        sink: &mut S,
    ) -> EpisodeStats {
        let gamma = self.hyper.gamma;
        let mut stats = EpisodeStats {
            per_option_lengths: vec![Vec::new(); self.net.layout.len()],
            ..Default::default()
        };
        let mut s = env.reset();
        self.chain.clear();
        self.chain.push(ROOT);
        for node in self.net.nodes.iter_mut() {
            node.terminated = false;
        }
        self.net.nodes[ROOT].selected_at = 0;
        self.net.nodes[ROOT].active_parent = None;

        let mut t = 0usize;
        let mut action = self.net.choose_primitive_action(s, t, &mut self.chain, rng, sink);
        loop {
            let outcome = env.step(action);
            t += 1;
            let s_next = outcome.next;
            if outcome.reward != 0.0 {
                stats.discounted_return += gamma.powi(t as i32 - 1) * outcome.reward;
            }
            self.accumulate_rewards(outcome.reward, t);

            let omega = if outcome.done {
                0
            } else {
                self.net.termination_cascade(s_next, &self.chain, rng, sink)
            };
            let counters = &mut stats.counters;
            counters.legacy_actor_updates += self.chain.len() as u64;
            counters.on_arrival_actor_updates += if outcome.done {
                self.chain.len() as u64
            } else {
                (self.chain.len() - omega) as u64
            };
            self.update_critics(s_next, t, outcome.done, counters);
            self.update_actors(outcome.done, counters);
            if !outcome.done {
                self.update_terminations(s_next, omega, counters);
            }

            let ended = outcome.done || t >= t_max;
            for &o in &self.chain {
                let node = &mut self.net.nodes[o];
                if ended || node.terminated {
                    stats.per_option_lengths[o].push(t - node.selected_at);
                }
                node.terminated = false;
            }
            if ended {
                stats.reached_goal = outcome.done;
                break;
            }
            self.chain.truncate(omega + 1);
            s = s_next;
            action = self.net.choose_primitive_action(s, t, &mut self.chain, rng, sink);
        }
        stats.steps = t;
        stats
    }

    /// `R_o += γ^{t − activation − 1} · r` for every active option.
    pub fn accumulate_rewards(&mut self, reward: f64, t: usize) {
        if reward == 0.0 {
            return;
        }
        let gamma = self.hyper.gamma;
        for &o in &self.chain {
            let node = &mut self.net.nodes[o];
            debug_assert!(node.activation_time < t);
            node.reward_acc += gamma.powi((t - node.activation_time - 1) as i32) * reward;
        }
    }

    #[inline]
    fn keeps_updating(&self, o: OptionId, done: bool) -> bool {
        done || self.legacy_updates || self.net.nodes[o].terminated
    }

    /// Critic step with the parent's action value as the bootstrap target.
    pub fn update_critics(&mut self, s_next: usize, t: usize, done: bool, counters: &mut UpdateCounters) {
        let depth = self.chain.len();
        self.values.clear();
        self.values.resize(depth, 0.0);
        if !done {
            // root: β_0 ≡ 0 and no parent, so its own greedy value
            self.values[0] = self.q.max(ROOT, s_next);
            for d in 1..depth {
                let o = self.chain[d];
                let parent = self.chain[d - 1];
                let beta = self.net.termination_prob(o, s_next);
                let slot = self.net.layout.nodes[o].slot;
                self.values[d] = (1.0 - beta) * self.q.get(parent, s_next, slot) + beta * self.values[d - 1];
            }
        }
        let gamma = self.hyper.gamma;
        let alpha = self.hyper.alpha_q;
        for d in (0..depth).rev() {
            let o = self.chain[d];
            let node = &self.net.nodes[o];
            let target = node.reward_acc + gamma.powi((t - node.activation_time) as i32) * self.values[d];
            let q = self.q.get_mut(o, node.last_observation, node.prev_action);
            *q += alpha * (target - *q);
            counters.critic_updates += 1;
            if !self.keeps_updating(o, done) {
                break;
            }
        }
    }

    /// Actor step with the active parent's action value as the baseline (0 for the root).
    pub fn update_actors(&mut self, done: bool, counters: &mut UpdateCounters) {
        let alpha = self.hyper.alpha_pi;
        let tau = self.net.temps.tau_pi;
        for d in (0..self.chain.len()).rev() {
            let o = self.chain[d];
            let (x, c) = {
                let node = &self.net.nodes[o];
                (node.last_observation, node.prev_action)
            };
            let baseline = if d == 0 {
                0.0
            } else {
                self.q.get(self.chain[d - 1], x, self.net.layout.nodes[o].slot)
            };
            let advantage = self.q.get(o, x, c) - baseline;
            counters.actor_updates += 1;
            if advantage != 0.0 {
                let width = self.net.nodes[o].n_actions;
                let probs = &mut self.probs[..width];
                softmax_into(self.net.nodes[o].logits(x), tau, probs);
                // dπ(c)/dθ_k = π(c)(1{k=c} − π(k)) / τ
                let scale = alpha * advantage * probs[c] / tau;
                for (k, logit) in self.net.nodes[o].logits_mut(x).iter_mut().enumerate() {
                    let indicator = if k == c { 1.0 } else { 0.0 };
                    *logit += scale * (indicator - probs[k]);
                }
            }
            if !self.keeps_updating(o, done) {
                break;
            }
        }
    }

    /// Termination step. Terminated options follow `+dβ/dθ` towards the value of
    /// continuing at ω; ω itself follows `−dβ/dθ` since it chose not to terminate.
    /// `Probs` carries the probability of the cascade reaching each decision.
    pub fn update_terminations(&mut self, s_next: usize, omega: usize, counters: &mut UpdateCounters) {
        let depth = self.chain.len();
        self.betas.clear();
        self.betas.push(0.0);
        self.values.clear();
        self.values.push(self.q.max(ROOT, s_next));
        for d in 1..depth {
            let o = self.chain[d];
            let beta = self.net.termination_prob(o, s_next);
            self.betas.push(beta);
            let v = (1.0 - beta) * self.q.max(o, s_next) + beta * self.values[d - 1];
            self.values.push(v);
        }
        let q_omega = self.q.max(self.chain[omega], s_next);
        let alpha = self.hyper.alpha_beta;
        let tau = self.net.temps.tau_beta;
        let mut probs = 1.0;
        for d in (1..depth).rev() {
            let o = self.chain[d];
            let beta = self.betas[d];
            let grad = beta * (1.0 - beta) / tau;
            counters.termination_updates += 1;
            if self.net.nodes[o].terminated {
                let delta = q_omega - self.values[d];
                self.net.nodes[o].termination_logits[s_next] += alpha * probs * grad * delta;
                probs *= beta;
            } else {
                debug_assert_eq!(d, omega);
                let delta = self.q.max(o, s_next) - self.values[d];
                self.net.nodes[o].termination_logits[s_next] -= alpha * probs * grad * delta;
                break;
            }
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA,
            spec: self.net.layout.spec.clone(),
            hyper: self.hyper,
            n_states: self.net.n_states,
            options: self
                .net
                .nodes
                .iter()
                .zip(&self.q.values)
                .map(|(node, q)| OptionTables {
                    policy_logits: node.policy_logits.clone(),
                    termination_logits: node.termination_logits.clone(),
                    q: q.clone(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, NetError> {
        if ck.schema_version != CHECKPOINT_SCHEMA {
            return Err(NetError::Hyper(format!(
                "unsupported checkpoint schema {}",
                ck.schema_version
            )));
        }
        let mut learner = Self::new(&ck.spec, ck.n_states, ck.hyper)?;
        if ck.options.len() != learner.net.nodes.len() {
            return Err(NetError::Hyper("checkpoint option count mismatch".into()));
        }
        for (o, tables) in ck.options.iter().enumerate() {
            let node = &mut learner.net.nodes[o];
            if tables.policy_logits.len() != node.policy_logits.len()
                || tables.termination_logits.len() != node.termination_logits.len()
                || tables.q.len() != learner.q.values[o].len()
            {
                return Err(NetError::Hyper(format!(
                    "checkpoint tables of option {o} have the wrong size"
                )));
            }
            node.policy_logits.clone_from(&tables.policy_logits);
            node.termination_logits.clone_from(&tables.termination_logits);
            learner.q.values[o].clone_from(&tables.q);
        }
        Ok(learner)
    }

    pub fn all_finite(&self) -> bool {
        self.q.all_finite()
            && self.net.nodes.iter().all(|n| {
                n.policy_logits.iter().all(|v| v.is_finite()) && n.termination_logits.iter().all(|v| v.is_finite())
            })
    }
}
