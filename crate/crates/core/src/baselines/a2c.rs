//! Discrete-time advantage actor-critic on a fixed decision grid.
//!
//! The assortment is drawn at each grid time `t_k` and held over
//! `(t_k, t_{k+1}]`; customers arriving in between see the held set
//! restricted to what is still available.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::dp::grid_steps;
use crate::baselines::eval::evaluate;
use crate::learn::{
    all_finite, pinv_solve, CriticConfig, CurveRecorder, LearnError, PolicyConfig, Progress,
    TrainOutcome, TrainedCritic, CRITIC_INIT_STREAM, EVAL_STREAM, TRAIN_STREAM,
};
use crate::model::{Assortment, NetworkInstance};
use crate::policy::{DifferentiablePolicy, Policy};
use crate::simulate::RngStream;
use crate::tinynn::{AdamState, Mlp, Tape};
use crate::value::{Critic, CriticFeatures, LinearCritic, MlpCritic, PolyBasis};

fn default_beta() -> f64 {
    1.0
}
fn default_eval_paths() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A2cConfig {
    pub dt: f64,
    pub episodes: usize,
    pub batch: usize,
    pub gamma: f64,
    pub lr_phi: f64,
    /// Weight of the value loss; scales the network critic's step.
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub critic: CriticConfig,
    pub policy: PolicyConfig,
    pub seed: u64,
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "default_eval_paths")]
    pub eval_paths: usize,
}

impl A2cConfig {
    pub fn validate(&self, inst: &NetworkInstance) -> Result<usize, LearnError> {
        let steps = grid_steps(inst.horizon(), self.dt).ok_or_else(|| {
            LearnError::Config(format!("dt = {} does not divide the horizon", self.dt))
        })?;
        if self.batch == 0 || !(self.gamma > 0.0) || !(self.lr_phi >= 0.0) || !(self.beta >= 0.0) {
            return Err(LearnError::Config(
                "batch, gamma must be positive; rates nonnegative".into(),
            ));
        }
        if self.eval_paths < 2 {
            return Err(LearnError::Config("eval_paths must be at least 2".into()));
        }
        Ok(steps)
    }
}

/// One episode observed on the decision grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridEpisode {
    pub dt: f64,
    /// `states[k] = X_{t_k}` for `k = 0..=K`.
    pub states: Vec<Vec<u32>>,
    pub actions: Vec<Assortment>,
    /// Revenue collected in `(t_k, t_{k+1}]`.
    pub rewards: Vec<f64>,
}

impl GridEpisode {
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Reward-to-go `sum_{k' >= k} r_{k'}` for every `k`.
    pub fn returns(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rewards.len()];
        let mut acc = 0.0;
        for k in (0..self.rewards.len()).rev() {
            acc += self.rewards[k];
            out[k] = acc;
        }
        out
    }
}

/// Simulates one episode with decisions at `t_k = k dt`.
pub fn roll_grid_episode<P: Policy + ?Sized>(
    inst: &NetworkInstance,
    policy: &P,
    steps: usize,
    rng: &mut RngStream,
) -> GridEpisode {
    let dt = inst.horizon() / steps as f64;
    let rate = inst.arrival();
    let upper = rate.max();
    let thin = !rate.is_constant();
    let mut x = inst.capacity().to_vec();
    let mut states = Vec::with_capacity(steps + 1);
    let mut actions = Vec::with_capacity(steps);
    let mut rewards = Vec::with_capacity(steps);
    let mut t: f64 = 0.0;
    for k in 0..steps {
        let tk = k as f64 * dt;
        let end = if k + 1 == steps {
            inst.horizon()
        } else {
            (k + 1) as f64 * dt
        };
        states.push(x.clone());
        let avail = inst.available(&x);
        let held = if avail.is_empty() {
            Assortment::EMPTY
        } else {
            policy.sample(tk, &x, avail, rng)
        };
        actions.push(held);
        let mut reward = 0.0;
        if upper > 0.0 && !held.is_empty() {
            t = t.max(tk);
            loop {
                t += rng.exponential(upper);
                if t >= end {
                    break;
                }
                if thin && rng.uniform() * upper >= rate.evaluate(t) {
                    continue;
                }
                let offer = held.intersect(inst.available(&x));
                if offer.is_empty() {
                    break;
                }
                if let Some(j) = inst.choice().sample_choice(offer, rng.uniform()) {
                    inst.sell(&mut x, j);
                    reward += inst.prices()[j];
                }
            }
        }
        // Memorylessness lets the next period restart its clock at t_{k+1}.
        t = end;
        rewards.push(reward);
    }
    states.push(x);
    GridEpisode {
        dt,
        states,
        actions,
        rewards,
    }
}

/// Least-squares fit of a linear critic to the Monte-Carlo returns.
pub fn fit_linear_critic(batch: &[GridEpisode], basis: &PolyBasis) -> Vec<f64> {
    let w = basis.dim();
    let mut m = DMatrix::zeros(w, w);
    let mut b = DVector::zeros(w);
    let mut phi = vec![0.0; w];
    for ep in batch {
        for (k, g) in ep.returns().into_iter().enumerate() {
            basis.eval_into(k as f64 * ep.dt, &ep.states[k], &mut phi);
            let v = DVector::from_column_slice(&phi);
            m += &v * v.transpose();
            b += v * g;
        }
    }
    let (theta, _, _) = pinv_solve(&m, &b);
    theta.iter().cloned().collect()
}

/// Gradient of `0.5 mean sum_k (G_k - J(t_k, x_k))^2` for a network critic.
pub fn network_critic_gradient(batch: &[GridEpisode], critic: &MlpCritic) -> Vec<f64> {
    let len = critic.net.num_params();
    let parts: Vec<Vec<f64>> = batch
        .par_iter()
        .map(|ep| {
            let mut g = vec![0.0; len];
            let mut input = Vec::new();
            let mut tape = Tape::default();
            for (k, ret) in ep.returns().into_iter().enumerate() {
                critic
                    .features
                    .fill(k as f64 * ep.dt, &ep.states[k], &mut input);
                critic.net.forward_tape(&input, &mut tape).unwrap();
                let resid = tape.output()[0] - ret;
                critic.net.backward(&tape, &[resid], 1.0, &mut g);
            }
            g
        })
        .collect();
    let mut grad = vec![0.0; len];
    for g in parts {
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    grad.iter_mut()
        .for_each(|g| *g /= batch.len().max(1) as f64);
    grad
}

/// Ascent direction `mean sum_k [A_k grad log pi(S_k) + gamma grad H(t_k, x_k)]`
/// with one-step TD advantages `A_k = r_k + J(t_{k+1}, x_{k+1}) - J(t_k, x_k)`.
pub fn a2c_policy_gradient<P, C>(
    inst: &NetworkInstance,
    batch: &[GridEpisode],
    critic: &C,
    policy: &P,
    gamma: f64,
) -> Vec<f64>
where
    P: DifferentiablePolicy + ?Sized,
    C: Critic + ?Sized,
{
    let len = policy.num_params();
    let parts: Vec<Vec<f64>> = batch
        .par_iter()
        .map(|ep| {
            let mut g = vec![0.0; len];
            for k in 0..ep.actions.len() {
                let tk = k as f64 * ep.dt;
                let x = &ep.states[k];
                let avail = inst.available(x);
                if avail.is_empty() {
                    continue;
                }
                let adv = ep.rewards[k] + critic.value(tk + ep.dt, &ep.states[k + 1])
                    - critic.value(tk, x);
                policy.grad_log_prob(tk, x, avail, ep.actions[k], adv, &mut g);
                policy.grad_entropy(tk, x, avail, gamma, &mut g);
            }
            g
        })
        .collect();
    let mut grad = vec![0.0; len];
    for g in parts {
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    grad.iter_mut()
        .for_each(|g| *g /= batch.len().max(1) as f64);
    grad
}

/// Trains `policy` with batch A2C; the linear critic is refit in closed form
/// per batch, the network critic takes one Adam step on `beta * L_value`.
pub fn train_a2c<P>(
    inst: &NetworkInstance,
    policy: P,
    config: &A2cConfig,
    observer: &mut dyn FnMut(&Progress),
) -> Result<TrainOutcome<P>, LearnError>
where
    P: DifferentiablePolicy + Clone,
{
    let steps = config.validate(inst)?;
    let mut policy = policy;
    policy.set_gamma(config.gamma);
    let root = RngStream::new(config.seed);
    let train_rng = root.child(TRAIN_STREAM);
    let eval_rng = root.child(EVAL_STREAM);
    let updates = config.episodes / config.batch;
    let mut actor_adam = AdamState::new(policy.num_params());
    let mut critic = match &config.critic {
        CriticConfig::Linear { degree, .. } => TrainedCritic::Linear(LinearCritic::zeros(
            PolyBasis::new(inst.m(), *degree, inst.horizon()),
        )),
        CriticConfig::Mlp { hidden, .. } => {
            let mut widths = vec![inst.m() + 1];
            widths.extend_from_slice(hidden);
            widths.push(1);
            let net = Mlp::new(&widths, &mut root.child(CRITIC_INIT_STREAM));
            let features = CriticFeatures::Scaled {
                horizon: inst.horizon(),
                capacity: inst.capacity().to_vec(),
            };
            TrainedCritic::Mlp(MlpCritic::new(net, features))
        }
    };
    let mut critic_adam = AdamState::new(critic.params().len());
    let mut curve = CurveRecorder::new(config.eval_every);
    let last = updates * config.batch;
    let record = |episode: usize, policy: &P, curve: &mut CurveRecorder| {
        if curve.due(episode, last) {
            let rep = evaluate(
                inst,
                policy,
                "curve",
                config.eval_paths,
                &eval_rng.child(episode as u64),
            );
            curve.push(episode, rep.mean, rep.ci99);
        }
    };
    record(0, &policy, &mut curve);
    for update in 0..updates {
        let stream = train_rng.child(update as u64);
        let batch: Vec<GridEpisode> = (0..config.batch)
            .into_par_iter()
            .map(|k| roll_grid_episode(inst, &policy, steps, &mut stream.child(k as u64)))
            .collect();
        match (&config.critic, &mut critic) {
            (CriticConfig::Linear { .. }, TrainedCritic::Linear(c)) => {
                c.theta = fit_linear_critic(&batch, &c.basis)
            }
            (CriticConfig::Mlp { lr, .. }, TrainedCritic::Mlp(c)) => {
                let grad = network_critic_gradient(&batch, c);
                critic_adam.step(c.net.params_mut(), &grad, lr * config.beta);
            }
            _ => unreachable!("critic state matches its configuration"),
        }
        if !all_finite(critic.params()) {
            return Err(LearnError::NonFinite {
                update,
                stage: "critic parameters",
            });
        }
        let grad = a2c_policy_gradient(inst, &batch, &critic, &policy, config.gamma);
        if !all_finite(&grad) {
            return Err(LearnError::NonFinite {
                update,
                stage: "policy gradient",
            });
        }
        let mut params = policy.params().to_vec();
        actor_adam.ascend(&mut params, &grad, config.lr_phi);
        if !all_finite(&params) {
            return Err(LearnError::NonFinite {
                update,
                stage: "policy parameters",
            });
        }
        policy.set_params(&params);
        let episode = (update + 1) * config.batch;
        observer(&Progress {
            update,
            episode,
            policy_params: policy.params(),
            critic_params: critic.params(),
        });
        record(episode, &policy, &mut curve);
    }
    Ok(TrainOutcome {
        policy,
        critic,
        curve: curve.points,
        updates,
    })
}
