//! Admission control in a single-server queue with time-varying arrival and
//! service rates.
//!
//! Paths reuse [`Trajectory`]: admissions are jumps with `product = 0` and
//! reward `K1`, departures are jumps with `product = 1` and reward `0`.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::dp::grid_steps;
use crate::baselines::eval::EvalReport;
use crate::learn::{
    all_finite, mc_critic_gradient, CurvePoint, CurveRecorder, LearnError, ReturnModel,
    ACTOR_INIT_STREAM, CRITIC_INIT_STREAM, EVAL_STREAM, TRAIN_STREAM,
};
use crate::model::{ArrivalRate, Assortment, ModelError, RateProfile};
use crate::policy::{binary_entropy_logit, sigmoid, ParamHeader};
use crate::simulate::{JumpRecord, RngStream, Trajectory};
use crate::tinynn::{AdamState, Mlp, Tape};
use crate::value::{Critic, CriticFeatures, MlpCritic, QuadratureRule};

pub const ADMIT: usize = 0;
pub const DEPART: usize = 1;

#[derive(Debug, Error, PartialEq)]
pub enum QueueError {
    #[error("invalid queue instance: {0}")]
    Invalid(String),
    #[error(transparent)]
    Rate(#[from] ModelError),
}

/// Serialized form of a queue instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueueSpec {
    #[serde(rename = "C")]
    pub capacity: u32,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "K1")]
    pub k1: f64,
    #[serde(rename = "K2")]
    pub k2: f64,
    #[serde(rename = "K3")]
    pub k3: f64,
    pub lambda: RateProfile,
    pub mu: RateProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QueueSpec", into = "QueueSpec")]
pub struct QueueInstance {
    capacity: u32,
    horizon: f64,
    k1: f64,
    k2: f64,
    k3: f64,
    lambda: ArrivalRate,
    mu: ArrivalRate,
}

impl TryFrom<QueueSpec> for QueueInstance {
    type Error = QueueError;

    fn try_from(s: QueueSpec) -> Result<Self, QueueError> {
        if s.capacity < 1 {
            return Err(QueueError::Invalid("C must be at least 1".into()));
        }
        if !(s.horizon > 0.0 && s.horizon.is_finite()) {
            return Err(QueueError::Invalid("T must be positive".into()));
        }
        if [s.k1, s.k2, s.k3]
            .iter()
            .any(|k| !(*k >= 0.0 && k.is_finite()))
        {
            return Err(QueueError::Invalid("K1, K2, K3 must be nonnegative".into()));
        }
        Ok(QueueInstance {
            capacity: s.capacity,
            horizon: s.horizon,
            k1: s.k1,
            k2: s.k2,
            k3: s.k3,
            lambda: ArrivalRate::new(s.lambda, s.horizon)?,
            mu: ArrivalRate::new(s.mu, s.horizon)?,
        })
    }
}

impl From<QueueInstance> for QueueSpec {
    fn from(q: QueueInstance) -> Self {
        QueueSpec {
            capacity: q.capacity,
            horizon: q.horizon,
            k1: q.k1,
            k2: q.k2,
            k3: q.k3,
            lambda: q.lambda.profile().clone(),
            mu: q.mu.profile().clone(),
        }
    }
}

impl QueueInstance {
    pub fn new(
        capacity: u32,
        horizon: f64,
        (k1, k2, k3): (f64, f64, f64),
        lambda: RateProfile,
        mu: RateProfile,
    ) -> Result<Self, QueueError> {
        QueueSpec {
            capacity,
            horizon,
            k1,
            k2,
            k3,
            lambda,
            mu,
        }
        .try_into()
    }

    /// `C = 10, T = 20, K = (10, 1, 0.1)`, `lambda = 0.5 + 0.3 sin(2 pi t / T)`, `mu = 0.1 + 0.1 t / T`.
    pub fn reference() -> Self {
        Self::new(
            10,
            20.0,
            (10.0, 1.0, 0.1),
            RateProfile::Sinusoidal {
                base: 0.5,
                amplitude: 0.3,
                period: 20.0,
            },
            RateProfile::LinearRamp {
                start: 0.1,
                end: 0.2,
            },
        )
        .unwrap()
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn k1(&self) -> f64 {
        self.k1
    }
    pub fn k2(&self) -> f64 {
        self.k2
    }
    pub fn k3(&self) -> f64 {
        self.k3
    }
    pub fn lambda(&self) -> &ArrivalRate {
        &self.lambda
    }
    pub fn mu(&self) -> &ArrivalRate {
        &self.mu
    }

    /// Running reward rate `-K2 x`.
    pub fn running_reward(&self, x: u32) -> f64 {
        -self.k2 * x as f64
    }

    /// Terminal reward `-K3 x`.
    pub fn terminal_reward(&self, x: u32) -> f64 {
        -self.k3 * x as f64
    }
}

/// Admission probability as a function of time and queue length.
pub trait AdmissionPolicy: Sync {
    /// Probability of admitting an arrival that finds `x` customers; zero at `x = C`.
    fn admit_prob(&self, t: f64, x: u32) -> f64;

    /// Entropy of the admit/reject distribution.
    fn entropy(&self, t: f64, x: u32) -> f64 {
        let p = self.admit_prob(t, x);
        let h = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
        h(p) + h(1.0 - p)
    }
}

/// Admit while fewer than `threshold` customers are present.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdPolicy(pub u32);

impl AdmissionPolicy for ThresholdPolicy {
    fn admit_prob(&self, _t: f64, x: u32) -> f64 {
        if x < self.0 {
            1.0
        } else {
            0.0
        }
    }
}

/// Admit with probability one half whenever there is room.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformAdmission {
    pub capacity: u32,
}

impl AdmissionPolicy for UniformAdmission {
    fn admit_prob(&self, _t: f64, x: u32) -> f64 {
        if x < self.capacity {
            0.5
        } else {
            0.0
        }
    }
}

/// Network actor: `p(t, x) = sigmoid(net(t/T, x/C) / temperature)`, forced
/// to zero at `x = C`. `gamma` is the entropy weight used in training.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueActor {
    pub net: Mlp,
    pub gamma: f64,
    pub temperature: f64,
    horizon: f64,
    capacity: u32,
}

impl QueueActor {
    /// He-initialized hidden layers and a zero output layer (admit probability one half).
    pub fn new(
        inst: &QueueInstance,
        hidden: &[usize],
        gamma: f64,
        temperature: f64,
        rng: &mut RngStream,
    ) -> Self {
        let mut widths = vec![2];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let mut net = Mlp::new(&widths, rng);
        net.zero_output_layer();
        QueueActor {
            net,
            gamma,
            temperature,
            horizon: inst.horizon(),
            capacity: inst.capacity(),
        }
    }

    pub fn header(&self) -> ParamHeader {
        ParamHeader {
            parametrization: "queue-mlp".into(),
            shapes: vec![self.net.widths().to_vec()],
            gamma: self.gamma,
            d: None,
            horizon: self.horizon,
            temperature: Some(self.temperature),
        }
    }

    /// Rebuilds an actor from a parameter file written with [`QueueActor::header`].
    pub fn from_params(
        inst: &QueueInstance,
        header: &ParamHeader,
        values: &[f64],
    ) -> Result<Self, String> {
        if header.parametrization != "queue-mlp" {
            return Err(format!(
                "expected a queue-mlp parameter file, found {}",
                header.parametrization
            ));
        }
        let widths = header.shapes.first().ok_or("missing network widths")?;
        if widths.first() != Some(&2) || widths.last() != Some(&1) {
            return Err(format!(
                "queue actor widths must start at 2 and end at 1, found {widths:?}"
            ));
        }
        let mut net = Mlp::zeros(widths);
        if values.len() != net.num_params() {
            return Err(format!(
                "expected {} parameters, found {}",
                net.num_params(),
                values.len()
            ));
        }
        net.params_mut().copy_from_slice(values);
        Ok(QueueActor {
            net,
            gamma: header.gamma,
            temperature: header.temperature.unwrap_or(header.gamma),
            horizon: inst.horizon(),
            capacity: inst.capacity(),
        })
    }

    fn input(&self, t: f64, x: u32) -> [f64; 2] {
        [t / self.horizon, x as f64 / self.capacity as f64]
    }

    /// Tempered logit `net / temperature`.
    pub fn logit(&self, t: f64, x: u32) -> f64 {
        self.net.forward(&self.input(t, x)).unwrap()[0] / self.temperature
    }

    /// `out += scale * d/dphi z(t, x)` with `z = net / temperature`; returns `z`.
    fn add_logit_grad(&self, t: f64, x: u32, scale: f64, tape: &mut Tape, out: &mut [f64]) -> f64 {
        self.net.forward_tape(&self.input(t, x), tape).unwrap();
        self.net
            .backward(tape, &[scale / self.temperature], 1.0, out);
        tape.output()[0] / self.temperature
    }

    /// `out += scale * grad log p(t, x)`; `d log sigmoid(z) / dz = 1 - p`.
    pub fn grad_log_admit(&self, t: f64, x: u32, scale: f64, out: &mut [f64]) {
        let z = self.logit(t, x);
        let mut tape = Tape::default();
        self.add_logit_grad(t, x, scale * (1.0 - sigmoid(z)), &mut tape, out);
    }

    /// `out += scale * grad H(t, x)`; `dH/dz = -z p (1 - p)`.
    pub fn grad_entropy(&self, t: f64, x: u32, scale: f64, out: &mut [f64]) {
        if x >= self.capacity {
            return;
        }
        let z = self.logit(t, x);
        let p = sigmoid(z);
        let mut tape = Tape::default();
        self.add_logit_grad(t, x, -scale * z * p * (1.0 - p), &mut tape, out);
    }
}

impl AdmissionPolicy for QueueActor {
    fn admit_prob(&self, t: f64, x: u32) -> f64 {
        if x >= self.capacity {
            0.0
        } else {
            sigmoid(self.logit(t, x))
        }
    }

    fn entropy(&self, t: f64, x: u32) -> f64 {
        if x >= self.capacity {
            0.0
        } else {
            binary_entropy_logit(self.logit(t, x))
        }
    }
}

/// Simulates one episode from an empty queue. Candidate arrivals and
/// services are drawn from a merged dominating Poisson stream and thinned;
/// services finding an empty queue and rejected arrivals leave no record.
pub fn roll_queue_episode<P: AdmissionPolicy + ?Sized>(
    inst: &QueueInstance,
    policy: &P,
    rng: &mut RngStream,
) -> Trajectory {
    let horizon = inst.horizon();
    let mut traj = Trajectory::new(vec![0], horizon);
    let (lam_max, mu_max) = (inst.lambda().max(), inst.mu().max());
    let upper = lam_max + mu_max;
    if upper <= 0.0 {
        return traj;
    }
    let mut x = 0u32;
    let mut t = 0.0;
    loop {
        t += rng.exponential(upper);
        if t >= horizon {
            return traj;
        }
        let u = rng.uniform() * upper;
        if u < lam_max {
            if u >= inst.lambda().evaluate(t) || x >= inst.capacity() {
                continue;
            }
            if rng.uniform() < policy.admit_prob(t, x) {
                x += 1;
                traj.records.push(JumpRecord {
                    tau: t,
                    state: vec![x],
                    assortment: Assortment::singleton(ADMIT),
                    product: ADMIT,
                    reward: inst.k1(),
                });
            }
        } else {
            if u - lam_max >= inst.mu().evaluate(t) || x == 0 {
                continue;
            }
            x -= 1;
            traj.records.push(JumpRecord {
                tau: t,
                state: vec![x],
                assortment: Assortment::EMPTY,
                product: DEPART,
                reward: 0.0,
            });
        }
    }
}

/// `K1 * admissions - K2 int X ds - K3 X_T` along one path.
pub fn episode_objective(traj: &Trajectory, inst: &QueueInstance) -> f64 {
    let admitted = traj.records.iter().filter(|r| r.product == ADMIT).count() as f64;
    let holding: f64 = traj
        .intervals()
        .map(|(t1, t2, x)| x[0] as f64 * (t2 - t1))
        .sum();
    inst.k1() * admitted - inst.k2() * holding - inst.k3() * traj.final_state()[0] as f64
}

/// Per-path objectives on child streams `0..paths` of `rng`.
pub fn queue_samples<P: AdmissionPolicy + ?Sized>(
    inst: &QueueInstance,
    policy: &P,
    paths: usize,
    rng: &RngStream,
) -> Vec<f64> {
    (0..paths)
        .into_par_iter()
        .map(|k| {
            episode_objective(
                &roll_queue_episode(inst, policy, &mut rng.child(k as u64)),
                inst,
            )
        })
        .collect()
}

pub fn evaluate_queue<P: AdmissionPolicy + ?Sized>(
    inst: &QueueInstance,
    policy: &P,
    label: &str,
    paths: usize,
    rng: &RngStream,
) -> EvalReport {
    assert!(paths >= 2, "evaluation needs at least two paths");
    let start = Instant::now();
    let samples = queue_samples(inst, policy, paths, rng);
    EvalReport::from_samples(label, &samples, start.elapsed().as_secs_f64())
}

/// Evaluates every threshold `1..=C` on the same random streams and keeps the best.
pub fn best_threshold(inst: &QueueInstance, paths: usize, rng: &RngStream) -> (u32, EvalReport) {
    (1..=inst.capacity())
        .map(|x| {
            (
                x,
                evaluate_queue(
                    inst,
                    &ThresholdPolicy(x),
                    &format!("threshold-{x}"),
                    paths,
                    rng,
                ),
            )
        })
        .fold(None, |best: Option<(u32, EvalReport)>, cand| match best {
            Some(b) if b.1.mean >= cand.1.mean => Some(b),
            _ => Some(cand),
        })
        .expect("capacity is at least one")
}

/// Grid values and admission decisions of the discretized control problem.
#[derive(Debug, Clone)]
pub struct QueueDpSolution {
    pub dt: f64,
    pub steps: usize,
    capacity: u32,
    /// `values[k * (C + 1) + x]`.
    values: Vec<f64>,
}

impl QueueDpSolution {
    pub fn value(&self, k: usize, x: u32) -> f64 {
        self.values[k * (self.capacity as usize + 1) + x as usize]
    }

    fn period(&self, t: f64) -> usize {
        ((t / self.dt).ceil() as usize)
            .saturating_sub(1)
            .min(self.steps - 1)
    }
}

/// The DP decision rule: admit in `(t_k, t_{k+1}]` iff `K1 + V(t_{k+1}, x + 1) - V(t_{k+1}, x) > 0`.
#[derive(Debug, Clone)]
pub struct QueueDpPolicy {
    sol: QueueDpSolution,
    k1: f64,
}

impl QueueDpPolicy {
    pub fn new(sol: QueueDpSolution, inst: &QueueInstance) -> Self {
        QueueDpPolicy { sol, k1: inst.k1() }
    }
}

impl AdmissionPolicy for QueueDpPolicy {
    fn admit_prob(&self, t: f64, x: u32) -> f64 {
        if x >= self.sol.capacity {
            return 0.0;
        }
        let k = self.sol.period(t) + 1;
        if self.k1 + self.sol.value(k, x + 1) - self.sol.value(k, x) > 0.0 {
            1.0
        } else {
            0.0
        }
    }
}

/// Backward recursion with rates read at `t_{k+1}`:
/// `V_k(x) = V(x) + lambda dt 1{x < C} max(0, K1 + V(x+1) - V(x)) - K2 dt x
///  + mu dt 1{x >= 1} (V(x-1) - V(x))`, `V_K(x) = -K3 x`, where `V = V_{k+1}`.
pub fn solve_queue_dp(inst: &QueueInstance, dt: f64) -> Result<QueueDpSolution, QueueError> {
    let steps = grid_steps(inst.horizon(), dt)
        .ok_or_else(|| QueueError::Invalid(format!("dt = {dt} does not divide T")))?;
    let prob = (inst.lambda().max() + inst.mu().max()) * dt;
    if prob > 1.0 {
        return Err(QueueError::Invalid(format!(
            "event probability per step {prob} exceeds 1"
        )));
    }
    let width = inst.capacity() as usize + 1;
    let cap = inst.capacity() as usize;
    let mut values = vec![0.0; (steps + 1) * width];
    for x in 0..width {
        values[steps * width + x] = inst.terminal_reward(x as u32);
    }
    for k in (0..steps).rev() {
        let t = (k + 1) as f64 * dt;
        let (lam, mu) = (inst.lambda().evaluate(t) * dt, inst.mu().evaluate(t) * dt);
        let (head, tail) = values.split_at_mut((k + 1) * width);
        let next = &tail[..width];
        let cur = &mut head[k * width..];
        for x in 0..width {
            let mut v = next[x] - inst.k2() * dt * x as f64;
            if x < cap {
                v += lam * (inst.k1() + next[x + 1] - next[x]).max(0.0);
            }
            if x >= 1 {
                v += mu * (next[x - 1] - next[x]);
            }
            cur[x] = v;
        }
    }
    Ok(QueueDpSolution {
        dt,
        steps,
        capacity: inst.capacity(),
        values,
    })
}

fn default_order() -> usize {
    8
}
fn default_eval_paths() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueTrainConfig {
    pub episodes: usize,
    pub batch: usize,
    pub gamma: f64,
    pub lr_theta: f64,
    pub lr_phi: f64,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    /// Divisor of the actor output before the sigmoid; `None` uses `gamma`.
    #[serde(default)]
    pub actor_temperature: Option<f64>,
    pub seed: u64,
    #[serde(default = "default_order")]
    pub quadrature_order: usize,
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "default_eval_paths")]
    pub eval_paths: usize,
}

impl QueueTrainConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        let ok = self.batch > 0
            && self.gamma > 0.0
            && self.gamma.is_finite()
            && self.lr_theta >= 0.0
            && self.lr_phi >= 0.0
            && self.quadrature_order > 0
            && self.eval_paths >= 2
            && self
                .actor_temperature
                .is_none_or(|v| v > 0.0 && v.is_finite())
            && self
                .actor_hidden
                .iter()
                .chain(&self.critic_hidden)
                .all(|&h| h > 0);
        if ok {
            Ok(())
        } else {
            Err(LearnError::Config(
                "queue training needs batch, gamma, widths > 0 and rates >= 0".into(),
            ))
        }
    }
}

#[derive(Debug, Clone)]
pub struct QueueTrainOutcome {
    pub actor: QueueActor,
    pub critic: MlpCritic,
    pub curve: Vec<CurvePoint>,
    pub updates: usize,
}

/// Policy gradient over admission events plus the entropy term:
/// `sum_{admissions} grad log p(tau, x-) [J(tau, x- + 1) - J(tau, x-) + K1]
///  + gamma int grad H(s, X_s) ds`, averaged over the batch.
pub fn queue_policy_gradient<C: Critic + ?Sized>(
    inst: &QueueInstance,
    batch: &[Trajectory],
    critic: &C,
    actor: &QueueActor,
    rule: &QuadratureRule,
) -> Vec<f64> {
    let len = actor.net.num_params();
    let parts: Vec<Vec<f64>> = batch
        .par_iter()
        .map(|traj| {
            let mut g = vec![0.0; len];
            for l in 1..=traj.len() {
                let rec = &traj.records[l - 1];
                if rec.product != ADMIT {
                    continue;
                }
                let before = traj.state_before(l - 1);
                let shadow =
                    critic.value(rec.tau, &rec.state) - critic.value(rec.tau, before) + inst.k1();
                actor.grad_log_admit(rec.tau, before[0], shadow, &mut g);
            }
            for (t1, t2, x) in traj.intervals() {
                if t2 > t1 && x[0] < inst.capacity() {
                    for (s, w) in rule.mapped(t1, t2) {
                        actor.grad_entropy(s, x[0], actor.gamma * w, &mut g);
                    }
                }
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

/// Network actor-critic for the queue: per batch, one Adam step on the
/// Monte-Carlo critic loss (holding cost and terminal penalty included),
/// then one Adam ascent step on the actor.
pub fn train_queue_actor_critic(
    inst: &QueueInstance,
    config: &QueueTrainConfig,
    observer: &mut dyn FnMut(usize, &QueueActor, &MlpCritic),
) -> Result<QueueTrainOutcome, LearnError> {
    config.validate()?;
    let root = RngStream::new(config.seed);
    let train_rng = root.child(TRAIN_STREAM);
    let eval_rng = root.child(EVAL_STREAM);
    let rule = QuadratureRule::gauss_legendre(config.quadrature_order);
    let temperature = config.actor_temperature.unwrap_or(config.gamma);
    let mut actor = QueueActor::new(
        inst,
        &config.actor_hidden,
        config.gamma,
        temperature,
        &mut root.child(ACTOR_INIT_STREAM),
    );
    let mut widths = vec![2];
    widths.extend_from_slice(&config.critic_hidden);
    widths.push(1);
    let features = CriticFeatures::Scaled {
        horizon: inst.horizon(),
        capacity: vec![inst.capacity()],
    };
    let mut critic = MlpCritic::new(
        Mlp::new(&widths, &mut root.child(CRITIC_INIT_STREAM)),
        features,
    );
    let mut critic_adam = AdamState::new(critic.net.num_params());
    let mut actor_adam = AdamState::new(actor.net.num_params());
    let running = |x: &[u32]| inst.running_reward(x[0]);
    let terminal = |x: &[u32]| inst.terminal_reward(x[0]);
    let returns = ReturnModel {
        running: &running,
        terminal: &terminal,
    };
    let updates = config.episodes / config.batch;
    let last = updates * config.batch;
    let mut curve = CurveRecorder::new(config.eval_every);
    let record = |episode: usize, actor: &QueueActor, curve: &mut CurveRecorder| {
        if curve.due(episode, last) {
            let rep = evaluate_queue(
                inst,
                actor,
                "curve",
                config.eval_paths,
                &eval_rng.child(episode as u64),
            );
            curve.push(episode, rep.mean, rep.ci99);
        }
    };
    record(0, &actor, &mut curve);
    for update in 0..updates {
        let stream = train_rng.child(update as u64);
        let batch: Vec<Trajectory> = (0..config.batch)
            .into_par_iter()
            .map(|k| roll_queue_episode(inst, &actor, &mut stream.child(k as u64)))
            .collect();
        let entropy = |t: f64, x: &[u32]| actor.entropy(t, x[0]);
        let (grad, _) =
            mc_critic_gradient(&batch, &critic, &entropy, config.gamma, &rule, &returns);
        critic_adam.step(critic.net.params_mut(), &grad, config.lr_theta);
        if !all_finite(critic.net.params()) {
            return Err(LearnError::NonFinite {
                update,
                stage: "critic parameters",
            });
        }
        let pg = queue_policy_gradient(inst, &batch, &critic, &actor, &rule);
        if !all_finite(&pg) {
            return Err(LearnError::NonFinite {
                update,
                stage: "policy gradient",
            });
        }
        actor_adam.ascend(actor.net.params_mut(), &pg, config.lr_phi);
        if !all_finite(actor.net.params()) {
            return Err(LearnError::NonFinite {
                update,
                stage: "policy parameters",
            });
        }
        observer(update, &actor, &critic);
        record((update + 1) * config.batch, &actor, &mut curve);
    }
    Ok(QueueTrainOutcome {
        actor,
        critic,
        curve: curve.points,
        updates,
    })
}
