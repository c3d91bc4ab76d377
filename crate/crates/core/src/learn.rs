//! Policy evaluation (Monte Carlo and TD(0)), the event-driven policy
//! gradient, and the actor-critic training loop.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::eval::evaluate;
use crate::model::NetworkInstance;
use crate::policy::{
    BernoulliNnPolicy, DifferentiablePolicy, LinearPairPolicy, LinearRoPolicy, ParamPolicy, Policy,
};
use crate::simulate::{roll_batch, RngStream, Trajectory};
use crate::tinynn::{AdamState, Mlp, Tape};
use crate::value::{Critic, CriticFeatures, LinearCritic, MlpCritic, PolyBasis, QuadratureRule};

/// Entropy of the policy at `(t, x)`.
pub type EntropyFn<'a> = dyn Fn(f64, &[u32]) -> f64 + Sync + 'a;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("TD(0) matrix is singular (condition estimate {condition:e})")]
    Singular { condition: f64 },
    #[error("non-finite {stage} after update {update}")]
    NonFinite { update: usize, stage: &'static str },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeResult {
    pub theta: Vec<f64>,
    /// Ratio of largest to smallest retained singular value.
    pub condition: f64,
    pub rank: usize,
    pub batch: usize,
}

/// Entropy of `policy` at the availability set implied by `x`.
pub fn policy_entropy<'a, P: Policy + ?Sized>(
    inst: &'a NetworkInstance,
    policy: &'a P,
) -> impl Fn(f64, &[u32]) -> f64 + Sync + 'a {
    move |t, x| policy.entropy(t, x, inst.available(x))
}

/// Quadrature nodes, weights and entropy values on one interval.
fn interval_entropy(
    rule: &QuadratureRule,
    t1: f64,
    t2: f64,
    x: &[u32],
    entropy: &EntropyFn,
) -> Vec<(f64, f64, f64)> {
    if t2 <= t1 {
        return Vec::new();
    }
    rule.mapped(t1, t2)
        .map(|(s, w)| (s, w, entropy(s, x)))
        .collect()
}

/// Per-trajectory `M` and `b` of the Monte-Carlo normal equations.
fn mc_moments_one(
    traj: &Trajectory,
    basis: &PolyBasis,
    entropy: &EntropyFn,
    gamma: f64,
    rule: &QuadratureRule,
) -> (DMatrix<f64>, DVector<f64>) {
    let w = basis.dim();
    let mut m = DMatrix::zeros(w, w);
    let mut b = vec![0.0; w];
    let mut tail = 0.0;
    for l in (0..=traj.len()).rev() {
        let (t1, t2, x) = traj.interval(l);
        basis.add_d_bar(t1, t2, x, 1.0, &mut m);
        basis.add_b_bar(t1, t2, x, tail, &mut b);
        let mut e = 0.0;
        if gamma != 0.0 {
            for (s, wq, h) in interval_entropy(rule, t1, t2, x, entropy) {
                e += wq * h;
                // int_{t1}^{t2} H(s) int_{t1}^{s} phi = E(t1, t2, x; b_bar(t1, ., x))
                basis.add_b_bar(t1, s, x, gamma * wq * h, &mut b);
            }
        }
        if l >= 1 {
            tail += traj.records[l - 1].reward + gamma * e;
        }
    }
    (m, DVector::from_vec(b))
}

/// Batch means of `M_{phi,phi}` and `b_{phi,h}`.
pub fn mc_pe_moments(
    batch: &[Trajectory],
    basis: &PolyBasis,
    entropy: &EntropyFn,
    gamma: f64,
    rule: &QuadratureRule,
) -> (DMatrix<f64>, DVector<f64>) {
    let parts: Vec<_> = batch
        .par_iter()
        .map(|traj| mc_moments_one(traj, basis, entropy, gamma, rule))
        .collect();
    let w = basis.dim();
    let mut m = DMatrix::zeros(w, w);
    let mut b = DVector::zeros(w);
    for (mi, bi) in parts {
        m += mi;
        b += bi;
    }
    let k = batch.len() as f64;
    (m / k, b / k)
}

/// Solves `M theta = b` with the Moore-Penrose inverse of symmetric PSD `M`.
pub fn pinv_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, f64, usize) {
    let w = m.nrows();
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = smax * w as f64 * 1e-12;
    let kept: Vec<f64> = svd
        .singular_values
        .iter()
        .cloned()
        .filter(|s| *s > cutoff)
        .collect();
    let smin = kept.iter().cloned().fold(f64::INFINITY, f64::min);
    let theta = svd
        .solve(b, cutoff)
        .expect("SVD was computed with both factors");
    (theta, smax / smin, kept.len())
}

/// Monte-Carlo policy evaluation: `theta* = pinv(mean M) mean b`.
pub fn mc_pe(
    batch: &[Trajectory],
    basis: &PolyBasis,
    entropy: &EntropyFn,
    gamma: f64,
    rule: &QuadratureRule,
) -> Result<PeResult, LearnError> {
    if batch.is_empty() {
        return Err(LearnError::EmptyBatch);
    }
    let (m, b) = mc_pe_moments(batch, basis, entropy, gamma, rule);
    let (theta, condition, rank) = pinv_solve(&m, &b);
    Ok(PeResult {
        theta: theta.iter().cloned().collect(),
        condition,
        rank,
        batch: batch.len(),
    })
}

fn td_moments_one(
    traj: &Trajectory,
    basis: &PolyBasis,
    entropy: &EntropyFn,
    gamma: f64,
    rule: &QuadratureRule,
) -> (DMatrix<f64>, DVector<f64>) {
    let w = basis.dim();
    let mut m = DMatrix::zeros(w, w);
    let mut b = DVector::zeros(w);
    let mut prev = vec![0.0; w];
    let mut next = vec![0.0; w];
    for l in 1..=traj.len() {
        let rec = &traj.records[l - 1];
        basis.eval_into(rec.tau, traj.state_before(l - 1), &mut prev);
        basis.eval_into(rec.tau, &rec.state, &mut next);
        for i in 0..w {
            if prev[i] == 0.0 {
                continue;
            }
            for j in 0..w {
                m[(i, j)] += prev[i] * (next[j] - prev[j]);
            }
            b[i] += prev[i] * rec.reward;
        }
    }
    for (t1, t2, x) in traj.intervals() {
        basis.add_f_bar(t1, t2, x, 1.0, &mut m);
        if gamma != 0.0 {
            for (s, wq, h) in interval_entropy(rule, t1, t2, x, entropy) {
                basis.eval_into(s, x, &mut prev);
                for i in 0..w {
                    b[i] += gamma * wq * h * prev[i];
                }
            }
        }
    }
    (m, b)
}

/// Batch means of the TD(0) matrix `M~` and vector `b~`.
pub fn td0_moments(
    batch: &[Trajectory],
    basis: &PolyBasis,
    entropy: &EntropyFn,
    gamma: f64,
    rule: &QuadratureRule,
) -> (DMatrix<f64>, DVector<f64>) {
    let parts: Vec<_> = batch
        .par_iter()
        .map(|traj| td_moments_one(traj, basis, entropy, gamma, rule))
        .collect();
    let w = basis.dim();
    let mut m = DMatrix::zeros(w, w);
    let mut b = DVector::zeros(w);
    for (mi, bi) in parts {
        m += mi;
        b += bi;
    }
    let k = batch.len() as f64;
    (m / k, b / k)
}

/// Basis coordinates solved for by TD(0): every `u^l` term with `l >= 1`
/// (the terminal condition `J(T, .) = 0` pins the `l = 0` terms to zero),
/// skipping state coordinates that are zero throughout the batch.
fn td_active_coordinates(batch: &[Trajectory], basis: &PolyBasis) -> Vec<usize> {
    let k = basis.degree() + 1;
    let mut used = vec![false; basis.m()];
    for traj in batch {
        for (_, _, x) in traj.intervals() {
            for (i, xi) in x.iter().enumerate() {
                used[i] |= *xi != 0;
            }
        }
    }
    let mut out = Vec::new();
    for i in 0..=basis.m() {
        if i > 0 && !used[i - 1] {
            continue;
        }
        out.extend((1..k).map(|l| i * k + l));
    }
    out
}

/// TD(0) policy evaluation from the martingale orthogonality condition with
/// test function `grad_theta J`: `mean(M~) theta + mean(b~) = 0`.
pub fn td0_pe(
    batch: &[Trajectory],
    basis: &PolyBasis,
    entropy: &EntropyFn,
    gamma: f64,
    rule: &QuadratureRule,
    ridge: Option<f64>,
) -> Result<PeResult, LearnError> {
    if batch.is_empty() {
        return Err(LearnError::EmptyBatch);
    }
    let (m, b) = td0_moments(batch, basis, entropy, gamma, rule);
    let active = td_active_coordinates(batch, basis);
    let k = active.len();
    let mut sub = DMatrix::from_fn(k, k, |i, j| m[(active[i], active[j])]);
    if let Some(r) = ridge {
        for i in 0..k {
            sub[(i, i)] += r;
        }
    }
    let rhs = DVector::from_fn(k, |i, _| -b[active[i]]);
    let sv = sub.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let condition = if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    };
    if !(smin > smax * 1e-13) {
        return Err(LearnError::Singular { condition });
    }
    let sol = sub
        .lu()
        .solve(&rhs)
        .ok_or(LearnError::Singular { condition })?;
    let mut theta = vec![0.0; basis.dim()];
    for (i, &a) in active.iter().enumerate() {
        theta[a] = sol[i];
    }
    Ok(PeResult {
        theta,
        condition,
        rank: k,
        batch: batch.len(),
    })
}

/// Running reward rate and terminal reward added to the jump rewards in the
/// Monte-Carlo target.
pub struct ReturnModel<'a> {
    pub running: &'a (dyn Fn(&[u32]) -> f64 + Sync),
    pub terminal: &'a (dyn Fn(&[u32]) -> f64 + Sync),
}

fn zero_reward(_: &[u32]) -> f64 {
    0.0
}

impl ReturnModel<'static> {
    /// Jump rewards only.
    pub fn jumps_only() -> Self {
        ReturnModel {
            running: &zero_reward,
            terminal: &zero_reward,
        }
    }
}

/// Gradient and value of the Monte-Carlo critic loss for one trajectory,
/// written per quadrature node as `w_q grad J(s_q) (J(s_q) - h(s_q))` where
/// `h` is the realized return from `s_q`.
fn mc_critic_gradient_one(
    traj: &Trajectory,
    critic: &MlpCritic,
    entropy: &EntropyFn,
    gamma: f64,
    rule: &QuadratureRule,
    returns: &ReturnModel,
    grad: &mut [f64],
) -> f64 {
    let mut loss = 0.0;
    let mut after = (returns.terminal)(traj.final_state());
    let mut input = Vec::new();
    let mut tape = Tape::default();
    let order = rule.order();
    for l in (0..=traj.len()).rev() {
        let (t1, t2, x) = traj.interval(l);
        let rho = (returns.running)(x);
        let mut e = 0.0;
        if t2 > t1 {
            let nodes: Vec<(f64, f64)> = rule.mapped(t1, t2).collect();
            let h: Vec<f64> = if gamma != 0.0 {
                nodes.iter().map(|&(s, _)| entropy(s, x)).collect()
            } else {
                vec![0.0; order]
            };
            e = nodes.iter().zip(&h).map(|((_, w), hq)| w * hq).sum();
            for (q, &(s, w)) in nodes.iter().enumerate() {
                let mut tail = e;
                if gamma != 0.0 {
                    for (k, hk) in h.iter().enumerate() {
                        tail -= rule.cumulative_weight(q, k, t1, t2) * hk;
                    }
                }
                let target = after + rho * (t2 - s) + gamma * tail;
                critic.features.fill(s, x, &mut input);
                critic.net.forward_tape(&input, &mut tape).unwrap();
                let resid = tape.output()[0] - target;
                loss += 0.5 * w * resid * resid;
                critic.net.backward(&tape, &[w * resid], 1.0, grad);
            }
        }
        if l >= 1 {
            after += traj.records[l - 1].reward + rho * (t2 - t1) + gamma * e;
        }
    }
    loss
}

/// Batch-mean gradient and loss of the Monte-Carlo critic objective.
pub fn mc_critic_gradient(
    batch: &[Trajectory],
    critic: &MlpCritic,
    entropy: &EntropyFn,
    gamma: f64,
    rule: &QuadratureRule,
    returns: &ReturnModel,
) -> (Vec<f64>, f64) {
    let len = critic.net.num_params();
    let parts: Vec<(Vec<f64>, f64)> = batch
        .par_iter()
        .map(|traj| {
            let mut g = vec![0.0; len];
            let loss = mc_critic_gradient_one(traj, critic, entropy, gamma, rule, returns, &mut g);
            (g, loss)
        })
        .collect();
    let mut grad = vec![0.0; len];
    let mut loss = 0.0;
    for (g, l) in parts {
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
        loss += l;
    }
    let k = batch.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= k);
    (grad, loss / k)
}

/// One Adam step on the Monte-Carlo critic loss; returns the pre-step loss.
#[allow(clippy::too_many_arguments)]
pub fn mc_pe_gradient_step(
    batch: &[Trajectory],
    critic: &mut MlpCritic,
    adam: &mut AdamState,
    entropy: &EntropyFn,
    gamma: f64,
    rule: &QuadratureRule,
    returns: &ReturnModel,
    lr: f64,
) -> f64 {
    let (grad, loss) = mc_critic_gradient(batch, critic, entropy, gamma, rule, returns);
    adam.step(critic.net.params_mut(), &grad, lr);
    loss
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgEstimate {
    pub grad: Vec<f64>,
    /// Per-episode contributions when requested.
    pub per_episode: Option<Vec<Vec<f64>>>,
}

/// One episode's contribution to the policy gradient.
pub fn policy_gradient_one<P, C>(
    inst: &NetworkInstance,
    traj: &Trajectory,
    critic: &C,
    policy: &P,
    gamma: f64,
    rule: &QuadratureRule,
    out: &mut [f64],
) where
    P: DifferentiablePolicy + ?Sized,
    C: Critic + ?Sized,
{
    for l in 1..=traj.len() {
        let rec = &traj.records[l - 1];
        let before = traj.state_before(l - 1);
        let shadow = critic.value(rec.tau, &rec.state) - critic.value(rec.tau, before) + rec.reward;
        policy.grad_log_prob(
            rec.tau,
            before,
            inst.available(before),
            rec.assortment,
            shadow,
            out,
        );
    }
    if gamma != 0.0 {
        for (t1, t2, x) in traj.intervals() {
            let avail = inst.available(x);
            if avail.is_empty() || t2 <= t1 {
                continue;
            }
            for (s, w) in rule.mapped(t1, t2) {
                policy.grad_entropy(s, x, avail, gamma * w, out);
            }
        }
    }
}

/// Batch-mean policy-gradient estimate.
pub fn policy_gradient<P, C>(
    inst: &NetworkInstance,
    batch: &[Trajectory],
    critic: &C,
    policy: &P,
    gamma: f64,
    rule: &QuadratureRule,
    keep_per_episode: bool,
) -> PgEstimate
where
    P: DifferentiablePolicy + ?Sized,
    C: Critic + ?Sized,
{
    let len = policy.num_params();
    let parts: Vec<Vec<f64>> = batch
        .par_iter()
        .map(|traj| {
            let mut g = vec![0.0; len];
            policy_gradient_one(inst, traj, critic, policy, gamma, rule, &mut g);
            g
        })
        .collect();
    let mut grad = vec![0.0; len];
    for g in &parts {
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let k = batch.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= k);
    PgEstimate {
        grad,
        per_episode: keep_per_episode.then_some(parts),
    }
}

/// How the critic is represented and fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CriticConfig {
    /// Polynomial-in-time, affine-in-state basis fitted in closed form per batch.
    Linear {
        degree: usize,
        #[serde(default)]
        method: PeMethod,
        #[serde(default)]
        ridge: Option<f64>,
    },
    /// MLP on `(t/T, x/c)`, one Adam step per batch.
    Mlp { hidden: Vec<usize>, lr: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeMethod {
    #[default]
    MonteCarlo,
    Td0,
}

/// Trainable policy family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PolicyConfig {
    LinearPair { degree: usize },
    LinearRo { degree: usize },
    BernoulliNn { hidden: Vec<usize> },
}

impl PolicyConfig {
    /// Initial policy: zero scores for the linear families, zero output layer for the network.
    pub fn build(&self, inst: &NetworkInstance, gamma: f64, seed: u64) -> ParamPolicy {
        match self {
            PolicyConfig::LinearPair { degree } => ParamPolicy::Pair(LinearPairPolicy::new(
                inst.n(),
                *degree,
                gamma,
                inst.horizon(),
            )),
            PolicyConfig::LinearRo { degree } => {
                ParamPolicy::Ro(LinearRoPolicy::new(inst, *degree, gamma))
            }
            PolicyConfig::BernoulliNn { hidden } => {
                let mut rng = RngStream::new(seed).child(ACTOR_INIT_STREAM);
                ParamPolicy::Nn(BernoulliNnPolicy::new(inst, hidden, gamma, &mut rng))
            }
        }
    }
}

/// Entropy-weight schedule over training progress.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GammaSchedule {
    #[default]
    Constant,
    /// Linear interpolation from the configured gamma to `end` over all updates.
    Linear { end: f64 },
}

impl GammaSchedule {
    pub fn at(&self, gamma: f64, update: usize, total: usize) -> f64 {
        match *self {
            GammaSchedule::Constant => gamma,
            GammaSchedule::Linear { end } => {
                let frac = if total <= 1 {
                    0.0
                } else {
                    update as f64 / (total - 1) as f64
                };
                gamma + (end - gamma) * frac
            }
        }
    }
}

fn default_order() -> usize {
    8
}
fn default_eval_paths() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episodes: usize,
    pub batch: usize,
    pub gamma: f64,
    pub lr_phi: f64,
    pub critic: CriticConfig,
    pub policy: PolicyConfig,
    pub seed: u64,
    #[serde(default = "default_order")]
    pub quadrature_order: usize,
    /// Episodes between learning-curve points; 0 records only the start and end.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "default_eval_paths")]
    pub eval_paths: usize,
    #[serde(default)]
    pub gamma_schedule: GammaSchedule,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        let bad = |m: &str| Err(LearnError::Config(m.to_string()));
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return bad("gamma must be positive");
        }
        if !(self.lr_phi >= 0.0) {
            return bad("lr_phi must be nonnegative");
        }
        if self.quadrature_order == 0 {
            return bad("quadrature_order must be positive");
        }
        if self.eval_paths < 2 {
            return bad("eval_paths must be at least 2");
        }
        if let CriticConfig::Mlp { hidden, lr } = &self.critic {
            if hidden.contains(&0) || !(*lr >= 0.0) {
                return bad("critic network widths and learning rate must be positive");
            }
        }
        if let PolicyConfig::BernoulliNn { hidden } = &self.policy {
            if hidden.contains(&0) {
                return bad("actor network widths must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: usize,
    pub avg_revenue: f64,
    pub ci99: f64,
    pub wallclock_s: f64,
}

/// The critic left at the end of training.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedCritic {
    Linear(LinearCritic),
    Mlp(MlpCritic),
}

impl Critic for TrainedCritic {
    fn value(&self, t: f64, x: &[u32]) -> f64 {
        match self {
            TrainedCritic::Linear(c) => c.value(t, x),
            TrainedCritic::Mlp(c) => c.value(t, x),
        }
    }
}

impl TrainedCritic {
    pub fn params(&self) -> &[f64] {
        match self {
            TrainedCritic::Linear(c) => &c.theta,
            TrainedCritic::Mlp(c) => c.net.params(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<P> {
    pub policy: P,
    pub critic: TrainedCritic,
    pub curve: Vec<CurvePoint>,
    pub updates: usize,
}

/// State reported to the observer after every update.
pub struct Progress<'a> {
    pub update: usize,
    pub episode: usize,
    pub policy_params: &'a [f64],
    pub critic_params: &'a [f64],
}

pub(crate) const TRAIN_STREAM: u64 = 0x7472_6169_6e00;
pub(crate) const EVAL_STREAM: u64 = 0x6576_616c_0000;
pub(crate) const ACTOR_INIT_STREAM: u64 = 0x6163_746f_7200;
pub(crate) const CRITIC_INIT_STREAM: u64 = 0x6372_6974_6963;

pub(crate) fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Curve recorder shared by the training loops.
pub(crate) struct CurveRecorder {
    start: Instant,
    every: usize,
    next: usize,
    pub points: Vec<CurvePoint>,
}

impl CurveRecorder {
    pub fn new(every: usize) -> Self {
        CurveRecorder {
            start: Instant::now(),
            every,
            next: 0,
            points: Vec::new(),
        }
    }

    /// Whether a point is due at `episode` (always at the start and at `last`).
    pub fn due(&mut self, episode: usize, last: usize) -> bool {
        let due = episode >= self.next || episode == last;
        if due && self.every > 0 {
            while self.next <= episode {
                self.next += self.every;
            }
        } else if due {
            self.next = usize::MAX;
        }
        due && self.points.last().is_none_or(|p| p.episode != episode)
    }

    pub fn push(&mut self, episode: usize, mean: f64, ci99: f64) {
        self.points.push(CurvePoint {
            episode,
            avg_revenue: mean,
            ci99,
            wallclock_s: self.start.elapsed().as_secs_f64(),
        });
    }
}

/// Actor-critic training: batch rollout, policy evaluation, policy gradient,
/// Adam ascent on the policy parameters, every `batch` episodes.
pub fn train_actor_critic<P>(
    inst: &NetworkInstance,
    policy: P,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&Progress),
) -> Result<TrainOutcome<P>, LearnError>
where
    P: DifferentiablePolicy + Clone,
{
    config.validate()?;
    let mut policy = policy;
    let rule = QuadratureRule::gauss_legendre(config.quadrature_order);
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
    let last_episode = updates * config.batch;
    let record = |episode: usize, policy: &P, curve: &mut CurveRecorder| {
        if curve.due(episode, last_episode) {
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
        let gamma = config.gamma_schedule.at(config.gamma, update, updates);
        policy.set_gamma(gamma);
        let batch = roll_batch(inst, &policy, config.batch, &train_rng.child(update as u64));
        let entropy = policy_entropy(inst, &policy);
        match (&config.critic, &mut critic) {
            (CriticConfig::Linear { method, ridge, .. }, TrainedCritic::Linear(c)) => {
                let pe = match method {
                    PeMethod::MonteCarlo => mc_pe(&batch, &c.basis, &entropy, gamma, &rule)?,
                    PeMethod::Td0 => td0_pe(&batch, &c.basis, &entropy, gamma, &rule, *ridge)?,
                };
                c.theta = pe.theta;
            }
            (CriticConfig::Mlp { lr, .. }, TrainedCritic::Mlp(c)) => {
                mc_pe_gradient_step(
                    &batch,
                    c,
                    &mut critic_adam,
                    &entropy,
                    gamma,
                    &rule,
                    &ReturnModel::jumps_only(),
                    *lr,
                );
            }
            _ => unreachable!("critic state matches its configuration"),
        }
        drop(entropy);
        if !all_finite(critic.params()) {
            return Err(LearnError::NonFinite {
                update,
                stage: "critic parameters",
            });
        }
        let pg = policy_gradient(inst, &batch, &critic, &policy, gamma, &rule, false);
        if !all_finite(&pg.grad) {
            return Err(LearnError::NonFinite {
                update,
                stage: "policy gradient",
            });
        }
        let mut params = policy.params().to_vec();
        actor_adam.ascend(&mut params, &pg.grad, config.lr_phi);
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
    policy.set_gamma(
        config
            .gamma_schedule
            .at(config.gamma, updates.saturating_sub(1), updates),
    );
    Ok(TrainOutcome {
        policy,
        critic,
        curve: curve.points,
        updates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::experiment_one;
    use crate::model::{ArrivalRate, Assortment, SegmentedMnl};
    use crate::policy::UniformPolicy;
    use crate::simulate::JumpRecord;

    fn no_entropy(_: f64, _: &[u32]) -> f64 {
        0.0
    }

    fn zero_capacity_instance() -> NetworkInstance {
        NetworkInstance::new(
            vec![vec![1, 1]],
            vec![2.0, 3.0],
            vec![0],
            4.0,
            ArrivalRate::constant(1.0, 4.0).unwrap(),
            SegmentedMnl::single(vec![1.0, 1.0], 1.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_sales_give_zero_value() {
        let inst = zero_capacity_instance();
        let batch = roll_batch(&inst, &UniformPolicy, 5, &RngStream::new(2));
        let basis = PolyBasis::new(1, 2, inst.horizon());
        let rule = QuadratureRule::default();
        let mc = mc_pe(&batch, &basis, &no_entropy, 0.0, &rule).unwrap();
        let td = td0_pe(&batch, &basis, &no_entropy, 0.0, &rule, None).unwrap();
        assert!(mc.theta.iter().all(|v| v.abs() < 1e-14));
        assert!(td.theta.iter().all(|v| *v == 0.0));
        assert!(matches!(
            mc_pe(&[], &basis, &no_entropy, 0.0, &rule),
            Err(LearnError::EmptyBatch)
        ));
    }

    #[test]
    fn single_state_entropy_toy_recovers_linear_value() {
        // Only entropy accrues, so J(t) = gamma * h0 * (T - t) = gamma * h0 * T * u.
        let horizon = 3.0;
        let (gamma, h0) = (0.2, 0.7);
        let batch = vec![Trajectory::new(vec![0], horizon); 3];
        let entropy = move |_: f64, _: &[u32]| h0;
        let rule = QuadratureRule::default();
        for d in 1..=3 {
            let basis = PolyBasis::new(1, d, horizon);
            let mut expected = vec![0.0; basis.dim()];
            expected[1] = gamma * h0 * horizon;
            let mc = mc_pe(&batch, &basis, &entropy, gamma, &rule).unwrap();
            let td = td0_pe(&batch, &basis, &entropy, gamma, &rule, None).unwrap();
            for i in 0..basis.dim() {
                assert!(
                    (mc.theta[i] - expected[i]).abs() < 1e-8,
                    "mc d={d} {:?}",
                    mc.theta
                );
                assert!(
                    (td.theta[i] - mc.theta[i]).abs() < 1e-6,
                    "td d={d} {:?}",
                    td.theta
                );
            }
        }
    }

    #[test]
    fn mc_moments_match_direct_quadrature() {
        // b_{phi,h} = int phi(t, X_t) h(t) dt with h the realized return-to-go.
        let inst = experiment_one();
        let traj = crate::simulate::roll_episode(&inst, &UniformPolicy, &mut RngStream::new(8));
        assert!(traj.len() >= 2);
        let basis = PolyBasis::new(2, 2, inst.horizon());
        let gamma = 0.3;
        let entropy = policy_entropy(&inst, &UniformPolicy);
        let rule = QuadratureRule::gauss_legendre(16);
        let (_, b) = mc_pe_moments(std::slice::from_ref(&traj), &basis, &entropy, gamma, &rule);
        // Brute force on a fine midpoint grid.
        let n = 300_000;
        let dt = inst.horizon() / n as f64;
        let state_at = |t: f64| {
            let mut x = traj.x0.clone();
            for r in &traj.records {
                if r.tau <= t {
                    x = r.state.clone();
                }
            }
            x
        };
        let mut ent_tail = vec![0.0; n + 1];
        for k in (0..n).rev() {
            let t = (k as f64 + 0.5) * dt;
            ent_tail[k] = ent_tail[k + 1] + entropy(t, &state_at(t)) * dt;
        }
        let mut brute = vec![0.0; basis.dim()];
        for k in 0..n {
            let t = (k as f64 + 0.5) * dt;
            let x = state_at(t);
            let rewards: f64 = traj
                .records
                .iter()
                .filter(|r| r.tau > t)
                .map(|r| r.reward)
                .sum();
            let h = rewards + gamma * ent_tail[k];
            for (o, p) in brute.iter_mut().zip(basis.eval(t, &x)) {
                *o += p * h * dt;
            }
        }
        for i in 0..basis.dim() {
            assert!(
                (b[i] - brute[i]).abs() < 1e-3 * brute[i].abs().max(1.0),
                "{i}: {} vs {}",
                b[i],
                brute[i]
            );
        }
    }

    #[test]
    fn linear_network_critic_gradient_matches_quadratic_loss() {
        let inst = experiment_one();
        let basis = PolyBasis::new(2, 2, inst.horizon());
        let rule = QuadratureRule::default();
        let gamma = 0.05;
        let entropy = policy_entropy(&inst, &UniformPolicy);
        let batch = roll_batch(&inst, &UniformPolicy, 6, &RngStream::new(3));
        let (m, b) = mc_pe_moments(&batch, &basis, &entropy, gamma, &rule);
        let mut rng = RngStream::new(4);
        let mut net = Mlp::zeros(&[basis.dim(), 1]);
        for p in net.params_mut() {
            *p = rng.uniform() - 0.5;
        }
        let theta = DVector::from_column_slice(&net.params()[..basis.dim()]);
        let bias = net.params()[basis.dim()];
        let critic = MlpCritic::new(net, CriticFeatures::Poly(basis.clone()));
        let (grad, _) = mc_critic_gradient(
            &batch,
            &critic,
            &entropy,
            gamma,
            &rule,
            &ReturnModel::jumps_only(),
        );
        // With J = theta . phi + bias, and phi_0 = 1, the bias acts as an extra
        // constant coordinate: grad_theta = M theta' - b, theta' = theta + bias e_0.
        let mut shifted = theta.clone();
        shifted[0] += bias;
        let expected = &m * &shifted - &b;
        for i in 0..basis.dim() {
            assert!(
                (grad[i] - expected[i]).abs() < 1e-9 * expected[i].abs().max(1.0),
                "{i}: {} vs {}",
                grad[i],
                expected[i]
            );
        }
        assert!((grad[basis.dim()] - expected[0]).abs() < 1e-9 * expected[0].abs().max(1.0));
    }

    #[test]
    fn critic_loss_decreases_on_fixed_batch() {
        let inst = experiment_one();
        let rule = QuadratureRule::default();
        let entropy = policy_entropy(&inst, &UniformPolicy);
        let batch = roll_batch(&inst, &UniformPolicy, 20, &RngStream::new(5));
        let features = CriticFeatures::Scaled {
            horizon: inst.horizon(),
            capacity: inst.capacity().to_vec(),
        };
        let mut critic = MlpCritic::new(Mlp::new(&[3, 8, 8, 1], &mut RngStream::new(6)), features);
        let mut adam = AdamState::new(critic.net.num_params());
        let returns = ReturnModel::jumps_only();
        let losses: Vec<f64> = (0..100)
            .map(|_| {
                mc_pe_gradient_step(
                    &batch,
                    &mut critic,
                    &mut adam,
                    &entropy,
                    0.01,
                    &rule,
                    &returns,
                    1e-2,
                )
            })
            .collect();
        assert!(
            losses[99] < 0.5 * losses[5],
            "{} vs {}",
            losses[99],
            losses[5]
        );
        let rises = losses[5..].windows(2).filter(|w| w[1] > w[0]).count();
        assert!(rises < 10, "{rises} increases");
        let before = critic.net.params().to_vec();
        mc_pe_gradient_step(
            &batch,
            &mut critic,
            &mut adam,
            &entropy,
            0.01,
            &rule,
            &returns,
            0.0,
        );
        assert_eq!(before, critic.net.params());
    }

    struct ConstCritic(f64);
    impl Critic for ConstCritic {
        fn value(&self, _: f64, _: &[u32]) -> f64 {
            self.0
        }
    }

    #[test]
    fn zero_rewards_and_flat_critic_give_zero_gradient() {
        let inst = experiment_one();
        let mut traj = Trajectory::new(vec![5, 5], inst.horizon());
        traj.records.push(JumpRecord {
            tau: 1.0,
            state: vec![4, 5],
            assortment: Assortment::full(3),
            product: 0,
            reward: 0.0,
        });
        let policy = LinearPairPolicy::new(3, 2, 0.1, inst.horizon());
        let pg = policy_gradient(
            &inst,
            &[traj],
            &ConstCritic(3.0),
            &policy,
            0.0,
            &QuadratureRule::default(),
            false,
        );
        assert!(pg.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn gradient_is_invariant_to_critic_shift_and_score_shift() {
        let inst = experiment_one();
        let mut rng = RngStream::new(10);
        let mut policy = LinearRoPolicy::new(&inst, 2, 0.5);
        let params: Vec<f64> = (0..policy.num_params())
            .map(|_| rng.uniform() - 0.5)
            .collect();
        policy.set_params(&params);
        let batch = roll_batch(&inst, &policy, 8, &RngStream::new(11));
        let rule = QuadratureRule::default();
        let critic = LinearCritic::new(
            PolyBasis::new(2, 1, inst.horizon()),
            vec![0.3, -0.1, 0.2, 0.05, 0.1, 0.0],
        );
        let base = policy_gradient(&inst, &batch, &critic, &policy, 0.05, &rule, false).grad;
        let mut shifted_critic = critic.clone();
        shifted_critic.theta[0] += 4.0;
        let a = policy_gradient(&inst, &batch, &shifted_critic, &policy, 0.05, &rule, false).grad;
        // Adding a constant to every score: phi_{k,0} += c for all k.
        let mut shifted_policy = policy.clone();
        let mut p2 = params.clone();
        for k in 0..policy.sets().len() {
            p2[k * 3] += 0.7;
        }
        shifted_policy.set_params(&p2);
        let b = policy_gradient(&inst, &batch, &critic, &shifted_policy, 0.05, &rule, false).grad;
        for i in 0..base.len() {
            assert!((a[i] - base[i]).abs() < 1e-10 * base[i].abs().max(1.0));
            assert!((b[i] - base[i]).abs() < 1e-10 * base[i].abs().max(1.0));
        }
    }

    fn small_config(episodes: usize) -> TrainConfig {
        TrainConfig {
            episodes,
            batch: 10,
            gamma: 2e-3,
            lr_phi: 1e-5,
            critic: CriticConfig::Linear {
                degree: 2,
                method: PeMethod::MonteCarlo,
                ridge: None,
            },
            policy: PolicyConfig::LinearPair { degree: 2 },
            seed: 1,
            quadrature_order: 8,
            eval_every: 0,
            eval_paths: 50,
            gamma_schedule: GammaSchedule::Constant,
        }
    }

    #[test]
    fn fewer_episodes_than_batch_makes_no_update() {
        let inst = experiment_one();
        let config = small_config(5);
        let policy = config.policy.build(&inst, config.gamma, config.seed);
        let out = train_actor_critic(&inst, policy.clone(), &config, &mut |_| {}).unwrap();
        assert_eq!(out.updates, 0);
        assert_eq!(out.policy.params(), policy.params());
        assert_eq!(out.curve.len(), 1);
    }

    #[test]
    fn short_training_runs_are_reproducible() {
        let inst = experiment_one();
        let mut config = small_config(200);
        config.eval_every = 100;
        let run = || {
            let policy = config.policy.build(&inst, config.gamma, config.seed);
            train_actor_critic(&inst, policy, &config, &mut |_| {}).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.updates, 20);
        assert_eq!(a.policy.params(), b.policy.params());
        assert_eq!(
            a.curve.iter().map(|p| p.episode).collect::<Vec<_>>(),
            vec![0, 100, 200]
        );
        assert_eq!(a.curve[2].avg_revenue, b.curve[2].avg_revenue);
        assert!(a.policy.params().iter().any(|p| *p != 0.0));
    }

    #[test]
    fn td_critic_and_network_actor_train() {
        let inst = experiment_one();
        let mut config = small_config(100);
        config.critic = CriticConfig::Linear {
            degree: 2,
            method: PeMethod::Td0,
            ridge: Some(1e-8),
        };
        let policy = config.policy.build(&inst, config.gamma, 3);
        assert!(train_actor_critic(&inst, policy, &config, &mut |_| {}).is_ok());
        config.critic = CriticConfig::Mlp {
            hidden: vec![8],
            lr: 1e-3,
        };
        config.policy = PolicyConfig::BernoulliNn { hidden: vec![8] };
        let policy = config.policy.build(&inst, config.gamma, 3);
        let mut seen = 0;
        let out = train_actor_critic(&inst, policy, &config, &mut |p| seen = p.update + 1).unwrap();
        assert_eq!(seen, 10);
        assert!(all_finite(out.critic.params()));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut config = small_config(10);
        config.batch = 0;
        assert!(matches!(config.validate(), Err(LearnError::Config(_))));
        let mut config = small_config(10);
        config.gamma = f64::NAN;
        assert!(config.validate().is_err());
    }

    #[test]
    fn gamma_schedule_interpolates() {
        let s = GammaSchedule::Linear { end: 0.0 };
        assert_eq!(s.at(1.0, 0, 11), 1.0);
        assert!((s.at(1.0, 5, 11) - 0.5).abs() < 1e-15);
        assert_eq!(GammaSchedule::Constant.at(0.3, 7, 11), 0.3);
    }
}
