//! Acceptance suite. Runs every criterion in sequence (so wallclock limits are
//! measured without competing work), prints one PASS/FAIL line each, and exits
//! nonzero if any fails.
//!
//! `ACCEPTANCE_FILTER=dp,queue` (or positional arguments) restricts the run to
//! criteria whose id contains one of the given substrings.

use std::process::ExitCode;
use std::time::Instant;

use intensity_rl::baselines::a2c::{train_a2c, A2cConfig};
use intensity_rl::baselines::{evaluate, solve_cdlp, solve_dp, CdlpPolicy, EvalReport};
use intensity_rl::instances::{bursty, experiment_one, experiment_two};
use intensity_rl::learn::{
    mc_pe, policy_entropy, policy_gradient, td0_pe, train_actor_critic, CriticConfig,
    GammaSchedule, PeMethod, PolicyConfig, TrainConfig,
};
use intensity_rl::model::{Assortment, NetworkInstance, RateProfile, SegmentedMnl};
use intensity_rl::policy::{
    BernoulliNnPolicy, GreedyPolicy, LinearPairPolicy, LinearRoPolicy, UniformPolicy,
};
use intensity_rl::queueing::{
    best_threshold, evaluate_queue, solve_queue_dp, train_queue_actor_critic, QueueInstance,
    QueueTrainConfig, UniformAdmission,
};
use intensity_rl::simulate::roll_batch;
use intensity_rl::tinynn::{Mlp, Tape};
use intensity_rl::value::{Critic, LinearCritic, PolyBasis, QuadratureRule};
use intensity_rl::{ArrivalRate, DifferentiablePolicy, Policy, RngStream, Trajectory};

const EVAL_PATHS: usize = 100_000;

/// Seed for the queue actor-critic run; see the decisions ledger for the sweep.
const QUEUE_SEED: u64 = 2;
/// Entropy weight, actor step size and per-interval quadrature order for the
/// bursty CT/DT comparison.
const BURSTY_GAMMA: f64 = 1.0;
const BURSTY_LR: f64 = 1e-3;
const BURSTY_ORDER: usize = 4;

struct Suite {
    filters: Vec<String>,
    failed: Vec<String>,
    ran: usize,
}

impl Suite {
    fn wants(&self, id: &str) -> bool {
        self.filters.is_empty() || self.filters.iter().any(|f| id.contains(f.as_str()))
    }

    fn record(&mut self, id: &str, pass: bool, detail: String) {
        self.ran += 1;
        println!("{} {id}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id.to_string());
        }
    }

    fn run(&mut self, id: &str, f: impl FnOnce() -> (bool, String)) {
        if self.wants(id) {
            let start = Instant::now();
            let (pass, detail) = f();
            self.record(
                id,
                pass,
                format!("{detail} [{:.1}s]", start.elapsed().as_secs_f64()),
            );
        }
    }
}

fn main() -> ExitCode {
    let mut filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    if let Ok(v) = std::env::var("ACCEPTANCE_FILTER") {
        filters.extend(v.split(',').filter(|s| !s.is_empty()).map(str::to_string));
    }
    let mut suite = Suite {
        filters,
        failed: Vec::new(),
        ran: 0,
    };

    suite.run("c1-dp-experiment-one", dp_experiment_one);
    suite.run("c2-baselines-experiment-one", baselines_experiment_one);
    suite.run("c3-cdlp-experiment-two", cdlp_experiment_two);
    suite.run("c4-linear-pair-experiment-one", linear_pair_experiment_one);
    if suite.wants("c5-queue") {
        for (id, pass, detail) in queue_suite() {
            suite.record(&id, pass, detail);
        }
    }
    suite.run("c6-ct-vs-dt-bursty", ct_vs_dt_bursty);
    suite.run("c7a-closed-form-integrals", closed_form_integrals);
    suite.run("c7b-policy-gradients-fd", policy_gradients_fd);
    suite.run("c7b-mlp-gradients-fd", mlp_gradients_fd);
    suite.run("c7c-martingale-orthogonality", martingale_orthogonality);
    suite.run("c7d-policy-gradient-fd-tiny", policy_gradient_tiny);
    suite.run("c7e-pe-vs-ode-oracle", pe_vs_ode_oracle);
    suite.run(
        "c7f-simulator-vs-discrete-oracle",
        simulator_vs_discrete_oracle,
    );
    suite.run("smoke-experiment-two-training", smoke_experiment_two);

    println!(
        "acceptance: {} run, {} passed, {} failed",
        suite.ran,
        suite.ran - suite.failed.len(),
        suite.failed.len()
    );
    if suite.failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", suite.failed.join(", "));
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------------------
// Independent oracles

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration on P_n.
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let step = p1 / dp;
            x -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

fn mapped(rule: &[(f64, f64)], a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
    let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
    rule.iter().map(move |(x, w)| (mid + half * x, half * w))
}

/// Segmented-MNL purchase probabilities computed from the raw segment data.
fn mnl_probs(inst: &NetworkInstance, s: Assortment) -> Vec<f64> {
    let mut probs = vec![0.0; inst.n()];
    for seg in inst.choice().segments() {
        let offered: Vec<(usize, f64)> = seg
            .products
            .iter()
            .zip(&seg.weights)
            .filter(|(j, _)| s.contains(**j))
            .map(|(j, w)| (*j, *w))
            .collect();
        let denom = seg.no_purchase_weight + offered.iter().map(|(_, w)| w).sum::<f64>();
        for (j, w) in offered {
            probs[j] += seg.share * w / denom;
        }
    }
    probs
}

fn available(inst: &NetworkInstance, x: &[u32]) -> Assortment {
    let mut a = Assortment::EMPTY;
    for j in 0..inst.n() {
        if (0..inst.m()).all(|i| inst.consumption(i, j) <= x[i]) {
            a.insert(j);
        }
    }
    a
}

fn after_sale(inst: &NetworkInstance, x: &[u32], j: usize) -> Vec<u32> {
    (0..inst.m())
        .map(|i| x[i] - inst.consumption(i, j))
        .collect()
}

/// All states `0 <= x <= c` in mixed-radix order (first coordinate fastest).
fn all_states(c: &[u32]) -> Vec<Vec<u32>> {
    let mut out = vec![vec![]];
    for &ci in c {
        out = out
            .into_iter()
            .flat_map(|prefix: Vec<u32>| {
                (0..=ci).map(move |v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect();
    }
    for s in out.iter_mut() {
        s.reverse();
    }
    out
}

fn state_index(c: &[u32], x: &[u32]) -> usize {
    let mut idx = 0;
    for i in (0..c.len()).rev() {
        idx = idx * (c[i] as usize + 1) + x[i] as usize;
    }
    idx
}

/// `J(0, c; pi)` by explicit Euler on the backward Kolmogorov equation of a
/// time-homogeneous policy, including the entropy bonus.
fn ode_value<P: Policy + ?Sized>(inst: &NetworkInstance, policy: &P, gamma: f64, dt: f64) -> f64 {
    let c = inst.capacity();
    let states = all_states(c);
    // Per state: (product, rate factor) pairs and the entropy rate.
    let tables: Vec<(Vec<(usize, f64)>, f64)> = states
        .iter()
        .map(|x| {
            let avail = available(inst, x);
            let mut rates = vec![0.0; inst.n()];
            for s in avail.subsets() {
                let pi = policy.log_prob(0.0, x, avail, s).exp();
                if pi > 0.0 {
                    for (j, p) in mnl_probs(inst, s).into_iter().enumerate() {
                        rates[j] += pi * p;
                    }
                }
            }
            let pairs = rates
                .into_iter()
                .enumerate()
                .filter(|(_, r)| *r > 0.0)
                .collect();
            (pairs, gamma * policy.entropy(0.0, x, avail))
        })
        .collect();
    let steps = (inst.horizon() / dt).round() as usize;
    let mut v = vec![0.0; states.len()];
    let mut next = v.clone();
    for k in (0..steps).rev() {
        let lam = inst.arrival().evaluate(k as f64 * dt);
        for (i, x) in states.iter().enumerate() {
            let (pairs, ent) = &tables[i];
            let mut drift = *ent;
            for &(j, r) in pairs {
                let y = after_sale(inst, x, j);
                drift += lam * r * (inst.prices()[j] + v[state_index(c, &y)] - v[i]);
            }
            next[i] = v[i] + dt * drift;
        }
        std::mem::swap(&mut v, &mut next);
    }
    v[state_index(c, c)]
}

fn combined_se(a: &EvalReport, b: &EvalReport) -> f64 {
    (a.se().powi(2) + b.se().powi(2)).sqrt()
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol
}

// ---------------------------------------------------------------------------
// 1-3: exact and static baselines

fn dp_experiment_one() -> (bool, String) {
    let inst = experiment_one();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let start = Instant::now();
    let sol = pool.install(|| solve_dp(&inst, 0.001)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let v = sol.value(0, &[5, 5]);
    (
        within(v, 8.934, 0.005) && secs < 60.0,
        format!(
            "V*(0,(5,5)) = {v:.4} (target 8.934 +- 0.005), {secs:.1}s single-threaded (limit 60s)"
        ),
    )
}

fn baselines_experiment_one() -> (bool, String) {
    let inst = experiment_one();
    let start = Instant::now();
    let rng = RngStream::new(20_001);
    let uniform = evaluate(&inst, &UniformPolicy, "uniform", EVAL_PATHS, &rng.child(1));
    let greedy = evaluate(
        &inst,
        &GreedyPolicy::new(&inst),
        "greedy",
        EVAL_PATHS,
        &rng.child(2),
    );
    let sol = solve_cdlp(&inst).unwrap();
    let cdlp = evaluate(
        &inst,
        &CdlpPolicy::new(&sol),
        "cdlp",
        EVAL_PATHS,
        &rng.child(3),
    );
    let secs = start.elapsed().as_secs_f64();
    let pass = within(uniform.mean, 7.589, 0.08)
        && within(greedy.mean, 8.483, 0.08)
        && within(cdlp.mean, 8.545, 0.10)
        && secs < 120.0;
    (
        pass,
        format!(
            "uniform {:.3} (7.589 +- 0.08), greedy {:.3} (8.483 +- 0.08), cdlp {:.3} (8.545 +- 0.10), {secs:.1}s (limit 120s)",
            uniform.mean, greedy.mean, cdlp.mean
        ),
    )
}

fn cdlp_experiment_two() -> (bool, String) {
    let inst = experiment_two();
    let start = Instant::now();
    let sol = solve_cdlp(&inst).unwrap();
    let secs = start.elapsed().as_secs_f64();
    (
        within(sol.objective, 708.0, 1.0) && secs < 10.0,
        format!(
            "z = {:.3} (708 +- 1) over {} columns, {secs:.2}s (limit 10s)",
            sol.objective,
            (1usize << inst.n()) - 1
        ),
    )
}

// ---------------------------------------------------------------------------
// 4: Linear-Pair training on the small network

fn linear_pair_config(
    seed: u64,
    episodes: usize,
    gamma: f64,
    lr: f64,
    degree: usize,
) -> TrainConfig {
    TrainConfig {
        episodes,
        batch: 10,
        gamma,
        lr_phi: lr,
        critic: CriticConfig::Linear {
            degree,
            method: PeMethod::MonteCarlo,
            ridge: None,
        },
        policy: PolicyConfig::LinearPair { degree },
        seed,
        quadrature_order: 8,
        eval_every: 0,
        eval_paths: 2000,
        gamma_schedule: GammaSchedule::Constant,
    }
}

fn linear_pair_experiment_one() -> (bool, String) {
    let inst = experiment_one();
    let start = Instant::now();
    let mut passes = 0;
    let mut parts = Vec::new();
    for seed in 1..=4u64 {
        let config = linear_pair_config(seed, 100_000, 2e-3, 1e-5, 2);
        let policy = config.policy.build(&inst, config.gamma, seed);
        let out = train_actor_critic(&inst, policy, &config, &mut |_| {}).unwrap();
        let rep = evaluate(
            &inst,
            &out.policy,
            "linear-pair",
            EVAL_PATHS,
            &RngStream::new(40_000 + seed),
        );
        if rep.mean >= 8.70 {
            passes += 1;
        }
        parts.push(format!("seed {seed}: {:.3} +- {:.3}", rep.mean, rep.ci99));
    }
    let secs = start.elapsed().as_secs_f64();
    (
        passes >= 3 && secs <= 1800.0,
        format!(
            "{passes}/4 seeds >= 8.70 ({}), {secs:.0}s (limit 1800s)",
            parts.join("; ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 5: queue admission control

fn queue_suite() -> Vec<(String, bool, String)> {
    let inst = QueueInstance::reference();
    let mut out = Vec::new();

    let start = Instant::now();
    let dp = solve_queue_dp(&inst, 0.001).unwrap().value(0, 0);
    out.push((
        "c5-queue-dp".to_string(),
        within(dp, 23.997, 0.01),
        format!(
            "V*(0,0) = {dp:.4} (23.997 +- 0.01) [{:.1}s]",
            start.elapsed().as_secs_f64()
        ),
    ));

    let start = Instant::now();
    let rng = RngStream::new(50_001);
    let (k, thr) = best_threshold(&inst, EVAL_PATHS, &rng.child(1));
    out.push((
        "c5-queue-optimal-threshold".to_string(),
        within(thr.mean, 13.358, 0.3),
        format!(
            "threshold {k}: {:.3} +- {:.3} (13.358 +- 0.3) [{:.1}s]",
            thr.mean,
            thr.ci99,
            start.elapsed().as_secs_f64()
        ),
    ));

    let start = Instant::now();
    let uni = evaluate_queue(
        &inst,
        &UniformAdmission {
            capacity: inst.capacity(),
        },
        "uniform",
        EVAL_PATHS,
        &rng.child(2),
    );
    out.push((
        "c5-queue-uniform".to_string(),
        within(uni.mean, 8.603, 0.3),
        format!(
            "{:.3} +- {:.3} (8.603 +- 0.3) [{:.1}s]",
            uni.mean,
            uni.ci99,
            start.elapsed().as_secs_f64()
        ),
    ));

    let config = QueueTrainConfig {
        episodes: 5_000_000,
        batch: 100,
        gamma: 1e-3,
        lr_theta: 3e-2,
        lr_phi: 1e-5,
        actor_hidden: vec![8, 8],
        critic_hidden: vec![8, 8],
        actor_temperature: None,
        seed: QUEUE_SEED,
        quadrature_order: 8,
        eval_every: 0,
        eval_paths: 2000,
    };
    let start = Instant::now();
    let trained = train_queue_actor_critic(&inst, &config, &mut |_, _, _| {}).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let rep = evaluate_queue(
        &inst,
        &trained.actor,
        "queue-mlp",
        EVAL_PATHS,
        &rng.child(3),
    );
    out.push((
        "c5-queue-trained-mlp".to_string(),
        rep.mean >= 23.0 && secs <= 1800.0,
        format!(
            "{:.3} +- {:.3} (>= 23.0) after {} episodes, training {secs:.0}s (limit 1800s)",
            rep.mean, rep.ci99, config.episodes
        ),
    ));
    out
}

// ---------------------------------------------------------------------------
// 6: continuous-time vs discrete-time training on the bursty instance

fn ct_vs_dt_bursty() -> (bool, String) {
    let inst = bursty();
    let episodes = 100_000;
    let seed = 61;
    let mut config = linear_pair_config(seed, episodes, BURSTY_GAMMA, BURSTY_LR, 2);
    config.quadrature_order = BURSTY_ORDER;
    let start = Instant::now();
    let policy = config.policy.build(&inst, config.gamma, seed);
    let ct = train_actor_critic(&inst, policy, &config, &mut |_| {}).unwrap();
    let ct_secs = start.elapsed().as_secs_f64();

    let dt_config = A2cConfig {
        dt: 0.5,
        episodes,
        batch: 10,
        gamma: BURSTY_GAMMA,
        lr_phi: BURSTY_LR,
        beta: 1.0,
        critic: config.critic.clone(),
        policy: config.policy.clone(),
        seed,
        eval_every: 0,
        eval_paths: 2000,
    };
    let start = Instant::now();
    let policy = dt_config.policy.build(&inst, dt_config.gamma, seed);
    let dt = train_a2c(&inst, policy, &dt_config, &mut |_| {}).unwrap();
    let dt_secs = start.elapsed().as_secs_f64();

    let ct_rep = evaluate(&inst, &ct.policy, "ct", EVAL_PATHS, &RngStream::new(60_001));
    let dt_rep = evaluate(&inst, &dt.policy, "dt", EVAL_PATHS, &RngStream::new(60_002));
    let se = combined_se(&ct_rep, &dt_rep);
    let gap = ct_rep.mean - dt_rep.mean;
    (
        gap >= 3.0 * se && ct_secs <= 1.5 * dt_secs,
        format!(
            "CT {:.2} vs DT(0.5) {:.2}: gap {gap:.2} = {:.1} SE (need 3); wallclock CT {ct_secs:.0}s vs DT {dt_secs:.0}s, ratio {:.2} (limit 1.5)",
            ct_rep.mean,
            dt_rep.mean,
            gap / se,
            ct_secs / dt_secs
        ),
    )
}

// ---------------------------------------------------------------------------
// 7a: closed-form interval integrals

fn phi(t: f64, x: &[u32], d: usize, horizon: f64) -> Vec<f64> {
    let u = 1.0 - t / horizon;
    let mut out = Vec::new();
    for i in 0..=x.len() {
        let z = if i == 0 { 1.0 } else { x[i - 1] as f64 };
        for l in 0..=d {
            out.push(z * u.powi(l as i32));
        }
    }
    out
}

fn dphi(t: f64, x: &[u32], d: usize, horizon: f64) -> Vec<f64> {
    let u = 1.0 - t / horizon;
    let mut out = Vec::new();
    for i in 0..=x.len() {
        let z = if i == 0 { 1.0 } else { x[i - 1] as f64 };
        for l in 0..=d {
            out.push(if l == 0 {
                0.0
            } else {
                -z * l as f64 * u.powi(l as i32 - 1) / horizon
            });
        }
    }
    out
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}

fn closed_form_integrals() -> (bool, String) {
    let rule = gauss_legendre(16);
    let mut rng = RngStream::new(70_001);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let horizon = 0.5 + 20.0 * rng.uniform();
        let (a, b) = (rng.uniform() * horizon, rng.uniform() * horizon);
        let (t1, t2) = (a.min(b), a.max(b));
        let m = 1 + (rng.uniform() * 4.0) as usize;
        let d = (rng.uniform() * 5.0) as usize;
        let x: Vec<u32> = (0..m).map(|_| (rng.uniform() * 12.0) as u32).collect();
        let basis = PolyBasis::new(m, d, horizon);
        let w = basis.dim();
        let mut bq = vec![0.0; w];
        let mut dq = vec![0.0; w * w];
        let mut fq = vec![0.0; w * w];
        for (s, wt) in mapped(&rule, t1, t2) {
            let p = phi(s, &x, d, horizon);
            let dp = dphi(s, &x, d, horizon);
            for i in 0..w {
                bq[i] += wt * p[i];
                for j in 0..w {
                    dq[i * w + j] += wt * p[i] * p[j];
                    fq[i * w + j] += wt * p[i] * dp[j];
                }
            }
        }
        let dm = basis.d_bar(t1, t2, &x);
        let fm = basis.f_bar(t1, t2, &x);
        let dflat: Vec<f64> = (0..w * w).map(|k| dm[(k / w, k % w)]).collect();
        let fflat: Vec<f64> = (0..w * w).map(|k| fm[(k / w, k % w)]).collect();
        worst = worst
            .max(max_rel(&basis.b_bar(t1, t2, &x), &bq))
            .max(max_rel(&dflat, &dq))
            .max(max_rel(&fflat, &fq));
    }
    (
        worst <= 1e-12,
        format!("worst relative deviation {worst:.2e} over 1000 cases (limit 1e-12)"),
    )
}

// ---------------------------------------------------------------------------
// 7b: analytic gradients vs central differences

fn random_state(inst: &NetworkInstance, rng: &mut RngStream) -> Vec<u32> {
    inst.capacity()
        .iter()
        .map(|&c| ((rng.uniform() * (c as f64 + 1.0)) as u32).min(c))
        .collect()
}

/// Relative error of an analytic gradient against a central difference.
fn fd_error<P: DifferentiablePolicy + Clone>(
    policy: &P,
    analytic: &[f64],
    f: impl Fn(&P) -> f64,
    h: f64,
) -> f64 {
    let mut fd = vec![0.0; analytic.len()];
    let mut p = policy.clone();
    let base = policy.params().to_vec();
    for i in 0..base.len() {
        let mut v = base.clone();
        v[i] += h;
        p.set_params(&v);
        let up = f(&p);
        v[i] -= 2.0 * h;
        p.set_params(&v);
        let down = f(&p);
        fd[i] = (up - down) / (2.0 * h);
    }
    let scale = fd
        .iter()
        .chain(analytic)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-8);
    fd.iter()
        .zip(analytic)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / scale
}

fn check_policy_family<P: DifferentiablePolicy + Clone>(
    inst: &NetworkInstance,
    make: impl Fn(&mut RngStream) -> P,
    rng: &mut RngStream,
    kinks: bool,
) -> (f64, f64) {
    let (mut worst_log, mut worst_ent) = (0.0f64, 0.0f64);
    let mut done = 0;
    while done < 100 {
        let policy = make(rng);
        let t = rng.uniform() * inst.horizon();
        let x = random_state(inst, rng);
        let avail = available(inst, &x);
        // Drawn from the policy: revenue-ordered families have sparse support.
        let s = policy.sample(t, &x, avail, rng);
        let mut g_log = vec![0.0; policy.num_params()];
        policy.grad_log_prob(t, &x, avail, s, 1.0, &mut g_log);
        let mut g_ent = vec![0.0; policy.num_params()];
        policy.grad_entropy(t, &x, avail, 1.0, &mut g_ent);
        let log_f = |p: &P| p.log_prob(t, &x, avail, s);
        let ent_f = |p: &P| p.entropy(t, &x, avail);
        let e_log = fd_error(&policy, &g_log, log_f, 1e-6);
        let e_ent = fd_error(&policy, &g_ent, ent_f, 1e-6);
        // ReLU networks: a central difference straddling a kink is not a
        // derivative; detect by comparing two step sizes and resample.
        if kinks {
            let coarse_log = fd_error(&policy, &g_log, log_f, 4e-6);
            let coarse_ent = fd_error(&policy, &g_ent, ent_f, 4e-6);
            if (coarse_log - e_log).abs() > 1e-6 || (coarse_ent - e_ent).abs() > 1e-6 {
                continue;
            }
        }
        worst_log = worst_log.max(e_log);
        worst_ent = worst_ent.max(e_ent);
        done += 1;
    }
    (worst_log, worst_ent)
}

fn random_params(len: usize, scale: f64, rng: &mut RngStream) -> Vec<f64> {
    (0..len)
        .map(|_| scale * (2.0 * rng.uniform() - 1.0))
        .collect()
}

fn policy_gradients_fd() -> (bool, String) {
    let one = experiment_one();
    let two = experiment_two();
    let mut rng = RngStream::new(70_002);
    let pair = check_policy_family(
        &one,
        |r| {
            let gamma = 0.2 + 1.8 * r.uniform();
            let mut p = LinearPairPolicy::new(one.n(), 2, gamma, one.horizon());
            p.set_params(&random_params(p.num_params(), 1.0, r));
            p
        },
        &mut rng,
        false,
    );
    let ro = check_policy_family(
        &two,
        |r| {
            let gamma = 0.2 + 1.8 * r.uniform();
            let mut p = LinearRoPolicy::new(&two, 2, gamma);
            p.set_params(&random_params(p.num_params(), 1.0, r));
            p
        },
        &mut rng,
        false,
    );
    let nn = check_policy_family(
        &one,
        |r| {
            let gamma = 0.2 + 1.8 * r.uniform();
            let mut p = BernoulliNnPolicy::new(&one, &[6, 5], gamma, r);
            p.set_params(&random_params(p.num_params(), 0.8, r));
            p
        },
        &mut rng,
        true,
    );
    let worst = [pair.0, pair.1, ro.0, ro.1, nn.0, nn.1]
        .into_iter()
        .fold(0.0, f64::max);
    (
        worst <= 1e-5,
        format!(
            "worst relative error: linear-pair {:.1e}/{:.1e}, linear-ro {:.1e}/{:.1e}, bernoulli-nn {:.1e}/{:.1e} (log-prob/entropy, 100 cases each, limit 1e-5)",
            pair.0, pair.1, ro.0, ro.1, nn.0, nn.1
        ),
    )
}

fn mlp_gradients_fd() -> (bool, String) {
    let mut rng = RngStream::new(70_003);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < 100 {
        let mut widths = vec![1 + (rng.uniform() * 4.0) as usize];
        for _ in 0..1 + (rng.uniform() * 3.0) as usize {
            widths.push(1 + (rng.uniform() * 8.0) as usize);
        }
        widths.push(1 + (rng.uniform() * 3.0) as usize);
        let mut net = Mlp::new(&widths, &mut rng);
        for p in net.params_mut() {
            *p += 0.1 * (2.0 * rng.uniform() - 1.0);
        }
        let input = random_params(widths[0], 2.0, &mut rng);
        let cot = random_params(*widths.last().unwrap(), 1.0, &mut rng);
        let mut tape = Tape::default();
        net.forward_tape(&input, &mut tape).unwrap();
        let mut grad = vec![0.0; net.num_params()];
        net.backward(&tape, &cot, 1.0, &mut grad);
        let f = |n: &Mlp| -> f64 {
            n.forward(&input)
                .unwrap()
                .iter()
                .zip(&cot)
                .map(|(o, c)| o * c)
                .sum()
        };
        let fd_at = |h: f64| -> Vec<f64> {
            let mut n = net.clone();
            (0..net.num_params())
                .map(|i| {
                    let orig = n.params()[i];
                    n.params_mut()[i] = orig + h;
                    let up = f(&n);
                    n.params_mut()[i] = orig - h;
                    let down = f(&n);
                    n.params_mut()[i] = orig;
                    (up - down) / (2.0 * h)
                })
                .collect()
        };
        let fine = fd_at(1e-6);
        let coarse = fd_at(4e-6);
        if max_rel(&fine, &coarse) > 1e-6 {
            continue; // straddles a ReLU kink
        }
        let scale = grad.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        let err = fine
            .iter()
            .zip(&grad)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / scale;
        worst = worst.max(err);
        done += 1;
    }
    (
        worst <= 1e-5,
        format!("worst relative error {worst:.2e} over 100 random networks (limit 1e-5)"),
    )
}

// ---------------------------------------------------------------------------
// 7c: martingale orthogonality of the TD(0) solution

fn martingale_orthogonality() -> (bool, String) {
    let inst = experiment_one();
    let gamma = 2e-3;
    let d = 2;
    let policy = UniformPolicy;
    let entropy = policy_entropy(&inst, &policy);
    let rule = QuadratureRule::gauss_legendre(8);
    let basis = PolyBasis::new(inst.m(), d, inst.horizon());
    let train = roll_batch(&inst, &policy, 100_000, &RngStream::new(70_004));
    let theta = td0_pe(&train, &basis, &entropy, gamma, &rule, None)
        .unwrap()
        .theta;
    let fresh = roll_batch(&inst, &policy, 10_000, &RngStream::new(70_005));

    let horizon = inst.horizon();
    let value = |t: f64, x: &[u32]| -> f64 {
        phi(t, x, d, horizon)
            .iter()
            .zip(&theta)
            .map(|(a, b)| a * b)
            .sum()
    };
    let dvalue = |t: f64, x: &[u32]| -> f64 {
        dphi(t, x, d, horizon)
            .iter()
            .zip(&theta)
            .map(|(a, b)| a * b)
            .sum()
    };
    // Test functions: basis coordinates vanishing at T.
    let coords: Vec<usize> = (0..basis.dim()).filter(|k| k % (d + 1) != 0).collect();
    let gl = gauss_legendre(16);
    let residuals: Vec<Vec<f64>> = fresh
        .iter()
        .map(|traj: &Trajectory| {
            let mut r = vec![0.0; coords.len()];
            for (t1, t2, x) in traj.intervals() {
                if t2 <= t1 {
                    continue;
                }
                let avail = available(&inst, x);
                for (s, w) in mapped(&gl, t1, t2) {
                    let f = phi(s, x, d, horizon);
                    let g = dvalue(s, x) + gamma * policy.entropy(s, x, avail);
                    for (k, &c) in coords.iter().enumerate() {
                        r[k] += w * f[c] * g;
                    }
                }
            }
            for (l, rec) in traj.records.iter().enumerate() {
                let before = traj.state_before(l);
                let f = phi(rec.tau, before, d, horizon);
                let jump = value(rec.tau, &rec.state) - value(rec.tau, before) + rec.reward;
                for (k, &c) in coords.iter().enumerate() {
                    r[k] += f[c] * jump;
                }
            }
            r
        })
        .collect();
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for k in 0..coords.len() {
        let col: Vec<f64> = residuals.iter().map(|r| r[k]).collect();
        let (mean, se) = mean_se(&col);
        let z = if se > 0.0 { mean.abs() / se } else { 0.0 };
        pass &= mean.abs() <= 3.0 * se + 1e-12;
        worst = worst.max(z);
    }
    (
        pass,
        format!(
            "{} test functions, worst |mean|/SE = {worst:.2} (limit 3) on 10^4 fresh episodes",
            coords.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 7d: policy gradient vs finite differences of the exact value

/// One resource, one product, unit capacity.
fn tiny_instance() -> NetworkInstance {
    NetworkInstance::new(
        vec![vec![1]],
        vec![1.0],
        vec![1],
        1.0,
        ArrivalRate::new(RateProfile::Constant { rate: 2.0 }, 1.0).unwrap(),
        SegmentedMnl::single(vec![1.0], 1.0).unwrap(),
    )
    .unwrap()
}

/// Offer probability, purchase rate and entropy of the tiny instance at `x = 1`.
fn tiny_rates(phi0: f64, gamma: f64) -> (f64, f64) {
    let pi = 1.0 / (1.0 + (-phi0 / gamma).exp());
    let ent = -(pi * pi.ln() + (1.0 - pi) * (1.0 - pi).ln());
    (2.0 * pi * 0.5, gamma * ent)
}

/// `J(0, 1)` from a `dt` backward recursion.
fn tiny_value_recursion(phi0: f64, gamma: f64, dt: f64) -> f64 {
    let (a, b) = tiny_rates(phi0, gamma);
    let steps = (1.0 / dt).round() as usize;
    let mut v = 0.0;
    for _ in 0..steps {
        v += dt * (a * (1.0 - v) + b);
    }
    v
}

/// Exact `J(t, x)` of the tiny instance under a fixed parameter.
struct TinyValue {
    a: f64,
    b: f64,
}

impl Critic for TinyValue {
    fn value(&self, t: f64, x: &[u32]) -> f64 {
        if x[0] == 0 {
            0.0
        } else {
            // -J' = a (1 - J) + b, J(1) = 0.
            let k = (self.a + self.b) / self.a;
            k * (1.0 - (-self.a * (1.0 - t)).exp())
        }
    }
}

fn policy_gradient_tiny() -> (bool, String) {
    let inst = tiny_instance();
    let (gamma, phi0) = (0.5, 0.3);
    let mut policy = LinearPairPolicy::new(1, 0, gamma, 1.0);
    policy.set_params(&[phi0]);
    let (a, b) = tiny_rates(phi0, gamma);
    let critic = TinyValue { a, b };
    let rule = QuadratureRule::gauss_legendre(8);
    let mut samples = Vec::with_capacity(1_000_000);
    let root = RngStream::new(70_006);
    for chunk in 0..10u64 {
        let batch = roll_batch(&inst, &policy, 100_000, &root.child(chunk));
        let est = policy_gradient(&inst, &batch, &critic, &policy, gamma, &rule, true);
        samples.extend(est.per_episode.unwrap().into_iter().map(|g| g[0]));
    }
    let (mean, se) = mean_se(&samples);
    let h = 1e-4;
    let dt = 1e-4;
    let fd = (tiny_value_recursion(phi0 + h, gamma, dt)
        - tiny_value_recursion(phi0 - h, gamma, dt))
        / (2.0 * h);
    (
        (mean - fd).abs() <= 3.0 * se,
        format!(
            "estimate {mean:.5} +- {se:.5} (SE) vs finite difference {fd:.5}: {:.2} SE (limit 3)",
            (mean - fd).abs() / se
        ),
    )
}

// ---------------------------------------------------------------------------
// 7e: MC and TD policy evaluation vs the discretized value ODE

fn pe_vs_ode_oracle() -> (bool, String) {
    let inst = experiment_one();
    let rule = QuadratureRule::gauss_legendre(8);
    let basis = PolyBasis::new(inst.m(), 3, inst.horizon());
    let c = inst.capacity().to_vec();
    let mut pass = true;
    let mut parts = Vec::new();
    let greedy = GreedyPolicy::new(&inst);
    let cases: [(&str, &dyn Policy, f64); 2] =
        [("uniform", &UniformPolicy, 2e-3), ("greedy", &greedy, 0.0)];
    for (i, (label, policy, gamma)) in cases.into_iter().enumerate() {
        let oracle = ode_value(&inst, policy, gamma, 1e-3);
        let entropy = policy_entropy(&inst, policy);
        let batch = roll_batch(&inst, policy, 20_000, &RngStream::new(70_007 + i as u64));
        let mc = mc_pe(&batch, &basis, &entropy, gamma, &rule).unwrap();
        let td = td0_pe(&batch, &basis, &entropy, gamma, &rule, None).unwrap();
        let j_mc = LinearCritic::new(basis.clone(), mc.theta).value(0.0, &c);
        let j_td = LinearCritic::new(basis.clone(), td.theta).value(0.0, &c);
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
        let worst = rel(j_mc, oracle)
            .max(rel(j_td, oracle))
            .max(rel(j_mc, j_td));
        pass &= worst <= 0.02;
        parts.push(format!(
            "{label}: ODE {oracle:.4}, MC {j_mc:.4}, TD {j_td:.4} (worst {:.2}%)",
            100.0 * worst
        ));
    }
    (pass, format!("{} (limit 2%)", parts.join("; ")))
}

// ---------------------------------------------------------------------------
// 7f: event-driven simulator vs a discrete-time Bernoulli-arrival simulator

/// Revenue of one path of the `dt`-grid process: at most one arrival per
/// step with probability `lambda(t_k) dt`. Steps between candidate arrivals
/// are skipped geometrically.
fn discrete_path<P: Policy + ?Sized>(
    inst: &NetworkInstance,
    policy: &P,
    dt: f64,
    rng: &mut RngStream,
) -> f64 {
    let steps = (inst.horizon() / dt).round() as u64;
    let lam_max = inst.arrival().max();
    let q = lam_max * dt;
    let mut x = inst.capacity().to_vec();
    let mut k: u64 = 0;
    let mut revenue = 0.0;
    loop {
        let skip = ((1.0 - rng.uniform()).ln() / (1.0 - q).ln()).floor() as u64;
        k += skip;
        if k >= steps {
            break;
        }
        let t = k as f64 * dt;
        k += 1;
        if rng.uniform() * lam_max >= inst.arrival().evaluate(t) {
            continue;
        }
        let avail = available(inst, &x);
        if avail.is_empty() {
            continue;
        }
        let s = policy.sample(t, &x, avail, rng);
        let probs = mnl_probs(inst, s);
        let mut u = rng.uniform();
        for (j, p) in probs.iter().enumerate() {
            if u < *p {
                revenue += inst.prices()[j];
                x = after_sale(inst, &x, j);
                break;
            }
            u -= p;
        }
    }
    revenue
}

/// Worst standardized deviation of per-(bucket, product) sale counts from
/// their compensators `int lambda(s) sum_S pi(S) P_j(S) ds`.
fn jump_rate_deviation<P: Policy + ?Sized>(
    inst: &NetworkInstance,
    policy: &P,
    batch: &[Trajectory],
    cuts: &[f64],
) -> f64 {
    let buckets = cuts.len() - 1;
    let mut counts = vec![vec![0.0; inst.n()]; buckets];
    let mut comp = vec![vec![0.0; inst.n()]; buckets];
    let bucket_of = |t: f64| {
        cuts.windows(2)
            .position(|w| t >= w[0] && t < w[1])
            .unwrap_or(buckets - 1)
    };
    let mut rate_cache = std::collections::HashMap::new();
    for traj in batch {
        for rec in &traj.records {
            counts[bucket_of(rec.tau)][rec.product] += 1.0;
        }
        for (t1, t2, x) in traj.intervals() {
            let rates = rate_cache
                .entry(x.to_vec())
                .or_insert_with(|| {
                    let avail = available(inst, x);
                    let mut r = vec![0.0; inst.n()];
                    for s in avail.subsets() {
                        let pi = policy.log_prob(0.0, x, avail, s).exp();
                        for (j, p) in mnl_probs(inst, s).into_iter().enumerate() {
                            r[j] += pi * p;
                        }
                    }
                    r
                })
                .clone();
            for b in 0..buckets {
                let (a, e) = (t1.max(cuts[b]), t2.min(cuts[b + 1]));
                if e > a {
                    let lam = inst.arrival().integral(a, e);
                    for j in 0..inst.n() {
                        comp[b][j] += lam * rates[j];
                    }
                }
            }
        }
    }
    let mut worst: f64 = 0.0;
    for b in 0..buckets {
        for j in 0..inst.n() {
            if comp[b][j] > 0.0 {
                worst = worst.max((counts[b][j] - comp[b][j]).abs() / comp[b][j].sqrt());
            }
        }
    }
    worst
}

fn simulator_vs_discrete_oracle() -> (bool, String) {
    let mut pass = true;
    let mut parts = Vec::new();
    let cases = [
        (
            "experiment-one",
            experiment_one(),
            vec![0.0, 5.0, 10.0, 15.0],
        ),
        ("bursty", bursty(), vec![0.0, 3.75, 7.5, 8.0, 10.0]),
    ];
    for (i, (label, inst, cuts)) in cases.into_iter().enumerate() {
        let policy = UniformPolicy;
        let seed = RngStream::new(70_010 + i as u64);
        let batch = roll_batch(&inst, &policy, EVAL_PATHS, &seed.child(0));
        let ct: Vec<f64> = batch.iter().map(Trajectory::total_reward).collect();
        let oracle_root = seed.child(1);
        let dt: Vec<f64> = (0..EVAL_PATHS as u64)
            .map(|k| discrete_path(&inst, &policy, 1e-4, &mut oracle_root.child(k)))
            .collect();
        let (m1, s1) = mean_se(&ct);
        let (m2, s2) = mean_se(&dt);
        let z = (m1 - m2).abs() / (s1 * s1 + s2 * s2).sqrt();
        let rate_z = jump_rate_deviation(&inst, &policy, &batch, &cuts);
        pass &= z <= 3.0 && rate_z <= 3.0;
        parts.push(format!(
            "{label}: event-driven {m1:.3} vs grid {m2:.3} ({z:.2} SE), worst jump-rate deviation {rate_z:.2} SE"
        ));
    }
    (pass, format!("{} (limit 3 SE)", parts.join("; ")))
}

// ---------------------------------------------------------------------------
// Medium-network smoke run

fn smoke_experiment_two() -> (bool, String) {
    let inst = experiment_two();
    let mut config = linear_pair_config(81, 10_000, 1e-3, 5e-6, 3);
    config.policy = PolicyConfig::LinearRo { degree: 3 };
    config.eval_every = 500;
    let policy = config.policy.build(&inst, config.gamma, config.seed);
    let out = train_actor_critic(&inst, policy, &config, &mut |_| {}).unwrap();
    let ys: Vec<f64> = out.curve.iter().map(|p| p.avg_revenue).collect();
    let ma: Vec<f64> = ys
        .windows(10)
        .map(|w| w.iter().sum::<f64>() / 10.0)
        .collect();
    let increasing = ma.windows(2).all(|w| w[1] > w[0]);
    (
        increasing && ma.len() >= 2,
        format!(
            "{} curve points, 10-point moving average {:.2} -> {:.2}, strictly increasing: {increasing}",
            ys.len(),
            ma.first().copied().unwrap_or(f64::NAN),
            ma.last().copied().unwrap_or(f64::NAN)
        ),
    )
}
