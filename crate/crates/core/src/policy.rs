//! Randomized assortment policies.
//!
//! Every policy sees the decision time, the pre-arrival inventory and the set
//! of available products, and returns a subset of the available products.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::model::{Assortment, NetworkInstance, ENUMERATION_LIMIT};
use crate::simulate::RngStream;
use crate::tinynn::{Mlp, Tape};

pub trait Policy: Sync {
    fn sample(&self, t: f64, x: &[u32], avail: Assortment, rng: &mut RngStream) -> Assortment;

    /// `log pi(S | t, x)`; `-inf` outside the support.
    fn log_prob(&self, t: f64, x: &[u32], avail: Assortment, s: Assortment) -> f64;

    fn entropy(&self, t: f64, x: &[u32], avail: Assortment) -> f64;
}

/// A policy with trainable parameters and analytic score/entropy gradients.
pub trait DifferentiablePolicy: Policy {
    fn params(&self) -> &[f64];
    fn set_params(&mut self, params: &[f64]);
    fn gamma(&self) -> f64;
    fn set_gamma(&mut self, gamma: f64);
    fn header(&self) -> ParamHeader;

    /// `out += scale * grad log pi(S | t, x)`.
    fn grad_log_prob(
        &self,
        t: f64,
        x: &[u32],
        avail: Assortment,
        s: Assortment,
        scale: f64,
        out: &mut [f64],
    );

    /// `out += scale * grad H(pi(. | t, x))`.
    fn grad_entropy(&self, t: f64, x: &[u32], avail: Assortment, scale: f64, out: &mut [f64]);

    fn num_params(&self) -> usize {
        self.params().len()
    }
}

/// Softmax over an explicit list of assortments.
struct Softmax {
    sets: Vec<Assortment>,
    log_probs: Vec<f64>,
}

impl Softmax {
    fn new(sets: Vec<Assortment>, scores: Vec<f64>) -> Self {
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        let log_z = max + total.ln();
        Softmax {
            sets,
            log_probs: scores.into_iter().map(|s| s - log_z).collect(),
        }
    }

    fn sample(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (k, lp) in self.log_probs.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                return k;
            }
        }
        self.log_probs.len() - 1
    }

    fn entropy(&self) -> f64 {
        -self.log_probs.iter().map(|lp| lp.exp() * lp).sum::<f64>()
    }
}

fn powers(u: f64, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(d + 1);
    let mut p = 1.0;
    for _ in 0..=d {
        out.push(p);
        p *= u;
    }
    out
}

/// Softmax over all feasible assortments with pairwise-interaction scores
/// `h_S(t) = sum_l sum_{j, j' in S} phi[j][j'][l] (1 - t/T)^l`, temperature `gamma`.
#[derive(Debug, Clone)]
pub struct LinearPairPolicy {
    n: usize,
    d: usize,
    gamma: f64,
    horizon: f64,
    phi: Vec<f64>,
    /// Per-assortment coefficient sums, `2^n x (d+1)`, when `n` is small.
    cache: Vec<f64>,
}

const PAIR_CACHE_LIMIT: usize = 16;

impl LinearPairPolicy {
    pub fn new(n: usize, d: usize, gamma: f64, horizon: f64) -> Self {
        assert!(
            n <= ENUMERATION_LIMIT,
            "Linear-Pair needs enumerable assortments"
        );
        assert!(gamma > 0.0);
        let mut p = LinearPairPolicy {
            n,
            d,
            gamma,
            horizon,
            phi: vec![0.0; n * n * (d + 1)],
            cache: Vec::new(),
        };
        p.rebuild_cache();
        p
    }

    pub fn degree(&self) -> usize {
        self.d
    }

    #[inline]
    fn idx(&self, j: usize, j2: usize, l: usize) -> usize {
        (j * self.n + j2) * (self.d + 1) + l
    }

    fn rebuild_cache(&mut self) {
        if self.n > PAIR_CACHE_LIMIT {
            self.cache.clear();
            return;
        }
        let k = self.d + 1;
        let size = 1usize << self.n;
        self.cache.clear();
        self.cache.resize(size * k, 0.0);
        for mask in 1..size {
            let j = mask.trailing_zeros() as usize;
            let rest = mask & (mask - 1);
            for l in 0..k {
                let mut c = self.cache[rest * k + l] + self.phi[self.idx(j, j, l)];
                for j2 in Assortment(rest as u64).iter() {
                    c += self.phi[self.idx(j, j2, l)] + self.phi[self.idx(j2, j, l)];
                }
                self.cache[mask * k + l] = c;
            }
        }
    }

    fn coefficient(&self, s: Assortment, l: usize) -> f64 {
        if !self.cache.is_empty() {
            return self.cache[s.0 as usize * (self.d + 1) + l];
        }
        let mut c = 0.0;
        for j in s.iter() {
            for j2 in s.iter() {
                c += self.phi[self.idx(j, j2, l)];
            }
        }
        c
    }

    /// `h_S(t)`.
    pub fn score(&self, t: f64, s: Assortment) -> f64 {
        let u = 1.0 - t / self.horizon;
        let mut acc = 0.0;
        for l in (0..=self.d).rev() {
            acc = acc * u + self.coefficient(s, l);
        }
        acc
    }

    fn softmax(&self, t: f64, avail: Assortment) -> Softmax {
        let sets: Vec<Assortment> = avail.subsets().collect();
        let scores = sets
            .iter()
            .map(|&s| self.score(t, s) / self.gamma)
            .collect();
        Softmax::new(sets, scores)
    }

    /// Adds `scale/gamma * u^l * sum_S w_S delta_j(S) delta_j'(S)` to `out`.
    fn scatter(
        &self,
        t: f64,
        avail: Assortment,
        weights: &[(Assortment, f64)],
        scale: f64,
        out: &mut [f64],
    ) {
        let n = self.n;
        let mut pair = vec![0.0; n * n];
        for &(s, w) in weights {
            if w == 0.0 {
                continue;
            }
            for j in s.iter() {
                for j2 in s.iter() {
                    pair[j * n + j2] += w;
                }
            }
        }
        let pw = powers(1.0 - t / self.horizon, self.d);
        let c = scale / self.gamma;
        for j in avail.iter() {
            for j2 in avail.iter() {
                let g = pair[j * n + j2];
                if g == 0.0 {
                    continue;
                }
                for (l, p) in pw.iter().enumerate() {
                    out[self.idx(j, j2, l)] += c * g * p;
                }
            }
        }
    }
}

impl Policy for LinearPairPolicy {
    fn sample(&self, t: f64, _x: &[u32], avail: Assortment, rng: &mut RngStream) -> Assortment {
        if avail.is_empty() {
            return Assortment::EMPTY;
        }
        let sm = self.softmax(t, avail);
        sm.sets[sm.sample(rng.uniform())]
    }

    fn log_prob(&self, t: f64, _x: &[u32], avail: Assortment, s: Assortment) -> f64 {
        if !s.is_subset_of(avail) {
            return f64::NEG_INFINITY;
        }
        let sm = self.softmax(t, avail);
        let k = sm.sets.iter().position(|&c| c == s).unwrap();
        sm.log_probs[k]
    }

    fn entropy(&self, t: f64, _x: &[u32], avail: Assortment) -> f64 {
        if avail.is_empty() {
            return 0.0;
        }
        self.softmax(t, avail).entropy()
    }
}

impl DifferentiablePolicy for LinearPairPolicy {
    fn params(&self) -> &[f64] {
        &self.phi
    }

    fn set_params(&mut self, params: &[f64]) {
        self.phi.copy_from_slice(params);
        self.rebuild_cache();
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn set_gamma(&mut self, gamma: f64) {
        self.gamma = gamma;
    }

    fn header(&self) -> ParamHeader {
        ParamHeader {
            parametrization: "linear-pair".into(),
            shapes: vec![vec![self.n, self.n, self.d + 1]],
            gamma: self.gamma,
            d: Some(self.d),
            horizon: self.horizon,
            temperature: None,
        }
    }

    fn grad_log_prob(
        &self,
        t: f64,
        _x: &[u32],
        avail: Assortment,
        s: Assortment,
        scale: f64,
        out: &mut [f64],
    ) {
        if avail.is_empty() {
            return;
        }
        let sm = self.softmax(t, avail);
        let mut weights: Vec<(Assortment, f64)> = sm
            .sets
            .iter()
            .zip(&sm.log_probs)
            .map(|(&c, lp)| (c, -lp.exp()))
            .collect();
        weights.push((s, 1.0));
        self.scatter(t, avail, &weights, scale, out);
    }

    fn grad_entropy(&self, t: f64, _x: &[u32], avail: Assortment, scale: f64, out: &mut [f64]) {
        if avail.is_empty() {
            return;
        }
        let sm = self.softmax(t, avail);
        let h = sm.entropy();
        let weights: Vec<(Assortment, f64)> = sm
            .sets
            .iter()
            .zip(&sm.log_probs)
            .map(|(&c, &lp)| (c, -lp.exp() * (lp + h)))
            .collect();
        self.scatter(t, avail, &weights, scale, out);
    }
}

/// Softmax over revenue-ordered assortments, each intersected with the
/// available products at decision time.
#[derive(Debug, Clone)]
pub struct LinearRoPolicy {
    d: usize,
    gamma: f64,
    horizon: f64,
    sets: Vec<Assortment>,
    phi: Vec<f64>,
}

impl LinearRoPolicy {
    pub fn new(inst: &NetworkInstance, d: usize, gamma: f64) -> Self {
        assert!(gamma > 0.0);
        let sets = revenue_ordered_sets(inst);
        LinearRoPolicy {
            d,
            gamma,
            horizon: inst.horizon(),
            phi: vec![0.0; sets.len() * (d + 1)],
            sets,
        }
    }

    /// The revenue-ordered assortments `S^[k]`.
    pub fn sets(&self) -> &[Assortment] {
        &self.sets
    }

    fn sigma(&self, t: f64) -> Vec<f64> {
        let pw = powers(1.0 - t / self.horizon, self.d);
        let k = self.d + 1;
        let scores: Vec<f64> = (0..self.sets.len())
            .map(|i| (0..k).map(|l| self.phi[i * k + l] * pw[l]).sum::<f64>() / self.gamma)
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect()
    }

    /// Distinct offered sets and their aggregated probabilities.
    fn aggregated(&self, sigma: &[f64], avail: Assortment) -> Vec<(Assortment, f64)> {
        let mut pairs: Vec<(Assortment, f64)> = self
            .sets
            .iter()
            .zip(sigma)
            .map(|(s, &p)| (s.intersect(avail), p))
            .collect();
        pairs.sort_by_key(|p| p.0);
        let mut out: Vec<(Assortment, f64)> = Vec::with_capacity(pairs.len());
        for (s, p) in pairs {
            match out.last_mut() {
                Some(last) if last.0 == s => last.1 += p,
                _ => out.push((s, p)),
            }
        }
        out
    }

    fn mass(&self, sigma: &[f64], avail: Assortment, s: Assortment) -> f64 {
        self.sets
            .iter()
            .zip(sigma)
            .filter(|(c, _)| c.intersect(avail) == s)
            .map(|(_, p)| p)
            .sum()
    }
}

/// Products of per-segment price-descending prefixes (ties by product index).
pub fn revenue_ordered_sets(inst: &NetworkInstance) -> Vec<Assortment> {
    let mut sets = vec![Assortment::EMPTY];
    for seg in inst.choice().segments() {
        let mut order = seg.products.clone();
        order.sort_by(|&a, &b| {
            inst.prices()[b]
                .partial_cmp(&inst.prices()[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut prefixes = vec![Assortment::EMPTY];
        let mut acc = Assortment::EMPTY;
        for &j in &order {
            acc.insert(j);
            prefixes.push(acc);
        }
        sets = prefixes
            .iter()
            .flat_map(|p| sets.iter().map(move |s| s.union(*p)))
            .collect();
    }
    sets
}

impl Policy for LinearRoPolicy {
    fn sample(&self, t: f64, _x: &[u32], avail: Assortment, rng: &mut RngStream) -> Assortment {
        if avail.is_empty() {
            return Assortment::EMPTY;
        }
        let sigma = self.sigma(t);
        let u = rng.uniform();
        let mut acc = 0.0;
        for (s, p) in self.sets.iter().zip(&sigma) {
            acc += p;
            if u < acc {
                return s.intersect(avail);
            }
        }
        self.sets.last().unwrap().intersect(avail)
    }

    fn log_prob(&self, t: f64, _x: &[u32], avail: Assortment, s: Assortment) -> f64 {
        self.mass(&self.sigma(t), avail, s).ln()
    }

    fn entropy(&self, t: f64, _x: &[u32], avail: Assortment) -> f64 {
        let agg = self.aggregated(&self.sigma(t), avail);
        -agg.iter()
            .filter(|(_, p)| *p > 0.0)
            .map(|(_, p)| p * p.ln())
            .sum::<f64>()
    }
}

impl DifferentiablePolicy for LinearRoPolicy {
    fn params(&self) -> &[f64] {
        &self.phi
    }

    fn set_params(&mut self, params: &[f64]) {
        self.phi.copy_from_slice(params);
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn set_gamma(&mut self, gamma: f64) {
        self.gamma = gamma;
    }

    fn header(&self) -> ParamHeader {
        ParamHeader {
            parametrization: "linear-ro".into(),
            shapes: vec![vec![self.sets.len(), self.d + 1]],
            gamma: self.gamma,
            d: Some(self.d),
            horizon: self.horizon,
            temperature: None,
        }
    }

    fn grad_log_prob(
        &self,
        t: f64,
        _x: &[u32],
        avail: Assortment,
        s: Assortment,
        scale: f64,
        out: &mut [f64],
    ) {
        let sigma = self.sigma(t);
        let mass = self.mass(&sigma, avail, s);
        assert!(mass > 0.0, "observed assortment has zero probability");
        let pw = powers(1.0 - t / self.horizon, self.d);
        let k = self.d + 1;
        let c = scale / self.gamma;
        for (i, (set, &p)) in self.sets.iter().zip(&sigma).enumerate() {
            let hit = if set.intersect(avail) == s {
                p / mass
            } else {
                0.0
            };
            let g = c * (hit - p);
            for l in 0..k {
                out[i * k + l] += g * pw[l];
            }
        }
    }

    fn grad_entropy(&self, t: f64, _x: &[u32], avail: Assortment, scale: f64, out: &mut [f64]) {
        let sigma = self.sigma(t);
        let agg = self.aggregated(&sigma, avail);
        let h = -agg
            .iter()
            .filter(|(_, p)| *p > 0.0)
            .map(|(_, p)| p * p.ln())
            .sum::<f64>();
        let pw = powers(1.0 - t / self.horizon, self.d);
        let k = self.d + 1;
        let c = scale / self.gamma;
        for (i, (set, &p)) in self.sets.iter().zip(&sigma).enumerate() {
            if p == 0.0 {
                continue;
            }
            let target = set.intersect(avail);
            let mass = agg.iter().find(|(s, _)| *s == target).unwrap().1;
            let g = -c * p * (mass.ln() + h);
            for l in 0..k {
                out[i * k + l] += g * pw[l];
            }
        }
    }
}

#[inline]
pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Entropy of a Bernoulli variable with success probability `sigmoid(z)`.
pub fn binary_entropy_logit(z: f64) -> f64 {
    let p = sigmoid(z);
    p * softplus(-z) + (1.0 - p) * softplus(z)
}

/// Independent inclusion of each available product with probability
/// `sigmoid(L_j(t, x) / gamma)`; unavailable products are never offered.
#[derive(Debug, Clone)]
pub struct BernoulliNnPolicy {
    net: Mlp,
    gamma: f64,
    horizon: f64,
    capacity: Vec<u32>,
}

impl BernoulliNnPolicy {
    /// `hidden` lists hidden-layer widths; the output layer starts at zero (all probabilities 1/2).
    pub fn new(inst: &NetworkInstance, hidden: &[usize], gamma: f64, rng: &mut RngStream) -> Self {
        let mut widths = vec![inst.m() + 1];
        widths.extend_from_slice(hidden);
        widths.push(inst.n());
        let mut net = Mlp::new(&widths, rng);
        net.zero_output_layer();
        BernoulliNnPolicy {
            net,
            gamma,
            horizon: inst.horizon(),
            capacity: inst.capacity().to_vec(),
        }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    fn forward(&self, t: f64, x: &[u32], tape: &mut Tape) {
        let mut input = Vec::with_capacity(x.len() + 1);
        input.push(t / self.horizon);
        for (xi, ci) in x.iter().zip(&self.capacity) {
            input.push(if *ci == 0 {
                0.0
            } else {
                *xi as f64 / *ci as f64
            });
        }
        self.net.forward_tape(&input, tape).unwrap();
    }

    /// Inclusion probabilities (zero for unavailable products).
    pub fn inclusion_probs(&self, t: f64, x: &[u32], avail: Assortment) -> Vec<f64> {
        let mut tape = Tape::default();
        self.forward(t, x, &mut tape);
        tape.output()
            .iter()
            .enumerate()
            .map(|(j, l)| {
                if avail.contains(j) {
                    sigmoid(l / self.gamma)
                } else {
                    0.0
                }
            })
            .collect()
    }
}

impl Policy for BernoulliNnPolicy {
    fn sample(&self, t: f64, x: &[u32], avail: Assortment, rng: &mut RngStream) -> Assortment {
        if avail.is_empty() {
            return Assortment::EMPTY;
        }
        let probs = self.inclusion_probs(t, x, avail);
        let mut s = Assortment::EMPTY;
        for j in avail.iter() {
            if rng.uniform() < probs[j] {
                s.insert(j);
            }
        }
        s
    }

    fn log_prob(&self, t: f64, x: &[u32], avail: Assortment, s: Assortment) -> f64 {
        if !s.is_subset_of(avail) {
            return f64::NEG_INFINITY;
        }
        if avail.is_empty() {
            return 0.0;
        }
        let mut tape = Tape::default();
        self.forward(t, x, &mut tape);
        let logits = tape.output();
        avail
            .iter()
            .map(|j| {
                let z = logits[j] / self.gamma;
                if s.contains(j) {
                    -softplus(-z)
                } else {
                    -softplus(z)
                }
            })
            .sum()
    }

    fn entropy(&self, t: f64, x: &[u32], avail: Assortment) -> f64 {
        if avail.is_empty() {
            return 0.0;
        }
        let mut tape = Tape::default();
        self.forward(t, x, &mut tape);
        let logits = tape.output();
        avail
            .iter()
            .map(|j| binary_entropy_logit(logits[j] / self.gamma))
            .sum()
    }
}

impl DifferentiablePolicy for BernoulliNnPolicy {
    fn params(&self) -> &[f64] {
        self.net.params()
    }

    fn set_params(&mut self, params: &[f64]) {
        self.net.params_mut().copy_from_slice(params);
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn set_gamma(&mut self, gamma: f64) {
        self.gamma = gamma;
    }

    fn header(&self) -> ParamHeader {
        ParamHeader {
            parametrization: "bernoulli-nn".into(),
            shapes: vec![self.net.widths().to_vec()],
            gamma: self.gamma,
            d: None,
            horizon: self.horizon,
            temperature: None,
        }
    }

    fn grad_log_prob(
        &self,
        t: f64,
        x: &[u32],
        avail: Assortment,
        s: Assortment,
        scale: f64,
        out: &mut [f64],
    ) {
        if avail.is_empty() {
            return;
        }
        let mut tape = Tape::default();
        self.forward(t, x, &mut tape);
        let cot: Vec<f64> = tape
            .output()
            .iter()
            .enumerate()
            .map(|(j, l)| {
                if !avail.contains(j) {
                    return 0.0;
                }
                let p = sigmoid(l / self.gamma);
                let delta = if s.contains(j) { 1.0 } else { 0.0 };
                (delta - p) / self.gamma
            })
            .collect();
        self.net.backward(&tape, &cot, scale, out);
    }

    fn grad_entropy(&self, t: f64, x: &[u32], avail: Assortment, scale: f64, out: &mut [f64]) {
        if avail.is_empty() {
            return;
        }
        let mut tape = Tape::default();
        self.forward(t, x, &mut tape);
        let cot: Vec<f64> = tape
            .output()
            .iter()
            .enumerate()
            .map(|(j, l)| {
                if !avail.contains(j) {
                    return 0.0;
                }
                let z = l / self.gamma;
                let p = sigmoid(z);
                -p * (1.0 - p) * z / self.gamma
            })
            .collect();
        self.net.backward(&tape, &cot, scale, out);
    }
}

/// Uniform over all feasible assortments (independent fair coins per available product).
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformPolicy;

impl Policy for UniformPolicy {
    fn sample(&self, _t: f64, _x: &[u32], avail: Assortment, rng: &mut RngStream) -> Assortment {
        let mut s = Assortment::EMPTY;
        for j in avail.iter() {
            if rng.uniform() < 0.5 {
                s.insert(j);
            }
        }
        s
    }

    fn log_prob(&self, _t: f64, _x: &[u32], avail: Assortment, s: Assortment) -> f64 {
        if s.is_subset_of(avail) {
            -(avail.len() as f64) * std::f64::consts::LN_2
        } else {
            f64::NEG_INFINITY
        }
    }

    fn entropy(&self, _t: f64, _x: &[u32], avail: Assortment) -> f64 {
        avail.len() as f64 * std::f64::consts::LN_2
    }
}

/// Always offers a fixed set, restricted to what is available.
#[derive(Debug, Clone, Copy)]
pub struct FixedPolicy(pub Assortment);

impl Policy for FixedPolicy {
    fn sample(&self, _t: f64, _x: &[u32], avail: Assortment, _rng: &mut RngStream) -> Assortment {
        self.0.intersect(avail)
    }

    fn log_prob(&self, _t: f64, _x: &[u32], avail: Assortment, s: Assortment) -> f64 {
        if s == self.0.intersect(avail) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }

    fn entropy(&self, _t: f64, _x: &[u32], _avail: Assortment) -> f64 {
        0.0
    }
}

/// Exhaustive argmax of expected revenue per customer over subsets of `avail`;
/// ties go to the smallest bitmask.
pub fn best_assortment_exhaustive(inst: &NetworkInstance, avail: Assortment) -> Assortment {
    let mut subsets: Vec<Assortment> = avail.subsets().collect();
    subsets.reverse();
    let mut best = Assortment::EMPTY;
    let mut best_value: f64 = 0.0;
    for s in subsets {
        let v = inst.revenue_per_customer(s);
        if v > best_value + 1e-12 * best_value.abs().max(1.0) {
            best = s;
            best_value = v;
        }
    }
    best
}

/// Union of per-segment optimal revenue-ordered prefixes of the available products.
pub fn best_assortment_revenue_ordered(inst: &NetworkInstance, avail: Assortment) -> Assortment {
    let choice = inst.choice();
    let prices = inst.prices();
    let mut best = Assortment::EMPTY;
    for (l, seg) in choice.segments().iter().enumerate() {
        let mut order: Vec<usize> = choice.segment_mask(l).intersect(avail).iter().collect();
        order.sort_by(|&a, &b| prices[b].partial_cmp(&prices[a]).unwrap().then(a.cmp(&b)));
        let weight = |j: usize| seg.weights[seg.products.iter().position(|&p| p == j).unwrap()];
        let (mut num, mut den) = (0.0, seg.no_purchase_weight);
        let mut best_value: f64 = 0.0;
        let mut best_len = 0;
        for (k, &j) in order.iter().enumerate() {
            num += prices[j] * weight(j);
            den += weight(j);
            let v = num / den;
            if v > best_value + 1e-12 * best_value.abs().max(1.0) {
                best_value = v;
                best_len = k + 1;
            }
        }
        for &j in &order[..best_len] {
            best.insert(j);
        }
    }
    best
}

/// Myopic revenue-maximizing assortment at inventory `x`.
pub fn greedy_assortment(inst: &NetworkInstance, x: &[u32]) -> Assortment {
    let avail = inst.available(x);
    if inst.n() <= ENUMERATION_LIMIT {
        best_assortment_exhaustive(inst, avail)
    } else {
        best_assortment_revenue_ordered(inst, avail)
    }
}

/// Deterministic myopic policy, memoized over availability sets for small `n`.
#[derive(Debug, Clone)]
pub struct GreedyPolicy {
    inst: NetworkInstance,
    table: Vec<Assortment>,
}

const GREEDY_TABLE_LIMIT: usize = 12;

impl GreedyPolicy {
    pub fn new(inst: &NetworkInstance) -> Self {
        let table = if inst.n() <= GREEDY_TABLE_LIMIT {
            (0..1u64 << inst.n())
                .map(|mask| best_assortment_exhaustive(inst, Assortment(mask)))
                .collect()
        } else {
            Vec::new()
        };
        GreedyPolicy {
            inst: inst.clone(),
            table,
        }
    }

    pub fn choose(&self, avail: Assortment) -> Assortment {
        if self.table.is_empty() {
            if self.inst.n() <= ENUMERATION_LIMIT {
                best_assortment_exhaustive(&self.inst, avail)
            } else {
                best_assortment_revenue_ordered(&self.inst, avail)
            }
        } else {
            self.table[avail.0 as usize]
        }
    }
}

impl Policy for GreedyPolicy {
    fn sample(&self, _t: f64, _x: &[u32], avail: Assortment, _rng: &mut RngStream) -> Assortment {
        self.choose(avail)
    }

    fn log_prob(&self, _t: f64, _x: &[u32], avail: Assortment, s: Assortment) -> f64 {
        if s == self.choose(avail) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }

    fn entropy(&self, _t: f64, _x: &[u32], _avail: Assortment) -> f64 {
        0.0
    }
}

/// One of the trainable parametrizations, chosen at run time.
#[derive(Debug, Clone)]
pub enum ParamPolicy {
    Pair(LinearPairPolicy),
    Ro(LinearRoPolicy),
    Nn(BernoulliNnPolicy),
}

impl ParamPolicy {
    /// Rebuilds a policy from a parameter file.
    pub fn from_params(
        inst: &NetworkInstance,
        header: &ParamHeader,
        values: &[f64],
    ) -> Result<Self, String> {
        let d = header.d.unwrap_or(0);
        let mut policy = match header.parametrization.as_str() {
            "linear-pair" => ParamPolicy::Pair(LinearPairPolicy::new(
                inst.n(),
                d,
                header.gamma,
                inst.horizon(),
            )),
            "linear-ro" => ParamPolicy::Ro(LinearRoPolicy::new(inst, d, header.gamma)),
            "bernoulli-nn" => {
                let widths = header.shapes.first().ok_or("missing network shape")?;
                if widths.len() < 2
                    || widths[0] != inst.m() + 1
                    || *widths.last().unwrap() != inst.n()
                {
                    return Err(format!(
                        "network widths {widths:?} do not match the instance"
                    ));
                }
                let hidden = &widths[1..widths.len() - 1];
                ParamPolicy::Nn(BernoulliNnPolicy::new(
                    inst,
                    hidden,
                    header.gamma,
                    &mut RngStream::new(0),
                ))
            }
            other => return Err(format!("unknown parametrization {other:?}")),
        };
        if policy.num_params() != values.len() {
            return Err(format!(
                "expected {} parameters, found {}",
                policy.num_params(),
                values.len()
            ));
        }
        policy.set_params(values);
        Ok(policy)
    }

    fn inner(&self) -> &dyn DifferentiablePolicy {
        match self {
            ParamPolicy::Pair(p) => p,
            ParamPolicy::Ro(p) => p,
            ParamPolicy::Nn(p) => p,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn DifferentiablePolicy {
        match self {
            ParamPolicy::Pair(p) => p,
            ParamPolicy::Ro(p) => p,
            ParamPolicy::Nn(p) => p,
        }
    }
}

impl Policy for ParamPolicy {
    fn sample(&self, t: f64, x: &[u32], avail: Assortment, rng: &mut RngStream) -> Assortment {
        self.inner().sample(t, x, avail, rng)
    }
    fn log_prob(&self, t: f64, x: &[u32], avail: Assortment, s: Assortment) -> f64 {
        self.inner().log_prob(t, x, avail, s)
    }
    fn entropy(&self, t: f64, x: &[u32], avail: Assortment) -> f64 {
        self.inner().entropy(t, x, avail)
    }
}

impl DifferentiablePolicy for ParamPolicy {
    fn params(&self) -> &[f64] {
        self.inner().params()
    }
    fn set_params(&mut self, params: &[f64]) {
        self.inner_mut().set_params(params)
    }
    fn gamma(&self) -> f64 {
        self.inner().gamma()
    }
    fn set_gamma(&mut self, gamma: f64) {
        self.inner_mut().set_gamma(gamma)
    }
    fn header(&self) -> ParamHeader {
        self.inner().header()
    }
    fn grad_log_prob(
        &self,
        t: f64,
        x: &[u32],
        avail: Assortment,
        s: Assortment,
        scale: f64,
        out: &mut [f64],
    ) {
        self.inner().grad_log_prob(t, x, avail, s, scale, out)
    }
    fn grad_entropy(&self, t: f64, x: &[u32], avail: Assortment, scale: f64, out: &mut [f64]) {
        self.inner().grad_entropy(t, x, avail, scale, out)
    }
}

/// JSON header of a parameter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamHeader {
    pub parametrization: String,
    pub shapes: Vec<Vec<usize>>,
    pub gamma: f64,
    pub d: Option<usize>,
    pub horizon: f64,
    /// Logit divisor when it differs from `gamma`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

/// Writes a header line followed by one value per line.
pub fn write_params<W: Write>(
    mut w: W,
    header: &ParamHeader,
    values: &[f64],
) -> std::io::Result<()> {
    serde_json::to_writer(&mut w, header)?;
    writeln!(w)?;
    for v in values {
        writeln!(w, "{v:e}")?;
    }
    Ok(())
}

pub fn read_params<R: BufRead>(r: R) -> std::io::Result<(ParamHeader, Vec<f64>)> {
    let bad = |e: String| std::io::Error::new(std::io::ErrorKind::InvalidData, e);
    let mut lines = r.lines();
    let first = lines
        .next()
        .ok_or_else(|| bad("empty parameter file".into()))??;
    let header: ParamHeader = serde_json::from_str(&first).map_err(|e| bad(e.to_string()))?;
    let mut values = Vec::new();
    for line in lines {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        values.push(
            line.parse::<f64>()
                .map_err(|e| bad(format!("{line}: {e}")))?,
        );
    }
    Ok((header, values))
}
