//! Network instances, the segmented MNL choice model and the controlled
//! transition structure of the inventory process.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest product count for which `feasible_assortments` enumerates subsets.
pub const ENUMERATION_LIMIT: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid instance: {0}")]
    Invalid(String),
    #[error("product {0} is not in the offered assortment")]
    NotOffered(usize),
    #[error(
        "{0} products exceed the enumeration limit of {ENUMERATION_LIMIT}; use a factorized policy"
    )]
    EnumerationLimit(usize),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ModelError> {
    Err(ModelError::Invalid(msg.into()))
}

/// Set of products encoded as a bitmask (bit `j` = product `j`).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Assortment(pub u64);

impl Assortment {
    pub const EMPTY: Assortment = Assortment(0);

    pub fn full(n: usize) -> Self {
        assert!(n <= 64);
        if n == 64 {
            Assortment(u64::MAX)
        } else {
            Assortment((1u64 << n) - 1)
        }
    }

    pub fn singleton(j: usize) -> Self {
        Assortment(1u64 << j)
    }

    pub fn from_products(products: &[usize]) -> Self {
        Assortment(products.iter().fold(0u64, |acc, &j| acc | (1u64 << j)))
    }

    #[inline]
    pub fn contains(self, j: usize) -> bool {
        (self.0 >> j) & 1 == 1
    }

    #[inline]
    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    #[inline]
    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    #[inline]
    pub fn intersect(self, other: Assortment) -> Assortment {
        Assortment(self.0 & other.0)
    }

    #[inline]
    pub fn union(self, other: Assortment) -> Assortment {
        Assortment(self.0 | other.0)
    }

    #[inline]
    pub fn is_subset_of(self, other: Assortment) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn insert(&mut self, j: usize) {
        self.0 |= 1u64 << j;
    }

    /// Product indices in increasing order.
    pub fn iter(self) -> ProductIter {
        ProductIter(self.0)
    }

    /// All subsets of `self` in decreasing bitmask order, ending with the empty set.
    pub fn subsets(self) -> SubsetIter {
        SubsetIter {
            universe: self.0,
            next: Some(self.0),
        }
    }
}

impl fmt::Debug for Assortment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

pub struct ProductIter(u64);

impl Iterator for ProductIter {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        if self.0 == 0 {
            return None;
        }
        let j = self.0.trailing_zeros() as usize;
        self.0 &= self.0 - 1;
        Some(j)
    }
}

pub struct SubsetIter {
    universe: u64,
    next: Option<u64>,
}

impl Iterator for SubsetIter {
    type Item = Assortment;

    #[inline]
    fn next(&mut self) -> Option<Assortment> {
        let cur = self.next?;
        self.next = if cur == 0 {
            None
        } else {
            Some((cur - 1) & self.universe)
        };
        Some(Assortment(cur))
    }
}

/// Time profile of a nonnegative rate function on `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "params", rename_all = "snake_case")]
pub enum RateProfile {
    Constant {
        rate: f64,
    },
    /// `rates[k]` applies on `[breakpoints[k-1], breakpoints[k])`.
    PiecewiseConstant {
        breakpoints: Vec<f64>,
        rates: Vec<f64>,
    },
    /// `base + amplitude * sin(2 pi t / period)`.
    Sinusoidal {
        base: f64,
        amplitude: f64,
        period: f64,
    },
    /// Linear interpolation from `start` at `t = 0` to `end` at `t = T`.
    LinearRamp {
        start: f64,
        end: f64,
    },
}

/// A validated rate function bound to a horizon, with a dominating constant for thinning.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalRate {
    profile: RateProfile,
    horizon: f64,
    upper: f64,
}

impl ArrivalRate {
    pub fn new(profile: RateProfile, horizon: f64) -> Result<Self, ModelError> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return invalid("horizon must be positive and finite");
        }
        let upper = match &profile {
            RateProfile::Constant { rate } => {
                if !(*rate >= 0.0 && rate.is_finite()) {
                    return invalid("constant rate must be nonnegative");
                }
                *rate
            }
            RateProfile::PiecewiseConstant { breakpoints, rates } => {
                if rates.len() != breakpoints.len() + 1 {
                    return invalid("piecewise rate needs one more rate than breakpoints");
                }
                if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
                    return invalid("breakpoints must be strictly increasing");
                }
                if rates.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
                    return invalid("piecewise rates must be nonnegative");
                }
                rates.iter().cloned().fold(0.0, f64::max)
            }
            RateProfile::Sinusoidal {
                base,
                amplitude,
                period,
            } => {
                if !(*period > 0.0) || amplitude.abs() > *base {
                    return invalid("sinusoidal rate needs period > 0 and |amplitude| <= base");
                }
                base + amplitude.abs()
            }
            RateProfile::LinearRamp { start, end } => {
                if !(*start >= 0.0 && *end >= 0.0) {
                    return invalid("linear ramp endpoints must be nonnegative");
                }
                start.max(*end)
            }
        };
        Ok(ArrivalRate {
            profile,
            horizon,
            upper,
        })
    }

    pub fn constant(rate: f64, horizon: f64) -> Result<Self, ModelError> {
        Self::new(RateProfile::Constant { rate }, horizon)
    }

    pub fn profile(&self) -> &RateProfile {
        &self.profile
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.profile, RateProfile::Constant { .. })
    }

    /// Upper bound of the rate over `[0, T]`.
    pub fn max(&self) -> f64 {
        self.upper
    }

    #[inline]
    pub fn evaluate(&self, t: f64) -> f64 {
        match &self.profile {
            RateProfile::Constant { rate } => *rate,
            RateProfile::PiecewiseConstant { breakpoints, rates } => {
                let k = breakpoints.partition_point(|&b| b <= t);
                rates[k]
            }
            RateProfile::Sinusoidal {
                base,
                amplitude,
                period,
            } => (base + amplitude * (2.0 * PI * t / period).sin()).max(0.0),
            RateProfile::LinearRamp { start, end } => start + (end - start) * t / self.horizon,
        }
    }

    /// Exact integral of the rate over `[a, b]`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        match &self.profile {
            RateProfile::Constant { rate } => rate * (b - a),
            RateProfile::PiecewiseConstant { breakpoints, rates } => {
                let mut total = 0.0;
                let mut lo = f64::NEG_INFINITY;
                for (k, &r) in rates.iter().enumerate() {
                    let hi = breakpoints.get(k).copied().unwrap_or(f64::INFINITY);
                    let s = a.max(lo);
                    let e = b.min(hi);
                    if e > s {
                        total += r * (e - s);
                    }
                    lo = hi;
                }
                total
            }
            RateProfile::Sinusoidal {
                base,
                amplitude,
                period,
            } => {
                let w = 2.0 * PI / period;
                base * (b - a) - amplitude / w * ((w * b).cos() - (w * a).cos())
            }
            RateProfile::LinearRamp { start, end } => {
                let slope = (end - start) / self.horizon;
                start * (b - a) + 0.5 * slope * (b * b - a * a)
            }
        }
    }
}

/// One customer segment of the choice model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub share: f64,
    pub products: Vec<usize>,
    pub weights: Vec<f64>,
    pub no_purchase_weight: f64,
}

/// MNL choice within disjoint customer segments.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedMnl {
    segments: Vec<Segment>,
    masks: Vec<Assortment>,
    product_segment: Vec<usize>,
    product_weight: Vec<f64>,
}

impl SegmentedMnl {
    pub fn new(mut segments: Vec<Segment>, n: usize) -> Result<Self, ModelError> {
        if segments.is_empty() {
            return invalid("choice model needs at least one segment");
        }
        let total: f64 = segments.iter().map(|s| s.share).sum();
        if segments.iter().any(|s| !(s.share >= 0.0)) || !(total > 0.0) {
            return invalid("segment shares must be nonnegative with a positive sum");
        }
        if (total - 1.0).abs() > 1e-9 {
            log::warn!("segment shares sum to {total}; renormalizing");
            for s in &mut segments {
                s.share /= total;
            }
        }
        let mut product_segment = vec![usize::MAX; n];
        let mut product_weight = vec![0.0; n];
        let mut masks = Vec::with_capacity(segments.len());
        for (l, seg) in segments.iter().enumerate() {
            if seg.products.len() != seg.weights.len() {
                return invalid(format!(
                    "segment {l}: products and weights differ in length"
                ));
            }
            if !(seg.no_purchase_weight > 0.0) {
                return invalid(format!("segment {l}: no-purchase weight must be positive"));
            }
            let mut mask = Assortment::EMPTY;
            for (&j, &w) in seg.products.iter().zip(&seg.weights) {
                if j >= n {
                    return invalid(format!("segment {l}: product {j} out of range"));
                }
                if product_segment[j] != usize::MAX {
                    return invalid(format!("product {j} belongs to more than one segment"));
                }
                if !(w > 0.0 && w.is_finite()) {
                    return invalid(format!("segment {l}: weights must be positive"));
                }
                product_segment[j] = l;
                product_weight[j] = w;
                mask.insert(j);
            }
            masks.push(mask);
        }
        if let Some(j) = product_segment.iter().position(|&s| s == usize::MAX) {
            return invalid(format!("product {j} is not in any segment"));
        }
        Ok(SegmentedMnl {
            segments,
            masks,
            product_segment,
            product_weight,
        })
    }

    /// Plain MNL: one segment containing every product.
    pub fn single(weights: Vec<f64>, no_purchase_weight: f64) -> Result<Self, ModelError> {
        let n = weights.len();
        Self::new(
            vec![Segment {
                share: 1.0,
                products: (0..n).collect(),
                weights,
                no_purchase_weight,
            }],
            n,
        )
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment_mask(&self, l: usize) -> Assortment {
        self.masks[l]
    }

    pub fn n(&self) -> usize {
        self.product_weight.len()
    }

    /// `P_j(S)`; errors when `j` is not offered.
    pub fn purchase_prob(&self, s: Assortment, j: usize) -> Result<f64, ModelError> {
        if j >= self.n() || !s.contains(j) {
            return Err(ModelError::NotOffered(j));
        }
        let l = self.product_segment[j];
        Ok(self.segments[l].share * self.product_weight[j] / self.denominator(l, s))
    }

    /// `P_0(S)`.
    pub fn no_purchase_prob(&self, s: Assortment) -> f64 {
        let mut p0 = 0.0;
        for (l, seg) in self.segments.iter().enumerate() {
            p0 += seg.share * seg.no_purchase_weight / self.denominator(l, s);
        }
        p0
    }

    #[inline]
    fn denominator(&self, l: usize, s: Assortment) -> f64 {
        let mut den = self.segments[l].no_purchase_weight;
        for j in s.intersect(self.masks[l]).iter() {
            den += self.product_weight[j];
        }
        den
    }

    /// Writes `P_j(S)` for every product into `out` (zero for `j` outside `S`).
    pub fn purchase_probs(&self, s: Assortment, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (l, seg) in self.segments.iter().enumerate() {
            let offered = s.intersect(self.masks[l]);
            if offered.is_empty() {
                continue;
            }
            let scale = seg.share / self.denominator(l, s);
            for j in offered.iter() {
                out[j] = scale * self.product_weight[j];
            }
        }
    }

    /// Samples the purchased product (`None` for no purchase) given one uniform draw.
    pub fn sample_choice(&self, s: Assortment, u: f64) -> Option<usize> {
        let mut acc = 0.0;
        for (l, seg) in self.segments.iter().enumerate() {
            let offered = s.intersect(self.masks[l]);
            let den = self.denominator(l, s);
            for j in offered.iter() {
                acc += seg.share * self.product_weight[j] / den;
                if u < acc {
                    return Some(j);
                }
            }
        }
        None
    }
}

/// A choice-based network revenue management problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkSpec", into = "NetworkSpec")]
pub struct NetworkInstance {
    m: usize,
    n: usize,
    consumption: Vec<u32>,
    prices: Vec<f64>,
    capacity: Vec<u32>,
    horizon: f64,
    arrival: ArrivalRate,
    choice: SegmentedMnl,
}

impl NetworkInstance {
    /// `consumption` is row-major `m x n`.
    pub fn new(
        consumption: Vec<Vec<u32>>,
        prices: Vec<f64>,
        capacity: Vec<u32>,
        horizon: f64,
        arrival: ArrivalRate,
        choice: SegmentedMnl,
    ) -> Result<Self, ModelError> {
        let m = consumption.len();
        if m == 0 || capacity.len() != m {
            return invalid("consumption rows must match the capacity vector (m >= 1)");
        }
        let n = prices.len();
        if n == 0 || n > 64 {
            return invalid("product count must be between 1 and 64");
        }
        if consumption.iter().any(|row| row.len() != n) {
            return invalid("every consumption row needs n entries");
        }
        if choice.n() != n {
            return invalid("choice model product count differs from the price vector");
        }
        if prices.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
            return invalid("prices must be positive");
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return invalid("horizon must be positive");
        }
        if (arrival.horizon() - horizon).abs() > 1e-12 * horizon {
            return invalid("arrival-rate horizon differs from the instance horizon");
        }
        for j in 0..n {
            if consumption.iter().all(|row| row[j] == 0) {
                return invalid(format!("product {j} consumes no resource"));
            }
        }
        Ok(NetworkInstance {
            m,
            n,
            consumption: consumption.into_iter().flatten().collect(),
            prices,
            capacity,
            horizon,
            arrival,
            choice,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn prices(&self) -> &[f64] {
        &self.prices
    }
    pub fn capacity(&self) -> &[u32] {
        &self.capacity
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn arrival(&self) -> &ArrivalRate {
        &self.arrival
    }
    pub fn choice(&self) -> &SegmentedMnl {
        &self.choice
    }

    /// `A[i][j]`.
    #[inline]
    pub fn consumption(&self, i: usize, j: usize) -> u32 {
        self.consumption[i * self.n + j]
    }

    pub fn consumption_rows(&self) -> Vec<Vec<u32>> {
        self.consumption
            .chunks(self.n)
            .map(|r| r.to_vec())
            .collect()
    }

    /// The set of products whose resource needs are covered by `x`.
    #[inline]
    pub fn available(&self, x: &[u32]) -> Assortment {
        let mut avail = Assortment::EMPTY;
        for j in 0..self.n {
            if (0..self.m).all(|i| x[i] >= self.consumption(i, j)) {
                avail.insert(j);
            }
        }
        avail
    }

    pub fn is_feasible(&self, x: &[u32], s: Assortment) -> bool {
        s.is_subset_of(self.available(x))
    }

    /// Inventory after selling one unit of product `j`.
    pub fn after_sale(&self, x: &[u32], j: usize) -> Vec<u32> {
        let mut y = x.to_vec();
        self.sell(&mut y, j);
        y
    }

    #[inline]
    pub fn sell(&self, x: &mut [u32], j: usize) {
        for (i, xi) in x.iter_mut().enumerate() {
            *xi -= self.consumption(i, j);
        }
    }

    /// Expected revenue per arriving customer, `sum_j p_j P_j(S)`.
    pub fn revenue_per_customer(&self, s: Assortment) -> f64 {
        let mut probs = vec![0.0; self.n];
        self.choice.purchase_probs(s, &mut probs);
        probs.iter().zip(&self.prices).map(|(q, p)| q * p).sum()
    }

    /// Reward rate `r(S) = lambda(t) sum_j p_j P_j(S)`.
    pub fn reward_rate(&self, t: f64, s: Assortment) -> f64 {
        self.arrival.evaluate(t) * self.revenue_per_customer(s)
    }

    /// Controlled transition rate from `x` to `y` under `S`.
    pub fn transition_rate(&self, t: f64, x: &[u32], s: Assortment, y: &[u32]) -> f64 {
        assert!(
            self.is_feasible(x, s),
            "assortment {s:?} infeasible at {x:?}"
        );
        let lambda = self.arrival.evaluate(t);
        if x == y {
            return -lambda * (1.0 - self.choice.no_purchase_prob(s));
        }
        let mut rate = 0.0;
        for j in s.iter() {
            let hit =
                (0..self.m).all(|i| x[i] as i64 - y[i] as i64 == self.consumption(i, j) as i64);
            if hit {
                rate += self.choice.purchase_prob(s, j).unwrap();
            }
        }
        lambda * rate
    }

    /// Hamiltonian in shadow-price form:
    /// `sum_{j in S} [v(t, x - A^j) - v(t, x) + p_j] lambda(t) P_j(S)`.
    pub fn hamiltonian<V: Fn(f64, &[u32]) -> f64>(
        &self,
        t: f64,
        x: &[u32],
        s: Assortment,
        v: V,
    ) -> f64 {
        assert!(
            self.is_feasible(x, s),
            "assortment {s:?} infeasible at {x:?}"
        );
        let lambda = self.arrival.evaluate(t);
        let here = v(t, x);
        let mut y = x.to_vec();
        let mut total = 0.0;
        for j in s.iter() {
            y.copy_from_slice(x);
            self.sell(&mut y, j);
            let pj = self.choice.purchase_prob(s, j).unwrap();
            total += (v(t, &y) - here + self.prices[j]) * lambda * pj;
        }
        total
    }

    /// Every feasible assortment at `x`, i.e. the power set of the available products.
    pub fn feasible_assortments(&self, x: &[u32]) -> Result<SubsetIter, ModelError> {
        if self.n > ENUMERATION_LIMIT {
            return Err(ModelError::EnumerationLimit(self.n));
        }
        Ok(self.available(x).subsets())
    }

    /// Number of inventory states, `prod (c_i + 1)`, or `None` on overflow.
    pub fn state_count(&self) -> Option<usize> {
        self.capacity
            .iter()
            .try_fold(1usize, |acc, &c| acc.checked_mul(c as usize + 1))
    }
}

/// Mixed-radix indexing of the inventory lattice `0 <= x <= c`.
#[derive(Debug, Clone)]
pub struct StateIndexer {
    capacity: Vec<u32>,
    strides: Vec<usize>,
    count: usize,
}

impl StateIndexer {
    pub fn new(capacity: &[u32]) -> Option<Self> {
        let mut strides = Vec::with_capacity(capacity.len());
        let mut count = 1usize;
        for &c in capacity {
            strides.push(count);
            count = count.checked_mul(c as usize + 1)?;
        }
        Some(StateIndexer {
            capacity: capacity.to_vec(),
            strides,
            count,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    #[inline]
    pub fn index(&self, x: &[u32]) -> usize {
        x.iter()
            .zip(&self.strides)
            .map(|(&xi, &s)| xi as usize * s)
            .sum()
    }

    pub fn state(&self, mut idx: usize) -> Vec<u32> {
        let mut x = vec![0; self.capacity.len()];
        for (i, &c) in self.capacity.iter().enumerate() {
            let r = c as usize + 1;
            x[i] = (idx % r) as u32;
            idx /= r;
        }
        x
    }
}

/// Serialized form of a network instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub m: usize,
    pub n: usize,
    /// Row-major `m x n` resource consumption.
    #[serde(rename = "A")]
    pub a: Vec<u32>,
    pub p: Vec<f64>,
    pub c: Vec<u32>,
    #[serde(rename = "T")]
    pub t: f64,
    pub arrival: RateProfile,
    pub segments: Vec<Segment>,
}

impl TryFrom<NetworkSpec> for NetworkInstance {
    type Error = ModelError;

    fn try_from(s: NetworkSpec) -> Result<Self, ModelError> {
        if s.a.len() != s.m * s.n {
            return invalid(format!(
                "A has {} entries, expected m * n = {}",
                s.a.len(),
                s.m * s.n
            ));
        }
        if s.p.len() != s.n {
            return invalid(format!("p has {} entries, expected n = {}", s.p.len(), s.n));
        }
        if s.c.len() != s.m {
            return invalid(format!("c has {} entries, expected m = {}", s.c.len(), s.m));
        }
        let rows = if s.n == 0 {
            vec![Vec::new(); s.m]
        } else {
            s.a.chunks(s.n).map(<[u32]>::to_vec).collect()
        };
        let choice = SegmentedMnl::new(s.segments, s.n)?;
        let arrival = ArrivalRate::new(s.arrival, s.t)?;
        NetworkInstance::new(rows, s.p, s.c, s.t, arrival, choice)
    }
}

impl From<NetworkInstance> for NetworkSpec {
    fn from(inst: NetworkInstance) -> Self {
        NetworkSpec {
            m: inst.m,
            n: inst.n,
            a: inst.consumption_rows().concat(),
            p: inst.prices,
            c: inst.capacity,
            t: inst.horizon,
            arrival: inst.arrival.profile().clone(),
            segments: inst.choice.segments,
        }
    }
}
