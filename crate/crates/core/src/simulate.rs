//! Event-driven simulation of the controlled inventory process.
//!
//! Customers arrive by a (possibly thinned) Poisson process; the policy is
//! queried only at arrival instants with the pre-arrival inventory, and only
//! arrivals that end in a purchase are recorded.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{Assortment, NetworkInstance};
use crate::policy::Policy;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded ChaCha stream with deterministic child derivation.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for child `index`; does not advance `self`.
    pub fn child(&self, index: u64) -> RngStream {
        RngStream::new(splitmix64(
            self.seed ^ splitmix64(index ^ 0xA076_1D64_78BD_642F),
        ))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform on `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Exponential with the given rate.
    #[inline]
    pub fn exponential(&mut self, rate: f64) -> f64 {
        let e: f64 = self.rng.sample(Exp1);
        e / rate
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// One state-changing event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpRecord {
    pub tau: f64,
    /// Post-jump state.
    pub state: Vec<u32>,
    /// Assortment offered to the customer who caused the jump.
    pub assortment: Assortment,
    /// Index of the sold product (queue paths: 0 = admission, 1 = departure).
    pub product: usize,
    pub reward: f64,
}

/// Jump records of one episode, with implicit sentinels at `0` and `T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub x0: Vec<u32>,
    pub horizon: f64,
    pub records: Vec<JumpRecord>,
}

impl Trajectory {
    pub fn new(x0: Vec<u32>, horizon: f64) -> Self {
        Trajectory {
            x0,
            horizon,
            records: Vec::new(),
        }
    }

    /// Number of jumps `L`.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.records.iter().map(|r| r.reward).sum()
    }

    /// State held on interval `l` (`x0` for `l = 0`).
    pub fn state_before(&self, l: usize) -> &[u32] {
        if l == 0 {
            &self.x0
        } else {
            &self.records[l - 1].state
        }
    }

    pub fn final_state(&self) -> &[u32] {
        self.state_before(self.records.len())
    }

    /// Interval `l` in `0..=L`: `(tau_l, tau_{l+1}, x_l)`.
    pub fn interval(&self, l: usize) -> (f64, f64, &[u32]) {
        let start = if l == 0 { 0.0 } else { self.records[l - 1].tau };
        let end = if l == self.records.len() {
            self.horizon
        } else {
            self.records[l].tau
        };
        (start, end, self.state_before(l))
    }

    pub fn intervals(&self) -> impl Iterator<Item = (f64, f64, &[u32])> + '_ {
        (0..=self.records.len()).map(move |l| self.interval(l))
    }
}

/// Outcome of advancing the simulator to the next state change.
#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Jump {
        tau: f64,
        product: usize,
        assortment: Assortment,
        reward: f64,
    },
    HorizonEnd,
}

/// Advances from `(t, x)` to the next purchase, or reports the end of the horizon.
pub fn next_event<P: Policy + ?Sized>(
    inst: &NetworkInstance,
    mut t: f64,
    x: &[u32],
    policy: &P,
    rng: &mut RngStream,
) -> Event {
    let avail = inst.available(x);
    let rate = inst.arrival();
    let upper = rate.max();
    if avail.is_empty() || upper <= 0.0 {
        return Event::HorizonEnd;
    }
    let horizon = inst.horizon();
    let thin = !rate.is_constant();
    loop {
        t += rng.exponential(upper);
        if t >= horizon {
            return Event::HorizonEnd;
        }
        if thin && rng.uniform() * upper >= rate.evaluate(t) {
            continue;
        }
        let s = policy.sample(t, x, avail, rng);
        assert!(
            s.is_subset_of(avail),
            "policy offered infeasible assortment {s:?} at {x:?}"
        );
        if let Some(j) = inst.choice().sample_choice(s, rng.uniform()) {
            return Event::Jump {
                tau: t,
                product: j,
                assortment: s,
                reward: inst.prices()[j],
            };
        }
    }
}

/// Simulates one episode from `(0, c)`.
pub fn roll_episode<P: Policy + ?Sized>(
    inst: &NetworkInstance,
    policy: &P,
    rng: &mut RngStream,
) -> Trajectory {
    let mut traj = Trajectory::new(inst.capacity().to_vec(), inst.horizon());
    let mut x = inst.capacity().to_vec();
    let mut t = 0.0;
    while let Event::Jump {
        tau,
        product,
        assortment,
        reward,
    } = next_event(inst, t, &x, policy, rng)
    {
        inst.sell(&mut x, product);
        traj.records.push(JumpRecord {
            tau,
            state: x.clone(),
            assortment,
            product,
            reward,
        });
        t = tau;
    }
    traj
}

/// `count` episodes on child streams `0..count` of `rng`, in episode order.
pub fn roll_batch<P: Policy + ?Sized>(
    inst: &NetworkInstance,
    policy: &P,
    count: usize,
    rng: &RngStream,
) -> Vec<Trajectory> {
    (0..count)
        .into_par_iter()
        .map(|k| roll_episode(inst, policy, &mut rng.child(k as u64)))
        .collect()
}
