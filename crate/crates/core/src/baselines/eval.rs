//! Monte-Carlo evaluation of any policy.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::NetworkInstance;
use crate::policy::Policy;
use crate::simulate::{roll_episode, RngStream};

/// Two-sided 99% normal quantile.
pub const Z99: f64 = 2.576;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub mean: f64,
    /// Half-width `Z99 * sd / sqrt(paths)`.
    pub ci99: f64,
    pub paths: usize,
    pub wallclock_s: f64,
}

impl EvalReport {
    /// Summary of a list of per-path outcomes.
    pub fn from_samples(label: &str, samples: &[f64], wallclock_s: f64) -> Self {
        let (mean, se) = mean_se(samples);
        EvalReport {
            label: label.to_string(),
            mean,
            ci99: Z99 * se,
            paths: samples.len(),
            wallclock_s,
        }
    }

    /// Standard error of the mean.
    pub fn se(&self) -> f64 {
        self.ci99 / Z99
    }
}

/// Sample mean and standard error (sample standard deviation over `sqrt(n)`).
pub fn mean_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Total revenue of `paths` episodes on child streams of `rng`, in path order.
pub fn revenue_samples<P: Policy + ?Sized>(
    inst: &NetworkInstance,
    policy: &P,
    paths: usize,
    rng: &RngStream,
) -> Vec<f64> {
    (0..paths)
        .into_par_iter()
        .map(|k| roll_episode(inst, policy, &mut rng.child(k as u64)).total_reward())
        .collect()
}

/// Average revenue with a 99% confidence half-width; entropy is not included.
pub fn evaluate<P: Policy + ?Sized>(
    inst: &NetworkInstance,
    policy: &P,
    label: &str,
    paths: usize,
    rng: &RngStream,
) -> EvalReport {
    assert!(paths >= 2, "evaluation needs at least two paths");
    let start = Instant::now();
    let samples = revenue_samples(inst, policy, paths, rng);
    EvalReport::from_samples(label, &samples, start.elapsed().as_secs_f64())
}
