//! Level replication counts and the multilevel estimator `Z(θ, s, K)`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::level_family::{CostModel, LevelFamily, Stream};
use crate::numerics::{snap_ceil, CompensatedSum};
use crate::params::ParameterSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationPlan {
    pub s: u32,
    #[serde(rename = "K")]
    pub budget: f64,
    /// `[N_1, ..., N_s]`, nonincreasing, all ≥ 1.
    pub counts: Vec<u64>,
}

impl ReplicationPlan {
    pub fn total_samples(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `Σ_k N_k C_k(θ)`.
    pub fn cost(&self, model: &dyn CostModel, theta: &DVector<f64>) -> Result<f64> {
        let mut total = CompensatedSum::new();
        for (k, &n) in (1..).zip(&self.counts) {
            total.add(n as f64 * model.level_cost(theta, k)?);
        }
        Ok(total.value())
    }
}

/// `N_k = ⌈(K/M^s) M^{((β+1)/2)(s−k)}⌉` for `k = 1..=s`.
///
/// The real value is formed with a single power `K·M^{((β+1)/2)(s−k) − s}`
/// and snapped to an integer within relative `1e−12` before the ceiling, so
/// exact ratios such as `K/M^k = 5` stay at 5.
pub fn counts(scale: f64, beta: f64, s: u32, budget: f64) -> Result<ReplicationPlan> {
    if s == 0 {
        return Err(Error::Domain("number of levels s must be at least 1".into()));
    }
    if !(budget > 0.0 && budget.is_finite()) {
        return Err(Error::Domain(format!("budget K must be positive, got {budget}")));
    }
    let half = (beta + 1.0) / 2.0;
    let counts = (1..=s)
        .map(|k| {
            let exponent = half * f64::from(s - k) - f64::from(s);
            let n = snap_ceil(budget * scale.powf(exponent));
            (n as u64).max(1)
        })
        .collect();
    Ok(ReplicationPlan { s, budget, counts })
}

pub fn replication_counts(params: &ParameterSet, s: u32, budget: f64) -> Result<ReplicationPlan> {
    counts(params.scale(), params.beta(), s, budget)
}

/// How the per-level sample means are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Every one of the `N_k` samples is drawn individually.
    PerSample,
    /// Each level mean is drawn through
    /// [`LevelFamily::accumulate_level_mean`], which families may implement
    /// with an exact closed-form law.
    #[default]
    LevelAggregate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub z: DVector<f64>,
    /// `Σ_k N_k`, the number of level-difference samples represented by `z`.
    pub samples_drawn: u64,
}

/// `Z = Σ_k (1/N_k) Σ_l (F_k − F_{k−1})`, drawing level-major, sample-minor.
pub fn estimate(
    family: &dyn LevelFamily,
    theta: &DVector<f64>,
    plan: &ReplicationPlan,
    rng: &mut Stream,
    mode: SamplingMode,
) -> Result<Estimate> {
    let d = family.dim();
    if theta.len() != d {
        return Err(Error::Dimension {
            expected: d,
            got: theta.len(),
        });
    }
    let mut z = DVector::zeros(d);
    for (k, &n) in (1..).zip(&plan.counts) {
        match mode {
            SamplingMode::PerSample => {
                let mut sum = DVector::zeros(d);
                for _ in 0..n {
                    sum += family.sample_level_diff(theta, k, rng)?;
                }
                z += sum / n as f64;
            }
            SamplingMode::LevelAggregate => {
                family.accumulate_level_mean(theta, k, n, rng, &mut z)?;
            }
        }
    }
    Ok(Estimate {
        z,
        samples_drawn: plan.total_samples(),
    })
}
