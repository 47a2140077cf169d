//! Replicated runs and the statistics that confront them with the limit
//! theorems: CLT checks, the restricted L² monitor and cost curves.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::asymptotics::{predict_at, AsymptoticPrediction};
use crate::error::{Error, Result};
use crate::level_family::GroundTruth;
use crate::params::{ParameterSet, Regime, Schedule};
use crate::sa_driver::{run, Problem, RunRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicationSpec {
    pub replicas: u64,
    pub n_final: u64,
    /// Strictly increasing; `n_final` is appended when missing.
    pub checkpoints: Vec<u64>,
    pub master_seed: u64,
    /// Screening radius around `θ*`; defaults to `10‖θ_0 − θ*‖`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence_radius: Option<f64>,
}

impl ReplicationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.replicas < 2 {
            return Err(Error::Config(format!("replicas must be at least 2, got {}", self.replicas)));
        }
        if self.n_final == 0 {
            return Err(Error::Config("n_final must be positive".into()));
        }
        if self.checkpoints.first() == Some(&0) || self.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("checkpoints must be positive and strictly increasing".into()));
        }
        if self.checkpoints.last().is_some_and(|&c| c > self.n_final) {
            return Err(Error::Config("checkpoint beyond n_final".into()));
        }
        if self.divergence_radius.is_some_and(|r| !(r > 0.0)) {
            return Err(Error::Config("divergence_radius must be positive".into()));
        }
        Ok(())
    }

    pub fn checkpoint_set(&self) -> Vec<u64> {
        let mut cps = self.checkpoints.clone();
        if cps.last() != Some(&self.n_final) {
            cps.push(self.n_final);
        }
        cps
    }
}

/// Runs every replica `i ∈ [0, R)` on stream `i` of `master_seed` (see
/// [`crate::level_family::replica_stream`]) using `workers` threads.
///
/// Records come back in replica order whatever the scheduling.
pub fn run_replicas(
    spec: &ReplicationSpec,
    problem: &Problem<'_>,
    theta0: &DVector<f64>,
    workers: usize,
) -> Result<Vec<RunRecord>> {
    spec.validate()?;
    let cps = spec.checkpoint_set();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        (0..spec.replicas)
            .into_par_iter()
            .map(|i| run(problem, theta0, spec.n_final, &cps, spec.master_seed, i))
            .collect()
    })
}

fn checkpoint_index(record: &RunRecord, n: u64) -> Option<usize> {
    record.checkpoints.binary_search_by_key(&n, |c| c.n).ok()
}

/// Indices of valid replicas whose final recorded iterate lies within
/// `radius` of `θ*`.
pub fn screen(records: &[RunRecord], theta_star: &DVector<f64>, radius: f64) -> Vec<usize> {
    records
        .iter()
        .enumerate()
        .filter(|(_, r)| {
            r.valid
                && r.checkpoints.last().is_some_and(|c| {
                    (DVector::from_column_slice(&c.theta) - theta_star).norm() <= radius
                })
        })
        .map(|(i, _)| i)
        .collect()
}

pub fn default_radius(theta0: &DVector<f64>, theta_star: &DVector<f64>) -> f64 {
    let d = (theta0 - theta_star).norm();
    if d > 0.0 {
        10.0 * d
    } else {
        10.0
    }
}

/// `P(√R·D ≤ x)` for the Kolmogorov distribution, 20-term series.
pub fn kolmogorov_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let tail: f64 = (1..=20)
        .map(|j| {
            let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
            sign * (-2.0 * (j * j) as f64 * x * x).exp()
        })
        .sum();
    (1.0 - 2.0 * tail).clamp(0.0, 1.0)
}

/// `x` with `P(√R·D > x) = level`.
pub fn kolmogorov_critical(level: f64) -> f64 {
    let (mut lo, mut hi) = (0.2, 5.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if 1.0 - kolmogorov_cdf(mid) > level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// One-sample KS distance of `xs` from the standard normal.
pub fn ks_statistic(xs: &[f64]) -> f64 {
    let normal = Normal::standard();
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal.cdf(x);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsComponent {
    pub statistic: f64,
    /// Asymptotic p-value `1 − K(√R·D)`.
    pub p_value: f64,
    pub critical: f64,
    pub pass: bool,
}

/// Minimum screened sample size below which a report is flagged.
pub const MIN_POWERED: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltStatistics {
    pub samples: usize,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
    /// `‖Σ̂ − Σ*‖_F / ‖Σ*‖_F`.
    pub frobenius_relative: f64,
    /// Per-component `m̂_j ± z_{1−level/2}·√(Σ̂_jj/R)`.
    pub mean_band: Vec<[f64; 2]>,
    pub ks_level: f64,
    pub ks: Vec<KsComponent>,
    pub ks_pass: bool,
    pub underpowered: bool,
    /// `Σ*^{−1/2} ζ_i`, one row per sample.
    pub standardized: Vec<Vec<f64>>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Symmetric inverse square root of a positive definite matrix.
fn inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let tol = 1e-12 * eig.eigenvalues.amax();
    if eig.eigenvalues.iter().any(|&l| !(l > tol)) {
        return Err(Error::Domain("target covariance must be positive definite".into()));
    }
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt())) * v.transpose())
}

impl CltStatistics {
    /// Moments, Frobenius distance and component-wise KS of `Σ*^{−1/2} ζ_i`
    /// against `N(0, 1)` with Bonferroni level `ks_level / d`.
    pub fn from_samples(zeta: &[DVector<f64>], target: &DMatrix<f64>, ks_level: f64) -> Result<Self> {
        let r = zeta.len();
        if r < 2 {
            return Err(Error::InsufficientSamples { got: r, min: 2 });
        }
        if !(ks_level > 0.0 && ks_level < 1.0) {
            return Err(Error::Domain(format!("KS level must lie in (0, 1), got {ks_level}")));
        }
        let d = target.nrows();
        if let Some(bad) = zeta.iter().find(|z| z.len() != d) {
            return Err(Error::Dimension {
                expected: d,
                got: bad.len(),
            });
        }
        if target.iter().all(|&x| x == 0.0) {
            return Err(Error::Domain("target covariance is zero (Γ = 0)".into()));
        }
        let rf = r as f64;
        let mean = zeta.iter().fold(DVector::zeros(d), |a, z| a + z) / rf;
        let mut cov = DMatrix::zeros(d, d);
        for z in zeta {
            let c = z - &mean;
            cov += &c * c.transpose();
        }
        cov /= rf - 1.0;
        let frobenius_relative = (&cov - target).norm() / target.norm();

        let whiten = inv_sqrt(target)?;
        let per_test = ks_level / d as f64;
        let crit = kolmogorov_critical(per_test) / rf.sqrt();
        let white: Vec<DVector<f64>> = zeta.iter().map(|z| &whiten * z).collect();
        let ks: Vec<KsComponent> = (0..d)
            .map(|j| {
                let xs: Vec<f64> = white.iter().map(|w| w[j]).collect();
                let statistic = ks_statistic(&xs);
                KsComponent {
                    statistic,
                    p_value: 1.0 - kolmogorov_cdf(rf.sqrt() * statistic),
                    critical: crit,
                    pass: statistic <= crit,
                }
            })
            .collect();
        let z = Normal::standard().inverse_cdf(1.0 - ks_level / 2.0);
        let mean_band = (0..d)
            .map(|j| {
                let half = z * (cov[(j, j)] / rf).sqrt();
                [mean[j] - half, mean[j] + half]
            })
            .collect();
        Ok(Self {
            samples: r,
            mean: mean.iter().copied().collect(),
            covariance: rows(&cov),
            target: rows(target),
            frobenius_relative,
            mean_band,
            ks_level,
            ks_pass: ks.iter().all(|k| k.pass),
            ks,
            underpowered: r < MIN_POWERED,
            standardized: white.iter().map(|w| w.iter().copied().collect()).collect(),
        })
    }

    pub fn mean_norm(&self) -> f64 {
        self.mean.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// `Σ* = H⁻¹Γ(H⁻¹)ᵀ`.
pub fn target_covariance(truth: &GroundTruth) -> Result<DMatrix<f64>> {
    if truth.gamma.iter().all(|&x| x == 0.0) {
        return Err(Error::Domain("Γ = 0 has no CLT target".into()));
    }
    let inv = truth
        .h
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Domain("H is singular".into()))?;
    Ok(&inv * &truth.gamma * inv.transpose())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltReport {
    pub checkpoint: u64,
    pub regime: Regime,
    pub replicas: usize,
    pub screened: usize,
    pub screened_fraction: f64,
    pub divergence_radius: f64,
    pub prediction: AsymptoticPrediction,
    /// `ε^bias H⁻¹μ` added to `θ̄_n − θ*` before normalizing (slow only).
    pub centering: Vec<f64>,
    pub statistics: CltStatistics,
    pub mean_cost: f64,
    pub cost_ratio: f64,
}

/// Normalized samples `ζ_i` at checkpoint `n` for the screened replicas.
///
/// Slow: `(θ̄_n − θ* + ε^bias H⁻¹μ)/ε^diff`; critical: `(θ̄_n − θ*)/ε^diff`,
/// with the closed-form `ε` of [`crate::asymptotics`].
pub fn normalized_samples(
    records: &[RunRecord],
    screened: &[usize],
    truth: &GroundTruth,
    prediction: &AsymptoticPrediction,
) -> Result<(Vec<DVector<f64>>, DVector<f64>)> {
    let centering = match prediction.eps_bias {
        Some(eb) => {
            let inv = truth
                .h
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::Domain("H is singular".into()))?;
            inv * &truth.mu * eb
        }
        None => DVector::zeros(truth.theta_star.len()),
    };
    let zeta = screened
        .iter()
        .map(|&i| {
            let rec = &records[i];
            let idx = checkpoint_index(rec, prediction.n)
                .ok_or_else(|| Error::Domain(format!("checkpoint {} missing in replica {i}", prediction.n)))?;
            let bar = DVector::from_column_slice(&rec.checkpoints[idx].theta_bar);
            Ok((bar - &truth.theta_star + &centering) / prediction.eps_diff)
        })
        .collect::<Result<_>>()?;
    Ok((zeta, centering))
}

/// Full CLT check at checkpoint `n`.
pub fn clt_report(
    records: &[RunRecord],
    schedule: &Schedule,
    truth: &GroundTruth,
    n: u64,
    divergence_radius: f64,
    ks_level: f64,
) -> Result<CltReport> {
    let params = schedule.params();
    let target = target_covariance(truth)?;
    let prediction = predict_at(params, &schedule.schedule_at(n)?)?;
    let screened = screen(records, &truth.theta_star, divergence_radius);
    let (zeta, centering) = normalized_samples(records, &screened, truth, &prediction)?;
    let statistics = CltStatistics::from_samples(&zeta, &target, ks_level)?;
    let mean_cost = mean_cost_at(records, &screened, n);
    Ok(CltReport {
        checkpoint: n,
        regime: params.regime(),
        replicas: records.len(),
        screened: screened.len(),
        screened_fraction: screened.len() as f64 / records.len() as f64,
        divergence_radius,
        centering: centering.iter().copied().collect(),
        statistics,
        mean_cost,
        cost_ratio: mean_cost / prediction.predicted_cost,
        prediction,
    })
}

fn mean_cost_at(records: &[RunRecord], screened: &[usize], n: u64) -> f64 {
    let costs: Vec<f64> = screened
        .iter()
        .filter_map(|&i| checkpoint_index(&records[i], n).map(|j| records[i].checkpoints[j].cost))
        .collect();
    costs.iter().sum::<f64>() / costs.len().max(1) as f64
}

/// `δ_n` of the a priori L² bound.
///
/// Slow: `n^{−(φ+1)𝔯 + (1−ψ)/2}`; critical: `n^{−(ψ+φ)/2} √log n`.
pub fn l2_rate(params: &ParameterSet, n: u64) -> f64 {
    let nf = n as f64;
    match params.regime() {
        Regime::Slow => nf.powf(-(params.phi() + 1.0) * params.rate() + (1.0 - params.psi()) / 2.0),
        Regime::Critical => nf.powf(-(params.psi() + params.phi()) / 2.0) * nf.ln().sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L2Point {
    pub n: u64,
    /// Replicas that stayed in `B_ε(θ*)` on `[n₀, n−1]`.
    pub restricted: usize,
    /// `δ_n^{−1} (R^{−1} Σ_i 1{restricted_i} |θ_n^i − θ*|²)^{1/2}`.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L2Window {
    pub from: u64,
    pub to: u64,
    pub points: usize,
    pub mean: Option<f64>,
    /// No checkpoint in the window had a restricted replica.
    pub empty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L2Monitor {
    pub epsilon: f64,
    pub n0: u64,
    pub screened: usize,
    pub points: Vec<L2Point>,
    pub windows: Vec<L2Window>,
    /// Last-window mean over first-window mean.
    pub ratio: Option<f64>,
    pub threshold: f64,
    pub bounded: Option<bool>,
}

/// Windowed normalized restricted L² error of `θ_n`.
///
/// The restriction over `[n₀, n−1]` is read from the per-checkpoint
/// excursions; it is exact when `n₀` is 0 or a checkpoint and otherwise
/// conservatively includes iterates back to the preceding checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn l2_monitor(
    records: &[RunRecord],
    params: &ParameterSet,
    theta_star: &DVector<f64>,
    screened: &[usize],
    epsilon: f64,
    n0: u64,
    windows: &[(u64, u64)],
    threshold: f64,
) -> Result<L2Monitor> {
    if !(epsilon > 0.0) {
        return Err(Error::Domain("restriction radius ε must be positive".into()));
    }
    if windows.iter().any(|&(a, b)| a > b) || windows.windows(2).any(|w| w[0].1 >= w[1].0) {
        return Err(Error::Domain("windows must be ordered and disjoint".into()));
    }
    if screened.is_empty() {
        return Err(Error::InsufficientSamples { got: 0, min: 1 });
    }
    let reference = &records[screened[0]];
    let mut points = Vec::new();
    for (j, cp) in reference.checkpoints.iter().enumerate() {
        let n = cp.n;
        if n <= n0 {
            continue;
        }
        let mut sum = 0.0;
        let mut restricted = 0;
        for &i in screened {
            let rec = &records[i];
            let Some(cps) = rec.checkpoints.get(..=j) else { continue };
            if cps[j].n != n {
                return Err(Error::Domain("replicas disagree on checkpoints".into()));
            }
            let stayed = cps
                .iter()
                .filter(|c| c.n > n0)
                .all(|c| c.excursion.is_some_and(|e| e <= epsilon));
            if stayed {
                restricted += 1;
                sum += (DVector::from_column_slice(&cps[j].theta) - theta_star).norm_squared();
            }
        }
        let value = (sum / screened.len() as f64).sqrt() / l2_rate(params, n);
        points.push(L2Point { n, restricted, value });
    }
    let windows: Vec<L2Window> = windows
        .iter()
        .map(|&(from, to)| {
            let inside: Vec<&L2Point> = points.iter().filter(|p| p.n >= from && p.n <= to).collect();
            let populated: Vec<f64> = inside.iter().filter(|p| p.restricted > 0).map(|p| p.value).collect();
            L2Window {
                from,
                to,
                points: inside.len(),
                mean: (!populated.is_empty()).then(|| populated.iter().sum::<f64>() / populated.len() as f64),
                empty: populated.is_empty(),
            }
        })
        .collect();
    let ratio = match (windows.first(), windows.last()) {
        (Some(a), Some(b)) if windows.len() >= 2 => match (a.mean, b.mean) {
            (Some(x), Some(y)) if x > 0.0 => Some(y / x),
            _ => None,
        },
        _ => None,
    };
    Ok(L2Monitor {
        epsilon,
        n0,
        screened: screened.len(),
        points,
        windows,
        ratio,
        threshold,
        bounded: ratio.map(|r| r <= threshold),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub n: u64,
    pub mean_cost: f64,
    pub predicted_cost: f64,
    pub ratio: f64,
    /// `√(mean ‖θ̄_n − θ*‖²)` over screened replicas, when `θ*` is known.
    pub rms_error: Option<f64>,
    pub eps_bias: Option<f64>,
    pub eps_diff: f64,
}

/// Mean simulated cost against the predicted cost at every checkpoint
/// (critical runs skip `n = 1`).
pub fn cost_curve(
    records: &[RunRecord],
    screened: &[usize],
    schedule: &Schedule,
    theta_star: Option<&DVector<f64>>,
) -> Result<Vec<CostRow>> {
    let Some(&first) = screened.first() else {
        return Ok(Vec::new());
    };
    let ns: Vec<u64> = records[first].checkpoints.iter().map(|c| c.n).collect();
    let predictions = crate::asymptotics::prediction_table(schedule, &ns)?;
    let mut out = Vec::with_capacity(predictions.len());
    for pred in predictions {
        let mean_cost = mean_cost_at(records, screened, pred.n);
        let rms_error = theta_star.map(|t| {
            let sq: f64 = screened
                .iter()
                .filter_map(|&i| {
                    checkpoint_index(&records[i], pred.n)
                        .map(|j| (DVector::from_column_slice(&records[i].checkpoints[j].theta_bar) - t).norm_squared())
                })
                .sum();
            (sq / screened.len() as f64).sqrt()
        });
        out.push(CostRow {
            n: pred.n,
            mean_cost,
            predicted_cost: pred.predicted_cost,
            ratio: mean_cost / pred.predicted_cost,
            rms_error,
            eps_bias: pred.eps_bias,
            eps_diff: pred.eps_diff,
        });
    }
    Ok(out)
}

pub fn cost_curve_csv(rows: &[CostRow]) -> String {
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:e}"));
    let mut out = String::from("n,mean_cost,predicted_cost,ratio,rms_error,eps_bias,eps_diff\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:e},{:e},{:e},{},{},{:e}",
            r.n,
            r.mean_cost,
            r.predicted_cost,
            r.ratio,
            opt(r.rms_error),
            opt(r.eps_bias),
            r.eps_diff
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::level_family::{replica_stream, GeometricCost, LevelFamily, Stream, SyntheticGaussianFamily};
    use crate::ml_estimator::{ReplicationPlan, SamplingMode};
    use crate::params::Parameters;
    use crate::sa_driver::{advance, Projection, RunState};
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;
    use std::collections::HashSet;

    fn family(gamma: f64, mu: f64) -> SyntheticGaussianFamily {
        SyntheticGaussianFamily::new(
            DVector::zeros(1),
            DMatrix::from_element(1, 1, -1.0),
            DVector::from_element(1, mu),
            DMatrix::from_element(1, 1, gamma),
            1.0,
            0.5,
            2.0,
        )
        .unwrap()
    }

    fn spec(replicas: u64, n_final: u64, seed: u64) -> ReplicationSpec {
        ReplicationSpec {
            replicas,
            n_final,
            checkpoints: vec![10, 50],
            master_seed: seed,
            divergence_radius: None,
        }
    }

    fn with_problem<T>(fam: &dyn LevelFamily, sched: &Schedule, f: impl FnOnce(&Problem<'_>) -> T) -> T {
        let cost = GeometricCost::new(sched.params().kappa_c(), sched.params().scale());
        let proj = Projection::Identity;
        f(&Problem {
            schedule: sched,
            family: fam,
            cost: &cost,
            projection: &proj,
            sampling: SamplingMode::LevelAggregate,
        })
    }

    fn slow_schedule() -> Schedule {
        Schedule::new(ParameterSet::new(Parameters::default_slow()).unwrap())
    }

    #[test]
    fn replicas_are_deterministic_and_distinct() {
        let fam = family(1.0, 1.0);
        let sched = slow_schedule();
        with_problem(&fam, &sched, |p| {
            let t0 = DVector::from_element(1, 1.0);
            let a = run_replicas(&spec(4, 100, 9), p, &t0, 1).unwrap();
            let b = run_replicas(&spec(4, 100, 9), p, &t0, 3).unwrap();
            assert_eq!(a, b);
            let finals: HashSet<u64> = a.iter().map(|r| r.checkpoints.last().unwrap().theta[0].to_bits()).collect();
            assert!(finals.len() >= 2);
            assert_eq!(a[0].checkpoints.iter().map(|c| c.n).collect::<Vec<_>>(), vec![10, 50, 100]);
        });
    }

    #[test]
    fn replica_count_validated() {
        assert!(spec(1, 10, 0).validate().is_err());
        assert!(spec(0, 10, 0).validate().is_err());
        assert!(spec(2, 10, 0).validate().is_err()); // checkpoint 50 > 10
        assert!(spec(2, 100, 0).validate().is_ok());
    }

    #[test]
    fn stream_prefixes_unique() {
        let mut seen = HashSet::new();
        let mut rng = Stream::seed_from_u64(1);
        for _ in 0..10_000 {
            let i: u64 = rng.random_range(0..1u64 << 32);
            if !seen.insert(i) {
                continue;
            }
        }
        let mut prefixes = HashSet::new();
        for &i in &seen {
            let mut s = replica_stream(2024, i);
            let prefix: Vec<u64> = (0..64).map(|_| s.random()).collect();
            assert!(prefixes.insert(prefix), "replica {i} repeats a prefix");
        }
    }

    #[test]
    fn kolmogorov_critical_values() {
        // Classical asymptotic values.
        assert!((kolmogorov_critical(0.05) - 1.3581).abs() < 1e-3);
        assert!((kolmogorov_critical(0.01) - 1.6276).abs() < 1e-3);
        assert!((kolmogorov_cdf(1.3581) - 0.95).abs() < 1e-4);
    }

    #[test]
    fn ks_statistic_of_perfect_grid() {
        let normal = Normal::standard();
        let n = 1000;
        let xs: Vec<f64> = (0..n).map(|i| normal.inverse_cdf((i as f64 + 0.5) / n as f64)).collect();
        assert!((ks_statistic(&xs) - 0.5 / n as f64).abs() < 1e-8);
    }

    #[test]
    fn calibration_with_exact_normals() {
        let target = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let factor = crate::level_family::psd_sqrt(&target).unwrap();
        let mut rng = Stream::seed_from_u64(77);
        let mut passes = 0;
        let mut dist_small = Vec::new();
        let mut dist_large = Vec::new();
        for rep in 0..100 {
            let draw = |r: usize, rng: &mut Stream| -> Vec<DVector<f64>> {
                (0..r)
                    .map(|_| &factor * DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal)))
                    .collect()
            };
            let s = CltStatistics::from_samples(&draw(500, &mut rng), &target, 0.01).unwrap();
            passes += s.ks_pass as usize;
            if rep < 30 {
                dist_small.push(s.frobenius_relative);
                let big = CltStatistics::from_samples(&draw(8000, &mut rng), &target, 0.01).unwrap();
                dist_large.push(big.frobenius_relative);
            }
        }
        assert!(passes >= 98, "{passes}/100");
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        // 16× the samples ⇒ distance shrinks ≈ 4×.
        let ratio = mean(&dist_small) / mean(&dist_large);
        assert!((3.0..=5.3).contains(&ratio), "{ratio}");
    }

    #[test]
    fn zero_gamma_rejected() {
        let truth = family(0.0, 1.0).ground_truth().unwrap().clone();
        assert!(target_covariance(&truth).is_err());
        let zeta = vec![DVector::zeros(1); 5];
        assert!(CltStatistics::from_samples(&zeta, &DMatrix::zeros(1, 1), 0.01).is_err());
    }

    #[test]
    fn underpowered_flag() {
        let zeta: Vec<DVector<f64>> = (0..50).map(|i| DVector::from_element(1, i as f64 / 25.0 - 1.0)).collect();
        let s = CltStatistics::from_samples(&zeta, &DMatrix::identity(1, 1), 0.01).unwrap();
        assert!(s.underpowered);
    }

    #[test]
    fn report_is_pure_and_screens() {
        let fam = family(1.0, 1.0);
        let sched = slow_schedule();
        with_problem(&fam, &sched, |p| {
            let t0 = DVector::from_element(1, 1.0);
            let mut recs = run_replicas(&spec(120, 200, 4), p, &t0, 2).unwrap();
            recs[3].checkpoints.last_mut().unwrap().theta[0] = 1e6;
            let truth = fam.ground_truth().unwrap();
            let a = clt_report(&recs, &sched, truth, 200, 10.0, 0.01).unwrap();
            let b = clt_report(&recs, &sched, truth, 200, 10.0, 0.01).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.screened, 119);
            assert!(!a.statistics.underpowered);
            assert!(a.centering[0] < 0.0);
            let json = serde_json::to_string(&a).unwrap();
            let back: CltReport = serde_json::from_str(&json).unwrap();
            assert_eq!(back, a);
        });
    }

    #[test]
    fn l2_monitor_zero_noise_vanishes() {
        let fam = family(0.0, 0.0);
        let sched = slow_schedule();
        with_problem(&fam, &sched, |p| {
            let t0 = DVector::from_element(1, 1.0);
            let mut s = spec(2, 2000, 1);
            s.checkpoints = crate::sa_driver::geometric_checkpoints(2000, 1.5).unwrap();
            let recs = run_replicas(&s, p, &t0, 1).unwrap();
            let screened = vec![0, 1];
            let mon = l2_monitor(&recs, sched.params(), &DVector::zeros(1), &screened, 2.0, 0, &[(100, 300), (1000, 2000)], 2.0)
                .unwrap();
            let last = mon.windows[1].mean.unwrap();
            assert!(last < 1e-6, "{last}");
            assert!(mon.windows[0].mean.unwrap() < 1e-6);
        });
    }

    #[test]
    fn l2_monitor_flags_windows_outside_small_ball() {
        let fam = family(1.0, 1.0);
        let sched = slow_schedule();
        with_problem(&fam, &sched, |p| {
            let t0 = DVector::from_element(1, 1.0);
            let mut s = spec(50, 2000, 5);
            s.checkpoints = crate::sa_driver::geometric_checkpoints(2000, 1.2).unwrap();
            let recs = run_replicas(&s, p, &t0, 2).unwrap();
            let screened: Vec<usize> = (0..50).collect();
            // ε below |θ_0 − θ*| = 1: with n₀ = 0 nothing is ever restricted.
            let mon = l2_monitor(&recs, sched.params(), &DVector::zeros(1), &screened, 0.5, 0, &[(10, 40), (1000, 2000)], 2.0)
                .unwrap();
            assert!(mon.windows.iter().all(|w| w.empty));
            // Starting the restriction later populates the late window only.
            let mon = l2_monitor(&recs, sched.params(), &DVector::zeros(1), &screened, 0.5, 200, &[(201, 230), (1000, 2000)], 2.0)
                .unwrap();
            assert!(!mon.windows[1].empty);
            assert!(mon.points.iter().filter(|p| p.n >= 1000).all(|p| p.restricted > 0));
        });
        assert!(l2_monitor(&[], &ParameterSet::new(Parameters::default_slow()).unwrap(), &DVector::zeros(1), &[], 1.0, 0, &[(5, 1), (6, 9)], 2.0).is_err());
    }

    #[test]
    fn cost_curve_single_iteration_plan() {
        let fam = family(1.0, 0.0);
        let sched = slow_schedule();
        with_problem(&fam, &sched, |p| {
            let mut st = RunState::new(DVector::zeros(1), replica_stream(0, 0));
            let plan = ReplicationPlan {
                s: 3,
                budget: 10.0,
                counts: vec![5, 3, 2],
            };
            advance(p, &mut st, &sched.schedule_at(1).unwrap(), &plan).unwrap();
            let rec = RunRecord {
                master_seed: 0,
                stream: 0,
                checkpoints: vec![crate::sa_driver::Checkpoint {
                    n: 1,
                    theta: st.theta.iter().copied().collect(),
                    theta_bar: st.theta_bar.iter().copied().collect(),
                    cost: st.cost(),
                    level: 3,
                    excursion: Some(0.0),
                }],
                valid: true,
                abort: None,
            };
            let rows = cost_curve(&[rec], &[0], &sched, Some(&DVector::zeros(1))).unwrap();
            assert_eq!(rows[0].n, 1);
            assert_eq!(rows[0].mean_cost, 38.0);
        });
    }

    #[test]
    fn l2_rates() {
        let p = ParameterSet::new(Parameters::default_slow()).unwrap();
        // −3·0.4 + 0.375 = −0.825.
        assert!((l2_rate(&p, 1000) - 1000f64.powf(-0.825)).abs() < 1e-15);
        let c = ParameterSet::new(Parameters::default_critical()).unwrap();
        assert!((l2_rate(&c, 1000) - 1000f64.powf(-1.125) * 1000f64.ln().sqrt()).abs() < 1e-15);
    }
}
