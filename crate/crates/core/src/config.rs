//! Experiment configuration files and the end-to-end experiment they describe.
//!
//! A configuration is a TOML document with the sections `parameters`,
//! `family`, `projection`, `replication`, `analysis` and `output`; unknown keys
//! are rejected. Matrices are row-major nested lists.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::{
    clt_report, cost_curve, default_radius, l2_monitor, run_replicas, screen, CltReport, CostRow, L2Monitor,
    ReplicationSpec,
};
use crate::level_family::{EulerSdeFamily, GeometricCost, LevelFamily, LinearSde, Payoff, SyntheticGaussianFamily};
use crate::ml_estimator::SamplingMode;
use crate::params::{ParameterSet, Parameters, Schedule};
use crate::sa_driver::{geometric_checkpoints, Problem, Projection, RunRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilyConfig {
    /// Level orders and scale are taken from `parameters`.
    SyntheticGaussian {
        theta_star: Vec<f64>,
        h: Vec<Vec<f64>>,
        mu: Vec<f64>,
        gamma: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        quadratic: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        modulation: bool,
    },
    /// Requires an integer `scale` in `parameters`.
    EulerSde {
        sde: LinearSde,
        payoff: Payoff,
        /// Root of `E[payoff(X_T)] − θ`; the exact mean of `X_T` for the identity payoff when omitted.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicationConfig {
    pub replicas: u64,
    pub n_final: u64,
    pub master_seed: u64,
    /// Explicit checkpoints; geometric with `checkpoint_ratio` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<Vec<u64>>,
    #[serde(default = "default_ratio")]
    pub checkpoint_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence_radius: Option<f64>,
}

fn default_ratio() -> f64 {
    1.1
}

fn default_ks_level() -> f64 {
    0.01
}

fn default_l2_threshold() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub theta0: Vec<f64>,
    #[serde(default)]
    pub sampling: SamplingMode,
    /// Checkpoint of the CLT report; `n_final` when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clt_checkpoint: Option<u64>,
    #[serde(default = "default_ks_level")]
    pub ks_level: f64,
    /// Restriction radius; the divergence radius when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l2_epsilon: Option<f64>,
    #[serde(default)]
    pub l2_n0: u64,
    /// Disjoint `[from, to]` windows; `[N/16, N/8]` and `[N/2, N]` when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l2_windows: Option<Vec<[u64; 2]>>,
    #[serde(default = "default_l2_threshold")]
    pub l2_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
    #[serde(default = "yes")]
    pub plots: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub parameters: Parameters,
    pub family: FamilyConfig,
    #[serde(default = "identity")]
    pub projection: Projection,
    pub replication: ReplicationConfig,
    pub analysis: AnalysisConfig,
    pub output: OutputConfig,
}

fn identity() -> Projection {
    Projection::Identity
}

/// Hex-encoded SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config(format!("{name} must be a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    ///
    /// Formatting, comments and key order in the source file do not matter.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    pub fn replication_spec(&self) -> Result<ReplicationSpec> {
        let r = &self.replication;
        let checkpoints = match &r.checkpoints {
            Some(c) => c.clone(),
            None => geometric_checkpoints(r.n_final, r.checkpoint_ratio)?,
        };
        let spec = ReplicationSpec {
            replicas: r.replicas,
            n_final: r.n_final,
            checkpoints,
            master_seed: r.master_seed,
            divergence_radius: r.divergence_radius,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Validates every section and assembles the runnable experiment.
    pub fn build(&self) -> Result<Experiment> {
        let params = ParameterSet::new(self.parameters.clone())?;
        let family: Box<dyn LevelFamily> = match &self.family {
            FamilyConfig::SyntheticGaussian {
                theta_star,
                h,
                mu,
                gamma,
                quadratic,
                modulation,
            } => {
                let fam = SyntheticGaussianFamily::new(
                    DVector::from_column_slice(theta_star),
                    matrix(h, "h")?,
                    DVector::from_column_slice(mu),
                    matrix(gamma, "gamma")?,
                    params.alpha(),
                    params.beta(),
                    params.scale(),
                )?
                .with_modulation(*modulation);
                Box::new(match quadratic {
                    Some(q) => fam.with_quadratic(matrix(q, "quadratic")?)?,
                    None => fam,
                })
            }
            FamilyConfig::EulerSde { sde, payoff, target } => {
                let m = params.scale();
                if m.fract() != 0.0 || m > f64::from(u32::MAX) {
                    return Err(Error::Config("euler_sde needs an integer scale".into()));
                }
                let target = match (target, payoff) {
                    (Some(t), _) => Some(*t),
                    (None, Payoff::Identity) => Some(EulerSdeFamily::exact_mean(sde)),
                    (None, _) => None,
                };
                Box::new(EulerSdeFamily::new(*sde, *payoff, m as u32, target)?)
            }
        };
        let d = family.dim();
        self.projection.check(d)?;
        let theta0 = DVector::from_column_slice(&self.analysis.theta0);
        if theta0.len() != d {
            return Err(Error::Dimension {
                expected: d,
                got: theta0.len(),
            });
        }
        let spec = self.replication_spec()?;
        let a = &self.analysis;
        if !(a.ks_level > 0.0 && a.ks_level < 1.0) {
            return Err(Error::Config("ks_level must lie in (0, 1)".into()));
        }
        if let Some(n) = a.clt_checkpoint {
            if !spec.checkpoint_set().contains(&n) {
                return Err(Error::Config(format!("clt_checkpoint {n} is not a checkpoint")));
            }
        }
        let radius = match (spec.divergence_radius, family.target()) {
            (Some(r), _) => r,
            (None, Some(t)) => default_radius(&theta0, t),
            (None, None) => f64::INFINITY,
        };
        let n = spec.n_final;
        let windows = a
            .l2_windows
            .as_ref()
            .map(|w| w.iter().map(|&[x, y]| (x, y)).collect())
            .unwrap_or_else(|| vec![(n / 16, n / 8), (n / 2, n)]);
        Ok(Experiment {
            cost: GeometricCost::new(params.kappa_c(), params.scale()),
            schedule: Schedule::new(params),
            family,
            projection: self.projection.clone(),
            sampling: a.sampling,
            spec,
            theta0,
            radius,
            clt_checkpoint: a.clt_checkpoint.unwrap_or(n),
            ks_level: a.ks_level,
            l2_epsilon: a.l2_epsilon.unwrap_or(radius),
            l2_n0: a.l2_n0,
            l2_windows: windows,
            l2_threshold: a.l2_threshold,
        })
    }
}

/// A validated, runnable experiment.
pub struct Experiment {
    pub schedule: Schedule,
    pub family: Box<dyn LevelFamily>,
    pub cost: GeometricCost,
    pub projection: Projection,
    pub sampling: SamplingMode,
    pub spec: ReplicationSpec,
    pub theta0: DVector<f64>,
    /// Effective screening radius.
    pub radius: f64,
    pub clt_checkpoint: u64,
    pub ks_level: f64,
    pub l2_epsilon: f64,
    pub l2_n0: u64,
    pub l2_windows: Vec<(u64, u64)>,
    pub l2_threshold: f64,
}

/// Why an analysis was not produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Analysis<T> {
    Done(T),
    Skipped { skipped: String },
}

impl<T> Analysis<T> {
    fn from_result(r: Result<T>) -> Self {
        match r {
            Ok(v) => Analysis::Done(v),
            Err(e) => Analysis::Skipped { skipped: e.to_string() },
        }
    }

    pub fn done(&self) -> Option<&T> {
        match self {
            Analysis::Done(v) => Some(v),
            Analysis::Skipped { .. } => None,
        }
    }
}

pub struct ExperimentOutput {
    pub records: Vec<RunRecord>,
    pub screened: Vec<usize>,
    pub clt: Analysis<CltReport>,
    pub cost_curve: Vec<CostRow>,
    pub l2: Analysis<L2Monitor>,
}

impl Experiment {
    pub fn problem(&self) -> Problem<'_> {
        Problem {
            schedule: &self.schedule,
            family: self.family.as_ref(),
            cost: &self.cost,
            projection: &self.projection,
            sampling: self.sampling,
        }
    }

    pub fn simulate(&self, workers: usize) -> Result<Vec<RunRecord>> {
        run_replicas(&self.spec, &self.problem(), &self.theta0, workers)
    }

    /// Analyses that need ground truth or a target are skipped, not failed,
    /// when the family lacks it.
    pub fn analyze(&self, records: Vec<RunRecord>) -> Result<ExperimentOutput> {
        let target = self.family.target();
        let screened = match target {
            Some(t) => screen(&records, t, self.radius),
            None => (0..records.len()).filter(|&i| records[i].valid).collect(),
        };
        let clt = Analysis::from_result(
            self.family
                .ground_truth()
                .ok_or(Error::NoGroundTruth("CLT report needs θ*, H, μ and Γ"))
                .and_then(|truth| {
                    clt_report(&records, &self.schedule, truth, self.clt_checkpoint, self.radius, self.ks_level)
                }),
        );
        let l2 = Analysis::from_result(target.ok_or(Error::NoGroundTruth("L² monitor needs θ*")).and_then(|t| {
            l2_monitor(
                &records,
                self.schedule.params(),
                t,
                &screened,
                self.l2_epsilon,
                self.l2_n0,
                &self.l2_windows,
                self.l2_threshold,
            )
        }));
        let cost_curve = cost_curve(&records, &screened, &self.schedule, target)?;
        Ok(ExperimentOutput {
            records,
            screened,
            clt,
            cost_curve,
            l2,
        })
    }

    pub fn run(&self, workers: usize) -> Result<ExperimentOutput> {
        self.analyze(self.simulate(workers)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SLOW: &str = r#"
[parameters]
regime = "slow"
alpha = 1.0
beta = 0.5
scale = 2.0
phi = 2.0
rho = 2.0
psi = 0.25
kappa_k = 1.0
kappa_s = 1.0
kappa_c = 1.0
lambda = 1.0
contraction_margin = 0.5

[family]
kind = "synthetic_gaussian"
theta_star = [0.0, 0.0]
h = [[-1.0, 0.0], [0.0, -2.0]]
mu = [1.0, -1.0]
gamma = [[1.0, 0.3], [0.3, 1.0]]

[replication]
replicas = 8
n_final = 300
master_seed = 42

[analysis]
theta0 = [1.0, 1.0]

[output]
dir = "out"
"#;

    #[test]
    fn round_trip_is_lossless() {
        let mut cfg = ExperimentConfig::from_toml(SLOW).unwrap();
        cfg.parameters.kappa_k = 0.1 + 0.2;
        cfg.analysis.l2_epsilon = Some(1.0 / 3.0);
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn hash_ignores_formatting_but_not_values() {
        let a = ExperimentConfig::from_toml(SLOW).unwrap();
        let b = ExperimentConfig::from_toml(&format!("# comment\n{}", SLOW.replace("1.0, 1.0]", "1.0,1.0]"))).unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let c = ExperimentConfig::from_toml(&SLOW.replace("master_seed = 42", "master_seed = 43")).unwrap();
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = SLOW.replace("[output]", "[output]\ncolour = \"red\"");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(Error::Parse(_))));
        let bad = SLOW.replace("lambda = 1.0", "lambda = 1.0\nlamda = 1.0");
        let msg = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(msg.contains("line"), "{msg}");
    }

    #[test]
    fn zero_replicas_rejected_at_validation() {
        let cfg = ExperimentConfig::from_toml(&SLOW.replace("replicas = 8", "replicas = 0")).unwrap();
        assert!(matches!(cfg.build(), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_parameters_rejected() {
        let cfg = ExperimentConfig::from_toml(&SLOW.replace("beta = 0.5", "beta = 1.2")).unwrap();
        match cfg.build() {
            Err(Error::InvalidParameters(r)) => assert!(r.violates("β < 1")),
            other => panic!("{:?}", other.err()),
        }
    }

    #[test]
    fn ragged_matrix_rejected() {
        let cfg = ExperimentConfig::from_toml(&SLOW.replace("[0.0, -2.0]]", "[0.0]]")).unwrap();
        assert!(cfg.build().is_err());
    }

    #[test]
    fn end_to_end_small_run() {
        let cfg = ExperimentConfig::from_toml(SLOW).unwrap();
        let exp = cfg.build().unwrap();
        assert_eq!(exp.l2_windows, vec![(18, 37), (150, 300)]);
        let out = exp.run(2).unwrap();
        assert_eq!(out.records.len(), 8);
        let clt = out.clt.done().unwrap();
        assert!(clt.statistics.underpowered);
        assert_eq!(clt.checkpoint, 300);
        assert!(out.l2.done().is_some());
        assert_eq!(out.cost_curve.last().unwrap().n, 300);
    }

    #[test]
    fn euler_family_skips_clt() {
        let text = SLOW
            .replace(
                "kind = \"synthetic_gaussian\"\ntheta_star = [0.0, 0.0]\nh = [[-1.0, 0.0], [0.0, -2.0]]\nmu = [1.0, -1.0]\ngamma = [[1.0, 0.3], [0.3, 1.0]]",
                "kind = \"euler_sde\"\npayoff = { kind = \"identity\" }\nsde = { x0 = 1.0, horizon = 1.0, drift = [0.0, 0.05], diffusion = [0.0, 0.2] }",
            )
            .replace("beta = 0.5", "beta = 0.9")
            .replace("theta0 = [1.0, 1.0]", "theta0 = [0.0]")
            .replace("n_final = 300", "n_final = 20");
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        let out = cfg.build().unwrap().run(1).unwrap();
        assert!(matches!(out.clt, Analysis::Skipped { .. }));
        assert!(out.cost_curve.iter().all(|r| r.rms_error.is_some()));
    }
}
