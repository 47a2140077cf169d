//! Projected multilevel stochastic approximation with streaming
//! Polyak–Ruppert averaging and exact cost accounting.

use std::fmt::Write as _;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::level_family::{replica_stream, CostModel, LevelFamily, Stream};
use crate::ml_estimator::{estimate, replication_counts, ReplicationPlan, SamplingMode};
use crate::numerics::{snap_ceil, CompensatedSum};
use crate::params::{Parameters, Schedule, ScheduleValue};

/// Map `Π` onto the domain `D`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Projection {
    #[default]
    Identity,
    /// Componentwise clamp to `[lower_i, upper_i]`.
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

impl Projection {
    pub fn check(&self, d: usize) -> Result<()> {
        if let Projection::Box { lower, upper } = self {
            if lower.len() != d || upper.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    got: lower.len().max(upper.len()),
                });
            }
            if lower.iter().zip(upper).any(|(a, b)| !(a <= b)) {
                return Err(Error::Domain("box projection needs lower ≤ upper".into()));
            }
        }
        Ok(())
    }

    pub fn apply(&self, theta: &mut DVector<f64>) {
        if let Projection::Box { lower, upper } = self {
            for (i, x) in theta.iter_mut().enumerate() {
                *x = x.clamp(lower[i], upper[i]);
            }
        }
    }
}

/// Everything a replica needs besides its state.
#[derive(Clone, Copy)]
pub struct Problem<'a> {
    pub schedule: &'a Schedule,
    pub family: &'a dyn LevelFamily,
    pub cost: &'a dyn CostModel,
    pub projection: &'a Projection,
    pub sampling: SamplingMode,
}

#[derive(Debug, Clone)]
pub struct RunState {
    pub n: u64,
    pub theta: DVector<f64>,
    pub theta_bar: DVector<f64>,
    b_bar: CompensatedSum,
    cost: CompensatedSum,
    cumulative_budget: CompensatedSum,
    pub last_level: u32,
    pub rng: Stream,
}

impl RunState {
    pub fn new(theta0: DVector<f64>, rng: Stream) -> Self {
        let d = theta0.len();
        Self {
            n: 0,
            theta: theta0,
            theta_bar: DVector::zeros(d),
            b_bar: CompensatedSum::new(),
            cost: CompensatedSum::new(),
            cumulative_budget: CompensatedSum::new(),
            last_level: 0,
            rng,
        }
    }

    /// `b̄_n = Σ_{k≤n} b_k`.
    pub fn b_bar(&self) -> f64 {
        self.b_bar.value()
    }

    /// `cost_n`.
    pub fn cost(&self) -> f64 {
        self.cost.value()
    }
}

/// Applies iteration `n+1` with an explicit schedule value and plan.
///
/// Cost is charged at `θ_n`, the point the estimator is evaluated at.
pub fn advance(
    problem: &Problem<'_>,
    state: &mut RunState,
    sv: &ScheduleValue,
    plan: &ReplicationPlan,
) -> Result<()> {
    let step_cost = plan.cost(problem.cost, &state.theta)?;
    let est = estimate(problem.family, &state.theta, plan, &mut state.rng, problem.sampling)?;
    let next_n = state.n + 1;

    let mut theta = &state.theta + &est.z * sv.gamma;
    problem.projection.apply(&mut theta);
    if !theta.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite {
            iteration: next_n,
            last_estimate: est.z.iter().copied().collect(),
        });
    }

    state.b_bar.add(sv.b);
    let w = sv.b / state.b_bar.value();
    state.theta_bar += (&theta - &state.theta_bar) * w;
    state.theta = theta;
    state.cost.add(step_cost);
    state.n = next_n;
    state.last_level = sv.s;
    Ok(())
}

/// One iteration: schedule at `n+1`, plan, estimate, projected update,
/// average and cost.
pub fn step(problem: &Problem<'_>, state: &mut RunState) -> Result<()> {
    let n = state.n + 1;
    let params = problem.schedule.params();
    state.cumulative_budget.add(params.budget(n));
    let sv = problem.schedule.value(n, state.cumulative_budget.value());
    let plan = replication_counts(params, sv.s, sv.budget)?;
    advance(problem, state, &sv, &plan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub n: u64,
    pub theta: Vec<f64>,
    pub theta_bar: Vec<f64>,
    pub cost: f64,
    pub level: u32,
    /// `max ‖θ_m − θ*‖` over `m` from the previous checkpoint (or 0) up to
    /// `n − 1`; `None` when the target is unknown.
    pub excursion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Abort {
    pub iteration: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub master_seed: u64,
    pub stream: u64,
    pub checkpoints: Vec<Checkpoint>,
    /// `false` when the run aborted; checkpoints then stop before the abort.
    pub valid: bool,
    pub abort: Option<Abort>,
}

/// `{⌈c^j⌉ : j ≥ 0} ∩ [1, n_final]`, deduplicated, always ending at `n_final`.
pub fn geometric_checkpoints(n_final: u64, ratio: f64) -> Result<Vec<u64>> {
    if n_final == 0 {
        return Err(Error::Domain("n_final must be positive".into()));
    }
    if !(ratio > 1.0) {
        return Err(Error::Domain("checkpoint ratio must exceed 1".into()));
    }
    let mut out = Vec::new();
    let mut x = 1.0f64;
    loop {
        let n = snap_ceil(x) as u64;
        if n >= n_final {
            break;
        }
        if out.last() != Some(&n) {
            out.push(n);
        }
        x *= ratio;
    }
    out.push(n_final);
    Ok(out)
}

/// Runs `n_final` iterations from `theta0` on stream `stream` of
/// `master_seed`, recording state after each checkpoint iteration.
pub fn run(
    problem: &Problem<'_>,
    theta0: &DVector<f64>,
    n_final: u64,
    checkpoints: &[u64],
    master_seed: u64,
    stream: u64,
) -> Result<RunRecord> {
    let d = problem.family.dim();
    if theta0.len() != d {
        return Err(Error::Dimension {
            expected: d,
            got: theta0.len(),
        });
    }
    problem.projection.check(d)?;
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) || checkpoints.first() == Some(&0) {
        return Err(Error::Domain("checkpoints must be positive and strictly increasing".into()));
    }
    if checkpoints.last().is_some_and(|&c| c > n_final) {
        return Err(Error::Domain("checkpoint beyond n_final".into()));
    }

    let target = problem.family.target().cloned();
    let deviation = |theta: &DVector<f64>| target.as_ref().map(|t| (theta - t).norm());
    let mut state = RunState::new(theta0.clone(), replica_stream(master_seed, stream));
    let mut record = RunRecord {
        master_seed,
        stream,
        checkpoints: Vec::with_capacity(checkpoints.len()),
        valid: true,
        abort: None,
    };
    let mut excursion = deviation(&state.theta);
    let mut next = checkpoints.iter().peekable();
    while state.n < n_final {
        if let Err(e) = step(problem, &mut state) {
            record.valid = false;
            record.abort = Some(Abort {
                iteration: state.n + 1,
                message: e.to_string(),
            });
            return Ok(record);
        }
        if next.peek() == Some(&&state.n) {
            next.next();
            record.checkpoints.push(Checkpoint {
                n: state.n,
                theta: state.theta.iter().copied().collect(),
                theta_bar: state.theta_bar.iter().copied().collect(),
                cost: state.cost(),
                level: state.last_level,
                excursion,
            });
            excursion = deviation(&state.theta);
        } else if let (Some(e), Some(cur)) = (excursion.as_mut(), deviation(&state.theta)) {
            *e = e.max(cur);
        }
    }
    Ok(record)
}

impl RunRecord {
    /// Rows `n, theta_0.., theta_bar_0.., cost`.
    pub fn to_csv(&self) -> String {
        let d = self.checkpoints.first().map_or(0, |c| c.theta.len());
        let mut out = String::from("n");
        for i in 0..d {
            let _ = write!(out, ",theta_{i}");
        }
        for i in 0..d {
            let _ = write!(out, ",theta_bar_{i}");
        }
        out.push_str(",cost\n");
        for c in &self.checkpoints {
            let _ = write!(out, "{}", c.n);
            for x in c.theta.iter().chain(&c.theta_bar) {
                let _ = write!(out, ",{x:e}");
            }
            let _ = writeln!(out, ",{:e}", c.cost);
        }
        out
    }

    pub fn summary(&self, params: &Parameters) -> RunSummary {
        RunSummary {
            master_seed: self.master_seed,
            stream: self.stream,
            parameters: params.clone(),
            valid: self.valid,
            abort: self.abort.clone(),
            last: self.checkpoints.last().cloned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub master_seed: u64,
    pub stream: u64,
    pub parameters: Parameters,
    pub valid: bool,
    pub abort: Option<Abort>,
    pub last: Option<Checkpoint>,
}
