//! Closed-form normalizations `ε_n^bias`, `ε_n^diff` and cost predictions,
//! with brute-force partial-sum oracles to check them against.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_base, CompensatedSum};
use crate::params::{ParameterSet, Regime, Schedule, ScheduleValue};

/// `ψ_{u,v}(z) = M^{−z(u+v)}((M^u − 1)/(M^{u+v} − 1) + M^{uz} − 1)`.
///
/// Requires `u > 0`, `u − v > 0`, `u + v ≠ 0`, `M > 1`, `z ∈ [0, 1]`. At
/// `u + v = 0` the quotient is undefined and no limit value is substituted.
pub fn psi(u: f64, v: f64, scale: f64, z: f64) -> Result<f64> {
    if !(u > 0.0 && u - v > 0.0 && scale > 1.0) {
        return Err(Error::Domain(format!("ψ needs u > 0, u − v > 0, M > 1 (u={u}, v={v}, M={scale})")));
    }
    if u + v == 0.0 {
        return Err(Error::Domain("ψ is undefined at u + v = 0".into()));
    }
    if !(0.0..=1.0).contains(&z) {
        return Err(Error::Domain(format!("ψ argument z={z} outside [0, 1]")));
    }
    let q = (scale.powf(u) - 1.0) / (scale.powf(u + v) - 1.0);
    Ok(scale.powf(-z * (u + v)) * (q + scale.powf(u * z) - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateBundle {
    /// `𝔯 = α/(2α−β+1)`.
    pub r: f64,
    /// `𝔯₁ = ((ρ+1)/(φ+1))(2α−β+1)`.
    pub r1: f64,
    /// `𝔯₂ = (2(ρ+1)/(φ+1) − 1)(2α−β+1)`.
    pub r2: f64,
}

pub fn rates(params: &ParameterSet) -> RateBundle {
    let e = params.level_exponent();
    let q = weight_ratio(params);
    RateBundle {
        r: params.rate(),
        r1: q * e,
        r2: (2.0 * q - 1.0) * e,
    }
}

/// `(ρ+1)/(φ+1)`.
fn weight_ratio(params: &ParameterSet) -> f64 {
    (params.rho() + 1.0) / (params.phi() + 1.0)
}

/// `((ρ+1)/(φ+1)) / √(2(ρ+1)/(φ+1) − 1)`, equal to 1 when `ρ = φ`.
pub fn averaging_prefactor(params: &ParameterSet) -> f64 {
    let q = weight_ratio(params);
    q / (2.0 * q - 1.0).sqrt()
}

/// `1 − M^{−(1−β)/2}`.
fn level_sum_factor(params: &ParameterSet) -> f64 {
    1.0 - params.scale().powf(-(1.0 - params.beta()) / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticPrediction {
    pub n: u64,
    pub s: u32,
    pub xi: f64,
    /// Absent in the critical regime.
    pub eps_bias: Option<f64>,
    pub eps_diff: f64,
    pub predicted_cost: f64,
    pub eps_bias_cost_form: Option<f64>,
    pub eps_diff_cost_form: f64,
    /// `s_n` came from the `max(·, 1)` clamp.
    pub pre_asymptotic: bool,
}

fn require(params: &ParameterSet, regime: Regime) -> Result<()> {
    if params.regime() == regime {
        Ok(())
    } else {
        Err(Error::Domain(format!("operation needs {regime} parameters, got {}", params.regime())))
    }
}

/// Slow-regime `(ε^bias, ε^diff)` at iteration `n` and offset `ξ`.
pub fn slow_eps(params: &ParameterSet, n: u64, xi: f64) -> Result<(f64, f64)> {
    require(params, Regime::Slow)?;
    let rb = rates(params);
    let (alpha, beta, m) = (params.alpha(), params.beta(), params.scale());
    let decay = (n as f64).powf(-(params.phi() + 1.0) * rb.r);
    let kk = params.kappa_k().powf(-rb.r);
    let bias = params.kappa_s().powf(-alpha) * kk * psi(rb.r1, -alpha, m, xi)? * decay;
    let diff = level_sum_factor(params).powf(-0.5)
        * averaging_prefactor(params)
        * params.kappa_s().powf((1.0 - beta) / 2.0)
        * kk
        * psi(rb.r2, 1.0 - beta, m, xi)?.sqrt()
        * decay;
    Ok((bias, diff))
}

/// Slow-regime `(ε^bias, ε^diff)` expressed through the cost.
pub fn slow_cost_form(params: &ParameterSet, xi: f64, cost: f64) -> Result<(f64, f64)> {
    require(params, Regime::Slow)?;
    let rb = rates(params);
    let (alpha, beta, m) = (params.alpha(), params.beta(), params.scale());
    let c = level_sum_factor(params);
    let common = params.kappa_c().powf(rb.r) * cost.powf(-rb.r);
    let bias = common * c.powf(-rb.r) * params.kappa_s().powf(-alpha) * psi(rb.r1, -alpha, m, xi)?;
    let diff = common
        * c.powf(-(rb.r + 0.5))
        * averaging_prefactor(params)
        * params.kappa_s().powf((1.0 - beta) / 2.0)
        * psi(rb.r2, 1.0 - beta, m, xi)?.sqrt();
    Ok((bias, diff))
}

/// `κ_C κ_K n^{φ+1} / (1 − M^{−(1−β)/2})`.
pub fn slow_predicted_cost(params: &ParameterSet, n: u64) -> f64 {
    params.kappa_c() * params.kappa_k() / level_sum_factor(params) * (n as f64).powf(params.phi() + 1.0)
}

pub fn predict_slow_at(params: &ParameterSet, sv: &ScheduleValue) -> Result<AsymptoticPrediction> {
    let (eps_bias, eps_diff) = slow_eps(params, sv.n, sv.xi.clamp(0.0, 1.0))?;
    let predicted_cost = slow_predicted_cost(params, sv.n);
    let (bias_c, diff_c) = slow_cost_form(params, sv.xi.clamp(0.0, 1.0), predicted_cost)?;
    Ok(AsymptoticPrediction {
        n: sv.n,
        s: sv.s,
        xi: sv.xi,
        eps_bias: Some(eps_bias),
        eps_diff,
        predicted_cost,
        eps_bias_cost_form: Some(bias_c),
        eps_diff_cost_form: diff_c,
        pre_asymptotic: sv.clamped,
    })
}

pub fn predict_slow(schedule: &Schedule, n: u64) -> Result<AsymptoticPrediction> {
    require(schedule.params(), Regime::Slow)?;
    predict_slow_at(schedule.params(), &schedule.schedule_at(n)?)
}

/// Critical-regime `ε^diff` at iteration `n ≥ 2`.
pub fn critical_eps_diff(params: &ParameterSet, n: u64) -> Result<f64> {
    require(params, Regime::Critical)?;
    if n < 2 {
        return Err(Error::Domain("critical prediction needs n ≥ 2".into()));
    }
    let nf = n as f64;
    let phi1 = params.phi() + 1.0;
    Ok((2.0 * params.alpha() * params.kappa_k()).powf(-0.5)
        * averaging_prefactor(params)
        * nf.powf(-phi1 / 2.0)
        * log_base(nf.powf(phi1), params.scale()).sqrt())
}

/// `κ_C κ_K α^{−1} n^{φ+1} log_M n^{(φ+1)/2}`.
pub fn critical_predicted_cost(params: &ParameterSet, n: u64) -> f64 {
    let nf = n as f64;
    let phi1 = params.phi() + 1.0;
    params.kappa_c() * params.kappa_k() / params.alpha()
        * nf.powf(phi1)
        * log_base(nf.powf(phi1 / 2.0), params.scale())
}

/// `(√κ_C/(2α)) · prefactor · log_M cost / √cost`.
pub fn critical_cost_form(params: &ParameterSet, cost: f64) -> Result<f64> {
    require(params, Regime::Critical)?;
    Ok(params.kappa_c().sqrt() / (2.0 * params.alpha())
        * averaging_prefactor(params)
        * log_base(cost, params.scale())
        / cost.sqrt())
}

pub fn predict_critical_at(params: &ParameterSet, sv: &ScheduleValue) -> Result<AsymptoticPrediction> {
    let eps_diff = critical_eps_diff(params, sv.n)?;
    let predicted_cost = critical_predicted_cost(params, sv.n);
    Ok(AsymptoticPrediction {
        n: sv.n,
        s: sv.s,
        xi: sv.xi,
        eps_bias: None,
        eps_diff,
        predicted_cost,
        eps_bias_cost_form: None,
        eps_diff_cost_form: critical_cost_form(params, predicted_cost)?,
        pre_asymptotic: sv.clamped,
    })
}

pub fn predict_critical(schedule: &Schedule, n: u64) -> Result<AsymptoticPrediction> {
    require(schedule.params(), Regime::Critical)?;
    if n < 2 {
        return Err(Error::Domain("critical prediction needs n ≥ 2".into()));
    }
    predict_critical_at(schedule.params(), &schedule.schedule_at(n)?)
}

pub fn predict_at(params: &ParameterSet, sv: &ScheduleValue) -> Result<AsymptoticPrediction> {
    match params.regime() {
        Regime::Slow => predict_slow_at(params, sv),
        Regime::Critical => predict_critical_at(params, sv),
    }
}

/// Predictions at increasing `ns` in one pass over the schedule. Critical
/// entries at `n = 1` are skipped.
pub fn prediction_table(schedule: &Schedule, ns: &[u64]) -> Result<Vec<AsymptoticPrediction>> {
    let params = schedule.params();
    let mut out = Vec::with_capacity(ns.len());
    for sv in sample_schedule(schedule, ns)? {
        if params.regime() == Regime::Critical && sv.n < 2 {
            continue;
        }
        out.push(predict_at(params, &sv)?);
    }
    Ok(out)
}

fn sample_schedule(schedule: &Schedule, ns: &[u64]) -> Result<Vec<ScheduleValue>> {
    if ns.first() == Some(&0) || ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain("indices must be positive and strictly increasing".into()));
    }
    let mut out = Vec::with_capacity(ns.len());
    let mut want = ns.iter().peekable();
    for sv in schedule.cursor() {
        match want.peek() {
            None => break,
            Some(&&n) if n == sv.n => {
                want.next();
                out.push(sv);
            }
            _ => {}
        }
    }
    Ok(out)
}

pub fn prediction_csv(rows: &[AsymptoticPrediction]) -> String {
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:e}"));
    let mut out = String::from(
        "n,s,xi,eps_bias,eps_diff,predicted_cost,eps_bias_cost_form,eps_diff_cost_form,pre_asymptotic\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:e},{},{:e},{:e},{},{:e},{}",
            r.n,
            r.s,
            r.xi,
            opt(r.eps_bias),
            r.eps_diff,
            r.predicted_cost,
            opt(r.eps_bias_cost_form),
            r.eps_diff_cost_form,
            r.pre_asymptotic
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub n: u64,
    pub eps_bias: Option<f64>,
    pub eps_diff: f64,
}

/// Partial-sum oracles at increasing `ns`:
/// `ε^bias = b̄_n^{−1} Σ b_k δ_k^bias` and `ε^diff = b̄_n^{−1} √(Σ (b_k δ_k^diff)²)`.
///
/// Slow: `δ_k^bias = M^{−αs_k}` and
/// `(δ_k^diff)² = M^{(1−β)s_k} / (k^φ κ_K(φ+1)(1 − M^{−(1−β)/2}))`, the
/// conditional variance scale of `Z` at iteration `k`, so that the oracle and
/// the closed form describe the same normalization.
/// Critical: `(δ_k^diff)² = (2ακ_K)^{−1} k^{−φ} log_M k`; no bias oracle.
pub fn oracles(schedule: &Schedule, ns: &[u64]) -> Result<Vec<OracleRow>> {
    if ns.first() == Some(&0) || ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain("indices must be positive and strictly increasing".into()));
    }
    let p = schedule.params();
    let (alpha, beta, m, phi) = (p.alpha(), p.beta(), p.scale(), p.phi());
    let slow_variance_scale = p.kappa_k() * (phi + 1.0) * level_sum_factor(p);
    let mut b_bar = CompensatedSum::new();
    let mut bias = CompensatedSum::new();
    let mut diff = CompensatedSum::new();
    let mut want = ns.iter().peekable();
    let mut out = Vec::with_capacity(ns.len());
    for sv in schedule.cursor() {
        let Some(&&target) = want.peek() else { break };
        let k = sv.n as f64;
        let s = f64::from(sv.s);
        b_bar.add(sv.b);
        let delta_diff_sq = match p.regime() {
            Regime::Slow => {
                bias.add(sv.b * m.powf(-alpha * s));
                m.powf((1.0 - beta) * s) / (k.powf(phi) * slow_variance_scale)
            }
            Regime::Critical => k.powf(-phi) * log_base(k, m) / (2.0 * alpha * p.kappa_k()),
        };
        diff.add(sv.b * sv.b * delta_diff_sq);
        if sv.n == target {
            want.next();
            let bb = b_bar.value();
            out.push(OracleRow {
                n: sv.n,
                eps_bias: (p.regime() == Regime::Slow).then(|| bias.value() / bb),
                eps_diff: diff.value().sqrt() / bb,
            });
        }
    }
    Ok(out)
}

pub fn oracle_eps_bias(schedule: &Schedule, n: u64) -> Result<f64> {
    require(schedule.params(), Regime::Slow)?;
    Ok(oracles(schedule, &[n])?[0].eps_bias.expect("slow oracle has bias"))
}

pub fn oracle_eps_diff(schedule: &Schedule, n: u64) -> Result<f64> {
    Ok(oracles(schedule, &[n])?[0].eps_diff)
}

/// Empirical limit behaviour of `ε^bias/ε^diff` along a checkpoint sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorollaryCase {
    BiasComparable,
    BiasNegligible,
    DiffNegligible,
    Undetermined,
}

/// Log-ratio spread up to which the two normalizations count as comparable.
pub const COMPARABLE_SPREAD: f64 = std::f64::consts::LN_2;
/// Minimum `|log ratio_last − log ratio_first|` for a negligibility verdict.
pub const TREND_THRESHOLD: f64 = std::f64::consts::LN_2;
/// Minimum fraction of consecutive log-ratio steps moving with the trend.
pub const MONOTONE_FRACTION: f64 = 0.8;

pub fn classify_regime_corollary(eps_bias: &[f64], eps_diff: &[f64]) -> Result<CorollaryCase> {
    if eps_bias.len() != eps_diff.len() {
        return Err(Error::Dimension {
            expected: eps_bias.len(),
            got: eps_diff.len(),
        });
    }
    if eps_bias.len() < 3 {
        return Err(Error::InsufficientSamples {
            got: eps_bias.len(),
            min: 3,
        });
    }
    if eps_bias.iter().chain(eps_diff).any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::Domain("normalizations must be positive and finite".into()));
    }
    let logs: Vec<f64> = eps_bias.iter().zip(eps_diff).map(|(b, d)| (b / d).ln()).collect();
    let (lo, hi) = logs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if hi - lo <= COMPARABLE_SPREAD {
        return Ok(CorollaryCase::BiasComparable);
    }
    let trend = logs[logs.len() - 1] - logs[0];
    let with_trend = logs
        .windows(2)
        .filter(|w| (w[1] - w[0]) * trend.signum() > 0.0)
        .count() as f64
        / (logs.len() - 1) as f64;
    if trend.abs() >= TREND_THRESHOLD && with_trend >= MONOTONE_FRACTION {
        Ok(if trend < 0.0 {
            CorollaryCase::BiasNegligible
        } else {
            CorollaryCase::DiffNegligible
        })
    } else {
        Ok(CorollaryCase::Undetermined)
    }
}
