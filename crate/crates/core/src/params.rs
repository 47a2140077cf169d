//! Schedule constants, regime feasibility checks and the deterministic
//! schedules `γ_n`, `b_n`, `K_n`, `K̄_n`, `s_n`, `ξ_n`.
//!
//! A [`Parameters`] value is plain data as read from a configuration file.
//! [`ParameterSet`] is the validated form; it can only be obtained through
//! [`ParameterSet::new`], so every `ParameterSet` in circulation satisfies the
//! feasibility inequalities of its regime.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_base, snap_ceil, snap_floor, CompensatedSum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `β < 1 < 2α`: errors decay like `cost^{-𝔯}` with `𝔯 < 1/2`.
    Slow,
    /// `β = 1`: errors decay like `log(cost)/sqrt(cost)`.
    Critical,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::Slow => f.write_str("slow"),
            Regime::Critical => f.write_str("critical"),
        }
    }
}

/// Unvalidated problem and schedule constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Parameters {
    pub regime: Regime,
    /// Bias order `α`.
    pub alpha: f64,
    /// Variance order `β`.
    pub beta: f64,
    /// Level scale `M`.
    pub scale: f64,
    /// Budget exponent `φ`.
    pub phi: f64,
    /// Weight exponent `ρ`.
    pub rho: f64,
    /// Step exponent `ψ`.
    pub psi: f64,
    pub kappa_k: f64,
    pub kappa_s: f64,
    pub kappa_c: f64,
    /// Linearization exponent `λ ∈ (0, 1]`.
    pub lambda: f64,
    /// Contraction margin `L`.
    pub contraction_margin: f64,
}

impl Parameters {
    /// `α = 1, β = 1/2, M = 2, φ = ρ = 2, ψ = 1/4`, unit constants.
    pub fn default_slow() -> Self {
        Self {
            regime: Regime::Slow,
            alpha: 1.0,
            beta: 0.5,
            scale: 2.0,
            phi: 2.0,
            rho: 2.0,
            psi: 0.25,
            kappa_k: 1.0,
            kappa_s: 1.0,
            kappa_c: 1.0,
            lambda: 1.0,
            contraction_margin: 0.5,
        }
    }

    /// `α = β = 1, M = 2, φ = ρ = 2, ψ = 1/4`, unit constants.
    pub fn default_critical() -> Self {
        Self {
            regime: Regime::Critical,
            beta: 1.0,
            ..Self::default_slow()
        }
    }

    /// `𝔯 = α/(2α − β + 1)`.
    pub fn rate(&self) -> f64 {
        self.alpha / (2.0 * self.alpha - self.beta + 1.0)
    }

    fn fields(&self) -> [(&'static str, f64); 11] {
        [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("scale", self.scale),
            ("phi", self.phi),
            ("rho", self.rho),
            ("psi", self.psi),
            ("kappa_k", self.kappa_k),
            ("kappa_s", self.kappa_s),
            ("kappa_c", self.kappa_c),
            ("lambda", self.lambda),
            ("contraction_margin", self.contraction_margin),
        ]
    }
}

/// Ordering that must hold strictly between the two evaluated sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    Less,
    Greater,
    Equal,
}

impl Relation {
    fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Relation::Less => lhs < rhs,
            Relation::Greater => lhs > rhs,
            Relation::Equal => lhs == rhs,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Relation::Less => "<",
            Relation::Greater => ">",
            Relation::Equal => "=",
        }
    }
}

/// Violation name used when any field is NaN or infinite.
pub const NON_FINITE: &str = "non-finite";

/// One violated inequality with both sides evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub name: String,
    pub lhs: f64,
    pub relation: Relation,
    pub rhs: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.name == NON_FINITE {
            return f.write_str(NON_FINITE);
        }
        write!(
            f,
            "{} violated: lhs = {}, rhs = {} (required lhs {} rhs)",
            self.name,
            self.lhs,
            self.rhs,
            self.relation.symbol()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub regime: Regime,
    pub accepted: bool,
    pub violations: Vec<Violation>,
    /// Names of non-finite fields; non-empty only for a "non-finite" rejection.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub non_finite_fields: Vec<String>,
}

impl ValidationReport {
    pub fn violates(&self, name: &str) -> bool {
        self.violations.iter().any(|v| v.name == name)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.accepted {
            return write!(f, "{} regime: accepted", self.regime);
        }
        write!(f, "{} regime: rejected", self.regime)?;
        for v in &self.violations {
            write!(f, "; {v}")?;
        }
        if !self.non_finite_fields.is_empty() {
            write!(f, " ({})", self.non_finite_fields.join(", "))?;
        }
        Ok(())
    }
}

struct Checker {
    violations: Vec<Violation>,
}

impl Checker {
    fn check(&mut self, name: &str, lhs: f64, relation: Relation, rhs: f64) {
        if !relation.holds(lhs, rhs) {
            self.violations.push(Violation {
                name: name.to_owned(),
                lhs,
                relation,
                rhs,
            });
        }
    }
}

/// Checks every positivity constraint and the regime's feasibility
/// inequalities. All inequalities are strict; equality is a violation.
pub fn validate(p: &Parameters) -> ValidationReport {
    let mut c = Checker {
        violations: Vec::new(),
    };

    let non_finite: Vec<&str> = p
        .fields()
        .iter()
        .filter(|(_, v)| !v.is_finite())
        .map(|(k, _)| *k)
        .collect();
    if !non_finite.is_empty() {
        return ValidationReport {
            regime: p.regime,
            accepted: false,
            violations: vec![Violation {
                name: NON_FINITE.to_owned(),
                lhs: f64::NAN,
                relation: Relation::Equal,
                rhs: f64::NAN,
            }],
            non_finite_fields: non_finite.iter().map(|s| s.to_string()).collect(),
        };
    }

    c.check("α > 0", p.alpha, Relation::Greater, 0.0);
    c.check("β > 0", p.beta, Relation::Greater, 0.0);
    c.check("M > 1", p.scale, Relation::Greater, 1.0);
    c.check("κ_K > 0", p.kappa_k, Relation::Greater, 0.0);
    c.check("κ_s > 0", p.kappa_s, Relation::Greater, 0.0);
    c.check("κ_C > 0", p.kappa_c, Relation::Greater, 0.0);
    c.check("λ > 0", p.lambda, Relation::Greater, 0.0);
    if p.lambda > 1.0 {
        c.check("λ ≤ 1", p.lambda, Relation::Less, 1.0);
    }
    c.check("L > 0", p.contraction_margin, Relation::Greater, 0.0);

    let lambda_ratio = p.lambda / (p.lambda + 1.0);
    match p.regime {
        Regime::Slow => {
            c.check("β < 1", p.beta, Relation::Less, 1.0);
            c.check("β < 2α", p.beta, Relation::Less, 2.0 * p.alpha);
            c.check(
                "φ > 1/(2α−β)",
                p.phi,
                Relation::Greater,
                1.0 / (2.0 * p.alpha - p.beta),
            );
            c.check("φ+1 < 2(ρ+1)", p.phi + 1.0, Relation::Less, 2.0 * (p.rho + 1.0));
            let lower = (1.0 - 2.0 * lambda_ratio * (p.phi + 1.0) * p.rate()).max(0.0);
            c.check("ψ > (1 − (2λ/(λ+1))(φ+1)𝔯)₊", p.psi, Relation::Greater, lower);
            c.check("ψ < 1", p.psi, Relation::Less, 1.0);
        }
        Regime::Critical => {
            c.check("β = 1", p.beta, Relation::Equal, 1.0);
            c.check("α > 1/2", p.alpha, Relation::Greater, 0.5);
            c.check(
                "φ > 1/(2α−1)",
                p.phi,
                Relation::Greater,
                1.0 / (2.0 * p.alpha - 1.0),
            );
            c.check("φ+1 < 2(ρ+1)", p.phi + 1.0, Relation::Less, 2.0 * (p.rho + 1.0));
            let lower = (1.0 - lambda_ratio * (p.phi + 1.0)).max(0.0);
            c.check("ψ > (1 − (λ/(λ+1))(φ+1))₊", p.psi, Relation::Greater, lower);
            c.check("ψ < 1", p.psi, Relation::Less, 1.0);
        }
    }

    ValidationReport {
        regime: p.regime,
        accepted: c.violations.is_empty(),
        violations: c.violations,
        non_finite_fields: Vec::new(),
    }
}

/// Validated parameters. Immutable; share freely across replicas.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ParameterSet(Parameters);

impl ParameterSet {
    pub fn new(raw: Parameters) -> Result<Self> {
        let report = validate(&raw);
        if report.accepted {
            Ok(Self(raw))
        } else {
            Err(Error::InvalidParameters(report))
        }
    }

    pub fn raw(&self) -> &Parameters {
        &self.0
    }

    pub fn regime(&self) -> Regime {
        self.0.regime
    }
    pub fn alpha(&self) -> f64 {
        self.0.alpha
    }
    pub fn beta(&self) -> f64 {
        self.0.beta
    }
    pub fn scale(&self) -> f64 {
        self.0.scale
    }
    pub fn phi(&self) -> f64 {
        self.0.phi
    }
    pub fn rho(&self) -> f64 {
        self.0.rho
    }
    pub fn psi(&self) -> f64 {
        self.0.psi
    }
    pub fn kappa_k(&self) -> f64 {
        self.0.kappa_k
    }
    pub fn kappa_s(&self) -> f64 {
        self.0.kappa_s
    }
    pub fn kappa_c(&self) -> f64 {
        self.0.kappa_c
    }
    pub fn lambda(&self) -> f64 {
        self.0.lambda
    }
    pub fn contraction_margin(&self) -> f64 {
        self.0.contraction_margin
    }

    /// `𝔯 = α/(2α − β + 1)`.
    pub fn rate(&self) -> f64 {
        self.0.rate()
    }

    /// `2α − β + 1`, the exponent denominator of the level schedule.
    pub fn level_exponent(&self) -> f64 {
        2.0 * self.0.alpha - self.0.beta + 1.0
    }

    /// Step width `γ_n = n^{-ψ}`.
    pub fn step_width(&self, n: u64) -> f64 {
        (n as f64).powf(-self.0.psi)
    }

    /// Averaging weight `b_n = n^ρ`.
    pub fn weight(&self, n: u64) -> f64 {
        (n as f64).powf(self.0.rho)
    }

    /// Time budget `K_n = κ_K(φ+1) n^φ`.
    pub fn budget(&self, n: u64) -> f64 {
        self.0.kappa_k * (self.0.phi + 1.0) * (n as f64).powf(self.0.phi)
    }
}

impl<'de> Deserialize<'de> for ParameterSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = Parameters::deserialize(d)?;
        ParameterSet::new(raw).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleValue {
    pub n: u64,
    pub gamma: f64,
    pub b: f64,
    #[serde(rename = "K")]
    pub budget: f64,
    #[serde(rename = "K_bar")]
    pub cumulative_budget: f64,
    pub s: u32,
    /// Slow regime: `log_M(κ_s K̄_n^{1/(2α−β+1)}) − s_n`, in `[0, 1)` unless
    /// `clamped`. Critical regime: `s_n − (1/α′_n) log_M n^{(φ+1)/2}`, in `[0, 1)`
    /// unless clamped.
    pub xi: f64,
    /// The `max(·, 1)` clamp was active; predictions at this `n` are
    /// pre-asymptotic.
    pub clamped: bool,
}

/// User-supplied sequence `α′_n` for the critical-regime level schedule.
pub type AlphaPrime = Arc<dyn Fn(u64) -> f64 + Send + Sync>;

/// Level schedule of a validated parameter set.
#[derive(Clone)]
pub struct Schedule {
    params: ParameterSet,
    alpha_prime: Option<AlphaPrime>,
}

impl fmt::Debug for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Schedule")
            .field("params", &self.params)
            .field("alpha_prime", &self.alpha_prime.as_ref().map(|_| "<fn>"))
            .finish()
    }
}

impl Schedule {
    pub fn new(params: ParameterSet) -> Self {
        Self {
            params,
            alpha_prime: None,
        }
    }

    /// Replaces the default `α′_n ≡ α` of the critical regime. The sequence
    /// should be positive and nondecreasing with limit `α`.
    pub fn with_alpha_prime(mut self, alpha_prime: AlphaPrime) -> Self {
        self.alpha_prime = Some(alpha_prime);
        self
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    fn alpha_prime_at(&self, n: u64) -> f64 {
        match &self.alpha_prime {
            Some(f) => f(n),
            None => self.params.alpha(),
        }
    }

    /// Accuracy level and offset from `n` and the exact `K̄_n`.
    fn level(&self, n: u64, cumulative_budget: f64) -> (u32, f64, bool) {
        let p = &self.params;
        let exact = match p.regime() {
            Regime::Slow => log_base(
                p.kappa_s() * cumulative_budget.powf(1.0 / p.level_exponent()),
                p.scale(),
            ),
            Regime::Critical => {
                log_base((n as f64).powf((p.phi() + 1.0) / 2.0), p.scale()) / self.alpha_prime_at(n)
            }
        };
        let raw = match p.regime() {
            Regime::Slow => snap_floor(exact),
            Regime::Critical => snap_ceil(exact),
        };
        let clamped = raw < 1.0;
        let s = raw.max(1.0);
        let xi = match p.regime() {
            Regime::Slow => exact - s,
            Regime::Critical => s - exact,
        };
        (s as u32, xi, clamped)
    }

    /// Schedule at iteration `n ≥ 1`, summing `K̄_n` exactly (O(n)).
    pub fn schedule_at(&self, n: u64) -> Result<ScheduleValue> {
        if n == 0 {
            return Err(Error::Domain("schedule index n must be positive".into()));
        }
        let kbar: CompensatedSum = (1..=n).map(|k| self.params.budget(k)).collect();
        Ok(self.value(n, kbar.value()))
    }

    /// Schedule at `n ≥ 1` given the caller's running `K̄_n`.
    pub fn value(&self, n: u64, cumulative_budget: f64) -> ScheduleValue {
        let (s, xi, clamped) = self.level(n, cumulative_budget);
        ScheduleValue {
            n,
            gamma: self.params.step_width(n),
            b: self.params.weight(n),
            budget: self.params.budget(n),
            cumulative_budget,
            s,
            xi,
            clamped,
        }
    }

    /// Iterator over `n = 1, 2, ...` with `K̄_n` cached incrementally.
    pub fn cursor(&self) -> ScheduleCursor<'_> {
        ScheduleCursor {
            schedule: self,
            n: 0,
            kbar: CompensatedSum::new(),
        }
    }
}

pub struct ScheduleCursor<'a> {
    schedule: &'a Schedule,
    n: u64,
    kbar: CompensatedSum,
}

impl ScheduleCursor<'_> {
    /// Index of the last value produced (0 before the first call).
    pub fn position(&self) -> u64 {
        self.n
    }
}

impl Iterator for ScheduleCursor<'_> {
    type Item = ScheduleValue;

    fn next(&mut self) -> Option<ScheduleValue> {
        self.n += 1;
        self.kbar.add(self.schedule.params.budget(self.n));
        Some(self.schedule.value(self.n, self.kbar.value()))
    }
}
