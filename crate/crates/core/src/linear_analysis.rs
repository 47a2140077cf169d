//! Linear-system machinery behind the averaging analysis: Lyapunov norms,
//! operator products `𝓗[l,k]`, averaged operators `𝓗̄[l,n]`, matrix
//! exponential bounds and the linear recursion with additive noise.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::CompensatedSum;

/// Step-size or weight sequence indexed from 1.
pub type Sequence<'a> = &'a dyn Fn(u64) -> f64;

/// Largest real part of the eigenvalues of a square matrix.
pub fn spectral_abscissa(h: &DMatrix<f64>) -> f64 {
    h.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// `H` with every eigenvalue real part below `−L`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractingMatrix {
    h: DMatrix<f64>,
    margin: f64,
}

/// Slack required between the spectral abscissa and `−L`.
pub const ABSCISSA_TOLERANCE: f64 = 1e-9;

impl ContractingMatrix {
    pub fn new(h: DMatrix<f64>, margin: f64) -> Result<Self> {
        if !h.is_square() || h.is_empty() {
            return Err(Error::Domain("H must be a nonempty square matrix".into()));
        }
        if !(margin > 0.0 && margin.is_finite()) {
            return Err(Error::Domain(format!("contraction margin must be positive, got {margin}")));
        }
        if !h.iter().all(|x| x.is_finite()) {
            return Err(Error::Domain("H has non-finite entries".into()));
        }
        let abscissa = spectral_abscissa(&h);
        if abscissa >= -margin - ABSCISSA_TOLERANCE {
            return Err(Error::NotContracting { abscissa, margin });
        }
        Ok(Self { h, margin })
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }
}

/// Inner-product norm `‖x‖_P = √(xᵀPx)` with `‖I + εH‖_P ≤ 1 − εL` on `[0, ε₀]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovNorm {
    p: DMatrix<f64>,
    p_sqrt: DMatrix<f64>,
    p_inv_sqrt: DMatrix<f64>,
    eps0: f64,
}

/// Condition number above which the Lyapunov solve is refused.
pub const MAX_CONDITION: f64 = 1e12;
/// Resolution of the ε₀ scan.
pub const EPS0_STEP: f64 = 1e-3;
/// Points of the final ε₀ verification grid.
pub const EPS0_VERIFY_POINTS: usize = 100;
/// Allowed excess of `‖I + εH‖_P` over `1 − εL` on the verification grid.
pub const EPS0_VERIFY_TOLERANCE: f64 = 1e-10;

impl LyapunovNorm {
    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn eps0(&self) -> f64 {
        self.eps0
    }

    pub fn vector_norm(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.p * x)).sqrt()
    }

    /// Induced operator norm `σ_max(P^{1/2} M P^{−1/2})`.
    pub fn operator_norm(&self, m: &DMatrix<f64>) -> f64 {
        spectral_norm(&(&self.p_sqrt * m * &self.p_inv_sqrt))
    }

    /// `‖I + εH‖_P − (1 − εL)`.
    pub fn contraction_excess(&self, cm: &ContractingMatrix, eps: f64) -> f64 {
        let d = cm.dim();
        let m = DMatrix::identity(d, d) + cm.h() * eps;
        self.operator_norm(&m) - (1.0 - eps * cm.margin())
    }
}

/// Solves `AᵀP + PA = −I` for `A = H + L·I`, then finds `ε₀`.
///
/// `ε ↦ ‖I + εH‖_P − (1 − εL)` is convex and vanishes at 0, so its nonpositive
/// set is an interval `[0, ε*]`. The scan walks a `1e−3` grid up to `1/L`,
/// stops at the first positive value and bisects; the result is then checked
/// on a 100-point grid.
pub fn lyapunov_norm(cm: &ContractingMatrix) -> Result<LyapunovNorm> {
    let d = cm.dim();
    let id = DMatrix::<f64>::identity(d, d);
    let a = cm.h() + &id * cm.margin();
    let at = a.transpose();
    let system = id.kronecker(&at) + at.kronecker(&id);
    let sv = system.singular_values();
    let cond = sv.max() / sv.min();
    if !(cond <= MAX_CONDITION) {
        return Err(Error::IllConditioned(format!(
            "Lyapunov system condition estimate {cond:e} exceeds {MAX_CONDITION:e}"
        )));
    }
    let rhs = -DVector::from_column_slice(id.as_slice());
    let vec_p = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::IllConditioned("singular Lyapunov system".into()))?;
    let p = DMatrix::from_column_slice(d, d, vec_p.as_slice());
    let p = (&p + p.transpose()) * 0.5;

    let eig = SymmetricEigen::new(p.clone());
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::IllConditioned("Lyapunov solution is not positive definite".into()));
    }
    let v = &eig.eigenvectors;
    let root = |f: fn(f64) -> f64| v * DMatrix::from_diagonal(&eig.eigenvalues.map(f)) * v.transpose();
    let mut norm = LyapunovNorm {
        p_sqrt: root(f64::sqrt),
        p_inv_sqrt: root(|l| 1.0 / l.sqrt()),
        p,
        eps0: 0.0,
    };

    let limit = 1.0 / cm.margin();
    let ok = |e: f64| norm.contraction_excess(cm, e) <= 0.0;
    let mut good = 0.0;
    let mut bad = None;
    let steps = (limit / EPS0_STEP).floor() as u64;
    for i in 1..=steps + 1 {
        let e = (i as f64 * EPS0_STEP).min(limit);
        if ok(e) {
            good = e;
        } else {
            bad = Some(e);
            break;
        }
        if e >= limit {
            break;
        }
    }
    if let Some(mut hi) = bad {
        for _ in 0..60 {
            let mid = 0.5 * (good + hi);
            if ok(mid) {
                good = mid;
            } else {
                hi = mid;
            }
        }
    }
    if !(good > 0.0) {
        return Err(Error::IllConditioned("no positive contraction radius found".into()));
    }
    for i in 0..=EPS0_VERIFY_POINTS {
        let e = good * i as f64 / EPS0_VERIFY_POINTS as f64;
        if norm.contraction_excess(cm, e) > EPS0_VERIFY_TOLERANCE {
            return Err(Error::IllConditioned(format!("ε₀ verification failed at ε={e}")));
        }
    }
    norm.eps0 = good;
    Ok(norm)
}

/// Relative size of the last Taylor term accepted as converged.
pub const EXPM_RESIDUAL: f64 = 1e-12;
const EXPM_MAX_TERMS: usize = 64;

/// `e^A` by scaling and squaring the truncated Taylor series.
///
/// `A` is scaled by `2^{−j}` to 1-norm at most 1/2; the series stops once a
/// term is below `1e−16` of the partial sum and fails if no term falls below
/// [`EXPM_RESIDUAL`] within the term budget.
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::Domain("matrix exponential needs a square matrix".into()));
    }
    let d = a.nrows();
    let norm1 = a.column_iter().map(|c| c.lp_norm(1)).fold(0.0, f64::max);
    if !norm1.is_finite() {
        return Err(Error::ExpmConvergence { residual: f64::INFINITY });
    }
    let squarings = if norm1 > 0.5 { (norm1 / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = a / 2f64.powi(squarings);
    let mut sum = DMatrix::<f64>::identity(d, d);
    let mut term = DMatrix::<f64>::identity(d, d);
    let mut residual = f64::INFINITY;
    for k in 1..=EXPM_MAX_TERMS {
        term = &term * &scaled / k as f64;
        sum += &term;
        let t = term.amax();
        residual = t / sum.amax().max(f64::MIN_POSITIVE);
        if residual <= 1e-16 || t == 0.0 {
            break;
        }
    }
    if !(residual <= EXPM_RESIDUAL) {
        return Err(Error::ExpmConvergence { residual });
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    Ok(sum)
}

/// `𝓗[l,k] = Π_{r=l+1}^{k} (I + γ_r H)`; the identity when `l = k`.
pub fn product_operator(h: &DMatrix<f64>, gamma: Sequence<'_>, l: u64, k: u64) -> Result<DMatrix<f64>> {
    if l > k {
        return Err(Error::Domain(format!("product needs l ≤ k (l={l}, k={k})")));
    }
    let d = h.nrows();
    let mut out = DMatrix::identity(d, d);
    for r in l + 1..=k {
        out = (DMatrix::identity(d, d) + h * gamma(r)) * out;
    }
    Ok(out)
}

/// `𝓗̄[l,n] = Σ_{k=l}^{n} (γ_l b_k / b_l) 𝓗[l,k]`, reusing each product.
pub fn averaged_operator(
    h: &DMatrix<f64>,
    gamma: Sequence<'_>,
    b: Sequence<'_>,
    l: u64,
    n: u64,
) -> Result<DMatrix<f64>> {
    if l > n || l == 0 {
        return Err(Error::Domain(format!("averaged operator needs 1 ≤ l ≤ n (l={l}, n={n})")));
    }
    let d = h.nrows();
    let id = DMatrix::<f64>::identity(d, d);
    let mut product = id.clone();
    let mut weighted = DMatrix::zeros(d, d);
    for k in l..=n {
        if k > l {
            product = (&id + h * gamma(k)) * product;
        }
        weighted += &product * b(k);
    }
    Ok(weighted * (gamma(l) / b(l)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub r: u64,
    pub m: u64,
    pub actual: f64,
    pub bound: f64,
}

/// `‖e^{(t_m−t_r)H} − Π_{l=r+1}^m (I + γ_l H)‖_P` against
/// `‖H‖_P² e^{γ₁(L+‖H‖_P)} e^{−(t_m−t_r)L} Σ_{q=r+1}^m γ_q²`.
///
/// Every step used must satisfy `γ_l ≤ ε₀`.
pub fn exp_product_gap(
    cm: &ContractingMatrix,
    norm: &LyapunovNorm,
    gamma: Sequence<'_>,
    r: u64,
    m: u64,
) -> Result<GapRow> {
    if r > m {
        return Err(Error::Domain(format!("gap needs r ≤ m (r={r}, m={m})")));
    }
    let mut elapsed = CompensatedSum::new();
    let mut squares = CompensatedSum::new();
    for l in r + 1..=m {
        let g = gamma(l);
        if g > norm.eps0() {
            return Err(Error::Domain(format!("γ_{l} = {g} exceeds ε₀ = {}", norm.eps0())));
        }
        elapsed.add(g);
        squares.add(g * g);
    }
    let t = elapsed.value();
    let exact = expm(&(cm.h() * t))?;
    let product = product_operator(cm.h(), gamma, r, m)?;
    let actual = norm.operator_norm(&(exact - product));
    let h_norm = norm.operator_norm(cm.h());
    let l = cm.margin();
    let bound = if r == m {
        0.0
    } else {
        h_norm * h_norm * (gamma(1) * (l + h_norm)).exp() * (-t * l).exp() * squares.value()
    };
    Ok(GapRow { r, m, actual, bound })
}

pub fn gap_csv(rows: &[GapRow]) -> String {
    let mut out = String::from("r,m,actual,bound\n");
    for row in rows {
        let _ = writeln!(out, "{},{},{:e},{:e}", row.r, row.m, row.actual, row.bound);
    }
    out
}

/// Both sides of `‖e^A − I‖ ≤ e^{‖A‖}‖A‖` and
/// `‖e^A − I − A‖ ≤ ½e^{‖A‖}‖A‖²` in the spectral norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpBoundGaps {
    pub first: f64,
    pub first_bound: f64,
    pub second: f64,
    pub second_bound: f64,
}

pub fn exp_bound_gaps(a: &DMatrix<f64>) -> Result<ExpBoundGaps> {
    let e = expm(a)?;
    let d = a.nrows();
    let id = DMatrix::<f64>::identity(d, d);
    let n = spectral_norm(a);
    Ok(ExpBoundGaps {
        first: spectral_norm(&(&e - &id)),
        first_bound: n.exp() * n,
        second: spectral_norm(&(e - id - a)),
        second_bound: 0.5 * n.exp() * n * n,
    })
}

/// Final iterate and average of `θ_n = θ_{n−1} + γ_n(Hθ_{n−1} + Υ_n)`,
/// `θ̄_n = b̄_n^{−1} Σ_{k≤n} b_k θ_k`.
pub fn linear_iterate(
    h: &DMatrix<f64>,
    gamma: Sequence<'_>,
    b: Sequence<'_>,
    upsilon: &mut dyn FnMut(u64) -> DVector<f64>,
    theta0: &DVector<f64>,
    n: u64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let d = h.nrows();
    if theta0.len() != d {
        return Err(Error::Dimension {
            expected: d,
            got: theta0.len(),
        });
    }
    let mut theta = theta0.clone();
    let mut theta_bar = DVector::zeros(d);
    let mut b_bar = CompensatedSum::new();
    for k in 1..=n {
        let u = upsilon(k);
        theta += (h * &theta + &u) * gamma(k);
        if !theta.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite {
                iteration: k,
                last_estimate: u.iter().copied().collect(),
            });
        }
        let bk = b(k);
        b_bar.add(bk);
        theta_bar += (&theta - &theta_bar) * (bk / b_bar.value());
    }
    Ok((theta, theta_bar))
}

/// `(b̄_n^{−1} Σ b_k δ_k, b̄_n^{−1} √(Σ (b_k δ_k)²))`, the normalizations of the
/// deterministic and the martingale part of `θ̄_n`.
pub fn linear_normalizers(b: Sequence<'_>, delta: Sequence<'_>, n: u64) -> (f64, f64) {
    let mut b_bar = CompensatedSum::new();
    let mut first = CompensatedSum::new();
    let mut second = CompensatedSum::new();
    for k in 1..=n {
        let (bk, dk) = (b(k), delta(k));
        b_bar.add(bk);
        first.add(bk * dk);
        second.add((bk * dk).powi(2));
    }
    (first.value() / b_bar.value(), second.value().sqrt() / b_bar.value())
}

/// Random non-normal `H = G − (a(G) + u)·I` with Gaussian `G`, shift
/// `u ∈ [0.5, 2]` and contraction margin `u/2`.
pub fn sample_contracting(d: usize, rng: &mut impl Rng) -> ContractingMatrix {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let shift = rng.random_range(0.5..2.0);
    let h = &g - DMatrix::identity(d, d) * (spectral_abscissa(&g) + shift);
    ContractingMatrix::new(h, shift / 2.0).expect("shifted matrix is contracting")
}
