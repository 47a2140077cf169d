//! Approximation families `F_1, F_2, ...` and their per-sample costs.
//!
//! A family only has to produce samples of the level differences
//! `F_k(θ, U) − F_{k−1}(θ, U)` (with `F_0 ≡ 0`, so level 1 is the coarse
//! estimator itself). The built-in [`SyntheticGaussianFamily`] realizes the
//! bias, variance and tail conditions with exact equality and carries full
//! ground truth; [`EulerSdeFamily`] is a coupled Euler–Maruyama scheme used for
//! qualitative rate checks only.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Randomness stream owned by one caller at a time.
pub type Stream = ChaCha12Rng;

/// Stream `index` of the family keyed by `master_seed`.
///
/// All indices share one ChaCha key and differ in the 64-bit stream id, so
/// distinct indices never overlap regardless of how much each consumes.
pub fn replica_stream(master_seed: u64, index: u64) -> Stream {
    let mut rng = Stream::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

/// Exactly known limits of a family around its target.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub theta_star: DVector<f64>,
    pub h: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub gamma: DMatrix<f64>,
}

pub trait LevelFamily: Send + Sync {
    fn dim(&self) -> usize;

    /// Level scale `M`.
    fn scale(&self) -> f64;

    /// Nominal orders `(α, β)`.
    fn orders(&self) -> (f64, f64);

    /// One sample of `F_k(θ, U) − F_{k−1}(θ, U)`.
    fn sample_level_diff(&self, theta: &DVector<f64>, level: u32, rng: &mut Stream)
        -> Result<DVector<f64>>;

    /// Adds the mean of `count` independent level differences to `acc`.
    ///
    /// The default draws the samples one by one, in order. Families whose
    /// sample mean has a closed-form law may draw it directly.
    fn accumulate_level_mean(
        &self,
        theta: &DVector<f64>,
        level: u32,
        count: u64,
        rng: &mut Stream,
        acc: &mut DVector<f64>,
    ) -> Result<()> {
        let mut sum = DVector::zeros(self.dim());
        for _ in 0..count {
            sum += self.sample_level_diff(theta, level, rng)?;
        }
        *acc += sum / count as f64;
        Ok(())
    }

    /// Number of standard-normal variates one call of
    /// [`sample_level_diff`](Self::sample_level_diff) consumes at `level`.
    fn variates_per_sample(&self, level: u32) -> u64;

    fn ground_truth(&self) -> Option<&GroundTruth> {
        None
    }

    /// Root `θ*` when known, even without full ground truth.
    fn target(&self) -> Option<&DVector<f64>> {
        self.ground_truth().map(|g| &g.theta_star)
    }

    /// Mean field `f(θ) = E[F(θ, U)]` when known in closed form.
    fn mean_field(&self, _theta: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }
}

fn check_level(level: u32) -> Result<()> {
    if level == 0 {
        Err(Error::Domain("level k must be at least 1".into()))
    } else {
        Ok(())
    }
}

fn check_dim(theta: &DVector<f64>, d: usize) -> Result<()> {
    if theta.len() != d {
        Err(Error::Dimension {
            expected: d,
            got: theta.len(),
        })
    } else {
        Ok(())
    }
}

/// Per-sample cost `C_k(θ)` of one level-`k` difference.
pub trait CostModel: Send + Sync {
    fn level_cost(&self, theta: &DVector<f64>, level: u32) -> Result<f64>;
}

/// `C_k(θ) = κ_C M^k`, the cost of the built-in families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricCost {
    pub kappa_c: f64,
    pub scale: f64,
}

impl GeometricCost {
    pub fn new(kappa_c: f64, scale: f64) -> Self {
        Self { kappa_c, scale }
    }
}

impl CostModel for GeometricCost {
    fn level_cost(&self, _theta: &DVector<f64>, level: u32) -> Result<f64> {
        check_level(level)?;
        Ok(self.kappa_c * self.scale.powi(level as i32))
    }
}

/// Symmetric square root of a positive semidefinite matrix.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Domain("matrix must be square".into()));
    }
    let sym = (m + m.transpose()) * 0.5;
    if (&sym - m).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(Error::Domain("covariance must be symmetric".into()));
    }
    let eig = SymmetricEigen::new(sym);
    let tol = 1e-12 * eig.eigenvalues.amax().max(1.0);
    if eig.eigenvalues.iter().any(|&l| l < -tol) {
        return Err(Error::Domain("covariance must be positive semidefinite".into()));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Gaussian family with exactly prescribed bias and variance orders.
///
/// With `Γ = A Aᵀ`, `g` standard normal and the modulation
/// `m(θ) = 1 + |θ − θ*|` (or `m ≡ 1` when disabled), one sample is
///
/// * level 1: `f(θ) + μ m(θ) M^{−α} + M^{−β/2} m(θ) A g`
/// * level `k ≥ 2`: `μ m(θ)(M^{−αk} − M^{−α(k−1)}) + M^{−βk/2} m(θ) A g`
///
/// where `f(θ) = H(θ − θ*) + (θ − θ*) ⊙ Q(θ − θ*)` (`Q = 0` unless set).
/// Every sample consumes exactly `d` normal variates.
#[derive(Debug, Clone)]
pub struct SyntheticGaussianFamily {
    truth: GroundTruth,
    noise_factor: DMatrix<f64>,
    alpha: f64,
    beta: f64,
    scale: f64,
    quadratic: Option<DMatrix<f64>>,
    modulated: bool,
}

impl SyntheticGaussianFamily {
    pub fn new(
        theta_star: DVector<f64>,
        h: DMatrix<f64>,
        mu: DVector<f64>,
        gamma: DMatrix<f64>,
        alpha: f64,
        beta: f64,
        scale: f64,
    ) -> Result<Self> {
        let d = theta_star.len();
        if d == 0 {
            return Err(Error::Domain("dimension must be positive".into()));
        }
        if h.shape() != (d, d) || gamma.shape() != (d, d) {
            return Err(Error::Dimension {
                expected: d,
                got: h.nrows().max(gamma.nrows()),
            });
        }
        check_dim(&mu, d)?;
        if !(alpha > 0.0 && beta > 0.0 && scale > 1.0) {
            return Err(Error::Domain("need α > 0, β > 0, M > 1".into()));
        }
        let noise_factor = psd_sqrt(&gamma)?;
        Ok(Self {
            truth: GroundTruth {
                theta_star,
                h,
                mu,
                gamma,
            },
            noise_factor,
            alpha,
            beta,
            scale,
            quadratic: None,
            modulated: false,
        })
    }

    /// Adds the perturbation `(θ − θ*) ⊙ Q(θ − θ*)` to the mean field.
    pub fn with_quadratic(mut self, q: DMatrix<f64>) -> Result<Self> {
        let d = self.dim();
        if q.shape() != (d, d) {
            return Err(Error::Dimension {
                expected: d,
                got: q.nrows(),
            });
        }
        self.quadratic = Some(q);
        Ok(self)
    }

    /// Scales bias and noise by `m(θ) = 1 + |θ − θ*|`.
    pub fn with_modulation(mut self, on: bool) -> Self {
        self.modulated = on;
        self
    }

    pub fn noise_factor(&self) -> &DMatrix<f64> {
        &self.noise_factor
    }

    pub fn modulation(&self, theta: &DVector<f64>) -> f64 {
        if self.modulated {
            1.0 + (theta - &self.truth.theta_star).norm()
        } else {
            1.0
        }
    }

    fn f(&self, theta: &DVector<f64>) -> DVector<f64> {
        let dev = theta - &self.truth.theta_star;
        let mut out = &self.truth.h * &dev;
        if let Some(q) = &self.quadratic {
            out += dev.component_mul(&(q * &dev));
        }
        out
    }

    /// Mean of one level-`k` difference sample.
    fn level_mean(&self, theta: &DVector<f64>, level: u32, m: f64) -> DVector<f64> {
        let k = level as f64;
        let decay = |j: f64| self.scale.powf(-self.alpha * j);
        if level == 1 {
            self.f(theta) + &self.truth.mu * (m * decay(1.0))
        } else {
            &self.truth.mu * (m * (decay(k) - decay(k - 1.0)))
        }
    }

    /// `acc += c · A g` with `d` fresh normals.
    fn add_noise(&self, c: f64, rng: &mut Stream, acc: &mut DVector<f64>) {
        let d = self.dim();
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for i in 0..d {
            let mut s = 0.0;
            for (j, gj) in g.iter().enumerate() {
                s += self.noise_factor[(i, j)] * gj;
            }
            acc[i] += c * s;
        }
    }
}

impl LevelFamily for SyntheticGaussianFamily {
    fn dim(&self) -> usize {
        self.truth.theta_star.len()
    }

    fn scale(&self) -> f64 {
        self.scale
    }

    fn orders(&self) -> (f64, f64) {
        (self.alpha, self.beta)
    }

    fn sample_level_diff(
        &self,
        theta: &DVector<f64>,
        level: u32,
        rng: &mut Stream,
    ) -> Result<DVector<f64>> {
        check_level(level)?;
        check_dim(theta, self.dim())?;
        let m = self.modulation(theta);
        let mut out = self.level_mean(theta, level, m);
        let sd = m * self.scale.powf(-self.beta * level as f64 / 2.0);
        self.add_noise(sd, rng, &mut out);
        Ok(out)
    }

    /// The mean of `N` samples is Gaussian with the same mean and covariance
    /// divided by `N`; it is drawn directly with `d` variates.
    fn accumulate_level_mean(
        &self,
        theta: &DVector<f64>,
        level: u32,
        count: u64,
        rng: &mut Stream,
        acc: &mut DVector<f64>,
    ) -> Result<()> {
        check_level(level)?;
        check_dim(theta, self.dim())?;
        if count == 0 {
            return Err(Error::Domain("sample count must be positive".into()));
        }
        let m = self.modulation(theta);
        *acc += self.level_mean(theta, level, m);
        let sd = m * self.scale.powf(-self.beta * level as f64 / 2.0) / (count as f64).sqrt();
        self.add_noise(sd, rng, acc);
        Ok(())
    }

    fn variates_per_sample(&self, _level: u32) -> u64 {
        self.dim() as u64
    }

    fn ground_truth(&self) -> Option<&GroundTruth> {
        Some(&self.truth)
    }

    fn mean_field(&self, theta: &DVector<f64>) -> Option<DVector<f64>> {
        Some(self.f(theta))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Payoff {
    Identity,
    Call { strike: f64 },
}

impl Payoff {
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Payoff::Identity => x,
            Payoff::Call { strike } => (x - strike).max(0.0),
        }
    }
}

/// Scalar SDE `dX = (a₀ + a₁X) dt + (b₀ + b₁X) dW` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSde {
    pub x0: f64,
    pub horizon: f64,
    pub drift: [f64; 2],
    pub diffusion: [f64; 2],
}

impl LinearSde {
    fn drift(&self, x: f64) -> f64 {
        self.drift[0] + self.drift[1] * x
    }

    fn diffusion(&self, x: f64) -> f64 {
        self.diffusion[0] + self.diffusion[1] * x
    }
}

/// One-dimensional root-finding problem `E[payoff(X_T)] − θ = 0` solved with
/// coupled Euler–Maruyama levels.
///
/// Level `k` runs `M^k` steps; its coarse partner runs `M^{k−1}` steps driven
/// by the sums of consecutive blocks of `M` fine increments. A sample consumes
/// exactly `M^k` normal variates. Level 1 is `payoff(X^{(1)}_T) − θ`; higher
/// levels are `payoff(fine) − payoff(coarse)` and do not depend on `θ`.
#[derive(Debug, Clone)]
pub struct EulerSdeFamily {
    sde: LinearSde,
    payoff: Payoff,
    scale: u32,
    target: Option<DVector<f64>>,
}

impl EulerSdeFamily {
    /// `scale` must be an integer ≥ 2 so coarse steps align with fine ones.
    pub fn new(sde: LinearSde, payoff: Payoff, scale: u32, target: Option<f64>) -> Result<Self> {
        if scale < 2 {
            return Err(Error::Domain("Euler family needs integer M ≥ 2".into()));
        }
        if !(sde.horizon > 0.0) {
            return Err(Error::Domain("horizon must be positive".into()));
        }
        Ok(Self {
            sde,
            payoff,
            scale,
            target: target.map(|t| DVector::from_element(1, t)),
        })
    }

    /// Exact `E[X_T]` for the linear SDE, the target of the identity payoff.
    pub fn exact_mean(sde: &LinearSde) -> f64 {
        let [a0, a1] = sde.drift;
        let t = sde.horizon;
        if a1 == 0.0 {
            sde.x0 + a0 * t
        } else {
            let e = (a1 * t).exp();
            sde.x0 * e + a0 / a1 * (e - 1.0)
        }
    }

    /// Fine and coarse terminal payoffs of one coupled sample; the coarse value
    /// is `None` at level 1.
    fn coupled_payoffs(&self, level: u32, rng: &mut Stream) -> (f64, Option<f64>) {
        let m = self.scale as u64;
        let fine_steps = m.pow(level);
        let h = self.sde.horizon / fine_steps as f64;
        let sqrt_h = h.sqrt();
        let coarse_h = h * m as f64;
        let mut xf = self.sde.x0;
        let mut xc = self.sde.x0;
        let mut dw_block = 0.0;
        for i in 0..fine_steps {
            let z: f64 = rng.sample(StandardNormal);
            let dw = sqrt_h * z;
            xf += self.sde.drift(xf) * h + self.sde.diffusion(xf) * dw;
            dw_block += dw;
            if (i + 1) % m == 0 {
                xc += self.sde.drift(xc) * coarse_h + self.sde.diffusion(xc) * dw_block;
                dw_block = 0.0;
            }
        }
        let fine = self.payoff.apply(xf);
        let coarse = (level > 1).then(|| self.payoff.apply(xc));
        (fine, coarse)
    }
}

impl LevelFamily for EulerSdeFamily {
    fn dim(&self) -> usize {
        1
    }

    fn scale(&self) -> f64 {
        self.scale as f64
    }

    fn orders(&self) -> (f64, f64) {
        (1.0, 1.0)
    }

    fn sample_level_diff(
        &self,
        theta: &DVector<f64>,
        level: u32,
        rng: &mut Stream,
    ) -> Result<DVector<f64>> {
        check_level(level)?;
        check_dim(theta, 1)?;
        let value = match self.coupled_payoffs(level, rng) {
            (fine, None) => fine - theta[0],
            (fine, Some(coarse)) => fine - coarse,
        };
        Ok(DVector::from_element(1, value))
    }

    fn variates_per_sample(&self, level: u32) -> u64 {
        (self.scale as u64).pow(level)
    }

    fn target(&self) -> Option<&DVector<f64>> {
        self.target.as_ref()
    }

    fn mean_field(&self, theta: &DVector<f64>) -> Option<DVector<f64>> {
        self.target.as_ref().map(|t| t - theta)
    }
}

/// Monte Carlo estimate of the scaled order constants at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub level: u32,
    /// `M^{αk} |E[F_k(θ)] − f(θ)|`, estimated from cumulative level means;
    /// `None` when the family has no closed-form `f`.
    pub scaled_bias_norm: Option<f64>,
    /// `M^{βk} cov(F_k(θ) − F_{k−1}(θ))`.
    pub scaled_covariance: DMatrix<f64>,
}

pub const MIN_ORDER_SAMPLES: usize = 100;

/// Estimates `M^{αk}(E[F_k] − f)` and `M^{βk} cov(F_k − F_{k−1})` for
/// `k = 1..=k_max` at `theta` (default: the family's target).
pub fn empirical_order_check(
    family: &dyn LevelFamily,
    theta: Option<&DVector<f64>>,
    k_max: u32,
    samples_per_level: usize,
    rng: &mut Stream,
) -> Result<Vec<OrderRow>> {
    if samples_per_level < MIN_ORDER_SAMPLES {
        return Err(Error::InsufficientSamples {
            got: samples_per_level,
            min: MIN_ORDER_SAMPLES,
        });
    }
    check_level(k_max)?;
    let theta = match theta {
        Some(t) => t.clone(),
        None => family
            .target()
            .cloned()
            .ok_or(Error::NoGroundTruth("order check needs θ or a known target"))?,
    };
    let d = family.dim();
    let (alpha, beta) = family.orders();
    let scale = family.scale();
    let f = family.mean_field(&theta);
    let n = samples_per_level as f64;

    let mut cumulative_mean = DVector::zeros(d);
    let mut rows = Vec::with_capacity(k_max as usize);
    for level in 1..=k_max {
        let samples: Vec<DVector<f64>> = (0..samples_per_level)
            .map(|_| family.sample_level_diff(&theta, level, rng))
            .collect::<Result<_>>()?;
        let mean = samples.iter().fold(DVector::zeros(d), |a, x| a + x) / n;
        let mut cov = DMatrix::zeros(d, d);
        for x in &samples {
            let c = x - &mean;
            cov += &c * c.transpose();
        }
        cov /= n - 1.0;
        cumulative_mean += &mean;

        let k = level as f64;
        rows.push(OrderRow {
            level,
            scaled_bias_norm: f
                .as_ref()
                .map(|f| (&cumulative_mean - f).norm() * scale.powf(alpha * k)),
            scaled_covariance: cov * scale.powf(beta * k),
        });
    }
    Ok(rows)
}
