//! Probability primitives shared by the learner, simulator and planner.
//!
//! Everything here is a pure function of its parameters and the random
//! generator handed in. Reproducibility across threads comes from
//! [`RngStream`]: every parallel task derives its own substream from a
//! `(seed, stream_id)` pair instead of sharing generator state.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Seed plus stream index of a counter-based ChaCha generator.
///
/// Two streams with the same `(seed, stream_id)` produce identical draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream_id: 0 }
    }

    pub fn with_stream(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Derives an independent child stream keyed by `path`, e.g. `[sweep, series]`.
    pub fn substream(&self, path: &[u64]) -> Self {
        let mut id = splitmix64(self.stream_id ^ 0x5851_f42d_4c95_7f2d);
        for &key in path {
            id = splitmix64(id ^ splitmix64(key.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        }
        Self {
            seed: self.seed,
            stream_id: id,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Cholesky factorization that reports which matrix failed.
pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "{what} is {}x{}, expected square",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite(format!("{what} has non-finite entries")));
    }
    Cholesky::new(m.clone()).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

fn log_det_from_chol(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Multivariate normal density with a cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct Gaussian {
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl Gaussian {
    pub fn new(cov: &DMatrix<f64>) -> Result<Self> {
        let chol = cholesky(cov, "covariance")?;
        let d = cov.nrows() as f64;
        let log_norm = -0.5 * (d * LN_2PI + log_det_from_chol(&chol));
        Ok(Self { chol, log_norm })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// Log-density of a deviation `x - mean`.
    pub fn logpdf_centered(&self, diff: &DVector<f64>) -> f64 {
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(diff)
            .expect("cholesky factor has a positive diagonal");
        self.log_norm - 0.5 * z.norm_squared()
    }

    pub fn logpdf(&self, x: &DVector<f64>, mean: &DVector<f64>) -> f64 {
        self.logpdf_centered(&(x - mean))
    }

    /// Draws `L z` with `z ~ N(0, I)`.
    pub fn sample_centered<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let d = self.dim();
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        self.chol.l() * z
    }
}

/// Log-density of `N(x; mean, cov)`.
pub fn mvn_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    if x.len() != mean.len() || cov.nrows() != x.len() {
        return Err(Error::Dimension(format!(
            "x has {} entries, mean {}, covariance {}x{}",
            x.len(),
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    Ok(Gaussian::new(cov)?.logpdf(x, mean))
}

/// Draws from `N(mean, cov)` via the Cholesky factor of `cov`.
pub fn mvn_sample<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if cov.nrows() != mean.len() {
        return Err(Error::Dimension(format!(
            "mean has {} entries but covariance is {}x{}",
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    let g = Gaussian::new(cov)?;
    Ok(mean + g.sample_centered(rng))
}

/// Draws a probability vector from `Dir(weights)`.
///
/// Gamma variates are generated in log space so that tiny concentration
/// parameters do not underflow to an all-zero vector.
pub fn dirichlet_sample<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(Error::InvalidParameter("dirichlet needs at least one weight".into()));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "dirichlet weight {w} is not positive"
        )));
    }
    if weights.len() == 1 {
        return Ok(vec![1.0]);
    }
    let logs: Vec<f64> = weights
        .iter()
        .map(|&w| log_gamma_variate(w, rng))
        .collect();
    Ok(normalize_log(&logs))
}

/// `ln X` for `X ~ Gamma(shape, 1)`, using `X = Y U^{1/shape}` with `Y ~ Gamma(shape + 1)`
/// when `shape < 1`.
fn log_gamma_variate<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape >= 1.0 {
        let g = Gamma::new(shape, 1.0).expect("positive shape");
        g.sample(rng).max(f64::MIN_POSITIVE).ln()
    } else {
        let g = Gamma::new(shape + 1.0, 1.0).expect("positive shape");
        let y: f64 = g.sample(rng);
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        y.max(f64::MIN_POSITIVE).ln() + u.ln() / shape
    }
}

/// Uniform draw from the probability simplex with `k` vertices.
pub fn uniform_simplex_sample<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    dirichlet_sample(&vec![1.0; k], rng).expect("unit weights are valid")
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Exponentiates and normalizes a log-weight vector.
pub fn normalize_log(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    let mut p: Vec<f64> = xs.iter().map(|x| (x - lse).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

/// Samples an index proportional to `exp(log_weights)`.
pub fn sample_log_categorical<R: Rng + ?Sized>(log_weights: &[f64], rng: &mut R) -> usize {
    let p = normalize_log(log_weights);
    sample_categorical(&p, rng)
}

/// Samples an index from a probability vector. Falls back to the last
/// positive entry when round-off leaves a sliver of unassigned mass.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// `ln Γ_d(x)`, the multivariate gamma function.
pub fn ln_multivariate_gamma(d: usize, x: f64) -> f64 {
    let df = d as f64;
    df * (df - 1.0) / 4.0 * std::f64::consts::PI.ln()
        + (1..=d).map(|j| ln_gamma(x + (1.0 - j as f64) / 2.0)).sum::<f64>()
}

/// Matrix-normal inverse-Wishart prior over `(A, Σ)` for the regression
/// `y = A x + e`, `e ~ N(0, Σ)`, where `A` stacks the lag matrices
/// side by side (`d × r·d`).
///
/// `Σ ~ IW(scale, dof)` and `A | Σ ~ MN(mean, Σ, col_precision⁻¹)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MniwPrior {
    pub mean: DMatrix<f64>,
    pub col_precision: DMatrix<f64>,
    pub scale: DMatrix<f64>,
    pub dof: f64,
}

impl MniwPrior {
    /// `M0 = 0`, `K0 = 0.1·I`, `S0 = 0.5·I`, `nu0 = d + 2`.
    pub fn default_for(obs_dim: usize, var_order: usize) -> Self {
        Self::isotropic(obs_dim, var_order, 0.1, 0.5, obs_dim as f64 + 2.0)
    }

    pub fn isotropic(obs_dim: usize, var_order: usize, k0: f64, s0: f64, dof: f64) -> Self {
        let p = obs_dim * var_order;
        Self {
            mean: DMatrix::zeros(obs_dim, p),
            col_precision: DMatrix::identity(p, p) * k0,
            scale: DMatrix::identity(obs_dim, obs_dim) * s0,
            dof,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.scale.nrows()
    }

    pub fn regressor_dim(&self) -> usize {
        self.col_precision.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.obs_dim();
        let p = self.regressor_dim();
        if self.mean.nrows() != d || self.mean.ncols() != p || self.col_precision.ncols() != p {
            return Err(Error::Dimension(format!(
                "MNIW prior mean is {}x{}, expected {d}x{p}",
                self.mean.nrows(),
                self.mean.ncols()
            )));
        }
        if p > 0 {
            cholesky(&self.col_precision, "MNIW column precision")?;
        }
        cholesky(&self.scale, "MNIW scale")?;
        if !(self.dof > d as f64 - 1.0) {
            return Err(Error::InvalidParameter(format!(
                "MNIW degrees of freedom {} must exceed d - 1 = {}",
                self.dof,
                d as f64 - 1.0
            )));
        }
        Ok(())
    }

    /// Expected lag matrix stack `E[A] = M`.
    pub fn mean_lags(&self) -> &DMatrix<f64> {
        &self.mean
    }

    /// Joint log-density `ln IW(Σ) + ln MN(A | Σ)`.
    pub fn log_density(&self, lags: &DMatrix<f64>, cov: &DMatrix<f64>) -> Result<f64> {
        let d = self.obs_dim();
        let p = self.regressor_dim();
        let df = d as f64;
        let nu = self.dof;
        let cov_chol = cholesky(cov, "noise covariance")?;
        let scale_chol = cholesky(&self.scale, "MNIW scale")?;
        let ld_cov = log_det_from_chol(&cov_chol);
        let cov_inv = cov_chol.inverse();
        let log_iw = 0.5 * nu * log_det_from_chol(&scale_chol)
            - 0.5 * nu * df * std::f64::consts::LN_2
            - ln_multivariate_gamma(d, 0.5 * nu)
            - 0.5 * (nu + df + 1.0) * ld_cov
            - 0.5 * (&self.scale * &cov_inv).trace();
        if p == 0 {
            return Ok(log_iw);
        }
        let k_chol = cholesky(&self.col_precision, "MNIW column precision")?;
        let diff = lags - &self.mean;
        // tr[K (A - M)ᵀ Σ⁻¹ (A - M)]
        let quad = (&self.col_precision * diff.transpose() * &cov_inv * &diff).trace();
        let pf = p as f64;
        let log_mn = -0.5 * df * pf * LN_2PI + 0.5 * df * log_det_from_chol(&k_chol)
            - 0.5 * pf * ld_cov
            - 0.5 * quad;
        Ok(log_iw + log_mn)
    }
}

/// Sufficient statistics of regression pairs `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionStats {
    pub xx: DMatrix<f64>,
    pub yx: DMatrix<f64>,
    pub yy: DMatrix<f64>,
    pub count: usize,
}

impl RegressionStats {
    pub fn new(obs_dim: usize, regressor_dim: usize) -> Self {
        Self {
            xx: DMatrix::zeros(regressor_dim, regressor_dim),
            yx: DMatrix::zeros(obs_dim, regressor_dim),
            yy: DMatrix::zeros(obs_dim, obs_dim),
            count: 0,
        }
    }

    pub fn push(&mut self, x: &DVector<f64>, y: &DVector<f64>) {
        self.xx.ger(1.0, x, x, 1.0);
        self.yx.ger(1.0, y, x, 1.0);
        self.yy.ger(1.0, y, y, 1.0);
        self.count += 1;
    }
}

/// Conjugate MNIW update from aligned regressor/response lists.
pub fn mniw_posterior(
    prior: &MniwPrior,
    regressors: &[DVector<f64>],
    responses: &[DVector<f64>],
) -> Result<MniwPrior> {
    if regressors.len() != responses.len() {
        return Err(Error::Dimension(format!(
            "{} regressors but {} responses",
            regressors.len(),
            responses.len()
        )));
    }
    let d = prior.obs_dim();
    let p = prior.regressor_dim();
    let mut stats = RegressionStats::new(d, p);
    for (x, y) in regressors.iter().zip(responses) {
        if x.len() != p || y.len() != d {
            return Err(Error::Dimension(format!(
                "regressor has {} entries (expected {p}), response {} (expected {d})",
                x.len(),
                y.len()
            )));
        }
        stats.push(x, y);
    }
    mniw_posterior_from_stats(prior, &stats)
}

/// Conjugate MNIW update from accumulated sufficient statistics.
///
/// `Kn = K0 + Σxxᵀ`, `Mn = (Σyxᵀ + M0 K0) Kn⁻¹`,
/// `Sn = S0 + Σyyᵀ + M0 K0 M0ᵀ − Mn Kn Mnᵀ`, `nun = nu0 + n`.
pub fn mniw_posterior_from_stats(prior: &MniwPrior, stats: &RegressionStats) -> Result<MniwPrior> {
    let p = prior.regressor_dim();
    if stats.count == 0 {
        return Ok(prior.clone());
    }
    let dof = prior.dof + stats.count as f64;
    if p == 0 {
        let scale = symmetrize(&(&prior.scale + &stats.yy));
        return Ok(MniwPrior {
            mean: prior.mean.clone(),
            col_precision: prior.col_precision.clone(),
            scale,
            dof,
        });
    }
    let kn = &prior.col_precision + &stats.xx;
    let kn_chol = cholesky(&kn, "posterior column precision")?;
    let m0k0 = &prior.mean * &prior.col_precision;
    // Mn = B Kn⁻¹  ⇔  Kn Mnᵀ = Bᵀ
    let rhs = (&stats.yx + &m0k0).transpose();
    let mn = kn_chol.solve(&rhs).transpose();
    let scale = &prior.scale + &stats.yy + &m0k0 * prior.mean.transpose()
        - &mn * &kn * mn.transpose();
    Ok(MniwPrior {
        mean: mn,
        col_precision: kn,
        scale: symmetrize(&scale),
        dof,
    })
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Draws `Σ ~ IW(scale, dof)` with the Bartlett decomposition.
pub fn inverse_wishart_sample<R: Rng + ?Sized>(
    scale: &DMatrix<f64>,
    dof: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let d = scale.nrows();
    if !(dof > d as f64 - 1.0) {
        return Err(Error::InvalidParameter(format!(
            "inverse-Wishart dof {dof} must exceed d - 1"
        )));
    }
    let u = cholesky(scale, "inverse-Wishart scale")?.unpack();
    // W = B Bᵀ ~ Wishart(I, dof); Σ = U W⁻¹ Uᵀ = Xᵀ X with B X = Uᵀ.
    let mut b = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new(dof - i as f64).expect("positive dof");
        b[(i, i)] = chi.sample(rng).max(f64::MIN_POSITIVE).sqrt();
        for j in 0..i {
            b[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let x = b
        .solve_lower_triangular(&u.transpose())
        .ok_or_else(|| Error::NotPositiveDefinite("Bartlett factor".into()))?;
    Ok(symmetrize(&(x.transpose() * x)))
}

/// Draws `(A, Σ)` from an MNIW distribution.
pub fn mniw_sample<R: Rng + ?Sized>(
    params: &MniwPrior,
    rng: &mut R,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = params.obs_dim();
    let p = params.regressor_dim();
    let cov = inverse_wishart_sample(&params.scale, params.dof, rng)?;
    if p == 0 {
        return Ok((DMatrix::zeros(d, 0), cov));
    }
    let cov_l = cholesky(&cov, "sampled noise covariance")?.unpack();
    let k_l = cholesky(&params.col_precision, "column precision")?.unpack();
    let z = DMatrix::from_fn(d, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    // Column covariance K⁻¹ = (C Cᵀ)⁻¹ has factor C⁻ᵀ, so A = M + L_Σ Z C⁻¹.
    // Y = Z C⁻¹  ⇔  Cᵀ Yᵀ = Zᵀ
    let y = k_l
        .transpose()
        .solve_upper_triangular(&z.transpose())
        .ok_or_else(|| Error::NotPositiveDefinite("column precision factor".into()))?
        .transpose();
    Ok((&params.mean + cov_l * y, cov))
}
