//! Multivariate Gaussians and Gaussian mixtures: EM fitting, responsibilities,
//! log-likelihood, closed-form KL divergence and BIC.
//!
//! Both the color model (3-D LAB means of superpixels) and the fruit counter
//! (2-D pixel coordinates) run on this module.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MixtureError {
    #[error("need at least {needed} points, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("covariance is not positive definite: {0}")]
    Conditioning(String),
    #[error("invalid mixture weights: {0}")]
    InvalidWeights(String),
}

/// Multivariate normal with a symmetric positive-definite covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianRepr", into = "GaussianRepr")]
pub struct Gaussian {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct GaussianRepr {
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
}

impl From<Gaussian> for GaussianRepr {
    fn from(g: Gaussian) -> Self {
        let d = g.dim();
        GaussianRepr {
            mean: g.mean.iter().copied().collect(),
            covariance: (0..d)
                .map(|i| (0..d).map(|j| g.covariance[(i, j)]).collect())
                .collect(),
        }
    }
}

impl TryFrom<GaussianRepr> for Gaussian {
    type Error = MixtureError;

    fn try_from(r: GaussianRepr) -> Result<Self, Self::Error> {
        let d = r.mean.len();
        if r.covariance.len() != d || r.covariance.iter().any(|row| row.len() != d) {
            return Err(MixtureError::DimensionMismatch {
                expected: d,
                got: r.covariance.len(),
            });
        }
        let cov = DMatrix::from_fn(d, d, |i, j| r.covariance[i][j]);
        Gaussian::new(r.mean, cov)
    }
}

const SYMMETRY_TOLERANCE: f64 = 1e-9;

impl Gaussian {
    pub fn new(mean: Vec<f64>, covariance: DMatrix<f64>) -> Result<Self, MixtureError> {
        let d = mean.len();
        if d == 0 {
            return Err(MixtureError::InvalidArgument("dimension must be >= 1".into()));
        }
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(MixtureError::DimensionMismatch {
                expected: d,
                got: covariance.nrows(),
            });
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(MixtureError::InvalidArgument("non-finite parameter".into()));
        }
        let asym = (&covariance - covariance.transpose()).amax();
        if asym >= SYMMETRY_TOLERANCE {
            return Err(MixtureError::Conditioning(format!(
                "covariance asymmetric by {asym:e}"
            )));
        }
        let covariance = (&covariance + covariance.transpose()) * 0.5;
        if covariance.clone().cholesky().is_none() {
            return Err(MixtureError::Conditioning(
                "Cholesky factorisation failed".into(),
            ));
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            covariance,
        })
    }

    /// Isotropic Gaussian `N(mean, variance * I)`.
    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Result<Self, MixtureError> {
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * variance)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        Prepared::new(self).log_density(x, &mut vec![0.0; self.dim()])
    }

    /// Draws one sample via the Cholesky factor.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let l = self
            .covariance
            .clone()
            .cholesky()
            .expect("constructor guarantees positive definiteness")
            .unpack();
        let z = DVector::from_iterator(self.dim(), (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        (&self.mean + l * z).iter().copied().collect()
    }
}

/// Cholesky-factored Gaussian for repeated density evaluation.
struct Prepared {
    mean: Vec<f64>,
    /// Lower-triangular factor, row-major `d x d`.
    chol: Vec<f64>,
    log_norm: f64,
}

impl Prepared {
    fn new(g: &Gaussian) -> Self {
        let d = g.dim();
        let l = g
            .covariance
            .clone()
            .cholesky()
            .expect("constructor guarantees positive definiteness")
            .unpack();
        let log_det: f64 = 2.0 * (0..d).map(|i| l[(i, i)].ln()).sum::<f64>();
        Self {
            mean: g.mean.iter().copied().collect(),
            chol: (0..d * d).map(|k| l[(k / d, k % d)]).collect(),
            log_norm: -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det),
        }
    }

    fn log_density(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        let d = self.mean.len();
        // Solve L z = x - mean by forward substitution.
        let mut maha = 0.0;
        for i in 0..d {
            let mut v = x[i] - self.mean[i];
            for j in 0..i {
                v -= self.chol[i * d + j] * scratch[j];
            }
            v /= self.chol[i * d + i];
            scratch[i] = v;
            maha += v * v;
        }
        self.log_norm - 0.5 * maha
    }
}

/// Weighted sum of Gaussians of a common dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureRepr", into = "MixtureRepr")]
pub struct MixtureModel {
    weights: Vec<f64>,
    components: Vec<Gaussian>,
}

#[derive(Serialize, Deserialize)]
struct MixtureRepr {
    weights: Vec<f64>,
    components: Vec<Gaussian>,
}

impl From<MixtureModel> for MixtureRepr {
    fn from(m: MixtureModel) -> Self {
        MixtureRepr {
            weights: m.weights,
            components: m.components,
        }
    }
}

impl TryFrom<MixtureRepr> for MixtureModel {
    type Error = MixtureError;

    fn try_from(r: MixtureRepr) -> Result<Self, Self::Error> {
        MixtureModel::new(r.weights, r.components)
    }
}

const WEIGHT_TOLERANCE: f64 = 1e-9;

impl MixtureModel {
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self, MixtureError> {
        if components.is_empty() {
            return Err(MixtureError::InvalidArgument(
                "a mixture needs at least one component".into(),
            ));
        }
        if weights.len() != components.len() {
            return Err(MixtureError::InvalidWeights(format!(
                "{} weights for {} components",
                weights.len(),
                components.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(MixtureError::InvalidWeights("weights must be finite and >= 0".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(MixtureError::InvalidWeights(format!("weights sum to {sum}")));
        }
        let d = components[0].dim();
        if let Some(c) = components.iter().find(|c| c.dim() != d) {
            return Err(MixtureError::DimensionMismatch {
                expected: d,
                got: c.dim(),
            });
        }
        Ok(Self {
            weights,
            components,
        })
    }

    pub fn single(component: Gaussian) -> Self {
        Self {
            weights: vec![1.0],
            components: vec![component],
        }
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    /// Index of the component with the highest responsibility for `x`;
    /// ties go to the lower index.
    pub fn most_responsible(&self, x: &[f64]) -> Result<usize, MixtureError> {
        let rows = responsibilities(self, &[x.to_vec()])?;
        Ok(argmax(&rows[0]))
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub enum EmInit {
    #[default]
    KMeansPlusPlus,
    Provided(MixtureModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iterations: usize,
    /// Stop once the relative log-likelihood improvement falls below this.
    pub tolerance: f64,
    pub rng_seed: u64,
    /// Added to the covariance diagonal after every M-step.
    pub covariance_floor: f64,
    pub init: EmInit,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-4,
            rng_seed: 0,
            covariance_floor: 1e-6,
            init: EmInit::KMeansPlusPlus,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<(), MixtureError> {
        if !(self.tolerance > 0.0) {
            return Err(MixtureError::InvalidArgument("tolerance must be > 0".into()));
        }
        if self.max_iterations == 0 {
            return Err(MixtureError::InvalidArgument("max_iterations must be >= 1".into()));
        }
        if !(self.covariance_floor > 0.0 && self.covariance_floor.is_finite()) {
            return Err(MixtureError::InvalidArgument(
                "covariance_floor must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub model: MixtureModel,
    /// Log-likelihood of `model` on the training points.
    pub log_likelihood: f64,
    /// Log-likelihood before each M-step, then of the returned model.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Row-major `n x d` copy of the input points.
struct Points {
    data: Vec<f64>,
    n: usize,
    d: usize,
}

impl Points {
    fn new(points: &[Vec<f64>], expected_dim: Option<usize>) -> Result<Self, MixtureError> {
        let d = expected_dim.or_else(|| points.first().map(Vec::len)).unwrap_or(0);
        let mut data = Vec::with_capacity(points.len() * d);
        for p in points {
            if p.len() != d {
                return Err(MixtureError::DimensionMismatch {
                    expected: d,
                    got: p.len(),
                });
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(MixtureError::InvalidArgument("non-finite coordinate".into()));
            }
            data.extend_from_slice(p);
        }
        Ok(Self {
            data,
            n: points.len(),
            d,
        })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// E-step: fills `resp` (n x k, row-major) and returns the log-likelihood.
fn e_step(model: &MixtureModel, points: &Points, resp: &mut [f64]) -> f64 {
    let k = model.len();
    let prepared: Vec<Prepared> = model.components.iter().map(Prepared::new).collect();
    let log_weights: Vec<f64> = model.weights.iter().map(|w| w.ln()).collect();
    let mut scratch = vec![0.0; points.d];
    let mut total = 0.0;
    for i in 0..points.n {
        let x = points.row(i);
        let row = &mut resp[i * k..(i + 1) * k];
        for (j, (p, lw)) in prepared.iter().zip(&log_weights).enumerate() {
            row[j] = if *lw == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                lw + p.log_density(x, &mut scratch)
            };
        }
        let lse = log_sum_exp(row);
        total += lse;
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    total
}

/// Posterior component probabilities, one row per point.
pub fn responsibilities(model: &MixtureModel, points: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, MixtureError> {
    let pts = Points::new(points, Some(model.dim()))?;
    let k = model.len();
    let mut resp = vec![0.0; pts.n * k];
    e_step(model, &pts, &mut resp);
    Ok(resp.chunks(k).map(<[f64]>::to_vec).collect())
}

/// `sum_x log sum_i pi_i N(x | mu_i, Sigma_i)`; 0 for no points.
pub fn log_likelihood(model: &MixtureModel, points: &[Vec<f64>]) -> Result<f64, MixtureError> {
    let pts = Points::new(points, Some(model.dim()))?;
    let mut resp = vec![0.0; pts.n * model.len()];
    Ok(e_step(model, &pts, &mut resp))
}

fn m_step(points: &Points, resp: &[f64], previous: &MixtureModel, floor: f64) -> Result<MixtureModel, MixtureError> {
    let (n, d, k) = (points.n, points.d, previous.len());
    let mut weights = Vec::with_capacity(k);
    let mut components = Vec::with_capacity(k);
    for j in 0..k {
        let nk: f64 = (0..n).map(|i| resp[i * k + j]).sum();
        if nk <= f64::MIN_POSITIVE * n as f64 {
            // Component lost all support; it keeps its shape with zero weight.
            weights.push(0.0);
            components.push(previous.components[j].clone());
            continue;
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            let r = resp[i * k + j];
            for (m, x) in mean.iter_mut().zip(points.row(i)) {
                *m += r * x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nk);
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for i in 0..n {
            let r = resp[i * k + j];
            let x = points.row(i);
            for a in 0..d {
                let da = x[a] - mean[a];
                for b in 0..=a {
                    cov[(a, b)] += r * da * (x[b] - mean[b]);
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                cov[(b, a)] = cov[(a, b)];
            }
        }
        cov /= nk;
        weights.push(nk / n as f64);
        components.push(floored_gaussian(mean, cov, floor)?);
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    MixtureModel::new(weights, components)
}

/// Adds `floor` to the diagonal, growing it tenfold if the result is still
/// not positive definite.
fn floored_gaussian(mean: Vec<f64>, cov: DMatrix<f64>, floor: f64) -> Result<Gaussian, MixtureError> {
    let d = mean.len();
    let mut eps = floor;
    for _ in 0..8 {
        let candidate = &cov + DMatrix::identity(d, d) * eps;
        if let Ok(g) = Gaussian::new(mean.clone(), candidate) {
            return Ok(g);
        }
        eps *= 10.0;
    }
    Err(MixtureError::Conditioning(
        "covariance stayed singular after flooring".into(),
    ))
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sample_covariance(points: &Points, members: &[usize], mean: &[f64]) -> DMatrix<f64> {
    let d = points.d;
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for &i in members {
        let x = points.row(i);
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += (x[a] - mean[a]) * (x[b] - mean[b]);
            }
        }
    }
    cov / members.len().max(1) as f64
}

/// k-means++ seeding followed by Lloyd refinement; the resulting hard
/// partition gives the starting weights, means and covariances.
fn kmeans_plus_plus_init(points: &Points, k: usize, seed: u64, floor: f64) -> Result<MixtureModel, MixtureError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = points.n;
    let mut centers: Vec<Vec<f64>> = vec![points.row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| squared_distance(points.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &v) in d2.iter().enumerate() {
                if target < v {
                    chosen = i;
                    break;
                }
                target -= v;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points.row(next).to_vec();
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(squared_distance(points.row(i), &c));
        }
        centers.push(c);
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..25 {
        let mut changed = false;
        for (i, a) in assignment.iter_mut().enumerate() {
            let x = points.row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let dist = squared_distance(x, c);
                if dist < best_d {
                    best_d = dist;
                    best = j;
                }
            }
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        for (j, c) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assignment[i] == j).collect();
            if members.is_empty() {
                continue;
            }
            for (dim, v) in c.iter_mut().enumerate() {
                *v = members.iter().map(|&i| points.row(i)[dim]).sum::<f64>() / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }

    let all: Vec<usize> = (0..n).collect();
    let global_mean: Vec<f64> = (0..points.d)
        .map(|dim| (0..n).map(|i| points.row(i)[dim]).sum::<f64>() / n as f64)
        .collect();
    let global_cov = sample_covariance(points, &all, &global_mean);
    let global_diag = DMatrix::from_diagonal(&global_cov.diagonal());

    let mut weights = Vec::with_capacity(k);
    let mut components = Vec::with_capacity(k);
    for (j, c) in centers.into_iter().enumerate() {
        let members: Vec<usize> = (0..n).filter(|&i| assignment[i] == j).collect();
        let cov = if members.len() > points.d {
            sample_covariance(points, &members, &c)
        } else {
            global_diag.clone()
        };
        weights.push(members.len().max(1) as f64);
        components.push(floored_gaussian(c, cov, floor)?);
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    MixtureModel::new(weights, components)
}

/// Fits a `k`-component mixture by EM.
///
/// When every point is identical the result is a single component centered on
/// that point with covariance `covariance_floor * I`, whatever `k` is.
pub fn fit_gmm(points: &[Vec<f64>], k: usize, cfg: &EmConfig) -> Result<FitResult, MixtureError> {
    cfg.validate()?;
    if k == 0 {
        return Err(MixtureError::InvalidArgument("k must be >= 1".into()));
    }
    if points.len() < k {
        return Err(MixtureError::InsufficientData {
            needed: k,
            got: points.len(),
        });
    }
    let pts = Points::new(points, None)?;
    if pts.d == 0 {
        return Err(MixtureError::InvalidArgument("points must have dimension >= 1".into()));
    }

    if points.iter().all(|p| p == &points[0]) {
        let model = MixtureModel::single(Gaussian::isotropic(points[0].clone(), cfg.covariance_floor)?);
        let ll = log_likelihood(&model, points)?;
        return Ok(FitResult {
            model,
            log_likelihood: ll,
            trace: vec![ll],
            iterations: 0,
            converged: true,
        });
    }

    let mut model = match &cfg.init {
        EmInit::KMeansPlusPlus => kmeans_plus_plus_init(&pts, k, cfg.rng_seed, cfg.covariance_floor)?,
        EmInit::Provided(m) => {
            if m.len() != k {
                return Err(MixtureError::InvalidArgument(format!(
                    "provided model has {} components, k = {k}",
                    m.len()
                )));
            }
            if m.dim() != pts.d {
                return Err(MixtureError::DimensionMismatch {
                    expected: pts.d,
                    got: m.dim(),
                });
            }
            m.clone()
        }
    };

    let mut resp = vec![0.0; pts.n * k];
    let mut trace = Vec::new();
    let mut ll = e_step(&model, &pts, &mut resp);
    trace.push(ll);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iterations {
        let next = m_step(&pts, &resp, &model, cfg.covariance_floor)?;
        iterations += 1;
        let next_ll = e_step(&next, &pts, &mut resp);
        trace.push(next_ll);
        let improvement = next_ll - ll;
        model = next;
        ll = next_ll;
        if improvement < cfg.tolerance * ll.abs() {
            converged = true;
            break;
        }
    }
    Ok(FitResult {
        model,
        log_likelihood: ll,
        trace,
        iterations,
        converged,
    })
}

/// Closed-form `KL(p || q)`.
pub fn kl_gaussian(p: &Gaussian, q: &Gaussian) -> Result<f64, MixtureError> {
    if p.dim() != q.dim() {
        return Err(MixtureError::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    if p == q {
        return Ok(0.0);
    }
    let d = p.dim();
    let lq = q
        .covariance
        .clone()
        .cholesky()
        .ok_or_else(|| MixtureError::Conditioning("Cholesky of q failed".into()))?;
    let lp = p
        .covariance
        .clone()
        .cholesky()
        .ok_or_else(|| MixtureError::Conditioning("Cholesky of p failed".into()))?;
    let lq_mat = lq.l();
    if (0..d).any(|i| lq_mat[(i, i)] <= f64::MIN_POSITIVE.sqrt()) {
        return Err(MixtureError::Conditioning("q covariance is numerically singular".into()));
    }
    // tr(Sq^-1 Sp) = ||Lq^-1 Lp||_F^2
    let a = lq_mat
        .solve_lower_triangular(&lp.l())
        .ok_or_else(|| MixtureError::Conditioning("triangular solve failed".into()))?;
    let trace = a.norm_squared();
    let diff = &q.mean - &p.mean;
    let z = lq_mat
        .solve_lower_triangular(&diff)
        .ok_or_else(|| MixtureError::Conditioning("triangular solve failed".into()))?;
    let maha = z.norm_squared();
    let lp_mat = lp.l();
    let log_det_ratio: f64 = 2.0
        * (0..d)
            .map(|i| lq_mat[(i, i)].ln() - lp_mat[(i, i)].ln())
            .sum::<f64>();
    Ok((0.5 * (trace + maha - d as f64 + log_det_ratio)).max(0.0))
}

/// Free parameters of a full-covariance mixture: means, covariances and
/// `k - 1` weights.
pub fn free_parameters(k: usize, d: usize) -> usize {
    k * (d + d * (d + 1) / 2) + k.saturating_sub(1)
}

/// `p ln n - 2 LL` for an arbitrary parameter count and (possibly
/// fractional) effective sample size.
pub fn bic_score(parameters: usize, sample_size: f64, log_likelihood: f64) -> f64 {
    parameters as f64 * sample_size.ln() - 2.0 * log_likelihood
}

pub fn bic(model: &MixtureModel, n_points: usize, log_likelihood: f64) -> f64 {
    bic_score(free_parameters(model.len(), model.dim()), n_points as f64, log_likelihood)
}
