//! Gaussian local laws, correlation matrices and the closed-form
//! information numbers of the mean-change and correlation-change models.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use smallvec::SmallVec;

use crate::error::{invalid, Error, Result};
use crate::model::LocalDistribution;
use crate::stats::RandomStream;

/// Cholesky pivots below this are treated as a failed factorization.
pub const PIVOT_TOLERANCE: f64 = 1e-10;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

type Buf = SmallVec<[f64; 8]>;

/// Lower-triangular factor `L` with `A = L Lᵀ`, row-major.
#[derive(Debug, Clone, PartialEq)]
struct Cholesky {
    dim: usize,
    lower: Vec<f64>,
    log_det: f64,
}

impl Cholesky {
    fn factor(a: &[f64], dim: usize) -> Result<Self> {
        let mut lower = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                let mut s = a[i * dim + j];
                for k in 0..j {
                    s -= lower[i * dim + k] * lower[j * dim + k];
                }
                if i == j {
                    if !(s >= PIVOT_TOLERANCE) {
                        return Err(Error::ModelInfeasible {
                            minor: i + 1,
                            pivot: s,
                        });
                    }
                    lower[i * dim + i] = s.sqrt();
                } else {
                    lower[i * dim + j] = s / lower[j * dim + j];
                }
            }
        }
        let log_det = 2.0 * (0..dim).map(|i| lower[i * dim + i].ln()).sum::<f64>();
        Ok(Self {
            dim,
            lower,
            log_det,
        })
    }

    /// `|L⁻¹ v|²` by forward substitution.
    #[inline]
    fn mahalanobis(&self, v: &[f64]) -> f64 {
        let n = self.dim;
        let mut z: Buf = SmallVec::with_capacity(n);
        let mut q = 0.0;
        for i in 0..n {
            let row = &self.lower[i * n..i * n + i];
            let s = row.iter().zip(&z).fold(v[i], |acc, (l, zj)| acc - l * zj);
            let zi = s / self.lower[i * n + i];
            q += zi * zi;
            z.push(zi);
        }
        q
    }

    /// Solves `A x = b`.
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.lower[i * n + k] * y[k];
            }
            y[i] = s / self.lower[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.lower[k * n + i] * y[k];
            }
            y[i] = s / self.lower[i * n + i];
        }
        y
    }
}

fn check_square(entries: &[f64], dim: usize) -> Result<()> {
    if dim == 0 || entries.len() != dim * dim {
        return Err(invalid(format!(
            "expected a {dim}x{dim} matrix, got {} entries",
            entries.len()
        )));
    }
    if entries.iter().any(|v| !v.is_finite()) {
        return Err(invalid("matrix has non-finite entries"));
    }
    for i in 0..dim {
        for j in 0..i {
            if (entries[i * dim + j] - entries[j * dim + i]).abs() > 1e-12 {
                return Err(invalid(format!("matrix is not symmetric at ({}, {})", i + 1, j + 1)));
            }
        }
    }
    Ok(())
}

/// Symmetric positive definite matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    dim: usize,
    entries: Vec<f64>,
    chol: Cholesky,
}

impl CorrelationMatrix {
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        check_square(&entries, dim)?;
        for i in 0..dim {
            if entries[i * dim + i] != 1.0 {
                return Err(invalid(format!("diagonal entry {} is not 1", i + 1)));
            }
            for j in 0..i {
                let r = entries[i * dim + j];
                if !(r > -1.0 && r < 1.0) {
                    return Err(invalid(format!(
                        "correlation ({}, {}) = {r} is outside (-1, 1)",
                        j + 1,
                        i + 1
                    )));
                }
            }
        }
        let chol = Cholesky::factor(&entries, dim)?;
        Ok(Self { dim, entries, chol })
    }

    pub fn identity(dim: usize) -> Self {
        let mut entries = vec![0.0; dim * dim];
        for i in 0..dim {
            entries[i * dim + i] = 1.0;
        }
        Self::new(dim, entries).expect("identity is SPD")
    }

    /// `R_k`: unit diagonal, constant off-diagonal `rho`.
    pub fn equicorrelated(dim: usize, rho: f64) -> Result<Self> {
        let mut entries = vec![rho; dim * dim];
        for i in 0..dim {
            entries[i * dim + i] = 1.0;
        }
        Self::new(dim, entries)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Zero-based access.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn log_det(&self) -> f64 {
        self.chol.log_det
    }

    pub fn determinant(&self) -> f64 {
        self.chol.log_det.exp()
    }

    pub fn is_identity(&self) -> bool {
        (0..self.dim).all(|i| (0..i).all(|j| self.get(i, j) == 0.0))
    }

    /// Principal submatrix on zero-based `positions`.
    pub fn submatrix(&self, positions: &[usize]) -> Self {
        let entries = principal_submatrix(&self.entries, self.dim, positions);
        Self::new(positions.len(), entries).expect("principal submatrix of an SPD matrix is SPD")
    }

    /// Off-diagonal entries (1-based pairs) whose value is neither zero nor
    /// in `admissible`.
    pub fn values_outside(&self, admissible: &[f64]) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for i in 0..self.dim {
            for j in i + 1..self.dim {
                let v = self.get(i, j);
                if v != 0.0 && !admissible.iter().any(|a| (a - v).abs() <= 1e-12) {
                    out.push((i + 1, j + 1, v));
                }
            }
        }
        out
    }
}

fn principal_submatrix(entries: &[f64], dim: usize, positions: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(positions.len() * positions.len());
    for &i in positions {
        for &j in positions {
            out.push(entries[i * dim + j]);
        }
    }
    out
}

/// Multivariate normal law with cached factorization and normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLocal {
    mean: Vec<f64>,
    cov: Vec<f64>,
    chol: Cholesky,
    log_norm: f64,
}

impl GaussianLocal {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let dim = mean.len();
        check_square(&cov, dim)?;
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(invalid("mean has non-finite entries"));
        }
        let chol = Cholesky::factor(&cov, dim)?;
        let log_norm = -0.5 * (dim as f64 * LN_2PI + chol.log_det);
        Ok(Self {
            mean,
            cov,
            chol,
            log_norm,
        })
    }

    pub fn standard(dim: usize) -> Self {
        Self::from_correlation(vec![0.0; dim], &CorrelationMatrix::identity(dim))
    }

    pub fn from_correlation(mean: Vec<f64>, corr: &CorrelationMatrix) -> Self {
        assert_eq!(mean.len(), corr.dim());
        let log_norm = -0.5 * (corr.dim as f64 * LN_2PI + corr.chol.log_det);
        Self {
            mean,
            cov: corr.entries.clone(),
            chol: corr.chol.clone(),
            log_norm,
        }
    }

    pub fn univariate(mean: f64, variance: f64) -> Result<Self> {
        Self::new(vec![mean], vec![variance])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &[f64] {
        &self.cov
    }

    pub fn log_det(&self) -> f64 {
        self.chol.log_det
    }

    /// Marginal law of the zero-based coordinates `positions`.
    pub fn marginal(&self, positions: &[usize]) -> Self {
        let mean = positions.iter().map(|&i| self.mean[i]).collect();
        let cov = principal_submatrix(&self.cov, self.dim(), positions);
        Self::new(mean, cov).expect("marginal of an SPD law is SPD")
    }

    /// `KL(self ‖ other)`.
    pub fn kl_divergence(&self, other: &GaussianLocal) -> Result<f64> {
        let d = self.dim();
        if other.dim() != d {
            return Err(invalid("KL divergence between laws of different dimension"));
        }
        // tr(Σ_q⁻¹ Σ_p) column by column
        let mut trace = 0.0;
        let mut col = vec![0.0; d];
        for j in 0..d {
            for i in 0..d {
                col[i] = self.cov[i * d + j];
            }
            trace += other.chol.solve(&col)[j];
        }
        let diff: Vec<f64> = self.mean.iter().zip(&other.mean).map(|(a, b)| b - a).collect();
        let maha = other.chol.mahalanobis(&diff);
        Ok(0.5 * (trace + maha - d as f64 + other.chol.log_det - self.chol.log_det))
    }
}

impl LocalDistribution for GaussianLocal {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    #[inline]
    fn log_density(&self, x: &[f64]) -> f64 {
        let centered: Buf = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        self.log_norm - 0.5 * self.chol.mahalanobis(&centered)
    }

    fn sample_into(&self, rng: &mut RandomStream, out: &mut [f64]) {
        let n = self.dim();
        let z: Buf = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for i in 0..n {
            let row = &self.chol.lower[i * n..i * n + i + 1];
            out[i] = self.mean[i] + row.iter().zip(&z).map(|(l, zj)| l * zj).sum::<f64>();
        }
    }

    fn as_gaussian(&self) -> Option<&GaussianLocal> {
        Some(self)
    }
}

/// `det(R_k) = (1−ρ)^{k−1} (1 + (k−1)ρ)`.
pub fn equicorrelation_det(k: usize, rho: f64) -> Result<f64> {
    if k == 0 {
        return Err(invalid("equicorrelation order must be at least 1"));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(invalid(format!("rho = {rho} must satisfy rho ∈ (0,1)")));
    }
    Ok((1.0 - rho).powi(k as i32 - 1) * (1.0 + (k as f64 - 1.0) * rho))
}

/// `I = −½ log det Σ` for a correlation-only change from `N(0, I)`.
/// `post_cov` is a row-major `dim × dim` matrix.
pub fn gaussian_info_number(post_cov: &[f64], dim: usize) -> Result<f64> {
    let corr = CorrelationMatrix::new(dim, post_cov.to_vec()).map_err(|e| match e {
        Error::ModelInfeasible { minor, pivot } => invalid(format!(
            "covariance is not positive definite (leading minor {minor}, pivot {pivot:.3e})"
        )),
        other => other,
    })?;
    Ok(-0.5 * corr.log_det())
}

/// `I = μ²/2` for a unit-variance mean shift.
pub fn mean_change_info_number(mu: f64) -> f64 {
    0.5 * mu * mu
}

/// `log N(x; post) − log N(x; pre)`.
pub fn gaussian_llr(pre: &GaussianLocal, post: &GaussianLocal, x: &[f64]) -> Result<f64> {
    if pre.dim() != post.dim() || x.len() != pre.dim() {
        return Err(invalid(format!(
            "dimension mismatch: pre {}, post {}, observation {}",
            pre.dim(),
            post.dim(),
            x.len()
        )));
    }
    Ok(post.log_density(x) - pre.log_density(x))
}

/// `K × K` correlation matrix with the listed 1-based pairs set to their
/// values and zeros elsewhere.
pub fn build_correlation_matrix(
    num_sources: usize,
    pairs: &BTreeMap<(usize, usize), f64>,
) -> Result<CorrelationMatrix> {
    let mut entries = vec![0.0; num_sources * num_sources];
    for i in 0..num_sources {
        entries[i * num_sources + i] = 1.0;
    }
    for (&(a, b), &rho) in pairs {
        if a == b || a == 0 || b == 0 || a > num_sources || b > num_sources {
            return Err(invalid(format!("invalid source pair ({a}, {b}) for K = {num_sources}")));
        }
        if !(rho > -1.0 && rho < 1.0) {
            return Err(invalid(format!("correlation {rho} for pair ({a}, {b}) is outside (-1, 1)")));
        }
        entries[(a - 1) * num_sources + (b - 1)] = rho;
        entries[(b - 1) * num_sources + (a - 1)] = rho;
    }
    CorrelationMatrix::new(num_sources, entries)
}

/// One independent draw from `dist`.
pub fn sample_local(dist: &GaussianLocal, rng: &mut RandomStream) -> Vec<f64> {
    let mut out = vec![0.0; dist.dim()];
    dist.sample_into(rng, &mut out);
    out
}

/// Every positive definite, non-identity correlation matrix of order `dim`
/// whose off-diagonal entries lie in `{0} ∪ values`.
pub fn correlation_patterns(dim: usize, values: &[f64]) -> Vec<CorrelationMatrix> {
    let pairs: Vec<(usize, usize)> = (0..dim)
        .flat_map(|i| (i + 1..dim).map(move |j| (i, j)))
        .collect();
    let base = values.len() + 1;
    let total = (base as u64).checked_pow(pairs.len() as u32).unwrap_or(u64::MAX);
    assert!(total <= 1 << 22, "too many correlation patterns to enumerate");
    let mut out = Vec::new();
    for code in 1..total {
        let mut entries = vec![0.0; dim * dim];
        for i in 0..dim {
            entries[i * dim + i] = 1.0;
        }
        let mut c = code;
        for &(i, j) in &pairs {
            let digit = (c % base as u64) as usize;
            c /= base as u64;
            if digit > 0 {
                entries[i * dim + j] = values[digit - 1];
                entries[j * dim + i] = values[digit - 1];
            }
        }
        if let Ok(m) = CorrelationMatrix::new(dim, entries) {
            out.push(m);
        }
    }
    out
}
