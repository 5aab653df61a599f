//! Gaussian primitives: Cholesky factors, low-rank-plus-diagonal covariances,
//! entropies and densities.
//!
//! Everything here works in nats.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    lower: DMatrix<f64>,
}

impl SpdFactor {
    /// Factor `s = L Lᵀ`. Only the lower triangle of `s` is read.
    pub fn new(s: &DMatrix<f64>) -> Result<Self> {
        if !s.is_square() {
            return Err(Error::DimensionMismatch {
                context: "cholesky (square)",
                expected: s.nrows(),
                found: s.ncols(),
            });
        }
        let n = s.nrows();
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut d = s[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: j, value: d });
            }
            let ljj = d.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut v = s[(i, j)];
                for k in 0..j {
                    v -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = v / ljj;
            }
        }
        Ok(Self { lower: l })
    }

    /// Like [`SpdFactor::new`], but on failure retries once with
    /// `1e-10 * trace / n` added to the diagonal.
    pub fn new_jittered(s: &DMatrix<f64>) -> Result<Self> {
        match Self::new(s) {
            Ok(f) => Ok(f),
            Err(Error::NotPositiveDefinite { pivot, value }) => {
                let n = s.nrows().max(1);
                let jitter = 1e-10 * (s.trace().abs() / n as f64).max(f64::MIN_POSITIVE);
                log::warn!("cholesky failed at pivot {pivot} ({value:e}); retrying with jitter {jitter:e}");
                let mut shifted = s.clone();
                for i in 0..s.nrows() {
                    shifted[(i, i)] += jitter;
                }
                Self::new(&shifted)
            }
            Err(e) => Err(e),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.lower.solve_lower_triangular_mut(&mut x);
        self.lower.tr_solve_lower_triangular_mut(&mut x);
        x
    }

    pub fn solve_in_place(&self, x: &mut DVector<f64>) {
        self.lower.solve_lower_triangular_mut(x);
        self.lower.tr_solve_lower_triangular_mut(x);
    }

    /// `L⁻¹ b`, the half solve.
    pub fn half_solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.lower.solve_lower_triangular_mut(&mut x);
        x
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self.solve_matrix(&DMatrix::identity(self.dim(), self.dim()));
        symmetrize(inv)
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.lower * self.lower.transpose()
    }
}

pub(crate) fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

/// `log|S|` through a Cholesky factorization.
pub fn chol_logdet(s: &DMatrix<f64>) -> Result<f64> {
    Ok(SpdFactor::new(s)?.logdet())
}

pub(crate) fn check_noise(psi: &DVector<f64>) -> Result<()> {
    match psi.iter().position(|&p| !(p > 0.0) || !p.is_finite()) {
        Some(index) => Err(Error::DegenerateNoise {
            index,
            value: psi[index],
        }),
        None => Ok(()),
    }
}

/// Covariance `W Wᵀ + diag(ψ)` held in factored form.
///
/// All operations cost `O(D K²)` or less; the `D × D` matrix is never formed.
#[derive(Debug, Clone)]
pub struct LowRankCov {
    inv_noise: DVector<f64>,
    /// `Ψ⁻¹ W`
    scaled: DMatrix<f64>,
    /// Factor of `I + Wᵀ Ψ⁻¹ W`.
    inner: SpdFactor,
    logdet: f64,
}

impl LowRankCov {
    pub fn new(loadings: &DMatrix<f64>, noise: &DVector<f64>) -> Result<Self> {
        check_dim("low-rank covariance rows", loadings.nrows(), noise.len())?;
        check_noise(noise)?;
        let inv_noise = noise.map(|p| 1.0 / p);
        let mut scaled = loadings.clone();
        for (mut row, &ip) in scaled.row_iter_mut().zip(inv_noise.iter()) {
            row *= ip;
        }
        let k = loadings.ncols();
        let mut a = loadings.tr_mul(&scaled);
        for i in 0..k {
            a[(i, i)] += 1.0;
        }
        let inner = SpdFactor::new_jittered(&a)?;
        let logdet = noise.iter().map(|p| p.ln()).sum::<f64>() + inner.logdet();
        Ok(Self {
            inv_noise,
            scaled,
            inner,
            logdet,
        })
    }

    pub fn dim(&self) -> usize {
        self.inv_noise.len()
    }

    pub fn rank(&self) -> usize {
        self.scaled.ncols()
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// Factor of the latent precision `I + Wᵀ Ψ⁻¹ W`.
    pub fn inner(&self) -> &SpdFactor {
        &self.inner
    }

    /// `diag(Ψ⁻¹)`.
    pub fn inverse_noise(&self) -> &DVector<f64> {
        &self.inv_noise
    }

    /// `Ψ⁻¹ W`.
    pub fn scaled_loadings(&self) -> &DMatrix<f64> {
        &self.scaled
    }

    /// `(W Wᵀ + Ψ)⁻¹ v` by the Woodbury identity.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.component_mul(&self.inv_noise);
        let mut t = self.scaled.tr_mul(v);
        self.inner.solve_in_place(&mut t);
        out.gemv(-1.0, &self.scaled, &t, 1.0);
        out
    }

    /// `(W Wᵀ + Ψ)⁻¹ W`, which simplifies to `Ψ⁻¹ W (I + Wᵀ Ψ⁻¹ W)⁻¹`.
    pub fn solve_loadings(&self) -> DMatrix<f64> {
        // (A⁻¹ Sᵀ)ᵀ with S = Ψ⁻¹W and A symmetric
        self.inner.solve_matrix(&self.scaled.transpose()).transpose()
    }

    /// Diagonal of `(W Wᵀ + Ψ)⁻¹`.
    pub fn inverse_diagonal(&self) -> DVector<f64> {
        let b = self.inner.half_solve_matrix(&self.scaled.transpose());
        DVector::from_iterator(
            self.dim(),
            b.column_iter()
                .zip(self.inv_noise.iter())
                .map(|(col, ip)| ip - col.norm_squared()),
        )
    }

    /// Gaussian log density of a centered vector.
    pub fn log_density(&self, centered: &DVector<f64>) -> f64 {
        let s = self.solve(centered);
        -0.5 * (centered.dot(&s) + self.logdet + self.dim() as f64 * LN_2PI)
    }
}

/// `log|W Wᵀ + diag(ψ)| = log|Ψ| + log|I + Wᵀ Ψ⁻¹ W|`.
pub fn lowrank_logdet(w: &DMatrix<f64>, psi: &DVector<f64>) -> Result<f64> {
    Ok(LowRankCov::new(w, psi)?.logdet())
}

/// Differential entropy (nats) of a `dim`-variate Gaussian with the given
/// covariance log-determinant.
pub fn gaussian_entropy(dim: usize, logdet_cov: f64) -> f64 {
    0.5 * dim as f64 * (LN_2PI + 1.0) + 0.5 * logdet_cov
}

/// Gaussian log density given the covariance log-determinant and a solver
/// for `C⁻¹ v`.
pub fn gaussian_logpdf<F>(y: &DVector<f64>, mean: &DVector<f64>, cov_logdet: f64, cov_solve: F) -> Result<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    check_dim("gaussian_logpdf", mean.len(), y.len())?;
    let centered = y - mean;
    let s = cov_solve(&centered);
    check_dim("gaussian_logpdf solve", centered.len(), s.len())?;
    Ok(-0.5 * (centered.dot(&s) + cov_logdet + y.len() as f64 * LN_2PI))
}

/// Overflow-safe `log Σ exp(v)`. Returns `-∞` for an empty or all `-∞` input.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropy in nats of a discrete distribution, with `0 log 0 = 0`.
pub fn discrete_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}
