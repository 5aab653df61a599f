use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{check_noise, gaussian_entropy, LowRankCov};
use crate::retina::RetinalTransform;

/// A Gaussian linear model `v = mean + loadings · z + e`, `z ~ N(0, I)`,
/// `e ~ N(0, diag(noise))`.
///
/// Implemented by x-space factor analysers, their per-offset projections and
/// stacked multi-glimpse models, so inference code is shared between them.
pub trait LinearGaussian {
    fn mean(&self) -> &DVector<f64>;
    fn loadings(&self) -> &DMatrix<f64>;
    fn noise(&self) -> &DVector<f64>;

    /// Offset this model observes, if it is tied to a single placement.
    fn offset_id(&self) -> Option<usize> {
        None
    }

    fn obs_dim(&self) -> usize {
        self.mean().len()
    }

    fn latent_dim(&self) -> usize {
        self.loadings().ncols()
    }

    fn covariance(&self) -> Result<LowRankCov> {
        let cov = LowRankCov::new(self.loadings(), self.noise());
        match self.offset_id() {
            Some(id) => cov.map_err(Error::at_offset(id)),
            None => cov,
        }
    }
}

/// Factor analyser over image pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FaModel {
    pub mean: DVector<f64>,
    pub loadings: DMatrix<f64>,
    pub noise: DVector<f64>,
}

impl FaModel {
    pub fn new(mean: DVector<f64>, loadings: DMatrix<f64>, noise: DVector<f64>) -> Result<Self> {
        let m = Self { mean, loadings, noise };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        check_dim("fa loadings rows", self.mean.len(), self.loadings.nrows())?;
        check_dim("fa noise", self.mean.len(), self.noise.len())?;
        if self.loadings.ncols() > self.mean.len() {
            return Err(Error::InvalidArgument(format!(
                "latent dimension {} exceeds data dimension {}",
                self.loadings.ncols(),
                self.mean.len()
            )));
        }
        check_noise(&self.noise)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn latent(&self) -> usize {
        self.loadings.ncols()
    }

    /// Prior marginal variance per pixel, `diag(W Wᵀ) + ψ`.
    pub fn marginal_variance(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.loadings
                .row_iter()
                .zip(self.noise.iter())
                .map(|(row, psi)| row.norm_squared() + psi),
        )
    }
}

impl LinearGaussian for FaModel {
    fn mean(&self) -> &DVector<f64> {
        &self.mean
    }
    fn loadings(&self) -> &DMatrix<f64> {
        &self.loadings
    }
    fn noise(&self) -> &DVector<f64> {
        &self.noise
    }
}

/// Factor analyser seen through one retinal placement: `V μ`, `V W` and a
/// free per-offset noise vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedFa {
    pub offset_id: usize,
    pub mean: DVector<f64>,
    pub loadings: DMatrix<f64>,
    pub noise: DVector<f64>,
}

impl ProjectedFa {
    pub fn active_dims(&self) -> usize {
        self.mean.len()
    }

    /// `Wᵀ Ψ⁻¹ W`, the precision contributed by one glimpse.
    pub fn information(&self) -> DMatrix<f64> {
        let mut scaled = self.loadings.clone();
        for (mut row, psi) in scaled.row_iter_mut().zip(self.noise.iter()) {
            row /= *psi;
        }
        self.loadings.tr_mul(&scaled)
    }

    /// `Wᵀ Ψ⁻¹ (y − μ)`.
    pub fn information_vector(&self, y: &DVector<f64>) -> DVector<f64> {
        let r = (y - &self.mean).component_div(&self.noise);
        self.loadings.tr_mul(&r)
    }
}

impl LinearGaussian for ProjectedFa {
    fn mean(&self) -> &DVector<f64> {
        &self.mean
    }
    fn loadings(&self) -> &DMatrix<f64> {
        &self.loadings
    }
    fn noise(&self) -> &DVector<f64> {
        &self.noise
    }
    fn offset_id(&self) -> Option<usize> {
        Some(self.offset_id)
    }
}

/// Project an x-space factor analyser through a placement. The observation
/// noise is not derived from the x-space noise; it is supplied per offset.
pub fn project(fa: &FaModel, rt: &RetinalTransform, offset_id: usize, noise_y: DVector<f64>) -> Result<ProjectedFa> {
    check_dim("projected noise", rt.active_count(), noise_y.len())?;
    check_noise(&noise_y).map_err(Error::at_offset(offset_id))?;
    Ok(ProjectedFa {
        offset_id,
        mean: rt.apply(fa.mean.as_slice())?,
        loadings: rt.apply_matrix(&fa.loadings)?,
        noise: noise_y,
    })
}

/// Initial y-space noise `diag(V Ψˣ Vᵀ)`: for an `s × s` cell this is the
/// mean of its pixels' noise divided by `s²`.
pub fn psi_y_init(rt: &RetinalTransform, psi_x: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("psi_y_init", rt.pixel_count(), psi_x.len())?;
    check_noise(psi_x)?;
    Ok(DVector::from_iterator(
        rt.active_count(),
        (0..rt.active_count()).map(|r| {
            let w = rt.row_weight(r);
            w * w * rt.row_pixels(r).iter().map(|&p| psi_x[p]).sum::<f64>()
        }),
    ))
}

/// Gaussian posterior over the latent factors.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Posterior {
    pub fn prior(k: usize) -> Self {
        Self {
            mean: DVector::zeros(k),
            cov: DMatrix::identity(k, k),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Differential entropy in nats.
    pub fn entropy(&self) -> Result<f64> {
        let logdet = crate::numerics::chol_logdet(&self.cov)?;
        Ok(gaussian_entropy(self.dim(), logdet))
    }
}

/// `z | y`: precision `I + Wᵀ Ψ⁻¹ W`, mean `Σ Wᵀ Ψ⁻¹ (y − μ)`.
pub fn posterior<M: LinearGaussian + ?Sized>(model: &M, y: &DVector<f64>) -> Result<Posterior> {
    check_dim("posterior observation", model.obs_dim(), y.len())?;
    let cov = model.covariance()?;
    let centered = y - model.mean();
    let mut mean = cov.scaled_loadings().tr_mul(&centered);
    cov.inner().solve_in_place(&mut mean);
    Ok(Posterior {
        mean,
        cov: cov.inner().inverse(),
    })
}

/// Posterior mean reconstruction of the image with per-pixel predictive
/// variance `diag(W Σ Wᵀ) + ψ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub image: DVector<f64>,
    pub variance: DVector<f64>,
}

pub fn reconstruct(fa: &FaModel, post: &Posterior) -> Result<Reconstruction> {
    check_dim("reconstruct latent", fa.latent(), post.dim())?;
    let image = &fa.mean + &fa.loadings * &post.mean;
    let ws = &fa.loadings * &post.cov;
    let variance = DVector::from_iterator(
        fa.dim(),
        ws.row_iter()
            .zip(fa.loadings.row_iter())
            .zip(fa.noise.iter())
            .map(|((a, b), psi)| a.dot(&b) + psi),
    );
    Ok(Reconstruction { image, variance })
}

/// `log N(y; μ, W Wᵀ + Ψ)` via the low-rank factorization.
pub fn marginal_loglik<M: LinearGaussian + ?Sized>(model: &M, y: &DVector<f64>) -> Result<f64> {
    check_dim("marginal_loglik observation", model.obs_dim(), y.len())?;
    let cov = model.covariance()?;
    Ok(cov.log_density(&(y - model.mean())))
}
