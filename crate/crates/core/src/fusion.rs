//! Combining several glimpses of one image into a single latent posterior.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::models::fa::{LinearGaussian, Posterior, ProjectedFa};
use crate::models::mixture::{normalize_log_weights, MixturePosterior};
use crate::models::projected::ProjectedMixture;
use crate::numerics::{check_noise, SpdFactor, LN_2PI};
use crate::retina::RetinalTransform;

/// One observed glimpse with the model it is explained by.
#[derive(Debug, Clone)]
pub struct Glimpse<'a> {
    pub model: &'a ProjectedFa,
    pub transform: &'a RetinalTransform,
    pub values: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct GlimpseSequence<'a> {
    glimpses: Vec<Glimpse<'a>>,
}

impl<'a> GlimpseSequence<'a> {
    pub fn new(glimpses: Vec<Glimpse<'a>>) -> Result<Self> {
        let first = glimpses
            .first()
            .ok_or_else(|| Error::InvalidArgument("a glimpse sequence needs at least one glimpse".into()))?;
        let k = first.model.latent_dim();
        let dims = first.transform.image_dims();
        let cells = first.transform.active_mask().len();
        for g in &glimpses {
            check_dim("glimpse latent dimension", k, g.model.latent_dim())?;
            check_dim("glimpse model rows", g.transform.active_count(), g.model.obs_dim())?;
            check_dim("glimpse length", g.model.obs_dim(), g.values.len())?;
            if g.transform.image_dims() != dims || g.transform.active_mask().len() != cells {
                return Err(Error::InvalidArgument(
                    "glimpses in one sequence must share a retina layout and image size".into(),
                ));
            }
        }
        Ok(Self { glimpses })
    }

    pub fn len(&self) -> usize {
        self.glimpses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glimpses.is_empty()
    }

    pub fn glimpses(&self) -> &[Glimpse<'a>] {
        &self.glimpses
    }

    pub fn latent_dim(&self) -> usize {
        self.glimpses[0].model.latent_dim()
    }
}

/// Factor analyser for the concatenation of several glimpses.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedModel {
    pub mean: DVector<f64>,
    pub loadings: DMatrix<f64>,
    pub noise: DVector<f64>,
}

impl LinearGaussian for StackedModel {
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

pub fn stack(seq: &GlimpseSequence) -> (StackedModel, DVector<f64>) {
    let total: usize = seq.glimpses.iter().map(|g| g.values.len()).sum();
    let k = seq.latent_dim();
    let mut mean = DVector::zeros(total);
    let mut loadings = DMatrix::zeros(total, k);
    let mut noise = DVector::zeros(total);
    let mut y = DVector::zeros(total);
    let mut at = 0;
    for g in &seq.glimpses {
        let n = g.values.len();
        mean.rows_mut(at, n).copy_from(&g.model.mean);
        loadings.rows_mut(at, n).copy_from(&g.model.loadings);
        noise.rows_mut(at, n).copy_from(&g.model.noise);
        y.rows_mut(at, n).copy_from(&g.values);
        at += n;
    }
    (StackedModel { mean, loadings, noise }, y)
}

/// Information-form accumulation of glimpse evidence.
struct Evidence {
    precision: DMatrix<f64>,
    shift: DVector<f64>,
    // Σ log ψ and Σ r²/ψ over every glimpse entry
    log_noise: f64,
    weighted_sq: f64,
    dims: usize,
}

impl Evidence {
    fn new(k: usize) -> Self {
        Self {
            precision: DMatrix::identity(k, k),
            shift: DVector::zeros(k),
            log_noise: 0.0,
            weighted_sq: 0.0,
            dims: 0,
        }
    }

    fn add(&mut self, model: &ProjectedFa, y: &DVector<f64>) -> Result<()> {
        check_noise(&model.noise).map_err(Error::at_offset(model.offset_id))?;
        let r = y - &model.mean;
        self.precision += model.information();
        self.shift += model.information_vector(y);
        self.log_noise += model.noise.iter().map(|p| p.ln()).sum::<f64>();
        self.weighted_sq += r.iter().zip(model.noise.iter()).map(|(a, p)| a * a / p).sum::<f64>();
        self.dims += y.len();
        Ok(())
    }

    /// Posterior and the marginal log density of all the evidence.
    fn finish(self, offset: Option<usize>) -> Result<(Posterior, f64)> {
        let factor = SpdFactor::new(&self.precision).map_err(|e| match offset {
            Some(a) => Error::at_offset(a)(e),
            None => e,
        })?;
        let mean = factor.solve(&self.shift);
        let quad = self.weighted_sq - self.shift.dot(&mean);
        let ll = -0.5 * (self.dims as f64 * LN_2PI + self.log_noise + factor.logdet() + quad);
        Ok((
            Posterior {
                mean,
                cov: factor.inverse(),
            },
            ll,
        ))
    }
}

/// Posterior given every glimpse, by summing the per-glimpse precisions.
pub fn fused_posterior(seq: &GlimpseSequence) -> Result<Posterior> {
    let mut ev = Evidence::new(seq.latent_dim());
    for g in &seq.glimpses {
        ev.add(g.model, &g.values)?;
    }
    Ok(ev.finish(None)?.0)
}

/// Filtered posteriors under `z_j = α z_{j−1} + √(1−α²) e_j`.
pub fn lds_filter(seq: &GlimpseSequence, alpha: f64) -> Result<Vec<Posterior>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let k = seq.latent_dim();
    let mut mean = DVector::zeros(k);
    let mut cov = DMatrix::identity(k, k);
    let mut out = Vec::with_capacity(seq.len());
    for (j, g) in seq.glimpses.iter().enumerate() {
        if j > 0 {
            mean *= alpha;
            cov *= alpha * alpha;
            for i in 0..k {
                cov[(i, i)] += 1.0 - alpha * alpha;
            }
        }
        check_noise(&g.model.noise).map_err(Error::at_offset(g.model.offset_id))?;
        let prior = SpdFactor::new_jittered(&cov)?;
        let precision = crate::numerics::symmetrize(prior.inverse() + g.model.information());
        let shift = prior.solve(&mean) + g.model.information_vector(&g.values);
        let post = SpdFactor::new(&precision).map_err(Error::at_offset(g.model.offset_id))?;
        mean = post.solve(&shift);
        cov = post.inverse();
        out.push(Posterior {
            mean: mean.clone(),
            cov: cov.clone(),
        });
    }
    Ok(out)
}

/// Mixture posterior given glimpses `(offset id, values)` of one image.
/// Responsibilities use the whole stacked evidence; each component then
/// fuses its own projections.
pub fn fused_mixture(pm: &ProjectedMixture, glimpses: &[(usize, DVector<f64>)]) -> Result<MixturePosterior> {
    let k = pm.mixture.latent();
    let mut log_terms = Vec::with_capacity(pm.components());
    let mut posts = Vec::with_capacity(pm.components());
    let mut first_err = None;
    for m in 0..pm.components() {
        let mut ev = Evidence::new(k);
        let mut failed = None;
        for (a, y) in glimpses {
            if *a >= pm.offsets() {
                return Err(Error::InvalidArgument(format!("offset id {a} out of range")));
            }
            let model = pm.get(m, *a);
            check_dim("glimpse length", model.obs_dim(), y.len())?;
            if let Err(e) = ev.add(model, y) {
                failed = Some(e);
                break;
            }
        }
        let result = match failed {
            Some(e) => Err(e),
            None => ev.finish(glimpses.first().map(|g| g.0)),
        };
        match result {
            Ok((post, ll)) => {
                log_terms.push(pm.weights()[m].ln() + ll);
                posts.push(post);
            }
            Err(e) => {
                log::warn!("mixture component {m} dropped: {e}");
                log_terms.push(f64::NEG_INFINITY);
                posts.push(Posterior::prior(k));
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        if log_terms.iter().all(|l| *l == f64::NEG_INFINITY) {
            return Err(e);
        }
    }
    Ok(MixturePosterior {
        responsibilities: normalize_log_weights(&log_terms)?,
        components: posts,
    })
}

/// Log density of the glimpses under each component of the mixture; used
/// by tests and diagnostics.
pub fn fused_log_evidence(pm: &ProjectedMixture, component: usize, glimpses: &[(usize, DVector<f64>)]) -> Result<f64> {
    let mut ev = Evidence::new(pm.mixture.latent());
    for (a, y) in glimpses {
        ev.add(pm.get(component, *a), y)?;
    }
    Ok(ev.finish(None)?.1)
}
