//! Maximum-likelihood learning of loadings and per-offset noise from glimpse
//! data, for a single factor analyser or a mixture.

mod init;
mod objective;
pub mod optim;
mod sample;

pub use init::{init_from_glimpses, InitConfig, InitOutcome};
pub use objective::{
    evaluate, grad_mixture, grad_psi, grad_w, independent_gaussian_loglik, loglik, optimize, GlimpseObjective,
    Gradient, LearnOutcome, LearnProblem, Trainable,
};
pub use optim::{maximize, Objective, OptimResult, OptimizerConfig, Status, TraceRow};
pub use sample::{sample_glimpse_dataset, SamplingProtocol};

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::models::mixture::MofaModel;
use crate::models::projected::ProjectedMixture;
use crate::retina::{build_layout, place_all, Offset, RetinaSpec, RetinalTransform};

/// One glimpse: the offset it was taken at, the source image index and the
/// active-cell values.
#[derive(Debug, Clone, PartialEq)]
pub struct GlimpseRecord {
    pub offset_id: usize,
    pub source: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlimpseDataset {
    pub retina: RetinaSpec,
    pub rows: usize,
    pub cols: usize,
    pub offsets: Vec<Offset>,
    pub records: Vec<GlimpseRecord>,
}

impl GlimpseDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn transforms(&self) -> Result<Vec<RetinalTransform>> {
        let layout = build_layout(&self.retina)?;
        Ok(place_all(&layout, self.rows, self.cols, &self.offsets))
    }

    pub fn validate(&self) -> Result<()> {
        let rts = self.transforms()?;
        for (i, r) in self.records.iter().enumerate() {
            let rt = rts.get(r.offset_id).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "record {i} refers to offset id {} of {}",
                    r.offset_id,
                    rts.len()
                ))
            })?;
            check_dim("glimpse record length", rt.active_count(), r.values.len())?;
        }
        Ok(())
    }

    pub fn counts_per_offset(&self) -> Vec<usize> {
        let mut counts = vec![0; self.offsets.len()];
        for r in &self.records {
            counts[r.offset_id] += 1;
        }
        counts
    }
}

/// Parameters of one component during learning. The mean is held fixed; the
/// y-space noise is `exp(log_noise[a])` at offset `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentState {
    pub mean: DVector<f64>,
    pub loadings: DMatrix<f64>,
    pub log_noise: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnState {
    pub components: Vec<ComponentState>,
    /// Mixing proportions are `softmax(logits)`.
    pub logits: Vec<f64>,
}

impl LearnState {
    pub fn single(component: ComponentState) -> Self {
        Self {
            components: vec![component],
            logits: vec![0.0],
        }
    }

    pub fn from_projected(pm: &ProjectedMixture) -> Self {
        let components = pm
            .mixture
            .components
            .iter()
            .enumerate()
            .map(|(m, c)| ComponentState {
                mean: c.mean.clone(),
                loadings: c.loadings.clone(),
                log_noise: (0..pm.offsets()).map(|a| pm.get(m, a).noise.map(f64::ln)).collect(),
            })
            .collect();
        Self {
            components,
            logits: pm.weights().iter().map(|w| w.max(1e-300).ln()).collect(),
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        let top = self.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.logits.iter().map(|l| (l - top).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn noise(&self, component: usize, offset: usize) -> DVector<f64> {
        self.components[component].log_noise[offset].map(f64::exp)
    }

    pub fn noise_table(&self) -> Vec<Vec<DVector<f64>>> {
        (0..self.components.len())
            .map(|m| {
                (0..self.components[m].log_noise.len())
                    .map(|a| self.noise(m, a))
                    .collect()
            })
            .collect()
    }

    /// Mixture with learned loadings and weights; the x-space noise is
    /// carried over from `base`.
    pub fn to_mixture(&self, base: &MofaModel) -> Result<MofaModel> {
        check_dim("state components", base.len(), self.components.len())?;
        let comps = base
            .components
            .iter()
            .zip(&self.components)
            .map(|(b, s)| crate::models::fa::FaModel::new(s.mean.clone(), s.loadings.clone(), b.noise.clone()))
            .collect::<Result<Vec<_>>>()?;
        let mut weights = self.weights();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        MofaModel::new(comps, weights)
    }

    pub fn to_projected(&self, base: &MofaModel, transforms: Vec<RetinalTransform>) -> Result<ProjectedMixture> {
        ProjectedMixture::new(self.to_mixture(base)?, transforms, self.noise_table())
    }
}
