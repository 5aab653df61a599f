use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};
use crate::models::fa::{project, psi_y_init, ProjectedFa};
use crate::models::mixture::MofaModel;
use crate::retina::RetinalTransform;

/// A mixture together with every component projected through every
/// placement of the offset table.
#[derive(Debug, Clone)]
pub struct ProjectedMixture {
    pub mixture: MofaModel,
    pub transforms: Vec<RetinalTransform>,
    /// `projected[m][a]`.
    projected: Vec<Vec<ProjectedFa>>,
}

impl ProjectedMixture {
    /// `noise[m][a]` is the y-space noise of component `m` at offset `a`.
    pub fn new(mixture: MofaModel, transforms: Vec<RetinalTransform>, noise: Vec<Vec<DVector<f64>>>) -> Result<Self> {
        mixture.validate()?;
        check_dim("noise table components", mixture.len(), noise.len())?;
        let mut projected = Vec::with_capacity(mixture.len());
        for (c, table) in mixture.components.iter().zip(noise) {
            check_dim("noise table offsets", transforms.len(), table.len())?;
            let row = transforms
                .iter()
                .zip(table)
                .enumerate()
                .map(|(a, (rt, psi))| {
                    check_dim("transform image size", c.dim(), rt.pixel_count())?;
                    project(c, rt, a, psi)
                })
                .collect::<Result<Vec<_>>>()?;
            projected.push(row);
        }
        Ok(Self {
            mixture,
            transforms,
            projected,
        })
    }

    /// Projection with `diag(V Ψˣ Vᵀ)` as the y-space noise.
    pub fn with_initial_noise(mixture: MofaModel, transforms: Vec<RetinalTransform>) -> Result<Self> {
        let noise = initial_noise(&mixture, &transforms)?;
        Self::new(mixture, transforms, noise)
    }

    pub fn offsets(&self) -> usize {
        self.transforms.len()
    }

    pub fn components(&self) -> usize {
        self.mixture.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.mixture.weights
    }

    pub fn get(&self, component: usize, offset: usize) -> &ProjectedFa {
        &self.projected[component][offset]
    }

    /// Every component at one offset.
    pub fn at_offset(&self, offset: usize) -> Result<Vec<&ProjectedFa>> {
        if offset >= self.offsets() {
            return Err(Error::InvalidArgument(format!(
                "offset id {offset} out of range for {} offsets",
                self.offsets()
            )));
        }
        Ok(self.projected.iter().map(|row| &row[offset]).collect())
    }

    pub fn noise_table(&self) -> Vec<Vec<DVector<f64>>> {
        self.projected
            .iter()
            .map(|row| row.iter().map(|p| p.noise.clone()).collect())
            .collect()
    }
}

pub fn initial_noise(mixture: &MofaModel, transforms: &[RetinalTransform]) -> Result<Vec<Vec<DVector<f64>>>> {
    mixture
        .components
        .iter()
        .map(|c| transforms.iter().map(|rt| psi_y_init(rt, &c.noise)).collect())
        .collect()
}
