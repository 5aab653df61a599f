use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};
use crate::models::fa::{marginal_loglik, posterior, reconstruct, FaModel, LinearGaussian, Posterior, Reconstruction};
use crate::numerics::logsumexp;

/// Mixture of factor analysers in x-space.
#[derive(Debug, Clone, PartialEq)]
pub struct MofaModel {
    pub components: Vec<FaModel>,
    pub weights: Vec<f64>,
}

impl MofaModel {
    pub fn new(components: Vec<FaModel>, weights: Vec<f64>) -> Result<Self> {
        let m = Self { components, weights };
        m.validate()?;
        Ok(m)
    }

    pub fn single(fa: FaModel) -> Self {
        Self {
            components: vec![fa],
            weights: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::InvalidArgument("mixture needs at least one component".into()));
        }
        check_dim("mixture weights", self.components.len(), self.weights.len())?;
        let d = self.components[0].dim();
        let k = self.components[0].latent();
        for c in &self.components {
            c.validate()?;
            check_dim("mixture component dimension", d, c.dim())?;
            check_dim("mixture component latent dimension", k, c.latent())?;
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidArgument("mixing proportions must be non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "mixing proportions sum to {total}, not 1"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn latent(&self) -> usize {
        self.components[0].latent()
    }

    /// Mixing-weighted prior mean image.
    pub fn prior_mean(&self) -> DVector<f64> {
        self.components
            .iter()
            .zip(&self.weights)
            .fold(DVector::zeros(self.dim()), |acc, (c, &w)| acc + &c.mean * w)
    }
}

/// Responsibilities `p(c = m | y)` with the per-component latent posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePosterior {
    pub responsibilities: Vec<f64>,
    pub components: Vec<Posterior>,
}

impl MixturePosterior {
    pub fn prior(weights: &[f64], k: usize) -> Self {
        Self {
            responsibilities: weights.to_vec(),
            components: vec![Posterior::prior(k); weights.len()],
        }
    }
}

/// Normalize `log π_m + log p_m(y)` into responsibilities.
pub(crate) fn normalize_log_weights(log_terms: &[f64]) -> Result<Vec<f64>> {
    let total = logsumexp(log_terms);
    if !total.is_finite() {
        return Err(Error::InvalidArgument(
            "every mixture component assigns zero density to the observation".into(),
        ));
    }
    Ok(log_terms.iter().map(|l| (l - total).exp()).collect())
}

/// Mixture posterior given one observation model per component.
pub fn responsibilities<M: LinearGaussian>(
    models: &[M],
    weights: &[f64],
    y: &DVector<f64>,
) -> Result<MixturePosterior> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("mixture needs at least one component".into()));
    }
    check_dim("responsibility weights", models.len(), weights.len())?;
    let mut log_terms = Vec::with_capacity(models.len());
    let mut first_err = None;
    for (m, &w) in models.iter().zip(weights) {
        match marginal_loglik(m, y) {
            Ok(ll) => log_terms.push(w.ln() + ll),
            Err(e) => {
                log::warn!("mixture component dropped: {e}");
                log_terms.push(f64::NEG_INFINITY);
                first_err.get_or_insert(e);
            }
        }
    }
    if log_terms.iter().all(|l| *l == f64::NEG_INFINITY) {
        if let Some(e) = first_err {
            return Err(e);
        }
    }
    let responsibilities = normalize_log_weights(&log_terms)?;
    let components = models
        .iter()
        .map(|m| posterior(m, y).or_else(|_| Ok(Posterior::prior(m.latent_dim()))))
        .collect::<Result<Vec<_>>>()?;
    Ok(MixturePosterior {
        responsibilities,
        components,
    })
}

/// Responsibility-weighted average of the component reconstructions, with
/// the responsibility-weighted per-pixel variance.
pub fn mixture_reconstruct(mofa: &MofaModel, mp: &MixturePosterior) -> Result<Reconstruction> {
    check_dim("mixture posterior components", mofa.len(), mp.components.len())?;
    check_dim("mixture responsibilities", mofa.len(), mp.responsibilities.len())?;
    let d = mofa.dim();
    let mut image = DVector::zeros(d);
    let mut variance = DVector::zeros(d);
    for ((c, post), &r) in mofa.components.iter().zip(&mp.components).zip(&mp.responsibilities) {
        if r == 0.0 {
            continue;
        }
        let rec = reconstruct(c, post)?;
        image += rec.image * r;
        variance += rec.variance * r;
    }
    Ok(Reconstruction { image, variance })
}

/// Entropy in bits of the component posterior, with `0 log 0 = 0`.
pub fn component_entropy(r: &[f64]) -> f64 {
    -r.iter().filter(|&&p| p > 0.0).map(|&p| p * p.log2()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::fa::ProjectedFa;
    use nalgebra::DMatrix;

    fn scalar(mean: f64, w: f64, psi: f64) -> ProjectedFa {
        ProjectedFa {
            offset_id: 0,
            mean: DVector::from_element(1, mean),
            loadings: DMatrix::from_element(1, 1, w),
            noise: DVector::from_element(1, psi),
        }
    }

    #[test]
    fn entropy_anchors() {
        assert!((component_entropy(&[0.99, 0.01]) - 0.0808).abs() < 5e-5);
        assert_eq!(component_entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!((component_entropy(&[0.1; 10]) - 10f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn single_and_symmetric_components() {
        let y = DVector::from_element(1, 0.3);
        let r = responsibilities(&[scalar(0.0, 1.0, 1.0)], &[1.0], &y).unwrap();
        assert_eq!(r.responsibilities, vec![1.0]);
        let r = responsibilities(&[scalar(0.0, 1.0, 1.0), scalar(0.0, 1.0, 1.0)], &[0.5, 0.5], &y).unwrap();
        assert!((r.responsibilities[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn separated_components() {
        let comps = [scalar(0.0, 0.3, 0.1), scalar(5.0, 0.3, 0.1)];
        let r = responsibilities(&comps, &[0.5, 0.5], &DVector::from_element(1, 0.0)).unwrap();
        assert!(r.responsibilities[0] > 0.99);
        // direct density ratio
        let v: f64 = 0.09 + 0.1;
        let l0 = -0.5 * (0.0 / v);
        let l1 = -0.5 * (25.0 / v);
        let want = 1.0 / (1.0 + (l1 - l0).exp());
        assert!((r.responsibilities[0] - want).abs() < 1e-12);
    }

    #[test]
    fn all_degenerate_is_an_error() {
        let comps = [scalar(0.0, 1.0, 0.0)];
        assert!(responsibilities(&comps, &[1.0], &DVector::zeros(1)).is_err());
    }

    #[test]
    fn shift_invariance_of_normalization() {
        let a = normalize_log_weights(&[-3.0, -1.0, -2.5]).unwrap();
        let b = normalize_log_weights(&[997.0, 999.0, 997.5]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_reconstruction() {
        let c0 = FaModel::new(
            DVector::from_element(2, 1.0),
            DMatrix::from_element(2, 1, 0.5),
            DVector::from_element(2, 0.1),
        )
        .unwrap();
        let c1 = FaModel::new(
            DVector::from_element(2, -1.0),
            DMatrix::from_element(2, 1, 0.2),
            DVector::from_element(2, 0.1),
        )
        .unwrap();
        let mofa = MofaModel::new(vec![c0.clone(), c1], vec![0.5, 0.5]).unwrap();
        let post = Posterior {
            mean: DVector::from_element(1, 2.0),
            cov: DMatrix::from_element(1, 1, 0.5),
        };
        let mp = MixturePosterior {
            responsibilities: vec![1.0, 0.0],
            components: vec![post.clone(), Posterior::prior(1)],
        };
        assert_eq!(
            mixture_reconstruct(&mofa, &mp).unwrap(),
            reconstruct(&c0, &post).unwrap()
        );
        let single = MofaModel::single(c0.clone());
        let mp = MixturePosterior {
            responsibilities: vec![1.0],
            components: vec![post.clone()],
        };
        assert_eq!(
            mixture_reconstruct(&single, &mp).unwrap(),
            reconstruct(&c0, &post).unwrap()
        );
        assert_eq!(mofa.prior_mean(), DVector::zeros(2));
    }

    #[test]
    fn weights_must_sum_to_one() {
        let c = FaModel::new(DVector::zeros(2), DMatrix::zeros(2, 1), DVector::from_element(2, 1.0)).unwrap();
        assert!(MofaModel::new(vec![c.clone(), c], vec![0.5, 0.6]).is_err());
    }
}
