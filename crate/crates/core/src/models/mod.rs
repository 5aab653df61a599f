pub mod fa;
pub mod fit;
pub mod mixture;
pub mod projected;

pub use fa::{
    marginal_loglik, posterior, project, psi_y_init, reconstruct, FaModel, LinearGaussian, Posterior, ProjectedFa,
    Reconstruction,
};
pub use fit::{fit_fa_em, fit_mofa_x, fit_ppca, kmeans, max_principal_angle, FaFit, KMeans, MofaFit, PpcaFit};
pub use mixture::{component_entropy, mixture_reconstruct, responsibilities, MixturePosterior, MofaModel};
pub use projected::ProjectedMixture;
