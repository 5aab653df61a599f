//! Synthetic factor-analysis data shared by the learning suites.

use glimpse_core::data_io::ImageSet;
use glimpse_core::learning::{sample_glimpse_dataset, GlimpseDataset, SamplingProtocol};
use glimpse_core::models::FaModel;
use glimpse_core::retina::{enumerate_offsets, RetinaSpec};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn images_from(rng: &mut ChaCha8Rng, fa: &FaModel, n: usize, rows: usize, cols: usize) -> ImageSet {
    let mut data = Vec::with_capacity(n * fa.dim());
    for _ in 0..n {
        let z = DVector::from_fn(fa.latent(), |_, _| normal(rng));
        let x = &fa.mean + &fa.loadings * z;
        data.extend(x.iter().zip(fa.noise.iter()).map(|(v, p)| v + p.sqrt() * normal(rng)));
    }
    ImageSet::new(rows, cols, data, "synthetic").unwrap()
}

/// A 5 × 20 image seen through a 12-pixel grid whose 8 × 8 fovea covers
/// every column across three offsets.
pub fn synthetic_learning_problem(seed: u64) -> (FaModel, GlimpseDataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = FaModel::new(
        DVector::from_fn(100, |_, _| 0.2 * normal(&mut rng)),
        DMatrix::from_fn(100, 5, |_, _| 0.4 * normal(&mut rng)),
        DVector::from_fn(100, |_, _| 0.02 + 0.02 * rand::Rng::random::<f64>(&mut rng)),
    )
    .unwrap();
    let images = images_from(&mut rng, &truth, 5000, 5, 20);
    let spec = RetinaSpec {
        grid_side: 12,
        rings: vec![(2, 2)],
        center_cell: 1,
    };
    let offsets = enumerate_offsets(&[-2], &[-2, 4, 10]);
    let data = sample_glimpse_dataset(
        &images,
        &spec,
        &offsets,
        SamplingProtocol::Uniform { n: 5000 },
        seed + 1,
    )
    .unwrap();
    (truth, data)
}
