//! Synthetic fixtures shared by the benchmarks.

use glimpse_core::data_io::ImageSet;
use glimpse_core::learning::{sample_glimpse_dataset, GlimpseDataset, SamplingProtocol};
use glimpse_core::models::{FaModel, MofaModel, ProjectedMixture};
use glimpse_core::retina::{build_layout, frey_offsets, place_all, RetinaSpec};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const ROWS: usize = 28;
pub const COLS: usize = 20;

/// Random factor analyser over 28 × 20 images.
pub fn face_model(k: usize, seed: u64) -> FaModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = ROWS * COLS;
    let mut g = |s: f64| -> f64 {
        let v: f64 = StandardNormal.sample(&mut rng);
        s * v
    };
    FaModel::new(
        DVector::from_fn(d, |_, _| g(0.2)),
        DMatrix::from_fn(d, k, |_, _| g(0.1)),
        DVector::from_element(d, 0.01),
    )
    .expect("valid model")
}

pub fn face_mixture(m: usize, k: usize) -> MofaModel {
    let comps = (0..m).map(|i| face_model(k, i as u64)).collect();
    MofaModel::new(comps, vec![1.0 / m as f64; m]).expect("valid mixture")
}

/// The mixture placed at the 35 face offsets with the default retina.
pub fn projected(m: usize, k: usize) -> ProjectedMixture {
    let layout = build_layout(&RetinaSpec::default()).expect("valid retina");
    let rts = place_all(&layout, ROWS, COLS, &frey_offsets());
    ProjectedMixture::with_initial_noise(face_mixture(m, k), rts).expect("projects")
}

pub fn images(fa: &FaModel, n: usize, seed: u64) -> ImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * fa.dim());
    for _ in 0..n {
        let z = DVector::from_fn(fa.latent(), |_, _| StandardNormal.sample(&mut rng));
        let x = &fa.mean + &fa.loadings * z;
        data.extend(x.iter().map(|v| v + 0.1 * (rng.random::<f64>() - 0.5)));
    }
    ImageSet::new(ROWS, COLS, data, "bench").expect("whole images")
}

/// Stratified glimpses at the 35 face offsets.
pub fn glimpses(fa: &FaModel, per_offset: usize) -> GlimpseDataset {
    let set = images(fa, 200, 1);
    sample_glimpse_dataset(
        &set,
        &RetinaSpec::default(),
        &frey_offsets(),
        SamplingProtocol::Stratified { per_offset },
        2,
    )
    .expect("samples")
}
