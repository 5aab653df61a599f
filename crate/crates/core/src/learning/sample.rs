use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_io::ImageSet;
use crate::error::{Error, Result};
use crate::learning::{GlimpseDataset, GlimpseRecord};
use crate::retina::{build_layout, place_all, Offset, RetinaSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingProtocol {
    /// `n` independent (image, offset) pairs drawn uniformly.
    Uniform { n: usize },
    /// For every offset, `per_offset` distinct images drawn uniformly
    /// (with replacement only when there are fewer images than that).
    Stratified { per_offset: usize },
}

pub fn sample_glimpse_dataset(
    images: &ImageSet,
    retina: &RetinaSpec,
    offsets: &[Offset],
    protocol: SamplingProtocol,
    seed: u64,
) -> Result<GlimpseDataset> {
    if images.count() == 0 || offsets.is_empty() {
        return Err(Error::InvalidArgument(
            "sampling needs at least one image and one offset".into(),
        ));
    }
    let layout = build_layout(retina)?;
    let rts = place_all(&layout, images.rows, images.cols, offsets);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_images = images.count();
    let mut picks: Vec<(usize, usize)> = Vec::new();
    match protocol {
        SamplingProtocol::Uniform { n } => {
            if n == 0 {
                return Err(Error::InvalidArgument("sample size must be at least 1".into()));
            }
            for _ in 0..n {
                let i = rng.random_range(0..n_images);
                let a = rng.random_range(0..offsets.len());
                picks.push((i, a));
            }
        }
        SamplingProtocol::Stratified { per_offset } => {
            if per_offset == 0 {
                return Err(Error::InvalidArgument("sample size must be at least 1".into()));
            }
            for a in 0..offsets.len() {
                if per_offset <= n_images {
                    for i in rand::seq::index::sample(&mut rng, n_images, per_offset) {
                        picks.push((i, a));
                    }
                } else {
                    for _ in 0..per_offset {
                        picks.push((rng.random_range(0..n_images), a));
                    }
                }
            }
        }
    }
    let records = picks
        .into_iter()
        .map(|(i, a)| {
            Ok(GlimpseRecord {
                offset_id: a,
                source: i,
                values: rts[a].apply(images.image(i))?.as_slice().to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GlimpseDataset {
        retina: retina.clone(),
        rows: images.rows,
        cols: images.cols,
        offsets: offsets.to_vec(),
        records,
    })
}
