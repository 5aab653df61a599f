//! Reconstruction error, paired sign tests, component-entropy censuses and
//! the fixation evaluation protocol.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::ImageSet;
use crate::design::{random_design_with, Design};
use crate::error::{check_dim, Error, Result};
use crate::fusion::fused_mixture;
use crate::models::fa::{LinearGaussian, ProjectedFa, Reconstruction};
use crate::models::mixture::{component_entropy, mixture_reconstruct, responsibilities, MixturePosterior};
use crate::models::projected::ProjectedMixture;
use crate::numerics::logsumexp;

/// Default entropy threshold for the census, in bits.
pub const ENTROPY_THRESHOLD_BITS: f64 = 0.0808;

pub fn rmse(x_hat: &[f64], x: &[f64]) -> Result<f64> {
    check_dim("rmse", x.len(), x_hat.len())?;
    if x.is_empty() {
        return Err(Error::InvalidArgument("rmse of empty images".into()));
    }
    let sq: f64 = x_hat.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((sq / x.len() as f64).sqrt())
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    /// Pairs where the first error is strictly smaller.
    pub wins_a: usize,
    /// Pairs that are not ties.
    pub n_effective: usize,
    pub ties: usize,
    /// `P(X ≥ wins_a)` for `X ~ Binomial(n_effective, ½)`; `None` when every
    /// pair is tied.
    pub p_one_sided: Option<f64>,
    pub p_two_sided: Option<f64>,
}

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(0.0);
    for i in 1..=n {
        out.push(out[i - 1] + (i as f64).ln());
    }
    out
}

/// `log P(X ≥ k)` for `X ~ Binomial(n, ½)`.
pub fn ln_binomial_upper_tail(n: usize, k: usize) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    let lf = ln_factorials(n);
    let terms: Vec<f64> = (k..=n)
        .map(|j| lf[n] - lf[j] - lf[n - j] - n as f64 * std::f64::consts::LN_2)
        .collect();
    logsumexp(&terms).min(0.0)
}

pub fn sign_test_counts(wins: usize, n: usize, ties: usize) -> SignTest {
    let (p1, p2) = if n == 0 {
        (None, None)
    } else {
        let upper = ln_binomial_upper_tail(n, wins).exp();
        let lower = ln_binomial_upper_tail(n, n - wins).exp();
        (Some(upper), Some((2.0 * upper.min(lower)).min(1.0)))
    };
    SignTest {
        wins_a: wins,
        n_effective: n,
        ties,
        p_one_sided: p1,
        p_two_sided: p2,
    }
}

/// Exact sign test of `err_a < err_b` over paired errors; ties are dropped.
pub fn paired_sign_test(err_a: &[f64], err_b: &[f64]) -> Result<SignTest> {
    check_dim("paired errors", err_a.len(), err_b.len())?;
    let wins = err_a.iter().zip(err_b).filter(|(a, b)| a < b).count();
    let ties = err_a.iter().zip(err_b).filter(|(a, b)| a == b).count();
    let n = err_a.len() - ties;
    let t = sign_test_counts(wins, n, ties);
    if t.p_one_sided.is_none() {
        log::warn!("sign test has no untied pairs; p-value undefined");
    }
    Ok(t)
}

/// Glimpses of `image` at the given offsets.
pub fn take_glimpses(pm: &ProjectedMixture, image: &[f64], ids: &[usize]) -> Result<Vec<(usize, DVector<f64>)>> {
    ids.iter()
        .map(|&a| {
            let rt = pm
                .transforms
                .get(a)
                .ok_or_else(|| Error::InvalidArgument(format!("offset id {a} out of range")))?;
            Ok((a, rt.apply(image)?))
        })
        .collect()
}

/// Mixture posterior and reconstruction from glimpses at `ids` (empty for
/// the prior).
pub fn reconstruct_from(
    pm: &ProjectedMixture,
    image: &[f64],
    ids: &[usize],
) -> Result<(MixturePosterior, Reconstruction)> {
    let mp = if ids.is_empty() {
        MixturePosterior::prior(pm.weights(), pm.mixture.latent())
    } else {
        fused_mixture(pm, &take_glimpses(pm, image, ids)?)?
    };
    let rec = mixture_reconstruct(&pm.mixture, &mp)?;
    Ok((mp, rec))
}

/// Mixture posterior and reconstruction given the whole image.
pub fn reconstruct_full(pm: &ProjectedMixture, image: &[f64]) -> Result<(MixturePosterior, Reconstruction)> {
    let models: Vec<ProjectedFa> = pm
        .mixture
        .components
        .iter()
        .map(|c| ProjectedFa {
            offset_id: usize::MAX,
            mean: c.mean.clone(),
            loadings: c.loadings.clone(),
            noise: c.noise.clone(),
        })
        .collect();
    check_dim("image pixels", models[0].obs_dim(), image.len())?;
    let mp = responsibilities(&models, pm.weights(), &DVector::from_column_slice(image))?;
    let rec = mixture_reconstruct(&pm.mixture, &mp)?;
    Ok((mp, rec))
}

/// For each design, how many images have a component posterior with more
/// than `threshold_bits` of entropy after glimpsing that design.
pub fn entropy_census(
    pm: &ProjectedMixture,
    images: &ImageSet,
    designs: &[Design],
    threshold_bits: f64,
) -> Result<Vec<usize>> {
    let per_image = (0..images.count())
        .into_par_iter()
        .map(|i| {
            designs
                .iter()
                .map(|d| {
                    let (mp, _) = reconstruct_from(pm, images.image(i), &d.0)?;
                    Ok(component_entropy(&mp.responsibilities) > threshold_bits)
                })
                .collect::<Result<Vec<bool>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..designs.len())
        .map(|j| per_image.iter().filter(|v| v[j]).count())
        .collect())
}

/// Census of the whole-image posterior.
pub fn entropy_census_full(pm: &ProjectedMixture, images: &ImageSet, threshold_bits: f64) -> Result<usize> {
    let flags = (0..images.count())
        .into_par_iter()
        .map(|i| Ok(component_entropy(&reconstruct_full(pm, images.image(i))?.0.responsibilities) > threshold_bits))
        .collect::<Result<Vec<bool>>>()?;
    Ok(flags.into_iter().filter(|&f| f).count())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    /// Designed fixations in viewing order.
    pub bed: Design,
    /// Seed for the per-image random designs.
    pub seed: u64,
    pub threshold_bits: f64,
}

/// Per-image RMSE for one design kind at each fixation count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionErrors {
    pub name: String,
    /// `errors[j][i]`: image `i` after `j` fixations.
    pub errors: Vec<Vec<f64>>,
}

impl ConditionErrors {
    pub fn mean_rmse(&self) -> Vec<f64> {
        self.errors.iter().map(|e| mean(e)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub bed: ConditionErrors,
    pub random: ConditionErrors,
    pub full: Vec<f64>,
    /// Sign test of BED against random at 1..J fixations.
    pub sign_tests: Vec<SignTest>,
    /// Entropy census for BED after 0..J fixations.
    pub census: Vec<usize>,
    pub census_full: usize,
    pub threshold_bits: f64,
}

impl EvalReport {
    pub fn full_rmse(&self) -> f64 {
        mean(&self.full)
    }

    /// Rows of a table with columns `design, 0, 1, …, J, <full_label>`.
    pub fn table(&self, full_label: &str) -> (Vec<String>, Vec<Vec<String>>) {
        let j = self.bed.errors.len() - 1;
        let mut header = vec!["design".to_string()];
        header.extend((0..=j).map(|f| f.to_string()));
        header.push(full_label.into());
        let row = |c: &ConditionErrors| {
            let mut r = vec![c.name.clone()];
            r.extend(c.mean_rmse().iter().map(|v| format!("{v:.4}")));
            r.push(format!("{:.4}", self.full_rmse()));
            r
        };
        (header, vec![row(&self.bed), row(&self.random)])
    }
}

struct ImageResult {
    bed: Vec<f64>,
    random: Vec<f64>,
    full: f64,
    bed_entropy: Vec<f64>,
    full_entropy: f64,
}

/// Reconstruct every test image from 0..J designed fixations, from 0..J
/// random fixations (redrawn per image), and from the whole image.
pub fn run_protocol(pm: &ProjectedMixture, test: &ImageSet, cfg: &ProtocolConfig) -> Result<EvalReport> {
    let j = cfg.bed.len();
    if j == 0 {
        return Err(Error::InvalidArgument("the designed fixation list is empty".into()));
    }
    if let Some(&bad) = cfg.bed.0.iter().find(|&&a| a >= pm.offsets()) {
        return Err(Error::InvalidArgument(format!("offset id {bad} out of range")));
    }
    check_dim("test image pixels", pm.mixture.dim(), test.pixels())?;
    let results = (0..test.count())
        .into_par_iter()
        .map(|i| {
            let x = test.image(i);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let random = random_design_with(&mut rng, pm.offsets(), j)?;
            let mut bed = Vec::with_capacity(j + 1);
            let mut rnd = Vec::with_capacity(j + 1);
            let mut bed_entropy = Vec::with_capacity(j + 1);
            for f in 0..=j {
                let (mp, rec) = reconstruct_from(pm, x, &cfg.bed.0[..f])?;
                bed.push(rmse(rec.image.as_slice(), x)?);
                bed_entropy.push(component_entropy(&mp.responsibilities));
                if f == 0 {
                    rnd.push(bed[0]);
                } else {
                    let (_, rec) = reconstruct_from(pm, x, &random.0[..f])?;
                    rnd.push(rmse(rec.image.as_slice(), x)?);
                }
            }
            let (mp, rec) = reconstruct_full(pm, x)?;
            Ok(ImageResult {
                bed,
                random: rnd,
                full: rmse(rec.image.as_slice(), x)?,
                bed_entropy,
                full_entropy: component_entropy(&mp.responsibilities),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let gather = |pick: &dyn Fn(&ImageResult) -> &Vec<f64>| -> Vec<Vec<f64>> {
        (0..=j).map(|f| results.iter().map(|r| pick(r)[f]).collect()).collect()
    };
    let bed = ConditionErrors {
        name: "bed".into(),
        errors: gather(&|r| &r.bed),
    };
    let random = ConditionErrors {
        name: "random".into(),
        errors: gather(&|r| &r.random),
    };
    let sign_tests = (1..=j)
        .map(|f| paired_sign_test(&bed.errors[f], &random.errors[f]))
        .collect::<Result<Vec<_>>>()?;
    let census = (0..=j)
        .map(|f| results.iter().filter(|r| r.bed_entropy[f] > cfg.threshold_bits).count())
        .collect();
    Ok(EvalReport {
        images: test.count(),
        full: results.iter().map(|r| r.full).collect(),
        census_full: results.iter().filter(|r| r.full_entropy > cfg.threshold_bits).count(),
        bed,
        random,
        sign_tests,
        census,
        threshold_bits: cfg.threshold_bits,
    })
}
