//! Expected information gain of fixation designs and search over them.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::fa::{LinearGaussian, ProjectedFa};
use crate::models::projected::ProjectedMixture;
use crate::numerics::{check_noise, chol_logdet, discrete_entropy, lowrank_logdet, SpdFactor};
use crate::retina::Offset;

/// Largest number of candidate designs an exhaustive search will score.
pub const EXHAUSTIVE_LIMIT: u128 = 1_000_000;

/// Offset ids of one fixation design.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Design(pub Vec<usize>);

impl Design {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigKind {
    Exact,
    UpperBound,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignScore {
    pub design: Design,
    pub eig_nats: f64,
    pub kind: EigKind,
}

/// JSON form of a scored design with offsets spelled out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignExport {
    pub design: Vec<Offset>,
    pub eig_nats: f64,
    pub eig_bits: f64,
    pub kind: EigKind,
}

impl DesignScore {
    pub fn export(&self, offsets: &[Offset]) -> DesignExport {
        DesignExport {
            design: self.design.0.iter().map(|&a| offsets[a]).collect(),
            eig_nats: self.eig_nats,
            eig_bits: self.eig_nats / std::f64::consts::LN_2,
            kind: self.kind,
        }
    }
}

/// `½ log|I + Σ_j W_jᵀ Ψ_j⁻¹ W_j|` for the glimpses of one design.
pub fn eig_fa(models: &[&ProjectedFa]) -> Result<f64> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("a design needs at least one glimpse".into()))?;
    let k = first.latent_dim();
    let mut precision = DMatrix::identity(k, k);
    for m in models {
        check_noise(&m.noise).map_err(Error::at_offset(m.offset_id))?;
        precision += m.information();
    }
    Ok(0.5 * chol_logdet(&precision)?)
}

/// The same quantity as `½[log|W̃W̃ᵀ + Ψ̃| − log|Ψ̃|]` on the stacked glimpse.
pub fn eig_fa_marginal_form(models: &[&ProjectedFa]) -> Result<f64> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("a design needs at least one glimpse".into()));
    }
    let total: usize = models.iter().map(|m| m.obs_dim()).sum();
    let k = models[0].latent_dim();
    let mut w = DMatrix::zeros(total, k);
    let mut psi = nalgebra::DVector::zeros(total);
    let mut at = 0;
    for m in models {
        let n = m.obs_dim();
        w.rows_mut(at, n).copy_from(&m.loadings);
        psi.rows_mut(at, n).copy_from(&m.noise);
        at += n;
    }
    let full = lowrank_logdet(&w, &psi)?;
    let noise: f64 = psi.iter().map(|p| p.ln()).sum();
    Ok(0.5 * (full - noise))
}

/// `H(π) + Σ π_m EIG_m`, an upper bound on the information gained about
/// the component and its latent factors.
pub fn eig_mofa_upper(components: &[Vec<&ProjectedFa>], weights: &[f64]) -> Result<f64> {
    crate::error::check_dim("mixture weights", components.len(), weights.len())?;
    let mut total = discrete_entropy(weights);
    for (models, &w) in components.iter().zip(weights) {
        if w > 0.0 {
            total += w * eig_fa(models)?;
        }
    }
    Ok(total)
}

/// Precomputed per-offset information matrices for design scoring.
#[derive(Debug, Clone)]
pub struct DesignModel {
    weights: Vec<f64>,
    /// `information[m][a] = W_aᵀ Ψ_a⁻¹ W_a` for component `m`.
    information: Vec<Vec<DMatrix<f64>>>,
    pub allow_duplicates: bool,
}

impl DesignModel {
    pub fn new(pm: &ProjectedMixture) -> Result<Self> {
        let mut information = Vec::with_capacity(pm.components());
        for m in 0..pm.components() {
            let mut row = Vec::with_capacity(pm.offsets());
            for a in 0..pm.offsets() {
                let p = pm.get(m, a);
                check_noise(&p.noise).map_err(Error::at_offset(a))?;
                row.push(p.information());
            }
            information.push(row);
        }
        Ok(Self {
            weights: pm.weights().to_vec(),
            information,
            allow_duplicates: false,
        })
    }

    pub fn offsets(&self) -> usize {
        self.information[0].len()
    }

    pub fn kind(&self) -> EigKind {
        if self.weights.len() == 1 {
            EigKind::Exact
        } else {
            EigKind::UpperBound
        }
    }

    fn check(&self, design: &Design) -> Result<()> {
        if design.is_empty() {
            return Err(Error::InvalidArgument("a design needs at least one glimpse".into()));
        }
        if let Some(&bad) = design.0.iter().find(|&&a| a >= self.offsets()) {
            return Err(Error::InvalidArgument(format!(
                "offset id {bad} out of range for {} offsets",
                self.offsets()
            )));
        }
        if !self.allow_duplicates {
            let mut ids = design.0.clone();
            ids.sort_unstable();
            if ids.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidArgument(
                    "design repeats an offset; duplicates are disabled".into(),
                ));
            }
        }
        Ok(())
    }

    /// EIG in nats: exact for one component, the upper bound otherwise.
    pub fn score(&self, design: &Design) -> Result<DesignScore> {
        self.check(design)?;
        let eig_nats = self.eig_unchecked(&design.0)?;
        Ok(DesignScore {
            design: design.clone(),
            eig_nats,
            kind: self.kind(),
        })
    }

    /// Per-component exact EIG of a design.
    pub fn component_eig(&self, component: usize, ids: &[usize]) -> Result<f64> {
        let info = &self.information[component];
        let k = info[0].nrows();
        let mut precision = DMatrix::identity(k, k);
        for &a in ids {
            precision += &info[a];
        }
        Ok(0.5 * SpdFactor::new(&precision).map_err(Error::at_offset(ids[0]))?.logdet())
    }

    fn eig_unchecked(&self, ids: &[usize]) -> Result<f64> {
        let mut total = if self.weights.len() > 1 {
            discrete_entropy(&self.weights)
        } else {
            0.0
        };
        for (m, &w) in self.weights.iter().enumerate() {
            if w > 0.0 {
                total += w * self.component_eig(m, ids)?;
            }
        }
        Ok(total)
    }
}

fn binomial(n: u128, k: u128) -> u128 {
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul(n - i) / (i + 1);
    }
    acc
}

/// Number of unordered designs of size `j` over `n` offsets.
pub fn design_count(n: usize, j: usize, allow_duplicates: bool) -> u128 {
    if allow_duplicates {
        if n == 0 {
            return 0;
        }
        binomial((n + j - 1) as u128, j as u128)
    } else if j > n {
        0
    } else {
        binomial(n as u128, j as u128)
    }
}

/// Every unordered combination in lexicographic order.
fn combinations(n: usize, j: usize, allow_duplicates: bool) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(j);
    fn rec(start: usize, n: usize, j: usize, dup: bool, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == j {
            out.push(cur.clone());
            return;
        }
        for a in start..n {
            cur.push(a);
            rec(if dup { a } else { a + 1 }, n, j, dup, cur, out);
            cur.pop();
        }
    }
    rec(0, n, j, allow_duplicates, &mut cur, &mut out);
    out
}

fn rank(scores: &mut [DesignScore]) {
    scores.sort_by(|a, b| b.eig_nats.total_cmp(&a.eig_nats).then_with(|| a.design.cmp(&b.design)));
}

/// Score every unordered design of size `j`, best first.
pub fn search_exhaustive(model: &DesignModel, j: usize) -> Result<Vec<DesignScore>> {
    if j == 0 {
        return Err(Error::InvalidArgument("design size must be at least 1".into()));
    }
    let count = design_count(model.offsets(), j, model.allow_duplicates);
    if count > EXHAUSTIVE_LIMIT {
        return Err(Error::SearchTooLarge {
            designs: count,
            limit: EXHAUSTIVE_LIMIT,
        });
    }
    if count == 0 {
        return Err(Error::InvalidArgument(format!(
            "no designs of size {j} from {} distinct offsets",
            model.offsets()
        )));
    }
    let kind = model.kind();
    let mut scores = combinations(model.offsets(), j, model.allow_duplicates)
        .into_par_iter()
        .map(|ids| {
            let eig_nats = model.eig_unchecked(&ids)?;
            Ok(DesignScore {
                design: Design(ids),
                eig_nats,
                kind,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rank(&mut scores);
    Ok(scores)
}

/// Add one offset at a time, each maximizing the EIG of the enlarged design.
pub fn search_greedy(model: &DesignModel, j: usize) -> Result<DesignScore> {
    if j == 0 {
        return Err(Error::InvalidArgument("design size must be at least 1".into()));
    }
    if !model.allow_duplicates && j > model.offsets() {
        return Err(Error::InvalidArgument(format!(
            "cannot choose {j} distinct offsets from {}",
            model.offsets()
        )));
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(j);
    let mut best_eig = 0.0;
    for _ in 0..j {
        let candidates: Vec<usize> = (0..model.offsets())
            .filter(|a| model.allow_duplicates || !chosen.contains(a))
            .collect();
        let scored = candidates
            .par_iter()
            .map(|&a| {
                let mut ids = chosen.clone();
                ids.push(a);
                model.eig_unchecked(&ids).map(|e| (a, e))
            })
            .collect::<Result<Vec<_>>>()?;
        let (a, e) = scored.into_iter().fold(
            (usize::MAX, f64::NEG_INFINITY),
            |acc, v| if v.1 > acc.1 { v } else { acc },
        );
        chosen.push(a);
        best_eig = e;
    }
    chosen.sort_unstable();
    Ok(DesignScore {
        design: Design(chosen),
        eig_nats: best_eig,
        kind: model.kind(),
    })
}

/// Reorder a design so that every prefix is the greedy choice among its
/// members: the first entry is the most informative single glimpse.
pub fn order_greedily(model: &DesignModel, design: &Design) -> Result<Design> {
    model.check(design)?;
    let mut rest = design.0.clone();
    let mut chosen = Vec::with_capacity(rest.len());
    while !rest.is_empty() {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, &a) in rest.iter().enumerate() {
            let mut ids = chosen.clone();
            ids.push(a);
            let e = model.eig_unchecked(&ids)?;
            if e > best.1 || (e == best.1 && a < rest[best.0]) {
                best = (i, e);
            }
        }
        chosen.push(rest.remove(best.0));
    }
    Ok(Design(chosen))
}

/// `j` distinct offsets drawn uniformly at random.
pub fn random_design(n_offsets: usize, j: usize, seed: u64) -> Result<Design> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_design_with(&mut rng, n_offsets, j)
}

pub fn random_design_with<R: rand::Rng + ?Sized>(rng: &mut R, n_offsets: usize, j: usize) -> Result<Design> {
    if j > n_offsets {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {j} distinct offsets from {n_offsets}"
        )));
    }
    Ok(Design(rand::seq::index::sample(rng, n_offsets, j).into_vec()))
}
