//! Initial loadings from glimpses: every glimpse is upsampled to image space
//! with its uncovered pixels treated as missing, then PPCA is fitted by EM.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::learning::{ComponentState, GlimpseDataset, LearnState};
use crate::models::fa::{psi_y_init, FaModel};
use crate::models::fit::fit_ppca;
use crate::numerics::{LowRankCov, SpdFactor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    pub max_iterations: usize,
    pub tol: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InitOutcome {
    pub state: LearnState,
    /// The x-space model `(μ, W, σ² I)`.
    pub model: FaModel,
    pub sigma2: f64,
    /// Fraction of upsampled pixel entries that were missing.
    pub missing_fraction: f64,
    /// Pixels never covered by any glimpse; they fall back to the global
    /// mean with zero loadings.
    pub unobserved: Vec<usize>,
    /// Observed-data log-likelihood per EM iteration.
    pub loglik: Vec<f64>,
    pub converged: bool,
}

/// Records at one offset as an observed-pixels × records matrix.
struct Block {
    pixels: Vec<usize>,
    x: DMatrix<f64>,
}

pub fn init_from_glimpses(data: &GlimpseDataset, k: usize, cfg: &InitConfig) -> Result<InitOutcome> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot initialize from an empty glimpse dataset".into(),
        ));
    }
    data.validate()?;
    let rts = data.transforms()?;
    let d = data.rows * data.cols;
    if k == 0 || k >= d {
        return Err(Error::InvalidArgument(format!("need 0 < K < D, got K = {k}, D = {d}")));
    }

    let mut blocks = Vec::new();
    for (a, rt) in rts.iter().enumerate() {
        let ids: Vec<usize> = (0..data.len()).filter(|&i| data.records[i].offset_id == a).collect();
        if ids.is_empty() || rt.is_blind() {
            continue;
        }
        let pixels: Vec<usize> = rt
            .coverage()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c)
            .map(|(p, _)| p)
            .collect();
        let mut x = DMatrix::zeros(pixels.len(), ids.len());
        for (j, &i) in ids.iter().enumerate() {
            let up = rt.upsample(&data.records[i].values)?;
            for (r, &p) in pixels.iter().enumerate() {
                x[(r, j)] = up.image[p];
            }
        }
        blocks.push(Block { pixels, x });
    }

    // per-pixel observed counts, sums and squares
    let mut count = vec![0usize; d];
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for b in &blocks {
        for (r, &p) in b.pixels.iter().enumerate() {
            count[p] += b.x.ncols();
            sum[p] += b.x.row(r).sum();
            sq[p] += b.x.row(r).norm_squared();
        }
    }
    let observed: usize = count.iter().sum();
    let missing_fraction = 1.0 - observed as f64 / (data.len() * d) as f64;
    let unobserved: Vec<usize> = (0..d).filter(|&p| count[p] == 0).collect();
    if !unobserved.is_empty() {
        log::warn!(
            "{} pixels are never observed; using the global mean and zero loadings there",
            unobserved.len()
        );
    }
    if observed == 0 {
        return Err(Error::InvalidArgument("glimpses cover no pixels".into()));
    }
    let global_mean = sum.iter().sum::<f64>() / observed as f64;
    let mut mu = DVector::from_fn(d, |p, _| {
        if count[p] > 0 {
            sum[p] / count[p] as f64
        } else {
            global_mean
        }
    });

    // start from PPCA on mean-imputed images
    let mut imputed = DMatrix::from_fn(data.len(), d, |_, p| mu[p]);
    let mut row = 0;
    for b in &blocks {
        for j in 0..b.x.ncols() {
            for (r, &p) in b.pixels.iter().enumerate() {
                imputed[(row, p)] = b.x[(r, j)];
            }
            row += 1;
        }
    }
    let start = fit_ppca(&imputed, k)?;
    drop(imputed);
    let mut w = start.model.loadings;
    let mut sigma2 = start.sigma2;
    let total_var = (0..d)
        .filter(|&p| count[p] > 0)
        .map(|p| sq[p] / count[p] as f64 - (sum[p] / count[p] as f64).powi(2))
        .sum::<f64>()
        / (d - unobserved.len()).max(1) as f64;
    let floor = 1e-10 * total_var.max(f64::MIN_POSITIVE);
    sigma2 = sigma2.max(floor);

    let mut lls = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iterations {
        // E-step per offset block
        let stats = blocks
            .par_iter()
            .map(|b| {
                let wo = DMatrix::from_fn(b.pixels.len(), k, |r, c| w[(b.pixels[r], c)]);
                let mut xc = b.x.clone();
                for (r, &p) in b.pixels.iter().enumerate() {
                    xc.row_mut(r).add_scalar_mut(-mu[p]);
                }
                let noise = DVector::from_element(b.pixels.len(), sigma2);
                let cov = LowRankCov::new(&wo, &noise)?;
                let nb = b.x.ncols();
                let base = b.pixels.len() as f64 * crate::numerics::LN_2PI + cov.logdet();
                // posterior precision of z is I + WᵀW/σ²
                let inner = cov.inner();
                let ez = inner.solve_matrix(&(wo.tr_mul(&xc) / sigma2));
                let mut ll = 0.0;
                for j in 0..nb {
                    let col = xc.column(j).into_owned();
                    ll += -0.5 * (base + col.dot(&cov.solve(&col)));
                }
                let post_cov = inner.inverse();
                let szz = crate::numerics::symmetrize(&ez * ez.transpose() + post_cov * nb as f64);
                let sz = DVector::from_fn(k, |i, _| ez.row(i).sum());
                let xz = &b.x * ez.transpose();
                Ok((ll, szz, sz, xz))
            })
            .collect::<Result<Vec<_>>>()?;
        let ll: f64 = stats.iter().map(|s| s.0).sum();

        // M-step: per-pixel regression on [z; 1]
        let mut a_mats = vec![DMatrix::<f64>::zeros(0, 0); d];
        let mut b_vecs = vec![DVector::<f64>::zeros(0); d];
        for (b, (_, szz, sz, xz)) in blocks.iter().zip(&stats) {
            let nb = b.x.ncols() as f64;
            let mut aug = DMatrix::zeros(k + 1, k + 1);
            aug.view_mut((0, 0), (k, k)).copy_from(szz);
            aug.view_mut((0, k), (k, 1)).copy_from(sz);
            aug.view_mut((k, 0), (1, k)).copy_from(&sz.transpose());
            aug[(k, k)] = nb;
            for (r, &p) in b.pixels.iter().enumerate() {
                if a_mats[p].nrows() == 0 {
                    a_mats[p] = DMatrix::zeros(k + 1, k + 1);
                    b_vecs[p] = DVector::zeros(k + 1);
                }
                a_mats[p] += &aug;
                let mut rhs = DVector::zeros(k + 1);
                rhs.rows_mut(0, k).copy_from(&xz.row(r).transpose());
                rhs[k] = b.x.row(r).sum();
                b_vecs[p] += rhs;
            }
        }
        let solved = (0..d)
            .into_par_iter()
            .map(|p| {
                if a_mats[p].nrows() == 0 {
                    return Ok(None);
                }
                let f = SpdFactor::new_jittered(&a_mats[p])?;
                let theta = f.solve(&b_vecs[p]);
                let resid = sq[p] - theta.dot(&b_vecs[p]);
                Ok(Some((theta, resid)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut resid_total = 0.0;
        for (p, s) in solved.into_iter().enumerate() {
            match s {
                Some((theta, resid)) => {
                    for c in 0..k {
                        w[(p, c)] = theta[c];
                    }
                    mu[p] = theta[k];
                    resid_total += resid;
                }
                None => {
                    w.row_mut(p).fill(0.0);
                    mu[p] = global_mean;
                }
            }
        }
        sigma2 = (resid_total / observed as f64).max(floor);

        let prev = lls.last().copied();
        lls.push(ll);
        if let Some(prev) = prev {
            if (ll - prev).abs() <= cfg.tol * prev.abs().max(1.0) {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        log::warn!(
            "missing-data PPCA stopped after {} iterations without converging",
            cfg.max_iterations
        );
    }

    let model = FaModel::new(mu, w, DVector::from_element(d, sigma2))?;
    let log_noise = rts
        .iter()
        .map(|rt| Ok(psi_y_init(rt, &model.noise)?.map(f64::ln)))
        .collect::<Result<Vec<_>>>()?;
    let state = LearnState::single(ComponentState {
        mean: model.mean.clone(),
        loadings: model.loadings.clone(),
        log_noise,
    });
    Ok(InitOutcome {
        state,
        model,
        sigma2,
        missing_fraction,
        unobserved,
        loglik: lls,
        converged,
    })
}
