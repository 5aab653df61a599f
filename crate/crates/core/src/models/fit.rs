//! Fitting x-space models from full images: closed-form PPCA, EM for factor
//! analysis, and k-means followed by per-cluster PPCA for mixtures.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::fa::FaModel;
use crate::models::mixture::MofaModel;
use crate::numerics::{LowRankCov, SpdFactor, LN_2PI};

/// Column means of an `N × D` data matrix (rows are images).
pub fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows().max(1) as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

fn centered(x: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= mean.transpose();
    }
    xc
}

/// Biased (1/N) sample covariance.
pub fn sample_covariance(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let mean = column_means(x);
    let xc = centered(x, &mean);
    let s = xc.tr_mul(&xc) / x.nrows().max(1) as f64;
    (mean, s)
}

/// Leading eigenpairs (descending) of the sample covariance, computed on the
/// smaller of the covariance and Gram matrices. Also returns the total
/// variance (trace).
fn leading_eigen(xc: &DMatrix<f64>, k: usize) -> (Vec<f64>, DMatrix<f64>, f64) {
    let (n, d) = xc.shape();
    let nf = n as f64;
    let total = xc.norm_squared() / nf;
    if n < d {
        let gram = xc * xc.transpose() / nf;
        let eig = SymmetricEigen::new(gram);
        let order = descending(&eig.eigenvalues);
        let mut values = Vec::with_capacity(k);
        let mut vectors = DMatrix::zeros(d, k);
        for (j, &i) in order.iter().take(k).enumerate() {
            let lambda = eig.eigenvalues[i].max(0.0);
            values.push(lambda);
            if lambda > 0.0 {
                let u = xc.tr_mul(&eig.eigenvectors.column(i).into_owned()) / (nf * lambda).sqrt();
                vectors.set_column(j, &u);
            }
        }
        (values, vectors, total)
    } else {
        let cov = xc.tr_mul(xc) / nf;
        let eig = SymmetricEigen::new(cov);
        let order = descending(&eig.eigenvalues);
        let mut values = Vec::with_capacity(k);
        let mut vectors = DMatrix::zeros(d, k);
        for (j, &i) in order.iter().take(k).enumerate() {
            values.push(eig.eigenvalues[i].max(0.0));
            vectors.set_column(j, &eig.eigenvectors.column(i));
        }
        (values, vectors, total)
    }
}

fn descending(v: &DVector<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    idx
}

/// Eigenvalues of the sample covariance, largest first (at most `min(N, D)`).
pub fn pca_spectrum(x: &DMatrix<f64>) -> Vec<f64> {
    let mean = column_means(x);
    let xc = centered(x, &mean);
    let k = x.nrows().min(x.ncols());
    leading_eigen(&xc, k).0
}

/// Smallest number of principal components explaining at least `fraction`
/// of the total variance.
pub fn components_for_variance(spectrum: &[f64], fraction: f64) -> usize {
    let total: f64 = spectrum.iter().sum();
    let mut acc = 0.0;
    for (i, v) in spectrum.iter().enumerate() {
        acc += v;
        if acc >= fraction * total {
            return i + 1;
        }
    }
    spectrum.len()
}

#[derive(Debug, Clone)]
pub struct PpcaFit {
    pub model: FaModel,
    pub sigma2: f64,
    /// Fraction of the total variance carried by the retained components.
    pub explained: f64,
}

/// Closed-form probabilistic PCA: `W = U (Λ − σ² I)^{1/2}`, with `σ²` the
/// mean of the discarded eigenvalues.
pub fn fit_ppca(x: &DMatrix<f64>, k: usize) -> Result<PpcaFit> {
    let (n, d) = x.shape();
    if k == 0 || k >= d {
        return Err(Error::InvalidArgument(format!("need 0 < K < D, got K = {k}, D = {d}")));
    }
    if n <= k {
        return Err(Error::InvalidArgument(format!(
            "need more samples than factors: N = {n}, K = {k}"
        )));
    }
    let mean = column_means(x);
    let xc = centered(x, &mean);
    let (values, vectors, total) = leading_eigen(&xc, k);
    let top = values[0];
    let rank = values
        .iter()
        .filter(|&&v| v > 1e-12 * top.max(f64::MIN_POSITIVE))
        .count();
    if rank < k || top <= 0.0 {
        return Err(Error::RankDeficient { requested: k, rank });
    }
    let kept: f64 = values.iter().sum();
    let floor = 1e-12 * (total / d as f64).max(f64::MIN_POSITIVE);
    let sigma2 = ((total - kept) / (d - k) as f64).max(floor);
    let mut w = vectors;
    for (j, lambda) in values.iter().enumerate() {
        let scale = (lambda - sigma2).max(0.0).sqrt();
        w.column_mut(j).scale_mut(scale);
    }
    Ok(PpcaFit {
        model: FaModel::new(mean, w, DVector::from_element(d, sigma2))?,
        sigma2,
        explained: if total > 0.0 { kept / total } else { 0.0 },
    })
}

#[derive(Debug, Clone)]
pub struct FaFit {
    pub model: FaModel,
    /// Data log-likelihood before the first and after every EM step.
    pub loglik: Vec<f64>,
    pub converged: bool,
}

/// Gaussian log-likelihood of `n` samples with covariance `W Wᵀ + Ψ` and
/// sample covariance `s` about the model mean (the mean is the ML one).
fn moment_loglik(cov: &LowRankCov, w: &DMatrix<f64>, psi: &DVector<f64>, s: &DMatrix<f64>, n: f64) -> f64 {
    // tr(C⁻¹ S) = tr(Ψ⁻¹ S) − tr(A⁻¹ Bᵀ S B), B = Ψ⁻¹ W
    let d = psi.len();
    let tr_psi: f64 = (0..d).map(|i| s[(i, i)] / psi[i]).sum();
    let b = cov.scaled_loadings();
    let sb = s * b;
    let inner = b.tr_mul(&sb);
    let tr_low = cov.inner().solve_matrix(&inner).trace();
    let _ = w;
    -0.5 * n * (d as f64 * LN_2PI + cov.logdet() + tr_psi - tr_low)
}

/// EM for factor analysis started from the PPCA solution.
pub fn fit_fa_em(x: &DMatrix<f64>, k: usize, iters: usize, tol: f64) -> Result<FaFit> {
    let init = fit_ppca(x, k)?.model;
    let (_, s) = sample_covariance(x);
    fa_em_from_moments(init, &s, x.nrows() as f64, iters, tol)
}

/// EM iterations on sufficient statistics: sample covariance `s` of `n`
/// samples around `init.mean`.
pub fn fa_em_from_moments(init: FaModel, s: &DMatrix<f64>, n: f64, iters: usize, tol: f64) -> Result<FaFit> {
    let d = init.dim();
    let k = init.latent();
    let floor = 1e-9 * (s.trace() / d as f64).max(f64::MIN_POSITIVE);
    let mut w = init.loadings.clone();
    let mut psi = init.noise.map(|p| p.max(floor));
    let mut cov = LowRankCov::new(&w, &psi)?;
    let mut lls = vec![moment_loglik(&cov, &w, &psi, s, n)];
    let mut converged = false;
    for _ in 0..iters {
        // β = Wᵀ C⁻¹ (K × D)
        let beta = cov.solve_loadings().transpose();
        let sb = s * beta.transpose();
        let mut ezz = -(&beta * &w) + &beta * &sb;
        for i in 0..k {
            ezz[(i, i)] += 1.0;
        }
        let ezz_f = SpdFactor::new_jittered(&ezz)?;
        let w_new = ezz_f.solve_matrix(&sb.transpose()).transpose();
        let psi_new = DVector::from_iterator(d, (0..d).map(|i| (s[(i, i)] - w_new.row(i).dot(&sb.row(i))).max(floor)));
        w = w_new;
        psi = psi_new;
        cov = LowRankCov::new(&w, &psi)?;
        let ll = moment_loglik(&cov, &w, &psi, s, n);
        let prev = *lls.last().unwrap();
        lls.push(ll);
        if (ll - prev).abs() <= tol * prev.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("factor analysis EM stopped after {iters} iterations without converging");
    }
    Ok(FaFit {
        model: FaModel::new(init.mean, w, psi)?,
        loglik: lls,
        converged,
    })
}

/// Data log-likelihood of an x-space factor analyser.
pub fn fa_loglik(model: &FaModel, x: &DMatrix<f64>) -> Result<f64> {
    let cov = LowRankCov::new(&model.loadings, &model.noise)?;
    Ok(x.row_iter()
        .map(|row| cov.log_density(&(row.transpose() - &model.mean)))
        .sum())
}

#[derive(Debug, Clone)]
pub struct KMeans {
    pub centroids: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub inertia: f64,
}

fn squared_distances(x: &DMatrix<f64>, x_norms: &[f64], centroids: &DMatrix<f64>) -> DMatrix<f64> {
    // ‖x‖² − 2 x·c + ‖c‖²
    let cross = x * centroids.transpose();
    let c_norms: Vec<f64> = centroids.row_iter().map(|r| r.norm_squared()).collect();
    DMatrix::from_fn(x.nrows(), centroids.nrows(), |i, j| {
        (x_norms[i] - 2.0 * cross[(i, j)] + c_norms[j]).max(0.0)
    })
}

fn kmeans_once(x: &DMatrix<f64>, x_norms: &[f64], m: usize, rng: &mut ChaCha8Rng, max_iter: usize) -> KMeans {
    let (n, d) = x.shape();
    // k-means++ seeding
    let mut centroids = DMatrix::zeros(m, d);
    centroids.set_row(0, &x.row(rng.random_range(0..n)));
    let mut nearest = vec![f64::INFINITY; n];
    for j in 1..m {
        let c = centroids.rows(j - 1, 1).into_owned();
        let dist = squared_distances(x, x_norms, &c);
        for i in 0..n {
            nearest[i] = nearest[i].min(dist[(i, 0)]);
        }
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &v) in nearest.iter().enumerate() {
                if u < v {
                    chosen = i;
                    break;
                }
                u -= v;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.set_row(j, &x.row(pick));
    }

    let mut labels = vec![usize::MAX; n];
    let mut inertia = f64::INFINITY;
    for _ in 0..max_iter {
        let dist = squared_distances(x, x_norms, &centroids);
        let mut changed = false;
        inertia = 0.0;
        for i in 0..n {
            let (best, bd) =
                (0..m)
                    .map(|j| (j, dist[(i, j)]))
                    .fold((0, f64::INFINITY), |acc, v| if v.1 < acc.1 { v } else { acc });
            inertia += bd;
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        let mut sums = DMatrix::zeros(m, d);
        let mut counts = vec![0usize; m];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            let mut row = sums.row_mut(l);
            row += x.row(i);
        }
        for j in 0..m {
            if counts[j] == 0 {
                // re-seed from the point farthest from its own centroid
                let far = (0..n)
                    .max_by(|&a, &b| dist[(a, labels[a])].total_cmp(&dist[(b, labels[b])]))
                    .unwrap();
                log::info!("k-means cluster {j} emptied; re-seeding from point {far}");
                centroids.set_row(j, &x.row(far));
                labels[far] = j;
                changed = true;
            } else {
                centroids.set_row(j, &(sums.row(j) / counts[j] as f64));
            }
        }
        if !changed {
            break;
        }
    }
    KMeans {
        centroids,
        labels,
        inertia,
    }
}

/// Lloyd's k-means with k-means++ seeding; best inertia of `restarts` runs.
pub fn kmeans(x: &DMatrix<f64>, m: usize, restarts: usize, seed: u64) -> Result<KMeans> {
    if m == 0 || m > x.nrows() {
        return Err(Error::InvalidArgument(format!(
            "cannot form {m} clusters from {} points",
            x.nrows()
        )));
    }
    let x_norms: Vec<f64> = x.row_iter().map(|r| r.norm_squared()).collect();
    let mut best: Option<KMeans> = None;
    for r in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let run = kmeans_once(x, &x_norms, m, &mut rng, 300);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

#[derive(Debug, Clone)]
pub struct MofaFit {
    pub model: MofaModel,
    /// Within-component explained variance fraction per component.
    pub explained: Vec<f64>,
    pub cluster_sizes: Vec<usize>,
}

/// k-means partition, then a PPCA fit per cluster; mixing proportions are
/// the cluster fractions.
pub fn fit_mofa_x(x: &DMatrix<f64>, k: usize, m: usize, seed: u64) -> Result<MofaFit> {
    let n = x.nrows();
    if n <= m * k {
        return Err(Error::InvalidArgument(format!(
            "need N > M·K: N = {n}, M = {m}, K = {k}"
        )));
    }
    if m == 1 {
        let fit = fit_ppca(x, k)?;
        return Ok(MofaFit {
            explained: vec![fit.explained],
            model: MofaModel::single(fit.model),
            cluster_sizes: vec![n],
        });
    }
    let km = kmeans(x, m, 10, seed)?;
    let mut components = Vec::with_capacity(m);
    let mut explained = Vec::with_capacity(m);
    let mut sizes = Vec::with_capacity(m);
    for j in 0..m {
        let members: Vec<usize> = (0..n).filter(|&i| km.labels[i] == j).collect();
        let sub = DMatrix::from_fn(members.len(), x.ncols(), |r, c| x[(members[r], c)]);
        let fit = fit_ppca(&sub, k)
            .map_err(|e| Error::InvalidArgument(format!("cluster {j} ({} points): {e}", members.len())))?;
        components.push(fit.model);
        explained.push(fit.explained);
        sizes.push(members.len());
    }
    let weights = sizes.iter().map(|&s| s as f64 / n as f64).collect();
    Ok(MofaFit {
        model: MofaModel::new(components, weights)?,
        explained,
        cluster_sizes: sizes,
    })
}

/// Largest principal angle, in radians, between the column spaces of `a`
/// and `b` (same shape, full column rank).
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let sv = (qa.transpose() * qb).singular_values();
    sv.iter().fold(1.0f64, |m, &s| m.min(s)).clamp(-1.0, 1.0).acos()
}
