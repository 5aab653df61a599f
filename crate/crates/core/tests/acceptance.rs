//! Acceptance run: one line per criterion, nonzero exit if any fails.
//!
//! `GLIMPSE_MNIST_DIR` names a directory holding the four MNIST IDX files and
//! `GLIMPSE_FREY_PATH` a Frey frame set (GLIM image set or IDX image file).
//! Checks that need missing data report it instead of passing or failing.

mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::gradients::gradient_error;
use common::retina_cases::{case_strategy, check_linearity, check_masks, check_tiling, spec_strategy};
use common::synthetic::{images_from, normal, synthetic_learning_problem};
use glimpse_core::data_io::{
    decode_glim, encode_glim, encode_pgm, filter_label, normalize, normalize_with, parse_idx, read_idx, split, Idx,
    ImageSet, ModelBundle, Normalization, Payload,
};
use glimpse_core::design::{
    eig_fa, eig_fa_marginal_form, eig_mofa_upper, order_greedily, search_exhaustive, Design, DesignModel,
};
use glimpse_core::eval::{run_protocol, EvalReport, ProtocolConfig, ENTROPY_THRESHOLD_BITS};
use glimpse_core::fusion::{fused_posterior, lds_filter, Glimpse, GlimpseSequence};
use glimpse_core::learning::{
    independent_gaussian_loglik, init_from_glimpses, optimize, sample_glimpse_dataset, ComponentState, GlimpseDataset,
    GlimpseObjective, InitConfig, LearnProblem, LearnState, OptimizerConfig, SamplingProtocol, Trainable,
};
use glimpse_core::models::{
    component_entropy, fit_fa_em, fit_mofa_x, marginal_loglik, max_principal_angle, posterior, project, FaModel,
    MofaModel, Posterior, ProjectedFa, ProjectedMixture,
};
use glimpse_core::numerics::{discrete_entropy, logsumexp, LN_2PI};
use glimpse_core::retina::{
    build_layout, enumerate_offsets, frey_offsets, mnist_offsets, place, place_all, Offset, RetinaSpec,
    RetinalTransform,
};
use glimpse_core::{Error, Result};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::any;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Pass,
    Fail,
    Unavailable,
}

struct Verdict {
    status: Status,
    detail: String,
}

impl Verdict {
    fn new(ok: bool, detail: impl Into<String>) -> Self {
        Self {
            status: if ok { Status::Pass } else { Status::Fail },
            detail: detail.into(),
        }
    }

    fn unavailable(detail: impl Into<String>) -> Self {
        Self {
            status: Status::Unavailable,
            detail: detail.into(),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn random_fa(rng: &mut ChaCha8Rng, d: usize, k: usize) -> FaModel {
    FaModel::new(
        DVector::from_fn(d, |_, _| 0.3 * normal(rng)),
        DMatrix::from_fn(d, k, |_, _| 0.5 * normal(rng)),
        DVector::from_fn(d, |_, _| uniform(rng, 0.05, 0.15)),
    )
    .unwrap()
}

/// An offset that leaves at least one cell of the grid on the image.
fn sighted_offset(
    rng: &mut ChaCha8Rng,
    layout: &glimpse_core::CellLayout,
    side: usize,
    rows: usize,
    cols: usize,
) -> (Offset, RetinalTransform) {
    let g = side as i32;
    loop {
        let o = Offset::new(
            rng.random_range(1 - g..rows as i32),
            rng.random_range(1 - g..cols as i32),
        );
        let rt = place(layout, rows, cols, o);
        if !rt.is_blind() {
            return (o, rt);
        }
    }
}

// ---------------------------------------------------------------- 1

fn gradients() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let instances = 60;
    let mut worst = [0.0f64; 3];
    let specs = [
        RetinaSpec::uniform(2),
        RetinaSpec::uniform(3),
        RetinaSpec {
            grid_side: 4,
            rings: vec![(2, 2)],
            center_cell: 1,
        },
    ];
    for i in 0..instances {
        let rows = rng.random_range(2..=4);
        let cols = rng.random_range(2..=4);
        let d = rows * cols;
        let k = rng.random_range(1..=4);
        let m = rng.random_range(1..=3);
        let spec = specs[i % specs.len()].clone();
        let layout = build_layout(&spec)?;
        let offsets: Vec<Offset> = (0..rng.random_range(1..=4))
            .map(|_| sighted_offset(&mut rng, &layout, spec.grid_side, rows, cols).0)
            .collect();
        let truth = random_fa(&mut rng, d, k.min(d));
        let images = images_from(&mut rng, &truth, 8, rows, cols);
        let n = rng.random_range(5..=20);
        let data = sample_glimpse_dataset(&images, &spec, &offsets, SamplingProtocol::Uniform { n }, i as u64)?;
        let grouped = i % 2 == 1;
        let problem = LearnProblem::new(&data, grouped)?;
        let rts = data.transforms()?;
        let state = LearnState {
            components: (0..m)
                .map(|_| ComponentState {
                    mean: DVector::from_fn(d, |_, _| 0.3 * normal(&mut rng)),
                    loadings: DMatrix::from_fn(d, k, |_, _| 0.5 * normal(&mut rng)),
                    log_noise: rts
                        .iter()
                        .map(|rt| DVector::from_fn(rt.active_count(), |_, _| -1.5 + 0.3 * normal(&mut rng)))
                        .collect(),
                })
                .collect(),
            logits: (0..m).map(|_| normal(&mut rng)).collect(),
        };
        let blocks = [
            Trainable {
                loadings: true,
                noise: false,
                weights: false,
            },
            Trainable {
                loadings: false,
                noise: true,
                weights: false,
            },
            Trainable {
                loadings: false,
                noise: false,
                weights: true,
            },
        ];
        for (b, tr) in blocks.into_iter().enumerate() {
            if b == 2 && m == 1 {
                continue;
            }
            let obj = GlimpseObjective {
                problem: &problem,
                template: state.clone(),
                trainable: tr,
            };
            worst[b] = worst[b].max(gradient_error(&obj, &obj.initial_point()));
        }
    }
    let ok = worst.iter().all(|&e| e < 1e-6);
    Ok(Verdict::new(
        ok,
        format!(
            "{instances} instances, worst relative error W {:.1e}, psi {:.1e}, mixture {:.1e} (limit 1e-6)",
            worst[0], worst[1], worst[2]
        ),
    ))
}

// ---------------------------------------------------------------- 2

fn dense_condition(szz: &DMatrix<f64>, szy: &DMatrix<f64>, syy: &DMatrix<f64>, r: &DVector<f64>) -> Posterior {
    let chol = syy.clone().cholesky().expect("joint covariance is positive definite");
    Posterior {
        mean: szy * chol.solve(r),
        cov: szz - szy * chol.solve(&szy.transpose()),
    }
}

fn posterior_gap(a: &Posterior, b: &Posterior) -> f64 {
    (&a.mean - &b.mean).amax().max((&a.cov - &b.cov).amax())
}

/// Stacked loadings, noise and centred observations of glimpses `0..=upto`.
fn stacked(
    pfas: &[ProjectedFa],
    ys: &[DVector<f64>],
    upto: usize,
) -> (Vec<usize>, DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let dims: Vec<usize> = pfas[..=upto].iter().map(|p| p.mean.len()).collect();
    let total = dims.iter().sum();
    let k = pfas[0].loadings.ncols();
    let mut w = DMatrix::zeros(total, k);
    let mut psi = DVector::zeros(total);
    let mut r = DVector::zeros(total);
    let mut at = 0;
    for (p, y) in pfas[..=upto].iter().zip(ys) {
        let n = p.mean.len();
        w.rows_mut(at, n).copy_from(&p.loadings);
        psi.rows_mut(at, n).copy_from(&p.noise);
        r.rows_mut(at, n).copy_from(&(y - &p.mean));
        at += n;
    }
    (dims, w, psi, r)
}

/// Latent posterior after glimpses `0..=j` under `z_j = α z_{j−1} + noise`.
fn dense_lds(pfas: &[ProjectedFa], ys: &[DVector<f64>], j: usize, alpha: f64) -> Posterior {
    let (dims, w, psi, r) = stacked(pfas, ys, j);
    let k = w.ncols();
    let starts: Vec<usize> = dims
        .iter()
        .scan(0, |s, &d| {
            let here = *s;
            *s += d;
            Some(here)
        })
        .collect();
    let total = r.len();
    let mut syy = DMatrix::zeros(total, total);
    let mut szy = DMatrix::zeros(k, total);
    for i in 0..=j {
        let wi = w.rows(starts[i], dims[i]);
        szy.columns_mut(starts[i], dims[i])
            .copy_from(&(wi.transpose() * alpha.powi((j - i) as i32)));
        for l in 0..=j {
            let wl = w.rows(starts[l], dims[l]);
            let block = wi * wl.transpose() * alpha.powi(i.abs_diff(l) as i32);
            syy.view_mut((starts[i], starts[l]), (dims[i], dims[l]))
                .copy_from(&block);
        }
    }
    for (t, p) in psi.iter().enumerate() {
        syy[(t, t)] += p;
    }
    dense_condition(&DMatrix::identity(k, k), &szy, &syy, &r)
}

fn inference() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let instances = 150;
    let mut worst = [0.0f64; 3];
    let specs = [
        RetinaSpec::uniform(3),
        RetinaSpec {
            grid_side: 6,
            rings: vec![(2, 2)],
            center_cell: 1,
        },
    ];
    for i in 0..instances {
        let (rows, cols) = (rng.random_range(4..=6), rng.random_range(4..=7));
        let k = rng.random_range(1..=4);
        let spec = &specs[i % specs.len()];
        let layout = build_layout(spec)?;
        let fa = random_fa(&mut rng, rows * cols, k);
        let offsets: Vec<Offset> = (0..4)
            .map(|_| sighted_offset(&mut rng, &layout, spec.grid_side, rows, cols).0)
            .collect();
        let rts = place_all(&layout, rows, cols, &offsets);
        let j = rng.random_range(1..=3);
        let ids: Vec<usize> = (0..j).map(|_| rng.random_range(0..offsets.len())).collect();
        let pfas: Vec<ProjectedFa> = ids
            .iter()
            .map(|&a| {
                let noise = DVector::from_fn(rts[a].active_count(), |_, _| uniform(&mut rng, 0.05, 0.3));
                project(&fa, &rts[a], a, noise)
            })
            .collect::<Result<_>>()?;
        let ys: Vec<DVector<f64>> = pfas
            .iter()
            .map(|p| DVector::from_fn(p.mean.len(), |_, _| normal(&mut rng)))
            .collect();
        let seq = GlimpseSequence::new(
            pfas.iter()
                .zip(&ids)
                .zip(&ys)
                .map(|((p, &a), y)| Glimpse {
                    model: p,
                    transform: &rts[a],
                    values: y.clone(),
                })
                .collect(),
        )?;
        let eye = DMatrix::identity(k, k);

        let p0 = &pfas[0];
        let syy = &p0.loadings * p0.loadings.transpose() + DMatrix::from_diagonal(&p0.noise);
        let want = dense_condition(&eye, &p0.loadings.transpose(), &syy, &(&ys[0] - &p0.mean));
        worst[0] = worst[0].max(posterior_gap(&posterior(p0, &ys[0])?, &want));

        let (_, w, psi, r) = stacked(&pfas, &ys, j - 1);
        let syy = &w * w.transpose() + DMatrix::from_diagonal(&psi);
        let want = dense_condition(&eye, &w.transpose(), &syy, &r);
        worst[1] = worst[1].max(posterior_gap(&fused_posterior(&seq)?, &want));

        let alpha = if i % 10 == 0 {
            (i / 10 % 2) as f64
        } else {
            rng.random::<f64>()
        };
        for (step, got) in lds_filter(&seq, alpha)?.iter().enumerate() {
            worst[2] = worst[2].max(posterior_gap(got, &dense_lds(&pfas, &ys, step, alpha)));
        }
    }
    let ok = worst.iter().all(|&e| e < 1e-8);
    Ok(Verdict::new(
        ok,
        format!(
            "{instances} instances, max-abs gap posterior {:.1e}, fused {:.1e}, lds {:.1e} (limit 1e-8)",
            worst[0], worst[1], worst[2]
        ),
    ))
}

// ---------------------------------------------------------------- 3

fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draw `y = μ + W z + e` and return it with `z`.
fn draw(rng: &mut ChaCha8Rng, p: &ProjectedFa) -> (DVector<f64>, DVector<f64>) {
    let z = DVector::from_fn(p.loadings.ncols(), |_, _| normal(rng));
    let mut y = &p.mean + &p.loadings * &z;
    for (v, s) in y.iter_mut().zip(p.noise.iter()) {
        *v += s.sqrt() * normal(rng);
    }
    (y, z)
}

fn conditional_loglik(p: &ProjectedFa, y: &DVector<f64>, z: &DVector<f64>) -> f64 {
    let r = y - &p.mean - &p.loadings * z;
    r.iter()
        .zip(p.noise.iter())
        .map(|(r, s)| -0.5 * (LN_2PI + s.ln() + r * r / s))
        .sum()
}

fn eig() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut parts = Vec::new();
    let mut ok = true;

    // closed forms against a dense log-determinant
    let mut gap = 0.0f64;
    for _ in 0..200 {
        let k = rng.random_range(1..=4);
        let models: Vec<ProjectedFa> = (0..rng.random_range(1..=3))
            .map(|a| {
                let d = rng.random_range(1..=8);
                ProjectedFa {
                    offset_id: a,
                    mean: DVector::from_fn(d, |_, _| normal(&mut rng)),
                    loadings: DMatrix::from_fn(d, k, |_, _| normal(&mut rng)),
                    noise: DVector::from_fn(d, |_, _| uniform(&mut rng, 0.05, 1.0)),
                }
            })
            .collect();
        let refs: Vec<&ProjectedFa> = models.iter().collect();
        let mut precision = DMatrix::identity(k, k);
        for m in &models {
            let scaled = DMatrix::from_fn(m.loadings.nrows(), k, |r, c| m.loadings[(r, c)] / m.noise[r]);
            precision += m.loadings.transpose() * scaled;
        }
        let l = precision.cholesky().expect("precision is positive definite");
        let want = l.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        gap = gap.max((eig_fa_marginal_form(&refs)? - want).abs());
        gap = gap.max((eig_fa(&refs)? - want).abs());
    }
    ok &= gap < 1e-10;
    parts.push(format!(
        "closed forms within {gap:.1e} of dense half-logdet (limit 1e-10)"
    ));

    // nested Monte Carlo mutual information, D^y = 4, K = 2
    let p = ProjectedFa {
        offset_id: 0,
        mean: DVector::from_fn(4, |_, _| normal(&mut rng)),
        loadings: DMatrix::from_fn(4, 2, |_, _| 0.6 * normal(&mut rng)),
        noise: DVector::from_fn(4, |_, _| uniform(&mut rng, 0.3, 0.6)),
    };
    let exact = eig_fa(&[&p])?;
    let (outer, inner) = (100_000u64, 4_000);
    let samples: Vec<f64> = (0..outer)
        .into_par_iter()
        .map(|n| {
            let mut rng = rng_for(31, n);
            let (y, z) = draw(&mut rng, &p);
            let own = conditional_loglik(&p, &y, &z);
            let mut acc = 0.0;
            let mut zi = DVector::zeros(2);
            for _ in 0..inner {
                zi[0] = normal(&mut rng);
                zi[1] = normal(&mut rng);
                acc += (conditional_loglik(&p, &y, &zi) - own).exp();
            }
            -(acc / inner as f64).ln()
        })
        .collect();
    let (mc, se) = mean_and_se(&samples);
    let fa_ok = (mc - exact).abs() <= 3.0 * se;
    ok &= fa_ok;
    parts.push(format!(
        "eig_fa {exact:.4} vs nested MC {mc:.4} ± {se:.4} ({:.2} SE, {outer} outer × {inner} inner)",
        (mc - exact).abs() / se
    ));

    // mixture bound against MC with exact p(y), M = 2, D^y = 3, K = 1
    let comps: Vec<ProjectedFa> = [-0.8, 0.8]
        .iter()
        .map(|&shift| ProjectedFa {
            offset_id: 0,
            mean: DVector::from_fn(3, |_, _| shift + 0.3 * normal(&mut rng)),
            loadings: DMatrix::from_fn(3, 1, |_, _| 0.7 * normal(&mut rng)),
            noise: DVector::from_fn(3, |_, _| uniform(&mut rng, 0.2, 0.5)),
        })
        .collect();
    let weights = [0.35, 0.65];
    let bound = eig_mofa_upper(&[vec![&comps[0]], vec![&comps[1]]], &weights)?;
    let samples: Vec<f64> = (0..outer)
        .into_par_iter()
        .map(|n| {
            let mut rng = rng_for(32, n);
            let c = usize::from(rng.random::<f64>() >= weights[0]);
            let (y, z) = draw(&mut rng, &comps[c]);
            let terms: Vec<f64> = comps
                .iter()
                .zip(weights)
                .map(|(m, w)| w.ln() + marginal_loglik(m, &y).expect("valid component"))
                .collect();
            conditional_loglik(&comps[c], &y, &z) - logsumexp(&terms)
        })
        .collect();
    let (mc, se) = mean_and_se(&samples);
    let mix_ok = bound >= mc - 3.0 * se;
    ok &= mix_ok;
    parts.push(format!("mixture bound {bound:.4} vs MC {mc:.4} ± {se:.4}"));

    // identical components
    let mut worst = 0.0f64;
    for m in 2..=5 {
        let pi = vec![1.0 / m as f64; m];
        let comps = vec![vec![&p]; m];
        let got = eig_mofa_upper(&comps, &pi)?;
        worst = worst.max((got - (exact + discrete_entropy(&pi))).abs());
    }
    ok &= worst == 0.0;
    parts.push(format!("identical components off eig_fa + H(pi) by {worst:e}"));
    Ok(Verdict::new(ok, parts.join("; ")))
}

// ---------------------------------------------------------------- 4

fn entropy_anchor() -> Result<Verdict> {
    let h = component_entropy(&[0.99, 0.01]);
    let shown = format!("{h:.4}");
    Ok(Verdict::new(
        shown == "0.0808",
        format!("component_entropy(0.99, 0.01) = {h:.6} bits, shown {shown}"),
    ))
}

// ---------------------------------------------------------------- data

fn env_path(var: &str) -> Option<PathBuf> {
    std::env::var_os(var).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn idx_images(path: &Path) -> Result<ImageSet> {
    match read_idx(path)? {
        Idx::Images(s) => Ok(s),
        Idx::Labels(_) => Err(Error::InvalidArgument(format!("{} holds labels", path.display()))),
    }
}

fn idx_labels(path: &Path) -> Result<Vec<u8>> {
    match read_idx(path)? {
        Idx::Labels(l) => Ok(l),
        Idx::Images(_) => Err(Error::InvalidArgument(format!("{} holds images", path.display()))),
    }
}

/// Raw digit-2 training and test images.
fn mnist_twos(dir: &Path) -> Result<(ImageSet, ImageSet)> {
    let pick = |images: &str, labels: &str| -> Result<ImageSet> {
        filter_label(&idx_images(&dir.join(images))?, &idx_labels(&dir.join(labels))?, 2)
    };
    Ok((
        pick("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?,
        pick("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?,
    ))
}

/// Training set normalized onto `[−1, 1]`, test set with the same map.
fn normalized_pair(train: &ImageSet, test: &ImageSet) -> Result<(ImageSet, ImageSet)> {
    let train = normalize(train, -1.0, 1.0)?;
    let test = normalize_with(test, train.normalization.expect("normalized"))?;
    Ok((train, test))
}

/// Frey frames, normalized and split 80:20.
fn frey(path: &Path) -> Result<(ImageSet, ImageSet)> {
    let bytes = std::fs::read(path).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    let set = if bytes.starts_with(b"GLIM") {
        match decode_glim(&bytes)? {
            Payload::Images(s) => s,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "{} does not hold images",
                    path.display()
                )))
            }
        }
    } else {
        match parse_idx(&bytes, &path.display().to_string())? {
            Idx::Images(s) => s,
            Idx::Labels(_) => return Err(Error::InvalidArgument(format!("{} holds labels", path.display()))),
        }
    };
    if (set.rows, set.cols) != (28, 20) {
        return Err(Error::InvalidArgument(format!(
            "expected 28 × 20 frames, found {} × {}",
            set.rows, set.cols
        )));
    }
    let set = match set.normalization {
        Some(_) => set,
        None => normalize(&set, -1.0, 1.0)?,
    };
    split(&set, 0.8, 7)
}

/// Factor converting RMSE in normalized units to 8-bit intensity / 255.
fn unit_scale(n: &Normalization) -> f64 {
    (n.src_max - n.src_min) / (n.hi - n.lo) / 255.0
}

fn projected(mixture: MofaModel, rows: usize, cols: usize, offsets: &[Offset]) -> Result<ProjectedMixture> {
    let layout = build_layout(&RetinaSpec::default())?;
    ProjectedMixture::with_initial_noise(mixture, place_all(&layout, rows, cols, offsets))
}

struct DesignOutcome {
    best: Vec<Offset>,
    best_eig: f64,
    target_eig: f64,
    bed: Design,
}

impl DesignOutcome {
    fn ok(&self) -> bool {
        self.target_eig >= 0.99 * self.best_eig
    }

    fn describe(&self) -> String {
        let best: Vec<String> = self.best.iter().map(|o| o.to_string()).collect();
        format!(
            "best design {} at {:.2} bits, target pair at {:.2} bits ({:.2}% below)",
            best.join(" "),
            self.best_eig / std::f64::consts::LN_2,
            self.target_eig / std::f64::consts::LN_2,
            100.0 * (1.0 - self.target_eig / self.best_eig)
        )
    }
}

fn design_pair(pm: &ProjectedMixture, offsets: &[Offset], target: [Offset; 2]) -> Result<DesignOutcome> {
    let dm = DesignModel::new(pm)?;
    let ranked = search_exhaustive(&dm, 2)?;
    let mut want: Vec<usize> = target
        .iter()
        .map(|t| offsets.iter().position(|o| o == t).expect("target offset in table"))
        .collect();
    want.sort_unstable();
    let target_eig = ranked
        .iter()
        .find(|s| s.design.0 == want)
        .expect("target pair scored")
        .eig_nats;
    let best = &ranked[0];
    Ok(DesignOutcome {
        best: best.design.0.iter().map(|&a| offsets[a]).collect(),
        best_eig: best.eig_nats,
        target_eig,
        bed: order_greedily(&dm, &best.design)?,
    })
}

/// Ordering checks shared by the MNIST and Frey protocols.
fn ordering(report: &EvalReport) -> (bool, bool, String) {
    let bed = report.bed.mean_rmse();
    let random = report.random.mean_rmse();
    let full = report.full_rmse();
    let monotone = full <= bed[2] && bed[2] <= bed[1] && bed[1] <= bed[0];
    let beats = bed[1] < random[1] && bed[2] < random[2];
    let text = format!(
        "RMSE BED {:.4}/{:.4}/{:.4}, random {:.4}/{:.4}/{:.4}, full {:.4}",
        bed[0], bed[1], bed[2], random[0], random[1], random[2], full
    );
    (monotone, beats, text)
}

fn sign_tests(report: &EvalReport, limit: f64) -> (bool, String) {
    let mut ok = true;
    let mut text = Vec::new();
    for (f, t) in report.sign_tests.iter().enumerate() {
        let p = t.p_one_sided.unwrap_or(1.0);
        ok &= 2 * t.wins_a > t.n_effective && p < limit;
        text.push(format!("{} fix {}/{} p {:.2e}", f + 1, t.wins_a, t.n_effective, p));
    }
    (ok, text.join(", "))
}

// ---------------------------------------------------------------- 5

fn mnist_protocol() -> Result<Verdict> {
    let Some(dir) = env_path("GLIMPSE_MNIST_DIR") else {
        return Ok(Verdict::unavailable(
            "not evaluated: data unavailable (set GLIMPSE_MNIST_DIR)",
        ));
    };
    let (train, test) = mnist_twos(&dir)?;
    let counts_ok = train.count() == 5958 && test.count() == 1032;
    let (train, test) = normalized_pair(&train, &test)?;
    let fit = fit_mofa_x(&train.to_matrix(), 70, 10, 0)?;
    let offsets = mnist_offsets();
    let pm = projected(fit.model, 28, 28, &offsets)?;
    let design = design_pair(&pm, &offsets, [Offset::new(0, 4), Offset::new(8, 4)])?;
    let report = run_protocol(
        &pm,
        &test,
        &ProtocolConfig {
            bed: design.bed.clone(),
            seed: 0,
            threshold_bits: ENTROPY_THRESHOLD_BITS,
        },
    )?;
    let (monotone, beats, rmse_text) = ordering(&report);
    let s = unit_scale(&train.normalization.expect("normalized"));
    let bed = report.bed.mean_rmse();
    let (zero, two) = (bed[0] * s, bed[2] * s);
    let close = (two - 0.1078).abs() <= 0.02 && (zero - 0.2525).abs() <= 0.01;
    let (signs, sign_text) = sign_tests(&report, 1e-20);
    let ok = counts_ok && design.ok() && monotone && beats && close && signs;
    Ok(Verdict::new(
        ok,
        format!(
            "{} train / {} test; {}; {rmse_text}; on the [0,1] intensity scale 0 fix {zero:.4} (0.2525 ± 0.01), 2 fix {two:.4} (0.1078 ± 0.02); (a) {} (b) {} (c) {} (d) {} [{sign_text}]",
            train.count(),
            test.count(),
            design.describe(),
            pass_word(monotone),
            pass_word(beats),
            pass_word(close),
            pass_word(signs)
        ),
    ))
}

fn pass_word(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}

// ---------------------------------------------------------------- 6

struct LearnRun {
    baseline: f64,
    init: f64,
    init_noise_fit: f64,
    learned: f64,
    state: LearnState,
}

impl LearnRun {
    fn ok(&self) -> bool {
        self.learned > self.init
            && self.learned > self.baseline
            && self.baseline < self.init_noise_fit
            && self.init_noise_fit < self.learned
    }

    fn describe(&self) -> String {
        format!(
            "LL/example baseline {:.2}, init {:.2}, init with fitted noise {:.2}, optimized {:.2}",
            self.baseline, self.init, self.init_noise_fit, self.learned
        )
    }
}

/// Initialize from glimpses, fit the glimpse noise with W fixed, then
/// optimize everything.
fn learn(data: &GlimpseDataset, k: usize) -> Result<LearnRun> {
    let problem = LearnProblem::new(data, false)?;
    let init = init_from_glimpses(data, k, &InitConfig::default())?;
    let cfg = OptimizerConfig::default();
    let noise = optimize(init.state, &problem, &cfg, Trainable::noise_only())?;
    let full = optimize(noise.state.clone(), &problem, &cfg, Trainable::default())?;
    Ok(LearnRun {
        baseline: independent_gaussian_loglik(data)? / data.len() as f64,
        init: noise.initial_per_example(),
        init_noise_fit: noise.final_per_example(),
        learned: full.final_per_example(),
        state: full.state,
    })
}

fn learning() -> Result<Verdict> {
    let (truth, data) = synthetic_learning_problem(21);
    let run = learn(&data, 5)?;
    let angle = max_principal_angle(&run.state.components[0].loadings, &truth.loadings).to_degrees();
    let synthetic_ok = run.ok() && angle < 5.0;
    let mut text = format!("synthetic: {}, max principal angle {angle:.2} deg", run.describe());

    let real = if let Some(path) = env_path("GLIMPSE_FREY_PATH") {
        let (train, _) = frey(&path)?;
        let data = sample_glimpse_dataset(
            &train,
            &RetinaSpec::default(),
            &frey_offsets(),
            SamplingProtocol::Stratified { per_offset: 100 },
            1,
        )?;
        Some(("Frey", learn(&data, 43)?))
    } else if let Some(dir) = env_path("GLIMPSE_MNIST_DIR") {
        let (train, test) = mnist_twos(&dir)?;
        let (train, _) = normalized_pair(&train, &test)?;
        let offsets = enumerate_offsets(&[0, 4, 8], &[0, 4, 8]);
        let data = sample_glimpse_dataset(
            &train,
            &RetinaSpec::default(),
            &offsets,
            SamplingProtocol::Uniform { n: train.count() },
            1,
        )?;
        Some(("MNIST 2s, central offsets", learn(&data, 10)?))
    } else {
        None
    };
    let real_ok = match &real {
        Some((name, run)) => {
            text.push_str(&format!("; {name}: {}", run.describe()));
            run.ok()
        }
        None => {
            text.push_str("; real data not evaluated: data unavailable");
            true
        }
    };
    Ok(Verdict::new(synthetic_ok && real_ok, text))
}

// ---------------------------------------------------------------- 7

fn frey_protocol() -> Result<Verdict> {
    let Some(path) = env_path("GLIMPSE_FREY_PATH") else {
        return Ok(Verdict::unavailable(
            "not evaluated: data unavailable (set GLIMPSE_FREY_PATH)",
        ));
    };
    let (train, test) = frey(&path)?;
    let fit = fit_fa_em(&train.to_matrix(), 43, 500, 1e-7)?;
    let offsets = frey_offsets();
    let pm = projected(MofaModel::single(fit.model), 28, 20, &offsets)?;
    let design = design_pair(&pm, &offsets, [Offset::new(-4, 0), Offset::new(8, 0)])?;
    let report = run_protocol(
        &pm,
        &test,
        &ProtocolConfig {
            bed: design.bed.clone(),
            seed: 0,
            threshold_bits: ENTROPY_THRESHOLD_BITS,
        },
    )?;
    let (monotone, beats, rmse_text) = ordering(&report);
    let (signs, sign_text) = sign_tests(&report, 1e-10);
    Ok(Verdict::new(
        design.ok() && monotone && beats && signs,
        format!(
            "{} train / {} test; {}; {rmse_text}; {sign_text}",
            train.count(),
            test.count(),
            design.describe()
        ),
    ))
}

// ---------------------------------------------------------------- 8

fn round_trips(payload: &Payload) -> Result<bool> {
    let bytes = encode_glim(payload)?;
    let back = decode_glim(&bytes)?;
    let mut corrupt = bytes.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x40;
    Ok(back == *payload && encode_glim(&back)? == bytes && decode_glim(&corrupt).is_err())
}

fn formats() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut parts = Vec::new();

    let raw = ImageSet::new(
        3,
        4,
        (0..24).map(|_| rng.random_range(0..=255) as f64).collect(),
        "frames µ/ü",
    )?;
    let images = normalize(&raw, -1.0, 1.0)?;
    let truth = random_fa(&mut rng, 12, 2);
    let glimpses = sample_glimpse_dataset(
        &images_from(&mut rng, &truth, 6, 3, 4),
        &RetinaSpec::uniform(2),
        &[Offset::new(0, 0), Offset::new(1, 2), Offset::new(-1, 3)],
        SamplingProtocol::Stratified { per_offset: 2 },
        3,
    )?;
    let mixture = MofaModel::new(
        vec![random_fa(&mut rng, 12, 2), random_fa(&mut rng, 12, 2)],
        vec![0.3, 0.7],
    )?;
    let offsets = vec![Offset::new(0, 0), Offset::new(-1, 2)];
    let rts = place_all(&build_layout(&RetinaSpec::uniform(2))?, 3, 4, &offsets);
    let noise_y = ProjectedMixture::with_initial_noise(mixture.clone(), rts)?.noise_table();
    let bundle = ModelBundle {
        mixture,
        retina: RetinaSpec::uniform(2),
        rows: 3,
        cols: 4,
        offsets,
        noise_y,
        metadata: r#"{"note":"round trip"}"#.into(),
    };
    let mut bare = bundle.clone();
    bare.noise_y.clear();
    let payloads = [
        ("raw images", Payload::Images(raw)),
        ("normalized images", Payload::Images(images)),
        ("glimpses", Payload::Glimpses(glimpses)),
        ("model", Payload::Model(bundle)),
        ("model without y noise", Payload::Model(bare)),
    ];
    let mut glim_ok = true;
    for (name, p) in &payloads {
        let ok = round_trips(p)?;
        glim_ok &= ok;
        if !ok {
            parts.push(format!("GLIM {name} round trip FAIL"));
        }
    }
    parts.push(format!(
        "GLIM {} payloads bit-exact and checksummed: {}",
        payloads.len(),
        pass_word(glim_ok)
    ));

    let pgm = encode_pgm(2, 2, &[-1.0, 1.0, 0.0, 0.5], None)?;
    let masked = encode_pgm(2, 2, &[-1.0, 1.0, 0.0, 0.5], Some(&[false, true, false, false]))?;
    let header = b"P5\n2 2\n255\n";
    let pgm_ok = pgm[..header.len()] == header[..]
        && pgm[header.len()..] == [0, 255, 128, 191]
        && masked[header.len()..] == [0, 255, 128, 191]
        && encode_pgm(1, 2, &[-1.0, -1.0], Some(&[true, false]))? == b"P5\n2 1\n255\n\xff\x00";
    parts.push(format!("PGM bytes: {}", pass_word(pgm_ok)));

    let mut idx = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
    idx.extend(0u8..12);
    let parsed_ok = matches!(
        parse_idx(&idx, "bytes")?,
        Idx::Images(s) if s.count() == 2 && s.rows == 2 && s.cols == 3 && s.data == (0..12).map(f64::from).collect::<Vec<_>>()
    ) && matches!(parse_idx(&[0, 0, 8, 1, 0, 0, 0, 2, 7, 2], "bytes")?, Idx::Labels(l) if l == [7, 2])
        && parse_idx(&idx[..idx.len() - 1], "bytes").is_err();
    parts.push(format!("IDX parsing: {}", pass_word(parsed_ok)));

    let mut ok = glim_ok && pgm_ok && parsed_ok;
    match env_path("GLIMPSE_MNIST_DIR") {
        Some(dir) => {
            let (train, test) = mnist_twos(&dir)?;
            let counts = train.count() == 5958 && test.count() == 1032;
            ok &= counts;
            parts.push(format!(
                "MNIST digit 2: {} / {} ({})",
                train.count(),
                test.count(),
                pass_word(counts)
            ));
        }
        None => parts.push("MNIST counts not evaluated: data unavailable".into()),
    }
    Ok(Verdict::new(ok, parts.join("; ")))
}

// ---------------------------------------------------------------- 9

fn retina_properties() -> Result<Verdict> {
    let cases = 1000;
    let runner = || {
        TestRunner::new_with_rng(
            Config {
                failure_persistence: None,
                ..Config::with_cases(cases)
            },
            TestRng::deterministic_rng(RngAlgorithm::ChaCha),
        )
    };
    let mut failures = Vec::new();
    if let Err(e) = runner().run(&spec_strategy(), |s| check_tiling(&s)) {
        failures.push(format!("tiling: {e}"));
    }
    if let Err(e) = runner().run(&case_strategy(), |c| check_masks(&c)) {
        failures.push(format!("row-stochastic/active mask: {e}"));
    }
    let strategy = (case_strategy(), -3.0f64..3.0, -3.0f64..3.0, any::<u64>());
    if let Err(e) = runner().run(&strategy, |(c, a, b, s)| check_linearity(&c, a, b, s)) {
        failures.push(format!("linearity: {e}"));
    }
    let detail = if failures.is_empty() {
        format!("{cases} cases each for tiling, row-stochasticity with active masks, linearity with adjoint")
    } else {
        failures.join("; ")
    };
    Ok(Verdict::new(failures.is_empty(), detail))
}

// ----------------------------------------------------------------

type Check = fn() -> Result<Verdict>;

fn main() -> ExitCode {
    let criteria: [(u8, &str, Option<u64>, Check); 9] = [
        (1, "gradient correctness", Some(30), gradients),
        (2, "inference oracle", Some(10), inference),
        (3, "EIG correctness", Some(120), eig),
        (4, "mixture-entropy anchor", None, entropy_anchor),
        (5, "MNIST 2s end-to-end", Some(900), mnist_protocol),
        (6, "learning ordering", Some(300), learning),
        (7, "Frey protocol", None, frey_protocol),
        (8, "format round-trips", None, formats),
        (9, "retina properties", Some(10), retina_properties),
    ];
    let mut failed = 0;
    for (id, name, limit, check) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check);
        let took = start.elapsed();
        let mut v = match outcome {
            Ok(Ok(v)) => v,
            Ok(Err(e)) => Verdict::new(false, format!("error: {e}")),
            Err(_) => Verdict::new(false, "panicked"),
        };
        if let Some(secs) = limit {
            if v.status != Status::Unavailable && took > Duration::from_secs(secs) {
                v.status = Status::Fail;
                v.detail.push_str(&format!("; took longer than {secs} s"));
            }
        }
        let label = match v.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Unavailable => "SKIP",
        };
        failed += usize::from(v.status == Status::Fail);
        println!(
            "criterion {id} ({name}): {label} [{:.1} s] {}",
            took.as_secs_f64(),
            v.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
