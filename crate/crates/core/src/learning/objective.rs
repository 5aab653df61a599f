use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::learning::optim::{maximize, Objective, OptimizerConfig, Status, TraceRow};
use crate::learning::{GlimpseDataset, LearnState};
use crate::numerics::{logsumexp, LowRankCov, LN_2PI};
use crate::retina::RetinalTransform;

/// Records organized for likelihood evaluation.
#[derive(Debug, Clone)]
pub struct LearnProblem<'a> {
    pub data: &'a GlimpseDataset,
    pub transforms: Vec<RetinalTransform>,
    /// Records scored on their own, listed per offset.
    by_offset: Vec<Vec<usize>>,
    /// Records of one source image scored jointly as a stacked observation.
    groups: Vec<Vec<usize>>,
}

impl<'a> LearnProblem<'a> {
    /// With `grouped`, all glimpses of one source image form a single
    /// stacked observation; otherwise every record is independent.
    pub fn new(data: &'a GlimpseDataset, grouped: bool) -> Result<Self> {
        data.validate()?;
        let transforms = data.transforms()?;
        let mut by_offset = vec![Vec::new(); data.offsets.len()];
        let mut groups = Vec::new();
        if grouped {
            let mut by_source: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, r) in data.records.iter().enumerate() {
                by_source.entry(r.source).or_default().push(i);
            }
            for (_, ids) in by_source {
                if ids.len() == 1 {
                    by_offset[data.records[ids[0]].offset_id].push(ids[0]);
                } else {
                    groups.push(ids);
                }
            }
        } else {
            for (i, r) in data.records.iter().enumerate() {
                by_offset[r.offset_id].push(i);
            }
        }
        Ok(Self {
            data,
            transforms,
            by_offset,
            groups,
        })
    }

    /// Number of likelihood terms.
    pub fn units(&self) -> usize {
        self.by_offset.iter().map(Vec::len).sum::<usize>() + self.groups.len()
    }

    fn check_state(&self, state: &LearnState) -> Result<()> {
        if state.components.is_empty() {
            return Err(Error::InvalidArgument("learning state has no components".into()));
        }
        check_dim("mixture logits", state.components.len(), state.logits.len())?;
        let d = self.data.rows * self.data.cols;
        let k = state.components[0].loadings.ncols();
        for c in &state.components {
            check_dim("state mean", d, c.mean.len())?;
            check_dim("state loadings rows", d, c.loadings.nrows())?;
            check_dim("state loadings columns", k, c.loadings.ncols())?;
            check_dim("state noise offsets", self.transforms.len(), c.log_noise.len())?;
            for (rt, t) in self.transforms.iter().zip(&c.log_noise) {
                check_dim("state noise length", rt.active_count(), t.len())?;
            }
        }
        Ok(())
    }

    fn offset_used(&self) -> Vec<bool> {
        let mut used: Vec<bool> = self.by_offset.iter().map(|v| !v.is_empty()).collect();
        for g in &self.groups {
            for &i in g {
                used[self.data.records[i].offset_id] = true;
            }
        }
        used
    }
}

/// Derivatives of the log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    /// `∂L/∂W` per component.
    pub loadings: Vec<DMatrix<f64>>,
    /// `∂L/∂t` per component and offset, with `ψ = exp(t)`.
    pub log_noise: Vec<Vec<DVector<f64>>>,
    /// `∂L/∂logits`.
    pub logits: Vec<f64>,
}

/// Projected parameters of one component at one offset.
struct Cache {
    mean: DVector<f64>,
    loadings: DMatrix<f64>,
    noise: DVector<f64>,
    cov: LowRankCov,
}

fn build_caches(state: &LearnState, problem: &LearnProblem) -> Result<Vec<Vec<Option<Cache>>>> {
    let used = problem.offset_used();
    let m_count = state.components.len();
    let a_count = problem.transforms.len();
    let pairs: Vec<(usize, usize)> = (0..m_count).flat_map(|m| (0..a_count).map(move |a| (m, a))).collect();
    let flat = pairs
        .par_iter()
        .map(|&(m, a)| {
            if !used[a] {
                return Ok(None);
            }
            let c = &state.components[m];
            let rt = &problem.transforms[a];
            let loadings = rt.apply_matrix(&c.loadings)?;
            let noise = c.log_noise[a].map(f64::exp);
            let cov = LowRankCov::new(&loadings, &noise).map_err(Error::at_offset(a))?;
            Ok(Some(Cache {
                mean: rt.apply(c.mean.as_slice())?,
                loadings,
                noise,
                cov,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut it = flat.into_iter();
    Ok((0..m_count).map(|_| it.by_ref().take(a_count).collect()).collect())
}

/// `M⁻¹ R` for a batch of centered glimpses stored as columns.
fn solve_batch(cov: &LowRankCov, r: &DMatrix<f64>) -> DMatrix<f64> {
    let b = cov.scaled_loadings();
    let mut pr = r.clone();
    // Ψ⁻¹ R − B A⁻¹ Bᵀ R with B = Ψ⁻¹ W
    let t = cov.inner().solve_matrix(&b.tr_mul(r));
    let noise_inv = cov.inverse_noise();
    for (mut row, p) in pr.row_iter_mut().zip(noise_inv.iter()) {
        row *= *p;
    }
    pr - b * t
}

/// Per (component, offset) batch results for independent records.
struct Batch {
    s: DMatrix<f64>,
    ll: Vec<f64>,
}

fn centered_batch(problem: &LearnProblem, ids: &[usize], mean: &DVector<f64>) -> DMatrix<f64> {
    let dy = mean.len();
    let mut r = DMatrix::zeros(dy, ids.len());
    for (j, &i) in ids.iter().enumerate() {
        let v = &problem.data.records[i].values;
        for d in 0..dy {
            r[(d, j)] = v[d] - mean[d];
        }
    }
    r
}

/// Per-glimpse pieces of one stacked observation under one component.
struct GroupTerm {
    ll: f64,
    /// `(offset, ∂log p/∂W_a, ∂log p/∂ψ_a)` blocks.
    blocks: Vec<(usize, DMatrix<f64>, DVector<f64>)>,
}

fn group_term(problem: &LearnProblem, caches: &[Option<Cache>], ids: &[usize], with_grad: bool) -> Result<GroupTerm> {
    let recs: Vec<_> = ids.iter().map(|&i| &problem.data.records[i]).collect();
    let total: usize = recs.iter().map(|r| r.values.len()).sum();
    let k = caches.iter().flatten().next().map(|c| c.loadings.ncols()).unwrap_or(0);
    let mut w = DMatrix::zeros(total, k);
    let mut psi = DVector::zeros(total);
    let mut r = DVector::zeros(total);
    let mut at = 0;
    for rec in &recs {
        let c = caches[rec.offset_id].as_ref().expect("cache for used offset");
        let n = rec.values.len();
        w.rows_mut(at, n).copy_from(&c.loadings);
        psi.rows_mut(at, n).copy_from(&c.noise);
        for d in 0..n {
            r[at + d] = rec.values[d] - c.mean[d];
        }
        at += n;
    }
    let cov = LowRankCov::new(&w, &psi).map_err(Error::at_offset(recs[0].offset_id))?;
    let s = cov.solve(&r);
    let ll = -0.5 * (total as f64 * LN_2PI + cov.logdet() + r.dot(&s));
    let mut blocks = Vec::new();
    if with_grad {
        let u = w.tr_mul(&s);
        let mw = cov.solve_loadings();
        let idiag = cov.inverse_diagonal();
        let mut at = 0;
        for rec in &recs {
            let n = rec.values.len();
            let sb = s.rows(at, n);
            let dw = sb * u.transpose() - mw.rows(at, n);
            let dpsi = DVector::from_fn(n, |d, _| 0.5 * sb[d] * sb[d] - 0.5 * idiag[at + d]);
            blocks.push((rec.offset_id, dw, dpsi));
            at += n;
        }
    }
    Ok(GroupTerm { ll, blocks })
}

/// Log-likelihood and, optionally, its gradient.
pub fn evaluate(state: &LearnState, problem: &LearnProblem, with_grad: bool) -> Result<(f64, Option<Gradient>)> {
    problem.check_state(state)?;
    let caches = build_caches(state, problem)?;
    let m_count = state.components.len();
    let a_count = problem.transforms.len();
    let weights = state.weights();
    let log_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();

    // independent records, batched per (component, offset)
    let pairs: Vec<(usize, usize)> = (0..m_count)
        .flat_map(|m| (0..a_count).map(move |a| (m, a)))
        .filter(|&(_, a)| !problem.by_offset[a].is_empty())
        .collect();
    let batches: Vec<Batch> = pairs
        .par_iter()
        .map(|&(m, a)| {
            let c = caches[m][a].as_ref().unwrap();
            let ids = &problem.by_offset[a];
            let r = centered_batch(problem, ids, &c.mean);
            let s = solve_batch(&c.cov, &r);
            let base = c.cov.dim() as f64 * LN_2PI + c.cov.logdet();
            let ll = (0..ids.len())
                .map(|j| -0.5 * (base + r.column(j).dot(&s.column(j))))
                .collect();
            Batch { s, ll }
        })
        .collect();
    let mut batch_of = vec![vec![usize::MAX; a_count]; m_count];
    for (b, &(m, a)) in pairs.iter().enumerate() {
        batch_of[m][a] = b;
    }

    let mut total = 0.0;
    // responsibilities per offset block: gamma[a][j][m]
    let mut gamma: Vec<Vec<Vec<f64>>> = vec![Vec::new(); a_count];
    for a in 0..a_count {
        for j in 0..problem.by_offset[a].len() {
            let terms: Vec<f64> = (0..m_count).map(|m| log_w[m] + batches[batch_of[m][a]].ll[j]).collect();
            let lse = logsumexp(&terms);
            if !lse.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "record {} has zero density under every component",
                    problem.by_offset[a][j]
                )));
            }
            total += lse;
            gamma[a].push(terms.iter().map(|t| (t - lse).exp()).collect());
        }
    }

    // stacked groups
    let group_terms: Vec<Vec<GroupTerm>> = problem
        .groups
        .par_iter()
        .map(|ids| {
            (0..m_count)
                .map(|m| group_term(problem, &caches[m], ids, with_grad))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut group_gamma = Vec::with_capacity(group_terms.len());
    for gt in &group_terms {
        let terms: Vec<f64> = (0..m_count).map(|m| log_w[m] + gt[m].ll).collect();
        let lse = logsumexp(&terms);
        if !lse.is_finite() {
            return Err(Error::InvalidArgument(
                "a glimpse group has zero density under every component".into(),
            ));
        }
        total += lse;
        group_gamma.push(terms.iter().map(|t| (t - lse).exp()).collect::<Vec<f64>>());
    }

    if !with_grad {
        return Ok((total, None));
    }

    let mut logits = vec![0.0; m_count];
    for per_offset in &gamma {
        for g in per_offset {
            for m in 0..m_count {
                logits[m] += g[m] - weights[m];
            }
        }
    }
    for g in &group_gamma {
        for m in 0..m_count {
            logits[m] += g[m] - weights[m];
        }
    }

    // ∂L/∂W_a and ∂L/∂ψ_a per (component, offset)
    let all_pairs: Vec<(usize, usize)> = (0..m_count).flat_map(|m| (0..a_count).map(move |a| (m, a))).collect();
    let blocks: Vec<(DMatrix<f64>, DVector<f64>)> = all_pairs
        .par_iter()
        .map(|&(m, a)| {
            let dy = problem.transforms[a].active_count();
            let k = state.components[m].loadings.ncols();
            let mut dw = DMatrix::zeros(dy, k);
            let mut dpsi = DVector::zeros(dy);
            let b = batch_of[m][a];
            if b != usize::MAX {
                let c = caches[m][a].as_ref().unwrap();
                let s = &batches[b].s;
                let g: Vec<f64> = gamma[a].iter().map(|g| g[m]).collect();
                let big_gamma: f64 = g.iter().sum();
                let mut sg = s.clone();
                for (mut col, gi) in sg.column_iter_mut().zip(&g) {
                    col *= *gi;
                }
                let u = c.loadings.tr_mul(s);
                dw += &sg * u.transpose() - c.cov.solve_loadings() * big_gamma;
                let idiag = c.cov.inverse_diagonal();
                for d in 0..dy {
                    let sq: f64 = s.row(d).iter().zip(&g).map(|(v, gi)| gi * v * v).sum();
                    dpsi[d] += 0.5 * sq - 0.5 * big_gamma * idiag[d];
                }
            }
            (dw, dpsi)
        })
        .collect();
    let mut dw_blocks: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(m_count);
    let mut dpsi_blocks: Vec<Vec<DVector<f64>>> = Vec::with_capacity(m_count);
    let mut it = blocks.into_iter();
    for _ in 0..m_count {
        let (w, p): (Vec<_>, Vec<_>) = it.by_ref().take(a_count).unzip();
        dw_blocks.push(w);
        dpsi_blocks.push(p);
    }
    for (gt, g) in group_terms.iter().zip(&group_gamma) {
        for m in 0..m_count {
            for (a, dw, dpsi) in &gt[m].blocks {
                dw_blocks[m][*a] += dw * g[m];
                dpsi_blocks[m][*a] += dpsi * g[m];
            }
        }
    }

    let mut loadings = Vec::with_capacity(m_count);
    let mut log_noise = Vec::with_capacity(m_count);
    for m in 0..m_count {
        let c = &state.components[m];
        let mut gw = DMatrix::zeros(c.loadings.nrows(), c.loadings.ncols());
        for a in 0..a_count {
            if dw_blocks[m][a].nrows() > 0 && dw_blocks[m][a].iter().any(|v| *v != 0.0) {
                gw += problem.transforms[a].transpose_apply_matrix(&dw_blocks[m][a])?;
            }
        }
        loadings.push(gw);
        log_noise.push(
            (0..a_count)
                .map(|a| dpsi_blocks[m][a].component_mul(&c.log_noise[a].map(f64::exp)))
                .collect(),
        );
    }
    Ok((
        total,
        Some(Gradient {
            loadings,
            log_noise,
            logits,
        }),
    ))
}

pub fn loglik(state: &LearnState, problem: &LearnProblem) -> Result<f64> {
    Ok(evaluate(state, problem, false)?.0)
}

/// `∂L/∂W` per component.
pub fn grad_w(state: &LearnState, problem: &LearnProblem) -> Result<Vec<DMatrix<f64>>> {
    Ok(evaluate(state, problem, true)?.1.unwrap().loadings)
}

/// `∂L/∂t` per component and offset.
pub fn grad_psi(state: &LearnState, problem: &LearnProblem) -> Result<Vec<Vec<DVector<f64>>>> {
    Ok(evaluate(state, problem, true)?.1.unwrap().log_noise)
}

/// Every derivative of the mixture log-likelihood.
pub fn grad_mixture(state: &LearnState, problem: &LearnProblem) -> Result<Gradient> {
    Ok(evaluate(state, problem, true)?.1.unwrap())
}

/// Log-likelihood of a baseline that models each glimpse entry at each
/// offset as an independent Gaussian with its own ML mean and variance.
pub fn independent_gaussian_loglik(data: &GlimpseDataset) -> Result<f64> {
    data.validate()?;
    let rts = data.transforms()?;
    let mut total = 0.0;
    for (a, rt) in rts.iter().enumerate() {
        let recs: Vec<&[f64]> = data
            .records
            .iter()
            .filter(|r| r.offset_id == a)
            .map(|r| r.values.as_slice())
            .collect();
        if recs.is_empty() {
            continue;
        }
        let n = recs.len() as f64;
        for d in 0..rt.active_count() {
            let mean = recs.iter().map(|r| r[d]).sum::<f64>() / n;
            let var = (recs.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>() / n).max(1e-12);
            total += -0.5 * n * (LN_2PI + var.ln() + 1.0);
        }
    }
    Ok(total)
}

/// Which parameter groups the optimizer may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub loadings: bool,
    pub noise: bool,
    pub weights: bool,
}

impl Default for Trainable {
    fn default() -> Self {
        Self {
            loadings: true,
            noise: true,
            weights: true,
        }
    }
}

impl Trainable {
    pub fn noise_only() -> Self {
        Self {
            loadings: false,
            noise: true,
            weights: false,
        }
    }
}

fn pack(state: &LearnState, tr: Trainable) -> Vec<f64> {
    let mut x = Vec::new();
    for c in &state.components {
        if tr.loadings {
            x.extend_from_slice(c.loadings.as_slice());
        }
        if tr.noise {
            for t in &c.log_noise {
                x.extend_from_slice(t.as_slice());
            }
        }
    }
    if tr.weights && state.logits.len() > 1 {
        x.extend_from_slice(&state.logits);
    }
    x
}

fn pack_gradient(g: &Gradient, tr: Trainable) -> Vec<f64> {
    let mut x = Vec::new();
    for (w, t) in g.loadings.iter().zip(&g.log_noise) {
        if tr.loadings {
            x.extend_from_slice(w.as_slice());
        }
        if tr.noise {
            for v in t {
                x.extend_from_slice(v.as_slice());
            }
        }
    }
    if tr.weights && g.logits.len() > 1 {
        x.extend_from_slice(&g.logits);
    }
    x
}

fn unpack(template: &LearnState, tr: Trainable, x: &[f64]) -> LearnState {
    let mut s = template.clone();
    let mut at = 0;
    let mut take = |dst: &mut [f64]| {
        dst.copy_from_slice(&x[at..at + dst.len()]);
        at += dst.len();
    };
    for c in &mut s.components {
        if tr.loadings {
            take(c.loadings.as_mut_slice());
        }
        if tr.noise {
            for t in &mut c.log_noise {
                take(t.as_mut_slice());
            }
        }
    }
    if tr.weights && s.logits.len() > 1 {
        take(&mut s.logits);
    }
    s
}

/// Log-likelihood as a function of the packed trainable parameters.
pub struct GlimpseObjective<'p, 'd> {
    pub problem: &'p LearnProblem<'d>,
    pub template: LearnState,
    pub trainable: Trainable,
}

impl GlimpseObjective<'_, '_> {
    pub fn initial_point(&self) -> Vec<f64> {
        pack(&self.template, self.trainable)
    }

    pub fn state_at(&self, x: &[f64]) -> LearnState {
        unpack(&self.template, self.trainable, x)
    }
}

impl Objective for GlimpseObjective<'_, '_> {
    fn dim(&self) -> usize {
        self.initial_point().len()
    }

    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let state = self.state_at(x);
        let (ll, g) = evaluate(&state, self.problem, true)?;
        Ok((ll, pack_gradient(&g.unwrap(), self.trainable)))
    }
}

#[derive(Debug, Clone)]
pub struct LearnOutcome {
    pub state: LearnState,
    pub trace: Vec<TraceRow>,
    pub status: Status,
    pub initial_loglik: f64,
    pub final_loglik: f64,
    /// Number of likelihood terms (records, or groups when grouped).
    pub units: usize,
}

impl LearnOutcome {
    pub fn initial_per_example(&self) -> f64 {
        self.initial_loglik / self.units as f64
    }

    pub fn final_per_example(&self) -> f64 {
        self.final_loglik / self.units as f64
    }
}

/// Conjugate-gradient ascent on the glimpse log-likelihood. The default
/// gradient tolerance is `1e-5 · n`.
pub fn optimize(
    state: LearnState,
    problem: &LearnProblem,
    cfg: &OptimizerConfig,
    trainable: Trainable,
) -> Result<LearnOutcome> {
    if problem.data.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot learn from an empty glimpse dataset".into(),
        ));
    }
    let units = problem.units();
    let obj = GlimpseObjective {
        problem,
        template: state,
        trainable,
    };
    let x0 = obj.initial_point();
    let initial = loglik(&obj.template, problem)?;
    if x0.is_empty() {
        return Ok(LearnOutcome {
            state: obj.template,
            trace: vec![TraceRow {
                iteration: 0,
                loglik: initial,
                grad_norm: 0.0,
                step: 0.0,
            }],
            status: Status::GradientTolerance,
            initial_loglik: initial,
            final_loglik: initial,
            units,
        });
    }
    let tol = cfg.grad_tol.unwrap_or(1e-5 * units as f64);
    let result = maximize(&obj, x0, cfg, tol)?;
    log::info!(
        "optimization finished after {} iterations: {:?}, log-likelihood {:.6} -> {:.6}",
        result.trace.len() - 1,
        result.status,
        initial,
        result.value
    );
    Ok(LearnOutcome {
        state: obj.state_at(&result.x),
        trace: result.trace,
        status: result.status,
        initial_loglik: initial,
        final_loglik: result.value,
        units,
    })
}
