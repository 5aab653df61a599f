//! Nonlinear conjugate-gradient ascent (Polak–Ribière+, strong-Wolfe line
//! search).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A differentiable function to maximize.
pub trait Objective {
    fn dim(&self) -> usize;
    /// Value and gradient at `x`. Errors and non-finite values are treated as
    /// leaving the feasible region.
    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    /// Absolute tolerance on the gradient norm. `None` scales with the data
    /// size where the caller knows it.
    pub grad_tol: Option<f64>,
    pub rel_tol: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            grad_tol: None,
            rel_tol: 1e-9,
            c1: 1e-4,
            c2: 0.1,
            max_line_search: 40,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rel_tol > 0.0
            && self.grad_tol.is_none_or(|g| g > 0.0)
            && 0.0 < self.c1
            && self.c1 < self.c2
            && self.c2 < 1.0
            && self.max_line_search > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    GradientTolerance,
    RelativeTolerance,
    MaxIterations,
    LineSearchFailed,
}

impl Status {
    pub fn converged(self) -> bool {
        matches!(self, Status::GradientTolerance | Status::RelativeTolerance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loglik: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub trace: Vec<TraceRow>,
    pub status: Status,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Point evaluated along the search direction, in minimization form.
#[derive(Clone)]
struct Probe {
    alpha: f64,
    f: f64,
    df: Option<f64>,
    x: Vec<f64>,
    g: Vec<f64>,
}

struct LineSearch<'a, O: Objective + ?Sized> {
    obj: &'a O,
    x0: &'a [f64],
    d: &'a [f64],
    f0: f64,
    df0: f64,
    cfg: &'a OptimizerConfig,
    evals: usize,
}

impl<O: Objective + ?Sized> LineSearch<'_, O> {
    fn probe(&mut self, alpha: f64) -> Probe {
        self.evals += 1;
        let x: Vec<f64> = self.x0.iter().zip(self.d).map(|(a, b)| a + alpha * b).collect();
        match self.obj.value_grad(&x) {
            Ok((v, gv)) if v.is_finite() && gv.iter().all(|g| g.is_finite()) => {
                let g: Vec<f64> = gv.iter().map(|v| -v).collect();
                let df = dot(&g, self.d);
                Probe {
                    alpha,
                    f: -v,
                    df: Some(df),
                    x,
                    g,
                }
            }
            _ => Probe {
                alpha,
                f: f64::INFINITY,
                df: None,
                x,
                g: Vec::new(),
            },
        }
    }

    fn armijo(&self, p: &Probe) -> bool {
        p.f <= self.f0 + self.cfg.c1 * p.alpha * self.df0
    }

    fn curvature(&self, p: &Probe) -> bool {
        p.df.is_some_and(|df| df.abs() <= -self.cfg.c2 * self.df0)
    }

    fn search(&mut self, alpha0: f64) -> Option<Probe> {
        let mut prev = Probe {
            alpha: 0.0,
            f: self.f0,
            df: Some(self.df0),
            x: self.x0.to_vec(),
            g: Vec::new(),
        };
        let mut alpha = alpha0;
        let mut best: Option<Probe> = None;
        for i in 0..self.cfg.max_line_search {
            let p = self.probe(alpha);
            if !self.armijo(&p) || (i > 0 && p.f >= prev.f) {
                return self.zoom(prev, p, best);
            }
            best = Some(p.clone());
            if self.curvature(&p) {
                return Some(p);
            }
            if p.df.unwrap() >= 0.0 {
                return self.zoom(p, prev, best);
            }
            prev = p;
            alpha *= 2.0;
        }
        best
    }

    fn zoom(&mut self, mut lo: Probe, mut hi: Probe, mut best: Option<Probe>) -> Option<Probe> {
        while self.evals < 2 * self.cfg.max_line_search {
            let alpha = interpolate(&lo, &hi);
            let p = self.probe(alpha);
            if !self.armijo(&p) || p.f >= lo.f {
                hi = p;
            } else {
                if best.as_ref().is_none_or(|b| p.f < b.f) {
                    best = Some(p.clone());
                }
                if self.curvature(&p) {
                    return Some(p);
                }
                if p.df.unwrap() * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = p;
            }
            if (hi.alpha - lo.alpha).abs() <= 1e-16 * lo.alpha.abs().max(1e-300) {
                break;
            }
        }
        best.filter(|b| b.alpha > 0.0)
    }
}

/// Safeguarded cubic interpolation of the minimizer between two probes,
/// falling back to bisection.
fn interpolate(lo: &Probe, hi: &Probe) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let mid = 0.5 * (a + b);
    let (Some(da), Some(db)) = (lo.df, hi.df) else {
        return mid;
    };
    if !hi.f.is_finite() {
        return mid;
    }
    let d1 = da + db - 3.0 * (lo.f - hi.f) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    let (left, right) = if a < b { (a, b) } else { (b, a) };
    let margin = 0.1 * (right - left);
    if t.is_finite() && t > left + margin && t < right - margin {
        t
    } else {
        mid
    }
}

/// Maximize `obj` from `x0`. `grad_tol` must be resolved by the caller.
pub fn maximize<O: Objective + ?Sized>(
    obj: &O,
    x0: Vec<f64>,
    cfg: &OptimizerConfig,
    grad_tol: f64,
) -> Result<OptimResult> {
    cfg.validate()?;
    let (v0, gv0) = obj.value_grad(&x0)?;
    if !v0.is_finite() {
        return Err(Error::InvalidArgument(format!("initial objective is not finite: {v0}")));
    }
    let n = x0.len();
    let mut x = x0;
    let mut f = -v0;
    let mut g: Vec<f64> = gv0.iter().map(|v| -v).collect();
    let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut trace = vec![TraceRow {
        iteration: 0,
        loglik: v0,
        grad_norm: norm(&g),
        step: 0.0,
    }];
    let mut last_step = 0.0;
    let mut last_df = 0.0;
    let mut since_restart = 0;
    let mut status = Status::MaxIterations;

    for iteration in 1..=cfg.max_iterations {
        let gnorm = norm(&g);
        if gnorm <= grad_tol {
            status = Status::GradientTolerance;
            break;
        }
        let mut df0 = dot(&g, &d);
        let mut steepest = since_restart == 0;
        if df0 >= 0.0 {
            d = g.iter().map(|v| -v).collect();
            df0 = -gnorm * gnorm;
            steepest = true;
        }
        let mut alpha0 = if iteration == 1 {
            (1.0 / gnorm).min(1.0)
        } else {
            (last_step * last_df / df0).min(1e10 * last_step.max(1e-300))
        };
        if !(alpha0.is_finite() && alpha0 > 0.0) {
            alpha0 = 1.0 / gnorm;
        }

        let mut found = {
            let mut ls = LineSearch {
                obj,
                x0: &x,
                d: &d,
                f0: f,
                df0,
                cfg,
                evals: 0,
            };
            ls.search(alpha0)
        };
        if found.is_none() && !steepest {
            log::debug!("line search failed at iteration {iteration}; restarting along the gradient");
            d = g.iter().map(|v| -v).collect();
            df0 = -gnorm * gnorm;
            let mut ls = LineSearch {
                obj,
                x0: &x,
                d: &d,
                f0: f,
                df0,
                cfg,
                evals: 0,
            };
            found = ls.search((1.0 / gnorm).min(1.0));
            since_restart = 0;
        }
        let Some(p) = found else {
            status = Status::LineSearchFailed;
            log::warn!("line search failed at iteration {iteration}; returning the best point");
            break;
        };

        let f_prev = f;
        let g_prev = std::mem::replace(&mut g, p.g);
        x = p.x;
        f = p.f;
        last_step = p.alpha;
        last_df = df0;
        since_restart += 1;
        trace.push(TraceRow {
            iteration,
            loglik: -f,
            grad_norm: norm(&g),
            step: p.alpha,
        });

        if (f_prev - f).abs() <= cfg.rel_tol * f_prev.abs().max(1.0) {
            status = Status::RelativeTolerance;
            break;
        }

        let gg = dot(&g_prev, &g_prev);
        let beta = if since_restart >= n.max(1) {
            since_restart = 0;
            0.0
        } else {
            ((dot(&g, &g) - dot(&g, &g_prev)) / gg).max(0.0)
        };
        d = g.iter().zip(&d).map(|(gi, di)| -gi + beta * di).collect();
        if beta == 0.0 {
            since_restart = 0;
        }
    }
    if trace.last().unwrap().grad_norm <= grad_tol {
        status = Status::GradientTolerance;
    }
    Ok(OptimResult {
        x,
        value: -f,
        trace,
        status,
    })
}
