//! Solvers for `min_α ½‖y − Dα‖² + λ Ω(α)`.
//!
//! Penalties with a closed-form prox (ℓ1, partitions, trees) go through
//! accelerated proximal gradient; any group family, overlapping or not, can
//! go through ADMM on the split problem `z^g = α_g`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groups::GroupStructure;
use crate::prox::{group_prox_in_place, ProxPlan};

/// Above this many variables the ADMM linear system is solved by conjugate
/// gradients instead of a dense factorization.
pub const DENSE_ADMM_LIMIT: usize = 2000;

/// One instance of the structured decomposition problem.
#[derive(Debug, Clone)]
pub struct LassoProblem<'a> {
    pub y: DVector<f64>,
    pub dictionary: &'a DMatrix<f64>,
    pub lambda: f64,
    pub penalty: &'a GroupStructure,
}

impl<'a> LassoProblem<'a> {
    pub fn new(
        y: DVector<f64>,
        dictionary: &'a DMatrix<f64>,
        lambda: f64,
        penalty: &'a GroupStructure,
    ) -> Result<Self> {
        check_shapes(dictionary, penalty, lambda)?;
        if y.len() != dictionary.nrows() {
            return Err(Error::Dimension(format!(
                "signal has length {}, dictionary has {} rows",
                y.len(),
                dictionary.nrows()
            )));
        }
        Ok(LassoProblem {
            y,
            dictionary,
            lambda,
            penalty,
        })
    }

    fn check_alpha(&self, alpha: &DVector<f64>) -> Result<()> {
        if alpha.len() != self.dictionary.ncols() {
            return Err(Error::Dimension(format!(
                "coefficient vector has length {}, dictionary has {} columns",
                alpha.len(),
                self.dictionary.ncols()
            )));
        }
        Ok(())
    }
}

fn check_shapes(dictionary: &DMatrix<f64>, penalty: &GroupStructure, lambda: f64) -> Result<()> {
    if penalty.p() != dictionary.ncols() {
        return Err(Error::Dimension(format!(
            "penalty has p = {}, dictionary has {} columns",
            penalty.p(),
            dictionary.ncols()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(())
}

/// `½‖y − Dα‖² + λ Ω(α)`.
pub fn objective(problem: &LassoProblem, alpha: &DVector<f64>) -> Result<f64> {
    problem.check_alpha(alpha)?;
    Ok(objective_unchecked(
        &problem.y,
        problem.dictionary,
        problem.lambda,
        problem.penalty,
        alpha,
    ))
}

fn objective_unchecked(
    y: &DVector<f64>,
    d: &DMatrix<f64>,
    lambda: f64,
    penalty: &GroupStructure,
    alpha: &DVector<f64>,
) -> f64 {
    let mut r = y.clone();
    r.gemv(-1.0, d, alpha, 1.0);
    let fit = 0.5 * r.norm_squared();
    if lambda == 0.0 {
        fit
    } else {
        fit + lambda * penalty.penalty_unchecked(alpha.as_slice())
    }
}

/// Gradient of the smooth part, `Dᵀ(Dα − y)`.
pub fn grad_f(problem: &LassoProblem, alpha: &DVector<f64>) -> Result<DVector<f64>> {
    problem.check_alpha(alpha)?;
    let mut r = -problem.y.clone();
    r.gemv(1.0, problem.dictionary, alpha, 1.0);
    Ok(problem.dictionary.tr_mul(&r))
}

/// Upper bound on `σ_max(D)²` by power iteration on `DᵀD` from the all-ones
/// vector, inflated by 0.1%.
pub fn lipschitz_estimate(d: &DMatrix<f64>) -> f64 {
    const FLOOR: f64 = 1e-12;
    let p = d.ncols();
    if p == 0 || d.nrows() == 0 {
        return FLOOR;
    }
    let mut v = DVector::from_element(p, 1.0 / (p as f64).sqrt());
    let mut dv = DVector::zeros(d.nrows());
    let mut w = DVector::zeros(p);
    let mut estimate = 0.0;
    for _ in 0..500 {
        dv.gemv(1.0, d, &v, 0.0);
        w.gemv_tr(1.0, d, &dv, 0.0);
        let norm = w.norm();
        if norm == 0.0 {
            return FLOOR;
        }
        let converged = (norm - estimate).abs() <= 1e-6 * norm;
        estimate = norm;
        v.copy_from(&w);
        v /= norm;
        if converged {
            break;
        }
    }
    (estimate * 1.001).max(FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fista,
    Ista,
    Admm,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Fista => "fista",
            Method::Ista => "ista",
            Method::Admm => "admm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Relative objective change (FISTA/ISTA) or scaled residual level (ADMM)
    /// below which the solver stops.
    pub tol: f64,
    pub lipschitz: Option<f64>,
    pub gamma: f64,
    /// Residual balancing: double or halve γ when one residual exceeds the
    /// other tenfold, during the first `adapt_iters` iterations.
    pub adapt_gamma: bool,
    pub adapt_iters: usize,
    pub seed: u64,
    pub support_eps: f64,
    /// Keep the per-iteration objective trace. When false only the final
    /// objective is recorded (cheaper for ADMM).
    pub record_trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iter: 5000,
            tol: 1e-10,
            lipschitz: None,
            gamma: 1.0,
            adapt_gamma: true,
            adapt_iters: 500,
            seed: 0,
            support_eps: 1e-8,
            record_trace: true,
        }
    }
}

impl SolverOptions {
    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Domain("tol must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Domain("gamma must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Domain("max_iter must be positive".into()));
        }
        if let Some(l) = self.lipschitz {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::Domain("lipschitz override must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub alpha: DVector<f64>,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub method: Method,
    /// ADMM only: final `max_g ‖z^g − α_g‖₂`.
    pub primal_residual: f64,
    /// ADMM only: final `γ‖z − z_prev‖₂`.
    pub dual_residual: f64,
    pub primal_trace: Vec<f64>,
    pub dual_trace: Vec<f64>,
    pub support: Vec<usize>,
}

impl SolveResult {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace holds the final objective")
    }

    /// One `iter=<k> obj=<v> r_primal=<v> r_dual=<v>` line per recorded iteration.
    pub fn diagnostics(&self) -> Vec<String> {
        self.objective_trace
            .iter()
            .enumerate()
            .map(|(k, obj)| {
                let rp = self.primal_trace.get(k).copied().unwrap_or(0.0);
                let rd = self.dual_trace.get(k).copied().unwrap_or(0.0);
                format!("iter={} obj={:e} r_primal={:e} r_dual={:e}", k + 1, obj, rp, rd)
            })
            .collect()
    }
}

fn support_of(alpha: &DVector<f64>, eps: f64) -> Vec<usize> {
    alpha
        .iter()
        .enumerate()
        .filter(|(_, a)| a.abs() > eps)
        .map(|(j, _)| j)
        .collect()
}

/// The ADMM `w`-step system `(DᵀD + γ diag(c)) w = b`.
#[derive(Debug, Clone)]
enum LinearSystem {
    /// Inverse obtained from a Cholesky factorization.
    Dense(DMatrix<f64>),
    ConjugateGradient,
}

#[derive(Debug, Clone)]
struct AdmmSystem {
    gram: Option<DMatrix<f64>>,
    coverage: Vec<f64>,
    gamma: f64,
    solver: LinearSystem,
}

impl AdmmSystem {
    fn new(d: &DMatrix<f64>, penalty: &GroupStructure, gamma: f64) -> Result<Self> {
        let coverage: Vec<f64> = penalty.coverage().into_iter().map(|c| c as f64).collect();
        let p = d.ncols();
        if p > DENSE_ADMM_LIMIT {
            for j in 0..p {
                if coverage[j] == 0.0 && d.column(j).norm_squared() == 0.0 {
                    return Err(Error::Conditioning(format!(
                        "variable {} is in no group and its atom is zero",
                        j + 1
                    )));
                }
            }
            return Ok(AdmmSystem {
                gram: None,
                coverage,
                gamma,
                solver: LinearSystem::ConjugateGradient,
            });
        }
        let gram = d.tr_mul(d);
        let solver = Self::factor(&gram, &coverage, gamma)?;
        Ok(AdmmSystem {
            gram: Some(gram),
            coverage,
            gamma,
            solver,
        })
    }

    fn factor(gram: &DMatrix<f64>, coverage: &[f64], gamma: f64) -> Result<LinearSystem> {
        let mut m = gram.clone();
        for (j, c) in coverage.iter().enumerate() {
            m[(j, j)] += gamma * c;
        }
        let chol = m.cholesky().ok_or_else(|| {
            Error::Conditioning(
                "ADMM system is not positive definite (a variable outside every group has a degenerate atom)"
                    .into(),
            )
        })?;
        Ok(LinearSystem::Dense(chol.inverse()))
    }

    fn set_gamma(&mut self, gamma: f64) -> Result<()> {
        if let Some(gram) = &self.gram {
            self.solver = Self::factor(gram, &self.coverage, gamma)?;
        }
        self.gamma = gamma;
        Ok(())
    }

    fn solve(&self, d: &DMatrix<f64>, rhs: &DVector<f64>, w: &mut DVector<f64>) {
        match &self.solver {
            LinearSystem::Dense(inv) => w.gemv(1.0, inv, rhs, 0.0),
            LinearSystem::ConjugateGradient => self.cg(d, rhs, w),
        }
    }

    /// Conjugate gradients warm-started from the current `w`.
    fn cg(&self, d: &DMatrix<f64>, rhs: &DVector<f64>, w: &mut DVector<f64>) {
        let apply = |v: &DVector<f64>| -> DVector<f64> {
            let mut out = d.tr_mul(&(d * v));
            for (j, o) in out.iter_mut().enumerate() {
                *o += self.gamma * self.coverage[j] * v[j];
            }
            out
        };
        let mut r = rhs - apply(w);
        let mut dir = r.clone();
        let mut rr = r.norm_squared();
        let target = 1e-24 * rhs.norm_squared().max(f64::MIN_POSITIVE);
        for _ in 0..w.len() {
            if rr <= target {
                break;
            }
            let ad = apply(&dir);
            let step = rr / dir.dot(&ad);
            w.axpy(step, &dir, 1.0);
            r.axpy(-step, &ad, 1.0);
            let rr_new = r.norm_squared();
            dir = &r + (rr_new / rr) * &dir;
            rr = rr_new;
        }
    }
}

/// A dictionary, penalty and λ prepared for repeated solves: the Lipschitz
/// constant, prox order and ADMM factorization are computed once.
#[derive(Debug, Clone)]
pub struct SparseCoder<'a> {
    dictionary: &'a DMatrix<f64>,
    penalty: &'a GroupStructure,
    lambda: f64,
    opts: SolverOptions,
    method: Method,
    lipschitz: f64,
    plan: Option<ProxPlan<'a>>,
    admm: Option<AdmmSystem>,
}

impl<'a> SparseCoder<'a> {
    /// With `method = None` the solver is picked from the structure class:
    /// FISTA when the prox has a closed form, ADMM otherwise.
    pub fn new(
        dictionary: &'a DMatrix<f64>,
        penalty: &'a GroupStructure,
        lambda: f64,
        opts: SolverOptions,
        method: Option<Method>,
    ) -> Result<Self> {
        check_shapes(dictionary, penalty, lambda)?;
        opts.validate()?;
        let class = penalty.classify();
        let method = method.unwrap_or(if class.is_tree_like() {
            Method::Fista
        } else {
            Method::Admm
        });
        let (plan, admm, lipschitz) = match method {
            Method::Fista | Method::Ista => {
                let plan = ProxPlan::new(penalty).map_err(|_| {
                    Error::Structure(format!(
                        "{method} needs a closed-form prox; groups overlap without nesting (use admm)"
                    ))
                })?;
                let l = opts.lipschitz.unwrap_or_else(|| lipschitz_estimate(dictionary));
                (Some(plan), None, l)
            }
            Method::Admm => (None, Some(AdmmSystem::new(dictionary, penalty, opts.gamma)?), 0.0),
        };
        Ok(SparseCoder {
            dictionary,
            penalty,
            lambda,
            opts,
            method,
            lipschitz,
            plan,
            admm,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn dictionary(&self) -> &DMatrix<f64> {
        self.dictionary
    }

    pub fn penalty(&self) -> &GroupStructure {
        self.penalty
    }

    pub fn options(&self) -> &SolverOptions {
        &self.opts
    }

    pub fn objective(&self, y: &DVector<f64>, alpha: &DVector<f64>) -> f64 {
        objective_unchecked(y, self.dictionary, self.lambda, self.penalty, alpha)
    }

    fn check_signal(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.dictionary.nrows() {
            return Err(Error::Dimension(format!(
                "signal has length {}, dictionary has {} rows",
                y.len(),
                self.dictionary.nrows()
            )));
        }
        Ok(())
    }

    pub fn solve(&self, y: &DVector<f64>) -> Result<SolveResult> {
        self.check_signal(y)?;
        let init = DVector::zeros(self.dictionary.ncols());
        self.run(y, init)
    }

    /// Solve starting from `init` instead of zero.
    pub fn solve_from(&self, y: &DVector<f64>, init: &DVector<f64>) -> Result<SolveResult> {
        self.check_signal(y)?;
        if init.len() != self.dictionary.ncols() {
            return Err(Error::Dimension("initial point has wrong length".into()));
        }
        self.run(y, init.clone())
    }

    fn run(&self, y: &DVector<f64>, init: DVector<f64>) -> Result<SolveResult> {
        let res = match self.method {
            Method::Fista => self.proximal_gradient(y, init, true),
            Method::Ista => self.proximal_gradient(y, init, false),
            Method::Admm => self.admm(y, init)?,
        };
        if res.alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::Numeric(format!("{} produced non-finite coefficients", self.method)));
        }
        Ok(res)
    }

    fn proximal_gradient(&self, y: &DVector<f64>, init: DVector<f64>, accelerate: bool) -> SolveResult {
        let d = self.dictionary;
        let plan = self.plan.as_ref().expect("proximal methods carry a prox plan");
        let step = 1.0 / self.lipschitz;
        let threshold = self.lambda * step;

        let mut x = init;
        let mut extrap = x.clone();
        let mut candidate = x.clone();
        let mut resid = DVector::zeros(d.nrows());
        let mut grad = DVector::zeros(d.ncols());
        let mut momentum = 1.0_f64;
        let mut obj = self.objective(y, &x);
        let mut trace = Vec::new();
        let mut converged = false;
        let mut iterations = 0;

        while iterations < self.opts.max_iter {
            iterations += 1;
            resid.copy_from(y);
            resid.gemv(1.0, d, &extrap, -1.0);
            grad.gemv_tr(1.0, d, &resid, 0.0);
            candidate.copy_from(&extrap);
            candidate.axpy(-step, &grad, 1.0);
            plan.apply(candidate.as_mut_slice(), threshold);
            let cand_obj = self.objective(y, &candidate);

            if accelerate && cand_obj > obj {
                // restart momentum from the last accepted iterate
                momentum = 1.0;
                extrap.copy_from(&x);
                continue;
            }
            let change = obj - cand_obj;
            if accelerate {
                let next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
                let beta = (momentum - 1.0) / next;
                extrap.copy_from(&candidate);
                extrap.axpy(-beta, &x, 1.0 + beta);
                momentum = next;
            } else {
                extrap.copy_from(&candidate);
            }
            std::mem::swap(&mut x, &mut candidate);
            obj = cand_obj;
            if self.opts.record_trace {
                trace.push(obj);
            }
            if change.abs() <= self.opts.tol * obj.abs().max(f64::MIN_POSITIVE) {
                converged = true;
                break;
            }
        }
        if trace.last() != Some(&obj) {
            trace.push(obj);
        }
        SolveResult {
            support: support_of(&x, self.opts.support_eps),
            alpha: x,
            objective_trace: trace,
            iterations,
            converged,
            method: self.method,
            primal_residual: 0.0,
            dual_residual: 0.0,
            primal_trace: Vec::new(),
            dual_trace: Vec::new(),
        }
    }

    fn admm(&self, y: &DVector<f64>, init: DVector<f64>) -> Result<SolveResult> {
        let d = self.dictionary;
        let groups = self.penalty.groups();
        let weights = self.penalty.weights();
        let norm = self.penalty.norm();
        let shared = self.admm.as_ref().expect("admm carries its linear system");
        // Only copied once residual balancing actually changes gamma.
        let mut adapted: Option<AdmmSystem> = None;
        let mut gamma = shared.gamma;

        let mut offsets = Vec::with_capacity(groups.len() + 1);
        offsets.push(0);
        for g in groups {
            offsets.push(offsets.last().unwrap() + g.len());
        }
        let total = *offsets.last().unwrap();
        let mut z = vec![0.0; total];
        let mut nu = vec![0.0; total];
        for (k, g) in groups.iter().enumerate() {
            for (slot, &j) in z[offsets[k]..offsets[k + 1]].iter_mut().zip(g) {
                *slot = init[j];
            }
        }
        let mut w = init;
        let dty = d.tr_mul(y);
        let mut rhs = DVector::zeros(d.ncols());
        let mut buf = Vec::new();

        let mut trace = Vec::new();
        let mut primal_trace = Vec::new();
        let mut dual_trace = Vec::new();
        let (mut r_primal, mut r_dual) = (f64::INFINITY, f64::INFINITY);
        let mut converged = false;
        let mut iterations = 0;

        while iterations < self.opts.max_iter {
            iterations += 1;
            // w-step
            rhs.copy_from(&dty);
            for (k, g) in groups.iter().enumerate() {
                let range = offsets[k]..offsets[k + 1];
                for ((&j, zv), nv) in g.iter().zip(&z[range.clone()]).zip(&nu[range]) {
                    rhs[j] += gamma * zv + nv;
                }
            }
            adapted.as_ref().unwrap_or(shared).solve(d, &rhs, &mut w);

            // z-step and dual ascent
            let mut primal_max = 0.0_f64;
            let mut dual_sq = 0.0;
            for (k, g) in groups.iter().enumerate() {
                let range = offsets[k]..offsets[k + 1];
                buf.clear();
                buf.extend(g.iter().zip(&nu[range.clone()]).map(|(&j, nv)| w[j] - nv / gamma));
                group_prox_in_place(&mut buf, self.lambda * weights[k] / gamma, norm);
                let mut gap_sq = 0.0;
                for (((&j, zv), nv), &fresh) in g
                    .iter()
                    .zip(&mut z[range.clone()])
                    .zip(&mut nu[range])
                    .zip(&buf)
                {
                    dual_sq += (fresh - *zv) * (fresh - *zv);
                    *zv = fresh;
                    let gap = fresh - w[j];
                    gap_sq += gap * gap;
                    *nv += gamma * gap;
                }
                primal_max = primal_max.max(gap_sq.sqrt());
            }
            r_primal = primal_max;
            r_dual = gamma * dual_sq.sqrt();

            if self.opts.record_trace {
                let estimate = self.admm_estimate(&w, &z, &offsets);
                trace.push(self.objective(y, &estimate));
                primal_trace.push(r_primal);
                dual_trace.push(r_dual);
            }
            let scale = self.opts.tol * (1.0 + w.norm());
            if r_primal <= scale && r_dual <= scale {
                converged = true;
                break;
            }
            if self.opts.adapt_gamma && iterations <= self.opts.adapt_iters {
                let new_gamma = if r_primal > 10.0 * r_dual {
                    gamma * 2.0
                } else if r_dual > 10.0 * r_primal {
                    gamma / 2.0
                } else {
                    gamma
                };
                if new_gamma != gamma {
                    adapted.get_or_insert_with(|| shared.clone()).set_gamma(new_gamma)?;
                    gamma = new_gamma;
                }
            }
        }

        let alpha = self.admm_estimate(&w, &z, &offsets);
        let obj = self.objective(y, &alpha);
        if trace.last() != Some(&obj) {
            trace.push(obj);
        }
        Ok(SolveResult {
            support: support_of(&alpha, self.opts.support_eps),
            alpha,
            objective_trace: trace,
            iterations,
            converged,
            method: Method::Admm,
            primal_residual: r_primal,
            dual_residual: r_dual,
            primal_trace,
            dual_trace,
        })
    }

    /// `w` with every coordinate covered by an exactly-zero split copy set to zero.
    fn admm_estimate(&self, w: &DVector<f64>, z: &[f64], offsets: &[usize]) -> DVector<f64> {
        let mut alpha = w.clone();
        for (k, g) in self.penalty.groups().iter().enumerate() {
            if z[offsets[k]..offsets[k + 1]].iter().all(|&v| v == 0.0) {
                for &j in g {
                    alpha[j] = 0.0;
                }
            }
        }
        alpha
    }
}

fn solve_with(problem: &LassoProblem, opts: &SolverOptions, method: Option<Method>) -> Result<SolveResult> {
    let coder = SparseCoder::new(
        problem.dictionary,
        problem.penalty,
        problem.lambda,
        opts.clone(),
        method,
    )?;
    coder.solve(&problem.y)
}

/// Accelerated proximal gradient (FISTA) with function-value restart.
pub fn fista_solve(problem: &LassoProblem, opts: &SolverOptions) -> Result<SolveResult> {
    solve_with(problem, opts, Some(Method::Fista))
}

/// Plain proximal gradient; the objective trace never increases.
pub fn ista_solve(problem: &LassoProblem, opts: &SolverOptions) -> Result<SolveResult> {
    solve_with(problem, opts, Some(Method::Ista))
}

pub fn admm_solve(problem: &LassoProblem, opts: &SolverOptions) -> Result<SolveResult> {
    solve_with(problem, opts, Some(Method::Admm))
}

/// FISTA for tree-like structures, ADMM for general overlap.
pub fn solve(problem: &LassoProblem, opts: &SolverOptions) -> Result<SolveResult> {
    solve_with(problem, opts, None)
}
