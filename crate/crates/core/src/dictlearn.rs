//! Dictionary learning under the constraint that every atom has ℓ2 norm at
//! most one.
//!
//! Two training schemes are provided: batch alternating minimization (code
//! all signals, then one block-coordinate pass over the atoms) and projected
//! mini-batch stochastic gradient with a decaying step `δ_t = δ₀ / (1 + t/t₀)`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groups::{GroupStructure, StructureClass};
use crate::seeding::{self, Stream};
use crate::solvers::{SolverOptions, SparseCoder};

/// Atoms whose squared code energy falls below this are treated as unused by
/// the block-coordinate update.
pub const UNUSED_EPS: f64 = 1e-10;

const NORM_SLACK: f64 = 1e-12;

/// An `m × p` matrix whose columns all lie in the unit ℓ2 ball.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: DMatrix<f64>,
}

impl Dictionary {
    /// Wraps a matrix that already satisfies the column-norm constraint.
    pub fn new(atoms: DMatrix<f64>) -> Result<Self> {
        check_finite(&atoms)?;
        for (j, col) in atoms.column_iter().enumerate() {
            let n = col.norm();
            if n > 1.0 + NORM_SLACK {
                return Err(Error::Domain(format!("atom {} has norm {n} > 1", j + 1)));
            }
        }
        Ok(Dictionary { atoms })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.atoms
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.atoms
    }

    /// Signal dimension.
    pub fn m(&self) -> usize {
        self.atoms.nrows()
    }

    /// Number of atoms.
    pub fn p(&self) -> usize {
        self.atoms.ncols()
    }

    /// Largest atom norm.
    pub fn max_atom_norm(&self) -> f64 {
        self.atoms
            .column_iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max)
    }
}

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    if let Some(k) = m.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite entry at row {}, column {}",
            k % m.nrows() + 1,
            k / m.nrows() + 1
        )));
    }
    Ok(())
}

/// Orthogonal projection onto the constraint set: columns longer than one are
/// rescaled to unit norm, the others are left alone.
pub fn project_dictionary(mut d: DMatrix<f64>) -> Result<Dictionary> {
    check_finite(&d)?;
    for mut col in d.column_iter_mut() {
        let n = col.norm();
        if n > 1.0 {
            col /= n;
        }
    }
    Ok(Dictionary { atoms: d })
}

/// Picks `p` training signals (without replacement when `n ≥ p`) as
/// unit-norm initial atoms. Zero signals are skipped; when no usable signal
/// remains a unit basis vector is used instead.
pub fn init_dictionary(y: &DMatrix<f64>, p: usize, seed: u64) -> Result<Dictionary> {
    let (m, n) = y.shape();
    if n == 0 || m == 0 {
        return Err(Error::Domain("cannot initialize from an empty training set".into()));
    }
    if p == 0 {
        return Err(Error::Domain("dictionary needs at least one atom".into()));
    }
    let mut rng = seeding::rng(seed, Stream::Init);
    let norms: Vec<f64> = y.column_iter().map(|c| c.norm()).collect();
    let mut picks: Vec<Option<usize>> = Vec::with_capacity(p);
    if n >= p {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        picks.extend(order.into_iter().filter(|&i| norms[i] > 0.0).take(p).map(Some));
    }
    while picks.len() < p {
        let pick = (0..n)
            .map(|_| rng.gen_range(0..n))
            .find(|&i| norms[i] > 0.0);
        picks.push(pick);
    }
    let mut d = DMatrix::zeros(m, p);
    for (j, pick) in picks.into_iter().enumerate() {
        match pick {
            Some(i) => d.set_column(j, &(y.column(i) / norms[i])),
            None => d[(j % m, j)] = 1.0,
        }
    }
    Ok(Dictionary { atoms: d })
}

/// Codes of a batch of signals and their objective values.
#[derive(Debug, Clone)]
pub struct Coding {
    pub codes: DMatrix<f64>,
    pub objectives: Vec<f64>,
}

impl Coding {
    pub fn mean_objective(&self) -> f64 {
        if self.objectives.is_empty() {
            return 0.0;
        }
        self.objectives.iter().sum::<f64>() / self.objectives.len() as f64
    }
}

/// Solves one decomposition problem per column of `y`, independently.
///
/// With `init`, each column starts from the given code and the result is
/// never worse than that starting point. Output does not depend on `workers`.
pub fn code_columns(
    coder: &SparseCoder,
    y: &DMatrix<f64>,
    init: Option<&DMatrix<f64>>,
    workers: usize,
) -> Result<Coding> {
    let p = coder.dictionary().ncols();
    if y.nrows() != coder.dictionary().nrows() {
        return Err(Error::Dimension(format!(
            "signals have {} rows, dictionary has {}",
            y.nrows(),
            coder.dictionary().nrows()
        )));
    }
    if let Some(a) = init {
        if a.shape() != (p, y.ncols()) {
            return Err(Error::Dimension("initial codes have the wrong shape".into()));
        }
    }
    let one = |i: usize| -> Result<(DVector<f64>, f64)> {
        let yi: DVector<f64> = y.column(i).into_owned();
        let wrap = |e| Error::Column {
            column: i,
            source: Box::new(e),
        };
        match init {
            None => {
                let res = coder.solve(&yi).map_err(wrap)?;
                let obj = res.objective();
                Ok((res.alpha, obj))
            }
            Some(a) => {
                let start: DVector<f64> = a.column(i).into_owned();
                let start_obj = coder.objective(&yi, &start);
                let res = coder.solve_from(&yi, &start).map_err(wrap)?;
                let obj = res.objective();
                if obj <= start_obj {
                    Ok((res.alpha, obj))
                } else {
                    Ok((start, start_obj))
                }
            }
        }
    };
    let results: Vec<Result<(DVector<f64>, f64)>> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Domain(format!("cannot start worker pool: {e}")))?;
        pool.install(|| (0..y.ncols()).into_par_iter().map(one).collect())
    } else {
        (0..y.ncols()).map(one).collect()
    };
    let mut codes = DMatrix::zeros(p, y.ncols());
    let mut objectives = Vec::with_capacity(y.ncols());
    for (i, r) in results.into_iter().enumerate() {
        let (alpha, obj) = r?;
        codes.set_column(i, &alpha);
        objectives.push(obj);
    }
    Ok(Coding { codes, objectives })
}

/// Column `i` of the result solves `min ½‖y_i − Dα‖² + λΩ(α)`.
pub fn sparse_code_batch(
    y_batch: &DMatrix<f64>,
    dict: &Dictionary,
    lambda: f64,
    penalty: &GroupStructure,
    opts: &SolverOptions,
    workers: usize,
) -> Result<DMatrix<f64>> {
    let coder = SparseCoder::new(dict.matrix(), penalty, lambda, opts.clone(), None)?;
    Ok(code_columns(&coder, y_batch, None, workers)?.codes)
}

/// One pass of block-coordinate descent over the atoms for
/// `½‖Y − DA‖_F²` with each atom projected back onto the unit ball.
///
/// Returns the updated dictionary and the atoms left untouched because their
/// code row has (near) zero energy.
pub fn dict_update_bcd(
    y: &DMatrix<f64>,
    a: &DMatrix<f64>,
    dict: &Dictionary,
) -> Result<(Dictionary, Vec<usize>)> {
    let (m, p) = dict.atoms.shape();
    if y.nrows() != m || a.nrows() != p || a.ncols() != y.ncols() {
        return Err(Error::Dimension(format!(
            "Y is {}x{}, A is {}x{}, D is {}x{}",
            y.nrows(),
            y.ncols(),
            a.nrows(),
            a.ncols(),
            m,
            p
        )));
    }
    let b = y * a.transpose();
    let c = a * a.transpose();
    let mut d = dict.atoms.clone();
    let mut unused = Vec::new();
    let mut col = DVector::zeros(m);
    for j in 0..p {
        let cjj = c[(j, j)];
        if cjj < UNUSED_EPS {
            unused.push(j);
            continue;
        }
        // d_j + (B_j − D C_j) / C_jj
        col.copy_from(&b.column(j));
        col.gemv(-1.0, &d, &c.column(j), 1.0);
        col /= cjj;
        col += d.column(j);
        let n = col.norm();
        if n > 1.0 {
            col /= n;
        }
        d.set_column(j, &col);
    }
    check_finite(&d)?;
    Ok((Dictionary { atoms: d }, unused))
}

/// `Π_C[D + δ (y − Dα) αᵀ]`.
pub fn sgd_step(dict: &Dictionary, y: &DVector<f64>, alpha: &DVector<f64>, delta: f64) -> Result<Dictionary> {
    let yb = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
    let ab = DMatrix::from_column_slice(alpha.len(), 1, alpha.as_slice());
    sgd_batch_step(dict, &yb, &ab, delta)
}

/// Batch-averaged projected gradient step `Π_C[D + (δ/b) (Y − DA) Aᵀ]`.
pub fn sgd_batch_step(
    dict: &Dictionary,
    y: &DMatrix<f64>,
    a: &DMatrix<f64>,
    delta: f64,
) -> Result<Dictionary> {
    let (m, p) = dict.atoms.shape();
    if y.nrows() != m || a.nrows() != p || a.ncols() != y.ncols() || y.ncols() == 0 {
        return Err(Error::Dimension("batch shapes do not match the dictionary".into()));
    }
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::Domain(format!("step size must be non-negative, got {delta}")));
    }
    let mut resid = y.clone();
    resid.gemm(-1.0, &dict.atoms, a, 1.0);
    let mut d = dict.atoms.clone();
    d.gemm(delta / y.ncols() as f64, &resid, &a.transpose(), 1.0);
    project_dictionary(d).map_err(|e| match e {
        Error::Numeric(msg) => Error::Numeric(format!(
            "gradient step with delta = {delta} diverged (residual norm {}): {msg}",
            resid.norm()
        )),
        other => other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Alternating,
    Online,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Defines the number of atoms (`penalty.p()`).
    pub penalty: GroupStructure,
    pub lambda: f64,
    pub batch_size: usize,
    /// Alternating mode: number of code/update rounds.
    pub epochs: usize,
    /// Online mode: number of mini-batch steps.
    pub steps: usize,
    pub lr0: f64,
    /// Defaults to `steps / 10`.
    pub lr_t0: Option<f64>,
    pub seed: u64,
    /// When set, λ is recalibrated on a sample of the data so that the mean
    /// residual ratio matches this value.
    pub target_ratio: Option<f64>,
    pub calibration_sample: usize,
    pub solver: SolverOptions,
    pub workers: usize,
    /// Online mode: invoke the checkpoint hook every this many steps (0 = never).
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, penalty: GroupStructure, lambda: f64) -> Self {
        TrainConfig {
            mode,
            penalty,
            lambda,
            batch_size: 500,
            epochs: 10,
            steps: 1000,
            lr0: 1.0,
            lr_t0: None,
            seed: 0,
            target_ratio: None,
            calibration_sample: 1000,
            solver: SolverOptions::default(),
            workers: 1,
            checkpoint_every: 0,
        }
    }

    fn validate(&self, y: &DMatrix<f64>) -> Result<()> {
        if y.ncols() == 0 {
            return Err(Error::Domain("training set is empty".into()));
        }
        check_finite(y)?;
        if self.batch_size == 0 {
            return Err(Error::Domain("batch_size must be >= 1".into()));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Domain("lr0 must be non-negative".into()));
        }
        if let Some(t0) = self.lr_t0 {
            if !(t0 > 0.0) {
                return Err(Error::Domain("lr_t0 must be positive".into()));
            }
        }
        if let Some(r) = self.target_ratio {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Domain(format!("target ratio {r} must lie in (0, 1)")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Domain("lambda must be non-negative".into()));
        }
        Ok(())
    }

    fn step_size(&self, t: usize) -> f64 {
        let t0 = self.lr_t0.unwrap_or((self.steps as f64 / 10.0).max(1.0));
        self.lr0 / (1.0 + t as f64 / t0)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    /// Mean objective per epoch (alternating) or exponentially smoothed mean
    /// batch objective per step (online).
    pub objective_trace: Vec<f64>,
    pub lambda: f64,
    pub seed: u64,
    pub rounds: usize,
    pub reseeded_atoms: usize,
    pub calibration: Option<Calibration>,
    /// Not serialized so that reports are reproducible byte for byte.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

fn resolve_lambda(
    dict: &Dictionary,
    y: &DMatrix<f64>,
    config: &TrainConfig,
) -> Result<(f64, Option<Calibration>)> {
    let Some(target) = config.target_ratio else {
        return Ok((config.lambda, None));
    };
    let n = y.ncols();
    let take = config.calibration_sample.clamp(1, n);
    let mut rng = seeding::rng(config.seed, Stream::Calibration);
    let mut idx: Vec<usize> = (0..n).filter(|&i| y.column(i).norm() > 0.0).collect();
    idx.shuffle(&mut rng);
    idx.truncate(take);
    idx.sort_unstable();
    if idx.is_empty() {
        return Err(Error::Domain("no non-zero signal to calibrate on".into()));
    }
    let sample = y.select_columns(&idx);
    let cal = calibrate_lambda(
        dict,
        &sample,
        &config.penalty,
        target,
        &config.solver,
        &CalibrationOptions {
            workers: config.workers,
            ..CalibrationOptions::default()
        },
    )?;
    if !cal.reached {
        log::warn!(
            "target ratio {target} not reached; using boundary lambda {} (ratio {})",
            cal.lambda,
            cal.mean_ratio
        );
    }
    Ok((cal.lambda, Some(cal)))
}

/// Alternating minimization: code every signal with the current dictionary
/// (warm-started from the previous codes), then update the atoms by one
/// block-coordinate pass. Atoms with an all-zero code row are re-seeded from
/// the worst-reconstructed signals.
pub fn train_alternating(y: &DMatrix<f64>, config: &TrainConfig) -> Result<(Dictionary, TrainReport)> {
    train_alternating_observed(y, config, |_, _, _| Ok(()))
}

/// [`train_alternating`] with a hook called after each epoch's coding step
/// with the epoch index, the dictionary used for coding and the codes.
pub fn train_alternating_observed<F>(
    y: &DMatrix<f64>,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<(Dictionary, TrainReport)>
where
    F: FnMut(usize, &Dictionary, &DMatrix<f64>) -> Result<()>,
{
    config.validate(y)?;
    let started = Instant::now();
    let p = config.penalty.p();
    let mut dict = init_dictionary(y, p, config.seed)?;
    let (lambda, calibration) = resolve_lambda(&dict, y, config)?;
    let mut codes: Option<DMatrix<f64>> = None;
    let mut trace = Vec::with_capacity(config.epochs);
    let mut reseeded = 0;

    for epoch in 0..config.epochs {
        let coding = {
            let coder = SparseCoder::new(dict.matrix(), &config.penalty, lambda, config.solver.clone(), None)?;
            code_columns(&coder, y, codes.as_ref(), config.workers)?
        };
        on_epoch(epoch, &dict, &coding.codes)?;
        trace.push(coding.mean_objective());
        let (mut next, _) = dict_update_bcd(y, &coding.codes, &dict)?;
        reseeded += reseed_unused(&mut next, y, &coding.codes);
        dict = next;
        codes = Some(coding.codes);
    }
    Ok((
        dict,
        TrainReport {
            objective_trace: trace,
            lambda,
            seed: config.seed,
            rounds: config.epochs,
            reseeded_atoms: reseeded,
            calibration,
            wall_time_secs: started.elapsed().as_secs_f64(),
        },
    ))
}

/// Replaces atoms whose code row is exactly zero by the (normalized) signals
/// with the largest reconstruction error. The fit term is unchanged because
/// those atoms carry no coefficient.
fn reseed_unused(dict: &mut Dictionary, y: &DMatrix<f64>, a: &DMatrix<f64>) -> usize {
    let unused: Vec<usize> = (0..a.nrows())
        .filter(|&j| a.row(j).iter().all(|&v| v == 0.0))
        .collect();
    if unused.is_empty() {
        return 0;
    }
    let mut resid = y.clone();
    resid.gemm(-1.0, &dict.atoms, a, 1.0);
    let mut ranked: Vec<(usize, f64)> = resid
        .column_iter()
        .enumerate()
        .map(|(i, c)| (i, c.norm()))
        .filter(|&(i, _)| y.column(i).norm() > 0.0)
        .collect();
    ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    let mut count = 0;
    for (&j, &(i, _)) in unused.iter().zip(&ranked) {
        let col = y.column(i);
        dict.atoms.set_column(j, &(col / col.norm()));
        count += 1;
    }
    count
}

/// Projected mini-batch stochastic gradient. Batches are drawn by cycling
/// through a random permutation of the signals, reshuffled after each pass.
/// `on_checkpoint(step, lambda, dict)` runs every `checkpoint_every` steps.
pub fn train_online<F>(
    y: &DMatrix<f64>,
    config: &TrainConfig,
    mut on_checkpoint: F,
) -> Result<(Dictionary, TrainReport)>
where
    F: FnMut(usize, f64, &Dictionary) -> Result<()>,
{
    config.validate(y)?;
    let started = Instant::now();
    let n = y.ncols();
    let p = config.penalty.p();
    let mut dict = init_dictionary(y, p, config.seed)?;
    let (lambda, calibration) = resolve_lambda(&dict, y, config)?;
    let mut rng = seeding::rng(config.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut pos = 0;
    let mut trace = Vec::with_capacity(config.steps);
    let mut smoothed: Option<f64> = None;
    let mut batch = Vec::with_capacity(config.batch_size);

    for step in 0..config.steps {
        batch.clear();
        while batch.len() < config.batch_size {
            if pos == n {
                order.shuffle(&mut rng);
                pos = 0;
            }
            batch.push(order[pos]);
            pos += 1;
        }
        let yb = y.select_columns(&batch);
        let coding = {
            let coder = SparseCoder::new(dict.matrix(), &config.penalty, lambda, config.solver.clone(), None)?;
            code_columns(&coder, &yb, None, config.workers)?
        };
        let obj = coding.mean_objective();
        let s = smoothed.map_or(obj, |prev| 0.9 * prev + 0.1 * obj);
        smoothed = Some(s);
        trace.push(s);
        dict = sgd_batch_step(&dict, &yb, &coding.codes, config.step_size(step))?;
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            on_checkpoint(step + 1, lambda, &dict)?;
        }
    }
    Ok((
        dict,
        TrainReport {
            objective_trace: trace,
            lambda,
            seed: config.seed,
            rounds: config.steps,
            reseeded_atoms: 0,
            calibration,
            wall_time_secs: started.elapsed().as_secs_f64(),
        },
    ))
}

/// Sample-mean objective `(1/n) Σ_i ½‖y_i − Dα_i‖² + λΩ(α_i)`.
pub fn dataset_objective(
    y: &DMatrix<f64>,
    a: &DMatrix<f64>,
    dict: &Dictionary,
    lambda: f64,
    penalty: &GroupStructure,
) -> Result<f64> {
    if a.shape() != (dict.p(), y.ncols()) || y.nrows() != dict.m() || penalty.p() != dict.p() {
        return Err(Error::Dimension("codes, signals and dictionary disagree".into()));
    }
    let mut resid = y.clone();
    resid.gemm(-1.0, dict.matrix(), a, 1.0);
    let fit = 0.5 * resid.norm_squared();
    let pen: f64 = a
        .column_iter()
        .map(|c| penalty.penalty_unchecked(c.as_slice()))
        .sum();
    Ok((fit + lambda * pen) / y.ncols() as f64)
}

#[derive(Debug, Clone)]
pub struct CalibrationOptions {
    /// Accept a λ whose mean ratio is within this distance of the target.
    pub ratio_tol: f64,
    pub max_steps: usize,
    /// The search interval is `[lower_factor · λ_max, λ_max]`.
    pub lower_factor: f64,
    pub workers: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            ratio_tol: 0.02,
            max_steps: 40,
            lower_factor: 1e-6,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Probe {
    pub lambda: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub lambda: f64,
    pub mean_ratio: f64,
    pub target: f64,
    /// False when the target lies outside the achievable range; `lambda` is
    /// then the nearest end of the search interval.
    pub reached: bool,
    /// Every evaluated `(λ, ratio)` pair, in evaluation order.
    pub probes: Vec<Probe>,
}

/// A λ above which the zero code is optimal for every sample column.
fn lambda_upper_bound(dict: &Dictionary, sample: &DMatrix<f64>, penalty: &GroupStructure) -> Result<f64> {
    if penalty.is_empty() {
        return Err(Error::Domain("penalty has no groups; lambda has no effect".into()));
    }
    let corr = dict.matrix().tr_mul(sample);
    let min_w = penalty.weights().iter().copied().fold(f64::INFINITY, f64::min);
    let singletons = penalty.classify() == StructureClass::Singletons;
    let mut bound = 0.0_f64;
    for c in corr.column_iter() {
        let b = if singletons {
            penalty
                .groups()
                .iter()
                .zip(penalty.weights())
                .map(|(g, w)| c[g[0]].abs() / w)
                .fold(0.0, f64::max)
        } else {
            // ⟨c, α⟩ ≤ ‖c‖₁‖α‖∞ ≤ ‖c‖₁ Ω(α) / min η for covering families
            c.iter().map(|v| v.abs()).sum::<f64>() / min_w
        };
        bound = bound.max(b);
    }
    Ok(bound)
}

/// Mean over columns of `‖y − Dα(λ)‖₂ / ‖y‖₂`.
pub fn mean_residual_ratio(
    dict: &Dictionary,
    sample: &DMatrix<f64>,
    penalty: &GroupStructure,
    lambda: f64,
    opts: &SolverOptions,
    workers: usize,
) -> Result<f64> {
    let coder = SparseCoder::new(dict.matrix(), penalty, lambda, opts.clone(), None)?;
    let coding = code_columns(&coder, sample, None, workers)?;
    let mut resid = sample.clone();
    resid.gemm(-1.0, dict.matrix(), &coding.codes, 1.0);
    let mut total = 0.0;
    for (r, y) in resid.column_iter().zip(sample.column_iter()) {
        total += r.norm() / y.norm();
    }
    Ok(total / sample.ncols() as f64)
}

/// Bisection on `log λ` for the λ whose mean residual ratio on `sample`
/// matches `target`, followed by one secant step inside the final bracket.
pub fn calibrate_lambda(
    dict: &Dictionary,
    sample: &DMatrix<f64>,
    penalty: &GroupStructure,
    target: f64,
    opts: &SolverOptions,
    cal: &CalibrationOptions,
) -> Result<Calibration> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Domain(format!("target ratio {target} must lie in (0, 1)")));
    }
    if sample.ncols() == 0 {
        return Err(Error::Domain("calibration sample is empty".into()));
    }
    if sample.nrows() != dict.m() {
        return Err(Error::Dimension("sample rows differ from dictionary rows".into()));
    }
    if let Some(i) = sample.column_iter().position(|c| c.norm() == 0.0) {
        return Err(Error::Domain(format!("sample column {} is zero", i + 1)));
    }
    let hi_bound = lambda_upper_bound(dict, sample, penalty)?;
    if hi_bound == 0.0 {
        return Err(Error::Domain("sample is orthogonal to every atom".into()));
    }
    let mut probes = Vec::new();
    let mut eval = |lambda: f64| -> Result<f64> {
        let ratio = mean_residual_ratio(dict, sample, penalty, lambda, opts, cal.workers)?;
        probes.push(Probe { lambda, ratio });
        Ok(ratio)
    };
    let close = |r: f64| (r - target).abs() <= cal.ratio_tol;

    let (mut lo, mut hi) = (hi_bound * cal.lower_factor, hi_bound);
    let mut r_lo = eval(lo)?;
    if r_lo >= target && !close(r_lo) {
        return Ok(done(lo, r_lo, target, false, probes));
    }
    let mut r_hi = eval(hi)?;
    if r_hi <= target && !close(r_hi) {
        return Ok(done(hi, r_hi, target, false, probes));
    }
    let mut best = if (r_lo - target).abs() <= (r_hi - target).abs() {
        (lo, r_lo)
    } else {
        (hi, r_hi)
    };
    for _ in 0..cal.max_steps {
        if close(best.1) {
            break;
        }
        let mid = (lo * hi).sqrt();
        let r = eval(mid)?;
        if (r - target).abs() < (best.1 - target).abs() {
            best = (mid, r);
        }
        if r < target {
            lo = mid;
            r_lo = r;
        } else {
            hi = mid;
            r_hi = r;
        }
    }
    if r_hi > r_lo {
        let secant = lo + (target - r_lo) * (hi - lo) / (r_hi - r_lo);
        if secant > lo && secant < hi {
            let r = eval(secant)?;
            if (r - target).abs() < (best.1 - target).abs() {
                best = (secant, r);
            }
        }
    }
    Ok(done(best.0, best.1, target, close(best.1), probes))
}

fn done(lambda: f64, ratio: f64, target: f64, reached: bool, probes: Vec<Probe>) -> Calibration {
    Calibration {
        lambda,
        mean_ratio: ratio,
        target,
        reached,
        probes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groups::Norm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn projection_examples() {
        let inside = DMatrix::from_column_slice(2, 2, &[0.3, 0.4, -0.5, 0.1]);
        assert_eq!(project_dictionary(inside.clone()).unwrap().into_matrix(), inside);
        let d = DMatrix::from_column_slice(2, 2, &[0.0, 2.0, 3.0, 4.0]);
        let out = project_dictionary(d).unwrap().into_matrix();
        assert_eq!(out.column(0).as_slice(), &[0.0, 1.0]);
        assert!((out[(0, 1)] - 0.6).abs() < 1e-15 && (out[(1, 1)] - 0.8).abs() < 1e-15);
        let bad = DMatrix::from_column_slice(1, 1, &[f64::NAN]);
        assert!(matches!(project_dictionary(bad), Err(Error::Numeric(_))));
        assert!(Dictionary::new(DMatrix::from_column_slice(1, 1, &[1.5])).is_err());
    }

    #[test]
    fn init_is_a_permutation_when_p_equals_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = random_matrix(&mut rng, 4, 6);
        let d = init_dictionary(&y, 6, 3).unwrap();
        let mut used = vec![false; 6];
        for col in d.matrix().column_iter() {
            let i = (0..6)
                .find(|&i| (y.column(i) / y.column(i).norm() - col).norm() < 1e-15)
                .expect("atom is a normalized signal");
            assert!(!used[i]);
            used[i] = true;
        }
        assert_eq!(init_dictionary(&y, 6, 3).unwrap(), d);
        assert_ne!(init_dictionary(&y, 6, 4).unwrap(), d);
    }

    #[test]
    fn init_repeats_when_p_exceeds_n() {
        let y = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let d = init_dictionary(&y, 5, 0).unwrap();
        assert_eq!(d.p(), 5);
        for col in d.matrix().column_iter() {
            assert!(col == DVector::from_vec(vec![1.0, 0.0]) || col == DVector::from_vec(vec![0.0, 1.0]));
        }
    }

    #[test]
    fn init_falls_back_to_basis_vectors() {
        let y = DMatrix::zeros(3, 2);
        let d = init_dictionary(&y, 4, 0).unwrap();
        assert_eq!(d.matrix().column(0).as_slice(), &[1.0, 0.0, 0.0]);
        assert_eq!(d.matrix().column(3).as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn bcd_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = random_matrix(&mut rng, 4, 10);
        let d = init_dictionary(&y, 3, 0).unwrap();
        let (same, unused) = dict_update_bcd(&y, &DMatrix::zeros(3, 10), &d).unwrap();
        assert_eq!(same, d);
        assert_eq!(unused, vec![0, 1, 2]);

        let target = DVector::from_vec(vec![0.3, -0.4, 0.5]);
        let y = DMatrix::from_fn(3, 7, |i, _| target[i]);
        let start = Dictionary::new(DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0])).unwrap();
        let (fit, _) = dict_update_bcd(&y, &DMatrix::from_element(1, 7, 1.0), &start).unwrap();
        assert!((fit.matrix().column(0) - &target).norm() < 1e-15);
    }

    #[test]
    fn bcd_never_increases_the_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let y = random_matrix(&mut rng, 6, 15);
            let a = random_matrix(&mut rng, 8, 15);
            let d = project_dictionary(random_matrix(&mut rng, 6, 8)).unwrap();
            let fit = |d: &Dictionary| (&y - d.matrix() * &a).norm_squared();
            let (next, _) = dict_update_bcd(&y, &a, &d).unwrap();
            assert!(fit(&next) <= fit(&d) * (1.0 + 1e-12));
            assert!(next.max_atom_norm() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn sgd_examples() {
        let d = Dictionary::new(DMatrix::from_element(1, 1, 0.5)).unwrap();
        let one = DVector::from_element(1, 1.0);
        let next = sgd_step(&d, &one, &one, 0.1).unwrap();
        assert!((next.matrix()[(0, 0)] - 0.55).abs() < 1e-15);
        assert_eq!(sgd_step(&d, &one, &one, 0.0).unwrap(), d);
        assert_eq!(sgd_step(&d, &one, &DVector::zeros(1), 0.7).unwrap(), d);
        assert!(sgd_step(&d, &one, &one, -1.0).is_err());
        let huge = DVector::from_element(1, 1e300);
        assert!(matches!(sgd_step(&d, &huge, &huge, 1e300), Err(Error::Numeric(_))));
    }

    #[test]
    fn batch_coding_matches_single_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = random_matrix(&mut rng, 6, 8);
        let d = project_dictionary(random_matrix(&mut rng, 6, 9)).unwrap();
        let s = crate::groups::build_grid_groups(3, 3, 2, true).unwrap();
        let opts = SolverOptions::default();
        let batch = sparse_code_batch(&y, &d, 0.1, &s, &opts, 1).unwrap();
        let par = sparse_code_batch(&y, &d, 0.1, &s, &opts, 3).unwrap();
        assert_eq!(batch, par);
        for i in 0..8 {
            let pb = crate::LassoProblem::new(y.column(i).into_owned(), d.matrix(), 0.1, &s).unwrap();
            let single = crate::solvers::solve(&pb, &opts).unwrap();
            assert_eq!(batch.column(i), single.alpha.column(0));
        }
    }

    #[test]
    fn batch_coding_limits() {
        let d = Dictionary::new(DMatrix::from_row_slice(2, 2, &[0.8, 0.1, -0.2, 0.9])).unwrap();
        let y = DMatrix::from_row_slice(2, 3, &[0.3, -1.0, 0.2, 0.5, 0.4, -0.7]);
        let s = GroupStructure::singletons(2).unwrap();
        let opts = SolverOptions {
            tol: 1e-15,
            max_iter: 50_000,
            ..SolverOptions::default()
        };
        let a = sparse_code_batch(&y, &d, 0.0, &s, &opts, 1).unwrap();
        let exact = d.matrix().clone().try_inverse().unwrap() * &y;
        assert!((a - exact).amax() < 1e-7);
        let lmax = d.matrix().tr_mul(&y).amax();
        let a = sparse_code_batch(&y, &d, lmax, &s, &opts, 1).unwrap();
        assert!(a.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_calibration_hits_closed_form() {
        let d = Dictionary::new(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let y = DMatrix::from_element(1, 1, 1.0);
        let s = GroupStructure::singletons(1).unwrap();
        let cal = calibrate_lambda(&d, &y, &s, 0.4, &SolverOptions::default(), &CalibrationOptions::default())
            .unwrap();
        assert!(cal.reached);
        assert!((cal.lambda - 0.4).abs() <= 1e-6, "{}", cal.lambda);
        let mut probes = cal.probes.clone();
        probes.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
        assert!(probes.windows(2).all(|w| w[0].ratio <= w[1].ratio + 1e-12));
    }

    #[test]
    fn calibration_near_one_gives_zero_codes() {
        let d = Dictionary::new(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let y = DMatrix::from_element(1, 1, 1.0);
        let s = GroupStructure::singletons(1).unwrap();
        let cal = calibrate_lambda(&d, &y, &s, 0.999, &SolverOptions::default(), &CalibrationOptions::default())
            .unwrap();
        assert!(cal.mean_ratio > 0.97);
        let a = sparse_code_batch(&y, &d, 1.0, &s, &SolverOptions::default(), 1).unwrap();
        assert_eq!(a[(0, 0)], 0.0);
    }

    #[test]
    fn calibration_reports_unreachable_target() {
        // a single atom cannot fit a signal orthogonal to half of it
        let d = Dictionary::new(DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
        let y = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let s = GroupStructure::singletons(1).unwrap();
        let cal = calibrate_lambda(&d, &y, &s, 0.4, &SolverOptions::default(), &CalibrationOptions::default())
            .unwrap();
        assert!(!cal.reached);
        assert!(cal.mean_ratio > 0.7);
        let zero = DMatrix::zeros(2, 1);
        assert!(calibrate_lambda(&d, &zero, &s, 0.4, &SolverOptions::default(), &CalibrationOptions::default())
            .is_err());
        assert!(calibrate_lambda(&d, &y, &s, 1.0, &SolverOptions::default(), &CalibrationOptions::default())
            .is_err());
    }

    #[test]
    fn alternating_objective_decreases_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = random_matrix(&mut rng, 5, 60);
        let mut cfg = TrainConfig::new(TrainMode::Alternating, GroupStructure::singletons(8).unwrap(), 0.1);
        cfg.epochs = 8;
        let (d1, r1) = train_alternating(&y, &cfg).unwrap();
        let (d2, r2) = train_alternating(&y, &cfg).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(r1.objective_trace, r2.objective_trace);
        assert!(d1.max_atom_norm() <= 1.0 + 1e-12);
        for w in r1.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * (1.0 + w[0].abs()));
        }
    }

    #[test]
    fn alternating_realizable_data_small_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let atoms = project_dictionary(random_matrix(&mut rng, 4, 4) * 3.0).unwrap();
        let codes = random_matrix(&mut rng, 4, 30);
        let y = atoms.matrix() * &codes;
        let mut cfg = TrainConfig::new(TrainMode::Alternating, GroupStructure::singletons(4).unwrap(), 1e-6);
        cfg.epochs = 30;
        let (d, _) = train_alternating(&y, &cfg).unwrap();
        let a = sparse_code_batch(&y, &d, 1e-6, &cfg.penalty, &SolverOptions::default(), 1).unwrap();
        let rel = (&y - d.matrix() * a).norm() / y.norm();
        assert!(rel < 1e-3, "relative reconstruction error {rel}");
    }

    #[test]
    fn online_zero_rate_keeps_initial_dictionary() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y = random_matrix(&mut rng, 4, 40);
        let mut cfg = TrainConfig::new(TrainMode::Online, GroupStructure::singletons(5).unwrap(), 0.1);
        cfg.lr0 = 0.0;
        cfg.steps = 5;
        cfg.batch_size = 7;
        let (d, _) = train_online(&y, &cfg, |_, _, _| Ok(())).unwrap();
        assert_eq!(d, init_dictionary(&y, 5, cfg.seed).unwrap());
    }

    #[test]
    fn online_single_signal_is_a_fixpoint() {
        let y = DMatrix::from_column_slice(3, 1, &[0.6, 0.0, 0.8]);
        let mut cfg = TrainConfig::new(TrainMode::Online, GroupStructure::singletons(1).unwrap(), 0.01);
        cfg.steps = 20;
        cfg.batch_size = 1;
        cfg.checkpoint_every = 1;
        let mut prev = init_dictionary(&y, 1, 0).unwrap();
        let (d, _) = train_online(&y, &cfg, |_, _, d| {
            assert!((d.matrix() - prev.matrix()).norm() <= 1e-6);
            prev = d.clone();
            Ok(())
        })
        .unwrap();
        assert!((d.matrix().column(0) - y.column(0)).norm() <= 1e-6);
    }

    #[test]
    fn online_is_deterministic_and_stays_in_constraint_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = random_matrix(&mut rng, 6, 50);
        let s = crate::groups::build_grid_groups(3, 3, 2, true).unwrap().with_norm(Norm::L2);
        let mut cfg = TrainConfig::new(TrainMode::Online, s, 0.05);
        cfg.steps = 12;
        cfg.batch_size = 16;
        cfg.checkpoint_every = 1;
        cfg.lr0 = 5.0;
        let mut checks = 0;
        let (d1, r1) = train_online(&y, &cfg, |_, _, d| {
            assert!(d.max_atom_norm() <= 1.0 + 1e-12);
            checks += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(checks, 12);
        let (d2, r2) = train_online(&y, &cfg, |_, _, _| Ok(())).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(r1.objective_trace, r2.objective_trace);
    }
}
