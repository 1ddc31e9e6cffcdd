use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use ssdl_core::data::{self, PatchDataset};
use ssdl_core::dictlearn::{self, CalibrationOptions, Dictionary, TrainConfig, TrainMode};
use ssdl_core::groups::{build_grid_groups, build_sequence_groups, build_tree_groups};
use ssdl_core::{prox, DMatrix, Error, GroupStructure, Method, Norm, SolverOptions, SparseCoder, TreeSpec};

use crate::{
    CalibrateArgs, Cli, Command, GroupsArgs, Kind, MethodArg, ModeArg, PatchesArgs, Preprocess, Preset, ProxArgs,
    RenderArgs, SolveArgs, SolverArgs, TrainArgs, EXIT_DATA, EXIT_SOFT, EXIT_USAGE, Q,
};

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    fn soft(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_SOFT,
            message: message.into(),
        }
    }

    pub fn label(&self) -> &'static str {
        if self.code == EXIT_SOFT {
            "warning"
        } else {
            "error"
        }
    }
}

fn code_for(e: &Error) -> u8 {
    match e {
        Error::Domain(_) | Error::Structure(_) => EXIT_USAGE,
        Error::Numeric(_) | Error::Conditioning(_) => EXIT_SOFT,
        Error::Column { source, .. } => code_for(source),
        _ => EXIT_DATA,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: code_for(&e),
            message: e.to_string(),
        }
    }
}

type Outcome<T> = Result<T, Failure>;

fn in_file(path: &Path) -> Outcome<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::data(format!("{}: no such file", path.display())))
    }
}

fn out_file(path: &Path) -> Outcome<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => {
            Err(Failure::usage(format!("{}: directory does not exist", dir.display())))
        }
        _ => Ok(()),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read_matrix(path: &Path) -> Outcome<DMatrix<f64>> {
    data::load_matrix(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Outcome<()> {
    data::save_matrix(path, m).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn read_groups(path: &Path) -> Outcome<GroupStructure> {
    let bytes = fs::read(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::data(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn read_dictionary(path: &Path) -> Outcome<Dictionary> {
    Dictionary::new(read_matrix(path)?).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn int_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// `x` rounded to 6 significant digits, the precision calibration is
/// accurate to; the JSON trace keeps full precision.
fn tidy(x: f64) -> f64 {
    format!("{x:.5e}").parse().unwrap_or(x)
}

fn solver_options(args: &SolverArgs, base: SolverOptions) -> Outcome<(SolverOptions, Option<Method>)> {
    let mut opts = base;
    if let Some(t) = args.tol {
        opts.tol = t;
    }
    if let Some(k) = args.max_iter {
        opts.max_iter = k;
    }
    let method = match args.method {
        MethodArg::Auto => None,
        MethodArg::Fista => Some(Method::Fista),
        MethodArg::Ista => Some(Method::Ista),
        MethodArg::Admm => Some(Method::Admm),
    };
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(Failure::usage("--tol and --max-iter must be positive"));
    }
    Ok((opts, method))
}

pub fn run(cli: &Cli) -> Outcome<()> {
    let workers = cli.workers as usize;
    match &cli.command {
        Command::Groups(a) => groups(a),
        Command::Prox(a) => prox_cmd(a),
        Command::Solve(a) => solve(a),
        Command::Train(a) => train(a, cli.seed, workers),
        Command::Render(a) => render(a),
        Command::Calibrate(a) => calibrate(a, workers),
        Command::Patches(a) => patches(a, cli.seed),
    }
}

fn need(v: Option<usize>, flag: &str) -> Outcome<usize> {
    v.ok_or_else(|| Failure::usage(format!("{flag} is required for this kind")))
}

fn groups(a: &GroupsArgs) -> Outcome<()> {
    out_file(&a.out)?;
    let built = match a.kind {
        Kind::Sequence => build_sequence_groups(need(a.p, "--p")?),
        Kind::Singletons => GroupStructure::singletons(need(a.p, "--p")?),
        Kind::Tree => {
            if a.branching.is_empty() {
                return Err(Failure::usage("--branching is required for a tree"));
            }
            TreeSpec::complete(&a.branching).and_then(|t| build_tree_groups(&t))
        }
        Kind::Grid => build_grid_groups(need(a.h, "--h")?, need(a.w, "--w")?, need(a.e, "--e")?, a.cyclic),
    };
    let norm = match a.q {
        Q::L2 => Norm::L2,
        Q::Linf => Norm::Linf,
    };
    let s = built.map_err(|e| Failure::usage(e.to_string()))?.with_norm(norm);
    write_json(&a.out, &s)?;
    println!("{} groups over {} variables ({:?})", s.len(), s.p(), s.classify());
    Ok(())
}

fn prox_cmd(a: &ProxArgs) -> Outcome<()> {
    in_file(&a.input)?;
    in_file(&a.groups)?;
    out_file(&a.out)?;
    let u = read_matrix(&a.input)?;
    let s = read_groups(&a.groups)?;
    if s.p() != u.nrows() {
        return Err(Failure::data(format!(
            "{} has vectors of length {}, {} describes {} variables",
            a.input.display(),
            u.nrows(),
            a.groups.display(),
            s.p()
        )));
    }
    let tree_like = s.classify().is_tree_like();
    let mut out = DMatrix::zeros(u.nrows(), u.ncols());
    let eye = DMatrix::identity(u.nrows(), u.nrows());
    let opts = SolverOptions {
        tol: 1e-12,
        max_iter: 100_000,
        record_trace: false,
        ..SolverOptions::default()
    };
    let coder = if tree_like {
        None
    } else {
        Some(SparseCoder::new(&eye, &s, a.t, opts, Some(Method::Admm))?)
    };
    for (j, col) in u.column_iter().enumerate() {
        let v = match &coder {
            None => prox::prox_tree(col.as_slice(), &s, a.t)?,
            Some(c) => c.solve(&col.into_owned())?.alpha.as_slice().to_vec(),
        };
        out.set_column(j, &DMatrix::from_column_slice(v.len(), 1, &v).column(0));
    }
    write_matrix(&a.out, &out)?;
    println!(
        "prox of {} vectors via {}",
        u.ncols(),
        if tree_like { "tree composition" } else { "admm" }
    );
    Ok(())
}

#[derive(Serialize)]
struct ColumnReport {
    column: usize,
    objective: f64,
    iterations: usize,
    converged: bool,
    support_size: usize,
}

#[derive(Serialize)]
struct SolveReport {
    method: Method,
    lambda: f64,
    dictionary: String,
    signal: String,
    columns: Vec<ColumnReport>,
}

fn solve(a: &SolveArgs) -> Outcome<()> {
    in_file(&a.dict)?;
    in_file(&a.signal)?;
    if let Some(g) = &a.groups {
        in_file(g)?;
    }
    out_file(&a.out)?;
    let report_path = a.report.clone().unwrap_or_else(|| with_suffix(&a.out, ".json"));
    out_file(&report_path)?;

    let d = read_matrix(&a.dict)?;
    let y = read_matrix(&a.signal)?;
    if y.nrows() != d.nrows() {
        return Err(Failure::data(format!(
            "{} has signals of length {}, but {} has {} rows",
            a.signal.display(),
            y.nrows(),
            a.dict.display(),
            d.nrows()
        )));
    }
    let s = match &a.groups {
        Some(g) => read_groups(g)?,
        None => GroupStructure::singletons(d.ncols())?,
    };
    if s.p() != d.ncols() {
        return Err(Failure::data(format!(
            "{} has {} atoms, but {} describes {} variables",
            a.dict.display(),
            d.ncols(),
            a.groups.as_deref().unwrap_or(Path::new("-")).display(),
            s.p()
        )));
    }
    let columns: Vec<usize> = match a.column {
        Some(c) if c >= 1 && c <= y.ncols() => vec![c - 1],
        Some(c) => {
            return Err(Failure::usage(format!(
                "--column {c} is outside 1..={} of {}",
                y.ncols(),
                a.signal.display()
            )))
        }
        None => (0..y.ncols()).collect(),
    };
    let base = SolverOptions {
        record_trace: a.trace,
        ..SolverOptions::default()
    };
    let (opts, method) = solver_options(&a.solver, base)?;
    let coder = SparseCoder::new(&d, &s, a.lambda, opts, method)?;
    let mut alphas = DMatrix::zeros(d.ncols(), columns.len());
    let mut reports = Vec::new();
    for (k, &c) in columns.iter().enumerate() {
        let res = coder
            .solve(&y.column(c).into_owned())
            .map_err(|e| Failure::from(Error::Column {
                column: c + 1,
                source: Box::new(e),
            }))?;
        if a.trace {
            eprintln!("column={}", c + 1);
            for line in res.diagnostics() {
                eprintln!("{line}");
            }
        }
        println!(
            "column {}: objective={:e} iterations={} support={} method={}",
            c + 1,
            res.objective(),
            res.iterations,
            res.support.len(),
            res.method
        );
        alphas.set_column(k, &res.alpha);
        reports.push(ColumnReport {
            column: c + 1,
            objective: res.objective(),
            iterations: res.iterations,
            converged: res.converged,
            support_size: res.support.len(),
        });
    }
    write_matrix(&a.out, &alphas)?;
    write_json(
        &report_path,
        &SolveReport {
            method: coder.method(),
            lambda: a.lambda,
            dictionary: a.dict.display().to_string(),
            signal: a.signal.display().to_string(),
            columns: reports,
        },
    )
}

#[derive(Serialize)]
struct Checkpoint {
    m: usize,
    p: usize,
    lambda: f64,
    step: usize,
    seed: u64,
}

fn write_checkpoint(out: &Path, dict: &Dictionary, lambda: f64, step: usize, seed: u64) -> Outcome<()> {
    write_matrix(out, dict.matrix())?;
    write_json(
        &with_suffix(out, ".json"),
        &Checkpoint {
            m: dict.m(),
            p: dict.p(),
            lambda,
            step,
            seed,
        },
    )
}

fn train(a: &TrainArgs, seed: u64, workers: usize) -> Outcome<()> {
    in_file(&a.data)?;
    if let Some(g) = &a.groups {
        in_file(g)?;
    }
    out_file(&a.out)?;
    let penalty = match (&a.groups, a.preset) {
        (Some(g), _) => read_groups(g)?,
        (None, Preset::Hierarchical) => {
            let branching = if a.branching.is_empty() {
                vec![10, 2, 2]
            } else {
                a.branching.clone()
            };
            let tree = TreeSpec::complete(&branching).map_err(|e| Failure::usage(e.to_string()))?;
            build_tree_groups(&tree)?.with_norm(Norm::Linf)
        }
        (None, Preset::Topographic) => {
            let p = a.p.unwrap_or(400);
            let side = int_sqrt(p).ok_or_else(|| Failure::usage(format!("--p {p} is not a perfect square")))?;
            build_grid_groups(side, side, 3.min(side), true)
                .map_err(|e| Failure::usage(e.to_string()))?
                .with_norm(Norm::L2)
        }
    };
    let mode = match (a.mode, a.preset) {
        (Some(ModeArg::Alternating), _) | (None, Preset::Hierarchical) => TrainMode::Alternating,
        (Some(ModeArg::Online), _) | (None, Preset::Topographic) => TrainMode::Online,
    };
    let target = a.target_ratio.or(match (a.preset, a.lambda) {
        (Preset::Topographic, None) => Some(0.4),
        _ => None,
    });
    let base = match mode {
        TrainMode::Alternating => SolverOptions {
            tol: 1e-8,
            max_iter: 2000,
            record_trace: false,
            ..SolverOptions::default()
        },
        TrainMode::Online => SolverOptions {
            tol: 1e-3,
            max_iter: 40,
            adapt_gamma: false,
            record_trace: false,
            ..SolverOptions::default()
        },
    };
    let (solver, method) = solver_options(&a.solver, base)?;
    if method.is_some() {
        return Err(Failure::usage("train picks the solver from the group structure; drop --method"));
    }

    let y = read_matrix(&a.data)?;
    let mut cfg = TrainConfig::new(mode, penalty, a.lambda.unwrap_or(0.1));
    cfg.seed = seed;
    cfg.workers = workers;
    cfg.target_ratio = target;
    cfg.solver = solver;
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.steps = a.steps.unwrap_or(2000);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.lr0 = a.lr0.unwrap_or(cfg.lr0);
    cfg.lr_t0 = a.lr_t0;
    cfg.calibration_sample = a.calibration_sample.unwrap_or(cfg.calibration_sample);
    cfg.checkpoint_every = a.checkpoint_every;

    let mut ckpt_err = None;
    let result = match mode {
        TrainMode::Alternating => dictlearn::train_alternating(&y, &cfg),
        TrainMode::Online => dictlearn::train_online(&y, &cfg, |step, lambda, d| {
            if let Err(e) = write_checkpoint(&a.out, d, lambda, step, seed) {
                ckpt_err = Some(e);
                return Err(Error::Domain("checkpoint failed".into()));
            }
            Ok(())
        }),
    };
    if let Some(e) = ckpt_err {
        return Err(e);
    }
    let (dict, report) = result?;
    let rounds = report.rounds;
    write_checkpoint(&a.out, &dict, report.lambda, rounds, seed)?;
    write_json(&with_suffix(&a.out, ".report.json"), &report)?;
    let last = report.objective_trace.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} atoms of dimension {} ({:?}, {} rounds): lambda={:e} objective={:e}",
        dict.p(),
        dict.m(),
        mode,
        rounds,
        report.lambda,
        last
    );
    if let Some(cal) = &report.calibration {
        if !cal.reached {
            return Err(Failure::soft(format!(
                "target ratio {} not reached; trained with boundary lambda {:e} (ratio {:.4})",
                cal.target, cal.lambda, cal.mean_ratio
            )));
        }
    }
    Ok(())
}

fn render(a: &RenderArgs) -> Outcome<()> {
    in_file(&a.dict)?;
    out_file(&a.out)?;
    let d = read_matrix(&a.dict)?;
    let (m, p) = d.shape();
    let (ah, aw) = match (a.atom_h, a.atom_w) {
        (Some(h), Some(w)) => (h, w),
        (Some(h), None) if h > 0 && m % h == 0 => (h, m / h),
        (None, Some(w)) if w > 0 && m % w == 0 => (m / w, w),
        (None, None) => {
            let s = int_sqrt(m).ok_or_else(|| Failure::usage(format!("atoms of length {m} are not square; pass --atom-h/--atom-w")))?;
            (s, s)
        }
        _ => return Err(Failure::usage(format!("atom shape does not divide length {m}"))),
    };
    let (gr, gc) = match (a.grid_rows, a.grid_cols) {
        (Some(r), Some(c)) => (r, c),
        (Some(r), None) if r > 0 => (r, p.div_ceil(r)),
        (None, Some(c)) if c > 0 => (p.div_ceil(c), c),
        (None, None) => {
            let s = int_sqrt(p).ok_or_else(|| Failure::usage(format!("{p} atoms do not form a square grid; pass --grid-rows/--grid-cols")))?;
            (s, s)
        }
        _ => return Err(Failure::usage("grid dimensions must be positive")),
    };
    let img = data::render_mosaic(&d, ah, aw, gr, gc, a.pad).map_err(|e| Failure::usage(e.to_string()))?;
    data::write_pgm(&a.out, &img).map_err(|e| Failure::data(format!("{}: {e}", a.out.display())))?;
    println!("{}x{} mosaic of {p} atoms ({gr}x{gc} grid)", img.height(), img.width());
    Ok(())
}

fn calibrate(a: &CalibrateArgs, workers: usize) -> Outcome<()> {
    in_file(&a.dict)?;
    in_file(&a.sample)?;
    if let Some(g) = &a.groups {
        in_file(g)?;
    }
    out_file(&a.out)?;
    let dict = read_dictionary(&a.dict)?;
    let sample = read_matrix(&a.sample)?;
    if sample.nrows() != dict.m() {
        return Err(Failure::data(format!(
            "{} has signals of length {}, but {} has {} rows",
            a.sample.display(),
            sample.nrows(),
            a.dict.display(),
            dict.m()
        )));
    }
    let s = match &a.groups {
        Some(g) => read_groups(g)?,
        None => GroupStructure::singletons(dict.p())?,
    };
    if s.p() != dict.p() {
        return Err(Failure::data(format!(
            "{} has {} atoms, but the group structure describes {} variables",
            a.dict.display(),
            dict.p(),
            s.p()
        )));
    }
    let keep: Vec<usize> = (0..sample.ncols()).filter(|&i| sample.column(i).norm() > 0.0).collect();
    if keep.len() < sample.ncols() {
        eprintln!("note: ignoring {} zero columns", sample.ncols() - keep.len());
    }
    let sample = sample.select_columns(&keep);
    let base = SolverOptions {
        tol: 1e-8,
        max_iter: 2000,
        record_trace: false,
        ..SolverOptions::default()
    };
    let (opts, method) = solver_options(&a.solver, base)?;
    if method.is_some() {
        return Err(Failure::usage("calibrate picks the solver from the group structure; drop --method"));
    }
    let cal = dictlearn::calibrate_lambda(
        &dict,
        &sample,
        &s,
        a.target,
        &opts,
        &CalibrationOptions {
            workers,
            ..CalibrationOptions::default()
        },
    )?;
    write_json(&a.out, &cal)?;
    println!("{}", tidy(cal.lambda));
    if !cal.reached {
        return Err(Failure::soft(format!(
            "target ratio {} unreachable; boundary lambda gives ratio {:.4}",
            a.target, cal.mean_ratio
        )));
    }
    Ok(())
}

fn patches(a: &PatchesArgs, seed: u64) -> Outcome<()> {
    if let Some(img) = &a.image {
        in_file(img)?;
    }
    out_file(&a.out)?;
    if let Some(w) = &a.whitening_out {
        out_file(w)?;
        if a.preprocess != Preprocess::Whiten {
            return Err(Failure::usage("--whitening-out needs --preprocess whiten"));
        }
    }
    let img = match (&a.image, a.synthetic) {
        (Some(path), _) => data::read_pgm(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?,
        (None, Some(side)) => data::dead_leaves(side, side, seed),
        (None, None) => return Err(Failure::usage("pass --image or --synthetic")),
    };
    let raw = data::extract_patches(&img, a.size, a.count, seed)?;
    let (ds, note): (PatchDataset, String) = match a.preprocess {
        Preprocess::None => (raw, String::new()),
        Preprocess::Normalize => {
            let (ds, dropped) = data::center_and_normalize(&raw)?;
            (ds, format!(", {dropped} constant patches dropped"))
        }
        Preprocess::Whiten => {
            let centered = data::remove_dc(&raw)?;
            let t = data::fit_whitening(&centered, a.whitening_eps)?;
            if let Some(w) = &a.whitening_out {
                data::save_whitening(w, &t).map_err(|e| Failure::data(format!("{}: {e}", w.display())))?;
            }
            let note = format!(", whitened ({} of {} dimensions above the floor)", t.retained_dims, t.mean.len());
            (data::apply_whitening(&centered, &t)?, note)
        }
    };
    write_matrix(&a.out, ds.matrix())?;
    println!("{} patches of {}x{}{note}", ds.n(), ds.patch_h(), ds.patch_w());
    Ok(())
}
