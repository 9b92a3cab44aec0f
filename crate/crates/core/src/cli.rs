//! Command-line interface: scene generation, solving, evaluation,
//! benchmarking and export.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::WorldMode;
use crate::io::{bench_csv, evaluate, pointcloud_ply, trace_csv, BenchRow, ResultFile, SceneFile};
use crate::propagation::{BpConfig, PriorPolicy};
use crate::scenes::{
    generate_2d, generate_3d, observation_noise, perturb_priors, reprojection_error, solve_scene, NoiseSpec, Scene,
};
use crate::unscented::SigmaScheme;

#[derive(Debug, Parser)]
#[command(name = "pgm-sam", version, about = "Structure and motion by loopy Gaussian belief propagation")]
pub struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true, env = "PGM_SAM_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene with ground truth and perturbed priors.
    Generate(GenerateArgs),
    /// Solve a scene file and write a result file.
    Solve(SolveArgs),
    /// Compare prior and posterior re-projection errors of a solved scene.
    Eval(EvalArgs),
    /// Sweep scene sizes and noise levels, one CSV row per cell.
    Bench(BenchArgs),
    /// Export a result as a point cloud or an error trace.
    Export(ExportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    #[value(name = "2d")]
    TwoD,
    #[value(name = "3d")]
    ThreeD,
}

impl From<ModeArg> for WorldMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::TwoD => WorldMode::TwoD,
            ModeArg::ThreeD => WorldMode::ThreeD,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Symmetric,
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PriorPolicyArg {
    Original,
    Chained,
}

/// Prior noise applied when fitting priors to ground truth.
#[derive(Clone, Debug, Args)]
pub struct NoiseArgs {
    /// Camera angle noise, degrees.
    #[arg(long, default_value_t = 5.0)]
    pub angle_noise: f64,
    /// Camera position noise, scene units.
    #[arg(long, default_value_t = 0.5)]
    pub pos_noise: f64,
    /// Feature position noise (defaults to the position noise).
    #[arg(long)]
    pub feat_noise: Option<f64>,
    /// Centre every feature prior at the origin with this standard deviation
    /// instead of perturbing the truth.
    #[arg(long)]
    pub feat_prior_std: Option<f64>,
}

impl NoiseArgs {
    pub fn spec(&self, pixel_sigma: f64, drop: f64) -> NoiseSpec {
        NoiseSpec {
            angle_std_deg: self.angle_noise,
            position_std: self.pos_noise,
            feature_std: self.feat_noise.unwrap_or(self.pos_noise),
            pixel_std: pixel_sigma,
            visibility_drop_prob: drop,
            feature_prior_std: self.feat_prior_std,
        }
    }
}

#[derive(Clone, Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum, default_value = "3d")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 5)]
    pub cams: usize,
    #[arg(long, default_value_t = 50)]
    pub feats: usize,
    #[command(flatten)]
    pub noise: NoiseArgs,
    /// Expected measurement noise stored with every track.
    #[arg(long, default_value_t = 1e-3)]
    pub pixel_sigma: f64,
    /// Standard deviation of noise actually added to the projections.
    #[arg(long, default_value_t = 0.0)]
    pub obs_noise: f64,
    /// Probability of dropping a projection (planar scenes only).
    #[arg(long, default_value_t = 0.3)]
    pub drop: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output scene file.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct SolverArgs {
    /// Weight of the centre sigma point (standard scheme).
    #[arg(long, default_value_t = 1.0 / 3.0)]
    pub w0: f64,
    #[arg(long, value_enum, default_value = "standard")]
    pub scheme: SchemeArg,
    /// Weight of the previous message when blending.
    #[arg(long, default_value_t = 0.3)]
    pub damping: f64,
    /// Covariance inflation factor applied on a stall.
    #[arg(long, default_value_t = 10.0)]
    pub inflation: f64,
    #[arg(long, default_value_t = 50)]
    pub max_outer: usize,
    #[arg(long, default_value_t = 200)]
    pub max_inner: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub inner_tol: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub outer_tol: f64,
    /// Override every track's measurement noise.
    #[arg(long)]
    pub sigma_obs: Option<f64>,
    /// Source of the prior factors after the first outer iteration.
    #[arg(long, value_enum, default_value = "original")]
    pub prior_policy: PriorPolicyArg,
    /// Weight of the proximal term built from the previous posterior.
    #[arg(long, default_value_t = 0.1)]
    pub proximal: f64,
    /// Reset messages at every outer iteration.
    #[arg(long)]
    pub cold_start: bool,
    /// Pin the first camera and one centre coordinate of the second.
    #[arg(long)]
    pub anchor: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SolverArgs {
    pub fn config(&self) -> Result<BpConfig> {
        let config = BpConfig {
            inner_tol: self.inner_tol,
            max_inner_sweeps: self.max_inner,
            max_outer_iters: self.max_outer,
            outer_tol: self.outer_tol,
            inflation: self.inflation,
            damping: self.damping,
            sigma_obs: self.sigma_obs,
            scheme: match self.scheme {
                SchemeArg::Symmetric => SigmaScheme::Symmetric,
                SchemeArg::Standard => SigmaScheme::Standard { w0: self.w0 },
            },
            anchor_gauge: self.anchor,
            prior_policy: match self.prior_policy {
                PriorPolicyArg::Original => PriorPolicy::Original,
                PriorPolicyArg::Chained => PriorPolicy::Chained,
            },
            proximal_weight: self.proximal,
            warm_start: !self.cold_start,
            seed: self.seed,
            ..BpConfig::default()
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Debug, Args)]
pub struct SolveArgs {
    /// Scene file.
    pub scene: PathBuf,
    /// Output result file.
    #[arg(long, short)]
    pub out: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Fit fresh priors to the scene's ground truth instead of reading them.
    #[arg(long)]
    pub priors_from_truth: bool,
    #[command(flatten)]
    pub noise: NoiseArgs,
    /// Suppress the per-iteration trace.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    pub scene: PathBuf,
    pub result: PathBuf,
    /// Write the report here instead of standard output.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value = "3d")]
    pub mode: ModeArg,
    /// Scene rows as `CAMSxFEATS@SIGMA`, e.g. `5x50@1e-4`; repeatable.
    #[arg(long = "row", value_parser = parse_row)]
    pub rows: Vec<(usize, usize, f64)>,
    /// Prior noise columns as `DEGREES:POSITION`, e.g. `5:0.5`; repeatable.
    #[arg(long = "noise", value_parser = parse_noise)]
    pub noise: Vec<(f64, f64)>,
    /// Use the benchmark table's seven rows and three noise columns.
    #[arg(long)]
    pub table: bool,
    /// Seeds per cell (0, 1, ...).
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Planar drop probability.
    #[arg(long, default_value_t = 0.3)]
    pub drop: f64,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Pointcloud,
    TraceCsv,
}

#[derive(Clone, Debug, Args)]
pub struct ExportArgs {
    pub result: PathBuf,
    #[arg(long, value_enum)]
    pub format: ExportFormat,
    #[arg(long, short)]
    pub out: PathBuf,
}

fn parse_row(s: &str) -> std::result::Result<(usize, usize, f64), String> {
    let err = || format!("expected CAMSxFEATS@SIGMA, got {s:?}");
    let (dims, sigma) = s.split_once('@').ok_or_else(err)?;
    let (c, f) = dims.split_once('x').ok_or_else(err)?;
    Ok((
        c.trim().parse().map_err(|_| err())?,
        f.trim().parse().map_err(|_| err())?,
        sigma.trim().parse().map_err(|_| err())?,
    ))
}

fn parse_noise(s: &str) -> std::result::Result<(f64, f64), String> {
    let err = || format!("expected DEGREES:POSITION, got {s:?}");
    let (a, p) = s.split_once(':').ok_or_else(err)?;
    Ok((a.trim().parse().map_err(|_| err())?, p.trim().parse().map_err(|_| err())?))
}

/// Rows and noise columns of the benchmark table.
pub const TABLE_ROWS: [(usize, usize, f64); 7] = [
    (5, 50, 0.0001),
    (5, 100, 0.0007),
    (7, 60, 0.0004),
    (10, 100, 0.0012),
    (10, 200, 0.0020),
    (20, 200, 0.0030),
    (30, 500, 0.0040),
];
pub const TABLE_NOISE: [(f64, f64); 3] = [(5.0, 0.5), (10.0, 1.0), (20.0, 4.0)];

pub fn generate_scene(mode: WorldMode, cams: usize, feats: usize, drop: f64, seed: u64) -> Result<Scene> {
    match mode {
        WorldMode::ThreeD => generate_3d(cams, feats, seed),
        WorldMode::TwoD => generate_2d(cams, feats, drop, seed),
    }
}

pub fn run_generate(args: &GenerateArgs) -> Result<()> {
    let mode = WorldMode::from(args.mode);
    let noise = args.noise.spec(args.pixel_sigma, args.drop);
    noise.validate()?;
    if !(args.pixel_sigma > 0.0) {
        return Err(Error::InvalidArgument("--pixel-sigma must be positive".into()));
    }
    let mut scene = generate_scene(mode, args.cams, args.feats, args.drop, args.seed)?;
    scene.set_track_sigma(args.pixel_sigma);
    let scene = observation_noise(&scene, args.obs_noise, args.seed)?;
    let priors = perturb_priors(&scene, &noise, args.seed)?;
    SceneFile::from_scene(&scene, Some(&priors)).write(&args.out)
}

pub fn run_solve(args: &SolveArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let config = args.solver.config()?;
    let (scene, file_priors) = SceneFile::read(&args.scene)?.to_scene()?;
    let priors = if args.priors_from_truth {
        let noise = args.noise.spec(0.0, 0.0);
        perturb_priors(&scene, &noise, config.seed)?
    } else {
        file_priors.ok_or_else(|| {
            Error::InvalidArgument("scene has no priors section; pass --priors-from-truth".into())
        })?
    };
    let quiet = args.quiet;
    let estimate = solve_scene(&scene, &priors, &config, |r| {
        if !quiet {
            let _ = writeln!(
                out,
                "iter {:>3}  error {:.6e}  best {:.6e}  sweeps {:>4}{}{}",
                r.iteration,
                r.error,
                r.best_error,
                r.inner_sweeps,
                if r.inner_converged { "" } else { "  (inner not converged)" },
                if r.inflated { "  inflated" } else { "" }
            );
        }
    })?;
    ResultFile::from_estimate(&estimate, &config).write(&args.out)?;
    let final_err = reprojection_error(&estimate, &scene)?.mean;
    writeln!(
        out,
        "accepted iteration {}  re-projection error {:.6e}",
        estimate.accepted_iteration.map_or("-".into(), |i| i.to_string()),
        final_err
    )?;
    Ok(())
}

pub fn run_eval(args: &EvalArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let (scene, priors) = SceneFile::read(&args.scene)?.to_scene()?;
    let result = ResultFile::read(&args.result)?;
    if result.mode != scene.mode {
        return Err(Error::Mismatch("scene and result modes differ".into()));
    }
    let report = evaluate(&scene, priors.as_ref(), &result.to_estimate()?)?;
    let text = report.to_csv()?;
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Run one benchmark cell over `seeds` seeds. Per-seed failures are counted,
/// not propagated.
pub fn bench_cell(
    mode: WorldMode,
    (cams, feats, sigma): (usize, usize, f64),
    (angle, pos): (f64, f64),
    seeds: u64,
    drop: f64,
    config: &BpConfig,
) -> BenchRow {
    let mut prior_sum = 0.0;
    let mut post_sum = 0.0;
    let mut ok = 0;
    let mut first_failure = String::new();
    for seed in 0..seeds {
        let run = || -> Result<(f64, f64)> {
            let mut scene = generate_scene(mode, cams, feats, drop, seed)?;
            scene.set_track_sigma(sigma);
            let priors = perturb_priors(&scene, &NoiseSpec::table(angle, pos), seed)?;
            let prior_err = reprojection_error(&crate::propagation::PosteriorEstimate::from_priors(mode, &priors), &scene)?.mean;
            let config = BpConfig { seed, ..config.clone() };
            let est = solve_scene(&scene, &priors, &config, |_| {})?;
            Ok((prior_err, reprojection_error(&est, &scene)?.mean))
        };
        match run() {
            Ok((a, b)) => {
                prior_sum += a;
                post_sum += b;
                ok += 1;
            }
            Err(e) => {
                if first_failure.is_empty() {
                    first_failure = format!("seed {seed}: {e}");
                }
            }
        }
    }
    let mean = |s: f64| if ok > 0 { s / ok as f64 } else { f64::NAN };
    BenchRow {
        mode,
        cams,
        feats,
        sigma,
        angle_noise_deg: angle,
        pos_noise: pos,
        seeds_ok: ok,
        seeds_failed: seeds as usize - ok,
        mean_prior_error: mean(prior_sum),
        mean_posterior_error: mean(post_sum),
        first_failure,
    }
}

/// A benchmark cell: scene row and prior noise column.
pub type BenchCell = ((usize, usize, f64), (f64, f64));

/// Cells in grid order, row by row.
pub fn bench_grid(args: &BenchArgs) -> Result<Vec<BenchCell>> {
    let mut rows = args.rows.clone();
    let mut noise = args.noise.clone();
    if args.table {
        rows.extend(TABLE_ROWS);
        noise.extend(TABLE_NOISE);
    }
    if rows.is_empty() || noise.is_empty() {
        return Err(Error::InvalidArgument("bench needs at least one --row and one --noise (or --table)".into()));
    }
    Ok(rows.iter().flat_map(|&r| noise.iter().map(move |&n| (r, n))).collect())
}

pub fn run_bench(args: &BenchArgs) -> Result<Vec<BenchRow>> {
    let config = args.solver.config()?;
    let mode = WorldMode::from(args.mode);
    let cells = bench_grid(args)?;
    // collect keeps grid order whatever order the cells finish in
    let out: Vec<BenchRow> = cells
        .par_iter()
        .map(|&(r, n)| bench_cell(mode, r, n, args.seeds, args.drop, &config))
        .collect();
    std::fs::write(&args.out, bench_csv(&out)?)?;
    Ok(out)
}

pub fn run_export(args: &ExportArgs) -> Result<()> {
    let est = ResultFile::read(&args.result)?.to_estimate()?;
    let text = match args.format {
        ExportFormat::Pointcloud => pointcloud_ply(&est),
        ExportFormat::TraceCsv => trace_csv(&est),
    };
    Ok(std::fs::write(&args.out, text)?)
}

/// Dispatch a parsed command line, writing progress to `out`.
pub fn run(cli: &Cli, out: &mut dyn std::io::Write) -> Result<()> {
    if let Some(n) = cli.threads {
        // A global pool can be installed once; later calls keep the first.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Generate(a) => run_generate(a),
        Command::Solve(a) => run_solve(a, out),
        Command::Eval(a) => run_eval(a, out),
        Command::Bench(a) => {
            let rows = run_bench(a)?;
            let failed: usize = rows.iter().map(|r| r.seeds_failed).sum();
            writeln!(out, "{} cells written to {}; {failed} failed seeds", rows.len(), a.out.display())?;
            Ok(())
        }
        Command::Export(a) => run_export(a),
    }
}
