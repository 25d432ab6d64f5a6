//! Command-line front end: config parsing, subcommand dispatch, artifact
//! output into per-run directories.
//!
//! Every subcommand resolves its configuration (file plus flag overrides),
//! creates a timestamped run directory under the output root, echoes the
//! resolved config back as JSON for exact replay, and writes its artifacts
//! there. Exit codes: 0 success, 1 validation error, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use fewstep::config::{ExperimentConfig, WeightMode, FORMAT_VERSION};
use fewstep::denoiser::DenoiserHandle;
use fewstep::eval::compare_schedules;
use fewstep::finetune::{export_weight_scheme, run_two_stage};
use fewstep::io;
use fewstep::rng::{normal_vec, stream, substream};
use fewstep::sampler::sample;
use fewstep::schedule::Schedule;
use fewstep::sched_opt::EstimatorKind;

#[derive(Parser)]
#[command(
    name = "fewstep",
    version,
    about = "Few-step diffusion sampler optimization: learned schedules and finetuned denoisers"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; run directories are created beneath it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Schedule length override.
    #[arg(long)]
    n_steps: Option<usize>,
    /// Discretization-loss scaler override for stage 1.
    #[arg(long)]
    gamma: Option<f64>,
    /// Gradient estimator: efficient | full-unroll | finite-diff.
    #[arg(long)]
    estimator: Option<String>,
    /// Stage-2 weighting: learned | original.
    #[arg(long)]
    weights: Option<String>,
    /// Expected config format version.
    #[arg(long, default_value_t = FORMAT_VERSION)]
    format_version: u32,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample a data batch from the configured mixture.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of samples.
        #[arg(long, default_value_t = 1024)]
        count: usize,
    },
    /// Stage-1 schedule optimization only.
    Optimize {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Stage-2 denoiser finetuning only (schedule from the config init).
    Finetune {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// The full two-stage alternation.
    Run {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Draw samples and write the trajectories.
    Sample {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of samples.
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Evaluate one or more schedule files.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated schedule JSON paths.
        #[arg(long, value_delimiter = ',')]
        schedules: Vec<PathBuf>,
    },
    /// Export the weighting scheme of one or more schedule files.
    ExportWeights {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated schedule JSON paths.
        #[arg(long, value_delimiter = ',')]
        schedules: Vec<PathBuf>,
    },
}

/// Parse and execute; returns the process exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(CliError::Validation(e)) => {
            eprintln!("error: {e:#}");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

enum CliError {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

fn validation<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError::Validation(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError::Runtime(e.into())
}

/// Config resolved from the file plus flag overrides.
struct Resolved {
    cfg: ExperimentConfig,
    base_dir: PathBuf,
    run_dir: PathBuf,
}

fn resolve(common: &CommonArgs, subcommand: &str) -> Result<Resolved, CliError> {
    if common.format_version != FORMAT_VERSION {
        return Err(validation(anyhow!(
            "unsupported --format-version {} (this build writes {FORMAT_VERSION})",
            common.format_version
        )));
    }
    let mut cfg = ExperimentConfig::load(&common.config)
        .with_context(|| format!("loading config {}", common.config.display()))
        .map_err(CliError::Validation)?;
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    if let Some(n) = common.n_steps {
        cfg.schedule.n_steps = n;
    }
    if let Some(g) = common.gamma {
        cfg.run.gamma = g;
    }
    if let Some(est) = &common.estimator {
        cfg.run.estimator = match est.as_str() {
            "efficient" => EstimatorKind::Efficient,
            "full-unroll" => EstimatorKind::FullUnroll,
            "finite-diff" => EstimatorKind::FiniteDiff,
            other => {
                return Err(validation(anyhow!("unknown --estimator {other}")));
            }
        };
    }
    if let Some(w) = &common.weights {
        cfg.run.weights = match w.as_str() {
            "learned" => WeightMode::Learned,
            "original" => WeightMode::Original,
            other => return Err(validation(anyhow!("unknown --weights {other}"))),
        };
    }
    cfg.validate().map_err(validation)?;

    let base_dir =
        common.config.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let out_root = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    let run_dir = out_root.join(format!("{subcommand}-{stamp}"));
    std::fs::create_dir_all(&run_dir).map_err(runtime)?;

    // Echo enough to replay the run exactly.
    #[derive(serde::Serialize)]
    struct Echo<'a> {
        subcommand: &'a str,
        format_version: u32,
        seed: u64,
        config: &'a ExperimentConfig,
    }
    io::save_json(
        &Echo { subcommand, format_version: FORMAT_VERSION, seed: cfg.run.seed, config: &cfg },
        &run_dir.join("config_echo.json"),
    )
    .map_err(runtime)?;

    Ok(Resolved { cfg, base_dir, run_dir })
}

fn load_schedules(paths: &[PathBuf], base_dir: &Path) -> Result<Vec<(String, Schedule)>, CliError> {
    if paths.is_empty() {
        return Err(validation(anyhow!("--schedules requires at least one path")));
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let full = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
        let s = io::load_schedule(&full)
            .with_context(|| format!("loading schedule {}", full.display()))
            .map_err(CliError::Validation)?;
        let id = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string());
        out.push((id, s));
    }
    Ok(out)
}

/// Denoiser as configured, pretrained when trainable.
fn prepared_denoiser(r: &Resolved) -> Result<DenoiserHandle, CliError> {
    let cfg = &r.cfg;
    let gmm = cfg.problem.build().map_err(validation)?;
    let mut h = cfg.build_denoiser(&mut stream(cfg.run.seed, "init")).map_err(validation)?;
    if matches!(h, DenoiserHandle::Mlp(_)) && cfg.run.pretrain_iters > 0 {
        fewstep::finetune::pretrain_denoiser(
            &mut h,
            &gmm,
            cfg.schedule.range().map_err(validation)?,
            fewstep::finetune::LognormalSigma::for_data(&gmm),
            cfg.run.pretrain_iters,
            cfg.run.batch_size,
            cfg.run.lr_denoiser,
            &mut stream(cfg.run.seed, "pretrain"),
        )
        .map_err(runtime)?;
    }
    Ok(h)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    init_thread_pool();
    match cli.cmd {
        Cmd::GenData { common, count } => {
            let r = resolve(&common, "gen-data")?;
            let gmm = r.cfg.problem.build().map_err(validation)?;
            let batch =
                gmm.sample_batch(count, &mut stream(r.cfg.run.seed, "data"));
            io::write_data_csv(&batch, r.cfg.run.seed, &r.run_dir.join("data.csv"))
                .map_err(runtime)?;
            println!("{}", r.run_dir.display());
            Ok(())
        }
        Cmd::Optimize { common } => {
            let mut r = resolve(&common, "optimize")?;
            r.cfg.run.stage2_iters = 0;
            r.cfg.run.max_outer = 1;
            let out = run_two_stage(&r.cfg, &r.base_dir).map_err(runtime)?;
            io::write_history_csv(&out.history, &r.run_dir.join("optimize_history.csv"))
                .map_err(runtime)?;
            io::save_schedule(&out.schedule, &r.run_dir.join("schedule.json")).map_err(runtime)?;
            println!("{}", r.run_dir.display());
            Ok(())
        }
        Cmd::Finetune { common } => {
            let mut r = resolve(&common, "finetune")?;
            r.cfg.run.stage1_iters = 0;
            r.cfg.run.max_outer = 1;
            let out = run_two_stage(&r.cfg, &r.base_dir).map_err(runtime)?;
            io::write_history_csv(&out.history, &r.run_dir.join("finetune_history.csv"))
                .map_err(runtime)?;
            let mlp = out.denoiser.as_mlp().map_err(runtime)?;
            mlp.mlp()
                .save(&r.run_dir.join("mlp_params.bin"), &r.run_dir.join("mlp_params.json"))
                .map_err(runtime)?;
            println!("{}", r.run_dir.display());
            Ok(())
        }
        Cmd::Run { common } => {
            let r = resolve(&common, "run")?;
            let out = run_two_stage(&r.cfg, &r.base_dir).map_err(runtime)?;
            io::write_history_csv(&out.history, &r.run_dir.join("loss_history.csv"))
                .map_err(runtime)?;
            io::save_schedule(&out.schedule, &r.run_dir.join("schedule.json")).map_err(runtime)?;
            io::write_weight_csv(
                &export_weight_scheme(&out.schedule),
                &r.run_dir.join("weight_scheme.csv"),
            )
            .map_err(runtime)?;
            if let Ok(mlp) = out.denoiser.as_mlp() {
                mlp.mlp()
                    .save(&r.run_dir.join("mlp_params.bin"), &r.run_dir.join("mlp_params.json"))
                    .map_err(runtime)?;
            }
            println!("{}", r.run_dir.display());
            Ok(())
        }
        Cmd::Sample { common, count } => {
            let r = resolve(&common, "sample")?;
            let h = prepared_denoiser(&r)?;
            let sched = r.cfg.schedule.initial_schedule(&r.base_dir).map_err(validation)?;
            let dim = r.cfg.problem.dim;
            let mut rows = Vec::new();
            for k in 0..count as u64 {
                let mut rng = substream(r.cfg.run.seed, "sample", k);
                let eps = normal_vec(&mut rng, dim);
                let x0: Vec<f64> =
                    eps.iter().map(|e| sched.sigma_max() * e).collect();
                let (_, traj) = sample(&h, &sched, &x0).map_err(runtime)?;
                for (step, sigma) in sched.sigmas().iter().enumerate() {
                    rows.push(io::TrajectoryRow {
                        seed: k,
                        step,
                        sigma: *sigma,
                        x: traj.iterates[step].clone(),
                        d: traj.denoised[step].clone(),
                    });
                }
            }
            io::write_trajectory_csv(&rows, dim, &r.run_dir.join("trajectories.csv"))
                .map_err(runtime)?;
            println!("{}", r.run_dir.display());
            Ok(())
        }
        Cmd::Eval { common, schedules } => {
            let r = resolve(&common, "eval")?;
            let pairs = load_schedules(&schedules, &r.base_dir)?;
            let h = prepared_denoiser(&r)?;
            let gmm = r.cfg.problem.build().map_err(validation)?;
            let reports = compare_schedules(&pairs, &h, &gmm, &r.cfg.eval, r.cfg.run.seed)
                .map_err(runtime)?;
            let rows: Vec<_> = reports.iter().flat_map(|rep| rep.rows()).collect();
            io::write_eval_csv(&rows, &r.run_dir.join("eval.csv")).map_err(runtime)?;
            println!("{}", r.run_dir.display());
            Ok(())
        }
        Cmd::ExportWeights { common, schedules } => {
            let r = resolve(&common, "export-weights")?;
            let pairs = load_schedules(&schedules, &r.base_dir)?;
            for (id, s) in &pairs {
                let rows = export_weight_scheme(s);
                io::write_weight_csv(&rows, &r.run_dir.join(format!("weights_{id}.csv")))
                    .map_err(runtime)?;
            }
            println!("{}", r.run_dir.display());
            Ok(())
        }
    }
}

/// Cap worker parallelism with SCHED_OPT_THREADS; results do not depend on
/// the thread count, only wall time does.
fn init_thread_pool() {
    if let Ok(v) = std::env::var("SCHED_OPT_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
