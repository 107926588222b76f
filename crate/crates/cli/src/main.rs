//! `krlab` — run the knowledge-recycling pipeline from the command line.
//!
//! Exit codes: 0 success, 2 partial result, 3 invalid input or
//! configuration, 4 stage failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use krlab_core::config::RunConfig;
use krlab_core::datasets::{Registry, Split};
use krlab_core::nets::Profile;
use krlab_core::report::{emit_report, verify_tables, REFERENCE_AOP_CSV};
use krlab_core::run::{collect_report, dump_synthetic, run_mia_target, run_pipeline, RunOptions};
use krlab_core::store::{ArtifactStore, Stage};
use krlab_core::KrError;

const EXIT_PARTIAL: u8 = 2;
const EXIT_INVALID: u8 = 3;
const EXIT_STAGE: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "krlab", version, about = "Knowledge recycling: synthetic-data students with membership-inference evaluation")]
struct Cli {
    /// Run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Record the run as deterministic (all stages are seeded either way).
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output root for runs.
    #[arg(long, global = true, env = "KRLAB_ROOT", default_value = "runs")]
    root: PathBuf,
    /// Dataset cache root (default `<root>/data`).
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Dataset access.
    #[command(subcommand)]
    Data(DataCmd),
    /// Classifier training.
    #[command(subcommand)]
    Clf(ClfCmd),
    /// Generator training.
    #[command(subcommand)]
    Gan(GanCmd),
    /// Whole-pipeline runs.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
    /// Synthetic data inspection.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Membership inference.
    #[command(subcommand)]
    Mia(MiaCmd),
    /// Reports.
    #[command(subcommand)]
    Report(ReportCmd),
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, value_parser = parse_profile)]
    profile: Option<Profile>,
    /// TOML file of overrides on the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Recompute completed stages.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum DataCmd {
    /// Materialize a dataset into the cache.
    Fetch {
        #[arg(long)]
        dataset: String,
    },
    /// List registered datasets or describe one.
    Info {
        #[arg(long)]
        dataset: Option<String>,
    },
}

#[derive(Subcommand, Debug)]
enum ClfCmd {
    /// Train (or reuse) the teacher of a run.
    TrainTeacher(RunArgs),
}

#[derive(Subcommand, Debug)]
enum GanCmd {
    /// Train (or reuse) the teacher and generator of a run.
    Train(RunArgs),
}

#[derive(Subcommand, Debug)]
enum PipelineCmd {
    /// Run every stage, skipping completed ones.
    Run {
        #[command(flatten)]
        args: RunArgs,
        /// Stop after this stage.
        #[arg(long)]
        until: Option<String>,
    },
    /// Continue an existing run.
    Resume {
        run_id: String,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Subcommand, Debug)]
enum SynthCmd {
    /// Write GKD samples of a run's best checkpoint as a PPM mosaic plus soft labels.
    Dump {
        #[arg(long)]
        run: String,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum MiaCmd {
    /// Attack one target with a run's fitted attack models.
    Run {
        #[arg(long)]
        run: String,
        #[arg(long)]
        target: String,
    },
}

#[derive(Subcommand, Debug)]
enum ReportCmd {
    /// Rebuild a run's report files.
    Emit {
        #[arg(long)]
        run: String,
        /// Output directory (default: the run's report directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute AOP for (accuracy, auc_mia, aop) rows; the bundled
    /// published rows are used when no file is given.
    VerifyTables { file: Option<PathBuf> },
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: KrError| e.to_string())
}

fn exit_code(e: &KrError) -> u8 {
    match e {
        KrError::Config(_) | KrError::Invalid(_) | KrError::UnknownDataset(_) | KrError::Dataset { .. } => EXIT_INVALID,
        _ => EXIT_STAGE,
    }
}

struct Env {
    registry: Registry,
    root: PathBuf,
    data_root: PathBuf,
    seed: Option<u64>,
    workers: usize,
    deterministic: bool,
}

impl Env {
    fn config(&self, a: &RunArgs) -> Result<RunConfig, KrError> {
        let text = match &a.config {
            Some(p) => std::fs::read_to_string(p).map_err(|e| KrError::io(p, e))?,
            None => String::new(),
        };
        let mut cfg = RunConfig::parse(&self.registry, a.dataset.as_deref(), a.profile, self.seed, &text)?;
        cfg.output_root = self.root.clone();
        cfg.data_root = self.data_root.clone();
        cfg.workers = self.workers;
        if self.deterministic {
            cfg.deterministic = true;
        }
        Ok(cfg)
    }

    fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }

    fn stored_config(&self, run_id: &str) -> Result<RunConfig, KrError> {
        let dir = self.run_dir(run_id);
        if !dir.is_dir() {
            return Err(KrError::invalid(format!("no run `{run_id}` under {}", self.root.display())));
        }
        let mut cfg = ArtifactStore::load_config(&dir)?;
        cfg.output_root = self.root.clone();
        Ok(cfg)
    }
}

fn log_line(s: &str) {
    eprintln!("{s}");
}

fn pipeline(env: &Env, cfg: &RunConfig, force: bool, until: Option<Stage>) -> Result<u8, KrError> {
    let out = run_pipeline(cfg, &env.registry, &RunOptions { force, until }, &mut log_line)?;
    println!("run {}", out.run_dir.display());
    println!("{}", krlab_core::report::markdown(&out.report));
    Ok(if out.report.partial { EXIT_PARTIAL } else { 0 })
}

/// Stopping where asked is a success for the single-stage commands.
fn partial_ok(code: u8) -> u8 {
    if code == EXIT_PARTIAL {
        0
    } else {
        code
    }
}

fn execute(cli: Cli) -> Result<u8, KrError> {
    krlab_core::nn::par::init_workers(cli.workers);
    let env = Env {
        registry: Registry::builtin(),
        data_root: cli.data_root.clone().unwrap_or_else(|| cli.root.join("data")),
        root: cli.root.clone(),
        seed: cli.seed,
        workers: cli.workers,
        deterministic: cli.deterministic,
    };
    match cli.cmd {
        Cmd::Data(DataCmd::Fetch { dataset }) => {
            let splits = env.registry.load_dataset(&dataset, &env.data_root)?;
            for (s, split) in splits.iter().zip(Split::ALL) {
                println!("{dataset} {}: {} images", split.as_str(), s.len());
            }
            Ok(0)
        }
        Cmd::Data(DataCmd::Info { dataset }) => {
            let names: Vec<String> = match dataset {
                Some(d) => vec![d],
                None => env.registry.names().map(str::to_string).collect(),
            };
            for n in names {
                let s = &env.registry.get(&n)?.spec;
                println!(
                    "{n}: {} classes, {} channel(s), train/val/test {}/{}/{}",
                    s.num_classes, s.channels, s.train, s.val, s.test
                );
            }
            Ok(0)
        }
        Cmd::Clf(ClfCmd::TrainTeacher(a)) => {
            let cfg = env.config(&a)?;
            pipeline(&env, &cfg, a.force, Some(Stage::Teacher)).map(partial_ok)
        }
        Cmd::Gan(GanCmd::Train(a)) => {
            let cfg = env.config(&a)?;
            pipeline(&env, &cfg, a.force, Some(Stage::Gan)).map(partial_ok)
        }
        Cmd::Pipeline(PipelineCmd::Run { args, until }) => {
            let until = until.map(|u| u.parse::<Stage>()).transpose()?;
            let cfg = env.config(&args)?;
            pipeline(&env, &cfg, args.force, until)
        }
        Cmd::Pipeline(PipelineCmd::Resume { run_id, force }) => {
            let cfg = env.stored_config(&run_id)?;
            pipeline(&env, &cfg, force, None)
        }
        Cmd::Synth(SynthCmd::Dump { run, count, out }) => {
            if count == 0 {
                return Err(KrError::invalid("count must be positive"));
            }
            for f in dump_synthetic(&env.run_dir(&run), count, &out)? {
                println!("{}", f.display());
            }
            Ok(0)
        }
        Cmd::Mia(MiaCmd::Run { run, target }) => {
            env.stored_config(&run)?;
            let r = run_mia_target(&env.run_dir(&run), &env.registry, &target)?;
            println!("{}", serde_json::to_string_pretty(&r).map_err(KrError::from)?);
            Ok(0)
        }
        Cmd::Report(ReportCmd::Emit { run, out }) => {
            let cfg = env.stored_config(&run)?;
            let store = ArtifactStore::open(&cfg)?;
            let report = collect_report(&store, &cfg)?;
            let dir = out.unwrap_or_else(|| store.stage_dir(Stage::Report));
            for f in emit_report(&report, &dir)? {
                println!("{}", f.display());
            }
            Ok(if report.partial { EXIT_PARTIAL } else { 0 })
        }
        Cmd::Report(ReportCmd::VerifyTables { file }) => verify(file.as_deref()),
    }
}

fn verify(file: Option<&Path>) -> Result<u8, KrError> {
    let text = match file {
        Some(p) => std::fs::read_to_string(p).map_err(|e| KrError::io(p, e))?,
        None => REFERENCE_AOP_CSV.to_string(),
    };
    let rows = verify_tables(&text)?;
    for r in &rows {
        println!(
            "{} {}: accuracy {:.2} auc {:.2} published {:.2} computed {:.4}",
            if r.pass { "PASS" } else { "FAIL" },
            r.label,
            r.accuracy,
            r.auc_mia,
            r.published_aop,
            r.computed_aop
        );
    }
    let failed = rows.iter().filter(|r| !r.pass).count();
    println!("{} of {} rows within tolerance", rows.len() - failed, rows.len());
    Ok(if failed == 0 { 0 } else { EXIT_INVALID })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
