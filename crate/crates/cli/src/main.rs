//! `concord`: runs the pseudo-labeling pipeline stage by stage.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use concord_core::pipeline::{self, Overrides, PipelineConfig, PipelineError, StageOutcome};

#[derive(Parser)]
#[command(name = "concord", version, about = "Temporal-concordance pseudo-labeling for LiDAR sequences")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON config file; defaults apply when omitted.
    #[arg(long, short, global = true, env = "CONCORD_CONFIG")]
    config: Option<PathBuf>,
    /// Run directory holding one subdirectory per stage.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Concordance weight λ.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Selection threshold θ.
    #[arg(long, global = true)]
    theta: Option<f64>,
    /// Student training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Teacher set: supervised, single:N, concordance:1,2,3 or ensemble:RxK.
    #[arg(long, global = true)]
    teachers: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic drives or index KITTI-format ones.
    Synth,
    /// Run the teachers on the unlabeled split.
    Teach,
    /// Fuse per-point teacher outputs into pseudo labels.
    FuseSeg,
    /// Cluster and fuse teacher boxes.
    FuseDet,
    /// Threshold pseudo labels and merge them with human labels.
    Select,
    /// Train the causal student.
    Train,
    /// Score the student (and fused boxes) on the test split.
    Eval,
    /// Retrain and score the student for several thresholds.
    Sweep {
        /// Comma-separated θ values.
        #[arg(long, value_delimiter = ',')]
        thetas: Option<Vec<f64>>,
    },
    /// Tabulate metrics files side by side; the first is the baseline.
    Compare {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Comma-separated run names; defaults to the file paths.
        #[arg(long, value_delimiter = ',')]
        names: Option<Vec<String>>,
        #[arg(long)]
        json: bool,
    },
    /// Every stage from synth to eval.
    Run,
    /// Print the resolved config.
    Config,
}

fn resolve(g: &Global, thetas: Option<Vec<f64>>) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let teachers = g.teachers.as_deref().map(pipeline::parse_teacher_set).transpose()?;
    cfg.apply(&Overrides {
        output_dir: g.output_dir.clone(),
        seed: g.seed,
        workers: g.workers,
        lambda: g.lambda,
        theta: g.theta,
        epochs: g.epochs,
        teachers,
        thetas,
    });
    Ok(cfg)
}

/// Writes to stdout; a closed pipe (`concord config | head`) is not an error.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn report(outcomes: &[StageOutcome]) {
    for o in outcomes {
        let state = if o.skipped { "up to date" } else { "done" };
        emit(&format!("{:<9} {:<10} {} {}\n", o.stage, state, &o.hash[..12], o.dir.display()));
    }
}

fn print_file(path: PathBuf) -> Result<(), PipelineError> {
    let text = std::fs::read_to_string(&path).map_err(|source| PipelineError::Io { path, source })?;
    emit(&text);
    Ok(())
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    let g = &cli.global;
    let stage = |f: fn(&PipelineConfig) -> Result<StageOutcome, PipelineError>| -> Result<(), PipelineError> {
        report(&[f(&resolve(g, None)?)?]);
        Ok(())
    };
    match cli.command {
        Command::Synth => stage(pipeline::stage_synth),
        Command::Teach => stage(pipeline::stage_teach),
        Command::FuseSeg => stage(pipeline::stage_fuse_seg),
        Command::FuseDet => stage(pipeline::stage_fuse_det),
        Command::Select => stage(pipeline::stage_select),
        Command::Train => stage(pipeline::stage_train),
        Command::Eval => {
            let cfg = resolve(g, None)?;
            let out = pipeline::stage_eval(&cfg)?;
            report(&[out.clone()]);
            print_file(out.dir.join("metrics.txt"))?;
            let det = out.dir.join("detection.txt");
            if det.is_file() {
                print_file(det)?;
            }
            Ok(())
        }
        Command::Sweep { thetas } => {
            let out = pipeline::stage_sweep(&resolve(g, thetas)?)?;
            report(&[out.clone()]);
            print_file(out.dir.join("curve.csv"))
        }
        Command::Compare { files, names, json } => {
            let names = names.unwrap_or_else(|| files.iter().map(|f| f.display().to_string()).collect());
            if names.len() != files.len() {
                return Err(PipelineError::Config(format!(
                    "{} names for {} files",
                    names.len(),
                    files.len()
                )));
            }
            let runs: Vec<(String, PathBuf)> = names.into_iter().zip(files).collect();
            let cmp = pipeline::stage_compare(&runs)?;
            if json {
                emit(&format!("{}\n", serde_json::to_string_pretty(&cmp).expect("serializable")));
            } else {
                emit(&cmp.to_table());
            }
            Ok(())
        }
        Command::Run => {
            let cfg = resolve(g, None)?;
            let out = pipeline::run_all(&cfg)?;
            report(&out);
            print_file(cfg.output_dir.join("eval").join("metrics.txt"))
        }
        Command::Config => {
            let cfg = resolve(g, None)?;
            cfg.validate()?;
            emit(&format!("{}\n", cfg.to_json()));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
