//! `docrectify` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use docrectify::flowest::EstimatorKind;
use docrectify::illum::IllumMode;
use docrectify::imagecore::{flow_to_rgb, load_flow, load_image, save_flow, save_image};
use docrectify::metrics::{evaluate_pipeline, EvalOptions};
use docrectify::pipeline::{rectify, PipelineConfig, PipelineOutput};
use docrectify::stitch::{gradient_previews, index_map_image};
use docrectify::synthgen::{generate_dataset, DatasetOptions, DistortionKind};
use docrectify::Flow;

#[derive(Parser, Debug)]
#[command(name = "docrectify", version, about = "Patch-based document image rectification")]
struct Cli {
    /// Worker threads, 0 for all cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rectify one distorted page.
    Rectify(RectifyArgs),
    /// Render a synthetic dataset of distorted test pages.
    GenDataset(GenArgs),
    /// Run the pipeline over a dataset and score it.
    Evaluate(EvalArgs),
    /// Rectify and dump the index map and stitched gradients.
    StitchDebug(DebugArgs),
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[arg(long)]
    input: PathBuf,
    /// Pipeline configuration (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ground-truth flow for the oracle estimators.
    #[arg(long)]
    gt_flow: Option<PathBuf>,
    #[arg(long, value_parser = ["oracle", "noisy-oracle", "external"])]
    estimator: Option<String>,
    #[arg(long, value_parser = ["none", "binarize", "deshade"])]
    illum: Option<String>,
    /// Seed of the noisy estimator.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct RectifyArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long)]
    output: PathBuf,
    /// Reconstructed flow at processing resolution.
    #[arg(long)]
    flow_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DebugArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Directory for the rectified image, index map and gradient previews.
    #[arg(long)]
    debug_dir: PathBuf,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 5)]
    count: usize,
    #[arg(long, value_delimiter = ',', default_value = "perspective,curved,folded")]
    kinds: Vec<DistortionKind>,
    #[arg(long, default_value_t = 0.4)]
    magnitude: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1200)]
    width: usize,
    #[arg(long, default_value_t = 1600)]
    height: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON report path; the text table goes to stdout.
    #[arg(long)]
    report: PathBuf,
    /// Shell command printing recognized text for `{image}`.
    #[arg(long)]
    ocr_cmd: Option<String>,
    /// Where rectified images are written; required with --ocr-cmd.
    #[arg(long)]
    rectified_dir: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Processing(String),
}

impl From<docrectify::Error> for Failure {
    fn from(e: docrectify::Error) -> Self {
        Failure::Processing(e.to_string())
    }
}

fn usage(e: docrectify::Error) -> Failure {
    Failure::Usage(e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, Failure> {
    let Some(path) = path else { return Ok(PipelineConfig::default()) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("--config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("--config {}: {e}", path.display())))
}

fn pipeline_config(args: &PipelineArgs) -> Result<PipelineConfig, Failure> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(e) = &args.estimator {
        cfg.estimator.kind = e.parse::<EstimatorKind>().map_err(usage)?;
    }
    if let Some(m) = &args.illum {
        cfg.illum.mode = m.parse::<IllumMode>().map_err(usage)?;
    }
    if let Some(seed) = args.seed {
        cfg.estimator.seed = seed;
    }
    cfg.validate().map_err(usage)?;
    if cfg.estimator.kind != EstimatorKind::External && args.gt_flow.is_none() {
        return Err(Failure::Usage(format!(
            "--gt-flow is required by the {:?} estimator",
            cfg.estimator.kind
        )));
    }
    Ok(cfg)
}

fn run_pipeline(args: &PipelineArgs, cfg: &PipelineConfig) -> Result<PipelineOutput<f32>, Failure> {
    let input = load_image(&args.input)?;
    let gt = args.gt_flow.as_ref().map(load_flow::<f32>).transpose()?;
    Ok(rectify::<f32>(&input, cfg, gt.as_ref())?)
}

fn cmd_rectify(args: &RectifyArgs) -> Result<(), Failure> {
    let cfg = pipeline_config(&args.pipeline)?;
    let out = run_pipeline(&args.pipeline, &cfg)?;
    save_image(&out.image, &args.output)?;
    if let Some(p) = &args.flow_out {
        save_flow(&out.flow, p)?;
    }
    println!("{}", serde_json::to_string(&out.diagnostics).expect("diagnostics serialize"));
    Ok(())
}

fn cmd_stitch_debug(args: &DebugArgs) -> Result<(), Failure> {
    let cfg = pipeline_config(&args.pipeline)?;
    let out = run_pipeline(&args.pipeline, &cfg)?;
    let dir = &args.debug_dir;
    std::fs::create_dir_all(dir).map_err(|e| Failure::Processing(format!("{}: {e}", dir.display())))?;
    save_image(&out.image, dir.join("rectified.png"))?;
    save_image(&index_map_image(&out.index_map), dir.join("index_map.png"))?;
    let [ux, uy, vx, vy] = gradient_previews(&out.stitched);
    for (img, name) in [(ux, "grad_ux.png"), (uy, "grad_uy.png"), (vx, "grad_vx.png"), (vy, "grad_vy.png")] {
        save_image(&img, dir.join(name))?;
    }
    let flow: &Flow = &out.flow;
    save_image(&flow_to_rgb(flow, flow.width(), flow.height()), dir.join("flowvis.png"))?;
    save_flow(flow, dir.join("flow.dfl"))?;
    println!("{}", serde_json::to_string(&out.diagnostics).expect("diagnostics serialize"));
    Ok(())
}

fn cmd_gen_dataset(args: &GenArgs) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&args.magnitude) {
        return Err(Failure::Usage(format!("--magnitude must lie in [0, 1], got {}", args.magnitude)));
    }
    if args.kinds.is_empty() {
        return Err(Failure::Usage("--kinds needs at least one kind".into()));
    }
    let opts = DatasetOptions {
        count: args.count,
        kinds: args.kinds.clone(),
        magnitude: args.magnitude,
        seed: args.seed,
        width: args.width,
        height: args.height,
    };
    let manifests = generate_dataset(&args.out_dir, &opts)?;
    println!("wrote {} samples to {}", manifests.len(), args.out_dir.display());
    Ok(())
}

fn cmd_evaluate(args: &EvalArgs) -> Result<(), Failure> {
    let cfg = load_config(args.config.as_deref())?;
    cfg.validate().map_err(usage)?;
    if args.ocr_cmd.is_some() && args.rectified_dir.is_none() {
        return Err(Failure::Usage("--ocr-cmd needs --rectified-dir".into()));
    }
    let opts = EvalOptions { ocr_command: args.ocr_cmd.clone(), rectified_dir: args.rectified_dir.clone() };
    let report = evaluate_pipeline(&args.dataset, &cfg, &opts)?;
    std::fs::write(&args.report, report.to_json())
        .map_err(|e| Failure::Processing(format!("{}: {e}", args.report.display())))?;
    print!("{}", report.to_table());
    Ok(())
}

/// Flags of the subcommand named on the command line (or the top level).
fn valid_flags() -> String {
    let root = Cli::command();
    let cmd = std::env::args()
        .skip(1)
        .find_map(|a| root.get_subcommands().find(|c| c.get_name() == a).cloned())
        .unwrap_or(root);
    let mut flags: Vec<String> = cmd.get_arguments().filter_map(|a| a.get_long().map(|l| format!("--{l}"))).collect();
    for extra in ["--threads", "--help"] {
        if !flags.iter().any(|f| f == extra) {
            flags.push(extra.to_string());
        }
    }
    format!("valid flags for `{}`: {}", cmd.get_name(), flags.join(", "))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            if e.kind() == ErrorKind::UnknownArgument {
                eprintln!("\n{}", valid_flags());
            }
            return ExitCode::from(1);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: --threads: {e}");
        return ExitCode::from(2);
    }
    let result = match &cli.command {
        Command::Rectify(a) => cmd_rectify(a),
        Command::GenDataset(a) => cmd_gen_dataset(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::StitchDebug(a) => cmd_stitch_debug(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Processing(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
