use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;

use graft::pipeline::{
    emit_plot, run_pipeline, run_stage, PipelineConfig, RunMode, RunReport, Stage, Store, Variant, ADAPTED_FILE,
};
use graft::Result;

/// Test-time refinement of a shifted target graph for a frozen source GNN.
#[derive(Parser)]
#[command(name = "graft", version)]
struct Cli {
    /// JSON or TOML config file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base settings when neither --config nor a saved run config exists.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Large)]
    preset: Preset,

    /// Checkpoint directory of the run.
    #[arg(long, global = true, env = "GRAFT_CHECKPOINT_ROOT", default_value = "graft-run")]
    workdir: PathBuf,

    /// Config override as `dotted.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// full, no-encoder, no-diff, no-align or no-conf.
    #[arg(long, global = true)]
    variant: Option<Variant>,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-size defaults.
    Large,
    /// Small settings for a single CPU core.
    Desk,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source GCN and record class centroids.
    PretrainGnn(GnnArgs),
    /// Jointly train encoder, denoiser, codebook and decoder.
    TrainTokenizer(TokArgs),
    /// Serialize restoration trajectories of source subgraphs.
    MakeTrajectories,
    /// Supervised fine-tuning of the restorer language model.
    Sft(SftArgs),
    /// Reward alignment of the restorer on target prompts.
    Grpo(GrpoArgs),
    /// Refine every target subgraph and stitch the adapted graph.
    Adapt(AdaptArgs),
    /// Compare direct transfer with the adapted target.
    Eval,
    /// Write 2-D PCA coordinates of source, target and adapted embeddings.
    EmitPlot {
        #[arg(long, default_value = "embeddings.csv")]
        out: PathBuf,
    },
    /// Run every stage in order.
    RunAll {
        /// Skip stages whose checkpoints match the config.
        #[arg(long)]
        resume: bool,
        /// Rerun from this stage on top of existing upstream checkpoints.
        #[arg(long, conflicts_with = "resume")]
        from: Option<String>,
    },
    /// Print the resolved config as JSON.
    ShowConfig,
}

#[derive(Args)]
struct GnnArgs {
    /// Labeled source graph file (with --target; otherwise synthetic data).
    #[arg(long, requires = "target")]
    source: Option<PathBuf>,
    #[arg(long, requires = "source")]
    target: Option<PathBuf>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct TokArgs {
    /// Latent rows per block.
    #[arg(long)]
    k: Option<usize>,
    /// Codebook size.
    #[arg(long)]
    m: Option<usize>,
    /// Restoration steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct SftArgs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct GrpoArgs {
    /// Group size.
    #[arg(long)]
    g: Option<usize>,
    #[arg(long)]
    beta_kl: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    no_align: bool,
    #[arg(long)]
    no_conf: bool,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long, conflicts_with = "center_only")]
    stitch: bool,
    #[arg(long)]
    center_only: bool,
    /// Copy the stitched graph here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Effective config of the last command, reused as the base of the next one.
const RUN_CONFIG: &str = "config.json";

fn push<T: ToString>(out: &mut Vec<String>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        out.push(format!("{key}={}", v.to_string()));
    }
}

fn json_path(p: &std::path::Path) -> String {
    serde_json::to_string(&p.to_string_lossy()).expect("string serializes")
}

/// Overrides implied by subcommand flags, applied after `--set`.
fn flag_overrides(cmd: &Command) -> Vec<String> {
    let mut o = Vec::new();
    match cmd {
        Command::PretrainGnn(a) => {
            push(&mut o, "data.source", a.source.as_deref().map(json_path));
            push(&mut o, "data.target", a.target.as_deref().map(json_path));
            push(&mut o, "gnn.hidden", a.hidden);
            push(&mut o, "gnn.epochs", a.epochs);
        }
        Command::TrainTokenizer(a) => {
            push(&mut o, "tokenizer.num_queries", a.k);
            push(&mut o, "tokenizer.codebook_size", a.m);
            push(&mut o, "tokenizer.steps", a.steps);
            push(&mut o, "tokenizer.weights.lambda1", a.lambda1);
            push(&mut o, "tokenizer.weights.lambda2", a.lambda2);
            push(&mut o, "tokenizer.epochs", a.epochs);
        }
        Command::Sft(a) => {
            push(&mut o, "sft.lr", a.lr);
            push(&mut o, "sft.epochs", a.epochs);
        }
        Command::Grpo(a) => {
            push(&mut o, "grpo.group_size", a.g);
            push(&mut o, "grpo.beta_kl", a.beta_kl);
            push(&mut o, "reward.gamma", a.gamma);
            push(&mut o, "grpo.lr", a.lr);
            push(&mut o, "align.steps", a.steps);
            if a.no_align {
                o.push("reward.use_align=false".into());
            }
            if a.no_conf {
                o.push("reward.use_conf=false".into());
            }
        }
        Command::Adapt(a) => {
            if a.stitch {
                o.push("adapt.mode=\"stitch\"".into());
            }
            if a.center_only {
                o.push("adapt.mode=\"center-only\"".into());
            }
        }
        _ => {}
    }
    o
}

fn build_config(cli: &Cli) -> Result<PipelineConfig> {
    let saved = cli.workdir.join(RUN_CONFIG);
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None if saved.is_file() => PipelineConfig::load(&saved)?,
        None => match cli.preset {
            Preset::Large => PipelineConfig::default(),
            Preset::Desk => PipelineConfig::desk(),
        },
    };
    let mut overrides = cli.overrides.clone();
    overrides.extend(flag_overrides(&cli.command));
    cfg = cfg.with_overrides(&overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(v) = cli.variant {
        cfg.variant = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(r: &RunReport) {
    println!("variant {} ({})", r.variant, r.config_hash);
    print!("{}", r.metrics.render());
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli)?;
    if let Command::ShowConfig = cli.command {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let store = Store::new(&cli.workdir)?;
    std::fs::write(store.path(RUN_CONFIG), cfg.to_json())?;
    let stage = match &cli.command {
        Command::PretrainGnn(_) => Stage::PretrainGnn,
        Command::TrainTokenizer(_) => Stage::TrainTokenizer,
        Command::MakeTrajectories => Stage::MakeTrajectories,
        Command::Sft(_) => Stage::Sft,
        Command::Grpo(_) => Stage::Grpo,
        Command::Adapt(_) => Stage::Adapt,
        Command::Eval => Stage::Eval,
        Command::EmitPlot { out } => return emit_plot(&cfg, &store, out),
        Command::RunAll { resume, from } => {
            let mode = match (resume, from) {
                (_, Some(s)) => RunMode::From(s.parse()?),
                (true, None) => RunMode::Resume,
                (false, None) => RunMode::Fresh,
            };
            print_report(&run_pipeline(&cfg, &store, mode)?);
            return Ok(());
        }
        Command::ShowConfig => unreachable!(),
    };
    run_stage(stage, &cfg, &store)?;
    match &cli.command {
        Command::Eval => print_report(&RunReport::load(&store)?),
        Command::Adapt(AdaptArgs { out: Some(out), .. }) => {
            std::fs::copy(store.path(ADAPTED_FILE), out)?;
        }
        _ => {}
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Info,
        1 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
