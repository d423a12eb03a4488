mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ssm_circuits::circuit::GradientPass;

use commands::Session;
use config::{ExperimentConfig, ModelKind};
use error::CliError;

/// Circuit-discovery experiments on selective state-space models.
#[derive(Parser, Debug)]
#[command(name = "ssm-circuits", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory [default: runs/<experiment>].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for trained toy models.
    #[arg(
        long,
        global = true,
        env = "SSM_CIRCUITS_CACHE",
        default_value = ".cache/ssm-circuits"
    )]
    cache_dir: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    metric: Option<String>,
    /// `toy`, `planted`, or a checkpoint path.
    #[arg(long, global = true)]
    model: Option<String>,
    /// Sidecar mapping for checkpoints with foreign tensor names.
    #[arg(long, global = true)]
    sidecar: Option<PathBuf>,
    #[arg(long, global = true)]
    count: Option<usize>,
    /// Comma-separated template names.
    #[arg(long, global = true, value_delimiter = ',')]
    templates: Option<Vec<String>>,
    /// Comma-separated corruption classes.
    #[arg(long, global = true, value_delimiter = ',')]
    corruptions: Option<Vec<u8>>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate clean/corrupted prompt pairs as JSONL.
    GenData,
    /// Train the toy name-recall model.
    TrainToy {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Resample one hook at each (layer, position).
    AblateGrid {
        /// Hook suffix, e.g. hook_layer_input or hook_conv.
        #[arg(long)]
        hook: Option<String>,
    },
    /// Remove each layer alone, then greedily.
    LayerRemoval,
    /// Greedy search for the layers that must move information across positions.
    Crosstalk {
        #[arg(long)]
        target: Option<f64>,
    },
    /// Patch each conv tap at each position of one layer.
    ConvSlice {
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Cosine similarity of per-position contributions and hidden states.
    CosineLens {
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        channel: Option<usize>,
        #[arg(long)]
        prompt: Option<usize>,
    },
    /// Name-steering success per (substituted slot, average slot).
    SteerGrid {
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        min_samples: Option<usize>,
    },
    /// Edge attribution over residual edges, then the minimal edge set.
    Eap(EapArgs),
    /// Positional edge attribution, then the minimal edge set.
    EapPos(EapArgs),
    /// Threshold sweep from the sink backwards.
    Acdc {
        #[arg(long)]
        thresh: Option<f64>,
    },
    /// Write an index of every experiment output under a directory.
    Report {
        #[arg(default_value = "runs")]
        dir: PathBuf,
    },
}

#[derive(Args, Debug)]
struct EapArgs {
    /// Integrated-gradient steps; 0 or 1 gives plain EAP.
    #[arg(long)]
    iters: Option<usize>,
    /// Fraction of the clean metric the kept edges must reach.
    #[arg(long)]
    target: Option<f64>,
    /// Gradients from the clean run instead of the patched run (plain EAP only).
    #[arg(long)]
    clean_gradients: bool,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainToy { .. } => "train-toy",
            Command::AblateGrid { .. } => "ablate-grid",
            Command::LayerRemoval => "layer-removal",
            Command::Crosstalk { .. } => "crosstalk",
            Command::ConvSlice { .. } => "conv-slice",
            Command::CosineLens { .. } => "cosine-lens",
            Command::SteerGrid { .. } => "steer-grid",
            Command::Eap(_) => "eap",
            Command::EapPos(_) => "eap-pos",
            Command::Acdc { .. } => "acdc",
            Command::Report { .. } => "report",
        }
    }

    fn apply(&self, cfg: &mut ExperimentConfig) {
        let p = &mut cfg.params;
        match self {
            Command::TrainToy { steps } => p.steps = steps.or(p.steps),
            Command::AblateGrid { hook } => {
                if let Some(h) = hook {
                    p.hook = h.clone();
                }
            }
            Command::Crosstalk { target } => p.target = target.unwrap_or(p.target),
            Command::ConvSlice { layer } => p.layer = layer.or(p.layer),
            Command::CosineLens {
                layer,
                channel,
                prompt,
            } => {
                p.layer = layer.or(p.layer);
                p.channel = channel.or(p.channel);
                p.prompt = prompt.unwrap_or(p.prompt);
            }
            Command::SteerGrid { layer, min_samples } => {
                p.layer = layer.or(p.layer);
                p.min_samples = min_samples.unwrap_or(p.min_samples);
            }
            Command::Eap(a) | Command::EapPos(a) => {
                p.iters = a.iters.unwrap_or(p.iters);
                p.target = a.target.unwrap_or(p.target);
                if a.clean_gradients {
                    p.gradient_pass = GradientPass::Clean;
                }
            }
            Command::Acdc { thresh } => p.thresh = thresh.unwrap_or(p.thresh),
            Command::GenData | Command::LayerRemoval | Command::Report { .. } => {}
        }
    }
}

fn effective_config(g: &Global, command: &Command) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &g.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(m) = &g.metric {
        cfg.metric = m.clone();
    }
    match g.model.as_deref() {
        None => {}
        Some("toy") => cfg.model.source = ModelKind::Toy,
        Some("planted") => cfg.model.source = ModelKind::Planted,
        Some(path) => {
            cfg.model.source = ModelKind::Checkpoint;
            cfg.model.path = Some(PathBuf::from(path));
        }
    }
    if let Some(s) = &g.sidecar {
        cfg.model.sidecar = Some(s.clone());
    }
    if let Some(n) = g.count {
        cfg.dataset.count = n;
    }
    if let Some(t) = &g.templates {
        cfg.dataset.templates = t.clone();
    }
    if let Some(c) = &g.corruptions {
        cfg.dataset.corruptions = c.clone();
    }
    command.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("threads: {e}")))?;
    }
    if let Command::Report { dir } = &cli.command {
        let path = commands::report(dir)?;
        println!("{}", path.display());
        return Ok(());
    }
    let name = cli.command.name();
    let cfg = effective_config(&cli.global, &cli.command)?;
    let out = cli
        .global
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(name));
    let mut s = Session::new(name, &cfg, out.clone(), cli.global.cache_dir.clone())?;
    match &cli.command {
        Command::GenData => commands::gen_data(&mut s)?,
        Command::TrainToy { .. } => commands::train_toy_cmd(&mut s)?,
        Command::AblateGrid { .. } => commands::ablate_grid(&mut s)?,
        Command::LayerRemoval => commands::layer_removal(&mut s)?,
        Command::Crosstalk { .. } => commands::crosstalk(&mut s)?,
        Command::ConvSlice { .. } => commands::conv_slice(&mut s)?,
        Command::CosineLens { .. } => commands::cosine_lens_cmd(&mut s)?,
        Command::SteerGrid { .. } => commands::steer_grid(&mut s)?,
        Command::Eap(_) => commands::eap_cmd(&mut s, false)?,
        Command::EapPos(_) => commands::eap_cmd(&mut s, true)?,
        Command::Acdc { .. } => commands::acdc(&mut s)?,
        Command::Report { .. } => unreachable!(),
    }
    s.finish()?;
    println!("{}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
