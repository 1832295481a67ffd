mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ftm", version, about = "Few-shot cross-domain scene classification with feature-wise transformation modules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// key=value config file; flags override its entries.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Export the synthetic domain pair and a land-cover mosaic.
    GenData {
        #[command(flatten)]
        common: Common,
        /// `synthetic` (the only generator).
        #[arg(long, value_name = "SOURCE")]
        data: Option<String>,
    },
    /// Train the classifier on the source domain.
    TrainSource {
        #[command(flatten)]
        common: Common,
        /// Dataset folder or `synthetic`.
        #[arg(long, value_name = "DIR|synthetic")]
        data: Option<String>,
    },
    /// Few-shot adaptation of the FTM slots and a fresh head.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR|synthetic")]
        data: Option<String>,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Labeled images per class.
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Few-shot finetuning baseline.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR|synthetic")]
        data: Option<String>,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Confusion matrix of a checkpoint on a test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR|synthetic")]
        data: Option<String>,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Which synthetic domain to score.
        #[arg(long, value_parser = ["source", "target"])]
        domain: Option<String>,
    },
    /// FT and FTM accuracy over shot counts and trials.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR|synthetic")]
        data: Option<String>,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Comma-separated shot counts.
        #[arg(long, value_name = "LIST")]
        shots: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Land-cover map of a large image.
    Map {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        image: Option<PathBuf>,
        /// `fine=coarse` file; identity when omitted.
        #[arg(long, value_name = "PATH")]
        taxonomy: Option<PathBuf>,
        /// Ground-truth label map PNG in the default palette.
        #[arg(long, value_name = "PATH")]
        truth: Option<PathBuf>,
        #[arg(long)]
        superpixels: Option<usize>,
        #[arg(long)]
        patch: Option<usize>,
    },
    /// Finite-difference check of every differentiable primitive.
    Gradcheck {
        #[arg(long, default_value = "f64", value_parser = ["f64"])]
        dtype: String,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    use config::Flags;
    let path = |p: Option<PathBuf>| p.map(|p| p.display().to_string());
    match cli.command {
        Command::GenData { common, data } => commands::gen_data(&common, Flags::new().with("data", data)),
        Command::TrainSource { common, data } => commands::train_source(&common, Flags::new().with("data", data)),
        Command::Adapt { common, data, checkpoint, shots } => commands::adapt(
            &common,
            Flags::new()
                .with("data", data)
                .with("checkpoint", path(checkpoint))
                .with("adapt.shots", shots),
            commands::Method::Ftm,
        ),
        Command::Finetune { common, data, checkpoint, shots } => commands::adapt(
            &common,
            Flags::new()
                .with("data", data)
                .with("checkpoint", path(checkpoint))
                .with("adapt.shots", shots),
            commands::Method::Finetune,
        ),
        Command::Eval { common, data, checkpoint, domain } => commands::eval(
            &common,
            Flags::new()
                .with("data", data)
                .with("checkpoint", path(checkpoint))
                .with("eval.domain", domain),
        ),
        Command::Sweep { common, data, checkpoint, shots, trials } => commands::sweep(
            &common,
            Flags::new()
                .with("data", data)
                .with("checkpoint", path(checkpoint))
                .with("sweep.shots", shots)
                .with("sweep.trials", trials),
        ),
        Command::Map { common, checkpoint, image, taxonomy, truth, superpixels, patch } => commands::map(
            &common,
            Flags::new()
                .with("checkpoint", path(checkpoint))
                .with("image", path(image))
                .with("taxonomy", path(taxonomy))
                .with("truth", path(truth))
                .with("map.superpixels", superpixels)
                .with("map.patch_size", patch),
        ),
        Command::Gradcheck { trials, seed, .. } => commands::gradcheck(trials, seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
