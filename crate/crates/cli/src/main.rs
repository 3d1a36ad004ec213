mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use esc::EscError;

#[derive(Parser)]
#[command(name = "esc", version, about = "ERF-controlled networks, feature scrambling, RSA and MIRC experiments")]
struct Cli {
    /// Cap on worker threads for independent jobs.
    #[arg(long, env = "ESC_THREADS", global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScrambleArg {
    None,
    Global,
    Local,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FollowupArg {
    Aggregating,
    OneByOne,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    Desk,
    Smoke,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset to PNG files plus a manifest.
    GenData {
        #[arg(long)]
        regime: String,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Training images per class; the test split gets a fifth as many.
        #[arg(long, conflicts_with_all = ["train_per_class", "test_per_class"])]
        per_class: Option<usize>,
        #[arg(long, default_value_t = 100)]
        train_per_class: usize,
        #[arg(long, default_value_t = 30)]
        test_per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a base network or a follow-up on a frozen base.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split, optionally scrambling features.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "none")]
        scramble: ScrambleArg,
        #[arg(long, default_value_t = 2)]
        window: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output prefix; writes PREFIX.json and PREFIX.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare per-class f1 before and after scrambling.
    ScrambleReport {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[arg(long, default_value_t = esc::experiment::ELIGIBILITY_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// First- and second-order RDMs, MDS coordinates and R² tables.
    Rsa {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        images_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Record logits instead of softmax outputs.
        #[arg(long)]
        logits: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search minimal recognizable configurations on test images.
    Mirc {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = esc::mirc::DEFAULT_CAP)]
        cap: usize,
        /// Images per class (all test images when omitted).
        #[arg(long)]
        images_per_class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster the MIRCs of one class found by a previous `mirc` run.
    MircCluster {
        /// Output directory of `mirc`.
        #[arg(long)]
        mirc_dir: PathBuf,
        /// Class name or index.
        #[arg(long)]
        class: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 8)]
        per_cluster: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Receptive-field arithmetic.
    Erf {
        #[command(subcommand)]
        command: ErfCommand,
    },
    /// Parameter counts, optionally width-matched to another ERF.
    CountParams {
        #[arg(long)]
        erf: usize,
        /// Use the desk-scale family instead of the full-size one.
        #[arg(long)]
        desk: bool,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long, value_enum)]
        followup: Option<FollowupArg>,
        /// Widen the network to the parameter count of this ERF.
        #[arg(long)]
        match_erf: Option<usize>,
    },
    /// Execute an experiment plan into an artifact directory.
    RunPlan {
        plan: Option<PathBuf>,
        #[arg(long, value_enum, conflicts_with = "plan")]
        preset: Option<Preset>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Print the resolved plan and exit.
        #[arg(long)]
        print: bool,
    },
    /// Regenerate the report files of an artifact directory.
    Report {
        dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum ErfCommand {
    /// Layer-by-layer receptive field of a network.
    Describe {
        #[arg(long)]
        erf: usize,
        #[arg(long)]
        desk: bool,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long, value_enum)]
        followup: Option<FollowupArg>,
    },
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<EscError>() {
        Some(EscError::Config(_) | EscError::Label { .. } | EscError::Unreachable { .. } | EscError::Permutation(_)) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        std::env::set_var("ESC_THREADS", n.to_string());
    }
    let result = match cli.command {
        Command::GenData {
            regime,
            classes,
            per_class,
            train_per_class,
            test_per_class,
            size,
            seed,
            out,
        } => {
            let (train, test) = per_class.map_or((train_per_class, test_per_class), |m| (m, (m / 5).max(1)));
            commands::gen_data(&regime, classes, train, test, size, seed, &out)
        }
        Command::Train { config, seed, epochs, out } => commands::train(&config, seed, epochs, out),
        Command::Eval {
            checkpoint,
            data,
            scramble,
            window,
            seed,
            out,
        } => commands::eval(&checkpoint, &data, scramble, window, seed, out.as_deref()),
        Command::ScrambleReport {
            before,
            after,
            threshold,
            out,
        } => commands::scramble_report(&before, &after, threshold, out.as_deref()),
        Command::Rsa {
            checkpoints,
            data,
            images_per_class,
            seed,
            logits,
            out,
        } => commands::rsa(&checkpoints, &data, images_per_class, seed, logits, &out),
        Command::Mirc {
            checkpoint,
            dataset,
            cap,
            images_per_class,
            out,
        } => commands::mirc(&checkpoint, &dataset, cap, images_per_class, &out),
        Command::MircCluster {
            mirc_dir,
            class,
            k,
            per_cluster,
            seed,
            out,
        } => commands::mirc_cluster(&mirc_dir, &class, k, per_cluster, seed, out),
        Command::Erf {
            command: ErfCommand::Describe {
                erf,
                desk,
                classes,
                followup,
            },
        } => commands::erf_describe(erf, desk, classes, followup),
        Command::CountParams {
            erf,
            desk,
            classes,
            followup,
            match_erf,
        } => commands::count_params(erf, desk, classes, followup, match_erf),
        Command::RunPlan {
            plan,
            preset,
            out,
            seed,
            print,
        } => commands::run_plan(plan.as_deref(), preset, out, seed, print),
        Command::Report { dir } => commands::report(&dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
