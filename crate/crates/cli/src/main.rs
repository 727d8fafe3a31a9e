mod commands;
mod config;
mod plot;

use clap::{Parser, Subcommand};

/// Train, attack, and audit pruned image classifiers: joint mask + trigger
/// + weight learning, sequential baselines, and defense evaluations.
#[derive(Parser)]
#[command(name = "ribac", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Clean-pretrain a model and save the checkpoint.
    Pretrain(commands::PretrainArgs),
    /// Joint mask/trigger/weight training from a clean pretrained model.
    Train(commands::TrainArgs),
    /// Sequential and pruning-only baselines.
    Baseline(commands::BaselineArgs),
    /// Run a defense against a trained checkpoint.
    Defend(commands::DefendArgs),
    /// Run a suite matrix and aggregate result tables.
    Report(commands::ReportArgs),
    /// Recompute a checkpoint's metrics and compare with its result.json.
    Verify(commands::VerifyArgs),
    /// Export amplified trigger patterns as PNG images.
    ExportTriggers(commands::ExportTriggersArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Pretrain(a) => commands::pretrain(a),
        Cmd::Train(a) => commands::train(a),
        Cmd::Baseline(a) => commands::baseline(a),
        Cmd::Defend(a) => commands::defend(a),
        Cmd::Report(a) => commands::report(a),
        Cmd::Verify(a) => commands::verify(a),
        Cmd::ExportTriggers(a) => commands::export_triggers(a),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}

/// 0 ok, 2 configuration error, 3 metric-verification failure, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> i32 {
    use ribac_core::Error as E;
    if let Some(core) = err.downcast_ref::<E>() {
        return match core {
            E::VerifyMismatch(_) => 3,
            E::InvalidConfig(_) | E::UnknownDataset(_) | E::UnknownArch(_) => 2,
            _ => 1,
        };
    }
    // Config-file problems surface as toml/context errors.
    let text = format!("{err:#}");
    if text.contains("parsing") && text.contains("config") || text.contains("unknown field") {
        return 2;
    }
    1
}
