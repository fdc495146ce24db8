//! `tadevoc` — mel-conditioned neural vocoder tool.

use clap::{Parser, Subcommand};

use tadevoc_cli::{bench, copysyn, feats, pqmf_check, train};

#[derive(Parser)]
#[command(
    name = "tadevoc",
    about = "Mel-conditioned neural vocoder: synthesis, training, and benchmarks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Resynthesize a recording from its own mel features.
    Copysyn(copysyn::CopysynArgs),
    /// Extract normalized log-mel features from a recording.
    Feats(feats::FeatsArgs),
    /// Train on a directory of recordings (reconstruction warm-up, then
    /// adversarial refinement).
    Train(train::TrainArgs),
    /// Measure synthesis speed and report the real-time factor.
    Bench(bench::BenchArgs),
    /// Verify filter-bank reconstruction quality with a white-noise
    /// roundtrip.
    PqmfCheck(pqmf_check::PqmfCheckArgs),
}

fn main() {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Copysyn(args) => copysyn::run(args).map(|s| {
            println!("{}", s.line());
            eprintln!("wrote {}", args.out.display());
            0
        }),
        Command::Feats(args) => feats::run(args).map(|s| {
            println!("{}", s.line());
            eprintln!("wrote {}", args.out.display());
            0
        }),
        Command::Train(args) => {
            train::run(args, &mut |line| println!("{line}")).map(|s| {
                eprintln!("finished at step {} ({} run now)", s.final_step, s.steps_run);
                0
            })
        }
        Command::Bench(args) => bench::run(args).map(|report| {
            println!("{}", report.lines());
            0
        }),
        Command::PqmfCheck(args) => pqmf_check::run(args).map(|report| {
            println!("{}", report.lines());
            i32::from(!report.pass)
        }),
    };
    match outcome {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}
