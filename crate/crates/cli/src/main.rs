use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod cmd;
mod manifest;

use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "garden", version, about = "Train and sample a small garden-painting diffusion model")]
struct Cli {
    /// Directory that relative paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a toy corpus or ingest and filter real images.
    PrepareData(cmd::data::Args),
    /// Run one training stage (vae, diffusion or lora).
    Train(cmd::train::Args),
    /// Generate an image from a prompt.
    Sample(cmd::generate::SampleArgs),
    /// Regenerate the masked region of an image.
    Inpaint(cmd::generate::InpaintArgs),
    /// Train the contrastive dual encoder used for evaluation.
    TrainEncoder(cmd::eval::TrainArgs),
    /// Score generated images against prompts and references.
    Evaluate(cmd::eval::EvalArgs),
    /// Stitch scenes into an equirectangular panorama bundle.
    Panorama(cmd::panorama::Args),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(clap::Args, Debug)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
}

/// A bad flag combination or invalid input, reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Everything a command needs besides its own flags.
pub struct Ctx {
    pub workdir: PathBuf,
    pub argv: Vec<String>,
}

impl Ctx {
    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }

    pub fn manifest(&self, command: &str) -> RunManifest {
        RunManifest::new(command, &self.argv, &self.workdir)
    }
}

fn run(cli: Cli, argv: Vec<String>) -> anyhow::Result<()> {
    let workdir = std::path::absolute(&cli.workdir).unwrap_or(cli.workdir.clone());
    let ctx = Ctx { workdir, argv };
    match cli.command {
        Command::PrepareData(a) => cmd::data::run(&ctx, a),
        Command::Train(a) => cmd::train::run(&ctx, a),
        Command::Sample(a) => cmd::generate::sample(&ctx, a),
        Command::Inpaint(a) => cmd::generate::inpaint(&ctx, a),
        Command::TrainEncoder(a) => cmd::eval::train(&ctx, a),
        Command::Evaluate(a) => cmd::eval::evaluate(&ctx, a),
        Command::Panorama(a) => cmd::panorama::run(&ctx, a),
        Command::Replay(a) => replay(&ctx, a),
    }
}

fn replay(ctx: &Ctx, a: ReplayArgs) -> anyhow::Result<()> {
    let m = RunManifest::load(&ctx.path(&a.manifest))?;
    let cli = Cli::try_parse_from(&m.argv).map_err(|e| usage(format!("recorded argv does not parse: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(usage("a replay manifest cannot point at another replay"));
    }
    let cli = Cli {
        workdir: PathBuf::from(&m.workdir),
        ..cli
    };
    run(cli, m.argv)
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
