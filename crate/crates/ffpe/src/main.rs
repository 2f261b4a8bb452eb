//! `ffpe` command-line entry point.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ffpe::config::{RunConfig, CONFIG_ENV};

#[derive(Parser, Debug)]
#[command(name = "ffpe", version, about = "Frozen-section to FFPE-style histology translation")]
struct Cli {
    /// Run configuration (JSON, or TOML by extension). Flags override its values.
    #[arg(long, global = true, env = CONFIG_ENV, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Segment tissue on a slide and write the mask and contours.
    Segment(commands::slide::SegmentArgs),
    /// Tile a slide's tissue into patches plus a manifest.
    Patchify(commands::slide::PatchifyArgs),
    /// Train a translation model on unpaired frozen-section and FFPE patches.
    Train(commands::train::TrainArgs),
    /// Translate a slide or a patch directory with a checkpoint.
    Translate(commands::slide::TranslateArgs),
    /// Reassemble a patch directory into a slide raster.
    Stitch(commands::slide::StitchArgs),
    /// Frechet distance between two image sets.
    Fid(commands::eval::FidArgs),
    /// Precision, recall and F1 of reader responses.
    TuringStats(commands::eval::TuringArgs),
    /// Fleiss' kappa of reader responses or a rating matrix.
    Kappa(commands::eval::KappaArgs),
    /// Build a blinded, shuffled reader-study deck.
    DeckBuild(commands::survey::DeckArgs),
    /// Serve a deck to raters and record their responses.
    ServeSurvey(commands::survey::ServeArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Segment(a) => commands::slide::segment(&cfg, a),
        Command::Patchify(a) => commands::slide::patchify(&cfg, a),
        Command::Train(a) => commands::train::train(&cfg, a),
        Command::Translate(a) => commands::slide::translate(&cfg, a),
        Command::Stitch(a) => commands::slide::stitch(&cfg, a),
        Command::Fid(a) => commands::eval::fid(&cfg, a),
        Command::TuringStats(a) => commands::eval::turing(a),
        Command::Kappa(a) => commands::eval::kappa(a),
        Command::DeckBuild(a) => commands::survey::deck_build(&cfg, a),
        Command::ServeSurvey(a) => commands::survey::serve(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
