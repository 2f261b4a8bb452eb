use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::Args;
use ffpe::config::RunConfig;
use ffpe::io;
use ffpe::server::{self, SurveyServer, DECK_FILE};
use ffpe_core::survey::build_deck;

use super::require_dir;

#[derive(Args, Debug)]
pub struct DeckArgs {
    /// Real FFPE patches.
    #[arg(long, value_name = "DIR")]
    pub ffpe: PathBuf,
    /// Translated (AI-FFPE) patches.
    #[arg(long, value_name = "DIR")]
    pub ai_ffpe: PathBuf,
    #[arg(long, default_value_t = 25)]
    pub n_per_class: usize,
    /// Shuffle seed; defaults to the run configuration's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for the deck and its anonymised images.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

pub fn deck_build(cfg: &RunConfig, a: DeckArgs) -> anyhow::Result<()> {
    require_dir(&a.ffpe)?;
    require_dir(&a.ai_ffpe)?;
    let names = |dir: &PathBuf| -> anyhow::Result<Vec<String>> {
        Ok(io::list_images(dir)?.into_iter().map(|p| p.to_string_lossy().into_owned()).collect())
    };
    let seed = a.seed.unwrap_or(cfg.train.seed);
    let mut deck = build_deck(&names(&a.ffpe)?, &names(&a.ai_ffpe)?, a.n_per_class, seed)?;
    io::ensure_dir(&a.out.join("images"))?;
    for item in &mut deck.items {
        let img = io::read_image(std::path::Path::new(&item.image))?;
        let rel = format!("images/{}.png", item.item_id);
        io::write_png(&a.out.join(&rel), &img)?;
        item.image = rel;
    }
    io::write_json(&a.out.join(DECK_FILE), &deck)?;
    println!("{}: {} items ({} per class)", deck.deck_id, deck.len(), deck.n_per_class);
    Ok(())
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Deck file written by `deck-build`.
    #[arg(long, value_name = "FILE")]
    pub deck: PathBuf,
    /// Append-only response log; defaults to `responses.jsonl` beside the deck.
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    /// Static front-end assets.
    #[arg(long, value_name = "DIR")]
    pub assets: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
}

pub fn serve(a: ServeArgs) -> anyhow::Result<()> {
    super::require_file(&a.deck)?;
    let log = a.log.unwrap_or_else(|| a.deck.with_file_name("responses.jsonl"));
    let srv = SurveyServer::open(&a.deck, &log, a.assets, Arc::new(server::utc_now))?;
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    eprintln!("serving {} on http://{}", a.deck.display(), a.addr);
    rt.block_on(server::serve(srv, &a.addr)).with_context(|| format!("serving on {}", a.addr))
}
