use std::path::PathBuf;

use clap::Args;
use ffpe::config::RunConfig;
use ffpe::io;
use ffpe_core::eval::{extract_features, fid as frechet, fleiss_kappa, turing_scores, RatingMatrix, ReaderResponse};
use serde::Serialize;

use super::{emit, require_dir, require_file};

#[derive(Args, Debug)]
pub struct FidArgs {
    /// First image directory.
    #[arg(long, value_name = "DIR")]
    pub a: PathBuf,
    /// Second image directory.
    #[arg(long, value_name = "DIR")]
    pub b: PathBuf,
    /// Seed of the random-projection feature extractor.
    #[arg(long)]
    pub extractor_seed: Option<u64>,
    /// Also write the result here.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Serialize)]
struct FidReport {
    fid: f64,
    n_a: usize,
    n_b: usize,
    extractor_id: String,
}

pub fn fid(cfg: &RunConfig, a: FidArgs) -> anyhow::Result<()> {
    require_dir(&a.a)?;
    require_dir(&a.b)?;
    let mut fc = cfg.fid.clone();
    if let Some(s) = a.extractor_seed {
        fc.seed = s;
    }
    let ex = fc.extractor();
    let pa = io::read_image_dir(&a.a)?;
    let pb = io::read_image_dir(&a.b)?;
    let sa = extract_features(&pa, &ex).map_err(|e| anyhow::anyhow!("{}: {e}", a.a.display()))?;
    let sb = extract_features(&pb, &ex).map_err(|e| anyhow::anyhow!("{}: {e}", a.b.display()))?;
    let report = FidReport { fid: frechet(&sa, &sb)?, n_a: sa.n, n_b: sb.n, extractor_id: sa.extractor_id.clone() };
    emit(&report, a.report.as_deref())
}

fn load_responses(files: &[PathBuf]) -> anyhow::Result<Vec<ReaderResponse>> {
    let mut all = Vec::new();
    for f in files {
        require_file(f)?;
        let batch: Vec<ReaderResponse> = io::read_json(f)?;
        all.extend(batch);
    }
    Ok(all)
}

#[derive(Args, Debug)]
pub struct TuringArgs {
    /// Reader-response exports (JSON arrays); several files are pooled.
    #[arg(long = "responses", value_name = "FILE", required = true, num_args = 1..)]
    pub responses: Vec<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

pub fn turing(a: TuringArgs) -> anyhow::Result<()> {
    let scores = turing_scores(&load_responses(&a.responses)?)?;
    emit(&scores, a.report.as_deref())
}

#[derive(Args, Debug)]
pub struct KappaArgs {
    /// Reader-response exports from every rater.
    #[arg(long = "responses", value_name = "FILE", num_args = 1.., required_unless_present = "matrix", conflicts_with = "matrix")]
    pub responses: Vec<PathBuf>,
    /// Items x categories count matrix as a JSON array of arrays.
    #[arg(long, value_name = "FILE")]
    pub matrix: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Serialize)]
struct KappaReport {
    kappa: Option<f64>,
    observed_agreement: f64,
    expected_agreement: f64,
    n_items: usize,
    n_raters: u32,
    n_categories: usize,
}

pub fn kappa(a: KappaArgs) -> anyhow::Result<()> {
    let m = match &a.matrix {
        Some(path) => {
            require_file(path)?;
            RatingMatrix::new(io::read_json::<Vec<Vec<u32>>>(path)?)?
        }
        None => RatingMatrix::from_responses(&load_responses(&a.responses)?)?,
    };
    let k = fleiss_kappa(&m);
    let report = KappaReport {
        kappa: k.kappa,
        observed_agreement: k.observed,
        expected_agreement: k.expected,
        n_items: m.n_items(),
        n_raters: m.raters(),
        n_categories: m.n_categories(),
    };
    emit(&report, a.report.as_deref())
}
