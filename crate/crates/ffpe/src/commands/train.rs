use std::fs::OpenOptions;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::Context;
use clap::Args;
use ffpe::checkpoint::{self, Checkpoint};
use ffpe::config::RunConfig;
use ffpe::io;
use ffpe_core::losses::LossReport;
use ffpe_core::tensor::Tensor;
use ffpe_core::train::{batch_at, train_step, TrainState};
use serde::Serialize;

use super::{require_dir, require_file};

/// File name of the JSON-lines training log.
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Frozen-section training patches.
    #[arg(long, value_name = "DIR")]
    pub source: PathBuf,
    /// FFPE training patches.
    #[arg(long, value_name = "DIR")]
    pub target: PathBuf,
    /// Output directory for checkpoints, the log and the resolved config.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Checkpoint interval in iterations; 0 writes only the final checkpoint.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Stop after this many iterations in total.
    #[arg(long)]
    pub max_iterations: Option<u64>,
    /// Continue from a checkpoint, using its configuration.
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
}

#[derive(Serialize)]
struct LogLine<'a> {
    iteration: u64,
    lr: f64,
    report: &'a LossReport,
    wall_clock_s: f64,
}

fn load_set(dir: &std::path::Path) -> anyhow::Result<Vec<Tensor<f32>>> {
    require_dir(dir)?;
    let patches = io::read_image_dir(dir)?;
    anyhow::ensure!(!patches.is_empty(), "{}: no PNG or TIFF images", dir.display());
    patches
        .iter()
        .map(|p| p.normalized()?.to_tensor::<f32>())
        .collect::<ffpe_core::Result<Vec<_>>>()
        .with_context(|| format!("loading {}", dir.display()))
}

pub fn train(cfg: &RunConfig, a: TrainArgs) -> anyhow::Result<()> {
    let (mut tc, mut state) = match &a.resume {
        Some(path) => {
            require_file(path)?;
            let ck = Checkpoint::load(path)?;
            let tc = ck.config.clone();
            (tc, ck.into_state()?)
        }
        None => {
            let mut tc = cfg.train.clone();
            if let Some(v) = a.seed {
                tc.seed = v;
            }
            if let Some(v) = a.lr {
                tc.lr = v;
            }
            let state = TrainState::<f32>::new(&tc)?;
            (tc, state)
        }
    };
    if let Some(v) = a.epochs {
        tc.epochs = v;
    }
    if let Some(v) = a.checkpoint_every {
        tc.checkpoint_every = v;
    }
    let xs = load_set(&a.source)?;
    let ys = load_set(&a.target)?;
    let shape = xs[0].shape().to_vec();
    if let Some(bad) = xs.iter().chain(&ys).find(|t| t.shape() != shape.as_slice()) {
        anyhow::bail!("all training patches must share one size; found {:?} and {:?}", shape, bad.shape());
    }
    io::ensure_dir(&a.out)?;
    io::write_json(&a.out.join("config.json"), &tc)?;
    let per_epoch = tc.iterations_per_epoch(xs.len(), ys.len()) as u64;
    anyhow::ensure!(per_epoch > 0, "training sets are smaller than one batch of {}", tc.batch_size);
    let mut stop = tc.total_iterations(xs.len(), ys.len());
    if let Some(m) = a.max_iterations {
        stop = stop.min(m);
    }
    let log_path = a.out.join(LOG_FILE);
    let mut log = OpenOptions::new().create(true).append(true).open(&log_path).map_err(ffpe::Error::io(&log_path))?;
    let start = Instant::now();
    while state.iteration < stop {
        let (x, y) = batch_at(&tc, &xs, &ys, state.iteration)?;
        let lr = tc.lr_at((state.iteration / per_epoch) as usize);
        let report =
            train_step(&mut state, &tc, &x, &y, lr).with_context(|| format!("iteration {}", state.iteration))?;
        let line =
            LogLine { iteration: state.iteration, lr, report: &report, wall_clock_s: start.elapsed().as_secs_f64() };
        io::append_line(&mut log, &log_path, &serde_json::to_string(&line)?)?;
        let every = tc.checkpoint_every as u64;
        if every > 0 && state.iteration % every == 0 && state.iteration < stop {
            Checkpoint::from_state(&tc, &state).save(&a.out.join(checkpoint::file_name(state.iteration)))?;
        }
    }
    let final_path = a.out.join(checkpoint::file_name(state.iteration));
    Checkpoint::from_state(&tc, &state).save(&final_path)?;
    println!("trained to iteration {}; checkpoint {}", state.iteration, final_path.display());
    Ok(())
}
