//! Reproducibility and the desk-scale training run on the toy domains.

use std::path::Path;
use std::time::Instant;

use ffpe::checkpoint::Checkpoint;
use ffpe_core::eval::{extract_features, fid, FeatureSetStats, RandomProjectionExtractor};
use ffpe_core::image::{ImagePatch, RgbImage};
use ffpe_core::losses::LossReport;
use ffpe_core::model::Generator;
use ffpe_core::tensor::Tensor;
use ffpe_core::toy::toy_domains;
use ffpe_core::train::{fit, resume, Recorder, TrainConfig, TrainObserver, TrainState};

use crate::{ensure, Outcome};

fn tensors(images: &[RgbImage]) -> Vec<Tensor<f32>> {
    images
        .iter()
        .map(|i| ImagePatch::from_image("t", i.clone()).normalized().and_then(|p| p.to_tensor()).expect("toy image"))
        .collect()
}

fn bits(r: &LossReport) -> [u64; 6] {
    [r.gan_g, r.gan_d, r.patchnce_x, r.patchnce_y, r.sreg, r.total].map(f64::to_bits)
}

/// Records every report and keeps a serialized checkpoint taken after `at` iterations.
struct Capture {
    cfg: TrainConfig,
    at: u64,
    reports: Vec<LossReport>,
    checkpoint: Option<Vec<u8>>,
}

impl TrainObserver<f32> for Capture {
    fn on_step(&mut self, state: &TrainState<f32>, report: &LossReport) -> ffpe_core::Result<()> {
        self.reports.push(*report);
        if state.iteration == self.at {
            self.checkpoint = Some(Checkpoint::from_state(&self.cfg, state).to_bytes());
        }
        Ok(())
    }
}

pub fn determinism() -> Outcome {
    let (src, tgt) = toy_domains(50, 64, 11);
    let (xs, ys) = (tensors(&src), tensors(&tgt));
    let cfg = TrainConfig { epochs: 1, seed: 5, ..Default::default() };
    let k = 25;

    let mut first = Recorder::default();
    fit(&xs, &ys, &cfg, &mut first).map_err(|e| e.to_string())?;
    let mut second = Capture { cfg: cfg.clone(), at: k, reports: Vec::new(), checkpoint: None };
    fit(&xs, &ys, &cfg, &mut second).map_err(|e| e.to_string())?;
    ensure!(first.reports.len() == 50, "{} iterations instead of 50", first.reports.len());
    let a: Vec<_> = first.reports.iter().map(bits).collect();
    let b: Vec<_> = second.reports.iter().map(bits).collect();
    if let Some(i) = a.iter().zip(&b).position(|(x, y)| x != y) {
        return Err(format!("runs diverge at iteration {}", i + 1));
    }

    let bytes = second.checkpoint.ok_or("no checkpoint captured")?;
    let restored = Checkpoint::from_bytes(&bytes, Path::new("memory")).map_err(|e| e.to_string())?;
    let state = restored.into_state().map_err(|e| e.to_string())?;
    let mut resumed = Recorder::default();
    resume(state, &xs, &ys, &cfg, &mut resumed).map_err(|e| e.to_string())?;
    let c: Vec<_> = resumed.reports.iter().map(bits).collect();
    ensure!(c.len() == 50 - k as usize, "resumed run has {} iterations", c.len());
    ensure!(c[0] == a[k as usize], "iteration {} after resume differs", k + 1);
    ensure!(c[..] == a[k as usize..], "resumed run drifts after iteration {}", k + 1);
    Ok(format!("50 identical reports; resume from iteration {k} reproduces iterations {}..50 bit-exactly", k + 1))
}

fn fid_of(
    g: &Generator<f32>,
    xs: &[Tensor<f32>],
    target: &FeatureSetStats,
    ex: &RandomProjectionExtractor,
) -> Result<f64, String> {
    let outs = xs
        .iter()
        .map(|x| g.translate(x).and_then(|y| ImagePatch::from_tensor("t", &y, 0)).and_then(|p| p.quantized()))
        .collect::<ffpe_core::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    fid(&extract_features(&outs, ex).map_err(|e| e.to_string())?, target).map_err(|e| e.to_string())
}

/// Mean `|x - G(x)|` over a fixed set of source images.
fn sreg_of(g: &Generator<f32>, xs: &[Tensor<f32>]) -> ffpe_core::Result<f64> {
    let mut total = 0.0;
    for x in xs {
        let y = g.translate(x)?;
        total += y.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / x.numel() as f64;
    }
    Ok(total / xs.len() as f64)
}

struct Probe {
    fixed: Vec<Tensor<f32>>,
    every: u64,
    sreg: Vec<(u64, f64)>,
    started: Instant,
}

impl TrainObserver<f32> for Probe {
    fn on_step(&mut self, state: &TrainState<f32>, report: &LossReport) -> ffpe_core::Result<()> {
        if state.iteration.is_multiple_of(self.every) {
            let s = sreg_of(&state.generator, &self.fixed)?;
            self.sreg.push((state.iteration, s));
            eprintln!(
                "  smoke: iteration {} sreg {s:.4} total {:.3} ({:.0} s)",
                state.iteration,
                report.total,
                self.started.elapsed().as_secs_f64()
            );
        }
        Ok(())
    }
}

pub fn smoke() -> Outcome {
    let started = Instant::now();
    let (src, tgt) = toy_domains(200, 64, 0);
    let (xs, ys) = (tensors(&src), tensors(&tgt));
    let cfg = TrainConfig { epochs: 10, ..Default::default() };
    ensure!(cfg.total_iterations(xs.len(), ys.len()) == 2000, "schedule is not 2,000 iterations");

    let ex = RandomProjectionExtractor::default();
    let target_patches: Vec<ImagePatch> = tgt.iter().map(|i| ImagePatch::from_image("t", i.clone())).collect();
    let target = extract_features(&target_patches, &ex).map_err(|e| e.to_string())?;
    let initial = TrainState::<f32>::new(&cfg).map_err(|e| e.to_string())?;
    let fid0 = fid_of(&initial.generator, &xs, &target, &ex)?;

    let mut probe = Probe { fixed: xs[..16].to_vec(), every: 100, sreg: Vec::new(), started };
    let state = fit(&xs, &ys, &cfg, &mut probe).map_err(|e| e.to_string())?;
    let fid_end = fid_of(&state.generator, &xs, &target, &ex)?;
    let secs = started.elapsed().as_secs_f64();

    let drop = 1.0 - fid_end / fid0;
    let s100 = probe.sreg.first().map(|s| s.1).ok_or("no sreg probe")?;
    let (worst_it, worst) = probe.sreg.iter().copied().fold((100, s100), |m, s| if s.1 > m.1 { s } else { m });
    let detail = format!(
        "FID {fid0:.2} -> {fid_end:.2} (drop {:.1}%), sreg at 100 = {s100:.4}, max later {worst:.4} at {worst_it}, {:.0} min",
        100.0 * drop,
        secs / 60.0
    );
    ensure!(drop >= 0.30, "FID drop below 30%: {detail}");
    ensure!(worst < 2.0 * s100, "sreg exceeded twice its iteration-100 value: {detail}");
    ensure!(secs <= 3.0 * 3600.0, "over the 3 h CPU budget: {detail}");
    Ok(detail)
}
