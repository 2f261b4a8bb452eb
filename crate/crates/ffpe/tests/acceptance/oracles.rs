//! Closed-form and brute-force oracles for the evaluation metrics, the loss
//! terms and their gradients.

use std::time::Instant;

use ffpe_core::autograd::{Exec, Graph, Var};
use ffpe_core::eval::{fid, fleiss_kappa, FeatureSetStats, RatingMatrix};
use ffpe_core::losses::patch_nce_loss;
use ffpe_core::model::{Discriminator, DiscriminatorConfig, FeatureStack, ParamStore, SpatialAttention};
use ffpe_core::tensor::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, Outcome};

fn stats(mean: Vec<f64>, cov: &DMatrix<f64>) -> FeatureSetStats {
    let d = mean.len();
    let cov = (0..d * d).map(|i| cov[(i / d, i % d)]).collect();
    FeatureSetStats { mean, cov, n: 100, extractor_id: "oracle".into() }
}

fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let m = &a * a.transpose() + DMatrix::identity(d, d) * 0.05;
    (&m + m.transpose()) * 0.5
}

/// Frechet distance via a Cholesky factor: the eigenvalues of `L^T C2 L`
/// equal those of `C1 C2` when `C1 = L L^T`.
fn fid_cholesky(m1: &[f64], c1: &DMatrix<f64>, m2: &[f64], c2: &DMatrix<f64>) -> f64 {
    let l = c1.clone().cholesky().expect("positive definite").l();
    let inner = l.transpose() * c2 * &l;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = inner.symmetric_eigen().eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let dm = DVector::from_column_slice(m1) - DVector::from_column_slice(m2);
    dm.norm_squared() + c1.trace() + c2.trace() - 2.0 * tr_sqrt
}

pub fn fid_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;

    for d in [1, 2, 4, 8] {
        let a = stats((0..d).map(|_| rng.random_range(-2.0..2.0)).collect(), &random_spd(d, &mut rng));
        let self_fid = fid(&a, &a).map_err(|e| e.to_string())?;
        ensure!(self_fid.abs() < 1e-6, "fid(a, a) = {self_fid:e} at d = {d}");
        worst = worst.max(self_fid.abs());
    }

    for d in [2, 4, 16] {
        let delta: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let eye = DMatrix::identity(d, d);
        let got = fid(&stats(vec![0.0; d], &eye), &stats(delta.clone(), &eye)).map_err(|e| e.to_string())?;
        let want: f64 = delta.iter().map(|v| v * v).sum();
        ensure!((got - want).abs() < 1e-6, "identity covariance, d = {d}: {got} vs |d|^2 = {want}");
        worst = worst.max((got - want).abs());
    }

    for _ in 0..50 {
        let (c1, c2) = (random_spd(4, &mut rng), random_spd(4, &mut rng));
        let m1: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m2: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = fid(&stats(m1.clone(), &c1), &stats(m2.clone(), &c2)).map_err(|e| e.to_string())?;
        let want = fid_cholesky(&m1, &c1, &m2, &c2);
        ensure!((got - want).abs() < 1e-6, "random 4-D stats: {got} vs oracle {want}");
        worst = worst.max((got - want).abs());
    }

    let secs = t.elapsed().as_secs_f64();
    ensure!(secs < 1.0, "took {secs:.3} s");
    Ok(format!("max deviation {worst:.2e} over 57 cases in {:.1} ms", secs * 1e3))
}

fn unit(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// `[N][S][D]` embeddings for one layer.
type Layer = Vec<Vec<Vec<f64>>>;

fn to_stack(layers: &[Layer]) -> FeatureStack {
    let tensors: Vec<Tensor<f64>> = layers
        .iter()
        .map(|l| {
            let (n, s, d) = (l.len(), l[0].len(), l[0][0].len());
            Tensor::from_vec(&[n, s, d], l.iter().flatten().flatten().copied().collect()).unwrap()
        })
        .collect();
    let ids: Vec<usize> = (0..layers.len()).collect();
    let locs: Vec<Vec<usize>> = layers.iter().map(|l| (0..l[0].len()).map(|i| i * 3 + 1).collect()).collect();
    FeatureStack::from_values(&ids, &locs, &tensors.iter().collect::<Vec<_>>())
}

/// Cross-entropy of each query against all keys of its image, the matching
/// key being the positive; averaged over locations and images, then layers.
fn patch_nce_brute(q: &[Layer], k: &[Layer], tau: f64) -> f64 {
    let mut total = 0.0;
    for (ql, kl) in q.iter().zip(k) {
        let mut sum = 0.0;
        let mut count = 0.0;
        for (qi, ki) in ql.iter().zip(kl) {
            for (s, v) in qi.iter().enumerate() {
                let dot = |w: &Vec<f64>| v.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / tau;
                let pos = dot(&ki[s]).exp();
                let mut denom = pos;
                for (t, w) in ki.iter().enumerate() {
                    if t != s {
                        denom += dot(w).exp();
                    }
                }
                sum += -(pos / denom).ln();
                count += 1.0;
            }
        }
        total += sum / count;
    }
    total / q.len() as f64
}

pub fn patch_nce_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let layers = rng.random_range(1..=3);
        let n = rng.random_range(1..=2);
        let tau = [0.07, 0.08, 0.5][case % 3];
        let mut q = Vec::new();
        let mut k = Vec::new();
        for _ in 0..layers {
            let s = rng.random_range(2..=16);
            let d = rng.random_range(2..=8);
            let mut draw = || (0..n).map(|_| (0..s).map(|_| unit(d, &mut rng)).collect()).collect::<Layer>();
            q.push(draw());
            k.push(draw());
        }
        let got = patch_nce_loss(&to_stack(&q), &to_stack(&k), tau).map_err(|e| e.to_string())?;
        let want = patch_nce_brute(&q, &k, tau);
        let err = (got - want).abs() / want.abs().max(1.0);
        ensure!(err < 1e-6, "instance {case}: {got} vs brute force {want}");
        worst = worst.max(err);
    }
    for s in [2usize, 5, 16] {
        let v = unit(6, &mut rng);
        let layer: Layer = vec![vec![v; s]];
        let got = patch_nce_loss(&to_stack(std::slice::from_ref(&layer)), &to_stack(&[layer]), 0.07)
            .map_err(|e| e.to_string())?;
        ensure!((got - (s as f64).ln()).abs() < 1e-9, "uniform case S = {s}: {got} vs ln S");
    }
    Ok(format!("50 random instances within {worst:.1e}; uniform case equals ln S"))
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Var + 'a;

const VANISHING: f64 = 1e-7;

/// Relative error `|analytic - numeric| / |numeric|` for each input, with
/// central differences of step `1e-6`.
fn fd_errors(inputs: &[Tensor<f64>], build: &Build) -> Vec<f64> {
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &vars);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).expect("backward");
    let eps = 1e-6;
    let mut work = inputs.to_vec();
    let mut errors = Vec::with_capacity(inputs.len());
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        let (mut diff, mut scale) = (0.0, 0.0);
        for j in 0..t.numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            let num = (plus - minus) / (2.0 * eps);
            diff += (analytic.data()[j] - num).powi(2);
            scale += num * num;
        }
        let (diff, scale) = (diff.sqrt(), scale.sqrt());
        let a_norm = analytic.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        // A gradient that vanishes identically (a bias ahead of instance
        // normalization) leaves only rounding noise in the difference quotient.
        errors.push(if scale < VANISHING && a_norm < VANISHING { 0.0 } else { diff / scale.max(1e-12) });
    }
    errors
}

/// Contract a tensor against fixed random weights to get a scalar.
fn probe(g: &mut Graph<f64>, y: &Var, seed: u64) -> Var {
    let n = g.value(y).numel();
    let flat = g.reshape(y, &[1, n]).unwrap();
    let w = g.constant(Tensor::randn(&[1, n], 1.0, &mut ChaCha8Rng::seed_from_u64(seed)));
    let s = g.linear(&flat, &w, None).unwrap();
    g.weighted_sum(&[(s, 1.0)]).unwrap()
}

fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn small_discriminator() -> Discriminator<f64> {
    let cfg = DiscriminatorConfig { base_channels: 8, n_layers: 1, init_gain: 1.0, ..Default::default() };
    Discriminator::new(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
}

pub fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let mut report = Vec::new();
    let mut check = |name: &str, inputs: Vec<Tensor<f64>>, build: &Build| -> Result<(), String> {
        let errs = fd_errors(&inputs, build);
        let worst = errs.iter().copied().fold(0.0, f64::max);
        ensure!(worst < 1e-4, "{name}: relative error {worst:.2e} (per input {errs:?})");
        report.push(format!("{name} {worst:.1e}"));
        Ok(())
    };

    let d = small_discriminator();
    let np = d.params.len();
    let with_params =
        |lead: Vec<Tensor<f64>>| lead.into_iter().chain(d.params.tensors().iter().cloned()).collect::<Vec<_>>();

    check("gan_G", with_params(vec![rnd(&[1, 3, 16, 16], 1)]), &|g, v| {
        let s = d.forward(g, &v[1..], &v[0]).unwrap();
        g.mse_to_const(s, 1.0).unwrap()
    })?;
    check("gan_D", with_params(vec![rnd(&[1, 3, 16, 16], 2), rnd(&[1, 3, 16, 16], 3)]), &|g, v| {
        let p = &v[2..2 + np];
        let sr = d.forward(g, p, &v[0]).unwrap();
        let sf = d.forward(g, p, &v[1]).unwrap();
        let lr = g.mse_to_const(sr, 1.0).unwrap();
        let lf = g.mse_to_const(sf, 0.0).unwrap();
        g.weighted_sum(&[(lr, 0.5), (lf, 0.5)]).unwrap()
    })?;
    check("gan_logistic", vec![rnd(&[1, 1, 6, 6], 4)], &|g, v| {
        let a = g.bce_to_const(v[0], 1.0).unwrap();
        let b = g.bce_to_const(v[0], 0.0).unwrap();
        g.weighted_sum(&[(a, 0.3), (b, 0.7)]).unwrap()
    })?;
    check("patch_nce", vec![rnd(&[1, 16, 8], 6), rnd(&[1, 16, 8], 7)], &|g, v| {
        let q = g.l2_normalize_last(&v[0]).unwrap();
        let k = g.l2_normalize_last(&v[1]).unwrap();
        g.patch_nce(q, k, 0.07).unwrap()
    })?;
    check("sreg", vec![rnd(&[1, 3, 16, 16], 8), rnd(&[1, 3, 16, 16], 9)], &|g, v| g.l1_mean(v[0], v[1]).unwrap())?;

    let mut store = ParamStore::<f64>::new();
    let sab = SpatialAttention::new(&mut store, "sab", 8, 2, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    let inputs: Vec<Tensor<f64>> =
        std::iter::once(rnd(&[1, 8, 16, 16], 11)).chain(store.tensors().iter().cloned()).collect();
    check("sab", inputs, &|g, v| {
        let y = sab.forward(g, &v[1..], &v[0]).unwrap();
        probe(g, &y, 12)
    })?;

    let secs = t.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(report.join(", "))
}

/// Kappa in exact integer arithmetic:
/// `(A T^2 - S N r (r - 1)) / (N r (r - 1) (T^2 - S))` with
/// `A = sum n_ij^2 - N r`, `S = sum_j c_j^2`, `T = N r`.
fn kappa_exact(counts: &[Vec<u32>]) -> f64 {
    let n = counts.len() as i128;
    let r: i128 = counts[0].iter().map(|&c| c as i128).sum();
    let k = counts[0].len();
    let a: i128 = counts.iter().flatten().map(|&c| (c as i128).pow(2)).sum::<i128>() - n * r;
    let s: i128 = (0..k).map(|j| counts.iter().map(|row| row[j] as i128).sum::<i128>().pow(2)).sum();
    let t = n * r;
    let num = a * t * t - s * n * r * (r - 1);
    let den = n * r * (r - 1) * (t * t - s);
    num as f64 / den as f64
}

pub fn kappa() -> Outcome {
    let k = |rows: Vec<Vec<u32>>| RatingMatrix::new(rows).map(|m| fleiss_kappa(&m).kappa).map_err(|e| e.to_string());

    let perfect = k(vec![vec![4, 0, 0], vec![0, 4, 0], vec![0, 0, 4], vec![4, 0, 0]])?;
    ensure!(perfect == Some(1.0), "perfect agreement gave {perfect:?}");
    let hand = k(vec![vec![2, 0], vec![0, 2]])?;
    ensure!(hand == Some(1.0), "2x2x2 example gave {hand:?}");

    let worked: Vec<Vec<u32>> = vec![
        vec![0, 0, 0, 0, 14],
        vec![0, 2, 6, 4, 2],
        vec![0, 0, 3, 5, 6],
        vec![0, 3, 9, 2, 0],
        vec![2, 2, 8, 1, 1],
        vec![7, 7, 0, 0, 0],
        vec![3, 2, 6, 3, 0],
        vec![2, 5, 3, 2, 2],
        vec![6, 5, 2, 1, 0],
        vec![0, 2, 2, 3, 7],
    ];
    let got = k(worked.clone())?.ok_or("worked matrix gave an undefined kappa")?;
    let want = kappa_exact(&worked);
    ensure!((got - want).abs() < 1e-9, "worked matrix: {got} vs exact {want}");
    ensure!((got - 0.210).abs() < 5e-4, "worked matrix: {got} does not round to the published 0.210");

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let (items, cats, raters) = (rng.random_range(2..20), rng.random_range(2..6), rng.random_range(2..9u32));
        let rows: Vec<Vec<u32>> = (0..items)
            .map(|_| {
                let mut row = vec![0; cats];
                for _ in 0..raters {
                    row[rng.random_range(0..cats)] += 1;
                }
                row
            })
            .collect();
        let got = k(rows.clone())?;
        let exact_undefined = {
            let s: u32 = (0..cats).filter(|&j| rows.iter().any(|r| r[j] > 0)).count() as u32;
            s == 1
        };
        match got {
            Some(v) => ensure!((v - kappa_exact(&rows)).abs() < 1e-9, "random matrix: {v} vs {}", kappa_exact(&rows)),
            None => ensure!(exact_undefined, "kappa flagged undefined with {} categories in use", cats),
        }
    }
    Ok(format!("perfect = 1, 2x2x2 = 1, worked matrix = {got:.6} (exact {want:.6}), 100 random tables within 1e-9"))
}
