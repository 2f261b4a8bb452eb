//! Evaluation: Fréchet distance between embedding distributions, reader-study
//! scores and inter-rater agreement.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImagePatch, Pixels};
use crate::linalg::{sqrt_psd, symmetric_eigen, SquareMatrix};

/// Tolerance for negative eigenvalues of covariance matrices.
pub const PSD_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSetStats {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim` sample covariance (divisor `n - 1`).
    pub cov: Vec<f64>,
    pub n: usize,
    pub extractor_id: String,
}

impl FeatureSetStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn from_embeddings(rows: &[Vec<f64>], extractor_id: impl Into<String>) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Invalid(format!("feature statistics need at least 2 samples, got {n}")));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Invalid("embeddings have inconsistent dimensions".into()));
        }
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for r in rows {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in 0..=i {
                    cov[i * d + j] += di * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in 0..=i {
                let v = cov[i * d + j] / (n - 1) as f64;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(Self { mean, cov, n, extractor_id: extractor_id.into() })
    }

    fn cov_matrix(&self) -> SquareMatrix {
        SquareMatrix { n: self.dim(), data: self.cov.clone() }
    }
}

/// Maps an image patch to a fixed-length embedding.
pub trait FeatureExtractor {
    fn id(&self) -> String;
    fn embed(&self, patch: &ImagePatch) -> Result<Vec<f64>>;
}

/// Area-pools a patch to `pool x pool x 3` in `[-1, 1]` and applies a fixed
/// Gaussian random projection to `dim` outputs.
#[derive(Clone, Debug)]
pub struct RandomProjectionExtractor {
    pub seed: u64,
    pub pool: usize,
    pub dim: usize,
    weights: Vec<f64>,
}

impl RandomProjectionExtractor {
    pub fn new(seed: u64, pool: usize, dim: usize) -> Self {
        let inputs = 3 * pool * pool;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (inputs as f64).sqrt();
        let weights = (0..inputs * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect();
        Self { seed, pool, dim, weights }
    }

    fn pooled(&self, patch: &ImagePatch) -> Result<Vec<f64>> {
        let (w, h, p) = (patch.width, patch.height, self.pool);
        if w < p || h < p {
            return Err(Error::Invalid(format!("patch {w}x{h} smaller than pooling grid {p}")));
        }
        let value = |i: usize| -> f64 {
            match patch.pixels() {
                Pixels::Uint8(d) => d[i] as f64 / 127.5 - 1.0,
                Pixels::Normalized(d) => d[i] as f64,
            }
        };
        let mut out = vec![0.0; 3 * p * p];
        for by in 0..p {
            let (y0, y1) = (by * h / p, (by + 1) * h / p);
            for bx in 0..p {
                let (x0, x1) = (bx * w / p, (bx + 1) * w / p);
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        for c in 0..3 {
                            out[(c * p + by) * p + bx] += value((y * w + x) * 3 + c);
                        }
                    }
                }
                for c in 0..3 {
                    out[(c * p + by) * p + bx] /= count;
                }
            }
        }
        Ok(out)
    }
}

impl Default for RandomProjectionExtractor {
    fn default() -> Self {
        Self::new(0, 16, 64)
    }
}

impl FeatureExtractor for RandomProjectionExtractor {
    fn id(&self) -> String {
        format!("random-projection:seed={}:pool={}:dim={}", self.seed, self.pool, self.dim)
    }

    fn embed(&self, patch: &ImagePatch) -> Result<Vec<f64>> {
        let x = self.pooled(patch)?;
        Ok(self.weights.chunks(x.len()).map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum()).collect())
    }
}

pub fn extract_features<E: FeatureExtractor + ?Sized>(
    patches: &[ImagePatch],
    extractor: &E,
) -> Result<FeatureSetStats> {
    if patches.len() < 2 {
        return Err(Error::Invalid(format!("feature statistics need at least 2 patches, got {}", patches.len())));
    }
    let rows = patches.iter().map(|p| extractor.embed(p)).collect::<Result<Vec<_>>>()?;
    FeatureSetStats::from_embeddings(&rows, extractor.id())
}

fn check_psd(s: &FeatureSetStats, which: &str) -> Result<()> {
    let c = s.cov_matrix();
    if c.max_asymmetry() > PSD_TOL {
        return Err(Error::Invalid(format!("{which} covariance is not symmetric")));
    }
    let eig = symmetric_eigen(&c)?;
    let scale = eig.values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if let Some(&min) = eig.values.first() {
        if min < -PSD_TOL * scale {
            return Err(Error::NotPsd(min));
        }
    }
    Ok(())
}

/// `|mu1 - mu2|^2 + Tr(C1 + C2 - 2 (C1 C2)^(1/2))`, evaluated through the
/// symmetric form `(C1^(1/2) C2 C1^(1/2))^(1/2)`.
pub fn fid(a: &FeatureSetStats, b: &FeatureSetStats) -> Result<f64> {
    if a.extractor_id != b.extractor_id {
        return Err(Error::ExtractorMismatch(a.extractor_id.clone(), b.extractor_id.clone()));
    }
    let d = a.dim();
    if b.dim() != d || a.cov.len() != d * d || b.cov.len() != d * d {
        return Err(Error::Invalid(format!("statistics dimensions differ: {} vs {}", d, b.dim())));
    }
    check_psd(a, "first")?;
    check_psd(b, "second")?;
    let c1 = a.cov_matrix();
    let c2 = b.cov_matrix();
    let s1 = sqrt_psd(&c1, f64::INFINITY)?;
    let m = s1.matmul(&c2).matmul(&s1).symmetrized();
    let eig = symmetric_eigen(&m)?;
    let tr_sqrt: f64 = eig.values.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let v = mean_term + c1.trace() + c2.trace() - 2.0 * tr_sqrt;
    Ok(v.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    RealFfpe,
    AiFfpe,
}

impl Source {
    pub const ALL: [Source; 2] = [Source::RealFfpe, Source::AiFfpe];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::RealFfpe => "real_ffpe",
            Source::AiFfpe => "ai_ffpe",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReaderResponse {
    pub rater_id: String,
    pub item_id: String,
    pub true_source: Source,
    pub judged_source: Source,
    #[serde(rename = "timestamp_iso8601")]
    pub timestamp: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Responses whose true source is this class.
    pub support: usize,
    /// Fraction of this class's responses judged real.
    pub judged_real_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuringScores {
    pub real_ffpe: ClassScores,
    pub ai_ffpe: ClassScores,
    /// `confusion[true][judged]`, indexed real then AI.
    pub confusion: [[usize; 2]; 2],
    pub accuracy: f64,
    pub n_responses: usize,
    pub n_raters: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn check_unique(responses: &[ReaderResponse]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for r in responses {
        if !seen.insert((r.rater_id.as_str(), r.item_id.as_str())) {
            return Err(Error::DuplicateResponse { rater: r.rater_id.clone(), item: r.item_id.clone() });
        }
    }
    Ok(())
}

/// Per-class precision, recall and F1 (undefined ratios count as 0), plus the
/// fraction of each true class judged real.
pub fn turing_scores(responses: &[ReaderResponse]) -> Result<TuringScores> {
    if responses.is_empty() {
        return Err(Error::Empty("reader responses"));
    }
    check_unique(responses)?;
    let mut cm = [[0usize; 2]; 2];
    for r in responses {
        cm[r.true_source.index()][r.judged_source.index()] += 1;
    }
    let class = |c: usize| {
        let tp = cm[c][c];
        let support = cm[c][0] + cm[c][1];
        let predicted = cm[0][c] + cm[1][c];
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        ClassScores { precision, recall, f1, support, judged_real_fraction: ratio(cm[c][0], support) }
    };
    let raters: BTreeSet<&str> = responses.iter().map(|r| r.rater_id.as_str()).collect();
    Ok(TuringScores {
        real_ffpe: class(0),
        ai_ffpe: class(1),
        confusion: cm,
        accuracy: ratio(cm[0][0] + cm[1][1], responses.len()),
        n_responses: responses.len(),
        n_raters: raters.len(),
    })
}

/// Items-by-categories count table with a constant number of raters per item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingMatrix {
    counts: Vec<Vec<u32>>,
    raters: u32,
}

impl RatingMatrix {
    pub fn new(counts: Vec<Vec<u32>>) -> Result<Self> {
        let first = counts.first().ok_or(Error::Empty("rating matrix"))?;
        let k = first.len();
        if k < 2 {
            return Err(Error::Invalid("rating matrix needs at least two categories".into()));
        }
        let raters: u32 = first.iter().sum();
        for (i, row) in counts.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Invalid(format!("row {i} has {} categories, expected {k}", row.len())));
            }
            let s: u32 = row.iter().sum();
            if s != raters {
                return Err(Error::Invalid(format!("row {i} sums to {s}, expected {raters} raters")));
            }
        }
        if raters < 2 {
            return Err(Error::Invalid(format!("need at least 2 raters per item, got {raters}")));
        }
        Ok(Self { counts, raters })
    }

    /// Build the two-category (real, AI) table of judgments per item.
    pub fn from_responses(responses: &[ReaderResponse]) -> Result<Self> {
        check_unique(responses)?;
        let mut by_item: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
        for r in responses {
            by_item.entry(r.item_id.as_str()).or_insert_with(|| vec![0, 0])[r.judged_source.index()] += 1;
        }
        let counts: Vec<Vec<u32>> = by_item.into_values().collect();
        Self::new(counts)
    }

    pub fn counts(&self) -> &[Vec<u32>] {
        &self.counts
    }

    pub fn raters(&self) -> u32 {
        self.raters
    }

    pub fn n_items(&self) -> usize {
        self.counts.len()
    }

    pub fn n_categories(&self) -> usize {
        self.counts[0].len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    /// `None` when chance agreement is 1 and the statistic is undefined.
    pub kappa: Option<f64>,
    /// Mean per-item agreement.
    pub observed: f64,
    /// Chance agreement from the category marginals.
    pub expected: f64,
}

pub fn fleiss_kappa(m: &RatingMatrix) -> Kappa {
    let r = m.raters as f64;
    let n = m.n_items() as f64;
    let mut p_j = vec![0.0; m.n_categories()];
    let mut p_bar = 0.0;
    for row in &m.counts {
        let mut agree = 0.0;
        for (j, &c) in row.iter().enumerate() {
            let c = c as f64;
            p_j[j] += c;
            agree += c * (c - 1.0);
        }
        p_bar += agree / (r * (r - 1.0));
    }
    p_bar /= n;
    let p_e: f64 = p_j.iter().map(|&s| (s / (n * r)) * (s / (n * r))).sum();
    let kappa = if (1.0 - p_e).abs() < 1e-15 { None } else { Some((p_bar - p_e) / (1.0 - p_e)) };
    Kappa { kappa, observed: p_bar, expected: p_e }
}

impl core::fmt::Display for Source {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl core::str::FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real_ffpe" => Ok(Source::RealFfpe),
            "ai_ffpe" => Ok(Source::AiFfpe),
            other => Err(Error::Invalid(format!("unknown source `{other}`"))),
        }
    }
}
