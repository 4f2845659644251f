//! Two-modality synthetic data with known shared and modality-unique factors.
//!
//! Latents `w1, w2, ws ∈ ℝ^d` are i.i.d. standard normal (identity
//! covariance). View `m` is `x_m = tanh(A_m·[w_m; ws] + c_m)` with a frozen
//! random affine map per modality, so `x1` never depends on `w2` and `x2`
//! never depends on `w1`. Labels are the argmax over classes of
//! `tanh(R·[ws; w1; w2]) + noise`, with the noise level set by a label SNR.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::rng::{self, tag, StreamRng};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub w1: Matrix,
    pub w2: Matrix,
    pub ws: Matrix,
}

impl LatentBatch {
    pub fn len(&self) -> usize {
        self.ws.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.ws.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.ws.shape();
        if self.w1.shape() != s || self.w2.shape() != s {
            return Err(Error::invalid("latent matrices differ in shape"));
        }
        if !(self.w1.is_finite() && self.w2.is_finite() && self.ws.is_finite()) {
            return Err(Error::invalid("latents contain non-finite entries"));
        }
        Ok(())
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            w1: self.w1.select_rows(idx),
            w2: self.w2.select_rows(idx),
            ws: self.ws.select_rows(idx),
        }
    }
}

pub fn gen_latents(n: usize, d: usize, seed: u64) -> Result<LatentBatch> {
    if n == 0 || d == 0 {
        return Err(Error::invalid(format!(
            "gen_latents needs n ≥ 1 and d ≥ 1 (got {n}, {d})"
        )));
    }
    let mut r = rng::stream(seed, &[tag::LATENT]);
    let block = |r: &mut StreamRng| Matrix::from_vec(n, d, rng::normals(r, n * d)).expect("sized");
    let w1 = block(&mut r);
    let w2 = block(&mut r);
    let ws = block(&mut r);
    Ok(LatentBatch { w1, w2, ws })
}

/// Shape of the frozen mixing maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixerConfig {
    pub dim_x1: usize,
    pub dim_x2: usize,
    /// Standard deviation of the pre-activation; larger values saturate tanh.
    pub gain: f64,
    /// Standard deviation of the affine offsets.
    pub offset_std: f64,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self {
            dim_x1: 64,
            dim_x2: 64,
            gain: 1.0,
            offset_std: 0.1,
        }
    }
}

fn mixing_map(
    input: usize,
    output: usize,
    cfg: &MixerConfig,
    seed: u64,
    modality: u64,
) -> (Matrix, Vec<f64>) {
    let mut r = rng::stream(seed, &[tag::MIXER, modality]);
    let std = cfg.gain / (input as f64).sqrt();
    let a = Matrix::from_vec(
        input,
        output,
        rng::normals(&mut r, input * output)
            .into_iter()
            .map(|v| v * std)
            .collect(),
    )
    .expect("sized");
    let c = rng::normals(&mut r, output)
        .into_iter()
        .map(|v| v * cfg.offset_std)
        .collect();
    (a, c)
}

fn apply_mixer(own: &Matrix, shared: &Matrix, a: &Matrix, c: &[f64]) -> Result<Matrix> {
    let mut x = Matrix::hcat(&[own, shared])?.matmul(a)?;
    for r in 0..x.rows() {
        for (v, o) in x.row_mut(r).iter_mut().zip(c) {
            *v = (*v + o).tanh();
        }
    }
    Ok(x)
}

/// Produces `(x1, x2)` from the latents with maps frozen by `mixer_seed`.
pub fn mix_views(
    latents: &LatentBatch,
    mixer_seed: u64,
    cfg: &MixerConfig,
) -> Result<(Matrix, Matrix)> {
    latents.validate()?;
    if cfg.dim_x1 == 0 || cfg.dim_x2 == 0 {
        return Err(Error::invalid("view dimensions must be ≥ 1"));
    }
    let d = latents.dim();
    let (a1, c1) = mixing_map(2 * d, cfg.dim_x1, cfg, mixer_seed, 1);
    let (a2, c2) = mixing_map(2 * d, cfg.dim_x2, cfg, mixer_seed, 2);
    let x1 = apply_mixer(&latents.w1, &latents.ws, &a1, &c1)?;
    let x2 = apply_mixer(&latents.w2, &latents.ws, &a2, &c2)?;
    Ok((x1, x2))
}

/// Label rule parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelConfig {
    pub n_classes: usize,
    /// SNR of the score noise in dB; `+∞` disables the noise.
    pub label_snr_db: f64,
    /// Readout weight multipliers for `[ws, w1, w2]`.
    pub group_weights: [f64; 3],
    /// Scale of the pre-tanh score.
    pub gain: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            label_snr_db: 10.0,
            group_weights: [1.0, 1.0, 1.0],
            gain: 1.5,
        }
    }
}

/// `E[tanh(g·N(0,1))²]`, the nominal score power the label noise is scaled against.
pub fn nominal_score_power(gain: f64) -> f64 {
    let steps = 8000;
    let (lo, hi) = (-10.0f64, 10.0f64);
    let h = (hi - lo) / steps as f64;
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let f = |t: f64| (gain * t).tanh().powi(2) * norm * (-0.5 * t * t).exp();
    let inner: f64 = (1..steps).map(|i| f(lo + i as f64 * h)).sum();
    h * (0.5 * (f(lo) + f(hi)) + inner)
}

/// Frozen class readout: `C × 3d`, applied to `[ws; w1; w2]`.
pub fn label_readout(d: usize, cfg: &LabelConfig, seed: u64) -> Matrix {
    let mut r = rng::stream(seed, &[tag::LABEL_READOUT]);
    let std = 1.0 / ((3 * d) as f64).sqrt();
    let raw = rng::normals(&mut r, cfg.n_classes * 3 * d);
    Matrix::from_fn(cfg.n_classes, 3 * d, |c, j| {
        raw[c * 3 * d + j] * std * cfg.group_weights[j / d]
    })
}

/// Noise-free class scores `tanh(gain · R·[ws; w1; w2])`, one row per sample.
pub fn clean_scores(latents: &LatentBatch, readout: &Matrix, gain: f64) -> Result<Matrix> {
    let stacked = Matrix::hcat(&[&latents.ws, &latents.w1, &latents.w2])?;
    Ok(stacked.matmul_t(readout)?.map(|v| (gain * v).tanh()))
}

/// Hash of a latent row; seeds the row's label noise so that labels stay a
/// per-row function even when noise is on.
fn row_key(latents: &LatentBatch, i: usize) -> u64 {
    let mut h = 0xA076_1D64_78BD_642Fu64;
    for m in [&latents.ws, &latents.w1, &latents.w2] {
        for v in m.row(i) {
            h = rng::splitmix64(h ^ v.to_bits());
        }
    }
    h
}

/// First index of the maximum; ties resolve to the lowest class index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn gen_labels(latents: &LatentBatch, cfg: &LabelConfig, seed: u64) -> Result<Vec<usize>> {
    if cfg.n_classes < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 classes, got {}",
            cfg.n_classes
        )));
    }
    latents.validate()?;
    let readout = label_readout(latents.dim(), cfg, seed);
    let scores = clean_scores(latents, &readout, cfg.gain)?;
    let noise_std = if cfg.label_snr_db.is_infinite() && cfg.label_snr_db > 0.0 {
        0.0
    } else {
        (nominal_score_power(cfg.gain) * 10f64.powf(-cfg.label_snr_db / 10.0)).sqrt()
    };
    Ok((0..latents.len())
        .map(|i| {
            let mut s = scores.row(i).to_vec();
            if noise_std > 0.0 {
                let mut r = rng::stream(seed, &[tag::LABEL_NOISE, row_key(latents, i)]);
                for v in &mut s {
                    *v += noise_std * rng::normal(&mut r);
                }
            }
            argmax(&s)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub jitter_std: f64,
    pub drop_prob: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            jitter_std: 0.1,
            drop_prob: 0.1,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.jitter_std >= 0.0 && self.jitter_std.is_finite()) {
            return Err(Error::invalid("jitter_std must be finite and ≥ 0"));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::invalid("drop_prob must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Gaussian jitter followed by independent coordinate dropout.
pub fn augment(x: &Matrix, cfg: &AugmentConfig) -> Result<Matrix> {
    augment_stream(x, cfg, &[])
}

/// [`augment`] with extra stream tags (batch, modality, view, ...).
pub fn augment_stream(x: &Matrix, cfg: &AugmentConfig, tags: &[u64]) -> Result<Matrix> {
    cfg.validate()?;
    if cfg.jitter_std == 0.0 && cfg.drop_prob == 0.0 {
        return Ok(x.clone());
    }
    let mut all = vec![tag::AUGMENT];
    all.extend_from_slice(tags);
    let mut r = rng::stream(cfg.seed, &all);
    let mut out = x.clone();
    for v in out.data_mut() {
        if cfg.jitter_std > 0.0 {
            *v += cfg.jitter_std * rng::normal(&mut r);
        }
        if cfg.drop_prob > 0.0 && r.random::<f64>() < cfg.drop_prob {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Full generator configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n: usize,
    pub d: usize,
    pub mixer: MixerConfig,
    pub labels: LabelConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 3000,
            d: 32,
            mixer: MixerConfig::default(),
            labels: LabelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub x1: Matrix,
    pub x2: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub seed: u64,
    pub d: usize,
    /// Generating factors; absent for datasets read back from JSON.
    pub latents: Option<LatentBatch>,
}

impl SyntheticDataset {
    pub fn generate(cfg: &DataConfig, seed: u64) -> Result<Self> {
        let latents = gen_latents(cfg.n, cfg.d, seed)?;
        let (x1, x2) = mix_views(&latents, seed, &cfg.mixer)?;
        let labels = gen_labels(&latents, &cfg.labels, seed)?;
        Ok(Self {
            x1,
            x2,
            labels,
            n_classes: cfg.labels.n_classes,
            seed,
            d: cfg.d,
            latents: Some(latents),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn views(&self) -> [&Matrix; 2] {
        [&self.x1, &self.x2]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.x1.rows() != n || self.x2.rows() != n {
            return Err(Error::invalid("view row counts disagree with label count"));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.n_classes) {
            return Err(Error::invalid(format!(
                "label {bad} outside 0..{}",
                self.n_classes
            )));
        }
        Ok(())
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x1: self.x1.select_rows(idx),
            x2: self.x2.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            seed: self.seed,
            d: self.d,
            latents: self.latents.as_ref().map(|l| l.select_rows(idx)),
        }
    }

    /// Deterministic shuffled split into `(train, test)`.
    pub fn split(&self, n_train: usize) -> Result<(Self, Self)> {
        if n_train == 0 || n_train >= self.len() {
            return Err(Error::invalid(format!(
                "train size {n_train} must lie in 1..{}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        shuffle(&mut idx, &mut rng::stream(self.seed, &[tag::SPLIT]));
        Ok((self.select(&idx[..n_train]), self.select(&idx[n_train..])))
    }

    /// Fraction of the most frequent class.
    pub fn majority_rate(&self) -> f64 {
        let mut counts = vec![0usize; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        *counts.iter().max().unwrap_or(&0) as f64 / self.len().max(1) as f64
    }

    pub fn to_json(&self) -> DatasetFile {
        DatasetFile {
            seed: self.seed,
            d: self.d,
            C: self.n_classes,
            rows: (0..self.len())
                .map(|i| DatasetRow {
                    x1: self.x1.row(i).to_vec(),
                    x2: self.x2.row(i).to_vec(),
                    y: self.labels[i],
                })
                .collect(),
        }
    }

    pub fn from_json(file: &DatasetFile) -> Result<Self> {
        let rows1: Vec<Vec<f64>> = file.rows.iter().map(|r| r.x1.clone()).collect();
        let rows2: Vec<Vec<f64>> = file.rows.iter().map(|r| r.x2.clone()).collect();
        let ds = Self {
            x1: Matrix::from_rows(&rows1)?,
            x2: Matrix::from_rows(&rows2)?,
            labels: file.rows.iter().map(|r| r.y).collect(),
            n_classes: file.C,
            seed: file.seed,
            d: file.d,
            latents: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, &self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::from_json(&serde_json::from_reader(f)?)
    }
}

/// On-disk dataset: `{seed, d, C, rows: [{x1, x2, y}]}`.
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub seed: u64,
    pub d: usize,
    pub C: usize,
    pub rows: Vec<DatasetRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub y: usize,
}

/// Fisher–Yates with the crate's stream generator.
pub fn shuffle<T>(v: &mut [T], r: &mut StreamRng) {
    for i in (1..v.len()).rev() {
        let j = r.random_range(0..=i);
        v.swap(i, j);
    }
}
