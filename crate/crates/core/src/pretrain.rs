//! Local multi-modal self-supervised pre-training.
//!
//! Per modality, the batch cross-correlation between the features of a view
//! and of its augmentation is pulled towards the identity (intra-modal term).
//! Across modalities, the correlation matrix between the two feature sets is
//! split by index: the first `k_shared` dimensions form the shared block
//! (pulled towards the identity), the remaining `k_unique` form the unique
//! block (pulled towards zero). Everything runs on-device; no feature or
//! gradient is ever sent to the server, so this stage adds nothing to the
//! training communication cost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{GradientSet, Matrix, MlpParams};
use crate::rng::{self, tag};
use crate::synthdata::{augment_stream, shuffle, AugmentConfig, SyntheticDataset};

pub const DEFAULT_EPS: f64 = 1e-12;

/// Batch-normalised cross-correlation between two feature sets.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub entries: Matrix,
}

impl CorrelationMatrix {
    pub fn dim(&self) -> usize {
        self.entries.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }
}

fn column_norms(z: &Matrix) -> Vec<f64> {
    let mut n = vec![0.0; z.cols()];
    for r in 0..z.rows() {
        for (acc, v) in n.iter_mut().zip(z.row(r)) {
            *acc += v * v;
        }
    }
    n.iter_mut().for_each(|v| *v = v.sqrt());
    n
}

fn check_pair(za: &Matrix, zb: &Matrix) -> Result<()> {
    if za.shape() != zb.shape() {
        return Err(Error::invalid(format!(
            "correlation inputs differ in shape: {:?} vs {:?}",
            za.shape(),
            zb.shape()
        )));
    }
    if za.rows() < 2 {
        return Err(Error::invalid("correlation needs a batch of at least 2"));
    }
    Ok(())
}

/// `C_ij = Σ_b a_bi·b_bj / (‖a_i‖·‖b_j‖ + eps)`; features are not centred.
pub fn cross_correlation(za: &Matrix, zb: &Matrix, eps: f64) -> Result<CorrelationMatrix> {
    check_pair(za, zb)?;
    let na = column_norms(za);
    let nb = column_norms(zb);
    if na.iter().chain(&nb).any(|&v| v == 0.0) {
        log::warn!("dead feature column in correlation batch");
    }
    let mut c = za.t_matmul(zb)?;
    for i in 0..c.rows() {
        for j in 0..c.cols() {
            c[(i, j)] /= na[i] * nb[j] + eps;
        }
    }
    Ok(CorrelationMatrix { entries: c })
}

/// Pulls `dL/dC` back to `(dL/dZa, dL/dZb)`.
pub fn correlation_backward(
    za: &Matrix,
    zb: &Matrix,
    eps: f64,
    grad_c: &Matrix,
) -> Result<(Matrix, Matrix)> {
    check_pair(za, zb)?;
    let k = za.cols();
    if grad_c.shape() != (k, k) {
        return Err(Error::invalid("correlation gradient has the wrong shape"));
    }
    let na = column_norms(za);
    let nb = column_norms(zb);
    let numer = za.t_matmul(zb)?;
    let mut p = Matrix::zeros(k, k);
    let mut s = vec![0.0; k];
    let mut t = vec![0.0; k];
    for i in 0..k {
        for j in 0..k {
            let d = na[i] * nb[j] + eps;
            let g = grad_c[(i, j)];
            p[(i, j)] = g / d;
            let q = g * numer[(i, j)] / (d * d);
            s[i] += q * nb[j];
            t[j] += q * na[i];
        }
    }
    let mut da = zb.matmul_t(&p)?;
    let mut db = za.matmul(&p)?;
    for b in 0..za.rows() {
        for i in 0..k {
            if na[i] > 0.0 {
                da[(b, i)] -= za[(b, i)] * s[i] / na[i];
            }
            if nb[i] > 0.0 {
                db[(b, i)] -= zb[(b, i)] * t[i] / nb[i];
            }
        }
    }
    Ok((da, db))
}

/// `Σ_i (1 − C_ii)² + λ Σ_{i≠j} C_ij²` and its gradient.
pub fn intra_loss(c: &CorrelationMatrix, lambda: f64) -> (f64, Matrix) {
    let k = c.dim();
    let mut grad = Matrix::zeros(k, k);
    let mut loss = 0.0;
    for i in 0..k {
        for j in 0..k {
            let v = c.get(i, j);
            if i == j {
                loss += (1.0 - v).powi(2);
                grad[(i, j)] = -2.0 * (1.0 - v);
            } else {
                loss += lambda * v * v;
                grad[(i, j)] = 2.0 * lambda * v;
            }
        }
    }
    (loss, grad)
}

/// Index split of the feature dimensions: shared first, unique after.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturePartition {
    pub k_shared: usize,
    pub k_unique: usize,
}

impl FeaturePartition {
    pub fn new(k_shared: usize, k_unique: usize) -> Result<Self> {
        let p = Self { k_shared, k_unique };
        p.validate()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.k_shared + self.k_unique
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_shared == 0 || self.k_unique == 0 {
            return Err(Error::invalid(
                "both shared and unique blocks need at least one dimension",
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn is_shared(&self, i: usize) -> bool {
        i < self.k_shared
    }
}

/// Which cross-modal blocks contribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossTerms {
    pub shared: bool,
    pub unique: bool,
}

impl CrossTerms {
    pub const ALL: Self = Self {
        shared: true,
        unique: true,
    };
}

/// Cross-modal loss split into its parts.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CrossLossParts {
    pub shared: f64,
    pub unique: f64,
    /// Penalty on shared×unique entries, which neither block covers.
    pub cross_block: f64,
}

impl CrossLossParts {
    pub fn total(&self) -> f64 {
        self.shared + self.unique + self.cross_block
    }
}

/// Shared×unique entries (either orientation) are pulled to zero with the
/// unique-block off-diagonal weight. Kept in one place so the convention can
/// be changed without touching the block losses.
fn cross_block_penalty(v: f64, lambda_unique: f64) -> (f64, f64) {
    (lambda_unique * v * v, 2.0 * lambda_unique * v)
}

pub fn cross_loss(
    c: &CorrelationMatrix,
    part: &FeaturePartition,
    lambda_shared: f64,
    lambda_unique: f64,
) -> Result<(f64, Matrix)> {
    cross_loss_terms(c, part, lambda_shared, lambda_unique, CrossTerms::ALL)
        .map(|(parts, g)| (parts.total(), g))
}

pub fn cross_loss_terms(
    c: &CorrelationMatrix,
    part: &FeaturePartition,
    lambda_shared: f64,
    lambda_unique: f64,
    terms: CrossTerms,
) -> Result<(CrossLossParts, Matrix)> {
    part.validate()?;
    let k = c.dim();
    if part.dim() != k {
        return Err(Error::invalid(format!(
            "partition {}+{} does not match correlation size {k}",
            part.k_shared, part.k_unique
        )));
    }
    let mut parts = CrossLossParts::default();
    let mut grad = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            let v = c.get(i, j);
            let (si, sj) = (part.is_shared(i), part.is_shared(j));
            let (l, g) = match (si, sj) {
                (true, true) if terms.shared => {
                    if i == j {
                        ((1.0 - v).powi(2), -2.0 * (1.0 - v))
                    } else {
                        (lambda_shared * v * v, 2.0 * lambda_shared * v)
                    }
                }
                (false, false) if terms.unique => {
                    if i == j {
                        (v * v, 2.0 * v)
                    } else {
                        (lambda_unique * v * v, 2.0 * lambda_unique * v)
                    }
                }
                (true, false) | (false, true) if terms.unique => {
                    cross_block_penalty(v, lambda_unique)
                }
                _ => (0.0, 0.0),
            };
            match (si, sj) {
                (true, true) => parts.shared += l,
                (false, false) => parts.unique += l,
                _ => parts.cross_block += l,
            }
            grad[(i, j)] = g;
        }
    }
    Ok((parts, grad))
}

/// Pre-training objective variants used for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Intra-modal plus shared and unique cross-modal terms.
    Proposed,
    /// Intra-modal term only; every modality is trained in isolation.
    IntraOnly,
    /// Intra-modal plus the shared block; the unique path is switched off.
    SharedOnly,
}

impl Objective {
    fn cross_terms(self) -> Option<CrossTerms> {
        match self {
            Objective::Proposed => Some(CrossTerms::ALL),
            Objective::SharedOnly => Some(CrossTerms {
                shared: true,
                unique: false,
            }),
            Objective::IntraOnly => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub lambda_intra: f64,
    pub lambda_shared: f64,
    pub lambda_unique: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub partition: FeaturePartition,
    pub eps: f64,
    /// Subtract the batch mean before correlating (off reproduces the
    /// un-centred definition).
    pub center: bool,
    pub objective: Objective,
    pub augment: AugmentConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lambda_intra: 5e-3,
            lambda_shared: 5e-3,
            lambda_unique: 5e-3,
            batch_size: 64,
            epochs: 200,
            lr: 0.05,
            partition: FeaturePartition {
                k_shared: 8,
                k_unique: 8,
            },
            eps: DEFAULT_EPS,
            center: false,
            objective: Objective::Proposed,
            augment: AugmentConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_intra", self.lambda_intra),
            ("lambda_shared", self.lambda_shared),
            ("lambda_unique", self.lambda_unique),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be > 0")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be ≥ 2"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and ≥ 0"));
        }
        self.partition.validate()?;
        self.augment.validate()
    }
}

/// Loss of one batch, by component.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct PretrainLoss {
    pub intra: f64,
    pub cross: f64,
}

impl PretrainLoss {
    pub fn total(&self) -> f64 {
        self.intra + self.cross
    }
}

/// Clean and augmented inputs of one batch, one entry per modality.
#[derive(Debug, Clone)]
pub struct PretrainBatch {
    pub views: Vec<Matrix>,
    pub augmented: Vec<Matrix>,
}

fn center_columns(z: &Matrix) -> Matrix {
    let means = z.col_means();
    let mut out = z.clone();
    for r in 0..out.rows() {
        for (v, m) in out.row_mut(r).iter_mut().zip(&means) {
            *v -= m;
        }
    }
    out
}

/// Full pre-training loss of a fixed batch and its gradient for every encoder.
pub fn pretrain_loss_grad(
    encoders: &[MlpParams],
    batch: &PretrainBatch,
    cfg: &PretrainConfig,
) -> Result<(PretrainLoss, Vec<GradientSet>)> {
    let m_count = encoders.len();
    if batch.views.len() != m_count || batch.augmented.len() != m_count {
        return Err(Error::invalid("batch and encoder counts disagree"));
    }
    let k = cfg.partition.dim();
    let mut z = Vec::with_capacity(m_count);
    let mut zt = Vec::with_capacity(m_count);
    for (m, enc) in encoders.iter().enumerate() {
        if enc.output_width() != k {
            return Err(Error::invalid(format!(
                "encoder {m} outputs {} dims, partition expects {k}",
                enc.output_width()
            )));
        }
        z.push(enc.forward(&batch.views[m])?);
        zt.push(enc.forward(&batch.augmented[m])?);
    }
    let prep = |x: &Matrix| {
        if cfg.center {
            center_columns(x)
        } else {
            x.clone()
        }
    };
    let zc: Vec<Matrix> = z.iter().map(|(o, _)| prep(o)).collect();
    let ztc: Vec<Matrix> = zt.iter().map(|(o, _)| prep(o)).collect();

    let mut dz: Vec<Matrix> = zc
        .iter()
        .map(|a| Matrix::zeros(a.rows(), a.cols()))
        .collect();
    let mut dzt = dz.clone();
    let mut loss = PretrainLoss::default();

    for m in 0..m_count {
        let c = cross_correlation(&zc[m], &ztc[m], cfg.eps)?;
        let (l, g) = intra_loss(&c, cfg.lambda_intra);
        loss.intra += l;
        let (da, db) = correlation_backward(&zc[m], &ztc[m], cfg.eps, &g)?;
        dz[m].add_assign(&da)?;
        dzt[m].add_assign(&db)?;
    }
    if let Some(terms) = cfg.objective.cross_terms() {
        // ordered pairs: each unordered pair contributes twice
        for m in 0..m_count {
            for n in 0..m_count {
                if m == n {
                    continue;
                }
                let c = cross_correlation(&zc[m], &zc[n], cfg.eps)?;
                let (parts, g) = cross_loss_terms(
                    &c,
                    &cfg.partition,
                    cfg.lambda_shared,
                    cfg.lambda_unique,
                    terms,
                )?;
                loss.cross += parts.total();
                let (da, db) = correlation_backward(&zc[m], &zc[n], cfg.eps, &g)?;
                dz[m].add_assign(&da)?;
                dz[n].add_assign(&db)?;
            }
        }
    }
    if !loss.total().is_finite() {
        return Err(Error::numeric(format!(
            "non-finite pre-training loss (intra={}, cross={})",
            loss.intra, loss.cross
        )));
    }

    let uncenter = |g: &Matrix| {
        if cfg.center {
            center_columns(g)
        } else {
            g.clone()
        }
    };
    let mut grads = Vec::with_capacity(m_count);
    for (m, enc) in encoders.iter().enumerate() {
        let mut g = enc.backward(&z[m].1, &uncenter(&dz[m]))?.grads;
        g.accumulate(&enc.backward(&zt[m].1, &uncenter(&dzt[m]))?.grads)?;
        grads.push(g);
    }
    Ok((loss, grads))
}

/// Per-epoch record for the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PretrainEpochLog {
    pub epoch: usize,
    pub intra: f64,
    pub cross: f64,
    pub total: f64,
}

/// One pass of minibatch SGD. Trailing samples that do not fill a batch are
/// skipped for this epoch.
pub fn pretrain_epoch(
    encoders: &[MlpParams],
    data: &SyntheticDataset,
    cfg: &PretrainConfig,
    epoch: usize,
    seed: u64,
) -> Result<(Vec<MlpParams>, PretrainEpochLog)> {
    cfg.validate()?;
    let views = data.views();
    if encoders.len() != views.len() {
        return Err(Error::invalid("one encoder per modality is required"));
    }
    if data.len() < cfg.batch_size {
        return Err(Error::invalid(format!(
            "dataset of {} samples is smaller than one batch ({})",
            data.len(),
            cfg.batch_size
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    shuffle(
        &mut order,
        &mut rng::stream(seed, &[tag::SHUFFLE, 1, epoch as u64]),
    );

    let mut params = encoders.to_vec();
    let mut sum = PretrainLoss::default();
    let batches = data.len() / cfg.batch_size;
    for bi in 0..batches {
        let idx = &order[bi * cfg.batch_size..(bi + 1) * cfg.batch_size];
        let mut batch = PretrainBatch {
            views: Vec::with_capacity(views.len()),
            augmented: Vec::with_capacity(views.len()),
        };
        for (m, x) in views.iter().enumerate() {
            let xb = x.select_rows(idx);
            let aug = AugmentConfig {
                seed: seed ^ cfg.augment.seed,
                ..cfg.augment
            };
            batch.augmented.push(augment_stream(
                &xb,
                &aug,
                &[epoch as u64, bi as u64, m as u64],
            )?);
            batch.views.push(xb);
        }
        let (loss, grads) = pretrain_loss_grad(&params, &batch, cfg).map_err(|e| match e {
            Error::Numeric(msg) => Error::numeric(format!("epoch {epoch}, batch {bi}: {msg}")),
            other => other,
        })?;
        sum.intra += loss.intra;
        sum.cross += loss.cross;
        if cfg.lr > 0.0 {
            params = params
                .iter()
                .zip(&grads)
                .map(|(p, g)| p.sgd_step(g, cfg.lr))
                .collect::<Result<_>>()?;
        }
    }
    let n = batches as f64;
    Ok((
        params,
        PretrainEpochLog {
            epoch,
            intra: sum.intra / n,
            cross: sum.cross / n,
            total: (sum.intra + sum.cross) / n,
        },
    ))
}

/// Runs `cfg.epochs` epochs and returns the final encoders with the loss log.
pub fn pretrain(
    encoders: &[MlpParams],
    data: &SyntheticDataset,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(Vec<MlpParams>, Vec<PretrainEpochLog>)> {
    let mut params = encoders.to_vec();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (next, entry) = pretrain_epoch(&params, data, cfg, epoch, seed)?;
        params = next;
        log.push(entry);
    }
    Ok((params, log))
}

/// Loss log as CSV: `epoch,L_intra,L_cross,L_total`.
pub fn loss_log_csv(log: &[PretrainEpochLog]) -> String {
    let mut s = String::from("epoch,L_intra,L_cross,L_total\n");
    for e in log {
        s.push_str(&format!(
            "{},{:.10e},{:.10e},{:.10e}\n",
            e.epoch, e.intra, e.cross, e.total
        ));
    }
    s
}
