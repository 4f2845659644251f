//! Joint fine-tuning of encoders and evidential heads through the channel.
//!
//! Each modality's received features go through its head; ReLU turns logits
//! into evidence. The loss sums `acc + λ_t·KL` over every modality and, when
//! enabled, over the fused opinion as well. Because fusion adds evidence, the
//! fused term's gradient reaches every modality unchanged.
//!
//! The channel is treated as an additive perturbation that does not depend on
//! the parameters, so gradients flow straight through it.

use serde::{Deserialize, Serialize};

use crate::channel::{send_rows, Link};
use crate::error::{Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{GradientSet, Matrix, MlpParams};
use crate::rng::{self, tag};
use crate::synthdata::{argmax, shuffle, SyntheticDataset};

use super::loss::{anneal_lambda, evidential_loss};

/// Per-modality encoders and evidential heads.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidentialModel {
    pub encoders: Vec<MlpParams>,
    pub heads: Vec<MlpParams>,
}

impl EvidentialModel {
    /// Fresh heads on top of the given encoders.
    pub fn with_heads(
        encoders: Vec<MlpParams>,
        head_hidden: &[usize],
        n_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let heads = encoders
            .iter()
            .enumerate()
            .map(|(m, enc)| {
                let mut widths = vec![enc.output_width()];
                widths.extend_from_slice(head_hidden);
                widths.push(n_classes);
                MlpParams::init(&widths, seed, 100 + m as u64)
            })
            .collect::<Result<_>>()?;
        let model = Self { encoders, heads };
        model.validate()?;
        Ok(model)
    }

    pub fn n_modalities(&self) -> usize {
        self.encoders.len()
    }

    pub fn n_classes(&self) -> usize {
        self.heads.first().map_or(0, MlpParams::output_width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoders.is_empty() || self.encoders.len() != self.heads.len() {
            return Err(Error::invalid(
                "need one head per encoder and at least one modality",
            ));
        }
        for (m, (e, h)) in self.encoders.iter().zip(&self.heads).enumerate() {
            e.validate()?;
            h.validate()?;
            if e.output_width() != h.input_width() {
                return Err(Error::ArchitectureMismatch(format!(
                    "modality {m}: encoder emits {} features, head expects {}",
                    e.output_width(),
                    h.input_width()
                )));
            }
            if h.output_width() != self.n_classes() {
                return Err(Error::ArchitectureMismatch(
                    "heads disagree on the class count".into(),
                ));
            }
        }
        Ok(())
    }

    /// Evidence (`n × C`) for received features of modality `m`.
    pub fn evidence(&self, m: usize, received: &Matrix) -> Result<Matrix> {
        Ok(self.heads[m].predict(received)?.map(|v| v.max(0.0)))
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let mut networks = Vec::new();
        for (m, e) in self.encoders.iter().enumerate() {
            networks.push((format!("encoder.{m}"), e.clone()));
        }
        for (m, h) in self.heads.iter().enumerate() {
            networks.push((format!("head.{m}"), h.clone()));
        }
        Checkpoint { seed, networks }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut encoders = Vec::new();
        let mut heads = Vec::new();
        while let Some(e) = ckpt.get(&format!("encoder.{}", encoders.len())) {
            encoders.push(e.clone());
        }
        while let Some(h) = ckpt.get(&format!("head.{}", heads.len())) {
            heads.push(h.clone());
        }
        let model = Self { encoders, heads };
        model.validate()?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub lambda0: f64,
    /// Annealing horizon; defaults to `epochs` when absent.
    pub anneal_epochs: Option<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Also train on the fused opinion.
    pub fused_term: bool,
    pub weight_decay: f64,
    /// Cosine learning-rate decay over `epochs`.
    pub cosine: bool,
    /// Encoder learning rate relative to the heads'; below 1 protects
    /// pre-trained features from a freshly initialised head.
    pub encoder_lr_scale: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lambda0: 1e-2,
            anneal_epochs: None,
            lr: 0.05,
            epochs: 100,
            batch_size: 64,
            fused_term: true,
            weight_decay: 0.0,
            cosine: false,
            encoder_lr_scale: 1.0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 > 0.0 && self.lambda0 < 1.0) {
            return Err(Error::invalid(format!(
                "λ₀ = {} must lie in (0, 1)",
                self.lambda0
            )));
        }
        if self.epochs == 0 || self.anneal_epochs == Some(0) {
            return Err(Error::invalid("epoch counts must be ≥ 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be ≥ 1"));
        }
        if !(self.encoder_lr_scale >= 0.0 && self.encoder_lr_scale.is_finite()) {
            return Err(Error::invalid(
                "encoder learning-rate scale must be finite and ≥ 0",
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("learning rate and weight decay must be ≥ 0"));
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.anneal_epochs.unwrap_or(self.epochs)
    }

    pub fn lambda_at(&self, t: usize) -> Result<f64> {
        anneal_lambda(t.min(self.horizon()), self.horizon(), self.lambda0)
    }

    pub fn lr_at(&self, t: usize) -> f64 {
        if self.cosine {
            let frac = t as f64 / self.epochs as f64;
            0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
        } else {
            self.lr
        }
    }
}

/// Sums over a batch; divide by `count` for means.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FinetuneStats {
    pub loss_acc: f64,
    pub loss_kl: f64,
    pub correct: usize,
    pub count: usize,
    pub sum_uncertainty: Vec<f64>,
    pub dead_evidence: usize,
    pub evidence_entries: usize,
}

impl FinetuneStats {
    fn merge(&mut self, o: &FinetuneStats) {
        self.loss_acc += o.loss_acc;
        self.loss_kl += o.loss_kl;
        self.correct += o.correct;
        self.count += o.count;
        if self.sum_uncertainty.len() < o.sum_uncertainty.len() {
            self.sum_uncertainty.resize(o.sum_uncertainty.len(), 0.0);
        }
        for (a, b) in self.sum_uncertainty.iter_mut().zip(&o.sum_uncertainty) {
            *a += b;
        }
        self.dead_evidence += o.dead_evidence;
        self.evidence_entries += o.evidence_entries;
    }

    /// Batch-mean objective `acc + λ·KL`.
    pub fn objective(&self, lambda: f64) -> f64 {
        (self.loss_acc + lambda * self.loss_kl) / self.count.max(1) as f64
    }
}

/// Gradients for every encoder and head.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub encoders: Vec<GradientSet>,
    pub heads: Vec<GradientSet>,
}

/// One batch: inputs per modality, labels and the sample ids that key the
/// channel randomness.
pub struct FinetuneBatch<'a> {
    pub views: Vec<Matrix>,
    pub labels: &'a [usize],
    pub sample_ids: &'a [usize],
}

/// Batch-mean loss and its exact gradient (channel treated as a constant
/// additive perturbation).
pub fn finetune_loss_grad(
    model: &EvidentialModel,
    batch: &FinetuneBatch<'_>,
    link: &dyn Link,
    round: u64,
    lambda: f64,
    fused_term: bool,
) -> Result<(FinetuneStats, ModelGrads)> {
    let mc = model.n_modalities();
    let n = batch.labels.len();
    let c = model.n_classes();
    if batch.views.len() != mc
        || batch.sample_ids.len() != n
        || batch.views.iter().any(|v| v.rows() != n)
    {
        return Err(Error::invalid("batch shapes disagree with the model"));
    }

    let mut enc_tapes = Vec::with_capacity(mc);
    let mut head_tapes = Vec::with_capacity(mc);
    let mut logits = Vec::with_capacity(mc);
    for m in 0..mc {
        let (z, tape) = model.encoders[m].forward(&batch.views[m])?;
        let (received, _) = send_rows(link, &z, batch.sample_ids, round, m, 0)?;
        let (out, htape) = model.heads[m].forward(&received)?;
        enc_tapes.push(tape);
        head_tapes.push(htape);
        logits.push(out);
    }

    let mut stats = FinetuneStats {
        sum_uncertainty: vec![0.0; mc],
        count: n,
        ..Default::default()
    };
    let mut d_logits: Vec<Matrix> = (0..mc).map(|_| Matrix::zeros(n, c)).collect();
    let inv_n = 1.0 / n.max(1) as f64;
    for i in 0..n {
        let y = batch.labels[i];
        let mut fused = vec![0.0; c];
        let mut d_fused_sum = vec![0.0; c];
        let mut per_mod_grads = Vec::with_capacity(mc);
        for m in 0..mc {
            let row = logits[m].row(i);
            let e: Vec<f64> = row.iter().map(|v| v.max(0.0)).collect();
            stats.dead_evidence += row.iter().filter(|v| **v <= 0.0).count();
            stats.evidence_entries += c;
            let s: f64 = e.iter().sum::<f64>() + c as f64;
            stats.sum_uncertainty[m] += c as f64 / s;
            let (acc, kl, g) = evidential_loss(&e, y, lambda)?;
            stats.loss_acc += acc;
            stats.loss_kl += kl;
            for (f, v) in fused.iter_mut().zip(&e) {
                *f += v;
            }
            per_mod_grads.push(g);
        }
        if fused_term {
            let (acc, kl, g) = evidential_loss(&fused, y, lambda)?;
            stats.loss_acc += acc;
            stats.loss_kl += kl;
            d_fused_sum = g;
        }
        if argmax(&fused) == y {
            stats.correct += 1;
        }
        for m in 0..mc {
            let row = logits[m].row(i);
            let dst = d_logits[m].row_mut(i);
            for k in 0..c {
                if row[k] > 0.0 {
                    dst[k] = (per_mod_grads[m][k] + d_fused_sum[k]) * inv_n;
                }
            }
        }
    }
    if !(stats.loss_acc + lambda * stats.loss_kl).is_finite() {
        return Err(Error::numeric("non-finite fine-tuning loss"));
    }

    let mut enc_grads = Vec::with_capacity(mc);
    let mut head_grads = Vec::with_capacity(mc);
    for m in 0..mc {
        let hb = model.heads[m].backward(&head_tapes[m], &d_logits[m])?;
        let eb = model.encoders[m].backward(&enc_tapes[m], &hb.input_grad)?;
        head_grads.push(hb.grads);
        enc_grads.push(eb.grads);
    }
    Ok((
        stats,
        ModelGrads {
            encoders: enc_grads,
            heads: head_grads,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneEpochLog {
    pub epoch: usize,
    pub lambda_t: f64,
    pub loss_acc: f64,
    pub loss_kl: f64,
    pub train_acc: f64,
    pub mean_uncertainty: Vec<f64>,
    pub dead_evidence_fraction: f64,
}

/// One epoch of minibatch SGD over `data`. Channel randomness uses round
/// `t + 1`, so each epoch sees fresh noise and none is shared with inference.
pub fn finetune_epoch(
    model: &EvidentialModel,
    data: &SyntheticDataset,
    link: &dyn Link,
    cfg: &FinetuneConfig,
    t: usize,
    seed: u64,
) -> Result<(EvidentialModel, FinetuneEpochLog)> {
    cfg.validate()?;
    model.validate()?;
    let views = data.views();
    if views.len() != model.n_modalities() {
        return Err(Error::invalid(
            "dataset and model disagree on the number of modalities",
        ));
    }
    if data.n_classes != model.n_classes() {
        return Err(Error::invalid(
            "dataset and model disagree on the class count",
        ));
    }
    let lambda = cfg.lambda_at(t)?;
    let lr = cfg.lr_at(t);
    let mut order: Vec<usize> = (0..data.len()).collect();
    shuffle(
        &mut order,
        &mut rng::stream(seed, &[tag::SHUFFLE, 2, t as u64]),
    );

    let mut params = model.clone();
    let mut total = FinetuneStats::default();
    for idx in order.chunks(cfg.batch_size) {
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let batch = FinetuneBatch {
            views: views.iter().map(|x| x.select_rows(idx)).collect(),
            labels: &labels,
            sample_ids: idx,
        };
        let (stats, grads) =
            finetune_loss_grad(&params, &batch, link, t as u64 + 1, lambda, cfg.fused_term)
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::numeric(format!("epoch {t}: {msg}")),
                    other => other,
                })?;
        total.merge(&stats);
        if lr > 0.0 {
            for (p, g) in params.encoders.iter_mut().zip(&grads.encoders) {
                *p = p.sgd_step_with_decay(g, lr * cfg.encoder_lr_scale, cfg.weight_decay)?;
            }
            for (p, g) in params.heads.iter_mut().zip(&grads.heads) {
                *p = p.sgd_step_with_decay(g, lr, cfg.weight_decay)?;
            }
        }
    }
    let n = total.count.max(1) as f64;
    Ok((
        params,
        FinetuneEpochLog {
            epoch: t,
            lambda_t: lambda,
            loss_acc: total.loss_acc / n,
            loss_kl: total.loss_kl / n,
            train_acc: total.correct as f64 / n,
            mean_uncertainty: total.sum_uncertainty.iter().map(|u| u / n).collect(),
            dead_evidence_fraction: total.dead_evidence as f64
                / total.evidence_entries.max(1) as f64,
        },
    ))
}

/// `epoch,lambda_t,loss_acc,loss_kl,train_acc,mean_u_0,…`.
pub fn epoch_log_csv(log: &[FinetuneEpochLog]) -> String {
    let mods = log.first().map_or(0, |l| l.mean_uncertainty.len());
    let mut s = String::from("epoch,lambda_t,loss_acc,loss_kl,train_acc");
    for m in 0..mods {
        s.push_str(&format!(",mean_u_{m}"));
    }
    s.push('\n');
    for l in log {
        s.push_str(&format!(
            "{},{:.10e},{:.10e},{:.10e},{:.6}",
            l.epoch, l.lambda_t, l.loss_acc, l.loss_kl, l.train_acc
        ));
        for u in &l.mean_uncertainty {
            s.push_str(&format!(",{u:.6}"));
        }
        s.push('\n');
    }
    s
}
