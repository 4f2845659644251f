//! Softmax classifier over concatenated received features.
//!
//! Serves two purposes: the concatenation baseline (encoders fine-tuned by
//! cross-entropy, no opinions, no retransmission) and the linear probe of
//! frozen pre-trained encoders.

use crate::channel::{send_rows, Link};
use crate::error::{Error, Result};
use crate::nn::{GradientSet, Matrix, MlpParams};
use crate::rng::{self, tag};
use crate::synthdata::{argmax, shuffle, SyntheticDataset};

/// Row-wise softmax, shifted by the row maximum.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Mean cross-entropy and its gradient in the logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::invalid("one label per row is required"));
    }
    let p = softmax(logits);
    let n = labels.len().max(1) as f64;
    let mut grad = p.clone();
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= logits.cols() {
            return Err(Error::invalid(format!("label {y} out of range")));
        }
        loss -= p[(r, y)].max(f64::MIN_POSITIVE).ln();
        grad[(r, y)] -= 1.0;
    }
    Ok((loss / n, grad.scale(1.0 / n)))
}

/// Encoders plus one softmax head reading all received features side by side.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatModel {
    pub encoders: Vec<MlpParams>,
    pub head: MlpParams,
    /// Frozen encoders turn training into a probe of their features.
    pub train_encoders: bool,
}

impl ConcatModel {
    pub fn new(
        encoders: Vec<MlpParams>,
        head_hidden: &[usize],
        n_classes: usize,
        seed: u64,
        train_encoders: bool,
    ) -> Result<Self> {
        let mut widths = vec![encoders.iter().map(MlpParams::output_width).sum()];
        widths.extend_from_slice(head_hidden);
        widths.push(n_classes);
        Ok(Self {
            head: MlpParams::init(&widths, seed, 200)?,
            encoders,
            train_encoders,
        })
    }

    fn received(
        &self,
        views: &[&Matrix],
        ids: &[usize],
        link: &dyn Link,
        round: u64,
    ) -> Result<(Vec<(Matrix, crate::nn::Tape)>, Matrix)> {
        let mut tapes = Vec::with_capacity(views.len());
        let mut parts = Vec::with_capacity(views.len());
        for (m, (x, enc)) in views.iter().zip(&self.encoders).enumerate() {
            let (z, tape) = enc.forward(x)?;
            let (rx, _) = send_rows(link, &z, ids, round, m, 0)?;
            parts.push(rx);
            tapes.push((z, tape));
        }
        let refs: Vec<&Matrix> = parts.iter().collect();
        Ok((tapes, Matrix::hcat(&refs)?))
    }

    /// Mean cross-entropy of a batch and its gradients (encoders, head).
    pub fn loss_grad(
        &self,
        views: &[&Matrix],
        labels: &[usize],
        ids: &[usize],
        link: &dyn Link,
        round: u64,
    ) -> Result<(f64, Vec<GradientSet>, GradientSet)> {
        let (tapes, input) = self.received(views, ids, link, round)?;
        let (logits, htape) = self.head.forward(&input)?;
        let (loss, g) = cross_entropy(&logits, labels)?;
        if !loss.is_finite() {
            return Err(Error::numeric("non-finite cross-entropy"));
        }
        let hb = self.head.backward(&htape, &g)?;
        let mut enc_grads = Vec::with_capacity(self.encoders.len());
        if self.train_encoders {
            let mut col = 0;
            for (enc, (z, tape)) in self.encoders.iter().zip(&tapes) {
                let dz = hb.input_grad.select_cols(col, col + z.cols());
                col += z.cols();
                enc_grads.push(enc.backward(tape, &dz)?.grads);
            }
        }
        Ok((loss, enc_grads, hb.grads))
    }

    /// Predicted classes for a whole dataset (single transmission, round 0).
    pub fn predict(&self, data: &SyntheticDataset, link: &dyn Link) -> Result<Vec<usize>> {
        let ids: Vec<usize> = (0..data.len()).collect();
        let (_, input) = self.received(&data.views(), &ids, link, 0)?;
        let logits = self.head.predict(&input)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }

    pub fn accuracy(&self, data: &SyntheticDataset, link: &dyn Link) -> Result<f64> {
        let pred = self.predict(data, link)?;
        let hits = pred
            .iter()
            .zip(&data.labels)
            .filter(|(a, b)| a == b)
            .count();
        Ok(hits as f64 / data.len().max(1) as f64)
    }

    /// One epoch of minibatch SGD; channel randomness uses round `epoch + 1`.
    /// Encoders step with `lr * encoder_lr_scale`.
    #[allow(clippy::too_many_arguments)]
    pub fn train_epoch(
        &self,
        data: &SyntheticDataset,
        link: &dyn Link,
        lr: f64,
        encoder_lr_scale: f64,
        batch_size: usize,
        epoch: usize,
        seed: u64,
    ) -> Result<(Self, f64)> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be ≥ 1"));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        shuffle(
            &mut order,
            &mut rng::stream(seed, &[tag::SHUFFLE, 3, epoch as u64]),
        );
        let views = data.views();
        let mut model = self.clone();
        let mut total = 0.0;
        for idx in order.chunks(batch_size) {
            let xs: Vec<Matrix> = views.iter().map(|x| x.select_rows(idx)).collect();
            let refs: Vec<&Matrix> = xs.iter().collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let (loss, eg, hg) = model.loss_grad(&refs, &labels, idx, link, epoch as u64 + 1)?;
            total += loss * idx.len() as f64;
            model.head = model.head.sgd_step(&hg, lr)?;
            for (p, g) in model.encoders.iter_mut().zip(&eg) {
                *p = p.sgd_step(g, lr * encoder_lr_scale)?;
            }
        }
        Ok((model, total / data.len().max(1) as f64))
    }
}

/// Trains a linear softmax probe on frozen encoders (features sent through
/// `link`) and returns its test accuracy.
pub fn linear_probe_accuracy(
    encoders: &[MlpParams],
    train: &SyntheticDataset,
    test: &SyntheticDataset,
    link: &dyn Link,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let mut probe = ConcatModel::new(encoders.to_vec(), &[], train.n_classes, seed, false)?;
    for e in 0..epochs {
        probe = probe.train_epoch(train, link, lr, 0.0, 64, e, seed)?.0;
    }
    probe.accuracy(test, link)
}
