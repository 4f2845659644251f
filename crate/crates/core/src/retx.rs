//! Uncertainty-guided retransmission.
//!
//! After the first reception of a modality, the server forms its opinion and
//! asks for the same features again whenever the uncertainty reaches the
//! calibrated threshold. Repeated receptions of one modality are fused with
//! the same operator used across modalities.

use serde::{Deserialize, Serialize};

use crate::channel::{symbols_per_block, Link, TransmissionRecord, TxKey};
use crate::error::{Error, Result};
use crate::evidential::{fuse, fuse_all, opinion_from_evidence, EvidentialModel, Opinion};
use crate::nn::Matrix;
use crate::par;
use crate::synthdata::{augment_stream, AugmentConfig, SyntheticDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetxPolicy {
    pub u_lambda: f64,
    /// Overrides `u_lambda` per modality when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_modality: Option<Vec<f64>>,
    pub n_max: usize,
    pub alpha: f64,
    /// Re-encode an augmented input on retransmission instead of resending
    /// the same features.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reencode: Option<AugmentConfig>,
}

impl RetxPolicy {
    pub fn new(u_lambda: f64, n_max: usize, alpha: f64) -> Result<Self> {
        let p = Self {
            u_lambda,
            per_modality: None,
            n_max,
            alpha,
            reencode: None,
        };
        p.validate()?;
        Ok(p)
    }

    /// Never retransmits.
    pub fn disabled() -> Self {
        Self {
            u_lambda: 1.0,
            per_modality: None,
            n_max: 0,
            alpha: 0.2,
            reencode: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |u: f64| u > 0.0 && u <= 1.0;
        if !ok(self.u_lambda) || self.per_modality.iter().flatten().any(|&u| !ok(u)) {
            return Err(Error::invalid("uncertainty thresholds must lie in (0, 1]"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!(
                "α = {} must lie in (0, 1)",
                self.alpha
            )));
        }
        if let Some(a) = &self.reencode {
            a.validate()?;
        }
        Ok(())
    }

    pub fn threshold(&self, m: usize) -> f64 {
        self.per_modality
            .as_ref()
            .and_then(|v| v.get(m).copied())
            .unwrap_or(self.u_lambda)
    }
}

/// Nearest-rank `(1 − α)` quantile: the `⌈(1 − α)·n⌉`-th smallest value.
pub fn calibrate_threshold(uncertainties: &[f64], alpha: f64) -> Result<f64> {
    if uncertainties.is_empty() {
        return Err(Error::Calibration(
            "no correctly classified samples to calibrate on; use u_lambda = 1".into(),
        ));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("α = {alpha} must lie in (0, 1)")));
    }
    if uncertainties.iter().any(|u| !u.is_finite()) {
        return Err(Error::numeric("non-finite uncertainty in calibration set"));
    }
    let mut v = uncertainties.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    // a small tolerance keeps e.g. 0.8·10 from rounding up to 9
    let rank = (((1.0 - alpha) * n as f64) - 1e-9)
        .ceil()
        .clamp(1.0, n as f64) as usize;
    Ok(v[rank - 1])
}

#[inline]
pub fn decide_retx(u: f64, threshold: f64) -> bool {
    u >= threshold
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeResult {
    pub sample_id: usize,
    pub predicted: usize,
    pub fused: Opinion,
    /// Transmissions per modality, first one included.
    pub attempts: Vec<usize>,
    /// Uncertainty after the first reception, per modality.
    pub first_u: Vec<f64>,
    /// Uncertainty after intra-modality fusion, per modality.
    pub final_u: Vec<f64>,
    pub symbols: usize,
    pub outages: Vec<bool>,
    #[serde(skip)]
    pub records: Vec<TransmissionRecord>,
}

fn opinion_for(model: &EvidentialModel, m: usize, received: &[f64]) -> Result<Opinion> {
    let row = Matrix::from_vec(1, received.len(), received.to_vec())?;
    let e = model.evidence(m, &row)?;
    opinion_from_evidence(e.row(0))
}

/// Runs one sample through the link with retransmission.
///
/// `views[m]` is the raw input of modality `m` and `features[m]` its encoding.
pub fn inference_episode(
    model: &EvidentialModel,
    views: &[&[f64]],
    features: &[&[f64]],
    sample_id: usize,
    link: &dyn Link,
    policy: &RetxPolicy,
) -> Result<EpisodeResult> {
    let mc = model.n_modalities();
    if features.len() != mc || views.len() != mc {
        return Err(Error::invalid("one input per modality is required"));
    }
    let mut opinions = Vec::with_capacity(mc);
    let mut res = EpisodeResult {
        sample_id,
        predicted: 0,
        fused: Opinion::vacuous(model.n_classes()),
        attempts: vec![0; mc],
        first_u: vec![1.0; mc],
        final_u: vec![1.0; mc],
        symbols: 0,
        outages: vec![false; mc],
        records: Vec::new(),
    };
    for m in 0..mc {
        let threshold = policy.threshold(m);
        let mut acc: Option<Opinion> = None;
        let mut attempt = 0;
        loop {
            let z = match (&policy.reencode, attempt) {
                (Some(aug), a) if a > 0 => {
                    let x = Matrix::from_vec(1, views[m].len(), views[m].to_vec())?;
                    let xa = augment_stream(&x, aug, &[sample_id as u64, m as u64, a as u64])?;
                    model.encoders[m].predict(&xa)?.into_data()
                }
                _ => features[m].to_vec(),
            };
            let rx = link.send(&z, TxKey::inference(sample_id, m, attempt))?;
            res.symbols += rx.record.symbols;
            res.outages[m] |= rx.record.outage;
            res.records.push(rx.record);
            let o = opinion_for(model, m, &rx.features)?;
            let fused = match acc {
                None => {
                    res.first_u[m] = o.uncertainty;
                    o
                }
                Some(prev) => fuse(&prev, &o)?,
            };
            attempt += 1;
            let u = fused.uncertainty;
            acc = Some(fused);
            if attempt > policy.n_max || !decide_retx(u, threshold) {
                break;
            }
        }
        res.attempts[m] = attempt;
        let o = acc.expect("at least one attempt");
        res.final_u[m] = o.uncertainty;
        opinions.push(o);
    }
    res.fused = fuse_all(&opinions)?;
    res.predicted = res.fused.predicted_class();
    Ok(res)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityReport {
    pub mean_u: f64,
    pub retx_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub retx_ratio: f64,
    pub symbols_per_sample: f64,
    pub per_modality: Vec<ModalityReport>,
}

/// Encoded features for every sample, one matrix per modality.
pub fn encode_all(model: &EvidentialModel, data: &SyntheticDataset) -> Result<Vec<Matrix>> {
    let views = data.views();
    if views.len() != model.n_modalities() {
        return Err(Error::invalid(
            "dataset and model disagree on the number of modalities",
        ));
    }
    views
        .iter()
        .zip(&model.encoders)
        .map(|(x, enc)| enc.predict(x))
        .collect()
}

/// Runs every sample's episode (in parallel when enabled) in sample order.
pub fn run_episodes(
    model: &EvidentialModel,
    data: &SyntheticDataset,
    link: &dyn Link,
    policy: &RetxPolicy,
) -> Result<Vec<EpisodeResult>> {
    policy.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let z = encode_all(model, data)?;
    let views = data.views();
    par::map_range(data.len(), |i| {
        let xs: Vec<&[f64]> = views.iter().map(|x| x.row(i)).collect();
        let zs: Vec<&[f64]> = z.iter().map(|x| x.row(i)).collect();
        inference_episode(model, &xs, &zs, i, link, policy)
    })
    .into_iter()
    .collect()
}

pub fn summarize(episodes: &[EpisodeResult], labels: &[usize]) -> Result<EvalReport> {
    if episodes.is_empty() || episodes.len() != labels.len() {
        return Err(Error::invalid(
            "episodes and labels must be non-empty and aligned",
        ));
    }
    let mc = episodes[0].attempts.len();
    let n = episodes.len() as f64;
    let correct = episodes
        .iter()
        .zip(labels)
        .filter(|(e, y)| e.predicted == **y)
        .count();
    let mut per_modality = vec![
        ModalityReport {
            mean_u: 0.0,
            retx_count: 0
        };
        mc
    ];
    let mut extra = 0usize;
    let mut symbols = 0usize;
    for e in episodes {
        symbols += e.symbols;
        for m in 0..mc {
            per_modality[m].mean_u += e.final_u[m] / n;
            per_modality[m].retx_count += e.attempts[m] - 1;
            extra += e.attempts[m] - 1;
        }
    }
    Ok(EvalReport {
        accuracy: correct as f64 / n,
        retx_ratio: extra as f64 / (mc as f64 * n),
        symbols_per_sample: symbols as f64 / n,
        per_modality,
    })
}

pub fn evaluate(
    model: &EvidentialModel,
    data: &SyntheticDataset,
    link: &dyn Link,
    policy: &RetxPolicy,
) -> Result<EvalReport> {
    summarize(&run_episodes(model, data, link, policy)?, &data.labels)
}

/// Uncertainties used for calibration: per modality, over samples whose
/// fused prediction is correct after a single reception through `link`.
pub fn calibration_uncertainties(
    model: &EvidentialModel,
    data: &SyntheticDataset,
    link: &dyn Link,
) -> Result<Vec<Vec<f64>>> {
    let episodes = run_episodes(model, data, link, &RetxPolicy::disabled())?;
    let mut out = vec![Vec::new(); model.n_modalities()];
    for (e, &y) in episodes.iter().zip(&data.labels) {
        if e.predicted == y {
            for (m, u) in e.first_u.iter().enumerate() {
                out[m].push(*u);
            }
        }
    }
    Ok(out)
}

/// Builds a policy from calibration data. One pooled threshold unless
/// `per_modality` is set. With nothing to calibrate on, falls back to
/// `u_lambda = 1` (retransmit only vacuous opinions) and logs a warning.
pub fn calibrate_policy(
    model: &EvidentialModel,
    data: &SyntheticDataset,
    link: &dyn Link,
    alpha: f64,
    n_max: usize,
    per_modality: bool,
) -> Result<RetxPolicy> {
    let us = calibration_uncertainties(model, data, link)?;
    let pooled: Vec<f64> = us.iter().flatten().copied().collect();
    let fallback = |r: Result<f64>| match r {
        Err(Error::Calibration(msg)) => {
            log::warn!("{msg}");
            Ok(1.0)
        }
        other => other,
    };
    let u_lambda = fallback(calibrate_threshold(&pooled, alpha))?.max(f64::MIN_POSITIVE);
    let per = if per_modality {
        Some(
            us.iter()
                .map(|u| fallback(calibrate_threshold(u, alpha)).map(|v| v.max(f64::MIN_POSITIVE)))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let mut p = RetxPolicy::new(u_lambda, n_max, alpha)?;
    p.per_modality = per;
    Ok(p)
}

/// Symbols one sample costs without retransmission.
pub fn base_symbols(model: &EvidentialModel) -> usize {
    model
        .encoders
        .iter()
        .map(|e| symbols_per_block(e.output_width()))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{ChannelConfig, FnLink};
    use crate::nn::MlpParams;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn nearest_rank_quantile() {
        let v: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert_eq!(calibrate_threshold(&v, 0.2).unwrap(), 0.8);
        assert_eq!(calibrate_threshold(&[0.4; 7], 0.3).unwrap(), 0.4);
        assert_eq!(calibrate_threshold(&v, 0.999).unwrap(), 0.1);
        assert!(matches!(
            calibrate_threshold(&[], 0.2),
            Err(Error::Calibration(_))
        ));
        assert!(calibrate_threshold(&v, 1.0).is_err());
    }

    #[test]
    fn calibration_coverage_on_calibration_set() {
        let mut r = rng::stream(2, &[]);
        for n in [1usize, 7, 100, 1001] {
            let v: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
            for alpha in [0.05, 0.2, 0.5] {
                let t = calibrate_threshold(&v, alpha).unwrap();
                let frac = v.iter().filter(|&&u| decide_retx(u, t)).count() as f64 / n as f64;
                assert!(
                    frac <= alpha + 1.0 / n as f64 + 1e-12,
                    "n={n} α={alpha}: {frac}"
                );
            }
        }
    }

    #[test]
    fn decision_boundary() {
        assert!(decide_retx(0.3, 0.3));
        assert!(!decide_retx(0.0, 0.3));
        assert!(decide_retx(1.0, 1.0));
    }

    #[test]
    fn intra_fusion_never_raises_uncertainty() {
        let mut r = rng::stream(6, &[]);
        for _ in 0..1000 {
            let e1: Vec<f64> = (0..3).map(|_| r.random_range(0.0..5.0)).collect();
            let e2: Vec<f64> = (0..3).map(|_| r.random_range(0.0..5.0)).collect();
            let (a, b) = (
                opinion_from_evidence(&e1).unwrap(),
                opinion_from_evidence(&e2).unwrap(),
            );
            let f = fuse(&a, &b).unwrap();
            assert!(f.uncertainty <= a.uncertainty.min(b.uncertainty) + 1e-15);
        }
    }

    /// Identity encoders on 2-d inputs and heads that read evidence straight
    /// off the received features, so a scripted link controls every opinion.
    fn transparent_model() -> EvidentialModel {
        let id = || MlpParams::linear(Matrix::identity(2), vec![0.0; 2]).unwrap();
        EvidentialModel {
            encoders: vec![id(), id(), id()],
            heads: vec![id(), id(), id()],
        }
    }

    #[test]
    fn scripted_retransmissions() {
        let model = transparent_model();
        // modality 1 is vacuous on its first two receptions, confident after
        let link = FnLink(|z: &[f64], key: TxKey| {
            if key.modality == 1 && key.attempt < 2 {
                vec![0.0, 0.0]
            } else {
                z.to_vec()
            }
        });
        let x = [6.0, 0.0];
        let policy = RetxPolicy::new(0.5, 3, 0.2).unwrap();
        let ep =
            inference_episode(&model, &[&x, &x, &x], &[&x, &x, &x], 0, &link, &policy).unwrap();
        assert_eq!(ep.attempts, vec![1, 3, 1]);
        assert_eq!(ep.symbols, 5);
        assert_eq!(ep.first_u[1], 1.0);
        assert_eq!(ep.predicted, 0);

        let quiet = RetxPolicy {
            n_max: 0,
            ..policy.clone()
        };
        let ep0 =
            inference_episode(&model, &[&x, &x, &x], &[&x, &x, &x], 0, &link, &quiet).unwrap();
        assert_eq!(ep0.attempts, vec![1, 1, 1]);
        assert_eq!(ep0.symbols, 3);
    }

    #[test]
    fn budget_is_monotone_and_capped() {
        let model = transparent_model();
        let link = FnLink(|_: &[f64], _: TxKey| vec![0.0, 0.0]);
        let x = [1.0, 1.0];
        let mut prev = 0;
        for n_max in 0..5 {
            let p = RetxPolicy::new(0.5, n_max, 0.2).unwrap();
            let ep = inference_episode(&model, &[&x, &x, &x], &[&x, &x, &x], 3, &link, &p).unwrap();
            assert_eq!(ep.attempts, vec![n_max + 1; 3]);
            assert!(ep.symbols >= prev);
            prev = ep.symbols;
            // every reception vacuous → fused stays vacuous → class 0
            assert_eq!(ep.fused, Opinion::vacuous(2));
        }
    }

    fn small_data(n: usize) -> SyntheticDataset {
        let mut r = rng::stream(1, &[]);
        let x1 = Matrix::from_vec(n, 2, rng::normals(&mut r, 2 * n)).unwrap();
        let x2 = Matrix::from_vec(n, 2, rng::normals(&mut r, 2 * n)).unwrap();
        let labels = (0..n)
            .map(|i| usize::from(x1[(i, 1)] + x2[(i, 1)] > x1[(i, 0)] + x2[(i, 0)]))
            .collect();
        SyntheticDataset {
            x1,
            x2,
            labels,
            n_classes: 2,
            seed: 1,
            d: 1,
            latents: None,
        }
    }

    fn two_modality_model() -> EvidentialModel {
        let id = || MlpParams::linear(Matrix::identity(2), vec![0.0; 2]).unwrap();
        let w = Matrix::from_rows(&[vec![4.0, -4.0], vec![-4.0, 4.0]]).unwrap();
        let head = || MlpParams::linear(w.clone(), vec![0.0; 2]).unwrap();
        EvidentialModel {
            encoders: vec![id(), id()],
            heads: vec![head(), head()],
        }
    }

    #[test]
    fn forced_maximum_budget() {
        let data = small_data(50);
        let model = two_modality_model();
        let link = ChannelConfig::awgn(5.0, 3);
        let p = RetxPolicy::new(f64::MIN_POSITIVE, 3, 0.2).unwrap();
        let rep = evaluate(&model, &data, &link, &p).unwrap();
        assert_eq!(rep.retx_ratio, 3.0);
        assert_eq!(rep.symbols_per_sample, 8.0);
        assert_eq!(rep.per_modality[0].retx_count, 150);
    }

    #[test]
    fn no_budget_matches_plain_fusion() {
        let data = small_data(80);
        let model = two_modality_model();
        let link = ChannelConfig::awgn(0.0, 4);
        let p0 = RetxPolicy::new(0.3, 0, 0.2).unwrap();
        let eps = run_episodes(&model, &data, &link, &p0).unwrap();
        let plain = run_episodes(&model, &data, &link, &RetxPolicy::disabled()).unwrap();
        for (a, b) in eps.iter().zip(&plain) {
            assert_eq!(a.predicted, b.predicted);
            assert_eq!(a.fused, b.fused);
        }
        assert!(evaluate(&model, &data.select(&[]), &link, &p0).is_err());
    }

    #[test]
    fn noiseless_calibration_bounds_first_retransmissions() {
        let data = small_data(200);
        let model = two_modality_model();
        let link = ChannelConfig::noiseless();
        let p = calibrate_policy(&model, &data, &link, 0.2, 3, false).unwrap();
        let eps = run_episodes(&model, &data, &link, &p).unwrap();
        let rep = summarize(&eps, &data.labels).unwrap();
        assert!(rep.accuracy > 0.9, "{rep:?}");
        // pooled over modalities, correct samples trigger a first retransmission
        // at most α + 1/n of the time; wrong ones may add to that
        let correct: Vec<_> = eps
            .iter()
            .zip(&data.labels)
            .filter(|(e, y)| e.predicted == **y)
            .collect();
        let pooled = 2 * correct.len();
        let flagged: usize = correct
            .iter()
            .map(|(e, _)| e.attempts.iter().filter(|&&a| a > 1).count())
            .sum();
        assert!(flagged as f64 / pooled as f64 <= 0.2 + 1.0 / pooled as f64);
        let json = serde_json::to_value(&rep).unwrap();
        for key in [
            "accuracy",
            "retx_ratio",
            "symbols_per_sample",
            "per_modality",
        ] {
            assert!(json.get(key).is_some());
        }
    }
}
