//! The three-stage driver: self-supervised pre-training on each device,
//! supervised fine-tuning through the channel, calibration, and inference
//! with retransmission.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::baseline::ConcatModel;
use super::config::{CalibrationSource, ExperimentConfig, LinkConfig};
use crate::channel::{
    send_rows, symbols_per_block, trace_csv, ChannelConfig, Link, TransmissionRecord,
};
use crate::error::{Error, Result};
use crate::evidential::{
    epoch_log_csv, finetune_epoch, fuse_all, opinion_from_evidence, EvidentialModel,
    FinetuneEpochLog,
};
use crate::nn::checkpoint::{save_checkpoint, Checkpoint};
use crate::nn::MlpParams;
use crate::par;
use crate::pretrain::{loss_log_csv, pretrain, PretrainConfig, PretrainEpochLog};
use crate::retx::{calibrate_policy, run_episodes, summarize, EvalReport, RetxPolicy};
use crate::synthdata::SyntheticDataset;

/// Rounds (1-based) needed to first reach each target, `None` when never reached.
pub fn rounds_to_target(curve: &[f64], targets: &[f64]) -> Vec<Option<usize>> {
    targets
        .iter()
        .map(|&t| curve.iter().position(|&a| a >= t).map(|i| i + 1))
        .collect()
}

/// Rounds-to-target as a text table, one row per variant; `---` marks a
/// target that was never reached.
pub fn rounds_table(targets: &[f64], rows: &[(String, Vec<Option<usize>>)]) -> String {
    let mut s = String::from("method");
    for t in targets {
        let _ = write!(s, "\t{:.0}%", t * 100.0);
    }
    s.push('\n');
    for (name, rounds) in rows {
        s.push_str(name);
        for r in rounds {
            match r {
                Some(n) => {
                    let _ = write!(s, "\t{n}");
                }
                None => s.push_str("\t---"),
            }
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRounds {
    pub target: f64,
    pub rounds: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferCost {
    pub symbols_per_sample: f64,
    pub total_symbols: u64,
    pub retx_ratio: f64,
    pub feedback_symbols: f64,
    pub budget_exceeded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub variant: String,
    /// Test accuracy after each supervised round, single transmission.
    pub accuracy_curve: Vec<f64>,
    pub rounds_to_target: Vec<TargetRounds>,
    /// Rounds needed to reach 90% of the last curve value.
    pub rounds_to_90pct_final: Option<usize>,
    pub epochs_run: usize,
    pub symbols_per_round: u64,
    pub c_train: u64,
    pub accuracy_no_retx: f64,
    /// Accuracy after Stage III (equal to `accuracy_no_retx` without retransmission).
    pub final_accuracy: f64,
    pub c_infer: InferCost,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<RetxPolicy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_final_loss: Option<f64>,
}

impl RunMetrics {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Everything a run leaves behind.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub metrics: RunMetrics,
    pub pretrain_log: Vec<PretrainEpochLog>,
    pub finetune_log: Vec<FinetuneEpochLog>,
    pub checkpoint: Checkpoint,
    pub trace: Vec<TransmissionRecord>,
}

pub fn variant_name(cfg: &ExperimentConfig) -> String {
    let a = &cfg.ablation;
    let mut parts = vec![if a.ce_concat_baseline {
        "ce_concat"
    } else {
        "evidential"
    }];
    if a.no_pretrain {
        parts.push("no_pretrain");
    } else if a.intra_only {
        parts.push("intra_only");
    } else if a.shared_only {
        parts.push("shared_only");
    }
    if a.no_retx || a.ce_concat_baseline {
        parts.push("no_retx");
    }
    parts.join("+")
}

/// Generates the dataset for `seed` and splits it into train and test.
pub fn prepare_data(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(SyntheticDataset, SyntheticDataset)> {
    let data = SyntheticDataset::generate(&cfg.data, seed)?;
    data.split(cfg.n_train)
}

pub fn init_encoders(
    cfg: &ExperimentConfig,
    data: &SyntheticDataset,
    seed: u64,
) -> Result<Vec<MlpParams>> {
    data.views()
        .iter()
        .enumerate()
        .map(|(m, x)| {
            let mut widths = vec![x.cols()];
            widths.extend_from_slice(&cfg.model.encoder_hidden);
            widths.push(cfg.model.feature_dim);
            MlpParams::init(&widths, seed, m as u64)
        })
        .collect()
}

/// Stage I: local self-supervised pre-training. Uses no link, so it adds
/// nothing to the training communication cost. Under `no_pretrain` the
/// encoders are returned at initialisation with an empty log.
pub fn pretrain_stage(
    cfg: &ExperimentConfig,
    train: &SyntheticDataset,
    seed: u64,
) -> Result<(Vec<MlpParams>, Vec<PretrainEpochLog>)> {
    let init = init_encoders(cfg, train, seed)?;
    if cfg.ablation.no_pretrain || cfg.pretrain.epochs == 0 {
        return Ok((init, Vec::new()));
    }
    let pcfg = PretrainConfig {
        objective: cfg.objective(),
        ..cfg.pretrain
    };
    pretrain(&init, train, &pcfg, seed).map_err(|e| e.in_stage("pretrain"))
}

/// Single-transmission accuracy of an evidential model, identical to a
/// retransmission-free episode run but batched.
pub fn evidential_accuracy(
    model: &EvidentialModel,
    data: &SyntheticDataset,
    link: &dyn Link,
) -> Result<f64> {
    let ids: Vec<usize> = (0..data.len()).collect();
    let mut evidence = Vec::with_capacity(model.n_modalities());
    for (m, (x, enc)) in data.views().iter().zip(&model.encoders).enumerate() {
        let z = enc.predict(x)?;
        let (rx, _) = send_rows(link, &z, &ids, 0, m, 0)?;
        evidence.push(model.evidence(m, &rx)?);
    }
    let hits = par::map_range(data.len(), |i| -> Result<bool> {
        let ops = evidence
            .iter()
            .map(|e| opinion_from_evidence(e.row(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(fuse_all(&ops)?.predicted_class() == data.labels[i])
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len().max(1) as f64)
}

enum Trained {
    Evidential(EvidentialModel),
    Concat(ConcatModel),
}

struct Stage2 {
    trained: Trained,
    curve: Vec<f64>,
    log: Vec<FinetuneEpochLog>,
}

fn epoch_budget(cfg: &ExperimentConfig, per_round: u64) -> usize {
    match cfg.budget.max_train_symbols {
        Some(cap) if per_round > 0 => cfg.finetune.epochs.min((cap / per_round) as usize),
        _ => cfg.finetune.epochs,
    }
}

fn finetune_stage(
    cfg: &ExperimentConfig,
    encoders: Vec<MlpParams>,
    train: &SyntheticDataset,
    test: &SyntheticDataset,
    train_link: &LinkConfig,
    eval_link: &LinkConfig,
    epochs: usize,
    seed: u64,
) -> Result<Stage2> {
    let mut curve = Vec::with_capacity(epochs);
    let mut log = Vec::with_capacity(epochs);
    if cfg.ablation.ce_concat_baseline {
        let mut model = ConcatModel::new(
            encoders,
            &cfg.model.head_hidden,
            train.n_classes,
            seed,
            true,
        )?;
        for t in 0..epochs {
            let lr = cfg.finetune.lr_at(t);
            model = model
                .train_epoch(
                    train,
                    train_link,
                    lr,
                    cfg.finetune.encoder_lr_scale,
                    cfg.finetune.batch_size,
                    t,
                    seed,
                )?
                .0;
            curve.push(model.accuracy(test, eval_link)?);
        }
        return Ok(Stage2 {
            trained: Trained::Concat(model),
            curve,
            log,
        });
    }
    let mut model =
        EvidentialModel::with_heads(encoders, &cfg.model.head_hidden, train.n_classes, seed)?;
    for t in 0..epochs {
        let (next, entry) = finetune_epoch(&model, train, train_link, &cfg.finetune, t, seed)?;
        model = next;
        log.push(entry);
        curve.push(evidential_accuracy(&model, test, eval_link)?);
    }
    Ok(Stage2 {
        trained: Trained::Evidential(model),
        curve,
        log,
    })
}

/// Threshold calibration on the training split.
pub fn calibrate_stage(
    cfg: &ExperimentConfig,
    model: &EvidentialModel,
    train: &SyntheticDataset,
    train_link: &LinkConfig,
    eval_link: &LinkConfig,
) -> Result<RetxPolicy> {
    let clean: LinkConfig = ChannelConfig::noiseless().into();
    let link = match cfg.policy.calibrate_on {
        CalibrationSource::Clean => &clean,
        CalibrationSource::Channel => train_link,
        CalibrationSource::Eval => eval_link,
    };
    let n_max = if cfg.ablation.no_retx {
        0
    } else {
        cfg.policy.n_max
    };
    calibrate_policy(
        model,
        train,
        link,
        cfg.policy.alpha,
        n_max,
        cfg.policy.per_modality,
    )
}

/// Stage III on the test split.
pub fn evaluate_stage(
    cfg: &ExperimentConfig,
    model: &EvidentialModel,
    test: &SyntheticDataset,
    eval_link: &LinkConfig,
    policy: &RetxPolicy,
) -> Result<(EvalReport, InferCost, Vec<TransmissionRecord>)> {
    let episodes = run_episodes(model, test, eval_link, policy)?;
    let report = summarize(&episodes, &test.labels)?;
    let total: u64 = episodes.iter().map(|e| e.symbols as u64).sum();
    let requests: usize = report.per_modality.iter().map(|m| m.retx_count).sum();
    let feedback = requests as f64 * cfg.policy.feedback_cost;
    let per_sample = (total as f64 + feedback) / test.len() as f64;
    let cost = InferCost {
        symbols_per_sample: per_sample,
        total_symbols: total,
        retx_ratio: report.retx_ratio,
        feedback_symbols: feedback,
        budget_exceeded: cfg
            .budget
            .max_infer_symbols_per_sample
            .is_some_and(|c| per_sample > c),
    };
    let trace = episodes.into_iter().flat_map(|e| e.records).collect();
    Ok((report, cost, trace))
}

/// Runs Stages II and III for one seed from given encoders (already
/// pre-trained or not). Lets several variants share one Stage I.
pub fn run_from_encoders(
    cfg: &ExperimentConfig,
    seed: u64,
    train: &SyntheticDataset,
    test: &SyntheticDataset,
    encoders: Vec<MlpParams>,
    pretrain_log: Vec<PretrainEpochLog>,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    let train_link = cfg.channel.reseeded(seed);
    let eval_link = cfg.eval_link().reseeded(seed);
    let k = cfg.model.feature_dim;
    let n_mod = encoders.len();
    let symbols_per_round = (train.len() * n_mod * symbols_per_block(k)) as u64;
    let epochs = epoch_budget(cfg, symbols_per_round);
    if epochs == 0 {
        return Err(
            Error::invalid("the training budget does not cover a single round")
                .in_stage("finetune"),
        );
    }

    let stage2 = finetune_stage(
        cfg,
        encoders,
        train,
        test,
        &train_link,
        &eval_link,
        epochs,
        seed,
    )
    .map_err(|e| e.in_stage("finetune"))?;
    let c_train = epochs as u64 * symbols_per_round;
    assert_eq!(
        c_train,
        stage2.curve.len() as u64 * symbols_per_round,
        "one round per supervised epoch"
    );

    let accuracy_no_retx = *stage2.curve.last().expect("at least one round");
    let (final_accuracy, c_infer, policy, eval, trace, checkpoint) = match &stage2.trained {
        Trained::Concat(m) => {
            let per = (test.len() * n_mod * symbols_per_block(k)) as u64;
            let cost = InferCost {
                symbols_per_sample: per as f64 / test.len() as f64,
                total_symbols: per,
                retx_ratio: 0.0,
                feedback_symbols: 0.0,
                budget_exceeded: cfg
                    .budget
                    .max_infer_symbols_per_sample
                    .is_some_and(|c| per as f64 / test.len() as f64 > c),
            };
            let mut networks: Vec<(String, MlpParams)> = m
                .encoders
                .iter()
                .enumerate()
                .map(|(i, e)| (format!("encoder.{i}"), e.clone()))
                .collect();
            networks.push(("head.concat".into(), m.head.clone()));
            (
                accuracy_no_retx,
                cost,
                None,
                None,
                Vec::new(),
                Checkpoint { seed, networks },
            )
        }
        Trained::Evidential(m) => {
            let policy = calibrate_stage(cfg, m, train, &train_link, &eval_link)
                .map_err(|e| e.in_stage("calibrate"))?;
            let (report, cost, trace) = evaluate_stage(cfg, m, test, &eval_link, &policy)
                .map_err(|e| e.in_stage("evaluate"))?;
            (
                report.accuracy,
                cost,
                Some(policy),
                Some(report),
                trace,
                m.to_checkpoint(seed),
            )
        }
    };

    let own = 0.9 * accuracy_no_retx;
    let metrics = RunMetrics {
        seed,
        variant: variant_name(cfg),
        rounds_to_target: cfg
            .targets
            .iter()
            .zip(rounds_to_target(&stage2.curve, &cfg.targets))
            .map(|(&target, rounds)| TargetRounds { target, rounds })
            .collect(),
        rounds_to_90pct_final: rounds_to_target(&stage2.curve, &[own])[0],
        accuracy_curve: stage2.curve,
        epochs_run: epochs,
        symbols_per_round,
        c_train,
        accuracy_no_retx,
        final_accuracy,
        c_infer,
        policy,
        eval,
        pretrain_final_loss: pretrain_log.last().map(|l| l.total),
    };
    Ok(RunArtifacts {
        metrics,
        pretrain_log,
        finetune_log: stage2.log,
        checkpoint,
        trace,
    })
}

/// All three stages for one seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<RunArtifacts> {
    cfg.validate()?;
    let (train, test) = prepare_data(cfg, seed).map_err(|e| e.in_stage("data"))?;
    let (encoders, log) = pretrain_stage(cfg, &train, seed)?;
    run_from_encoders(cfg, seed, &train, &test, encoders, log)
}

fn curve_csv(curve: &[f64]) -> String {
    let mut s = String::from("round,accuracy\n");
    for (i, a) in curve.iter().enumerate() {
        let _ = writeln!(s, "{},{a}", i + 1);
    }
    s
}

/// Writes a run's outputs into `dir`: config snapshot, metrics, logs,
/// checkpoint and transmission trace.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, art: &RunArtifacts) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), cfg.to_json()?)?;
    fs::write(dir.join("metrics.json"), art.metrics.to_json()?)?;
    fs::write(
        dir.join("accuracy_curve.csv"),
        curve_csv(&art.metrics.accuracy_curve),
    )?;
    if !art.pretrain_log.is_empty() {
        fs::write(
            dir.join("pretrain_loss.csv"),
            loss_log_csv(&art.pretrain_log),
        )?;
    }
    if !art.finetune_log.is_empty() {
        fs::write(dir.join("finetune.csv"), epoch_log_csv(&art.finetune_log))?;
    }
    if !art.trace.is_empty() {
        fs::write(dir.join("trace.csv"), trace_csv(&art.trace))?;
    }
    save_checkpoint(&art.checkpoint, dir.join("model.ckpt"))
}

/// Runs every seed (concurrently when enabled) and writes each run under
/// `output_dir/seed_<seed>` when an output directory is configured. A failed
/// run leaves a `FAILED` marker naming the stage and cause.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<Vec<RunMetrics>> {
    cfg.validate()?;
    let results = par::map_slice(&cfg.seeds, |&seed| -> Result<RunMetrics> {
        let dir = cfg
            .output_dir
            .as_ref()
            .map(|d| d.join(format!("seed_{seed}")));
        match run_seed(cfg, seed) {
            Ok(art) => {
                if let Some(dir) = &dir {
                    write_outputs(dir, cfg, &art)?;
                }
                Ok(art.metrics)
            }
            Err(e) => {
                if let Some(dir) = &dir {
                    fs::create_dir_all(dir)?;
                    fs::write(dir.join("FAILED"), format!("{e}\n"))?;
                }
                Err(e)
            }
        }
    });
    results.into_iter().collect()
}

/// One line of an SNR sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub snr: String,
    pub accuracy_no_retx: f64,
    pub accuracy_retx: f64,
    pub retx_ratio: f64,
    pub symbols_per_sample: f64,
}

/// Trains once per seed on `cfg.channel`, then evaluates on every link in
/// `evals` with and without retransmission.
pub fn sweep(cfg: &ExperimentConfig, evals: &[LinkConfig]) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if cfg.ablation.ce_concat_baseline {
        return Err(Error::invalid("the sweep evaluates evidential models only"));
    }
    let per_seed = par::map_slice(&cfg.seeds, |&seed| -> Result<Vec<SweepRow>> {
        let (train, test) = prepare_data(cfg, seed)?;
        let (encoders, _) = pretrain_stage(cfg, &train, seed)?;
        let train_link = cfg.channel.reseeded(seed);
        let model =
            EvidentialModel::with_heads(encoders, &cfg.model.head_hidden, train.n_classes, seed)?;
        let mut model = model;
        for t in 0..epoch_budget(cfg, u64::MAX) {
            model = finetune_epoch(&model, &train, &train_link, &cfg.finetune, t, seed)
                .map_err(|e| e.in_stage("finetune"))?
                .0;
        }
        evals
            .iter()
            .map(|link| {
                let eval_link = link.reseeded(seed);
                let policy = calibrate_stage(cfg, &model, &train, &train_link, &eval_link)?;
                let (report, cost, _) = evaluate_stage(cfg, &model, &test, &eval_link, &policy)?;
                Ok(SweepRow {
                    seed,
                    snr: link.label(),
                    accuracy_no_retx: evidential_accuracy(&model, &test, &eval_link)?,
                    accuracy_retx: report.accuracy,
                    retx_ratio: report.retx_ratio,
                    symbols_per_sample: cost.symbols_per_sample,
                })
            })
            .collect()
    });
    Ok(per_seed
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s =
        String::from("seed,snr,accuracy_no_retx,accuracy_retx,retx_ratio,symbols_per_sample\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.seed, r.snr, r.accuracy_no_retx, r.accuracy_retx, r.retx_ratio, r.symbols_per_sample
        );
    }
    s
}
