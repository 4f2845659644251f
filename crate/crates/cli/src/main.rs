//! Command-line driver for the semantic communication experiments.
//!
//! Everything written to stdout or to output files is a deterministic
//! function of the configuration and seed; logs go to stderr.

mod overrides;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::Rng;
use semcom::channel::{ChannelConfig, SnrSpec};
use semcom::evidential::EvidentialModel;
use semcom::harness::{
    calibrate_stage, evaluate_stage, init_encoders, prepare_data, pretrain_stage,
    run_from_encoders, run_pipeline, sweep, sweep_csv, write_outputs, ExperimentConfig, LinkConfig,
};
use semcom::infobounds::{
    probe_features, sandwich_check, verify_markov_identities, ChainTemplate, DiscreteChain,
};
use semcom::nn::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use semcom::nn::MlpParams;
use semcom::pretrain::loss_log_csv;
use semcom::retx::{run_episodes, RetxPolicy};
use semcom::synthdata::SyntheticDataset;
use semcom::{rng, Error};

#[derive(Parser)]
#[command(
    name = "semcom",
    version,
    about = "Uncertainty-aware multi-modal semantic communication experiments"
)]
#[command(
    after_help = "Exit status: 0 on success, 2 on invalid input or configuration, \
3 on numeric failure or a violated information identity, 1 on I/O errors."
)]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    /// Repeat for more log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources. Fields missing from the file keep their defaults;
/// `--set` patches apply next and the named flags last.
#[derive(Args)]
pub struct ConfigArgs {
    /// Experiment configuration file (JSON). See `semcom config` for every field.
    #[arg(short, long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one field by dotted path, e.g. `finetune.lr=0.1` or
    /// `channel.model=rayleigh`. Values are parsed as JSON when possible.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    set: Vec<String>,
    /// Use this single seed.
    #[arg(long, global = true, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seed list.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Training link SNR in dB: a number, `inf`, or a range `lo,hi`.
    #[arg(long, global = true, allow_hyphen_values = true)]
    snr: Option<String>,
    /// Inference link SNR in dB, same forms as --snr.
    #[arg(long, global = true, allow_hyphen_values = true)]
    eval_snr: Option<String>,
    /// Target miss rate of the retransmission threshold.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Retransmissions allowed per modality.
    #[arg(long, global = true)]
    n_max: Option<usize>,
    /// Skip self-supervised pre-training.
    #[arg(long, global = true)]
    no_pretrain: bool,
    /// Disable retransmission at inference.
    #[arg(long, global = true)]
    no_retx: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as JSON.
    Config,
    /// Generate the synthetic two-view dataset for the first seed.
    GenData {
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Stage I: local pre-training of both encoders.
    Pretrain {
        /// Output directory; receives `encoders.ckpt` and `pretrain_loss.csv`.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Stage II fine-tuning through the channel, followed by calibration and
    /// evaluation. Runs Stage I first unless --encoders is given.
    Finetune {
        /// Encoder checkpoint from `pretrain`.
        #[arg(long)]
        encoders: Option<PathBuf>,
        /// Run directory for model, metrics, logs and trace.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Calibrate the retransmission threshold of a trained model.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        /// Policy file to write; stdout when absent.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Per-sample predictions on the test split, as CSV.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// Policy from `calibrate`; without it nothing is retransmitted.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Accuracy and communication cost on the test split, as JSON.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// The whole pipeline for every seed.
    Run {
        /// Writes one `seed_<n>` directory per seed here.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Binned mutual information between encoder features and the generating factors.
    MiProbe {
        /// Encoder checkpoint; pre-trains from the configuration when absent.
        #[arg(long)]
        encoders: Option<PathBuf>,
        #[arg(long, default_value_t = semcom::infobounds::DEFAULT_BINS)]
        bins: usize,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Exact checks of the chain identities and the sandwich bound on random
    /// discrete chains. Fails on the first violation.
    VerifyBounds {
        #[arg(long, default_value_t = 200)]
        chains: usize,
        #[arg(long, default_value_t = 50)]
        templates: usize,
    },
    /// Train once per seed, then evaluate at 0, 10 and 20 dB and on a link
    /// whose SNR is drawn from [0, 20] dB per transmission.
    Sweep {
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The cause chain, skipping causes already spelled out by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = err.to_string();
    for cause in err.chain().skip(1) {
        let s = cause.to_string();
        if !msg.ends_with(&s) {
            msg.push_str(": ");
            msg.push_str(&s);
        }
    }
    msg
}

fn exit_code(err: &anyhow::Error) -> u8 {
    fn classify(e: &Error) -> u8 {
        match e {
            Error::Stage { source, .. } => classify(source),
            Error::Numeric(_) | Error::IdentityViolation { .. } => 3,
            Error::Io(_) => 1,
            _ => 2,
        }
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return classify(e);
        }
        if cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    1
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = overrides::load(&cli.config)?;
    let seed = cfg.seeds[0];
    match &cli.command {
        Command::Config => emit(None, &cfg.to_json()?),
        Command::GenData { out } => {
            let data = SyntheticDataset::generate(&cfg.data, seed)?;
            data.save(out)?;
            log::info!("{} samples written to {}", data.len(), out.display());
            Ok(())
        }
        Command::Pretrain { out } => {
            let (train, _) = prepare_data(&cfg, seed)?;
            let (encoders, log) = pretrain_stage(&cfg, &train, seed)?;
            fs::create_dir_all(out)?;
            save_checkpoint(
                &encoder_checkpoint(seed, encoders),
                out.join("encoders.ckpt"),
            )?;
            if !log.is_empty() {
                fs::write(out.join("pretrain_loss.csv"), loss_log_csv(&log))?;
            }
            Ok(())
        }
        Command::Finetune { encoders, out } => {
            let (train, test) = prepare_data(&cfg, seed)?;
            let (enc, log) = match encoders {
                Some(p) => (load_encoders(&cfg, &train, seed, p)?, Vec::new()),
                None => pretrain_stage(&cfg, &train, seed)?,
            };
            let art = run_from_encoders(&cfg, seed, &train, &test, enc, log)?;
            write_outputs(out, &cfg, &art)?;
            emit(None, &summary_line(&art.metrics))
        }
        Command::Calibrate { model, out } => {
            let model = load_model(model, seed)?;
            let (train, _) = prepare_data(&cfg, seed)?;
            let policy = calibrate_stage(
                &cfg,
                &model,
                &train,
                &cfg.channel.reseeded(seed),
                &cfg.eval_link().reseeded(seed),
            )?;
            emit(out.as_deref(), &serde_json::to_string_pretty(&policy)?)
        }
        Command::Infer { model, policy, out } => {
            let model = load_model(model, seed)?;
            let policy = load_policy(policy.as_deref())?;
            let (_, test) = prepare_data(&cfg, seed)?;
            let episodes = run_episodes(&model, &test, &cfg.eval_link().reseeded(seed), &policy)?;
            let mc = model.n_modalities();
            let mut csv = String::from("sample,label,predicted,uncertainty");
            for m in 0..mc {
                let _ = write!(csv, ",attempts_{m},u_{m}");
            }
            csv.push('\n');
            for (e, y) in episodes.iter().zip(&test.labels) {
                let _ = write!(
                    csv,
                    "{},{y},{},{}",
                    e.sample_id, e.predicted, e.fused.uncertainty
                );
                for m in 0..mc {
                    let _ = write!(csv, ",{},{}", e.attempts[m], e.final_u[m]);
                }
                csv.push('\n');
            }
            emit(out.as_deref(), csv.trim_end())
        }
        Command::Evaluate { model, policy, out } => {
            let model = load_model(model, seed)?;
            let policy = load_policy(policy.as_deref())?;
            let (_, test) = prepare_data(&cfg, seed)?;
            let (report, cost, _) = evaluate_stage(
                &cfg,
                &model,
                &test,
                &cfg.eval_link().reseeded(seed),
                &policy,
            )?;
            let doc = serde_json::json!({ "seed": seed, "report": report, "cost": cost });
            emit(out.as_deref(), &serde_json::to_string_pretty(&doc)?)
        }
        Command::Run { out } => {
            let mut cfg = cfg.clone();
            if out.is_some() {
                cfg.output_dir = out.clone();
            }
            let metrics = run_pipeline(&cfg)?;
            let lines: Vec<String> = metrics.iter().map(summary_line).collect();
            emit(None, &format!("{SUMMARY_HEADER}\n{}", lines.join("\n")))
        }
        Command::MiProbe {
            encoders,
            bins,
            out,
        } => {
            let (train, test) = prepare_data(&cfg, seed)?;
            let enc = match encoders {
                Some(p) => load_encoders(&cfg, &train, seed, p)?,
                None => pretrain_stage(&cfg, &train, seed)?.0,
            };
            let latents = test
                .latents
                .as_ref()
                .ok_or_else(|| Error::invalid("the test split carries no generating factors"))?;
            let z1 = enc[0].predict(&test.x1)?;
            let z2 = enc[1].predict(&test.x2)?;
            let report = probe_features(&z1, &z2, latents, *bins)?;
            emit(out.as_deref(), &serde_json::to_string_pretty(&report)?)
        }
        Command::VerifyBounds { chains, templates } => verify_bounds(seed, *chains, *templates),
        Command::Sweep { out } => {
            let base = cfg.eval_link().base;
            let at = |snr_db| LinkConfig::from(ChannelConfig { snr_db, ..base });
            let grid = [
                at(SnrSpec::Fixed(0.0)),
                at(SnrSpec::Fixed(10.0)),
                at(SnrSpec::Fixed(20.0)),
                at(SnrSpec::Range { lo: 0.0, hi: 20.0 }),
            ];
            let rows = sweep(&cfg, &grid)?;
            emit(out.as_deref(), sweep_csv(&rows).trim_end())
        }
    }
}

const SUMMARY_HEADER: &str =
    "seed,variant,final_accuracy,accuracy_no_retx,epochs,c_train,symbols_per_sample,retx_ratio";

fn summary_line(m: &semcom::harness::RunMetrics) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        m.seed,
        m.variant,
        m.final_accuracy,
        m.accuracy_no_retx,
        m.epochs_run,
        m.c_train,
        m.c_infer.symbols_per_sample,
        m.c_infer.retx_ratio
    )
}

/// Prints to stdout, or writes the file with a trailing newline.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, format!("{text}\n")).map_err(Error::from)?;
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            match writeln!(stdout, "{text}") {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
                r => r.map_err(Error::from)?,
            }
        }
    }
    Ok(())
}

fn encoder_checkpoint(seed: u64, encoders: Vec<MlpParams>) -> Checkpoint {
    Checkpoint {
        seed,
        networks: encoders
            .into_iter()
            .enumerate()
            .map(|(m, e)| (format!("encoder.{m}"), e))
            .collect(),
    }
}

fn warn_seed(ckpt: &Checkpoint, seed: u64, path: &Path) {
    if ckpt.seed != seed {
        log::warn!(
            "{} was produced with seed {}, running with seed {seed}",
            path.display(),
            ckpt.seed
        );
    }
}

/// Loads encoders and checks them against the architecture the config implies.
fn load_encoders(
    cfg: &ExperimentConfig,
    train: &SyntheticDataset,
    seed: u64,
    path: &Path,
) -> Result<Vec<MlpParams>> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    warn_seed(&ckpt, seed, path);
    let shapes = init_encoders(cfg, train, seed)?;
    let expected: Vec<(String, Vec<usize>)> = shapes
        .iter()
        .enumerate()
        .map(|(m, e)| (format!("encoder.{m}"), e.widths()))
        .collect();
    let expected: Vec<(&str, Vec<usize>)> = expected
        .iter()
        .map(|(n, w)| (n.as_str(), w.clone()))
        .collect();
    ckpt.expect_architecture(&expected)?;
    Ok((0..shapes.len())
        .map(|m| {
            ckpt.get(&format!("encoder.{m}"))
                .expect("checked above")
                .clone()
        })
        .collect())
}

fn load_model(path: &Path, seed: u64) -> Result<EvidentialModel> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    warn_seed(&ckpt, seed, path);
    Ok(EvidentialModel::from_checkpoint(&ckpt)?)
}

fn load_policy(path: Option<&Path>) -> Result<RetxPolicy> {
    let Some(p) = path else {
        return Ok(RetxPolicy::disabled());
    };
    let text = fs::read_to_string(p)
        .map_err(Error::from)
        .with_context(|| format!("reading {}", p.display()))?;
    let policy: RetxPolicy =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
    policy.validate()?;
    Ok(policy)
}

fn verify_bounds(seed: u64, chains: usize, templates: usize) -> Result<()> {
    let mut r = rng::stream(seed, &[0xb0]);
    let mut worst_identity = 0.0f64;
    for i in 0..chains {
        let sizes = [0; 5].map(|_| r.random_range(2..=4));
        let rep = verify_markov_identities(&DiscreteChain::random(&mut r, sizes))
            .with_context(|| format!("chain {i} with alphabet sizes {sizes:?}"))?;
        let gaps = [
            rep.i_zh_xp_given_y.abs(),
            rep.i_x_xp_given_y.abs(),
            (rep.i_zh_y - rep.i_zh_xp_plus_i_zh_y_given_xp).abs(),
            (rep.i_x_xp - rep.i_x_y_minus_gap).abs(),
        ];
        worst_identity = gaps.into_iter().fold(worst_identity, f64::max);
    }
    let (mut min_slack, mut worst_equality, mut noiseless) = (f64::INFINITY, 0.0f64, 0);
    for i in 0..templates {
        let nx = r.random_range(2..=5);
        let (ny, nxp) = (r.random_range(2..=4), r.random_range(2..=4));
        // every other template gets a perfect channel so the equality case is exercised
        let nzh = if i % 2 == 0 {
            nx
        } else {
            r.random_range(2..=4)
        };
        let mut t = ChainTemplate::random(&mut r, ny, nx, nxp, nzh);
        if i % 2 == 0 {
            t.p_zh_given_z = (0..nx)
                .map(|a| (0..nx).map(|b| f64::from(u8::from(a == b))).collect())
                .collect();
        }
        let rep = sandwich_check(&t).with_context(|| format!("template {i}"))?;
        min_slack = min_slack.min(rep.slack_upper).min(rep.slack_lower);
        if rep.noiseless {
            noiseless += 1;
            worst_equality = worst_equality.max((rep.i_zh_y_sup - rep.i_x_y).abs());
        }
    }
    let doc = serde_json::json!({
        "seed": seed,
        "chains": chains,
        "max_identity_gap": worst_identity,
        "templates": templates,
        "min_bound_slack": if templates > 0 { Some(min_slack) } else { None },
        "noiseless_templates": noiseless,
        "max_equality_gap": worst_equality,
    });
    emit(None, &serde_json::to_string_pretty(&doc)?)
}
