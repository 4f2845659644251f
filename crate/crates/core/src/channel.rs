//! Per-modality flat-fading links.
//!
//! A real feature vector is packed into complex symbols (consecutive pairs),
//! normalised to unit average symbol power, passed through `h·s + n` and
//! unpacked again. Every call draws its own randomness from
//! `(seed, round, sample, modality, attempt)`, so links are stateless and a
//! retransmission always sees fresh fading and noise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::par;
use crate::rng::{self, tag, StreamRng};

/// Below this fading magnitude an equalised attempt is declared an outage.
pub const OUTAGE_THRESHOLD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelModel {
    Awgn,
    Rayleigh,
}

impl ChannelModel {
    pub fn name(self) -> &'static str {
        match self {
            ChannelModel::Awgn => "awgn",
            ChannelModel::Rayleigh => "rayleigh",
        }
    }
}

/// Fixed SNR in dB (`+∞` for a noiseless link) or a range drawn uniformly
/// per sample and modality.
///
/// In JSON a fixed value is a number (or the string `"inf"`), a range is a
/// two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SnrRepr", into = "SnrRepr")]
pub enum SnrSpec {
    Fixed(f64),
    Range { lo: f64, hi: f64 },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SnrRepr {
    Num(f64),
    Range([f64; 2]),
    Text(String),
}

impl TryFrom<SnrRepr> for SnrSpec {
    type Error = String;

    fn try_from(r: SnrRepr) -> std::result::Result<Self, String> {
        let s = match r {
            SnrRepr::Num(v) => SnrSpec::Fixed(v),
            SnrRepr::Range([lo, hi]) => SnrSpec::Range { lo, hi },
            SnrRepr::Text(t) if t == "inf" || t == "+inf" => SnrSpec::Fixed(f64::INFINITY),
            SnrRepr::Text(t) => return Err(format!("unrecognised SNR `{t}`")),
        };
        s.validate().map_err(|e| e.to_string())?;
        Ok(s)
    }
}

impl From<SnrSpec> for SnrRepr {
    fn from(s: SnrSpec) -> Self {
        match s {
            SnrSpec::Fixed(v) if v == f64::INFINITY => SnrRepr::Text("inf".into()),
            SnrSpec::Fixed(v) => SnrRepr::Num(v),
            SnrSpec::Range { lo, hi } => SnrRepr::Range([lo, hi]),
        }
    }
}

impl SnrSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SnrSpec::Fixed(v) if v.is_nan() || v == f64::NEG_INFINITY => {
                Err(Error::invalid(format!("invalid SNR {v} dB")))
            }
            SnrSpec::Range { lo, hi } if !(lo.is_finite() && hi.is_finite()) => {
                Err(Error::invalid("SNR range bounds must be finite"))
            }
            SnrSpec::Range { lo, hi } if lo > hi => {
                Err(Error::invalid(format!("SNR range [{lo}, {hi}] is empty")))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            SnrSpec::Fixed(v) => format!("{v}"),
            SnrSpec::Range { lo, hi } => format!("dyn[{lo}:{hi}]"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub model: ChannelModel,
    pub snr_db: SnrSpec,
    pub seed: u64,
    /// Divide by the (perfectly known) fading coefficient.
    pub equalize: bool,
}

impl ChannelConfig {
    pub fn awgn(snr_db: f64, seed: u64) -> Self {
        Self {
            model: ChannelModel::Awgn,
            snr_db: SnrSpec::Fixed(snr_db),
            seed,
            equalize: true,
        }
    }

    pub fn noiseless() -> Self {
        Self::awgn(f64::INFINITY, 0)
    }

    pub fn validate(&self) -> Result<()> {
        self.snr_db.validate()
    }
}

/// Complex symbols as `(re, im)` pairs plus the scale needed to undo the
/// power normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolBlock {
    pub symbols: Vec<[f64; 2]>,
    pub power_scale: f64,
}

impl SymbolBlock {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn mean_power(&self) -> f64 {
        let p: f64 = self.symbols.iter().map(|[a, b]| a * a + b * b).sum();
        p / self.symbols.len().max(1) as f64
    }
}

/// Number of complex symbols used by a `k`-dimensional feature vector.
pub fn symbols_per_block(k: usize) -> usize {
    k.div_ceil(2)
}

/// Packs consecutive pairs into symbols; odd lengths get a zero imaginary
/// tail. `power_scale` is the RMS of the padded real vector, and symbols are
/// divided by `√2·power_scale` so their mean power is exactly 1. An all-zero
/// vector is passed through with scale 1.
pub fn to_symbols(z: &[f64]) -> Result<SymbolBlock> {
    if z.is_empty() {
        return Err(Error::invalid("cannot transmit an empty vector"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite feature handed to the channel"));
    }
    let l = symbols_per_block(z.len());
    let energy: f64 = z.iter().map(|v| v * v).sum();
    let rms = (energy / (2 * l) as f64).sqrt();
    let power_scale = if rms > 0.0 { rms } else { 1.0 };
    let div = std::f64::consts::SQRT_2 * power_scale;
    let symbols = (0..l)
        .map(|i| {
            let re = z[2 * i];
            let im = z.get(2 * i + 1).copied().unwrap_or(0.0);
            [re / div, im / div]
        })
        .collect();
    Ok(SymbolBlock {
        symbols,
        power_scale,
    })
}

pub fn from_symbols(s: &SymbolBlock, k: usize) -> Result<Vec<f64>> {
    if symbols_per_block(k) != s.len() || k == 0 {
        return Err(Error::invalid(format!(
            "{} symbols cannot hold a {k}-dimensional vector",
            s.len()
        )));
    }
    let mul = std::f64::consts::SQRT_2 * s.power_scale;
    let mut out = Vec::with_capacity(k);
    for [re, im] in &s.symbols {
        out.push(re * mul);
        out.push(im * mul);
    }
    out.truncate(k);
    Ok(out)
}

/// Noise variance for unit signal power.
pub fn noise_variance(snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        10f64.powf(-snr_db / 10.0)
    }
}

/// Identifies one use of a link. `round` separates training epochs from
/// inference (round 0) so they never share randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct TxKey {
    pub round: u64,
    pub sample: u64,
    pub modality: u64,
    pub attempt: u64,
}

impl TxKey {
    pub fn inference(sample: usize, modality: usize, attempt: usize) -> Self {
        Self {
            round: 0,
            sample: sample as u64,
            modality: modality as u64,
            attempt: attempt as u64,
        }
    }
}

/// Outcome of one transmitted block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransmissionRecord {
    pub sample_id: u64,
    pub modality: u64,
    pub attempt: u64,
    pub snr_db: f64,
    pub model: ChannelModel,
    pub outage: bool,
    pub symbols: usize,
}

/// Realised per-call channel state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelDraw {
    pub snr_db: f64,
    pub h: [f64; 2],
}

impl ChannelConfig {
    /// SNR for a key; a range is drawn once per `(round, sample, modality)`.
    pub fn snr_for(&self, key: TxKey) -> f64 {
        match self.snr_db {
            SnrSpec::Fixed(v) => v,
            SnrSpec::Range { lo, hi } if lo == hi => lo,
            SnrSpec::Range { lo, hi } => {
                let mut r =
                    rng::stream(self.seed, &[tag::SNR, key.round, key.sample, key.modality]);
                r.random_range(lo..=hi)
            }
        }
    }

    fn noise_stream(&self, key: TxKey) -> StreamRng {
        rng::stream(
            self.seed,
            &[
                tag::CHANNEL,
                key.round,
                key.sample,
                key.modality,
                key.attempt,
            ],
        )
    }

    /// Passes a block through the link.
    pub fn transmit(
        &self,
        s: &SymbolBlock,
        key: TxKey,
    ) -> Result<(SymbolBlock, TransmissionRecord)> {
        self.validate()?;
        let snr_db = self.snr_for(key);
        let mut r = self.noise_stream(key);
        let h = match self.model {
            ChannelModel::Awgn => [1.0, 0.0],
            ChannelModel::Rayleigh => {
                let sd = std::f64::consts::FRAC_1_SQRT_2;
                [sd * rng::normal(&mut r), sd * rng::normal(&mut r)]
            }
        };
        let (out, outage) = apply_channel(s, ChannelDraw { snr_db, h }, self.equalize, &mut r);
        Ok((
            out,
            TransmissionRecord {
                sample_id: key.sample,
                modality: key.modality,
                attempt: key.attempt,
                snr_db,
                model: self.model,
                outage,
                symbols: s.len(),
            },
        ))
    }
}

/// `h·s + n`, optionally followed by division by `h`. Returns the received
/// block and whether the attempt was an equalisation outage.
pub fn apply_channel(
    s: &SymbolBlock,
    draw: ChannelDraw,
    equalize: bool,
    r: &mut StreamRng,
) -> (SymbolBlock, bool) {
    let var = noise_variance(draw.snr_db);
    let sd = (var / 2.0).sqrt();
    let [hr, hi] = draw.h;
    let mag2 = hr * hr + hi * hi;
    let outage = equalize && mag2.sqrt() < OUTAGE_THRESHOLD;
    let symbols = s
        .symbols
        .iter()
        .map(|&[a, b]| {
            let (nr, ni) = if sd > 0.0 {
                (sd * rng::normal(r), sd * rng::normal(r))
            } else {
                (0.0, 0.0)
            };
            if outage {
                return [nr, ni];
            }
            let yr = hr * a - hi * b + nr;
            let yi = hr * b + hi * a + ni;
            if equalize {
                // y / h = y·conj(h) / |h|²
                [(yr * hr + yi * hi) / mag2, (yi * hr - yr * hi) / mag2]
            } else {
                [yr, yi]
            }
        })
        .collect();
    (
        SymbolBlock {
            symbols,
            power_scale: s.power_scale,
        },
        outage,
    )
}

/// What the receiver gets back for one feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Received {
    pub features: Vec<f64>,
    pub record: TransmissionRecord,
}

/// A link carrying real feature vectors. Implemented by [`ChannelConfig`];
/// tests can substitute [`FnLink`] to script received features.
pub trait Link: Sync {
    fn send(&self, z: &[f64], key: TxKey) -> Result<Received>;
}

impl Link for ChannelConfig {
    fn send(&self, z: &[f64], key: TxKey) -> Result<Received> {
        let block = to_symbols(z)?;
        let (rx, record) = self.transmit(&block, key)?;
        Ok(Received {
            features: from_symbols(&rx, z.len())?,
            record,
        })
    }
}

/// Link defined by a closure `(features, key) -> received features`.
pub struct FnLink<F>(pub F);

impl<F> Link for FnLink<F>
where
    F: Fn(&[f64], TxKey) -> Vec<f64> + Sync,
{
    fn send(&self, z: &[f64], key: TxKey) -> Result<Received> {
        let features = (self.0)(z, key);
        if features.len() != z.len() {
            return Err(Error::invalid("scripted link changed the feature width"));
        }
        Ok(Received {
            features,
            record: TransmissionRecord {
                sample_id: key.sample,
                modality: key.modality,
                attempt: key.attempt,
                snr_db: f64::INFINITY,
                model: ChannelModel::Awgn,
                outage: false,
                symbols: symbols_per_block(z.len()),
            },
        })
    }
}

/// Sends every row of `z` (row `i` is sample `sample_ids[i]`) through `link`.
pub fn send_rows(
    link: &dyn Link,
    z: &Matrix,
    sample_ids: &[usize],
    round: u64,
    modality: usize,
    attempt: usize,
) -> Result<(Matrix, Vec<TransmissionRecord>)> {
    if sample_ids.len() != z.rows() {
        return Err(Error::invalid("one sample id per row is required"));
    }
    let rows = par::map_range(z.rows(), |i| {
        link.send(
            z.row(i),
            TxKey {
                round,
                sample: sample_ids[i] as u64,
                modality: modality as u64,
                attempt: attempt as u64,
            },
        )
    });
    let mut data = Vec::with_capacity(z.rows() * z.cols());
    let mut records = Vec::with_capacity(z.rows());
    for r in rows {
        let r = r?;
        data.extend_from_slice(&r.features);
        records.push(r.record);
    }
    Ok((Matrix::from_vec(z.rows(), z.cols(), data)?, records))
}

/// Trace as CSV: `sample_id,modality,attempt,snr_db,model,outage_flag,symbols`.
pub fn trace_csv(records: &[TransmissionRecord]) -> String {
    let mut s = String::from("sample_id,modality,attempt,snr_db,model,outage_flag,symbols\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.sample_id,
            r.modality,
            r.attempt,
            r.snr_db,
            r.model.name(),
            u8::from(r.outage),
            r.symbols
        ));
    }
    s
}
