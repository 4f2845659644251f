//! Small discrete chains `X′ ← Y → X → Z → Ẑ` and the sandwich bound.

use rand::Rng;
use serde::Serialize;

use super::table::{conditional_mi, mutual_info, JointTable};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::StreamRng;

const ROW_TOL: f64 = 1e-12;
const IDENTITY_TOL: f64 = 1e-10;
const BOUND_TOL: f64 = 1e-9;
/// Encoders whose objective is this close to the best count as optimal.
const TIE_TOL: f64 = 1e-12;
pub const MAX_X: usize = 5;

// variable positions in the joint table
const Y: usize = 0;
const X: usize = 1;
const XP: usize = 2;
#[cfg(test)]
const Z: usize = 3;
const ZH: usize = 4;

fn check_stochastic(name: &str, rows: &[Vec<f64>], width: usize) -> Result<()> {
    for (i, r) in rows.iter().enumerate() {
        if r.len() != width {
            return Err(Error::invalid(format!(
                "{name} row {i} has {} entries, expected {width}",
                r.len()
            )));
        }
        if r.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid(format!(
                "{name} row {i} has a negative entry"
            )));
        }
        let s: f64 = r.iter().sum();
        if (s - 1.0).abs() > ROW_TOL {
            return Err(Error::invalid(format!("{name} row {i} sums to {s}")));
        }
    }
    Ok(())
}

fn random_row(r: &mut StreamRng, n: usize) -> Vec<f64> {
    // normalised exponentials: uniform on the simplex
    let raw: Vec<f64> = (0..n)
        .map(|_| -r.random_range(f64::EPSILON..1.0).ln())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn random_rows(r: &mut StreamRng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| random_row(r, cols)).collect()
}

/// Conditional tables of the chain. Row `i` of a table is the distribution
/// of the child given parent value `i`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteChain {
    pub p_y: Vec<f64>,
    pub p_x_given_y: Vec<Vec<f64>>,
    pub p_xp_given_y: Vec<Vec<f64>>,
    pub p_z_given_x: Vec<Vec<f64>>,
    pub p_zh_given_z: Vec<Vec<f64>>,
}

impl DiscreteChain {
    /// `(|Y|, |X|, |X′|, |Z|, |Ẑ|)`.
    pub fn sizes(&self) -> [usize; 5] {
        [
            self.p_y.len(),
            self.p_x_given_y.first().map_or(0, Vec::len),
            self.p_xp_given_y.first().map_or(0, Vec::len),
            self.p_z_given_x.first().map_or(0, Vec::len),
            self.p_zh_given_z.first().map_or(0, Vec::len),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let [ny, nx, nxp, nz, nzh] = self.sizes();
        if ny == 0 || nx == 0 || nxp == 0 || nz == 0 || nzh == 0 {
            return Err(Error::invalid("empty alphabet in chain"));
        }
        check_stochastic("P(Y)", std::slice::from_ref(&self.p_y), ny)?;
        if self.p_x_given_y.len() != ny || self.p_xp_given_y.len() != ny {
            return Err(Error::invalid("view tables need one row per label"));
        }
        if self.p_z_given_x.len() != nx || self.p_zh_given_z.len() != nz {
            return Err(Error::invalid(
                "encoder/channel tables have the wrong number of rows",
            ));
        }
        check_stochastic("P(X|Y)", &self.p_x_given_y, nx)?;
        check_stochastic("P(X'|Y)", &self.p_xp_given_y, nxp)?;
        check_stochastic("P(Z|X)", &self.p_z_given_x, nz)?;
        check_stochastic("P(Zhat|Z)", &self.p_zh_given_z, nzh)
    }

    pub fn random(r: &mut StreamRng, sizes: [usize; 5]) -> Self {
        let [ny, nx, nxp, nz, nzh] = sizes;
        Self {
            p_y: random_row(r, ny),
            p_x_given_y: random_rows(r, ny, nx),
            p_xp_given_y: random_rows(r, ny, nxp),
            p_z_given_x: random_rows(r, nx, nz),
            p_zh_given_z: random_rows(r, nz, nzh),
        }
    }

    /// Joint over `(Y, X, X′, Z, Ẑ)`.
    pub fn joint(&self) -> Result<JointTable> {
        self.validate()?;
        let dims = self.sizes();
        let [ny, nx, nxp, nz, nzh] = dims;
        let mut p = Vec::with_capacity(dims.iter().product());
        for y in 0..ny {
            for x in 0..nx {
                for xp in 0..nxp {
                    for z in 0..nz {
                        for zh in 0..nzh {
                            p.push(
                                self.p_y[y]
                                    * self.p_x_given_y[y][x]
                                    * self.p_xp_given_y[y][xp]
                                    * self.p_z_given_x[x][z]
                                    * self.p_zh_given_z[z][zh],
                            );
                        }
                    }
                }
            }
        }
        JointTable::new(dims.to_vec(), p)
    }
}

/// The four identities that hold on every chain, with both sides.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityReport {
    pub i_zh_xp_given_y: f64,
    pub i_x_xp_given_y: f64,
    pub i_zh_y: f64,
    pub i_zh_xp_plus_i_zh_y_given_xp: f64,
    pub i_x_xp: f64,
    pub i_x_y_minus_gap: f64,
}

fn require(identity: &'static str, lhs: f64, rhs: f64) -> Result<()> {
    if (lhs - rhs).abs() > IDENTITY_TOL {
        return Err(Error::IdentityViolation { identity, lhs, rhs });
    }
    Ok(())
}

pub fn verify_markov_identities(chain: &DiscreteChain) -> Result<IdentityReport> {
    let j = chain.joint()?;
    let rep = IdentityReport {
        i_zh_xp_given_y: conditional_mi(&j, &[ZH], &[XP], &[Y])?,
        i_x_xp_given_y: conditional_mi(&j, &[X], &[XP], &[Y])?,
        i_zh_y: mutual_info(&j, &[ZH], &[Y])?,
        i_zh_xp_plus_i_zh_y_given_xp: mutual_info(&j, &[ZH], &[XP])?
            + conditional_mi(&j, &[ZH], &[Y], &[XP])?,
        i_x_xp: mutual_info(&j, &[X], &[XP])?,
        i_x_y_minus_gap: mutual_info(&j, &[X], &[Y])? - conditional_mi(&j, &[X], &[Y], &[XP])?,
    };
    require("I(Zhat;X'|Y) = 0", rep.i_zh_xp_given_y, 0.0)?;
    require("I(X;X'|Y) = 0", rep.i_x_xp_given_y, 0.0)?;
    require(
        "I(Zhat;Y) = I(Zhat;X') + I(Zhat;Y|X')",
        rep.i_zh_y,
        rep.i_zh_xp_plus_i_zh_y_given_xp,
    )?;
    require(
        "I(X;X') = I(X;Y) - I(X;Y|X')",
        rep.i_x_xp,
        rep.i_x_y_minus_gap,
    )?;
    Ok(rep)
}

/// A chain without its encoder: the sandwich check searches over every
/// deterministic `Z = f(X)`. The channel acts on `Z`, which shares the
/// alphabet of `X` so the identity map is one of the candidates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainTemplate {
    pub p_y: Vec<f64>,
    pub p_x_given_y: Vec<Vec<f64>>,
    pub p_xp_given_y: Vec<Vec<f64>>,
    pub p_zh_given_z: Vec<Vec<f64>>,
}

impl ChainTemplate {
    pub fn random(r: &mut StreamRng, ny: usize, nx: usize, nxp: usize, nzh: usize) -> Self {
        Self {
            p_y: random_row(r, ny),
            p_x_given_y: random_rows(r, ny, nx),
            p_xp_given_y: random_rows(r, ny, nxp),
            p_zh_given_z: random_rows(r, nx, nzh),
        }
    }

    pub fn n_x(&self) -> usize {
        self.p_x_given_y.first().map_or(0, Vec::len)
    }

    /// Chain obtained by plugging in a deterministic encoder.
    pub fn with_encoder(&self, f: &[usize]) -> DiscreteChain {
        let nz = self.p_zh_given_z.len();
        DiscreteChain {
            p_y: self.p_y.clone(),
            p_x_given_y: self.p_x_given_y.clone(),
            p_xp_given_y: self.p_xp_given_y.clone(),
            p_z_given_x: f
                .iter()
                .map(|&z| (0..nz).map(|k| f64::from(u8::from(k == z))).collect())
                .collect(),
            p_zh_given_z: self.p_zh_given_z.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        let nx = self.n_x();
        if nx > MAX_X {
            return Err(Error::invalid(format!(
                "|X| = {nx} exceeds the enumeration bound {MAX_X}"
            )));
        }
        if self.p_zh_given_z.len() != nx {
            return Err(Error::invalid(format!(
                "channel input alphabet {} must equal |X| = {nx}",
                self.p_zh_given_z.len()
            )));
        }
        self.with_encoder(&(0..nx).collect::<Vec<_>>()).validate()
    }
}

/// Outcome of the exhaustive sandwich check, in bits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiReport {
    pub i_x_y: f64,
    pub i_x_xp: f64,
    pub augmentation_gap: f64,
    /// Channel loss of the identity encoder, `I(X;X′) − I(Ẑ;X′)`.
    pub eps_c: f64,
    /// Channel loss measured at the SSL-optimal encoder.
    pub eps_c_at_optimum: f64,
    pub ssl_objective: f64,
    pub i_zh_y_ssl: f64,
    pub i_zh_y_sup: f64,
    pub lower_bound: f64,
    pub slack_upper: f64,
    pub slack_lower: f64,
    pub ssl_encoder: Vec<usize>,
    pub sup_encoder: Vec<usize>,
    pub noiseless: bool,
}

struct Candidate {
    f: Vec<usize>,
    i_zh_xp: f64,
    i_zh_y: f64,
    i_z_xp: f64,
    h_zh_given_y: f64,
}

/// Scores one encoder via the reduced joint `p(y, x′, z, ẑ)`.
fn score(t: &ChainTemplate, f: &[usize]) -> Result<Candidate> {
    let ny = t.p_y.len();
    let nxp = t.p_xp_given_y[0].len();
    let nz = t.p_zh_given_z.len();
    let nzh = t.p_zh_given_z[0].len();
    let mut p = vec![0.0; ny * nxp * nz * nzh];
    for y in 0..ny {
        for (x, &z) in f.iter().enumerate() {
            let pyx = t.p_y[y] * t.p_x_given_y[y][x];
            if pyx == 0.0 {
                continue;
            }
            for xp in 0..nxp {
                let base = pyx * t.p_xp_given_y[y][xp];
                for zh in 0..nzh {
                    p[((y * nxp + xp) * nz + z) * nzh + zh] += base * t.p_zh_given_z[z][zh];
                }
            }
        }
    }
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    let j = JointTable::new(vec![ny, nxp, nz, nzh], p)?;
    let i_zh_y = mutual_info(&j, &[3], &[0])?;
    Ok(Candidate {
        f: f.to_vec(),
        i_zh_xp: mutual_info(&j, &[3], &[1])?,
        i_zh_y,
        i_z_xp: mutual_info(&j, &[2], &[1])?,
        h_zh_given_y: j.entropy(&[3])? - i_zh_y,
    })
}

fn all_maps(nx: usize, nz: usize) -> Vec<Vec<usize>> {
    let total = nz.pow(nx as u32);
    (0..total)
        .map(|mut k| {
            let mut f = vec![0; nx];
            for v in f.iter_mut() {
                *v = k % nz;
                k /= nz;
            }
            f
        })
        .collect()
}

/// Best candidate by `key`, breaking near-ties by the smallest `H(Ẑ|Y)` and
/// then by enumeration order.
fn pick(cands: &[Candidate], key: impl Fn(&Candidate) -> f64) -> &Candidate {
    let best = cands.iter().map(&key).fold(f64::NEG_INFINITY, f64::max);
    cands
        .iter()
        .filter(|c| key(c) >= best - TIE_TOL)
        .fold(None::<&Candidate>, |acc, c| match acc {
            Some(a) if a.h_zh_given_y <= c.h_zh_given_y => Some(a),
            _ => Some(c),
        })
        .expect("at least one encoder")
}

fn is_identity_channel(t: &ChainTemplate) -> bool {
    t.p_zh_given_z.len() == t.p_zh_given_z[0].len()
        && t.p_zh_given_z.iter().enumerate().all(|(i, r)| {
            r.iter()
                .enumerate()
                .all(|(j, &v)| v == f64::from(u8::from(i == j)))
        })
}

/// Enumerates every deterministic encoder, picks the SSL optimum (max
/// `I(Ẑ;X′)`) and the supervised optimum (max `I(Ẑ;Y)`), and checks
/// `I(X;Y) ≥ I(Ẑ_ssl;Y) ≥ I(X;Y) − I(X;Y|X′) − ε_c`. On a noiseless channel
/// it also checks that the supervised optimum keeps all of `I(X;Y)`.
pub fn sandwich_check(t: &ChainTemplate) -> Result<MiReport> {
    t.validate()?;
    let nx = t.n_x();
    let identity: Vec<usize> = (0..nx).collect();
    let base = t.with_encoder(&identity).joint()?;
    let i_x_y = mutual_info(&base, &[X], &[Y])?;
    let i_x_xp = mutual_info(&base, &[X], &[XP])?;
    let gap = conditional_mi(&base, &[X], &[Y], &[XP])?;
    let eps_c = i_x_xp - mutual_info(&base, &[ZH], &[XP])?;

    let maps = all_maps(nx, nx);
    let cands = par::map_slice(&maps, |f| score(t, f))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let ssl = pick(&cands, |c| c.i_zh_xp);
    let sup = pick(&cands, |c| c.i_zh_y);

    let lower_bound = i_x_y - gap - eps_c;
    let rep = MiReport {
        i_x_y,
        i_x_xp,
        augmentation_gap: gap,
        eps_c,
        eps_c_at_optimum: ssl.i_z_xp - ssl.i_zh_xp,
        ssl_objective: ssl.i_zh_xp,
        i_zh_y_ssl: ssl.i_zh_y,
        i_zh_y_sup: sup.i_zh_y,
        lower_bound,
        slack_upper: i_x_y - ssl.i_zh_y,
        slack_lower: ssl.i_zh_y - lower_bound,
        ssl_encoder: ssl.f.clone(),
        sup_encoder: sup.f.clone(),
        noiseless: is_identity_channel(t),
    };
    if rep.slack_upper < -BOUND_TOL {
        return Err(Error::IdentityViolation {
            identity: "I(X;Y) >= I(Zhat_ssl;Y)",
            lhs: i_x_y,
            rhs: ssl.i_zh_y,
        });
    }
    if rep.slack_lower < -BOUND_TOL {
        return Err(Error::IdentityViolation {
            identity: "I(Zhat_ssl;Y) >= I(X;Y) - gap - eps_c",
            lhs: ssl.i_zh_y,
            rhs: lower_bound,
        });
    }
    if rep.noiseless && (sup.i_zh_y - i_x_y).abs() > BOUND_TOL {
        return Err(Error::IdentityViolation {
            identity: "I(Zhat_sup;Y) = I(X;Y) on a perfect channel",
            lhs: sup.i_zh_y,
            rhs: i_x_y,
        });
    }
    Ok(rep)
}
