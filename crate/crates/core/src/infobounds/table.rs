use crate::error::{Error, Result};

/// Tolerance on the total mass of a joint table.
const MASS_TOL: f64 = 1e-9;

/// Dense joint distribution over several discrete variables, row-major in
/// variable order.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTable {
    dims: Vec<usize>,
    p: Vec<f64>,
}

impl JointTable {
    pub fn new(dims: Vec<usize>, p: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::invalid("every variable needs a non-empty alphabet"));
        }
        if dims.iter().product::<usize>() != p.len() {
            return Err(Error::invalid("table size does not match alphabet sizes"));
        }
        if let Some(v) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!(
                "negative or non-finite probability {v}"
            )));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::invalid(format!("probabilities sum to {total}")));
        }
        Ok(Self { dims, p })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    fn check_vars(&self, vars: &[usize]) -> Result<()> {
        for (i, &v) in vars.iter().enumerate() {
            if v >= self.dims.len() {
                return Err(Error::invalid(format!("variable {v} out of range")));
            }
            if vars[..i].contains(&v) {
                return Err(Error::invalid(format!("variable {v} listed twice")));
            }
        }
        Ok(())
    }

    /// Marginal over `vars`, in the order given.
    pub fn marginal(&self, vars: &[usize]) -> Result<JointTable> {
        self.check_vars(vars)?;
        let dims: Vec<usize> = vars.iter().map(|&v| self.dims[v]).collect();
        let mut out = vec![0.0; dims.iter().product()];
        let mut idx = vec![0usize; self.dims.len()];
        for &pv in &self.p {
            if pv > 0.0 {
                let mut flat = 0;
                for &v in vars {
                    flat = flat * self.dims[v] + idx[v];
                }
                out[flat] += pv;
            }
            increment(&mut idx, &self.dims);
        }
        Ok(JointTable { dims, p: out })
    }

    /// Entropy of the marginal over `vars`, in bits.
    pub fn entropy(&self, vars: &[usize]) -> Result<f64> {
        Ok(self
            .marginal(vars)?
            .p
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| -v * v.log2())
            .sum())
    }
}

fn increment(idx: &mut [usize], dims: &[usize]) {
    for k in (0..idx.len()).rev() {
        idx[k] += 1;
        if idx[k] < dims[k] {
            return;
        }
        idx[k] = 0;
    }
}

/// `I(A;B)` in bits.
pub fn mutual_info(joint: &JointTable, a: &[usize], b: &[usize]) -> Result<f64> {
    conditional_mi(joint, a, b, &[])
}

/// `I(A;B|C)` in bits, as `Σ p(a,b,c)·log₂(p(a,b,c)·p(c) / (p(a,c)·p(b,c)))`.
pub fn conditional_mi(joint: &JointTable, a: &[usize], b: &[usize], c: &[usize]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid(
            "mutual information needs two non-empty groups",
        ));
    }
    let all: Vec<usize> = a.iter().chain(b).chain(c).copied().collect();
    joint.check_vars(&all)?;
    let abc = joint.marginal(&all)?;
    let ac_vars: Vec<usize> = a.iter().chain(c).copied().collect();
    let bc_vars: Vec<usize> = b.iter().chain(c).copied().collect();
    let ac = joint.marginal(&ac_vars)?;
    let bc = joint.marginal(&bc_vars)?;
    let pc = if c.is_empty() {
        None
    } else {
        Some(joint.marginal(c)?)
    };

    let size = |vars: &[usize]| vars.iter().map(|&v| joint.dims[v]).product::<usize>();
    let (na, nb, nc) = (size(a), size(b), size(c));
    let mut total = 0.0;
    for ia in 0..na {
        for ib in 0..nb {
            for ic in 0..nc {
                let p = abc.p[(ia * nb + ib) * nc + ic];
                if p <= 0.0 {
                    continue;
                }
                let p_c = pc.as_ref().map_or(1.0, |t| t.p[ic]);
                let p_ac = ac.p[ia * nc + ic];
                let p_bc = bc.p[ib * nc + ic];
                total += p * (p * p_c / (p_ac * p_bc)).log2();
            }
        }
    }
    Ok(total)
}
