use serde::Serialize;

use crate::error::{Error, Result};

/// Subjective opinion over `C` classes: belief masses plus uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Opinion {
    pub belief: Vec<f64>,
    pub uncertainty: f64,
}

/// Dirichlet concentration parameters, every entry ≥ 1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirichletParams {
    pub alpha: Vec<f64>,
}

impl DirichletParams {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::invalid("Dirichlet needs at least one class"));
        }
        if let Some(a) = alpha.iter().find(|a| !(**a >= 1.0) || !a.is_finite()) {
            return Err(Error::invalid(format!("concentration {a} is below 1")));
        }
        Ok(Self { alpha })
    }

    pub fn from_evidence(e: &[f64]) -> Result<Self> {
        check_evidence(e)?;
        Ok(Self {
            alpha: e.iter().map(|v| v + 1.0).collect(),
        })
    }

    pub fn strength(&self) -> f64 {
        self.alpha.iter().sum()
    }

    pub fn n_classes(&self) -> usize {
        self.alpha.len()
    }
}

fn check_evidence(e: &[f64]) -> Result<()> {
    if e.is_empty() {
        return Err(Error::invalid("evidence vector is empty"));
    }
    if let Some(v) = e.iter().find(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("evidence {v} is not finite")));
    }
    if let Some(v) = e.iter().find(|v| **v < 0.0) {
        return Err(Error::invalid(format!("evidence {v} is negative")));
    }
    Ok(())
}

/// ReLU applied elementwise.
pub fn evidence_from_logits(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&v| v.max(0.0)).collect()
}

pub fn opinion_from_evidence(e: &[f64]) -> Result<Opinion> {
    check_evidence(e)?;
    let c = e.len() as f64;
    let s = e.iter().sum::<f64>() + c;
    Ok(Opinion {
        belief: e.iter().map(|v| v / s).collect(),
        uncertainty: c / s,
    })
}

impl Opinion {
    pub fn vacuous(n_classes: usize) -> Self {
        Self {
            belief: vec![0.0; n_classes],
            uncertainty: 1.0,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.belief.len()
    }

    /// Evidence implied by the opinion: `e = b·C/u`.
    pub fn evidence(&self) -> Vec<f64> {
        let k = self.n_classes() as f64 / self.uncertainty;
        self.belief.iter().map(|b| b * k).collect()
    }

    pub fn strength(&self) -> f64 {
        self.n_classes() as f64 / self.uncertainty
    }

    /// Most believed class; ties go to the lowest index.
    pub fn predicted_class(&self) -> usize {
        crate::synthdata::argmax(&self.belief)
    }

    pub fn validate(&self) -> Result<()> {
        if self.belief.iter().any(|b| !(*b >= 0.0)) {
            return Err(Error::invalid("negative belief mass"));
        }
        if !(self.uncertainty > 0.0 && self.uncertainty <= 1.0) {
            return Err(Error::invalid(format!(
                "uncertainty {} outside (0, 1]",
                self.uncertainty
            )));
        }
        let total = self.belief.iter().sum::<f64>() + self.uncertainty;
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("masses sum to {total}")));
        }
        Ok(())
    }
}

/// Reduced Dempster combination of two opinions.
///
/// In evidence terms this is plain addition: the fused opinion is exactly
/// the one built from `e1 + e2`.
pub fn fuse(o1: &Opinion, o2: &Opinion) -> Result<Opinion> {
    if o1.n_classes() != o2.n_classes() {
        return Err(Error::invalid(format!(
            "cannot fuse opinions over {} and {} classes",
            o1.n_classes(),
            o2.n_classes()
        )));
    }
    let (u1, u2) = (o1.uncertainty, o2.uncertainty);
    // u1 + u2 − u1·u2, evaluated on the ordered pair so that it is symmetric
    // bit for bit and equals 1 exactly when either side is vacuous
    let (lo, hi) = if u1 <= u2 { (u1, u2) } else { (u2, u1) };
    let d = lo + hi * (1.0 - lo);
    if !(d > 0.0) {
        return Err(Error::numeric("fusion denominator vanished"));
    }
    Ok(Opinion {
        belief: o1
            .belief
            .iter()
            .zip(&o2.belief)
            .map(|(b1, b2)| (b1 * u2 + b2 * u1) / d)
            .collect(),
        uncertainty: u1 * u2 / d,
    })
}

/// Left fold of [`fuse`].
pub fn fuse_all(opinions: &[Opinion]) -> Result<Opinion> {
    let (first, rest) = opinions
        .split_first()
        .ok_or_else(|| Error::invalid("nothing to fuse"))?;
    rest.iter().try_fold(first.clone(), |acc, o| fuse(&acc, o))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn random_opinion(r: &mut rng::StreamRng, c: usize) -> Opinion {
        let e: Vec<f64> = (0..c)
            .map(|_| {
                if r.random_bool(0.2) {
                    0.0
                } else {
                    r.random_range(0.0..20.0)
                }
            })
            .collect();
        opinion_from_evidence(&e).unwrap()
    }

    #[test]
    fn evidence_is_relu() {
        assert_eq!(evidence_from_logits(&[-1.0, 2.5, 0.0]), vec![0.0, 2.5, 0.0]);
        assert_eq!(evidence_from_logits(&[-3.0, -0.1]), vec![0.0, 0.0]);
        assert_eq!(evidence_from_logits(&[0.0, 4.0]), vec![0.0, 4.0]);
    }

    #[test]
    fn opinion_examples() {
        let o = opinion_from_evidence(&[0.0; 5]).unwrap();
        assert_eq!(o, Opinion::vacuous(5));
        let o = opinion_from_evidence(&[3.0, 0.0, 0.0]).unwrap();
        assert_eq!(o.belief, vec![0.5, 0.0, 0.0]);
        assert_eq!(o.uncertainty, 0.5);
        let o = opinion_from_evidence(&[2.0, 2.0]).unwrap();
        assert!(close(&o.belief, &[1.0 / 3.0; 2], 1e-15));
        assert!((o.uncertainty - 1.0 / 3.0).abs() < 1e-15);
        assert!(opinion_from_evidence(&[1.0, -0.5]).is_err());
    }

    #[test]
    fn vacuous_is_identity() {
        let o = opinion_from_evidence(&[1.5, 0.2, 7.0]).unwrap();
        assert_eq!(fuse(&o, &Opinion::vacuous(3)).unwrap(), o);
        assert_eq!(fuse(&Opinion::vacuous(3), &o).unwrap(), o);
        let all = fuse_all(&[
            Opinion::vacuous(3),
            Opinion::vacuous(3),
            Opinion::vacuous(3),
        ])
        .unwrap();
        assert_eq!(all, Opinion::vacuous(3));
    }

    #[test]
    fn fusing_equal_opinions() {
        let o = Opinion {
            belief: vec![0.6, 0.2],
            uncertainty: 0.2,
        };
        let f = fuse(&o, &o).unwrap();
        assert!(close(&f.belief, &[2.0 / 3.0, 2.0 / 9.0], 1e-15));
        assert!((f.uncertainty - 1.0 / 9.0).abs() < 1e-15);
        f.validate().unwrap();
        // u/(2−u) < u
        assert!((f.uncertainty - 0.2 / 1.8).abs() < 1e-15);
    }

    #[test]
    fn fusion_adds_evidence() {
        let mut r = rng::stream(3, &[]);
        for _ in 0..200 {
            let e1: Vec<f64> = (0..4).map(|_| r.random_range(0.0..10.0)).collect();
            let e2: Vec<f64> = (0..4).map(|_| r.random_range(0.0..10.0)).collect();
            let f = fuse(
                &opinion_from_evidence(&e1).unwrap(),
                &opinion_from_evidence(&e2).unwrap(),
            )
            .unwrap();
            let sum: Vec<f64> = e1.iter().zip(&e2).map(|(a, b)| a + b).collect();
            assert!(close(&f.evidence(), &sum, 1e-10));
        }
    }

    #[test]
    fn fusion_is_commutative_and_closed() {
        let mut r = rng::stream(4, &[]);
        for _ in 0..1000 {
            let a = random_opinion(&mut r, 4);
            let b = random_opinion(&mut r, 4);
            let ab = fuse(&a, &b).unwrap();
            let ba = fuse(&b, &a).unwrap();
            assert_eq!(ab, ba);
            ab.validate().unwrap();
        }
    }

    #[test]
    fn fusion_is_associative() {
        let mut r = rng::stream(5, &[]);
        for _ in 0..500 {
            let (a, b, c) = (
                random_opinion(&mut r, 3),
                random_opinion(&mut r, 3),
                random_opinion(&mut r, 3),
            );
            let left = fuse_all(&[a.clone(), b.clone(), c.clone()]).unwrap();
            let right = fuse(&a, &fuse(&b, &c).unwrap()).unwrap();
            assert!(close(&left.belief, &right.belief, 1e-9));
            assert!((left.uncertainty - right.uncertainty).abs() < 1e-9);
        }
    }

    #[test]
    fn fuse_all_edge_cases() {
        assert!(fuse_all(&[]).is_err());
        let o = opinion_from_evidence(&[1.0, 2.0]).unwrap();
        assert_eq!(fuse_all(std::slice::from_ref(&o)).unwrap(), o);
        assert!(fuse(&o, &Opinion::vacuous(3)).is_err());
    }

    #[test]
    fn dirichlet_validation() {
        assert!(DirichletParams::new(vec![1.0, 0.5]).is_err());
        let d = DirichletParams::from_evidence(&[0.0, 2.0]).unwrap();
        assert_eq!(d.alpha, vec![1.0, 3.0]);
        assert_eq!(d.strength(), 4.0);
    }
}
