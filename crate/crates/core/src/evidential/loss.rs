use crate::error::{Error, Result};
use crate::nn::special::{
    digamma_unchecked as psi, lgamma_unchecked as lgamma, trigamma_unchecked as psi1,
};

use super::opinion::DirichletParams;

/// Expected negative log-likelihood under the Dirichlet predictive,
/// `ψ(S) − ψ(γ_y)` with `γ = e + 1`, and its gradient in `e`.
pub fn acc_loss(e: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    if y >= e.len() {
        return Err(Error::invalid(format!(
            "label {y} out of range for {} classes",
            e.len()
        )));
    }
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite evidence"));
    }
    if e.iter().any(|v| *v < 0.0) {
        return Err(Error::invalid("evidence must be ≥ 0"));
    }
    let s = e.iter().sum::<f64>() + e.len() as f64;
    let gy = e[y] + 1.0;
    let loss = psi(s) - psi(gy);
    let ds = psi1(s);
    let mut grad = vec![ds; e.len()];
    grad[y] -= psi1(gy);
    Ok((loss, grad))
}

/// Replaces the true-class concentration with 1.
pub fn masked_alpha(alpha: &DirichletParams, y: usize) -> Result<DirichletParams> {
    if y >= alpha.n_classes() {
        return Err(Error::invalid(format!("label {y} out of range")));
    }
    let mut a = alpha.alpha.clone();
    a[y] = 1.0;
    Ok(DirichletParams { alpha: a })
}

/// `KL(Dir(γ) ‖ Dir(1, …, 1))` and its gradient in `γ`.
pub fn kl_uniform(alpha: &DirichletParams) -> Result<(f64, Vec<f64>)> {
    if alpha.alpha.iter().any(|a| !(*a >= 1.0) || !a.is_finite()) {
        return Err(Error::invalid("KL needs every concentration ≥ 1"));
    }
    let c = alpha.n_classes() as f64;
    let s = alpha.strength();
    let (psi_s, psi1_s) = (psi(s), psi1(s));
    let mut kl = lgamma(s) - lgamma(c);
    let mut grad = Vec::with_capacity(alpha.n_classes());
    for &a in &alpha.alpha {
        kl += (a - 1.0) * (psi(a) - psi_s) - lgamma(a);
        grad.push((a - 1.0) * psi1(a) - (s - c) * psi1_s);
    }
    // rounding can leave a tiny negative value at the uniform point
    Ok((kl.max(0.0), grad))
}

/// `λ_t = λ₀·exp(−ln(λ₀)·t/T)`: rises from `λ₀` at `t = 0` to 1 at `t = T`.
pub fn anneal_lambda(t: usize, total: usize, lambda0: f64) -> Result<f64> {
    if !(lambda0 > 0.0 && lambda0 < 1.0) {
        return Err(Error::invalid(format!("λ₀ = {lambda0} must lie in (0, 1)")));
    }
    if total == 0 {
        return Err(Error::invalid("annealing horizon must be ≥ 1"));
    }
    if t > total {
        return Err(Error::invalid(format!(
            "epoch {t} past the annealing horizon {total}"
        )));
    }
    if t == total {
        return Ok(1.0);
    }
    Ok(lambda0 * (-lambda0.ln() / total as f64 * t as f64).exp())
}

/// Loss `acc + λ·KL(masked)` for one evidence vector, with its gradient in `e`.
pub fn evidential_loss(e: &[f64], y: usize, lambda: f64) -> Result<(f64, f64, Vec<f64>)> {
    let (acc, mut grad) = acc_loss(e, y)?;
    let masked = masked_alpha(&DirichletParams::from_evidence(e)?, y)?;
    let (kl, gk) = kl_uniform(&masked)?;
    for (k, (g, d)) in grad.iter_mut().zip(gk).enumerate() {
        if k != y {
            *g += lambda * d;
        }
    }
    Ok((acc, kl, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acc_loss_at_zero_evidence() {
        assert!((acc_loss(&[0.0, 0.0], 1).unwrap().0 - 1.0).abs() < 1e-12);
        assert!((acc_loss(&[0.0; 3], 0).unwrap().0 - 1.5).abs() < 1e-12);
        assert!(acc_loss(&[0.0; 3], 3).is_err());
    }

    #[test]
    fn acc_gradient_matches_finite_differences() {
        let e = [0.5, 2.0, 0.1];
        for y in 0..3 {
            let (_, g) = acc_loss(&e, y).unwrap();
            for k in 0..3 {
                let h = 1e-5;
                let mut p = e;
                p[k] += h;
                let mut q = e;
                q[k] -= h;
                let fd = (acc_loss(&p, y).unwrap().0 - acc_loss(&q, y).unwrap().0) / (2.0 * h);
                assert!(
                    ((fd - g[k]) / g[k]).abs() < 1e-4,
                    "y={y} k={k}: {fd} vs {}",
                    g[k]
                );
            }
        }
    }

    #[test]
    fn acc_loss_prefers_true_class() {
        // with a fixed evidence budget, the loss is smallest when it all sits on y
        for budget in [1.0, 5.0, 20.0] {
            let concentrated = acc_loss(&[budget, 0.0, 0.0], 0).unwrap().0;
            for step in 0..=20 {
                let a = budget * step as f64 / 20.0;
                let rest = budget - a;
                let l = acc_loss(&[a, rest / 2.0, rest / 2.0], 0).unwrap().0;
                assert!(l >= 0.0);
                assert!(l >= concentrated - 1e-12);
            }
        }
    }

    #[test]
    fn masking() {
        let a = DirichletParams::new(vec![5.0, 2.0, 3.0]).unwrap();
        let m = masked_alpha(&a, 0).unwrap();
        assert_eq!(m.alpha, vec![1.0, 2.0, 3.0]);
        assert_eq!(masked_alpha(&m, 0).unwrap(), m);
        let ones = DirichletParams::new(vec![1.0; 4]).unwrap();
        assert_eq!(masked_alpha(&ones, 2).unwrap(), ones);
    }

    #[test]
    fn kl_is_zero_only_at_uniform() {
        assert_eq!(
            kl_uniform(&DirichletParams::new(vec![1.0; 4]).unwrap())
                .unwrap()
                .0,
            0.0
        );
        for a in [vec![1.0, 1.5], vec![2.0, 1.0, 1.0], vec![1.01, 1.0, 7.0]] {
            assert!(kl_uniform(&DirichletParams { alpha: a }).unwrap().0 > 0.0);
        }
        assert!(kl_uniform(&DirichletParams {
            alpha: vec![0.5, 1.0]
        })
        .is_err());
    }

    #[test]
    fn kl_matches_quadrature() {
        // Beta(3, 1) has density 3p² on [0, 1]; the uniform density is 1
        let n = 200_000;
        let h = 1.0 / n as f64;
        let integrand = |p: f64| {
            let f = 3.0 * p * p;
            if f > 0.0 {
                f * f.ln()
            } else {
                0.0
            }
        };
        // composite Simpson
        let mut acc = integrand(0.0) + integrand(1.0);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * integrand(i as f64 * h);
        }
        let quad = acc * h / 3.0;
        let (kl, _) = kl_uniform(&DirichletParams::new(vec![3.0, 1.0]).unwrap()).unwrap();
        assert!((kl - quad).abs() < 1e-6, "{kl} vs {quad}");
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let a = [1.7, 3.2, 1.0, 2.4];
        let (_, g) = kl_uniform(&DirichletParams { alpha: a.to_vec() }).unwrap();
        for k in 0..4 {
            let h = 1e-5;
            let mut p = a;
            p[k] += h;
            let mut q = a;
            q[k] += 2.0 * h;
            // one-sided where a sits on the boundary
            let f0 = kl_uniform(&DirichletParams { alpha: a.to_vec() })
                .unwrap()
                .0;
            let f1 = kl_uniform(&DirichletParams { alpha: p.to_vec() })
                .unwrap()
                .0;
            let f2 = kl_uniform(&DirichletParams { alpha: q.to_vec() })
                .unwrap()
                .0;
            let fd = (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * h);
            assert!(
                (fd - g[k]).abs() < 1e-6 * (1.0 + g[k].abs()),
                "k={k}: {fd} vs {}",
                g[k]
            );
        }
    }

    #[test]
    fn annealing() {
        let l0 = 0.01;
        assert!((anneal_lambda(0, 50, l0).unwrap() - l0).abs() < 1e-15);
        assert_eq!(anneal_lambda(50, 50, l0).unwrap(), 1.0);
        assert!((anneal_lambda(25, 50, l0).unwrap() - 0.1).abs() < 1e-14);
        let mut prev = 0.0;
        for t in 0..=50 {
            let v = anneal_lambda(t, 50, l0).unwrap();
            assert!(v > prev);
            prev = v;
        }
        assert!(anneal_lambda(0, 10, 1.0).is_err());
        assert!(anneal_lambda(0, 10, 0.0).is_err());
        assert!(anneal_lambda(11, 10, 0.5).is_err());
    }

    #[test]
    fn combined_gradient() {
        let e = [0.3, 1.9, 0.0, 4.0];
        let lambda = 0.37;
        let (_, _, g) = evidential_loss(&e, 1, lambda).unwrap();
        let f = |v: &[f64]| {
            let (a, k, _) = evidential_loss(v, 1, lambda).unwrap();
            a + lambda * k
        };
        for k in 0..4 {
            let h = 1e-5;
            let mut p = e;
            p[k] += h;
            let mut q = e;
            q[k] += 2.0 * h;
            let fd = (-3.0 * f(&e) + 4.0 * f(&p) - f(&q)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6, "k={k}: {fd} vs {}", g[k]);
        }
    }
}
