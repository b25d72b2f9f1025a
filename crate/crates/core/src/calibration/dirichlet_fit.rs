//! Fitting per-class Dirichlet concentration parameters from sufficient
//! statistics.
//!
//! Two objectives, both expressed through mean log score vectors:
//!
//! * plain maximum likelihood, maximized with Minka's fixed point
//!   `α_j ← ψ⁻¹(ψ(Σα) + s_j)`;
//! * the regularized objective
//!   `(1-β)[ln Γ(Σα) - Σ ln Γ(α_j)] - β Σ(α_j-1) s̄_j + Σ(α_j-1) s_j - δ Σ α_j²`,
//!   where `s̄` is the statistic of every *other* class. The extra terms
//!   break the fixed-point form, so it is maximized by gradient ascent on
//!   `θ = ln α` with Armijo backtracking, which keeps `α > 0` and makes
//!   the accepted loss sequence non-decreasing.

use crate::domain::check_alpha;
use crate::error::{Error, Result};
use crate::numerics::{digamma_unchecked, inv_digamma, ln_gamma_unchecked};

pub const DEFAULT_MAX_ITERATIONS: usize = 1000;
pub const DEFAULT_LOSS_TOLERANCE: f64 = 1e-8;
/// Max-norm parameter change that ends the fixed-point iteration.
pub const DEFAULT_MLE_TOLERANCE: f64 = 1e-9;

const ARMIJO: f64 = 1e-4;
const LN_ALPHA_MIN: f64 = -18.420_680_743_952_367; // ln 1e-8
const LN_ALPHA_MAX: f64 = 18.420_680_743_952_367; // ln 1e8

/// Weights of the regularized objective and the optimizer budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizationConfig {
    /// Discrimination weight in `[0, 1)`.
    pub beta: f64,
    /// Weight of the `Σ α_j²` penalty, `>= 0`.
    pub delta: f64,
    pub max_iterations: usize,
    /// Stop once an accepted step improves the loss by less than this.
    pub loss_tolerance: f64,
}

impl Default for RegularizationConfig {
    fn default() -> Self {
        RegularizationConfig {
            beta: 0.0,
            delta: 0.0,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            loss_tolerance: DEFAULT_LOSS_TOLERANCE,
        }
    }
}

impl RegularizationConfig {
    pub fn new(beta: f64, delta: f64) -> Self {
        RegularizationConfig {
            beta,
            delta,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::domain(format!("beta must lie in [0, 1), got {}", self.beta)));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::domain(format!(
                "delta must be finite and >= 0, got {}",
                self.delta
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::domain("max_iterations must be positive"));
        }
        if self.loss_tolerance.is_nan() || self.loss_tolerance <= 0.0 {
            return Err(Error::domain("loss_tolerance must be positive"));
        }
        Ok(())
    }

    pub fn is_plain_mle(&self) -> bool {
        self.beta == 0.0 && self.delta == 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirichletFit {
    pub alpha: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value at the initial point and after every accepted
    /// iterate (per-sample log-likelihood for the MLE fit, the regularized
    /// loss otherwise).
    pub trace: Vec<f64>,
}

fn check_stats(name: &str, s: &[f64]) -> Result<()> {
    if s.len() < 2 {
        return Err(Error::domain(format!("{name} needs at least 2 components")));
    }
    if let Some(j) = s.iter().position(|v| !v.is_finite()) {
        return Err(Error::domain(format!("{name}[{j}] is not finite")));
    }
    Ok(())
}

/// Per-sample Dirichlet log-likelihood `ln Γ(Σα) - Σ ln Γ(α_j) + Σ(α_j-1) s_j`.
fn mean_log_likelihood(alpha: &[f64], s: &[f64]) -> f64 {
    let total: f64 = alpha.iter().sum();
    ln_gamma_unchecked(total) - alpha.iter().map(|&a| ln_gamma_unchecked(a)).sum::<f64>()
        + alpha.iter().zip(s).map(|(a, s)| (a - 1.0) * s).sum::<f64>()
}

/// The standard fitting loss: log-likelihood of `alpha` for `n` samples with
/// mean log vector `s`.
pub fn dirichlet_log_likelihood(alpha: &[f64], s: &[f64], n: u64) -> Result<f64> {
    if alpha.len() != s.len() {
        return Err(Error::shape("alpha and s differ in length"));
    }
    check_alpha(alpha)?;
    check_stats("s", s)?;
    Ok(n as f64 * mean_log_likelihood(alpha, s))
}

/// Starting point from the approximation `ψ(x) ≈ ln x - 1/(2x)`:
/// with `m_j ∝ exp(s_j)`, `Σα = (K-1) / (2 Σ m_j (ln m_j - s_j))`.
fn initial_alpha(s: &[f64]) -> Vec<f64> {
    let k = s.len() as f64;
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let m: Vec<f64> = w.iter().map(|v| v / total).collect();
    let spread: f64 = m.iter().zip(s).map(|(m, s)| m * (m.ln() - s)).sum();
    if spread > 1e-12 && spread.is_finite() {
        let precision = ((k - 1.0) / (2.0 * spread)).clamp(1e-3, 1e6);
        m.iter().map(|m| (m * precision).max(1e-6)).collect()
    } else {
        vec![1.0; s.len()]
    }
}

/// Maximum-likelihood Dirichlet fit from the mean log vector `s` of `n`
/// samples via Minka's fixed point. Stops when the max-norm parameter
/// change falls below `tol`; otherwise reports `converged = false` after
/// `max_iter` iterations.
pub fn fit_dirichlet_mle(s: &[f64], n: u64, max_iter: usize, tol: f64) -> Result<DirichletFit> {
    check_stats("s", s)?;
    if let Some(j) = s.iter().position(|&v| v >= 0.0) {
        return Err(Error::domain(format!(
            "s[{j}] = {} must be negative (mean log of a probability)",
            s[j]
        )));
    }
    if n < 2 {
        return Err(Error::domain(format!("need at least 2 samples, got {n}")));
    }
    let mut alpha = initial_alpha(s);
    let mut trace = vec![mean_log_likelihood(&alpha, s)];
    let mut next = vec![0.0; alpha.len()];
    for iter in 1..=max_iter {
        let psi_total = digamma_unchecked(alpha.iter().sum());
        let mut change: f64 = 0.0;
        for ((nx, &a), &sj) in next.iter_mut().zip(&alpha).zip(s) {
            *nx = inv_digamma(psi_total + sj)?;
            change = change.max((*nx - a).abs());
        }
        std::mem::swap(&mut alpha, &mut next);
        trace.push(mean_log_likelihood(&alpha, s));
        if change < tol {
            return Ok(DirichletFit {
                alpha,
                iterations: iter,
                converged: true,
                trace,
            });
        }
    }
    Ok(DirichletFit {
        alpha,
        iterations: max_iter,
        converged: false,
        trace,
    })
}

struct Objective<'a> {
    s: &'a [f64],
    sbar: Option<&'a [f64]>,
    beta: f64,
    delta: f64,
}

impl Objective<'_> {
    fn loss(&self, alpha: &[f64]) -> f64 {
        let total: f64 = alpha.iter().sum();
        let norm = ln_gamma_unchecked(total) - alpha.iter().map(|&a| ln_gamma_unchecked(a)).sum::<f64>();
        let mut value = (1.0 - self.beta) * norm;
        for (j, &a) in alpha.iter().enumerate() {
            value += (a - 1.0) * self.s[j] - self.delta * a * a;
            if let Some(sbar) = self.sbar {
                value -= self.beta * (a - 1.0) * sbar[j];
            }
        }
        value
    }

    /// Gradient with respect to `θ_j = ln α_j`.
    fn grad_log(&self, alpha: &[f64], out: &mut [f64]) {
        let psi_total = digamma_unchecked(alpha.iter().sum());
        for (j, (o, &a)) in out.iter_mut().zip(alpha).enumerate() {
            let mut g = (1.0 - self.beta) * (psi_total - digamma_unchecked(a)) + self.s[j] - 2.0 * self.delta * a;
            if let Some(sbar) = self.sbar {
                g -= self.beta * sbar[j];
            }
            *o = a * g;
        }
    }
}

/// Regularized loss. `β` multiplies only the normalizer and the `s̄` term;
/// the `s` term keeps full weight.
pub fn regularized_loss(alpha: &[f64], s: &[f64], sbar: &[f64], cfg: &RegularizationConfig) -> Result<f64> {
    if alpha.len() != s.len() || s.len() != sbar.len() {
        return Err(Error::shape("alpha, s and s̄ differ in length"));
    }
    check_alpha(alpha)?;
    check_stats("s", s)?;
    check_stats("s̄", sbar)?;
    cfg.validate()?;
    Ok(Objective {
        s,
        sbar: Some(sbar),
        beta: cfg.beta,
        delta: cfg.delta,
    }
    .loss(alpha))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maximizes the regularized loss. Without `sbar` the discrimination term
/// is dropped (`β` treated as 0). Starts from `init` or, by default, from
/// the maximum-likelihood fit.
pub fn fit_dirichlet_regularized(
    s: &[f64],
    sbar: Option<&[f64]>,
    cfg: &RegularizationConfig,
    init: Option<&[f64]>,
) -> Result<DirichletFit> {
    cfg.validate()?;
    check_stats("s", s)?;
    if let Some(sb) = sbar {
        check_stats("s̄", sb)?;
        if sb.len() != s.len() {
            return Err(Error::shape("s and s̄ differ in length"));
        }
    }
    let start = match init {
        Some(a) => {
            if a.len() != s.len() {
                return Err(Error::shape("init and s differ in length"));
            }
            check_alpha(a)?;
            a.to_vec()
        }
        None => fit_dirichlet_mle(s, 2, cfg.max_iterations, DEFAULT_MLE_TOLERANCE)?.alpha,
    };
    let objective = Objective {
        s,
        sbar,
        beta: if sbar.is_some() { cfg.beta } else { 0.0 },
        delta: cfg.delta,
    };

    let k = s.len();
    let mut theta: Vec<f64> = start.iter().map(|a| a.ln().clamp(LN_ALPHA_MIN, LN_ALPHA_MAX)).collect();
    let mut alpha: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
    let mut loss = objective.loss(&alpha);
    if !loss.is_finite() {
        return Err(Error::domain("regularized loss is not finite at the starting point"));
    }
    let mut grad = vec![0.0; k];
    objective.grad_log(&alpha, &mut grad);
    let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut step = 1.0 / gmax.max(1.0);

    let mut trace = vec![loss];
    let mut cand_theta = vec![0.0; k];
    let mut cand_alpha = vec![0.0; k];
    let mut cand_grad = vec![0.0; k];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        iterations += 1;
        let mut t = step;
        let accepted = loop {
            let mut moved = false;
            for j in 0..k {
                cand_theta[j] = (theta[j] + t * grad[j]).clamp(LN_ALPHA_MIN, LN_ALPHA_MAX);
                moved |= cand_theta[j] != theta[j];
                cand_alpha[j] = cand_theta[j].exp();
            }
            if !moved {
                break None;
            }
            let cand_loss = objective.loss(&cand_alpha);
            let predicted: f64 = (0..k).map(|j| grad[j] * (cand_theta[j] - theta[j])).sum();
            if cand_loss.is_finite() && cand_loss >= loss + ARMIJO * predicted {
                break Some(cand_loss);
            }
            t *= 0.5;
            if t < 1e-30 {
                break None;
            }
        };
        let Some(cand_loss) = accepted else {
            converged = true;
            break;
        };
        let improvement = cand_loss - loss;
        objective.grad_log(&cand_alpha, &mut cand_grad);

        // Barzilai–Borwein proposal for the next trial step.
        let ds: Vec<f64> = (0..k).map(|j| cand_theta[j] - theta[j]).collect();
        let dg: Vec<f64> = (0..k).map(|j| cand_grad[j] - grad[j]).collect();
        let curvature = dot(&ds, &dg);
        step = if curvature < 0.0 {
            (dot(&ds, &ds) / -curvature).clamp(1e-12, 1e12)
        } else {
            (2.0 * t).min(1e12)
        };

        std::mem::swap(&mut theta, &mut cand_theta);
        std::mem::swap(&mut alpha, &mut cand_alpha);
        std::mem::swap(&mut grad, &mut cand_grad);
        loss = cand_loss;
        trace.push(loss);
        if improvement < cfg.loss_tolerance {
            converged = true;
            break;
        }
    }

    Ok(DirichletFit {
        alpha,
        iterations,
        converged,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ln_gamma;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Gamma};

    /// Mean log vector of `n` draws from `Dirichlet(alpha)`, built from
    /// `rand_distr` gamma draws so the check is independent of the crate's
    /// sampler.
    fn sampled_stats(alpha: &[f64], n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let gammas: Vec<Gamma<f64>> = alpha.iter().map(|&a| Gamma::new(a, 1.0).unwrap()).collect();
        let mut acc = vec![0.0; alpha.len()];
        let mut y = vec![0.0; alpha.len()];
        for _ in 0..n {
            for (v, g) in y.iter_mut().zip(&gammas) {
                *v = g.sample(&mut rng);
            }
            let total: f64 = y.iter().sum();
            y.iter_mut().for_each(|v| *v /= total);
            for (a, v) in acc.iter_mut().zip(&y) {
                *a += v.max(crate::numerics::PROB_FLOOR).ln();
            }
        }
        acc.iter().map(|a| a / n as f64).collect()
    }

    fn rel_err(got: &[f64], want: &[f64]) -> f64 {
        got.iter()
            .zip(want)
            .map(|(g, w)| ((g - w) / w).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn mle_recovers_symmetric() {
        let s = sampled_stats(&[2.0, 2.0, 2.0], 100_000, 1);
        let fit = fit_dirichlet_mle(&s, 100_000, 1000, DEFAULT_MLE_TOLERANCE).unwrap();
        assert!(fit.converged);
        assert!(rel_err(&fit.alpha, &[2.0, 2.0, 2.0]) < 0.03, "{:?}", fit.alpha);
    }

    #[test]
    fn mle_recovers_skewed() {
        let s = sampled_stats(&[0.5, 5.0], 100_000, 2);
        let fit = fit_dirichlet_mle(&s, 100_000, 1000, DEFAULT_MLE_TOLERANCE).unwrap();
        assert!(rel_err(&fit.alpha, &[0.5, 5.0]) < 0.05, "{:?}", fit.alpha);
    }

    #[test]
    fn mle_degenerate_data_does_not_converge() {
        let s = vec![(1.0f64 / 3.0).ln(); 3];
        let fit = fit_dirichlet_mle(&s, 1000, 1000, DEFAULT_MLE_TOLERANCE).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.iterations, 1000);
    }

    #[test]
    fn mle_input_errors() {
        assert!(fit_dirichlet_mle(&[-1.0, f64::NAN], 10, 10, 1e-9).is_err());
        assert!(fit_dirichlet_mle(&[-1.0, 0.0], 10, 10, 1e-9).is_err());
        assert!(fit_dirichlet_mle(&[-1.0, -2.0], 1, 10, 1e-9).is_err());
    }

    #[test]
    fn mle_iterates_never_lose_likelihood() {
        for seed in 0..50u64 {
            let k = 2 + (seed % 4) as usize;
            let alpha: Vec<f64> = (0..k)
                .map(|j| 0.3 + ((seed * 7 + j as u64 * 13) % 40) as f64 / 4.0)
                .collect();
            let s = sampled_stats(&alpha, 2000, seed);
            let fit = fit_dirichlet_mle(&s, 2000, 1000, DEFAULT_MLE_TOLERANCE).unwrap();
            for w in fit.trace.windows(2) {
                assert!(
                    w[1] >= w[0] - 1e-12 * w[0].abs().max(1.0),
                    "seed {seed}: {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn mle_error_shrinks_with_sample_size() {
        let truth = [1.5, 3.0, 0.8];
        let mut errors = Vec::new();
        for n in [100usize, 1000, 10_000, 100_000] {
            let mut total = 0.0;
            for seed in 0..10u64 {
                let s = sampled_stats(&truth, n, 1000 + seed);
                let fit = fit_dirichlet_mle(&s, n as u64, 1000, DEFAULT_MLE_TOLERANCE).unwrap();
                total += rel_err(&fit.alpha, &truth);
            }
            errors.push(total / 10.0);
        }
        for w in errors.windows(2) {
            assert!(w[1] < w[0], "{errors:?}");
        }
    }

    /// Independent transcription of the standard loss for `n` samples.
    fn standard_loss_oracle(alpha: &[f64], s: &[f64], n: f64) -> f64 {
        let a0: f64 = alpha.iter().sum();
        let mut v = ln_gamma(a0).unwrap();
        for j in 0..alpha.len() {
            v -= ln_gamma(alpha[j]).unwrap();
            v += (alpha[j] - 1.0) * s[j];
        }
        n * v
    }

    #[test]
    fn loss_examples() {
        let s = [-0.7, -1.2];
        let sbar = [-2.0, -0.3];
        let v = regularized_loss(&[1.0, 1.0], &s, &sbar, &RegularizationConfig::new(0.0, 0.0)).unwrap();
        assert!(v.abs() < 1e-15);
        let v = regularized_loss(&[1.0, 1.0], &s, &sbar, &RegularizationConfig::new(0.0, 0.1)).unwrap();
        assert!((v + 0.2).abs() < 1e-15);
        assert!(regularized_loss(&[0.0, 1.0], &s, &sbar, &RegularizationConfig::default()).is_err());
    }

    #[test]
    fn loss_reduces_to_standard_loss() {
        use rand::Rng;
        let mut rng = rand::rngs::StdRng::seed_from_u64(77);
        for _ in 0..200 {
            let k = rng.random_range(2..6);
            let alpha: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..30.0)).collect();
            let s: Vec<f64> = (0..k).map(|_| -rng.random_range(0.01..10.0)).collect();
            let sbar: Vec<f64> = (0..k).map(|_| -rng.random_range(0.01..10.0)).collect();
            let n = rng.random_range(2..5000) as f64;
            let ours = regularized_loss(&alpha, &s, &sbar, &RegularizationConfig::default()).unwrap();
            let oracle = standard_loss_oracle(&alpha, &s, n) / n;
            assert!(
                (ours - oracle).abs() <= 1e-12 * oracle.abs().max(1.0),
                "{ours} vs {oracle}"
            );
            let via_ll = dirichlet_log_likelihood(&alpha, &s, n as u64).unwrap() / n;
            assert!((via_ll - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
        }
    }

    #[test]
    fn unregularized_fit_matches_mle() {
        let s = sampled_stats(&[1.0, 2.0, 3.0, 4.0, 5.0], 50_000, 3);
        let mle = fit_dirichlet_mle(&s, 50_000, 1000, DEFAULT_MLE_TOLERANCE).unwrap();
        let sbar = sampled_stats(&[3.0, 2.0, 1.0, 1.0, 1.0], 10_000, 4);
        let reg = fit_dirichlet_regularized(&s, Some(&sbar), &RegularizationConfig::default(), None).unwrap();
        for (a, b) in reg.alpha.iter().zip(&mle.alpha) {
            assert!((a - b).abs() < 1e-6, "{:?} vs {:?}", reg.alpha, mle.alpha);
        }
    }

    #[test]
    fn norm_penalty_shrinks_concentration() {
        let s = sampled_stats(&[12.0, 1.0, 1.0], 20_000, 5);
        let sbar = sampled_stats(&[1.0, 6.0, 6.0], 20_000, 6);
        let plain = fit_dirichlet_regularized(&s, Some(&sbar), &RegularizationConfig::default(), None).unwrap();
        let shrunk = fit_dirichlet_regularized(&s, Some(&sbar), &RegularizationConfig::new(0.0, 0.01), None).unwrap();
        let sq = |a: &[f64]| a.iter().map(|v| v * v).sum::<f64>();
        assert!(sq(&shrunk.alpha) < sq(&plain.alpha));
    }

    #[test]
    fn identical_complement_does_not_add_mass() {
        let s = sampled_stats(&[4.0, 2.0, 1.0], 20_000, 8);
        let plain = fit_dirichlet_regularized(&s, Some(&s), &RegularizationConfig::default(), None).unwrap();
        let disc = fit_dirichlet_regularized(&s, Some(&s), &RegularizationConfig::new(0.3, 0.0), None).unwrap();
        let mass = |a: &[f64]| a.iter().sum::<f64>();
        assert!(mass(&disc.alpha) <= mass(&plain.alpha) * (1.0 + 1e-6));
    }

    #[test]
    fn regularized_trace_is_monotone_and_positive() {
        use rand::Rng;
        let mut rng = rand::rngs::StdRng::seed_from_u64(99);
        for case in 0..50 {
            let k = rng.random_range(2..6);
            let truth: Vec<f64> = (0..k).map(|_| rng.random_range(0.3..15.0)).collect();
            let other: Vec<f64> = (0..k).map(|_| rng.random_range(0.3..15.0)).collect();
            let s = sampled_stats(&truth, 500, case);
            let sbar = sampled_stats(&other, 500, 1000 + case);
            let cfg = RegularizationConfig::new(rng.random_range(0.0..0.9), rng.random_range(0.0..0.1));
            let fit = fit_dirichlet_regularized(&s, Some(&sbar), &cfg, None).unwrap();
            assert!(fit.alpha.iter().all(|&a| a > 0.0));
            for w in fit.trace.windows(2) {
                assert!(w[1] >= w[0], "case {case}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn regularized_rejects_bad_config() {
        let s = [-1.0, -1.5];
        assert!(fit_dirichlet_regularized(&s, None, &RegularizationConfig::new(1.0, 0.0), None).is_err());
        assert!(fit_dirichlet_regularized(&s, None, &RegularizationConfig::new(0.0, -1.0), None).is_err());
        assert!(
            fit_dirichlet_regularized(&[-1.0, f64::INFINITY], None, &RegularizationConfig::default(), None).is_err()
        );
    }
}
