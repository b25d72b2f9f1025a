//! Seeded, counter-addressed random streams.
//!
//! Every stream is ChaCha8 (the `rand_chacha` block function, 8 rounds)
//! keyed by 32 bytes `seed_le64 || domain_le64 || 0u8 x 16`, with the 64-bit
//! ChaCha stream id set to a caller-chosen counter (for example an element
//! index). Derived values:
//!
//! * uniform in `[0, 1)`: `(next_u64 >> 11) * 2^-53`
//! * standard normal: Box–Muller cosine branch, `sqrt(-2 ln(1 - u1)) cos(2π u2)`
//! * `ln Gamma(a)`: Marsaglia–Tsang for `a >= 1`; for `a < 1`,
//!   `ln Gamma(a + 1) + ln(1 - u) / a`
//! * Dirichlet: independent log-gamma draws pushed through a stable softmax.
//!
//! A draw therefore depends only on `(seed, domain, stream)`, never on the
//! order in which elements are generated.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Stream domains keep different consumers of one seed independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Scene = 1,
    Expert = 2,
    SampleStack = 3,
    Subsample = 4,
}

pub struct StreamRng(ChaCha8Rng);

impl StreamRng {
    pub fn new(seed: u64, domain: Domain, stream: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream);
        StreamRng(rng)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Logarithm of a `Gamma(shape, 1)` draw. Working in log space keeps
    /// tiny shapes from underflowing to zero.
    pub fn ln_gamma_variate(&mut self, shape: f64) -> f64 {
        debug_assert!(shape > 0.0);
        if shape < 1.0 {
            let boosted = self.ln_gamma_variate(shape + 1.0);
            let u = 1.0 - self.uniform();
            return boosted + u.ln() / shape;
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.standard_normal();
            let t = 1.0 + c * x;
            if t <= 0.0 {
                continue;
            }
            let v = t * t * t;
            let u = 1.0 - self.uniform();
            if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
                return d.ln() + v.ln();
            }
        }
    }

    /// Fills `out` with a draw from `Dirichlet(alpha)`.
    pub fn dirichlet(&mut self, alpha: &[f64], out: &mut [f64]) {
        debug_assert_eq!(alpha.len(), out.len());
        let mut max = f64::NEG_INFINITY;
        for (o, &a) in out.iter_mut().zip(alpha) {
            *o = self.ln_gamma_variate(a);
            max = max.max(*o);
        }
        let mut total = 0.0;
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }

    /// Index drawn from a discrete distribution given by non-negative
    /// weights summing to one.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.uniform();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // Rounding left u above the cumulative sum: take the last class
        // with positive weight.
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}
