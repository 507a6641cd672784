//! Seeded random streams and the exact samplers used by the Gibbs
//! conditionals and the simulation design.

use nalgebra::DVector;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp, Gamma, StandardNormal};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};

/// A reproducible random stream identified by `(seed, stream_id)`.
///
/// Backed by ChaCha20, whose 64-bit stream selector gives independent,
/// platform-stable sequences for every `stream_id` under the same seed.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal upper tail, `1 - Phi(x)`, accurate far into the tail.
pub fn norm_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Inverse of [`norm_sf`].
fn norm_isf(q: f64) -> f64 {
    std::f64::consts::SQRT_2 * erfc_inv(2.0 * q)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Draws from `N(mu, sigma^2)` restricted to `[lower, upper]`; either bound
/// may be infinite.
///
/// Intervals covering the mode use rejection from the normal (or from a
/// uniform when the interval is short). One-sided regions use the inverse
/// CDF of the upper tail, falling back to exponential or uniform rejection
/// when the tail probability underflows or the interval is too narrow to
/// resolve.
pub fn truncated_normal<R: Rng + ?Sized>(mu: f64, sigma: f64, lower: f64, upper: f64, rng: &mut R) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("truncated normal needs sigma > 0, got {sigma}")));
    }
    if !mu.is_finite() || lower.is_nan() || upper.is_nan() {
        return Err(Error::Domain("truncated normal parameters must not be NaN".into()));
    }
    if !(lower < upper) {
        return Err(Error::Domain(format!("truncation bounds must satisfy lower < upper ({lower} >= {upper})")));
    }
    let a = (lower - mu) / sigma;
    let b = (upper - mu) / sigma;
    let z = if a >= 0.0 {
        right_tail(a, b, rng)
    } else if b <= 0.0 {
        -right_tail(-b, -a, rng)
    } else if norm_cdf(b) - norm_cdf(a) >= 0.3 {
        loop {
            let z = standard_normal(rng);
            if a <= z && z <= b {
                break z;
            }
        }
    } else {
        // short interval around the mode: density ratio is at least exp(-1/2 max(a^2, b^2))
        loop {
            let z = a + (b - a) * rng.random::<f64>();
            if rng.random::<f64>() <= (-0.5 * z * z).exp() {
                break z;
            }
        }
    };
    Ok((mu + sigma * z).clamp(lower, upper))
}

/// Standard normal restricted to `[a, b]` with `0 <= a < b <= inf`.
fn right_tail<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let qa = norm_sf(a);
    let qb = norm_sf(b);
    if qa > f64::MIN_POSITIVE && qa - qb > 1e-8 * qa {
        let q = qb + (qa - qb) * rng.random::<f64>();
        if q > 0.0 {
            return norm_isf(q).clamp(a, b);
        }
    }
    if (b - a) * a < 1.0 {
        // narrow: uniform proposal, acceptance exp(-(z^2 - a^2)/2) >= exp(-1 - (b-a)^2/2)
        loop {
            let z = a + (b - a) * rng.random::<f64>();
            if rng.random::<f64>() <= (-0.5 * (z - a) * (z + a)).exp() {
                return z;
            }
        }
    }
    // translated exponential proposal with the optimal rate
    let rate = 0.5 * (a + (a * a + 4.0).sqrt());
    let exp = Exp::new(rate).expect("positive rate");
    loop {
        let z = a + exp.sample(rng);
        if z <= b && rng.random::<f64>() <= (-0.5 * (z - rate).powi(2)).exp() {
            return z;
        }
    }
}

/// Draws `X` with density proportional to `x^(-shape-1) exp(-rate / x)`,
/// i.e. `1/X ~ Gamma(shape, rate)` with `rate` a rate, not a scale.
pub fn inverse_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0 && shape.is_finite() && rate > 0.0 && rate.is_finite()) {
        return Err(Error::Domain(format!("inverse gamma needs shape, rate > 0 (got {shape}, {rate})")));
    }
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(1.0 / g.sample(rng))
}

/// Bernoulli draw; `p = 0` never succeeds and `p = 1` always does.
pub fn bernoulli<R: Rng + ?Sized>(p: f64, rng: &mut R) -> Result<bool> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("success probability {p} outside [0, 1]")));
    }
    Ok(rng.random::<f64>() < p)
}

pub fn uniform<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    a + (b - a) * rng.random::<f64>()
}

/// Draws from `N(mean, variance * I)`.
pub fn normal_vec<R: Rng + ?Sized>(mean: &DVector<f64>, variance: f64, rng: &mut R) -> DVector<f64> {
    let sd = variance.sqrt();
    mean.map(|m| m + sd * standard_normal(rng))
}
