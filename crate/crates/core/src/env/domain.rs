use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EnvError;

/// Dynamics parameters that distinguish one domain from another.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainParams {
    /// kg
    pub mass: f64,
    /// Coulomb coefficient, in (0, 2].
    pub friction: f64,
    /// Signed centre-of-mass offset along the body axis, metres.
    pub com_offset: f64,
    /// Multiplier on applied horizontal force.
    pub actuator_gain: f64,
}

impl Default for DomainParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            friction: 0.8,
            com_offset: 0.0,
            actuator_gain: 1.0,
        }
    }
}

impl DomainParams {
    pub fn validate(&self) -> Result<(), EnvError> {
        let ok = self.mass > 0.0
            && self.friction > 0.0
            && self.friction <= 2.0
            && self.actuator_gain > 0.0
            && self.com_offset.is_finite()
            && self.mass.is_finite()
            && self.actuator_gain.is_finite();
        if ok {
            Ok(())
        } else {
            Err(EnvError::InvalidDomain(*self))
        }
    }
}

/// Ranges used for domain randomization during source training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainRanges {
    pub mass: (f64, f64),
    pub friction: (f64, f64),
    pub com_offset: (f64, f64),
    pub actuator_gain: (f64, f64),
}

impl Default for DomainRanges {
    fn default() -> Self {
        Self {
            mass: (0.8, 1.2),
            friction: (0.6, 1.0),
            com_offset: (-0.05, 0.05),
            actuator_gain: (0.9, 1.1),
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

impl DomainRanges {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DomainParams {
        DomainParams {
            mass: uniform(rng, self.mass),
            friction: uniform(rng, self.friction),
            com_offset: uniform(rng, self.com_offset),
            actuator_gain: uniform(rng, self.actuator_gain),
        }
    }
}

/// Uniform draw over the default source ranges.
pub fn sample_source_domain<R: Rng + ?Sized>(rng: &mut R) -> DomainParams {
    DomainRanges::default().sample(rng)
}

/// Source ranges with the centre-of-mass interval split and pushed outward by
/// `delta`: `[lo − Δ, hi − Δ] ∪ [lo + Δ, hi + Δ]`, each half chosen with equal
/// probability.
pub fn sample_com_transfer_domain<R: Rng + ?Sized>(rng: &mut R, ranges: &DomainRanges, delta: f64) -> DomainParams {
    let mut d = ranges.sample(rng);
    let (lo, hi) = ranges.com_offset;
    let shift = if rng.random_bool(0.5) { -delta } else { delta };
    d.com_offset = uniform(rng, (lo + shift, hi + shift));
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fixed_seed_reproduces_params() {
        let a = sample_source_domain(&mut ChaCha8Rng::seed_from_u64(11));
        let b = sample_source_domain(&mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
    }

    #[test]
    fn draws_stay_in_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let d = sample_source_domain(&mut rng);
            assert!((0.8..1.2).contains(&d.mass));
            assert!((0.6..1.0).contains(&d.friction));
            assert!((-0.05..0.05).contains(&d.com_offset));
            assert!((0.9..1.1).contains(&d.actuator_gain));
            d.validate().unwrap();
        }
    }

    #[test]
    fn com_offset_mean_is_centred() {
        // Uniform on [-0.05, 0.05]: sd = 0.1/sqrt(12) ≈ 0.0289, so the sample
        // mean over 1e5 draws has sd ≈ 9.1e-5; 0.002 is a >20σ bound.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_source_domain(&mut rng).com_offset).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.002, "mean {mean}");
    }

    #[test]
    fn com_transfer_lands_in_shifted_union() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ranges = DomainRanges::default();
        let (mut low, mut high) = (0, 0);
        for _ in 0..10_000 {
            let c = sample_com_transfer_domain(&mut rng, &ranges, 0.1).com_offset;
            let in_low = (-0.15..-0.05).contains(&c);
            let in_high = (0.05..0.15).contains(&c);
            assert!(in_low || in_high, "offset {c}");
            if in_low {
                low += 1
            } else {
                high += 1
            }
        }
        assert!((low as f64 / 10_000.0 - 0.5).abs() < 0.03);
        assert!(high > 0);
    }

    #[test]
    fn invalid_domains_rejected() {
        let d = DomainParams {
            mass: 0.0,
            ..DomainParams::default()
        };
        assert!(d.validate().is_err());
        let d = DomainParams {
            friction: 2.5,
            ..DomainParams::default()
        };
        assert!(d.validate().is_err());
    }
}
