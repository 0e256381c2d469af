//! Photometric domains: per-channel gain and bias, a gamma curve and
//! additive Gaussian sensor noise applied to clean renders.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub color_gain: [f64; 3],
    pub color_bias: [f64; 3],
    pub gamma: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl DomainSpec {
    /// Domain that leaves clean renders untouched.
    pub fn identity(name: impl Into<String>, seed: u64) -> Self {
        Self {
            name: name.into(),
            color_gain: [1.0; 3],
            color_bias: [0.0; 3],
            gamma: 1.0,
            noise_std: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains([',', '/', '\\', '"', '\n']) {
            return Err(Error::Config(format!("bad domain name {:?}", self.name)));
        }
        if self.color_gain.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(Error::Config(format!(
                "domain {}: color_gain must be positive, got {:?}",
                self.name, self.color_gain
            )));
        }
        if self.color_bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Config(format!(
                "domain {}: non-finite color_bias",
                self.name
            )));
        }
        if !(0.5..=2.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "domain {}: gamma {} outside [0.5, 2]",
                self.name, self.gamma
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config(format!(
                "domain {}: noise_std must be >= 0, got {}",
                self.name, self.noise_std
            )));
        }
        Ok(())
    }

    /// Corrupt one clean CHW image in place:
    /// `clamp(gain * x^gamma + bias + noise, 0, 1)`, quantized to 8 bits.
    /// `sample` selects the noise stream.
    pub fn apply(&self, image: &mut [f32], sample: u64) {
        let hw = image.len() / 3;
        let mut rng = ChaCha8Rng::seed_from_u64(super::mix_seed(self.seed, sample));
        for (c, plane) in image.chunks_mut(hw).enumerate() {
            for v in plane {
                let mut y = self.color_gain[c] * (*v as f64).powf(self.gamma) + self.color_bias[c];
                if self.noise_std > 0.0 {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    y += self.noise_std * n;
                }
                *v = super::quantize(y);
            }
        }
    }
}

/// Four domains with strong, distinct photometric shifts: a neutral
/// reference, a warm high-gamma cast, a dim low-contrast sensor and a
/// washed-out overexposure.
pub fn default_domains() -> Vec<DomainSpec> {
    vec![
        DomainSpec {
            name: "neutral".into(),
            color_gain: [1.0, 1.0, 1.0],
            color_bias: [0.0, 0.0, 0.0],
            gamma: 1.0,
            noise_std: 0.02,
            seed: 11,
        },
        DomainSpec {
            name: "warm".into(),
            color_gain: [1.2, 0.85, 0.5],
            color_bias: [0.1, 0.0, -0.05],
            gamma: 0.6,
            noise_std: 0.03,
            seed: 23,
        },
        DomainSpec {
            name: "dim".into(),
            color_gain: [0.35, 0.4, 0.5],
            color_bias: [0.02, 0.03, 0.06],
            gamma: 1.8,
            noise_std: 0.02,
            seed: 37,
        },
        DomainSpec {
            name: "washed".into(),
            color_gain: [0.45, 0.5, 0.45],
            color_bias: [0.5, 0.45, 0.5],
            gamma: 0.8,
            noise_std: 0.04,
            seed: 53,
        },
    ]
}
