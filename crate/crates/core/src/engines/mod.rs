//! Shared inference machinery: derivative-free likelihood maximization and a
//! Metropolis-within-Gibbs MCMC engine. All randomness flows from caller
//! seeds through per-restart / per-chain substreams, so repeated runs are
//! bit-identical.

mod mcmc;
mod optimize;

pub use mcmc::{sample, sample_with_init, AdaptiveScalarStep, SampleChain};
pub use optimize::{maximize, maximize_with_budget};

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};

/// Transform applied to a parameter before optimization / proposal steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    /// Optimize log(x); requires a strictly positive lower bound.
    Log,
}

/// A named scalar parameter with explicit bounds.
#[derive(Debug, Clone)]
pub struct BoundedParam {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub transform: Transform,
}

impl BoundedParam {
    pub fn new(name: impl Into<String>, lower: f64, upper: f64) -> Self {
        BoundedParam { name: name.into(), lower, upper, transform: Transform::Identity }
    }

    pub fn log(name: impl Into<String>, lower: f64, upper: f64) -> Self {
        BoundedParam { name: name.into(), lower, upper, transform: Transform::Log }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lower <= self.upper) {
            return Err(Error::Argument(format!(
                "parameter {}: lower bound {} exceeds upper {}",
                self.name, self.lower, self.upper
            )));
        }
        if self.transform == Transform::Log && !(self.lower > 0.0) {
            return Err(Error::Argument(format!(
                "parameter {}: log transform requires lower > 0",
                self.name
            )));
        }
        Ok(())
    }

    /// True when the bounds pin the parameter to a single value.
    pub fn is_fixed(&self) -> bool {
        self.lower == self.upper
    }

    pub fn to_internal(&self, x: f64) -> f64 {
        match self.transform {
            Transform::Identity => x,
            Transform::Log => x.ln(),
        }
    }

    pub fn from_internal(&self, z: f64) -> f64 {
        let x = match self.transform {
            Transform::Identity => z,
            Transform::Log => z.exp(),
        };
        x.clamp(self.lower, self.upper)
    }

    pub fn internal_bounds(&self) -> (f64, f64) {
        (self.to_internal(self.lower), self.to_internal(self.upper))
    }
}

/// Derive an independent RNG substream from a base seed.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    // splitmix64 step keeps substreams decorrelated for adjacent indices
    let mut z = seed
        .wrapping_add(0x9E3779B97F4A7C15u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}
