//! Inverted dropout masks.
//!
//! Kept units are scaled by `1/(1-p)` when the mask is applied, so the same
//! code path serves training and Monte Carlo evaluation. A mask is a pure
//! function of `(seed, stream_id, step, pass_index)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutSpec {
    pub p: f64,
    pub stream_id: u64,
}

impl DropoutSpec {
    pub fn new(p: f64, stream_id: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout_p", format!("must lie in [0, 1), got {p}")));
        }
        Ok(Self { p, stream_id })
    }
}

/// Whether dropout is active during a forward pass.
///
/// `Train` and `McEval` sample masks identically: MC-dropout evaluation never
/// disables dropout. `Off` gives the deterministic expectation network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    McEval,
    Off,
}

/// Identifies one stochastic forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PassKey {
    pub seed: u64,
    pub step: u64,
    pub pass_index: u64,
}

impl PassKey {
    pub fn new(seed: u64, step: u64, pass_index: u64) -> Self {
        Self {
            seed,
            step,
            pass_index,
        }
    }
}

/// Draws a row-major mask of `len` multipliers, each either `0` or `1/(1-p)`.
pub fn sample_mask(spec: DropoutSpec, key: PassKey, len: usize) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&spec.p) {
        return Err(Error::invalid("dropout_p", format!("must lie in [0, 1), got {}", spec.p)));
    }
    if spec.p == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let scale = 1.0 / (1.0 - spec.p);
    let mut rng = rng::rng_from(&[key.seed, spec.stream_id, key.step, key.pass_index]);
    Ok((0..len)
        .map(|_| if rng.random::<f64>() >= spec.p { scale } else { 0.0 })
        .collect())
}
