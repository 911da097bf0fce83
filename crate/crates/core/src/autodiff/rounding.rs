//! Rounding operators for straight-through estimation.
//!
//! A rounding node has a forward function (what values flow forward) and a
//! backward substitute (whose derivative multiplies the incoming adjoint).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Round half up: `floor(v + 0.5)`. Ties always go towards +inf so the
/// rounded translation is identical on every platform.
#[inline]
pub fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Parameter(format!(
            "soft rounding temperature must be positive, got {t}"
        )));
    }
    Ok(())
}

/// Soft rounding `sigma_T` in normalized form: integers are fixed points,
/// `T -> 0` approaches hard rounding and `T = 1` is close to the identity.
pub fn soft_round(x: f64, temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    Ok(soft_round_unchecked(x, temperature))
}

/// Derivative of [`soft_round`] with respect to `x`.
pub fn soft_round_derivative(x: f64, temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    Ok(soft_round_derivative_unchecked(x, temperature))
}

#[inline]
fn soft_round_unchecked(x: f64, t: f64) -> f64 {
    let fl = x.floor();
    let frac = x - fl;
    let lo = sigmoid(-1.0 / t);
    let norm = (0.5 / t).tanh();
    fl + (sigmoid((2.0 * frac - 1.0) / t) - lo) / norm
}

#[inline]
fn soft_round_derivative_unchecked(x: f64, t: f64) -> f64 {
    let frac = x - x.floor();
    let s = sigmoid((2.0 * frac - 1.0) / t);
    let norm = (0.5 / t).tanh();
    2.0 / t * s * (1.0 - s) / norm
}

/// What the rounding node computes in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ForwardRounding {
    Identity,
    HardRound,
    SoftRound {
        temperature: f64,
    },
    /// `floor(v + u)` with `u ~ U[0, 1)`; stays on the lattice.
    Stochastic,
}

/// Whose derivative replaces the rounding derivative in the backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackwardRounding {
    Identity,
    SoftRoundDerivative { temperature: f64 },
    HardZero,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundingConfig {
    pub forward: ForwardRounding,
    pub backward: BackwardRounding,
}

impl Default for RoundingConfig {
    fn default() -> Self {
        Self::STRAIGHT_THROUGH
    }
}

impl RoundingConfig {
    /// Hard rounding forward, identity backward.
    pub const STRAIGHT_THROUGH: RoundingConfig = RoundingConfig {
        forward: ForwardRounding::HardRound,
        backward: BackwardRounding::Identity,
    };

    /// No rounding at all: the continuous counterpart.
    pub const CONTINUOUS: RoundingConfig = RoundingConfig {
        forward: ForwardRounding::Identity,
        backward: BackwardRounding::Identity,
    };

    pub fn validate(&self) -> Result<()> {
        let temps = [
            match self.forward {
                ForwardRounding::SoftRound { temperature } => Some(temperature),
                _ => None,
            },
            match self.backward {
                BackwardRounding::SoftRoundDerivative { temperature } => Some(temperature),
                _ => None,
            },
        ];
        for t in temps.into_iter().flatten() {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Parameter(format!(
                    "soft rounding temperature {t} outside (0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// True when every forward output lies on the lattice.
    pub fn stays_on_lattice(&self) -> bool {
        matches!(
            self.forward,
            ForwardRounding::HardRound | ForwardRounding::Stochastic
        )
    }

    /// Forward value for a pre-quantized input expressed in lattice units.
    /// `noise` is only consulted by the stochastic mode.
    #[inline]
    pub fn forward_lattice(&self, v: f64, noise: impl FnOnce() -> f64) -> f64 {
        match self.forward {
            ForwardRounding::Identity => v,
            ForwardRounding::HardRound => round_half_up(v),
            ForwardRounding::SoftRound { temperature } => soft_round_unchecked(v, temperature),
            ForwardRounding::Stochastic => (v + noise()).floor(),
        }
    }

    /// Backward multiplier at a pre-quantized input in lattice units.
    #[inline]
    pub fn backward_lattice(&self, v: f64) -> f64 {
        match self.backward {
            BackwardRounding::Identity => 1.0,
            BackwardRounding::SoftRoundDerivative { temperature } => {
                soft_round_derivative_unchecked(v, temperature)
            }
            BackwardRounding::HardZero => 0.0,
        }
    }
}
