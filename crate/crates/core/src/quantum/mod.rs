//! Werner-state fidelity model.
//!
//! Every Bell pair in the simulator is tracked as a Werner state: the target
//! Bell state mixed with white noise. A single scalar (the singlet fraction)
//! describes it completely, which is what makes network-scale simulation
//! cheap. The closed forms here are checked against the brute-force density
//! matrix simulation in [`oracle`].

pub mod oracle;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower bound of the Werner fidelity range (maximally mixed state).
pub const FIDELITY_FLOOR: f64 = 0.25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FidelityError {
    #[error("fidelity {0} outside [0.25, 1.0]")]
    OutOfRange(f64),
    #[error("werner parameter {0} outside [0, 1]")]
    WernerOutOfRange(f64),
}

/// Singlet fraction of a Werner state with respect to the target Bell state.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Fidelity(f64);

impl Fidelity {
    pub const ONE: Fidelity = Fidelity(1.0);
    pub const FLOOR: Fidelity = Fidelity(FIDELITY_FLOOR);

    /// Strict constructor. Rejects anything outside `[0.25, 1]`.
    pub fn new(value: f64) -> Result<Self, FidelityError> {
        if value.is_finite() && (FIDELITY_FLOOR..=1.0).contains(&value) {
            Ok(Fidelity(value))
        } else {
            Err(FidelityError::OutOfRange(value))
        }
    }

    /// Lenient constructor used on computed values. Values under the floor are
    /// clamped to 1/4 with a warning; tiny overshoots above 1 from rounding
    /// are clamped silently.
    pub fn clamped(value: f64) -> Self {
        if value.is_nan() || value < FIDELITY_FLOOR {
            if value < FIDELITY_FLOOR - 1e-12 || value.is_nan() {
                log::warn!("fidelity {value} below 1/4, clamping");
            }
            Fidelity(FIDELITY_FLOOR)
        } else if value > 1.0 {
            Fidelity(1.0)
        } else {
            Fidelity(value)
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

// Values are never NaN, so bitwise equality is a total equivalence.
impl Eq for Fidelity {}

impl std::hash::Hash for Fidelity {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.0.to_bits().hash(state);
    }
}

impl TryFrom<f64> for Fidelity {
    type Error = FidelityError;
    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Fidelity::new(v)
    }
}

impl From<Fidelity> for f64 {
    fn from(f: Fidelity) -> f64 {
        f.0
    }
}

impl fmt::Display for Fidelity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}", self.0)
    }
}

/// Total depolarizing rate of a pair in 1/s. Rates of the two halves add.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
pub struct DecayRate(pub f64);

impl DecayRate {
    pub const ZERO: DecayRate = DecayRate(0.0);
}

impl Eq for DecayRate {}

impl std::hash::Hash for DecayRate {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.0.to_bits().hash(state);
    }
}

/// Werner mixing parameter `w`, related to fidelity by `F = (1 + 3w) / 4`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct WernerParam(f64);

impl WernerParam {
    pub fn new(w: f64) -> Result<Self, FidelityError> {
        if w.is_finite() && (0.0..=1.0).contains(&w) {
            Ok(WernerParam(w))
        } else {
            Err(FidelityError::WernerOutOfRange(w))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn to_fidelity(self) -> Fidelity {
        Fidelity::clamped((1.0 + 3.0 * self.0) / 4.0)
    }
}

pub fn werner_from_fidelity(f: Fidelity) -> WernerParam {
    WernerParam(((4.0 * f.0 - 1.0) / 3.0).clamp(0.0, 1.0))
}

/// Fidelity of the pair produced by swapping two Werner pairs. The Werner
/// parameters multiply.
pub fn swap_fidelity(f1: Fidelity, f2: Fidelity) -> Fidelity {
    let w = werner_from_fidelity(f1).0 * werner_from_fidelity(f2).0;
    Fidelity::clamped((1.0 + 3.0 * w) / 4.0)
}

/// Result of one purification round on two Werner pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PurifyOutcome {
    /// Probability that both ends observe even parity.
    pub p_success: f64,
    /// Fidelity of the kept pair, conditioned on success.
    pub fidelity: Fidelity,
}

/// One round of the bilateral-CNOT parity check, twirled back to Werner form.
pub fn purify_outcome(f1: Fidelity, f2: Fidelity) -> PurifyOutcome {
    let (a, b) = (f1.0, f2.0);
    let (na, nb) = (1.0 - a, 1.0 - b);
    let p = a * b + (a * nb + na * b) / 3.0 + 5.0 * na * nb / 9.0;
    let good = a * b + na * nb / 9.0;
    PurifyOutcome {
        p_success: p,
        fidelity: Fidelity::clamped(good / p),
    }
}

/// Exponential depolarization toward the maximally mixed state.
///
/// `t_mem` of `f64::INFINITY` means a perfect memory.
pub fn decohere(f0: Fidelity, dt_s: f64, t_mem_s: f64) -> Fidelity {
    debug_assert!(dt_s >= 0.0);
    debug_assert!(t_mem_s > 0.0);
    if dt_s == 0.0 || t_mem_s.is_infinite() {
        return f0;
    }
    decohere_by_rate(f0, dt_s, 1.0 / t_mem_s)
}

/// Same as [`decohere`] but parameterised by a total depolarizing rate, which
/// is what a pair with both halves in lossy memories sees (rates add).
pub fn decohere_by_rate(f0: Fidelity, dt_s: f64, rate_per_s: f64) -> Fidelity {
    if dt_s <= 0.0 || rate_per_s == 0.0 {
        return f0;
    }
    Fidelity::clamped(FIDELITY_FLOOR + (f0.0 - FIDELITY_FLOOR) * (-dt_s * rate_per_s).exp())
}

/// Probability that Z-basis outcomes on the two halves disagree.
pub fn qber_z(f: Fidelity) -> f64 {
    2.0 * (1.0 - f.0) / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(v: f64) -> Fidelity {
        Fidelity::new(v).unwrap()
    }

    #[test]
    fn werner_examples() {
        assert_eq!(werner_from_fidelity(f(1.0)).value(), 1.0);
        assert_eq!(werner_from_fidelity(f(0.25)).value(), 0.0);
        assert!((werner_from_fidelity(f(0.625)).value() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fidelity_range_errors() {
        assert!(Fidelity::new(0.2).is_err());
        assert!(Fidelity::new(1.01).is_err());
        assert!(Fidelity::new(f64::NAN).is_err());
        assert_eq!(Fidelity::clamped(0.1), Fidelity::FLOOR);
        assert!(WernerParam::new(-0.1).is_err());
    }

    #[test]
    fn swap_examples() {
        assert_eq!(swap_fidelity(f(1.0), f(1.0)).value(), 1.0);
        assert!((swap_fidelity(f(1.0), f(0.73)).value() - 0.73).abs() < 1e-15);
        // 16x16 oracle value
        assert!((swap_fidelity(f(0.9), f(0.9)).value() - 0.813_333_333_333).abs() < 1e-9);
    }

    #[test]
    fn purify_examples() {
        let o = purify_outcome(f(1.0), f(1.0));
        assert_eq!((o.p_success, o.fidelity.value()), (1.0, 1.0));
        let o = purify_outcome(f(0.9), f(0.9));
        assert!((o.p_success - 0.875_555_555_556).abs() < 1e-9);
        assert!((o.fidelity.value() - 0.926_395_939_086).abs() < 1e-9);
        let o = purify_outcome(f(0.7), f(0.7));
        assert!((o.p_success - 0.68).abs() < 1e-9);
        assert!((o.fidelity.value() - 0.735_294_117_647).abs() < 1e-9);
    }

    #[test]
    fn decohere_examples() {
        assert_eq!(decohere(f(0.9), 0.0, 1.0), f(0.9));
        assert!((decohere(f(0.9), 1e6, 1.0).value() - 0.25).abs() < 1e-12);
        assert!((decohere(f(0.95), 1.0, 1.0).value() - 0.507_515_608_82).abs() < 1e-9);
        assert_eq!(decohere(f(0.9), 5.0, f64::INFINITY), f(0.9));
    }

    #[test]
    fn qber_examples() {
        assert_eq!(qber_z(f(1.0)), 0.0);
        assert_eq!(qber_z(f(0.25)), 0.5);
        assert!((qber_z(f(0.9)) - 0.066_666_666_667).abs() < 1e-9);
    }
}
