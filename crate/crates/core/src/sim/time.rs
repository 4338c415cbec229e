use std::fmt;
use std::ops::{Add, Sub};

/// Ticks per scenario time unit.
pub const TICKS_PER_UNIT: u64 = 1_000_000;

/// Simulation time in integer ticks (micro-units). The event queue never
/// orders on floating point.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Default)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    /// Rounds a non-negative number of time units to the nearest tick.
    pub fn from_units(units: f64) -> SimTime {
        if !units.is_finite() || units <= 0.0 {
            return SimTime::ZERO;
        }
        SimTime((units * TICKS_PER_UNIT as f64).round() as u64)
    }

    pub fn ticks(self) -> u64 {
        self.0
    }

    pub fn as_units(self) -> f64 {
        self.0 as f64 / TICKS_PER_UNIT as f64
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(rhs.0))
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_conversion() {
        assert_eq!(SimTime::from_units(1.0), SimTime(1_000_000));
        assert_eq!(SimTime::from_units(0.5).ticks(), 500_000);
        assert_eq!(SimTime::from_units(-3.0), SimTime::ZERO);
        assert_eq!(SimTime::from_units(2.5).as_units(), 2.5);
    }
}
