use std::fmt;
use std::str::FromStr;

use crate::model::NodeId;
use crate::sim::time::SimTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Behavior {
    /// Sends data with an op code no culture declares.
    UndeclaredOp,
    /// Answers route requests it cannot serve and sprays unsolicited replies.
    BogusRrep,
    /// Drops everything it should forward.
    Selfish,
}

impl Behavior {
    pub fn name(self) -> &'static str {
        match self {
            Behavior::UndeclaredOp => "UNDECLARED_OP",
            Behavior::BogusRrep => "BOGUS_RREP",
            Behavior::Selfish => "SELFISH",
        }
    }
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Behavior {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "UNDECLARED_OP" => Ok(Behavior::UndeclaredOp),
            "BOGUS_RREP" => Ok(Behavior::BogusRrep),
            "SELFISH" => Ok(Behavior::Selfish),
            other => Err(format!("unknown adversary behavior {other:?}")),
        }
    }
}

/// A misbehaving node. Adversaries never join communities.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversaryProfile {
    pub node: NodeId,
    pub behavior: Behavior,
    /// Injections per time unit for the active behaviors.
    pub rate: f64,
    pub start: SimTime,
    pub stop: Option<SimTime>,
    pub count: Option<u64>,
}

impl AdversaryProfile {
    pub fn new(node: NodeId, behavior: Behavior) -> Self {
        AdversaryProfile {
            node,
            behavior,
            rate: 1.0,
            start: SimTime::ZERO,
            stop: None,
            count: None,
        }
    }

    pub fn active_at(&self, t: SimTime) -> bool {
        t >= self.start && self.stop.is_none_or(|s| t < s)
    }

    pub fn period(&self) -> SimTime {
        if self.rate > 0.0 {
            SimTime::from_units(1.0 / self.rate).max(SimTime(1))
        } else {
            SimTime::from_units(1.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_and_names() {
        let mut p = AdversaryProfile::new(NodeId::new(0, "X"), Behavior::Selfish);
        p.start = SimTime(10);
        p.stop = Some(SimTime(20));
        assert!(!p.active_at(SimTime(9)));
        assert!(p.active_at(SimTime(10)));
        assert!(!p.active_at(SimTime(20)));
        assert_eq!("BOGUS_RREP".parse::<Behavior>(), Ok(Behavior::BogusRrep));
        assert!("NICE".parse::<Behavior>().is_err());
    }
}
