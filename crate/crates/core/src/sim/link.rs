use crate::fabric::ArtDef;
use crate::sim::time::SimTime;

/// Per-transmission channel behavior, derived from a physical and a MAC art.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkModel {
    pub delay: SimTime,
    pub loss: f64,
    /// Upper bound of the uniform contention delay.
    pub contention: SimTime,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel {
            delay: SimTime::from_units(1.0),
            loss: 0.0,
            contention: SimTime::ZERO,
        }
    }
}

impl LinkModel {
    pub fn from_arts(physical: Option<&ArtDef>, mac: Option<&ArtDef>) -> Self {
        let base = LinkModel::default();
        let delay = physical
            .and_then(|a| a.param("delay"))
            .map_or(base.delay, SimTime::from_units);
        let loss = physical.and_then(|a| a.param("loss")).unwrap_or(0.0);
        let contention = mac
            .and_then(|a| a.param("contention"))
            .map_or(SimTime::ZERO, SimTime::from_units);
        LinkModel {
            delay,
            loss: loss.clamp(0.0, 1.0),
            contention,
        }
    }
}
