use crate::error::{Error, Result};

/// Link capacity available for shipping a package.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UplinkBudget {
    /// Bits per second.
    pub rate: f64,
    /// Multiplicative framing/protocol cost, at least 1.
    pub protocol_overhead: f64,
}

impl UplinkBudget {
    pub fn new(rate: f64, protocol_overhead: f64) -> Result<Self> {
        if !(rate.is_finite() && rate > 0.0) {
            return Err(Error::Argument(format!("uplink rate must be positive, got {rate}")));
        }
        if !(protocol_overhead.is_finite() && protocol_overhead >= 1.0) {
            return Err(Error::Argument(format!(
                "protocol overhead must be at least 1, got {protocol_overhead}"
            )));
        }
        Ok(Self { rate, protocol_overhead })
    }
}

/// Seconds to ship `bytes`: `bytes · 8 · overhead / rate`.
pub fn uplink_time(bytes: u64, budget: &UplinkBudget) -> f64 {
    bytes as f64 * 8.0 * budget.protocol_overhead / budget.rate
}
