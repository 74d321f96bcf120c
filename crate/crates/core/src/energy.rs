//! Joules-per-inference energy model.

use crate::error::{Error, Result};

/// Efficiency factor of the lower neuromorphic bound relative to the GPU figure.
pub const DEFAULT_EFFICIENCY_FACTOR: f64 = 109.0;
/// Fitted per-core dynamic power (W) that reproduces the 0.0052 J upper bound
/// from 55 cores at 106 inferences per second.
pub const DEFAULT_PER_CORE_WATTS: f64 = 0.01002;

/// Average dynamic power divided by throughput.
pub fn joules_per_inference(dynamic_power_watts: f64, inferences_per_second: f64) -> Result<f64> {
    if !(inferences_per_second > 0.0) || !inferences_per_second.is_finite() {
        return Err(Error::contract(format!("inferences per second must be positive, got {inferences_per_second}")));
    }
    if !(dynamic_power_watts >= 0.0) || !dynamic_power_watts.is_finite() {
        return Err(Error::contract(format!("dynamic power must be nonnegative, got {dynamic_power_watts}")));
    }
    Ok(dynamic_power_watts / inferences_per_second)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyModel {
    pub gpu_joules_per_inference: f64,
    pub efficiency_factor: f64,
    pub per_core_dynamic_power_watts: f64,
    pub cores: u32,
    pub inferences_per_second: f64,
}

impl EnergyModel {
    pub fn new(
        gpu_joules_per_inference: f64,
        efficiency_factor: f64,
        per_core_dynamic_power_watts: f64,
        cores: u32,
        inferences_per_second: f64,
    ) -> Result<Self> {
        let m = EnergyModel { gpu_joules_per_inference, efficiency_factor, per_core_dynamic_power_watts, cores, inferences_per_second };
        let positive = [gpu_joules_per_inference, efficiency_factor, per_core_dynamic_power_watts, inferences_per_second]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite());
        if !positive || cores == 0 {
            return Err(Error::contract(format!("energy model inputs must be strictly positive: {m:?}")));
        }
        Ok(m)
    }
}

/// `(gpu / factor, per_core · cores / ips)`. The ordering of the two bounds is
/// reported, not enforced.
pub fn loihi_energy_bounds(m: &EnergyModel) -> (f64, f64) {
    let lower = m.gpu_joules_per_inference / m.efficiency_factor;
    let upper = m.per_core_dynamic_power_watts * m.cores as f64 / m.inferences_per_second;
    (lower, upper)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_power_costs_nothing() {
        assert_eq!(joules_per_inference(0.0, 10.0).unwrap(), 0.0);
        assert!(joules_per_inference(1.0, 0.0).is_err());
        assert!(joules_per_inference(1.0, -3.0).is_err());
    }

    #[test]
    fn factor_one_keeps_gpu_figure() {
        let m = EnergyModel::new(0.1745, 1.0, 0.01, 1, 1.0).unwrap();
        assert_eq!(loihi_energy_bounds(&m).0, 0.1745);
        assert!(EnergyModel::new(0.1, 109.0, 0.01, 0, 1.0).is_err());
    }
}
