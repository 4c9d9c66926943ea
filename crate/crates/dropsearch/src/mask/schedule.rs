use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear per-depth ramp of the drop rate: zero at the input-side layer,
/// `final_rate` at the deepest one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSchedule {
    final_rate: f64,
    n_layers: usize,
}

impl RateSchedule {
    pub fn new(final_rate: f64, n_layers: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&final_rate) || !final_rate.is_finite() {
            return Err(Error::contract(format!("final rate {final_rate} outside [0, 1]")));
        }
        if n_layers < 2 {
            // a single layer has no ramp to interpolate over
            return Err(Error::contract(format!("rate schedule needs ≥ 2 layers, got {n_layers}")));
        }
        Ok(RateSchedule { final_rate, n_layers })
    }

    pub fn final_rate(&self) -> f64 {
        self.final_rate
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn rate_at(&self, layer: usize) -> Result<f64> {
        if layer >= self.n_layers {
            return Err(Error::contract(format!(
                "layer {layer} out of range for {} layers",
                self.n_layers
            )));
        }
        Ok(self.final_rate * layer as f64 / (self.n_layers - 1) as f64)
    }
}
