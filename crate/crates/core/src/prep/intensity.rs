use super::{PrepError, Result};
use crate::volio::{IntensityUnit, Volume};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IntensityMode {
    /// `clamp(hu, hu_min, hu_max) - hu_min`.
    #[default]
    ShiftClamp,
    /// As `ShiftClamp`, with the tissue window stretched by `gain`.
    WindowStretch,
}

/// Lossless HU → non-negative intensity mapping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntensityMap {
    pub mode: IntensityMode,
    pub hu_min: f64,
    pub hu_max: f64,
    /// Stretched window `[low, high]` in HU (`WindowStretch` only).
    pub stretch_window: [f64; 2],
    /// Slope inside the stretched window, at least 1.
    pub gain: f64,
}

impl Default for IntensityMap {
    fn default() -> Self {
        Self { mode: IntensityMode::ShiftClamp, hu_min: -1024.0, hu_max: 3071.0, stretch_window: [0.0, 100.0], gain: 1.0 }
    }
}

impl IntensityMap {
    pub fn window_stretch(gain: f64) -> Self {
        Self { mode: IntensityMode::WindowStretch, gain, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PrepError::ConfigInvalid(m));
        if !(self.hu_min.is_finite() && self.hu_max.is_finite() && self.hu_min < self.hu_max) {
            return bad(format!("hu_min {} must be below hu_max {}", self.hu_min, self.hu_max));
        }
        if self.mode == IntensityMode::WindowStretch {
            let [lo, hi] = self.stretch_window;
            if !(lo < hi) || !(self.gain >= 1.0 && self.gain.is_finite()) {
                return bad(format!("stretch window {:?} with gain {}", self.stretch_window, self.gain));
            }
        }
        Ok(())
    }

    /// Maps one HU value. Continuous, non-decreasing, and strictly
    /// increasing with slope ≥ 1 on `[hu_min, hu_max]`.
    pub fn apply(&self, hu: f64) -> f64 {
        let v = hu.clamp(self.hu_min, self.hu_max);
        let shifted = v - self.hu_min;
        match self.mode {
            IntensityMode::ShiftClamp => shifted,
            IntensityMode::WindowStretch => {
                let lo = self.stretch_window[0].clamp(self.hu_min, self.hu_max);
                let hi = self.stretch_window[1].clamp(self.hu_min, self.hu_max);
                let extra = (self.gain - 1.0) * (v.clamp(lo, hi) - lo);
                shifted + extra
            }
        }
    }

    pub fn is_clamped(&self, hu: f64) -> bool {
        hu < self.hu_min || hu > self.hu_max
    }
}

/// Applies `map` to an HU volume. Returns the non-negative volume and the
/// number of voxels that were clamped.
pub fn to_nonnegative(v: &Volume, map: &IntensityMap) -> Result<(Volume, usize)> {
    map.validate()?;
    if v.unit() != IntensityUnit::Hu {
        return Err(PrepError::UnitMismatch { expected: IntensityUnit::Hu, actual: v.unit() });
    }
    let mut clamped = 0;
    let data = v
        .data()
        .iter()
        .map(|&hu| {
            let hu = hu as f64;
            clamped += usize::from(map.is_clamped(hu));
            map.apply(hu) as f32
        })
        .collect();
    Ok((v.with_data(data, IntensityUnit::NonNegative)?, clamped))
}
