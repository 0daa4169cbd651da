//! Behavioral model of one MAAP set.
//!
//! A MAAP set reads the analog sum of its input currents through a chain of
//! SHE-MTJ activation pairs. Each pair behaves as a linear element with
//! saturation, and the pairs of one set are wired into a winner-take-all
//! circuit, so one evaluation yields `clamp(max(window), 0, v_sat)`.
//!
//! Units are normalized: the linear region has unit gain and the output
//! spans `[0, v_sat]`. Process variation is an additive output offset fixed
//! per physical device. A redundant read averages `R` readings taken on `R`
//! distinct devices.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Output range of the ideal transfer function. The floor is always zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeviceIdealParams {
    pub v_sat: f64,
}

impl DeviceIdealParams {
    pub const V_FLOOR: f64 = 0.0;

    pub fn new(v_sat: f64) -> Result<Self> {
        if !(v_sat.is_finite() && v_sat > Self::V_FLOOR) {
            return Err(Error::InvalidParameter(format!(
                "v_sat must be finite and above {}, got {v_sat}",
                Self::V_FLOOR
            )));
        }
        Ok(Self { v_sat })
    }

    pub fn v_floor(&self) -> f64 {
        Self::V_FLOOR
    }
}

impl Default for DeviceIdealParams {
    fn default() -> Self {
        Self { v_sat: 1.0 }
    }
}

/// Gaussian process-variation model, folded to an output-referred offset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeviceVariationSpec {
    /// Transistor threshold deviation, mV.
    pub sigma_vt: f64,
    /// Output noise per mV of threshold deviation.
    pub k_vt: f64,
    /// MTJ-induced output noise, normalized units.
    pub sigma_mtj: f64,
    /// Systematic mean output offset, normalized units.
    pub bias_mu: f64,
    /// When set, `bias_mu` is subtracted from every reading.
    pub calibrated: bool,
}

impl DeviceVariationSpec {
    pub const DEFAULT_K_VT: f64 = 2e-4;
    // With max-fitted activation ranges this makes a single read cost a few
    // points of accuracy while ten reads stay within a point of ideal.
    pub const DEFAULT_SIGMA_MTJ: f64 = 0.035;
    pub const DEFAULT_BIAS_MU: f64 = 0.01;

    /// Default calibration with the given threshold deviation in mV.
    pub fn with_sigma_vt(sigma_vt: f64) -> Self {
        Self {
            sigma_vt,
            ..Self::default()
        }
    }

    /// A noiseless, unbiased device.
    pub fn ideal() -> Self {
        Self {
            sigma_vt: 0.0,
            k_vt: 0.0,
            sigma_mtj: 0.0,
            bias_mu: 0.0,
            calibrated: true,
        }
    }

    /// Device whose total output noise is exactly `sigma` with no bias.
    pub fn with_total_sigma(sigma: f64) -> Self {
        Self {
            sigma_vt: 0.0,
            k_vt: 0.0,
            sigma_mtj: sigma,
            bias_mu: 0.0,
            calibrated: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("sigma_vt", self.sigma_vt),
            ("k_vt", self.k_vt),
            ("sigma_mtj", self.sigma_mtj),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be finite and non-negative, got {value}"
                )));
            }
        }
        if !self.bias_mu.is_finite() {
            return Err(Error::InvalidParameter("bias_mu must be finite".into()));
        }
        if !self.sigma_dev().is_finite() {
            return Err(Error::InvalidParameter(
                "total device noise overflows".into(),
            ));
        }
        Ok(())
    }

    /// Total per-device output noise std, `sqrt((k_vt*sigma_vt)^2 + sigma_mtj^2)`.
    pub fn sigma_dev(&self) -> f64 {
        (self.k_vt * self.sigma_vt).hypot(self.sigma_mtj)
    }

    /// Mean of the per-device offset after optional calibration.
    pub fn offset_mean(&self) -> f64 {
        if self.calibrated {
            0.0
        } else {
            self.bias_mu
        }
    }

    pub fn is_noiseless(&self) -> bool {
        self.sigma_dev() == 0.0
    }
}

impl Default for DeviceVariationSpec {
    fn default() -> Self {
        Self {
            sigma_vt: 0.0,
            k_vt: Self::DEFAULT_K_VT,
            sigma_mtj: Self::DEFAULT_SIGMA_MTJ,
            bias_mu: Self::DEFAULT_BIAS_MU,
            calibrated: true,
        }
    }
}

/// One physical MAAP set, reduced to its output offset.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DeviceInstance {
    pub offset: f64,
}

pub fn relu(x: f64) -> f64 {
    if x < 0.0 {
        0.0
    } else {
        x
    }
}

/// Winner-take-all max fused with a saturating ReLU.
pub fn ideal_maap(window: &[f64], params: &DeviceIdealParams) -> Result<f64> {
    let max = window
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or(Error::EmptyWindow)?;
    Ok(relu(max).min(params.v_sat))
}

/// Draws one device. A spec with zero noise consumes no randomness.
pub fn sample_device<R: Rng + ?Sized>(spec: &DeviceVariationSpec, rng: &mut R) -> DeviceInstance {
    let mean = spec.offset_mean();
    let sigma = spec.sigma_dev();
    if sigma == 0.0 {
        return DeviceInstance { offset: mean };
    }
    let z: f64 = rng.sample(StandardNormal);
    DeviceInstance {
        offset: mean + sigma * z,
    }
}

/// Ideal response plus the device's output offset, applied after the clamp.
pub fn noisy_maap(window: &[f64], params: &DeviceIdealParams, dev: &DeviceInstance) -> Result<f64> {
    Ok(ideal_maap(window, params)? + dev.offset)
}

/// Mean of `redundancy` readings of the same window, each on a freshly drawn
/// device.
///
/// The mean is accumulated as `ideal + sum(offsets) / R`, which equals the
/// mean of the readings and returns the ideal value exactly for a noiseless,
/// calibrated spec.
pub fn redundant_maap<R: Rng + ?Sized>(
    window: &[f64],
    params: &DeviceIdealParams,
    spec: &DeviceVariationSpec,
    redundancy: usize,
    rng: &mut R,
) -> Result<f64> {
    if redundancy == 0 {
        return Err(Error::ZeroRedundancy);
    }
    let ideal = ideal_maap(window, params)?;
    if redundancy == 1 {
        return Ok(ideal + sample_device(spec, rng).offset);
    }
    if spec.is_noiseless() && spec.offset_mean() == 0.0 {
        return Ok(ideal);
    }
    let offsets: f64 = (0..redundancy)
        .map(|_| sample_device(spec, rng).offset)
        .sum();
    Ok(ideal + offsets / redundancy as f64)
}
