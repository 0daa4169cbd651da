//! Uniform `B`-bit quantization of SRAM-stored weights and ADC readouts.

use crate::network::WeightSet;
use crate::{Error, Result};

/// Word lengths at or above this are treated as continuous.
pub const PASS_THROUGH_BITS: u32 = 32;

/// A uniform quantizer with `2^bits` levels spanning `[lo, hi]`, endpoints
/// included. `bits >= 32` selects pass-through mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantSpec {
    bits: u32,
    lo: f64,
    hi: f64,
}

impl QuantSpec {
    pub fn new(bits: u32, lo: f64, hi: f64) -> Result<Self> {
        if bits == 0 {
            return Err(Error::InvalidParameter("bits must be at least 1".into()));
        }
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::InvalidParameter(format!(
                "quantizer range must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Self { bits, lo, hi })
    }

    /// Symmetric range `[-max_abs, max_abs]`.
    pub fn symmetric(bits: u32, max_abs: f64) -> Result<Self> {
        Self::new(bits, -max_abs, max_abs)
    }

    /// Continuous pass-through over `[lo, hi]`.
    pub fn pass_through(lo: f64, hi: f64) -> Result<Self> {
        Self::new(PASS_THROUGH_BITS, lo, hi)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn is_pass_through(&self) -> bool {
        self.bits >= PASS_THROUGH_BITS
    }

    /// Number of intervals between adjacent levels, `2^B - 1`.
    fn steps(&self) -> f64 {
        ((1u64 << self.bits) - 1) as f64
    }

    /// Spacing between adjacent levels. Zero in pass-through mode.
    pub fn lsb(&self) -> f64 {
        if self.is_pass_through() {
            0.0
        } else {
            (self.hi - self.lo) / self.steps()
        }
    }

    /// Index of the level nearest `x` after clamping, ties away from zero.
    pub fn level_index(&self, x: f64) -> u64 {
        let steps = self.steps();
        let t = (x.clamp(self.lo, self.hi) - self.lo) / (self.hi - self.lo) * steps;
        t.round().clamp(0.0, steps) as u64
    }

    pub fn level(&self, index: u64) -> f64 {
        self.lo + (self.hi - self.lo) * index as f64 / self.steps()
    }
}

pub fn quantize(x: f64, spec: &QuantSpec) -> f64 {
    if spec.is_pass_through() {
        return x;
    }
    spec.level(spec.level_index(x))
}

/// Per-layer symmetric specs with `m = max |w|` over each layer's weights and
/// biases. A layer whose parameters are all zero gets `None` and is left
/// untouched.
pub fn weight_specs(weights: &WeightSet, bits: u32) -> Result<Vec<Option<QuantSpec>>> {
    weights
        .layers
        .iter()
        .map(|layer| {
            let m = layer
                .weights
                .iter()
                .chain(&layer.bias)
                .fold(0.0f64, |acc, w| acc.max(w.abs()));
            if m == 0.0 {
                Ok(None)
            } else {
                QuantSpec::symmetric(bits, m).map(Some)
            }
        })
        .collect()
}

/// Quantizes every weight and bias of each layer with that layer's spec.
pub fn quantize_weights(weights: &WeightSet, specs: &[Option<QuantSpec>]) -> Result<WeightSet> {
    if specs.len() != weights.layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} quantizer specs for {} weighted layers",
            specs.len(),
            weights.layers.len()
        )));
    }
    let mut out = weights.clone();
    for (layer, spec) in out.layers.iter_mut().zip(specs) {
        let Some(spec) = spec else { continue };
        for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
            *w = quantize(*w, spec);
        }
    }
    Ok(out)
}
