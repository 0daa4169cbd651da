//! Per-image energy and latency accounting.
//!
//! Total energy is `N_M*E_M + N_MEM*E_MEM + N_A*E_A + N_MUL*E_MUL`. The
//! reference-preset operation counts are the closed forms `3904*R`, `85328*B`,
//! `3904*B` and `3088*B^2`.

use crate::{Error, Result};

pub const PICOJOULE: f64 = 1e-12;
pub const FEMTOJOULE: f64 = 1e-15;
pub const NANOSECOND: f64 = 1e-9;

/// Logical MAAP operations per image in the reference preset.
pub const REF_MAAP_OPS: u64 = 3904;
pub const REF_MEM_PER_BIT: u64 = 85328;
pub const REF_ADC_PER_BIT: u64 = 3904;
pub const REF_MUL_PER_BIT2: u64 = 3088;

/// Range of the MAAP energy per operation in the reference preset.
pub const E_MAAP_MIN: f64 = 0.9 * PICOJOULE;
pub const E_MAAP_MAX: f64 = 7.2 * PICOJOULE;
pub const E_MAAP_DEFAULT: f64 = 2.2 * PICOJOULE;

/// Energy per operation, joules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyParams {
    pub e_maap: f64,
    pub e_mem: f64,
    pub e_adc: f64,
    pub e_mul: f64,
}

impl EnergyParams {
    /// Reference per-op energies with the given MAAP cost. Rejects `e_maap`
    /// outside 0.9-7.2 pJ.
    pub fn reference(e_maap: f64) -> Result<Self> {
        // Relative slack so 0.9e-12 and 7.2e-12 written by hand are accepted.
        let slack = 1e-9;
        if !(E_MAAP_MIN * (1.0 - slack)..=E_MAAP_MAX * (1.0 + slack)).contains(&e_maap) {
            return Err(Error::InvalidParameter(format!(
                "e_maap must lie in [0.9, 7.2] pJ, got {} pJ",
                e_maap / PICOJOULE
            )));
        }
        Ok(Self {
            e_maap,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("e_maap", self.e_maap),
            ("e_mem", self.e_mem),
            ("e_adc", self.e_adc),
            ("e_mul", self.e_mul),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            e_maap: E_MAAP_DEFAULT,
            e_mem: 41.8 * FEMTOJOULE,
            e_adc: PICOJOULE,
            e_mul: 125.4 * FEMTOJOULE,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub n_maap: u64,
    pub n_mem: u64,
    pub n_adc: u64,
    pub n_mul: u64,
}

pub fn op_counts_reference(bits: u32, redundancy: u64) -> Result<OpCounts> {
    if !(1..=64).contains(&bits) {
        return Err(Error::InvalidParameter(format!(
            "bits must be in 1..=64, got {bits}"
        )));
    }
    if redundancy == 0 {
        return Err(Error::ZeroRedundancy);
    }
    let b = u64::from(bits);
    Ok(OpCounts {
        n_maap: REF_MAAP_OPS * redundancy,
        n_mem: REF_MEM_PER_BIT * b,
        n_adc: REF_ADC_PER_BIT * b,
        n_mul: REF_MUL_PER_BIT2 * b * b,
    })
}

/// Energy per category, joules.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EnergyBreakdown {
    pub maap: f64,
    pub memory: f64,
    pub adc: f64,
    pub multiply: f64,
}

impl EnergyBreakdown {
    pub fn total(&self) -> f64 {
        self.maap + self.memory + self.adc + self.multiply
    }

    /// Memory, ADC and multiply together.
    pub fn digital(&self) -> f64 {
        self.memory + self.adc + self.multiply
    }
}

pub fn energy_breakdown(p: &EnergyParams, c: &OpCounts) -> EnergyBreakdown {
    EnergyBreakdown {
        maap: c.n_maap as f64 * p.e_maap,
        memory: c.n_mem as f64 * p.e_mem,
        adc: c.n_adc as f64 * p.e_adc,
        multiply: c.n_mul as f64 * p.e_mul,
    }
}

pub fn total_energy(p: &EnergyParams, c: &OpCounts) -> f64 {
    energy_breakdown(p, c).total()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyParams {
    /// Seconds per MAAP set operation.
    pub t_maap: f64,
    /// Physical MAAP sets that can fire in parallel.
    pub num_sets: u64,
}

impl Default for LatencyParams {
    fn default() -> Self {
        Self {
            t_maap: 0.6 * NANOSECOND,
            num_sets: REF_MAAP_OPS,
        }
    }
}

/// Sequential rounds of parallel MAAP firing; ADC and digital pipeline time
/// are not included.
pub fn latency_estimate(lp: &LatencyParams, n_maap_logical: u64, redundancy: u64) -> Result<f64> {
    if redundancy == 0 {
        return Err(Error::ZeroRedundancy);
    }
    if lp.num_sets < redundancy {
        return Err(Error::InsufficientSets {
            num_sets: lp.num_sets,
            redundancy,
        });
    }
    if !(lp.t_maap.is_finite() && lp.t_maap > 0.0) {
        return Err(Error::InvalidParameter("t_maap must be positive".into()));
    }
    let rounds = (n_maap_logical * redundancy).div_ceil(lp.num_sets);
    Ok(rounds as f64 * lp.t_maap)
}
