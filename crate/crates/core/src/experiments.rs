//! Monte-Carlo sweeps over `(B, R, sigma_Vt)` grids.
//!
//! Every random draw comes from a ChaCha8 stream keyed by
//! `(base_seed, grid_index, trial, image_index)` with the logical MAAP op
//! index as the stream id, so results do not depend on scheduling or thread
//! count. Image subsets are keyed by `(base_seed, trial)` only: every grid
//! point of one trial sees the same images, and comparisons between points
//! differ by device noise and precision alone.

use std::fmt::Write as _;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataio::{subset_indices, LabeledDataset};
use crate::device::{DeviceIdealParams, DeviceVariationSpec};
use crate::energy::{
    energy_breakdown, latency_estimate, op_counts_reference, EnergyBreakdown, EnergyParams,
    LatencyParams, REF_MAAP_OPS,
};
use crate::network::{CnnConfig, DeviceContext, MaapCnn, WeightSet};
use crate::{Error, Result};

/// Stream id reserved for image-subset sampling; noise streams use op
/// indices below it.
pub const SUBSET_STREAM: u64 = 1 << 63;

/// Identifies the noise streams of one image in one trial of one grid point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub base_seed: u64,
    pub grid_index: u64,
    pub trial: u64,
    pub image_index: u64,
}

impl StreamKey {
    pub fn new(base_seed: u64, grid_index: u64, trial: u64, image_index: u64) -> Self {
        Self {
            base_seed,
            grid_index,
            trial,
            image_index,
        }
    }

    pub fn op_stream(&self, op_index: u64) -> ChaCha8Rng {
        seed_for(
            self.base_seed,
            self.grid_index,
            self.trial,
            self.image_index,
            op_index,
        )
    }
}

/// Injective map from the index tuple to a ChaCha8 stream: the four leading
/// indices form the 256-bit key and `op_index` selects the stream.
pub fn seed_for(
    base_seed: u64,
    grid_index: u64,
    trial: u64,
    image_index: u64,
    op_index: u64,
) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, v) in key
        .chunks_exact_mut(8)
        .zip([base_seed, grid_index, trial, image_index])
    {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(op_index);
    rng
}

/// Seed of the image subset used by `trial`.
pub fn subset_seed(base_seed: u64, trial: u64) -> u64 {
    seed_for(base_seed, 0, trial, 0, SUBSET_STREAM).next_u64()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub bits_grid: Vec<u32>,
    pub redundancy_grid: Vec<usize>,
    /// Threshold deviations in mV.
    pub sigma_vt_grid: Vec<f64>,
    pub trials: usize,
    pub images_per_trial: usize,
    pub base_seed: u64,
    pub energy_params: EnergyParams,
    pub latency: LatencyParams,
    /// Device model; `sigma_vt` is replaced by each grid value.
    pub device: DeviceVariationSpec,
    pub ideal: DeviceIdealParams,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            bits_grid: vec![4, 8, 32],
            redundancy_grid: vec![1, 5, 10],
            sigma_vt_grid: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            trials: 5,
            images_per_trial: 100,
            base_seed: 0,
            energy_params: EnergyParams::default(),
            latency: LatencyParams::default(),
            device: DeviceVariationSpec::default(),
            ideal: DeviceIdealParams::default(),
        }
    }
}

pub const MIN_TRIALS: usize = 5;

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.bits_grid.is_empty()
            || self.redundancy_grid.is_empty()
            || self.sigma_vt_grid.is_empty()
        {
            return bad("sweep grids must be non-empty");
        }
        if self.trials < MIN_TRIALS {
            return bad("a sweep needs at least 5 trials per point");
        }
        if self.images_per_trial == 0 {
            return bad("images_per_trial must be positive");
        }
        if self.bits_grid.iter().any(|b| !(1..=64).contains(b)) {
            return bad("bits must be in 1..=64");
        }
        if self.redundancy_grid.contains(&0) {
            return Err(Error::ZeroRedundancy);
        }
        for &s in &self.sigma_vt_grid {
            DeviceVariationSpec {
                sigma_vt: s,
                ..self.device
            }
            .validate()?;
        }
        self.energy_params.validate()
    }

    /// Grid points in index order: bits outermost, then redundancy, then
    /// threshold deviation.
    pub fn points(&self) -> Vec<GridPoint> {
        let mut points = Vec::new();
        for &bits in &self.bits_grid {
            for &redundancy in &self.redundancy_grid {
                for &sigma_vt in &self.sigma_vt_grid {
                    points.push(GridPoint {
                        index: points.len(),
                        bits,
                        redundancy,
                        sigma_vt,
                    });
                }
            }
        }
        points
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint {
    pub index: usize,
    pub bits: u32,
    pub redundancy: usize,
    pub sigma_vt: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointResult {
    pub point: GridPoint,
    pub trial_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    /// Sample standard deviation over trials divided by `sqrt(trials)`.
    pub std_error: f64,
    pub energy: EnergyBreakdown,
    pub total_energy: f64,
    pub latency: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub points: Vec<PointResult>,
}

pub fn mean_and_std_error(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Noisy inference over the listed images of `data`. Image `k` of the list
/// draws its noise from `StreamKey::new(base_seed, grid_index, trial, k)`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    net: &MaapCnn,
    data: &LabeledDataset,
    indices: &[usize],
    ideal: DeviceIdealParams,
    variation: DeviceVariationSpec,
    redundancy: usize,
    base_seed: u64,
    grid_index: u64,
    trial: u64,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let correct = indices
        .par_iter()
        .enumerate()
        .map(|(k, &i)| {
            classify_one(
                net,
                data,
                i,
                ideal,
                variation,
                redundancy,
                StreamKey::new(base_seed, grid_index, trial, k as u64),
            )
        })
        .collect::<Result<Vec<bool>>>()?
        .into_iter()
        .filter(|&c| c)
        .count();
    Ok(correct as f64 / indices.len() as f64)
}

fn classify_one(
    net: &MaapCnn,
    data: &LabeledDataset,
    i: usize,
    ideal: DeviceIdealParams,
    variation: DeviceVariationSpec,
    redundancy: usize,
    key: StreamKey,
) -> Result<bool> {
    let mut ctx = DeviceContext::new(ideal, variation, redundancy, key)?;
    Ok(net.classify(data.image(i), &mut ctx)? == usize::from(data.label(i)))
}

pub fn run_sweep(
    spec: &SweepSpec,
    config: &CnnConfig,
    weights: &WeightSet,
    data: &LabeledDataset,
) -> Result<SweepResult> {
    run_sweep_with(spec, config, weights, data, |_| {})
}

/// Like [`run_sweep`], calling `on_point` for each finished grid point in
/// index order.
pub fn run_sweep_with(
    spec: &SweepSpec,
    config: &CnnConfig,
    weights: &WeightSet,
    data: &LabeledDataset,
    mut on_point: impl FnMut(&PointResult),
) -> Result<SweepResult> {
    spec.validate()?;
    if data.len() < spec.images_per_trial {
        return Err(Error::InsufficientData(format!(
            "{} images per trial requested, dataset holds {}",
            spec.images_per_trial,
            data.len()
        )));
    }
    let subsets: Vec<Vec<usize>> = (0..spec.trials)
        .map(|t| {
            subset_indices(
                data.len(),
                spec.images_per_trial,
                subset_seed(spec.base_seed, t as u64),
            )
        })
        .collect::<Result<_>>()?;

    let mut nets = Vec::new();
    for &bits in &spec.bits_grid {
        if !nets.iter().any(|(b, _)| *b == bits) {
            nets.push((
                bits,
                MaapCnn::new(config.clone(), weights, bits, spec.ideal.v_sat)?,
            ));
        }
    }
    let net_for = |bits: u32| &nets.iter().find(|(b, _)| *b == bits).unwrap().1;

    let points = spec.points();
    let per_point = spec.trials * spec.images_per_trial;
    let outcomes: Vec<bool> = (0..points.len() * per_point)
        .into_par_iter()
        .map(|job| {
            let point = &points[job / per_point];
            let trial = (job % per_point) / spec.images_per_trial;
            let k = job % spec.images_per_trial;
            let variation = DeviceVariationSpec {
                sigma_vt: point.sigma_vt,
                ..spec.device
            };
            let key = StreamKey::new(spec.base_seed, point.index as u64, trial as u64, k as u64);
            classify_one(
                net_for(point.bits),
                data,
                subsets[trial][k],
                spec.ideal,
                variation,
                point.redundancy,
                key,
            )
        })
        .collect::<Result<_>>()?;

    let mut results = Vec::with_capacity(points.len());
    for (point, chunk) in points.iter().zip(outcomes.chunks(per_point)) {
        let trial_accuracies: Vec<f64> = chunk
            .chunks(spec.images_per_trial)
            .map(|t| t.iter().filter(|&&c| c).count() as f64 / spec.images_per_trial as f64)
            .collect();
        let (mean_accuracy, std_error) = mean_and_std_error(&trial_accuracies);
        let counts = op_counts_reference(point.bits, point.redundancy as u64)?;
        let energy = energy_breakdown(&spec.energy_params, &counts);
        let latency = latency_estimate(&spec.latency, REF_MAAP_OPS, point.redundancy as u64)?;
        let result = PointResult {
            point: *point,
            trial_accuracies,
            mean_accuracy,
            std_error,
            energy,
            total_energy: energy.total(),
            latency,
        };
        on_point(&result);
        results.push(result);
    }
    Ok(SweepResult { points: results })
}

pub const CSV_HEADER: &str = "grid_index,bits,redundancy,sigma_vt_mv,trials,mean_accuracy,std_error,energy_maap_j,energy_mem_j,energy_adc_j,energy_mul_j,energy_total_j,latency_s";

/// Fixed-point rendering with 17 significant digits.
pub fn fixed17(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x:.16}");
    }
    let sci = format!("{:.16e}", x.abs());
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let digits: String = mantissa.chars().filter(|c| *c != '.').collect();
    let sign = if x < 0.0 { "-" } else { "" };
    let body = if exp < 0 {
        format!("0.{}{digits}", "0".repeat((-exp - 1) as usize))
    } else if (exp as usize) < digits.len() - 1 {
        let (int, frac) = digits.split_at(exp as usize + 1);
        format!("{int}.{frac}")
    } else {
        format!("{digits}{}", "0".repeat(exp as usize + 1 - digits.len()))
    };
    format!("{sign}{body}")
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                p.point.index,
                p.point.bits,
                p.point.redundancy,
                p.point.sigma_vt,
                p.trial_accuracies.len(),
                p.mean_accuracy,
                p.std_error,
                fixed17(p.energy.maap),
                fixed17(p.energy.memory),
                fixed17(p.energy.adc),
                fixed17(p.energy.multiply),
                fixed17(p.total_energy),
                fixed17(p.latency),
            );
        }
        out
    }

    pub fn find(&self, bits: u32, redundancy: usize, sigma_vt: f64) -> Option<&PointResult> {
        self.points.iter().find(|p| {
            p.point.bits == bits && p.point.redundancy == redundancy && p.point.sigma_vt == sigma_vt
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyAccuracyRow {
    pub energy: f64,
    pub mean_accuracy: f64,
    pub bits: u32,
    pub redundancy: usize,
}

/// One row per `(B, R)`, accuracy averaged over the threshold-deviation
/// axis, sorted by energy ascending.
pub fn accuracy_vs_energy(result: &SweepResult) -> Vec<EnergyAccuracyRow> {
    let mut rows: Vec<(EnergyAccuracyRow, usize)> = Vec::new();
    for p in &result.points {
        let key = (p.point.bits, p.point.redundancy);
        match rows.iter_mut().find(|(r, _)| (r.bits, r.redundancy) == key) {
            Some((row, n)) => {
                row.mean_accuracy += p.mean_accuracy;
                *n += 1;
            }
            None => rows.push((
                EnergyAccuracyRow {
                    energy: p.total_energy,
                    mean_accuracy: p.mean_accuracy,
                    bits: p.point.bits,
                    redundancy: p.point.redundancy,
                },
                1,
            )),
        }
    }
    let mut rows: Vec<EnergyAccuracyRow> = rows
        .into_iter()
        .map(|(mut r, n)| {
            r.mean_accuracy /= n as f64;
            r
        })
        .collect();
    rows.sort_by(|a, b| {
        a.energy
            .total_cmp(&b.energy)
            .then(a.bits.cmp(&b.bits))
            .then(a.redundancy.cmp(&b.redundancy))
    });
    rows
}
