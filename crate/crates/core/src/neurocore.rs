//! One chip: 8-bit synaptic weights for up to `capacity` stored patterns and
//! the integrate-and-fire neurons that match against them.
//!
//! Each stored pattern owns one neuron. Per timestep `t` with incoming input
//! spikes `s(t)`:
//!
//! ```text
//! V(t+1) = V(t) + U(t)
//! U(t+1) = U(t) + Σ_j W_j s_j(t)
//! ```
//!
//! A neuron whose `V(t+1)` reaches `theta_v` emits at timestep `t + 1`,
//! resets `V` to zero and stays silent for the rest of the query.

use std::io::Read;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::binio::{put_u32, put_u64, write_file, LeReader};
use crate::encoding::EncodedKey;
use crate::error::{Error, Result};
use crate::spikecodec::{CodecParams, SpikePattern};

pub const DEFAULT_CAPACITY: usize = 2400;
pub const WEIGHT_MAX: i32 = 127;
pub const WEIGHT_MIN: i32 = -128;
/// Threshold value that no voltage can reach.
pub const THETA_INFINITE: i64 = i64::MAX;

const CHIP_MAGIC: &[u8; 8] = b"SANN-CHP";
const CHIP_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    /// Weights with `|e| < theta_w · max|E_s|` are pruned to zero.
    pub theta_w: f64,
}

impl Default for QuantParams {
    fn default() -> Self {
        QuantParams { theta_w: 0.0 }
    }
}

impl QuantParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.theta_w) {
            return Err(Error::Config(format!("theta_w must be in [0, 1), got {}", self.theta_w)));
        }
        Ok(())
    }
}

/// Quantized `W = [E_s, -E_s]` for one chip.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    /// `2 N_C × M_s`; the bottom half is the negation of the top half.
    pub weights: Array2<i8>,
    /// Float-to-integer factor, `127 / max|E_s|`.
    pub scale: f32,
}

/// Largest absolute voltage a neuron can reach within `t_max` timesteps.
pub fn voltage_bound(t_max: u64, n_components: u64) -> u128 {
    // |U| ≤ N_C · 128 (one spike per component), |V| ≤ t_max · |U|.
    t_max as u128 * n_components as u128 * 128
}

/// Whether the `i32` current and `i64` voltage accumulators can hold any
/// reachable state for this configuration.
pub fn accumulators_fit(t_max: u64, n_components: u64) -> bool {
    (n_components as u128 * 128) <= i32::MAX as u128 && voltage_bound(t_max, n_components) <= i64::MAX as u128
}

fn quantize_value(e: f32, scale: f32, floor: f32) -> i8 {
    if e.abs() < floor {
        return 0;
    }
    ((e as f64 * scale as f64).round() as i64).clamp(WEIGHT_MIN as i64, WEIGHT_MAX as i64) as i8
}

/// Rescales `e_s` (`N_C × M_s`) into `[-128, 127]` and appends the negated
/// dual rows.
pub fn quantize_weights(e_s: ArrayView2<'_, f32>, q: &QuantParams) -> Result<QuantizedBlock> {
    let (nc, ms) = e_s.dim();
    if nc == 0 || ms == 0 {
        return Err(Error::AllZero);
    }
    let max = e_s.iter().fold(0f32, |m, v| m.max(v.abs()));
    if !max.is_finite() {
        return Err(Error::Config("non-finite weight".into()));
    }
    if max == 0.0 {
        return Err(Error::AllZero);
    }
    let scale = (WEIGHT_MAX as f64 / max as f64) as f32;
    let floor = (q.theta_w * max as f64) as f32;
    let mut weights = Array2::<i8>::zeros((2 * nc, ms));
    for ((r, c), &e) in e_s.indexed_iter() {
        let w = quantize_value(e, scale, floor);
        weights[[r, c]] = w;
        weights[[r + nc, c]] = w.saturating_neg();
    }
    Ok(QuantizedBlock { weights, scale })
}

/// Storage and neuron state of one chip.
#[derive(Debug, Clone, PartialEq)]
pub struct ChipStore {
    n_components: usize,
    capacity: usize,
    occupied: usize,
    /// 0 until the first pattern fixes it.
    scale: f32,
    theta_w: f64,
    /// Top half of `W_s`, `N_C × capacity`, row-major.
    weights: Vec<i8>,
    global_ids: Vec<u64>,
    current: Vec<i32>,
    voltage: Vec<i64>,
    fired: Vec<bool>,
    theta_v: i64,
}

impl ChipStore {
    pub fn empty(n_components: usize, capacity: usize, q: QuantParams) -> Self {
        ChipStore {
            n_components,
            capacity,
            occupied: 0,
            scale: 0.0,
            theta_w: q.theta_w,
            weights: vec![0; n_components * capacity],
            global_ids: Vec::with_capacity(capacity),
            current: vec![0; capacity],
            voltage: vec![0; capacity],
            fired: vec![false; capacity],
            theta_v: THETA_INFINITE,
        }
    }

    /// Programs a chip with the patterns (rows of `patterns`, `M_s × N_C`).
    pub fn program(patterns: ArrayView2<'_, f32>, global_ids: &[u64], capacity: usize, q: QuantParams) -> Result<Self> {
        let (ms, nc) = patterns.dim();
        if global_ids.len() != ms {
            return Err(Error::DimensionMismatch { expected: ms, got: global_ids.len() });
        }
        if ms > capacity {
            return Err(Error::ChipFull { capacity });
        }
        let block = quantize_weights(patterns.t(), &q)?;
        let mut chip = ChipStore::empty(nc, capacity, q);
        chip.scale = block.scale;
        for r in 0..nc {
            for c in 0..ms {
                chip.weights[r * capacity + c] = block.weights[[r, c]];
            }
        }
        chip.global_ids.extend_from_slice(global_ids);
        chip.occupied = ms;
        Ok(chip)
    }

    /// Builds a chip from already quantized top-half columns (`columns[m][i]`
    /// is the weight from component `i` to neuron `m`).
    pub fn from_quantized(
        n_components: usize,
        capacity: usize,
        scale: f32,
        columns: &[Vec<i8>],
        global_ids: &[u64],
    ) -> Result<Self> {
        if columns.len() > capacity {
            return Err(Error::ChipFull { capacity });
        }
        if columns.len() != global_ids.len() {
            return Err(Error::DimensionMismatch { expected: columns.len(), got: global_ids.len() });
        }
        let mut chip = ChipStore::empty(n_components, capacity, QuantParams::default());
        chip.scale = scale;
        for (m, col) in columns.iter().enumerate() {
            if col.len() != n_components {
                return Err(Error::DimensionMismatch { expected: n_components, got: col.len() });
            }
            for (i, &w) in col.iter().enumerate() {
                chip.weights[i * capacity + m] = w;
            }
        }
        chip.global_ids.extend_from_slice(global_ids);
        chip.occupied = columns.len();
        Ok(chip)
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn occupied(&self) -> usize {
        self.occupied
    }

    pub fn is_full(&self) -> bool {
        self.occupied == self.capacity
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn global_ids(&self) -> &[u64] {
        &self.global_ids
    }

    pub fn theta_v(&self) -> i64 {
        self.theta_v
    }

    pub fn set_theta_v(&mut self, theta: i64) {
        self.theta_v = theta;
    }

    pub fn set_theta_w(&mut self, theta_w: f64) {
        self.theta_w = theta_w;
    }

    /// Weight from input channel `channel` (in `0..2 N_C`) to neuron `slot`.
    pub fn weight(&self, channel: usize, slot: usize) -> i32 {
        let w = self.weights[(channel % self.n_components) * self.capacity + slot] as i32;
        if channel < self.n_components {
            w
        } else {
            -w
        }
    }

    /// Top-half weights of one stored pattern.
    pub fn column(&self, slot: usize) -> Vec<i8> {
        (0..self.n_components).map(|i| self.weights[i * self.capacity + slot]).collect()
    }

    pub fn voltage(&self, slot: usize) -> i64 {
        self.voltage[slot]
    }

    pub fn current(&self, slot: usize) -> i32 {
        self.current[slot]
    }

    pub fn has_fired(&self, slot: usize) -> bool {
        self.fired[slot]
    }

    /// Largest voltage among stored neurons.
    pub fn max_voltage(&self) -> Option<i64> {
        self.voltage[..self.occupied].iter().copied().max()
    }

    /// Advances one timestep given the input channels spiking at it. Returns
    /// the local slots that fire (stamped with the next timestep).
    pub fn step(&mut self, incoming: &[u32]) -> Vec<u32> {
        let occ = self.occupied;
        let mut out = Vec::new();
        let theta = self.theta_v;
        for i in 0..occ {
            if self.fired[i] {
                continue;
            }
            let v = self.voltage[i] + self.current[i] as i64;
            if v >= theta {
                self.fired[i] = true;
                self.voltage[i] = 0;
                out.push(i as u32);
            } else {
                self.voltage[i] = v;
            }
        }
        let nc = self.n_components;
        for &ch in incoming {
            let ch = ch as usize;
            debug_assert!(ch < 2 * nc, "channel {ch} out of range");
            let row = &self.weights[(ch % nc) * self.capacity..][..occ];
            let current = &mut self.current[..occ];
            if ch < nc {
                for (u, &w) in current.iter_mut().zip(row) {
                    *u += w as i32;
                }
            } else {
                for (u, &w) in current.iter_mut().zip(row) {
                    *u -= w as i32;
                }
            }
        }
        out
    }

    /// Clears all neuron state; weights are untouched.
    pub fn reset(&mut self) {
        self.current.fill(0);
        self.voltage.fill(0);
        self.fired.fill(false);
    }

    /// Writes one more pattern using the chip's existing scale (or a scale
    /// derived from this pattern if the chip is empty). Values beyond the
    /// original range are clamped.
    pub fn store_pattern(&mut self, encoded: &EncodedKey, global_id: u64) -> Result<usize> {
        if self.occupied == self.capacity {
            return Err(Error::ChipFull { capacity: self.capacity });
        }
        let values = encoded.as_slice();
        if values.len() != self.n_components {
            return Err(Error::DimensionMismatch { expected: self.n_components, got: values.len() });
        }
        if self.scale == 0.0 {
            let max = values.iter().fold(0f32, |m, v| m.max(v.abs()));
            if max == 0.0 {
                return Err(Error::AllZero);
            }
            self.scale = (WEIGHT_MAX as f64 / max as f64) as f32;
        }
        let floor = (self.theta_w * (WEIGHT_MAX as f64 / self.scale as f64)) as f32;
        let slot = self.occupied;
        for (i, &e) in values.iter().enumerate() {
            self.weights[i * self.capacity + slot] = quantize_value(e, self.scale, floor);
        }
        self.global_ids.push(global_id);
        self.current[slot] = 0;
        self.voltage[slot] = 0;
        self.fired[slot] = false;
        self.occupied += 1;
        Ok(slot)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + 8 * self.occupied + self.n_components * self.occupied);
        out.extend_from_slice(CHIP_MAGIC);
        put_u32(&mut out, CHIP_VERSION);
        put_u32(&mut out, self.n_components as u32);
        put_u32(&mut out, self.capacity as u32);
        put_u32(&mut out, self.occupied as u32);
        out.extend_from_slice(&self.scale.to_le_bytes());
        for &id in &self.global_ids {
            put_u64(&mut out, id);
        }
        for r in 0..self.n_components {
            let row = &self.weights[r * self.capacity..][..self.occupied];
            out.extend(row.iter().map(|&w| w as u8));
        }
        out
    }

    pub fn from_reader(r: impl Read, q: QuantParams) -> Result<Self> {
        let mut r = LeReader::new(r);
        r.magic(CHIP_MAGIC)?;
        let at = r.offset();
        let version = r.u32()?;
        if version != CHIP_VERSION {
            return Err(Error::format(at, format!("unsupported chip version {version}")));
        }
        let nc = r.u32()? as usize;
        let capacity = r.u32()? as usize;
        let at = r.offset();
        let occupied = r.u32()? as usize;
        if occupied > capacity || nc == 0 {
            return Err(Error::format(at, format!("occupied {occupied} > capacity {capacity}")));
        }
        let scale = r.f32()?;
        let ids = (0..occupied).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let top = r.i8s(nc * occupied)?;
        r.at_eof()?;
        let mut chip = ChipStore::empty(nc, capacity, q);
        chip.scale = scale;
        for row in 0..nc {
            chip.weights[row * capacity..][..occupied].copy_from_slice(&top[row * occupied..][..occupied]);
        }
        chip.global_ids = ids;
        chip.global_ids.reserve(capacity - occupied);
        chip.occupied = occupied;
        Ok(chip)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path, q: QuantParams) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(bytes.as_slice(), q)
    }
}

/// Runs one pattern on one chip with no wavefront delay, returning the
/// timestep at which each slot fired (`None` if it did not) over `steps`
/// timesteps. The chip is reset before and after.
pub fn simulate_chip(chip: &mut ChipStore, pattern: &SpikePattern, steps: u32) -> Vec<Option<u32>> {
    chip.reset();
    let mut fired_at = vec![None; chip.occupied()];
    let events = pattern.events();
    let mut cursor = 0;
    let mut incoming = Vec::new();
    for t in 0..steps {
        incoming.clear();
        while cursor < events.len() && events[cursor].timestep == t {
            incoming.push(events[cursor].channel);
            cursor += 1;
        }
        for slot in chip.step(&incoming) {
            fired_at[slot as usize] = Some(t + 1);
        }
    }
    chip.reset();
    fired_at
}

/// Result of threshold calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct Threshold {
    /// Threshold in scale-free units (`V / scale`); each chip gets
    /// `round(value · scale)`.
    pub value: f64,
    /// Per-key maxima that produced the median, in the same units.
    pub maxima: Vec<f64>,
}

/// Integer threshold for a chip given a scale-free threshold.
pub fn chip_threshold(value: f64, scale: f32) -> i64 {
    if !value.is_finite() {
        return THETA_INFINITE;
    }
    ((value * scale as f64).round() as i64).max(1)
}

/// Sets every chip's `theta_v` so that the median calibration key's best
/// match reaches threshold at timestep `target + 1`, i.e. the median over keys
/// of the largest `V(target + 1) / scale` across all chips.
pub fn tune_threshold(
    chips: &mut [ChipStore],
    keys: &[EncodedKey],
    codec: &CodecParams,
    target: u32,
) -> Result<Threshold> {
    tune_threshold_excluding(chips, keys, &[], codec, target)
}

/// Like [`tune_threshold`], but the neuron storing `exclude[i]` is left out
/// of key `i`'s maximum. Calibrating on stored points this way measures the
/// best match to a key that is not in the index.
pub fn tune_threshold_excluding(
    chips: &mut [ChipStore],
    keys: &[EncodedKey],
    exclude: &[Option<u64>],
    codec: &CodecParams,
    target: u32,
) -> Result<Threshold> {
    if keys.is_empty() {
        return Err(Error::Config("threshold tuning needs at least one calibration key".into()));
    }
    let saved: Vec<i64> = chips.iter().map(|c| c.theta_v).collect();
    let mut maxima = Vec::with_capacity(keys.len());
    for (i, key) in keys.iter().enumerate() {
        let skip = exclude.get(i).copied().flatten();
        let pattern = crate::spikecodec::encode_spikes(key, codec)?;
        let mut best = f64::NEG_INFINITY;
        for chip in chips.iter_mut() {
            if chip.occupied == 0 {
                continue;
            }
            chip.reset();
            chip.theta_v = THETA_INFINITE;
            let events = pattern.events();
            let mut cursor = 0;
            let mut incoming = Vec::new();
            for t in 0..=target {
                incoming.clear();
                while cursor < events.len() && events[cursor].timestep == t {
                    incoming.push(events[cursor].channel);
                    cursor += 1;
                }
                chip.step(&incoming);
            }
            let peak = chip.voltage[..chip.occupied]
                .iter()
                .zip(&chip.global_ids)
                .filter(|(_, &id)| Some(id) != skip)
                .map(|(&v, _)| v)
                .max();
            if let Some(v) = peak {
                best = best.max(v as f64 / chip.scale as f64);
            }
            chip.reset();
        }
        maxima.push(best);
    }
    for (chip, theta) in chips.iter_mut().zip(saved) {
        chip.theta_v = theta;
    }
    let mut sorted = maxima.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let value = if sorted.len() % 2 == 1 { sorted[mid] } else { 0.5 * (sorted[mid - 1] + sorted[mid]) };
    if !(value > 0.0) {
        return Err(Error::NoActivity);
    }
    for chip in chips.iter_mut() {
        chip.theta_v = chip_threshold(value, chip.scale);
    }
    Ok(Threshold { value, maxima })
}

/// Dequantized stored pattern `slot` (approximately the original column).
pub fn dequantized_column(chip: &ChipStore, slot: usize) -> Vec<f32> {
    chip.column(slot).into_iter().map(|w| w as f32 / chip.scale).collect()
}

/// Integer dot products of every stored pattern with `values`, scaled back by
/// the chip scale. Used for float vs integer ranking comparisons.
pub fn quantized_scores(block: &QuantizedBlock, key: ArrayView1<'_, f32>) -> Vec<f32> {
    let nc = block.weights.nrows() / 2;
    block
        .weights
        .slice(ndarray::s![..nc, ..])
        .axis_iter(Axis(1))
        .map(|col| col.iter().zip(key.iter()).map(|(&w, &k)| w as f32 * k).sum::<f32>() / block.scale)
        .collect()
}
