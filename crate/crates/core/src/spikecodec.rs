//! Dual-channel spike-latency code for encoded keys.
//!
//! Component `i` of a key with `N_C` components maps to channel `i` when it is
//! positive and to channel `i + N_C` when it is negative. Its spike time is
//! `round(T (1 - |e_i| / e_max))`, so the largest magnitude spikes at 0 and
//! components at or below `theta_e · e_max` are dropped.

use serde::{Deserialize, Serialize};

use crate::encoding::EncodedKey;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecParams {
    /// Input window length in timesteps.
    pub window: u32,
    /// Pruning threshold as a fraction of the largest magnitude.
    pub theta_e: f64,
}

impl Default for CodecParams {
    fn default() -> Self {
        CodecParams { window: 60, theta_e: 0.1 }
    }
}

impl CodecParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 1 {
            return Err(Error::Config("window T must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.theta_e) {
            return Err(Error::Config(format!("theta_e must be in [0, 1), got {}", self.theta_e)));
        }
        Ok(())
    }
}

/// One input spike: `channel` fires at `timestep`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SpikeEvent {
    pub timestep: u32,
    pub channel: u32,
}

/// Spike events of one query, sorted by `(timestep, channel)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikePattern {
    n_components: usize,
    events: Vec<SpikeEvent>,
}

impl SpikePattern {
    /// Builds a pattern from raw events, checking the channel invariants.
    pub fn new(n_components: usize, mut events: Vec<SpikeEvent>) -> Result<Self> {
        events.sort_unstable();
        let mut seen = vec![false; n_components];
        for ev in &events {
            let ch = ev.channel as usize;
            if ch >= 2 * n_components {
                return Err(Error::Config(format!("channel {ch} outside 0..{}", 2 * n_components)));
            }
            let comp = ch % n_components;
            if std::mem::replace(&mut seen[comp], true) {
                return Err(Error::Config(format!("component {comp} spikes more than once")));
            }
        }
        Ok(SpikePattern { n_components, events })
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn n_channels(&self) -> usize {
        2 * self.n_components
    }

    pub fn events(&self) -> &[SpikeEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Latest spike time, if any.
    pub fn last_timestep(&self) -> Option<u32> {
        self.events.last().map(|e| e.timestep)
    }

    /// `[[channel, timestep], ...]`, the `--dump-spikes` format.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Array(self.events.iter().map(|e| serde_json::json!([e.channel, e.timestep])).collect())
    }

    pub fn from_json(n_components: usize, value: &serde_json::Value) -> Result<Self> {
        let pairs: Vec<(u32, u32)> = serde_json::from_value(value.clone())?;
        Self::new(n_components, pairs.into_iter().map(|(channel, timestep)| SpikeEvent { channel, timestep }).collect())
    }
}

/// Encodes `key` as a spike-latency pattern.
pub fn encode_spikes(key: &EncodedKey, params: &CodecParams) -> Result<SpikePattern> {
    let values = key.as_slice();
    let nc = values.len();
    let e_max = values.iter().fold(0f64, |m, &v| m.max((v as f64).abs()));
    if e_max == 0.0 {
        return Err(Error::EmptyKey);
    }
    let window = params.window as f64;
    let cut = params.theta_e * e_max;
    let mut events = Vec::new();
    for (i, &v) in values.iter().enumerate() {
        let v = v as f64;
        let magnitude = v.abs();
        if magnitude <= cut {
            continue;
        }
        let t = (window * (1.0 - magnitude / e_max)).round_ties_even().clamp(0.0, window) as u32;
        let channel = if v > 0.0 { i } else { i + nc } as u32;
        events.push(SpikeEvent { timestep: t, channel });
    }
    events.sort_unstable();
    Ok(SpikePattern { n_components: nc, events })
}

/// Number of input spikes in the pattern.
pub fn spike_count(pattern: &SpikePattern) -> usize {
    pattern.events.len()
}
