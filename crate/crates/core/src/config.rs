//! Index and mesh configuration, read from TOML.
//!
//! ```toml
//! columns = 3
//! chips_per_column = 256
//! column_width = 4
//! capacity = 2400
//! window = 60
//! theta_e = 0.1
//! theta_v = "auto"      # or a number in scale-free voltage units
//! theta_w = 0.0
//! t_max = 600           # defaults to 10 * window
//!
//! [cost]
//! input_us = 5.8
//! integration_us = 5.8
//! per_spike_in_us = 0.0
//! per_spike_out_us = 0.0
//! ```

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::mesh::{CostModel, MeshTopology};
use crate::neurocore::{accumulators_fit, QuantParams, DEFAULT_CAPACITY};
use crate::spikecodec::CodecParams;

/// Firing threshold: calibrated from the data or fixed.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ThetaV {
    #[default]
    Auto,
    /// Scale-free threshold; each chip uses `round(value · scale)`.
    Fixed(f64),
}

impl Serialize for ThetaV {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ThetaV::Auto => s.serialize_str("auto"),
            ThetaV::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for ThetaV {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(ThetaV::Fixed(v)),
            Raw::Int(v) => Ok(ThetaV::Fixed(v as f64)),
            Raw::Word(w) if w.eq_ignore_ascii_case("auto") => Ok(ThetaV::Auto),
            Raw::Word(w) => Err(serde::de::Error::custom(format!("theta_v must be a number or \"auto\", got {w:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexConfig {
    pub columns: usize,
    pub chips_per_column: usize,
    pub column_width: usize,
    pub capacity: usize,
    #[serde(alias = "T")]
    pub window: u32,
    pub theta_e: f64,
    #[serde(alias = "theta_V")]
    pub theta_v: ThetaV,
    #[serde(alias = "theta_W")]
    pub theta_w: f64,
    /// Mesh timestep horizon per query; `None` means `10 · window`.
    pub t_max: Option<u32>,
    /// Keys sampled from the dataset for `theta_v = "auto"`.
    pub calibration_keys: usize,
    /// Calibration target timestep; `None` means `window`.
    pub calibration_target: Option<u32>,
    pub seed: u64,
    /// Threads stepping chips; 0 lets the runtime decide.
    pub workers: usize,
    /// `None` picks a flat per-timestep cost from the dataset size.
    pub cost: Option<CostModel>,
}

impl Default for IndexConfig {
    fn default() -> Self {
        let topo = MeshTopology::default();
        IndexConfig {
            columns: topo.n_columns,
            chips_per_column: topo.chips_per_column,
            column_width: topo.column_width,
            capacity: DEFAULT_CAPACITY,
            window: 60,
            theta_e: 0.1,
            theta_v: ThetaV::Auto,
            theta_w: 0.0,
            t_max: None,
            calibration_keys: 16,
            calibration_target: None,
            seed: 0,
            workers: 0,
            cost: None,
        }
    }
}

impl IndexConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: IndexConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn topology(&self) -> MeshTopology {
        MeshTopology {
            n_columns: self.columns,
            chips_per_column: self.chips_per_column,
            column_width: self.column_width,
        }
    }

    pub fn codec(&self) -> CodecParams {
        CodecParams { window: self.window, theta_e: self.theta_e }
    }

    pub fn quant(&self) -> QuantParams {
        QuantParams { theta_w: self.theta_w }
    }

    pub fn t_max(&self) -> u32 {
        self.t_max.unwrap_or(10 * self.window)
    }

    pub fn calibration_target(&self) -> u32 {
        self.calibration_target.unwrap_or(self.window)
    }

    pub fn cost_for(&self, dataset_size: usize) -> CostModel {
        self.cost.unwrap_or_else(|| CostModel::for_dataset_size(dataset_size))
    }

    /// Total pattern slots on the mesh.
    pub fn mesh_capacity(&self) -> usize {
        self.topology().n_chips() * self.capacity
    }

    pub fn validate(&self, n_components: usize) -> Result<()> {
        self.topology().validate()?;
        self.codec().validate()?;
        self.quant().validate()?;
        if self.capacity == 0 {
            return Err(Error::Config("capacity must be positive".into()));
        }
        if self.t_max() == 0 {
            return Err(Error::Config("t_max must be positive".into()));
        }
        if let ThetaV::Fixed(v) = self.theta_v {
            if !(v > 0.0) {
                return Err(Error::Config(format!("theta_v must be positive, got {v}")));
            }
        } else if self.calibration_keys == 0 {
            return Err(Error::Config("calibration_keys must be positive for theta_v = \"auto\"".into()));
        }
        let horizon = self.t_max() as u64 + self.topology().layers_per_column() as u64;
        if !accumulators_fit(horizon, n_components as u64) {
            return Err(Error::Config(format!(
                "accumulators cannot hold {horizon} timesteps of {n_components} components"
            )));
        }
        Ok(())
    }
}
