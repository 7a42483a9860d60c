//! Node configuration.
//!
//! The gateway parses its key=value config file and environment overrides
//! into these structs; tests construct them directly.

use crate::codec::SealKey;
use crate::raster::DEFAULT_RASTER_SIZE;
use std::path::PathBuf;
use thiserror::Error;

/// Default Hamming prefilter radius for candidate selection.
pub const DEFAULT_HAMMING_RADIUS: u32 = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("station id {0:?} is duplicated")]
    DuplicateStation(String),
    #[error("station id {0:?} contains whitespace or is empty")]
    BadStationId(String),
    #[error("node id must be non-empty and free of whitespace")]
    BadNodeId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StationMode {
    Office,
    Banking,
    Surveillance,
}

impl std::str::FromStr for StationMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "office" => Ok(Self::Office),
            "banking" => Ok(Self::Banking),
            "surveillance" => Ok(Self::Surveillance),
            other => Err(format!("unknown station mode {other:?}")),
        }
    }
}

/// A capture point: office terminal, bank kiosk or surveillance camera.
#[derive(Clone, Debug)]
pub struct StationConfig {
    pub station_id: String,
    pub mode: StationMode,
    /// Line-JSON alert sink; in-memory only when unset.
    pub alert_sink_path: Option<PathBuf>,
    pub law_enforcement_label: Option<String>,
}

#[derive(Clone, Debug)]
pub struct NodeConfig {
    pub node_id: String,
    pub data_dir: PathBuf,
    pub raster_size: u32,
    /// Requested eigenface count; `None` selects by cumulative energy.
    pub k: Option<usize>,
    /// Overrides for the calibrated defaults.
    pub theta_accept: Option<f64>,
    pub theta_face: Option<f64>,
    pub hamming_radius: u32,
    pub listen_addr: String,
    pub seal_key: SealKey,
    pub stations: Vec<StationConfig>,
}

impl NodeConfig {
    /// Minimal config for tests and embedded use.
    pub fn for_node(node_id: &str, data_dir: impl Into<PathBuf>, seal_key: SealKey) -> Self {
        Self {
            node_id: node_id.to_string(),
            data_dir: data_dir.into(),
            raster_size: DEFAULT_RASTER_SIZE,
            k: None,
            theta_accept: None,
            theta_face: None,
            hamming_radius: DEFAULT_HAMMING_RADIUS,
            listen_addr: "127.0.0.1:7399".to_string(),
            seal_key,
            stations: Vec::new(),
        }
    }

    pub fn with_station(mut self, station: StationConfig) -> Self {
        self.stations.push(station);
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.node_id.is_empty() || self.node_id.chars().any(char::is_whitespace) {
            return Err(ConfigError::BadNodeId);
        }
        let mut seen = std::collections::BTreeSet::new();
        for station in &self.stations {
            let id = &station.station_id;
            if id.is_empty() || id.chars().any(char::is_whitespace) {
                return Err(ConfigError::BadStationId(id.clone()));
            }
            if !seen.insert(id.clone()) {
                return Err(ConfigError::DuplicateStation(id.clone()));
            }
        }
        Ok(())
    }

    pub fn station(&self, station_id: &str) -> Option<&StationConfig> {
        self.stations.iter().find(|s| s.station_id == station_id)
    }
}
