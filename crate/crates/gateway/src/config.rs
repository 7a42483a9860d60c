//! key=value configuration file with `FACEKEY_` environment overrides.
//!
//! ```text
//! # facekey.conf
//! node_id        = hq
//! data_dir       = ./facekey-data
//! raster_size    = 64
//! k              = 8            # omit for automatic selection
//! theta_accept   = 0.8          # omit to use calibrated defaults
//! theta_face     = 2.5
//! hamming_radius = 8
//! listen_addr    = 127.0.0.1:7399
//! seal_key_hex   = <64 hex characters>
//! stations       = lobby:office:alerts/lobby.jsonl;atm:banking:alerts/atm.jsonl:precinct-9
//! ```
//!
//! Every key can be overridden through the environment as
//! `FACEKEY_<UPPERCASED_KEY>`, e.g. `FACEKEY_LISTEN_ADDR=0.0.0.0:80`.

use crate::GatewayError;
use facekey_core::codec::SealKey;
use facekey_core::config::{NodeConfig, StationConfig, StationMode, DEFAULT_HAMMING_RADIUS};
use facekey_core::raster::DEFAULT_RASTER_SIZE;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

const KEYS: &[&str] = &[
    "node_id",
    "data_dir",
    "raster_size",
    "k",
    "theta_accept",
    "theta_face",
    "hamming_radius",
    "listen_addr",
    "seal_key_hex",
    "stations",
];

/// Loads the config file and applies environment overrides.
pub fn load_config(path: &Path) -> Result<NodeConfig, GatewayError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| GatewayError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut values = parse_pairs(&text)?;
    for key in KEYS {
        if let Ok(value) = std::env::var(format!("FACEKEY_{}", key.to_uppercase())) {
            values.insert(key.to_string(), value);
        }
    }
    build_config(&values)
}

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, GatewayError> {
    let mut values = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(GatewayError::Config(format!(
                "line {}: expected key=value, got {line:?}",
                lineno + 1
            )));
        };
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(GatewayError::Config(format!(
                "line {}: unknown key {key:?}",
                lineno + 1
            )));
        }
        values.insert(key.to_string(), value.trim().to_string());
    }
    Ok(values)
}

fn build_config(values: &BTreeMap<String, String>) -> Result<NodeConfig, GatewayError> {
    let required = |key: &str| -> Result<&String, GatewayError> {
        values
            .get(key)
            .ok_or_else(|| GatewayError::Config(format!("missing required key {key:?}")))
    };
    fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, GatewayError> {
        value
            .parse()
            .map_err(|_| GatewayError::Config(format!("bad value for {key:?}: {value:?}")))
    }

    let node_id = required("node_id")?.clone();
    let data_dir = PathBuf::from(required("data_dir")?);
    let seal_key = SealKey::from_hex(required("seal_key_hex")?)
        .map_err(|e| GatewayError::Config(format!("seal_key_hex: {e}")))?;

    let mut config = NodeConfig::for_node(&node_id, data_dir, seal_key);
    if let Some(v) = values.get("raster_size") {
        config.raster_size = parse_num("raster_size", v)?;
    } else {
        config.raster_size = DEFAULT_RASTER_SIZE;
    }
    if let Some(v) = values.get("k") {
        config.k = if v == "auto" {
            None
        } else {
            Some(parse_num("k", v)?)
        };
    }
    if let Some(v) = values.get("theta_accept") {
        config.theta_accept = Some(parse_num("theta_accept", v)?);
    }
    if let Some(v) = values.get("theta_face") {
        config.theta_face = Some(parse_num("theta_face", v)?);
    }
    if let Some(v) = values.get("hamming_radius") {
        config.hamming_radius = parse_num("hamming_radius", v)?;
    } else {
        config.hamming_radius = DEFAULT_HAMMING_RADIUS;
    }
    if let Some(v) = values.get("listen_addr") {
        config.listen_addr = v.clone();
    }
    if let Some(v) = values.get("stations") {
        config.stations = parse_stations(v)?;
    }
    config
        .validate()
        .map_err(|e| GatewayError::Config(e.to_string()))?;
    Ok(config)
}

/// `id:mode[:sink_path[:law_enforcement_label]]`, semicolon-separated.
fn parse_stations(spec: &str) -> Result<Vec<StationConfig>, GatewayError> {
    let mut stations = Vec::new();
    for part in spec.split(';').filter(|p| !p.trim().is_empty()) {
        let fields: Vec<&str> = part.trim().split(':').collect();
        if fields.len() < 2 || fields.len() > 4 {
            return Err(GatewayError::Config(format!(
                "station spec {part:?} must be id:mode[:sink[:label]]"
            )));
        }
        let mode: StationMode = fields[1]
            .parse()
            .map_err(|e: String| GatewayError::Config(e))?;
        stations.push(StationConfig {
            station_id: fields[0].to_string(),
            mode,
            alert_sink_path: fields
                .get(2)
                .filter(|s| !s.is_empty())
                .map(PathBuf::from),
            law_enforcement_label: fields.get(3).map(|s| s.to_string()),
        });
    }
    Ok(stations)
}
