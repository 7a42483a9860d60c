//! Simulated capture streams: a manifest of PGM frames with timestamps,
//! replayed against one station in manifest order.
//!
//! Manifest lines are `<frame-path> <timestamp-millis>`, `#` comments and
//! blank lines allowed; timestamps must be non-decreasing. Unreadable or
//! unparsable frames are skipped and counted, the run continues.

use crate::GatewayError;
use facekey_core::config::StationMode;
use facekey_core::node::Node;
use facekey_core::time::Timestamp;
use serde::Serialize;
use std::path::{Path, PathBuf};

pub struct StreamManifest {
    pub frames: Vec<(PathBuf, Timestamp)>,
}

impl StreamManifest {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Manifest(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut frames: Vec<(PathBuf, Timestamp)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((frame, ts)) = line.rsplit_once(char::is_whitespace) else {
                return Err(GatewayError::Manifest(format!(
                    "line {}: expected <path> <timestamp>",
                    lineno + 1
                )));
            };
            let timestamp: i64 = ts.trim().parse().map_err(|_| {
                GatewayError::Manifest(format!("line {}: bad timestamp {ts:?}", lineno + 1))
            })?;
            let timestamp = Timestamp(timestamp);
            if let Some((_, last)) = frames.last() {
                if timestamp < *last {
                    return Err(GatewayError::Manifest(format!(
                        "line {}: timestamps must be non-decreasing",
                        lineno + 1
                    )));
                }
            }
            let frame_path = {
                let p = PathBuf::from(frame.trim());
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            };
            frames.push((frame_path, timestamp));
        }
        Ok(Self { frames })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct StreamSummary {
    pub frames: usize,
    pub processed: usize,
    pub skipped: usize,
    pub alerts: usize,
}

/// Replays the manifest against a station. Office stations identify and
/// deliver due messages, banking stations run the authorization state
/// machine (the stream shares one session named after the station), and
/// surveillance stations match frames against the suspect index.
pub fn run_stream(
    node: &mut Node,
    manifest: &StreamManifest,
    station_id: &str,
) -> Result<StreamSummary, GatewayError> {
    let mode = node
        .config()
        .station(station_id)
        .ok_or_else(|| {
            GatewayError::Node(facekey_core::node::NodeError::UnknownStation(
                station_id.to_string(),
            ))
        })?
        .mode;

    let mut summary = StreamSummary {
        frames: manifest.frames.len(),
        ..StreamSummary::default()
    };
    let alerts_before = node.sink_alerts(station_id).len();

    for (path, timestamp) in &manifest.frames {
        let raster = match std::fs::read(path).map(|bytes| node.normalize_pgm(&bytes)) {
            Ok(Ok(raster)) => raster,
            _ => {
                summary.skipped += 1;
                continue;
            }
        };
        match mode {
            StationMode::Office => {
                node.office_frame(station_id, &raster, *timestamp)?;
            }
            StationMode::Banking => {
                node.authorize(station_id, station_id, &raster, *timestamp)?;
            }
            StationMode::Surveillance => {
                node.surveil(station_id, &raster, *timestamp)?;
            }
        }
        summary.processed += 1;
    }
    summary.alerts = node.sink_alerts(station_id).len() - alerts_before;
    node.save()?;
    Ok(summary)
}
