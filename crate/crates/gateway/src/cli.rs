//! Operator CLI. Every subcommand loads the key=value config (default
//! `facekey.conf`, overridable with `--config` or `FACEKEY_CONFIG`) and
//! operates on the node's data directory.

use crate::config::load_config;
use crate::service;
use crate::stream::{run_stream, StreamManifest};
use crate::GatewayError;
use clap::{Parser, Subcommand};
use facekey_core::faceml::{EigenfaceModel, FaceMlError, Thresholds};
use facekey_core::federation::decode_frames;
use facekey_core::node::Node;
use facekey_core::raster::FaceRaster;
use facekey_core::registry::{MatchResult, PersonalData};
use facekey_core::time::Timestamp;
use facekey_core::pgm;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "facekey",
    version,
    about = "Face-output-code identity registry",
    max_term_width = 100
)]
pub struct Cli {
    /// Path to the key=value config file.
    #[arg(long, global = true, env = "FACEKEY_CONFIG", default_value = "facekey.conf")]
    pub config: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train the eigenface model from a directory of PGM images.
    ///
    /// Subdirectories group captures of one person and drive threshold
    /// calibration; a flat directory trains without calibration (set
    /// theta_accept/theta_face in the config in that case). Training starts
    /// a fresh registry in the data directory.
    Train {
        dir: PathBuf,
        /// Component count; defaults to the config `k` or automatic selection.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Enroll a face as a new identity.
    Enroll {
        image: PathBuf,
        #[arg(long)]
        name: String,
        #[arg(long, default_value = "")]
        address: String,
        #[arg(long, default_value = "")]
        phone: String,
        /// Extra personal attributes as key=value; repeatable.
        #[arg(long = "attr", value_parser = parse_attr)]
        attrs: Vec<(String, String)>,
        #[arg(long, default_value = "cli")]
        source: String,
        /// Capture timestamp in Unix milliseconds; defaults to now.
        #[arg(long)]
        now: Option<i64>,
    },
    /// Identify a face against the registry.
    Identify { image: PathBuf },
    /// Run the HTTP service on the configured listen address.
    Serve,
    /// Replay a frame manifest against a station.
    Stream {
        manifest: PathBuf,
        #[arg(long)]
        station: String,
    },
    /// Pull missing replication entries from a peer and apply them.
    Sync {
        /// Peer address, e.g. http://10.0.0.2:7399
        #[arg(long)]
        peer: String,
    },
    /// Write the code-index snapshot to a file.
    ExportIndex { path: PathBuf },
    /// Suspect index operations.
    Suspects {
        #[command(subcommand)]
        command: SuspectsCommand,
    },
}

#[derive(Subcommand)]
pub enum SuspectsCommand {
    /// List suspect records.
    List,
}

fn parse_attr(raw: &str) -> Result<(String, String), String> {
    raw.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected key=value, got {raw:?}"))
}

fn wall_clock() -> Timestamp {
    Timestamp(
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .unwrap_or_default()
            .as_millis() as i64,
    )
}

/// Runs a parsed command; the returned code becomes the process exit status.
pub fn run(cli: Cli) -> Result<i32, GatewayError> {
    let config = load_config(&cli.config)?;
    match cli.command {
        Command::Train { dir, k } => {
            let groups = read_training_dir(&dir, config.raster_size)?;
            let samples: Vec<FaceRaster> = groups.iter().flatten().cloned().collect();
            let k = k.or(config.k);
            let model = EigenfaceModel::train(&samples, k).map_err(node_err)?;
            let calibrated = match Thresholds::calibrate(&model, &groups) {
                Ok(t) => Some(t),
                Err(FaceMlError::CalibrationUnderdetermined) => None,
                Err(e) => return Err(node_err(e)),
            };
            let node = Node::initialize(config, model, calibrated)?;
            println!(
                "trained: samples={} k={} raster={}",
                samples.len(),
                node.registry().model().component_count(),
                node.registry().model().raster_size()
            );
            let t = node.registry().params().thresholds;
            println!("thresholds: accept={:.6} face={:.6}", t.accept, t.face);
            Ok(0)
        }

        Command::Enroll {
            image,
            name,
            address,
            phone,
            attrs,
            source,
            now,
        } => {
            let mut node = Node::open(config)?;
            let raster = load_raster(&node, &image)?;
            let mut personal = PersonalData::named(&name);
            personal.address = address;
            personal.phone = phone;
            personal.attributes = attrs.into_iter().collect();
            let now = now.map(Timestamp).unwrap_or_else(wall_clock);
            let code = node.enroll(&raster, personal, now, &source)?;
            node.save()?;
            println!("{}", code.render());
            Ok(0)
        }

        Command::Identify { image } => {
            let node = Node::open(config)?;
            let raster = load_raster(&node, &image)?;
            let result = node.identify(&raster)?;
            println!("{}", identify_line(&result));
            Ok(match result {
                MatchResult::Recognized { .. } => 0,
                _ => 1,
            })
        }

        Command::Serve => {
            let node = Node::open(config)?;
            let handle = service::serve(node)?;
            eprintln!("listening on {}", handle.addr);
            handle.join();
            Ok(0)
        }

        Command::Stream { manifest, station } => {
            let mut node = Node::open(config)?;
            let manifest = StreamManifest::load(&manifest)?;
            let summary = run_stream(&mut node, &manifest, &station)?;
            println!("{}", serde_json::to_string(&summary).unwrap());
            Ok(0)
        }

        Command::Sync { peer } => {
            let mut node = Node::open(config)?;
            let url = if peer.starts_with("http://") || peer.starts_with("https://") {
                format!("{peer}/sync")
            } else {
                format!("http://{peer}/sync")
            };
            let vector = serde_json::to_string(node.applied_vector()).unwrap();
            let response = ureq::post(&url)
                .set("Content-Type", "application/json")
                .send_string(&vector)
                .map_err(|e| GatewayError::Sync(e.to_string()))?;
            let mut bytes = Vec::new();
            use std::io::Read;
            response
                .into_reader()
                .read_to_end(&mut bytes)
                .map_err(|e| GatewayError::Sync(e.to_string()))?;
            let entries = decode_frames(&bytes).map_err(node_err)?;
            let report = node.apply_entries(entries);
            node.save()?;
            println!("{}", serde_json::to_string(&report).unwrap());
            Ok(0)
        }

        Command::ExportIndex { path } => {
            let node = Node::open(config)?;
            std::fs::write(&path, node.export_index())
                .map_err(|e| GatewayError::Io(format!("writing {}: {e}", path.display())))?;
            println!("{}", path.display());
            Ok(0)
        }

        Command::Suspects { command } => match command {
            SuspectsCommand::List => {
                let node = Node::open(config)?;
                let suspects: Vec<_> = node.suspects().records().collect();
                if suspects.is_empty() {
                    println!("no suspects");
                } else {
                    for record in suspects {
                        println!(
                            "{} activity={} images={}",
                            record.code.render(),
                            record.activity_log.len(),
                            record.image_ids.len()
                        );
                    }
                }
                Ok(0)
            }
        },
    }
}

fn node_err(e: impl Into<facekey_core::node::NodeError>) -> GatewayError {
    GatewayError::Node(e.into())
}

fn load_raster(node: &Node, path: &Path) -> Result<FaceRaster, GatewayError> {
    let bytes = std::fs::read(path)
        .map_err(|e| GatewayError::Io(format!("reading {}: {e}", path.display())))?;
    Ok(node.normalize_pgm(&bytes)?)
}

/// Reads a training directory: subdirectories are identities, loose PGM
/// files are singleton identities. Deterministic (sorted) order.
fn read_training_dir(dir: &Path, size: u32) -> Result<Vec<Vec<FaceRaster>>, GatewayError> {
    let mut subdirs = Vec::new();
    let mut loose = Vec::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| GatewayError::Io(format!("reading {}: {e}", dir.display())))?;
    for entry in entries {
        let entry = entry.map_err(|e| GatewayError::Io(e.to_string()))?;
        let path = entry.path();
        if path.is_dir() {
            subdirs.push(path);
        } else if path.extension().is_some_and(|e| e == "pgm") {
            loose.push(path);
        }
    }
    subdirs.sort();
    loose.sort();

    let mut groups = Vec::new();
    for subdir in subdirs {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&subdir)
            .map_err(|e| GatewayError::Io(e.to_string()))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
            .collect();
        files.sort();
        let group = files
            .iter()
            .map(|f| load_training_image(f, size))
            .collect::<Result<Vec<_>, _>>()?;
        if !group.is_empty() {
            groups.push(group);
        }
    }
    for file in loose {
        groups.push(vec![load_training_image(&file, size)?]);
    }
    Ok(groups)
}

fn load_training_image(path: &Path, size: u32) -> Result<FaceRaster, GatewayError> {
    let bytes = std::fs::read(path)
        .map_err(|e| GatewayError::Io(format!("reading {}: {e}", path.display())))?;
    let image = pgm::parse(&bytes).map_err(node_err)?;
    facekey_core::raster::normalize_raster(&image, size).map_err(node_err)
}

/// Parity helper for tests: the CLI's identify line for a match result.
pub fn identify_line(result: &MatchResult) -> String {
    match result {
        MatchResult::Recognized { code, distance } => {
            format!("RECOGNIZED {} {distance}", code.render())
        }
        MatchResult::Unrecognized { .. } => "UNRECOGNIZED".to_string(),
        MatchResult::NotAFace { dffs } => format!("NOT_A_FACE {dffs}"),
    }
}
