//! Shared fixtures for the gateway integration tests: temp directories,
//! config files, and corpora that went through the PGM capture path so
//! training statistics match what the service will see.

// Each test target compiles its own copy and uses a subset.
#![allow(dead_code)]

use facekey_core::codec::SealKey;
use facekey_core::config::{NodeConfig, StationConfig, StationMode};
use facekey_core::faceml::{EigenfaceModel, Thresholds};
use facekey_core::node::Node;
use facekey_core::pgm;
use facekey_core::raster::FaceRaster;
use facekey_core::synth;
use std::path::{Path, PathBuf};

pub const SIZE: u32 = 16;
pub const SEAL_HEX: &str = "9f8e7d6c5b4a39281706f5e4d3c2b1a09f8e7d6c5b4a39281706f5e4d3c2b1a0";

pub fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!(
        "facekey-gw-{tag}-{}-{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .unwrap()
            .as_nanos()
    ));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

pub fn stations() -> Vec<StationConfig> {
    vec![
        StationConfig {
            station_id: "lobby".into(),
            mode: StationMode::Office,
            alert_sink_path: Some(PathBuf::from("alerts/lobby.jsonl")),
            law_enforcement_label: None,
        },
        StationConfig {
            station_id: "atm".into(),
            mode: StationMode::Banking,
            alert_sink_path: Some(PathBuf::from("alerts/atm.jsonl")),
            law_enforcement_label: Some("precinct-9".into()),
        },
        StationConfig {
            station_id: "cam".into(),
            mode: StationMode::Surveillance,
            alert_sink_path: Some(PathBuf::from("alerts/cam.jsonl")),
            law_enforcement_label: Some("precinct-9".into()),
        },
    ]
}

pub fn node_config(node_id: &str, data_dir: &Path) -> NodeConfig {
    let mut config = NodeConfig::for_node(
        node_id,
        data_dir,
        SealKey::from_hex(SEAL_HEX).unwrap(),
    );
    config.raster_size = SIZE;
    config.listen_addr = "127.0.0.1:0".into();
    config.stations = stations();
    config
}

/// Round-trips a raster through the PGM capture path, exactly as an upload
/// or stream frame would arrive.
pub fn recapture(node_size: u32, raster: &FaceRaster) -> FaceRaster {
    let bytes = pgm::raster_to_pgm(raster);
    let image = pgm::parse(&bytes).unwrap();
    facekey_core::raster::normalize_raster(&image, node_size).unwrap()
}

/// A corpus whose every raster went through PGM quantization + capture
/// normalization, so models trained on it match service-side statistics.
pub fn captured_corpus(seed: u64, identities: usize, captures: usize) -> synth::Corpus {
    let raw = synth::corpus(seed, identities, captures, SIZE);
    synth::Corpus {
        size: SIZE,
        identities: raw
            .identities
            .iter()
            .map(|id| synth::SyntheticIdentity {
                enrolled: id.enrolled.iter().map(|r| recapture(SIZE, r)).collect(),
                probes: id.probes.iter().map(|r| recapture(SIZE, r)).collect(),
            })
            .collect(),
    }
}

/// Trains and initializes a node on a captured corpus.
pub fn trained_node(tag: &str, node_id: &str, corpus: &synth::Corpus) -> Node {
    let dir = temp_dir(tag);
    let model =
        EigenfaceModel::train(&corpus.training_set(), Some(synth::RECOMMENDED_COMPONENTS))
            .unwrap();
    let thresholds = Thresholds::calibrate(&model, &corpus.enrolled_groups()).unwrap();
    Node::initialize(node_config(node_id, &dir), model, Some(thresholds)).unwrap()
}

/// First capture of an identity that passes the node's face gate.
pub fn gate_passing(node: &Node, corpus: &synth::Corpus, identity: usize) -> FaceRaster {
    let face = node.registry().params().thresholds.face;
    corpus.identities[identity]
        .enrolled
        .iter()
        .find(|r| node.registry().model().project(r).unwrap().dffs() <= face)
        .expect("no capture passes the face gate")
        .clone()
}

pub fn pgm_bytes(raster: &FaceRaster) -> Vec<u8> {
    pgm::raster_to_pgm(raster)
}

/// An unseen face, as PGM bytes, that still passes the node's face gate
/// after going through the capture path.
pub fn plausible_captured_unseen(
    node: &Node,
    rng: &mut rand_chacha::ChaCha20Rng,
) -> (Vec<u8>, FaceRaster) {
    let face = node.registry().params().thresholds.face;
    for _ in 0..64 {
        let raw = synth::unseen_face(rng, SIZE);
        let bytes = pgm::raster_to_pgm(&raw);
        let captured = node.normalize_pgm(&bytes).unwrap();
        let embedding = node.registry().model().project(&captured).unwrap();
        if embedding.dffs() <= 0.95 * face {
            return (bytes, captured);
        }
    }
    panic!("no plausible unseen capture after 64 draws");
}
