//! Face-as-primary-key identity infrastructure.
//!
//! A captured face raster is projected onto a trained eigenface basis and the
//! projection is quantized into a short checksummed text code that serves as
//! the person's primary key. A slim code index links one-to-many to a bulky
//! face-image store, replicates between nodes through an append-only log,
//! and backs three card-less workflows: office messaging and attendance,
//! banking authorization with fraud escalation, and suspect surveillance.
//!
//! Module map:
//!
//! - [`raster`] / [`pgm`] — capture normalization and the PGM interchange format
//! - [`linalg`] — dense symmetric eigensolver used during training
//! - [`faceml`] — eigenface model training, projection, thresholds
//! - [`codec`] — face output codes and the sealed-record envelope
//! - [`registry`] — the code index and image store (enroll/identify/lookup)
//! - [`workflows`] — messages, attendance, banking sessions, suspect index
//! - [`federation`] — append-only replication log and anti-entropy sync
//! - [`node`] — composition root wiring the stores together with persistence
//! - [`synth`] — deterministic synthetic corpora for tests and benches

pub mod codec;
pub mod config;
pub mod faceml;
pub mod federation;
pub mod linalg;
pub mod node;
pub mod pgm;
pub mod raster;
pub mod registry;
pub mod synth;
pub mod time;
pub mod wire;
pub mod workflows;

pub use codec::{FaceOutputCode, SealKey, SealedRecord, Sealer};
pub use config::{NodeConfig, StationConfig, StationMode};
pub use faceml::{EigenfaceModel, Embedding, Thresholds};
pub use node::Node;
pub use raster::{FaceRaster, GrayImage};
pub use registry::{MatchResult, PersonalData, Registry};
pub use time::Timestamp;
