//! Operational shell around the face-output-code registry: a key=value
//! configuration file, an HTTP service for external systems, a CLI for
//! operators, and a simulated capture stream that replays PGM frames
//! against a station.

pub mod cli;
pub mod config;
pub mod service;
pub mod stream;

use facekey_core::node::NodeError;
use facekey_core::registry::RegistryError;
use facekey_core::workflows::WorkflowError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("config error: {0}")]
    Config(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("peer sync failed: {0}")]
    Sync(String),
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    Node(#[from] NodeError),
}

impl GatewayError {
    /// Stable machine-readable error code for the structured JSON error
    /// surface shared by the HTTP API and the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::Config(_) => "ConfigError",
            GatewayError::Manifest(_) => "ManifestError",
            GatewayError::BadRequest(_) => "BadRequest",
            GatewayError::Sync(_) => "SyncError",
            GatewayError::Io(_) => "IoError",
            GatewayError::Node(node) => node_error_code(node),
        }
    }

    /// HTTP status the error maps to.
    pub fn status(&self) -> u16 {
        match self {
            GatewayError::Config(_) => 500,
            GatewayError::Manifest(_) => 400,
            GatewayError::BadRequest(_) => 400,
            GatewayError::Sync(_) => 502,
            GatewayError::Io(_) => 500,
            GatewayError::Node(node) => node_error_status(node),
        }
    }

    /// One-line JSON rendering: `{"code": ..., "message": ...}`.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "code": self.code(), "message": self.to_string() }).to_string()
    }
}

fn node_error_code(error: &NodeError) -> &'static str {
    match error {
        NodeError::ModelMissing(_) => "ModelMissing",
        NodeError::ThresholdsMissing => "ThresholdsMissing",
        NodeError::UnknownStation(_) => "UnknownStation",
        NodeError::BadLabel(_) => "ValidationError",
        NodeError::NoEvidence(_) => "NoEvidence",
        NodeError::Storage(_) | NodeError::Corrupt(_) => "StorageFailure",
        NodeError::Config(_) => "ConfigError",
        NodeError::Raster(_) | NodeError::Pgm(_) => "MalformedImage",
        NodeError::FaceMl(e) => match e {
            facekey_core::faceml::FaceMlError::InsufficientSamples { .. } => "InsufficientSamples",
            facekey_core::faceml::FaceMlError::DegenerateTrainingSet => "DegenerateTrainingSet",
            _ => "ModelError",
        },
        NodeError::Codec(e) => match e {
            facekey_core::codec::CodecError::MalformedCode => "MalformedCode",
            facekey_core::codec::CodecError::ChecksumError => "ChecksumError",
            facekey_core::codec::CodecError::AuthenticationFailure => "AuthenticationFailure",
            _ => "CodecError",
        },
        NodeError::Registry(e) => registry_error_code(e),
        NodeError::Workflow(e) => match e {
            WorkflowError::PolicyViolation => "PolicyViolation",
            WorkflowError::InvalidInterval { .. } => "InvalidInterval",
            WorkflowError::NotRecognized { .. } => "NotRecognized",
            WorkflowError::ClockSkew { .. } => "ClockSkew",
            WorkflowError::UnknownSuspect { .. } => "UnknownSuspect",
            WorkflowError::Validation(_) => "ValidationError",
            WorkflowError::Registry(r) => registry_error_code(r),
        },
        NodeError::Federation(_) => "MalformedFrames",
    }
}

fn registry_error_code(error: &RegistryError) -> &'static str {
    match error {
        RegistryError::NotAFace { .. } => "NotAFace",
        RegistryError::DuplicateIdentity { .. } => "DuplicateIdentity",
        RegistryError::UnknownCode { .. } => "UnknownCode",
        RegistryError::Validation(_) => "ValidationError",
        RegistryError::CodeSpaceExhausted => "CodeSpaceExhausted",
        _ => "RegistryError",
    }
}

fn node_error_status(error: &NodeError) -> u16 {
    match node_error_code(error) {
        "UnknownCode" | "UnknownStation" | "UnknownSuspect" | "NoEvidence" => 404,
        "DuplicateIdentity" | "PolicyViolation" | "ClockSkew" | "CodeSpaceExhausted" => 409,
        "NotAFace" | "ValidationError" | "InvalidInterval" | "MalformedImage"
        | "MalformedCode" | "ChecksumError" | "MalformedFrames" | "InsufficientSamples"
        | "DegenerateTrainingSet" => 400,
        "NotRecognized" | "AuthenticationFailure" => 403,
        "ModelMissing" | "ThresholdsMissing" => 503,
        _ => 500,
    }
}
