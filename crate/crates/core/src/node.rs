//! Composition root: one node wiring the registry, workflow stores and
//! federation log together, with durable state under a data directory.
//!
//! Directory layout:
//!
//! ```text
//! <data_dir>/
//!   model.efm                 eigenface model
//!   state.fcst                state container (identities, messages, log, ...)
//!   index.fcix                code-index snapshot (written on save)
//!   images/<id>.pgm           face image store + manifest.txt
//!   suspect_images/<id>.pgm   suspect evidence store + manifest.txt
//!   alerts/<station>.jsonl    alert sinks (paths from config)
//! ```
//!
//! Every mutation flows through the same applier whether it originated
//! locally or arrived through sync, so node state is a pure function of
//! configuration plus operation history — replaying a replication log on a
//! fresh node reproduces the code index byte for byte.

use crate::codec::{CodecError, FaceOutputCode, Sealer};
use crate::config::{ConfigError, NodeConfig, StationMode};
use crate::faceml::{EigenfaceModel, Embedding, FaceMlError, Thresholds};
use crate::federation::{
    ApplyReport, FederationError, FederationState, Mutation, ReplicationEntry,
};
use crate::pgm::{self, PgmError};
use crate::raster::{normalize_raster, FaceRaster, GrayImage, RasterError};
use crate::registry::{
    FaceImageRecord, IdentityRecord, MatchParams, MatchResult, PersonalData, Registry,
    RegistryError,
};
use crate::time::Timestamp;
use crate::wire::{Reader, Writer};
use crate::workflows::{
    Alert, AlertPreference, AttendanceEvent, AttendanceLog, AuthOutcome, BankingSessions,
    Category, Direction, LinkOutcome, Message, OfficeStore, SuspectIndex, SuspectRecord,
    WorkflowError,
};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

const CONTAINER_MAGIC: &[u8; 4] = b"FCST";
const CONTAINER_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("no trained model at {0}; run train first")]
    ModelMissing(PathBuf),
    #[error("no thresholds: train with identity-labeled groups or set theta_accept/theta_face")]
    ThresholdsMissing,
    #[error("station {0:?} is not configured")]
    UnknownStation(String),
    #[error("label {0:?} must be non-empty, without whitespace, at most 255 bytes")]
    BadLabel(String),
    #[error("suspect {0} has no local evidence raster to enroll from")]
    NoEvidence(FaceOutputCode),
    #[error("storage failure: {0}")]
    Storage(String),
    #[error("state container corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Pgm(#[from] PgmError),
    #[error(transparent)]
    FaceMl(#[from] FaceMlError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Federation(#[from] FederationError),
}

fn io_err(context: &str, e: std::io::Error) -> NodeError {
    NodeError::Storage(format!("{context}: {e}"))
}

pub struct Node {
    config: NodeConfig,
    sealer: Sealer,
    registry: Registry,
    office: OfficeStore,
    attendance: AttendanceLog,
    banking: BankingSessions,
    suspects: SuspectIndex,
    federation: FederationState,
    sinks: BTreeMap<String, Vec<Alert>>,
    /// Replicated mutations whose target code has not arrived yet.
    orphans: Vec<(String, Timestamp, Mutation)>,
    calibrated: Option<Thresholds>,
}

impl Node {
    /// Creates a brand-new node around a freshly trained model and writes
    /// the initial on-disk state.
    pub fn initialize(
        config: NodeConfig,
        model: EigenfaceModel,
        calibrated: Option<Thresholds>,
    ) -> Result<Self, NodeError> {
        config.validate()?;
        let thresholds = resolve_thresholds(&config, calibrated)?;
        let params = MatchParams {
            thresholds,
            hamming_radius: config.hamming_radius,
        };
        std::fs::create_dir_all(&config.data_dir)
            .map_err(|e| io_err("creating data dir", e))?;
        std::fs::write(config.data_dir.join("model.efm"), model.to_bytes())
            .map_err(|e| io_err("writing model", e))?;
        let sealer = Sealer::new(config.seal_key.clone(), &config.node_id, 0);
        let registry = Registry::new(model, params, config.seal_key.clone());
        let federation = FederationState::new(&config.node_id);
        let node = Self {
            sealer,
            registry,
            office: OfficeStore::new(),
            attendance: AttendanceLog::new(),
            banking: BankingSessions::new(),
            suspects: SuspectIndex::new(),
            federation,
            sinks: BTreeMap::new(),
            orphans: Vec::new(),
            calibrated,
            config,
        };
        node.save()?;
        Ok(node)
    }

    /// Opens a node from its data directory.
    pub fn open(config: NodeConfig) -> Result<Self, NodeError> {
        config.validate()?;
        let model_path = config.data_dir.join("model.efm");
        let model_bytes = std::fs::read(&model_path)
            .map_err(|_| NodeError::ModelMissing(model_path.clone()))?;
        let model = EigenfaceModel::from_bytes(&model_bytes)?;

        let container_path = config.data_dir.join("state.fcst");
        let container = match std::fs::read(&container_path) {
            Ok(bytes) => Some(bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(io_err("reading state container", e)),
        };

        let mut calibrated = None;
        let mut sealed_count = 0;
        let mut restored: Option<RestoredState> = None;
        if let Some(bytes) = &container {
            let state = read_container(bytes)?;
            calibrated = state.calibrated;
            sealed_count = state.sealed_count;
            restored = Some(state);
        }

        let thresholds = resolve_thresholds(&config, calibrated)?;
        let params = MatchParams {
            thresholds,
            hamming_radius: config.hamming_radius,
        };
        let sealer = Sealer::new(config.seal_key.clone(), &config.node_id, sealed_count);
        let mut registry = Registry::new(model, params, config.seal_key.clone());
        let mut office = OfficeStore::new();
        let mut attendance = AttendanceLog::new();
        let mut suspects = SuspectIndex::new();
        let mut federation = FederationState::new(&config.node_id);
        let mut orphans = Vec::new();

        if let Some(state) = restored {
            for record in state.identities {
                registry.restore_identity(record);
            }
            office.restore(state.messages, state.preferences);
            attendance.restore(state.attendance);
            suspects.restore(state.suspects, Vec::new());
            federation.restore_log(state.log);
            federation.restore_applied(state.applied);
            federation.restore_pending(state.pending);
            federation.restore_quarantined(state.quarantined);
            orphans = state.orphans;
        }
        // Image stores live as PGM files beside their manifests.
        for record in read_image_store(&config.data_dir.join("images"))? {
            registry.restore_image(record);
        }
        let suspect_images = read_image_store(&config.data_dir.join("suspect_images"))?;
        suspects.restore(Vec::new(), suspect_images);

        Ok(Self {
            sealer,
            registry,
            office,
            attendance,
            banking: BankingSessions::new(),
            suspects,
            federation,
            sinks: BTreeMap::new(),
            orphans,
            calibrated,
            config,
        })
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn suspects(&self) -> &SuspectIndex {
        &self.suspects
    }

    pub fn attendance_events(&self) -> &[AttendanceEvent] {
        self.attendance.events()
    }

    pub fn identity_count(&self) -> usize {
        self.registry.identity_count()
    }

    /// Normalizes a PGM image to the model's raster size.
    pub fn normalize_pgm(&self, bytes: &[u8]) -> Result<FaceRaster, NodeError> {
        let image = pgm::parse(bytes)?;
        self.normalize(&image)
    }

    pub fn normalize(&self, image: &GrayImage) -> Result<FaceRaster, NodeError> {
        Ok(normalize_raster(image, self.registry.model().raster_size())?)
    }

    // ---- registry operations ----

    pub fn enroll(
        &mut self,
        raster: &FaceRaster,
        personal: PersonalData,
        now: Timestamp,
        source: &str,
    ) -> Result<FaceOutputCode, NodeError> {
        validate_label(source)?;
        let outcome = self.registry.enroll(
            &mut self.sealer,
            &self.config.node_id,
            raster,
            personal.clone(),
            now,
            source,
        )?;
        let mutation = Mutation::Enroll {
            code: outcome.code,
            sealed_code: outcome.sealed_code,
            embedding: outcome.embedding,
            personal,
            created_at: now,
        };
        self.federation.emit(&mut self.sealer, now, &mutation);
        Ok(outcome.code)
    }

    pub fn identify(&self, raster: &FaceRaster) -> Result<MatchResult, NodeError> {
        Ok(self.registry.identify(raster)?)
    }

    pub fn append_face_image(
        &mut self,
        code: FaceOutputCode,
        raster: &FaceRaster,
        now: Timestamp,
        source: &str,
    ) -> Result<u64, NodeError> {
        validate_label(source)?;
        let node_id = self.config.node_id.clone();
        let outcome = self
            .registry
            .append_face_image(&node_id, code, raster, now, source)?;
        let mutation = Mutation::AppendEmbedding {
            code,
            embedding: outcome.embedding,
            updated_at: now,
        };
        self.federation.emit(&mut self.sealer, now, &mutation);
        Ok(outcome.image_id)
    }

    pub fn lookup(
        &self,
        code: FaceOutputCode,
    ) -> Result<(&IdentityRecord, Vec<&FaceImageRecord>), NodeError> {
        Ok(self.registry.lookup(code)?)
    }

    pub fn update_personal(
        &mut self,
        code: FaceOutputCode,
        personal: PersonalData,
        now: Timestamp,
    ) -> Result<(), NodeError> {
        self.registry
            .update_personal(code, personal.clone(), now, &self.config.node_id)?;
        let mutation = Mutation::UpdatePersonal {
            code,
            personal,
            updated_at: now,
        };
        self.federation.emit(&mut self.sealer, now, &mutation);
        Ok(())
    }

    // ---- workflow operations ----

    pub fn post_message(
        &mut self,
        target: FaceOutputCode,
        body: &str,
        category: Category,
        valid_from: Timestamp,
        valid_until: Timestamp,
    ) -> Result<u64, NodeError> {
        Ok(self
            .office
            .post_message(&self.registry, target, body, category, valid_from, valid_until)?)
    }

    pub fn set_preferences(&mut self, preference: AlertPreference) -> Result<(), NodeError> {
        Ok(self.office.set_preferences(&self.registry, preference)?)
    }

    pub fn alert_scan(
        &mut self,
        code: FaceOutputCode,
        now: Timestamp,
    ) -> Result<Vec<Message>, NodeError> {
        Ok(self.office.alert_scan(&self.registry, code, now)?)
    }

    /// One office-terminal frame: identify, then deliver any due messages
    /// to the station's alert sink.
    pub fn office_frame(
        &mut self,
        station_id: &str,
        raster: &FaceRaster,
        now: Timestamp,
    ) -> Result<(MatchResult, Vec<Message>), NodeError> {
        self.require_station(station_id, StationMode::Office)?;
        let result = self.registry.identify(raster)?;
        let MatchResult::Recognized { code, .. } = &result else {
            return Ok((result, Vec::new()));
        };
        let due = self.office.alert_scan(&self.registry, *code, now)?;
        if !due.is_empty() {
            let alert = Alert::messages(station_id, now, &due);
            self.sink_append(station_id, alert)?;
        }
        Ok((result, due))
    }

    pub fn record_attendance(
        &mut self,
        station_id: &str,
        raster: &FaceRaster,
        direction: Direction,
        now: Timestamp,
    ) -> Result<AttendanceEvent, NodeError> {
        if self.config.station(station_id).is_none() {
            return Err(NodeError::UnknownStation(station_id.to_string()));
        }
        Ok(self
            .attendance
            .record(&self.registry, raster, station_id, direction, now)?)
    }

    pub fn authorize(
        &mut self,
        station_id: &str,
        session_id: &str,
        raster: &FaceRaster,
        now: Timestamp,
    ) -> Result<AuthOutcome, NodeError> {
        self.require_station(station_id, StationMode::Banking)?;
        let (outcome, escalation) = self.banking.authorize(
            &self.registry,
            &mut self.suspects,
            station_id,
            session_id,
            raster,
            now,
        )?;
        if let Some(escalation) = escalation {
            let mutation = Mutation::SuspectAdd {
                code: escalation.suspect_code,
                embeddings: escalation.embeddings,
                activity_at: now,
                activity: "banking-fraud-attempt".to_string(),
            };
            self.federation.emit(&mut self.sealer, now, &mutation);
            self.sink_append(station_id, escalation.alert)?;
        }
        Ok(outcome)
    }

    pub fn surveil(
        &mut self,
        station_id: &str,
        raster: &FaceRaster,
        now: Timestamp,
    ) -> Result<Option<Alert>, NodeError> {
        self.require_station(station_id, StationMode::Surveillance)?;
        let alert =
            crate::workflows::surveil_frame(&self.registry, &self.suspects, station_id, raster, now)?;
        if let Some(alert) = &alert {
            self.sink_append(station_id, alert.clone())?;
        }
        Ok(alert)
    }

    /// Reconciles a suspect against the main registry: a match appends a
    /// criminal-activity record to that identity, otherwise the suspect's
    /// evidence becomes a new (unidentified) identity.
    pub fn link_suspect(
        &mut self,
        suspect_code: FaceOutputCode,
        now: Timestamp,
    ) -> Result<LinkOutcome, NodeError> {
        let suspect = self
            .suspects
            .get(&suspect_code)
            .cloned()
            .ok_or(WorkflowError::UnknownSuspect { code: suspect_code })?;

        let mut best: Option<(f64, FaceOutputCode)> = None;
        for embedding in &suspect.embeddings {
            if let MatchResult::Recognized { code, distance } =
                self.registry.match_embedding(embedding)?
            {
                if best.is_none_or(|(d, _)| distance < d) {
                    best = Some((distance, code));
                }
            }
        }

        if let Some((_, identity_code)) = best {
            let mut personal = self.registry.get(&identity_code).unwrap().personal.clone();
            append_criminal_record(&mut personal, now);
            self.update_personal(identity_code, personal, now)?;
            return Ok(LinkOutcome::Linked { identity_code });
        }

        let last_image = suspect
            .image_ids
            .last()
            .and_then(|id| self.suspects.image(*id))
            .ok_or(NodeError::NoEvidence(suspect_code))?;
        let raster = last_image.raster.clone();
        let mut personal = PersonalData::named(&format!("UNIDENTIFIED-{}", suspect_code.render()));
        append_criminal_record(&mut personal, now);
        let identity_code = self.enroll(&raster, personal, now, "suspect-link")?;
        Ok(LinkOutcome::CreatedNew { identity_code })
    }

    // ---- federation ----

    pub fn applied_vector(&self) -> &BTreeMap<String, u64> {
        self.federation.applied_vector()
    }

    pub fn pull_entries(&self, peer: &BTreeMap<String, u64>) -> Vec<ReplicationEntry> {
        self.federation.pull(peer)
    }

    pub fn full_log(&self) -> Vec<ReplicationEntry> {
        self.federation.pull(&BTreeMap::new())
    }

    pub fn quarantined_count(&self) -> usize {
        self.federation.quarantined().len()
    }

    pub fn orphan_count(&self) -> usize {
        self.orphans.len()
    }

    /// Applies replicated entries: per-origin ordering with gap buffering,
    /// quarantine for unauthenticated payloads, and a retry queue for
    /// mutations that reference codes yet to arrive.
    pub fn apply_entries(&mut self, entries: Vec<ReplicationEntry>) -> ApplyReport {
        let key = self.config.seal_key.clone();
        let (ready, report) = self.federation.apply(&key, entries);

        let mut queue: Vec<(String, Timestamp, Mutation)> = self.orphans.drain(..).collect();
        queue.extend(
            ready
                .into_iter()
                .map(|r| (r.origin, r.timestamp, r.mutation)),
        );

        // Orphans unlock when their enrollment applies; loop until settled.
        loop {
            let mut deferred = Vec::new();
            let mut progressed = false;
            for (origin, timestamp, mutation) in queue {
                match self.dispatch(&origin, timestamp, mutation) {
                    Ok(()) => progressed = true,
                    Err(back) => deferred.push((origin, timestamp, *back)),
                }
            }
            if deferred.is_empty() || !progressed {
                self.orphans = deferred;
                break;
            }
            queue = deferred;
        }
        report
    }

    /// Applies one decoded mutation; returns it back (boxed — mutations are
    /// bulky) if its target is not present yet.
    fn dispatch(
        &mut self,
        origin: &str,
        _timestamp: Timestamp,
        mutation: Mutation,
    ) -> Result<(), Box<Mutation>> {
        match mutation {
            Mutation::Enroll {
                code,
                sealed_code,
                embedding,
                personal,
                created_at,
            } => {
                self.registry.apply_enroll(
                    code, sealed_code, embedding, personal, created_at, created_at, origin,
                );
                Ok(())
            }
            Mutation::AppendEmbedding {
                code,
                embedding,
                updated_at,
            } => self
                .registry
                .apply_append(code, embedding.clone(), updated_at, origin)
                .map_err(|_| {
                    Box::new(Mutation::AppendEmbedding {
                        code,
                        embedding,
                        updated_at,
                    })
                }),
            Mutation::UpdatePersonal {
                code,
                personal,
                updated_at,
            } => self
                .registry
                .apply_update(code, personal.clone(), updated_at, origin)
                .map_err(|_| {
                    Box::new(Mutation::UpdatePersonal {
                        code,
                        personal,
                        updated_at,
                    })
                }),
            Mutation::SuspectAdd {
                code,
                embeddings,
                activity_at,
                activity,
            } => {
                self.suspects
                    .apply_remote(code, embeddings, activity_at, activity);
                Ok(())
            }
        }
    }

    pub fn export_index(&self) -> Vec<u8> {
        self.registry.export_index()
    }

    // ---- alert sinks ----

    pub fn sink_alerts(&self, station_id: &str) -> &[Alert] {
        self.sinks
            .get(station_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    fn sink_append(&mut self, station_id: &str, alert: Alert) -> Result<(), NodeError> {
        if let Some(path) = self
            .config
            .station(station_id)
            .and_then(|s| s.alert_sink_path.clone())
        {
            let path = if path.is_absolute() {
                path
            } else {
                self.config.data_dir.join(path)
            };
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| io_err("creating sink dir", e))?;
            }
            let line = serde_json::to_string(&alert)
                .map_err(|e| NodeError::Storage(format!("encoding alert: {e}")))?;
            let mut file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| io_err("opening alert sink", e))?;
            writeln!(file, "{line}").map_err(|e| io_err("appending alert", e))?;
        }
        self.sinks.entry(station_id.to_string()).or_default().push(alert);
        Ok(())
    }

    fn require_station(&self, station_id: &str, mode: StationMode) -> Result<(), NodeError> {
        match self.config.station(station_id) {
            Some(station) if station.mode == mode => Ok(()),
            Some(_) => Err(NodeError::UnknownStation(format!(
                "{station_id} (wrong mode)"
            ))),
            None => Err(NodeError::UnknownStation(station_id.to_string())),
        }
    }

    // ---- persistence ----

    /// Writes the state container, the index snapshot and both image
    /// stores. Byte-deterministic for a given state.
    pub fn save(&self) -> Result<(), NodeError> {
        let dir = &self.config.data_dir;
        std::fs::create_dir_all(dir).map_err(|e| io_err("creating data dir", e))?;
        std::fs::write(dir.join("state.fcst"), self.container_bytes())
            .map_err(|e| io_err("writing state container", e))?;
        std::fs::write(dir.join("index.fcix"), self.registry.export_index())
            .map_err(|e| io_err("writing index snapshot", e))?;
        write_image_store(&dir.join("images"), self.registry.images())?;
        write_image_store(&dir.join("suspect_images"), self.suspects.images())?;
        Ok(())
    }

    /// Serializes everything except rasters (those live as PGM files) and
    /// banking sessions (transient capture state).
    pub fn container_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_raw(CONTAINER_MAGIC);
        w.put_u16(CONTAINER_VERSION);
        w.put_u64(self.sealer.sealed_count());
        match self.calibrated {
            Some(t) => {
                w.put_u8(1);
                w.put_f64(t.accept);
                w.put_f64(t.face);
            }
            None => w.put_u8(0),
        }

        let identities: Vec<&IdentityRecord> = self.registry.identities().collect();
        w.put_u32(identities.len() as u32);
        for record in identities {
            w.put_u64(record.code.quant_bits());
            w.put_u16(record.code.seq());
            record.sealed_code.write_to(&mut w);
            w.put_u32(record.enrolled_embeddings.len() as u32);
            for (e, (at, origin)) in record
                .enrolled_embeddings
                .iter()
                .zip(&record.embedding_keys)
            {
                w.put_i64(at.0);
                w.put_str(origin);
                e.write_to(&mut w);
            }
            record.personal.write_to(&mut w);
            w.put_i64(record.created_at.0);
            w.put_i64(record.updated_at.0);
            w.put_str(&record.enrolled_by);
            w.put_i64(record.personal_version.0 .0);
            w.put_str(&record.personal_version.1);
        }

        let messages: Vec<&Message> = self.office.messages().collect();
        w.put_u32(messages.len() as u32);
        for m in messages {
            m.write_to(&mut w);
        }
        let preferences = self.office.preference_list();
        w.put_u32(preferences.len() as u32);
        for p in &preferences {
            w.put_u64(p.owner_code.quant_bits());
            w.put_u16(p.owner_code.seq());
            w.put_u8(p.suppressed.len() as u8);
            for c in &p.suppressed {
                w.put_u8(c.to_u8());
            }
        }

        w.put_u32(self.attendance.events().len() as u32);
        for event in self.attendance.events() {
            event.write_to(&mut w);
        }

        let suspects: Vec<&SuspectRecord> = self.suspects.records().collect();
        w.put_u32(suspects.len() as u32);
        for s in suspects {
            s.write_to(&mut w);
        }

        let log = self.federation.log();
        w.put_u32(log.len() as u32);
        for entry in log {
            entry.write_to(&mut w);
        }
        let applied = self.federation.applied_vector();
        w.put_u32(applied.len() as u32);
        for (node, seq) in applied {
            w.put_str(node);
            w.put_u64(*seq);
        }
        let pending = self.federation.pending_entries();
        w.put_u32(pending.len() as u32);
        for entry in &pending {
            entry.write_to(&mut w);
        }
        let quarantined = self.federation.quarantined();
        w.put_u32(quarantined.len() as u32);
        for entry in quarantined {
            entry.write_to(&mut w);
        }

        w.put_u32(self.orphans.len() as u32);
        for (origin, timestamp, mutation) in &self.orphans {
            w.put_str(origin);
            w.put_i64(timestamp.0);
            w.put_blob(&mutation.encode());
        }
        w.into_bytes()
    }
}

fn resolve_thresholds(
    config: &NodeConfig,
    calibrated: Option<Thresholds>,
) -> Result<Thresholds, NodeError> {
    let accept = config
        .theta_accept
        .or(calibrated.map(|t| t.accept))
        .ok_or(NodeError::ThresholdsMissing)?;
    let face = config
        .theta_face
        .or(calibrated.map(|t| t.face))
        .ok_or(NodeError::ThresholdsMissing)?;
    Ok(Thresholds { accept, face })
}

fn validate_label(label: &str) -> Result<(), NodeError> {
    if label.is_empty() || label.len() > 255 || label.chars().any(char::is_whitespace) {
        return Err(NodeError::BadLabel(label.to_string()));
    }
    Ok(())
}

fn append_criminal_record(personal: &mut PersonalData, now: Timestamp) {
    let entry = format!("criminal-activity@{now}");
    personal
        .attributes
        .entry("criminalRecord".to_string())
        .and_modify(|v| {
            v.push(';');
            v.push_str(&entry);
        })
        .or_insert(entry);
}

struct RestoredState {
    sealed_count: u64,
    calibrated: Option<Thresholds>,
    identities: Vec<IdentityRecord>,
    messages: Vec<Message>,
    preferences: Vec<AlertPreference>,
    attendance: Vec<AttendanceEvent>,
    suspects: Vec<SuspectRecord>,
    log: Vec<ReplicationEntry>,
    applied: BTreeMap<String, u64>,
    pending: Vec<ReplicationEntry>,
    quarantined: Vec<ReplicationEntry>,
    orphans: Vec<(String, Timestamp, Mutation)>,
}

fn read_container(bytes: &[u8]) -> Result<RestoredState, NodeError> {
    let corrupt = |what: &str| NodeError::Corrupt(what.to_string());
    let mut r = Reader::new(bytes);
    if r.take(4).map_err(|_| corrupt("truncated magic"))? != CONTAINER_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u16().map_err(|_| corrupt("missing version"))?;
    if version != CONTAINER_VERSION {
        return Err(NodeError::Corrupt(format!(
            "unsupported container version {version}"
        )));
    }

    let run = |r: &mut Reader<'_>| -> Result<RestoredState, Box<dyn std::error::Error>> {
        let sealed_count = r.u64()?;
        let calibrated = if r.u8()? == 1 {
            Some(Thresholds {
                accept: r.f64()?,
                face: r.f64()?,
            })
        } else {
            None
        };

        let n = r.u32()? as usize;
        let mut identities = Vec::with_capacity(n);
        for _ in 0..n {
            let quant = r.u64()?;
            let code = FaceOutputCode::new(quant, r.u16()?);
            let sealed_code = crate::codec::SealedRecord::read_from(r)?;
            let count = r.u32()? as usize;
            let mut enrolled_embeddings = Vec::with_capacity(count);
            let mut embedding_keys = Vec::with_capacity(count);
            for _ in 0..count {
                let at = Timestamp(r.i64()?);
                let origin = r.str16()?;
                embedding_keys.push((at, origin));
                enrolled_embeddings.push(Embedding::read_from(r)?);
            }
            let personal = PersonalData::read_from(r)?;
            let created_at = Timestamp(r.i64()?);
            let updated_at = Timestamp(r.i64()?);
            let enrolled_by = r.str16()?;
            let pv_at = Timestamp(r.i64()?);
            let pv_origin = r.str16()?;
            identities.push(IdentityRecord {
                code,
                enrolled_embeddings,
                embedding_keys,
                personal,
                created_at,
                updated_at,
                sealed_code,
                enrolled_by,
                personal_version: (pv_at, pv_origin),
            });
        }

        let n = r.u32()? as usize;
        let messages = (0..n)
            .map(|_| Message::read_from(r))
            .collect::<Result<_, _>>()?;

        let n = r.u32()? as usize;
        let mut preferences = Vec::with_capacity(n);
        for _ in 0..n {
            let quant = r.u64()?;
            let owner_code = FaceOutputCode::new(quant, r.u16()?);
            let count = r.u8()? as usize;
            let mut suppressed = std::collections::BTreeSet::new();
            for _ in 0..count {
                suppressed.insert(Category::from_u8(r.u8()?)?);
            }
            preferences.push(AlertPreference {
                owner_code,
                suppressed,
            });
        }

        let n = r.u32()? as usize;
        let attendance = (0..n)
            .map(|_| AttendanceEvent::read_from(r))
            .collect::<Result<_, _>>()?;

        let n = r.u32()? as usize;
        let suspects = (0..n)
            .map(|_| SuspectRecord::read_from(r))
            .collect::<Result<_, _>>()?;

        let n = r.u32()? as usize;
        let log = (0..n)
            .map(|_| ReplicationEntry::read_from(r))
            .collect::<Result<_, _>>()?;

        let n = r.u32()? as usize;
        let mut applied = BTreeMap::new();
        for _ in 0..n {
            let node = r.str16()?;
            applied.insert(node, r.u64()?);
        }

        let n = r.u32()? as usize;
        let pending = (0..n)
            .map(|_| ReplicationEntry::read_from(r))
            .collect::<Result<_, _>>()?;
        let n = r.u32()? as usize;
        let quarantined = (0..n)
            .map(|_| ReplicationEntry::read_from(r))
            .collect::<Result<_, _>>()?;

        let n = r.u32()? as usize;
        let mut orphans = Vec::with_capacity(n);
        for _ in 0..n {
            let origin = r.str16()?;
            let at = Timestamp(r.i64()?);
            let blob = r.blob32()?;
            orphans.push((origin, at, Mutation::decode(&blob)?));
        }

        Ok(RestoredState {
            sealed_count,
            calibrated,
            identities,
            messages,
            preferences,
            attendance,
            suspects,
            log,
            applied,
            pending,
            quarantined,
            orphans,
        })
    };
    let state = run(&mut r).map_err(|e| NodeError::Corrupt(e.to_string()))?;
    if !r.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(state)
}

/// Writes `<id>.pgm` files plus a `manifest.txt` with lines
/// `imageId ownerCode capturedAt source`.
fn write_image_store<'a>(
    dir: &Path,
    images: impl Iterator<Item = &'a FaceImageRecord>,
) -> Result<(), NodeError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err("creating image store", e))?;
    let mut manifest = String::new();
    for record in images {
        let path = dir.join(format!("{}.pgm", record.image_id));
        if !path.exists() {
            std::fs::write(&path, pgm::raster_to_pgm(&record.raster))
                .map_err(|e| io_err("writing image", e))?;
        }
        manifest.push_str(&format!(
            "{} {} {} {}\n",
            record.image_id,
            record.owner_code.render(),
            record.captured_at.0,
            record.source
        ));
    }
    std::fs::write(dir.join("manifest.txt"), manifest)
        .map_err(|e| io_err("writing manifest", e))?;
    Ok(())
}

fn read_image_store(dir: &Path) -> Result<Vec<FaceImageRecord>, NodeError> {
    let manifest_path = dir.join("manifest.txt");
    let manifest = match std::fs::read_to_string(&manifest_path) {
        Ok(text) => text,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err("reading manifest", e)),
    };
    let mut out = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(4, ' ').collect();
        if fields.len() != 4 {
            return Err(NodeError::Corrupt(format!(
                "image manifest line {} malformed",
                lineno + 1
            )));
        }
        let image_id: u64 = fields[0]
            .parse()
            .map_err(|_| NodeError::Corrupt("bad image id in manifest".into()))?;
        let owner_code = FaceOutputCode::parse(fields[1])
            .map_err(|_| NodeError::Corrupt("bad owner code in manifest".into()))?;
        let captured_at = Timestamp(
            fields[2]
                .parse()
                .map_err(|_| NodeError::Corrupt("bad timestamp in manifest".into()))?,
        );
        let source = fields[3].to_string();
        let bytes = std::fs::read(dir.join(format!("{image_id}.pgm")))
            .map_err(|e| io_err("reading image file", e))?;
        let image = pgm::parse(&bytes)?;
        let size = image.width();
        let raster = FaceRaster::from_pixels(size, image.pixels().to_vec())
            .map_err(NodeError::Raster)?;
        out.push(FaceImageRecord {
            image_id,
            owner_code,
            raster,
            captured_at,
            source,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::SealKey;
    use crate::config::StationConfig;
    use crate::synth;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const SIZE: u32 = 16;

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "facekey-node-{tag}-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn build_config(node_id: &str, dir: &Path) -> NodeConfig {
        let key = SealKey::from_slice(&[11; 32]).unwrap();
        let mut config = NodeConfig::for_node(node_id, dir, key);
        config.raster_size = SIZE;
        config.stations = vec![
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
        ];
        config
    }

    /// Enrolls identity `i` from its first gate-passing capture.
    fn enroll_identity(
        node: &mut Node,
        corpus: &synth::Corpus,
        i: usize,
        now: Timestamp,
    ) -> (FaceOutputCode, FaceRaster) {
        let face = node.registry().params().thresholds.face;
        let capture = corpus.identities[i]
            .enrolled
            .iter()
            .find(|r| node.registry().model().project(r).unwrap().dffs() <= face)
            .expect("no capture passes the face gate")
            .clone();
        let code = node
            .enroll(&capture, PersonalData::named(&format!("p{i}")), now, "desk")
            .unwrap();
        (code, capture)
    }

    fn fresh_node(tag: &str, node_id: &str, corpus: &synth::Corpus) -> Node {
        let dir = temp_dir(tag);
        let model =
            EigenfaceModel::train(&corpus.training_set(), Some(synth::RECOMMENDED_COMPONENTS)).unwrap();
        let thresholds = Thresholds::calibrate(&model, &corpus.enrolled_groups()).unwrap();
        Node::initialize(build_config(node_id, &dir), model, Some(thresholds)).unwrap()
    }

    #[test]
    fn enroll_identify_lookup_roundtrip_with_persistence() {
        let corpus = synth::corpus(42, 20, 5, SIZE);
        let mut node = fresh_node("basic", "n1", &corpus);

        let (code, raster) = enroll_identity(&mut node, &corpus, 0, Timestamp(100));
        node.update_personal(code, PersonalData::named("alice"), Timestamp(150))
            .unwrap();
        let other = corpus.identities[0]
            .enrolled
            .iter()
            .find(|r| **r != raster)
            .unwrap();
        node.append_face_image(code, other, Timestamp(200), "desk").unwrap();
        assert_eq!(node.identity_count(), 1);

        match node.identify(&raster).unwrap() {
            MatchResult::Recognized { code: got, distance } => {
                assert_eq!(got, code);
                assert_eq!(distance, 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }

        node.save().unwrap();
        let index_before = node.export_index();
        let container_before = node.container_bytes();

        let reopened = Node::open(node.config().clone()).unwrap();
        assert_eq!(reopened.identity_count(), 1);
        assert_eq!(reopened.export_index(), index_before);
        assert_eq!(reopened.container_bytes(), container_before);
        let (record, images) = reopened.lookup(code).unwrap();
        assert_eq!(record.personal.name, "alice");
        assert_eq!(images.len(), 2);
    }

    #[test]
    fn replaying_the_log_reproduces_the_index_bytes() {
        let corpus = synth::corpus(43, 20, 5, SIZE);
        let mut node = fresh_node("replay-src", "origin", &corpus);

        for i in 0..corpus.identities.len() {
            let (code, raster) = enroll_identity(&mut node, &corpus, i, Timestamp(i as i64 * 10));
            let other = corpus.identities[i]
                .enrolled
                .iter()
                .find(|r| **r != raster)
                .unwrap();
            node.append_face_image(code, other, Timestamp(i as i64 * 10 + 5), "desk")
                .unwrap();
            let mut personal = PersonalData::named(&format!("p{i}-updated"));
            personal.attributes.insert("grade".into(), "7".into());
            node.update_personal(code, personal, Timestamp(i as i64 * 10 + 7))
                .unwrap();
        }

        // Same node id and key: a disaster-recovery replay.
        let fresh_dir = temp_dir("replay-dst");
        let model = EigenfaceModel::from_bytes(
            &std::fs::read(node.config().data_dir.join("model.efm")).unwrap(),
        )
        .unwrap();
        let mut fresh = Node::initialize(
            build_config("origin", &fresh_dir),
            model,
            node.calibrated,
        )
        .unwrap();
        let report = fresh.apply_entries(node.full_log());
        assert_eq!(report.applied, node.full_log().len());
        assert_eq!(fresh.export_index(), node.export_index());
    }

    #[test]
    fn two_nodes_converge_through_sync() {
        let corpus = synth::corpus(44, 20, 5, SIZE);
        let model = EigenfaceModel::train(&corpus.training_set(), None).unwrap();
        let thresholds = Thresholds::calibrate(&model, &corpus.enrolled_groups()).unwrap();

        let dir_a = temp_dir("sync-a");
        let dir_b = temp_dir("sync-b");
        let mut a = Node::initialize(build_config("node-a", &dir_a), model.clone(), Some(thresholds))
            .unwrap();
        let mut b =
            Node::initialize(build_config("node-b", &dir_b), model, Some(thresholds)).unwrap();

        let code_a = a
            .enroll(
                &corpus.identities[0].enrolled[0],
                PersonalData::named("ann"),
                Timestamp(10),
                "desk",
            )
            .unwrap();

        let _code_b = b
            .enroll(
                &corpus.identities[1].enrolled[0],
                PersonalData::named("bob"),
                Timestamp(20),
                "desk",
            )
            .unwrap();

        // Concurrent personal updates to the same identity after one sync.
        b.apply_entries(a.pull_entries(b.applied_vector()));
        a.apply_entries(b.pull_entries(a.applied_vector()));
        a.update_personal(code_a, PersonalData::named("ann-at-a"), Timestamp(100))
            .unwrap();
        b.update_personal(code_a, PersonalData::named("ann-at-b"), Timestamp(100))
            .unwrap();
        b.apply_entries(a.pull_entries(b.applied_vector()));
        a.apply_entries(b.pull_entries(a.applied_vector()));

        // Equal timestamps: the higher node id wins the tie-break.
        assert_eq!(a.registry().get(&code_a).unwrap().personal.name, "ann-at-b");
        assert_eq!(b.registry().get(&code_a).unwrap().personal.name, "ann-at-b");
        assert_eq!(a.export_index(), b.export_index());

        // Quiescence: nothing left to pull either way.
        assert!(a.pull_entries(b.applied_vector()).is_empty());
        assert!(b.pull_entries(a.applied_vector()).is_empty());
    }

    #[test]
    fn appends_arriving_before_their_enroll_are_deferred() {
        let corpus = synth::corpus(45, 20, 5, SIZE);
        let mut src = fresh_node("orphan-src", "src", &corpus);
        let (code, raster) = enroll_identity(&mut src, &corpus, 0, Timestamp(1));
        let other = corpus.identities[0]
            .enrolled
            .iter()
            .find(|r| **r != raster)
            .unwrap();
        src.append_face_image(code, other, Timestamp(2), "desk").unwrap();

        let log = src.full_log();
        assert_eq!(log.len(), 2);

        let mut dst = fresh_node("orphan-dst", "dst", &corpus);
        // Deliver only the append first: buffered as a per-origin gap.
        let report = dst.apply_entries(vec![log[1].clone()]);
        assert_eq!(report.applied, 0);
        assert_eq!(report.buffered, 1);
        // Now the full log: everything lands.
        let report = dst.apply_entries(log);
        assert_eq!(report.applied, 2);
        assert_eq!(dst.orphan_count(), 0);
        assert_eq!(dst.export_index(), src.export_index());
    }

    #[test]
    fn replication_payloads_stay_slim() {
        let corpus = synth::corpus(46, 20, 5, SIZE);
        let mut node = fresh_node("slim", "n", &corpus);
        for i in 0..corpus.identities.len() {
            let (code, raster) = enroll_identity(&mut node, &corpus, i, Timestamp(i as i64));
            for r in corpus.identities[i].enrolled.iter().filter(|r| **r != raster) {
                node.append_face_image(code, r, Timestamp(100 + i as i64), "desk")
                    .unwrap();
            }
        }
        for entry in node.full_log() {
            assert!(
                entry.payload.len() < 4096,
                "payload of {} bytes would drag raster-scale data along",
                entry.payload.len()
            );
        }
    }

    #[test]
    fn office_frames_deliver_messages_to_the_sink_file() {
        let corpus = synth::corpus(47, 20, 5, SIZE);
        let mut node = fresh_node("office", "n", &corpus);
        let (code, raster) = enroll_identity(&mut node, &corpus, 0, Timestamp(1));
        node.update_personal(code, PersonalData::named("pat"), Timestamp(2))
            .unwrap();
        node.post_message(code, "standup", Category::Meeting, Timestamp(0), Timestamp(1000))
            .unwrap();

        let (result, delivered) = node.office_frame("lobby", &raster, Timestamp(500)).unwrap();
        assert!(matches!(result, MatchResult::Recognized { .. }));
        assert_eq!(delivered.len(), 1);
        assert_eq!(node.sink_alerts("lobby").len(), 1);

        // Delivered once: the next frame alerts nothing.
        let (_, delivered) = node.office_frame("lobby", &raster, Timestamp(600)).unwrap();
        assert!(delivered.is_empty());
        assert_eq!(node.sink_alerts("lobby").len(), 1);

        let sink_path = node.config().data_dir.join("alerts/lobby.jsonl");
        let text = std::fs::read_to_string(sink_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1);
        let parsed: Alert = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(parsed, node.sink_alerts("lobby")[0]);
    }

    #[test]
    fn banking_escalation_surveillance_and_linking() {
        let corpus = synth::corpus(48, 20, 5, SIZE);
        let mut node = fresh_node("banking", "n", &corpus);
        for i in 0..corpus.identities.len() {
            enroll_identity(&mut node, &corpus, i, Timestamp(i as i64));
        }
        let before = node.identity_count();

        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let face = node.registry().params().thresholds.face;
        let fraudster =
            synth::plausible_unseen(node.registry().model(), 0.95 * face, &mut rng, SIZE);
        let mut outcome = None;
        for attempt in 0..3 {
            outcome = Some(
                node.authorize("atm", "session-1", &fraudster, Timestamp(1000 + attempt))
                    .unwrap(),
            );
        }
        let AuthOutcome::Escalated { suspect_code } = outcome.unwrap() else {
            panic!("expected escalation");
        };
        assert_eq!(node.suspects().len(), 1);
        assert_eq!(node.sink_alerts("atm").len(), 1);

        // Surveillance picks the fraudster up.
        let alert = node
            .surveil("cam", &fraudster, Timestamp(2000))
            .unwrap()
            .expect("suspect frame should alert");
        assert_eq!(alert.kind, crate::workflows::AlertKind::SuspectAlert);

        // First link creates a new identity, the second resolves to it.
        let first = node.link_suspect(suspect_code, Timestamp(3000)).unwrap();
        let LinkOutcome::CreatedNew { identity_code } = first else {
            panic!("expected CreatedNew, got {first:?}");
        };
        assert_eq!(node.identity_count(), before + 1);
        let second = node.link_suspect(suspect_code, Timestamp(4000)).unwrap();
        assert_eq!(second, LinkOutcome::Linked { identity_code });
        assert_eq!(node.identity_count(), before + 1);
        let record = node.registry().get(&identity_code).unwrap();
        let criminal = record.personal.attributes.get("criminalRecord").unwrap();
        assert_eq!(criminal.matches("criminal-activity@").count(), 2);
        assert!(record.personal.name.starts_with("UNIDENTIFIED-FC-"));
    }

    #[test]
    fn station_checks_and_labels_are_enforced() {
        let corpus = synth::corpus(49, 20, 5, SIZE);
        let mut node = fresh_node("stations", "n", &corpus);
        let raster = corpus.identities[0].enrolled[0].clone();
        // Station validation happens before any face processing.

        assert!(matches!(
            node.surveil("nope", &raster, Timestamp(1)),
            Err(NodeError::UnknownStation(_))
        ));
        // Wrong mode: lobby is an office station.
        assert!(matches!(
            node.authorize("lobby", "s", &raster, Timestamp(1)),
            Err(NodeError::UnknownStation(_))
        ));
        assert!(matches!(
            node.enroll(&raster, PersonalData::named("x"), Timestamp(1), "bad label"),
            Err(NodeError::BadLabel(_))
        ));
    }

    #[test]
    fn missing_model_and_thresholds_fail_open() {
        let dir = temp_dir("missing");
        let config = build_config("n", &dir);
        assert!(matches!(
            Node::open(config.clone()),
            Err(NodeError::ModelMissing(_))
        ));

        let corpus = synth::corpus(50, 20, 5, SIZE);
        let model = EigenfaceModel::train(&corpus.training_set(), None).unwrap();
        assert!(matches!(
            Node::initialize(config, model, None),
            Err(NodeError::ThresholdsMissing)
        ));
    }
}
