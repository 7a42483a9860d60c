//! Card-less transaction workflows: office messaging and attendance,
//! banking authorization with fraud escalation, and suspect surveillance.
//!
//! Every operation takes the clock as an explicit parameter and is a pure
//! function of the stores plus that clock, so scripted scenarios replay
//! deterministically.

use crate::codec::{self, FaceOutputCode};
use crate::faceml::Embedding;
use crate::raster::FaceRaster;
use crate::registry::{FaceImageRecord, MatchParams, MatchResult, Registry, RegistryError};
use crate::time::Timestamp;
use crate::wire::{Reader, WireError, Writer};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Consecutive failures in one session before fraud escalation.
pub const MAX_AUTH_ATTEMPTS: u8 = 3;

#[derive(Debug, Error, PartialEq)]
pub enum WorkflowError {
    #[error("meeting messages cannot be suppressed")]
    PolicyViolation,
    #[error("message interval is inverted: {from} > {until}")]
    InvalidInterval { from: Timestamp, until: Timestamp },
    #[error("face not recognized")]
    NotRecognized { result: MatchResult },
    #[error("attendance clock went backwards: last {last}, attempted {attempted}")]
    ClockSkew {
        last: Timestamp,
        attempted: Timestamp,
    },
    #[error("unknown suspect code {code}")]
    UnknownSuspect { code: FaceOutputCode },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash,
)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Meeting,
    Appointment,
    Email,
    Other,
}

impl Category {
    pub(crate) fn to_u8(self) -> u8 {
        match self {
            Self::Meeting => 0,
            Self::Appointment => 1,
            Self::Email => 2,
            Self::Other => 3,
        }
    }

    pub(crate) fn from_u8(v: u8) -> Result<Self, WireError> {
        match v {
            0 => Ok(Self::Meeting),
            1 => Ok(Self::Appointment),
            2 => Ok(Self::Email),
            3 => Ok(Self::Other),
            _ => Err(WireError::BadLength),
        }
    }
}

impl std::str::FromStr for Category {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "meeting" => Ok(Self::Meeting),
            "appointment" => Ok(Self::Appointment),
            "email" => Ok(Self::Email),
            "other" => Ok(Self::Other),
            other => Err(format!("unknown message category {other:?}")),
        }
    }
}

/// A personal message pending delivery inside its validity window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Message {
    pub message_id: u64,
    pub target_code: FaceOutputCode,
    pub body: String,
    pub category: Category,
    pub valid_from: Timestamp,
    pub valid_until: Timestamp,
    pub delivered: bool,
}

impl Message {
    pub(crate) fn write_to(&self, w: &mut Writer) {
        w.put_u64(self.message_id);
        w.put_u64(self.target_code.quant_bits());
        w.put_u16(self.target_code.seq());
        w.put_str(&self.body);
        w.put_u8(self.category.to_u8());
        w.put_i64(self.valid_from.0);
        w.put_i64(self.valid_until.0);
        w.put_u8(self.delivered as u8);
    }

    pub(crate) fn read_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            message_id: r.u64()?,
            target_code: {
                let quant = r.u64()?;
                FaceOutputCode::new(quant, r.u16()?)
            },
            body: r.str16()?,
            category: Category::from_u8(r.u8()?)?,
            valid_from: Timestamp(r.i64()?),
            valid_until: Timestamp(r.i64()?),
            delivered: r.u8()? != 0,
        })
    }
}

/// Per-person alert preferences. Meetings can never be suppressed.
#[derive(Clone, Debug, PartialEq)]
pub struct AlertPreference {
    pub owner_code: FaceOutputCode,
    pub suppressed: BTreeSet<Category>,
}

/// Message store plus alert preferences for the office workflow.
#[derive(Default)]
pub struct OfficeStore {
    messages: BTreeMap<u64, Message>,
    preferences: BTreeMap<FaceOutputCode, BTreeSet<Category>>,
    next_message_id: u64,
}

impl OfficeStore {
    pub fn new() -> Self {
        Self {
            messages: BTreeMap::new(),
            preferences: BTreeMap::new(),
            next_message_id: 1,
        }
    }

    pub fn messages(&self) -> impl Iterator<Item = &Message> {
        self.messages.values()
    }

    pub fn message(&self, id: u64) -> Option<&Message> {
        self.messages.get(&id)
    }

    pub fn preferences(&self, code: &FaceOutputCode) -> Option<&BTreeSet<Category>> {
        self.preferences.get(code)
    }

    pub fn post_message(
        &mut self,
        registry: &Registry,
        target_code: FaceOutputCode,
        body: &str,
        category: Category,
        valid_from: Timestamp,
        valid_until: Timestamp,
    ) -> Result<u64, WorkflowError> {
        if registry.get(&target_code).is_none() {
            return Err(RegistryError::UnknownCode { code: target_code }.into());
        }
        if valid_from > valid_until {
            return Err(WorkflowError::InvalidInterval {
                from: valid_from,
                until: valid_until,
            });
        }
        if body.len() > u16::MAX as usize {
            return Err(WorkflowError::Validation(
                "message body exceeds 65535 bytes".into(),
            ));
        }
        let message_id = self.next_message_id;
        self.next_message_id += 1;
        self.messages.insert(
            message_id,
            Message {
                message_id,
                target_code,
                body: body.to_string(),
                category,
                valid_from,
                valid_until,
                delivered: false,
            },
        );
        Ok(message_id)
    }

    /// Replaces the owner's preferences wholesale.
    pub fn set_preferences(
        &mut self,
        registry: &Registry,
        preference: AlertPreference,
    ) -> Result<(), WorkflowError> {
        if registry.get(&preference.owner_code).is_none() {
            return Err(RegistryError::UnknownCode {
                code: preference.owner_code,
            }
            .into());
        }
        if preference.suppressed.contains(&Category::Meeting) {
            return Err(WorkflowError::PolicyViolation);
        }
        self.preferences
            .insert(preference.owner_code, preference.suppressed);
        Ok(())
    }

    /// Returns the undelivered, in-window, non-suppressed messages for a
    /// person and marks them delivered. Meetings bypass suppression. Each
    /// message is returned by at most one scan, ever.
    pub fn alert_scan(
        &mut self,
        registry: &Registry,
        code: FaceOutputCode,
        now: Timestamp,
    ) -> Result<Vec<Message>, WorkflowError> {
        if registry.get(&code).is_none() {
            return Err(RegistryError::UnknownCode { code }.into());
        }
        let suppressed = self.preferences.get(&code).cloned().unwrap_or_default();
        let mut due: Vec<u64> = self
            .messages
            .values()
            .filter(|m| {
                m.target_code == code
                    && !m.delivered
                    && m.valid_from <= now
                    && now <= m.valid_until
                    && (m.category == Category::Meeting || !suppressed.contains(&m.category))
            })
            .map(|m| m.message_id)
            .collect();
        due.sort_by_key(|id| (self.messages[id].valid_from, *id));
        let mut out = Vec::with_capacity(due.len());
        for id in due {
            let message = self.messages.get_mut(&id).unwrap();
            message.delivered = true;
            out.push(message.clone());
        }
        Ok(out)
    }

    pub(crate) fn restore(&mut self, messages: Vec<Message>, prefs: Vec<AlertPreference>) {
        for m in messages {
            self.next_message_id = self.next_message_id.max(m.message_id + 1);
            self.messages.insert(m.message_id, m);
        }
        for p in prefs {
            self.preferences.insert(p.owner_code, p.suppressed);
        }
    }

    pub(crate) fn preference_list(&self) -> Vec<AlertPreference> {
        self.preferences
            .iter()
            .map(|(code, suppressed)| AlertPreference {
                owner_code: *code,
                suppressed: suppressed.clone(),
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    In,
    Out,
}

impl std::str::FromStr for Direction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "in" => Ok(Self::In),
            "out" => Ok(Self::Out),
            other => Err(format!("unknown direction {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AttendanceEvent {
    pub owner_code: FaceOutputCode,
    pub timestamp: Timestamp,
    pub station_id: String,
    pub direction: Direction,
}

impl AttendanceEvent {
    pub(crate) fn write_to(&self, w: &mut Writer) {
        w.put_u64(self.owner_code.quant_bits());
        w.put_u16(self.owner_code.seq());
        w.put_i64(self.timestamp.0);
        w.put_str(&self.station_id);
        w.put_u8(match self.direction {
            Direction::In => 0,
            Direction::Out => 1,
        });
    }

    pub(crate) fn read_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            owner_code: {
                let quant = r.u64()?;
                FaceOutputCode::new(quant, r.u16()?)
            },
            timestamp: Timestamp(r.i64()?),
            station_id: r.str16()?,
            direction: if r.u8()? == 0 {
                Direction::In
            } else {
                Direction::Out
            },
        })
    }
}

/// Attendance records with strictly increasing timestamps per
/// (person, station) — nobody clocks twice at the same instant.
#[derive(Default)]
pub struct AttendanceLog {
    events: Vec<AttendanceEvent>,
    last_seen: BTreeMap<(FaceOutputCode, String), Timestamp>,
}

impl AttendanceLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> &[AttendanceEvent] {
        &self.events
    }

    pub fn record(
        &mut self,
        registry: &Registry,
        raster: &FaceRaster,
        station_id: &str,
        direction: Direction,
        now: Timestamp,
    ) -> Result<AttendanceEvent, WorkflowError> {
        let result = registry.identify(raster)?;
        let MatchResult::Recognized { code, .. } = result else {
            return Err(WorkflowError::NotRecognized { result });
        };
        let key = (code, station_id.to_string());
        if let Some(&last) = self.last_seen.get(&key) {
            if now <= last {
                return Err(WorkflowError::ClockSkew {
                    last,
                    attempted: now,
                });
            }
        }
        let event = AttendanceEvent {
            owner_code: code,
            timestamp: now,
            station_id: station_id.to_string(),
            direction,
        };
        self.last_seen.insert(key, now);
        self.events.push(event.clone());
        Ok(event)
    }

    pub(crate) fn restore(&mut self, events: Vec<AttendanceEvent>) {
        for event in events {
            let key = (event.owner_code, event.station_id.clone());
            let entry = self.last_seen.entry(key).or_insert(event.timestamp);
            *entry = (*entry).max(event.timestamp);
            self.events.push(event);
        }
    }
}

/// A suspect recorded during a fraud attempt; disjoint storage from the
/// main registry.
#[derive(Clone, Debug, PartialEq)]
pub struct SuspectRecord {
    pub code: FaceOutputCode,
    pub embeddings: Vec<Embedding>,
    pub image_ids: Vec<u64>,
    pub activity_log: Vec<(Timestamp, String)>,
}

impl SuspectRecord {
    pub(crate) fn write_to(&self, w: &mut Writer) {
        w.put_u64(self.code.quant_bits());
        w.put_u16(self.code.seq());
        w.put_u32(self.embeddings.len() as u32);
        for e in &self.embeddings {
            e.write_to(w);
        }
        w.put_u32(self.image_ids.len() as u32);
        for id in &self.image_ids {
            w.put_u64(*id);
        }
        w.put_u32(self.activity_log.len() as u32);
        for (at, what) in &self.activity_log {
            w.put_i64(at.0);
            w.put_str(what);
        }
    }

    pub(crate) fn read_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let quant = r.u64()?;
        let code = FaceOutputCode::new(quant, r.u16()?);
        let n = r.u32()? as usize;
        let embeddings = (0..n)
            .map(|_| Embedding::read_from(r))
            .collect::<Result<_, _>>()?;
        let n = r.u32()? as usize;
        let image_ids = (0..n).map(|_| r.u64()).collect::<Result<_, _>>()?;
        let n = r.u32()? as usize;
        let activity_log = (0..n)
            .map(|_| Ok((Timestamp(r.i64()?), r.str16()?)))
            .collect::<Result<_, WireError>>()?;
        Ok(Self {
            code,
            embeddings,
            image_ids,
            activity_log,
        })
    }
}

/// Suspect code index plus its own evidence image store.
#[derive(Default)]
pub struct SuspectIndex {
    records: BTreeMap<FaceOutputCode, SuspectRecord>,
    images: BTreeMap<u64, FaceImageRecord>,
    next_image_id: u64,
}

impl SuspectIndex {
    pub fn new() -> Self {
        Self {
            records: BTreeMap::new(),
            images: BTreeMap::new(),
            next_image_id: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &SuspectRecord> {
        self.records.values()
    }

    pub fn get(&self, code: &FaceOutputCode) -> Option<&SuspectRecord> {
        self.records.get(code)
    }

    pub fn image(&self, id: u64) -> Option<&FaceImageRecord> {
        self.images.get(&id)
    }

    pub fn images(&self) -> impl Iterator<Item = &FaceImageRecord> {
        self.images.values()
    }

    pub fn smallest_unused_seq(&self, quant: u64) -> u16 {
        let mut expected: u32 = 0;
        let range = FaceOutputCode::new(quant, 0)..=FaceOutputCode::new(quant, u16::MAX);
        for code in self.records.range(range).map(|(c, _)| c) {
            if u32::from(code.seq()) > expected {
                break;
            }
            expected = u32::from(code.seq()) + 1;
        }
        u16::try_from(expected).expect("suspect sequence space exhausted")
    }

    /// Creates a suspect from captured evidence rasters. Returns the stored
    /// image ids, in raster order.
    pub fn create(
        &mut self,
        code: FaceOutputCode,
        embeddings: Vec<Embedding>,
        evidence: Vec<FaceRaster>,
        activity: &str,
        now: Timestamp,
        source: &str,
    ) -> Vec<u64> {
        let image_ids: Vec<u64> = evidence
            .into_iter()
            .map(|raster| {
                let image_id = self.next_image_id;
                self.next_image_id += 1;
                self.images.insert(
                    image_id,
                    FaceImageRecord {
                        image_id,
                        owner_code: code,
                        raster,
                        captured_at: now,
                        source: source.to_string(),
                    },
                );
                image_id
            })
            .collect();
        self.records.insert(
            code,
            SuspectRecord {
                code,
                embeddings,
                image_ids: image_ids.clone(),
                activity_log: vec![(now, activity.to_string())],
            },
        );
        image_ids
    }

    /// Applies a replicated suspect record. Evidence rasters stay on the
    /// origin node; merges are deterministic unions.
    pub fn apply_remote(
        &mut self,
        code: FaceOutputCode,
        embeddings: Vec<Embedding>,
        activity_at: Timestamp,
        activity: String,
    ) {
        if let Some(existing) = self.records.get_mut(&code) {
            for embedding in embeddings {
                if !existing.embeddings.contains(&embedding) {
                    existing.embeddings.push(embedding);
                }
            }
            let entry = (activity_at, activity);
            if !existing.activity_log.contains(&entry) {
                existing.activity_log.push(entry);
                existing.activity_log.sort();
            }
        } else {
            self.records.insert(
                code,
                SuspectRecord {
                    code,
                    embeddings,
                    image_ids: Vec::new(),
                    activity_log: vec![(activity_at, activity)],
                },
            );
        }
    }

    /// Nearest-neighbor match with the same prefilter + threshold rule the
    /// registry uses for identification.
    pub fn match_embedding(
        &self,
        params: &MatchParams,
        embedding: &Embedding,
    ) -> Option<(FaceOutputCode, f64)> {
        if self.records.is_empty() {
            return None;
        }
        let query = FaceOutputCode::new(codec::quantize(embedding.weights()), 0);
        let mut candidates: Vec<&SuspectRecord> = self
            .records
            .values()
            .filter(|r| r.code.hamming(&query) <= params.hamming_radius)
            .collect();
        if candidates.is_empty() {
            candidates = self.records.values().collect();
        }
        let mut best: Option<(f64, String, FaceOutputCode)> = None;
        for record in candidates {
            for enrolled in &record.embeddings {
                let Ok(d) = embedding.distance(enrolled) else {
                    continue;
                };
                let key = (d, record.code.render(), record.code);
                if best
                    .as_ref()
                    .is_none_or(|b| (key.0, &key.1) < (b.0, &b.1))
                {
                    best = Some(key);
                }
            }
        }
        let (distance, _, code) = best?;
        (distance <= params.thresholds.accept).then_some((code, distance))
    }

    pub(crate) fn restore(&mut self, records: Vec<SuspectRecord>, images: Vec<FaceImageRecord>) {
        for record in records {
            self.records.insert(record.code, record);
        }
        for image in images {
            self.next_image_id = self.next_image_id.max(image.image_id + 1);
            self.images.insert(image.image_id, image);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum AlertKind {
    MessageAlert,
    SuspectAlert,
    UnrecognizedAlert,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MessageSummary {
    pub message_id: u64,
    pub category: Category,
    pub body: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlertPayload {
    #[serde(rename_all = "camelCase")]
    Messages { messages: Vec<MessageSummary> },
    #[serde(rename_all = "camelCase")]
    Suspect {
        suspect_code: FaceOutputCode,
        image_ids: Vec<u64>,
    },
}

/// A record appended to a station's alert sink.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Alert {
    pub kind: AlertKind,
    pub station_id: String,
    pub emitted_at: Timestamp,
    pub payload: AlertPayload,
}

impl Alert {
    pub fn messages(station_id: &str, emitted_at: Timestamp, messages: &[Message]) -> Self {
        Self {
            kind: AlertKind::MessageAlert,
            station_id: station_id.to_string(),
            emitted_at,
            payload: AlertPayload::Messages {
                messages: messages
                    .iter()
                    .map(|m| MessageSummary {
                        message_id: m.message_id,
                        category: m.category,
                        body: m.body.clone(),
                    })
                    .collect(),
            },
        }
    }

    pub fn suspect(
        kind: AlertKind,
        station_id: &str,
        emitted_at: Timestamp,
        suspect_code: FaceOutputCode,
        image_ids: Vec<u64>,
    ) -> Self {
        Self {
            kind,
            station_id: station_id.to_string(),
            emitted_at,
            payload: AlertPayload::Suspect {
                suspect_code,
                image_ids,
            },
        }
    }
}

/// Outcome of a banking authorization attempt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "camelCase")]
pub enum AuthOutcome {
    #[serde(rename_all = "camelCase")]
    Authorized { code: FaceOutputCode },
    #[serde(rename_all = "camelCase")]
    Denied { remaining_attempts: u8 },
    #[serde(rename_all = "camelCase")]
    Escalated { suspect_code: FaceOutputCode },
}

/// Everything an escalation produced, for the caller to persist and ship.
#[derive(Debug)]
pub struct Escalation {
    pub suspect_code: FaceOutputCode,
    pub embeddings: Vec<Embedding>,
    pub image_ids: Vec<u64>,
    pub alert: Alert,
}

struct SessionState {
    failures: u8,
    evidence: Vec<FaceRaster>,
}

/// Per-(station, session) failure tracking for banking authorization.
/// Sessions are transient capture state and are not persisted.
#[derive(Default)]
pub struct BankingSessions {
    sessions: BTreeMap<(String, String), SessionState>,
}

impl BankingSessions {
    pub fn new() -> Self {
        Self::default()
    }

    /// Authorizes a transaction by face. A recognized face resets the
    /// session; the third consecutive failure escalates: the session's
    /// retained rasters become a suspect record (code derived from the last
    /// raster), and an alert for the configured law-enforcement sink is
    /// produced. Failed attempts always retain the raster for evidence.
    pub fn authorize(
        &mut self,
        registry: &Registry,
        suspects: &mut SuspectIndex,
        station_id: &str,
        session_id: &str,
        raster: &FaceRaster,
        now: Timestamp,
    ) -> Result<(AuthOutcome, Option<Escalation>), WorkflowError> {
        let result = registry.identify(raster)?;
        let key = (station_id.to_string(), session_id.to_string());
        if let MatchResult::Recognized { code, .. } = result {
            self.sessions.remove(&key);
            return Ok((AuthOutcome::Authorized { code }, None));
        }

        let session = self.sessions.entry(key.clone()).or_insert(SessionState {
            failures: 0,
            evidence: Vec::new(),
        });
        session.failures += 1;
        session.evidence.push(raster.clone());

        if session.failures < MAX_AUTH_ATTEMPTS {
            let remaining = MAX_AUTH_ATTEMPTS - session.failures;
            return Ok((
                AuthOutcome::Denied {
                    remaining_attempts: remaining,
                },
                None,
            ));
        }

        let session = self.sessions.remove(&key).unwrap();
        let embeddings: Vec<Embedding> = session
            .evidence
            .iter()
            .map(|r| registry.model().project(r))
            .collect::<Result<_, _>>()
            .map_err(RegistryError::from)?;
        let quant = codec::quantize(embeddings.last().unwrap().weights());
        let seq = suspects.smallest_unused_seq(quant);
        let suspect_code = FaceOutputCode::new(quant, seq);
        let image_ids = suspects.create(
            suspect_code,
            embeddings.clone(),
            session.evidence,
            "banking-fraud-attempt",
            now,
            station_id,
        );
        let alert = Alert::suspect(
            AlertKind::UnrecognizedAlert,
            station_id,
            now,
            suspect_code,
            image_ids.clone(),
        );
        Ok((
            AuthOutcome::Escalated { suspect_code },
            Some(Escalation {
                suspect_code,
                embeddings,
                image_ids,
                alert,
            }),
        ))
    }
}

/// Checks one surveillance frame against the suspect index. Frames past the
/// face threshold are ignored — streams contain plenty of non-faces.
pub fn surveil_frame(
    registry: &Registry,
    suspects: &SuspectIndex,
    station_id: &str,
    raster: &FaceRaster,
    now: Timestamp,
) -> Result<Option<Alert>, WorkflowError> {
    let embedding = registry
        .model()
        .project(raster)
        .map_err(RegistryError::from)?;
    if embedding.dffs() > registry.params().thresholds.face {
        return Ok(None);
    }
    let Some((suspect_code, _)) = suspects.match_embedding(registry.params(), &embedding) else {
        return Ok(None);
    };
    let image_ids = suspects
        .get(&suspect_code)
        .map(|r| r.image_ids.clone())
        .unwrap_or_default();
    Ok(Some(Alert::suspect(
        AlertKind::SuspectAlert,
        station_id,
        now,
        suspect_code,
        image_ids,
    )))
}

/// Result of reconciling a suspect against the main registry.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "camelCase")]
pub enum LinkOutcome {
    #[serde(rename_all = "camelCase")]
    Linked { identity_code: FaceOutputCode },
    #[serde(rename_all = "camelCase")]
    CreatedNew { identity_code: FaceOutputCode },
}
