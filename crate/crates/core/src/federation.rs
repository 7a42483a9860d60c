//! Append-only replication of the slim code index between nodes.
//!
//! Every code-index mutation becomes a [`ReplicationEntry`] with a per-origin
//! sequence number and a sealed payload. Nodes gossip by pulling the entries
//! a peer lacks (identified by per-origin applied vectors) and applying them
//! in per-origin order; gaps are buffered until they fill. Conflicting
//! updates resolve last-writer-wins by `(timestamp, origin node)`.
//!
//! Rasters never replicate — the bulky image store stays local; embeddings
//! do, so remote nodes can identify faces they never photographed.

use crate::codec::{CodecError, FaceOutputCode, SealKey, SealedRecord, Sealer};
use crate::faceml::Embedding;
use crate::registry::PersonalData;
use crate::time::Timestamp;
use crate::wire::{Reader, WireError, Writer};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FederationError {
    #[error("malformed replication frame: {0}")]
    Frame(#[from] WireError),
    #[error("unknown replication entry kind {0}")]
    UnknownKind(u8),
    #[error("frame length does not match entry payload")]
    FrameLength,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    Enroll,
    AppendEmbedding,
    UpdatePersonal,
    SuspectAdd,
}

impl EntryKind {
    fn to_u8(self) -> u8 {
        match self {
            Self::Enroll => 0,
            Self::AppendEmbedding => 1,
            Self::UpdatePersonal => 2,
            Self::SuspectAdd => 3,
        }
    }

    fn from_u8(v: u8) -> Result<Self, FederationError> {
        match v {
            0 => Ok(Self::Enroll),
            1 => Ok(Self::AppendEmbedding),
            2 => Ok(Self::UpdatePersonal),
            3 => Ok(Self::SuspectAdd),
            other => Err(FederationError::UnknownKind(other)),
        }
    }
}

/// One replicated code-index mutation.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicationEntry {
    pub origin_node: String,
    pub origin_seq: u64,
    pub timestamp: Timestamp,
    pub kind: EntryKind,
    /// Sealed [`Mutation`] bytes.
    pub payload: Vec<u8>,
}

impl ReplicationEntry {
    pub fn write_to(&self, w: &mut Writer) {
        w.put_str(&self.origin_node);
        w.put_u64(self.origin_seq);
        w.put_i64(self.timestamp.0);
        w.put_u8(self.kind.to_u8());
        w.put_blob(&self.payload);
    }

    pub fn read_from(r: &mut Reader<'_>) -> Result<Self, FederationError> {
        let origin_node = r.str16()?;
        let origin_seq = r.u64()?;
        let timestamp = Timestamp(r.i64()?);
        let kind = EntryKind::from_u8(r.u8()?)?;
        let payload = r.blob32()?;
        Ok(Self {
            origin_node,
            origin_seq,
            timestamp,
            kind,
            payload,
        })
    }
}

/// Length-prefixed binary frames for the sync wire.
pub fn encode_frames(entries: &[ReplicationEntry]) -> Vec<u8> {
    let mut out = Writer::new();
    for entry in entries {
        let mut body = Writer::new();
        entry.write_to(&mut body);
        out.put_blob(&body.into_bytes());
    }
    out.into_bytes()
}

pub fn decode_frames(bytes: &[u8]) -> Result<Vec<ReplicationEntry>, FederationError> {
    let mut entries = Vec::new();
    let mut r = Reader::new(bytes);
    while !r.is_empty() {
        let body = r.blob32()?;
        let mut br = Reader::new(&body);
        let entry = ReplicationEntry::read_from(&mut br)?;
        if !br.is_empty() {
            return Err(FederationError::FrameLength);
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// The plaintext content of an entry payload. Enrollments carry the origin's
/// sealed envelope verbatim so replicated indexes stay byte-identical.
#[derive(Clone, Debug, PartialEq)]
pub enum Mutation {
    Enroll {
        code: FaceOutputCode,
        sealed_code: SealedRecord,
        embedding: Embedding,
        personal: PersonalData,
        created_at: Timestamp,
    },
    AppendEmbedding {
        code: FaceOutputCode,
        embedding: Embedding,
        updated_at: Timestamp,
    },
    UpdatePersonal {
        code: FaceOutputCode,
        personal: PersonalData,
        updated_at: Timestamp,
    },
    SuspectAdd {
        code: FaceOutputCode,
        embeddings: Vec<Embedding>,
        activity_at: Timestamp,
        activity: String,
    },
}

fn write_code(w: &mut Writer, code: FaceOutputCode) {
    w.put_u64(code.quant_bits());
    w.put_u16(code.seq());
}

fn read_code(r: &mut Reader<'_>) -> Result<FaceOutputCode, WireError> {
    let quant = r.u64()?;
    let seq = r.u16()?;
    Ok(FaceOutputCode::new(quant, seq))
}

impl Mutation {
    pub fn kind(&self) -> EntryKind {
        match self {
            Self::Enroll { .. } => EntryKind::Enroll,
            Self::AppendEmbedding { .. } => EntryKind::AppendEmbedding,
            Self::UpdatePersonal { .. } => EntryKind::UpdatePersonal,
            Self::SuspectAdd { .. } => EntryKind::SuspectAdd,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_u8(self.kind().to_u8());
        match self {
            Self::Enroll {
                code,
                sealed_code,
                embedding,
                personal,
                created_at,
            } => {
                write_code(&mut w, *code);
                sealed_code.write_to(&mut w);
                embedding.write_to(&mut w);
                personal.write_to(&mut w);
                w.put_i64(created_at.0);
            }
            Self::AppendEmbedding {
                code,
                embedding,
                updated_at,
            } => {
                write_code(&mut w, *code);
                embedding.write_to(&mut w);
                w.put_i64(updated_at.0);
            }
            Self::UpdatePersonal {
                code,
                personal,
                updated_at,
            } => {
                write_code(&mut w, *code);
                personal.write_to(&mut w);
                w.put_i64(updated_at.0);
            }
            Self::SuspectAdd {
                code,
                embeddings,
                activity_at,
                activity,
            } => {
                write_code(&mut w, *code);
                w.put_u32(embeddings.len() as u32);
                for e in embeddings {
                    e.write_to(&mut w);
                }
                w.put_i64(activity_at.0);
                w.put_str(activity);
            }
        }
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FederationError> {
        let mut r = Reader::new(bytes);
        let kind = EntryKind::from_u8(r.u8()?)?;
        let mutation = match kind {
            EntryKind::Enroll => {
                let code = read_code(&mut r)?;
                let sealed_code = SealedRecord::read_from(&mut r)?;
                let embedding = Embedding::read_from(&mut r)?;
                let personal = PersonalData::read_from(&mut r)?;
                let created_at = Timestamp(r.i64()?);
                Self::Enroll {
                    code,
                    sealed_code,
                    embedding,
                    personal,
                    created_at,
                }
            }
            EntryKind::AppendEmbedding => {
                let code = read_code(&mut r)?;
                let embedding = Embedding::read_from(&mut r)?;
                let updated_at = Timestamp(r.i64()?);
                Self::AppendEmbedding {
                    code,
                    embedding,
                    updated_at,
                }
            }
            EntryKind::UpdatePersonal => {
                let code = read_code(&mut r)?;
                let personal = PersonalData::read_from(&mut r)?;
                let updated_at = Timestamp(r.i64()?);
                Self::UpdatePersonal {
                    code,
                    personal,
                    updated_at,
                }
            }
            EntryKind::SuspectAdd => {
                let code = read_code(&mut r)?;
                let count = r.u32()? as usize;
                let embeddings = (0..count)
                    .map(|_| Embedding::read_from(&mut r))
                    .collect::<Result<_, _>>()?;
                let activity_at = Timestamp(r.i64()?);
                let activity = r.str16()?;
                Self::SuspectAdd {
                    code,
                    embeddings,
                    activity_at,
                    activity,
                }
            }
        };
        if !r.is_empty() {
            return Err(FederationError::FrameLength);
        }
        Ok(mutation)
    }
}

/// A mutation ready to dispatch, in the order it must apply.
#[derive(Debug)]
pub struct ReadyMutation {
    pub origin: String,
    pub timestamp: Timestamp,
    pub mutation: Mutation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct ApplyReport {
    /// Entries newly admitted this call (applied or quarantined count
    /// separately; re-deliveries count as zero).
    pub applied: usize,
    pub quarantined: usize,
    /// Entries buffered waiting for a per-origin gap to fill.
    pub buffered: usize,
}

/// The replication state of one node: its log, applied vector, gap buffer
/// and quarantine.
pub struct FederationState {
    node_id: String,
    log: Vec<ReplicationEntry>,
    applied: BTreeMap<String, u64>,
    pending: BTreeMap<(String, u64), ReplicationEntry>,
    quarantined: Vec<ReplicationEntry>,
}

impl FederationState {
    pub fn new(node_id: &str) -> Self {
        Self {
            node_id: node_id.to_string(),
            log: Vec::new(),
            applied: BTreeMap::new(),
            pending: BTreeMap::new(),
            quarantined: Vec::new(),
        }
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    pub fn log(&self) -> &[ReplicationEntry] {
        &self.log
    }

    pub fn applied_vector(&self) -> &BTreeMap<String, u64> {
        &self.applied
    }

    pub fn quarantined(&self) -> &[ReplicationEntry] {
        &self.quarantined
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    /// Seals and logs a local mutation with the next origin sequence.
    pub fn emit(
        &mut self,
        sealer: &mut Sealer,
        timestamp: Timestamp,
        mutation: &Mutation,
    ) -> &ReplicationEntry {
        let origin_seq = self.applied.get(&self.node_id).copied().unwrap_or(0) + 1;
        let payload = sealer.seal(&mutation.encode()).to_bytes();
        let entry = ReplicationEntry {
            origin_node: self.node_id.clone(),
            origin_seq,
            timestamp,
            kind: mutation.kind(),
            payload,
        };
        self.applied.insert(self.node_id.clone(), origin_seq);
        self.log.push(entry);
        self.log.last().unwrap()
    }

    /// Entries the peer lacks according to its applied vector, per-origin
    /// ordered.
    pub fn pull(&self, peer: &BTreeMap<String, u64>) -> Vec<ReplicationEntry> {
        let mut out: Vec<ReplicationEntry> = self
            .log
            .iter()
            .filter(|e| e.origin_seq > peer.get(&e.origin_node).copied().unwrap_or(0))
            .cloned()
            .collect();
        out.sort_by(|a, b| {
            a.origin_node
                .cmp(&b.origin_node)
                .then(a.origin_seq.cmp(&b.origin_seq))
        });
        out
    }

    /// Admits a batch of entries. Already-applied entries are skipped,
    /// out-of-order entries buffered, authentication failures quarantined
    /// (the vector still advances so sync continues past them). Returns the
    /// decoded mutations in apply order; the caller dispatches them to the
    /// stores and counts orphans itself.
    pub fn apply(
        &mut self,
        key: &SealKey,
        entries: Vec<ReplicationEntry>,
    ) -> (Vec<ReadyMutation>, ApplyReport) {
        let mut report = ApplyReport::default();
        for entry in entries {
            let seen = self.applied.get(&entry.origin_node).copied().unwrap_or(0);
            if entry.origin_seq <= seen {
                continue;
            }
            self.pending
                .insert((entry.origin_node.clone(), entry.origin_seq), entry);
        }

        let mut ready = Vec::new();
        let origins: Vec<String> = self.pending.keys().map(|(o, _)| o.clone()).collect();
        for origin in origins {
            loop {
                let next = self.applied.get(&origin).copied().unwrap_or(0) + 1;
                let Some(entry) = self.pending.remove(&(origin.clone(), next)) else {
                    break;
                };
                self.applied.insert(origin.clone(), next);
                match open_mutation(key, &entry.payload) {
                    Ok(mutation) => {
                        ready.push(ReadyMutation {
                            origin: entry.origin_node.clone(),
                            timestamp: entry.timestamp,
                            mutation,
                        });
                        self.log.push(entry);
                        report.applied += 1;
                    }
                    Err(_) => {
                        self.quarantined.push(entry);
                        report.quarantined += 1;
                    }
                }
            }
        }
        report.buffered = self.pending.len();
        (ready, report)
    }

    // Restore helpers for the persistence container.
    pub(crate) fn restore_log(&mut self, entries: Vec<ReplicationEntry>) {
        self.log = entries;
    }

    pub(crate) fn restore_applied(&mut self, applied: BTreeMap<String, u64>) {
        self.applied = applied;
    }

    pub(crate) fn restore_pending(&mut self, pending: Vec<ReplicationEntry>) {
        self.pending = pending
            .into_iter()
            .map(|e| ((e.origin_node.clone(), e.origin_seq), e))
            .collect();
    }

    pub(crate) fn restore_quarantined(&mut self, entries: Vec<ReplicationEntry>) {
        self.quarantined = entries;
    }

    pub(crate) fn pending_entries(&self) -> Vec<ReplicationEntry> {
        self.pending.values().cloned().collect()
    }
}

fn open_mutation(key: &SealKey, payload: &[u8]) -> Result<Mutation, CodecError> {
    let record = SealedRecord::from_bytes(payload)?;
    let plaintext = key.open(&record)?;
    Mutation::decode(&plaintext).map_err(|_| CodecError::AuthenticationFailure)
}
