//! The two-tier registry: a slim face-output-code index linked one-to-many
//! to the bulky face-image store.
//!
//! The index maps each code to one identity record carrying every embedding
//! ever enrolled for that person; matching takes the minimum distance over
//! the list, so appended captures only improve recall. Identification first
//! narrows candidates by Hamming distance over quantization bits and falls
//! back to a full scan when the radius finds nothing.
//!
//! Local mutations and replicated mutations run through the same `apply_*`
//! functions, which makes replaying a replication log reproduce the index
//! byte for byte.

use crate::codec::{self, CodecError, FaceOutputCode, SealKey, SealedRecord, Sealer};
use crate::faceml::{EigenfaceModel, Embedding, FaceMlError, Thresholds};
use crate::raster::FaceRaster;
use crate::time::Timestamp;
use crate::wire::{Reader, WireError, Writer};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

const INDEX_MAGIC: &[u8; 4] = b"FCIX";
const INDEX_VERSION: u16 = 1;

/// Radius at or above the full bit width disables the prefilter.
pub const SCAN_ALL_RADIUS: u32 = codec::QUANT_BITS as u32;

#[derive(Debug, Error, PartialEq)]
pub enum RegistryError {
    #[error("not a face: distance from face space {dffs} exceeds the threshold")]
    NotAFace { dffs: f64 },
    #[error("identity {existing} already matches this face at distance {distance}")]
    DuplicateIdentity {
        existing: FaceOutputCode,
        distance: f64,
    },
    #[error("unknown face output code {code}")]
    UnknownCode { code: FaceOutputCode },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("all sequence slots for this quantization pattern are in use")]
    CodeSpaceExhausted,
    #[error(transparent)]
    FaceMl(#[from] FaceMlError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Personal data attached to an identity. `attributes` is an open map for
/// anything beyond the fixed fields (salary, clearances, flags).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonalData {
    pub name: String,
    #[serde(default)]
    pub address: String,
    #[serde(default)]
    pub phone: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

impl PersonalData {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.to_string(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RegistryError> {
        if self.name.is_empty() {
            return Err(RegistryError::Validation("name must be non-empty".into()));
        }
        let strings = [&self.name, &self.address, &self.phone]
            .into_iter()
            .chain(self.attributes.iter().flat_map(|(k, v)| [k, v]));
        for s in strings {
            if s.len() > u16::MAX as usize {
                return Err(RegistryError::Validation("field exceeds 65535 bytes".into()));
            }
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut Writer) {
        w.put_str(&self.name);
        w.put_str(&self.address);
        w.put_str(&self.phone);
        w.put_u16(self.attributes.len() as u16);
        for (k, v) in &self.attributes {
            w.put_str(k);
            w.put_str(v);
        }
    }

    pub fn read_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let name = r.str16()?;
        let address = r.str16()?;
        let phone = r.str16()?;
        let count = r.u16()?;
        let mut attributes = BTreeMap::new();
        for _ in 0..count {
            let k = r.str16()?;
            let v = r.str16()?;
            attributes.insert(k, v);
        }
        Ok(Self {
            name,
            address,
            phone,
            attributes,
        })
    }
}

/// One row of the code index.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityRecord {
    pub code: FaceOutputCode,
    pub enrolled_embeddings: Vec<Embedding>,
    /// Per-embedding provenance `(captured_at, origin)`; keeps
    /// `enrolled_embeddings` in one canonical order on every node no matter
    /// the order replicated appends arrive in.
    pub(crate) embedding_keys: Vec<(Timestamp, String)>,
    pub personal: PersonalData,
    pub created_at: Timestamp,
    pub updated_at: Timestamp,
    /// Code text encrypted at rest; index files never hold the plaintext.
    pub sealed_code: SealedRecord,
    /// Node that performed the enrollment; part of conflict ordering.
    pub(crate) enrolled_by: String,
    /// Last-writer-wins version of `personal`: (timestamp, origin node).
    pub(crate) personal_version: (Timestamp, String),
}

/// One row of the image store. Many image records share one owner code.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceImageRecord {
    pub image_id: u64,
    pub owner_code: FaceOutputCode,
    pub raster: FaceRaster,
    pub captured_at: Timestamp,
    pub source: String,
}

/// Outcome of an identification attempt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "camelCase")]
pub enum MatchResult {
    #[serde(rename_all = "camelCase")]
    Recognized { code: FaceOutputCode, distance: f64 },
    #[serde(rename_all = "camelCase")]
    Unrecognized { best_distance: Option<f64> },
    #[serde(rename_all = "camelCase")]
    NotAFace { dffs: f64 },
}

#[derive(Clone, Copy, Debug)]
pub struct MatchParams {
    pub thresholds: Thresholds,
    pub hamming_radius: u32,
}

/// Everything needed to replicate an enrollment besides the raster, which
/// stays local.
#[derive(Clone, Debug)]
pub struct EnrollOutcome {
    pub code: FaceOutputCode,
    pub embedding: Embedding,
    pub sealed_code: SealedRecord,
    pub image_id: u64,
}

#[derive(Clone, Debug)]
pub struct AppendOutcome {
    pub image_id: u64,
    pub embedding: Embedding,
}

pub struct Registry {
    model: EigenfaceModel,
    params: MatchParams,
    seal_key: SealKey,
    identities: BTreeMap<FaceOutputCode, IdentityRecord>,
    images: BTreeMap<u64, FaceImageRecord>,
    next_image_id: u64,
}

impl Registry {
    pub fn new(model: EigenfaceModel, params: MatchParams, seal_key: SealKey) -> Self {
        Self {
            model,
            params,
            seal_key,
            identities: BTreeMap::new(),
            images: BTreeMap::new(),
            next_image_id: 1,
        }
    }

    pub fn model(&self) -> &EigenfaceModel {
        &self.model
    }

    pub fn params(&self) -> &MatchParams {
        &self.params
    }

    pub fn identity_count(&self) -> usize {
        self.identities.len()
    }

    pub fn identities(&self) -> impl Iterator<Item = &IdentityRecord> {
        self.identities.values()
    }

    pub fn images(&self) -> impl Iterator<Item = &FaceImageRecord> {
        self.images.values()
    }

    pub fn get(&self, code: &FaceOutputCode) -> Option<&IdentityRecord> {
        self.identities.get(code)
    }

    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    /// Registers a new identity. Rejects images past the face threshold and
    /// faces already enrolled (one human, one identity). The caller ships
    /// the returned pieces through federation.
    pub fn enroll(
        &mut self,
        sealer: &mut Sealer,
        origin: &str,
        raster: &FaceRaster,
        personal: PersonalData,
        now: Timestamp,
        source: &str,
    ) -> Result<EnrollOutcome, RegistryError> {
        personal.validate()?;
        let embedding = self.model.project(raster)?;
        if embedding.dffs() > self.params.thresholds.face {
            return Err(RegistryError::NotAFace {
                dffs: embedding.dffs(),
            });
        }
        if let Some((distance, existing)) = self.best_match(&embedding)? {
            if distance <= self.params.thresholds.accept {
                return Err(RegistryError::DuplicateIdentity { existing, distance });
            }
        }
        let quant = codec::quantize(embedding.weights());
        let seq = self.smallest_unused_seq(quant)?;
        let code = FaceOutputCode::new(quant, seq);
        let sealed_code = sealer.seal(code.render().as_bytes());
        self.apply_enroll(
            code,
            sealed_code.clone(),
            embedding.clone(),
            personal,
            now,
            now,
            origin,
        );
        let image_id = self.push_image(code, raster.clone(), now, source);
        Ok(EnrollOutcome {
            code,
            embedding,
            sealed_code,
            image_id,
        })
    }

    /// Identifies a raster with the configured Hamming prefilter radius.
    pub fn identify(&self, raster: &FaceRaster) -> Result<MatchResult, RegistryError> {
        self.identify_with_radius(raster, self.params.hamming_radius)
    }

    /// Identifies with an explicit radius; `SCAN_ALL_RADIUS` disables the
    /// prefilter entirely.
    pub fn identify_with_radius(
        &self,
        raster: &FaceRaster,
        radius: u32,
    ) -> Result<MatchResult, RegistryError> {
        let embedding = self.model.project(raster)?;
        self.match_embedding_with_radius(&embedding, radius)
    }

    /// Matches an already-projected embedding, applying the face threshold
    /// and the accept threshold.
    pub fn match_embedding(&self, embedding: &Embedding) -> Result<MatchResult, RegistryError> {
        self.match_embedding_with_radius(embedding, self.params.hamming_radius)
    }

    fn match_embedding_with_radius(
        &self,
        embedding: &Embedding,
        radius: u32,
    ) -> Result<MatchResult, RegistryError> {
        if embedding.dffs() > self.params.thresholds.face {
            return Ok(MatchResult::NotAFace {
                dffs: embedding.dffs(),
            });
        }
        if self.identities.is_empty() {
            return Ok(MatchResult::Unrecognized {
                best_distance: None,
            });
        }
        // The prefilter is a pure performance knob: when it yields no
        // accepted candidate the scan falls back to the full index, so the
        // result always equals the exhaustive linear scan.
        let query = FaceOutputCode::new(codec::quantize(embedding.weights()), 0);
        let candidates: Vec<&IdentityRecord> = self
            .identities
            .values()
            .filter(|record| record.code.hamming(&query) <= radius)
            .collect();
        let prefiltered_everything = candidates.len() == self.identities.len();
        if !candidates.is_empty() {
            let (distance, code) = self.closest(&candidates, embedding)?;
            if distance <= self.params.thresholds.accept {
                return Ok(MatchResult::Recognized { code, distance });
            }
            if prefiltered_everything {
                return Ok(MatchResult::Unrecognized {
                    best_distance: Some(distance),
                });
            }
        }
        let all: Vec<&IdentityRecord> = self.identities.values().collect();
        let (distance, code) = self.closest(&all, embedding)?;
        if distance <= self.params.thresholds.accept {
            Ok(MatchResult::Recognized { code, distance })
        } else {
            Ok(MatchResult::Unrecognized {
                best_distance: Some(distance),
            })
        }
    }

    /// Minimum distance over every enrolled embedding of every candidate;
    /// ties break on the lexicographically smallest rendered code text.
    fn closest(
        &self,
        candidates: &[&IdentityRecord],
        embedding: &Embedding,
    ) -> Result<(f64, FaceOutputCode), RegistryError> {
        let score = |record: &&IdentityRecord| -> Result<(f64, String, FaceOutputCode), FaceMlError> {
            let mut best = f64::INFINITY;
            for enrolled in &record.enrolled_embeddings {
                best = best.min(embedding.distance(enrolled)?);
            }
            Ok((best, record.code.render(), record.code))
        };
        // Candidates are scored independently; parallel and sequential runs
        // yield the same floats and the same winner.
        #[cfg(feature = "parallel")]
        let scored: Vec<(f64, String, FaceOutputCode)> =
            candidates.par_iter().map(score).collect::<Result<_, _>>()?;
        #[cfg(not(feature = "parallel"))]
        let scored: Vec<(f64, String, FaceOutputCode)> =
            candidates.iter().map(score).collect::<Result<_, _>>()?;

        let winner = scored
            .into_iter()
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.cmp(&b.1)))
            .expect("candidate set is never empty here");
        Ok((winner.0, winner.2))
    }

    /// Exhaustive best match over all identities, used for duplicate checks.
    fn best_match(
        &self,
        embedding: &Embedding,
    ) -> Result<Option<(f64, FaceOutputCode)>, RegistryError> {
        if self.identities.is_empty() {
            return Ok(None);
        }
        let all: Vec<&IdentityRecord> = self.identities.values().collect();
        self.closest(&all, embedding).map(Some)
    }

    /// Stores a fresh capture for an existing identity and appends its
    /// embedding so future matching sees it.
    pub fn append_face_image(
        &mut self,
        origin: &str,
        code: FaceOutputCode,
        raster: &FaceRaster,
        now: Timestamp,
        source: &str,
    ) -> Result<AppendOutcome, RegistryError> {
        if !self.identities.contains_key(&code) {
            return Err(RegistryError::UnknownCode { code });
        }
        let embedding = self.model.project(raster)?;
        self.apply_append(code, embedding.clone(), now, origin)?;
        let image_id = self.push_image(code, raster.clone(), now, source);
        Ok(AppendOutcome {
            image_id,
            embedding,
        })
    }

    /// Exact key lookup; images come back ordered by capture time.
    pub fn lookup(
        &self,
        code: FaceOutputCode,
    ) -> Result<(&IdentityRecord, Vec<&FaceImageRecord>), RegistryError> {
        let record = self
            .identities
            .get(&code)
            .ok_or(RegistryError::UnknownCode { code })?;
        let mut images: Vec<&FaceImageRecord> = self
            .images
            .values()
            .filter(|img| img.owner_code == code)
            .collect();
        images.sort_by_key(|img| (img.captured_at, img.image_id));
        Ok((record, images))
    }

    /// Replaces personal data under last-writer-wins versioning.
    pub fn update_personal(
        &mut self,
        code: FaceOutputCode,
        personal: PersonalData,
        now: Timestamp,
        origin: &str,
    ) -> Result<(), RegistryError> {
        personal.validate()?;
        if !self.identities.contains_key(&code) {
            return Err(RegistryError::UnknownCode { code });
        }
        self.apply_update(code, personal, now, origin)
    }

    // ---- mutation appliers (shared by local calls and replication) ----

    /// Inserts an enrollment record, resolving conflicts deterministically:
    ///
    /// - an identical record (same code, same sealed bytes) is a no-op;
    /// - two different records under one code keep the last writer by
    ///   `(created_at, origin)`; the loser moves to the next free sequence
    ///   slot with a deterministically derived envelope;
    /// - a record matching another identity within the accept threshold gets
    ///   the loser flagged `merged-into` the winner's code.
    #[allow(clippy::too_many_arguments)]
    pub fn apply_enroll(
        &mut self,
        code: FaceOutputCode,
        sealed_code: SealedRecord,
        embedding: Embedding,
        personal: PersonalData,
        created_at: Timestamp,
        updated_at: Timestamp,
        origin: &str,
    ) {
        let incoming = IdentityRecord {
            code,
            enrolled_embeddings: vec![embedding],
            embedding_keys: vec![(created_at, origin.to_string())],
            personal,
            created_at,
            updated_at,
            sealed_code,
            enrolled_by: origin.to_string(),
            personal_version: (created_at, origin.to_string()),
        };

        if let Some(existing) = self.identities.get(&code) {
            if existing.sealed_code == incoming.sealed_code {
                return; // duplicate delivery
            }
            // Key collision: two nodes allocated the same sequence slot
            // independently. The last writer keeps the code; the other
            // record moves to the next free slot — exactly what sequential
            // enrollment would have assigned. The replacement envelope
            // derives from the loser's original one, so every node computes
            // identical bytes.
            let incoming_wins = (incoming.created_at, incoming.enrolled_by.as_str())
                > (existing.created_at, existing.enrolled_by.as_str());
            let (winner, mut loser) = if incoming_wins {
                (incoming, self.identities.remove(&code).unwrap())
            } else {
                (self.identities.remove(&code).unwrap(), incoming)
            };
            let seq = self
                .smallest_unused_seq_after_insert(code.quant_bits(), &winner)
                .expect("sequence space exhausted during conflict resolution");
            let rekeyed = FaceOutputCode::new(code.quant_bits(), seq);
            loser.code = rekeyed;
            loser.sealed_code = codec::reseal_derived(
                &self.seal_key,
                &loser.sealed_code,
                rekeyed.render().as_bytes(),
            );
            let winner_code = winner.code;
            self.identities.insert(winner_code, winner);
            self.identities.insert(rekeyed, loser);
            // Whether the colliding records are the same person is decided
            // by embedding distance, same as the distinct-code case.
            self.flag_same_person(winner_code);
            self.flag_same_person(rekeyed);
        } else {
            self.identities.insert(code, incoming);
            self.flag_same_person(code);
        }
    }

    /// After an insert, if another identity matches the new record within
    /// the accept threshold, flag the last-writer loser as merged.
    fn flag_same_person(&mut self, code: FaceOutputCode) {
        let record = &self.identities[&code];
        let embedding = record.enrolled_embeddings[0].clone();
        let mut best: Option<(f64, FaceOutputCode)> = None;
        for other in self.identities.values() {
            if other.code == code {
                continue;
            }
            for enrolled in &other.enrolled_embeddings {
                if let Ok(d) = embedding.distance(enrolled) {
                    let key = (d, other.code);
                    if best.is_none_or(|b| key < b) {
                        best = Some(key);
                    }
                }
            }
        }
        let Some((distance, other_code)) = best else {
            return;
        };
        if distance > self.params.thresholds.accept {
            return;
        }
        let new_version = {
            let r = &self.identities[&code];
            (r.created_at, r.enrolled_by.clone())
        };
        let old_version = {
            let r = &self.identities[&other_code];
            (r.created_at, r.enrolled_by.clone())
        };
        let (winner, loser) = if new_version > old_version {
            (code, other_code)
        } else {
            (other_code, code)
        };
        let winner_text = self.identities[&winner].code.render();
        self.identities
            .get_mut(&loser)
            .unwrap()
            .personal
            .attributes
            .insert("merged-into".into(), winner_text);
    }

    /// Appends an embedding at its canonical position. Insertion order is
    /// `(captured_at, origin)` with arrival order breaking exact ties, which
    /// is per-origin sequence order on every node — so replicas converge on
    /// identical lists regardless of sync interleaving. `updated_at` only
    /// moves forward for the same reason.
    pub fn apply_append(
        &mut self,
        code: FaceOutputCode,
        embedding: Embedding,
        updated_at: Timestamp,
        origin: &str,
    ) -> Result<(), RegistryError> {
        let record = self
            .identities
            .get_mut(&code)
            .ok_or(RegistryError::UnknownCode { code })?;
        let key = (updated_at, origin.to_string());
        let pos = record.embedding_keys.partition_point(|k| *k <= key);
        record.embedding_keys.insert(pos, key);
        record.enrolled_embeddings.insert(pos, embedding);
        record.updated_at = record.updated_at.max(updated_at);
        Ok(())
    }

    pub fn apply_update(
        &mut self,
        code: FaceOutputCode,
        personal: PersonalData,
        timestamp: Timestamp,
        origin: &str,
    ) -> Result<(), RegistryError> {
        let record = self
            .identities
            .get_mut(&code)
            .ok_or(RegistryError::UnknownCode { code })?;
        let version = (timestamp, origin.to_string());
        if version > record.personal_version {
            record.personal = personal;
            record.personal_version = version;
            record.updated_at = record.updated_at.max(timestamp);
        }
        Ok(())
    }

    /// Adds a raster to the local image store and returns its id.
    pub fn push_image(
        &mut self,
        owner_code: FaceOutputCode,
        raster: FaceRaster,
        captured_at: Timestamp,
        source: &str,
    ) -> u64 {
        let image_id = self.next_image_id;
        self.next_image_id += 1;
        self.images.insert(
            image_id,
            FaceImageRecord {
                image_id,
                owner_code,
                raster,
                captured_at,
                source: source.to_string(),
            },
        );
        image_id
    }

    pub(crate) fn restore_image(&mut self, record: FaceImageRecord) {
        self.next_image_id = self.next_image_id.max(record.image_id + 1);
        self.images.insert(record.image_id, record);
    }

    pub(crate) fn restore_identity(&mut self, record: IdentityRecord) {
        self.identities.insert(record.code, record);
    }

    fn smallest_unused_seq(&self, quant: u64) -> Result<u16, RegistryError> {
        let mut expected: u32 = 0;
        let range = FaceOutputCode::new(quant, 0)..=FaceOutputCode::new(quant, u16::MAX);
        for code in self.identities.range(range).map(|(c, _)| c) {
            if u32::from(code.seq()) > expected {
                break;
            }
            expected = u32::from(code.seq()) + 1;
        }
        u16::try_from(expected).map_err(|_| RegistryError::CodeSpaceExhausted)
    }

    fn smallest_unused_seq_after_insert(
        &self,
        quant: u64,
        pending: &IdentityRecord,
    ) -> Result<u16, RegistryError> {
        let mut expected: u32 = 0;
        let range = FaceOutputCode::new(quant, 0)..=FaceOutputCode::new(quant, u16::MAX);
        let mut seqs: Vec<u16> = self.identities.range(range).map(|(c, _)| c.seq()).collect();
        if pending.code.quant_bits() == quant {
            seqs.push(pending.code.seq());
            seqs.sort_unstable();
        }
        for seq in seqs {
            if u32::from(seq) > expected {
                break;
            }
            expected = u32::from(seq) + 1;
        }
        u16::try_from(expected).map_err(|_| RegistryError::CodeSpaceExhausted)
    }

    /// Serializes the code index: per record the sealed envelope, the
    /// embedding block and both timestamps, in canonical code order. The
    /// file never contains plaintext code text.
    pub fn export_index(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_raw(INDEX_MAGIC);
        w.put_u16(INDEX_VERSION);
        w.put_u32(self.identities.len() as u32);
        for record in self.identities.values() {
            record.sealed_code.write_to(&mut w);
            w.put_u32(record.enrolled_embeddings.len() as u32);
            for embedding in &record.enrolled_embeddings {
                embedding.write_to(&mut w);
            }
            w.put_i64(record.created_at.0);
            w.put_i64(record.updated_at.0);
        }
        w.into_bytes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::SealKey;
    use crate::synth;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const SIZE: u32 = 16;

    struct Fixture {
        registry: Registry,
        sealer: Sealer,
        corpus: synth::Corpus,
    }

    fn fixture(seed: u64) -> Fixture {
        let corpus = synth::corpus(seed, 20, 5, SIZE);
        let model =
            EigenfaceModel::train(&corpus.training_set(), Some(synth::RECOMMENDED_COMPONENTS)).unwrap();
        let thresholds = Thresholds::calibrate(&model, &corpus.enrolled_groups()).unwrap();
        let key = SealKey::from_slice(&[7; 32]).unwrap();
        let registry = Registry::new(
            model,
            MatchParams {
                thresholds,
                hamming_radius: 8,
            },
            key.clone(),
        );
        let sealer = Sealer::new(key, "test-node", 0);
        Fixture {
            registry,
            sealer,
            corpus,
        }
    }

    /// First capture of an identity that passes the face gate.
    fn gate_passing(fx: &Fixture, identity: usize) -> FaceRaster {
        let model = fx.registry.model();
        let face = fx.registry.params().thresholds.face;
        fx.corpus.identities[identity]
            .enrolled
            .iter()
            .find(|r| model.project(r).unwrap().dffs() <= face)
            .expect("no capture passes the face gate")
            .clone()
    }

    /// Enrolls every identity: the first capture under the face gate seeds
    /// the record, the rest are appended. Returns (code, enrolled raster).
    fn enroll_all(fx: &mut Fixture) -> Vec<(FaceOutputCode, FaceRaster)> {
        let identities = fx.corpus.identities.iter().enumerate();
        identities
            .map(|(i, id)| {
                let mut outcome = None;
                let mut first = None;
                for capture in &id.enrolled {
                    match fx.registry.enroll(
                        &mut fx.sealer,
                        "test-node",
                        capture,
                        PersonalData::named(&format!("person-{i}")),
                        Timestamp(1_000 + i as i64),
                        "desk",
                    ) {
                        Ok(out) => {
                            first = Some(capture.clone());
                            outcome = Some(out);
                            break;
                        }
                        Err(RegistryError::NotAFace { .. }) => continue,
                        Err(other) => panic!("enroll failed: {other}"),
                    }
                }
                let outcome = outcome.expect("no capture passed the face gate");
                let first = first.unwrap();
                for capture in &id.enrolled {
                    if capture != &first {
                        fx.registry
                            .append_face_image(
                                "test-node",
                                outcome.code,
                                capture,
                                Timestamp(2_000 + i as i64),
                                "desk",
                            )
                            .unwrap();
                    }
                }
                (outcome.code, first)
            })
            .collect()
    }

    #[test]
    fn enroll_creates_one_identity_and_one_image() {
        let mut fx = fixture(99);
        let raster = gate_passing(&fx, 0);
        let outcome = fx
            .registry
            .enroll(
                &mut fx.sealer,
                "test-node",
                &raster,
                PersonalData::named("alice"),
                Timestamp(1),
                "lobby",
            )
            .unwrap();
        assert_eq!(fx.registry.identity_count(), 1);
        assert_eq!(fx.registry.image_count(), 1);
        let (record, images) = fx.registry.lookup(outcome.code).unwrap();
        assert_eq!(record.personal.name, "alice");
        assert_eq!(images.len(), 1);
        assert_eq!(images[0].source, "lobby");
        // The sealed envelope opens back to the code text.
        let text = fx.sealer.open(&record.sealed_code).unwrap();
        assert_eq!(text, outcome.code.render().as_bytes());
    }

    #[test]
    fn re_enrolling_the_same_face_is_rejected() {
        let mut fx = fixture(99);
        let raster = gate_passing(&fx, 0);
        let first = fx
            .registry
            .enroll(
                &mut fx.sealer,
                "test-node",
                &raster,
                PersonalData::named("alice"),
                Timestamp(1),
                "desk",
            )
            .unwrap();
        let err = fx
            .registry
            .enroll(
                &mut fx.sealer,
                "test-node",
                &raster,
                PersonalData::named("impostor"),
                Timestamp(2),
                "desk",
            )
            .unwrap_err();
        assert_eq!(
            err,
            RegistryError::DuplicateIdentity {
                existing: first.code,
                distance: 0.0
            }
        );
        assert_eq!(fx.registry.identity_count(), 1);
    }

    #[test]
    fn shared_sign_pattern_gets_sequence_slots() {
        let mut fx = fixture(99);
        let base = gate_passing(&fx, 0);
        let model = fx.registry.model().clone();
        let accept = fx.registry.params().thresholds.accept;
        let face = fx.registry.params().thresholds.face;
        let base_embedding = model.project(&base).unwrap();
        let base_bits = codec::quantize(base_embedding.weights());

        // Brute-force search for a second face with the same sign pattern
        // but beyond the accept threshold.
        let mut rng = ChaCha20Rng::seed_from_u64(1234);
        let mut found = None;
        for _ in 0..20_000 {
            let field = synth::pattern_field(&mut rng, SIZE, 0.5);
            let pixels: Vec<f64> = base
                .pixels()
                .iter()
                .zip(&field)
                .map(|(p, f)| (p + f).clamp(0.0, 1.0))
                .collect();
            let candidate = FaceRaster::from_pixels(SIZE, pixels).unwrap();
            let e = model.project(&candidate).unwrap();
            if codec::quantize(e.weights()) == base_bits
                && base_embedding.distance(&e).unwrap() > accept
                && e.dffs() <= face
            {
                found = Some(candidate);
                break;
            }
        }
        let second = found.expect("no sign-sharing raster found");

        let a = fx
            .registry
            .enroll(
                &mut fx.sealer,
                "test-node",
                &base,
                PersonalData::named("a"),
                Timestamp(1),
                "desk",
            )
            .unwrap();
        let b = fx
            .registry
            .enroll(
                &mut fx.sealer,
                "test-node",
                &second,
                PersonalData::named("b"),
                Timestamp(2),
                "desk",
            )
            .unwrap();
        assert_eq!(a.code.quant_bits(), b.code.quant_bits());
        assert_eq!(a.code.seq(), 0);
        assert_eq!(b.code.seq(), 1);
    }

    #[test]
    fn identify_finds_the_enrollment_raster_exactly() {
        let mut fx = fixture(99);
        let enrolled = enroll_all(&mut fx);
        let (code, raster) = enrolled[2].clone();
        let result = fx.registry.identify(&raster).unwrap();
        assert_eq!(
            result,
            MatchResult::Recognized {
                code,
                distance: 0.0
            }
        );
    }

    #[test]
    fn mean_face_is_unrecognized_when_everyone_is_far() {
        let mut fx = fixture(99);
        enroll_all(&mut fx);
        let accept = fx.registry.params().thresholds.accept;
        let mean = FaceRaster::from_pixels(SIZE, fx.registry.model().mean().to_vec()).unwrap();
        // Precondition of the scenario: every enrolled embedding has norm
        // beyond the accept threshold.
        let all_far = fx.registry.identities().all(|r| {
            r.enrolled_embeddings.iter().all(|e| {
                e.weights().iter().map(|w| w * w).sum::<f64>().sqrt() > accept
            })
        });
        assert!(all_far, "fixture too tight for the scenario");
        match fx.registry.identify(&mean).unwrap() {
            MatchResult::Unrecognized { best_distance } => assert!(best_distance.is_some()),
            other => panic!("expected Unrecognized, got {other:?}"),
        }
    }

    #[test]
    fn empty_registry_is_unrecognized_none() {
        let fx = fixture(99);
        let raster = fx.corpus.identities[0].enrolled[0].clone();
        assert_eq!(
            fx.registry.identify(&raster).unwrap(),
            MatchResult::Unrecognized {
                best_distance: None
            }
        );
    }

    #[test]
    fn prefiltered_identify_matches_linear_scan_oracle() {
        let mut fx = fixture(99);
        enroll_all(&mut fx);
        let mut rng = ChaCha20Rng::seed_from_u64(555);

        // Independent oracle: exhaustive scan, no prefilter, same rules.
        let oracle = |registry: &Registry, raster: &FaceRaster| -> MatchResult {
            let e = registry.model().project(raster).unwrap();
            if e.dffs() > registry.params().thresholds.face {
                return MatchResult::NotAFace { dffs: e.dffs() };
            }
            let mut best: Option<(f64, String, FaceOutputCode)> = None;
            for record in registry.identities() {
                for enrolled in &record.enrolled_embeddings {
                    let d = e.distance(enrolled).unwrap();
                    let key = (d, record.code.render(), record.code);
                    if best.as_ref().is_none_or(|b| (key.0, &key.1) < (b.0, &b.1)) {
                        best = Some(key);
                    }
                }
            }
            match best {
                None => MatchResult::Unrecognized {
                    best_distance: None,
                },
                Some((d, _, code)) if d <= registry.params().thresholds.accept => {
                    MatchResult::Recognized { code, distance: d }
                }
                Some((d, _, _)) => MatchResult::Unrecognized {
                    best_distance: Some(d),
                },
            }
        };

        for i in 0..300 {
            let raster = match i % 4 {
                0 => {
                    let id = &fx.corpus.identities[i % fx.corpus.identities.len()];
                    id.probes[i % id.probes.len()].clone()
                }
                1 => synth::unseen_face(&mut rng, SIZE),
                2 => synth::noise_raster(&mut rng, SIZE),
                _ => {
                    let id = &fx.corpus.identities[(i + 1) % fx.corpus.identities.len()];
                    id.enrolled[i % id.enrolled.len()].clone()
                }
            };
            let expected = oracle(&fx.registry, &raster);
            assert_eq!(fx.registry.identify(&raster).unwrap(), expected);
            assert_eq!(
                fx.registry
                    .identify_with_radius(&raster, SCAN_ALL_RADIUS)
                    .unwrap(),
                expected
            );
        }
    }

    #[test]
    fn appending_images_never_worsens_identification() {
        let mut fx = fixture(99);
        let id0 = gate_passing(&fx, 0);
        let outcome = fx
            .registry
            .enroll(
                &mut fx.sealer,
                "test-node",
                &id0,
                PersonalData::named("p"),
                Timestamp(1),
                "desk",
            )
            .unwrap();

        // A drifted capture halfway between two known ones stays a face.
        let second = fx.corpus.identities[0].enrolled[1].clone();
        let drifted = FaceRaster::from_pixels(
            SIZE,
            id0.pixels()
                .iter()
                .zip(second.pixels())
                .map(|(a, b)| (a + b) / 2.0)
                .collect(),
        )
        .unwrap();
        let before = match fx.registry.identify(&drifted).unwrap() {
            MatchResult::Recognized { distance, .. } => distance,
            MatchResult::Unrecognized {
                best_distance: Some(d),
            } => d,
            other => panic!("unexpected {other:?}"),
        };

        fx.registry
            .append_face_image("test-node", outcome.code, &second, Timestamp(2), "desk")
            .unwrap();
        assert_eq!(fx.registry.image_count(), 2);

        let after = match fx.registry.identify(&drifted).unwrap() {
            MatchResult::Recognized { distance, .. } => distance,
            MatchResult::Unrecognized {
                best_distance: Some(d),
            } => d,
            other => panic!("unexpected {other:?}"),
        };
        assert!(after <= before, "after {after} > before {before}");

        // The exact appended raster now matches at distance zero.
        assert_eq!(
            fx.registry.identify(&second).unwrap(),
            MatchResult::Recognized {
                code: outcome.code,
                distance: 0.0
            }
        );
    }

    #[test]
    fn lookup_returns_images_time_sorted() {
        let mut fx = fixture(99);
        let first = gate_passing(&fx, 0);
        let id = fx.corpus.identities[0].enrolled.clone();
        let outcome = fx
            .registry
            .enroll(
                &mut fx.sealer,
                "test-node",
                &first,
                PersonalData::named("p"),
                Timestamp(500),
                "desk",
            )
            .unwrap();
        // Deliberately out-of-order capture times.
        let others: Vec<_> = id.iter().filter(|r| *r != &first).take(2).collect();
        for (raster, ts) in others.into_iter().zip([Timestamp(900), Timestamp(250)]) {
            fx.registry
                .append_face_image("test-node", outcome.code, raster, ts, "desk")
                .unwrap();
        }
        let (_, images) = fx.registry.lookup(outcome.code).unwrap();
        let times: Vec<i64> = images.iter().map(|i| i.captured_at.0).collect();
        let mut sorted = times.clone();
        sorted.sort();
        assert_eq!(times, sorted);
        assert_eq!(times, vec![250, 500, 900]);

        let missing = FaceOutputCode::new(12345, 0);
        assert_eq!(
            fx.registry.lookup(missing).unwrap_err(),
            RegistryError::UnknownCode { code: missing }
        );
    }

    #[test]
    fn update_personal_replaces_and_validates() {
        let mut fx = fixture(99);
        let raster = gate_passing(&fx, 0);
        let outcome = fx
            .registry
            .enroll(
                &mut fx.sealer,
                "test-node",
                &raster,
                PersonalData::named("A"),
                Timestamp(1),
                "desk",
            )
            .unwrap();

        fx.registry
            .update_personal(outcome.code, PersonalData::named("B"), Timestamp(2), "test-node")
            .unwrap();
        assert_eq!(fx.registry.get(&outcome.code).unwrap().personal.name, "B");

        let err = fx
            .registry
            .update_personal(outcome.code, PersonalData::named(""), Timestamp(3), "test-node")
            .unwrap_err();
        assert!(matches!(err, RegistryError::Validation(_)));

        fx.registry
            .update_personal(outcome.code, PersonalData::named("C"), Timestamp(4), "test-node")
            .unwrap();
        fx.registry
            .update_personal(outcome.code, PersonalData::named("D"), Timestamp(5), "test-node")
            .unwrap();
        assert_eq!(fx.registry.get(&outcome.code).unwrap().personal.name, "D");
    }

    #[test]
    fn exported_index_decodes_per_its_documented_layout() {
        let mut fx = fixture(99);
        let enrolled = enroll_all(&mut fx);
        let bytes = fx.registry.export_index();

        let mut r = crate::wire::Reader::new(&bytes);
        assert_eq!(r.take(4).unwrap(), b"FCIX");
        assert_eq!(r.u16().unwrap(), 1);
        let count = r.u32().unwrap() as usize;
        assert_eq!(count, enrolled.len());
        for _ in 0..count {
            let envelope = SealedRecord::read_from(&mut r).unwrap();
            let text = fx.sealer.open(&envelope).unwrap();
            let code = FaceOutputCode::parse(std::str::from_utf8(&text).unwrap()).unwrap();
            let record = fx.registry.get(&code).expect("envelope resolves to a record");
            let n = r.u32().unwrap() as usize;
            assert_eq!(n, record.enrolled_embeddings.len());
            for expected in &record.enrolled_embeddings {
                let embedding = Embedding::read_from(&mut r).unwrap();
                assert_eq!(&embedding, expected);
            }
            assert_eq!(Timestamp(r.i64().unwrap()), record.created_at);
            assert_eq!(Timestamp(r.i64().unwrap()), record.updated_at);
        }
        assert!(r.is_empty(), "trailing bytes after the last record");
    }

    #[test]
    fn identify_is_deterministic() {
        let mut fx = fixture(99);
        enroll_all(&mut fx);
        let probe = fx.corpus.identities[3].probes[0].clone();
        let first = fx.registry.identify(&probe).unwrap();
        for _ in 0..5 {
            assert_eq!(fx.registry.identify(&probe).unwrap(), first);
        }
    }

    #[test]
    fn exported_index_contains_no_plaintext_code_text() {
        let mut fx = fixture(99);
        let enrolled = enroll_all(&mut fx);
        let bytes = fx.registry.export_index();
        assert!(&bytes[..4] == b"FCIX");
        let haystack = bytes.as_slice();
        for (code, _) in enrolled {
            let text = code.render();
            assert!(
                !haystack
                    .windows(text.len())
                    .any(|window| window == text.as_bytes()),
                "plaintext code text leaked into the index"
            );
        }
        assert!(!haystack.windows(3).any(|w| w == b"FC-"));
    }

    #[test]
    fn conflicting_enrolls_under_one_code_rekey_the_loser() {
        let mut fx = fixture(99);
        let model = fx.registry.model().clone();
        let r1 = fx.corpus.identities[0].enrolled[0].clone();
        let r2 = fx.corpus.identities[1].enrolled[0].clone();
        let e1 = model.project(&r1).unwrap();
        let e2 = model.project(&r2).unwrap();

        // Force both records onto the same code key, as if two nodes had
        // allocated it independently before syncing.
        let code = FaceOutputCode::new(codec::quantize(e1.weights()), 0);
        let sealed1 = fx.sealer.seal(code.render().as_bytes());
        let sealed2 = fx.sealer.seal(code.render().as_bytes());
        fx.registry.apply_enroll(
            code,
            sealed1,
            e1,
            PersonalData::named("early"),
            Timestamp(100),
            Timestamp(100),
            "node-a",
        );
        fx.registry.apply_enroll(
            code,
            sealed2,
            e2,
            PersonalData::named("late"),
            Timestamp(200),
            Timestamp(200),
            "node-b",
        );

        assert_eq!(fx.registry.identity_count(), 2);
        let winner = fx.registry.get(&code).unwrap();
        assert_eq!(winner.personal.name, "late");
        let rekeyed = FaceOutputCode::new(code.quant_bits(), 1);
        let loser = fx.registry.get(&rekeyed).unwrap();
        assert_eq!(loser.personal.name, "early");
        // Different people colliding on a slot are disambiguated, not
        // merged: no merge flag on either record.
        assert!(!loser.personal.attributes.contains_key("merged-into"));
        assert!(!winner.personal.attributes.contains_key("merged-into"));
        // The re-keyed envelope still opens to the new code text.
        assert_eq!(
            fx.sealer.open(&loser.sealed_code).unwrap(),
            rekeyed.render().as_bytes()
        );
    }

    #[test]
    fn same_person_colliding_on_one_code_is_rekeyed_and_flagged() {
        let mut fx = fixture(99);
        let model = fx.registry.model().clone();
        let capture_a = fx.corpus.identities[0].enrolled[0].clone();
        let capture_b = fx.corpus.identities[0].probes[0].clone();
        let e_a = model.project(&capture_a).unwrap();
        let e_b = model.project(&capture_b).unwrap();
        assert!(
            e_a.distance(&e_b).unwrap() <= fx.registry.params().thresholds.accept,
            "fixture captures should look like one person"
        );

        let code = FaceOutputCode::new(codec::quantize(e_a.weights()), 0);
        let sealed_a = fx.sealer.seal(code.render().as_bytes());
        let sealed_b = fx.sealer.seal(code.render().as_bytes());
        fx.registry.apply_enroll(
            code,
            sealed_a,
            e_a,
            PersonalData::named("early"),
            Timestamp(100),
            Timestamp(100),
            "node-a",
        );
        fx.registry.apply_enroll(
            code,
            sealed_b,
            e_b,
            PersonalData::named("late"),
            Timestamp(200),
            Timestamp(200),
            "node-b",
        );

        assert_eq!(fx.registry.identity_count(), 2);
        let rekeyed = FaceOutputCode::new(code.quant_bits(), 1);
        let loser = fx.registry.get(&rekeyed).unwrap();
        assert_eq!(loser.personal.name, "early");
        assert_eq!(
            loser.personal.attributes.get("merged-into"),
            Some(&code.render())
        );
    }

    #[test]
    fn same_person_under_two_codes_is_flagged() {
        let mut fx = fixture(99);
        let model = fx.registry.model().clone();
        let capture_a = fx.corpus.identities[0].enrolled[0].clone();
        let capture_b = fx.corpus.identities[0].probes[0].clone();
        let e_a = model.project(&capture_a).unwrap();
        let e_b = model.project(&capture_b).unwrap();

        let code_a = FaceOutputCode::new(codec::quantize(e_a.weights()), 0);
        // Pretend the other node saw one different sign bit.
        let code_b = FaceOutputCode::new(codec::quantize(e_b.weights()) ^ 1, 0);
        assert_ne!(code_a, code_b);

        let sealed_a = fx.sealer.seal(code_a.render().as_bytes());
        let sealed_b = fx.sealer.seal(code_b.render().as_bytes());
        fx.registry.apply_enroll(
            code_a,
            sealed_a,
            e_a,
            PersonalData::named("early"),
            Timestamp(100),
            Timestamp(100),
            "node-a",
        );
        fx.registry.apply_enroll(
            code_b,
            sealed_b,
            e_b,
            PersonalData::named("late"),
            Timestamp(200),
            Timestamp(200),
            "node-b",
        );

        assert_eq!(fx.registry.identity_count(), 2);
        let early = fx.registry.get(&code_a).unwrap();
        assert_eq!(
            early.personal.attributes.get("merged-into"),
            Some(&code_b.render()),
            "the earlier record should point at the last writer"
        );
        assert!(!fx.registry.get(&code_b).unwrap().personal.attributes.contains_key("merged-into"));
    }
}
