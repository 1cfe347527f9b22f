//! Persistent bundle store.
//!
//! Layout inside the store directory:
//!
//! * `<id-hex>.payload`: raw payload bytes, one file per bundle. Partial
//!   bundles are written chunk by chunk at their offsets.
//! * `index.journal`: a 5-byte header (`DTLJ` + format version `0x01`)
//!   followed by records `len: u32 LE | type: u8 | body | crc32: u32 LE`,
//!   where `len` counts `type + body` and the CRC covers the same bytes.
//!
//! Every mutation writes (and optionally fsyncs) payload bytes before the
//! journal record that makes them visible, so a crash can lose at most the
//! chunk whose record had not yet reached the journal. Replay stops at the
//! first torn or corrupt record. The journal is compacted on open.
//!
//! Bundles handed on under custody, or consumed at their destination, leave
//! a tombstone until they would have expired, so a late re-offer is answered
//! as a duplicate instead of being transferred again.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::bundle::{sha256, Bundle, BundleId, BundleKind, BundleMeta, NodeId, Priority};
use crate::codec::{CodecError, PutExt, Reader};
use crate::ranges::RangeSet;
use crate::Millis;

pub const JOURNAL_MAGIC: &[u8; 4] = b"DTLJ";
pub const JOURNAL_VERSION: u8 = 0x01;
pub const JOURNAL_FILE: &str = "index.journal";
pub const DEFAULT_QUOTA: u64 = 4 * 1024 * 1024 * 1024;
pub const DEFAULT_CHUNK_SIZE: u64 = 64 * 1024;

const REC_PUT: u8 = 1;
const REC_CHUNK: u8 = 3;
const REC_COMPLETE: u8 = 4;
const REC_REMOVE: u8 = 5;
const REC_TRUNCATE: u8 = 6;
const REC_RELEASE: u8 = 7;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("storage full: need {needed} bytes, {free} free")]
    StorageFull { needed: u64, free: u64 },
    #[error("bundle {0} not found")]
    NotFound(BundleId),
    #[error("bundle {0} failed payload digest verification")]
    DigestMismatch(BundleId),
    #[error("invalid chunk for {id}: offset {offset}, len {len}")]
    InvalidChunk { id: BundleId, offset: u64, len: u64 },
    #[error("invalid bundle: {0}")]
    InvalidBundle(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Clone, Debug)]
pub struct StoreConfig {
    pub quota: u64,
    pub chunk_size: u64,
    /// fsync payload and journal writes before returning.
    pub sync: bool,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig { quota: DEFAULT_QUOTA, chunk_size: DEFAULT_CHUNK_SIZE, sync: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PutOutcome {
    Inserted,
    Duplicate,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EntryState {
    Complete,
    Partial(RangeSet),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoreEntry {
    pub meta: BundleMeta,
    pub state: EntryState,
    pub received_at: Millis,
    pub received_from: Option<NodeId>,
    /// offset -> (len, crc32) for each persisted chunk of a partial bundle.
    chunks: BTreeMap<u64, (u32, u32)>,
}

impl StoreEntry {
    pub fn is_complete(&self) -> bool {
        matches!(self.state, EntryState::Complete)
    }

    /// Byte ranges held locally.
    pub fn ranges(&self) -> RangeSet {
        match &self.state {
            EntryState::Complete => RangeSet::full(self.meta.payload_len),
            EntryState::Partial(r) => r.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ChunkOutcome {
    /// Chunk persisted; ranges still incomplete.
    Stored,
    /// Chunk persisted and the ranges now cover the whole payload.
    Covered,
    /// Bundle was already complete; nothing written.
    AlreadyComplete,
}

pub struct BundleStore {
    dir: PathBuf,
    config: StoreConfig,
    index: BTreeMap<BundleId, StoreEntry>,
    journal: File,
    used: u64,
    /// Released bundle ids and when they would have expired.
    released: BTreeMap<BundleId, Millis>,
}

impl std::fmt::Debug for BundleStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BundleStore")
            .field("dir", &self.dir)
            .field("bundles", &self.index.len())
            .field("used", &self.used)
            .finish()
    }
}

impl BundleStore {
    pub fn open(dir: impl AsRef<Path>, config: StoreConfig) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let journal_path = dir.join(JOURNAL_FILE);

        let mut index = BTreeMap::new();
        let mut released = BTreeMap::new();
        if journal_path.exists() {
            let bytes = fs::read(&journal_path)?;
            replay(&bytes, &mut index, &mut released)?;
        }

        // Torn trailing chunks: drop any chunk whose bytes do not match the recorded CRC.
        for (id, entry) in index.iter_mut() {
            if let EntryState::Partial(_) = entry.state {
                let path = payload_path(&dir, id);
                let mut file = File::open(&path).ok();
                let mut ranges = RangeSet::new();
                entry.chunks.retain(|&off, &mut (len, crc)| {
                    let ok = file
                        .as_mut()
                        .and_then(|f| read_at(f, off, len as usize).ok())
                        .is_some_and(|data| crc32fast::hash(&data) == crc);
                    if ok {
                        ranges.insert(off, off + len as u64);
                    }
                    ok
                });
                entry.state = EntryState::Partial(ranges);
            }
        }

        // Remove payload files that no index entry references.
        let live: HashSet<String> =
            index.keys().map(|id: &BundleId| format!("{}.payload", id.to_hex())).collect();
        for de in fs::read_dir(&dir)? {
            let de = de?;
            let name = de.file_name().to_string_lossy().into_owned();
            if name.ends_with(".payload") && !live.contains(&name) {
                fs::remove_file(de.path())?;
            }
        }

        let used = index.values().map(|e: &StoreEntry| e.meta.payload_len).sum();

        // Compact: rewrite the journal with one record set per live entry.
        let tmp = dir.join("index.journal.tmp");
        {
            let mut out = Vec::new();
            out.extend_from_slice(JOURNAL_MAGIC);
            out.push(JOURNAL_VERSION);
            for entry in index.values() {
                encode_entry(entry, &mut out);
            }
            for (id, expires_at) in &released {
                out.extend_from_slice(&release_record(id, *expires_at));
            }
            let mut f = File::create(&tmp)?;
            f.write_all(&out)?;
            if config.sync {
                f.sync_all()?;
            }
        }
        fs::rename(&tmp, &journal_path)?;
        if config.sync {
            sync_dir(&dir)?;
        }
        let journal = OpenOptions::new().append(true).open(&journal_path)?;

        Ok(BundleStore { dir, config, index, journal, used, released })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn used_bytes(&self) -> u64 {
        self.used
    }

    pub fn free_bytes(&self) -> u64 {
        self.config.quota.saturating_sub(self.used)
    }

    pub fn get(&self, id: &BundleId) -> Option<&StoreEntry> {
        self.index.get(id)
    }

    pub fn contains(&self, id: &BundleId) -> bool {
        self.index.contains_key(id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &StoreEntry> {
        self.index.values()
    }

    /// Stores a complete bundle. Durable on return when `sync` is set.
    pub fn put(
        &mut self,
        bundle: &Bundle,
        received_at: Millis,
        received_from: Option<&NodeId>,
    ) -> Result<PutOutcome> {
        if self.index.contains_key(&bundle.id()) || self.released.contains_key(&bundle.id()) {
            return Ok(PutOutcome::Duplicate);
        }
        if !bundle.verify() {
            return Err(StoreError::InvalidBundle(format!("bundle {} fails verification", bundle.id())));
        }
        self.reserve(bundle.meta.payload_len)?;
        let path = payload_path(&self.dir, &bundle.id());
        {
            let mut f = File::create(&path)?;
            f.write_all(&bundle.payload)?;
            if self.config.sync {
                f.sync_all()?;
                sync_dir(&self.dir)?;
            }
        }
        let entry = StoreEntry {
            meta: bundle.meta.clone(),
            state: EntryState::Complete,
            received_at,
            received_from: received_from.cloned(),
            chunks: BTreeMap::new(),
        };
        let mut rec = Vec::new();
        encode_put(&entry, &mut rec);
        self.append(&[rec])?;
        self.used += entry.meta.payload_len;
        self.index.insert(entry.meta.id, entry);
        Ok(PutOutcome::Inserted)
    }

    /// Registers an incoming bundle that will arrive in chunks.
    pub fn begin_partial(
        &mut self,
        meta: &BundleMeta,
        received_at: Millis,
        received_from: Option<&NodeId>,
    ) -> Result<PutOutcome> {
        if self.index.contains_key(&meta.id) || self.released.contains_key(&meta.id) {
            return Ok(PutOutcome::Duplicate);
        }
        if !meta.id_matches() || meta.ttl == 0 {
            return Err(StoreError::InvalidBundle(format!("metadata for {} is inconsistent", meta.id)));
        }
        self.reserve(meta.payload_len)?;
        {
            let f = File::create(payload_path(&self.dir, &meta.id))?;
            f.set_len(meta.payload_len)?;
            if self.config.sync {
                f.sync_all()?;
                sync_dir(&self.dir)?;
            }
        }
        let entry = StoreEntry {
            meta: meta.clone(),
            state: EntryState::Partial(RangeSet::new()),
            received_at,
            received_from: received_from.cloned(),
            chunks: BTreeMap::new(),
        };
        let mut rec = Vec::new();
        encode_put(&entry, &mut rec);
        self.append(&[rec])?;
        self.used += meta.payload_len;
        self.index.insert(meta.id, entry);
        Ok(PutOutcome::Inserted)
    }

    /// Persists one chunk of a partial bundle.
    pub fn write_chunk(&mut self, id: &BundleId, offset: u64, data: &[u8]) -> Result<ChunkOutcome> {
        let chunk_size = self.config.chunk_size;
        let entry = self.index.get(id).ok_or(StoreError::NotFound(*id))?;
        let total = entry.meta.payload_len;
        let len = data.len() as u64;
        let ranges = match &entry.state {
            EntryState::Complete => return Ok(ChunkOutcome::AlreadyComplete),
            EntryState::Partial(r) => r,
        };
        let aligned = offset.is_multiple_of(chunk_size) && len <= chunk_size;
        if !aligned || offset + len > total || (len == 0 && total != 0) {
            return Err(StoreError::InvalidChunk { id: *id, offset, len });
        }
        if ranges.contains_range(offset, offset + len) && len > 0 {
            return Ok(if ranges.covers(total) { ChunkOutcome::Covered } else { ChunkOutcome::Stored });
        }
        {
            let mut f = OpenOptions::new().write(true).open(payload_path(&self.dir, id))?;
            f.seek(SeekFrom::Start(offset))?;
            f.write_all(data)?;
            if self.config.sync {
                f.sync_data()?;
            }
        }
        let crc = crc32fast::hash(data);
        let mut rec = Vec::new();
        rec.put_id(id);
        rec.put_u64(offset);
        rec.put_u32(len as u32);
        rec.put_u32(crc);
        self.append(&[record(REC_CHUNK, &rec)])?;

        let entry = self.index.get_mut(id).unwrap();
        entry.chunks.insert(offset, (len as u32, crc));
        if let EntryState::Partial(r) = &mut entry.state {
            r.insert(offset, offset + len);
            if r.covers(total) {
                return Ok(ChunkOutcome::Covered);
            }
        }
        Ok(ChunkOutcome::Stored)
    }

    /// Promotes a fully covered partial bundle to complete after checking its
    /// payload digest. On mismatch the ranges are cut back to the longest
    /// prefix whose chunks still verify (or to zero when every chunk verifies,
    /// meaning the bytes were wrong on arrival) and `DigestMismatch` is returned.
    pub fn complete(&mut self, id: &BundleId) -> Result<bool> {
        let entry = self.index.get(id).ok_or(StoreError::NotFound(*id))?;
        let ranges = match &entry.state {
            EntryState::Complete => return Ok(false),
            EntryState::Partial(r) => r,
        };
        if !ranges.covers(entry.meta.payload_len) {
            return Err(StoreError::InvalidChunk { id: *id, offset: 0, len: ranges.prefix_end() });
        }
        let payload = self.read_payload(id)?;
        if sha256(&payload) != entry.meta.payload_digest {
            let mut keep = 0u64;
            for (&off, &(len, crc)) in &entry.chunks {
                if off != keep {
                    break;
                }
                let end = off + len as u64;
                if crc32fast::hash(&payload[off as usize..end as usize]) != crc {
                    break;
                }
                keep = end;
            }
            if keep >= entry.meta.payload_len {
                keep = 0;
            }
            self.truncate_partial(id, keep)?;
            return Err(StoreError::DigestMismatch(*id));
        }
        let mut rec = Vec::new();
        rec.put_id(id);
        self.append(&[record(REC_COMPLETE, &rec)])?;
        let entry = self.index.get_mut(id).unwrap();
        entry.state = EntryState::Complete;
        entry.chunks.clear();
        Ok(true)
    }

    fn truncate_partial(&mut self, id: &BundleId, keep: u64) -> Result<()> {
        let mut rec = Vec::new();
        rec.put_id(id);
        rec.put_u64(keep);
        self.append(&[record(REC_TRUNCATE, &rec)])?;
        if let Some(entry) = self.index.get_mut(id) {
            apply_truncate(entry, keep);
        }
        Ok(())
    }

    pub fn remove(&mut self, id: &BundleId) -> Result<bool> {
        let Some(entry) = self.index.get(id) else {
            return Ok(false);
        };
        let len = entry.meta.payload_len;
        let mut rec = Vec::new();
        rec.put_id(id);
        self.append(&[record(REC_REMOVE, &rec)])?;
        self.index.remove(id);
        self.used -= len;
        match fs::remove_file(payload_path(&self.dir, id)) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        Ok(true)
    }

    /// Removes a complete bundle and leaves a tombstone until its expiry.
    pub fn release(&mut self, id: &BundleId) -> Result<bool> {
        let Some(entry) = self.index.get(id) else {
            return Ok(false);
        };
        let expires_at = entry.meta.expires_at();
        let len = entry.meta.payload_len;
        self.append(&[release_record(id, expires_at)])?;
        self.index.remove(id);
        self.used -= len;
        self.released.insert(*id, expires_at);
        match fs::remove_file(payload_path(&self.dir, id)) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        Ok(true)
    }

    pub fn is_released(&self, id: &BundleId) -> bool {
        self.released.contains_key(id)
    }

    pub fn released(&self) -> impl Iterator<Item = &BundleId> {
        self.released.keys()
    }

    /// Removes every bundle with `created_at + ttl <= now` and returns their ids.
    /// Expired tombstones are dropped as well.
    pub fn expire_bundles(&mut self, now: Millis) -> Result<Vec<BundleId>> {
        self.released.retain(|_, &mut exp| exp > now);
        let expired: Vec<BundleId> =
            self.index.values().filter(|e| e.meta.is_expired(now)).map(|e| e.meta.id).collect();
        for id in &expired {
            self.remove(id)?;
        }
        Ok(expired)
    }

    /// Complete, unexpired bundles in forwarding order:
    /// priority descending, then oldest first, then by id.
    pub fn offer_queue(&self, now: Millis) -> Vec<BundleId> {
        let mut metas: Vec<&BundleMeta> = self
            .index
            .values()
            .filter(|e| e.is_complete() && !e.meta.is_expired(now))
            .map(|e| &e.meta)
            .collect();
        metas.sort_by(|a, b| offer_order(a, b));
        metas.into_iter().map(|m| m.id).collect()
    }

    pub fn read_payload(&self, id: &BundleId) -> Result<Vec<u8>> {
        let entry = self.index.get(id).ok_or(StoreError::NotFound(*id))?;
        let mut f = File::open(payload_path(&self.dir, id))?;
        let mut buf = Vec::with_capacity(entry.meta.payload_len as usize);
        f.read_to_end(&mut buf)?;
        if buf.len() as u64 != entry.meta.payload_len {
            return Err(StoreError::Corrupt(format!("payload file of {id} has wrong length")));
        }
        Ok(buf)
    }

    pub fn read_range(&self, id: &BundleId, offset: u64, len: usize) -> Result<Vec<u8>> {
        let entry = self.index.get(id).ok_or(StoreError::NotFound(*id))?;
        if offset + len as u64 > entry.meta.payload_len {
            return Err(StoreError::InvalidChunk { id: *id, offset, len: len as u64 });
        }
        let mut f = File::open(payload_path(&self.dir, id))?;
        Ok(read_at(&mut f, offset, len)?)
    }

    /// Loads a complete bundle with its payload.
    pub fn load(&self, id: &BundleId) -> Result<Bundle> {
        let entry = self.index.get(id).ok_or(StoreError::NotFound(*id))?;
        if !entry.is_complete() {
            return Err(StoreError::NotFound(*id));
        }
        Ok(Bundle { meta: entry.meta.clone(), payload: self.read_payload(id)? })
    }

    fn reserve(&self, len: u64) -> Result<()> {
        if self.used + len > self.config.quota {
            return Err(StoreError::StorageFull { needed: len, free: self.free_bytes() });
        }
        Ok(())
    }

    fn append(&mut self, records: &[Vec<u8>]) -> Result<()> {
        let mut buf = Vec::new();
        for r in records {
            buf.extend_from_slice(r);
        }
        self.journal.write_all(&buf)?;
        if self.config.sync {
            self.journal.sync_data()?;
        }
        Ok(())
    }
}

/// The total order used by [`BundleStore::offer_queue`].
pub fn offer_order(a: &BundleMeta, b: &BundleMeta) -> std::cmp::Ordering {
    b.priority
        .cmp(&a.priority)
        .then(a.created_at.cmp(&b.created_at))
        .then(a.id.cmp(&b.id))
}

fn payload_path(dir: &Path, id: &BundleId) -> PathBuf {
    dir.join(format!("{}.payload", id.to_hex()))
}

fn read_at(f: &mut File, offset: u64, len: usize) -> io::Result<Vec<u8>> {
    f.seek(SeekFrom::Start(offset))?;
    let mut buf = vec![0; len];
    f.read_exact(&mut buf)?;
    Ok(buf)
}

fn sync_dir(dir: &Path) -> io::Result<()> {
    #[cfg(unix)]
    {
        File::open(dir)?.sync_all()?;
    }
    #[cfg(not(unix))]
    let _ = dir;
    Ok(())
}

fn record(ty: u8, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 9);
    out.put_u32(body.len() as u32 + 1);
    out.push(ty);
    out.extend_from_slice(body);
    let crc = crc32fast::hash(&out[4..]);
    out.put_u32(crc);
    out
}

pub(crate) fn encode_meta(meta: &BundleMeta, out: &mut Vec<u8>) {
    out.put_id(&meta.id);
    out.put_str(meta.source.as_str());
    out.put_str(meta.destination.as_str());
    out.put_u64(meta.created_at);
    out.put_u64(meta.ttl);
    out.put_u8(meta.priority as u8);
    out.put_u8(meta.kind as u8);
    out.put_u64(meta.payload_len);
    out.extend_from_slice(&meta.payload_digest);
}

pub(crate) fn decode_meta(r: &mut Reader<'_>) -> Result<BundleMeta, CodecError> {
    Ok(BundleMeta {
        id: r.id()?,
        source: r.node_id()?,
        destination: r.node_id()?,
        created_at: r.u64()?,
        ttl: r.u64()?,
        priority: Priority::from_byte(r.u8()?).ok_or(CodecError::Invalid("priority"))?,
        kind: BundleKind::from_byte(r.u8()?).ok_or(CodecError::Invalid("kind"))?,
        payload_len: r.u64()?,
        payload_digest: r.array32()?,
    })
}

fn encode_put(entry: &StoreEntry, out: &mut Vec<u8>) {
    let mut body = Vec::new();
    encode_meta(&entry.meta, &mut body);
    body.put_u64(entry.received_at);
    body.put_str(entry.received_from.as_ref().map(|n| n.as_str()).unwrap_or(""));
    body.put_u8(entry.is_complete() as u8);
    out.extend_from_slice(&record(REC_PUT, &body));
}

fn encode_entry(entry: &StoreEntry, out: &mut Vec<u8>) {
    encode_put(entry, out);
    for (&off, &(len, crc)) in &entry.chunks {
        let mut rec = Vec::new();
        rec.put_id(&entry.meta.id);
        rec.put_u64(off);
        rec.put_u32(len);
        rec.put_u32(crc);
        out.extend_from_slice(&record(REC_CHUNK, &rec));
    }
}

fn apply_truncate(entry: &mut StoreEntry, keep: u64) {
    entry.chunks.retain(|&off, &mut (len, _)| off + len as u64 <= keep);
    let ranges = RangeSet::from_ranges(entry.chunks.iter().map(|(&o, &(l, _))| (o, o + l as u64)));
    entry.state = EntryState::Partial(ranges);
}

fn release_record(id: &BundleId, expires_at: Millis) -> Vec<u8> {
    let mut rec = Vec::new();
    rec.put_id(id);
    rec.put_u64(expires_at);
    record(REC_RELEASE, &rec)
}

fn replay(
    bytes: &[u8],
    index: &mut BTreeMap<BundleId, StoreEntry>,
    released: &mut BTreeMap<BundleId, Millis>,
) -> Result<()> {
    if bytes.len() < 5 {
        // A crash during initial creation can leave a short header.
        return Ok(());
    }
    if &bytes[..4] != JOURNAL_MAGIC {
        return Err(StoreError::Corrupt("bad journal magic".into()));
    }
    if bytes[4] != JOURNAL_VERSION {
        return Err(StoreError::Corrupt(format!("unsupported journal version {}", bytes[4])));
    }
    let mut pos = 5;
    while pos + 4 <= bytes.len() {
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let end = pos + 4 + len + 4;
        if len == 0 || end > bytes.len() {
            tracing::warn!(offset = pos, "journal ends with a torn record; discarding tail");
            break;
        }
        let body = &bytes[pos + 4..pos + 4 + len];
        let crc = u32::from_le_bytes(bytes[end - 4..end].try_into().unwrap());
        if crc32fast::hash(body) != crc {
            tracing::warn!(offset = pos, "journal record failed crc; discarding tail");
            break;
        }
        if apply_record(body[0], &body[1..], index, released).is_err() {
            tracing::warn!(offset = pos, "undecodable journal record; discarding tail");
            break;
        }
        pos = end;
    }
    Ok(())
}

fn apply_record(
    ty: u8,
    body: &[u8],
    index: &mut BTreeMap<BundleId, StoreEntry>,
    released: &mut BTreeMap<BundleId, Millis>,
) -> Result<(), CodecError> {
    let mut r = Reader::new(body);
    match ty {
        REC_PUT => {
            let meta = decode_meta(&mut r)?;
            let received_at = r.u64()?;
            let from = r.string()?;
            let received_from = if from.is_empty() {
                None
            } else {
                Some(NodeId::new(from).map_err(|_| CodecError::Invalid("node id"))?)
            };
            let state = match r.u8()? {
                1 => EntryState::Complete,
                0 => EntryState::Partial(RangeSet::new()),
                _ => return Err(CodecError::Invalid("state")),
            };
            index.insert(
                meta.id,
                StoreEntry { meta, state, received_at, received_from, chunks: BTreeMap::new() },
            );
        }
        REC_CHUNK => {
            let id = r.id()?;
            let off = r.u64()?;
            let len = r.u32()?;
            let crc = r.u32()?;
            if let Some(e) = index.get_mut(&id) {
                if let EntryState::Partial(ranges) = &mut e.state {
                    ranges.insert(off, off + len as u64);
                    e.chunks.insert(off, (len, crc));
                }
            }
        }
        REC_COMPLETE => {
            let id = r.id()?;
            if let Some(e) = index.get_mut(&id) {
                e.state = EntryState::Complete;
                e.chunks.clear();
            }
        }
        REC_REMOVE => {
            index.remove(&r.id()?);
        }
        REC_RELEASE => {
            let id = r.id()?;
            let expires_at = r.u64()?;
            index.remove(&id);
            released.insert(id, expires_at);
        }
        REC_TRUNCATE => {
            let id = r.id()?;
            let keep = r.u64()?;
            if let Some(e) = index.get_mut(&id) {
                apply_truncate(e, keep);
            }
        }
        _ => return Err(CodecError::Invalid("record type")),
    }
    Ok(())
}
