//! Single-file record store with all-or-nothing commits.
//!
//! Layout:
//!
//! ```text
//! "ESTORE1\n"
//! record*          [u32 klen][key][12 nonce][u32 clen][ciphertext][8 key_id]
//! offset*          u64 per record, start of that record
//! count            u32
//! checksum         first 8 bytes of SHA-256 over everything before it
//! ```
//!
//! All integers are little-endian. Every commit writes a complete new file
//! next to the old one, syncs it and renames it into place, so a crash
//! leaves either the previous or the new file.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use sha2::{Digest, Sha256};

use super::{EncryptedRecord, RecordBackend, StoreError, MAX_RECORD_KEY_LEN};

pub const MAGIC: &[u8; 8] = b"ESTORE1\n";

/// Where a commit is made to fail, for crash tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommitFault {
    /// Temp file fully written and synced, rename never happens.
    BeforeRename,
    /// Temp file cut off half way, rename never happens.
    TornTempWrite,
}

type Snapshot = Arc<BTreeMap<String, EncryptedRecord>>;

#[derive(Debug)]
pub struct FileBackend {
    path: PathBuf,
    snapshot: RwLock<Snapshot>,
    committer: Mutex<()>,
    fsync: bool,
    fault: Mutex<Option<CommitFault>>,
    checksum_ok: bool,
}

fn checksum(bytes: &[u8]) -> [u8; 8] {
    Sha256::digest(bytes)[..8].try_into().unwrap()
}

pub(crate) fn serialize(records: &BTreeMap<String, EncryptedRecord>) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAGIC.len() + records.len() * 96 + 16);
    out.extend_from_slice(MAGIC);
    let mut offsets = Vec::with_capacity(records.len());
    for rec in records.values() {
        offsets.push(out.len() as u64);
        rec.encode_into(&mut out);
    }
    for off in &offsets {
        out.extend_from_slice(&off.to_le_bytes());
    }
    out.extend_from_slice(&(offsets.len() as u32).to_le_bytes());
    let sum = checksum(&out);
    out.extend_from_slice(&sum);
    out
}

/// Parses a store image. Returns the records and whether the trailing
/// checksum matched.
pub(crate) fn parse(bytes: &[u8]) -> Result<(BTreeMap<String, EncryptedRecord>, bool), StoreError> {
    if bytes.len() < MAGIC.len() + 4 + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(StoreError::Corrupt("missing ESTORE1 header".into()));
    }
    let body_end = bytes.len() - 8;
    let checksum_ok = checksum(&bytes[..body_end]) == bytes[body_end..];
    let count = u32::from_le_bytes(bytes[body_end - 4..body_end].try_into().unwrap()) as usize;
    let index_len = count
        .checked_mul(8)
        .filter(|&n| n + 4 + MAGIC.len() <= body_end)
        .ok_or_else(|| StoreError::Corrupt(format!("record count {count} does not fit the file")))?;
    let records_end = body_end - 4 - index_len;
    let index = &bytes[records_end..body_end - 4];

    let mut records = BTreeMap::new();
    let mut pos = MAGIC.len();
    for i in 0..count {
        let expected = u64::from_le_bytes(index[i * 8..i * 8 + 8].try_into().unwrap());
        if expected != pos as u64 {
            return Err(StoreError::Corrupt(format!(
                "index entry {i} points at {expected}, record is at {pos}"
            )));
        }
        let (rec, used) = EncryptedRecord::decode_from(&bytes[pos..records_end])?;
        pos += used;
        if records.insert(rec.record_key.clone(), rec).is_some() {
            return Err(StoreError::Corrupt("duplicate record key".into()));
        }
    }
    if pos != records_end {
        return Err(StoreError::Corrupt("unindexed bytes before footer".into()));
    }
    Ok((records, checksum_ok))
}

impl FileBackend {
    /// Opens or creates the store at `path`.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        Self::open_with(path, true)
    }

    pub fn open_with(path: &Path, fsync: bool) -> Result<Self, StoreError> {
        let (records, checksum_ok) = match fs::read(path) {
            Ok(bytes) => parse(&bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let empty = BTreeMap::new();
                write_atomically(path, &serialize(&empty), fsync, None)?;
                (empty, true)
            }
            Err(e) => return Err(e.into()),
        };
        if !checksum_ok {
            tracing::warn!(path = %path.display(), "store checksum mismatch; records will be checked individually on read");
        }
        Ok(FileBackend {
            path: path.to_path_buf(),
            snapshot: RwLock::new(Arc::new(records)),
            committer: Mutex::new(()),
            fsync,
            fault: Mutex::new(None),
            checksum_ok,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Whether the file checksum matched when the store was opened.
    pub fn checksum_ok(&self) -> bool {
        self.checksum_ok
    }

    pub fn len(&self) -> usize {
        self.snapshot.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<EncryptedRecord> {
        self.snapshot.read().values().cloned().collect()
    }

    #[doc(hidden)]
    pub fn inject_fault(&self, fault: Option<CommitFault>) {
        *self.fault.lock() = fault;
    }

    fn commit<F>(&self, mutate: F) -> Result<(), StoreError>
    where
        F: FnOnce(&mut BTreeMap<String, EncryptedRecord>) -> bool,
    {
        let _guard = self.committer.lock();
        let mut next = (**self.snapshot.read()).clone();
        if !mutate(&mut next) {
            return Ok(());
        }
        let fault = self.fault.lock().take();
        write_atomically(&self.path, &serialize(&next), self.fsync, fault)?;
        *self.snapshot.write() = Arc::new(next);
        Ok(())
    }
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

fn write_atomically(path: &Path, bytes: &[u8], fsync: bool, fault: Option<CommitFault>) -> Result<(), StoreError> {
    let tmp = temp_path(path);
    {
        let mut f = File::create(&tmp)?;
        if fault == Some(CommitFault::TornTempWrite) {
            f.write_all(&bytes[..bytes.len() / 2])?;
            return Err(StoreError::Backend("injected fault: torn temp write".into()));
        }
        f.write_all(bytes)?;
        if fsync {
            f.sync_all()?;
        }
    }
    if fault == Some(CommitFault::BeforeRename) {
        return Err(StoreError::Backend("injected fault: crash before rename".into()));
    }
    fs::rename(&tmp, path)?;
    if fsync {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            File::open(dir)?.sync_all()?;
        }
    }
    Ok(())
}

impl RecordBackend for FileBackend {
    fn put_record(&self, record: EncryptedRecord) -> Result<(), StoreError> {
        if record.record_key.len() > MAX_RECORD_KEY_LEN {
            return Err(StoreError::KeyTooLong);
        }
        self.commit(|m| {
            m.insert(record.record_key.clone(), record);
            true
        })
    }

    fn get_record(&self, record_key: &str) -> Result<Option<EncryptedRecord>, StoreError> {
        Ok(self.snapshot.read().get(record_key).cloned())
    }

    fn delete_record(&self, record_key: &str) -> Result<(), StoreError> {
        self.commit(|m| m.remove(record_key).is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct Hit {
    pub probe: usize,
    pub offset: usize,
}

/// Every `(probe index, offset)` where a probe occurs verbatim in the file.
pub fn scan_plaintext<P: AsRef<[u8]>>(store_path: &Path, probes: &[P]) -> Result<Vec<Hit>, StoreError> {
    let bytes = fs::read(store_path)?;
    let mut by_len: BTreeMap<usize, HashMap<&[u8], Vec<usize>>> = BTreeMap::new();
    for (i, p) in probes.iter().enumerate() {
        let p = p.as_ref();
        if p.is_empty() {
            continue;
        }
        by_len.entry(p.len()).or_default().entry(p).or_default().push(i);
    }
    let mut hits = Vec::new();
    for (len, table) in by_len {
        if len > bytes.len() {
            continue;
        }
        for (offset, window) in bytes.windows(len).enumerate() {
            if let Some(idx) = table.get(window) {
                hits.extend(idx.iter().map(|&probe| Hit { probe, offset }));
            }
        }
    }
    hits.sort_by_key(|h| (h.probe, h.offset));
    Ok(hits)
}
