//! Encrypted record store.
//!
//! Records are sealed with ChaCha20-Poly1305 under a [`DataKey`] that lives
//! only on the service side; the store process (and its file) only ever
//! sees [`EncryptedRecord`]s. The record key and key id are bound as
//! associated data, so moving a ciphertext under another name or relabelling
//! its key id breaks authentication.

mod file;
mod remote;

use std::fmt;
use std::path::Path;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Nonce as AeadNonce};
use rand::RngCore;
use thiserror::Error;

pub use file::{scan_plaintext, CommitFault, FileBackend, Hit, MAGIC};
pub use remote::{serve_store, RemoteBackend};

pub const MAX_RECORD_KEY_LEN: usize = 256;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
const AAD_DOMAIN: &[u8] = b"soaguard-record-v1";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("record not found")]
    NotFound,
    /// Wrong key and tampered ciphertext are reported identically.
    #[error("record failed to decrypt")]
    DecryptionFailure,
    #[error("record key longer than {MAX_RECORD_KEY_LEN} bytes")]
    KeyTooLong,
    #[error("store I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("store file corrupt: {0}")]
    Corrupt(String),
    #[error("store backend: {0}")]
    Backend(String),
}

/// 8-byte key version label stored next to each record.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct KeyId(pub [u8; 8]);

impl KeyId {
    /// Labels longer than 8 bytes are rejected; shorter ones are zero-padded.
    pub fn from_label(label: &str) -> Option<Self> {
        let bytes = label.as_bytes();
        if bytes.len() > 8 {
            return None;
        }
        let mut id = [0u8; 8];
        id[..bytes.len()].copy_from_slice(bytes);
        Some(KeyId(id))
    }
}

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyId({self})")
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let end = self.0.iter().position(|&b| b == 0).unwrap_or(8);
        match std::str::from_utf8(&self.0[..end]) {
            Ok(s) => f.write_str(s),
            Err(_) => f.write_str(&hex::encode(self.0)),
        }
    }
}

/// Record encryption key. Held by the service side only.
#[derive(Clone)]
pub struct DataKey {
    key_id: KeyId,
    key: [u8; 32],
}

impl DataKey {
    pub fn new(key_id: KeyId, key: [u8; 32]) -> Self {
        DataKey { key_id, key }
    }

    pub fn generate(key_id: KeyId) -> Self {
        let mut key = [0u8; 32];
        rand::thread_rng().fill_bytes(&mut key);
        DataKey { key_id, key }
    }

    /// Key file: 32 raw bytes.
    pub fn load(path: &Path, key_id: KeyId) -> Result<Self, StoreError> {
        let bytes = std::fs::read(path)?;
        let key: [u8; 32] = bytes.as_slice().try_into().map_err(|_| {
            StoreError::Backend(format!(
                "data key file {} must hold 32 bytes, found {}",
                path.display(),
                bytes.len()
            ))
        })?;
        Ok(DataKey { key_id, key })
    }

    pub fn key_id(&self) -> KeyId {
        self.key_id
    }

    pub fn expose(&self) -> &[u8; 32] {
        &self.key
    }
}

impl fmt::Debug for DataKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DataKey")
            .field("key_id", &self.key_id)
            .finish_non_exhaustive()
    }
}

/// What the store persists for one record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedRecord {
    pub record_key: String,
    pub nonce: [u8; NONCE_LEN],
    /// Ciphertext followed by the 16-byte tag.
    pub ciphertext: Vec<u8>,
    pub key_id: KeyId,
}

impl EncryptedRecord {
    /// `[u32 klen][key][12 nonce][u32 clen][ciphertext][8 key_id]`, little-endian.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.record_key.len() as u32).to_le_bytes());
        out.extend_from_slice(self.record_key.as_bytes());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.key_id.0);
    }

    /// Parses one record from the front of `buf`, returning it and the
    /// number of bytes consumed.
    pub fn decode_from(buf: &[u8]) -> Result<(Self, usize), StoreError> {
        let corrupt = |what: &str| StoreError::Corrupt(format!("truncated record ({what})"));
        let mut pos = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8], StoreError> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= buf.len())
                .ok_or_else(|| corrupt(what))?;
            let s = &buf[pos..end];
            pos = end;
            Ok(s)
        };
        let klen = u32::from_le_bytes(take(4, "key length")?.try_into().unwrap()) as usize;
        if klen > MAX_RECORD_KEY_LEN {
            return Err(StoreError::Corrupt(format!("record key length {klen} too large")));
        }
        let key = std::str::from_utf8(take(klen, "key")?)
            .map_err(|_| StoreError::Corrupt("record key not UTF-8".into()))?
            .to_string();
        let nonce: [u8; NONCE_LEN] = take(NONCE_LEN, "nonce")?.try_into().unwrap();
        let clen = u32::from_le_bytes(take(4, "ciphertext length")?.try_into().unwrap()) as usize;
        let ciphertext = take(clen, "ciphertext")?.to_vec();
        let key_id = KeyId(take(8, "key id")?.try_into().unwrap());
        Ok((
            EncryptedRecord {
                record_key: key,
                nonce,
                ciphertext,
                key_id,
            },
            pos,
        ))
    }
}

fn aad(record_key: &str, key_id: KeyId) -> Vec<u8> {
    let mut out = Vec::with_capacity(AAD_DOMAIN.len() + 4 + record_key.len() + 8);
    out.extend_from_slice(AAD_DOMAIN);
    out.extend_from_slice(&(record_key.len() as u32).to_be_bytes());
    out.extend_from_slice(record_key.as_bytes());
    out.extend_from_slice(&key_id.0);
    out
}

pub fn seal(record_key: &str, plaintext: &[u8], key: &DataKey) -> Result<EncryptedRecord, StoreError> {
    if record_key.len() > MAX_RECORD_KEY_LEN {
        return Err(StoreError::KeyTooLong);
    }
    let mut nonce = [0u8; NONCE_LEN];
    rand::thread_rng().fill_bytes(&mut nonce);
    let cipher = ChaCha20Poly1305::new((&key.key).into());
    let ciphertext = cipher
        .encrypt(
            AeadNonce::from_slice(&nonce),
            Payload {
                msg: plaintext,
                aad: &aad(record_key, key.key_id),
            },
        )
        .map_err(|_| StoreError::Backend("encryption failed".into()))?;
    Ok(EncryptedRecord {
        record_key: record_key.to_string(),
        nonce,
        ciphertext,
        key_id: key.key_id,
    })
}

pub fn open(record: &EncryptedRecord, key: &DataKey) -> Result<Vec<u8>, StoreError> {
    if record.key_id != key.key_id {
        return Err(StoreError::DecryptionFailure);
    }
    let cipher = ChaCha20Poly1305::new((&key.key).into());
    cipher
        .decrypt(
            AeadNonce::from_slice(&record.nonce),
            Payload {
                msg: &record.ciphertext,
                aad: &aad(&record.record_key, record.key_id),
            },
        )
        .map_err(|_| StoreError::DecryptionFailure)
}

/// Persistence of sealed records. Implementations never see plaintext.
pub trait RecordBackend: Send + Sync {
    fn put_record(&self, record: EncryptedRecord) -> Result<(), StoreError>;
    fn get_record(&self, record_key: &str) -> Result<Option<EncryptedRecord>, StoreError>;
    fn delete_record(&self, record_key: &str) -> Result<(), StoreError>;
}

/// Store front-end: seals on the way in, opens on the way out.
pub struct SecureStore {
    backend: Box<dyn RecordBackend>,
}

impl fmt::Debug for SecureStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecureStore").finish_non_exhaustive()
    }
}

impl SecureStore {
    pub fn new(backend: Box<dyn RecordBackend>) -> Self {
        SecureStore { backend }
    }

    pub fn open_file(path: &Path) -> Result<Self, StoreError> {
        Ok(Self::new(Box::new(FileBackend::open(path)?)))
    }

    pub fn put(&self, record_key: &str, plaintext: &[u8], key: &DataKey) -> Result<(), StoreError> {
        self.backend.put_record(seal(record_key, plaintext, key)?)
    }

    pub fn get(&self, record_key: &str, key: &DataKey) -> Result<Vec<u8>, StoreError> {
        let record = self.backend.get_record(record_key)?.ok_or(StoreError::NotFound)?;
        open(&record, key)
    }

    pub fn delete(&self, record_key: &str) -> Result<(), StoreError> {
        self.backend.delete_record(record_key)
    }
}
