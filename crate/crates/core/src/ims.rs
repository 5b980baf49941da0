//! Identity management: password check, certificate issue/verify,
//! revocation and replay suppression.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::path::Path;

use hmac::{Hmac, Mac};
use parking_lot::{Mutex, RwLock};
use rand::RngCore;
use sha2::Sha256;
use subtle::ConstantTimeEq;
use thiserror::Error;

use crate::envelope::{
    canonical_auth_string, decode_lower_hex, parse_canonical_u64, Nonce, ThreatClass, UnixSeconds, Verdict,
};

type HmacSha256 = Hmac<Sha256>;

pub const DEFAULT_TTL_S: u64 = 300;
const PBKDF2_ROUNDS: u32 = 4096;

#[derive(Debug, Error)]
pub enum ImsError {
    /// Deliberately carries no detail: unknown user and wrong password
    /// must render identically.
    #[error("authentication failed")]
    BadCredentials,
    #[error("key file {path}: {reason}")]
    KeyFile { path: String, reason: String },
    #[error("credential file line {line}: {reason}")]
    CredentialParse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 256-bit certificate authentication key. Never printed.
#[derive(Clone)]
pub struct ImsKey([u8; 32]);

impl ImsKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        ImsKey(bytes)
    }

    pub fn generate() -> Self {
        let mut k = [0u8; 32];
        rand::thread_rng().fill_bytes(&mut k);
        ImsKey(k)
    }

    /// Key file: exactly 32 raw bytes.
    pub fn load(path: &Path) -> Result<Self, ImsError> {
        let bytes = std::fs::read(path)?;
        let arr: [u8; 32] = bytes.as_slice().try_into().map_err(|_| ImsError::KeyFile {
            path: path.display().to_string(),
            reason: format!("expected 32 bytes, found {}", bytes.len()),
        })?;
        Ok(ImsKey(arr))
    }

    pub fn expose(&self) -> &[u8; 32] {
        &self.0
    }

    fn mac(&self) -> HmacSha256 {
        HmacSha256::new_from_slice(&self.0).expect("hmac accepts any key length")
    }
}

impl fmt::Debug for ImsKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ImsKey(..)")
    }
}

/// Certificate issued to an authenticated client.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AuthCertificate {
    pub subject: String,
    pub issued_at: UnixSeconds,
    pub expires_at: UnixSeconds,
    pub cert_id: [u8; 16],
    pub tag: [u8; 32],
}

impl AuthCertificate {
    /// Compact bearer form: `hex(subject).issued_at.expires_at.hex(cert_id).hex(tag)`.
    pub fn to_token(&self) -> String {
        format!(
            "{}.{}.{}.{}.{}",
            hex::encode(self.subject.as_bytes()),
            self.issued_at,
            self.expires_at,
            hex::encode(self.cert_id),
            hex::encode(self.tag)
        )
    }

    pub fn from_token(token: &str) -> Result<Self, String> {
        let parts: Vec<&str> = token.split('.').collect();
        let [subject, issued, expires, id, tag] = parts[..] else {
            return Err(format!("certificate token has {} parts, expected 5", parts.len()));
        };
        if subject.len() % 2 != 0 || !subject.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err("certificate subject is not lowercase hex".into());
        }
        let subject = String::from_utf8(hex::decode(subject).map_err(|e| e.to_string())?)
            .map_err(|_| "certificate subject is not UTF-8".to_string())?;
        let issued_at = parse_canonical_u64(issued)?;
        let expires_at = parse_canonical_u64(expires)?;
        if expires_at <= issued_at {
            return Err("certificate expires before it is issued".into());
        }
        Ok(AuthCertificate {
            subject,
            issued_at,
            expires_at,
            cert_id: decode_lower_hex::<16>(id)?,
            tag: decode_lower_hex::<32>(tag)?,
        })
    }

    pub fn cert_id_hex(&self) -> String {
        hex::encode(self.cert_id)
    }

    fn auth_bytes(&self) -> Vec<u8> {
        canonical_auth_string(&self.subject, self.issued_at, self.expires_at, &self.cert_id)
    }
}

#[derive(Debug, Clone)]
struct Credential {
    salt: [u8; 16],
    digest: [u8; 32],
}

fn password_digest(password: &str, salt: &[u8; 16]) -> [u8; 32] {
    let mut out = [0u8; 32];
    pbkdf2::pbkdf2_hmac::<Sha256>(password.as_bytes(), salt, PBKDF2_ROUNDS, &mut out);
    out
}

/// Salted password digests keyed by client id. File format, one user per
/// line: `client_id:hex(salt):hex(digest)`.
#[derive(Debug, Clone, Default)]
pub struct CredentialTable {
    entries: HashMap<String, Credential>,
}

impl CredentialTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_user(&mut self, client_id: &str, password: &str) {
        let mut salt = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut salt);
        let digest = password_digest(password, &salt);
        self.entries.insert(client_id.to_string(), Credential { salt, digest });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn parse(text: &str) -> Result<Self, ImsError> {
        let mut entries = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: &str| ImsError::CredentialParse {
                line: i + 1,
                reason: reason.to_string(),
            };
            let mut parts = line.rsplitn(3, ':');
            let (Some(digest), Some(salt), Some(id)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(err("expected client_id:salt:digest"));
            };
            if id.is_empty() {
                return Err(err("empty client id"));
            }
            let salt = decode_lower_hex::<16>(salt).map_err(|e| err(&format!("salt: {e}")))?;
            let digest = decode_lower_hex::<32>(digest).map_err(|e| err(&format!("digest: {e}")))?;
            if entries.insert(id.to_string(), Credential { salt, digest }).is_some() {
                return Err(err("duplicate client id"));
            }
        }
        Ok(CredentialTable { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ImsError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_file_string(&self) -> String {
        let mut ids: Vec<&String> = self.entries.keys().collect();
        ids.sort();
        ids.into_iter()
            .map(|id| {
                let c = &self.entries[id];
                format!("{id}:{}:{}\n", hex::encode(c.salt), hex::encode(c.digest))
            })
            .collect()
    }

    fn check(&self, client_id: &str, password: &str) -> bool {
        match self.entries.get(client_id) {
            Some(c) => bool::from(password_digest(password, &c.salt).ct_eq(&c.digest)),
            None => {
                // same work as a real check so absence is not observable by timing
                let _ = password_digest(password, &[0u8; 16]);
                false
            }
        }
    }
}

/// Seen `(cert_id, nonce)` pairs, kept for `horizon` seconds.
#[derive(Debug)]
pub struct ReplayCache {
    horizon: u64,
    seen: HashMap<([u8; 16], Nonce), UnixSeconds>,
    order: VecDeque<(UnixSeconds, [u8; 16], Nonce)>,
}

impl ReplayCache {
    pub fn new(horizon: u64) -> Self {
        ReplayCache {
            horizon,
            seen: HashMap::new(),
            order: VecDeque::new(),
        }
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }

    fn evict(&mut self, now: UnixSeconds) {
        while let Some(&(at, id, nonce)) = self.order.front() {
            if at.saturating_add(self.horizon) >= now {
                break;
            }
            self.order.pop_front();
            if self.seen.get(&(id, nonce)) == Some(&at) {
                self.seen.remove(&(id, nonce));
            }
        }
    }

    /// Atomic test-and-record.
    pub fn check_and_record(&mut self, cert_id: [u8; 16], nonce: Nonce, now: UnixSeconds) -> Verdict {
        self.evict(now);
        if let Some(&first) = self.seen.get(&(cert_id, nonce)) {
            return Verdict::deny(
                ThreatClass::Replay,
                format!(
                    "nonce {nonce} already used with certificate {} at {first}",
                    hex::encode(cert_id)
                ),
            );
        }
        self.seen.insert((cert_id, nonce), now);
        self.order.push_back((now, cert_id, nonce));
        Verdict::allow()
    }
}

/// The identity management service.
#[derive(Debug)]
pub struct Ims {
    key: ImsKey,
    credentials: CredentialTable,
    ttl: u64,
    replay: Mutex<ReplayCache>,
    revoked: RwLock<HashSet<[u8; 16]>>,
}

impl Ims {
    /// Replay horizon is twice the certificate lifetime.
    pub fn new(key: ImsKey, credentials: CredentialTable, ttl: u64) -> Self {
        assert!(ttl > 0, "certificate ttl must be positive");
        Ims {
            key,
            credentials,
            ttl,
            replay: Mutex::new(ReplayCache::new(2 * ttl)),
            revoked: RwLock::new(HashSet::new()),
        }
    }

    pub fn ttl(&self) -> u64 {
        self.ttl
    }

    fn tag_for(&self, subject: &str, issued_at: u64, expires_at: u64, cert_id: &[u8; 16]) -> [u8; 32] {
        let mut mac = self.key.mac();
        mac.update(&canonical_auth_string(subject, issued_at, expires_at, cert_id));
        mac.finalize().into_bytes().into()
    }

    pub fn authenticate(&self, client_id: &str, password: &str, now: UnixSeconds) -> Result<AuthCertificate, ImsError> {
        if !self.credentials.check(client_id, password) {
            return Err(ImsError::BadCredentials);
        }
        let mut cert_id = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut cert_id);
        let expires_at = now + self.ttl;
        Ok(AuthCertificate {
            subject: client_id.to_string(),
            issued_at: now,
            expires_at,
            cert_id,
            tag: self.tag_for(client_id, now, expires_at, &cert_id),
        })
    }

    pub fn verify_certificate(&self, cert: &AuthCertificate, now: UnixSeconds) -> Verdict {
        let mut mac = self.key.mac();
        mac.update(&cert.auth_bytes());
        // verify_slice compares in constant time
        if mac.verify_slice(&cert.tag).is_err() {
            return Verdict::deny(ThreatClass::Forgery, "certificate tag does not verify");
        }
        if self.revoked.read().contains(&cert.cert_id) {
            return Verdict::deny(
                ThreatClass::Forgery,
                format!("certificate {} revoked", cert.cert_id_hex()),
            );
        }
        if now < cert.issued_at {
            return Verdict::deny(ThreatClass::Expired, "certificate not yet valid");
        }
        if now >= cert.expires_at {
            return Verdict::deny(
                ThreatClass::Expired,
                format!("certificate expired at {}", cert.expires_at),
            );
        }
        Verdict::allow()
    }

    pub fn check_replay(&self, cert_id: [u8; 16], nonce: Nonce, now: UnixSeconds) -> Verdict {
        self.replay.lock().check_and_record(cert_id, nonce, now)
    }

    /// Idempotent; unknown ids are accepted.
    pub fn revoke(&self, cert_id: [u8; 16]) {
        self.revoked.write().insert(cert_id);
    }

    pub fn revoked_count(&self) -> usize {
        self.revoked.read().len()
    }

    /// Drops replay and revocation state.
    pub fn reset(&self) {
        *self.replay.lock() = ReplayCache::new(2 * self.ttl);
        self.revoked.write().clear();
    }
}
