//! Request/response envelope and canonical serialization.
//!
//! A request travels as a line-oriented text frame:
//!
//! ```text
//! SRQ/1
//! client_id=5:alice
//! source_ip=8:10.0.0.5
//! service=7:banking
//! action=7:deposit
//! payload=10:amount=100
//! cert=0:
//! nonce=32:00112233445566778899aabbccddeeff
//! timestamp=10:1700000000
//! ```
//!
//! Every field is `name=<len>:<bytes>\n`, fields appear exactly once and in
//! the order above. The length prefix makes any byte (including `\n`) safe
//! inside a value. An empty `cert` value means "no certificate"; otherwise
//! it carries the compact certificate token (see [`AuthCertificate::to_token`]).

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ims::AuthCertificate;

/// Unix time in whole seconds.
pub type UnixSeconds = u64;

pub const MAX_NAME_LEN: usize = 128;

const MAGIC: &[u8] = b"SRQ/1\n";
const FIELDS: [&str; 8] = [
    "client_id",
    "source_ip",
    "service",
    "action",
    "payload",
    "cert",
    "nonce",
    "timestamp",
];
const CERT_DOMAIN: &[u8] = b"soaguard-cert-v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvelopeError {
    #[error("malformed envelope at byte {position}: {reason}")]
    MalformedEnvelope { position: usize, reason: String },
    #[error("invalid request field `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },
}

impl EnvelopeError {
    fn malformed(position: usize, reason: impl Into<String>) -> Self {
        EnvelopeError::MalformedEnvelope {
            position,
            reason: reason.into(),
        }
    }
}

/// Threat classes a pipeline stage can attach to a denial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ThreatClass {
    Forgery,
    Replay,
    Expired,
    #[serde(rename = "XSS")]
    Xss,
    #[serde(rename = "RFI")]
    Rfi,
    #[serde(rename = "LFI")]
    Lfi,
    Injection,
    UnknownService,
    RateFlood,
}

impl ThreatClass {
    pub const ALL: [ThreatClass; 9] = [
        ThreatClass::Forgery,
        ThreatClass::Replay,
        ThreatClass::Expired,
        ThreatClass::Xss,
        ThreatClass::Rfi,
        ThreatClass::Lfi,
        ThreatClass::Injection,
        ThreatClass::UnknownService,
        ThreatClass::RateFlood,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ThreatClass::Forgery => "Forgery",
            ThreatClass::Replay => "Replay",
            ThreatClass::Expired => "Expired",
            ThreatClass::Xss => "XSS",
            ThreatClass::Rfi => "RFI",
            ThreatClass::Lfi => "LFI",
            ThreatClass::Injection => "Injection",
            ThreatClass::UnknownService => "UnknownService",
            ThreatClass::RateFlood => "RateFlood",
        }
    }
}

impl fmt::Display for ThreatClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ThreatClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ThreatClass::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown threat class `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Allow,
    Deny,
}

/// Outcome of one security check. A denial always names its threat class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    decision: Decision,
    threat_class: Option<ThreatClass>,
    detail: String,
}

impl Verdict {
    pub fn allow() -> Self {
        Verdict {
            decision: Decision::Allow,
            threat_class: None,
            detail: String::new(),
        }
    }

    pub fn deny(class: ThreatClass, detail: impl Into<String>) -> Self {
        Verdict {
            decision: Decision::Deny,
            threat_class: Some(class),
            detail: detail.into(),
        }
    }

    pub fn decision(&self) -> Decision {
        self.decision
    }

    pub fn threat_class(&self) -> Option<ThreatClass> {
        self.threat_class
    }

    pub fn detail(&self) -> &str {
        &self.detail
    }

    pub fn is_allow(&self) -> bool {
        self.decision == Decision::Allow
    }

    pub fn is_deny(&self) -> bool {
        self.decision == Decision::Deny
    }
}

/// 16-byte per-request nonce, hex on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Nonce(pub [u8; 16]);

impl Nonce {
    pub fn random() -> Self {
        Nonce(rand::random())
    }
}

impl fmt::Display for Nonce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl FromStr for Nonce {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        decode_lower_hex::<16>(s).map(Nonce)
    }
}

/// Decodes exactly `N` bytes from lowercase hex; uppercase is rejected so
/// every value has a single textual form.
pub(crate) fn decode_lower_hex<const N: usize>(s: &str) -> Result<[u8; N], String> {
    if s.len() != 2 * N {
        return Err(format!("expected {} hex characters, got {}", 2 * N, s.len()));
    }
    if !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
        return Err("expected lowercase hex".into());
    }
    let mut out = [0u8; N];
    hex::decode_to_slice(s, &mut out).map_err(|e| e.to_string())?;
    Ok(out)
}

/// Parses a decimal integer with no sign and no leading zeros.
pub(crate) fn parse_canonical_u64(s: &str) -> Result<u64, String> {
    if s.is_empty() || (s.len() > 1 && s.starts_with('0')) || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(format!("`{s}` is not a canonical decimal"));
    }
    s.parse::<u64>().map_err(|e| e.to_string())
}

/// A client's call to one business service action.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceRequest {
    client_id: String,
    source_ip: Ipv4Addr,
    service: String,
    action: String,
    payload: String,
    certificate: Option<AuthCertificate>,
    nonce: Nonce,
    timestamp: UnixSeconds,
}

impl ServiceRequest {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        client_id: impl Into<String>,
        source_ip: Ipv4Addr,
        service: impl Into<String>,
        action: impl Into<String>,
        payload: impl Into<String>,
        certificate: Option<AuthCertificate>,
        nonce: Nonce,
        timestamp: UnixSeconds,
    ) -> Result<Self, EnvelopeError> {
        let service = service.into();
        let action = action.into();
        check_name("service", &service)?;
        check_name("action", &action)?;
        Ok(ServiceRequest {
            client_id: client_id.into(),
            source_ip,
            service,
            action,
            payload: payload.into(),
            certificate,
            nonce,
            timestamp,
        })
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }
    pub fn source_ip(&self) -> Ipv4Addr {
        self.source_ip
    }
    pub fn service(&self) -> &str {
        &self.service
    }
    pub fn action(&self) -> &str {
        &self.action
    }
    pub fn payload(&self) -> &str {
        &self.payload
    }
    pub fn certificate(&self) -> Option<&AuthCertificate> {
        self.certificate.as_ref()
    }
    pub fn nonce(&self) -> Nonce {
        self.nonce
    }
    pub fn timestamp(&self) -> UnixSeconds {
        self.timestamp
    }

    pub fn with_certificate(mut self, cert: Option<AuthCertificate>) -> Self {
        self.certificate = cert;
        self
    }

    pub fn with_nonce(mut self, nonce: Nonce) -> Self {
        self.nonce = nonce;
        self
    }
}

fn check_name(field: &'static str, value: &str) -> Result<(), EnvelopeError> {
    if value.is_empty() {
        return Err(EnvelopeError::InvalidField {
            field,
            reason: "must not be empty".into(),
        });
    }
    if value.len() > MAX_NAME_LEN {
        return Err(EnvelopeError::InvalidField {
            field,
            reason: format!("longer than {MAX_NAME_LEN} bytes"),
        });
    }
    Ok(())
}

fn push_field(out: &mut Vec<u8>, name: &str, value: &[u8]) {
    out.extend_from_slice(name.as_bytes());
    out.push(b'=');
    out.extend_from_slice(value.len().to_string().as_bytes());
    out.push(b':');
    out.extend_from_slice(value);
    out.push(b'\n');
}

/// Canonical encoding; equal requests always produce identical bytes.
pub fn encode(request: &ServiceRequest) -> Vec<u8> {
    let mut out = Vec::with_capacity(160 + request.payload.len());
    out.extend_from_slice(MAGIC);
    push_field(&mut out, "client_id", request.client_id.as_bytes());
    push_field(&mut out, "source_ip", request.source_ip.to_string().as_bytes());
    push_field(&mut out, "service", request.service.as_bytes());
    push_field(&mut out, "action", request.action.as_bytes());
    push_field(&mut out, "payload", request.payload.as_bytes());
    let cert = request
        .certificate
        .as_ref()
        .map(AuthCertificate::to_token)
        .unwrap_or_default();
    push_field(&mut out, "cert", cert.as_bytes());
    push_field(&mut out, "nonce", request.nonce.to_string().as_bytes());
    push_field(&mut out, "timestamp", request.timestamp.to_string().as_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn expect(&mut self, lit: &[u8], what: &str) -> Result<(), EnvelopeError> {
        if self.buf[self.pos..].starts_with(lit) {
            self.pos += lit.len();
            Ok(())
        } else {
            Err(EnvelopeError::malformed(self.pos, format!("expected {what}")))
        }
    }

    fn until(&mut self, stop: u8, max: usize) -> Result<&'a [u8], EnvelopeError> {
        let start = self.pos;
        let window = &self.buf[start..self.buf.len().min(start + max + 1)];
        match window.iter().position(|&b| b == stop) {
            Some(i) => {
                self.pos = start + i + 1;
                Ok(&self.buf[start..start + i])
            }
            None => Err(EnvelopeError::malformed(
                start,
                format!("missing `{}` delimiter", stop as char),
            )),
        }
    }

    fn field(&mut self, expected: &str) -> Result<(usize, &'a [u8]), EnvelopeError> {
        let name_pos = self.pos;
        let name = self.until(b'=', 32)?;
        if name != expected.as_bytes() {
            let reason = match std::str::from_utf8(name) {
                Ok(n) if FIELDS.contains(&n) => {
                    format!("field `{n}` out of order or duplicated, expected `{expected}`")
                }
                Ok(n) => format!("unknown field `{n}`, expected `{expected}`"),
                Err(_) => "field name is not UTF-8".to_string(),
            };
            return Err(EnvelopeError::malformed(name_pos, reason));
        }
        let len_pos = self.pos;
        let len_text = self.until(b':', 20)?;
        let len = std::str::from_utf8(len_text)
            .map_err(|_| EnvelopeError::malformed(len_pos, "length is not ASCII"))
            .and_then(|s| parse_canonical_u64(s).map_err(|r| EnvelopeError::malformed(len_pos, r)))?;
        let value_pos = self.pos;
        let remaining = (self.buf.len() - value_pos) as u64;
        if len >= remaining {
            return Err(EnvelopeError::malformed(value_pos, "truncated field value"));
        }
        let end = value_pos + len as usize;
        if self.buf[end] != b'\n' {
            return Err(EnvelopeError::malformed(end, "missing field terminator"));
        }
        self.pos = end + 1;
        Ok((value_pos, &self.buf[value_pos..end]))
    }
}

fn utf8_field(pos: usize, bytes: &[u8]) -> Result<&str, EnvelopeError> {
    std::str::from_utf8(bytes).map_err(|e| EnvelopeError::malformed(pos + e.valid_up_to(), "invalid UTF-8"))
}

/// Parses a canonical encoding. Anything `encode` would not have produced
/// is rejected.
pub fn decode(bytes: &[u8]) -> Result<ServiceRequest, EnvelopeError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.expect(MAGIC, "`SRQ/1` header")?;

    let (_, client_id) = r.field("client_id")?;
    let client_id = utf8_field(0, client_id)?.to_string();

    let (pos, ip) = r.field("source_ip")?;
    let ip_text = utf8_field(pos, ip)?;
    let source_ip: Ipv4Addr = ip_text
        .parse()
        .map_err(|_| EnvelopeError::malformed(pos, format!("`{ip_text}` is not a dotted-quad IPv4 address")))?;

    let (pos, service) = r.field("service")?;
    let service = utf8_field(pos, service)?.to_string();
    check_name("service", &service).map_err(|e| EnvelopeError::malformed(pos, e.to_string()))?;

    let (pos, action) = r.field("action")?;
    let action = utf8_field(pos, action)?.to_string();
    check_name("action", &action).map_err(|e| EnvelopeError::malformed(pos, e.to_string()))?;

    let (pos, payload) = r.field("payload")?;
    let payload = utf8_field(pos, payload)?.to_string();

    let (pos, cert) = r.field("cert")?;
    let certificate = if cert.is_empty() {
        None
    } else {
        let token = utf8_field(pos, cert)?;
        Some(AuthCertificate::from_token(token).map_err(|e| EnvelopeError::malformed(pos, e))?)
    };

    let (pos, nonce) = r.field("nonce")?;
    let nonce: Nonce = utf8_field(pos, nonce)?
        .parse()
        .map_err(|e| EnvelopeError::malformed(pos, format!("nonce: {e}")))?;

    let (pos, ts) = r.field("timestamp")?;
    let timestamp = parse_canonical_u64(utf8_field(pos, ts)?)
        .map_err(|e| EnvelopeError::malformed(pos, format!("timestamp: {e}")))?;

    if r.pos != bytes.len() {
        return Err(EnvelopeError::malformed(r.pos, "trailing bytes after last field"));
    }

    Ok(ServiceRequest {
        client_id,
        source_ip,
        service,
        action,
        payload,
        certificate,
        nonce,
        timestamp,
    })
}

/// Byte string the certificate tag is computed over. Every field is
/// prefixed with its 32-bit big-endian length.
pub fn canonical_auth_string(
    subject: &str,
    issued_at: UnixSeconds,
    expires_at: UnixSeconds,
    cert_id: &[u8; 16],
) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * 5 + CERT_DOMAIN.len() + subject.len() + 32);
    let mut put = |bytes: &[u8]| {
        out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
        out.extend_from_slice(bytes);
    };
    put(CERT_DOMAIN);
    put(subject.as_bytes());
    put(&issued_at.to_be_bytes());
    put(&expires_at.to_be_bytes());
    put(cert_id);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResponseStatus {
    Ok,
    Denied,
    Error,
}

/// Pipeline stage labels, in execution order (`Decode` precedes the
/// pipeline proper).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Decode,
    BanCheck,
    Auth,
    Replay,
    IdsObserve,
    Sanitize,
    Service,
    Store,
}

impl Stage {
    pub const PIPELINE: [Stage; 7] = [
        Stage::BanCheck,
        Stage::Auth,
        Stage::Replay,
        Stage::IdsObserve,
        Stage::Sanitize,
        Stage::Service,
        Stage::Store,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Decode => "decode",
            Stage::BanCheck => "ban-check",
            Stage::Auth => "auth",
            Stage::Replay => "replay",
            Stage::IdsObserve => "ids-observe",
            Stage::Sanitize => "sanitize",
            Stage::Service => "service",
            Stage::Store => "store",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Stage::Decode]
            .into_iter()
            .chain(Stage::PIPELINE)
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceResponse {
    pub status: ResponseStatus,
    pub stage: Option<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threat: Option<ThreatClass>,
    pub reason: String,
    pub body: String,
}

impl ServiceResponse {
    pub fn ok(body: impl Into<String>) -> Self {
        ServiceResponse {
            status: ResponseStatus::Ok,
            stage: None,
            threat: None,
            reason: String::new(),
            body: body.into(),
        }
    }

    pub fn denied(stage: Stage, threat: Option<ThreatClass>, reason: impl Into<String>) -> Self {
        let mut reason = reason.into();
        if reason.is_empty() {
            reason = "denied".into();
        }
        ServiceResponse {
            status: ResponseStatus::Denied,
            stage: Some(stage),
            threat,
            reason,
            body: String::new(),
        }
    }

    pub fn error(stage: Stage, reason: impl Into<String>) -> Self {
        ServiceResponse {
            status: ResponseStatus::Error,
            stage: Some(stage),
            threat: None,
            reason: reason.into(),
            body: String::new(),
        }
    }
}
