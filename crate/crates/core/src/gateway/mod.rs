//! Front server: the request pipeline and the business service components.
//!
//! Stage order is fixed: ban-check, auth, replay, ids-observe, sanitize,
//! service, store. Every denial is reported to the IDS and the resulting
//! alert is fed to the quarantine link.

mod config;
pub mod http;
pub mod services;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};
use std::path::PathBuf;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use percent_encoding::{utf8_percent_encode, AsciiSet, CONTROLS};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{provision, ClockMode, ConfigError, GatewayConfig, Profile, ProvisionOptions};
pub use services::{
    Banking, BusinessServiceComponent, HandlerError, Insurance, OnlineTransaction, ScopedStore, ServiceCall,
    TransactionInfo,
};

use crate::envelope::{self, ServiceRequest, ServiceResponse, Stage, ThreatClass, UnixSeconds, Verdict};
use crate::filter::{self, load_rules, normalize, FilterError, RuleSet, ServiceRegistry};
use crate::ids::{AlertEvent, AlertLog, DenyContext, Flow, Ids, LogWriteError, Proto, Severity};
use crate::ims::{AuthCertificate, CredentialTable, Ims, ImsError, ImsKey};
use crate::quarantine::{AdminToken, LinkError, LinkStatus, QuarantineLink};
use crate::store::{DataKey, FileBackend, KeyId, RemoteBackend, SecureStore, StoreError};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ims(#[from] ImsError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("{what}: {source}")]
    Io { what: String, source: std::io::Error },
    #[error("service `{0}` is already registered")]
    DuplicateService(String),
    #[error("invalid component: {0}")]
    InvalidComponent(String),
}

#[derive(Debug, Error)]
pub enum AdminError {
    #[error("unauthorized")]
    Unauthorized,
    #[error("unknown admin verb `{0}`")]
    UnknownVerb(String),
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Rules(#[from] FilterError),
    #[error("reset is disabled on this gateway")]
    ResetDisabled,
}

#[derive(Debug, Error)]
pub enum AuthError {
    #[error("authentication failed")]
    BadCredentials,
    #[error("source is banned")]
    Banned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Allow,
    Deny(ThreatClass),
    Error,
}

impl fmt::Display for StageOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageOutcome::Allow => f.write_str("allow"),
            StageOutcome::Deny(c) => write!(f, "deny({c})"),
            StageOutcome::Error => f.write_str("error"),
        }
    }
}

/// Stages one request passed through, in order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PipelineTrace {
    pub entries: Vec<(Stage, StageOutcome)>,
}

impl PipelineTrace {
    fn push(&mut self, stage: Stage, outcome: StageOutcome) {
        self.entries.push((stage, outcome));
    }

    /// True iff the stages are a prefix of the fixed order and only the
    /// last entry may be a non-Allow.
    pub fn is_well_formed(&self) -> bool {
        let in_order = self
            .entries
            .iter()
            .zip(Stage::PIPELINE)
            .all(|((s, _), expected)| *s == expected);
        let n = self.entries.len();
        in_order
            && n <= Stage::PIPELINE.len()
            && self.entries[..n.saturating_sub(1)]
                .iter()
                .all(|(_, o)| *o == StageOutcome::Allow)
    }

    pub fn denials(&self) -> usize {
        self.entries
            .iter()
            .filter(|(_, o)| matches!(o, StageOutcome::Deny(_)))
            .count()
    }
}

impl fmt::Display for PipelineTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.entries.is_empty() {
            return f.write_str("-");
        }
        for (i, (stage, outcome)) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{stage}:{outcome}")?;
        }
        Ok(())
    }
}

const FIELD_ESCAPE: &AsciiSet = &CONTROLS.add(b' ').add(b'%');

fn field(s: &str) -> String {
    if s.is_empty() {
        "-".into()
    } else {
        utf8_percent_encode(s, FIELD_ESCAPE).to_string()
    }
}

/// One line per request:
/// `ts ip client_id service action stage status trace`.
pub struct AccessLog {
    file: Option<(Mutex<File>, PathBuf)>,
    lines: Mutex<Vec<String>>,
    count: std::sync::atomic::AtomicU64,
}

impl fmt::Debug for AccessLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AccessLog").field("lines", &self.len()).finish()
    }
}

impl AccessLog {
    pub fn open(path: &std::path::Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(AccessLog {
            file: Some((Mutex::new(file), path.to_path_buf())),
            lines: Mutex::new(Vec::new()),
            count: Default::default(),
        })
    }

    pub fn in_memory() -> Self {
        AccessLog {
            file: None,
            lines: Mutex::new(Vec::new()),
            count: Default::default(),
        }
    }

    fn write(&self, line: String) {
        use std::sync::atomic::Ordering;
        match &self.file {
            Some((f, _)) => {
                if let Err(e) = writeln!(f.lock(), "{line}") {
                    tracing::error!(error = %e, "access log write failed");
                }
            }
            None => self.lines.lock().push(line),
        }
        self.count.fetch_add(1, Ordering::SeqCst);
    }

    pub fn len(&self) -> u64 {
        self.count.load(std::sync::atomic::Ordering::SeqCst)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Everything logged so far (file logs are re-read).
    pub fn lines(&self) -> Vec<String> {
        match &self.file {
            Some((_, path)) => std::fs::read_to_string(path)
                .map(|t| t.lines().map(str::to_string).collect())
                .unwrap_or_default(),
            None => self.lines.lock().clone(),
        }
    }
}

/// Snapshot returned by the `status` admin verb.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct GatewayStatus {
    pub link: LinkStatus,
    pub since: UnixSeconds,
    pub cause: Option<String>,
    pub bans: usize,
    pub alerts: u64,
    pub rules_version: String,
    pub rules: usize,
    pub requests: u64,
}

fn io_err(what: impl Into<String>) -> impl FnOnce(std::io::Error) -> GatewayError {
    let what = what.into();
    move |source| GatewayError::Io { what, source }
}

type ComponentMap = BTreeMap<String, Arc<dyn BusinessServiceComponent>>;

pub struct Gateway {
    ims: Ims,
    ids: Ids,
    link: QuarantineLink,
    data_key: DataKey,
    registry: RwLock<Arc<ServiceRegistry>>,
    rules: RwLock<Arc<RuleSet>>,
    rules_path: Option<PathBuf>,
    components: RwLock<Arc<ComponentMap>>,
    access_log: AccessLog,
    local: SocketAddrV4,
    allow_reset: bool,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("local", &self.local)
            .field("link", &self.link)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    /// Opens keys, logs and the store named by `config` and registers the
    /// built-in components.
    pub fn from_config(config: &GatewayConfig, now: UnixSeconds) -> Result<Self, GatewayError> {
        let ims_key = ImsKey::load(&config.ims_key_file)?;
        let creds = CredentialTable::load(&config.credentials_file)?;
        let key_id = KeyId::from_label(&config.data_key_id).ok_or_else(|| ConfigError::Value {
            key: "store.key_id".into(),
            reason: "must be 1 to 8 bytes".into(),
        })?;
        let data_key = DataKey::load(&config.data_key_file, key_id)?;
        let admin = AdminToken::load(&config.admin_token_file)
            .map_err(io_err(format!("admin token {}", config.admin_token_file.display())))?;

        let store = match config.profile {
            Profile::SingleProcess => SecureStore::new(Box::new(FileBackend::open_with(
                &config.store_path,
                config.store_fsync,
            )?)),
            Profile::TwoProcess => {
                let addr = config.store_remote.ok_or(ConfigError::Missing("store.remote"))?;
                SecureStore::new(Box::new(RemoteBackend::new(addr)))
            }
        };

        let registry = match &config.registry_path {
            Some(p) => ServiceRegistry::load(p)?,
            None => ServiceRegistry::parse(filter::DEFAULT_REGISTRY).expect("shipped registry parses"),
        };
        let rules = match &config.rules_path {
            Some(p) => load_rules(p)?,
            None => RuleSet::default_rules(),
        };
        let alert_log = match &config.alert_log {
            Some(p) => AlertLog::open(p).map_err(io_err(format!("alert log {}", p.display())))?,
            None => AlertLog::in_memory(),
        };
        let access_log = match &config.access_log {
            Some(p) => AccessLog::open(p).map_err(io_err(format!("access log {}", p.display())))?,
            None => AccessLog::in_memory(),
        };
        let local = match config.listen {
            SocketAddr::V4(a) => a,
            SocketAddr::V6(a) => SocketAddrV4::new(Ipv4Addr::UNSPECIFIED, a.port()),
        };

        let gw = Gateway {
            ims: Ims::new(ims_key, creds, config.ims_ttl_s),
            ids: Ids::new(config.ids, alert_log),
            link: QuarantineLink::new(config.quarantine, admin, store, now),
            data_key,
            registry: RwLock::new(Arc::new(registry)),
            rules: RwLock::new(Arc::new(rules)),
            rules_path: config.rules_path.clone(),
            components: RwLock::new(Arc::new(BTreeMap::new())),
            access_log,
            local,
            allow_reset: config.admin_allow_reset,
        };
        gw.register_component(Arc::new(TransactionInfo))?;
        gw.register_component(Arc::new(OnlineTransaction::default()))?;
        gw.register_component(Arc::new(Banking::default()))?;
        gw.register_component(Arc::new(Insurance))?;
        Ok(gw)
    }

    /// Makes a component callable and adds its actions to the registry.
    pub fn register_component(&self, component: Arc<dyn BusinessServiceComponent>) -> Result<(), GatewayError> {
        let name = normalize(component.name());
        let actions = component.actions();
        if name.is_empty() || name.contains(char::is_whitespace) || name.contains('/') {
            return Err(GatewayError::InvalidComponent(format!("bad service name `{name}`")));
        }
        if actions.is_empty() {
            return Err(GatewayError::InvalidComponent(format!("`{name}` has no actions")));
        }
        let mut components = self.components.write();
        if components.contains_key(&name) {
            return Err(GatewayError::DuplicateService(name));
        }
        let mut next = (**components).clone();
        next.insert(name.clone(), component);
        let mut registry = (**self.registry.read()).clone();
        registry.insert(&name, &actions);
        *self.registry.write() = Arc::new(registry);
        *components = Arc::new(next);
        Ok(())
    }

    pub fn registry(&self) -> Arc<ServiceRegistry> {
        Arc::clone(&self.registry.read())
    }

    pub fn rules(&self) -> Arc<RuleSet> {
        Arc::clone(&self.rules.read())
    }

    pub fn ims(&self) -> &Ims {
        &self.ims
    }

    pub fn ids(&self) -> &Ids {
        &self.ids
    }

    pub fn link(&self) -> &QuarantineLink {
        &self.link
    }

    pub fn access_log(&self) -> &AccessLog {
        &self.access_log
    }

    /// Credential check for `/auth`. Banned sources are refused first.
    pub fn authenticate(
        &self,
        client_id: &str,
        password: &str,
        source: Ipv4Addr,
        now: UnixSeconds,
    ) -> Result<AuthCertificate, AuthError> {
        if self.ids.is_banned(source, now) {
            return Err(AuthError::Banned);
        }
        self.ims
            .authenticate(client_id, password, now)
            .map_err(|_| AuthError::BadCredentials)
    }

    pub fn handle(&self, bytes: &[u8], source: SocketAddrV4, now_us: u64) -> ServiceResponse {
        self.handle_traced(bytes, source, now_us).0
    }

    /// Runs the pipeline and also returns the stages visited.
    pub fn handle_traced(&self, bytes: &[u8], source: SocketAddrV4, now_us: u64) -> (ServiceResponse, PipelineTrace) {
        let mut trace = PipelineTrace::default();
        let (response, request) = match envelope::decode(bytes) {
            Err(e) => (ServiceResponse::denied(Stage::Decode, None, e.to_string()), None),
            Ok(req) => {
                let resp = self.run_pipeline(&req, source, now_us, &mut trace);
                (resp, Some(req))
            }
        };
        debug_assert!(trace.is_well_formed());
        self.log_access(now_us, source.ip(), request.as_ref(), &response, &trace);
        (response, trace)
    }

    fn run_pipeline(
        &self,
        req: &ServiceRequest,
        source: SocketAddrV4,
        now_us: u64,
        trace: &mut PipelineTrace,
    ) -> ServiceResponse {
        let now = now_us / 1_000_000;
        let ip = *source.ip();

        if self.ids.is_banned(ip, now) {
            // the ban already mitigates this source; re-alerting at MEDIUM
            // would let one banned client trip the escalation policy
            let v = Verdict::deny(ThreatClass::RateFlood, format!("{ip} is banned"));
            return self.deny(Stage::BanCheck, &v, Some(Severity::LOW), source, now_us, trace);
        }
        trace.push(Stage::BanCheck, StageOutcome::Allow);

        let auth = self.check_auth(req, now);
        let cert = match auth {
            Ok(cert) => cert,
            Err(v) => return self.deny(Stage::Auth, &v, None, source, now_us, trace),
        };
        trace.push(Stage::Auth, StageOutcome::Allow);

        let v = self.ims.check_replay(cert.cert_id, req.nonce(), now);
        if v.is_deny() {
            return self.deny(Stage::Replay, &v, None, source, now_us, trace);
        }
        trace.push(Stage::Replay, StageOutcome::Allow);

        let obs = self.ids.observe(ip, now);
        if obs.verdict.is_deny() {
            return self.deny(Stage::IdsObserve, &obs.verdict, obs.alert, source, now_us, trace);
        }
        trace.push(Stage::IdsObserve, StageOutcome::Allow);

        let registry = self.registry();
        let v = filter::sanitize(req, &registry, &self.rules());
        if v.is_deny() {
            return self.deny(Stage::Sanitize, &v, None, source, now_us, trace);
        }
        trace.push(Stage::Sanitize, StageOutcome::Allow);

        let service = normalize(req.service());
        let Some(component) = self.components.read().get(&service).cloned() else {
            trace.push(Stage::Service, StageOutcome::Error);
            return ServiceResponse::error(Stage::Service, format!("no component serves `{service}`"));
        };
        let action = normalize(req.action());
        let grants = component.read_grants();
        let mut call = ServiceCall {
            client_id: req.client_id(),
            action: &action,
            payload: req.payload(),
            store: ScopedStore::new(&service, grants, &self.link, &self.data_key),
        };
        match component.invoke(&mut call) {
            Ok(body) => {
                trace.push(Stage::Service, StageOutcome::Allow);
                trace.push(Stage::Store, StageOutcome::Allow);
                ServiceResponse::ok(body)
            }
            Err(HandlerError::BadRequest(msg)) => {
                trace.push(Stage::Service, StageOutcome::Error);
                ServiceResponse::error(Stage::Service, msg)
            }
            Err(HandlerError::Store(e)) => {
                trace.push(Stage::Service, StageOutcome::Allow);
                trace.push(Stage::Store, StageOutcome::Error);
                let reason = match &e {
                    LinkError::LinkSevered { since, .. } => format!("LinkSevered: store link severed since {since}"),
                    other => other.to_string(),
                };
                ServiceResponse::error(Stage::Store, reason)
            }
        }
    }

    fn check_auth(&self, req: &ServiceRequest, now: UnixSeconds) -> Result<AuthCertificate, Verdict> {
        let Some(cert) = req.certificate() else {
            return Err(Verdict::deny(ThreatClass::Forgery, "no certificate presented"));
        };
        if cert.subject != req.client_id() {
            return Err(Verdict::deny(
                ThreatClass::Forgery,
                "certificate subject does not match client",
            ));
        }
        let v = self.ims.verify_certificate(cert, now);
        if v.is_deny() {
            return Err(v);
        }
        Ok(cert.clone())
    }

    fn deny(
        &self,
        stage: Stage,
        verdict: &Verdict,
        severity: Option<Severity>,
        source: SocketAddrV4,
        now_us: u64,
        trace: &mut PipelineTrace,
    ) -> ServiceResponse {
        let threat = verdict.threat_class().expect("deny verdict carries a class");
        trace.push(stage, StageOutcome::Deny(threat));
        let ctx = DenyContext {
            flow: Flow {
                src: source,
                dst: self.local,
                proto: Proto::Http,
            },
            timestamp_us: now_us,
            threat,
            severity,
        };
        match self.ids.report(&ctx) {
            Ok(event) => {
                self.link.on_alert(&event, now_us / 1_000_000);
                ServiceResponse::denied(stage, Some(threat), verdict.detail())
            }
            Err(LogWriteError(e)) => {
                tracing::error!(error = %e, "alert log write failed");
                let mut resp = ServiceResponse::error(stage, format!("alert log write failed: {e}"));
                resp.threat = Some(threat);
                resp
            }
        }
    }

    fn log_access(
        &self,
        now_us: u64,
        ip: &Ipv4Addr,
        req: Option<&ServiceRequest>,
        resp: &ServiceResponse,
        trace: &PipelineTrace,
    ) {
        let (client, service, action) = match req {
            Some(r) => (field(r.client_id()), field(r.service()), field(r.action())),
            None => ("-".into(), "-".into(), "-".into()),
        };
        let stage = match (resp.stage, trace.entries.last()) {
            (Some(s), _) => s.as_str(),
            (None, Some((s, _))) => s.as_str(),
            (None, None) => "-",
        };
        let status = match resp.status {
            envelope::ResponseStatus::Ok => "ok",
            envelope::ResponseStatus::Denied => "denied",
            envelope::ResponseStatus::Error => "error",
        };
        self.access_log.write(format!(
            "{}.{:06} {ip} {client} {service} {action} {stage} {status} {trace}",
            now_us / 1_000_000,
            now_us % 1_000_000
        ));
    }

    pub fn status(&self, now: UnixSeconds) -> GatewayStatus {
        let link = self.link.state();
        let rules = self.rules();
        GatewayStatus {
            link: link.status,
            since: link.since,
            cause: link.cause.as_ref().map(|e: &AlertEvent| {
                crate::ids::format_alert(e)
                    .lines()
                    .take(2)
                    .collect::<Vec<_>>()
                    .join(" ")
            }),
            bans: self.ids.ban_count(now),
            alerts: self.ids.alert_log().records(),
            rules_version: rules.version().to_string(),
            rules: rules.len(),
            requests: self.access_log.len(),
        }
    }

    /// Operator actions: `status`, `restore-link`, `reload-rules`,
    /// `revoke` (body: certificate token or cert id hex), `reset`.
    pub fn admin(&self, verb: &str, token: &str, body: &str, now: UnixSeconds) -> Result<String, AdminError> {
        self.link.check_admin(token).map_err(|_| AdminError::Unauthorized)?;
        match verb {
            "status" => Ok(serde_json::to_string(&self.status(now)).expect("status serializes")),
            "restore-link" => {
                self.link.restore(token, now).map_err(|_| AdminError::Unauthorized)?;
                Ok("connected".into())
            }
            "reload-rules" => {
                let path = self
                    .rules_path
                    .as_ref()
                    .ok_or_else(|| AdminError::BadRequest("no rules.path configured".into()))?;
                let rules = load_rules(path)?;
                let version = rules.version().to_string();
                *self.rules.write() = Arc::new(rules);
                Ok(version)
            }
            "revoke" => {
                let body = body.trim();
                let cert_id = match AuthCertificate::from_token(body) {
                    Ok(cert) => cert.cert_id,
                    Err(_) => envelope::decode_lower_hex::<16>(body)
                        .map_err(|_| AdminError::BadRequest("expected a certificate token or cert id".into()))?,
                };
                self.ims.revoke(cert_id);
                Ok(hex::encode(cert_id))
            }
            "reset" => {
                if !self.allow_reset {
                    return Err(AdminError::ResetDisabled);
                }
                self.ims.reset();
                self.ids.reset();
                self.link.reset(now);
                Ok("reset".into())
            }
            other => Err(AdminError::UnknownVerb(other.to_string())),
        }
    }
}
