//! How the harness reaches a gateway: in-process or over HTTP.

use std::net::{Ipv4Addr, SocketAddrV4};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::HarnessError;
use crate::envelope::{ServiceResponse, UnixSeconds};
use crate::gateway::http::{FORWARDED_FOR_HEADER, SIM_NOW_HEADER};
use crate::gateway::{provision, AuthError, Gateway, GatewayConfig, GatewayStatus, ProvisionOptions};

/// One scenario's view of the target.
pub trait Driver: Send + Sync {
    /// Returns the certificate token, or `None` when refused.
    fn authenticate(
        &self,
        client_id: &str,
        password: &str,
        src: SocketAddrV4,
        now_us: u64,
    ) -> Result<Option<String>, HarnessError>;
    fn invoke(&self, body: &[u8], src: SocketAddrV4, now_us: u64) -> Result<ServiceResponse, HarnessError>;
    fn status(&self, now_us: u64) -> Result<GatewayStatus, HarnessError>;
    /// Store file, when the harness may read it.
    fn store_path(&self) -> Option<&Path>;
}

#[derive(Debug, Clone, Default)]
pub struct InProcessTarget {
    /// Start each gateway with an empty ruleset.
    pub empty_rules: bool,
    /// Extra gateway config lines.
    pub extra: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct HttpTarget {
    pub base_url: String,
    pub admin_token: String,
    pub store_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub enum Target {
    /// A freshly provisioned gateway per scenario, driven directly.
    InProcess(InProcessTarget),
    Http(HttpTarget),
}

impl Target {
    /// Parses `inproc` or an HTTP address (`host:port` or a URL).
    pub fn parse(spec: &str, admin_token: Option<String>, store_path: Option<PathBuf>) -> Result<Self, HarnessError> {
        if spec == "inproc" || spec == "in-process" {
            return Ok(Target::InProcess(InProcessTarget::default()));
        }
        let base_url = if spec.starts_with("http://") || spec.starts_with("https://") {
            spec.trim_end_matches('/').to_string()
        } else {
            format!("http://{spec}")
        };
        let admin_token = admin_token.ok_or_else(|| {
            HarnessError::Setup(
                "an HTTP target needs the gateway admin token (--admin-token or --admin-token-file)".into(),
            )
        })?;
        Ok(Target::Http(HttpTarget {
            base_url,
            admin_token,
            store_path,
        }))
    }

    pub(crate) fn session(&self, now_us: u64, sim_clock: bool) -> Result<Box<dyn Driver>, HarnessError> {
        match self {
            Target::InProcess(t) => Ok(Box::new(InProcessDriver::new(t, now_us)?)),
            Target::Http(t) => {
                let d = HttpDriver::new(t, sim_clock)?;
                d.fresh_state(now_us)?;
                Ok(Box::new(d))
            }
        }
    }
}

pub struct InProcessDriver {
    gateway: Arc<Gateway>,
    store_path: PathBuf,
    _dir: tempfile::TempDir,
}

impl InProcessDriver {
    pub fn new(target: &InProcessTarget, now_us: u64) -> Result<Self, HarnessError> {
        let dir = tempfile::tempdir().map_err(|e| HarnessError::Setup(e.to_string()))?;
        let mut extra = vec![("clock".to_string(), "sim".to_string())];
        extra.extend(target.extra.iter().cloned());
        let opts = ProvisionOptions {
            extra,
            empty_rules: target.empty_rules,
            ..Default::default()
        };
        let setup = |e: &dyn std::fmt::Display| HarnessError::Setup(e.to_string());
        let path = provision(dir.path(), &opts).map_err(|e| setup(&e))?;
        let config = GatewayConfig::load(&path).map_err(|e| setup(&e))?;
        let gateway = Gateway::from_config(&config, now_us / 1_000_000).map_err(|e| setup(&e))?;
        Ok(InProcessDriver {
            gateway: Arc::new(gateway),
            store_path: config.store_path,
            _dir: dir,
        })
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }
}

impl Driver for InProcessDriver {
    fn authenticate(
        &self,
        client_id: &str,
        password: &str,
        src: SocketAddrV4,
        now_us: u64,
    ) -> Result<Option<String>, HarnessError> {
        match self
            .gateway
            .authenticate(client_id, password, *src.ip(), now_us / 1_000_000)
        {
            Ok(cert) => Ok(Some(cert.to_token())),
            Err(AuthError::BadCredentials | AuthError::Banned) => Ok(None),
        }
    }

    fn invoke(&self, body: &[u8], src: SocketAddrV4, now_us: u64) -> Result<ServiceResponse, HarnessError> {
        Ok(self.gateway.handle(body, src, now_us))
    }

    fn status(&self, now_us: u64) -> Result<GatewayStatus, HarnessError> {
        Ok(self.gateway.status(now_us / 1_000_000))
    }

    fn store_path(&self) -> Option<&Path> {
        Some(&self.store_path)
    }
}

pub struct HttpDriver {
    client: reqwest::blocking::Client,
    target: HttpTarget,
    sim_clock: bool,
}

fn transport(e: reqwest::Error) -> HarnessError {
    if e.is_connect() || e.is_timeout() {
        HarnessError::TargetUnreachable(e.to_string())
    } else {
        HarnessError::Protocol(e.to_string())
    }
}

impl HttpDriver {
    pub fn new(target: &HttpTarget, sim_clock: bool) -> Result<Self, HarnessError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(30))
            .build()
            .map_err(|e| HarnessError::Setup(e.to_string()))?;
        let d = HttpDriver {
            client,
            target: target.clone(),
            sim_clock,
        };
        let resp = d.client.get(d.url("/health")).send().map_err(transport)?;
        if !resp.status().is_success() {
            return Err(HarnessError::TargetUnreachable(format!(
                "health check returned {}",
                resp.status()
            )));
        }
        Ok(d)
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.target.base_url)
    }

    fn post(&self, path: &str, src: Option<Ipv4Addr>, now_us: u64) -> reqwest::blocking::RequestBuilder {
        let mut rb = self.client.post(self.url(path));
        if self.sim_clock {
            rb = rb.header(SIM_NOW_HEADER, now_us.to_string());
        }
        if let Some(ip) = src {
            rb = rb.header(FORWARDED_FOR_HEADER, ip.to_string());
        }
        rb
    }

    fn admin(&self, verb: &str, now_us: u64) -> Result<(u16, String), HarnessError> {
        let resp = self
            .post(&format!("/admin/{verb}"), None, now_us)
            .bearer_auth(&self.target.admin_token)
            .send()
            .map_err(transport)?;
        let code = resp.status().as_u16();
        Ok((code, resp.text().map_err(transport)?))
    }

    /// Clears bans, replay state and quarantine between scenarios.
    fn fresh_state(&self, now_us: u64) -> Result<(), HarnessError> {
        match self.admin("reset", now_us)? {
            (200, _) => Ok(()),
            (403, _) => match self.admin("restore-link", now_us)? {
                (200, _) => Ok(()),
                (code, body) => Err(HarnessError::Protocol(format!("restore-link: {code} {body}"))),
            },
            (code, body) => Err(HarnessError::Protocol(format!("reset: {code} {body}"))),
        }
    }
}

impl Driver for HttpDriver {
    fn authenticate(
        &self,
        client_id: &str,
        password: &str,
        src: SocketAddrV4,
        now_us: u64,
    ) -> Result<Option<String>, HarnessError> {
        let resp = self
            .post("/auth", Some(*src.ip()), now_us)
            .form(&[("client_id", client_id), ("password", password)])
            .send()
            .map_err(transport)?;
        if resp.status().is_success() {
            Ok(Some(resp.text().map_err(transport)?.trim().to_string()))
        } else {
            Ok(None)
        }
    }

    fn invoke(&self, body: &[u8], src: SocketAddrV4, now_us: u64) -> Result<ServiceResponse, HarnessError> {
        let resp = self
            .post("/invoke", Some(*src.ip()), now_us)
            .body(body.to_vec())
            .send()
            .map_err(transport)?;
        let text = resp.text().map_err(transport)?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Protocol(format!("bad /invoke response: {e}: {text}")))
    }

    fn status(&self, now_us: u64) -> Result<GatewayStatus, HarnessError> {
        match self.admin("status", now_us)? {
            (200, body) => serde_json::from_str(&body).map_err(|e| HarnessError::Protocol(format!("bad status: {e}"))),
            (code, body) => Err(HarnessError::Protocol(format!("status: {code} {body}"))),
        }
    }

    fn store_path(&self) -> Option<&Path> {
        self.target.store_path.as_deref()
    }
}

/// Seconds part of a microsecond timestamp.
pub(crate) fn secs(us: u64) -> UnixSeconds {
    us / 1_000_000
}
