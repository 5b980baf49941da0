//! Gateway configuration (`key = value` lines) and provisioning of a fresh
//! deployment directory.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::RngCore;
use thiserror::Error;

use crate::filter::{DEFAULT_REGISTRY, DEFAULT_RULES};
use crate::ids::IdsConfig;
use crate::ims::{CredentialTable, DEFAULT_TTL_S};
use crate::quarantine::QuarantineConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("config key `{key}`: {reason}")]
    Value { key: String, reason: String },
    #[error("config missing required key `{0}`")]
    Missing(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Store opened in-process.
    SingleProcess,
    /// Store served by a separate process over `store.remote`.
    TwoProcess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockMode {
    System,
    /// Time taken from the `x-sim-now` request header (microseconds).
    Sim,
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub listen: SocketAddr,
    pub profile: Profile,
    pub store_path: PathBuf,
    pub store_remote: Option<SocketAddr>,
    pub store_fsync: bool,
    pub data_key_file: PathBuf,
    pub data_key_id: String,
    pub ims_key_file: PathBuf,
    pub credentials_file: PathBuf,
    pub ims_ttl_s: u64,
    pub registry_path: Option<PathBuf>,
    pub rules_path: Option<PathBuf>,
    pub alert_log: Option<PathBuf>,
    pub access_log: Option<PathBuf>,
    pub ids: IdsConfig,
    pub quarantine: QuarantineConfig,
    pub admin_token_file: PathBuf,
    pub admin_allow_reset: bool,
    pub clock: ClockMode,
    pub trust_forwarded_for: bool,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        reason: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        other => Err(ConfigError::Value {
            key: key.into(),
            reason: format!("`{other}` is not a boolean"),
        }),
    }
}

impl GatewayConfig {
    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut kv = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: i + 1,
                reason: "expected `key = value`".into(),
            })?;
            if kv.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(ConfigError::Parse {
                    line: i + 1,
                    reason: format!("duplicate key `{}`", k.trim()),
                });
            }
        }
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let mut take = |key: &str| kv.remove(key);

        let ids_default = IdsConfig::default();
        let q_default = QuarantineConfig::default();

        let mut cfg = GatewayConfig {
            listen: match take("listen") {
                Some(v) => parse_value("listen", &v)?,
                None => "127.0.0.1:8080".parse().unwrap(),
            },
            profile: match take("profile").as_deref() {
                None | Some("single-process") => Profile::SingleProcess,
                Some("two-process") => Profile::TwoProcess,
                Some(other) => {
                    return Err(ConfigError::Value {
                        key: "profile".into(),
                        reason: format!("`{other}` is not single-process or two-process"),
                    })
                }
            },
            store_path: take("store.path")
                .map(|v| path(&v))
                .unwrap_or_else(|| base.join("store.db")),
            store_remote: take("store.remote")
                .map(|v| parse_value("store.remote", &v))
                .transpose()?,
            store_fsync: take("store.fsync")
                .map(|v| parse_bool("store.fsync", &v))
                .transpose()?
                .unwrap_or(true),
            data_key_file: take("store.key_file")
                .map(|v| path(&v))
                .ok_or(ConfigError::Missing("store.key_file"))?,
            data_key_id: take("store.key_id").unwrap_or_else(|| "dk-v1".into()),
            ims_key_file: take("ims.key_file")
                .map(|v| path(&v))
                .ok_or(ConfigError::Missing("ims.key_file"))?,
            credentials_file: take("ims.credentials_file")
                .map(|v| path(&v))
                .ok_or(ConfigError::Missing("ims.credentials_file"))?,
            ims_ttl_s: take("ims.ttl_s")
                .map(|v| parse_value("ims.ttl_s", &v))
                .transpose()?
                .unwrap_or(DEFAULT_TTL_S),
            registry_path: take("registry.path").map(|v| path(&v)),
            rules_path: take("rules.path").map(|v| path(&v)),
            alert_log: take("alert_log.path").map(|v| path(&v)),
            access_log: take("access_log.path").map(|v| path(&v)),
            ids: IdsConfig {
                window_s: take("ids.window_s")
                    .map(|v| parse_value("ids.window_s", &v))
                    .transpose()?
                    .unwrap_or(ids_default.window_s),
                threshold: take("ids.threshold")
                    .map(|v| parse_value("ids.threshold", &v))
                    .transpose()?
                    .unwrap_or(ids_default.threshold),
                ban_s: take("ids.ban_s")
                    .map(|v| parse_value("ids.ban_s", &v))
                    .transpose()?
                    .unwrap_or(ids_default.ban_s),
                global_threshold: take("ids.global_threshold")
                    .map(|v| parse_value("ids.global_threshold", &v))
                    .transpose()?
                    .unwrap_or(ids_default.global_threshold),
            },
            quarantine: QuarantineConfig {
                escalate_k: take("quarantine.escalate_k")
                    .map(|v| parse_value("quarantine.escalate_k", &v))
                    .transpose()?
                    .unwrap_or(q_default.escalate_k),
                escalate_window_s: take("quarantine.escalate_window_s")
                    .map(|v| parse_value("quarantine.escalate_window_s", &v))
                    .transpose()?
                    .unwrap_or(q_default.escalate_window_s),
            },
            admin_token_file: take("admin.token_file")
                .map(|v| path(&v))
                .ok_or(ConfigError::Missing("admin.token_file"))?,
            admin_allow_reset: take("admin.allow_reset")
                .map(|v| parse_bool("admin.allow_reset", &v))
                .transpose()?
                .unwrap_or(false),
            clock: match take("clock").as_deref() {
                None | Some("system") => ClockMode::System,
                Some("sim") => ClockMode::Sim,
                Some(other) => {
                    return Err(ConfigError::Value {
                        key: "clock".into(),
                        reason: format!("`{other}` is not system or sim"),
                    })
                }
            },
            trust_forwarded_for: take("gateway.trust_forwarded_for")
                .map(|v| parse_bool("gateway.trust_forwarded_for", &v))
                .transpose()?
                .unwrap_or(false),
        };
        if let Some(key) = kv.keys().next() {
            return Err(ConfigError::Value {
                key: key.clone(),
                reason: "unknown key".into(),
            });
        }
        if cfg.profile == Profile::TwoProcess && cfg.store_remote.is_none() {
            return Err(ConfigError::Missing("store.remote"));
        }
        if cfg.ids.window_s == 0 || cfg.ims_ttl_s == 0 {
            return Err(ConfigError::Value {
                key: "ids.window_s/ims.ttl_s".into(),
                reason: "must be positive".into(),
            });
        }
        cfg.data_key_id.truncate(8);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }
}

/// Options for [`provision`].
#[derive(Debug, Clone)]
pub struct ProvisionOptions {
    pub users: Vec<(String, String)>,
    pub admin_token: Option<String>,
    /// Extra `key = value` lines appended to the generated config.
    pub extra: Vec<(String, String)>,
    /// Write an empty rules file instead of the shipped ruleset.
    pub empty_rules: bool,
}

impl Default for ProvisionOptions {
    fn default() -> Self {
        ProvisionOptions {
            users: vec![("alice".into(), "alice-password".into())],
            admin_token: None,
            extra: Vec::new(),
            empty_rules: false,
        }
    }
}

/// Writes keys, credentials, admin token, registry, rules and a config file
/// into `dir`. Returns the config path.
pub fn provision(dir: &Path, opts: &ProvisionOptions) -> Result<PathBuf, ConfigError> {
    std::fs::create_dir_all(dir)?;
    let mut rng = rand::thread_rng();
    let mut key = [0u8; 32];
    rng.fill_bytes(&mut key);
    std::fs::write(dir.join("ims.key"), key)?;
    rng.fill_bytes(&mut key);
    std::fs::write(dir.join("data.key"), key)?;

    let mut creds = CredentialTable::new();
    for (user, pw) in &opts.users {
        creds.add_user(user, pw);
    }
    std::fs::write(dir.join("credentials"), creds.to_file_string())?;

    let token = opts.admin_token.clone().unwrap_or_else(|| {
        let mut t = [0u8; 16];
        rng.fill_bytes(&mut t);
        hex::encode(t)
    });
    std::fs::write(dir.join("admin.token"), format!("{token}\n"))?;
    std::fs::write(dir.join("services.registry"), DEFAULT_REGISTRY)?;
    std::fs::write(
        dir.join("gateway.rules"),
        if opts.empty_rules { "" } else { DEFAULT_RULES },
    )?;

    let mut cfg = String::from(
        "# generated by soaguard init\n\
         listen = 127.0.0.1:8080\n\
         profile = single-process\n\
         store.path = store.db\n\
         store.key_file = data.key\n\
         store.key_id = dk-v1\n\
         ims.key_file = ims.key\n\
         ims.credentials_file = credentials\n\
         ims.ttl_s = 300\n\
         registry.path = services.registry\n\
         rules.path = gateway.rules\n\
         alert_log.path = alerts.log\n\
         access_log.path = access.log\n\
         ids.window_s = 10\n\
         ids.threshold = 50\n\
         ids.ban_s = 60\n\
         ids.global_threshold = 500\n\
         quarantine.escalate_k = 5\n\
         quarantine.escalate_window_s = 30\n\
         admin.token_file = admin.token\n",
    );
    let mut lines: Vec<String> = cfg.lines().map(str::to_string).collect();
    for (k, v) in &opts.extra {
        let prefix = format!("{k} =");
        lines.retain(|l| !l.starts_with(&prefix));
        lines.push(format!("{k} = {v}"));
    }
    cfg = lines.join("\n");
    cfg.push('\n');
    let path = dir.join("gateway.conf");
    std::fs::write(&path, cfg)?;
    Ok(path)
}
