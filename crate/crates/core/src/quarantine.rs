//! Firewall between the service host and the store host.
//!
//! All store traffic goes through [`QuarantineLink::guarded_call`]. A store
//! call holds the link's read lock for its whole duration; severing takes
//! the write lock, so the sever point is a barrier: calls that started
//! before it complete, calls after it fail with [`LinkError::LinkSevered`]
//! without reaching the store.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use subtle::ConstantTimeEq;
use thiserror::Error;

use crate::envelope::UnixSeconds;
use crate::ids::{AlertEvent, Severity};
use crate::store::{SecureStore, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinkStatus {
    Connected,
    Quarantined,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkState {
    pub status: LinkStatus,
    pub since: UnixSeconds,
    /// Present exactly when quarantined.
    pub cause: Option<AlertEvent>,
}

impl LinkState {
    pub fn is_connected(&self) -> bool {
        self.status == LinkStatus::Connected
    }
}

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("store link severed since {since}")]
    LinkSevered {
        since: UnixSeconds,
        cause: Option<Box<AlertEvent>>,
    },
    #[error("unauthorized")]
    Unauthorized,
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuarantineConfig {
    /// Severity-2 alerts within the window that trigger a sever.
    pub escalate_k: usize,
    pub escalate_window_s: u64,
}

impl Default for QuarantineConfig {
    fn default() -> Self {
        QuarantineConfig {
            escalate_k: 5,
            escalate_window_s: 30,
        }
    }
}

/// Operator secret for restoring the link.
#[derive(Clone)]
pub struct AdminToken(String);

impl AdminToken {
    pub fn new(token: impl Into<String>) -> Self {
        AdminToken(token.into())
    }

    /// Reads the token file, ignoring surrounding whitespace.
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let token = text.trim();
        if token.is_empty() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "admin token file is empty",
            ));
        }
        Ok(AdminToken(token.to_string()))
    }

    pub fn matches(&self, presented: &str) -> bool {
        bool::from(self.0.as_bytes().ct_eq(presented.as_bytes()))
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for AdminToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("AdminToken(..)")
    }
}

pub struct QuarantineLink {
    config: QuarantineConfig,
    state: RwLock<LinkState>,
    medium_alerts: Mutex<VecDeque<UnixSeconds>>,
    admin: AdminToken,
    store: SecureStore,
}

impl fmt::Debug for QuarantineLink {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("QuarantineLink")
            .field("config", &self.config)
            .field("state", &*self.state.read())
            .finish_non_exhaustive()
    }
}

impl QuarantineLink {
    pub fn new(config: QuarantineConfig, admin: AdminToken, store: SecureStore, now: UnixSeconds) -> Self {
        QuarantineLink {
            config,
            state: RwLock::new(LinkState {
                status: LinkStatus::Connected,
                since: now,
                cause: None,
            }),
            medium_alerts: Mutex::new(VecDeque::new()),
            admin,
            store,
        }
    }

    pub fn state(&self) -> LinkState {
        self.state.read().clone()
    }

    pub fn config(&self) -> &QuarantineConfig {
        &self.config
    }

    /// Applies the escalation policy to one alert and returns the
    /// resulting state.
    pub fn on_alert(&self, event: &AlertEvent, now: UnixSeconds) -> LinkState {
        if event.severity >= Severity::CRITICAL {
            self.sever(event.clone(), now);
        } else if event.severity == Severity::MEDIUM {
            let trip = {
                let mut q = self.medium_alerts.lock();
                q.push_back(now);
                let window = self.config.escalate_window_s;
                while q.front().is_some_and(|&t| t + window <= now) {
                    q.pop_front();
                }
                q.len() >= self.config.escalate_k
            };
            if trip {
                self.sever(event.clone(), now);
            }
        }
        self.state()
    }

    /// Idempotent; the first cause is kept.
    pub fn sever(&self, cause: AlertEvent, now: UnixSeconds) {
        let mut st = self.state.write();
        if st.status == LinkStatus::Connected {
            tracing::warn!(threat = %cause.threat, severity = %cause.severity, "severing store link");
            *st = LinkState {
                status: LinkStatus::Quarantined,
                since: now.max(st.since),
                cause: Some(cause),
            };
        }
    }

    /// Reconnects with the operator token. No-op when connected.
    pub fn restore(&self, token: &str, now: UnixSeconds) -> Result<(), LinkError> {
        if !self.admin.matches(token) {
            return Err(LinkError::Unauthorized);
        }
        let mut st = self.state.write();
        if st.status == LinkStatus::Quarantined {
            tracing::info!("store link restored by operator");
            *st = LinkState {
                status: LinkStatus::Connected,
                since: now.max(st.since),
                cause: None,
            };
            self.medium_alerts.lock().clear();
        }
        Ok(())
    }

    pub fn check_admin(&self, token: &str) -> Result<(), LinkError> {
        if self.admin.matches(token) {
            Ok(())
        } else {
            Err(LinkError::Unauthorized)
        }
    }

    /// Runs `op` against the store if the link is up.
    pub fn guarded_call<T, F>(&self, op: F) -> Result<T, LinkError>
    where
        F: FnOnce(&SecureStore) -> Result<T, StoreError>,
    {
        let st = self.state.read();
        if st.status == LinkStatus::Quarantined {
            return Err(LinkError::LinkSevered {
                since: st.since,
                cause: st.cause.clone().map(Box::new),
            });
        }
        Ok(op(&self.store)?)
    }

    /// Back to `Connected` with no escalation history.
    pub fn reset(&self, now: UnixSeconds) {
        let mut st = self.state.write();
        *st = LinkState {
            status: LinkStatus::Connected,
            since: now.max(st.since),
            cause: None,
        };
        self.medium_alerts.lock().clear();
    }
}
