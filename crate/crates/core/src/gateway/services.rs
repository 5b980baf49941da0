//! Business service components and the built-in toy services.

use std::collections::BTreeMap;
use std::fmt;

use parking_lot::Mutex;
use thiserror::Error;

use crate::quarantine::{LinkError, QuarantineLink};
use crate::store::{DataKey, StoreError};

#[derive(Debug, Error)]
pub enum HandlerError {
    /// Bad parameters or unknown action; reported at the `service` stage.
    #[error("{0}")]
    BadRequest(String),
    /// Anything from the store channel, including a severed link.
    #[error(transparent)]
    Store(#[from] LinkError),
}

/// Store view confined to `svc/<service>/`, plus read-only grants.
pub struct ScopedStore<'a> {
    service: &'a str,
    read_grants: &'a [&'static str],
    link: &'a QuarantineLink,
    key: &'a DataKey,
    touched: bool,
}

impl fmt::Debug for ScopedStore<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScopedStore")
            .field("service", &self.service)
            .finish_non_exhaustive()
    }
}

impl<'a> ScopedStore<'a> {
    pub(crate) fn new(
        service: &'a str,
        read_grants: &'a [&'static str],
        link: &'a QuarantineLink,
        key: &'a DataKey,
    ) -> Self {
        ScopedStore {
            service,
            read_grants,
            link,
            key,
            touched: false,
        }
    }

    fn full_key(service: &str, key: &str) -> String {
        format!("svc/{service}/{key}")
    }

    pub fn touched(&self) -> bool {
        self.touched
    }

    pub fn get(&mut self, key: &str) -> Result<Option<Vec<u8>>, HandlerError> {
        let full = Self::full_key(self.service, key);
        self.read(&full)
    }

    /// Reads from another service's namespace; needs a grant.
    pub fn get_from(&mut self, service: &str, key: &str) -> Result<Option<Vec<u8>>, HandlerError> {
        if service != self.service && !self.read_grants.contains(&service) {
            return Err(HandlerError::BadRequest(format!(
                "{} may not read records of {service}",
                self.service
            )));
        }
        let full = Self::full_key(service, key);
        self.read(&full)
    }

    fn read(&mut self, full: &str) -> Result<Option<Vec<u8>>, HandlerError> {
        self.touched = true;
        let key = self.key;
        match self.link.guarded_call(|s| s.get(full, key)) {
            Ok(v) => Ok(Some(v)),
            Err(LinkError::Store(StoreError::NotFound)) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn put(&mut self, key: &str, value: &[u8]) -> Result<(), HandlerError> {
        self.touched = true;
        let full = Self::full_key(self.service, key);
        let data_key = self.key;
        Ok(self.link.guarded_call(|s| s.put(&full, value, data_key))?)
    }
}

/// Per-call input for a component.
#[derive(Debug)]
pub struct ServiceCall<'a> {
    pub client_id: &'a str,
    pub action: &'a str,
    pub payload: &'a str,
    pub store: ScopedStore<'a>,
}

impl ServiceCall<'_> {
    /// `key=value` pairs separated by `&` or whitespace.
    pub fn params(&self) -> BTreeMap<&str, &str> {
        self.payload
            .split(|c: char| c == '&' || c.is_whitespace())
            .filter_map(|kv| kv.split_once('='))
            .collect()
    }

    pub fn param_u64(&self, name: &str) -> Result<u64, HandlerError> {
        let params = self.params();
        let raw = params
            .get(name)
            .ok_or_else(|| HandlerError::BadRequest(format!("missing parameter `{name}`")))?;
        raw.parse()
            .map_err(|_| HandlerError::BadRequest(format!("parameter `{name}` is not a non-negative integer")))
    }
}

/// A callable service unit reachable only through the pipeline.
pub trait BusinessServiceComponent: Send + Sync {
    fn name(&self) -> &str;
    fn actions(&self) -> Vec<String>;
    /// Other services' namespaces this component may read.
    fn read_grants(&self) -> &'static [&'static str] {
        &[]
    }
    fn invoke(&self, call: &mut ServiceCall<'_>) -> Result<String, HandlerError>;
}

fn unknown_action(service: &str, action: &str) -> HandlerError {
    HandlerError::BadRequest(format!("{service} has no action {action}"))
}

/// Per-client balances.
#[derive(Debug, Default)]
pub struct Banking {
    // read-modify-write on balances must not interleave
    lock: Mutex<()>,
}

fn read_u64(bytes: Option<Vec<u8>>) -> Result<u64, HandlerError> {
    match bytes {
        None => Ok(0),
        Some(b) => std::str::from_utf8(&b)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| HandlerError::BadRequest("stored balance unreadable".into())),
    }
}

impl BusinessServiceComponent for Banking {
    fn name(&self) -> &str {
        "banking"
    }

    fn actions(&self) -> Vec<String> {
        vec!["deposit".into(), "balance".into()]
    }

    fn invoke(&self, call: &mut ServiceCall<'_>) -> Result<String, HandlerError> {
        let record = format!("balance/{}", call.client_id);
        match call.action {
            "deposit" => {
                let amount = call.param_u64("amount")?;
                let _g = self.lock.lock();
                let current = read_u64(call.store.get(&record)?)?;
                let next = current
                    .checked_add(amount)
                    .ok_or_else(|| HandlerError::BadRequest("balance overflow".into()))?;
                call.store.put(&record, next.to_string().as_bytes())?;
                Ok(next.to_string())
            }
            "balance" => Ok(read_u64(call.store.get(&record)?)?.to_string()),
            other => Err(unknown_action("banking", other)),
        }
    }
}

/// Order intake. Orders are numbered from 1.
#[derive(Debug, Default)]
pub struct OnlineTransaction {
    lock: Mutex<()>,
}

impl BusinessServiceComponent for OnlineTransaction {
    fn name(&self) -> &str {
        "online_transaction"
    }

    fn actions(&self) -> Vec<String> {
        vec!["submit".into()]
    }

    fn invoke(&self, call: &mut ServiceCall<'_>) -> Result<String, HandlerError> {
        if call.action != "submit" {
            return Err(unknown_action("online_transaction", call.action));
        }
        let _g = self.lock.lock();
        let id = read_u64(call.store.get("next_id")?)?.max(1);
        let mut record = Vec::with_capacity(call.client_id.len() + 1 + call.payload.len());
        record.extend_from_slice(call.client_id.as_bytes());
        record.push(b'\n');
        record.extend_from_slice(call.payload.as_bytes());
        call.store.put(&format!("orders/{id}"), &record)?;
        call.store.put("next_id", (id + 1).to_string().as_bytes())?;
        Ok(id.to_string())
    }
}

/// Read-only view of the caller's own orders.
#[derive(Debug, Default)]
pub struct TransactionInfo;

impl BusinessServiceComponent for TransactionInfo {
    fn name(&self) -> &str {
        "transaction_info"
    }

    fn actions(&self) -> Vec<String> {
        vec!["get".into()]
    }

    fn read_grants(&self) -> &'static [&'static str] {
        &["online_transaction"]
    }

    fn invoke(&self, call: &mut ServiceCall<'_>) -> Result<String, HandlerError> {
        if call.action != "get" {
            return Err(unknown_action("transaction_info", call.action));
        }
        let id = call.param_u64("id")?;
        let not_found = || HandlerError::BadRequest(format!("no order {id}"));
        let record = call
            .store
            .get_from("online_transaction", &format!("orders/{id}"))?
            .ok_or_else(not_found)?;
        let text = String::from_utf8(record).map_err(|_| not_found())?;
        match text.split_once('\n') {
            Some((owner, order)) if owner == call.client_id => Ok(order.to_string()),
            _ => Err(not_found()),
        }
    }
}

/// Premium is 5% of the declared value, rounded half up. No store access.
#[derive(Debug, Default)]
pub struct Insurance;

pub fn premium(declared_value: u64) -> u64 {
    ((declared_value as u128 * 5 + 50) / 100) as u64
}

impl BusinessServiceComponent for Insurance {
    fn name(&self) -> &str {
        "insurance"
    }

    fn actions(&self) -> Vec<String> {
        vec!["quote".into()]
    }

    fn invoke(&self, call: &mut ServiceCall<'_>) -> Result<String, HandlerError> {
        if call.action != "quote" {
            return Err(unknown_action("insurance", call.action));
        }
        Ok(premium(call.param_u64("declared_value")?).to_string())
    }
}
