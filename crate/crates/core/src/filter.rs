//! Input sanitization: the service registry check and the pattern rule
//! plug-in.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use percent_encoding::percent_decode_str;
use regex::{Regex, RegexBuilder};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::envelope::{ServiceRequest, ThreatClass, Verdict};

/// Ruleset shipped with the gateway.
pub const DEFAULT_RULES: &str = include_str!("../assets/default.rules");
/// Registry file listing the built-in business services.
pub const DEFAULT_REGISTRY: &str = include_str!("../assets/default.registry");

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {reason}")]
pub struct RuleParseError {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("{path}: {source}")]
    Rules { path: String, source: RuleParseError },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Threat classes a payload rule may carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RuleClass {
    Xss,
    Rfi,
    Lfi,
    Injection,
}

impl RuleClass {
    pub fn threat(self) -> ThreatClass {
        match self {
            RuleClass::Xss => ThreatClass::Xss,
            RuleClass::Rfi => ThreatClass::Rfi,
            RuleClass::Lfi => ThreatClass::Lfi,
            RuleClass::Injection => ThreatClass::Injection,
        }
    }
}

impl FromStr for RuleClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "XSS" => Ok(RuleClass::Xss),
            "RFI" => Ok(RuleClass::Rfi),
            "LFI" => Ok(RuleClass::Lfi),
            "INJECTION" => Ok(RuleClass::Injection),
            other => Err(format!(
                "unknown threat class `{other}` (expected XSS, RFI, LFI or INJECTION)"
            )),
        }
    }
}

impl fmt::Display for RuleClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RuleClass::Xss => "XSS",
            RuleClass::Rfi => "RFI",
            RuleClass::Lfi => "LFI",
            RuleClass::Injection => "INJECTION",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Rule {
    id: String,
    class: RuleClass,
    severity: u8,
    pattern: String,
    regex: Regex,
}

impl Rule {
    pub fn new(id: impl Into<String>, class: RuleClass, severity: u8, pattern: &str) -> Result<Self, String> {
        if !(1..=3).contains(&severity) {
            return Err(format!("severity {severity} outside 1-3"));
        }
        let regex = RegexBuilder::new(pattern)
            .case_insensitive(true)
            .build()
            .map_err(|e| format!("invalid pattern: {e}"))?;
        Ok(Rule {
            id: id.into(),
            class,
            severity,
            pattern: pattern.to_string(),
            regex,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }
    pub fn class(&self) -> RuleClass {
        self.class
    }
    pub fn severity(&self) -> u8 {
        self.severity
    }
    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn matches(&self, text: &str) -> bool {
        self.regex.is_match(text)
    }
}

/// Ordered rules; ids are unique.
#[derive(Debug, Clone, Default)]
pub struct RuleSet {
    rules: Vec<Rule>,
    version: String,
}

impl RuleSet {
    pub fn empty() -> Self {
        RuleSet {
            rules: Vec::new(),
            version: "empty".into(),
        }
    }

    pub fn from_rules(rules: Vec<Rule>, version: impl Into<String>) -> Result<Self, String> {
        let mut ids = HashSet::new();
        for r in &rules {
            if !ids.insert(r.id.clone()) {
                return Err(format!("duplicate rule id `{}`", r.id));
            }
        }
        Ok(RuleSet {
            rules,
            version: version.into(),
        })
    }

    /// Parses the line-oriented rule format:
    /// `RULE <id> <XSS|RFI|LFI|INJECTION> <severity 1-3> <pattern...>`.
    /// Version is a digest of the text.
    pub fn parse(text: &str) -> Result<Self, RuleParseError> {
        let mut rules = Vec::new();
        let mut ids = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |reason: String| RuleParseError { line: line_no, reason };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut rest = line;
            let mut next_token = || {
                let t = rest.trim_start();
                let end = t.find(char::is_whitespace).unwrap_or(t.len());
                let (tok, tail) = t.split_at(end);
                rest = tail;
                tok
            };
            let keyword = next_token();
            if keyword != "RULE" {
                return Err(err(format!("expected `RULE`, found `{keyword}`")));
            }
            let id = next_token();
            let class = next_token();
            let severity = next_token();
            let pattern = rest.trim();
            if id.is_empty() || class.is_empty() || severity.is_empty() || pattern.is_empty() {
                return Err(err("expected `RULE <id> <class> <severity> <pattern>`".into()));
            }
            let class: RuleClass = class.parse().map_err(err)?;
            let severity: u8 = severity
                .parse()
                .map_err(|_| err(format!("severity `{severity}` is not a number")))?;
            if !ids.insert(id.to_string()) {
                return Err(err(format!("duplicate rule id `{id}`")));
            }
            rules.push(Rule::new(id, class, severity, pattern).map_err(err)?);
        }
        let digest = Sha256::digest(text.as_bytes());
        Ok(RuleSet {
            rules,
            version: hex::encode(&digest[..8]),
        })
    }

    pub fn default_rules() -> Self {
        Self::parse(DEFAULT_RULES).expect("shipped ruleset parses")
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }
    pub fn version(&self) -> &str {
        &self.version
    }
    pub fn len(&self) -> usize {
        self.rules.len()
    }
    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

pub fn load_rules(path: &Path) -> Result<RuleSet, FilterError> {
    let text = std::fs::read_to_string(path).map_err(|source| FilterError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let set = RuleSet::parse(&text).map_err(|source| FilterError::Rules {
        path: path.display().to_string(),
        source,
    })?;
    if set.is_empty() {
        tracing::warn!(path = %path.display(), "ruleset is empty; only the registry check is active");
    }
    Ok(set)
}

pub(crate) fn normalize(name: &str) -> String {
    name.trim().to_lowercase()
}

/// Service name -> permitted actions. Names are matched after trimming and
/// lowercasing.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ServiceRegistry {
    services: BTreeMap<String, BTreeSet<String>>,
}

impl ServiceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds (or extends) a service.
    pub fn insert<I, S>(&mut self, service: &str, actions: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let entry = self.services.entry(normalize(service)).or_default();
        entry.extend(actions.into_iter().map(|a| normalize(a.as_ref())));
    }

    pub fn contains_service(&self, service: &str) -> bool {
        self.services.contains_key(&normalize(service))
    }

    pub fn allows(&self, service: &str, action: &str) -> bool {
        self.services
            .get(&normalize(service))
            .is_some_and(|acts| acts.contains(&normalize(action)))
    }

    pub fn len(&self) -> usize {
        self.services.len()
    }

    pub fn is_empty(&self) -> bool {
        self.services.is_empty()
    }

    pub fn services(&self) -> impl Iterator<Item = (&str, impl Iterator<Item = &str>)> {
        self.services
            .iter()
            .map(|(s, a)| (s.as_str(), a.iter().map(String::as_str)))
    }

    /// `SERVICE <name> <action> [<action>...]` per line.
    pub fn parse(text: &str) -> Result<Self, RuleParseError> {
        let mut reg = ServiceRegistry::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut tokens = line.split_whitespace();
            let err = |reason: &str| RuleParseError {
                line: i + 1,
                reason: reason.to_string(),
            };
            if tokens.next() != Some("SERVICE") {
                return Err(err("expected `SERVICE <name> <action>...`"));
            }
            let name = tokens.next().ok_or_else(|| err("missing service name"))?;
            let actions: Vec<&str> = tokens.collect();
            if actions.is_empty() {
                return Err(err("service lists no actions"));
            }
            reg.insert(name, actions);
        }
        Ok(reg)
    }

    pub fn load(path: &Path) -> Result<Self, FilterError> {
        let text = std::fs::read_to_string(path).map_err(|source| FilterError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text).map_err(|source| FilterError::Rules {
            path: path.display().to_string(),
            source,
        })
    }
}

pub fn check_registry(request: &ServiceRequest, registry: &ServiceRegistry) -> Verdict {
    if !registry.contains_service(request.service()) {
        return Verdict::deny(
            ThreatClass::UnknownService,
            format!("no service `{}`", request.service()),
        );
    }
    if !registry.allows(request.service(), request.action()) {
        return Verdict::deny(
            ThreatClass::UnknownService,
            format!("service `{}` has no action `{}`", request.service(), request.action()),
        );
    }
    Verdict::allow()
}

/// One level of percent-decoding, lossy on invalid UTF-8.
fn decode_once(text: &str) -> String {
    percent_decode_str(text).decode_utf8_lossy().into_owned()
}

/// First rule (in file order) matching the action or payload.
pub fn first_match<'a>(action: &str, payload: &str, rules: &'a RuleSet) -> Option<&'a Rule> {
    let action = decode_once(action);
    let payload = decode_once(payload);
    rules.rules.iter().find(|r| r.matches(&payload) || r.matches(&action))
}

pub fn match_payload(request: &ServiceRequest, rules: &RuleSet) -> Verdict {
    match first_match(request.action(), request.payload(), rules) {
        Some(rule) => Verdict::deny(rule.class.threat(), format!("rule {} matched", rule.id)),
        None => Verdict::allow(),
    }
}

/// Registry check, then payload rules; the first denial wins.
pub fn sanitize(request: &ServiceRequest, registry: &ServiceRegistry, rules: &RuleSet) -> Verdict {
    let v = check_registry(request, registry);
    if v.is_deny() {
        return v;
    }
    match_payload(request, rules)
}
