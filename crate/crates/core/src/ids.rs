//! Rate-based intrusion detection and prevention.
//!
//! Every request that reaches the `ids-observe` stage is counted per source
//! address and globally over a sliding window. A source that exceeds the
//! per-address threshold is banned for `ban_s` seconds; a global excess is
//! treated as a distributed flood and escalated to severity 3, which the
//! quarantine link answers by severing the store channel.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use chrono::DateTime;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envelope::{ThreatClass, UnixSeconds, Verdict};

#[derive(Debug, Error)]
#[error("alert log write failed: {0}")]
pub struct LogWriteError(#[from] pub std::io::Error);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Severity(u8);

impl Severity {
    pub const LOW: Severity = Severity(1);
    pub const MEDIUM: Severity = Severity(2);
    /// Reserved for events that trigger quarantine.
    pub const CRITICAL: Severity = Severity(3);

    pub fn new(level: u8) -> Option<Self> {
        (1..=3).contains(&level).then_some(Severity(level))
    }

    pub fn level(self) -> u8 {
        self.0
    }

    /// Default severity for a denial of the given class.
    pub fn for_threat(class: ThreatClass) -> Self {
        match class {
            ThreatClass::Forgery | ThreatClass::Injection | ThreatClass::Rfi => Severity::CRITICAL,
            ThreatClass::Xss | ThreatClass::Lfi | ThreatClass::Replay | ThreatClass::RateFlood => Severity::MEDIUM,
            ThreatClass::UnknownService | ThreatClass::Expired => Severity::LOW,
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Proto {
    Tcp,
    Udp,
    Http,
}

impl fmt::Display for Proto {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Proto::Tcp => "TCP",
            Proto::Udp => "UDP",
            Proto::Http => "HTTP",
        })
    }
}

/// Endpoints of the observed exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Flow {
    pub src: SocketAddrV4,
    pub dst: SocketAddrV4,
    pub proto: Proto,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AlertEvent {
    /// Unix microseconds.
    pub timestamp_us: u64,
    pub src: SocketAddrV4,
    pub dst: SocketAddrV4,
    pub proto: Proto,
    pub threat: ThreatClass,
    pub severity: Severity,
}

pub const RECORD_SEPARATOR: &str = "*****";

/// Renders one alert record in the classic console layout:
///
/// ```text
/// 02/17-20:15:06.108591 192.168.204.1:138 -> 192.168.204.255:138
/// UDP CLASS:RateFlood SEV:2
/// *****
/// ```
pub fn format_alert(event: &AlertEvent) -> String {
    let ts = DateTime::from_timestamp_micros(event.timestamp_us as i64)
        .expect("u64 micros since epoch is within chrono range");
    format!(
        "{} {} -> {}\n{} CLASS:{} SEV:{}\n{RECORD_SEPARATOR}\n",
        ts.format("%m/%d-%H:%M:%S%.6f"),
        event.src,
        event.dst,
        event.proto,
        event.threat,
        event.severity,
    )
}

enum Sink {
    File { file: File, path: PathBuf },
    Memory(Vec<String>),
    Writer(Box<dyn Write + Send>),
}

/// Append-only alert log.
pub struct AlertLog {
    sink: Mutex<Sink>,
    records: AtomicU64,
}

impl fmt::Debug for AlertLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AlertLog").field("records", &self.records()).finish()
    }
}

impl AlertLog {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self::with_sink(Sink::File {
            file,
            path: path.to_path_buf(),
        }))
    }

    pub fn in_memory() -> Self {
        Self::with_sink(Sink::Memory(Vec::new()))
    }

    pub fn with_writer(writer: Box<dyn Write + Send>) -> Self {
        Self::with_sink(Sink::Writer(writer))
    }

    fn with_sink(sink: Sink) -> Self {
        AlertLog {
            sink: Mutex::new(sink),
            records: AtomicU64::new(0),
        }
    }

    pub fn append(&self, event: &AlertEvent) -> Result<(), LogWriteError> {
        let line = format_alert(event);
        let mut sink = self.sink.lock();
        match &mut *sink {
            Sink::File { file, .. } => {
                file.write_all(line.as_bytes())?;
                file.flush()?;
            }
            Sink::Memory(lines) => lines.push(line),
            Sink::Writer(w) => {
                w.write_all(line.as_bytes())?;
                w.flush()?;
            }
        }
        self.records.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }

    /// Records written since this log was opened.
    pub fn records(&self) -> u64 {
        self.records.load(Ordering::SeqCst)
    }

    /// Everything written so far (memory sinks, or re-read from file).
    pub fn contents(&self) -> String {
        match &*self.sink.lock() {
            Sink::File { path, .. } => std::fs::read_to_string(path).unwrap_or_default(),
            Sink::Memory(lines) => lines.concat(),
            Sink::Writer(_) => String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdsConfig {
    pub window_s: u64,
    pub threshold: usize,
    pub ban_s: u64,
    pub global_threshold: usize,
}

impl Default for IdsConfig {
    fn default() -> Self {
        IdsConfig {
            window_s: 10,
            threshold: 50,
            ban_s: 60,
            global_threshold: 500,
        }
    }
}

/// Sorted timestamps restricted to `(now - window, now]`.
#[derive(Debug, Default, Clone)]
struct Ring(VecDeque<UnixSeconds>);

impl Ring {
    fn insert(&mut self, t: UnixSeconds) {
        let at = self.0.partition_point(|&x| x <= t);
        self.0.insert(at, t);
    }

    fn prune(&mut self, now: UnixSeconds, window: u64) {
        while self.0.front().is_some_and(|&t| t + window <= now) {
            self.0.pop_front();
        }
    }

    fn count(&self, now: UnixSeconds, window: u64) -> usize {
        let lo = self.0.partition_point(|&t| t + window <= now);
        let hi = self.0.partition_point(|&t| t <= now);
        hi - lo
    }
}

/// Per-address and global sliding-window request counter.
#[derive(Debug, Clone)]
pub struct WindowCounter {
    window: u64,
    per_ip: HashMap<Ipv4Addr, Ring>,
    global: Ring,
    since_sweep: usize,
}

impl WindowCounter {
    pub fn new(window: u64) -> Self {
        assert!(window > 0, "window must be positive");
        WindowCounter {
            window,
            per_ip: HashMap::new(),
            global: Ring::default(),
            since_sweep: 0,
        }
    }

    /// Records one request and returns `(count for ip, global count)` in
    /// the window ending at `now`.
    pub fn record(&mut self, ip: Ipv4Addr, now: UnixSeconds) -> (usize, usize) {
        let ring = self.per_ip.entry(ip).or_default();
        ring.prune(now, self.window);
        ring.insert(now);
        let ip_count = ring.count(now, self.window);
        self.global.prune(now, self.window);
        self.global.insert(now);
        let global_count = self.global.count(now, self.window);

        self.since_sweep += 1;
        if self.since_sweep >= 4096 {
            self.since_sweep = 0;
            let w = self.window;
            self.per_ip.retain(|_, r| {
                r.prune(now, w);
                !r.0.is_empty()
            });
        }
        (ip_count, global_count)
    }

    pub fn count(&self, ip: Ipv4Addr, now: UnixSeconds) -> usize {
        self.per_ip.get(&ip).map_or(0, |r| r.count(now, self.window))
    }

    pub fn global_count(&self, now: UnixSeconds) -> usize {
        self.global.count(now, self.window)
    }
}

/// Banned addresses and their expiry.
#[derive(Debug, Clone, Default)]
pub struct BanList {
    bans: HashMap<Ipv4Addr, UnixSeconds>,
}

impl BanList {
    pub fn ban(&mut self, ip: Ipv4Addr, until: UnixSeconds) {
        let e = self.bans.entry(ip).or_insert(until);
        *e = (*e).max(until);
    }

    /// Half-open: banned while `now < expiry`.
    pub fn is_banned(&self, ip: Ipv4Addr, now: UnixSeconds) -> bool {
        self.bans.get(&ip).is_some_and(|&exp| now < exp)
    }

    pub fn active(&self, now: UnixSeconds) -> usize {
        self.bans.values().filter(|&&exp| now < exp).count()
    }
}

/// Result of counting one request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub verdict: Verdict,
    /// Severity of the alert this observation must raise, if any.
    pub alert: Option<Severity>,
}

#[derive(Debug)]
struct IdsState {
    counter: WindowCounter,
    bans: BanList,
}

/// Context for raising an alert on a denied request.
#[derive(Debug, Clone, Copy)]
pub struct DenyContext {
    pub flow: Flow,
    pub timestamp_us: u64,
    pub threat: ThreatClass,
    /// Overrides the class default (used for global-flood escalation).
    pub severity: Option<Severity>,
}

#[derive(Debug)]
pub struct Ids {
    config: IdsConfig,
    state: Mutex<IdsState>,
    log: AlertLog,
}

impl Ids {
    pub fn new(config: IdsConfig, log: AlertLog) -> Self {
        Ids {
            state: Mutex::new(IdsState {
                counter: WindowCounter::new(config.window_s),
                bans: BanList::default(),
            }),
            config,
            log,
        }
    }

    pub fn config(&self) -> &IdsConfig {
        &self.config
    }

    pub fn alert_log(&self) -> &AlertLog {
        &self.log
    }

    /// Counts the request and decides atomically.
    pub fn observe(&self, ip: Ipv4Addr, now: UnixSeconds) -> Observation {
        let mut st = self.state.lock();
        let (ip_count, global_count) = st.counter.record(ip, now);
        if ip_count > self.config.threshold {
            st.bans.ban(ip, now + self.config.ban_s);
            return Observation {
                verdict: Verdict::deny(
                    ThreatClass::RateFlood,
                    format!("{ip_count} requests from {ip} within {}s", self.config.window_s),
                ),
                alert: Some(Severity::MEDIUM),
            };
        }
        if global_count > self.config.global_threshold {
            return Observation {
                verdict: Verdict::deny(
                    ThreatClass::RateFlood,
                    format!(
                        "{global_count} requests from all sources within {}s",
                        self.config.window_s
                    ),
                ),
                alert: Some(Severity::CRITICAL),
            };
        }
        Observation {
            verdict: Verdict::allow(),
            alert: None,
        }
    }

    pub fn is_banned(&self, ip: Ipv4Addr, now: UnixSeconds) -> bool {
        self.state.lock().bans.is_banned(ip, now)
    }

    pub fn ban_count(&self, now: UnixSeconds) -> usize {
        self.state.lock().bans.active(now)
    }

    pub fn count(&self, ip: Ipv4Addr, now: UnixSeconds) -> usize {
        self.state.lock().counter.count(ip, now)
    }

    /// Builds the alert for a denial and appends it to the log.
    pub fn report(&self, ctx: &DenyContext) -> Result<AlertEvent, LogWriteError> {
        let event = AlertEvent {
            timestamp_us: ctx.timestamp_us,
            src: ctx.flow.src,
            dst: ctx.flow.dst,
            proto: ctx.flow.proto,
            threat: ctx.threat,
            severity: ctx.severity.unwrap_or_else(|| Severity::for_threat(ctx.threat)),
        };
        self.log.append(&event)?;
        Ok(event)
    }

    /// Clears counters and bans; the alert log is left untouched.
    pub fn reset(&self) {
        let mut st = self.state.lock();
        st.counter = WindowCounter::new(self.config.window_s);
        st.bans = BanList::default();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn ids(threshold: usize, global: usize) -> Ids {
        Ids::new(
            IdsConfig {
                window_s: 10,
                threshold,
                ban_s: 60,
                global_threshold: global,
            },
            AlertLog::in_memory(),
        )
    }

    fn micros(y: i32, mo: u32, d: u32, h: u32, mi: u32, s: u32, us: u32) -> u64 {
        NaiveDate::from_ymd_opt(y, mo, d)
            .unwrap()
            .and_hms_micro_opt(h, mi, s, us)
            .unwrap()
            .and_utc()
            .timestamp_micros() as u64
    }

    fn event(ts: u64) -> AlertEvent {
        AlertEvent {
            timestamp_us: ts,
            src: "192.168.204.1:138".parse().unwrap(),
            dst: "192.168.204.255:138".parse().unwrap(),
            proto: Proto::Udp,
            threat: ThreatClass::RateFlood,
            severity: Severity::MEDIUM,
        }
    }

    #[test]
    fn alert_layout_matches_console_example() {
        let line = format_alert(&event(micros(2013, 2, 17, 20, 15, 6, 108_591)));
        let mut lines = line.lines();
        assert_eq!(
            lines.next(),
            Some("02/17-20:15:06.108591 192.168.204.1:138 -> 192.168.204.255:138")
        );
        assert_eq!(lines.next(), Some("UDP CLASS:RateFlood SEV:2"));
        assert_eq!(lines.next(), Some("*****"));
        assert_eq!(lines.next(), None);
    }

    #[test]
    fn alert_midnight_is_zero_padded() {
        let line = format_alert(&event(micros(2014, 1, 1, 0, 0, 0, 0)));
        assert!(line.starts_with("01/01-00:00:00.000000 "), "{line}");
    }

    #[test]
    fn two_events_two_records() {
        let log = AlertLog::in_memory();
        log.append(&event(0)).unwrap();
        log.append(&event(1)).unwrap();
        let text = log.contents();
        assert_eq!(text.lines().filter(|l| *l == RECORD_SEPARATOR).count(), 2);
        assert_eq!(log.records(), 2);
    }

    #[test]
    fn strict_exceed_bans() {
        let ids = ids(50, 500);
        let ip = Ipv4Addr::new(10, 0, 0, 9);
        for i in 0..50 {
            assert!(ids.observe(ip, 1000 + i / 10).verdict.is_allow(), "request {}", i + 1);
        }
        let o = ids.observe(ip, 1004);
        assert_eq!(o.verdict.threat_class(), Some(ThreatClass::RateFlood));
        assert_eq!(o.alert, Some(Severity::MEDIUM));
        assert!(ids.is_banned(ip, 1004));
        assert!(ids.is_banned(ip, 1004 + 59));
        assert!(!ids.is_banned(ip, 1004 + 60));
        assert!(!ids.is_banned(Ipv4Addr::new(1, 2, 3, 4), 1004));
    }

    #[test]
    fn distinct_sources_below_global_threshold() {
        let ids = ids(50, 500);
        for i in 0..51u32 {
            let o = ids.observe(Ipv4Addr::from(0x0a00_0000 + i), 5);
            assert!(o.verdict.is_allow());
            assert_eq!(o.alert, None);
        }
        assert_eq!(ids.alert_log().records(), 0);
    }

    #[test]
    fn global_flood_escalates() {
        let ids = ids(50, 500);
        for i in 0..500u32 {
            assert!(ids.observe(Ipv4Addr::from(0x0a00_0000 + i), 5).verdict.is_allow());
        }
        let o = ids.observe(Ipv4Addr::from(0x0b00_0000), 5);
        assert!(o.verdict.is_deny());
        assert_eq!(o.alert, Some(Severity::CRITICAL));
        assert_eq!(ids.ban_count(5), 0);
    }

    #[test]
    fn report_maps_severity() {
        let ids = ids(50, 500);
        let flow = Flow {
            src: "10.0.0.5:40000".parse().unwrap(),
            dst: "10.0.0.1:8080".parse().unwrap(),
            proto: Proto::Http,
        };
        let sev = |t| {
            ids.report(&DenyContext {
                flow,
                timestamp_us: 0,
                threat: t,
                severity: None,
            })
            .unwrap()
            .severity
            .level()
        };
        assert_eq!(sev(ThreatClass::Forgery), 3);
        assert_eq!(sev(ThreatClass::Injection), 3);
        assert_eq!(sev(ThreatClass::Rfi), 3);
        assert_eq!(sev(ThreatClass::Xss), 2);
        assert_eq!(sev(ThreatClass::UnknownService), 1);
        assert_eq!(ids.alert_log().records(), 5);
        assert_eq!(ids.ban_count(0), 0);
    }

    #[test]
    fn log_write_failure_is_surfaced() {
        struct Broken;
        impl Write for Broken {
            fn write(&mut self, _: &[u8]) -> std::io::Result<usize> {
                Err(std::io::Error::other("disk full"))
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        let ids = Ids::new(IdsConfig::default(), AlertLog::with_writer(Box::new(Broken)));
        let flow = Flow {
            src: "10.0.0.5:1".parse().unwrap(),
            dst: "10.0.0.1:2".parse().unwrap(),
            proto: Proto::Http,
        };
        let r = ids.report(&DenyContext {
            flow,
            timestamp_us: 0,
            threat: ThreatClass::Xss,
            severity: None,
        });
        assert!(r.is_err());
        assert_eq!(ids.alert_log().records(), 0);
    }

    /// Scalar reference: counts timestamps in (now - window, now] by scanning
    /// the whole trace prefix.
    fn brute_count(trace: &[(u8, u64)], upto: usize, ip: u8, now: u64, window: u64) -> usize {
        trace[..=upto]
            .iter()
            .filter(|&&(i, t)| i == ip && t <= now && t + window > now)
            .count()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn prop_window_matches_brute_force(
            gaps in proptest::collection::vec((0u8..4, 0u64..4), 1..200),
            window in 1u64..15,
        ) {
            let mut t = 0;
            let trace: Vec<(u8, u64)> = gaps.iter().map(|&(ip, g)| { t += g; (ip, t) }).collect();
            let mut wc = WindowCounter::new(window);
            for (k, &(ip, now)) in trace.iter().enumerate() {
                let (c, _) = wc.record(Ipv4Addr::new(10, 0, 0, ip), now);
                prop_assert_eq!(c, brute_count(&trace, k, ip, now, window));
                for other in 0..4u8 {
                    prop_assert_eq!(
                        wc.count(Ipv4Addr::new(10, 0, 0, other), now),
                        brute_count(&trace, k, other, now, window)
                    );
                }
            }
        }

        #[test]
        fn prop_format_alert_injective(
            a in (any::<u32>(), 0u64..1_000_000, any::<u16>(), any::<u16>(), 0usize..9, 1u8..4),
            b in (any::<u32>(), 0u64..1_000_000, any::<u16>(), any::<u16>(), 0usize..9, 1u8..4),
        ) {
            // timestamps restricted to one calendar year; the layout omits the year
            let base = micros(2014, 1, 1, 0, 0, 0, 0);
            let mk = |(secs, us, sp, dp, cls, sev): (u32, u64, u16, u16, usize, u8)| AlertEvent {
                timestamp_us: base + (secs as u64 % 31_000_000) * 1_000_000 + us,
                src: SocketAddrV4::new(Ipv4Addr::new(10, 0, 0, 1), sp),
                dst: SocketAddrV4::new(Ipv4Addr::new(10, 0, 0, 2), dp),
                proto: Proto::Http,
                threat: ThreatClass::ALL[cls],
                severity: Severity::new(sev).unwrap(),
            };
            let (ea, eb) = (mk(a), mk(b));
            prop_assume!(ea != eb);
            prop_assert_ne!(format_alert(&ea), format_alert(&eb));
        }
    }
}
