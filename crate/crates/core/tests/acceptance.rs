//! Acceptance gate. Each criterion prints one PASS/FAIL line; the test
//! fails if any criterion fails.

use std::collections::{BTreeSet, HashSet};
use std::io::Write as _;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;

use hmac::{Hmac, Mac};
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::distributions::Alphanumeric;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use soaguard::envelope::{canonical_auth_string, encode, Nonce, ResponseStatus, ServiceRequest, Stage};
use soaguard::filter::{sanitize, RuleSet, ServiceRegistry, DEFAULT_REGISTRY};
use soaguard::gateway::{provision, Gateway, GatewayConfig, PipelineTrace, ProvisionOptions, StageOutcome};
use soaguard::ids::{format_alert, AlertEvent, AlertLog, Ids, IdsConfig, Proto, Severity, WindowCounter};
use soaguard::ims::{AuthCertificate, CredentialTable, Ims, ImsKey};
use soaguard::quarantine::LinkStatus;
use soaguard::store::{open as open_record, scan_plaintext, DataKey, FileBackend, KeyId, StoreError};
use soaguard::{ServiceResponse, ThreatClass};

const T0: u64 = 1_700_000_000;
const US: u64 = 1_000_000;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// Provisioned single-process gateway driven with a simulated clock.
struct Rig {
    _dir: tempfile::TempDir,
    gw: Gateway,
    cfg: GatewayConfig,
    cert: AuthCertificate,
    cert_at: u64,
    now_us: u64,
    sent: u32,
}

impl Rig {
    fn new(extra: &[(&str, &str)]) -> Rig {
        let dir = tempfile::tempdir().unwrap();
        let opts = ProvisionOptions {
            admin_token: Some("acceptance-admin".into()),
            extra: extra.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            ..Default::default()
        };
        let path = provision(dir.path(), &opts).unwrap();
        let cfg = GatewayConfig::load(&path).unwrap();
        let gw = Gateway::from_config(&cfg, T0).unwrap();
        let cert = gw
            .authenticate("alice", "alice-password", Ipv4Addr::LOCALHOST, T0)
            .unwrap();
        Rig {
            _dir: dir,
            gw,
            cfg,
            cert,
            cert_at: T0,
            now_us: T0 * US,
            sent: 0,
        }
    }

    fn now(&self) -> u64 {
        self.now_us / US
    }

    /// 20 requests per second spread over many addresses keeps the rate
    /// detector out of the way.
    fn tick(&mut self) -> SocketAddrV4 {
        self.now_us += 50_000;
        self.sent += 1;
        if self.now() - self.cert_at > 200 {
            self.cert = self
                .gw
                .authenticate("alice", "alice-password", Ipv4Addr::LOCALHOST, self.now())
                .unwrap();
            self.cert_at = self.now();
        }
        let n = self.sent;
        SocketAddrV4::new(Ipv4Addr::new(10, 20, (n / 250 % 250) as u8, (n % 250 + 1) as u8), 40000)
    }

    fn envelope(&self, service: &str, action: &str, payload: &str) -> (ServiceRequest, Vec<u8>) {
        let req = ServiceRequest::new(
            "alice",
            Ipv4Addr::new(10, 0, 0, 1),
            service,
            action,
            payload,
            Some(self.cert.clone()),
            Nonce::random(),
            self.now(),
        )
        .unwrap();
        let bytes = encode(&req);
        (req, bytes)
    }

    fn send(&mut self, service: &str, action: &str, payload: &str) -> (ServiceResponse, PipelineTrace) {
        let src = self.tick();
        let (_, bytes) = self.envelope(service, action, payload);
        self.gw.handle_traced(&bytes, src, self.now_us)
    }
}

fn corpus(name: &str) -> Vec<String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus").join(name);
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

fn file_digest(path: &Path) -> [u8; 32] {
    Sha256::digest(std::fs::read(path).unwrap()).into()
}

fn tag_with(key: &[u8], cert: &AuthCertificate) -> [u8; 32] {
    let mut mac = Hmac::<Sha256>::new_from_slice(key).unwrap();
    mac.update(&canonical_auth_string(
        &cert.subject,
        cert.issued_at,
        cert.expires_at,
        &cert.cert_id,
    ));
    mac.finalize().into_bytes().into()
}

fn forgery_rejection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let key = ImsKey::from_bytes(rng.gen());
    let mut creds = CredentialTable::new();
    creds.add_user("alice", "pw");
    creds.add_user("bob", "pw");
    let ims = Ims::new(key, creds, 300);
    let issued: Vec<AuthCertificate> = (0..8)
        .map(|i| {
            ims.authenticate(if i % 2 == 0 { "alice" } else { "bob" }, "pw", T0 + i)
                .unwrap()
        })
        .collect();
    let genuine: HashSet<String> = issued.iter().map(AuthCertificate::to_token).collect();
    let now = T0 + 10;
    for c in &issued {
        ensure!(
            ims.verify_certificate(c, now).is_allow(),
            "genuine certificate rejected"
        );
    }

    let mut accepted = 0;
    let mut trials = 0;
    while trials < 10_000 {
        let base = &issued[rng.gen_range(0..issued.len())];
        let mut c = base.clone();
        match rng.gen_range(0..7) {
            0 => c.subject = ["bob", "alice", "admin", "alicE", "alice "][rng.gen_range(0..5)].to_string(),
            1 => c.issued_at = c.issued_at.wrapping_sub(rng.gen_range(1..1000)),
            2 => c.expires_at += rng.gen_range(1..100_000),
            3 => c.cert_id[rng.gen_range(0..16)] ^= rng.gen_range(1..=255u8),
            4 => c.tag[rng.gen_range(0..32)] ^= rng.gen_range(1..=255u8),
            5 => c.tag = rng.gen(),
            _ => {
                // attacker mints a certificate under a key of their own
                c.subject = "mallory".into();
                c.cert_id = rng.gen();
                c.tag = tag_with(&rng.gen::<[u8; 32]>(), &c);
            }
        }
        if genuine.contains(&c.to_token()) {
            continue;
        }
        trials += 1;
        if ims.verify_certificate(&c, now).is_allow() {
            accepted += 1;
        }
    }

    let base = &issued[0];
    let hex = hex::encode(base.tag);
    let mut single = 0;
    for pos in 0..64 {
        for digit in "0123456789abcdef".chars() {
            if hex.as_bytes()[pos] == digit as u8 {
                continue;
            }
            let mut h = hex.clone().into_bytes();
            h[pos] = digit as u8;
            let mut c = base.clone();
            hex::decode_to_slice(&h, &mut c.tag).unwrap();
            if ims.verify_certificate(&c, now).is_allow() {
                single += 1;
            }
        }
    }
    ensure!(accepted == 0, "{accepted} of 10000 tampered certificates accepted");
    ensure!(single == 0, "{single} single-hex tag mutations accepted");
    Ok("0/10000 tamperings and 0/960 tag-digit mutations accepted".into())
}

fn replay_rejection() -> Outcome {
    let mut rig = Rig::new(&[]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // originals stay off the store: replay denials escalate to a severed
    // link after a handful of alerts, which must not mask the verdict
    let mut accepted = 0;
    for i in 0..1000 {
        let src = rig.tick();
        let quote = format!("declared_value={}", rng.gen_range(0..100_000));
        let (req, bytes) = rig.envelope("insurance", "quote", &quote);
        let first = rig.gw.handle(&bytes, src, rig.now_us);
        ensure!(
            first.status == ResponseStatus::Ok,
            "trial {i}: original refused: {first:?}"
        );

        // same (cert_id, nonce); either the identical bytes or an edited body
        let replay = if rng.gen_bool(0.5) {
            bytes
        } else {
            let edited = ServiceRequest::new(
                req.client_id(),
                req.source_ip(),
                "insurance",
                "quote",
                format!("declared_value={}", rng.gen_range(0..10_000)),
                req.certificate().cloned(),
                req.nonce(),
                req.timestamp(),
            )
            .unwrap();
            encode(&edited)
        };
        let delay = rng.gen_range(0..2 * US);
        let replay_src = SocketAddrV4::new(Ipv4Addr::new(172, 16, rng.gen(), rng.gen()), rng.gen());
        let r = rig.gw.handle(&replay, replay_src, rig.now_us + delay);
        if r.status == ResponseStatus::Ok {
            accepted += 1;
        } else {
            ensure!(
                r.stage == Some(Stage::Replay) && r.threat == Some(ThreatClass::Replay),
                "trial {i}: replay denied for the wrong reason: {r:?}"
            );
        }
    }
    ensure!(accepted == 0, "{accepted} of 1000 replays accepted");
    Ok("1000/1000 replays denied at replay".into())
}

fn sanitization() -> Outcome {
    let mut rig = Rig::new(&[]);
    let sets = [
        ("xss.txt", ThreatClass::Xss, 30),
        ("lfi.txt", ThreatClass::Lfi, 20),
        ("rfi.txt", ThreatClass::Rfi, 20),
        ("injection.txt", ThreatClass::Injection, 20),
    ];
    let mut total = 0;
    for (file, class, min) in sets {
        let lines = corpus(file);
        ensure!(lines.len() >= min, "{file} has {} payloads, need {min}", lines.len());
        for p in &lines {
            let (r, _) = rig.send("online_transaction", "submit", p);
            ensure!(
                r.status == ResponseStatus::Denied && r.stage == Some(Stage::Sanitize) && r.threat == Some(class),
                "{file}: {p:?} -> {r:?}"
            );
            total += 1;
        }
    }
    // fresh gateway: the attack run above has quarantined the store link
    let mut rig = Rig::new(&[]);
    let benign = corpus("benign.txt");
    ensure!(benign.len() == 200, "benign corpus has {} lines", benign.len());
    let mut denied = 0;
    for p in &benign {
        let (r, _) = rig.send("online_transaction", "submit", p);
        match r.status {
            ResponseStatus::Ok => {}
            ResponseStatus::Denied => denied += 1,
            ResponseStatus::Error => return Err(format!("benign {p:?} -> {r:?}")),
        }
    }
    ensure!(denied == 0, "{denied} of 200 benign requests denied");
    Ok(format!("{total}/{total} attack payloads denied, 0/200 benign denied"))
}

fn registry_rule() -> Outcome {
    let registry = ServiceRegistry::parse(DEFAULT_REGISTRY).unwrap();
    let rules = RuleSet::default_rules();
    let known: BTreeSet<(String, String)> = registry
        .services()
        .flat_map(|(s, acts)| acts.map(move |a| (s.to_string(), a.to_string())))
        .collect();
    let services: BTreeSet<String> = known.iter().map(|(s, _)| s.clone()).collect();
    let actions: Vec<String> = known.iter().map(|(_, a)| a.clone()).collect();
    let pick = |idx: usize, pool: &BTreeSet<String>| pool.iter().nth(idx % pool.len()).unwrap().clone();

    let mut runner = TestRunner::new(PropConfig {
        cases: 2000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (
        "[A-Za-z_][A-Za-z0-9_.-]{0,24}",
        "[A-Za-z_][A-Za-z0-9_.-]{0,24}",
        0usize..64,
        0usize..3,
    );
    runner
        .run(&strategy, |(svc, act, idx, mode)| {
            // mode 0: unknown service; 1: known service, unknown action;
            // 2: both unknown
            let (service, action) = match mode {
                0 => (svc, actions[idx % actions.len()].clone()),
                1 => (pick(idx, &services), act),
                _ => (svc, act),
            };
            let norm = (service.trim().to_lowercase(), action.trim().to_lowercase());
            if known.contains(&norm) {
                return Ok(());
            }
            let req = ServiceRequest::new(
                "alice",
                Ipv4Addr::LOCALHOST,
                service.as_str(),
                action.as_str(),
                "x=1",
                None,
                Nonce([0; 16]),
                T0,
            )
            .unwrap();
            let v = sanitize(&req, &registry, &rules);
            proptest::prop_assert_eq!(v.threat_class(), Some(ThreatClass::UnknownService), "{:?}", norm);
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    // and end to end through the pipeline
    let mut rig = Rig::new(&[]);
    for (s, a) in [
        ("payroll", "run"),
        ("banking", "withdraw"),
        ("insurance", "claim"),
        ("BANKING", "transfer"),
    ] {
        let (r, _) = rig.send(s, a, "x=1");
        ensure!(
            r.stage == Some(Stage::Sanitize) && r.threat == Some(ThreatClass::UnknownService),
            "{s}.{a} -> {r:?}"
        );
    }
    Ok("2000 randomized unregistered names denied as UnknownService".into())
}

/// Brute-force count of timestamps in `(now - window, now]`.
fn brute_count(history: &[(Ipv4Addr, u64)], ip: Option<Ipv4Addr>, now: u64, window: u64) -> usize {
    history
        .iter()
        .filter(|(i, t)| ip.is_none_or(|ip| *i == ip) && *t <= now && *t + window > now)
        .count()
}

fn dos_banning() -> Outcome {
    let mut rig = Rig::new(&[]);
    let ids = *rig.gw.ids().config();
    ensure!(
        (ids.window_s, ids.threshold, ids.ban_s) == (10, 50, 60),
        "unexpected IDS defaults {ids:?}"
    );
    let attacker = SocketAddrV4::new(Ipv4Addr::new(10, 99, 0, 1), 4000);
    let t = rig.now() + 1;
    for n in 1..=51u32 {
        let (_, bytes) = rig.envelope("insurance", "quote", "declared_value=10");
        let r = rig.gw.handle(&bytes, attacker, t * US + u64::from(n) * 1000);
        if n <= 50 {
            ensure!(r.status == ResponseStatus::Ok, "request {n} refused: {r:?}");
        } else {
            ensure!(
                r.stage == Some(Stage::IdsObserve) && r.threat == Some(ThreatClass::RateFlood),
                "request 51 -> {r:?}"
            );
        }
    }
    for (at, banned) in [(t + 1, true), (t + 59, true), (t + 60, false)] {
        ensure!(
            rig.gw.ids().is_banned(*attacker.ip(), at) == banned,
            "ban state at t+{} wrong",
            at - t
        );
    }
    rig.cert = rig
        .gw
        .authenticate("alice", "alice-password", Ipv4Addr::LOCALHOST, t + 59)
        .unwrap();
    rig.now_us = (t + 59) * US;
    let (_, bytes) = rig.envelope("insurance", "quote", "declared_value=10");
    let r = rig.gw.handle(&bytes, attacker, rig.now_us);
    ensure!(r.stage == Some(Stage::BanCheck), "t+59 -> {r:?}");
    rig.now_us = (t + 60) * US;
    let (_, bytes) = rig.envelope("insurance", "quote", "declared_value=10");
    let r = rig.gw.handle(&bytes, attacker, rig.now_us);
    ensure!(r.status == ResponseStatus::Ok, "t+60 -> {r:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trace in 0..1000 {
        let window = rng.gen_range(1..=15u64);
        let threshold = rng.gen_range(1..=8usize);
        let global = rng.gen_range(threshold..=30usize);
        let cfg = IdsConfig {
            window_s: window,
            threshold,
            ban_s: rng.gen_range(1..=20),
            global_threshold: global,
        };
        let ids = Ids::new(cfg, AlertLog::in_memory());
        let mut counter = WindowCounter::new(window);
        let ips: Vec<Ipv4Addr> = (0..rng.gen_range(1..=4u8))
            .map(|i| Ipv4Addr::new(10, 0, 0, i))
            .collect();
        let mut history = Vec::new();
        let mut bans: Vec<(Ipv4Addr, u64)> = Vec::new();
        let mut now = 0u64;
        for step in 0..rng.gen_range(1..120) {
            now += rng.gen_range(0..4);
            let ip = ips[rng.gen_range(0..ips.len())];
            history.push((ip, now));
            let want_ip = brute_count(&history, Some(ip), now, window);
            let want_global = brute_count(&history, None, now, window);
            let got = counter.record(ip, now);
            ensure!(
                got == (want_ip, want_global),
                "trace {trace} step {step}: counter {got:?}, oracle ({want_ip}, {want_global})"
            );
            let obs = ids.observe(ip, now);
            let ip_flood = want_ip > threshold;
            let want_deny = ip_flood || want_global > global;
            ensure!(
                obs.verdict.is_deny() == want_deny,
                "trace {trace} step {step}: verdict mismatch"
            );
            if ip_flood {
                bans.push((ip, now + cfg.ban_s));
            }
            for probe in &ips {
                let want = bans.iter().any(|(b, until)| b == probe && now < *until);
                ensure!(
                    ids.is_banned(*probe, now) == want,
                    "trace {trace} step {step}: ban mismatch"
                );
            }
        }
    }
    Ok("51st request denied, banned through t+59, free at t+60; 1000 traces match oracle".into())
}

fn ddos_quarantine() -> Outcome {
    let mut rig = Rig::new(&[]);
    for _ in 0..5 {
        let (r, _) = rig.send("banking", "deposit", "amount=7");
        ensure!(r.status == ResponseStatus::Ok, "seed deposit failed: {r:?}");
    }
    let store = rig.cfg.store_path.clone();
    // past the window of the seeding deposits
    let t = rig.now() + 11;
    let mut sever_digest = None;
    let mut denied = 0;
    for i in 0..600u32 {
        let src = SocketAddrV4::new(Ipv4Addr::new(100, 64, (i / 250) as u8, (i % 250 + 1) as u8), 3000);
        let (_, bytes) = rig.envelope("insurance", "quote", "declared_value=1");
        let r = rig.gw.handle(&bytes, src, t * US + u64::from(i));
        if r.status == ResponseStatus::Denied {
            denied += 1;
            ensure!(r.threat == Some(ThreatClass::RateFlood), "flood request {i} -> {r:?}");
        }
        if sever_digest.is_none() && !rig.gw.link().state().is_connected() {
            sever_digest = Some(file_digest(&store));
        }
    }
    let Some(at_sever) = sever_digest else {
        return Err("link never severed".into());
    };
    ensure!(denied == 100, "{denied} of 600 flood requests denied, expected 100");
    let alerts = rig.gw.ids().alert_log().contents();
    ensure!(alerts.contains("SEV:3"), "no severity-3 alert logged");
    let status = rig.gw.status(t);
    ensure!(status.link == LinkStatus::Quarantined, "link is {:?}", status.link);

    rig.now_us = (t + 12) * US;
    let mut severed = 0;
    for (s, a, p) in [
        ("banking", "deposit", "amount=5"),
        ("banking", "balance", ""),
        ("online_transaction", "submit", "sku=1"),
        ("transaction_info", "get", "id=1"),
    ] {
        let (r, _) = rig.send(s, a, p);
        ensure!(
            r.status == ResponseStatus::Error && r.reason.contains("LinkSevered"),
            "{s}.{a} after sever -> {r:?}"
        );
        severed += 1;
    }
    ensure!(file_digest(&store) == at_sever, "store file changed after sever");
    ensure!(
        FileBackend::open_with(&store, false).unwrap().checksum_ok(),
        "store checksum invalid"
    );
    Ok(format!(
        "quarantined after 500, {severed}/4 store calls LinkSevered, store unchanged"
    ))
}

fn at_rest_encryption() -> Outcome {
    let mut rig = Rig::new(&[]);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let values: Vec<String> = (0..500)
        .map(|_| (&mut rng).sample_iter(Alphanumeric).take(64).map(char::from).collect())
        .collect();
    for v in &values {
        let (r, _) = rig.send("online_transaction", "submit", v);
        ensure!(r.status == ResponseStatus::Ok, "submit refused: {r:?}");
    }
    for (i, p) in corpus("benign.txt").iter().enumerate() {
        rig.send("online_transaction", "submit", p);
        rig.send("banking", "deposit", &format!("amount={}", i + 1));
    }
    let store = rig.cfg.store_path.clone();
    let probes: Vec<&[u8]> = values.iter().flat_map(|v| v.as_bytes().chunks(8)).collect();
    let hits = scan_plaintext(&store, &probes).map_err(|e| e.to_string())?;
    ensure!(
        hits.is_empty(),
        "{} plaintext fragments found, first {:?}",
        hits.len(),
        hits[0]
    );

    let backend = FileBackend::open_with(&store, false).unwrap();
    let records = backend.records();
    ensure!(records.len() > 500, "only {} records stored", records.len());
    let wrong = DataKey::new(KeyId::from_label("dk-v1").unwrap(), rng.gen());
    let right = DataKey::load(&rig.cfg.data_key_file, KeyId::from_label(&rig.cfg.data_key_id).unwrap()).unwrap();
    for r in &records {
        ensure!(
            matches!(open_record(r, &wrong), Err(StoreError::DecryptionFailure)),
            "{} opened without the key",
            r.record_key
        );
    }
    let victim = records.iter().find(|r| r.record_key.contains("orders/")).unwrap();
    ensure!(
        open_record(victim, &right).is_ok(),
        "victim record unreadable with the key"
    );
    let mut corruptions = 0;
    for pos in 0..victim.ciphertext.len() {
        for flip in 1..=255u8 {
            let mut bad = victim.clone();
            bad.ciphertext[pos] ^= flip;
            ensure!(
                matches!(open_record(&bad, &right), Err(StoreError::DecryptionFailure)),
                "corruption at byte {pos} went unnoticed"
            );
            corruptions += 1;
        }
    }
    Ok(format!(
        "0 hits over {} probes, {} records refuse a wrong key, {corruptions} corruptions rejected",
        probes.len(),
        records.len()
    ))
}

/// Stage order check written against the pipeline order, independent of
/// `PipelineTrace::is_well_formed`.
fn trace_ok(trace: &PipelineTrace) -> bool {
    let order = [
        Stage::BanCheck,
        Stage::Auth,
        Stage::Replay,
        Stage::IdsObserve,
        Stage::Sanitize,
        Stage::Service,
        Stage::Store,
    ];
    // stages form a prefix of the fixed order; only the last may be non-Allow
    let n = trace.entries.len();
    n <= order.len()
        && trace
            .entries
            .iter()
            .zip(order)
            .enumerate()
            .all(|(i, ((stage, outcome), want))| {
                *stage == want && (matches!(outcome, StageOutcome::Allow) || i + 1 == n)
            })
}

fn pipeline_integrity() -> Outcome {
    let mut rig = Rig::new(&[]);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let attacks: Vec<String> = ["xss.txt", "lfi.txt", "rfi.txt", "injection.txt"]
        .iter()
        .flat_map(|f| corpus(f))
        .collect();
    let mut seen: Vec<Vec<u8>> = Vec::new();
    let mut denies = 0u64;
    for i in 0..10_000 {
        let src = match rng.gen_range(0..10) {
            // a few hot sources so bans and floods happen
            0..=1 => SocketAddrV4::new(Ipv4Addr::new(10, 77, 0, rng.gen_range(1..4)), 1),
            _ => rig.tick(),
        };
        if i % 7 == 0 {
            rig.now_us += 50_000;
        }
        let (service, action, payload) = match rng.gen_range(0..5) {
            0 => ("insurance", "quote", "declared_value=99".to_string()),
            1 => ("banking", "deposit", "amount=2".to_string()),
            2 => (
                "online_transaction",
                "submit",
                attacks[rng.gen_range(0..attacks.len())].clone(),
            ),
            3 => ("nope", "nothing", "x".to_string()),
            _ => ("transaction_info", "get", format!("id={}", rng.gen_range(0..50))),
        };
        let (mut req, mut bytes) = rig.envelope(service, action, &payload);
        match rng.gen_range(0..8) {
            0 if !seen.is_empty() => bytes = seen[rng.gen_range(0..seen.len())].clone(),
            1 => {
                let n = rng.gen_range(1..4);
                for _ in 0..n {
                    let at = rng.gen_range(0..bytes.len());
                    bytes[at] = rng.gen();
                }
            }
            2 => bytes = (0..rng.gen_range(0..200)).map(|_| rng.gen()).collect(),
            3 => {
                let mut c = rig.cert.clone();
                c.tag[rng.gen_range(0..32)] ^= 1;
                req = req.with_certificate(Some(c));
                bytes = encode(&req);
            }
            4 => {
                req = req.with_certificate(None);
                bytes = encode(&req);
            }
            5 => bytes.truncate(rng.gen_range(0..bytes.len())),
            _ => {}
        }
        if seen.len() < 256 {
            seen.push(bytes.clone());
        }
        let (_, trace) = rig.gw.handle_traced(&bytes, src, rig.now_us);
        if !trace_ok(&trace) {
            return Err(format!("envelope {i}: stage order violated: {trace}"));
        }
        denies += trace
            .entries
            .iter()
            .filter(|(_, o)| matches!(o, StageOutcome::Deny(_)))
            .count() as u64;
    }
    let alerts = rig.gw.ids().alert_log().records();
    ensure!(denies == alerts, "{denies} deny verdicts but {alerts} alert records");
    ensure!(denies > 1000, "fuzz produced only {denies} denials");
    Ok(format!("10000 traces in order, {denies} denies = {alerts} alerts"))
}

/// Days since 1970-01-01 for a proleptic Gregorian date.
fn days_from_civil(y: i64, m: i64, d: i64) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = y.div_euclid(400);
    let yoe = y - era * 400;
    let mp = (m + 9) % 12;
    let doy = (153 * mp + 2) / 5 + d - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146_097 + doe - 719_468
}

fn alert_log_fidelity() -> Outcome {
    let expected = "02/17-20:15:06.108591 192.168.204.1:138 -> 192.168.204.255:138";
    let mut lines = Vec::new();
    // the year is not part of the line; any year must render the same
    for year in [2011, 2024] {
        let secs = days_from_civil(year, 2, 17) * 86_400 + 20 * 3600 + 15 * 60 + 6;
        let event = AlertEvent {
            timestamp_us: secs as u64 * US + 108_591,
            src: "192.168.204.1:138".parse().unwrap(),
            dst: "192.168.204.255:138".parse().unwrap(),
            proto: Proto::Udp,
            threat: ThreatClass::RateFlood,
            severity: Severity::MEDIUM,
        };
        let text = format_alert(&event);
        let first = text.lines().next().unwrap_or_default().to_string();
        ensure!(first.as_bytes() == expected.as_bytes(), "got {first:?}");
        lines.push(first);
    }
    Ok(format!("first line byte-matches `{}`", lines[0]))
}

fn harness(args: &[&str], report: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_harness"))
        .args([
            "run",
            "--scenario",
            "all",
            "--target",
            "inproc",
            "--sim-clock",
            "--report",
        ])
        .arg(report)
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
    )
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let report: PathBuf = dir.path().join("report.json");
    let (code, text) = harness(&[], &report);
    ensure!(code == 0, "default run exited {code}\n{text}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    ensure!(json["pass"] == true, "report says fail");

    let (code, text) = harness(&["--empty-rules"], &report);
    ensure!(code != 0, "run without rules exited 0");
    let failed: BTreeSet<&str> = text
        .lines()
        .filter_map(|l| l.strip_prefix('[').and_then(|l| l.strip_suffix("] FAIL")))
        .collect();
    let want: BTreeSet<&str> = ["xss", "lfi", "rfi", "injection"].into_iter().collect();
    ensure!(failed == want, "failing scenarios {failed:?}");
    Ok(format!(
        "all scenarios pass; without rules exit {code} failing {failed:?}"
    ))
}

/// Writes past the test harness capture so the gate shows in plain runs.
fn report(line: String) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

#[test]
fn acceptance() {
    type Check = fn() -> Outcome;
    let criteria: [(&str, Check); 10] = [
        ("forgery rejection", forgery_rejection),
        ("replay rejection", replay_rejection),
        ("sanitization", sanitization),
        ("registry rule", registry_rule),
        ("dos banning", dos_banning),
        ("ddos quarantine", ddos_quarantine),
        ("at-rest encryption", at_rest_encryption),
        ("pipeline integrity", pipeline_integrity),
        ("alert log fidelity", alert_log_fidelity),
        ("end to end", end_to_end),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => report(format!("criterion {:>2} {name}: PASS ({detail})", i + 1)),
            Err(why) => {
                report(format!("criterion {:>2} {name}: FAIL ({why})", i + 1));
                failed.push(*name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
