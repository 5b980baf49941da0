use std::net::{Ipv4Addr, SocketAddrV4, TcpListener};
use std::path::Path;
use std::sync::Arc;

use soaguard::envelope::{encode, Nonce, ResponseStatus, ServiceRequest};
use soaguard::gateway::http::{self, HttpOptions, SIM_NOW_HEADER};
use soaguard::gateway::{provision, ClockMode, Gateway, GatewayConfig, ProvisionOptions};
use soaguard::ims::AuthCertificate;
use soaguard::quarantine::LinkStatus;
use soaguard::store::{serve_store, FileBackend};
use soaguard::ServiceResponse;

const T0: u64 = 1_700_000_000;
const ADMIN: &str = "admin-secret";

fn setup(dir: &Path, extra: &[(&str, &str)]) -> (Arc<Gateway>, GatewayConfig) {
    let opts = ProvisionOptions {
        admin_token: Some(ADMIN.into()),
        extra: extra.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        ..Default::default()
    };
    let path = provision(dir, &opts).unwrap();
    let cfg = GatewayConfig::load(&path).unwrap();
    (Arc::new(Gateway::from_config(&cfg, T0).unwrap()), cfg)
}

fn envelope(cert: &AuthCertificate, service: &str, action: &str, payload: &str, ts: u64) -> Vec<u8> {
    let req = ServiceRequest::new(
        "alice",
        Ipv4Addr::new(10, 0, 0, 1),
        service,
        action,
        payload,
        Some(cert.clone()),
        Nonce::random(),
        ts,
    )
    .unwrap();
    encode(&req)
}

fn src(n: u8) -> SocketAddrV4 {
    SocketAddrV4::new(Ipv4Addr::new(10, 1, 0, n), 5000)
}

#[test]
fn http_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (gw, _) = setup(dir.path(), &[("clock", "sim")]);
    let server = http::spawn(
        "127.0.0.1:0".parse().unwrap(),
        Arc::clone(&gw),
        HttpOptions {
            clock: ClockMode::Sim,
            trust_forwarded_for: false,
        },
    )
    .unwrap();
    let url = server.url();
    let c = reqwest::blocking::Client::new();
    let now = (T0 * 1_000_000).to_string();

    assert_eq!(c.get(format!("{url}/health")).send().unwrap().text().unwrap(), "ok");

    let bad_pw = c
        .post(format!("{url}/auth"))
        .header(SIM_NOW_HEADER, &now)
        .form(&[("client_id", "alice"), ("password", "nope")])
        .send()
        .unwrap();
    assert_eq!(bad_pw.status(), 401);
    let bad_pw = bad_pw.text().unwrap();
    let bad_user = c
        .post(format!("{url}/auth"))
        .header(SIM_NOW_HEADER, &now)
        .form(&[("client_id", "mallory"), ("password", "nope")])
        .send()
        .unwrap();
    assert_eq!(bad_user.status(), 401);
    // unknown user and wrong password are indistinguishable
    assert_eq!(bad_user.text().unwrap(), bad_pw);

    let token = c
        .post(format!("{url}/auth"))
        .header(SIM_NOW_HEADER, &now)
        .form(&[("client_id", "alice"), ("password", "alice-password")])
        .send()
        .unwrap();
    assert_eq!(token.status(), 200);
    let cert = AuthCertificate::from_token(token.text().unwrap().trim()).unwrap();
    assert_eq!(cert.subject, "alice");

    let invoke = |body: Vec<u8>| {
        let r = c
            .post(format!("{url}/invoke"))
            .header(SIM_NOW_HEADER, &now)
            .body(body)
            .send()
            .unwrap();
        let code = r.status().as_u16();
        (
            code,
            serde_json::from_str::<ServiceResponse>(&r.text().unwrap()).unwrap(),
        )
    };
    let (code, r) = invoke(envelope(&cert, "banking", "deposit", "amount=25", T0));
    assert_eq!((code, r.status, r.body.as_str()), (200, ResponseStatus::Ok, "25"));
    let (code, r) = invoke(envelope(&cert, "insurance", "quote", "declared_value=<script>", T0));
    assert_eq!((code, r.status), (403, ResponseStatus::Denied));
    let (code, r) = invoke(b"garbage".to_vec());
    assert_eq!((code, r.status), (403, ResponseStatus::Denied));

    let admin = |verb: &str, token: &str, body: &str| {
        let r = c
            .post(format!("{url}/admin/{verb}"))
            .header(SIM_NOW_HEADER, &now)
            .bearer_auth(token)
            .body(body.to_string())
            .send()
            .unwrap();
        (r.status().as_u16(), r.text().unwrap())
    };
    assert_eq!(admin("status", "wrong", "").0, 401);
    assert_eq!(admin("frobnicate", ADMIN, "").0, 404);
    assert_eq!(admin("reset", ADMIN, "").0, 403);
    let (code, body) = admin("status", ADMIN, "");
    assert_eq!(code, 200);
    let status: soaguard::gateway::GatewayStatus = serde_json::from_str(&body).unwrap();
    assert_eq!(status.link, LinkStatus::Connected);
    assert_eq!(status.requests, 3);

    let before = gw.rules().version().to_string();
    std::fs::write(dir.path().join("gateway.rules"), "").unwrap();
    let (code, version) = admin("reload-rules", ADMIN, "");
    assert_eq!(code, 200);
    assert_ne!(version, before);
    assert!(gw.rules().is_empty());
    let (code, r) = invoke(envelope(&cert, "insurance", "quote", "declared_value=<script>", T0));
    assert_eq!((code, r.status), (500, ResponseStatus::Error), "{r:?}");

    server.stop().unwrap();
}

#[test]
fn two_process_profile_reaches_a_remote_store() {
    let dir = tempfile::tempdir().unwrap();
    let store_path = dir.path().join("remote.db");
    let backend = Arc::new(FileBackend::open_with(&store_path, false).unwrap());
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    std::thread::spawn(move || serve_store(listener, backend));

    let (gw, _) = setup(dir.path(), &[("profile", "two-process"), ("store.remote", &addr)]);
    let cert = gw
        .authenticate("alice", "alice-password", Ipv4Addr::LOCALHOST, T0)
        .unwrap();
    let now = T0 * 1_000_000;
    for n in 1..=3u64 {
        let r = gw.handle(&envelope(&cert, "banking", "deposit", "amount=10", T0), src(1), now);
        assert_eq!(r.body, (n * 10).to_string(), "{r:?}");
    }
    let id = gw.handle(
        &envelope(&cert, "online_transaction", "submit", "sku=7", T0),
        src(1),
        now,
    );
    assert_eq!(id.status, ResponseStatus::Ok);
    let got = gw.handle(
        &envelope(&cert, "transaction_info", "get", &format!("id={}", id.body), T0),
        src(1),
        now,
    );
    assert_eq!(got.body, "sku=7");

    let on_disk = FileBackend::open_with(&store_path, false).unwrap();
    assert!(on_disk
        .records()
        .iter()
        .any(|r| r.record_key == "svc/banking/balance/alice"));
}

#[test]
fn every_request_is_logged_once() {
    let dir = tempfile::tempdir().unwrap();
    let (gw, cfg) = setup(dir.path(), &[]);
    let cert = gw
        .authenticate("alice", "alice-password", Ipv4Addr::LOCALHOST, T0)
        .unwrap();
    let now = T0 * 1_000_000;
    let mut sent = 0;
    for i in 0..40u64 {
        let body = match i % 4 {
            0 => envelope(&cert, "insurance", "quote", "declared_value=100", T0),
            1 => envelope(&cert, "insurance", "quote", "declared_value=../../etc/passwd", T0),
            2 => b"not an envelope".to_vec(),
            _ => envelope(&cert, "banking", "balance", "", T0),
        };
        gw.handle(&body, src(2), now + i);
        sent += 1;
    }
    assert_eq!(gw.access_log().len(), sent);
    let file = std::fs::read_to_string(cfg.access_log.unwrap()).unwrap();
    assert_eq!(file.lines().count() as u64, sent);
    for line in file.lines() {
        assert_eq!(line.split(' ').count(), 8, "{line}");
    }
}

#[test]
fn concurrent_deposits_sum_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (gw, _) = setup(
        dir.path(),
        &[("ids.threshold", "100000"), ("ids.global_threshold", "100000")],
    );
    let cert = gw
        .authenticate("alice", "alice-password", Ipv4Addr::LOCALHOST, T0)
        .unwrap();
    let now = T0 * 1_000_000;
    std::thread::scope(|s| {
        for t in 0..8u8 {
            let (gw, cert) = (&gw, &cert);
            s.spawn(move || {
                for _ in 0..25 {
                    let r = gw.handle(&envelope(cert, "banking", "deposit", "amount=3", T0), src(10 + t), now);
                    assert_eq!(r.status, ResponseStatus::Ok, "{r:?}");
                }
            });
        }
    });
    let r = gw.handle(&envelope(&cert, "banking", "balance", "", T0), src(1), now);
    assert_eq!(r.body, (8 * 25 * 3).to_string());
}
