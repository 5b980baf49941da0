//! HTTP surface: `POST /auth`, `POST /invoke`, `POST /admin/<verb>`.

use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{ConnectInfo, Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Form, Json, Router};
use serde::Deserialize;
use tokio::sync::oneshot;

use super::{AdminError, AuthError, ClockMode, Gateway};
use crate::envelope::ResponseStatus;

/// Header carrying the simulated time in microseconds (sim clock only).
pub const SIM_NOW_HEADER: &str = "x-sim-now";
pub const FORWARDED_FOR_HEADER: &str = "x-forwarded-for";

#[derive(Debug, Clone, Copy)]
pub struct HttpOptions {
    pub clock: ClockMode,
    /// Take the client address from `x-forwarded-for` (test rigs and
    /// deployments behind a proxy only).
    pub trust_forwarded_for: bool,
}

#[derive(Clone)]
struct AppState {
    gateway: Arc<Gateway>,
    opts: HttpOptions,
}

pub fn system_now_us() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or(0)
}

impl AppState {
    fn now_us(&self, headers: &HeaderMap) -> u64 {
        if self.opts.clock == ClockMode::Sim {
            if let Some(t) = headers
                .get(SIM_NOW_HEADER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse().ok())
            {
                return t;
            }
        }
        system_now_us()
    }

    fn source(&self, headers: &HeaderMap, peer: SocketAddr) -> SocketAddrV4 {
        if self.opts.trust_forwarded_for {
            if let Some(ip) = headers
                .get(FORWARDED_FOR_HEADER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.split(',').next())
                .and_then(|v| v.trim().parse::<Ipv4Addr>().ok())
            {
                return SocketAddrV4::new(ip, peer.port());
            }
        }
        match peer {
            SocketAddr::V4(a) => a,
            SocketAddr::V6(a) => SocketAddrV4::new(a.ip().to_ipv4_mapped().unwrap_or(Ipv4Addr::UNSPECIFIED), a.port()),
        }
    }
}

pub fn router(gateway: Arc<Gateway>, opts: HttpOptions) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/auth", post(auth))
        .route("/invoke", post(invoke))
        .route("/admin/:verb", post(admin))
        .with_state(AppState { gateway, opts })
}

#[derive(Deserialize)]
struct AuthForm {
    client_id: String,
    password: String,
}

async fn auth(
    State(st): State<AppState>,
    ConnectInfo(peer): ConnectInfo<SocketAddr>,
    headers: HeaderMap,
    Form(form): Form<AuthForm>,
) -> Response {
    let now = st.now_us(&headers) / 1_000_000;
    let source = st.source(&headers, peer);
    let gw = Arc::clone(&st.gateway);
    let res =
        tokio::task::spawn_blocking(move || gw.authenticate(&form.client_id, &form.password, *source.ip(), now)).await;
    match res {
        Ok(Ok(cert)) => (StatusCode::OK, cert.to_token()).into_response(),
        Ok(Err(AuthError::Banned)) => (StatusCode::TOO_MANY_REQUESTS, "source is banned").into_response(),
        Ok(Err(AuthError::BadCredentials)) => (StatusCode::UNAUTHORIZED, "authentication failed").into_response(),
        Err(_) => StatusCode::INTERNAL_SERVER_ERROR.into_response(),
    }
}

async fn invoke(
    State(st): State<AppState>,
    ConnectInfo(peer): ConnectInfo<SocketAddr>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let now = st.now_us(&headers);
    let source = st.source(&headers, peer);
    let gw = Arc::clone(&st.gateway);
    match tokio::task::spawn_blocking(move || gw.handle(&body, source, now)).await {
        Ok(resp) => {
            let code = match resp.status {
                ResponseStatus::Ok => StatusCode::OK,
                ResponseStatus::Denied => StatusCode::FORBIDDEN,
                ResponseStatus::Error => StatusCode::INTERNAL_SERVER_ERROR,
            };
            (code, Json(resp)).into_response()
        }
        Err(_) => StatusCode::INTERNAL_SERVER_ERROR.into_response(),
    }
}

async fn admin(State(st): State<AppState>, Path(verb): Path<String>, headers: HeaderMap, body: String) -> Response {
    let token = headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .unwrap_or("")
        .trim()
        .to_string();
    let now = st.now_us(&headers) / 1_000_000;
    let gw = Arc::clone(&st.gateway);
    match tokio::task::spawn_blocking(move || gw.admin(&verb, &token, &body, now)).await {
        Ok(Ok(out)) => (StatusCode::OK, out).into_response(),
        Ok(Err(e)) => {
            let code = match e {
                AdminError::Unauthorized => StatusCode::UNAUTHORIZED,
                AdminError::UnknownVerb(_) => StatusCode::NOT_FOUND,
                AdminError::ResetDisabled => StatusCode::FORBIDDEN,
                AdminError::BadRequest(_) | AdminError::Rules(_) => StatusCode::BAD_REQUEST,
            };
            (code, e.to_string()).into_response()
        }
        Err(_) => StatusCode::INTERNAL_SERVER_ERROR.into_response(),
    }
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    gateway: Arc<Gateway>,
    opts: HttpOptions,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let app = router(gateway, opts).into_make_service_with_connect_info::<SocketAddr>();
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}

/// A server on its own runtime thread; stops when dropped.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) -> std::io::Result<()> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t
                .join()
                .unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

/// Binds `addr` and serves `gateway` on a background thread.
pub fn spawn(addr: SocketAddr, gateway: Arc<Gateway>, opts: HttpOptions) -> std::io::Result<ServerHandle> {
    let std_listener = std::net::TcpListener::bind(addr)?;
    std_listener.set_nonblocking(true)?;
    let addr = std_listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new()
        .name("soaguard-http".into())
        .spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener)?;
                serve(listener, gateway, opts, async {
                    let _ = rx.await;
                })
                .await
            })
        })?;
    Ok(ServerHandle {
        addr,
        stop: Some(tx),
        thread: Some(thread),
    })
}
