//! C ABI for the soaguard gateway.
//!
//! A gateway is an opaque `SgGateway*` created by `sg_gateway_open` and
//! released with `sg_gateway_free`. Every call returns an `SgStatus`;
//! on failure `sg_last_error` describes the problem for the calling
//! thread. Strings returned through out-parameters are owned by the
//! caller and must be released with `sg_string_free`.
//!
//! Strings passed in must be NUL-terminated UTF-8. A handle may be used
//! from several threads at once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::net::{Ipv4Addr, SocketAddrV4};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use soaguard::envelope::{encode, Nonce, ServiceRequest};
use soaguard::gateway::{provision, AdminError, AuthError, Gateway, GatewayConfig, ProvisionOptions};
use soaguard::ims::AuthCertificate;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    AuthFailed = 4,
    Banned = 5,
    Unauthorized = 6,
    AdminFailed = 7,
    Io = 8,
    InvalidArgument = 9,
    Panic = 99,
}

/// Opaque gateway handle.
pub struct SgGateway {
    inner: Gateway,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: SgStatus, msg: impl Into<String>) -> SgStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning panics into `SgStatus::Panic`.
fn guard(f: impl FnOnce() -> SgStatus) -> SgStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(SgStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, SgStatus> {
    if p.is_null() {
        return Err(fail(SgStatus::NullArgument, format!("{name} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SgStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> SgStatus {
    match CString::new(s) {
        Ok(c) => {
            *out = c.into_raw();
            SgStatus::Ok
        }
        Err(_) => fail(SgStatus::InvalidUtf8, "result contains a NUL byte"),
    }
}

macro_rules! try_arg {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Message for the last failed call on this thread, or NULL. Valid until
/// the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn sg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn sg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Writes a fresh deployment (keys, credentials, rules, config) into
/// `dir` and returns the config path in `*out_config_path`.
/// `admin_token` may be NULL for a random token.
///
/// # Safety
/// String arguments must be valid NUL-terminated strings; `out_config_path`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_provision(
    dir: *const c_char,
    admin_token: *const c_char,
    out_config_path: *mut *mut c_char,
) -> SgStatus {
    guard(|| {
        let dir = try_arg!(str_arg(dir, "dir"));
        if out_config_path.is_null() {
            return fail(SgStatus::NullArgument, "out_config_path is NULL");
        }
        let admin_token = if admin_token.is_null() {
            None
        } else {
            Some(try_arg!(str_arg(admin_token, "admin_token")).to_string())
        };
        let opts = ProvisionOptions {
            admin_token,
            ..Default::default()
        };
        match provision(Path::new(dir), &opts) {
            Ok(p) => put_string(out_config_path, p.display().to_string()),
            Err(e) => fail(SgStatus::Io, e.to_string()),
        }
    })
}

/// Opens a gateway from a config file.
///
/// # Safety
/// `config_path` must be a valid string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sg_gateway_open(config_path: *const c_char, now_s: u64, out: *mut *mut SgGateway) -> SgStatus {
    guard(|| {
        let path = try_arg!(str_arg(config_path, "config_path"));
        if out.is_null() {
            return fail(SgStatus::NullArgument, "out is NULL");
        }
        let cfg = match GatewayConfig::load(Path::new(path)) {
            Ok(c) => c,
            Err(e) => return fail(SgStatus::Config, e.to_string()),
        };
        match Gateway::from_config(&cfg, now_s) {
            Ok(g) => {
                *out = Box::into_raw(Box::new(SgGateway { inner: g }));
                SgStatus::Ok
            }
            Err(e) => fail(SgStatus::Config, e.to_string()),
        }
    })
}

/// Releases a gateway. NULL is ignored.
///
/// # Safety
/// `gw` must come from `sg_gateway_open` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sg_gateway_free(gw: *mut SgGateway) {
    if !gw.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(gw))));
    }
}

unsafe fn gateway<'a>(gw: *const SgGateway) -> Result<&'a Gateway, SgStatus> {
    gw.as_ref()
        .map(|g| &g.inner)
        .ok_or_else(|| fail(SgStatus::NullArgument, "gateway is NULL"))
}

/// Checks credentials and returns a certificate token. `source_ip` is an
/// IPv4 address in host byte order.
///
/// # Safety
/// Pointers must be valid; `out_token` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_gateway_authenticate(
    gw: *const SgGateway,
    client_id: *const c_char,
    password: *const c_char,
    source_ip: u32,
    now_s: u64,
    out_token: *mut *mut c_char,
) -> SgStatus {
    guard(|| {
        let g = try_arg!(gateway(gw));
        let client_id = try_arg!(str_arg(client_id, "client_id"));
        let password = try_arg!(str_arg(password, "password"));
        if out_token.is_null() {
            return fail(SgStatus::NullArgument, "out_token is NULL");
        }
        match g.authenticate(client_id, password, Ipv4Addr::from(source_ip), now_s) {
            Ok(cert) => put_string(out_token, cert.to_token()),
            Err(AuthError::BadCredentials) => fail(SgStatus::AuthFailed, "authentication failed"),
            Err(AuthError::Banned) => fail(SgStatus::Banned, "source is banned"),
        }
    })
}

/// Runs one encoded request envelope through the pipeline and returns
/// the response as JSON. A denied or failed request still yields
/// `SG_STATUS_OK`; inspect the JSON `status` field.
///
/// # Safety
/// `body` must point to `len` readable bytes; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_gateway_handle(
    gw: *const SgGateway,
    body: *const u8,
    len: usize,
    source_ip: u32,
    source_port: u16,
    now_us: u64,
    out_json: *mut *mut c_char,
) -> SgStatus {
    guard(|| {
        let g = try_arg!(gateway(gw));
        if (body.is_null() && len > 0) || out_json.is_null() {
            return fail(SgStatus::NullArgument, "body or out_json is NULL");
        }
        let bytes = if len == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(body, len)
        };
        let src = SocketAddrV4::new(Ipv4Addr::from(source_ip), source_port);
        let resp = g.handle(bytes, src, now_us);
        put_string(out_json, serde_json::to_string(&resp).expect("response serializes"))
    })
}

/// Runs an admin verb (`status`, `restore-link`, `reload-rules`,
/// `revoke`, `reset`). `body` may be NULL.
///
/// # Safety
/// String pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_gateway_admin(
    gw: *const SgGateway,
    verb: *const c_char,
    token: *const c_char,
    body: *const c_char,
    now_s: u64,
    out: *mut *mut c_char,
) -> SgStatus {
    guard(|| {
        let g = try_arg!(gateway(gw));
        let verb = try_arg!(str_arg(verb, "verb"));
        let token = try_arg!(str_arg(token, "token"));
        let body = if body.is_null() {
            ""
        } else {
            try_arg!(str_arg(body, "body"))
        };
        if out.is_null() {
            return fail(SgStatus::NullArgument, "out is NULL");
        }
        match g.admin(verb, token, body, now_s) {
            Ok(s) => put_string(out, s),
            Err(AdminError::Unauthorized) => fail(SgStatus::Unauthorized, "unauthorized"),
            Err(e) => fail(SgStatus::AdminFailed, e.to_string()),
        }
    })
}

/// Builds a request envelope with a fresh random nonce. `cert_token` may
/// be NULL for an unauthenticated request. The envelope is text and can
/// be passed to `sg_gateway_handle` with `strlen` as its length.
///
/// # Safety
/// String pointers must be valid; `out_envelope` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_encode_request(
    client_id: *const c_char,
    service: *const c_char,
    action: *const c_char,
    payload: *const c_char,
    cert_token: *const c_char,
    source_ip: u32,
    timestamp_s: u64,
    out_envelope: *mut *mut c_char,
) -> SgStatus {
    guard(|| {
        let client_id = try_arg!(str_arg(client_id, "client_id"));
        let service = try_arg!(str_arg(service, "service"));
        let action = try_arg!(str_arg(action, "action"));
        let payload = try_arg!(str_arg(payload, "payload"));
        if out_envelope.is_null() {
            return fail(SgStatus::NullArgument, "out_envelope is NULL");
        }
        let cert = if cert_token.is_null() {
            None
        } else {
            match AuthCertificate::from_token(try_arg!(str_arg(cert_token, "cert_token"))) {
                Ok(c) => Some(c),
                Err(e) => return fail(SgStatus::InvalidArgument, e),
            }
        };
        let req = match ServiceRequest::new(
            client_id,
            Ipv4Addr::from(source_ip),
            service,
            action,
            payload,
            cert,
            Nonce::random(),
            timestamp_s,
        ) {
            Ok(r) => r,
            Err(e) => return fail(SgStatus::InvalidArgument, e.to_string()),
        };
        match String::from_utf8(encode(&req)) {
            Ok(s) => put_string(out_envelope, s),
            Err(_) => fail(SgStatus::InvalidUtf8, "envelope is not text"),
        }
    })
}
