use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::RngCore;
use soaguard::gateway::http::{self, HttpOptions};
use soaguard::gateway::{provision, Gateway, GatewayConfig, ProvisionOptions};
use soaguard::ims::CredentialTable;
use soaguard::store::{scan_plaintext, serve_store, FileBackend};

#[derive(Parser)]
#[command(
    name = "soaguard",
    version,
    about = "Security gateway for service-oriented e-commerce"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create keys, credentials, registry, rules and gateway.conf in DIR.
    Init {
        dir: PathBuf,
        /// `client_id:password`; repeatable. Defaults to alice:alice-password.
        #[arg(long = "user")]
        users: Vec<String>,
        #[arg(long)]
        admin_token: Option<String>,
        /// Override a config key (`key=value`); repeatable.
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        empty_rules: bool,
    },
    /// Run the HTTP gateway.
    Serve {
        #[arg(long, short)]
        config: PathBuf,
    },
    /// Serve the encrypted store to a gateway running the two-process profile.
    StoreServer {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: SocketAddr,
        #[arg(long)]
        no_fsync: bool,
    },
    /// Add or replace a user in a credentials file.
    Adduser {
        #[arg(long)]
        credentials: PathBuf,
        client_id: String,
        /// Read from stdin when omitted.
        #[arg(long)]
        password: Option<String>,
    },
    /// Write a fresh 32-byte key file.
    Keygen { path: PathBuf },
    /// Search a store file for plaintext probes.
    Scan {
        #[arg(long)]
        store: PathBuf,
        #[arg(required = true)]
        probes: Vec<String>,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().cmd {
        Cmd::Init {
            dir,
            users,
            admin_token,
            set,
            empty_rules,
        } => {
            let mut opts = ProvisionOptions {
                admin_token,
                empty_rules,
                ..Default::default()
            };
            if !users.is_empty() {
                opts.users = users
                    .iter()
                    .map(|u| {
                        u.split_once(':')
                            .map(|(a, b)| (a.to_string(), b.to_string()))
                            .with_context(|| format!("--user `{u}` is not client_id:password"))
                    })
                    .collect::<Result<_>>()?;
            }
            for kv in &set {
                let (k, v) = kv
                    .split_once('=')
                    .with_context(|| format!("--set `{kv}` is not key=value"))?;
                opts.extra.push((k.trim().to_string(), v.trim().to_string()));
            }
            let path = provision(&dir, &opts)?;
            println!("{}", path.display());
        }
        Cmd::Serve { config } => {
            let cfg = GatewayConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let now = http::system_now_us() / 1_000_000;
            let gateway = Arc::new(Gateway::from_config(&cfg, now)?);
            let opts = HttpOptions {
                clock: cfg.clock,
                trust_forwarded_for: cfg.trust_forwarded_for,
            };
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(cfg.listen).await?;
                tracing::info!(addr = %listener.local_addr()?, "gateway listening");
                http::serve(listener, gateway, opts, async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await
            })?;
        }
        Cmd::StoreServer {
            store,
            listen,
            no_fsync,
        } => {
            let backend = Arc::new(FileBackend::open_with(&store, !no_fsync)?);
            let listener = std::net::TcpListener::bind(listen)?;
            tracing::info!(addr = %listener.local_addr()?, store = %store.display(), "store server listening");
            serve_store(listener, backend)?;
        }
        Cmd::Adduser {
            credentials,
            client_id,
            password,
        } => {
            let password = match password {
                Some(p) => p,
                None => {
                    let mut line = String::new();
                    std::io::stdin().read_line(&mut line)?;
                    line.trim_end_matches(['\r', '\n']).to_string()
                }
            };
            if password.is_empty() {
                bail!("empty password");
            }
            let mut table = if credentials.exists() {
                CredentialTable::load(&credentials)?
            } else {
                CredentialTable::new()
            };
            table.add_user(&client_id, &password);
            std::fs::write(&credentials, table.to_file_string())?;
        }
        Cmd::Keygen { path } => {
            if path.exists() {
                bail!("{} already exists", path.display());
            }
            let mut key = [0u8; 32];
            rand::thread_rng().fill_bytes(&mut key);
            std::fs::write(&path, key)?;
        }
        Cmd::Scan { store, probes } => {
            let probes: Vec<Vec<u8>> = probes.into_iter().map(String::into_bytes).collect();
            let hits = scan_plaintext(&store, &probes)?;
            for h in &hits {
                println!("{} @ {}", String::from_utf8_lossy(&probes[h.probe]), h.offset);
            }
            if !hits.is_empty() {
                std::process::exit(1);
            }
        }
    }
    Ok(())
}
