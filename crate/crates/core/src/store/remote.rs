//! Store channel for the two-process deployment.
//!
//! Frames are `[u8 op][u32 len][body]` one way and `[u8 status][u32 len][body]`
//! back, lengths little-endian. Only sealed records cross the channel.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::Arc;

use parking_lot::Mutex;

use super::{EncryptedRecord, FileBackend, RecordBackend, StoreError};

const OP_PUT: u8 = 1;
const OP_GET: u8 = 2;
const OP_DELETE: u8 = 3;

const ST_OK: u8 = 0;
const ST_NOT_FOUND: u8 = 1;
const ST_ERR: u8 = 2;

const MAX_FRAME: u32 = 64 << 20;

fn write_frame(w: &mut impl Write, tag: u8, body: &[u8]) -> io::Result<()> {
    w.write_all(&[tag])?;
    w.write_all(&(body.len() as u32).to_le_bytes())?;
    w.write_all(body)?;
    w.flush()
}

fn read_frame(r: &mut impl Read) -> io::Result<(u8, Vec<u8>)> {
    let mut head = [0u8; 5];
    r.read_exact(&mut head)?;
    let len = u32::from_le_bytes(head[1..].try_into().unwrap());
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    Ok((head[0], body))
}

fn handle_connection(stream: TcpStream, backend: &FileBackend) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    loop {
        let (op, body) = match read_frame(&mut reader) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        };
        let reply = match op {
            OP_PUT => EncryptedRecord::decode_from(&body)
                .and_then(|(rec, _)| backend.put_record(rec))
                .map(|_| Vec::new()),
            OP_GET => match std::str::from_utf8(&body) {
                Ok(key) => match backend.get_record(key) {
                    Ok(Some(rec)) => {
                        let mut out = Vec::new();
                        rec.encode_into(&mut out);
                        Ok(out)
                    }
                    Ok(None) => Err(StoreError::NotFound),
                    Err(e) => Err(e),
                },
                Err(_) => Err(StoreError::Backend("record key not UTF-8".into())),
            },
            OP_DELETE => match std::str::from_utf8(&body) {
                Ok(key) => backend.delete_record(key).map(|_| Vec::new()),
                Err(_) => Err(StoreError::Backend("record key not UTF-8".into())),
            },
            other => Err(StoreError::Backend(format!("unknown op {other}"))),
        };
        match reply {
            Ok(body) => write_frame(&mut writer, ST_OK, &body)?,
            Err(StoreError::NotFound) => write_frame(&mut writer, ST_NOT_FOUND, &[])?,
            Err(e) => write_frame(&mut writer, ST_ERR, e.to_string().as_bytes())?,
        }
    }
}

/// Serves the store on `listener` until the listener fails.
pub fn serve_store(listener: TcpListener, backend: Arc<FileBackend>) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let backend = Arc::clone(&backend);
        std::thread::spawn(move || {
            let peer = stream.peer_addr().ok();
            if let Err(e) = handle_connection(stream, &backend) {
                tracing::warn!(?peer, error = %e, "store connection closed");
            }
        });
    }
    Ok(())
}

/// Client side of the store channel.
#[derive(Debug)]
pub struct RemoteBackend {
    addr: SocketAddr,
    conn: Mutex<Option<TcpStream>>,
}

impl RemoteBackend {
    pub fn new(addr: SocketAddr) -> Self {
        RemoteBackend {
            addr,
            conn: Mutex::new(None),
        }
    }

    fn call(&self, op: u8, body: &[u8]) -> Result<(u8, Vec<u8>), StoreError> {
        let mut conn = self.conn.lock();
        // one reconnect attempt on a stale connection
        for attempt in 0..2 {
            if conn.is_none() {
                let s = TcpStream::connect(self.addr)?;
                s.set_nodelay(true)?;
                *conn = Some(s);
            }
            let stream = conn.as_mut().unwrap();
            let res = write_frame(stream, op, body).and_then(|_| read_frame(stream));
            match res {
                Ok(reply) => return Ok(reply),
                Err(e) if attempt == 0 => {
                    tracing::debug!(error = %e, "store channel reconnecting");
                    *conn = None;
                }
                Err(e) => {
                    *conn = None;
                    return Err(e.into());
                }
            }
        }
        unreachable!()
    }

    fn expect_ok(reply: (u8, Vec<u8>)) -> Result<Vec<u8>, StoreError> {
        match reply {
            (ST_OK, body) => Ok(body),
            (ST_NOT_FOUND, _) => Err(StoreError::NotFound),
            (_, msg) => Err(StoreError::Backend(String::from_utf8_lossy(&msg).into_owned())),
        }
    }
}

impl RecordBackend for RemoteBackend {
    fn put_record(&self, record: EncryptedRecord) -> Result<(), StoreError> {
        let mut body = Vec::new();
        record.encode_into(&mut body);
        Self::expect_ok(self.call(OP_PUT, &body)?).map(|_| ())
    }

    fn get_record(&self, record_key: &str) -> Result<Option<EncryptedRecord>, StoreError> {
        match Self::expect_ok(self.call(OP_GET, record_key.as_bytes())?) {
            Ok(body) => Ok(Some(EncryptedRecord::decode_from(&body)?.0)),
            Err(StoreError::NotFound) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn delete_record(&self, record_key: &str) -> Result<(), StoreError> {
        Self::expect_ok(self.call(OP_DELETE, record_key.as_bytes())?).map(|_| ())
    }
}
