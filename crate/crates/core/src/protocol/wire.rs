//! Framed provisioning protocol over a byte stream.
//!
//! ```text
//! "MLC1" | type u8 | length u32 LE | payload
//! ```
//!
//! `0x01` carries a [`ModelRequest`], `0x02` the resulting [`HiddenModel`],
//! and `0x7F` an error: `u16 LE code | UTF-8 message`. One request and one
//! response per connection.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use super::{provide, HiddenModel, ModelRequest, Policy};
use crate::error::{Error, ProgramFailure, Result};
use crate::iee::HwParams;
use crate::nn::{ModelDef, ModelSecrets};

pub const FRAME_MAGIC: &[u8; 4] = b"MLC1";
pub const MSG_PROVISION_REQUEST: u8 = 0x01;
pub const MSG_PROVISION_RESPONSE: u8 = 0x02;
pub const MSG_ERROR: u8 = 0x7F;
pub const DEFAULT_MAX_FRAME: usize = 64 * 1024 * 1024;
const IO_TIMEOUT: Duration = Duration::from_secs(30);

/// Set to refuse all outgoing connections from this process.
pub const NETWORK_DENY_ENV: &str = "MLCAPSULE_DENY_NETWORK";

pub fn write_frame<W: Write>(w: &mut W, msg_type: u8, payload: &[u8]) -> Result<()> {
    let len = u32::try_from(payload.len()).map_err(|_| Error::InvalidArgument("frame payload too large".into()))?;
    let mut header = [0u8; 9];
    header[..4].copy_from_slice(FRAME_MAGIC);
    header[4] = msg_type;
    header[5..].copy_from_slice(&len.to_le_bytes());
    w.write_all(&header)?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame<R: Read>(r: &mut R, max_frame: usize) -> Result<(u8, Vec<u8>)> {
    let mut header = [0u8; 9];
    r.read_exact(&mut header)?;
    if &header[..4] != FRAME_MAGIC {
        return Err(Error::ParseError("bad frame magic".into()));
    }
    let msg_type = header[4];
    if ![MSG_PROVISION_REQUEST, MSG_PROVISION_RESPONSE, MSG_ERROR].contains(&msg_type) {
        return Err(Error::ParseError(format!("unknown message type {msg_type:#04x}")));
    }
    let len = u32::from_le_bytes(header[5..].try_into().unwrap()) as usize;
    if len > max_frame {
        return Err(Error::InvalidArgument(format!("frame of {len} bytes exceeds limit of {max_frame}")));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok((msg_type, payload))
}

pub fn error_payload(e: Error) -> Vec<u8> {
    let ProgramFailure { code, message } = e.into_failure();
    let mut out = code.to_le_bytes().to_vec();
    out.extend_from_slice(message.as_bytes());
    out
}

pub fn parse_error_payload(payload: &[u8]) -> Error {
    if payload.len() < 2 {
        return Error::Protocol {
            code: 0,
            message: "empty error frame".into(),
        };
    }
    let code = u16::from_le_bytes([payload[0], payload[1]]);
    let message = String::from_utf8_lossy(&payload[2..]).into_owned();
    match Error::from_failure(ProgramFailure {
        code,
        message: message.clone(),
    }) {
        Error::Program(_) => Error::Protocol { code, message },
        known => known,
    }
}

/// What the service provider needs to answer requests.
pub struct ProvisionService {
    pub def: ModelDef,
    pub secrets: ModelSecrets,
    pub policy: Policy,
    /// When set, only requests attested under these parameters are served.
    pub trusted_params: Option<HwParams>,
    pub max_frame: usize,
}

impl ProvisionService {
    pub fn new(def: ModelDef, secrets: ModelSecrets, policy: Policy) -> Result<Self> {
        def.validate()?;
        secrets.check(&def)?;
        policy.validate(&def)?;
        Ok(ProvisionService {
            def,
            secrets,
            policy,
            trusted_params: None,
            max_frame: DEFAULT_MAX_FRAME,
        })
    }

    pub fn answer(&self, req: &ModelRequest) -> Result<HiddenModel> {
        if let Some(p) = &self.trusted_params {
            if p != &req.hw_params {
                return Err(Error::QuoteInvalid);
            }
        }
        provide(&self.def, &self.secrets, &self.policy, req, &mut rand::rngs::OsRng)
    }

    fn handle(&self, stream: &mut TcpStream) -> Result<()> {
        stream.set_read_timeout(Some(IO_TIMEOUT))?;
        stream.set_write_timeout(Some(IO_TIMEOUT))?;
        let reply = read_frame(stream, self.max_frame).and_then(|(t, payload)| {
            if t != MSG_PROVISION_REQUEST {
                return Err(Error::ParseError(format!("expected a provision request, got {t:#04x}")));
            }
            self.answer(&ModelRequest::from_bytes(&payload)?)
        });
        match reply {
            Ok(hidden) => write_frame(stream, MSG_PROVISION_RESPONSE, &hidden.to_bytes()),
            Err(e) => write_frame(stream, MSG_ERROR, &error_payload(e)),
        }
    }
}

/// Running provisioning endpoint; dropping it does not stop the server.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `addr` and serves each connection on its own thread.
pub fn serve_provision<A: ToSocketAddrs>(addr: A, service: ProvisionService) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr).map_err(|e| Error::Transport(format!("bind: {e}")))?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let service = Arc::new(service);
    let flag = stop.clone();
    let thread = std::thread::spawn(move || {
        for conn in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(mut stream) = conn else { continue };
            let service = service.clone();
            std::thread::spawn(move || {
                let _ = service.handle(&mut stream);
            });
        }
    });
    Ok(ServerHandle {
        addr,
        stop,
        thread: Some(thread),
    })
}

/// Sends `req` to the provisioning endpoint at `addr` and waits for the
/// hidden model.
pub fn request_provision(addr: &str, req: &ModelRequest, max_frame: usize) -> Result<HiddenModel> {
    if std::env::var_os(NETWORK_DENY_ENV).is_some_and(|v| !v.is_empty() && v != "0") {
        return Err(Error::Transport("network access disabled".into()));
    }
    let target = addr
        .to_socket_addrs()
        .map_err(|e| Error::Transport(format!("{addr}: {e}")))?
        .next()
        .ok_or_else(|| Error::Transport(format!("{addr}: no address")))?;
    let mut stream =
        TcpStream::connect_timeout(&target, Duration::from_secs(10)).map_err(|e| Error::Transport(format!("{addr}: {e}")))?;
    stream.set_read_timeout(Some(IO_TIMEOUT))?;
    write_frame(&mut stream, MSG_PROVISION_REQUEST, &req.to_bytes()).map_err(transport)?;
    let (t, payload) = read_frame(&mut stream, max_frame).map_err(transport)?;
    match t {
        MSG_PROVISION_RESPONSE => HiddenModel::from_bytes(&payload),
        MSG_ERROR => Err(parse_error_payload(&payload)),
        other => Err(Error::Protocol {
            code: 0,
            message: format!("unexpected message type {other:#04x}"),
        }),
    }
}

fn transport(e: Error) -> Error {
    match e {
        Error::Io(io) => Error::Transport(io.to_string()),
        other => other,
    }
}
