//! Loopback and TCP transports behind one call interface.

use std::collections::HashMap;
use std::io::Write;
use std::net::TcpStream;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, LazyLock, Mutex, RwLock};
use std::time::Duration;

use crate::error::{Error, Result};
use crate::rpc::wire::{decode_reply, decode_request, encode_reply, encode_request, read_frame};
use crate::rpc::{Reply, Request, Service};

/// Default per-call timeout. Waiting calls (SYNC) pass their own.
pub const DEFAULT_CALL_TIMEOUT: Duration = Duration::from_secs(30);

static LOOPBACK: LazyLock<RwLock<HashMap<String, Arc<dyn Service>>>> =
    LazyLock::new(|| RwLock::new(HashMap::new()));
static LOOPBACK_SEQ: AtomicU64 = AtomicU64::new(1);

/// A fresh process-unique loopback address with the given prefix.
pub fn loopback_addr(prefix: &str) -> String {
    format!("mem:{prefix}-{}", LOOPBACK_SEQ.fetch_add(1, Ordering::Relaxed))
}

/// Register a service under a `mem:` address. The returned guard removes
/// the registration when dropped.
pub fn register_loopback(addr: &str, svc: Arc<dyn Service>) -> LoopbackGuard {
    assert!(addr.starts_with("mem:"), "loopback addresses start with mem:");
    let prev = LOOPBACK
        .write()
        .unwrap()
        .insert(addr.to_string(), svc);
    assert!(prev.is_none(), "loopback address {addr} already registered");
    LoopbackGuard {
        addr: addr.to_string(),
    }
}

pub struct LoopbackGuard {
    addr: String,
}

impl Drop for LoopbackGuard {
    fn drop(&mut self) {
        LOOPBACK.write().unwrap().remove(&self.addr);
    }
}

/// Caller-side transport multiplexer: one connection per TCP endpoint,
/// shared by all threads; `mem:` endpoints dispatch in-process. Either
/// way the message passes through the frame codec.
pub struct Rpc {
    pool: Mutex<HashMap<String, Arc<TcpConn>>>,
    next_loopback_id: AtomicU64,
    pub call_timeout: Duration,
}

impl Default for Rpc {
    fn default() -> Self {
        Self::new()
    }
}

impl Rpc {
    pub fn new() -> Self {
        Self {
            pool: Mutex::new(HashMap::new()),
            next_loopback_id: AtomicU64::new(1),
            call_timeout: DEFAULT_CALL_TIMEOUT,
        }
    }

    pub fn with_timeout(timeout: Duration) -> Self {
        Self {
            call_timeout: timeout,
            ..Self::new()
        }
    }

    /// Issue one request and wait for the matching reply.
    pub fn call(&self, addr: &str, req: Request) -> Result<Reply> {
        self.call_with_timeout(addr, req, Some(self.call_timeout))
    }

    /// As [`Rpc::call`] with an explicit deadline; `None` waits forever.
    pub fn call_with_timeout(
        &self,
        addr: &str,
        req: Request,
        timeout: Option<Duration>,
    ) -> Result<Reply> {
        if addr.starts_with("mem:") {
            return self.call_loopback(addr, req);
        }
        self.call_tcp(addr, req, timeout)
    }

    fn call_loopback(&self, addr: &str, req: Request) -> Result<Reply> {
        let svc = LOOPBACK
            .read()
            .unwrap()
            .get(addr)
            .cloned()
            .ok_or_else(|| Error::Connection(format!("no loopback service at {addr}")))?;
        let id = self.next_loopback_id.fetch_add(1, Ordering::Relaxed);
        // Round-trip through the codec so loopback exercises the exact
        // same byte format as TCP.
        let frame = encode_request(id, &req);
        let (got_id, decoded) = decode_request(&frame[4..])?;
        debug_assert_eq!(got_id, id);
        let reply = svc.handle(decoded);
        let frame = encode_reply(id, &reply);
        let (reply_id, decoded) = decode_reply(&frame[4..])?;
        if reply_id != id {
            return Err(Error::Protocol("reply id mismatch".into()));
        }
        Ok(decoded)
    }

    fn call_tcp(&self, addr: &str, req: Request, timeout: Option<Duration>) -> Result<Reply> {
        let conn = self.get_conn(addr)?;
        match conn.call(&req, timeout) {
            Err(Error::Connection(_)) if conn.dead.load(Ordering::SeqCst) => {
                // Stale pooled connection; reconnect once.
                self.evict(addr, &conn);
                let conn = self.get_conn(addr)?;
                conn.call(&req, timeout)
            }
            other => other,
        }
    }

    fn get_conn(&self, addr: &str) -> Result<Arc<TcpConn>> {
        let mut pool = self.pool.lock().unwrap();
        if let Some(conn) = pool.get(addr) {
            if !conn.dead.load(Ordering::SeqCst) {
                return Ok(conn.clone());
            }
            pool.remove(addr);
        }
        let conn = Arc::new(TcpConn::connect(addr)?);
        pool.insert(addr.to_string(), conn.clone());
        Ok(conn)
    }

    fn evict(&self, addr: &str, conn: &Arc<TcpConn>) {
        let mut pool = self.pool.lock().unwrap();
        if let Some(current) = pool.get(addr) {
            if Arc::ptr_eq(current, conn) {
                pool.remove(addr);
            }
        }
    }
}

type PendingMap = Mutex<HashMap<u64, mpsc::SyncSender<Vec<u8>>>>;

struct TcpConn {
    writer: Mutex<TcpStream>,
    pending: Arc<PendingMap>,
    next_id: AtomicU64,
    dead: Arc<AtomicBool>,
}

impl TcpConn {
    fn connect(addr: &str) -> Result<TcpConn> {
        let stream = TcpStream::connect(addr)
            .map_err(|e| Error::Connection(format!("connect {addr}: {e}")))?;
        stream.set_nodelay(true).ok();
        let reader = stream
            .try_clone()
            .map_err(|e| Error::Connection(format!("clone stream: {e}")))?;
        let pending: Arc<PendingMap> = Arc::new(Mutex::new(HashMap::new()));
        let dead = Arc::new(AtomicBool::new(false));

        let pending2 = pending.clone();
        let dead2 = dead.clone();
        std::thread::Builder::new()
            .name("rpc-reader".into())
            .spawn(move || {
                let mut reader = reader;
                loop {
                    match read_frame(&mut reader) {
                        Ok(payload) => {
                            let id = super::wire::request_id_of(&payload).unwrap_or(0);
                            let sender = pending2.lock().unwrap().remove(&id);
                            if let Some(tx) = sender {
                                let _ = tx.send(payload);
                            }
                            // replies nobody waits for (timed-out calls) are dropped
                        }
                        Err(_) => {
                            dead2.store(true, Ordering::SeqCst);
                            // wake every waiter by dropping its sender
                            pending2.lock().unwrap().clear();
                            return;
                        }
                    }
                }
            })
            .expect("spawn rpc reader");

        Ok(TcpConn {
            writer: Mutex::new(stream),
            pending,
            next_id: AtomicU64::new(1),
            dead,
        })
    }

    fn call(&self, req: &Request, timeout: Option<Duration>) -> Result<Reply> {
        if self.dead.load(Ordering::SeqCst) {
            return Err(Error::Connection("connection closed".into()));
        }
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::sync_channel(1);
        self.pending.lock().unwrap().insert(id, tx);

        let frame = encode_request(id, req);
        {
            let mut w = self.writer.lock().unwrap();
            if let Err(e) = w.write_all(&frame) {
                self.pending.lock().unwrap().remove(&id);
                self.dead.store(true, Ordering::SeqCst);
                return Err(Error::Connection(format!("send: {e}")));
            }
        }

        let payload = match timeout {
            Some(t) => rx.recv_timeout(t).map_err(|e| match e {
                mpsc::RecvTimeoutError::Timeout => {
                    self.pending.lock().unwrap().remove(&id);
                    Error::Timeout
                }
                mpsc::RecvTimeoutError::Disconnected => {
                    Error::Connection("connection closed".into())
                }
            })?,
            None => rx
                .recv()
                .map_err(|_| Error::Connection("connection closed".into()))?,
        };
        let (reply_id, reply) = decode_reply(&payload)?;
        if reply_id != id {
            return Err(Error::Protocol("reply id mismatch".into()));
        }
        Ok(reply)
    }
}
