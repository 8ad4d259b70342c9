//! TCP server: one listener thread, one reader thread per connection.
//!
//! Requests on a connection are handled inline in arrival order, except
//! blocking waits (WAIT_PUBLISHED), which get their own thread so a
//! parked caller never stalls other requests multiplexed on the same
//! connection.

use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crate::error::{Error, Result};
use crate::rpc::wire::{decode_request, encode_reply, read_frame, request_id_of};
use crate::rpc::{Reply, Request, Service};

pub struct TcpServer {
    addr: String,
    shutdown: Arc<AtomicBool>,
    accept_thread: Option<std::thread::JoinHandle<()>>,
}

impl TcpServer {
    /// Bind `listen` (may use port 0 for an ephemeral port) and serve
    /// `svc` until the server is dropped.
    pub fn spawn(listen: &str, svc: Arc<dyn Service>) -> Result<TcpServer> {
        let listener = TcpListener::bind(listen)
            .map_err(|e| Error::Connection(format!("bind {listen}: {e}")))?;
        let addr = listener
            .local_addr()
            .map_err(|e| Error::Connection(e.to_string()))?
            .to_string();
        listener
            .set_nonblocking(true)
            .map_err(|e| Error::Connection(e.to_string()))?;

        let shutdown = Arc::new(AtomicBool::new(false));
        let stop = shutdown.clone();
        let accept_thread = std::thread::Builder::new()
            .name(format!("rpc-accept-{addr}"))
            .spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            stream.set_nodelay(true).ok();
                            let svc = svc.clone();
                            std::thread::Builder::new()
                                .name("rpc-conn".into())
                                .spawn(move || serve_connection(stream, svc))
                                .expect("spawn connection thread");
                        }
                        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                            std::thread::sleep(Duration::from_millis(2));
                        }
                        Err(_) => break,
                    }
                }
            })
            .expect("spawn accept thread");

        Ok(TcpServer {
            addr,
            shutdown,
            accept_thread: Some(accept_thread),
        })
    }

    /// The bound address, e.g. `127.0.0.1:41234`.
    pub fn addr(&self) -> &str {
        &self.addr
    }
}

impl Drop for TcpServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

fn serve_connection(stream: TcpStream, svc: Arc<dyn Service>) {
    let writer = match stream.try_clone() {
        Ok(w) => Arc::new(Mutex::new(w)),
        Err(_) => return,
    };
    let mut reader = stream;
    loop {
        let payload = match read_frame(&mut reader) {
            Ok(p) => p,
            Err(_) => return, // peer gone or framing lost
        };
        match decode_request(&payload) {
            Ok((id, req)) => {
                // Blocking waits park in their own thread; everything else
                // completes quickly and runs inline.
                if matches!(req, Request::WaitPublished { .. }) {
                    let svc = svc.clone();
                    let writer = writer.clone();
                    std::thread::Builder::new()
                        .name("rpc-wait".into())
                        .spawn(move || {
                            let reply = svc.handle(req);
                            send_reply(&writer, id, &reply);
                        })
                        .expect("spawn wait thread");
                } else {
                    let reply = svc.handle(req);
                    if !send_reply(&writer, id, &reply) {
                        return;
                    }
                }
            }
            Err(e) => {
                // Unknown opcodes and malformed fields elicit an ERROR
                // frame; the connection stays up.
                let id = request_id_of(&payload).unwrap_or(0);
                if !send_reply(&writer, id, &Reply::from_error(&e)) {
                    return;
                }
            }
        }
    }
}

fn send_reply(writer: &Arc<Mutex<TcpStream>>, id: u64, reply: &Reply) -> bool {
    let frame = encode_reply(id, reply);
    writer.lock().unwrap().write_all(&frame).is_ok()
}
