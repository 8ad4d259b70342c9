//! A data provider: physically stores the immutable page objects
//! generated by writes and appends.
//!
//! Objects are write-once and may be shorter than the page size: an
//! unaligned boundary write stores only the bytes it actually wrote, so
//! space is consumed strictly by new data.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crate::error::{Error, Result};
use crate::id::PageId;
use crate::rpc::{Reply, Request, Rpc, Service};

#[derive(Debug, Clone, Default)]
pub struct PageStoreConfig {
    /// Reject puts that would push the byte total past this limit.
    pub capacity_bytes: Option<u64>,
    /// Write-through dump directory: one file per pid, named by the 32
    /// lowercase hex chars of the page id.
    pub dump_dir: Option<PathBuf>,
    /// Artificial per-request latency, for latency-shape tests.
    pub delay: Option<Duration>,
}

#[derive(Default)]
struct Inner {
    pages: HashMap<PageId, Arc<Vec<u8>>>,
    bytes: u64,
}

/// One provider's state. Per-pid insertion is atomic; readers never see
/// torn payloads because stored bytes are immutable behind an `Arc`.
pub struct PageStore {
    cfg: PageStoreConfig,
    inner: Mutex<Inner>,
}

impl PageStore {
    pub fn new(cfg: PageStoreConfig) -> Self {
        Self {
            cfg,
            inner: Mutex::new(Inner::default()),
        }
    }

    pub fn in_memory() -> Self {
        Self::new(PageStoreConfig::default())
    }

    fn pause(&self) {
        if let Some(d) = self.cfg.delay {
            std::thread::sleep(d);
        }
    }

    pub fn put_page(&self, pid: PageId, bytes: Vec<u8>) -> Result<()> {
        self.pause();
        if bytes.is_empty() {
            return Err(Error::Malformed("empty page object".into()));
        }
        let written = {
            let mut inner = self.inner.lock().unwrap();
            match inner.pages.get(&pid) {
                Some(existing) if **existing == bytes => return Ok(()), // idempotent
                Some(_) => return Err(Error::Conflict),
                None => {}
            }
            if let Some(cap) = self.cfg.capacity_bytes {
                if inner.bytes + bytes.len() as u64 > cap {
                    return Err(Error::StoreFull);
                }
            }
            let arc = Arc::new(bytes);
            inner.bytes += arc.len() as u64;
            inner.pages.insert(pid, arc.clone());
            arc
        };
        if let Some(dir) = &self.cfg.dump_dir {
            // Both racers of an idempotent double-put write identical
            // bytes, so dumping outside the lock is safe.
            let path = dir.join(pid.to_hex());
            if let Err(e) = std::fs::write(&path, written.as_slice()) {
                return Err(Error::Connection(format!("dump {path:?}: {e}")));
            }
        }
        Ok(())
    }

    pub fn get_page(&self, pid: PageId, offset: u64, len: u64) -> Result<Vec<u8>> {
        self.pause();
        let obj = self
            .inner
            .lock()
            .unwrap()
            .pages
            .get(&pid)
            .cloned()
            .ok_or(Error::NotFound)?;
        let end = offset
            .checked_add(len)
            .ok_or(Error::Range)?;
        if end > obj.len() as u64 {
            return Err(Error::Range);
        }
        Ok(obj[offset as usize..end as usize].to_vec())
    }

    /// Current totals: (page count, byte count). Monotone non-decreasing.
    pub fn usage(&self) -> (u64, u64) {
        let inner = self.inner.lock().unwrap();
        (inner.pages.len() as u64, inner.bytes)
    }
}

impl Service for PageStore {
    fn handle(&self, req: Request) -> Reply {
        match req {
            Request::PutPage { pid, bytes } => match self.put_page(pid, bytes) {
                Ok(()) => Reply::PutPage,
                Err(e) => Reply::from_error(&e),
            },
            Request::GetPage { pid, offset, len } => match self.get_page(pid, offset, len) {
                Ok(bytes) => Reply::GetPage { bytes },
                Err(e) => Reply::from_error(&e),
            },
            Request::Usage => {
                let (pages, bytes) = self.usage();
                Reply::Usage { pages, bytes }
            }
            _ => Reply::from_error(&Error::Unsupported),
        }
    }
}

/// Caller-side handle for page transfers to any provider address.
#[derive(Clone)]
pub struct PageClient {
    rpc: Arc<Rpc>,
}

impl PageClient {
    pub fn new(rpc: Arc<Rpc>) -> Self {
        Self { rpc }
    }

    pub fn put_page(&self, provider: &str, pid: PageId, bytes: Vec<u8>) -> Result<()> {
        match self.rpc.call(provider, Request::PutPage { pid, bytes })? {
            Reply::PutPage => Ok(()),
            other => Err(other.into_unexpected("PUT_PAGE")),
        }
    }

    pub fn get_page(&self, provider: &str, pid: PageId, offset: u64, len: u64) -> Result<Vec<u8>> {
        match self
            .rpc
            .call(provider, Request::GetPage { pid, offset, len })?
        {
            Reply::GetPage { bytes } => Ok(bytes),
            other => Err(other.into_unexpected("GET_PAGE")),
        }
    }

    pub fn usage(&self, provider: &str) -> Result<(u64, u64)> {
        match self.rpc.call(provider, Request::Usage)? {
            Reply::Usage { pages, bytes } => Ok((pages, bytes)),
            other => Err(other.into_unexpected("USAGE")),
        }
    }
}
