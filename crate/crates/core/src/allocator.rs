//! The provider manager: tracks registered data providers and answers
//! page-placement requests, keeping the page distribution even.
//!
//! Placement is least-loaded with round-robin tie-breaking. Load
//! estimates are the last reported page count plus one optimistic
//! increment per slot handed out since, so no feedback round-trip is
//! needed on the write path.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::rpc::{Reply, Request, Rpc, Service};

struct Entry {
    addr: String,
    load: u64,
    last_heartbeat: Instant,
}

#[derive(Default)]
struct Inner {
    providers: Vec<Entry>,
    by_addr: HashMap<String, usize>,
    cursor: usize,
}

#[derive(Default)]
pub struct Allocator {
    inner: Mutex<Inner>,
}

impl Allocator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a provider (or refresh its heartbeat if already known).
    pub fn register(&self, addr: &str) {
        let mut inner = self.inner.lock().unwrap();
        if let Some(&i) = inner.by_addr.get(addr) {
            inner.providers[i].last_heartbeat = Instant::now();
            return;
        }
        let index = inner.providers.len();
        inner.providers.push(Entry {
            addr: addr.to_string(),
            load: 0,
            last_heartbeat: Instant::now(),
        });
        inner.by_addr.insert(addr.to_string(), index);
    }

    /// Pick `n` providers, one per page slot. Addresses repeat when `n`
    /// exceeds the provider count. Each returned slot bumps that
    /// provider's load estimate by one page.
    pub fn allocate(&self, n: usize) -> Result<Vec<String>> {
        let mut inner = self.inner.lock().unwrap();
        if inner.providers.is_empty() {
            return Err(Error::NoProviders);
        }
        let count = inner.providers.len();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let min = inner.providers.iter().map(|p| p.load).min().unwrap();
            // among the least-loaded, take the next one at or after the
            // cursor in registration order
            let chosen = (0..count)
                .map(|k| (inner.cursor + k) % count)
                .find(|&i| inner.providers[i].load == min)
                .unwrap();
            inner.cursor = (chosen + 1) % count;
            inner.providers[chosen].load += 1;
            out.push(inner.providers[chosen].addr.clone());
        }
        Ok(out)
    }

    /// Replace a provider's load estimate with its reported page count.
    pub fn report(&self, addr: &str, pages: u64) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        match inner.by_addr.get(addr).copied() {
            Some(i) => {
                inner.providers[i].load = pages;
                inner.providers[i].last_heartbeat = Instant::now();
                Ok(())
            }
            None => Err(Error::UnknownProvider),
        }
    }

    pub fn provider_count(&self) -> usize {
        self.inner.lock().unwrap().providers.len()
    }
}

impl Service for Allocator {
    fn handle(&self, req: Request) -> Reply {
        match req {
            Request::Register { addr } => {
                self.register(&addr);
                Reply::Register
            }
            Request::Allocate { n } => match self.allocate(n as usize) {
                Ok(providers) => Reply::Allocate { providers },
                Err(e) => Reply::from_error(&e),
            },
            Request::Report { addr, pages } => match self.report(&addr, pages) {
                Ok(()) => Reply::Report,
                Err(e) => Reply::from_error(&e),
            },
            _ => Reply::from_error(&Error::Unsupported),
        }
    }
}

/// Caller-side handle on the provider manager.
#[derive(Clone)]
pub struct AllocClient {
    rpc: Arc<Rpc>,
    addr: String,
}

impl AllocClient {
    pub fn new(rpc: Arc<Rpc>, addr: String) -> Self {
        Self { rpc, addr }
    }

    pub fn register(&self, provider: &str) -> Result<()> {
        match self.rpc.call(
            &self.addr,
            Request::Register {
                addr: provider.to_string(),
            },
        )? {
            Reply::Register => Ok(()),
            other => Err(other.into_unexpected("REGISTER")),
        }
    }

    pub fn allocate(&self, n: usize) -> Result<Vec<String>> {
        match self.rpc.call(&self.addr, Request::Allocate { n: n as u32 })? {
            Reply::Allocate { providers } => Ok(providers),
            other => Err(other.into_unexpected("ALLOCATE")),
        }
    }

    pub fn report(&self, provider: &str, pages: u64) -> Result<()> {
        match self.rpc.call(
            &self.addr,
            Request::Report {
                addr: provider.to_string(),
                pages,
            },
        )? {
            Reply::Report => Ok(()),
            other => Err(other.into_unexpected("REPORT")),
        }
    }
}
