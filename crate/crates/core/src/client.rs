//! The public blob API: create, read, write, append, sync, branch.
//!
//! A handle composes all services: the version manager for versioning,
//! the provider manager for placement, data providers for page transfers
//! and the metadata stores (via the tree engine) for descriptors. Handles
//! are cheap to clone and safe to share across threads; every operation
//! is internally parallel over its pages and there is no cross-operation
//! client-side locking.

use std::sync::Arc;

use crate::allocator::AllocClient;
use crate::error::{Error, Result};
use crate::id::{BlobId, PageId, Version};
use crate::metastore::MetaDht;
use crate::pagestore::PageClient;
use crate::par::{parallel_map, DEFAULT_FANOUT};
use crate::range::{page_span, ByteRange};
use crate::rpc::{Rpc, UpdateKind};
use crate::segtree::{MetaEngine, PageDescriptor, TreeConfig};
use crate::versioner::{BranchChain, VersionClient, WriteTicket, MAX_PSIZE};

/// Where the services live. Metadata store order is part of the
/// deployment contract: every client must list the same stores in the
/// same order for placement to agree.
#[derive(Debug, Clone)]
pub struct Endpoints {
    pub versioner: String,
    pub allocator: String,
    pub metastores: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    /// Concurrent page transfers per operation.
    pub fanout: usize,
    pub tree: TreeConfig,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            fanout: DEFAULT_FANOUT,
            tree: TreeConfig::default(),
        }
    }
}

/// Entry point: creates and opens blob handles against one deployment.
#[derive(Clone)]
pub struct BlobClient {
    rpc: Arc<Rpc>,
    eps: Endpoints,
    cfg: ClientConfig,
}

/// Per-update statistics, for benchmarking and storage audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateStats {
    pub version: Version,
    pub pages_stored: usize,
    pub bytes_stored: u64,
    pub nodes_written: usize,
}

impl BlobClient {
    pub fn new(rpc: Arc<Rpc>, eps: Endpoints) -> Self {
        Self::with_config(rpc, eps, ClientConfig::default())
    }

    pub fn with_config(rpc: Arc<Rpc>, eps: Endpoints, cfg: ClientConfig) -> Self {
        assert!(!eps.metastores.is_empty());
        Self { rpc, eps, cfg }
    }

    pub fn endpoints(&self) -> &Endpoints {
        &self.eps
    }

    /// Create a blob with the given page size (a power of two) and return
    /// a handle to its empty snapshot 0.
    pub fn create(&self, psize: u64) -> Result<BlobHandle> {
        if !psize.is_power_of_two() || psize == 0 || psize > MAX_PSIZE {
            return Err(Error::BadPsize);
        }
        let id = self.versioner().create_blob(psize)?;
        Ok(self.handle(id, psize, BranchChain::root(id)))
    }

    /// Open an existing blob by id, fetching its page size and ancestry.
    pub fn open(&self, id: BlobId) -> Result<BlobHandle> {
        let info = self.versioner().blob_info(id)?;
        Ok(self.handle(id, info.psize, info.chain))
    }

    fn versioner(&self) -> VersionClient {
        VersionClient::new(self.rpc.clone(), self.eps.versioner.clone())
    }

    fn handle(&self, id: BlobId, psize: u64, chain: BranchChain) -> BlobHandle {
        BlobHandle {
            inner: Arc::new(HandleInner {
                id,
                psize,
                chain,
                versioner: self.versioner(),
                alloc: AllocClient::new(self.rpc.clone(), self.eps.allocator.clone()),
                pages: PageClient::new(self.rpc.clone()),
                meta: MetaDht::new(self.rpc.clone(), self.eps.metastores.clone()),
                cfg: self.cfg.clone(),
                client: self.clone(),
            }),
        }
    }
}

struct HandleInner {
    id: BlobId,
    psize: u64,
    chain: BranchChain,
    versioner: VersionClient,
    alloc: AllocClient,
    pages: PageClient,
    meta: MetaDht,
    cfg: ClientConfig,
    client: BlobClient,
}

/// A handle on one blob. Clone freely; all methods take `&self`.
#[derive(Clone)]
pub struct BlobHandle {
    inner: Arc<HandleInner>,
}

impl std::fmt::Debug for BlobHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlobHandle")
            .field("id", &self.inner.id)
            .field("psize", &self.inner.psize)
            .finish()
    }
}

impl BlobHandle {
    pub fn id(&self) -> BlobId {
        self.inner.id
    }

    pub fn psize(&self) -> u64 {
        self.inner.psize
    }

    fn engine(&self) -> MetaEngine<'_> {
        MetaEngine::with_config(
            &self.inner.meta,
            &self.inner.chain,
            self.inner.psize,
            self.inner.cfg.tree.clone(),
        )
    }

    /// Bytes `[offset, offset + size)` of published snapshot `v`.
    pub fn read(&self, v: Version, offset: u64, size: u64) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; size as usize];
        self.read_into(v, offset, &mut buf)?;
        Ok(buf)
    }

    /// Fill `buf` from snapshot `v` starting at `offset`. Pages are
    /// fetched concurrently, partial pages as partial extents.
    pub fn read_into(&self, v: Version, offset: u64, buf: &mut [u8]) -> Result<()> {
        let size = buf.len() as u64;
        let size_v = self.inner.versioner.get_size(self.inner.id, v)?;
        let end = offset.checked_add(size).ok_or(Error::OutOfBounds)?;
        if end > size_v {
            return Err(Error::OutOfBounds);
        }
        if size == 0 {
            return Ok(());
        }
        let range = ByteRange::new(offset, size);
        let extents = self.engine().read_meta(v, range, size_v)?;

        // Extents tile the range disjointly, so the buffer splits into
        // non-overlapping slices that threads can fill independently.
        let mut jobs = Vec::with_capacity(extents.len());
        let mut rest = buf;
        let mut at = offset;
        for e in extents {
            if e.blob_off < at || e.blob_off + e.len > end {
                return Err(Error::Protocol("extents do not tile the range".into()));
            }
            let skip = (e.blob_off - at) as usize;
            let (_, tail) = rest.split_at_mut(skip);
            let (dst, tail) = tail.split_at_mut(e.len as usize);
            at = e.blob_off + e.len;
            rest = tail;
            jobs.push((e, dst));
        }
        let pages = &self.inner.pages;
        let results = parallel_map(jobs, self.inner.cfg.fanout, |_, (e, dst)| {
            let bytes = pages.get_page(&e.provider, e.pid, e.src_off, e.len)?;
            dst.copy_from_slice(&bytes);
            Ok::<(), Error>(())
        });
        for r in results {
            r?;
        }
        Ok(())
    }

    /// Replace `data.len()` bytes starting at `offset`, producing a new
    /// snapshot. Returns the assigned version, possibly before it is
    /// published.
    pub fn write(&self, offset: u64, data: &[u8]) -> Result<Version> {
        self.write_with_stats(offset, data).map(|s| s.version)
    }

    pub fn write_with_stats(&self, offset: u64, data: &[u8]) -> Result<UpdateStats> {
        if data.is_empty() {
            return Err(Error::Malformed("empty update".into()));
        }
        // pages first, then the version: the update only becomes visible
        // to the version manager once its data is durable
        let pd = self.store_pages(offset, data)?;
        let ticket = self.inner.versioner.assign_version(
            self.inner.id,
            UpdateKind::Write,
            offset,
            data.len() as u64,
        )?;
        self.finish_update(ticket, offset, data.len() as u64, pd)
    }

    /// Append `data` at the end of the most recent snapshot.
    pub fn append(&self, data: &[u8]) -> Result<Version> {
        self.append_with_stats(data).map(|s| s.version)
    }

    pub fn append_with_stats(&self, data: &[u8]) -> Result<UpdateStats> {
        if data.is_empty() {
            return Err(Error::Malformed("empty update".into()));
        }
        // the effective offset only exists once the version is assigned,
        // so an append registers before storing its pages
        let ticket = self.inner.versioner.assign_version(
            self.inner.id,
            UpdateKind::Append,
            0,
            data.len() as u64,
        )?;
        let offset = ticket.effective_offset;
        let pd = self.store_pages(offset, data)?;
        self.finish_update(ticket, offset, data.len() as u64, pd)
    }

    /// Split an update into per-page objects and store them in parallel
    /// on allocated providers. Boundary pages store only the written
    /// bytes.
    fn store_pages(&self, offset: u64, data: &[u8]) -> Result<Vec<PageDescriptor>> {
        let psize = self.inner.psize;
        let range = ByteRange::new(offset, data.len() as u64);
        let (p0, np) = page_span(range, psize);
        let providers = self.inner.alloc.allocate(np as usize)?;

        let mut jobs = Vec::with_capacity(np as usize);
        for i in 0..np {
            let page = p0 + i;
            let start = range.offset.max(page * psize);
            let end = range.end().min((page + 1) * psize);
            let slice = &data[(start - offset) as usize..(end - offset) as usize];
            let pd = PageDescriptor {
                pid: PageId::random(),
                index: i,
                provider: providers[i as usize].clone(),
                page_off: (start - page * psize) as u32,
                len: (end - start) as u32,
            };
            jobs.push((pd, slice));
        }
        let pages = &self.inner.pages;
        let results = parallel_map(jobs, self.inner.cfg.fanout, |_, (pd, slice)| {
            pages
                .put_page(&pd.provider, pd.pid, slice.to_vec())
                .map(|()| pd)
        });
        results.into_iter().collect()
    }

    fn finish_update(
        &self,
        ticket: WriteTicket,
        offset: u64,
        size: u64,
        pd: Vec<PageDescriptor>,
    ) -> Result<UpdateStats> {
        let vw = ticket.vw;
        let nodes_written =
            self.engine()
                .build_meta(&ticket, ByteRange::new(offset, size), &pd)?;
        self.inner.versioner.notify_success(self.inner.id, vw)?;
        Ok(UpdateStats {
            version: vw,
            pages_stored: pd.len(),
            bytes_stored: size,
            nodes_written,
        })
    }

    /// Block until snapshot `v` is published.
    pub fn sync(&self, v: Version) -> Result<()> {
        self.inner.versioner.wait_published(self.inner.id, v, None)
    }

    pub fn sync_timeout(&self, v: Version, timeout: std::time::Duration) -> Result<()> {
        self.inner
            .versioner
            .wait_published(self.inner.id, v, Some(timeout))
    }

    /// The highest published version.
    pub fn recent(&self) -> Result<Version> {
        self.inner.versioner.get_recent(self.inner.id)
    }

    /// Size of published snapshot `v`.
    pub fn size(&self, v: Version) -> Result<u64> {
        self.inner.versioner.get_size(self.inner.id, v)
    }

    /// Fork a new blob identical to this one up to published version `v`.
    pub fn branch(&self, v: Version) -> Result<BlobHandle> {
        let bid = self.inner.versioner.branch(self.inner.id, v)?;
        self.inner.client.open(bid)
    }
}
