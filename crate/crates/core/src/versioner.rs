//! The version manager: assigns snapshot versions in total order, tracks
//! update ranges and snapshot sizes, publishes versions strictly in
//! order, answers recency/size/sync queries and owns the branch registry.
//!
//! Publication is the linearization point of an update: a version becomes
//! visible to readers only once every smaller version has been published.
//! All operations serialize through one mutex; `wait_published` parks the
//! caller on a condvar without holding it.

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::id::{BlobId, Version};
use crate::range::{pages_for, root_cover, ByteRange};
use crate::rpc::{Reply, Request, Rpc, Service, UpdateKind};

/// Largest allowed page size; keeps every page frame under the 16 MiB
/// wire limit.
pub const MAX_PSIZE: u64 = 8 * 1024 * 1024;

/// One assigned-but-unpublished update overlapping a new write ticket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConcurrentUpdate {
    pub version: Version,
    /// Byte range the update replaces (effective offset and size).
    pub range: ByteRange,
    /// Root extent (in pages) of the tree that update builds.
    pub root_pages: u64,
}

/// The version manager's grant to a writer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteTicket {
    /// The assigned snapshot version.
    pub vw: Version,
    /// Where the update lands: the requested offset for a write, the
    /// previous snapshot size for an append.
    pub effective_offset: u64,
    /// Size of snapshot vw - 1.
    pub prev_size: u64,
    /// Reference published version for border computation.
    pub vp: Version,
    /// Size of snapshot vp.
    pub vp_size: u64,
    /// Every assigned-but-unpublished version in (vp, vw), with its range.
    /// Complete at assignment time.
    pub concurrent: Vec<ConcurrentUpdate>,
}

/// One step in a blob's ancestry: this blob, and the version at which it
/// forked off its parent (`None` for a root blob).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainLink {
    pub blob: BlobId,
    pub fork: Option<Version>,
}

/// A blob's ancestry, starting at the blob itself and ending at a root.
/// Maps any version to the blob whose metadata tree physically holds it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchChain {
    links: Vec<ChainLink>,
}

impl BranchChain {
    pub fn new(links: Vec<ChainLink>) -> Result<Self> {
        let ok = !links.is_empty()
            && links.last().unwrap().fork.is_none()
            && links[..links.len() - 1].iter().all(|l| l.fork.is_some());
        if !ok {
            return Err(Error::Malformed("invalid branch chain".into()));
        }
        Ok(Self { links })
    }

    pub fn root(blob: BlobId) -> Self {
        Self {
            links: vec![ChainLink { blob, fork: None }],
        }
    }

    pub fn links(&self) -> &[ChainLink] {
        &self.links
    }

    pub fn blob(&self) -> BlobId {
        self.links[0].blob
    }

    /// The blob whose tree holds version `v`: walk parent links while the
    /// version is at or below the fork point.
    pub fn owner_of(&self, v: Version) -> BlobId {
        for link in &self.links {
            match link.fork {
                Some(fork) if v <= fork => continue,
                _ => return link.blob,
            }
        }
        unreachable!("chain ends in a root link")
    }
}

/// Per-blob facts a client needs before touching data: the page size
/// fixed at creation and the branch ancestry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlobInfo {
    pub psize: u64,
    pub chain: BranchChain,
}

struct Rec {
    range: ByteRange,
    size: u64,
    notified: bool,
}

struct BlobState {
    psize: u64,
    parent: Option<(BlobId, Version)>,
    /// First version owned by this blob (1, or fork + 1 for branches).
    first_own: Version,
    /// Next version to assign.
    next: Version,
    /// Highest published version visible on this blob.
    published: Version,
    /// Records for own versions, indexed by v - first_own.
    records: Vec<Rec>,
}

#[derive(Default)]
struct Inner {
    blobs: HashMap<BlobId, BlobState>,
}

impl Inner {
    fn state(&self, blob: BlobId) -> Result<&BlobState> {
        self.blobs.get(&blob).ok_or(Error::UnknownBlob)
    }

    /// Size of snapshot `v`, resolving through branch parents. The caller
    /// guarantees `v` exists in the lineage.
    fn snapshot_size(&self, blob: BlobId, v: Version) -> u64 {
        let mut b = blob;
        loop {
            let st = &self.blobs[&b];
            if v >= st.first_own {
                return st.records[(v - st.first_own) as usize].size;
            }
            match st.parent {
                Some((p, _)) => b = p,
                None => return 0, // v == 0 on a root blob
            }
        }
    }

    fn resolve_owner(&self, blob: BlobId, v: Version) -> Result<BlobId> {
        let mut b = blob;
        loop {
            let st = self.state(b)?;
            match st.parent {
                Some((p, fork)) if v <= fork => b = p,
                _ => return Ok(b),
            }
        }
    }
}

/// The version manager service.
pub struct Versioner {
    inner: Mutex<Inner>,
    published_cv: Condvar,
}

impl Default for Versioner {
    fn default() -> Self {
        Self::new()
    }
}

impl Versioner {
    pub fn new() -> Self {
        Self {
            inner: Mutex::new(Inner::default()),
            published_cv: Condvar::new(),
        }
    }

    /// Create a blob: a fresh id with the empty snapshot 0 published.
    pub fn create_blob(&self, psize: u64) -> Result<BlobId> {
        if !psize.is_power_of_two() || psize == 0 || psize > MAX_PSIZE {
            return Err(Error::BadPsize);
        }
        let id = BlobId::random();
        self.inner.lock().unwrap().blobs.insert(
            id,
            BlobState {
                psize,
                parent: None,
                first_own: 1,
                next: 1,
                published: 0,
                records: Vec::new(),
            },
        );
        Ok(id)
    }

    /// Assign the next version for an update and return the write ticket.
    /// The version record is registered (unpublished) before returning,
    /// so later tickets see this update as concurrent.
    pub fn assign_version(
        &self,
        blob: BlobId,
        kind: UpdateKind,
        offset: u64,
        size: u64,
    ) -> Result<WriteTicket> {
        if size == 0 {
            return Err(Error::Malformed("zero-size update".into()));
        }
        let mut inner = self.inner.lock().unwrap();
        inner.state(blob)?;
        let prev_version = inner.blobs[&blob].next - 1;
        let prev_size = inner.snapshot_size(blob, prev_version);
        let effective_offset = match kind {
            UpdateKind::Write => {
                if offset > prev_size {
                    return Err(Error::OffsetBeyondEnd);
                }
                offset
            }
            UpdateKind::Append => prev_size,
        };

        let psize = inner.blobs[&blob].psize;
        let vp = inner.blobs[&blob].published;
        let vp_size = inner.snapshot_size(blob, vp);

        let st = inner.blobs.get_mut(&blob).unwrap();
        let vw = st.next;
        st.next += 1;
        st.records.push(Rec {
            range: ByteRange::new(effective_offset, size),
            size: prev_size.max(effective_offset + size),
            notified: false,
        });

        let st = &inner.blobs[&blob];
        let concurrent = (vp + 1..vw)
            .map(|w| {
                let rec = &st.records[(w - st.first_own) as usize];
                ConcurrentUpdate {
                    version: w,
                    range: rec.range,
                    root_pages: root_cover(pages_for(rec.size, psize)),
                }
            })
            .collect();

        Ok(WriteTicket {
            vw,
            effective_offset,
            prev_size,
            vp,
            vp_size,
            concurrent,
        })
    }

    /// Mark an update's data and metadata complete. The version publishes
    /// once every smaller version has published; publication may cascade
    /// over later already-notified versions.
    pub fn notify_success(&self, blob: BlobId, vw: Version) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        let st = inner
            .blobs
            .get_mut(&blob)
            .ok_or(Error::UnknownBlob)?;
        if vw < st.first_own || vw >= st.next {
            return Err(Error::UnknownVersion);
        }
        st.records[(vw - st.first_own) as usize].notified = true;
        let mut advanced = false;
        while st.published + 1 < st.next
            && st.records[(st.published + 1 - st.first_own) as usize].notified
        {
            st.published += 1;
            advanced = true;
        }
        if advanced {
            self.published_cv.notify_all();
        }
        Ok(())
    }

    /// Highest currently published version.
    pub fn get_recent(&self, blob: BlobId) -> Result<Version> {
        Ok(self.inner.lock().unwrap().state(blob)?.published)
    }

    /// Size of snapshot `v`, if published.
    pub fn get_size(&self, blob: BlobId, v: Version) -> Result<u64> {
        let inner = self.inner.lock().unwrap();
        let st = inner.state(blob)?;
        if v > st.published {
            return Err(Error::NotPublished);
        }
        Ok(inner.snapshot_size(blob, v))
    }

    /// Block until version `v` is published. `v` must already be assigned.
    pub fn wait_published(
        &self,
        blob: BlobId,
        v: Version,
        timeout: Option<Duration>,
    ) -> Result<()> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut inner = self.inner.lock().unwrap();
        {
            let st = inner.state(blob)?;
            if v >= st.next {
                return Err(Error::UnknownVersion);
            }
        }
        loop {
            if inner.state(blob)?.published >= v {
                return Ok(());
            }
            inner = match deadline {
                None => self.published_cv.wait(inner).unwrap(),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(Error::Timeout);
                    }
                    self.published_cv
                        .wait_timeout(inner, d - now)
                        .unwrap()
                        .0
                }
            };
        }
    }

    /// Create a branch sharing all snapshots of `blob` up to published
    /// version `v`. O(1) state; the branch's first update gets v + 1.
    pub fn branch(&self, blob: BlobId, v: Version) -> Result<BlobId> {
        let mut inner = self.inner.lock().unwrap();
        let st = inner.state(blob)?;
        if v > st.published {
            return Err(Error::NotPublished);
        }
        let psize = st.psize;
        let id = BlobId::random();
        inner.blobs.insert(
            id,
            BlobState {
                psize,
                parent: Some((blob, v)),
                first_own: v + 1,
                next: v + 1,
                published: v,
                records: Vec::new(),
            },
        );
        Ok(id)
    }

    /// The blob whose metadata tree physically holds version `v`.
    pub fn resolve_owner(&self, blob: BlobId, v: Version) -> Result<BlobId> {
        self.inner.lock().unwrap().resolve_owner(blob, v)
    }

    /// Page size and ancestry chain for a blob.
    pub fn blob_info(&self, blob: BlobId) -> Result<BlobInfo> {
        let inner = self.inner.lock().unwrap();
        let mut links = Vec::new();
        let mut b = blob;
        loop {
            let st = inner.state(b)?;
            match st.parent {
                Some((p, fork)) => {
                    links.push(ChainLink {
                        blob: b,
                        fork: Some(fork),
                    });
                    b = p;
                }
                None => {
                    links.push(ChainLink { blob: b, fork: None });
                    break;
                }
            }
        }
        Ok(BlobInfo {
            psize: inner.state(blob)?.psize,
            chain: BranchChain::new(links)?,
        })
    }
}

impl Service for Versioner {
    fn handle(&self, req: Request) -> Reply {
        fn wrap<T>(r: Result<T>, f: impl FnOnce(T) -> Reply) -> Reply {
            match r {
                Ok(v) => f(v),
                Err(e) => Reply::from_error(&e),
            }
        }
        match req {
            Request::CreateBlob { psize } => {
                wrap(self.create_blob(psize), |blob| Reply::CreateBlob { blob })
            }
            Request::AssignVersion {
                blob,
                kind,
                offset,
                size,
            } => wrap(self.assign_version(blob, kind, offset, size), |ticket| {
                Reply::AssignVersion { ticket }
            }),
            Request::NotifySuccess { blob, version } => {
                wrap(self.notify_success(blob, version), |_| Reply::NotifySuccess)
            }
            Request::GetRecent { blob } => {
                wrap(self.get_recent(blob), |version| Reply::GetRecent { version })
            }
            Request::GetSize { blob, version } => {
                wrap(self.get_size(blob, version), |size| Reply::GetSize { size })
            }
            Request::WaitPublished {
                blob,
                version,
                timeout_ms,
            } => {
                let timeout = (timeout_ms != 0).then(|| Duration::from_millis(timeout_ms));
                wrap(self.wait_published(blob, version, timeout), |_| {
                    Reply::WaitPublished
                })
            }
            Request::Branch { blob, version } => {
                wrap(self.branch(blob, version), |blob| Reply::Branch { blob })
            }
            Request::BlobInfo { blob } => {
                wrap(self.blob_info(blob), |info| Reply::BlobInfo { info })
            }
            _ => Reply::from_error(&Error::Unsupported),
        }
    }
}

/// Caller-side handle on the version manager.
#[derive(Clone)]
pub struct VersionClient {
    rpc: Arc<Rpc>,
    addr: String,
}

impl VersionClient {
    pub fn new(rpc: Arc<Rpc>, addr: String) -> Self {
        Self { rpc, addr }
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub fn create_blob(&self, psize: u64) -> Result<BlobId> {
        match self.rpc.call(&self.addr, Request::CreateBlob { psize })? {
            Reply::CreateBlob { blob } => Ok(blob),
            other => Err(other.into_unexpected("CREATE_BLOB")),
        }
    }

    pub fn assign_version(
        &self,
        blob: BlobId,
        kind: UpdateKind,
        offset: u64,
        size: u64,
    ) -> Result<WriteTicket> {
        match self.rpc.call(
            &self.addr,
            Request::AssignVersion {
                blob,
                kind,
                offset,
                size,
            },
        )? {
            Reply::AssignVersion { ticket } => Ok(ticket),
            other => Err(other.into_unexpected("ASSIGN_VERSION")),
        }
    }

    pub fn notify_success(&self, blob: BlobId, version: Version) -> Result<()> {
        match self
            .rpc
            .call(&self.addr, Request::NotifySuccess { blob, version })?
        {
            Reply::NotifySuccess => Ok(()),
            other => Err(other.into_unexpected("NOTIFY_SUCCESS")),
        }
    }

    pub fn get_recent(&self, blob: BlobId) -> Result<Version> {
        match self.rpc.call(&self.addr, Request::GetRecent { blob })? {
            Reply::GetRecent { version } => Ok(version),
            other => Err(other.into_unexpected("GET_RECENT")),
        }
    }

    pub fn get_size(&self, blob: BlobId, version: Version) -> Result<u64> {
        match self.rpc.call(&self.addr, Request::GetSize { blob, version })? {
            Reply::GetSize { size } => Ok(size),
            other => Err(other.into_unexpected("GET_SIZE")),
        }
    }

    /// `timeout` of `None` waits indefinitely, matching SYNC semantics.
    pub fn wait_published(
        &self,
        blob: BlobId,
        version: Version,
        timeout: Option<Duration>,
    ) -> Result<()> {
        let timeout_ms = timeout.map(|t| t.as_millis().max(1) as u64).unwrap_or(0);
        // give the server's own timer room to fire first
        let call_timeout = timeout.map(|t| t + Duration::from_secs(5));
        match self.rpc.call_with_timeout(
            &self.addr,
            Request::WaitPublished {
                blob,
                version,
                timeout_ms,
            },
            call_timeout,
        )? {
            Reply::WaitPublished => Ok(()),
            other => Err(other.into_unexpected("WAIT_PUBLISHED")),
        }
    }

    pub fn branch(&self, blob: BlobId, version: Version) -> Result<BlobId> {
        match self.rpc.call(&self.addr, Request::Branch { blob, version })? {
            Reply::Branch { blob } => Ok(blob),
            other => Err(other.into_unexpected("BRANCH")),
        }
    }

    pub fn blob_info(&self, blob: BlobId) -> Result<BlobInfo> {
        match self.rpc.call(&self.addr, Request::BlobInfo { blob })? {
            Reply::BlobInfo { info } => Ok(info),
            other => Err(other.into_unexpected("BLOB_INFO")),
        }
    }
}
