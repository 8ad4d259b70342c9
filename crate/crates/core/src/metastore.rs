//! The metadata provider: a statically partitioned store of immutable
//! segment-tree nodes.
//!
//! Nodes are keyed by (blob, version, position). Keys are deterministic,
//! so any party can compute the key of a node that a concurrent writer
//! has not stored yet and wait for it to appear. Stores never coordinate;
//! placement is a pure function of the key ([`locate`]).
//!
//! Node payloads are kept under their canonical binary encoding, so the
//! write-once check is exact byte equality.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::id::{BlobId, PageId, Version, VERSION_NONE};
use crate::range::NodePos;
use crate::rpc::{Reply, Request, Rpc, Service};

/// Default interval between polls in [`NodeStore::get_node_wait`].
pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_millis(5);
/// Default deadline for [`NodeStore::get_node_wait`].
pub const DEFAULT_WAIT_TIMEOUT: Duration = Duration::from_secs(10);

/// Identity of one tree node: which blob's tree, which snapshot version,
/// which page range. Computable by any party without communication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeKey {
    pub blob: BlobId,
    pub version: Version,
    pub pos: NodePos,
}

impl NodeKey {
    pub fn new(blob: BlobId, version: Version, pos: NodePos) -> Self {
        Self { blob, version, pos }
    }

    /// Canonical 40-byte encoding: blob (16) | version (8) | offset_p (8)
    /// | size_p (8), all big-endian. This is the hash input for placement
    /// and the wire form of a key.
    pub fn to_bytes(&self) -> [u8; 40] {
        let mut out = [0u8; 40];
        out[..16].copy_from_slice(&self.blob.to_bytes());
        out[16..24].copy_from_slice(&self.version.to_be_bytes());
        out[24..32].copy_from_slice(&self.pos.offset_p.to_be_bytes());
        out[32..40].copy_from_slice(&self.pos.size_p.to_be_bytes());
        out
    }

    pub fn from_bytes(b: &[u8; 40]) -> Result<Self> {
        let blob = BlobId::from_bytes(b[..16].try_into().unwrap());
        let version = u64::from_be_bytes(b[16..24].try_into().unwrap());
        let offset_p = u64::from_be_bytes(b[24..32].try_into().unwrap());
        let size_p = u64::from_be_bytes(b[32..40].try_into().unwrap());
        Ok(Self {
            blob,
            version,
            pos: NodePos::checked(offset_p, size_p)?,
        })
    }
}

/// A sub-page extent of a leaf pointing into a stored page object.
///
/// `page_off`/`len` locate the extent within the blob page; `src_off`
/// locates the same bytes inside the (possibly short) stored object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fragment {
    pub page_off: u32,
    pub len: u32,
    pub pid: PageId,
    pub provider: String,
    pub src_off: u32,
}

impl Fragment {
    pub fn end(&self) -> u32 {
        self.page_off + self.len
    }
}

/// An immutable tree node: inner nodes carry child versions, leaves carry
/// the fragments making up one page of the snapshot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeNode {
    Inner {
        left: Option<Version>,
        right: Option<Version>,
    },
    Leaf {
        fragments: Vec<Fragment>,
    },
}

impl TreeNode {
    /// Structural invariants: an inner node references at least one child;
    /// leaf fragments are non-empty, sorted and disjoint.
    pub fn validate(&self) -> Result<()> {
        match self {
            TreeNode::Inner { left, right } => {
                if left.is_none() && right.is_none() {
                    return Err(Error::Malformed("inner node with no children".into()));
                }
            }
            TreeNode::Leaf { fragments } => {
                let mut cursor = 0u32;
                for f in fragments {
                    if f.len == 0 {
                        return Err(Error::Malformed("zero-length fragment".into()));
                    }
                    if f.page_off < cursor {
                        return Err(Error::Malformed("fragments unsorted or overlapping".into()));
                    }
                    cursor = f.end();
                }
            }
        }
        Ok(())
    }

    /// Canonical encoding: tag byte (0 = inner, 1 = leaf). Inner: left and
    /// right child versions as 8-byte big-endian with `u64::MAX` meaning
    /// none. Leaf: 2-byte fragment count, then per fragment page_off (u32),
    /// len (u32), pid (16 bytes), provider (u16 length-prefixed UTF-8),
    /// src_off (u32). All integers big-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            TreeNode::Inner { left, right } => {
                out.push(0u8);
                out.extend_from_slice(&left.unwrap_or(VERSION_NONE).to_be_bytes());
                out.extend_from_slice(&right.unwrap_or(VERSION_NONE).to_be_bytes());
            }
            TreeNode::Leaf { fragments } => {
                out.push(1u8);
                out.extend_from_slice(&(fragments.len() as u16).to_be_bytes());
                for f in fragments {
                    out.extend_from_slice(&f.page_off.to_be_bytes());
                    out.extend_from_slice(&f.len.to_be_bytes());
                    out.extend_from_slice(&f.pid.to_bytes());
                    out.extend_from_slice(&(f.provider.len() as u16).to_be_bytes());
                    out.extend_from_slice(f.provider.as_bytes());
                    out.extend_from_slice(&f.src_off.to_be_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<TreeNode> {
        let bad = |m: &str| Error::Malformed(format!("node decode: {m}"));
        if b.is_empty() {
            return Err(bad("empty"));
        }
        match b[0] {
            0 => {
                if b.len() != 17 {
                    return Err(bad("inner node wrong length"));
                }
                let l = u64::from_be_bytes(b[1..9].try_into().unwrap());
                let r = u64::from_be_bytes(b[9..17].try_into().unwrap());
                let node = TreeNode::Inner {
                    left: (l != VERSION_NONE).then_some(l),
                    right: (r != VERSION_NONE).then_some(r),
                };
                node.validate()?;
                Ok(node)
            }
            1 => {
                if b.len() < 3 {
                    return Err(bad("truncated leaf"));
                }
                let count = u16::from_be_bytes(b[1..3].try_into().unwrap()) as usize;
                let mut pos = 3usize;
                let mut fragments = Vec::with_capacity(count);
                for _ in 0..count {
                    let need = |n: usize, pos: usize| {
                        if pos + n > b.len() {
                            Err(bad("truncated fragment"))
                        } else {
                            Ok(())
                        }
                    };
                    need(4 + 4 + 16 + 2, pos)?;
                    let page_off = u32::from_be_bytes(b[pos..pos + 4].try_into().unwrap());
                    let len = u32::from_be_bytes(b[pos + 4..pos + 8].try_into().unwrap());
                    let pid = PageId::from_bytes(b[pos + 8..pos + 24].try_into().unwrap());
                    let alen =
                        u16::from_be_bytes(b[pos + 24..pos + 26].try_into().unwrap()) as usize;
                    pos += 26;
                    need(alen + 4, pos)?;
                    let provider = std::str::from_utf8(&b[pos..pos + alen])
                        .map_err(|_| bad("provider not utf-8"))?
                        .to_string();
                    pos += alen;
                    let src_off = u32::from_be_bytes(b[pos..pos + 4].try_into().unwrap());
                    pos += 4;
                    fragments.push(Fragment {
                        page_off,
                        len,
                        pid,
                        provider,
                        src_off,
                    });
                }
                if pos != b.len() {
                    return Err(bad("trailing bytes"));
                }
                let node = TreeNode::Leaf { fragments };
                node.validate()?;
                Ok(node)
            }
            t => Err(bad(&format!("unknown tag {t}"))),
        }
    }
}

/// 64-bit FNV-1a over the canonical key bytes. Fixed constants
/// (offset basis 0xcbf29ce484222325, prime 0x100000001b3) so every party
/// computes the same placement.
pub fn key_hash(key: &NodeKey) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in key.to_bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Static placement: which of `n_stores` metadata stores holds `key`.
pub fn locate(key: &NodeKey, n_stores: usize) -> usize {
    assert!(n_stores >= 1);
    (key_hash(key) % n_stores as u64) as usize
}

/// Uniform access to tree nodes, implemented by both a single in-process
/// store and the partitioned client view.
pub trait NodeStore: Send + Sync {
    /// Store a node. Idempotent for byte-identical payloads; a different
    /// payload under an existing key is a protocol bug and fails.
    fn put_node(&self, key: &NodeKey, node: &TreeNode) -> Result<()>;

    /// Fetch a node, or `NotFound` if nothing is stored under the key.
    fn get_node(&self, key: &NodeKey) -> Result<TreeNode>;

    /// Fetch a node known to be created by some assigned update, waiting
    /// for it to appear. Bounded polling; `Timeout` past the deadline.
    fn get_node_wait(&self, key: &NodeKey, interval: Duration, timeout: Duration) -> Result<TreeNode> {
        let deadline = Instant::now() + timeout;
        loop {
            match self.get_node(key) {
                Err(Error::NotFound) => {
                    if Instant::now() >= deadline {
                        return Err(Error::Timeout);
                    }
                    std::thread::sleep(interval.min(deadline.saturating_duration_since(Instant::now())));
                }
                other => return other,
            }
        }
    }
}

/// One metadata store's state. Payloads are canonical bytes; per-key
/// insertion is atomic with respect to concurrent puts.
#[derive(Default)]
pub struct MetaStore {
    nodes: Mutex<HashMap<NodeKey, Arc<Vec<u8>>>>,
}

impl MetaStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_bytes(&self, key: NodeKey, bytes: Vec<u8>) -> Result<()> {
        // Structural check up front: opaque garbage never enters the store.
        TreeNode::from_bytes(&bytes)?;
        let mut nodes = self.nodes.lock().unwrap();
        match nodes.get(&key) {
            Some(existing) if **existing == bytes => Ok(()),
            Some(_) => Err(Error::Conflict),
            None => {
                nodes.insert(key, Arc::new(bytes));
                Ok(())
            }
        }
    }

    pub fn get_bytes(&self, key: &NodeKey) -> Result<Arc<Vec<u8>>> {
        self.nodes
            .lock()
            .unwrap()
            .get(key)
            .cloned()
            .ok_or(Error::NotFound)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.lock().unwrap().len()
    }

    /// Snapshot of all keys currently stored. Test and audit helper.
    pub fn keys(&self) -> Vec<NodeKey> {
        self.nodes.lock().unwrap().keys().copied().collect()
    }
}

impl NodeStore for MetaStore {
    fn put_node(&self, key: &NodeKey, node: &TreeNode) -> Result<()> {
        node.validate()?;
        self.put_bytes(*key, node.to_bytes())
    }

    fn get_node(&self, key: &NodeKey) -> Result<TreeNode> {
        TreeNode::from_bytes(&self.get_bytes(key)?)
    }
}

impl Service for MetaStore {
    fn handle(&self, req: Request) -> Reply {
        match req {
            Request::PutNode { key, node } => match self.put_bytes(key, node) {
                Ok(()) => Reply::PutNode,
                Err(e) => Reply::from_error(&e),
            },
            Request::GetNode { key } => match self.get_bytes(&key) {
                Ok(bytes) => Reply::GetNode {
                    node: bytes.as_ref().clone(),
                },
                Err(e) => Reply::from_error(&e),
            },
            _ => Reply::from_error(&Error::Unsupported),
        }
    }
}

/// Client view of the partitioned metadata provider: routes each key to
/// its store by the static placement function.
#[derive(Clone)]
pub struct MetaDht {
    rpc: Arc<Rpc>,
    stores: Vec<String>,
}

impl MetaDht {
    pub fn new(rpc: Arc<Rpc>, stores: Vec<String>) -> Self {
        assert!(!stores.is_empty(), "need at least one metadata store");
        Self { rpc, stores }
    }

    fn store_for(&self, key: &NodeKey) -> &str {
        &self.stores[locate(key, self.stores.len())]
    }
}

impl NodeStore for MetaDht {
    fn put_node(&self, key: &NodeKey, node: &TreeNode) -> Result<()> {
        node.validate()?;
        let reply = self.rpc.call(
            self.store_for(key),
            Request::PutNode {
                key: *key,
                node: node.to_bytes(),
            },
        )?;
        match reply {
            Reply::PutNode => Ok(()),
            other => Err(other.into_unexpected("PUT_NODE")),
        }
    }

    fn get_node(&self, key: &NodeKey) -> Result<TreeNode> {
        let reply = self
            .rpc
            .call(self.store_for(key), Request::GetNode { key: *key })?;
        match reply {
            Reply::GetNode { node } => TreeNode::from_bytes(&node),
            other => Err(other.into_unexpected("GET_NODE")),
        }
    }
}
