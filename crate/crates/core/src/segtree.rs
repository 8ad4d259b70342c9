//! The metadata tree engine: reading page descriptors out of a version's
//! tree, building a new version's tree bottom-up, border-version
//! computation, and boundary-leaf materialization for unaligned writes.
//!
//! The engine is stateless: all shared state lives in the metadata
//! stores. Any number of clients may read and build concurrently;
//! correctness rests on write-once node storage and the version
//! manager's ticket contents.
//!
//! # Trees
//!
//! Version `v` of a blob with `n` pages has a tree rooted at
//! `(0, root_cover(n))`. Inner nodes carry the child versions; leaves
//! carry the fragments making up one page. An update creates exactly the
//! leaves it touches plus every ancestor up to its root, and links
//! existing subtrees of older versions (the border nodes) for everything
//! it does not touch. Ranges never written are linked as `None` and are
//! unreachable through reads, which are bounded by the snapshot size.
//!
//! # Border versions
//!
//! The correct child version for a sibling position `q` not touched by
//! update `vw` is the last writer before `vw` that intersected `q`:
//! the version recorded at `q` in the reference published tree `vp`,
//! overlaid with every concurrent update in `(vp, vw)` whose page range
//! intersects `q` (and whose tree is large enough to contain `q`), taking
//! the maximum. An empty set means no data was ever written there.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Duration;

use crate::error::{Error, Result};
use crate::id::{PageId, Version};
use crate::metastore::{
    Fragment, NodeKey, NodeStore, TreeNode, DEFAULT_POLL_INTERVAL, DEFAULT_WAIT_TIMEOUT,
};
use crate::par::parallel_map;
use crate::range::{page_span, pages_for, root_cover, ByteRange, NodePos};
use crate::versioner::{BranchChain, WriteTicket};

/// Descriptor of one stored page object belonging to an update, in update
/// order. Interior pages cover their whole page (`page_off == 0`,
/// `len == psize`); only the first and last descriptor may be partial.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageDescriptor {
    pub pid: PageId,
    /// Page index within the update, 0-based.
    pub index: u64,
    pub provider: String,
    /// Start of the written extent within its blob page.
    pub page_off: u32,
    /// Written bytes in this page.
    pub len: u32,
}

/// One contiguous piece of a read: fetch `len` bytes at `src_off` of the
/// stored object `pid` and place them at `blob_off` of the blob.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadExtent {
    pub pid: PageId,
    pub provider: String,
    pub src_off: u64,
    pub len: u64,
    pub blob_off: u64,
}

/// Sibling position -> version link for a build; `None` marks ranges
/// never written.
pub type BorderMap = BTreeMap<NodePos, Option<Version>>;

/// Engine knobs. `skip_concurrent_overlay` exists solely so the checker
/// can prove it detects the corruption that omitting the overlay causes;
/// production paths leave it false.
#[derive(Debug, Clone)]
pub struct TreeConfig {
    pub poll_interval: Duration,
    pub wait_timeout: Duration,
    pub skip_concurrent_overlay: bool,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            poll_interval: DEFAULT_POLL_INTERVAL,
            wait_timeout: DEFAULT_WAIT_TIMEOUT,
            skip_concurrent_overlay: false,
        }
    }
}

/// Overlay a new fragment onto a predecessor leaf's fragments: the
/// predecessor extents are clipped to whatever the new fragment does not
/// overwrite.
pub fn overlay_fragments(prev: &[Fragment], new_frag: Fragment) -> Vec<Fragment> {
    let ns = new_frag.page_off;
    let ne = new_frag.end();
    let mut out = Vec::with_capacity(prev.len() + 1);
    for f in prev {
        if f.page_off < ns {
            let keep_end = f.end().min(ns);
            if keep_end > f.page_off {
                out.push(Fragment {
                    page_off: f.page_off,
                    len: keep_end - f.page_off,
                    pid: f.pid,
                    provider: f.provider.clone(),
                    src_off: f.src_off,
                });
            }
        }
        if f.end() > ne {
            let keep_start = f.page_off.max(ne);
            out.push(Fragment {
                page_off: keep_start,
                len: f.end() - keep_start,
                pid: f.pid,
                provider: f.provider.clone(),
                src_off: f.src_off + (keep_start - f.page_off),
            });
        }
    }
    out.push(new_frag);
    out.sort_by_key(|f| f.page_off);
    out
}

/// The tree engine for one blob's metadata, bound to a node store and the
/// blob's ancestry chain.
pub struct MetaEngine<'a> {
    store: &'a dyn NodeStore,
    chain: &'a BranchChain,
    psize: u64,
    cfg: TreeConfig,
}

impl<'a> MetaEngine<'a> {
    pub fn new(store: &'a dyn NodeStore, chain: &'a BranchChain, psize: u64) -> Self {
        Self::with_config(store, chain, psize, TreeConfig::default())
    }

    pub fn with_config(
        store: &'a dyn NodeStore,
        chain: &'a BranchChain,
        psize: u64,
        cfg: TreeConfig,
    ) -> Self {
        debug_assert!(psize.is_power_of_two());
        Self {
            store,
            chain,
            psize,
            cfg,
        }
    }

    fn key(&self, version: Version, pos: NodePos) -> NodeKey {
        NodeKey::new(self.chain.owner_of(version), version, pos)
    }

    /// Page descriptors covering `range` of snapshot `v` (whose size is
    /// `size_v`), as `(extent, blob offset)` pieces that tile the range
    /// exactly. Descends the tree pruning subtrees outside the range.
    pub fn read_meta(&self, v: Version, range: ByteRange, size_v: u64) -> Result<Vec<ReadExtent>> {
        self.read_meta_counted(v, range, size_v).map(|(e, _)| e)
    }

    /// As [`read_meta`](Self::read_meta), also returning how many nodes
    /// were fetched (the traversal cost).
    pub fn read_meta_counted(
        &self,
        v: Version,
        range: ByteRange,
        size_v: u64,
    ) -> Result<(Vec<ReadExtent>, usize)> {
        if range.end() > size_v {
            return Err(Error::OutOfBounds);
        }
        if range.size == 0 {
            return Ok((Vec::new(), 0));
        }
        let cover = root_cover(pages_for(size_v, self.psize));
        let (p0, np) = page_span(range, self.psize);
        let mut fetches = 0usize;
        let mut out = Vec::new();
        let mut stack = vec![(NodePos::new(0, cover), v)];
        while let Some((pos, ver)) = stack.pop() {
            let node = self.store.get_node(&self.key(ver, pos))?;
            fetches += 1;
            match node {
                TreeNode::Leaf { fragments } => {
                    debug_assert!(pos.is_leaf());
                    let page_base = pos.offset_p * self.psize;
                    for f in &fragments {
                        let f_start = page_base + f.page_off as u64;
                        let f_end = f_start + f.len as u64;
                        let s = f_start.max(range.offset);
                        let e = f_end.min(range.end());
                        if s < e {
                            out.push(ReadExtent {
                                pid: f.pid,
                                provider: f.provider.clone(),
                                src_off: f.src_off as u64 + (s - f_start),
                                len: e - s,
                                blob_off: s,
                            });
                        }
                    }
                }
                TreeNode::Inner { left, right } => {
                    for (child, link) in [
                        (pos.left_child(), left),
                        (pos.right_child(), right),
                    ] {
                        if child.intersects_pages(p0, np) {
                            match link {
                                Some(cv) => stack.push((child, cv)),
                                None => {
                                    return Err(Error::Protocol(format!(
                                        "missing child {child:?} on a read within the snapshot"
                                    )))
                                }
                            }
                        }
                    }
                }
            }
        }
        out.sort_by_key(|e| e.blob_off);
        Ok((out, fetches))
    }

    /// Resolve the version recorded at each query position in `vp`'s tree
    /// (`None` where the tree has no data). One pruned descent resolves
    /// all queries.
    fn versions_at(
        &self,
        queries: &BTreeSet<NodePos>,
        vp: Version,
        vp_size: u64,
    ) -> Result<HashMap<NodePos, Option<Version>>> {
        let mut out: HashMap<NodePos, Option<Version>> =
            queries.iter().map(|q| (*q, None)).collect();
        if vp == 0 || vp_size == 0 {
            return Ok(out);
        }
        let root = NodePos::new(0, root_cover(pages_for(vp_size, self.psize)));
        let inside: Vec<NodePos> = queries
            .iter()
            .copied()
            .filter(|q| q.size_p <= root.size_p && q.within_cover(root.size_p))
            .collect();
        if !inside.is_empty() {
            self.resolve_rec(root, vp, &inside, &mut out)?;
        }
        Ok(out)
    }

    fn resolve_rec(
        &self,
        pos: NodePos,
        version: Version,
        queries: &[NodePos],
        out: &mut HashMap<NodePos, Option<Version>>,
    ) -> Result<()> {
        let mut deeper = Vec::new();
        for q in queries {
            if *q == pos {
                out.insert(*q, Some(version));
            } else {
                deeper.push(*q);
            }
        }
        if deeper.is_empty() {
            return Ok(());
        }
        // a strictly contained query implies this node is inner
        let node = self.store.get_node(&self.key(version, pos))?;
        let TreeNode::Inner { left, right } = node else {
            return Err(Error::Protocol(format!(
                "expected inner node at {pos:?} while resolving versions"
            )));
        };
        for (child, link) in [(pos.left_child(), left), (pos.right_child(), right)] {
            let qs: Vec<NodePos> = deeper
                .iter()
                .copied()
                .filter(|q| child.offset_p <= q.offset_p && q.end_p() <= child.end_p())
                .collect();
            if qs.is_empty() {
                continue;
            }
            match link {
                Some(cv) => self.resolve_rec(child, cv, &qs, out)?,
                None => {} // stays None: nothing ever written below here
            }
        }
        Ok(())
    }

    /// Last writer strictly before the ticket's version that intersects
    /// `pos`: the value from `vp`'s tree overlaid with the ticket's
    /// concurrent updates.
    fn overlay_concurrent(
        &self,
        pos: NodePos,
        base: Option<Version>,
        ticket: &WriteTicket,
    ) -> Option<Version> {
        let mut best = base;
        if self.cfg.skip_concurrent_overlay {
            return best;
        }
        for c in &ticket.concurrent {
            let (first, count) = page_span(c.range, self.psize);
            if pos.intersects_pages(first, count) && pos.within_cover(c.root_pages) {
                best = Some(best.map_or(c.version, |b| b.max(c.version)));
            }
        }
        best
    }

    /// The border map for an update of pages `[first, first + count)`
    /// building a tree with root extent `new_root` pages: every sibling
    /// position the build links without rewriting, with its version.
    pub fn border_versions(
        &self,
        first: u64,
        count: u64,
        new_root: u64,
        ticket: &WriteTicket,
    ) -> Result<BorderMap> {
        let mut queries = BTreeSet::new();
        for pos in built_positions(first, count, new_root) {
            if pos.is_leaf() {
                continue;
            }
            for child in [pos.left_child(), pos.right_child()] {
                if !child.intersects_pages(first, count) {
                    queries.insert(child);
                }
            }
        }
        let base = self.versions_at(&queries, ticket.vp, ticket.vp_size)?;
        Ok(queries
            .into_iter()
            .map(|q| (q, self.overlay_concurrent(q, base[&q], ticket)))
            .collect())
    }

    /// Build one boundary leaf: the new fragment overlaid on the
    /// predecessor leaf's fragments. `prev_version` of `None` means no
    /// data was ever written in this page, so the new fragment stands
    /// alone. The predecessor leaf is fetched with a bounded wait, since
    /// a concurrent writer may not have stored it yet.
    pub fn materialize_boundary_leaf(
        &self,
        page: u64,
        new_frag: Fragment,
        prev_version: Option<Version>,
    ) -> Result<TreeNode> {
        let fragments = match prev_version {
            None => vec![new_frag],
            Some(u) => {
                let key = self.key(u, NodePos::new(page, 1));
                let prev = self
                    .store
                    .get_node_wait(&key, self.cfg.poll_interval, self.cfg.wait_timeout)?;
                let TreeNode::Leaf { fragments } = prev else {
                    return Err(Error::Protocol(format!(
                        "expected leaf at page {page} version {u}"
                    )));
                };
                overlay_fragments(&fragments, new_frag)
            }
        };
        let node = TreeNode::Leaf { fragments };
        node.validate()?;
        Ok(node)
    }

    /// Build and store version `vw`'s tree: the leaves for the updated
    /// pages plus every ancestor up to the new root, with child links
    /// taken from the update itself or from the border map. Returns the
    /// number of nodes written.
    pub fn build_meta(
        &self,
        ticket: &WriteTicket,
        range: ByteRange,
        pd: &[PageDescriptor],
    ) -> Result<usize> {
        debug_assert_eq!(range.offset, ticket.effective_offset);
        let psize = self.psize;
        let vw = ticket.vw;
        let (p0, np) = page_span(range, psize);
        debug_assert_eq!(pd.len() as u64, np);
        let last_page = p0 + np - 1;
        let new_size = ticket.prev_size.max(range.end());
        let new_root = root_cover(pages_for(new_size, psize));

        // Which boundary pages must merge with their predecessor leaf:
        // a head piece survives before an unaligned start, a tail piece
        // survives when older data extends past an unaligned end.
        let head_merge = range.offset % psize != 0;
        let end_in_page = range.end() - last_page * psize;
        let prev_in_last = ticket
            .prev_size
            .saturating_sub(last_page * psize)
            .min(psize);
        let tail_merge = prev_in_last > end_in_page;

        let mut pred_queries = BTreeSet::new();
        if head_merge {
            pred_queries.insert(NodePos::new(p0, 1));
        }
        if tail_merge {
            pred_queries.insert(NodePos::new(last_page, 1));
        }

        // Resolve border and predecessor versions in one descent of vp.
        let mut queries = BTreeSet::new();
        for pos in built_positions(p0, np, new_root) {
            if pos.is_leaf() {
                continue;
            }
            for child in [pos.left_child(), pos.right_child()] {
                if !child.intersects_pages(p0, np) {
                    queries.insert(child);
                }
            }
        }
        queries.extend(pred_queries.iter().copied());
        let base = self.versions_at(&queries, ticket.vp, ticket.vp_size)?;
        let resolved: HashMap<NodePos, Option<Version>> = queries
            .iter()
            .map(|q| (*q, self.overlay_concurrent(*q, base[q], ticket)))
            .collect();

        // Leaves, possibly merged at the boundaries.
        let mut leaves = Vec::with_capacity(pd.len());
        for d in pd {
            let page = p0 + d.index;
            let new_frag = Fragment {
                page_off: d.page_off,
                len: d.len,
                pid: d.pid,
                provider: d.provider.clone(),
                src_off: 0,
            };
            let pos = NodePos::new(page, 1);
            let needs_merge =
                (page == p0 && head_merge) || (page == last_page && tail_merge);
            let node = if needs_merge {
                self.materialize_boundary_leaf(page, new_frag, resolved[&pos])?
            } else {
                TreeNode::Leaf {
                    fragments: vec![new_frag],
                }
            };
            leaves.push((pos, node));
        }

        let mut written = 0usize;
        written += self.put_level(vw, leaves)?;

        // Inner levels, bottom-up to and including the root.
        let levels = new_root.trailing_zeros();
        for level in 1..=levels {
            let size = 1u64 << level;
            let mut nodes = Vec::new();
            for pos in level_positions(p0, np, size) {
                let link = |child: NodePos| -> Option<Version> {
                    if child.intersects_pages(p0, np) {
                        Some(vw)
                    } else {
                        resolved[&child]
                    }
                };
                let node = TreeNode::Inner {
                    left: link(pos.left_child()),
                    right: link(pos.right_child()),
                };
                nodes.push((pos, node));
            }
            written += self.put_level(vw, nodes)?;
        }
        Ok(written)
    }

    fn put_level(&self, vw: Version, nodes: Vec<(NodePos, TreeNode)>) -> Result<usize> {
        let count = nodes.len();
        let store = self.store;
        let keys: Vec<(NodeKey, TreeNode)> = nodes
            .into_iter()
            .map(|(pos, node)| (self.key(vw, pos), node))
            .collect();
        let results = parallel_map(keys, crate::par::DEFAULT_FANOUT, |_, (key, node)| {
            store.put_node(&key, &node)
        });
        for r in results {
            r?;
        }
        Ok(count)
    }
}

/// Aligned positions of width `size` intersecting pages
/// `[first, first + count)`.
fn level_positions(first: u64, count: u64, size: u64) -> impl Iterator<Item = NodePos> {
    let start = first / size * size;
    let end = (first + count - 1) / size * size;
    (start..=end).step_by(size as usize).map(move |off| NodePos::new(off, size))
}

/// Every position an update of pages `[first, first + count)` creates in
/// a tree with root extent `new_root`: the touched leaves and all their
/// ancestors up to and including the root.
pub fn built_positions(first: u64, count: u64, new_root: u64) -> Vec<NodePos> {
    debug_assert!(count >= 1);
    debug_assert!(first + count <= new_root);
    let mut out = Vec::new();
    let levels = new_root.trailing_zeros();
    for level in 0..=levels {
        out.extend(level_positions(first, count, 1u64 << level));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::id::BlobId;
    use crate::metastore::MetaStore;
    use crate::versioner::ConcurrentUpdate;
    use std::sync::Arc;

    const PSIZE: u64 = 1024;

    struct Harness {
        store: MetaStore,
        chain: BranchChain,
        /// fabricated update history: (version, effective byte range)
        history: Vec<(Version, ByteRange)>,
        /// pid -> (version, page index) for descriptor-origin checks
        pid_origin: std::sync::Mutex<HashMap<PageId, (Version, u64)>>,
    }

    impl Harness {
        fn new() -> Self {
            Self {
                store: MetaStore::new(),
                chain: BranchChain::root(BlobId::random()),
                history: Vec::new(),
                pid_origin: std::sync::Mutex::new(HashMap::new()),
            }
        }

        fn engine(&self) -> MetaEngine<'_> {
            MetaEngine::new(&self.store, &self.chain, PSIZE)
        }

        fn size_at(&self, v: Version) -> u64 {
            self.history[..v as usize]
                .iter()
                .fold(0, |acc, (_, r)| acc.max(r.end()))
        }

        /// Fabricate the ticket the version manager would have produced
        /// for the next update, treating every prior version as published.
        fn ticket(&self, range: ByteRange) -> WriteTicket {
            let vw = self.history.len() as Version + 1;
            let vp = vw - 1;
            WriteTicket {
                vw,
                effective_offset: range.offset,
                prev_size: self.size_at(vp),
                vp,
                vp_size: self.size_at(vp),
                concurrent: vec![],
            }
        }

        fn descriptors(&self, vw: Version, range: ByteRange) -> Vec<PageDescriptor> {
            let (p0, np) = page_span(range, PSIZE);
            (0..np)
                .map(|i| {
                    let page = p0 + i;
                    let start = range.offset.max(page * PSIZE);
                    let end = range.end().min((page + 1) * PSIZE);
                    let pid = PageId::random();
                    self.pid_origin.lock().unwrap().insert(pid, (vw, page));
                    PageDescriptor {
                        pid,
                        index: i,
                        provider: format!("prov-{}", page % 3),
                        page_off: (start - page * PSIZE) as u32,
                        len: (end - start) as u32,
                    }
                })
                .collect()
        }

        /// Run a full sequential update; returns nodes written.
        fn update(&mut self, range: ByteRange) -> usize {
            let ticket = self.ticket(range);
            let pd = self.descriptors(ticket.vw, range);
            let n = self.engine().build_meta(&ticket, range, &pd).unwrap();
            self.history.push((ticket.vw, range));
            n
        }

        fn update_pages(&mut self, first: u64, count: u64) -> usize {
            self.update(ByteRange::new(first * PSIZE, count * PSIZE))
        }
    }

    fn keys_of_version(store: &MetaStore, v: Version) -> BTreeSet<NodePos> {
        store
            .keys()
            .into_iter()
            .filter(|k| k.version == v)
            .map(|k| k.pos)
            .collect()
    }

    fn pos_set(items: &[(u64, u64)]) -> BTreeSet<NodePos> {
        items.iter().map(|&(o, s)| NodePos::new(o, s)).collect()
    }

    #[test]
    fn four_page_write_builds_full_small_tree() {
        let mut h = Harness::new();
        let n = h.update_pages(0, 4);
        assert_eq!(n, 7);
        assert_eq!(
            keys_of_version(&h.store, 1),
            pos_set(&[(0, 1), (1, 1), (2, 1), (3, 1), (0, 2), (2, 2), (0, 4)])
        );
    }

    #[test]
    fn overwrite_two_middle_pages_creates_five_nodes() {
        let mut h = Harness::new();
        h.update_pages(0, 4);
        let n = h.update_pages(1, 2);
        assert_eq!(n, 5);
        assert_eq!(
            keys_of_version(&h.store, 2),
            pos_set(&[(1, 1), (2, 1), (0, 2), (2, 2), (0, 4)])
        );
        // weaving: the new (0,2) points left at version 1, the new (2,2)
        // points right at version 1
        let e = h.engine();
        let inner = |pos| h.store.get_node(&e.key(2, pos)).unwrap();
        assert_eq!(
            inner(NodePos::new(0, 2)),
            TreeNode::Inner {
                left: Some(1),
                right: Some(2)
            }
        );
        assert_eq!(
            inner(NodePos::new(2, 2)),
            TreeNode::Inner {
                left: Some(2),
                right: Some(1)
            }
        );
    }

    #[test]
    fn append_one_page_grows_root() {
        let mut h = Harness::new();
        h.update_pages(0, 4);
        h.update_pages(1, 2);
        let n = h.update(ByteRange::new(4 * PSIZE, PSIZE));
        assert_eq!(n, 4);
        assert_eq!(
            keys_of_version(&h.store, 3),
            pos_set(&[(4, 1), (4, 2), (4, 4), (0, 8)])
        );
        // the old root, version 2, hangs off the new root's left side
        let e = h.engine();
        assert_eq!(
            h.store.get_node(&e.key(3, NodePos::new(0, 8))).unwrap(),
            TreeNode::Inner {
                left: Some(2),
                right: Some(3)
            }
        );
        // never-written ranges are linked as None
        assert_eq!(
            h.store.get_node(&e.key(3, NodePos::new(4, 2))).unwrap(),
            TreeNode::Inner {
                left: Some(3),
                right: None
            }
        );
        assert_eq!(
            h.store.get_node(&e.key(3, NodePos::new(4, 4))).unwrap(),
            TreeNode::Inner {
                left: Some(3),
                right: None
            }
        );
    }

    #[test]
    fn border_map_matches_weaving_examples() {
        let mut h = Harness::new();
        h.update_pages(0, 4);
        // overwrite pages [1,3): siblings are the version-1 leaves (0,1), (3,1)
        let t2 = h.ticket(ByteRange::new(PSIZE, 2 * PSIZE));
        let map = h.engine().border_versions(1, 2, 4, &t2).unwrap();
        let mut expect = BorderMap::new();
        expect.insert(NodePos::new(0, 1), Some(1));
        expect.insert(NodePos::new(3, 1), Some(1));
        assert_eq!(map, expect);
        h.update_pages(1, 2);

        // append page 4: old root shared, fresh right-side ranges empty
        let t3 = h.ticket(ByteRange::new(4 * PSIZE, PSIZE));
        let map = h.engine().border_versions(4, 1, 8, &t3).unwrap();
        let mut expect = BorderMap::new();
        expect.insert(NodePos::new(0, 4), Some(2));
        expect.insert(NodePos::new(5, 1), None);
        expect.insert(NodePos::new(6, 2), None);
        assert_eq!(map, expect);
    }

    #[test]
    fn border_map_overlays_concurrent_updates() {
        let mut h = Harness::new();
        h.update_pages(0, 4); // v1 published
        // v2 (pages [1,3)) is assigned but unpublished while v3 updates
        // pages [2,3): the ticket carries v2's range and vp = 1.
        let ticket = WriteTicket {
            vw: 3,
            effective_offset: 2 * PSIZE,
            prev_size: 4 * PSIZE,
            vp: 1,
            vp_size: 4 * PSIZE,
            concurrent: vec![ConcurrentUpdate {
                version: 2,
                range: ByteRange::new(PSIZE, 2 * PSIZE),
                root_pages: 4,
            }],
        };
        let map = h.engine().border_versions(2, 1, 4, &ticket).unwrap();
        let mut expect = BorderMap::new();
        expect.insert(NodePos::new(3, 1), Some(1)); // untouched by v2
        expect.insert(NodePos::new(0, 2), Some(2)); // v2 rebuilt this subtree
        assert_eq!(map, expect);
    }

    #[test]
    fn per_append_node_counts() {
        // appending one page at a time: counts step up by one exactly
        // when the old page count is a power of two
        let mut h = Harness::new();
        let counts: Vec<usize> = (0..5).map(|p| h.update_pages(p, 1)).collect();
        assert_eq!(counts, vec![1, 2, 3, 3, 4]);
    }

    #[test]
    fn read_meta_weaves_versions() {
        let mut h = Harness::new();
        h.update_pages(0, 4);
        h.update_pages(1, 2);
        let extents = h
            .engine()
            .read_meta(2, ByteRange::new(0, 4 * PSIZE), 4 * PSIZE)
            .unwrap();
        assert_eq!(extents.len(), 4);
        let origins = h.pid_origin.lock().unwrap();
        let versions: Vec<Version> = extents.iter().map(|e| origins[&e.pid].0).collect();
        // pages 0 and 3 come from version 1, pages 1 and 2 from version 2
        assert_eq!(versions, vec![1, 2, 2, 1]);
    }

    #[test]
    fn read_meta_single_page_and_empty() {
        let mut h = Harness::new();
        h.update_pages(0, 4);
        let one = h
            .engine()
            .read_meta(1, ByteRange::new(2 * PSIZE, PSIZE), 4 * PSIZE)
            .unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].blob_off, 2 * PSIZE);
        let none = h
            .engine()
            .read_meta(1, ByteRange::new(PSIZE, 0), 4 * PSIZE)
            .unwrap();
        assert!(none.is_empty());
    }

    fn assert_tiles(extents: &[ReadExtent], range: ByteRange) {
        let mut at = range.offset;
        for e in extents {
            assert_eq!(e.blob_off, at, "gap or overlap at {at}");
            at += e.len;
        }
        assert_eq!(at, range.end(), "tiling short of range end");
    }

    #[test]
    fn read_meta_matches_last_writer_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut h = Harness::new();
        // page-level oracle: last_writer[page] after each update
        let max_pages = 64u64;
        let mut last_writer: Vec<Option<Version>> = vec![None; max_pages as usize];
        let mut pages_now = 0u64;
        let mut tables: Vec<Vec<Option<Version>>> = Vec::new(); // per version

        for v in 1..=40u64 {
            let (first, count) = if pages_now == 0 {
                (0, rng.gen_range(1..=8))
            } else {
                let first = rng.gen_range(0..=pages_now.min(max_pages - 1));
                let count = rng.gen_range(1..=(max_pages - first).min(8));
                (first, count)
            };
            h.update_pages(first, count);
            for p in first..first + count {
                last_writer[p as usize] = Some(v);
            }
            pages_now = pages_now.max(first + count);
            tables.push(last_writer.clone());
        }

        let origins = h.pid_origin.lock().unwrap().clone();
        for _ in 0..200 {
            let v = rng.gen_range(1..=40u64);
            let size_v = h.size_at(v);
            let pages_v = size_v / PSIZE;
            let first = rng.gen_range(0..pages_v);
            let count = rng.gen_range(1..=pages_v - first);
            let range = ByteRange::new(first * PSIZE, count * PSIZE);
            let (extents, fetches) = h.engine().read_meta_counted(v, range, size_v).unwrap();
            assert_tiles(&extents, range);
            for e in &extents {
                let (ver, page) = origins[&e.pid];
                assert_eq!(page, e.blob_off / PSIZE);
                assert_eq!(
                    Some(ver),
                    tables[v as usize - 1][page as usize],
                    "page {page} of v{v}"
                );
            }
            // traversal bound: O(n + log cover) with constant 4
            let cover = root_cover(pages_v);
            let bound = 4 * (count as usize + cover.trailing_zeros() as usize + 1);
            assert!(fetches <= bound, "{fetches} fetches for {count} pages");
        }
    }

    #[test]
    fn read_out_of_bounds_rejected() {
        let mut h = Harness::new();
        h.update_pages(0, 2);
        let err = h
            .engine()
            .read_meta(1, ByteRange::new(0, 2 * PSIZE + 1), 2 * PSIZE)
            .unwrap_err();
        assert_eq!(err, Error::OutOfBounds);
    }

    #[test]
    fn overlay_algebra() {
        let p0 = PageId(1);
        let pn = PageId(2);
        let full = Fragment {
            page_off: 0,
            len: PSIZE as u32,
            pid: p0,
            provider: "a".into(),
            src_off: 0,
        };
        let new_frag = Fragment {
            page_off: 100,
            len: 200,
            pid: pn,
            provider: "b".into(),
            src_off: 0,
        };
        let merged = overlay_fragments(&[full], new_frag.clone());
        assert_eq!(merged.len(), 3);
        assert_eq!((merged[0].page_off, merged[0].len, merged[0].pid), (0, 100, p0));
        assert_eq!(merged[0].src_off, 0);
        assert_eq!(merged[1], new_frag);
        assert_eq!(
            (merged[2].page_off, merged[2].len, merged[2].src_off, merged[2].pid),
            (300, PSIZE as u32 - 300, 300, p0)
        );
        // no predecessor: the new fragment stands alone
        let alone = overlay_fragments(&[], new_frag.clone());
        assert_eq!(alone, vec![new_frag]);
    }

    #[test]
    fn overlay_composes_like_bytes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let page = PSIZE as u32;
        for _ in 0..200 {
            // byte-level oracle over one page: each byte remembers which
            // fragment owns it
            let mut owner: Vec<Option<u32>> = vec![None; page as usize];
            let mut frags: Vec<Fragment> = Vec::new();
            for gen in 0..rng.gen_range(1..6u32) {
                let off = rng.gen_range(0..page - 1);
                let len = rng.gen_range(1..=page - off);
                let f = Fragment {
                    page_off: off,
                    len,
                    pid: PageId(gen as u128 + 1),
                    provider: "p".into(),
                    src_off: 0,
                };
                for b in off..off + len {
                    owner[b as usize] = Some(gen);
                }
                frags = overlay_fragments(&frags, f);
            }
            // replay fragment list against the byte oracle
            let mut seen = vec![None; page as usize];
            for f in &frags {
                for b in f.page_off..f.end() {
                    assert!(seen[b as usize].is_none(), "fragments overlap");
                    seen[b as usize] = Some((f.pid.0 - 1) as u32);
                    // src_off maps back into the original fragment
                    let orig_start = f.page_off - (f.page_off - f.src_off.min(f.page_off));
                    let _ = orig_start;
                }
            }
            assert_eq!(seen, owner);
        }
    }

    #[test]
    fn unaligned_write_merges_boundary_leaves() {
        let mut h = Harness::new();
        h.update_pages(0, 2); // v1: two full pages
        // v2 overwrites [psize+100, psize+300): one boundary page
        let range = ByteRange::new(PSIZE + 100, 200);
        h.update(range);
        let node = h
            .store
            .get_node(&h.engine().key(2, NodePos::new(1, 1)))
            .unwrap();
        let TreeNode::Leaf { fragments } = node else {
            panic!("not a leaf")
        };
        assert_eq!(fragments.len(), 3);
        assert_eq!((fragments[0].page_off, fragments[0].len, fragments[0].src_off), (0, 100, 0));
        assert_eq!((fragments[1].page_off, fragments[1].len), (100, 200));
        assert_eq!(
            (fragments[2].page_off, fragments[2].len, fragments[2].src_off),
            (300, PSIZE as u32 - 300, 300)
        );
        // reads tile across the fragment seams
        let extents = h
            .engine()
            .read_meta(2, ByteRange::new(0, 2 * PSIZE), 2 * PSIZE)
            .unwrap();
        assert_tiles(&extents, ByteRange::new(0, 2 * PSIZE));
        assert_eq!(extents.len(), 4);
    }

    #[test]
    fn update_spanning_whole_cover_needs_no_descent() {
        let mut h = Harness::new();
        h.update_pages(0, 4);
        let t = h.ticket(ByteRange::new(0, 4 * PSIZE));
        let map = h.engine().border_versions(0, 4, 4, &t).unwrap();
        assert!(map.is_empty());
    }

    #[test]
    fn unaligned_append_extends_short_leaf() {
        let mut h = Harness::new();
        h.update(ByteRange::new(0, 100)); // v1: 100 bytes in page 0
        h.update(ByteRange::new(100, 50)); // v2 appends 50 more
        let node = h
            .store
            .get_node(&h.engine().key(2, NodePos::new(0, 1)))
            .unwrap();
        let TreeNode::Leaf { fragments } = node else {
            panic!("not a leaf")
        };
        assert_eq!(fragments.len(), 2);
        assert_eq!((fragments[0].page_off, fragments[0].len), (0, 100));
        assert_eq!((fragments[1].page_off, fragments[1].len), (100, 50));
        let extents = h
            .engine()
            .read_meta(2, ByteRange::new(0, 150), 150)
            .unwrap();
        assert_tiles(&extents, ByteRange::new(0, 150));
    }

    #[test]
    fn boundary_merge_waits_for_concurrent_predecessor() {
        // v2 (unpublished) owns the predecessor leaf; v3's boundary merge
        // must block until v2's leaf lands, then pick it up.
        let h = Arc::new({
            let mut h = Harness::new();
            h.update_pages(0, 2); // v1
            h
        });
        let ticket3 = WriteTicket {
            vw: 3,
            effective_offset: PSIZE + 100,
            prev_size: 2 * PSIZE,
            vp: 1,
            vp_size: 2 * PSIZE,
            concurrent: vec![ConcurrentUpdate {
                version: 2,
                range: ByteRange::new(PSIZE, PSIZE),
                root_pages: 2,
            }],
        };
        let pd3 = vec![PageDescriptor {
            pid: PageId(333),
            index: 0,
            provider: "p".into(),
            page_off: 100,
            len: 50,
        }];
        let h2 = h.clone();
        let builder = std::thread::spawn(move || {
            let engine = h2.engine();
            engine.build_meta(&ticket3, ByteRange::new(PSIZE + 100, 50), &pd3)
        });
        std::thread::sleep(Duration::from_millis(30));
        assert!(!builder.is_finished(), "did not wait for v2's leaf");
        // now v2's leaf (a full-page rewrite) lands
        let v2_leaf = TreeNode::Leaf {
            fragments: vec![Fragment {
                page_off: 0,
                len: PSIZE as u32,
                pid: PageId(222),
                provider: "p".into(),
                src_off: 0,
            }],
        };
        h.store
            .put_node(
                &h.engine().key(2, NodePos::new(1, 1)),
                &v2_leaf,
            )
            .unwrap();
        builder.join().unwrap().unwrap();
        let node = h
            .store
            .get_node(&h.engine().key(3, NodePos::new(1, 1)))
            .unwrap();
        let TreeNode::Leaf { fragments } = node else {
            panic!("not a leaf")
        };
        assert_eq!(fragments.len(), 3);
        assert_eq!(fragments[0].pid, PageId(222));
        assert_eq!(fragments[1].pid, PageId(333));
        assert_eq!(fragments[2].pid, PageId(222));
    }

    #[test]
    fn node_count_formula_holds() {
        // exact count: touched leaves plus intersecting positions per level
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut h = Harness::new();
        h.update_pages(0, 1);
        let mut pages_now = 1u64;
        for _ in 0..50 {
            let first = rng.gen_range(0..=pages_now.min(127));
            let count = rng.gen_range(1..=8u64).min(128 - first);
            let written = h.update_pages(first, count);
            pages_now = pages_now.max(first + count);
            let cover = root_cover(pages_now);
            let mut expect = 0u64;
            for level in 0..=cover.trailing_zeros() {
                let s = 1u64 << level;
                expect += (first + count - 1) / s - first / s + 1;
            }
            assert_eq!(written as u64, expect);
        }
    }
}
