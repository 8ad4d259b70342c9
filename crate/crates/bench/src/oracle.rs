//! Flat-buffer reference implementation of the versioning semantics.
//!
//! Every snapshot equals the previous snapshot with the update's bytes
//! spliced in at its offset; branches fork the history at a published
//! version. The oracle learns about updates asynchronously (actors record
//! them after their call returns), so lookups wait until every update at
//! or below the requested version has been recorded.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use vblob_core::{BlobId, Error, Result, Version};

/// Cache a full snapshot every this many versions; lookups replay at most
/// this many updates on top of an anchor.
const ANCHOR_STRIDE: u64 = 16;

#[derive(Clone)]
struct Update {
    /// Append: splice at the end of the previous snapshot.
    at_end: bool,
    offset: u64,
    bytes: Arc<Vec<u8>>,
}

struct OracleBlob {
    parent: Option<(BlobId, Version)>,
    first_own: Version,
    updates: BTreeMap<Version, Update>,
    /// Highest version v such that every own update <= v is recorded.
    contiguous: Version,
    anchors: BTreeMap<Version, Arc<Vec<u8>>>,
}

#[derive(Default)]
struct Inner {
    blobs: HashMap<BlobId, OracleBlob>,
}

/// Shared oracle over any number of blobs and branches.
#[derive(Default)]
pub struct OracleStore {
    inner: Mutex<Inner>,
    recorded: Condvar,
}

impl OracleStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_root(&self, blob: BlobId) {
        let mut inner = self.inner.lock().unwrap();
        inner.blobs.insert(
            blob,
            OracleBlob {
                parent: None,
                first_own: 1,
                updates: BTreeMap::new(),
                contiguous: 0,
                anchors: BTreeMap::new(),
            },
        );
    }

    pub fn register_branch(&self, child: BlobId, parent: BlobId, fork: Version) {
        let mut inner = self.inner.lock().unwrap();
        assert!(inner.blobs.contains_key(&parent), "unknown oracle parent");
        inner.blobs.insert(
            child,
            OracleBlob {
                parent: Some((parent, fork)),
                first_own: fork + 1,
                updates: BTreeMap::new(),
                contiguous: fork,
                anchors: BTreeMap::new(),
            },
        );
        self.recorded.notify_all();
    }

    /// Record a write at `offset`.
    pub fn record_write(&self, blob: BlobId, version: Version, offset: u64, bytes: Vec<u8>) {
        self.record(blob, version, Update {
            at_end: false,
            offset,
            bytes: Arc::new(bytes),
        });
    }

    /// Record an append; the effective offset is the previous snapshot's
    /// size, resolved when the state is materialized.
    pub fn record_append(&self, blob: BlobId, version: Version, bytes: Vec<u8>) {
        self.record(blob, version, Update {
            at_end: true,
            offset: 0,
            bytes: Arc::new(bytes),
        });
    }

    fn record(&self, blob: BlobId, version: Version, update: Update) {
        let mut inner = self.inner.lock().unwrap();
        let ob = inner.blobs.get_mut(&blob).expect("unknown oracle blob");
        let prev = ob.updates.insert(version, update);
        assert!(prev.is_none(), "duplicate oracle record for version {version}");
        while ob.updates.contains_key(&(ob.contiguous + 1)) {
            ob.contiguous += 1;
        }
        self.recorded.notify_all();
    }

    /// True once every update needed to materialize (blob, v) is present.
    fn ready(inner: &Inner, blob: BlobId, v: Version) -> bool {
        let mut b = blob;
        let mut v = v;
        loop {
            let Some(ob) = inner.blobs.get(&b) else {
                return false;
            };
            match ob.parent {
                Some((p, fork)) if v <= fork => {
                    b = p;
                    v = v.min(fork);
                }
                _ => {
                    if ob.contiguous < v {
                        return false;
                    }
                    match ob.parent {
                        // the branch base itself must be materializable
                        Some((p, fork)) => {
                            b = p;
                            v = fork;
                        }
                        None => return true,
                    }
                }
            }
        }
    }

    /// The full snapshot (blob, v), waiting up to `timeout` for lagging
    /// records.
    pub fn state(&self, blob: BlobId, v: Version, timeout: Duration) -> Result<Arc<Vec<u8>>> {
        let deadline = Instant::now() + timeout;
        let mut inner = self.inner.lock().unwrap();
        while !Self::ready(&inner, blob, v) {
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Timeout);
            }
            let (guard, _) = self
                .recorded
                .wait_timeout(inner, deadline - now)
                .unwrap();
            inner = guard;
        }
        Ok(Self::materialize(&mut inner, blob, v))
    }

    pub fn expected_size(&self, blob: BlobId, v: Version, timeout: Duration) -> Result<u64> {
        Ok(self.state(blob, v, timeout)?.len() as u64)
    }

    pub fn read(
        &self,
        blob: BlobId,
        v: Version,
        offset: u64,
        len: u64,
        timeout: Duration,
    ) -> Result<Vec<u8>> {
        let state = self.state(blob, v, timeout)?;
        let end = offset + len;
        if end > state.len() as u64 {
            return Err(Error::OutOfBounds);
        }
        Ok(state[offset as usize..end as usize].to_vec())
    }

    fn materialize(inner: &mut Inner, blob: BlobId, v: Version) -> Arc<Vec<u8>> {
        // resolve to the blob that owns version v
        let mut b = blob;
        loop {
            let ob = &inner.blobs[&b];
            match ob.parent {
                Some((p, fork)) if v <= fork => b = p,
                _ => break,
            }
        }
        let ob = &inner.blobs[&b];
        if v < ob.first_own {
            return Arc::new(Vec::new()); // v == 0 on a root blob
        }
        if let Some(hit) = ob.anchors.get(&v) {
            return hit.clone();
        }

        // base: nearest anchor below v, else the branch point, else empty
        let (mut buf, from) = match ob.anchors.range(..v).next_back() {
            Some((&a, bytes)) => ((**bytes).clone(), a),
            None => match ob.parent {
                Some((p, fork)) => ((*Self::materialize(inner, p, fork)).clone(), fork),
                None => (Vec::new(), 0),
            },
        };
        let ob = &inner.blobs[&b];
        let steps: Vec<(Version, Update)> = ob
            .updates
            .range(from + 1..=v)
            .map(|(k, u)| (*k, u.clone()))
            .collect();
        for (_, u) in &steps {
            let offset = if u.at_end { buf.len() as u64 } else { u.offset };
            debug_assert!(offset <= buf.len() as u64, "update leaves a hole");
            let end = offset as usize + u.bytes.len();
            if end > buf.len() {
                buf.resize(end, 0);
            }
            buf[offset as usize..end].copy_from_slice(&u.bytes);
        }
        let out = Arc::new(buf);
        if v % ANCHOR_STRIDE == 0 {
            inner
                .blobs
                .get_mut(&b)
                .unwrap()
                .anchors
                .insert(v, out.clone());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const T: Duration = Duration::from_secs(1);

    #[test]
    fn single_append_is_the_buffer() {
        let o = OracleStore::new();
        let b = BlobId(1);
        o.register_root(b);
        o.record_append(b, 1, vec![7; 4096]);
        assert_eq!(*o.state(b, 1, T).unwrap(), vec![7; 4096]);
        assert_eq!(o.expected_size(b, 0, T).unwrap(), 0);
    }

    #[test]
    fn weaving_sequence_of_three_updates() {
        // write 4 pages, overwrite pages 1-2, append a page (psize 4)
        let o = OracleStore::new();
        let b = BlobId(2);
        o.register_root(b);
        o.record_write(b, 1, 0, vec![1; 16]);
        o.record_write(b, 2, 4, vec![2; 8]);
        o.record_append(b, 3, vec![3; 4]);
        let s3 = o.state(b, 3, T).unwrap();
        let mut expect = vec![1; 16];
        expect[4..12].copy_from_slice(&[2; 8]);
        expect.extend_from_slice(&[3; 4]);
        assert_eq!(*s3, expect);
        // older versions stay intact
        assert_eq!(*o.state(b, 1, T).unwrap(), vec![1; 16]);
    }

    #[test]
    fn waits_for_lagging_records() {
        let o = Arc::new(OracleStore::new());
        let b = BlobId(3);
        o.register_root(b);
        o.record_append(b, 1, vec![1; 10]);
        // version 3 recorded before version 2
        o.record_append(b, 3, vec![3; 10]);
        let o2 = o.clone();
        let t = std::thread::spawn(move || o2.state(b, 3, Duration::from_secs(2)).unwrap());
        std::thread::sleep(Duration::from_millis(20));
        assert!(!t.is_finished(), "did not wait for version 2");
        o.record_append(b, 2, vec![2; 10]);
        let s = t.join().unwrap();
        assert_eq!(s.len(), 30);
        assert_eq!(s[10..20], [2; 10]);
    }

    #[test]
    fn missing_record_times_out() {
        let o = OracleStore::new();
        let b = BlobId(4);
        o.register_root(b);
        assert_eq!(
            o.state(b, 1, Duration::from_millis(40)).unwrap_err(),
            Error::Timeout
        );
    }

    #[test]
    fn branches_fork_history() {
        let o = OracleStore::new();
        let b = BlobId(5);
        o.register_root(b);
        o.record_write(b, 1, 0, vec![1; 8]);
        o.record_write(b, 2, 0, vec![2; 4]);
        let br = BlobId(6);
        o.register_branch(br, b, 1);
        o.record_write(br, 2, 4, vec![9; 4]);

        assert_eq!(*o.state(br, 1, T).unwrap(), vec![1; 8]);
        let mut parent2 = vec![1; 8];
        parent2[..4].copy_from_slice(&[2; 4]);
        assert_eq!(*o.state(b, 2, T).unwrap(), parent2);
        let mut branch2 = vec![1; 8];
        branch2[4..].copy_from_slice(&[9; 4]);
        assert_eq!(*o.state(br, 2, T).unwrap(), branch2);
    }

    #[test]
    fn anchors_do_not_change_results() {
        let o = OracleStore::new();
        let b = BlobId(7);
        o.register_root(b);
        let mut expect = Vec::new();
        for v in 1..=50u64 {
            let chunk = vec![v as u8; 100];
            o.record_append(b, v, chunk.clone());
            expect.extend_from_slice(&chunk);
        }
        // query versions in descending order so anchors built late
        for v in (1..=50u64).rev() {
            assert_eq!(
                *o.state(b, v, T).unwrap(),
                expect[..(v as usize) * 100],
                "version {v}"
            );
        }
    }
}
