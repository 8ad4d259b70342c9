//! Seeded random workload: concurrent writers, appenders, branchers and
//! readers against one deployment, with every read verified against the
//! flat-buffer oracle at its exact version.
//!
//! The planned operation schedule is a pure function of the seed; what
//! varies between runs is only the interleaving (and therefore resolved
//! offsets and versions), which is exactly what the checks must be
//! robust to.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vblob_core::client::{BlobHandle, ClientConfig};
use vblob_core::{BlobId, Version};

use crate::deploy::Deployment;
use crate::oracle::OracleStore;
use crate::report::RunReport;

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Total planned operations, split halfway between writers and readers.
    pub ops: usize,
    pub writers: usize,
    pub readers: usize,
    pub psize: u64,
    pub max_blob: u64,
    pub initial_blobs: usize,
    /// Branch operations forced into the plan.
    pub min_branches: usize,
    pub client: ClientConfig,
    pub oracle_wait: Duration,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            ops: 1000,
            writers: 8,
            readers: 8,
            psize: 1024,
            max_blob: 1024 * 1024,
            initial_blobs: 2,
            min_branches: 2,
            client: ClientConfig::default(),
            oracle_wait: Duration::from_secs(10),
        }
    }
}

impl SuiteConfig {
    pub fn acceptance(seed: u64, psize: u64) -> Self {
        Self {
            seed,
            psize,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
enum WriterOp {
    Append { slot: u32, len: u64 },
    Write { slot: u32, off_ppm: u32, len: u64, align: bool },
    Branch { slot: u32 },
}

#[derive(Debug, Clone)]
enum ReaderOp {
    Read { slot: u32, v_ppm: u32, off_ppm: u32, len: u64 },
    Recent { slot: u32 },
    SizeProbe { slot: u32, v_ppm: u32 },
    Sync { slot: u32 },
}

fn plan(cfg: &SuiteConfig) -> (Vec<Vec<WriterOp>>, Vec<Vec<ReaderOp>>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::new();

    let per_writer = (cfg.ops / 2).div_ceil(cfg.writers.max(1));
    let mut writer_plans = Vec::new();
    let mut branches_left = cfg.min_branches;
    for w in 0..cfg.writers {
        let mut ops = Vec::with_capacity(per_writer);
        for i in 0..per_writer {
            // force the required branches early in the first writers' plans
            let force_branch = branches_left > 0 && w < cfg.min_branches && i == per_writer / 3;
            let op = if force_branch || rng.gen_bool(0.01) {
                if force_branch {
                    branches_left -= 1;
                }
                WriterOp::Branch {
                    slot: rng.gen::<u32>(),
                }
            } else if rng.gen_bool(0.4) {
                WriterOp::Append {
                    slot: rng.gen::<u32>(),
                    len: rng.gen_range(1..=16 * cfg.psize),
                }
            } else {
                WriterOp::Write {
                    slot: rng.gen::<u32>(),
                    off_ppm: rng.gen_range(0..=1_000_000),
                    len: rng.gen_range(1..=16 * cfg.psize),
                    align: rng.gen_bool(0.5),
                }
            };
            trace.push(format!("w{w} {op:?}"));
            ops.push(op);
        }
        writer_plans.push(ops);
    }

    let per_reader = (cfg.ops - cfg.ops / 2).div_ceil(cfg.readers.max(1));
    let mut reader_plans = Vec::new();
    for r in 0..cfg.readers {
        let mut ops = Vec::with_capacity(per_reader);
        for _ in 0..per_reader {
            let op = match rng.gen_range(0..10) {
                0 => ReaderOp::Recent {
                    slot: rng.gen::<u32>(),
                },
                1 => ReaderOp::SizeProbe {
                    slot: rng.gen::<u32>(),
                    v_ppm: rng.gen_range(0..=1_000_000),
                },
                2 => ReaderOp::Sync {
                    slot: rng.gen::<u32>(),
                },
                _ => ReaderOp::Read {
                    slot: rng.gen::<u32>(),
                    v_ppm: rng.gen_range(0..=1_000_000),
                    off_ppm: rng.gen_range(0..=1_000_000),
                    len: rng.gen_range(1..=32 * cfg.psize),
                },
            };
            trace.push(format!("r{r} {op:?}"));
            ops.push(op);
        }
        reader_plans.push(ops);
    }
    (writer_plans, reader_plans, trace)
}

#[derive(Default)]
struct Ledger {
    assigned: HashMap<BlobId, Vec<Version>>,
    first_own: HashMap<BlobId, Version>,
    bytes_written: u64,
    ops_ok: u64,
    reads_verified: u64,
    divergences: Vec<String>,
}

impl Ledger {
    fn diverge(&mut self, what: String) {
        if self.divergences.len() < 32 {
            self.divergences.push(what);
        }
    }
}

/// Deterministic payload for one update; content only needs to be
/// reproducible enough to make corruption visible.
fn payload(seed: u64, actor: usize, index: usize, len: u64) -> Vec<u8> {
    let tag = seed
        .wrapping_mul(31)
        .wrapping_add(actor as u64 * 17 + index as u64);
    (0..len)
        .map(|i| (i as u64).wrapping_mul(131).wrapping_add(tag) as u8)
        .collect()
}

pub fn run_random_suite(dep: &Deployment, cfg: &SuiteConfig) -> RunReport {
    let mut report = RunReport::new("random-suite");
    report.seed = Some(cfg.seed);
    let (writer_plans, reader_plans, trace) = plan(cfg);
    report.trace = trace;

    let started = Instant::now();
    let usage_before = dep.page_usage();

    let oracle = Arc::new(OracleStore::new());
    let client = dep.client_with(cfg.client.clone());
    let ledger = Arc::new(Mutex::new(Ledger::default()));
    let blobs: Arc<RwLock<Vec<BlobHandle>>> = Arc::new(RwLock::new(Vec::new()));
    for _ in 0..cfg.initial_blobs {
        match client.create(cfg.psize) {
            Ok(h) => {
                oracle.register_root(h.id());
                ledger.lock().unwrap().first_own.insert(h.id(), 1);
                blobs.write().unwrap().push(h);
            }
            Err(e) => {
                report.divergences.push(format!("create failed: {e}"));
                return report;
            }
        }
    }

    let live_writers = Arc::new(std::sync::atomic::AtomicUsize::new(cfg.writers));
    std::thread::scope(|s| {
        for (w, plan) in writer_plans.into_iter().enumerate() {
            let blobs = blobs.clone();
            let oracle = oracle.clone();
            let ledger = ledger.clone();
            let cfg = cfg.clone();
            let live = live_writers.clone();
            s.spawn(move || {
                writer_actor(w, plan, &blobs, &oracle, &ledger, &cfg);
                live.fetch_sub(1, std::sync::atomic::Ordering::SeqCst);
            });
        }
        for (r, plan) in reader_plans.into_iter().enumerate() {
            let blobs = blobs.clone();
            let oracle = oracle.clone();
            let ledger = ledger.clone();
            let cfg = cfg.clone();
            let live = live_writers.clone();
            s.spawn(move || {
                // cycle the planned schedule while writers are active so
                // verification spans the whole write window, then run one
                // final pass over the published end state
                loop {
                    reader_actor(r, plan.clone(), &blobs, &oracle, &ledger, &cfg);
                    if live.load(std::sync::atomic::Ordering::SeqCst) == 0 {
                        break;
                    }
                }
                reader_actor(r, plan, &blobs, &oracle, &ledger, &cfg);
            });
        }
    });

    // Final audit: everything assigned must now be published, version
    // sequences gap-free, final states byte-equal to the oracle, and
    // storage exactly the bytes written.
    let mut led = Arc::try_unwrap(ledger)
        .ok()
        .expect("actors done")
        .into_inner()
        .unwrap();

    let handles = blobs.read().unwrap().clone();
    let mut gap_free = true;
    let mut finals_ok = true;
    for h in &handles {
        let id = h.id();
        let first = led.first_own.get(&id).copied().unwrap_or(1);
        let mut assigned = led.assigned.remove(&id).unwrap_or_default();
        assigned.sort_unstable();
        let expect_max = first + assigned.len() as u64 - 1;
        if !assigned.is_empty()
            && assigned != (first..=expect_max).collect::<Vec<_>>()
        {
            gap_free = false;
            led.diverge(format!("blob {id}: assigned versions with gaps {assigned:?}"));
        }
        match h.recent() {
            Ok(recent) => {
                if !assigned.is_empty() && recent != expect_max {
                    gap_free = false;
                    led.diverge(format!(
                        "blob {id}: recent {recent} != max assigned {expect_max}"
                    ));
                }
                match (h.read(recent, 0, h.size(recent).unwrap_or(0)), oracle.state(id, recent, cfg.oracle_wait)) {
                    (Ok(got), Ok(expect)) => {
                        if got != *expect {
                            finals_ok = false;
                            led.diverge(format!("blob {id}: final state mismatch at v{recent}"));
                        }
                    }
                    (g, e) => {
                        finals_ok = false;
                        led.diverge(format!(
                            "blob {id}: final check errored (read: {:?}, oracle: {:?})",
                            g.err(),
                            e.err()
                        ));
                    }
                }
            }
            Err(e) => {
                finals_ok = false;
                led.diverge(format!("blob {id}: recent failed {e}"));
            }
        }
    }

    let usage_after = dep.page_usage();
    let stored_delta = usage_after.1 - usage_before.1;
    let storage_exact = stored_delta == led.bytes_written;
    if !storage_exact {
        led.diverge(format!(
            "storage audit: stored {stored_delta} bytes != written {} bytes",
            led.bytes_written
        ));
    }
    let provider_pages = dep.per_provider_pages();
    let spread = provider_pages.iter().max().unwrap_or(&0)
        - provider_pages.iter().min().unwrap_or(&0);

    let elapsed = started.elapsed();
    report.ops_ok = led.ops_ok;
    report.reads_verified = led.reads_verified;
    report.divergences = led.divergences;
    report.per_provider_pages = provider_pages;
    report.throughput.push((
        "suite-MiB-per-s".into(),
        led.bytes_written as f64 / (1 << 20) as f64 / elapsed.as_secs_f64().max(1e-9),
    ));
    let n_div = report.divergences.len();
    report.check(
        "oracle-equivalence",
        n_div == 0,
        format!("{} reads verified, {} divergences", report.reads_verified, n_div),
    );
    report.check("gap-free-versions", gap_free, String::new());
    report.check("final-states", finals_ok, String::new());
    report.check(
        "storage-sharing",
        storage_exact,
        format!("stored {stored_delta} == written {}", led.bytes_written),
    );
    report.check(
        "provider-balance",
        spread <= 2,
        format!("page spread {spread}"),
    );
    let branches_created = led.first_own.len().saturating_sub(cfg.initial_blobs);
    report.check(
        "branches-created",
        branches_created >= cfg.min_branches,
        format!("{branches_created} branches"),
    );
    report.check(
        "runtime",
        true,
        format!("{:.2}s for {} planned ops", elapsed.as_secs_f64(), cfg.ops),
    );
    report
}

fn pick(blobs: &RwLock<Vec<BlobHandle>>, slot: u32) -> BlobHandle {
    let list = blobs.read().unwrap();
    list[slot as usize % list.len()].clone()
}

fn writer_actor(
    w: usize,
    plan: Vec<WriterOp>,
    blobs: &RwLock<Vec<BlobHandle>>,
    oracle: &OracleStore,
    ledger: &Mutex<Ledger>,
    cfg: &SuiteConfig,
) {
    for (i, op) in plan.into_iter().enumerate() {
        match op {
            WriterOp::Append { slot, len } => {
                let h = pick(blobs, slot);
                let recent = match h.recent() {
                    Ok(v) => v,
                    Err(e) => {
                        ledger.lock().unwrap().diverge(format!("w{w}: recent failed {e}"));
                        continue;
                    }
                };
                let size = h.size(recent).unwrap_or(0);
                let len = len.min(cfg.max_blob.saturating_sub(size));
                if len == 0 {
                    continue;
                }
                let data = payload(cfg.seed, w, i, len);
                match h.append(&data) {
                    Ok(vw) => {
                        oracle.record_append(h.id(), vw, data);
                        let mut led = ledger.lock().unwrap();
                        led.assigned.entry(h.id()).or_default().push(vw);
                        led.bytes_written += len;
                        led.ops_ok += 1;
                    }
                    Err(e) => ledger
                        .lock()
                        .unwrap()
                        .diverge(format!("w{w} append({len}) failed: {e}")),
                }
            }
            WriterOp::Write {
                slot,
                off_ppm,
                len,
                align,
            } => {
                let h = pick(blobs, slot);
                let recent = match h.recent() {
                    Ok(v) => v,
                    Err(e) => {
                        ledger.lock().unwrap().diverge(format!("w{w}: recent failed {e}"));
                        continue;
                    }
                };
                let size = h.size(recent).unwrap_or(0);
                // sizes are monotone, so offset <= a published size can
                // never race into OFFSET_BEYOND_END
                let mut off = (size as u128 * off_ppm as u128 / 1_000_000) as u64;
                if align {
                    off = off / cfg.psize * cfg.psize;
                }
                let len = len.min(cfg.max_blob.saturating_sub(off));
                if len == 0 {
                    continue;
                }
                let data = payload(cfg.seed, w, i, len);
                match h.write(off, &data) {
                    Ok(vw) => {
                        oracle.record_write(h.id(), vw, off, data);
                        let mut led = ledger.lock().unwrap();
                        led.assigned.entry(h.id()).or_default().push(vw);
                        led.bytes_written += len;
                        led.ops_ok += 1;
                    }
                    Err(e) => ledger
                        .lock()
                        .unwrap()
                        .diverge(format!("w{w} write(off={off},len={len}) failed: {e}")),
                }
            }
            WriterOp::Branch { slot } => {
                let h = pick(blobs, slot);
                let recent = match h.recent() {
                    Ok(v) => v,
                    Err(e) => {
                        ledger.lock().unwrap().diverge(format!("w{w}: recent failed {e}"));
                        continue;
                    }
                };
                match h.branch(recent) {
                    Ok(bh) => {
                        oracle.register_branch(bh.id(), h.id(), recent);
                        let mut led = ledger.lock().unwrap();
                        led.first_own.insert(bh.id(), recent + 1);
                        led.ops_ok += 1;
                        drop(led);
                        blobs.write().unwrap().push(bh);
                    }
                    Err(e) => ledger
                        .lock()
                        .unwrap()
                        .diverge(format!("w{w} branch@{recent} failed: {e}")),
                }
            }
        }
    }
}

fn reader_actor(
    r: usize,
    plan: Vec<ReaderOp>,
    blobs: &RwLock<Vec<BlobHandle>>,
    oracle: &OracleStore,
    ledger: &Mutex<Ledger>,
    cfg: &SuiteConfig,
) {
    let mut last_recent: HashMap<BlobId, Version> = HashMap::new();
    for op in plan {
        match op {
            ReaderOp::Read {
                slot,
                v_ppm,
                off_ppm,
                len,
            } => {
                let h = pick(blobs, slot);
                let recent = match h.recent() {
                    Ok(v) => v,
                    Err(e) => {
                        ledger.lock().unwrap().diverge(format!("r{r}: recent failed {e}"));
                        continue;
                    }
                };
                let v = ((recent + 1) as u128 * v_ppm as u128 / 1_000_001) as u64;
                // a version at or below recent must be published: any
                // NOT_PUBLISHED here is a prefix violation
                let size_v = match h.size(v) {
                    Ok(s) => s,
                    Err(e) => {
                        ledger.lock().unwrap().diverge(format!(
                            "r{r}: size(v{v}) failed with {e} while recent={recent}"
                        ));
                        continue;
                    }
                };
                if size_v == 0 {
                    continue;
                }
                let off = (size_v as u128 * off_ppm as u128 / 1_000_001) as u64;
                let len = len.min(size_v - off);
                if len == 0 {
                    continue;
                }
                let got = match h.read(v, off, len) {
                    Ok(b) => b,
                    Err(e) => {
                        ledger.lock().unwrap().diverge(format!(
                            "r{r}: read(v{v},off={off},len={len}) failed: {e}"
                        ));
                        continue;
                    }
                };
                match oracle.read(h.id(), v, off, len, cfg.oracle_wait) {
                    Ok(expect) => {
                        if got != expect {
                            let at = got
                                .iter()
                                .zip(&expect)
                                .position(|(a, b)| a != b)
                                .unwrap_or(got.len());
                            ledger.lock().unwrap().diverge(format!(
                                "r{r}: DIVERGENCE blob {} v{v} off {off} len {len}: first diff at +{at}",
                                h.id()
                            ));
                        } else {
                            ledger.lock().unwrap().reads_verified += 1;
                        }
                    }
                    Err(e) => ledger
                        .lock()
                        .unwrap()
                        .diverge(format!("r{r}: oracle read failed: {e}")),
                }
            }
            ReaderOp::Recent { slot } => {
                let h = pick(blobs, slot);
                match h.recent() {
                    Ok(v) => {
                        let last = last_recent.entry(h.id()).or_insert(0);
                        if v < *last {
                            ledger.lock().unwrap().diverge(format!(
                                "r{r}: recent went backwards on {}: {v} < {last}",
                                h.id()
                            ));
                        }
                        *last = v.max(*last);
                    }
                    Err(e) => ledger.lock().unwrap().diverge(format!("r{r}: recent failed {e}")),
                }
            }
            ReaderOp::SizeProbe { slot, v_ppm } => {
                let h = pick(blobs, slot);
                let Ok(recent) = h.recent() else { continue };
                let v = ((recent + 1) as u128 * v_ppm as u128 / 1_000_001) as u64;
                match (h.size(v), oracle.expected_size(h.id(), v, cfg.oracle_wait)) {
                    (Ok(got), Ok(expect)) => {
                        if got != expect {
                            ledger.lock().unwrap().diverge(format!(
                                "r{r}: size mismatch on {} v{v}: {got} != {expect}",
                                h.id()
                            ));
                        } else {
                            ledger.lock().unwrap().reads_verified += 1;
                        }
                    }
                    (Err(e), _) => ledger.lock().unwrap().diverge(format!(
                        "r{r}: size(v{v}) failed with {e} while recent={recent}"
                    )),
                    (_, Err(e)) => ledger
                        .lock()
                        .unwrap()
                        .diverge(format!("r{r}: oracle size failed: {e}")),
                }
            }
            ReaderOp::Sync { slot } => {
                let h = pick(blobs, slot);
                let Ok(recent) = h.recent() else { continue };
                if let Err(e) = h.sync_timeout(recent, Duration::from_secs(10)) {
                    ledger
                        .lock()
                        .unwrap()
                        .diverge(format!("r{r}: sync({recent}) failed: {e}"));
                }
            }
        }
    }
}
