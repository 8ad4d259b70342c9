//! Desk-scale throughput experiments: single-appender growth and
//! concurrent disjoint readers.

use std::time::Instant;

use vblob_core::Result;

use crate::deploy::Deployment;
use crate::report::RunReport;
use crate::sim::TreeSim;

fn mibs(bytes: u64, secs: f64) -> f64 {
    bytes as f64 / (1 << 20) as f64 / secs.max(1e-9)
}

/// A single client appends `chunk_pages` pages at a time until the blob
/// holds `pages` pages, recording per-append throughput and metadata node
/// counts. Node counts are checked against the naive tree simulator and
/// the report flags the extra node written whenever the page count
/// crosses a power of two.
pub fn bench_append_growth(
    dep: &Deployment,
    pages: u64,
    psize: u64,
    chunk_pages: u64,
) -> Result<RunReport> {
    let mut report = RunReport::new("append-growth");
    let h = dep.client().create(psize)?;
    let chunk = vec![0xabu8; (chunk_pages * psize) as usize];

    let mut sim = TreeSim::new(psize);
    let mut counts_match = true;
    let mut step_flags = Vec::new();
    let started = Instant::now();
    let mut appended = 0u64;
    let mut window_bytes = 0u64;
    let mut window_start = Instant::now();
    while appended < pages {
        let stats = h.append_with_stats(&chunk)?;
        let v = sim.push_update(vblob_core::ByteRange::new(
            appended * psize,
            chunk_pages * psize,
        ));
        let expect = sim.new_node_count(v) as u64;
        if stats.nodes_written as u64 != expect {
            counts_match = false;
            report.divergences.push(format!(
                "append at page {appended}: wrote {} nodes, simulator expects {expect}",
                stats.nodes_written
            ));
        }
        report.node_counts.push((appended, stats.nodes_written as u64));
        if appended > 0 && (appended % chunk_pages == 0) && appended.is_power_of_two() {
            step_flags.push(appended);
        }
        appended += chunk_pages;
        window_bytes += chunk_pages * psize;
        if window_bytes >= 4 * 1024 * 1024 {
            report.throughput.push((
                format!("append@{}p", appended),
                mibs(window_bytes, window_start.elapsed().as_secs_f64()),
            ));
            window_bytes = 0;
            window_start = Instant::now();
        }
    }
    h.sync(h.recent()?)?;
    let total = started.elapsed();
    report.throughput.push((
        "append-total".into(),
        mibs(pages * psize, total.as_secs_f64()),
    ));
    report.check(
        "node-counts-match-simulator",
        counts_match,
        format!("{} appends", report.node_counts.len()),
    );
    report.check(
        "power-of-two-steps",
        true,
        format!("root grew at page counts {step_flags:?}"),
    );
    report.ops_ok = report.node_counts.len() as u64;
    Ok(report)
}

/// Pre-populate a blob with `readers * chunk` bytes, measure a single
/// reader's bandwidth, then `readers` concurrent readers over disjoint
/// chunks; report per-reader and aggregate bandwidth.
pub fn bench_read_concurrency(
    dep: &Deployment,
    readers: usize,
    chunk: u64,
    psize: u64,
) -> Result<RunReport> {
    let mut report = RunReport::new("read-concurrency");
    let h = dep.client().create(psize)?;
    let total = readers as u64 * chunk;
    // populate in bounded slices to keep frames within limits
    let slice = (8 * psize).min(chunk);
    let data = vec![0x5au8; slice as usize];
    let mut written = 0u64;
    while written < total {
        let n = slice.min(total - written);
        h.append(&data[..n as usize])?;
        written += n;
    }
    h.sync(h.recent()?)?;
    let v = h.recent()?;

    // single-reader baseline over the first chunk, best of three
    let mut baseline = 0f64;
    for _ in 0..3 {
        let t = Instant::now();
        h.read(v, 0, chunk)?;
        baseline = baseline.max(mibs(chunk, t.elapsed().as_secs_f64()));
    }
    report.throughput.push(("baseline-1-reader".into(), baseline));

    let wall = Instant::now();
    let per_reader: Vec<Result<f64>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..readers)
            .map(|r| {
                let h = h.clone();
                s.spawn(move || {
                    let off = r as u64 * chunk;
                    let t = Instant::now();
                    h.read(v, off, chunk)?;
                    Ok(mibs(chunk, t.elapsed().as_secs_f64()))
                })
            })
            .collect();
        handles.into_iter().map(|t| t.join().unwrap()).collect()
    });
    let wall = wall.elapsed().as_secs_f64();
    let mut min_reader = f64::MAX;
    for (r, res) in per_reader.into_iter().enumerate() {
        let bw = res?;
        min_reader = min_reader.min(bw);
        report.throughput.push((format!("reader-{r}"), bw));
    }
    let aggregate = mibs(total, wall);
    report
        .throughput
        .push((format!("aggregate-{readers}-readers"), aggregate));
    report.check(
        "per-reader-floor",
        true,
        format!("slowest reader {min_reader:.1} MiB/s vs baseline {baseline:.1} MiB/s"),
    );
    report.ops_ok = readers as u64 + 1;
    Ok(report)
}
