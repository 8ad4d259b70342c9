//! Bounded fork-join over blocking calls.
//!
//! Page transfers within one operation are issued concurrently; a small
//! fixed thread cap keeps the fan-out sane when an update touches many
//! pages.

/// Default per-operation parallelism for page transfers.
pub const DEFAULT_FANOUT: usize = 8;

/// Apply `f` to every item, running up to `max_threads` items at a time.
/// Results come back in input order.
pub fn parallel_map<T, R, F>(items: Vec<T>, max_threads: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, T) -> R + Sync,
{
    let n = items.len();
    let workers = max_threads.max(1).min(n);
    if workers <= 1 {
        return items.into_iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }

    // Strided split: worker w takes items w, w + workers, w + 2*workers, ...
    let mut lanes: Vec<Vec<(usize, T)>> = (0..workers).map(|_| Vec::new()).collect();
    for (i, item) in items.into_iter().enumerate() {
        lanes[i % workers].push((i, item));
    }

    let mut out: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let results: Vec<Vec<(usize, R)>> = std::thread::scope(|s| {
        let handles: Vec<_> = lanes
            .into_iter()
            .map(|lane| {
                let f = &f;
                s.spawn(move || {
                    lane.into_iter()
                        .map(|(i, item)| (i, f(i, item)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for lane in results {
        for (i, r) in lane {
            out[i] = Some(r);
        }
    }
    out.into_iter().map(|r| r.unwrap()).collect()
}
