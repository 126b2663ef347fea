/// Maps `f` over `items` with at most `max_in_flight` scoped worker threads,
/// preserving input order. Runs sequentially on wasm targets.
pub fn par_map<T, R, F>(items: &[T], max_in_flight: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if cfg!(target_arch = "wasm32") || max_in_flight <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let mut out = Vec::with_capacity(items.len());
    for wave in items.chunks(max_in_flight) {
        std::thread::scope(|s| {
            let handles: Vec<_> = wave.iter().map(|item| s.spawn(|| f(item))).collect();
            out.extend(handles.into_iter().map(|h| h.join().expect("worker panicked")));
        });
    }
    out
}
