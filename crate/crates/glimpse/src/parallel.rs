//! Deterministic fork-join over index ranges.
//!
//! Work is split into one contiguous chunk per worker; results come back in
//! index order, so the output is identical for any worker count whenever
//! the per-item computation is itself deterministic.

/// Maps `f` over `0..n` with up to `threads` workers; `f` must be
/// `Sync + Send` and is called with the item index.
pub fn map_indexed<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = threads.max(1).min(n.max(1));
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    let mut out: Vec<Option<T>> = Vec::with_capacity(n);
    out.resize_with(n, || None);
    let mut slots: Vec<&mut [Option<T>]> = Vec::new();
    let mut rest = out.as_mut_slice();
    while !rest.is_empty() {
        let take = chunk.min(rest.len());
        let (head, tail) = rest.split_at_mut(take);
        slots.push(head);
        rest = tail;
    }
    std::thread::scope(|scope| {
        for (ci, slot) in slots.into_iter().enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (j, cell) in slot.iter_mut().enumerate() {
                    *cell = Some(f(ci * chunk + j));
                }
            });
        }
    });
    out.into_iter().map(|v| v.expect("worker filled every slot")).collect()
}
