//! Deterministic data parallelism: outputs are collected in input order,
//! so results are identical for any thread count.

/// Map `f` over `items` using up to `threads` OS threads, preserving order.
pub fn parallel_map_ordered<T, R, F>(items: Vec<T>, threads: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let threads = threads.max(1);
    if threads == 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let n = items.len();
    let chunk = n.div_ceil(threads);
    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let mut rest_items = items;
    let mut rest_slots = &mut slots[..];
    std::thread::scope(|scope| {
        let f = &f;
        while !rest_items.is_empty() {
            let take = chunk.min(rest_items.len());
            let tail = rest_items.split_off(take);
            let head = std::mem::replace(&mut rest_items, tail);
            let (head_slots, tail_slots) = rest_slots.split_at_mut(take);
            rest_slots = tail_slots;
            scope.spawn(move || {
                for (slot, item) in head_slots.iter_mut().zip(head) {
                    *slot = Some(f(item));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.unwrap()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_for_any_thread_count() {
        let items: Vec<u64> = (0..97).collect();
        let serial = parallel_map_ordered(items.clone(), 1, |x| x * x);
        for t in [2, 3, 8] {
            let par = parallel_map_ordered(items.clone(), t, |x| x * x);
            assert_eq!(par, serial);
        }
    }
}
