//! Bounded worker pool that preserves input order.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

/// Applies `f` to every item with at most `workers` threads.
///
/// Results come back in input order. After the first failure no new items
/// are started; the returned prefix holds every success before the lowest
/// failing index, alongside that failure.
pub fn map_ordered<T, R, E, F>(items: &[T], workers: usize, f: F) -> (Vec<R>, Option<(usize, E)>)
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(usize, &T) -> Result<R, E> + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        let mut out = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            match f(i, item) {
                Ok(r) => out.push(r),
                Err(e) => return (out, Some((i, e))),
            }
        }
        return (out, None);
    }

    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<Result<R, E>>>> =
        Mutex::new((0..items.len()).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                let r = f(i, item);
                if r.is_err() {
                    failed.store(true, Ordering::SeqCst);
                }
                slots.lock().expect("slots lock")[i] = Some(r);
            });
        }
    });

    let mut out = Vec::with_capacity(items.len());
    for (i, slot) in slots.into_inner().expect("slots lock").into_iter().enumerate() {
        match slot {
            Some(Ok(r)) => out.push(r),
            Some(Err(e)) => return (out, Some((i, e))),
            // Items start in index order, so unstarted slots only follow a failure.
            None => break,
        }
    }
    (out, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let items: Vec<u32> = (0..50).collect();
        for workers in [1, 3, 8] {
            let (out, err) = map_ordered(&items, workers, |_, x| Ok::<_, ()>(x * 2));
            assert!(err.is_none());
            assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        }
    }

    #[test]
    fn stops_at_first_failure() {
        let items: Vec<u32> = (0..20).collect();
        for workers in [1, 4] {
            let (out, err) = map_ordered(&items, workers, |_, &x| if x == 7 { Err("boom") } else { Ok(x) });
            assert_eq!(out, (0..7).collect::<Vec<_>>());
            assert_eq!(err, Some((7, "boom")));
        }
    }

    #[test]
    fn empty_input() {
        let (out, err) = map_ordered(&[] as &[u8], 4, |_, x| Ok::<_, ()>(*x));
        assert!(out.is_empty() && err.is_none());
    }
}
