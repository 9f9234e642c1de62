//! Order-preserving parallel map over independent items, capped by the
//! `VDA_THREADS` environment variable.

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "VDA_THREADS";

/// Worker count: `VDA_THREADS` when set, otherwise the available
/// parallelism.
pub fn worker_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Applies `f` to every item on up to `workers` scoped threads. Results
/// keep input order, so output never depends on the worker count.
pub fn map<T: Sync, U: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> Result<U> + Sync,
) -> Result<Vec<U>> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<U>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Numerical("worker thread panicked".into())))
            })
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_independent_of_workers() {
        let items: Vec<u64> = (0..37).collect();
        let one = map(&items, 1, |x| Ok(x * x)).unwrap();
        for w in [2, 3, 8, 64] {
            assert_eq!(map(&items, w, |x| Ok(x * x)).unwrap(), one);
        }
    }

    #[test]
    fn first_error_surfaces() {
        let items = [1, 2, 3, 4];
        let r = map(&items, 2, |&x| {
            if x == 3 {
                Err(Error::Empty("three".into()))
            } else {
                Ok(x)
            }
        });
        assert!(r.is_err());
    }

    #[test]
    fn empty_input() {
        let items: [u8; 0] = [];
        assert!(map(&items, 4, |&x| Ok(x)).unwrap().is_empty());
    }
}
