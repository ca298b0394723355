//! Work-efficient-enough inclusive prefix scan with exactly `⌈log₂ n⌉`
//! dependent levels (Sklansky / divide-and-conquer layout).

use rayon::prelude::*;

/// Counters reported by [`inclusive_scan`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScanStats {
    /// Number of sequentially dependent combine levels.
    pub levels: usize,
    /// Total number of operator applications.
    pub combines: usize,
}

impl ScanStats {
    pub fn merge(self, other: ScanStats) -> ScanStats {
        ScanStats {
            levels: self.levels + other.levels,
            combines: self.combines + other.combines,
        }
    }
}

/// `⌈log₂ n⌉`, with `0` for `n ≤ 1`.
pub fn ceil_log2(n: usize) -> usize {
    if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}

/// In-place inclusive scan: afterwards `items[k] = items[0] ∘ … ∘ items[k]`
/// for an associative `op(earlier, later)`.
///
/// At level `k` every block of `2^{k+1}` elements broadcasts the last prefix
/// of its left half into its right half; all updates within a level are
/// independent and run on the rayon pool.
pub fn inclusive_scan<T, F>(items: &mut [T], op: F) -> ScanStats
where
    T: Send + Sync,
    F: Fn(&T, &T) -> T + Sync,
{
    let n = items.len();
    let mut stats = ScanStats::default();
    let mut half = 1usize;
    while half < n {
        let block = 2 * half;
        let combines: usize = items
            .par_chunks_mut(block)
            .map(|chunk| {
                if chunk.len() <= half {
                    return 0;
                }
                let (left, right) = chunk.split_at_mut(half);
                let pivot = &left[half - 1];
                right.par_iter_mut().for_each(|x| *x = op(pivot, x));
                right.len()
            })
            .sum();
        stats.levels += 1;
        stats.combines += combines;
        half = block;
    }
    stats
}

/// Reverse inclusive scan: afterwards `items[k] = items[k] ∘ … ∘ items[n-1]`.
pub fn reverse_inclusive_scan<T, F>(items: &mut [T], op: F) -> ScanStats
where
    T: Send + Sync,
    F: Fn(&T, &T) -> T + Sync,
{
    items.reverse();
    let stats = inclusive_scan(items, |later, earlier| op(earlier, later));
    items.reverse();
    stats
}
