//! Contiguous block decomposition shared by all workloads.

use std::ops::Range;

/// Block `r` of `n` items split over `parts` ranks. Sizes differ by at most one.
pub fn block(n: u64, parts: u32, r: u32) -> Range<u64> {
    let at = |k: u32| ((n as u128 * k as u128) / parts as u128) as u64;
    at(r)..at(r + 1)
}

/// The rank whose block contains `item`.
pub fn owner(n: u64, parts: u32, item: u64) -> u32 {
    debug_assert!(item < n);
    let scaled = (item as u128 + 1) * parts as u128;
    (scaled.div_ceil(n as u128) - 1) as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn blocks_tile_the_range() {
        let b: Vec<_> = (0..3).map(|r| block(10, 3, r)).collect();
        assert_eq!(b, vec![0..3, 3..6, 6..10]);
    }

    proptest! {
        #[test]
        fn owner_agrees_with_scan(n in 1u64..5000, parts in 1u32..17, pick in any::<u64>()) {
            let item = pick % n;
            let scanned = (0..parts).find(|&r| block(n, parts, r).contains(&item)).unwrap();
            prop_assert_eq!(owner(n, parts, item), scanned);
        }
    }
}
