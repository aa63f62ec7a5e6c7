//! Bitmask coalitions over a small ordered player set.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Hard cap on exact enumeration.
pub const MAX_PLAYERS: usize = 20;

/// A subset of players `{0, .., n-1}` stored as a bitmask. Bit `k` set means
/// player `k` belongs to the coalition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Coalition(pub u32);

impl Coalition {
    pub const EMPTY: Coalition = Coalition(0);

    pub fn full(n: usize) -> Coalition {
        debug_assert!(n <= MAX_PLAYERS);
        if n == 0 {
            Coalition(0)
        } else {
            Coalition((1u32 << n) - 1)
        }
    }

    pub fn singleton(k: usize) -> Coalition {
        Coalition(1u32 << k)
    }

    pub fn from_players<I: IntoIterator<Item = usize>>(players: I) -> Coalition {
        Coalition(players.into_iter().fold(0u32, |m, k| m | (1u32 << k)))
    }

    #[inline]
    pub fn contains(self, k: usize) -> bool {
        self.0 & (1u32 << k) != 0
    }

    #[inline]
    pub fn with(self, k: usize) -> Coalition {
        Coalition(self.0 | (1u32 << k))
    }

    #[inline]
    pub fn without(self, k: usize) -> Coalition {
        Coalition(self.0 & !(1u32 << k))
    }

    #[inline]
    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    #[inline]
    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset_of(self, other: Coalition) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn players(self) -> impl Iterator<Item = usize> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                None
            } else {
                let k = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(k)
            }
        })
    }

    /// Names of the members, sorted, joined by `;`.
    pub fn label(self, names: &[String]) -> String {
        let mut v: Vec<String> =
            self.players().map(|k| names.get(k).cloned().unwrap_or_else(|| format!("#{k}"))).collect();
        v.sort_unstable();
        v.join(";")
    }
}

impl fmt::Display for Coalition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, k) in self.players().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{k}")?;
        }
        write!(f, "}}")
    }
}

/// All coalitions of exactly `size` players drawn from `0..n`, in increasing
/// bitmask order (Gosper's hack).
pub fn subsets_of_size(n: usize, size: usize) -> impl Iterator<Item = Coalition> {
    let limit: u64 = 1u64 << n;
    let mut next: Option<u64> = if size > n {
        None
    } else if size == 0 {
        Some(0)
    } else {
        Some((1u64 << size) - 1)
    };
    std::iter::from_fn(move || {
        let cur = next?;
        next = if cur == 0 {
            None
        } else {
            let c = cur & cur.wrapping_neg();
            let r = cur + c;
            let succ = (((r ^ cur) >> 2) / c) | r;
            (succ < limit).then_some(succ)
        };
        Some(Coalition(cur as u32))
    })
}

/// Every non-empty coalition over `0..n`, ordered by bitmask.
pub fn non_empty_subsets(n: usize) -> impl Iterator<Item = Coalition> {
    (1u32..(1u32 << n)).map(Coalition)
}

/// `C(n, k)` as a float; exact for the sizes used here.
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gosper_enumerates_each_size_exactly() {
        for n in 0..=10 {
            for s in 0..=n {
                let v: Vec<_> = subsets_of_size(n, s).collect();
                assert_eq!(v.len() as f64, binomial(n, s), "n={n} s={s}");
                assert!(v.iter().all(|c| c.len() == s && c.is_subset_of(Coalition::full(n))));
                assert!(v.windows(2).all(|w| w[0] < w[1]));
            }
            assert_eq!(subsets_of_size(n, n + 1).count(), 0);
        }
    }

    #[test]
    fn players_and_label() {
        let c = Coalition::from_players([3, 0, 2]);
        assert_eq!(c.players().collect::<Vec<_>>(), vec![0, 2, 3]);
        let names: Vec<String> = ["d", "c", "b", "a"].iter().map(|s| s.to_string()).collect();
        assert_eq!(c.label(&names), "a;b;d");
        assert_eq!(c.to_string(), "{0,2,3}");
        assert!(c.with(1).contains(1));
        assert!(!c.without(2).contains(2));
    }
}
