//! Colexicographic ranking of occupancy vectors.
//!
//! States are ordered lexicographically by `(η_{L−1}, …, η_0)`. The rank of
//! `η` counts the states with a smaller key, using the number of ways to
//! fill the remaining low sites: `C(r + j − 1, j − 1)` vectors of length
//! `j` sum to `r`.

use crate::model::Configuration;

use super::ExactError;

/// Default ceiling on `|Ω_{N,L}|`.
pub const STATE_GUARD: usize = 200_000;

/// Bijection between `Ω_{N,L}` and `0..C(N+L−1, L−1)`.
#[derive(Debug, Clone)]
pub struct StateIndex {
    n: u32,
    len: usize,
    /// `ways[j][r]`: vectors of length `j` summing to `r`.
    ways: Vec<Vec<u64>>,
    states: Vec<u32>,
}

/// `C(N+L−1, L−1)`, or `None` past `limit`.
pub fn state_count(n: u32, len: usize, limit: usize) -> Option<usize> {
    // C(n + len − 1, n) built multiplicatively; stays exact in u128
    let mut c: u128 = 1;
    let top = u128::from(n) + len as u128 - 1;
    for i in 1..=u128::from(n).min(len as u128 - 1) {
        c = c * (top + 1 - i) / i;
        if c > limit as u128 * 1_000_000 {
            return None;
        }
    }
    let c = usize::try_from(c).ok()?;
    (c <= limit).then_some(c)
}

impl StateIndex {
    pub fn new(n: u32, len: usize) -> Result<Self, ExactError> {
        Self::with_guard(n, len, STATE_GUARD)
    }

    pub fn with_guard(n: u32, len: usize, guard: usize) -> Result<Self, ExactError> {
        if len == 0 {
            return Err(ExactError::TooLarge { states: None, guard });
        }
        let count = state_count(n, len, guard).ok_or(ExactError::TooLarge { states: None, guard })?;
        let nn = n as usize;
        let mut ways = vec![vec![0u64; nn + 1]; len + 1];
        ways[0][0] = 1;
        for j in 1..=len {
            let mut acc = 0u64;
            for r in 0..=nn {
                acc += ways[j - 1][r];
                ways[j][r] = acc;
            }
        }
        let mut states = Vec::with_capacity(count * len);
        let mut buf = vec![0u32; len];
        fill(&mut buf, len, n, &mut states);
        debug_assert_eq!(states.len(), count * len);
        Ok(StateIndex { n, len, ways, states })
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn sites(&self) -> usize {
        self.len
    }

    pub fn size(&self) -> usize {
        self.states.len() / self.len
    }

    /// Occupancy of state `rank`.
    pub fn occupancy(&self, rank: usize) -> &[u32] {
        &self.states[rank * self.len..(rank + 1) * self.len]
    }

    pub fn decode(&self, rank: usize) -> Configuration {
        Configuration::new(self.occupancy(rank).to_vec()).expect("enumerated states are valid")
    }

    /// Rank of an occupancy vector with the right size and mass.
    pub fn rank(&self, occupancy: &[u32]) -> Option<usize> {
        if occupancy.len() != self.len || occupancy.iter().sum::<u32>() != self.n {
            return None;
        }
        let mut rank = 0u64;
        let mut rem = self.n as usize;
        for p in (1..self.len).rev() {
            let v = occupancy[p] as usize;
            for smaller in 0..v {
                rank += self.ways[p][rem - smaller];
            }
            rem -= v;
        }
        Some(rank as usize)
    }

    pub fn encode(&self, eta: &Configuration) -> Option<usize> {
        self.rank(eta.occupancy())
    }
}

/// Appends every vector of length `len` summing to `rem`, in key order.
fn fill(buf: &mut [u32], len: usize, rem: u32, out: &mut Vec<u32>) {
    if len == 1 {
        buf[0] = rem;
        out.extend_from_slice(buf);
        return;
    }
    for v in 0..=rem {
        buf[len - 1] = v;
        fill(buf, len - 1, rem - v, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(StateIndex::new(3, 3).unwrap().size(), 10);
        assert_eq!(StateIndex::new(6, 8).unwrap().size(), 1716);
        assert_eq!(StateIndex::new(1, 5).unwrap().size(), 5);
        assert!(matches!(StateIndex::new(40, 40), Err(ExactError::TooLarge { .. })));
    }

    #[test]
    fn round_trip_and_order() {
        let idx = StateIndex::new(4, 5).unwrap();
        for r in 0..idx.size() {
            assert_eq!(idx.rank(idx.occupancy(r)), Some(r));
        }
        for r in 1..idx.size() {
            let key = |s: &[u32]| s.iter().rev().copied().collect::<Vec<_>>();
            assert!(key(idx.occupancy(r - 1)) < key(idx.occupancy(r)));
        }
        assert_eq!(idx.occupancy(0), &[4, 0, 0, 0, 0]);
        assert_eq!(idx.rank(&[1, 1, 1, 1, 1]), None);
    }
}
