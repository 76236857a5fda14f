use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::molgraph::MolecularGraph;

/// Minimum number of color-refinement rounds.
pub const WL_ITERATIONS: usize = 4;

/// Permutation-invariant 256-bit digest of a bond graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CanonicalHash(pub [u8; 32]);

impl CanonicalHash {
    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 64 {
            return None;
        }
        let mut out = [0u8; 32];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            let text = std::str::from_utf8(chunk).ok()?;
            out[i] = u8::from_str_radix(text, 16).ok()?;
        }
        Some(Self(out))
    }
}

impl fmt::Display for CanonicalHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// splitmix64 finalizer over a combined pair.
pub(crate) fn mix64(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add(a << 6)
        .wrapping_add(a >> 2);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn distinct(colors: &[u64]) -> usize {
    let mut c = colors.to_vec();
    c.sort_unstable();
    c.dedup();
    c.len()
}

/// Weisfeiler-Lehman refinement seeded with element and degree, with
/// bond-order labelled edges. Runs at least [`WL_ITERATIONS`] rounds and
/// keeps going while the partition still splits. The digest covers the
/// sorted color multiset of every round.
pub fn canonical_hash(graph: &MolecularGraph) -> CanonicalHash {
    let adj = graph.adjacency();
    let n = graph.num_atoms();
    let mut colors: Vec<u64> = (0..n)
        .map(|i| mix64(fnv1a(graph.symbols[i].as_bytes()), adj[i].len() as u64))
        .collect();

    let mut hasher = Sha256::new();
    hasher.update((n as u64).to_le_bytes());
    hasher.update((graph.bonds.len() as u64).to_le_bytes());
    let absorb = |hasher: &mut Sha256, colors: &[u64]| {
        let mut sorted = colors.to_vec();
        sorted.sort_unstable();
        for c in sorted {
            hasher.update(c.to_le_bytes());
        }
    };
    absorb(&mut hasher, &colors);

    let mut classes = distinct(&colors);
    let mut round = 0;
    loop {
        let next: Vec<u64> = (0..n)
            .map(|i| {
                let mut neigh: Vec<u64> = adj[i]
                    .iter()
                    .map(|&(j, order)| mix64(colors[j], order as u64))
                    .collect();
                neigh.sort_unstable();
                neigh
                    .iter()
                    .fold(mix64(colors[i], 0x5157), |acc, &c| mix64(acc, c))
            })
            .collect();
        colors = next;
        absorb(&mut hasher, &colors);
        round += 1;
        let refined = distinct(&colors);
        if (round >= WL_ITERATIONS && refined == classes) || round >= n.max(WL_ITERATIONS) {
            break;
        }
        classes = refined;
    }
    CanonicalHash(hasher.finalize().into())
}
