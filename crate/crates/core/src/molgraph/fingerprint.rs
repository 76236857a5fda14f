use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::molgraph::hash::{fnv1a, mix64};
use crate::molgraph::MolecularGraph;

pub const DEFAULT_FINGERPRINT_BITS: usize = 2048;
pub const FINGERPRINT_RADIUS: usize = 2;

/// Fixed-width bit vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    words: Vec<u64>,
    nbits: usize,
}

impl Fingerprint {
    pub fn new(nbits: usize) -> Self {
        Self {
            words: vec![0; nbits.div_ceil(64)],
            nbits,
        }
    }

    pub fn width(&self) -> usize {
        self.nbits
    }

    pub fn set(&mut self, bit: usize) {
        let bit = bit % self.nbits;
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn get(&self, bit: usize) -> bool {
        let bit = bit % self.nbits;
        self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }
}

/// Circular (ECFP-style) neighborhood identifiers up to [`FINGERPRINT_RADIUS`]
/// folded into `nbits` bits.
pub fn fingerprint_with_width(graph: &MolecularGraph, nbits: usize) -> Fingerprint {
    let adj = graph.adjacency();
    let mut fp = Fingerprint::new(nbits.max(1));
    let mut ids: Vec<u64> = (0..graph.num_atoms())
        .map(|i| {
            let order_sum: u64 = adj[i].iter().map(|&(_, o)| o as u64).sum();
            mix64(
                mix64(fnv1a(graph.symbols[i].as_bytes()), adj[i].len() as u64),
                order_sum,
            )
        })
        .collect();
    for &id in &ids {
        fp.set((id % nbits as u64) as usize);
    }
    for radius in 1..=FINGERPRINT_RADIUS {
        ids = (0..graph.num_atoms())
            .map(|i| {
                let mut neigh: Vec<u64> = adj[i]
                    .iter()
                    .map(|&(j, o)| mix64(o as u64, ids[j]))
                    .collect();
                neigh.sort_unstable();
                neigh
                    .iter()
                    .fold(mix64(radius as u64, ids[i]), |acc, &c| mix64(acc, c))
            })
            .collect();
        for &id in &ids {
            fp.set((id % nbits as u64) as usize);
        }
    }
    fp
}

pub fn fingerprint(graph: &MolecularGraph) -> Fingerprint {
    fingerprint_with_width(graph, DEFAULT_FINGERPRINT_BITS)
}

/// |a ∧ b| / |a ∨ b|, with two empty fingerprints counted as identical.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> Result<f64> {
    if a.nbits != b.nbits {
        return Err(Error::Shape(format!(
            "fingerprint widths differ: {} vs {}",
            a.nbits, b.nbits
        )));
    }
    let (mut inter, mut union) = (0u32, 0u32);
    for (x, y) in a.words.iter().zip(&b.words) {
        inter += (x & y).count_ones();
        union += (x | y).count_ones();
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}
