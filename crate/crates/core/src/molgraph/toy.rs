//! Random acyclic heavy-atom molecules for desk-scale experiments.

use ndarray::Array2;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::molgraph::graph::BOND_MARGIN;
use crate::molgraph::{is_valid, AtomVocabulary, MolecularConfig};

#[derive(Debug, Clone)]
pub struct ToySpec {
    pub min_atoms: usize,
    pub max_atoms: usize,
    /// Sampling weight per vocabulary entry.
    pub element_weights: Vec<f64>,
}

impl ToySpec {
    pub fn qm9_like() -> Self {
        Self {
            min_atoms: 3,
            max_atoms: 9,
            element_weights: vec![0.70, 0.12, 0.12, 0.06],
        }
    }
}

const CLEARANCE: f64 = 0.15;

/// Grows a random tree of single bonds. Every bond sits just above the sum
/// of covalent radii and every non-bonded pair is kept clear of the bonding
/// cutoff, so the result always passes [`is_valid`].
pub fn random_molecule<R: Rng + ?Sized>(
    rng: &mut R,
    vocab: &AtomVocabulary,
    spec: &ToySpec,
) -> Result<MolecularConfig> {
    if spec.element_weights.len() != vocab.len()
        || spec.min_atoms == 0
        || spec.min_atoms > spec.max_atoms
    {
        return Err(Error::Config(
            "toy spec does not match the vocabulary".into(),
        ));
    }
    let picker =
        WeightedIndex::new(&spec.element_weights).map_err(|e| Error::Config(e.to_string()))?;
    // a multivalent seed atom keeps growth from stalling on F or O
    let seed_elem = (0..vocab.len())
        .filter(|&e| vocab.max_valence(e).unwrap_or(0) >= 3)
        .max_by(|&a, &b| spec.element_weights[a].total_cmp(&spec.element_weights[b]))
        .ok_or_else(|| Error::Config("vocabulary needs an element of valence >= 3".into()))?;

    for _attempt in 0..100 {
        let target = rng.gen_range(spec.min_atoms..=spec.max_atoms);
        let mut elems = vec![seed_elem];
        let mut pos: Vec<[f64; 3]> = vec![[0.0; 3]];
        let mut bonds = vec![0u32];
        let mut stalls = 0;
        while elems.len() < target && stalls < 200 {
            let parent = rng.gen_range(0..elems.len());
            let child = picker.sample(rng);
            if bonds[parent] >= vocab.max_valence(elems[parent])? {
                stalls += 1;
                continue;
            }
            let (rp, rc) = (
                vocab.covalent_radius(elems[parent])?,
                vocab.covalent_radius(child)?,
            );
            let length = rp + rc + rng.gen_range(0.0..0.1);
            let mut dir: [f64; 3] = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            dir.iter_mut().for_each(|v| *v /= norm);
            let cand = [
                pos[parent][0] + length * dir[0],
                pos[parent][1] + length * dir[1],
                pos[parent][2] + length * dir[2],
            ];
            let clear = elems.iter().enumerate().all(|(k, &e)| {
                if k == parent {
                    return true;
                }
                let d = (0..3)
                    .map(|a| (pos[k][a] - cand[a]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                d > vocab.covalent_radius(e).unwrap_or(0.0) + rc + BOND_MARGIN + CLEARANCE
            });
            if !clear {
                stalls += 1;
                continue;
            }
            elems.push(child);
            pos.push(cand);
            bonds[parent] += 1;
            bonds.push(1);
        }
        if elems.len() < spec.min_atoms {
            continue;
        }
        let coords = Array2::from_shape_fn((elems.len(), 3), |(i, k)| pos[i][k]);
        let symbols = elems.iter().map(|&e| vocab.symbol(e).to_string()).collect();
        let config = MolecularConfig::new(symbols, coords, vec![])?.centered()?;
        if is_valid(&config, vocab) {
            return Ok(config);
        }
    }
    Err(Error::Config("could not grow a valid molecule".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_molecules_are_valid() {
        let vocab = AtomVocabulary::qm9();
        let spec = ToySpec::qm9_like();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let m = random_molecule(&mut rng, &vocab, &spec).unwrap();
            assert!(m.num_atoms() >= 3 && m.num_atoms() <= 9);
            assert!(is_valid(&m, &vocab));
        }
    }
}
