use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::molgraph::MolecularConfig;

/// Index lists into the dataset that was split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Sorted, deduplicated element set of a molecule, e.g. `C,N,O`.
pub fn species_key(config: &MolecularConfig) -> String {
    let mut set: Vec<&str> = config.atom_types.iter().map(String::as_str).collect();
    set.sort_unstable();
    set.dedup();
    set.join(",")
}

/// Species-grouped split: molecules sharing an element set always land in
/// the same partition. Groups are shuffled with `seed` and each is handed
/// to the partition furthest below its target size.
pub fn species_split(
    dataset: &[MolecularConfig],
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitIndices> {
    if dataset.is_empty() {
        return Err(Error::Degenerate("cannot split an empty dataset".into()));
    }
    if ratios.iter().any(|r| !(*r >= 0.0) || !r.is_finite())
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, m) in dataset.iter().enumerate() {
        groups.entry(species_key(m)).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let total = dataset.len() as f64;
    let mut parts: [Vec<usize>; 3] = Default::default();
    for group in groups {
        let target = (0..3)
            .filter(|&k| ratios[k] > 0.0)
            .max_by(|&a, &b| {
                let da = ratios[a] * total - parts[a].len() as f64;
                let db = ratios[b] * total - parts[b].len() as f64;
                da.partial_cmp(&db).unwrap().then(b.cmp(&a))
            })
            .expect("at least one positive ratio");
        parts[target].extend(group);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    let [train, valid, test] = parts;
    Ok(SplitIndices { train, valid, test })
}
