use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::molgraph::{AtomVocabulary, MolecularConfig};

/// Slack added to the sum of covalent radii when deciding whether two atoms bond.
pub const BOND_MARGIN: f64 = 0.40;
/// A pair closer than `r_i + r_j - DOUBLE_SHRINK` gets a double bond.
pub const DOUBLE_SHRINK: f64 = 0.15;
/// A pair closer than `r_i + r_j - TRIPLE_SHRINK` gets a triple bond.
pub const TRIPLE_SHRINK: f64 = 0.30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub order: u8,
}

/// Heavy-atom bond graph. Edges are stored once with `i < j`, sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MolecularGraph {
    pub symbols: Vec<String>,
    pub elements: Vec<usize>,
    pub bonds: Vec<Bond>,
}

impl MolecularGraph {
    pub fn new(symbols: Vec<String>, elements: Vec<usize>, mut bonds: Vec<Bond>) -> Result<Self> {
        if symbols.len() != elements.len() {
            return Err(Error::Shape(
                "symbol and element lists differ in length".into(),
            ));
        }
        for b in bonds.iter_mut() {
            if b.i == b.j {
                return Err(Error::InvalidGeometry(format!("self bond on atom {}", b.i)));
            }
            if b.i.max(b.j) >= symbols.len() {
                return Err(Error::InvalidGeometry(format!(
                    "bond ({}, {}) out of range",
                    b.i, b.j
                )));
            }
            if !(1..=3).contains(&b.order) {
                return Err(Error::InvalidGeometry(format!(
                    "bond order {} not in 1..=3",
                    b.order
                )));
            }
            if b.i > b.j {
                std::mem::swap(&mut b.i, &mut b.j);
            }
        }
        bonds.sort();
        if bonds
            .windows(2)
            .any(|w| w[0].i == w[1].i && w[0].j == w[1].j)
        {
            return Err(Error::InvalidGeometry("duplicate bond".into()));
        }
        Ok(Self {
            symbols,
            elements,
            bonds,
        })
    }

    pub fn num_atoms(&self) -> usize {
        self.symbols.len()
    }

    /// Neighbor lists as `(neighbor, order)` pairs, sorted by neighbor index.
    pub fn adjacency(&self) -> Vec<Vec<(usize, u8)>> {
        let mut adj = vec![Vec::new(); self.num_atoms()];
        for b in &self.bonds {
            adj[b.i].push((b.j, b.order));
            adj[b.j].push((b.i, b.order));
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn degree(&self, atom: usize) -> usize {
        self.bonds
            .iter()
            .filter(|b| b.i == atom || b.j == atom)
            .count()
    }

    /// Sum of incident bond orders.
    pub fn bond_order_sum(&self, atom: usize) -> u32 {
        self.bonds
            .iter()
            .filter(|b| b.i == atom || b.j == atom)
            .map(|b| b.order as u32)
            .sum()
    }

    pub fn num_components(&self) -> usize {
        let n = self.num_atoms();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut components = n;
        for b in &self.bonds {
            let (ri, rj) = (find(&mut parent, b.i), find(&mut parent, b.j));
            if ri != rj {
                parent[ri] = rj;
                components -= 1;
            }
        }
        components
    }

    pub fn is_connected(&self) -> bool {
        self.num_components() <= 1
    }

    /// Cycle rank |E| - |V| + components.
    pub fn ring_count(&self) -> usize {
        self.bonds.len() + self.num_components() - self.num_atoms()
    }
}

/// Distance-bin bond perception over all atom pairs.
pub fn infer_bonds(config: &MolecularConfig, vocab: &AtomVocabulary) -> Result<MolecularGraph> {
    let elements = config.element_indices(vocab)?;
    let n = elements.len();
    let mut bonds = Vec::new();
    for i in 0..n {
        let ri = vocab.covalent_radius(elements[i])?;
        let vi = vocab.max_valence(elements[i])?;
        for j in (i + 1)..n {
            let rj = vocab.covalent_radius(elements[j])?;
            let vj = vocab.max_valence(elements[j])?;
            let d = (0..3)
                .map(|k| (config.coords[[i, k]] - config.coords[[j, k]]).powi(2))
                .sum::<f64>()
                .sqrt();
            let reference = ri + rj;
            if d > reference + BOND_MARGIN {
                continue;
            }
            let capacity = vi.min(vj);
            let order = if d <= reference - TRIPLE_SHRINK && capacity >= 3 {
                3
            } else if d <= reference - DOUBLE_SHRINK && capacity >= 2 {
                2
            } else {
                1
            };
            bonds.push(Bond { i, j, order });
        }
    }
    MolecularGraph::new(config.atom_types.clone(), elements, bonds)
}

/// Hydrogens are implicit, so an atom is fine as long as it is not over-bonded.
pub fn atom_valence_ok(
    graph: &MolecularGraph,
    atom: usize,
    vocab: &AtomVocabulary,
) -> Result<bool> {
    let element = *graph
        .elements
        .get(atom)
        .ok_or_else(|| Error::Vocabulary(format!("atom {atom} not in graph")))?;
    if element >= vocab.len() || vocab.symbol(element) != graph.symbols[atom] {
        return Err(Error::Vocabulary(format!(
            "element {:?} not in vocabulary",
            graph.symbols[atom]
        )));
    }
    Ok(graph.bond_order_sum(atom) <= vocab.max_valence(element)?)
}

/// Number of atoms passing [`atom_valence_ok`].
pub fn count_valence_ok(graph: &MolecularGraph, vocab: &AtomVocabulary) -> Result<usize> {
    let mut ok = 0;
    for a in 0..graph.num_atoms() {
        if atom_valence_ok(graph, a, vocab)? {
            ok += 1;
        }
    }
    Ok(ok)
}

/// Connected and no atom exceeds its maximum valence.
pub fn graph_is_valid(graph: &MolecularGraph, vocab: &AtomVocabulary) -> bool {
    graph.is_connected()
        && matches!(count_valence_ok(graph, vocab), Ok(n) if n == graph.num_atoms())
}

pub fn is_valid(config: &MolecularConfig, vocab: &AtomVocabulary) -> bool {
    match infer_bonds(config, vocab) {
        Ok(graph) => graph_is_valid(&graph, vocab),
        Err(_) => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn mol(symbols: &[&str], coords: Array2<f64>) -> MolecularConfig {
        MolecularConfig::new(
            symbols.iter().map(|s| s.to_string()).collect(),
            coords,
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn cc_single_bond_at_154() {
        let vocab = AtomVocabulary::qm9();
        let g = infer_bonds(
            &mol(&["C", "C"], array![[0.0, 0.0, 0.0], [1.54, 0.0, 0.0]]),
            &vocab,
        )
        .unwrap();
        assert_eq!(
            g.bonds,
            vec![Bond {
                i: 0,
                j: 1,
                order: 1
            }]
        );
    }

    #[test]
    fn cc_no_bond_at_3() {
        let vocab = AtomVocabulary::qm9();
        let g = infer_bonds(
            &mol(&["C", "C"], array![[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]]),
            &vocab,
        )
        .unwrap();
        assert!(g.bonds.is_empty());
    }

    #[test]
    fn single_atom_has_no_edges() {
        let vocab = AtomVocabulary::qm9();
        let g = infer_bonds(&mol(&["N"], array![[0.0, 0.0, 0.0]]), &vocab).unwrap();
        assert!(g.bonds.is_empty());
        assert!(atom_valence_ok(&g, 0, &vocab).unwrap());
    }

    #[test]
    fn bond_order_bins() {
        let vocab = AtomVocabulary::qm9();
        // r_C + r_C = 1.52: double at <= 1.37, triple at <= 1.22
        for (d, order) in [(1.40, 1), (1.34, 2), (1.20, 3)] {
            let g = infer_bonds(
                &mol(&["C", "C"], array![[0.0, 0.0, 0.0], [d, 0.0, 0.0]]),
                &vocab,
            )
            .unwrap();
            assert_eq!(g.bonds[0].order, order, "distance {d}");
        }
        // F caps the order at 1 no matter how close
        let g = infer_bonds(
            &mol(&["C", "F"], array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]),
            &vocab,
        )
        .unwrap();
        assert_eq!(g.bonds[0].order, 1);
    }

    fn star(center: &str, arms: usize) -> MolecularConfig {
        let dirs = [
            [1.0, 1.0, 1.0],
            [1.0, -1.0, -1.0],
            [-1.0, 1.0, -1.0],
            [-1.0, -1.0, 1.0],
        ];
        let mut coords = Array2::zeros((arms + 1, 3));
        let scale = 1.45 / 3f64.sqrt();
        for (a, d) in dirs.iter().take(arms).enumerate() {
            for k in 0..3 {
                coords[[a + 1, k]] = d[k] * scale;
            }
        }
        let mut syms = vec![center];
        syms.extend(std::iter::repeat("C").take(arms));
        mol(&syms, coords)
    }

    #[test]
    fn valence_examples() {
        let vocab = AtomVocabulary::qm9();
        let c4 = infer_bonds(&star("C", 4), &vocab).unwrap();
        assert_eq!(c4.degree(0), 4);
        assert!(atom_valence_ok(&c4, 0, &vocab).unwrap());
        let o3 = infer_bonds(&star("O", 3), &vocab).unwrap();
        assert_eq!(o3.degree(0), 3);
        assert!(!atom_valence_ok(&o3, 0, &vocab).unwrap());
        assert!(!is_valid(&star("O", 3), &vocab));
        assert!(is_valid(&star("C", 4), &vocab));
    }

    #[test]
    fn validity_examples() {
        let vocab = AtomVocabulary::qm9();
        assert!(is_valid(
            &mol(&["C", "C"], array![[0.0, 0.0, 0.0], [1.54, 0.0, 0.0]]),
            &vocab
        ));
        assert!(!is_valid(
            &mol(&["C", "O"], array![[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]]),
            &vocab
        ));
        assert!(!is_valid(
            &mol(&["C", "Xe"], array![[0.0, 0.0, 0.0], [1.5, 0.0, 0.0]]),
            &vocab
        ));
    }

    #[test]
    fn unknown_element_in_graph_is_vocab_error() {
        let vocab = AtomVocabulary::qm9();
        let g = MolecularGraph::new(vec!["S".into()], vec![7], vec![]).unwrap();
        assert!(matches!(
            atom_valence_ok(&g, 0, &vocab),
            Err(Error::Vocabulary(_))
        ));
    }

    #[test]
    fn ring_count_of_triangle() {
        let g = MolecularGraph::new(
            vec!["C".into(); 3],
            vec![0; 3],
            vec![
                Bond {
                    i: 0,
                    j: 1,
                    order: 1,
                },
                Bond {
                    i: 1,
                    j: 2,
                    order: 1,
                },
                Bond {
                    i: 2,
                    j: 0,
                    order: 1,
                },
            ],
        )
        .unwrap();
        assert_eq!(g.ring_count(), 1);
        assert!(g.is_connected());
    }
}
