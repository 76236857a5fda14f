//! Generation-quality metrics over a set of generated molecules.
//!
//! Every percentage is a ratio of integer counts times 100, and the counts
//! are the only thing the fast path ([`evaluate`]) and the enumeration
//! oracle ([`brute_force_report`]) compute differently.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::molgraph::graph::count_valence_ok;
use crate::molgraph::{
    canonical_hash, infer_bonds, AtomVocabulary, CanonicalHash, MolecularConfig, MolecularGraph,
};
use crate::uncertainty::{ObjectiveSpec, PropertyOracle};

/// Per-molecule classification used by both the metrics and the reward.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub graph: MolecularGraph,
    pub hash: CanonicalHash,
    pub connected: bool,
    pub atoms_ok: usize,
    pub valid: bool,
}

pub fn classify(config: &MolecularConfig, vocab: &AtomVocabulary) -> Result<Classification> {
    let graph = infer_bonds(config, vocab)?;
    let atoms_ok = count_valence_ok(&graph, vocab)?;
    let connected = graph.is_connected();
    Ok(Classification {
        hash: canonical_hash(&graph),
        valid: connected && atoms_ok == graph.num_atoms(),
        connected,
        atoms_ok,
        graph,
    })
}

/// Valid / unique / novel flags for a batch in list order: a valid molecule
/// is unique if no earlier valid molecule has the same graph, and novel if
/// its graph is absent from the training set.
pub fn batch_flags(
    classes: &[Classification],
    train: &BTreeSet<CanonicalHash>,
) -> Vec<(bool, bool, bool)> {
    let mut seen = BTreeSet::new();
    classes
        .iter()
        .map(|c| {
            if !c.valid {
                return (false, false, false);
            }
            let unique = seen.insert(c.hash);
            (true, unique, !train.contains(&c.hash))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoleculeDetail {
    pub index: usize,
    pub num_atoms: usize,
    pub hash: String,
    pub valid: bool,
    pub connected: bool,
    /// Fraction of atoms within their valence bound.
    pub atom_fraction_ok: f64,
    pub novel: bool,
    pub properties: Vec<f64>,
    pub passes_cutoffs: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub n_generated: usize,
    pub n_valid: usize,
    pub n_unique: usize,
    pub n_novel: usize,
    pub n_atom_stable: usize,
    pub n_mol_stable: usize,
    pub n_top: usize,
    pub validity: f64,
    pub uniqueness: f64,
    pub novelty: f64,
    pub vun: f64,
    pub atom_stability: f64,
    pub mol_stability: f64,
    pub top_molecules: f64,
    /// Share of all generated atoms within their valence bound. `atom_stability` counts whole molecules instead.
    pub atom_stability_per_atom: f64,
    /// Set when no generated molecule is valid and the downstream ratios are reported as 0.
    pub degenerate: bool,
    pub property_names: Vec<String>,
    pub details: Vec<MoleculeDetail>,
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

pub fn vun_from_rates(validity: f64, uniqueness: f64, novelty: f64) -> f64 {
    validity * uniqueness * novelty / 1e4
}

struct Counts {
    valid: usize,
    unique: usize,
    novel: usize,
    atom_stable: usize,
    mol_stable: usize,
    top: usize,
    atoms_ok: usize,
    atoms: usize,
}

fn assemble(
    counts: Counts,
    n: usize,
    property_names: Vec<String>,
    details: Vec<MoleculeDetail>,
) -> GenerationReport {
    let validity = pct(counts.valid, n);
    let uniqueness = pct(counts.unique, counts.valid);
    let novelty = pct(counts.novel, counts.unique);
    GenerationReport {
        n_generated: n,
        n_valid: counts.valid,
        n_unique: counts.unique,
        n_novel: counts.novel,
        n_atom_stable: counts.atom_stable,
        n_mol_stable: counts.mol_stable,
        n_top: counts.top,
        validity,
        uniqueness,
        novelty,
        vun: vun_from_rates(validity, uniqueness, novelty),
        atom_stability: pct(counts.atom_stable, counts.valid),
        mol_stability: pct(counts.mol_stable, counts.valid),
        top_molecules: pct(counts.top, n),
        atom_stability_per_atom: pct(counts.atoms_ok, counts.atoms),
        degenerate: counts.valid == 0,
        property_names,
        details,
    }
}

/// Shared context for scoring a generated set.
pub struct EvalContext<'a> {
    pub vocab: &'a AtomVocabulary,
    pub oracle: &'a dyn PropertyOracle,
    pub objectives: &'a [ObjectiveSpec],
}

fn passes(props: &[f64], objectives: &[ObjectiveSpec]) -> bool {
    props.len() == objectives.len()
        && props
            .iter()
            .zip(objectives)
            .all(|(v, o)| o.direction.satisfied(*v, o.cutoff))
}

fn property_means(ctx: &EvalContext, config: &MolecularConfig) -> Result<Vec<f64>> {
    let names = ctx.oracle.names();
    let ests = ctx.oracle.predict(config)?;
    ctx.objectives
        .iter()
        .map(|o| {
            names
                .iter()
                .position(|n| *n == o.name)
                .map(|k| ests[k].mean)
                .ok_or_else(|| Error::Config(format!("oracle has no property {:?}", o.name)))
        })
        .collect()
}

/// Hash-based metrics. Top molecules counts distinct novel graphs for
/// which at least one generated geometry clears every cutoff.
pub fn evaluate(
    generated: &[MolecularConfig],
    train: &BTreeSet<CanonicalHash>,
    ctx: &EvalContext,
) -> Result<GenerationReport> {
    if generated.is_empty() {
        return Err(Error::Usage("no generated molecules to evaluate".into()));
    }
    let scored: Vec<(Classification, Vec<f64>)> = generated
        .par_iter()
        .map(|m| Ok((classify(m, ctx.vocab)?, property_means(ctx, m)?)))
        .collect::<Result<_>>()?;

    let mut unique: BTreeMap<CanonicalHash, bool> = BTreeMap::new();
    let mut counts = Counts {
        valid: 0,
        unique: 0,
        novel: 0,
        atom_stable: 0,
        mol_stable: 0,
        top: 0,
        atoms_ok: 0,
        atoms: 0,
    };
    let mut details = Vec::with_capacity(generated.len());
    for (i, (c, props)) in scored.iter().enumerate() {
        let n_atoms = c.graph.num_atoms();
        counts.atoms += n_atoms;
        counts.atoms_ok += c.atoms_ok;
        let novel = c.valid && !train.contains(&c.hash);
        let pass = passes(props, ctx.objectives);
        if c.valid {
            counts.valid += 1;
            if c.atoms_ok == n_atoms {
                counts.atom_stable += 1;
            }
            if c.connected && c.atoms_ok == n_atoms {
                counts.mol_stable += 1;
            }
            let slot = unique.entry(c.hash).or_insert(false);
            *slot |= pass;
        }
        details.push(MoleculeDetail {
            index: i,
            num_atoms: n_atoms,
            hash: c.hash.to_hex(),
            valid: c.valid,
            connected: c.connected,
            atom_fraction_ok: c.atoms_ok as f64 / n_atoms as f64,
            novel,
            properties: props.clone(),
            passes_cutoffs: pass,
        });
    }
    counts.unique = unique.len();
    for (h, any_pass) in &unique {
        if !train.contains(h) {
            counts.novel += 1;
            if *any_pass {
                counts.top += 1;
            }
        }
    }
    Ok(assemble(
        counts,
        generated.len(),
        ctx.objectives.iter().map(|o| o.name.clone()).collect(),
        details,
    ))
}

/// Exact labelled-graph isomorphism by backtracking over atoms with
/// matching element and degree.
pub fn isomorphic(a: &MolecularGraph, b: &MolecularGraph) -> bool {
    let n = a.num_atoms();
    if n != b.num_atoms() || a.bonds.len() != b.bonds.len() {
        return false;
    }
    let orders = |g: &MolecularGraph| {
        let mut m = vec![vec![0u8; n]; n];
        for bond in &g.bonds {
            m[bond.i][bond.j] = bond.order;
            m[bond.j][bond.i] = bond.order;
        }
        m
    };
    let ma = orders(a);
    let mb = orders(b);
    let da: Vec<usize> = (0..n).map(|i| a.degree(i)).collect();
    let db: Vec<usize> = (0..n).map(|i| b.degree(i)).collect();
    let compatible = |i: usize, j: usize| a.elements[i] == b.elements[j] && da[i] == db[j];

    let mut map = vec![usize::MAX; n];
    let mut used = vec![false; n];
    let mut stack = vec![0usize];
    // iterative backtracking: stack[i] is the next candidate for atom i
    while let Some(&next) = stack.last() {
        let i = stack.len() - 1;
        if i == n {
            return true;
        }
        if let Some(old) = (map[i] != usize::MAX).then_some(map[i]) {
            used[old] = false;
            map[i] = usize::MAX;
        }
        let found = (next..n)
            .find(|&j| !used[j] && compatible(i, j) && (0..i).all(|k| ma[i][k] == mb[j][map[k]]));
        match found {
            Some(j) => {
                map[i] = j;
                used[j] = true;
                *stack.last_mut().expect("non-empty") = j + 1;
                stack.push(0);
            }
            None => {
                stack.pop();
            }
        }
    }
    false
}

/// Independent oracle for [`evaluate`]: every set operation is done by
/// explicit pairwise isomorphism tests, no hashing.
pub fn brute_force_report(
    generated: &[MolecularConfig],
    train: &[MolecularGraph],
    ctx: &EvalContext,
) -> Result<GenerationReport> {
    if generated.is_empty() {
        return Err(Error::Usage("no generated molecules to evaluate".into()));
    }
    let mut graphs = Vec::new();
    let mut props = Vec::new();
    let mut valid = Vec::new();
    let mut oks = Vec::new();
    let mut connected = Vec::new();
    for m in generated {
        let g = infer_bonds(m, ctx.vocab)?;
        let ok = (0..g.num_atoms())
            .filter(|&a| g.bond_order_sum(a) <= ctx.vocab.max_valence(g.elements[a]).unwrap_or(0))
            .count();
        let conn = g.num_components() <= 1;
        valid.push(conn && ok == g.num_atoms());
        oks.push(ok);
        connected.push(conn);
        props.push(property_means(ctx, m)?);
        graphs.push(g);
    }
    let n = generated.len();
    let in_train = |g: &MolecularGraph| train.iter().any(|t| isomorphic(g, t));
    let mut counts = Counts {
        valid: valid.iter().filter(|v| **v).count(),
        unique: 0,
        novel: 0,
        atom_stable: 0,
        mol_stable: 0,
        top: 0,
        atoms_ok: oks.iter().sum(),
        atoms: graphs.iter().map(|g| g.num_atoms()).sum(),
    };
    let mut details = Vec::with_capacity(n);
    for i in 0..n {
        let g = &graphs[i];
        let pass = passes(&props[i], ctx.objectives);
        let novel = valid[i] && !in_train(g);
        if valid[i] {
            if oks[i] == g.num_atoms() {
                counts.atom_stable += 1;
            }
            if connected[i] && oks[i] == g.num_atoms() {
                counts.mol_stable += 1;
            }
            // class representative: the first valid molecule isomorphic to this one
            let first = (0..i).all(|j| !(valid[j] && isomorphic(&graphs[j], g)));
            if first {
                counts.unique += 1;
                if novel {
                    counts.novel += 1;
                    let any_pass = (i..n).any(|j| {
                        valid[j] && isomorphic(&graphs[j], g) && passes(&props[j], ctx.objectives)
                    });
                    if any_pass {
                        counts.top += 1;
                    }
                }
            }
        }
        details.push(MoleculeDetail {
            index: i,
            num_atoms: g.num_atoms(),
            hash: canonical_hash(g).to_hex(),
            valid: valid[i],
            connected: connected[i],
            atom_fraction_ok: oks[i] as f64 / g.num_atoms() as f64,
            novel,
            properties: props[i].clone(),
            passes_cutoffs: pass,
        });
    }
    Ok(assemble(
        counts,
        n,
        ctx.objectives.iter().map(|o| o.name.clone()).collect(),
        details,
    ))
}

impl GenerationReport {
    /// One-line summary for terminals and logs.
    pub fn table_row(&self) -> String {
        format!(
            "n={} Val={:.2} Uni={:.2} Nov={:.2} VUN={:.2} AtomSta={:.2} MolSta={:.2} Top={:.2}{}",
            self.n_generated,
            self.validity,
            self.uniqueness,
            self.novelty,
            self.vun,
            self.atom_stability,
            self.mol_stability,
            self.top_molecules,
            if self.degenerate {
                " (no valid molecules)"
            } else {
                ""
            }
        )
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn write_details_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![
            "index".to_string(),
            "num_atoms".into(),
            "hash".into(),
            "valid".into(),
            "connected".into(),
            "atom_fraction_ok".into(),
            "novel".into(),
            "passes_cutoffs".into(),
        ];
        header.extend(self.property_names.iter().cloned());
        w.write_record(&header)?;
        for d in &self.details {
            let mut row = vec![
                d.index.to_string(),
                d.num_atoms.to_string(),
                d.hash.clone(),
                d.valid.to_string(),
                d.connected.to_string(),
                d.atom_fraction_ok.to_string(),
                d.novel.to_string(),
                d.passes_cutoffs.to_string(),
            ];
            row.extend(d.properties.iter().map(|p| p.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("metrics csv", e))
    }
}
