use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::molgraph::{canonical_hash, infer_bonds, AtomVocabulary, MolecularConfig};
use crate::uncertainty::{Direction, ObjectiveSpec, PropertyEstimate};

/// Anything that scores molecules with predictive uncertainty.
pub trait PropertyOracle: Send + Sync {
    fn names(&self) -> Vec<String>;
    fn predict(&self, config: &MolecularConfig) -> Result<Vec<PropertyEstimate>>;
}

/// One built-in property with its noise model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticProperty {
    pub name: String,
    pub direction: Direction,
    /// Static cutoff, also the floor for dynamic cutoffs.
    pub cutoff: f64,
    pub var_aleatoric: f64,
    /// Epistemic variance is `epistemic_scale / (1 + M)`.
    pub epistemic_scale: f64,
}

/// Desk-scale stand-ins for drug-likeness, synthetic accessibility and
/// binding affinity computed from the inferred bond graph and geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticOracle {
    vocab: AtomVocabulary,
    properties: Vec<SyntheticProperty>,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl SyntheticOracle {
    pub const NAMES: [&'static str; 3] = ["qed", "sas", "affinity"];

    pub fn default_properties() -> Vec<SyntheticProperty> {
        vec![
            SyntheticProperty {
                name: "qed".into(),
                direction: Direction::Maximize,
                cutoff: 0.4,
                var_aleatoric: 0.05 * 0.05,
                epistemic_scale: 0.01,
            },
            SyntheticProperty {
                name: "sas".into(),
                direction: Direction::Minimize,
                cutoff: 2.5,
                var_aleatoric: 0.1 * 0.1,
                epistemic_scale: 0.05,
            },
            SyntheticProperty {
                name: "affinity".into(),
                direction: Direction::Minimize,
                cutoff: -1.5,
                var_aleatoric: 0.1 * 0.1,
                epistemic_scale: 0.05,
            },
        ]
    }

    pub fn new(vocab: AtomVocabulary, properties: Vec<SyntheticProperty>) -> Result<Self> {
        for p in &properties {
            if !Self::NAMES.contains(&p.name.as_str()) {
                return Err(Error::Config(format!(
                    "unknown synthetic property {:?}; expected one of {:?}",
                    p.name,
                    Self::NAMES
                )));
            }
            if !(p.var_aleatoric >= 0.0 && p.epistemic_scale >= 0.0) {
                return Err(Error::Config(format!(
                    "property {:?} has negative variance",
                    p.name
                )));
            }
        }
        Ok(Self { vocab, properties })
    }

    pub fn with_defaults(vocab: AtomVocabulary) -> Self {
        Self::new(vocab, Self::default_properties()).expect("defaults are valid")
    }

    pub fn properties(&self) -> &[SyntheticProperty] {
        &self.properties
    }

    pub fn objectives(&self) -> Vec<ObjectiveSpec> {
        self.properties
            .iter()
            .map(|p| ObjectiveSpec {
                name: p.name.clone(),
                direction: p.direction,
                cutoff: p.cutoff,
            })
            .collect()
    }

    /// Noise-free property values.
    pub fn raw_values(&self, config: &MolecularConfig) -> Result<BTreeMap<&'static str, f64>> {
        let graph = infer_bonds(config, &self.vocab)?;
        let m = config.num_atoms() as f64;
        let hetero = config
            .atom_types
            .iter()
            .filter(|s| s.as_str() != "C")
            .count() as f64
            / m;
        let mean_degree = 2.0 * graph.bonds.len() as f64 / m;
        let centered = config.centered()?.coords;
        let rg = (centered.iter().map(|v| v * v).sum::<f64>() / m).sqrt();
        let mut out = BTreeMap::new();
        out.insert("qed", logistic(2.0 * hetero - 0.5));
        out.insert("sas", 1.0 + graph.ring_count() as f64 + 0.5 * mean_degree);
        out.insert("affinity", -rg);
        Ok(out)
    }
}

impl PropertyOracle for SyntheticOracle {
    fn names(&self) -> Vec<String> {
        self.properties.iter().map(|p| p.name.clone()).collect()
    }

    fn predict(&self, config: &MolecularConfig) -> Result<Vec<PropertyEstimate>> {
        let values = self.raw_values(config)?;
        let m = config.num_atoms() as f64;
        Ok(self
            .properties
            .iter()
            .map(|p| PropertyEstimate {
                mean: values[p.name.as_str()],
                var_aleatoric: p.var_aleatoric,
                var_epistemic: p.epistemic_scale / (1.0 + m),
            })
            .collect())
    }
}

/// A property CSV with columns `molecule_id`, and per property `P`
/// optionally the ground truth `P` plus `mean_P` and `sigma_P`.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyTable {
    pub properties: Vec<String>,
    pub ids: Vec<String>,
    pub truth: Vec<Vec<Option<f64>>>,
    pub means: Vec<Vec<f64>>,
    pub sigmas: Vec<Vec<f64>>,
}

impl PropertyTable {
    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h.trim() == name);
        let id_col = col("molecule_id").ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "missing molecule_id column".into(),
        })?;
        let properties: Vec<String> = headers
            .iter()
            .filter_map(|h| h.trim().strip_prefix("mean_").map(str::to_string))
            .collect();
        if properties.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: "no mean_<property> columns".into(),
            });
        }
        let mut layout = Vec::new();
        for p in &properties {
            let sigma = col(&format!("sigma_{p}")).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("mean_{p} has no matching sigma_{p} column"),
            })?;
            layout.push((
                col(p),
                col(&format!("mean_{p}")).expect("found above"),
                sigma,
            ));
        }
        let mut table = Self {
            properties,
            ids: Vec::new(),
            truth: Vec::new(),
            means: Vec::new(),
            sigmas: Vec::new(),
        };
        for (row_index, record) in reader.records().enumerate() {
            let record = record?;
            let line = row_index + 2;
            let num = |c: usize| -> Result<f64> {
                let text = record.get(c).unwrap_or("").trim();
                text.parse().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("column {:?} is not a number: {text:?}", &headers[c]),
                })
            };
            table
                .ids
                .push(record.get(id_col).unwrap_or("").trim().to_string());
            let mut truth = Vec::new();
            let mut means = Vec::new();
            let mut sigmas = Vec::new();
            for &(t, m, s) in &layout {
                truth.push(match t {
                    Some(c) if !record.get(c).unwrap_or("").trim().is_empty() => Some(num(c)?),
                    _ => None,
                });
                means.push(num(m)?);
                sigmas.push(num(s)?);
            }
            table.truth.push(truth);
            table.means.push(means);
            table.sigmas.push(sigmas);
        }
        Ok(table)
    }

    pub fn column(&self, property: usize) -> (Vec<Option<f64>>, Vec<f64>, Vec<f64>) {
        (
            self.truth.iter().map(|r| r[property]).collect(),
            self.means.iter().map(|r| r[property]).collect(),
            self.sigmas.iter().map(|r| r[property]).collect(),
        )
    }
}

/// Oracle backed by precomputed predictions keyed by canonical graph hash
/// (the table's `molecule_id` column holds the hex digest).
#[derive(Debug, Clone)]
pub struct TableOracle {
    vocab: AtomVocabulary,
    properties: Vec<String>,
    rows: BTreeMap<String, Vec<PropertyEstimate>>,
}

impl TableOracle {
    pub fn from_table(vocab: AtomVocabulary, table: &PropertyTable) -> Self {
        let rows = table
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let ests = table.means[i]
                    .iter()
                    .zip(&table.sigmas[i])
                    .map(|(&mean, &s)| PropertyEstimate {
                        mean,
                        var_aleatoric: s * s,
                        var_epistemic: 0.0,
                    })
                    .collect();
                (id.to_ascii_lowercase(), ests)
            })
            .collect();
        Self {
            vocab,
            properties: table.properties.clone(),
            rows,
        }
    }

    pub fn read(vocab: AtomVocabulary, path: &Path) -> Result<Self> {
        Ok(Self::from_table(vocab, &PropertyTable::read(path)?))
    }
}

impl PropertyOracle for TableOracle {
    fn names(&self) -> Vec<String> {
        self.properties.clone()
    }

    fn predict(&self, config: &MolecularConfig) -> Result<Vec<PropertyEstimate>> {
        let key = canonical_hash(&infer_bonds(config, &self.vocab)?).to_hex();
        self.rows
            .get(&key)
            .cloned()
            .ok_or_else(|| Error::Domain(format!("molecule {key} is not in the property table")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn chain(symbols: &[&str]) -> MolecularConfig {
        let coords = ndarray::Array2::from_shape_fn((symbols.len(), 3), |(i, k)| {
            if k == 0 {
                1.5 * i as f64
            } else {
                0.0
            }
        });
        MolecularConfig::new(
            symbols.iter().map(|s| s.to_string()).collect(),
            coords,
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn carbon_chain_values() {
        let oracle = SyntheticOracle::with_defaults(AtomVocabulary::qm9());
        let v = oracle.raw_values(&chain(&["C", "C", "C"])).unwrap();
        assert!((v["qed"] - 0.377540668798145).abs() < 1e-12);
        // tree: no rings; mean degree 4/3
        assert!((v["sas"] - (1.0 + 0.5 * 4.0 / 3.0)).abs() < 1e-12);
        let single =
            MolecularConfig::new(vec!["N".into()], array![[3.0, 4.0, 5.0]], vec![]).unwrap();
        let v = oracle.raw_values(&single).unwrap();
        assert_eq!(v["affinity"], 0.0);
    }

    #[test]
    fn epistemic_shrinks_with_size() {
        let oracle = SyntheticOracle::with_defaults(AtomVocabulary::qm9());
        let small = oracle.predict(&chain(&["C", "O"])).unwrap();
        let big = oracle.predict(&chain(&["C", "O", "C", "C", "N"])).unwrap();
        for (a, b) in small.iter().zip(&big) {
            assert!(a.var_epistemic > b.var_epistemic);
            assert_eq!(a.var_aleatoric, b.var_aleatoric);
        }
        assert!((small[0].var_epistemic - 0.01 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn unknown_property_rejected() {
        let mut props = SyntheticOracle::default_properties();
        props[0].name = "logp".into();
        assert!(SyntheticOracle::new(AtomVocabulary::qm9(), props).is_err());
    }

    #[test]
    fn table_oracle_looks_up_by_hash() {
        let vocab = AtomVocabulary::qm9();
        let mol = chain(&["C", "O"]);
        let key = canonical_hash(&infer_bonds(&mol, &vocab).unwrap()).to_hex();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(
            &path,
            format!("molecule_id,qed,mean_qed,sigma_qed\n{key},0.5,0.45,0.1\n"),
        )
        .unwrap();
        let table = PropertyTable::read(&path).unwrap();
        assert_eq!(table.truth[0], vec![Some(0.5)]);
        let oracle = TableOracle::from_table(vocab, &table);
        let est = oracle.predict(&mol).unwrap();
        assert_eq!(est[0].mean, 0.45);
        assert!((est[0].var_aleatoric - 0.01).abs() < 1e-15);
        assert!(oracle.predict(&chain(&["C", "N"])).is_err());
    }
}
