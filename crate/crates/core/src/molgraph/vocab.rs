use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Covalent radius (Å) and maximum valence for the elements we know about.
const ELEMENT_TABLE: &[(&str, f64, u32)] = &[
    ("C", 0.76, 4),
    ("N", 0.71, 3),
    ("O", 0.66, 2),
    ("F", 0.57, 1),
    ("P", 1.07, 5),
    ("S", 1.05, 6),
    ("Cl", 1.02, 1),
    ("Br", 1.20, 1),
    ("I", 1.39, 1),
];

fn builtin(symbol: &str) -> Option<(f64, u32)> {
    ELEMENT_TABLE
        .iter()
        .find(|(s, _, _)| *s == symbol)
        .map(|&(_, r, v)| (r, v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabularySpec", into = "VocabularySpec")]
pub struct AtomVocabulary {
    symbols: Vec<String>,
    encoder: HashMap<String, usize>,
    max_valence: Vec<u32>,
    covalent_radius: Vec<f64>,
}

/// On-disk form: symbol list plus optional per-element overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabularySpec {
    pub symbols: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub covalent_radius: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub max_valence: BTreeMap<String, u32>,
}

impl TryFrom<VocabularySpec> for AtomVocabulary {
    type Error = Error;

    fn try_from(spec: VocabularySpec) -> Result<Self> {
        let mut radii = Vec::with_capacity(spec.symbols.len());
        let mut valences = Vec::with_capacity(spec.symbols.len());
        for sym in &spec.symbols {
            let table = builtin(sym);
            let radius = spec
                .covalent_radius
                .get(sym)
                .copied()
                .or(table.map(|t| t.0))
                .ok_or_else(|| Error::Vocabulary(format!("no covalent radius for {sym}")))?;
            let valence = spec
                .max_valence
                .get(sym)
                .copied()
                .or(table.map(|t| t.1))
                .ok_or_else(|| Error::Vocabulary(format!("no max valence for {sym}")))?;
            radii.push(radius);
            valences.push(valence);
        }
        AtomVocabulary::from_parts(spec.symbols, radii, valences)
    }
}

impl From<AtomVocabulary> for VocabularySpec {
    fn from(v: AtomVocabulary) -> Self {
        let mut covalent_radius = BTreeMap::new();
        let mut max_valence = BTreeMap::new();
        for (i, sym) in v.symbols.iter().enumerate() {
            if builtin(sym).map(|t| t.0) != Some(v.covalent_radius[i]) {
                covalent_radius.insert(sym.clone(), v.covalent_radius[i]);
            }
            if builtin(sym).map(|t| t.1) != Some(v.max_valence[i]) {
                max_valence.insert(sym.clone(), v.max_valence[i]);
            }
        }
        VocabularySpec {
            symbols: v.symbols,
            covalent_radius,
            max_valence,
        }
    }
}

impl AtomVocabulary {
    /// Builds a vocabulary from element symbols using the built-in radius/valence table.
    pub fn new<S: AsRef<str>>(symbols: &[S]) -> Result<Self> {
        VocabularySpec {
            symbols: symbols.iter().map(|s| s.as_ref().to_string()).collect(),
            covalent_radius: BTreeMap::new(),
            max_valence: BTreeMap::new(),
        }
        .try_into()
    }

    pub fn from_parts(symbols: Vec<String>, radii: Vec<f64>, valences: Vec<u32>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::Vocabulary("empty vocabulary".into()));
        }
        if radii.len() != symbols.len() || valences.len() != symbols.len() {
            return Err(Error::Vocabulary("table lengths disagree".into()));
        }
        let mut encoder = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if encoder.insert(s.clone(), i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate symbol {s}")));
            }
        }
        if let Some((s, r)) = symbols.iter().zip(&radii).find(|(_, r)| !(**r > 0.0)) {
            return Err(Error::Vocabulary(format!(
                "radius for {s} must be positive, got {r}"
            )));
        }
        if let Some((s, _)) = symbols.iter().zip(&valences).find(|(_, v)| **v < 1) {
            return Err(Error::Vocabulary(format!(
                "max valence for {s} must be at least 1"
            )));
        }
        Ok(Self {
            symbols,
            encoder,
            max_valence: valences,
            covalent_radius: radii,
        })
    }

    /// The heavy-atom vocabulary of QM9 after hydrogen removal.
    pub fn qm9() -> Self {
        Self::new(&["C", "N", "O", "F"]).expect("built-in elements")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, index: usize) -> &str {
        &self.symbols[index]
    }

    pub fn index_of(&self, symbol: &str) -> Result<usize> {
        self.encoder
            .get(symbol)
            .copied()
            .ok_or_else(|| Error::Vocabulary(format!("unknown element {symbol:?}")))
    }

    pub fn max_valence(&self, index: usize) -> Result<u32> {
        self.max_valence
            .get(index)
            .copied()
            .ok_or_else(|| Error::Vocabulary(format!("element index {index} out of range")))
    }

    pub fn covalent_radius(&self, index: usize) -> Result<f64> {
        self.covalent_radius
            .get(index)
            .copied()
            .ok_or_else(|| Error::Vocabulary(format!("element index {index} out of range")))
    }
}
