use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::molgraph::AtomVocabulary;

/// A molecule as generated and scored: element symbols, coordinates in
/// Ångström and the property condition it was generated for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MolecularConfig {
    pub atom_types: Vec<String>,
    pub coords: Array2<f64>,
    pub condition: Vec<f64>,
}

impl MolecularConfig {
    pub fn new(atom_types: Vec<String>, coords: Array2<f64>, condition: Vec<f64>) -> Result<Self> {
        if atom_types.is_empty() {
            return Err(Error::InvalidGeometry("molecule has no atoms".into()));
        }
        if coords.nrows() != atom_types.len() || coords.ncols() != 3 {
            return Err(Error::InvalidGeometry(format!(
                "coordinate matrix is {}x{} for {} atoms",
                coords.nrows(),
                coords.ncols(),
                atom_types.len()
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGeometry("non-finite coordinate".into()));
        }
        Ok(Self {
            atom_types,
            coords,
            condition,
        })
    }

    pub fn num_atoms(&self) -> usize {
        self.atom_types.len()
    }

    /// Checks every atom type against the vocabulary.
    pub fn validate(&self, vocab: &AtomVocabulary) -> Result<()> {
        for sym in &self.atom_types {
            vocab.index_of(sym)?;
        }
        Ok(())
    }

    /// Returns a copy with coordinates moved to the zero center-of-gravity subspace.
    pub fn centered(&self) -> Result<Self> {
        Ok(Self {
            atom_types: self.atom_types.clone(),
            coords: project_to_zero_cog(&self.coords)?,
            condition: self.condition.clone(),
        })
    }

    pub fn element_indices(&self, vocab: &AtomVocabulary) -> Result<Vec<usize>> {
        self.atom_types.iter().map(|s| vocab.index_of(s)).collect()
    }
}

/// Subtracts the per-axis mean so every column sums to zero.
pub fn project_to_zero_cog(coords: &Array2<f64>) -> Result<Array2<f64>> {
    if coords.nrows() == 0 {
        return Err(Error::InvalidGeometry("empty coordinate matrix".into()));
    }
    if coords.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidGeometry("non-finite coordinate".into()));
    }
    Ok(remove_mean(coords))
}

/// Infallible projection for internal hot paths that already guarantee finiteness.
pub(crate) fn remove_mean(coords: &Array2<f64>) -> Array2<f64> {
    let mean = coords.mean_axis(Axis(0)).expect("non-empty matrix");
    coords - &mean.insert_axis(Axis(0))
}
