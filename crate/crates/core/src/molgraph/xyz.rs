//! XYZ records and dataset directories.
//!
//! A record is the usual three-part block:
//!
//! ```text
//! 3
//! props: qed=0.41;sas=2.5
//! C  0.000000 0.000000 0.000000
//! N  1.470000 0.000000 0.000000
//! O  2.100000 1.200000 0.000000
//! ```
//!
//! The comment line is free text; a `props:` section, if present, carries
//! `name=value` pairs separated by `;`. A dataset directory holds one file
//! per molecule plus `manifest.json` with the vocabulary and property names.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::molgraph::{vocab::VocabularySpec, AtomVocabulary, MolecularConfig};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq)]
pub struct XyzRecord {
    pub symbols: Vec<String>,
    pub coords: Array2<f64>,
    pub comment: String,
    pub props: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub id: String,
    pub config: MolecularConfig,
    pub props: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub vocabulary: VocabularySpec,
    #[serde(default)]
    pub properties: Vec<String>,
}

impl DatasetManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text =
            fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path,
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn vocabulary(&self) -> Result<AtomVocabulary> {
        self.vocabulary.clone().try_into()
    }
}

fn parse_props(comment: &str) -> std::result::Result<BTreeMap<String, f64>, String> {
    let mut out = BTreeMap::new();
    let Some(pos) = comment.find("props:") else {
        return Ok(out);
    };
    for pair in comment[pos + "props:".len()..].split(';') {
        let pair = pair.trim();
        if pair.is_empty() {
            continue;
        }
        let (name, value) = pair
            .split_once('=')
            .ok_or_else(|| format!("property entry {pair:?} is not name=value"))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| format!("property {name:?} has non-numeric value {value:?}"))?;
        out.insert(name.trim().to_string(), value);
    }
    Ok(out)
}

/// Parses every record in `text`. `path` is only used for error messages.
pub fn parse_xyz(text: &str, path: &Path) -> Result<Vec<XyzRecord>> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let lines: Vec<&str> = text.lines().collect();
    let mut records = Vec::new();
    let mut at = 0;
    while at < lines.len() {
        if lines[at].trim().is_empty() {
            at += 1;
            continue;
        }
        let count: usize = lines[at].trim().parse().map_err(|_| {
            err(
                at + 1,
                format!("expected atom count, found {:?}", lines[at]),
            )
        })?;
        if count == 0 {
            return Err(err(at + 1, "atom count must be at least 1".into()));
        }
        let comment = lines
            .get(at + 1)
            .ok_or_else(|| err(at + 2, "missing comment line".into()))?
            .to_string();
        let props = parse_props(&comment).map_err(|m| err(at + 2, m))?;
        let mut symbols = Vec::with_capacity(count);
        let mut coords = Array2::zeros((count, 3));
        for a in 0..count {
            let lineno = at + 3 + a;
            let line = lines
                .get(lineno - 1)
                .ok_or_else(|| err(lineno, format!("expected {count} atom lines")))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < 4 {
                return Err(err(
                    lineno,
                    format!("expected `SYMBOL x y z`, found {line:?}"),
                ));
            }
            symbols.push(fields[0].to_string());
            for k in 0..3 {
                let v: f64 = fields[k + 1]
                    .parse()
                    .map_err(|_| err(lineno, format!("bad coordinate {:?}", fields[k + 1])))?;
                if !v.is_finite() {
                    return Err(err(lineno, "non-finite coordinate".into()));
                }
                coords[[a, k]] = v;
            }
        }
        records.push(XyzRecord {
            symbols,
            coords,
            comment,
            props,
        });
        at += 2 + count;
    }
    Ok(records)
}

/// Formats one record with six decimals per coordinate.
pub fn write_xyz(config: &MolecularConfig, props: &[(String, f64)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", config.num_atoms());
    if props.is_empty() {
        out.push('\n');
    } else {
        let body: Vec<String> = props.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(out, "props: {}", body.join(";"));
    }
    for (a, sym) in config.atom_types.iter().enumerate() {
        let _ = writeln!(
            out,
            "{sym} {:.6} {:.6} {:.6}",
            config.coords[[a, 0]],
            config.coords[[a, 1]],
            config.coords[[a, 2]]
        );
    }
    out
}

fn xyz_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "xyz"))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads a single multi-record XYZ file or every `*.xyz` in a directory
/// (sorted by file name). Coordinates are centered; the condition vector is
/// filled from `properties` when the record carries them.
pub fn load_xyz_dataset(
    path: &Path,
    vocab: &AtomVocabulary,
    properties: &[String],
) -> Result<Vec<DatasetEntry>> {
    let files = if path.is_dir() {
        xyz_files(path)?
    } else {
        vec![path.to_path_buf()]
    };
    let mut out = Vec::new();
    for file in files {
        let text =
            fs::read_to_string(&file).map_err(|e| Error::io(file.display().to_string(), e))?;
        let records = parse_xyz(&text, &file)?;
        let multi = records.len() > 1;
        let stem = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        for (k, rec) in records.into_iter().enumerate() {
            for sym in &rec.symbols {
                vocab.index_of(sym).map_err(|_| {
                    Error::Vocabulary(format!("{}: unknown element {sym:?}", file.display()))
                })?;
            }
            let condition = if rec.props.is_empty() {
                Vec::new()
            } else {
                properties
                    .iter()
                    .map(|p| {
                        rec.props.get(p).copied().ok_or_else(|| Error::Parse {
                            path: file.clone(),
                            line: 2,
                            message: format!("missing property {p:?}"),
                        })
                    })
                    .collect::<Result<Vec<f64>>>()?
            };
            let config = MolecularConfig::new(rec.symbols, rec.coords, condition)?.centered()?;
            let id = if multi {
                format!("{stem}#{k}")
            } else {
                stem.clone()
            };
            out.push(DatasetEntry {
                id,
                config,
                props: rec.props,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_props_and_atoms() {
        let text = "2\nprops: qed=0.5;sas=3\nC 0 0 0\nO 1.2 0 0\n";
        let recs = parse_xyz(text, Path::new("t.xyz")).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].symbols, vec!["C", "O"]);
        assert_eq!(recs[0].props["sas"], 3.0);
        assert_eq!(recs[0].coords[[1, 0]], 1.2);
    }

    #[test]
    fn reports_line_numbers() {
        let text = "2\n\nC 0 0 0\nO 1.2 zero 0\n";
        match parse_xyz(text, Path::new("bad.xyz")) {
            Err(Error::Parse { line, path, .. }) => {
                assert_eq!(line, 4);
                assert_eq!(path, Path::new("bad.xyz"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_xyz("3\n\nC 0 0 0\n", Path::new("short.xyz")).is_err());
    }

    #[test]
    fn empty_text_is_empty_dataset() {
        assert!(parse_xyz("", Path::new("e.xyz")).unwrap().is_empty());
    }

    #[test]
    fn writer_round_trips() {
        let cfg = MolecularConfig::new(
            vec!["C".into(), "N".into()],
            ndarray::array![[-0.5, 0.0, 0.0], [0.5, 0.0, 0.0]],
            vec![],
        )
        .unwrap();
        let text = write_xyz(&cfg, &[("qed".into(), 0.25)]);
        let rec = &parse_xyz(&text, Path::new("w.xyz")).unwrap()[0];
        assert_eq!(rec.symbols, cfg.atom_types);
        assert_eq!(rec.coords, cfg.coords);
        assert_eq!(rec.props["qed"], 0.25);
    }

    #[test]
    fn unknown_element_names_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("m1.xyz"), "1\n\nXe 0 0 0\n").unwrap();
        let err = load_xyz_dataset(dir.path(), &AtomVocabulary::qm9(), &[]).unwrap_err();
        assert!(matches!(err, Error::Vocabulary(_)));
        assert!(err.to_string().contains("m1.xyz"));
    }
}
