//! Interaction datasets: file loaders, seeded splits, and the synthetic
//! generator.

pub mod synth;

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::chem::{parse_smiles_with_id, read_molecule_table, MoleculeGraph, TableError};
use crate::interaction::Link;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Cci,
    Ddi,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Cci => "cci",
            Task::Ddi => "ddi",
        })
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cci" => Ok(Task::Cci),
            "ddi" => Ok(Task::Ddi),
            other => Err(format!("unknown task `{other}` (expected cci or ddi)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}:{line}: {reason}", file.display())]
    Malformed {
        file: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{}: {source}", file.display())]
    Io {
        file: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("split: {0}")]
    Split(String),
}

/// What a loader kept and dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub rows: usize,
    pub malformed_rows: usize,
    pub below_threshold: usize,
    pub self_edges: usize,
    pub duplicate_edges: usize,
    /// Edges dropped because an endpoint has no molecule table entry.
    pub missing_molecules: usize,
    /// Distinct molecules whose SMILES the parser rejected.
    pub unparseable_molecules: usize,
    /// Edges dropped because an endpoint failed to parse.
    pub edges_with_unparseable: usize,
    pub molecules: usize,
    pub edges: usize,
}

impl LoadReport {
    pub fn skipped(&self) -> usize {
        self.malformed_rows
            + self.missing_molecules
            + self.unparseable_molecules
            + self.edges_with_unparseable
    }
}

/// Molecules plus observed interactions. CCI links are untyped; DDI
/// links carry a dense relation id.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub task: Task,
    pub molecules: Vec<MoleculeGraph>,
    pub smiles: Vec<String>,
    pub links: Vec<Link>,
    /// Original relation names, indexed by dense id (DDI only).
    pub relations: Vec<String>,
    pub threshold: Option<u32>,
    pub report: LoadReport,
}

impl Dataset {
    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.molecules.iter().position(|m| m.id() == id)
    }

    /// Every link as `(i, j, rel)`.
    pub fn known(&self) -> Vec<(usize, usize, Option<usize>)> {
        self.links.iter().map(|l| (l.i, l.j, l.rel)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strictness {
    /// Any malformed row or unparseable SMILES is a located error.
    #[default]
    Strict,
    /// Bad rows and molecules are skipped and counted.
    Lenient,
}

fn open(path: &Path) -> Result<BufReader<File>, DataError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| DataError::Io {
            file: path.to_path_buf(),
            source,
        })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        file: path.to_path_buf(),
        source,
    }
}

struct RawEdge {
    line: usize,
    a: String,
    b: String,
    rel: Option<String>,
}

/// Reads the molecule table and parses the molecules named by `edges`,
/// then resolves edges to indices in first-appearance order.
fn assemble(
    task: Task,
    molecules_path: &Path,
    edges_path: &Path,
    raw: Vec<RawEdge>,
    mode: Strictness,
    mut report: LoadReport,
    threshold: Option<u32>,
) -> Result<Dataset, DataError> {
    let rows = read_molecule_table(open(molecules_path)?).map_err(|e| match e {
        TableError::Malformed { line, reason } => DataError::Malformed {
            file: molecules_path.to_path_buf(),
            line,
            reason,
        },
        TableError::Io(source) => DataError::Io {
            file: molecules_path.to_path_buf(),
            source,
        },
    })?;
    let mut table: HashMap<&str, (usize, &str)> = HashMap::new();
    for r in &rows {
        if table
            .insert(r.id.as_str(), (r.line, r.smiles.as_str()))
            .is_some()
        {
            return Err(DataError::Malformed {
                file: molecules_path.to_path_buf(),
                line: r.line,
                reason: format!("duplicate molecule id `{}`", r.id),
            });
        }
    }

    enum Parsed {
        Ok(MoleculeGraph, String),
        Bad,
    }
    let mut parsed: HashMap<String, Parsed> = HashMap::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut molecules = Vec::new();
    let mut smiles = Vec::new();
    let mut relations: Vec<String> = Vec::new();
    let mut rel_index: HashMap<String, usize> = HashMap::new();
    let mut seen = std::collections::HashSet::new();
    let mut links = Vec::new();

    'edges: for e in raw {
        for id in [&e.a, &e.b] {
            if parsed.contains_key(id.as_str()) {
                continue;
            }
            let Some(&(line, s)) = table.get(id.as_str()) else {
                if mode == Strictness::Strict {
                    return Err(DataError::Malformed {
                        file: edges_path.to_path_buf(),
                        line: e.line,
                        reason: format!("molecule `{id}` is not in the molecule table"),
                    });
                }
                report.missing_molecules += 1;
                continue 'edges;
            };
            let p = match parse_smiles_with_id(id, s) {
                Ok(g) => Parsed::Ok(g, s.to_string()),
                Err(err) => {
                    if mode == Strictness::Strict {
                        return Err(DataError::Malformed {
                            file: molecules_path.to_path_buf(),
                            line,
                            reason: format!("molecule `{id}`: {err}"),
                        });
                    }
                    log::warn!("skipping molecule `{id}`: {err}");
                    report.unparseable_molecules += 1;
                    Parsed::Bad
                }
            };
            parsed.insert(id.clone(), p);
        }
        if [&e.a, &e.b]
            .iter()
            .any(|id| matches!(parsed[id.as_str()], Parsed::Bad))
        {
            report.edges_with_unparseable += 1;
            continue;
        }
        let mut ends = [0usize; 2];
        for (slot, id) in [&e.a, &e.b].into_iter().enumerate() {
            ends[slot] = match index.get(id.as_str()) {
                Some(&k) => k,
                None => {
                    let Parsed::Ok(g, s) = &parsed[id.as_str()] else {
                        unreachable!()
                    };
                    molecules.push(g.clone());
                    smiles.push(s.clone());
                    index.insert(id.clone(), molecules.len() - 1);
                    molecules.len() - 1
                }
            };
        }
        let rel = e.rel.map(|name| {
            *rel_index.entry(name.clone()).or_insert_with(|| {
                relations.push(name);
                relations.len() - 1
            })
        });
        let link = Link {
            i: ends[0],
            j: ends[1],
            rel,
        };
        if seen.insert(link.key()) {
            links.push(link);
        } else {
            report.duplicate_edges += 1;
        }
    }

    report.molecules = molecules.len();
    report.edges = links.len();
    Ok(Dataset {
        task,
        molecules,
        smiles,
        links,
        relations,
        threshold,
        report,
    })
}

/// Loads a scored chemical-link file (tab-separated, header row, last
/// column an integer score in 0..=999) and keeps links scoring at least
/// `threshold`. Molecules are those referenced by kept links.
pub fn load_cci(
    links: &Path,
    molecules: &Path,
    threshold: u32,
    mode: Strictness,
) -> Result<Dataset, DataError> {
    let mut report = LoadReport::default();
    let mut raw = Vec::new();
    for (k, line) in open(links)?.lines().enumerate() {
        let line = line.map_err(io_err(links))?;
        let lineno = k + 1;
        let line = line.trim_end_matches('\r');
        if k == 0 || line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        report.rows += 1;
        let cols: Vec<&str> = line.split('\t').collect();
        let parsed = if cols.len() < 3 {
            Err(format!("expected at least 3 columns, found {}", cols.len()))
        } else if cols[0].is_empty() || cols[1].is_empty() {
            Err("empty chemical id".to_string())
        } else {
            let last = cols[cols.len() - 1];
            match last.trim().parse::<u32>() {
                Ok(s) if s <= 999 => Ok(s),
                _ => Err(format!("score `{last}` is not an integer in 0..=999")),
            }
        };
        let score = match parsed {
            Ok(s) => s,
            Err(reason) if mode == Strictness::Strict => {
                return Err(DataError::Malformed {
                    file: links.to_path_buf(),
                    line: lineno,
                    reason,
                })
            }
            Err(_) => {
                report.malformed_rows += 1;
                continue;
            }
        };
        if score < threshold {
            report.below_threshold += 1;
            continue;
        }
        if cols[0] == cols[1] {
            report.self_edges += 1;
            continue;
        }
        raw.push(RawEdge {
            line: lineno,
            a: cols[0].to_string(),
            b: cols[1].to_string(),
            rel: None,
        });
    }
    assemble(
        Task::Cci,
        molecules,
        links,
        raw,
        mode,
        report,
        Some(threshold),
    )
}

/// Loads `drug1<TAB>drug2<TAB>side_effect_id` triples. Relation ids are
/// assigned densely in order of first appearance.
pub fn load_ddi(triples: &Path, molecules: &Path, mode: Strictness) -> Result<Dataset, DataError> {
    let mut report = LoadReport::default();
    let mut raw = Vec::new();
    for (k, line) in open(triples)?.lines().enumerate() {
        let line = line.map_err(io_err(triples))?;
        let lineno = k + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty()
            || line.starts_with('#')
            || (k == 0 && line.starts_with("drug1\t"))
        {
            continue;
        }
        report.rows += 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 || cols.iter().any(|c| c.is_empty()) {
            if mode == Strictness::Strict {
                return Err(DataError::Malformed {
                    file: triples.to_path_buf(),
                    line: lineno,
                    reason: format!(
                        "expected 3 non-empty tab-separated columns, found {}",
                        cols.len()
                    ),
                });
            }
            report.malformed_rows += 1;
            continue;
        }
        if cols[0] == cols[1] {
            report.self_edges += 1;
            continue;
        }
        raw.push(RawEdge {
            line: lineno,
            a: cols[0].to_string(),
            b: cols[1].to_string(),
            rel: Some(cols[2].to_string()),
        });
    }
    assemble(Task::Ddi, molecules, triples, raw, mode, report, None)
}

/// Writes `dense_id<TAB>relation_name` lines.
pub fn write_relation_map(path: &Path, relations: &[String]) -> Result<(), DataError> {
    let mut f = File::create(path).map_err(io_err(path))?;
    for (k, name) in relations.iter().enumerate() {
        writeln!(f, "{k}\t{name}").map_err(io_err(path))?;
    }
    Ok(())
}

/// Writes the dataset in the same formats the loaders read:
/// `molecules.tsv` plus `links.tsv` (CCI) or `triples.tsv` (DDI).
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mol_path = dir.join("molecules.tsv");
    let mut f = File::create(&mol_path).map_err(io_err(&mol_path))?;
    for (m, s) in ds.molecules.iter().zip(&ds.smiles) {
        writeln!(f, "{}\t{s}", m.id()).map_err(io_err(&mol_path))?;
    }
    match ds.task {
        Task::Cci => {
            let path = dir.join("links.tsv");
            let mut f = File::create(&path).map_err(io_err(&path))?;
            writeln!(f, "chemical1\tchemical2\tcombined_score").map_err(io_err(&path))?;
            for l in &ds.links {
                writeln!(
                    f,
                    "{}\t{}\t999",
                    ds.molecules[l.i].id(),
                    ds.molecules[l.j].id()
                )
                .map_err(io_err(&path))?;
            }
        }
        Task::Ddi => {
            let path = dir.join("triples.tsv");
            let mut f = File::create(&path).map_err(io_err(&path))?;
            for l in &ds.links {
                let r = l.rel.expect("typed link");
                writeln!(
                    f,
                    "{}\t{}\t{}",
                    ds.molecules[l.i].id(),
                    ds.molecules[l.j].id(),
                    ds.relations[r]
                )
                .map_err(io_err(&path))?;
            }
            write_relation_map(&dir.join("relations.tsv"), &ds.relations)?;
        }
    }
    Ok(())
}

/// Index lists into a dataset's links.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Parses `8:1:1` style ratios, normalised to sum to one.
pub fn parse_ratios(s: &str) -> Result<Vec<f64>, String> {
    let parts = s
        .split(':')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| format!("bad ratio `{p}`"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if !(2..=3).contains(&parts.len()) || parts.iter().any(|p| !p.is_finite() || *p <= 0.0) {
        return Err(format!("ratios `{s}` must be 2 or 3 positive numbers"));
    }
    let total: f64 = parts.iter().sum();
    Ok(parts.into_iter().map(|p| p / total).collect())
}

/// Seeded shuffle of `0..n`, then contiguous parts with boundaries at
/// `round(cumulative ratio · n)`. Two ratios give train/test, three give
/// train/valid/test.
pub fn split(n: usize, ratios: &[f64], seed: u64) -> Result<Split, DataError> {
    if !(2..=3).contains(&ratios.len()) || ratios.iter().any(|r| r.is_nan() || *r <= 0.0) {
        return Err(DataError::Split("need 2 or 3 positive ratios".into()));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DataError::Split(format!("ratios sum to {total}, not 1")));
    }
    if n < ratios.len() {
        return Err(DataError::Split(format!(
            "{n} edges cannot fill {} parts",
            ratios.len()
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut bounds = vec![0];
    let mut acc = 0.0;
    for r in &ratios[..ratios.len() - 1] {
        acc += r;
        bounds.push(((acc * n as f64).round() as usize).min(n));
    }
    bounds.push(n);
    let parts: Vec<Vec<usize>> = bounds
        .windows(2)
        .map(|w| order[w[0]..w[1]].to_vec())
        .collect();
    Ok(match parts.len() {
        2 => Split {
            train: parts[0].clone(),
            valid: Vec::new(),
            test: parts[1].clone(),
            seed,
        },
        _ => Split {
            train: parts[0].clone(),
            valid: parts[1].clone(),
            test: parts[2].clone(),
            seed,
        },
    })
}
