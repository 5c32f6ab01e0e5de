use std::io::BufRead;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MoleculeRow {
    pub line: usize,
    pub id: String,
    pub smiles: String,
}

/// Reads an `id<TAB>smiles` table. Blank and `#` lines are skipped.
pub fn read_molecule_table<R: BufRead>(reader: R) -> Result<Vec<MoleculeRow>, TableError> {
    let mut rows = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = k + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut cols = trimmed.split('\t');
        let (Some(id), Some(smiles), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(TableError::Malformed {
                line: lineno,
                reason: "expected exactly two tab-separated columns".into(),
            });
        };
        if id.is_empty() || smiles.is_empty() {
            return Err(TableError::Malformed {
                line: lineno,
                reason: "empty id or SMILES".into(),
            });
        }
        rows.push(MoleculeRow {
            line: lineno,
            id: id.to_string(),
            smiles: smiles.to_string(),
        });
    }
    Ok(rows)
}
