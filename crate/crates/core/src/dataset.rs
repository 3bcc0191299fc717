//! Line-delimited JSON molecule files.
//!
//! The first line is a schema header, `{"schema": {"atom_vocab": [...],
//! "bond_vocab": [...]}}`. Every following non-blank line is one molecule:
//!
//! ```text
//! {"id": "m0", "atom_features": [[5, 0], ...], "bonds": [[0, 1], ...],
//!  "bond_features": [[0], ...], "coords": [[0.0, 0.0, 0.0], ...], "target": 5.2}
//! ```

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::graph::{GraphError, MolecularGraph, Schema};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("dataset I/O: {0}")]
    Io(#[from] io::Error),
    #[error("dataset is missing its schema header line")]
    MissingHeader,
    #[error("line {line}: bad schema header: {msg}")]
    Header { line: usize, msg: String },
    #[error("line {line}: malformed record: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}{}: {source}", .source.column().map(|c| format!(", column {c}")).unwrap_or_default())]
    Invalid {
        line: usize,
        #[source]
        source: GraphError,
    },
}

impl DatasetError {
    pub fn line(&self) -> Option<usize> {
        match self {
            DatasetError::Header { line, .. }
            | DatasetError::Malformed { line, .. }
            | DatasetError::Invalid { line, .. } => Some(*line),
            _ => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: Schema,
}

/// Streaming reader yielding validated molecules.
pub struct DatasetReader<R> {
    lines: io::Lines<R>,
    line_no: usize,
    schema: Schema,
}

impl<R: BufRead> DatasetReader<R> {
    pub fn new(reader: R) -> Result<Self, DatasetError> {
        let mut lines = reader.lines();
        let first = lines.next().ok_or(DatasetError::MissingHeader)??;
        let header: Header = serde_json::from_str(&first).map_err(|e| DatasetError::Header {
            line: 1,
            msg: e.to_string(),
        })?;
        Ok(Self {
            lines,
            line_no: 1,
            schema: header.schema,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }
}

impl<R: BufRead> Iterator for DatasetReader<R> {
    type Item = Result<MolecularGraph, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let line_no = self.line_no;
            let parsed = serde_json::from_str::<MolecularGraph>(&line)
                .map_err(|e| DatasetError::Malformed {
                    line: line_no,
                    msg: e.to_string(),
                })
                .and_then(|g| {
                    g.validate(&self.schema)
                        .map(|()| g)
                        .map_err(|source| DatasetError::Invalid {
                            line: line_no,
                            source,
                        })
                });
            return Some(parsed);
        }
    }
}

pub fn open_dataset(path: &Path) -> Result<DatasetReader<BufReader<File>>, DatasetError> {
    DatasetReader::new(BufReader::new(File::open(path)?))
}

/// Reads and validates every molecule in `path`.
pub fn load_dataset(path: &Path) -> Result<(Schema, Vec<MolecularGraph>), DatasetError> {
    let reader = open_dataset(path)?;
    let schema = reader.schema().clone();
    let graphs = reader.collect::<Result<Vec<_>, _>>()?;
    Ok((schema, graphs))
}

pub fn write_dataset(
    w: &mut impl Write,
    schema: &Schema,
    graphs: &[MolecularGraph],
) -> Result<(), DatasetError> {
    let header = Header {
        schema: schema.clone(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("serializable"))?;
    for g in graphs {
        writeln!(w, "{}", serde_json::to_string(g).expect("serializable"))?;
    }
    Ok(())
}
