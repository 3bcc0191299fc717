//! Molecular graph data model, validation, and geometric/topological
//! preprocessing shared by both regressors.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

/// Declared vocabulary size of every categorical atom and bond column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub atom_vocab: Vec<usize>,
    pub bond_vocab: Vec<usize>,
}

impl Schema {
    /// The official node (9) and edge (3) feature vocabularies of the OGB
    /// molecule featurizer.
    pub fn ogb() -> Self {
        Self {
            atom_vocab: vec![119, 4, 12, 12, 10, 6, 6, 2, 2],
            bond_vocab: vec![5, 6, 2],
        }
    }

    pub fn n_atom_fields(&self) -> usize {
        self.atom_vocab.len()
    }

    pub fn n_bond_fields(&self) -> usize {
        self.bond_vocab.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MolecularGraph {
    pub id: String,
    pub atom_features: Vec<Vec<u32>>,
    /// Undirected bonds, one entry per bond.
    pub bonds: Vec<(usize, usize)>,
    /// One row per bond, aligned with `bonds`.
    pub bond_features: Vec<Vec<u32>>,
    /// Ångström.
    pub coords: Vec<[f64; 3]>,
    /// HOMO-LUMO gap in eV; absent for inference-only records.
    pub target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("molecule has no atoms")]
    NoAtoms,
    #[error("coords: {coords} rows for {atoms} atoms")]
    CoordCount { atoms: usize, coords: usize },
    #[error("atom_features[{atom}]: {got} fields, schema declares {expected}")]
    AtomFieldCount {
        atom: usize,
        expected: usize,
        got: usize,
    },
    #[error("bond_features: {rows} rows for {bonds} bonds")]
    BondFeatureRows { bonds: usize, rows: usize },
    #[error("bond_features[{bond}]: {got} fields, schema declares {expected}")]
    BondFieldCount {
        bond: usize,
        expected: usize,
        got: usize,
    },
    #[error("bonds[{bond}]: endpoint {endpoint} out of range for {n_atoms} atoms")]
    EndpointOutOfRange {
        bond: usize,
        endpoint: usize,
        n_atoms: usize,
    },
    #[error("bonds[{bond}]: self-loop on atom {atom}")]
    SelfLoop { bond: usize, atom: usize },
    #[error("bonds[{bond}]: duplicate of undirected bond bonds[{first}]")]
    DuplicateBond { bond: usize, first: usize },
    #[error("coords[{atom}][{axis}]: non-finite coordinate")]
    NonFiniteCoord { atom: usize, axis: usize },
    #[error("atom_features[{atom}][{column}]: index {value} outside vocabulary of {vocab}")]
    AtomVocab {
        atom: usize,
        column: usize,
        value: u32,
        vocab: usize,
    },
    #[error("bond_features[{bond}][{column}]: index {value} outside vocabulary of {vocab}")]
    BondVocab {
        bond: usize,
        column: usize,
        value: u32,
        vocab: usize,
    },
}

impl GraphError {
    /// Categorical column named by the error, if any.
    pub fn column(&self) -> Option<usize> {
        match self {
            GraphError::AtomVocab { column, .. } | GraphError::BondVocab { column, .. } => {
                Some(*column)
            }
            _ => None,
        }
    }
}

impl MolecularGraph {
    pub fn n_atoms(&self) -> usize {
        self.atom_features.len()
    }

    pub fn validate(&self, schema: &Schema) -> Result<(), GraphError> {
        let n = self.n_atoms();
        if n == 0 {
            return Err(GraphError::NoAtoms);
        }
        if self.coords.len() != n {
            return Err(GraphError::CoordCount {
                atoms: n,
                coords: self.coords.len(),
            });
        }
        for (atom, row) in self.atom_features.iter().enumerate() {
            if row.len() != schema.n_atom_fields() {
                return Err(GraphError::AtomFieldCount {
                    atom,
                    expected: schema.n_atom_fields(),
                    got: row.len(),
                });
            }
            for (column, (&value, &vocab)) in row.iter().zip(&schema.atom_vocab).enumerate() {
                if value as usize >= vocab {
                    return Err(GraphError::AtomVocab {
                        atom,
                        column,
                        value,
                        vocab,
                    });
                }
            }
        }
        if self.bond_features.len() != self.bonds.len() {
            return Err(GraphError::BondFeatureRows {
                bonds: self.bonds.len(),
                rows: self.bond_features.len(),
            });
        }
        let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
        for (bond, &(u, v)) in self.bonds.iter().enumerate() {
            for endpoint in [u, v] {
                if endpoint >= n {
                    return Err(GraphError::EndpointOutOfRange {
                        bond,
                        endpoint,
                        n_atoms: n,
                    });
                }
            }
            if u == v {
                return Err(GraphError::SelfLoop { bond, atom: u });
            }
            if let Some(&first) = seen.get(&(u.min(v), u.max(v))) {
                return Err(GraphError::DuplicateBond { bond, first });
            }
            seen.insert((u.min(v), u.max(v)), bond);
        }
        for (bond, row) in self.bond_features.iter().enumerate() {
            if row.len() != schema.n_bond_fields() {
                return Err(GraphError::BondFieldCount {
                    bond,
                    expected: schema.n_bond_fields(),
                    got: row.len(),
                });
            }
            for (column, (&value, &vocab)) in row.iter().zip(&schema.bond_vocab).enumerate() {
                if value as usize >= vocab {
                    return Err(GraphError::BondVocab {
                        bond,
                        column,
                        value,
                        vocab,
                    });
                }
            }
        }
        for (atom, c) in self.coords.iter().enumerate() {
            if let Some(axis) = c.iter().position(|x| !x.is_finite()) {
                return Err(GraphError::NonFiniteCoord { atom, axis });
            }
        }
        Ok(())
    }

    /// Relabels atoms so that old atom `i` becomes atom `perm[i]`.
    ///
    /// Bond order and bond endpoint order are preserved.
    pub fn permuted(&self, perm: &[usize]) -> MolecularGraph {
        let n = self.n_atoms();
        assert_eq!(perm.len(), n, "permutation length");
        let mut atom_features = vec![Vec::new(); n];
        let mut coords = vec![[0.0; 3]; n];
        for (old, &new) in perm.iter().enumerate() {
            atom_features[new] = self.atom_features[old].clone();
            coords[new] = self.coords[old];
        }
        MolecularGraph {
            id: self.id.clone(),
            atom_features,
            bonds: self.bonds.iter().map(|&(u, v)| (perm[u], perm[v])).collect(),
            bond_features: self.bond_features.clone(),
            coords,
            target: self.target,
        }
    }
}

/// Returns `g` unchanged when every invariant holds.
pub fn validate_graph(g: MolecularGraph, schema: &Schema) -> Result<MolecularGraph, GraphError> {
    g.validate(schema)?;
    Ok(g)
}

/// Symmetric n × n matrix of pairwise Euclidean distances in Ångström.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.d
    }
}

pub fn pairwise_euclidean(coords: &[[f64; 3]]) -> Result<DistanceMatrix, GraphError> {
    for (atom, c) in coords.iter().enumerate() {
        if let Some(axis) = c.iter().position(|x| !x.is_finite()) {
            return Err(GraphError::NonFiniteCoord { atom, axis });
        }
    }
    let n = coords.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = (0..3).map(|k| (coords[i][k] - coords[j][k]).powi(2)).sum();
            let dist = s.sqrt();
            d[i * n + j] = dist;
            d[j * n + i] = dist;
        }
    }
    Ok(DistanceMatrix { n, d })
}

/// All-pairs hop counts over the bond graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopMatrix {
    n: usize,
    h: Vec<u32>,
}

impl HopMatrix {
    pub const UNREACHABLE: u32 = u32::MAX;

    pub fn n(&self) -> usize {
        self.n
    }

    /// Raw entry; [`HopMatrix::UNREACHABLE`] for disconnected pairs.
    pub fn raw(&self, i: usize, j: usize) -> u32 {
        self.h[i * self.n + j]
    }

    pub fn hops(&self, i: usize, j: usize) -> Option<u32> {
        let h = self.raw(i, j);
        (h != Self::UNREACHABLE).then_some(h)
    }

    /// Embedding bucket: hop counts clamp at `max_hop`, and disconnected pairs
    /// map to the reserved bucket `max_hop + 1`.
    pub fn bucket(&self, i: usize, j: usize, max_hop: u32) -> usize {
        match self.hops(i, j) {
            Some(h) => h.min(max_hop) as usize,
            None => max_hop as usize + 1,
        }
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.h
    }

    pub(crate) fn from_raw(n: usize, h: Vec<u32>) -> Self {
        debug_assert_eq!(h.len(), n * n);
        Self { n, h }
    }
}

/// Unweighted shortest-path lengths by breadth-first search from every atom.
pub fn shortest_path_lengths(g: &MolecularGraph) -> HopMatrix {
    let n = g.n_atoms();
    let mut adj = vec![Vec::new(); n];
    for &(u, v) in &g.bonds {
        adj[u].push(v);
        adj[v].push(u);
    }
    let mut h = vec![HopMatrix::UNREACHABLE; n * n];
    let mut queue = VecDeque::new();
    for src in 0..n {
        let row = &mut h[src * n..(src + 1) * n];
        row[src] = 0;
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            let next = row[u] + 1;
            for &v in &adj[u] {
                if row[v] == HopMatrix::UNREACHABLE {
                    row[v] = next;
                    queue.push_back(v);
                }
            }
        }
    }
    HopMatrix { n, h }
}
