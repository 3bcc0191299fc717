//! Binary cache of featurized molecules.
//!
//! ```text
//! magic "MOLGAPFC", u32 version
//! u8 spatial mode (0 = euclidean-rbf, 1 = hop)
//! u64 n_kernels, f64 center_min, f64 center_max, f64 gamma
//! u64 atom field count + u64 vocab each, u64 bond field count + u64 vocab each
//! u64 record count, then per record:
//!   str id
//!   u64 n_atoms, n_atoms × n_atom_fields × u32 node features
//!   u64 n_arcs, per arc: u64 src, u64 dst, n_bond_fields × u32, f64 bond length
//!   u64 pair_rbf length + f64 values
//!   n_atoms² × u32 hop counts
//!   n_atoms × u64 in-degree
//!   u8 has_target + f64 target
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8. Everything is
//! little-endian, so files are byte-identical across platforms and runs.

use std::io::{self, Read, Write};

use crate::binio::*;
use crate::featurize::{FeaturizedGraph, RbfConfig, SpatialMode};
use crate::graph::{HopMatrix, Schema};

pub const CACHE_MAGIC: &[u8; 8] = b"MOLGAPFC";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("cache I/O: {0}")]
    Io(#[from] io::Error),
    #[error("not a featurized cache: bad magic")]
    Magic,
    #[error("unsupported cache version {0}")]
    Version(u32),
    #[error("corrupt cache: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheHeader {
    pub spatial_mode: SpatialMode,
    pub rbf: RbfConfig,
    pub schema: Schema,
}

fn put_vocab(w: &mut impl Write, v: &[usize]) -> io::Result<()> {
    put_u64(w, v.len() as u64)?;
    v.iter().try_for_each(|&x| put_u64(w, x as u64))
}

fn get_vocab(r: &mut impl Read) -> io::Result<Vec<usize>> {
    let n = get_u64(r)? as usize;
    (0..n).map(|_| get_u64(r).map(|x| x as usize)).collect()
}

pub fn write_cache(
    w: &mut impl Write,
    header: &CacheHeader,
    graphs: &[FeaturizedGraph],
) -> Result<(), CacheError> {
    w.write_all(CACHE_MAGIC)?;
    put_u32(w, CACHE_VERSION)?;
    put_u8(
        w,
        match header.spatial_mode {
            SpatialMode::EuclideanRbf => 0,
            SpatialMode::Hop => 1,
        },
    )?;
    put_u64(w, header.rbf.n_kernels as u64)?;
    put_f64(w, header.rbf.center_min)?;
    put_f64(w, header.rbf.center_max)?;
    put_f64(w, header.rbf.gamma)?;
    put_vocab(w, &header.schema.atom_vocab)?;
    put_vocab(w, &header.schema.bond_vocab)?;
    put_u64(w, graphs.len() as u64)?;
    for g in graphs {
        write_record(w, g)?;
    }
    Ok(())
}

fn write_record(w: &mut impl Write, g: &FeaturizedGraph) -> io::Result<()> {
    put_str(w, &g.id)?;
    put_u64(w, g.n_atoms() as u64)?;
    for row in &g.node_feat {
        row.iter().try_for_each(|&x| put_u32(w, x))?;
    }
    put_u64(w, g.arcs.len() as u64)?;
    for (k, &(u, v)) in g.arcs.iter().enumerate() {
        put_u64(w, u as u64)?;
        put_u64(w, v as u64)?;
        g.edge_feat[k].iter().try_for_each(|&x| put_u32(w, x))?;
        put_f64(w, g.bond_dist[k])?;
    }
    put_u64(w, g.pair_rbf.len() as u64)?;
    g.pair_rbf.iter().try_for_each(|&x| put_f64(w, x))?;
    g.hop.as_slice().iter().try_for_each(|&x| put_u32(w, x))?;
    g.in_degree.iter().try_for_each(|&x| put_u64(w, x as u64))?;
    match g.target {
        Some(t) => {
            put_u8(w, 1)?;
            put_f64(w, t)
        }
        None => {
            put_u8(w, 0)?;
            put_f64(w, 0.0)
        }
    }
}

pub fn read_cache(r: &mut impl Read) -> Result<(CacheHeader, Vec<FeaturizedGraph>), CacheError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(CacheError::Magic);
    }
    let version = get_u32(r)?;
    if version != CACHE_VERSION {
        return Err(CacheError::Version(version));
    }
    let spatial_mode = match get_u8(r)? {
        0 => SpatialMode::EuclideanRbf,
        1 => SpatialMode::Hop,
        m => return Err(CacheError::Corrupt(format!("unknown spatial mode tag {m}"))),
    };
    let rbf = RbfConfig {
        n_kernels: get_u64(r)? as usize,
        center_min: get_f64(r)?,
        center_max: get_f64(r)?,
        gamma: get_f64(r)?,
    };
    let schema = Schema {
        atom_vocab: get_vocab(r)?,
        bond_vocab: get_vocab(r)?,
    };
    let header = CacheHeader {
        spatial_mode,
        rbf,
        schema,
    };
    let count = get_u64(r)?;
    let mut graphs = Vec::new();
    for _ in 0..count {
        graphs.push(read_record(r, &header)?);
    }
    Ok((header, graphs))
}

fn read_record(r: &mut impl Read, header: &CacheHeader) -> Result<FeaturizedGraph, CacheError> {
    let id = get_str(r)?;
    let n = get_u64(r)? as usize;
    let fa = header.schema.n_atom_fields();
    let fb = header.schema.n_bond_fields();
    let node_feat = (0..n)
        .map(|_| (0..fa).map(|_| get_u32(r)).collect::<io::Result<Vec<_>>>())
        .collect::<io::Result<Vec<_>>>()?;
    let n_arcs = get_u64(r)? as usize;
    let mut arcs = Vec::with_capacity(n_arcs);
    let mut edge_feat = Vec::with_capacity(n_arcs);
    let mut bond_dist = Vec::with_capacity(n_arcs);
    for _ in 0..n_arcs {
        let u = get_u64(r)? as usize;
        let v = get_u64(r)? as usize;
        if u >= n || v >= n {
            return Err(CacheError::Corrupt(format!("{id}: arc ({u},{v}) out of range")));
        }
        arcs.push((u, v));
        edge_feat.push((0..fb).map(|_| get_u32(r)).collect::<io::Result<Vec<_>>>()?);
        bond_dist.push(get_f64(r)?);
    }
    let rbf_len = get_u64(r)? as usize;
    let pair_rbf = (0..rbf_len).map(|_| get_f64(r)).collect::<io::Result<Vec<_>>>()?;
    let n_kernels = match header.spatial_mode {
        SpatialMode::EuclideanRbf => header.rbf.n_kernels,
        SpatialMode::Hop => 0,
    };
    if rbf_len != n * n * n_kernels {
        return Err(CacheError::Corrupt(format!("{id}: pair_rbf length {rbf_len}")));
    }
    let hop = (0..n * n).map(|_| get_u32(r)).collect::<io::Result<Vec<_>>>()?;
    let in_degree = (0..n)
        .map(|_| get_u64(r).map(|x| x as usize))
        .collect::<io::Result<Vec<_>>>()?;
    let has_target = get_u8(r)?;
    let t = get_f64(r)?;
    Ok(FeaturizedGraph {
        id,
        node_feat,
        arcs,
        edge_feat,
        bond_dist,
        spatial_mode: header.spatial_mode,
        n_kernels,
        pair_rbf,
        hop: HopMatrix::from_raw(n, hop),
        in_degree,
        target: (has_target == 1).then_some(t),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::featurize_molecule;
    use crate::synth::{synthetic_molecules, SynthConfig};

    #[test]
    fn roundtrip_both_modes() {
        let (schema, graphs) = synthetic_molecules(&SynthConfig { count: 5, ..Default::default() });
        for mode in [SpatialMode::EuclideanRbf, SpatialMode::Hop] {
            let rbf = RbfConfig::with_kernels(6);
            let fgs: Vec<_> = graphs
                .iter()
                .map(|g| featurize_molecule(g, &schema, &rbf, mode).unwrap())
                .collect();
            let header = CacheHeader {
                spatial_mode: mode,
                rbf,
                schema: schema.clone(),
            };
            let mut buf = Vec::new();
            write_cache(&mut buf, &header, &fgs).unwrap();
            let (h, back) = read_cache(&mut buf.as_slice()).unwrap();
            assert_eq!(h, header);
            assert_eq!(back, fgs);
        }
    }

    #[test]
    fn truncated_file_is_an_error() {
        let (schema, graphs) = synthetic_molecules(&SynthConfig { count: 2, ..Default::default() });
        let rbf = RbfConfig::with_kernels(4);
        let fgs: Vec<_> = graphs
            .iter()
            .map(|g| featurize_molecule(g, &schema, &rbf, SpatialMode::EuclideanRbf).unwrap())
            .collect();
        let header = CacheHeader {
            spatial_mode: SpatialMode::EuclideanRbf,
            rbf,
            schema,
        };
        let mut buf = Vec::new();
        write_cache(&mut buf, &header, &fgs).unwrap();
        buf.truncate(buf.len() - 5);
        assert!(read_cache(&mut buf.as_slice()).is_err());
        assert!(matches!(read_cache(&mut &b"XXXXXXXX"[..]), Err(CacheError::Magic)));
    }
}
