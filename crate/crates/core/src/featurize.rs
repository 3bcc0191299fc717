//! Conversion of validated molecules into dense model inputs: Gaussian RBF
//! distance expansion, Laplace bond-length noise, degree counts and directed
//! arc lists.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::graph::{pairwise_euclidean, shortest_path_lengths, GraphError, HopMatrix, MolecularGraph, Schema};
use crate::seed::mix_seed;

/// Augmented bond lengths never drop below this many Ångström.
pub const MIN_BOND_DIST: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FeatureError {
    #[error("invalid RBF config: {0}")]
    RbfConfig(String),
    #[error("invalid Laplace scale {0}: must be positive")]
    LaplaceScale(f64),
    #[error("distance {0} is negative or non-finite")]
    Distance(f64),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Gaussian kernels `exp(-gamma (d - mu_k)^2)` with evenly spaced centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbfConfig {
    pub n_kernels: usize,
    pub center_min: f64,
    pub center_max: f64,
    pub gamma: f64,
}

impl Default for RbfConfig {
    fn default() -> Self {
        Self::over_range(256, 0.0, 10.0)
    }
}

impl RbfConfig {
    /// `n_kernels` centers over `[lo, hi]` with `gamma = 1 / (2 Δ²)`, Δ being
    /// the center spacing.
    pub fn over_range(n_kernels: usize, lo: f64, hi: f64) -> Self {
        let spacing = if n_kernels > 1 {
            (hi - lo) / (n_kernels - 1) as f64
        } else {
            hi - lo
        };
        Self {
            n_kernels,
            center_min: lo,
            center_max: hi,
            gamma: 1.0 / (2.0 * spacing * spacing),
        }
    }

    pub fn with_kernels(n_kernels: usize) -> Self {
        Self::over_range(n_kernels, 0.0, 10.0)
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.n_kernels == 0 {
            return Err(FeatureError::RbfConfig("n_kernels must be at least 1".into()));
        }
        let ordered = self.center_min < self.center_max;
        if !ordered {
            return Err(FeatureError::RbfConfig(format!(
                "center_min {} must be below center_max {}",
                self.center_min, self.center_max
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(FeatureError::RbfConfig(format!("gamma {} must be positive", self.gamma)));
        }
        Ok(())
    }

    pub fn centers(&self) -> Vec<f64> {
        if self.n_kernels == 1 {
            return vec![self.center_min];
        }
        let step = (self.center_max - self.center_min) / (self.n_kernels - 1) as f64;
        (0..self.n_kernels)
            .map(|k| self.center_min + step * k as f64)
            .collect()
    }
}

pub fn rbf_expand(d: f64, cfg: &RbfConfig) -> Result<Vec<f64>, FeatureError> {
    cfg.validate()?;
    if !(d >= 0.0 && d.is_finite()) {
        return Err(FeatureError::Distance(d));
    }
    Ok(rbf_unchecked(d, &cfg.centers(), cfg.gamma))
}

// Far tails are floored at the smallest normal value instead of underflowing to 0.
fn rbf_unchecked(d: f64, centers: &[f64], gamma: f64) -> Vec<f64> {
    centers
        .iter()
        .map(|mu| (-gamma * (d - mu) * (d - mu)).exp().max(f64::MIN_POSITIVE))
        .collect()
}

/// Expands every distance in `dists` into one K-wide row of a flat buffer.
pub fn rbf_rows(dists: &[f64], cfg: &RbfConfig) -> Result<Vec<f64>, FeatureError> {
    cfg.validate()?;
    let centers = cfg.centers();
    let mut out = Vec::with_capacity(dists.len() * cfg.n_kernels);
    for &d in dists {
        if !(d >= 0.0 && d.is_finite()) {
            return Err(FeatureError::Distance(d));
        }
        out.extend(rbf_unchecked(d, &centers, cfg.gamma));
    }
    Ok(out)
}

/// Location and scale of the Laplace noise added to bond lengths, in Ångström.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaplaceParams {
    pub mu: f64,
    pub b: f64,
}

impl Default for LaplaceParams {
    fn default() -> Self {
        Self {
            mu: 0.001994,
            b: 0.031939,
        }
    }
}

impl LaplaceParams {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.b > 0.0 && self.b.is_finite() && self.mu.is_finite() {
            Ok(())
        } else {
            Err(FeatureError::LaplaceScale(self.b))
        }
    }

    /// One inverse-CDF draw: `mu - b sign(u) ln(1 - 2|u|)`, `u ~ U(-1/2, 1/2)`.
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let u = loop {
            let r: f64 = rng.gen();
            if r > 0.0 {
                break r - 0.5;
            }
        };
        self.mu - self.b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
    }
}

/// Adds an independent Laplace draw to each entry.
pub fn laplace_augment(
    bond_dists: &[f64],
    params: &LaplaceParams,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, FeatureError> {
    params.validate()?;
    Ok(bond_dists.iter().map(|d| d + params.sample(rng)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Augmentation {
    /// Bond lengths pass through unchanged.
    #[default]
    Off,
    Laplace(LaplaceParams),
}

impl Augmentation {
    pub fn apply(&self, bond_dists: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>, FeatureError> {
        match self {
            Augmentation::Off => Ok(bond_dists.to_vec()),
            Augmentation::Laplace(p) => laplace_augment(bond_dists, p, rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SpatialMode {
    /// RBF-expanded Euclidean distances between every atom pair.
    #[default]
    EuclideanRbf,
    /// Shortest-path hop counts.
    Hop,
}

impl std::str::FromStr for SpatialMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "euclidean-rbf" => Ok(SpatialMode::EuclideanRbf),
            "hop" => Ok(SpatialMode::Hop),
            other => Err(format!("unknown spatial mode `{other}`")),
        }
    }
}

impl std::fmt::Display for SpatialMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SpatialMode::EuclideanRbf => "euclidean-rbf",
            SpatialMode::Hop => "hop",
        })
    }
}

/// Model-ready form of one molecule.
///
/// Bond `b = (u, v)` expands to arcs `2b = (u, v)` and `2b + 1 = (v, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizedGraph {
    pub id: String,
    pub node_feat: Vec<Vec<u32>>,
    pub arcs: Vec<(usize, usize)>,
    pub edge_feat: Vec<Vec<u32>>,
    /// Clean Euclidean length of each arc's bond.
    pub bond_dist: Vec<f64>,
    pub spatial_mode: SpatialMode,
    pub n_kernels: usize,
    /// `n × n × K`, row-major; empty in hop mode.
    pub pair_rbf: Vec<f64>,
    pub hop: HopMatrix,
    pub in_degree: Vec<usize>,
    pub target: Option<f64>,
}

impl FeaturizedGraph {
    pub fn n_atoms(&self) -> usize {
        self.node_feat.len()
    }

    pub fn n_bonds(&self) -> usize {
        self.arcs.len() / 2
    }

    pub fn pair_rbf_at(&self, i: usize, j: usize) -> &[f64] {
        let n = self.n_atoms();
        let k = self.n_kernels;
        &self.pair_rbf[(i * n + j) * k..(i * n + j + 1) * k]
    }

    /// Per-arc bond lengths after augmentation. One noise draw is made per bond
    /// so both arcs of a bond stay equal; results are clamped at
    /// [`MIN_BOND_DIST`].
    pub fn augmented_bond_dist(
        &self,
        aug: &Augmentation,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>, FeatureError> {
        if matches!(aug, Augmentation::Off) {
            return Ok(self.bond_dist.clone());
        }
        let per_bond: Vec<f64> = self.bond_dist.iter().step_by(2).copied().collect();
        let noisy = aug.apply(&per_bond, rng)?;
        Ok(noisy
            .iter()
            .flat_map(|d| {
                let d = d.max(MIN_BOND_DIST);
                [d, d]
            })
            .collect())
    }
}

pub fn featurize_molecule(
    g: &MolecularGraph,
    schema: &Schema,
    cfg: &RbfConfig,
    mode: SpatialMode,
) -> Result<FeaturizedGraph, FeatureError> {
    g.validate(schema)?;
    cfg.validate()?;
    let n = g.n_atoms();
    let dist = pairwise_euclidean(&g.coords)?;

    let mut arcs = Vec::with_capacity(2 * g.bonds.len());
    let mut edge_feat = Vec::with_capacity(2 * g.bonds.len());
    let mut bond_dist = Vec::with_capacity(2 * g.bonds.len());
    let mut in_degree = vec![0; n];
    for (&(u, v), feat) in g.bonds.iter().zip(&g.bond_features) {
        let d = dist.get(u, v);
        for (a, b) in [(u, v), (v, u)] {
            arcs.push((a, b));
            edge_feat.push(feat.clone());
            bond_dist.push(d);
            in_degree[b] += 1;
        }
    }

    let (n_kernels, pair_rbf) = match mode {
        SpatialMode::EuclideanRbf => (cfg.n_kernels, rbf_rows(dist.as_slice(), cfg)?),
        SpatialMode::Hop => (0, Vec::new()),
    };

    Ok(FeaturizedGraph {
        id: g.id.clone(),
        node_feat: g.atom_features.clone(),
        arcs,
        edge_feat,
        bond_dist,
        spatial_mode: mode,
        n_kernels,
        pair_rbf,
        hop: shortest_path_lengths(g),
        in_degree,
        target: g.target,
    })
}

/// Featurizes every molecule on a pool of `workers` threads. Output order
/// matches input order regardless of `workers`.
pub fn featurize_all(
    graphs: &[MolecularGraph],
    schema: &Schema,
    cfg: &RbfConfig,
    mode: SpatialMode,
    workers: usize,
) -> Result<Vec<FeaturizedGraph>, FeatureError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| {
        graphs
            .par_iter()
            .map(|g| featurize_molecule(g, schema, cfg, mode))
            .collect()
    })
}

/// Seed for the augmentation stream of one molecule in one epoch.
pub fn augmentation_seed(global: u64, molecule_id: &str, epoch: u64) -> u64 {
    mix_seed(&[global, crate::seed::hash_str(molecule_id), epoch])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_config_uses_256_kernels_over_ten_angstrom() {
        let cfg = RbfConfig::default();
        assert_eq!(cfg.n_kernels, 256);
        let c = cfg.centers();
        assert_eq!(c[0], 0.0);
        assert!((c[255] - 10.0).abs() < 1e-12);
        let spacing = 10.0 / 255.0;
        assert!((cfg.gamma - 1.0 / (2.0 * spacing * spacing)).abs() < 1e-9);
    }

    #[test]
    fn value_at_a_center_is_one() {
        let cfg = RbfConfig::default();
        let c = cfg.centers();
        let v = rbf_expand(c[37], &cfg).unwrap();
        assert_eq!(v[37], 1.0);
        assert!(v.iter().all(|x| *x > 0.0 && *x <= 1.0));
    }

    #[test]
    fn far_distances_vanish() {
        let cfg = RbfConfig::default();
        let v = rbf_expand(cfg.center_max + 100.0, &cfg).unwrap();
        assert!(v.iter().all(|x| *x < 1e-6));
    }

    #[test]
    fn hand_computed_two_kernel_case() {
        let cfg = RbfConfig {
            n_kernels: 2,
            center_min: 1.0,
            center_max: 2.0,
            gamma: 2.0,
        };
        let v = rbf_expand(1.5, &cfg).unwrap();
        let expected = (-0.5f64).exp();
        assert!((v[0] - expected).abs() < 1e-15);
        assert!((v[1] - expected).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_distance_and_config() {
        let cfg = RbfConfig::default();
        assert!(matches!(rbf_expand(-0.1, &cfg), Err(FeatureError::Distance(_))));
        assert!(matches!(rbf_expand(f64::NAN, &cfg), Err(FeatureError::Distance(_))));
        let bad = RbfConfig { gamma: 0.0, ..cfg };
        assert!(bad.validate().is_err());
        let bad = RbfConfig { n_kernels: 0, ..cfg };
        assert!(bad.validate().is_err());
        let bad = RbfConfig { center_min: 10.0, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rbf_is_lipschitz_at_small_steps() {
        let cfg = RbfConfig::default();
        let eps = 1e-6;
        let bound = cfg.gamma * (2.0 * cfg.center_max + eps) * eps;
        let mut d = 0.0;
        while d <= cfg.center_max {
            let a = rbf_expand(d, &cfg).unwrap();
            let b = rbf_expand(d + eps, &cfg).unwrap();
            let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff <= bound, "d={d}: {diff} > {bound}");
            d += 0.0137;
        }
    }

    #[test]
    fn identity_augmentation_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = vec![1.0, 1.4, 0.9];
        assert_eq!(Augmentation::Off.apply(&x, &mut rng).unwrap(), x);
    }

    #[test]
    fn laplace_defaults() {
        let p = LaplaceParams::default();
        assert_eq!(p.mu, 0.001994);
        assert_eq!(p.b, 0.031939);
    }

    #[test]
    fn laplace_same_seed_is_bit_identical() {
        let p = LaplaceParams::default();
        let x = vec![1.0; 500];
        let a = laplace_augment(&x, &p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = laplace_augment(&x, &p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
        let c = laplace_augment(&x, &p, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn laplace_mean_follows_law_of_large_numbers() {
        let p = LaplaceParams::default();
        let x = vec![1.0; 1_000_000];
        let out = laplace_augment(&x, &p, &mut ChaCha8Rng::seed_from_u64(2021)).unwrap();
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        let tol = 4.0 * (p.b * 2f64.sqrt()) / 1e3;
        assert!((mean - (1.0 + p.mu)).abs() < tol, "mean {mean}");
    }

    #[test]
    fn rejects_nonpositive_scale() {
        let p = LaplaceParams { mu: 0.0, b: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(laplace_augment(&[1.0], &p, &mut rng).is_err());
    }

    fn toy(n: usize, bonds: &[(usize, usize)], coords: Vec<[f64; 3]>) -> MolecularGraph {
        MolecularGraph {
            id: "t".into(),
            atom_features: vec![vec![1]; n],
            bonds: bonds.to_vec(),
            bond_features: vec![vec![0]; bonds.len()],
            coords,
            target: Some(1.0),
        }
    }

    fn schema() -> Schema {
        Schema {
            atom_vocab: vec![3],
            bond_vocab: vec![2],
        }
    }

    #[test]
    fn single_atom_diagonal_is_rbf_of_zero() {
        let cfg = RbfConfig::with_kernels(8);
        let fg = featurize_molecule(&toy(1, &[], vec![[0.0; 3]]), &schema(), &cfg, SpatialMode::EuclideanRbf).unwrap();
        assert_eq!(fg.pair_rbf.len(), 8);
        assert_eq!(fg.pair_rbf, rbf_expand(0.0, &cfg).unwrap());
        assert_eq!(fg.pair_rbf[0], 1.0);
    }

    #[test]
    fn both_arcs_carry_bond_length() {
        let cfg = RbfConfig::with_kernels(8);
        let g = toy(2, &[(0, 1)], vec![[0.0; 3], [1.0, 0.0, 0.0]]);
        let fg = featurize_molecule(&g, &schema(), &cfg, SpatialMode::EuclideanRbf).unwrap();
        assert_eq!(fg.arcs, vec![(0, 1), (1, 0)]);
        assert_eq!(fg.bond_dist, vec![1.0, 1.0]);
        assert_eq!(fg.in_degree, vec![1, 1]);
        let hop = featurize_molecule(&g, &schema(), &cfg, SpatialMode::Hop).unwrap();
        assert!(hop.pair_rbf.is_empty());
        assert_eq!(hop.bond_dist, vec![1.0, 1.0]);
    }

    #[test]
    fn augmented_lengths_are_paired_and_clamped() {
        let cfg = RbfConfig::with_kernels(4);
        let g = toy(3, &[(0, 1), (1, 2)], vec![[0.0; 3], [0.0005, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let fg = featurize_molecule(&g, &schema(), &cfg, SpatialMode::EuclideanRbf).unwrap();
        let aug = Augmentation::Laplace(LaplaceParams { mu: -0.5, b: 0.01 });
        let out = fg.augmented_bond_dist(&aug, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out[0], out[1]);
        assert_eq!(out[2], out[3]);
        assert_eq!(out[0], MIN_BOND_DIST);
        assert!(out.iter().all(|d| *d >= MIN_BOND_DIST));
    }
}
