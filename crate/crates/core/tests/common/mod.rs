//! Independent reference implementations shared by the integration tests and
//! the acceptance runner. Each one is written from the defining formula with
//! plain loops and shares no code with the library.

#![allow(dead_code, clippy::needless_range_loop)]

use std::path::PathBuf;

use molgap::autodiff::{Tape, Tensor};
use molgap::ensemble::EnsembleEntry;
use molgap::expc::{expc_layer, LayerVars};
use molgap::graph::{pairwise_euclidean, shortest_path_lengths, HopMatrix};
use molgap::graphormer::SpatialBias;
use molgap::{ensemble_predict, EnsembleSpec, MolecularGraph};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn paper_spec_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/ensemble/paper.toml")
}

pub fn uniform(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Random simple graph on `n` nodes with about `density` of all pairs bonded.
pub fn random_bonds(rng: &mut impl Rng, n: usize, density: f64) -> Vec<(usize, usize)> {
    let mut bonds = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.gen_bool(density) {
                bonds.push(if rng.gen_bool(0.5) { (u, v) } else { (v, u) });
            }
        }
    }
    bonds.shuffle(rng);
    bonds
}

/// Molecule with one categorical column per atom and bond, vocabulary 4.
pub fn random_graph(rng: &mut impl Rng, n: usize, density: f64) -> MolecularGraph {
    let bonds = random_bonds(rng, n, density);
    MolecularGraph {
        id: "g".into(),
        atom_features: (0..n).map(|_| vec![rng.gen_range(0..4)]).collect(),
        bond_features: bonds.iter().map(|_| vec![rng.gen_range(0..4)]).collect(),
        bonds,
        coords: (0..n).map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]).collect(),
        target: None,
    }
}

fn report(name: &str, worst: f64, tol: f64) -> Result<f64, String> {
    if worst <= tol {
        Ok(worst)
    } else {
        Err(format!("{name}: worst deviation {worst:e} above {tol:e}"))
    }
}

// ---- pairwise distances ----

pub fn distance_oracle(coords: &[[f64; 3]]) -> Vec<Vec<f64>> {
    let n = coords.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let dx = coords[i][0] - coords[j][0];
            let dy = coords[i][1] - coords[j][1];
            let dz = coords[i][2] - coords[j][2];
            d[i][j] = (dx * dx + dy * dy + dz * dz).sqrt();
        }
    }
    d
}

pub fn check_pairwise_euclidean(instances: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.gen_range(1..=10);
        let coords: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]).collect();
        let got = pairwise_euclidean(&coords).map_err(|e| e.to_string())?;
        let want = distance_oracle(&coords);
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((got.get(i, j) - want[i][j]).abs());
            }
        }
    }
    report("pairwise_euclidean", worst, 1e-12)
}

// ---- hop counts ----

/// Floyd–Warshall over `u64` with `u64::MAX` as infinity.
pub fn floyd_warshall(n: usize, bonds: &[(usize, usize)]) -> Vec<Vec<u64>> {
    let inf = u64::MAX;
    let mut d = vec![vec![inf; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for &(u, v) in bonds {
        d[u][v] = 1;
        d[v][u] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] != inf && d[k][j] != inf && d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

/// Breadth-first search from one source over an adjacency matrix.
pub fn bfs_from(n: usize, bonds: &[(usize, usize)], src: usize) -> Vec<Option<u32>> {
    let mut adj = vec![vec![false; n]; n];
    for &(u, v) in bonds {
        adj[u][v] = true;
        adj[v][u] = true;
    }
    let mut dist = vec![None; n];
    dist[src] = Some(0);
    let mut frontier = vec![src];
    let mut level = 0;
    while !frontier.is_empty() {
        level += 1;
        let mut next = Vec::new();
        for &u in &frontier {
            for v in 0..n {
                if adj[u][v] && dist[v].is_none() {
                    dist[v] = Some(level);
                    next.push(v);
                }
            }
        }
        frontier = next;
    }
    dist
}

pub fn hops_match_floyd_warshall(g: &MolecularGraph, h: &HopMatrix) -> bool {
    let n = g.n_atoms();
    let fw = floyd_warshall(n, &g.bonds);
    (0..n).all(|i| {
        (0..n).all(|j| match h.hops(i, j) {
            Some(x) => fw[i][j] == u64::from(x),
            None => fw[i][j] == u64::MAX && h.raw(i, j) == HopMatrix::UNREACHABLE,
        })
    })
}

pub fn check_shortest_paths(instances: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..instances {
        let n = rng.gen_range(1..=10);
        let density = rng.gen_range(0.1..0.6);
        let g = random_graph(&mut rng, n, density);
        let h = shortest_path_lengths(&g);
        if !hops_match_floyd_warshall(&g, &h) {
            return Err(format!("shortest_path_lengths differs from Floyd–Warshall on instance {k}"));
        }
        for src in 0..n {
            let b = bfs_from(n, &g.bonds, src);
            if (0..n).any(|j| h.hops(src, j) != b[j]) {
                return Err(format!("shortest_path_lengths differs from BFS on instance {k}"));
            }
        }
    }
    Ok(0.0)
}

// ---- expanded aggregation layer ----

pub struct LayerWeights {
    pub w1: Vec<Vec<f64>>,
    pub w2: Vec<Vec<f64>>,
    pub a1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub a2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
}

fn matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| uniform(rng, cols)).collect()
}

fn to_tensor(m: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

/// `x · W` for a row vector `x`, then an optional bias.
fn affine(x: &[f64], w: &[Vec<f64>], b: Option<&[f64]>) -> Vec<f64> {
    let cols = w[0].len();
    let mut y = vec![0.0; cols];
    for (c, yc) in y.iter_mut().enumerate() {
        for (r, xr) in x.iter().enumerate() {
            *yc += xr * w[r][c];
        }
        if let Some(b) = b {
            *yc += b[c];
        }
    }
    y
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

/// Per-node loop: gather the in-arcs of each node, sum gated messages, add the
/// node's own transformed state, then the two-layer MLP.
pub fn expc_layer_oracle(h: &[Vec<f64>], arcs: &[(usize, usize)], edge: &[Vec<f64>], w: &LayerWeights) -> Vec<Vec<f64>> {
    let n = h.len();
    let mut out = Vec::with_capacity(n);
    for v in 0..n {
        let own = relu(affine(&h[v], &w.w2, None));
        let mut z = own.clone();
        for (a, &(src, dst)) in arcs.iter().enumerate() {
            if dst != v {
                continue;
            }
            let gate = relu(affine(&edge[a], &w.w1, None));
            let msg = relu(affine(&h[src], &w.w2, None));
            for c in 0..z.len() {
                z[c] += gate[c] * msg[c];
            }
        }
        let y = relu(affine(&z, &w.a1, Some(&w.b1)));
        out.push(affine(&y, &w.a2, Some(&w.b2)));
    }
    out
}

/// Library layer and oracle on one random instance; returns the worst
/// absolute difference.
pub fn expc_layer_case(rng: &mut impl Rng) -> f64 {
    let n = rng.gen_range(1..=7);
    let d = rng.gen_range(1..=6);
    let de = rng.gen_range(1..=5);
    let dp = rng.gen_range(d..=d + 6);
    let mut arcs = Vec::new();
    for (u, v) in random_bonds(rng, n, 0.5) {
        arcs.push((u, v));
        arcs.push((v, u));
    }
    arcs.shuffle(rng);
    let h = matrix(rng, n, d);
    let edge = matrix(rng, arcs.len(), de);
    let w = LayerWeights {
        w1: matrix(rng, de, dp),
        w2: matrix(rng, d, dp),
        a1: matrix(rng, dp, dp),
        b1: uniform(rng, dp),
        a2: matrix(rng, dp, d),
        b2: uniform(rng, d),
    };
    let mut tape = Tape::new();
    let p = LayerVars {
        w1: tape.leaf(to_tensor(&w.w1)),
        w2: tape.leaf(to_tensor(&w.w2)),
        mlp_w1: tape.leaf(to_tensor(&w.a1)),
        mlp_b1: tape.leaf(Tensor::from_vec(&[dp], w.b1.clone()).unwrap()),
        mlp_w2: tape.leaf(to_tensor(&w.a2)),
        mlp_b2: tape.leaf(Tensor::from_vec(&[d], w.b2.clone()).unwrap()),
    };
    let hv = tape.leaf(to_tensor(&h));
    let ev = if arcs.is_empty() {
        tape.leaf(Tensor::zeros(&[0, de]))
    } else {
        tape.leaf(to_tensor(&edge))
    };
    let out = expc_layer(&mut tape, hv, &arcs, ev, &p).unwrap();
    let got = tape.value(out);
    let want = expc_layer_oracle(&h, &arcs, &edge, &w);
    let mut worst: f64 = 0.0;
    for (v, row) in want.iter().enumerate() {
        for (c, x) in row.iter().enumerate() {
            worst = worst.max((got.at2(v, c) - x).abs());
        }
    }
    worst
}

pub fn check_expc_layer(instances: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let worst = (0..instances).map(|_| expc_layer_case(&mut rng)).fold(0.0, f64::max);
    report("expc_layer", worst, 1e-12)
}

// ---- spatial bias ----

pub fn check_spatial_bias(instances: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.gen_range(1..=8);
        let k = rng.gen_range(1..=10);
        let heads = rng.gen_range(1..=5);
        let pair: Vec<f64> = (0..n * n * k).map(|_| rng.gen_range(0.0..1.0)).collect();
        let proj = uniform(&mut rng, k * heads);
        let offset = uniform(&mut rng, heads);
        let b = SpatialBias::from_rbf(&pair, n, k, &proj, &offset).map_err(|e| e.to_string())?;
        for h in 0..heads {
            for i in 0..n {
                for j in 0..n {
                    let mut dot = 0.0;
                    for c in 0..k {
                        dot += proj[c * heads + h] * pair[(i * n + j) * k + c];
                    }
                    worst = worst.max((b.get(h, i, j) - (dot + offset[h])).abs());
                }
            }
        }
    }
    report("spatial_bias", worst, 1e-12)
}

// ---- ensemble ----

pub fn spec_from_weights(weights: &[f64]) -> EnsembleSpec {
    EnsembleSpec {
        normalizer: weights.iter().sum(),
        entries: weights
            .iter()
            .enumerate()
            .map(|(i, &weight)| EnsembleEntry {
                label: None,
                checkpoint: PathBuf::from(format!("m{i}.ckpt")),
                weight,
            })
            .collect(),
    }
}

pub fn ensemble_oracle(preds: &[Vec<f64>], weights: &[f64], normalizer: f64) -> Vec<f64> {
    let n = preds[0].len();
    let mut out = vec![0.0; n];
    for (j, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for (i, p) in preds.iter().enumerate() {
            s += weights[i] * p[j];
        }
        *o = s / normalizer;
    }
    out
}

fn ensemble_case(preds: &[Vec<f64>], spec: &EnsembleSpec) -> Result<f64, String> {
    let weights: Vec<f64> = spec.entries.iter().map(|e| e.weight).collect();
    let got = ensemble_predict(preds, spec).map_err(|e| e.to_string())?;
    let want = ensemble_oracle(preds, &weights, spec.normalizer);
    Ok(got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

pub fn check_ensemble_predict(instances: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let paper = EnsembleSpec::load(&paper_spec_path()).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let n = rng.gen_range(1..=12);
        let spec = if k % 2 == 0 {
            paper.clone()
        } else {
            let m = rng.gen_range(1..=10);
            let w: Vec<f64> = (0..m).map(|_| rng.gen_range(0.01..1.0)).collect();
            spec_from_weights(&w)
        };
        let preds: Vec<Vec<f64>> = (0..spec.entries.len()).map(|_| (0..n).map(|_| rng.gen_range(-1.0..8.0)).collect()).collect();
        worst = worst.max(ensemble_case(&preds, &spec)?);
    }
    report("ensemble_predict", worst, 1e-12)
}

// ---- optimizer ----

/// Textbook Adam on one scalar, written from the update equations.
pub fn reference_adam(x0: f64, grad: impl Fn(f64) -> f64, lr: f64, steps: usize) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
    let mut trace = Vec::with_capacity(steps);
    for t in 1..=steps {
        let g = grad(x);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t as i32));
        let vhat = v / (1.0 - b2.powi(t as i32));
        x -= lr * mhat / (vhat.sqrt() + eps);
        trace.push(x);
    }
    trace
}

// ---- model invariances ----

pub fn random_permutation(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Uniform random rotation from a normalized random quaternion.
pub fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let q: [f64; 4] = loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            break q.map(|x| x / n);
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn rigid_motion(g: &MolecularGraph, rng: &mut impl Rng) -> MolecularGraph {
    let r = random_rotation(rng);
    let t: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-10.0..10.0));
    let mut out = g.clone();
    for c in &mut out.coords {
        let p = *c;
        *c = std::array::from_fn(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i]);
    }
    out
}

/// Up to ten atoms, including single atoms and ring closures.
pub fn invariance_molecules(count: usize, seed: u64) -> (molgap::Schema, Vec<MolecularGraph>) {
    molgap::synth::synthetic_molecules(&molgap::synth::SynthConfig {
        count,
        min_atoms: 1,
        max_atoms: 10,
        ring_prob: 0.4,
        seed,
    })
}

pub struct Invariance {
    pub permutation: f64,
    pub rigid: Option<f64>,
}

/// Largest prediction change under atom relabeling and, for the distance
/// model, under rotation plus translation.
pub fn measure_invariance(kind: molgap::ModelKind, count: usize, seed: u64) -> Invariance {
    use molgap::{featurize_molecule, ModelConfig, Regressor, SpatialMode};
    let (model, params, _) = molgap::check::mini_setup(kind, 0, seed);
    let (schema, graphs) = invariance_molecules(count, seed);
    let (rbf, mode) = match model.config() {
        ModelConfig::Graphormer(c) => (c.rbf, c.spatial_mode),
        ModelConfig::Expc(_) => (molgap::RbfConfig::with_kernels(1), SpatialMode::Hop),
    };
    let predict = |g: &MolecularGraph| {
        let fg = featurize_molecule(g, &schema, &rbf, mode).unwrap();
        model.predict(&params, &fg).unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
    let mut perm_worst: f64 = 0.0;
    let mut rigid_worst: f64 = 0.0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for g in &graphs {
        let base = predict(g);
        assert!(base.is_finite());
        lo = lo.min(base);
        hi = hi.max(base);
        let perm = random_permutation(&mut rng, g.n_atoms());
        perm_worst = perm_worst.max((predict(&g.permuted(&perm)) - base).abs());
        if kind == molgap::ModelKind::Graphormer {
            rigid_worst = rigid_worst.max((predict(&rigid_motion(g, &mut rng)) - base).abs());
        }
    }
    // a constant model would pass trivially
    assert!(hi - lo > 1e-3, "predictions barely vary: [{lo}, {hi}]");
    Invariance {
        permutation: perm_worst,
        rigid: (kind == molgap::ModelKind::Graphormer).then_some(rigid_worst),
    }
}

// ---- training ----

/// Mini model of `kind` and `count` synthetic molecules featurized for it.
pub fn mini_problem(kind: molgap::ModelKind, count: usize, seed: u64) -> (molgap::Model, Vec<molgap::FeaturizedGraph>) {
    use molgap::profile::{model_config, Profile};
    use molgap::{featurize_all, Model, ModelConfig, SpatialMode};
    let (schema, graphs) = molgap::synth::synthetic_molecules(&molgap::synth::SynthConfig {
        count,
        seed,
        ..Default::default()
    });
    let cfg = model_config(kind, Profile::Mini, schema.clone());
    let (rbf, mode) = match &cfg {
        ModelConfig::Graphormer(c) => (c.rbf, c.spatial_mode),
        ModelConfig::Expc(_) => (molgap::RbfConfig::with_kernels(1), SpatialMode::Hop),
    };
    let data = featurize_all(&graphs, &schema, &rbf, mode, 1).unwrap();
    (Model::from_config(&cfg).unwrap(), data)
}

/// Mini-profile schedule cut to a few steps or epochs, for repeated runs.
pub fn short_schedule(kind: molgap::ModelKind) -> molgap::TrainConfig {
    use molgap::profile::{train_config, Profile};
    use molgap::TrainConfig;
    match train_config(kind, Profile::Mini) {
        TrainConfig::Graphormer(mut c) => {
            c.max_steps = 60;
            c.warmup_steps = 10;
            c.eval_interval = 20;
            TrainConfig::Graphormer(c)
        }
        TrainConfig::Expc(mut c) => {
            c.max_epochs = 4;
            TrainConfig::Expc(c)
        }
    }
}

pub fn fit_quiet(
    model: &molgap::Model,
    data: &[molgap::FeaturizedGraph],
    split: &molgap::train::Split,
    cfg: &molgap::TrainConfig,
    seed: u64,
    workers: usize,
) -> molgap::FitOutput {
    molgap::fit(model, data, split, cfg, seed, workers, &mut |_| {}).unwrap()
}

/// Checkpoint bytes of repeated fits must agree, for one worker and four.
pub fn check_fit_determinism(kind: molgap::ModelKind, seed: u64) -> Result<(), String> {
    let (model, data) = mini_problem(kind, 24, seed);
    let plan = molgap::train::kfold_split(&data.iter().map(|g| g.id.clone()).collect::<Vec<_>>(), 4, seed).unwrap();
    let split = plan.split(molgap::FoldSelection::Fold(1)).unwrap();
    let cfg = short_schedule(kind);
    let first = fit_quiet(&model, &data, &split, &cfg, seed, 1).checkpoint.to_bytes();
    for workers in [1, 4] {
        let again = fit_quiet(&model, &data, &split, &cfg, seed, workers).checkpoint.to_bytes();
        if again != first {
            return Err(format!("{kind} checkpoint differs on repeat with {workers} workers"));
        }
    }
    Ok(())
}

/// Serial and 4-worker featurization must write byte-identical caches.
pub fn check_cache_determinism(count: usize, seed: u64) -> Result<(), String> {
    use molgap::{featurize_all, write_cache, CacheHeader, SpatialMode};
    let (schema, graphs) = molgap::synth::synthetic_molecules(&molgap::synth::SynthConfig {
        count,
        seed,
        ..Default::default()
    });
    for mode in [SpatialMode::EuclideanRbf, SpatialMode::Hop] {
        let rbf = molgap::RbfConfig::default();
        let header = CacheHeader {
            spatial_mode: mode,
            rbf,
            schema: schema.clone(),
        };
        let bytes = |workers| {
            let fgs = featurize_all(&graphs, &schema, &rbf, mode, workers).unwrap();
            let mut buf = Vec::new();
            write_cache(&mut buf, &header, &fgs).unwrap();
            buf
        };
        if bytes(1) != bytes(4) {
            return Err(format!("{mode} cache differs between 1 and 4 workers"));
        }
    }
    Ok(())
}

// ---- parameter counts ----

/// Trainable size of one Graphormer block.
pub fn graphormer_block_size(c: &molgap::GraphormerConfig) -> usize {
    let (d, f, h, k) = (c.hidden_dim, c.ffn_dim, c.n_heads, c.rbf.n_kernels);
    let v_b: usize = c.schema.bond_vocab.iter().sum();
    let spatial = match c.spatial_mode {
        molgap::SpatialMode::EuclideanRbf => k * h + h,
        molgap::SpatialMode::Hop => (c.max_hop as usize + 2) * h,
    };
    4 * d * d + 3 * d + 2 * d * f + f + d + 4 * d + spatial + k * h + h * v_b + h
}

/// Embeddings, graph token, final norm and head.
pub fn graphormer_outside_blocks(c: &molgap::GraphormerConfig) -> usize {
    let d = c.hidden_dim;
    let v_a: usize = c.schema.atom_vocab.iter().sum();
    d * (v_a + c.degree_buckets + 1) + 2 * d + d + 1
}

pub fn graphormer_closed_form(c: &molgap::GraphormerConfig) -> usize {
    graphormer_outside_blocks(c) + c.n_layers * graphormer_block_size(c)
}

pub fn expc_closed_form(c: &molgap::ExpCConfig) -> usize {
    let (d, dp, de) = (c.hidden_dim, c.expanded_dim, c.edge_dim());
    let v_a: usize = c.schema.atom_vocab.iter().sum();
    let v_b: usize = c.schema.bond_vocab.iter().sum();
    let layer = de * dp + d * dp + dp * dp + dp + dp * d + d;
    d * v_a + de * v_b + d + de + c.n_layers * layer + d + 1
}
