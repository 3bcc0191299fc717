//! Edge-gated message passing with an expanded inner dimension and a virtual
//! node readout.
//!
//! One layer maps node states `H` (`n × d`) and edge states `E` (`arcs × d_e`)
//! to
//!
//! ```text
//! M   = relu(E W1)                         arcs × d′
//! H′  = relu(H W2)                         n × d′
//! z_v = Σ_{(u,v)} M_uv ⊙ H′_u + H′_v
//! out = relu(z W_a + b_a) W_b + b_b        n × d
//! ```
//!
//! A virtual node is appended with a learned initial state and joined to every
//! atom by two arcs carrying a learned edge vector. Its state after each layer
//! is recorded; the prediction is a linear head on the sum of those states.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::graph::Schema;
use crate::model::{embed_columns, ensure_finite, GraphInput, Init, Mode, ModelError, ParamSpec, Regressor};
use crate::params::ParamVars;
use crate::seed::mix_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpCConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub expanded_dim: usize,
    pub dropout: f64,
    pub schema: Schema,
}

impl ExpCConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_dim == 0 || self.expanded_dim == 0 {
            return Err(ModelError::Config("dimensions must be positive".into()));
        }
        if self.expanded_dim < self.hidden_dim {
            return Err(ModelError::Config(format!(
                "expanded_dim {} smaller than hidden_dim {}",
                self.expanded_dim, self.hidden_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Width of the edge states; bond embeddings share the node width.
    pub fn edge_dim(&self) -> usize {
        self.hidden_dim
    }
}

/// Tape handles for one layer's weights.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub w1: Var,
    pub w2: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
}

impl LayerVars {
    pub fn bind(params: &ParamVars<'_>, layer: usize) -> Result<Self, ModelError> {
        let p = |s: &str| params.get(&format!("layer{layer}.{s}"));
        Ok(Self {
            w1: p("w1")?,
            w2: p("w2")?,
            mlp_w1: p("mlp.w1")?,
            mlp_b1: p("mlp.b1")?,
            mlp_w2: p("mlp.w2")?,
            mlp_b2: p("mlp.b2")?,
        })
    }
}

/// Arc order with destinations ascending, then sources ascending. Summing in
/// this order makes the aggregate independent of how arcs were listed.
pub fn canonical_arc_order(arcs: &[(usize, usize)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..arcs.len()).collect();
    order.sort_by_key(|&k| (arcs[k].1, arcs[k].0, k));
    order
}

/// One aggregation layer. `edge` rows are aligned with `arcs`.
pub fn expc_layer(
    tape: &mut Tape,
    h: Var,
    arcs: &[(usize, usize)],
    edge: Var,
    p: &LayerVars,
) -> Result<Var, ModelError> {
    let rows = |v: Var| {
        tape.value(v)
            .dims2()
            .map(|(r, _)| r)
            .ok_or_else(|| ModelError::Input("layer inputs must be matrices".into()))
    };
    let n = rows(h)?;
    let n_arcs = rows(edge)?;
    if n_arcs != arcs.len() {
        return Err(ModelError::Input(format!(
            "{} edge rows for {} arcs",
            n_arcs,
            arcs.len()
        )));
    }
    if let Some(&(u, v)) = arcs.iter().find(|&&(u, v)| u >= n || v >= n) {
        return Err(ModelError::Input(format!("arc ({u},{v}) outside {n} nodes")));
    }
    let order = canonical_arc_order(arcs);
    let src: Vec<usize> = order.iter().map(|&k| arcs[k].0).collect();
    let dst: Vec<usize> = order.iter().map(|&k| arcs[k].1).collect();
    let edge = tape.gather_rows(edge, &order)?;

    let m = tape.matmul(edge, p.w1)?;
    let m = tape.relu(m);
    let hp = tape.matmul(h, p.w2)?;
    let hp = tape.relu(hp);
    let z = if arcs.is_empty() {
        hp
    } else {
        let msg = tape.gather_rows(hp, &src)?;
        let msg = tape.mul(msg, m)?;
        let agg = tape.scatter_add_rows(msg, &dst, n)?;
        tape.add(agg, hp)?
    };
    let y = tape.matmul(z, p.mlp_w1)?;
    let y = tape.add_row(y, p.mlp_b1)?;
    let y = tape.relu(y);
    let y = tape.matmul(y, p.mlp_w2)?;
    Ok(tape.add_row(y, p.mlp_b2)?)
}

/// Element-wise sum of the recorded per-layer virtual-node states.
pub fn virtual_readout(tape: &mut Tape, states: &[Var]) -> Result<Var, ModelError> {
    let (&first, rest) = states
        .split_first()
        .ok_or_else(|| ModelError::Input("no virtual-node states to read out".into()))?;
    let mut acc = first;
    for &s in rest {
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

#[derive(Debug, Clone)]
pub struct ExpC {
    cfg: ExpCConfig,
}

impl ExpC {
    pub fn new(cfg: ExpCConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ExpCConfig {
        &self.cfg
    }
}

impl Regressor for ExpC {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let cfg = &self.cfg;
        let d = cfg.hidden_dim;
        let dp = cfg.expanded_dim;
        let de = cfg.edge_dim();
        let mut specs = Vec::new();
        for (c, &v) in cfg.schema.atom_vocab.iter().enumerate() {
            specs.push(ParamSpec::new(format!("atom_emb.{c}"), &[v, d], Init::Xavier));
        }
        for (c, &v) in cfg.schema.bond_vocab.iter().enumerate() {
            specs.push(ParamSpec::new(format!("bond_emb.{c}"), &[v, de], Init::Xavier));
        }
        specs.push(ParamSpec::new("virtual.init", &[1, d], Init::Xavier));
        specs.push(ParamSpec::new("virtual.edge", &[1, de], Init::Xavier));
        for l in 0..cfg.n_layers {
            let name = |s: &str| format!("layer{l}.{s}");
            specs.push(ParamSpec::new(name("w1"), &[de, dp], Init::FanIn));
            specs.push(ParamSpec::new(name("w2"), &[d, dp], Init::FanIn));
            specs.push(ParamSpec::new(name("mlp.w1"), &[dp, dp], Init::FanIn));
            specs.push(ParamSpec::new(name("mlp.b1"), &[dp], Init::Zeros));
            specs.push(ParamSpec::new(name("mlp.w2"), &[dp, d], Init::FanIn));
            specs.push(ParamSpec::new(name("mlp.b2"), &[d], Init::Zeros));
        }
        specs.push(ParamSpec::new("head.w", &[d, 1], Init::Zeros));
        specs.push(ParamSpec::new("head.b", &[1], Init::Zeros));
        specs
    }

    fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamVars<'_>,
        input: GraphInput<'_>,
        mode: Mode,
    ) -> Result<Var, ModelError> {
        let cfg = &self.cfg;
        let g = input.graph;
        let n = g.n_atoms();
        if g.node_feat.first().map_or(0, Vec::len) != cfg.schema.n_atom_fields() {
            return Err(ModelError::Input("atom feature columns differ from schema".into()));
        }

        let atoms = embed_columns(tape, params, "atom_emb", &g.node_feat, cfg.schema.n_atom_fields())?
            .ok_or_else(|| ModelError::Config("schema has no atom columns".into()))?;
        let mut h = tape.concat(&[atoms, params.get("virtual.init")?], 0)?;

        let mut arcs = g.arcs.clone();
        for v in 0..n {
            arcs.push((v, n));
            arcs.push((n, v));
        }
        let virt = tape.gather_rows(params.get("virtual.edge")?, &vec![0; 2 * n])?;
        let bond = if g.arcs.is_empty() {
            None
        } else {
            embed_columns(tape, params, "bond_emb", &g.edge_feat, cfg.schema.n_bond_fields())?
        };
        let edge = match bond {
            Some(b) => tape.concat(&[b, virt], 0)?,
            None if g.arcs.is_empty() => virt,
            None => {
                let zeros = tape.leaf(Tensor::zeros(&[g.arcs.len(), cfg.edge_dim()]));
                tape.concat(&[zeros, virt], 0)?
            }
        };

        let mut states = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = LayerVars::bind(params, l)?;
            h = expc_layer(tape, h, &arcs, edge, &p)?;
            h = tape.dropout(h, cfg.dropout, mode.is_train(), mix_seed(&[mode.seed(), l as u64]))?;
            ensure_finite(tape, h, l)?;
            states.push(tape.gather_rows(h, &[n])?);
        }
        let readout = if states.is_empty() {
            tape.gather_rows(h, &[n])?
        } else {
            virtual_readout(tape, &states)?
        };
        let y = tape.matmul(readout, params.get("head.w")?)?;
        let y = tape.add_row(y, params.get("head.b")?)?;
        ensure_finite(tape, y, cfg.n_layers)?;
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    struct Layer {
        tape: Tape,
        p: LayerVars,
    }

    fn random_layer(seed: u64, d: usize, de: usize, dp: usize) -> Layer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let p = LayerVars {
            w1: tape.leaf(rand_tensor(&mut rng, &[de, dp])),
            w2: tape.leaf(rand_tensor(&mut rng, &[d, dp])),
            mlp_w1: tape.leaf(rand_tensor(&mut rng, &[dp, dp])),
            mlp_b1: tape.leaf(rand_tensor(&mut rng, &[dp])),
            mlp_w2: tape.leaf(rand_tensor(&mut rng, &[dp, d])),
            mlp_b2: tape.leaf(rand_tensor(&mut rng, &[d])),
        };
        Layer { tape, p }
    }

    fn mlp_only(layer: &mut Layer, h: &Tensor) -> Tensor {
        let hv = layer.tape.leaf(h.clone());
        let hp = layer.tape.matmul(hv, layer.p.w2).unwrap();
        let hp = layer.tape.relu(hp);
        let y = layer.tape.matmul(hp, layer.p.mlp_w1).unwrap();
        let y = layer.tape.add_row(y, layer.p.mlp_b1).unwrap();
        let y = layer.tape.relu(y);
        let y = layer.tape.matmul(y, layer.p.mlp_w2).unwrap();
        let y = layer.tape.add_row(y, layer.p.mlp_b2).unwrap();
        layer.tape.value(y).clone()
    }

    #[test]
    fn isolated_node_is_mlp_of_self() {
        let mut layer = random_layer(1, 4, 3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = rand_tensor(&mut rng, &[1, 4]);
        let hv = layer.tape.leaf(h.clone());
        let e = layer.tape.leaf(Tensor::zeros(&[0, 3]));
        let out = expc_layer(&mut layer.tape, hv, &[], e, &layer.p).unwrap();
        let got = layer.tape.value(out).clone();
        assert_eq!(got, mlp_only(&mut layer, &h));
    }

    #[test]
    fn zero_gate_ignores_neighbors() {
        let mut layer = random_layer(3, 4, 3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let zero_w1 = layer.tape.leaf(Tensor::zeros(&[3, 6]));
        layer.p.w1 = zero_w1;
        let h = rand_tensor(&mut rng, &[3, 4]);
        let hv = layer.tape.leaf(h.clone());
        let e = layer.tape.leaf(rand_tensor(&mut rng, &[4, 3]));
        let arcs = [(0, 1), (1, 0), (1, 2), (2, 1)];
        let out = expc_layer(&mut layer.tape, hv, &arcs, e, &layer.p).unwrap();
        let got = layer.tape.value(out).clone();
        assert_eq!(got, mlp_only(&mut layer, &h));
    }

    #[test]
    fn arc_order_does_not_matter() {
        let mut layer = random_layer(5, 4, 3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = layer.tape.leaf(rand_tensor(&mut rng, &[4, 4]));
        let arcs = vec![(0, 1), (1, 0), (1, 2), (2, 1), (3, 1), (1, 3)];
        let e = rand_tensor(&mut rng, &[6, 3]);
        let ev = layer.tape.leaf(e.clone());
        let a = expc_layer(&mut layer.tape, h, &arcs, ev, &layer.p).unwrap();

        let perm = [4, 2, 0, 5, 3, 1];
        let arcs2: Vec<_> = perm.iter().map(|&k| arcs[k]).collect();
        let rows: Vec<Vec<f64>> = perm.iter().map(|&k| e.row(k).to_vec()).collect();
        let ev2 = layer.tape.leaf(Tensor::from_rows(&rows).unwrap());
        let b = expc_layer(&mut layer.tape, h, &arcs2, ev2, &layer.p).unwrap();
        assert_eq!(layer.tape.value(a), layer.tape.value(b));
    }

    #[test]
    fn distinguishes_neighborhoods_with_equal_sums() {
        // center 0 sees {x1, x2} in one graph and {y1, y2} in the other, with
        // x1 + x2 = y1 + y2 and identical edge states
        let mut layer = random_layer(7, 2, 2, 8);
        let e = layer.tape.leaf(Tensor::from_rows(&[vec![0.3, -0.2], vec![0.3, -0.2]]).unwrap());
        let arcs = [(1, 0), (2, 0)];
        let center = vec![0.1, 0.2];
        let ha = Tensor::from_rows(&[center.clone(), vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let hb = Tensor::from_rows(&[center, vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let ha = layer.tape.leaf(ha);
        let hb = layer.tape.leaf(hb);
        let oa = expc_layer(&mut layer.tape, ha, &arcs, e, &layer.p).unwrap();
        let ob = expc_layer(&mut layer.tape, hb, &arcs, e, &layer.p).unwrap();
        let diff: f64 = layer
            .tape
            .value(oa)
            .row(0)
            .iter()
            .zip(layer.tape.value(ob).row(0))
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6, "outputs coincide: {diff}");
    }

    #[test]
    fn readout_sums_states() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap());
        let w = tape.leaf(Tensor::from_rows(&[vec![-1.0, 2.0, -0.5]]).unwrap());
        let one = virtual_readout(&mut tape, &[v]).unwrap();
        assert_eq!(tape.value(one), tape.value(v));
        let zero = virtual_readout(&mut tape, &[v, w]).unwrap();
        assert_eq!(tape.value(zero).data(), &[0.0, 0.0, 0.0]);
        assert!(virtual_readout(&mut tape, &[]).is_err());
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = ExpCConfig {
            n_layers: 1,
            hidden_dim: 8,
            expanded_dim: 4,
            dropout: 0.0,
            schema: Schema::ogb(),
        };
        assert!(matches!(ExpC::new(cfg), Err(ModelError::Config(_))));
    }
}
