//! Graph transformer whose attention logits are biased by per-head projections
//! of RBF-expanded interatomic distances.
//!
//! Layout of one forward pass over a graph with `n` atoms:
//!
//! 1. Atom input: sum of per-column categorical embeddings plus an in-degree
//!    (centrality) embedding. A learned graph token is prepended as row 0.
//! 2. Each of `n_layers` pre-norm blocks runs multi-head attention with logits
//!    `QKᵀ/√head_dim + spatial + edge`, where `spatial[h][i][j]` projects the
//!    RBF expansion of `d(i, j)` onto head `h`, `edge` is non-zero only at
//!    bonded pairs and projects the RBF expansion of the bond's own length
//!    (plus categorical bond embeddings), and the token-atom entries of the
//!    graph-token row and column share a learned per-head scalar (the token's
//!    self-pair is unbiased). A GELU feed-forward block
//!    follows. Both branches are residual.
//! 3. A final layer norm, then a linear head on the graph-token state.
//!
//! Parameter count, with `V_a`/`V_b` the summed atom/bond vocabularies, `D`
//! the degree buckets, `K` kernels, `H` heads, `d` hidden and `f` FFN width:
//!
//! ```text
//! d (V_a + D + 1)                                  embeddings + graph token
//! + L [ 4d² + 3d + 2df + f + d + 4d                attention, FFN, norms
//!       + S + K H + H V_b + H ]                    spatial, edge, token bias
//! + 2d + d + 1                                     final norm + head
//! ```
//!
//! where `S = K H + H` for Euclidean RBF and `S = (max_hop + 2) H` for hops.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::featurize::{rbf_rows, RbfConfig, SpatialMode};
use crate::graph::Schema;
use crate::model::{embed_columns, ensure_finite, GraphInput, Init, Mode, ModelError, ParamSpec, Regressor};
use crate::params::ParamVars;
use crate::seed::mix_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphormerConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_dropout: f64,
    pub attn_dropout: f64,
    pub embed_dropout: f64,
    pub rbf: RbfConfig,
    pub spatial_mode: SpatialMode,
    /// Hop counts clamp here in `hop` mode; one extra bucket marks unreachable.
    pub max_hop: u32,
    pub degree_buckets: usize,
    pub schema: Schema,
}

impl GraphormerConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.n_heads * self.head_dim != self.hidden_dim {
            return err(format!(
                "n_heads {} × head_dim {} != hidden_dim {}",
                self.n_heads, self.head_dim, self.hidden_dim
            ));
        }
        if self.hidden_dim == 0 || self.ffn_dim == 0 || self.n_heads == 0 || self.degree_buckets == 0 {
            return err("dimensions must be positive".into());
        }
        for (name, p) in [
            ("ffn_dropout", self.ffn_dropout),
            ("attn_dropout", self.attn_dropout),
            ("embed_dropout", self.embed_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return err(format!("{name} {p} outside [0, 1)"));
            }
        }
        self.rbf.validate()?;
        Ok(())
    }
}

/// Per-head additive attention bias over atom pairs, indexed `[head][i][j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialBias {
    pub n_heads: usize,
    pub n: usize,
    pub data: Vec<f64>,
}

impl SpatialBias {
    pub fn get(&self, h: usize, i: usize, j: usize) -> f64 {
        self.data[(h * self.n + i) * self.n + j]
    }

    /// `bias[h][i][j] = ⟨proj[:, h], pair_rbf[i][j]⟩ + offset[h]`.
    ///
    /// `pair_rbf` is `n × n × K` row-major and `proj` is `K × H` row-major.
    pub fn from_rbf(
        pair_rbf: &[f64],
        n: usize,
        k: usize,
        proj: &[f64],
        offset: &[f64],
    ) -> Result<Self, ModelError> {
        if pair_rbf.len() != n * n * k {
            return Err(ModelError::Input(format!(
                "pair_rbf has {} values, expected {n}×{n}×{k}",
                pair_rbf.len()
            )));
        }
        let h_count = offset.len();
        if proj.len() != k * h_count {
            return Err(ModelError::Input(format!(
                "projection has {} values, expected {k}×{h_count}",
                proj.len()
            )));
        }
        let mut data = vec![0.0; h_count * n * n];
        for h in 0..h_count {
            for i in 0..n {
                for j in 0..n {
                    let phi = &pair_rbf[(i * n + j) * k..(i * n + j + 1) * k];
                    let dot: f64 = phi.iter().enumerate().map(|(c, v)| v * proj[c * h_count + h]).sum();
                    data[(h * n + i) * n + j] = dot + offset[h];
                }
            }
        }
        Ok(Self {
            n_heads: h_count,
            n,
            data,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Graphormer {
    cfg: GraphormerConfig,
}

/// Post-softmax attention matrices recorded during a forward pass, one per
/// (layer, head) in that order.
#[derive(Debug, Default)]
pub struct AttentionTrace {
    pub attention: Vec<Var>,
}

impl Graphormer {
    pub fn new(cfg: GraphormerConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &GraphormerConfig {
        &self.cfg
    }

    fn spatial_width(&self) -> usize {
        match self.cfg.spatial_mode {
            SpatialMode::EuclideanRbf => self.cfg.rbf.n_kernels,
            SpatialMode::Hop => self.cfg.max_hop as usize + 2,
        }
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        params: &ParamVars<'_>,
        input: GraphInput<'_>,
        mode: Mode,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Var, ModelError> {
        let cfg = &self.cfg;
        let g = input.graph;
        let n = g.n_atoms();
        let t = n + 1;
        let heads = cfg.n_heads;
        let hd = cfg.head_dim;
        let train = mode.is_train();
        let seed = mode.seed();

        if g.node_feat.first().map_or(0, Vec::len) != cfg.schema.n_atom_fields() {
            return Err(ModelError::Input("atom feature columns differ from schema".into()));
        }
        if input.bond_dist.len() != g.arcs.len() {
            return Err(ModelError::Input("bond_dist not aligned with arcs".into()));
        }

        // inputs
        let atoms = embed_columns(tape, params, "atom_emb", &g.node_feat, cfg.schema.n_atom_fields())?
            .ok_or_else(|| ModelError::Config("schema has no atom columns".into()))?;
        let deg_idx: Vec<usize> = g.in_degree.iter().map(|&d| d.min(cfg.degree_buckets - 1)).collect();
        let deg = tape.gather_rows(params.get("degree_emb")?, &deg_idx)?;
        let atoms = tape.add(atoms, deg)?;
        let mut x = tape.concat(&[params.get("graph_token")?, atoms], 0)?;
        x = tape.dropout(x, cfg.embed_dropout, train, mix_seed(&[seed, 0, 0]))?;

        // constant pair inputs
        let spatial_in = match cfg.spatial_mode {
            SpatialMode::EuclideanRbf => {
                if g.spatial_mode != SpatialMode::EuclideanRbf || g.n_kernels != cfg.rbf.n_kernels {
                    return Err(ModelError::Input(format!(
                        "graph featurized as {} with {} kernels; model expects euclidean-rbf with {}",
                        g.spatial_mode, g.n_kernels, cfg.rbf.n_kernels
                    )));
                }
                let pair = Tensor::from_vec(&[n * n, cfg.rbf.n_kernels], g.pair_rbf.clone())?;
                Some(tape.leaf(pair))
            }
            SpatialMode::Hop => None,
        };
        let hop_idx: Vec<usize> = match cfg.spatial_mode {
            SpatialMode::Hop => (0..n * n).map(|p| g.hop.bucket(p / n, p % n, cfg.max_hop)).collect(),
            SpatialMode::EuclideanRbf => Vec::new(),
        };
        let arc_pairs: Vec<usize> = g.arcs.iter().map(|&(u, v)| u * n + v).collect();
        let edge_rbf = Tensor::from_vec(
            &[g.arcs.len(), cfg.rbf.n_kernels],
            rbf_rows(input.bond_dist, &cfg.rbf)?,
        )?;
        let edge_rbf = tape.leaf(edge_rbf);
        let scale = 1.0 / (hd as f64).sqrt();

        for l in 0..cfg.n_layers {
            let p = |name: &str| params.get(&format!("layer{l}.{name}"));

            let spatial = match spatial_in {
                Some(pair) => {
                    let s = tape.matmul(pair, p("spatial.proj")?)?;
                    tape.add_row(s, p("spatial.offset")?)?
                }
                None => tape.gather_rows(p("spatial.hop_emb")?, &hop_idx)?,
            };
            let mut edge = tape.matmul(edge_rbf, p("edge.proj")?)?;
            if let Some(cat) = embed_columns(
                tape,
                params,
                &format!("layer{l}.edge.bond_emb"),
                &g.edge_feat,
                cfg.schema.n_bond_fields(),
            )? {
                edge = tape.add(edge, cat)?;
            }
            let edge = tape.scatter_add_rows(edge, &arc_pairs, n * n)?;
            let bias = tape.add(spatial, edge)?;
            let token_bias = tape.reshape(p("token_bias")?, &[1, heads])?;

            // attention
            let h = tape.layer_norm(x, p("ln1.gamma")?, p("ln1.beta")?)?;
            let proj = |tape: &mut Tape, w: &str, b: &str| -> Result<Var, ModelError> {
                let y = tape.matmul(h, p(w)?)?;
                Ok(tape.add_row(y, p(b)?)?)
            };
            let q = proj(tape, "attn.wq", "attn.bq")?;
            // no key bias: it shifts each logit row by a constant
            let k = tape.matmul(h, p("attn.wk")?)?;
            let v = proj(tape, "attn.wv", "attn.bv")?;
            let mut head_out = Vec::with_capacity(heads);
            for hh in 0..heads {
                let qh = tape.slice_cols(q, hh * hd, hd)?;
                let kh = tape.slice_cols(k, hh * hd, hd)?;
                let vh = tape.slice_cols(v, hh * hd, hd)?;
                let kt = tape.transpose(kh)?;
                let logits = tape.matmul(qh, kt)?;
                let logits = tape.scale(logits, scale);
                let bh = tape.slice_cols(bias, hh, 1)?;
                let bh = tape.reshape(bh, &[n, n])?;
                let th = tape.slice_cols(token_bias, hh, 1)?;
                let full = tape.pad_border(bh, th)?;
                let logits = tape.add(logits, full)?;
                let attn = tape.softmax(logits)?;
                if let Some(tr) = trace.as_deref_mut() {
                    tr.attention.push(attn);
                }
                let attn = tape.dropout(
                    attn,
                    cfg.attn_dropout,
                    train,
                    mix_seed(&[seed, l as u64 + 1, 1, hh as u64]),
                )?;
                head_out.push(tape.matmul(attn, vh)?);
            }
            let heads_cat = tape.concat(&head_out, 1)?;
            let o = tape.matmul(heads_cat, p("attn.wo")?)?;
            let o = tape.add_row(o, p("attn.bo")?)?;
            let o = tape.dropout(o, cfg.ffn_dropout, train, mix_seed(&[seed, l as u64 + 1, 2]))?;
            x = tape.add(x, o)?;

            // feed-forward
            let h2 = tape.layer_norm(x, p("ln2.gamma")?, p("ln2.beta")?)?;
            let f = tape.matmul(h2, p("ffn.w1")?)?;
            let f = tape.add_row(f, p("ffn.b1")?)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, p("ffn.w2")?)?;
            let f = tape.add_row(f, p("ffn.b2")?)?;
            let f = tape.dropout(f, cfg.ffn_dropout, train, mix_seed(&[seed, l as u64 + 1, 3]))?;
            x = tape.add(x, f)?;
            ensure_finite(tape, x, l)?;
            debug_assert_eq!(tape.value(x).shape(), &[t, cfg.hidden_dim]);
        }

        let x = tape.layer_norm(x, params.get("final_ln.gamma")?, params.get("final_ln.beta")?)?;
        let token = tape.gather_rows(x, &[0])?;
        let y = tape.matmul(token, params.get("head.w")?)?;
        let y = tape.add_row(y, params.get("head.b")?)?;
        ensure_finite(tape, y, cfg.n_layers)?;
        Ok(y)
    }
}

impl Regressor for Graphormer {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let cfg = &self.cfg;
        let d = cfg.hidden_dim;
        let f = cfg.ffn_dim;
        let h = cfg.n_heads;
        let k = cfg.rbf.n_kernels;
        let mut specs = Vec::new();
        for (c, &v) in cfg.schema.atom_vocab.iter().enumerate() {
            specs.push(ParamSpec::new(format!("atom_emb.{c}"), &[v, d], Init::Embedding));
        }
        specs.push(ParamSpec::new("degree_emb", &[cfg.degree_buckets, d], Init::Embedding));
        specs.push(ParamSpec::new("graph_token", &[1, d], Init::Embedding));
        for l in 0..cfg.n_layers {
            let name = |s: &str| format!("layer{l}.{s}");
            specs.push(ParamSpec::new(name("ln1.gamma"), &[d], Init::Ones));
            specs.push(ParamSpec::new(name("ln1.beta"), &[d], Init::Zeros));
            for w in ["q", "k", "v", "o"] {
                specs.push(ParamSpec::new(name(&format!("attn.w{w}")), &[d, d], Init::FanIn));
                if w != "k" {
                    specs.push(ParamSpec::new(name(&format!("attn.b{w}")), &[d], Init::Zeros));
                }
            }
            specs.push(ParamSpec::new(name("ln2.gamma"), &[d], Init::Ones));
            specs.push(ParamSpec::new(name("ln2.beta"), &[d], Init::Zeros));
            specs.push(ParamSpec::new(name("ffn.w1"), &[d, f], Init::FanIn));
            specs.push(ParamSpec::new(name("ffn.b1"), &[f], Init::Zeros));
            specs.push(ParamSpec::new(name("ffn.w2"), &[f, d], Init::FanIn));
            specs.push(ParamSpec::new(name("ffn.b2"), &[d], Init::Zeros));
            match cfg.spatial_mode {
                SpatialMode::EuclideanRbf => {
                    specs.push(ParamSpec::new(name("spatial.proj"), &[k, h], Init::FanIn));
                    specs.push(ParamSpec::new(name("spatial.offset"), &[h], Init::Zeros));
                }
                SpatialMode::Hop => {
                    specs.push(ParamSpec::new(name("spatial.hop_emb"), &[self.spatial_width(), h], Init::Embedding));
                }
            }
            specs.push(ParamSpec::new(name("edge.proj"), &[k, h], Init::FanIn));
            for (c, &v) in cfg.schema.bond_vocab.iter().enumerate() {
                specs.push(ParamSpec::new(name(&format!("edge.bond_emb.{c}")), &[v, h], Init::Embedding));
            }
            specs.push(ParamSpec::new(name("token_bias"), &[h], Init::Zeros));
        }
        specs.push(ParamSpec::new("final_ln.gamma", &[d], Init::Ones));
        specs.push(ParamSpec::new("final_ln.beta", &[d], Init::Zeros));
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
        self.forward_traced(tape, params, input, mode, None)
    }

    fn uses_bond_augmentation(&self) -> bool {
        true
    }
}

/// Exact parameter count of a configuration, without allocating it.
pub fn count_parameters(cfg: &GraphormerConfig) -> Result<usize, ModelError> {
    Ok(Graphormer::new(cfg.clone())?.param_count())
}
