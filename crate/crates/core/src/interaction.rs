//! Interaction-level message passing over the graph whose nodes are
//! molecules: multi-head graph attention for untyped graphs, an
//! edge-aggregation network for relation-typed graphs, and a plain
//! normalised graph convolution used by the no-attention ablation.

use std::collections::HashSet;
use std::io::BufRead;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::mol_encoder::Activation;
use crate::params::{Ctx, ParamId, ParamStore};
use crate::tensor::{Result, TensorError, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

/// An undirected interaction, optionally typed by a relation id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Link {
    pub i: usize,
    pub j: usize,
    pub rel: Option<usize>,
}

impl Link {
    pub fn untyped(i: usize, j: usize) -> Self {
        Self { i, j, rel: None }
    }

    pub fn typed(i: usize, rel: usize, j: usize) -> Self {
        Self {
            i,
            j,
            rel: Some(rel),
        }
    }

    /// Orientation-free key.
    pub fn key(&self) -> (usize, usize, Option<usize>) {
        (self.i.min(self.j), self.i.max(self.j), self.rel)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("edge ({i}, {j}) references a node outside 0..{n}")]
    NodeOutOfRange { i: usize, j: usize, n: usize },
    #[error("edge ({i}, {j}) is a self-edge")]
    SelfEdge { i: usize, j: usize },
    #[error("edge ({i}, {j}) has unknown relation {rel} (relation count {count})")]
    UnknownRelation {
        i: usize,
        j: usize,
        rel: usize,
        count: usize,
    },
}

/// Counts how often message passing touches a watched set of links.
/// An arc counts when the graph holds a watched link between its ends.
#[derive(Debug, Default)]
pub struct EdgeAudit {
    watched: HashSet<(usize, usize, Option<usize>)>,
    reads: AtomicUsize,
}

impl EdgeAudit {
    pub fn new(watched: impl IntoIterator<Item = Link>) -> Self {
        Self {
            watched: watched.into_iter().map(|l| l.key()).collect(),
            reads: AtomicUsize::new(0),
        }
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }
}

/// Directed arcs prepared for one kind of aggregation.
#[derive(Debug, Clone)]
struct Arcs {
    dst: Arc<[usize]>,
    src: Arc<[usize]>,
}

/// Molecule-level interaction graph. Undirected edges are stored once and
/// expanded into both arcs for aggregation.
#[derive(Debug, Clone)]
pub struct InteractionGraph {
    n: usize,
    edges: Vec<Link>,
    relation_count: usize,
    arcs: Arcs,
    arc_rel: Arc<[usize]>,
    /// Arcs plus a self-arc for every isolated node.
    gat_arcs: Arcs,
    /// Arcs plus self-arcs everywhere, with symmetric-normalised weights.
    gcn_arcs: Arcs,
    gcn_weights: Arc<[f64]>,
    audit: Option<(Arc<EdgeAudit>, HashSet<(usize, usize)>)>,
}

impl InteractionGraph {
    /// Builds a graph over `n` nodes. Duplicate undirected edges are
    /// merged; `relation_count` is 0 for untyped graphs.
    pub fn new(n: usize, edges: &[Link], relation_count: usize) -> Result<Self, GraphError> {
        let mut seen = HashSet::new();
        let mut kept = Vec::with_capacity(edges.len());
        for e in edges {
            if e.i >= n || e.j >= n {
                return Err(GraphError::NodeOutOfRange { i: e.i, j: e.j, n });
            }
            if e.i == e.j {
                return Err(GraphError::SelfEdge { i: e.i, j: e.j });
            }
            if let Some(rel) = e.rel {
                if rel >= relation_count {
                    return Err(GraphError::UnknownRelation {
                        i: e.i,
                        j: e.j,
                        rel,
                        count: relation_count,
                    });
                }
            }
            if seen.insert(e.key()) {
                kept.push(*e);
            }
        }

        let mut dst = Vec::with_capacity(2 * kept.len());
        let mut src = Vec::with_capacity(2 * kept.len());
        let mut rel = Vec::with_capacity(2 * kept.len());
        for e in &kept {
            for (a, b) in [(e.i, e.j), (e.j, e.i)] {
                dst.push(a);
                src.push(b);
                rel.push(e.rel.unwrap_or(0));
            }
        }

        let mut has_nb = vec![false; n];
        dst.iter().for_each(|&d| has_nb[d] = true);
        let (mut gdst, mut gsrc) = (dst.clone(), src.clone());
        for (i, _) in has_nb.iter().enumerate().filter(|(_, h)| !**h) {
            gdst.push(i);
            gsrc.push(i);
        }

        // Untyped multi-relation duplicates collapse to one neighbour for
        // the convolution.
        let pairs: HashSet<(usize, usize)> =
            kept.iter().map(|e| (e.i.min(e.j), e.i.max(e.j))).collect();
        let mut pairs: Vec<_> = pairs.into_iter().collect();
        pairs.sort_unstable();
        let mut deg = vec![1.0f64; n];
        for &(a, b) in &pairs {
            deg[a] += 1.0;
            deg[b] += 1.0;
        }
        let (mut cdst, mut csrc, mut cw) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..n {
            cdst.push(i);
            csrc.push(i);
            cw.push(1.0 / deg[i]);
        }
        for &(a, b) in &pairs {
            let w = 1.0 / (deg[a] * deg[b]).sqrt();
            cdst.extend([a, b]);
            csrc.extend([b, a]);
            cw.extend([w, w]);
        }

        Ok(Self {
            n,
            edges: kept,
            relation_count,
            arcs: Arcs {
                dst: dst.into(),
                src: src.into(),
            },
            arc_rel: rel.into(),
            gat_arcs: Arcs {
                dst: gdst.into(),
                src: gsrc.into(),
            },
            gcn_arcs: Arcs {
                dst: cdst.into(),
                src: csrc.into(),
            },
            gcn_weights: cw.into(),
            audit: None,
        })
    }

    /// Attaches an audit that counts reads of the watched edges.
    pub fn with_audit(mut self, audit: Arc<EdgeAudit>) -> Self {
        let leaked = self
            .edges
            .iter()
            .filter(|e| audit.watched.contains(&e.key()))
            .map(|e| (e.i.min(e.j), e.i.max(e.j)))
            .collect();
        self.audit = Some((audit, leaked));
        self
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[Link] {
        &self.edges
    }

    pub fn relation_count(&self) -> usize {
        self.relation_count
    }

    pub fn degree(&self, i: usize) -> usize {
        self.arcs.dst.iter().filter(|&&d| d == i).count()
    }

    fn record(&self, dst: &[usize], src: &[usize]) {
        if let Some((audit, leaked)) = &self.audit {
            if leaked.is_empty() {
                return;
            }
            let hits = dst
                .iter()
                .zip(src)
                .filter(|(a, b)| leaked.contains(&((**a).min(**b), (**a).max(**b))))
                .count();
            audit.reads.fetch_add(hits, Ordering::Relaxed);
        }
    }

    fn read_arcs(&self) -> &Arcs {
        self.record(&self.arcs.dst, &self.arcs.src);
        &self.arcs
    }

    fn read_gat_arcs(&self) -> &Arcs {
        self.record(&self.gat_arcs.dst, &self.gat_arcs.src);
        &self.gat_arcs
    }

    fn read_gcn_arcs(&self) -> &Arcs {
        self.record(&self.gcn_arcs.dst, &self.gcn_arcs.src);
        &self.gcn_arcs
    }
}

/// Multi-head graph attention layer.
#[derive(Debug, Clone)]
pub struct GatLayer {
    /// Per head: (`W_κ`, `d_in × d_head`) and (`a`, `2·d_head × 1`).
    pub heads: Vec<(ParamId, ParamId)>,
    pub d_head: usize,
    pub activation: Activation,
}

impl GatLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        heads: usize,
        d_head: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads >= 1 && d_head >= 1);
        let heads = (0..heads)
            .map(|k| {
                let w = store.add_glorot(format!("{name}.head{k}.weight"), d_in, d_head, rng);
                let a = store.add_glorot(format!("{name}.head{k}.attn"), 2 * d_head, 1, rng);
                (w, a)
            })
            .collect();
        Self {
            heads,
            d_head,
            activation: Activation::Elu,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.heads.len() * self.d_head
    }

    /// Transformed features and per-arc attention of head `k` over `arcs`.
    fn head(&self, ctx: &mut Ctx, k: usize, arcs: &Arcs, n: usize, x: Var) -> Result<(Var, Var)> {
        let (w, a) = self.heads[k];
        let w = ctx.param(w);
        let a = ctx.param(a);
        let h = ctx.g.matmul(x, w)?;
        let a_dst = ctx.g.slice_rows(a, 0, self.d_head)?;
        let a_src = ctx.g.slice_rows(a, self.d_head, 2 * self.d_head)?;
        let e_dst = ctx.g.matmul(h, a_dst)?;
        let e_src = ctx.g.matmul(h, a_src)?;
        let l_dst = ctx.g.gather_rows(e_dst, arcs.dst.clone())?;
        let l_src = ctx.g.gather_rows(e_src, arcs.src.clone())?;
        let logits = ctx.g.add(l_dst, l_src)?;
        let logits = ctx.g.leaky_relu(logits, LEAKY_SLOPE);
        let alpha = ctx.g.softmax_by_assignment(logits, arcs.dst.clone(), n)?;
        Ok((h, alpha))
    }

    /// Attention coefficient of every arc (`target ← neighbour`) of head
    /// `k`, in the graph's arc order, together with the arc endpoints.
    pub fn attention_coefficients(
        &self,
        ctx: &mut Ctx,
        k: usize,
        graph: &InteractionGraph,
        x: Var,
    ) -> Result<(Var, Vec<(usize, usize)>)> {
        let arcs = graph.read_gat_arcs().clone();
        let (_, alpha) = self.head(ctx, k, &arcs, graph.n, x)?;
        let pairs = arcs
            .dst
            .iter()
            .copied()
            .zip(arcs.src.iter().copied())
            .collect();
        Ok((alpha, pairs))
    }

    pub fn forward(&self, ctx: &mut Ctx, graph: &InteractionGraph, x: Var) -> Result<Var> {
        let arcs = graph.read_gat_arcs().clone();
        let mut outs = Vec::with_capacity(self.heads.len());
        for k in 0..self.heads.len() {
            let (h, alpha) = self.head(ctx, k, &arcs, graph.n, x)?;
            let nb = ctx.g.gather_rows(h, arcs.src.clone())?;
            let msg = ctx.g.row_scale(nb, alpha)?;
            let agg = ctx.g.scatter_add_rows(msg, arcs.dst.clone(), graph.n)?;
            outs.push(self.activation.apply(ctx, agg));
        }
        ctx.g.concat_cols(&outs)
    }
}

/// Edge-aggregation layer: `σ(W x_i + Σ_r Σ_j x_j · τ(e_r))`, with the
/// scalar `τ` produced by a two-layer MLP shared across relations.
#[derive(Debug, Clone)]
pub struct EdgeAggLayer {
    pub weight: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub activation: Activation,
}

impl EdgeAggLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        se_dim: usize,
        mlp_hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add_glorot(format!("{name}.weight"), d, d, rng),
            mlp_w1: store.add_glorot(format!("{name}.edge_mlp.w1"), se_dim, mlp_hidden, rng),
            mlp_b1: store.add_zeros(format!("{name}.edge_mlp.b1"), &[1, mlp_hidden]),
            mlp_w2: store.add_glorot(format!("{name}.edge_mlp.w2"), mlp_hidden, 1, rng),
            mlp_b2: store.add_zeros(format!("{name}.edge_mlp.b2"), &[1, 1]),
            activation: Activation::Relu,
        }
    }

    /// `τ` for each row of `se` (`k × h`), giving `k × 1`.
    pub fn edge_scalar(&self, ctx: &mut Ctx, se: Var) -> Result<Var> {
        let k = ctx.g.shape(se)[0];
        let ones = ctx.g.constant(crate::tensor::Tensor::ones(&[k, 1]));
        let (w1, b1, w2, b2) = (
            ctx.param(self.mlp_w1),
            ctx.param(self.mlp_b1),
            ctx.param(self.mlp_w2),
            ctx.param(self.mlp_b2),
        );
        let h = ctx.g.matmul(se, w1)?;
        let bias1 = ctx.g.matmul(ones, b1)?;
        let h = ctx.g.add(h, bias1)?;
        let h = ctx.g.relu(h);
        let t = ctx.g.matmul(h, w2)?;
        let bias2 = ctx.g.matmul(ones, b2)?;
        ctx.g.add(t, bias2)
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx,
        graph: &InteractionGraph,
        x: Var,
        se_table: Var,
    ) -> Result<Var> {
        let rows = ctx.g.shape(se_table)[0];
        if graph.relation_count > rows {
            return Err(TensorError::Contract(format!(
                "graph has {} relations but the side-effect table has {rows} rows",
                graph.relation_count
            )));
        }
        let w = ctx.param(self.weight);
        let own = ctx.g.matmul(x, w)?;
        let arcs = graph.read_arcs().clone();
        let pre = if arcs.dst.is_empty() {
            own
        } else {
            let tau_rel = self.edge_scalar(ctx, se_table)?;
            let tau = ctx.g.gather_rows(tau_rel, graph.arc_rel.clone())?;
            let nb = ctx.g.gather_rows(x, arcs.src.clone())?;
            let msg = ctx.g.row_scale(nb, tau)?;
            let agg = ctx.g.scatter_add_rows(msg, arcs.dst.clone(), graph.n)?;
            ctx.g.add(own, agg)?
        };
        Ok(self.activation.apply(ctx, pre))
    }
}

/// `σ(Â X W)` over the interaction graph with self-loops.
#[derive(Debug, Clone)]
pub struct GcnInteractionLayer {
    pub weight: ParamId,
    pub activation: Activation,
}

impl GcnInteractionLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add_glorot(format!("{name}.weight"), d_in, d_out, rng),
            activation: Activation::Elu,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, graph: &InteractionGraph, x: Var) -> Result<Var> {
        let arcs = graph.read_gcn_arcs().clone();
        let weights = crate::tensor::Tensor::column(graph.gcn_weights.to_vec())?;
        let wv = ctx.g.constant(weights);
        let nb = ctx.g.gather_rows(x, arcs.src.clone())?;
        let msg = ctx.g.row_scale(nb, wv)?;
        let agg = ctx.g.scatter_add_rows(msg, arcs.dst.clone(), graph.n)?;
        let w = ctx.param(self.weight);
        let h = ctx.g.matmul(agg, w)?;
        Ok(self.activation.apply(ctx, h))
    }
}

#[derive(Debug, Clone)]
pub enum InteractionLayer {
    Gat(GatLayer),
    EdgeAgg(EdgeAggLayer),
    Gcn(GcnInteractionLayer),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackKind {
    Gat,
    EdgeAgg,
    Gcn,
}

/// Learnable side-effect embeddings, `R × h`.
#[derive(Debug, Clone)]
pub struct SideEffectTable {
    pub embeddings: ParamId,
    pub relations: usize,
    pub dim: usize,
}

impl SideEffectTable {
    pub fn new<R: Rng>(store: &mut ParamStore, relations: usize, dim: usize, rng: &mut R) -> Self {
        let embeddings = store.add_normal(
            "side_effects",
            &[relations.max(1), dim],
            1.0 / (dim as f64).sqrt(),
            rng,
        );
        Self {
            embeddings,
            relations,
            dim,
        }
    }

    /// Replaces rows with externally supplied vectors.
    pub fn apply_override(
        &self,
        store: &mut ParamStore,
        vectors: &[(usize, Vec<f64>)],
    ) -> Result<(), SideEffectFileError> {
        for (rel, v) in vectors {
            if *rel >= self.relations {
                return Err(SideEffectFileError::UnknownRelation(*rel));
            }
            if v.len() != self.dim {
                return Err(SideEffectFileError::Width {
                    relation: *rel,
                    expected: self.dim,
                    got: v.len(),
                });
            }
            let t = store.get_mut(self.embeddings);
            t.data_mut()[rel * self.dim..(rel + 1) * self.dim].copy_from_slice(v);
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SideEffectFileError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("relation {0} is outside the side-effect table")]
    UnknownRelation(usize),
    #[error("relation `{0}` is neither a known relation name nor an index")]
    UnknownName(String),
    #[error("relation {relation}: expected {expected} values, got {got}")]
    Width {
        relation: usize,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reads `relation_id<TAB>v1 v2 ... vh` lines. Ids are kept as written;
/// see [`resolve_relations`].
pub fn read_side_effect_vectors<R: BufRead>(
    reader: R,
) -> Result<Vec<(String, Vec<f64>)>, SideEffectFileError> {
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |reason: &str| SideEffectFileError::Malformed {
            line: k + 1,
            reason: reason.to_string(),
        };
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| malformed("missing tab"))?;
        let id = id.trim();
        if id.is_empty() {
            return Err(malformed("empty relation id"));
        }
        let v = rest
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| malformed("bad number"))?;
        out.push((id.to_string(), v));
    }
    Ok(out)
}

/// Maps file ids to dense relation ids: a relation name from `names`
/// first, otherwise a plain index.
pub fn resolve_relations(
    vectors: Vec<(String, Vec<f64>)>,
    names: &[String],
) -> Result<Vec<(usize, Vec<f64>)>, SideEffectFileError> {
    vectors
        .into_iter()
        .map(|(id, v)| {
            let rel = names
                .iter()
                .position(|n| *n == id)
                .or_else(|| id.parse().ok())
                .ok_or(SideEffectFileError::UnknownName(id))?;
            Ok((rel, v))
        })
        .collect()
}

/// Stacked interaction layers.
#[derive(Debug, Clone)]
pub struct InteractionStack {
    pub kind: StackKind,
    pub layers: Vec<InteractionLayer>,
}

impl InteractionStack {
    /// `n_layers` layers mapping `d_in` to `d_out`. Attention layers use
    /// `heads` heads of width `d_out / heads`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        kind: StackKind,
        n_layers: usize,
        d_in: usize,
        d_out: usize,
        heads: usize,
        se_dim: usize,
        rng: &mut R,
    ) -> Self {
        assert!(n_layers >= 1);
        let layers = (0..n_layers)
            .map(|l| {
                let name = format!("inter.layer{l}");
                let din = if l == 0 { d_in } else { d_out };
                match kind {
                    StackKind::Gat => {
                        assert_eq!(d_out % heads, 0, "output width must divide by head count");
                        InteractionLayer::Gat(GatLayer::new(
                            store,
                            &name,
                            din,
                            heads,
                            d_out / heads,
                            rng,
                        ))
                    }
                    StackKind::EdgeAgg => {
                        assert_eq!(din, d_out, "edge aggregation keeps the width");
                        InteractionLayer::EdgeAgg(EdgeAggLayer::new(
                            store, &name, d_out, se_dim, 64, rng,
                        ))
                    }
                    StackKind::Gcn => InteractionLayer::Gcn(GcnInteractionLayer::new(
                        store, &name, din, d_out, rng,
                    )),
                }
            })
            .collect();
        Self { kind, layers }
    }

    /// Final node representations, one row per node.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        graph: &InteractionGraph,
        x: Var,
        se_table: Option<Var>,
    ) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                InteractionLayer::Gat(l) => l.forward(ctx, graph, h)?,
                InteractionLayer::Gcn(l) => l.forward(ctx, graph, h)?,
                InteractionLayer::EdgeAgg(l) => {
                    let se = se_table.ok_or_else(|| {
                        TensorError::Contract("edge aggregation needs a side-effect table".into())
                    })?;
                    l.forward(ctx, graph, h, se)?
                }
            };
        }
        Ok(h)
    }
}
