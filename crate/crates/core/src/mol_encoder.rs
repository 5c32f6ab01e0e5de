//! Molecule-level encoder: stacked graph convolutions, each followed by
//! self-attention top-k pooling and a mean ∥ sum readout. The readouts of
//! all blocks are concatenated and projected to the molecule embedding.

use rand::Rng;

use crate::chem::{MoleculeGraph, FEATURE_DIM};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::tensor::{Result, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
    Elu,
}

impl Activation {
    pub fn apply(self, ctx: &mut Ctx, x: Var) -> Var {
        match self {
            Activation::Linear => x,
            Activation::Relu => ctx.g.relu(x),
            Activation::Tanh => ctx.g.tanh(x),
            Activation::Elu => ctx.g.elu(x),
        }
    }
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` for a symmetric non-negative `A`.
pub fn normalized_adjacency(adj: &Tensor) -> Tensor {
    let n = adj.rows();
    let mut out = adj.clone();
    let d = out.data_mut();
    for i in 0..n {
        d[i * n + i] += 1.0;
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / d[i * n..(i + 1) * n].iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..n {
        for j in 0..n {
            d[i * n + j] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct GcnLayer {
    pub weight: ParamId,
    pub activation: Activation,
}

impl GcnLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add_glorot(format!("{name}.weight"), d_in, d_out, rng),
            activation: Activation::Relu,
        }
    }

    /// `σ(Â M W)` with `Â` the normalised self-looped adjacency of `adj`.
    pub fn forward(&self, ctx: &mut Ctx, adj: &Tensor, m: Var) -> Result<Var> {
        let a_hat = ctx.g.constant(normalized_adjacency(adj));
        self.forward_normalized(ctx, a_hat, m)
    }

    pub(crate) fn forward_normalized(&self, ctx: &mut Ctx, a_hat: Var, m: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let am = ctx.g.matmul(a_hat, m)?;
        let h = ctx.g.matmul(am, w)?;
        Ok(self.activation.apply(ctx, h))
    }
}

#[derive(Debug, Clone)]
pub struct SagPoolLayer {
    pub w_att: ParamId,
    pub gamma: f64,
    pub activation: Activation,
}

impl SagPoolLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        gamma: f64,
        rng: &mut R,
    ) -> Self {
        assert!(
            gamma > 0.0 && gamma <= 1.0,
            "pooling ratio must lie in (0, 1]"
        );
        Self {
            w_att: store.add_glorot(format!("{name}.w_att"), d, 1, rng),
            gamma,
            activation: Activation::Tanh,
        }
    }

    /// One attention score per atom, `n × 1`.
    pub fn attention_scores(&self, ctx: &mut Ctx, adj: &Tensor, m: Var) -> Result<Var> {
        let a_hat = ctx.g.constant(normalized_adjacency(adj));
        self.scores_normalized(ctx, a_hat, m)
    }

    fn scores_normalized(&self, ctx: &mut Ctx, a_hat: Var, m: Var) -> Result<Var> {
        let w = ctx.param(self.w_att);
        let am = ctx.g.matmul(a_hat, m)?;
        let s = ctx.g.matmul(am, w)?;
        Ok(self.activation.apply(ctx, s))
    }

    /// Keeps the top `⌈γn⌉` rows of `m`, each gated by its score.
    pub fn pool(&self, ctx: &mut Ctx, adj: &Tensor, m: Var) -> Result<(Var, Vec<usize>)> {
        let a_hat = ctx.g.constant(normalized_adjacency(adj));
        self.pool_normalized(ctx, a_hat, m)
    }

    fn pool_normalized(&self, ctx: &mut Ctx, a_hat: Var, m: Var) -> Result<(Var, Vec<usize>)> {
        let s = self.scores_normalized(ctx, a_hat, m)?;
        let idx = top_select(ctx.g.value(s).data(), self.gamma);
        let rows = ctx.g.gather_rows(m, idx.clone())?;
        let gate = ctx.g.gather_rows(s, idx.clone())?;
        let sel = ctx.g.row_scale(rows, gate)?;
        Ok((sel, idx))
    }
}

/// Indices of the `⌈γn⌉` largest scores, ties to the lower index, returned
/// in ascending order.
pub fn top_select(scores: &[f64], gamma: f64) -> Vec<usize> {
    let n = scores.len();
    assert!(n >= 1, "top_select on an empty score list");
    assert!(
        gamma > 0.0 && gamma <= 1.0,
        "pooling ratio must lie in (0, 1]"
    );
    // Guard against 0.5 * 4 = 2.0000000000000004 style round-up.
    let k = ((gamma * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    keep
}

/// `[mean over rows ∥ sum over rows]`, a `1 × 2d` row.
pub fn readout(ctx: &mut Ctx, m: Var) -> Result<Var> {
    let mean = ctx.g.mean(m, Some(0))?;
    let sum = ctx.g.sum(m, Some(0))?;
    ctx.g.concat_cols(&[mean, sum])
}

/// Rows and columns `idx` of a square matrix.
fn induced(adj: &Tensor, idx: &[usize]) -> Tensor {
    let n = adj.rows();
    let k = idx.len();
    let mut out = Vec::with_capacity(k * k);
    for &i in idx {
        for &j in idx {
            out.push(adj.data()[i * n + j]);
        }
    }
    Tensor::new(&[k, k], out).expect("k >= 1")
}

#[derive(Debug, Clone)]
pub struct MoleculeEncoder {
    pub blocks: Vec<(GcnLayer, SagPoolLayer)>,
    pub projection: ParamId,
    pub hidden_dim: usize,
    pub repr_dim: usize,
    /// When false, every block reads out all atoms and the graph is not
    /// shrunk (the no-pooling ablation).
    pub pooling: bool,
}

impl MoleculeEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        layers: usize,
        hidden_dim: usize,
        repr_dim: usize,
        gamma: f64,
        pooling: bool,
        rng: &mut R,
    ) -> Self {
        assert!(layers >= 1);
        let mut blocks = Vec::with_capacity(layers);
        for l in 0..layers {
            let d_in = if l == 0 { FEATURE_DIM } else { hidden_dim };
            let gcn = GcnLayer::new(store, &format!("mol.gcn{l}"), d_in, hidden_dim, rng);
            let pool = SagPoolLayer::new(store, &format!("mol.pool{l}"), hidden_dim, gamma, rng);
            blocks.push((gcn, pool));
        }
        let projection = store.add_glorot("mol.projection", layers * 2 * hidden_dim, repr_dim, rng);
        Self {
            blocks,
            projection,
            hidden_dim,
            repr_dim,
            pooling,
        }
    }

    /// Molecule embedding as a `1 × repr_dim` row.
    pub fn encode(&self, ctx: &mut Ctx, mol: &MoleculeGraph) -> Result<Var> {
        let mut adj = mol.adjacency();
        let mut m = ctx.g.constant(mol.feature_matrix());
        let mut readouts = Vec::with_capacity(self.blocks.len());
        for (gcn, pool) in &self.blocks {
            let a_hat = ctx.g.constant(normalized_adjacency(&adj));
            let h = gcn.forward_normalized(ctx, a_hat, m)?;
            if self.pooling {
                let (sel, idx) = pool.pool_normalized(ctx, a_hat, h)?;
                readouts.push(readout(ctx, sel)?);
                adj = induced(&adj, &idx);
                m = sel;
            } else {
                readouts.push(readout(ctx, h)?);
                m = h;
            }
        }
        let cat = ctx.g.concat_cols(&readouts)?;
        let p = ctx.param(self.projection);
        ctx.g.matmul(cat, p)
    }
}

/// Sum of raw atom features, `1 × 32`; the molecule input of the
/// interaction-only ablation.
pub fn sum_pooled_features(mol: &MoleculeGraph) -> Tensor {
    let f = mol.feature_matrix();
    let mut acc = vec![0.0; FEATURE_DIM];
    for r in 0..f.rows() {
        for (a, v) in acc.iter_mut().zip(f.row(r)) {
            *a += v;
        }
    }
    Tensor::row_vector(acc).expect("non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::parse_smiles;
    use crate::params::check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer_with(store: &mut ParamStore, w: Tensor, act: Activation) -> GcnLayer {
        GcnLayer {
            weight: store.add("w", w),
            activation: act,
        }
    }

    #[test]
    fn gcn_single_atom_identity() {
        let mut store = ParamStore::new();
        let layer = layer_with(&mut store, Tensor::eye(3), Activation::Linear);
        let mut ctx = Ctx::new(&store);
        let m = ctx
            .g
            .constant(Tensor::row_vector(vec![0.5, -2.0, 3.0]).unwrap());
        let out = layer.forward(&mut ctx, &Tensor::zeros(&[1, 1]), m).unwrap();
        assert_eq!(ctx.g.value(out).data(), &[0.5, -2.0, 3.0]);
    }

    #[test]
    fn gcn_two_atoms_single_bond() {
        let mut store = ParamStore::new();
        let layer = layer_with(&mut store, Tensor::scalar(1.0), Activation::Linear);
        let mut ctx = Ctx::new(&store);
        let m = ctx.g.constant(Tensor::column(vec![1.0, 3.0]).unwrap());
        let adj = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let out = layer.forward(&mut ctx, &adj, m).unwrap();
        for v in ctx.g.value(out).data() {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gcn_without_edges_is_identity() {
        let mut store = ParamStore::new();
        let layer = layer_with(&mut store, Tensor::eye(2), Activation::Linear);
        let mut ctx = Ctx::new(&store);
        let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, -4.0], [0.1, 0.2]]).unwrap();
        let m = ctx.g.constant(x.clone());
        let out = layer.forward(&mut ctx, &Tensor::zeros(&[3, 3]), m).unwrap();
        assert_eq!(ctx.g.value(out), &x);
    }

    /// Dense evaluation of `tanh(Â M w)` with plain loops.
    fn hand_scores(adj: &[[f64; 3]; 3], m: &[[f64; 2]; 3], w: &[f64; 2]) -> Vec<f64> {
        let mut a = *adj;
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += 1.0;
        }
        let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
        (0..3)
            .map(|i| {
                let mut s = 0.0;
                for j in 0..3 {
                    let norm = a[i][j] / (deg[i] * deg[j]).sqrt();
                    s += norm * (m[j][0] * w[0] + m[j][1] * w[1]);
                }
                s.tanh()
            })
            .collect()
    }

    #[test]
    fn attention_scores_match_hand_evaluation() {
        let adj = [[0.0, 1.0, 0.0], [1.0, 0.0, 2.0], [0.0, 2.0, 0.0]];
        let m = [[0.3, -0.2], [1.0, 0.5], [-0.7, 0.9]];
        let w = [0.8, -0.4];
        let mut store = ParamStore::new();
        let pool = SagPoolLayer {
            w_att: store.add("w", Tensor::column(w.to_vec()).unwrap()),
            gamma: 0.5,
            activation: Activation::Tanh,
        };
        let mut ctx = Ctx::new(&store);
        let mv = ctx.g.constant(Tensor::from_rows(&m).unwrap());
        let s = pool
            .attention_scores(&mut ctx, &Tensor::from_rows(&adj).unwrap(), mv)
            .unwrap();
        let want = hand_scores(&adj, &m, &w);
        for (a, b) in ctx.g.value(s).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_attention_weights_give_uniform_scores() {
        let mut store = ParamStore::new();
        let pool = SagPoolLayer {
            w_att: store.add("w", Tensor::zeros(&[2, 1])),
            gamma: 1.0,
            activation: Activation::Tanh,
        };
        let mut ctx = Ctx::new(&store);
        let m = ctx
            .g
            .constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let adj = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let s = pool.attention_scores(&mut ctx, &adj, m).unwrap();
        assert_eq!(ctx.g.value(s).data(), &[0.0, 0.0]);
    }

    #[test]
    fn single_atom_score_is_direct() {
        let mut store = ParamStore::new();
        let pool = SagPoolLayer {
            w_att: store.add("w", Tensor::column(vec![0.5, -1.0]).unwrap()),
            gamma: 1.0,
            activation: Activation::Tanh,
        };
        let mut ctx = Ctx::new(&store);
        let m = ctx.g.constant(Tensor::row_vector(vec![2.0, 0.25]).unwrap());
        let (sel, idx) = pool.pool(&mut ctx, &Tensor::zeros(&[1, 1]), m).unwrap();
        let s0 = (2.0f64 * 0.5 - 0.25).tanh();
        assert_eq!(idx, vec![0]);
        let got = ctx.g.value(sel).data();
        assert!((got[0] - 2.0 * s0).abs() < 1e-15);
        assert!((got[1] - 0.25 * s0).abs() < 1e-15);
    }

    #[test]
    fn top_select_examples() {
        assert_eq!(top_select(&[0.9, 0.1, 0.5], 0.5), vec![0, 2]);
        assert_eq!(top_select(&[0.3, 0.1, 0.5, 0.2], 1.0), vec![0, 1, 2, 3]);
        assert_eq!(top_select(&[0.5, 0.5], 0.5), vec![0]);
        assert_eq!(top_select(&[0.1, 0.2, 0.3, 0.4], 0.5).len(), 2);
        assert_eq!(top_select(&[0.1; 7], 0.01), vec![0]);
    }

    #[test]
    fn pool_four_atoms_gathers_and_scales() {
        // Scores fixed via a one-column M and w_att = 1 with no bonds:
        // s_i = tanh(m_i).
        let mut store = ParamStore::new();
        let pool = SagPoolLayer {
            w_att: store.add("w", Tensor::column(vec![1.0]).unwrap()),
            gamma: 0.5,
            activation: Activation::Tanh,
        };
        let vals = [0.2, -0.4, 0.9, 0.5];
        let mut ctx = Ctx::new(&store);
        let m = ctx.g.constant(Tensor::column(vals.to_vec()).unwrap());
        let (sel, idx) = pool.pool(&mut ctx, &Tensor::zeros(&[4, 4]), m).unwrap();
        assert_eq!(idx, vec![2, 3]);
        let got = ctx.g.value(sel).data();
        assert!((got[0] - 0.9 * 0.9f64.tanh()).abs() < 1e-15);
        assert!((got[1] - 0.5 * 0.5f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn full_ratio_unit_scores_keep_m() {
        // No bonds and a linear score reading column 0, which is all ones.
        let mut store = ParamStore::new();
        let pool = SagPoolLayer {
            w_att: store.add("w", Tensor::column(vec![1.0, 0.0]).unwrap()),
            gamma: 1.0,
            activation: Activation::Linear,
        };
        let mut ctx = Ctx::new(&store);
        let x = Tensor::from_rows(&[[1.0, 2.0], [1.0, -4.0], [1.0, 0.5]]).unwrap();
        let m = ctx.g.constant(x.clone());
        let (sel, idx) = pool.pool(&mut ctx, &Tensor::zeros(&[3, 3]), m).unwrap();
        assert_eq!(idx, vec![0, 1, 2]);
        assert_eq!(ctx.g.value(sel), &x);
    }

    #[test]
    fn readout_examples() {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store);
        let v = ctx.g.constant(Tensor::row_vector(vec![1.0, -2.0]).unwrap());
        let r = readout(&mut ctx, v).unwrap();
        assert_eq!(ctx.g.value(r).data(), &[1.0, -2.0, 1.0, -2.0]);
        let m = ctx.g.constant(Tensor::column(vec![1.0, 3.0]).unwrap());
        let r = readout(&mut ctx, m).unwrap();
        assert_eq!(ctx.g.value(r).data(), &[2.0, 4.0]);
        let z = ctx.g.constant(Tensor::zeros(&[3, 2]));
        let r = readout(&mut ctx, z).unwrap();
        assert_eq!(ctx.g.value(r).data(), &[0.0; 4]);
    }

    fn encoder(seed: u64, hidden: usize, repr: usize) -> (ParamStore, MoleculeEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = MoleculeEncoder::new(&mut store, 3, hidden, repr, 0.5, true, &mut rng);
        (store, enc)
    }

    fn embed(store: &ParamStore, enc: &MoleculeEncoder, mol: &MoleculeGraph) -> Vec<f64> {
        let mut ctx = Ctx::new(store);
        let x = enc.encode(&mut ctx, mol).unwrap();
        ctx.g.value(x).data().to_vec()
    }

    #[test]
    fn output_width_and_relabelling() {
        let (store, enc) = encoder(11, 16, 8);
        let a = embed(&store, &enc, &parse_smiles("CCO").unwrap());
        let b = embed(&store, &enc, &parse_smiles("OCC").unwrap());
        assert_eq!(a.len(), 8);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn pooled_sizes_follow_ceiling_rule() {
        let (store, enc) = encoder(5, 8, 4);
        let mol = parse_smiles("CC(=O)Oc1ccccc1C(=O)O").unwrap();
        let mut ctx = Ctx::new(&store);
        let mut adj = mol.adjacency();
        let mut m = ctx.g.constant(mol.feature_matrix());
        let mut n = mol.atom_count();
        for (gcn, pool) in &enc.blocks {
            let h = gcn.forward(&mut ctx, &adj, m).unwrap();
            let (sel, idx) = pool.pool(&mut ctx, &adj, h).unwrap();
            let want = (0.5 * n as f64).ceil() as usize;
            assert_eq!(idx.len(), want);
            assert_eq!(ctx.g.shape(sel)[0], want);
            adj = induced(&adj, &idx);
            m = sel;
            n = want;
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (mut store, enc) = encoder(21, 6, 4);
        let mol = parse_smiles("CC(=O)N").unwrap();
        let ids: Vec<ParamId> = store.ids().collect();
        let err = check_params(&mut store, &ids, 1e-5, |ctx| {
            let x = enc.encode(ctx, &mol)?;
            let t = ctx.g.tanh(x);
            ctx.g.sum(t, None)
        })
        .unwrap();
        assert!(err <= 1e-6, "max relative error {err}");
    }
}
