//! The assembled two-level model and its gradient computation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::chem::{MoleculeGraph, FEATURE_DIM};
use crate::config::{Ablation, ConfigError, TrainConfig};
use crate::data::Task;
use crate::interaction::{InteractionGraph, InteractionStack, Link, SideEffectTable, StackKind};
use crate::mol_encoder::{sum_pooled_features, MoleculeEncoder};
use crate::objectives::{cci_batch, link_loss, DdiObjective};
use crate::params::{Ctx, Gradients, ParamId, ParamStore};
use crate::tensor::{Result, Tensor, TensorError, Var};

/// Molecule tapes are kept between the forward and backward passes up to
/// this many molecules; beyond it they are rebuilt one at a time.
const TAPE_CACHE_LIMIT: usize = 4096;

#[derive(Debug, Clone)]
pub struct GoGNNModel {
    pub config: TrainConfig,
    pub store: ParamStore,
    /// Absent for the interaction-only ablation.
    pub encoder: Option<MoleculeEncoder>,
    /// Maps summed raw atom features to the representation width
    /// (interaction-only ablation).
    pub input_projection: Option<ParamId>,
    /// Absent for the molecule-only ablation.
    pub stack: Option<InteractionStack>,
    pub ddi: Option<DdiObjective>,
    pub side_effects: Option<SideEffectTable>,
}

impl GoGNNModel {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: &TrainConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        if config.task == Task::Ddi && config.relations == 0 {
            return Err(ConfigError::Invalid(
                "ddi models need at least one relation".into(),
            ));
        }
        let c = config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let mut store = ParamStore::new();
        let (encoder, input_projection) = match c.ablation {
            Ablation::InterOnly => (
                None,
                Some(store.add_glorot("input_projection", FEATURE_DIM, c.repr_dim, &mut rng)),
            ),
            a => (
                Some(MoleculeEncoder::new(
                    &mut store,
                    c.gcn_layers,
                    c.hidden_dim,
                    c.repr_dim,
                    c.pooling_ratio,
                    a != Ablation::NoPool,
                    &mut rng,
                )),
                None,
            ),
        };
        let kind = match (c.ablation, c.task) {
            (Ablation::MolOnly, _) => None,
            (Ablation::NoAttn, _) => Some(StackKind::Gcn),
            (_, Task::Cci) => Some(StackKind::Gat),
            (_, Task::Ddi) => Some(StackKind::EdgeAgg),
        };
        let stack = kind.map(|k| {
            InteractionStack::new(
                &mut store,
                k,
                c.interaction_layers,
                c.repr_dim,
                c.repr_dim,
                c.gat_heads,
                c.side_effect_dim,
                &mut rng,
            )
        });
        let (ddi, side_effects) = match c.task {
            Task::Cci => (None, None),
            Task::Ddi => {
                let obj = DdiObjective::new(&mut store, c.relations, c.repr_dim, &mut rng);
                let se = (kind == Some(StackKind::EdgeAgg)).then(|| {
                    SideEffectTable::new(&mut store, c.relations, c.side_effect_dim, &mut rng)
                });
                (Some(obj), se)
            }
        };
        Ok(Self {
            config: c.clone(),
            store,
            encoder,
            input_projection,
            stack,
            ddi,
            side_effects,
        })
    }

    pub fn task(&self) -> Task {
        self.config.task
    }

    /// First-stage molecule rows, one per molecule (forward only).
    pub fn molecule_rows(&self, mols: &[MoleculeGraph]) -> Result<Tensor> {
        let mut rows = Vec::new();
        let mut width = 0;
        for m in mols {
            let r = self.molecule_row(m)?;
            width = r.numel();
            rows.extend_from_slice(r.data());
        }
        if mols.is_empty() {
            return Err(TensorError::Contract("no molecules to encode".into()));
        }
        Tensor::new(&[mols.len(), width], rows)
    }

    fn molecule_row(&self, m: &MoleculeGraph) -> Result<Tensor> {
        match &self.encoder {
            Some(enc) => {
                let mut ctx = Ctx::new(&self.store);
                let x = enc.encode(&mut ctx, m)?;
                Ok(ctx.g.value(x).clone())
            }
            None => Ok(sum_pooled_features(m)),
        }
    }

    /// Molecule rows to final node representations over `graph`.
    pub fn interact(&self, ctx: &mut Ctx, graph: &InteractionGraph, x: Var) -> Result<Var> {
        let mut h = x;
        if let Some(p) = self.input_projection {
            let p = ctx.param(p);
            h = ctx.g.matmul(h, p)?;
        }
        if let Some(stack) = &self.stack {
            let se = self.side_effects.as_ref().map(|t| ctx.param(t.embeddings));
            h = stack.forward(ctx, graph, h, se)?;
        }
        Ok(h)
    }

    /// Logits of `links` over node representations `h`, in order.
    pub fn score(&self, ctx: &mut Ctx, h: Var, links: &[Link]) -> Result<Option<Var>> {
        match (&self.ddi, self.task()) {
            (None, Task::Cci) => cci_batch(
                ctx,
                h,
                &links.iter().map(|l| (l.i, l.j)).collect::<Vec<_>>(),
            ),
            (Some(obj), Task::Ddi) => {
                let t = links
                    .iter()
                    .map(|l| {
                        l.rel.map(|r| (l.i, r, l.j)).ok_or_else(|| {
                            TensorError::Contract(format!(
                                "link ({}, {}) has no relation",
                                l.i, l.j
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                obj.score_batch(ctx, h, &t)
            }
            _ => unreachable!("objective matches task by construction"),
        }
    }

    /// Probabilities of `links`, in order.
    pub fn probabilities(&self, ctx: &mut Ctx, h: Var, links: &[Link]) -> Result<Option<Var>> {
        Ok(self.score(ctx, h, links)?.map(|s| ctx.g.sigmoid(s)))
    }

    pub fn loss(
        &self,
        ctx: &mut Ctx,
        h: Var,
        positives: &[Link],
        negatives: &[Link],
    ) -> Result<Var> {
        let p = self.score(ctx, h, positives)?;
        let n = self.score(ctx, h, negatives)?;
        link_loss(ctx, p, n)
    }

    /// Final node representations (forward only).
    pub fn node_representations(
        &self,
        mols: &[MoleculeGraph],
        graph: &InteractionGraph,
    ) -> Result<Tensor> {
        let rows = self.molecule_rows(mols)?;
        let mut ctx = Ctx::new(&self.store);
        let x = ctx.g.constant(rows);
        let h = self.interact(&mut ctx, graph, x)?;
        Ok(ctx.g.value(h).clone())
    }

    /// Loss and parameter gradients. Molecules are encoded on separate
    /// tapes; the interaction stage treats their rows as a leaf, and the
    /// row gradients are then pushed back through each molecule's tape.
    pub fn loss_and_gradients(
        &self,
        mols: &[MoleculeGraph],
        graph: &InteractionGraph,
        positives: &[Link],
        negatives: &[Link],
    ) -> Result<(f64, Gradients)> {
        let cache = mols.len() <= TAPE_CACHE_LIMIT;
        let mut tapes: Vec<(Ctx, Var)> = Vec::new();
        let rows = match &self.encoder {
            Some(enc) if cache => {
                let mut data = Vec::with_capacity(mols.len() * self.config.repr_dim);
                for m in mols {
                    let mut ctx = Ctx::new(&self.store);
                    let x = enc.encode(&mut ctx, m)?;
                    data.extend_from_slice(ctx.g.value(x).data());
                    tapes.push((ctx, x));
                }
                Tensor::new(&[mols.len(), self.config.repr_dim], data)?
            }
            _ => self.molecule_rows(mols)?,
        };

        let mut ctx = Ctx::new(&self.store);
        let x = ctx.g.leaf(rows);
        let h = self.interact(&mut ctx, graph, x)?;
        let loss = self.loss(&mut ctx, h, positives, negatives)?;
        let value = ctx.g.value(loss).item();
        if !value.is_finite() {
            return Ok((value, Gradients::new(&self.store)));
        }
        ctx.g.backward(loss)?;
        let mut grads = ctx.gradients();
        let Some(enc) = &self.encoder else {
            return Ok((value, grads));
        };
        let dx = ctx.g.grad(x).expect("leaf gradient").clone();
        drop(ctx);

        let d = dx.cols();
        for (k, m) in mols.iter().enumerate() {
            let row = &dx.data()[k * d..(k + 1) * d];
            if row.iter().all(|v| *v == 0.0) {
                continue;
            }
            let seed = Tensor::row_vector(row.to_vec())?;
            if cache {
                let (ctx, xm) = &mut tapes[k];
                ctx.g.backward_with(*xm, &seed)?;
                grads.merge(&ctx.gradients());
            } else {
                let mut ctx = Ctx::new(&self.store);
                let xm = enc.encode(&mut ctx, m)?;
                ctx.g.backward_with(xm, &seed)?;
                grads.merge(&ctx.gradients());
            }
        }
        Ok((value, grads))
    }

    /// The same loss as one tape over every molecule; used to check the
    /// staged gradients.
    pub fn combined_loss(
        &self,
        ctx: &mut Ctx,
        mols: &[MoleculeGraph],
        graph: &InteractionGraph,
        positives: &[Link],
        negatives: &[Link],
    ) -> Result<Var> {
        let x = match &self.encoder {
            Some(enc) => {
                let rows = mols
                    .iter()
                    .map(|m| enc.encode(ctx, m))
                    .collect::<Result<Vec<_>>>()?;
                ctx.g.concat_rows(&rows)?
            }
            None => ctx.g.constant(self.molecule_rows(mols)?),
        };
        let h = self.interact(ctx, graph, x)?;
        self.loss(ctx, h, positives, negatives)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::parse_smiles_with_id;
    use crate::params::check_params;

    fn mols() -> Vec<MoleculeGraph> {
        ["CCO", "CC(=O)O", "c1ccccc1", "CC#N", "C[N+](=O)[O-]", "CCl"]
            .iter()
            .enumerate()
            .map(|(k, s)| parse_smiles_with_id(&format!("m{k}"), s).unwrap())
            .collect()
    }

    fn small(task: Task, ablation: Ablation) -> TrainConfig {
        let mut c = TrainConfig::defaults(task);
        c.hidden_dim = 4;
        c.repr_dim = 4;
        c.gcn_layers = 2;
        c.gat_heads = 2;
        c.side_effect_dim = 3;
        c.seed = 5;
        c.ablation = ablation;
        if task == Task::Ddi {
            c.relations = 2;
        }
        c
    }

    fn fixture(task: Task) -> (InteractionGraph, Vec<Link>, Vec<Link>) {
        let typed = task == Task::Ddi;
        let mk = |i, r, j| {
            if typed {
                Link::typed(i, r, j)
            } else {
                Link::untyped(i, j)
            }
        };
        let train = vec![
            mk(0, 0, 1),
            mk(1, 1, 2),
            mk(2, 0, 3),
            mk(3, 1, 4),
            mk(0, 1, 5),
        ];
        let graph = InteractionGraph::new(6, &train, if typed { 2 } else { 0 }).unwrap();
        let pos = vec![mk(0, 0, 1), mk(2, 0, 3), mk(0, 1, 5)];
        let neg = vec![mk(0, 0, 4), mk(2, 0, 5), mk(0, 1, 3)];
        (graph, pos, neg)
    }

    #[test]
    fn staged_gradients_equal_single_tape() {
        let ms = mols();
        for task in [Task::Cci, Task::Ddi] {
            for ab in Ablation::ALL {
                let model = GoGNNModel::new(&small(task, ab)).unwrap();
                let (graph, pos, neg) = fixture(task);
                let (v, staged) = model.loss_and_gradients(&ms, &graph, &pos, &neg).unwrap();
                let mut ctx = Ctx::new(&model.store);
                let l = model
                    .combined_loss(&mut ctx, &ms, &graph, &pos, &neg)
                    .unwrap();
                assert!((ctx.g.value(l).item() - v).abs() < 1e-12);
                ctx.g.backward(l).unwrap();
                let whole = ctx.gradients();
                for id in model.store.ids() {
                    let (a, b) = (staged.get(id), whole.get(id));
                    assert_eq!(
                        a.is_some(),
                        b.is_some(),
                        "{task} {ab} {}",
                        model.store.name(id)
                    );
                    if let (Some(a), Some(b)) = (a, b) {
                        for (p, q) in a.data().iter().zip(b.data()) {
                            assert!(
                                (p - q).abs() <= 1e-12 * (1.0 + q.abs()),
                                "{}",
                                model.store.name(id)
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let ms = mols();
        for task in [Task::Cci, Task::Ddi] {
            let mut model = GoGNNModel::new(&small(task, Ablation::Full)).unwrap();
            let (graph, pos, neg) = fixture(task);
            let ids: Vec<ParamId> = model.store.ids().collect();
            let m2 = model.clone();
            let err = check_params(&mut model.store, &ids, 1e-5, |ctx| {
                m2.combined_loss(ctx, &ms, &graph, &pos, &neg)
            })
            .unwrap();
            assert!(err <= 1e-5, "{task}: {err}");
        }
    }

    #[test]
    fn ablations_wire_the_expected_parts() {
        let m = GoGNNModel::new(&small(Task::Cci, Ablation::MolOnly)).unwrap();
        assert!(m.stack.is_none() && m.encoder.is_some());
        let m = GoGNNModel::new(&small(Task::Cci, Ablation::InterOnly)).unwrap();
        assert!(m.encoder.is_none() && m.input_projection.is_some());
        let m = GoGNNModel::new(&small(Task::Cci, Ablation::NoAttn)).unwrap();
        assert_eq!(m.stack.unwrap().kind, StackKind::Gcn);
        let m = GoGNNModel::new(&small(Task::Cci, Ablation::NoPool)).unwrap();
        assert!(!m.encoder.unwrap().pooling);
        let m = GoGNNModel::new(&small(Task::Ddi, Ablation::Full)).unwrap();
        assert_eq!(m.stack.unwrap().kind, StackKind::EdgeAgg);
        assert!(m.side_effects.is_some());
        let mut c = small(Task::Ddi, Ablation::Full);
        c.relations = 0;
        assert!(GoGNNModel::new(&c).is_err());
    }

    #[test]
    fn self_pair_and_symmetry() {
        let ms = mols();
        for task in [Task::Cci, Task::Ddi] {
            let model = GoGNNModel::new(&small(task, Ablation::Full)).unwrap();
            let (graph, _, _) = fixture(task);
            let h = model.node_representations(&ms, &graph).unwrap();
            let mut ctx = Ctx::new(&model.store);
            let hv = ctx.g.constant(h.clone());
            let r = if task == Task::Ddi { Some(1) } else { None };
            let q = [
                Link { i: 2, j: 4, rel: r },
                Link { i: 4, j: 2, rel: r },
                Link { i: 3, j: 3, rel: r },
            ];
            let p = model.probabilities(&mut ctx, hv, &q).unwrap().unwrap();
            let p = ctx.g.value(p).data().to_vec();
            assert_eq!(p[0], p[1]);
            if task == Task::Cci {
                let norm2: f64 = h.row(3).iter().map(|v| v * v).sum();
                assert!((p[2] - 1.0 / (1.0 + (-norm2).exp())).abs() < 1e-15);
            }
        }
    }
}
