//! Training loop, evaluation, and inference.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::chem::MoleculeGraph;
use crate::config::{ConfigError, TrainConfig};
use crate::data::{Dataset, Split};
use crate::interaction::{EdgeAudit, GraphError, InteractionGraph, Link};
use crate::metrics::{ap, auc, MetricError, RankedPredictions};
use crate::model::GoGNNModel;
use crate::objectives::{NegativeSampler, SamplingMode};
use crate::optim::{Adam, OptimError};
use crate::params::Ctx;
use crate::tensor::{Tensor, TensorError};

/// Stream offsets so the loop, validation and test negatives never share
/// a generator.
const VALID_STREAM: u64 = 0x7661_6c69;
const TEST_STREAM: u64 = 0x7465_7374;
const TRAIN_STREAM: u64 = 0x7472_6e67;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("data: {0}")]
    Data(String),
    #[error("diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl From<GraphError> for TrainError {
    fn from(e: GraphError) -> Self {
        TrainError::Data(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Part {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Part::Train),
            "valid" => Ok(Part::Valid),
            "test" => Ok(Part::Test),
            other => Err(format!("unknown part `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Metrics of the parameters at the end of this epoch.
    pub valid_auc: Option<f64>,
    pub valid_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (0 = initial parameters).
    pub best_epoch: usize,
    pub best_valid_auc: Option<f64>,
    pub stopped_early: bool,
    /// Reads of validation or test edges during message passing.
    pub held_out_edge_reads: usize,
}

impl History {
    /// Loss history as raw bytes, for bitwise comparisons.
    pub fn loss_bytes(&self) -> Vec<u8> {
        self.epochs
            .iter()
            .flat_map(|e| e.train_loss.to_le_bytes())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub auc: f64,
    pub ap: f64,
    pub positives: usize,
    pub negatives: usize,
    pub loss: f64,
}

fn pick(links: &[Link], idx: &[usize]) -> Vec<Link> {
    idx.iter().map(|&k| links[k]).collect()
}

/// The message-passing graph: training links only.
pub fn training_graph(
    dataset: &Dataset,
    split: &Split,
    extra_nodes: usize,
) -> Result<InteractionGraph, GraphError> {
    InteractionGraph::new(
        dataset.molecules.len() + extra_nodes,
        &pick(&dataset.links, &split.train),
        dataset.relation_count(),
    )
}

/// One corrupted partner per positive, filtered against every known
/// link of the dataset.
pub fn evaluation_negatives(dataset: &Dataset, positives: &[Link], seed: u64) -> Vec<Link> {
    let sampler = NegativeSampler::new(
        dataset.molecules.len(),
        &dataset.known(),
        SamplingMode::Uniform,
        true,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    positives
        .iter()
        .map(|l| Link {
            i: l.i,
            j: sampler.sample(l.i, l.rel, &mut rng),
            rel: l.rel,
        })
        .collect()
}

fn check_inputs(config: &TrainConfig, dataset: &Dataset, split: &Split) -> Result<(), TrainError> {
    if config.task != dataset.task {
        return Err(TrainError::Data(format!(
            "configuration task {} does not match dataset task {}",
            config.task, dataset.task
        )));
    }
    if dataset.molecules.len() < 2 || dataset.links.is_empty() {
        return Err(TrainError::Data(
            "dataset needs at least two molecules and one link".into(),
        ));
    }
    if split.train.is_empty() {
        return Err(TrainError::Data("training split is empty".into()));
    }
    let n = dataset.links.len();
    if split
        .train
        .iter()
        .chain(&split.valid)
        .chain(&split.test)
        .any(|&k| k >= n)
    {
        return Err(TrainError::Data(
            "split refers to links outside the dataset".into(),
        ));
    }
    Ok(())
}

/// Logits and loss of `pos`/`neg` given final node rows `h`.
fn score_rows(
    model: &GoGNNModel,
    h: &Tensor,
    pos: &[Link],
    neg: &[Link],
) -> Result<(Vec<f64>, Vec<f64>, f64), TensorError> {
    let mut ctx = Ctx::new(&model.store);
    let hv = ctx.g.constant(h.clone());
    let p = model.score(&mut ctx, hv, pos)?;
    let n = model.score(&mut ctx, hv, neg)?;
    let loss = crate::objectives::link_loss(&mut ctx, p, n)?;
    let grab =
        |v: Option<crate::tensor::Var>| v.map_or_else(Vec::new, |v| ctx.g.value(v).data().to_vec());
    Ok((grab(p), grab(n), ctx.g.value(loss).item()))
}

fn logistic(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Metrics rank logits; the order matches the probabilities' wherever
/// those are distinguishable in floating point.
fn metrics(pos: &[f64], neg: &[f64], loss: f64) -> Result<EvalReport, MetricError> {
    let mut rp = RankedPredictions::default();
    pos.iter().for_each(|&s| rp.push(s, true));
    neg.iter().for_each(|&s| rp.push(s, false));
    Ok(EvalReport {
        auc: auc(&rp)?,
        ap: ap(&rp)?,
        positives: pos.len(),
        negatives: neg.len(),
        loss,
    })
}

/// `ceil(n / max)` contiguous batches whose sizes differ by at most one.
fn balanced_batches<T>(items: &[T], max: usize) -> impl Iterator<Item = &[T]> {
    let n = items.len();
    let count = n.div_ceil(max.max(1)).max(1);
    (0..count).map(move |k| &items[k * n / count..(k + 1) * n / count])
}

/// Trains a fresh model. The returned parameters are those with the best
/// validation AUC (ties to lower validation loss).
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    split: &Split,
) -> Result<(GoGNNModel, History), TrainError> {
    train_with(config, dataset, split, |_| Ok(()))
}

/// [`train`], with `init` applied to the freshly initialised model before
/// the first step.
pub fn train_with<F>(
    config: &TrainConfig,
    dataset: &Dataset,
    split: &Split,
    init: F,
) -> Result<(GoGNNModel, History), TrainError>
where
    F: FnOnce(&mut GoGNNModel) -> Result<(), TrainError>,
{
    let mut config = config.clone();
    config.relations = dataset.relation_count();
    config.validate()?;
    check_inputs(&config, dataset, split)?;

    let mut model = GoGNNModel::new(&config)?;
    init(&mut model)?;
    let watched = split
        .valid
        .iter()
        .chain(&split.test)
        .map(|&k| dataset.links[k]);
    let audit = Arc::new(EdgeAudit::new(watched));
    let graph = training_graph(dataset, split, 0)?.with_audit(audit.clone());

    let train_links = pick(&dataset.links, &split.train);
    let valid_pos = pick(&dataset.links, &split.valid);
    let valid_neg = evaluation_negatives(dataset, &valid_pos, config.seed ^ VALID_STREAM);
    let train_known: Vec<_> = train_links.iter().map(|l| (l.i, l.j, l.rel)).collect();
    let sampler = NegativeSampler::new(
        dataset.molecules.len(),
        &train_known,
        config.negative_sampling,
        config.filtered_negatives,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ TRAIN_STREAM);
    let mut adam = Adam::new(config.learning_rate);

    let mut history = History {
        epochs: Vec::new(),
        best_epoch: 0,
        best_valid_auc: None,
        stopped_early: false,
        held_out_edge_reads: 0,
    };
    let mut best: Option<(f64, f64, crate::params::ParamStore)> = None;
    let mut since_best = 0usize;

    // Validation of the parameters left by an epoch, recorded into it.
    let validate = |model: &GoGNNModel,
                    rec: &mut EpochRecord,
                    best: &mut Option<(f64, f64, crate::params::ParamStore)>,
                    since_best: &mut usize,
                    history_best: &mut (usize, Option<f64>)|
     -> Result<(), TrainError> {
        if valid_pos.is_empty() {
            *best = Some((0.0, 0.0, model.store.clone()));
            *history_best = (rec.epoch, None);
            return Ok(());
        }
        let h = model.node_representations(&dataset.molecules, &graph)?;
        let (p, n, loss) = score_rows(model, &h, &valid_pos, &valid_neg)?;
        let m = metrics(&p, &n, loss)?;
        rec.valid_auc = Some(m.auc);
        rec.valid_loss = Some(loss);
        let better = match best {
            None => true,
            Some((a, l, _)) => m.auc > *a || (m.auc == *a && loss < *l),
        };
        if better {
            *best = Some((m.auc, loss, model.store.clone()));
            *history_best = (rec.epoch, Some(m.auc));
            *since_best = 0;
        } else {
            *since_best += 1;
        }
        Ok(())
    };

    let mut hb = (0usize, None);
    for epoch in 1..=config.epochs {
        let mut order = train_links.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in balanced_batches(&order, config.batch_edges).enumerate() {
            let negatives: Vec<Link> = batch
                .iter()
                .map(|l| Link {
                    i: l.i,
                    j: sampler.sample(l.i, l.rel, &mut rng),
                    rel: l.rel,
                })
                .collect();
            let (loss, grads) = model
                .loss_and_gradients(&dataset.molecules, &graph, batch, &negatives)
                .map_err(|e| TrainError::Divergence {
                    epoch,
                    batch: b,
                    detail: e.to_string(),
                })?;
            if !loss.is_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    batch: b,
                    detail: format!("loss is {loss}"),
                });
            }
            epoch_loss += loss;
            adam.step(&mut model.store, &grads)
                .map_err(|OptimError::NonFiniteGradient(p)| TrainError::Divergence {
                    epoch,
                    batch: b,
                    detail: format!("non-finite gradient for `{p}`"),
                })?;
        }
        if !model.store.all_finite() {
            return Err(TrainError::Divergence {
                epoch,
                batch: 0,
                detail: "parameters became non-finite".into(),
            });
        }
        let mut rec = EpochRecord {
            epoch,
            train_loss: epoch_loss,
            valid_auc: None,
            valid_loss: None,
        };
        validate(&model, &mut rec, &mut best, &mut since_best, &mut hb)?;
        log::info!(
            "epoch {epoch}: loss {:.6} valid auc {}",
            rec.train_loss,
            rec.valid_auc.map_or("-".to_string(), |a| format!("{a:.4}"))
        );
        history.epochs.push(rec);
        if !valid_pos.is_empty() && since_best >= config.patience {
            history.stopped_early = epoch < config.epochs;
            break;
        }
    }

    if let Some((_, _, store)) = best {
        model.store = store;
    }
    history.best_epoch = hb.0;
    history.best_valid_auc = hb.1;
    history.held_out_edge_reads = audit.reads();
    Ok((model, history))
}

/// AUC/AP of `part` positives against an equal number of sampled
/// non-links, with message passing over the training links only.
pub fn evaluate(
    model: &GoGNNModel,
    dataset: &Dataset,
    split: &Split,
    part: Part,
) -> Result<EvalReport, TrainError> {
    check_inputs(&model.config, dataset, split)?;
    let idx = match part {
        Part::Train => &split.train,
        Part::Valid => &split.valid,
        Part::Test => &split.test,
    };
    if idx.is_empty() {
        return Err(TrainError::Data(format!("{part:?} part is empty")));
    }
    let pos = pick(&dataset.links, idx);
    let stream = match part {
        Part::Train => TRAIN_STREAM.rotate_left(7),
        Part::Valid => VALID_STREAM,
        Part::Test => TEST_STREAM,
    };
    let neg = evaluation_negatives(dataset, &pos, model.config.seed ^ stream);
    let graph = training_graph(dataset, split, 0)?;
    let h = model.node_representations(&dataset.molecules, &graph)?;
    let (p, n, loss) = score_rows(model, &h, &pos, &neg)?;
    Ok(metrics(&p, &n, loss)?)
}

/// Probabilities for `queries`. Indices at or beyond the dataset's
/// molecule count refer to `extra` molecules, which join the graph as
/// isolated nodes.
pub fn predict(
    model: &GoGNNModel,
    dataset: &Dataset,
    split: &Split,
    extra: &[MoleculeGraph],
    queries: &[Link],
) -> Result<Vec<f64>, TrainError> {
    check_inputs(&model.config, dataset, split)?;
    let n = dataset.molecules.len() + extra.len();
    if let Some(q) = queries.iter().find(|q| q.i >= n || q.j >= n) {
        return Err(TrainError::Data(format!(
            "query ({}, {}) refers to an unknown molecule",
            q.i, q.j
        )));
    }
    if let Some(q) = queries
        .iter()
        .find(|q| q.rel.is_some_and(|r| r >= dataset.relation_count()))
    {
        return Err(TrainError::Data(format!(
            "query ({}, {}) has unknown relation {}",
            q.i,
            q.j,
            q.rel.unwrap_or_default()
        )));
    }
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let graph = training_graph(dataset, split, extra.len())?;
    let mols: Vec<MoleculeGraph> = dataset.molecules.iter().chain(extra).cloned().collect();
    let h = model.node_representations(&mols, &graph)?;
    let (s, _, _) = score_rows(model, &h, queries, &[])?;
    Ok(s.into_iter().map(logistic).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Ablation;
    use crate::data::synth::{synth_generate, RuleTable};
    use crate::data::{split as make_split, Task};

    fn tiny(task: Task) -> TrainConfig {
        let mut c = TrainConfig::defaults(task);
        c.hidden_dim = 8;
        c.repr_dim = 8;
        c.gat_heads = 2;
        c.gcn_layers = 2;
        c.side_effect_dim = 4;
        c.epochs = 6;
        c.seed = 3;
        c
    }

    fn data(task: Task) -> (Dataset, Split) {
        let s = synth_generate(16, 3, &RuleTable::diagonal(3), task, 11);
        let split = make_split(s.dataset.links.len(), &[0.8, 0.1, 0.1], 4).unwrap();
        (s.dataset, split)
    }

    #[test]
    fn training_is_deterministic_and_leak_free() {
        for task in [Task::Cci, Task::Ddi] {
            let (ds, split) = data(task);
            let (m1, h1) = train(&tiny(task), &ds, &split).unwrap();
            let (m2, h2) = train(&tiny(task), &ds, &split).unwrap();
            assert_eq!(h1.loss_bytes(), h2.loss_bytes());
            assert_eq!(h1.held_out_edge_reads, 0);
            for id in m1.store.ids() {
                assert_eq!(m1.store.get(id), m2.store.get(id));
            }
            let e1 = evaluate(&m1, &ds, &split, Part::Test).unwrap();
            let e2 = evaluate(&m2, &ds, &split, Part::Test).unwrap();
            assert_eq!(e1, e2);
            assert_eq!(e1.positives, e1.negatives);
        }
    }

    #[test]
    fn best_epoch_dominates_history() {
        let (ds, split) = data(Task::Cci);
        let mut c = tiny(Task::Cci);
        c.epochs = 10;
        let (model, h) = train(&c, &ds, &split).unwrap();
        let best = h.best_valid_auc.unwrap();
        assert!(h.epochs.iter().all(|e| e.valid_auc.unwrap() <= best));
        let again = evaluate(&model, &ds, &split, Part::Valid).unwrap();
        assert_eq!(again.auc, best);
    }

    #[test]
    fn early_stopping_respects_patience() {
        let (ds, split) = data(Task::Cci);
        let mut c = tiny(Task::Cci);
        c.epochs = 60;
        c.patience = 2;
        c.learning_rate = 1e-300;
        let (_, h) = train(&c, &ds, &split).unwrap();
        assert!(h.stopped_early);
        assert!(h.epochs.len() < 60);
        let last = h.epochs.len();
        assert!(last - h.best_epoch >= 2);
    }

    #[test]
    fn audit_sees_reads_when_held_out_edges_pass_messages() {
        let (ds, split) = data(Task::Cci);
        // Put the test links into the message-passing set on purpose.
        let leaky = Split {
            train: split.train.iter().chain(&split.test).copied().collect(),
            ..split.clone()
        };
        let watched = split.test.iter().map(|&k| ds.links[k]);
        let audit = Arc::new(EdgeAudit::new(watched));
        let graph = training_graph(&ds, &leaky, 0)
            .unwrap()
            .with_audit(audit.clone());
        let model = GoGNNModel::new(&tiny(Task::Cci)).unwrap();
        model.node_representations(&ds.molecules, &graph).unwrap();
        assert!(audit.reads() > 0);
    }

    #[test]
    fn predict_is_symmetric_and_handles_new_molecules() {
        for task in [Task::Cci, Task::Ddi] {
            let (ds, split) = data(task);
            let mut c = tiny(task);
            c.relations = ds.relation_count();
            let model = GoGNNModel::new(&c).unwrap();
            let r = (task == Task::Ddi).then_some(0);
            let fresh = crate::chem::parse_smiles_with_id("new", "CCCl").unwrap();
            let n = ds.molecules.len();
            let q = [
                Link { i: 1, j: 5, rel: r },
                Link { i: 5, j: 1, rel: r },
                Link { i: n, j: 2, rel: r },
                Link { i: 2, j: n, rel: r },
            ];
            let p = predict(&model, &ds, &split, &[fresh], &q).unwrap();
            assert_eq!(p[0], p[1]);
            assert_eq!(p[2], p[3]);
            assert!(p.iter().all(|v| *v > 0.0 && *v < 1.0));
            assert!(predict(&model, &ds, &split, &[], &q).is_err());
        }
    }

    #[test]
    fn batches_are_balanced_and_cover() {
        let items: Vec<usize> = (0..1028).collect();
        let sizes: Vec<usize> = balanced_batches(&items, 1024).map(<[_]>::len).collect();
        assert_eq!(sizes, vec![514, 514]);
        let flat: Vec<usize> = balanced_batches(&items, 100).flatten().copied().collect();
        assert_eq!(flat, items);
        assert!(balanced_batches(&items, 100).all(|b| b.len() == 93 || b.len() == 94));
        assert_eq!(balanced_batches(&items[..5], 1024).count(), 1);
    }

    #[test]
    fn task_mismatch_is_a_data_error() {
        let (ds, split) = data(Task::Cci);
        let err = train(&tiny(Task::Ddi), &ds, &split).unwrap_err();
        assert!(matches!(err, TrainError::Data(_)));
    }

    #[test]
    fn ablations_train() {
        let (ds, split) = data(Task::Cci);
        for ab in Ablation::ALL {
            let mut c = tiny(Task::Cci);
            c.ablation = ab;
            c.epochs = 2;
            let (_, h) = train(&c, &ds, &split).unwrap();
            assert_eq!(h.epochs.len(), 2);
        }
    }
}
