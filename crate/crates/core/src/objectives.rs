//! Link scorers, the negative-sampled cross-entropy loss, and the
//! negative sampler.

use std::collections::HashSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::params::{Ctx, ParamId, ParamStore};
use crate::tensor::{Result, Tensor, TensorError, Var};

/// Rejections before the sampler settles for any `m ≠ i`.
pub const MAX_REJECTIONS: usize = 100;

/// `a_k · b_k` per row; the CCI logit.
pub fn cci_logit(ctx: &mut Ctx, a: Var, b: Var) -> Result<Var> {
    ctx.g.row_dot(a, b)
}

/// `σ(a_k · b_k)` per row.
pub fn cci_score(ctx: &mut Ctx, a: Var, b: Var) -> Result<Var> {
    let d = cci_logit(ctx, a, b)?;
    Ok(ctx.g.sigmoid(d))
}

/// `(a_k W)·(b_k W)` per row for one relation matrix `w`.
pub fn ddi_logit(ctx: &mut Ctx, a: Var, b: Var, w: Var) -> Result<Var> {
    let aw = ctx.g.matmul(a, w)?;
    let bw = ctx.g.matmul(b, w)?;
    cci_logit(ctx, aw, bw)
}

/// `σ((a_k W)·(b_k W))` per row.
pub fn ddi_score(ctx: &mut Ctx, a: Var, b: Var, w: Var) -> Result<Var> {
    let d = ddi_logit(ctx, a, b, w)?;
    Ok(ctx.g.sigmoid(d))
}

/// `Σ −log σ(s_pos) − log(1 − σ(s_neg))` from logits, evaluated as
/// `Σ softplus(−s_pos) + softplus(s_neg)`; either side may be absent.
pub fn link_loss(ctx: &mut Ctx, s_pos: Option<Var>, s_neg: Option<Var>) -> Result<Var> {
    let mut terms = Vec::new();
    if let Some(s) = s_pos {
        let n = ctx.g.neg(s);
        let l = ctx.g.softplus(n);
        terms.push(ctx.g.sum(l, None)?);
    }
    if let Some(s) = s_neg {
        let l = ctx.g.softplus(s);
        terms.push(ctx.g.sum(l, None)?);
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => return Ok(ctx.g.constant(Tensor::scalar(0.0))),
    };
    for &t in &terms[1..] {
        total = ctx.g.add(total, t)?;
    }
    Ok(total)
}

/// Logits of `pairs` of rows of the node matrix `x`.
pub fn cci_batch(ctx: &mut Ctx, x: Var, pairs: &[(usize, usize)]) -> Result<Option<Var>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let a = ctx
        .g
        .gather_rows(x, pairs.iter().map(|p| p.0).collect::<Vec<_>>())?;
    let b = ctx
        .g
        .gather_rows(x, pairs.iter().map(|p| p.1).collect::<Vec<_>>())?;
    cci_logit(ctx, a, b).map(Some)
}

/// `−log p_ij − log(1 − p_im)` summed over aligned positive and negative pairs.
pub fn cci_loss(
    ctx: &mut Ctx,
    x: Var,
    positives: &[(usize, usize)],
    negatives: &[(usize, usize)],
) -> Result<Var> {
    let p = cci_batch(ctx, x, positives)?;
    let n = cci_batch(ctx, x, negatives)?;
    link_loss(ctx, p, n)
}

/// Relation-specific bilinear scorer with one square `W_r` per relation.
#[derive(Debug, Clone)]
pub struct DdiObjective {
    pub relations: Vec<ParamId>,
}

impl DdiObjective {
    pub fn new<R: Rng>(store: &mut ParamStore, relations: usize, d: usize, rng: &mut R) -> Self {
        let relations = (0..relations)
            .map(|r| store.add_glorot(format!("ddi.relation{r}"), d, d, rng))
            .collect();
        Self { relations }
    }

    fn weight(&self, ctx: &mut Ctx, r: usize) -> Result<Var> {
        let id = *self
            .relations
            .get(r)
            .ok_or_else(|| TensorError::Contract(format!("unknown relation {r}")))?;
        Ok(ctx.param(id))
    }

    /// Logits of `(i, r, j)` triplets over the node matrix `x`, in input
    /// order.
    pub fn score_batch(
        &self,
        ctx: &mut Ctx,
        x: Var,
        triplets: &[(usize, usize, usize)],
    ) -> Result<Option<Var>> {
        if triplets.is_empty() {
            return Ok(None);
        }
        let mut rels: Vec<usize> = triplets.iter().map(|t| t.1).collect();
        rels.sort_unstable();
        rels.dedup();
        let mut parts = Vec::with_capacity(rels.len());
        let mut order = Vec::with_capacity(triplets.len());
        for &r in &rels {
            let rows: Vec<usize> = (0..triplets.len())
                .filter(|&k| triplets[k].1 == r)
                .collect();
            let a = ctx
                .g
                .gather_rows(x, rows.iter().map(|&k| triplets[k].0).collect::<Vec<_>>())?;
            let b = ctx
                .g
                .gather_rows(x, rows.iter().map(|&k| triplets[k].2).collect::<Vec<_>>())?;
            let w = self.weight(ctx, r)?;
            parts.push(ddi_logit(ctx, a, b, w)?);
            order.extend(rows);
        }
        let cat = if parts.len() == 1 {
            parts[0]
        } else {
            ctx.g.concat_rows(&parts)?
        };
        // cat row q holds triplet order[q]; invert.
        let mut inv = vec![0; order.len()];
        for (q, &k) in order.iter().enumerate() {
            inv[k] = q;
        }
        ctx.g.gather_rows(cat, inv).map(Some)
    }

    pub fn loss(
        &self,
        ctx: &mut Ctx,
        x: Var,
        positives: &[(usize, usize, usize)],
        negatives: &[(usize, usize, usize)],
    ) -> Result<Var> {
        let p = self.score_batch(ctx, x, positives)?;
        let n = self.score_batch(ctx, x, negatives)?;
        link_loss(ctx, p, n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    #[default]
    Uniform,
    /// Proportional to degree + 1.
    Degree,
}

/// Corrupts the second endpoint of a positive pair or triplet.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    n: usize,
    filtered: bool,
    positives: HashSet<(usize, usize, Option<usize>)>,
    weights: Option<WeightedIndex<f64>>,
}

impl NegativeSampler {
    /// `known` lists observed positives `(i, j, rel)`; they are rejected
    /// when `filtered` is set.
    pub fn new(
        n: usize,
        known: &[(usize, usize, Option<usize>)],
        mode: SamplingMode,
        filtered: bool,
    ) -> Self {
        assert!(n >= 2, "negative sampling needs at least two nodes");
        let positives = known
            .iter()
            .map(|&(i, j, r)| (i.min(j), i.max(j), r))
            .collect();
        let weights = match mode {
            SamplingMode::Uniform => None,
            SamplingMode::Degree => {
                let mut w = vec![1.0; n];
                for &(i, j, _) in known {
                    w[i] += 1.0;
                    w[j] += 1.0;
                }
                Some(WeightedIndex::new(w).expect("positive weights"))
            }
        };
        Self {
            n,
            filtered,
            positives,
            weights,
        }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn is_positive(&self, i: usize, j: usize, rel: Option<usize>) -> bool {
        self.positives.contains(&(i.min(j), i.max(j), rel))
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> usize {
        match &self.weights {
            Some(w) => w.sample(rng),
            None => rng.gen_range(0..self.n),
        }
    }

    /// A replacement `m` for the partner of `i`.
    pub fn sample<R: Rng>(&self, i: usize, rel: Option<usize>, rng: &mut R) -> usize {
        for _ in 0..MAX_REJECTIONS {
            let m = self.draw(rng);
            if m == i || (self.filtered && self.is_positive(i, m, rel)) {
                continue;
            }
            return m;
        }
        loop {
            let m = rng.gen_range(0..self.n);
            if m != i {
                return m;
            }
        }
    }

    pub fn corrupt_pair<R: Rng>(&self, (i, _): (usize, usize), rng: &mut R) -> (usize, usize) {
        (i, self.sample(i, None, rng))
    }

    pub fn corrupt_triplet<R: Rng>(
        &self,
        (i, r, _): (usize, usize, usize),
        rng: &mut R,
    ) -> (usize, usize, usize) {
        (i, r, self.sample(i, Some(r), rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn logistic(z: f64) -> f64 {
        1.0 / (1.0 + (-z).exp())
    }

    fn score_rows(a: &[f64], b: &[f64]) -> f64 {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store);
        let a = ctx.g.constant(Tensor::row_vector(a.to_vec()).unwrap());
        let b = ctx.g.constant(Tensor::row_vector(b.to_vec()).unwrap());
        let p = cci_score(&mut ctx, a, b).unwrap();
        ctx.g.value(p).item()
    }

    #[test]
    fn cci_score_examples() {
        assert_eq!(score_rows(&[0.0, 0.0], &[3.0, -1.0]), 0.5);
        assert!((score_rows(&[1.0, 0.0], &[1.0, 0.0]) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert_eq!(
            score_rows(&[0.3, -2.0], &[1.5, 0.7]),
            score_rows(&[1.5, 0.7], &[0.3, -2.0])
        );
        let p = score_rows(&[40.0], &[40.0]);
        assert!(p > 0.0 && p <= 1.0);
    }

    fn bilinear(a: &[f64], b: &[f64], w: Tensor) -> f64 {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store);
        let a = ctx.g.constant(Tensor::row_vector(a.to_vec()).unwrap());
        let b = ctx.g.constant(Tensor::row_vector(b.to_vec()).unwrap());
        let w = ctx.g.constant(w);
        let p = ddi_score(&mut ctx, a, b, w).unwrap();
        ctx.g.value(p).item()
    }

    #[test]
    fn ddi_score_examples() {
        let (a, b) = ([0.4, -1.2], [2.0, 0.5]);
        assert_eq!(bilinear(&a, &b, Tensor::zeros(&[2, 2])), 0.5);
        assert_eq!(bilinear(&a, &b, Tensor::eye(2)), score_rows(&a, &b));
        // Row convention: (a W)·(b W) with W = [[1,2],[0,1]].
        let w = Tensor::from_rows(&[[1.0, 2.0], [0.0, 1.0]]).unwrap();
        let aw = [0.4, 0.4 * 2.0 - 1.2];
        let bw = [2.0, 2.0 * 2.0 + 0.5];
        let want = logistic(aw[0] * bw[0] + aw[1] * bw[1]);
        assert!((bilinear(&a, &b, w.clone()) - want).abs() < 1e-15);
        assert_eq!(bilinear(&a, &b, w.clone()), bilinear(&b, &a, w));
        let (c, s) = (0.6f64, 0.8f64);
        let rot = Tensor::from_rows(&[[c, -s], [s, c]]).unwrap();
        assert!((bilinear(&a, &b, rot) - score_rows(&a, &b)).abs() < 1e-15);
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    /// Loss of the logits that produce the given probabilities.
    fn loss_of(pos: &[f64], neg: &[f64]) -> f64 {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store);
        let col = |v: &[f64]| Tensor::column(v.iter().map(|&p| logit(p)).collect()).unwrap();
        let p = (!pos.is_empty()).then(|| ctx.g.constant(col(pos)));
        let n = (!neg.is_empty()).then(|| ctx.g.constant(col(neg)));
        let l = link_loss(&mut ctx, p, n).unwrap();
        ctx.g.value(l).item()
    }

    #[test]
    fn loss_examples() {
        assert!((loss_of(&[0.5], &[0.5]) - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!(loss_of(&[1.0 - 1e-12], &[1e-12]) < 1e-11);
        let (pos, neg): ([f64; 3], [f64; 3]) = ([0.9, 0.3, 0.65], [0.2, 0.75, 0.01]);
        let want: f64 = pos
            .iter()
            .zip(&neg)
            .map(|(p, n)| -p.ln() - (1.0 - n).ln())
            .sum();
        assert!((loss_of(&pos, &neg) - want).abs() < 1e-13);
        assert_eq!(loss_of(&[], &[]), 0.0);
    }

    #[test]
    fn saturated_logits_keep_finite_loss_and_gradient() {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store);
        let p = ctx.g.leaf(Tensor::column(vec![-900.0]).unwrap());
        let n = ctx.g.leaf(Tensor::column(vec![900.0]).unwrap());
        let l = link_loss(&mut ctx, Some(p), Some(n)).unwrap();
        assert_eq!(ctx.g.value(l).item(), 1800.0);
        ctx.g.backward(l).unwrap();
        assert_eq!(ctx.g.grad(p).unwrap().item(), -1.0);
        assert_eq!(ctx.g.grad(n).unwrap().item(), 1.0);
    }

    #[test]
    fn ddi_batch_keeps_input_order_and_sums_per_relation() {
        let mut store = ParamStore::new();
        let obj = DdiObjective::new(&mut store, 3, 2, &mut ChaCha8Rng::seed_from_u64(2));
        let xv = Tensor::from_rows(&[[0.1, 0.9], [-0.4, 0.3], [1.2, -0.5], [0.0, 0.7]]).unwrap();
        let triplets = [(0, 2, 1), (1, 0, 3), (2, 2, 3), (0, 1, 2)];
        let negatives = [(0, 2, 3), (1, 0, 2), (2, 2, 0), (0, 1, 1)];
        let mut ctx = Ctx::new(&store);
        let x = ctx.g.constant(xv.clone());
        let p = obj.score_batch(&mut ctx, x, &triplets).unwrap().unwrap();
        let loss = obj.loss(&mut ctx, x, &triplets, &negatives).unwrap();
        let hand = |&(i, r, j): &(usize, usize, usize)| {
            let w = store.get(obj.relations[r]);
            let proj = |v: &[f64]| {
                [
                    v[0] * w.get(0, 0) + v[1] * w.get(1, 0),
                    v[0] * w.get(0, 1) + v[1] * w.get(1, 1),
                ]
            };
            let (a, b) = (proj(xv.row(i)), proj(xv.row(j)));
            logistic(a[0] * b[0] + a[1] * b[1])
        };
        for (k, t) in triplets.iter().enumerate() {
            let got = logistic(ctx.g.value(p).data()[k]);
            assert!((got - hand(t)).abs() < 1e-15);
        }
        let want: f64 = triplets
            .iter()
            .zip(&negatives)
            .map(|(t, n)| -hand(t).ln() - (1.0 - hand(n)).ln())
            .sum();
        assert!((ctx.g.value(loss).item() - want).abs() < 1e-13);
        assert!(obj.score_batch(&mut ctx, x, &[(0, 3, 1)]).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = store.add_glorot("x", 6, 3, &mut rng);
        let obj = DdiObjective::new(&mut store, 2, 3, &mut rng);
        let ids: Vec<ParamId> = store.ids().collect();
        let err = check_params(&mut store, &ids, 1e-5, |ctx| {
            let xv = ctx.param(x);
            let a = cci_loss(
                ctx,
                xv,
                &[(0, 1), (2, 3), (4, 5)],
                &[(0, 4), (2, 5), (4, 1)],
            )?;
            let b = obj.loss(ctx, xv, &[(0, 1, 1), (1, 0, 2)], &[(0, 1, 3), (1, 0, 5)])?;
            ctx.g.add(a, b)
        })
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn gradient_step_decreases_pair_loss() {
        let mut store = ParamStore::new();
        let x = store.add(
            "x",
            Tensor::from_rows(&[[0.2, -0.1], [0.3, 0.4], [-0.5, 0.2]]).unwrap(),
        );
        let eval = |store: &ParamStore| {
            let mut ctx = Ctx::new(store);
            let xv = ctx.param(x);
            let l = cci_loss(&mut ctx, xv, &[(0, 1)], &[(0, 2)]).unwrap();
            ctx.g.backward(l).unwrap();
            (
                ctx.g.value(l).item(),
                ctx.gradients().get(x).unwrap().clone(),
            )
        };
        let (before, g) = eval(&store);
        let t = store.get_mut(x);
        t.data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(v, d)| *v -= 1e-3 * d);
        let (after, _) = eval(&store);
        assert!(after < before);
    }

    #[test]
    fn two_node_graph_falls_back() {
        let s = NegativeSampler::new(2, &[(0, 1, None)], SamplingMode::Uniform, true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(s.corrupt_pair((0, 1), &mut rng), (0, 1));
            assert_eq!(s.corrupt_pair((1, 0), &mut rng), (1, 0));
        }
    }

    #[test]
    fn filtering_rejects_known_positives() {
        let known = [(0, 1, None), (0, 2, None), (3, 0, None)];
        let s = NegativeSampler::new(6, &known, SamplingMode::Uniform, true);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let m = s.sample(0, None, &mut rng);
            assert!(m == 4 || m == 5, "{m}");
        }
        // Typed filtering only rejects the same relation.
        let s = NegativeSampler::new(3, &[(0, 1, Some(0))], SamplingMode::Uniform, true);
        let hits = (0..400)
            .filter(|_| s.sample(0, Some(1), &mut rng) == 1)
            .count();
        assert!(hits > 100);
    }

    #[test]
    fn uniform_frequencies_within_three_sigma() {
        let s = NegativeSampler::new(10, &[], SamplingMode::Uniform, false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 100_000;
        let mut counts = [0usize; 10];
        for _ in 0..draws {
            counts[s.sample(4, None, &mut rng)] += 1;
        }
        assert_eq!(counts[4], 0);
        let p = 1.0 / 9.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (m, &c) in counts.iter().enumerate().filter(|(m, _)| *m != 4) {
            assert!(
                (c as f64 - draws as f64 * p).abs() <= 3.0 * sigma,
                "node {m}: {c}"
            );
        }
    }

    #[test]
    fn degree_mode_prefers_hubs_and_is_seeded() {
        let known: Vec<_> = (1..8).map(|j| (0, j, None)).collect();
        let s = NegativeSampler::new(10, &known, SamplingMode::Degree, false);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..2000)
                .map(|_| s.sample(9, None, &mut rng))
                .collect::<Vec<_>>()
        };
        let a = run(5);
        assert_eq!(a, run(5));
        let hub = a.iter().filter(|&&m| m == 0).count();
        let leaf = a.iter().filter(|&&m| m == 8).count();
        assert!(hub > 3 * leaf);
    }
}
