//! Losses, the cluster-variance regularizer, triple and candidate
//! samplers, Adam, and the epoch loop.

use std::collections::BTreeSet;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{derive_seed, ClusterUpdate, Directions, LossKind, SamplerKind, TrainConfig};
use crate::error::{Error, Result};
use crate::features::{center_variance, FeatureSet};
use crate::kg::{check_id, Direction, KnowledgeGraph};
use crate::model::{sigmoid, softmax, Gradients, InstanceGrad, Params};
use crate::par;

const PROB_FLOOR: f64 = 1e-12;

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Sigmoid cross-entropy summed over positives and sampled negatives.
/// An instance without positives contributes nothing.
pub fn pointwise_loss(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(
            "scores and labels differ in length".into(),
        ));
    }
    if !labels.iter().any(|&y| y) {
        log::warn!("instance without a positive label skipped");
        return Ok(0.0);
    }
    Ok(scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let p = if y { s } else { 1.0 - s };
            -p.max(PROB_FLOOR).ln()
        })
        .sum())
}

/// Cross-entropy against the uniform distribution over positives.
pub fn listwise_loss(probs: &[f64], labels: &[bool]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Dimension(
            "probabilities and labels differ in length".into(),
        ));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    if n_pos == 0 {
        return Err(Error::Parameter("instance has no positive label".into()));
    }
    let mut loss = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        if y {
            if p < PROB_FLOOR {
                log::warn!("positive probability {p} clamped to {PROB_FLOOR}");
            }
            loss -= p.max(PROB_FLOOR).ln();
        }
    }
    Ok(loss / n_pos as f64)
}

/// Loss of one instance from its logits, with `dL/dlogit`. The first
/// `n_pos` candidates are the positives. Also returns the score the loss
/// assigns to candidate `target`.
pub(crate) fn instance_objective(
    kind: LossKind,
    logits: &[f64],
    n_pos: usize,
    target: usize,
) -> (f64, Vec<f64>, f64) {
    match kind {
        LossKind::Pointwise => {
            let mut loss = 0.0;
            let mut g = Vec::with_capacity(logits.len());
            for (i, &l) in logits.iter().enumerate() {
                let s = sigmoid(l);
                if i < n_pos {
                    loss += softplus(-l);
                    g.push(s - 1.0);
                } else {
                    loss += softplus(l);
                    g.push(s);
                }
            }
            (loss, g, sigmoid(logits[target]))
        }
        LossKind::Listwise => {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
            let inv = 1.0 / n_pos as f64;
            let loss = -inv * logits[..n_pos].iter().map(|&l| l - lse).sum::<f64>();
            let probs = softmax(logits);
            let g = probs
                .iter()
                .enumerate()
                .map(|(i, &p)| if i < n_pos { p - inv } else { p })
                .collect();
            (loss, g, probs[target])
        }
    }
}

/// Member lists per cluster, derived from the parameter cluster maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMembers {
    pub entity: Vec<Vec<u32>>,
    pub relation: Vec<Vec<u32>>,
}

impl ClusterMembers {
    pub fn from_params(p: &Params) -> Self {
        let group = |assign: &[u32], k: usize| {
            let mut out = vec![Vec::new(); k];
            for (i, &c) in assign.iter().enumerate() {
                out[c as usize].push(i as u32);
            }
            out
        };
        Self {
            entity: group(&p.entity_cluster, p.n_entity_clusters()),
            relation: group(&p.relation_cluster, p.n_relation_clusters()),
        }
    }
}

/// Summed per-dimension population variance of one cluster's rows, and
/// optionally its gradient `2/n (x - mean)` scaled by `scale`.
fn cluster_variance(
    emb: &Array2<f64>,
    members: &[u32],
    grad: Option<(&mut Array2<f64>, f64)>,
) -> f64 {
    let n = members.len();
    if n < 2 {
        return 0.0;
    }
    let mut mean = Array1::<f64>::zeros(emb.ncols());
    for &m in members {
        mean += &emb.row(m as usize);
    }
    mean /= n as f64;
    let mut v = 0.0;
    for &m in members {
        let d = &emb.row(m as usize) - &mean;
        v += d.dot(&d);
    }
    if let Some((g, scale)) = grad {
        let c = 2.0 * scale / n as f64;
        for &m in members {
            let d = &emb.row(m as usize) - &mean;
            g.row_mut(m as usize).scaled_add(c, &d);
        }
    }
    v / n as f64
}

/// Cluster-variance regularizer over every entity and relation cluster.
pub fn cluster_regularizer(p: &Params) -> f64 {
    let members = ClusterMembers::from_params(p);
    let e: f64 = members
        .entity
        .iter()
        .map(|m| cluster_variance(&p.entity, m, None))
        .sum();
    let r: f64 = members
        .relation
        .iter()
        .map(|m| cluster_variance(&p.relation, m, None))
        .sum();
    e + r
}

/// Regularizer restricted to the given clusters; adds `delta` times its
/// gradient into `grads` when supplied.
pub fn regularizer_subset(
    p: &Params,
    members: &ClusterMembers,
    entity_clusters: &BTreeSet<u32>,
    relation_clusters: &BTreeSet<u32>,
    delta: f64,
    mut grads: Option<&mut Gradients>,
) -> f64 {
    let mut total = 0.0;
    for &c in entity_clusters {
        let g = grads.as_deref_mut().map(|g| (&mut g.entity, delta));
        total += cluster_variance(&p.entity, &members.entity[c as usize], g);
    }
    for &c in relation_clusters {
        let g = grads.as_deref_mut().map(|g| (&mut g.relation, delta));
        total += cluster_variance(&p.relation, &members.relation[c as usize], g);
    }
    total
}

/// One training query: predict `direction` side of `(anchor, relation)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub anchor: u32,
    pub relation: u32,
    pub direction: Direction,
    /// The entity on the predicted side of the source triple.
    pub target: u32,
    /// Index of the source triple in the training split.
    pub triple: usize,
    /// Positives (sorted) followed by sampled negatives (sorted).
    pub candidates: Vec<u32>,
    pub n_positive: usize,
}

impl Instance {
    pub fn positives(&self) -> &[u32] {
        &self.candidates[..self.n_positive]
    }

    pub fn labels(&self) -> Vec<bool> {
        (0..self.candidates.len())
            .map(|i| i < self.n_positive)
            .collect()
    }

    fn target_index(&self) -> usize {
        self.positives()
            .binary_search(&self.target)
            .expect("target is a positive")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub instances: Vec<Instance>,
}

/// Weighted triple-selection probabilities: each training triple gets
/// `level(r) / (count(r) * distinct_relations(h as head) * distinct_relations(t as tail))`,
/// normalized to sum to 1.
pub fn weighted_probs(kg: &KnowledgeGraph) -> Result<Vec<f64>> {
    if kg.train.is_empty() {
        return Err(Error::Parameter("empty training split".into()));
    }
    let s = &kg.stats;
    let raw: Vec<f64> = kg
        .train
        .iter()
        .map(|t| {
            let level = s.level[t.relation as usize] as f64;
            let denom = s.triples_per_relation[t.relation as usize] as f64
                * s.relations_per_head[t.head as usize] as f64
                * s.relations_per_tail[t.tail as usize] as f64;
            level / denom
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Chooses which triples enter each epoch and which negatives each
/// instance sees.
#[derive(Debug, Clone)]
pub struct Sampler {
    kind: SamplerKind,
    p_y: f64,
    rng: ChaCha8Rng,
    probs: Vec<f64>,
    ema: Vec<f64>,
    ema_decay: f64,
    ema_floor: f64,
}

impl Sampler {
    pub fn new(
        kind: SamplerKind,
        kg: &KnowledgeGraph,
        cfg: &TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        if !(cfg.p_y > 0.0 && cfg.p_y <= 1.0) {
            return Err(Error::Parameter(format!(
                "p_y must be in (0, 1], got {}",
                cfg.p_y
            )));
        }
        let n = kg.train.len();
        Ok(Self {
            kind,
            p_y: cfg.p_y,
            rng: ChaCha8Rng::seed_from_u64(seed),
            probs: match kind {
                SamplerKind::Weighted => weighted_probs(kg)?,
                _ => Vec::new(),
            },
            ema: vec![0.5; n],
            ema_decay: cfg.ema_decay,
            ema_floor: cfg.ema_floor,
        })
    }

    pub fn kind(&self) -> SamplerKind {
        self.kind
    }

    /// Weighted-mode probability table.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn ema(&self) -> &[f64] {
        &self.ema
    }

    /// Triple indices for one epoch: a permutation for candidate sampling,
    /// otherwise `n` independent draws from the current weights.
    pub fn epoch_order(&mut self, n: usize) -> Result<Vec<usize>> {
        if n == 0 {
            return Err(Error::Parameter("empty training split".into()));
        }
        match self.kind {
            SamplerKind::Candidate => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut self.rng);
                Ok(order)
            }
            SamplerKind::Weighted => {
                let probs = self.probs.clone();
                self.draw(&probs, n)
            }
            SamplerKind::Adaptive => {
                let w = self.adaptive_weights();
                self.draw(&w, n)
            }
        }
    }

    /// `n` i.i.d. draws proportional to `weights`.
    pub fn draw(&mut self, weights: &[f64], n: usize) -> Result<Vec<usize>> {
        let dist = WeightedIndex::new(weights)
            .map_err(|e| Error::Numerical(format!("sampling weights: {e}")))?;
        Ok((0..n).map(|_| dist.sample(&mut self.rng)).collect())
    }

    /// Every entity outside `positives` independently with probability p_y,
    /// in increasing id order. `positives` must be sorted.
    pub fn sample_negatives(&mut self, n_entities: usize, positives: &[u32]) -> Vec<u32> {
        let mut out = Vec::with_capacity((n_entities as f64 * self.p_y) as usize + 1);
        let mut pos = positives.iter().peekable();
        for e in 0..n_entities as u32 {
            if pos.peek() == Some(&&e) {
                pos.next();
                continue;
            }
            if self.p_y >= 1.0 || self.rng.gen::<f64>() < self.p_y {
                out.push(e);
            }
        }
        out
    }

    /// Folds a new positive score into a triple's moving average.
    pub fn adaptive_update(&mut self, triple: usize, score: f64) -> Result<()> {
        check_id("triple", triple, self.ema.len())?;
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Parameter(format!("score {score} outside [0, 1]")));
        }
        let e = &mut self.ema[triple];
        *e = self.ema_decay * *e + (1.0 - self.ema_decay) * score;
        Ok(())
    }

    /// Unnormalized adaptive weights `(1 - ema) + floor`.
    pub fn adaptive_weights(&self) -> Vec<f64> {
        self.ema
            .iter()
            .map(|&e| (1.0 - e) + self.ema_floor)
            .collect()
    }

    /// Builds the instance for training triple `triple` in `direction`.
    pub fn make_instance(
        &mut self,
        kg: &KnowledgeGraph,
        triple: usize,
        direction: Direction,
    ) -> Instance {
        let t = &kg.train[triple];
        let (anchor, target) = direction.split(t);
        let positives = kg.train_index.answers(anchor, t.relation, direction);
        let mut candidates = positives.to_vec();
        candidates.extend(self.sample_negatives(kg.n_entities(), positives));
        Instance {
            anchor,
            relation: t.relation,
            direction,
            target,
            triple,
            candidates,
            n_positive: positives.len(),
        }
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(shapes: &[usize], cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(p: &Params, cfg: &TrainConfig) -> Self {
        let shapes: Vec<usize> = p.trainable().iter().map(|s| s.len()).collect();
        Self::new(&shapes, cfg)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Gradients are checked for NaN/Inf before anything moves.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension(
                "optimizer/parameter group mismatch".into(),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != p.len() {
                return Err(Error::Dimension(format!(
                    "parameter group {i} changed shape"
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in parameter group {i} at step {}",
                    self.step + 1
                )));
            }
        }
        let step = self.step + 1;
        let bc1 = 1.0 - self.beta1.powi(step as i32);
        let bc2 = 1.0 - self.beta2.powi(step as i32);
        let (b1, b2, lr, eps, wd) = (self.beta1, self.beta2, self.lr, self.eps, self.weight_decay);
        let next = |m: f64, v: f64, p: f64, g: f64| {
            let m = b1 * m + (1.0 - b1) * g;
            let v = b2 * v + (1.0 - b2) * g * g;
            let p = p - lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            (m, v, p - wd * p)
        };
        // Dry run first so a diverging step leaves parameters and moments untouched.
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let (m, v) = (&self.m[i], &self.v[i]);
            if (0..p.len()).any(|j| !next(m[j], v[j], p[j], g[j]).2.is_finite()) {
                return Err(Error::Numerical(format!(
                    "update would make parameter group {i} non-finite at step {step}"
                )));
            }
        }
        self.step = step;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                (m[j], v[j], p[j]) = next(m[j], v[j], p[j], g[j]);
            }
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut Params, grads: &Gradients) -> Result<()> {
        let mut p = params.trainable_mut();
        self.update(&mut p, &grads.slices())?;
        if !params.is_finite() {
            return Err(Error::Numerical(format!(
                "parameters became non-finite at step {}",
                self.step
            )));
        }
        Ok(())
    }
}

/// Loss terms of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    /// Summed cross-entropy over instances.
    pub ce: f64,
    /// Regularizer over the clusters touched by the batch (before delta).
    pub regularizer: f64,
    /// `ce + delta * regularizer`
    pub total: f64,
    pub instance_losses: Vec<f64>,
    /// Score of each instance's target under the active loss.
    pub target_scores: Vec<f64>,
}

/// Clusters touched by a batch: those of anchors and positive entities,
/// and of the relations used.
pub fn touched_clusters(p: &Params, batch: &Batch) -> (BTreeSet<u32>, BTreeSet<u32>) {
    let mut ent = BTreeSet::new();
    let mut rel = BTreeSet::new();
    for inst in &batch.instances {
        ent.insert(p.entity_cluster[inst.anchor as usize]);
        for &e in inst.positives() {
            ent.insert(p.entity_cluster[e as usize]);
        }
        rel.insert(p.relation_cluster[inst.relation as usize]);
    }
    (ent, rel)
}

/// Batched objective through the staged tensor path. When `grads` is
/// given, it is overwritten with the exact gradient of `total`.
pub fn batch_objective(
    p: &Params,
    batch: &Batch,
    loss: LossKind,
    delta: f64,
    members: &ClusterMembers,
    grads: Option<&mut Gradients>,
) -> Result<Objective> {
    let pairs: Vec<(u32, u32)> = batch
        .instances
        .iter()
        .map(|i| (i.anchor, i.relation))
        .collect();
    let fwd = p.forward_batch(&pairs)?;
    let want_grad = grads.is_some();
    let per: Vec<Result<(f64, f64, Option<InstanceGrad>)>> =
        par::map_range(batch.instances.len(), |i| {
            let inst = &batch.instances[i];
            if inst.n_positive == 0 {
                return Err(Error::Parameter("instance has no positive label".into()));
            }
            let cache = fwd.get(i, p.mode);
            let logits = p.logits(cache.t(), &inst.candidates)?;
            let (l, dlogits, score) =
                instance_objective(loss, &logits, inst.n_positive, inst.target_index());
            let g = want_grad.then(|| {
                p.backprop(
                    inst.anchor,
                    inst.relation,
                    cache,
                    &inst.candidates,
                    &dlogits,
                )
            });
            Ok((l, score, g))
        });
    let (ent, rel) = touched_clusters(p, batch);
    let mut instance_losses = Vec::with_capacity(per.len());
    let mut target_scores = Vec::with_capacity(per.len());
    let mut grads = grads;
    if let Some(g) = grads.as_deref_mut() {
        g.clear();
    }
    for r in per {
        let (l, s, ig) = r?;
        instance_losses.push(l);
        target_scores.push(s);
        if let (Some(g), Some(ig)) = (grads.as_deref_mut(), ig) {
            g.add_instance(&ig);
        }
    }
    let ce: f64 = instance_losses.iter().sum();
    let regularizer = if delta > 0.0 {
        regularizer_subset(p, members, &ent, &rel, delta, grads)
    } else {
        0.0
    };
    Ok(Objective {
        ce,
        regularizer,
        total: ce + delta * regularizer,
        instance_losses,
        target_scores,
    })
}

/// Loss of one instance through the unbatched combine.
pub fn instance_loss(p: &Params, inst: &Instance, loss: LossKind) -> Result<f64> {
    let c = p.combine(inst.anchor, inst.relation)?;
    let logits = p.logits(c.t(), &inst.candidates)?;
    Ok(instance_objective(loss, &logits, inst.n_positive, inst.target_index()).0)
}

/// Cluster centers in embedding space, kept for adaptive reassignment.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterCenters {
    pub entity: Array2<f64>,
    pub relation: Array2<f64>,
}

fn member_mean(emb: &Array2<f64>, members: &[u32]) -> Option<Array1<f64>> {
    if members.is_empty() {
        return None;
    }
    let mut m = Array1::<f64>::zeros(emb.ncols());
    for &i in members {
        m += &emb.row(i as usize);
    }
    Some(m / members.len() as f64)
}

impl ClusterCenters {
    pub fn compute(p: &Params, members: &ClusterMembers) -> Self {
        let mut c = Self {
            entity: Array2::zeros((p.n_entity_clusters(), p.dims_entity())),
            relation: Array2::zeros((p.n_relation_clusters(), p.dims_relation())),
        };
        let all_e: BTreeSet<u32> = (0..p.n_entity_clusters() as u32).collect();
        let all_r: BTreeSet<u32> = (0..p.n_relation_clusters() as u32).collect();
        c.update(p, members, &all_e, &all_r);
        c
    }

    /// Recomputes the centers of the listed clusters as member means.
    /// Empty clusters keep their previous center.
    pub fn update(
        &mut self,
        p: &Params,
        members: &ClusterMembers,
        entity_clusters: &BTreeSet<u32>,
        relation_clusters: &BTreeSet<u32>,
    ) {
        for &c in entity_clusters {
            if let Some(m) = member_mean(&p.entity, &members.entity[c as usize]) {
                self.entity.row_mut(c as usize).assign(&m);
            }
        }
        for &c in relation_clusters {
            if let Some(m) = member_mean(&p.relation, &members.relation[c as usize]) {
                self.relation.row_mut(c as usize).assign(&m);
            }
        }
    }

    /// Moves every item to its nearest center, keeping the current cluster
    /// on ties. Returns the number of items that moved.
    pub fn reassign(&self, p: &mut Params) -> usize {
        fn nearest(row: ndarray::ArrayView1<'_, f64>, centers: &Array2<f64>, current: u32) -> u32 {
            let dist = |c: usize| {
                let d = &row - &centers.row(c);
                d.dot(&d)
            };
            let mut best = (dist(current as usize), current);
            for c in 0..centers.nrows() {
                let d = dist(c);
                if d < best.0 {
                    best = (d, c as u32);
                }
            }
            best.1
        }
        let new_e = par::map_range(p.n_entities(), |i| {
            nearest(p.entity.row(i), &self.entity, p.entity_cluster[i])
        });
        let new_r = par::map_range(p.n_relations(), |i| {
            nearest(p.relation.row(i), &self.relation, p.relation_cluster[i])
        });
        let moved = new_e
            .iter()
            .zip(&p.entity_cluster)
            .filter(|(a, b)| a != b)
            .count()
            + new_r
                .iter()
                .zip(&p.relation_cluster)
                .filter(|(a, b)| a != b)
                .count();
        p.entity_cluster = new_e;
        p.relation_cluster = new_r;
        moved
    }
}

/// Center variance of the current entity and relation cluster means.
pub fn embedding_center_variance(p: &Params, members: &ClusterMembers) -> (f64, f64) {
    let stack = |emb: &Array2<f64>, groups: &[Vec<u32>]| {
        let rows: Vec<Array1<f64>> = groups.iter().filter_map(|m| member_mean(emb, m)).collect();
        let mut out = Array2::<f64>::zeros((rows.len(), emb.ncols()));
        for (mut o, r) in out.rows_mut().into_iter().zip(rows) {
            o.assign(&r);
        }
        center_variance(out.view())
    };
    (
        stack(&p.entity, &members.entity),
        stack(&p.relation, &members.relation),
    )
}

/// One row of the cluster-center variance trace. Septile 0 of epoch 0 is
/// the state before training; septiles 1..=7 follow each seventh of an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceRow {
    pub epoch: usize,
    pub septile: usize,
    pub entity: f64,
    pub relation: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VarianceTrace {
    pub rows: Vec<VarianceRow>,
}

impl VarianceTrace {
    /// Rows divided by the first row's values (0 stays 0 when the baseline is 0).
    pub fn relative(&self) -> Vec<VarianceRow> {
        let Some(first) = self.rows.first() else {
            return Vec::new();
        };
        let rel = |x: f64, base: f64| {
            if base > 0.0 {
                x / base
            } else if x == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        };
        self.rows
            .iter()
            .map(|r| VarianceRow {
                entity: rel(r.entity, first.entity),
                relation: rel(r.relation, first.relation),
                ..*r
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("epoch,septile,entity_relative,relation_relative,entity,relation\n");
        for (rel, raw) in self.relative().iter().zip(&self.rows) {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                raw.epoch, raw.septile, rel.entity, rel.relation, raw.entity, raw.relation
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy per instance.
    pub mean_loss: f64,
    /// Mean of `ce + delta * regularizer` per batch, divided by batch size.
    pub mean_total: f64,
    pub n_instances: usize,
    pub n_batches: usize,
    pub seconds: f64,
    /// Regularizer over every cluster at the end of the epoch.
    pub regularizer: f64,
    pub reassigned: usize,
}

/// Owns the mutable training state for one run.
pub struct Trainer<'a> {
    kg: &'a KnowledgeGraph,
    cfg: TrainConfig,
    pub params: Params,
    adam: Adam,
    sampler: Sampler,
    members: ClusterMembers,
    centers: Option<ClusterCenters>,
    grads: Gradients,
    epoch: usize,
    trace: Option<VarianceTrace>,
}

impl<'a> Trainer<'a> {
    pub fn new(kg: &'a KnowledgeGraph, cfg: TrainConfig, features: &FeatureSet) -> Result<Self> {
        cfg.validate()?;
        if features.entity.ncols() != cfg.dims_entity
            || features.relation.ncols() != cfg.dims_relation
        {
            return Err(Error::Config(format!(
                "config dims {}/{} do not match feature widths {}/{}",
                cfg.dims_entity,
                cfg.dims_relation,
                features.entity.ncols(),
                features.relation.ncols()
            )));
        }
        if features.entity.nrows() != kg.n_entities()
            || features.relation.nrows() != kg.n_relations()
        {
            return Err(Error::Dimension(format!(
                "features cover {}/{} items, graph has {}/{}",
                features.entity.nrows(),
                features.relation.nrows(),
                kg.n_entities(),
                kg.n_relations()
            )));
        }
        let params = Params::new(
            cfg.mode,
            cfg.activation,
            features,
            derive_seed(cfg.seed, "init"),
        )?;
        Self::with_params(kg, cfg, params)
    }

    /// Continues from existing parameters with fresh optimizer state.
    pub fn with_params(kg: &'a KnowledgeGraph, cfg: TrainConfig, params: Params) -> Result<Self> {
        cfg.validate()?;
        if params.n_entities() != kg.n_entities() || params.n_relations() != kg.n_relations() {
            return Err(Error::Dimension("parameters do not match the graph".into()));
        }
        let sampler = Sampler::new(cfg.sampler, kg, &cfg, derive_seed(cfg.seed, "sampler"))?;
        let members = ClusterMembers::from_params(&params);
        let centers = (cfg.cluster_update == ClusterUpdate::Adaptive)
            .then(|| ClusterCenters::compute(&params, &members));
        Ok(Self {
            kg,
            adam: Adam::for_params(&params, &cfg),
            grads: Gradients::zeros_like(&params),
            cfg,
            params,
            sampler,
            members,
            centers,
            epoch: 0,
            trace: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn sampler(&self) -> &Sampler {
        &self.sampler
    }

    pub fn members(&self) -> &ClusterMembers {
        &self.members
    }

    /// Starts recording center variance at septile checkpoints.
    pub fn enable_variance_trace(&mut self) {
        let (e, r) = embedding_center_variance(&self.params, &self.members);
        self.trace = Some(VarianceTrace {
            rows: vec![VarianceRow {
                epoch: self.epoch,
                septile: 0,
                entity: e,
                relation: r,
            }],
        });
    }

    pub fn variance_trace(&self) -> Option<&VarianceTrace> {
        self.trace.as_ref()
    }

    fn directions(&self) -> &'static [Direction] {
        match self.cfg.directions {
            Directions::Both => &[Direction::Tail, Direction::Head],
            Directions::TailOnly => &[Direction::Tail],
        }
    }

    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        let start = Instant::now();
        let order = self.sampler.epoch_order(self.kg.train.len())?;
        let dirs = self.directions();
        let queries: Vec<(usize, Direction)> = order
            .iter()
            .flat_map(|&t| dirs.iter().map(move |&d| (t, d)))
            .collect();
        let bs = self.cfg.batch_size;
        let n_batches = queries.len().div_ceil(bs);
        let mut ce_sum = 0.0;
        let mut total_sum = 0.0;
        let mut next_septile = 1;
        for (b, chunk) in queries.chunks(bs).enumerate() {
            let batch = Batch {
                instances: chunk
                    .iter()
                    .map(|&(t, d)| self.sampler.make_instance(self.kg, t, d))
                    .collect(),
            };
            let obj = batch_objective(
                &self.params,
                &batch,
                self.cfg.loss,
                self.cfg.delta,
                &self.members,
                Some(&mut self.grads),
            )?;
            if !obj.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss in epoch {} batch {b}",
                    self.epoch + 1
                )));
            }
            self.adam.step(&mut self.params, &self.grads)?;
            ce_sum += obj.ce;
            total_sum += obj.total;
            if self.sampler.kind() == SamplerKind::Adaptive {
                for (inst, &s) in batch.instances.iter().zip(&obj.target_scores) {
                    self.sampler
                        .adaptive_update(inst.triple, s.clamp(0.0, 1.0))?;
                }
            }
            if let Some(centers) = self.centers.as_mut() {
                let (ent, rel) = touched_clusters(&self.params, &batch);
                centers.update(&self.params, &self.members, &ent, &rel);
            }
            while next_septile <= 7 && (b + 1) * 7 >= next_septile * n_batches {
                if let Some(trace) = self.trace.as_mut() {
                    let (e, r) = embedding_center_variance(&self.params, &self.members);
                    trace.rows.push(VarianceRow {
                        epoch: self.epoch + 1,
                        septile: next_septile,
                        entity: e,
                        relation: r,
                    });
                }
                next_septile += 1;
            }
        }
        let mut reassigned = 0;
        if let Some(centers) = self.centers.as_mut() {
            reassigned = centers.reassign(&mut self.params);
            self.members = ClusterMembers::from_params(&self.params);
            *centers = ClusterCenters::compute(&self.params, &self.members);
        }
        self.epoch += 1;
        Ok(EpochStats {
            epoch: self.epoch,
            mean_loss: ce_sum / queries.len() as f64,
            mean_total: total_sum / queries.len() as f64,
            n_instances: queries.len(),
            n_batches,
            seconds: start.elapsed().as_secs_f64(),
            regularizer: cluster_regularizer(&self.params),
            reassigned,
        })
    }

    /// Runs the configured number of epochs, calling `on_epoch` after each.
    pub fn train<F>(&mut self, mut on_epoch: F) -> Result<Vec<EpochStats>>
    where
        F: FnMut(&EpochStats, &Params),
    {
        let mut stats = Vec::with_capacity(self.cfg.epochs);
        for _ in 0..self.cfg.epochs {
            let s = self.run_epoch()?;
            log::info!(
                "epoch {} loss {:.6} ({} instances, {:.2}s)",
                s.epoch,
                s.mean_loss,
                s.n_instances,
                s.seconds
            );
            on_epoch(&s, &self.params);
            stats.push(s);
        }
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Mode;
    use crate::kg::{Triple, Vocabulary};
    use approx::assert_abs_diff_eq;

    #[test]
    fn pointwise_loss_cases() {
        let eps = 1e-6;
        let l = pointwise_loss(&[1.0 - eps, eps], &[true, false]).unwrap();
        assert!(l < 1e-5 * 2.0);
        assert_abs_diff_eq!(
            pointwise_loss(&[0.5], &[true]).unwrap(),
            2f64.ln(),
            epsilon = 1e-15
        );
        let s = [0.9, 0.2, 0.7, 0.4, 0.1];
        let y = [true, false, true, false, false];
        let oracle = -(0.9f64.ln() + 0.8f64.ln() + 0.7f64.ln() + 0.6f64.ln() + 0.9f64.ln());
        assert_abs_diff_eq!(pointwise_loss(&s, &y).unwrap(), oracle, epsilon = 1e-12);
        assert_eq!(pointwise_loss(&[0.3], &[false]).unwrap(), 0.0);
    }

    #[test]
    fn listwise_loss_cases() {
        assert_eq!(listwise_loss(&[1.0, 0.0], &[true, false]).unwrap(), 0.0);
        let s = 7;
        let u = vec![1.0 / s as f64; s];
        let mut y = vec![false; s];
        y[3] = true;
        assert_abs_diff_eq!(
            listwise_loss(&u, &y).unwrap(),
            (s as f64).ln(),
            epsilon = 1e-12
        );
        let p = [0.1, 0.4, 0.3, 0.2];
        let y = [false, true, false, true];
        let oracle = -(0.5 * 0.4f64.ln() + 0.5 * 0.2f64.ln());
        assert_abs_diff_eq!(listwise_loss(&p, &y).unwrap(), oracle, epsilon = 1e-12);
        assert!(listwise_loss(&p, &[false; 4]).is_err());
        assert!(listwise_loss(&[0.0, 1.0], &[true, false])
            .unwrap()
            .is_finite());
    }

    #[test]
    fn objective_agrees_with_score_based_losses() {
        let logits = [0.3, -1.2, 2.0, 0.1];
        let labels = [true, true, false, false];
        let sig: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
        let (l, _, _) = instance_objective(LossKind::Pointwise, &logits, 2, 0);
        assert_abs_diff_eq!(l, pointwise_loss(&sig, &labels).unwrap(), epsilon = 1e-12);
        let (l, _, _) = instance_objective(LossKind::Listwise, &logits, 2, 0);
        assert_abs_diff_eq!(
            l,
            listwise_loss(&softmax(&logits), &labels).unwrap(),
            epsilon = 1e-12
        );
    }

    fn kg(triples: &[(u32, u32, u32)], names: &[&str]) -> KnowledgeGraph {
        let n_e = triples.iter().map(|t| t.0.max(t.2)).max().unwrap() as usize + 1;
        let vocab = Vocabulary::from_names(
            (0..n_e).map(|i| format!("e{i}")).collect(),
            names.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap();
        let train = triples
            .iter()
            .map(|&(h, r, t)| Triple::new(h, r, t))
            .collect();
        KnowledgeGraph::from_splits(vocab, train, vec![], vec![]).unwrap()
    }

    #[test]
    fn weighted_probs_cases() {
        let one = kg(&[(0, 0, 1)], &["r"]);
        assert_eq!(weighted_probs(&one).unwrap(), vec![1.0]);
        let g = kg(
            &[(0, 0, 1), (2, 0, 3), (4, 0, 5), (6, 1, 7), (8, 1, 9)],
            &["a", "b"],
        );
        let p = weighted_probs(&g).unwrap();
        assert!(p[3] > p[0]);
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn adaptive_ema_closed_form() {
        let g = kg(&[(0, 0, 1), (1, 0, 2)], &["r"]);
        let mut s = Sampler::new(SamplerKind::Adaptive, &g, &TrainConfig::default(), 0).unwrap();
        let w = s.adaptive_weights();
        assert_eq!(w[0], w[1]);
        for _ in 0..3 {
            s.adaptive_update(0, 1.0).unwrap();
        }
        assert_abs_diff_eq!(s.ema()[0], 0.6355, epsilon = 1e-12);
        assert!(s.adaptive_update(5, 0.5).is_err());
        s.ema[0] = 0.0;
        s.ema[1] = 1.0;
        let w = s.adaptive_weights();
        assert!(w[0] > w[1]);
    }

    #[test]
    fn negatives_exclude_positives() {
        let g = kg(&[(0, 0, 1)], &["r"]);
        let cfg = TrainConfig {
            p_y: 1.0,
            ..TrainConfig::default()
        };
        let mut s = Sampler::new(SamplerKind::Candidate, &g, &cfg, 0).unwrap();
        assert_eq!(s.sample_negatives(6, &[1, 4]), vec![0, 2, 3, 5]);
        let cfg = TrainConfig {
            p_y: 0.0,
            ..TrainConfig::default()
        };
        assert!(Sampler::new(SamplerKind::Candidate, &g, &cfg, 0).is_err());
    }

    #[test]
    fn adam_refuses_overflowing_step() {
        let cfg = TrainConfig {
            lr: 1e308,
            ..TrainConfig::default()
        };
        let mut adam = Adam::new(&[2], &cfg);
        let mut x = [f64::MAX, 0.0];
        let err = adam.update(&mut [&mut x[..]], &[&[-1.0, 1.0]]);
        assert!(matches!(err, Err(Error::Numerical(_))));
        assert_eq!(x, [f64::MAX, 0.0]);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn adam_first_step_and_limit() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut adam = Adam::new(&[1], &cfg);
        let mut x = [0.0];
        adam.update(&mut [&mut x[..]], &[&[1.0]]).unwrap();
        assert_abs_diff_eq!(x[0], -0.01, epsilon = 1e-8);
        for _ in 0..199 {
            let before = x[0];
            adam.update(&mut [&mut x[..]], &[&[1.0]]).unwrap();
            let step = (x[0] - before).abs();
            assert!(step <= 0.01 + 1e-12);
            if adam.steps() == 200 {
                assert!(step >= 0.009);
            }
        }
        let mut y = [0.5];
        let mut zero = Adam::new(&[1], &cfg);
        zero.update(&mut [&mut y[..]], &[&[0.0]]).unwrap();
        assert_eq!(y[0], 0.5);
        assert!(matches!(
            zero.update(&mut [&mut y[..]], &[&[f64::NAN]]),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn regularizer_hand_cases() {
        let fs = FeatureSet {
            entity: Array2::ones((3, 1)),
            relation: Array2::ones((1, 1)),
            entity_cluster: vec![0, 0, 0],
            relation_cluster: vec![0],
        };
        let mut p = Params::new(Mode::ProjB, crate::config::Activation::Sigmoid, &fs, 0).unwrap();
        p.entity
            .column_mut(0)
            .assign(&ndarray::array![0.0, 2.0, 1.0]);
        assert_abs_diff_eq!(cluster_regularizer(&p), 2.0 / 3.0, epsilon = 1e-15);
        p.entity.column_mut(0).fill(4.0);
        assert_eq!(cluster_regularizer(&p), 0.0);
    }

    #[test]
    fn centers_and_reassignment() {
        let fs = FeatureSet {
            entity: Array2::ones((3, 2)),
            relation: Array2::ones((1, 2)),
            entity_cluster: vec![0, 0, 1],
            relation_cluster: vec![0],
        };
        let mut p = Params::new(Mode::ProjB, crate::config::Activation::Sigmoid, &fs, 0).unwrap();
        p.entity.row_mut(0).assign(&ndarray::array![0.0, 0.0]);
        p.entity.row_mut(1).assign(&ndarray::array![2.0, 2.0]);
        p.entity.row_mut(2).assign(&ndarray::array![2.1, 2.1]);
        let m = ClusterMembers::from_params(&p);
        let c = ClusterCenters::compute(&p, &m);
        assert_eq!(c.entity.row(0).to_vec(), vec![1.0, 1.0]);
        assert_eq!(c.entity.row(1).to_vec(), vec![2.1, 2.1]);
        let before: Vec<f64> = (0..3)
            .map(|i| {
                let d = &p.entity.row(i) - &c.entity.row(p.entity_cluster[i] as usize);
                d.dot(&d)
            })
            .collect();
        c.reassign(&mut p);
        for i in 0..3 {
            let d = &p.entity.row(i) - &c.entity.row(p.entity_cluster[i] as usize);
            assert!(d.dot(&d) <= before[i]);
        }
        assert_eq!(p.entity_cluster[1], 1);
    }
}
