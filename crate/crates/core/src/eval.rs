//! Ranking metrics and the experiment harnesses built on top of training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::config::{
    derive_seed, ClusterUpdate, Directions, LossKind, Mode, SamplerKind, TrainConfig,
};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::kg::{check_id, Direction, FilterIndex, KnowledgeGraph, Triple};
use crate::model::Params;
use crate::par;
use crate::train::{instance_objective, Trainer};

/// Raw and filtered rank of one query's true entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Rank {
    pub raw: usize,
    pub filtered: usize,
}

/// Ranks `target` among all entities for the query `(anchor, relation, ?)`
/// in `direction`. Ties count against the target. With a filter index,
/// other known answers scoring at least as high are removed.
pub fn rank_entity(
    p: &Params,
    anchor: u32,
    relation: u32,
    target: u32,
    direction: Direction,
    filter: Option<&FilterIndex>,
) -> Result<Rank> {
    check_id("entity", target as usize, p.n_entities())?;
    let c = p.combine(anchor, relation)?;
    let scores = p.logits_all(c.t());
    Ok(rank_from_scores(
        scores.as_slice().expect("contiguous"),
        target,
        filter.map(|f| f.answers(anchor, relation, direction)),
    ))
}

/// Pessimistic rank from a full score vector.
pub fn rank_from_scores(scores: &[f64], target: u32, known: Option<&[u32]>) -> Rank {
    let st = scores[target as usize];
    let ahead = |j: usize| j != target as usize && !(scores[j] < st);
    let raw = 1 + (0..scores.len()).filter(|&j| ahead(j)).count();
    let removed = known.map_or(0, |k| k.iter().filter(|&&j| ahead(j as usize)).count());
    Rank {
        raw,
        filtered: raw - removed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankRow {
    pub head: u32,
    pub relation: u32,
    pub tail: u32,
    pub direction: Direction,
    pub raw: usize,
    pub filtered: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankReport {
    pub rows: Vec<RankRow>,
}

impl RankReport {
    fn ranks(&self, filtered: bool, direction: Option<Direction>) -> Vec<usize> {
        self.rows
            .iter()
            .filter(|r| direction.is_none_or(|d| r.direction == d))
            .map(|r| if filtered { r.filtered } else { r.raw })
            .collect()
    }

    /// Fraction of ranks within the top `k`.
    pub fn hits_at(&self, k: usize, filtered: bool, direction: Option<Direction>) -> Result<f64> {
        let r = self.ranks(filtered, direction);
        if r.is_empty() {
            return Err(Error::Parameter("empty rank report".into()));
        }
        Ok(r.iter().filter(|&&x| x <= k).count() as f64 / r.len() as f64)
    }

    pub fn mean_rank(&self, filtered: bool, direction: Option<Direction>) -> Result<f64> {
        let r = self.ranks(filtered, direction);
        if r.is_empty() {
            return Err(Error::Parameter("empty rank report".into()));
        }
        Ok(r.iter().sum::<usize>() as f64 / r.len() as f64)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("head,relation,tail,direction,raw,filtered\n");
        for r in &self.rows {
            let d = match r.direction {
                Direction::Tail => "tail",
                Direction::Head => "head",
            };
            s.push_str(&format!(
                "{},{},{},{d},{},{}\n",
                r.head, r.relation, r.tail, r.raw, r.filtered
            ));
        }
        s
    }
}

fn direction_list(d: Directions) -> &'static [Direction] {
    match d {
        Directions::Both => &[Direction::Tail, Direction::Head],
        Directions::TailOnly => &[Direction::Tail],
    }
}

/// Ranks every triple in the requested directions against all entities.
pub fn evaluate(
    p: &Params,
    triples: &[Triple],
    directions: Directions,
    filter: &FilterIndex,
) -> Result<RankReport> {
    let dirs = direction_list(directions);
    let queries: Vec<(Triple, Direction)> = triples
        .iter()
        .flat_map(|&t| dirs.iter().map(move |&d| (t, d)))
        .collect();
    let rows = par::map_slice(&queries, |&(t, d)| {
        let (anchor, target) = d.split(&t);
        let r = rank_entity(p, anchor, t.relation, target, d, Some(filter))?;
        Ok(RankRow {
            head: t.head,
            relation: t.relation,
            tail: t.tail,
            direction: d,
            raw: r.raw,
            filtered: r.filtered,
        })
    });
    Ok(RankReport {
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}

/// Hits@{1,3,10} in percent plus mean rank for one ranking variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HitsBlock {
    #[serde(rename = "hits@1")]
    pub hits1: f64,
    #[serde(rename = "hits@3")]
    pub hits3: f64,
    #[serde(rename = "hits@10")]
    pub hits10: f64,
    pub mean_rank: f64,
}

impl HitsBlock {
    pub fn from_report(
        r: &RankReport,
        filtered: bool,
        direction: Option<Direction>,
    ) -> Result<Self> {
        Ok(Self {
            hits1: 100.0 * r.hits_at(1, filtered, direction)?,
            hits3: 100.0 * r.hits_at(3, filtered, direction)?,
            hits10: 100.0 * r.hits_at(10, filtered, direction)?,
            mean_rank: r.mean_rank(filtered, direction)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectionMetrics {
    pub direction: Direction,
    pub n_instances: usize,
    pub raw: HitsBlock,
    pub filtered: HitsBlock,
}

/// Headline metrics document.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub dataset: String,
    pub mode: String,
    pub loss: String,
    pub sampler: String,
    pub seed: u64,
    pub config_hash: String,
    /// `tail` (tail prediction only) or `averaged` (both directions pooled).
    pub protocol: String,
    pub n_instances: usize,
    pub raw: HitsBlock,
    pub filtered: HitsBlock,
    pub per_direction: Vec<DirectionMetrics>,
}

impl Metrics {
    /// Headline numbers use tail rows unless `averaged` is set.
    pub fn from_report(
        report: &RankReport,
        cfg: &TrainConfig,
        dataset: &str,
        averaged: bool,
    ) -> Result<Self> {
        let headline = if averaged {
            None
        } else {
            Some(Direction::Tail)
        };
        let mut per_direction = Vec::new();
        for d in [Direction::Tail, Direction::Head] {
            let n = report.rows.iter().filter(|r| r.direction == d).count();
            if n > 0 {
                per_direction.push(DirectionMetrics {
                    direction: d,
                    n_instances: n,
                    raw: HitsBlock::from_report(report, false, Some(d))?,
                    filtered: HitsBlock::from_report(report, true, Some(d))?,
                });
            }
        }
        Ok(Self {
            dataset: dataset.to_string(),
            mode: cfg.mode.to_string(),
            loss: cfg.loss.to_string(),
            sampler: cfg.sampler.to_string(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            protocol: if averaged { "averaged" } else { "tail" }.to_string(),
            n_instances: report.ranks(false, headline).len(),
            raw: HitsBlock::from_report(report, false, headline)?,
            filtered: HitsBlock::from_report(report, true, headline)?,
            per_direction,
        })
    }
}

/// One-sided one-sample t-test of `H0: mean >= mu0` against `mean < mu0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TTest {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub t: f64,
    pub p_value: f64,
    /// `p_value < alpha`
    pub reject: bool,
}

pub fn t_test_less(samples: &[f64], mu0: f64, alpha: f64) -> Result<TTest> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Parameter(format!(
            "t-test needs at least 2 samples, got {n}"
        )));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let (t, p_value) = if sd == 0.0 {
        if mean < mu0 {
            (f64::NEG_INFINITY, 0.0)
        } else if mean > mu0 {
            (f64::INFINITY, 1.0)
        } else {
            (0.0, 1.0)
        }
    } else {
        let t = (mean - mu0) / (sd / (n as f64).sqrt());
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .map_err(|e| Error::Numerical(e.to_string()))?;
        (t, dist.cdf(t))
    };
    Ok(TTest {
        n,
        mean,
        sd,
        t,
        p_value,
        reject: p_value < alpha,
    })
}

/// Mean per-instance loss over `triples` with every entity as a candidate
/// and the answers in `index` as positives.
pub fn mean_cross_entropy(
    p: &Params,
    triples: &[Triple],
    index: &FilterIndex,
    loss: LossKind,
    directions: Directions,
) -> Result<f64> {
    let dirs = direction_list(directions);
    let queries: Vec<(Triple, Direction)> = triples
        .iter()
        .flat_map(|&t| dirs.iter().map(move |&d| (t, d)))
        .collect();
    if queries.is_empty() {
        return Err(Error::Parameter("no triples to score".into()));
    }
    let n_e = p.n_entities();
    let losses = par::map_slice(&queries, |&(t, d)| {
        let (anchor, target) = d.split(&t);
        let positives = index.answers(anchor, t.relation, d);
        let mut candidates = positives.to_vec();
        let mut it = positives.iter().peekable();
        for e in 0..n_e as u32 {
            if it.peek() == Some(&&e) {
                it.next();
            } else {
                candidates.push(e);
            }
        }
        let c = p.combine(anchor, t.relation)?;
        let logits = p.logits(c.t(), &candidates)?;
        let ti = positives
            .binary_search(&target)
            .map_err(|_| Error::Parameter("target is not among the known answers".into()))?;
        Ok(instance_objective(loss, &logits, positives.len(), ti).0)
    });
    let losses: Vec<f64> = losses.into_iter().collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// A model configuration taking part in a comparison.
#[derive(Debug, Clone, Copy)]
pub struct Contender<'a> {
    pub cfg: &'a TrainConfig,
    pub features: &'a FeatureSet,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRow {
    pub trial: usize,
    pub ce_first: Option<f64>,
    pub ce_second: Option<f64>,
    pub ratio: Option<f64>,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialStats {
    pub n_trials: usize,
    pub n_failed: usize,
    pub trials: Vec<TrialRow>,
    /// `None` when fewer than two trials succeeded.
    pub test: Option<TTest>,
}

fn train_and_score(kg: &KnowledgeGraph, c: Contender<'_>, seed: u64) -> Result<f64> {
    let cfg = TrainConfig {
        seed,
        ..c.cfg.clone()
    };
    let mut trainer = Trainer::new(kg, cfg.clone(), c.features)?;
    trainer.train(|_, _| {})?;
    let ce = mean_cross_entropy(
        &trainer.params,
        &kg.train,
        &kg.train_index,
        cfg.loss,
        cfg.directions,
    )?;
    if !ce.is_finite() {
        return Err(Error::Numerical("non-finite cross-entropy".into()));
    }
    Ok(ce)
}

/// Bootstrap comparison: each trial resamples `|train|` triples with
/// replacement, trains both contenders on the sample with the same seed,
/// and records `CE(first) / CE(second)` on that sample. A one-sided t-test
/// asks whether the mean ratio is below 1.
pub fn local_optima_experiment(
    kg: &KnowledgeGraph,
    first: Contender<'_>,
    second: Contender<'_>,
    n_trials: usize,
    seed: u64,
) -> Result<TrialStats> {
    let mut trials = Vec::with_capacity(n_trials);
    for trial in 0..n_trials {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("bootstrap/{trial}")));
        let n = kg.train.len();
        let sample: Vec<Triple> = (0..n).map(|_| kg.train[rng.gen_range(0..n)]).collect();
        let sub = KnowledgeGraph::from_splits(kg.vocab.clone(), sample, vec![], vec![])?;
        let train_seed = derive_seed(seed, &format!("trial/{trial}"));
        let a = train_and_score(&sub, first, train_seed);
        let b = train_and_score(&sub, second, train_seed);
        let row = match (a, b) {
            (Ok(a), Ok(b)) if b > 0.0 => TrialRow {
                trial,
                ce_first: Some(a),
                ce_second: Some(b),
                ratio: Some(a / b),
                failed: false,
            },
            (a, b) => {
                for e in [a.as_ref().err(), b.as_ref().err()].into_iter().flatten() {
                    if !matches!(e, Error::Numerical(_)) {
                        return Err(Error::Config(format!("trial {trial}: {e}")));
                    }
                }
                log::warn!("trial {trial} diverged and is excluded");
                TrialRow {
                    trial,
                    ce_first: a.ok(),
                    ce_second: b.ok(),
                    ratio: None,
                    failed: true,
                }
            }
        };
        trials.push(row);
    }
    let ratios: Vec<f64> = trials.iter().filter_map(|t| t.ratio).collect();
    let n_failed = trials.iter().filter(|t| t.failed).count();
    let test = (ratios.len() >= 2)
        .then(|| t_test_less(&ratios, 1.0, 0.05))
        .transpose()?;
    Ok(TrialStats {
        n_trials,
        n_failed,
        trials,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub batch_size: usize,
    pub seconds: f64,
    pub mean_loss: f64,
}

/// Trains one fresh epoch per batch size and records wall time.
pub fn timing_sweep(
    kg: &KnowledgeGraph,
    features: &FeatureSet,
    cfg: &TrainConfig,
    batch_sizes: &[usize],
) -> Result<Vec<TimingRow>> {
    batch_sizes
        .iter()
        .map(|&bs| {
            let c = TrainConfig {
                batch_size: bs,
                ..cfg.clone()
            };
            let mut t = Trainer::new(kg, c, features)?;
            let s = t.run_epoch()?;
            Ok(TimingRow {
                batch_size: bs,
                seconds: s.seconds,
                mean_loss: s.mean_loss,
            })
        })
        .collect()
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut s = String::from("batch_size,seconds,mean_loss\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.batch_size, r.seconds, r.mean_loss));
    }
    s
}

/// Whether the largest batch size timed strictly faster than the smallest.
pub fn larger_batch_faster(rows: &[TimingRow]) -> Option<bool> {
    let small = rows.iter().min_by_key(|r| r.batch_size)?;
    let large = rows.iter().max_by_key(|r| r.batch_size)?;
    (small.batch_size != large.batch_size).then_some(large.seconds < small.seconds)
}

/// Feature source of a grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    /// Principal-component projection of raw co-occurrence counts.
    Pca,
    /// Cluster-aggregated co-occurrence counts.
    Cluster,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub features: FeatureSource,
    pub cluster_update: String,
    pub sampler: String,
    pub batch_size: usize,
    pub final_loss: f64,
    pub raw_hits10: f64,
    pub filtered_hits10: f64,
    pub filtered_mean_rank: f64,
}

/// Every combination of feature source, cluster update, sampler and batch
/// size, each trained from scratch and evaluated on the test split (the
/// training split when test is empty).
pub fn settings_grid(
    kg: &KnowledgeGraph,
    cfg: &TrainConfig,
    cluster_features: &FeatureSet,
    pca_features: &FeatureSet,
    batch_sizes: &[usize],
) -> Result<Vec<GridCell>> {
    let eval_split = if kg.test.is_empty() {
        &kg.train
    } else {
        &kg.test
    };
    let mut cells = Vec::new();
    for (source, fs) in [
        (FeatureSource::Pca, pca_features),
        (FeatureSource::Cluster, cluster_features),
    ] {
        for update in [ClusterUpdate::None, ClusterUpdate::Adaptive] {
            for sampler in [
                SamplerKind::Candidate,
                SamplerKind::Weighted,
                SamplerKind::Adaptive,
            ] {
                for &bs in batch_sizes {
                    let c = TrainConfig {
                        cluster_update: update,
                        sampler,
                        batch_size: bs,
                        ..cfg.clone()
                    };
                    let mut t = Trainer::new(kg, c.clone(), fs)?;
                    let stats = t.train(|_, _| {})?;
                    let report = evaluate(&t.params, eval_split, Directions::TailOnly, &kg.filter)?;
                    cells.push(GridCell {
                        features: source,
                        cluster_update: update.to_string(),
                        sampler: sampler.to_string(),
                        batch_size: bs,
                        final_loss: stats.last().map_or(f64::NAN, |s| s.mean_loss),
                        raw_hits10: 100.0 * report.hits_at(10, false, None)?,
                        filtered_hits10: 100.0 * report.hits_at(10, true, None)?,
                        filtered_mean_rank: report.mean_rank(true, None)?,
                    });
                }
            }
        }
    }
    Ok(cells)
}

pub fn grid_csv(cells: &[GridCell]) -> String {
    let mut s = String::from(
        "features,cluster_update,sampler,batch_size,final_loss,raw_hits10,filtered_hits10,filtered_mean_rank\n",
    );
    for c in cells {
        let f = match c.features {
            FeatureSource::Pca => "pca",
            FeatureSource::Cluster => "cluster",
        };
        s.push_str(&format!(
            "{f},{},{},{},{},{},{},{}\n",
            c.cluster_update,
            c.sampler,
            c.batch_size,
            c.final_loss,
            c.raw_hits10,
            c.filtered_hits10,
            c.filtered_mean_rank
        ));
    }
    s
}

/// Mode of a contender derived from a base config, for comparisons.
pub fn with_mode(cfg: &TrainConfig, mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        ..cfg.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rank_cases() {
        assert_eq!(
            rank_from_scores(&[0.1, 0.9, 0.3], 1, None),
            Rank {
                raw: 1,
                filtered: 1
            }
        );
        assert_eq!(
            rank_from_scores(&[0.5; 4], 2, None),
            Rank {
                raw: 4,
                filtered: 4
            }
        );
        let r = rank_from_scores(&[0.9, 0.8, 0.7, 0.1], 2, Some(&[0, 2]));
        assert_eq!(
            r,
            Rank {
                raw: 3,
                filtered: 2
            }
        );
    }

    #[test]
    fn hits_cases() {
        let row = |raw| RankRow {
            head: 0,
            relation: 0,
            tail: 0,
            direction: Direction::Tail,
            raw,
            filtered: raw,
        };
        let all_one = RankReport {
            rows: vec![row(1), row(1)],
        };
        assert_eq!(all_one.hits_at(1, true, None).unwrap(), 1.0);
        let mixed = RankReport {
            rows: vec![row(1), row(11)],
        };
        assert_eq!(mixed.hits_at(10, false, None).unwrap(), 0.5);
        assert!(RankReport::default().hits_at(10, false, None).is_err());
    }

    #[test]
    fn t_test_matches_closed_form() {
        // 25 values at 0.7 and 25 at 0.9: mean 0.8, sample sd 0.1 * sqrt(50/49)
        let mut x = vec![0.7; 25];
        x.extend(vec![0.9; 25]);
        let t = t_test_less(&x, 1.0, 0.05).unwrap();
        let sd = (0.01f64 * 50.0 / 49.0).sqrt();
        assert_abs_diff_eq!(t.mean, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(t.sd, sd, epsilon = 1e-12);
        assert_abs_diff_eq!(t.t, -0.2 / (sd / 50f64.sqrt()), epsilon = 1e-9);
        assert!(t.p_value < 1e-10 && t.reject);
        let same = t_test_less(&[1.0; 5], 1.0, 0.05).unwrap();
        assert_eq!(same.p_value, 1.0);
        assert!(!same.reject);
    }

    #[test]
    fn t_test_p_value_reference() {
        // t = -2.0 with 9 degrees of freedom: one-sided p = 0.0382764
        let x = [0.9, 1.1, 0.8, 1.0, 0.7, 0.9, 1.0, 0.8, 0.9, 0.9];
        let t = t_test_less(&x, 1.0, 0.05).unwrap();
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert_abs_diff_eq!(t.t, (mean - 1.0) / (sd / n.sqrt()), epsilon = 1e-12);
        let dist = StudentsT::new(0.0, 1.0, 9.0).unwrap();
        assert_abs_diff_eq!(dist.cdf(-2.0), 0.038_276_4, epsilon = 1e-6);
    }
}
