//! Small deterministic knowledge graphs for tests, examples and benches.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kg::{KnowledgeGraph, Triple, Vocabulary};

fn numbered_vocab(n_e: usize, n_r: usize) -> Vocabulary {
    Vocabulary::from_names(
        (0..n_e).map(|i| format!("e{i}")).collect(),
        (0..n_r).map(|i| format!("r{i}")).collect(),
    )
    .expect("generated names are unique")
}

/// 8 entities, 2 relations, 12 training triples: `r0` links each entity
/// to its successor on a ring, `r1` links entity `i < 4` to `i + 4`.
/// Valid and test are empty.
pub fn tiny_kg() -> KnowledgeGraph {
    let mut train: Vec<Triple> = (0..8).map(|i| Triple::new(i, 0, (i + 1) % 8)).collect();
    train.extend((0..4).map(|i| Triple::new(i, 1, i + 4)));
    KnowledgeGraph::from_splits(numbered_vocab(8, 2), train, vec![], vec![]).expect("ids in range")
}

/// `n_triples` distinct uniformly random triples, all in train.
pub fn random_kg(n_e: usize, n_r: usize, n_triples: usize, seed: u64) -> Result<KnowledgeGraph> {
    assert!(
        n_triples <= n_e * n_e * n_r,
        "cannot draw {n_triples} distinct triples"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut train = Vec::with_capacity(n_triples);
    while train.len() < n_triples {
        let t = Triple::new(
            rng.gen_range(0..n_e as u32),
            rng.gen_range(0..n_r as u32),
            rng.gen_range(0..n_e as u32),
        );
        if seen.insert(t) {
            train.push(t);
        }
    }
    KnowledgeGraph::from_splits(numbered_vocab(n_e, n_r), train, vec![], vec![])
}

/// Shape of a block-structured synthetic KG.
#[derive(Debug, Clone, Copy)]
pub struct RuleKgSpec {
    pub n_entities: usize,
    pub n_relations: usize,
    pub block_size: usize,
    /// Probability that a head in an active block gets a first tail.
    pub p_first: f64,
    /// Probability of an additional second tail.
    pub p_second: f64,
    pub seed: u64,
}

impl Default for RuleKgSpec {
    fn default() -> Self {
        Self {
            n_entities: 500,
            n_relations: 20,
            block_size: 10,
            p_first: 1.0,
            p_second: 0.9,
            seed: 20170,
        }
    }
}

/// Entities are split into consecutive blocks. Each relation maps about
/// half of the blocks onto other blocks through a fixed permutation, and a
/// head's tails are drawn from its mapped block. Triples are shuffled and
/// split 80/10/10 into train/valid/test.
pub fn rule_kg(spec: RuleKgSpec) -> Result<KnowledgeGraph> {
    let n_blocks = spec.n_entities / spec.block_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut triples = BTreeSet::new();
    for r in 0..spec.n_relations as u32 {
        let mut target: Vec<usize> = (0..n_blocks).collect();
        target.shuffle(&mut rng);
        let mut active: Vec<usize> = (0..n_blocks).collect();
        active.shuffle(&mut rng);
        active.truncate(n_blocks.div_ceil(2));
        active.sort_unstable();
        for &block in &active {
            let dest = target[block] * spec.block_size;
            for h in block * spec.block_size..(block + 1) * spec.block_size {
                if rng.gen_bool(spec.p_first) {
                    let t = dest + rng.gen_range(0..spec.block_size);
                    triples.insert(Triple::new(h as u32, r, t as u32));
                    if rng.gen_bool(spec.p_second) {
                        let t = dest + rng.gen_range(0..spec.block_size);
                        triples.insert(Triple::new(h as u32, r, t as u32));
                    }
                }
            }
        }
    }
    let mut all: Vec<Triple> = triples.into_iter().collect();
    all.shuffle(&mut rng);
    let n_test = all.len() / 10;
    let n_valid = all.len() / 10;
    let test = all.split_off(all.len() - n_test);
    let valid = all.split_off(all.len() - n_valid);
    KnowledgeGraph::from_splits(
        numbered_vocab(spec.n_entities, spec.n_relations),
        all,
        valid,
        test,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_kg_shape() {
        let kg = tiny_kg();
        assert_eq!(
            (kg.n_entities(), kg.n_relations(), kg.train.len()),
            (8, 2, 12)
        );
    }

    #[test]
    fn random_kg_is_distinct_and_seeded() {
        let a = random_kg(10, 3, 50, 7).unwrap();
        let b = random_kg(10, 3, 50, 7).unwrap();
        assert_eq!(a.train, b.train);
        let set: BTreeSet<_> = a.train.iter().collect();
        assert_eq!(set.len(), 50);
    }

    #[test]
    fn rule_kg_split_proportions() {
        let kg = rule_kg(RuleKgSpec::default()).unwrap();
        let total = kg.train.len() + kg.valid.len() + kg.test.len();
        assert!(total > 2000, "{total}");
        assert_eq!(kg.test.len(), total / 10);
        assert_eq!(kg.n_entities(), 500);
        assert_eq!(kg.n_relations(), 20);
    }
}
