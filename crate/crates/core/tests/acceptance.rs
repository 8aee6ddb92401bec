//! Acceptance suite. Runs without the libtest harness so the report is
//! always printed: criteria run one after another (the timing check is not
//! disturbed by sibling tests) and each prints a single PASS/FAIL line with
//! its measured values. `--ignored` adds the full FB15K run.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use projb::config::{Activation, Directions, FeatureScale, LossKind, Mode, TrainConfig};
use projb::eval::{evaluate, timing_sweep};
use projb::features::{
    cooccurrence_vectors, featurize, ClusterMethod, FeatureSet, FeaturizeConfig, Grid, ItemKind,
};
use projb::kg::{relation_level, Direction, KnowledgeGraph, Triple, Vocabulary};
use projb::model::{Gradients, Params};
use projb::synth::{random_kg, rule_kg, tiny_kg, RuleKgSpec};
use projb::train::{
    batch_objective, instance_loss, weighted_probs, Batch, ClusterMembers, Instance, Sampler,
    Trainer,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn run(id: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let o = f();
    let el = t0.elapsed();
    let in_time = el <= limit;
    let pass = o.pass && in_time;
    println!(
        "[{}] {id}: {} ({:.2}s of {:.0}s{})",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        el.as_secs_f64(),
        limit.as_secs_f64(),
        if in_time { "" } else { ", over time budget" }
    );
    pass
}

fn kmeans_features(kg: &KnowledgeGraph, k_e: usize, k_r: usize, seed: u64) -> FeatureSet {
    let out = featurize(
        kg,
        &FeaturizeConfig {
            entity_grid: Grid::single(ClusterMethod::KMeans, None, k_e),
            relation_grid: Grid::single(ClusterMethod::KMeans, None, k_r),
            seed,
        },
    )
    .expect("featurize");
    out.features.to_feature_set(FeatureScale::RowMax)
}

fn random_features(
    n_e: usize,
    n_r: usize,
    k_e: usize,
    k_r: usize,
    rng: &mut ChaCha8Rng,
) -> FeatureSet {
    FeatureSet {
        entity: Array2::from_shape_fn((n_e, k_e), |_| rng.gen_range(0.1..1.0)),
        relation: Array2::from_shape_fn((n_r, k_r), |_| rng.gen_range(0.1..1.0)),
        entity_cluster: (0..n_e).map(|_| rng.gen_range(0..k_e as u32)).collect(),
        relation_cluster: (0..n_r).map(|_| rng.gen_range(0..k_r as u32)).collect(),
    }
}

/// Parameters with every trainable array, biases included, drawn at random.
fn random_params(mode: Mode, fs: &FeatureSet, scale: f64, rng: &mut ChaCha8Rng) -> Params {
    let mut p = Params::new(mode, Activation::Sigmoid, fs, rng.gen()).unwrap();
    for s in p.trainable_mut() {
        for v in s.iter_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
    p
}

fn criterion_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (n_e, n_r) = (rng.gen_range(2..6), rng.gen_range(1..4));
        let (k_e, k_r) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let fs = random_features(n_e, n_r, k_e, k_r, &mut rng);
        let p = random_params(Mode::ProjB, &fs, 2.0, &mut rng);
        let (e, r) = (rng.gen_range(0..n_e as u32), rng.gen_range(0..n_r as u32));
        let direct = p.combine_projb(e, r).unwrap();
        let expanded = p.expand_combine(e, r).unwrap();
        for (x, y) in direct.t.iter().zip(expanded.t.iter()) {
            worst = worst.max((x - y).abs());
        }
    }
    outcome(
        worst <= 1e-10,
        format!("max |t - t_expanded| = {worst:.2e} over 1000 draws"),
    )
}

fn full_instance(
    n_e: u32,
    anchor: u32,
    relation: u32,
    direction: Direction,
    positives: &[u32],
) -> Instance {
    let mut candidates: Vec<u32> = positives.to_vec();
    candidates.sort_unstable();
    let pos: BTreeSet<u32> = candidates.iter().copied().collect();
    candidates.extend((0..n_e).filter(|e| !pos.contains(e)));
    Instance {
        anchor,
        relation,
        direction,
        target: positives[0],
        triple: 0,
        candidates,
        n_positive: positives.len(),
    }
}

/// Worst relative mismatch between analytic and central-difference
/// gradients over every trainable coordinate.
fn gradient_mismatch(mode: Mode, loss: LossKind, delta: f64, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k_e, k_r) = if mode == Mode::ProjB { (3, 2) } else { (3, 3) };
    let fs = random_features(5, 2, k_e, k_r, &mut rng);
    let mut p = random_params(mode, &fs, 0.8, &mut rng);
    let batch = Batch {
        instances: vec![
            full_instance(5, 0, 0, Direction::Tail, &[2, 4]),
            full_instance(5, 3, 1, Direction::Head, &[1]),
            full_instance(5, 4, 1, Direction::Tail, &[0]),
        ],
    };
    let members = ClusterMembers::from_params(&p);
    let mut g = Gradients::zeros_like(&p);
    batch_objective(&p, &batch, loss, delta, &members, Some(&mut g)).unwrap();
    let analytic: Vec<Vec<f64>> = g.slices().iter().map(|s| s.to_vec()).collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (a, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let base = p.trainable()[a][i];
            p.trainable_mut()[a][i] = base + h;
            let up = batch_objective(&p, &batch, loss, delta, &members, None)
                .unwrap()
                .total;
            p.trainable_mut()[a][i] = base - h;
            let down = batch_objective(&p, &batch, loss, delta, &members, None)
                .unwrap()
                .total;
            p.trainable_mut()[a][i] = base;
            let numeric = (up - down) / (2.0 * h);
            let scale = grad[i].abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((grad[i] - numeric).abs() / scale);
            checked += 1;
        }
    }
    (worst, checked)
}

fn criterion_gradients() -> Outcome {
    let cases = [
        ("bilinear pointwise", Mode::ProjB, LossKind::Pointwise, 0.0),
        ("bilinear listwise", Mode::ProjB, LossKind::Listwise, 0.0),
        (
            "bilinear listwise+reg",
            Mode::ProjB,
            LossKind::Listwise,
            0.5,
        ),
        (
            "bilinear pointwise+reg",
            Mode::ProjB,
            LossKind::Pointwise,
            0.5,
        ),
        (
            "elementwise pointwise",
            Mode::ProjE,
            LossKind::Pointwise,
            0.0,
        ),
        ("elementwise listwise", Mode::ProjE, LossKind::Listwise, 0.0),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (seed, (name, mode, loss, delta)) in cases.into_iter().enumerate() {
        let (worst, n) = gradient_mismatch(mode, loss, delta, 100 + seed as u64);
        pass &= worst <= 1e-4;
        parts.push(format!("{name} {worst:.1e}/{n}"));
    }
    outcome(
        pass,
        format!("max relative error per case: {}", parts.join(", ")),
    )
}

fn criterion_batched() -> Outcome {
    let kg = random_kg(40, 5, 200, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for (mode, loss) in [
        (Mode::ProjB, LossKind::Listwise),
        (Mode::ProjE, LossKind::Pointwise),
    ] {
        let k_r = if mode == Mode::ProjB { 4 } else { 6 };
        let fs = random_features(40, 5, 6, k_r, &mut rng);
        let p = random_params(mode, &fs, 1.0, &mut rng);
        let cfg = TrainConfig::default();
        let mut sampler = Sampler::new(cfg.sampler, &kg, &cfg, 5).unwrap();
        let members = ClusterMembers::from_params(&p);
        for size in [1usize, 10, 30] {
            let instances: Vec<Instance> = (0..size)
                .map(|i| {
                    let dir = if i % 2 == 0 {
                        Direction::Tail
                    } else {
                        Direction::Head
                    };
                    sampler.make_instance(&kg, (i * 7) % kg.train.len(), dir)
                })
                .collect();
            let pairs: Vec<(u32, u32)> = instances.iter().map(|i| (i.anchor, i.relation)).collect();
            let fwd = p.forward_batch(&pairs).unwrap();
            let batch = Batch { instances };
            let obj = batch_objective(&p, &batch, loss, 0.0, &members, None).unwrap();
            for (i, inst) in batch.instances.iter().enumerate() {
                let single = p.combine(inst.anchor, inst.relation).unwrap();
                for (x, y) in fwd.get(i, mode).t().iter().zip(single.t().iter()) {
                    worst = worst.max((x - y).abs());
                }
                let l = instance_loss(&p, inst, loss).unwrap();
                worst = worst.max((obj.instance_losses[i] - l).abs());
            }
            let summed: f64 = batch
                .instances
                .iter()
                .map(|i| instance_loss(&p, i, loss).unwrap())
                .sum();
            worst = worst.max((obj.ce - summed).abs());
        }
    }
    outcome(
        worst <= 1e-8,
        format!("max deviation over t, instance and summed losses = {worst:.2e} (sizes 1, 10, 30)"),
    )
}

/// Weighted-sampling table computed directly from the triple list.
fn weighted_table(kg: &KnowledgeGraph) -> Vec<f64> {
    let mut count: BTreeMap<u32, f64> = BTreeMap::new();
    let mut rels_as_head: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    let mut rels_as_tail: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for t in &kg.train {
        *count.entry(t.relation).or_default() += 1.0;
        rels_as_head.entry(t.head).or_default().insert(t.relation);
        rels_as_tail.entry(t.tail).or_default().insert(t.relation);
    }
    let raw: Vec<f64> = kg
        .train
        .iter()
        .map(|t| {
            let level = relation_level(&kg.vocab.relation_names()[t.relation as usize]) as f64;
            level
                / (count[&t.relation]
                    * rels_as_head[&t.head].len() as f64
                    * rels_as_tail[&t.tail].len() as f64)
        })
        .collect();
    let z: f64 = raw.iter().sum();
    raw.iter().map(|w| w / z).collect()
}

fn hierarchical_kg() -> KnowledgeGraph {
    let names = ["/a", "/a/b", "/a/b/c", "/x/y/z/w"];
    let vocab = Vocabulary::from_names(
        (0..15).map(|i| format!("n{i}")).collect(),
        names.iter().map(|s| s.to_string()).collect(),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut seen = BTreeSet::new();
    while seen.len() < 50 {
        seen.insert(Triple::new(
            rng.gen_range(0..15),
            rng.gen_range(0..4),
            rng.gen_range(0..15),
        ));
    }
    KnowledgeGraph::from_splits(vocab, seen.into_iter().collect(), vec![], vec![]).unwrap()
}

fn criterion_samplers() -> Outcome {
    let kg = hierarchical_kg();
    let oracle = weighted_table(&kg);
    let table = weighted_probs(&kg).unwrap();
    let table_gap: f64 = oracle.iter().zip(&table).map(|(a, b)| (a - b).abs()).sum();
    let cfg = TrainConfig::default();
    let mut sampler = Sampler::new(projb::config::SamplerKind::Weighted, &kg, &cfg, 11).unwrap();
    let n = 1_000_000;
    let probs = sampler.probs().to_vec();
    let draws = sampler.draw(&probs, n).unwrap();
    let mut freq = vec![0.0; kg.train.len()];
    for d in draws {
        freq[d] += 1.0 / n as f64;
    }
    let l1: f64 = oracle.iter().zip(&freq).map(|(a, b)| (a - b).abs()).sum();

    let positives = [2u32, 5, 9];
    let n_neg = kg.n_entities() - positives.len();
    let reps = 20_000;
    let mut total = 0usize;
    let mut excluded = true;
    for _ in 0..reps {
        let neg = sampler.sample_negatives(kg.n_entities(), &positives);
        excluded &= neg.iter().all(|e| !positives.contains(e));
        total += neg.len();
    }
    let (np, py) = ((reps * n_neg) as f64, cfg.p_y);
    let z = (total as f64 - np * py) / (np * py * (1.0 - py)).sqrt();
    outcome(
        l1 < 0.01 && table_gap < 1e-12 && z.abs() <= 3.0 && excluded,
        format!("weighted L1 = {l1:.4} over 1e6 draws (table vs oracle {table_gap:.1e}); negative count z = {z:.2}"),
    )
}

fn criterion_memorization() -> Outcome {
    let kg = tiny_kg();
    let fs = kmeans_features(&kg, 8, 2, 1);
    let cfg = TrainConfig {
        mode: Mode::ProjB,
        loss: LossKind::Listwise,
        dims_entity: 8,
        dims_relation: 2,
        epochs: 50,
        batch_size: 1,
        lr: 0.05,
        seed: 7,
        ..Default::default()
    };
    let mut t = Trainer::new(&kg, cfg, &fs).unwrap();
    let stats = t.train(|_, _| {}).unwrap();
    let (first, last) = (stats[0].mean_loss, stats[stats.len() - 1].mean_loss);
    let report = evaluate(&t.params, &kg.train, Directions::TailOnly, &kg.filter).unwrap();
    let h1 = report.hits_at(1, true, None).unwrap();
    outcome(
        last < first && h1 >= 0.9,
        format!("epoch loss {first:.3} -> {last:.3}, filtered Hits@1 on train = {h1:.3}"),
    )
}

fn criterion_relative() -> Outcome {
    let kg = rule_kg(RuleKgSpec::default()).unwrap();
    let fs = kmeans_features(&kg, 20, 20, 1);
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let mut hits = Vec::new();
        for (mode, loss) in [
            (Mode::ProjB, LossKind::Listwise),
            (Mode::ProjE, LossKind::Pointwise),
        ] {
            let cfg = TrainConfig {
                mode,
                loss,
                dims_entity: 20,
                dims_relation: 20,
                epochs: 20,
                lr: 0.05,
                seed,
                ..Default::default()
            };
            let mut t = Trainer::new(&kg, cfg, &fs).unwrap();
            t.train(|_, _| {}).unwrap();
            let report = evaluate(&t.params, &kg.test, Directions::TailOnly, &kg.filter).unwrap();
            hits.push(report.hits_at(10, true, None).unwrap());
        }
        if hits[0] >= hits[1] {
            wins += 1;
        }
        rows.push(format!("seed {seed}: {:.3} vs {:.3}", hits[0], hits[1]));
    }
    outcome(
        wins >= 2,
        format!(
            "filtered Hits@10 bilinear vs elementwise, {} ({wins}/3 ordered)",
            rows.join("; ")
        ),
    )
}

fn criterion_conservation() -> Outcome {
    let mut kgs = vec![tiny_kg(), hierarchical_kg()];
    for s in 0..4 {
        kgs.push(random_kg(30 + 20 * s, 3 + s, 250 * (s + 1), s as u64).unwrap());
    }
    let mut checked = 0;
    let mut bad = 0;
    for (i, kg) in kgs.iter().enumerate() {
        let k_e = 2 + i % 4;
        let k_r = 1 + i % kg.n_relations().min(3);
        let out = featurize(
            kg,
            &FeaturizeConfig {
                entity_grid: Grid::single(ClusterMethod::KMeans, None, k_e),
                relation_grid: Grid::single(ClusterMethod::KMeans, None, k_r),
                seed: i as u64,
            },
        )
        .unwrap();
        for (kind, feats) in [
            (ItemKind::Entity, &out.features.entity_features),
            (ItemKind::Relation, &out.features.relation_features),
        ] {
            for (row, raw) in feats.rows().into_iter().zip(cooccurrence_vectors(kind, kg)) {
                let aggregated: u64 = row.iter().map(|&v| v as u64).sum();
                let original: u64 = raw.values().iter().map(|&v| v as u64).sum();
                checked += 1;
                if aggregated != original {
                    bad += 1;
                }
            }
        }
    }
    outcome(
        bad == 0,
        format!("{checked} items over 6 graphs, {bad} with mass mismatch"),
    )
}

fn criterion_dataset(dir: PathBuf) -> Outcome {
    match KnowledgeGraph::load_dir(&dir) {
        Ok(kg) => {
            let got = (
                kg.n_entities(),
                kg.n_relations(),
                kg.train.len(),
                kg.valid.len(),
                kg.test.len(),
            );
            outcome(
                got == (14951, 1345, 483142, 50000, 59071),
                format!("loaded {got:?}"),
            )
        }
        Err(e) => outcome(false, format!("load failed: {e}")),
    }
}

fn criterion_timing() -> Outcome {
    let kg = rule_kg(RuleKgSpec::default()).unwrap();
    let fs = kmeans_features(&kg, 20, 20, 1);
    let cfg = TrainConfig {
        dims_entity: 20,
        dims_relation: 20,
        ..Default::default()
    };
    let rows = timing_sweep(&kg, &fs, &cfg, &[1, 30]).unwrap();
    outcome(
        rows[1].seconds < rows[0].seconds,
        format!(
            "epoch seconds: batch 1 = {:.3}, batch 30 = {:.3}",
            rows[0].seconds, rows[1].seconds
        ),
    )
}

fn acceptance_criteria() -> bool {
    let secs = Duration::from_secs;
    let criteria: [(&str, Duration, fn() -> Outcome); 7] = [
        ("1 algebraic identity", secs(5), criterion_identity),
        ("2 gradient correctness", secs(30), criterion_gradients),
        ("3 batched equivalence", secs(10), criterion_batched),
        ("4 sampler fidelity", secs(60), criterion_samplers),
        ("5 memorization", secs(60), criterion_memorization),
        ("6 relative model ordering", secs(900), criterion_relative),
        (
            "7 feature mass conservation",
            secs(5),
            criterion_conservation,
        ),
    ];
    let mut failed = Vec::new();
    for (id, limit, f) in criteria {
        if !run(id, limit, f) {
            failed.push(id);
        }
    }
    let id = "8 dataset fidelity";
    match std::env::var_os("PROJB_FB15K_DIR") {
        Some(dir) => {
            if !run(id, secs(10), || criterion_dataset(PathBuf::from(dir))) {
                failed.push(id);
            }
        }
        None => println!("[NOT RUN] {id}: set PROJB_FB15K_DIR to a FB15K directory"),
    }
    if !run("9 timing order", secs(600), criterion_timing) {
        failed.push("9 timing order");
    }
    if !failed.is_empty() {
        println!("failed: {failed:?}");
    }
    failed.is_empty()
}

/// Full-scale FB15K reproduction; hours of training.
fn fb15k_full_run() {
    let dir = PathBuf::from(std::env::var_os("PROJB_FB15K_DIR").expect("PROJB_FB15K_DIR"));
    let kg = KnowledgeGraph::load_dir(&dir).unwrap();
    let out = featurize(
        &kg,
        &FeaturizeConfig {
            entity_grid: Grid::single(ClusterMethod::KMeans, None, 100),
            relation_grid: Grid::single(ClusterMethod::KMeans, None, 75),
            seed: 42,
        },
    )
    .unwrap();
    let cfg = TrainConfig::default();
    let fs = out.features.to_feature_set(cfg.feature_scale);
    let mut t = Trainer::new(&kg, cfg, &fs).unwrap();
    t.train(|s, _| println!("epoch {} loss {:.4}", s.epoch, s.mean_loss))
        .unwrap();
    let report = evaluate(&t.params, &kg.test, Directions::Both, &kg.filter).unwrap();
    let h10 = report.hits_at(10, true, None).unwrap();
    println!("filtered Hits@10 = {:.1} (target 90.3 +- 5)", 100.0 * h10);
    assert!((100.0 * h10 - 90.3).abs() <= 5.0);
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance_criteria: test");
        return ExitCode::SUCCESS;
    }
    let mut ok = acceptance_criteria();
    if args
        .iter()
        .any(|a| a == "--ignored" || a == "--include-ignored")
    {
        ok &= std::panic::catch_unwind(fb15k_full_run).is_ok();
    } else {
        println!("[SKIPPED] 10 full FB15K reproduction: pass --ignored with PROJB_FB15K_DIR set");
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
