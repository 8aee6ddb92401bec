//! Single-thread pool against the default pool on the hot paths. Built
//! without the `parallel` feature both variants run the sequential path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rayon::{ThreadPool, ThreadPoolBuilder};

use projb::config::{Directions, FeatureScale, LossKind, TrainConfig};
use projb::eval::evaluate;
use projb::features::{
    cooccurrence_vectors, featurize, kernel_matrix_sparse, ClusterMethod, FeaturizeConfig, Grid,
    ItemKind, Kernel,
};
use projb::kg::Direction;
use projb::model::{Gradients, Params};
use projb::synth::{rule_kg, RuleKgSpec};
use projb::train::{batch_objective, Batch, ClusterMembers, Sampler};

fn pools() -> Vec<(&'static str, ThreadPool)> {
    vec![
        (
            "1-thread",
            ThreadPoolBuilder::new().num_threads(1).build().unwrap(),
        ),
        ("default", ThreadPoolBuilder::new().build().unwrap()),
    ]
}

fn bench(c: &mut Criterion) {
    let kg = rule_kg(RuleKgSpec::default()).unwrap();
    let features = featurize(
        &kg,
        &FeaturizeConfig {
            entity_grid: Grid::single(ClusterMethod::KMeans, None, 20),
            relation_grid: Grid::single(ClusterMethod::KMeans, None, 20),
            seed: 1,
        },
    )
    .unwrap()
    .features
    .to_feature_set(FeatureScale::RowMax);
    let cfg = TrainConfig {
        dims_entity: 20,
        dims_relation: 20,
        ..Default::default()
    };
    let params = Params::new(cfg.mode, cfg.activation, &features, 3).unwrap();
    let members = ClusterMembers::from_params(&params);
    let mut sampler = Sampler::new(cfg.sampler, &kg, &cfg, 5).unwrap();
    let batch = Batch {
        instances: (0..30)
            .map(|i| sampler.make_instance(&kg, i, Direction::Tail))
            .collect(),
    };
    let raw = cooccurrence_vectors(ItemKind::Entity, &kg);

    let mut group = c.benchmark_group("pool");
    for (name, pool) in pools() {
        group.bench_with_input(
            BenchmarkId::new("batch_gradient_30", name),
            &pool,
            |b, pool| {
                let mut g = Gradients::zeros_like(&params);
                b.iter(|| {
                    pool.install(|| {
                        batch_objective(
                            &params,
                            &batch,
                            LossKind::Listwise,
                            cfg.delta,
                            &members,
                            Some(&mut g),
                        )
                        .unwrap()
                    })
                })
            },
        );
        group.bench_with_input(BenchmarkId::new("evaluate_test", name), &pool, |b, pool| {
            b.iter(|| {
                pool.install(|| {
                    evaluate(&params, &kg.test, Directions::TailOnly, &kg.filter).unwrap()
                })
            })
        });
        group.bench_with_input(
            BenchmarkId::new("kernel_matrix_rbf", name),
            &pool,
            |b, pool| b.iter(|| pool.install(|| kernel_matrix_sparse(&raw, Kernel::Rbf).unwrap())),
        );
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench
}
criterion_main!(benches);
