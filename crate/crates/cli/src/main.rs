//! Command-line driver: featurize, train, eval and experiments, each
//! writing its artifacts plus a run manifest into an output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use chrono::Utc;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;
use sha2::{Digest, Sha256};

use projb::config::{Directions, Mode, TrainConfig};
use projb::eval::{
    evaluate, grid_csv, larger_batch_faster, local_optima_experiment, settings_grid, timing_csv,
    timing_sweep, with_mode, Contender, Metrics,
};
use projb::features::{
    featurize, pca_feature_set, ClusterMethod, EngineeredFeatures, FeatureSet, FeaturizeConfig,
    Grid, GridRow, Kernel,
};
use projb::kg::KnowledgeGraph;
use projb::model::Params;
use projb::synth::{rule_kg, tiny_kg, RuleKgSpec};
use projb::train::Trainer;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "projb",
    version,
    about = "Knowledge graph completion with bilinear projection embeddings"
)]
struct Cli {
    /// Worker threads for data-parallel loops (default: all cores).
    #[arg(long, global = true, env = "PROJB_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cluster co-occurrence vectors and write engineered features.
    Featurize(FeaturizeArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Rank a split against a checkpoint and write metrics.
    Eval(EvalArgs),
    /// Run one of the comparison experiments.
    Experiment(ExperimentArgs),
    /// Write a synthetic dataset directory.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct FeaturizeArgs {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Candidate entity cluster counts.
    #[arg(long, value_delimiter = ',', default_values_t = [50usize, 100, 200, 400])]
    entity_k: Vec<usize>,
    /// Candidate relation cluster counts.
    #[arg(long, value_delimiter = ',', default_values_t = [50usize, 75, 150, 300])]
    relation_k: Vec<usize>,
    /// Clustering methods to search (kmeans, spectral, fuzzy, knn).
    #[arg(long, value_delimiter = ',', default_value = "kmeans")]
    methods: Vec<String>,
    /// Kernels to search; `none` clusters raw vectors.
    #[arg(long, value_delimiter = ',', default_value = "none")]
    kernels: Vec<String>,
}

/// Flags shared by commands that train.
#[derive(Args, Debug)]
struct TrainFlags {
    /// `key = value` config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Engineered features file; built with k-means at the configured widths when absent.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    sampler: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint path (default: `<out>/checkpoint.bin`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Record the embedding center-variance trace.
    #[arg(long)]
    variance_trace: bool,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Config the checkpoint was trained with, recorded in the metrics.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// `tail` ranks tails only; `both` also ranks heads and pools them.
    #[arg(long, default_value = "tail")]
    directions: String,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
#[value(rename_all = "snake_case")]
enum ExperimentKind {
    LocalOptima,
    TimingSweep,
    Table4Grid,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(value_enum)]
    kind: ExperimentKind,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Bootstrap trials for local_optima.
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 10, 30])]
    batch_sizes: Vec<usize>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum SynthKind {
    Tiny,
    Rule,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(value_enum)]
    kind: SynthKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    args: Vec<String>,
    config: Option<String>,
    config_hash: Option<String>,
    dataset_checksums: Vec<(String, String)>,
    seed: Option<u64>,
    started: String,
    finished: String,
    outputs: Vec<String>,
    build: String,
    threads: usize,
}

/// Collects run metadata while a command executes.
struct Run {
    command: &'static str,
    out: PathBuf,
    started: String,
    config: Option<TrainConfig>,
    seed: Option<u64>,
    data_dir: Option<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn start(command: &'static str, out: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            command,
            out: out.to_path_buf(),
            started: Utc::now().to_rfc3339(),
            config: None,
            seed: None,
            data_dir: None,
            outputs: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&mut self, name: &str, contents: &str) -> anyhow::Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        self.outputs.push(p.clone());
        Ok(p)
    }

    fn record(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }

    fn finish(self) -> anyhow::Result<()> {
        let name = format!("manifest-{}.json", self.command);
        let manifest = Manifest {
            command: self.command.to_string(),
            args: std::env::args().collect(),
            config: self.config.as_ref().map(TrainConfig::to_kv),
            config_hash: self.config.as_ref().map(TrainConfig::hash),
            dataset_checksums: match &self.data_dir {
                Some(d) => dataset_checksums(d)?,
                None => Vec::new(),
            },
            seed: self.seed,
            started: self.started.clone(),
            finished: Utc::now().to_rfc3339(),
            outputs: self
                .outputs
                .iter()
                .map(|p| p.display().to_string())
                .collect(),
            build: build_id(),
            threads: projb::par::current_threads(),
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        let path = self.path(&name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn build_id() -> String {
    match option_env!("PROJB_GIT_DESCRIBE") {
        Some(d) if !d.is_empty() => format!("{}-{d}", env!("CARGO_PKG_VERSION")),
        _ => env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn dataset_checksums(dir: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let bytes = fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
            let name = p
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            Ok((name, sha256_hex(&bytes)))
        })
        .collect()
}

/// A failure carrying its exit code.
#[derive(Debug)]
struct Exit(u8, anyhow::Error);

fn exit_code(e: &anyhow::Error) -> u8 {
    use projb::Error as E;
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<E>() {
            return match err {
                E::Numerical(_) => EXIT_NUMERICAL,
                E::Config(_) | E::Parameter(_) => EXIT_USAGE,
                E::Io { .. }
                | E::Parse { .. }
                | E::Vocabulary { .. }
                | E::IdOutOfRange { .. }
                | E::Dimension(_)
                | E::Format(_) => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_USAGE
}

fn load_kg(dir: &Path) -> anyhow::Result<KnowledgeGraph> {
    let kg = KnowledgeGraph::load_dir(dir)?;
    info!(
        "loaded {}: {} entities, {} relations, {}/{}/{} triples",
        dir.display(),
        kg.n_entities(),
        kg.n_relations(),
        kg.train.len(),
        kg.valid.len(),
        kg.test.len()
    );
    Ok(kg)
}

fn resolve_config(flags: &TrainFlags) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &flags.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let mut set = |k: &str, v: Option<String>| -> anyhow::Result<()> {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
        Ok(())
    };
    set("seed", flags.seed.map(|s| s.to_string()))?;
    set("mode", flags.mode.clone())?;
    set("loss", flags.loss.clone())?;
    set("sampler", flags.sampler.clone())?;
    set("batch_size", flags.batch_size.map(|s| s.to_string()))?;
    set("epochs", flags.epochs.map(|s| s.to_string()))?;
    for kv in &flags.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| projb::Error::Config(format!("override '{kv}' is not key=value")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Engineered features from a file, or k-means features at the configured widths.
fn resolve_features(
    flags: &TrainFlags,
    kg: &KnowledgeGraph,
    cfg: &TrainConfig,
) -> anyhow::Result<FeatureSet> {
    let eng = match &flags.features {
        Some(p) => EngineeredFeatures::load(p)?,
        None => {
            info!(
                "no feature file given; clustering with k-means at {}/{}",
                cfg.dims_entity, cfg.dims_relation
            );
            featurize(
                kg,
                &FeaturizeConfig {
                    entity_grid: Grid::single(ClusterMethod::KMeans, None, cfg.dims_entity),
                    relation_grid: Grid::single(ClusterMethod::KMeans, None, cfg.dims_relation),
                    seed: cfg.seed,
                },
            )?
            .features
        }
    };
    if eng.entity_features.nrows() != kg.n_entities()
        || eng.relation_features.nrows() != kg.n_relations()
    {
        return Err(projb::Error::Dimension(format!(
            "features cover {} entities / {} relations, dataset has {} / {}",
            eng.entity_features.nrows(),
            eng.relation_features.nrows(),
            kg.n_entities(),
            kg.n_relations()
        ))
        .into());
    }
    Ok(eng.to_feature_set(cfg.feature_scale))
}

fn report_csv(rows: &[GridRow], kind: &str) -> String {
    let mut s = String::new();
    for r in rows {
        let kernel = projb::features::kernel_name(r.kernel);
        let var = r
            .center_variance
            .map_or(String::from("skipped"), |v| v.to_string());
        s.push_str(&format!("{kind},{},{kernel},{},{var}\n", r.method, r.k));
    }
    s
}

fn cmd_featurize(a: &FeaturizeArgs) -> anyhow::Result<()> {
    let mut run = Run::start("featurize", &a.out)?;
    run.seed = Some(a.seed);
    run.data_dir = Some(a.data_dir.clone());
    let kg = load_kg(&a.data_dir)?;
    let methods = a
        .methods
        .iter()
        .map(|m| m.parse::<ClusterMethod>())
        .collect::<projb::Result<Vec<_>>>()?;
    let kernels = a
        .kernels
        .iter()
        .map(|k| projb::features::parse_kernel(k))
        .collect::<projb::Result<Vec<Option<Kernel>>>>()?;
    let grid = |ks: &[usize]| Grid {
        methods: methods.clone(),
        kernels: kernels.clone(),
        ks: ks.to_vec(),
    };
    let out = featurize(
        &kg,
        &FeaturizeConfig {
            entity_grid: grid(&a.entity_k),
            relation_grid: grid(&a.relation_k),
            seed: a.seed,
        },
    )?;
    let path = run.path("features.bin");
    out.features.save(&path)?;
    run.record(&path);
    let mut report = String::from("kind,method,kernel,k,center_variance\n");
    report.push_str(&report_csv(&out.entity.rows, "entity"));
    report.push_str(&report_csv(&out.relation.rows, "relation"));
    run.write("featurize_report.csv", &report)?;
    info!(
        "selected entity K = {}, relation K = {}",
        out.features.entity_dims(),
        out.features.relation_dims()
    );
    run.finish()
}

fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    let mut run = Run::start("train", &a.out)?;
    run.data_dir = Some(a.data_dir.clone());
    let cfg = resolve_config(&a.flags)?;
    run.config = Some(cfg.clone());
    run.seed = Some(cfg.seed);
    let kg = load_kg(&a.data_dir)?;
    let fs = resolve_features(&a.flags, &kg, &cfg)?;
    let mut trainer = Trainer::new(&kg, cfg.clone(), &fs)?;
    if a.variance_trace {
        trainer.enable_variance_trace();
    }
    let mut log_csv = String::from(
        "epoch,mean_loss,mean_total,regularizer,instances,batches,reassigned,seconds\n",
    );
    let result = trainer.train(|s, _| {
        info!(
            "epoch {} loss {:.5} ({:.2}s)",
            s.epoch, s.mean_loss, s.seconds
        );
        log_csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            s.epoch,
            s.mean_loss,
            s.mean_total,
            s.regularizer,
            s.n_instances,
            s.n_batches,
            s.reassigned,
            s.seconds
        ));
    });
    let ckpt = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| run.path("checkpoint.bin"));
    trainer.params.save(&ckpt)?;
    run.record(&ckpt);
    run.write("loss.csv", &log_csv)?;
    run.write("config.kv", &cfg.to_kv())?;
    if let Some(trace) = trainer.variance_trace() {
        run.write("variance.csv", &trace.to_csv())?;
    }
    if let Err(e) = result {
        warn!("training stopped; checkpoint holds the last finite parameters");
        run.finish()?;
        return Err(e.into());
    }
    run.finish()
}

fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let directions: Directions = a.directions.parse()?;
    let params = Params::load(&a.checkpoint)?;
    let kg = load_kg(&a.data_dir)?;
    if params.n_entities() != kg.n_entities() || params.n_relations() != kg.n_relations() {
        return Err(projb::Error::Dimension(format!(
            "checkpoint has {} entities / {} relations, dataset has {} / {}",
            params.n_entities(),
            params.n_relations(),
            kg.n_entities(),
            kg.n_relations()
        ))
        .into());
    }
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.mode = params.mode;
    cfg.activation = params.activation;
    let mut run = Run::start("eval", &a.out)?;
    run.data_dir = Some(a.data_dir.clone());
    run.seed = Some(cfg.seed);
    let (split_name, triples) = match a.split {
        Split::Train => ("train", &kg.train),
        Split::Valid => ("valid", &kg.valid),
        Split::Test => ("test", &kg.test),
    };
    if triples.is_empty() {
        return Err(projb::Error::Parameter(format!("the {split_name} split is empty")).into());
    }
    let report = evaluate(&params, triples, directions, &kg.filter)?;
    let dataset = format!(
        "{}:{split_name}",
        a.data_dir.file_name().unwrap_or_default().to_string_lossy()
    );
    let metrics = Metrics::from_report(&report, &cfg, &dataset, directions == Directions::Both)?;
    info!(
        "filtered Hits@10 {:.2}, mean rank {:.1}",
        metrics.filtered.hits10, metrics.filtered.mean_rank
    );
    run.write("ranks.csv", &report.to_csv())?;
    run.write("metrics.json", &serde_json::to_string_pretty(&metrics)?)?;
    run.config = Some(cfg);
    run.finish()
}

#[derive(Serialize)]
struct TimingSummary {
    rows: Vec<projb::eval::TimingRow>,
    larger_batch_faster: Option<bool>,
}

fn cmd_experiment(a: &ExperimentArgs) -> anyhow::Result<()> {
    let name = match a.kind {
        ExperimentKind::LocalOptima => "local_optima",
        ExperimentKind::TimingSweep => "timing_sweep",
        ExperimentKind::Table4Grid => "table4_grid",
    };
    let mut run = Run::start("experiment", &a.out)?;
    run.data_dir = Some(a.data_dir.clone());
    let cfg = resolve_config(&a.flags)?;
    run.config = Some(cfg.clone());
    run.seed = Some(cfg.seed);
    let kg = load_kg(&a.data_dir)?;
    let fs = resolve_features(&a.flags, &kg, &cfg)?;
    match a.kind {
        ExperimentKind::LocalOptima => {
            if cfg.dims_entity != cfg.dims_relation {
                bail!(projb::Error::Config(
                    "local_optima compares against the elementwise model, which needs dims_entity == dims_relation".into()
                ));
            }
            let first = with_mode(&cfg, Mode::ProjB);
            let second = with_mode(&cfg, Mode::ProjE);
            let stats = local_optima_experiment(
                &kg,
                Contender {
                    cfg: &first,
                    features: &fs,
                },
                Contender {
                    cfg: &second,
                    features: &fs,
                },
                a.trials,
                cfg.seed,
            )?;
            let mut csv = String::from("trial,ce_bilinear,ce_elementwise,ratio,failed\n");
            let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
            for r in &stats.trials {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.trial,
                    opt(r.ce_first),
                    opt(r.ce_second),
                    opt(r.ratio),
                    r.failed
                ));
            }
            run.write("local_optima.csv", &csv)?;
            run.write("local_optima.json", &serde_json::to_string_pretty(&stats)?)?;
        }
        ExperimentKind::TimingSweep => {
            let rows = timing_sweep(&kg, &fs, &cfg, &a.batch_sizes)?;
            let flag = larger_batch_faster(&rows);
            run.write("timing_sweep.csv", &timing_csv(&rows))?;
            let summary = TimingSummary {
                rows,
                larger_batch_faster: flag,
            };
            run.write(
                "timing_sweep.json",
                &serde_json::to_string_pretty(&summary)?,
            )?;
        }
        ExperimentKind::Table4Grid => {
            let pca = pca_feature_set(
                &kg,
                cfg.dims_entity,
                cfg.dims_relation,
                fs.entity_cluster.clone(),
                fs.relation_cluster.clone(),
                cfg.feature_scale,
                cfg.seed,
            )?;
            let cells = settings_grid(&kg, &cfg, &fs, &pca, &a.batch_sizes)?;
            run.write("table4_grid.csv", &grid_csv(&cells))?;
            run.write("table4_grid.json", &serde_json::to_string_pretty(&cells)?)?;
        }
    }
    info!("{name} finished");
    run.finish()
}

fn cmd_synth(a: &SynthArgs) -> anyhow::Result<()> {
    let kg = match a.kind {
        SynthKind::Tiny => tiny_kg(),
        SynthKind::Rule => {
            let mut spec = RuleKgSpec::default();
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            rule_kg(spec)?
        }
    };
    let mut run = Run::start("synth", &a.out)?;
    run.seed = a.seed;
    kg.write_dir(&a.out)?;
    for f in ["train.txt", "valid.txt", "test.txt"] {
        run.record(&a.out.join(f));
    }
    run.finish()
}

fn configure_threads(threads: Option<usize>) -> anyhow::Result<()> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        bail!(projb::Error::Config("--threads must be >= 1".into()));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| anyhow!("thread pool: {e}"))?;
    #[cfg(not(feature = "parallel"))]
    warn!("built without the parallel feature; --threads {n} ignored");
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Exit> {
    let wrap = |e: anyhow::Error| Exit(exit_code(&e), e);
    configure_threads(cli.threads).map_err(wrap)?;
    match &cli.command {
        Command::Featurize(a) => cmd_featurize(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::Synth(a) => cmd_synth(a),
    }
    .map_err(wrap)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Exit(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
