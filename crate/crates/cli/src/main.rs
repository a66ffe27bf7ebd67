use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use dctl::data::{
    generate_synthetic, load_dataset, read_dataset, write_dataset, write_matrix_csv, write_trace_csv, Dataset,
    DatasetFormat, LoadOptions, SynthSpec,
};
use dctl::experiment::{cluster_grid, depth_sweep, model_features, score_model, score_raw, AccuracyRow};
use dctl::persist::{load_model, save_model};
use dctl::{train, ModelConfig, TrainedModel};

#[derive(Parser)]
#[command(name = "dctl", version, about = "Deep convolutional transform learning for 1-D signals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on the training split and save it.
    Train(TrainArgs),
    /// Write final-layer features of every sample as CSV.
    Encode(EncodeArgs),
    /// Compare raw and encoded features with KNN and nearest centroid.
    Classify(ClassifyArgs),
    /// Run k-means with every initialization on raw and encoded features.
    Cluster(ClusterArgs),
    /// Accuracy against depth for L = 1..4.
    Benchmark(BenchmarkArgs),
    /// Write a labeled synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Dataset file: one sample per row, integer label in the last column.
    input: PathBuf,
    /// csv-matrix or raw-f64.
    #[arg(long, default_value = "csv-matrix")]
    format: DatasetFormat,
    /// The file has no label column.
    #[arg(long)]
    no_labels: bool,
    /// Skip per-sample min-max scaling to [0, 1].
    #[arg(long)]
    no_normalize: bool,
    /// Fraction of samples used for training.
    #[arg(long, default_value_t = 0.7)]
    split: f64,
}

impl DataArgs {
    fn options(&self) -> LoadOptions {
        LoadOptions {
            format: self.format,
            has_labels: !self.no_labels,
            normalize: !self.no_normalize,
        }
    }

    fn load_all(&self) -> anyhow::Result<Dataset> {
        Ok(read_dataset(&self.input, &self.options())?)
    }

    fn load_split(&self, seed: u64) -> anyhow::Result<(Dataset, Dataset)> {
        Ok(load_dataset(&self.input, &self.options(), self.split, seed)?)
    }

    fn require_labels(&self) -> anyhow::Result<()> {
        if self.no_labels {
            bail!("this command needs labeled data");
        }
        Ok(())
    }
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 3)]
    layers: usize,
    /// Number of kernels per layer (also the kernel length).
    #[arg(long, default_value_t = 8)]
    kernels: usize,
    #[arg(long, default_value_t = 0.01)]
    mu: f64,
    #[arg(long, default_value_t = 0.01)]
    lambda: f64,
    #[arg(long, default_value_t = 0.01)]
    beta: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma1: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma2: f64,
    /// Maximum outer iterations.
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// Stop when the relative objective decrease falls below this.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Seed for the split, initialization and k-means.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the objective trace (iter,layer,objective) to this CSV file.
    #[arg(long, value_name = "CSV")]
    trace_out: Option<PathBuf>,
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            num_layers: self.layers,
            num_kernels: self.kernels,
            mu: self.mu,
            lambda: self.lambda,
            beta: self.beta,
            gamma1: self.gamma1,
            gamma2: self.gamma2,
            max_outer_iters: self.iters,
            objective_tol: self.tol,
            seed: self.seed,
            ..ModelConfig::default()
        }
    }

    fn train(&self, data: &Dataset) -> anyhow::Result<TrainedModel> {
        let model = train(&data.samples, &self.config()).context("training failed")?;
        if let Some(path) = &self.trace_out {
            write_trace_csv(path, &model.training_trace).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(model)
    }

    /// Loads `path` if given, otherwise trains on `data`.
    fn obtain(&self, path: Option<&Path>, data: &Dataset) -> anyhow::Result<TrainedModel> {
        match path {
            Some(p) => load_model(p).with_context(|| format!("loading {}", p.display())),
            None => self.train(data),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Model file to write.
    #[arg(long, short, default_value = "model.dctl")]
    out: PathBuf,
}

#[derive(Args)]
struct EncodeArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Trained model file.
    #[arg(long)]
    model: PathBuf,
    /// Features CSV to write.
    #[arg(long, short, default_value = "features.csv")]
    out: PathBuf,
    /// Sum-pool each channel over windows of this many positions.
    #[arg(long, default_value_t = 1)]
    pool: usize,
}

#[derive(Args)]
struct ClassifyArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Use this model instead of training one on the training split.
    #[arg(long = "model", value_name = "PATH")]
    model_path: Option<PathBuf>,
    /// Neighbours for KNN.
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    pool: usize,
}

#[derive(Args)]
struct ClusterArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Use this model instead of training one on all samples.
    #[arg(long = "model", value_name = "PATH")]
    model_path: Option<PathBuf>,
    /// Number of clusters (default: number of classes).
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pool: usize,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    pool: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    length: usize,
    #[arg(long, default_value_t = 3)]
    motifs: usize,
    /// Standard deviation of the additive Gaussian noise.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "csv-matrix")]
    format: DatasetFormat,
    #[arg(long, short, default_value = "synth.csv")]
    out: PathBuf,
}

fn accuracy_table(rows: &[AccuracyRow]) {
    println!("{:<10} {:>8} {:>8} {:>9}", "features", "dim", "knn", "centroid");
    for r in rows {
        println!("{:<10} {:>8} {:>8.4} {:>9.4}", r.features, r.dim, r.knn, r.centroid);
    }
}

fn run_train(args: &TrainArgs) -> anyhow::Result<()> {
    let (train_set, _) = args.data.load_split(args.model.seed)?;
    let model = args.model.train(&train_set)?;
    save_model(&model, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    let first = model.training_trace.first().map_or(f64::NAN, |e| e.objective);
    let last = model.final_objective().unwrap_or(f64::NAN);
    let iters = model.training_trace.last().map_or(0, |e| e.iter);
    println!(
        "trained L={} K={} on {} samples of length {}: objective {first:.6e} -> {last:.6e} in {iters} iterations",
        model.num_layers(),
        model.config.num_kernels,
        train_set.len(),
        model.signal_len()
    );
    println!("model written to {}", args.out.display());
    Ok(())
}

fn run_encode(args: &EncodeArgs) -> anyhow::Result<()> {
    let data = args.data.load_all()?;
    let model = load_model(&args.model).with_context(|| format!("loading {}", args.model.display()))?;
    let features = model_features(&model, &data, args.pool)?;
    write_matrix_csv(&args.out, &features, data.labels.as_deref())
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "{} samples encoded to {} features, written to {}",
        features.len(),
        features.first().map_or(0, Vec::len),
        args.out.display()
    );
    Ok(())
}

fn run_classify(args: &ClassifyArgs) -> anyhow::Result<()> {
    args.data.require_labels()?;
    let (train_set, test_set) = args.data.load_split(args.model.seed)?;
    let model = args.model.obtain(args.model_path.as_deref(), &train_set)?;
    let rows = [
        score_raw(&train_set, &test_set, args.k)?,
        score_model(&model, &train_set, &test_set, args.k, args.pool)?,
    ];
    println!("{} train / {} test samples, KNN k={}", train_set.len(), test_set.len(), args.k);
    accuracy_table(&rows);
    Ok(())
}

fn run_cluster(args: &ClusterArgs) -> anyhow::Result<()> {
    args.data.require_labels()?;
    let data = args.data.load_all()?;
    let labels = data.labels.clone().expect("labeled");
    let clusters = args.clusters.unwrap_or_else(|| data.num_classes());
    let model = args.model.obtain(args.model_path.as_deref(), &data)?;
    let raw = data.rows();
    let encoded = model_features(&model, &data, args.pool)?;
    let rows = cluster_grid(&[("raw", &raw), ("encoded", &encoded)], &labels, clusters, args.model.seed)?;
    println!("{} samples, {clusters} clusters", data.len());
    println!("{:<10} {:<9} {:>6} {:>8} {:>11}", "features", "init", "dim", "ari", "seconds");
    for r in &rows {
        println!("{:<10} {:<9} {:>6} {:>8.4} {:>11.6}", r.features, r.init.name(), r.dim, r.ari, r.seconds);
    }
    Ok(())
}

fn run_benchmark(args: &BenchmarkArgs) -> anyhow::Result<()> {
    args.data.require_labels()?;
    let (train_set, test_set) = args.data.load_split(args.model.seed)?;
    let rows = depth_sweep(&train_set, &test_set, &args.model.config(), &[1, 2, 3, 4], args.k, args.pool)?;
    let (raw, depths) = rows.split_first().expect("raw row");
    println!(
        "{} train / {} test samples, KNN k={}; raw features: dim {}, knn {:.4}, centroid {:.4}",
        train_set.len(),
        test_set.len(),
        args.k,
        raw.dim,
        raw.knn,
        raw.centroid
    );
    println!("{:<7} {:>8} {:>8} {:>9}", "layers", "dim", "knn", "centroid");
    for (layers, r) in (1..).zip(depths) {
        println!("{:<7} {:>8} {:>8.4} {:>9.4}", layers, r.dim, r.knn, r.centroid);
    }
    Ok(())
}

fn run_synth(args: &SynthArgs) -> anyhow::Result<()> {
    let data = generate_synthetic(&SynthSpec {
        classes: args.classes,
        per_class: args.per_class,
        length: args.length,
        motif_count: args.motifs,
        noise_sigma: args.noise,
        seed: args.seed,
    })?;
    write_dataset(&args.out, &data, args.format).with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "{} samples of length {} in {} classes written to {}",
        data.len(),
        data.signal_len(),
        args.classes,
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Encode(a) => run_encode(a),
        Command::Classify(a) => run_classify(a),
        Command::Cluster(a) => run_cluster(a),
        Command::Benchmark(a) => run_benchmark(a),
        Command::Synth(a) => run_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
