//! `boicr` command-line tool: generate the synthetic benchmark, train,
//! evaluate, run the ablation and dump the aggregation schedule.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use boicr::ablation::{run_ablation, Arm};
use boicr::data::{generate, load_dataset, load_detections, save_dataset, save_detections, DetectionRecord};
use boicr::eval::{evaluate_records, ApMethod};
use boicr::trainer::{infer_all, train, Checkpoint, HeadSelection, TrainConfig};
use boicr::{AggregationSchedule, ImageSample, LambdaMode, SceneSpec};

use manifest::{file_fingerprint, RunManifest};

#[derive(Parser)]
#[command(
    name = "boicr",
    version,
    about = "Weakly-supervised detection with refinement agents and adaptive supervision"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test datasets.
    GenData(GenDataArgs),
    /// Train a model on a dataset file.
    Train(TrainArgs),
    /// Run inference with a checkpoint (or read a detections file) and score it.
    Eval(EvalArgs),
    /// Run the five ablation arms over several seeds.
    Ablate(AblateArgs),
    /// Write the (step, lambda, lambda_ign) schedule as CSV.
    ScheduleDump(ScheduleArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Parameters of the bundled ablation benchmark.
    Benchmark,
    /// Plain generator defaults.
    Default,
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long, env = "BOICR_OUT")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "benchmark")]
    preset: Preset,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    part_gain: Option<f64>,
    #[arg(long)]
    body_share: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    proposals_per_object: Option<usize>,
    #[arg(long)]
    background_proposals: Option<usize>,
    /// Top-anchored proposals of intermediate height per object.
    #[arg(long)]
    extent_proposals: Option<usize>,
}

/// Training hyperparameters shared by `train` and `ablate`.
#[derive(Args)]
struct HyperArgs {
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    /// `step:lr,...`; defaults to `--lr` for 70% of the steps, then a tenth of it.
    #[arg(long)]
    lr_schedule: Option<String>,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 100.0)]
    lb: f64,
    #[arg(long, default_value_t = 0.51)]
    lambda_max: f64,
    #[arg(long, default_value_t = 64)]
    trunk_width: usize,
}

impl HyperArgs {
    fn config(&self, num_classes: usize, raw_dim: usize) -> Result<TrainConfig> {
        let lr_schedule = match &self.lr_schedule {
            Some(s) => TrainConfig::parse_lr_schedule(s)?,
            None => TrainConfig::step_lr_schedule(self.steps, self.lr),
        };
        Ok(TrainConfig {
            num_classes,
            raw_dim,
            trunk_width: self.trunk_width,
            total_steps: self.steps,
            batch_size: self.batch_size,
            lr_schedule,
            lb: self.lb,
            lambda_max: self.lambda_max,
            ..TrainConfig::default()
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long, env = "BOICR_OUT")]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// `adaptive` or `fixed:<value>`.
    #[arg(long, default_value = "adaptive")]
    lambda: LambdaMode,
    #[arg(long, value_enum, default_value = "on")]
    ignore: Switch,
    #[arg(long, value_enum, default_value = "on")]
    distill: Switch,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Evaluation dataset file (must carry ground truth).
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long, env = "BOICR_OUT")]
    out: PathBuf,
    #[arg(long, required_unless_present = "detections")]
    checkpoint: Option<PathBuf>,
    /// Score this detections file instead of running inference.
    #[arg(long, conflicts_with = "checkpoint")]
    detections: Option<PathBuf>,
    /// `agents` or `agents+distill`.
    #[arg(long, default_value = "agents+distill")]
    heads: HeadSelection,
    #[arg(long, default_value_t = 0.3)]
    nms: f64,
    /// `11point` or `all-point`.
    #[arg(long, default_value = "11point")]
    ap: ApMethod,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Output directory.
    #[arg(long, env = "BOICR_OUT")]
    out: PathBuf,
    /// Number of seeds per arm (seeds 0..N).
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long, default_value_t = 100.0)]
    lb: f64,
    #[arg(long, default_value_t = 60000)]
    steps: usize,
    #[arg(long, default_value_t = 0.51)]
    lambda_max: f64,
    /// Emit every `stride`-th step (the last step is always included).
    #[arg(long, default_value_t = 100)]
    stride: usize,
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::ScheduleDump(a) => schedule_dump(a),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load(path: &Path) -> Result<(usize, usize, Vec<ImageSample>)> {
    let (header, samples) = load_dataset(path).with_context(|| format!("loading {}", path.display()))?;
    Ok((header.num_classes, header.feature_dim, samples))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let base = match a.preset {
        Preset::Benchmark => SceneSpec::benchmark(),
        Preset::Default => SceneSpec::default(),
    };
    let spec = SceneSpec {
        num_classes: a.classes.unwrap_or(base.num_classes),
        images_train: a.train.unwrap_or(base.images_train),
        images_test: a.test.unwrap_or(base.images_test),
        part_signal_gain: a.part_gain.unwrap_or(base.part_signal_gain),
        body_share: a.body_share.unwrap_or(base.body_share),
        feature_noise_sigma: a.noise.unwrap_or(base.feature_noise_sigma),
        proposals_per_object: a.proposals_per_object.unwrap_or(base.proposals_per_object),
        part_proposals_per_object: a.proposals_per_object.map_or(base.part_proposals_per_object, |n| n / 2),
        background_proposals: a.background_proposals.unwrap_or(base.background_proposals),
        extent_proposals_per_object: a.extent_proposals.unwrap_or(base.extent_proposals_per_object),
        seed: a.seed,
        ..base
    };
    let (train_set, test_set) = generate(&spec)?;
    fs::create_dir_all(&a.out)?;
    let train_path = a.out.join("train.jsonl");
    let test_path = a.out.join("test.jsonl");
    let spec_path = a.out.join("scene.json");
    save_dataset(&train_path, &train_set, spec.num_classes, spec.feature_dim)?;
    save_dataset(&test_path, &test_set, spec.num_classes, spec.feature_dim)?;
    write(&spec_path, serde_json::to_string_pretty(&spec)? + "\n")?;

    let manifest = RunManifest::new("gen-data", serde_json::to_value(&spec)?, None, spec.seed).with_outputs(&[
        &train_path,
        &test_path,
        &spec_path,
    ])?;
    manifest.save(&a.out)?;
    println!("wrote {} train and {} test images to {}", train_set.len(), test_set.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (num_classes, raw_dim, data) = load(&a.data)?;
    let config = TrainConfig {
        num_agents: a.k,
        lambda_mode: a.lambda,
        ignore_enabled: a.ignore.on(),
        distillation_enabled: a.distill.on(),
        seed: a.seed,
        ..a.hyper.config(num_classes, raw_dim)?
    };
    let outcome = train(&data, &config)?;
    fs::create_dir_all(&a.out)?;
    let manifest = RunManifest::new("train", serde_json::to_value(&config)?, Some(file_fingerprint(&a.data)?), a.seed);
    let mut checkpoint = outcome.checkpoint;
    checkpoint.manifest_id = Some(manifest.id.clone());
    let ckpt_path = a.out.join("checkpoint.json");
    let log_path = a.out.join("loss_log.csv");
    checkpoint.save(&ckpt_path)?;
    write(&log_path, outcome.log.to_csv())?;
    manifest.with_outputs(&[&ckpt_path, &log_path])?.save(&a.out)?;

    if let (Some(first), Some(last)) = (outcome.log.rows.first(), outcome.log.rows.last()) {
        println!(
            "trained {} steps: L_total {:.4} -> {:.4}",
            config.total_steps,
            first.terms.total(),
            last.terms.total()
        );
    } else {
        println!("0 steps: wrote the initial checkpoint");
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (num_classes, _, data) = load(&a.data)?;
    ensure!((0.0..=1.0).contains(&a.nms), "--nms must lie in [0, 1]");
    fs::create_dir_all(&a.out)?;
    let (records, config, seed) = match (&a.checkpoint, &a.detections) {
        (Some(path), _) => {
            let checkpoint =
                Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            if checkpoint.config.num_classes != num_classes {
                bail!("checkpoint has {} classes, dataset has {}", checkpoint.config.num_classes, num_classes);
            }
            let model = checkpoint.model()?;
            let dets = infer_all(&data, &model, a.heads, a.nms)?;
            let records: Vec<DetectionRecord> = data
                .iter()
                .zip(&dets)
                .flat_map(|(s, d)| d.iter().map(|x| DetectionRecord::new(&s.image_id, x)))
                .collect();
            let config = serde_json::json!({
                "checkpoint": file_fingerprint(path)?,
                "heads": a.heads.to_string(),
                "nms": a.nms,
                "ap": a.ap,
            });
            (records, config, checkpoint.config.seed)
        }
        (None, Some(path)) => {
            let records = load_detections(path).with_context(|| format!("loading {}", path.display()))?;
            let config = serde_json::json!({ "detections": file_fingerprint(path)?, "ap": a.ap });
            (records, config, 0)
        }
        (None, None) => bail!("either --checkpoint or --detections is required"),
    };
    let report = evaluate_records(&data, &records, num_classes, a.ap)?;
    let finite = |v: Option<f64>| v.is_none_or(f64::is_finite);
    ensure!(finite(report.map) && finite(report.corloc), "non-finite metrics");

    let manifest = RunManifest::new("eval", config, Some(file_fingerprint(&a.data)?), seed);
    let dets_path = a.out.join("detections.jsonl");
    let csv_path = a.out.join("report.csv");
    let table_path = a.out.join("report.txt");
    save_detections(&dets_path, &records)?;
    write(&csv_path, report.to_csv())?;
    let table = format!("{}manifest {}\n", report.to_table(), manifest.id);
    write(&table_path, &table)?;
    manifest.with_outputs(&[&dets_path, &csv_path, &table_path])?.save(&a.out)?;
    print!("{table}");
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let (num_classes, raw_dim, train_set) = load(&a.train)?;
    let (test_classes, test_dim, test_set) = load(&a.test)?;
    ensure!(
        (num_classes, raw_dim) == (test_classes, test_dim),
        "train and test sets disagree on classes or feature size"
    );
    ensure!(a.seeds >= 1, "--seeds must be at least 1");
    let base = a.hyper.config(num_classes, raw_dim)?;
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let report = run_ablation(&train_set, &test_set, &base, &seeds, &Arm::ALL)?;
    ensure!(report.arms.iter().all(|r| r.median.map.is_finite() && r.median.corloc.is_finite()), "non-finite metrics");

    fs::create_dir_all(&a.out)?;
    let dataset_fp = format!("{}+{}", file_fingerprint(&a.train)?, file_fingerprint(&a.test)?);
    let manifest = RunManifest::new("ablate", serde_json::to_value(&base)?, Some(dataset_fp), 0);
    let csv_path = a.out.join("ablation.csv");
    let table_path = a.out.join("ablation.txt");
    write(&csv_path, report.to_csv())?;
    let table = format!("{}manifest {}\n", report.to_table(), manifest.id);
    write(&table_path, &table)?;
    manifest.with_outputs(&[&csv_path, &table_path])?.save(&a.out)?;
    print!("{table}");
    Ok(())
}

fn schedule_dump(a: ScheduleArgs) -> Result<()> {
    let schedule = AggregationSchedule::adaptive(a.lb, a.steps, a.lambda_max)?;
    let csv = schedule.to_csv(a.stride)?;
    match a.out {
        Some(path) => write(&path, csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
