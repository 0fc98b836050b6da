use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use eet::attention::AttentionVariant;
use eet::checkpoint::Checkpoint;
use eet::dataset::{DatasetFile, RecordKind};
use eet::featurize::BandSet;
use eet::gradcheck::GradCheckOptions;
use eet::layout::ElectrodeLayout;
use eet::model::{attention_maps, check_model_gradients, EetConfig};
use eet::optim::Schedule;
use eet::synth::{generate, Effect, SyntheticSpec};
use eet::train::{accuracy, train_with_models, SplitMode, TrainOptions};
use eet::{EetError, Result};

/// Spatial-temporal attention transformer for EEG emotion recognition.
#[derive(Parser)]
#[command(name = "eet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted class structure.
    Synth(SynthArgs),
    /// Convert a CSV of precomputed DE features into a dataset file.
    ImportCsv(ImportArgs),
    /// Cross-validate a model on a dataset and write the report.
    Train(TrainArgs),
    /// Accuracy of a saved model on a dataset.
    Eval(EvalArgs),
    /// Check analytic gradients of the toy model against central differences.
    Gradcheck(GradcheckArgs),
    /// Write the attention matrices of one sample as CSV files.
    InspectAttn(InspectArgs),
    /// Print the default electrode grid table.
    DumpLayout(DumpArgs),
}

#[derive(Args)]
struct LayoutArg {
    /// Electrode table (`grid,V,H` then `name,row,col` lines); defaults to the built-in 8×8 grid.
    #[arg(long)]
    layout: Option<PathBuf>,
}

impl LayoutArg {
    fn load(&self) -> Result<ElectrodeLayout> {
        match &self.layout {
            Some(p) => ElectrodeLayout::load(p),
            None => Ok(ElectrodeLayout::default()),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    seconds: usize,
    /// Sampling rate in Hz.
    #[arg(long, default_value_t = 128)]
    rate: usize,
    /// spatial, spectral, temporal or joint.
    #[arg(long, default_value = "joint")]
    effect: Effect,
    /// Amplitude multiplier of the boosted component (> 1).
    #[arg(long, default_value_t = 2.0)]
    effect_size: f64,
    /// Standard deviation of white noise added to every channel.
    #[arg(long, default_value_t = 0.1)]
    noise_floor: f64,
    /// Band carrying the effect, or `all`.
    #[arg(long, default_value = "all")]
    band: String,
    #[arg(long, default_value_t = 2)]
    region_side: usize,
    /// Store raw signals instead of DE features.
    #[arg(long)]
    raw: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    layout: LayoutArg,
}

#[derive(Args)]
struct ImportArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of classes; defaults to the largest label plus one.
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args)]
struct ModelArgs {
    /// s, t, st or s+t.
    #[arg(long, default_value = "s+t")]
    variant: AttentionVariant,
    #[arg(long, default_value_t = 4)]
    blocks: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// MLP hidden width; defaults to four times the model width.
    #[arg(long)]
    mlp_hidden: Option<usize>,
    #[arg(long, default_value_t = 2)]
    region_side: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory receiving cv_report.json and cv_folds.csv.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Single stratified split with this training fraction instead of k-fold (0.6 gives 9:6).
    #[arg(long, conflicts_with = "folds")]
    holdout: Option<f64>,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Epochs at which the learning rate is multiplied by --gamma.
    #[arg(long, value_delimiter = ',', default_value = "50,100,150,200")]
    milestones: Vec<usize>,
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    #[arg(long, default_value_t = 1e-7)]
    min_lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Feed raw DE values instead of z-scoring them per fold.
    #[arg(long)]
    no_standardize: bool,
    /// Train folds concurrently.
    #[arg(long)]
    parallel_folds: bool,
    /// Also write each fold's model as fold<k>.ckpt.
    #[arg(long)]
    save_models: bool,
    #[command(flatten)]
    layout: LayoutArg,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    layout: LayoutArg,
}

#[derive(Args)]
struct GradcheckArgs {
    /// s, t, st, s+t or all.
    #[arg(long, default_value = "all")]
    variant: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Index of the record to inspect.
    #[arg(long, default_value_t = 0)]
    sample: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    layout: LayoutArg,
}

#[derive(Args)]
struct DumpArgs {
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| EetError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| EetError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn synth(args: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        samples: args.samples,
        classes: args.classes,
        seconds: args.seconds,
        rate: args.rate,
        effect: args.effect,
        effect_size: args.effect_size,
        noise_floor: args.noise_floor,
        band: args.band,
        region_side: args.region_side,
        store: if args.raw {
            RecordKind::Raw
        } else {
            RecordKind::De
        },
        seed: args.seed,
    };
    let out = generate(&spec, &args.layout.load()?)?;
    out.dataset.save(&args.out)?;
    println!(
        "wrote {} records to {}",
        out.dataset.len(),
        args.out.display()
    );
    if let Some(a) = out.ambiguity {
        println!(
            "joint check: best single-statistic stump {:.3} ({}), planted pattern {:.3}",
            a.best_stump_accuracy, a.best_statistic, a.pattern_accuracy
        );
    }
    Ok(())
}

fn import_csv(args: ImportArgs) -> Result<()> {
    let data = DatasetFile::import_csv(&args.input, &BandSet::default(), args.classes)?;
    data.save(&args.out)?;
    println!("wrote {} records to {}", data.len(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let data = DatasetFile::load(&args.data)?;
    let layout = args.layout.load()?;
    let set = data.to_labeled(&layout)?;
    let m = &args.model;
    let config = EetConfig {
        variant: m.variant,
        blocks: m.blocks,
        width: m.width,
        heads: m.heads,
        mlp_hidden: m.mlp_hidden.unwrap_or(4 * m.width),
        region_side: m.region_side,
        grid_rows: layout.rows(),
        grid_cols: layout.cols(),
        seconds: data.seconds,
        bands: data.bands.len(),
        classes: data.classes,
        seed: args.seed,
    };
    let opts = TrainOptions {
        epochs: args.epochs,
        batch_size: args.batch_size,
        schedule: Schedule {
            base_lr: args.lr,
            gamma: args.gamma,
            milestones: args.milestones,
            floor_lr: args.min_lr,
        },
        split: match args.holdout {
            Some(f) => SplitMode::Holdout(f),
            None => SplitMode::KFold(args.folds),
        },
        seed: args.seed,
        standardize: !args.no_standardize,
        parallel_folds: args.parallel_folds,
    };
    let (report, models) = train_with_models(&config, &set, &opts)?;
    create_dir(&args.out)?;
    write(&args.out.join("cv_report.json"), report.to_json())?;
    write(&args.out.join("cv_folds.csv"), report.to_csv())?;
    if args.save_models {
        for (k, model) in models.iter().enumerate() {
            model.save(&args.out.join(format!("fold{k}.ckpt")))?;
        }
    }
    println!(
        "variant={} folds={} mean_accuracy={:.6} std_accuracy={:.6}",
        config.variant,
        report.folds.len(),
        report.mean_accuracy,
        report.std_accuracy
    );
    Ok(())
}

/// Dataset inputs, standardized the way the checkpoint's model was trained.
fn load_inputs(
    checkpoint: &Checkpoint,
    data: &Path,
    layout: &LayoutArg,
) -> Result<eet::train::LabeledSet> {
    let data = DatasetFile::load(data)?;
    let set = data.to_labeled(&layout.load()?)?;
    match &checkpoint.standardizer {
        Some(z) => z.apply_all(&set),
        None => Ok(set),
    }
}

fn eval(args: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let set = load_inputs(&ck, &args.data, &args.layout)?;
    let acc = accuracy(&ck.model, &set)?;
    println!("accuracy={acc:.6} samples={}", set.len());
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<bool> {
    let variants = if args.variant == "all" {
        AttentionVariant::ALL.to_vec()
    } else {
        vec![args.variant.parse()?]
    };
    let opts = GradCheckOptions {
        step: args.step,
        tol: args.tol,
        ..GradCheckOptions::default()
    };
    let mut all = true;
    for v in variants {
        let report = check_model_gradients(&EetConfig::toy(v), args.seed, &opts)?;
        println!(
            "variant={v} checked={} max_rel_err={:.3e} tol={:e} result={}",
            report.checked,
            report.max_rel_err,
            report.tol,
            if report.passed { "pass" } else { "fail" }
        );
        all &= report.passed;
    }
    Ok(all)
}

fn inspect_attn(args: InspectArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let set = load_inputs(&ck, &args.data, &args.layout)?;
    let x = set.inputs.get(args.sample).ok_or_else(|| {
        EetError::Contract(format!("sample {} outside 0..{}", args.sample, set.len()))
    })?;
    create_dir(&args.out)?;
    let maps = attention_maps(&ck.model, x)?;
    for m in &maps {
        let name = format!(
            "block{}_stage{}_head{}_{}.csv",
            m.block,
            m.stage,
            m.head,
            m.key_set.name()
        );
        let (_, cols) = m.weights.dims2().expect("attention is a matrix");
        let mut text = String::new();
        for row in m.weights.data().chunks(cols) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            text.push_str(&line.join(","));
            text.push('\n');
        }
        write(&args.out.join(name), text)?;
    }
    println!(
        "wrote {} attention matrices to {}",
        maps.len(),
        args.out.display()
    );
    Ok(())
}

fn dump_layout(args: DumpArgs) -> Result<()> {
    let table = ElectrodeLayout::default().to_table();
    match args.out {
        Some(p) => write(&p, table),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(a) => synth(a).map(|_| true),
        Command::ImportCsv(a) => import_csv(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
        Command::InspectAttn(a) => inspect_attn(a).map(|_| true),
        Command::DumpLayout(a) => dump_layout(a).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error[gradcheck]: gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {message}", e.kind());
            ExitCode::FAILURE
        }
    }
}
