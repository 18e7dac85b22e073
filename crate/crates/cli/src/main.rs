use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attrib_core::eval::data::TRAIN_TWO_OBJECT_RATE;
use attrib_core::eval::train::TOY_TRAIN_ITEMS;
use attrib_core::eval::{
    evaluate, gen_synthetic_dataset, train_toy, ClassMode, DatasetSpec, EvalOptions, MapSource, OracleMaps, Polarity,
    RandomMaps, TrainConfig,
};
use attrib_core::explain::{Analysis, Method};
use attrib_core::io::{encode_pgm, read_input, HeatmapFile};
use attrib_core::model::{Modality, Model, ModelConfig};
use attrib_core::selftest::{run_selftest, SelftestOptions};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Default seed for every command that draws random numbers.
const DEFAULT_SEED: u64 = 0;
/// Evaluation data is drawn away from the training seeds by default.
const DEFAULT_EVAL_DATASET_SEED: u64 = 1000;
const DEFAULT_EVAL_ITEMS: usize = 100;

#[derive(Parser, Debug)]
#[command(name = "attrib", version, about = "Relevance maps and explainer evaluation for micro transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write one heatmap per input and method for the target class.
    Explain {
        #[arg(long)]
        model: PathBuf,
        /// PGM image or token-id file; repeat for several inputs.
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        /// Method names, comma separated, or "all".
        #[arg(long, value_delimiter = ',', default_value = "ours")]
        method: Vec<String>,
        /// Target class; defaults to the predicted class of each input.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        format: Vec<Format>,
    },
    /// Run the perturbation and segmentation (images) or token-F1 (text)
    /// protocols on a synthetic dataset.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// Method names, comma separated; "random" and "oracle" are
        /// baselines, "all" means every explainer plus random.
        #[arg(long, value_delimiter = ',', default_value = "all")]
        method: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Seed of the random-map baseline.
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_EVAL_DATASET_SEED)]
        dataset_seed: u64,
        #[arg(long, default_value_t = DEFAULT_EVAL_ITEMS)]
        items: usize,
        #[arg(long, value_delimiter = ',', default_values = ["positive", "negative"])]
        polarity: Vec<PolarityArg>,
        #[arg(long, value_delimiter = ',', default_values = ["predicted", "target"])]
        class_mode: Vec<ClassModeArg>,
        #[arg(long, value_delimiter = ',')]
        format: Vec<Format>,
    },
    /// Run the invariant suite.
    Selftest {
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Print the report as JSON instead of one line per check.
        #[arg(long, value_delimiter = ',')]
        format: Vec<Format>,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Train a model on a synthetic task and save it.
    TrainToy {
        #[arg(long, value_enum, default_value = "image")]
        task: Task,
        #[arg(long)]
        out: PathBuf,
        /// Initialization and shuffling seed.
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Defaults to --seed.
        #[arg(long)]
        dataset_seed: Option<u64>,
        #[arg(long, default_value_t = TOY_TRAIN_ITEMS)]
        items: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Share of two-object images in the training set (image task).
        #[arg(long, default_value_t = TRAIN_TWO_OBJECT_RATE)]
        two_object_rate: f64,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Pgm,
    Json,
    Csv,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Task {
    Image,
    Text,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum PolarityArg {
    Positive,
    Negative,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ClassModeArg {
    Predicted,
    Target,
}

/// Failure classes mapped onto exit codes.
enum Failure {
    /// An invariant check failed (exit 1).
    Invariant(String),
    /// Unusable input or arguments (exit 2).
    Usage(String),
}

impl From<attrib_core::Error> for Failure {
    fn from(e: attrib_core::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invariant(msg)) => {
            eprintln!("attrib: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("attrib: {msg}");
            ExitCode::from(2)
        }
    }
}

fn configure_threads() -> Outcome {
    let Ok(raw) = std::env::var("ATTRIB_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("ATTRIB_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(format!("thread pool: {e}")))
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Explain {
            model,
            input,
            method,
            class,
            out,
            format,
        } => cmd_explain(&model, &input, &method, class, &out, &format),
        Command::Evaluate {
            model,
            method,
            out,
            seed,
            dataset_seed,
            items,
            polarity,
            class_mode,
            format,
        } => {
            let options = EvalOptions {
                seed,
                polarities: polarity
                    .iter()
                    .map(|p| match p {
                        PolarityArg::Positive => Polarity::Positive,
                        PolarityArg::Negative => Polarity::Negative,
                    })
                    .collect(),
                class_modes: class_mode
                    .iter()
                    .map(|c| match c {
                        ClassModeArg::Predicted => ClassMode::Predicted,
                        ClassModeArg::Target => ClassMode::Target,
                    })
                    .collect(),
            };
            cmd_evaluate(&model, &method, &out, dataset_seed, items, &options, &format)
        }
        Command::Selftest {
            seed,
            trials,
            format,
            inject_fault,
        } => cmd_selftest(
            &SelftestOptions {
                seed,
                trials,
                inject_fault,
            },
            &format,
        ),
        Command::TrainToy {
            task,
            out,
            seed,
            dataset_seed,
            items,
            epochs,
            lr,
            two_object_rate,
        } => {
            let defaults = TrainConfig::default();
            let train = TrainConfig {
                epochs: epochs.unwrap_or(defaults.epochs),
                lr: lr.unwrap_or(defaults.lr),
                seed,
                ..defaults
            };
            let spec = match task {
                Task::Image => DatasetSpec::image().with_two_object_rate(two_object_rate),
                Task::Text => DatasetSpec::text(),
            };
            cmd_train_toy(spec, &out, dataset_seed.unwrap_or(seed), items, &train)
        }
    }
}

fn check_formats(requested: &[Format], allowed: &[Format], default: &[Format]) -> Result<Vec<Format>, Failure> {
    if let Some(bad) = requested.iter().find(|f| !allowed.contains(f)) {
        return Err(usage(format!("format {bad:?} is not available for this command")));
    }
    Ok(if requested.is_empty() { default.to_vec() } else { requested.to_vec() })
}

fn prepare_out_dir(out: &Path) -> Outcome {
    fs::create_dir_all(out).map_err(|e| usage(format!("{}: {e}", out.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, bytes).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    if !path.is_file() {
        return Err(usage(format!("{}: model file not found", path.display())));
    }
    Ok(Model::load(path)?)
}

fn parse_methods(names: &[String]) -> Result<Vec<Method>, Failure> {
    let mut out = Vec::new();
    for name in names {
        let picked = if name == "all" { Method::ALL.to_vec() } else { vec![name.parse::<Method>()?] };
        for m in picked {
            if !out.contains(&m) {
                out.push(m);
            }
        }
    }
    Ok(out)
}

fn cmd_explain(model_path: &Path, inputs: &[PathBuf], methods: &[String], class: Option<usize>, out: &Path, format: &[Format]) -> Outcome {
    let methods = parse_methods(methods)?;
    let model = load_model(model_path)?;
    let modality = model.config().modality();
    let default: &[Format] = match modality {
        Modality::Image => &[Format::Pgm, Format::Json],
        Modality::Text => &[Format::Json],
    };
    let formats = check_formats(format, &[Format::Pgm, Format::Json], default)?;
    if modality == Modality::Text && formats.contains(&Format::Pgm) {
        return Err(usage("text models have no image to render; use --format json"));
    }
    let loaded = inputs
        .iter()
        .map(|p| Ok((p, read_input(p, model.config())?)))
        .collect::<Result<Vec<_>, Failure>>()?;
    prepare_out_dir(out)?;

    for (path, input) in &loaded {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "input".into());
        let mut analysis = Analysis::new(&model, input, class)?;
        let target = analysis.target();
        let logits = analysis.tape().output_logits()?;
        for &method in &methods {
            let map = analysis.explain(method)?;
            let base = format!("{stem}.{method}.{target}");
            if formats.contains(&Format::Pgm) {
                let pixels = map.pixel_map.as_ref().expect("image maps carry a pixel map");
                write(&out.join(format!("{base}.pgm")), encode_pgm(pixels)?)?;
            }
            if formats.contains(&Format::Json) {
                write(&out.join(format!("{base}.json")), HeatmapFile::new(&map, &logits).to_json()?)?;
            }
            println!("{}", out.join(base).display());
        }
    }
    Ok(())
}

fn cmd_evaluate(
    model_path: &Path,
    methods: &[String],
    out: &Path,
    dataset_seed: u64,
    items: usize,
    options: &EvalOptions,
    format: &[Format],
) -> Outcome {
    let formats = check_formats(format, &[Format::Json, Format::Csv], &[Format::Json, Format::Csv])?;
    let model = load_model(model_path)?;
    if items == 0 {
        return Err(usage("--items must be at least 1"));
    }
    let random = RandomMaps { seed: options.seed };
    let mut sources: Vec<&dyn MapSource> = Vec::new();
    for name in methods {
        match name.as_str() {
            "all" => {
                sources.extend(Method::ALL.iter().map(|m| m as &dyn MapSource));
                sources.push(&random);
            }
            "random" => sources.push(&random),
            "oracle" if model.config().modality() == Modality::Image => sources.push(&OracleMaps),
            "oracle" => return Err(usage("the oracle baseline needs an image model")),
            other => {
                let m: Method = other.parse()?;
                let idx = Method::ALL.iter().position(|&x| x == m).expect("listed method");
                sources.push(&Method::ALL[idx]);
            }
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    sources.retain(|s| seen.insert(s.name()));
    prepare_out_dir(out)?;

    let spec = DatasetSpec::for_model(model.config())?;
    let dataset = gen_synthetic_dataset(spec, items, dataset_seed)?;
    let report = evaluate(&model, &dataset, &sources, options)?;
    if formats.contains(&Format::Json) {
        write(&out.join("report.json"), report.to_json()?)?;
    }
    if formats.contains(&Format::Csv) {
        write(&out.join("report.csv"), report.to_csv())?;
    }
    for m in &report.methods {
        let mut line = m.method.clone();
        if let (Some(pos), Some(neg)) = (m.auc(Polarity::Positive, ClassMode::Target), m.auc(Polarity::Negative, ClassMode::Target)) {
            line += &format!(" pos_auc={pos:.4} neg_auc={neg:.4}");
        }
        if let Some(s) = &m.segmentation {
            line += &format!(" mAP={:.4} mIoU={:.4}", s.m_ap, s.m_iou);
        }
        if let Some(t) = &m.token_f1 {
            line += &format!(" f1@{}={:.4}", t.k[0], t.f1[0]);
        }
        println!("{line}");
    }
    Ok(())
}

fn cmd_selftest(options: &SelftestOptions, format: &[Format]) -> Outcome {
    let formats = check_formats(format, &[Format::Json], &[])?;
    let report = run_selftest(options)?;
    if formats.contains(&Format::Json) {
        print!("{}", serde_json::to_string_pretty(&report).map_err(|e| usage(e.to_string()))? + "\n");
    } else {
        for c in &report.checks {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            println!("{verdict} {:<28} worst={:.3e} tol={:.0e}  {}", c.name, c.worst, c.tolerance, c.detail);
        }
    }
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure::Invariant(format!("{failed} of {} invariant checks failed", report.checks.len())));
    }
    println!("all {} checks passed", report.checks.len());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    seed: u64,
    dataset_seed: u64,
    items: usize,
    task: DatasetSpec,
    config: &'a ModelConfig,
    train: &'a TrainConfig,
    losses: &'a [f64],
    final_accuracy: f64,
}

fn cmd_train_toy(spec: DatasetSpec, out: &Path, dataset_seed: u64, items: usize, train: &TrainConfig) -> Outcome {
    spec.validate()?;
    if items == 0 {
        return Err(usage("--items must be at least 1"));
    }
    prepare_out_dir(out)?;
    let dataset = gen_synthetic_dataset(spec, items, dataset_seed)?;
    let config = spec.model_config();
    let (model, report) = train_toy(config.clone(), &dataset, train)?;
    model.save(out.join("model.json"))?;
    let summary = TrainSummary {
        seed: train.seed,
        dataset_seed,
        items,
        task: spec,
        config: &config,
        train,
        losses: &report.losses,
        final_accuracy: report.final_accuracy,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| usage(e.to_string()))? + "\n";
    write(&out.join("train.json"), json)?;
    println!(
        "trained {} epochs: loss {:.4} -> {:.4}, train accuracy {:.3}",
        train.epochs,
        report.losses[0],
        report.losses[report.losses.len() - 1],
        report.final_accuracy
    );
    Ok(())
}
