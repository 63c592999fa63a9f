use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use filtrank::annotation::{AnnotationStore, StoreConfig};
use filtrank::dataset::{
    filtered_manifest, generate_filtered, pair_design, pair_manifest, score_log, synthesize_corpus, Corpus,
    LabelRecord, PairDesign, SplitRecord, SyntheticAnnotator, FILTERED_KIND, LABELS_KIND, PAIRS_KIND, SCORES_KIND,
    SPLIT_KIND,
};
use filtrank::error::{Error, Result};
use filtrank::evaluation::{evaluate, rank_filters, EvalReport};
use filtrank::filters::{apply_all, apply_named, FilterId};
use filtrank::imagecore::{load_image, save_image};
use filtrank::manifest;
use filtrank::models::{ColumnModel, Mode};
use filtrank::pipeline::{partition, split_records, test_ground_truth, train_data};
use filtrank::trainer::{TrainConfig, Trainer};

const LABELS_FILE: &str = "labels.jsonl";
const SPLIT_FILE: &str = "split.jsonl";
const MODEL_FILE: &str = "model.ckpt";

#[derive(Parser)]
#[command(name = "filtrank", version, about = "Filter recommendation pipeline")]
struct Cli {
    /// Root of all stored artifacts.
    #[arg(long, global = true, env = "FILTRANK_DATA_DIR", default_value = "filtrank-data")]
    data_dir: PathBuf,
    /// Seed for every random choice; overrides a config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize procedural reference images into the data directory.
    GenDataset {
        #[arg(long, default_value_t = 40)]
        per_category: usize,
        #[arg(long, default_value_t = 72)]
        side: usize,
        /// Also write the 22 filtered PNGs of every reference.
        #[arg(long)]
        filtered: bool,
    },
    /// Apply one filter, or all 22, to an image.
    Apply {
        #[arg(long)]
        image: PathBuf,
        /// Filter name; omit to write every filter into `--out` as a directory.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print or check the 33-pair comparison design.
    PairDesign(PairDesignArgs),
    /// Label every designed pair with the synthetic annotator.
    SimulateLabels {
        /// Utility gap below which the verdict is `equal`.
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        /// Standard deviation of per-comparison utility noise.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-image scores from a label log.
    Score {
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Also write the scores as a record file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stratified 7:1 train/test split of the references.
    Split {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write its checkpoint.
    Train(TrainArgs),
    /// Top-K accuracy of a checkpoint on the test references.
    Eval(EvalArgs),
    /// Rank the 22 filters for one image.
    Recommend {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Run the annotation and recommendation HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Directory served at `/`.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        /// Never re-offer a pair to an annotator whose HIT containing it was rejected.
        #[arg(long)]
        distinct_reannotator: bool,
    },
    /// Write the accuracy table, histograms and full report of a checkpoint.
    Report {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct PairDesignArgs {
    #[arg(long)]
    print: bool,
    /// Validate a design file of `Left Right` lines.
    #[arg(long)]
    check: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Continue from a trainer state written next to an earlier checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Random-guess trials per K.
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} {e}", e.kind());
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let dir = cli.data_dir.as_path();
    let seed = cli.seed;
    match cli.command {
        Command::GenDataset {
            per_category,
            side,
            filtered,
        } => gen_dataset(dir, per_category, side, seed.unwrap_or(0), filtered),
        Command::Apply { image, filter, out } => apply(&image, filter.as_deref(), &out),
        Command::PairDesign(args) => pair_design_cmd(args),
        Command::SimulateLabels { epsilon, noise, out } => {
            let corpus = Corpus::load(dir)?;
            let oracle = SyntheticAnnotator {
                epsilon,
                noise,
                seed: seed.unwrap_or(0),
                ..SyntheticAnnotator::default()
            };
            let labels = corpus.simulate(&oracle, &pair_design())?;
            let out = out.unwrap_or_else(|| dir.join(LABELS_FILE));
            manifest::write(&out, LABELS_KIND, &labels)?;
            println!("{} labels for {} references -> {}", labels.len(), corpus.refs.len(), out.display());
            Ok(())
        }
        Command::Score { labels, out } => {
            let labels = read_labels(dir, labels.as_deref())?;
            let all: Vec<_> = score_log(&labels, &pair_design())?.into_values().flatten().collect();
            for s in &all {
                println!("{}\t{}\t{}", s.ref_id, s.filter, s.score);
            }
            if let Some(out) = out {
                manifest::write(out, SCORES_KIND, &all)?;
            }
            Ok(())
        }
        Command::Split { out } => {
            let corpus = Corpus::load(dir)?;
            let records = split_records(&corpus.refs, seed.unwrap_or(0))?;
            let out = out.unwrap_or_else(|| dir.join(SPLIT_FILE));
            manifest::write(&out, SPLIT_KIND, &records)?;
            let (train, test) = partition(&records);
            println!("train {} test {} -> {}", train.len(), test.len(), out.display());
            Ok(())
        }
        Command::Train(args) => train_cmd(dir, seed, args),
        Command::Eval(args) => {
            let report = eval_cmd(dir, seed, &args)?;
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Recommend { ckpt, image, k } => {
            if !(1..=22).contains(&k) {
                return Err(Error::Config(format!("k must be in 1..=22, got {k}")));
            }
            let model = load_model(&ckpt)?;
            let img = load_image(&image)?;
            let id = image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
            let ranking = rank_filters(&model, &id, &img, model.mode())?;
            for (f, score) in ranking.top(k) {
                println!("{f}\t{score:.6}");
            }
            Ok(())
        }
        Command::Serve {
            addr,
            ckpt,
            static_dir,
            distinct_reannotator,
        } => serve(dir, seed.unwrap_or(0), addr, ckpt.as_deref(), static_dir, distinct_reannotator),
        Command::Report { eval, out } => {
            let report = eval_cmd(dir, seed, &eval)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("table.txt"), report.to_table())?;
            fs::write(out.join("histograms.csv"), report.histogram_csv())?;
            fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            print!("{}", report.to_table());
            Ok(())
        }
    }
}

fn gen_dataset(dir: &Path, per_category: usize, side: usize, seed: u64, filtered: bool) -> Result<()> {
    let corpus = synthesize_corpus(per_category, side, seed)?;
    corpus.save(dir)?;
    let design = pair_design();
    manifest::write(dir.join("pairs.jsonl"), PAIRS_KIND, &pair_manifest(&corpus.refs, &design))?;
    let images = filtered_manifest(&corpus.refs);
    if filtered {
        let outcome = generate_filtered(dir, &corpus.refs)?;
        if let Some((id, e)) = outcome.failures.into_iter().next() {
            return Err(Error::Decode(format!("{id}: {e}")));
        }
    }
    manifest::write(dir.join("filtered.jsonl"), FILTERED_KIND, &images)?;
    println!(
        "references {} filtered {} pairs {}",
        corpus.refs.len(),
        images.len(),
        corpus.refs.len() * design.edges().len()
    );
    Ok(())
}

fn apply(image: &Path, filter: Option<&str>, out: &Path) -> Result<()> {
    let img = load_image(image)?;
    match filter {
        Some(name) => save_image(&apply_named(&img, name)?, out),
        None => {
            fs::create_dir_all(out)?;
            for (f, filtered) in FilterId::all().zip(apply_all(&img)) {
                save_image(&filtered, out.join(format!("{f}.png")))?;
            }
            Ok(())
        }
    }
}

fn pair_design_cmd(args: PairDesignArgs) -> Result<()> {
    let design = match &args.check {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
                _ => e.into(),
            })?;
            let d = PairDesign::parse(&text)?;
            d.validate()?;
            d
        }
        None => pair_design(),
    };
    if args.print {
        print!("{}", design.to_text());
    } else {
        println!("ok: {} pairs, every filter in 3", design.edges().len());
    }
    Ok(())
}

fn read_labels(dir: &Path, path: Option<&Path>) -> Result<Vec<LabelRecord>> {
    manifest::read(path.map_or_else(|| dir.join(LABELS_FILE), Path::to_path_buf), LABELS_KIND)
}

fn read_split(dir: &Path) -> Result<Vec<SplitRecord>> {
    manifest::read(dir.join(SPLIT_FILE), SPLIT_KIND)
}

fn train_cmd(dir: &Path, seed: Option<u64>, args: TrainArgs) -> Result<()> {
    let mut trainer = match &args.resume {
        Some(state) => Trainer::from_checkpoint(&fs::read(state)?)?,
        None => {
            let mut cfg = match &args.config {
                Some(p) => TrainConfig::from_toml(&fs::read_to_string(p)?)?,
                None => TrainConfig::default(),
            };
            if let Some(m) = args.mode {
                cfg.mode = m;
            }
            if let Some(e) = args.epochs {
                cfg.epochs = e;
            }
            if let Some(lr) = args.learning_rate {
                cfg.learning_rate = lr;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            Trainer::new(cfg)?
        }
    };
    let corpus = Corpus::load(dir)?;
    let labels = read_labels(dir, None)?;
    let split = read_split(dir)?;
    let data = train_data(&corpus, &labels, &split, trainer.config().mode)?;
    let out = args.out.unwrap_or_else(|| dir.join(MODEL_FILE));
    while trainer.epoch() < trainer.config().epochs {
        let m = trainer.run_epoch(&data)?;
        println!("{}", serde_json::to_string(&m)?);
    }
    // Wall-clock timings stay out of the checkpoint so seeded runs are byte-identical.
    let mut metrics = serde_json::to_value(trainer.metrics())?;
    for m in metrics.as_array_mut().into_iter().flatten() {
        if let Some(obj) = m.as_object_mut() {
            obj.remove("seconds");
        }
    }
    let meta = serde_json::json!({ "config": trainer.config(), "metrics": metrics });
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&out, trainer.model().to_checkpoint(meta)?)?;
    fs::write(state_path(&out), trainer.to_checkpoint()?)?;
    Ok(())
}

fn state_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".state");
    PathBuf::from(s)
}

fn load_model(path: &Path) -> Result<ColumnModel<f32>> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => e.into(),
    })?;
    Ok(ColumnModel::from_checkpoint(&bytes)?.0)
}

fn eval_cmd(dir: &Path, seed: Option<u64>, args: &EvalArgs) -> Result<EvalReport> {
    let model = load_model(&args.ckpt.clone().unwrap_or_else(|| dir.join(MODEL_FILE)))?;
    let corpus = Corpus::load(dir)?;
    let labels = read_labels(dir, None)?;
    let (_, test) = partition(&read_split(dir)?);
    let gt = test_ground_truth(&labels, &test)?;
    evaluate(&model.mode().to_string(), &model, &corpus, &gt, args.trials, seed.unwrap_or(0))
}

fn serve(
    dir: &Path,
    seed: u64,
    addr: SocketAddr,
    ckpt: Option<&Path>,
    static_dir: Option<PathBuf>,
    distinct_reannotator: bool,
) -> Result<()> {
    let corpus = Corpus::load(dir)?;
    let pairs = pair_manifest(&corpus.refs, &pair_design());
    let cfg = StoreConfig {
        distinct_reannotator,
        seed,
        ..StoreConfig::default()
    };
    let store = AnnotationStore::open(&dir.join("annotation"), pairs, cfg)?;
    let model = ckpt.map(load_model).transpose()?;
    let state = Arc::new(filtrank_service::AppState::new(store, corpus, model));
    let app = match static_dir {
        Some(d) => filtrank_service::router_with_static(state, d),
        None => filtrank_service::router(state),
    };
    let rt = tokio::runtime::Runtime::new()?;
    eprintln!("listening on http://{addr}");
    rt.block_on(filtrank_service::serve(addr, app))?;
    Ok(())
}
