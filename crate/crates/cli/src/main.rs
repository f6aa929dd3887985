use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use exclusion_search::dataset::{load_dataset, save_dataset, strip_persons, Dataset};
use exclusion_search::embedder::{
    embed, load_params, person_identities, save_params, train, write_train_log, TrainConfig,
};
use exclusion_search::exclusion::{
    apply_index_exclusion, nms, simulate_detections, DetectionRecord, DetectorNoiseModel, NMS_IOU,
};
use exclusion_search::harness::{
    full_index, generate_benchmark, run_experiment, run_search, training_sets, ExperimentConfig,
};
use exclusion_search::index::{read_index, write_audit, write_index, SearchIndex};
use exclusion_search::losses::ConfusionConfig;
use exclusion_search::metrics::{evaluate, EvalProtocol};
use exclusion_search::probes::{run_probe_suite, ProbePart};
use exclusion_search::rng::derive_seed;

#[derive(Parser)]
#[command(
    name = "exsearch",
    version,
    about = "Instance search with person-exclusion safeguards"
)]
struct Cli {
    /// Experiment config (TOML). Defaults apply to anything it leaves out.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides the root seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train / validation / test splits.
    Generate {
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train an embedder on a dataset file.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Loss::Ms)]
        loss: Loss,
        /// How persons in the training file are treated.
        #[arg(long, value_enum, default_value_t = Persons::Keep)]
        persons: Persons,
        /// Start from these params instead of a fresh init.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Per-epoch loss log (CSV).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Embed a dataset into a plain index with nothing excluded.
    Index {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Build an index with detector-driven person exclusion.
    Exclude {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Detections as JSON lines. Without it the detector is simulated
        /// from the `[detector]` section of the config.
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Per-entry exclusion audit (CSV).
        #[arg(long)]
        audit: Option<PathBuf>,
        /// Case counts (CSV).
        #[arg(long)]
        cases: Option<PathBuf>,
    },
    /// Score an index under the evaluation protocols.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long, value_enum)]
        protocol: Vec<Protocol>,
        /// Writes `{protocol}.json` and `{protocol}_per_query.csv` here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Partial-region probes against one or more models.
    Probe {
        #[arg(long)]
        data: PathBuf,
        /// `name=path`, repeatable.
        #[arg(long = "model", required = true, value_parser = parse_named)]
        models: Vec<(String, PathBuf)>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Random search over confusion-loss settings with a Pareto front.
    Search {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
        /// Warm start for every trial.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Run the full four-arm comparison.
    Experiment {
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Loss {
    Ms,
    Confusion,
}

#[derive(Clone, Copy, ValueEnum)]
enum Persons {
    Keep,
    Strip,
    /// Keep every person and drop objects until the size matches the
    /// person-free set.
    Balance,
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Person,
    NonPerson,
}

impl Protocol {
    fn build(self) -> EvalProtocol {
        match self {
            Protocol::Person => EvalProtocol::person(),
            Protocol::NonPerson => EvalProtocol::non_person(),
        }
    }
}

fn parse_named(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected name=path, got `{s}`")),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let file = BufReader::new(File::open(path).with_context(|| format!("reading {}", path.display()))?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    let stdout = io::stdout();
    match cli.command {
        Command::Generate { out } => {
            fs::create_dir_all(&out)?;
            let b = generate_benchmark(&cfg)?;
            for (name, ds) in [("train", &b.train), ("validation", &b.validation), ("test", &b.test)] {
                let path = out.join(format!("{name}.jsonl"));
                save_dataset(ds, &path)?;
                println!("{}: {} records, {} persons", path.display(), ds.len(), ds.n_persons());
            }
        }
        Command::Train {
            data,
            out,
            loss,
            persons,
            init,
            epochs,
            log,
        } => {
            let ds = dataset(&data)?;
            let ds = match persons {
                Persons::Keep => ds,
                Persons::Strip => strip_persons(&ds),
                Persons::Balance => training_sets(&ds, cfg.seed)?.1,
            };
            let (base, stream, conf) = match loss {
                Loss::Ms => (&cfg.train_ms, "train/ms", ConfusionConfig::default()),
                Loss::Confusion => {
                    let c = &cfg.confusion;
                    let conf = ConfusionConfig {
                        gamma: c.gamma,
                        margin: c.margin,
                        weight: c.weight,
                        forbidden_set: person_identities(&ds),
                    };
                    (&cfg.train_confusion, "train/confusion", conf)
                }
            };
            let tcfg = TrainConfig {
                seed: derive_seed(cfg.seed, stream),
                epochs: epochs.unwrap_or(base.epochs),
                ..base.clone()
            };
            let init = init.as_deref().map(load_params).transpose()?;
            let (params, train_log) = train(&ds, &cfg.ms_loss, &conf, &tcfg, init.as_ref())?;
            save_params(&params, &out)?;
            if let Some(path) = log {
                write_train_log(&train_log, create(&path)?)?;
            }
            if let Some(last) = train_log.last() {
                println!(
                    "trained {} epochs on {} records: ms {:.4} conf {:.4} total {:.4}",
                    train_log.len(),
                    ds.len(),
                    last.ms_loss,
                    last.conf_loss,
                    last.total
                );
            }
        }
        Command::Index { model, data, out } => {
            let params = load_params(&model)?;
            let index = full_index(&params, &dataset(&data)?)?;
            write_index(&index, create(&out)?)?;
            println!("{} entries", index.len());
        }
        Command::Exclude {
            model,
            data,
            out,
            detections,
            audit,
            cases,
        } => {
            let params = load_params(&model)?;
            let ds = dataset(&data)?;
            let dets = match detections {
                Some(p) => read_detections(&p)?,
                None => {
                    let noise = DetectorNoiseModel {
                        seed: derive_seed(cfg.seed, "detector"),
                        ..cfg.detector.clone()
                    };
                    simulate_detections(&ds, &noise)?
                }
            };
            let dets = nms(&dets, NMS_IOU)?;
            let (index, report) = apply_index_exclusion(&ds, &dets, |f| embed(&params, f))?;
            write_index(&index, create(&out)?)?;
            if let Some(p) = audit {
                write_audit(&index, create(&p)?)?;
            }
            match cases {
                Some(p) => report.write_csv(create(&p)?)?,
                None => report.write_csv(stdout.lock())?,
            }
            eprintln!("{} entries, {} searchable", index.len(), index.searchable_len());
        }
        Command::Evaluate {
            model,
            data,
            index,
            protocol,
            out_dir,
        } => {
            let params = load_params(&model)?;
            let ds = dataset(&data)?;
            let index: SearchIndex = read_index(BufReader::new(
                File::open(&index).with_context(|| format!("reading {}", index.display()))?,
            ))?;
            let protocols = if protocol.is_empty() {
                vec![Protocol::Person, Protocol::NonPerson]
            } else {
                protocol
            };
            if let Some(d) = &out_dir {
                fs::create_dir_all(d)?;
            }
            for p in protocols {
                let report = evaluate(&index, |f| embed(&params, f), &ds, &p.build())?;
                println!(
                    "{}: mAP {:.4} mAP@R {:.4} rank-1 {:.4} rank-5 {:.4} ({} queries, {} skipped)",
                    report.protocol,
                    report.map,
                    report.map_at_r,
                    report.rank1,
                    report.rank5,
                    report.n_queries,
                    report.n_skipped
                );
                if let Some(d) = &out_dir {
                    report.write_summary_json(create(&d.join(format!("{}.json", report.protocol)))?)?;
                    report.write_per_query_csv(create(&d.join(format!("{}_per_query.csv", report.protocol)))?)?;
                }
            }
        }
        Command::Probe { data, models, out } => {
            let ds = dataset(&data)?;
            let mut loaded = Vec::new();
            for (name, path) in &models {
                loaded.push((
                    name.as_str(),
                    load_params(path).with_context(|| format!("model {name}"))?,
                ));
            }
            let refs: Vec<(&str, &_)> = loaded.iter().map(|(n, p)| (*n, p)).collect();
            let parts = [
                ProbePart::Full,
                ProbePart::Crop {
                    top: cfg.probes.crop_top,
                    bottom: cfg.probes.crop_bottom,
                },
                ProbePart::Bag,
                ProbePart::UpperClothing,
            ];
            let report = run_probe_suite(&refs, &ds, &parts)?;
            match out {
                Some(p) => report.write_csv(create(&p)?)?,
                None => report.write_csv(stdout.lock())?,
            }
        }
        Command::Search { out, trials, init } => {
            let mut cfg = cfg;
            if let Some(n) = trials {
                cfg.search.n_trials = n;
            }
            if cfg.search.n_trials == 0 {
                bail!("search needs at least one trial (--trials or [search] n_trials)");
            }
            let bench = generate_benchmark(&cfg)?;
            let (_, with) = training_sets(&bench.train, cfg.seed)?;
            let init = init.as_deref().map(load_params).transpose()?;
            let outcome = run_search(&cfg, &with, &bench.validation, init.as_ref())?;
            outcome.write_csv(create(&out)?)?;
            println!("{} trials, {} on the front", outcome.trials.len(), outcome.front.len());
            for t in &outcome.front {
                println!(
                    "trial {}: person mAP@R {:.4} non-person mAP@R {:.4}",
                    t.trial, t.person_map_at_r, t.non_person_map_at_r
                );
            }
        }
        Command::Experiment { out } => {
            let mut cfg = cfg;
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let res = run_experiment(&cfg)?;
            res.write_summary_csv(stdout.lock())?;
            stdout.lock().flush()?;
            eprintln!("results in {}", cfg.out_dir.display());
        }
    }
    Ok(())
}
