use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::dataset::{downsample_non_persons, generate_synthetic, strip_persons, write_dataset, Dataset, Split};
use crate::embedder::{
    embed, person_identities, train, write_params, write_train_log, EmbedderParams, TrainConfig, TrainLog,
};
use crate::exclusion::{apply_index_exclusion, nms, simulate_detections, DetectorNoiseModel, MatchReport, NMS_IOU};
use crate::index::{build_index, write_audit, write_index, IndexEntry, SearchIndex};
use crate::losses::ConfusionConfig;
use crate::metrics::{evaluate, permutation_test, rank_queries, EvalProtocol, EvalReport, PermutationResult};
use crate::probes::{run_probe_suite, ProbePart, ProbeReport};
use crate::rng::{derive_seed, substream};
use crate::{Error, Result};

use super::config::{Arm, ExperimentConfig};
use super::pareto::{pareto_search, SearchOutcome, TrialParams};
use super::pca::pca_2d;

/// The three splits of one benchmark, all from the same latent world.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

pub fn generate_benchmark(cfg: &ExperimentConfig) -> Result<Benchmark> {
    let seed = derive_seed(cfg.seed, "generator");
    let split = |split: Split| {
        let mut g = cfg.generator.clone();
        g.seed = seed;
        g.split = split;
        generate_synthetic(&g)
    };
    Ok(Benchmark {
        train: split(Split::Train)?,
        validation: split(Split::Validation)?,
        test: split(Split::Test)?,
    })
}

/// Training sets of the two model families: objects only, and a set of the
/// same size that keeps every person and drops objects at random.
pub fn training_sets(train_ds: &Dataset, root_seed: u64) -> Result<(Dataset, Dataset)> {
    let without = strip_persons(train_ds);
    if train_ds.n_persons() > without.len() {
        return Err(Error::InvalidConfig(
            "more persons than objects in the training split".into(),
        ));
    }
    let mut rng = substream(root_seed, "downsample");
    let with = downsample_non_persons(train_ds, without.len(), &mut rng);
    Ok((without, with))
}

fn confusion_cfg(train_ds: &Dataset, weight: f64, margin: f64, gamma: f64) -> ConfusionConfig {
    ConfusionConfig {
        gamma,
        margin,
        weight,
        forbidden_set: person_identities(train_ds),
    }
}

/// Plain index over every record, nothing excluded.
pub fn full_index(params: &EmbedderParams, ds: &Dataset) -> Result<SearchIndex> {
    let mut entries = Vec::with_capacity(ds.len());
    for r in ds.records() {
        entries.push(IndexEntry::new(
            r.instance_id,
            r.frame_id,
            r.class_label.clone(),
            r.identity_label.clone(),
            embed(params, &r.features)?,
        ));
    }
    build_index(entries)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub protocol: String,
    pub arm: Arm,
    pub map: f64,
    pub map_at_r: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub n_queries: usize,
    pub coverage: f64,
    pub zero_coverage: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PcaPoint {
    pub instance_id: u64,
    pub frame_id: u64,
    pub identity_label: String,
    pub pc1: f64,
    pub pc2: f64,
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub arm: Arm,
    pub index: SearchIndex,
    pub reports: Vec<EvalReport>,
    pub pca: Vec<PcaPoint>,
}

#[derive(Clone, Debug)]
pub struct ExperimentResults {
    pub config: ExperimentConfig,
    pub benchmark: Benchmark,
    pub ms_model: Option<(EmbedderParams, TrainLog)>,
    pub confusion_model: Option<(EmbedderParams, TrainLog)>,
    pub match_report: Option<MatchReport>,
    pub arms: Vec<ArmResult>,
    pub probes: Option<ProbeReport>,
    pub permutation: Option<PermutationResult>,
    pub search: Option<SearchOutcome>,
}

impl ExperimentResults {
    pub fn arm(&self, arm: Arm) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm == arm)
    }

    pub fn report(&self, arm: Arm, protocol: &str) -> Option<&EvalReport> {
        self.arm(arm)?.reports.iter().find(|r| r.protocol == protocol)
    }

    /// Person-protocol mAP of an arm, if both were run.
    pub fn person_map(&self, arm: Arm) -> Option<f64> {
        self.report(arm, "person").map(|r| r.map)
    }

    pub fn non_person_map(&self, arm: Arm) -> Option<f64> {
        self.report(arm, "non_person").map(|r| r.map)
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut rows = Vec::new();
        for p in &self.config.protocols {
            for a in &self.arms {
                if let Some(r) = a.reports.iter().find(|r| r.protocol == p.name) {
                    rows.push(SummaryRow {
                        protocol: p.name.clone(),
                        arm: a.arm,
                        map: r.map,
                        map_at_r: r.map_at_r,
                        rank1: r.rank1,
                        rank5: r.rank5,
                        n_queries: r.n_queries,
                        coverage: r.coverage,
                        zero_coverage: r.zero_coverage,
                    });
                }
            }
        }
        rows
    }

    /// Protocol rows by arm columns, mAP in each cell.
    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["protocol".to_string()];
        header.extend(self.arms.iter().map(|a| a.arm.to_string()));
        out.write_record(&header)?;
        for p in &self.config.protocols {
            let mut row = vec![p.name.clone()];
            for a in &self.arms {
                let v = a.reports.iter().find(|r| r.protocol == p.name).map(|r| r.map);
                row.push(v.map(|x| format!("{x:.6}")).unwrap_or_default());
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Stage label for errors and progress.
fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.at_stage(name))
}

/// Trains the models the arms need, builds each arm's index, evaluates
/// every protocol and runs the probe suite. Pure computation, no files.
pub fn run_arms(cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    stage("config", cfg.validate())?;
    let bench = stage("generate", generate_benchmark(cfg))?;
    let (without_persons, with_persons) = stage("training_sets", training_sets(&bench.train, cfg.seed))?;

    let need_ms =
        cfg.arms.iter().any(|a| !a.uses_confusion_model()) || cfg.confusion.init_from_ms || cfg.probes.enabled;
    let need_conf = cfg.arms.iter().any(|a| a.uses_confusion_model());
    let ms_model = if need_ms {
        let tcfg = TrainConfig {
            seed: derive_seed(cfg.seed, "train/ms"),
            ..cfg.train_ms.clone()
        };
        Some(stage(
            "train_ms",
            train(&without_persons, &cfg.ms_loss, &ConfusionConfig::default(), &tcfg, None),
        )?)
    } else {
        None
    };
    let confusion_model = if need_conf {
        let c = &cfg.confusion;
        let conf = confusion_cfg(&with_persons, c.weight, c.margin, c.gamma);
        let tcfg = TrainConfig {
            seed: derive_seed(cfg.seed, "train/confusion"),
            ..cfg.train_confusion.clone()
        };
        let init = if c.init_from_ms {
            ms_model.as_ref().map(|m| &m.0)
        } else {
            None
        };
        Some(stage(
            "train_confusion",
            train(&with_persons, &cfg.ms_loss, &conf, &tcfg, init),
        )?)
    } else {
        None
    };

    let need_exclusion = cfg.arms.iter().any(|a| a.uses_exclusion());
    let detections = if need_exclusion {
        let noise = DetectorNoiseModel {
            seed: derive_seed(cfg.seed, "detector"),
            ..cfg.detector.clone()
        };
        let raw = stage("detect", simulate_detections(&bench.test, &noise))?;
        Some(stage("nms", nms(&raw, NMS_IOU))?)
    } else {
        None
    };

    let mut match_report = None;
    let mut arms = Vec::new();
    for &arm in &cfg.arms {
        let params = if arm.uses_confusion_model() {
            &confusion_model
        } else {
            &ms_model
        };
        let params = &params.as_ref().expect("model trained for every selected arm").0;
        let index = if arm.uses_exclusion() {
            let dets = detections.as_deref().unwrap_or_default();
            let (index, report) = stage(
                "exclusion",
                apply_index_exclusion(&bench.test, dets, |f| embed(params, f)),
            )?;
            match_report.get_or_insert(report);
            index
        } else {
            stage("index", full_index(params, &bench.test))?
        };
        let mut reports = Vec::new();
        for p in &cfg.protocols {
            reports.push(stage(
                "evaluate",
                evaluate(&index, |f| embed(params, f), &bench.test, p),
            )?);
        }
        let pca = stage("pca", person_pca(params, &bench.test))?;
        arms.push(ArmResult {
            arm,
            index,
            reports,
            pca,
        });
    }

    let probes = if cfg.probes.enabled {
        let mut models: Vec<(&str, &EmbedderParams)> = Vec::new();
        if let Some((p, _)) = &ms_model {
            models.push(("ms", p));
        }
        if let Some((p, _)) = &confusion_model {
            models.push(("confusion", p));
        }
        let parts = [
            ProbePart::Full,
            ProbePart::Crop {
                top: cfg.probes.crop_top,
                bottom: cfg.probes.crop_bottom,
            },
            ProbePart::Bag,
            ProbePart::UpperClothing,
        ];
        Some(stage("probes", run_probe_suite(&models, &bench.test, &parts))?)
    } else {
        None
    };

    let permutation = match (&ms_model, cfg.permutation_shuffles) {
        (Some((params, _)), n) if n > 0 => {
            let index = stage("index", full_index(params, &bench.test))?;
            let table = stage(
                "permutation",
                rank_queries(&index, |f| embed(params, f), &bench.test, &EvalProtocol::person()),
            )?;
            let mut rng = substream(cfg.seed, "permutation");
            Some(permutation_test(&table, n, &mut rng))
        }
        _ => None,
    };

    let search = if cfg.search.n_trials > 0 {
        Some(stage(
            "search",
            run_search(cfg, &with_persons, &bench.validation, ms_model.as_ref().map(|m| &m.0)),
        )?)
    } else {
        None
    };

    Ok(ExperimentResults {
        config: cfg.clone(),
        benchmark: bench,
        ms_model,
        confusion_model,
        match_report,
        arms,
        probes,
        permutation,
        search,
    })
}

fn person_pca(params: &EmbedderParams, ds: &Dataset) -> Result<Vec<PcaPoint>> {
    let persons: Vec<_> = ds.records().iter().filter(|r| r.is_person()).collect();
    let mut rows = Vec::with_capacity(persons.len());
    for r in &persons {
        rows.push(embed(params, &r.features)?);
    }
    Ok(persons
        .iter()
        .zip(pca_2d(&rows))
        .map(|(r, [pc1, pc2])| PcaPoint {
            instance_id: r.instance_id,
            frame_id: r.frame_id,
            identity_label: r.identity_label.clone().unwrap_or_default(),
            pc1,
            pc2,
        })
        .collect())
}

/// mAP@R of the person and non-person protocols on `ds` with a plain index.
pub fn validation_scores(params: &EmbedderParams, ds: &Dataset) -> Result<(f64, f64)> {
    let index = full_index(params, ds)?;
    let p = evaluate(&index, |f| embed(params, f), ds, &EvalProtocol::person())?;
    let n = evaluate(&index, |f| embed(params, f), ds, &EvalProtocol::non_person())?;
    Ok((p.map_at_r, n.map_at_r))
}

/// Random search over confusion weight, margin, gamma and learning rate,
/// each trial a short confusion training scored on the validation split.
pub fn run_search(
    cfg: &ExperimentConfig,
    train_ds: &Dataset,
    validation: &Dataset,
    init: Option<&EmbedderParams>,
) -> Result<SearchOutcome> {
    let objective = |t: &TrialParams| {
        let conf = confusion_cfg(train_ds, t.weight, t.margin, t.gamma);
        let tcfg = TrainConfig {
            seed: derive_seed(cfg.seed, "train/confusion"),
            epochs: cfg.search.epochs,
            lr_embed: t.lr,
            lr_feature: t.lr,
            ..cfg.train_confusion.clone()
        };
        let (params, _) = train(train_ds, &cfg.ms_loss, &conf, &tcfg, init)?;
        validation_scores(&params, validation)
    };
    pareto_search(&cfg.search.space, cfg.search.n_trials, cfg.seed, objective)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize)]
struct ManifestFile {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    config_sha256: String,
    inputs: BTreeMap<String, String>,
    files: Vec<ManifestFile>,
}

struct OutDir {
    root: PathBuf,
    files: Vec<ManifestFile>,
}

impl OutDir {
    fn put(&mut self, name: &str, fill: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = BufWriter::new(fs::File::create(&path)?);
        f.write_all(&buf)?;
        f.flush()?;
        self.files.push(ManifestFile {
            path: name.to_string(),
            sha256: sha256_hex(&buf),
        });
        Ok(())
    }
}

fn dataset_digest(ds: &Dataset) -> Result<String> {
    let mut buf = Vec::new();
    write_dataset(ds, &mut buf)?;
    Ok(sha256_hex(&buf))
}

fn file_safe(s: &str) -> String {
    s.replace('+', "_")
}

/// Writes every artifact of `res` under `dir`, then `manifest.json` with
/// the digest of each file and of the inputs.
pub fn write_results(res: &ExperimentResults, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut out = OutDir {
        root: dir.to_path_buf(),
        files: Vec::new(),
    };
    fs::write(dir.join("config.toml"), res.config.to_toml()?)?;
    // the digest ignores where the run was written
    let cfg_text = ExperimentConfig {
        out_dir: PathBuf::new(),
        ..res.config.clone()
    }
    .to_toml()?;
    out.put("summary.csv", |b| res.write_summary_csv(b))?;
    out.put("summary_detail.csv", |b| {
        let mut w = csv::Writer::from_writer(b);
        for row in res.summary() {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    })?;
    for a in &res.arms {
        let arm = file_safe(a.arm.as_str());
        for r in &a.reports {
            out.put(&format!("per_query/{arm}_{}.csv", r.protocol), |b| {
                r.write_per_query_csv(b)
            })?;
            out.put(&format!("reports/{arm}_{}.json", r.protocol), |b| {
                r.write_summary_json(b)
            })?;
        }
        out.put(&format!("pca/{arm}.csv"), |b| {
            let mut w = csv::Writer::from_writer(b);
            for p in &a.pca {
                w.serialize(p)?;
            }
            w.flush()?;
            Ok(())
        })?;
        out.put(&format!("index/{arm}.jsonl"), |b| write_index(&a.index, b))?;
        out.put(&format!("index/{arm}_audit.csv"), |b| write_audit(&a.index, b))?;
    }
    if let Some(m) = &res.match_report {
        out.put("match_report.csv", |b| m.write_csv(b))?;
        out.put("match_rows.csv", |b| {
            let mut w = csv::Writer::from_writer(b);
            for r in &m.rows {
                w.serialize(r)?;
            }
            w.flush()?;
            Ok(())
        })?;
    }
    if let Some(p) = &res.probes {
        out.put("probe.csv", |b| p.write_csv(b))?;
    }
    if let Some(p) = &res.permutation {
        out.put("permutation.json", |b| {
            let v = serde_json::json!({
                "protocol": "person",
                "arm": "ms",
                "observed_map": p.observed,
                "baseline_mean": p.baseline_mean,
                "baseline_sd": p.baseline_sd,
                "p_value": p.p_value,
                "n_shuffles": p.n_shuffles,
            });
            serde_json::to_writer_pretty(b, &v)?;
            Ok(())
        })?;
    }
    if let Some(s) = &res.search {
        out.put("pareto.csv", |b| s.write_csv(b))?;
    }
    let mut inputs = BTreeMap::new();
    inputs.insert("dataset/train".to_string(), dataset_digest(&res.benchmark.train)?);
    inputs.insert(
        "dataset/validation".to_string(),
        dataset_digest(&res.benchmark.validation)?,
    );
    inputs.insert("dataset/test".to_string(), dataset_digest(&res.benchmark.test)?);
    for (name, model) in [("ms", &res.ms_model), ("confusion", &res.confusion_model)] {
        if let Some((params, log)) = model {
            out.put(&format!("models/{name}.json"), |b| write_params(params, b))?;
            out.put(&format!("models/{name}_train_log.csv"), |b| write_train_log(log, b))?;
        }
    }
    for f in &out.files {
        if f.path.starts_with("models/") && f.path.ends_with(".json") {
            inputs.insert(f.path.trim_end_matches(".json").to_string(), f.sha256.clone());
        }
    }
    let manifest = Manifest {
        config_sha256: sha256_hex(cfg_text.as_bytes()),
        inputs,
        files: std::mem::take(&mut out.files),
    };
    let mut buf = serde_json::to_vec_pretty(&manifest)?;
    buf.push(b'\n');
    fs::write(dir.join("manifest.json"), buf)?;
    Ok(())
}

/// Runs the experiment and writes its outputs to `cfg.out_dir`. On failure
/// an `INCOMPLETE` marker naming the failed stage is left in the directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    let dir = cfg.out_dir.clone();
    let result = run_arms(cfg).and_then(|res| write_results(&res, &dir).map(|_| res));
    let marker = dir.join("INCOMPLETE");
    match &result {
        Ok(_) => {
            if marker.exists() {
                fs::remove_file(&marker)?;
            }
        }
        Err(e) => {
            fs::create_dir_all(&dir)?;
            fs::write(&marker, format!("{e}\n"))?;
        }
    }
    result
}
