mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use common::*;
use exclusion_search::dataset::{BBox, Region, PERSON};
use exclusion_search::exclusion::{
    apply_index_exclusion, hungarian_match, nms, simulate_detections, CaseTag, DetectionRecord, DetectorNoiseModel,
    NMS_IOU,
};
use exclusion_search::harness::{
    generate_benchmark, pareto_front_exhaustive, pareto_search, run_arms, run_experiment, run_search, training_sets,
    Arm, ExperimentConfig, SearchSpace,
};
use exclusion_search::index::{build_index, ExclusionReason, IndexEntry};
use exclusion_search::losses::*;
use exclusion_search::metrics::{average_precision, map_at_r};
use exclusion_search::probes::ProbePart;
use rand::Rng;
use statrs::distribution::{Binomial, DiscreteCDF};

/// Writes straight to the stderr handle so the line survives output capture.
fn verdict(n: u32, ok: bool, elapsed: Duration, detail: &str) {
    let tag = if ok { "PASS" } else { "FAIL" };
    let line = format!(
        "acceptance criterion {n}: {tag} ({:.2}s) {detail}\n",
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

/// Runs `body`, which returns failures as strings, and applies the time budget.
fn criterion(n: u32, budget: Option<Duration>, body: impl FnOnce() -> Result<String, String>) {
    let start = Instant::now();
    let outcome = body();
    let elapsed = start.elapsed();
    let outcome = match (outcome, budget) {
        (Ok(_), Some(b)) if elapsed > b => Err(format!("over time budget of {}s", b.as_secs())),
        (o, _) => o,
    };
    match outcome {
        Ok(detail) => verdict(n, true, elapsed, &detail),
        Err(why) => {
            verdict(n, false, elapsed, &why);
            panic!("criterion {n}: {why}");
        }
    }
}

fn check(ok: bool, why: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(why())
    }
}

fn random_batch(r: &mut rand_chacha::ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<u64>, Vec<Option<String>>) {
    let m = r.random_range(2..=16);
    let d = r.random_range(2..=16);
    let n_labels = r.random_range(1..=5u64);
    let emb: Vec<Vec<f64>> = (0..m).map(|_| unit_vec(r, d)).collect();
    let labels: Vec<u64> = (0..m).map(|_| r.random_range(0..n_labels)).collect();
    let tags = (0..m)
        .map(|_| match r.random_range(0..5) {
            0 => None,
            k => Some(format!("id{k}")),
        })
        .collect();
    (emb, labels, tags)
}

#[test]
fn criterion_1_losses_match_oracles() {
    criterion(1, Some(Duration::from_secs(10)), || {
        let mut r = rng(1001);
        let mut worst_value: f64 = 0.0;
        let mut worst_grad: f64 = 0.0;
        for b in 0..200 {
            let (emb, labels, tags) = random_batch(&mut r);
            let ms_cfg = MsLossConfig {
                alpha: r.random_range(0.5..4.0),
                beta: r.random_range(5.0..60.0),
                base: r.random_range(0.0..0.8),
                mining_margin: 0.1,
            };
            let conf_cfg = ConfusionConfig {
                gamma: r.random_range(1.0..20.0),
                margin: r.random_range(-0.5..0.5),
                weight: r.random_range(0.1..3.0),
                forbidden_set: ["id1", "id2", "id3"].iter().map(|s| s.to_string()).collect(),
            };
            let batch = Batch::new(emb.clone(), labels.clone(), tags.clone()).map_err(|e| e.to_string())?;
            let ms = ms_loss(&batch, &ms_cfg).map_err(|e| e.to_string())?;
            let cf = confusion_loss(&batch, &conf_cfg).map_err(|e| e.to_string())?;
            let total = total_loss(&batch, &ms_cfg, &conf_cfg).map_err(|e| e.to_string())?;

            let (pos, neg) = naive_mine(&emb, &labels, ms_cfg.mining_margin);
            let pairs = naive_forbidden_pairs(&emb, &tags, &conf_cfg);
            let ms_oracle = |e: &[Vec<f64>]| naive_ms_value(e, &pos, &neg, &ms_cfg);
            let cf_oracle = |e: &[Vec<f64>]| naive_conf_value(e, &pairs, &conf_cfg);
            let total_oracle = |e: &[Vec<f64>]| ms_oracle(e) + conf_cfg.weight * cf_oracle(e);

            for (got, want) in [
                (ms.loss, ms_oracle(&emb)),
                (cf.loss, cf_oracle(&emb)),
                (total.total, total_oracle(&emb)),
            ] {
                let diff = (got - want).abs();
                worst_value = worst_value.max(diff);
                check(diff <= 1e-10, || format!("batch {b}: value {got} vs oracle {want}"))?;
            }
            for (grad, fd) in [
                (&ms.grad, fd_grad(&emb, 1e-6, ms_oracle)),
                (&cf.grad, fd_grad(&emb, 1e-6, cf_oracle)),
                (&total.grad, fd_grad(&emb, 1e-6, total_oracle)),
            ] {
                let e = rel_err(grad, &fd);
                worst_grad = worst_grad.max(e);
                check(e <= 1e-4, || format!("batch {b}: gradient relative error {e}"))?;
            }
        }
        Ok(format!(
            "200 batches, max value error {worst_value:.1e}, max gradient error {worst_grad:.1e}"
        ))
    });
}

fn random_box<R: Rng>(r: &mut R) -> [f64; 4] {
    let x = r.random_range(0.0..20.0);
    let y = r.random_range(0.0..20.0);
    [x, y, x + r.random_range(1.0..10.0), y + r.random_range(1.0..10.0)]
}

#[test]
fn criterion_2_matching_matches_oracles() {
    criterion(2, Some(Duration::from_secs(5)), || {
        let mut r = rng(2002);
        for case in 0..100 {
            let n = r.random_range(1..=6);
            let m = r.random_range(1..=6);
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| r.random_range(0.0..1.0)).collect())
                .collect();
            let got = hungarian_match(&cost).total_cost;
            let want = brute_force_assignment(&cost);
            check((got - want).abs() <= 1e-12, || {
                format!("matrix {case}: {got} vs brute force {want}")
            })?;
        }
        for case in 0..100 {
            let n = r.random_range(0..24);
            let raw: Vec<(u64, [f64; 4], f64)> = (0..n)
                .map(|_| {
                    (
                        r.random_range(0..3),
                        random_box(&mut r),
                        r.random_range(0..6) as f64 / 5.0,
                    )
                })
                .collect();
            let dets: Vec<DetectionRecord> = raw
                .iter()
                .map(|&(frame_id, b, confidence)| DetectionRecord {
                    frame_id,
                    region: Region::BBox(BBox::new(b[0], b[1], b[2], b[3])),
                    class_label: PERSON.into(),
                    confidence,
                    source: None,
                })
                .collect();
            let got = nms(&dets, NMS_IOU).map_err(|e| e.to_string())?;
            let want: Vec<DetectionRecord> = naive_nms(&raw, NMS_IOU).into_iter().map(|i| dets[i].clone()).collect();
            check(got == want, || {
                format!("detection set {case}: nms differs from reference")
            })?;
        }
        Ok("100 assignment matrices, 100 detection sets".into())
    });
}

#[test]
fn criterion_3_index_and_metrics_match_oracles() {
    criterion(3, Some(Duration::from_secs(10)), || {
        let mut r = rng(3003);
        for round in 0..3 {
            let raw: Vec<(u64, u64, Vec<f64>, bool)> = (0..1000u64)
                .map(|i| (i / 4, i % 4, unit_vec(&mut r, 8), r.random_bool(0.25)))
                .collect();
            let entries = raw
                .iter()
                .map(|(id, f, v, _)| IndexEntry::new(*id, *f, "x", None, v.clone()))
                .collect();
            let mut index = build_index(entries).map_err(|e| e.to_string())?;
            for (id, f, _, ex) in &raw {
                if *ex {
                    index
                        .exclude((*id, *f), ExclusionReason::Manual)
                        .map_err(|e| e.to_string())?;
                }
            }
            let q = unit_vec(&mut r, 8);
            let full = naive_top_k(&raw, &q, raw.len());
            for k in 1..=raw.len() + 1 {
                let got: Vec<(u64, u64)> = index
                    .query(&q, k)
                    .hits
                    .iter()
                    .map(|h| (h.instance_id, h.frame_id))
                    .collect();
                check(got == full[..k.min(full.len())], || {
                    format!("index {round}, k = {k}: differs from linear scan")
                })?;
            }
        }
        for case in 0..500 {
            let len = r.random_range(1..50);
            let flags: Vec<bool> = (0..len).map(|_| r.random_bool(0.3)).collect();
            let n_rel = flags.iter().filter(|&&f| f).count() + r.random_range(0..3);
            if n_rel == 0 {
                check(average_precision(&flags, 0).is_none(), || {
                    format!("ranking {case}: AP defined without relevants")
                })?;
                continue;
            }
            let ap = average_precision(&flags, n_rel).unwrap_or(f64::NAN);
            let mr = map_at_r(&flags, n_rel).unwrap_or(f64::NAN);
            check((ap - naive_ap(&flags, n_rel)).abs() <= 1e-12, || {
                format!("ranking {case}: AP {ap}")
            })?;
            check((mr - naive_map_at_r(&flags, n_rel)).abs() <= 1e-12, || {
                format!("ranking {case}: mAP@R {mr}")
            })?;
        }
        Ok("3 indices of 1000 entries for every k, 500 rankings".into())
    });
}

fn default_cfg(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed,
        ..Default::default()
    };
    cfg.search.n_trials = 0;
    cfg
}

#[test]
fn criterion_4_overlearning_beats_shuffled_baseline() {
    criterion(4, Some(Duration::from_secs(120)), || {
        let mut cfg = default_cfg(0);
        cfg.arms = vec![Arm::Ms];
        cfg.probes.enabled = false;
        cfg.permutation_shuffles = 1000;
        let res = run_arms(&cfg).map_err(|e| e.to_string())?;
        let p = res.permutation.ok_or("no permutation result")?;
        let detail = format!(
            "person mAP {:.4}, shuffled baseline {:.4} (ratio {:.1}), p = {:.4}",
            p.observed,
            p.baseline_mean,
            p.observed / p.baseline_mean,
            p.p_value
        );
        check(p.observed >= 5.0 * p.baseline_mean, || detail.clone())?;
        check(p.p_value < 0.01, || detail.clone())?;
        Ok(detail)
    });
}

#[test]
fn criterion_5_arm_ordering_holds_on_every_seed() {
    criterion(5, Some(Duration::from_secs(300)), || {
        let mut lines = Vec::new();
        for seed in 0..5 {
            let mut cfg = default_cfg(seed);
            cfg.probes.enabled = false;
            cfg.permutation_shuffles = 0;
            let res = run_arms(&cfg).map_err(|e| e.to_string())?;
            let p = |a| res.person_map(a).unwrap_or(f64::NAN);
            let (ms, idx, conf, both) = (p(Arm::Ms), p(Arm::Index), p(Arm::Confusion), p(Arm::IndexConfusion));
            let drop = res.non_person_map(Arm::Ms).unwrap_or(f64::NAN)
                - res.non_person_map(Arm::Confusion).unwrap_or(f64::NAN);
            let line = format!(
                "seed {seed}: ms {ms:.3} conf {conf:.3} index {idx:.3} both {both:.3}, non-person drop {drop:.3}"
            );
            check(ms > conf && conf > both, || line.clone())?;
            check(ms > idx && idx > both, || line.clone())?;
            check(drop < 0.20, || line.clone())?;
            lines.push(line);

            cfg.detector = DetectorNoiseModel::default();
            cfg.arms = vec![Arm::Index];
            let clean = run_arms(&cfg).map_err(|e| e.to_string())?;
            let z = clean.person_map(Arm::Index).unwrap_or(f64::NAN);
            check(z == 0.0, || format!("seed {seed}: zero-noise index person mAP {z}"))?;
        }
        Ok(lines.join("; "))
    });
}

#[test]
fn criterion_6_part_probes_sit_between_arms() {
    criterion(6, Some(Duration::from_secs(120)), || {
        let mut worst = f64::INFINITY;
        for seed in 0..5 {
            let mut cfg = default_cfg(seed);
            cfg.arms = vec![Arm::Ms, Arm::Confusion];
            cfg.permutation_shuffles = 0;
            let res = run_arms(&cfg).map_err(|e| e.to_string())?;
            let probes = res.probes.as_ref().ok_or("probes missing")?;
            let full_conf = res.person_map(Arm::Confusion).ok_or("confusion arm missing")?;
            for part in ProbePart::suite() {
                let name = part.name();
                if name == ProbePart::Full.name() {
                    continue;
                }
                let conf = probes.get(name, "confusion").ok_or("probe row missing")?.person_map;
                let ms = probes.get(name, "ms").ok_or("probe row missing")?.person_map;
                check(conf > full_conf && conf < ms, || {
                    format!("seed {seed} {name}: full {full_conf:.3}, part confusion {conf:.3}, part ms {ms:.3}")
                })?;
                worst = worst.min((conf - full_conf).min(ms - conf));
            }
        }
        Ok(format!("5 seeds, smallest gap {worst:.3}"))
    });
}

#[test]
fn criterion_7_case_accounting() {
    criterion(7, Some(Duration::from_secs(60)), || {
        let mut total_persons = 0u64;
        let mut total_case3 = 0u64;
        for seed in 0..20u64 {
            let cfg = default_cfg(seed);
            let ds = generate_benchmark(&cfg).map_err(|e| e.to_string())?.test;
            let noise = DetectorNoiseModel {
                misclass_rate: 0.3,
                seed,
                ..Default::default()
            };
            let dets = nms(&simulate_detections(&ds, &noise).map_err(|e| e.to_string())?, NMS_IOU)
                .map_err(|e| e.to_string())?;
            let (index, report) = apply_index_exclusion(&ds, &dets, unit).map_err(|e| e.to_string())?;
            let mut seen: BTreeMap<(u64, u64), usize> = BTreeMap::new();
            for row in &report.rows {
                if let Some(id) = row.instance_id {
                    *seen.entry((id, row.frame_id)).or_default() += 1;
                    let entry = index.get((id, row.frame_id)).ok_or("row without index entry")?;
                    check(entry.exclusion == row.case.exclusion(), || {
                        format!("seed {seed}: tag disagrees with index")
                    })?;
                }
            }
            check(seen.len() == ds.len() && seen.values().all(|&c| c == 1), || {
                format!("seed {seed}: case tags do not partition the instances")
            })?;
            let tagged: usize = report.counts().values().sum();
            check(tagged == ds.len() + report.injected_false_positives(), || {
                format!("seed {seed}: stray rows")
            })?;
            total_persons += ds.n_persons() as u64;
            total_case3 += report.count(CaseTag::MisclassifiedPersonIncluded) as u64;
        }
        let bin = Binomial::new(0.3, total_persons).map_err(|e| e.to_string())?;
        let (lo, hi) = (bin.inverse_cdf(0.005), bin.inverse_cdf(0.995));
        let detail = format!(
            "case 3 total {total_case3} over {total_persons} persons, 99% interval [{lo}, {hi}] around {:.1}",
            0.3 * total_persons as f64
        );
        check((lo..=hi).contains(&total_case3), || detail.clone())?;
        Ok(detail)
    });
}

fn unit(f: &[f64]) -> exclusion_search::Result<Vec<f64>> {
    let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(f.iter().map(|x| x / n).collect())
}

#[test]
fn criterion_8_experiment_is_deterministic() {
    criterion(8, None, || {
        let dirs = [
            tempfile::tempdir().map_err(|e| e.to_string())?,
            tempfile::tempdir().map_err(|e| e.to_string())?,
        ];
        let mut bytes = Vec::new();
        for d in &dirs {
            let cfg = ExperimentConfig {
                out_dir: d.path().to_path_buf(),
                ..default_cfg(0)
            };
            run_experiment(&cfg).map_err(|e| e.to_string())?;
            bytes.push(std::fs::read(d.path().join("summary.csv")).map_err(|e| e.to_string())?);
        }
        check(bytes[0] == bytes[1], || "summary.csv differs between runs".into())?;
        Ok(format!("summary.csv identical ({} bytes)", bytes[0].len()))
    });
}

#[test]
fn criterion_9_pareto_front_equals_dominance_filter() {
    criterion(9, Some(Duration::from_secs(120)), || {
        let mut cfg = default_cfg(0);
        cfg.search.n_trials = 24;
        cfg.search.epochs = 2;
        let bench = generate_benchmark(&cfg).map_err(|e| e.to_string())?;
        let (_, with) = training_sets(&bench.train, cfg.seed).map_err(|e| e.to_string())?;
        let out = run_search(&cfg, &with, &bench.validation, None).map_err(|e| e.to_string())?;
        check(out.front == pareto_front_exhaustive(&out.trials), || {
            "trained search front differs".into()
        })?;

        // Coarse synthetic objectives force ties and duplicates.
        let space = SearchSpace::default();
        for seed in 0..200 {
            let mut r = rng(9000 + seed);
            let o = pareto_search(&space, 40, seed, |_| {
                Ok((r.random_range(0..6) as f64 / 5.0, r.random_range(0..6) as f64 / 5.0))
            })
            .map_err(|e| e.to_string())?;
            check(o.front == pareto_front_exhaustive(&o.trials), || {
                format!("synthetic run {seed}: front differs")
            })?;
        }
        Ok(format!(
            "{} trained trials ({} on front), 200 synthetic runs",
            out.trials.len(),
            out.front.len()
        ))
    });
}
