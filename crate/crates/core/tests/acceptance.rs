//! One PASS/FAIL line per acceptance criterion.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use narreval_core::assumptions::perplexity;
use narreval_core::explanation::{
    truncate, FeatureMeta, GroundTruth, ShapRow, ShapTable, Sign, TruncatedTable, TruthEntry,
};
use narreval_core::extraction::{validate, ExtractionRecord, FeatureExtraction};
use narreval_core::faithfulness::{agreement, ValueTolerance};
use narreval_core::gateway::{Gateway, TokenLogprob, TokenLogprobTrace};
use narreval_core::manipulation::{invert_and_flip, random_shap_permutation};
use narreval_core::pipeline::Condition;
use narreval_core::prompt::PromptStyle;
use narreval_core::report::{self, Format};
use narreval_core::runner::{aggregate, run, ExperimentConfig, HUMAN_LABEL};
use narreval_core::similarity::cosine_distance;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// Σδ / (n − #φ) over the entries whose feature is known, written as a plain loop.
fn brute_force(entries: &[FeatureExtraction], feature_set: &[String], gt: &GroundTruth) -> [Option<f64>; 3] {
    let mut out = [None; 3];
    for (q, slot) in out.iter_mut().enumerate() {
        let mut n = 0usize;
        let mut phi = 0usize;
        let mut hits = 0usize;
        for e in entries {
            if !feature_set.contains(&e.feature_name) {
                continue;
            }
            n += 1;
            let truth = gt.entries.iter().find(|t| t.feature == e.feature_name);
            let delta = match q {
                0 => e.rank.map(|r| truth.is_some_and(|t| t.rank as i64 == r)),
                1 => e.sign.map(|s| truth.is_some_and(|t| t.sign == s)),
                _ => e.value.map(|v| truth.is_some_and(|t| t.value == v)),
            };
            match delta {
                None => phi += 1,
                Some(true) => hits += 1,
                Some(false) => {}
            }
        }
        if n > phi {
            *slot = Some(hits as f64 / (n - phi) as f64);
        }
    }
    out
}

fn eq1_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let exact = ValueTolerance {
        absolute: 0.0,
        relative: 0.0,
        display_rounding: false,
    };
    for trial in 0..1000 {
        let n = rng.gen_range(1..=6);
        let mut ranks: Vec<usize> = (0..n).collect();
        ranks.shuffle(&mut rng);
        let gt = GroundTruth {
            entries: (0..n)
                .map(|i| TruthEntry {
                    feature: format!("f{i}"),
                    rank: ranks[i],
                    sign: if rng.gen_bool(0.5) {
                        Sign::Positive
                    } else {
                        Sign::Negative
                    },
                    value: f64::from(rng.gen_range(-50..50)) / 4.0,
                    average_value: 0.0,
                })
                .collect(),
        };
        // known but outside the truncation
        let mut feature_set: Vec<String> = gt.entries.iter().map(|t| t.feature.clone()).collect();
        feature_set.extend(["extra0".to_string(), "extra1".to_string()]);

        let mut names: Vec<String> = feature_set.clone();
        names.extend((0..rng.gen_range(0..3)).map(|i| format!("unknown{i}")));
        names.shuffle(&mut rng);
        names.truncate(rng.gen_range(0..=names.len()));
        let entries: Vec<FeatureExtraction> = names
            .into_iter()
            .map(|name| {
                let truth = gt.entries.iter().find(|t| t.feature == name);
                let phi = |rng: &mut ChaCha8Rng| rng.gen_bool(0.25);
                let rank = (!phi(&mut rng)).then(|| match (truth, rng.gen_bool(0.6)) {
                    (Some(t), true) => t.rank as i64,
                    _ => rng.gen_range(-1..7),
                });
                let sign = (!phi(&mut rng)).then(|| match (truth, rng.gen_bool(0.6)) {
                    (Some(t), true) => t.sign,
                    _ => {
                        if rng.gen_bool(0.5) {
                            Sign::Positive
                        } else {
                            Sign::Negative
                        }
                    }
                });
                let value = (!phi(&mut rng)).then(|| match (truth, rng.gen_bool(0.6)) {
                    (Some(t), true) => t.value,
                    _ => f64::from(rng.gen_range(-50..50)) / 4.0,
                });
                FeatureExtraction {
                    feature_name: name,
                    rank,
                    sign,
                    value,
                    assumption: None,
                }
            })
            .collect();
        let mut record = ExtractionRecord {
            entries,
            ..Default::default()
        };
        record.anomalies = validate(&record, &feature_set, n);

        let got = agreement(&record, &gt, &exact);
        let want = brute_force(&record.entries, &feature_set, &gt);
        ensure([got.ra, got.sa, got.va] == want, || {
            format!(
                "trial {trial}: agreement {:?} vs loop {want:?}",
                [got.ra, got.sa, got.va]
            )
        })?;
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!("1000 pairs identical, {elapsed:?}"))
}

fn trace(logprobs: &[f64]) -> TokenLogprobTrace {
    TokenLogprobTrace {
        tokens: logprobs
            .iter()
            .map(|&logprob| TokenLogprob {
                token: "t".into(),
                logprob,
            })
            .collect(),
        excluded: 0,
    }
}

fn perplexity_identities() -> Outcome {
    for m in [2.0f64, 10.0, 100.0] {
        for k in [1usize, 7, 50] {
            let ppl = perplexity(&trace(&vec![(1.0 / m).ln(); k])).map_err(|e| e.to_string())?;
            ensure((ppl - m).abs() <= 1e-9, || format!("m={m} k={k}: {ppl}"))?;
        }
    }
    let certain = perplexity(&trace(&[0.0; 9])).map_err(|e| e.to_string())?;
    ensure(certain == 1.0, || format!("certainty trace gives {certain}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..100 {
        let probs: Vec<f64> = (0..rng.gen_range(1..40)).map(|_| rng.gen_range(0.05..1.0)).collect();
        let product: f64 = probs.iter().product();
        let product_form = product.powf(-1.0 / probs.len() as f64);
        let logs: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let ppl = perplexity(&trace(&logs)).map_err(|e| e.to_string())?;
        ensure((ppl - product_form).abs() <= 1e-9, || {
            format!("trace {i}: {ppl} vs {product_form}")
        })?;
    }
    Ok("uniform, certainty and 100 random traces within 1e-9".into())
}

fn random_table(rng: &mut ChaCha8Rng, trial: usize) -> TruncatedTable {
    let total = rng.gen_range(2..=10);
    let mut magnitudes: Vec<u32> = (1..=200).collect();
    magnitudes.shuffle(rng);
    let rows = (0..total)
        .map(|i| ShapRow {
            feature: FeatureMeta {
                name: format!("feature {i}"),
                description: format!("description {i}"),
                average_value: f64::from(rng.gen_range(0..100)),
            },
            shap_value: f64::from(magnitudes[i]) / 1000.0 * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
            feature_value: f64::from(rng.gen_range(0..100)),
        })
        .collect();
    let table = ShapTable {
        dataset_id: "synthetic".into(),
        instance_id: trial.to_string(),
        true_label: 0,
        class1_score: 0.5,
        base_score: 0.5,
        rows,
    };
    let n = rng.gen_range(2..=total);
    truncate(&table, n).expect("valid truncation")
}

fn metadata(t: &TruncatedTable) -> BTreeMap<String, (String, u64, u64)> {
    t.rows
        .iter()
        .map(|r| {
            (
                r.name().to_string(),
                (
                    r.feature.description.clone(),
                    r.feature.average_value.to_bits(),
                    r.feature_value.to_bits(),
                ),
            )
        })
        .collect()
}

fn magnitudes(t: &TruncatedTable) -> Vec<u64> {
    let mut v: Vec<u64> = t.rows.iter().map(|r| r.shap_value.abs().to_bits()).collect();
    v.sort_unstable();
    v
}

fn manipulation_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..1000 {
        let t = random_table(&mut rng, trial);
        let once = invert_and_flip(&t).map_err(|e| e.to_string())?.table;
        let twice = invert_and_flip(&once).map_err(|e| e.to_string())?.table;
        ensure(twice == t, || {
            format!("trial {trial}: invert_and_flip is not an involution")
        })?;
        let permuted = random_shap_permutation(&t, rng.gen()).map_err(|e| e.to_string())?.table;
        for (what, m) in [("invert_and_flip", &once), ("permutation", &permuted)] {
            ensure(magnitudes(m) == magnitudes(&t), || {
                format!("trial {trial}: {what} changed |SHAP| multiset")
            })?;
            ensure(metadata(m) == metadata(&t), || {
                format!("trial {trial}: {what} changed feature metadata")
            })?;
        }
        let before: Vec<u64> = t.rows.iter().map(|r| r.shap_value.to_bits()).collect();
        let after: Vec<u64> = permuted.rows.iter().map(|r| r.shap_value.to_bits()).collect();
        ensure(before != after, || {
            format!("trial {trial}: permutation is the identity")
        })?;
        let names = |x: &TruncatedTable| x.rows.iter().map(|r| r.name().to_string()).collect::<Vec<_>>();
        ensure(names(&permuted) == names(&t), || {
            format!("trial {trial}: permutation moved rows")
        })?;
    }
    Ok("1000 seeded trials, zero violations".into())
}

fn cosine_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = |a: &[f64], b: &[f64]| {
        cosine_distance("a", a, "b", b)
            .map(|r| r.distance)
            .map_err(|e| e.to_string())
    };
    for i in 0..1000 {
        let dim = rng.gen_range(2..64);
        let a: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        let k = rng.gen_range(0.01..100.0);
        let scaled: Vec<f64> = a.iter().map(|x| x * k).collect();
        // b minus its projection on a
        let proj = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / a.iter().map(|x| x * x).sum::<f64>();
        let orth: Vec<f64> = b.iter().zip(&a).map(|(y, x)| y - proj * x).collect();
        let checks = [
            ("d(a,a)", d(&a, &a)?, 0.0),
            ("d(a,-a)", d(&a, &neg)?, 2.0),
            ("d(a,orth)", d(&a, &orth)?, 1.0),
            ("d(ka,b)-d(a,b)", d(&scaled, &b)? - d(&a, &b)?, 0.0),
        ];
        for (what, got, want) in checks {
            ensure((got - want).abs() <= 1e-12, || {
                format!("vector pair {i}: {what} = {got}")
            })?;
        }
    }
    Ok("1000 random vector pairs within 1e-12".into())
}

fn report_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).expect("report dir") {
        let p = entry.unwrap().path();
        out.insert(
            p.file_name().unwrap().to_string_lossy().into_owned(),
            std::fs::read(&p).unwrap(),
        );
    }
    out
}

fn mock_end_to_end() -> Outcome {
    let cfg = ExperimentConfig::load(&fixtures().join("mock.toml")).map_err(|e| e.to_string())?;
    let mut reports = Vec::new();
    let mut slowest = Duration::ZERO;
    for _ in 0..2 {
        let started = Instant::now();
        let gateway = Gateway::from_config(&cfg.providers, None).map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (store, summary) = run(&cfg, &gateway, dir.path()).map_err(|e| e.to_string())?;
        ensure(
            summary.cells == 4 * (2 * 3 * 3 * 20 + 3 * 20) && summary.failed == 0,
            || format!("unexpected run summary {summary:?}"),
        )?;
        let agg = aggregate(&store, None).map_err(|e| e.to_string())?;
        let out = dir.path().join("reports");
        report::emit(&agg, &cfg, &out, &Format::ALL).map_err(|e| e.to_string())?;
        slowest = slowest.max(started.elapsed());

        for r in agg.rows.iter().filter(|r| r.model != HUMAN_LABEL) {
            let exact =
                |mm: Option<narreval_core::runner::MinMax>, v: f64| mm.is_some_and(|m| m.min == v && m.max == v);
            let label = format!("{}/{}/{:?}/{}", r.slice, r.model, r.style, r.condition);
            match r.condition {
                Condition::Standard => ensure(exact(r.ra, 1.0) && exact(r.sa, 1.0) && exact(r.va, 1.0), || {
                    format!("{label}: RA {:?} SA {:?} VA {:?}", r.ra, r.sa, r.va)
                })?,
                Condition::Manipulated => ensure(exact(r.ra, 0.0) && exact(r.sa, 0.0), || {
                    format!("{label}: RA {:?} SA {:?}", r.ra, r.sa)
                })?,
                Condition::Permuted => {}
            }
        }
        ensure(agg.confusion.len() == 2 * 4, || {
            format!("{} confusion rows", agg.confusion.len())
        })?;
        for c in &agg.confusion {
            let [tn, fp, ..] = c.confusion.cells();
            ensure(tn == "60/60" && fp == "0/60", || {
                format!("{}/{}/r{}: TN {tn}, FP {fp}", c.model, c.style, c.repeat)
            })?;
        }
        ensure(agg.confusion.iter().any(|c| c.style == PromptStyle::Long), || {
            "no long-prompt pool".into()
        })?;
        reports.push(report_bytes(&out));
    }
    ensure(reports[0] == reports[1], || "reports differ between runs".into())?;
    ensure(slowest < Duration::from_secs(60), || format!("a run took {slowest:?}"))?;
    Ok(format!(
        "standard 1/1/1, manipulated RA=SA=0, TN 60/60 in 8 pools, {} identical report files, slowest run {slowest:?}",
        reports[0].len()
    ))
}

fn extraction_robustness() -> Outcome {
    let cases = common::golden::cases();
    ensure(cases.len() >= 30, || format!("only {} golden cases", cases.len()))?;
    let mut failures = Vec::new();
    for case in &cases {
        for p in common::golden::check(case) {
            failures.push(format!("{}: {p}", case.file_stem().unwrap().to_string_lossy()));
        }
    }
    ensure(failures.is_empty(), || failures.join("; "))?;
    Ok(format!("{} golden replies match", cases.len()))
}

// Needs NARREVAL_LIVE_CONFIG pointing at a config with real providers.
fn live_directional() -> Option<Outcome> {
    let path = std::env::var_os("NARREVAL_LIVE_CONFIG")?;
    Some((|| {
        let mut cfg = ExperimentConfig::load(Path::new(&path)).map_err(|e| e.to_string())?;
        cfg.styles = vec![PromptStyle::Long, PromptStyle::Short];
        cfg.conditions = vec![Condition::Standard, Condition::Manipulated];
        cfg.repeats = 1;
        cfg.allow_partial = true;
        let gateway = Gateway::from_config(&cfg.providers, None).map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (store, _) = run(&cfg, &gateway, dir.path()).map_err(|e| e.to_string())?;
        let agg = aggregate(&store, Some(true)).map_err(|e| e.to_string())?;
        let ra = |model: &str, style, cond| {
            agg.rows
                .iter()
                .find(|r| r.slice == "all" && r.model == model && r.style == Some(style) && r.condition == cond)
                .and_then(|r| r.ra)
                .map(|m| m.max)
        };
        for m in &cfg.models {
            let long = ra(&m.label, PromptStyle::Long, Condition::Standard);
            let short = ra(&m.label, PromptStyle::Short, Condition::Standard);
            ensure(long >= short, || {
                format!("{}: long RA {long:?} < short RA {short:?}", m.label)
            })?;
            let manipulated = ra(&m.label, PromptStyle::Long, Condition::Manipulated);
            ensure(manipulated.is_some_and(|v| v < 0.2), || {
                format!("{}: manipulated RA {manipulated:?}", m.label)
            })?;
        }
        Ok(format!("{} model(s) checked", cfg.models.len()))
    })())
}

fn main() {
    let criteria: [Criterion; 6] = [
        ("agreement equals brute-force loop", eq1_oracle),
        ("perplexity identities", perplexity_identities),
        ("manipulation properties", manipulation_properties),
        ("cosine properties", cosine_properties),
        ("closed-loop mock end-to-end", mock_end_to_end),
        ("extraction robustness", extraction_robustness),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                println!("FAIL {name}: {why}");
                failed.push(name);
            }
        }
    }
    match live_directional() {
        None => println!("SKIP live directional check: NARREVAL_LIVE_CONFIG not set"),
        Some(Ok(detail)) => println!("PASS live directional check: {detail}"),
        Some(Err(why)) => println!("FAIL live directional check (informational): {why}"),
    }
    if !failed.is_empty() {
        eprintln!("failed: {failed:?}");
        std::process::exit(1);
    }
}
