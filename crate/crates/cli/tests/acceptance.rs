//! End-to-end acceptance checks on the mock backend. Prints one PASS/FAIL
//! line per criterion and exits non-zero if any fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use delphi_cli::{effective_config, ConfigArgs};
use delphi_core::backend::mock::MockBackend;
use delphi_core::backend::{run_batch, ChatRequest, RequestTag};
use delphi_core::dedup::{filter_threshold, prune_to_count};
use delphi_core::model::{CategoricalDistribution, PersonaAttribute, QuestionId, StudyConfig};
use delphi_core::orchestrator::{
    backend_for, run_study, Orchestrator, OrchestratorError, Phase, StudyState,
};
use delphi_core::persistence::{self, PROMPT_LOG_FILE, TRANSCRIPT_FILE};
use delphi_core::persona::{default_catalog, sample_panel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::{Regex, RegexBuilder};
use serde_json::Value;
use support::{brute_prune, brute_threshold, dedup_instance, ref_mean_std};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {{
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)+));
        }
    }};
}

const GRID: [(usize, usize); 4] = [(5, 5), (5, 15), (15, 5), (15, 15)];

fn delphi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_delphi"))
        .args(args)
        .output()
        .expect("spawn delphi")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn grid_file(root: &Path, a: usize, q: usize) -> PathBuf {
    root.join(format!("a{a:02}_q{q:02}.json"))
}

fn out_dir(root: &Path, a: usize, q: usize) -> PathBuf {
    root.join(format!("out_a{a:02}_q{q:02}"))
}

/// All 12 run directories of the grid, cell-major.
fn grid_run_dirs(root: &Path) -> Vec<PathBuf> {
    GRID.iter()
        .flat_map(|&(a, q)| (0..3).map(move |k| out_dir(root, a, q).join(format!("run_{k}"))))
        .collect()
}

fn grid_reproduction(root: &Path) -> Check {
    let start = Instant::now();
    let o = delphi(&["init", s(root), "--grid"]);
    ensure!(o.status.success(), "init failed: {}", String::from_utf8_lossy(&o.stderr));
    for (a, q) in GRID {
        let o = delphi(&["run", "--config", s(&grid_file(root, a, q)), "--out", s(&out_dir(root, a, q))]);
        ensure!(o.status.success(), "a={a} q={q}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");

    let mut transcripts = 0;
    for (i, dir) in grid_run_dirs(root).iter().enumerate() {
        let (a, q) = GRID[i / 3];
        let doc = read_json(&dir.join(TRANSCRIPT_FILE));
        let rounds = doc["transcript"]["rounds"].as_array().unwrap();
        ensure!(rounds.len() == 5, "{}: {} rounds", dir.display(), rounds.len());
        for r in rounds {
            let n = r["round_number"].as_u64().unwrap();
            let responses = r["open_responses"].as_array().unwrap().len();
            ensure!(responses == a * q, "{} round {n}: {responses} responses, want {}", dir.display(), a * q);
            for key in ["closed_questions", "retained_next_open"] {
                let len = r[key].as_array().unwrap().len();
                ensure!(len <= q, "{} round {n}: {len} {key} > q={q}", dir.display());
            }
        }
        transcripts += 1;
    }
    ensure!(transcripts == 12, "{transcripts} transcripts");
    Ok(format!("12 transcripts x 5 rounds in {:.1}s", elapsed.as_secs_f64()))
}

fn dedup_oracle() -> Check {
    let start = Instant::now();
    for seed in 0..1000 {
        let inst = dedup_instance(seed);
        let embedded = inst.embedded();
        let ids = |v: Vec<QuestionId>| v.into_iter().map(|q| q.0).collect::<Vec<_>>();
        let fast = ids(filter_threshold(&embedded, inst.threshold).unwrap().kept_ids());
        ensure!(fast == brute_threshold(&inst.items, inst.threshold), "threshold mismatch, seed {seed}");
        let fast = ids(prune_to_count(&embedded, inst.target).unwrap().kept_ids());
        ensure!(fast == brute_prune(&inst.items, inst.target), "prune mismatch, seed {seed}");
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("1000 instances in {:.2}s", elapsed.as_secs_f64()))
}

fn aggregation_exactness(root: &Path) -> Check {
    let mut checked = 0;
    for dir in grid_run_dirs(root) {
        let doc = read_json(&dir.join(TRANSCRIPT_FILE));
        for r in doc["transcript"]["rounds"].as_array().unwrap() {
            for agg in r["aggregates"].as_array().unwrap() {
                let id = &agg["question_id"];
                let values: Vec<u8> = r["ratings"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .filter(|x| &x["question_id"] == id)
                    .map(|x| x["value"].as_u64().unwrap() as u8)
                    .collect();
                let (mean, std) = ref_mean_std(&values);
                let (m, sd) = (agg["mean"].as_f64().unwrap(), agg["std_dev"].as_f64().unwrap());
                ensure!((m - mean).abs() <= 1e-12, "{} question {id}: mean {m} vs {mean}", dir.display());
                ensure!((sd - std).abs() <= 1e-12, "{} question {id}: std {sd} vs {std}", dir.display());
                checked += 1;
            }
        }
    }
    let (mean, std) = ref_mean_std(&[1, 2, 3, 4, 5]);
    ensure!((mean - 3.0).abs() <= 1e-12 && (std - 2f64.sqrt()).abs() <= 1e-12, "hand case");
    let crate_stats = delphi_core::stats::aggregate_ratings(QuestionId(0), &[1, 2, 3, 4, 5])
        .ok_or("no aggregate for the hand case")?;
    ensure!(
        (crate_stats.mean - 3.0).abs() <= 1e-12 && (crate_stats.std_dev - 2f64.sqrt()).abs() <= 1e-12,
        "crate hand case gave {crate_stats:?}"
    );
    Ok(format!("{checked} aggregates recomputed"))
}

fn mean_only_feedback(root: &Path) -> Check {
    let line = Regex::new(r"^- (.+) \(mean (\d\.\d\d)\)$").unwrap();
    let banned = RegexBuilder::new(r"standard deviation|\bstd\b|variance|dispersion|spread|disagree|consensus|\bsd\b|σ")
        .case_insensitive(true)
        .build()
        .unwrap();
    let mut scanned = 0;
    for dir in grid_run_dirs(root) {
        let doc = read_json(&dir.join(TRANSCRIPT_FILE));
        let rounds = doc["transcript"]["rounds"].as_array().unwrap();
        let prompts: BTreeMap<u64, String> = persistence::read_jsonl(&dir.join(PROMPT_LOG_FILE))
            .unwrap()
            .into_iter()
            .filter(|r| r["tag"]["kind"] == "regeneration")
            .map(|r| (r["round"].as_u64().unwrap(), r["user_prompt"].as_str().unwrap().to_string()))
            .collect();
        ensure!(prompts.len() == rounds.len(), "{}: {} regeneration prompts", dir.display(), prompts.len());
        for r in rounds {
            let n = r["round_number"].as_u64().unwrap();
            let prompt = &prompts[&n];
            if let Some(m) = banned.find(prompt) {
                return Err(format!("{} round {n}: dispersion term {:?}", dir.display(), m.as_str()));
            }
            let shown: BTreeMap<&str, &str> = prompt
                .lines()
                .filter_map(|l| line.captures(l))
                .map(|c| (c.get(1).unwrap().as_str(), c.get(2).unwrap().as_str()))
                .collect();
            let texts: BTreeMap<String, &str> = r["closed_questions"]
                .as_array()
                .unwrap()
                .iter()
                .map(|q| (q["question_id"].to_string(), q["text"].as_str().unwrap()))
                .collect();
            for agg in r["aggregates"].as_array().unwrap() {
                let text = texts[&agg["question_id"].to_string()];
                let values: Vec<u8> = r["ratings"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .filter(|x| x["question_id"] == agg["question_id"])
                    .map(|x| x["value"].as_u64().unwrap() as u8)
                    .collect();
                let expected = format!("{:.2}", ref_mean_std(&values).0);
                ensure!(
                    shown.get(text) == Some(&expected.as_str()),
                    "{} round {n}: mean of {text:?} not shown as {expected}",
                    dir.display()
                );
            }
            scanned += 1;
        }
    }
    Ok(format!("{scanned} regeneration prompts scanned"))
}

async fn determinism_and_resume(root: &Path) -> Check {
    let config_path = grid_file(root, 5, 5);
    let reference: Vec<Vec<u8>> = (0..3)
        .map(|k| std::fs::read(out_dir(root, 5, 5).join(format!("run_{k}/{TRANSCRIPT_FILE}"))).unwrap())
        .collect();
    for attempt in 0..3 {
        let out = root.join(format!("rerun_{attempt}"));
        let o = delphi(&["run", "--config", s(&config_path), "--out", s(&out)]);
        ensure!(o.status.success(), "rerun {attempt} failed");
        for (k, bytes) in reference.iter().enumerate() {
            let again = std::fs::read(out.join(format!("run_{k}/{TRANSCRIPT_FILE}"))).unwrap();
            ensure!(&again == bytes, "rerun {attempt} run_{k} differs");
        }
    }

    let config = effective_config(&ConfigArgs { config: config_path, ..ConfigArgs::default() })
        .map_err(|e| e.to_string())?;
    let boundaries = [
        (3, Phase::AwaitingOpenAnswers),
        (3, Phase::AwaitingSurveyGeneration),
        (3, Phase::AwaitingRatings),
        (3, Phase::AwaitingRegeneration),
        (4, Phase::AwaitingOpenAnswers),
    ];
    for (round, phase) in boundaries {
        let dir = root.join(format!("killed_{round}_{phase}"));
        let backend = backend_for(&config, 0, None).map_err(|e| e.to_string())?;
        let state = StudyState::new(config.clone(), 0).map_err(|e| e.to_string())?;
        persistence::write_config(&config, &dir.join("config.json")).map_err(|e| e.to_string())?;
        let err = Orchestrator::persistent(backend.as_ref(), &dir, 0)
            .map_err(|e| e.to_string())?
            .stop_at(round, phase)
            .drive(state)
            .await
            .unwrap_err();
        ensure!(matches!(err, OrchestratorError::Halted { .. }), "unexpected {err}");
        let o = delphi(&["resume", s(&dir)]);
        ensure!(o.status.success(), "resume at {round}/{phase}: {}", String::from_utf8_lossy(&o.stderr));
        let resumed = std::fs::read(dir.join(TRANSCRIPT_FILE)).unwrap();
        ensure!(resumed == reference[0], "resume at {round}/{phase} differs");
    }
    Ok("3 reruns and 5 resume points byte-identical".into())
}

async fn parallelism_invariance() -> Check {
    let requests: Vec<ChatRequest> = (0..64)
        .map(|i| ChatRequest {
            system_prompt: format!("You are expert {}.", i % 5),
            user_prompt: format!("Open question {i}?"),
            temperature: 0.7,
            max_output_tokens: 150,
            tag: RequestTag::OpenAnswer { agent_index: i % 5, question_id: QuestionId(i as u64) },
        })
        .collect();
    let mut batches = Vec::new();
    let mut peaks = Vec::new();
    for p in [1, 4, 16] {
        let mock = MockBackend::new(5).with_latency(Duration::from_millis(2));
        batches.push(run_batch(&mock, &requests, p).await.map_err(|e| e.to_string())?);
        ensure!(mock.peak_in_flight() <= p, "p={p}: peak {}", mock.peak_in_flight());
        peaks.push(mock.peak_in_flight());
    }
    ensure!(batches[0] == batches[1] && batches[0] == batches[2], "batch outputs differ");

    let mut studies = Vec::new();
    for p in [1, 4, 16] {
        let mut config = support::grid_config(5, 5, 8);
        config.parallelism = p;
        let backend = backend_for(&config, 0, None).map_err(|e| e.to_string())?;
        let r = run_study(config, 0, backend.as_ref()).await.map_err(|e| e.to_string())?;
        studies.push((r.rounds, r.summary_text));
    }
    ensure!(studies[0] == studies[1] && studies[0] == studies[2], "study results differ");
    Ok(format!("peak in-flight {peaks:?} for bounds [1, 4, 16]"))
}

fn persona_distribution() -> Check {
    let mut dists = default_catalog();
    dists.nationality =
        CategoricalDistribution::new([("Target", 0.3), ("Other A", 0.45), ("Other B", 0.25)]);
    let config = StudyConfig::for_grid("future of GenAI", vec!["Q?".into()], 10_000, 1, dists, 99);
    let panel = sample_panel(&config, &mut ChaCha8Rng::seed_from_u64(2024));
    ensure!(panel.len() == 10_000, "panel of {}", panel.len());
    let hits = panel
        .iter()
        .filter(|p| p.attribute(PersonaAttribute::Nationality) == "Target")
        .count();
    let freq = hits as f64 / 10_000.0;
    ensure!((freq - 0.3).abs() <= 0.02, "frequency {freq}");
    Ok(format!("frequency {freq:.4}"))
}

fn table_shape(root: &Path) -> Check {
    let mut csvs = Vec::new();
    for attempt in 0..2 {
        let report = root.join(format!("report_{attempt}"));
        let mut args = vec!["analyze".to_string()];
        args.extend(GRID.iter().map(|&(a, q)| s(&out_dir(root, a, q)).to_string()));
        args.extend(["--out".into(), s(&report).into()]);
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = delphi(&args);
        ensure!(o.status.success(), "analyze: {}", String::from_utf8_lossy(&o.stderr));
        csvs.push(std::fs::read_to_string(report.join("topics.csv")).unwrap());
    }
    ensure!(csvs[0] == csvs[1], "analyze is not deterministic");
    let rows: Vec<Vec<&str>> = csvs[0].lines().map(|l| l.split(',').collect()).collect();
    ensure!(rows.len() == 13, "{} lines", rows.len());
    ensure!(rows.iter().all(|r| r.len() == 16), "ragged rows");
    let labels: BTreeSet<&str> = rows[0][1..].iter().copied().collect();
    ensure!(labels.len() == 15, "{} distinct topic labels", labels.len());
    let cells_ok = rows[1..].iter().flat_map(|r| &r[1..]).all(|c| *c == "yes" || *c == "no");
    ensure!(cells_ok, "non yes/no cell");
    Ok("12x15 yes/no matrix, stable across two invocations".into())
}

fn repeat_variability(root: &Path) -> Check {
    let cell = out_dir(root, 5, 5);
    let report = root.join("divergence");
    let o = delphi(&["analyze", s(&cell), "--out", s(&report), "--divergence"]);
    ensure!(o.status.success(), "analyze: {}", String::from_utf8_lossy(&o.stderr));
    let div = read_json(&report.join("divergence.json"));
    let pairs = div["pairs"].as_array().unwrap();
    ensure!(pairs.len() == 3, "{} pairs", pairs.len());

    let docs: Vec<Value> = (0..3).map(|k| read_json(&cell.join(format!("run_{k}/{TRANSCRIPT_FILE}")))).collect();
    let seeds: BTreeSet<u64> = docs.iter().map(|d| d["transcript"]["run_seed"].as_u64().unwrap()).collect();
    ensure!(seeds.len() == 3, "run seeds are not distinct");
    let lexicon: Value = serde_json::from_str(delphi_core::analysis::default_lexicon_json()).unwrap();
    let topics = |doc: &Value| -> BTreeSet<String> {
        let summary = doc["transcript"]["summary_text"].as_str().unwrap();
        lexicon["topics"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|t| {
                t["patterns"].as_array().unwrap().iter().any(|p| {
                    RegexBuilder::new(p.as_str().unwrap()).case_insensitive(true).build().unwrap().is_match(summary)
                })
            })
            .map(|t| t["label"].as_str().unwrap().to_string())
            .collect()
    };
    let final_means = |doc: &Value| -> BTreeMap<String, f64> {
        let last = doc["transcript"]["rounds"].as_array().unwrap().last().unwrap().clone();
        last["closed_questions"]
            .as_array()
            .unwrap()
            .iter()
            .filter_map(|q| {
                let values: Vec<u8> = last["ratings"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .filter(|x| x["question_id"] == q["question_id"])
                    .map(|x| x["value"].as_u64().unwrap() as u8)
                    .collect();
                (!values.is_empty()).then(|| (q["text"].as_str().unwrap().to_string(), ref_mean_std(&values).0))
            })
            .collect()
    };

    let mut idx = 0;
    for i in 0..3 {
        for j in i + 1..3 {
            let (a, b) = (topics(&docs[i]), topics(&docs[j]));
            let union = a.union(&b).count();
            let jac = if union == 0 { 1.0 } else { a.intersection(&b).count() as f64 / union as f64 };
            let pair = &pairs[idx];
            let got = pair["topic_jaccard"].as_f64().unwrap();
            ensure!((got - jac).abs() < 1e-12, "pair {i},{j}: jaccard {got} vs {jac}");

            let (ma, mb) = (final_means(&docs[i]), final_means(&docs[j]));
            let diffs: Vec<f64> = ma.iter().filter_map(|(t, x)| mb.get(t).map(|y| (x - y).abs())).collect();
            ensure!(
                pair["shared_final_questions"].as_u64() == Some(diffs.len() as u64),
                "pair {i},{j}: shared count"
            );
            match pair["mean_abs_rating_diff"].as_f64() {
                Some(d) => {
                    let want = diffs.iter().sum::<f64>() / diffs.len() as f64;
                    ensure!((d - want).abs() < 1e-12, "pair {i},{j}: mean diff {d} vs {want}");
                }
                None => ensure!(diffs.is_empty(), "pair {i},{j}: missing mean diff"),
            }
            idx += 1;
        }
    }
    Ok("3 pairs match recomputation from raw transcripts".into())
}

fn report(name: &str, outcome: std::thread::Result<Check>) -> bool {
    match outcome {
        Ok(Ok(detail)) => {
            println!("PASS  {name}: {detail}");
            true
        }
        Ok(Err(why)) => {
            println!("FAIL  {name}: {why}");
            false
        }
        Err(panic) => {
            let why = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            println!("FAIL  {name}: {why}");
            false
        }
    }
}

fn main() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let root = tmp.path();
    let rt = tokio::runtime::Runtime::new().expect("runtime");

    let mut ok = true;
    let grid = catch_unwind(|| grid_reproduction(root));
    let grid_ok = matches!(grid, Ok(Ok(_)));
    ok &= report("experiment grid structure", grid);
    ok &= report("dedup oracle equivalence", catch_unwind(dedup_oracle));

    // The remaining file-based checks read the grid output.
    let needs_grid = |f: &dyn Fn() -> Check| -> std::thread::Result<Check> {
        if grid_ok {
            catch_unwind(AssertUnwindSafe(f))
        } else {
            Ok(Err("grid runs unavailable".into()))
        }
    };
    ok &= report("aggregation exactness", needs_grid(&|| aggregation_exactness(root)));
    ok &= report("mean-only feedback", needs_grid(&|| mean_only_feedback(root)));
    ok &= report(
        "determinism and resume",
        needs_grid(&|| rt.block_on(determinism_and_resume(root))),
    );
    ok &= report(
        "parallelism invariance",
        catch_unwind(AssertUnwindSafe(|| rt.block_on(parallelism_invariance()))),
    );
    ok &= report("persona distribution", catch_unwind(persona_distribution));
    ok &= report("table shape", needs_grid(&|| table_shape(root)));
    ok &= report("repeat variability", needs_grid(&|| repeat_variability(root)));

    if !ok {
        std::process::exit(1);
    }
}
