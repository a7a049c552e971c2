//! Shared fixture builders for the integration tests.
//!
//! The synthetic dataset and its scripts are committed under
//! `tests/fixtures/synthetic/`; `fixtures.rs` checks they match what these
//! builders produce (set `UPDATE_GOLDEN=1` to rewrite them).

#![allow(dead_code)]

pub mod oracles;

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use tsckb::agents::{Agents, TaskContext};
use tsckb::data::{few_shot_split, load_ucr_tsv, Dataset, FewShotSplit, TimeSeriesSample};
use tsckb::pipeline::{run_all, Pipeline, RunConfig, RunDir, RunOutcome, Stages};
use tsckb::plot::{ImageCache, PlotConfig};
use tsckb::prompt::Templates;
use tsckb::vlm::{RecordingClient, ScriptEntry, ScriptedClient, VlmClient};

pub const NAME: &str = "Synth";
pub const DESCRIPTION: &str = "Synthetic two-class benchmark. Class 1 oscillates with a period of 8 steps; \
class 2 oscillates with a period of 16 steps on top of a slow upward drift.";
pub const SERIES_LEN: usize = 64;
pub const K: usize = 3;
pub const SEED: u64 = 7;

/// Train-stage bullet whose presence makes the scripted Generator answer
/// correctly on the first six test samples.
pub const KEY_TRAIN: &str = "KEY-TRAIN";
/// Test-stage bullet (visible only once promoted) gating the last four.
pub const KEY_TEST: &str = "KEY-TEST";

/// Bullet ids produced by warmup on the synthetic split.
pub const ID_STATS_1: u64 = 2;
pub const ID_DESC_1: u64 = 3;
pub const ID_STATS_2: u64 = 5;
pub const ID_DESC_2: u64 = 6;
pub const ID_INTER: u64 = 8;
pub const WARMUP_BULLETS: u64 = 10;
/// Added in training step 1 and tagged harmful three times.
pub const ID_SPURIOUS: u64 = 11;
pub const ID_KEY_TRAIN: u64 = 12;
/// Added at the first test sample, scoped to class 1.
pub const ID_KEY_TEST: u64 = 15;
/// Added at the seventh test sample, scoped to class 2, never observed.
pub const ID_UNSEEN: u64 = 16;

pub fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn fixture_dir() -> PathBuf {
    manifest_dir().join("tests/fixtures/synthetic")
}

pub fn golden_dir() -> PathBuf {
    manifest_dir().join("tests/golden")
}

pub fn update_golden() -> bool {
    std::env::var_os("UPDATE_GOLDEN").is_some()
}

fn series(label: &str, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let amp = rng.gen_range(0.8..1.2);
    let phase = rng.gen_range(0.0..16.0);
    (0..SERIES_LEN)
        .map(|t| {
            let t = t as f64;
            let noise = rng.gen_range(-0.1..0.1);
            let v = match label {
                "1" => amp * (2.0 * PI * (t + phase) / 8.0).sin(),
                _ => amp * (2.0 * PI * (t + phase) / 16.0).sin() + 0.02 * t,
            };
            // Six decimals so the TSV text is the exact source of truth.
            ((v + noise) * 1e6).round() / 1e6
        })
        .collect()
}

fn tsv(labels: &[&str], rng: &mut ChaCha8Rng) -> String {
    let mut out = String::new();
    for label in labels {
        out.push_str(label);
        for v in series(label, rng) {
            out.push_str(&format!("\t{v:.6}"));
        }
        out.push('\n');
    }
    out
}

/// Archive train (8 per class) and test (6 of class 1, then 4 of class 2).
pub fn synthetic_tsv() -> (String, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let train: Vec<&str> = ["1"; 8].into_iter().chain(["2"; 8]).collect();
    let test: Vec<&str> = ["1"; 6].into_iter().chain(["2"; 4]).collect();
    (tsv(&train, &mut rng), tsv(&test, &mut rng))
}

pub fn load_synthetic() -> (Dataset, Dataset) {
    let dir = fixture_dir();
    (
        load_ucr_tsv(dir.join("Synth_TRAIN.tsv"), NAME, DESCRIPTION).unwrap(),
        load_ucr_tsv(dir.join("Synth_TEST.tsv"), NAME, DESCRIPTION).unwrap(),
    )
}

pub fn synthetic_split() -> (Dataset, FewShotSplit) {
    let (train, test) = load_synthetic();
    let split = few_shot_split(&train, &test, K, SEED).unwrap();
    (train, split)
}

pub fn other_label(label: &str) -> &'static str {
    if label == "1" {
        "2"
    } else {
        "1"
    }
}

fn gen_reply(reasoning: &str, ids: &[u64], answer: &str) -> String {
    json!({"reasoning": reasoning, "bullet_ids": ids, "final_answer": answer}).to_string()
}

fn tags(entries: &[(u64, &str)]) -> serde_json::Value {
    entries
        .iter()
        .map(|(id, tag)| json!({"id": id, "tag": tag, "reason": format!("bullet {id} was {tag} here")}))
        .collect()
}

fn correct_reply(insight: &str, tag_list: &[(u64, &str)]) -> String {
    json!({
        "reasoning": "The cited period and drift cues matched the query.",
        "key_insight": insight,
        "advice": "",
        "bullet_tags": tags(tag_list),
    })
    .to_string()
}

fn incorrect_reply(tag_list: &[(u64, &str)]) -> String {
    json!({
        "error_identification": "The oscillation period was misread.",
        "root_cause_analysis": "Amplitude was weighted over the cycle count.",
        "correct_reasoning": "Count full cycles across the window before deciding.",
        "key_insight": "Cycle count separates the classes better than amplitude.",
        "bullet_tags": tags(tag_list),
    })
    .to_string()
}

fn modifier_reply(ops: serde_json::Value) -> String {
    json!({"reasoning": "Keep the bank compact.", "operations": ops}).to_string()
}

/// Which scripted branches to force.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptOptions {
    /// The first training step predicts the wrong class.
    pub train_error: bool,
    /// The first test sample gets a wrong first pass corrected by pass 2.
    pub test_disagreement: bool,
}

/// Hand-written responses for a full warmup, train and test run.
pub fn script(split: &FewShotSplit, opts: ScriptOptions) -> Vec<ScriptEntry> {
    let mut out = Vec::new();
    for (label, desc) in [
        ("1", ["Fast regular oscillation with about eight cycles per window.", "No visible drift; peaks stay level."]),
        ("2", ["Slow oscillation with about four cycles per window.", "The whole series drifts upward over time."]),
    ] {
        out.push(ScriptEntry::new(
            format!("warmup/class/{label}/intra"),
            format!("```json\n{}\n```", json!({"descriptors": desc})),
        ));
    }

    let train: Vec<&TimeSeriesSample> = split.train.iter().chain(&split.val).collect();
    for (i, s) in train.iter().enumerate() {
        let t = i + 1;
        let base = format!("train/{}", s.sample_id);
        let own = if s.label == "1" { ID_DESC_1 } else { ID_DESC_2 };
        let wrong = opts.train_error && t == 1;
        let answer = if wrong { other_label(&s.label) } else { s.label.as_str() };
        out.push(ScriptEntry::new(
            format!("{base}/generator"),
            format!(
                "Looking at the cycles. {}",
                gen_reply("Counted the cycles and checked for drift.", &[own, ID_INTER], answer)
            ),
        ));
        let mut tag_list = vec![(own, "helpful"), (ID_INTER, "helpful")];
        if (2..=4).contains(&t) {
            tag_list.push((ID_SPURIOUS, "harmful"));
        }
        if wrong {
            out.push(ScriptEntry::new(format!("{base}/reflect_incorrect"), incorrect_reply(&tag_list)));
        } else {
            out.push(ScriptEntry::new(
                format!("{base}/reflect_correct"),
                correct_reply("Cycle counting works.", &tag_list),
            ));
        }
        let ops = match t {
            1 => json!([
                {"kind": "ADD", "section": "Distinguish strategy or insight",
                 "content": "Large isolated spikes always indicate class 2."},
                {"kind": "ADD", "section": "strategy",
                 "content": format!("{KEY_TRAIN}: count full oscillation cycles; about eight per window means class 1, about four means class 2.")},
            ]),
            2 => json!([{"kind": "ADD", "section": "strategy",
                         "content": "Check amplitude stability before trusting the period estimate."}]),
            3 => json!([{"kind": "MODIFY", "target_id": 13,
                         "content": "Check amplitude stability across the whole window before trusting the period estimate, since noise can hide a cycle."}]),
            4 => json!([{"kind": "ADD", "section": "Distinguish strategy or insight",
                         "content": "When the trend slope is near zero, rely on the dominant period."}]),
            _ => json!([]),
        };
        out.push(ScriptEntry::new(format!("{base}/modifier"), modifier_reply(ops)));
    }

    for (i, s) in split.test.iter().enumerate() {
        let base = format!("test/{}", s.sample_id);
        let truth = s.label.as_str();
        let wrong = other_label(truth);
        let needle = if i < 6 { KEY_TRAIN } else { KEY_TEST };
        let cites: Vec<u64> = if i < 6 { vec![ID_KEY_TRAIN] } else { vec![ID_KEY_TRAIN, ID_KEY_TEST] };
        let good = gen_reply("The knowledge bank cue applies.", &cites, truth);
        let bad = gen_reply("No decisive cue; guessing from amplitude.", &[], wrong);
        let disagree = opts.test_disagreement && i == 0;
        if disagree {
            out.push(ScriptEntry::new(format!("{base}/generator_pass1"), bad.clone()));
        } else {
            out.push(ScriptEntry::conditional(format!("{base}/generator_pass1"), needle, good.clone(), bad.clone()));
        }
        out.push(ScriptEntry::conditional(format!("{base}/generator_pass2"), needle, good, bad));

        let tag_list: Vec<(u64, &str)> = if (1..=5).contains(&i) {
            vec![(ID_KEY_TEST, "helpful")]
        } else {
            vec![(ID_KEY_TRAIN, "helpful")]
        };
        if disagree {
            out.push(ScriptEntry::new(format!("{base}/reflect_incorrect"), incorrect_reply(&tag_list)));
        } else {
            out.push(ScriptEntry::new(
                format!("{base}/reflect_correct"),
                correct_reply("The second pass confirmed the first.", &tag_list),
            ));
        }
        let ops = match i {
            0 => json!([{"kind": "ADD", "section": "strategy",
                         "content": format!("{KEY_TEST}: a level series with a short period is class 1 even when its amplitude varies.")}]),
            6 => json!([{"kind": "ADD", "section": "mistakes",
                         "content": "Do not read a slow drift as a second oscillation."}]),
            7 => json!([{"kind": "DELETE", "target_id": 2}]),
            _ => json!([]),
        };
        out.push(ScriptEntry::new(format!("{base}/modifier"), modifier_reply(ops)));
    }
    out
}

pub fn script_jsonl(entries: &[ScriptEntry]) -> String {
    entries
        .iter()
        .map(|e| serde_json::to_string(e).unwrap() + "\n")
        .collect()
}

pub fn config_json() -> String {
    serde_json::to_string_pretty(&json!({
        "dataset": {
            "name": NAME,
            "description": DESCRIPTION,
            "format": "ucr",
            "train_path": "Synth_TRAIN.tsv",
            "test_path": "Synth_TEST.tsv"
        },
        "split": {"k": K, "seed": SEED},
        "client": {"kind": "scripted", "script": "script.jsonl"},
        "run": {"out_dir": "run"}
    }))
    .unwrap()
        + "\n"
}

pub fn run_config(stages: Stages) -> RunConfig {
    RunConfig {
        k: K,
        seed: SEED,
        stages,
        ..RunConfig::default()
    }
}

/// Runs warmup, training and testing against `client`, optionally writing
/// a run directory.
pub fn run_pipeline(
    split: &FewShotSplit,
    ctx: &TaskContext,
    client: &dyn VlmClient,
    stages: Stages,
    run_dir: Option<&RunDir>,
) -> RunOutcome {
    let config = run_config(stages);
    let templates = Templates::builtin();
    let images = match run_dir {
        Some(d) => ImageCache::new(d.images_dir()),
        None => ImageCache::in_memory(),
    };
    let plot = PlotConfig::default();
    let agents = Agents::new(client, &templates, &images, &plot, ctx);
    let mut pipeline = Pipeline::new(&config, agents, split);
    if let Some(d) = run_dir {
        pipeline = pipeline.with_run_dir(d);
    }
    run_all(&mut pipeline).unwrap()
}

pub struct ScriptedRun {
    pub outcome: RunOutcome,
    pub tags: Vec<String>,
}

pub fn scripted_run(opts: ScriptOptions, stages: Stages, run_dir: Option<&RunDir>) -> ScriptedRun {
    let (train, split) = synthetic_split();
    let ctx = TaskContext::from_dataset(&train);
    let client = RecordingClient::new(ScriptedClient::new(script(&split, opts)));
    let outcome = run_pipeline(&split, &ctx, &client, stages, run_dir);
    ScriptedRun {
        outcome,
        tags: client.tags(),
    }
}

/// Compares `actual` with the golden file, or rewrites it under
/// `UPDATE_GOLDEN`.
pub fn check_golden(path: &Path, actual: &str) -> Result<(), String> {
    if update_golden() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(path, actual).unwrap();
        return Ok(());
    }
    let expected = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected == actual {
        Ok(())
    } else {
        let line = expected
            .lines()
            .zip(actual.lines())
            .position(|(a, b)| a != b)
            .map_or_else(|| "length".to_string(), |i| format!("line {}", i + 1));
        Err(format!("{} differs at {line}", path.display()))
    }
}
