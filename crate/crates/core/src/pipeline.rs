//! Warmup, training refinement and two-pass test-time update, plus metric
//! aggregation and the run directory layout.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::{retrieve_contrast_pair, Agents, BankView, GeneratorOutput, ReflectionOutput, RoleBudgets};
use crate::bank::{
    default_tau_drop, BankOperation, KnowledgeBank, LifecycleThresholds, LogEntry, LoggedAction, Phase, ScoreOutcome,
    Section, Tag,
};
use crate::data::{FewShotSplit, TimeSeriesSample};
use crate::error::{io_err, Error, Result, RoleFailure};
use crate::features::{fmt_value, rank_features, summarize, StatsSummary, DEFAULT_TOP_N};
use crate::plot::PlotConfig;

/// Which parts of the pipeline are enabled; the ablation variants toggle these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub train_refine: bool,
    pub test_update: bool,
    pub second_pass: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self {
            train_refine: true,
            test_update: true,
            second_pass: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub k: usize,
    pub seed: u64,
    /// `None` means `ceil(0.10 × training steps)`.
    pub tau_drop: Option<u32>,
    pub lifecycle: LifecycleThresholds,
    pub top_n: usize,
    pub plot: PlotConfig,
    pub temperature: f64,
    pub r_schema: u32,
    pub budgets: RoleBudgets,
    /// Adds one model call per class pair contrasting their images.
    pub enrich_inter_class: bool,
    pub stages: Stages,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k: 3,
            seed: 0,
            tau_drop: None,
            lifecycle: LifecycleThresholds::default(),
            top_n: DEFAULT_TOP_N,
            plot: PlotConfig::default(),
            temperature: crate::vlm::DEFAULT_TEMPERATURE,
            r_schema: crate::vlm::DEFAULT_SCHEMA_RETRIES,
            budgets: RoleBudgets::default(),
            enrich_inter_class: false,
            stages: Stages::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.k == 0 {
            return Err("k must be at least 1".into());
        }
        if !(self.lifecycle.remove < 0 && 0 < self.lifecycle.promote) {
            return Err(format!(
                "thresholds must satisfy tau_remove < 0 < tau_promote, got {} and {}",
                self.lifecycle.remove, self.lifecycle.promote
            ));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(format!("temperature {} outside [0, 2]", self.temperature));
        }
        if self.top_n == 0 {
            return Err("top_n must be at least 1".into());
        }
        self.plot.validate(1).map_err(|e| e.to_string())
    }

    pub fn tau_drop_for(&self, split: &FewShotSplit) -> u32 {
        self.tau_drop.unwrap_or_else(|| default_tau_drop(split.training_steps()))
    }
}

/// Audit record for one processed sample (warmup is one record at step 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: Phase,
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
    /// Ground truth during training; the true label during testing is
    /// only used for metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass1: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass2: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cited: Vec<u64>,
    /// `(hard_positive, hard_negative)` sample ids.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrast: Option<(String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflection: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ops: Vec<LogEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<ScoreOutcome>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub purged: Vec<u64>,
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
    pub token_count: usize,
}

impl StepRecord {
    fn new(phase: Phase, step: u64, sample: Option<&TimeSeriesSample>) -> Self {
        Self {
            phase,
            step,
            sample_id: sample.map(|s| s.sample_id.clone()),
            truth: sample.map(|s| s.label.clone()),
            pass1: None,
            pass2: None,
            final_answer: None,
            cited: Vec::new(),
            contrast: None,
            reflection: None,
            ops: Vec::new(),
            score: None,
            purged: Vec::new(),
            degraded: false,
            failures: Vec::new(),
            token_count: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub total: usize,
    pub correct: usize,
    pub labels: Vec<String>,
    /// Rows are true labels; columns are predicted labels followed by one
    /// "no answer" column.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub degraded: usize,
    pub role_failures: usize,
}

impl MetricsReport {
    /// `outcomes` are `(truth, final answer)` pairs.
    pub fn from_outcomes(labels: &[String], outcomes: &[(String, Option<String>)], degraded: usize, role_failures: usize) -> Self {
        let index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let n = labels.len();
        let mut confusion = vec![vec![0usize; n + 1]; n];
        for (truth, answer) in outcomes {
            let Some(&row) = index.get(truth.as_str()) else { continue };
            let col = answer.as_deref().and_then(|a| index.get(a).copied()).unwrap_or(n);
            confusion[row][col] += 1;
        }
        let total: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..n).map(|i| confusion[i][i]).sum();
        let per_class = labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let support: usize = confusion[i].iter().sum();
                let predicted: usize = (0..n).map(|r| confusion[r][i]).sum();
                let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
                (
                    l.clone(),
                    ClassMetrics {
                        precision: ratio(confusion[i][i], predicted),
                        recall: ratio(confusion[i][i], support),
                        support,
                    },
                )
            })
            .collect();
        Self {
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            total,
            correct,
            labels: labels.to_vec(),
            confusion,
            per_class,
            degraded,
            role_failures,
        }
    }
}

/// Files of one run: `config.json`, `bank.json` (latest), `bank_step_<n>.json`,
/// `steps.jsonl`, `transcript.jsonl`, `metrics.json` and `images/`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let images = root.join("images");
        fs::create_dir_all(&images).map_err(io_err(&images))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn images_dir(&self) -> PathBuf {
        self.path("images")
    }

    pub fn transcript_path(&self) -> PathBuf {
        self.path("transcript.jsonl")
    }

    pub fn bank_path(&self) -> PathBuf {
        self.path("bank.json")
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, contents).map_err(io_err(&path))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        self.write(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    pub fn append_step(&self, record: &StepRecord) -> Result<()> {
        let path = self.path("steps.jsonl");
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        writeln!(file, "{}", serde_json::to_string(record)?).map_err(io_err(&path))
    }

    pub fn write_bank_step(&self, bank: &KnowledgeBank) -> Result<()> {
        self.write(&format!("bank_step_{}.json", bank.step()), &bank.snapshot())?;
        self.write("bank.json", &bank.snapshot())
    }

    pub fn read_bank(&self) -> Result<KnowledgeBank> {
        let path = self.bank_path();
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(KnowledgeBank::restore(&text)?)
    }

    pub fn read_steps(&self) -> Result<Vec<StepRecord>> {
        let path = self.path("steps.jsonl");
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&path)(e)),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }
}

/// Class-level statistics line used as the statistical intra-class bullet.
pub fn class_stats_bullet(label: &str, summaries: &[StatsSummary]) -> String {
    let channels = summaries.first().map_or(0, |s| s.channels.len());
    let mut parts = Vec::new();
    for c in 0..channels {
        let col = |f: &dyn Fn(&crate::features::ChannelStats) -> f64| -> (f64, f64, f64) {
            let vals: Vec<f64> = summaries.iter().map(|s| f(&s.channels[c])).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (mean, lo, hi)
        };
        let (mean, mean_lo, mean_hi) = col(&|s| s.mean);
        let (std, std_lo, std_hi) = col(&|s| s.std_dev);
        let (min, _, _) = col(&|s| s.min);
        let (max, _, _) = col(&|s| s.max);
        let periods: BTreeSet<usize> = summaries.iter().filter_map(|s| s.channels[c].dominant_period).collect();
        let period = if periods.is_empty() {
            "none".to_string()
        } else {
            periods.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("/")
        };
        parts.push(format!(
            "channel {}: mean {} (range {} to {}), std {} (range {} to {}), typical min {}, typical max {}, dominant period {}",
            c + 1,
            fmt_value(mean),
            fmt_value(mean_lo),
            fmt_value(mean_hi),
            fmt_value(std),
            fmt_value(std_lo),
            fmt_value(std_hi),
            fmt_value(min),
            fmt_value(max),
            period
        ));
    }
    format!(
        "Class '{label}' statistics over {} training samples: {}.",
        summaries.len(),
        parts.join("; ")
    )
}

pub fn generator_view(bank: &KnowledgeBank) -> BankView {
    BankView {
        text: bank.render_context(),
        ids: bank.rendered_ids(),
    }
}

pub fn curator_view(bank: &KnowledgeBank) -> BankView {
    BankView {
        text: bank.render_curator_context(),
        ids: bank.curator_ids(),
    }
}

fn reflection_summary(r: &ReflectionOutput) -> String {
    let case = if r.is_correct_case() { "correct" } else { "incorrect" };
    format!("{case}: {}", r.key_insight())
}

fn ops_since(bank: &KnowledgeBank, from: usize) -> Vec<LogEntry> {
    bank.op_log()[from..]
        .iter()
        .filter(|e| matches!(e.op, LoggedAction::Operation(_)))
        .cloned()
        .collect()
}

/// Sequential orchestration over one few-shot split.
pub struct Pipeline<'a> {
    pub config: &'a RunConfig,
    pub agents: Agents<'a>,
    pub split: &'a FewShotSplit,
    run_dir: Option<&'a RunDir>,
    records: Vec<StepRecord>,
    role_failures: usize,
}

impl<'a> Pipeline<'a> {
    pub fn new(config: &'a RunConfig, agents: Agents<'a>, split: &'a FewShotSplit) -> Self {
        Self {
            config,
            agents,
            split,
            run_dir: None,
            records: Vec::new(),
            role_failures: 0,
        }
    }

    pub fn with_run_dir(mut self, dir: &'a RunDir) -> Self {
        self.run_dir = Some(dir);
        self
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    /// Role failures across every stage run so far.
    pub fn role_failures(&self) -> usize {
        self.role_failures
    }

    fn fail(&mut self, record: &mut StepRecord, failure: &RoleFailure) {
        log::warn!("step {}: {failure}", record.step);
        self.role_failures += 1;
        record.failures.push(failure.to_string());
    }

    fn finish(&mut self, mut record: StepRecord, bank: Option<&KnowledgeBank>, token_count: usize) -> Result<StepRecord> {
        record.token_count = token_count;
        if let Some(dir) = self.run_dir {
            dir.append_step(&record)?;
            if let Some(bank) = bank {
                dir.write_bank_step(bank)?;
            }
        }
        self.records.push(record.clone());
        Ok(record)
    }

    fn pool(&self) -> Vec<&'a TimeSeriesSample> {
        self.split.labelled_pool()
    }

    /// Seeds the bank from the labelled few-shot train samples.
    pub fn warmup(&mut self, bank: &mut KnowledgeBank) -> Result<StepRecord> {
        if bank.phase() != Phase::Warmup || !bank.is_empty() {
            return Err(Error::Bank(crate::error::BankError::WrongPhase {
                expected: Phase::Warmup,
                actual: bank.phase(),
            }));
        }
        bank.set_step(0);
        let log_start = bank.op_log().len();
        let mut record = StepRecord::new(Phase::Warmup, 0, None);
        let ctx = self.agents.ctx;

        let background = if ctx.dataset_description.trim().is_empty() {
            format!("Dataset {}.", ctx.dataset_name)
        } else {
            format!("Dataset {}: {}", ctx.dataset_name, ctx.dataset_description.trim())
        };
        bank.apply(&[BankOperation::Add {
            section: Section::Background,
            content: background,
            class_scope: vec![],
        }]);

        let mut by_class: BTreeMap<String, Vec<&TimeSeriesSample>> = BTreeMap::new();
        for s in &self.split.train {
            by_class.entry(s.label.clone()).or_default().push(s);
        }
        let mut summaries: BTreeMap<String, Vec<StatsSummary>> = BTreeMap::new();
        for label in &ctx.labels {
            let samples = by_class.get(label).cloned().unwrap_or_default();
            if samples.is_empty() {
                continue;
            }
            let stats = samples
                .iter()
                .map(|s| summarize(s))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            bank.apply(&[BankOperation::Add {
                section: Section::IntraClass,
                content: class_stats_bullet(label, &stats),
                class_scope: vec![label.clone()],
            }]);
            summaries.insert(label.clone(), stats);
            match self
                .agents
                .describe_class(label, &samples, &format!("warmup/class/{label}/intra"))
            {
                Ok(descriptors) => {
                    let ops: Vec<BankOperation> = descriptors
                        .into_iter()
                        .map(|d| BankOperation::Add {
                            section: Section::IntraClass,
                            content: d,
                            class_scope: vec![label.clone()],
                        })
                        .collect();
                    bank.apply(&ops);
                }
                Err(e) => {
                    record.degraded = true;
                    self.fail(&mut record, &e);
                }
            }
        }

        let labels: Vec<&String> = summaries.keys().collect();
        for (i, a) in labels.iter().enumerate() {
            for b in &labels[i + 1..] {
                let report = rank_features(&summaries, (a, b), self.config.top_n)?;
                let scope = vec![(*a).clone(), (*b).clone()];
                let mut ops: Vec<BankOperation> = report
                    .descriptors()
                    .into_iter()
                    .map(|d| BankOperation::Add {
                        section: Section::InterClass,
                        content: d,
                        class_scope: scope.clone(),
                    })
                    .collect();
                if self.config.enrich_inter_class {
                    match self.agents.contrast_classes(&report, &by_class[*a], &by_class[*b], &format!("warmup/pair/{a}|{b}/inter")) {
                        Ok(extra) => ops.extend(extra.into_iter().map(|d| BankOperation::Add {
                            section: Section::InterClass,
                            content: d,
                            class_scope: scope.clone(),
                        })),
                        Err(e) => {
                            record.degraded = true;
                            self.fail(&mut record, &e);
                        }
                    }
                }
                bank.apply(&ops);
            }
        }
        record.ops = ops_since(bank, log_start);
        let tokens = bank.token_count();
        self.finish(record, Some(bank), tokens)
    }

    /// One training step on a labelled sample. Role failures skip the rest
    /// of the step.
    pub fn train_step(&mut self, sample: &TimeSeriesSample, bank: &mut KnowledgeBank) -> Result<StepRecord> {
        self.train_step_with_sweep(sample, bank, None)
    }

    /// Like [`train_step`](Self::train_step), then runs the discard sweep
    /// when `sweep` carries a `tau_drop`.
    fn train_step_with_sweep(
        &mut self,
        sample: &TimeSeriesSample,
        bank: &mut KnowledgeBank,
        sweep: Option<u32>,
    ) -> Result<StepRecord> {
        let step = bank.step() + 1;
        bank.set_step(step);
        if bank.phase() != Phase::Train {
            bank.set_phase(Phase::Train);
        }
        let log_start = bank.op_log().len();
        let mut record = StepRecord::new(Phase::Train, step, Some(sample));
        let base = format!("train/{}", sample.sample_id);
        let truth = sample.label.as_str();

        if let Err(e) = self.refine(sample, bank, &base, truth, &mut record) {
            self.fail(&mut record, &e);
        }
        if let Some(tau_drop) = sweep {
            record.purged = bank.discard_sweep(tau_drop)?;
        }
        record.ops = ops_since(bank, log_start);
        let tokens = bank.token_count();
        self.finish(record, Some(bank), tokens)
    }

    fn refine(
        &mut self,
        sample: &TimeSeriesSample,
        bank: &mut KnowledgeBank,
        base: &str,
        truth: &str,
        record: &mut StepRecord,
    ) -> std::result::Result<(), RoleFailure> {
        let gen = self
            .agents
            .generate_first_pass(sample, &generator_view(bank), &format!("{base}/generator"))?;
        record.pass1 = Some(gen.final_answer.clone());
        record.final_answer = Some(gen.final_answer.clone());
        record.cited = gen.bullet_ids.clone();
        self.reflect_and_curate(sample, bank, base, &gen, truth, record)?;
        Ok(())
    }

    /// Reflection (with contrast retrieval when `gen` disagrees with
    /// `truth`), tag recording, curation and application.
    fn reflect_and_curate(
        &mut self,
        sample: &TimeSeriesSample,
        bank: &mut KnowledgeBank,
        base: &str,
        gen: &GeneratorOutput,
        truth: &str,
        record: &mut StepRecord,
    ) -> std::result::Result<ReflectionOutput, RoleFailure> {
        let reflection = if gen.final_answer == truth {
            self.agents
                .reflect_correct(sample, &curator_view(bank), gen, truth, &format!("{base}/reflect_correct"))?
        } else {
            let pool: Vec<&TimeSeriesSample> = self
                .pool()
                .into_iter()
                .filter(|s| s.sample_id != sample.sample_id)
                .collect();
            let pair = retrieve_contrast_pair(sample, &gen.final_answer, truth, &pool).map_err(|e| RoleFailure::Input {
                role: "reflector".into(),
                message: e.to_string(),
            })?;
            record.contrast = Some((pair.hard_positive.sample_id.clone(), pair.hard_negative.sample_id.clone()));
            self.agents.reflect_incorrect(
                sample,
                &curator_view(bank),
                gen,
                truth,
                &pair,
                &format!("{base}/reflect_incorrect"),
            )?
        };
        record.reflection = Some(reflection_summary(&reflection));
        let tags: Vec<(u64, Tag)> = reflection.bullet_tags().iter().map(|t| (t.id, t.tag)).collect();
        bank.record_tags(&tags);
        let modifier = self.agents.curate(
            sample,
            &curator_view(bank),
            gen,
            truth,
            &reflection,
            &[truth.to_string()],
            &format!("{base}/modifier"),
        )?;
        bank.apply(&modifier.operations);
        Ok(reflection)
    }

    /// Training over `D_train` then `D_val`, followed by the discard sweep.
    /// With `train_refine` disabled this does nothing.
    pub fn train(&mut self, bank: &mut KnowledgeBank) -> Result<()> {
        if !self.config.stages.train_refine {
            return Ok(());
        }
        let samples: Vec<&TimeSeriesSample> = self.split.train.iter().chain(&self.split.val).collect();
        let tau_drop = self.config.tau_drop_for(self.split);
        let last = samples.len().saturating_sub(1);
        for (i, sample) in samples.into_iter().enumerate() {
            self.train_step_with_sweep(sample, bank, (i == last).then_some(tau_drop))?;
        }
        Ok(())
    }

    /// Two-pass prediction with deferred bank update for one streaming test
    /// sample. Returns the record; its `final_answer` is the prediction.
    pub fn test_step(&mut self, sample: &TimeSeriesSample, bank: &mut KnowledgeBank) -> Result<StepRecord> {
        let step = bank.step() + 1;
        bank.set_step(step);
        if bank.phase() != Phase::Test {
            bank.set_phase(Phase::Test);
        }
        let log_start = bank.op_log().len();
        let mut record = StepRecord::new(Phase::Test, step, Some(sample));
        let base = format!("test/{}", sample.sample_id);

        let view = generator_view(bank);
        let first = match self
            .agents
            .generate_first_pass(sample, &view, &format!("{base}/generator_pass1"))
        {
            Ok(g) => g,
            Err(e) => {
                self.fail(&mut record, &e);
                let tokens = bank.token_count();
                return self.finish(record, Some(bank), tokens);
            }
        };
        record.pass1 = Some(first.final_answer.clone());
        record.final_answer = Some(first.final_answer.clone());
        record.cited = first.bullet_ids.clone();

        if self.config.stages.second_pass {
            match self
                .agents
                .generate_second_pass(sample, &view, &first, &format!("{base}/generator_pass2"))
            {
                Ok(second) => {
                    record.pass2 = Some(second.final_answer.clone());
                    record.final_answer = Some(second.final_answer.clone());
                    record.cited = second.bullet_ids.clone();
                    if self.config.stages.test_update {
                        self.test_update(sample, bank, &base, &first, &second, &mut record)?;
                    }
                }
                Err(e) => {
                    record.degraded = true;
                    self.fail(&mut record, &e);
                }
            }
        }
        record.ops = ops_since(bank, log_start);
        let tokens = bank.token_count();
        self.finish(record, Some(bank), tokens)
    }

    fn test_update(
        &mut self,
        sample: &TimeSeriesSample,
        bank: &mut KnowledgeBank,
        base: &str,
        first: &GeneratorOutput,
        second: &GeneratorOutput,
        record: &mut StepRecord,
    ) -> Result<()> {
        let pseudo = second.final_answer.clone();
        // Disagreement: pass 1 is the negative instance, pass 2 the pseudo-truth.
        let gen = if first.final_answer != pseudo { first } else { second };
        let mut observed: BTreeSet<u64> = second.bullet_ids.iter().copied().collect();
        match self.reflect_and_curate(sample, bank, base, gen, &pseudo, record) {
            Ok(reflection) => observed.extend(
                reflection
                    .bullet_tags()
                    .iter()
                    .filter(|t| t.tag == Tag::Helpful)
                    .map(|t| t.id),
            ),
            Err(e) => self.fail(record, &e),
        }
        record.score = Some(bank.update_candidate_scores(&pseudo, &observed, self.config.lifecycle)?);
        Ok(())
    }

    /// Streams the test split through [`test_step`](Self::test_step).
    pub fn run_test(&mut self, bank: &mut KnowledgeBank) -> Result<MetricsReport> {
        let start = self.records.len();
        let failures_before = self.role_failures;
        for sample in &self.split.test {
            self.test_step(sample, bank)?;
        }
        Ok(self.metrics_since(start, failures_before))
    }

    /// Prediction only: the bank is never mutated. `second_pass` in the
    /// stage config decides between one and two Generator calls.
    pub fn evaluate_only(&mut self, bank: &KnowledgeBank) -> Result<MetricsReport> {
        let start = self.records.len();
        let failures_before = self.role_failures;
        let view = generator_view(bank);
        let mut step = bank.step();
        for sample in &self.split.test {
            step += 1;
            let mut record = StepRecord::new(Phase::Test, step, Some(sample));
            let base = format!("test/{}", sample.sample_id);
            match self
                .agents
                .generate_first_pass(sample, &view, &format!("{base}/generator_pass1"))
            {
                Ok(first) => {
                    record.pass1 = Some(first.final_answer.clone());
                    record.final_answer = Some(first.final_answer.clone());
                    record.cited = first.bullet_ids.clone();
                    if self.config.stages.second_pass {
                        match self
                            .agents
                            .generate_second_pass(sample, &view, &first, &format!("{base}/generator_pass2"))
                        {
                            Ok(second) => {
                                record.pass2 = Some(second.final_answer.clone());
                                record.final_answer = Some(second.final_answer);
                                record.cited = second.bullet_ids;
                            }
                            Err(e) => {
                                record.degraded = true;
                                self.fail(&mut record, &e);
                            }
                        }
                    }
                }
                Err(e) => self.fail(&mut record, &e),
            }
            let tokens = bank.token_count();
            self.finish(record, None, tokens)?;
        }
        Ok(self.metrics_since(start, failures_before))
    }

    fn metrics_since(&self, start: usize, failures_before: usize) -> MetricsReport {
        let records = &self.records[start..];
        let outcomes: Vec<(String, Option<String>)> = records
            .iter()
            .map(|r| (r.truth.clone().unwrap_or_default(), r.final_answer.clone()))
            .collect();
        let degraded = records.iter().filter(|r| r.degraded).count();
        MetricsReport::from_outcomes(
            &self.agents.ctx.labels,
            &outcomes,
            degraded,
            self.role_failures - failures_before,
        )
    }
}

/// The compared configurations of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Two-pass generation, no refinement at test time.
    WithoutUpdate,
    /// First pass only, no refinement at test time.
    WithoutSecondPass,
    /// Warmup bank only, two-pass generation, no refinement.
    WithoutTrainRefineAndTestUpdate,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::WithoutUpdate,
        Variant::WithoutSecondPass,
        Variant::WithoutTrainRefineAndTestUpdate,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full pipeline",
            Variant::WithoutUpdate => "w/o update (w/o test update)",
            Variant::WithoutSecondPass => "w/o 2-pass",
            Variant::WithoutTrainRefineAndTestUpdate => "w/o train refine & test update",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutUpdate => "without_update",
            Variant::WithoutSecondPass => "without_second_pass",
            Variant::WithoutTrainRefineAndTestUpdate => "without_train_refine_and_test_update",
        }
    }

    pub fn stages(self) -> Stages {
        match self {
            Variant::Full => Stages::default(),
            Variant::WithoutUpdate => Stages {
                test_update: false,
                ..Stages::default()
            },
            Variant::WithoutSecondPass => Stages {
                test_update: false,
                second_pass: false,
                ..Stages::default()
            },
            Variant::WithoutTrainRefineAndTestUpdate => Stages {
                train_refine: false,
                test_update: false,
                second_pass: true,
            },
        }
    }
}

/// Result of a complete warmup, train and test run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub bank: KnowledgeBank,
    pub metrics: MetricsReport,
    pub records: Vec<StepRecord>,
    pub role_failures: usize,
}

/// Warmup, training and testing according to `pipeline.config.stages`.
/// With test update disabled the test split is evaluated on a frozen bank.
pub fn run_all(pipeline: &mut Pipeline<'_>) -> Result<RunOutcome> {
    let mut bank = KnowledgeBank::new();
    pipeline.warmup(&mut bank)?;
    pipeline.train(&mut bank)?;
    let metrics = if pipeline.config.stages.test_update && pipeline.config.stages.second_pass {
        pipeline.run_test(&mut bank)?
    } else {
        pipeline.evaluate_only(&bank)?
    };
    if let Some(dir) = pipeline.run_dir {
        dir.write("bank.json", &bank.snapshot())?;
        dir.write_json("metrics.json", &metrics)?;
    }
    Ok(RunOutcome {
        bank,
        metrics,
        records: pipeline.records.clone(),
        role_failures: pipeline.role_failures,
    })
}
