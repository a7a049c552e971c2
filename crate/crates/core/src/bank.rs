//! The knowledge bank: sectioned, id-addressed bullets with tag counters and
//! a test-time trust tier.
//!
//! Every mutation goes through a method that appends to `op_log`, so the
//! log alone can rebuild the bank ([`KnowledgeBank::replay`]). Operations
//! that violate a phase gate are skipped and logged as rejected rather than
//! failing the whole batch.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::BankError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    IntraClass,
    InterClass,
    Mistakes,
    Strategy,
    Background,
}

impl Section {
    /// Rendering order.
    pub const ALL: [Section; 5] = [
        Section::IntraClass,
        Section::InterClass,
        Section::Mistakes,
        Section::Strategy,
        Section::Background,
    ];

    pub fn header(self) -> &'static str {
        match self {
            Section::IntraClass => "Intra-class features",
            Section::InterClass => "Inter-class features",
            Section::Mistakes => "Mistakes to avoid",
            Section::Strategy => "Distinguish strategy or insight",
            Section::Background => "Dataset background and domain knowledge clues",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Section::IntraClass => "intra_class",
            Section::InterClass => "inter_class",
            Section::Mistakes => "mistakes",
            Section::Strategy => "strategy",
            Section::Background => "background",
        }
    }

    /// Accepts the snake-case keys as well as the human headers a model is
    /// likely to echo back ("Mistakes to avoid", "inter-class", ...).
    pub fn parse_loose(text: &str) -> Option<Section> {
        let t = text.trim().to_lowercase().replace(['-', '_'], " ");
        if t.contains("intra") {
            Some(Section::IntraClass)
        } else if t.contains("inter") {
            Some(Section::InterClass)
        } else if t.contains("mistake") {
            Some(Section::Mistakes)
        } else if t.contains("strateg") || t.contains("insight") {
            Some(Section::Strategy)
        } else if t.contains("background") || t.contains("domain") {
            Some(Section::Background)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Train,
    Test,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Warmup => "warmup",
            Phase::Train => "train",
            Phase::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Prototype,
    Reference,
    Candidate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Helpful,
    Harmful,
    Neutral,
}

impl Tag {
    /// `useful` and `useless` are accepted as synonyms.
    pub fn parse(text: &str) -> Option<Tag> {
        match text.trim().to_lowercase().as_str() {
            "helpful" | "useful" => Some(Tag::Helpful),
            "harmful" | "useless" => Some(Tag::Harmful),
            "neutral" => Some(Tag::Neutral),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagCounts {
    pub helpful: u32,
    pub harmful: u32,
    pub neutral: u32,
}

impl TagCounts {
    fn bump(&mut self, tag: Tag) {
        match tag {
            Tag::Helpful => self.helpful += 1,
            Tag::Harmful => self.harmful += 1,
            Tag::Neutral => self.neutral += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bullet {
    pub id: u64,
    pub section: Section,
    pub content: String,
    pub tags: TagCounts,
    pub tier: Tier,
    pub score: i64,
    pub created_phase: Phase,
    pub created_step: u64,
    #[serde(default)]
    pub class_scope: Vec<String>,
}

impl Bullet {
    pub fn in_scope(&self, label: &str) -> bool {
        self.class_scope.iter().any(|l| l == label)
    }
}

/// One atomic instruction from the Modifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum BankOperation {
    #[serde(rename = "ADD")]
    Add {
        section: Section,
        content: String,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        class_scope: Vec<String>,
    },
    #[serde(rename = "MODIFY")]
    Modify { target_id: u64, content: String },
    #[serde(rename = "DELETE")]
    Delete { target_id: u64 },
}

/// Bank maintenance that is not a Modifier instruction but still has to be
/// logged for replay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Maintenance {
    #[serde(rename = "TAG")]
    Tag { id: u64, tag: Tag },
    #[serde(rename = "PHASE")]
    Phase { phase: Phase },
    #[serde(rename = "SWEEP")]
    Sweep { tau_drop: u32, purged: Vec<u64> },
    #[serde(rename = "SCORE")]
    Score {
        pseudo_label: String,
        observed: Vec<u64>,
        tau_promote: i64,
        tau_remove: i64,
        promoted: Vec<u64>,
        demoted: Vec<u64>,
        removed: Vec<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LoggedAction {
    Operation(BankOperation),
    Maintenance(Maintenance),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub op: LoggedAction,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assigned_id: Option<u64>,
}

/// Result of applying one operation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpOutcome {
    pub accepted: bool,
    pub reason: Option<String>,
    pub assigned_id: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifecycleThresholds {
    pub promote: i64,
    pub remove: i64,
}

impl Default for LifecycleThresholds {
    fn default() -> Self {
        Self {
            promote: 5,
            remove: -2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreOutcome {
    pub promoted: Vec<u64>,
    pub demoted: Vec<u64>,
    pub removed: Vec<u64>,
}

/// `τ_drop = ceil(0.10 × training steps)`.
pub fn default_tau_drop(training_steps: usize) -> u32 {
    ((training_steps as u64 * 10).div_ceil(100)) as u32
}

/// Minimum tag mass before the helpful ratio can mark a bullet ambiguous.
pub const AMBIGUITY_MIN_TAGS: u32 = 4;

/// True if a discard sweep with `tau_drop` would purge this bullet. Background
/// bullets are exempt from the harmful-count limit but not from the ambiguity rule.
pub fn should_discard(bullet: &Bullet, tau_drop: u32) -> bool {
    let TagCounts {
        helpful, harmful, ..
    } = bullet.tags;
    let decided = helpful + harmful;
    let ambiguous = decided >= AMBIGUITY_MIN_TAGS && (helpful as f64) / (decided as f64) < 0.5;
    let over_limit = bullet.section != Section::Background && harmful > tau_drop;
    over_limit || ambiguous
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeBank {
    phase: Phase,
    next_id: u64,
    step: u64,
    bullets: BTreeMap<u64, Bullet>,
    op_log: Vec<LogEntry>,
}

impl Default for KnowledgeBank {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotDoc {
    phase: Phase,
    next_id: u64,
    step: u64,
    bullets: Vec<Bullet>,
    op_log: Vec<LogEntry>,
}

impl KnowledgeBank {
    pub fn new() -> Self {
        Self {
            phase: Phase::Warmup,
            next_id: 1,
            step: 0,
            bullets: BTreeMap::new(),
            op_log: Vec::new(),
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Sets the step index stamped on subsequent log entries.
    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
        self.log(LoggedAction::Maintenance(Maintenance::Phase { phase }), true, None, None);
    }

    pub fn len(&self) -> usize {
        self.bullets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bullets.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&Bullet> {
        self.bullets.get(&id)
    }

    /// Bullets in id order.
    pub fn bullets(&self) -> impl Iterator<Item = &Bullet> {
        self.bullets.values()
    }

    pub fn op_log(&self) -> &[LogEntry] {
        &self.op_log
    }

    fn log(
        &mut self,
        op: LoggedAction,
        accepted: bool,
        reason: Option<String>,
        assigned_id: Option<u64>,
    ) {
        self.op_log.push(LogEntry {
            step: self.step,
            op,
            accepted,
            reason,
            assigned_id,
        });
    }

    fn check(&self, op: &BankOperation) -> Result<(), String> {
        let target = |id: &u64| {
            self.bullets
                .get(id)
                .ok_or_else(|| format!("UnknownTarget: no bullet with id {id}"))
        };
        match op {
            BankOperation::Add { content, .. } => {
                if content.trim().is_empty() {
                    return Err("malformed: empty content".into());
                }
            }
            BankOperation::Modify { target_id, content } => {
                let bullet = target(target_id)?;
                if content.trim().is_empty() {
                    return Err("malformed: empty content".into());
                }
                if self.phase == Phase::Test && bullet.tier == Tier::Prototype {
                    return Err("prototype bullets are frozen during testing".into());
                }
            }
            BankOperation::Delete { target_id } => {
                if self.phase == Phase::Test {
                    return Err("DELETE is not allowed during testing".into());
                }
                target(target_id)?;
            }
        }
        Ok(())
    }

    fn apply_one(&mut self, op: &BankOperation) -> OpOutcome {
        if let Err(reason) = self.check(op) {
            self.log(
                LoggedAction::Operation(op.clone()),
                false,
                Some(reason.clone()),
                None,
            );
            return OpOutcome {
                accepted: false,
                reason: Some(reason),
                assigned_id: None,
            };
        }
        let mut assigned_id = None;
        match op {
            BankOperation::Add {
                section,
                content,
                class_scope,
            } => {
                let id = self.next_id;
                self.next_id += 1;
                let (tier, created_phase) = match self.phase {
                    Phase::Test => (Tier::Candidate, Phase::Test),
                    p => (Tier::Prototype, p),
                };
                self.bullets.insert(
                    id,
                    Bullet {
                        id,
                        section: *section,
                        content: content.trim().to_string(),
                        tags: TagCounts::default(),
                        tier,
                        score: 0,
                        created_phase,
                        created_step: self.step,
                        class_scope: class_scope.clone(),
                    },
                );
                assigned_id = Some(id);
            }
            BankOperation::Modify { target_id, content } => {
                if let Some(b) = self.bullets.get_mut(target_id) {
                    b.content = content.trim().to_string();
                }
            }
            BankOperation::Delete { target_id } => {
                self.bullets.remove(target_id);
            }
        }
        self.log(LoggedAction::Operation(op.clone()), true, None, assigned_id);
        OpOutcome {
            accepted: true,
            reason: None,
            assigned_id,
        }
    }

    /// Applies operations in order; rejected ones are skipped and logged.
    pub fn apply(&mut self, ops: &[BankOperation]) -> Vec<OpOutcome> {
        ops.iter().map(|op| self.apply_one(op)).collect()
    }

    /// Increments one tag counter per entry. Unknown ids, and prototype
    /// bullets during testing, are logged and skipped. Returns the number
    /// of tags counted.
    pub fn record_tags(&mut self, tags: &[(u64, Tag)]) -> usize {
        let mut counted = 0;
        for &(id, tag) in tags {
            let action = LoggedAction::Maintenance(Maintenance::Tag { id, tag });
            let phase = self.phase;
            match self.bullets.get_mut(&id) {
                None => self.log(action, false, Some(format!("UnknownTarget: no bullet with id {id}")), None),
                Some(b) if phase == Phase::Test && b.tier == Tier::Prototype => self.log(
                    action,
                    false,
                    Some("prototype bullets are frozen during testing".into()),
                    None,
                ),
                Some(b) => {
                    b.tags.bump(tag);
                    counted += 1;
                    self.log(action, true, None, None);
                }
            }
        }
        counted
    }

    /// Purges spurious bullets at the end of training. See [`should_discard`].
    pub fn discard_sweep(&mut self, tau_drop: u32) -> Result<Vec<u64>, BankError> {
        if self.phase != Phase::Train {
            return Err(BankError::WrongPhase {
                expected: Phase::Train,
                actual: self.phase,
            });
        }
        let purged: Vec<u64> = self
            .bullets
            .values()
            .filter(|b| should_discard(b, tau_drop))
            .map(|b| b.id)
            .collect();
        for id in &purged {
            self.bullets.remove(id);
        }
        self.log(
            LoggedAction::Maintenance(Maintenance::Sweep {
                tau_drop,
                purged: purged.clone(),
            }),
            true,
            None,
            None,
        );
        Ok(purged)
    }

    /// Accepted helpful/harmful tags per bullet within the current step.
    fn tags_this_step(&self) -> BTreeMap<u64, (i64, i64)> {
        let mut out: BTreeMap<u64, (i64, i64)> = BTreeMap::new();
        for entry in self.op_log.iter().rev().take_while(|e| e.step == self.step) {
            if let (true, LoggedAction::Maintenance(Maintenance::Tag { id, tag })) =
                (entry.accepted, &entry.op)
            {
                let e = out.entry(*id).or_default();
                match tag {
                    Tag::Helpful => e.0 += 1,
                    Tag::Harmful => e.1 += 1,
                    Tag::Neutral => {}
                }
            }
        }
        out
    }

    /// Deferred test-time update.
    ///
    /// Candidates scoped to `pseudo_label` (and created before this step)
    /// gain +1 when observed and lose 1 otherwise; reaching `promote`
    /// promotes them to reference, reaching `remove` deletes them.
    /// Reference bullets move by +1/−1 per helpful/harmful tag recorded in
    /// this step and fall back to candidate once below `promote`.
    pub fn update_candidate_scores(
        &mut self,
        pseudo_label: &str,
        observed_ids: &BTreeSet<u64>,
        thresholds: LifecycleThresholds,
    ) -> Result<ScoreOutcome, BankError> {
        if self.phase != Phase::Test {
            return Err(BankError::WrongPhase {
                expected: Phase::Test,
                actual: self.phase,
            });
        }
        let tags = self.tags_this_step();
        let step = self.step;
        let references: Vec<u64> = self
            .bullets
            .values()
            .filter(|b| b.tier == Tier::Reference)
            .map(|b| b.id)
            .collect();
        let candidates: Vec<u64> = self
            .bullets
            .values()
            .filter(|b| {
                b.tier == Tier::Candidate && b.in_scope(pseudo_label) && b.created_step < step
            })
            .map(|b| b.id)
            .collect();

        let mut outcome = ScoreOutcome::default();
        for id in candidates {
            let b = self.bullets.get_mut(&id).expect("candidate exists");
            b.score += if observed_ids.contains(&id) { 1 } else { -1 };
            if b.score >= thresholds.promote {
                b.tier = Tier::Reference;
                outcome.promoted.push(id);
            } else if b.score <= thresholds.remove {
                self.bullets.remove(&id);
                outcome.removed.push(id);
            }
        }
        for id in references {
            let b = self.bullets.get_mut(&id).expect("reference exists");
            let (helpful, harmful) = tags.get(&id).copied().unwrap_or((0, 0));
            b.score += helpful - harmful;
            if b.score < thresholds.promote {
                b.tier = Tier::Candidate;
                outcome.demoted.push(id);
            }
        }

        let observed: Vec<u64> = observed_ids
            .iter()
            .copied()
            .filter(|id| {
                self.bullets
                    .get(id)
                    .map_or(outcome.removed.contains(id), |b| b.tier != Tier::Prototype)
            })
            .collect();
        self.log(
            LoggedAction::Maintenance(Maintenance::Score {
                pseudo_label: pseudo_label.to_string(),
                observed,
                tau_promote: thresholds.promote,
                tau_remove: thresholds.remove,
                promoted: outcome.promoted.clone(),
                demoted: outcome.demoted.clone(),
                removed: outcome.removed.clone(),
            }),
            true,
            None,
            None,
        );
        Ok(outcome)
    }

    fn render(&self, include_candidates: bool) -> String {
        let mut out = String::new();
        for (i, section) in Section::ALL.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str("## ");
            out.push_str(section.header());
            out.push('\n');
            let in_section = |tier: Tier| {
                self.bullets
                    .values()
                    .filter(move |b| b.section == *section && b.tier == tier)
            };
            for b in in_section(Tier::Prototype) {
                out.push_str(&format!("[{}] {}\n", b.id, b.content));
            }
            let mut refs = in_section(Tier::Reference).peekable();
            if refs.peek().is_some() {
                out.push_str("(suspicious but informative reference)\n");
                for b in refs {
                    out.push_str(&format!("[{}] {}\n", b.id, b.content));
                }
            }
            if include_candidates {
                let mut cands = in_section(Tier::Candidate).peekable();
                if cands.peek().is_some() {
                    out.push_str("(candidate knowledge under validation, hidden from the predictor)\n");
                    for b in cands {
                        out.push_str(&format!("[{}] {}\n", b.id, b.content));
                    }
                }
            }
        }
        out
    }

    /// Prompt text shown to the Generator. Candidate bullets never appear.
    pub fn render_context(&self) -> String {
        self.render(false)
    }

    /// Prompt text for the Reflector and Modifier, which additionally see
    /// candidate bullets so they can confirm or refine them.
    pub fn render_curator_context(&self) -> String {
        self.render(true)
    }

    /// Ids that appear in [`render_context`](Self::render_context).
    pub fn rendered_ids(&self) -> BTreeSet<u64> {
        self.bullets
            .values()
            .filter(|b| b.tier != Tier::Candidate)
            .map(|b| b.id)
            .collect()
    }

    /// Ids that appear in the curator rendering.
    pub fn curator_ids(&self) -> BTreeSet<u64> {
        self.bullets.keys().copied().collect()
    }

    /// Whitespace word count of the Generator-facing rendering.
    pub fn token_count(&self) -> usize {
        self.render_context().split_whitespace().count()
    }

    pub fn snapshot(&self) -> String {
        let doc = SnapshotDoc {
            phase: self.phase,
            next_id: self.next_id,
            step: self.step,
            bullets: self.bullets.values().cloned().collect(),
            op_log: self.op_log.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("bank serializes")
    }

    pub fn restore(text: &str) -> Result<Self, BankError> {
        let doc: SnapshotDoc =
            serde_json::from_str(text).map_err(|e| BankError::CorruptSnapshot(e.to_string()))?;
        let mut bullets = BTreeMap::new();
        for b in doc.bullets {
            if b.id >= doc.next_id {
                return Err(BankError::CorruptSnapshot(format!(
                    "bullet id {} is not below next_id {}",
                    b.id, doc.next_id
                )));
            }
            let proto_phase = matches!(b.created_phase, Phase::Warmup | Phase::Train);
            if (b.tier == Tier::Prototype) != proto_phase {
                return Err(BankError::CorruptSnapshot(format!(
                    "bullet {} has tier {:?} but was created in {}",
                    b.id, b.tier, b.created_phase
                )));
            }
            let id = b.id;
            if bullets.insert(id, b).is_some() {
                return Err(BankError::CorruptSnapshot(format!("duplicate bullet id {id}")));
            }
        }
        Ok(Self {
            phase: doc.phase,
            next_id: doc.next_id,
            step: doc.step,
            bullets,
            op_log: doc.op_log,
        })
    }

    /// Rebuilds a bank from an empty warmup state by re-executing `log`.
    pub fn replay(log: &[LogEntry]) -> Self {
        let mut bank = KnowledgeBank::new();
        for entry in log {
            bank.step = entry.step;
            match &entry.op {
                LoggedAction::Operation(op) => {
                    bank.apply_one(op);
                }
                LoggedAction::Maintenance(Maintenance::Tag { id, tag }) => {
                    bank.record_tags(&[(*id, *tag)]);
                }
                LoggedAction::Maintenance(Maintenance::Phase { phase }) => bank.set_phase(*phase),
                LoggedAction::Maintenance(Maintenance::Sweep { tau_drop, .. }) => {
                    let _ = bank.discard_sweep(*tau_drop);
                }
                LoggedAction::Maintenance(Maintenance::Score {
                    pseudo_label,
                    observed,
                    tau_promote,
                    tau_remove,
                    ..
                }) => {
                    let observed: BTreeSet<u64> = observed.iter().copied().collect();
                    let _ = bank.update_candidate_scores(
                        pseudo_label,
                        &observed,
                        LifecycleThresholds {
                            promote: *tau_promote,
                            remove: *tau_remove,
                        },
                    );
                }
            }
        }
        bank
    }
}
