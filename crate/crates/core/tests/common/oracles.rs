//! Independent reference implementations used as test oracles.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;

use tsckb::bank::{
    BankOperation, Bullet, KnowledgeBank, LifecycleThresholds, Phase, Section, Tag, TagCounts, Tier,
};
use tsckb::features::ChannelStats;

// ---------------------------------------------------------------------------
// Knowledge bank model

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBullet {
    pub section: Section,
    pub content: String,
    pub tier: Tier,
    pub score: i64,
    pub helpful: u32,
    pub harmful: u32,
    pub neutral: u32,
    pub created_step: u64,
    pub scope: Vec<String>,
}

/// Straight-line re-statement of the bank rules over plain maps.
#[derive(Debug, Clone)]
pub struct BankModel {
    pub phase: Phase,
    pub step: u64,
    pub next_id: u64,
    pub bullets: BTreeMap<u64, ModelBullet>,
    /// Accepted (helpful, harmful) tags since the last step change.
    pub step_tags: BTreeMap<u64, (i64, i64)>,
}

#[derive(Debug, Clone)]
pub enum Action {
    Ops(Vec<BankOperation>),
    Tags(Vec<(u64, Tag)>),
    NextStep,
    Advance,
    Sweep(u32),
    Score { label: String, observed: BTreeSet<u64> },
}

pub const LABELS: [&str; 2] = ["a", "b"];

impl Default for BankModel {
    fn default() -> Self {
        Self {
            phase: Phase::Warmup,
            step: 0,
            next_id: 1,
            bullets: BTreeMap::new(),
            step_tags: BTreeMap::new(),
        }
    }
}

/// Discard rule written out directly from its definition.
pub fn discard_rule(section: Section, helpful: u32, harmful: u32, tau_drop: u32) -> bool {
    let total = helpful + harmful;
    let too_harmful = harmful > tau_drop && section != Section::Background;
    let ambiguous = total >= 4 && 2 * helpful < total;
    too_harmful || ambiguous
}

impl BankModel {
    /// Returns `(accepted, assigned_id)`.
    pub fn apply(&mut self, op: &BankOperation) -> (bool, Option<u64>) {
        match op {
            BankOperation::Add { section, content, class_scope } => {
                if content.trim().is_empty() {
                    return (false, None);
                }
                let id = self.next_id;
                self.next_id += 1;
                let tier = if self.phase == Phase::Test { Tier::Candidate } else { Tier::Prototype };
                self.bullets.insert(
                    id,
                    ModelBullet {
                        section: *section,
                        content: content.trim().to_string(),
                        tier,
                        score: 0,
                        helpful: 0,
                        harmful: 0,
                        neutral: 0,
                        created_step: self.step,
                        scope: class_scope.clone(),
                    },
                );
                (true, Some(id))
            }
            BankOperation::Modify { target_id, content } => {
                let test = self.phase == Phase::Test;
                match self.bullets.get_mut(target_id) {
                    Some(b) if !content.trim().is_empty() && !(test && b.tier == Tier::Prototype) => {
                        b.content = content.trim().to_string();
                        (true, None)
                    }
                    _ => (false, None),
                }
            }
            BankOperation::Delete { target_id } => {
                if self.phase == Phase::Test {
                    return (false, None);
                }
                (self.bullets.remove(target_id).is_some(), None)
            }
        }
    }

    pub fn tag(&mut self, id: u64, tag: Tag) -> bool {
        let test = self.phase == Phase::Test;
        let Some(b) = self.bullets.get_mut(&id) else { return false };
        if test && b.tier == Tier::Prototype {
            return false;
        }
        let entry = self.step_tags.entry(id).or_default();
        match tag {
            Tag::Helpful => {
                b.helpful += 1;
                entry.0 += 1;
            }
            Tag::Harmful => {
                b.harmful += 1;
                entry.1 += 1;
            }
            Tag::Neutral => b.neutral += 1,
        }
        true
    }

    pub fn next_step(&mut self) {
        self.step += 1;
        self.step_tags.clear();
    }

    pub fn advance(&mut self) -> Option<Phase> {
        let next = match self.phase {
            Phase::Warmup => Phase::Train,
            Phase::Train => Phase::Test,
            Phase::Test => return None,
        };
        self.phase = next;
        Some(next)
    }

    /// `None` when the phase forbids a sweep.
    pub fn sweep(&mut self, tau_drop: u32) -> Option<Vec<u64>> {
        if self.phase != Phase::Train {
            return None;
        }
        let purged: Vec<u64> = self
            .bullets
            .iter()
            .filter(|(_, b)| discard_rule(b.section, b.helpful, b.harmful, tau_drop))
            .map(|(id, _)| *id)
            .collect();
        for id in &purged {
            self.bullets.remove(id);
        }
        Some(purged)
    }

    /// `None` when the phase forbids scoring; otherwise
    /// `(promoted, demoted, removed)`.
    pub fn score(
        &mut self,
        label: &str,
        observed: &BTreeSet<u64>,
        t: LifecycleThresholds,
    ) -> Option<(Vec<u64>, Vec<u64>, Vec<u64>)> {
        if self.phase != Phase::Test {
            return None;
        }
        let refs: Vec<u64> = self
            .bullets
            .iter()
            .filter(|(_, b)| b.tier == Tier::Reference)
            .map(|(id, _)| *id)
            .collect();
        let (mut promoted, mut demoted, mut removed) = (vec![], vec![], vec![]);
        let ids: Vec<u64> = self.bullets.keys().copied().collect();
        for id in ids {
            let b = &self.bullets[&id];
            if b.tier != Tier::Candidate || !b.scope.iter().any(|s| s == label) || b.created_step >= self.step {
                continue;
            }
            let b = self.bullets.get_mut(&id).unwrap();
            b.score += if observed.contains(&id) { 1 } else { -1 };
            if b.score >= t.promote {
                b.tier = Tier::Reference;
                promoted.push(id);
            } else if b.score <= t.remove {
                self.bullets.remove(&id);
                removed.push(id);
            }
        }
        for id in refs {
            let (h, x) = self.step_tags.get(&id).copied().unwrap_or_default();
            let b = self.bullets.get_mut(&id).unwrap();
            b.score += h - x;
            if b.score < t.promote {
                b.tier = Tier::Candidate;
                demoted.push(id);
            }
        }
        Some((promoted, demoted, removed))
    }

    /// Field-by-field comparison with a real bank.
    pub fn diff(&self, bank: &KnowledgeBank) -> Option<String> {
        if bank.phase() != self.phase || bank.next_id() != self.next_id || bank.step() != self.step {
            return Some(format!(
                "header: bank ({}, {}, {}) model ({}, {}, {})",
                bank.phase(),
                bank.next_id(),
                bank.step(),
                self.phase,
                self.next_id,
                self.step
            ));
        }
        let ids: Vec<u64> = bank.bullets().map(|b| b.id).collect();
        let model_ids: Vec<u64> = self.bullets.keys().copied().collect();
        if ids != model_ids {
            return Some(format!("ids: bank {ids:?} model {model_ids:?}"));
        }
        for b in bank.bullets() {
            let m = &self.bullets[&b.id];
            let same = b.section == m.section
                && b.content == m.content
                && b.tier == m.tier
                && b.score == m.score
                && b.tags
                    == TagCounts {
                        helpful: m.helpful,
                        harmful: m.harmful,
                        neutral: m.neutral,
                    }
                && b.created_step == m.created_step
                && b.class_scope == m.scope;
            if !same {
                return Some(format!("bullet {}: bank {b:?} model {m:?}", b.id));
            }
        }
        None
    }
}

const CONTENTS: [&str; 6] = ["alpha", "  padded  ", "", "   ", "beta gamma", "delta"];

pub fn random_op<R: Rng>(rng: &mut R, model: &BankModel) -> BankOperation {
    let target = rng.gen_range(1..=model.next_id + 1);
    let content = |rng: &mut R| {
        let c = *CONTENTS.choose(rng).unwrap();
        if c.trim().is_empty() {
            c.to_string()
        } else {
            format!("{c} {}", rng.gen_range(0..1000))
        }
    };
    match rng.gen_range(0..10) {
        0..=4 => BankOperation::Add {
            section: *Section::ALL.choose(rng).unwrap(),
            content: content(rng),
            class_scope: LABELS
                .iter()
                .filter(|_| rng.gen_bool(0.6))
                .map(|s| s.to_string())
                .collect(),
        },
        5..=7 => BankOperation::Modify {
            target_id: target,
            content: content(rng),
        },
        _ => BankOperation::Delete { target_id: target },
    }
}

pub fn random_tag<R: Rng>(rng: &mut R) -> Tag {
    match rng.gen_range(0..5) {
        0 | 1 => Tag::Helpful,
        2 | 3 => Tag::Harmful,
        _ => Tag::Neutral,
    }
}

pub fn random_action<R: Rng>(rng: &mut R, model: &BankModel) -> Action {
    let id = |rng: &mut R| rng.gen_range(1..=model.next_id + 1);
    match rng.gen_range(0..100) {
        0..=34 => Action::Ops((0..rng.gen_range(1..=4)).map(|_| random_op(rng, model)).collect()),
        35..=59 => Action::Tags((0..rng.gen_range(1..=4)).map(|_| (id(rng), random_tag(rng))).collect()),
        60..=74 => Action::NextStep,
        75..=81 => Action::Advance,
        82..=89 => Action::Sweep(rng.gen_range(0..=3)),
        _ => Action::Score {
            label: LABELS.choose(rng).unwrap().to_string(),
            observed: (1..model.next_id).filter(|_| rng.gen_bool(0.5)).collect(),
        },
    }
}

pub fn prototypes(bank: &KnowledgeBank) -> Vec<Bullet> {
    bank.bullets().filter(|b| b.tier == Tier::Prototype).cloned().collect()
}

/// Runs one random action sequence against the bank and the model,
/// checking every bank invariant along the way.
pub fn check_bank_sequence<R: Rng>(rng: &mut R, len: usize) -> Result<(), String> {
    let thresholds = LifecycleThresholds::default();
    let mut bank = KnowledgeBank::new();
    let mut model = BankModel::default();
    let mut issued: BTreeSet<u64> = BTreeSet::new();
    let mut frozen: Option<Vec<Bullet>> = None;

    for i in 0..len {
        let action = random_action(rng, &model);
        match &action {
            Action::Ops(ops) => {
                let mut folded = bank.clone();
                for op in ops {
                    folded.apply(std::slice::from_ref(op));
                }
                let outcomes = bank.apply(ops);
                if folded != bank {
                    return Err(format!("step {i}: batch and one-by-one application differ for {ops:?}"));
                }
                for (op, out) in ops.iter().zip(&outcomes) {
                    let (accepted, assigned) = model.apply(op);
                    if (out.accepted, out.assigned_id) != (accepted, assigned) {
                        return Err(format!("step {i}: {op:?} gave {out:?}, model ({accepted}, {assigned:?})"));
                    }
                    if matches!(op, BankOperation::Delete { .. }) && bank.phase() == Phase::Test && out.accepted {
                        return Err(format!("step {i}: DELETE accepted during testing"));
                    }
                    if let Some(id) = out.assigned_id {
                        if issued.iter().next_back().is_some_and(|&max| id <= max) || !issued.insert(id) {
                            return Err(format!("step {i}: id {id} reused or not increasing"));
                        }
                    }
                }
            }
            Action::Tags(tags) => {
                let counted = bank.record_tags(tags);
                let expected = tags.iter().filter(|(id, t)| model.tag(*id, *t)).count();
                if counted != expected {
                    return Err(format!("step {i}: counted {counted} tags, model {expected}"));
                }
            }
            Action::NextStep => {
                model.next_step();
                bank.set_step(model.step);
            }
            Action::Advance => {
                if let Some(p) = model.advance() {
                    bank.set_phase(p);
                    if p == Phase::Test {
                        frozen = Some(prototypes(&bank));
                    }
                }
            }
            Action::Sweep(tau) => {
                let got = bank.discard_sweep(*tau).ok();
                let want = model.sweep(*tau);
                if got != want {
                    return Err(format!("step {i}: sweep({tau}) gave {got:?}, model {want:?}"));
                }
            }
            Action::Score { label, observed } => {
                let got = bank
                    .update_candidate_scores(label, observed, thresholds)
                    .ok()
                    .map(|o| (o.promoted, o.demoted, o.removed));
                let want = model.score(label, observed, thresholds);
                if got != want {
                    return Err(format!("step {i}: score({label}) gave {got:?}, model {want:?}"));
                }
            }
        }
        if let Some(d) = model.diff(&bank) {
            return Err(format!("step {i} after {action:?}: {d}"));
        }
        if let Some(frozen) = &frozen {
            if &prototypes(&bank) != frozen {
                return Err(format!("step {i}: a prototype changed during testing"));
            }
        }
        if i % 8 == 7 || i + 1 == len {
            let text = bank.snapshot();
            let restored = KnowledgeBank::restore(&text).map_err(|e| format!("step {i}: restore failed: {e}"))?;
            if restored != bank || restored.snapshot() != text {
                return Err(format!("step {i}: snapshot round trip changed the bank"));
            }
        }
    }
    let mut replayed = KnowledgeBank::replay(bank.op_log());
    replayed.set_step(bank.step());
    if replayed != bank {
        return Err("replaying the op log did not reproduce the bank".into());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Numeric oracles

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

pub fn hand_fisher(a: &[f64], b: &[f64]) -> f64 {
    let stats = |xs: &[f64]| {
        let n = xs.len() as f64;
        let mut sum = 0.0;
        for x in xs {
            sum += x;
        }
        let mu = sum / n;
        let mut ss = 0.0;
        for x in xs {
            ss += (x - mu) * (x - mu);
        }
        (mu, ss / n)
    };
    let (ma, va) = stats(a);
    let (mb, vb) = stats(b);
    (ma - mb) * (ma - mb) / (va + vb + 1e-12)
}

/// Naive per-channel statistics.
pub fn naive_stats(xs: &[f64]) -> ChannelStats {
    let n = xs.len();
    let nf = n as f64;
    let mut min = xs[0];
    let mut max = xs[0];
    let mut sum = 0.0;
    for &x in xs {
        if x < min {
            min = x;
        }
        if x > max {
            max = x;
        }
        sum += x;
    }
    let mean = sum / nf;
    let variance = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / nf;
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };

    let slope = (n >= 2).then(|| {
        let (mut st, mut sx, mut stt, mut stx) = (0.0, 0.0, 0.0, 0.0);
        for (t, &x) in xs.iter().enumerate() {
            let t = t as f64;
            st += t;
            sx += x;
            stt += t * t;
            stx += t * x;
        }
        (nf * stx - st * sx) / (nf * stt - st * st)
    });

    let mut crossings = 0;
    for i in 1..n {
        let (p, q) = (xs[i - 1] - mean, xs[i] - mean);
        if (p < 0.0 && q > 0.0) || (p > 0.0 && q < 0.0) {
            crossings += 1;
        }
    }

    let energy: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    let r = |lag: usize| -> f64 {
        let mut s = 0.0;
        for i in 0..n.saturating_sub(lag) {
            s += (xs[i] - mean) * (xs[i + lag] - mean);
        }
        s / energy
    };
    let mut period = None;
    let mut best = f64::NEG_INFINITY;
    if n >= 4 && energy > 0.0 {
        for lag in 2..=n / 2 {
            let v = r(lag);
            if r(lag - 1) < v && v >= r(lag + 1) && v > 0.0 && v > best {
                best = v;
                period = Some(lag);
            }
        }
    }

    ChannelStats {
        min,
        max,
        mean,
        variance,
        std_dev: variance.sqrt(),
        median,
        dominant_period: period,
        slope,
        mean_crossings: crossings,
    }
}

pub fn stats_close(a: &ChannelStats, b: &ChannelStats, tol: f64) -> bool {
    let opt = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (Some(x), Some(y)) => close(x, y, tol),
        (None, None) => true,
        _ => false,
    };
    close(a.min, b.min, tol)
        && close(a.max, b.max, tol)
        && close(a.mean, b.mean, tol)
        && close(a.variance, b.variance, tol)
        && close(a.std_dev, b.std_dev, tol)
        && close(a.median, b.median, tol)
        && opt(a.slope, b.slope)
        && a.mean_crossings == b.mean_crossings
        && a.dominant_period == b.dominant_period
}

// ---------------------------------------------------------------------------
// Images

/// Decodes an 8-bit RGB PNG into `(width, height, pixels)`.
pub fn decode_rgb(bytes: &[u8]) -> (usize, usize, Vec<[u8; 3]>) {
    let mut reader = png::Decoder::new(bytes).read_info().expect("png header");
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).expect("png frame");
    assert_eq!(info.color_type, png::ColorType::Rgb);
    let pixels = buf[..info.buffer_size()].chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    (info.width as usize, info.height as usize, pixels)
}
