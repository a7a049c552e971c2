//! The Generator, Reflector and Modifier roles plus the warmup describers.
//! Each role builds a prompt from its template, sends it through
//! [`call_with_repair`] and parses the reply into a typed output.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::bank::{BankOperation, Section, Tag};
use crate::data::{z_normalize, Dataset, TimeSeriesSample};
use crate::error::{ExtractError, RetrievalError, RoleFailure};
use crate::features::{summarize, SeparabilityReport};
use crate::plot::{ImageCache, PlotConfig};
use crate::prompt::{render, Slot, TemplateKind, Templates};
use crate::vlm::{call_with_repair, extract_json, VlmClient, VlmRequest, DEFAULT_SCHEMA_RETRIES, DEFAULT_TEMPERATURE};

pub const GENERATOR_KEYS: [&str; 3] = ["reasoning", "bullet_ids", "final_answer"];
pub const REFLECT_CORRECT_KEYS: [&str; 4] = ["reasoning", "key_insight", "advice", "bullet_tags"];
pub const REFLECT_INCORRECT_KEYS: [&str; 5] = [
    "error_identification",
    "root_cause_analysis",
    "correct_reasoning",
    "key_insight",
    "bullet_tags",
];
pub const MODIFIER_KEYS: [&str; 2] = ["reasoning", "operations"];
pub const DESCRIPTOR_KEYS: [&str; 1] = ["descriptors"];

/// Dataset-level facts shown to every role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskContext {
    pub dataset_name: String,
    pub dataset_description: String,
    pub labels: Vec<String>,
    pub series_length: usize,
    pub channels: usize,
}

impl TaskContext {
    pub fn from_dataset(ds: &Dataset) -> Self {
        Self {
            dataset_name: ds.name.clone(),
            dataset_description: ds.description.clone(),
            labels: ds.label_set.clone(),
            series_length: ds.series_length(),
            channels: ds.channels(),
        }
    }

    pub fn render(&self) -> String {
        format!(
            "Dataset name: {}\nDescription: {}\nNumber of classes: {}\nClass labels: {}\n\
             Sequence length: {}\nNumber of channels: {}",
            self.dataset_name,
            self.dataset_description,
            self.labels.len(),
            self.labels.join(", "),
            self.series_length,
            self.channels
        )
    }

    /// Exact label match, falling back to a unique case-insensitive match.
    pub fn resolve_label(&self, answer: &str) -> Option<&str> {
        let answer = answer.trim();
        if let Some(l) = self.labels.iter().find(|l| l.as_str() == answer) {
            return Some(l);
        }
        let mut folded = self.labels.iter().filter(|l| l.eq_ignore_ascii_case(answer));
        match (folded.next(), folded.next()) {
            (Some(l), None) => Some(l),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorOutput {
    pub reasoning: String,
    pub bullet_ids: Vec<u64>,
    pub final_answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BulletTag {
    pub id: u64,
    pub tag: Tag,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "case", rename_all = "snake_case")]
pub enum ReflectionOutput {
    Correct {
        reasoning: String,
        key_insight: String,
        advice: String,
        bullet_tags: Vec<BulletTag>,
    },
    Incorrect {
        error_identification: String,
        root_cause_analysis: String,
        correct_reasoning: String,
        key_insight: String,
        bullet_tags: Vec<BulletTag>,
    },
}

impl ReflectionOutput {
    pub fn bullet_tags(&self) -> &[BulletTag] {
        match self {
            ReflectionOutput::Correct { bullet_tags, .. }
            | ReflectionOutput::Incorrect { bullet_tags, .. } => bullet_tags,
        }
    }

    pub fn key_insight(&self) -> &str {
        match self {
            ReflectionOutput::Correct { key_insight, .. }
            | ReflectionOutput::Incorrect { key_insight, .. } => key_insight,
        }
    }

    pub fn is_correct_case(&self) -> bool {
        matches!(self, ReflectionOutput::Correct { .. })
    }

    /// The reflection as shown to the Modifier, without the case marker.
    pub fn prompt_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("reflection serializes");
        if let Value::Object(map) = &mut v {
            map.remove("case");
        }
        serde_json::to_string_pretty(&v).expect("value serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModifierOutput {
    pub reasoning: String,
    pub operations: Vec<BankOperation>,
    /// Descriptions of operation entries that failed validation.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastPair {
    /// Pool sample of the true class.
    pub hard_positive: TimeSeriesSample,
    /// Pool sample of the predicted class.
    pub hard_negative: TimeSeriesSample,
}

/// Output token budgets per role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoleBudgets {
    pub generator: u32,
    pub reflector: u32,
    pub modifier: u32,
    pub warmup: u32,
}

impl Default for RoleBudgets {
    fn default() -> Self {
        Self {
            generator: 4096,
            reflector: 4096,
            modifier: 4096,
            warmup: 4096,
        }
    }
}

fn text_field(doc: &Map<String, Value>, key: &str) -> String {
    match doc.get(key) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None => String::new(),
        Some(other) => other.to_string(),
    }
}

fn id_value(v: &Value) -> Option<u64> {
    match v {
        Value::Number(n) => n.as_u64(),
        Value::String(s) => s.trim().trim_start_matches('[').trim_end_matches(']').trim().parse().ok(),
        _ => None,
    }
}

pub fn parse_generator(doc: &Map<String, Value>) -> Result<GeneratorOutput, ExtractError> {
    let ids = match &doc["bullet_ids"] {
        Value::Array(items) => items
            .iter()
            .map(|v| id_value(v).ok_or_else(|| ExtractError::Schema(format!("bullet id {v} is not an integer"))))
            .collect::<Result<Vec<_>, _>>()?,
        Value::Null => Vec::new(),
        other => return Err(ExtractError::Schema(format!("bullet_ids must be a list, got {other}"))),
    };
    let final_answer = match &doc["final_answer"] {
        Value::String(s) => s.trim().to_string(),
        Value::Number(n) => n.to_string(),
        other => return Err(ExtractError::Schema(format!("final_answer must be a string, got {other}"))),
    };
    Ok(GeneratorOutput {
        reasoning: text_field(doc, "reasoning"),
        bullet_ids: ids,
        final_answer,
    })
}

fn parse_bullet_tags(doc: &Map<String, Value>) -> Result<Vec<BulletTag>, ExtractError> {
    let items = match &doc["bullet_tags"] {
        Value::Array(items) => items,
        Value::Null => return Ok(Vec::new()),
        other => return Err(ExtractError::Schema(format!("bullet_tags must be a list, got {other}"))),
    };
    items
        .iter()
        .map(|item| {
            let obj = item
                .as_object()
                .ok_or_else(|| ExtractError::Schema(format!("bullet tag {item} is not an object")))?;
            let id = obj
                .get("id")
                .and_then(id_value)
                .ok_or_else(|| ExtractError::Schema(format!("bullet tag {item} has no integer id")))?;
            let raw_tag = obj.get("tag").and_then(Value::as_str).unwrap_or_default();
            let tag = Tag::parse(raw_tag)
                .ok_or_else(|| ExtractError::Schema(format!("tag {raw_tag:?} is not helpful, harmful or neutral")))?;
            Ok(BulletTag {
                id,
                tag,
                reason: text_field(obj, "reason"),
            })
        })
        .collect()
}

pub fn parse_reflect_correct(doc: &Map<String, Value>) -> Result<ReflectionOutput, ExtractError> {
    Ok(ReflectionOutput::Correct {
        reasoning: text_field(doc, "reasoning"),
        key_insight: text_field(doc, "key_insight"),
        advice: text_field(doc, "advice"),
        bullet_tags: parse_bullet_tags(doc)?,
    })
}

pub fn parse_reflect_incorrect(doc: &Map<String, Value>) -> Result<ReflectionOutput, ExtractError> {
    Ok(ReflectionOutput::Incorrect {
        error_identification: text_field(doc, "error_identification"),
        root_cause_analysis: text_field(doc, "root_cause_analysis"),
        correct_reasoning: text_field(doc, "correct_reasoning"),
        key_insight: text_field(doc, "key_insight"),
        bullet_tags: parse_bullet_tags(doc)?,
    })
}

fn parse_operation(item: &Value, scope: &[String]) -> Result<BankOperation, String> {
    let obj = item.as_object().ok_or("operation is not an object")?;
    let kind = ["kind", "type", "operation", "op"]
        .iter()
        .find_map(|k| obj.get(*k).and_then(Value::as_str))
        .ok_or("operation has no kind")?
        .trim()
        .to_uppercase();
    let content = || -> Result<String, String> {
        match obj.get("content").and_then(Value::as_str).map(str::trim) {
            Some(c) if !c.is_empty() => Ok(c.to_string()),
            _ => Err(format!("{kind} without content")),
        }
    };
    let target = || obj.get("target_id").and_then(id_value).ok_or(format!("{kind} without target_id"));
    match kind.as_str() {
        "ADD" => {
            let raw = obj.get("section").and_then(Value::as_str).ok_or("ADD without section")?;
            let section = Section::parse_loose(raw).ok_or(format!("unknown section {raw:?}"))?;
            Ok(BankOperation::Add {
                section,
                content: content()?,
                class_scope: scope.to_vec(),
            })
        }
        "MODIFY" => Ok(BankOperation::Modify {
            target_id: target()?,
            content: content()?,
        }),
        "DELETE" => Ok(BankOperation::Delete { target_id: target()? }),
        other => Err(format!("unknown operation kind {other:?}")),
    }
}

/// Parses the Modifier reply; malformed operation entries are dropped and
/// described in `dropped`. ADDs receive `scope` as their class scope.
pub fn parse_modifier(doc: &Map<String, Value>, scope: &[String]) -> Result<ModifierOutput, ExtractError> {
    let items = match &doc["operations"] {
        Value::Array(items) => items.as_slice(),
        Value::Null => &[],
        other => return Err(ExtractError::Schema(format!("operations must be a list, got {other}"))),
    };
    let mut operations = Vec::new();
    let mut dropped = Vec::new();
    for item in items {
        match parse_operation(item, scope) {
            Ok(op) => operations.push(op),
            Err(reason) => {
                log::warn!("modifier: dropping operation {item}: {reason}");
                dropped.push(format!("{reason}: {item}"));
            }
        }
    }
    Ok(ModifierOutput {
        reasoning: text_field(doc, "reasoning"),
        operations,
        dropped,
    })
}

pub fn parse_descriptors(doc: &Map<String, Value>) -> Result<Vec<String>, ExtractError> {
    match &doc["descriptors"] {
        Value::Array(items) => Ok(items
            .iter()
            .filter_map(|v| match v {
                Value::String(s) if !s.trim().is_empty() => Some(s.trim().to_string()),
                Value::String(_) | Value::Null => None,
                other => Some(other.to_string()),
            })
            .collect()),
        Value::String(s) => Ok(s
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect()),
        other => Err(ExtractError::Schema(format!("descriptors must be a list, got {other}"))),
    }
}

fn distance(a: &TimeSeriesSample, b: &TimeSeriesSample) -> f64 {
    let (za, zb) = (z_normalize(a), z_normalize(b));
    za.values
        .iter()
        .zip(&zb.values)
        .flat_map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| (x - y).powi(2)))
        .sum::<f64>()
        .sqrt()
}

fn nearest<'a>(
    query: &TimeSeriesSample,
    label: &str,
    pool: &[&'a TimeSeriesSample],
) -> Result<&'a TimeSeriesSample, RetrievalError> {
    pool.iter()
        .filter(|s| s.label == label)
        .map(|s| (distance(query, s), *s))
        .min_by(|(da, sa), (db, sb)| da.total_cmp(db).then_with(|| sa.sample_id.cmp(&sb.sample_id)))
        .map(|(_, s)| s)
        .ok_or_else(|| RetrievalError::MissingClass(label.to_string()))
}

/// Nearest pool sample to the query, by z-normalized Euclidean distance,
/// from each of the true and the predicted class. Ties go to the smallest
/// sample id.
pub fn retrieve_contrast_pair(
    query: &TimeSeriesSample,
    predicted: &str,
    truth: &str,
    pool: &[&TimeSeriesSample],
) -> Result<ContrastPair, RetrievalError> {
    if predicted == truth {
        return Err(RetrievalError::SameLabel(truth.to_string()));
    }
    Ok(ContrastPair {
        hard_positive: nearest(query, truth, pool)?.clone(),
        hard_negative: nearest(query, predicted, pool)?.clone(),
    })
}

/// Everything the roles need besides per-call inputs.
pub struct Agents<'a> {
    pub client: &'a dyn VlmClient,
    pub templates: &'a Templates,
    pub images: &'a ImageCache,
    pub plot: &'a PlotConfig,
    pub ctx: &'a TaskContext,
    pub temperature: f64,
    pub r_schema: u32,
    pub budgets: RoleBudgets,
}

/// Bank rendering plus the ids it shows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BankView {
    pub text: String,
    pub ids: BTreeSet<u64>,
}

impl<'a> Agents<'a> {
    pub fn new(
        client: &'a dyn VlmClient,
        templates: &'a Templates,
        images: &'a ImageCache,
        plot: &'a PlotConfig,
        ctx: &'a TaskContext,
    ) -> Self {
        Self {
            client,
            templates,
            images,
            plot,
            ctx,
            temperature: DEFAULT_TEMPERATURE,
            r_schema: DEFAULT_SCHEMA_RETRIES,
            budgets: RoleBudgets::default(),
        }
    }

    fn request(
        &self,
        role: &str,
        kind: TemplateKind,
        tag: &str,
        max_output: u32,
        slots: BTreeMap<&str, Slot>,
    ) -> Result<VlmRequest, RoleFailure> {
        let mut base = VlmRequest::new(tag);
        base.temperature = self.temperature;
        base.max_output = max_output;
        render(self.templates.get(kind), &slots, base).map_err(|e| RoleFailure::Input {
            role: role.into(),
            message: e.to_string(),
        })
    }

    fn image(&self, role: &str, sample: &TimeSeriesSample) -> Result<Vec<u8>, RoleFailure> {
        self.images.render(sample, self.plot).map_err(|e| RoleFailure::Input {
            role: role.into(),
            message: format!("rendering {}: {e}", sample.sample_id),
        })
    }

    fn query_stats(&self, role: &str, sample: &TimeSeriesSample) -> Result<String, RoleFailure> {
        summarize(sample).map(|s| s.render()).map_err(|e| RoleFailure::Input {
            role: role.into(),
            message: format!("summarizing {}: {e}", sample.sample_id),
        })
    }

    fn common_slots(
        &self,
        role: &str,
        query: &TimeSeriesSample,
        bank: &BankView,
    ) -> Result<BTreeMap<&'static str, Slot>, RoleFailure> {
        Ok(BTreeMap::from([
            ("dataset_information", Slot::Text(self.ctx.render())),
            ("query_stats", Slot::Text(self.query_stats(role, query)?)),
            ("knowledge_bank", Slot::Text(bank.text.clone())),
            ("query_image", Slot::Images(vec![self.image(role, query)?])),
        ]))
    }

    pub fn first_pass_request(&self, query: &TimeSeriesSample, bank: &BankView, tag: &str) -> Result<VlmRequest, RoleFailure> {
        let slots = self.common_slots("generator", query, bank)?;
        self.request("generator", TemplateKind::GeneratorFirstPass, tag, self.budgets.generator, slots)
    }

    pub fn second_pass_request(
        &self,
        query: &TimeSeriesSample,
        bank: &BankView,
        first: &GeneratorOutput,
        tag: &str,
    ) -> Result<VlmRequest, RoleFailure> {
        let mut slots = self.common_slots("generator", query, bank)?;
        slots.insert("first_pass_output", Slot::Text(first_pass_text(first)));
        self.request("generator", TemplateKind::GeneratorSecondPass, tag, self.budgets.generator, slots)
    }

    fn run_generator(&self, request: VlmRequest, bank: &BankView) -> Result<GeneratorOutput, RoleFailure> {
        let role = "generator";
        let (mut out, mut transcripts) =
            call_with_repair(self.client, &request, &GENERATOR_KEYS, self.r_schema, role, parse_generator)?;
        if self.ctx.resolve_label(&out.final_answer).is_none() {
            let mut retry = request.clone();
            retry.push_text(format!(
                "\n\nYour final_answer {:?} is not a valid label. The valid labels are: {}. \
                 Reply with JSON only and use one of these labels exactly.",
                out.final_answer,
                self.ctx.labels.join(", ")
            ));
            let response = self.client.send(&retry).map_err(|source| RoleFailure::Transport {
                role: role.into(),
                source,
                transcripts: transcripts.clone(),
            })?;
            transcripts.push(response.raw_text.clone());
            match extract_json(&response.raw_text, &GENERATOR_KEYS).and_then(|d| parse_generator(&d)) {
                Ok(fixed) if self.ctx.resolve_label(&fixed.final_answer).is_some() => out = fixed,
                Ok(fixed) => {
                    return Err(RoleFailure::InvalidLabel {
                        role: role.into(),
                        answer: fixed.final_answer,
                        transcripts,
                    })
                }
                Err(_) => {
                    return Err(RoleFailure::InvalidLabel {
                        role: role.into(),
                        answer: out.final_answer,
                        transcripts,
                    })
                }
            }
        }
        out.final_answer = self
            .ctx
            .resolve_label(&out.final_answer)
            .expect("label checked above")
            .to_string();
        let (kept, unknown): (Vec<u64>, Vec<u64>) = out.bullet_ids.iter().partition(|id| bank.ids.contains(id));
        if !unknown.is_empty() {
            log::warn!("{}: cited ids not in the bank: {unknown:?}", request.request_tag);
        }
        out.bullet_ids = kept;
        Ok(out)
    }

    pub fn generate_first_pass(&self, query: &TimeSeriesSample, bank: &BankView, tag: &str) -> Result<GeneratorOutput, RoleFailure> {
        let request = self.first_pass_request(query, bank, tag)?;
        self.run_generator(request, bank)
    }

    pub fn generate_second_pass(
        &self,
        query: &TimeSeriesSample,
        bank: &BankView,
        first: &GeneratorOutput,
        tag: &str,
    ) -> Result<GeneratorOutput, RoleFailure> {
        let request = self.second_pass_request(query, bank, first, tag)?;
        self.run_generator(request, bank)
    }

    pub fn reflect_correct_request(
        &self,
        query: &TimeSeriesSample,
        bank: &BankView,
        gen: &GeneratorOutput,
        truth: &str,
        tag: &str,
    ) -> Result<VlmRequest, RoleFailure> {
        let mut slots = self.common_slots("reflector", query, bank)?;
        slots.insert("execution_details", Slot::Text(execution_details(gen, truth)));
        self.request("reflector", TemplateKind::ReflectorCorrect, tag, self.budgets.reflector, slots)
    }

    pub fn reflect_correct(
        &self,
        query: &TimeSeriesSample,
        bank: &BankView,
        gen: &GeneratorOutput,
        truth: &str,
        tag: &str,
    ) -> Result<ReflectionOutput, RoleFailure> {
        let request = self.reflect_correct_request(query, bank, gen, truth, tag)?;
        call_with_repair(self.client, &request, &REFLECT_CORRECT_KEYS, self.r_schema, "reflector", parse_reflect_correct)
            .map(|(out, _)| out)
    }

    pub fn reflect_incorrect_request(
        &self,
        query: &TimeSeriesSample,
        bank: &BankView,
        gen: &GeneratorOutput,
        truth: &str,
        contrast: &ContrastPair,
        tag: &str,
    ) -> Result<VlmRequest, RoleFailure> {
        let role = "reflector";
        let mut slots = self.common_slots(role, query, bank)?;
        slots.insert("execution_details", Slot::Text(execution_details(gen, truth)));
        let (positive, negative) = self
            .images
            .render_pair(&contrast.hard_positive, &contrast.hard_negative, self.plot)
            .map_err(|e| RoleFailure::Input {
                role: role.into(),
                message: format!("rendering contrast pair: {e}"),
            })?;
        slots.insert("predict_label_image", Slot::Images(vec![negative]));
        slots.insert("truth_label_image", Slot::Images(vec![positive]));
        self.request(role, TemplateKind::ReflectorIncorrect, tag, self.budgets.reflector, slots)
    }

    pub fn reflect_incorrect(
        &self,
        query: &TimeSeriesSample,
        bank: &BankView,
        gen: &GeneratorOutput,
        truth: &str,
        contrast: &ContrastPair,
        tag: &str,
    ) -> Result<ReflectionOutput, RoleFailure> {
        let request = self.reflect_incorrect_request(query, bank, gen, truth, contrast, tag)?;
        call_with_repair(self.client, &request, &REFLECT_INCORRECT_KEYS, self.r_schema, "reflector", parse_reflect_incorrect)
            .map(|(out, _)| out)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn curate_request(
        &self,
        query: &TimeSeriesSample,
        bank: &BankView,
        gen: &GeneratorOutput,
        truth: &str,
        reflection: &ReflectionOutput,
        tag: &str,
    ) -> Result<VlmRequest, RoleFailure> {
        let mut slots = self.common_slots("modifier", query, bank)?;
        slots.insert("execution_details", Slot::Text(execution_details(gen, truth)));
        slots.insert("reflection", Slot::Text(reflection.prompt_json()));
        self.request("modifier", TemplateKind::Modifier, tag, self.budgets.modifier, slots)
    }

    /// `scope` becomes the class scope of every ADD.
    #[allow(clippy::too_many_arguments)]
    pub fn curate(
        &self,
        query: &TimeSeriesSample,
        bank: &BankView,
        gen: &GeneratorOutput,
        truth: &str,
        reflection: &ReflectionOutput,
        scope: &[String],
        tag: &str,
    ) -> Result<ModifierOutput, RoleFailure> {
        let request = self.curate_request(query, bank, gen, truth, reflection, tag)?;
        call_with_repair(self.client, &request, &MODIFIER_KEYS, self.r_schema, "modifier", |d| parse_modifier(d, scope))
            .map(|(out, _)| out)
    }

    /// One request showing all of a class's samples.
    pub fn describe_class(&self, label: &str, samples: &[&TimeSeriesSample], tag: &str) -> Result<Vec<String>, RoleFailure> {
        let role = "warmup";
        let mut stats = Vec::new();
        let mut images = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            stats.push(format!("Sample {} ({}):\n{}", i + 1, s.sample_id, self.query_stats(role, s)?));
            images.push(self.image(role, s)?);
        }
        let slots = BTreeMap::from([
            ("dataset_information", Slot::Text(self.ctx.render())),
            ("class_label", Slot::Text(label.to_string())),
            ("class_stats", Slot::Text(stats.join("\n"))),
            ("class_images", Slot::Images(images)),
        ]);
        let request = self.request(role, TemplateKind::WarmupIntraClass, tag, self.budgets.warmup, slots)?;
        call_with_repair(self.client, &request, &DESCRIPTOR_KEYS, self.r_schema, role, parse_descriptors).map(|(d, _)| d)
    }

    /// Optional model-written contrast of two classes.
    pub fn contrast_classes(
        &self,
        report: &SeparabilityReport,
        samples_a: &[&TimeSeriesSample],
        samples_b: &[&TimeSeriesSample],
        tag: &str,
    ) -> Result<Vec<String>, RoleFailure> {
        let role = "warmup";
        let render_all = |samples: &[&TimeSeriesSample]| -> Result<Vec<Vec<u8>>, RoleFailure> {
            samples.iter().map(|s| self.image(role, s)).collect()
        };
        let (a, b) = &report.class_pair;
        let slots = BTreeMap::from([
            ("dataset_information", Slot::Text(self.ctx.render())),
            ("separating_features", Slot::Text(report.descriptors().join("\n"))),
            ("class_a", Slot::Text(a.clone())),
            ("class_b", Slot::Text(b.clone())),
            ("class_a_images", Slot::Images(render_all(samples_a)?)),
            ("class_b_images", Slot::Images(render_all(samples_b)?)),
        ]);
        let request = self.request(role, TemplateKind::WarmupInterClass, tag, self.budgets.warmup, slots)?;
        call_with_repair(self.client, &request, &DESCRIPTOR_KEYS, self.r_schema, role, parse_descriptors).map(|(d, _)| d)
    }
}

/// How a first-pass output appears inside the second-pass prompt.
pub fn first_pass_text(first: &GeneratorOutput) -> String {
    serde_json::to_string_pretty(first).expect("generator output serializes")
}

pub fn execution_details(gen: &GeneratorOutput, truth: &str) -> String {
    format!(
        "Truth label: {truth}\nPredicted label: {}\nGenerator output:\n{}",
        gen.final_answer,
        first_pass_text(gen)
    )
}
