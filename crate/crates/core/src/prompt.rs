//! Prompt templates with named `{slot}` placeholders.
//!
//! Built-in templates are compiled in; a directory containing files with
//! the same names overrides them. `{{` and `}}` produce literal braces.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::vlm::{Part, VlmRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TemplateKind {
    GeneratorFirstPass,
    GeneratorSecondPass,
    ReflectorCorrect,
    ReflectorIncorrect,
    Modifier,
    WarmupIntraClass,
    WarmupInterClass,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 7] = [
        TemplateKind::GeneratorFirstPass,
        TemplateKind::GeneratorSecondPass,
        TemplateKind::ReflectorCorrect,
        TemplateKind::ReflectorIncorrect,
        TemplateKind::Modifier,
        TemplateKind::WarmupIntraClass,
        TemplateKind::WarmupInterClass,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateKind::GeneratorFirstPass => "generator_first_pass.md",
            TemplateKind::GeneratorSecondPass => "generator_second_pass.md",
            TemplateKind::ReflectorCorrect => "reflector_correct.md",
            TemplateKind::ReflectorIncorrect => "reflector_incorrect.md",
            TemplateKind::Modifier => "modifier.md",
            TemplateKind::WarmupIntraClass => "warmup_intra_class.md",
            TemplateKind::WarmupInterClass => "warmup_inter_class.md",
        }
    }

    pub fn builtin(self) -> &'static str {
        match self {
            TemplateKind::GeneratorFirstPass => include_str!("../templates/generator_first_pass.md"),
            TemplateKind::GeneratorSecondPass => include_str!("../templates/generator_second_pass.md"),
            TemplateKind::ReflectorCorrect => include_str!("../templates/reflector_correct.md"),
            TemplateKind::ReflectorIncorrect => include_str!("../templates/reflector_incorrect.md"),
            TemplateKind::Modifier => include_str!("../templates/modifier.md"),
            TemplateKind::WarmupIntraClass => include_str!("../templates/warmup_intra_class.md"),
            TemplateKind::WarmupInterClass => include_str!("../templates/warmup_inter_class.md"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    texts: BTreeMap<TemplateKind, String>,
}

impl Default for Templates {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Templates {
    pub fn builtin() -> Self {
        Self {
            texts: TemplateKind::ALL
                .iter()
                .map(|k| (*k, k.builtin().to_string()))
                .collect(),
        }
    }

    /// Built-ins overridden by any same-named file in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self> {
        let mut templates = Self::builtin();
        for kind in TemplateKind::ALL {
            let path = dir.join(kind.file_name());
            if path.is_file() {
                let text = std::fs::read_to_string(&path).map_err(crate::error::io_err(&path))?;
                parse(&text)?;
                templates.texts.insert(kind, text);
            }
        }
        Ok(templates)
    }

    pub fn get(&self, kind: TemplateKind) -> &str {
        &self.texts[&kind]
    }

    pub fn set(&mut self, kind: TemplateKind, text: String) -> Result<()> {
        parse(&text)?;
        self.texts.insert(kind, text);
        Ok(())
    }
}

/// Value bound to a placeholder.
#[derive(Debug, Clone, PartialEq)]
pub enum Slot {
    Text(String),
    /// PNG images inserted in order, each on its own part.
    Images(Vec<Vec<u8>>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece<'a> {
    Literal(String),
    Slot(&'a str),
}

fn parse(template: &str) -> Result<Vec<Piece<'_>>> {
    let mut pieces = Vec::new();
    let mut literal = String::new();
    let mut rest = template;
    while let Some(pos) = rest.find(['{', '}']) {
        literal.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if tail.starts_with("{{") {
            literal.push('{');
            rest = &tail[2..];
        } else if tail.starts_with("}}") {
            literal.push('}');
            rest = &tail[2..];
        } else if tail.starts_with('}') {
            return Err(Error::Template(format!("unmatched '}}' at byte {}", template.len() - tail.len())));
        } else {
            let end = tail
                .find('}')
                .ok_or_else(|| Error::Template("unterminated placeholder".into()))?;
            let name = &tail[1..end];
            if name.is_empty() || !name.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_') {
                return Err(Error::Template(format!("invalid placeholder {{{name}}}")));
            }
            if !literal.is_empty() {
                pieces.push(Piece::Literal(std::mem::take(&mut literal)));
            }
            pieces.push(Piece::Slot(name));
            rest = &tail[end + 1..];
        }
    }
    literal.push_str(rest);
    if !literal.is_empty() {
        pieces.push(Piece::Literal(literal));
    }
    Ok(pieces)
}

/// Placeholder names in order of appearance.
pub fn placeholders(template: &str) -> Result<Vec<String>> {
    Ok(parse(template)?
        .into_iter()
        .filter_map(|p| match p {
            Piece::Slot(name) => Some(name.to_string()),
            Piece::Literal(_) => None,
        })
        .collect())
}

/// Fills every placeholder in one pass; substituted text is never
/// re-scanned. Missing or unused slot values are errors.
pub fn render(template: &str, slots: &BTreeMap<&str, Slot>, request: VlmRequest) -> Result<VlmRequest> {
    let pieces = parse(template)?;
    let mut request = request;
    let mut used = std::collections::BTreeSet::new();
    for piece in pieces {
        match piece {
            Piece::Literal(text) => request.push_text(text),
            Piece::Slot(name) => {
                let value = slots
                    .get(name)
                    .ok_or_else(|| Error::Template(format!("no value for slot {{{name}}}")))?;
                used.insert(name);
                match value {
                    Slot::Text(text) => request.push_text(text.clone()),
                    Slot::Images(images) => {
                        for bytes in images {
                            request.parts.push(Part::Image {
                                media_type: "image/png".into(),
                                bytes: bytes.clone(),
                            });
                        }
                    }
                }
            }
        }
    }
    if let Some(unused) = slots.keys().find(|k| !used.contains(*k)) {
        return Err(Error::Template(format!("slot {{{unused}}} is not in the template")));
    }
    Ok(request)
}

/// `### ` header lines of a template, in order.
pub fn section_headers(template: &str) -> Vec<&str> {
    template
        .lines()
        .filter(|l| l.starts_with("### "))
        .collect()
}
