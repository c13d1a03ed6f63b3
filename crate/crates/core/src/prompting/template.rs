//! `{name}` placeholders are required, `{name?}` optional; `{{` and `}}` are
//! literal braces. A `{` that does not open a well-formed placeholder is kept
//! as text.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use super::PromptError;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot { name: String, optional: bool },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
    pub required_placeholders: BTreeSet<String>,
    segments: Vec<Segment>,
}

fn is_ident(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Self {
        let body = body.into();
        let mut segments = Vec::new();
        let mut text = String::new();
        let mut rest = body.as_str();
        while let Some(c) = rest.chars().next() {
            if rest.starts_with("{{") || rest.starts_with("}}") {
                text.push(c);
                rest = &rest[2..];
                continue;
            }
            if c == '{' {
                let inner = &rest[1..];
                let ident_len = inner.find(|ch: char| !is_ident(ch)).unwrap_or(inner.len());
                let after = &inner[ident_len..];
                let (optional, close) = if after.starts_with("?}") {
                    (true, 2)
                } else if after.starts_with('}') {
                    (false, 1)
                } else {
                    (false, 0)
                };
                if ident_len > 0 && close > 0 {
                    if !text.is_empty() {
                        segments.push(Segment::Text(std::mem::take(&mut text)));
                    }
                    segments.push(Segment::Slot {
                        name: inner[..ident_len].to_string(),
                        optional,
                    });
                    rest = &after[close..];
                    continue;
                }
            }
            text.push(c);
            rest = &rest[c.len_utf8()..];
        }
        if !text.is_empty() {
            segments.push(Segment::Text(text));
        }
        let required_placeholders = segments
            .iter()
            .filter_map(|s| match s {
                Segment::Slot { name, optional: false } => Some(name.clone()),
                _ => None,
            })
            .collect();
        PromptTemplate {
            name: name.into(),
            body,
            required_placeholders,
            segments,
        }
    }

    /// All placeholder names, required or optional.
    pub fn placeholders(&self) -> BTreeSet<&str> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Slot { name, .. } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Substitutes bindings. Unused bindings are ignored; unbound optional
    /// placeholders render empty.
    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.body.len());
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot { name, optional } => match bindings.get(name) {
                    Some(v) => out.push_str(v),
                    None if *optional => {}
                    None => {
                        return Err(PromptError::Render {
                            placeholder: name.clone(),
                        })
                    }
                },
            }
        }
        Ok(out)
    }

    /// Loads `<dir>/<name>.txt`.
    pub fn load(dir: &Path, name: &str) -> Result<Self, PromptError> {
        let path = dir.join(format!("{name}.txt"));
        let body = fs::read_to_string(&path)
            .map_err(|e| PromptError::Template(format!("{}: {e}", path.display())))?;
        Ok(PromptTemplate::new(name, body))
    }
}

pub fn render(template: &PromptTemplate, bindings: &BTreeMap<String, String>) -> Result<String, PromptError> {
    template.render(bindings)
}

/// Default template bodies shipped with the crate.
pub mod defaults {
    pub const ZERO_SHOT: &str = include_str!("../../templates/zero_shot.txt");
    pub const SEQUENTIAL_STAGE1: &str = include_str!("../../templates/sequential_stage1.txt");
    pub const SEQUENTIAL_STAGE2: &str = include_str!("../../templates/sequential_stage2.txt");
    pub const FINETUNED: &str = include_str!("../../templates/finetuned.txt");
    pub const FINETUNE_INSTRUCTION: &str = include_str!("../../templates/finetune_instruction.txt");

    /// (file stem, body) for every default template.
    pub const ALL: [(&str, &str); 5] = [
        ("zero_shot", ZERO_SHOT),
        ("sequential_stage1", SEQUENTIAL_STAGE1),
        ("sequential_stage2", SEQUENTIAL_STAGE2),
        ("finetuned", FINETUNED),
        ("finetune_instruction", FINETUNE_INSTRUCTION),
    ];
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn substitutes_required_placeholder() {
        let t = PromptTemplate::new("t", "List objects in {image_hint}.");
        assert_eq!(
            t.render(&bind(&[("image_hint", "the frame")])).unwrap(),
            "List objects in the frame."
        );
    }

    #[test]
    fn missing_required_binding_names_it() {
        let t = PromptTemplate::new("t", "List objects in {image_hint}.");
        assert_eq!(
            t.render(&bind(&[])),
            Err(PromptError::Render { placeholder: "image_hint".into() })
        );
    }

    #[test]
    fn extra_bindings_ignored_optional_empty() {
        let t = PromptTemplate::new("t", "A{x}B{note?}C");
        assert_eq!(t.render(&bind(&[("x", "1"), ("unused", "z")])).unwrap(), "A1BC");
        assert_eq!(t.required_placeholders, BTreeSet::from(["x".to_string()]));
        assert_eq!(t.placeholders(), BTreeSet::from(["x", "note"]));
    }

    #[test]
    fn braces_escape_and_stray_braces_are_literal() {
        let t = PromptTemplate::new("t", "json {{\"k\": {v}}} and { spaced } and {bad-name}");
        assert_eq!(
            t.render(&bind(&[("v", "1")])).unwrap(),
            "json {\"k\": 1} and { spaced } and {bad-name}"
        );
        assert_eq!(t.required_placeholders.len(), 1);
    }

    #[test]
    fn non_ascii_text_survives() {
        let t = PromptTemplate::new("t", "Ünïcødé → {x} ✓");
        assert_eq!(t.render(&bind(&[("x", "é")])).unwrap(), "Ünïcødé → é ✓");
    }

    #[test]
    fn default_templates_have_expected_slots() {
        assert!(PromptTemplate::new("z", defaults::ZERO_SHOT).required_placeholders.is_empty());
        assert!(PromptTemplate::new("s1", defaults::SEQUENTIAL_STAGE1).required_placeholders.is_empty());
        let s2 = PromptTemplate::new("s2", defaults::SEQUENTIAL_STAGE2);
        for slot in ["objects", "texts", "relations"] {
            assert!(s2.required_placeholders.contains(slot), "{slot}");
        }
    }
}
