//! Stage-1 block format:
//!
//! ```text
//! OBJECTS:
//! 1. television
//! TEXTS:
//! 1. "NETFLIX" @O1
//! RELATIONS:
//! 1. T1 -> O1: displayed on television screen
//! ```
//!
//! Item numbers on the wire are 1-based; indices in [`ExtractionResult`] are
//! 0-based positions in the lists. Parsing is tolerant: unusable items are
//! dropped one at a time and the result is flagged `malformed`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEntity {
    pub literal: String,
    /// Index into `objects` of the object carrying the text.
    pub carrier: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub text_index: usize,
    pub object_index: usize,
    pub phrase: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub image_id: String,
    pub objects: Vec<String>,
    pub texts: Vec<TextEntity>,
    pub relations: Vec<Relation>,
    pub malformed: bool,
}

const NONE_MARKER: &str = "(none)";

impl ExtractionResult {
    pub fn empty(image_id: impl Into<String>, malformed: bool) -> Self {
        ExtractionResult {
            image_id: image_id.into(),
            objects: Vec::new(),
            texts: Vec::new(),
            relations: Vec::new(),
            malformed,
        }
    }

    /// Number of objects.
    pub fn n(&self) -> usize {
        self.objects.len()
    }

    /// Number of texts.
    pub fn m(&self) -> usize {
        self.texts.len()
    }

    /// Number of relations.
    pub fn n_r(&self) -> usize {
        self.relations.len()
    }

    /// True when every carrier and relation index is in range.
    pub fn indices_valid(&self) -> bool {
        self.texts
            .iter()
            .all(|t| t.carrier.is_none_or(|c| c < self.objects.len()))
            && self
                .relations
                .iter()
                .all(|r| r.text_index < self.texts.len() && r.object_index < self.objects.len())
    }

    pub fn objects_section(&self) -> String {
        section_lines(self.objects.iter().map(|o| o.clone()))
    }

    pub fn texts_section(&self) -> String {
        section_lines(self.texts.iter().map(|t| {
            let quoted = serde_json::to_string(&t.literal).expect("string serializes");
            match t.carrier {
                Some(c) => format!("{quoted} @O{}", c + 1),
                None => quoted,
            }
        }))
    }

    pub fn relations_section(&self) -> String {
        section_lines(self.relations.iter().map(|r| {
            format!("T{} -> O{}: {}", r.text_index + 1, r.object_index + 1, r.phrase)
        }))
    }

    /// The full block, parseable by [`parse_extraction`].
    pub fn to_block(&self) -> String {
        format!(
            "OBJECTS:\n{}\nTEXTS:\n{}\nRELATIONS:\n{}\n",
            self.objects_section(),
            self.texts_section(),
            self.relations_section()
        )
    }
}

fn section_lines(items: impl Iterator<Item = String>) -> String {
    let lines: Vec<String> = items
        .enumerate()
        .map(|(i, s)| format!("{}. {s}", i + 1))
        .collect();
    if lines.is_empty() {
        NONE_MARKER.to_string()
    } else {
        lines.join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Objects,
    Texts,
    Relations,
}

/// Recognizes a section heading, tolerating markdown decoration.
fn heading(line: &str) -> Option<Section> {
    let core = line
        .trim()
        .trim_matches(|c: char| c == '#' || c == '*' || c == '_' || c.is_whitespace());
    let upper = core.to_ascii_uppercase();
    let word = upper.strip_suffix(':').unwrap_or(&upper).trim_end_matches(['*', '_']);
    let word = word.strip_suffix(':').unwrap_or(word).trim();
    match word {
        "OBJECTS" => Some(Section::Objects),
        "TEXTS" => Some(Section::Texts),
        "RELATIONS" => Some(Section::Relations),
        _ => None,
    }
}

/// Splits "12. rest" or "12) rest" into (12, "rest").
fn numbered_item(line: &str) -> Option<(usize, &str)> {
    let line = line.trim_start().trim_start_matches(['-', '*']).trim_start();
    let digits = line.find(|c: char| !c.is_ascii_digit()).unwrap_or(line.len());
    if digits == 0 {
        return None;
    }
    let number = line[..digits].parse().ok()?;
    let rest = &line[digits..];
    let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?;
    Some((number, rest.trim()))
}

/// Parses "<letter><digits>" at the start of `s`, returning the number and the rest.
fn reference(s: &str, letter: char) -> Option<(usize, &str)> {
    let s = s.trim_start();
    let mut chars = s.chars();
    if !chars.next()?.eq_ignore_ascii_case(&letter) {
        return None;
    }
    let body = &s[1..];
    let digits = body.find(|c: char| !c.is_ascii_digit()).unwrap_or(body.len());
    if digits == 0 {
        return None;
    }
    Some((body[..digits].parse().ok()?, &body[digits..]))
}

struct RawText {
    literal: String,
    carrier: Option<usize>,
}

struct RawRelation {
    text: usize,
    object: usize,
    phrase: String,
}

fn parse_text_item(content: &str) -> Option<RawText> {
    let (literal, rest) = if content.starts_with('"') {
        let mut stream = serde_json::Deserializer::from_str(content).into_iter::<String>();
        match stream.next() {
            Some(Ok(s)) => {
                let offset = stream.byte_offset();
                (s, &content[offset..])
            }
            _ => return None,
        }
    } else {
        match content.rfind(" @") {
            Some(at) => (content[..at].trim().to_string(), &content[at..]),
            None => (content.trim().to_string(), ""),
        }
    };
    let rest = rest.trim();
    let carrier = if rest.is_empty() {
        None
    } else {
        let (n, tail) = reference(rest.strip_prefix('@')?, 'O')?;
        if !tail.trim().is_empty() {
            return None;
        }
        Some(n)
    };
    Some(RawText { literal, carrier })
}

fn parse_relation_item(content: &str) -> Option<RawRelation> {
    let (text, rest) = reference(content, 'T')?;
    let rest = rest.trim_start();
    let rest = rest.strip_prefix("->").unwrap_or(rest);
    let (object, rest) = reference(rest, 'O')?;
    let phrase = rest.trim_start().strip_prefix(':')?.trim();
    if phrase.is_empty() {
        return None;
    }
    Some(RawRelation {
        text,
        object,
        phrase: phrase.to_string(),
    })
}

/// Parses a stage-1 response. Never fails; problems set `malformed`.
pub fn parse_extraction(text: &str, image_id: &str) -> ExtractionResult {
    let mut seen = [false; 3];
    let mut malformed = false;
    let mut section = None;
    let mut objects: Vec<(usize, String)> = Vec::new();
    let mut texts: Vec<(usize, RawText)> = Vec::new();
    let mut relations: Vec<RawRelation> = Vec::new();

    for line in text.lines() {
        if let Some(s) = heading(line) {
            let slot = s as usize;
            if seen[slot] {
                malformed = true;
            }
            seen[slot] = true;
            section = Some(s);
            continue;
        }
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.eq_ignore_ascii_case(NONE_MARKER) {
            continue;
        }
        let Some(current) = section else {
            // Preamble before the first heading.
            continue;
        };
        let Some((number, content)) = numbered_item(line) else {
            malformed = true;
            continue;
        };
        match current {
            Section::Objects => {
                if content.is_empty() || objects.iter().any(|(n, _)| *n == number) {
                    malformed = true;
                } else {
                    objects.push((number, content.to_string()));
                }
            }
            Section::Texts => match parse_text_item(content) {
                Some(t) if !texts.iter().any(|(n, _)| *n == number) => texts.push((number, t)),
                _ => malformed = true,
            },
            Section::Relations => match parse_relation_item(content) {
                Some(r) => relations.push(r),
                None => malformed = true,
            },
        }
    }

    if seen.iter().any(|s| !s) {
        malformed = true;
    }
    if !seen.iter().any(|s| *s) {
        return ExtractionResult::empty(image_id, true);
    }

    let object_index: HashMap<usize, usize> =
        objects.iter().enumerate().map(|(i, (n, _))| (*n, i)).collect();
    let text_index: HashMap<usize, usize> =
        texts.iter().enumerate().map(|(i, (n, _))| (*n, i)).collect();

    let texts = texts
        .into_iter()
        .map(|(_, t)| {
            let carrier = t.carrier.and_then(|n| {
                let found = object_index.get(&n).copied();
                if found.is_none() {
                    malformed = true;
                }
                found
            });
            TextEntity {
                literal: t.literal,
                carrier,
            }
        })
        .collect();
    let relations = relations
        .into_iter()
        .filter_map(|r| {
            match (text_index.get(&r.text), object_index.get(&r.object)) {
                (Some(&t), Some(&o)) => Some(Relation {
                    text_index: t,
                    object_index: o,
                    phrase: r.phrase,
                }),
                _ => {
                    malformed = true;
                    None
                }
            }
        })
        .collect();

    ExtractionResult {
        image_id: image_id.to_string(),
        objects: objects.into_iter().map(|(_, o)| o).collect(),
        texts,
        relations,
        malformed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const NETFLIX: &str = "OBJECTS:\n1. television\n2. living room couch\nTEXTS:\n1. \"NETFLIX\" @O1\nRELATIONS:\n1. T1 -> O1: displayed on television screen\n";

    #[test]
    fn parses_two_objects_one_text_one_relation() {
        let r = parse_extraction(NETFLIX, "img");
        assert!(!r.malformed);
        assert_eq!((r.n(), r.m(), r.n_r()), (2, 1, 1));
        assert_eq!(r.texts[0], TextEntity { literal: "NETFLIX".into(), carrier: Some(0) });
        assert_eq!(r.relations[0].phrase, "displayed on television screen");
    }

    #[test]
    fn out_of_range_relation_dropped_others_kept() {
        let text = "OBJECTS:\n1. sign\nTEXTS:\n1. \"OPEN\"\nRELATIONS:\n1. T1 -> O1: painted on\n2. T1 -> O7: floating near\n";
        let r = parse_extraction(text, "img");
        assert!(r.malformed);
        assert_eq!(r.n_r(), 1);
        assert_eq!(r.relations[0].object_index, 0);
        assert!(r.indices_valid());
    }

    #[test]
    fn empty_response_is_empty_and_malformed() {
        assert_eq!(parse_extraction("", "x"), ExtractionResult::empty("x", true));
        assert_eq!(
            parse_extraction("I see a cat on a mat.", "x"),
            ExtractionResult::empty("x", true)
        );
    }

    #[test]
    fn tolerates_markdown_headings_and_unquoted_texts() {
        let text = "Sure!\n**OBJECTS:**\n1) bus\n## TEXTS\n1. Route 5 @O1\nRELATIONS:\n(none)\n";
        let r = parse_extraction(text, "b");
        assert!(!r.malformed, "{r:?}");
        assert_eq!(r.objects, vec!["bus"]);
        assert_eq!(r.texts[0].literal, "Route 5");
        assert_eq!(r.texts[0].carrier, Some(0));
    }

    #[test]
    fn bad_carrier_clears_reference() {
        let text = "OBJECTS:\n(none)\nTEXTS:\n1. \"SALE\" @O3\nRELATIONS:\n(none)\n";
        let r = parse_extraction(text, "s");
        assert!(r.malformed);
        assert_eq!(r.texts[0].carrier, None);
    }

    #[test]
    fn relation_numbers_follow_listed_numbering() {
        let text = "OBJECTS:\n3. cup\nTEXTS:\n5. \"MUG\"\nRELATIONS:\n1. T5 O3: printed on\n";
        let r = parse_extraction(text, "c");
        assert!(!r.malformed);
        assert_eq!(r.relations, vec![Relation { text_index: 0, object_index: 0, phrase: "printed on".into() }]);
    }

    #[test]
    fn empty_sections_serialize_as_none() {
        let r = ExtractionResult::empty("e", false);
        assert_eq!(r.to_block(), "OBJECTS:\n(none)\nTEXTS:\n(none)\nRELATIONS:\n(none)\n");
        assert_eq!(parse_extraction(&r.to_block(), "e"), r);
    }

    fn arb_extraction() -> impl Strategy<Value = ExtractionResult> {
        let object = "[a-zA-Z0-9][a-zA-Z0-9 ,'-]{0,20}[a-zA-Z0-9]";
        let literal = "\\PC{0,24}";
        let phrase = "[a-z][a-z ]{0,20}[a-z]";
        (
            prop::collection::vec(object, 0..5),
            prop::collection::vec((literal, any::<prop::sample::Index>(), any::<bool>()), 0..5),
            prop::collection::vec(
                (any::<prop::sample::Index>(), any::<prop::sample::Index>(), phrase),
                0..5,
            ),
        )
            .prop_map(|(objects, raw_texts, raw_rel)| {
                let texts: Vec<TextEntity> = raw_texts
                    .into_iter()
                    .map(|(literal, idx, has)| TextEntity {
                        literal,
                        carrier: (has && !objects.is_empty()).then(|| idx.index(objects.len())),
                    })
                    .collect();
                let relations = if objects.is_empty() || texts.is_empty() {
                    Vec::new()
                } else {
                    raw_rel
                        .into_iter()
                        .map(|(t, o, phrase)| Relation {
                            text_index: t.index(texts.len()),
                            object_index: o.index(objects.len()),
                            phrase,
                        })
                        .collect()
                };
                ExtractionResult {
                    image_id: "img".into(),
                    objects,
                    texts,
                    relations,
                    malformed: false,
                }
            })
    }

    proptest! {
        #[test]
        fn block_round_trips(r in arb_extraction(), preamble in "Here[a-z .]{0,30}") {
            let response = format!("{preamble}\n{}\nThat is all.", r.to_block());
            let parsed = parse_extraction(&format!("{preamble}\n{}", r.to_block()), "img");
            prop_assert_eq!(&parsed, &r);
            // Trailing prose lands in RELATIONS as an unnumbered line.
            let with_tail = parse_extraction(&response, "img");
            prop_assert_eq!(&with_tail.objects, &r.objects);
            prop_assert!(with_tail.indices_valid());
        }

        #[test]
        fn parse_never_panics_and_indices_in_range(s in "\\PC{0,200}") {
            let r = parse_extraction(&s, "q");
            prop_assert!(r.indices_valid());
        }
    }
}
