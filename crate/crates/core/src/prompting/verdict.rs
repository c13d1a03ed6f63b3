use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::BinaryLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    ZeroShot,
    Sequential,
    Fusion,
    Finetuned,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::ZeroShot,
        StrategyKind::Sequential,
        StrategyKind::Fusion,
        StrategyKind::Finetuned,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::ZeroShot => "zero_shot",
            StrategyKind::Sequential => "sequential",
            StrategyKind::Fusion => "fusion",
            StrategyKind::Finetuned => "finetuned",
        }
    }

    /// Row label used in comparison tables.
    pub fn display_name(self) -> &'static str {
        match self {
            StrategyKind::ZeroShot => "Pre-trained LLM",
            StrategyKind::Sequential => "Pre-trained LLM, seq re-prompting",
            StrategyKind::Fusion => "Traditional CNN model",
            StrategyKind::Finetuned => "Fine-tuned LLM",
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown strategy {s:?} (expected zero_shot, sequential, fusion or finetuned)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayVerdict {
    pub label: BinaryLabel,
    /// In [0, 1]. Prompt-based strategies always report 1.0.
    pub confidence: f64,
    pub overlay_texts: Vec<String>,
    /// Raw model output or a short rationale.
    pub evidence: String,
    pub strategy: StrategyKind,
}

impl OverlayVerdict {
    pub fn from_parsed(label: BinaryLabel, overlay_texts: Vec<String>, evidence: &str, strategy: StrategyKind) -> Self {
        OverlayVerdict {
            label,
            confidence: 1.0,
            overlay_texts,
            evidence: evidence.to_string(),
            strategy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{reason}")]
pub struct VerdictError {
    pub reason: String,
    pub raw: String,
}

const ANSWER: &str = "ANSWER:";
const OVERLAY: &str = "OVERLAY:";

/// Byte offsets just past each case-insensitive occurrence of `marker` that
/// does not sit in the middle of a word.
fn marker_ends(text: &str, marker: &str) -> Vec<usize> {
    let upper = text.to_ascii_uppercase();
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(pos) = upper[from..].find(marker) {
        let start = from + pos;
        let boundary = upper[..start]
            .chars()
            .next_back()
            .is_none_or(|c| !(c.is_alphanumeric() || c == '_'));
        if boundary {
            out.push(start + marker.len());
        }
        from = start + marker.len();
    }
    out
}

fn leading_word(s: &str) -> &str {
    let s = s.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '*' | '"' | '\'' | '`' | '[' | '('));
    let end = s.find(|c: char| !c.is_alphabetic()).unwrap_or(s.len());
    &s[..end]
}

fn word_label(word: &str) -> Option<BinaryLabel> {
    if word.eq_ignore_ascii_case("yes") {
        Some(BinaryLabel::Positive)
    } else if word.eq_ignore_ascii_case("no") {
        Some(BinaryLabel::Negative)
    } else {
        None
    }
}

/// Splits a bracketed or bare comma-separated list, honouring quotes.
fn split_list(body: &str) -> Vec<String> {
    let mut items = Vec::new();
    let mut current = String::new();
    let mut quote: Option<char> = None;
    let mut was_quoted = false;
    let flush = |current: &mut String, was_quoted: &mut bool, items: &mut Vec<String>| {
        let item = if *was_quoted { current.clone() } else { current.trim().to_string() };
        if !item.is_empty() {
            items.push(item);
        }
        current.clear();
        *was_quoted = false;
    };
    for c in body.chars() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => current.push(c),
            None => match c {
                '\'' | '"' if current.trim().is_empty() => {
                    current.clear();
                    quote = Some(c);
                    was_quoted = true;
                }
                ',' => flush(&mut current, &mut was_quoted, &mut items),
                _ if was_quoted => {}
                _ => current.push(c),
            },
        }
    }
    flush(&mut current, &mut was_quoted, &mut items);
    items
}

fn parse_overlay_list(rest: &str) -> Vec<String> {
    let rest = rest.trim_start();
    let body = if let Some(inner) = rest.strip_prefix('[') {
        let mut quote: Option<char> = None;
        let mut end = inner.len();
        for (i, c) in inner.char_indices() {
            match quote {
                Some(q) if c == q => quote = None,
                Some(_) => {}
                None if c == '\'' || c == '"' => quote = Some(c),
                None if c == ']' => {
                    end = i;
                    break;
                }
                None => {}
            }
        }
        &inner[..end]
    } else {
        let line = rest.lines().next().unwrap_or("");
        let line = line.trim().trim_end_matches('.');
        if line.eq_ignore_ascii_case("none") || line.eq_ignore_ascii_case("n/a") {
            return Vec::new();
        }
        line
    };
    split_list(body)
}

/// Reads `ANSWER: yes|no` and an optional `OVERLAY: [...]` list.
///
/// The first well-formed ANSWER marker wins; the OVERLAY list is taken from
/// the first OVERLAY marker after it. Negative answers carry no overlay texts.
pub fn parse_verdict(text: &str) -> Result<(BinaryLabel, Vec<String>), VerdictError> {
    let answers = marker_ends(text, ANSWER);
    let Some(&first) = answers.first() else {
        return Err(VerdictError {
            reason: "response has no ANSWER marker".into(),
            raw: text.to_string(),
        });
    };
    let word = leading_word(&text[first..]);
    let Some(label) = word_label(word) else {
        return Err(VerdictError {
            reason: format!("ANSWER token {word:?} is neither yes nor no"),
            raw: text.to_string(),
        });
    };
    if !label.is_positive() {
        return Ok((label, Vec::new()));
    }
    let overlay = marker_ends(text, OVERLAY)
        .into_iter()
        .find(|&end| end > first)
        .map(|end| parse_overlay_list(&text[end..]))
        .unwrap_or_default();
    Ok((label, overlay))
}

/// Fine-tuned models are trained to answer with a bare yes/no; accept that
/// first, then fall back to [`parse_verdict`].
pub fn parse_finetuned_answer(text: &str) -> Result<(BinaryLabel, Vec<String>), VerdictError> {
    if let Some(label) = word_label(leading_word(text)) {
        if label.is_positive() {
            let overlay = marker_ends(text, OVERLAY)
                .first()
                .map(|&end| parse_overlay_list(&text[end..]))
                .unwrap_or_default();
            return Ok((label, overlay));
        }
        return Ok((label, Vec::new()));
    }
    parse_verdict(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use BinaryLabel::*;

    #[test]
    fn mid_line_answer_with_overlay_list() {
        assert_eq!(
            parse_verdict("I examined the image. ANSWER: Yes. OVERLAY: ['50% OFF','TODAY']").unwrap(),
            (Positive, vec!["50% OFF".to_string(), "TODAY".to_string()])
        );
    }

    #[test]
    fn plain_no() {
        assert_eq!(parse_verdict("ANSWER: no").unwrap(), (Negative, vec![]));
        assert_eq!(parse_verdict("answer:NO.").unwrap(), (Negative, vec![]));
    }

    #[test]
    fn prose_without_marker_is_error() {
        let err = parse_verdict("The text seems overlaid.").unwrap_err();
        assert_eq!(err.raw, "The text seems overlaid.");
    }

    #[test]
    fn non_yes_no_token_is_error() {
        assert!(parse_verdict("ANSWER: maybe").is_err());
        assert!(parse_verdict("ANSWER:").is_err());
        assert!(parse_verdict("ANSWER: yesterday").is_err());
    }

    #[test]
    fn overlay_variants() {
        assert_eq!(parse_verdict("ANSWER: yes\nOVERLAY: [\"BUY NOW\", 'it''s']").unwrap().1.len(), 2);
        assert_eq!(
            parse_verdict("ANSWER: yes\nOVERLAY: [\"Joe's, Inc\"]").unwrap().1,
            vec!["Joe's, Inc"]
        );
        assert_eq!(parse_verdict("ANSWER: yes\nOVERLAY: SALE, NOW\nmore").unwrap().1, vec!["SALE", "NOW"]);
        assert_eq!(parse_verdict("ANSWER: yes\nOVERLAY: none").unwrap().1, Vec::<String>::new());
        assert_eq!(parse_verdict("ANSWER: yes\nOVERLAY: []").unwrap().1, Vec::<String>::new());
        assert_eq!(parse_verdict("**ANSWER:** **yes**").unwrap().0, Positive);
    }

    #[test]
    fn marker_inside_word_ignored() {
        assert!(parse_verdict("MYANSWER: yes").is_err());
        assert_eq!(parse_verdict("XANSWER: no ANSWER: yes").unwrap().0, Positive);
    }

    #[test]
    fn overlay_before_answer_ignored() {
        let (label, texts) = parse_verdict("OVERLAY: ['A']\nANSWER: yes").unwrap();
        assert_eq!(label, Positive);
        assert!(texts.is_empty());
    }

    #[test]
    fn finetuned_bare_answers() {
        assert_eq!(parse_finetuned_answer("Yes").unwrap().0, Positive);
        assert_eq!(parse_finetuned_answer("  no, the text is on a sign").unwrap().0, Negative);
        assert_eq!(parse_finetuned_answer("ANSWER: yes").unwrap().0, Positive);
        assert!(parse_finetuned_answer("unclear").is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(k.as_str().parse::<StrategyKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.as_str()));
        }
    }

    proptest! {
        #[test]
        fn total_over_arbitrary_strings(s in "\\PC{0,120}") {
            let _ = parse_verdict(&s);
            let _ = parse_finetuned_answer(&s);
        }

        #[test]
        fn recognizes_embedded_answers(prefix in "[a-z .,]{0,40}", yes in any::<bool>(), items in prop::collection::vec("[A-Z0-9%! ]{1,12}", 0..4)) {
            let quoted: Vec<String> = items.iter().map(|i| format!("'{i}'")).collect();
            let text = format!("{prefix} ANSWER: {}. OVERLAY: [{}]", if yes { "yes" } else { "no" }, quoted.join(", "));
            let (label, texts) = parse_verdict(&text).unwrap();
            prop_assert_eq!(label.is_positive(), yes);
            if yes {
                prop_assert_eq!(texts, items);
            } else {
                prop_assert!(texts.is_empty());
            }
        }
    }
}
