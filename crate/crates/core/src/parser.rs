//! Structural validation of completions and label extraction.
//!
//! Two dialects are recognised:
//!
//! * `ThinkSolution`: exactly one `<think>…</think>` block followed by exactly
//!   one `<solution>…</solution>` block.
//! * `AnalysisConclusion`: `{analysis: …, conclusion: …}`, braces optional,
//!   keys matched case-insensitively.
//!
//! Predictions come from the solution/conclusion part only. It is split on
//! commas and newlines and every fragment goes through [`parse_label`].

use serde::{Deserialize, Serialize};

use crate::vocab::{parse_label, LabelSet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dialect {
    #[default]
    ThinkSolution,
    AnalysisConclusion,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParsedOutput {
    pub valid: bool,
    pub reasoning_text: String,
    pub solution_text: String,
    pub predicted: LabelSet,
    pub invalid_label_count: usize,
    pub duplicate_count: usize,
    pub extraneous_text: bool,
    pub token_length: usize,
}

impl ParsedOutput {
    /// Replaces the whitespace-based length estimate with an exact policy
    /// token count.
    pub fn with_token_length(mut self, n: usize) -> Self {
        self.token_length = n;
        self
    }
}

/// Parses `text`. `token_length` defaults to the number of
/// whitespace-separated words; callers holding policy tokens should override
/// it with [`ParsedOutput::with_token_length`].
pub fn parse_completion(text: &str, dialect: Dialect) -> ParsedOutput {
    let token_length = text.split_whitespace().count();
    let blocks = match dialect {
        Dialect::ThinkSolution => split_think_solution(text),
        Dialect::AnalysisConclusion => split_analysis_conclusion(text),
    };
    let Some(blocks) = blocks else {
        return ParsedOutput { token_length, ..Default::default() };
    };

    let mut predicted = LabelSet::EMPTY;
    let mut invalid_label_count = 0;
    let mut duplicate_count = 0;
    for fragment in blocks.solution.split([',', '\n']) {
        if fragment.trim().is_empty() {
            continue;
        }
        match parse_label(fragment) {
            Some(label) => {
                if !predicted.insert(label) {
                    duplicate_count += 1;
                }
            }
            None => invalid_label_count += 1,
        }
    }

    ParsedOutput {
        valid: true,
        reasoning_text: blocks.reasoning.trim().to_owned(),
        solution_text: blocks.solution.trim().to_owned(),
        predicted,
        invalid_label_count,
        duplicate_count,
        extraneous_text: blocks.extraneous,
        token_length,
    }
}

pub fn is_valid_format(text: &str, dialect: Dialect) -> bool {
    match dialect {
        Dialect::ThinkSolution => split_think_solution(text).is_some(),
        Dialect::AnalysisConclusion => split_analysis_conclusion(text).is_some(),
    }
}

struct Blocks<'a> {
    reasoning: &'a str,
    solution: &'a str,
    extraneous: bool,
}

fn has_content(s: &str) -> bool {
    s.chars().any(|c| !c.is_whitespace())
}

/// Position of the single occurrence of `needle`, or `None` if it occurs zero
/// or several times.
fn unique(haystack: &str, needle: &str) -> Option<usize> {
    let mut it = haystack.match_indices(needle);
    let (pos, _) = it.next()?;
    it.next().is_none().then_some(pos)
}

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const SOL_OPEN: &str = "<solution>";
const SOL_CLOSE: &str = "</solution>";

fn split_think_solution(text: &str) -> Option<Blocks<'_>> {
    let a = unique(text, THINK_OPEN)?;
    let b = unique(text, THINK_CLOSE)?;
    let c = unique(text, SOL_OPEN)?;
    let d = unique(text, SOL_CLOSE)?;
    let a_end = a + THINK_OPEN.len();
    let b_end = b + THINK_CLOSE.len();
    let c_end = c + SOL_OPEN.len();
    let d_end = d + SOL_CLOSE.len();
    if !(a_end <= b && b_end <= c && c_end <= d) {
        return None;
    }
    let extraneous =
        has_content(&text[..a]) || has_content(&text[b_end..c]) || has_content(&text[d_end..]);
    Some(Blocks {
        reasoning: &text[a_end..b],
        solution: &text[c_end..d],
        extraneous,
    })
}

/// Occurrences of `key` followed by an optional closing quote, optional
/// whitespace and a colon, as `(key_start, after_colon)`. `lower` must be the
/// ASCII-lowercased text so byte offsets line up with the original.
fn key_positions(lower: &str, key: &str) -> Vec<(usize, usize)> {
    lower
        .match_indices(key)
        .filter_map(|(start, _)| {
            let rest = &lower[start + key.len()..];
            let rest_trim = rest.strip_prefix('"').unwrap_or(rest);
            let after_ws = rest_trim.trim_start();
            after_ws.starts_with(':').then(|| {
                let consumed = rest.len() - after_ws.len() + 1;
                (start, start + key.len() + consumed)
            })
        })
        .collect()
}

fn strip_quotes(s: &str) -> &str {
    let s = s.trim();
    let s = s.strip_prefix('"').unwrap_or(s);
    s.strip_suffix('"').unwrap_or(s)
}

fn split_analysis_conclusion(text: &str) -> Option<Blocks<'_>> {
    let (body, mut extraneous) = match (text.find('{'), text.rfind('}')) {
        (Some(open), Some(close)) if open < close => {
            let outside = has_content(&text[..open]) || has_content(&text[close + 1..]);
            (&text[open + 1..close], outside)
        }
        (Some(_), _) => return None,
        (None, Some(_)) => return None,
        (None, None) => (text, false),
    };
    let lower = body.to_ascii_lowercase();
    let analysis = key_positions(&lower, "analysis");
    let conclusion = key_positions(&lower, "conclusion");
    let (&[(a_key, a_val)], &[(c_key, c_val)]) = (analysis.as_slice(), conclusion.as_slice()) else {
        return None;
    };
    if a_val > c_key {
        return None;
    }
    let lead = body[..a_key].trim();
    extraneous |= has_content(lead.strip_suffix('"').unwrap_or(lead));

    let reasoning = body[a_val..c_key].trim_end();
    let reasoning = reasoning.strip_suffix('"').unwrap_or(reasoning).trim_end();
    let reasoning = reasoning.strip_suffix(',').unwrap_or(reasoning);
    let reasoning = strip_quotes(reasoning);
    Some(Blocks {
        reasoning,
        solution: strip_quotes(&body[c_val..]),
        extraneous,
    })
}
