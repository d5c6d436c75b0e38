//! Pulling scoreable predictions out of raw model responses.

use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::curation::split_sentences;
use crate::curation::templates::TaskKind;

pub const LETTERS: [&str; 4] = ["A", "B", "C", "D"];

/// What kind of answer a response is expected to hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    Mcq,
    FillInBlank,
    ShortAnswerQa,
    AbstractCompletion,
    LongFormQa,
    /// Free text scored whole, such as case QA or note summaries.
    FreeText,
}

impl AnswerKind {
    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Mcq => AnswerKind::Mcq,
            TaskKind::FillInBlank => AnswerKind::FillInBlank,
            TaskKind::ShortAnswerQa => AnswerKind::ShortAnswerQa,
            TaskKind::AbstractCompletion => AnswerKind::AbstractCompletion,
            TaskKind::CaseQa(_) => AnswerKind::FreeText,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMethod {
    LetterPattern,
    OptionTextMatch,
    FirstLine,
    FullText,
    Unparseable,
}

impl fmt::Display for ExtractionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ExtractionMethod::LetterPattern => "letter_pattern",
            ExtractionMethod::OptionTextMatch => "option_text_match",
            ExtractionMethod::FirstLine => "first_line",
            ExtractionMethod::FullText => "full_text",
            ExtractionMethod::Unparseable => "unparseable",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedAnswer {
    pub kind: AnswerKind,
    pub value: String,
    pub method: ExtractionMethod,
    pub confidence_note: String,
}

impl ExtractedAnswer {
    pub fn is_unparseable(&self) -> bool {
        self.method == ExtractionMethod::Unparseable
    }
}

/// `B`, `B.`, `(B)`, `B:` or `B)` opening the response.
static LEADING_LETTER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(?:\(([A-Da-d])\)|([A-Da-d])(?:[.:)]|\s*$))").unwrap());

/// A bare capital letter followed by whitespace, e.g. `A 150 μm`.
static LEADING_BARE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*([A-D])\s+").unwrap());

/// "answer is X", "correct answer is (X)", "answer: option X" and similar.
static ANSWER_PHRASE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\banswer\s*(?:is|:)\s*(?:option\s+)?(?:\(([a-d])\)|([a-d])(?:[.:),;]|\s|$))").unwrap()
});

/// `X.` anywhere, to be confirmed by the option text that follows.
static DOTTED_LETTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?:^|[^\w])([A-D])\.\s+").unwrap());

fn letter_index(c: &str) -> usize {
    (c.to_ascii_uppercase().as_bytes()[0] - b'A') as usize
}

/// Case-insensitive prefix test that also requires a word boundary after
/// the prefix.
fn starts_with_ci(haystack: &str, needle: &str) -> bool {
    bounded_matches(haystack, needle).first() == Some(&0)
}

/// Byte offsets of every case-insensitive occurrence of `needle` bounded
/// on both sides by a non-alphanumeric character or the text edge.
fn bounded_matches(haystack: &str, needle: &str) -> Vec<usize> {
    let needle = needle.trim().to_lowercase();
    if needle.is_empty() {
        return Vec::new();
    }
    let hay = haystack.to_lowercase();
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(rel) = hay[from..].find(&needle) {
        let at = from + rel;
        let end = at + needle.len();
        let before_ok = hay[..at].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
        let after_ok = hay[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
        if before_ok && after_ok {
            out.push(at);
        }
        from = at + hay[at..].chars().next().map_or(1, char::len_utf8);
    }
    out
}

fn mcq(value: usize, method: ExtractionMethod, note: impl Into<String>) -> ExtractedAnswer {
    ExtractedAnswer {
        kind: AnswerKind::Mcq,
        value: LETTERS[value].to_string(),
        method,
        confidence_note: note.into(),
    }
}

/// Finds the chosen option letter in a multiple-choice response.
///
/// Rules, first match wins:
/// 1. a letter opening the response (`B`, `B.`, `(B)`, `B:`), or a bare
///    capital followed by that option's text;
/// 2. an answer phrase (`answer is C`, `correct answer is (A)`), or `X.`
///    followed by option X's text anywhere;
/// 3. exactly one option's text appearing as a whole phrase.
///
/// Lowercase letters count only when punctuation isolates them, so the
/// article in "answer is a history of..." is not read as option A.
pub fn extract_mcq(raw: &str, options: &[String]) -> ExtractedAnswer {
    let n = options.len().min(4);
    let valid = |i: usize| i < n || n == 0;

    if let Some(c) = LEADING_LETTER.captures(raw) {
        let m = c.get(1).or(c.get(2)).unwrap();
        let i = letter_index(m.as_str());
        if valid(i) {
            return mcq(i, ExtractionMethod::LetterPattern, "leading letter");
        }
    }
    if let Some(c) = LEADING_BARE.captures(raw) {
        let i = letter_index(&c[1]);
        if i < n && starts_with_ci(&raw[c.get(0).unwrap().end()..], &options[i]) {
            return mcq(i, ExtractionMethod::LetterPattern, "leading letter with option text");
        }
    }
    if let Some(c) = ANSWER_PHRASE.captures(raw) {
        let m = c.get(1).or(c.get(2)).unwrap();
        let i = letter_index(m.as_str());
        let lowercase_bare = c.get(2).is_some() && m.as_str().chars().all(|ch| ch.is_ascii_lowercase());
        let isolated = raw[m.end()..].chars().next().is_none_or(|ch| matches!(ch, '.' | ':' | ')' | ',' | ';'));
        if valid(i) && (!lowercase_bare || isolated) {
            return mcq(i, ExtractionMethod::LetterPattern, "answer phrase");
        }
    }
    for c in DOTTED_LETTER.captures_iter(raw) {
        let i = letter_index(&c[1]);
        if i < n && starts_with_ci(&raw[c.get(0).unwrap().end()..], &options[i]) {
            return mcq(i, ExtractionMethod::LetterPattern, "labelled option text");
        }
    }

    let hits: Vec<usize> = (0..n).filter(|&i| !bounded_matches(raw, &options[i]).is_empty()).collect();
    // Drop options whose text is contained in another matching option.
    let maximal: Vec<usize> = hits
        .iter()
        .copied()
        .filter(|&i| {
            !hits.iter().any(|&j| {
                j != i
                    && options[j].trim().len() > options[i].trim().len()
                    && options[j].to_lowercase().contains(&options[i].trim().to_lowercase())
            })
        })
        .collect();
    if maximal.len() == 1 {
        return mcq(maximal[0], ExtractionMethod::OptionTextMatch, "unique option text");
    }

    ExtractedAnswer {
        kind: AnswerKind::Mcq,
        value: String::new(),
        method: ExtractionMethod::Unparseable,
        confidence_note: if maximal.is_empty() {
            "no letter or option text found".into()
        } else {
            format!("{} option texts matched", maximal.len())
        },
    }
}

const ECHO_PREFIXES: [&str; 4] = ["output/answer:", "output:", "answer:", "input:"];
const STOP_MARKERS: [&str; 7] = ["Question:", "Input:", "Human:", "Instruction:", "Task:", "### ", "Assistant:"];
const REPEAT_THRESHOLD: usize = 3;

fn strip_echo_prefix(s: &str) -> &str {
    for p in ECHO_PREFIXES {
        if s.get(..p.len()).is_some_and(|head| head.eq_ignore_ascii_case(p)) {
            return s[p.len()..].trim();
        }
    }
    s
}

/// Cuts at the first template marker after the start, which is where
/// models tend to begin inventing a new prompt.
fn cut_at_stop_marker(s: &str) -> &str {
    let skip = s.chars().next().map_or(0, char::len_utf8);
    let cut = STOP_MARKERS.iter().filter_map(|m| s[skip..].find(m).map(|i| i + skip)).min();
    match cut {
        Some(i) => s[..i].trim(),
        None => s,
    }
}

fn offset_in(outer: &str, inner: &str) -> usize {
    inner.as_ptr() as usize - outer.as_ptr() as usize
}

/// Truncates at the second occurrence of the earliest unit (paragraph,
/// then sentence) that occurs at least [`REPEAT_THRESHOLD`] times.
fn trim_repeats(s: &str) -> &str {
    let paragraphs: Vec<&str> = s.split("\n\n").map(str::trim).filter(|p| !p.is_empty()).collect();
    if let Some(end) = repeat_cut(s, &paragraphs) {
        return s[..end].trim();
    }
    let sentences = split_sentences(s);
    if let Some(end) = repeat_cut(s, &sentences) {
        return s[..end].trim();
    }
    s
}

fn repeat_cut(s: &str, units: &[&str]) -> Option<usize> {
    for (i, u) in units.iter().enumerate() {
        let count = units.iter().filter(|v| *v == u).count();
        if count >= REPEAT_THRESHOLD {
            let second = units[i + 1..].iter().find(|v| *v == u)?;
            return Some(offset_in(s, second));
        }
    }
    None
}

fn first_line(s: &str) -> &str {
    s.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("")
}

/// Cleans a free-text response: removes echoed template prefixes, cuts
/// invented follow-on prompts, trims runaway repetition and, for short
/// answers, keeps the first line. Applying it twice changes nothing.
pub fn extract_freeform(raw: &str, kind: AnswerKind) -> ExtractedAnswer {
    let first_line_kind = matches!(kind, AnswerKind::ShortAnswerQa | AnswerKind::FillInBlank);
    let mut cur = raw.trim();
    loop {
        let mut next = strip_echo_prefix(cur);
        next = cut_at_stop_marker(next);
        next = trim_repeats(next);
        if first_line_kind {
            next = first_line(next);
        }
        if next == cur {
            break;
        }
        cur = next;
    }
    let (value, note) = if cur.is_empty() && !raw.trim().is_empty() {
        (raw.trim(), "cleaning removed everything; raw text kept")
    } else if cur.len() == raw.len() {
        (cur, "unchanged")
    } else {
        (cur, "cleaned")
    };
    let method = if first_line_kind && !value.is_empty() {
        ExtractionMethod::FirstLine
    } else {
        ExtractionMethod::FullText
    };
    ExtractedAnswer {
        kind,
        value: value.to_string(),
        method,
        confidence_note: note.into(),
    }
}

/// Dispatches on `kind`; `options` is used only for multiple choice.
pub fn extract(raw: &str, kind: AnswerKind, options: &[String]) -> ExtractedAnswer {
    match kind {
        AnswerKind::Mcq => extract_mcq(raw, options),
        other => extract_freeform(raw, other),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(v: [&str; 4]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn leading_forms() {
        let o = opts(["w", "x", "y", "z"]);
        for (raw, want) in [("B", "B"), ("B.", "B"), ("(c)", "C"), ("D: because", "D"), (" a) z", "A")] {
            let got = extract_mcq(raw, &o);
            assert_eq!(got.value, want, "{raw}");
            assert_eq!(got.method, ExtractionMethod::LetterPattern);
        }
    }

    #[test]
    fn article_is_not_a_letter() {
        let o = opts(["trauma", "x", "y", "z"]);
        let got = extract_mcq("The answer is a history of trauma", &o);
        assert_eq!(got.value, "A");
        assert_eq!(got.method, ExtractionMethod::OptionTextMatch);
        assert!(extract_mcq("A patient with nothing", &opts(["p", "q", "r", "s"])).is_unparseable());
    }

    #[test]
    fn ambiguous_option_text() {
        let o = opts(["cornea", "lens", "iris", "retina"]);
        assert!(extract_mcq("cornea or lens", &o).is_unparseable());
        let nested = opts(["trauma", "ocular trauma", "x", "y"]);
        assert_eq!(extract_mcq("ocular trauma", &nested).value, "B");
    }

    #[test]
    fn freeform_cleanup() {
        let a = extract_freeform("Answer: Cystoid macular edema", AnswerKind::ShortAnswerQa);
        assert_eq!(a.value, "Cystoid macular edema");
        let e = extract_freeform("", AnswerKind::LongFormQa);
        assert_eq!((e.value.as_str(), e.method), ("", ExtractionMethod::FullText));
        let rep = "Para one.\n\nSame.\n\nSame.\n\nSame.";
        assert_eq!(extract_freeform(rep, AnswerKind::LongFormQa).value, "Para one.\n\nSame.");
        let kept = extract_freeform("Answer:", AnswerKind::ShortAnswerQa);
        assert_eq!(kept.value, "Answer:");
    }
}
