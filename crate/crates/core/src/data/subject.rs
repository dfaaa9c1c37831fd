//! Heuristic extraction of the counted subject from a question.

use super::filter::COUNT_PHRASES;

pub const UNKNOWN_SUBJECT: &str = "UNKNOWN";

/// Function words skipped when looking for the subject noun.
pub const STOP_WORDS: &[&str] = &[
    "a", "an", "the", "are", "is", "was", "were", "there", "here", "do", "does", "did", "can", "could",
    "you", "we", "i", "in", "on", "at", "of", "this", "that", "these", "those", "be", "many", "much",
    "how", "number", "amount", "count", "total", "have", "has", "see", "what", "which", "any", "some",
    "visible", "shown", "in", "to", "it", "its", "they",
];

/// Singular form by suffix rules: `ies → y`, sibilant `es` dropped, trailing `s` dropped
/// (but not from `ss`, `us` or `is` endings).
pub fn singularize(word: &str) -> String {
    let w = word;
    if w.len() > 4 && w.ends_with("ies") {
        return format!("{}y", &w[..w.len() - 3]);
    }
    for suffix in ["sses", "shes", "ches", "xes", "zes", "ses"] {
        if w.len() > suffix.len() + 1 && w.ends_with(suffix) {
            return w[..w.len() - 2].to_owned();
        }
    }
    if w.len() > 3 && w.ends_with('s') && !w.ends_with("ss") && !w.ends_with("us") && !w.ends_with("is") {
        return w[..w.len() - 1].to_owned();
    }
    w.to_owned()
}

/// First non-stop-word token after the count phrase, singularized.
pub fn extract_subject<S: AsRef<str>>(tokens: &[S]) -> String {
    let toks: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    let mut start = 0;
    'search: for i in 0..toks.len() {
        for phrase in COUNT_PHRASES {
            let words: Vec<&str> = phrase.split(' ').collect();
            if toks[i..].starts_with(&words) {
                start = i + words.len();
                break 'search;
            }
        }
    }
    toks[start..]
        .iter()
        .find(|t| !STOP_WORDS.contains(t))
        .map(|t| singularize(t))
        .unwrap_or_else(|| UNKNOWN_SUBJECT.to_owned())
}
