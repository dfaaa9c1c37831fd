//! Selection of genuine counting questions from number-type VQA pairs.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::language::tokenize;

/// A question must contain one of these to be a counting question.
pub const COUNT_PHRASES: [&str; 4] = ["how many", "number of", "amount of", "count of"];
/// Usually asks to read a printed number rather than to count.
pub const REJECT_PHRASE: &str = "number of the";
pub const MAX_ANSWER: i64 = 20;

const NUMBER_WORDS: [&str; 21] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
    "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen", "twenty",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FilterReason {
    Keep,
    NoPhrase,
    RejectPhrase,
    NonNumeric,
    OutOfRange,
}

impl FilterReason {
    pub const ALL: [FilterReason; 5] = [
        FilterReason::Keep,
        FilterReason::NoPhrase,
        FilterReason::RejectPhrase,
        FilterReason::NonNumeric,
        FilterReason::OutOfRange,
    ];

    pub fn code(self) -> &'static str {
        match self {
            FilterReason::Keep => "KEEP",
            FilterReason::NoPhrase => "NO_PHRASE",
            FilterReason::RejectPhrase => "REJECT_PHRASE",
            FilterReason::NonNumeric => "NON_NUMERIC",
            FilterReason::OutOfRange => "OUT_OF_RANGE",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.code() == code)
    }
}

impl fmt::Display for FilterReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// English word for `n ≤ 20`.
pub fn number_word(n: u32) -> Option<&'static str> {
    NUMBER_WORDS.get(n as usize).copied()
}

/// Integer value of an answer given as digits or as an English number word up to twenty.
pub fn parse_answer_number(answer: &str) -> Option<i64> {
    let a = answer.trim().to_lowercase();
    if let Ok(v) = a.parse::<i64>() {
        return Some(v);
    }
    NUMBER_WORDS.iter().position(|w| *w == a).map(|v| v as i64)
}

/// Single-space-joined tokens padded with spaces, so phrase tests respect word boundaries.
fn detokenized(question: &str) -> String {
    format!(" {} ", tokenize(question).join(" "))
}

fn contains_phrase(padded: &str, phrase: &str) -> bool {
    padded.contains(&format!(" {phrase} "))
}

/// Classifies one question/answer pair.
pub fn filter_howmany(question: &str, answer: &str) -> FilterReason {
    let q = detokenized(question);
    if !COUNT_PHRASES.iter().any(|p| contains_phrase(&q, p)) {
        return FilterReason::NoPhrase;
    }
    if contains_phrase(&q, REJECT_PHRASE) {
        return FilterReason::RejectPhrase;
    }
    match parse_answer_number(answer) {
        None => FilterReason::NonNumeric,
        Some(v) if !(0..=MAX_ANSWER).contains(&v) => FilterReason::OutOfRange,
        Some(_) => FilterReason::Keep,
    }
}
