//! Text normalisation shared by target validation and the text metrics.

use alloc::string::String;
use alloc::vec::Vec;

/// Delimiter between multiple textual targets in a generated string.
pub const TARGET_DELIMITER: &str = "; ";

/// Lowercases, collapses whitespace and strips punctuation at the edges.
pub fn normalize(s: &str) -> String {
    normalize_tokens(s).join(" ")
}

/// Normalised whitespace tokens with punctuation stripped at token edges.
pub fn normalize_tokens(s: &str) -> Vec<String> {
    s.split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation() || is_unicode_punct(c)).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

fn is_unicode_punct(c: char) -> bool {
    matches!(c, '“' | '”' | '‘' | '’' | '…' | '\u{2013}' | '\u{2014}' | '«' | '»')
}

/// Splits a generated target string on the target delimiter and normalises each part.
pub fn split_targets(s: &str) -> Vec<String> {
    s.split(';').map(normalize).filter(|t| !t.is_empty()).collect()
}

/// Joins targets with the fixed delimiter.
pub fn join_targets<S: AsRef<str>>(targets: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in targets.iter().enumerate() {
        if i > 0 {
            out.push_str(TARGET_DELIMITER);
        }
        out.push_str(t.as_ref());
    }
    out
}

/// True when the normalised tokens of `needle` occur contiguously in `haystack`.
pub fn contains_token_span(haystack: &str, needle: &str) -> bool {
    let hay = normalize_tokens(haystack);
    let pat = normalize_tokens(needle);
    if pat.is_empty() {
        return false;
    }
    hay.windows(pat.len()).any(|w| w == pat.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalises() {
        assert_eq!(normalize("  Hello,   WORLD!! "), "hello world");
        assert_eq!(split_targets("A; b"), ["a", "b"]);
        assert_eq!(join_targets(&["x", "y"]), "x; y");
    }

    #[test]
    fn token_spans() {
        assert!(contains_token_span("Thanks, DLR train driver!", "dlr train driver"));
        assert!(!contains_token_span("the train", "train driver"));
        assert!(!contains_token_span("trainer", "train"));
    }
}
