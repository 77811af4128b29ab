//! Small text helpers shared across stages: whitespace normalization,
//! sentence segmentation, match normalization and verbatim-leak checks.

/// Collapses every whitespace run to a single space and trims both ends.
pub fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Case-folds, strips punctuation and collapses whitespace.
///
/// Used when comparing short answers such as entity fills.
pub fn normalize_for_match(s: &str) -> String {
    let folded: String = s
        .chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_lowercase().next().unwrap_or(c)
            } else {
                ' '
            }
        })
        .collect();
    normalize_ws(&folded)
}

const ABBREVIATIONS: &[&str] = &[
    "e.g.", "i.e.", "dr.", "mr.", "mrs.", "ms.", "vs.", "etc.", "approx.", "st.", "no.", "fig.",
    "prof.", "jr.", "sr.", "cf.", "al.",
];

fn ends_with_abbreviation(prefix: &str) -> bool {
    let last_word = prefix
        .rsplit(|c: char| c.is_whitespace() || c == '(')
        .next()
        .unwrap_or("")
        .to_lowercase();
    ABBREVIATIONS.iter().any(|a| last_word == *a)
}

/// Splits text into sentences on `.`, `?` or `!` followed by whitespace.
///
/// Common clinical abbreviations ("e.g.", "Dr.") do not end a sentence.
/// Returned sentences are whitespace-normalized and never empty.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if !matches!(c, '.' | '?' | '!') {
            continue;
        }
        let end = i + c.len_utf8();
        let next_is_space = match chars.peek() {
            Some((_, n)) => n.is_whitespace(),
            None => true,
        };
        if !next_is_space {
            continue;
        }
        if c == '.' && ends_with_abbreviation(&text[start..end]) {
            continue;
        }
        let sentence = normalize_ws(&text[start..end]);
        if !sentence.is_empty() {
            out.push(sentence);
        }
        start = end;
    }
    let tail = normalize_ws(&text[start..]);
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Returns the byte offset in `haystack` of the first window of `min_len`
/// characters of `needle_source` that appears verbatim in `haystack`.
///
/// Any shared substring of length >= `min_len` contains a shared window of
/// exactly `min_len`, so checking fixed-width windows is sufficient.
pub fn find_verbatim_overlap(needle_source: &str, haystack: &str, min_len: usize) -> Option<String> {
    if min_len == 0 {
        return Some(String::new());
    }
    let chars: Vec<(usize, char)> = needle_source.char_indices().collect();
    if chars.len() < min_len {
        return None;
    }
    for w in 0..=chars.len() - min_len {
        let from = chars[w].0;
        let to = chars
            .get(w + min_len)
            .map(|(i, _)| *i)
            .unwrap_or(needle_source.len());
        let window = &needle_source[from..to];
        if haystack.contains(window) {
            return Some(window.to_string());
        }
    }
    None
}

/// Minimum contiguous overlap that counts as quoting the original question.
pub const LEAK_MIN_CHARS: usize = 15;

/// True when `text` repeats at least [`LEAK_MIN_CHARS`] contiguous characters of `question`.
pub fn leaks_question(question: &str, text: &str) -> bool {
    find_verbatim_overlap(question, text, LEAK_MIN_CHARS).is_some()
}

/// Replaces the first occurrence of `from` with `to`.
pub fn replace_first(s: &str, from: &str, to: &str) -> Option<String> {
    let at = s.find(from)?;
    let mut out = String::with_capacity(s.len() + to.len());
    out.push_str(&s[..at]);
    out.push_str(to);
    out.push_str(&s[at + from.len()..]);
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sentences_respect_abbreviations() {
        let s = split_sentences("Take rest, e.g. two days. Dr. Smith agrees! Is it viral? Maybe");
        assert_eq!(
            s,
            vec![
                "Take rest, e.g. two days.",
                "Dr. Smith agrees!",
                "Is it viral?",
                "Maybe"
            ]
        );
    }

    #[test]
    fn decimals_do_not_split() {
        assert_eq!(split_sentences("Give 2.5 mg daily. Stop."), vec!["Give 2.5 mg daily.", "Stop."]);
    }

    #[test]
    fn match_normalization() {
        assert_eq!(normalize_for_match("  Amoxicillin. "), "amoxicillin");
        assert_eq!(normalize_for_match("High-blood  pressure"), "high blood pressure");
    }

    #[test]
    fn overlap_windows() {
        let q = "What is the first-line drug for otitis media?";
        assert!(leaks_question(q, "I think the first-line drug for it is X"));
        assert!(!leaks_question(q, "Antibiotics are used for ear infections."));
        assert!(!leaks_question("short", "short"));
    }

    #[test]
    fn replace_first_only() {
        assert_eq!(replace_first("a b a", "a", "c").unwrap(), "c b a");
        assert!(replace_first("abc", "z", "y").is_none());
    }
}
