//! Rule-based sentence splitting.

use std::ops::Range;

/// Tokens ending in a period that never close a sentence.
pub const ABBREVIATIONS: [&str; 10] = ["Mr.", "Mrs.", "Dr.", "St.", "U.S.", "e.g.", "i.e.", "etc.", "vs.", "No."];

/// Splits `context` into sentences. Each range is a byte range into the
/// context on character boundaries; the text between consecutive ranges is
/// whitespace only.
///
/// A sentence ends at `.`, `!` or `?` when followed by whitespace and an
/// uppercase letter, or by the end of the text.
///
/// ```
/// use endx::data::split_sentences;
/// let s = split_sentences("A cat. A dog.");
/// assert_eq!(s.iter().map(|(t, _)| t.as_str()).collect::<Vec<_>>(), ["A cat.", "A dog."]);
/// ```
pub fn split_sentences(context: &str) -> Vec<(String, Range<usize>)> {
    let chars: Vec<(usize, char)> = context.char_indices().collect();
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if start.is_none() {
            if !c.is_whitespace() {
                start = Some(pos);
            }
            i += 1;
            continue;
        }
        if matches!(c, '.' | '!' | '?') {
            let end = pos + c.len_utf8();
            let mut j = i + 1;
            while j < chars.len() && chars[j].1.is_whitespace() {
                j += 1;
            }
            let at_end = j == chars.len();
            let boundary = at_end || (j > i + 1 && chars[j].1.is_uppercase());
            let s = start.unwrap();
            if boundary && !(c == '.' && ends_with_abbreviation(&context[s..end])) {
                out.push((context[s..end].to_string(), s..end));
                start = None;
            }
        }
        i += 1;
    }
    if let Some(s) = start {
        let end = s + context[s..].trim_end().len();
        out.push((context[s..end].to_string(), s..end));
    }
    out
}

fn ends_with_abbreviation(sentence: &str) -> bool {
    let last = sentence.rsplit(char::is_whitespace).next().unwrap_or("");
    ABBREVIATIONS.contains(&last)
}
