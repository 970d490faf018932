//! Pluggable tokenization used for span offsets and loss masks.

use std::ops::Range;

/// Splits text into tokens given as byte ranges.
///
/// Implementations must return ranges that partition the input: sorted,
/// contiguous, non-empty, starting at 0 and ending at `text.len()`. Span and
/// mask offsets are counted in these token positions.
pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<Range<usize>>;

    fn count(&self, text: &str) -> usize {
        self.tokenize(text).len()
    }
}

/// Default tokenizer: each token is a run of non-whitespace followed by the
/// whitespace after it. Leading whitespace forms its own token.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        let mut in_space = false;
        for (i, c) in text.char_indices() {
            let ws = c.is_whitespace();
            if !ws && in_space && i > start {
                out.push(start..i);
                start = i;
            }
            in_space = ws;
        }
        if start < text.len() {
            out.push(start..text.len());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pieces(text: &str) -> Vec<&str> {
        WhitespaceTokenizer
            .tokenize(text)
            .into_iter()
            .map(|r| &text[r])
            .collect()
    }

    #[test]
    fn splits_with_trailing_whitespace() {
        assert_eq!(pieces("a bb  c\n"), vec!["a ", "bb  ", "c\n"]);
        assert_eq!(pieces("  lead"), vec!["  ", "lead"]);
        assert_eq!(pieces(""), Vec::<&str>::new());
        assert_eq!(pieces("\n"), vec!["\n"]);
    }

    #[test]
    fn ranges_partition_input() {
        for text in ["x", "héllo wörld ", " \t a\nb ", "<tool_call>{}</tool_call>\n"] {
            let toks = WhitespaceTokenizer.tokenize(text);
            let mut pos = 0;
            for r in &toks {
                assert_eq!(r.start, pos);
                assert!(r.end > r.start);
                pos = r.end;
            }
            assert_eq!(pos, text.len());
        }
    }
}
