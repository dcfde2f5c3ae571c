//! Whitespace-and-punctuation tokenizer with character offsets.

/// A token with its `[start, end)` span in characters of the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

fn is_edge_punct(c: char) -> bool {
    !c.is_alphanumeric()
}

/// Lowercases and splits on whitespace, then peels leading and trailing
/// punctuation off each chunk into single-character tokens. Interior
/// punctuation (`don't`, `3.5`) stays attached.
pub fn tokenize_with_offsets(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        let end = i;
        let mut lo = start;
        while lo < end && is_edge_punct(chars[lo]) {
            lo += 1;
        }
        let mut hi = end;
        while hi > lo && is_edge_punct(chars[hi - 1]) {
            hi -= 1;
        }
        let single = |k: usize| Token {
            text: chars[k].to_lowercase().collect(),
            start: k,
            end: k + 1,
        };
        out.extend((start..lo).map(single));
        if lo < hi {
            out.push(Token {
                text: chars[lo..hi].iter().collect::<String>().to_lowercase(),
                start: lo,
                end: hi,
            });
        }
        out.extend((hi.max(lo)..end).map(single));
    }
    out
}

pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_offsets(text)
        .into_iter()
        .map(|t| t.text)
        .collect()
}

/// Tokens joined by single spaces.
pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

pub fn is_word(token: &str) -> bool {
    token.chars().any(char::is_alphanumeric)
}
