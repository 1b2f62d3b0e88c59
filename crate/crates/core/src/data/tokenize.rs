use unicode_normalization::UnicodeNormalization;
use unicode_segmentation::UnicodeSegmentation;

/// Bangla danda, the sentence terminator.
pub const DANDA: &str = "\u{0964}";

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c,
            '\u{0964}' | '\u{0965}'          // danda, double danda
            | '\u{00A1}' | '\u{00AB}' | '\u{00BB}' | '\u{00BF}'
            | '\u{2010}'..='\u{2027}'        // dashes, quotes, ellipsis
            | '\u{2030}'..='\u{205E}')
}

fn is_latin(c: char) -> bool {
    c.is_ascii_alphabetic() || matches!(c, '\u{00C0}'..='\u{024F}' | '\u{1E00}'..='\u{1EFF}')
}

fn punct_grapheme(g: &str) -> bool {
    g.chars().next().is_some_and(is_punct)
}

/// Splits a caption into word and punctuation tokens.
///
/// The text is NFC-normalised and split on whitespace; leading and trailing
/// punctuation graphemes (the danda included) become tokens of their own.
/// Only Latin letters are lowercased. Grapheme clusters are never split.
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered: String = text
        .nfc()
        .flat_map(|c| {
            let v: Vec<char> = if is_latin(c) {
                c.to_lowercase().collect()
            } else {
                vec![c]
            };
            v
        })
        .collect();
    let normalized: String = lowered.nfc().collect();

    let mut out = Vec::new();
    for word in normalized.split_whitespace() {
        let graphemes: Vec<&str> = word.graphemes(true).collect();
        let lead = graphemes.iter().take_while(|g| punct_grapheme(g)).count();
        if lead == graphemes.len() {
            out.extend(graphemes.iter().map(|g| g.to_string()));
            continue;
        }
        let trail = graphemes.iter().rev().take_while(|g| punct_grapheme(g)).count();
        out.extend(graphemes[..lead].iter().map(|g| g.to_string()));
        out.push(graphemes[lead..graphemes.len() - trail].concat());
        out.extend(graphemes[graphemes.len() - trail..].iter().map(|g| g.to_string()));
    }
    out
}

fn attaches_left(token: &str) -> bool {
    matches!(token, "\u{0964}" | "\u{0965}" | "," | "." | "!" | "?" | ";" | ":")
}

/// Joins tokens with single spaces; closing punctuation such as the danda
/// is attached to the preceding word.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for tok in tokens {
        let tok = tok.as_ref();
        if !out.is_empty() && !attaches_left(tok) {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}
