//! String distances: Levenshtein, character error rate and ANLS.

use unicode_normalization::UnicodeNormalization;

/// Unit-cost edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    levenshtein_chars(&a, &b)
}

pub(crate) fn levenshtein_chars(a: &[char], b: &[char]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let substitute = prev[j] + usize::from(ca != cb);
            cur[j + 1] = substitute.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// NFC, whitespace runs collapsed to one space, trimmed. Case is kept.
pub fn normalize_text(s: &str) -> String {
    let nfc: String = s.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Character error rate of `hypothesis` against `reference` after
/// normalization. Not capped at 1.
pub fn cer(hypothesis: &str, reference: &str) -> f64 {
    let h: Vec<char> = normalize_text(hypothesis).chars().collect();
    let r: Vec<char> = normalize_text(reference).chars().collect();
    levenshtein_chars(&h, &r) as f64 / r.len().max(1) as f64
}

fn anls_normalize(s: &str) -> Vec<char> {
    normalize_text(s).to_lowercase().chars().collect()
}

/// Average Normalized Levenshtein Similarity of one answer against its golds.
///
/// Case-insensitive with whitespace collapsed; a normalized distance at or
/// above `tau` scores zero.
pub fn anls<S: AsRef<str>>(predicted: &str, golds: &[S], tau: f64) -> f64 {
    let p = anls_normalize(predicted);
    golds
        .iter()
        .map(|g| {
            let g = anls_normalize(g.as_ref());
            let longest = p.len().max(g.len());
            let nl = if longest == 0 {
                0.0
            } else {
                levenshtein_chars(&p, &g) as f64 / longest as f64
            };
            if nl < tau {
                1.0 - nl
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

pub const ANLS_TAU: f64 = 0.5;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("abc", "abc"), 0);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("✗✓", "✓"), 1);
    }

    #[test]
    fn cer_examples() {
        assert_eq!(cer("same", "same"), 0.0);
        assert_eq!(cer("", "abcd"), 1.0);
        assert_eq!(cer("abXd", "abcd"), 0.25);
        assert_eq!(cer("a  b\n", " a b"), 0.0);
        assert!(cer("abcdefgh", "ab") > 1.0);
        assert_eq!(cer("", ""), 0.0);
    }

    #[test]
    fn cer_uses_nfc() {
        // "é" precomposed vs decomposed
        assert_eq!(cer("caf\u{e9}", "cafe\u{301}"), 0.0);
    }

    #[test]
    fn anls_examples() {
        assert_eq!(anls("Paris", &["paris"], ANLS_TAU), 1.0);
        assert_eq!(anls("xyz", &["abc"], ANLS_TAU), 0.0);
        assert!((anls("hallo", &["hello"], ANLS_TAU) - 0.8).abs() < 1e-12);
        assert!((anls("hallo", &["zzzzzzz", "hello"], ANLS_TAU) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn anls_threshold_is_strict() {
        // distance exactly tau scores zero
        assert_eq!(anls("ab", &["cb"], 0.5), 0.0);
    }
}
