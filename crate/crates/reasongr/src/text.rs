//! Shared text normalization: one tokenizer feeds keyword extraction, the
//! vocabulary, and the BM25 index so every consumer sees the same terms.

/// Built-in stopword list, fixed so keyword extraction is reproducible.
pub const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "all", "also", "am", "an", "and",
    "any", "are", "as", "at", "be", "because", "been", "before", "being",
    "below", "between", "both", "but", "by", "can", "could", "did", "do",
    "does", "doing", "down", "during", "each", "few", "for", "from",
    "further", "had", "has", "have", "having", "he", "her", "here", "hers",
    "him", "his", "how", "i", "if", "in", "into", "is", "it", "its",
    "itself", "just", "may", "me", "might", "more", "most", "must", "my",
    "no", "nor", "not", "now", "of", "off", "on", "once", "only", "or",
    "other", "our", "ours", "out", "over", "own", "per", "same", "shall",
    "she", "should", "so", "some", "such", "than", "that", "the", "their",
    "theirs", "them", "then", "there", "these", "they", "this", "those",
    "through", "to", "too", "under", "until", "up", "upon", "us", "very",
    "was", "we", "were", "what", "when", "where", "which", "while", "who",
    "whom", "why", "will", "with", "would", "you", "your", "yours",
];

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}

/// Lowercases and strips every non-alphanumeric character. Returns an empty
/// string for pure-punctuation input.
pub fn normalize_token(raw: &str) -> String {
    raw.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(|c| c.to_lowercase())
        .collect()
}

/// Whitespace-splits `text` and normalizes each piece, dropping tokens that
/// are empty after normalization. Stopwords are kept; filtering them is the
/// caller's decision.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(normalize_token)
        .filter(|t| !t.is_empty())
        .collect()
}

/// `tokenize` with stopwords removed, the form used for keyword candidates.
pub fn content_tokens(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| !is_stopword(t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stopwords_sorted_for_binary_search() {
        let mut sorted = STOPWORDS.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, STOPWORDS, "STOPWORDS must stay sorted");
    }

    #[test]
    fn stopword_count_near_advertised_size() {
        assert!((110..=140).contains(&STOPWORDS.len()));
    }

    #[test]
    fn normalize_strips_punctuation_and_case() {
        assert_eq!(normalize_token("Mark-to-Market,"), "marktomarket");
        assert_eq!(normalize_token("$1,234"), "1234");
        assert_eq!(normalize_token("..."), "");
    }

    #[test]
    fn tokenize_drops_pure_punctuation() {
        assert_eq!(tokenize("revenue | 2019 | 100"), vec!["revenue", "2019", "100"]);
    }

    #[test]
    fn content_tokens_drop_stopwords() {
        assert_eq!(content_tokens("the hedge and the currency"), vec!["hedge", "currency"]);
    }
}
