//! Token normalization shared by the toy providers, the QFF token hasher and
//! the answer metrics.

/// Lowercases, strips leading/trailing non-alphanumeric characters and drops
/// tokens that end up empty.
pub fn normalize_token(raw: &str) -> Option<String> {
    let trimmed = raw.trim_matches(|c: char| !c.is_alphanumeric());
    if trimmed.is_empty() {
        None
    } else {
        Some(trimmed.to_lowercase())
    }
}

/// Whitespace split followed by [`normalize_token`].
pub fn normalized_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().filter_map(normalize_token).collect()
}
