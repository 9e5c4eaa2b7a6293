//! Tokenization and overlap helpers shared by the grounder, the planner
//! feature map and the reward model.

use std::collections::BTreeSet;

/// Words that name an element role. Removed before label overlap is measured.
pub const ROLE_WORDS: [&str; 6] = ["button", "link", "textbox", "checkbox", "listitem", "label"];

/// Words that make up the closed spatial vocabulary.
pub const SPATIAL_WORDS: [&str; 5] = ["top", "bottom", "left", "right", "center"];

const FILLER_WORDS: [&str; 8] = ["the", "a", "an", "on", "of", "in", "at", "to"];

/// Lowercased alphanumeric runs, in order of appearance.
pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

pub fn is_stop_word(token: &str) -> bool {
    ROLE_WORDS.contains(&token) || SPATIAL_WORDS.contains(&token) || FILLER_WORDS.contains(&token)
}

/// Token set with role, spatial and filler words removed.
pub fn content_tokens(text: &str) -> BTreeSet<String> {
    tokens(text).into_iter().filter(|t| !is_stop_word(t)).collect()
}

/// Jaccard overlap; two empty sets score 0.
pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Every double-quoted substring of `text`, in order.
pub fn quoted_payloads(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find('"') {
        let after = &rest[start + 1..];
        match after.find('"') {
            Some(end) => {
                out.push(after[..end].to_string());
                rest = &after[end + 1..];
            }
            None => break,
        }
    }
    out
}

/// Last alphabetic token that is not a stop word.
pub fn last_content_word(text: &str) -> Option<String> {
    tokens(text).into_iter().rev().find(|t| t.chars().all(char::is_alphabetic) && !is_stop_word(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_strip_quotes_and_case() {
        assert_eq!(tokens("the 'Submit' button"), vec!["the", "submit", "button"]);
    }

    #[test]
    fn content_tokens_drop_roles_and_regions() {
        let set = content_tokens("the 'Submit' button on the bottom right");
        assert_eq!(set.into_iter().collect::<Vec<_>>(), vec!["submit"]);
    }

    #[test]
    fn jaccard_half() {
        let a = content_tokens("Submit");
        let b = content_tokens("Submit order");
        assert_eq!(jaccard(&a, &b), 0.5);
        assert_eq!(jaccard(&BTreeSet::new(), &BTreeSet::new()), 0.0);
    }

    #[test]
    fn payload_extraction() {
        assert_eq!(quoted_payloads(r#"type "latte" into Search notes"#), vec!["latte"]);
        assert!(quoted_payloads("no quotes").is_empty());
        assert_eq!(last_content_word("press Submit order."), Some("order".into()));
    }
}
