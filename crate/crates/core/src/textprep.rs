//! Review text normalization: lowercase, strip URLs and mentions, keep only
//! `a-z`, collapse whitespace.

use std::fmt;

/// Text containing only `a-z` words separated by single spaces, with no
/// leading or trailing space. Only [`clean_text`] constructs it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CleanText(String);

impl CleanText {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.0.split(' ').filter(|t| !t.is_empty())
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl fmt::Display for CleanText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for CleanText {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

fn is_url_or_mention(token: &str) -> bool {
    token.starts_with("http://")
        || token.starts_with("https://")
        || token.starts_with("www.")
        || token.starts_with('@')
}

/// Normalizes raw review text. Total: any input yields a valid [`CleanText`].
///
/// URL tokens (`http://`, `https://`, `www.` prefixes) and mentions (`@...`)
/// are removed as whole whitespace-delimited tokens *before* the character
/// filter, so no `http` fragments survive.
pub fn clean_text(raw: &str) -> CleanText {
    let lowered = raw.to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    for token in lowered.split_whitespace() {
        if is_url_or_mention(token) {
            continue;
        }
        // Every non a-z character becomes a separator.
        for word in token.split(|c: char| !c.is_ascii_lowercase()) {
            if word.is_empty() {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(word);
        }
    }
    CleanText(out)
}
