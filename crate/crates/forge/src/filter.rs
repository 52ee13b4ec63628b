//! The order-fixed subtitle filter chain: English ratio, length, then an LLM
//! completeness check.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::service::{call_with_retry, ServiceClient, ServiceRequest, ServiceRole};

pub const COMPLETENESS_PROMPT: &str = "I will give you a subtitle generated from a video. Identify whether the subtitle is complete, fluent, and informative. Answer directly with yes or no and do not add other explanations.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterStage {
    EnglishRatio,
    Length,
    LlmCompleteness,
}

impl FilterStage {
    pub fn as_str(self) -> &'static str {
        match self {
            FilterStage::EnglishRatio => "english-ratio",
            FilterStage::Length => "length",
            FilterStage::LlmCompleteness => "llm-completeness",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub stage: FilterStage,
    pub pass: bool,
    /// Measured value or model reply; always set on failure.
    pub detail: String,
}

impl FilterVerdict {
    fn new(stage: FilterStage, pass: bool, detail: impl Into<String>) -> Self {
        Self { stage, pass, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub threshold: f64,
    pub min_words: usize,
    pub retries: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { threshold: 0.8, min_words: 10, retries: 3 }
    }
}

static ENGLISH_WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[A-Za-z']+$").expect("valid regex"));

/// A whitespace token counts as English when, after trimming surrounding ASCII
/// punctuation other than the apostrophe, it is a nonempty run of
/// `[A-Za-z']`.
pub fn is_english_token(token: &str) -> bool {
    let core = token.trim_matches(|c: char| c.is_ascii_punctuation() && c != '\'');
    ENGLISH_WORD.is_match(core)
}

/// English tokens over all whitespace tokens.
pub fn english_ratio(subtitle: &str) -> Option<f64> {
    let tokens: Vec<&str> = subtitle.split_whitespace().collect();
    if tokens.is_empty() {
        return None;
    }
    Some(tokens.iter().filter(|t| is_english_token(t)).count() as f64 / tokens.len() as f64)
}

pub fn english_ratio_filter(subtitle: &str, threshold: f64) -> FilterVerdict {
    match english_ratio(subtitle) {
        None => FilterVerdict::new(FilterStage::EnglishRatio, false, "empty"),
        Some(r) => FilterVerdict::new(FilterStage::EnglishRatio, r >= threshold, format!("ratio={r:.4}")),
    }
}

pub fn length_filter(subtitle: &str, min_words: usize) -> FilterVerdict {
    let n = subtitle.split_whitespace().count();
    FilterVerdict::new(FilterStage::Length, n >= min_words, format!("words={n}"))
}

pub fn completeness_request(subtitle: &str) -> ServiceRequest {
    ServiceRequest { role: ServiceRole::FilterLlm, prompt: format!("{COMPLETENESS_PROMPT}\n{subtitle}"), media: None }
}

/// Asks the filter model whether the subtitle is usable; only a reply that
/// starts with "yes" (case-insensitive, trimmed) passes.
pub fn llm_completeness_filter(subtitle: &str, client: &dyn ServiceClient, retries: usize) -> FilterVerdict {
    let stage = FilterStage::LlmCompleteness;
    if client.role() != ServiceRole::FilterLlm {
        return FilterVerdict::new(stage, false, "service-error");
    }
    let reply = match call_with_retry(client, &completeness_request(subtitle), retries) {
        Ok(r) => r,
        Err(_) => return FilterVerdict::new(stage, false, "service-error"),
    };
    let norm = reply.trim().to_lowercase();
    if norm.starts_with("yes") {
        FilterVerdict::new(stage, true, reply.trim())
    } else if norm.starts_with("no") {
        FilterVerdict::new(stage, false, reply.trim())
    } else {
        FilterVerdict::new(stage, false, "unparseable")
    }
}

/// Runs the chain in order and stops at the first failure, so a discarded
/// subtitle carries exactly one failing verdict.
pub fn filter_chain(subtitle: &str, cfg: &FilterConfig, client: &dyn ServiceClient) -> Vec<FilterVerdict> {
    let mut out = Vec::with_capacity(3);
    let steps: [&dyn Fn() -> FilterVerdict; 3] =
        [&|| english_ratio_filter(subtitle, cfg.threshold), &|| length_filter(subtitle, cfg.min_words), &|| {
            llm_completeness_filter(subtitle, client, cfg.retries)
        }];
    for step in steps {
        let v = step();
        let pass = v.pass;
        out.push(v);
        if !pass {
            break;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;

    struct Reply(&'static str);

    impl ServiceClient for Reply {
        fn role(&self) -> ServiceRole {
            ServiceRole::FilterLlm
        }

        fn call(&self, request: &ServiceRequest) -> Result<String> {
            assert!(request.prompt.starts_with(COMPLETENESS_PROMPT));
            Ok(self.0.to_string())
        }
    }

    #[test]
    fn short_english_passes_ratio_but_not_length() {
        let v = english_ratio_filter("the quick brown fox", 0.8);
        assert!(v.pass);
        assert_eq!(v.detail, "ratio=1.0000");
        let l = length_filter("the quick brown fox", 10);
        assert!(!l.pass);
        assert_eq!(l.detail, "words=4");
    }

    #[test]
    fn mixed_script_ratio() {
        let text = "one two three four five six seven eight nine ten 一 二 三 四 五 六 七 八 九 十";
        assert_eq!(english_ratio(text), Some(0.5));
        assert!(!english_ratio_filter(text, 0.8).pass);
    }

    #[test]
    fn token_rule() {
        assert!(is_english_token("don't"));
        assert!(is_english_token("\"Hello,"));
        assert!(is_english_token("world."));
        assert!(!is_english_token("..."));
        assert!(!is_english_token("42"));
        assert!(!is_english_token("café"));
        assert!(!is_english_token("e-mail"));
    }

    #[test]
    fn empty_subtitle() {
        let v = english_ratio_filter("   ", 0.8);
        assert!(!v.pass);
        assert_eq!(v.detail, "empty");
    }

    #[test]
    fn reply_parsing() {
        assert!(llm_completeness_filter("s", &Reply("Yes"), 3).pass);
        assert!(llm_completeness_filter("s", &Reply("  YES, it is."), 3).pass);
        let no = llm_completeness_filter("s", &Reply("no"), 3);
        assert!(!no.pass && no.detail == "no");
        let odd = llm_completeness_filter("s", &Reply("It is complete."), 3);
        assert!(!odd.pass && odd.detail == "unparseable");
    }

    #[test]
    fn chain_short_circuits() {
        let cfg = FilterConfig::default();
        let v = filter_chain("hello there", &cfg, &Reply("yes"));
        assert_eq!(v.len(), 2);
        assert_eq!(v.iter().filter(|x| !x.pass).count(), 1);
        let long = "word ".repeat(12);
        let v = filter_chain(&long, &cfg, &Reply("yes"));
        assert_eq!(v.len(), 3);
        assert!(v.iter().all(|x| x.pass));
    }
}
