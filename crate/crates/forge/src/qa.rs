//! Question-answer generation from subtitles through the QA model.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};
use crate::record::VideoRecord;
use crate::service::{call_with_retry, ServiceClient, ServiceRequest, ServiceRole};

pub const QA_PROMPT: &str = "Please generate at least three questions and answers based on the information in the subtitle. You can refer to the video for additional context. The questions and answers must be highly relevant to the subtitle and video and should not include fabricated content.";

/// Fewest pairs a reply must contain to be kept.
pub const MIN_PAIRS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Subtitle,
    Video,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QaOutcome {
    Accepted(Vec<QaPair>),
    /// Fewer than [`MIN_PAIRS`] pairs; kept for the manifest's record.
    Rejected(Vec<QaPair>),
}

static QUESTION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^\s*(?:\d+\s*[.)]\s*)?(?:q|question)\s*\d*\s*[:.)]\s*(.*)$").expect("valid regex")
});
static ANSWER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^\s*(?:a|answer)\s*\d*\s*[:.)]\s*(.*)$").expect("valid regex"));
static TAG: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\s*\[(subtitle|video|both)\]\s*$").expect("valid regex"));

fn finish(q: &mut Option<String>, a: &mut Option<String>, out: &mut Vec<QaPair>) {
    if let (Some(question), Some(answer)) = (q.take(), a.take()) {
        let (answer, provenance) = match TAG.captures(&answer) {
            Some(c) => {
                let p = match c[1].to_ascii_lowercase().as_str() {
                    "subtitle" => Provenance::Subtitle,
                    "video" => Provenance::Video,
                    _ => Provenance::Both,
                };
                (answer[..c.get(0).expect("match").start()].to_string(), p)
            }
            None => (answer, Provenance::Both),
        };
        let (question, answer) = (question.trim().to_string(), answer.trim().to_string());
        if !question.is_empty() && !answer.is_empty() {
            out.push(QaPair { question, answer, provenance });
        }
    }
}

/// Extracts `Q:`/`A:` blocks (optionally numbered, e.g. `1. Q:` or
/// `Question 2:`). Unlabelled lines continue the current field; an answer may
/// end with a `[subtitle]`, `[video]` or `[both]` tag.
pub fn parse_qa(reply: &str) -> Vec<QaPair> {
    let mut out = Vec::new();
    let (mut q, mut a): (Option<String>, Option<String>) = (None, None);
    for line in reply.lines() {
        if let Some(c) = QUESTION.captures(line) {
            finish(&mut q, &mut a, &mut out);
            q = Some(c[1].to_string());
            a = None;
        } else if let Some(c) = ANSWER.captures(line) {
            if q.is_some() && a.is_none() {
                a = Some(c[1].to_string());
            }
        } else if !line.trim().is_empty() {
            let field = if a.is_some() { &mut a } else { &mut q };
            if let Some(text) = field {
                text.push(' ');
                text.push_str(line.trim());
            }
        }
    }
    finish(&mut q, &mut a, &mut out);
    out
}

pub fn qa_request(record: &VideoRecord, subtitle: &str) -> ServiceRequest {
    ServiceRequest {
        role: ServiceRole::QaVlm,
        prompt: format!("{QA_PROMPT}\nSubtitle: {subtitle}"),
        media: Some(record.media_path.clone()),
    }
}

/// Generates QA pairs for a record that passed filtering.
pub fn generate_qa(
    record: &VideoRecord,
    subtitle: &str,
    client: &dyn ServiceClient,
    retries: usize,
) -> Result<QaOutcome> {
    if client.role() != ServiceRole::QaVlm {
        return Err(ForgeError::Config(format!("QA generation needs a qa-vlm client, got {}", client.role())));
    }
    let reply = call_with_retry(client, &qa_request(record, subtitle), retries)?;
    let pairs = parse_qa(&reply);
    if pairs.is_empty() {
        return Err(ForgeError::Pipeline { id: record.id.clone(), raw: reply });
    }
    Ok(if pairs.len() >= MIN_PAIRS { QaOutcome::Accepted(pairs) } else { QaOutcome::Rejected(pairs) })
}
