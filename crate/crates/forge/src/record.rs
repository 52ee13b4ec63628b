use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VideoSource {
    /// Academic video corpora; subtitles come from ASR and must be filtered.
    Academic,
    /// Curated open-ended videos whose subtitles are used as is.
    OpenEnded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub id: String,
    pub source: VideoSource,
    #[serde(default)]
    pub subtitle: Option<String>,
    /// Seconds.
    pub duration: f64,
    pub media_path: String,
}

/// Parses one record per non-blank line and rejects duplicate ids.
pub fn parse_records(text: &str) -> Result<Vec<VideoRecord>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: VideoRecord =
            serde_json::from_str(line).map_err(|e| ForgeError::Input(format!("record line {}: {e}", n + 1)))?;
        if !seen.insert(rec.id.clone()) {
            return Err(ForgeError::Input(format!("duplicate record id '{}'", rec.id)));
        }
        if !(rec.duration >= 0.0 && rec.duration.is_finite()) {
            return Err(ForgeError::Input(format!("record '{}' has invalid duration", rec.id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_records(path: impl AsRef<std::path::Path>) -> Result<Vec<VideoRecord>> {
    parse_records(&std::fs::read_to_string(path)?)
}

pub fn records_to_jsonl(records: &[VideoRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
