//! Line-oriented manifests: a header object, then one entry per line.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};
use crate::filter::FilterVerdict;
use crate::qa::QaPair;
use crate::record::VideoRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Video-audio question answering.
    VideoQa,
    /// Subtitling (speech recognition) on the video's audio.
    VideoAsr,
    /// Failed a filter.
    Discarded,
    /// Passed filtering but produced too few QA pairs.
    Rejected,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::VideoQa => "video-qa",
            Task::VideoAsr => "video-asr",
            Task::Discarded => "discarded",
            Task::Rejected => "rejected",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub source: String,
    pub subtitle: Option<String>,
    pub qa: Vec<QaPair>,
    pub verdicts: Vec<FilterVerdict>,
    pub task: Task,
    /// Instruction text for ASR entries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub recipe: String,
    pub seed: u64,
    pub counts: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(recipe: impl Into<String>, seed: u64, entries: Vec<ManifestEntry>) -> Self {
        let mut counts = BTreeMap::new();
        for e in &entries {
            *counts.entry(e.task.as_str().to_string()).or_insert(0) += 1;
        }
        Self { header: ManifestHeader { recipe: recipe.into(), seed, counts }, entries }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| ForgeError::Input("manifest is empty".into()))?;
        let header: ManifestHeader =
            serde_json::from_str(first).map_err(|e| ForgeError::Input(format!("manifest header: {e}")))?;
        let entries = lines
            .map(|(n, l)| {
                serde_json::from_str(l).map_err(|e| ForgeError::Input(format!("manifest line {}: {e}", n + 1)))
            })
            .collect::<Result<Vec<ManifestEntry>>>()?;
        Ok(Self { header, entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    /// Entries that made it into training data.
    pub fn kept(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| matches!(e.task, Task::VideoQa | Task::VideoAsr))
    }
}

/// Checks that every entry traces to a source record, that no `(id, task)`
/// pair repeats, and that every discarded entry carries exactly one failing
/// verdict.
pub fn validate_manifest(manifest: &Manifest, records: &[VideoRecord]) -> Result<()> {
    let ids: BTreeSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let mut seen = BTreeSet::new();
    for e in &manifest.entries {
        if !ids.contains(e.id.as_str()) {
            return Err(ForgeError::Input(format!("orphan manifest entry '{}'", e.id)));
        }
        if !seen.insert((e.id.as_str(), e.task)) {
            return Err(ForgeError::Input(format!("duplicate {} entry for '{}'", e.task.as_str(), e.id)));
        }
        let failing = e.verdicts.iter().filter(|v| !v.pass).count();
        let expected = usize::from(e.task == Task::Discarded);
        if failing != expected {
            return Err(ForgeError::Input(format!(
                "entry '{}' ({}) has {failing} failing verdicts",
                e.id,
                e.task.as_str()
            )));
        }
        if e.verdicts.iter().any(|v| !v.pass && v.detail.is_empty()) {
            return Err(ForgeError::Input(format!("entry '{}' has a failing verdict without detail", e.id)));
        }
    }
    Ok(())
}
