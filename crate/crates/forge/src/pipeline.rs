//! The full curation run: subtitles, filters, QA, subtitle tasks.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::filter::{filter_chain, FilterConfig, FilterStage, FilterVerdict};
use crate::manifest::{Manifest, ManifestEntry, Task};
use crate::mix::Fraction;
use crate::qa::{generate_qa, QaOutcome};
use crate::record::{VideoRecord, VideoSource};
use crate::service::{call_with_retry, ServiceClient, ServiceRequest, ServiceRole};

pub const ASR_INSTRUCTION: &str = "Please give the ASR results of the given speech.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub filter: FilterConfig,
    /// Share of kept videos that also become subtitling entries.
    pub subtitle_fraction: Fraction,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { filter: FilterConfig::default(), subtitle_fraction: Fraction::ONE }
    }
}

pub struct Clients<'a> {
    pub asr: &'a dyn ServiceClient,
    pub filter: &'a dyn ServiceClient,
    pub qa: &'a dyn ServiceClient,
}

fn source_name(s: VideoSource) -> &'static str {
    match s {
        VideoSource::Academic => "academic",
        VideoSource::OpenEnded => "open-ended",
    }
}

fn entry(record: &VideoRecord, subtitle: Option<String>, verdicts: Vec<FilterVerdict>, task: Task) -> ManifestEntry {
    ManifestEntry {
        id: record.id.clone(),
        source: source_name(record.source).to_string(),
        subtitle,
        qa: Vec::new(),
        verdicts,
        task,
        instruction: None,
    }
}

pub fn asr_request(record: &VideoRecord) -> ServiceRequest {
    ServiceRequest { role: ServiceRole::Asr, prompt: String::new(), media: Some(record.media_path.clone()) }
}

/// Resolves the subtitle and runs the filters. Academic videos without a
/// subtitle are transcribed first; open-ended videos skip the filter chain.
pub fn filter_record(
    record: &VideoRecord,
    asr: &dyn ServiceClient,
    filter: &dyn ServiceClient,
    cfg: &FilterConfig,
) -> (Option<String>, Vec<FilterVerdict>) {
    let subtitle = match (&record.subtitle, record.source) {
        (Some(s), _) => s.clone(),
        (None, VideoSource::Academic) => match call_with_retry(asr, &asr_request(record), cfg.retries) {
            Ok(s) => s,
            Err(_) => {
                let v =
                    FilterVerdict { stage: FilterStage::EnglishRatio, pass: false, detail: "asr service-error".into() };
                return (None, vec![v]);
            }
        },
        (None, VideoSource::OpenEnded) => String::new(),
    };
    let verdicts = match record.source {
        VideoSource::Academic => filter_chain(&subtitle, cfg, filter),
        VideoSource::OpenEnded if subtitle.trim().is_empty() => {
            vec![FilterVerdict { stage: FilterStage::EnglishRatio, pass: false, detail: "empty".into() }]
        }
        VideoSource::OpenEnded => Vec::new(),
    };
    (Some(subtitle), verdicts)
}

fn curate_one(record: &VideoRecord, clients: &Clients, cfg: &PipelineConfig) -> Result<ManifestEntry> {
    let (subtitle, verdicts) = filter_record(record, clients.asr, clients.filter, &cfg.filter);
    let subtitle = match subtitle {
        Some(s) if verdicts.iter().all(|v| v.pass) => s,
        other => return Ok(entry(record, other, verdicts, Task::Discarded)),
    };
    let (pairs, task) = match generate_qa(record, &subtitle, clients.qa, cfg.filter.retries)? {
        QaOutcome::Accepted(p) => (p, Task::VideoQa),
        QaOutcome::Rejected(p) => (p, Task::Rejected),
    };
    let mut e = entry(record, Some(subtitle), verdicts, task);
    e.qa = pairs;
    Ok(e)
}

/// Subtitling entries for `floor(fraction · n)` seeded picks among the `n`
/// records that have a subtitle, in input order. Records without one are
/// skipped and logged.
pub fn subtitle_tasks(records: &[VideoRecord], fraction: Fraction, seed: u64) -> (Vec<ManifestEntry>, Vec<String>) {
    let mut log = Vec::new();
    let with: Vec<&VideoRecord> = records
        .iter()
        .filter(|r| match &r.subtitle {
            Some(s) if !s.trim().is_empty() => true,
            _ => {
                log.push(format!("skip {}: no subtitle", r.id));
                false
            }
        })
        .collect();
    let k = fraction.of(with.len());
    let mut picks = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), with.len(), k).into_vec();
    picks.sort_unstable();
    let entries = picks
        .into_iter()
        .map(|i| {
            let r = with[i];
            let mut e = entry(r, r.subtitle.clone(), Vec::new(), Task::VideoAsr);
            e.instruction = Some(ASR_INSTRUCTION.to_string());
            e
        })
        .collect();
    (entries, log)
}

/// Runs curation over every record (in parallel, output in input order) and
/// appends subtitling entries for the videos that produced QA data.
pub fn run_pipeline(
    records: &[VideoRecord],
    clients: &Clients,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(Manifest, Vec<String>)> {
    let mut entries = records.par_iter().map(|r| curate_one(r, clients, cfg)).collect::<Result<Vec<_>>>()?;
    let kept: Vec<VideoRecord> = entries
        .iter()
        .zip(records)
        .filter(|(e, _)| e.task == Task::VideoQa)
        .map(|(e, r)| VideoRecord { subtitle: e.subtitle.clone(), ..r.clone() })
        .collect();
    let (asr, log) = subtitle_tasks(&kept, cfg.subtitle_fraction, seed);
    entries.extend(asr);
    Ok((Manifest::new("curate", seed, entries), log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, subtitle: Option<&str>) -> VideoRecord {
        VideoRecord {
            id: id.into(),
            source: VideoSource::OpenEnded,
            subtitle: subtitle.map(str::to_string),
            duration: 5.0,
            media_path: format!("{id}.mp4"),
        }
    }

    #[test]
    fn subtitle_tasks_fraction_and_skips() {
        let recs: Vec<_> = (0..83).map(|i| rec(&format!("v{i}"), Some("words here"))).collect();
        let (all, log) = subtitle_tasks(&recs, Fraction::ONE, 1);
        assert_eq!(all.len(), 83);
        assert!(log.is_empty());
        assert!(all.iter().all(|e| e.instruction.as_deref() == Some(ASR_INSTRUCTION) && e.task == Task::VideoAsr));

        let (half, _) = subtitle_tasks(&recs, "1/2".parse().unwrap(), 1);
        assert_eq!(half.len(), 41);
        let order: Vec<usize> = half.iter().map(|e| e.id[1..].parse().unwrap()).collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));

        let (none, log) = subtitle_tasks(&[rec("a", None)], Fraction::ONE, 1);
        assert!(none.is_empty());
        assert_eq!(log, vec!["skip a: no subtitle"]);
        assert!(subtitle_tasks(&[], Fraction::ONE, 1).0.is_empty());
    }
}
