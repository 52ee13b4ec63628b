//! Stage plans for progressive modality alignment and the parameter-freeze
//! schedule they imply.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StageId {
    #[serde(rename = "S1-align")]
    S1Align,
    #[serde(rename = "S1-sft")]
    S1Sft,
    #[serde(rename = "S2")]
    S2,
    #[serde(rename = "S3-align")]
    S3Align,
    #[serde(rename = "S3-joint")]
    S3Joint,
    /// Single-stage baseline used by direct mixing and balanced sampling.
    #[serde(rename = "mixed")]
    Mixed,
}

impl StageId {
    pub const PROGRESSIVE: [StageId; 5] =
        [StageId::S1Align, StageId::S1Sft, StageId::S2, StageId::S3Align, StageId::S3Joint];

    pub fn as_str(self) -> &'static str {
        match self {
            StageId::S1Align => "S1-align",
            StageId::S1Sft => "S1-sft",
            StageId::S2 => "S2",
            StageId::S3Align => "S3-align",
            StageId::S3Joint => "S3-joint",
            StageId::Mixed => "mixed",
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [StageId::S1Align, StageId::S1Sft, StageId::S2, StageId::S3Align, StageId::S3Joint, StageId::Mixed]
            .into_iter()
            .find(|id| id.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Input(format!("unknown stage '{s}' (expected S1-align, S1-sft, S2, S3-align or S3-joint)"))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    VisionEmbedder,
    VisionPooler,
    VisualConnector,
    AudioConnector,
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::VisionEmbedder,
        ParamGroup::VisionPooler,
        ParamGroup::VisualConnector,
        ParamGroup::AudioConnector,
        ParamGroup::Decoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::VisionEmbedder => "vision-embedder",
            ParamGroup::VisionPooler => "vision-pooler",
            ParamGroup::VisualConnector => "visual-connector",
            ParamGroup::AudioConnector => "audio-connector",
            ParamGroup::Decoder => "decoder",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter group '{s}'")))
    }
}

/// Modality a synthetic data source exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceModality {
    Image,
    Video,
    Audio,
    VideoAudio,
}

impl SourceModality {
    /// Base modalities (image, video, audio) the source touches.
    pub fn senses(self) -> &'static [&'static str] {
        match self {
            SourceModality::Image => &["image"],
            SourceModality::Video => &["video"],
            SourceModality::Audio => &["audio"],
            SourceModality::VideoAudio => &["video", "audio"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixEntry {
    pub source: String,
    pub modality: SourceModality,
    /// Sample count at full scale.
    pub count: u64,
    /// Pool size after the shrink factor (at least 1).
    pub shrunk: u64,
}

/// The data sources every plan draws from, with their modality.
pub const SOURCES: [(&str, SourceModality); 7] = [
    ("image-caption", SourceModality::Image),
    ("image-text", SourceModality::Image),
    ("video", SourceModality::Video),
    ("speech-asr", SourceModality::Audio),
    ("audio", SourceModality::Audio),
    ("video-audio", SourceModality::VideoAudio),
    ("video-asr", SourceModality::VideoAudio),
];

pub fn source_modality(name: &str) -> Option<SourceModality> {
    SOURCES.iter().find(|(n, _)| *n == name).map(|(_, m)| *m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: StageId,
    pub trainable: BTreeSet<ParamGroup>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_frames: usize,
    pub max_chunks: usize,
    pub shrink: f64,
    pub mix: Vec<MixEntry>,
    /// Free-form notes: alternative figures and labels.
    pub notes: BTreeMap<String, String>,
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be non-negative", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.trainable.is_empty() {
            return Err(Error::config(format!("stage {} has nothing to train", self.stage)));
        }
        if self.mix.is_empty() || self.mix.iter().all(|m| m.count == 0) {
            return Err(Error::config(format!("stage {} has an empty data mix", self.stage)));
        }
        Ok(())
    }

    pub fn modalities(&self) -> BTreeSet<&'static str> {
        self.mix.iter().flat_map(|m| m.modality.senses().iter().copied()).collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let plan: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }
}

fn mix(entries: &[(&str, u64)], shrink: f64) -> Vec<MixEntry> {
    entries
        .iter()
        .map(|&(source, count)| MixEntry {
            source: source.to_string(),
            modality: source_modality(source).expect("known source"),
            count,
            shrunk: ((count as f64 * shrink).round() as u64).max(1),
        })
        .collect()
}

/// Shrink applied to dataset counts when none is given.
pub const DEFAULT_SHRINK: f64 = 1e-4;

type StageRow = (&'static [ParamGroup], f64, usize, Vec<(&'static str, u64)>, usize, usize);

/// The per-stage schedule: which groups train, at what learning rate and
/// batch size, on which data.
pub fn build_stage_plan(stage: StageId, shrink: f64) -> Result<StagePlan> {
    use ParamGroup::*;
    if !(shrink > 0.0 && shrink <= 1.0) {
        return Err(Error::config(format!("shrink factor {shrink} must lie in (0, 1]")));
    }
    let mut notes = BTreeMap::new();
    let (trainable, lr, batch, entries, max_frames, max_chunks): StageRow = match stage {
        StageId::S1Align => (&[VisualConnector], 1e-3, 256, vec![("image-caption", 808_000)], 64, 25),
        StageId::S1Sft => {
            notes.insert("batch_size.general_finetune".into(), "256".into());
            (
                &[VisionEmbedder, VisionPooler, VisualConnector, Decoder],
                2e-5,
                128,
                vec![("image-text", 7_300_000)],
                64,
                25,
            )
        }
        StageId::S2 => (
            &[VisionPooler, VisualConnector, Decoder],
            2e-5,
            256,
            vec![("image-text", 800_000), ("video", 1_900_000)],
            64,
            25,
        ),
        StageId::S3Align => (&[AudioConnector], 1e-3, 256, vec![("speech-asr", 370_000)], 64, 25),
        StageId::S3Joint => {
            notes.insert("cross_modal_total.stated".into(), "324000".into());
            notes.insert("cross_modal_total.itemized".into(), "326000".into());
            notes.insert("image.voice_instruction_subset".into(), "200000".into());
            (
                &[VisionPooler, VisualConnector, AudioConnector, Decoder],
                1e-5,
                128,
                vec![("image-text", 600_000), ("audio", 1_100_000), ("video-audio", 243_000), ("video-asr", 83_000)],
                64,
                20,
            )
        }
        StageId::Mixed => {
            return Err(Error::Input("the mixed stage is built by a strategy recipe, not by stage id".into()))
        }
    };
    let plan = StagePlan {
        stage,
        trainable: trainable.iter().copied().collect(),
        learning_rate: lr,
        batch_size: batch,
        max_frames,
        max_chunks,
        shrink,
        mix: mix(&entries, shrink),
        notes,
    };
    plan.validate()?;
    Ok(plan)
}

/// All sources of every progressive stage merged into one stage with every
/// group trainable.
pub fn mixed_plan(shrink: f64) -> Result<StagePlan> {
    let mut totals: BTreeMap<String, u64> = BTreeMap::new();
    for stage in StageId::PROGRESSIVE {
        for entry in build_stage_plan(stage, shrink)?.mix {
            *totals.entry(entry.source).or_default() += entry.count;
        }
    }
    let refs: Vec<(&str, u64)> = totals.iter().map(|(s, c)| (s.as_str(), *c)).collect();
    let plan = StagePlan {
        stage: StageId::Mixed,
        trainable: ParamGroup::ALL.into_iter().collect(),
        learning_rate: 2e-5,
        batch_size: 128,
        max_frames: 64,
        max_chunks: 25,
        shrink,
        mix: mix(&refs, shrink),
        notes: BTreeMap::new(),
    };
    plan.validate()?;
    Ok(plan)
}

/// `true` exactly for the plan's trainable groups, in [`ParamGroup::ALL`] order.
pub fn freeze_mask(model_groups: &BTreeSet<ParamGroup>, plan: &StagePlan) -> Result<BTreeMap<ParamGroup, bool>> {
    if plan.trainable.is_empty() {
        return Err(Error::config(format!("stage {} has nothing to train", plan.stage)));
    }
    if let Some(missing) = plan.trainable.iter().find(|g| !model_groups.contains(g)) {
        return Err(Error::config(format!("plan trains group '{missing}' which the model does not have")));
    }
    Ok(model_groups.iter().map(|&g| (g, plan.trainable.contains(&g))).collect())
}

/// How a strategy comparison schedules data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Progressive,
    DirectMix,
    Balanced,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Progressive => "progressive",
            Strategy::DirectMix => "direct-mix",
            Strategy::Balanced => "balanced",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "progressive" => Ok(Strategy::Progressive),
            "direct-mix" | "direct" => Ok(Strategy::DirectMix),
            "balanced" => Ok(Strategy::Balanced),
            other => Err(Error::Input(format!("unknown strategy '{other}'"))),
        }
    }
}

/// A strategy plus per-source sampling multipliers (absent sources keep 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixRecipe {
    pub strategy: Strategy,
    #[serde(default)]
    pub weights: BTreeMap<String, f64>,
}

impl MixRecipe {
    pub fn new(strategy: Strategy, weights: BTreeMap<String, f64>) -> Result<Self> {
        if weights.values().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("mix weights must be non-negative"));
        }
        if !weights.is_empty() && weights.values().all(|w| *w == 0.0) {
            return Err(Error::config("mix weights are all zero"));
        }
        Ok(Self { strategy, weights })
    }

    /// Unit weights, except `balanced`, which upsamples every base modality
    /// to the size of the largest one.
    pub fn standard(strategy: Strategy, shrink: f64) -> Result<Self> {
        let mut weights: BTreeMap<String, f64> = SOURCES.iter().map(|(s, _)| (s.to_string(), 1.0)).collect();
        if strategy == Strategy::Balanced {
            let plan = mixed_plan(shrink)?;
            let mut per_modality: BTreeMap<SourceModality, u64> = BTreeMap::new();
            for m in &plan.mix {
                *per_modality.entry(m.modality).or_default() += m.count;
            }
            let target = *per_modality.values().max().expect("non-empty mix") as f64;
            for m in &plan.mix {
                weights.insert(m.source.clone(), target / per_modality[&m.modality] as f64);
            }
        }
        Self::new(strategy, weights)
    }

    /// Scales a plan's counts by the recipe weights; zero-weight sources drop
    /// out of the mix.
    pub fn apply(&self, plan: &StagePlan) -> Result<StagePlan> {
        let mut out = plan.clone();
        out.mix = plan
            .mix
            .iter()
            .filter_map(|m| {
                let w = self.weights.get(&m.source).copied().unwrap_or(1.0);
                (w > 0.0).then(|| MixEntry { count: (m.count as f64 * w).round() as u64, ..m.clone() })
            })
            .collect();
        out.notes.insert("strategy".into(), self.strategy.as_str().into());
        out.validate()?;
        Ok(out)
    }

    /// The plans this recipe runs, in order.
    pub fn plans(&self, shrink: f64) -> Result<Vec<StagePlan>> {
        let base = match self.strategy {
            Strategy::Progressive => {
                StageId::PROGRESSIVE.into_iter().map(|s| build_stage_plan(s, shrink)).collect::<Result<Vec<_>>>()?
            }
            Strategy::DirectMix | Strategy::Balanced => vec![mixed_plan(shrink)?],
        };
        base.iter().map(|p| self.apply(p)).collect()
    }
}
