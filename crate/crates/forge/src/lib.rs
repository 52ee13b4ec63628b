//! Cross-modal video-audio data curation: subtitle filtering, LLM-backed
//! completeness checks and QA generation through role-based service clients,
//! and seeded dataset mixing.

pub mod error;
pub mod filter;
pub mod manifest;
pub mod mix;
pub mod pipeline;
pub mod qa;
pub mod record;
pub mod service;

pub use error::{ForgeError, Result};
pub use filter::{
    english_ratio_filter, length_filter, llm_completeness_filter, FilterConfig, FilterStage, FilterVerdict,
};
pub use manifest::{Manifest, ManifestEntry, ManifestHeader, Task};
pub use mix::{mix_datasets, Fraction, MixRecipe, MixSource};
pub use pipeline::{filter_record, run_pipeline, subtitle_tasks, Clients, PipelineConfig};
pub use qa::{generate_qa, parse_qa, Provenance, QaOutcome, QaPair};
pub use record::{VideoRecord, VideoSource};
pub use service::{FixtureClient, HttpClient, ServiceClient, ServiceRequest, ServiceRole};
