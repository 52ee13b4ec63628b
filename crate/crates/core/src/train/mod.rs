//! Toy decoder, staged training schedule and strategy comparison.

pub mod compare;
pub mod decoder;
pub mod model;
pub mod plan;
pub mod run;
pub mod synth;

pub use compare::{compare_strategies, CompareConfig, StrategyReport};
pub use decoder::{cross_entropy, BlockParams, DecoderBlockOp, ToyDecoder};
pub use model::{ModelConfig, OmniModel, Sample};
pub use plan::{build_stage_plan, freeze_mask, MixRecipe, ParamGroup, StageId, StagePlan, Strategy};
pub use run::{run_stage, MetricTrace, RunSettings, TraceStep};
pub use synth::SyntheticSuite;
