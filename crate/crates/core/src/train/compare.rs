//! Runs several data strategies on the same synthetic suite and reports
//! per-task curves and final held-out losses.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::model::{ModelConfig, OmniModel};
use crate::train::plan::{source_modality, MixRecipe, Strategy, SOURCES};
use crate::train::run::{evaluate, run_stage, MetricTrace, RunSettings};
use crate::train::synth::{OracleFit, SyntheticSuite};

/// The task every strategy learns first under the progressive schedule.
pub const STAGE1_TASK: &str = "image-caption";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    /// Steps per progressive stage; single-stage strategies run five times as
    /// many so every strategy sees the same number of updates.
    pub steps_per_stage: usize,
    pub shrink: f64,
    pub lr_scale: f64,
    pub batch_divisor: usize,
    pub eval_samples: usize,
    pub noise: f32,
    pub model: ModelConfig,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            steps_per_stage: 40,
            shrink: super::plan::DEFAULT_SHRINK,
            lr_scale: RunSettings::default().lr_scale,
            batch_divisor: RunSettings::default().batch_divisor,
            eval_samples: 32,
            noise: 0.1,
            model: ModelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyRun {
    pub strategy: Strategy,
    pub seed: u64,
    /// Held-out loss per task after the last step.
    pub final_loss: BTreeMap<String, f64>,
    /// Mean final loss over the tasks of each base modality.
    pub final_modality_loss: BTreeMap<String, f64>,
    #[serde(skip)]
    pub trace: MetricTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendCheck {
    pub task: String,
    /// Seeds on which progressive's final loss was at most direct-mix's.
    pub progressive_not_worse: usize,
    pub seeds_compared: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyReport {
    pub config: CompareConfig,
    pub runs: Vec<StrategyRun>,
    /// Least-squares reference fit per task.
    pub oracle: BTreeMap<String, OracleFit>,
    pub trend: Option<TrendCheck>,
}

impl StrategyReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Plot data with columns `strategy,seed,stage,step,task,loss`; steps are
    /// numbered globally across stages.
    pub fn write_curves<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["strategy", "seed", "stage", "step", "task", "loss"]).map_err(io)?;
        for run in &self.runs {
            for (global, s) in run.trace.steps.iter().enumerate() {
                for (task, loss) in &s.losses {
                    w.write_record([
                        run.strategy.as_str(),
                        &run.seed.to_string(),
                        s.stage.as_str(),
                        &global.to_string(),
                        task,
                        &format!("{loss:.9}"),
                    ])
                    .map_err(io)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn curves_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_curves(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

fn run_recipe(recipe: &MixRecipe, seed: u64, cfg: &CompareConfig, suite: &SyntheticSuite) -> Result<StrategyRun> {
    let plans = recipe.plans(cfg.shrink)?;
    let steps = if plans.len() == 1 { cfg.steps_per_stage * 5 } else { cfg.steps_per_stage };
    let settings = RunSettings { steps, lr_scale: cfg.lr_scale, batch_divisor: cfg.batch_divisor };
    let mut model = OmniModel::new(&ModelConfig { seed: cfg.model.seed ^ seed, ..cfg.model.clone() })?;
    let mut trace = MetricTrace::default();
    for (i, plan) in plans.iter().enumerate() {
        trace.extend(run_stage(plan, &mut model, suite, seed.wrapping_mul(31).wrapping_add(i as u64), &settings)?);
    }
    let sources: Vec<&str> = SOURCES.iter().map(|(s, _)| *s).collect();
    let final_loss = evaluate(&model, suite, &sources, cfg.eval_samples)?;
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (task, loss) in &final_loss {
        for sense in source_modality(task).expect("known source").senses() {
            let e = sums.entry(sense.to_string()).or_default();
            e.0 += loss;
            e.1 += 1;
        }
    }
    let final_modality_loss = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    Ok(StrategyRun { strategy: recipe.strategy, seed, final_loss, final_modality_loss, trace })
}

/// Runs every recipe under every seed. Runs share nothing mutable, so they go
/// in parallel; the report keeps recipe-major, seed-minor order.
pub fn compare_strategies(recipes: &[MixRecipe], seeds: &[u64], cfg: &CompareConfig) -> Result<StrategyReport> {
    if recipes.len() < 2 {
        return Err(Error::precondition("strategy comparison needs at least two recipes"));
    }
    if seeds.is_empty() {
        return Err(Error::precondition("strategy comparison needs at least one seed"));
    }
    let suite = SyntheticSuite::new(&cfg.model, cfg.model.seed, cfg.noise)?;
    let jobs: Vec<(&MixRecipe, u64)> = recipes.iter().flat_map(|r| seeds.iter().map(move |&s| (r, s))).collect();
    let runs = jobs.par_iter().map(|(r, s)| run_recipe(r, *s, cfg, &suite)).collect::<Result<Vec<_>>>()?;

    let final_of = |strategy: Strategy, seed: u64| {
        runs.iter().find(|r| r.strategy == strategy && r.seed == seed).map(|r| r.final_loss[STAGE1_TASK])
    };
    let pairs: Vec<(f64, f64)> = seeds
        .iter()
        .filter_map(|&s| Some((final_of(Strategy::Progressive, s)?, final_of(Strategy::DirectMix, s)?)))
        .collect();
    let trend = (!pairs.is_empty()).then(|| TrendCheck {
        task: STAGE1_TASK.to_string(),
        progressive_not_worse: pairs.iter().filter(|(p, d)| p <= d).count(),
        seeds_compared: pairs.len(),
    });

    let oracle = suite.oracles(SOURCES.iter().map(|(s, _)| *s))?;
    Ok(StrategyReport { config: cfg.clone(), runs, oracle, trend })
}
