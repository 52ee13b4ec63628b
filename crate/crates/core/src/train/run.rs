//! The single-threaded SGD loop for one stage.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::model::{ModelGrads, OmniModel};
use crate::train::plan::{freeze_mask, ParamGroup, StageId, StagePlan};
use crate::train::synth::SyntheticSuite;

/// Desk-scale knobs layered on top of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub steps: usize,
    /// Multiplies the plan's learning rate for plain SGD on the toy model.
    pub lr_scale: f64,
    /// Divides the plan's batch size.
    pub batch_divisor: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self { steps: 200, lr_scale: 1000.0, batch_divisor: 2 }
    }
}

impl RunSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_scale >= 0.0 && self.lr_scale.is_finite()) {
            return Err(Error::config("train.lr_scale must be non-negative"));
        }
        if self.batch_divisor == 0 {
            return Err(Error::config("train.batch_divisor must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub stage: StageId,
    pub step: usize,
    /// Mean batch loss per source.
    pub losses: BTreeMap<String, f64>,
    /// Groups whose parameters changed during the step.
    pub updated: BTreeSet<ParamGroup>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTrace {
    pub steps: Vec<TraceStep>,
}

impl MetricTrace {
    pub fn extend(&mut self, other: MetricTrace) {
        self.steps.extend(other.steps);
    }

    /// Loss series of one source, in step order.
    pub fn series(&self, source: &str) -> Vec<f64> {
        self.steps.iter().filter_map(|s| s.losses.get(source).copied()).collect()
    }

    /// CSV with columns `stage,step,task,loss`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["stage", "step", "task", "loss"]).map_err(csv_err)?;
        for s in &self.steps {
            for (task, loss) in &s.losses {
                w.write_record([s.stage.as_str(), &s.step.to_string(), task, &format!("{loss:.9}")])
                    .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Per-source batch quotas proportional to full-scale counts, by largest
/// remainder, with every source getting at least one slot.
pub fn batch_quotas(plan: &StagePlan, batch: usize) -> Vec<(String, usize)> {
    let n = plan.mix.len();
    let batch = batch.max(n);
    let total: f64 = plan.mix.iter().map(|m| m.count as f64).sum();
    let spare = batch - n;
    let exact: Vec<f64> = plan.mix.iter().map(|m| m.count as f64 / total * spare as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = spare - quotas.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in &order {
        if left == 0 {
            break;
        }
        quotas[i] += 1;
        left -= 1;
    }
    plan.mix.iter().zip(quotas).map(|(m, q)| (m.source.clone(), q + 1)).collect()
}

/// Walks each source's pool in seeded epoch-wise permutations.
struct PoolCursor {
    size: u64,
    order: Vec<u64>,
    pos: usize,
    epoch: u64,
    seed: u64,
}

impl PoolCursor {
    fn new(size: u64, seed: u64) -> Self {
        let mut c = Self { size, order: Vec::new(), pos: 0, epoch: 0, seed };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.epoch.wrapping_mul(0x2545_f491_4f6c_dd1d));
        self.order = (0..self.size).collect();
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    fn next(&mut self) -> u64 {
        if self.pos == self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Trains `model` under `plan` for `settings.steps` SGD steps. A batch never
/// exceeds the shrunk data pool, so tiny stages run full-batch.
///
/// Only groups in the plan's trainable set are touched; every other parameter
/// keeps its exact bits.
pub fn run_stage(
    plan: &StagePlan,
    model: &mut OmniModel,
    suite: &SyntheticSuite,
    seed: u64,
    settings: &RunSettings,
) -> Result<MetricTrace> {
    plan.validate()?;
    settings.validate()?;
    let mask = freeze_mask(&model.groups(), plan)?;
    if let Some(m) = plan.mix.iter().find(|m| !suite.has_task(&m.source)) {
        return Err(Error::precondition(format!("no synthetic task registered for source '{}'", m.source)));
    }
    let lr = (plan.learning_rate * settings.lr_scale) as f32;
    let pool: u64 = plan.mix.iter().map(|m| m.shrunk).sum();
    let wanted = plan.batch_size / settings.batch_divisor;
    let quotas = batch_quotas(plan, wanted.min(usize::try_from(pool).unwrap_or(usize::MAX)));
    let batch: usize = quotas.iter().map(|(_, q)| q).sum();
    let mut cursors: Vec<PoolCursor> = plan
        .mix
        .iter()
        .enumerate()
        .map(|(i, m)| PoolCursor::new(m.shrunk, seed.wrapping_add((i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))))
        .collect();

    let mut trace = MetricTrace::default();
    for step in 0..settings.steps {
        let mut grads = ModelGrads::zeros_like(model);
        let mut losses = BTreeMap::new();
        for ((source, quota), cursor) in quotas.iter().zip(cursors.iter_mut()) {
            let mut total = 0.0;
            for _ in 0..*quota {
                let sample = suite.sample(source, cursor.next())?;
                let (loss, g) = model.loss_and_grads(&sample).map_err(|e| match e {
                    Error::Numeric(m) => {
                        Error::Numeric(format!("{m} on '{source}' at step {step} of stage {}", plan.stage))
                    }
                    other => other,
                })?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss on '{source}' at step {step} of stage {}",
                        plan.stage
                    )));
                }
                total += loss;
                grads.accumulate(&g, 1.0 / batch as f32);
            }
            losses.insert(source.clone(), total / *quota as f64);
        }

        let mut updated = BTreeSet::new();
        for ((group, param), g) in model.params_mut().into_iter().zip(&grads.0) {
            if !mask[&group] {
                continue;
            }
            let mut changed = false;
            for (p, d) in param.data_mut().iter_mut().zip(g.data()) {
                let next = *p - lr * d;
                changed |= next.to_bits() != p.to_bits();
                *p = next;
            }
            if !param.is_finite() {
                return Err(Error::Numeric(format!("parameter diverged at step {step} of stage {}", plan.stage)));
            }
            if changed {
                updated.insert(group);
            }
        }
        trace.steps.push(TraceStep { stage: plan.stage, step, losses, updated });
    }
    Ok(trace)
}

/// Mean loss per source over a held-out set.
pub fn evaluate(
    model: &OmniModel,
    suite: &SyntheticSuite,
    sources: &[&str],
    n: usize,
) -> Result<BTreeMap<String, f64>> {
    sources
        .iter()
        .map(|&s| {
            let set = suite.eval_set(s, n)?;
            let total = set.iter().map(|x| model.loss(x)).sum::<Result<f64>>()?;
            Ok((s.to_string(), total / n as f64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::model::ModelConfig;
    use crate::train::plan::build_stage_plan;

    fn setup() -> (OmniModel, SyntheticSuite) {
        let cfg = ModelConfig::default();
        (OmniModel::new(&cfg).unwrap(), SyntheticSuite::new(&cfg, 1, 0.1).unwrap())
    }

    #[test]
    fn quotas_follow_counts() {
        let plan = build_stage_plan(StageId::S3Joint, 1e-4).unwrap();
        let q = batch_quotas(&plan, 128);
        assert_eq!(q.iter().map(|(_, n)| n).sum::<usize>(), 128);
        assert!(q.iter().all(|(_, n)| *n >= 1));
        let q4 = batch_quotas(&plan, 4);
        assert!(q4.iter().all(|(_, n)| *n == 1));
        let q2 = batch_quotas(&plan, 2);
        assert_eq!(q2.iter().map(|(_, n)| n).sum::<usize>(), 4);
    }

    #[test]
    fn cursor_visits_each_item_once_per_epoch() {
        let mut c = PoolCursor::new(7, 3);
        let mut first: Vec<u64> = (0..7).map(|_| c.next()).collect();
        first.sort_unstable();
        assert_eq!(first, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (mut model, suite) = setup();
        let before = model.clone();
        let plan = build_stage_plan(StageId::S1Sft, 1e-4).unwrap();
        let settings = RunSettings { steps: 5, lr_scale: 0.0, ..RunSettings::default() };
        let trace = run_stage(&plan, &mut model, &suite, 1, &settings).unwrap();
        assert_eq!(model, before);
        assert!(trace.steps.iter().all(|s| s.updated.is_empty()));
    }

    #[test]
    fn frozen_groups_keep_their_bits_and_digest_matches() {
        let (mut model, suite) = setup();
        let before = model.clone();
        let plan = build_stage_plan(StageId::S2, 1e-4).unwrap();
        let trace =
            run_stage(&plan, &mut model, &suite, 2, &RunSettings { steps: 3, ..RunSettings::default() }).unwrap();
        for ((g, name, a), (_, _, b)) in model.params().iter().zip(before.params().iter()) {
            if plan.trainable.contains(g) {
                assert_ne!(a, b, "{name} should train");
            } else {
                assert_eq!(a, b, "{name} must stay frozen");
            }
        }
        assert!(trace.steps.iter().all(|s| s.updated == plan.trainable));
    }

    #[test]
    fn runs_are_deterministic() {
        let plan = build_stage_plan(StageId::S3Joint, 1e-4).unwrap();
        let settings = RunSettings { steps: 4, ..RunSettings::default() };
        let (mut a, suite) = setup();
        let (mut b, _) = setup();
        let ta = run_stage(&plan, &mut a, &suite, 5, &settings).unwrap();
        let tb = run_stage(&plan, &mut b, &suite, 5, &settings).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a, b);
        assert_eq!(ta.to_csv_string().unwrap(), tb.to_csv_string().unwrap());
    }

    #[test]
    fn csv_layout() {
        let (mut model, suite) = setup();
        let plan = build_stage_plan(StageId::S1Align, 1e-4).unwrap();
        let trace =
            run_stage(&plan, &mut model, &suite, 1, &RunSettings { steps: 2, ..RunSettings::default() }).unwrap();
        let csv = trace.to_csv_string().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "stage,step,task,loss");
        assert!(lines[1].starts_with("S1-align,0,image-caption,"));
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn nan_input_aborts_with_step() {
        let (mut model, suite) = setup();
        model.decoder.head.data_mut()[0] = f32::MAX;
        model.decoder.head.data_mut()[1] = -f32::MAX;
        let plan = build_stage_plan(StageId::S1Align, 1e-4).unwrap();
        let err =
            run_stage(&plan, &mut model, &suite, 1, &RunSettings { steps: 2, ..RunSettings::default() }).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("step 0")), "{err}");
    }

    #[test]
    fn unknown_source_is_a_precondition_error() {
        let (mut model, suite) = setup();
        let mut plan = build_stage_plan(StageId::S1Align, 1e-4).unwrap();
        plan.mix[0].source = "telepathy".into();
        assert!(matches!(
            run_stage(&plan, &mut model, &suite, 1, &RunSettings::default()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn connector_alignment_loss_falls_every_window() {
        let (mut model, suite) = setup();
        let plan = build_stage_plan(StageId::S1Align, 1e-4).unwrap();
        let trace = run_stage(&plan, &mut model, &suite, 7, &RunSettings::default()).unwrap();
        let series = trace.series("image-caption");
        assert_eq!(series.len(), 200);
        let windows: Vec<f64> = series.chunks(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
        eprintln!("{windows:?}");
        assert!(windows.windows(2).all(|p| p[1] < p[0]), "{windows:?}");
    }
}
