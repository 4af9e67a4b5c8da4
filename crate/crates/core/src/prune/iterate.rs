use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{prune_step, sparsity, PruneMasks};
use crate::data::FoldPlan;
use crate::error::{Error, Result};
use crate::model::ResidualNet;
use crate::train::{summarize, train_one, Confusion, CvOutcome, EpochLog, Example, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSchedule {
    pub fraction: f64,
    pub num_steps: usize,
    pub fine_tune: TrainConfig,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        Self {
            fraction: 0.2,
            num_steps: 13,
            fine_tune: TrainConfig::default(),
        }
    }
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction < 1.0) {
            return Err(Error::Config(format!("fraction {} outside (0, 1)", self.fraction)));
        }
        self.fine_tune.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("fine_tune.{m}")),
            other => other,
        })
    }
}

/// One fold's model at some pruning step.
#[derive(Clone, Debug)]
pub struct FoldModel {
    pub fold: usize,
    pub net: ResidualNet<f32>,
    pub masks: PruneMasks,
    pub val_acc: f64,
    pub confusion: Confusion,
}

impl FoldModel {
    pub fn from_cv(cv: &CvOutcome) -> Vec<FoldModel> {
        cv.folds
            .iter()
            .map(|f| FoldModel {
                fold: f.result.fold,
                masks: PruneMasks::all_active(&f.net),
                net: f.net.clone(),
                val_acc: f.result.best_val_acc,
                confusion: f.result.confusion,
            })
            .collect()
    }
}

/// Accuracy across folds and sparsity after `step` steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub fold_accs: Vec<f64>,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub best_acc: f64,
    pub best_fold: usize,
    pub overall_sparsity: f64,
    pub per_layer_sparsity: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

impl StepReport {
    /// Accuracy and sparsity are averaged over folds; with equal layer rates
    /// every fold has the same sparsity.
    pub fn of(step: usize, models: &[FoldModel], warnings: Vec<String>) -> Self {
        let accs: Vec<f64> = models.iter().map(|m| m.val_acc).collect();
        let (mean_acc, std_acc, best) = summarize(&accs);
        let n = models.len().max(1) as f64;
        let mut overall = 0.0;
        let mut per_layer: BTreeMap<String, f64> = BTreeMap::new();
        for m in models {
            let s = sparsity(&m.net);
            overall += s.overall / n;
            for (k, v) in s.per_layer {
                *per_layer.entry(k).or_default() += v / n;
            }
        }
        Self {
            step,
            best_acc: accs.get(best).copied().unwrap_or(0.0),
            best_fold: models.get(best).map_or(0, |m| m.fold),
            fold_accs: accs,
            mean_acc,
            std_acc,
            overall_sparsity: overall,
            per_layer_sparsity: per_layer,
            warnings,
        }
    }
}

/// Prune and fine-tune every fold model for `schedule.num_steps` steps past
/// `start_step`. `on_step` sees each step's report, models and fine-tune
/// logs (empty at the starting step).
pub fn iterate<F>(
    mut models: Vec<FoldModel>,
    start_step: usize,
    examples: &[Example],
    plan: &FoldPlan,
    schedule: &PruneSchedule,
    mut on_step: F,
) -> Result<Vec<StepReport>>
where
    F: FnMut(&StepReport, &[FoldModel], &[Vec<EpochLog>]) -> Result<()>,
{
    schedule.validate()?;
    let first = StepReport::of(start_step, &models, Vec::new());
    on_step(&first, &models, &[])?;
    let mut reports = vec![first];
    for step in start_step + 1..=start_step + schedule.num_steps {
        let mut warnings = Vec::new();
        let mut logs = Vec::with_capacity(models.len());
        for m in models.iter_mut() {
            let out = prune_step(&mut m.net, &m.masks, schedule.fraction)?;
            warnings.extend(out.warnings.into_iter().map(|w| format!("fold {}: {w}", m.fold)));
            let train: Vec<&Example> = plan.train_indices(m.fold).into_iter().map(|i| &examples[i]).collect();
            let val: Vec<&Example> = plan.val_indices(m.fold).into_iter().map(|i| &examples[i]).collect();
            let cfg = TrainConfig {
                seed: schedule
                    .fine_tune
                    .seed
                    .wrapping_add(m.fold as u64)
                    .wrapping_add(1000 * step as u64),
                ..schedule.fine_tune.clone()
            };
            let tuned = train_one(&m.net, &train, &val, &cfg, Some(&out.masks), m.fold)?;
            debug_assert!(out.masks.is_monotone_after(&m.masks));
            m.net = tuned.net;
            m.masks = out.masks;
            m.val_acc = tuned.result.best_val_acc;
            m.confusion = tuned.result.confusion;
            logs.push(tuned.log);
        }
        let report = StepReport::of(step, &models, warnings);
        log::info!(
            "step {step}: mean acc {:.4} best {:.4} sparsity {:.4}",
            report.mean_acc,
            report.best_acc,
            report.overall_sparsity
        );
        on_step(&report, &models, &logs)?;
        reports.push(report);
    }
    Ok(reports)
}
