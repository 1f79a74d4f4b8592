use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::stages::{
    assemble_final_dataset, collect_model_feedback, refine_with, sample_programs, select_tasks, tallies_of,
    PipelineContext, RefineVariant,
};
use super::state::{RunState, Stage, Store};
use super::PipelineError;
use crate::backend::{submit_finetune, wait_for_job, JobStatus, SweepDomain};
use crate::metrics::{aggregate, PassReport};
use crate::model::TaskId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub k: usize,
    pub annotated: usize,
    pub dataset_size: usize,
    pub refine_report: PassReport,
    pub report: PassReport,
}

/// Model-feedback runs on nested subsamples of `k` zero-correct training
/// tasks, each fine-tuned and evaluated on the test split. `base` must have
/// completed sampling.
pub fn run_scaling_experiment(
    ctx: &PipelineContext,
    base: &RunState,
    k_values: &[usize],
) -> Result<BTreeMap<usize, ScalingPoint>, PipelineError> {
    if !base.is_complete(Stage::Sample) {
        return Err(PipelineError::StageOrder {
            stage: Stage::CollectFeedback,
            needs: Stage::Sample,
        });
    }
    let splits = base
        .splits
        .as_ref()
        .ok_or_else(|| PipelineError::State("splits not assigned".into()))?;
    let train: Vec<TaskId> = splits.train_ids.iter().copied().collect();
    let test: Vec<TaskId> = splits.test_ids.iter().copied().collect();
    if test.is_empty() {
        return Err(PipelineError::State("test split is empty".into()));
    }
    let config = &ctx.config;
    let refiner = ctx.registry.model(&config.backends.refiner)?;
    let trainer = ctx.registry.trainer(&config.backends.trainer)?;
    let store = Store::memory();
    let strict = SweepDomain::default();

    let mut out = BTreeMap::new();
    for &k in k_values {
        let selected = select_tasks(&train, k, base.seeds.selection)?;
        let (annotations, _) = collect_model_feedback(ctx, base, &selected)?;
        let (refined, _) = refine_with(ctx, refiner.as_ref(), &annotations, RefineVariant::Matched, base.seeds.sampling)?;
        let refine_report = aggregate(&refined.tally_list(), &config.ks)?;
        let examples = assemble_final_dataset(&refined, &ctx.rendered, base.seeds.selection)?;
        let job = submit_finetune(
            trainer.as_ref(),
            &format!("scaling-k{k}"),
            &examples,
            &config.hyperparams,
            config.strict_sweep.then_some(&strict),
        )?;
        let job = wait_for_job(
            trainer.as_ref(),
            &job,
            Duration::from_millis(config.trainer_poll_interval_ms),
            Duration::from_secs(config.trainer_timeout_secs),
        )?;
        let backend_ref = match (job.status, &job.resulting_backend_ref) {
            (JobStatus::Succeeded, Some(b)) => b.clone(),
            _ => {
                return Err(PipelineError::TrainingFailed {
                    job: job.id,
                    diagnostics: job.diagnostics.unwrap_or_default(),
                })
            }
        };
        let tuned = ctx.registry.model(&backend_ref)?;
        let samples = sample_programs(ctx, &store, tuned.as_ref(), &test, base.seeds.sampling, "e")?;
        let report = aggregate(&tallies_of(&samples), &config.ks)?;
        tracing::info!(k, examples = examples.len(), pass1 = ?report.pass_at_k.get(&1), "scaling point");
        out.insert(
            k,
            ScalingPoint {
                k,
                annotated: annotations.len(),
                dataset_size: examples.len(),
                refine_report,
                report,
            },
        );
    }
    Ok(out)
}
