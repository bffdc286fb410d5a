//! Two-stage sparsity sweep: a dense pre-training stage followed by short
//! fine-tunes across a ladder of sparsity weights, plus a penalty-free
//! reference row.

use super::{evaluate, train, Dataset, TaskModel, TrainConfig, TrainError, TrainOutput};
use crate::params::ParamSet;
use crate::rng;

/// Label of the penalty-free reference row.
pub const REFERENCE_LABEL: &str = "W/O";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    /// Sparsity weights for stage two, fine-tuned in the given order.
    pub betas: Vec<f64>,
    /// Stage-two epochs as a fraction of the stage-one epoch count.
    pub stage2_epoch_frac: f64,
    /// Stage-two peak learning rate as a fraction of stage one's.
    pub stage2_lr_frac: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            betas: vec![1.0, 0.1, 0.04, 0.01, 0.001],
            stage2_epoch_frac: 0.25,
            stage2_lr_frac: 0.1,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.betas.is_empty() {
            return Err("sweep needs at least one beta".into());
        }
        for &b in &self.betas {
            if !b.is_finite() || b <= 0.0 {
                return Err("sweep betas must be finite and > 0".into());
            }
        }
        if !self.stage2_epoch_frac.is_finite()
            || self.stage2_epoch_frac <= 0.0
            || self.stage2_epoch_frac > 1.0
        {
            return Err("stage2_epoch_frac must lie in (0, 1]".into());
        }
        if !self.stage2_lr_frac.is_finite() || self.stage2_lr_frac < 0.0 {
            return Err("stage2_lr_frac must be finite and >= 0".into());
        }
        Ok(())
    }

    /// The stage-two training config for one sweep row.
    pub fn stage2_cfg(&self, stage1: &TrainConfig, row: usize, beta: f64) -> TrainConfig {
        let mut cfg = stage1.clone();
        cfg.epochs = ((stage1.epochs as f64 * self.stage2_epoch_frac).round() as usize).max(1);
        cfg.max_lr = stage1.max_lr * self.stage2_lr_frac;
        cfg.beta_sparse = beta;
        cfg.seed = rng::mix_seed(stage1.seed, 101 + row as u64);
        cfg.target_metric = None;
        cfg
    }
}

/// One sweep outcome. `beta` is `None` for the penalty-free reference row.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub label: String,
    pub beta: Option<f64>,
    pub metric: f64,
    pub gsop: f64,
    pub mean_density: f64,
}

/// A sweep row plus, for fine-tuned rows, the full training output.
#[derive(Debug)]
pub struct SweepRun {
    pub row: SweepRow,
    pub output: Option<TrainOutput>,
}

/// Renders sweep rows as CSV with shortest-round-trip floats.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("label,beta,metric,gsop,mean_density\n");
    for r in rows {
        let beta = r.beta.map(|b| b.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.label, beta, r.metric, r.gsop, r.mean_density
        ));
    }
    s
}

/// Fine-tunes the stage-one parameters once per sweep beta (short runs at a
/// reduced peak learning rate), then appends a reference row evaluating
/// stage one unchanged. Row order follows `sweep.betas`, reference last.
pub fn two_stage_sweep(
    model: &TaskModel,
    train_data: &Dataset,
    val_data: &Dataset,
    stage1_cfg: &TrainConfig,
    stage1_params: &ParamSet,
    sweep: &SweepConfig,
) -> Result<Vec<SweepRun>, TrainError> {
    sweep.validate().map_err(TrainError::Config)?;
    let mut runs = Vec::with_capacity(sweep.betas.len() + 1);
    for (i, &beta) in sweep.betas.iter().enumerate() {
        let cfg = sweep.stage2_cfg(stage1_cfg, i, beta);
        let out = train(
            model,
            train_data,
            val_data,
            &cfg,
            Some(stage1_params.clone()),
            0,
        )?;
        let last = out.rows.last().expect("at least one epoch");
        runs.push(SweepRun {
            row: SweepRow {
                label: format!("{beta}"),
                beta: Some(beta),
                metric: last.metric,
                gsop: last.gsop,
                mean_density: last.mean_density,
            },
            output: Some(out),
        });
    }
    let ev = evaluate(model, stage1_params, val_data, stage1_cfg.batch_size)?;
    runs.push(SweepRun {
        row: SweepRow {
            label: REFERENCE_LABEL.into(),
            beta: None,
            metric: ev.metric,
            gsop: ev.gsop,
            mean_density: ev.mean_density,
        },
        output: None,
    });
    Ok(runs)
}
