use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::WindowSet;
use crate::diffcore::Graph;
use crate::error::{Result, StpsError};
use crate::pipeline::config::Stage;
use crate::pipeline::model::{Batch, StpsModel};
use crate::scalar::Scalar;

/// Windows per forward pass when evaluating.
pub const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: Stage,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn batch_of<T: Scalar>(model: &StpsModel<T>, windows: &WindowSet<'_>, idx: &[usize]) -> Result<Batch<T>> {
    let samples: Vec<_> = idx.iter().map(|&i| windows.get(i)).collect();
    Batch::from_samples(&samples, &model.normalizer)
}

fn check_windows<T: Scalar>(model: &StpsModel<T>, windows: &WindowSet<'_>) -> Result<()> {
    let c = &model.config;
    if windows.l() != c.l || windows.l_prime() != c.l_prime || windows.partition() != &model.partition {
        return Err(StpsError::invalid(format!(
            "windows (l = {}, l' = {}) do not match the model (l = {}, l' = {}) or its partition",
            windows.l(),
            windows.l_prime(),
            c.l,
            c.l_prime
        )));
    }
    Ok(())
}

fn check_order<T: Scalar>(model: &StpsModel<T>, stage: Stage) -> Result<()> {
    let plan = model.config.stages();
    let pos = plan.iter().position(|&s| s == stage).ok_or_else(|| {
        StpsError::invalid(format!("{stage} is not part of the {} variant", model.config.ablation))
    })?;
    if let Some(missing) = plan[..pos].iter().find(|s| !model.trained.contains(s)) {
        return Err(StpsError::invalid(format!("{missing} must be trained before {stage}")));
    }
    Ok(())
}

/// One AdamW step on a batch; returns the batch loss.
pub fn train_step<T: Scalar>(model: &mut StpsModel<T>, batch: &Batch<T>, stage: Stage) -> Result<f64> {
    let seed: u64 = model.rng.gen();
    let mut g = Graph::training(ChaCha8Rng::seed_from_u64(seed));
    let (_, loss) = model.stage_loss(&mut g, batch, stage, model.config.dropout, model.config.teacher_forcing)?;
    let value = g.value(loss).data()[0].to_f64_lossy();
    if !value.is_finite() {
        return Err(StpsError::NonFinite(format!("{stage}: batch loss {value}")));
    }
    g.backward(loss)?;
    model.store.accumulate_grads(&g)?;
    let names: Vec<&str> = g
        .bound_params()
        .filter(|&(_, id)| g.grad(id).is_some())
        .map(|(name, _)| name)
        .collect();
    model.config.optimizer().step(&mut model.store, names)?;
    Ok(value)
}

/// Mean absolute error of `stage` (raw units) over all windows.
pub fn evaluate_stage<T: Scalar>(model: &StpsModel<T>, stage: Stage, windows: &WindowSet<'_>) -> Result<f64> {
    check_windows(model, windows)?;
    if windows.is_empty() {
        return Err(StpsError::TooShort("no windows to evaluate".into()));
    }
    let idx: Vec<usize> = (0..windows.len()).collect();
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch = batch_of(model, windows, chunk)?;
        let pred = model.predict_stage(&batch, stage)?;
        let truth = model.stage_target(&batch, stage);
        for (p, t) in pred.data().iter().zip(truth.data()) {
            total += (p.to_f64_lossy() - t.to_f64_lossy()).abs();
        }
        count += truth.len();
    }
    Ok(total / count as f64)
}

/// Minibatch training of one stage with early stopping on validation MAE
/// (training MAE when `val` is empty). The best epoch's parameters are kept.
pub fn train_stage<T: Scalar>(
    model: &mut StpsModel<T>,
    stage: Stage,
    train: &WindowSet<'_>,
    val: &WindowSet<'_>,
) -> Result<StageLog> {
    check_order(model, stage)?;
    check_windows(model, train)?;
    if train.is_empty() {
        return Err(StpsError::TooShort("training split has no windows".into()));
    }
    let use_val = !val.is_empty();
    if use_val {
        check_windows(model, val)?;
    }
    let cfg = model.config.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = StageLog {
        stage,
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best: Option<(f64, crate::diffcore::ParameterStore<T>)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs_per_stage {
        order.shuffle(&mut model.rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for (k, chunk) in order.chunks(cfg.batch).enumerate() {
            let batch = batch_of(model, train, chunk)?;
            let loss = train_step(model, &batch, stage)
                .map_err(|e| match e {
                    StpsError::NonFinite(msg) => StpsError::NonFinite(format!("{msg} (epoch {epoch}, batch {k})")),
                    other => other,
                })?;
            sum += loss * chunk.len() as f64;
            count += chunk.len();
        }
        let train_mae = sum / count as f64;
        let val_mae = if use_val {
            Some(evaluate_stage(model, stage, val)?)
        } else {
            None
        };
        log::info!(
            "{stage} epoch {epoch}: train MAE {train_mae:.4}{}",
            val_mae.map(|v| format!(", val MAE {v:.4}")).unwrap_or_default()
        );
        log.epochs.push(EpochLog { epoch, train_mae, val_mae });
        let monitored = val_mae.unwrap_or(train_mae);
        if !monitored.is_finite() {
            return Err(StpsError::NonFinite(format!("{stage} epoch {epoch}: monitored MAE {monitored}")));
        }
        if best.as_ref().map_or(true, |(b, _)| monitored < *b) {
            best = Some((monitored, model.store.clone()));
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, snapshot)) = best {
        model.store.copy_values_from(&snapshot);
    }
    model.mark_trained(stage);
    Ok(log)
}

/// Trains every stage of the configured plan in order.
pub fn train_all<T: Scalar>(model: &mut StpsModel<T>, train: &WindowSet<'_>, val: &WindowSet<'_>) -> Result<Vec<StageLog>> {
    let mut logs = Vec::new();
    for &stage in model.config.stages() {
        logs.push(train_stage(model, stage, train, val)?);
    }
    Ok(logs)
}

/// `steps` AdamW steps of `stage` on one fixed batch; returns the loss
/// before each step.
pub fn train_stage_fixed<T: Scalar>(model: &mut StpsModel<T>, stage: Stage, batch: &Batch<T>, steps: usize) -> Result<Vec<f64>> {
    check_order(model, stage)?;
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        losses.push(train_step(model, batch, stage)?);
    }
    model.mark_trained(stage);
    Ok(losses)
}

/// Truth and forecast (raw units) of the final stage, each laid out as
/// `[windows, m′, l′]`.
pub fn predict_windows<T: Scalar>(model: &StpsModel<T>, windows: &WindowSet<'_>) -> Result<(Vec<f64>, Vec<f64>)> {
    check_windows(model, windows)?;
    let idx: Vec<usize> = (0..windows.len()).collect();
    let (mut truth, mut pred) = (Vec::new(), Vec::new());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch = batch_of(model, windows, chunk)?;
        pred.extend(model.predict(&batch)?.to_f64_vec());
        truth.extend(batch.x_mp_tp.to_f64_vec());
    }
    Ok((truth, pred))
}
