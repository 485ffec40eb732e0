//! Training loop, split evaluation and history output.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, ParameterStore, Tensor};
use crate::config::{derive_seed, TrainConfig};
use crate::error::{Error, Result};
use crate::head::{evaluate, MetricsReport};
use crate::model::{register, Dataset, Model};
use crate::transform::HOURS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse: f64,
    pub val_mae: f64,
    pub val_smape: f64,
    pub val_pcc: f64,
}

/// Attention weights per hour after one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSnapshot {
    pub epoch: usize,
    pub hours: Vec<(usize, Vec<f64>)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best validation RMSE.
    pub best: ParameterStore,
    pub best_epoch: usize,
    pub best_step: u64,
    pub steps: u64,
    pub history: Vec<EpochRecord>,
    pub attention: Vec<AttentionSnapshot>,
}

pub fn attention_table(model: &Model<'_>, store: &ParameterStore) -> Result<Vec<(usize, Vec<f64>)>> {
    (0..HOURS).map(|h| Ok((h, model.attention(store, h)?))).collect()
}

/// Predictions and observations for the given target frames.
pub fn predict_frames(model: &Model<'_>, store: &ParameterStore, targets: &[usize]) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let mut yhat = Vec::with_capacity(targets.len());
    let mut y = Vec::with_capacity(targets.len());
    for &t in targets {
        yhat.push(model.predict(store, t)?);
        y.push(model.data.frames[t].clone());
    }
    Ok((yhat, y))
}

pub fn evaluate_targets(model: &Model<'_>, store: &ParameterStore, targets: &[usize]) -> Result<MetricsReport> {
    let (yhat, y) = predict_frames(model, store, targets)?;
    evaluate(&yhat, &y)
}

/// Trains from a fresh initialization; `on_epoch` sees each record as it is produced.
pub fn train(cfg: &TrainConfig, data: &Dataset, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.frames.len() < cfg.window + 1 {
        return Err(Error::invalid(format!(
            "{} frames cannot fill a window of {} plus a target",
            data.frames.len(),
            cfg.window
        )));
    }
    let train_targets = data.targets(data.split.train_range(), cfg.window);
    let val_targets = data.targets(data.split.val_range(), cfg.window);
    if train_targets.is_empty() {
        return Err(Error::invalid("training split holds no target with a full window"));
    }
    if val_targets.is_empty() {
        return Err(Error::invalid("validation split holds no target with a full window"));
    }

    let mut store = register(cfg, data, derive_seed(cfg.seed, "init"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "negative_sampling"));
    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let model = Model::new(cfg, data);

    let mut best = store.clone();
    let mut best_rmse = f64::INFINITY;
    let (mut best_epoch, mut best_step, mut steps) = (0, 0, 0u64);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut attention = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for batch in train_targets.chunks(cfg.batch) {
            for &t in batch {
                let f = model.forward(&store, t, Some(&mut rng))?;
                total += f.tape.value(f.loss).item();
                let grads = f.tape.backward(f.loss, &store)?;
                store.accumulate(&grads)?;
            }
            let grads = store.take_grads(1.0 / batch.len() as f64);
            adam_step(&mut store, &grads, &adam)?;
            steps += 1;
        }
        let val = evaluate_targets(&model, &store, &val_targets)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / train_targets.len() as f64,
            val_rmse: val.rmse,
            val_mae: val.mae,
            val_smape: val.smape,
            val_pcc: val.pcc,
        };
        log::info!("epoch {epoch}: train loss {:.6}, val rmse {:.4}", record.train_loss, record.val_rmse);
        on_epoch(&record);
        if val.rmse < best_rmse {
            best_rmse = val.rmse;
            best = store.clone();
            best_epoch = epoch;
            best_step = steps;
        }
        attention.push(AttentionSnapshot { epoch, hours: attention_table(&model, &store)? });
        history.push(record);
    }
    Ok(TrainOutcome { best, best_epoch, best_step, steps, history, attention })
}

pub fn write_history_csv<W: Write>(mut w: W, history: &[EpochRecord]) -> std::io::Result<()> {
    writeln!(w, "epoch,train_loss,val_rmse,val_mae,val_smape,val_pcc")?;
    for r in history {
        writeln!(w, "{},{},{},{},{},{}", r.epoch, r.train_loss, r.val_rmse, r.val_mae, r.val_smape, r.val_pcc)?;
    }
    Ok(())
}

pub fn write_attention_history_csv<W: Write>(mut w: W, snapshots: &[AttentionSnapshot], vocab: &[String]) -> std::io::Result<()> {
    writeln!(w, "epoch,hour,attribute_id,attribute_name,weight")?;
    for s in snapshots {
        for (hour, weights) in &s.hours {
            for (k, a) in weights.iter().enumerate() {
                let name = vocab.get(k).map_or("", String::as_str);
                writeln!(w, "{},{hour},{k},{name},{a}", s.epoch)?;
            }
        }
    }
    Ok(())
}
