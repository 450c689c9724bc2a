//! Optimization loop, evaluation and the robustness protocol.

mod adam;
mod config;

pub use adam::{adam_step, OptimizerState, BETA1, BETA2, EPSILON};
pub use config::{Ablation, TrainConfig};

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{add_noise, downsample, split_train_test, Dataset};
use crate::diffcore::Tape;
use crate::error::{Error, Result};
use crate::eval::{e3d_with, AlignOptions, EvalReport};
use crate::losses::{forward_batch, training_objective, ObjectiveContext};
use crate::model::{column_values, save_model, BatchInput, Frame2D, Model, Prediction};
use crate::rigidity::{BankEntry, MemoryBank, MsrCache};

/// Frames per forward pass in [`evaluate`].
pub const EVAL_CHUNK: usize = 256;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_reproj: f64,
    /// `None` (JSON null) when the term is inactive this epoch.
    pub loss_contrast: Option<f64>,
    pub loss_consist: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e3d_train: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e3d_test: Option<f64>,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub bank: MemoryBank,
    pub optimizer: OptimizerState,
}

/// Optional extras of a training run.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Held-out data evaluated alongside the training set.
    pub test: Option<&'a Dataset>,
    /// Directory for `epoch-NNNN.json` and `final.json` checkpoints.
    pub checkpoint_dir: Option<&'a Path>,
    /// Receives each log record as a JSON line when the epoch ends.
    pub log: Option<&'a mut dyn Write>,
}

/// Frame order of one epoch: a shuffle seeded by `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, frames: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(16 + epoch as u64);
    let mut order: Vec<usize> = (0..frames).collect();
    order.shuffle(&mut rng);
    order
}

pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(ds, cfg, TrainHooks::default())
}

/// Adam on the alternating objective, batches of `cfg.batch` frames in a
/// fresh shuffle each epoch (the last partial batch is kept).
///
/// After every step the batch's normalized representations enter the bank.
/// The bank identifies frames by their position in `ds`.
pub fn train_with(ds: &Dataset, cfg: &TrainConfig, mut hooks: TrainHooks<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Format("cannot train on an empty dataset".into()));
    }
    if cfg.consist && ds.len() < 2 {
        log::warn!("a single training frame makes the consistency term trivial");
    }
    let arch = cfg.arch(ds.points());
    arch.validate()?;
    let mut model = Model::init(arch, cfg.seed)?;
    let mut optimizer = OptimizerState::new(&model.params.tensors);
    let mut bank = MemoryBank::new(cfg.bank)?;
    let mut cache = MsrCache::new();
    let mut objective_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    objective_rng.set_stream(1);

    let frames: Vec<Arc<Frame2D>> = ds
        .frames()
        .iter()
        .enumerate()
        .map(|(pos, f)| Arc::new(f.clone().with_index(pos)))
        .collect();
    let schedule = cfg.schedule();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let active = schedule.active(epoch);
        let order = epoch_order(cfg.seed, epoch, frames.len());
        let mut sums = [0.0; 3];
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let batch_frames: Vec<Frame2D> = chunk.iter().map(|&i| (*frames[i]).clone()).collect();
            let sets = active
                .contrast
                .then(|| cache.pair_sets(&batch_frames, &bank, &cfg.thresholds()));
            let step = (|| -> Result<_> {
                let mut tape = Tape::new();
                let net = model.bind(&mut tape);
                let batch = forward_batch(&mut tape, &net, BatchInput::new(batch_frames)?)?;
                let ctx = ObjectiveContext {
                    bank: &bank,
                    thresholds: cfg.thresholds(),
                    weights: cfg.weights(),
                    schedule,
                    random_rotation: cfg.random_rotation,
                    pair_sets: sets.as_deref(),
                };
                let parts = training_objective(&mut tape, &net, &batch, &ctx, epoch, &mut objective_rng)?;
                tape.backward(parts.total)?;
                let grads = net.grads(&tape);
                let unit = tape.value(batch.unit);
                let entries: Vec<BankEntry> = chunk
                    .iter()
                    .enumerate()
                    .map(|(l, &i)| BankEntry::new(i, column_values(unit, l), Arc::clone(&frames[i])))
                    .collect();
                let values = [
                    tape.scalar(parts.reproj),
                    parts.contrast.map_or(0.0, |v| tape.scalar(v)),
                    parts.consist.map_or(0.0, |v| tape.scalar(v)),
                ];
                Ok((grads, entries, values))
            })();
            let (grads, entries, values) = step.map_err(|e| locate(e, ds, chunk[0]))?;
            adam_step(&mut model.params.tensors, &grads, &mut optimizer, lr)?;
            bank.push(entries)?;
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v;
            }
            steps += 1;
        }
        let mean = |k: usize| sums[k] / steps as f64;
        let last = epoch + 1 == cfg.epochs;
        let evaluate_now = last || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
        let score = |d: Option<&Dataset>| -> Result<Option<f64>> {
            match d {
                Some(d) if evaluate_now && d.gt().is_some() => Ok(Some(evaluate(&model, d)?.mean)),
                _ => Ok(None),
            }
        };
        let record = EpochRecord {
            epoch,
            lr,
            loss_reproj: mean(0),
            loss_contrast: active.contrast.then(|| mean(1)),
            loss_consist: active.consist.then(|| mean(2)),
            e3d_train: score(Some(ds))?,
            e3d_test: score(hooks.test)?,
        };
        if let Some(out) = hooks.log.as_mut() {
            writeln!(out, "{}", record.to_json_line()?)?;
            out.flush()?;
        }
        log::info!(
            "epoch {epoch}: lr {lr:.3e} reproj {:.6}{}",
            record.loss_reproj,
            record.e3d_train.map(|v| format!(" e3d {v:.4}")).unwrap_or_default()
        );
        log.push(record);
        if let Some(dir) = hooks.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                save_model(&model, Some(epoch + 1), &dir.join(format!("epoch-{:04}.json", epoch + 1)))?;
            }
        }
    }
    if let Some(dir) = hooks.checkpoint_dir {
        save_model(&model, Some(cfg.epochs), &dir.join("final.json"))?;
    }
    Ok(TrainOutcome {
        model,
        log,
        bank,
        optimizer,
    })
}

/// Attaches the dataset frame index to a numerical failure.
fn locate(e: Error, ds: &Dataset, fallback: usize) -> Error {
    match e {
        Error::Training { frame, source } => Error::Training {
            frame: ds.frames().get(frame).map_or(frame, Frame2D::index),
            source,
        },
        e if e.is_numerical() => Error::Training {
            frame: ds.frames()[fallback].index(),
            source: Box::new(e),
        },
        e => e,
    }
}

/// e3D of the model's shapes against the dataset's ground truth.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<EvalReport> {
    evaluate_with(model, ds, AlignOptions::default())
}

pub fn evaluate_with(model: &Model, ds: &Dataset, opts: AlignOptions) -> Result<EvalReport> {
    let gt = ds
        .gt()
        .ok_or_else(|| Error::Format(format!("dataset {:?} has no ground truth", ds.name())))?;
    let shapes = predict_all(model, ds)?.into_iter().map(|p| p.shape).collect::<Vec<_>>();
    e3d_with(&shapes, gt, opts)
}

/// Predictions for every frame, in chunks of [`EVAL_CHUNK`].
pub fn predict_all(model: &Model, ds: &Dataset) -> Result<Vec<Prediction>> {
    if ds.points() != model.arch.points {
        return Err(Error::Incompatible(format!(
            "model expects {} points, dataset {:?} has {}",
            model.arch.points,
            ds.name(),
            ds.points()
        )));
    }
    let mut out = Vec::with_capacity(ds.len());
    for chunk in ds.frames().chunks(EVAL_CHUNK) {
        let refs: Vec<&Frame2D> = chunk.iter().collect();
        out.extend(model.predict(&refs)?);
    }
    Ok(out)
}

/// One row of the robustness table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `noise` or `keep`.
    pub setting: String,
    pub value: f64,
    pub e3d_train: f64,
    pub e3d_test: f64,
}

/// Trains once per setting and reports train and test e3D.
///
/// Noise settings perturb the whole dataset's observations (ground truth is
/// unchanged) before the split. Keep settings subsample the training part
/// only, so every row is tested on the same frames.
pub fn robustness_sweep(
    ds: &Dataset,
    cfg: &TrainConfig,
    noise_ratios: &[f64],
    keep_fractions: &[f64],
    split: f64,
) -> Result<Vec<SweepRow>> {
    if ds.gt().is_none() {
        return Err(Error::Format("robustness sweep needs ground truth".into()));
    }
    let mut rows = Vec::new();
    let mut run = |setting: &str, value: f64, train_ds: &Dataset, test_ds: &Dataset| -> Result<()> {
        let out = train(train_ds, cfg)?;
        rows.push(SweepRow {
            setting: setting.to_string(),
            value,
            e3d_train: evaluate(&out.model, train_ds)?.mean,
            e3d_test: evaluate(&out.model, test_ds)?.mean,
        });
        Ok(())
    };
    for &ratio in noise_ratios {
        let noisy = add_noise(ds, ratio, cfg.seed)?;
        let (train_ds, test_ds) = split_train_test(&noisy, split)?;
        run("noise", ratio, &train_ds, &test_ds)?;
    }
    let (train_full, test_ds) = split_train_test(ds, split)?;
    for &keep in keep_fractions {
        let train_ds = downsample(&train_full, keep)?;
        run("keep", keep, &train_ds, &test_ds)?;
    }
    Ok(rows)
}
