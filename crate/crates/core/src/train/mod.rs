//! Losses, optimizers and the patch-based training loop.

mod loss;
mod optim;

pub use loss::{cross_entropy_loss, soft_dice_loss, DICE_EPSILON};
pub use optim::{optimizer_step, OptimizerConfig, OptimizerState};

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::dice;
use crate::phantom::DceStudy;
use crate::pipeline::{build_triplets, load_split, normalize_study, sample_patch, Manifest, Split};
use crate::tensor::{Tape, Tensor};
use crate::unet::{build_model, predict_mask, save_checkpoint, ArchitectureConfig, InferenceConfig, ModelParams};
use crate::{Error, Result};

pub const BEST_CHECKPOINT: &str = "best.fseg";
pub const LAST_CHECKPOINT: &str = "last.fseg";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    /// defaults to 0.01 for SGD and 1e-3 for AdamW
    pub learning_rate: Option<f32>,
    /// defaults to 0 for SGD and 1e-2 for AdamW
    pub weight_decay: Option<f32>,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub patch_size: [usize; 3],
    pub fg_probability: f32,
    pub seed: u64,
    /// (dice, cross-entropy)
    pub loss_weights: (f32, f32),
    /// sliding-window settings for validation
    pub inference: InferenceConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::sgd(),
            learning_rate: None,
            weight_decay: None,
            epochs: 30,
            batches_per_epoch: 20,
            batch_size: 2,
            patch_size: [32; 3],
            fg_probability: 0.33,
            seed: 0,
            loss_weights: (1.0, 1.0),
            inference: InferenceConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn lr(&self) -> f32 {
        self.learning_rate.unwrap_or(match self.optimizer {
            OptimizerConfig::SgdNesterov { .. } => 0.01,
            OptimizerConfig::AdamW { .. } => 1e-3,
        })
    }

    pub fn wd(&self) -> f32 {
        self.weight_decay.unwrap_or(match self.optimizer {
            OptimizerConfig::SgdNesterov { .. } => 0.0,
            OptimizerConfig::AdamW { .. } => 1e-2,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batches_per_epoch == 0 || self.batch_size == 0 {
            return bad("epochs, batches_per_epoch and batch_size must be at least 1".into());
        }
        if !(self.lr() > 0.0) || !(self.wd() >= 0.0) {
            return bad(format!("learning rate {} must be > 0 and weight decay {} >= 0", self.lr(), self.wd()));
        }
        let (d, c) = self.loss_weights;
        if !(d >= 0.0 && c >= 0.0) || d + c == 0.0 {
            return bad(format!("loss weights {:?} must be >= 0 and not both 0", self.loss_weights));
        }
        if !(0.0..=1.0).contains(&self.fg_probability) {
            return bad(format!("fg_probability {} outside [0, 1]", self.fg_probability));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub val_dice: f64,
    pub lr: f32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_dice,lr\n");
        for r in &self.epochs {
            writeln!(out, "{},{:.6},{:.6},{:.6e}", r.epoch, r.train_loss, r.val_dice, r.lr).unwrap();
        }
        out
    }
}

pub struct TrainOutcome {
    pub best: ModelParams,
    pub best_epoch: usize,
    pub last: ModelParams,
    pub history: TrainingHistory,
}

/// Mean Dice of `predict_mask` against each study's truth.
pub fn validation_dice(model: &ModelParams, studies: &[DceStudy], cfg: &InferenceConfig) -> Result<f64> {
    let scores = studies
        .par_iter()
        .map(|s| {
            let truth = s
                .truth()
                .ok_or_else(|| Error::Data(format!("{}: validation needs a truth mask", s.case_id)))?;
            dice(&predict_mask(model, s, cfg)?, &truth)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Train from raw (unnormalized) studies. `progress` sees every finished epoch.
pub fn train(
    train_set: &[DceStudy],
    val_set: &[DceStudy],
    arch: &ArchitectureConfig,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data(format!(
            "need nonempty train and val splits, got {} / {}",
            train_set.len(),
            val_set.len()
        )));
    }
    let mut model = build_model(arch)?;
    model.check_input(&[cfg.batch_size, arch.in_channels, cfg.patch_size[0], cfg.patch_size[1], cfg.patch_size[2]])?;
    let studies = train_set.par_iter().map(normalize_study).collect::<Result<Vec<_>>>()?;
    let triplets = studies.iter().map(build_triplets).collect::<Result<Vec<_>>>()?;

    let sizes: Vec<usize> = model.params().iter().map(|p| p.tensor.numel()).collect();
    let mut state = OptimizerState::new(&cfg.optimizer, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (dice_w, ce_w) = cfg.loss_weights;
    let patch_vox: usize = cfg.patch_size.iter().product();
    let mut history = TrainingHistory::default();
    let mut best = (f64::NEG_INFINITY, 0, model.clone());

    for epoch in 0..cfg.epochs {
        let lr = cfg.optimizer.learning_rate(cfg.lr(), epoch, cfg.epochs);
        let mut loss_sum = 0.0f64;
        for batch in 0..cfg.batches_per_epoch {
            let mut input = Vec::with_capacity(cfg.batch_size * 3 * patch_vox);
            let mut labels = Vec::with_capacity(cfg.batch_size * patch_vox);
            let mut times = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let case = rng.random_range(0..studies.len());
                let triplet = &triplets[case][rng.random_range(0..triplets[case].len())];
                let sample = sample_patch(&studies[case], triplet, cfg.patch_size, cfg.fg_probability, &mut rng)?;
                input.extend_from_slice(sample.channels.data());
                labels.extend_from_slice(&sample.label);
                times.push(sample.times);
            }
            let [d, h, w] = cfg.patch_size;
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let x = tape.constant(Tensor::new([cfg.batch_size, 3, d, h, w], input)?);
            let logits = model.forward_on_tape(&mut tape, &vars, x, &times)?;
            let mut terms = Vec::new();
            if dice_w > 0.0 {
                let probs = tape.softmax_channel(logits)?;
                let l = soft_dice_loss(&mut tape, probs, &labels)?;
                terms.push(tape.scale(l, dice_w));
            }
            if ce_w > 0.0 {
                let l = cross_entropy_loss(&mut tape, logits, &labels)?;
                terms.push(tape.scale(l, ce_w));
            }
            let loss = match terms[..] {
                [a, b] => tape.add(a, b)?,
                [a] => a,
                _ => unreachable!("validated loss weights"),
            };
            let value = tape.value(loss).item().expect("scalar loss");
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch, value });
            }
            loss_sum += value as f64;
            tape.backward(loss)?;
            let grads: Vec<Vec<f32>> = vars
                .iter()
                .zip(&sizes)
                .map(|(&v, &n)| tape.take_grad(v).unwrap_or_else(|| vec![0.0; n]))
                .collect();
            drop(tape);
            let mut params: Vec<&mut [f32]> = model.params_mut().iter_mut().map(|p| p.tensor.data_mut()).collect();
            optimizer_step(&mut params, &grads, &mut state, &cfg.optimizer, lr, cfg.wd())?;
        }
        let val_dice = validation_dice(&model, val_set, &cfg.inference)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: (loss_sum / cfg.batches_per_epoch as f64) as f32,
            val_dice,
            lr,
        };
        if val_dice > best.0 {
            best = (val_dice, epoch + 1, model.clone());
        }
        history.epochs.push(record);
        progress(&record);
    }
    Ok(TrainOutcome {
        best: best.2,
        best_epoch: best.1,
        last: model,
        history,
    })
}

/// Train on a generated dataset directory and write checkpoints plus history to `out_dir`.
pub fn train_from_manifest(
    data_dir: &Path,
    manifest: &Manifest,
    arch: &ArchitectureConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let train_set = load_split(data_dir, manifest, Split::Train)?;
    let val_set = load_split(data_dir, manifest, Split::Val)?;
    let outcome = train(&train_set, &val_set, arch, cfg, progress)?;
    fs::create_dir_all(out_dir)?;
    save_checkpoint(&out_dir.join(BEST_CHECKPOINT), &outcome.best, outcome.best_epoch)?;
    save_checkpoint(&out_dir.join(LAST_CHECKPOINT), &outcome.last, cfg.epochs)?;
    fs::write(out_dir.join(HISTORY_FILE), outcome.history.to_csv())?;
    Ok(outcome)
}
