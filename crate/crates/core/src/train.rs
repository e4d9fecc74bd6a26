//! Training loop and single-slice reconstruction.

use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{denormalize_slice, load_dataset, normalize_slice, DatasetSpec, Slice, Split};
use crate::error::{Error, Result};
use crate::kspace::{generate_mask, undersample, ComplexImage, MaskParams, SamplingMask};
use crate::metrics::psnr;
use crate::model::checkpoint::{CascadeCheckpoint, TrainingMeta};
use crate::model::{CascadeConfig, CascadeModel, Problem};
use crate::phase::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    #[default]
    AdaptiveMoment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicy {
    /// One mask (seeded by the mask parameters) for every sample.
    Fixed,
    /// Sample `i` gets a mask seeded from `(seed, i)`.
    #[default]
    PerSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset: DatasetSpec,
    pub mask: MaskParams,
    pub cascade: CascadeConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub mask_policy: MaskPolicy,
}

impl TrainConfig {
    pub fn new(dataset: DatasetSpec, cascade: CascadeConfig) -> Self {
        Self {
            dataset,
            mask: MaskParams::default(),
            cascade,
            epochs: 10,
            batch_size: 4,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::AdaptiveMoment,
            seed: 0,
            checkpoint_dir: None,
            mask_policy: MaskPolicy::PerSample,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        // lr = 0 is accepted so a run can be replayed without moving.
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        self.cascade.validate()?;
        self.dataset.validate()
    }
}

/// Mask seed for sample `index` of a split.
pub fn sample_mask_seed(seed: u64, split: Split, index: usize) -> u64 {
    derive_seed(seed, &format!("mask/{}/{index}", split.as_str()))
}

pub fn mask_for_sample(
    params: &MaskParams,
    policy: MaskPolicy,
    seed: u64,
    split: Split,
    index: usize,
    shape: (usize, usize),
) -> Result<SamplingMask> {
    let p = match policy {
        MaskPolicy::Fixed => *params,
        MaskPolicy::PerSample => params.with_seed(sample_mask_seed(seed, split, index)),
    };
    generate_mask(shape.0, shape.1, &p)
}

/// A ground-truth slice together with its simulated acquisition.
pub struct PreparedSample {
    pub id: String,
    pub gt: ComplexImage,
    pub problem: Problem,
    pub zero_filled: ComplexImage,
}

pub fn prepare(slice: &Slice, mask: &SamplingMask) -> Result<PreparedSample> {
    let (gt, _) = normalize_slice(&slice.image)?;
    let (k, zf) = undersample(&gt, mask)?;
    Ok(PreparedSample {
        id: slice.id.clone(),
        problem: Problem::new(&zf, &k, mask)?,
        gt,
        zero_filled: zf,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    #[serde(with = "crate::eval::inf_as_string")]
    pub psnr: f64,
}

enum Optimizer {
    Sgd {
        lr: f32,
        momentum: f32,
        velocity: Vec<f32>,
    },
    Adam {
        lr: f32,
        beta1: f32,
        beta2: f32,
        eps: f32,
        m: Vec<f32>,
        v: Vec<f32>,
        t: i32,
    },
}

impl Optimizer {
    fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        match kind {
            OptimizerKind::SgdMomentum => Optimizer::Sgd {
                lr: lr as f32,
                momentum: 0.9,
                velocity: vec![0.0; n],
            },
            OptimizerKind::AdaptiveMoment => Optimizer::Adam {
                lr: lr as f32,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            },
        }
    }

    fn step(&mut self, params: &mut [f32], grad: &[f32]) {
        match self {
            Optimizer::Sgd {
                lr,
                momentum,
                velocity,
            } => {
                for ((p, g), u) in params.iter_mut().zip(grad).zip(velocity.iter_mut()) {
                    *u = *momentum * *u + g;
                    *p -= *lr * *u;
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                m,
                v,
                t,
            } => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for i in 0..params.len() {
                    let g = grad[i];
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * g;
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * g * g;
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    params[i] -= *lr * mh / (vh.sqrt() + *eps);
                }
            }
        }
    }
}

/// Mean loss and mean magnitude PSNR of `model` over prepared samples.
pub fn evaluate_samples(model: &CascadeModel, samples: &[PreparedSample]) -> Result<(f64, f64)> {
    use rayon::prelude::*;
    let per: Vec<(f64, f64)> = samples
        .par_iter()
        .map(|s| {
            let out = model.forward_problem(&s.problem)?;
            let l = crate::model::loss(&out, &s.gt)?;
            let p = psnr(&s.gt.magnitude_image(), &out.magnitude_image())?;
            Ok((l, p))
        })
        .collect::<Result<_>>()?;
    let n = per.len().max(1) as f64;
    Ok((
        per.iter().map(|v| v.0).sum::<f64>() / n,
        per.iter().map(|v| v.1).sum::<f64>() / n,
    ))
}

pub struct TrainOutcome {
    pub final_checkpoint: CascadeCheckpoint,
    pub best_checkpoint: CascadeCheckpoint,
    pub log: Vec<LogRecord>,
}

fn load_split(config: &TrainConfig, split: Split) -> Result<Vec<PreparedSample>> {
    let spec = config.dataset.with_split(split);
    let slices = match load_dataset(&spec) {
        Ok((s, _)) => s,
        Err(Error::EmptyDataset(_)) if split == Split::Val => return Ok(Vec::new()),
        Err(Error::Io { .. }) if split == Split::Val => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    slices
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mask = mask_for_sample(
                &config.mask,
                config.mask_policy,
                config.seed,
                split,
                i,
                s.image.shape(),
            )?;
            prepare(s, &mask)
        })
        .collect()
}

fn write_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut f =
        std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    for r in log {
        writeln!(f, "{}", serde_json::to_string(r)?)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(())
}

/// Trains a cascade on the train split of `config.dataset`, validating on
/// its val split when present. Single-threaded runs are bit-reproducible;
/// with a thread pool the per-sample gradients are still reduced in order.
pub fn train_with_log(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let train = load_split(config, Split::Train)?;
    if train.is_empty() {
        return Err(Error::EmptyDataset(config.dataset.id.clone()));
    }
    let val = load_split(config, Split::Val)?;
    let shape = train[0].gt.shape();

    let mut model = CascadeModel::init(config.cascade, config.seed)?;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, model.parameter_count());
    let mut log = Vec::new();

    let meta = |epoch: usize, final_loss: f64, best_val_psnr: Option<f64>| TrainingMeta {
        dataset_id: config.dataset.id.clone(),
        epochs: config.epochs,
        epoch,
        seed: config.seed,
        final_loss: Some(final_loss),
        best_val_psnr,
        image_shape: Some([shape.0, shape.1]),
    };

    let (train_loss0, train_psnr0) = evaluate_samples(&model, &train)?;
    log.push(LogRecord {
        epoch: 0,
        split: "train".into(),
        loss: train_loss0,
        psnr: train_psnr0,
    });
    let mut best: Option<(f64, CascadeCheckpoint)> = None;
    if !val.is_empty() {
        let (l, p) = evaluate_samples(&model, &val)?;
        log.push(LogRecord {
            epoch: 0,
            split: "val".into(),
            loss: l,
            psnr: p,
        });
        best = Some((
            p,
            CascadeCheckpoint::from_model(&model, meta(0, train_loss0, Some(p))),
        ));
    }

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut last_loss = train_loss0;
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<(&Problem, &ComplexImage)> =
                chunk.iter().map(|&i| (&train[i].problem, &train[i].gt)).collect();
            let (loss, grad) = model.batch_loss_and_gradient(&batch).map_err(|e| match e {
                Error::Divergence { .. } => Error::TrainingDiverged {
                    epoch,
                    step,
                    loss: f64::NAN,
                },
                other => other,
            })?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged { epoch, step, loss });
            }
            optimizer.step(model.parameters_mut(), &grad);
            epoch_loss += loss * chunk.len() as f64;
        }
        last_loss = epoch_loss / train.len() as f64;
        let train_psnr = evaluate_samples(&model, &train)?.1;
        log.push(LogRecord {
            epoch,
            split: "train".into(),
            loss: last_loss,
            psnr: train_psnr,
        });
        info!("epoch {epoch}: train loss {last_loss:.6}");

        if !val.is_empty() {
            let (l, p) = evaluate_samples(&model, &val)?;
            log.push(LogRecord {
                epoch,
                split: "val".into(),
                loss: l,
                psnr: p,
            });
            info!("epoch {epoch}: val loss {l:.6} psnr {p:.3}");
            if best.as_ref().is_none_or(|(bp, _)| p > *bp) {
                best = Some((
                    p,
                    CascadeCheckpoint::from_model(&model, meta(epoch, last_loss, Some(p))),
                ));
            }
        }
    }

    let best_psnr = best.as_ref().map(|(p, _)| *p);
    let final_checkpoint = CascadeCheckpoint::from_model(&model, meta(config.epochs, last_loss, best_psnr));
    let best_checkpoint = best.map(|(_, c)| c).unwrap_or_else(|| final_checkpoint.clone());

    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        final_checkpoint.save(&dir.join("final.ckpt"))?;
        best_checkpoint.save(&dir.join("best.ckpt"))?;
        write_log(&dir.join("train_log.jsonl"), &log)?;
    }

    Ok(TrainOutcome {
        final_checkpoint,
        best_checkpoint,
        log,
    })
}

pub fn train(config: &TrainConfig) -> Result<CascadeCheckpoint> {
    Ok(train_with_log(config)?.final_checkpoint)
}

/// Normalise, undersample, run the cascade and undo the normalisation.
pub fn reconstruct(
    checkpoint: &CascadeCheckpoint,
    slice: &ComplexImage,
    mask: &SamplingMask,
) -> Result<ComplexImage> {
    if let Some([h, w]) = checkpoint.training_meta.image_shape {
        if slice.shape() != (h, w) {
            return Err(Error::Shape {
                expected: (h, w),
                actual: slice.shape(),
            });
        }
    }
    let model = checkpoint.model()?;
    let (gt, scale) = normalize_slice(slice)?;
    let (k, zf) = undersample(&gt, mask)?;
    let out = model.forward(&zf, &k, mask)?;
    Ok(denormalize_slice(&out, scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PhantomFamily;

    fn tiny_config(epochs: usize, lr: f64) -> TrainConfig {
        let mut dataset = DatasetSpec::phantom("E", PhantomFamily::Ellipses, 6, 3, [32, 32]);
        dataset.split_fractions = [4.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0];
        TrainConfig {
            epochs,
            learning_rate: lr,
            batch_size: 2,
            ..TrainConfig::new(
                dataset,
                CascadeConfig {
                    n_cascades: 1,
                    n_conv_per_block: 2,
                    n_filters: 4,
                    ..CascadeConfig::default()
                },
            )
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let config = tiny_config(1, 0.0);
        let out = train_with_log(&config).unwrap();
        let init = CascadeModel::init(config.cascade, config.seed).unwrap();
        assert_eq!(out.final_checkpoint.parameters, init.parameters());
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let a = train(&tiny_config(2, 1e-3)).unwrap();
        let b = train(&tiny_config(2, 1e-3)).unwrap();
        assert_eq!(a.parameter_blob(), b.parameter_blob());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(train(&TrainConfig {
            epochs: 0,
            ..tiny_config(1, 1e-3)
        })
        .is_err());
        assert!(train(&TrainConfig {
            batch_size: 0,
            ..tiny_config(1, 1e-3)
        })
        .is_err());
        assert!(train(&TrainConfig {
            learning_rate: -1.0,
            ..tiny_config(1, 1e-3)
        })
        .is_err());
    }

    #[test]
    fn mask_policies() {
        let p = MaskParams::default();
        let a = mask_for_sample(&p, MaskPolicy::Fixed, 1, Split::Train, 0, (32, 32)).unwrap();
        let b = mask_for_sample(&p, MaskPolicy::Fixed, 1, Split::Train, 5, (32, 32)).unwrap();
        assert_eq!(a, b);
        let c = mask_for_sample(&p, MaskPolicy::PerSample, 1, Split::Train, 0, (64, 64)).unwrap();
        let d = mask_for_sample(&p, MaskPolicy::PerSample, 1, Split::Train, 1, (64, 64)).unwrap();
        assert_ne!(c, d);
        let c2 = mask_for_sample(&p, MaskPolicy::PerSample, 1, Split::Train, 0, (64, 64)).unwrap();
        assert_eq!(c, c2);
    }

    #[test]
    fn reconstruct_with_full_mask_is_identity() {
        let ckpt = train(&tiny_config(1, 1e-3)).unwrap();
        let slice = crate::data::phantom_slice(&tiny_config(1, 0.0).dataset, 5).unwrap();
        let scaled = slice.image.scaled(2.5);
        let out = reconstruct(&ckpt, &scaled, &SamplingMask::full(32, 32)).unwrap();
        assert!(out.sub(&scaled).unwrap().max_abs() < 1e-4);
    }

    #[test]
    fn reconstruct_rejects_other_shapes() {
        let ckpt = train(&tiny_config(1, 0.0)).unwrap();
        let img = ComplexImage::from_real(48, 48, vec![0.5; 48 * 48]).unwrap();
        let err = reconstruct(&ckpt, &img, &SamplingMask::full(48, 48)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }
}
