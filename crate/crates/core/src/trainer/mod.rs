//! Prototype fine-tuning: per-image Adam steps on a softmax cross-entropy
//! over cosine logits, with grid-level augmentations and optional negative
//! crops that must be classified as background.

pub mod adam;
pub mod augment;
pub mod loss;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::argmax;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::pooling::{check_dim, pool_box_embedding};
use crate::prototypes::{sample_free_boxes, CropSizeRange};
use crate::types::{PrototypeSet, Provenance, DEFAULT_TEMPERATURE};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use augment::{augment_feature_grid, Augmentations};
pub use loss::{assign_negative_target, backward, forward_loss, loss_and_gradient, PrototypeParams, TrainBatchItem};

/// How negative crops pick their background target row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundTargetMode {
    /// Nearest background prototype under the parameters at the start of each epoch.
    #[default]
    Dynamic,
    /// Nearest background prototype under the initial parameters.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub temperature: f64,
    pub negatives_per_image: usize,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    pub augmentations: Augmentations,
    pub background_target_mode: BackgroundTargetMode,
    /// Keep background rows fixed; they still appear in the softmax.
    pub freeze_background: bool,
    pub use_masks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 2e-4,
            lr_drop_epochs: vec![10, 100],
            lr_drop_factor: 0.1,
            temperature: DEFAULT_TEMPERATURE,
            negatives_per_image: 0,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            augmentations: Augmentations::ALL,
            background_target_mode: BackgroundTargetMode::Dynamic,
            freeze_background: false,
            use_masks: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return bad(format!("lr_drop_factor must be positive, got {}", self.lr_drop_factor));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("adam betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if !self.adam_eps.is_finite() || self.adam_eps <= 0.0 {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        Ok(())
    }

    /// Learning rate for the zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_drop_factor.powi(drops as i32)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// One-based.
    pub epoch: usize,
    /// Mean cross-entropy over every item seen this epoch, before each step.
    pub loss: f64,
    /// Fraction of items whose argmax hit their target (any background row
    /// counts for a negative).
    pub acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutput {
    pub prototypes: PrototypeSet,
    pub log: Vec<EpochLog>,
}

struct ImageItems {
    positives: Vec<(Vec<f64>, usize)>,
    negatives: Vec<Vec<f64>>,
}

fn image_rng(seed: u64, epoch: usize, image: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | image as u64);
    rng
}

fn order_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - epoch as u64);
    rng
}

fn prepare_image(
    ds: &Dataset,
    index: usize,
    epoch: usize,
    config: &TrainConfig,
    sizes: &CropSizeRange,
) -> Result<ImageItems> {
    let entry = &ds.manifest.entries[index];
    let mut rng = image_rng(config.seed, epoch, index);
    let (fm, anns) = augment_feature_grid(&ds.maps[index], &entry.annotations, &config.augmentations, &mut rng);
    let positives = anns
        .iter()
        .map(|a| {
            let mask = if config.use_masks { a.mask.as_ref() } else { None };
            Ok((pool_box_embedding(&fm, &a.bbox, mask)?.embedding, a.class_id))
        })
        .collect::<Result<Vec<_>>>()?;
    let negatives = if config.negatives_per_image > 0 {
        let obstacles: Vec<_> = anns.iter().map(|a| a.bbox).collect();
        sample_free_boxes(
            &mut rng,
            fm.image_w(),
            fm.image_h(),
            &obstacles,
            sizes,
            config.negatives_per_image,
        )
        .iter()
        .map(|b| Ok(pool_box_embedding(&fm, b, None)?.embedding))
        .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    Ok(ImageItems { positives, negatives })
}

/// Fine-tunes every prototype row of `init` on the annotated boxes of `ds`.
///
/// Each epoch visits the images in a seeded random order and takes one Adam
/// step per image on the mean loss of that image's items. Images whose
/// boxes were all cropped away and that drew no negatives are skipped.
pub fn finetune(ds: &Dataset, init: &PrototypeSet, config: &TrainConfig) -> Result<FinetuneOutput> {
    config.validate()?;
    if ds.is_empty() {
        return Err(Error::Invalid("cannot fine-tune on an empty manifest".into()));
    }
    if let Some(d) = ds.dim() {
        check_dim(init.dim(), d)?;
    }
    let table = init.class_table().clone();
    if table.object_classes != ds.manifest.class_table.object_classes {
        return Err(Error::Config(
            "prototype class table does not match the manifest's object classes".into(),
        ));
    }
    let num_objects = table.num_objects();
    if config.negatives_per_image > 0 && table.num_background() == 0 {
        return Err(Error::Config(
            "negatives requested but the prototype set has no background rows".into(),
        ));
    }
    let sizes = CropSizeRange::from_dataset(ds);
    let initial = PrototypeParams::from_set(init);
    let mut params = initial.clone();
    let mut state = AdamState::new(params.data.len());
    let adam_cfg = config.adam();
    let bg_offset = num_objects * params.dim;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let target_params = match config.background_target_mode {
            BackgroundTargetMode::Dynamic => params.clone(),
            BackgroundTargetMode::Frozen => initial.clone(),
        };
        let batches = (0..ds.len())
            .into_par_iter()
            .map(|i| {
                let items = prepare_image(ds, i, epoch, config, &sizes)?;
                let mut batch: Vec<TrainBatchItem> = items
                    .positives
                    .into_iter()
                    .map(|(embedding, class_id)| TrainBatchItem {
                        embedding,
                        target_row: class_id,
                        is_negative: false,
                    })
                    .collect();
                for embedding in items.negatives {
                    let bg = assign_negative_target(&embedding, &target_params, num_objects)?;
                    batch.push(TrainBatchItem {
                        embedding,
                        target_row: num_objects + bg,
                        is_negative: true,
                    });
                }
                Ok(batch)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut order_rng(config.seed, epoch));

        let (mut loss_sum, mut hits, mut count) = (0.0f64, 0usize, 0usize);
        for i in order {
            let batch = &batches[i];
            if batch.is_empty() {
                continue;
            }
            let (fwd, mut grad) = loss_and_gradient(batch, &params, config.temperature)?;
            loss_sum += fwd.loss * batch.len() as f64;
            count += batch.len();
            for (item, z) in batch.iter().zip(&fwd.logits) {
                let best = argmax(z);
                let hit = if item.is_negative {
                    best >= num_objects
                } else {
                    best == item.target_row
                };
                hits += usize::from(hit);
            }
            if config.freeze_background {
                grad[bg_offset..].iter_mut().for_each(|g| *g = 0.0);
            }
            adam_step(&mut params.data, &grad, &mut state, lr, &adam_cfg);
        }
        if count == 0 {
            return Err(Error::Invalid(format!(
                "epoch {}: no training items (every box was cropped away and no negatives were drawn)",
                epoch + 1
            )));
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            loss: loss_sum / count as f64,
            acc: hits as f64 / count as f64,
            lr,
        };
        log::debug!(
            "epoch {} loss {:.6} acc {:.4} lr {:e}",
            entry.epoch,
            entry.loss,
            entry.acc,
            entry.lr
        );
        log.push(entry);
    }

    let prototypes = PrototypeSet::from_rows(table, &params.to_rows(), config.temperature, Provenance::Finetuned)?;
    Ok(FinetuneOutput { prototypes, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                epochs: 0,
                ..Default::default()
            },
            TrainConfig {
                lr: 0.0,
                ..Default::default()
            },
            TrainConfig {
                temperature: -1.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn lr_schedule_drops_at_milestones() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 2e-4);
        assert_eq!(c.lr_at(9), 2e-4);
        assert!((c.lr_at(10) - 2e-5).abs() < 1e-18);
        assert!((c.lr_at(99) - 2e-5).abs() < 1e-18);
        assert!((c.lr_at(100) - 2e-6).abs() < 1e-19);
    }

    #[test]
    fn config_json_uses_defaults_for_missing_fields() {
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 5, "seed": 9}"#).unwrap();
        assert_eq!(c.epochs, 5);
        assert_eq!(c.seed, 9);
        assert_eq!(c.lr, 2e-4);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 5}"#).is_err());
    }
}
