//! Training loop on the synthetic task and the four-variant ablation.
//!
//! A single seed determines the datasets, the initialization and the batch
//! order, so a run is a pure function of `(config, variant, seed)`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::backbone::{BackboneConfig, Model, Variant};
use crate::data::{batch, bce_loss, gen_synthetic, Clutter, SyntheticConfig, SyntheticSample};
use crate::error::{Error, Result};
use crate::metrics::{class_ap, ScoredPrediction};
use crate::nn::Module;
use crate::ops::Mode;
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::rng::SplitMix64;

const TRAIN_STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;
const ORDER_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: BackboneConfig,
    pub height: usize,
    pub width: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamWConfig,
    /// Initial value of every residual branch scale.
    pub residual_init: f64,
    pub clutter: Clutter,
}

impl Default for TrainConfig {
    /// 64×64 images, 512/128 samples, batch 8, 30 epochs, AdamW at 4e-4
    /// with cosine decay, tiny backbone.
    fn default() -> Self {
        Self {
            model: BackboneConfig::tiny(),
            height: 64,
            width: 64,
            train_samples: 512,
            val_samples: 128,
            batch_size: 8,
            epochs: 30,
            optimizer: AdamWConfig::default(),
            residual_init: 1.0,
            clutter: Clutter::default(),
        }
    }
}

impl TrainConfig {
    /// The setting the variant ablation is run in: one 32-channel stage
    /// (depth 1, S = 2, max kernel 7) at stride 4 after the patch embedding,
    /// with up to three streaks and three dotted chains per image and object
    /// contrast drawn from 0.1..0.7.
    pub fn ablation() -> Self {
        let mut model = BackboneConfig::tiny();
        model.stages.truncate(1);
        Self {
            model,
            clutter: Clutter {
                max_streaks: 3,
                max_chains: 3,
                noise: 0.03,
                contrast: (0.1, 0.7),
            },
            ..Self::default()
        }
    }

    pub fn data(&self) -> SyntheticConfig {
        SyntheticConfig {
            clutter: self.clutter,
            ..SyntheticConfig::new(self.height, self.width, self.model.total_stride())
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.model.validate_input(self.height, self.width)?;
        self.data().validate()?;
        if self.train_samples == 0 || self.val_samples == 0 {
            return Err(Error::config("train: sample counts must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train: batch size must be positive"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::config(format!("train: learning rate {} must be positive", o.lr)));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::config("train: betas must lie in [0, 1)"));
        }
        if o.eps.is_nan() || o.eps <= 0.0 || o.weight_decay.is_nan() || o.weight_decay < 0.0 {
            return Err(Error::config(
                "train: eps must be positive and weight decay non-negative",
            ));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_samples.div_ceil(self.batch_size)
    }
}

/// Validation metrics after `epoch` epochs (epoch 0 is the initialization).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-cell BCE on the validation set, eval mode.
    pub loss: f64,
    /// Cell-presence AP on the validation set.
    pub ap: f64,
    /// Mean training-batch loss over the epoch (NaN for epoch 0).
    pub train_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub model: Model<f32>,
}

impl TrainOutcome {
    pub fn final_ap(&self) -> f64 {
        self.history.last().map_or(0.0, |m| m.ap)
    }
}

/// Train and validation sets of `seed`.
pub fn datasets(config: &TrainConfig, seed: u64) -> Result<(Vec<SyntheticSample>, Vec<SyntheticSample>)> {
    let root = SplitMix64::new(seed);
    let data = config.data();
    Ok((
        gen_synthetic(root.fork(TRAIN_STREAM).next_u64(), config.train_samples, &data)?,
        gen_synthetic(root.fork(VAL_STREAM).next_u64(), config.val_samples, &data)?,
    ))
}

/// Validation loss and AP of `model` (eval mode, no state change).
pub fn evaluate(model: &Model<f32>, samples: &[SyntheticSample], batch_size: usize) -> Result<(f64, f64)> {
    let mut preds = Vec::new();
    let mut positives = 0usize;
    let mut loss = 0.0;
    let indices: Vec<usize> = (0..samples.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = batch::<f32>(samples, chunk)?;
        let logits = model.infer(&x)?;
        let (l, _) = bce_loss(&logits, &y)?;
        loss += l as f64 * logits.numel() as f64;
        for (&z, &t) in logits.data().iter().zip(y.data()) {
            let is_positive = t > 0.5;
            positives += is_positive as usize;
            preds.push(ScoredPrediction::new(z as f64, is_positive));
        }
    }
    let loss = loss / preds.len() as f64;
    let ap = class_ap(0, &preds, positives)?.ap;
    Ok((loss, ap))
}

/// Trains `variant` from the seed's initialization and reports validation
/// metrics at initialization and after every epoch.
pub fn train(config: &TrainConfig, variant: Variant, seed: u64) -> Result<TrainOutcome> {
    train_with(config, variant, seed, &mut |_| {})
}

/// [`train`] with a callback invoked after every evaluation.
pub fn train_with(
    config: &TrainConfig,
    variant: Variant,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    let (train_set, val_set) = datasets(config, seed)?;
    let mut model = Model::<f32>::seeded(config.model.clone().with_variant(variant), seed)?;
    model.backbone.set_residual_scales(config.residual_init as f32);
    let mut opt = AdamW::new(config.optimizer);
    let mut order_rng = SplitMix64::new(seed).fork(ORDER_STREAM);
    let total_steps = (config.epochs * config.steps_per_epoch()) as u64;

    let mut history = Vec::with_capacity(config.epochs + 1);
    let (loss, ap) = evaluate(&model, &val_set, config.batch_size)?;
    let m = EpochMetrics {
        epoch: 0,
        loss,
        ap,
        train_loss: f64::NAN,
    };
    on_epoch(&m);
    history.push(m);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        order_rng.shuffle(&mut order);
        let mut train_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (x, y) = batch::<f32>(&train_set, chunk)?;
            model.zero_grad();
            let logits = model.forward(&x, Mode::Train)?;
            let (l, grad) = bce_loss(&logits, &y)?;
            train_loss += l as f64 / config.steps_per_epoch() as f64;
            model.backward(&grad)?;
            let lr = cosine_lr(config.optimizer.lr, opt.steps(), total_steps);
            opt.step_with_lr(&mut model.params_mut(), lr)?;
        }
        let (loss, ap) = evaluate(&model, &val_set, config.batch_size)?;
        let m = EpochMetrics {
            epoch,
            loss,
            ap,
            train_loss,
        };
        on_epoch(&m);
        history.push(m);
    }
    Ok(TrainOutcome { history, model })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantResult {
    pub variant: Variant,
    /// Final AP per seed, in seed order.
    pub per_seed: Vec<f64>,
    pub mean_ap: f64,
    /// `mean_ap − mean_ap(Base)`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    /// Exactly one entry per variant, in [`Variant::ALL`] order.
    pub variants: Vec<VariantResult>,
}

impl AblationReport {
    pub fn get(&self, variant: Variant) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.variant == variant)
    }

    pub fn mean_ap(&self, variant: Variant) -> f64 {
        self.get(variant).map_or(f64::NAN, |v| v.mean_ap)
    }

    /// `Full > SA > Base`, `CA > Base` and `Full − Base ≥ margin`.
    pub fn ordering_holds(&self, margin: f64) -> bool {
        let ap = |v| self.mean_ap(v);
        let base = ap(Variant::Base);
        ap(Variant::BaseSaCa) > ap(Variant::BaseSa)
            && ap(Variant::BaseSa) > base
            && ap(Variant::BaseCa) > base
            && ap(Variant::BaseSaCa) - base >= margin
    }

    /// Builds the report from final APs indexed `[variant][seed]`.
    pub fn from_runs(seeds: &[u64], final_aps: &[(Variant, Vec<f64>)]) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::config("ablation needs at least one seed"));
        }
        let mut variants = Vec::with_capacity(Variant::ALL.len());
        for v in Variant::ALL {
            let (_, aps) = final_aps
                .iter()
                .find(|(w, _)| *w == v)
                .ok_or_else(|| Error::config(format!("ablation is missing variant {v}")))?;
            if aps.len() != seeds.len() {
                return Err(Error::config(format!(
                    "variant {v}: {} results for {} seeds",
                    aps.len(),
                    seeds.len()
                )));
            }
            let mean_ap = aps.iter().sum::<f64>() / aps.len() as f64;
            variants.push(VariantResult {
                variant: v,
                per_seed: aps.clone(),
                mean_ap,
                delta: 0.0,
            });
        }
        let base = variants[0].mean_ap;
        for v in &mut variants {
            v.delta = v.mean_ap - base;
        }
        Ok(Self {
            seeds: seeds.to_vec(),
            variants,
        })
    }
}

/// Progress hook for [`ablation_run`]: `(variant, seed, outcome)`.
pub type RunHook<'a> = dyn FnMut(Variant, u64, &TrainOutcome) + 'a;

/// Trains every variant on every seed and averages the final APs.
pub fn ablation_run(config: &TrainConfig, seeds: &[u64], on_run: &mut RunHook<'_>) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    let mut runs = Vec::new();
    for v in Variant::ALL {
        let mut aps = Vec::with_capacity(seeds.len());
        for &s in seeds {
            let out = train(config, v, s)?;
            on_run(v, s, &out);
            aps.push(out.final_ap());
        }
        runs.push((v, aps));
    }
    AblationReport::from_runs(seeds, &runs)
}

/// One-line human summary, e.g. for logs.
pub fn describe(report: &AblationReport) -> String {
    let mut s = String::new();
    for v in &report.variants {
        s.push_str(&format!("{}: {:.4} ({:+.4}) ", v.variant, v.mean_ap, v.delta));
    }
    s.trim_end().into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{PatchEmbedConfig, StageConfig};

    fn small() -> TrainConfig {
        let mut model = BackboneConfig::tiny();
        model.patch_embed = PatchEmbedConfig {
            kernel: 4,
            stride: 4,
            channels: 8,
        };
        model.stages = alloc::vec![StageConfig {
            depth: 1,
            channels: 8,
            branches: 2,
            max_size: 7,
            reduction: 4,
            downsample: false,
        }];
        TrainConfig {
            model,
            height: 16,
            width: 16,
            train_samples: 16,
            val_samples: 8,
            batch_size: 4,
            epochs: 2,
            optimizer: AdamWConfig {
                lr: 3e-3,
                ..Default::default()
            },
            residual_init: 1.0,
            clutter: Clutter::default(),
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = small();
        let a = train(&cfg, Variant::BaseSaCa, 5).unwrap();
        let b = train(&cfg, Variant::BaseSaCa, 5).unwrap();
        // train_loss of epoch 0 is NaN, so compare bit patterns
        let bits = |h: &[EpochMetrics]| -> Vec<_> {
            h.iter()
                .map(|m| (m.epoch, m.loss.to_bits(), m.ap.to_bits(), m.train_loss.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a.history), bits(&b.history));
        assert_eq!(a.history.len(), 3);
        assert_eq!(a.model.state_dict(), b.model.state_dict());
    }

    #[test]
    fn report_has_four_variants_and_base_deltas() {
        let seeds = [1, 2];
        let runs: Vec<_> = Variant::ALL
            .iter()
            .enumerate()
            .map(|(i, &v)| (v, alloc::vec![0.5 + 0.1 * i as f64, 0.5 + 0.1 * i as f64 + 0.02]))
            .collect();
        let r = AblationReport::from_runs(&seeds, &runs).unwrap();
        assert_eq!(r.variants.len(), 4);
        assert_eq!(r.get(Variant::Base).unwrap().delta, 0.0);
        let d = r.get(Variant::BaseSaCa).unwrap().delta;
        assert!((d - 0.3).abs() < 1e-12);
        assert!(AblationReport::from_runs(&[], &runs).is_err());
        assert!(AblationReport::from_runs(&seeds, &runs[..3]).is_err());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = small();
        cfg.height = 18;
        assert!(train(&cfg, Variant::Base, 0).is_err());
        let mut cfg = small();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
    }
}
