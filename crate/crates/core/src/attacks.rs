//! Adversarial participant behaviours.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::{BackdoorPattern, Dataset, PatternSpec};
use crate::error::{Error, Result};
use crate::models::{BatchTransform, FlatModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    None,
    LabelFlip,
    GaussianNoise,
    BackdoorNaive,
    BackdoorReplacement,
    ModelMixing,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::LabelFlip => "label_flip",
            AttackKind::GaussianNoise => "gaussian_noise",
            AttackKind::BackdoorNaive => "backdoor_naive",
            AttackKind::BackdoorReplacement => "backdoor_replacement",
            AttackKind::ModelMixing => "model_mixing",
        }
    }

    pub fn is_backdoor(self) -> bool {
        matches!(self, AttackKind::BackdoorNaive | AttackKind::BackdoorReplacement)
    }
}

fn default_scale() -> f64 {
    100.0
}
fn default_attack_round() -> usize {
    6
}
fn default_extra_epochs() -> usize {
    5
}
fn default_poison() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    #[serde(default)]
    pub kind: AttackKind,
    pub src_label: Option<usize>,
    pub dst_label: Option<usize>,
    pub noise_std: Option<f64>,
    pub pattern: Option<PatternSpec>,
    pub target_label: Option<usize>,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default = "default_attack_round")]
    pub attack_round: usize,
    #[serde(default = "default_extra_epochs")]
    pub extra_epochs: usize,
    pub attacker_lr: Option<f64>,
    #[serde(default = "default_poison")]
    pub poison_per_batch: usize,
    pub mix_rate: Option<f64>,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            src_label: None,
            dst_label: None,
            noise_std: None,
            pattern: None,
            target_label: None,
            scale: default_scale(),
            attack_round: default_attack_round(),
            extra_epochs: default_extra_epochs(),
            attacker_lr: None,
            poison_per_batch: default_poison(),
            mix_rate: None,
        }
    }
}

fn require<T: Copy>(value: Option<T>, name: &str, kind: AttackKind) -> Result<T> {
    value.ok_or_else(|| Error::Config(format!("attack {} requires `{name}`", kind.name())))
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        let kind = self.kind;
        match kind {
            AttackKind::None => {}
            AttackKind::LabelFlip | AttackKind::ModelMixing => {
                let (src, dst) = (require(self.src_label, "src_label", kind)?, require(self.dst_label, "dst_label", kind)?);
                if src == dst {
                    return Err(Error::Config("src_label and dst_label must differ".into()));
                }
                if kind == AttackKind::ModelMixing {
                    let rate = require(self.mix_rate, "mix_rate", kind)?;
                    if !(0.0..=1.0).contains(&rate) {
                        return Err(Error::Config(format!("mix_rate must lie in [0, 1], got {rate}")));
                    }
                }
            }
            AttackKind::GaussianNoise => {
                let std = require(self.noise_std, "noise_std", kind)?;
                if !(std >= 0.0 && std.is_finite()) {
                    return Err(Error::Config(format!("noise_std must be non-negative, got {std}")));
                }
            }
            AttackKind::BackdoorNaive | AttackKind::BackdoorReplacement => {
                require(self.target_label, "target_label", kind)?;
                if self.pattern.is_none() {
                    return Err(Error::Config(format!("attack {} requires `pattern`", kind.name())));
                }
                if kind == AttackKind::BackdoorReplacement && (self.attack_round == 0 || !self.scale.is_finite()) {
                    return Err(Error::Config("attack_round must be ≥ 1 and scale finite".into()));
                }
            }
        }
        if let Some(lr) = self.attacker_lr {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("attacker_lr must be non-negative, got {lr}")));
            }
        }
        Ok(())
    }

    /// The backdoor pattern used for poisoning and ASR evaluation, if any.
    pub fn backdoor_pattern(&self) -> Result<Option<BackdoorPattern>> {
        match (&self.pattern, self.target_label) {
            (Some(spec), Some(target)) => spec.build(target).map(Some),
            _ => Ok(None),
        }
    }
}

/// Relabels every `src` sample as `dst`.
pub fn flip_labels(ds: &Dataset, src: usize, dst: usize) -> Result<Dataset> {
    if src == dst {
        return Err(Error::invalid("flip source and destination must differ"));
    }
    if src >= ds.classes() || dst >= ds.classes() {
        return Err(Error::invalid(format!(
            "labels {src} and {dst} must be below {}",
            ds.classes()
        )));
    }
    let labels = ds.labels().iter().map(|&l| if l == src { dst } else { l }).collect();
    ds.with_labels(labels)
}

/// Multiplies every parameter by its own factor drawn from N(1, std²).
pub fn gaussian_noise<R: Rng + ?Sized>(m: &FlatModel, std: f64, rng: &mut R) -> Result<FlatModel> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::invalid(format!("noise std must be non-negative, got {std}")));
    }
    let mut out = m.clone();
    if std == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(1.0, std).map_err(|e| Error::invalid(e.to_string()))?;
    for p in out.params_mut() {
        *p *= normal.sample(rng);
    }
    Ok(out)
}

/// Embeds a pattern into the first `per_batch` samples of every training
/// batch and relabels them with the pattern's target. Batches arrive
/// shuffled, so the poisoned samples change from batch to batch.
#[derive(Debug, Clone)]
pub struct BackdoorPoisoner {
    pattern: BackdoorPattern,
    per_batch: usize,
}

impl BackdoorPoisoner {
    pub fn new(pattern: BackdoorPattern, per_batch: usize, batch_size: usize) -> Result<Self> {
        if per_batch > batch_size {
            return Err(Error::invalid(format!(
                "cannot poison {per_batch} samples of a {batch_size}-sample batch"
            )));
        }
        Ok(Self { pattern, per_batch })
    }

    pub fn pattern(&self) -> &BackdoorPattern {
        &self.pattern
    }
}

impl BatchTransform for BackdoorPoisoner {
    fn apply(&self, features: &mut [f64], labels: &mut [usize], dim: usize) {
        let n = self.per_batch.min(labels.len());
        for (row, label) in features.chunks_mut(dim).zip(labels.iter_mut()).take(n) {
            for &(i, v) in self.pattern.entries() {
                row[i] = v;
            }
            *label = self.pattern.target_label();
        }
    }
}

pub fn poison_batches(
    pattern: &BackdoorPattern,
    poison_per_batch: usize,
    batch_size: usize,
    dim: usize,
) -> Result<BackdoorPoisoner> {
    pattern.check(dim)?;
    BackdoorPoisoner::new(pattern.clone(), poison_per_batch, batch_size)
}

/// `global + scale * (local - global)`.
pub fn replacement_scale(local: &FlatModel, global: &FlatModel, scale: f64) -> Result<FlatModel> {
    local.same_shape(global)?;
    let params = local
        .params()
        .iter()
        .zip(global.params())
        .map(|(&l, &g)| scale * l + (1.0 - scale) * g)
        .collect();
    local.with_params(params)
}

/// Takes each parameter from `adversarial` with probability `mix_rate`.
pub fn mix_models<R: Rng + ?Sized>(
    honest: &FlatModel,
    adversarial: &FlatModel,
    mix_rate: f64,
    rng: &mut R,
) -> Result<FlatModel> {
    honest.same_shape(adversarial)?;
    if !(0.0..=1.0).contains(&mix_rate) {
        return Err(Error::invalid(format!("mix_rate must lie in [0, 1], got {mix_rate}")));
    }
    let params = honest
        .params()
        .iter()
        .zip(adversarial.params())
        .map(|(&h, &a)| if rng.random::<f64>() < mix_rate { a } else { h })
        .collect();
    honest.with_params(params)
}
