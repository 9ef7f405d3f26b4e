//! Class-specialised feature extractors.
//!
//! A base model is a backbone trained with a binary head on an unbalanced
//! subset (predominant class vs. others), restored to its lowest-validation-
//! loss epoch, frozen, and separated from its head. Its feature vector φ is
//! the per-channel spatial mean of the last feature map.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{
    attach_binary_head, Backbone, BackboneConfig, BackboneError, BinaryClassifier, BinaryHead,
    FeatureExtractor,
};
use crate::data::{self, BinaryLabel, ClassLabel, DataError, Manifest};
use crate::eval::{self, ConfusionMatrix, EvalError, MetricsReport, Mode};
use crate::nn::{self, NnError, ParamSet, Tape, Tensor, Var};
use crate::train::{self, Dataset, TrainConfig, TrainError, Trainable, TrainingLog};

#[derive(Debug, Error)]
pub enum BaseModelError {
    #[error("{0} set has no records of the {1:?} binary class")]
    MissingOtherClass(&'static str, BinaryLabel),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    DivergedLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("base model is not finalized (parameters still trainable)")]
    NotFinalized,
    #[error("expected a (3,{h},{w}) image, got {got:?}")]
    BadImage { h: usize, w: usize, got: Vec<usize> },
    #[error("bundle metadata: {0}")]
    Bundle(String),
    #[error(transparent)]
    Train(TrainError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("metadata: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<TrainError> for BaseModelError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::DivergedLoss { epoch, batch, loss } => {
                Self::DivergedLoss { epoch, batch, loss }
            }
            other => Self::Train(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseModelConfig {
    pub backbone: BackboneConfig,
    pub optim: TrainConfig,
    /// Seed of the binary head initialisation.
    pub head_seed: u64,
}

impl Default for BaseModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            optim: TrainConfig {
                epochs: 12,
                batch_size: 16,
                learning_rate: 0.2,
                seed: 0,
            },
            head_seed: 1,
        }
    }
}

impl<B: FeatureExtractor> Trainable for BinaryClassifier<B> {
    fn param_sets(&self) -> Vec<&ParamSet> {
        vec![self.backbone.params(), self.head.params()]
    }

    fn param_sets_mut(&mut self) -> Vec<&mut ParamSet> {
        vec![self.backbone.params_mut(), self.head.params_mut()]
    }

    fn logits(&self, tape: &mut Tape, bound: &[Vec<Var>], batch: Var) -> Result<Var, NnError> {
        self.forward(tape, &bound[0], &bound[1], batch)
    }
}

/// A finalized base model. The detached binary head is kept, frozen, only
/// so the model can still be scored on its own binary task; φ never uses it.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel<B = Backbone> {
    pub backbone: B,
    pub predominant: ClassLabel,
    pub feature_dim: usize,
    pub training_log: TrainingLog,
    pub selected_epoch: usize,
    pub detached_head: BinaryHead,
    pub seed: u64,
}

fn binary_targets(m: &Manifest, predominant: ClassLabel) -> Vec<usize> {
    m.iter()
        .map(|r| {
            r.binary
                .unwrap_or_else(|| BinaryLabel::against(r.label, predominant))
                .index()
        })
        .collect()
}

fn require_both(targets: &[usize], set: &'static str) -> Result<(), BaseModelError> {
    for label in [BinaryLabel::Others, BinaryLabel::Predominant] {
        if !targets.contains(&label.index()) {
            return Err(BaseModelError::MissingOtherClass(set, label));
        }
    }
    Ok(())
}

/// Trains on pre-loaded images. `subset_images` and `val_images` follow the
/// record order of their manifests.
pub fn train_base_model_on(
    subset: &Manifest,
    subset_images: &[Tensor],
    val: &Manifest,
    val_images: &[Tensor],
    predominant: ClassLabel,
    config: &BaseModelConfig,
) -> Result<BaseModel, BaseModelError> {
    let train_t = binary_targets(subset, predominant);
    let val_t = binary_targets(val, predominant);
    require_both(&train_t, "training")?;
    require_both(&val_t, "validation")?;

    let backbone = Backbone::build(config.backbone.clone())?;
    let mut clf = attach_binary_head(backbone, config.head_seed);
    let log = train::fit(
        &mut clf,
        Dataset::new(subset_images, &train_t),
        Dataset::new(val_images, &val_t),
        &[1.0, 1.0],
        &config.optim,
    )?;
    clf.freeze();
    let (backbone, head) = clf.strip();
    Ok(BaseModel {
        feature_dim: backbone.feature_channels(),
        backbone,
        predominant,
        selected_epoch: log.selected_epoch,
        training_log: log,
        detached_head: head,
        seed: config.backbone.seed,
    })
}

/// Loads the images behind `subset` and `val` and trains a base model for
/// `predominant` with unweighted cross-entropy.
pub fn train_base_model(
    subset: &Manifest,
    val: &Manifest,
    predominant: ClassLabel,
    config: &BaseModelConfig,
) -> Result<BaseModel, BaseModelError> {
    let size = config.backbone.input_size;
    let xs = data::load_tensors(subset, size)?;
    let xv = data::load_tensors(val, size)?;
    train_base_model_on(subset, &xs, val, &xv, predominant, config)
}

impl<B: FeatureExtractor> BaseModel<B> {
    pub fn is_finalized(&self) -> bool {
        self.backbone.is_frozen()
    }

    pub fn digest(&self) -> String {
        self.backbone.params().digest()
    }

    /// Binary logits of the backbone with its detached head re-attached.
    pub fn binary_logits(&self, images: &[Tensor]) -> Result<Vec<[f64; 2]>, BaseModelError> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let mut tape = Tape::inference();
            let bb = self.backbone.params().bind(&mut tape);
            let hb = self.detached_head.params().bind(&mut tape);
            let x = tape.input(Tensor::stack(chunk)?);
            let f = self.backbone.forward(&mut tape, &bb, x)?;
            let z = self.detached_head.forward(&mut tape, &hb, f)?;
            out.extend(tape.value(z).data().chunks(2).map(|c| [c[0], c[1]]));
        }
        Ok(out)
    }
}

/// φ for a batch of (3,H,W) images, each a vector of length `feature_dim`.
pub fn extract_phi_batch<B: FeatureExtractor>(
    bm: &BaseModel<B>,
    images: &[Tensor],
) -> Result<Vec<Tensor>, BaseModelError> {
    if !bm.is_finalized() {
        return Err(BaseModelError::NotFinalized);
    }
    let (h, w) = bm.backbone.input_size();
    if let Some(bad) = images.iter().find(|t| t.shape() != [3, h, w]) {
        return Err(BaseModelError::BadImage {
            h,
            w,
            got: bad.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let mut tape = Tape::inference();
        let bound = bm.backbone.params().bind(&mut tape);
        let x = tape.input(Tensor::stack(chunk)?);
        let f = bm.backbone.forward(&mut tape, &bound, x)?;
        let pooled = tape.global_avg_pool(f, 2)?;
        out.extend(tape.value(pooled).unstack());
    }
    Ok(out)
}

/// φ of one (3,H,W) image.
pub fn extract_phi<B: FeatureExtractor>(
    bm: &BaseModel<B>,
    image: &Tensor,
) -> Result<Tensor, BaseModelError> {
    Ok(extract_phi_batch(bm, std::slice::from_ref(image))?.remove(0))
}

/// Binary metrics on `test` with the predominant class positive.
pub fn evaluate_base_model<B: FeatureExtractor>(
    bm: &BaseModel<B>,
    test: &Manifest,
) -> Result<MetricsReport, BaseModelError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet.into());
    }
    let images = data::load_tensors(test, bm.backbone.input_size())?;
    evaluate_base_model_on(bm, test, &images)
}

pub fn evaluate_base_model_on<B: FeatureExtractor>(
    bm: &BaseModel<B>,
    test: &Manifest,
    images: &[Tensor],
) -> Result<MetricsReport, BaseModelError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet.into());
    }
    let truth = binary_targets(test, bm.predominant);
    let preds: Vec<usize> = bm
        .binary_logits(images)?
        .iter()
        .map(|z| usize::from(z[1] > z[0]))
        .collect();
    let cm = ConfusionMatrix::from_indices(2, &truth, &preds)?;
    Ok(eval::metrics_from_confusion(&cm, Mode::Binary)?
        .labeled(format!("base_{}", bm.predominant.as_str())))
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    predominant: ClassLabel,
    feature_dim: usize,
    selected_epoch: usize,
    training_log: TrainingLog,
    seed: u64,
}

impl BaseModel<Backbone> {
    /// Writes the bundle: backbone checkpoint and sidecar, `head.dfx` and
    /// `meta.json`.
    pub fn save(&self, dir: &Path) -> Result<(), BaseModelError> {
        self.backbone.save(dir)?;
        nn::save_checkpoint(self.detached_head.params(), &dir.join("head.dfx"))?;
        let meta = Meta {
            predominant: self.predominant,
            feature_dim: self.feature_dim,
            selected_epoch: self.selected_epoch,
            training_log: self.training_log.clone(),
            seed: self.seed,
        };
        fs::write(
            dir.join("meta.json"),
            serde_json::to_string_pretty(&meta)? + "\n",
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, BaseModelError> {
        let backbone = Backbone::load(dir)?;
        let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        let head_params = nn::load_checkpoint(&dir.join("head.dfx"))?;
        let mut head = BinaryHead::zeros(backbone.feature_channels());
        if head_params.len() != head.params().len()
            || head_params
                .iter()
                .zip(head.params().iter())
                .any(|(a, b)| a.name != b.name || a.tensor.shape() != b.tensor.shape())
        {
            return Err(BaseModelError::Bundle(
                "head checkpoint does not fit".into(),
            ));
        }
        *head.params_mut() = head_params;
        if meta.feature_dim != backbone.feature_channels() {
            return Err(BaseModelError::Bundle(format!(
                "feature_dim {} but backbone has {} channels",
                meta.feature_dim,
                backbone.feature_channels()
            )));
        }
        Ok(Self {
            backbone,
            predominant: meta.predominant,
            feature_dim: meta.feature_dim,
            training_log: meta.training_log,
            selected_epoch: meta.selected_epoch,
            detached_head: head,
            seed: meta.seed,
        })
    }
}
