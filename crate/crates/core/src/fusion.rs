//! The complete detector: the three frozen φ vectors stacked as a
//! (3, L) sequence (channel order DM, GAN, REAL) and classified by a
//! five-layer 1D-convolutional head.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{Backbone, FeatureExtractor};
use crate::basemodel::{extract_phi_batch, BaseModel, BaseModelError};
use crate::data::{self, ClassLabel, DataError, Manifest};
use crate::nn::{
    self, softmax_rows, ClassWeights, NnError, ParamSet, Parameter, Tape, Tensor, Var,
};
use crate::train::{self, Dataset, TrainConfig, TrainError, Trainable, TrainingLog};

pub const HEAD_KERNELS: [usize; 5] = [7, 5, 3, 3, 3];
pub const HEAD_PADDING: usize = 1;
pub const HEAD_STRIDE: usize = 1;
/// Order of the three base models along the head's input channels.
pub const BASE_ORDER: [ClassLabel; 3] = [ClassLabel::Dm, ClassLabel::Gan, ClassLabel::Real];

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("feature lengths differ: {0:?}")]
    LengthMismatch(Vec<usize>),
    #[error("sequence length {0} is shorter than the first kernel (7)")]
    InputTooShort(usize),
    #[error("base model for {0} has trainable parameters")]
    NotFrozenBase(ClassLabel),
    #[error("base model in the {expected} slot is specialised for {got}")]
    BaseOrder {
        expected: ClassLabel,
        got: ClassLabel,
    },
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    DivergedLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("bad head config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Train(TrainError),
    #[error(transparent)]
    Base(#[from] BaseModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("metadata: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<TrainError> for FusionError {
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
pub struct HeadConfig {
    /// Output channels of the five convolutions.
    pub channel_widths: Vec<usize>,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            channel_widths: vec![16, 32, 64, 64, 64],
            seed: 0,
        }
    }
}

impl HeadConfig {
    fn validate(&self) -> Result<(), FusionError> {
        if self.channel_widths.len() != HEAD_KERNELS.len() || self.channel_widths.contains(&0) {
            return Err(FusionError::BadConfig(format!(
                "need 5 positive channel widths, got {:?}",
                self.channel_widths
            )));
        }
        Ok(())
    }
}

/// Sequence length after the convolution stack.
pub fn pre_gap_length(l: usize) -> Result<usize, FusionError> {
    let mut len = l;
    for k in HEAD_KERNELS {
        len = nn::conv_output_len(len, k, HEAD_PADDING, HEAD_STRIDE)
            .ok_or(FusionError::InputTooShort(l))?;
    }
    Ok(len)
}

/// Five conv1d → ReLU blocks, global average pooling, linear → 3 logits
/// in (REAL, GAN, DM) order.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    config: HeadConfig,
    params: ParamSet,
}

impl FusionHead {
    pub fn build(config: HeadConfig) -> Result<Self, FusionError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let mut c_in = 3;
        for (i, (&c_out, k)) in config.channel_widths.iter().zip(HEAD_KERNELS).enumerate() {
            params.push(Parameter::kaiming_uniform(
                &format!("conv{i}.weight"),
                &[c_out, c_in, k],
                c_in * k,
                &mut rng,
            ));
            params.push(Parameter::zeros(&format!("conv{i}.bias"), &[c_out]));
            c_in = c_out;
        }
        params.push(Parameter::kaiming_uniform(
            "fc.weight",
            &[3, c_in],
            c_in,
            &mut rng,
        ));
        params.push(Parameter::zeros("fc.bias", &[3]));
        Ok(Self { config, params })
    }

    pub fn from_parts(config: HeadConfig, params: ParamSet) -> Result<Self, FusionError> {
        let template = Self::build(config.clone())?;
        let fits = template.params.len() == params.len()
            && template
                .params
                .iter()
                .zip(params.iter())
                .all(|(a, b)| a.name == b.name && a.tensor.shape() == b.tensor.shape());
        if !fits {
            return Err(FusionError::BadConfig(
                "checkpoint does not match head architecture".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Records (N,3,L) → (N,3).
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var, NnError> {
        let mut h = x;
        for (pair, _) in bound[..10].chunks(2).zip(HEAD_KERNELS) {
            let c = tape.conv1d(h, pair[0], pair[1], HEAD_PADDING, HEAD_STRIDE)?;
            h = tape.relu(c);
        }
        let pooled = tape.global_avg_pool(h, 2)?;
        tape.linear(pooled, bound[10], bound[11])
    }
}

impl Trainable for FusionHead {
    fn param_sets(&self) -> Vec<&ParamSet> {
        vec![&self.params]
    }

    fn param_sets_mut(&mut self) -> Vec<&mut ParamSet> {
        vec![&mut self.params]
    }

    fn logits(&self, tape: &mut Tape, bound: &[Vec<Var>], batch: Var) -> Result<Var, NnError> {
        self.forward(tape, &bound[0], batch)
    }
}

/// Stacks three φ vectors into a (3, L) tensor: row 0 DM, row 1 GAN,
/// row 2 REAL.
pub fn concat_features(
    f_dm: &Tensor,
    f_gan: &Tensor,
    f_real: &Tensor,
) -> Result<Tensor, FusionError> {
    let parts = [f_dm, f_gan, f_real];
    let lens: Vec<usize> = parts.iter().map(|t| t.numel()).collect();
    if parts.iter().any(|t| t.rank() != 1) || lens.iter().any(|&l| l != lens[0]) {
        return Err(FusionError::LengthMismatch(
            parts.iter().map(|t| t.shape().iter().product()).collect(),
        ));
    }
    let data = parts
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    Ok(Tensor::new(vec![3, lens[0]], data)?)
}

/// (3, L) features → 3 logits, without recording gradients.
pub fn head_forward(x: &Tensor, head: &FusionHead) -> Result<Tensor, FusionError> {
    match *x.shape() {
        [3, l] => {
            pre_gap_length(l)?;
        }
        _ => {
            return Err(NnError::ShapeMismatch(format!(
                "head input must be (3, L), got {:?}",
                x.shape()
            ))
            .into())
        }
    }
    let mut tape = Tape::inference();
    let bound = head.params().bind(&mut tape);
    let xv = tape.input(Tensor::stack(std::slice::from_ref(x))?);
    let z = head.forward(&mut tape, &bound, xv)?;
    Ok(tape.value(z).clone().reshape(vec![3])?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prediction {
    pub label: ClassLabel,
    /// Softmax over (REAL, GAN, DM).
    pub probabilities: [f64; 3],
}

/// Argmax over (REAL, GAN, DM) with ties going to the earlier class.
pub fn decide(logits: &[f64]) -> Prediction {
    let p = softmax_rows(logits, 3);
    let mut best = 0;
    for i in 1..3 {
        if p[i] > p[best] {
            best = i;
        }
    }
    Prediction {
        label: ClassLabel::ALL[best],
        probabilities: [p[0], p[1], p[2]],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel<B = Backbone> {
    /// Base models in DM, GAN, REAL order.
    pub bases: [BaseModel<B>; 3],
    pub head: FusionHead,
    pub class_weights: Option<ClassWeights>,
    pub training_log: TrainingLog,
    pub selected_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadTrainConfig {
    pub head: HeadConfig,
    /// Weights are the raw inverse class counts, so the learning rate here
    /// is correspondingly larger than for the base models.
    pub optim: TrainConfig,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            head: HeadConfig::default(),
            optim: TrainConfig {
                epochs: 30,
                batch_size: 32,
                learning_rate: 20.0,
                seed: 0,
            },
        }
    }
}

impl<B: FeatureExtractor> FusionModel<B> {
    /// Assembles a model with a fresh head. Each base model must sit in its
    /// class slot and all must share one feature length of at least 7.
    pub fn new(
        dm: BaseModel<B>,
        gan: BaseModel<B>,
        real: BaseModel<B>,
        head: HeadConfig,
    ) -> Result<Self, FusionError> {
        let bases = [dm, gan, real];
        for (bm, expected) in bases.iter().zip(BASE_ORDER) {
            if bm.predominant != expected {
                return Err(FusionError::BaseOrder {
                    expected,
                    got: bm.predominant,
                });
            }
        }
        let dims: Vec<usize> = bases.iter().map(|b| b.feature_dim).collect();
        if dims.iter().any(|&d| d != dims[0]) {
            return Err(FusionError::LengthMismatch(dims));
        }
        pre_gap_length(dims[0])?;
        Ok(Self {
            bases,
            head: FusionHead::build(head)?,
            class_weights: None,
            training_log: TrainingLog::default(),
            selected_epoch: 0,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.bases[0].feature_dim
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.bases[0].backbone.input_size()
    }

    pub fn base(&self, class: ClassLabel) -> &BaseModel<B> {
        &self.bases[BASE_ORDER
            .iter()
            .position(|&c| c == class)
            .expect("three classes")]
    }

    pub fn base_digests(&self) -> [String; 3] {
        [
            self.bases[0].digest(),
            self.bases[1].digest(),
            self.bases[2].digest(),
        ]
    }

    fn check_frozen(&self) -> Result<(), FusionError> {
        match self.bases.iter().find(|b| !b.is_finalized()) {
            Some(b) => Err(FusionError::NotFrozenBase(b.predominant)),
            None => Ok(()),
        }
    }

    /// (3, L) head inputs for a batch of (3,H,W) images.
    pub fn features(&self, images: &[Tensor]) -> Result<Vec<Tensor>, FusionError> {
        let [dm, gan, real] = &self.bases;
        let f_dm = extract_phi_batch(dm, images)?;
        let f_gan = extract_phi_batch(gan, images)?;
        let f_real = extract_phi_batch(real, images)?;
        f_dm.iter()
            .zip(&f_gan)
            .zip(&f_real)
            .map(|((a, b), c)| concat_features(a, b, c))
            .collect()
    }

    /// Head predictions for precomputed (3, L) features.
    pub fn predict_features(&self, features: &[Tensor]) -> Result<Vec<Prediction>, FusionError> {
        let logits = train::batched_logits(&self.head, features, 32)?;
        Ok(logits.iter().map(|z| decide(z)).collect())
    }

    pub fn predict_batch(&self, images: &[Tensor]) -> Result<Vec<Prediction>, FusionError> {
        self.check_frozen()?;
        if images.is_empty() {
            return Ok(Vec::new());
        }
        self.predict_features(&self.features(images)?)
    }

    pub fn predict(&self, image: &Tensor) -> Result<Prediction, FusionError> {
        Ok(self.predict_batch(std::slice::from_ref(image))?[0])
    }

    /// Trains the head on pre-loaded images with the weighted cross-entropy
    /// and restores the lowest-validation-loss epoch. Base models are never
    /// touched.
    pub fn train_head_on(
        &mut self,
        train_images: &[Tensor],
        train_labels: &[ClassLabel],
        val_images: &[Tensor],
        val_labels: &[ClassLabel],
        weights: ClassWeights,
        optim: &TrainConfig,
    ) -> Result<(), FusionError> {
        self.check_frozen()?;
        let ft = self.features(train_images)?;
        let fv = self.features(val_images)?;
        let tt: Vec<usize> = train_labels.iter().map(|l| l.index()).collect();
        let tv: Vec<usize> = val_labels.iter().map(|l| l.index()).collect();
        let log = train::fit(
            &mut self.head,
            Dataset::new(&ft, &tt),
            Dataset::new(&fv, &tv),
            &weights.as_array(),
            optim,
        )?;
        self.selected_epoch = log.selected_epoch;
        self.training_log = log;
        self.class_weights = Some(weights);
        Ok(())
    }
}

/// Loads the images of `train` and `val` and trains the head of `fm`.
pub fn train_head<B: FeatureExtractor>(
    mut fm: FusionModel<B>,
    train: &Manifest,
    val: &Manifest,
    weights: ClassWeights,
    optim: &TrainConfig,
) -> Result<FusionModel<B>, FusionError> {
    fm.check_frozen()?;
    let size = fm.input_size();
    let xt = data::load_tensors(train, size)?;
    let xv = data::load_tensors(val, size)?;
    let lt: Vec<ClassLabel> = train.iter().map(|r| r.label).collect();
    let lv: Vec<ClassLabel> = val.iter().map(|r| r.label).collect();
    fm.train_head_on(&xt, &lt, &xv, &lv, weights, optim)?;
    Ok(fm)
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    head: HeadConfig,
    class_order: Vec<ClassLabel>,
    base_order: Vec<ClassLabel>,
    class_weights: Option<ClassWeights>,
    selected_epoch: usize,
    training_log: TrainingLog,
}

impl FusionModel<Backbone> {
    /// Bundle layout: `base_dm/`, `base_gan/`, `base_real/`, `head.dfx`,
    /// `fusion.json`.
    pub fn save(&self, dir: &Path) -> Result<(), FusionError> {
        fs::create_dir_all(dir)?;
        for bm in &self.bases {
            bm.save(&dir.join(format!("base_{}", bm.predominant.as_str())))?;
        }
        nn::save_checkpoint(self.head.params(), &dir.join("head.dfx"))?;
        let meta = Meta {
            head: self.head.config().clone(),
            class_order: ClassLabel::ALL.to_vec(),
            base_order: BASE_ORDER.to_vec(),
            class_weights: self.class_weights,
            selected_epoch: self.selected_epoch,
            training_log: self.training_log.clone(),
        };
        fs::write(
            dir.join("fusion.json"),
            serde_json::to_string_pretty(&meta)? + "\n",
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, FusionError> {
        let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join("fusion.json"))?)?;
        let base = |c: ClassLabel| BaseModel::load(&dir.join(format!("base_{}", c.as_str())));
        let mut fm = Self::new(
            base(ClassLabel::Dm)?,
            base(ClassLabel::Gan)?,
            base(ClassLabel::Real)?,
            meta.head.clone(),
        )?;
        fm.head = FusionHead::from_parts(meta.head, nn::load_checkpoint(&dir.join("head.dfx"))?)?;
        fm.class_weights = meta.class_weights;
        fm.selected_epoch = meta.selected_epoch;
        fm.training_log = meta.training_log;
        Ok(fm)
    }
}
