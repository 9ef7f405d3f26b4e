//! Feature extractors behind every base model.
//!
//! [`FeatureExtractor`] is the pluggable interface; [`Backbone`] is the
//! compact reference CNN used at desk scale: `depth` blocks of
//! conv 3×3 (pad 1) → ReLU → 2×2 average downsample.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{self, NnError, ParamSet, Parameter, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("bad backbone config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
}

/// Image → (C, H', W') feature map, with trainable parameters.
pub trait FeatureExtractor: Send + Sync {
    /// Channel count C of the produced feature map.
    fn feature_channels(&self) -> usize;
    /// Expected (H, W) of input images.
    fn input_size(&self) -> (usize, usize);
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Records the forward pass of an (N,3,H,W) batch on `tape`, using the
    /// parameter handles returned by `self.params().bind(tape)`.
    fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var, NnError>;

    fn freeze(&mut self) {
        self.params_mut().freeze();
    }

    fn is_frozen(&self) -> bool {
        self.params().all_frozen()
    }
}

/// Runs an (N,3,H,W) batch through `b` without recording gradients.
pub fn forward_features<B: FeatureExtractor + ?Sized>(
    b: &B,
    batch: &Tensor,
) -> Result<Tensor, NnError> {
    let (h, w) = b.input_size();
    match *batch.shape() {
        [_, 3, bh, bw] if (bh, bw) == (h, w) => {}
        _ => {
            return Err(NnError::ShapeMismatch(format!(
                "expected (N,3,{h},{w}) input, got {:?}",
                batch.shape()
            )))
        }
    }
    let mut tape = Tape::inference();
    let bound = b.params().bind(&mut tape);
    let x = tape.input(batch.clone());
    let y = b.forward(&mut tape, &bound, x)?;
    Ok(tape.value(y).clone())
}

/// Fixed standardisation applied to [0,1] pixels before the first block.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Output channels per block; the block count is the depth.
    pub widths: Vec<usize>,
    /// (H, W) of input images.
    pub input_size: (usize, usize),
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 128],
            input_size: (64, 64),
            seed: 0,
        }
    }
}

impl BackboneConfig {
    /// Spatial size of the feature map. Each block halves with floor.
    pub fn output_spatial(&self) -> (usize, usize) {
        let d = self.widths.len() as u32;
        (self.input_size.0 >> d, self.input_size.1 >> d)
    }

    fn validate(&self) -> Result<(), BackboneError> {
        if self.widths.len() < 2 {
            return Err(BackboneError::BadConfig(format!(
                "depth {} < 2",
                self.widths.len()
            )));
        }
        if self.widths.contains(&0) {
            return Err(BackboneError::BadConfig("zero channel width".into()));
        }
        let (h, w) = self.output_spatial();
        if h == 0 || w == 0 {
            return Err(BackboneError::BadConfig(format!(
                "input {:?} vanishes after {} halvings",
                self.input_size,
                self.widths.len()
            )));
        }
        Ok(())
    }
}

/// Reference CNN feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    params: ParamSet,
}

impl Backbone {
    pub fn build(config: BackboneConfig) -> Result<Self, BackboneError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let mut c_in = 3;
        for (i, &c_out) in config.widths.iter().enumerate() {
            let fan_in = c_in * 9;
            params.push(Parameter::kaiming_uniform(
                &format!("block{i}.conv.weight"),
                &[c_out, c_in, 3, 3],
                fan_in,
                &mut rng,
            ));
            params.push(Parameter::zeros(&format!("block{i}.conv.bias"), &[c_out]));
            c_in = c_out;
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a backbone from stored parameters, checking they fit the
    /// architecture.
    pub fn from_parts(config: BackboneConfig, params: ParamSet) -> Result<Self, BackboneError> {
        let template = Self::build(config.clone())?;
        let fits = template.params.len() == params.len()
            && template
                .params
                .iter()
                .zip(params.iter())
                .all(|(a, b)| a.name == b.name && a.tensor.shape() == b.tensor.shape());
        if !fits {
            return Err(BackboneError::BadConfig(
                "checkpoint does not match architecture".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.num_values()
    }

    /// Writes `checkpoint.dfx` and the `backbone.json` architecture sidecar.
    pub fn save(&self, dir: &Path) -> Result<(), BackboneError> {
        fs::create_dir_all(dir)?;
        nn::save_checkpoint(&self.params, &dir.join("checkpoint.dfx"))?;
        fs::write(
            dir.join("backbone.json"),
            serde_json::to_string_pretty(&self.config)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, BackboneError> {
        let config: BackboneConfig =
            serde_json::from_str(&fs::read_to_string(dir.join("backbone.json"))?)?;
        let params = nn::load_checkpoint(&dir.join("checkpoint.dfx"))?;
        Self::from_parts(config, params)
    }
}

impl FeatureExtractor for Backbone {
    fn feature_channels(&self) -> usize {
        *self.config.widths.last().expect("validated depth")
    }

    fn input_size(&self) -> (usize, usize) {
        self.config.input_size
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var, NnError> {
        let mut h = tape.affine(x, 1.0 / INPUT_STD, -INPUT_MEAN / INPUT_STD);
        for pair in bound.chunks(2) {
            let c = tape.conv2d(h, pair[0], pair[1], 1, 1)?;
            let r = tape.relu(c);
            h = tape.avg_pool2(r)?;
        }
        Ok(h)
    }
}

/// Global average pooling followed by a linear map to two logits
/// (index 0 = others, index 1 = predominant).
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryHead {
    params: ParamSet,
}

impl BinaryHead {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        params.push(Parameter::kaiming_uniform(
            "head.linear.weight",
            &[2, channels],
            channels,
            &mut rng,
        ));
        params.push(Parameter::zeros("head.linear.bias", &[2]));
        Self { params }
    }

    pub fn zeros(channels: usize) -> Self {
        let mut params = ParamSet::new();
        params.push(Parameter::zeros("head.linear.weight", &[2, channels]));
        params.push(Parameter::zeros("head.linear.bias", &[2]));
        Self { params }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// (N,C,H,W) feature maps → (N,2) logits.
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], features: Var) -> Result<Var, NnError> {
        let pooled = tape.global_avg_pool(features, 2)?;
        tape.linear(pooled, bound[0], bound[1])
    }
}

/// A backbone with a binary head attached.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryClassifier<B> {
    pub backbone: B,
    pub head: BinaryHead,
}

/// Composes `backbone` with a fresh seeded binary head.
pub fn attach_binary_head<B: FeatureExtractor>(backbone: B, seed: u64) -> BinaryClassifier<B> {
    let head = BinaryHead::new(backbone.feature_channels(), seed);
    BinaryClassifier { backbone, head }
}

impl<B: FeatureExtractor> BinaryClassifier<B> {
    pub fn with_head(backbone: B, head: BinaryHead) -> Self {
        Self { backbone, head }
    }

    /// Removes the head, returning the untouched backbone.
    pub fn strip(self) -> (B, BinaryHead) {
        (self.backbone, self.head)
    }

    pub fn freeze(&mut self) {
        self.backbone.freeze();
        self.head.params_mut().freeze();
    }

    /// Records image batch → (N,2) logits.
    pub fn forward(
        &self,
        tape: &mut Tape,
        backbone_bound: &[Var],
        head_bound: &[Var],
        x: Var,
    ) -> Result<Var, NnError> {
        let f = self.backbone.forward(tape, backbone_bound, x)?;
        self.head.forward(tape, head_bound, f)
    }

    /// (N,3,H,W) → (N,2) logits without recording gradients.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor, NnError> {
        let mut tape = Tape::inference();
        let bb = self.backbone.params().bind(&mut tape);
        let hb = self.head.params().bind(&mut tape);
        let x = tape.input(batch.clone());
        let y = self.forward(&mut tape, &bb, &hb, x)?;
        Ok(tape.value(y).clone())
    }
}
