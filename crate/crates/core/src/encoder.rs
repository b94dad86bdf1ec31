//! Reference multimodal encoder.
//!
//! Per-modality projection with ReLU, concatenation, one fusion layer with
//! ReLU (the penultimate features `F`), and a linear classifier head. A
//! masked-out modality is replaced by a zero input vector, so every view goes
//! through the same fusion computation with the same parameters.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, Tape, Var};
use crate::dataset::{FeatureBatch, ModalitySetting};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityMask {
    pub use_text: bool,
    pub use_audio: bool,
    pub use_visual: bool,
}

impl ModalityMask {
    pub const FULL: ModalityMask = ModalityMask {
        use_text: true,
        use_audio: true,
        use_visual: true,
    };
    pub const TEXT: ModalityMask = ModalityMask {
        use_text: true,
        use_audio: false,
        use_visual: false,
    };
    pub const TEXT_AUDIO: ModalityMask = ModalityMask {
        use_text: true,
        use_audio: true,
        use_visual: false,
    };
    pub const TEXT_VISUAL: ModalityMask = ModalityMask {
        use_text: true,
        use_audio: false,
        use_visual: true,
    };
}

/// Masked views used as extra positives: `t`, `t+a`, `t+v` for three
/// modalities, `t` alone for two, nothing for text only.
pub fn augmentation_views(setting: ModalitySetting) -> Vec<ModalityMask> {
    match setting {
        ModalitySetting::Trimodal => vec![
            ModalityMask::TEXT,
            ModalityMask::TEXT_AUDIO,
            ModalityMask::TEXT_VISUAL,
        ],
        ModalitySetting::Bimodal => vec![ModalityMask::TEXT],
        ModalitySetting::TextOnly => vec![],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    /// `out×in`
    pub weight: ParamId,
    /// `1×out`
    pub bias: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), ParamGroup::Encoder, output, input, input, rng);
        let bias = store.add(format!("{name}.bias"), ParamGroup::Encoder, Tensor::zeros(1, output));
        Self { weight, bias }
    }

    pub fn forward<'t>(&self, params: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        x.matmul_t(params.get(self.weight)).add_row(params.get(self.bias))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub d_t: usize,
    pub d_a: usize,
    pub d_v: usize,
    /// Width of each modality projection.
    pub hidden: usize,
    /// Penultimate feature dimension `d`.
    pub feature: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub text: Linear,
    pub audio: Option<Linear>,
    pub visual: Option<Linear>,
    pub fusion: Linear,
    pub head: Linear,
}

impl EncoderParams {
    pub fn new(store: &mut ParamStore, dims: EncoderDims, rng: &mut ChaCha8Rng) -> Self {
        let text = Linear::new(store, "encoder.text", dims.d_t, dims.hidden, rng);
        let audio = (dims.d_a > 0).then(|| Linear::new(store, "encoder.audio", dims.d_a, dims.hidden, rng));
        let visual = (dims.d_v > 0).then(|| Linear::new(store, "encoder.visual", dims.d_v, dims.hidden, rng));
        let branches = 1 + usize::from(audio.is_some()) + usize::from(visual.is_some());
        let fusion = Linear::new(store, "encoder.fusion", branches * dims.hidden, dims.feature, rng);
        let head = Linear::new(store, "encoder.head", dims.feature, dims.classes, rng);
        Self {
            dims,
            text,
            audio,
            visual,
            fusion,
            head,
        }
    }

    /// Penultimate features `F` (`N×d`) of `batch` under `mask`.
    pub fn encode<'t>(&self, tape: &'t Tape, params: &Bound<'t>, batch: &FeatureBatch, mask: ModalityMask) -> Result<Features<'t>> {
        let text = batch.text.as_ref().ok_or(Error::MissingText)?;
        if !mask.use_text {
            return Err(Error::MissingText);
        }
        let n = batch.len();
        let branch = |layer: &Linear, input: Option<&Tensor>, dim: usize, keep: bool| -> Var<'t> {
            let x = match input {
                Some(t) if keep => tape.constant(t.clone()),
                _ => tape.constant(Tensor::zeros(n, dim)),
            };
            layer.forward(params, x).relu()
        };
        let mut parts = vec![branch(&self.text, Some(text), self.dims.d_t, true)];
        if let Some(layer) = &self.audio {
            parts.push(branch(layer, batch.audio.as_ref(), self.dims.d_a, mask.use_audio));
        }
        if let Some(layer) = &self.visual {
            parts.push(branch(layer, batch.visual.as_ref(), self.dims.d_v, mask.use_visual));
        }
        let fused = if parts.len() == 1 { parts[0] } else { tape.concat_cols(&parts) };
        Ok(Features(self.fusion.forward(params, fused).relu()))
    }

    /// Class probabilities `p` (`N×K`), a row-wise softmax of the head logits.
    pub fn classify<'t>(&self, params: &Bound<'t>, features: Features<'t>) -> Probabilities<'t> {
        let logits = self.head.forward(params, features.0);
        let lse = logits.log_sum_exp_rows(None);
        Probabilities(logits.add_col(-lse).exp())
    }

    /// Head logits, for argmax prediction.
    pub fn logits<'t>(&self, params: &Bound<'t>, features: Features<'t>) -> Var<'t> {
        self.head.forward(params, features.0)
    }
}

/// Penultimate-layer sample features. Kept apart from [`Probabilities`] so
/// the contrastive losses cannot be handed classifier outputs.
#[derive(Clone, Copy, Debug)]
pub struct Features<'t>(pub Var<'t>);

/// Row-stochastic classifier output.
#[derive(Clone, Copy, Debug)]
pub struct Probabilities<'t>(pub Var<'t>);
