//! Label embedding network: an embedding table followed by ReLU and a linear
//! projection into the sample-feature space, `g_k = W_g·max(0, E_k) + b_g`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelDepth {
    /// `G = ReLU(E)`; only valid when the table width equals `d`.
    EmbeddingOnly,
    #[default]
    TwoLayer,
    /// Extra linear + ReLU between the table and `W_g`.
    ThreeLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDims {
    pub classes: usize,
    /// Table width `d_e`.
    pub embedding: usize,
    /// Output dimension `d`, shared with the encoder features.
    pub feature: usize,
    /// Hidden width of the extra three-layer stage.
    pub middle: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelEmbeddingParams {
    pub depth: LabelDepth,
    pub dims: LabelDims,
    pub table: ParamId,
    pub middle: Option<(ParamId, ParamId)>,
    pub projection: Option<(ParamId, ParamId)>,
}

impl LabelEmbeddingParams {
    pub fn new(
        store: &mut ParamStore,
        depth: LabelDepth,
        dims: LabelDims,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if depth == LabelDepth::EmbeddingOnly && dims.embedding != dims.feature {
            return Err(Error::Config(format!(
                "embedding-only label network needs label_dim == feature_dim, got {} and {}",
                dims.embedding, dims.feature
            )));
        }
        let table = store.add_uniform(
            "label.embedding",
            ParamGroup::Label,
            dims.classes,
            dims.embedding,
            dims.classes,
            rng,
        );
        let mut layer = |name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng| {
            let w = store.add_uniform(format!("{name}.weight"), ParamGroup::Label, output, input, input, rng);
            let b = store.add(format!("{name}.bias"), ParamGroup::Label, Tensor::zeros(1, output));
            (w, b)
        };
        let middle = (depth == LabelDepth::ThreeLayer)
            .then(|| layer("label.middle", dims.embedding, dims.middle, rng));
        let projection = match depth {
            LabelDepth::EmbeddingOnly => None,
            LabelDepth::TwoLayer => Some(layer("label.projection", dims.embedding, dims.feature, rng)),
            LabelDepth::ThreeLayer => Some(layer("label.projection", dims.middle, dims.feature, rng)),
        };
        Ok(Self {
            depth,
            dims,
            table,
            middle,
            projection,
        })
    }

    /// All label embeddings `G` (`K×d`), row `k` for class `k`.
    pub fn embed_labels<'t>(&self, params: &Bound<'t>) -> Var<'t> {
        let mut h = params.get(self.table).relu();
        if let Some((w, b)) = self.middle {
            h = h.matmul_t(params.get(w)).add_row(params.get(b)).relu();
        }
        match self.projection {
            Some((w, b)) => h.matmul_t(params.get(w)).add_row(params.get(b)),
            None => h,
        }
    }
}
