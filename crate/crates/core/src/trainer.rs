//! Joint training of the encoder, classifier head and label network.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::{LossMode, RunConfig};
use crate::dataset::{Batcher, Dataset, DatasetHeader, FeatureBatch, UtteranceRecord};
use crate::encoder::{augmentation_views, EncoderDims, EncoderParams, ModalityMask};
use crate::error::{Error, Result};
use crate::label_embedding::{LabelDepth, LabelDims, LabelEmbeddingParams};
use crate::losses::{cross_entropy, sslcl_loss, supcon_loss, total_loss, SslclOptions};
use crate::metrics::{accuracy, weighted_f1};
use crate::optim::Adam;
use crate::params::{Bound, ParamGroup, ParamStore};
use crate::similarity::SimilarityContext;
use crate::tensor::Tensor;

/// Stream of the parameter-initialisation RNG; batch order uses streams
/// `0..epochs` of the same seed.
const INIT_STREAM: u64 = 1 << 40;

/// Encoder, head and label network sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub labels: LabelEmbeddingParams,
    /// Masked views used as extra positives (empty when augmentation is off).
    pub views: Vec<ModalityMask>,
}

impl Model {
    pub fn new(config: &RunConfig, header: &DatasetHeader, seed: u64) -> Result<Self> {
        header.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::new(
            &mut store,
            EncoderDims {
                d_t: header.d_t,
                d_a: header.d_a,
                d_v: header.d_v,
                hidden: config.model.hidden,
                feature: config.model.feature_dim,
                classes: header.k,
            },
            &mut rng,
        );
        let labels = LabelEmbeddingParams::new(
            &mut store,
            config.label_depth,
            LabelDims {
                classes: header.k,
                embedding: config.model.label_dim(),
                feature: config.model.feature_dim,
                middle: config.model.label_middle(),
            },
            &mut rng,
        )?;
        let views = if config.augmentation {
            augmentation_views(header.modality_setting())
        } else {
            Vec::new()
        };
        Ok(Self {
            store,
            encoder,
            labels,
            views,
        })
    }

    /// Rebuilds a trained model from its checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Self::new(&ckpt.config, &ckpt.header, ckpt.seed)?;
        model.store.load_named(&ckpt.params)?;
        Ok(model)
    }

    /// Argmax of the classifier head on the full view.
    pub fn predict(&self, dataset: &Dataset) -> Result<Vec<usize>> {
        let batch = FeatureBatch::from_records(&dataset.header, &dataset.records);
        let tape = Tape::new();
        let params = self.store.bind(&tape);
        let f = self.encoder.encode(&tape, &params, &batch, ModalityMask::FULL)?;
        Ok(self.encoder.logits(&params, f).value().argmax_rows())
    }

    /// Current label embeddings `G` (`K×d`).
    pub fn label_embeddings(&self) -> Tensor {
        let tape = Tape::new();
        let params = self.store.bind(&tape);
        self.labels.embed_labels(&params).value()
    }
}

/// Every term of one step's objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pos: Vec<f64>,
    pub l_neg: Vec<f64>,
    pub weights: Vec<f64>,
    #[serde(rename = "L_Label")]
    pub l_label: f64,
    #[serde(rename = "L_SSLCL")]
    pub l_sslcl: f64,
    /// SupCon value in supcon mode, 0 otherwise.
    #[serde(rename = "L_SupCon")]
    pub l_supcon: f64,
    pub skipped_anchors: usize,
    #[serde(rename = "L_CE")]
    pub l_ce: f64,
    #[serde(rename = "L_Train")]
    pub l_train: f64,
    pub floored_logs: usize,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_label, self.l_sslcl, self.l_supcon, self.l_ce, self.l_train]
            .iter()
            .chain(&self.l_pos)
            .chain(&self.l_neg)
            .all(|v| v.is_finite())
    }
}

fn column(v: Var<'_>) -> Vec<f64> {
    v.value().data
}

/// Builds `L_Train` for one batch on `tape`.
///
/// Parameters come from `params`, so the same model structure can be
/// evaluated on perturbed copies of its store.
pub fn forward_loss<'t>(
    tape: &'t Tape,
    params: &Bound<'t>,
    model: &Model,
    batch: &FeatureBatch,
    config: &RunConfig,
) -> Result<(Var<'t>, LossBreakdown)> {
    let hp = &config.hp;
    let y = &batch.labels;
    let features = model.encoder.encode(tape, params, batch, ModalityMask::FULL)?;
    let ce = cross_entropy(model.encoder.classify(params, features), y);
    let zero = || tape.constant(Tensor::scalar(0.0));
    let mut b = LossBreakdown {
        l_pos: Vec::new(),
        l_neg: Vec::new(),
        weights: Vec::new(),
        l_label: 0.0,
        l_sslcl: 0.0,
        l_supcon: 0.0,
        skipped_anchors: 0,
        l_ce: 0.0,
        l_train: 0.0,
        floored_logs: 0,
    };
    let aux = match config.loss_mode {
        LossMode::Sslcl => {
            let g = model.labels.embed_labels(params);
            let ctx = SimilarityContext::new(features.0, g, y, config.similarity)?;
            let views = model
                .views
                .iter()
                .map(|&m| model.encoder.encode(tape, params, batch, m).map(|f| f.0))
                .collect::<Result<Vec<_>>>()?;
            let opts = SslclOptions {
                use_negative_loss: config.use_negative_loss,
                consistent_denominator: config.consistent_denominator,
            };
            let terms = sslcl_loss(&ctx, &views, &batch.own_class_counts(), hp, opts)?;
            b.l_pos = column(terms.l_pos);
            b.l_neg = column(terms.l_neg);
            b.weights = terms.weights;
            b.l_label = terms.label_loss.item();
            b.l_sslcl = terms.loss.item();
            terms.loss
        }
        LossMode::Supcon => {
            let terms = supcon_loss(features, y, hp.temperature);
            b.l_supcon = terms.loss.item();
            b.skipped_anchors = terms.skipped_anchors;
            terms.loss
        }
        LossMode::CeOnly => zero(),
    };
    let loss = total_loss(aux, ce, hp.eta);
    b.l_ce = ce.item();
    b.l_train = loss.item();
    b.floored_logs = tape.floored_logs();
    Ok((loss, b))
}

/// Per-step line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_pos_mean: f64,
    pub l_neg_mean: f64,
    #[serde(rename = "L_Label")]
    pub l_label: f64,
    #[serde(rename = "L_SSLCL")]
    pub l_sslcl: f64,
    #[serde(rename = "L_SupCon")]
    pub l_supcon: f64,
    #[serde(rename = "L_CE")]
    pub l_ce: f64,
    #[serde(rename = "L_Train")]
    pub l_train: f64,
    pub floored_logs: usize,
}

/// Per-epoch line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_wf1: f64,
    pub eval_wf1: Option<f64>,
}

#[derive(Serialize)]
struct LogHeader<'a> {
    config: &'a RunConfig,
    seed: u64,
}

/// JSON Lines training log: a header with the effective config, then step
/// and epoch records in the order they happened.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub lines: Vec<String>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl MetricsLog {
    fn push<T: Serialize>(&mut self, record: &T) {
        self.lines.push(serde_json::to_string(record).expect("log record serialises"));
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }

    /// Mean of `pick` over the steps of each epoch.
    pub fn epoch_means(&self, pick: impl Fn(&StepRecord) -> f64) -> Vec<f64> {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for s in &self.steps {
            let e = sums.entry(s.epoch).or_default();
            e.0 += pick(s);
            e.1 += 1;
        }
        sums.values().map(|(t, c)| t / *c as f64).collect()
    }
}

/// Everything needed to rebuild and score a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub seed: u64,
    pub header: DatasetHeader,
    pub steps: u64,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub log: MetricsLog,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Trains one seed. Two Adam optimizers: encoder and head at
/// `encoder_lr`, label network at `label_lr`.
pub fn train(config: &RunConfig, seed: u64, data: &Dataset, eval: Option<&Dataset>) -> Result<TrainOutcome> {
    config.validate()?;
    data.validate()?;
    let mut model = Model::new(config, &data.header, seed)?;
    let batcher = Batcher::new(data, config.batch_size, seed, true)?;
    let mut encoder_opt = Adam::new(
        config.encoder_lr,
        config.adam,
        model.store.ids_in(ParamGroup::Encoder),
        &model.store,
    );
    let mut label_opt = Adam::new(
        config.label_lr,
        config.adam,
        model.store.ids_in(ParamGroup::Label),
        &model.store,
    );
    let mut log = MetricsLog::default();
    log.push(&LogHeader { config, seed });
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        for batch in batcher.epoch(epoch) {
            let tape = Tape::new();
            let params = model.store.bind(&tape);
            let (loss, b) = forward_loss(&tape, &params, &model, &batch, config)?;
            let diverged = |b: &LossBreakdown| Error::Diverged {
                step,
                breakdown: serde_json::to_string(b).unwrap_or_default(),
            };
            if !b.is_finite() {
                return Err(diverged(&b));
            }
            let grads = tape.grad(loss).map_err(|e| match e {
                Error::NonFinite(_) => diverged(&b),
                other => other,
            })?;
            if !config.freeze_encoder {
                encoder_opt.step(&mut model.store, &grads);
            }
            label_opt.step(&mut model.store, &grads);
            let record = StepRecord {
                step,
                epoch,
                l_pos_mean: mean(&b.l_pos),
                l_neg_mean: mean(&b.l_neg),
                l_label: b.l_label,
                l_sslcl: b.l_sslcl,
                l_supcon: b.l_supcon,
                l_ce: b.l_ce,
                l_train: b.l_train,
                floored_logs: b.floored_logs,
            };
            log.push(&record);
            log.steps.push(record);
            step += 1;
        }
        let score = |ds: &Dataset| -> Result<f64> {
            Ok(weighted_f1(&model.predict(ds)?, &ds.labels(), ds.header.k)?.weighted)
        };
        let record = EpochRecord {
            epoch,
            train_wf1: score(data)?,
            eval_wf1: eval.map(&score).transpose()?,
        };
        log.push(&record);
        log.epochs.push(record);
    }
    let checkpoint = Checkpoint {
        config: config.clone(),
        seed,
        header: data.header.clone(),
        steps: step as u64,
        params: model.store.to_named(),
    };
    Ok(TrainOutcome {
        model,
        checkpoint,
        log,
    })
}

/// Held-out scores of a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub per_class_f1: Vec<f64>,
    pub support: Vec<usize>,
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<EvalReport> {
    let golds = data.labels();
    let preds = model.predict(data)?;
    let f1 = weighted_f1(&preds, &golds, data.header.k)?;
    Ok(EvalReport {
        weighted_f1: f1.weighted,
        accuracy: accuracy(&preds, &golds),
        per_class_f1: f1.per_class,
        support: f1.support,
    })
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so entries whose true gradient
/// is (near) zero are judged by absolute error instead.
pub const GRADCHECK_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub loss_mode: LossMode,
    pub augmentation: bool,
    pub instances: usize,
    pub entries_checked: usize,
    /// Largest relative error per parameter group (`encoder`, `head`, `label`).
    pub max_rel_err: BTreeMap<String, f64>,
    pub worst_parameter: String,
    pub worst_rel_err: f64,
    pub passed: bool,
}

fn group_of(name: &str) -> &'static str {
    if name.starts_with("encoder.head") {
        "head"
    } else if name.starts_with("encoder.") {
        "encoder"
    } else {
        "label"
    }
}

/// A random trimodal instance with `N ≤ 6`, `K ≤ 4`, `d ≤ 5`.
fn gradcheck_instance(base: &RunConfig, rng: &mut ChaCha8Rng) -> (RunConfig, Dataset) {
    let n = rng.random_range(2..=6);
    let k = rng.random_range(2..=4);
    let d = rng.random_range(2..=5);
    let mut config = base.clone();
    config.model.hidden = rng.random_range(2..=4);
    config.model.feature_dim = d;
    config.model.label_dim = Some(if config.label_depth == LabelDepth::EmbeddingOnly {
        d
    } else {
        rng.random_range(2..=5)
    });
    config.model.label_middle = Some(rng.random_range(2..=4));
    let header = DatasetHeader {
        d_t: rng.random_range(2..=4),
        d_a: rng.random_range(2..=3),
        d_v: rng.random_range(2..=3),
        k,
        label_names: Vec::new(),
    };
    let vector = |len: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let records = (0..n)
        .map(|i| UtteranceRecord {
            id: format!("g{i}"),
            dialogue_id: "g".into(),
            speaker_id: "s0".into(),
            label: rng.random_range(0..k),
            text_features: vector(header.d_t, rng),
            audio_features: Some(vector(header.d_a, rng)),
            visual_features: Some(vector(header.d_v, rng)),
        })
        .collect();
    (config, Dataset { header, records })
}

fn loss_value(model: &Model, store: &ParamStore, batch: &FeatureBatch, config: &RunConfig) -> Result<f64> {
    let tape = Tape::new();
    let params = store.bind(&tape);
    Ok(forward_loss(&tape, &params, model, batch, config)?.1.l_train)
}

/// Central finite differences against autodiff for every trainable
/// parameter of `config`'s loss mode, on `instances` random small problems.
pub fn gradcheck(config: &RunConfig, instances: usize, seed: u64) -> Result<GradcheckReport> {
    let mut max_rel_err: BTreeMap<String, f64> = BTreeMap::new();
    let mut worst = (String::new(), 0.0f64);
    let mut checked = 0;
    for instance in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(instance as u64);
        let (cfg, data) = gradcheck_instance(config, &mut rng);
        let mut model = Model::new(&cfg, &data.header, seed.wrapping_add(instance as u64))?;
        // nonzero biases keep masked branches off the ReLU kink
        for id in model.store.ids().collect::<Vec<_>>() {
            for v in &mut model.store.get_mut(id).data {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let batch = FeatureBatch::from_records(&data.header, &data.records);
        let tape = Tape::new();
        let params = model.store.bind(&tape);
        let (loss, _) = forward_loss(&tape, &params, &model, &batch, &cfg)?;
        let grads = tape.grad(loss)?;
        let mut store = model.store.clone();
        for id in model.store.ids() {
            if cfg.freeze_encoder && model.store.group(id) == ParamGroup::Encoder {
                continue;
            }
            let name = model.store.name(id).to_string();
            let analytic = grads.get_or_zeros(id, model.store.get(id).shape);
            for i in 0..analytic.data.len() {
                let x0 = store.get(id).data[i];
                store.get_mut(id).data[i] = x0 + GRADCHECK_STEP;
                let up = loss_value(&model, &store, &batch, &cfg)?;
                store.get_mut(id).data[i] = x0 - GRADCHECK_STEP;
                let down = loss_value(&model, &store, &batch, &cfg)?;
                store.get_mut(id).data[i] = x0;
                let fd = (up - down) / (2.0 * GRADCHECK_STEP);
                let ad = analytic.data[i];
                let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(GRADCHECK_FLOOR);
                let slot = max_rel_err.entry(group_of(&name).to_string()).or_insert(0.0);
                *slot = slot.max(rel);
                if rel > worst.1 {
                    worst = (format!("{name}[{i}] (instance {instance})"), rel);
                }
                checked += 1;
            }
        }
    }
    Ok(GradcheckReport {
        loss_mode: config.loss_mode,
        augmentation: config.augmentation,
        instances,
        entries_checked: checked,
        passed: worst.1 < GRADCHECK_TOL,
        max_rel_err,
        worst_parameter: worst.0,
        worst_rel_err: worst.1,
    })
}
