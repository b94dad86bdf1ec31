//! WebAssembly bindings behind `www/index.html`. Every export takes and
//! returns JSON strings so the page needs no generated glue beyond
//! wasm-bindgen's own.

use serde::{Deserialize, Serialize};
use serde_json::json;
use wasm_bindgen::prelude::*;

use sslcl::autodiff::Tape;
use sslcl::config::{LossMode, RunConfig};
use sslcl::encoder::Features;
use sslcl::harness::split;
use sslcl::losses::{label_label_loss, negative_loss, positive_loss, supcon_loss, HyperParams};
use sslcl::similarity::{centered, soft_hgr_batch, soft_hgr_pair_total, Measure, SimilarityContext};
use sslcl::tensor::Tensor;
use sslcl::trainer::{evaluate, train};

#[derive(Deserialize)]
struct Board {
    samples: Vec<[f64; 2]>,
    labels: Vec<[f64; 2]>,
    y: Vec<usize>,
    measure: Measure,
    #[serde(default)]
    hp: HyperParams,
}

#[derive(Deserialize)]
#[serde(default)]
struct ToyRun {
    preset: String,
    n: usize,
    loss_mode: LossMode,
    batch_size: usize,
    epochs: usize,
    seed: u64,
}

impl Default for ToyRun {
    fn default() -> Self {
        ToyRun { preset: "meld-like".into(), n: 400, loss_mode: LossMode::Sslcl, batch_size: 8, epochs: 6, seed: 0 }
    }
}

#[derive(Serialize)]
struct ToyReport {
    epochs: Vec<serde_json::Value>,
    test_wf1: f64,
    label_names: Vec<String>,
    per_class_f1: Vec<f64>,
    support: Vec<usize>,
    label_cosines: Vec<Vec<f64>>,
}

fn rows(points: &[[f64; 2]]) -> Tensor {
    Tensor::from_rows(&points.iter().map(|p| p.to_vec()).collect::<Vec<_>>())
}

/// Scores and loss terms for 2-d samples and label embeddings placed by hand.
pub fn score_board_json(input: &str) -> Result<String, String> {
    let b: Board = serde_json::from_str(input).map_err(|e| e.to_string())?;
    if b.samples.is_empty() || b.samples.len() != b.y.len() {
        return Err("need one label per sample".into());
    }
    if b.labels.len() < 2 || b.y.iter().any(|&k| k >= b.labels.len()) {
        return Err("need at least two labels and in-range sample labels".into());
    }
    b.hp.validate().map_err(|e| e.to_string())?;
    let (f, g) = (rows(&b.samples), rows(&b.labels));
    let tape = Tape::new();
    let (fv, gv) = (tape.constant(f.clone()), tape.constant(g.clone()));
    let ctx = SimilarityContext::new(fv, gv, &b.y, b.measure).map_err(|e| e.to_string())?;
    let scores = ctx.scores();
    let l_pos = positive_loss(scores, &[], &b.y, b.hp.alpha, false).value();
    let l_neg = negative_loss(scores, &b.y, b.hp.beta).value();
    let label = label_label_loss(gv).map_err(|e| e.to_string())?.item();
    let supcon = supcon_loss(Features(fv), &b.y, b.hp.temperature).loss.item();
    let (f_c, _, gz_c) = centered(&f, &g, &b.y);
    let objectives = if f.rows() >= 2 {
        json!({
            "pair_total": soft_hgr_pair_total(&f_c, &gz_c).map_err(|e| e.to_string())?,
            "trace_form": soft_hgr_batch(&f_c, &gz_c).map_err(|e| e.to_string())?,
        })
    } else {
        serde_json::Value::Null
    };
    Ok(json!({
        "scores": scores.value().to_rows(),
        "predicted": scores.value().argmax_rows(),
        "l_pos": l_pos.data,
        "l_neg": l_neg.data,
        "label_label": label,
        "supcon": supcon,
        "soft_hgr": objectives,
    })
    .to_string())
}

/// Trains one small model on a synthetic preset and scores its test split.
pub fn train_toy_json(input: &str) -> Result<String, String> {
    let run: ToyRun = serde_json::from_str(input).map_err(|e| e.to_string())?;
    if !(40..=3000).contains(&run.n) || run.epochs > 40 {
        return Err("keep n in 40..=3000 and epochs <= 40".into());
    }
    let mut config = RunConfig::default();
    config.loss_mode = run.loss_mode;
    config.batch_size = run.batch_size;
    config.epochs = run.epochs;
    config.data.preset = run.preset;
    config.data.n = run.n;
    config.data.seed = run.seed;
    config.seeds = vec![run.seed];
    config.validate().map_err(|e| e.to_string())?;
    let data = sslcl::harness::load_data(&config).map_err(|e| e.to_string())?;
    let parts = split(&data, config.split_seed).map_err(|e| e.to_string())?;
    let out = train(&config, run.seed, &parts.train, Some(&parts.val)).map_err(|e| e.to_string())?;
    let report = evaluate(&out.model, &parts.test).map_err(|e| e.to_string())?;
    let loss = out.log.epoch_means(|s| s.l_train);
    let epochs = out
        .log
        .epochs
        .iter()
        .zip(&loss)
        .map(|(e, l)| json!({"epoch": e.epoch, "train_wf1": e.train_wf1, "val_wf1": e.eval_wf1, "loss": l}))
        .collect();
    let g = out.model.label_embeddings();
    let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let label_cosines = (0..g.rows())
        .map(|a| {
            (0..g.rows())
                .map(|b| {
                    let dot: f64 = g.row(a).iter().zip(g.row(b)).map(|(x, y)| x * y).sum();
                    dot / (norm(g.row(a)) * norm(g.row(b)))
                })
                .collect()
        })
        .collect();
    let toy = ToyReport {
        epochs,
        test_wf1: report.weighted_f1,
        label_names: data.header.label_names.clone(),
        per_class_f1: report.per_class_f1,
        support: report.support,
        label_cosines,
    };
    serde_json::to_string(&toy).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn score_board(input: &str) -> Result<String, JsValue> {
    score_board_json(input).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn train_toy(input: &str) -> Result<String, JsValue> {
    train_toy_json(input).map_err(|e| JsValue::from_str(&e))
}
