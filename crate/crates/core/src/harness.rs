//! Multi-seed experiment runs: the batch-size sweep and the ablation suite.
//!
//! Every arm trains once per seed on the training split and is scored on the
//! test split. Runs are independent and may execute on a rayon pool; results
//! are folded in a fixed (arm, seed) order so reports are reproducible byte
//! for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{LossMode, RunConfig};
use crate::dataset::{generate_synthetic, load_features, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::label_embedding::LabelDepth;
use crate::similarity::Measure;
use crate::trainer::{evaluate, train};

pub const SWEEP_SIZES: [usize; 6] = [1, 2, 4, 8, 16, 32];

/// Train/validation/test partition of one dataset.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Seeded 70/15/15 shuffle split.
pub fn split(data: &Dataset, seed: u64) -> Result<Split> {
    if data.len() < 3 {
        return Err(Error::Dataset(format!("{} records cannot be split three ways", data.len())));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (data.len() * 70).div_ceil(100);
    let n_val = data.len() * 15 / 100;
    let (train, rest) = idx.split_at(n_train);
    let (val, test) = rest.split_at(n_val.min(rest.len().saturating_sub(1)));
    Ok(Split {
        train: data.subset(train),
        val: data.subset(val),
        test: data.subset(test),
    })
}

/// The dataset a config points at: its feature file, or its synthetic preset.
pub fn load_data(config: &RunConfig) -> Result<Dataset> {
    match &config.data.path {
        Some(path) => load_features(path),
        None => generate_synthetic(&SyntheticSpec::preset(
            &config.data.preset,
            config.data.n,
            config.data.seed,
        )?),
    }
}

/// One finished (config, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub weighted_f1: f64,
    pub per_class_f1: Vec<f64>,
}

/// An arm aggregated over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub mean_wf1: f64,
    /// Sample standard deviation over seeds (0 for one seed).
    pub sd_wf1: f64,
    pub mean_per_class_f1: Vec<f64>,
    pub seeds: Vec<SeedResult>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate(name: &str, config: &RunConfig, seeds: Vec<SeedResult>) -> ArmResult {
    let wf1: Vec<f64> = seeds.iter().map(|s| s.weighted_f1).collect();
    let (mean_wf1, sd_wf1) = mean_sd(&wf1);
    let k = seeds.first().map_or(0, |s| s.per_class_f1.len());
    let mean_per_class_f1 = (0..k)
        .map(|c| seeds.iter().map(|s| s.per_class_f1[c]).sum::<f64>() / seeds.len() as f64)
        .collect();
    ArmResult {
        name: name.to_string(),
        config_hash: config.hash(),
        config: config.clone(),
        mean_wf1,
        sd_wf1,
        mean_per_class_f1,
        seeds,
    }
}

/// Runs many named arms over their seed lists, `jobs` runs at a time.
///
/// Arms whose configs are identical run only once and share the result.
pub struct Runner<'a> {
    pub split: &'a Split,
    pub jobs: usize,
}

impl Runner<'_> {
    pub fn run_seed(&self, config: &RunConfig, seed: u64) -> Result<SeedResult> {
        let out = train(config, seed, &self.split.train, Some(&self.split.val))?;
        let report = evaluate(&out.model, &self.split.test)?;
        Ok(SeedResult {
            seed,
            weighted_f1: report.weighted_f1,
            per_class_f1: report.per_class_f1,
        })
    }

    pub fn run_arms(&self, arms: &[(String, RunConfig)]) -> Result<Vec<ArmResult>> {
        for (_, c) in arms {
            c.validate()?;
        }
        let mut unique: BTreeMap<String, &RunConfig> = BTreeMap::new();
        for (_, c) in arms {
            unique.entry(c.hash()).or_insert(c);
        }
        let jobs: Vec<(&String, &RunConfig, u64)> = unique
            .iter()
            .flat_map(|(h, c)| c.seeds.iter().map(move |&s| (h, *c, s)))
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs.max(1))
            .build()
            .map_err(|e| Error::Config(format!("jobs: {e}")))?;
        let results: Vec<Result<SeedResult>> =
            pool.install(|| jobs.par_iter().map(|(_, c, s)| self.run_seed(c, *s)).collect());
        let mut by_hash: BTreeMap<&String, Vec<SeedResult>> = BTreeMap::new();
        for ((h, _, _), r) in jobs.iter().zip(results) {
            by_hash.entry(h).or_default().push(r?);
        }
        Ok(arms
            .iter()
            .map(|(name, c)| aggregate(name, c, by_hash[&c.hash()].clone()))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub sizes: Vec<usize>,
    /// Keyed by loss mode, one arm per size in `sizes` order.
    pub cells: BTreeMap<String, Vec<ArmResult>>,
    /// `wF1(BS=2) − wF1(BS=32)` per mode, when both sizes were run.
    pub stability: BTreeMap<String, f64>,
}

impl SweepResult {
    pub fn cell(&self, mode: LossMode, size: usize) -> Option<&ArmResult> {
        let i = self.sizes.iter().position(|&s| s == size)?;
        self.cells.get(&mode.to_string()).map(|arms| &arms[i])
    }

    pub fn arms(&self) -> impl Iterator<Item = &ArmResult> {
        self.cells.values().flatten()
    }
}

pub const SWEEP_MODES: [LossMode; 3] = [LossMode::Sslcl, LossMode::Supcon, LossMode::CeOnly];

/// Trains every (mode, batch size, seed) combination.
pub fn batch_size_sweep(base: &RunConfig, runner: &Runner, sizes: &[usize], modes: &[LossMode]) -> Result<SweepResult> {
    let mut arms = Vec::new();
    for &mode in modes {
        for &size in sizes {
            let mut c = base.clone();
            c.loss_mode = mode;
            c.batch_size = size;
            arms.push((format!("{mode}/bs={size}"), c));
        }
    }
    let results = runner.run_arms(&arms)?;
    let mut cells: BTreeMap<String, Vec<ArmResult>> = BTreeMap::new();
    for (mode, chunk) in modes.iter().zip(results.chunks(sizes.len())) {
        cells.insert(mode.to_string(), chunk.to_vec());
    }
    let mut stability = BTreeMap::new();
    if let (Some(i2), Some(i32)) = (
        sizes.iter().position(|&s| s == 2),
        sizes.iter().position(|&s| s == 32),
    ) {
        for (mode, arms) in &cells {
            stability.insert(mode.clone(), arms[i2].mean_wf1 - arms[i32].mean_wf1);
        }
    }
    Ok(SweepResult {
        sizes: sizes.to_vec(),
        cells,
        stability,
    })
}

/// Named variants of `base` for the ablation suite. The first arm is the
/// full configuration the others are compared with.
pub fn ablation_arms(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut full = base.clone();
    full.loss_mode = LossMode::Sslcl;
    full.similarity = Measure::SoftHgr;
    full.label_depth = LabelDepth::TwoLayer;
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = full.clone();
        f(&mut c);
        c
    };
    vec![
        ("full".into(), full.clone()),
        ("similarity=dot".into(), with(&|c| c.similarity = Measure::Dot)),
        ("similarity=cosine".into(), with(&|c| c.similarity = Measure::Cosine)),
        ("-augmentation".into(), with(&|c| c.augmentation = false)),
        ("-negative-loss".into(), with(&|c| c.use_negative_loss = false)),
        ("-label-loss".into(), with(&|c| c.hp.lambda = 0.0)),
        (
            "-all-components".into(),
            with(&|c| {
                c.augmentation = false;
                c.use_negative_loss = false;
                c.hp.lambda = 0.0;
            }),
        ),
        (
            "le=embedding-only".into(),
            with(&|c| {
                c.label_depth = LabelDepth::EmbeddingOnly;
                c.model.label_dim = Some(c.model.feature_dim);
            }),
        ),
        ("le=two-layer".into(), full.clone()),
        ("le=three-layer".into(), with(&|c| c.label_depth = LabelDepth::ThreeLayer)),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub arms: Vec<ArmResult>,
    /// `mean_wf1(arm) − mean_wf1(full)` for every non-full arm.
    pub deltas: BTreeMap<String, f64>,
}

impl AblationReport {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.name == name)
    }
}

pub fn ablation_suite(base: &RunConfig, runner: &Runner) -> Result<AblationReport> {
    let arms = runner.run_arms(&ablation_arms(base))?;
    let full = arms[0].mean_wf1;
    let deltas = arms[1..]
        .iter()
        .map(|a| (a.name.clone(), a.mean_wf1 - full))
        .collect();
    Ok(AblationReport { arms, deltas })
}

/// One CSV row per arm: name, config hash, mean and sd w-F1, per-class F1.
pub fn arms_csv<'a>(arms: impl IntoIterator<Item = &'a ArmResult>, label_names: &[String]) -> String {
    let mut out = String::from("arm,config_hash,seeds,mean_wf1,sd_wf1");
    for name in label_names {
        let _ = write!(out, ",f1_{name}");
    }
    out.push('\n');
    for a in arms {
        let _ = write!(out, "{},{},{},{:.6},{:.6}", a.name, a.config_hash, a.seeds.len(), a.mean_wf1, a.sd_wf1);
        for f in &a.mean_per_class_f1 {
            let _ = write!(out, ",{f:.6}");
        }
        out.push('\n');
    }
    out
}

pub fn sweep_summary(r: &SweepResult, base: &RunConfig) -> String {
    let mut s = String::from("batch-size sweep (test w-F1, mean ± sd over seeds)\n");
    let _ = writeln!(s, "config: {}", base.to_json());
    let _ = write!(s, "{:<8}", "mode");
    for size in &r.sizes {
        let _ = write!(s, " {:>16}", format!("bs={size}"));
    }
    s.push('\n');
    for (mode, arms) in &r.cells {
        let _ = write!(s, "{mode:<8}");
        for a in arms {
            let _ = write!(s, " {:>16}", format!("{:.4}±{:.4}", a.mean_wf1, a.sd_wf1));
        }
        s.push('\n');
    }
    for (mode, d) in &r.stability {
        let _ = writeln!(s, "degradation wF1(bs=2) - wF1(bs=32), {mode}: {d:+.4}");
    }
    s
}

pub fn ablation_summary(r: &AblationReport, base: &RunConfig) -> String {
    let mut s = String::from("ablation suite (test w-F1, mean ± sd over seeds)\n");
    let _ = writeln!(s, "config: {}", base.to_json());
    for a in &r.arms {
        let delta = r.deltas.get(&a.name).map_or(String::new(), |d| format!("  delta {d:+.4}"));
        let _ = writeln!(s, "{:<20} {:.4} ± {:.4}{delta}", a.name, a.mean_wf1, a.sd_wf1);
    }
    s
}

/// Line plot of mean w-F1 against batch size, one line per mode.
pub fn sweep_svg(r: &SweepResult) -> String {
    let (w, h, pad) = (480.0, 300.0, 40.0);
    let values: Vec<f64> = r.arms().map(|a| a.mean_wf1).collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min).min(1.0);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(lo + 1e-3);
    let n = r.sizes.len().max(2) as f64 - 1.0;
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / n;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(
        s,
        "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/><line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        h - pad,
        w - pad,
        h - pad
    );
    for (i, size) in r.sizes.iter().enumerate() {
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{size}</text>", x(i), h - pad + 14.0);
    }
    let _ = writeln!(s, "<text x=\"4\" y=\"{:.1}\">{hi:.3}</text><text x=\"4\" y=\"{:.1}\">{lo:.3}</text>", y(hi), y(lo));
    for (m, (mode, arms)) in r.cells.iter().enumerate() {
        let color = colors[m % colors.len()];
        let points: Vec<String> = arms
            .iter()
            .enumerate()
            .map(|(i, a)| format!("{:.1},{:.1}", x(i), y(a.mean_wf1)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            points.join(" ")
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{mode}</text>",
            w - pad - 50.0,
            pad + 14.0 * m as f64
        );
    }
    s.push_str("</svg>\n");
    s
}
