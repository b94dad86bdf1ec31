//! Multimodal utterance datasets: synthetic generation, JSONL feature files
//! and mini-batching.
//!
//! A feature file is JSON Lines. The first line is the header
//! `{"d_t":…,"d_a":…,"d_v":…,"K":…,"label_names":[…]}`; every following line
//! is one record `{"id","dialogue_id","speaker_id","label","t","a","v"}` where
//! `a` and `v` may be `null` for a missing modality.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub d_t: usize,
    pub d_a: usize,
    pub d_v: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub label_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub id: String,
    pub dialogue_id: String,
    pub speaker_id: String,
    pub label: usize,
    #[serde(rename = "t")]
    pub text_features: Vec<f64>,
    #[serde(rename = "a")]
    pub audio_features: Option<Vec<f64>>,
    #[serde(rename = "v")]
    pub visual_features: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<UtteranceRecord>,
}

/// Parameters of the per-class Gaussian generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(rename = "K")]
    pub k: usize,
    pub label_names: Vec<String>,
    pub class_proportions: Vec<f64>,
    pub n_samples: usize,
    pub d_t: usize,
    pub d_a: usize,
    pub d_v: usize,
    /// Distance of each class center from the origin, per modality
    /// (text, audio, visual).
    pub class_separation: [f64; 3],
    /// Standard deviation of the isotropic noise, per modality.
    pub modality_noise: [f64; 3],
    pub seed: u64,
}

// Class sizes of the public IEMOCAP and MELD releases; only the shape of the
// imbalance is used.
const IEMOCAP_COUNTS: [(&str, f64); 6] = [
    ("happy", 648.0),
    ("sad", 1084.0),
    ("neutral", 1708.0),
    ("angry", 1103.0),
    ("excited", 1041.0),
    ("frustrated", 1849.0),
];
const MELD_COUNTS: [(&str, f64); 7] = [
    ("neutral", 6436.0),
    ("surprise", 1636.0),
    ("fear", 358.0),
    ("sad", 1002.0),
    ("joy", 2308.0),
    ("disgust", 361.0),
    ("angry", 1607.0),
];

pub const PRESETS: [&str; 2] = ["iemocap-like", "meld-like"];

impl SyntheticSpec {
    /// `iemocap-like` (6 classes, mild skew) or `meld-like` (7 classes, one
    /// dominant class).
    pub fn preset(name: &str, n_samples: usize, seed: u64) -> Result<Self> {
        let counts: &[(&str, f64)] = match name {
            "iemocap-like" => &IEMOCAP_COUNTS,
            "meld-like" => &MELD_COUNTS,
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}` (expected one of {PRESETS:?})"
                )))
            }
        };
        let total: f64 = counts.iter().map(|c| c.1).sum();
        Ok(Self {
            k: counts.len(),
            label_names: counts.iter().map(|c| c.0.to_string()).collect(),
            class_proportions: counts.iter().map(|c| c.1 / total).collect(),
            n_samples,
            d_t: 12,
            d_a: 8,
            d_v: 8,
            class_separation: [1.6, 1.4, 1.4],
            modality_noise: [1.0, 1.4, 1.6],
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config("K must be at least 2".into()));
        }
        if self.class_proportions.len() != self.k || self.label_names.len() != self.k {
            return Err(Error::Config(
                "class_proportions and label_names need K entries".into(),
            ));
        }
        if self.class_proportions.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::Config("class proportions must be positive".into()));
        }
        let total: f64 = self.class_proportions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("class proportions sum to {total}, not 1")));
        }
        if self.n_samples < self.k {
            return Err(Error::Config(format!(
                "n_samples = {} cannot cover {} classes",
                self.n_samples, self.k
            )));
        }
        if self.d_t == 0 {
            return Err(Error::Config("d_t must be positive".into()));
        }
        Ok(())
    }

    /// Per-class sample counts: rounded shares with largest-remainder
    /// correction, and at least one sample per class.
    pub fn class_counts(&self) -> Vec<usize> {
        largest_remainder(&self.class_proportions, self.n_samples)
    }
}

fn largest_remainder(proportions: &[f64], n: usize) -> Vec<usize> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }
    // every class must appear; borrow from the largest class
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let donor = (0..counts.len()).max_by_key(|&i| (counts[i], usize::MAX - i)).unwrap();
        counts[donor] -= 1;
        counts[empty] += 1;
    }
    counts
}

fn class_centers(k: usize, dim: usize, radius: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        // orthogonalise against earlier centers while the dimension allows it
        if centers.len() < dim {
            for c in &centers {
                let proj: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(c) {
                    *a -= proj * b;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        centers.push(v.into_iter().map(|x| x / norm).collect());
    }
    centers
        .into_iter()
        .map(|c| c.into_iter().map(|x| x * radius).collect())
        .collect()
}

/// Draws a dataset from `spec`; the output depends on nothing else (seed included).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dims = [spec.d_t, spec.d_a, spec.d_v];
    let centers: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|m| class_centers(spec.k, dims[m], spec.class_separation[m], &mut rng))
        .collect();

    let mut labels: Vec<usize> = spec
        .class_counts()
        .iter()
        .enumerate()
        .flat_map(|(k, &c)| std::iter::repeat_n(k, c))
        .collect();
    labels.shuffle(&mut rng);

    let draw = |m: usize, label: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        centers[m][label]
            .iter()
            .map(|c| c + spec.modality_noise[m] * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let records = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let t = draw(0, label, &mut rng);
            let a = (spec.d_a > 0).then(|| draw(1, label, &mut rng));
            let v = (spec.d_v > 0).then(|| draw(2, label, &mut rng));
            UtteranceRecord {
                id: format!("u{i:05}"),
                dialogue_id: format!("d{:04}", i / 12),
                speaker_id: format!("s{}", rng.random_range(0..2)),
                label,
                text_features: t,
                audio_features: a,
                visual_features: v,
            }
        })
        .collect();
    Ok(Dataset {
        header: DatasetHeader {
            d_t: spec.d_t,
            d_a: spec.d_a,
            d_v: spec.d_v,
            k: spec.k,
            label_names: spec.label_names.clone(),
        },
        records,
    })
}

/// Which modalities a dataset carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModalitySetting {
    Trimodal,
    Bimodal,
    TextOnly,
}

impl DatasetHeader {
    pub fn modality_setting(&self) -> ModalitySetting {
        match (self.d_a > 0, self.d_v > 0) {
            (true, true) => ModalitySetting::Trimodal,
            (false, false) => ModalitySetting::TextOnly,
            _ => ModalitySetting::Bimodal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Dataset("K must be positive".into()));
        }
        if !self.label_names.is_empty() && self.label_names.len() != self.k {
            return Err(Error::Dataset(format!(
                "{} label names for K = {}",
                self.label_names.len(),
                self.k
            )));
        }
        Ok(())
    }

    fn check_record(&self, r: &UtteranceRecord) -> Result<()> {
        let fail = |reason: String| Error::Record {
            id: r.id.clone(),
            reason,
        };
        if r.label >= self.k {
            return Err(fail(format!("label {} outside [0, {})", r.label, self.k)));
        }
        if r.text_features.len() != self.d_t {
            return Err(fail(format!(
                "text features have length {}, header declares d_t = {}",
                r.text_features.len(),
                self.d_t
            )));
        }
        for (name, feats, dim) in [
            ("audio", &r.audio_features, self.d_a),
            ("visual", &r.visual_features, self.d_v),
        ] {
            if let Some(f) = feats {
                if f.len() != dim {
                    return Err(fail(format!(
                        "{name} features have length {}, header declares {dim}",
                        f.len()
                    )));
                }
            }
        }
        let all = r
            .text_features
            .iter()
            .chain(r.audio_features.iter().flatten())
            .chain(r.visual_features.iter().flatten());
        if all.clone().any(|v| !v.is_finite()) {
            return Err(fail("non-finite feature value".into()));
        }
        Ok(())
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.header.validate()?;
        self.records.iter().try_for_each(|r| self.header.check_record(r))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.header.k];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            header: self.header.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Dataset> {
        let mut lines = reader.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Dataset("empty feature file".into()))??;
        let header: DatasetHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::Dataset(format!("bad header: {e}")))?;
        header.validate()?;
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: UtteranceRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("line {}: {e}", n + 2)))?;
            header.check_record(&record)?;
            records.push(record);
        }
        Ok(Dataset { header, records })
    }
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::read_jsonl(BufReader::new(File::open(path)?))
}

/// One mini-batch, stacked into matrices.
///
/// Missing modality vectors (`null` in the file) are stored as zero rows;
/// a modality the dataset does not carry at all is `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    pub ids: Vec<String>,
    pub text: Option<Tensor>,
    pub audio: Option<Tensor>,
    pub visual: Option<Tensor>,
    pub labels: Vec<usize>,
    /// Within-batch count of each class, length K.
    pub label_counts: Vec<usize>,
}

impl FeatureBatch {
    pub fn from_records<'a>(
        header: &DatasetHeader,
        records: impl IntoIterator<Item = &'a UtteranceRecord>,
    ) -> Self {
        let records: Vec<&UtteranceRecord> = records.into_iter().collect();
        let n = records.len();
        let stack = |dim: usize, pick: &dyn Fn(&UtteranceRecord) -> Option<&[f64]>| {
            (dim > 0).then(|| {
                let mut t = Tensor::zeros(n, dim);
                for (i, r) in records.iter().enumerate() {
                    if let Some(f) = pick(r) {
                        t.data[i * dim..(i + 1) * dim].copy_from_slice(f);
                    }
                }
                t
            })
        };
        let mut label_counts = vec![0; header.k];
        for r in &records {
            label_counts[r.label] += 1;
        }
        Self {
            ids: records.iter().map(|r| r.id.clone()).collect(),
            text: stack(header.d_t, &|r| Some(&r.text_features)),
            audio: stack(header.d_a, &|r| r.audio_features.as_deref()),
            visual: stack(header.d_v, &|r| r.visual_features.as_deref()),
            labels: records.iter().map(|r| r.label).collect(),
            label_counts,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `n_{y_i}` for every sample.
    pub fn own_class_counts(&self) -> Vec<usize> {
        self.labels.iter().map(|&y| self.label_counts[y]).collect()
    }
}

/// Seeded mini-batching over a dataset. Each epoch draws its own
/// permutation; the final short batch is kept.
pub struct Batcher<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
}

impl<'a> Batcher<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Dataset("cannot batch an empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(Self {
            dataset,
            batch_size,
            seed,
            shuffle,
        })
    }

    pub fn order(&self, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.dataset.len()).collect();
        if self.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch as u64);
            idx.shuffle(&mut rng);
        }
        idx
    }

    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = FeatureBatch> + '_ {
        let order = self.order(epoch);
        let header = &self.dataset.header;
        let records = &self.dataset.records;
        let chunks: Vec<Vec<usize>> = order.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        chunks
            .into_iter()
            .map(move |c| FeatureBatch::from_records(header, c.iter().map(|&i| &records[i])))
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.dataset.len().div_ceil(self.batch_size)
    }
}

/// Convenience wrapper returning one epoch as a vector.
pub fn batch_iter(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<FeatureBatch>> {
    Ok(Batcher::new(dataset, batch_size, seed, shuffle)?.epoch(0).collect())
}
