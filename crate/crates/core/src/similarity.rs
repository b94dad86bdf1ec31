//! Sample-label similarity measures.
//!
//! Soft-HGR between a centered sample feature `f_i` and a centered label
//! embedding `g`, in a batch of `N` samples with labels `z`:
//!
//! ```text
//! Sim(f_i, g) = f_iᵀg/(N−1) − ½ Σ_l c(f_i, f_l)·c(g, g_{z_l}),   c(x, y) = xᵀy/(N−1)
//! ```
//!
//! Summing `Sim(f_i, g_{z_i})` over the batch gives
//! `Σ f_iᵀg_{z_i}/(N−1) − ½ ‖cov(F, G_z)‖²_F` (see [`soft_hgr_pair_total`]).
//! The trace-form objective `… − ½ tr(cov(F)·cov(G_z))` of [`soft_hgr_batch`]
//! is a different quantity outside special cases.
//!
//! Conventions:
//! - `F` is centered over its `N` rows; `G` is centered over its `K` rows and
//!   `G_z` selects rows of the centered `G`.
//! - An augmented view is centered with the full-view batch mean, and its
//!   covariance sum still runs over the full-view rows.
//! - With `N = 1` the estimator is undefined, so `Sim` falls back to the
//!   plain dot product of the uncentered vectors.
//!
//! Dot and cosine similarity always use the uncentered vectors.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{center_rows, dot, sample_covariance, Tensor};

/// Floor added to `‖f‖·‖g‖` in the cosine denominator.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Measure {
    #[default]
    SoftHgr,
    Dot,
    Cosine,
}

impl std::fmt::Display for Measure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Measure::SoftHgr => "soft-hgr",
            Measure::Dot => "dot",
            Measure::Cosine => "cosine",
        })
    }
}

/// Plain-value Soft-HGR objective of centered `F` and centered `G_z`.
pub fn soft_hgr_batch(f_c: &Tensor, gz_c: &Tensor) -> Result<f64> {
    let n = f_c.rows();
    if n < 2 {
        return Err(Error::DegenerateBatch(n));
    }
    let inner: f64 = (0..n).map(|i| dot(f_c.row(i), gz_c.row(i))).sum::<f64>() / (n - 1) as f64;
    let cf = sample_covariance(f_c)?;
    let cg = sample_covariance(gz_c)?;
    let trace: f64 = cf.data.iter().zip(&cg.transpose().data).map(|(a, b)| a * b).sum();
    Ok(inner - 0.5 * trace)
}

/// What the pair similarities add up to: the inner term minus half the
/// squared Frobenius norm of the cross-covariance `cov(F, G_z)`.
///
/// `Σᵢ soft_hgr_pair(i, g_{z_i})` equals this exactly. For `d = 1` it
/// coincides with [`soft_hgr_batch`] only when centered `F` and `G_z` are
/// proportional (Cauchy–Schwarz equality), and not in general:
/// `tr(cov(F)cov(G_z))` pairs `f_i` with `g_{z_l}` across samples while the
/// per-pair form pairs `f_i·f_l` with `g_{z_i}·g_{z_l}`.
pub fn soft_hgr_pair_total(f_c: &Tensor, gz_c: &Tensor) -> Result<f64> {
    let n = f_c.rows();
    if n < 2 {
        return Err(Error::DegenerateBatch(n));
    }
    let scale = 1.0 / (n - 1) as f64;
    let inner: f64 = (0..n).map(|i| dot(f_c.row(i), gz_c.row(i))).sum::<f64>() * scale;
    let cross = f_c.t_matmul(gz_c).scaled(scale);
    Ok(inner - 0.5 * cross.data.iter().map(|x| x * x).sum::<f64>())
}

/// Plain-value Soft-HGR between sample `i` and one candidate label row `g`.
///
/// `f_c` is the centered full-view batch, `gz_c` the centered label rows of
/// the batch, `f` the (centered) sample vector to score.
pub fn soft_hgr_pair(f_c: &Tensor, gz_c: &Tensor, f: &[f64], g: &[f64]) -> Result<f64> {
    let n = f_c.rows();
    if n < 2 {
        return Err(Error::DegenerateBatch(n));
    }
    let scale = 1.0 / (n - 1) as f64;
    let cov_sum: f64 = (0..n)
        .map(|l| (scale * dot(f, f_c.row(l))) * (scale * dot(g, gz_c.row(l))))
        .sum();
    Ok(scale * dot(f, g) - 0.5 * cov_sum)
}

/// Plain-value similarity of one pair under `measure`.
///
/// For Soft-HGR `f` and `g` must already be centered; dot and cosine take
/// the raw vectors.
pub fn pair_similarity(measure: Measure, f_c: &Tensor, gz_c: &Tensor, f: &[f64], g: &[f64]) -> Result<f64> {
    match measure {
        Measure::SoftHgr if f_c.rows() >= 2 => soft_hgr_pair(f_c, gz_c, f, g),
        Measure::SoftHgr | Measure::Dot => Ok(dot(f, g)),
        Measure::Cosine => {
            let nf = dot(f, f).sqrt();
            let ng = dot(g, g).sqrt();
            Ok(dot(f, g) / (nf * ng + COSINE_EPS))
        }
    }
}

/// Centered views of a raw batch: `(F_c, G_c, G_z,c)`.
pub fn centered(f: &Tensor, g: &Tensor, z: &[usize]) -> (Tensor, Tensor, Tensor) {
    let f_c = center_rows(f);
    let g_c = center_rows(g);
    let gz_c = Tensor::from_rows(&z.iter().map(|&k| g_c.row(k).to_vec()).collect::<Vec<_>>());
    (f_c, g_c, gz_c)
}

/// Differentiable similarity scores for one batch.
///
/// Holds the raw and centered features and label embeddings plus the
/// label-side covariance factor reused by every view.
pub struct SimilarityContext<'t> {
    pub measure: Measure,
    pub z: Vec<usize>,
    pub f: Var<'t>,
    pub f_c: Var<'t>,
    pub f_mean: Var<'t>,
    pub g: Var<'t>,
    pub g_c: Var<'t>,
    /// `G_c · G_z,cᵀ / (N−1)` (`K×N`), Soft-HGR only.
    label_cov: Option<Var<'t>>,
}

impl<'t> SimilarityContext<'t> {
    pub fn new(f: Var<'t>, g: Var<'t>, z: &[usize], measure: Measure) -> Result<Self> {
        let [n, d] = f.shape();
        let [k, dg] = g.shape();
        if dg != d {
            return Err(Error::Shape(format!("features have d = {d}, label embeddings d = {dg}")));
        }
        if z.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} samples", z.len())));
        }
        if let Some(&bad) = z.iter().find(|&&c| c >= k) {
            return Err(Error::Shape(format!("label {bad} outside [0, {k})")));
        }
        let f_c = f.center_rows();
        let f_mean = f.column_means();
        let g_c = g.center_rows();
        let label_cov = (measure == Measure::SoftHgr && n >= 2)
            .then(|| g_c.matmul_t(g_c.gather_rows(z)).scale(1.0 / (n - 1) as f64));
        Ok(Self {
            measure,
            z: z.to_vec(),
            f,
            f_c,
            f_mean,
            g,
            g_c,
            label_cov,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.z.len()
    }

    /// `S[i, k] = Sim(f_i, g_k)`, `N×K`.
    pub fn scores(&self) -> Var<'t> {
        match self.measure {
            Measure::SoftHgr => self.soft_hgr_scores(self.f_c, self.f),
            Measure::Dot => self.f.matmul_t(self.g),
            Measure::Cosine => cosine_scores(self.f, self.g),
        }
    }

    /// `S̃[i, k] = Sim(f̃_i, g_k)` for an augmented view of the batch.
    pub fn view_scores(&self, view: Var<'t>) -> Var<'t> {
        match self.measure {
            Measure::SoftHgr => {
                let centered = view.add_row(-self.f_mean);
                self.soft_hgr_scores(centered, view)
            }
            Measure::Dot => view.matmul_t(self.g),
            Measure::Cosine => cosine_scores(view, self.g),
        }
    }

    fn soft_hgr_scores(&self, rows_c: Var<'t>, rows_raw: Var<'t>) -> Var<'t> {
        let n = self.batch_size();
        match self.label_cov {
            Some(label_cov) => {
                let scale = 1.0 / (n - 1) as f64;
                let inner = rows_c.matmul_t(self.g_c).scale(scale);
                let sample_cov = rows_c.matmul_t(self.f_c).scale(scale);
                inner - sample_cov.matmul_t(label_cov).scale(0.5)
            }
            None => rows_raw.matmul_t(self.g),
        }
    }

    /// Batch-level Soft-HGR objective on the tape.
    pub fn soft_hgr_batch(&self) -> Result<Var<'t>> {
        let n = self.batch_size();
        if n < 2 {
            return Err(Error::DegenerateBatch(n));
        }
        let scale = 1.0 / (n - 1) as f64;
        let gz = self.g_c.gather_rows(&self.z);
        let inner = (self.f_c * gz).sum().scale(scale);
        let cov_f = self.f_c.t().matmul(self.f_c).scale(scale);
        let cov_g = gz.t().matmul(gz).scale(scale);
        Ok(inner - (cov_f * cov_g.t()).sum().scale(0.5))
    }
}

fn cosine_scores<'t>(f: Var<'t>, g: Var<'t>) -> Var<'t> {
    let denom = f.row_norms().matmul_t(g.row_norms()).add_scalar(COSINE_EPS).pow(-1.0);
    f.matmul_t(g) * denom
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    #[test]
    fn zero_features_give_zero() {
        let f = Tensor::zeros(3, 2);
        let g = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]);
        let (f_c, _, gz_c) = centered(&f, &g, &[0, 1, 1]);
        assert_eq!(soft_hgr_batch(&f_c, &gz_c).unwrap(), 0.0);
        assert_eq!(soft_hgr_pair(&f_c, &gz_c, f_c.row(0), gz_c.row(0)).unwrap(), 0.0);
    }

    #[test]
    fn two_sample_hand_case() {
        let f_c = Tensor::from_rows(&[vec![1.0], vec![-1.0]]);
        let gz_c = Tensor::from_rows(&[vec![1.0], vec![-1.0]]);
        assert_eq!(soft_hgr_batch(&f_c, &gz_c).unwrap(), 0.0);
        assert_eq!(soft_hgr_pair(&f_c, &gz_c, f_c.row(0), gz_c.row(0)).unwrap(), 0.0);
        assert_eq!(soft_hgr_pair(&f_c, &gz_c, f_c.row(1), gz_c.row(1)).unwrap(), 0.0);
    }

    #[test]
    fn trace_form_and_pair_total_differ_off_the_hand_case() {
        // d = 1: tr(cov F · cov G) = Σf²Σg²/(N−1)², the pair total (Σfg)²/(N−1)².
        let f_c = Tensor::from_rows(&[vec![1.0], vec![0.0], vec![-1.0]]);
        let gz_c = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![-1.0]]);
        let batch = soft_hgr_batch(&f_c, &gz_c).unwrap();
        let total = soft_hgr_pair_total(&f_c, &gz_c).unwrap();
        assert!((batch - (0.5 - 0.5 * 4.0 / 4.0)).abs() < 1e-15);
        assert!((total - (0.5 - 0.5 * 1.0 / 4.0)).abs() < 1e-15);
    }

    #[test]
    fn single_sample_is_degenerate() {
        let f = Tensor::zeros(1, 2);
        assert!(matches!(soft_hgr_batch(&f, &f), Err(Error::DegenerateBatch(1))));
    }

    #[test]
    fn pair_sum_equals_cross_covariance_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..25 {
            let n = rng.random_range(2..=6);
            let k = rng.random_range(2..=4);
            let d = rng.random_range(2..=5);
            let f = random(n, d, &mut rng);
            let g = random(k, d, &mut rng);
            let z: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let (f_c, _, gz_c) = centered(&f, &g, &z);
            let total: f64 = (0..n)
                .map(|i| soft_hgr_pair(&f_c, &gz_c, f_c.row(i), gz_c.row(i)).unwrap())
                .sum();
            assert!((total - soft_hgr_pair_total(&f_c, &gz_c).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn tape_scores_match_pair_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, k, d) = (5, 3, 4);
        let f = random(n, d, &mut rng);
        let g = random(k, d, &mut rng);
        let view = random(n, d, &mut rng);
        let z = vec![0, 2, 1, 1, 0];
        let (f_c, g_c, gz_c) = centered(&f, &g, &z);
        let view_c = view.sub_row(&f.column_means());
        for measure in [Measure::SoftHgr, Measure::Dot, Measure::Cosine] {
            let tape = Tape::new();
            let ctx = SimilarityContext::new(tape.constant(f.clone()), tape.constant(g.clone()), &z, measure).unwrap();
            let s = ctx.scores().value();
            let sv = ctx.view_scores(tape.constant(view.clone())).value();
            for i in 0..n {
                for j in 0..k {
                    let (fi, gj, vi) = match measure {
                        Measure::SoftHgr => (f_c.row(i), g_c.row(j), view_c.row(i)),
                        _ => (f.row(i), g.row(j), view.row(i)),
                    };
                    let want = pair_similarity(measure, &f_c, &gz_c, fi, gj).unwrap();
                    assert!((s.get(i, j) - want).abs() < 1e-12, "{measure} ({i},{j})");
                    let want_v = pair_similarity(measure, &f_c, &gz_c, vi, gj).unwrap();
                    assert!((sv.get(i, j) - want_v).abs() < 1e-12, "{measure} view ({i},{j})");
                }
            }
            if measure == Measure::SoftHgr {
                let b = ctx.soft_hgr_batch().unwrap().item();
                assert!((b - soft_hgr_batch(&f_c, &gz_c).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn translation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random(4, 3, &mut rng);
        let g = random(3, 3, &mut rng);
        let z = vec![0, 1, 2, 1];
        let shift = Tensor::row_vector(vec![5.0, -2.0, 0.7]);
        let shifted = f.sub_row(&shift.scaled(-1.0));
        let score = |f: &Tensor| {
            let tape = Tape::new();
            SimilarityContext::new(tape.constant(f.clone()), tape.constant(g.clone()), &z, Measure::SoftHgr)
                .unwrap()
                .scores()
                .value()
        };
        let (a, b) = (score(&f), score(&shifted));
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn batch_objective_is_symmetric_in_roles() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = center_rows(&random(5, 3, &mut rng));
        let gz = center_rows(&random(5, 3, &mut rng));
        let ab = soft_hgr_batch(&f, &gz).unwrap();
        let ba = soft_hgr_batch(&gz, &f).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn dot_and_cosine_cases() {
        let e = Tensor::zeros(1, 2);
        assert_eq!(pair_similarity(Measure::Dot, &e, &e, &[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        let c = pair_similarity(Measure::Cosine, &e, &e, &[1.0, 2.0], &[2.0, 4.0]).unwrap();
        assert!((c - 1.0).abs() < 1e-9);
        let z = pair_similarity(Measure::Cosine, &e, &e, &[0.0, 0.0], &[2.0, 4.0]).unwrap();
        assert_eq!(z, 0.0);
    }

    #[test]
    fn dispatch_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random(4, 2, &mut rng);
        let g = random(2, 2, &mut rng);
        let (f_c, g_c, gz_c) = centered(&f, &g, &[0, 1, 1, 0]);
        let a = pair_similarity(Measure::SoftHgr, &f_c, &gz_c, f_c.row(2), g_c.row(0)).unwrap();
        let b = soft_hgr_pair(&f_c, &gz_c, f_c.row(2), g_c.row(0)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn single_sample_falls_back_to_dot() {
        let tape = Tape::new();
        let f = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let g = Tensor::from_rows(&[vec![3.0, 4.0], vec![-1.0, 0.0]]);
        let ctx = SimilarityContext::new(tape.constant(f), tape.constant(g), &[1], Measure::SoftHgr).unwrap();
        assert_eq!(ctx.scores().value().data, vec![11.0, -1.0]);
        assert!(ctx.soft_hgr_batch().is_err());
    }
}
