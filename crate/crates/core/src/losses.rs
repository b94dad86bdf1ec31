//! Training objectives.
//!
//! Per sample `i` with label `y_i` and similarity scores `S[i, ·]`:
//!
//! - positive: `D = Σ_j exp S[i,j] + Σ_views exp S̃[i,y_i]`, and for `f_i`
//!   and every augmented view `p = exp(S[i,y_i]) / D`,
//!   `l_pos = −Σ log(p)·(1−p)^α`;
//! - negative: `p_k = softmax(S[i,·])_k`, `l_neg = −Σ_{k≠y_i} log(1−p_k)·p_k^β`;
//! - label-label: `p(i,j) = exp(g_i·g_j) / (Σ_{k≠i} exp(g_i·g_k) + 1)`,
//!   `L_Label = −Σ_i Σ_{j≠i} log(1 − p(i,j))`;
//! - `L_SSLCL = Σ_i (N/n_{y_i})^γ (l_pos + l_neg) + λ·L_Label`,
//!   `L_Train = L_SSLCL + η·L_CE`.
//!
//! Every reduction is an unnormalised sum over the batch.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::encoder::{Features, Probabilities};
use crate::error::{Error, Result};
use crate::similarity::SimilarityContext;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Positive focusing exponent.
    pub alpha: f64,
    /// Negative focusing exponent.
    pub beta: f64,
    /// Class-weight exponent on `N/n_{y_i}`.
    pub gamma: f64,
    /// Weight of the label-label loss.
    pub lambda: f64,
    /// Weight of the cross-entropy loss.
    pub eta: f64,
    /// SupCon temperature.
    pub temperature: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 0.5,
            gamma: 1.0,
            lambda: 1.0,
            eta: 1.0,
            temperature: 0.1,
        }
    }
}

impl HyperParams {
    /// `α`, `β` and `τ` must be positive. `γ`, `λ` and `η` may be zero, which
    /// is how the unweighted, no-label-loss and no-CE variants are expressed.
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("hp.alpha", self.alpha, false),
            ("hp.beta", self.beta, false),
            ("hp.gamma", self.gamma, true),
            ("hp.lambda", self.lambda, true),
            ("hp.eta", self.eta, true),
            ("hp.temperature", self.temperature, false),
        ];
        for (key, v, zero_ok) in named {
            let ok = v.is_finite() && (v > 0.0 || (zero_ok && v == 0.0));
            if !ok {
                return Err(Error::Config(format!("{key} = {v} is out of range")));
            }
        }
        Ok(())
    }
}

fn one_hot(rows: usize, cols: usize, y: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for (i, &c) in y.iter().enumerate() {
        t.set(i, c, 1.0);
    }
    t
}

/// Per-sample `l_pos` as an `N×1` column.
///
/// `view_scores` holds one `N×K` score matrix per augmented view (possibly
/// none). With `consistent_denominator` the first denominator sum of a view
/// term uses the view's own scores instead of `f_i`'s.
pub fn positive_loss<'t>(
    scores: Var<'t>,
    view_scores: &[Var<'t>],
    y: &[usize],
    alpha: f64,
    consistent_denominator: bool,
) -> Var<'t> {
    let tape = scores.tape();
    let own = scores.pick(y);
    let view_own: Vec<Var<'t>> = view_scores.iter().map(|s| s.pick(y)).collect();
    let log_denominator = |candidates: Var<'t>| {
        let mut cols = vec![candidates];
        cols.extend(view_own.iter().copied());
        if cols.len() == 1 {
            candidates.log_sum_exp_rows(None)
        } else {
            tape.concat_cols(&cols).log_sum_exp_rows(None)
        }
    };
    let shared = log_denominator(scores);
    let term = |numerator: Var<'t>, log_d: Var<'t>| {
        let log_p = numerator - log_d;
        let focal = log_p.exp().scale(-1.0).add_scalar(1.0).pow(alpha);
        -(log_p * focal)
    };
    let mut total = term(own, shared);
    for (v, &num) in view_own.iter().enumerate() {
        let log_d = if consistent_denominator {
            log_denominator(view_scores[v])
        } else {
            shared
        };
        total = total + term(num, log_d);
    }
    total
}

/// `Q[i, k] = Σ_{j≠k} P[i, j]`, i.e. `1 − P[i, k]` without the cancellation
/// that `1 − p` suffers when `p` is close to one.
fn complement_rows<'t>(p: Var<'t>) -> Var<'t> {
    let k = p.shape()[1];
    let others = Tensor::identity(k).map(|v| 1.0 - v);
    p.matmul(p.tape().constant(others))
}

/// Per-sample `l_neg` as an `N×1` column.
pub fn negative_loss<'t>(scores: Var<'t>, y: &[usize], beta: f64) -> Var<'t> {
    let [n, k] = scores.shape();
    let negatives = one_hot(n, k, y).map(|v| 1.0 - v);
    let log_p = scores.add_col(-scores.log_sum_exp_rows(None));
    let log_one_minus = complement_rows(log_p.exp()).log();
    let weight = log_p.scale(beta).exp();
    -(log_one_minus * weight).mul_const(negatives).sum_rows()
}

/// Label-label discrimination on the raw embeddings `G` (`K×K` dot products).
pub fn label_label_loss<'t>(g: Var<'t>) -> Result<Var<'t>> {
    let k = g.shape()[0];
    if k < 2 {
        return Err(Error::Config(format!("label-label loss needs K >= 2, got {k}")));
    }
    let off = Tensor::identity(k).map(|v| 1.0 - v);
    // zeroed diagonal puts exp(0) = 1 in every denominator
    let dots = g.matmul_t(g).mul_const(off.clone());
    let p = dots.add_col(-dots.log_sum_exp_rows(None)).exp();
    Ok(-complement_rows(p).log().mul_const(off).sum())
}

/// `−Σ_i log p_i[y_i]`, log argument floored.
pub fn cross_entropy<'t>(p: Probabilities<'t>, y: &[usize]) -> Var<'t> {
    -p.0.pick(y).log().sum()
}

/// `(N/n_{y_i})^γ` with `n` the within-batch class count.
pub fn class_weights(own_counts: &[usize], gamma: f64) -> Vec<f64> {
    let n = own_counts.len() as f64;
    own_counts.iter().map(|&c| (n / c as f64).powf(gamma)).collect()
}

pub struct SupConTerms<'t> {
    pub loss: Var<'t>,
    /// Per-anchor contributions, `N×1`.
    pub per_anchor: Var<'t>,
    /// Anchors without any same-class partner in the batch.
    pub skipped_anchors: usize,
}

/// Supervised contrastive loss over L2-normalised features: for each anchor
/// with positives, `−(1/|P(i)|) Σ_{p∈P(i)} log softmax_{a≠i}(z_i·z_a/τ)_p`,
/// summed over anchors. Anchors without positives contribute zero.
pub fn supcon_loss<'t>(features: Features<'t>, y: &[usize], temperature: f64) -> SupConTerms<'t> {
    let f = features.0;
    let tape = f.tape();
    let n = y.len();
    let mut weights = Tensor::zeros(n, n);
    let mut skipped = 0;
    for i in 0..n {
        let partners: Vec<usize> = (0..n).filter(|&p| p != i && y[p] == y[i]).collect();
        if partners.is_empty() {
            skipped += 1;
        }
        for &p in &partners {
            weights.set(i, p, 1.0 / partners.len() as f64);
        }
    }
    if n < 2 || skipped == n {
        let zero = f.sum().scale(0.0);
        return SupConTerms {
            loss: zero,
            per_anchor: tape.constant(Tensor::zeros(n, 1)),
            skipped_anchors: skipped,
        };
    }
    let inv_norm = f.row_norms().add_scalar(crate::similarity::COSINE_EPS).pow(-1.0);
    let z = f.mul_col(inv_norm);
    let logits = z.matmul_t(z).scale(1.0 / temperature);
    let mask: Vec<bool> = (0..n * n).map(|i| i / n != i % n).collect();
    let log_prob = logits.add_col(-logits.log_sum_exp_rows(Some(mask)));
    let per_anchor = -log_prob.mul_const(weights).sum_rows();
    SupConTerms {
        loss: per_anchor.sum(),
        per_anchor,
        skipped_anchors: skipped,
    }
}

/// Switches for the component ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SslclOptions {
    pub use_negative_loss: bool,
    pub consistent_denominator: bool,
}

impl Default for SslclOptions {
    fn default() -> Self {
        Self {
            use_negative_loss: true,
            consistent_denominator: false,
        }
    }
}

pub struct SslclTerms<'t> {
    pub l_pos: Var<'t>,
    pub l_neg: Var<'t>,
    pub weights: Vec<f64>,
    pub label_loss: Var<'t>,
    pub loss: Var<'t>,
}

/// Assembles `L_SSLCL` from a similarity context, the augmented views of the
/// batch and the label embeddings.
pub fn sslcl_loss<'t>(
    ctx: &SimilarityContext<'t>,
    views: &[Var<'t>],
    own_counts: &[usize],
    hp: &HyperParams,
    opts: SslclOptions,
) -> Result<SslclTerms<'t>> {
    let scores = ctx.scores();
    let view_scores: Vec<Var<'t>> = views.iter().map(|v| ctx.view_scores(*v)).collect();
    let l_pos = positive_loss(scores, &view_scores, &ctx.z, hp.alpha, opts.consistent_denominator);
    let l_neg = negative_loss(scores, &ctx.z, hp.beta);
    let weights = class_weights(own_counts, hp.gamma);
    let per_sample = if opts.use_negative_loss { l_pos + l_neg } else { l_pos };
    let weighted = per_sample.mul_const(Tensor::column_vector(weights.clone())).sum();
    let label_loss = label_label_loss(ctx.g)?;
    let loss = weighted + label_loss.scale(hp.lambda);
    Ok(SslclTerms {
        l_pos,
        l_neg,
        weights,
        label_loss,
        loss,
    })
}

/// `L_Train = L_aux + η·L_CE`.
pub fn total_loss<'t>(aux: Var<'t>, ce: Var<'t>, eta: f64) -> Var<'t> {
    aux + ce.scale(eta)
}
