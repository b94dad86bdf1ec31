//! Shared test support: random small instances and a 256-bit direct-formula
//! evaluator for every loss term.
#![allow(dead_code)]

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use astro_float::{BigFloat, Consts, RoundingMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sslcl::tensor::Tensor;

const P: usize = 256;
const RM: RoundingMode = RoundingMode::ToEven;

thread_local! {
    static CC: RefCell<Consts> = RefCell::new(Consts::new().expect("constants cache"));
}

/// Extended-precision real.
#[derive(Clone, Debug)]
pub struct X(BigFloat);

impl X {
    pub fn f(v: f64) -> X {
        X(BigFloat::from_f64(v, P))
    }
    pub fn zero() -> X {
        X::f(0.0)
    }
    pub fn one() -> X {
        X::f(1.0)
    }
    pub fn exp(&self) -> X {
        CC.with(|cc| X(self.0.exp(P, RM, &mut cc.borrow_mut())))
    }
    pub fn ln(&self) -> X {
        CC.with(|cc| X(self.0.ln(P, RM, &mut cc.borrow_mut())))
    }
    pub fn sqrt(&self) -> X {
        X(self.0.sqrt(P, RM))
    }
    /// `self^e` for `self > 0`, or `0^e = 0` for `e > 0`.
    pub fn powf(&self, e: f64) -> X {
        if self.0.is_zero() {
            return if e == 0.0 { X::one() } else { X::zero() };
        }
        (self.ln() * X::f(e)).exp()
    }
    pub fn to_f64(&self) -> f64 {
        self.0.to_string().parse().expect("decimal rendering of a BigFloat")
    }
}

impl Add for X {
    type Output = X;
    fn add(self, o: X) -> X {
        X(self.0.add(&o.0, P, RM))
    }
}
impl Sub for X {
    type Output = X;
    fn sub(self, o: X) -> X {
        X(self.0.sub(&o.0, P, RM))
    }
}
impl Mul for X {
    type Output = X;
    fn mul(self, o: X) -> X {
        X(self.0.mul(&o.0, P, RM))
    }
}
impl Div for X {
    type Output = X;
    fn div(self, o: X) -> X {
        X(self.0.div(&o.0, P, RM))
    }
}
impl Neg for X {
    type Output = X;
    fn neg(self) -> X {
        X(self.0.neg())
    }
}

pub fn sum(it: impl IntoIterator<Item = X>) -> X {
    it.into_iter().fold(X::zero(), |a, b| a + b)
}

pub type XMat = Vec<Vec<X>>;

pub fn lift(t: &Tensor) -> XMat {
    (0..t.rows()).map(|r| t.row(r).iter().map(|&v| X::f(v)).collect()).collect()
}

pub fn dotx(a: &[X], b: &[X]) -> X {
    sum(a.iter().zip(b).map(|(x, y)| x.clone() * y.clone()))
}

fn col_means(m: &XMat) -> Vec<X> {
    let n = X::f(m.len() as f64);
    (0..m[0].len())
        .map(|c| sum(m.iter().map(|row| row[c].clone())) / n.clone())
        .collect()
}

fn minus_row(m: &XMat, mu: &[X]) -> XMat {
    m.iter()
        .map(|row| row.iter().zip(mu).map(|(a, b)| a.clone() - b.clone()).collect())
        .collect()
}

/// Which similarity the oracle scores with.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OracleMeasure {
    SoftHgr,
    Dot,
    Cosine,
}

/// Literal similarity scores of the full view and of each augmented view.
pub struct OracleScores {
    pub full: XMat,
    pub views: Vec<XMat>,
}

pub fn oracle_scores(
    f: &Tensor,
    g: &Tensor,
    z: &[usize],
    views: &[Tensor],
    measure: OracleMeasure,
) -> OracleScores {
    let fx = lift(f);
    let gx = lift(g);
    let n = fx.len();
    let k = gx.len();
    let score_rows = |rows_raw: &XMat| -> XMat {
        match measure {
            OracleMeasure::Dot => rows_raw
                .iter()
                .map(|r| gx.iter().map(|gk| dotx(r, gk)).collect())
                .collect(),
            OracleMeasure::Cosine => rows_raw
                .iter()
                .map(|r| {
                    gx.iter()
                        .map(|gk| {
                            let den = dotx(r, r).sqrt() * dotx(gk, gk).sqrt() + X::f(1e-12);
                            dotx(r, gk) / den
                        })
                        .collect()
                })
                .collect(),
            OracleMeasure::SoftHgr if n < 2 => rows_raw
                .iter()
                .map(|r| gx.iter().map(|gk| dotx(r, gk)).collect())
                .collect(),
            OracleMeasure::SoftHgr => {
                let mu = col_means(&fx);
                let f_c = minus_row(&fx, &mu);
                let g_c = minus_row(&gx, &col_means(&gx));
                let s = X::one() / X::f((n - 1) as f64);
                let cov = |a: &[X], b: &[X]| dotx(a, b) * s.clone();
                minus_row(rows_raw, &mu)
                    .iter()
                    .map(|fi| {
                        (0..k)
                            .map(|j| {
                                let reg = sum((0..n).map(|l| cov(fi, &f_c[l]) * cov(&g_c[j], &g_c[z[l]])));
                                cov(fi, &g_c[j]) - X::f(0.5) * reg
                            })
                            .collect()
                    })
                    .collect()
            }
        }
    };
    OracleScores {
        full: score_rows(&fx),
        views: views.iter().map(|v| score_rows(&lift(v))).collect(),
    }
}

/// Per-sample positive loss with the shared (full-view) denominator.
pub fn oracle_positive(s: &OracleScores, y: &[usize], alpha: f64) -> Vec<f64> {
    (0..y.len())
        .map(|i| {
            let yi = y[i];
            let aug = sum(s.views.iter().map(|v| v[i][yi].exp()));
            let d = sum(s.full[i].iter().map(X::exp)) + aug;
            let numerators = std::iter::once(&s.full[i][yi]).chain(s.views.iter().map(|v| &v[i][yi]));
            let total = sum(numerators.map(|num| {
                let p = num.exp() / d.clone();
                p.ln() * (X::one() - p).powf(alpha)
            }));
            (-total).to_f64()
        })
        .collect()
}

pub fn oracle_negative(s: &OracleScores, y: &[usize], beta: f64) -> Vec<f64> {
    (0..y.len())
        .map(|i| {
            let d = sum(s.full[i].iter().map(X::exp));
            let total = sum((0..s.full[i].len()).filter(|&k| k != y[i]).map(|k| {
                let p = s.full[i][k].exp() / d.clone();
                (X::one() - p.clone()).ln() * p.powf(beta)
            }));
            (-total).to_f64()
        })
        .collect()
}

pub fn oracle_label_label(g: &Tensor) -> f64 {
    let gx = lift(g);
    let k = gx.len();
    let mut total = X::zero();
    for i in 0..k {
        let d = sum((0..k).filter(|&m| m != i).map(|m| dotx(&gx[i], &gx[m]).exp())) + X::one();
        for j in (0..k).filter(|&j| j != i) {
            let p = dotx(&gx[i], &gx[j]).exp() / d.clone();
            total = total + (X::one() - p).ln();
        }
    }
    (-total).to_f64()
}

/// CE from logits: softmax then `−Σ log p[y]`.
pub fn oracle_cross_entropy(logits: &Tensor, y: &[usize]) -> f64 {
    let lx = lift(logits);
    let total = sum(lx.iter().zip(y).map(|(row, &yi)| {
        let d = sum(row.iter().map(X::exp));
        (row[yi].exp() / d).ln()
    }));
    (-total).to_f64()
}

pub fn oracle_supcon(f: &Tensor, y: &[usize], tau: f64) -> f64 {
    let fx = lift(f);
    let n = fx.len();
    let z: XMat = fx
        .iter()
        .map(|r| {
            let norm = dotx(r, r).sqrt() + X::f(1e-12);
            r.iter().map(|v| v.clone() / norm.clone()).collect()
        })
        .collect();
    let t = X::f(tau);
    let mut total = X::zero();
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&p| p != i && y[p] == y[i]).collect();
        if pos.is_empty() {
            continue;
        }
        let d = sum((0..n).filter(|&a| a != i).map(|a| (dotx(&z[i], &z[a]) / t.clone()).exp()));
        let inner = sum(pos.iter().map(|&p| ((dotx(&z[i], &z[p]) / t.clone()).exp() / d.clone()).ln()));
        total = total - inner / X::f(pos.len() as f64);
    }
    total.to_f64()
}

pub fn randn(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor {
        shape: [rows, cols],
        data: (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect(),
    }
}

/// A random small problem: features, label table, labels and up to three
/// augmented views (noisy copies of `F`).
pub struct Instance {
    pub f: Tensor,
    pub g: Tensor,
    pub y: Vec<usize>,
    pub views: Vec<Tensor>,
}

pub fn instance(seed: u64, n_range: std::ops::RangeInclusive<usize>) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(n_range);
    let k = rng.random_range(2..=4);
    let d = rng.random_range(2..=5);
    let f = randn(n, d, 1.0, &mut rng);
    let g = randn(k, d, 1.0, &mut rng);
    let y = (0..n).map(|_| rng.random_range(0..k)).collect();
    let n_views = rng.random_range(0..=3);
    let views = (0..n_views)
        .map(|_| {
            let noise = randn(n, d, 0.5, &mut rng);
            f.zip_map(&noise, |a, b| a + b)
        })
        .collect();
    Instance { f, g, y, views }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Independent confusion-matrix route to weighted F1.
pub fn brute_force_weighted_f1(preds: &[usize], golds: &[usize], k: usize) -> (f64, Vec<f64>) {
    let mut m = vec![vec![0usize; k]; k];
    for (&p, &g) in preds.iter().zip(golds) {
        m[g][p] += 1;
    }
    let per: Vec<f64> = (0..k)
        .map(|c| {
            let tp = m[c][c] as f64;
            let pred: usize = (0..k).map(|r| m[r][c]).sum();
            let gold: usize = m[c].iter().sum();
            let precision = if pred == 0 { 0.0 } else { tp / pred as f64 };
            let recall = if gold == 0 { 0.0 } else { tp / gold as f64 };
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .collect();
    let n = golds.len() as f64;
    let w = (0..k).map(|c| per[c] * m[c].iter().sum::<usize>() as f64 / n).sum();
    (w, per)
}

/// Library values of every loss term on one instance.
pub struct LibraryLosses {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    pub label_label: f64,
    pub cross_entropy: f64,
    pub supcon: f64,
}

pub fn library_losses(
    inst: &Instance,
    logits: &Tensor,
    measure: sslcl::similarity::Measure,
    hp: &sslcl::losses::HyperParams,
) -> LibraryLosses {
    use sslcl::autodiff::Tape;
    use sslcl::encoder::{Features, Probabilities};
    use sslcl::losses::*;
    use sslcl::similarity::SimilarityContext;

    let tape = Tape::new();
    let f = tape.constant(inst.f.clone());
    let g = tape.constant(inst.g.clone());
    let ctx = SimilarityContext::new(f, g, &inst.y, measure).unwrap();
    let scores = ctx.scores();
    let views: Vec<_> = inst
        .views
        .iter()
        .map(|v| ctx.view_scores(tape.constant(v.clone())))
        .collect();
    let l = tape.constant(logits.clone());
    let p = Probabilities(l.add_col(-l.log_sum_exp_rows(None)).exp());
    LibraryLosses {
        positive: positive_loss(scores, &views, &inst.y, hp.alpha, false).value().data,
        negative: negative_loss(scores, &inst.y, hp.beta).value().data,
        label_label: label_label_loss(g).unwrap().item(),
        cross_entropy: cross_entropy(p, &inst.y).item(),
        supcon: supcon_loss(Features(f), &inst.y, hp.temperature).loss.item(),
    }
}

pub fn oracle_measure(m: sslcl::similarity::Measure) -> OracleMeasure {
    match m {
        sslcl::similarity::Measure::SoftHgr => OracleMeasure::SoftHgr,
        sslcl::similarity::Measure::Dot => OracleMeasure::Dot,
        sslcl::similarity::Measure::Cosine => OracleMeasure::Cosine,
    }
}

/// Largest |library − oracle| per term over `count` random instances.
pub fn oracle_gaps(count: u64, measure: sslcl::similarity::Measure) -> [(String, f64); 5] {
    let hp = sslcl::losses::HyperParams::default();
    let mut gaps = [0.0f64; 5];
    for seed in 0..count {
        let inst = instance(seed, 2..=6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let logits = randn(inst.y.len(), inst.g.rows(), 1.5, &mut rng);
        let lib = library_losses(&inst, &logits, measure, &hp);
        let s = oracle_scores(&inst.f, &inst.g, &inst.y, &inst.views, oracle_measure(measure));
        let found = [
            max_abs_diff(&lib.positive, &oracle_positive(&s, &inst.y, hp.alpha)),
            max_abs_diff(&lib.negative, &oracle_negative(&s, &inst.y, hp.beta)),
            (lib.label_label - oracle_label_label(&inst.g)).abs(),
            (lib.cross_entropy - oracle_cross_entropy(&logits, &inst.y)).abs(),
            (lib.supcon - oracle_supcon(&inst.f, &inst.y, hp.temperature)).abs(),
        ];
        for (g, f) in gaps.iter_mut().zip(found) {
            *g = g.max(f);
        }
    }
    let names = ["positive_loss", "negative_loss", "label_label_loss", "cross_entropy", "supcon_loss"];
    std::array::from_fn(|i| (names[i].to_string(), gaps[i]))
}
