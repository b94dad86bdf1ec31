//! Release checks. Each test writes one `criterion N: PASS|FAIL ...` line
//! straight to stderr, so the verdicts show up even when output is captured.

mod common;

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sslcl::config::{LossMode, RunConfig};
use sslcl::dataset::Dataset;
use sslcl::harness::{ablation_suite, batch_size_sweep, load_data, split, AblationReport, Runner, Split, SWEEP_MODES};
use sslcl::metrics::weighted_f1;
use sslcl::similarity::{centered, soft_hgr_batch, soft_hgr_pair, soft_hgr_pair_total, Measure};
use sslcl::trainer::{gradcheck, train, GRADCHECK_TOL};

fn verdict(n: u32, ok: bool, detail: &str) {
    let line = format!("criterion {n}: {} {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn note(text: &str) {
    let _ = std::io::stderr().lock().write_all(format!("  {text}\n").as_bytes());
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// The meld-like preset at n = 2000 with the default five seeds.
fn benchmark() -> &'static (RunConfig, Dataset, Split) {
    static DATA: OnceLock<(RunConfig, Dataset, Split)> = OnceLock::new();
    DATA.get_or_init(|| {
        let config = RunConfig::default();
        assert_eq!(config.data.preset, "meld-like");
        assert_eq!(config.data.n, 2000);
        assert_eq!(config.seeds.len(), 5);
        let data = load_data(&config).unwrap();
        let parts = split(&data, config.split_seed).unwrap();
        (config, data, parts)
    })
}

fn ablation() -> &'static AblationReport {
    static REPORT: OnceLock<AblationReport> = OnceLock::new();
    REPORT.get_or_init(|| {
        let (config, _, parts) = benchmark();
        ablation_suite(config, &Runner { split: parts, jobs: jobs() }).unwrap()
    })
}

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut all = true;
    let mut parts = Vec::new();
    for (name, mode, aug) in [
        ("sslcl+aug", LossMode::Sslcl, true),
        ("sslcl-aug", LossMode::Sslcl, false),
        ("supcon", LossMode::Supcon, false),
        ("ce-only", LossMode::CeOnly, false),
    ] {
        let mut c = RunConfig::default();
        c.loss_mode = mode;
        c.augmentation = aug;
        let r = gradcheck(&c, 20, 0).unwrap();
        assert!(r.instances >= 20);
        all &= r.passed && r.worst_rel_err < GRADCHECK_TOL;
        worst = worst.max(r.worst_rel_err);
        parts.push(format!("{name} {:.2e} over {} entries", r.worst_rel_err, r.entries_checked));
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = all && secs < 60.0;
    verdict(1, ok, &format!("max rel. err {worst:.2e} (< 1e-4), {secs:.1}s; {}", parts.join(", ")));
    assert!(ok);
}

#[test]
fn criterion_2_pair_sum_equals_batch_objective() {
    let (mut gap, mut cross_gap) = (0.0f64, 0.0f64);
    for seed in 0..100 {
        let inst = instance(1000 + seed, 2..=6);
        let (f_c, _, gz_c) = centered(&inst.f, &inst.g, &inst.y);
        let total: f64 = (0..inst.y.len())
            .map(|i| soft_hgr_pair(&f_c, &gz_c, f_c.row(i), gz_c.row(i)).unwrap())
            .sum();
        gap = gap.max((total - soft_hgr_batch(&f_c, &gz_c).unwrap()).abs());
        cross_gap = cross_gap.max((total - soft_hgr_pair_total(&f_c, &gz_c).unwrap()).abs());
    }
    let ok = gap < 1e-10;
    verdict(
        2,
        ok,
        &format!(
            "max |sum of pairs - trace-form batch| = {gap:.3e} (< 1e-10); \
             against the cross-covariance form ||cov(F,Gz)||^2 the gap is {cross_gap:.3e}"
        ),
    );
    if !ok {
        note("the pair formula sums to inner - 1/2 ||F^T Gz/(N-1)||_F^2, not inner - 1/2 tr(cov F cov Gz);");
        note("the two agree only when the cross terms vanish (e.g. d = 1 needs (sum fg)^2 = sum f^2 sum g^2)");
    }
    assert!(ok, "sum of pairs differs from the trace-form batch objective by {gap:e}");
}

#[test]
fn criterion_3_oracle_equivalence() {
    let mut worst: Vec<(String, f64)> = Vec::new();
    for measure in [Measure::SoftHgr, Measure::Dot, Measure::Cosine] {
        for (name, g) in oracle_gaps(100, measure) {
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some(slot) => slot.1 = slot.1.max(g),
                None => worst.push((name, g)),
            }
        }
    }
    let ok = worst.iter().all(|(_, g)| *g < 1e-10);
    let detail: Vec<String> = worst.iter().map(|(n, g)| format!("{n} {g:.1e}")).collect();
    verdict(3, ok, &format!("max gap vs 256-bit oracle over 100 instances x 3 measures: {}", detail.join(", ")));
    assert!(ok);
}

#[test]
fn criterion_4_batch_size_stability() {
    let (config, _, parts) = benchmark();
    let sweep = batch_size_sweep(config, &Runner { split: parts, jobs: jobs() }, &[2, 32], &SWEEP_MODES).unwrap();
    let drop = |m: LossMode| sweep.stability[&m.to_string()];
    for m in SWEEP_MODES {
        let (a, b) = (sweep.cell(m, 2).unwrap(), sweep.cell(m, 32).unwrap());
        note(&format!("{m:<7} bs=2 {:.4}±{:.4}  bs=32 {:.4}±{:.4}  drop {:+.4}", a.mean_wf1, a.sd_wf1, b.mean_wf1, b.sd_wf1, drop(m)));
    }
    let (ours, supcon) = (drop(LossMode::Sslcl), drop(LossMode::Supcon));
    let ok = supcon > ours && ours.abs() < 0.03;
    verdict(4, ok, &format!("w-F1 drop bs=2 -> bs=32: sslcl {ours:+.4} (|.| < 0.03), supcon {supcon:+.4} (> sslcl)"));
    assert!(ok);
}

#[test]
fn criterion_5_similarity_ablation() {
    let r = ablation();
    let full = r.arm("full").unwrap().mean_wf1;
    let (dot, cos) = (r.deltas["similarity=dot"], r.deltas["similarity=cosine"]);
    let ordered = dot <= 0.0 && cos <= 0.0;
    if !ordered {
        note("WARNING: soft-hgr does not lead every other similarity measure");
    }
    verdict(
        5,
        true,
        &format!(
            "report emitted; soft-hgr {full:.4}, dot {dot:+.4}, cosine {cos:+.4} (ordering {})",
            if ordered { "holds" } else { "violated, warning only" }
        ),
    );
}

#[test]
fn criterion_6_component_ablations() {
    let (_, _, parts) = benchmark();
    let r = ablation();
    let mut warnings = Vec::new();
    for arm in ["-augmentation", "-negative-loss", "-label-loss"] {
        let d = r.deltas[arm];
        note(&format!("{arm:<15} {d:+.4}"));
        if d > 0.0 {
            warnings.push(arm);
        }
    }
    if !warnings.is_empty() {
        note(&format!("WARNING: above the full configuration: {}", warnings.join(", ")));
    }

    let k = parts.test.header.k;
    let counts = parts.test.class_counts();
    let n: usize = counts.iter().sum();
    let full = &r.arm("full").unwrap().mean_per_class_f1;
    let ablated = &r.arm("-augmentation").unwrap().mean_per_class_f1;
    let drops: Vec<f64> = full.iter().zip(ablated).map(|(a, b)| a - b).collect();
    let worst = (0..k).max_by(|&a, &b| drops[a].total_cmp(&drops[b])).unwrap();
    let minority = |c: usize| (counts[c] as f64) < n as f64 / k as f64;
    let ok = minority(worst);
    let names = &parts.test.header.label_names;
    verdict(
        6,
        ok,
        &format!(
            "-augmentation drops most on {} ({:+.4}, {} of {n} test samples, minority = share < 1/K); \
             component deltas soft, {} warning(s)",
            names[worst], -drops[worst], counts[worst], warnings.len()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_7_label_embeddings_stay_distinct() {
    let (config, _, parts) = benchmark();
    let mut max_cos = f64::NEG_INFINITY;
    let mut all = true;
    for &seed in &config.seeds {
        let run = train(config, seed, &parts.train, None).unwrap();
        let g = run.model.label_embeddings();
        for a in 0..g.rows() {
            for b in a + 1..g.rows() {
                let (x, y) = (g.row(a), g.row(b));
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                let norm = |v: &[f64]| v.iter().map(|p| p * p).sum::<f64>().sqrt();
                max_cos = max_cos.max(dot / (norm(x) * norm(y)));
            }
        }
        let label = run.log.epoch_means(|s| s.l_label);
        let (first, last) = (label[0], *label.last().unwrap());
        note(&format!("seed {seed}: L_Label epoch 0 {first:.6} -> final {last:.6}"));
        all &= last < first;
    }
    let ok = all && max_cos < 0.99;
    verdict(7, ok, &format!("max pairwise cosine of G {max_cos:.4} (< 0.99); L_Label fell on every seed: {all}"));
    assert!(ok);
}

#[test]
fn criterion_8_determinism() {
    let (config, _, parts) = benchmark();
    let mut ok = true;
    for mode in SWEEP_MODES {
        let mut c = config.clone();
        c.loss_mode = mode;
        c.epochs = 3;
        let a = train(&c, 11, &parts.train, Some(&parts.val)).unwrap();
        let b = train(&c, 11, &parts.train, Some(&parts.val)).unwrap();
        ok &= a.log.to_jsonl().as_bytes() == b.log.to_jsonl().as_bytes();
        ok &= a.checkpoint.to_json().as_bytes() == b.checkpoint.to_json().as_bytes();
    }
    verdict(8, ok, "metrics logs and checkpoints byte-identical across repeated runs for all loss modes");
    assert!(ok);
}

#[test]
fn criterion_9_weighted_f1_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=8);
        let n = rng.random_range(1..=300);
        // skewed predictions so some classes go unpredicted or unseen
        let golds: Vec<usize> = (0..n).map(|_| rng.random_range(0..k).min(rng.random_range(0..k))).collect();
        let preds: Vec<usize> = golds
            .iter()
            .map(|&g| if rng.random_bool(0.6) { g } else { rng.random_range(0..k) })
            .collect();
        let r = weighted_f1(&preds, &golds, k).unwrap();
        let (w, per) = brute_force_weighted_f1(&preds, &golds, k);
        if r.weighted.to_bits() != w.to_bits() || r.per_class != per {
            mismatches += 1;
        }
    }
    let ok = mismatches == 0;
    verdict(9, ok, &format!("{mismatches} of 1000 randomized cases differ from the confusion-matrix oracle (bitwise)"));
    assert!(ok);
}
